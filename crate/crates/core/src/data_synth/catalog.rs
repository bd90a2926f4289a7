use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Star,
    Cross,
    Ring,
    Diamond,
    Hexagon,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Star,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Diamond,
        ShapeKind::Hexagon,
    ];
}

/// Surface pattern painted inside a known-class object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureFamily {
    Solid,
    Stripes,
    Checker,
    Dots,
}

impl TextureFamily {
    pub const ALL: [TextureFamily; 4] =
        [TextureFamily::Solid, TextureFamily::Stripes, TextureFamily::Checker, TextureFamily::Dots];
}

/// Unlabelled clutter painted under the objects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorFamily {
    Grain,
    Waves,
    Blotch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDescriptor {
    pub id: u32,
    pub shape: ShapeKind,
    pub texture: TextureFamily,
    /// Characteristic hue in degrees; object colors jitter around it.
    pub hue_deg: u16,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    pub known_classes: Vec<ClassDescriptor>,
    pub distractor_families: Vec<DistractorFamily>,
}

impl ClassCatalog {
    pub const MAX_CLASSES: usize = ShapeKind::ALL.len() * TextureFamily::ALL.len();

    /// Builds `n` classes with unique (shape, texture) pairs. Consecutive ids
    /// cycle through shapes first, so any contiguous id range mixes shapes.
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(invalid(format!("catalog needs at least 2 known classes, got {n}")));
        }
        if n > Self::MAX_CLASSES {
            return Err(invalid(format!("catalog supports at most {} classes, got {n}", Self::MAX_CLASSES)));
        }
        let shapes = ShapeKind::ALL.len();
        let textures = TextureFamily::ALL.len();
        let known_classes = (0..n)
            .map(|i| ClassDescriptor {
                id: i as u32,
                shape: ShapeKind::ALL[i % shapes],
                texture: TextureFamily::ALL[(i / shapes + i) % textures],
                hue_deg: (i * 360 / n) as u16,
            })
            .collect();
        Ok(Self {
            known_classes,
            distractor_families: vec![DistractorFamily::Grain, DistractorFamily::Waves, DistractorFamily::Blotch],
        })
    }

    pub fn len(&self) -> usize {
        self.known_classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.known_classes.is_empty()
    }

    pub fn get(&self, class_id: u32) -> Result<&ClassDescriptor> {
        self.known_classes
            .get(class_id as usize)
            .ok_or_else(|| invalid(format!("class id {class_id} not in catalog of {} classes", self.len())))
    }

    pub fn class_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.known_classes.iter().map(|c| c.id)
    }
}
