//! Prototype extraction: masked average pooling over support features,
//! global average pooling over query features, and k-shot averaging.

use ndarray::{Array1, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};

use crate::encoder::FeatureMap;
use crate::error::{invalid, QsrError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrototypeKind {
    Foreground,
    Query,
    Background,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype<T> {
    pub vector: Array1<T>,
    pub kind: PrototypeKind,
    pub class_id: Option<u32>,
}

impl<T: Scalar> Prototype<T> {
    pub fn new(vector: Array1<T>, kind: PrototypeKind) -> Self {
        Self { vector, kind, class_id: None }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

fn check_mask<T>(features: &ArrayView3<'_, T>, mask: &ArrayView2<'_, u8>) -> Result<usize> {
    let (_, h, w) = features.dim();
    if mask.dim() != (h, w) {
        return Err(invalid(format!("mask {:?} does not match feature grid {h}x{w}", mask.dim())));
    }
    let count = mask.iter().filter(|&&m| m == 1).count();
    if count == 0 {
        return Err(QsrError::EmptyMask);
    }
    Ok(count)
}

/// Mean of the feature columns where `mask == 1`.
pub fn masked_mean<T: Scalar>(features: ArrayView3<'_, T>, mask: ArrayView2<'_, u8>) -> Result<Array1<T>> {
    let count = check_mask(&features, &mask)?;
    let mut acc = Array1::<T>::zeros(features.dim().0);
    for ((i, j), &m) in mask.indexed_iter() {
        if m == 1 {
            acc += &features.slice(ndarray::s![.., i, j]);
        }
    }
    Ok(acc / T::lit(count as f64))
}

/// Gradient of [`masked_mean`] with respect to the features.
pub fn masked_mean_backward<T: Scalar>(
    grad: ArrayView1<'_, T>,
    mask: ArrayView2<'_, u8>,
    dims: (usize, usize, usize),
) -> Result<Array3<T>> {
    let count = mask.iter().filter(|&&m| m == 1).count();
    if count == 0 {
        return Err(QsrError::EmptyMask);
    }
    let scale = T::lit(1.0 / count as f64);
    let mut out = Array3::<T>::zeros(dims);
    for ((i, j), &m) in mask.indexed_iter() {
        if m == 1 {
            out.slice_mut(ndarray::s![.., i, j]).assign(&(&grad * scale));
        }
    }
    Ok(out)
}

pub fn spatial_mean<T: Scalar>(features: ArrayView3<'_, T>) -> Result<Array1<T>> {
    let (_, h, w) = features.dim();
    if h * w == 0 {
        return Err(invalid("feature map has no spatial positions"));
    }
    Ok(features.sum_axis(Axis(2)).sum_axis(Axis(1)) / T::lit((h * w) as f64))
}

pub fn spatial_mean_backward<T: Scalar>(grad: ArrayView1<'_, T>, dims: (usize, usize, usize)) -> Array3<T> {
    let (c, h, w) = dims;
    let scale = T::lit(1.0 / (h * w) as f64);
    Array3::from_shape_fn((c, h, w), |(ci, _, _)| grad[ci] * scale)
}

/// Foreground prototype from support features and a binary mask at
/// feature resolution.
pub fn masked_average_pool<T: Scalar>(features: &FeatureMap<T>, mask: ArrayView2<'_, u8>) -> Result<Prototype<T>> {
    Ok(Prototype::new(masked_mean(features.data.view(), mask)?, PrototypeKind::Foreground))
}

/// Query prototype: per-channel mean over all positions.
pub fn global_average_pool<T: Scalar>(features: &FeatureMap<T>) -> Result<Prototype<T>> {
    Ok(Prototype::new(spatial_mean(features.data.view())?, PrototypeKind::Query))
}

/// k-shot fusion by element-wise mean.
pub fn fuse_support_prototypes<T: Scalar>(prototypes: &[Prototype<T>]) -> Result<Prototype<T>> {
    let first = prototypes.first().ok_or_else(|| invalid("no support prototypes to fuse"))?;
    let d = first.dim();
    let mut acc = Array1::<T>::zeros(d);
    for p in prototypes {
        if p.dim() != d {
            return Err(invalid(format!("prototype dims differ: {} vs {d}", p.dim())));
        }
        acc += &p.vector;
    }
    Ok(Prototype {
        vector: acc / T::lit(prototypes.len() as f64),
        kind: PrototypeKind::Foreground,
        class_id: first.class_id,
    })
}
