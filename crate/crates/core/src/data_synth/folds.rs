use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::catalog::ClassCatalog;
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub train_classes: BTreeSet<u32>,
    pub test_classes: BTreeSet<u32>,
}

/// Contiguous class blocks per fold: fold `i`
/// tests classes `[i*m, (i+1)*m)`.
pub fn make_fold_split(catalog: &ClassCatalog, num_folds: usize) -> Result<Vec<FoldSplit>> {
    let n = catalog.len();
    if num_folds == 0 || !n.is_multiple_of(num_folds) {
        return Err(invalid(format!("{n} classes not divisible into {num_folds} folds")));
    }
    if num_folds < 2 {
        return Err(invalid("need at least 2 folds so every fold has training classes"));
    }
    let per = n / num_folds;
    Ok((0..num_folds)
        .map(|fold_id| {
            let test: BTreeSet<u32> = ((fold_id * per) as u32..((fold_id + 1) * per) as u32).collect();
            let train = catalog.class_ids().filter(|c| !test.contains(c)).collect();
            FoldSplit { fold_id, train_classes: train, test_classes: test }
        })
        .collect())
}

pub fn validate_folds(folds: &[FoldSplit], catalog: &ClassCatalog) -> Result<()> {
    let mut seen = BTreeSet::new();
    for f in folds {
        if !f.train_classes.is_disjoint(&f.test_classes) {
            return Err(invalid(format!("fold {} train/test overlap", f.fold_id)));
        }
        for c in f.train_classes.iter().chain(&f.test_classes) {
            catalog.get(*c)?;
        }
        for c in &f.test_classes {
            if !seen.insert(*c) {
                return Err(invalid(format!("class {c} tested in more than one fold")));
            }
        }
    }
    if seen.len() != catalog.len() {
        return Err(invalid("fold test sets do not cover every class"));
    }
    Ok(())
}

pub fn write_fold_file(path: &Path, folds: &[FoldSplit]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(folds)?)?;
    Ok(())
}

pub fn read_fold_file(path: &Path) -> Result<Vec<FoldSplit>> {
    if !path.exists() {
        return Err(crate::error::QsrError::MissingPath(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
