//! Merging of rare classes into a single catch-all class.

use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};

pub const OTHER: &str = "Other";

/// Relabeling produced by [`group_rare_classes`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub threshold: usize,
    pub original: Vec<String>,
    /// `mapping[old] = new`.
    pub mapping: Vec<usize>,
    pub classes: Vec<String>,
}

/// Relabels every class with fewer than `threshold` training samples to
/// `Other`, appended after the surviving classes. Counts come from the
/// training split only; validation and test samples follow the same map.
pub fn group_rare_classes(ds: &Dataset, seed: u64, threshold: i64) -> Result<(Dataset, LabelMap)> {
    if threshold <= 0 {
        return Err(Error::Config(format!(
            "grouping threshold must be positive, got {threshold}"
        )));
    }
    let threshold = threshold as usize;
    let counts = ds.class_counts(&ds.split_indices(seed, Split::Train));
    let mut classes = Vec::new();
    let mut mapping = vec![usize::MAX; ds.num_classes()];
    for (c, &n) in counts.iter().enumerate() {
        if n >= threshold {
            mapping[c] = classes.len();
            classes.push(ds.class_names[c].clone());
        }
    }
    if classes.len() < ds.num_classes() {
        if classes.iter().any(|c| c == OTHER) {
            return Err(Error::Config(format!("a kept class is already named `{OTHER}`")));
        }
        let other = classes.len();
        mapping
            .iter_mut()
            .filter(|m| **m == usize::MAX)
            .for_each(|m| *m = other);
        classes.push(OTHER.to_string());
    }
    let mut out = ds.clone();
    for s in &mut out.samples {
        s.label = mapping[s.label];
    }
    out.class_names = classes.clone();
    Ok((
        out,
        LabelMap {
            threshold,
            original: ds.class_names.clone(),
            mapping,
            classes,
        },
    ))
}
