//! Labeled splits, forget specifications and data-access accounting.

use std::collections::BTreeSet;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
}

impl Split {
    pub fn new(x: Array2<f64>, y: Vec<usize>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Shape {
                what: "split labels",
                expected: x.nrows(),
                got: y.len(),
            });
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Split {
        Split {
            x: self.x.select(Axis(0), indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Indices whose label satisfies `keep`.
    pub fn indices_where(&self, keep: impl Fn(usize) -> bool) -> Vec<usize> {
        self.y
            .iter()
            .enumerate()
            .filter(|&(_, &c)| keep(c))
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub num_classes: usize,
    /// Per-component clamp for perturbed inputs, if the data has a natural range.
    pub input_bounds: Option<(f64, f64)>,
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        self.train.x.ncols()
    }
}

/// The forget classes C_f and the training indices that make up D_f.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgetSpec {
    pub classes: BTreeSet<usize>,
    pub indices: Vec<usize>,
}

impl ForgetSpec {
    /// Class-level forgetting: every training sample of the given classes.
    pub fn for_classes(train: &Split, num_classes: usize, classes: impl IntoIterator<Item = usize>) -> Result<Self> {
        let classes: BTreeSet<usize> = classes.into_iter().collect();
        let spec = Self {
            indices: train.indices_where(|c| classes.contains(&c)),
            classes,
        };
        spec.validate(train, num_classes)?;
        Ok(spec)
    }

    pub fn validate(&self, train: &Split, num_classes: usize) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::config("forget class set is empty"));
        }
        if let Some(&c) = self.classes.iter().find(|&&c| c >= num_classes) {
            return Err(Error::ClassOutOfRange { class: c, num_classes });
        }
        if self.classes.len() >= num_classes {
            return Err(Error::InvalidMask(num_classes));
        }
        for &i in &self.indices {
            let label = *train
                .y
                .get(i)
                .ok_or_else(|| Error::config(format!("forget index {i} out of range")))?;
            if !self.classes.contains(&label) {
                return Err(Error::protocol(format!(
                    "forget index {i} has label {label} outside C_f"
                )));
            }
        }
        Ok(())
    }

    pub fn is_forget_class(&self, c: usize) -> bool {
        self.classes.contains(&c)
    }

    pub fn retain_classes(&self, num_classes: usize) -> Vec<usize> {
        (0..num_classes).filter(|c| !self.classes.contains(c)).collect()
    }

    /// Training indices of D_r (labels outside C_f).
    pub fn retain_indices(&self, train: &Split) -> Vec<usize> {
        train.indices_where(|c| !self.classes.contains(&c))
    }
}

/// Counts training-split reads by forget/retain membership.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessLog {
    pub forget_reads: u64,
    pub retain_reads: u64,
}

impl AccessLog {
    /// Gathers training rows, recording each read.
    pub fn gather(&mut self, train: &Split, forget: &ForgetSpec, indices: &[usize]) -> Split {
        for &i in indices {
            if forget.is_forget_class(train.y[i]) {
                self.forget_reads += 1;
            } else {
                self.retain_reads += 1;
            }
        }
        train.select(indices)
    }

    pub fn merge(&mut self, other: AccessLog) {
        self.forget_reads += other.forget_reads;
        self.retain_reads += other.retain_reads;
    }
}
