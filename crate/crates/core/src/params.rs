//! Named parameter collections shared by models, optimizers and checkpoints.

use ndarray::{ArrayD, IxDyn, Zip};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// An ordered list of named tensors.
///
/// Gradients use the same layout as the parameters they belong to, so
/// optimizers and finite-difference checks can walk both in lockstep.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: ArrayD<f64>) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[ArrayD<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ArrayD<f64>] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &ArrayD<f64> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut ArrayD<f64> {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| ArrayD::zeros(IxDyn(t.shape()))).collect(),
        }
    }

    /// Concatenate every tensor in order (row-major).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend(t.iter().copied());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape {
                what: "flat parameter vector",
                expected: self.num_scalars(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            for v in t.iter_mut() {
                *v = flat[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    /// `self += scale * other`. Layouts must match.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        assert_eq!(self.len(), other.len(), "parameter layouts differ");
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            Zip::from(a).and(b).for_each(|a, &b| *a += scale * b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.iter() {
            hasher.update(name.as_bytes());
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in t.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.push("a", arr1(&[1.0, 2.0]).into_dyn());
        p.push("b", ndarray::arr2(&[[3.0], [4.0]]).into_dyn());
        p
    }

    #[test]
    fn flat_roundtrip() {
        let p = sample();
        assert_eq!(p.to_flat(), vec![1.0, 2.0, 3.0, 4.0]);
        let mut q = p.zeros_like();
        q.set_flat(&p.to_flat()).unwrap();
        assert!(q.bit_eq(&p));
        assert!(q.set_flat(&[1.0]).is_err());
    }

    #[test]
    fn checksum_tracks_values() {
        let p = sample();
        let mut q = p.clone();
        assert_eq!(p.checksum(), q.checksum());
        q.get_mut(0)[[0]] = 1.5;
        assert_ne!(p.checksum(), q.checksum());
    }

    #[test]
    fn bit_eq_sees_signed_zero() {
        let mut p = ParamSet::new();
        p.push("z", arr1(&[0.0]).into_dyn());
        let mut q = ParamSet::new();
        q.push("z", arr1(&[-0.0]).into_dyn());
        assert_eq!(p, q);
        assert!(!p.bit_eq(&q));
    }
}
