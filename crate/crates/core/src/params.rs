//! Named parameter sets.
//!
//! A [`ParamSet`] is an ordered name → tensor map. Ordering is lexical, which
//! fixes iteration order (and therefore reduction order) everywhere a set is
//! walked. The hypergradient code treats sets as vectors: `axpy`, `dot` and
//! `norm` act on the concatenation of all tensors in name order.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<S> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<S>) -> Option<Tensor<S>> {
        self.map.insert(name.to_string(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.map.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<S>> {
        self.get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<S>> {
        self.map.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> Self {
        ParamSet {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Replace a leading `from` prefix with `to` on every name.
    pub fn rename_prefix(&self, from: &str, to: &str) -> Self {
        ParamSet {
            map: self
                .map
                .iter()
                .map(|(k, v)| {
                    let name = match k.strip_prefix(from) {
                        Some(rest) => format!("{}{}", to, rest),
                        None => k.clone(),
                    };
                    (name, v.clone())
                })
                .collect(),
        }
    }

    /// Union; entries of `other` win on collisions.
    pub fn merged(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (k, v) in &other.map {
            out.map.insert(k.clone(), v.clone());
        }
        out
    }

    /// Same names and shapes as `other`.
    pub fn check_structure(&self, other: &Self) -> Result<()> {
        if self.map.len() != other.map.len() {
            return Err(Error::StructuralMismatch(format!(
                "{} tensors vs {}",
                self.map.len(),
                other.map.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.map.iter().zip(&other.map) {
            if ka != kb || va.shape() != vb.shape() {
                return Err(Error::StructuralMismatch(format!(
                    "`{}` {:?} vs `{}` {:?}",
                    ka,
                    va.shape(),
                    kb,
                    vb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }

    /// `self += alpha · other` (structures must agree).
    pub fn axpy(&mut self, alpha: S, other: &Self) -> Result<()> {
        self.check_structure(other)?;
        for (a, b) in self.map.values_mut().zip(other.map.values()) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    /// `self + alpha · other` as a new set.
    pub fn plus_scaled(&self, alpha: S, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(alpha, other)?;
        Ok(out)
    }

    pub fn scale(&mut self, alpha: S) {
        for v in self.map.values_mut() {
            v.scale(alpha);
        }
    }

    pub fn dot(&self, other: &Self) -> Result<S> {
        self.check_structure(other)?;
        let mut s = S::zero();
        for (a, b) in self.map.values().zip(other.map.values()) {
            s = s + a.dot(b)?;
        }
        Ok(s)
    }

    pub fn norm(&self) -> S {
        self.map
            .values()
            .map(Tensor::sq_norm)
            .sum::<S>()
            .sqrt()
    }

    pub fn max_abs(&self) -> S {
        self.map
            .values()
            .fold(S::zero(), |m, t| m.max(t.max_abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.map
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(k, _)| k.as_str())
    }

    /// Rescale so the global L2 norm is at most `max_norm`; returns the
    /// pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: S) -> S {
        let n = self.norm();
        if n > max_norm && n > S::zero() {
            self.scale(max_norm / n);
        }
        n
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// FNV-1a over names, shapes and value bit patterns. Equal checksums on
    /// equal structure mean bit-identical values (up to hash collisions).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        let mut buf = Vec::new();
        for (k, v) in &self.map {
            eat(k.as_bytes());
            for &d in v.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            buf.clear();
            for &x in v.data() {
                x.write_le(&mut buf);
            }
            eat(&buf);
        }
        h
    }
}

impl<S: Scalar> FromIterator<(String, Tensor<S>)> for ParamSet<S> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<S>)>>(iter: I) -> Self {
        ParamSet {
            map: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn set(vals: &[(&str, &[f64])]) -> ParamSet<f64> {
        vals.iter()
            .map(|(k, v)| {
                (
                    k.to_string(),
                    Tensor::new([v.len()], v.to_vec()).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn vector_arithmetic() {
        let mut a = set(&[("x", &[1.0, 2.0]), ("y", &[3.0])]);
        let b = set(&[("x", &[1.0, 1.0]), ("y", &[-1.0])]);
        assert_eq!(a.dot(&b).unwrap(), 0.0);
        a.axpy(2.0, &b).unwrap();
        assert_eq!(a.get("x").unwrap().data(), &[3.0, 4.0]);
        assert_eq!(a.get("y").unwrap().data(), &[1.0]);
        assert!((a.norm() - 26f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn structure_mismatch_is_reported() {
        let a = set(&[("x", &[1.0, 2.0])]);
        let b = set(&[("x", &[1.0])]);
        assert!(matches!(
            a.check_structure(&b),
            Err(Error::StructuralMismatch(_))
        ));
        let c = set(&[("z", &[1.0, 2.0])]);
        assert!(a.check_structure(&c).is_err());
    }

    #[test]
    fn clip_and_checksum() {
        let mut a = set(&[("x", &[3.0, 4.0])]);
        let before = a.checksum();
        assert_eq!(a.clip_global_norm(10.0), 5.0);
        assert_eq!(a.checksum(), before);
        a.clip_global_norm(1.0);
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert_ne!(a.checksum(), before);
    }

    #[test]
    fn prefixes() {
        let a = set(&[("decoder.a", &[1.0]), ("encoder.b", &[2.0])]);
        let d = a.filter_prefix("decoder.");
        assert_eq!(d.len(), 1);
        let m = d.rename_prefix("decoder.", "meta_init.");
        assert!(m.contains("meta_init.a"));
        assert_eq!(a.merged(&m).len(), 3);
        let _ = vec![0u8];
    }
}
