//! Named parameter tensors and their binding onto a [`Tape`].

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

/// Parameters keyed by dotted path, e.g. `encoder.blocks.0.attn.u`.
/// Iteration follows path order, which fixes the checkpoint layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<T>) {
        self.map.insert(path.into(), t);
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<T>> {
        self.map.get(path).ok_or_else(|| Error::invalid(format!("missing parameter `{path}`")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<T>> {
        self.map.get_mut(path).ok_or_else(|| Error::invalid(format!("missing parameter `{path}`")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.map.contains_key(path)
    }

    pub fn remove(&mut self, path: &str) -> Option<Tensor<T>> {
        self.map.remove(path)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Scalars under `prefix` (matched on whole path segments).
    pub fn numel_under(&self, prefix: &str) -> usize {
        self.iter().filter(|(p, _)| under(p, prefix)).map(|(_, t)| t.numel()).sum()
    }

    /// Entries under `prefix` with the prefix stripped.
    pub fn sub_store(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (p, t) in self.iter() {
            if under(p, prefix) {
                out.insert(&p[prefix.len() + 1..], t.clone());
            }
        }
        out
    }

    /// Inserts every entry of `other` as `prefix.path`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: ParamStore<T>) {
        for (p, t) in other.map {
            self.insert(join(prefix, &p), t);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Records every tensor as a leaf; `trainable` controls gradient flow.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound { vars: self.map.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable))).collect() }
    }

    /// Shapes and values agree with `other` bit for bit.
    pub fn bit_identical(&self, other: &Self) -> bool {
        self.map.len() == other.map.len()
            && self.map.iter().zip(&other.map).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.f64().to_bits() == y.f64().to_bits())
            })
    }
}

fn under(path: &str, prefix: &str) -> bool {
    path.len() > prefix.len() && path.starts_with(prefix) && path.as_bytes()[prefix.len()] == b'.'
}

/// `prefix.name`, or `name` when the prefix is empty.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars.get(path).copied().ok_or_else(|| Error::invalid(format!("parameter `{path}` not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Per-path gradients; parameters the loss does not reach get zeros.
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>, grads: &Gradients<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (p, v) in self.iter() {
            let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()));
            out.insert(p, g);
        }
        out
    }
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self { vars: iter.into_iter().collect() }
    }
}

/// Initializers used by the model builders.
pub(crate) mod init {
    use super::*;

    /// `N(0, std²)`.
    pub fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
        Tensor::randn(shape.to_vec(), std, rng)
    }

    /// Xavier/Glorot uniform for a `(fan_in, fan_out)` matrix.
    pub fn xavier<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
        let (fan_in, fan_out) = match shape {
            [a, b] => (*a, *b),
            [.., a, b] => (*a, *b),
            _ => (1, 1),
        };
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::uniform(shape.to_vec(), -a, a, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefixes_match_whole_segments() {
        let mut s = ParamStore::<f32>::new();
        s.insert("enc.a", Tensor::zeros([2]));
        s.insert("enc.b", Tensor::zeros([3, 2]));
        s.insert("encoder.c", Tensor::zeros([5]));
        assert_eq!(s.numel_under("enc"), 8);
        assert_eq!(s.sub_store("enc").paths().collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(s.numel(), 13);
    }

    #[test]
    fn missing_path_is_an_error() {
        let s = ParamStore::<f64>::new();
        assert!(s.get("nope").is_err());
    }

    #[test]
    fn unreached_params_get_zero_grads() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::ones([2]));
        s.insert("unused", Tensor::ones([3]));
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, true);
        let loss = tape.sum(b.get("w").unwrap());
        let g = tape.backward(loss).unwrap();
        let gs = b.grads(&tape, &g);
        assert_eq!(gs.get("w").unwrap().to_f64_vec(), vec![1.0, 1.0]);
        assert_eq!(gs.get("unused").unwrap().to_f64_vec(), vec![0.0; 3]);
    }
}
