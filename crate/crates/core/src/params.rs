//! Named trainable tensors and their binding into a [`Graph`].

use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        self.tensors[id.0].expect_same_shape(&t)?;
        self.tensors[id.0] = t;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Insert every tensor as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Copy values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Config("parameter layout differs from checkpoint".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.expect_same_shape(src)?;
            *dst = src.clone();
        }
        Ok(())
    }
}

/// Graph handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: &[Var]) -> Self {
        Self(vars.to_vec())
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Symmetric uniform initialisation `U(−b, b)` with `b = gain·√(3 / fan_in)`.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

/// Gain for layers followed by ReLU.
pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;
/// Gain for layers feeding a sigmoid or a linear output.
pub const LINEAR_GAIN: f64 = 1.0;

/// Adds a `C_out×C_in×k×k` conv kernel and optional zero bias.
pub fn add_conv(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    bias: bool,
    gain: f64,
    rng: &mut ChaCha8Rng,
) -> (ParamId, Option<ParamId>) {
    let w = store.add(format!("{name}.weight"), uniform_fan_in(&[cout, cin, k, k], cin * k * k, gain, rng));
    let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
    (w, b)
}

/// Adds an `out×in` weight and zero bias.
pub fn add_linear(
    store: &mut ParamStore,
    name: &str,
    fin: usize,
    fout: usize,
    gain: f64,
    rng: &mut ChaCha8Rng,
) -> (ParamId, ParamId) {
    let w = store.add(format!("{name}.weight"), uniform_fan_in(&[fout, fin], fin, gain, rng));
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fout]));
    (w, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = uniform_fan_in(&[4, 9], 9, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let b = uniform_fan_in(&[4, 9], 9, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        let bound = (3.0f64 / 9.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn load_from_checks_layout() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros(&[2]));
        let mut b = ParamStore::new();
        b.add("w", Tensor::full(&[2], 1.0));
        a.load_from(&b).unwrap();
        assert_eq!(a.get(ParamId(0)).data(), &[1.0, 1.0]);
        let mut c = ParamStore::new();
        c.add("v", Tensor::zeros(&[2]));
        assert!(a.load_from(&c).is_err());
    }
}
