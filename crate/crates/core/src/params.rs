//! Named learnable tensors.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Ordered map from parameter name to value. Iteration order is the
/// lexicographic name order, which fixes the order of every reduction over
/// parameters (gradient norms, checkpoint layout).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<Var> {
        Ok(g.param(name, self.get(name)?))
    }

    /// Convolution weight `[out, in, k, k]` plus optional zero bias `[out]`.
    pub fn init_conv<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        prefix: &str,
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        bias: bool,
    ) {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = (3.0 / fan_in).sqrt();
        self.insert(
            format!("{prefix}.w"),
            Tensor::uniform(&[out_ch, in_ch, kernel, kernel], bound, rng),
        );
        if bias {
            self.insert(format!("{prefix}.b"), Tensor::zeros(&[out_ch]));
        }
    }

    /// Transposed-convolution weight `[in, out, k, k]` plus zero bias `[out]`.
    pub fn init_deconv<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) {
        // each output pixel sees about in·k²/s² inputs
        let fan_in = (in_ch * kernel * kernel) as f64 / (stride * stride) as f64;
        let bound = (3.0 / fan_in).sqrt();
        self.insert(
            format!("{prefix}.w"),
            Tensor::uniform(&[in_ch, out_ch, kernel, kernel], bound, rng),
        );
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[out_ch]));
    }
}
