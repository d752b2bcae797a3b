//! Parameterized building blocks recorded onto a [`Graph`].

use rand::Rng;

use super::attention::Segment;
use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// Affine map `x·W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Registers `{prefix}.weight` and `{prefix}.bias`.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_names(
            store,
            &format!("{prefix}.weight"),
            &format!("{prefix}.bias"),
            fan_in,
            fan_out,
            rng,
        )
    }

    pub fn with_names<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        weight_name: &str,
        bias_name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_uniform(weight_name, &[fan_in, fan_out], fan_in, rng)?;
        let bias = store.add_uniform(bias_name, &[fan_out], fan_in, rng)?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        g.linear(x, w, Some(b))
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dims: (usize, usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{prefix}.l1"), dims.0, dims.1, rng)?,
            output: Linear::new(store, &format!("{prefix}.l2"), dims.1, dims.2, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h)?;
        self.output.forward(g, h)
    }
}

/// Multi-head attention with learned query/key/value/output projections.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// `query_dim` feeds `W_q`; `kv_dim` feeds `W_k` and `W_v`.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        query_dim: usize,
        kv_dim: usize,
        channels: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut proj = |tag: &str, din: usize, r: &mut R| {
            Linear::with_names(
                store,
                &format!("{prefix}.W_{tag}"),
                &format!("{prefix}.b_{tag}"),
                din,
                channels,
                r,
            )
        };
        let query = proj("q", query_dim, rng)?;
        let key = proj("k", kv_dim, rng)?;
        let value = proj("v", kv_dim, rng)?;
        let output = proj("o", channels, rng)?;
        Ok(Self {
            query,
            key,
            value,
            output,
            heads,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        queries: Var,
        keys_values: Var,
        segments: Vec<Segment>,
    ) -> Result<Var> {
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, keys_values)?;
        let v = self.value.forward(g, keys_values)?;
        let a = g.attention(q, k, v, self.heads, segments)?;
        self.output.forward(g, a)
    }
}

/// Learned per-channel scale and shift after normalization.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, width: usize) -> Result<Self> {
        let gamma = store.add(
            format!("{prefix}.gamma"),
            Tensor::new(&[width], vec![T::one(); width])?,
        )?;
        let beta = store.add(format!("{prefix}.beta"), Tensor::zeros(&[width]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        g.layer_norm(x, gamma, beta)
    }
}
