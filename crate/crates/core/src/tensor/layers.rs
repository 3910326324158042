//! Parameterised building blocks. Each layer only stores [`ParamId`]s; the
//! values live in a [`ParamStore`] so whole models checkpoint uniformly.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), &[1, fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// `x · W (+ b)` for row-vector inputs `x[m×fan_in]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let y = x.matmul(tape.param(store, self.weight))?;
        match self.bias {
            Some(b) => y.add_row(tape.param(store, b)),
            None => Ok(y),
        }
    }
}

/// Two-layer perceptron with an ELU hidden layer and a linear output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp2 {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp2 {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), fan_in, hidden, true, rng),
            output: Linear::new(store, &format!("{name}.1"), hidden, fan_out, true, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let h = self.hidden.forward(tape, store, x)?.elu();
        self.output.forward(tape, store, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attention {
    /// Scaled dot product between projected destination and source.
    #[default]
    Dot,
    /// `aᵀ tanh(q + k)` per head.
    Additive,
}

/// Directed edges from source rows to destination rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeIndex {
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    pub n_src: usize,
    pub n_dst: usize,
}

impl EdgeIndex {
    pub fn new(pairs: &[(usize, usize)], n_src: usize, n_dst: usize) -> Result<Self, TensorError> {
        if let Some(&(s, d)) = pairs.iter().find(|&&(s, d)| s >= n_src || d >= n_dst) {
            return Err(TensorError::Invalid {
                op: "edge_index",
                message: format!("edge ({s}, {d}) outside {n_src}×{n_dst}"),
            });
        }
        Ok(Self {
            src: pairs.iter().map(|p| p.0).collect(),
            dst: pairs.iter().map(|p| p.1).collect(),
            n_src,
            n_dst,
        })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn reversed(&self) -> Self {
        Self {
            src: self.dst.clone(),
            dst: self.src.clone(),
            n_src: self.n_dst,
            n_dst: self.n_src,
        }
    }
}

/// Multi-head graph transformer convolution:
/// `h'_i = h_i W1 + Σ_{j∈N(i)} α_ij h_j W2`, with `α` a per-head softmax over
/// the in-neighbourhood of `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConv {
    pub w_skip: ParamId,
    pub w_value: ParamId,
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub attn_vec: Option<ParamId>,
    pub dim: usize,
    pub heads: usize,
}

impl TransformerConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        attention: Attention,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        let w_skip = store.add_glorot(format!("{name}.w1"), dim, dim, rng);
        let w_value = store.add_glorot(format!("{name}.w2"), dim, dim, rng);
        let w_query = store.add_glorot(format!("{name}.w3"), dim, dim, rng);
        let w_key = store.add_glorot(format!("{name}.w4"), dim, dim, rng);
        let attn_vec = (attention == Attention::Additive).then(|| store.add_glorot(format!("{name}.a"), 1, dim, rng));
        Self {
            w_skip,
            w_value,
            w_query,
            w_key,
            attn_vec,
            dim,
            heads,
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        src: Var<'t>,
        dst: Var<'t>,
        edges: &EdgeIndex,
    ) -> Result<Var<'t>, TensorError> {
        self.forward_with_attention(tape, store, src, dst, edges).map(|(out, _)| out)
    }

    /// Also returns the `[edges × heads]` attention weights.
    pub fn forward_with_attention<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        src: Var<'t>,
        dst: Var<'t>,
        edges: &EdgeIndex,
    ) -> Result<(Var<'t>, Var<'t>), TensorError> {
        let (src_rows, dst_rows) = (src.shape()[0], dst.shape()[0]);
        if src_rows != edges.n_src || dst_rows != edges.n_dst {
            return Err(TensorError::ShapeMismatch {
                op: "transformer_conv",
                left: vec![src_rows, dst_rows],
                right: vec![edges.n_src, edges.n_dst],
            });
        }
        let skip = dst.matmul(tape.param(store, self.w_skip))?;
        if edges.is_empty() {
            let alpha = tape.constant(Tensor::zeros(&[1, self.heads]));
            return Ok((skip, alpha));
        }
        let q = dst.matmul(tape.param(store, self.w_query))?.gather_rows(&edges.dst)?;
        let k = src.matmul(tape.param(store, self.w_key))?.gather_rows(&edges.src)?;
        let v = src.matmul(tape.param(store, self.w_value))?.gather_rows(&edges.src)?;
        let scores = match self.attn_vec {
            None => {
                let head_dim = (self.dim / self.heads) as f64;
                q.hadamard(k)?.head_sum(self.heads)?.scale(1.0 / head_dim.sqrt())
            }
            Some(a) => q.add(k)?.tanh().mul_row(tape.param(store, a))?.head_sum(self.heads)?,
        };
        let alpha = scores.segment_softmax(&edges.dst)?;
        let messages = alpha.head_scale(v)?.scatter_add_rows(&edges.dst, edges.n_dst)?;
        Ok((skip.add(messages)?, alpha))
    }
}
