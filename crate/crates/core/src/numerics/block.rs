use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{truncated_normal, Bound, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

pub const LAYER_NORM_EPS: f64 = 1e-8;
pub const INIT_STD: f64 = 0.02;

/// Parameters of one pre-norm causal transformer block:
/// `x + Attn(LN(x))` followed by `x + FFN(LN(x))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
}

impl BlockParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut weight = |store: &mut ParamStore, name: &str, shape: &[usize]| {
            store.add(format!("{prefix}.{name}"), truncated_normal(shape, INIT_STD, rng))
        };
        let ln1_gamma = store.add(format!("{prefix}.ln1.gamma"), Tensor::filled(&[d], 1.0));
        let ln1_beta = store.add(format!("{prefix}.ln1.beta"), Tensor::zeros(&[d]));
        let wq = weight(store, "attn.wq", &[d, d]);
        let bq = store.add(format!("{prefix}.attn.bq"), Tensor::zeros(&[d]));
        let wk = weight(store, "attn.wk", &[d, d]);
        let bk = store.add(format!("{prefix}.attn.bk"), Tensor::zeros(&[d]));
        let wv = weight(store, "attn.wv", &[d, d]);
        let bv = store.add(format!("{prefix}.attn.bv"), Tensor::zeros(&[d]));
        let wo = weight(store, "attn.wo", &[d, d]);
        let bo = store.add(format!("{prefix}.attn.bo"), Tensor::zeros(&[d]));
        let ln2_gamma = store.add(format!("{prefix}.ln2.gamma"), Tensor::filled(&[d], 1.0));
        let ln2_beta = store.add(format!("{prefix}.ln2.beta"), Tensor::zeros(&[d]));
        let ff1_w = weight(store, "ffn.w1", &[d, hidden]);
        let ff1_b = store.add(format!("{prefix}.ffn.b1"), Tensor::zeros(&[hidden]));
        let ff2_w = weight(store, "ffn.w2", &[hidden, d]);
        let ff2_b = store.add(format!("{prefix}.ffn.b2"), Tensor::zeros(&[d]));
        Self {
            ln1_gamma,
            ln1_beta,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_gamma,
            ln2_beta,
            ff1_w,
            ff1_b,
            ff2_w,
            ff2_b,
        }
    }
}

/// Records the attention node id so callers can inspect the weights.
pub struct BlockOutput {
    pub output: Var,
    pub attention: Var,
}

/// One causal self-attention block over `x` (`n×d`). Dropout is applied to
/// both residual branches when `dropout` carries a positive rate.
pub fn causal_self_attention_block<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    bound: &Bound,
    p: &BlockParams,
    x: Var,
    heads: usize,
    dropout: Option<(f64, &mut R)>,
) -> Result<BlockOutput> {
    let v = |id: ParamId| bound.var(id);
    let mut dropout = dropout;

    let h = g.layer_norm(x, v(p.ln1_gamma), v(p.ln1_beta), LAYER_NORM_EPS)?;
    let q = g.affine(h, v(p.wq), Some(v(p.bq)))?;
    let k = g.affine(h, v(p.wk), Some(v(p.bk)))?;
    let val = g.affine(h, v(p.wv), Some(v(p.bv)))?;
    let attention = g.causal_attention(q, k, val, heads)?;
    let mut a = g.affine(attention, v(p.wo), Some(v(p.bo)))?;
    if let Some((rate, rng)) = dropout.as_mut() {
        a = g.dropout(a, *rate, *rng)?;
    }
    let x = g.add(x, a)?;

    let h = g.layer_norm(x, v(p.ln2_gamma), v(p.ln2_beta), LAYER_NORM_EPS)?;
    let f = g.affine(h, v(p.ff1_w), Some(v(p.ff1_b)))?;
    let f = g.relu(f);
    let mut f = g.affine(f, v(p.ff2_w), Some(v(p.ff2_b)))?;
    if let Some((rate, rng)) = dropout.as_mut() {
        f = g.dropout(f, *rate, *rng)?;
    }
    let output = g.add(x, f)?;
    Ok(BlockOutput { output, attention })
}
