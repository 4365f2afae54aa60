//! The behavior sampler and the fixed-rule baselines.
//!
//! The policy embeds items through the recommender's item table (read-only),
//! adds its own positions, runs one causal block with a final layer norm
//! and maps `[H‖E]` through a
//! two-layer MLP to a drop/keep logit pair per step. Column 1 of the softmax
//! is the keep-probability.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ItemId, PAD};
use crate::error::{Error, Result};
use crate::numerics::{
    causal_self_attention_block, truncated_normal, BlockParams, Bound, Graph, Grads, ParamId, ParamStore, Tensor, Var,
    INIT_STD, LAYER_NORM_EPS,
};
use crate::rng::StreamRng;
use crate::srs::strip_padding;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub heads: usize,
    pub hidden: usize,
    pub dropout: f64,
    /// Always keep the first real item. Off by default.
    pub force_keep_first: bool,
    /// Keep-probability threshold for deterministic inference.
    pub inference_threshold: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            hidden: 64,
            dropout: 0.0,
            force_keep_first: false,
            inference_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum SamplingStrategy {
    Auto,
    Full,
    Random { rate: f64 },
    Last { rate: f64 },
    Popular { rate: f64 },
}

impl SamplingStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Random { rate } | Self::Last { rate } | Self::Popular { rate } if !(rate > 0.0 && rate <= 1.0) => {
                Err(Error::config(format!("sample rate must be in (0, 1], got {rate}")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::Auto => "auto".into(),
            Self::Full => "full".into(),
            Self::Random { rate } => format!("random({rate})"),
            Self::Last { rate } => format!("last({rate})"),
            Self::Popular { rate } => format!("popular({rate})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SamplerIds {
    pos_emb: ParamId,
    block: BlockParams,
    ln_gamma: ParamId,
    ln_beta: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerModel {
    config: SamplerConfig,
    d: usize,
    max_len: usize,
    params: ParamStore,
    ids: SamplerIds,
}

/// Keep-probabilities for one input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerPolicy {
    /// Number of leading padding positions.
    pub offset: usize,
    /// Aligned to the input; padding positions hold 0.
    pub keep: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledActions {
    pub actions: Vec<u8>,
    /// `log π(a_t)`; 0 on padding and on forced steps.
    pub log_probs: Vec<f64>,
    /// Steps whose action was drawn from the policy.
    pub sampled: Vec<bool>,
}

impl SamplerPolicy {
    /// The two-column form: `[drop, keep]` per step.
    pub fn probs(&self) -> Vec<[f64; 2]> {
        self.keep.iter().map(|&k| [1.0 - k, k]).collect()
    }

    /// Independent Bernoulli draws on real steps. With `force_keep_first`
    /// the first real item is kept without a draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, force_keep_first: bool) -> SampledActions {
        let n = self.keep.len();
        let mut out = SampledActions {
            actions: vec![0; n],
            log_probs: vec![0.0; n],
            sampled: vec![false; n],
        };
        for t in self.offset..n {
            if force_keep_first && t == self.offset {
                out.actions[t] = 1;
                continue;
            }
            let k = self.keep[t];
            let keep = rng.random::<f64>() < k;
            out.actions[t] = u8::from(keep);
            out.log_probs[t] = if keep { k.ln() } else { (1.0 - k).ln() };
            out.sampled[t] = true;
        }
        out
    }

    pub fn deterministic(&self, threshold: f64) -> Vec<u8> {
        let mut a = deterministic_select(&self.keep, threshold);
        a[..self.offset].fill(0);
        a
    }

    /// Keep-probabilities of the real steps only.
    pub fn real_keep(&self) -> &[f64] {
        &self.keep[self.offset..]
    }
}

/// `a_t = 1` iff the keep-probability is at least `threshold`.
pub fn deterministic_select(keep: &[f64], threshold: f64) -> Vec<u8> {
    keep.iter().map(|&k| u8::from(k >= threshold)).collect()
}

/// `⌈rate·n⌉`, robust to representation error in `rate·n`.
fn keep_count(rate: f64, n: usize) -> usize {
    let x = rate * n as f64;
    let r = x.round();
    let c = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (c as usize).min(n)
}

/// Actions of a fixed-rule strategy. Popularity ties go to the more recent item.
pub fn baseline_select<R: Rng + ?Sized>(
    strategy: &SamplingStrategy,
    items: &[ItemId],
    popularity: &[u64],
    rng: &mut R,
) -> Result<Vec<u8>> {
    strategy.validate()?;
    let offset = items.iter().position(|&x| x != PAD).unwrap_or(items.len());
    let n = items.len() - offset;
    let mut a = vec![0u8; items.len()];
    match *strategy {
        SamplingStrategy::Auto => return Err(Error::config("the auto strategy needs a trained sampler")),
        SamplingStrategy::Full => a[offset..].fill(1),
        SamplingStrategy::Random { rate } => {
            for x in &mut a[offset..] {
                *x = u8::from(rng.random::<f64>() < rate);
            }
        }
        SamplingStrategy::Last { rate } => {
            let k = keep_count(rate, n);
            a[items.len() - k..].fill(1);
        }
        SamplingStrategy::Popular { rate } => {
            let k = keep_count(rate, n);
            let count = |i: ItemId| {
                popularity
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::data(format!("item {i} has no popularity entry")))
            };
            let mut order: Vec<(u64, usize)> =
                (offset..items.len()).map(|t| Ok((count(items[t])?, t))).collect::<Result<_>>()?;
            order.sort_by(|x, y| y.cmp(x));
            for &(_, t) in &order[..k] {
                a[t] = 1;
            }
        }
    }
    Ok(a)
}

impl SamplerModel {
    pub fn new(d: usize, max_len: usize, config: SamplerConfig, rng: &mut StreamRng) -> Result<Self> {
        if config.heads == 0 || d % config.heads != 0 {
            return Err(Error::config(format!(
                "sampler heads ({}) must divide d ({d})",
                config.heads
            )));
        }
        if config.hidden == 0 || !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::config("sampler hidden must be positive and dropout in [0, 1)"));
        }
        let mut params = ParamStore::new();
        let pos_emb = params.add("sampler.pos_emb", truncated_normal(&[max_len, d], INIT_STD, rng));
        let block = BlockParams::init(&mut params, "sampler.block", d, config.hidden, rng);
        let ln_gamma = params.add("sampler.ln_f.gamma", Tensor::filled(&[d], 1.0));
        let ln_beta = params.add("sampler.ln_f.beta", Tensor::zeros(&[d]));
        let w1 = params.add("sampler.mlp.w1", truncated_normal(&[2 * d, d], INIT_STD, rng));
        let b1 = params.add("sampler.mlp.b1", Tensor::zeros(&[d]));
        // A zero output layer starts every sequence at the uniform policy.
        let w2 = params.add("sampler.mlp.w2", Tensor::zeros(&[d, 2]));
        let b2 = params.add("sampler.mlp.b2", Tensor::zeros(&[2]));
        Ok(Self {
            config,
            d,
            max_len,
            params,
            ids: SamplerIds {
                pos_emb,
                block,
                ln_gamma,
                ln_beta,
                w1,
                b1,
                w2,
                b2,
            },
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Records `π` (`n×2`) for an unpadded sequence.
    fn record_policy<'a>(
        &'a self,
        g: &mut Graph<'a>,
        bound: &Bound,
        embedding: &'a Tensor,
        items: &[ItemId],
        tau: f64,
        mut dropout: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let n = items.len();
        if n > self.max_len {
            return Err(Error::config(format!("sequence of {n} items exceeds max_len {}", self.max_len)));
        }
        if embedding.shape().len() != 2 || embedding.cols() != self.d {
            return Err(Error::Shape {
                op: "sampler embedding",
                left: embedding.shape().to_vec(),
                right: vec![self.d],
            });
        }
        let rate = self.config.dropout;
        if rate == 0.0 {
            dropout = None;
        }
        let v = |id: ParamId| bound.var(id);
        let table = g.constant_ref(embedding);
        let emb = g.gather(table, items)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.gather(v(self.ids.pos_emb), &positions)?;
        let mut e = g.add(emb, pos)?;
        if let Some(rng) = dropout.as_deref_mut() {
            e = g.dropout(e, rate, rng)?;
        }
        let drop = dropout.as_deref_mut().map(|r| (rate, r));
        let h = causal_self_attention_block(g, bound, &self.ids.block, e, self.config.heads, drop)?.output;
        let h = g.layer_norm(h, v(self.ids.ln_gamma), v(self.ids.ln_beta), LAYER_NORM_EPS)?;
        let he = g.concat_cols(h, e)?;
        let z = g.affine(he, v(self.ids.w1), Some(v(self.ids.b1)))?;
        let z = g.relu(z);
        let s = g.affine(z, v(self.ids.w2), Some(v(self.ids.b2)))?;
        g.softmax_rows(s, tau)
    }

    /// Keep-probabilities for `items`; padding is forced to 0.
    pub fn policy_forward(
        &self,
        embedding: &Tensor,
        items: &[ItemId],
        tau: f64,
        dropout: Option<&mut StreamRng>,
    ) -> Result<SamplerPolicy> {
        let (offset, body) = strip_padding(items, embedding.rows().saturating_sub(1))?;
        let mut keep = vec![0.0; items.len()];
        if !body.is_empty() {
            let mut g = Graph::new();
            let bound = self.params.bind_frozen(&mut g);
            let pi = self.record_policy(&mut g, &bound, embedding, body, tau, dropout)?;
            let p = g.value(pi);
            for t in 0..body.len() {
                keep[offset + t] = p.get(t, 1);
            }
        }
        Ok(SamplerPolicy { offset, keep })
    }

    /// Gradient of `Σ_t w_t log π(a_t)` with respect to the sampler
    /// parameters, together with its value. Padding positions and
    /// zero-weight steps contribute nothing.
    pub fn log_prob_gradient(
        &self,
        embedding: &Tensor,
        items: &[ItemId],
        tau: f64,
        actions: &[u8],
        weights: &[f64],
        dropout: Option<&mut StreamRng>,
    ) -> Result<(f64, Grads)> {
        if actions.len() != items.len() || weights.len() != items.len() {
            return Err(Error::Shape {
                op: "log_prob_gradient",
                left: vec![items.len()],
                right: vec![actions.len(), weights.len()],
            });
        }
        let (offset, body) = strip_padding(items, embedding.rows().saturating_sub(1))?;
        let mut grads = self.params.zero_grads();
        if body.is_empty() || weights[offset..].iter().all(|&w| w == 0.0) {
            return Ok((0.0, grads));
        }
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let pi = self.record_policy(&mut g, &bound, embedding, body, tau, dropout)?;
        let cols: Vec<Option<usize>> = actions[offset..].iter().map(|&a| Some(usize::from(a != 0))).collect();
        let logp = g.pick_log(pi, &cols)?;
        let objective = g.weighted_sum(logp, &weights[offset..])?;
        let value = g.value(objective).data()[0];
        g.backward(objective)?;
        grads.accumulate(&g, &bound);
        Ok((value, grads))
    }
}
