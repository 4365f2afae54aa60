//! The sequential recommender: item and position embeddings, stacked causal
//! transformer blocks, a final layer norm and an untied prediction head.
//!
//! Every forward pass prepends a learned BOS vector, so row 0 of the state
//! matrix is the empty-history state and row `t` is the state after the `t`-th
//! item. Leading padding is stripped before any computation and positions are
//! counted from the first real item.

use serde::{Deserialize, Serialize};

use crate::dataset::{ItemId, PAD};
use crate::error::{Error, Result};
use crate::numerics::{
    causal_self_attention_block, gemm, truncated_normal, BlockParams, Bound, Candidates, Graph, Grads,
    ParamId, ParamStore, Tensor, Var, INIT_STD, LAYER_NORM_EPS,
};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d: 32,
            layers: 2,
            heads: 2,
            hidden: 64,
            dropout: 0.2,
            max_len: 50,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            problems.push(format!("d ({}) must be a positive multiple of heads ({})", self.d, self.heads));
        }
        if self.layers == 0 {
            problems.push("layers must be at least 1".to_string());
        }
        if self.hidden == 0 {
            problems.push("hidden must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.max_len == 0 {
            problems.push("max_len must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SrsIds {
    item_emb: ParamId,
    pos_emb: ParamId,
    bos: ParamId,
    blocks: Vec<BlockParams>,
    ln_gamma: ParamId,
    ln_beta: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// Per-step next-item losses aligned to the input: `per_step[t]` is the loss
/// of predicting `items[t + 1]`, zero where it does not apply.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLosses {
    pub per_step: Vec<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetLoss {
    /// `per_step[t]` holds the compacted-sequence loss whose target is `items[t + 1]`.
    pub per_step: Vec<f64>,
    pub total: f64,
    pub kept: usize,
    /// Fewer than two kept items: no prediction target.
    pub degenerate: bool,
}

/// Full-catalog log-likelihoods of a raw sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLogLik {
    /// `ell[t] = log P(items[t] | items[..t])`, zero on padding.
    pub ell: Vec<f64>,
    /// `baseline[t] = -ell[t + 1]`: the full-sequence loss of step `t`.
    pub baseline: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrsModel {
    config: BackboneConfig,
    num_items: usize,
    params: ParamStore,
    ids: SrsIds,
}

/// Splits off leading padding. Padding after the first real item, or ids
/// outside the catalog, are rejected.
pub(crate) fn strip_padding(items: &[ItemId], num_items: usize) -> Result<(usize, &[ItemId])> {
    let offset = items.iter().position(|&x| x != PAD).unwrap_or(items.len());
    let body = &items[offset..];
    for (i, &x) in body.iter().enumerate() {
        if x == PAD || x > num_items {
            return Err(Error::IndexOutOfRange {
                position: offset + i,
                index: x,
                len: num_items + 1,
            });
        }
    }
    Ok((offset, body))
}

impl SrsModel {
    pub fn new(config: BackboneConfig, num_items: usize, rng: &mut StreamRng) -> Result<Self> {
        config.validate()?;
        if num_items == 0 {
            return Err(Error::config("catalog is empty"));
        }
        let d = config.d;
        let vocab = num_items + 1;
        let mut params = ParamStore::new();
        let mut table = truncated_normal(&[vocab, d], INIT_STD, rng);
        table.row_mut(PAD).fill(0.0);
        let item_emb = params.add("srs.item_emb", table);
        let pos_emb = params.add("srs.pos_emb", truncated_normal(&[config.max_len + 1, d], INIT_STD, rng));
        let bos = params.add("srs.bos", truncated_normal(&[1, d], INIT_STD, rng));
        let blocks = (0..config.layers)
            .map(|l| BlockParams::init(&mut params, &format!("srs.block{l}"), d, config.hidden, rng))
            .collect();
        let ln_gamma = params.add("srs.ln_f.gamma", Tensor::filled(&[d], 1.0));
        let ln_beta = params.add("srs.ln_f.beta", Tensor::zeros(&[d]));
        let head_w = params.add("srs.head.w", truncated_normal(&[d, vocab], INIT_STD, rng));
        let head_b = params.add("srs.head.b", Tensor::zeros(&[vocab]));
        Ok(Self {
            config,
            num_items,
            params,
            ids: SrsIds {
                item_emb,
                pos_emb,
                bos,
                blocks,
                ln_gamma,
                ln_beta,
                head_w,
                head_b,
            },
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// The item table ζ, shared read-only with the sampler.
    pub fn item_embedding(&self) -> &Tensor {
        self.params.get(self.ids.item_emb)
    }

    pub fn item_embedding_id(&self) -> ParamId {
        self.ids.item_emb
    }

    pub fn head_weight_id(&self) -> ParamId {
        self.ids.head_w
    }

    pub fn head_bias_id(&self) -> ParamId {
        self.ids.head_b
    }

    /// Zeroes gradient entries of parameters that never train (the padding row).
    pub fn mask_frozen(&self, grads: &mut Grads) {
        let d = self.config.d;
        grads.data[self.ids.item_emb.0][PAD * d..(PAD + 1) * d].fill(0.0);
    }

    /// Records `(n+1)×d` states for an unpadded sequence: row 0 for BOS, row
    /// `t` after `items[t-1]`.
    pub fn record_states<'a>(
        &'a self,
        g: &mut Graph<'a>,
        bound: &Bound,
        items: &[ItemId],
        mut dropout: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let n = items.len();
        if n > self.config.max_len {
            return Err(Error::config(format!(
                "sequence of {n} items exceeds max_len {}",
                self.config.max_len
            )));
        }
        let rate = self.config.dropout;
        if rate == 0.0 {
            dropout = None;
        }
        let v = |id: ParamId| bound.var(id);
        let mut x = v(self.ids.bos);
        if n > 0 {
            let emb = g.gather(v(self.ids.item_emb), items)?;
            x = g.concat_rows(x, emb)?;
        }
        let positions: Vec<usize> = (0..=n).collect();
        let pos = g.gather(v(self.ids.pos_emb), &positions)?;
        x = g.add(x, pos)?;
        if let Some(rng) = dropout.as_deref_mut() {
            x = g.dropout(x, rate, rng)?;
        }
        for block in &self.ids.blocks {
            let drop = dropout.as_deref_mut().map(|r| (rate, r));
            x = causal_self_attention_block(g, bound, block, x, self.config.heads, drop)?.output;
        }
        g.layer_norm(x, v(self.ids.ln_gamma), v(self.ids.ln_beta), LAYER_NORM_EPS)
    }

    /// Records per-row cross-entropies for an unpadded sequence; row `r`
    /// predicts `items[r]` when `first_row <= r < n`, every other row is zero.
    fn record_row_losses<'a>(
        &'a self,
        g: &mut Graph<'a>,
        bound: &Bound,
        items: &[ItemId],
        first_row: usize,
        candidates: &Candidates,
        dropout: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let n = items.len();
        let states = self.record_states(g, bound, items, dropout)?;
        let targets: Vec<Option<usize>> = (0..=n)
            .map(|r| (r >= first_row && r < n).then(|| items[r]))
            .collect();
        g.cross_entropy(
            states,
            bound.var(self.ids.head_w),
            bound.var(self.ids.head_b),
            &targets,
            candidates,
        )
    }

    /// Next-item losses of a compact (unpadded, already selected) sequence.
    /// Returns `n - 1` per-step values, their total, and gradients on request.
    fn compact_loss(
        &self,
        items: &[ItemId],
        candidates: &Candidates,
        dropout: Option<&mut StreamRng>,
        with_grads: bool,
    ) -> Result<(Vec<f64>, f64, Option<Grads>)> {
        let n = items.len();
        let mut g = Graph::new();
        let bound = if with_grads {
            self.params.bind(&mut g)
        } else {
            self.params.bind_frozen(&mut g)
        };
        let rows = self.record_row_losses(&mut g, &bound, items, 1, candidates, dropout)?;
        let total_var = g.sum(rows)?;
        let per_step = g.value(rows).data()[1..n].to_vec();
        let total = g.value(total_var).data()[0];
        let grads = if with_grads {
            g.backward(total_var)?;
            let mut grads = self.params.zero_grads();
            grads.accumulate(&g, &bound);
            self.mask_frozen(&mut grads);
            Some(grads)
        } else {
            None
        };
        Ok((per_step, total, grads))
    }

    /// Hidden states aligned to the input; padding rows are zero.
    pub fn forward_states(&self, items: &[ItemId]) -> Result<Tensor> {
        let (offset, body) = strip_padding(items, self.num_items)?;
        let d = self.config.d;
        let mut out = Tensor::zeros(&[items.len(), d]);
        if body.is_empty() {
            return Ok(out);
        }
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let states = self.record_states(&mut g, &bound, body, None)?;
        let st = g.value(states);
        for t in 0..body.len() {
            out.row_mut(offset + t).copy_from_slice(st.row(t + 1));
        }
        Ok(out)
    }

    /// The autoregressive loss. `None` when fewer than two real items remain.
    pub fn autoregressive_loss(&self, items: &[ItemId], candidates: &Candidates) -> Result<Option<StepLosses>> {
        let all = vec![1u8; items.len()];
        let s = self.subset_loss(items, &all, candidates)?;
        Ok((!s.degenerate).then_some(StepLosses {
            per_step: s.per_step,
            total: s.total,
        }))
    }

    /// Loss of the subsequence kept by `actions`, scattered back to original
    /// indices.
    pub fn subset_loss(&self, items: &[ItemId], actions: &[u8], candidates: &Candidates) -> Result<SubsetLoss> {
        self.subset_loss_impl(items, actions, candidates, None, false).map(|(s, _)| s)
    }

    /// [`Self::subset_loss`] plus parameter gradients of its total. Gradients
    /// are `None` for degenerate selections.
    pub fn subset_loss_grad(
        &self,
        items: &[ItemId],
        actions: &[u8],
        candidates: &Candidates,
        dropout: Option<&mut StreamRng>,
    ) -> Result<(SubsetLoss, Option<Grads>)> {
        self.subset_loss_impl(items, actions, candidates, dropout, true)
    }

    fn subset_loss_impl(
        &self,
        items: &[ItemId],
        actions: &[u8],
        candidates: &Candidates,
        dropout: Option<&mut StreamRng>,
        with_grads: bool,
    ) -> Result<(SubsetLoss, Option<Grads>)> {
        if actions.len() != items.len() {
            return Err(Error::Shape {
                op: "subset_loss",
                left: vec![items.len()],
                right: vec![actions.len()],
            });
        }
        let (offset, _) = strip_padding(items, self.num_items)?;
        let kept_idx: Vec<usize> = (offset..items.len()).filter(|&t| actions[t] != 0).collect();
        let mut per_step = vec![0.0; items.len().saturating_sub(1)];
        if kept_idx.len() < 2 {
            return Ok((
                SubsetLoss {
                    per_step,
                    total: 0.0,
                    kept: kept_idx.len(),
                    degenerate: true,
                },
                None,
            ));
        }
        let compact: Vec<ItemId> = kept_idx.iter().map(|&t| items[t]).collect();
        let (losses, total, grads) = self.compact_loss(&compact, candidates, dropout, with_grads)?;
        for (j, loss) in losses.into_iter().enumerate() {
            per_step[kept_idx[j + 1] - 1] = loss;
        }
        Ok((
            SubsetLoss {
                per_step,
                total,
                kept: kept_idx.len(),
                degenerate: false,
            },
            grads,
        ))
    }

    /// Full-catalog log-likelihood of every real item, the first conditioned
    /// on BOS alone.
    pub fn stepwise_loglik(&self, items: &[ItemId]) -> Result<StepLogLik> {
        let (offset, body) = strip_padding(items, self.num_items)?;
        let mut ell = vec![0.0; items.len()];
        if !body.is_empty() {
            let mut g = Graph::new();
            let bound = self.params.bind_frozen(&mut g);
            let rows = self.record_row_losses(&mut g, &bound, body, 0, &Candidates::Full, None)?;
            for (t, &ce) in g.value(rows).data()[..body.len()].iter().enumerate() {
                ell[offset + t] = -ce;
            }
        }
        let baseline = (0..items.len().saturating_sub(1))
            .map(|t| if t >= offset { -ell[t + 1] } else { 0.0 })
            .collect();
        Ok(StepLogLik { ell, baseline })
    }

    /// Logits over the catalog from the state after the last context item.
    /// Entry 0 (padding) is `-inf`.
    pub fn scores(&self, context: &[ItemId]) -> Result<Vec<f64>> {
        let (_, body) = strip_padding(context, self.num_items)?;
        if body.is_empty() {
            return Err(Error::data("cannot score an empty context"));
        }
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let states = self.record_states(&mut g, &bound, body, None)?;
        let h = g.value(states).row(body.len());
        let vocab = self.num_items + 1;
        let mut out = self.params.get(self.ids.head_b).data().to_vec();
        gemm(1, self.config.d, vocab, h, false, self.params.get(self.ids.head_w).data(), false, &mut out, 1.0);
        out[PAD] = f64::NEG_INFINITY;
        Ok(out)
    }

    /// Top-`k` items by score, ties to the smaller id, skipping `exclude`.
    pub fn predict_topk(&self, context: &[ItemId], k: usize, exclude: &[ItemId]) -> Result<Vec<ItemId>> {
        if k == 0 || k > self.num_items {
            return Err(Error::config(format!("k must be in 1..={}, got {k}", self.num_items)));
        }
        let scores = self.scores(context)?;
        Ok(top_k(&scores, k, exclude))
    }
}

/// Indices `1..` of `scores` ranked by descending score then ascending id.
pub fn top_k(scores: &[f64], k: usize, exclude: &[ItemId]) -> Vec<ItemId> {
    let mut ids: Vec<ItemId> = (1..scores.len()).filter(|i| !exclude.contains(i)).collect();
    let cmp = |a: &ItemId, b: &ItemId| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let k = k.min(ids.len());
    if k < ids.len() {
        ids.select_nth_unstable_by(k, cmp);
        ids.truncate(k);
    }
    ids.sort_by(cmp);
    ids
}
