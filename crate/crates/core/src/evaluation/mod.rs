//! Ranking metrics over the full catalog, inference-time sampling, cost
//! estimates and the sampler-quality analysis on labeled histories.

mod cost;
mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{split, Catalog, EvalExample, InteractionSequence, ItemId, SplitMode, SplitSpec, TrainExample, SIGNAL};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::sampler::{baseline_select, SamplerModel, SamplingStrategy};
use crate::srs::SrsModel;
use crate::training::{TrainConfig, TrainState};

pub use cost::{flops_estimate, CostModel, FlopsEstimate};
pub use metrics::{multi_target_at_k, ndcg_at_k, rank_of, recall_at_k, roc_auc};

/// A trained pair plus the rule used to shorten histories at inference.
#[derive(Debug, Clone, Copy)]
pub struct Recommender<'a> {
    pub srs: &'a SrsModel,
    pub sampler: &'a SamplerModel,
    pub strategy: SamplingStrategy,
    pub tau: f64,
    /// Seeds the random inference strategy.
    pub seed: u64,
}

impl<'a> Recommender<'a> {
    pub fn from_state(state: &'a TrainState) -> Self {
        Self {
            srs: &state.srs,
            sampler: &state.sampler,
            strategy: state.config.strategy,
            tau: state.config.reward.tau,
            seed: state.config.seed,
        }
    }

    pub fn with_strategy(self, strategy: SamplingStrategy) -> Self {
        Self { strategy, ..self }
    }

    /// Keep-probabilities (auto only) and actions for a history that
    /// already fits the model window.
    fn select(&self, context: &[ItemId], user: usize, catalog: &Catalog) -> Result<(Option<Vec<f64>>, Vec<u8>)> {
        match self.strategy {
            SamplingStrategy::Auto => {
                let policy = self.sampler.policy_forward(self.srs.item_embedding(), context, self.tau, None)?;
                let actions = policy.deterministic(self.sampler.config().inference_threshold);
                Ok((Some(policy.keep), actions))
            }
            s => {
                let mut rng = stream(self.seed, Purpose::Evaluation, &[user as u64]);
                Ok((None, baseline_select(&s, context, &catalog.popularity, &mut rng)?))
            }
        }
    }

    fn window<'c>(&self, context: &'c [ItemId]) -> &'c [ItemId] {
        let max_len = self.srs.config().max_len;
        &context[context.len().saturating_sub(max_len)..]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorFraction {
    pub label: String,
    /// Share of kept interactions carrying this label.
    pub kept_fraction: f64,
    /// Share of dropped interactions carrying this label.
    pub dropped_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub strategy: String,
    pub users: usize,
    /// Users whose sampled history was empty and fell back to the full one.
    pub fallbacks: usize,
    /// `recall@K` and `ndcg@K`, averaged over users.
    pub metrics: BTreeMap<String, f64>,
    pub mean_sample_rate: f64,
    /// Variance across users of the per-user sample rate.
    pub sample_rate_variance: f64,
    pub mean_history_len: f64,
    pub mflops: f64,
    /// Empty when the histories carry no labels.
    pub behavior: Vec<BehaviorFraction>,
}

impl MetricReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.metrics.get(&format!("recall@{k}")).copied()
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.metrics.get(&format!("ndcg@{k}")).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    fn csv_columns(&self) -> Vec<(String, String)> {
        let mut cols = vec![
            ("strategy".to_string(), self.strategy.clone()),
            ("users".into(), self.users.to_string()),
            ("fallbacks".into(), self.fallbacks.to_string()),
        ];
        cols.extend(self.metrics.iter().map(|(k, v)| (k.clone(), v.to_string())));
        cols.push(("mean_sample_rate".into(), self.mean_sample_rate.to_string()));
        cols.push(("sample_rate_variance".into(), self.sample_rate_variance.to_string()));
        cols.push(("mean_history_len".into(), self.mean_history_len.to_string()));
        cols.push(("mflops".into(), self.mflops.to_string()));
        for b in &self.behavior {
            cols.push((format!("kept_{}", b.label), b.kept_fraction.to_string()));
            cols.push((format!("dropped_{}", b.label), b.dropped_fraction.to_string()));
        }
        cols
    }

    /// Header line and one data line.
    pub fn to_csv(&self) -> String {
        let cols = self.csv_columns();
        let header: Vec<&str> = cols.iter().map(|(k, _)| k.as_str()).collect();
        let row: Vec<&str> = cols.iter().map(|(_, v)| v.as_str()).collect();
        format!("{}\n{}\n", header.join(","), row.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { ks: vec![10, 20] }
    }
}

struct UserResult {
    user: usize,
    metrics: Vec<(f64, f64)>,
    rate: f64,
    len: usize,
    fallback: bool,
    /// (label, kept) per history step.
    labeled: Vec<(String, bool)>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn behavior_fractions(labeled: impl Iterator<Item = (String, bool)>) -> Vec<BehaviorFraction> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let (mut kept, mut dropped) = (0usize, 0usize);
    for (label, keep) in labeled {
        let c = counts.entry(label).or_default();
        if keep {
            c.0 += 1;
            kept += 1;
        } else {
            c.1 += 1;
            dropped += 1;
        }
    }
    let frac = |x: usize, total: usize| if total == 0 { 0.0 } else { x as f64 / total as f64 };
    counts
        .into_iter()
        .map(|(label, (k, d))| BehaviorFraction {
            label,
            kept_fraction: frac(k, kept),
            dropped_fraction: frac(d, dropped),
        })
        .collect()
}

/// Scores the full catalog for every example from its (sampled) history.
/// Targets are ranked against every real item; a target set of size one
/// gives the usual single-target metrics.
pub fn evaluate(
    rec: &Recommender,
    examples: &[EvalExample],
    catalog: &Catalog,
    options: &EvalOptions,
) -> Result<MetricReport> {
    if examples.is_empty() {
        return Err(Error::data("no examples to evaluate"));
    }
    if options.ks.is_empty() || options.ks.contains(&0) {
        return Err(Error::config("ks must be a non-empty list of positive cutoffs"));
    }
    let mut results = Vec::with_capacity(examples.len());
    for ex in examples {
        let context = rec.window(&ex.context);
        let labels = ex
            .context_behaviors
            .as_ref()
            .map(|b| &b[b.len() - context.len()..]);
        let (_, actions) = rec.select(context, ex.user, catalog)?;
        let mut kept: Vec<ItemId> = context.iter().zip(&actions).filter(|(_, &a)| a == 1).map(|(&i, _)| i).collect();
        let fallback = kept.is_empty();
        if fallback {
            kept = context.to_vec();
        }
        let scores = rec.srs.scores(&kept)?;
        let ranks: Vec<(ItemId, usize)> = ex
            .targets
            .iter()
            .map(|&t| Ok((t, rank_of(t, &scores, &[])?)))
            .collect::<Result<_>>()?;
        let metrics = options
            .ks
            .iter()
            .map(|&k| multi_target_at_k(&ranks, k))
            .collect::<Result<_>>()?;
        let labeled = labels
            .map(|l| l.iter().zip(&actions).map(|(s, &a)| (s.clone(), a == 1)).collect())
            .unwrap_or_default();
        results.push(UserResult {
            user: ex.user,
            metrics,
            rate: kept.len() as f64 / context.len() as f64,
            len: context.len(),
            fallback,
            labeled,
        });
    }
    // Aggregate in user order so the report does not depend on input order.
    results.sort_by_key(|r| r.user);

    let mut metrics = BTreeMap::new();
    for (j, &k) in options.ks.iter().enumerate() {
        metrics.insert(format!("recall@{k}"), mean(results.iter().map(|r| r.metrics[j].0)));
        metrics.insert(format!("ndcg@{k}"), mean(results.iter().map(|r| r.metrics[j].1)));
    }
    let mu = mean(results.iter().map(|r| r.rate));
    let sigma2 = mean(results.iter().map(|r| (r.rate - mu).powi(2)));
    let mean_len = mean(results.iter().map(|r| r.len as f64));
    let cfg = rec.srs.config();
    let cost = flops_estimate(&CostModel {
        layers: cfg.layers,
        seq_len: mean_len,
        mu: mu.clamp(0.0, 1.0),
        sigma2,
        d: cfg.d,
        hidden: cfg.hidden,
        num_items: rec.srs.num_items(),
        sampler: rec.strategy == SamplingStrategy::Auto,
    })?;
    Ok(MetricReport {
        strategy: rec.strategy.name(),
        users: results.len(),
        fallbacks: results.iter().filter(|r| r.fallback).count(),
        metrics,
        mean_sample_rate: mu,
        sample_rate_variance: sigma2,
        mean_history_len: mean_len,
        mflops: cost.total_mflops,
        behavior: behavior_fractions(results.into_iter().flat_map(|r| r.labeled)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub steps: usize,
    pub report: MetricReport,
}

/// Test-window reports for each number of future steps.
pub fn evaluate_multi_step(
    rec: &Recommender,
    sequences: &[InteractionSequence],
    catalog: &Catalog,
    steps: &[usize],
    options: &EvalOptions,
) -> Result<Vec<StepReport>> {
    let max_len = rec.srs.config().max_len;
    steps
        .iter()
        .map(|&s| {
            let views = split(
                sequences,
                SplitSpec {
                    mode: SplitMode::MultiStep { steps: s },
                    max_len,
                },
            )?;
            Ok(StepReport {
                steps: s,
                report: evaluate(rec, &views.test, catalog, options)?,
            })
        })
        .collect()
}

pub fn multi_step_csv(rows: &[StepReport]) -> String {
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let csv = row.report.to_csv();
        let mut lines = csv.lines();
        let header = lines.next().unwrap_or_default();
        if i == 0 {
            let _ = writeln!(out, "steps,{header}");
        }
        let _ = writeln!(out, "{},{}", row.steps, lines.next().unwrap_or_default());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerQuality {
    pub steps: usize,
    pub behavior: Vec<BehaviorFraction>,
    /// Keep-probability as a score for signal versus everything else.
    pub auc: Option<f64>,
    pub mean_keep_signal: f64,
    pub mean_keep_other: f64,
}

/// Kept/dropped label shares under the deterministic inference rule and the
/// separation of signal by keep-probability. `None` when any history is
/// unlabeled.
pub fn sampler_quality(rec: &Recommender, histories: &[TrainExample]) -> Result<Option<SamplerQuality>> {
    let threshold = rec.sampler.config().inference_threshold;
    let mut keeps = Vec::new();
    let mut labels = Vec::new();
    for h in histories {
        let Some(behaviors) = &h.behaviors else {
            return Ok(None);
        };
        let context = rec.window(&h.items);
        let policy = rec.sampler.policy_forward(rec.srs.item_embedding(), context, rec.tau, None)?;
        keeps.extend_from_slice(policy.real_keep());
        labels.extend(behaviors[behaviors.len() - context.len()..].iter().skip(policy.offset).cloned());
    }
    Ok(Some(quality_from_scores(&keeps, &labels, threshold)))
}

/// The quality summary for given keep-probabilities and labels.
pub fn quality_from_scores(keep: &[f64], labels: &[String], threshold: f64) -> SamplerQuality {
    let signal: Vec<bool> = labels.iter().map(|l| l == SIGNAL).collect();
    let behavior = behavior_fractions(labels.iter().cloned().zip(keep.iter().map(|&k| k >= threshold)));
    let by = |want: bool| mean(keep.iter().zip(&signal).filter(|(_, &s)| s == want).map(|(&k, _)| k));
    SamplerQuality {
        steps: keep.len(),
        behavior,
        auc: roc_auc(keep, &signal),
        mean_keep_signal: by(true),
        mean_keep_other: by(false),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub relax: f64,
    pub sample_rate: f64,
    pub sample_rate_variance: f64,
    /// Users whose selection came back empty and who used their full history.
    pub fallbacks: usize,
    pub metrics: BTreeMap<String, f64>,
    pub mflops: f64,
}

/// Retrains from scratch for each relax factor and evaluates on `test`.
pub fn relax_sweep(
    base: &TrainConfig,
    relax: &[f64],
    train: &[TrainExample],
    test: &[EvalExample],
    catalog: &Catalog,
    options: &EvalOptions,
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    if relax.is_empty() {
        return Err(Error::config("the relax list is empty"));
    }
    let mut rows = Vec::with_capacity(relax.len());
    for &b in relax {
        let mut cfg = base.clone();
        cfg.strategy = SamplingStrategy::Auto;
        cfg.reward.relax = b;
        let mut state = TrainState::new(cfg, catalog.num_items)?;
        state.train(train, catalog, |_| {})?;
        let report = evaluate(&Recommender::from_state(&state), test, catalog, options)?;
        let row = SweepRow {
            relax: b,
            sample_rate: report.mean_sample_rate,
            sample_rate_variance: report.sample_rate_variance,
            fallbacks: report.fallbacks,
            metrics: report.metrics,
            mflops: report.mflops,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("relax,sample_rate,sample_rate_variance,fallbacks");
    let keys: Vec<&String> = rows.first().map(|r| r.metrics.keys().collect()).unwrap_or_default();
    for k in &keys {
        let _ = write!(out, ",{k}");
    }
    out.push_str(",mflops\n");
    for r in rows {
        let _ = write!(out, "{},{},{},{}", r.relax, r.sample_rate, r.sample_rate_variance, r.fallbacks);
        for k in &keys {
            let _ = write!(out, ",{}", r.metrics.get(*k).copied().unwrap_or(f64::NAN));
        }
        let _ = writeln!(out, ",{}", r.mflops);
    }
    out
}
