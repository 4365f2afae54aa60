//! Joint training: per batch, sample actions, fit the recommender on the kept
//! subsequences with Adam, score the actions and push the sampler up the
//! policy gradient with plain SGD.

mod checkpoint;
mod optim;
mod oracle;

use serde::{Deserialize, Serialize};

use crate::dataset::{batch_with_negatives, Catalog, TrainExample};
use crate::error::{Error, Result};
use crate::numerics::{Candidates, Grads, Tensor};
use crate::rewards::{RewardConfig, RewardTrace};
use crate::rng::{stream, Purpose};
use crate::sampler::{baseline_select, SampledActions, SamplerConfig, SamplerModel, SamplingStrategy};
use crate::srs::{strip_padding, BackboneConfig, SrsModel};

pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use optim::{sgd_ascent, Adam, AdamConfig};
pub use oracle::{exact_gradient_oracle, OracleReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` trains with a full-catalog softmax.
    pub num_negatives: Option<usize>,
    /// Recommender learning rate (Adam).
    pub lr_srs: f64,
    /// Sampler learning rate.
    pub lr_sampler: f64,
    pub sampler_optimizer: SamplerOptimizer,
    /// Epochs during which the sampler acts but is not updated.
    pub sampler_warmup_epochs: usize,
    /// Global-norm clipping applied to both updates.
    pub clip_norm: Option<f64>,
    pub adam: AdamConfig,
    pub strategy: SamplingStrategy,
    pub backbone: BackboneConfig,
    pub sampler: SamplerConfig,
    pub reward: RewardConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 128,
            num_negatives: None,
            lr_srs: 1e-3,
            lr_sampler: 0.1,
            sampler_optimizer: SamplerOptimizer::Sgd,
            sampler_warmup_epochs: 0,
            clip_norm: Some(5.0),
            adam: AdamConfig::default(),
            strategy: SamplingStrategy::Auto,
            backbone: BackboneConfig::default(),
            sampler: SamplerConfig::default(),
            reward: RewardConfig::default(),
        }
    }
}

/// How the sampler climbs its policy gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerOptimizer {
    Sgd,
    /// Adam on the negated gradient, sharing the recommender's betas.
    Adam,
}

pub const PRESETS: [&str; 4] = ["paper-tmall", "paper-alipay", "paper-yelp", "paper-amazon"];

impl TrainConfig {
    /// Full-scale settings for one of the four benchmark logs, or the
    /// desk-scale `synthetic` settings.
    pub fn preset(name: &str) -> Result<Self> {
        if name == "synthetic" {
            return Ok(Self::synthetic());
        }
        let (tau, relax, scale, psi0) = match name {
            "paper-tmall" => (5.0, 1.0, 2e-3, 0.8),
            "paper-alipay" => (5.0, 2.0, 2e-3, 0.8),
            "paper-yelp" => (5.0, 1.0, 2e-2, 0.8),
            "paper-amazon" => (3.0, 0.5, 2e-3, 0.5),
            other => {
                return Err(Error::config(format!(
                    "unknown preset `{other}`; expected synthetic or one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self {
            epochs: 100,
            batch_size: 128,
            num_negatives: Some(10_000),
            lr_srs: 1e-3,
            lr_sampler: 0.1,
            backbone: BackboneConfig {
                d: 128,
                layers: 2,
                heads: 4,
                hidden: 256,
                dropout: 0.2,
                max_len: 50,
            },
            sampler: SamplerConfig {
                heads: 4,
                hidden: 256,
                ..SamplerConfig::default()
            },
            reward: RewardConfig {
                gamma: 0.9,
                psi0,
                relax,
                scale,
                lambda: 0.5,
                tau,
                ..RewardConfig::default()
            },
            ..Self::default()
        })
    }

    /// Settings tuned for the 2,000-user synthetic log on one core. The
    /// sampler uses Adam with a slow step and a large reward scale because
    /// the benchmark step sizes leave it at the uniform policy over 30
    /// epochs; `relax = 0` keeps it from settling on keep-all.
    pub fn synthetic() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr_srs: 5e-3,
            lr_sampler: 3e-4,
            sampler_optimizer: SamplerOptimizer::Adam,
            backbone: BackboneConfig {
                max_len: 20,
                ..BackboneConfig::default()
            },
            reward: RewardConfig {
                scale: 1.0,
                relax: 0.0,
                tau: 5.0,
                ..RewardConfig::default()
            },
            ..Self::default()
        }
    }

    /// Every violated constraint, each prefixed with its field path.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |field: &str, r: Result<()>| {
            match r {
                Err(Error::Config(m)) => problems.push(format!("{field}: {m}")),
                Err(e) => problems.push(format!("{field}: {e}")),
                Ok(()) => {}
            }
        };
        check("backbone", self.backbone.validate());
        check("reward", self.reward.validate());
        check("strategy", self.strategy.validate());
        if self.batch_size == 0 {
            problems.push("batch_size: must be positive".into());
        }
        if !(self.lr_srs > 0.0) {
            problems.push(format!("lr_srs: must be positive, got {}", self.lr_srs));
        }
        if !(self.lr_sampler > 0.0) {
            problems.push(format!("lr_sampler: must be positive, got {}", self.lr_sampler));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            problems.push("clip_norm: must be positive when set".into());
        }
        if self.num_negatives == Some(0) {
            problems.push("num_negatives: must be positive when set".into());
        }
        let s = &self.sampler;
        if s.heads == 0 || self.backbone.d % s.heads != 0 {
            problems.push(format!("sampler.heads: must divide backbone.d ({})", self.backbone.d));
        }
        if s.hidden == 0 {
            problems.push("sampler.hidden: must be positive".into());
        }
        if !(0.0..1.0).contains(&s.dropout) {
            problems.push("sampler.dropout: must be in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&s.inference_threshold) {
            problems.push("sampler.inference_threshold: must be in [0, 1]".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            problems.push("adam: betas must be in [0, 1) and eps positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Everything a run needs to continue: both models, the optimizer state and
/// the number of completed epochs. Random streams are derived from the seed
/// and epoch, so no generator state is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub srs: SrsModel,
    pub sampler: SamplerModel,
    pub adam: Adam,
    /// Moments for the sampler; untouched under SGD.
    pub sampler_adam: Adam,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub psi: f64,
    pub sequences: usize,
    /// Mean next-item loss per prediction term of the kept subsequences.
    pub mean_loss: f64,
    /// Fraction of real items kept.
    pub sample_rate: f64,
    /// Means over policy-sampled steps; zero for fixed strategies.
    pub mean_reward: f64,
    pub mean_r_pre: f64,
    pub mean_r_pp: f64,
    /// Sequences with fewer than two kept items.
    pub degenerate: usize,
}

impl TrainState {
    pub fn new(config: TrainConfig, num_items: usize) -> Result<Self> {
        config.validate()?;
        let srs = SrsModel::new(config.backbone, num_items, &mut stream(config.seed, Purpose::Init, &[0]))?;
        let sampler = SamplerModel::new(
            config.backbone.d,
            config.backbone.max_len,
            config.sampler,
            &mut stream(config.seed, Purpose::Init, &[1]),
        )?;
        let adam = Adam::new(srs.params(), config.adam);
        let sampler_adam = Adam::new(sampler.params(), config.adam);
        Ok(Self {
            config,
            srs,
            sampler,
            adam,
            sampler_adam,
            epoch: 0,
        })
    }

    /// Runs the next epoch (1-based in the threshold schedule).
    pub fn train_epoch(&mut self, train: &[TrainExample], catalog: &Catalog) -> Result<EpochStats> {
        let epoch = self.epoch + 1;
        let cfg = self.config.clone();
        let psi = cfg.reward.psi(epoch)?;
        let batches = batch_with_negatives(
            train,
            cfg.batch_size,
            cfg.backbone.max_len,
            catalog.num_items,
            cfg.num_negatives,
            cfg.seed,
            epoch as u64,
        )?;
        let mut acc = Accumulator::default();
        for (b, batch) in batches.iter().enumerate() {
            let candidates = match &batch.negatives {
                Some(neg) => Candidates::Sampled(neg.clone()),
                None => Candidates::Full,
            };
            let mut srs_grads = self.srs.params().zero_grads();
            let mut sampler_grads = self.sampler.params().zero_grads();
            let mut batch_losses = Vec::with_capacity(batch.sequences.len());
            for (&example, seq) in batch.examples.iter().zip(&batch.sequences) {
                let step = self.train_sequence(seq, example, epoch, &candidates, catalog, &mut acc)?;
                batch_losses.push(step.loss);
                if let Some(g) = step.srs_grads {
                    srs_grads.add(&g);
                }
                if let Some(g) = step.sampler_grads {
                    sampler_grads.add(&g);
                }
            }
            let count = batch.sequences.len() as f64;
            srs_grads.scale(1.0 / count);
            sampler_grads.scale(1.0 / count);
            if !srs_grads.is_finite() || !sampler_grads.is_finite() || batch_losses.iter().any(|l| !l.is_finite()) {
                return Err(numerical_failure(epoch, b, batch, &batch_losses, "non-finite loss or gradient"));
            }
            if let Some(max) = cfg.clip_norm {
                srs_grads.clip_global_norm(max);
                sampler_grads.clip_global_norm(max);
            }
            self.adam.update(self.srs.params_mut(), &srs_grads, cfg.lr_srs);
            if cfg.strategy == SamplingStrategy::Auto && epoch > cfg.sampler_warmup_epochs {
                match cfg.sampler_optimizer {
                    SamplerOptimizer::Sgd => sgd_ascent(self.sampler.params_mut(), &sampler_grads, cfg.lr_sampler),
                    SamplerOptimizer::Adam => {
                        sampler_grads.scale(-1.0);
                        self.sampler_adam
                            .update(self.sampler.params_mut(), &sampler_grads, cfg.lr_sampler);
                    }
                }
            }
            if !self.srs.params().is_finite() || !self.sampler.params().is_finite() {
                return Err(numerical_failure(epoch, b, batch, &batch_losses, "parameters became non-finite"));
            }
        }
        self.epoch = epoch;
        Ok(acc.finish(epoch, psi))
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn train(
        &mut self,
        train: &[TrainExample],
        catalog: &Catalog,
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<Vec<EpochStats>> {
        let mut out = Vec::new();
        while self.epoch < self.config.epochs {
            let stats = self.train_epoch(train, catalog)?;
            on_epoch(&stats);
            out.push(stats);
        }
        Ok(out)
    }

    fn train_sequence(
        &self,
        seq: &[usize],
        example: usize,
        epoch: usize,
        candidates: &Candidates,
        catalog: &Catalog,
        acc: &mut Accumulator,
    ) -> Result<SequenceStep> {
        let cfg = &self.config;
        let (_, body) = strip_padding(seq, self.srs.num_items())?;
        let tags = [epoch as u64, example as u64];
        let tau = cfg.reward.tau;
        let embedding = self.srs.item_embedding();

        // The policy gradient replays the same dropout stream, so it
        // differentiates exactly the policy the actions were drawn from.
        let policy_dropout = || stream(cfg.seed, Purpose::Dropout, &[epoch as u64, example as u64, 1]);
        let mut keep = Vec::new();
        let sampled: SampledActions = match cfg.strategy {
            SamplingStrategy::Auto => {
                let policy = self.sampler.policy_forward(embedding, body, tau, Some(&mut policy_dropout()))?;
                let s = policy.sample(&mut stream(cfg.seed, Purpose::Actions, &tags), cfg.sampler.force_keep_first);
                keep = policy.keep;
                s
            }
            ref fixed => {
                let mut rng = stream(cfg.seed, Purpose::Baseline, &tags);
                let actions = baseline_select(fixed, body, &catalog.popularity, &mut rng)?;
                SampledActions {
                    log_probs: vec![0.0; actions.len()],
                    sampled: vec![false; actions.len()],
                    actions,
                }
            }
        };
        let kept = sampled.actions.iter().filter(|&&a| a != 0).count();
        acc.items += body.len();
        acc.kept += kept;
        acc.sequences += 1;

        let mut drop_rng = stream(cfg.seed, Purpose::Dropout, &[epoch as u64, example as u64, 0]);
        let (subset, srs_grads) =
            self.srs
                .subset_loss_grad(body, &sampled.actions, candidates, Some(&mut drop_rng))?;
        if subset.degenerate {
            acc.degenerate += 1;
        } else {
            acc.loss_sum += subset.total;
            acc.loss_terms += subset.kept - 1;
        }

        let mut sampler_grads = None;
        if cfg.strategy == SamplingStrategy::Auto && epoch > cfg.sampler_warmup_epochs && body.len() >= 2 {
            // Rewards use dropout-free losses so they compare like with like
            // against the full-sequence baseline.
            let losses = if cfg.backbone.dropout > 0.0 {
                self.srs.subset_loss(body, &sampled.actions, candidates)?.per_step
            } else {
                subset.per_step.clone()
            };
            let ll = self.srs.stepwise_loglik(body)?;
            let trace = RewardTrace::compute(
                &cfg.reward,
                epoch,
                ll.ell,
                ll.baseline,
                losses,
                sampled.actions.clone(),
                keep,
            )?;
            let weights: Vec<f64> = trace
                .r
                .iter()
                .zip(&sampled.sampled)
                .map(|(&r, &s)| if s { r } else { 0.0 })
                .collect();
            for t in (0..body.len()).filter(|&t| sampled.sampled[t]) {
                acc.reward_sum += trace.r[t];
                acc.r_pre_sum += trace.r_pre[t];
                acc.r_pp_sum += trace.r_pp[t];
                acc.reward_terms += 1;
            }
            let (_, g) = self.sampler.log_prob_gradient(
                embedding,
                body,
                tau,
                &sampled.actions,
                &weights,
                Some(&mut policy_dropout()),
            )?;
            sampler_grads = Some(g);
        }
        Ok(SequenceStep {
            loss: subset.total,
            srs_grads,
            sampler_grads,
        })
    }
}

struct SequenceStep {
    loss: f64,
    srs_grads: Option<Grads>,
    sampler_grads: Option<Grads>,
}

#[derive(Default)]
struct Accumulator {
    sequences: usize,
    items: usize,
    kept: usize,
    degenerate: usize,
    loss_sum: f64,
    loss_terms: usize,
    reward_sum: f64,
    r_pre_sum: f64,
    r_pp_sum: f64,
    reward_terms: usize,
}

impl Accumulator {
    fn finish(self, epoch: usize, psi: f64) -> EpochStats {
        let div = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
        EpochStats {
            epoch,
            psi,
            sequences: self.sequences,
            mean_loss: div(self.loss_sum, self.loss_terms),
            sample_rate: div(self.kept as f64, self.items),
            mean_reward: div(self.reward_sum, self.reward_terms),
            mean_r_pre: div(self.r_pre_sum, self.reward_terms),
            mean_r_pp: div(self.r_pp_sum, self.reward_terms),
            degenerate: self.degenerate,
        }
    }
}

fn numerical_failure(
    epoch: usize,
    batch: usize,
    data: &crate::dataset::Batch,
    losses: &[f64],
    what: &str,
) -> Error {
    let dump = serde_json::json!({
        "epoch": epoch,
        "batch": batch,
        "examples": data.examples,
        "sequences": data.sequences,
        "losses": losses.iter().map(|l| l.to_string()).collect::<Vec<_>>(),
    });
    Error::Numerical(format!("{what} in epoch {epoch}, batch {batch}; batch dump: {dump}"))
}

/// Gradient of `Σ_t log π(a_t) r_t` over policy-sampled steps.
pub fn policy_gradient(
    sampler: &SamplerModel,
    embedding: &Tensor,
    items: &[usize],
    sampled: &SampledActions,
    rewards: &[f64],
    tau: f64,
) -> Result<Grads> {
    if rewards.len() != items.len() {
        return Err(Error::Shape {
            op: "policy_gradient",
            left: vec![items.len()],
            right: vec![rewards.len()],
        });
    }
    let weights: Vec<f64> = rewards
        .iter()
        .zip(&sampled.sampled)
        .map(|(&r, &s)| if s { r } else { 0.0 })
        .collect();
    sampler
        .log_prob_gradient(embedding, items, tau, &sampled.actions, &weights, None)
        .map(|(_, g)| g)
}

/// One ascent step on `Σ_t log π(a_t) r_t` for a single sequence.
pub fn policy_gradient_update(
    sampler: &mut SamplerModel,
    embedding: &Tensor,
    items: &[usize],
    sampled: &SampledActions,
    rewards: &[f64],
    tau: f64,
    lr: f64,
) -> Result<()> {
    let g = policy_gradient(sampler, embedding, items, sampled, rewards, tau)?;
    sgd_ascent(sampler.params_mut(), &g, lr);
    Ok(())
}

/// Mean per-term full-sequence next-item loss over a training view.
pub fn mean_autoregressive_loss(srs: &SrsModel, train: &[TrainExample]) -> Result<f64> {
    let max_len = srs.config().max_len;
    let (mut sum, mut terms) = (0.0, 0usize);
    for ex in train {
        let items = &ex.items[ex.items.len().saturating_sub(max_len)..];
        if let Some(l) = srs.autoregressive_loss(items, &Candidates::Full)? {
            sum += l.total;
            terms += items.len() - 1;
        }
    }
    Ok(if terms == 0 { 0.0 } else { sum / terms as f64 })
}

#[cfg(test)]
mod tests;
