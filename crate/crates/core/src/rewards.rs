//! Sampler rewards over one unpadded sequence of `n` items.
//!
//! Losses are indexed by the step that predicts the next item: `loss[t]` is
//! the loss of predicting `items[t + 1]`, so loss arrays have `n - 1` entries.
//! Keep-probabilities, log-likelihoods, actions and rewards have `n`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-epoch increase of the future-reward threshold.
pub const PSI_SLOPE: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub gamma: f64,
    pub psi0: f64,
    pub psi_slope: f64,
    /// Relax factor `b` of the perplexity reward.
    pub relax: f64,
    /// Scale `k` of the combined reward.
    pub scale: f64,
    /// Trade-off `λ` between the two reward channels.
    pub lambda: f64,
    /// Policy softmax temperature.
    pub tau: f64,
    /// Subtract the full-sequence loss in the future reward.
    pub use_baseline: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            psi0: 0.8,
            psi_slope: PSI_SLOPE,
            relax: 1.0,
            scale: 2e-3,
            lambda: 0.5,
            tau: 5.0,
            use_baseline: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(0.0..=1.0).contains(&self.gamma) {
            problems.push(format!("gamma must be in [0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            problems.push(format!("lambda must be in [0, 1], got {}", self.lambda));
        }
        if !(self.scale > 0.0) {
            problems.push(format!("scale must be positive, got {}", self.scale));
        }
        if !(self.tau > 0.0) {
            problems.push(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.psi0) || !self.psi_slope.is_finite() {
            problems.push(format!("psi0 must be in [0, 1], got {}", self.psi0));
        }
        if !self.relax.is_finite() {
            problems.push("relax must be finite".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn psi(&self, epoch: usize) -> Result<f64> {
        psi_schedule_with(self.psi0, self.psi_slope, epoch)
    }
}

/// `ψ0 + 0.03·(epoch − 1)` for 1-based epochs. Past 1 the threshold
/// silences the future-prediction reward entirely.
pub fn psi_schedule(psi0: f64, epoch: usize) -> Result<f64> {
    psi_schedule_with(psi0, PSI_SLOPE, epoch)
}

pub fn psi_schedule_with(psi0: f64, slope: f64, epoch: usize) -> Result<f64> {
    if epoch == 0 {
        return Err(Error::config("epochs are numbered from 1"));
    }
    Ok(psi0 + slope * (epoch - 1) as f64)
}

/// `r_t = g_t + γ r_{t+1}` from the end.
pub fn discounted_returns(g: &[f64], gamma: f64) -> Vec<f64> {
    let mut r = vec![0.0; g.len()];
    let mut acc = 0.0;
    for t in (0..g.len()).rev() {
        acc = g[t] + gamma * acc;
        r[t] = acc;
    }
    r
}

/// Future-prediction reward. Step `t'` contributes `-(L_{t'} - L^b_{t'})`
/// only when the keep-probability of its target exceeds `psi`. Returns `n`
/// values; the last step has no future and gets 0.
pub fn future_prediction_reward(
    losses: &[f64],
    baseline: &[f64],
    keep: &[f64],
    psi: f64,
    gamma: f64,
) -> Result<Vec<f64>> {
    let n = keep.len();
    if losses.len() + 1 != n.max(1) || baseline.len() != losses.len() {
        return Err(Error::Shape {
            op: "future_prediction_reward",
            left: vec![losses.len(), baseline.len()],
            right: vec![n],
        });
    }
    let g: Vec<f64> = (0..losses.len())
        .map(|t| if keep[t + 1] > psi { -(losses[t] - baseline[t]) } else { 0.0 })
        .collect();
    let mut r = discounted_returns(&g, gamma);
    r.resize(n, 0.0);
    Ok(r)
}

/// `exp(-mean ℓ)`.
pub fn perplexity(ell: &[f64]) -> Result<f64> {
    if ell.is_empty() {
        return Err(Error::data("perplexity of an empty sequence"));
    }
    Ok((-ell.iter().sum::<f64>() / ell.len() as f64).exp())
}

/// `(ℓ_t − log(1/PP) + b)(2a_t − 1)`.
pub fn perplexity_reward(ell: &[f64], pp: f64, actions: &[u8], relax: f64) -> Result<Vec<f64>> {
    if ell.len() != actions.len() {
        return Err(Error::Shape {
            op: "perplexity_reward",
            left: vec![ell.len()],
            right: vec![actions.len()],
        });
    }
    let log_inv_pp = -pp.ln();
    Ok(ell
        .iter()
        .zip(actions)
        .map(|(&l, &a)| (l - log_inv_pp + relax) * if a != 0 { 1.0 } else { -1.0 })
        .collect())
}

/// `k(λ r^pre + (1 − λ) r^pp)`.
pub fn combine(r_pre: &[f64], r_pp: &[f64], scale: f64, lambda: f64) -> Result<Vec<f64>> {
    if r_pre.len() != r_pp.len() {
        return Err(Error::Shape {
            op: "combine",
            left: vec![r_pre.len()],
            right: vec![r_pp.len()],
        });
    }
    Ok(r_pre
        .iter()
        .zip(r_pp)
        .map(|(&a, &b)| scale * (lambda * a + (1.0 - lambda) * b))
        .collect())
}

/// Everything that went into one sequence's rewards.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardTrace {
    pub ell: Vec<f64>,
    pub baseline: Vec<f64>,
    pub losses: Vec<f64>,
    pub r_pre: Vec<f64>,
    pub r_pp: Vec<f64>,
    pub r: Vec<f64>,
    pub actions: Vec<u8>,
    pub keep: Vec<f64>,
    pub psi: f64,
}

impl RewardTrace {
    /// Combines both channels for one unpadded sequence. `L^b_t` only enters
    /// where the subset actually predicts `items[t + 1]` (the target is kept
    /// and something before it is), so a dropped target contributes nothing
    /// rather than a free `+L^b_t`. Without the baseline option, `L^b` is
    /// taken as zero.
    pub fn compute(
        cfg: &RewardConfig,
        epoch: usize,
        ell: Vec<f64>,
        baseline: Vec<f64>,
        losses: Vec<f64>,
        actions: Vec<u8>,
        keep: Vec<f64>,
    ) -> Result<Self> {
        let psi = cfg.psi(epoch)?;
        if actions.len() != baseline.len() + 1 {
            return Err(Error::Shape {
                op: "reward_trace",
                left: vec![actions.len()],
                right: vec![baseline.len()],
            });
        }
        let mut seen = false;
        let base: Vec<f64> = baseline
            .iter()
            .enumerate()
            .map(|(t, &b)| {
                seen |= actions[t] != 0;
                if cfg.use_baseline && seen && actions[t + 1] != 0 {
                    b
                } else {
                    0.0
                }
            })
            .collect();
        let r_pre = future_prediction_reward(&losses, &base, &keep, psi, cfg.gamma)?;
        let pp = perplexity(&ell)?;
        let r_pp = perplexity_reward(&ell, pp, &actions, cfg.relax)?;
        let r = combine(&r_pre, &r_pp, cfg.scale, cfg.lambda)?;
        Ok(Self {
            ell,
            baseline,
            losses,
            r_pre,
            r_pp,
            r,
            actions,
            keep,
            psi,
        })
    }
}
