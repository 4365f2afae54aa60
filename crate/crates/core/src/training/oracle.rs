//! Exhaustive check of the policy-gradient estimator on a tiny instance.
//!
//! `J(φ) = Σ_A π_φ(A) L(X̂_A)` is differentiated by central differences over
//! the sampler parameters. The estimator's exact expectation
//! `Σ_A π(A) ∇_φ Σ_t log π(a_t) · r` with the trajectory reward `r = −Σ_t L_t`
//! must equal `−∇J`.

use serde::Serialize;

use crate::dataset::ItemId;
use crate::error::{Error, Result};
use crate::numerics::{Candidates, Grads};
use crate::rewards::{RewardConfig, RewardTrace};
use crate::sampler::SamplerModel;
use crate::srs::SrsModel;

const MAX_ORACLE_LEN: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub action_vectors: usize,
    pub parameters: usize,
    /// Largest `|∇J|` entry, to show the comparison is not vacuous.
    pub max_abs_gradient: f64,
    /// `max |E[estimator] + ∇J|` with the trajectory reward.
    pub max_abs_deviation: f64,
    /// `max |E[estimator with r + c] − E[estimator]|`.
    pub shift_deviation: f64,
    /// `max |E[estimator with per-step reward-to-go] + ∇J|`; informational.
    pub reward_to_go_deviation: f64,
}

fn flatten(g: &Grads) -> Vec<f64> {
    g.data.iter().flatten().copied().collect()
}

/// Runs the enumeration for `items` (no padding, at most six items).
/// `shift` is the constant added to every reward for the baseline check.
pub fn exact_gradient_oracle(
    srs: &SrsModel,
    sampler: &SamplerModel,
    items: &[ItemId],
    tau: f64,
    shift: f64,
    h: f64,
) -> Result<OracleReport> {
    let n = items.len();
    if !(2..=MAX_ORACLE_LEN).contains(&n) || items.contains(&0) {
        return Err(Error::config(format!(
            "the oracle needs 2..={MAX_ORACLE_LEN} unpadded items, got {n}"
        )));
    }
    let embedding = srs.item_embedding();
    let keep = sampler.policy_forward(embedding, items, tau, None)?.keep;
    let actions: Vec<Vec<u8>> = (0..1u32 << n)
        .map(|mask| (0..n).map(|t| ((mask >> t) & 1) as u8).collect())
        .collect();
    let losses: Vec<_> = actions
        .iter()
        .map(|a| srs.subset_loss(items, a, &Candidates::Full))
        .collect::<Result<_>>()?;
    let ell = srs.stepwise_loglik(items)?;
    let cfg = RewardConfig {
        gamma: 1.0,
        psi0: 0.0,
        psi_slope: 0.0,
        scale: 1.0,
        lambda: 1.0,
        tau,
        use_baseline: false,
        ..RewardConfig::default()
    };
    let prob = |keep: &[f64], a: &[u8]| -> f64 {
        keep.iter()
            .zip(a)
            .map(|(&k, &x)| if x == 1 { k } else { 1.0 - k })
            .product()
    };

    let mut trajectory = sampler.params().zero_grads();
    let mut shifted = sampler.params().zero_grads();
    let mut to_go = sampler.params().zero_grads();
    for (a, loss) in actions.iter().zip(&losses) {
        let trace = RewardTrace::compute(
            &cfg,
            1,
            ell.ell.clone(),
            ell.baseline.clone(),
            loss.per_step.clone(),
            a.clone(),
            keep.clone(),
        )?;
        let r = trace.r[0];
        debug_assert!((r + loss.total).abs() <= 1e-9 * (1.0 + loss.total.abs()));
        let p = prob(&keep, a);
        for (acc, weights) in [
            (&mut trajectory, vec![r; n]),
            (&mut shifted, vec![r + shift; n]),
            (&mut to_go, trace.r.clone()),
        ] {
            let (_, mut g) = sampler.log_prob_gradient(embedding, items, tau, a, &weights, None)?;
            g.scale(p);
            acc.add(&g);
        }
    }

    let objective = |s: &SamplerModel| -> Result<f64> {
        let keep = s.policy_forward(embedding, items, tau, None)?.keep;
        Ok(actions.iter().zip(&losses).map(|(a, l)| prob(&keep, a) * l.total).sum())
    };
    let mut probe = sampler.clone();
    let mut exact = Vec::new();
    for ti in 0..probe.params().len() {
        for j in 0..probe.params().tensors()[ti].len() {
            let orig = probe.params().tensors()[ti].data()[j];
            probe.params_mut().tensors_mut()[ti].data_mut()[j] = orig + h;
            let up = objective(&probe)?;
            probe.params_mut().tensors_mut()[ti].data_mut()[j] = orig - h;
            let down = objective(&probe)?;
            probe.params_mut().tensors_mut()[ti].data_mut()[j] = orig;
            exact.push((up - down) / (2.0 * h));
        }
    }

    let max_dev = |est: &[f64], reference: &[f64], sign: f64| {
        est.iter()
            .zip(reference)
            .map(|(e, r)| (e - sign * r).abs())
            .fold(0.0, f64::max)
    };
    let trajectory = flatten(&trajectory);
    Ok(OracleReport {
        action_vectors: actions.len(),
        parameters: exact.len(),
        max_abs_gradient: exact.iter().map(|x| x.abs()).fold(0.0, f64::max),
        max_abs_deviation: max_dev(&trajectory, &exact, -1.0),
        shift_deviation: max_dev(&flatten(&shifted), &trajectory, 1.0),
        reward_to_go_deviation: max_dev(&flatten(&to_go), &exact, -1.0),
    })
}
