//! Matmul-only FLOP counts for inference over one user's history.
//!
//! A layer over `m` tokens of width `d` with feed-forward width `h` costs
//! `4·d·m²` for the attention scores and their product with the values plus
//! `(8·d² + 4·d·h)·m` for the four projections and the feed-forward pair.
//! Every multiply-add counts as two FLOPs. The recommender's expected kept
//! length enters through `E[m] = μN` and `E[m²] = μ²N² + Nσ²`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub layers: usize,
    /// History length `N` before sampling.
    pub seq_len: f64,
    pub mu: f64,
    pub sigma2: f64,
    pub d: usize,
    pub hidden: usize,
    pub num_items: usize,
    /// Whether a one-layer sampler runs over the full history first.
    pub sampler: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub srs_mflops: f64,
    pub sampler_mflops: f64,
    pub total_mflops: f64,
    /// The recommender over the unsampled history, no sampler.
    pub full_mflops: f64,
    /// `1 − total / full`.
    pub savings_ratio: f64,
    /// Recommender attention-score cost over its full-history value.
    pub quadratic_ratio: f64,
    /// Full quadratic cost minus the sampled recommender and sampler
    /// quadratic costs, in FLOPs.
    pub quadratic_saving: f64,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.layers == 0 || self.d == 0 || self.hidden == 0 || self.num_items == 0 {
            return bad("layers, d, hidden and num_items must be positive");
        }
        if !(self.seq_len > 0.0 && self.seq_len.is_finite()) {
            return bad("seq_len must be positive");
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return bad("mu must be in [0, 1]");
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return bad("sigma2 must be non-negative");
        }
        Ok(())
    }

    fn quad(&self) -> f64 {
        4.0 * self.d as f64
    }

    fn linear(&self) -> f64 {
        let d = self.d as f64;
        8.0 * d * d + 4.0 * d * self.hidden as f64
    }

    fn head(&self) -> f64 {
        2.0 * self.d as f64 * (self.num_items + 1) as f64
    }

    fn srs_flops(&self, m: f64, m2: f64) -> f64 {
        self.layers as f64 * (self.quad() * m2 + self.linear() * m) + self.head()
    }
}

pub fn flops_estimate(model: &CostModel) -> Result<FlopsEstimate> {
    model.validate()?;
    let n = model.seq_len;
    let layers = model.layers as f64;
    let m2 = model.mu * model.mu * n * n + n * model.sigma2;
    let srs = model.srs_flops(model.mu * n, m2);
    let full = model.srs_flops(n, n * n);
    let (sampler, sampler_quad) = if model.sampler {
        let d = model.d as f64;
        // Block plus the keep/drop MLP on [h; e].
        let mlp = 2.0 * n * (2.0 * d * d + 2.0 * d);
        (model.quad() * n * n + model.linear() * n + mlp, model.quad() * n * n)
    } else {
        (0.0, 0.0)
    };
    let total = srs + sampler;
    let full_quad = layers * model.quad() * n * n;
    Ok(FlopsEstimate {
        srs_mflops: srs / 1e6,
        sampler_mflops: sampler / 1e6,
        total_mflops: total / 1e6,
        full_mflops: full / 1e6,
        savings_ratio: 1.0 - total / full,
        quadratic_ratio: layers * model.quad() * m2 / full_quad,
        quadratic_saving: full_quad - layers * model.quad() * m2 - sampler_quad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(mu: f64, sigma2: f64, sampler: bool) -> CostModel {
        CostModel {
            layers: 2,
            seq_len: 50.0,
            mu,
            sigma2,
            d: 64,
            hidden: 128,
            num_items: 1000,
            sampler,
        }
    }

    #[test]
    fn no_sampling_costs_the_full_sequence() {
        let e = flops_estimate(&model(1.0, 0.0, false)).unwrap();
        assert_eq!(e.srs_mflops.to_bits(), e.full_mflops.to_bits());
        assert_eq!(e.savings_ratio, 0.0);
        assert_eq!(e.quadratic_ratio, 1.0);
    }

    #[test]
    fn quadratic_term_follows_mu_squared() {
        let e = flops_estimate(&model(0.5, 0.0, true)).unwrap();
        assert_eq!(e.quadratic_ratio, 0.25);
    }

    #[test]
    fn saving_matches_the_closed_form() {
        let m = model(0.5, 0.0, true);
        let e = flops_estimate(&m).unwrap();
        let (l, n, mu) = (2.0, 50.0, 0.5);
        let closed = (l - mu * mu * l - 1.0) * n * n;
        assert_eq!(e.quadratic_saving, 4.0 * m.d as f64 * closed);
    }

    #[test]
    fn cost_grows_with_the_sample_rate() {
        let costs: Vec<f64> = [0.1, 0.3, 0.5, 0.9]
            .iter()
            .map(|&mu| flops_estimate(&model(mu, 0.01, true)).unwrap().total_mflops)
            .collect();
        assert!(costs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn invalid_models_are_rejected() {
        assert!(flops_estimate(&model(1.5, 0.0, false)).is_err());
        assert!(flops_estimate(&model(0.5, -1.0, false)).is_err());
        let mut m = model(0.5, 0.0, false);
        m.layers = 0;
        assert!(flops_estimate(&m).is_err());
    }
}
