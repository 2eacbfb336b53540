//! Bidirectional temperature-scaled contrastive loss over a batch similarity
//! matrix whose diagonal holds the matched pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Temperature of the text → point direction (rows of `S`).
    pub tau_text: f64,
    /// Temperature of the point → text direction (columns of `S`).
    pub tau_point: f64,
    pub alpha_text: f64,
    pub alpha_point: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_text: 0.07,
            tau_point: 0.07,
            alpha_text: 0.5,
            alpha_point: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau_text", self.tau_text), ("tau_point", self.tau_point)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {t}")));
            }
        }
        for (name, a) in [("alpha_text", self.alpha_text), ("alpha_point", self.alpha_point)] {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {a}")));
            }
        }
        Ok(())
    }
}

/// `-(1/B) Σ_i [α₁ log softmax(S/τ₁)_ii + α₂ log softmax(Sᵀ/τ₂)_ii]` as a
/// `[1]` node.
pub fn contrastive_loss<T: Real>(g: &mut Graph<T>, sim: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let shape = g.shape(sim).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Shape(format!(
            "similarity matrix must be square, got {shape:?}"
        )));
    }
    if shape[0] < 2 {
        return Err(Error::Argument(format!(
            "contrastive loss needs a batch of at least 2 pairs, got {}",
            shape[0]
        )));
    }
    let b = shape[0] as f64;
    let rows = g.scale(sim, T::of(1.0 / cfg.tau_text));
    let rows = g.log_softmax_rows(rows)?;
    let rows = g.diag(rows)?;
    let rows = g.sum(rows);
    let t = g.transpose(sim)?;
    let cols = g.scale(t, T::of(1.0 / cfg.tau_point));
    let cols = g.log_softmax_rows(cols)?;
    let cols = g.diag(cols)?;
    let cols = g.sum(cols);
    let a = g.scale(rows, T::of(-cfg.alpha_text / b));
    let c = g.scale(cols, T::of(-cfg.alpha_point / b));
    let loss = g.add(a, c)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("contrastive loss evaluated to {v}")));
    }
    Ok(loss)
}

/// Loss value of a plain matrix, no gradients.
pub fn contrastive_loss_value<T: Real>(sim: &Tensor<T>, cfg: &LossConfig) -> Result<T> {
    let mut g = Graph::inference();
    let s = g.constant(sim.clone());
    let l = contrastive_loss(&mut g, s, cfg)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{check_gradients, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_scores_give_log_batch() {
        for b in [2usize, 5, 16] {
            let s = Tensor::<f64>::full(&[b, b], -0.3);
            let l = contrastive_loss_value(&s, &LossConfig::default()).unwrap();
            assert!((l - (b as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_unit_temperature() {
        let cfg = LossConfig {
            tau_text: 1.0,
            tau_point: 1.0,
            ..Default::default()
        };
        let l = contrastive_loss_value(&Tensor::<f64>::identity(2), &cfg).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-14);
    }

    #[test]
    fn shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = Tensor::<f64>::randn(&[4, 4], 1.0, &mut rng);
        let cfg = LossConfig::default();
        let a = contrastive_loss_value(&s, &cfg).unwrap();
        let b = contrastive_loss_value(&s.map(|v| v + 3.5), &cfg).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn single_direction_is_row_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        let cfg = LossConfig {
            tau_text: 0.5,
            alpha_text: 1.0,
            alpha_point: 0.0,
            ..Default::default()
        };
        let mut want = 0.0;
        for i in 0..3 {
            let lse = (0..3).map(|j| (s.at2(i, j) / 0.5).exp()).sum::<f64>().ln();
            want += lse - s.at2(i, i) / 0.5;
        }
        let got = contrastive_loss_value(&s, &cfg).unwrap();
        assert!((got - want / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_single_pair_and_bad_temperature() {
        let one = Tensor::<f64>::full(&[1, 1], 0.0);
        assert!(matches!(
            contrastive_loss_value(&one, &LossConfig::default()),
            Err(Error::Argument(_))
        ));
        let cfg = LossConfig {
            tau_text: 0.0,
            ..Default::default()
        };
        assert!(contrastive_loss_value(&Tensor::<f64>::identity(2), &cfg).is_err());
    }

    #[test]
    fn non_finite_scores_are_reported() {
        let mut s = Tensor::<f64>::identity(2);
        s.data_mut()[1] = f64::NAN;
        assert!(matches!(
            contrastive_loss_value(&s, &LossConfig::default()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Tensor::randn(&[5, 5], 0.2, &mut rng);
        let cfg = LossConfig {
            alpha_text: 0.3,
            tau_point: 0.2,
            ..Default::default()
        };
        let r = check_gradients(
            move |g: &mut Graph<f64>, p: &[Var]| contrastive_loss(g, p[0], &cfg),
            &[s],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
