//! Dysarthria-guided contrastive preference optimization over durations:
//! confidence-scaled dynamic weights, a hinge loss pushing predictions toward
//! dysarthric reference durations and away from normal-speech references by a
//! margin, and the normal-duration reference provider.
//!
//! Distances are measured as absolute differences in log-duration space,
//! consistent with the log-scale duration regression, and the loss runs over
//! the N pre-insertion phoneme positions only (pause rows have no
//! normal-speech counterpart).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::load_normal_table;
use crate::error::{Error, Result};
use crate::rhythm::{PausePrediction, RhythmModel};
use crate::scalar::{fl, fu, Scalar};


#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CpoConfig {
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
}

impl Default for CpoConfig {
    fn default() -> Self {
        CpoConfig {
            alpha: 0.7,
            beta: 0.3,
            margin: 0.75,
        }
    }
}

impl CpoConfig {
    /// Validates non-negativity; α < β is legal but warned against since
    /// pause positions are meant to dominate.
    pub fn validate(&self) -> Result<Option<String>> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.margin < 0.0 {
            return Err(Error::Config(
                "cpo alpha, beta and margin must be non-negative".into(),
            ));
        }
        Ok((self.alpha < self.beta).then(|| {
            format!(
                "cpo alpha ({}) < beta ({}): pause positions will be down-weighted",
                self.alpha, self.beta
            )
        }))
    }
}

/// Per-phoneme reference log-durations from normal (non-dysarthric) speech,
/// indexed by the pre-insertion phoneme positions.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalReference<F> {
    pub log_durations: Vec<F>,
}

/// Dynamic weights: w_i = α·ŝ_{i,s_i} at pause positions (s_i > 0) and
/// β·ŝ_{i,0} at non-pause positions.
pub fn cpo_weights<F: Scalar>(
    pred: &PausePrediction<F>,
    labels: &[usize],
    cfg: &CpoConfig,
) -> Result<Vec<F>> {
    if pred.probs.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows for {} labels",
            pred.probs.rows(),
            labels.len()
        )));
    }
    let alpha: F = fl(cfg.alpha);
    let beta: F = fl(cfg.beta);
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l >= pred.probs.cols() {
                return Err(Error::Validation(format!("label {l} out of range")));
            }
            Ok(if l > 0 {
                alpha * pred.probs.at(i, l)
            } else {
                beta * pred.probs.at(i, 0)
            })
        })
        .collect()
}

/// Contrastive preference loss
/// (1/N) Σ w_i · max(0, |d̂_i − d_i| − |d̂_i − d_iⁿ| + m)
/// over log-durations; zero when every prediction is at least m closer to the
/// dysarthric target than to the normal reference.
pub fn cpo_loss<F: Scalar>(
    pred_log_d: &[F],
    dys_log_d: &[F],
    normal_log_d: &[F],
    weights: &[F],
    cfg: &CpoConfig,
) -> Result<F> {
    let n = pred_log_d.len();
    if dys_log_d.len() != n || normal_log_d.len() != n || weights.len() != n {
        return Err(Error::Shape(format!(
            "cpo_loss lengths differ: pred {n}, dys {}, normal {}, weights {}",
            dys_log_d.len(),
            normal_log_d.len(),
            weights.len()
        )));
    }
    if n == 0 {
        return Err(Error::Shape("cpo_loss over empty sequence".into()));
    }
    let m: F = fl(cfg.margin);
    let mut sum = F::zero();
    for i in 0..n {
        let arg = (pred_log_d[i] - dys_log_d[i]).abs() - (pred_log_d[i] - normal_log_d[i]).abs() + m;
        sum += weights[i] * arg.max(F::zero());
    }
    Ok(sum / fu(n))
}

/// Source of per-phoneme normal-speech reference durations.
pub enum NormalProvider<F> {
    /// Mean frame counts per phoneme id (lookup-table mode).
    Table(BTreeMap<usize, F>),
    /// A frozen duration model run on the pause-free phoneme sequence.
    Model {
        params: crate::nn::ParamSet<F>,
        model: RhythmModel,
    },
}

impl<F: Scalar> NormalProvider<F> {
    pub fn from_table_file(path: impl AsRef<Path>) -> Result<Self> {
        let entries = load_normal_table(path)?;
        let mut map = BTreeMap::new();
        for (id, frames) in entries {
            map.insert(id, fl(frames));
        }
        Ok(NormalProvider::Table(map))
    }

    pub fn from_pairs(pairs: &[(usize, f64)]) -> Self {
        NormalProvider::Table(pairs.iter().map(|&(id, f)| (id, fl::<F>(f))).collect())
    }

    /// Log-durations of normal speech for a phoneme sequence.
    pub fn normal_reference(&self, tokens: &[usize]) -> Result<NormalReference<F>> {
        match self {
            NormalProvider::Table(map) => {
                let log_durations = tokens
                    .iter()
                    .map(|t| {
                        map.get(t)
                            .map(|&frames| frames.ln())
                            .ok_or(Error::UnknownToken(*t))
                    })
                    .collect::<Result<Vec<F>>>()?;
                Ok(NormalReference { log_durations })
            }
            NormalProvider::Model { params, model } => {
                let e = model.encode_phonemes(params, tokens)?;
                // normal speech is modeled pause-free: no insertion stage
                let h = model.encode_augmented(params, &e);
                let d = model.predict_durations(params, &h);
                Ok(NormalReference {
                    log_durations: d.log_durations,
                })
            }
        }
    }
}

/// Tape-level CPO loss for training: weights flow gradient into the pause
/// predictor and the hinge flows into the duration predictor.
pub fn cpo_loss_t<F: Scalar>(
    tape: &mut crate::tape::Tape<F>,
    probs: crate::tape::Var,
    pred_log_d: crate::tape::Var,
    labels: &[usize],
    dys_log_d: &[F],
    normal_log_d: &[F],
    cfg: &CpoConfig,
) -> crate::tape::Var {
    let w = tape.label_prob_weights(probs, labels, fl(cfg.alpha), fl(cfg.beta));
    let h = tape.cpo_hinge(pred_log_d, dys_log_d, normal_log_d, fl(cfg.margin));
    let wh = tape.mul(w, h);
    tape.mean_all(wh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn weights_match_worked_examples() {
        let cfg = CpoConfig {
            alpha: 0.7,
            beta: 0.3,
            margin: 0.75,
        };
        // pause position: w = α·ŝ_{i,s_i}
        let pred = PausePrediction::<f64> {
            probs: Tensor::from_rows(&[vec![0.2, 0.8]]).unwrap(),
        };
        let w = cpo_weights(&pred, &[1], &cfg).unwrap();
        assert!((w[0] - 0.56).abs() < 1e-12);

        // one-hot non-pause: w = β·1.0
        let pred = PausePrediction::<f64> {
            probs: Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(),
        };
        let w = cpo_weights(&pred, &[0], &cfg).unwrap();
        assert!((w[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn equal_alpha_beta_is_symmetric() {
        let cfg = CpoConfig {
            alpha: 0.5,
            beta: 0.5,
            margin: 0.75,
        };
        let pred = PausePrediction::<f64> {
            probs: Tensor::from_rows(&[vec![0.6, 0.4], vec![0.4, 0.6]]).unwrap(),
        };
        // both positions predict their true class with probability 0.6
        let w = cpo_weights(&pred, &[0, 1], &cfg).unwrap();
        assert!((w[0] - w[1]).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_worked_examples() {
        let cfg = CpoConfig {
            alpha: 0.7,
            beta: 0.3,
            margin: 0.75,
        };
        // hinge satisfied with margin to spare → 0
        let l = cpo_loss(&[2.0f64], &[1.8], &[1.0], &[0.56], &cfg).unwrap();
        assert_eq!(l, 0.0);

        // active hinge: 0.27·(0.4 − 0.1 + 0.75) = 0.2835
        let l = cpo_loss(&[1.4f64], &[1.0], &[1.5], &[0.27], &cfg).unwrap();
        assert!((l - 0.2835).abs() < 1e-12);
    }

    #[test]
    fn identical_references_reduce_to_margin() {
        let cfg = CpoConfig::default();
        let d = [1.3f64, 0.2, 2.0];
        let w = [0.5f64, 0.25, 0.75];
        let l = cpo_loss(&[1.0, 0.5, 1.9], &d, &d, &w, &cfg).unwrap();
        let mean_w = w.iter().sum::<f64>() / 3.0;
        assert!((l - cfg.margin * mean_w).abs() < 1e-12);
    }

    #[test]
    fn zero_loss_region_is_exact() {
        let cfg = CpoConfig::default();
        use rand::Rng;
        let mut rng = crate::rng::seeded(31);
        for _ in 0..300 {
            let n = rng.random_range(1..=8usize);
            let mut pred = Vec::new();
            let mut dys = Vec::new();
            let mut nrm = Vec::new();
            let mut w = Vec::new();
            for _ in 0..n {
                let p: f64 = rng.random_range(-2.0..2.0);
                let r: f64 = rng.random_range(0.0..0.5);
                let slack: f64 = rng.random_range(0.001..1.0);
                let side = if rng.random_range(0.0..1.0) < 0.5 { 1.0 } else { -1.0 };
                pred.push(p);
                dys.push(p + side * r);
                nrm.push(p - side * (r + cfg.margin + slack));
                w.push(rng.random_range(0.0..0.7));
            }
            let l = cpo_loss(&pred, &dys, &nrm, &w, &cfg).unwrap();
            assert_eq!(l, 0.0, "hinge must be exactly zero when satisfied");
        }
    }

    #[test]
    fn loss_rejects_length_mismatch() {
        let cfg = CpoConfig::default();
        assert!(matches!(
            cpo_loss(&[1.0f64], &[1.0, 2.0], &[1.0], &[0.5], &cfg),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn table_provider_looks_up_and_logs() {
        let p: NormalProvider<f64> = NormalProvider::from_pairs(&[(0, 5.0), (1, 3.0)]);
        let r = p.normal_reference(&[0, 1, 0]).unwrap();
        assert!((r.log_durations[0] - 5.0f64.ln()).abs() < 1e-12);
        assert!((r.log_durations[1] - 3.0f64.ln()).abs() < 1e-12);
        assert_eq!(r, p.normal_reference(&[0, 1, 0]).unwrap());
        assert!(matches!(
            p.normal_reference(&[7]),
            Err(Error::UnknownToken(7))
        ));
    }

    #[test]
    fn alpha_below_beta_warns_but_passes() {
        let cfg = CpoConfig {
            alpha: 0.2,
            beta: 0.5,
            margin: 0.75,
        };
        assert!(cfg.validate().unwrap().is_some());
        let cfg = CpoConfig::default();
        assert!(cfg.validate().unwrap().is_none());
    }

    #[test]
    fn tape_loss_matches_pure_loss() {
        use crate::tape::Tape;
        let cfg = CpoConfig::default();
        let probs = Tensor::from_rows(&[vec![0.1, 0.6, 0.3], vec![0.8, 0.1, 0.1]]).unwrap();
        let labels = [1usize, 0];
        let pred = [1.2f64, 0.4];
        let dys = [1.0f64, 0.9];
        let nrm = [0.5f64, 0.3];

        let pure_w = cpo_weights(
            &PausePrediction {
                probs: probs.clone(),
            },
            &labels,
            &cfg,
        )
        .unwrap();
        let pure = cpo_loss(&pred, &dys, &nrm, &pure_w, &cfg).unwrap();

        let mut tape: Tape<f64> = Tape::new();
        let pv = tape.leaf(probs);
        let dv = tape.leaf(Tensor::column(&pred));
        let l = cpo_loss_t(&mut tape, pv, dv, &labels, &dys, &nrm, &cfg);
        assert!((tape.item(l) - pure).abs() < 1e-12);
    }

    #[test]
    fn raising_true_class_probability_raises_active_loss() {
        let cfg = CpoConfig::default();
        // active hinge at a pause position
        let mk = |p_true: f64| {
            let probs = Tensor::from_rows(&[vec![1.0 - p_true, p_true]]).unwrap();
            let w = cpo_weights(&PausePrediction { probs }, &[1], &cfg).unwrap();
            cpo_loss(&[1.0f64], &[2.0], &[1.1], &w, &cfg).unwrap()
        };
        let lo = mk(0.3);
        let hi = mk(0.9);
        assert!(hi > lo, "confident pause predictions weigh more");
    }
}
