//! Monotonic alignment search over phoneme-to-frame log-likelihoods, duration
//! extraction, and K-class pause labeling from alignment files.

use crate::corpus::{AlignToken, TokenKind};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Monotone surjective phoneme-to-frame assignment: `assignment[t]` is the
/// phoneme index of frame t, non-decreasing with steps of 0 or 1, covering
/// every phoneme at least once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentPath {
    pub assignment: Vec<usize>,
}

impl AlignmentPath {
    pub fn validate(&self, n_phonemes: usize) -> Result<()> {
        let t = self.assignment.len();
        if t == 0 || n_phonemes == 0 {
            return Err(Error::Validation("empty alignment path".into()));
        }
        if self.assignment[0] != 0 || self.assignment[t - 1] != n_phonemes - 1 {
            return Err(Error::Validation(
                "path must start at phoneme 0 and end at the last phoneme".into(),
            ));
        }
        for pair in self.assignment.windows(2) {
            let step = pair[1] as isize - pair[0] as isize;
            if step != 0 && step != 1 {
                return Err(Error::Validation("path steps must be 0 or 1".into()));
            }
        }
        Ok(())
    }

    pub fn score<F: Scalar>(&self, log_lik: &Tensor<F>) -> F {
        self.assignment
            .iter()
            .enumerate()
            .map(|(t, &i)| log_lik.at(i, t))
            .sum()
    }
}

/// Maximizes Σ_t log_lik[path[t], t] over all valid alignment paths by
/// dynamic programming; ties prefer staying on the current phoneme.
pub fn monotonic_alignment_search<F: Scalar>(log_lik: &Tensor<F>) -> Result<AlignmentPath> {
    let (n, t) = log_lik.shape();
    if n == 0 || t == 0 {
        return Err(Error::Validation("log-likelihood matrix is empty".into()));
    }
    if t < n {
        return Err(Error::Infeasible { n, t });
    }
    if !log_lik.all_finite() {
        return Err(Error::NonFinite("log-likelihood entries".into()));
    }

    let ninf = F::neg_infinity();
    // q[i][tf] = best score of a path over frames 0..=tf ending on phoneme i
    let mut q = Tensor::filled(n, t, ninf);
    q.set(0, 0, log_lik.at(0, 0));
    for tf in 1..t {
        // feasibility: i ≤ tf and the remaining phonemes must fit
        let lo = n.saturating_sub(t - tf);
        let hi = (tf).min(n - 1);
        for i in lo..=hi {
            let stay = q.at(i, tf - 1);
            let advance = if i > 0 { q.at(i - 1, tf - 1) } else { ninf };
            let best = if stay >= advance { stay } else { advance };
            if best > ninf {
                q.set(i, tf, best + log_lik.at(i, tf));
            }
        }
    }

    // Backtrack from (n-1, t-1); stay preferred on ties.
    let mut assignment = vec![0usize; t];
    let mut i = n - 1;
    assignment[t - 1] = i;
    for tf in (1..t).rev() {
        let stay = q.at(i, tf - 1);
        let advance = if i > 0 { q.at(i - 1, tf - 1) } else { ninf };
        if stay < advance {
            i -= 1;
        }
        assignment[tf - 1] = i;
    }
    let path = AlignmentPath { assignment };
    debug_assert!(path.validate(n).is_ok());
    Ok(path)
}

/// Frames assigned to each phoneme along a path.
pub fn durations_from_path(path: &AlignmentPath, n_phonemes: usize) -> Result<Vec<usize>> {
    path.validate(n_phonemes)?;
    let mut durations = vec![0usize; n_phonemes];
    for &i in &path.assignment {
        durations[i] += 1;
    }
    Ok(durations)
}

/// K-class pause labels for the phonemes of an utterance, derived from the
/// silence immediately following each phoneme token.
#[derive(Clone, Debug, PartialEq)]
pub struct PauseLabelSequence<F> {
    pub labels: Vec<usize>,
    pub k: usize,
    pub thresholds_s: Vec<F>,
}

/// Pause bucketing config: K classes need K−2 positive duration boundaries;
/// class 0 is "no pause", classes 1..K−1 split positive silence at the
/// boundaries, last class unbounded above.
#[derive(Clone, Debug)]
pub struct PauseLabelConfig<F> {
    pub k: usize,
    pub thresholds_s: Vec<F>,
}

impl<F: Scalar> Default for PauseLabelConfig<F> {
    fn default() -> Self {
        PauseLabelConfig {
            k: 4,
            thresholds_s: vec![crate::scalar::fl(0.15), crate::scalar::fl(0.40)],
        }
    }
}

impl<F: Scalar> PauseLabelConfig<F> {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config("pause classes K must be ≥ 2".into()));
        }
        if self.thresholds_s.len() + 2 != self.k {
            return Err(Error::Config(format!(
                "K = {} needs {} positive thresholds, got {}",
                self.k,
                self.k - 2,
                self.thresholds_s.len()
            )));
        }
        let mut prev = F::zero();
        for &t in &self.thresholds_s {
            if t <= prev {
                return Err(Error::Config("thresholds must be ascending positive".into()));
            }
            prev = t;
        }
        Ok(())
    }

    /// Class for a silence duration in seconds: 0 for none, then
    /// (0, th₀] → 1, (th₀, th₁] → 2, …, > th_last → K−1.
    pub fn classify(&self, silence_s: F) -> usize {
        if silence_s <= F::zero() {
            return 0;
        }
        for (j, &th) in self.thresholds_s.iter().enumerate() {
            if silence_s <= th {
                return j + 1;
            }
        }
        self.k - 1
    }
}

/// Labels each phoneme with the class of the silence that immediately
/// follows it. Silence before the first phoneme is ignored: pauses attach to
/// the preceding phoneme only.
pub fn pause_labels_from_alignment<F: Scalar>(
    tokens: &[AlignToken],
    cfg: &PauseLabelConfig<F>,
    frame_shift_s: F,
) -> Result<PauseLabelSequence<F>> {
    cfg.validate()?;
    for pair in tokens.windows(2) {
        if pair[1].start_frame < pair[0].end_frame {
            return Err(Error::Format(format!(
                "overlapping alignment tokens at frames [{},{}) and [{},{})",
                pair[0].start_frame, pair[0].end_frame, pair[1].start_frame, pair[1].end_frame
            )));
        }
    }
    let mut labels = Vec::new();
    for (idx, tok) in tokens.iter().enumerate() {
        if tok.kind != TokenKind::Phoneme {
            continue;
        }
        let silence_s = match tokens.get(idx + 1) {
            Some(next) if next.kind == TokenKind::Silence => {
                crate::scalar::fu::<F>(next.frames()) * frame_shift_s
            }
            _ => F::zero(),
        };
        labels.push(cfg.classify(silence_s));
    }
    Ok(PauseLabelSequence {
        labels,
        k: cfg.k,
        thresholds_s: cfg.thresholds_s.clone(),
    })
}
