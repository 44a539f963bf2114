//! Acoustic style extraction: global style tokens attended from a reference
//! mel (A_g) and a vector-quantized local style sequence aligned to the
//! pause-augmented hidden states by attention (A_l).
//!
//! The VQ bottleneck trains with straight-through gradients plus codebook and
//! commitment terms. Gradient checks run against the frozen-offset surrogate
//! (assignment and quantization offsets captured at the evaluation point):
//! that surrogate is the differentiable function whose exact gradient the
//! straight-through estimator computes; finite differences of the hard
//! forward would measure the quantizer's plateaus instead.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::MelSpectrogram;
use crate::error::{Error, Result};
use crate::nn::{bind_params, Conv1d, Linear, ParamId, ParamSet};
use crate::rhythm::EncodedSequence;
use crate::scalar::{fl, fu, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct StyleConfig {
    /// Number of learned global style tokens.
    pub gst_tokens: usize,
    pub gst_heads: usize,
    /// Dimension of the global style vector A_g.
    pub global_dim: usize,
    /// Channels in the reference-mel encoder convs.
    pub ref_channels: usize,
    /// Dimension of local style rows (and codebook entries).
    pub local_dim: usize,
    pub codebook_size: usize,
    /// Mel frames pooled per local style row.
    pub downsample: usize,
    /// Attention key dimension for local-style alignment.
    pub align_dim: usize,
}

impl Default for StyleConfig {
    fn default() -> Self {
        StyleConfig {
            gst_tokens: 8,
            gst_heads: 4,
            global_dim: 64,
            ref_channels: 32,
            local_dim: 16,
            codebook_size: 16,
            downsample: 4,
            align_dim: 16,
        }
    }
}

/// Commitment weight for the VQ bottleneck.
pub const VQ_COMMITMENT: f64 = 0.25;

/// Utterance-level style vector A_g.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalStyle<F> {
    pub vector: Tensor<F>,
}

/// Frame-level quantized style rows A_l (pre- or post-alignment).
#[derive(Clone, Debug, PartialEq)]
pub struct LocalStyle<F> {
    pub frames: Tensor<F>,
    pub codebook_indices: Vec<usize>,
}

/// Nearest codebook entry by squared Euclidean distance; ties take the
/// lowest index.
pub fn vq_quantize<F: Scalar>(z: &[F], codebook: &Tensor<F>) -> Result<(Vec<F>, usize)> {
    if codebook.rows() == 0 {
        return Err(Error::Validation("empty codebook".into()));
    }
    if z.len() != codebook.cols() {
        return Err(Error::Shape(format!(
            "vector of dim {} against codebook of dim {}",
            z.len(),
            codebook.cols()
        )));
    }
    let mut best = 0usize;
    let mut best_d = F::infinity();
    for c in 0..codebook.rows() {
        let d: F = codebook
            .row(c)
            .iter()
            .zip(z)
            .map(|(&e, &x)| (e - x) * (e - x))
            .sum();
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    Ok((codebook.row(best).to_vec(), best))
}

/// Captured quantization decision for the differentiable surrogate used in
/// gradient checks.
#[derive(Clone, Debug)]
pub struct FrozenVq<F> {
    pub indices: Vec<usize>,
    pub offsets: Tensor<F>,
    pub z_value: Tensor<F>,
    pub e_value: Tensor<F>,
}

pub enum VqMode<'a, F> {
    /// Recompute nearest-neighbor assignments (training and inference).
    Hard,
    /// Reuse a captured assignment and offsets (gradient checking).
    Frozen(&'a FrozenVq<F>),
}

/// Outcome of running the local style encoder on a tape.
pub struct LocalStyleForward<F> {
    pub quantized: Var,
    pub indices: Vec<usize>,
    /// Codebook + commitment losses (already weighted).
    pub vq_loss: Var,
    pub frozen: FrozenVq<F>,
}

pub struct StyleModel {
    pub cfg: StyleConfig,
    ref_conv1: Conv1d,
    ref_conv2: Conv1d,
    ref_proj: Linear,
    tokens: ParamId,
    gst_wq: Linear,
    gst_wk: Linear,
    loc_l1: Linear,
    loc_l2: Linear,
    codebook: ParamId,
    al_wq: Linear,
    al_wk: Linear,
}

impl StyleModel {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
        cfg: StyleConfig,
        n_mels: usize,
        content_dim: usize,
    ) -> Self {
        let c = cfg.ref_channels;
        let kd = cfg.gst_heads * cfg.align_dim;
        StyleModel {
            ref_conv1: Conv1d::new(ps, rng, "style.ref_conv1", n_mels, c, 3, 2, 1),
            ref_conv2: Conv1d::new(ps, rng, "style.ref_conv2", c, c, 3, 2, 1),
            ref_proj: Linear::new(ps, rng, "style.ref_proj", c, cfg.global_dim),
            tokens: ps.alloc(
                "style.tokens",
                crate::rng::uniform_tensor(rng, cfg.gst_tokens, cfg.global_dim, -0.5, 0.5),
            ),
            gst_wq: Linear::new(ps, rng, "style.gst_wq", cfg.global_dim, kd),
            gst_wk: Linear::new(ps, rng, "style.gst_wk", cfg.global_dim, kd),
            loc_l1: Linear::new(ps, rng, "style.loc_l1", n_mels, 2 * cfg.local_dim),
            loc_l2: Linear::new(ps, rng, "style.loc_l2", 2 * cfg.local_dim, cfg.local_dim),
            codebook: ps.alloc(
                "style.codebook",
                crate::rng::uniform_tensor(rng, cfg.codebook_size, cfg.local_dim, -0.8, 0.8),
            ),
            al_wq: Linear::new(ps, rng, "style.al_wq", content_dim, cfg.align_dim),
            al_wk: Linear::new(ps, rng, "style.al_wk", cfg.local_dim, cfg.align_dim),
            cfg,
        }
    }

    pub fn codebook_param(&self) -> ParamId {
        self.codebook
    }

    // -- tape-level forwards --

    /// A_g: attention-weighted combination of the learned style tokens, with
    /// weights from a reference-encoder summary (averaged over heads, so the
    /// combination stays convex).
    pub fn global_style_t<F: Scalar>(&self, tape: &mut Tape<F>, vars: &[Var], mel: Var) -> Var {
        let h = self.ref_conv1.fwd(tape, vars, mel);
        let h = tape.gelu(h);
        let h = self.ref_conv2.fwd(tape, vars, h);
        let h = tape.gelu(h);
        let summary = tape.mean_rows(h);
        let query = self.ref_proj.fwd(tape, vars, summary);
        let query = tape.tanh(query);

        let q = self.gst_wq.fwd(tape, vars, query); // 1 × heads·kd
        let k = self.gst_wk.fwd(tape, vars, vars[self.tokens.index()]); // tokens × heads·kd
        let kd = self.cfg.align_dim;
        let scale: F = fl(1.0 / (kd as f64).sqrt());
        let mut head_weights = Vec::with_capacity(self.cfg.gst_heads);
        for h_i in 0..self.cfg.gst_heads {
            let qh = tape.slice_cols(q, h_i * kd, kd);
            let kh = tape.slice_cols(k, h_i * kd, kd);
            let logits = tape.matmul_nt(qh, kh); // 1 × tokens
            let logits = tape.scale(logits, scale);
            head_weights.push(tape.row_softmax(logits));
        }
        let stacked = tape.concat_rows(&head_weights); // heads × tokens
        let weights = tape.mean_rows(stacked); // 1 × tokens, sums to 1
        tape.matmul(weights, vars[self.tokens.index()]) // 1 × G
    }

    /// Local style rows: chunk-mean downsampling, a small MLP, then VQ.
    pub fn local_style_t<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        mel: Var,
        mode: VqMode<'_, F>,
    ) -> LocalStyleForward<F> {
        let pooled = tape.chunk_mean_rows(mel, self.cfg.downsample);
        let z = self.loc_l1.fwd(tape, vars, pooled);
        let z = tape.tanh(z);
        let z = self.loc_l2.fwd(tape, vars, z);

        let z_value = tape.value(z).clone();
        let codebook_value = tape.value(vars[self.codebook.index()]).clone();
        let (indices, e_value) = match &mode {
            VqMode::Hard => {
                let mut indices = Vec::with_capacity(z_value.rows());
                let mut e_value = Tensor::zeros(z_value.rows(), z_value.cols());
                for r in 0..z_value.rows() {
                    let (q, idx) =
                        vq_quantize(z_value.row(r), &codebook_value).expect("codebook dims");
                    e_value.row_mut(r).copy_from_slice(&q);
                    indices.push(idx);
                }
                (indices, e_value)
            }
            VqMode::Frozen(f) => (f.indices.clone(), f.e_value.clone()),
        };
        let mut offsets = e_value.clone();
        offsets.add_assign_scaled(&z_value, -F::one());

        // straight-through: the value jumps to the codebook entry (exactly,
        // in Hard mode) while the gradient passes to z unchanged; Frozen mode
        // keeps the value differentiable for finite-difference checks
        let quantized = match &mode {
            VqMode::Hard => tape.straight_through(z, &e_value),
            VqMode::Frozen(f) => {
                let offsets_const = tape.constant(f.offsets.clone());
                tape.add(z, offsets_const)
            }
        };

        // codebook pulled toward (frozen) encoder outputs; encoder committed
        // toward the chosen entries
        let e_sel = tape.gather_rows(vars[self.codebook.index()], &indices);
        let z_target = match &mode {
            VqMode::Hard => tape.value(z).clone(),
            VqMode::Frozen(f) => f.z_value.clone(),
        };
        let codebook_loss = tape.mse_const(e_sel, &z_target);
        let commitment = tape.mse_const(z, &e_value);
        let vq_loss = tape.weighted_sum(&[(codebook_loss, F::one()), (commitment, fl(VQ_COMMITMENT))]);

        LocalStyleForward {
            quantized,
            indices: indices.clone(),
            vq_loss,
            frozen: FrozenVq {
                indices,
                offsets,
                z_value,
                e_value,
            },
        }
    }

    /// Aligns style rows to the content sequence: out_i = Σ_f attn[i,f]·style_f
    /// with softmax rows, so outputs stay in the convex hull of style rows.
    pub fn align_local_style_t<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        style_rows: Var,
        content: Var,
    ) -> Var {
        let q = self.al_wq.fwd(tape, vars, content);
        let k = self.al_wk.fwd(tape, vars, style_rows);
        let scale: F = fl(1.0 / (self.cfg.align_dim as f64).sqrt());
        let logits = tape.matmul_nt(q, k);
        let logits = tape.scale(logits, scale);
        let attn = tape.row_softmax(logits);
        tape.matmul(attn, style_rows)
    }

    // -- plain-value surface --

    pub fn global_style<F: Scalar>(
        &self,
        params: &ParamSet<F>,
        mel: &MelSpectrogram<F>,
    ) -> Result<GlobalStyle<F>> {
        mel.validate()?;
        let mut tape = Tape::inference();
        let vars = bind_params(&mut tape, params);
        let mv = tape.constant(mel.frames.clone());
        let ag = self.global_style_t(&mut tape, &vars, mv);
        Ok(GlobalStyle {
            vector: tape.value(ag).clone(),
        })
    }

    pub fn local_style_encode<F: Scalar>(
        &self,
        params: &ParamSet<F>,
        mel: &MelSpectrogram<F>,
    ) -> Result<LocalStyle<F>> {
        mel.validate()?;
        let mut tape = Tape::inference();
        let vars = bind_params(&mut tape, params);
        let mv = tape.constant(mel.frames.clone());
        let fwd = self.local_style_t(&mut tape, &vars, mv, VqMode::Hard);
        Ok(LocalStyle {
            frames: tape.value(fwd.quantized).clone(),
            codebook_indices: fwd.indices,
        })
    }

    pub fn align_local_style<F: Scalar>(
        &self,
        params: &ParamSet<F>,
        style: &LocalStyle<F>,
        content: &EncodedSequence<F>,
    ) -> Result<LocalStyle<F>> {
        if style.frames.rows() == 0 || content.len() == 0 {
            return Err(Error::Validation("empty style or content sequence".into()));
        }
        let mut tape = Tape::inference();
        let vars = bind_params(&mut tape, params);
        let sv = tape.constant(style.frames.clone());
        let cv = tape.constant(content.hidden.clone());
        let out = self.align_local_style_t(&mut tape, &vars, sv, cv);
        Ok(LocalStyle {
            frames: tape.value(out).clone(),
            codebook_indices: style.codebook_indices.clone(),
        })
    }
}

/// Running per-speaker style statistics cached at training time, used when
/// synthesis has no reference mel.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerStyleStats<F> {
    pub ag_mean: Tensor<F>,
    pub index_histogram: Vec<F>,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StyleCache<F> {
    pub per_speaker: BTreeMap<String, SpeakerStyleStats<F>>,
}

impl<F: Scalar> StyleCache<F> {
    pub fn new() -> Self {
        StyleCache {
            per_speaker: BTreeMap::new(),
        }
    }

    pub fn observe(&mut self, speaker: &str, ag: &GlobalStyle<F>, indices: &[usize], codebook_size: usize) {
        let stats = self
            .per_speaker
            .entry(speaker.to_string())
            .or_insert_with(|| SpeakerStyleStats {
                ag_mean: Tensor::zeros(1, ag.vector.cols()),
                index_histogram: vec![F::zero(); codebook_size],
                count: 0,
            });
        stats.count += 1;
        let k: F = fu::<F>(stats.count).recip();
        // running mean
        for (m, &v) in stats.ag_mean.data_mut().iter_mut().zip(ag.vector.data()) {
            *m = *m + (v - *m) * k;
        }
        for &i in indices {
            stats.index_histogram[i] += F::one();
        }
    }

    /// Fallback A_g for a speaker.
    pub fn global_for(&self, speaker: &str) -> Option<GlobalStyle<F>> {
        self.per_speaker.get(speaker).map(|s| GlobalStyle {
            vector: s.ag_mean.clone(),
        })
    }

    /// Fallback A_l: one row, the histogram-weighted mean of codebook
    /// entries (a convex combination, so still a valid style row).
    pub fn local_for(&self, speaker: &str, codebook: &Tensor<F>) -> Option<LocalStyle<F>> {
        let stats = self.per_speaker.get(speaker)?;
        let total: F = stats.index_histogram.iter().copied().sum();
        if total <= F::zero() {
            return None;
        }
        let mut row = Tensor::zeros(1, codebook.cols());
        for (c, &w) in stats.index_histogram.iter().enumerate() {
            if w > F::zero() {
                for (o, &e) in row.row_mut(0).iter_mut().zip(codebook.row(c)) {
                    *o += w / total * e;
                }
            }
        }
        let argmax = stats
            .index_histogram
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i)
            .unwrap_or(0);
        Some(LocalStyle {
            frames: row,
            codebook_indices: vec![argmax],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rhythm::RowTag;

    fn tiny_style(seed: u64, gst_tokens: usize) -> (ParamSet<f64>, StyleModel) {
        let mut ps = ParamSet::new();
        let mut rng = crate::rng::seeded(seed);
        let cfg = StyleConfig {
            gst_tokens,
            gst_heads: 2,
            global_dim: 8,
            ref_channels: 6,
            local_dim: 4,
            codebook_size: 5,
            downsample: 4,
            align_dim: 4,
        };
        let model = StyleModel::new(&mut ps, &mut rng, cfg, 10, 12);
        (ps, model)
    }

    fn test_mel(seed: u64, t: usize) -> MelSpectrogram<f64> {
        let mut rng = crate::rng::seeded(seed);
        let frames = crate::rng::uniform_tensor(&mut rng, t, 10, -3.0, 2.0);
        MelSpectrogram::new(frames, 0.01).unwrap()
    }

    #[test]
    fn global_style_has_fixed_size() {
        let (ps, model) = tiny_style(1, 4);
        let g = model.global_style(&ps, &test_mel(2, 17)).unwrap();
        assert_eq!(g.vector.shape(), (1, 8));
        let g2 = model.global_style(&ps, &test_mel(3, 33)).unwrap();
        assert_eq!(g2.vector.shape(), (1, 8));
    }

    #[test]
    fn single_token_bank_returns_that_token() {
        let (ps, model) = tiny_style(5, 1);
        let token = ps.tensor(model.tokens).clone();
        for seed in [7, 8, 9] {
            let g = model.global_style(&ps, &test_mel(seed, 21)).unwrap();
            for (a, b) in g.vector.data().iter().zip(token.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vq_quantize_matches_brute_force_on_random_codebooks() {
        use rand::Rng;
        let mut rng = crate::rng::seeded(17);
        for _ in 0..200 {
            let c = rng.random_range(1..=16usize);
            let d = rng.random_range(1..=8usize);
            let cb: Tensor<f64> = crate::rng::uniform_tensor(&mut rng, c, d, -1.0, 1.0);
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (q, idx) = vq_quantize(&z, &cb).unwrap();
            // brute force with explicit ordering
            let dist = |row: &[f64]| -> f64 {
                row.iter().zip(&z).map(|(&e, &x)| (e - x) * (e - x)).sum()
            };
            let mut best = 0;
            for c_i in 0..c {
                if dist(cb.row(c_i)) < dist(cb.row(best)) {
                    best = c_i;
                }
            }
            assert_eq!(idx, best);
            assert_eq!(q, cb.row(best).to_vec());
        }
    }

    #[test]
    fn vq_identity_and_tie_break() {
        let cb = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        // exact entry
        let (q, idx) = vq_quantize(&[1.0, 1.0], &cb).unwrap();
        assert_eq!(idx, 1);
        assert_eq!(q, vec![1.0, 1.0]);
        // nearest
        let (_, idx) = vq_quantize(&[0.2, 0.1], &cb).unwrap();
        assert_eq!(idx, 0);
        // equidistant → lowest index
        let (_, idx) = vq_quantize(&[0.5, 0.5], &cb).unwrap();
        assert_eq!(idx, 0);
    }

    #[test]
    fn local_style_shape_and_idempotence() {
        let (ps, model) = tiny_style(21, 4);
        for t in [16usize, 17, 19, 3] {
            let mel = test_mel(t as u64, t);
            let ls = model.local_style_encode(&ps, &mel).unwrap();
            assert_eq!(ls.frames.rows(), t.div_ceil(4), "⌈T/4⌉ style rows");
            let cb = ps.tensor(model.codebook);
            for r in 0..ls.frames.rows() {
                let (q, idx) = vq_quantize(ls.frames.row(r), cb).unwrap();
                assert_eq!(idx, ls.codebook_indices[r], "re-quantizing is stable");
                assert_eq!(q, ls.frames.row(r).to_vec());
                assert_eq!(cb.row(idx), ls.frames.row(r), "rows are codebook entries");
            }
        }
    }

    #[test]
    fn alignment_outputs_stay_in_convex_hull() {
        use rand::Rng;
        let (ps, model) = tiny_style(33, 4);
        let mut rng = crate::rng::seeded(77);
        for _ in 0..50 {
            let f = rng.random_range(1..=6usize);
            let l = rng.random_range(1..=7usize);
            let style = LocalStyle {
                frames: crate::rng::uniform_tensor(&mut rng, f, 4, -1.0, 1.0),
                codebook_indices: vec![0; f],
            };
            let content = EncodedSequence {
                hidden: crate::rng::uniform_tensor(&mut rng, l, 12, -1.0, 1.0),
                tags: (0..l).map(RowTag::Phoneme).collect(),
            };
            let out = model.align_local_style(&ps, &style, &content).unwrap();
            assert_eq!(out.frames.rows(), l);
            for c in 0..4 {
                let col: Vec<f64> = (0..f).map(|r| style.frames.at(r, c)).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min) - 1e-9;
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-9;
                for r in 0..l {
                    let v = out.frames.at(r, c);
                    assert!(v >= lo && v <= hi, "coordinate outside hull");
                }
            }
        }
    }

    #[test]
    fn single_style_frame_broadcasts() {
        let (ps, model) = tiny_style(41, 4);
        let style = LocalStyle {
            frames: Tensor::from_rows(&[vec![0.4, -0.2, 0.9, 0.1]]).unwrap(),
            codebook_indices: vec![2],
        };
        let content = EncodedSequence {
            hidden: crate::rng::uniform_tensor(&mut crate::rng::seeded(5), 3, 12, -1.0, 1.0),
            tags: (0..3).map(RowTag::Phoneme).collect(),
        };
        let out = model.align_local_style(&ps, &style, &content).unwrap();
        for r in 0..3 {
            assert_eq!(out.frames.row(r), style.frames.row(0));
        }
    }

    #[test]
    fn distinct_speaker_offsets_give_distinct_global_styles() {
        // two mels differing by a constant spectral offset
        let (ps, model) = tiny_style(51, 4);
        let base = test_mel(60, 24);
        let mut shifted = base.clone();
        for (r, v) in shifted.frames.data_mut().iter_mut().enumerate() {
            *v += 0.5 * ((r % 10) as f64 / 10.0 * std::f64::consts::PI).sin();
        }
        let a = model.global_style(&ps, &base).unwrap();
        let b = model.global_style(&ps, &shifted).unwrap();
        assert_ne!(a.vector, b.vector);
    }

    #[test]
    fn cache_fallback_is_deterministic_and_convex() {
        let (ps, model) = tiny_style(61, 4);
        let mut cache: StyleCache<f64> = StyleCache::new();
        let mel = test_mel(70, 20);
        let g = model.global_style(&ps, &mel).unwrap();
        let l = model.local_style_encode(&ps, &mel).unwrap();
        cache.observe("F01", &g, &l.codebook_indices, 5);
        cache.observe("F01", &g, &l.codebook_indices, 5);
        let back = cache.global_for("F01").unwrap();
        for (a, b) in back.vector.data().iter().zip(g.vector.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let cb = ps.tensor(model.codebook);
        let local = cache.local_for("F01", cb).unwrap();
        assert_eq!(local.frames.shape(), (1, 4));
        assert!(cache.global_for("XX").is_none());
    }
}
