//! Multi-stage rhythm predictor: phoneme encoder, pause classifier with
//! cross-entropy loss, pause-embedding insertion, pause-augmented encoder,
//! and log-domain duration predictor with MSE loss.
//!
//! The pipeline runs pause-first: the raw phoneme sequence is encoded without
//! pause information, pause classes are predicted per position, embeddings
//! for the predicted (or teacher) classes are inserted after their phonemes,
//! and the augmented sequence is re-encoded before duration prediction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    sinusoidal_positions, Embedding, EncoderConfig, Linear, ParamSet, RowMlp, TransformerEncoder,
};
use crate::scalar::{fl, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Probability floor inside the pause cross-entropy.
pub const CE_EPS: f64 = 1e-9;

/// Provenance of one row in an encoded sequence.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum RowTag {
    /// Row for the phoneme at this pre-insertion position.
    Phoneme(usize),
    /// Inserted pause row of the given class (> 0).
    Pause { class: usize },
}

/// Hidden rows plus per-row provenance tags.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence<F> {
    pub hidden: Tensor<F>,
    pub tags: Vec<RowTag>,
}

impl<F: Scalar> EncodedSequence<F> {
    pub fn len(&self) -> usize {
        self.hidden.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.rows() == 0
    }

    /// Indices of phoneme rows, in order.
    pub fn phoneme_rows(&self) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter_map(|(i, t)| matches!(t, RowTag::Phoneme(_)).then_some(i))
            .collect()
    }

    /// Drops inserted pause rows, recovering the pre-insertion sequence.
    pub fn strip_pause_rows(&self) -> EncodedSequence<F> {
        let keep = self.phoneme_rows();
        let mut hidden = Tensor::zeros(keep.len(), self.hidden.cols());
        for (j, &i) in keep.iter().enumerate() {
            hidden.row_mut(j).copy_from_slice(self.hidden.row(i));
        }
        EncodedSequence {
            hidden,
            tags: keep.iter().map(|&i| self.tags[i]).collect(),
        }
    }
}

/// Pause class distributions, one row per pre-insertion position.
#[derive(Clone, Debug, PartialEq)]
pub struct PausePrediction<F> {
    pub probs: Tensor<F>,
}

impl<F: Scalar> PausePrediction<F> {
    pub fn validate(&self) -> Result<()> {
        for r in 0..self.probs.rows() {
            let row = self.probs.row(r);
            if row.iter().any(|&p| p < F::zero() || !p.is_finite()) {
                return Err(Error::Validation("pause probabilities out of range".into()));
            }
            let sum: F = row.iter().copied().sum();
            if (sum - F::one()).abs() > fl(1e-6) {
                return Err(Error::Validation(format!(
                    "pause probability row {r} sums to {sum}"
                )));
            }
        }
        Ok(())
    }

    /// Row-argmax classes; ties resolve to the lowest class index.
    pub fn argmax_classes(&self) -> Vec<usize> {
        (0..self.probs.rows())
            .map(|r| {
                let row = self.probs.row(r);
                let mut best = 0;
                for (k, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// Log-domain duration predictions, one per (post-insertion) row.
#[derive(Clone, Debug, PartialEq)]
pub struct DurationPrediction<F> {
    pub log_durations: Vec<F>,
}

impl<F: Scalar> DurationPrediction<F> {
    /// exp → round → clamp(≥ 1) conversion to frame counts.
    pub fn to_frame_counts(&self) -> Vec<usize> {
        self.log_durations
            .iter()
            .map(|&ld| {
                let frames = ld.exp().round().to_f64().unwrap_or(1.0);
                (frames.max(1.0)) as usize
            })
            .collect()
    }
}

/// Where inserted pause classes come from.
pub enum PauseSource<'a, F> {
    /// Ground-truth classes (training).
    TeacherForced(&'a [usize]),
    /// Row-argmax of a prediction (synthesis).
    Predicted(&'a PausePrediction<F>),
}

impl<F: Scalar> PauseSource<'_, F> {
    pub fn classes(&self) -> Vec<usize> {
        match self {
            PauseSource::TeacherForced(c) => c.to_vec(),
            PauseSource::Predicted(p) => p.argmax_classes(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct RhythmConfig {
    pub vocab_size: usize,
    pub pause_classes: usize,
    pub phoneme_encoder: EncoderConfig,
    pub augmented_encoder: EncoderConfig,
    pub predictor_hidden: usize,
}

impl Default for RhythmConfig {
    fn default() -> Self {
        RhythmConfig {
            vocab_size: 16,
            pause_classes: 4,
            // smaller phoneme encoder, larger pause-augmented encoder
            phoneme_encoder: EncoderConfig {
                dim: 64,
                layers: 2,
                heads: 4,
                ffn: 128,
            },
            augmented_encoder: EncoderConfig {
                dim: 128,
                layers: 4,
                heads: 4,
                ffn: 256,
            },
            predictor_hidden: 64,
        }
    }
}

pub struct RhythmModel {
    pub cfg: RhythmConfig,
    embed: Embedding,
    phoneme_enc: TransformerEncoder,
    pause_pred: RowMlp,
    pause_emb: crate::nn::ParamId,
    in_proj: Linear,
    aug_enc: TransformerEncoder,
    dur_pred: RowMlp,
}

impl RhythmModel {
    pub fn new<F: Scalar>(ps: &mut ParamSet<F>, rng: &mut impl Rng, cfg: RhythmConfig) -> Self {
        let d_ph = cfg.phoneme_encoder.dim;
        let d_aug = cfg.augmented_encoder.dim;
        let embed = Embedding::new(ps, rng, "rhythm.embed", cfg.vocab_size, d_ph);
        let phoneme_enc =
            TransformerEncoder::new(ps, rng, "rhythm.phoneme_enc", cfg.phoneme_encoder.clone());
        // pause and duration predictors share the same two-layer shape
        let pause_pred = RowMlp::new(
            ps,
            rng,
            "rhythm.pause_pred",
            d_ph,
            cfg.predictor_hidden,
            cfg.pause_classes,
            true,
        );
        let pause_emb = ps.alloc(
            "rhythm.pause_emb",
            crate::rng::uniform_tensor(rng, cfg.pause_classes, d_ph, -0.5, 0.5),
        );
        let in_proj = Linear::new(ps, rng, "rhythm.in_proj", d_ph, d_aug);
        let aug_enc =
            TransformerEncoder::new(ps, rng, "rhythm.aug_enc", cfg.augmented_encoder.clone());
        let dur_pred = RowMlp::new(
            ps,
            rng,
            "rhythm.dur_pred",
            d_aug,
            cfg.predictor_hidden,
            1,
            true,
        );
        RhythmModel {
            cfg,
            embed,
            phoneme_enc,
            pause_pred,
            pause_emb,
            in_proj,
            aug_enc,
            dur_pred,
        }
    }

    pub fn pause_embedding_table(&self) -> crate::nn::ParamId {
        self.pause_emb
    }

    // -- tape-level forwards (shared by training and synthesis) --

    pub fn encode_phonemes_t<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        tokens: &[usize],
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Validation("empty phoneme sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::UnknownToken(bad));
        }
        let emb = self.embed.fwd(tape, vars, tokens);
        let pos = tape.constant(sinusoidal_positions(tokens.len(), self.cfg.phoneme_encoder.dim));
        let x = tape.add(emb, pos);
        Ok(self.phoneme_enc.fwd(tape, vars, x))
    }

    pub fn predict_pauses_t<F: Scalar>(&self, tape: &mut Tape<F>, vars: &[Var], e: Var) -> Var {
        let logits = self.pause_pred.fwd(tape, vars, e);
        tape.row_softmax(logits)
    }

    /// Inserts pause-embedding rows after positions with class > 0.
    pub fn insert_pauses_t<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        e: Var,
        classes: &[usize],
    ) -> Var {
        tape.interleave_pause_rows(e, vars[self.pause_emb.index()], classes)
    }

    pub fn encode_augmented_t<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        e_aug: Var,
    ) -> Var {
        let x = self.in_proj.fwd(tape, vars, e_aug);
        let len = tape.value(x).rows();
        let pos = tape.constant(sinusoidal_positions(len, self.cfg.augmented_encoder.dim));
        let x = tape.add(x, pos);
        self.aug_enc.fwd(tape, vars, x)
    }

    pub fn predict_durations_t<F: Scalar>(&self, tape: &mut Tape<F>, vars: &[Var], h: Var) -> Var {
        self.dur_pred.fwd(tape, vars, h)
    }

    // -- plain-value surface --

    pub fn encode_phonemes<F: Scalar>(
        &self,
        params: &ParamSet<F>,
        tokens: &[usize],
    ) -> Result<EncodedSequence<F>> {
        let mut tape = Tape::inference();
        let vars = crate::nn::bind_params(&mut tape, params);
        let e = self.encode_phonemes_t(&mut tape, &vars, tokens)?;
        Ok(EncodedSequence {
            hidden: tape.value(e).clone(),
            tags: (0..tokens.len()).map(RowTag::Phoneme).collect(),
        })
    }

    pub fn predict_pauses<F: Scalar>(
        &self,
        params: &ParamSet<F>,
        e: &EncodedSequence<F>,
    ) -> PausePrediction<F> {
        let mut tape = Tape::inference();
        let vars = crate::nn::bind_params(&mut tape, params);
        let ev = tape.constant(e.hidden.clone());
        let probs = self.predict_pauses_t(&mut tape, &vars, ev);
        PausePrediction {
            probs: tape.value(probs).clone(),
        }
    }

    pub fn insert_pause_embeddings<F: Scalar>(
        &self,
        params: &ParamSet<F>,
        e: &EncodedSequence<F>,
        source: &PauseSource<'_, F>,
    ) -> Result<EncodedSequence<F>> {
        let classes = source.classes();
        insert_pause_embeddings(e, &classes, params.tensor(self.pause_emb))
    }

    pub fn encode_augmented<F: Scalar>(
        &self,
        params: &ParamSet<F>,
        e_aug: &EncodedSequence<F>,
    ) -> EncodedSequence<F> {
        let mut tape = Tape::inference();
        let vars = crate::nn::bind_params(&mut tape, params);
        let ev = tape.constant(e_aug.hidden.clone());
        let h = self.encode_augmented_t(&mut tape, &vars, ev);
        EncodedSequence {
            hidden: tape.value(h).clone(),
            tags: e_aug.tags.clone(),
        }
    }

    pub fn predict_durations<F: Scalar>(
        &self,
        params: &ParamSet<F>,
        h: &EncodedSequence<F>,
    ) -> DurationPrediction<F> {
        let mut tape = Tape::inference();
        let vars = crate::nn::bind_params(&mut tape, params);
        let hv = tape.constant(h.hidden.clone());
        let d = self.predict_durations_t(&mut tape, &vars, hv);
        DurationPrediction {
            log_durations: tape.value(d).data().to_vec(),
        }
    }
}

/// Pure pause-row insertion: after each position i with `classes[i] > 0`,
/// inserts row `classes[i]` of the embedding table. Original rows keep their
/// order; provenance tags record the insertions.
pub fn insert_pause_embeddings<F: Scalar>(
    e: &EncodedSequence<F>,
    classes: &[usize],
    table: &Tensor<F>,
) -> Result<EncodedSequence<F>> {
    if classes.len() != e.len() {
        return Err(Error::Shape(format!(
            "{} pause classes for {} rows",
            classes.len(),
            e.len()
        )));
    }
    if table.cols() != e.hidden.cols() {
        return Err(Error::Shape("pause embedding width mismatch".into()));
    }
    if let Some(&bad) = classes.iter().find(|&&c| c >= table.rows()) {
        return Err(Error::Validation(format!("pause class {bad} out of range")));
    }
    let extra = classes.iter().filter(|&&c| c > 0).count();
    let mut hidden = Tensor::zeros(e.len() + extra, e.hidden.cols());
    let mut tags = Vec::with_capacity(e.len() + extra);
    let mut r = 0;
    for (i, &cls) in classes.iter().enumerate() {
        hidden.row_mut(r).copy_from_slice(e.hidden.row(i));
        tags.push(e.tags[i]);
        r += 1;
        if cls > 0 {
            hidden.row_mut(r).copy_from_slice(table.row(cls));
            tags.push(RowTag::Pause { class: cls });
            r += 1;
        }
    }
    Ok(EncodedSequence { hidden, tags })
}

/// Cross-entropy −(1/N) Σᵢ Σₖ 1(sᵢ=k) log ŝᵢₖ over probability rows, with
/// probabilities clamped at `CE_EPS` so degenerate predictions stay finite.
pub fn pause_cross_entropy<F: Scalar>(probs: &Tensor<F>, labels: &[usize]) -> Result<F> {
    if probs.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows for {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    let eps: F = fl(CE_EPS);
    let mut sum = F::zero();
    for (i, &l) in labels.iter().enumerate() {
        if l >= probs.cols() {
            return Err(Error::Validation(format!("label {l} out of range")));
        }
        sum -= probs.at(i, l).max(eps).ln();
    }
    Ok(sum / crate::scalar::fu(labels.len()))
}

/// Mean squared error on log-scale durations: (1/N′) Σ (log dᵢ − d̂ᵢ)² where
/// `pred_log` are predicted log-durations and `target_frames` reference frame
/// counts.
pub fn duration_mse<F: Scalar>(pred_log: &[F], target_frames: &[usize]) -> Result<F> {
    if pred_log.len() != target_frames.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            pred_log.len(),
            target_frames.len()
        )));
    }
    if pred_log.is_empty() {
        return Err(Error::Validation("empty duration sequence".into()));
    }
    let mut sum = F::zero();
    for (&p, &t) in pred_log.iter().zip(target_frames) {
        if t == 0 {
            return Err(Error::Domain("duration target must be ≥ 1 frame".into()));
        }
        let d = crate::scalar::fu::<F>(t).ln() - p;
        sum += d * d;
    }
    Ok(sum / crate::scalar::fu(pred_log.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::bind_params;

    fn tiny_model(seed: u64) -> (ParamSet<f64>, RhythmModel) {
        let mut ps = ParamSet::new();
        let mut rng = crate::rng::seeded(seed);
        let cfg = RhythmConfig {
            vocab_size: 8,
            pause_classes: 4,
            phoneme_encoder: EncoderConfig {
                dim: 16,
                layers: 1,
                heads: 2,
                ffn: 32,
            },
            augmented_encoder: EncoderConfig {
                dim: 24,
                layers: 1,
                heads: 2,
                ffn: 48,
            },
            predictor_hidden: 12,
        };
        let model = RhythmModel::new(&mut ps, &mut rng, cfg);
        (ps, model)
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let (ps, model) = tiny_model(3);
        let e = model.encode_phonemes(&ps, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(e.hidden.shape(), (5, 16));
        let e2 = model.encode_phonemes(&ps, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(e, e2);
    }

    #[test]
    fn encode_rejects_unknown_token() {
        let (ps, model) = tiny_model(3);
        assert!(matches!(
            model.encode_phonemes(&ps, &[1, 99]),
            Err(Error::UnknownToken(99))
        ));
    }

    #[test]
    fn permuting_distinct_tokens_changes_encoding() {
        let (ps, model) = tiny_model(5);
        let a = model.encode_phonemes(&ps, &[1, 2, 3]).unwrap();
        let b = model.encode_phonemes(&ps, &[2, 1, 3]).unwrap();
        assert_ne!(a.hidden, b.hidden);
    }

    #[test]
    fn pause_rows_are_normalized() {
        let (ps, model) = tiny_model(7);
        let e = model.encode_phonemes(&ps, &[0, 1, 2]).unwrap();
        let p = model.predict_pauses(&ps, &e);
        assert_eq!(p.probs.shape(), (3, 4));
        p.validate().unwrap();
    }

    #[test]
    fn zero_initialized_head_gives_uniform_rows() {
        let (ps, model) = tiny_model(11);
        let e = model.encode_phonemes(&ps, &[0, 1]).unwrap();
        let p = model.predict_pauses(&ps, &e);
        for r in 0..2 {
            for &v in p.probs.row(r) {
                assert!((v - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn insertion_counts_and_round_trip() {
        let (ps, model) = tiny_model(13);
        let e = model.encode_phonemes(&ps, &[0, 1, 2, 3]).unwrap();
        let aug = model
            .insert_pause_embeddings(&ps, &e, &PauseSource::TeacherForced(&[1, 0, 3, 1]))
            .unwrap();
        assert_eq!(aug.len(), 7);
        assert_eq!(aug.strip_pause_rows(), e);

        let same = model
            .insert_pause_embeddings(&ps, &e, &PauseSource::TeacherForced(&[0, 0, 0, 0]))
            .unwrap();
        assert_eq!(same, e);

        let one = model
            .insert_pause_embeddings(&ps, &e, &PauseSource::TeacherForced(&[0, 2, 0, 0]))
            .unwrap();
        assert_eq!(one.len(), 5);
        assert_eq!(one.tags[2], RowTag::Pause { class: 2 });
    }

    #[test]
    fn insertion_law_on_random_instances() {
        let (ps, model) = tiny_model(17);
        let mut rng = crate::rng::seeded(99);
        use rand::Rng;
        for _ in 0..200 {
            let n = rng.random_range(1..=9usize);
            let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..8)).collect();
            let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let e = model.encode_phonemes(&ps, &tokens).unwrap();
            let aug = model
                .insert_pause_embeddings(&ps, &e, &PauseSource::TeacherForced(&classes))
                .unwrap();
            let inserted = classes.iter().filter(|&&c| c > 0).count();
            assert_eq!(aug.len(), n + inserted, "N' = N + #(class > 0)");
            assert_eq!(aug.strip_pause_rows(), e, "order preservation");
        }
    }

    #[test]
    fn tape_insertion_matches_pure_insertion() {
        let (ps, model) = tiny_model(19);
        let tokens = [0, 1, 2, 3, 4];
        let classes = [0, 2, 0, 1, 3];
        let e = model.encode_phonemes(&ps, &tokens).unwrap();
        let pure = model
            .insert_pause_embeddings(&ps, &e, &PauseSource::TeacherForced(&classes))
            .unwrap();

        let mut tape: Tape<f64> = Tape::inference();
        let vars = bind_params(&mut tape, &ps);
        let ev = model.encode_phonemes_t(&mut tape, &vars, &tokens).unwrap();
        let aug = model.insert_pauses_t(&mut tape, &vars, ev, &classes);
        assert_eq!(tape.value(aug), &pure.hidden);
    }

    #[test]
    fn augmented_encoding_distinguishes_pause_classes() {
        let (ps, model) = tiny_model(23);
        let e = model.encode_phonemes(&ps, &[1, 2]).unwrap();
        let a = model
            .insert_pause_embeddings(&ps, &e, &PauseSource::TeacherForced(&[0, 0]))
            .unwrap();
        let b = model
            .insert_pause_embeddings(&ps, &e, &PauseSource::TeacherForced(&[2, 0]))
            .unwrap();
        let ha = model.encode_augmented(&ps, &a);
        let hb = model.encode_augmented(&ps, &b);
        assert_eq!(ha.hidden.shape(), (2, 24));
        assert_eq!(hb.hidden.shape(), (3, 24));
        // the shared phoneme rows differ because context differs
        assert_ne!(ha.hidden.row(0), hb.hidden.row(0));
        // determinism
        assert_eq!(ha, model.encode_augmented(&ps, &a));
    }

    #[test]
    fn duration_prediction_shape_and_clamp() {
        let (ps, model) = tiny_model(29);
        let e = model.encode_phonemes(&ps, &[0, 1, 2, 3, 4, 5]).unwrap();
        let h = model.encode_augmented(
            &ps,
            &model
                .insert_pause_embeddings(&ps, &e, &PauseSource::TeacherForced(&[0; 6]))
                .unwrap(),
        );
        let d = model.predict_durations(&ps, &h);
        assert_eq!(d.log_durations.len(), 6);
        let frames = d.to_frame_counts();
        assert!(frames.iter().all(|&f| f >= 1));
        assert_eq!(d, model.predict_durations(&ps, &h));
    }

    #[test]
    fn argmax_prefers_lowest_on_tie() {
        let p = PausePrediction {
            probs: Tensor::from_rows(&[vec![0.4, 0.4, 0.2], vec![0.1, 0.2, 0.7]]).unwrap(),
        };
        assert_eq!(p.argmax_classes(), vec![0, 2]);
    }

    #[test]
    fn cross_entropy_matches_hand_values() {
        // perfect one-hot predictions → 0
        let onehot = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(pause_cross_entropy(&onehot, &[0, 1]).unwrap(), 0.0);

        // uniform over K=4 → ln 4
        let uni = Tensor::filled(3, 4, 0.25);
        let l = pause_cross_entropy(&uni, &[0, 3, 2]).unwrap();
        assert!((l - 4.0f64.ln()).abs() < 1e-12);

        // N=2, K=2 worked example: −(ln 0.9 + ln 0.8)/2
        let p = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let l = pause_cross_entropy(&p, &[0, 1]).unwrap();
        let expect = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((l - expect).abs() < 1e-12);
        assert!((expect - 0.164252).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let p = Tensor::from_rows(&[vec![0.0f64, 1.0]]).unwrap();
        let l = pause_cross_entropy(&p, &[0]).unwrap();
        assert!(l.is_finite());
        assert!((l - (-(CE_EPS.ln()))).abs() < 1e-9);
    }

    #[test]
    fn duration_mse_matches_hand_values() {
        // exact match → 0
        let logs: Vec<f64> = vec![2.0f64.ln(), 5.0f64.ln()];
        assert_eq!(duration_mse(&logs, &[2, 5]).unwrap(), 0.0);

        // targets [1,1]: log targets are 0, so mse of [1,−1] is 1
        assert!((duration_mse(&[1.0f64, -1.0], &[1, 1]).unwrap() - 1.0).abs() < 1e-12);

        // targets [2,4,8] with all-ln2 predictions
        let ln2 = 2.0f64.ln();
        let l = duration_mse(&[ln2, ln2, ln2], &[2, 4, 8]).unwrap();
        let expect = (0.0 + ln2 * ln2 + (2.0 * ln2) * (2.0 * ln2)) / 3.0;
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn duration_mse_rejects_zero_target() {
        assert!(matches!(duration_mse(&[0.0], &[0]), Err(Error::Domain(_))));
    }
}
