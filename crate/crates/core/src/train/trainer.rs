//! The joint training loop: L = λ_s·L_s + λ_d·L_d + λ_cp·L_cp + λ_cfm·L_CFM
//! + λ_prior·L_prior (+ VQ terms when the style path is active), teacher-forced
//! pause insertion, CPO warm-up gated on pause accuracy, per-step loss
//! logging, and divergence recovery from the last parameter snapshot.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::corpus::{group_records, Strategy, TrainingGroup, UtteranceRecord};
use crate::cpo::{cpo_loss_t, NormalProvider};
use crate::error::{Error, Result};
use crate::flow::{ot_cfm_pair, FlowConfig, FlowModel};
use crate::nn::{bind_params, Adam, ParamSet};
use crate::rhythm::{RhythmConfig, RhythmModel};
use crate::rng::{normal_tensor, seeded_stream, shuffle, uniform};
use crate::scalar::{fl, Scalar};
use crate::style::{StyleCache, StyleModel, VqMode};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::ckpt::{save_checkpoint, CheckpointMeta, SpeakerMeta};
use super::dataset::{prepare_records, speaker_table, PreparedUtt};
use super::{AblationFlags, ModelConfig, SpeakerEntry, TrainConfig};

/// The three trainable modules behind one parameter set.
pub struct DarsModel {
    pub rhythm: RhythmModel,
    pub style: StyleModel,
    pub flow: FlowModel,
    pub flags: AblationFlags,
}

impl DarsModel {
    /// Builds the full module stack; structural initialization is seeded
    /// separately from training so checkpoints can be reconstructed.
    pub fn build<F: Scalar>(
        cfg: &ModelConfig,
        vocab_size: usize,
        pause_classes: usize,
        n_mels: usize,
        n_speakers: usize,
        flags: AblationFlags,
    ) -> (ParamSet<F>, DarsModel) {
        let mut ps = ParamSet::new();
        let mut rng = crate::rng::seeded(0);
        let rhythm = RhythmModel::new(
            &mut ps,
            &mut rng,
            RhythmConfig {
                vocab_size,
                pause_classes,
                phoneme_encoder: cfg.phoneme_encoder.clone(),
                augmented_encoder: cfg.augmented_encoder.clone(),
                predictor_hidden: cfg.predictor_hidden,
            },
        );
        let style = StyleModel::new(
            &mut ps,
            &mut rng,
            cfg.style.clone(),
            n_mels,
            cfg.augmented_encoder.dim,
        );
        let flow = FlowModel::new(
            &mut ps,
            &mut rng,
            FlowConfig {
                n_mels,
                content_dim: cfg.augmented_encoder.dim,
                global_dim: cfg.style.global_dim,
                local_dim: cfg.style.local_dim,
                speaker_dim: cfg.speaker_dim,
                fusion_hidden: cfg.fusion_hidden,
                decoder: cfg.decoder.clone(),
            },
            n_speakers,
        );
        (
            ps,
            DarsModel {
                rhythm,
                style,
                flow,
                flags,
            },
        )
    }

    /// Randomizes parameters for training (structure init is deterministic).
    pub fn randomize<F: Scalar>(params: &mut ParamSet<F>, seed: u64) {
        let mut rng = seeded_stream(seed, 0x5eed);
        let fresh: Vec<Tensor<F>> = params
            .tensors()
            .iter()
            .map(|t| {
                let bound = (6.0 / (t.rows() + t.cols()) as f64).sqrt();
                crate::rng::uniform_tensor(&mut rng, t.rows(), t.cols(), -bound, bound)
            })
            .collect();
        for (i, t) in fresh.into_iter().enumerate() {
            let id = crate::nn::ParamId::from_index(i);
            // keep zero-initialized heads and unit gains at their structure
            // init: predictors, layer norms
            let name = params.name(id).to_string();
            if name.contains("pause_pred.l2")
                || name.contains("dur_pred.l2")
                || name.ends_with(".gamma")
                || name.ends_with(".beta")
                || name.ends_with(".b")
            {
                continue;
            }
            *params.tensor_mut(id) = t;
        }
    }
}

/// Per-step loss components as logged.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepLosses {
    pub l_s: f64,
    pub l_d: f64,
    pub l_cp: f64,
    pub l_cfm: f64,
    pub l_prior: f64,
    pub l_vq: f64,
    pub total: f64,
}

pub struct GroupTrainOutcome {
    pub group_key: String,
    pub strategy: Strategy,
    pub ckpt_dir: PathBuf,
    pub log_path: PathBuf,
    pub steps_run: usize,
    pub final_losses: StepLosses,
}

/// One optimization step on one utterance; returns the loss components.
/// Shared by the real loop and the gradient/acceptance tests (which call it
/// with a fixed draw).
#[allow(clippy::too_many_arguments)]
pub fn step_losses_t<F: Scalar>(
    tape: &mut Tape<F>,
    vars: &[Var],
    model: &DarsModel,
    cfg: &TrainConfig,
    utt: &PreparedUtt<F>,
    cpo_active: bool,
    t_draw: F,
    noise: &Tensor<F>,
) -> Result<(Var, StepLosses, Option<f64>)> {
    let flags = model.flags;
    let weights = &cfg.losses;
    let mut terms: Vec<(Var, F)> = Vec::new();
    let zero = tape.constant(Tensor::scalar(F::zero()));

    let e = model.rhythm.encode_phonemes_t(tape, vars, &utt.tokens)?;

    let (h_c, row_durations, l_s, l_d, l_cp, pause_accuracy) = if flags.rhythm {
        let probs = model.rhythm.predict_pauses_t(tape, vars, e);
        let l_s = tape.ce_rows(probs, &utt.pause_classes, fl(crate::rhythm::CE_EPS));

        // teacher-forced insertion
        let e_aug = model
            .rhythm
            .insert_pauses_t(tape, vars, e, &utt.pause_classes);
        let h_c = model.rhythm.encode_augmented_t(tape, vars, e_aug);
        let durations = utt.augmented_durations();

        // pause accuracy for the CPO warm-up gate
        let probs_val = tape.value(probs);
        let mut correct = 0usize;
        for (i, &label) in utt.pause_classes.iter().enumerate() {
            let row = probs_val.row(i);
            let mut best = 0;
            for (k, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = k;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        let acc = correct as f64 / utt.pause_classes.len() as f64;

        let logd = model.rhythm.predict_durations_t(tape, vars, h_c);
        let l_d = tape.mse_const(logd, &utt.augmented_log_targets());

        let l_cp = if flags.cpo && cpo_active {
            // phoneme rows within the augmented sequence
            let mut idx = Vec::with_capacity(utt.tokens.len());
            let mut r = 0usize;
            for &cls in &utt.pause_classes {
                idx.push(r);
                r += 1 + usize::from(cls > 0);
            }
            let sel = tape.gather_rows(logd, &idx);
            cpo_loss_t(
                tape,
                probs,
                sel,
                &utt.pause_classes,
                &utt.phoneme_log_durs(),
                &utt.normal_log_d,
                &cfg.cpo,
            )
        } else {
            zero
        };
        (h_c, durations, l_s, l_d, l_cp, Some(acc))
    } else {
        // baseline: no pause stage; durations absorb the following silences
        let h_c = model.rhythm.encode_augmented_t(tape, vars, e);
        let logd = model.rhythm.predict_durations_t(tape, vars, h_c);
        let log_targets = Tensor::column(
            &utt.absorbed_durs
                .iter()
                .map(|&d| fl::<F>(d as f64).ln())
                .collect::<Vec<F>>(),
        );
        let l_d = tape.mse_const(logd, &log_targets);
        (h_c, utt.absorbed_durs.clone(), zero, l_d, zero, None)
    };
    terms.push((l_d, fl(weights.lambda_d)));
    if flags.rhythm {
        terms.push((l_s, fl(weights.lambda_s)));
        terms.push((l_cp, fl(weights.lambda_cp)));
    }

    // style conditioning from the reference mel
    let (a_g, a_l, l_vq) = if flags.style {
        let mel_in = tape.constant(utt.mel.clone());
        let a_g = model.style.global_style_t(tape, vars, mel_in);
        let local = model.style.local_style_t(tape, vars, mel_in, VqMode::Hard);
        let a_l = model
            .style
            .align_local_style_t(tape, vars, local.quantized, h_c);
        terms.push((local.vq_loss, fl(weights.lambda_vq)));
        (Some(a_g), Some(a_l), local.vq_loss)
    } else {
        (None, None, zero)
    };

    let spk = model.flow.speaker_embedding_t(tape, vars, utt.speaker_index);
    let (mu, _) = model
        .flow
        .build_mu_t(tape, vars, h_c, a_g, a_l, spk, &row_durations)?;

    let l_prior = tape.mse_const(mu, &utt.mel);
    terms.push((l_prior, fl(weights.lambda_prior)));

    let (x_t, u_t) = ot_cfm_pair(noise, &utt.mel, t_draw, &cfg.otcfm)?;
    let x_t = tape.constant(x_t);
    let v = model.flow.field_t(tape, vars, x_t, mu, t_draw);
    let l_cfm = tape.mse_const(v, &u_t);
    terms.push((l_cfm, fl(weights.lambda_cfm)));

    let total = tape.weighted_sum(&terms);
    let losses = StepLosses {
        l_s: tape.item(l_s).to_f64().unwrap_or(f64::NAN),
        l_d: tape.item(l_d).to_f64().unwrap_or(f64::NAN),
        l_cp: tape.item(l_cp).to_f64().unwrap_or(f64::NAN),
        l_cfm: tape.item(l_cfm).to_f64().unwrap_or(f64::NAN),
        l_prior: tape.item(l_prior).to_f64().unwrap_or(f64::NAN),
        l_vq: tape.item(l_vq).to_f64().unwrap_or(f64::NAN),
        total: tape.item(total).to_f64().unwrap_or(f64::NAN),
    };
    Ok((total, losses, pause_accuracy))
}

/// Trains one group to a checkpoint directory. Deterministic given
/// `group_seed` and the data order.
pub fn train_group<F: Scalar>(
    cfg: &TrainConfig,
    group: &TrainingGroup,
    data: &[PreparedUtt<F>],
    speakers: &[SpeakerEntry],
    vocab_size: usize,
    n_mels: usize,
    frame_shift_s: f64,
    out_dir: &Path,
    group_seed: u64,
) -> Result<GroupTrainOutcome> {
    cfg.validate()?;
    let train_utts: Vec<&PreparedUtt<F>> = data
        .iter()
        .filter(|u| {
            u.record.split == crate::corpus::Split::Train
                && group.records.iter().any(|r| r.utt_id == u.record.utt_id)
        })
        .collect();
    if train_utts.is_empty() {
        return Err(Error::Validation(format!(
            "group {} has no training utterances",
            group.group_key
        )));
    }

    let (mut params, model) = DarsModel::build::<F>(
        &cfg.model,
        vocab_size,
        cfg.pause.classes,
        n_mels,
        speakers.len(),
        cfg.flags,
    );
    DarsModel::randomize(&mut params, group_seed);
    let mut adam = Adam::new(&params, fl(cfg.lr), Some(fl(cfg.grad_clip)));
    let mut rng = seeded_stream(group_seed, 1);

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("training_log.tsv");
    let mut log = String::from("step\tloss_s\tloss_d\tloss_cp\tloss_cfm\tloss_prior\tloss_vq\ttotal\n");

    let mut order: Vec<usize> = (0..train_utts.len()).collect();
    let mut cursor = order.len(); // force shuffle on first step
    let mut acc_window: VecDeque<f64> = VecDeque::with_capacity(50);
    let mut cpo_active = false;
    let mut snapshot: Vec<Tensor<F>> = params.tensors().to_vec();
    let mut snapshot_step = 0usize;
    let mut last = StepLosses::default();

    let meta = CheckpointMeta {
        version: 1,
        vocab_size,
        n_mels,
        frame_shift_s,
        flags: cfg.flags,
        pause: cfg.pause.clone(),
        cpo: cfg.cpo,
        otcfm: cfg.otcfm,
        model: cfg.model.clone(),
        speakers: speakers
            .iter()
            .enumerate()
            .map(|(index, s)| SpeakerMeta {
                id: s.id.clone(),
                severity: s.severity,
                index,
            })
            .collect(),
        style_cache: Vec::new(),
    };

    for step in 0..cfg.steps {
        if cursor >= order.len() {
            shuffle(&mut rng, &mut order);
            cursor = 0;
        }
        let utt = train_utts[order[cursor]];
        cursor += 1;

        let t_draw: F = uniform(&mut rng, 0.0, 1.0);
        let noise: Tensor<F> = normal_tensor(&mut rng, utt.mel.rows(), utt.mel.cols());

        let mut tape: Tape<F> = Tape::new();
        let vars = bind_params(&mut tape, &params);
        let (total, losses, acc) =
            step_losses_t(&mut tape, &vars, &model, cfg, utt, cpo_active, t_draw, &noise)?;

        if let Some(a) = acc {
            if acc_window.len() == 50 {
                acc_window.pop_front();
            }
            acc_window.push_back(a);
            let mean = acc_window.iter().sum::<f64>() / acc_window.len() as f64;
            cpo_active = cfg.flags.cpo && mean >= cfg.cpo_warmup_accuracy;
        }

        if !losses.total.is_finite() {
            // roll back to the last good snapshot and stop
            for (i, t) in snapshot.into_iter().enumerate() {
                *params.tensor_mut(crate::nn::ParamId::from_index(i)) = t;
            }
            let ckpt = save_checkpoint(
                out_dir.join("last_good"),
                &meta,
                &params,
                &StyleCache::new(),
            )?;
            std::fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
            return Err(Error::Diverged { step, ckpt });
        }

        let grads = tape.backward(total);
        let mut grad_list: Vec<Tensor<F>> =
            vars.iter().map(|&v| grads.get(v).clone()).collect();
        adam.step(&mut params, &mut grad_list);

        writeln!(
            log,
            "{}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}",
            step,
            losses.l_s,
            losses.l_d,
            losses.l_cp,
            losses.l_cfm,
            losses.l_prior,
            losses.l_vq,
            losses.total
        )
        .expect("write to string");
        last = losses;

        if (step + 1) % cfg.snapshot_every == 0 {
            snapshot = params.tensors().to_vec();
            snapshot_step = step + 1;
        }
    }
    let _ = snapshot_step;

    // cache per-speaker style statistics for reference-free synthesis
    let mut cache = StyleCache::new();
    if cfg.flags.style {
        for utt in &train_utts {
            let mel = crate::corpus::MelSpectrogram {
                frames: utt.mel.clone(),
                frame_shift_s: utt.frame_shift_s,
            };
            let ag = model.style.global_style(&params, &mel)?;
            let local = model.style.local_style_encode(&params, &mel)?;
            cache.observe(
                &utt.record.speaker_id,
                &ag,
                &local.codebook_indices,
                cfg.model.style.codebook_size,
            );
        }
    }

    let ckpt_dir = save_checkpoint(out_dir.join("checkpoint"), &meta, &params, &cache)?;
    std::fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;

    Ok(GroupTrainOutcome {
        group_key: group.group_key.clone(),
        strategy: group.strategy,
        ckpt_dir,
        log_path,
        steps_run: cfg.steps,
        final_losses: last,
    })
}

/// Trains one model per group of the chosen strategy; groups run in
/// parallel with per-group derived seeds. Returns outcomes in group order.
pub fn train(
    cfg: &TrainConfig,
    manifest_path: &Path,
    strategy: Strategy,
    out_dir: &Path,
) -> Result<Vec<GroupTrainOutcome>> {
    cfg.validate()?;
    let records = crate::corpus::load_manifest(manifest_path)?;
    if records.is_empty() {
        return Err(Error::Validation("manifest is empty".into()));
    }
    let groups = group_records(&records, strategy)?;
    let speakers = speaker_table(&records);
    let provider = match (&cfg.normal_table, cfg.flags.cpo) {
        (Some(path), _) => Some(NormalProvider::<crate::Real>::from_table_file(
            crate::corpus::resolve_path(manifest_path, Path::new(path)),
        )?),
        (None, true) => {
            return Err(Error::Config(
                "cpo flag requires a normal_table in the config".into(),
            ))
        }
        (None, false) => None,
    };
    let data = prepare_records::<crate::Real>(
        &records,
        manifest_path,
        &cfg.pause,
        provider.as_ref(),
        &speakers,
    )?;
    let (vocab_size, n_mels, frame_shift_s) = corpus_dims(&records, &data)?;

    groups
        .par_iter()
        .enumerate()
        .map(|(gi, group)| {
            let sub = out_dir.join(format!("{}_{}", strategy.as_str(), group.group_key));
            train_group(
                cfg,
                group,
                &data,
                &speakers,
                vocab_size,
                n_mels,
                frame_shift_s,
                &sub,
                cfg.seed.wrapping_add(gi as u64),
            )
        })
        .collect()
}

/// Vocabulary size, mel dimension and frame shift implied by a corpus.
pub fn corpus_dims<F: Scalar>(
    records: &[UtteranceRecord],
    data: &[PreparedUtt<F>],
) -> Result<(usize, usize, f64)> {
    let vocab = records
        .iter()
        .flat_map(|r| r.phonemes.iter())
        .max()
        .map(|&m| m + 1)
        .ok_or_else(|| Error::Validation("no phonemes in manifest".into()))?;
    let first = data
        .first()
        .ok_or_else(|| Error::Validation("no prepared utterances".into()))?;
    let n_mels = first.mel.cols();
    if let Some(bad) = data.iter().find(|u| u.mel.cols() != n_mels) {
        return Err(Error::Validation(format!(
            "mel dimension differs across corpus ({} vs {} at {})",
            n_mels,
            bad.mel.cols(),
            bad.record.utt_id
        )));
    }
    Ok((vocab, n_mels, first.frame_shift_s))
}
