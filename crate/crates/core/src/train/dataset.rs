//! Turns manifest records into training-ready tensors: mel matrices cropped
//! to the alignment span, per-phoneme durations and pause labels, baseline
//! (pause-absorbed) durations, and normal-speech reference log-durations.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::alignment::pause_labels_from_alignment;
use crate::corpus::{
    load_alignment, resolve_path, MelSpectrogram, TokenKind, UtteranceRecord,
};
use crate::cpo::NormalProvider;
use crate::error::{Error, Result};
use crate::scalar::{fl, Scalar};
use crate::tensor::Tensor;

use super::PauseConfig;

#[derive(Clone, Debug)]
pub struct PreparedUtt<F> {
    pub record: UtteranceRecord,
    pub tokens: Vec<usize>,
    /// Mel frames covering exactly the alignment span.
    pub mel: Tensor<F>,
    pub frame_shift_s: f64,
    /// Frames per phoneme.
    pub phoneme_durs: Vec<usize>,
    /// Pause class of the silence following each phoneme (0 = none).
    pub pause_classes: Vec<usize>,
    /// Frames of the silence following each phoneme (0 = none).
    pub pause_durs: Vec<usize>,
    /// Phoneme + following-silence frames: duration targets for the
    /// baseline that models no explicit pauses.
    pub absorbed_durs: Vec<usize>,
    /// Normal-speech reference log-durations per phoneme.
    pub normal_log_d: Vec<F>,
    pub speaker_index: usize,
}

impl<F: Scalar> PreparedUtt<F> {
    /// Duration targets for the pause-augmented row sequence, interleaving
    /// phoneme durations with inserted pause durations.
    pub fn augmented_durations(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for i in 0..self.tokens.len() {
            out.push(self.phoneme_durs[i]);
            if self.pause_classes[i] > 0 {
                out.push(self.pause_durs[i]);
            }
        }
        out
    }

    /// Log-duration column for the augmented row sequence.
    pub fn augmented_log_targets(&self) -> Tensor<F> {
        let durs = self.augmented_durations();
        Tensor::column(
            &durs
                .iter()
                .map(|&d| fl::<F>(d as f64).ln())
                .collect::<Vec<F>>(),
        )
    }

    /// Log-durations of the dysarthric phonemes (CPO anchor).
    pub fn phoneme_log_durs(&self) -> Vec<F> {
        self.phoneme_durs
            .iter()
            .map(|&d| fl::<F>(d as f64).ln())
            .collect()
    }
}

/// Speaker table: sorted unique speaker ids with severities.
pub fn speaker_table(records: &[UtteranceRecord]) -> Vec<super::SpeakerEntry> {
    let mut map: BTreeMap<String, crate::corpus::Severity> = BTreeMap::new();
    for r in records {
        map.entry(r.speaker_id.clone()).or_insert(r.severity);
    }
    map.into_iter()
        .map(|(id, severity)| super::SpeakerEntry { id, severity })
        .collect()
}

pub fn prepare_records<F: Scalar>(
    records: &[UtteranceRecord],
    manifest_path: &Path,
    pause: &PauseConfig,
    provider: Option<&NormalProvider<F>>,
    speakers: &[super::SpeakerEntry],
) -> Result<Vec<PreparedUtt<F>>> {
    let index_of: BTreeMap<&str, usize> = speakers
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    records
        .par_iter()
        .map(|r| prepare_one(r, manifest_path, pause, provider, &index_of))
        .collect()
}

fn prepare_one<F: Scalar>(
    record: &UtteranceRecord,
    manifest_path: &Path,
    pause: &PauseConfig,
    provider: Option<&NormalProvider<F>>,
    index_of: &BTreeMap<&str, usize>,
) -> Result<PreparedUtt<F>> {
    let mel_path = resolve_path(manifest_path, &record.mel_path);
    let align_path = resolve_path(manifest_path, &record.alignment_path);
    let mel: MelSpectrogram<F> = MelSpectrogram::load(&mel_path)?;
    let tokens_al = load_alignment(&align_path)?;

    let phonemes: Vec<&crate::corpus::AlignToken> = tokens_al
        .iter()
        .filter(|t| t.kind == TokenKind::Phoneme)
        .collect();
    if phonemes.len() != record.phonemes.len() {
        return Err(Error::Validation(format!(
            "{}: alignment has {} phonemes, manifest lists {}",
            record.utt_id,
            phonemes.len(),
            record.phonemes.len()
        )));
    }
    for (al, &man) in phonemes.iter().zip(&record.phonemes) {
        if al.token_id != man {
            return Err(Error::Validation(format!(
                "{}: alignment token {} does not match manifest token {}",
                record.utt_id, al.token_id, man
            )));
        }
    }

    // Crop the mel to the aligned span; leading/trailing unaligned frames are
    // dropped so row durations always sum to the mel length.
    let span_start = tokens_al.first().map(|t| t.start_frame).unwrap_or(0);
    let span_end = tokens_al.last().map(|t| t.end_frame).unwrap_or(0);
    if span_end > mel.n_frames() {
        return Err(Error::Validation(format!(
            "{}: alignment spans {} frames but mel has {}",
            record.utt_id,
            span_end,
            mel.n_frames()
        )));
    }
    let mut cropped = Tensor::zeros(span_end - span_start, mel.dim());
    for r in span_start..span_end {
        cropped
            .row_mut(r - span_start)
            .copy_from_slice(mel.frames.row(r));
    }

    // Contiguity inside the span: every frame must belong to some token.
    let covered: usize = tokens_al.iter().map(|t| t.frames()).sum();
    if covered != span_end - span_start {
        return Err(Error::Validation(format!(
            "{}: alignment leaves gaps inside its span",
            record.utt_id
        )));
    }

    let labels =
        pause_labels_from_alignment(&tokens_al, &pause.to_label_config::<F>(), fl(mel.frame_shift_s))?;

    let mut phoneme_durs = Vec::with_capacity(phonemes.len());
    let mut pause_durs = vec![0usize; phonemes.len()];
    let mut pi = 0usize;
    for (idx, tok) in tokens_al.iter().enumerate() {
        if tok.kind != TokenKind::Phoneme {
            continue;
        }
        phoneme_durs.push(tok.frames());
        if let Some(next) = tokens_al.get(idx + 1) {
            if next.kind == TokenKind::Silence {
                pause_durs[pi] = next.frames();
            }
        }
        pi += 1;
    }
    let absorbed_durs: Vec<usize> = phoneme_durs
        .iter()
        .zip(&pause_durs)
        .map(|(&p, &s)| p + s)
        .collect();

    // With labels strictly from silence durations, label > 0 ⟺ silence > 0.
    debug_assert!(labels
        .labels
        .iter()
        .zip(&pause_durs)
        .all(|(&l, &d)| (l > 0) == (d > 0)));

    let normal_log_d = match provider {
        Some(p) => p.normal_reference(&record.phonemes)?.log_durations,
        None => vec![F::zero(); record.phonemes.len()],
    };

    let speaker_index = *index_of
        .get(record.speaker_id.as_str())
        .ok_or_else(|| Error::UnknownSpeaker(record.speaker_id.clone()))?;

    Ok(PreparedUtt {
        record: record.clone(),
        tokens: record.phonemes.clone(),
        mel: cropped,
        frame_shift_s: mel.frame_shift_s,
        phoneme_durs,
        pause_classes: labels.labels,
        pause_durs,
        absorbed_durs,
        normal_log_d,
        speaker_index,
    })
}
