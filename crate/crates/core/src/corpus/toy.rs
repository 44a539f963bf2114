//! Deterministic synthetic pseudo-dysarthric corpus.
//!
//! Each utterance gets phonemes from a small vocabulary, a rule-generated
//! alignment with severity-dependent duration stretching and pause insertion,
//! and a pseudo-mel computed by a fixed smooth function of phoneme identity
//! plus a per-speaker spectral offset and a per-utterance style wobble that is
//! only recoverable from the reference mel. A parallel normal-duration table
//! (unstretched, pause-free) is emitted for the contrastive duration loss.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::{seeded_stream, shuffle};
use crate::tensor::Tensor;

use super::mel::round_to_f32;
use super::{
    save_alignment, save_manifest, AlignToken, MelSpectrogram, Severity, Split, TokenKind,
    UtteranceRecord,
};

/// Rhythm pathology knobs for one severity level.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SeverityProfile {
    /// Duration stretch factor (≥ 1; 1.0 = normal speech rate).
    pub stretch: f64,
    /// Pause probability at pause-prone token boundaries.
    pub site_pause_prob: f64,
    /// Pause probability elsewhere.
    pub nonsite_pause_prob: f64,
    /// Relative weights for pause classes 1..3 (short/medium/long).
    pub class_weights: [f64; 3],
    /// Guarantee at least one class-3 pause per utterance.
    pub force_long_pause: bool,
}

impl Default for SeverityProfile {
    fn default() -> Self {
        SeverityProfile {
            stretch: 1.0,
            site_pause_prob: 0.1,
            nonsite_pause_prob: 0.02,
            class_weights: [1.0, 0.0, 0.0],
            force_long_pause: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SeverityProfiles {
    pub severe: SeverityProfile,
    pub modsev: SeverityProfile,
    pub moderate: SeverityProfile,
    pub mild: SeverityProfile,
    pub control: SeverityProfile,
}

impl Default for SeverityProfiles {
    fn default() -> Self {
        SeverityProfiles {
            severe: SeverityProfile {
                stretch: 1.8,
                site_pause_prob: 0.95,
                nonsite_pause_prob: 0.05,
                class_weights: [0.05, 0.25, 0.70],
                force_long_pause: true,
            },
            modsev: SeverityProfile {
                stretch: 1.5,
                site_pause_prob: 0.9,
                nonsite_pause_prob: 0.04,
                class_weights: [0.2, 0.5, 0.3],
                force_long_pause: false,
            },
            moderate: SeverityProfile {
                stretch: 1.3,
                site_pause_prob: 0.85,
                nonsite_pause_prob: 0.03,
                class_weights: [0.3, 0.55, 0.15],
                force_long_pause: false,
            },
            mild: SeverityProfile {
                stretch: 1.15,
                site_pause_prob: 0.8,
                nonsite_pause_prob: 0.02,
                class_weights: [0.65, 0.3, 0.05],
                force_long_pause: false,
            },
            control: SeverityProfile {
                stretch: 1.0,
                site_pause_prob: 0.1,
                nonsite_pause_prob: 0.01,
                class_weights: [0.9, 0.1, 0.0],
                force_long_pause: false,
            },
        }
    }
}

impl SeverityProfiles {
    pub fn get(&self, sev: Severity) -> &SeverityProfile {
        match sev {
            Severity::Severe => &self.severe,
            Severity::ModSev => &self.modsev,
            Severity::Moderate => &self.moderate,
            Severity::Mild => &self.mild,
            Severity::Control => &self.control,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyCorpusConfig {
    pub n_mels: usize,
    pub frame_shift_s: f64,
    pub vocab_size: usize,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    pub valid_fraction: f64,
    pub eval_fraction: f64,
    /// Every `control_every`-th utterance goes to a healthy control speaker.
    pub include_controls: bool,
    pub control_every: usize,
    /// Per-utterance spectral wobble amplitude (style information that only
    /// the reference mel carries).
    pub wobble_amp: f64,
    pub speaker_offset_amp: f64,
    pub noise_std: f64,
    pub profiles: SeverityProfiles,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig {
            n_mels: 80,
            frame_shift_s: 0.01,
            vocab_size: 16,
            min_phonemes: 6,
            max_phonemes: 10,
            valid_fraction: 0.1,
            eval_fraction: 0.1,
            include_controls: true,
            control_every: 15,
            wobble_amp: 0.25,
            speaker_offset_amp: 0.35,
            noise_std: 0.03,
            profiles: SeverityProfiles::default(),
        }
    }
}

/// Toy speaker roster mirroring an 8-speaker, 4-severity corpus.
pub const TOY_SPEAKERS: [(&str, Severity); 8] = [
    ("F01", Severity::Severe),
    ("M01", Severity::Severe),
    ("M02", Severity::Severe),
    ("M04", Severity::Severe),
    ("M05", Severity::ModSev),
    ("F03", Severity::Moderate),
    ("F04", Severity::Mild),
    ("M03", Severity::Mild),
];

pub const TOY_CONTROLS: [(&str, Severity); 2] =
    [("FC01", Severity::Control), ("MC01", Severity::Control)];

/// Unstretched base duration (frames) for a phoneme id.
pub fn base_duration(phoneme: usize) -> usize {
    3 + (phoneme % 5)
}

/// Whether the boundary between tokens `a` and `b` is pause-prone. Pause
/// placement must be text-predictable so the pause predictor has signal.
pub fn pause_site(a: usize, b: usize) -> bool {
    a % 4 == 3 || (a + b) % 7 == 0
}

pub struct ToyCorpusOutput {
    pub manifest_path: PathBuf,
    pub normal_table_path: PathBuf,
    pub records: Vec<UtteranceRecord>,
}

struct UttSpec {
    index: usize,
    utt_id: String,
    speaker_idx: usize,
    speaker_id: String,
    severity: Severity,
}

/// Frame counts per class bucket; consistent with the default pause-label
/// thresholds (0.15 s, 0.40 s) at 10 ms frame shift, kept clear of the
/// bucket boundaries.
fn pause_frames(rng: &mut impl Rng, class: usize) -> usize {
    match class {
        1 => rng.random_range(4..=13),
        2 => rng.random_range(17..=38),
        _ => rng.random_range(42..=70),
    }
}

fn draw_class(rng: &mut impl Rng, weights: &[f64; 3]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x: f64 = rng.random_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return i + 1;
        }
        x -= w;
    }
    3
}

fn frac(x: f64) -> f64 {
    x - x.floor()
}

/// Smooth spectral template for a phoneme: two bumps over the mel axis on a
/// low floor, with a short attack at segment start.
fn phoneme_mel_value(p: usize, vocab: usize, d: usize, n_mels: usize, tau: usize) -> f64 {
    let df = d as f64;
    let nd = n_mels as f64;
    let c1 = nd * (0.12 + 0.72 * (p as f64 / vocab as f64));
    let c2 = nd * (0.15 + 0.70 * frac(p as f64 * 0.618 + 0.31));
    let s1 = nd / 20.0;
    let s2 = nd / 14.0;
    let bump1 = 2.2 * (-((df - c1) * (df - c1)) / (2.0 * s1 * s1)).exp();
    let bump2 = 1.2 * (-((df - c2) * (df - c2)) / (2.0 * s2 * s2)).exp();
    let attack = 0.8 + 0.2 * (tau.min(2) as f64) / 2.0;
    -3.0 + attack * (bump1 + bump2)
}

fn speaker_offset(speaker_idx: usize, d: usize, n_mels: usize, amp: f64) -> f64 {
    let freq = 1.0 + (speaker_idx % 3) as f64;
    let phase = speaker_idx as f64 * 2.39996;
    amp * (2.0 * std::f64::consts::PI * d as f64 / n_mels as f64 * freq + phase).sin()
}

fn wobble_basis(d: usize, n_mels: usize) -> f64 {
    (std::f64::consts::PI * d as f64 / (n_mels.saturating_sub(1).max(1)) as f64).cos()
}

fn silence_mel_value(d: usize, n_mels: usize) -> f64 {
    -3.3 + 0.15 * (2.0 * std::f64::consts::PI * d as f64 / n_mels as f64).sin()
}

/// Generates the corpus under `out_dir`: `manifest.tsv`, `mels/`, `aligns/`
/// and `normal_durations.tsv`. Deterministic given `seed` (independent ChaCha
/// stream per utterance, so generation parallelism cannot reorder anything).
pub fn generate_toy_corpus(
    seed: u64,
    n_utts: usize,
    config: &ToyCorpusConfig,
    out_dir: impl AsRef<Path>,
) -> Result<ToyCorpusOutput> {
    if n_utts == 0 {
        return Err(Error::Config("n_utts must be ≥ 1".into()));
    }
    if config.min_phonemes < 2 || config.max_phonemes < config.min_phonemes {
        return Err(Error::Config("bad phoneme length range".into()));
    }
    if config.valid_fraction + config.eval_fraction >= 1.0 {
        return Err(Error::Config("split fractions must leave training data".into()));
    }
    let out_dir = out_dir.as_ref();
    let mel_dir = out_dir.join("mels");
    let align_dir = out_dir.join("aligns");
    std::fs::create_dir_all(&mel_dir).map_err(|e| Error::io(&mel_dir, e))?;
    std::fs::create_dir_all(&align_dir).map_err(|e| Error::io(&align_dir, e))?;

    // Speaker assignment is pure arithmetic over the utterance index.
    let mut specs = Vec::with_capacity(n_utts);
    let mut dys_counter = 0usize;
    let mut control_counter = 0usize;
    for i in 0..n_utts {
        let is_control =
            config.include_controls && config.control_every > 0 && (i + 1) % config.control_every == 0;
        let (speaker_id, severity, speaker_idx) = if is_control {
            let k = control_counter % TOY_CONTROLS.len();
            control_counter += 1;
            (
                TOY_CONTROLS[k].0.to_string(),
                TOY_CONTROLS[k].1,
                TOY_SPEAKERS.len() + k,
            )
        } else {
            let k = dys_counter % TOY_SPEAKERS.len();
            dys_counter += 1;
            (TOY_SPEAKERS[k].0.to_string(), TOY_SPEAKERS[k].1, k)
        };
        specs.push(UttSpec {
            index: i,
            utt_id: format!("u{i:05}_{speaker_id}"),
            speaker_idx,
            speaker_id,
            severity,
        });
    }

    // Stratified splits per speaker, from a dedicated stream.
    let splits = assign_splits(seed, &specs, config);

    let records: Vec<UtteranceRecord> = specs
        .par_iter()
        .map(|spec| generate_utterance(seed, spec, splits[spec.index], config, out_dir))
        .collect::<Result<Vec<_>>>()?;

    let manifest_path = out_dir.join("manifest.tsv");
    save_manifest(&manifest_path, &records)?;

    let normal_table_path = out_dir.join("normal_durations.tsv");
    let mut table = Vec::new();
    for p in 0..config.vocab_size {
        writeln!(table, "{} {}", p, base_duration(p)).expect("write to vec");
    }
    std::fs::write(&normal_table_path, table).map_err(|e| Error::io(&normal_table_path, e))?;

    Ok(ToyCorpusOutput {
        manifest_path,
        normal_table_path,
        records,
    })
}

fn assign_splits(seed: u64, specs: &[UttSpec], config: &ToyCorpusConfig) -> Vec<Split> {
    let mut by_speaker: Vec<(String, Vec<usize>)> = Vec::new();
    for spec in specs {
        match by_speaker.iter_mut().find(|(s, _)| *s == spec.speaker_id) {
            Some((_, v)) => v.push(spec.index),
            None => by_speaker.push((spec.speaker_id.clone(), vec![spec.index])),
        }
    }
    let mut splits = vec![Split::Train; specs.len()];
    let mut rng = seeded_stream(seed, 0);
    for (_, mut utts) in by_speaker {
        shuffle(&mut rng, &mut utts);
        let n = utts.len();
        let n_eval = ((n as f64 * config.eval_fraction).ceil() as usize).min(n.saturating_sub(1));
        let n_valid =
            ((n as f64 * config.valid_fraction).ceil() as usize).min(n.saturating_sub(n_eval + 1));
        for (j, &idx) in utts.iter().enumerate() {
            splits[idx] = if j < n_eval {
                Split::Eval
            } else if j < n_eval + n_valid {
                Split::Valid
            } else {
                Split::Train
            };
        }
    }
    splits
}

fn generate_utterance(
    seed: u64,
    spec: &UttSpec,
    split: Split,
    config: &ToyCorpusConfig,
    out_dir: &Path,
) -> Result<UtteranceRecord> {
    let mut rng = seeded_stream(seed, spec.index as u64 + 1);
    let profile = config.profiles.get(spec.severity);

    let n = rng.random_range(config.min_phonemes..=config.max_phonemes);
    let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..config.vocab_size)).collect();

    let stretch = profile.stretch * rng.random_range(1.0..1.12);
    let durations: Vec<usize> = tokens
        .iter()
        .map(|&p| {
            let jitter = rng.random_range(0..=1usize);
            (((base_duration(p) + jitter) as f64) * stretch).ceil() as usize
        })
        .collect();

    // Pause class per boundary (0 = none); boundary i sits after phoneme i.
    let mut pauses = vec![0usize; n];
    for i in 0..n - 1 {
        let prob = if pause_site(tokens[i], tokens[i + 1]) {
            profile.site_pause_prob
        } else {
            profile.nonsite_pause_prob
        };
        if rng.random_range(0.0..1.0) < prob {
            pauses[i] = draw_class(&mut rng, &profile.class_weights);
        }
    }
    if profile.force_long_pause && n >= 2 && !pauses.iter().any(|&c| c == 3) {
        let at = rng.random_range(0..n - 1);
        pauses[at] = 3;
    }
    let pause_len: Vec<usize> = pauses
        .iter()
        .map(|&c| if c == 0 { 0 } else { pause_frames(&mut rng, c) })
        .collect();

    // Alignment: P and inter-phoneme SIL tokens covering [0, T).
    let mut align = Vec::new();
    let mut cursor = 0usize;
    for i in 0..n {
        align.push(AlignToken {
            kind: TokenKind::Phoneme,
            token_id: tokens[i],
            start_frame: cursor,
            end_frame: cursor + durations[i],
        });
        cursor += durations[i];
        if pause_len[i] > 0 {
            align.push(AlignToken {
                kind: TokenKind::Silence,
                token_id: 0,
                start_frame: cursor,
                end_frame: cursor + pause_len[i],
            });
            cursor += pause_len[i];
        }
    }
    let total_frames = cursor;

    // Pseudo-mel.
    let wobble = rng.random_range(-config.wobble_amp..config.wobble_amp);
    let mut frames: Tensor<f64> = Tensor::zeros(total_frames, config.n_mels);
    for tok in &align {
        for t in tok.start_frame..tok.end_frame {
            let tau = t - tok.start_frame;
            for d in 0..config.n_mels {
                let base = match tok.kind {
                    TokenKind::Phoneme => {
                        phoneme_mel_value(tok.token_id, config.vocab_size, d, config.n_mels, tau)
                            + speaker_offset(
                                spec.speaker_idx,
                                d,
                                config.n_mels,
                                config.speaker_offset_amp,
                            )
                    }
                    TokenKind::Silence => silence_mel_value(d, config.n_mels),
                };
                let noise_scale = match tok.kind {
                    TokenKind::Phoneme => config.noise_std,
                    TokenKind::Silence => config.noise_std * 0.5,
                };
                let noise: f64 = crate::rng::normal::<f64>(&mut rng) * noise_scale;
                let v = base + wobble * wobble_basis(d, config.n_mels) + noise;
                frames.set(t, d, v);
            }
        }
    }
    round_to_f32(&mut frames);
    let mel = MelSpectrogram::new(frames, config.frame_shift_s)?;

    let mel_rel = PathBuf::from("mels").join(format!("{}.mel", spec.utt_id));
    let align_rel = PathBuf::from("aligns").join(format!("{}.align", spec.utt_id));
    mel.save(out_dir.join(&mel_rel))?;
    save_alignment(out_dir.join(&align_rel), &align)?;

    Ok(UtteranceRecord {
        utt_id: spec.utt_id.clone(),
        speaker_id: spec.speaker_id.clone(),
        severity: spec.severity,
        phonemes: tokens,
        mel_path: mel_rel,
        alignment_path: align_rel,
        split,
    })
}

/// Loads the normal-duration lookup table (`phoneme_id mean_frames` lines).
pub fn load_normal_table(path: impl AsRef<Path>) -> Result<Vec<(usize, f64)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse_err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg,
        };
        let id: usize = it
            .next()
            .ok_or_else(|| parse_err("missing phoneme id".into()))?
            .parse()
            .map_err(|_| parse_err("bad phoneme id".into()))?;
        let frames: f64 = it
            .next()
            .ok_or_else(|| parse_err("missing mean frames".into()))?
            .parse()
            .map_err(|_| parse_err("bad mean frames".into()))?;
        if frames <= 0.0 {
            return Err(parse_err("mean frames must be positive".into()));
        }
        out.push((id, frames));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_manifest;

    fn dir_digest(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(dir).unwrap().display().to_string();
                    files.push((rel, std::fs::read(&p).unwrap()));
                }
            }
        }
        files.sort();
        files
    }

    #[test]
    fn same_seed_gives_byte_identical_output() {
        let cfg = ToyCorpusConfig {
            n_mels: 12,
            ..Default::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_toy_corpus(7, 2, &cfg, d1.path()).unwrap();
        generate_toy_corpus(7, 2, &cfg, d2.path()).unwrap();
        assert_eq!(dir_digest(d1.path()), dir_digest(d2.path()));
    }

    #[test]
    fn severe_utterances_carry_a_long_pause() {
        let cfg = ToyCorpusConfig {
            n_mels: 8,
            ..Default::default()
        };
        let d = tempfile::tempdir().unwrap();
        let out = generate_toy_corpus(11, 40, &cfg, d.path()).unwrap();
        // longest-pause threshold default: 0.40 s at 10 ms/frame ⇒ > 40 frames
        let mut saw_severe = false;
        for r in &out.records {
            if r.severity != Severity::Severe {
                continue;
            }
            saw_severe = true;
            let toks = crate::corpus::load_alignment(d.path().join(&r.alignment_path)).unwrap();
            let has_long = toks
                .iter()
                .any(|t| t.kind == TokenKind::Silence && (t.frames() as f64) * cfg.frame_shift_s > 0.40);
            assert!(has_long, "severe utterance {} lacks a long pause", r.utt_id);
        }
        assert!(saw_severe);
    }

    #[test]
    fn normal_table_bounds_dysarthric_durations() {
        let cfg = ToyCorpusConfig {
            n_mels: 8,
            ..Default::default()
        };
        let d = tempfile::tempdir().unwrap();
        let out = generate_toy_corpus(3, 30, &cfg, d.path()).unwrap();
        let table = load_normal_table(&out.normal_table_path).unwrap();
        let lookup = |p: usize| table.iter().find(|(id, _)| *id == p).unwrap().1;
        for r in &out.records {
            let toks = crate::corpus::load_alignment(d.path().join(&r.alignment_path)).unwrap();
            for t in toks.iter().filter(|t| t.kind == TokenKind::Phoneme) {
                assert!(
                    lookup(t.token_id) <= t.frames() as f64,
                    "normal duration exceeds dysarthric for phoneme {}",
                    t.token_id
                );
            }
        }
    }

    #[test]
    fn manifest_loads_and_speakers_have_all_splits() {
        let cfg = ToyCorpusConfig {
            n_mels: 8,
            ..Default::default()
        };
        let d = tempfile::tempdir().unwrap();
        let out = generate_toy_corpus(5, 120, &cfg, d.path()).unwrap();
        let recs = load_manifest(&out.manifest_path).unwrap();
        assert_eq!(recs.len(), 120);
        for (spk, _) in TOY_SPEAKERS {
            let of_spk: Vec<_> = recs.iter().filter(|r| r.speaker_id == spk).collect();
            assert!(of_spk.iter().any(|r| r.split == Split::Train));
            assert!(of_spk.iter().any(|r| r.split == Split::Valid));
        }
    }
}
