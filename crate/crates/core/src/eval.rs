//! Evaluation metrics: mel-cepstral distortion between synthesized and
//! reference mels (DCT cepstra, DTW frame matching), word error rate by
//! minimum edit distance, and severity-grouped report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{MelSpectrogram, Severity, UtteranceRecord};
use crate::error::{Error, Result};
use crate::scalar::{fl, fu, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct McdConfig {
    /// Cepstral coefficients compared (1..=n, c0 excluded).
    pub n_coeffs: usize,
}

impl Default for McdConfig {
    fn default() -> Self {
        McdConfig { n_coeffs: 13 }
    }
}

/// Orthonormal DCT-II over one frame.
fn dct_frame<F: Scalar>(x: &[F], out: &mut [F]) {
    let d = x.len();
    let norm0: F = fl((1.0 / d as f64).sqrt());
    let norm: F = fl((2.0 / d as f64).sqrt());
    for (k, o) in out.iter_mut().enumerate() {
        let mut s = F::zero();
        for (j, &v) in x.iter().enumerate() {
            let angle = std::f64::consts::PI * (2 * j + 1) as f64 * k as f64 / (2.0 * d as f64);
            s += v * fl(angle.cos());
        }
        *o = if k == 0 { norm0 * s } else { norm * s };
    }
}

/// Full cepstra of a log-mel matrix (rows = frames, cols = coefficients
/// including c0).
pub fn mel_to_cepstra<F: Scalar>(mel: &Tensor<F>) -> Tensor<F> {
    let mut out = Tensor::zeros(mel.rows(), mel.cols());
    for r in 0..mel.rows() {
        let (src, dst) = (mel.row(r).to_vec(), out.row_mut(r));
        dct_frame(&src, dst);
    }
    out
}

/// Inverse of [`mel_to_cepstra`] (orthonormal DCT-III), for constructing test
/// inputs with known cepstra.
pub fn cepstra_to_mel<F: Scalar>(cepstra: &Tensor<F>) -> Tensor<F> {
    let d = cepstra.cols();
    let norm0: F = fl((1.0 / d as f64).sqrt());
    let norm: F = fl((2.0 / d as f64).sqrt());
    let mut out = Tensor::zeros(cepstra.rows(), d);
    for r in 0..cepstra.rows() {
        for j in 0..d {
            let mut s = F::zero();
            for k in 0..d {
                let angle =
                    std::f64::consts::PI * (2 * j + 1) as f64 * k as f64 / (2.0 * d as f64);
                let basis = if k == 0 { norm0 } else { norm };
                s += cepstra.at(r, k) * basis * fl(angle.cos());
            }
            out.set(r, j, s);
        }
    }
    out
}

/// Mean cepstral distortion in dB between two mels: cepstra 1..=n_coeffs per
/// frame, frames matched by dynamic time warping with squared-distance cost,
/// per-pair distortion (10/ln 10)·√(2·Σ_d Δc_d²) averaged over the warping
/// path.
pub fn mcd<F: Scalar>(
    reference: &MelSpectrogram<F>,
    synthesized: &MelSpectrogram<F>,
    cfg: &McdConfig,
) -> Result<F> {
    reference.validate()?;
    synthesized.validate()?;
    if reference.dim() != synthesized.dim() {
        return Err(Error::Shape(format!(
            "mel dimensions differ: {} vs {}",
            reference.dim(),
            synthesized.dim()
        )));
    }
    if cfg.n_coeffs == 0 || cfg.n_coeffs >= reference.dim() {
        return Err(Error::Config(format!(
            "n_coeffs must be in 1..{}",
            reference.dim()
        )));
    }
    let ca = truncated_cepstra(&reference.frames, cfg.n_coeffs);
    let cb = truncated_cepstra(&synthesized.frames, cfg.n_coeffs);
    let (path_cost_sum, path_len) = dtw_path_cost(&ca, &cb);
    let k: F = fl(10.0 / std::f64::consts::LN_10);
    let two: F = fl(2.0);
    Ok(path_cost_sum
        .iter()
        .map(|&c| k * (two * c).sqrt())
        .sum::<F>()
        / fu(path_len))
}

/// Cepstra rows keeping coefficients 1..=n (c0 dropped).
fn truncated_cepstra<F: Scalar>(mel: &Tensor<F>, n: usize) -> Tensor<F> {
    let full = mel_to_cepstra(mel);
    let mut out = Tensor::zeros(mel.rows(), n);
    for r in 0..mel.rows() {
        out.row_mut(r).copy_from_slice(&full.row(r)[1..=n]);
    }
    out
}

/// DTW with moves (1,0), (0,1), (1,1) minimizing summed squared distances.
/// Returns the per-pair squared distances along the optimal path.
fn dtw_path_cost<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> (Vec<F>, usize) {
    let (n, m) = (a.rows(), b.rows());
    let dist = |i: usize, j: usize| -> F {
        a.row(i)
            .iter()
            .zip(b.row(j))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum()
    };
    let mut acc = Tensor::filled(n, m, F::infinity());
    acc.set(0, 0, dist(0, 0));
    for i in 0..n {
        for j in 0..m {
            if i == 0 && j == 0 {
                continue;
            }
            let mut best = F::infinity();
            if i > 0 {
                best = best.min(acc.at(i - 1, j));
            }
            if j > 0 {
                best = best.min(acc.at(i, j - 1));
            }
            if i > 0 && j > 0 {
                best = best.min(acc.at(i - 1, j - 1));
            }
            acc.set(i, j, best + dist(i, j));
        }
    }
    // backtrack, preferring diagonal on ties
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 {
            acc.at(i - 1, j - 1)
        } else {
            F::infinity()
        };
        let up = if i > 0 { acc.at(i - 1, j) } else { F::infinity() };
        let left = if j > 0 { acc.at(i, j - 1) } else { F::infinity() };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    let costs: Vec<F> = path.iter().rev().map(|&(i, j)| dist(i, j)).collect();
    let len = costs.len();
    (costs, len)
}

/// Word error rate (S + D + I) / |reference| via minimum edit distance; may
/// exceed 1.
pub fn wer(reference: &[String], hypothesis: &[String]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Domain("wer needs a non-empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Minimum edit distance with unit costs, rolling-array DP.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Lowercases, strips punctuation to spaces, collapses whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Metric {
    Mcd,
    Wer,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Mcd => "MCD",
            Metric::Wer => "WER",
        }
    }
}

/// Severity-grouped metric report: per-speaker means, per-severity means
/// (mean of the severity's speaker means), and the overall value as the
/// unweighted mean over speakers.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metric: Metric,
    pub per_speaker: BTreeMap<String, f64>,
    pub per_group: BTreeMap<Severity, f64>,
    pub overall: f64,
}

/// Builds a report from per-utterance metric values. Every utterance id must
/// resolve through `records`.
pub fn build_report(
    metric: Metric,
    per_utt: &[(String, f64)],
    records: &[UtteranceRecord],
) -> Result<EvalReport> {
    if per_utt.is_empty() {
        return Err(Error::Validation("no utterance metrics to report".into()));
    }
    let by_id: BTreeMap<&str, &UtteranceRecord> =
        records.iter().map(|r| (r.utt_id.as_str(), r)).collect();
    let mut speaker_values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut speaker_severity: BTreeMap<String, Severity> = BTreeMap::new();
    for (utt, value) in per_utt {
        let rec = by_id
            .get(utt.as_str())
            .ok_or_else(|| Error::UnknownUtterance(utt.clone()))?;
        speaker_values
            .entry(rec.speaker_id.clone())
            .or_default()
            .push(*value);
        speaker_severity.insert(rec.speaker_id.clone(), rec.severity);
    }
    let per_speaker: BTreeMap<String, f64> = speaker_values
        .iter()
        .map(|(s, v)| (s.clone(), v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let mut group_values: BTreeMap<Severity, Vec<f64>> = BTreeMap::new();
    for (speaker, &mean) in &per_speaker {
        group_values
            .entry(speaker_severity[speaker])
            .or_default()
            .push(mean);
    }
    let per_group: BTreeMap<Severity, f64> = group_values
        .iter()
        .map(|(&sev, v)| (sev, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let overall = per_speaker.values().sum::<f64>() / per_speaker.len() as f64;
    Ok(EvalReport {
        metric,
        per_speaker,
        per_group,
        overall,
    })
}

impl EvalReport {
    /// Column headers in the order reports are rendered.
    pub fn severity_columns() -> [&'static str; 5] {
        ["Severe", "Mod.-Sev.", "Moderate", "Mild", "Overall"]
    }

    /// Aligned text table, one row over the severity columns.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let headers = Self::severity_columns();
        write!(s, "{:<8}", self.metric.as_str()).unwrap();
        for h in headers {
            write!(s, "{h:>11}").unwrap();
        }
        s.push('\n');
        write!(s, "{:<8}", "").unwrap();
        for sev in Severity::DYSARTHRIC {
            match self.per_group.get(&sev) {
                Some(v) => write!(s, "{v:>11.4}").unwrap(),
                None => write!(s, "{:>11}", "-").unwrap(),
            }
        }
        write!(s, "{:>11.4}", self.overall).unwrap();
        s.push('\n');
        s
    }

    /// Machine-readable key-value lines.
    pub fn render_kv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "metric {}", self.metric.as_str()).unwrap();
        for (spk, v) in &self.per_speaker {
            writeln!(s, "speaker.{spk} {v:.6}").unwrap();
        }
        for (sev, v) in &self.per_group {
            writeln!(s, "severity.{} {v:.6}", sev.as_str()).unwrap();
        }
        writeln!(s, "overall {:.6}", self.overall).unwrap();
        s
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let content = format!("{}\n{}", self.render_kv(), self.render_table());
        std::fs::write(path, content).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use std::path::PathBuf;

    fn mel_of(frames: Tensor<f64>) -> MelSpectrogram<f64> {
        MelSpectrogram::new(frames, 0.01).unwrap()
    }

    #[test]
    fn dct_round_trips() {
        let mut rng = crate::rng::seeded(4);
        let m: Tensor<f64> = crate::rng::uniform_tensor(&mut rng, 3, 16, -2.0, 2.0);
        let back = cepstra_to_mel(&mel_to_cepstra(&m));
        for (a, b) in m.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn identical_mels_have_zero_mcd() {
        let mut rng = crate::rng::seeded(9);
        let m = mel_of(crate::rng::uniform_tensor(&mut rng, 12, 20, -3.0, 1.0));
        let v = mcd(&m, &m, &McdConfig::default()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn unit_coefficient_difference_matches_closed_form() {
        // build mels from explicit cepstra differing by 1.0 in coefficient 3
        let d = 20usize;
        let mut c_ref: Tensor<f64> = Tensor::zeros(1, d);
        for (k, v) in c_ref.row_mut(0).iter_mut().enumerate() {
            *v = ((k as f64) * 0.37).sin() * 0.5;
        }
        let mut c_syn = c_ref.clone();
        c_syn.set(0, 3, c_ref.at(0, 3) + 1.0);
        let ref_mel = mel_of(cepstra_to_mel(&c_ref));
        let syn_mel = mel_of(cepstra_to_mel(&c_syn));
        let v = mcd(&ref_mel, &syn_mel, &McdConfig::default()).unwrap();
        let expect = 10.0 / std::f64::consts::LN_10 * 2.0f64.sqrt();
        assert!((v - expect).abs() < 1e-6, "got {v}, want {expect}");
    }

    #[test]
    fn dtw_forgives_duplicated_frames() {
        let mut rng = crate::rng::seeded(11);
        let base: Tensor<f64> = crate::rng::uniform_tensor(&mut rng, 6, 16, -2.0, 2.0);
        let mut doubled = Tensor::zeros(12, 16);
        for r in 0..6 {
            doubled.row_mut(2 * r).copy_from_slice(base.row(r));
            doubled.row_mut(2 * r + 1).copy_from_slice(base.row(r));
        }
        let v = mcd(&mel_of(doubled), &mel_of(base), &McdConfig::default()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn mcd_is_symmetric_for_equal_lengths_and_nonnegative() {
        let mut rng = crate::rng::seeded(13);
        for _ in 0..20 {
            let a = mel_of(crate::rng::uniform_tensor(&mut rng, 7, 16, -2.0, 2.0));
            let b = mel_of(crate::rng::uniform_tensor(&mut rng, 7, 16, -2.0, 2.0));
            let ab = mcd(&a, &b, &McdConfig::default()).unwrap();
            let ba = mcd(&b, &a, &McdConfig::default()).unwrap();
            assert!(ab >= 0.0);
            assert!((ab - ba).abs() < 1e-9);
        }
    }

    #[test]
    fn mcd_rejects_dimension_mismatch() {
        let a = mel_of(Tensor::zeros(2, 16));
        let b = mel_of(Tensor::zeros(2, 18));
        assert!(matches!(
            mcd(&a, &b, &McdConfig::default()),
            Err(Error::Shape(_))
        ));
    }

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn wer_worked_examples() {
        assert_eq!(wer(&words("a b c"), &words("a b c")).unwrap(), 0.0);
        let v = wer(&words("the cat sat"), &words("the cat")).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        let v = wer(&words("a b"), &words("a x b")).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn wer_can_exceed_one_and_rejects_empty_reference() {
        let v = wer(&words("a"), &words("x y z")).unwrap();
        assert!(v > 1.0);
        assert!(matches!(wer(&[], &words("a")), Err(Error::Domain(_))));
    }

    /// Plain recursive edit distance with full-matrix memo: the independent
    /// reference implementation.
    fn brute_edit(a: &[u8], b: &[u8]) -> usize {
        fn rec(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
            if i == 0 {
                return j;
            }
            if j == 0 {
                return i;
            }
            if let Some(v) = memo[i][j] {
                return v;
            }
            let cost = usize::from(a[i - 1] != b[j - 1]);
            let v = (rec(a, b, i - 1, j - 1, memo) + cost)
                .min(rec(a, b, i - 1, j, memo) + 1)
                .min(rec(a, b, i, j - 1, memo) + 1);
            memo[i][j] = Some(v);
            v
        }
        let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
        rec(a, b, a.len(), b.len(), &mut memo)
    }

    #[test]
    fn edit_distance_matches_brute_force_on_random_pairs() {
        use rand::Rng;
        let mut rng = crate::rng::seeded(15);
        for _ in 0..500 {
            let la = rng.random_range(0..=6usize);
            let lb = rng.random_range(0..=6usize);
            let a: Vec<u8> = (0..la).map(|_| rng.random_range(0..3u8)).collect();
            let b: Vec<u8> = (0..lb).map(|_| rng.random_range(0..3u8)).collect();
            assert_eq!(edit_distance(&a, &b), brute_edit(&a, &b));
        }
    }

    #[test]
    fn normalization_cleans_text() {
        assert_eq!(
            normalize_words("The  CAT, sat!  it's fine."),
            vec!["the", "cat", "sat", "it's", "fine"]
        );
    }

    fn rec(utt: &str, spk: &str, sev: Severity) -> UtteranceRecord {
        UtteranceRecord {
            utt_id: utt.into(),
            speaker_id: spk.into(),
            severity: sev,
            phonemes: vec![1],
            mel_path: PathBuf::from("x"),
            alignment_path: PathBuf::from("y"),
            split: Split::Eval,
        }
    }

    #[test]
    fn report_means_and_columns() {
        let records = vec![
            rec("u1", "F01", Severity::Severe),
            rec("u2", "F01", Severity::Severe),
            rec("u3", "M05", Severity::ModSev),
            rec("u4", "F03", Severity::Moderate),
            rec("u5", "M03", Severity::Mild),
        ];
        let per_utt = vec![
            ("u1".to_string(), 0.3),
            ("u2".to_string(), 0.1),
            ("u3".to_string(), 0.4),
            ("u4".to_string(), 0.2),
            ("u5".to_string(), 0.2),
        ];
        let report = build_report(Metric::Wer, &per_utt, &records).unwrap();
        assert!((report.per_speaker["F01"] - 0.2).abs() < 1e-12);
        // overall is the mean of per-speaker means
        assert!((report.overall - (0.2 + 0.4 + 0.2 + 0.2) / 4.0).abs() < 1e-12);
        let table = report.render_table();
        assert!(table.contains("Severe"));
        assert!(table.contains("Mod.-Sev."));
        assert!(table.contains("Moderate"));
        assert!(table.contains("Mild"));
        assert!(table.contains("Overall"));
    }

    #[test]
    fn report_with_equal_values_collapses() {
        let records = vec![
            rec("u1", "F01", Severity::Severe),
            rec("u2", "M05", Severity::ModSev),
        ];
        let per_utt = vec![("u1".to_string(), 0.25), ("u2".to_string(), 0.25)];
        let report = build_report(Metric::Mcd, &per_utt, &records).unwrap();
        assert!((report.overall - 0.25).abs() < 1e-12);
        // two speakers with 0.2 and 0.4 → overall 0.3
        let per_utt = vec![("u1".to_string(), 0.2), ("u2".to_string(), 0.4)];
        let report = build_report(Metric::Wer, &per_utt, &records).unwrap();
        assert!((report.overall - 0.3).abs() < 1e-12);
    }

    #[test]
    fn report_rejects_unknown_utterance() {
        let records = vec![rec("u1", "F01", Severity::Severe)];
        let per_utt = vec![("nope".to_string(), 0.1)];
        assert!(matches!(
            build_report(Metric::Wer, &per_utt, &records),
            Err(Error::UnknownUtterance(_))
        ));
    }
}
