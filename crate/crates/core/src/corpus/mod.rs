//! Corpus handling: manifest ingestion, speaker/severity grouping into the
//! training strategies, mel and alignment file I/O, and the deterministic
//! synthetic pseudo-dysarthric corpus generator.

mod align_io;
mod manifest;
mod mel;
mod toy;

pub use align_io::{load_alignment, save_alignment, AlignToken, TokenKind};
pub use manifest::{load_manifest, resolve_path, save_manifest};
pub use mel::MelSpectrogram;
pub use toy::{
    base_duration, generate_toy_corpus, load_normal_table, pause_site, SeverityProfile,
    SeverityProfiles, ToyCorpusConfig, ToyCorpusOutput, TOY_CONTROLS, TOY_SPEAKERS,
};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;

use crate::error::{Error, Result};

/// Dysarthria severity levels, plus healthy controls.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Severity {
    Severe,
    ModSev,
    Moderate,
    Mild,
    Control,
}

impl Severity {
    pub const DYSARTHRIC: [Severity; 4] = [
        Severity::Severe,
        Severity::ModSev,
        Severity::Moderate,
        Severity::Mild,
    ];

    /// Canonical manifest token.
    pub fn as_str(&self) -> &'static str {
        match self {
            Severity::Severe => "Severe",
            Severity::ModSev => "ModSev",
            Severity::Moderate => "Moderate",
            Severity::Mild => "Mild",
            Severity::Control => "Control",
        }
    }

    /// Column header used in report tables.
    pub fn display_name(&self) -> &'static str {
        match self {
            Severity::Severe => "Severe",
            Severity::ModSev => "Mod.-Sev.",
            Severity::Moderate => "Moderate",
            Severity::Mild => "Mild",
            Severity::Control => "Control",
        }
    }

    pub fn parse(s: &str) -> Result<Severity> {
        match s.to_ascii_lowercase().as_str() {
            "severe" => Ok(Severity::Severe),
            "modsev" | "mod-sev" | "mod.-sev." | "mod_sev" => Ok(Severity::ModSev),
            "moderate" => Ok(Severity::Moderate),
            "mild" => Ok(Severity::Mild),
            "control" => Ok(Severity::Control),
            other => Err(Error::Validation(format!("unknown severity '{other}'"))),
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Eval,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Validation(format!("unknown split '{other}'"))),
        }
    }
}

/// One manifest line: an utterance with its phonemes, mel and alignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub speaker_id: String,
    pub severity: Severity,
    pub phonemes: Vec<usize>,
    pub mel_path: PathBuf,
    pub alignment_path: PathBuf,
    pub split: Split,
}

impl UtteranceRecord {
    pub fn validate(&self) -> Result<()> {
        if self.phonemes.is_empty() {
            return Err(Error::Validation(format!(
                "utterance {} has an empty phoneme sequence",
                self.utt_id
            )));
        }
        Ok(())
    }
}

/// Training strategies over the corpus.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// All dysarthric speakers pooled into one model.
    ASp,
    /// One model per dysarthric speaker.
    SSp,
    /// One model per severity group.
    DSpG,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::ASp => "asp",
            Strategy::SSp => "ssp",
            Strategy::DSpG => "dspg",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy> {
        match s.to_ascii_lowercase().as_str() {
            "asp" => Ok(Strategy::ASp),
            "ssp" => Ok(Strategy::SSp),
            "dspg" => Ok(Strategy::DSpG),
            other => Err(Error::Config(format!("unknown strategy '{other}'"))),
        }
    }
}

/// A group of records trained as one model.
#[derive(Clone, Debug)]
pub struct TrainingGroup {
    pub strategy: Strategy,
    pub group_key: String,
    pub records: Vec<UtteranceRecord>,
}

/// Partitions dysarthric records by strategy. Control speakers are excluded:
/// the TTS models train on dysarthric speech only. Group order is stable
/// (severity order for DSpG, first appearance for SSp).
pub fn group_records(records: &[UtteranceRecord], strategy: Strategy) -> Result<Vec<TrainingGroup>> {
    let dys: Vec<&UtteranceRecord> = records
        .iter()
        .filter(|r| r.severity != Severity::Control)
        .collect();
    if dys.is_empty() {
        return Err(Error::Validation(
            "no dysarthric records to group".to_string(),
        ));
    }
    let groups = match strategy {
        Strategy::ASp => vec![TrainingGroup {
            strategy,
            group_key: "all".to_string(),
            records: dys.iter().map(|r| (*r).clone()).collect(),
        }],
        Strategy::SSp => {
            let mut order: Vec<String> = Vec::new();
            for r in &dys {
                if !order.contains(&r.speaker_id) {
                    order.push(r.speaker_id.clone());
                }
            }
            order
                .into_iter()
                .map(|spk| TrainingGroup {
                    strategy,
                    group_key: spk.clone(),
                    records: dys
                        .iter()
                        .filter(|r| r.speaker_id == spk)
                        .map(|r| (*r).clone())
                        .collect(),
                })
                .collect()
        }
        Strategy::DSpG => Severity::DYSARTHRIC
            .iter()
            .filter_map(|&sev| {
                let records: Vec<UtteranceRecord> = dys
                    .iter()
                    .filter(|r| r.severity == sev)
                    .map(|r| (*r).clone())
                    .collect();
                if records.is_empty() {
                    None
                } else {
                    Some(TrainingGroup {
                        strategy,
                        group_key: sev.as_str().to_string(),
                        records,
                    })
                }
            })
            .collect(),
    };
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(utt: &str, spk: &str, sev: Severity) -> UtteranceRecord {
        UtteranceRecord {
            utt_id: utt.to_string(),
            speaker_id: spk.to_string(),
            severity: sev,
            phonemes: vec![1, 2],
            mel_path: PathBuf::from("x.mel"),
            alignment_path: PathBuf::from("x.align"),
            split: Split::Train,
        }
    }

    fn torgo_shaped() -> Vec<UtteranceRecord> {
        // 8 dysarthric speakers over 4 severities, 2 utts each
        let spk = [
            ("F01", Severity::Severe),
            ("M01", Severity::Severe),
            ("M02", Severity::Severe),
            ("M04", Severity::Severe),
            ("M05", Severity::ModSev),
            ("F03", Severity::Moderate),
            ("F04", Severity::Mild),
            ("M03", Severity::Mild),
        ];
        let mut out = Vec::new();
        for (s, sev) in spk {
            for i in 0..2 {
                out.push(rec(&format!("{s}_{i}"), s, sev));
            }
        }
        out
    }

    #[test]
    fn dspg_gives_four_severity_groups() {
        let groups = group_records(&torgo_shaped(), Strategy::DSpG).unwrap();
        let keys: Vec<&str> = groups.iter().map(|g| g.group_key.as_str()).collect();
        assert_eq!(keys, ["Severe", "ModSev", "Moderate", "Mild"]);
    }

    #[test]
    fn ssp_gives_eight_speaker_groups() {
        let groups = group_records(&torgo_shaped(), Strategy::SSp).unwrap();
        assert_eq!(groups.len(), 8);
        for g in &groups {
            assert!(g.records.iter().all(|r| r.speaker_id == g.group_key));
        }
    }

    #[test]
    fn asp_gives_one_group_with_everything() {
        let recs = torgo_shaped();
        let groups = group_records(&recs, Strategy::ASp).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].records.len(), recs.len());
    }

    #[test]
    fn grouping_partitions_input() {
        let recs = torgo_shaped();
        for strategy in [Strategy::ASp, Strategy::SSp, Strategy::DSpG] {
            let groups = group_records(&recs, strategy).unwrap();
            let mut seen: Vec<String> = groups
                .iter()
                .flat_map(|g| &g.records)
                .map(|r| r.utt_id.clone())
                .collect();
            seen.sort();
            let mut expect: Vec<String> = recs.iter().map(|r| r.utt_id.clone()).collect();
            expect.sort();
            assert_eq!(seen, expect, "{strategy:?} must partition the records");
        }
    }

    #[test]
    fn controls_are_excluded_from_groups() {
        let mut recs = torgo_shaped();
        recs.push(rec("C_0", "FC01", Severity::Control));
        let groups = group_records(&recs, Strategy::SSp).unwrap();
        assert_eq!(groups.len(), 8);
        assert!(groups.iter().all(|g| g.group_key != "FC01"));
    }
}
