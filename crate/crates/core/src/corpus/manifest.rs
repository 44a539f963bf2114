//! Manifest format: UTF-8, one record per line, tab-separated fields
//! `utt_id  speaker_id  severity  phoneme_ids  mel_path  alignment_path  split`
//! with phoneme ids space-separated.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::{Severity, Split, UtteranceRecord};

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<UtteranceRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let pathstr = path.display().to_string();

    let mut records = Vec::new();
    let mut seen_ids: BTreeMap<String, usize> = BTreeMap::new();
    let mut speaker_severity: BTreeMap<String, (Severity, usize)> = BTreeMap::new();

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: pathstr.clone(),
            line: lineno,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(parse_err(format!(
                "expected 7 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let utt_id = fields[0].to_string();
        let speaker_id = fields[1].to_string();
        let severity = Severity::parse(fields[2]).map_err(|e| parse_err(e.to_string()))?;
        let phonemes: Vec<usize> = fields[3]
            .split_whitespace()
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|_| parse_err(format!("bad phoneme id '{tok}'")))
            })
            .collect::<Result<_>>()?;
        let mel_path = PathBuf::from(fields[4]);
        let alignment_path = PathBuf::from(fields[5]);
        let split = Split::parse(fields[6]).map_err(|e| parse_err(e.to_string()))?;

        if let Some(prev) = seen_ids.insert(utt_id.clone(), lineno) {
            return Err(Error::Validation(format!(
                "duplicate utt_id '{utt_id}' at lines {prev} and {lineno}"
            )));
        }
        match speaker_severity.get(&speaker_id) {
            Some(&(sev, first_line)) if sev != severity => {
                return Err(Error::Validation(format!(
                    "speaker {speaker_id} has severity {sev} at line {first_line} but {severity} at line {lineno}"
                )));
            }
            None => {
                speaker_severity.insert(speaker_id.clone(), (severity, lineno));
            }
            _ => {}
        }

        let record = UtteranceRecord {
            utt_id,
            speaker_id,
            severity,
            phonemes,
            mel_path,
            alignment_path,
            split,
        };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

pub fn save_manifest(path: impl AsRef<Path>, records: &[UtteranceRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        let ids: Vec<String> = r.phonemes.iter().map(|p| p.to_string()).collect();
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.utt_id,
            r.speaker_id,
            r.severity.as_str(),
            ids.join(" "),
            r.mel_path.display(),
            r.alignment_path.display(),
            r.split.as_str()
        )
        .expect("write to vec");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Resolves a record-relative path against the manifest's directory.
pub fn resolve_path(manifest_path: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(p)
    }
}
