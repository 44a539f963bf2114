//! Baseline-vs-full comparison on a corpus: trains the requested ablation
//! variants under each training strategy, synthesizes the validation split
//! with reference-mel style conditioning, and reports MCD per strategy
//! column, averaged over training seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    generate_toy_corpus, group_records, load_manifest, MelSpectrogram, Split, Strategy,
    ToyCorpusConfig, UtteranceRecord,
};
use crate::cpo::NormalProvider;
use crate::error::{Error, Result};
use crate::eval::{build_report, mcd, EvalReport, McdConfig, Metric};
use crate::train::trainer::corpus_dims;
use crate::Real;

use super::dataset::{prepare_records, speaker_table, PreparedUtt};
use super::synth::{synthesize, StyleSource};
use super::trainer::train_group;
use super::{AblationFlags, SpeakerEntry, TrainConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CorpusSource {
    /// Generate the synthetic corpus under the experiment directory.
    Generate {
        seed: u64,
        n_utts: usize,
        #[serde(default)]
        config: ToyCorpusConfig,
    },
    /// Use an existing manifest (normal-duration table alongside).
    Existing {
        manifest: PathBuf,
        normal_table: PathBuf,
    },
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Generate {
            seed: 7,
            n_utts: 300,
            config: ToyCorpusConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct VariantSpec {
    pub name: String,
    pub flags: AblationFlags,
    pub alpha: f64,
    pub beta: f64,
    pub strategies: Vec<Strategy>,
}

impl Default for VariantSpec {
    fn default() -> Self {
        VariantSpec {
            name: "e9".into(),
            flags: AblationFlags::full(),
            alpha: 0.7,
            beta: 0.3,
            strategies: vec![Strategy::ASp],
        }
    }
}

impl VariantSpec {
    pub fn preset(name: &str) -> Result<VariantSpec> {
        let (flags, alpha, beta) = match name {
            "e5" => (AblationFlags::baseline(), 0.7, 0.3),
            "e6" => (AblationFlags::rhythm_only(), 0.7, 0.3),
            "e7" => (AblationFlags::rhythm_cpo(), 0.5, 0.5),
            "e8" => (AblationFlags::rhythm_cpo(), 0.7, 0.3),
            "e9" => (AblationFlags::full(), 0.7, 0.3),
            other => {
                return Err(Error::Config(format!(
                    "unknown variant preset '{other}' (expected e5..e9)"
                )))
            }
        };
        Ok(VariantSpec {
            name: name.to_string(),
            flags,
            alpha,
            beta,
            strategies: vec![Strategy::ASp],
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantSpec>,
    pub synthesis_seed: u64,
    pub mcd: McdConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut e9 = VariantSpec::preset("e9").expect("preset");
        e9.strategies = vec![Strategy::ASp, Strategy::DSpG, Strategy::SSp];
        ExperimentConfig {
            corpus: CorpusSource::default(),
            train: TrainConfig::default(),
            seeds: vec![101, 202, 303],
            variants: vec![
                VariantSpec::preset("e5").expect("preset"),
                VariantSpec::preset("e6").expect("preset"),
                e9,
            ],
            synthesis_seed: 9000,
            mcd: McdConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

#[derive(Clone, Debug, Default)]
pub struct CellStats {
    /// Overall validation MCD (mean of per-speaker means) per training seed.
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

pub struct ExperimentResult {
    /// (variant name, strategy) → aggregated MCD.
    pub cells: BTreeMap<(String, Strategy), CellStats>,
    /// Baseline (first variant) on the primary strategy, per-utt values
    /// averaged over seeds.
    pub baseline_report: EvalReport,
    /// Full system (last variant) on the primary strategy.
    pub dars_report: EvalReport,
    /// Checkpoint directories per (seed, variant, strategy, group).
    pub checkpoints: Vec<ExperimentCheckpoint>,
    pub table: String,
}

#[derive(Clone, Debug)]
pub struct ExperimentCheckpoint {
    pub seed: u64,
    pub variant: String,
    pub strategy: Strategy,
    pub group_key: String,
    pub dir: PathBuf,
}

struct Job {
    seed_index: usize,
    seed: u64,
    variant: VariantSpec,
    strategy: Strategy,
    group_index: usize,
}

/// Runs the full grid and writes per-job artifacts below `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentResult> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if cfg.seeds.is_empty() || cfg.variants.is_empty() {
        return Err(Error::Config("experiment needs seeds and variants".into()));
    }

    // corpus
    let (manifest_path, normal_table) = match &cfg.corpus {
        CorpusSource::Generate {
            seed,
            n_utts,
            config,
        } => {
            let corpus_dir = out_dir.join("corpus");
            let out = generate_toy_corpus(*seed, *n_utts, config, &corpus_dir)?;
            (out.manifest_path, out.normal_table_path)
        }
        CorpusSource::Existing {
            manifest,
            normal_table,
        } => (manifest.clone(), normal_table.clone()),
    };
    let records = load_manifest(&manifest_path)?;
    let speakers = speaker_table(&records);
    let provider = NormalProvider::<Real>::from_table_file(&normal_table)?;
    let data = prepare_records::<Real>(
        &records,
        &manifest_path,
        &cfg.train.pause,
        Some(&provider),
        &speakers,
    )?;
    let (vocab_size, n_mels, frame_shift_s) = corpus_dims(&records, &data)?;

    // the job grid
    let mut jobs = Vec::new();
    for (seed_index, &seed) in cfg.seeds.iter().enumerate() {
        for variant in &cfg.variants {
            for &strategy in &variant.strategies {
                let groups = group_records(&records, strategy)?;
                for group_index in 0..groups.len() {
                    jobs.push(Job {
                        seed_index,
                        seed,
                        variant: variant.clone(),
                        strategy,
                        group_index,
                    });
                }
            }
        }
    }

    struct JobOutput {
        seed_index: usize,
        variant: String,
        strategy: Strategy,
        group_key: String,
        ckpt_dir: PathBuf,
        per_utt: Vec<(String, f64)>,
    }

    let outputs: Vec<JobOutput> = jobs
        .par_iter()
        .map(|job| -> Result<JobOutput> {
            let mut train_cfg = cfg.train.clone();
            train_cfg.flags = job.variant.flags;
            train_cfg.cpo.alpha = job.variant.alpha;
            train_cfg.cpo.beta = job.variant.beta;
            train_cfg.normal_table = Some(normal_table.display().to_string());

            let groups = group_records(&records, job.strategy)?;
            let group = &groups[job.group_index];
            let job_dir = out_dir
                .join(format!("seed{}", job.seed))
                .join(&job.variant.name)
                .join(format!("{}_{}", job.strategy.as_str(), group.group_key));

            let group_seed = job
                .seed
                .wrapping_mul(1000003)
                .wrapping_add(job.group_index as u64);
            let outcome = train_group(
                &train_cfg,
                group,
                &data,
                &speakers,
                vocab_size,
                n_mels,
                frame_shift_s,
                &job_dir,
                group_seed,
            )?;

            // evaluate on the group's validation split with reference-mel
            // style conditioning
            let ckpt = super::ckpt::load_checkpoint::<Real>(&outcome.ckpt_dir)?;
            let valid: Vec<&PreparedUtt<Real>> = data
                .iter()
                .filter(|u| {
                    u.record.split == Split::Valid
                        && group.records.iter().any(|r| r.utt_id == u.record.utt_id)
                })
                .collect();
            let mut per_utt = Vec::with_capacity(valid.len());
            for (ui, utt) in valid.iter().enumerate() {
                let reference = MelSpectrogram {
                    frames: utt.mel.clone(),
                    frame_shift_s: utt.frame_shift_s,
                };
                let style = if train_cfg.flags.style {
                    StyleSource::ReferenceMel(&reference)
                } else {
                    StyleSource::None
                };
                let syn = synthesize(
                    &ckpt,
                    &utt.tokens,
                    Some(utt.record.speaker_id.as_str()),
                    style,
                    cfg.synthesis_seed.wrapping_add(ui as u64),
                )?;
                let value = mcd(&reference, &syn, &cfg.mcd)?;
                per_utt.push((utt.record.utt_id.clone(), value));
            }
            Ok(JobOutput {
                seed_index: job.seed_index,
                variant: job.variant.name.clone(),
                strategy: job.strategy,
                group_key: group.group_key.clone(),
                ckpt_dir: outcome.ckpt_dir,
                per_utt,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // aggregate: per (variant, strategy, seed) pool the groups' per-utt
    // values, build a report, take its overall
    let mut pooled: BTreeMap<(String, Strategy, usize), Vec<(String, f64)>> = BTreeMap::new();
    let mut checkpoints = Vec::new();
    for out in &outputs {
        pooled
            .entry((out.variant.clone(), out.strategy, out.seed_index))
            .or_default()
            .extend(out.per_utt.iter().cloned());
        checkpoints.push(ExperimentCheckpoint {
            seed: cfg.seeds[out.seed_index],
            variant: out.variant.clone(),
            strategy: out.strategy,
            group_key: out.group_key.clone(),
            dir: out.ckpt_dir.clone(),
        });
    }

    let mut cells: BTreeMap<(String, Strategy), CellStats> = BTreeMap::new();
    for ((variant, strategy, seed_index), per_utt) in &pooled {
        let report = build_report(Metric::Mcd, per_utt, &records)?;
        let cell = cells
            .entry((variant.clone(), *strategy))
            .or_default();
        while cell.per_seed.len() <= *seed_index {
            cell.per_seed.push(f64::NAN);
        }
        cell.per_seed[*seed_index] = report.overall;
    }
    for cell in cells.values_mut() {
        cell.mean = cell.per_seed.iter().sum::<f64>() / cell.per_seed.len() as f64;
    }

    // baseline/full reports on the primary strategy: per-utt values averaged
    // across seeds
    let primary = Strategy::ASp;
    let report_for = |variant: &str| -> Result<EvalReport> {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for ((v, s, _), per_utt) in &pooled {
            if v == variant && *s == primary {
                for (utt, val) in per_utt {
                    let e = sums.entry(utt.clone()).or_insert((0.0, 0));
                    e.0 += val;
                    e.1 += 1;
                }
            }
        }
        let per_utt: Vec<(String, f64)> = sums
            .into_iter()
            .map(|(utt, (sum, n))| (utt, sum / n as f64))
            .collect();
        build_report(Metric::Mcd, &per_utt, &records)
    };
    let baseline_name = cfg.variants.first().expect("non-empty").name.clone();
    let dars_name = cfg.variants.last().expect("non-empty").name.clone();
    let baseline_report = report_for(&baseline_name)?;
    let dars_report = report_for(&dars_name)?;

    let table = render_table(cfg, &cells);
    let result = ExperimentResult {
        cells,
        baseline_report,
        dars_report,
        checkpoints,
        table,
    };
    Ok(result)
}

fn render_table(
    cfg: &ExperimentConfig,
    cells: &BTreeMap<(String, Strategy), CellStats>,
) -> String {
    let strategies = [Strategy::ASp, Strategy::DSpG, Strategy::SSp];
    let mut s = String::new();
    writeln!(
        s,
        "validation MCD (dB), mean over {} training seed(s)",
        cfg.seeds.len()
    )
    .unwrap();
    write!(s, "{:<12}", "model").unwrap();
    for st in strategies {
        write!(s, "{:>10}", st.as_str().to_uppercase()).unwrap();
    }
    s.push('\n');
    for variant in &cfg.variants {
        write!(s, "{:<12}", variant.name).unwrap();
        for st in strategies {
            match cells.get(&(variant.name.clone(), st)) {
                Some(c) => write!(s, "{:>10.4}", c.mean).unwrap(),
                None => write!(s, "{:>10}", "-").unwrap(),
            }
        }
        s.push('\n');
    }
    s
}

/// Full report text written by the CLI: the strategy table plus the
/// baseline/full severity breakdowns.
pub fn render_experiment_report(result: &ExperimentResult) -> String {
    let mut s = String::new();
    s.push_str(&result.table);
    s.push('\n');
    s.push_str("baseline (validation, ASp):\n");
    s.push_str(&result.baseline_report.render_table());
    s.push('\n');
    s.push_str("full system (validation, ASp):\n");
    s.push_str(&result.dars_report.render_table());
    s
}

/// Convenience accessor for acceptance checks.
impl ExperimentResult {
    pub fn mean_mcd(&self, variant: &str, strategy: Strategy) -> Option<f64> {
        self.cells
            .get(&(variant.to_string(), strategy))
            .map(|c| c.mean)
    }
}

