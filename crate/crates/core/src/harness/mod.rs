//! Leave-one-subject-out experiments comparing the three methods across shot
//! counts, with paired statistics and CSV reports.

mod config;
mod stats;

pub use config::{DataSource, ExperimentConfig, Method};
pub use stats::{accuracy, average_ranks, wilcoxon_signed_rank, Wilcoxon, EXACT_MAX_N, MIN_N};

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::adapt::{ssml_finetune, supervised_finetune, AdaptConfig};
use crate::backbones::{ModelParams, ModelSpec};
use crate::data::{few_shot_sample, load_datasets, loso_split, synth_generate, FewShotSplit, SubjectDataset};
use crate::error::{Error, Result};
use crate::meta::{accuracy_of, pretrain};
use crate::rng::derive_seed;
use crate::tensor::fnv;

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub method: Method,
    /// 0 for WOMETA.
    pub shot: usize,
    pub target: String,
    pub seed: u64,
    pub accuracy: f64,
}

/// What one method consumed in one cell, for checking the paired design.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairingTrace {
    pub target: String,
    pub seed: u64,
    pub method: Method,
    pub shot: usize,
    pub start_checksum: u64,
    pub eval_checksum: u64,
    pub split_checksum: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub method: Method,
    pub shot: usize,
    pub mean_accuracy: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Improvement {
    pub method: Method,
    pub shot: usize,
    /// Mean paired difference to WOMETA, in accuracy points.
    pub points: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedTest {
    pub shot: usize,
    pub method: Method,
    pub baseline: Method,
    pub result: std::result::Result<Wilcoxon, String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<Row>,
    pub traces: Vec<PairingTrace>,
}

fn split_checksum(split: &FewShotSplit) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325;
    for part in [&split.labeled.indices, &split.unlabeled.indices] {
        for &i in part.iter() {
            h = fnv(h, &(i as u64).to_le_bytes());
        }
        h = fnv(h, b"|");
    }
    h
}

fn indices_checksum(idx: &[usize]) -> u64 {
    idx.iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, &i| fnv(h, &(i as u64).to_le_bytes()))
}

pub fn load_data(config: &ExperimentConfig) -> Result<Vec<SubjectDataset>> {
    match &config.data {
        DataSource::Synth(s) => synth_generate(s),
        DataSource::File(p) => load_datasets(p),
    }
}

/// The configured architecture sized for `datasets`.
pub fn model_spec_for(config: &ExperimentConfig, datasets: &[SubjectDataset]) -> Result<ModelSpec> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::Data("no subjects in the dataset".into()))?;
    let mut spec = config.model.clone();
    spec.channels = first.channels();
    spec.time_len = first.time_len();
    spec.n_classes = first.n_classes();
    Ok(spec)
}

fn run_cell(
    config: &ExperimentConfig,
    datasets: &[SubjectDataset],
    spec: &ModelSpec,
    target: usize,
    seed: u64,
) -> Result<(Vec<Row>, Vec<PairingTrace>)> {
    let split = loso_split(datasets, target)?;
    let tgt = split.target;
    let cell = derive_seed(&[seed, target as u64]);
    let pre = pretrain(spec, &split.sources, &config.meta, derive_seed(&[cell, 1]))?;
    let start = pre.params.checksum();
    let split_seed = derive_seed(&[cell, 2]);
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    let row = |method: Method, shot: usize, acc: f64| Row {
        method,
        shot,
        target: tgt.subject_id.clone(),
        seed,
        accuracy: acc,
    };
    let trace = |method: Method, shot: usize, fs: &FewShotSplit| PairingTrace {
        target: tgt.subject_id.clone(),
        seed,
        method,
        shot,
        start_checksum: start,
        eval_checksum: indices_checksum(&fs.eval.indices),
        split_checksum: split_checksum(fs),
    };
    let eval_acc = |model: &ModelParams, fs: &FewShotSplit| -> Result<f64> {
        let x = fs
            .eval
            .samples
            .as_ref()
            .ok_or_else(|| Error::Data(format!("subject {}: evaluation set is empty", tgt.subject_id)))?;
        accuracy_of(model, x, &fs.eval.labels)
    };

    if config.methods.contains(&Method::WoMeta) {
        let fs = few_shot_sample(tgt, 0, config.eval_fraction, split_seed)?;
        rows.push(row(Method::WoMeta, 0, eval_acc(&pre.params, &fs)?));
        traces.push(trace(Method::WoMeta, 0, &fs));
    }
    for &shot in &config.shots {
        let fs = few_shot_sample(tgt, shot, config.eval_fraction, split_seed)?;
        let adapt = AdaptConfig {
            n_shot: shot,
            seed: derive_seed(&[cell, 3, shot as u64]),
            ..config.adapt.clone()
        };
        for &method in &config.methods {
            let acc = match method {
                Method::WoMeta => continue,
                Method::Maml if shot == 0 => eval_acc(&pre.params, &fs)?,
                Method::Maml => {
                    let out = supervised_finetune(&pre.params, &pre.centers, &fs.labeled, &adapt, None)?;
                    eval_acc(&out.params, &fs)?
                }
                Method::Ssml => {
                    let out = ssml_finetune(&pre.params, &pre.centers, &fs.labeled, &fs.unlabeled, &adapt, None)?;
                    eval_acc(&out.params, &fs)?
                }
            };
            rows.push(row(method, shot, acc));
            traces.push(trace(method, shot, &fs));
        }
    }
    Ok((rows, traces))
}

/// Runs every (target, seed) cell of the grid on `datasets`.
pub fn run_loso_on(config: &ExperimentConfig, datasets: &[SubjectDataset]) -> Result<ExperimentReport> {
    config.validate()?;
    if datasets.len() < 2 {
        return Err(Error::Data(format!("LOSO needs at least 2 subjects, got {}", datasets.len())));
    }
    let spec = model_spec_for(config, datasets)?;
    let targets: Vec<usize> = match &config.targets {
        Some(t) => t.clone(),
        None => (0..datasets.len()).collect(),
    };
    if let Some(&bad) = targets.iter().find(|&&t| t >= datasets.len()) {
        return Err(Error::Index(format!("target {bad} out of range for {} subjects", datasets.len())));
    }
    let cells: Vec<(usize, u64)> = targets
        .iter()
        .flat_map(|&t| config.seeds.iter().map(move |&s| (t, s)))
        .collect();
    let run = || -> Vec<Result<(Vec<Row>, Vec<PairingTrace>)>> {
        cells
            .par_iter()
            .map(|&(t, s)| {
                run_cell(config, datasets, &spec, t, s)
                    .map_err(|e| e.context(format!("target {} seed {s}", datasets[t].subject_id)))
            })
            .collect()
    };
    let results = match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    let order: BTreeMap<&str, usize> = datasets.iter().enumerate().map(|(i, d)| (d.subject_id.as_str(), i)).collect();
    let mut report = ExperimentReport::default();
    for r in results {
        let (rows, traces) = r?;
        report.rows.extend(rows);
        report.traces.extend(traces);
    }
    report
        .rows
        .sort_by_key(|r| (r.method, r.shot, order[r.target.as_str()], r.seed));
    Ok(report)
}

pub fn run_loso(config: &ExperimentConfig) -> Result<ExperimentReport> {
    run_loso_on(config, &load_data(config)?)
}

impl ExperimentReport {
    pub fn from_rows(rows: Vec<Row>) -> Self {
        ExperimentReport { rows, traces: Vec::new() }
    }

    pub fn summary(&self) -> Vec<Summary> {
        let mut acc: BTreeMap<(Method, usize), (f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            let e = acc.entry((r.method, r.shot)).or_default();
            e.0 += r.accuracy;
            e.1 += 1;
        }
        acc.into_iter()
            .map(|((method, shot), (sum, n))| Summary {
                method,
                shot,
                mean_accuracy: sum / n as f64,
                n,
            })
            .collect()
    }

    pub fn mean(&self, method: Method, shot: usize) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|s| s.method == method && s.shot == shot)
            .map(|s| s.mean_accuracy)
    }

    /// Accuracy per (target, seed) for one method and shot.
    pub fn cell_map(&self, method: Method, shot: usize) -> BTreeMap<(String, u64), f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.shot == shot)
            .map(|r| ((r.target.clone(), r.seed), r.accuracy))
            .collect()
    }

    /// Mean paired improvement over WOMETA per method and shot.
    pub fn improvement_table(&self) -> Result<Vec<Improvement>> {
        let base = self.cell_map(Method::WoMeta, 0);
        if base.is_empty() {
            return Err(Error::Data("report has no WOMETA rows to compare against".into()));
        }
        let mut out = Vec::new();
        for s in self.summary().into_iter().filter(|s| s.method != Method::WoMeta) {
            let mut sum = 0.0;
            let mut n = 0;
            for (key, acc) in self.cell_map(s.method, s.shot) {
                let b = base
                    .get(&key)
                    .ok_or_else(|| Error::Data(format!("no WOMETA row for target {} seed {}", key.0, key.1)))?;
                sum += 100.0 * (acc - b);
                n += 1;
            }
            out.push(Improvement {
                method: s.method,
                shot: s.shot,
                points: sum / n as f64,
                n,
            });
        }
        Ok(out)
    }

    /// Seed-averaged accuracy per target.
    fn per_target(&self, method: Method, shot: usize) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.method == method && r.shot == shot) {
            let e = acc.entry(r.target.clone()).or_default();
            e.0 += r.accuracy;
            e.1 += 1;
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    /// Signed-rank tests of SSML against each baseline at every SSML shot,
    /// paired over target subjects after averaging over seeds.
    pub fn paired_tests(&self) -> Vec<PairedTest> {
        let mut out = Vec::new();
        let shots: Vec<usize> = self
            .summary()
            .iter()
            .filter(|s| s.method == Method::Ssml)
            .map(|s| s.shot)
            .collect();
        for shot in shots {
            let ssml = self.per_target(Method::Ssml, shot);
            for (baseline, bshot) in [(Method::Maml, shot), (Method::WoMeta, 0)] {
                let base = self.per_target(baseline, bshot);
                if base.is_empty() {
                    continue;
                }
                let (a, b): (Vec<f64>, Vec<f64>) = ssml
                    .iter()
                    .filter_map(|(t, &x)| base.get(t).map(|&y| (x, y)))
                    .unzip();
                out.push(PairedTest {
                    shot,
                    method: Method::Ssml,
                    baseline,
                    result: wilcoxon_signed_rank(&a, &b).map_err(|e| e.to_string()),
                });
            }
        }
        out
    }
}

fn fmt_acc(v: f64) -> String {
    format!("{v:.6}")
}

pub fn write_rows_csv(path: &Path, report: &ExperimentReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "shot", "target", "seed", "accuracy"])?;
    for r in &report.rows {
        w.write_record([
            r.method.to_string(),
            r.shot.to_string(),
            r.target.clone(),
            r.seed.to_string(),
            fmt_acc(r.accuracy),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<Row>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 5 {
            return Err(Error::Format(format!("{} line {}: expected 5 fields", path.display(), i + 2)));
        }
        let field = |j: usize| rec.get(j).unwrap_or_default();
        let bad = |what: &str| Error::Format(format!("{} line {}: bad {what}", path.display(), i + 2));
        rows.push(Row {
            method: field(0).parse()?,
            shot: field(1).parse().map_err(|_| bad("shot"))?,
            target: field(2).to_string(),
            seed: field(3).parse().map_err(|_| bad("seed"))?,
            accuracy: field(4).parse().map_err(|_| bad("accuracy"))?,
        });
    }
    Ok(rows)
}

pub fn write_summary_csv(path: &Path, report: &ExperimentReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "shot", "mean_accuracy", "n"])?;
    for s in report.summary() {
        w.write_record([s.method.to_string(), s.shot.to_string(), fmt_acc(s.mean_accuracy), s.n.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_improvement_csv(path: &Path, table: &[Improvement]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "shot", "improvement_points", "n"])?;
    for i in table {
        w.write_record([i.method.to_string(), i.shot.to_string(), format!("{:.4}", i.points), i.n.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_tests_csv(path: &Path, tests: &[PairedTest]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["shot", "method", "baseline", "n", "w", "p", "exact", "degenerate", "note"])?;
    for t in tests {
        let mut rec = vec![t.shot.to_string(), t.method.to_string(), t.baseline.to_string()];
        match &t.result {
            Ok(r) => rec.extend([
                r.n.to_string(),
                format!("{}", r.w),
                format!("{:.6}", r.p),
                u8::from(r.exact).to_string(),
                u8::from(r.degenerate).to_string(),
                String::new(),
            ]),
            Err(e) => rec.extend([String::new(), String::new(), String::new(), String::new(), String::new(), e.clone()]),
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `subject_id,label,h_1..h_n` for every sample of every subject.
pub fn export_features(model: &ModelParams, datasets: &[SubjectDataset], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n = model.feature_width();
    let mut header = vec!["subject_id".to_string(), "label".to_string()];
    header.extend((1..=n).map(|i| format!("h_{i}")));
    w.write_record(&header)?;
    for d in datasets {
        let out = model.forward(d.samples())?;
        for (i, &y) in d.labels().iter().enumerate() {
            let mut rec = Vec::with_capacity(n + 2);
            rec.push(d.subject_id.clone());
            rec.push(y.to_string());
            rec.extend(out.features.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: Method, shot: usize, target: &str, seed: u64, accuracy: f64) -> Row {
        Row {
            method,
            shot,
            target: target.into(),
            seed,
            accuracy,
        }
    }

    #[test]
    fn improvement_points() {
        let rep = ExperimentReport::from_rows(vec![
            row(Method::WoMeta, 0, "s1", 0, 0.80),
            row(Method::Ssml, 5, "s1", 0, 0.95),
            row(Method::Maml, 5, "s1", 0, 0.80),
        ]);
        let t = rep.improvement_table().unwrap();
        let ssml = t.iter().find(|i| i.method == Method::Ssml).unwrap();
        assert!((ssml.points - 15.0).abs() < 1e-9);
        let maml = t.iter().find(|i| i.method == Method::Maml).unwrap();
        assert_eq!(maml.points, 0.0);
    }

    #[test]
    fn missing_baseline_is_error() {
        let rep = ExperimentReport::from_rows(vec![row(Method::Ssml, 5, "s1", 0, 0.9)]);
        assert!(rep.improvement_table().is_err());
    }
}
