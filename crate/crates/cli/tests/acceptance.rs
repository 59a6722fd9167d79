//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass substrings as arguments to run a subset.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;

use ssml::adapt::{
    balance_subsample, build_support_set, ssml_finetune, supervised_finetune, AdaptConfig, PseudoSample, SupportSet,
};
use ssml::backbones::{build, BackboneKind, ModelSpec};
use ssml::data::{few_shot_sample, synth_generate, SynthConfig};
use ssml::gradcheck::{grad_check, GradCheckConfig};
use ssml::harness::{run_loso, wilcoxon_signed_rank, ExperimentConfig, ExperimentReport, Method};
use ssml::objectives::{update_centers, ClassCenters, Reduction};
use ssml::rng::{derive_seed, rng};
use ssml::tensor::Tensor;

const GRAD_SEEDS: u64 = 20;
const GRAD_TOL: f64 = 1e-4;
const GRAD_TOL_POOLED: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const ORACLE_INSTANCES: u64 = 50;
const BENCH_BUDGET: Duration = Duration::from_secs(600);
const ZERO_SHOT_RANGE: (f64, f64) = (0.70, 0.85);
const BENCH_SHOT: usize = 10;
const MIN_GAIN: f64 = 0.05;
const MONOTONE_SLACK: f64 = 0.01;
const MIN_WINNING_SEEDS: usize = 4;

const BENCHMARK_CFG: &str = include_str!("../../../configs/benchmark.cfg");

type Outcome = Result<String, String>;

fn random_tensor(r: &mut impl Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * r.sample::<f32, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn gradcheck() -> Outcome {
    let start = Instant::now();
    let mut worst = BTreeMap::new();
    for kind in [BackboneKind::Mlp, BackboneKind::Stnn, BackboneKind::Cnn] {
        let spec = ModelSpec::new(kind, 32, 128, 2);
        let tol = if kind == BackboneKind::Cnn { GRAD_TOL_POOLED } else { GRAD_TOL };
        for seed in 0..GRAD_SEEDS {
            let model = build(&spec, seed).map_err(|e| e.to_string())?;
            let mut r = rng(derive_seed(&[seed, 77]));
            // One sample keeps the float64 CNN reference inside the time budget.
            let labels: Vec<usize> = if kind == BackboneKind::Cnn { vec![seed as usize % 2] } else { vec![0, 1] };
            let x = random_tensor(&mut r, &[labels.len(), 32, 128], 1.0);
            // Centers near the features keep the loss, and its rounding error, small.
            let feats = model.forward(&x).map_err(|e| e.to_string())?.features;
            let mut near = random_tensor(&mut r, &[2, feats.shape()[1]], 0.1);
            for (i, &y) in labels.iter().enumerate() {
                let row = &mut near.data_mut()[y * feats.shape()[1]..(y + 1) * feats.shape()[1]];
                row.iter_mut().zip(feats.row(i)).for_each(|(c, f)| *c += f);
            }
            let centers = ClassCenters::from_tensor(near, 0.001, 0.001).map_err(|e| e.to_string())?;
            let cfg = GradCheckConfig {
                tol,
                seed,
                ..Default::default()
            };
            let report = grad_check(&model, &x, &labels, &centers, &cfg).map_err(|e| e.to_string())?;
            let dev = worst.entry(kind.to_string()).or_insert(0.0f64);
            *dev = dev.max(report.max_rel_dev());
            if !report.pass() {
                let bad: Vec<String> = report
                    .blocks
                    .iter()
                    .filter(|b| !b.pass)
                    .map(|b| format!("{} dev {:.2e} checked {}", b.name, b.max_rel_dev, b.checked))
                    .collect();
                return Err(format!("{kind} seed {seed}: {}", bad.join("; ")));
            }
        }
    }
    let elapsed = start.elapsed();
    let summary = format!("max rel dev {worst:?} in {:.1}s", elapsed.as_secs_f64());
    if elapsed > GRAD_BUDGET {
        return Err(format!("{summary}, over the {}s budget", GRAD_BUDGET.as_secs()));
    }
    Ok(summary)
}

fn centers_oracle(c: &ClassCenters, h: &Tensor, y: &[usize]) -> Vec<f32> {
    let (k, n) = (c.n_classes(), c.width());
    let mut out = c.tensor().data().to_vec();
    for j in 0..k {
        let members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == j).collect();
        if members.is_empty() {
            continue;
        }
        for d in 0..n {
            let cj = c.center(j)[d] as f64;
            let mut sum = 0.0f64;
            for &i in &members {
                sum += cj - h.row(i)[d] as f64;
            }
            out[j * n + d] = (cj - c.lr as f64 * (sum / (1.0 + members.len() as f64))) as f32;
        }
    }
    out
}

fn support_oracle(pseudo: &[PseudoSample], eps: f64, sigma: f64) -> Vec<PseudoSample> {
    let mut out = Vec::new();
    for p in pseudo {
        if p.confidence > eps && p.distance < sigma {
            out.push(*p);
        }
    }
    out
}

fn check_balance(q: &SupportSet, k: usize, max_batch: usize, seed: u64) -> Result<(), String> {
    let b = balance_subsample(q, k, max_batch, seed);
    let present: Vec<usize> = (0..q.class_counts.len()).filter(|&c| q.class_counts[c] > 0).collect();
    let per_class = present.iter().map(|&c| q.class_counts[c]).min().unwrap_or(0);
    let total = per_class * present.len();
    let want_batches = if total == 0 { 0 } else { k.max(total.div_ceil(max_batch)).min(total) };
    let drawn: Vec<&PseudoSample> = b.batches.iter().flatten().collect();
    if b.per_class != per_class || drawn.len() != total || b.batches.len() != want_batches {
        return Err(format!(
            "per_class {} vs {per_class}, total {} vs {total}, batches {} vs {want_batches}",
            b.per_class,
            drawn.len(),
            b.batches.len()
        ));
    }
    if b.single_class != (present.len() == 1) {
        return Err("single_class flag".into());
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut counts = vec![0; q.class_counts.len()];
    for s in &drawn {
        if !q.members.contains(s) || !seen.insert(s.index) {
            return Err(format!("sample {} not from Q or drawn twice", s.index));
        }
        counts[s.label] += 1;
    }
    if present.iter().any(|&c| counts[c] != per_class) {
        return Err(format!("class counts {counts:?}, want {per_class} each"));
    }
    let sizes: Vec<usize> = b.batches.iter().map(Vec::len).collect();
    if sizes.iter().max().unwrap_or(&0) - sizes.iter().min().unwrap_or(&0) > 1 {
        return Err(format!("uneven batches {sizes:?}"));
    }
    if balance_subsample(q, k, max_batch, seed) != b {
        return Err("not reproducible".into());
    }
    Ok(())
}

/// Two-sided p by enumerating all 2^n sign patterns of the average ranks.
fn wilcoxon_oracle(diffs: &[f64]) -> f64 {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nz.len();
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|&a| {
            let below = abs.iter().filter(|&&b| b < a).count() as f64;
            let tied = abs.iter().filter(|&&b| b == a).count() as f64;
            below + (tied + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let w = w_plus.min(total - w_plus);
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if s <= w {
            hits += 1;
        }
    }
    (2.0 * hits as f64 / (1u64 << n) as f64).min(1.0)
}

fn wilcoxon_instance(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(derive_seed(&[seed, 31]));
    let n = r.random_range(5..=12);
    let a: Vec<f64> = (0..n).map(|_| r.random_range(0..6) as f64 / 4.0).collect();
    let b: Vec<f64> = (0..n).map(|_| r.random_range(0..6) as f64 / 4.0).collect();
    (a, b)
}

fn oracles() -> Outcome {
    let mut wilcoxon_checked = 0;
    for seed in 0..ORACLE_INSTANCES {
        let mut r = rng(derive_seed(&[seed, 5]));
        let (k, n, m) = (r.random_range(2..5), r.random_range(1..9), r.random_range(1..20));
        let centers = ClassCenters::from_tensor(random_tensor(&mut r, &[k, n], 1.0), r.random_range(0.01..1.0), 0.001)
            .unwrap();
        let h = random_tensor(&mut r, &[m, n], 2.0);
        let y: Vec<usize> = (0..m).map(|_| r.random_range(0..k)).collect();
        let got = update_centers(&centers, &h, &y).map_err(|e| e.to_string())?;
        if got.tensor().data() != centers_oracle(&centers, &h, &y).as_slice() {
            return Err(format!("update_centers instance {seed}"));
        }

        let pseudo: Vec<PseudoSample> = (0..r.random_range(0..60))
            .map(|index| PseudoSample {
                index,
                label: r.random_range(0..k),
                confidence: r.random_range(0..5) as f64 / 4.0,
                distance: r.random_range(0..5) as f64 / 2.0,
            })
            .collect();
        let (eps, sigma) = (r.random_range(0..4) as f64 / 4.0, r.random_range(0..4) as f64 / 2.0);
        let q = build_support_set(&pseudo, eps, sigma, k);
        let want = support_oracle(&pseudo, eps, sigma);
        let mut want_counts = vec![0; k];
        want.iter().for_each(|p| want_counts[p.label] += 1);
        if q.members != want || q.class_counts != want_counts {
            return Err(format!("build_support_set instance {seed}"));
        }
        check_balance(&q, r.random_range(1..6), r.random_range(1..16), seed)
            .map_err(|e| format!("balance_subsample instance {seed}: {e}"))?;

        let (a, b) = wilcoxon_instance(seed);
        let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let nz = diffs.iter().filter(|d| **d != 0.0).count();
        match wilcoxon_signed_rank(&a, &b) {
            Ok(w) => {
                if w.p != wilcoxon_oracle(&diffs) {
                    return Err(format!("wilcoxon instance {seed}: p {} vs {}", w.p, wilcoxon_oracle(&diffs)));
                }
                wilcoxon_checked += 1;
            }
            Err(_) if (1..5).contains(&nz) => {}
            Err(e) => return Err(format!("wilcoxon instance {seed}: {e}")),
        }
    }
    Ok(format!(
        "{ORACLE_INSTANCES} instances each; wilcoxon compared on {wilcoxon_checked}"
    ))
}

fn shapes() -> Outcome {
    let x = Tensor::zeros(&[1, 32, 128]);
    let model = build(&ModelSpec::new(BackboneKind::Cnn, 32, 128, 2), 0).map_err(|e| e.to_string())?;
    let shapes: BTreeMap<String, Vec<usize>> = model
        .activation_shapes(&x)
        .map_err(|e| e.to_string())?
        .into_iter()
        .collect();
    let want = [
        ("conv1", vec![1, 16, 32, 113]),
        ("conv5", vec![1, 256, 1, 10]),
        ("features", vec![1, 2560]),
    ];
    for (name, shape) in &want {
        if shapes.get(*name) != Some(shape) {
            return Err(format!("{name}: {:?}, want {shape:?}", shapes.get(*name)));
        }
    }
    Ok(format!(
        "conv1 {:?}, conv5 {:?}, features {:?}",
        shapes["conv1"], shapes["conv5"], shapes["features"]
    ))
}

struct Bench {
    report: ExperimentReport,
    config: ExperimentConfig,
    elapsed: Duration,
}

fn run_benchmark() -> Result<Bench, String> {
    let config = ExperimentConfig::from_text(BENCHMARK_CFG).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let report = run_loso(&config).map_err(|e| e.to_string())?;
    Ok(Bench {
        report,
        config,
        elapsed: start.elapsed(),
    })
}

fn mean_of(report: &ExperimentReport, method: Method, shot: usize, seed: Option<u64>) -> f64 {
    let v: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.method == method && r.shot == shot && seed.is_none_or(|s| r.seed == s))
        .map(|r| r.accuracy)
        .collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn benchmark(bench: &Result<Bench, String>) -> Outcome {
    let b = bench.as_ref().map_err(Clone::clone)?;
    let r = &b.report;
    let wometa = mean_of(r, Method::WoMeta, 0, None);
    let maml = mean_of(r, Method::Maml, BENCH_SHOT, None);
    let s = mean_of(r, Method::Ssml, BENCH_SHOT, None);
    let line = format!(
        "WOMETA {wometa:.3}; {BENCH_SHOT}-shot SSML {s:.3} MAML {maml:.3}; {:.0}s",
        b.elapsed.as_secs_f64()
    );
    let ok = (ZERO_SHOT_RANGE.0..=ZERO_SHOT_RANGE.1).contains(&wometa)
        && s > maml
        && maml > wometa
        && s - wometa >= MIN_GAIN
        && b.elapsed <= BENCH_BUDGET;
    if ok {
        Ok(line)
    } else {
        Err(line)
    }
}

fn shot_curve(bench: &Result<Bench, String>) -> Outcome {
    let b = bench.as_ref().map_err(Clone::clone)?;
    let r = &b.report;
    let shots = &b.config.shots;
    let curve: Vec<f64> = shots.iter().map(|&k| mean_of(r, Method::Ssml, k, None)).collect();
    let monotone = curve.windows(2).all(|p| p[1] >= p[0] - MONOTONE_SLACK);
    let winning: Vec<u64> = b
        .config
        .seeds
        .iter()
        .copied()
        .filter(|&seed| {
            let base = mean_of(r, Method::WoMeta, 0, Some(seed));
            shots.iter().all(|&k| {
                mean_of(r, Method::Ssml, k, Some(seed)) - base > mean_of(r, Method::Maml, k, Some(seed)) - base
            })
        })
        .collect();
    let curve_text: Vec<String> = shots.iter().zip(&curve).map(|(k, a)| format!("{k}:{a:.3}")).collect();
    let line = format!(
        "SSML curve [{}]; seeds beating MAML at every shot {winning:?}",
        curve_text.join(" ")
    );
    if monotone && winning.len() >= MIN_WINNING_SEEDS {
        Ok(line)
    } else {
        Err(line)
    }
}

fn epsilon_one() -> Outcome {
    let data = synth_generate(&SynthConfig {
        n_subjects: 1,
        channels: 8,
        time_len: 64,
        samples_per_subject: 40,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let mut checked = 0;
    for kind in [BackboneKind::Mlp, BackboneKind::Stnn, BackboneKind::Cnn] {
        let spec = ModelSpec {
            cnn_first_kernel: 4,
            ..ModelSpec::new(kind, 8, 64, 2)
        };
        let model = build(&spec, 3).map_err(|e| e.to_string())?;
        let centers = ClassCenters::from_tensor(
            Tensor::full(&[2, model.feature_width()], 0.1),
            0.5,
            0.001,
        )
        .unwrap();
        for shot in [1, 5] {
            let split = few_shot_sample(&data[0], shot, 0.25, 9).map_err(|e| e.to_string())?;
            for reduction in [Reduction::Mean, Reduction::Sum] {
                let cfg = AdaptConfig {
                    epsilon: 1.0,
                    n_shot: shot,
                    reduction,
                    seed: 4,
                    ..Default::default()
                };
                let a = ssml_finetune(&model, &centers, &split.labeled, &split.unlabeled, &cfg, Some(&split.eval))
                    .map_err(|e| e.to_string())?;
                let b = supervised_finetune(&model, &centers, &split.labeled, &cfg, Some(&split.eval))
                    .map_err(|e| e.to_string())?;
                let same = a.params.tensors().iter().zip(b.params.tensors()).all(|(x, y)| {
                    x.data().iter().map(|v| v.to_bits()).eq(y.data().iter().map(|v| v.to_bits()))
                }) && a.centers.tensor().data().iter().map(|v| v.to_bits()).eq(b.centers.tensor().data().iter().map(|v| v.to_bits()));
                if !same {
                    return Err(format!("{kind} {shot}-shot {reduction:?}: parameters differ"));
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} configurations bitwise identical"))
}

fn wilcoxon_exact() -> Outcome {
    let w = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).map_err(|e| e.to_string())?;
    if w.p != 0.0625 || !w.exact {
        return Err(format!("five positive differences gave p = {}", w.p));
    }
    let mut compared = 0;
    for seed in 0..200 {
        let (a, b) = wilcoxon_instance(seed + 1000);
        let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        if let Ok(res) = wilcoxon_signed_rank(&a, &b) {
            if res.n > 0 && res.p != wilcoxon_oracle(&diffs) {
                return Err(format!("instance {seed}: p {} vs enumeration {}", res.p, wilcoxon_oracle(&diffs)));
            }
            compared += 1;
        }
    }
    Ok(format!("p = 0.0625; {compared} tied instances match enumeration"))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ssml"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    Ok(())
}

fn read_dir_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let base = [
        "--set", "synth.n_subjects=5",
        "--set", "synth.channels=6",
        "--set", "synth.time_len=24",
        "--set", "synth.samples_per_subject=40",
        "--set", "meta.max_epochs=3",
        "--set", "experiment.shots=0,2",
        "--set", "experiment.seeds=0,1",
    ];
    let mut runs = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "1"), ("c", "3")] {
        let dir = tmp.path().join(name);
        let mut args = vec!["loso", "--threads", threads, "--out-dir", dir.to_str().unwrap()];
        args.extend(base);
        run_cli(&args)?;
        runs.push(read_dir_files(&dir));
    }
    if runs[0].is_empty() {
        return Err("no CSVs written".into());
    }
    for (i, r) in runs.iter().enumerate().skip(1) {
        if r != &runs[0] {
            return Err(format!("run {i} differs from run 0"));
        }
    }
    Ok(format!("{} CSVs identical across 3 runs (1, 1 and 3 threads)", runs[0].len()))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let bench = (wanted("4 benchmark") || wanted("5 shot_curve")).then(run_benchmark);
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let checks: [(&str, fn() -> Outcome); 6] = [
        ("1 gradcheck", gradcheck),
        ("2 oracles", oracles),
        ("3 shapes", shapes),
        ("6 epsilon_one", epsilon_one),
        ("7 wilcoxon_exact", wilcoxon_exact),
        ("8 cli_determinism", cli_determinism),
    ];
    for (name, f) in checks.iter().take(3) {
        if wanted(name) {
            results.push((name, f()));
        }
    }
    if let Some(bench) = &bench {
        if wanted("4 benchmark") {
            results.push(("4 benchmark", benchmark(bench)));
        }
        if wanted("5 shot_curve") {
            results.push(("5 shot_curve", shot_curve(bench)));
        }
    }
    for (name, f) in checks.iter().skip(3) {
        if wanted(name) {
            results.push((name, f()));
        }
    }
    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
