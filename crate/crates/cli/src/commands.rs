//! The `train`, `solve`, `bench` and `check` commands.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use learnprox::datasets::{
    load_idx, load_image_dir, load_image_file, save_image_file, synthetic_images, Dataset, ShapeMix,
};
use learnprox::error::{Error, Result};
use learnprox::imagery::{psnr, Image};
use learnprox::neuralnet::ProjectionNetwork;
use learnprox::priors::ProxOperator;
use learnprox::solvers::{admm_solve, format_float};
use learnprox::tensor::Tensor;
use learnprox::training::{metrics_to_csv, train_with_progress, StepMetrics, TrainOutcome};

use crate::checks::{run_check, CheckKind, CheckReport};
use crate::config::{DataConfig, ExperimentConfig, PriorKind, TaskKind};
use crate::tasks::{build_prior, TaskSetup};

pub const MODEL_FILE: &str = "model.prxa";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const BENCH_FILE: &str = "bench.csv";
pub const TIMING_FILE: &str = "bench_timing.csv";

pub fn load_dataset(data: &DataConfig, seed: u64) -> Result<Dataset> {
    match &data.images {
        Some(p) if p.is_dir() => load_image_dir(p),
        Some(p) => load_idx(p, data.labels.as_deref()),
        None => synthetic_images(data.synthetic_count, data.synthetic_size, seed, ShapeMix::Mixed),
    }
}

/// Disjoint train, validation and test sets drawn in the data-seed order.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Image>,
    pub val: Vec<Image>,
    pub test: Vec<Image>,
}

pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let seed = cfg.seeds.data;
    let ds = load_dataset(&cfg.data, seed)?;
    let d = &cfg.data;
    let mut parts = ds.split(seed, &[d.train_count, d.val_count, d.test_count])?.into_iter();
    Ok(Splits { train: parts.next().unwrap(), val: parts.next().unwrap(), test: parts.next().unwrap() })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

#[derive(Debug)]
pub struct TrainReport {
    pub outcome: TrainOutcome,
    pub model_path: PathBuf,
    pub metrics_path: PathBuf,
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, progress: &mut dyn FnMut(&StepMetrics)) -> Result<TrainReport> {
    let splits = load_splits(cfg)?;
    let tc = cfg.train.resolve(cfg.seeds.training);
    let outcome = train_with_progress(&splits.train, &splits.val, &tc, progress)?;
    create_dir(out)?;
    let model_path = out.join(MODEL_FILE);
    outcome.projector.save(&model_path)?;
    let metrics_path = out.join(METRICS_FILE);
    write_file(&metrics_path, cfg.csv_comment() + &metrics_to_csv(&outcome.metrics))?;
    Ok(TrainReport { outcome, model_path, metrics_path })
}

pub fn load_model(cfg: &ExperimentConfig) -> Result<Arc<ProjectionNetwork>> {
    let path = cfg.io.model.as_ref().ok_or_else(|| Error::State("projector prior needs io.model".into()))?;
    let net = ProjectionNetwork::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })?;
    Ok(Arc::new(net))
}

/// Whitespace-separated measurement values.
pub fn parse_measurement(text: &str) -> Result<Tensor> {
    let values = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|_| Error::Format { offset: 0, detail: format!("bad measurement value '{t}'") })
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_vec(values)
}

pub fn format_measurement(y: &Tensor) -> String {
    y.data().iter().map(|v| format!("{v:.17e}\n")).collect()
}

#[derive(Debug)]
pub struct SolveReport {
    pub psnr: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub rho: f64,
    pub measurement_len: usize,
    pub image_path: PathBuf,
    pub trace_path: PathBuf,
}

pub fn cmd_solve(cfg: &ExperimentConfig, out: &Path) -> Result<SolveReport> {
    let truth = cfg.io.input.as_deref().map(load_image_file).transpose()?;
    let geometry = match (&truth, &cfg.io.measurement) {
        (Some(t), _) => (t.height(), t.width(), t.channels()),
        (None, Some(_)) => match (cfg.io.height, cfg.io.width) {
            (Some(h), Some(w)) => (h, w, cfg.io.channels.unwrap_or(1)),
            _ => return Err(Error::Parameter("solving from a measurement file needs io.height and io.width".into())),
        },
        (None, None) => return Err(Error::Parameter("solve needs io.input or io.measurement".into())),
    };
    let setup = TaskSetup::new(&cfg.task, cfg.seeds.operator, geometry.0, geometry.1, geometry.2)?;
    let (op, y) = match (&cfg.io.measurement, &truth) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
            (setup.operator(0)?, parse_measurement(&text)?)
        }
        (None, Some(t)) => setup.measure(0, t)?,
        (None, None) => unreachable!(),
    };
    let model = match cfg.prior.kind {
        PriorKind::Projector => Some(load_model(cfg)?),
        PriorKind::L1Wavelet => None,
    };
    let prior = build_prior(&cfg.prior, cfg.prior.kind, model.as_ref(), geometry)?;
    let admm = cfg.admm.resolve(&cfg.task, None);
    let outcome = admm_solve(op.as_ref(), &y, prior.as_ref(), &admm, truth.as_ref())?;
    let x = Image::from_tensor(geometry.0, geometry.1, geometry.2, &outcome.x)?;

    create_dir(out)?;
    let pgm = cfg.io.input.as_ref().and_then(|p| p.extension()).is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let image_path = out.join(if pgm { "reconstruction.pgm" } else { "reconstruction.png" });
    save_image_file(&x, &image_path)?;
    let trace_path = out.join(TRACE_FILE);
    write_file(&trace_path, cfg.csv_comment() + &outcome.trace.to_csv())?;
    if cfg.io.measurement.is_none() {
        write_file(&out.join("measurement.txt"), format_measurement(&y))?;
    }
    Ok(SolveReport {
        psnr: truth.as_ref().map(|t| psnr(t, &x)).transpose()?,
        iterations: outcome.iterations(),
        converged: outcome.converged,
        rho: admm.rho,
        measurement_len: y.len(),
        image_path,
        trace_path,
    })
}

/// Result of one benchmark solve.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub task: TaskKind,
    pub prior: PriorKind,
    pub image: usize,
    pub result: std::result::Result<SolveSummary, String>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveSummary {
    pub psnr: f64,
    pub iterations: usize,
    pub converged: bool,
    pub initial_rmse_xz: f64,
    pub final_rmse_xz: f64,
    pub diverged: bool,
}

/// Measures image `index` of a task and reconstructs it with `prior`,
/// using the benchmark penalty for the task.
pub fn solve_image(
    setup: &TaskSetup,
    prior: &dyn ProxOperator,
    cfg: &ExperimentConfig,
    index: usize,
    truth: &Image,
) -> Result<SolveSummary> {
    let rho = cfg.bench.rho.get(&setup.task.kind).copied();
    let admm = cfg.admm.resolve(&setup.task, rho);
    let (op, y) = setup.measure(index, truth)?;
    let out = admm_solve(op.as_ref(), &y, prior, &admm, None)?;
    let x = Image::from_tensor(truth.height(), truth.width(), truth.channels(), &out.x)?;
    let first = out.trace.records.first().map_or(f64::NAN, |r| r.rmse_xz);
    let last = out.trace.records.last().map_or(f64::NAN, |r| r.rmse_xz);
    Ok(SolveSummary {
        psnr: psnr(truth, &x)?,
        iterations: out.iterations(),
        converged: out.converged,
        initial_rmse_xz: first,
        final_rmse_xz: last,
        diverged: out.diverged(),
    })
}

/// Solves every configured task × prior on every image. Work is spread over
/// `threads` workers; rows come back in task, prior, image order.
pub fn bench_rows(
    cfg: &ExperimentConfig,
    images: &[Image],
    model: Option<&Arc<ProjectionNetwork>>,
    threads: usize,
) -> Result<Vec<BenchRow>> {
    let first = images.first().ok_or_else(|| Error::Parameter("benchmark needs at least one image".into()))?;
    let geometry = (first.height(), first.width(), first.channels());
    if images.iter().any(|im| !im.same_geometry(first)) {
        return Err(Error::Dimension("benchmark images must share one geometry".into()));
    }
    let mut jobs = Vec::new();
    for &task in &cfg.bench.tasks {
        let tc = cfg.bench.task_config(&cfg.task, task);
        let setup =
            TaskSetup::new(&tc, cfg.seeds.operator, geometry.0, geometry.1, geometry.2).map_err(|e| e.to_string());
        for &prior in &cfg.bench.priors {
            let p = build_prior(&cfg.prior, prior, model, geometry).map_err(|e| e.to_string());
            let pair = Arc::new((setup.clone(), p));
            for i in 0..images.len() {
                jobs.push((task, prior, i, pair.clone()));
            }
        }
    }
    let threads = threads.max(1).min(jobs.len().max(1));
    let mut rows: Vec<Option<BenchRow>> = vec![None; jobs.len()];
    std::thread::scope(|s| {
        let chunks: Vec<_> =
            rows.chunks_mut(jobs.len().div_ceil(threads)).zip(jobs.chunks(jobs.len().div_ceil(threads))).collect();
        for (out, work) in chunks {
            s.spawn(move || {
                for (slot, (task, prior, i, pair)) in out.iter_mut().zip(work) {
                    let start = Instant::now();
                    let result = match &**pair {
                        (Ok(setup), Ok(p)) => {
                            solve_image(setup, p.as_ref(), cfg, *i, &images[*i]).map_err(|e| e.to_string())
                        }
                        (Err(e), _) | (_, Err(e)) => Err(e.clone()),
                    };
                    *slot = Some(BenchRow {
                        task: *task,
                        prior: *prior,
                        image: *i,
                        result,
                        wall_seconds: start.elapsed().as_secs_f64(),
                    });
                }
            });
        }
    });
    Ok(rows.into_iter().map(|r| r.expect("every job ran")).collect())
}

pub const BENCH_HEADER: &str =
    "task,prior,image,psnr,iterations,converged,initial_rmse_xz,final_rmse_xz,diverged,status";

/// Mean PSNR and iteration count over the successful rows of each
/// task × prior group, in first-appearance order.
pub fn bench_means(rows: &[BenchRow]) -> Vec<(TaskKind, PriorKind, Option<f64>, Option<f64>, usize, usize)> {
    let mut groups: Vec<(TaskKind, PriorKind)> = Vec::new();
    for r in rows {
        if !groups.contains(&(r.task, r.prior)) {
            groups.push((r.task, r.prior));
        }
    }
    groups
        .into_iter()
        .map(|(t, p)| {
            let group: Vec<&BenchRow> = rows.iter().filter(|r| r.task == t && r.prior == p).collect();
            let ok: Vec<&SolveSummary> = group.iter().filter_map(|r| r.result.as_ref().ok()).collect();
            let n = ok.len() as f64;
            let (psnr, iters) = if ok.is_empty() {
                (None, None)
            } else {
                (
                    Some(ok.iter().map(|s| s.psnr).sum::<f64>() / n),
                    Some(ok.iter().map(|s| s.iterations as f64).sum::<f64>() / n),
                )
            };
            (t, p, psnr, iters, ok.len(), group.len())
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\"").replace('\n', " "))
    } else {
        s.to_string()
    }
}

/// Per-image rows followed by one mean row per task × prior. Wall time is
/// kept out of this file so that repeated runs match byte for byte.
pub fn bench_csv(cfg: &ExperimentConfig, rows: &[BenchRow]) -> String {
    let mut s = cfg.csv_comment();
    s.push_str(BENCH_HEADER);
    s.push('\n');
    for r in rows {
        let (t, p) = (r.task.name(), r.prior.name());
        match &r.result {
            Ok(v) => s.push_str(&format!(
                "{t},{p},{},{},{},{},{},{},{},ok\n",
                r.image,
                format_float(v.psnr),
                v.iterations,
                v.converged,
                format_float(v.initial_rmse_xz),
                format_float(v.final_rmse_xz),
                v.diverged
            )),
            Err(e) => s.push_str(&format!("{t},{p},{},,,,,,,{}\n", r.image, csv_field(&format!("error: {e}")))),
        }
    }
    for (t, p, psnr, iters, ok, total) in bench_means(rows) {
        s.push_str(&format!(
            "{},{},mean,{},{},,,,,ok {ok}/{total}\n",
            t.name(),
            p.name(),
            psnr.map(format_float).unwrap_or_default(),
            iters.map(format_float).unwrap_or_default()
        ));
    }
    s
}

pub fn timing_csv(cfg: &ExperimentConfig, rows: &[BenchRow]) -> String {
    let mut s = cfg.csv_comment();
    s.push_str("task,prior,image,wall_seconds\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{:.6}\n", r.task.name(), r.prior.name(), r.image, r.wall_seconds));
    }
    s
}

#[derive(Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub bench_path: PathBuf,
    pub timing_path: PathBuf,
}

pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub fn cmd_bench(cfg: &ExperimentConfig, out: &Path) -> Result<BenchReport> {
    let splits = load_splits(cfg)?;
    let model = if cfg.bench.priors.contains(&PriorKind::Projector) {
        match load_model(cfg) {
            Ok(m) => Some(m),
            Err(e) if cfg.io.model.is_some() => return Err(e),
            Err(_) => None,
        }
    } else {
        None
    };
    let rows = bench_rows(cfg, &splits.test, model.as_ref(), default_threads())?;
    create_dir(out)?;
    let bench_path = out.join(BENCH_FILE);
    write_file(&bench_path, bench_csv(cfg, &rows))?;
    let timing_path = out.join(TIMING_FILE);
    write_file(&timing_path, timing_csv(cfg, &rows))?;
    Ok(BenchReport { rows, bench_path, timing_path })
}

pub fn cmd_check(kind: CheckKind, seed: u64) -> Result<CheckReport> {
    run_check(kind, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::parse(
            "[data]\nsynthetic_count = 12\nsynthetic_size = 16\ntrain_count = 6\nval_count = 3\ntest_count = 3\n[bench]\npriors = [\"l1_wavelet\"]\n",
        )
        .unwrap();
        cfg.admm.max_iters = 20;
        cfg
    }

    #[test]
    fn bench_means_match_rows() {
        let cfg = small_cfg();
        let splits = load_splits(&cfg).unwrap();
        let rows = bench_rows(&cfg, &splits.test, None, 3).unwrap();
        assert_eq!(rows.len(), 4 * 3);
        for (t, _, psnr, iters, ok, total) in bench_means(&rows) {
            let group: Vec<_> = rows.iter().filter(|r| r.task == t).map(|r| r.result.clone().unwrap()).collect();
            assert_eq!((ok, total), (3, 3));
            let hand = group.iter().map(|s| s.psnr).sum::<f64>() / 3.0;
            assert!((psnr.unwrap() - hand).abs() < 1e-12);
            let hand = group.iter().map(|s| s.iterations as f64).sum::<f64>() / 3.0;
            assert!((iters.unwrap() - hand).abs() < 1e-12);
        }
        let single = bench_rows(&cfg, &splits.test, None, 1).unwrap();
        assert_eq!(bench_csv(&cfg, &rows), bench_csv(&cfg, &single));
    }

    #[test]
    fn missing_model_is_a_row_error() {
        let mut cfg = small_cfg();
        cfg.bench.priors = vec![PriorKind::Projector];
        cfg.bench.tasks = vec![TaskKind::Cs];
        let splits = load_splits(&cfg).unwrap();
        let rows = bench_rows(&cfg, &splits.test, None, 2).unwrap();
        assert!(rows.iter().all(|r| r.result.is_err()));
        let csv = bench_csv(&cfg, &rows);
        assert!(csv.lines().nth(2).unwrap().contains("error: "));
        assert!(csv.lines().last().unwrap().ends_with("ok 0/3"));
    }

    #[test]
    fn measurement_text_round_trip() {
        let y = Tensor::from_vec(vec![0.1, -2.5e-7, 3.0]).unwrap();
        assert_eq!(parse_measurement(&format_measurement(&y)).unwrap(), y);
        assert!(parse_measurement("1.0 x").is_err());
    }
}
