//! Experiment harness: configuration, repeated runs, test-MSE learning
//! curves with communication counters, and CSV/metadata output.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{build_test_set, draw_client_params, nonlinear_target, ClientDataSource, ParamRanges, TestSet};
use crate::error::{Error, Result};
use crate::fed::{Algorithm, Federation, Sample, Traffic};
use crate::masks::{self, Scheme};
use crate::rff::RffMapper;
use crate::seeds;

/// Window taps read by the nonlinear target.
pub const TARGET_TAPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Reference scale: 100 clients, 200 features, 500 runs.
    Paper,
    /// Laptop scale: 20 clients, 64 features, 50 runs.
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub clients: usize,
    pub dim: usize,
    pub window: usize,
    /// Coordinates exchanged each way per participant (`M`).
    pub shared: usize,
    /// Circular shift per round; `None` uses `max(shared, 1)`.
    pub shift: Option<usize>,
    pub per_round: usize,
    pub step: f64,
    pub scheme: Scheme,
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub runs: usize,
    pub seed: u64,
    pub bandwidth: f64,
    pub test_per_client: usize,
    /// Add observation noise to test targets.
    pub noisy_test: bool,
    pub ranges: ParamRanges,
    /// Worker threads for concurrent runs; 0 uses all cores.
    pub workers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = Self {
            clients: 100,
            dim: 200,
            window: 4,
            shared: 40,
            shift: None,
            per_round: 4,
            step: 0.75,
            scheme: Scheme::Coordinated,
            algorithm: Algorithm::PsoFed,
            rounds: 2000,
            runs: 500,
            seed: 1,
            bandwidth: 2.0,
            test_per_client: 20,
            noisy_test: false,
            ranges: ParamRanges::default(),
            workers: 0,
            output: None,
        };
        match preset {
            Preset::Paper => base,
            Preset::Desk => Self { clients: 20, dim: 64, shared: 8, runs: 50, rounds: 1000, ..base },
        }
    }

    pub fn effective_shift(&self) -> usize {
        self.shift.unwrap_or(self.shared.max(1))
    }

    /// Coordinates each participant exchanges per direction.
    pub fn scalars_per_transfer(&self) -> usize {
        match self.algorithm {
            Algorithm::OnlineFed => self.dim,
            Algorithm::PsoFed => self.shared,
        }
    }

    pub fn label(&self) -> String {
        match self.algorithm {
            Algorithm::OnlineFed => self.algorithm.to_string(),
            Algorithm::PsoFed => format!("{}-M{}-{}", self.algorithm, self.shared, self.scheme),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clients", self.clients),
            ("dim", self.dim),
            ("per_round", self.per_round),
            ("rounds", self.rounds),
            ("runs", self.runs),
            ("test_per_client", self.test_per_client),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.window < TARGET_TAPS {
            return Err(Error::invalid(format!("window must hold at least {TARGET_TAPS} taps")));
        }
        if self.shared > self.dim {
            return Err(Error::invalid(format!("shared = {} exceeds dim = {}", self.shared, self.dim)));
        }
        let shift = self.effective_shift();
        if shift == 0 || shift > self.dim {
            return Err(Error::invalid(format!("shift must lie in [1, {}], got {shift}", self.dim)));
        }
        if self.per_round > self.clients {
            return Err(Error::invalid(format!(
                "per_round = {} exceeds clients = {}",
                self.per_round, self.clients
            )));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid(format!("step size must be positive, got {}", self.step)));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::invalid(format!("bandwidth must be positive, got {}", self.bandwidth)));
        }
        self.ranges.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

fn to_db(mse: f64) -> f64 {
    10.0 * mse.log10()
}

/// Direct test MSE, `|y - Z w|^2 / N`.
pub fn eval_mse(w: &[f64], test: &TestSet) -> Result<f64> {
    Error::check_len("model", test.dim(), w.len())?;
    let sse: f64 = test
        .rows()
        .zip(test.targets())
        .map(|(z, y)| {
            let pred: f64 = z.iter().zip(w).map(|(a, b)| a * b).sum();
            (y - pred).powi(2)
        })
        .sum();
    Ok(sse / test.len() as f64)
}

/// Test MSE through the precomputed quadratic form
/// `y'y/N - 2 w'Z'y/N + w'(Z'Z/N)w`, which costs `O(D^2)` per evaluation
/// instead of `O(N D)`.
#[derive(Debug, Clone)]
pub struct MseEvaluator {
    gram: DMatrix<f64>,
    cross: DVector<f64>,
    energy: f64,
}

impl MseEvaluator {
    pub fn new(test: &TestSet) -> Self {
        let n = test.len();
        let dim = test.dim();
        let z = DMatrix::from_row_iterator(n, dim, test.rows().flatten().copied());
        let y = DVector::from_column_slice(test.targets());
        let scale = 1.0 / n as f64;
        let gram = z.tr_mul(&z) * scale;
        let cross = z.tr_mul(&y) * scale;
        let energy = y.norm_squared() * scale;
        Self { gram, cross, energy }
    }

    pub fn mse(&self, w: &[f64]) -> Result<f64> {
        Error::check_len("model", self.cross.len(), w.len())?;
        let w = DVector::from_column_slice(w);
        let quad = w.dot(&(&self.gram * &w));
        Ok((self.energy - 2.0 * w.dot(&self.cross) + quad).max(0.0))
    }
}

/// Per-round result of a single run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    /// Test MSE of the all-zero initial model.
    pub initial_mse: f64,
    pub mse: Vec<f64>,
    /// Cumulative traffic after each round.
    pub traffic: Vec<Traffic>,
}

/// Everything one run needs besides the protocol state.
pub struct RunData {
    pub mapper: RffMapper,
    pub sources: Vec<ClientDataSource>,
    pub test: TestSet,
}

impl RunData {
    pub fn new(cfg: &ExperimentConfig, run_seed: u64) -> Result<Self> {
        let params = draw_client_params(cfg.clients, &cfg.ranges, run_seed)?;
        let mapper = RffMapper::new(cfg.window, cfg.dim, cfg.bandwidth, run_seed)?;
        let sources = params
            .iter()
            .enumerate()
            .map(|(k, p)| ClientDataSource::training(*p, cfg.window, run_seed, k))
            .collect::<Result<Vec<_>>>()?;
        let mut test_sources = params
            .iter()
            .enumerate()
            .map(|(k, p)| ClientDataSource::test(*p, cfg.window, run_seed, k))
            .collect::<Result<Vec<_>>>()?;
        let test = build_test_set(&mut test_sources, &mapper, cfg.test_per_client, !cfg.noisy_test, nonlinear_target)?;
        Ok(Self { mapper, sources, test })
    }

    /// One fresh feature-space sample per client.
    pub fn next_samples(&mut self) -> Result<Vec<Sample>> {
        let mapper = &self.mapper;
        self.sources
            .iter_mut()
            .map(|src| {
                let (x, y) = src.next_sample(nonlinear_target);
                Ok(Sample { z: mapper.map(&x)?, y })
            })
            .collect()
    }
}

pub fn build_federation(cfg: &ExperimentConfig, run_seed: u64) -> Result<Federation> {
    let masks = masks::init(cfg.scheme, cfg.dim, cfg.shared, cfg.effective_shift(), cfg.clients, run_seed)?;
    Federation::with_masks(cfg.algorithm, masks, cfg.step, cfg.per_round, run_seed)
}

pub fn run_single(cfg: &ExperimentConfig, run_seed: u64) -> Result<RunTrace> {
    cfg.validate()?;
    let mut data = RunData::new(cfg, run_seed)?;
    let mut fed = build_federation(cfg, run_seed)?;
    let evaluator = MseEvaluator::new(&data.test);
    let initial_mse = evaluator.mse(fed.global_model())?;
    let mut mse = Vec::with_capacity(cfg.rounds);
    let mut traffic = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let samples = data.next_samples()?;
        fed.run_round(&samples)?;
        mse.push(evaluator.mse(fed.global_model())?);
        traffic.push(fed.traffic());
    }
    Ok(RunTrace { initial_mse, mse, traffic })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Global iteration, starting at 1.
    pub round: usize,
    pub mse: f64,
    pub mse_db: f64,
    pub scalars_up: u64,
    pub scalars_down: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedRun {
    pub run: usize,
    pub seed: u64,
    pub reason: String,
}

/// Learning curve averaged over the completed runs of one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub label: String,
    pub config: ExperimentConfig,
    pub run_seeds: Vec<u64>,
    pub initial_mse: f64,
    pub records: Vec<MetricsRecord>,
    pub completed_runs: usize,
    pub excluded: Vec<ExcludedRun>,
}

impl ExperimentResult {
    pub fn initial_mse_db(&self) -> f64 {
        to_db(self.initial_mse)
    }

    pub fn mse_db(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mse_db).collect()
    }

    /// Mean linear MSE over the last `fraction` of rounds, in dB.
    pub fn steady_state_db(&self, fraction: f64) -> f64 {
        let n = self.records.len();
        let tail = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
        let mean = self.records[n - tail..].iter().map(|r| r.mse).sum::<f64>() / tail as f64;
        to_db(mean)
    }

    /// First round whose MSE is at least `drop_db` below the initial MSE.
    pub fn rounds_to_drop(&self, drop_db: f64) -> Option<usize> {
        let target = self.initial_mse_db() - drop_db;
        self.records.iter().find(|r| r.mse_db <= target).map(|r| r.round)
    }

    pub fn curve(&self) -> Curve {
        Curve { label: self.label.clone(), records: self.records.clone() }
    }

    pub fn metadata(&self) -> Metadata {
        Metadata {
            label: self.label.clone(),
            completed_runs: self.completed_runs,
            excluded_runs: self.excluded.len(),
            initial_mse_db: self.initial_mse_db(),
            run_seeds: self.run_seeds.clone(),
            excluded: self.excluded.clone(),
            config: self.config.clone(),
        }
    }

    /// Writes the curve CSV and the `.meta.toml` sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<PathBuf> {
        write_curve_csv(&self.curve(), std::fs::File::create(path)?)?;
        let meta_path = metadata_path(path);
        std::fs::write(&meta_path, toml::to_string_pretty(&self.metadata())?)?;
        Ok(meta_path)
    }
}

/// Sidecar describing how a curve was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub label: String,
    pub completed_runs: usize,
    pub excluded_runs: usize,
    pub initial_mse_db: f64,
    pub run_seeds: Vec<u64>,
    pub excluded: Vec<ExcludedRun>,
    pub config: ExperimentConfig,
}

pub fn metadata_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.toml")
}

/// Runs `cfg.runs` independent runs (concurrently, up to `cfg.workers`),
/// averages linear MSE across the runs that did not diverge, then converts
/// to dB. Diverged runs are excluded and listed in the result.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let run_seeds: Vec<u64> = (0..cfg.runs).map(|r| seeds::run_seed(cfg.seed, r)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    let outcomes: Vec<Result<RunTrace>> =
        pool.install(|| run_seeds.par_iter().map(|&s| run_single(cfg, s)).collect());

    let mut sums = vec![0.0; cfg.rounds];
    let mut initial = 0.0;
    let mut traffic: Option<Vec<Traffic>> = None;
    let mut completed = 0usize;
    let mut excluded = Vec::new();
    for (run, (outcome, &seed)) in outcomes.into_iter().zip(&run_seeds).enumerate() {
        match outcome {
            Ok(trace) => {
                completed += 1;
                initial += trace.initial_mse;
                for (s, m) in sums.iter_mut().zip(&trace.mse) {
                    *s += m;
                }
                // Traffic depends only on the configuration, never on the data.
                traffic.get_or_insert(trace.traffic);
            }
            Err(e @ Error::Diverged { .. }) => excluded.push(ExcludedRun { run, seed, reason: e.to_string() }),
            Err(e) => return Err(e),
        }
    }
    let traffic = traffic.ok_or(Error::AllRunsDiverged(cfg.runs))?;
    let records = sums
        .iter()
        .zip(&traffic)
        .enumerate()
        .map(|(n, (s, t))| {
            let mse = s / completed as f64;
            MetricsRecord { round: n + 1, mse, mse_db: to_db(mse), scalars_up: t.up, scalars_down: t.down }
        })
        .collect();
    Ok(ExperimentResult {
        label: cfg.label(),
        config: cfg.clone(),
        run_seeds,
        initial_mse: initial / completed as f64,
        records,
        completed_runs: completed,
        excluded,
    })
}

/// A labelled learning curve as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub label: String,
    pub records: Vec<MetricsRecord>,
}

const CURVE_HEADER: [&str; 4] = ["n", "mse_db", "scalars_up", "scalars_down"];

pub fn write_curve_csv(curve: &Curve, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CURVE_HEADER)?;
    for r in &curve.records {
        w.write_record([
            r.round.to_string(),
            r.mse_db.to_string(),
            r.scalars_up.to_string(),
            r.scalars_down.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve_csv(label: impl Into<String>, reader: impl std::io::Read) -> Result<Curve> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    if header.iter().ne(CURVE_HEADER) {
        return Err(Error::Table(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut records = Vec::new();
    for (line, row) in r.records().enumerate() {
        let row = row?;
        let mse_db: f64 = parse_field(&row, 1, line)?;
        records.push(MetricsRecord {
            round: parse_field(&row, 0, line)?,
            mse: 10f64.powf(mse_db / 10.0),
            mse_db,
            scalars_up: parse_field(&row, 2, line)?,
            scalars_down: parse_field(&row, 3, line)?,
        });
    }
    check_rounds(&records)?;
    Ok(Curve { label: label.into(), records })
}

/// Reads a curve and takes its label from the sidecar when present,
/// otherwise from the file stem.
pub fn load_curve(path: &Path) -> Result<Curve> {
    let meta = metadata_path(path);
    let label = if meta.exists() {
        let text = std::fs::read_to_string(&meta)?;
        toml::from_str::<Metadata>(&text)?.label
    } else {
        path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    };
    read_curve_csv(label, std::fs::File::open(path)?)
}

fn parse_field<T>(row: &csv::StringRecord, index: usize, line: usize) -> Result<T>
where
    T: std::str::FromStr,
    T::Err: fmt::Display,
{
    let raw = row.get(index).ok_or_else(|| Error::Table(format!("row {}: missing column {index}", line + 1)))?;
    raw.parse().map_err(|e| Error::Table(format!("row {}: {e}", line + 1)))
}

fn check_rounds(records: &[MetricsRecord]) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        if r.round != i + 1 {
            return Err(Error::Table(format!("round index {} at row {} is not contiguous from 1", r.round, i + 1)));
        }
    }
    Ok(())
}

/// Merges curves with the same round count into one wide CSV with a column
/// group per curve. A single curve is written unchanged.
pub fn compare_runs(curves: &[Curve], writer: impl Write) -> Result<()> {
    let first = curves.first().ok_or_else(|| Error::invalid("nothing to compare"))?;
    if curves.len() == 1 {
        return write_curve_csv(first, writer);
    }
    let rounds = first.records.len();
    for c in curves {
        if c.records.len() != rounds {
            return Err(Error::Table(format!(
                "curve '{}' has {} rounds, expected {rounds}",
                c.label,
                c.records.len()
            )));
        }
        check_rounds(&c.records)?;
    }

    let mut labels: Vec<String> = Vec::with_capacity(curves.len());
    for c in curves {
        let mut label = c.label.clone();
        let mut copy = 2;
        while labels.contains(&label) {
            label = format!("{}#{copy}", c.label);
            copy += 1;
        }
        labels.push(label);
    }

    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["n".to_string()];
    for l in &labels {
        for col in &CURVE_HEADER[1..] {
            header.push(format!("{l}:{col}"));
        }
    }
    w.write_record(&header)?;
    for n in 0..rounds {
        let mut row = vec![(n + 1).to_string()];
        for c in curves {
            let r = &c.records[n];
            row.push(r.mse_db.to_string());
            row.push(r.scalars_up.to_string());
            row.push(r.scalars_down.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the raw training streams of the first run as
/// `client,n,x,y` rows, where `x` is the newest input sample.
pub fn dump_data(cfg: &ExperimentConfig, rounds: usize, writer: impl Write) -> Result<()> {
    cfg.validate()?;
    let seed = seeds::run_seed(cfg.seed, 0);
    let params = draw_client_params(cfg.clients, &cfg.ranges, seed)?;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["client", "n", "x", "y"])?;
    for (k, p) in params.iter().enumerate() {
        let mut src = ClientDataSource::training(*p, cfg.window, seed, k)?;
        for n in 1..=rounds {
            let (x, y) = src.next_sample(nonlinear_target);
            w.write_record([k.to_string(), n.to_string(), x[0].to_string(), y.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
