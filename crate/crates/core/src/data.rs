//! Synthetic non-IID streams: per-client AR(1) inputs, the nonlinear target
//! and a held-out test set drawn from every client's distribution.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rff::RffMapper;
use crate::seeds::{self, Stream};

/// AR steps discarded before a source produces its first window.
pub const DEFAULT_WARMUP: usize = 100;

/// Closed interval a per-client parameter is drawn from uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.lo..=self.hi).contains(&v)
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(Error::invalid(format!("{name} range [{}, {}] is invalid", self.lo, self.hi)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub ar_coeff: Range,
    pub innovation_mean: Range,
    pub innovation_var: Range,
    pub noise_var: Range,
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            ar_coeff: Range::new(0.2, 0.9),
            innovation_mean: Range::new(-0.2, 0.2),
            innovation_var: Range::new(0.2, 1.2),
            noise_var: Range::new(0.005, 0.03),
        }
    }
}

impl ParamRanges {
    pub fn validate(&self) -> Result<()> {
        self.ar_coeff.validate("AR coefficient")?;
        self.innovation_mean.validate("innovation mean")?;
        self.innovation_var.validate("innovation variance")?;
        self.noise_var.validate("noise variance")?;
        if self.ar_coeff.lo <= -1.0 || self.ar_coeff.hi >= 1.0 {
            return Err(Error::invalid("AR coefficient must lie strictly inside (-1, 1)"));
        }
        if self.innovation_var.lo < 0.0 || self.noise_var.lo < 0.0 {
            return Err(Error::invalid("variances must be non-negative"));
        }
        Ok(())
    }
}

/// Distribution parameters of one client's stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientParams {
    pub ar_coeff: f64,
    pub innovation_mean: f64,
    pub innovation_var: f64,
    pub noise_var: f64,
}

pub fn draw_client_params(clients: usize, ranges: &ParamRanges, seed: u64) -> Result<Vec<ClientParams>> {
    ranges.validate()?;
    let mut rng = seeds::rng(seed, Stream::ClientParams);
    Ok((0..clients)
        .map(|_| ClientParams {
            ar_coeff: ranges.ar_coeff.sample(&mut rng),
            innovation_mean: ranges.innovation_mean.sample(&mut rng),
            innovation_var: ranges.innovation_var.sample(&mut rng),
            noise_var: ranges.noise_var.sample(&mut rng),
        })
        .collect())
}

/// `sqrt(x1^2 + sin^2(pi x4)) + (0.8 - 0.5 exp(-x2^2)) x3` on a window whose
/// first entry is the newest sample.
pub fn nonlinear_target(x: &[f64]) -> f64 {
    let (x1, x2, x3, x4) = (x[0], x[1], x[2], x[3]);
    (x1 * x1 + (PI * x4).sin().powi(2)).sqrt() + (0.8 - 0.5 * (-x2 * x2).exp()) * x3
}

/// One client's AR(1) input process `x_n = a x_{n-1} + sqrt(1 - a^2) u_n`
/// with Gaussian innovations, plus its observation noise.
#[derive(Debug, Clone)]
pub struct ClientDataSource {
    params: ClientParams,
    /// Newest sample first.
    history: VecDeque<f64>,
    window: usize,
    last: f64,
    innovation: Normal<f64>,
    noise_sd: f64,
    rng: ChaCha8Rng,
}

impl ClientDataSource {
    pub fn new(params: ClientParams, window: usize, warmup: usize, rng: ChaCha8Rng) -> Result<Self> {
        if window == 0 {
            return Err(Error::invalid("window length must be positive"));
        }
        if !(params.ar_coeff.abs() < 1.0) {
            return Err(Error::invalid(format!("AR coefficient {} is not stable", params.ar_coeff)));
        }
        if !(params.innovation_var >= 0.0 && params.noise_var >= 0.0) {
            return Err(Error::invalid("variances must be non-negative"));
        }
        let innovation = Normal::new(params.innovation_mean, params.innovation_var.sqrt())
            .map_err(|e| Error::invalid(format!("innovation distribution: {e}")))?;
        let mut src = Self {
            params,
            history: VecDeque::with_capacity(window + 1),
            window,
            last: 0.0,
            innovation,
            noise_sd: params.noise_var.sqrt(),
            rng,
        };
        for _ in 0..warmup.max(window) {
            src.advance();
        }
        Ok(src)
    }

    /// Training stream of client `client` for a run seeded with `seed`.
    pub fn training(params: ClientParams, window: usize, seed: u64, client: usize) -> Result<Self> {
        Self::new(params, window, DEFAULT_WARMUP, seeds::rng(seed, Stream::Training(client)))
    }

    /// Test stream of client `client`, independent of its training stream.
    pub fn test(params: ClientParams, window: usize, seed: u64, client: usize) -> Result<Self> {
        Self::new(params, window, DEFAULT_WARMUP, seeds::rng(seed, Stream::Test(client)))
    }

    pub fn params(&self) -> &ClientParams {
        &self.params
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Advances the AR recursion once and returns the new raw sample.
    pub fn advance(&mut self) -> f64 {
        let a = self.params.ar_coeff;
        let u = self.innovation.sample(&mut self.rng);
        self.last = a * self.last + (1.0 - a * a).sqrt() * u;
        self.history.push_front(self.last);
        self.history.truncate(self.window);
        self.last
    }

    /// Current window, newest sample first.
    pub fn current_window(&self) -> Vec<f64> {
        self.history.iter().copied().collect()
    }

    /// Advances once and returns the new window.
    pub fn next_window(&mut self) -> Vec<f64> {
        self.advance();
        self.current_window()
    }

    pub fn noise(&mut self) -> f64 {
        let n: f64 = StandardNormal.sample(&mut self.rng);
        self.noise_sd * n
    }

    /// Advances once and returns `(x, f(x) + noise)`.
    pub fn next_sample(&mut self, target: impl Fn(&[f64]) -> f64) -> (Vec<f64>, f64) {
        let x = self.next_window();
        let y = target(&x) + self.noise();
        (x, y)
    }
}

/// Held-out features (row-major, `len x dim`) and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    features: Vec<f64>,
    targets: Vec<f64>,
    dim: usize,
}

impl TestSet {
    pub fn new(features: Vec<f64>, targets: Vec<f64>, dim: usize) -> Result<Self> {
        if targets.is_empty() || dim == 0 {
            return Err(Error::invalid("test set must have at least one row and column"));
        }
        Error::check_len("test features", targets.len() * dim, features.len())?;
        Ok(Self { features, targets, dim })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.dim)
    }
}

/// `per_client` fresh samples from every source, mapped to feature space.
/// With `noiseless` set the targets are `f(x)` without observation noise.
pub fn build_test_set(
    sources: &mut [ClientDataSource],
    mapper: &RffMapper,
    per_client: usize,
    noiseless: bool,
    target: impl Fn(&[f64]) -> f64,
) -> Result<TestSet> {
    if per_client == 0 || sources.is_empty() {
        return Err(Error::invalid("test set needs at least one sample per client"));
    }
    let dim = mapper.dim_out();
    let rows = sources.len() * per_client;
    let mut features = vec![0.0; rows * dim];
    let mut targets = Vec::with_capacity(rows);
    let mut out = features.chunks_exact_mut(dim);
    for src in sources.iter_mut() {
        for _ in 0..per_client {
            let x = src.next_window();
            let mut y = target(&x);
            if !noiseless {
                y += src.noise();
            }
            mapper.map_into(&x, out.next().expect("row count"))?;
            targets.push(y);
        }
    }
    TestSet::new(features, targets, dim)
}
