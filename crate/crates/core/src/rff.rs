//! Random Fourier features for the Gaussian kernel.
//!
//! `z_i(x) = sqrt(2/D) * cos(w_i . x + b_i)` with `w_i ~ N(0, I / bandwidth^2)`
//! and `b_i ~ U[0, 2pi)`, so that `z(x) . z(y)` approximates
//! `exp(-|x - y|^2 / (2 bandwidth^2))`. One mapper is shared by every client
//! and the server so that model coordinates mean the same thing everywhere.

use std::f64::consts::TAU;

use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::seeds::{self, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct RffMapper {
    dim_in: usize,
    dim_out: usize,
    /// Row `i` (length `dim_in`) is the frequency vector of feature `i`.
    frequencies: Vec<f64>,
    phases: Vec<f64>,
    bandwidth: f64,
    scale: f64,
}

impl RffMapper {
    pub fn new(dim_in: usize, dim_out: usize, bandwidth: f64, seed: u64) -> Result<Self> {
        validate(dim_in, dim_out, bandwidth)?;
        let mut rng = seeds::rng(seed, Stream::Features);
        let normal = Normal::new(0.0, 1.0 / bandwidth)
            .map_err(|e| Error::invalid(format!("frequency distribution: {e}")))?;
        let frequencies = (0..dim_in * dim_out).map(|_| normal.sample(&mut rng)).collect();
        let uniform = Uniform::new(0.0, TAU).expect("non-empty phase range");
        let phases = (0..dim_out).map(|_| uniform.sample(&mut rng)).collect();
        Ok(Self {
            dim_in,
            dim_out,
            frequencies,
            phases,
            bandwidth,
            scale: (2.0 / dim_out as f64).sqrt(),
        })
    }

    /// Builds a mapper from explicit frequencies (row-major, one row of
    /// length `dim_in` per feature) and phases.
    pub fn from_parts(
        dim_in: usize,
        frequencies: Vec<f64>,
        phases: Vec<f64>,
        bandwidth: f64,
    ) -> Result<Self> {
        let dim_out = phases.len();
        validate(dim_in, dim_out, bandwidth)?;
        Error::check_len("rff frequencies", dim_in * dim_out, frequencies.len())?;
        if frequencies.iter().chain(&phases).any(|v| !v.is_finite()) {
            return Err(Error::invalid("rff parameters must be finite"));
        }
        Ok(Self {
            dim_in,
            dim_out,
            frequencies,
            phases,
            bandwidth,
            scale: (2.0 / dim_out as f64).sqrt(),
        })
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Per-feature bound `sqrt(2/D)`.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn map(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = vec![0.0; self.dim_out];
        self.map_into(x, &mut z)?;
        Ok(z)
    }

    pub fn map_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        Error::check_len("rff input", self.dim_in, x.len())?;
        Error::check_len("rff output", self.dim_out, out.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("rff input must be finite"));
        }
        for ((z, omega), phase) in out
            .iter_mut()
            .zip(self.frequencies.chunks_exact(self.dim_in))
            .zip(&self.phases)
        {
            let arg: f64 = omega.iter().zip(x).map(|(w, v)| w * v).sum();
            *z = self.scale * (arg + phase).cos();
        }
        Ok(())
    }
}

fn validate(dim_in: usize, dim_out: usize, bandwidth: f64) -> Result<()> {
    if dim_in == 0 || dim_out == 0 {
        return Err(Error::invalid(format!(
            "rff dimensions must be positive (L = {dim_in}, D = {dim_out})"
        )));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::invalid(format!("rff bandwidth must be positive, got {bandwidth}")));
    }
    Ok(())
}
