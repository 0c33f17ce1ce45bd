//! Selection masks for partial model sharing.
//!
//! A mask is the diagonal of a 0/1 selection matrix stored as a sorted index
//! set. Each global round the set is rotated right by `shift` positions, so a
//! contiguous block of `M` coordinates visits every coordinate `M` times per
//! `D` rounds when `shift == 1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::{self, Stream};

/// How initial masks are assigned to clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Every client starts from the same block and they rotate in lockstep.
    Coordinated,
    /// Every client starts from an independently rotated block.
    Uncoordinated,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Coordinated => "coordinated",
            Scheme::Uncoordinated => "uncoordinated",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    dim: usize,
    active: Vec<usize>,
    shift: usize,
}

impl SelectionMask {
    pub fn new(dim: usize, active: impl IntoIterator<Item = usize>, shift: usize) -> Result<Self> {
        let mut active: Vec<usize> = active.into_iter().collect();
        active.sort_unstable();
        active.dedup();
        if let Some(&last) = active.last() {
            if last >= dim {
                return Err(Error::invalid(format!("mask index {last} out of range for D = {dim}")));
            }
        }
        Ok(Self { dim, active, shift: shift % dim.max(1) })
    }

    /// The block `{offset, ..., offset + count - 1}` taken modulo `dim`.
    pub fn contiguous(dim: usize, count: usize, shift: usize, offset: usize) -> Result<Self> {
        check_shape(dim, count, shift)?;
        Self::new(dim, (0..count).map(|i| (offset + i) % dim), shift)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of shared coordinates `M`.
    pub fn count(&self) -> usize {
        self.active.len()
    }

    pub fn shift(&self) -> usize {
        self.shift
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn contains(&self, index: usize) -> bool {
        self.active.binary_search(&index).is_ok()
    }

    pub fn is_full(&self) -> bool {
        self.active.len() == self.dim
    }

    /// Right circular shift by `shift` positions.
    pub fn advance(&mut self) {
        if self.shift == 0 {
            return;
        }
        for i in &mut self.active {
            *i = (*i + self.shift) % self.dim;
        }
        self.active.sort_unstable();
    }

    pub fn advanced(&self) -> Self {
        let mut next = self.clone();
        next.advance();
        next
    }

    /// `S w`: inactive coordinates zeroed.
    pub fn apply(&self, w: &[f64]) -> Result<Vec<f64>> {
        Error::check_len("mask apply", self.dim, w.len())?;
        let mut out = vec![0.0; self.dim];
        for &i in &self.active {
            out[i] = w[i];
        }
        Ok(out)
    }

    /// `(I - S) w`: active coordinates zeroed.
    pub fn apply_complement(&self, w: &[f64]) -> Result<Vec<f64>> {
        Error::check_len("mask complement", self.dim, w.len())?;
        let mut out = w.to_vec();
        for &i in &self.active {
            out[i] = 0.0;
        }
        Ok(out)
    }

    /// The `M` shared values of `w`, in ascending coordinate order. This is
    /// what travels over the network.
    pub fn gather(&self, w: &[f64]) -> Result<Vec<f64>> {
        Error::check_len("mask gather", self.dim, w.len())?;
        Ok(self.active.iter().map(|&i| w[i]).collect())
    }

    /// Overwrites the active coordinates of `target` with `values`.
    pub fn scatter(&self, values: &[f64], target: &mut [f64]) -> Result<()> {
        Error::check_len("mask scatter values", self.active.len(), values.len())?;
        Error::check_len("mask scatter target", self.dim, target.len())?;
        for (&i, &v) in self.active.iter().zip(values) {
            target[i] = v;
        }
        Ok(())
    }
}

fn check_shape(dim: usize, count: usize, shift: usize) -> Result<()> {
    if dim == 0 {
        return Err(Error::invalid("mask dimension must be positive"));
    }
    if count > dim {
        return Err(Error::invalid(format!("shared count M = {count} exceeds D = {dim}")));
    }
    if shift == 0 || shift > dim {
        return Err(Error::invalid(format!("shift must lie in [1, {dim}], got {shift}")));
    }
    Ok(())
}

/// `clients` identical masks starting at `{0, ..., count - 1}`.
pub fn coordinated_init(
    dim: usize,
    count: usize,
    shift: usize,
    clients: usize,
) -> Result<Vec<SelectionMask>> {
    check_shape(dim, count, shift)?;
    if clients == 0 {
        return Err(Error::invalid("at least one client is required"));
    }
    let mask = SelectionMask::contiguous(dim, count, shift, 0)?;
    Ok(vec![mask; clients])
}

/// Contiguous blocks rotated by independent uniform offsets in `[0, dim)`.
pub fn uncoordinated_init(
    dim: usize,
    count: usize,
    shift: usize,
    clients: usize,
    seed: u64,
) -> Result<Vec<SelectionMask>> {
    Ok(uncoordinated_offsets(dim, count, shift, clients, seed)?
        .into_iter()
        .map(|offset| SelectionMask::contiguous(dim, count, shift, offset))
        .collect::<Result<_>>()?)
}

/// Offsets used by [`uncoordinated_init`].
pub fn uncoordinated_offsets(
    dim: usize,
    count: usize,
    shift: usize,
    clients: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    check_shape(dim, count, shift)?;
    if clients == 0 {
        return Err(Error::invalid("at least one client is required"));
    }
    let mut rng = seeds::rng(seed, Stream::Masks);
    Ok((0..clients).map(|_| rng.random_range(0..dim)).collect())
}

pub fn init(
    scheme: Scheme,
    dim: usize,
    count: usize,
    shift: usize,
    clients: usize,
    seed: u64,
) -> Result<Vec<SelectionMask>> {
    match scheme {
        Scheme::Coordinated => coordinated_init(dim, count, shift, clients),
        Scheme::Uncoordinated => uncoordinated_init(dim, count, shift, clients, seed),
    }
}
