//! Client update rules, server aggregation and the round-synchronous protocol
//! for Online-Fed and PSO-Fed.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::SelectionMask;
use crate::seeds::{self, Stream};

/// Models whose Euclidean norm reaches this value are treated as diverged.
pub const DIVERGENCE_NORM: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    OnlineFed,
    PsoFed,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::OnlineFed => "online-fed",
            Algorithm::PsoFed => "pso-fed",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One streaming observation already mapped to feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub z: Vec<f64>,
    pub y: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_model(w: &[f64], round: u64, client: Option<usize>) -> Result<()> {
    let norm2: f64 = w.iter().map(|v| v * v).sum();
    if norm2.is_finite() && norm2.sqrt() < DIVERGENCE_NORM {
        Ok(())
    } else {
        Err(Error::Diverged { round, client })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub w_local: Vec<f64>,
    pub mask: SelectionMask,
    pub step: f64,
    /// A-priori error of the most recent update.
    pub last_error: f64,
}

impl ClientState {
    pub fn new(id: usize, mask: SelectionMask, step: f64) -> Self {
        Self {
            id,
            w_local: vec![0.0; mask.dim()],
            mask,
            step,
            last_error: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_local.len()
    }

    /// Online-Fed: restart from the full global model and take one LMS step.
    pub fn online_fed_update(&mut self, w_global: &[f64], z: &[f64], y: f64, round: u64) -> Result<()> {
        Error::check_len("global model", self.dim(), w_global.len())?;
        self.w_local.copy_from_slice(w_global);
        self.lms_step(z, y, round)
    }

    /// PSO-Fed participant: the server sent the `M` coordinates of the global
    /// model selected by this client's current mask. The rest of the blend
    /// comes from the client's own model.
    pub fn psofed_participant_update(
        &mut self,
        masked_global: &[f64],
        z: &[f64],
        y: f64,
        round: u64,
    ) -> Result<()> {
        self.mask.scatter(masked_global, &mut self.w_local)?;
        self.lms_step(z, y, round)
    }

    /// PSO-Fed non-participant: plain local LMS, no server contact.
    pub fn psofed_nonparticipant_update(&mut self, z: &[f64], y: f64, round: u64) -> Result<()> {
        self.lms_step(z, y, round)
    }

    fn lms_step(&mut self, z: &[f64], y: f64, round: u64) -> Result<()> {
        Error::check_len("feature vector", self.dim(), z.len())?;
        let err = y - dot(&self.w_local, z);
        let gain = self.step * err;
        for (w, zi) in self.w_local.iter_mut().zip(z) {
            *w += gain * zi;
        }
        self.last_error = err;
        if !err.is_finite() {
            return Err(Error::Diverged { round, client: Some(self.id) });
        }
        check_model(&self.w_local, round, Some(self.id))
    }
}

/// Masked model upload `S_{k,n+1} w_{k,n+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    pub mask: SelectionMask,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub w_global: Vec<f64>,
    pub round: u64,
    selector_seed: u64,
}

impl ServerState {
    pub fn new(dim: usize, selector_seed: u64) -> Self {
        Self {
            w_global: vec![0.0; dim],
            round: 0,
            selector_seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_global.len()
    }

    /// Uniform subset of `count` out of `total` clients, sorted, drawn from a
    /// stream that depends only on the selector seed and the current round.
    pub fn select_clients(&self, total: usize, count: usize) -> Result<Vec<usize>> {
        if count == 0 || count > total {
            return Err(Error::invalid(format!(
                "cannot select {count} of {total} clients"
            )));
        }
        let mut rng = seeds::rng(self.selector_seed, Stream::Selection(self.round));
        let mut picked = index::sample(&mut rng, total, count).into_vec();
        picked.sort_unstable();
        Ok(picked)
    }

    /// Online-Fed: the new global model is the mean of the received models.
    pub fn online_fed_aggregate(&mut self, updates: &[&[f64]]) -> Result<()> {
        if updates.is_empty() {
            return Err(Error::invalid("no updates to aggregate"));
        }
        let mut acc = vec![0.0; self.dim()];
        for u in updates {
            Error::check_len("client update", self.dim(), u.len())?;
            for (a, v) in acc.iter_mut().zip(u.iter()) {
                *a += v;
            }
        }
        self.finish_aggregate(acc, updates.len())
    }

    /// PSO-Fed: every upload contributes its shared coordinates and the
    /// server's pre-round values elsewhere; contributions are then averaged.
    pub fn psofed_aggregate(&mut self, uploads: &[Upload]) -> Result<()> {
        if uploads.is_empty() {
            return Err(Error::invalid("no uploads to aggregate"));
        }
        let mut acc = vec![0.0; self.dim()];
        let mut contribution = vec![0.0; self.dim()];
        for up in uploads {
            Error::check_len("upload mask", self.dim(), up.mask.dim())?;
            contribution.copy_from_slice(&self.w_global);
            up.mask.scatter(&up.values, &mut contribution)?;
            for (a, v) in acc.iter_mut().zip(&contribution) {
                *a += v;
            }
        }
        self.finish_aggregate(acc, uploads.len())
    }

    fn finish_aggregate(&mut self, mut acc: Vec<f64>, count: usize) -> Result<()> {
        let n = count as f64;
        for a in &mut acc {
            *a /= n;
        }
        check_model(&acc, self.round, None)?;
        self.w_global = acc;
        self.round += 1;
        Ok(())
    }
}

/// Scalars moved during one round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traffic {
    pub up: u64,
    pub down: u64,
}

impl Traffic {
    pub fn total(&self) -> u64 {
        self.up + self.down
    }
}

impl std::ops::AddAssign for Traffic {
    fn add_assign(&mut self, rhs: Self) {
        self.up += rhs.up;
        self.down += rhs.down;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// Round index `n` that was just completed (0-based).
    pub round: u64,
    pub selected: Vec<usize>,
    pub traffic: Traffic,
}

/// Server, clients and cumulative traffic of one simulated federation.
#[derive(Debug, Clone, PartialEq)]
pub struct Federation {
    algorithm: Algorithm,
    server: ServerState,
    clients: Vec<ClientState>,
    per_round: usize,
    traffic: Traffic,
}

impl Federation {
    pub fn new(
        algorithm: Algorithm,
        server: ServerState,
        clients: Vec<ClientState>,
        per_round: usize,
    ) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::invalid("a federation needs at least one client"));
        }
        if per_round == 0 || per_round > clients.len() {
            return Err(Error::invalid(format!(
                "clients per round must lie in [1, {}], got {per_round}",
                clients.len()
            )));
        }
        for c in &clients {
            Error::check_len("client model", server.dim(), c.dim())?;
            Error::check_len("client mask", server.dim(), c.mask.dim())?;
        }
        Ok(Self {
            algorithm,
            server,
            clients,
            per_round,
            traffic: Traffic::default(),
        })
    }

    /// Zero-initialised federation with the given masks (one per client).
    pub fn with_masks(
        algorithm: Algorithm,
        masks: Vec<SelectionMask>,
        step: f64,
        per_round: usize,
        selector_seed: u64,
    ) -> Result<Self> {
        let dim = masks.first().map(SelectionMask::dim).unwrap_or(0);
        let clients = masks
            .into_iter()
            .enumerate()
            .map(|(k, m)| ClientState::new(k, m, step))
            .collect();
        Self::new(algorithm, ServerState::new(dim, selector_seed), clients, per_round)
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn global_model(&self) -> &[f64] {
        &self.server.w_global
    }

    /// Cumulative traffic since construction.
    pub fn traffic(&self) -> Traffic {
        self.traffic
    }

    /// One global iteration with one fresh sample per client.
    pub fn run_round(&mut self, samples: &[Sample]) -> Result<RoundReport> {
        Error::check_len("samples per round", self.clients.len(), samples.len())?;
        let round = self.server.round;
        let selected = self.server.select_clients(self.clients.len(), self.per_round)?;
        let traffic = match self.algorithm {
            Algorithm::OnlineFed => self.online_fed_round(&selected, samples)?,
            Algorithm::PsoFed => self.psofed_round(&selected, samples)?,
        };
        self.traffic += traffic;
        Ok(RoundReport { round, selected, traffic })
    }

    fn online_fed_round(&mut self, selected: &[usize], samples: &[Sample]) -> Result<Traffic> {
        let dim = self.server.dim() as u64;
        let mut traffic = Traffic::default();
        for &k in selected {
            let s = &samples[k];
            self.clients[k].online_fed_update(&self.server.w_global, &s.z, s.y, self.server.round)?;
            traffic.down += dim;
            traffic.up += dim;
        }
        let updates: Vec<&[f64]> = selected.iter().map(|&k| self.clients[k].w_local.as_slice()).collect();
        self.server.online_fed_aggregate(&updates)?;
        Ok(traffic)
    }

    fn psofed_round(&mut self, selected: &[usize], samples: &[Sample]) -> Result<Traffic> {
        let round = self.server.round;
        let mut traffic = Traffic::default();
        let mut next = selected.iter().copied().peekable();
        for (k, client) in self.clients.iter_mut().enumerate() {
            let s = &samples[k];
            if next.next_if_eq(&k).is_some() {
                let payload = client.mask.gather(&self.server.w_global)?;
                traffic.down += payload.len() as u64;
                client.psofed_participant_update(&payload, &s.z, s.y, round)?;
            } else {
                client.psofed_nonparticipant_update(&s.z, s.y, round)?;
            }
            client.mask.advance();
        }
        let uploads = selected
            .iter()
            .map(|&k| {
                let c = &self.clients[k];
                Ok(Upload { mask: c.mask.clone(), values: c.mask.gather(&c.w_local)? })
            })
            .collect::<Result<Vec<_>>>()?;
        traffic.up += uploads.iter().map(|u| u.values.len() as u64).sum::<u64>();
        self.server.psofed_aggregate(&uploads)?;
        Ok(traffic)
    }
}
