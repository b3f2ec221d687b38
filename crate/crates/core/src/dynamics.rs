//! Overdamped Langevin dynamics for the Dirichlet and periodic finite-volume
//! measures, synchronized-noise couplings and binary snapshot dumps.
//!
//! The drift is `-∂H/∂φ = -∇*(w V'(∇φ - ξ))` where `w` are the Hamiltonian edge
//! weights of the chosen [`Convention`]. With `Convention::Single` this is the
//! familiar `Σ_{y∼x} V'(φ(y) - φ(x) - ξ·(y - x))`.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Convention, Cube, LatticeGraph, Torus};
use crate::potential::{Interaction, Potential};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// `φ = 0` on `∂Q_L`.
    Dirichlet,
    /// `2L`-periodic with `φ(x0) = 0`.
    Periodic,
}

impl std::str::FromStr for Boundary {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dirichlet" => Ok(Self::Dirichlet),
            "periodic" => Ok(Self::Periodic),
            _ => Err(Error::InvalidParameter(format!("unknown boundary condition `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Domain {
    Box(Cube),
    Torus(Torus),
}

impl Domain {
    pub fn coords(&self, idx: usize) -> Vec<i64> {
        match self {
            Domain::Box(c) => c.coords(idx),
            Domain::Torus(t) => t.coords(idx),
        }
    }

    pub fn locate(&self, x: &[i64]) -> Option<usize> {
        match self {
            Domain::Box(c) => c.index(x),
            Domain::Torus(t) => Some(t.index(x)),
        }
    }
}

/// Time-stepping scheme for the overdamped Langevin equation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Euler–Maruyama.
    #[default]
    EulerMaruyama,
    /// Leimkuhler–Matthews: the noise increment is the average of two
    /// consecutive Gaussians. Same cost as Euler–Maruyama with second-order
    /// accuracy of invariant-measure averages; exact invariant law for quadratic `V`.
    LeimkuhlerMatthews,
}

/// A finite-volume Gibbs measure `μ_{L,ξ}` or `μ_{L,ξ,per}` together with its Langevin generator.
#[derive(Clone, Debug)]
pub struct System {
    pub domain: Domain,
    pub boundary: Boundary,
    pub graph: LatticeGraph,
    /// Hamiltonian edge weights.
    pub weights: Vec<f64>,
    pub potential: Potential,
    pub tilt: Vec<f64>,
    pub convention: Convention,
    half_side: i64,
}

impl System {
    /// `μ_{L,ξ}` on `Q_L = [-L, L]^d` with zero boundary values.
    pub fn dirichlet(half_side: i64, dim: usize, potential: Potential, tilt: Vec<f64>, convention: Convention) -> Result<Self> {
        let cube = Cube::centered(half_side, dim)?;
        let graph = LatticeGraph::dirichlet(&cube);
        Self::assemble(Domain::Box(cube), Boundary::Dirichlet, graph, potential, tilt, convention, half_side)
    }

    /// `μ_{L,ξ,per}` on the torus of side `2L`, pinned at the corner.
    pub fn periodic(half_side: i64, dim: usize, potential: Potential, tilt: Vec<f64>, convention: Convention) -> Result<Self> {
        let torus = Torus::new(half_side, dim)?;
        let graph = LatticeGraph::periodic(&torus);
        Self::assemble(Domain::Torus(torus), Boundary::Periodic, graph, potential, tilt, convention, half_side)
    }

    pub fn new(boundary: Boundary, half_side: i64, dim: usize, potential: Potential, tilt: Vec<f64>, convention: Convention) -> Result<Self> {
        match boundary {
            Boundary::Dirichlet => Self::dirichlet(half_side, dim, potential, tilt, convention),
            Boundary::Periodic => Self::periodic(half_side, dim, potential, tilt, convention),
        }
    }

    fn assemble(
        domain: Domain,
        boundary: Boundary,
        graph: LatticeGraph,
        potential: Potential,
        tilt: Vec<f64>,
        convention: Convention,
        half_side: i64,
    ) -> Result<Self> {
        if tilt.len() != graph.dim {
            return Err(Error::DimensionMismatch { expected: graph.dim, got: tilt.len() });
        }
        if tilt.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidParameter("tilt must be finite".into()));
        }
        let potential = potential.validated()?;
        let weights = graph.hamiltonian_weights(convention);
        Ok(Self { domain, boundary, graph, weights, potential, tilt, convention, half_side })
    }

    /// The same measure at another tilt.
    pub fn with_tilt(&self, tilt: Vec<f64>) -> Result<Self> {
        let mut s = self.clone();
        if tilt.len() != s.graph.dim {
            return Err(Error::DimensionMismatch { expected: s.graph.dim, got: tilt.len() });
        }
        s.tilt = tilt;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.graph.dim
    }

    pub fn half_side(&self) -> i64 {
        self.half_side
    }

    pub fn num_vertices(&self) -> usize {
        self.graph.num_vertices
    }

    /// `|Q_L|`, the normalization in the surface tension: `(2L+1)^d` on the box, `(2L)^d` on the torus.
    pub fn volume(&self) -> f64 {
        self.num_vertices() as f64
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().cloned().fold(0.0, f64::max)
    }

    /// Largest stable explicit step, `1 / (4 d Λ w_max)`.
    pub fn stability_bound(&self) -> f64 {
        1.0 / (4.0 * self.dim() as f64 * self.potential.big_lambda() * self.max_weight())
    }

    /// `∇φ(e) - ξ_i` on edge `k`.
    #[inline]
    pub fn tilted_gradient(&self, phi: &[f64], k: usize) -> f64 {
        let e = self.graph.edges[k];
        phi[e.head] - phi[e.tail] - self.tilt[e.dir]
    }

    /// `H(φ) = Σ_e w_e V(∇φ(e) - ξ·e)`.
    pub fn hamiltonian(&self, phi: &[f64]) -> f64 {
        (0..self.graph.edges.len()).map(|k| self.weights[k] * self.potential.value(self.tilted_gradient(phi, k))).sum()
    }

    /// `-∂H/∂φ` at every vertex; zero at inactive vertices.
    pub fn drift(&self, phi: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let v = &self.potential;
        for (k, e) in self.graph.edges.iter().enumerate() {
            let t = phi[e.head] - phi[e.tail] - self.tilt[e.dir];
            let f = self.weights[k] * v.first(t);
            out[e.tail] += f;
            out[e.head] -= f;
        }
        for (o, &a) in out.iter_mut().zip(&self.graph.active) {
            if !a {
                *o = 0.0;
            }
        }
    }

    /// Helffer–Sjöstrand conductances `w_e V''(∇φ(e) - ξ·e)`.
    pub fn conductance(&self, phi: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.weights[k] * self.potential.second(self.tilted_gradient(phi, k));
        }
    }

    pub fn zero_state(&self) -> FieldState {
        FieldState { boundary: self.boundary, values: vec![0.0; self.num_vertices()], step: 0, time: 0.0 }
    }

    fn check_dt(&self, dt: f64) -> Result<()> {
        let bound = self.stability_bound();
        if !(dt > 0.0) || dt > bound * (1.0 + 1e-12) {
            return Err(Error::UnstableStep { dt, bound });
        }
        Ok(())
    }

    /// `φ ← φ + dt·drift + increment` at active vertices, then re-pin on the torus.
    fn apply(&self, phi: &mut [f64], drift: &[f64], dt: f64, increment: &[f64]) {
        for x in 0..phi.len() {
            if self.graph.active[x] {
                phi[x] += dt * drift[x] + increment[x];
            }
        }
        if self.boundary == Boundary::Periodic {
            let p = phi[0];
            phi.iter_mut().for_each(|v| *v -= p);
        }
    }
}

/// A configuration and its position along a trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldState {
    pub boundary: Boundary,
    pub values: Vec<f64>,
    pub step: u64,
    pub time: f64,
}

impl FieldState {
    fn check(&self, system: &System) -> Result<()> {
        if self.values.len() != system.num_vertices() {
            return Err(Error::DimensionMismatch { expected: system.num_vertices(), got: self.values.len() });
        }
        Ok(())
    }
}

fn em_step(system: &System, state: &mut FieldState, dt: f64, noise: &[f64]) -> Result<()> {
    system.check_dt(dt)?;
    state.check(system)?;
    if noise.len() != state.values.len() {
        return Err(Error::DimensionMismatch { expected: state.values.len(), got: noise.len() });
    }
    let mut drift = vec![0.0; state.values.len()];
    system.drift(&state.values, &mut drift);
    let s = (2.0 * dt).sqrt();
    let inc: Vec<f64> = noise.iter().map(|z| s * z).collect();
    system.apply(&mut state.values, &drift, dt, &inc);
    state.step += 1;
    state.time += dt;
    Ok(())
}

/// One Euler–Maruyama step of the Dirichlet dynamics; `noise` holds one standard normal per vertex.
pub fn step_dirichlet(system: &System, state: &mut FieldState, dt: f64, noise: &[f64]) -> Result<()> {
    if system.boundary != Boundary::Dirichlet || state.boundary != Boundary::Dirichlet {
        return Err(Error::WrongBoundary("step_dirichlet"));
    }
    em_step(system, state, dt, noise)
}

/// One Euler–Maruyama step of the periodic dynamics followed by re-pinning at `x0`.
pub fn step_periodic(system: &System, state: &mut FieldState, dt: f64, noise: &[f64]) -> Result<()> {
    if system.boundary != Boundary::Periodic || state.boundary != Boundary::Periodic {
        return Err(Error::WrongBoundary("step_periodic"));
    }
    em_step(system, state, dt, noise)
}

pub(crate) fn fill_normal<R: Rng>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

/// Independent generator for stream `k` of a seed.
pub fn stream_rng(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

/// A single Langevin chain owning its state and random stream.
#[derive(Clone, Debug)]
pub struct Chain {
    pub system: System,
    pub state: FieldState,
    pub dt: f64,
    pub scheme: Scheme,
    rng: ChaCha8Rng,
    /// Pending Gaussian `R_{n+1}` for the Leimkuhler–Matthews increment.
    pending: Vec<f64>,
    fresh: Vec<f64>,
    drift: Vec<f64>,
    inc: Vec<f64>,
}

impl Chain {
    pub fn new(system: System, dt: f64, scheme: Scheme, rng: ChaCha8Rng) -> Result<Self> {
        system.check_dt(dt)?;
        let state = system.zero_state();
        let n = state.values.len();
        let mut chain = Self {
            system,
            state,
            dt,
            scheme,
            rng,
            pending: vec![0.0; n],
            fresh: vec![0.0; n],
            drift: vec![0.0; n],
            inc: vec![0.0; n],
        };
        fill_normal(&mut chain.rng, &mut chain.pending);
        Ok(chain)
    }

    pub fn with_seed(system: System, dt: f64, scheme: Scheme, seed: u64) -> Result<Self> {
        Self::new(system, dt, scheme, ChaCha8Rng::seed_from_u64(seed))
    }

    /// Replace the configuration; the torus pin is re-imposed.
    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.state.values.len() {
            return Err(Error::DimensionMismatch { expected: self.state.values.len(), got: values.len() });
        }
        self.state.values.copy_from_slice(values);
        for (v, &a) in self.state.values.iter_mut().zip(&self.system.graph.active) {
            if !a {
                *v = 0.0;
            }
        }
        if self.system.boundary == Boundary::Periodic {
            let p = self.state.values[0];
            self.state.values.iter_mut().for_each(|v| *v -= p);
        }
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.state.values
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// A copy of this chain continuing from the same state with a different random stream.
    pub fn fork(&self, rng: ChaCha8Rng) -> Self {
        let mut c = self.clone();
        c.rng = rng;
        c
    }

    /// Draw this step's standard normals (one per vertex) from the chain's stream.
    pub fn draw_noise(&mut self) -> Vec<f64> {
        let mut z = vec![0.0; self.state.values.len()];
        fill_normal(&mut self.rng, &mut z);
        z
    }

    /// Advance one step using the supplied standard normals.
    pub fn step_with(&mut self, noise: &[f64]) {
        let s = (2.0 * self.dt).sqrt();
        match self.scheme {
            Scheme::EulerMaruyama => {
                for (i, z) in self.inc.iter_mut().zip(noise) {
                    *i = s * z;
                }
            }
            Scheme::LeimkuhlerMatthews => {
                for k in 0..self.inc.len() {
                    self.inc[k] = 0.5 * s * (self.pending[k] + noise[k]);
                }
                self.pending.copy_from_slice(noise);
            }
        }
        self.system.drift(&self.state.values, &mut self.drift);
        self.system.apply(&mut self.state.values, &self.drift, self.dt, &self.inc);
        self.state.step += 1;
        self.state.time += self.dt;
    }

    pub fn step(&mut self) {
        fill_normal(&mut self.rng, &mut self.fresh);
        let noise = std::mem::take(&mut self.fresh);
        self.step_with(&noise);
        self.fresh = noise;
    }

    pub fn advance(&mut self, steps: u64) {
        for _ in 0..steps {
            self.step();
        }
    }

    /// Advance by a time span, rounding to whole steps.
    pub fn advance_time(&mut self, t: f64) {
        self.advance((t / self.dt).round() as u64);
    }
}

/// Default burn-in `T0 = A·L²·log L`.
pub fn burn_in_time(factor: f64, half_side: i64) -> f64 {
    let l = half_side as f64;
    factor * l * l * l.max(2.0).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub dt: f64,
    pub scheme: Scheme,
    /// `A` in `T0 = A·L²·log L`.
    pub burn_in_factor: f64,
    /// Steps between snapshots.
    pub stride: u64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self { dt: 0.02, scheme: Scheme::LeimkuhlerMatthews, burn_in_factor: 4.0, stride: 10, samples: 1000, seed: 1 }
    }
}

/// A field snapshot taken from a running chain.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub step: u64,
    pub time: f64,
    pub seed: u64,
    pub values: Vec<f64>,
}

/// Stream of equilibrium snapshots.
pub struct EquilibriumRun {
    chain: Chain,
    stride: u64,
    remaining: usize,
    seed: u64,
}

impl Iterator for EquilibriumRun {
    type Item = Snapshot;

    fn next(&mut self) -> Option<Snapshot> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        self.chain.advance(self.stride);
        Some(Snapshot {
            step: self.chain.state.step,
            time: self.chain.state.time,
            seed: self.seed,
            values: self.chain.state.values.clone(),
        })
    }
}

impl EquilibriumRun {
    pub fn chain(&self) -> &Chain {
        &self.chain
    }
}

/// Burn in from the zero field for `A·L²·log L` and then emit `samples` snapshots `stride` steps apart.
pub fn sample_equilibrium(system: System, config: &TrajectoryConfig) -> Result<EquilibriumRun> {
    if config.stride == 0 {
        return Err(Error::InvalidParameter("stride must be >= 1".into()));
    }
    if !(config.burn_in_factor >= 0.0) {
        return Err(Error::InvalidParameter("burn-in factor must be >= 0".into()));
    }
    let t0 = burn_in_time(config.burn_in_factor, system.half_side());
    let mut chain = Chain::with_seed(system, config.dt, config.scheme, config.seed)?;
    chain.advance_time(t0);
    Ok(EquilibriumRun { chain, stride: config.stride, remaining: config.samples, seed: config.seed })
}

/// Two chains driven by the same Brownian increments on common vertices.
///
/// Vertices are matched by their coordinates in `Z^d` (both domains are centered
/// at the origin). Vertices of the second system that have no active partner in
/// the first receive independent noise.
#[derive(Clone, Debug)]
pub struct CoupledPair {
    pub first: Chain,
    pub second: Chain,
    partner: Vec<Option<usize>>,
    rng: ChaCha8Rng,
}

impl CoupledPair {
    pub fn new(first: System, second: System, dt: f64, scheme: Scheme, seed: u64) -> Result<Self> {
        if first.dim() != second.dim() {
            return Err(Error::Coupling("dimensions differ".into()));
        }
        let mut partner = vec![None; second.num_vertices()];
        let mut used = vec![false; first.num_vertices()];
        for y in 0..second.num_vertices() {
            if !second.graph.active[y] {
                continue;
            }
            if let Some(x) = first.domain.locate(&second.domain.coords(y)) {
                if first.graph.active[x] {
                    if used[x] {
                        return Err(Error::Coupling("the embedding wraps two vertices onto one".into()));
                    }
                    used[x] = true;
                    partner[y] = Some(x);
                }
            }
        }
        let first = Chain::new(first, dt, scheme, stream_rng(seed, 0))?;
        let second = Chain::new(second, dt, scheme, stream_rng(seed, 1))?;
        let mut pair = Self { first, second, partner, rng: stream_rng(seed, 2) };
        // align the pending Leimkuhler–Matthews draws as well
        let z = pair.first.pending.clone();
        let extra = pair.second_noise(&z);
        pair.second.pending = extra;
        Ok(pair)
    }

    fn second_noise(&mut self, first_noise: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.partner.len()];
        for (y, p) in self.partner.iter().enumerate() {
            out[y] = match p {
                Some(x) => first_noise[*x],
                None => self.rng.sample(StandardNormal),
            };
        }
        out
    }

    /// Number of vertices that share noise.
    pub fn shared(&self) -> usize {
        self.partner.iter().filter(|p| p.is_some()).count()
    }

    /// Advance both components with `shared_noise` on the first system's vertices.
    pub fn step_with(&mut self, shared_noise: &[f64]) {
        let second = self.second_noise(shared_noise);
        self.first.step_with(shared_noise);
        self.second.step_with(&second);
    }

    pub fn step(&mut self) {
        let z = self.first.draw_noise();
        self.step_with(&z);
    }

    /// `sup_x |φ(x) - φ̃(x)|` over matched vertices.
    pub fn sup_difference(&self) -> f64 {
        self.matched_differences().fold(0.0, |m, d| m.max(d.abs()))
    }

    /// `Σ_x (φ(x) - φ̃(x))²` over matched vertices.
    pub fn l2_difference(&self) -> f64 {
        self.matched_differences().map(|d| d * d).sum()
    }

    fn matched_differences(&self) -> impl Iterator<Item = f64> + '_ {
        let a = self.first.values();
        let b = self.second.values();
        self.partner.iter().enumerate().filter_map(move |(y, p)| p.map(|x| a[x] - b[y]))
    }
}

/// Advance `pair` by one step with the given noise on the first system's vertices.
pub fn coupled_step(pair: &mut CoupledPair, shared_noise: &[f64]) -> Result<()> {
    if shared_noise.len() != pair.first.values().len() {
        return Err(Error::DimensionMismatch { expected: pair.first.values().len(), got: shared_noise.len() });
    }
    pair.step_with(shared_noise);
    Ok(())
}

/// Empirical exceedance curve of trajectory maxima at thresholds `s·log(L·T)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OscillationTail {
    pub scale: f64,
    pub s: Vec<f64>,
    pub exceedance: Vec<f64>,
}

impl OscillationTail {
    /// Smallest `s` on the grid at which the exceedance drops to `1/e` or below.
    pub fn threshold_at_inv_e(&self) -> Option<f64> {
        let target = (-1.0f64).exp();
        self.s.iter().zip(&self.exceedance).find(|(_, &e)| e <= target).map(|(s, _)| *s)
    }
}

/// Tail statistics of `max_{t,x} |φ_t(x)|` over independent stationary trajectory segments.
pub fn measure_dynamic_oscillation(maxima: &[f64], half_side: i64, horizon: f64, s_grid: &[f64]) -> Result<OscillationTail> {
    if maxima.is_empty() {
        return Err(Error::InsufficientData("no trajectory maxima".into()));
    }
    let scale = ((half_side as f64) * horizon.max(1.0)).max(std::f64::consts::E).ln();
    let n = maxima.len() as f64;
    let exceedance =
        s_grid.iter().map(|s| maxima.iter().filter(|&&m| m > s * scale).count() as f64 / n).collect();
    Ok(OscillationTail { scale, s: s_grid.to_vec(), exceedance })
}

/// Header of a snapshot dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub dim: u32,
    pub half_side: u32,
    pub boundary: Boundary,
    pub tilt: Vec<f64>,
    pub seed: u64,
    pub dt: f64,
    pub step: u64,
}

const MAGIC: &[u8; 8] = b"GRADPHI1";

/// Write `header` followed by `values` as little-endian `f64` in canonical vertex order.
pub fn write_snapshot<W: Write>(mut w: W, header: &SnapshotHeader, values: &[f64]) -> Result<()> {
    if header.tilt.len() != header.dim as usize {
        return Err(Error::Snapshot("tilt length does not match dimension".into()));
    }
    w.write_all(MAGIC)?;
    w.write_all(&header.dim.to_le_bytes())?;
    w.write_all(&header.half_side.to_le_bytes())?;
    w.write_all(&[match header.boundary {
        Boundary::Dirichlet => 0u8,
        Boundary::Periodic => 1u8,
    }])?;
    for t in &header.tilt {
        w.write_all(&t.to_le_bytes())?;
    }
    w.write_all(&header.seed.to_le_bytes())?;
    w.write_all(&header.dt.to_le_bytes())?;
    w.write_all(&header.step.to_le_bytes())?;
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_snapshot<R: Read>(mut r: R) -> Result<(SnapshotHeader, Vec<f64>)> {
    if &read_array::<_, 8>(&mut r)? != MAGIC {
        return Err(Error::Snapshot("bad magic".into()));
    }
    let dim = u32::from_le_bytes(read_array(&mut r)?);
    if dim == 0 || dim > 8 {
        return Err(Error::Snapshot(format!("dimension {dim}")));
    }
    let half_side = u32::from_le_bytes(read_array(&mut r)?);
    let boundary = match read_array::<_, 1>(&mut r)?[0] {
        0 => Boundary::Dirichlet,
        1 => Boundary::Periodic,
        b => return Err(Error::Snapshot(format!("boundary tag {b}"))),
    };
    let mut tilt = Vec::with_capacity(dim as usize);
    for _ in 0..dim {
        tilt.push(f64::from_le_bytes(read_array(&mut r)?));
    }
    let seed = u64::from_le_bytes(read_array(&mut r)?);
    let dt = f64::from_le_bytes(read_array(&mut r)?);
    let step = u64::from_le_bytes(read_array(&mut r)?);
    let n = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let expected = match boundary {
        Boundary::Dirichlet => (2 * half_side as usize + 1).pow(dim),
        Boundary::Periodic => (2 * half_side as usize).pow(dim),
    };
    if n != expected {
        return Err(Error::Snapshot(format!("{n} values, expected {expected}")));
    }
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(f64::from_le_bytes(read_array(&mut r)?));
    }
    Ok((SnapshotHeader { dim, half_side, boundary, tilt, seed, dt, step }, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_single(l: i64) -> System {
        System::dirichlet(l, 2, Potential::quadratic(1.0).unwrap(), vec![0.0, 0.0], Convention::Single).unwrap()
    }

    #[test]
    fn delta_heat_step() {
        let sys = quad_single(3);
        let mut st = sys.zero_state();
        let o = match &sys.domain {
            Domain::Box(c) => c.index(&[0, 0]).unwrap(),
            _ => unreachable!(),
        };
        st.values[o] = 1.0;
        let zero = vec![0.0; st.values.len()];
        step_dirichlet(&sys, &mut st, 0.01, &zero).unwrap();
        assert!((st.values[o] - 0.96).abs() < 1e-15);
    }

    #[test]
    fn drift_is_laplacian_for_quadratic() {
        let sys = quad_single(3);
        let phi: Vec<f64> =
            (0..sys.num_vertices()).map(|i| if sys.graph.active[i] { (i as f64 * 0.37).sin() } else { 0.0 }).collect();
        let mut d = vec![0.0; phi.len()];
        sys.drift(&phi, &mut d);
        let lap = sys.graph.div_star(&sys.graph.gradient(&phi));
        for x in 0..phi.len() {
            if sys.graph.active[x] {
                assert!((d[x] + lap[x]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flat_field_has_no_drift_under_single_counting() {
        let sys = System::dirichlet(4, 2, Potential::logcosh(0.5).unwrap(), vec![0.7, -0.3], Convention::Single).unwrap();
        let mut d = vec![0.0; sys.num_vertices()];
        sys.drift(&vec![0.0; sys.num_vertices()], &mut d);
        assert!(d.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn drift_is_minus_energy_gradient() {
        for conv in [Convention::Paired, Convention::Single] {
            let sys = System::dirichlet(2, 2, Potential::logcosh(0.5).unwrap(), vec![0.4, 0.1], conv).unwrap();
            let phi: Vec<f64> =
                (0..sys.num_vertices()).map(|i| if sys.graph.active[i] { (i as f64).cos() } else { 0.0 }).collect();
            let mut d = vec![0.0; phi.len()];
            sys.drift(&phi, &mut d);
            let h = 1e-6;
            for x in 0..phi.len() {
                if !sys.graph.active[x] {
                    continue;
                }
                let mut p = phi.clone();
                p[x] += h;
                let up = sys.hamiltonian(&p);
                p[x] -= 2.0 * h;
                let dn = sys.hamiltonian(&p);
                assert!((d[x] + (up - dn) / (2.0 * h)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn unstable_step_rejected() {
        let sys = quad_single(3);
        let mut st = sys.zero_state();
        let z = vec![0.0; st.values.len()];
        assert!(matches!(step_dirichlet(&sys, &mut st, 0.2, &z), Err(Error::UnstableStep { .. })));
        assert!(matches!(step_periodic(&sys, &mut st, 0.01, &z), Err(Error::WrongBoundary(_))));
    }

    #[test]
    fn periodic_pin_is_kept() {
        let sys = System::periodic(3, 2, Potential::logcosh(0.5).unwrap(), vec![0.2, 0.0], Convention::Paired).unwrap();
        let mut ch = Chain::with_seed(sys, 0.02, Scheme::EulerMaruyama, 3).unwrap();
        ch.advance(50);
        assert_eq!(ch.values()[0], 0.0);
    }

    #[test]
    fn identical_pair_stays_identical() {
        let s = System::dirichlet(4, 2, Potential::logcosh(0.5).unwrap(), vec![0.3, 0.0], Convention::Paired).unwrap();
        let mut pair = CoupledPair::new(s.clone(), s, 0.02, Scheme::LeimkuhlerMatthews, 11).unwrap();
        for _ in 0..200 {
            pair.step();
        }
        assert_eq!(pair.first.values(), pair.second.values());
    }

    #[test]
    fn snapshot_roundtrip() {
        let header = SnapshotHeader {
            dim: 2,
            half_side: 2,
            boundary: Boundary::Dirichlet,
            tilt: vec![0.3, -1.0],
            seed: 42,
            dt: 0.01,
            step: 17,
        };
        let values: Vec<f64> = (0..25).map(|i| i as f64 * 0.5 - 3.0).collect();
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &header, &values).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 4 + 1 + 16 + 8 + 8 + 8 + 8 + 25 * 8);
        let (h, v) = read_snapshot(&buf[..]).unwrap();
        assert_eq!(h, header);
        assert_eq!(v, values);
        assert!(read_snapshot(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn oscillation_tail_is_monotone() {
        let maxima = [1.0, 2.0, 3.0, 5.0, 8.0];
        let tail = measure_dynamic_oscillation(&maxima, 8, 100.0, &[0.0, 0.2, 0.5, 1.0, 2.0]).unwrap();
        assert!(tail.exceedance.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(tail.exceedance[0], 1.0);
    }
}
