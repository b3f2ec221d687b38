//! Helffer–Sjöstrand machinery: conductances read off Langevin trajectories,
//! the random walk driven by them, and stochastic representations of solutions
//! of `(-L + ∇*a∇) u = f`.
//!
//! Conductances are `a(t,e) = w_e V''(∇φ_t(e) - ξ·e)` with the Hamiltonian edge
//! weights `w_e` of the system, so that `∇*a∇` is the Hessian of `H` in `φ`.
//!
//! The parabolic problems are integrated with explicit Euler steps on the
//! environment's own time grid. For a frozen operator `K` the left Riemann sum
//! `dt Σ_n (I - dt K)^n f` equals `K⁻¹ f` exactly, so the time discretization
//! adds no bias to the elliptic limit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::dynamics::{burn_in_time, stream_rng, Boundary, Chain, Scheme, System};
use crate::error::{Error, Result};
use crate::lattice::{Cube, LatticeGraph};
use crate::potential::Interaction;
use crate::stats::{batch_means, iid_estimate, mean, Estimate, MatrixEstimate};

/// Field snapshots recorded at a fixed time spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub spacing: f64,
    pub fields: Vec<Vec<f64>>,
}

/// Record `count` snapshots `stride` steps apart, starting with the current state.
pub fn record_trajectory(chain: &mut Chain, count: usize, stride: u64) -> Trajectory {
    let mut fields = Vec::with_capacity(count);
    for k in 0..count {
        if k > 0 {
            chain.advance(stride);
        }
        fields.push(chain.values().to_vec());
    }
    Trajectory { spacing: chain.dt * stride as f64, fields }
}

/// `a(t, e)`, piecewise constant on snapshot intervals `[kΔ, (k+1)Δ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicConductance {
    pub spacing: f64,
    pub values: Vec<Vec<f64>>,
}

impl DynamicConductance {
    /// Time span `[0, horizon)` covered by the recording.
    pub fn horizon(&self) -> f64 {
        self.spacing * self.values.len() as f64
    }

    pub fn slice(&self, t: f64) -> Result<&[f64]> {
        if !(t >= 0.0 && t < self.horizon()) {
            return Err(Error::OutsideHorizon { t, horizon: self.horizon() });
        }
        Ok(&self.values[((t / self.spacing) as usize).min(self.values.len() - 1)])
    }

    pub fn at(&self, t: f64, edge: usize) -> Result<f64> {
        Ok(self.slice(t)?[edge])
    }
}

pub fn dynamic_conductance(system: &System, trajectory: &Trajectory) -> DynamicConductance {
    let m = system.graph.edges.len();
    let values = trajectory
        .fields
        .iter()
        .map(|phi| {
            let mut a = vec![0.0; m];
            system.conductance(phi, &mut a);
            a
        })
        .collect();
    DynamicConductance { spacing: trajectory.spacing, values }
}

/// What happens when a walk tries to use an edge that is not available.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WalkBoundary {
    /// Jumps leaving the edge set are suppressed.
    Reflecting,
    /// The walk stops on reaching an inactive vertex.
    Absorbing,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkEvent {
    pub time: f64,
    pub edge: usize,
    /// Vertex after the jump.
    pub position: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkPath {
    pub start: usize,
    pub events: Vec<WalkEvent>,
    pub end: usize,
    pub absorbed: bool,
    /// Proposals made by the thinning, accepted or not.
    pub proposals: usize,
}

/// Neighbour lookup by direction: `(edge, neighbour)` for each vertex, direction and sign.
#[derive(Clone, Debug)]
pub struct NeighbourTable {
    dim: usize,
    table: Vec<Option<(usize, usize)>>,
}

impl NeighbourTable {
    pub fn new(graph: &LatticeGraph) -> Self {
        let d = graph.dim;
        let mut table = vec![None; graph.num_vertices * 2 * d];
        for (k, e) in graph.edges.iter().enumerate() {
            table[(e.tail * d + e.dir) * 2] = Some((k, e.head));
            table[(e.head * d + e.dir) * 2 + 1] = Some((k, e.tail));
        }
        Self { dim: d, table }
    }

    /// Edge and neighbour in direction `dir`, forward when `backward` is false.
    #[inline]
    pub fn get(&self, x: usize, dir: usize, backward: bool) -> Option<(usize, usize)> {
        self.table[(x * self.dim + dir) * 2 + backward as usize]
    }
}

/// Continuous-time walk with jump rate `a(t, e)` across each edge, by thinning:
/// proposals at rate `2d·bound`, a uniformly chosen direction, acceptance `a/bound`.
pub fn simulate_walk<R: Rng>(
    dc: &DynamicConductance,
    graph: &LatticeGraph,
    start: usize,
    horizon: f64,
    bound: f64,
    policy: WalkBoundary,
    rng: &mut R,
) -> Result<WalkPath> {
    if horizon > dc.horizon() + 1e-12 {
        return Err(Error::OutsideHorizon { t: horizon, horizon: dc.horizon() });
    }
    if !(bound > 0.0) {
        return Err(Error::InvalidParameter("thinning bound must be positive".into()));
    }
    let nb = NeighbourTable::new(graph);
    let d = graph.dim;
    let clock = Exp::new(2.0 * d as f64 * bound).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut t = 0.0;
    let mut x = start;
    let mut events = Vec::new();
    let mut proposals = 0;
    let mut absorbed = policy == WalkBoundary::Absorbing && !graph.active[x];
    while !absorbed {
        t += clock.sample(rng);
        if t >= horizon {
            break;
        }
        proposals += 1;
        let k = rng.random_range(0..2 * d);
        let Some((edge, y)) = nb.get(x, k / 2, k % 2 == 1) else { continue };
        let a = dc.at(t.min(dc.horizon() - 1e-12), edge)?;
        if a > bound * (1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!("conductance {a} exceeds the thinning bound {bound}")));
        }
        if rng.random::<f64>() * bound < a {
            x = y;
            events.push(WalkEvent { time: t, edge, position: y });
            if policy == WalkBoundary::Absorbing && !graph.active[y] {
                absorbed = true;
            }
        }
    }
    Ok(WalkPath { start, events, end: x, absorbed, proposals })
}

/// A cube `U` inside the environment's domain with its edges matched to environment edges.
#[derive(Clone, Debug)]
pub struct SubCube {
    pub cube: Cube,
    pub graph: LatticeGraph,
    /// Environment vertex of each vertex of `U`.
    pub vertex_map: Vec<usize>,
    /// Environment edge of each edge of `graph`.
    pub edge_map: Vec<usize>,
}

impl SubCube {
    /// `U` with zero boundary values.
    pub fn dirichlet(system: &System, cube: &Cube) -> Result<Self> {
        Self::with_graph(system, cube, LatticeGraph::dirichlet(cube))
    }

    /// `U°` with zero flux across `∂E(U)`.
    pub fn neumann(system: &System, cube: &Cube) -> Result<Self> {
        Self::with_graph(system, cube, LatticeGraph::neumann(cube))
    }

    fn with_graph(system: &System, cube: &Cube, graph: LatticeGraph) -> Result<Self> {
        if cube.dim() != system.dim() {
            return Err(Error::DimensionMismatch { expected: system.dim(), got: cube.dim() });
        }
        let mut vertex_map = Vec::with_capacity(cube.num_vertices());
        let mut seen = vec![false; system.num_vertices()];
        for i in 0..cube.num_vertices() {
            let v = system
                .domain
                .locate(&cube.coords(i))
                .ok_or_else(|| Error::InvalidParameter("cube does not fit in the domain".into()))?;
            if seen[v] {
                return Err(Error::InvalidParameter("cube wraps around the torus".into()));
            }
            seen[v] = true;
            vertex_map.push(v);
        }
        let nb = NeighbourTable::new(&system.graph);
        let mut edge_map = Vec::with_capacity(graph.edges.len());
        for e in &graph.edges {
            let (k, h) = nb
                .get(vertex_map[e.tail], e.dir, false)
                .ok_or_else(|| Error::InvalidParameter("edge of the cube missing from the domain".into()))?;
            debug_assert_eq!(h, vertex_map[e.head]);
            edge_map.push(k);
        }
        Ok(Self { cube: cube.clone(), graph, vertex_map, edge_map })
    }

    /// Restrict environment conductances to `U`.
    pub fn restrict(&self, env_a: &[f64], out: &mut [f64]) {
        for (o, &k) in out.iter_mut().zip(&self.edge_map) {
            *o = env_a[k];
        }
    }

    /// One explicit Euler step of `∂_t w = -∇*(a∇w)`.
    pub fn step(&self, a: &[f64], w: &mut [f64], dt: f64, scratch: &mut [f64]) {
        self.graph.apply_operator(a, w, scratch);
        for (x, s) in w.iter_mut().zip(scratch.iter()) {
            *x -= dt * s;
        }
    }
}

/// Options shared by the Helffer–Sjöstrand estimators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HsOptions {
    /// Independent environment continuations per estimate.
    pub trajectories: usize,
    /// `A` in the truncation horizon `T_max = A·L²·log L`, `L` the half side of `U`.
    pub horizon_factor: f64,
    /// Largest tolerated fraction of the estimate carried by the extrapolated tail.
    pub tail_tolerance: f64,
    pub seed: u64,
}

impl Default for HsOptions {
    fn default() -> Self {
        Self { trajectories: 16, horizon_factor: 4.0, tail_tolerance: 1e-3, seed: 7 }
    }
}

/// Per-vertex estimate of an HS solution on a cube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HSEstimate {
    pub description: String,
    /// Estimate at each vertex of `U`, in the cube's canonical order.
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub trajectories: usize,
    pub horizon: f64,
    /// Largest share of any vertex value contributed by the extrapolated tail.
    pub tail_fraction: f64,
    pub flagged: bool,
}

fn truncation_horizon(factor: f64, cube: &Cube) -> f64 {
    let l = (cube.side() / 2).max(1);
    burn_in_time(factor, l)
}

/// Integrate `w` along an Euler–Maruyama environment continuation, returning `∫ w dt` with a geometric tail correction.
fn integrate_forward(env: &mut Chain, sub: &SubCube, mut w: Vec<f64>, horizon: f64) -> (Vec<f64>, f64) {
    let dt = env.dt;
    let n_env = env.system.graph.edges.len();
    let mut env_a = vec![0.0; n_env];
    let mut a = vec![0.0; sub.graph.edges.len()];
    let mut scratch = vec![0.0; w.len()];
    let mut integral = vec![0.0; w.len()];
    let steps = (horizon / dt).ceil() as usize;
    let norm0: f64 = w.iter().map(|v| v.abs()).sum::<f64>().max(1e-300);
    let mut prev_norm = norm0;
    let mut rate = 0.0;
    for s in 0..steps {
        env.system.conductance(env.values(), &mut env_a);
        sub.restrict(&env_a, &mut a);
        for (i, v) in integral.iter_mut().zip(&w) {
            *i += dt * v;
        }
        sub.step(&a, &mut w, dt, &mut scratch);
        env.step();
        if (s + 1) % 64 == 0 {
            let norm: f64 = w.iter().map(|v| v.abs()).sum();
            rate = ((prev_norm / norm.max(1e-300)).ln() / (64.0 * dt)).max(0.0);
            prev_norm = norm;
            if norm < 1e-14 * norm0 {
                break;
            }
        }
    }
    let mut tail_fraction: f64 = 0.0;
    if rate > 0.0 {
        for (i, v) in integral.iter_mut().zip(&w) {
            let tail = v / rate;
            if i.abs() > 0.0 {
                tail_fraction = tail_fraction.max((tail / *i).abs());
            }
            *i += tail;
        }
    } else if w.iter().any(|v| v.abs() > 1e-12 * norm0) {
        tail_fraction = f64::INFINITY;
    }
    (integral, tail_fraction)
}

fn per_vertex_average(runs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = runs[0].len();
    let mut values = vec![0.0; n];
    let mut stderr = vec![0.0; n];
    for x in 0..n {
        let col: Vec<f64> = runs.iter().map(|r| r[x]).collect();
        let e = iid_estimate(&col);
        values[x] = e.value;
        stderr[x] = if runs.len() > 1 { e.stderr } else { 0.0 };
    }
    (values, stderr)
}

/// `v(x, φ0)` for `(-L + ∇*a∇) v = f` on `U` with zero Dirichlet data, where `φ0` is the
/// environment's current state. `source` maps an environment field to `f` on the vertices of `U`.
///
/// Each trajectory solves `∂_t w = -∇*(a(t)∇w)` from `w(0) = f(·, φ0)` along an
/// independent continuation of the environment and integrates `w` in time.
pub fn hs_dirichlet_estimate(
    env: &Chain,
    cube: &Cube,
    source: &dyn Fn(&System, &[f64]) -> Vec<f64>,
    opts: &HsOptions,
) -> Result<HSEstimate> {
    let sub = SubCube::dirichlet(&env.system, cube)?;
    let horizon = truncation_horizon(opts.horizon_factor, cube);
    let mut f = source(&env.system, env.values());
    if f.len() != cube.num_vertices() {
        return Err(Error::DimensionMismatch { expected: cube.num_vertices(), got: f.len() });
    }
    for (v, &act) in f.iter_mut().zip(&sub.graph.active) {
        if !act {
            *v = 0.0;
        }
    }
    run_forward(env, &sub, f, horizon, opts, "dirichlet")
}

fn run_forward(env: &Chain, sub: &SubCube, f: Vec<f64>, horizon: f64, opts: &HsOptions, label: &str) -> Result<HSEstimate> {
    if opts.trajectories == 0 {
        return Err(Error::InvalidParameter("at least one trajectory is required".into()));
    }
    let deterministic = env.system.potential.is_quadratic();
    let count = if deterministic { 1 } else { opts.trajectories };
    let mut runs = Vec::with_capacity(count);
    let mut tail_fraction: f64 = 0.0;
    for k in 0..count {
        let mut cont = env.fork(stream_rng(opts.seed, k as u64));
        cont.scheme = Scheme::EulerMaruyama;
        let (integral, tail) = integrate_forward(&mut cont, sub, f.clone(), horizon);
        tail_fraction = tail_fraction.max(tail);
        runs.push(integral);
    }
    let (values, stderr) = per_vertex_average(&runs);
    Ok(HSEstimate {
        description: format!("{label} HS solution on a cube of side {}", sub.cube.side()),
        values,
        stderr,
        trajectories: count,
        horizon,
        flagged: tail_fraction > opts.tail_tolerance,
        tail_fraction,
    })
}

/// `∇*(1_{∂E} g) + ∇*_int(-f)`-type source of the zero-flux problem, restricted to `U°`.
///
/// With flux `a∇u - f = q·e` on `∂E(U)` the boundary edges contribute
/// `-∇*(1_{∂E}(q·e))` and the interior part of `f` contributes `∇*(1_{int} f)`.
pub fn neumann_source(cube: &Cube, f_interior: Option<&[f64]>, q: &[f64]) -> Result<Vec<f64>> {
    if q.len() != cube.dim() {
        return Err(Error::DimensionMismatch { expected: cube.dim(), got: q.len() });
    }
    let full = LatticeGraph::dirichlet(cube);
    let interior = LatticeGraph::neumann(cube);
    let boundary_flux: Vec<f64> = full
        .edges
        .iter()
        .map(|e| if full.active[e.tail] && full.active[e.head] { 0.0 } else { q[e.dir] })
        .collect();
    let mut s: Vec<f64> = full.div_star(&boundary_flux).iter().map(|v| -v).collect();
    if let Some(f) = f_interior {
        if f.len() != interior.edges.len() {
            return Err(Error::DimensionMismatch { expected: interior.edges.len(), got: f.len() });
        }
        for (x, v) in interior.div_star(f).iter().enumerate() {
            s[x] += v;
        }
    }
    for (v, &act) in s.iter_mut().zip(&full.active) {
        if !act {
            *v = 0.0;
        }
    }
    Ok(s)
}

/// Neumann HS solution on `U`: `(-L + ∇*a∇) u = ∇*f` with `a∇u - f = q·e` on `∂E(U)`,
/// normalized to mean zero over `U°`. Boundary vertices are filled in from the flux
/// condition at the environment's current state; corners, which touch no edge, stay 0. `f` lives on the edges of `U°`.
pub fn hs_neumann_estimate(
    env: &Chain,
    cube: &Cube,
    f_source: Option<&dyn Fn(&System, &[f64]) -> Vec<f64>>,
    q: &[f64],
    opts: &HsOptions,
) -> Result<HSEstimate> {
    let sub = SubCube::neumann(&env.system, cube)?;
    let f = f_source.map(|src| src(&env.system, env.values()));
    let s = neumann_source(cube, f.as_deref(), q)?;
    let horizon = truncation_horizon(opts.horizon_factor, cube);
    let mut est = run_forward(env, &sub, s, horizon, opts, "neumann")?;
    let active = &sub.graph.active;
    let n_int = active.iter().filter(|a| **a).count() as f64;
    let m = est.values.iter().zip(active).filter(|(_, &a)| a).map(|(v, _)| v).sum::<f64>() / n_int;
    for (v, &a) in est.values.iter_mut().zip(active) {
        if a {
            *v -= m;
        }
    }
    // extend to ∂U through a∇u = q·e on boundary edges
    let full = LatticeGraph::dirichlet(cube);
    let mut env_a = vec![0.0; env.system.graph.edges.len()];
    env.system.conductance(env.values(), &mut env_a);
    let sub_full = SubCube::dirichlet(&env.system, cube)?;
    let mut a = vec![0.0; full.edges.len()];
    sub_full.restrict(&env_a, &mut a);
    let mut filled = vec![0usize; cube.num_vertices()];
    let mut acc = vec![0.0; cube.num_vertices()];
    for (k, e) in full.edges.iter().enumerate() {
        let slope = q[e.dir] / a[k];
        if full.active[e.tail] && !full.active[e.head] {
            acc[e.head] += est.values[e.tail] + slope;
            filled[e.head] += 1;
        } else if !full.active[e.tail] && full.active[e.head] {
            acc[e.tail] += est.values[e.head] - slope;
            filled[e.tail] += 1;
        }
    }
    for x in 0..cube.num_vertices() {
        if !active[x] && filled[x] > 0 {
            est.values[x] = acc[x] / filled[x] as f64;
        }
    }
    Ok(est)
}

/// Variance of an observable through its Helffer–Sjöstrand representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceComparison {
    pub hs: Estimate,
    pub direct: Estimate,
    /// Combined z-score of the difference.
    pub z: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceOptions {
    pub dt: f64,
    pub burn_in_factor: f64,
    /// Number of launched parabolic solutions.
    pub launches: usize,
    /// Time between launches.
    pub spacing: f64,
    pub horizon_factor: f64,
    pub seed: u64,
}

impl Default for VarianceOptions {
    fn default() -> Self {
        Self {
            dt: 0.02,
            burn_in_factor: 4.0,
            launches: 400,
            spacing: 1.0,
            horizon_factor: 4.0,
            seed: 3,
        }
    }
}

/// An observable `F(φ)` with its vertical derivative `∂_x F`.
pub trait Observable: Sync {
    fn value(&self, system: &System, phi: &[f64]) -> f64;
    /// `∂F/∂φ(x)` at every vertex (entries at fixed vertices are ignored).
    fn derivative(&self, system: &System, phi: &[f64], out: &mut [f64]);
    fn name(&self) -> String;
}

/// `F(φ) = Σ_x c_x φ(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearObservable {
    pub coeffs: Vec<f64>,
}

impl Observable for LinearObservable {
    fn value(&self, _: &System, phi: &[f64]) -> f64 {
        self.coeffs.iter().zip(phi).map(|(c, p)| c * p).sum()
    }

    fn derivative(&self, _: &System, _: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.coeffs);
    }

    fn name(&self) -> String {
        "linear".into()
    }
}

/// `F(φ) = Σ_e ψ(∇φ(e))` over the edges of the system, a nonlinear gradient observable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSum {
    /// `ψ(s) = sin(s)` when true, `ψ(s) = s²/2` otherwise.
    pub sine: bool,
}

impl Observable for GradientSum {
    fn value(&self, system: &System, phi: &[f64]) -> f64 {
        let g = system.graph.gradient(phi);
        g.iter().map(|&s| if self.sine { s.sin() } else { 0.5 * s * s }).sum()
    }

    fn derivative(&self, system: &System, phi: &[f64], out: &mut [f64]) {
        let g: Vec<f64> = system.graph.gradient(phi).iter().map(|&s| if self.sine { s.cos() } else { s }).collect();
        // ∂/∂φ(x) Σ_e ψ(φ(head) - φ(tail)) = ∇*ψ'(x)
        out.copy_from_slice(&system.graph.div_star(&g));
    }

    fn name(&self) -> String {
        if self.sine { "sum sin(grad)".into() } else { "sum grad^2/2".into() }
    }
}

struct Launch {
    w: Vec<f64>,
    age: f64,
    acc: f64,
}

/// `Var F = Σ_x ⟨∂_xF · u_x⟩` with `(-L + ∇*a∇)u = ∂F`, computed as
/// `∫_0^∞ E[Σ_y w(t,y) ∂_yF(φ_t)] dt` where `w(0) = ∂F(φ_0)` and `φ_0 ~ μ`.
/// Solutions are launched every `spacing` along one stationary chain, and the
/// direct sample variance of `F` on the same chain is reported next to it.
///
/// The chain is run with Euler–Maruyama steps: for that scheme the discrete sum
/// reproduces the variance under the chain's own stationary law, so the two
/// estimates share the `O(dt)` sampling bias instead of differing by it.
pub fn variance_via_hs(system: &System, obs: &dyn Observable, opts: &VarianceOptions) -> Result<VarianceComparison> {
    if system.boundary != Boundary::Dirichlet {
        return Err(Error::WrongBoundary("variance_via_hs"));
    }
    if opts.launches < 2 {
        return Err(Error::InvalidParameter("at least two launches are required".into()));
    }
    let mut chain = Chain::with_seed(system.clone(), opts.dt, Scheme::EulerMaruyama, opts.seed)?;
    chain.advance_time(burn_in_time(opts.burn_in_factor, system.half_side()));
    let cube = match &system.domain {
        crate::dynamics::Domain::Box(c) => c.clone(),
        _ => unreachable!(),
    };
    let horizon = truncation_horizon(opts.horizon_factor, &cube);
    let sub = SubCube::dirichlet(system, &cube)?;
    let n = system.num_vertices();
    let dt = opts.dt;
    let spacing_steps = ((opts.spacing / dt).round() as u64).max(1);
    let horizon_steps = (horizon / dt).ceil() as u64;
    let mut env_a = vec![0.0; system.graph.edges.len()];
    let mut scratch = vec![0.0; n];
    let mut deriv = vec![0.0; n];
    let mut live: Vec<Launch> = Vec::new();
    let mut done: Vec<f64> = Vec::new();
    let mut values = Vec::new();
    let mut step: u64 = 0;
    let mut launched = 0;
    while done.len() < opts.launches {
        let phi = chain.values();
        system.conductance(phi, &mut env_a);
        obs.derivative(system, phi, &mut deriv);
        for (d, &act) in deriv.iter_mut().zip(&system.graph.active) {
            if !act {
                *d = 0.0;
            }
        }
        if step % spacing_steps == 0 {
            values.push(obs.value(system, phi));
            if launched < opts.launches {
                live.push(Launch { w: deriv.clone(), age: 0.0, acc: 0.0 });
                launched += 1;
            }
        }
        for l in live.iter_mut() {
            l.acc += dt * l.w.iter().zip(&deriv).map(|(a, b)| a * b).sum::<f64>();
            sub.step(&env_a, &mut l.w, dt, &mut scratch);
            l.age += dt;
        }
        live.retain(|l| {
            if l.age >= horizon_steps as f64 * dt - 1e-9 {
                done.push(l.acc);
                false
            } else {
                true
            }
        });
        chain.step();
        step += 1;
    }
    let hs = batch_means(&done)?;
    let direct = variance_estimate(&values)?;
    let z = crate::stats::z(hs.value - direct.value, hs.stderr.hypot(direct.stderr));
    Ok(VarianceComparison { hs, direct, z, flagged: z > 4.0 })
}

/// Sample variance of a correlated series with a blocked jackknife error.
pub fn variance_estimate(series: &[f64]) -> Result<Estimate> {
    let tau = crate::stats::autocorrelation_time(series)?.tau;
    let sq: Vec<f64> = series.iter().map(|v| v * v).collect();
    let block = crate::stats::block_length(series.len(), tau);
    let (v, e) = crate::stats::jackknife(&[series.to_vec(), sq], block, |m| vec![m[1] - m[0] * m[0]])?;
    let n = series.len() as f64;
    Ok(Estimate { value: v[0] * n / (n - 1.0), stderr: e[0], n: series.len(), tau })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusivityOptions {
    pub environments: usize,
    pub walks_per_environment: usize,
    pub horizon: f64,
    pub dt: f64,
    pub scheme: Scheme,
    pub burn_in_factor: f64,
    pub seed: u64,
}

impl Default for DiffusivityOptions {
    fn default() -> Self {
        Self {
            environments: 16,
            walks_per_environment: 256,
            horizon: 100.0,
            dt: 0.02,
            scheme: Scheme::LeimkuhlerMatthews,
            burn_in_factor: 1.0,
            seed: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusivityEstimate {
    /// `(M(T) - M(T/2)) / T` with `M(t) = E[X_t X_tᵀ]`.
    pub matrix: MatrixEstimate,
    /// `M(T) / M(T/2)` along the diagonal; 2 for diffusive growth.
    pub growth_ratio: Vec<f64>,
    pub flagged: bool,
}

/// Long-time diffusivity of the walk in the stationary dynamic environment of a periodic system.
pub fn effective_diffusivity(system: &System, opts: &DiffusivityOptions) -> Result<DiffusivityEstimate> {
    if system.boundary != Boundary::Periodic {
        return Err(Error::WrongBoundary("effective_diffusivity"));
    }
    if opts.environments < 2 || opts.walks_per_environment == 0 || !(opts.horizon > 0.0) {
        return Err(Error::InvalidParameter("need >= 2 environments, >= 1 walk and a positive horizon".into()));
    }
    let d = system.dim();
    let nb = NeighbourTable::new(&system.graph);
    let bound = system.max_weight() * system.potential.big_lambda();
    let rate = 2.0 * d as f64 * bound;
    let clock = Exp::new(rate).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let frozen = system.potential.is_quadratic();
    let steps = (opts.horizon / opts.dt).round() as usize;
    let half = steps / 2;
    let t_full = steps as f64 * opts.dt;
    let t_half = half as f64 * opts.dt;
    let mut per_env: Vec<Vec<f64>> = Vec::with_capacity(opts.environments);
    let mut ratios = vec![Vec::new(); d];
    for k in 0..opts.environments {
        let mut chain = Chain::new(system.clone(), opts.dt, opts.scheme, stream_rng(opts.seed, 2 * k as u64))?;
        if !frozen {
            chain.advance_time(burn_in_time(opts.burn_in_factor, system.half_side()));
        }
        let mut rng: ChaCha8Rng = stream_rng(opts.seed, 2 * k as u64 + 1);
        let m = opts.walks_per_environment;
        let mut pos = vec![0usize; m];
        let mut disp = vec![0i64; m * d];
        let mut next: Vec<f64> = (0..m).map(|_| clock.sample(&mut rng)).collect();
        let mut a = vec![0.0; system.graph.edges.len()];
        system.conductance(chain.values(), &mut a);
        let mut m_half = vec![0.0; d * d];
        for s in 0..steps {
            if s == half {
                m_half = second_moment(&disp, d, m);
            }
            if !frozen {
                system.conductance(chain.values(), &mut a);
            }
            let t_end = (s + 1) as f64 * opts.dt;
            for w in 0..m {
                while next[w] < t_end {
                    let dirk = rng.random_range(0..2 * d);
                    let back = dirk % 2 == 1;
                    if let Some((edge, y)) = nb.get(pos[w], dirk / 2, back) {
                        if rng.random::<f64>() * bound < a[edge] {
                            pos[w] = y;
                            disp[w * d + dirk / 2] += if back { -1 } else { 1 };
                        }
                    }
                    next[w] += clock.sample(&mut rng);
                }
            }
            if !frozen {
                chain.step();
            }
        }
        let m_full = second_moment(&disp, d, m);
        per_env.push((0..d * d).map(|i| (m_full[i] - m_half[i]) / (2.0 * (t_full - t_half))).collect());
        for i in 0..d {
            ratios[i].push(m_full[i * d + i] / m_half[i * d + i].max(1e-300));
        }
    }
    let mut value = vec![0.0; d * d];
    let mut stderr = vec![0.0; d * d];
    for i in 0..d * d {
        let col: Vec<f64> = per_env.iter().map(|v| v[i]).collect();
        let e = iid_estimate(&col);
        value[i] = e.value;
        stderr[i] = e.stderr;
    }
    let growth_ratio: Vec<f64> = ratios.iter().map(|r| mean(r)).collect();
    let flagged = growth_ratio.iter().any(|r| (r - 2.0).abs() > 0.3);
    Ok(DiffusivityEstimate { matrix: MatrixEstimate { dim: d, value, stderr, n: opts.environments }, growth_ratio, flagged })
}

fn second_moment(disp: &[i64], d: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for w in 0..m {
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] += (disp[w * d + i] * disp[w * d + j]) as f64;
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= m as f64);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Convention;
    use crate::potential::Potential;
    use crate::solvers::conjugate_gradient;
    use rand::SeedableRng;

    fn env(potential: Potential, l: i64) -> Chain {
        let s = System::dirichlet(l, 2, potential, vec![0.2, 0.0], Convention::Single).unwrap();
        let mut c = Chain::with_seed(s, 0.02, Scheme::LeimkuhlerMatthews, 1).unwrap();
        c.advance(500);
        c
    }

    #[test]
    fn quadratic_dirichlet_estimate_is_the_elliptic_solve() {
        let c = env(Potential::quadratic(1.3).unwrap(), 4);
        let cube = Cube::centered(3, 2).unwrap();
        let f = |_: &System, _: &[f64]| -> Vec<f64> { (0..49).map(|i| ((i * 7) % 5) as f64 - 2.0).collect() };
        let est = hs_dirichlet_estimate(&c, &cube, &f, &HsOptions::default()).unwrap();
        let g = LatticeGraph::dirichlet(&cube);
        let a = vec![1.3; g.edges.len()];
        let (exact, _) = conjugate_gradient(&g, &a, 0.0, &f(&c.system, c.values()), 1e-13, 10_000).unwrap();
        for x in 0..49 {
            assert!((est.values[x] - exact[x]).abs() < 1e-8, "{x}: {} vs {}", est.values[x], exact[x]);
        }
        assert!(!est.flagged);
    }

    #[test]
    fn zero_source_gives_zero() {
        let c = env(Potential::logcosh(0.5).unwrap(), 3);
        let cube = Cube::centered(2, 2).unwrap();
        let f = |_: &System, _: &[f64]| vec![0.0; 25];
        let opts = HsOptions { trajectories: 2, ..Default::default() };
        let est = hs_dirichlet_estimate(&c, &cube, &f, &opts).unwrap();
        assert!(est.values.iter().all(|v| *v == 0.0));
        let n = hs_neumann_estimate(&c, &cube, None, &[0.0, 0.0], &opts).unwrap();
        assert!(n.values.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn neumann_quadratic_is_affine() {
        // constant conductance κ, flux q: u = ℓ_q / κ up to a constant
        let c = env(Potential::quadratic(2.0).unwrap(), 5);
        let cube = Cube::centered(3, 2).unwrap();
        let q = [0.7, -0.4];
        let est = hs_neumann_estimate(&c, &cube, None, &q, &HsOptions::default()).unwrap();
        // corners touch no edge of the cube
        let touched: Vec<usize> =
            (0..cube.num_vertices()).filter(|&x| cube.coords(x).iter().filter(|c| c.abs() == 3).count() < 2).collect();
        for &i in &touched {
            for &j in &touched {
                let xi = cube.coords(i);
                let xj = cube.coords(j);
                let affine = ((xi[0] - xj[0]) as f64 * q[0] + (xi[1] - xj[1]) as f64 * q[1]) / 2.0;
                assert!((est.values[i] - est.values[j] - affine).abs() < 1e-7, "{:?} {:?} {} {} {}", xi, xj, est.values[i], est.values[j], affine);
            }
        }
        let mean_int: f64 = cube.interior().iter().map(|&x| est.values[x]).sum();
        assert!(mean_int.abs() < 1e-9);
    }

    #[test]
    fn quadratic_variance_matches_the_gaussian_oracle() {
        let s = System::dirichlet(3, 2, Potential::quadratic(1.0).unwrap(), vec![0.0, 0.0], Convention::Paired).unwrap();
        let mut coeffs = vec![0.0; s.num_vertices()];
        coeffs[24] = 1.0;
        coeffs[17] = -0.5;
        let exact = crate::gaussian::DenseGaussian::new(&s).unwrap().linear_variance(&coeffs);
        let opts = VarianceOptions { launches: 20, spacing: 0.5, burn_in_factor: 1.0, ..Default::default() };
        let cmp = variance_via_hs(&s, &LinearObservable { coeffs }, &opts).unwrap();
        assert!((cmp.hs.value - exact).abs() < 1e-9 * exact, "{} vs {exact}", cmp.hs.value);
    }

    #[test]
    fn nonlinear_variance_agrees_with_direct() {
        let s = System::dirichlet(2, 2, Potential::logcosh(0.8).unwrap(), vec![0.3, 0.0], Convention::Single).unwrap();
        let opts = VarianceOptions { launches: 1500, spacing: 0.5, burn_in_factor: 2.0, ..Default::default() };
        let cmp = variance_via_hs(&s, &GradientSum { sine: true }, &opts).unwrap();
        assert!(cmp.z < 4.0, "{cmp:?}");
    }

    #[test]
    fn unit_rate_walk_has_poisson_jumps() {
        let cube = Cube::centered(50, 2).unwrap();
        let g = LatticeGraph::dirichlet(&cube);
        let dc = DynamicConductance { spacing: 10.0, values: vec![vec![1.0; g.edges.len()]] };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let start = cube.index(&[0, 0]).unwrap();
        let mut msd = 0.0;
        let n = 2000;
        for _ in 0..n {
            let p = simulate_walk(&dc, &g, start, 5.0, 1.0, WalkBoundary::Absorbing, &mut rng).unwrap();
            assert_eq!(p.proposals, p.events.len());
            let x = cube.coords(p.end);
            msd += (x[0] * x[0] + x[1] * x[1]) as f64;
        }
        msd /= n as f64;
        // E|X_t|² = 2d t
        assert!((msd - 20.0).abs() < 1.5, "{msd}");
    }

    #[test]
    fn reflecting_walk_stays_inside() {
        let cube = Cube::centered(2, 2).unwrap();
        let g = LatticeGraph::neumann(&cube);
        let dc = DynamicConductance { spacing: 1.0, values: vec![vec![1.5; g.edges.len()]; 50] };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let start = cube.index(&[0, 0]).unwrap();
        let p = simulate_walk(&dc, &g, start, 49.0, 1.5, WalkBoundary::Reflecting, &mut rng).unwrap();
        assert!(p.events.iter().all(|e| g.active[e.position]));
        assert!(simulate_walk(&dc, &g, start, 60.0, 1.5, WalkBoundary::Reflecting, &mut rng).is_err());
    }

    #[test]
    fn quadratic_walk_diffusivity() {
        let s = System::periodic(4, 2, Potential::quadratic(1.0).unwrap(), vec![0.0, 0.0], Convention::Single).unwrap();
        let opts = DiffusivityOptions { environments: 8, walks_per_environment: 4000, horizon: 40.0, ..Default::default() };
        let e = effective_diffusivity(&s, &opts).unwrap();
        for i in 0..2 {
            assert!((e.matrix.value[i * 2 + i] - 1.0).abs() < 0.05);
        }
        assert!(e.matrix.value[1].abs() < 0.05);
    }
}
