//! Surface tension and homogenization observables.
//!
//! With `G_i = Σ_{e ∥ e_i} w_e V'(∇φ(e) - ξ_i)` and `D_i = Σ_{e ∥ e_i} w_e V''(∇φ(e) - ξ_i)`,
//! differentiating `σ_L(ξ) = -|Q|⁻¹ log(Z_ξ / Z_0)` under the integral gives
//!
//! ```text
//! ∂_i σ_L = -⟨G_i⟩ / |Q|,    ∂_ij σ_L = (δ_ij ⟨D_i⟩ - Cov(G_i, G_j)) / |Q|.
//! ```
//!
//! The sign of the covariance term is the one fixed by the Gaussian oracle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dynamics::{burn_in_time, sample_equilibrium, stream_rng, Boundary, Chain, Scheme, System, TrajectoryConfig};
use crate::error::{Error, Result};
use crate::gaussian::{fft_nd, DenseGaussian, PeriodicGaussianSampler};
use crate::hs::SubCube;
use crate::lattice::{Convention, Cube, LatticeGraph};
use crate::potential::{Interaction, Potential};
use crate::solvers::conjugate_gradient;
use crate::stats::{
    autocorrelation_time, batch_means, block_length, gauss_legendre, jackknife, linear_fit, mean, Estimate,
    MatrixEstimate,
};

/// Per-snapshot sums `G_i` and `D_i`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TiltSeries {
    pub g: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
}

fn direction_sums(system: &System, phi: &[f64], g: &mut [f64], d: &mut [f64]) {
    g.iter_mut().for_each(|v| *v = 0.0);
    d.iter_mut().for_each(|v| *v = 0.0);
    for (k, e) in system.graph.edges.iter().enumerate() {
        let t = system.tilted_gradient(phi, k);
        let w = system.weights[k];
        g[e.dir] += w * system.potential.first(t);
        d[e.dir] += w * system.potential.second(t);
    }
}

/// Sample `G_i` and `D_i` along an equilibrium run.
pub fn tilt_series(system: &System, config: &TrajectoryConfig) -> Result<TiltSeries> {
    if config.samples < 32 {
        return Err(Error::InsufficientData(format!("{} samples; at least 32 are needed", config.samples)));
    }
    let dim = system.dim();
    let mut out = TiltSeries { g: vec![Vec::with_capacity(config.samples); dim], d: vec![Vec::with_capacity(config.samples); dim] };
    let mut g = vec![0.0; dim];
    let mut d = vec![0.0; dim];
    for snap in sample_equilibrium(system.clone(), config)? {
        direction_sums(system, &snap.values, &mut g, &mut d);
        for i in 0..dim {
            out.g[i].push(g[i]);
            out.d[i].push(d[i]);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceTensionEstimate {
    pub half_side: i64,
    pub tilt: Vec<f64>,
    pub potential: String,
    pub boundary: Boundary,
    pub convention: Convention,
    /// Filled in by thermodynamic integration only.
    pub sigma: Option<Estimate>,
    pub gradient: Vec<Estimate>,
    pub hessian: MatrixEstimate,
    /// Largest `|H_ij - H_ji|` before symmetrization.
    pub asymmetry: f64,
    pub samples: usize,
    /// Largest integrated autocorrelation time among the series, in snapshots.
    pub tau_max: f64,
}

/// `Dσ_L(ξ)` with batch-means errors.
pub fn grad_sigma(system: &System, config: &TrajectoryConfig) -> Result<Vec<Estimate>> {
    let series = tilt_series(system, config)?;
    gradient_from(system, &series)
}

fn gradient_from(system: &System, series: &TiltSeries) -> Result<Vec<Estimate>> {
    let q = system.volume();
    series
        .g
        .iter()
        .map(|g| {
            let e = batch_means(g)?;
            Ok(Estimate { value: -e.value / q, stderr: e.stderr / q, n: e.n, tau: e.tau })
        })
        .collect()
}

/// `D²σ_L(ξ)` from the fluctuation formula with a blocked-jackknife error.
pub fn hessian_sigma(system: &System, config: &TrajectoryConfig) -> Result<SurfaceTensionEstimate> {
    let series = tilt_series(system, config)?;
    hessian_from(system, &series)
}

pub fn hessian_from(system: &System, series: &TiltSeries) -> Result<SurfaceTensionEstimate> {
    let dim = system.dim();
    let q = system.volume();
    let n = series.g[0].len();
    // columns: G_i, D_i, G_i G_j (i <= j), centered for accuracy
    let centers: Vec<f64> = series.g.iter().map(|g| mean(g)).collect();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for i in 0..dim {
        columns.push(series.g[i].iter().map(|v| v - centers[i]).collect());
    }
    for i in 0..dim {
        columns.push(series.d[i].clone());
    }
    let mut pairs = Vec::new();
    for i in 0..dim {
        for j in i..dim {
            pairs.push((i, j));
            columns.push((0..n).map(|t| (series.g[i][t] - centers[i]) * (series.g[j][t] - centers[j])).collect());
        }
    }
    let mut tau_max: f64 = 0.5;
    for c in &columns {
        let ac = autocorrelation_time(c)?;
        if !ac.degenerate {
            tau_max = tau_max.max(ac.tau);
        }
    }
    let block = block_length(n, tau_max);
    let (value, stderr) = jackknife(&columns, block, |m| {
        let mut h = vec![0.0; dim * dim];
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let cov = m[2 * dim + p] - m[i] * m[j];
            let diag = if i == j { m[dim + i] } else { 0.0 };
            h[i * dim + j] = (diag - cov) / q;
            h[j * dim + i] = h[i * dim + j];
        }
        h
    })?;
    let hessian = MatrixEstimate { dim, value, stderr, n };
    Ok(SurfaceTensionEstimate {
        half_side: system.half_side(),
        tilt: system.tilt.clone(),
        potential: system.potential.id(),
        boundary: system.boundary,
        convention: system.convention,
        sigma: None,
        gradient: gradient_from(system, series)?,
        asymmetry: hessian.asymmetry(),
        hessian,
        samples: n,
        tau_max,
    })
}

/// `ā_{μ_L}(Q_L)`: the finite-volume coefficient, which is the Hessian of `σ_L`.
pub fn ahom_finite(system: &System, config: &TrajectoryConfig) -> Result<MatrixEstimate> {
    Ok(hessian_sigma(system, config)?.hessian)
}

/// Per-snapshot series of `σ_L(to) - σ_L(from)` integrated along the straight path
/// with Gauss–Legendre nodes. All nodes share the seed, so differences of such
/// series cancel most of the sampling noise.
fn increment_series(system: &System, config: &TrajectoryConfig, from: &[f64], to: &[f64], nodes: usize) -> Result<Vec<f64>> {
    let (t, w) = gauss_legendre(nodes)?;
    let step: Vec<f64> = to.iter().zip(from).map(|(a, b)| a - b).collect();
    let q = system.volume();
    let mut acc = vec![0.0; config.samples];
    for (tk, wk) in t.iter().zip(&w) {
        let tilt: Vec<f64> = from.iter().zip(&step).map(|(f, s)| f + tk * s).collect();
        let series = tilt_series(&system.with_tilt(tilt)?, config)?;
        for (i, s) in step.iter().enumerate() {
            for (a, g) in acc.iter_mut().zip(&series.g[i]) {
                *a -= wk * s * g / q;
            }
        }
    }
    Ok(acc)
}

/// `σ_L(ξ) = ∫_0^1 ξ·Dσ_L(tξ) dt` by Gauss–Legendre quadrature.
pub fn sigma_by_integration(system: &System, config: &TrajectoryConfig, nodes: usize) -> Result<Estimate> {
    let zero = vec![0.0; system.dim()];
    if system.tilt.iter().all(|v| *v == 0.0) {
        return Ok(Estimate::exact(0.0));
    }
    let s = increment_series(system, config, &zero, &system.tilt, nodes)?;
    batch_means(&s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifferencedHessian {
    pub step: f64,
    pub hessian: MatrixEstimate,
    /// Some entry has an error above half its magnitude.
    pub noise_dominated: bool,
}

/// Central second differences of `σ_L` around `ξ`, each `σ_L` difference obtained
/// by integrating `Dσ_L` from `ξ` with common random numbers.
pub fn hessian_by_differencing(system: &System, config: &TrajectoryConfig, h: f64, nodes: usize) -> Result<DifferencedHessian> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter("differencing step must be positive".into()));
    }
    let dim = system.dim();
    let xi = system.tilt.clone();
    let shifted = |moves: &[(usize, f64)]| {
        let mut t = xi.clone();
        for &(i, s) in moves {
            t[i] += s * h;
        }
        t
    };
    let mut value = vec![0.0; dim * dim];
    let mut stderr = vec![0.0; dim * dim];
    let mut n = 0;
    for i in 0..dim {
        for j in i..dim {
            let combo: Vec<(Vec<(usize, f64)>, f64)> = if i == j {
                vec![(vec![(i, 1.0)], 1.0), (vec![(i, -1.0)], 1.0)]
            } else {
                vec![
                    (vec![(i, 1.0), (j, 1.0)], 0.25),
                    (vec![(i, 1.0), (j, -1.0)], -0.25),
                    (vec![(i, -1.0), (j, 1.0)], -0.25),
                    (vec![(i, -1.0), (j, -1.0)], 0.25),
                ]
            };
            let mut series = vec![0.0; config.samples];
            for (moves, coef) in combo {
                let inc = increment_series(system, config, &xi, &shifted(&moves), nodes)?;
                for (s, v) in series.iter_mut().zip(inc) {
                    *s += coef * v / (h * h);
                }
            }
            let e = batch_means(&series)?;
            n = e.n;
            value[i * dim + j] = e.value;
            value[j * dim + i] = e.value;
            stderr[i * dim + j] = e.stderr;
            stderr[j * dim + i] = e.stderr;
        }
    }
    let noise_dominated = value.iter().zip(&stderr).enumerate().any(|(k, (v, e))| k / dim == k % dim && *e > 0.5 * v.abs());
    Ok(DifferencedHessian { step: h, hessian: MatrixEstimate { dim, value, stderr, n }, noise_dominated })
}

/// `D²σ_L` of the quadratic(1) model on the same box divided by its constant
/// conductance `w c`: the factor converting an infinite-volume walk diffusivity
/// into the finite-box Hessian normalization.
pub fn diffusivity_bridge(dim: usize, half_side: i64, convention: Convention) -> Result<f64> {
    let quad = Potential::quadratic(1.0)?;
    let boxed = System::dirichlet(half_side, dim, quad, vec![0.0; dim], convention)?;
    let torus = System::periodic(half_side, dim, quad, vec![0.0; dim], convention)?;
    let h = DenseGaussian::new(&boxed)?.hessian();
    let trace: f64 = (0..dim).map(|i| h[i * dim + i]).sum::<f64>() / dim as f64;
    Ok(trace / torus.weights[0])
}

/// How the subadditive quantities are computed on a family of cubes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeOptions {
    pub dt: f64,
    pub burn_in_factor: f64,
    /// Independent environment chains; errors are computed across chains.
    pub chains: usize,
    pub launches_per_chain: usize,
    /// Time between launches along a chain.
    pub spacing: f64,
    /// A parabolic solution stops once its ℓ¹ norm falls below this fraction of the initial one.
    pub decay_tolerance: f64,
    /// Hard cap on the integration time of a launch.
    pub max_time: f64,
    pub seed: u64,
}

impl Default for CubeOptions {
    fn default() -> Self {
        Self {
            dt: 0.02,
            burn_in_factor: 1.0,
            chains: 8,
            launches_per_chain: 4,
            spacing: 20.0,
            decay_tolerance: 1e-3,
            max_time: 5_000.0,
            seed: 11,
        }
    }
}

/// The cubes of one scale embedded in an environment.
struct Family {
    dirichlet: Vec<SubCube>,
    neumann: Vec<SubCube>,
    /// `∇*_int 1_{dir i}` on each Neumann cube.
    h: Vec<Vec<Vec<f64>>>,
    /// Environment edges of `∂E(U)` per direction, per cube.
    boundary_edges: Vec<Vec<Vec<usize>>>,
    /// Source `-∇*(1_{∂E} e_j)` per direction (same for every cube).
    neumann_source: Vec<Vec<f64>>,
    edge_volume: f64,
}

impl Family {
    fn new(system: &System, cubes: &[Cube]) -> Result<Self> {
        let d = system.dim();
        let first = cubes.first().ok_or_else(|| Error::InvalidParameter("empty cube family".into()))?;
        if cubes.iter().any(|c| c.side() != first.side()) {
            return Err(Error::InvalidParameter("cubes of one family must have the same side".into()));
        }
        if first.side() < 2 {
            return Err(Error::InvalidParameter("cubes need side >= 2".into()));
        }
        let mut fam = Family {
            dirichlet: Vec::new(),
            neumann: Vec::new(),
            h: Vec::new(),
            boundary_edges: Vec::new(),
            neumann_source: Vec::new(),
            edge_volume: first.edge_volume() as f64,
        };
        for j in 0..d {
            let mut q = vec![0.0; d];
            q[j] = 1.0;
            fam.neumann_source.push(crate::hs::neumann_source(first, None, &q)?);
        }
        for cube in cubes {
            let dir = SubCube::dirichlet(system, cube)?;
            let neu = SubCube::neumann(system, cube)?;
            let h = (0..d)
                .map(|i| {
                    let ind: Vec<f64> = neu.graph.edges.iter().map(|e| (e.dir == i) as u8 as f64).collect();
                    neu.graph.div_star(&ind)
                })
                .collect();
            let mut bnd = vec![Vec::new(); d];
            for (k, e) in dir.graph.edges.iter().enumerate() {
                if !(dir.graph.active[e.tail] && dir.graph.active[e.head]) {
                    bnd[e.dir].push(dir.edge_map[k]);
                }
            }
            fam.dirichlet.push(dir);
            fam.neumann.push(neu);
            fam.h.push(h);
            fam.boundary_edges.push(bnd);
        }
        Ok(fam)
    }

    /// `(ā-sum, ā*⁻¹-sum)` contributions of the initial state, before any time integration.
    fn initial_terms(&self, env_a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
        let mut a = vec![0.0; d * d];
        let mut b = vec![0.0; d * d];
        for (c, sub) in self.dirichlet.iter().enumerate() {
            for (k, e) in sub.graph.edges.iter().enumerate() {
                a[e.dir * d + e.dir] += env_a[sub.edge_map[k]];
            }
            for i in 0..d {
                b[i * d + i] += self.boundary_edges[c][i].iter().map(|&k| 1.0 / env_a[k]).sum::<f64>();
            }
        }
        (a, b)
    }

    fn scale(&self) -> f64 {
        self.edge_volume * self.dirichlet.len() as f64
    }
}

/// `s_i = ∇*(a 1_{dir i})` on the active vertices of a Dirichlet cube.
fn dirichlet_sources(sub: &SubCube, a: &[f64], d: usize, out: &mut [Vec<f64>]) {
    for s in out.iter_mut() {
        s.iter_mut().for_each(|v| *v = 0.0);
    }
    for (k, e) in sub.graph.edges.iter().enumerate() {
        out[e.dir][e.head] += a[k];
        out[e.dir][e.tail] -= a[k];
    }
    for s in out.iter_mut().take(d) {
        for (v, &act) in s.iter_mut().zip(&sub.graph.active) {
            if !act {
                *v = 0.0;
            }
        }
    }
}

/// One launch of the parabolic problems of a family.
struct LaunchState {
    /// Dirichlet solutions, cube-major then direction.
    wd: Vec<Vec<f64>>,
    wn: Vec<Vec<f64>>,
    acc_a: Vec<f64>,
    acc_b: Vec<f64>,
    init_a: Vec<f64>,
    init_b: Vec<f64>,
    norm0: f64,
    prev_norm: f64,
    last_integrand: (Vec<f64>, Vec<f64>),
    steps: usize,
    done: bool,
}

impl LaunchState {
    fn new(fam: &Family, env_a: &[f64], d: usize, scratch: &mut Scratch) -> Self {
        let (init_a, init_b) = fam.initial_terms(env_a, d);
        let mut wd = Vec::new();
        let mut wn = Vec::new();
        for (c, sub) in fam.dirichlet.iter().enumerate() {
            scratch.restrict(sub, env_a);
            dirichlet_sources(sub, &scratch.a, d, &mut scratch.s[..d]);
            for j in 0..d {
                wd.push(scratch.s[j].clone());
            }
            let _ = c;
        }
        for _ in &fam.neumann {
            for j in 0..d {
                wn.push(fam.neumann_source[j].clone());
            }
        }
        let norm0 = l1(&wd) + l1(&wn);
        Self {
            wd,
            wn,
            acc_a: vec![0.0; d * d],
            acc_b: vec![0.0; d * d],
            init_a,
            init_b,
            norm0,
            prev_norm: norm0,
            last_integrand: (vec![0.0; d * d], vec![0.0; d * d]),
            steps: 0,
            done: norm0 == 0.0,
        }
    }

    /// Per-unit-edge matrices `(ā, ā*⁻¹)` of this launch.
    fn result(&self, fam: &Family) -> (Vec<f64>, Vec<f64>) {
        let n = fam.scale();
        let a = self.init_a.iter().zip(&self.acc_a).map(|(i, v)| (i - v) / n).collect();
        let b = self.init_b.iter().zip(&self.acc_b).map(|(i, v)| (i + v) / n).collect();
        (a, b)
    }
}

fn l1(ws: &[Vec<f64>]) -> f64 {
    ws.iter().flat_map(|w| w.iter()).map(|v| v.abs()).sum()
}

struct Scratch {
    a: Vec<f64>,
    s: Vec<Vec<f64>>,
    tmp: Vec<f64>,
}

impl Scratch {
    fn restrict(&mut self, sub: &SubCube, env_a: &[f64]) {
        self.a.resize(sub.graph.edges.len(), 0.0);
        sub.restrict(env_a, &mut self.a);
        for s in self.s.iter_mut() {
            s.resize(sub.graph.num_vertices, 0.0);
        }
        self.tmp.resize(sub.graph.num_vertices, 0.0);
    }
}

const RATE_WINDOW: usize = 50;

/// Advance one launch by a step of the environment whose conductances are `env_a`.
fn advance_launch(st: &mut LaunchState, fam: &Family, env_a: &[f64], dt: f64, d: usize, tol: f64, scratch: &mut Scratch) {
    let mut ia = vec![0.0; d * d];
    let mut ib = vec![0.0; d * d];
    for (c, sub) in fam.dirichlet.iter().enumerate() {
        scratch.restrict(sub, env_a);
        dirichlet_sources(sub, &scratch.a, d, &mut scratch.s[..d]);
        for j in 0..d {
            let w = &mut st.wd[c * d + j];
            for i in 0..d {
                ia[i * d + j] += w.iter().zip(&scratch.s[i]).map(|(x, y)| x * y).sum::<f64>();
            }
            sub.step(&scratch.a, w, dt, &mut scratch.tmp);
        }
    }
    for (c, sub) in fam.neumann.iter().enumerate() {
        scratch.restrict(sub, env_a);
        for j in 0..d {
            let w = &mut st.wn[c * d + j];
            for i in 0..d {
                ib[i * d + j] += w.iter().zip(&fam.h[c][i]).map(|(x, y)| x * y).sum::<f64>();
            }
            sub.step(&scratch.a, w, dt, &mut scratch.tmp);
        }
    }
    for k in 0..d * d {
        st.acc_a[k] += dt * ia[k];
        st.acc_b[k] += dt * ib[k];
    }
    st.last_integrand = (ia, ib);
    st.steps += 1;
    if st.steps % RATE_WINDOW == 0 {
        let norm = l1(&st.wd) + l1(&st.wn);
        let rate = (st.prev_norm / norm.max(1e-300)).ln() / (RATE_WINDOW as f64 * dt);
        st.prev_norm = norm;
        if norm <= tol * st.norm0 && rate > 0.0 {
            // geometric tail of the remaining integral
            for k in 0..d * d {
                st.acc_a[k] += st.last_integrand.0[k] / rate;
                st.acc_b[k] += st.last_integrand.1[k] / rate;
            }
            st.done = true;
        }
    }
}

/// `ā` and `ā*⁻¹` per chain for several families of cubes, from common environments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiscaleRun {
    /// Side and number of cubes of each family.
    pub families: Vec<(i64, usize)>,
    /// `per_chain[c][f] = (ā, ā*⁻¹)` averaged over launches and cubes, row-major.
    pub per_chain: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
    /// Launches that hit `max_time` before decaying.
    pub truncated: usize,
    pub deterministic: bool,
}

/// Run the Dirichlet and Neumann problems defining `ā(U)` and `ā*(U)` for each family of cubes.
///
/// `ā_ij = N⁻¹[δ_ij Σ_{e ∥ e_i}⟨a⟩ - Σ_x ⟨v_j s_i⟩]` with `s_i = ∇*(a 1_{∥ e_i})` and
/// `(-L + ∇*a∇) v_j = s_j` in `U` with zero boundary values, and
/// `(ā*⁻¹)_ij = N⁻¹ Σ_{e} (e_i)⟨∇u_j(e)⟩` for the zero-mean solution of the
/// Neumann problem with unit flux `e_j` across `∂E(U)`. `N` is the number of edges of `U` in one direction.
pub fn multiscale_run(system: &System, families: &[Vec<Cube>], opts: &CubeOptions) -> Result<MultiscaleRun> {
    let d = system.dim();
    let fams: Vec<Family> = families.iter().map(|c| Family::new(system, c)).collect::<Result<_>>()?;
    let info = families.iter().map(|c| (c[0].side(), c.len())).collect();
    if system.potential.is_quadratic() {
        return Ok(MultiscaleRun { families: info, per_chain: vec![quadratic_family_values(system, &fams)?], truncated: 0, deterministic: true });
    }
    if opts.chains < 2 || opts.launches_per_chain == 0 {
        return Err(Error::InvalidParameter("need >= 2 chains and >= 1 launch per chain".into()));
    }
    let mut per_chain = Vec::with_capacity(opts.chains);
    let mut truncated = 0;
    let n_env = system.graph.edges.len();
    let max_steps = (opts.max_time / opts.dt).ceil() as usize;
    let spacing = ((opts.spacing / opts.dt).round() as usize).max(1);
    for c in 0..opts.chains {
        let mut chain = Chain::new(system.clone(), opts.dt, Scheme::EulerMaruyama, stream_rng(opts.seed, c as u64))?;
        chain.advance_time(burn_in_time(opts.burn_in_factor, system.half_side()));
        let mut env_a = vec![0.0; n_env];
        let mut scratch = Scratch { a: Vec::new(), s: vec![Vec::new(); d], tmp: Vec::new() };
        let mut live: Vec<(usize, LaunchState)> = Vec::new();
        let mut results: Vec<Vec<(Vec<f64>, Vec<f64>)>> = vec![Vec::new(); fams.len()];
        let mut launched = 0;
        let mut step = 0usize;
        loop {
            system.conductance(chain.values(), &mut env_a);
            if launched < opts.launches_per_chain && step % spacing == 0 {
                for (f, fam) in fams.iter().enumerate() {
                    live.push((f, LaunchState::new(fam, &env_a, d, &mut scratch)));
                }
                launched += 1;
            }
            for (f, st) in live.iter_mut() {
                if st.steps >= max_steps {
                    st.done = true;
                    truncated += 1;
                }
                if !st.done {
                    advance_launch(st, &fams[*f], &env_a, opts.dt, d, opts.decay_tolerance, &mut scratch);
                }
            }
            live.retain(|(f, st)| {
                if st.done {
                    results[*f].push(st.result(&fams[*f]));
                }
                !st.done
            });
            if live.is_empty() && launched == opts.launches_per_chain {
                break;
            }
            chain.step();
            step += 1;
        }
        per_chain.push(
            results
                .iter()
                .map(|rs| {
                    let k = rs.len() as f64;
                    let mut a = vec![0.0; d * d];
                    let mut b = vec![0.0; d * d];
                    for (ra, rb) in rs {
                        for i in 0..d * d {
                            a[i] += ra[i] / k;
                            b[i] += rb[i] / k;
                        }
                    }
                    (a, b)
                })
                .collect(),
        );
    }
    Ok(MultiscaleRun { families: info, per_chain, truncated, deterministic: false })
}

/// Constant conductances: the HS problems are elliptic and solved directly.
fn quadratic_family_values(system: &System, fams: &[Family]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let d = system.dim();
    let mut env_a = vec![0.0; system.graph.edges.len()];
    system.conductance(&vec![0.0; system.num_vertices()], &mut env_a);
    let mut scratch = Scratch { a: Vec::new(), s: vec![Vec::new(); d], tmp: Vec::new() };
    let mut out = Vec::new();
    for fam in fams {
        let (mut acc_a, mut acc_b) = (vec![0.0; d * d], vec![0.0; d * d]);
        for (c, sub) in fam.dirichlet.iter().enumerate() {
            scratch.restrict(sub, &env_a);
            dirichlet_sources(sub, &scratch.a, d, &mut scratch.s[..d]);
            let srcs: Vec<Vec<f64>> = scratch.s[..d].to_vec();
            for j in 0..d {
                if srcs[j].iter().all(|v| *v == 0.0) {
                    continue;
                }
                let (v, _) = conjugate_gradient(&sub.graph, &scratch.a, 0.0, &srcs[j], 1e-13, 100_000)?;
                for i in 0..d {
                    acc_a[i * d + j] += v.iter().zip(&srcs[i]).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            let neu = &fam.neumann[c];
            scratch.restrict(neu, &env_a);
            for j in 0..d {
                let (u, _) = conjugate_gradient(&neu.graph, &scratch.a, 0.0, &fam.neumann_source[j], 1e-13, 100_000)?;
                for i in 0..d {
                    acc_b[i * d + j] += u.iter().zip(&fam.h[c][i]).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
        let (init_a, init_b) = fam.initial_terms(&env_a, d);
        let n = fam.scale();
        out.push((
            init_a.iter().zip(&acc_a).map(|(i, v)| (i - v) / n).collect(),
            init_b.iter().zip(&acc_b).map(|(i, v)| (i + v) / n).collect(),
        ));
    }
    Ok(out)
}

fn symmetric_part(m: &[f64], d: usize) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(d, d, |i, j| 0.5 * (m[i * d + j] + m[j * d + i]))
}

fn lambda_max(m: &[f64], d: usize) -> f64 {
    symmetric_part(m, d).symmetric_eigenvalues().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

fn invert(m: &[f64], d: usize) -> Option<Vec<f64>> {
    let inv = symmetric_part(m, d).try_inverse()?;
    Some((0..d * d).map(|k| inv[(k / d, k % d)]).collect())
}

/// Jackknife over chains of a function of the chain-averaged family values.
fn chain_jackknife<F>(run: &MultiscaleRun, f: F) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&[(Vec<f64>, Vec<f64>)]) -> Vec<f64>,
{
    let flatten = |fams: &[(Vec<f64>, Vec<f64>)]| -> Vec<f64> {
        fams.iter().flat_map(|(a, b)| a.iter().chain(b.iter()).cloned()).collect()
    };
    let shape: Vec<usize> = run.per_chain[0].iter().map(|(a, _)| a.len()).collect();
    let unflatten = move |v: &[f64]| -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut out = Vec::new();
        let mut p = 0;
        for &k in &shape {
            out.push((v[p..p + k].to_vec(), v[p + k..p + 2 * k].to_vec()));
            p += 2 * k;
        }
        out
    };
    if run.per_chain.len() == 1 {
        let v = f(&run.per_chain[0]);
        let n = v.len();
        return Ok((v, vec![0.0; n]));
    }
    let rows: Vec<Vec<f64>> = run.per_chain.iter().map(|c| flatten(c)).collect();
    let columns: Vec<Vec<f64>> = (0..rows[0].len()).map(|k| rows.iter().map(|r| r[k]).collect()).collect();
    jackknife(&columns, 1, |m| f(&unflatten(m)))
}

/// `ā(U)` and `ā*(U)` of one family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeCoefficients {
    pub side: i64,
    pub cubes: usize,
    pub ahom: MatrixEstimate,
    pub astar: MatrixEstimate,
    pub astar_inverse: MatrixEstimate,
    /// `ā*⁻¹` could not be inverted.
    pub ill_conditioned: bool,
}

pub fn cube_coefficients(run: &MultiscaleRun, family: usize) -> Result<CubeCoefficients> {
    let d = (run.per_chain[0][family].0.len() as f64).sqrt() as usize;
    let n = run.per_chain.len();
    let (a, ae) = chain_jackknife(run, |f| f[family].0.clone())?;
    let (b, be) = chain_jackknife(run, |f| f[family].1.clone())?;
    let ill = invert(&b, d).is_none();
    let (s, se) = chain_jackknife(run, |f| invert(&f[family].1, d).unwrap_or_else(|| vec![f64::NAN; d * d]))?;
    Ok(CubeCoefficients {
        side: run.families[family].0,
        cubes: run.families[family].1,
        ahom: MatrixEstimate { dim: d, value: a, stderr: ae, n },
        ill_conditioned: ill || !s.iter().all(|v| v.is_finite()),
        astar: MatrixEstimate { dim: d, value: s, stderr: se, n },
        astar_inverse: MatrixEstimate { dim: d, value: b, stderr: be, n },
    })
}

/// `ā*(Q)` for a single cube inside the environment of `system`.
pub fn astar_finite(system: &System, cube: &Cube, opts: &CubeOptions) -> Result<CubeCoefficients> {
    let run = multiscale_run(system, &[vec![cube.clone()]], opts)?;
    cube_coefficients(&run, 0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubadditiveRecord {
    pub scale: usize,
    pub coefficients: CubeCoefficients,
    /// `τ_m`, comparing `□_m` with `□_{m+1}`; absent at the top scale.
    pub defect: Option<Estimate>,
    /// The error bar exceeds the defect.
    pub inconclusive: bool,
}

/// `τ_m = ½ λ_max(ā_m - ā_{m+1})₊ + ½ λ_max(ā*_m⁻¹ - ā*_{m+1}⁻¹)₊`.
pub fn defect(a_m: &[f64], a_next: &[f64], b_m: &[f64], b_next: &[f64], d: usize) -> f64 {
    let da: Vec<f64> = a_m.iter().zip(a_next).map(|(x, y)| x - y).collect();
    let db: Vec<f64> = b_m.iter().zip(b_next).map(|(x, y)| x - y).collect();
    0.5 * lambda_max(&da, d).max(0.0) + 0.5 * lambda_max(&db, d).max(0.0)
}

/// `□_top` centered in the environment, partitioned into translates of `□_m` for every `m ≤ top`.
pub fn triadic_families(dim: usize, top: usize) -> Result<Vec<Vec<Cube>>> {
    let root = Cube::triadic(top as u32, dim)?;
    (0..=top).map(|m| if m == top { Ok(vec![root.clone()]) } else { root.triadic_children(m as u32) }).collect()
}

/// Subadditivity defects across the triadic scales `0..=top`, from common environments.
pub fn subadditivity_defect(system: &System, top: usize, opts: &CubeOptions) -> Result<Vec<SubadditiveRecord>> {
    let families = triadic_families(system.dim(), top)?;
    let run = multiscale_run(system, &families, opts)?;
    subadditivity_from(&run)
}

pub fn subadditivity_from(run: &MultiscaleRun) -> Result<Vec<SubadditiveRecord>> {
    let d = (run.per_chain[0][0].0.len() as f64).sqrt() as usize;
    let n = run.per_chain.len();
    let count = run.families.len();
    let mut out = Vec::with_capacity(count);
    for m in 0..count {
        let coefficients = cube_coefficients(run, m)?;
        let defect_est = if m + 1 < count {
            let (v, e) = chain_jackknife(run, |f| vec![defect(&f[m].0, &f[m + 1].0, &f[m].1, &f[m + 1].1, d)])?;
            Some(Estimate { value: v[0], stderr: e[0], n, tau: 0.5 })
        } else {
            None
        };
        let inconclusive = defect_est.map(|t| t.stderr > t.value).unwrap_or(false);
        out.push(SubadditiveRecord { scale: m, coefficients, defect: defect_est, inconclusive });
    }
    Ok(out)
}

/// Reference point for the convergence fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RateReference {
    /// Differences to the estimate at the largest `L`, which is then excluded from the fit.
    Largest,
    /// Differences to a known limit matrix.
    Exact(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub sizes: Vec<i64>,
    /// `‖D²σ_L - reference‖_F` with first-order errors.
    pub distances: Vec<Estimate>,
    pub beta: f64,
    pub beta_stderr: f64,
    pub prefactor: f64,
    pub r_squared: f64,
    /// The distances do not decrease in `L`.
    pub non_monotone: bool,
    /// `R² < 0.5`.
    pub inconclusive: bool,
}

/// Fit `log ‖D²σ_L - D²σ_ref‖ = log C - β log L`.
pub fn convergence_rate_fit(points: &[(i64, MatrixEstimate)], reference: &RateReference) -> Result<RateFit> {
    let mut pts: Vec<&(i64, MatrixEstimate)> = points.iter().collect();
    pts.sort_by_key(|p| p.0);
    let (target, target_err, used): (Vec<f64>, Vec<f64>, Vec<&(i64, MatrixEstimate)>) = match reference {
        RateReference::Largest => {
            let last = pts.last().ok_or_else(|| Error::InsufficientData("no sizes".into()))?;
            (last.1.value.clone(), last.1.stderr.clone(), pts[..pts.len() - 1].to_vec())
        }
        RateReference::Exact(m) => (m.clone(), vec![0.0; m.len()], pts.clone()),
    };
    if used.len() < 2 {
        return Err(Error::InsufficientData("at least two sizes are needed for a rate fit".into()));
    }
    let mut distances = Vec::new();
    for (_, h) in &used {
        let diff: Vec<f64> = h.value.iter().zip(&target).map(|(a, b)| a - b).collect();
        let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        let var: f64 = diff
            .iter()
            .zip(h.stderr.iter().zip(&target_err))
            .map(|(v, (e1, e2))| if norm > 0.0 { (v / norm).powi(2) * (e1 * e1 + e2 * e2) } else { e1 * e1 + e2 * e2 })
            .sum();
        distances.push(Estimate { value: norm, stderr: var.sqrt(), n: h.n, tau: 0.5 });
    }
    let x: Vec<f64> = used.iter().map(|p| (p.0 as f64).ln()).collect();
    let y: Vec<f64> = distances.iter().map(|e| e.value.max(1e-300).ln()).collect();
    let fit = linear_fit(&x, &y)?;
    let non_monotone = distances.windows(2).any(|w| w[1].value > w[0].value);
    Ok(RateFit {
        sizes: used.iter().map(|p| p.0).collect(),
        distances,
        beta: -fit.slope,
        beta_stderr: fit.slope_stderr,
        prefactor: fit.intercept.exp(),
        r_squared: fit.r_squared,
        non_monotone,
        inconclusive: fit.r_squared < 0.5,
    })
}

/// Smooth vector fields used as CLT test functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestField {
    /// `f = (ψ, 0, ...)` with a Gaussian bump `ψ(y) = exp(-|y|²/2)`.
    Bump,
    /// `f = (∂_2ψ, -∂_1ψ, 0, ...)`, divergence free.
    Curl,
}

impl TestField {
    pub fn eval(&self, y: &[f64], out: &mut [f64]) {
        let r2: f64 = y.iter().map(|v| v * v).sum();
        let psi = (-0.5 * r2).exp();
        out.iter_mut().for_each(|o| *o = 0.0);
        match self {
            TestField::Bump => out[0] = psi,
            TestField::Curl => {
                out[0] = -y[1] * psi;
                out[1] = y[0] * psi;
            }
        }
    }
}

impl std::str::FromStr for TestField {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bump" => Ok(Self::Bump),
            "curl" => Ok(Self::Curl),
            _ => Err(Error::InvalidParameter(format!("unknown test field `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CLTReport {
    pub radius: i64,
    pub field: TestField,
    pub samples: usize,
    pub variance: Estimate,
    pub prediction: f64,
    pub skewness: f64,
    pub kurtosis: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CltOptions {
    pub samples: usize,
    /// Langevin settings for non-Gaussian potentials.
    pub trajectory: TrajectoryConfig,
    /// Smallest allowed `L / R`.
    pub min_ratio: f64,
    pub seed: u64,
}

impl Default for CltOptions {
    fn default() -> Self {
        Self { samples: 10_000, trajectory: TrajectoryConfig::default(), min_ratio: 8.0, seed: 17 }
    }
}

/// `F_R = R^{-d/2} Σ_x Σ_i f_i(x/R) ∇_iφ(x)` under the periodic measure.
///
/// Quadratic potentials are sampled exactly by FFT; otherwise snapshots of a
/// Langevin run are used and the errors account for their correlation.
pub fn clt_check(system: &System, radii: &[i64], field: TestField, ahom: &[f64], opts: &CltOptions) -> Result<Vec<CLTReport>> {
    if system.boundary != Boundary::Periodic {
        return Err(Error::WrongBoundary("clt_check"));
    }
    let d = system.dim();
    for &r in radii {
        if (system.half_side() as f64) < opts.min_ratio * r as f64 {
            return Err(Error::InvalidParameter(format!("L = {} is below {} R for R = {r}", system.half_side(), opts.min_ratio)));
        }
    }
    // per-edge weights f_dir(x_tail / R) for each radius
    let weights: Vec<Vec<f64>> = radii
        .iter()
        .map(|&r| {
            let norm = (r as f64).powf(-(d as f64) / 2.0);
            let mut f = vec![0.0; d];
            system
                .graph
                .edges
                .iter()
                .map(|e| {
                    let y: Vec<f64> = system.domain.coords(e.tail).iter().map(|&c| c as f64 / r as f64).collect();
                    field.eval(&y, &mut f);
                    norm * f[e.dir]
                })
                .collect()
        })
        .collect();
    let mut values: Vec<Vec<f64>> = vec![Vec::with_capacity(opts.samples); radii.len()];
    let mut record = |phi: &[f64]| {
        let grad = system.graph.gradient(phi);
        for (k, w) in weights.iter().enumerate() {
            values[k].push(w.iter().zip(&grad).map(|(a, b)| a * b).sum());
        }
    };
    if system.potential.is_quadratic() {
        let mut sampler = PeriodicGaussianSampler::new(system)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for _ in 0..opts.samples {
            record(&sampler.sample(&mut rng));
        }
    } else {
        let cfg = TrajectoryConfig { samples: opts.samples, seed: opts.seed, ..opts.trajectory.clone() };
        for snap in sample_equilibrium(system.clone(), &cfg)? {
            record(&snap.values);
        }
    }
    let mut out = Vec::new();
    for (k, &r) in radii.iter().enumerate() {
        let xs = &values[k];
        let m = mean(xs);
        let c: Vec<f64> = xs.iter().map(|x| x - m).collect();
        let m2 = mean(&c.iter().map(|v| v * v).collect::<Vec<_>>());
        let m3 = mean(&c.iter().map(|v| v.powi(3)).collect::<Vec<_>>());
        let m4 = mean(&c.iter().map(|v| v.powi(4)).collect::<Vec<_>>());
        let sq: Vec<f64> = c.iter().map(|v| v * v).collect();
        let variance = batch_means(&sq)?;
        out.push(CLTReport {
            radius: r,
            field,
            samples: xs.len(),
            variance,
            prediction: clt_prediction(field, d, ahom, 256, 8.0)?,
            skewness: m3 / m2.powf(1.5),
            kurtosis: m4 / (m2 * m2),
        });
    }
    Ok(out)
}

/// `∫ |k·f̂(k)|² / (kᵀāk) dk / (2π)^d`, the limiting variance of `F_R`,
/// evaluated with an FFT on a periodic grid of `points^d` nodes covering `[-half_width, half_width)^d`.
pub fn clt_prediction(field: TestField, dim: usize, ahom: &[f64], points: usize, half_width: f64) -> Result<f64> {
    if ahom.len() != dim * dim {
        return Err(Error::DimensionMismatch { expected: dim * dim, got: ahom.len() });
    }
    let h = 2.0 * half_width / points as f64;
    let n = points.pow(dim as u32);
    let mut planner = FftPlanner::new();
    let mut comps: Vec<Vec<Complex64>> = vec![vec![Complex64::new(0.0, 0.0); n]; dim];
    let mut f = vec![0.0; dim];
    for idx in 0..n {
        let mut r = idx;
        let y: Vec<f64> = (0..dim)
            .map(|_| {
                let k = r % points;
                r /= points;
                -half_width + k as f64 * h
            })
            .collect();
        field.eval(&y, &mut f);
        for i in 0..dim {
            comps[i][idx] = Complex64::new(f[i], 0.0);
        }
    }
    for c in comps.iter_mut() {
        fft_nd(c, points, dim, false, &mut planner);
    }
    let dk = 2.0 * std::f64::consts::PI / (2.0 * half_width);
    let mut total = 0.0;
    for idx in 1..n {
        let mut r = idx;
        let k: Vec<f64> = (0..dim)
            .map(|_| {
                let m = (r % points) as i64;
                r /= points;
                let m = if m >= points as i64 / 2 { m - points as i64 } else { m };
                m as f64 * dk
            })
            .collect();
        let mut kf = Complex64::new(0.0, 0.0);
        for i in 0..dim {
            kf += comps[i][idx] * k[i];
        }
        let mut kak = 0.0;
        for i in 0..dim {
            for j in 0..dim {
                kak += k[i] * ahom[i * dim + j] * k[j];
            }
        }
        // f̂(k) ≈ h^d · DFT; the phase from the grid offset drops out of |k·f̂|²
        total += kf.norm_sqr() * h.powi(2 * dim as i32) / kak;
    }
    // the k = 0 cell: angular average of the direction-dependent limit
    let f0: Vec<Complex64> = comps.iter().map(|c| c[0]).collect();
    let dirs = sphere_directions(dim);
    let cell: f64 = dirs
        .iter()
        .map(|u| {
            let uf: Complex64 = u.iter().zip(&f0).map(|(a, b)| b * a).sum();
            let uau: f64 = (0..dim * dim).map(|k| u[k / dim] * ahom[k] * u[k % dim]).sum();
            uf.norm_sqr() * h.powi(2 * dim as i32) / uau
        })
        .sum::<f64>()
        / dirs.len() as f64;
    total += cell;
    Ok(total * dk.powi(dim as i32) / (2.0 * std::f64::consts::PI).powi(dim as i32))
}

/// Roughly uniform unit vectors: a circle in `d = 2`, a Fibonacci sphere in `d = 3`,
/// axes and diagonals otherwise.
fn sphere_directions(dim: usize) -> Vec<Vec<f64>> {
    match dim {
        2 => (0..256).map(|k| {
            let t = std::f64::consts::PI * k as f64 / 256.0;
            vec![t.cos(), t.sin()]
        }).collect(),
        3 => {
            let n = 512;
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..n)
                .map(|k| {
                    let z = 1.0 - (2.0 * k as f64 + 1.0) / n as f64;
                    let r = (1.0 - z * z).sqrt();
                    let t = golden * k as f64;
                    vec![r * t.cos(), r * t.sin(), z]
                })
                .collect()
        }
        _ => {
            let mut out: Vec<Vec<f64>> = (0..dim).map(|i| (0..dim).map(|j| (i == j) as u8 as f64).collect()).collect();
            for mask in 0..(1usize << dim) {
                out.push((0..dim).map(|j| if mask >> j & 1 == 1 { 1.0 } else { -1.0 } / (dim as f64).sqrt()).collect());
            }
            out
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulusRow {
    pub tilt_a: Vec<f64>,
    pub tilt_b: Vec<f64>,
    pub distance: f64,
    /// `‖D²σ_L(ξ) - D²σ_L(ξ')‖_F`.
    pub modulus: Estimate,
    /// The difference is within two standard errors of zero.
    pub noise_dominated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulusTable {
    pub rows: Vec<ModulusRow>,
    /// Slope of log modulus against log distance over the rows that are not noise dominated.
    pub exponent: Option<f64>,
}

/// Hessians at a list of tilt pairs (common random numbers at every tilt) and their Hölder modulus.
pub fn hessian_modulus_probe(system: &System, pairs: &[(Vec<f64>, Vec<f64>)], config: &TrajectoryConfig) -> Result<ModulusTable> {
    let mut cache: Vec<(Vec<f64>, TiltSeries)> = Vec::new();
    let mut series_for = |tilt: &Vec<f64>| -> Result<TiltSeries> {
        if let Some((_, s)) = cache.iter().find(|(t, _)| t == tilt) {
            return Ok(s.clone());
        }
        let s = tilt_series(&system.with_tilt(tilt.clone())?, config)?;
        cache.push((tilt.clone(), s.clone()));
        Ok(s)
    };
    let dim = system.dim();
    let q = system.volume();
    let mut rows = Vec::new();
    for (a, b) in pairs {
        let sa = series_for(a)?;
        let sb = series_for(b)?;
        // joint jackknife so that the common-random-number correlation enters the error
        let n = sa.g[0].len();
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for s in [&sa, &sb] {
            for i in 0..dim {
                cols.push(s.g[i].clone());
            }
            for i in 0..dim {
                cols.push(s.d[i].clone());
            }
            for i in 0..dim {
                for j in 0..dim {
                    cols.push((0..n).map(|t| s.g[i][t] * s.g[j][t]).collect());
                }
            }
        }
        let width = 2 * dim + dim * dim;
        let mut tau: f64 = 0.5;
        for c in &cols {
            let ac = autocorrelation_time(c)?;
            if !ac.degenerate {
                tau = tau.max(ac.tau);
            }
        }
        let (v, e) = jackknife(&cols, block_length(n, tau), |m| {
            let hess = |o: usize| -> Vec<f64> {
                let mut h = vec![0.0; dim * dim];
                for i in 0..dim {
                    for j in 0..dim {
                        let cov = m[o + 2 * dim + i * dim + j] - m[o + i] * m[o + j];
                        h[i * dim + j] = ((if i == j { m[o + dim + i] } else { 0.0 }) - cov) / q;
                    }
                }
                h
            };
            let (ha, hb) = (hess(0), hess(width));
            vec![ha.iter().zip(&hb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()]
        })?;
        let distance = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let modulus = Estimate { value: v[0], stderr: e[0], n, tau };
        rows.push(ModulusRow { tilt_a: a.clone(), tilt_b: b.clone(), distance, noise_dominated: v[0] < 2.0 * e[0], modulus });
    }
    let good: Vec<&ModulusRow> = rows.iter().filter(|r| !r.noise_dominated && r.distance > 0.0).collect();
    let exponent = if good.len() >= 2 {
        let x: Vec<f64> = good.iter().map(|r| r.distance.ln()).collect();
        let y: Vec<f64> = good.iter().map(|r| r.modulus.value.ln()).collect();
        linear_fit(&x, &y).ok().map(|f| f.slope)
    } else {
        None
    };
    Ok(ModulusTable { rows, exponent })
}

/// Exact `D²σ_L` for quadratic potentials, as a matrix estimate with zero error.
pub fn gaussian_hessian(system: &System) -> Result<MatrixEstimate> {
    let d = system.dim();
    let h = DenseGaussian::new(system)?.hessian();
    Ok(MatrixEstimate { dim: d, value: h, stderr: vec![0.0; d * d], n: 0 })
}

/// Diagonal of the infinite-volume Gaussian Hessian `w c Id` (interior edge weight times `c`).
pub fn gaussian_limit(dim: usize, c: f64, convention: Convention) -> Vec<f64> {
    let w = match convention {
        Convention::Paired => 2.0,
        Convention::Single => 1.0,
    };
    (0..dim * dim).map(|k| if k / dim == k % dim { w * c } else { 0.0 }).collect()
}

/// Interior-edge Laplacian of a cube, used by callers that need `LatticeGraph::neumann`.
pub fn interior_graph(cube: &Cube) -> LatticeGraph {
    LatticeGraph::neumann(cube)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(samples: usize, seed: u64) -> TrajectoryConfig {
        TrajectoryConfig { dt: 0.05, samples, stride: 10, burn_in_factor: 2.0, seed, ..Default::default() }
    }

    #[test]
    fn quadratic_hessian_matches_oracle() {
        let s = System::dirichlet(4, 2, Potential::quadratic(1.0).unwrap(), vec![0.3, 0.0], Convention::Paired).unwrap();
        let exact = gaussian_hessian(&s).unwrap();
        let est = hessian_sigma(&s, &cfg(20_000, 3)).unwrap();
        let z = est.hessian.max_z(&exact.value);
        assert!(z < 4.0, "{:?} vs {:?}", est.hessian, exact.value);
        let grad = DenseGaussian::new(&s).unwrap().gradient();
        for i in 0..2 {
            assert!(est.gradient[i].z_score(grad[i]) < 4.0, "{:?} {:?}", est.gradient, grad);
        }
    }

    #[test]
    fn quadratic_subadditive_quantities_are_constant() {
        let s = System::periodic(5, 2, Potential::quadratic(1.5).unwrap(), vec![0.0, 0.0], Convention::Paired).unwrap();
        let recs = subadditivity_defect(&s, 1, &CubeOptions::default()).unwrap();
        for r in &recs {
            for k in 0..4 {
                let target = if k % 3 == 0 { 3.0 } else { 0.0 };
                assert!((r.coefficients.ahom.value[k] - target).abs() < 1e-9, "{:?}", r.coefficients.ahom);
                assert!((r.coefficients.astar.value[k] - target).abs() < 1e-8, "{:?}", r.coefficients.astar);
            }
        }
        assert!(recs[0].defect.unwrap().value < 1e-8);
    }

    #[test]
    fn astar_below_ahom_for_logcosh() {
        let s = System::periodic(4, 2, Potential::logcosh(0.5).unwrap(), vec![0.0, 0.0], Convention::Paired).unwrap();
        let opts = CubeOptions { chains: 4, launches_per_chain: 2, spacing: 5.0, max_time: 400.0, ..Default::default() };
        let c = astar_finite(&s, &Cube::triadic(1, 2).unwrap(), &opts).unwrap();
        for i in 0..2 {
            let a = c.ahom.get(i, i);
            let b = c.astar.get(i, i);
            // V'' ∈ [1, 1.5] with weight 2
            assert!(a.value > 1.9 && a.value < 3.1, "{a:?}");
            assert!(b.value > 1.9 && b.value < 3.1, "{b:?}");
            assert!(b.value <= a.value + 3.0 * a.stderr.hypot(b.stderr), "{a:?} {b:?}");
        }
    }

    #[test]
    fn rate_fit_recovers_power() {
        let pts: Vec<(i64, MatrixEstimate)> = [4i64, 8, 16, 32]
            .iter()
            .map(|&l| (l, MatrixEstimate { dim: 1, value: vec![1.0 + 3.0 / l as f64], stderr: vec![0.0], n: 1 }))
            .collect();
        let fit = convergence_rate_fit(&pts, &RateReference::Exact(vec![1.0])).unwrap();
        assert!((fit.beta - 1.0).abs() < 1e-9 && (fit.prefactor - 3.0).abs() < 1e-9);
        assert!(!fit.non_monotone);
    }

    #[test]
    fn isotropic_prediction_of_bump() {
        // ∫|k₁ ψ̂|²/|k|² = ½ ∫ψ² for isotropic ψ, and ∫ψ² = π for ψ = exp(-|y|²/2)
        let p = clt_prediction(TestField::Bump, 2, &[1.0, 0.0, 0.0, 1.0], 256, 8.0).unwrap();
        assert!((p - std::f64::consts::PI / 2.0).abs() < 1e-6, "{p}");
        let c = clt_prediction(TestField::Curl, 2, &[1.0, 0.0, 0.0, 1.0], 128, 8.0).unwrap();
        assert!(c.abs() < 1e-10);
    }

    #[test]
    fn sigma_vanishes_at_zero_tilt() {
        let s = System::dirichlet(3, 2, Potential::logcosh(0.5).unwrap(), vec![0.0, 0.0], Convention::Paired).unwrap();
        assert_eq!(sigma_by_integration(&s, &cfg(100, 1), 3).unwrap().value, 0.0);
    }
}
