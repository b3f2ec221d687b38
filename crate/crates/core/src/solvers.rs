//! Lattice elliptic and parabolic solvers with edge conductances: Green
//! functions, Cauchy–Dirichlet and Cauchy–Neumann time stepping, the decay
//! envelope fit and a Hölder probe for parabolic solutions.
//!
//! Conductances are plain slices indexed like `graph.edges`; the operator is
//! `∇*(a∇w)`, acting on the active vertices of a [`LatticeGraph`].

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Cube, LatticeGraph, Torus};
use crate::stats::linear_fit;

/// Check `lo <= a <= hi` on every edge.
pub fn check_ellipticity(a: &[f64], lo: f64, hi: f64) -> Result<()> {
    match a.iter().position(|&v| !(v >= lo && v <= hi)) {
        Some(k) => Err(Error::InvalidParameter(format!("conductance {} on edge {k} outside [{lo}, {hi}]", a[k]))),
        None => Ok(()),
    }
}

fn dot_active(graph: &LatticeGraph, u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).zip(&graph.active).filter(|(_, &a)| a).map(|((x, y), _)| x * y).sum()
}

/// True when no edge touches an inactive vertex, so the operator only fixes constants.
fn is_closed(graph: &LatticeGraph) -> bool {
    graph.edges.iter().all(|e| graph.active[e.tail] && graph.active[e.head])
}

fn project_mean(graph: &LatticeGraph, v: &mut [f64]) {
    let n = graph.num_active() as f64;
    let m = v.iter().zip(&graph.active).filter(|(_, &a)| a).map(|(x, _)| x).sum::<f64>() / n;
    for (x, &a) in v.iter_mut().zip(&graph.active) {
        if a {
            *x -= m;
        }
    }
}

/// Solve `shift·x + ∇*(a∇x) = rhs` on the active vertices by conjugate gradients.
///
/// Inactive vertices are held at zero. On a graph without inactive neighbours
/// and `shift = 0` the solution is taken mean-zero. Returns the solution and the
/// final residual `‖r‖_∞`.
pub fn conjugate_gradient(graph: &LatticeGraph, a: &[f64], shift: f64, rhs: &[f64], tol: f64, max_iter: usize) -> Result<(Vec<f64>, f64)> {
    let n = graph.num_vertices;
    let singular = shift == 0.0 && is_closed(graph);
    let mut b: Vec<f64> = rhs.iter().zip(&graph.active).map(|(v, &act)| if act { *v } else { 0.0 }).collect();
    if singular {
        project_mean(graph, &mut b);
    }
    let apply = |w: &[f64], out: &mut [f64]| {
        graph.apply_operator(a, w, out);
        if shift != 0.0 {
            for x in 0..n {
                if graph.active[x] {
                    out[x] += shift * w[x];
                }
            }
        }
    };
    let mut x = vec![0.0; n];
    let mut r = b.clone();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot_active(graph, &r, &r);
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for _ in 0..max_iter {
        let res = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if res <= tol * scale.max(1.0) {
            return Ok((x, res));
        }
        apply(&p, &mut ap);
        let pap = dot_active(graph, &p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rr / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        if singular {
            project_mean(graph, &mut r);
        }
        let rr_new = dot_active(graph, &r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
    }
    // recompute the true residual before giving up
    apply(&x, &mut ap);
    let res = (0..n).filter(|&k| graph.active[k]).map(|k| (b[k] - ap[k]).abs()).fold(0.0, f64::max);
    if res <= tol * scale.max(1.0) {
        if singular {
            project_mean(graph, &mut x);
        }
        return Ok((x, res));
    }
    Err(Error::NoConvergence(format!("conjugate gradients stopped with residual {res:e}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GreenFlavor {
    Dirichlet,
    PeriodicPinned,
}

/// The Green function `G(·, y)` of `∇*(a∇·)` for every free vertex `y`, stored densely.
#[derive(Clone, Debug)]
pub struct GreenMatrix {
    pub flavor: GreenFlavor,
    free: Vec<usize>,
    slot: Vec<Option<usize>>,
    data: Vec<f64>,
}

impl GreenMatrix {
    /// `G(x, y)`; zero when either vertex is held fixed.
    pub fn get(&self, x: usize, y: usize) -> f64 {
        match (self.slot[x], self.slot[y]) {
            (Some(i), Some(j)) => self.data[i * self.free.len() + j],
            _ => 0.0,
        }
    }

    pub fn free_vertices(&self) -> &[usize] {
        &self.free
    }

    /// `Σ_{x,y} u(x) G(x,y) v(y)`.
    pub fn bilinear(&self, u: &[f64], v: &[f64]) -> f64 {
        let n = self.free.len();
        let mut s = 0.0;
        for (i, &x) in self.free.iter().enumerate() {
            if u[x] == 0.0 {
                continue;
            }
            let row = &self.data[i * n..(i + 1) * n];
            s += u[x] * self.free.iter().zip(row).map(|(&y, g)| g * v[y]).sum::<f64>();
        }
        s
    }

    fn build(graph: &LatticeGraph, flavor: GreenFlavor, columns: impl Fn(usize) -> Result<Vec<f64>>) -> Result<Self> {
        let free: Vec<usize> = (0..graph.num_vertices).filter(|&x| graph.active[x]).collect();
        let mut slot = vec![None; graph.num_vertices];
        for (k, &x) in free.iter().enumerate() {
            slot[x] = Some(k);
        }
        let n = free.len();
        let mut data = vec![0.0; n * n];
        for (j, &y) in free.iter().enumerate() {
            let col = columns(y)?;
            for (i, &x) in free.iter().enumerate() {
                data[i * n + j] = col[x];
            }
        }
        Ok(Self { flavor, free, slot, data })
    }
}

fn graph_flavor(graph: &LatticeGraph) -> GreenFlavor {
    if graph.active.iter().filter(|a| !**a).count() == 1 && graph.num_vertices > 1 && !graph.active[0] {
        GreenFlavor::PeriodicPinned
    } else {
        GreenFlavor::Dirichlet
    }
}

/// One column `G(·, y)` by conjugate gradients to residual `1e-10`.
pub fn green_column(graph: &LatticeGraph, a: &[f64], y: usize) -> Result<Vec<f64>> {
    if !graph.active[y] {
        return Err(Error::InvalidParameter(format!("vertex {y} is held fixed")));
    }
    let mut rhs = vec![0.0; graph.num_vertices];
    rhs[y] = 1.0;
    let (x, _) = conjugate_gradient(graph, a, 0.0, &rhs, 1e-10, 50 * graph.num_vertices + 1000)?;
    Ok(x)
}

/// Green matrix of `∇*(a∇·)` on `graph` by iterative column solves.
pub fn green_weighted(graph: &LatticeGraph, a: &[f64]) -> Result<GreenMatrix> {
    if is_closed(graph) {
        return Err(Error::InvalidParameter("the operator needs at least one fixed vertex".into()));
    }
    GreenMatrix::build(graph, graph_flavor(graph), |y| green_column(graph, a, y))
}

/// Dirichlet Green function of the unit-conductance Laplacian on `Q`.
pub fn green_dirichlet(cube: &Cube) -> Result<GreenMatrix> {
    let g = LatticeGraph::dirichlet(cube);
    let a = vec![1.0; g.edges.len()];
    green_weighted(&g, &a)
}

/// The torus graph with the vertex `x0` held at zero.
pub fn pinned_torus_graph(torus: &Torus, x0: usize) -> LatticeGraph {
    let mut g = LatticeGraph::periodic(torus);
    g.active[x0] = false;
    g
}

/// Periodic Green function with zero boundary condition at `x0`.
pub fn green_periodic_pinned(torus: &Torus, x0: usize) -> Result<GreenMatrix> {
    let g = pinned_torus_graph(torus, x0);
    let a = vec![1.0; g.edges.len()];
    let mut m = green_weighted(&g, &a)?;
    m.flavor = GreenFlavor::PeriodicPinned;
    Ok(m)
}

/// Dense Cholesky Green matrix, the reference for the iterative solves.
pub fn green_dense(graph: &LatticeGraph, a: &[f64]) -> Result<GreenMatrix> {
    let free: Vec<usize> = (0..graph.num_vertices).filter(|&x| graph.active[x]).collect();
    if free.len() > 6000 {
        return Err(Error::InvalidParameter(format!("{} unknowns is too many for a dense factorization", free.len())));
    }
    let mut slot = vec![None; graph.num_vertices];
    for (k, &x) in free.iter().enumerate() {
        slot[x] = Some(k);
    }
    let n = free.len();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for (e, &c) in graph.edges.iter().zip(a) {
        let (t, h) = (slot[e.tail], slot[e.head]);
        if let Some(i) = t {
            m[(i, i)] += c;
        }
        if let Some(i) = h {
            m[(i, i)] += c;
        }
        if let (Some(i), Some(j)) = (t, h) {
            m[(i, j)] -= c;
            m[(j, i)] -= c;
        }
    }
    let inv = Cholesky::new(m).ok_or(Error::NotPositiveDefinite)?.inverse();
    let data = inv.as_slice().to_vec();
    Ok(GreenMatrix { flavor: graph_flavor(graph), free, slot, data })
}

/// Time stepping for `∂_t w + ∇*(a∇w) = ∇*h`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stepping {
    #[default]
    Explicit,
    /// Backward Euler, unconditionally stable.
    Implicit,
}

/// Largest stable explicit step for conductances `a`: `1 / max_x Σ_{e∋x} a_e`.
pub fn explicit_step_bound(graph: &LatticeGraph, a: &[f64]) -> f64 {
    let mut deg = vec![0.0f64; graph.num_vertices];
    for (e, &c) in graph.edges.iter().zip(a) {
        deg[e.tail] += c;
        deg[e.head] += c;
    }
    let m = deg.iter().zip(&graph.active).filter(|(_, &act)| act).map(|(d, _)| *d).fold(0.0, f64::max);
    1.0 / m.max(f64::MIN_POSITIVE)
}

fn energy(graph: &LatticeGraph, w: &[f64]) -> f64 {
    dot_active(graph, w, w)
}

fn parabolic_step(graph: &LatticeGraph, w: &mut [f64], a: &[f64], h: Option<&[f64]>, dt: f64, stepping: Stepping) -> Result<()> {
    let n = graph.num_vertices;
    if w.len() != n || a.len() != graph.edges.len() {
        return Err(Error::DimensionMismatch { expected: n, got: w.len() });
    }
    let before = if h.is_none() { energy(graph, w) } else { 0.0 };
    let src = h.map(|h| graph.div_star(h));
    match stepping {
        Stepping::Explicit => {
            let bound = explicit_step_bound(graph, a);
            if dt > bound * (1.0 + 1e-12) {
                return Err(Error::UnstableStep { dt, bound });
            }
            let mut k = vec![0.0; n];
            graph.apply_operator(a, w, &mut k);
            for x in 0..n {
                if graph.active[x] {
                    w[x] -= dt * k[x];
                    if let Some(s) = &src {
                        w[x] += dt * s[x];
                    }
                } else {
                    w[x] = 0.0;
                }
            }
        }
        Stepping::Implicit => {
            let mut rhs: Vec<f64> = w.iter().map(|v| v / dt).collect();
            if let Some(s) = &src {
                for x in 0..n {
                    rhs[x] += s[x];
                }
            }
            let mass: f64 = if is_closed(graph) { (0..n).filter(|&x| graph.active[x]).map(|x| w[x]).sum() } else { 0.0 };
            let (sol, _) = conjugate_gradient(graph, a, 1.0 / dt, &rhs, 1e-13, 10 * n + 1000)?;
            w.copy_from_slice(&sol);
            if is_closed(graph) && h.is_none() {
                // remove the tiny drift of the conserved mass left by the iterative solve
                let na = graph.num_active() as f64;
                let now: f64 = (0..n).filter(|&x| graph.active[x]).map(|x| w[x]).sum();
                for x in 0..n {
                    if graph.active[x] {
                        w[x] += (mass - now) / na;
                    }
                }
            }
        }
    }
    if h.is_none() {
        let after = energy(graph, w);
        if after > before * (1.0 + 1e-9) + 1e-300 {
            return Err(Error::NoConvergence(format!("energy grew from {before:e} to {after:e}")));
        }
    }
    Ok(())
}

/// One step of the Cauchy–Dirichlet problem on a graph from [`LatticeGraph::dirichlet`].
pub fn parabolic_cd_step(graph: &LatticeGraph, w: &mut [f64], a: &[f64], h: Option<&[f64]>, dt: f64, stepping: Stepping) -> Result<()> {
    if is_closed(graph) {
        return Err(Error::WrongBoundary("parabolic_cd_step"));
    }
    parabolic_step(graph, w, a, h, dt, stepping)
}

/// One step of the zero-flux problem on a graph from [`LatticeGraph::neumann`].
pub fn parabolic_cn_step(graph: &LatticeGraph, w: &mut [f64], a: &[f64], h: Option<&[f64]>, dt: f64, stepping: Stepping) -> Result<()> {
    if !is_closed(graph) {
        return Err(Error::WrongBoundary("parabolic_cn_step"));
    }
    parabolic_step(graph, w, a, h, dt, stepping)
}

/// Smallest eigenvalue of the unit Dirichlet Laplacian on `Q_L`, `Σ_i 2(1 - cos(π/2L))`.
pub fn dirichlet_gap(half_side: i64, dim: usize) -> f64 {
    dim as f64 * 2.0 * (1.0 - (std::f64::consts::PI / (2 * half_side) as f64).cos())
}

/// Lowest Dirichlet eigenvector `Π_i sin(π (x_i + L) / 2L)` on the vertices of `Q_L`.
pub fn dirichlet_mode(cube: &Cube) -> Vec<f64> {
    let s = cube.side() as f64;
    (0..cube.num_vertices())
        .map(|i| {
            let lo = cube.lower();
            cube.coords(i).iter().zip(lo).map(|(&x, &l)| (std::f64::consts::PI * (x - l) as f64 / s).sin()).product()
        })
        .collect()
}

/// Spectral gap of the unit zero-flux Laplacian on `Q°`, `2(1 - cos(π/n))` with `n` interior vertices per axis.
pub fn neumann_gap(cube: &Cube) -> f64 {
    let n = (cube.side() - 1) as f64;
    2.0 * (1.0 - (std::f64::consts::PI / n).cos())
}

/// How conductances evolve in a decay study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConductanceModel {
    Constant { value: f64 },
    /// Fresh i.i.d. uniform values in `[lo, hi]` on every edge at every step.
    RandomUniform { lo: f64, hi: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayProblem {
    pub half_side: i64,
    pub dim: usize,
    /// Initial edge field `f` on `E(Q_L)`; the solution starts from `∇*f`.
    pub initial_flux: Vec<f64>,
    /// Time-independent source `h` on `E(Q_L)`.
    pub source: Option<Vec<f64>>,
    pub conductance: ConductanceModel,
    pub horizon: f64,
    pub dt: f64,
    /// Record the norm every this many steps.
    pub record_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub times: Vec<f64>,
    pub norms_sq: Vec<f64>,
    /// Smallest `C` for which the envelope holds at every recorded time.
    pub fitted_c: Option<f64>,
    /// The same without the `(1+t)^{-1}` factor.
    pub fitted_c_without_prefactor: Option<f64>,
    /// Exponential rate of `‖w‖²` fitted on the second half of the horizon.
    pub tail_rate: f64,
    pub passed: bool,
}

/// Bound `C‖f‖²(1+t)⁻¹e^{-t/(CL²)} + C∫₀ᵗ‖h‖²e^{-s/(CL²)}ds` with time-independent `h`.
fn envelope(c: f64, l: f64, f2: f64, h2: f64, t: f64, prefactor: bool) -> f64 {
    let tau = c * l * l;
    let poly = if prefactor { 1.0 / (1.0 + t) } else { 1.0 };
    c * f2 * poly * (-t / tau).exp() + c * h2 * tau * (1.0 - (-t / tau).exp())
}

fn min_constant(times: &[f64], norms: &[f64], l: f64, f2: f64, h2: f64, prefactor: bool) -> Option<f64> {
    let holds = |c: f64| times.iter().zip(norms).all(|(&t, &n)| n <= envelope(c, l, f2, h2, t, prefactor) * (1.0 + 1e-12));
    let (mut lo, mut hi) = (1e-8f64, 1e12f64);
    if !holds(hi) {
        return None;
    }
    if holds(lo) {
        return Some(lo);
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if holds(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi / lo < 1.0 + 1e-9 {
            break;
        }
    }
    Some(hi)
}

/// Time-step the Cauchy–Dirichlet problem and fit the decay envelope constant.
pub fn decay_envelope_check(p: &DecayProblem) -> Result<DecayReport> {
    use rand::{Rng, SeedableRng};
    let cube = Cube::centered(p.half_side, p.dim)?;
    let graph = LatticeGraph::dirichlet(&cube);
    let m = graph.edges.len();
    if p.initial_flux.len() != m || p.source.as_ref().is_some_and(|h| h.len() != m) {
        return Err(Error::DimensionMismatch { expected: m, got: p.initial_flux.len() });
    }
    let mut a = vec![1.0; m];
    let mut rng = None;
    match p.conductance {
        ConductanceModel::Constant { value } => {
            if !(value > 0.0) {
                return Err(Error::InvalidParameter("conductance must be positive".into()));
            }
            a.iter_mut().for_each(|v| *v = value);
        }
        ConductanceModel::RandomUniform { lo, hi, seed } => {
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::InvalidParameter(format!("bad conductance range [{lo}, {hi}]")));
            }
            rng = Some((rand_chacha::ChaCha8Rng::seed_from_u64(seed), lo, hi));
        }
    }
    let mut w = graph.div_star(&p.initial_flux);
    for (v, &act) in w.iter_mut().zip(&graph.active) {
        if !act {
            *v = 0.0;
        }
    }
    let f2: f64 = p.initial_flux.iter().map(|v| v * v).sum();
    let h2: f64 = p.source.as_ref().map(|h| h.iter().map(|v| v * v).sum()).unwrap_or(0.0);
    let steps = (p.horizon / p.dt).round() as usize;
    let every = p.record_every.max(1);
    let mut times = vec![0.0];
    let mut norms = vec![energy(&graph, &w)];
    for s in 1..=steps {
        if let Some((r, lo, hi)) = rng.as_mut() {
            for v in a.iter_mut() {
                *v = r.random_range(*lo..=*hi);
            }
        }
        parabolic_cd_step(&graph, &mut w, &a, p.source.as_deref(), p.dt, Stepping::Explicit)?;
        if s % every == 0 || s == steps {
            times.push(s as f64 * p.dt);
            norms.push(energy(&graph, &w));
        }
    }
    let l = p.half_side as f64;
    let fitted_c = min_constant(&times, &norms, l, f2, h2, true);
    let fitted_c_without_prefactor = min_constant(&times, &norms, l, f2, h2, false);
    let half = times.len() / 2;
    let tail: Vec<(f64, f64)> =
        times[half..].iter().zip(&norms[half..]).filter(|(_, &n)| n > 1e-300).map(|(t, n)| (*t, n.ln())).collect();
    let tail_rate = if tail.len() >= 2 {
        let (x, y): (Vec<f64>, Vec<f64>) = tail.into_iter().unzip();
        -linear_fit(&x, &y)?.slope
    } else {
        f64::NAN
    };
    Ok(DecayReport { times, norms_sq: norms, passed: fitted_c.is_some(), fitted_c, fitted_c_without_prefactor, tail_rate })
}

/// A parabolic solution recorded on the vertices of a cube at increasing times.
#[derive(Clone, Debug, PartialEq)]
pub struct ParabolicRecord {
    pub cube: Cube,
    pub times: Vec<f64>,
    pub frames: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolderProbe {
    /// Cylinder radii `r`.
    pub radii: Vec<f64>,
    /// `osc_{W_r} w` over `(t - r², t] × (x0 + Q_r)`.
    pub oscillations: Vec<f64>,
    /// Slope of `log osc` against `log r`.
    pub beta: f64,
    pub r_squared: f64,
    /// `sup |w(p) - w(p0)| / d(p, p0)^β` over the half cylinder, `d` the parabolic distance.
    pub seminorm: f64,
}

/// Oscillation decay of a parabolic solution on nested cylinders centered at `(t_end, center)`.
pub fn nash_holder_probe(rec: &ParabolicRecord, center: &[i64], k: i64) -> Result<HolderProbe> {
    if rec.frames.is_empty() || rec.frames.len() != rec.times.len() {
        return Err(Error::InsufficientData("empty parabolic record".into()));
    }
    let t_end = *rec.times.last().unwrap();
    if rec.times[0] > t_end - (k * k) as f64 + 1e-9 {
        return Err(Error::InsufficientData(format!("record does not span a time interval of length K² = {}", k * k)));
    }
    let cube = &rec.cube;
    let p0 = cube.index(center).ok_or_else(|| Error::InvalidParameter("center outside cube".into()))?;
    let mut radii = Vec::new();
    let mut r = k;
    while r >= 1 {
        radii.push(r);
        r /= 2;
    }
    let within = |x: &[i64], r: i64| x.iter().zip(center).all(|(a, b)| (a - b).abs() <= r);
    let coords: Vec<Vec<i64>> = (0..cube.num_vertices()).map(|i| cube.coords(i)).collect();
    let mut osc = Vec::new();
    for &r in &radii {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (t, frame) in rec.times.iter().zip(&rec.frames) {
            if *t <= t_end - (r * r) as f64 {
                continue;
            }
            for (i, x) in coords.iter().enumerate() {
                if within(x, r) {
                    lo = lo.min(frame[i]);
                    hi = hi.max(frame[i]);
                }
            }
        }
        osc.push(hi - lo);
    }
    let pts: Vec<(f64, f64)> =
        radii.iter().zip(&osc).filter(|(_, &o)| o > 0.0).map(|(&r, &o)| ((r as f64).ln(), o.ln())).collect();
    let (beta, r_squared) = if pts.len() >= 2 {
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        let f = linear_fit(&x, &y)?;
        (f.slope, f.r_squared)
    } else {
        (f64::NAN, f64::NAN)
    };
    let w0 = rec.frames.last().unwrap()[p0];
    let half = k / 2;
    let mut seminorm: f64 = 0.0;
    for (t, frame) in rec.times.iter().zip(&rec.frames) {
        let dt = t_end - t;
        if dt >= (half * half) as f64 {
            continue;
        }
        for (i, x) in coords.iter().enumerate() {
            if !within(x, half) {
                continue;
            }
            let dx = x.iter().zip(center).map(|(a, b)| (a - b).abs()).max().unwrap_or(0) as f64;
            let d = dx.max(dt.sqrt());
            if d > 0.0 && beta.is_finite() {
                seminorm = seminorm.max((frame[i] - w0).abs() / d.powf(beta.min(1.0)));
            }
        }
    }
    Ok(HolderProbe { radii: radii.iter().map(|&r| r as f64).collect(), oscillations: osc, beta, r_squared, seminorm })
}
