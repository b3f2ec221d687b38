//! Coupling experiments: two Langevin chains driven by the same noise.
//!
//! All couplings start both components from the zero field and share Brownian
//! increments on the vertices they have in common (see [`CoupledPair`]).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{burn_in_time, measure_dynamic_oscillation, sample_equilibrium, Chain, CoupledPair, OscillationTail, Scheme, System, TrajectoryConfig};
use crate::error::{Error, Result};
use crate::hs::SubCube;
use crate::lattice::Cube;
use crate::potential::{Interaction, Potential, SampleGrid};
use crate::stats::{iid_estimate, linear_fit, Estimate};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingOptions {
    pub dt: f64,
    pub scheme: Scheme,
    /// Independent coupled runs.
    pub samples: usize,
    /// `A` in the horizon `A·L²·log L` (or `A·K²·log K` for inner cubes).
    pub horizon_factor: f64,
    /// Thresholds `s` for the tail curve, in units of `log L`.
    pub s_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for CouplingOptions {
    fn default() -> Self {
        Self {
            dt: 0.02,
            scheme: Scheme::EulerMaruyama,
            samples: 16,
            horizon_factor: 1.0,
            s_grid: vec![0.25, 0.5, 1.0, 1.5, 2.0, 3.0],
            seed: 23,
        }
    }
}

/// Summary of one coupling experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub first: String,
    pub second: String,
    pub horizon: f64,
    /// Per-run `sup_{t ≤ T, x} |φ_t(x) - φ̃_t(x)|` over shared vertices.
    pub sup_differences: Vec<f64>,
    /// Exceedance of the sup difference over `s·log L`.
    pub tail: OscillationTail,
    /// Mean over runs of the sup over inner edges of `|∇φ - ∇φ̃|` at the final time.
    pub inner_gradient: Estimate,
    /// Side of the inner cube used for `inner_gradient`.
    pub inner_side: i64,
}

fn describe(system: &System) -> String {
    format!(
        "{:?} L={} d={} {} tilt={:?}",
        system.boundary,
        system.half_side(),
        system.dim(),
        system.potential.id(),
        system.tilt
    )
}

/// Edge pairs `(k, k̃)` of the inner cube present in both systems.
fn shared_edges(a: &System, b: &System, inner: &Cube) -> Result<Vec<(usize, usize)>> {
    let sa = SubCube::dirichlet(a, inner)?;
    let sb = SubCube::dirichlet(b, inner)?;
    Ok(sa.edge_map.iter().cloned().zip(sb.edge_map.iter().cloned()).collect())
}

fn sup_gradient_difference(a: &System, pa: &[f64], b: &System, pb: &[f64], edges: &[(usize, usize)]) -> f64 {
    edges
        .iter()
        .map(|&(ka, kb)| {
            let ea = a.graph.edges[ka];
            let eb = b.graph.edges[kb];
            ((pa[ea.head] - pa[ea.tail]) - (pb[eb.head] - pb[eb.tail])).abs()
        })
        .fold(0.0, f64::max)
}

/// Couple the Dirichlet box `Q_L` with the torus of the same half side.
///
/// The torus is pinned at the origin, so the difference is that of two fields
/// normalized differently; the tail is reported against `s·log L`.
pub fn couple_dirichlet_periodic(dirichlet: &System, periodic: &System, opts: &CouplingOptions) -> Result<CouplingReport> {
    let l = dirichlet.half_side();
    if l < 4 {
        return Err(Error::InvalidParameter("the Dirichlet-periodic coupling needs L >= 4".into()));
    }
    let horizon = burn_in_time(opts.horizon_factor, l);
    let steps = (horizon / opts.dt).round() as u64;
    let inner = Cube::centered(l / 2, dirichlet.dim())?;
    let edges = shared_edges(dirichlet, periodic, &inner)?;
    let mut sups = Vec::with_capacity(opts.samples);
    let mut inner_sups = Vec::with_capacity(opts.samples);
    for r in 0..opts.samples {
        let mut pair = CoupledPair::new(dirichlet.clone(), periodic.clone(), opts.dt, opts.scheme, opts.seed.wrapping_add(r as u64))?;
        let mut sup: f64 = 0.0;
        for _ in 0..steps {
            pair.step();
            sup = sup.max(pair.sup_difference());
        }
        sups.push(sup);
        inner_sups.push(sup_gradient_difference(dirichlet, pair.first.values(), periodic, pair.second.values(), &edges));
    }
    let tail = measure_dynamic_oscillation(&sups, l, 1.0, &opts.s_grid)?;
    Ok(CouplingReport {
        first: describe(dirichlet),
        second: describe(periodic),
        horizon,
        sup_differences: sups,
        tail,
        inner_gradient: iid_estimate(&inner_sups),
        inner_side: inner.side(),
    })
}

/// `|mean over inner edges in direction i of ⟨∇φ(e)⟩|` under the box measure, per direction.
pub fn inner_gradient_bias(system: &System, config: &TrajectoryConfig) -> Result<Vec<Estimate>> {
    let d = system.dim();
    let inner = Cube::centered(system.half_side() / 2, d)?;
    let sub = SubCube::dirichlet(system, &inner)?;
    let mut series = vec![Vec::with_capacity(config.samples); d];
    let mut counts = vec![0usize; d];
    for e in &sub.graph.edges {
        counts[e.dir] += 1;
    }
    for snap in sample_equilibrium(system.clone(), config)? {
        let mut sums = vec![0.0; d];
        for &k in &sub.edge_map {
            let e = system.graph.edges[k];
            sums[e.dir] += snap.values[e.head] - snap.values[e.tail];
        }
        for i in 0..d {
            series[i].push(sums[i] / counts[i] as f64);
        }
    }
    series
        .iter()
        .map(|s| {
            let e = crate::stats::batch_means(s)?;
            Ok(Estimate { value: e.value.abs(), ..e })
        })
        .collect()
}

/// One row of a tilt/potential coupling for an inner cube `x₀ + Q_K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerCubeCoupling {
    pub k: i64,
    /// `E[sup_{t, e ∈ E(x₀+Q_K)} |∇φ - ∇φ̃|]` over the window.
    pub mean_sup: Estimate,
    /// `‖V' - Ṽ'‖_∞` with the tilt difference absorbed into `Ṽ`.
    pub force_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TiltCouplingReport {
    pub first: String,
    pub second: String,
    pub window_start: f64,
    pub window_length: f64,
    pub rows: Vec<InnerCubeCoupling>,
    /// Slope of `log mean_sup` against `log K`, when at least two rows are positive.
    pub fitted_exponent: Option<f64>,
}

/// `sup_s |V'(s + ξ - ξ̃) ... |`: the largest difference of the effective forces on a grid.
pub fn force_gap(v: &Potential, tilt: &[f64], vt: &Potential, tilt_t: &[f64]) -> f64 {
    let grid = SampleGrid::default();
    let h = (grid.hi - grid.lo) / (grid.points - 1) as f64;
    let mut gap: f64 = 0.0;
    for i in 0..tilt.len() {
        for k in 0..grid.points {
            let s = grid.lo + k as f64 * h;
            gap = gap.max((v.first(s - tilt[i]) - vt.first(s - tilt_t[i])).abs());
        }
    }
    gap
}

/// Couple `μ_{L,ξ,V}` with `μ_{L̃,ξ̃,Ṽ}` (both Dirichlet, `L ≤ L̃`) and record the gradient
/// discrepancy on centered inner cubes `x₀ + Q_K` for each `K` in `ks`, over the time
/// window `[t*, t* + A K_max² log K_max]` with `t* = window_start` (default `K_max²`).
pub fn couple_tilts_potentials(
    first: &System,
    second: &System,
    ks: &[i64],
    offset: &[i64],
    window_start: Option<f64>,
    opts: &CouplingOptions,
) -> Result<TiltCouplingReport> {
    if first.half_side() > second.half_side() {
        return Err(Error::InvalidParameter("need L <= L̃".into()));
    }
    let kmax = *ks.iter().max().ok_or_else(|| Error::InvalidParameter("no inner cube sizes".into()))?;
    if ks.iter().any(|&k| k < 2) {
        return Err(Error::InvalidParameter("need K >= 2".into()));
    }
    let d = first.dim();
    let cubes: Vec<Cube> = ks
        .iter()
        .map(|&k| Cube::centered(k, d).and_then(|c| c.translate(offset)))
        .collect::<Result<_>>()?;
    // x₀ + Q_{2K} must lie in Q_L
    let outer = Cube::centered(2 * kmax, d)?.translate(offset)?;
    if !(0..outer.num_vertices()).all(|x| first.domain.locate(&outer.coords(x)).is_some()) {
        return Err(Error::InvalidParameter("x₀ + Q_{2K} does not fit in Q_L".into()));
    }
    let edges: Vec<Vec<(usize, usize)>> = cubes.iter().map(|c| shared_edges(first, second, c)).collect::<Result<_>>()?;
    let t_star = window_start.unwrap_or((kmax * kmax) as f64);
    let length = burn_in_time(opts.horizon_factor, kmax);
    let start = (t_star / opts.dt).round() as u64;
    let stop = start + (length / opts.dt).round() as u64;
    let mut sups = vec![Vec::with_capacity(opts.samples); ks.len()];
    for r in 0..opts.samples {
        let mut pair = CoupledPair::new(first.clone(), second.clone(), opts.dt, opts.scheme, opts.seed.wrapping_add(r as u64))?;
        let mut best = vec![0.0f64; ks.len()];
        for n in 0..stop {
            pair.step();
            if n + 1 >= start {
                for (b, e) in best.iter_mut().zip(&edges) {
                    *b = b.max(sup_gradient_difference(first, pair.first.values(), second, pair.second.values(), e));
                }
            }
        }
        for (s, b) in sups.iter_mut().zip(best) {
            s.push(b);
        }
    }
    let gap = force_gap(&first.potential, &first.tilt, &second.potential, &second.tilt);
    let rows: Vec<InnerCubeCoupling> =
        ks.iter().zip(&sups).map(|(&k, s)| InnerCubeCoupling { k, mean_sup: iid_estimate(s), force_gap: gap }).collect();
    let positive: Vec<&InnerCubeCoupling> = rows.iter().filter(|r| r.mean_sup.value > 0.0).collect();
    let fitted_exponent = if positive.len() >= 2 {
        let x: Vec<f64> = positive.iter().map(|r| (r.k as f64).ln()).collect();
        let y: Vec<f64> = positive.iter().map(|r| r.mean_sup.value.ln()).collect();
        linear_fit(&x, &y).ok().map(|f| f.slope)
    } else {
        None
    };
    Ok(TiltCouplingReport {
        first: describe(first),
        second: describe(second),
        window_start: t_star,
        window_length: length,
        rows,
        fitted_exponent,
    })
}

/// Which HS problem to compare in [`compare_hs_solutions`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HsProblem {
    /// `(-L + ∇*a∇)v = ∇*(a e_i)` with zero boundary values.
    Dirichlet,
    /// Zero-mean solution with unit flux `e_i` across `∂E`.
    Neumann,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HsComparison {
    pub k: i64,
    pub problem: HsProblem,
    pub direction: usize,
    /// `E[|E(x₀+Q_K)|⁻¹ ‖∇v - ∇ṽ‖²]`.
    pub mean_square: Estimate,
}

/// Solve the same HS problem on `x₀ + Q_K` in both coupled environments and compare gradients.
///
/// Each run burns the pair in for `window_start`, then integrates both parabolic
/// problems along one shared-noise continuation; the time integrals are one-path
/// estimates of `v(·, φ)` and `ṽ(·, φ̃)`, so the reported mean square is an upper
/// estimate of the squared difference of the conditional means.
pub fn compare_hs_solutions(
    first: &System,
    second: &System,
    k: i64,
    problem: HsProblem,
    direction: usize,
    window_start: f64,
    max_time: f64,
    opts: &CouplingOptions,
) -> Result<HsComparison> {
    let d = first.dim();
    if direction >= d {
        return Err(Error::InvalidParameter("direction out of range".into()));
    }
    let cube = Cube::centered(k, d)?;
    let (sa, sb) = match problem {
        HsProblem::Dirichlet => (SubCube::dirichlet(first, &cube)?, SubCube::dirichlet(second, &cube)?),
        HsProblem::Neumann => (SubCube::neumann(first, &cube)?, SubCube::neumann(second, &cube)?),
    };
    let mut q = vec![0.0; d];
    q[direction] = 1.0;
    let neumann_src = crate::hs::neumann_source(&cube, None, &q)?;
    let mut values = Vec::with_capacity(opts.samples);
    let steps = (max_time / opts.dt).round() as u64;
    for r in 0..opts.samples {
        let mut pair = CoupledPair::new(first.clone(), second.clone(), opts.dt, Scheme::EulerMaruyama, opts.seed.wrapping_add(r as u64))?;
        for _ in 0..(window_start / opts.dt).round() as u64 {
            pair.step();
        }
        let mut aa = vec![0.0; first.graph.edges.len()];
        let mut ab = vec![0.0; second.graph.edges.len()];
        let mut ra = vec![0.0; sa.graph.edges.len()];
        let mut rb = vec![0.0; sb.graph.edges.len()];
        let init = |sys: &System, sub: &SubCube, phi: &[f64], env: &mut Vec<f64>, r: &mut Vec<f64>| -> Vec<f64> {
            match problem {
                HsProblem::Dirichlet => {
                    sys.conductance(phi, env);
                    sub.restrict(env, r);
                    let ind: Vec<f64> = sub.graph.edges.iter().zip(r.iter()).map(|(e, a)| if e.dir == direction { *a } else { 0.0 }).collect();
                    let mut s = sub.graph.div_star(&ind);
                    for (v, &act) in s.iter_mut().zip(&sub.graph.active) {
                        if !act {
                            *v = 0.0;
                        }
                    }
                    s
                }
                HsProblem::Neumann => neumann_src.clone(),
            }
        };
        let mut wa = init(first, &sa, pair.first.values(), &mut aa, &mut ra);
        let mut wb = init(second, &sb, pair.second.values(), &mut ab, &mut rb);
        let mut va = vec![0.0; wa.len()];
        let mut vb = vec![0.0; wb.len()];
        let mut tmp = vec![0.0; wa.len()];
        for _ in 0..steps {
            first.conductance(pair.first.values(), &mut aa);
            second.conductance(pair.second.values(), &mut ab);
            sa.restrict(&aa, &mut ra);
            sb.restrict(&ab, &mut rb);
            for (v, w) in va.iter_mut().zip(&wa) {
                *v += opts.dt * w;
            }
            for (v, w) in vb.iter_mut().zip(&wb) {
                *v += opts.dt * w;
            }
            sa.step(&ra, &mut wa, opts.dt, &mut tmp);
            sb.step(&rb, &mut wb, opts.dt, &mut tmp);
            pair.step();
        }
        let ga = sa.graph.gradient(&va);
        let gb = sb.graph.gradient(&vb);
        let ms = ga.iter().zip(&gb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / ga.len() as f64;
        values.push(ms);
    }
    Ok(HsComparison { k, problem, direction, mean_square: iid_estimate(&values) })
}

/// Identical dynamics from two initial fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub times: Vec<f64>,
    /// `‖φ_t - φ̃_t‖₂` after each step.
    pub l2: Vec<f64>,
    /// Steps at which the distance increased.
    pub violations: usize,
    /// Exponential decay rate fitted to `log ‖φ_t - φ̃_t‖`.
    pub fitted_rate: f64,
    /// Smallest eigenvalue of the Hessian of `H` for quadratic potentials, `λ` times the
    /// weighted Dirichlet gap otherwise.
    pub predicted_rate: f64,
}

/// Lowest eigenvalue of `DᵀWD` restricted to the free vertices of a Dirichlet system.
pub fn weighted_dirichlet_gap(system: &System) -> Result<f64> {
    let free: Vec<usize> = (0..system.num_vertices()).filter(|&x| system.graph.active[x]).collect();
    if free.len() > 4000 {
        return Err(Error::InvalidParameter("box too large for a dense eigenvalue solve".into()));
    }
    let mut slot = vec![None; system.num_vertices()];
    for (i, &x) in free.iter().enumerate() {
        slot[x] = Some(i);
    }
    let mut a = DMatrix::<f64>::zeros(free.len(), free.len());
    for (k, e) in system.graph.edges.iter().enumerate() {
        let w = system.weights[k];
        let (t, h) = (slot[e.tail], slot[e.head]);
        if let Some(i) = t {
            a[(i, i)] += w;
        }
        if let Some(j) = h {
            a[(j, j)] += w;
        }
        if let (Some(i), Some(j)) = (t, h) {
            a[(i, j)] -= w;
            a[(j, i)] -= w;
        }
    }
    Ok(a.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min))
}

/// Run two copies of the same Dirichlet dynamics with shared noise from `a` and `b`.
///
/// Convexity of `V` and `dt` below the stability bound make every step a contraction
/// in `ℓ²`; the run stops early once the distance reaches `1e-12` of its start.
pub fn contraction_check(system: &System, a: &[f64], b: &[f64], time: f64, dt: f64, scheme: Scheme, seed: u64) -> Result<ContractionReport> {
    let mut pair = CoupledPair::new(system.clone(), system.clone(), dt, scheme, seed)?;
    pair.first.set_values(a)?;
    pair.second.set_values(b)?;
    let steps = (time / dt).round() as usize;
    let start = pair.l2_difference().sqrt();
    if start == 0.0 {
        return Err(Error::InvalidParameter("initial fields coincide".into()));
    }
    let mut times = Vec::with_capacity(steps);
    let mut l2 = Vec::with_capacity(steps);
    let mut prev = start;
    let mut violations = 0;
    for n in 0..steps {
        pair.step();
        let cur = pair.l2_difference().sqrt();
        if cur > prev {
            violations += 1;
        }
        prev = cur;
        times.push((n + 1) as f64 * dt);
        l2.push(cur);
        if cur < 1e-12 * start {
            break;
        }
    }
    // fit over the second half, where the slowest mode dominates
    let h = l2.len() / 2;
    let x: Vec<f64> = times[h..].to_vec();
    let y: Vec<f64> = l2[h..].iter().map(|v| v.ln()).collect();
    let fit = linear_fit(&x, &y)?;
    let gap = weighted_dirichlet_gap(system)?;
    let predicted_rate = match system.potential {
        Potential::Quadratic { c } => c * gap,
        ref p => p.lambda() * gap,
    };
    Ok(ContractionReport { times, l2, violations, fitted_rate: -fit.slope, predicted_rate })
}

/// Single-time marginal check: mean of `φ(0)²` in a coupled component against an uncoupled run.
pub fn marginal_check(system: &System, partner: &System, steps: u64, samples: usize, opts: &CouplingOptions) -> Result<(Estimate, Estimate)> {
    let center = system.domain.locate(&vec![0; system.dim()]).ok_or_else(|| Error::InvalidParameter("origin missing".into()))?;
    let mut coupled = Vec::with_capacity(samples);
    let mut single = Vec::with_capacity(samples);
    for r in 0..samples {
        let mut pair = CoupledPair::new(system.clone(), partner.clone(), opts.dt, opts.scheme, opts.seed.wrapping_add(r as u64))?;
        let mut alone = Chain::with_seed(system.clone(), opts.dt, opts.scheme, opts.seed.wrapping_add(1_000_000 + r as u64))?;
        for _ in 0..steps {
            pair.step();
        }
        alone.advance(steps);
        coupled.push(pair.first.values()[center].powi(2));
        single.push(alone.values()[center].powi(2));
    }
    Ok((iid_estimate(&coupled), iid_estimate(&single)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Convention;

    fn quad(l: i64) -> System {
        System::dirichlet(l, 2, Potential::quadratic(1.0).unwrap(), vec![0.0, 0.0], Convention::Paired).unwrap()
    }

    #[test]
    fn identical_systems_stay_identical() {
        let s = System::dirichlet(6, 2, Potential::logcosh(0.5).unwrap(), vec![0.2, 0.0], Convention::Paired).unwrap();
        let opts = CouplingOptions { samples: 2, ..Default::default() };
        let r = couple_tilts_potentials(&s, &s, &[2], &[0, 0], Some(1.0), &opts).unwrap();
        assert_eq!(r.rows[0].mean_sup.value, 0.0);
        let c = compare_hs_solutions(&s, &s, 2, HsProblem::Neumann, 0, 1.0, 20.0, &opts).unwrap();
        assert_eq!(c.mean_square.value, 0.0);
    }

    #[test]
    fn contraction_is_monotone_with_gap_rate() {
        let s = quad(5);
        let n = s.num_vertices();
        let a: Vec<f64> = (0..n).map(|x| if s.graph.active[x] { ((x * 37) % 11) as f64 - 5.0 } else { 0.0 }).collect();
        let b = vec![0.0; n];
        let r = contraction_check(&s, &a, &b, 60.0, 0.02, Scheme::EulerMaruyama, 3).unwrap();
        assert_eq!(r.violations, 0);
        let ratio = r.fitted_rate / r.predicted_rate;
        assert!(ratio > 0.9 && ratio < 1.1, "{ratio}");
    }

    #[test]
    fn inner_cubes_are_nested() {
        let a = System::dirichlet(8, 2, Potential::logcosh(0.5).unwrap(), vec![0.0, 0.0], Convention::Paired).unwrap();
        let b = a.with_tilt(vec![0.3, 0.0]).unwrap();
        let opts = CouplingOptions { samples: 3, ..Default::default() };
        let r = couple_tilts_potentials(&a, &b, &[2, 3, 4], &[0, 0], Some(2.0), &opts).unwrap();
        assert!(r.rows.windows(2).all(|w| w[0].mean_sup.value <= w[1].mean_sup.value));
        assert!(r.rows[0].force_gap > 0.0);
    }
}
