//! One function per experiment kind, each producing a result table and a JSON payload.

use gradphi::coupling::{contraction_check, couple_dirichlet_periodic, couple_tilts_potentials, CouplingOptions};
use gradphi::diagnostics::{
    brascamp_lieb_check, exp_moment_check, fit_multiscale_constant, gaussian_linear_checks, multiscale_poincare_check, spectral_gap_check,
    InequalityReport, Verdict,
};
use gradphi::dynamics::{burn_in_time, sample_equilibrium, Boundary, Scheme, System};
use gradphi::hs::{effective_diffusivity, DiffusivityOptions, GradientSum, LinearObservable, Observable};
use gradphi::lattice::Cube;
use gradphi::observables::{
    clt_check, diffusivity_bridge, gaussian_hessian, gaussian_limit, grad_sigma, hessian_by_differencing, hessian_sigma, sigma_by_integration,
    subadditivity_defect, CltOptions, CubeOptions,
};
use gradphi::potential::{Interaction, Potential};
use gradphi::solvers::{decay_envelope_check, ConductanceModel, DecayProblem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{Check, CoupleMode, ExperimentConfig, Kind, ObservableSpec};
use crate::error::CliError;

/// What a run produces before it is written out.
pub struct Outcome {
    pub table: String,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
    pub result: Value,
    pub flags: Vec<String>,
}

fn f(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(f).unwrap_or_default()
}

pub fn run(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    match cfg.kind {
        Kind::Sample => sample(cfg),
        Kind::SurfaceTension => surface_tension(cfg),
        Kind::Hessian => hessian(cfg),
        Kind::Diffusivity => diffusivity(cfg),
        Kind::Couple => couple(cfg),
        Kind::Verify => verify(cfg),
        Kind::Subadditivity => subadditivity(cfg),
        Kind::Clt => clt(cfg),
        Kind::Decay => decay(cfg),
    }
}

fn sample(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let system = cfg.system()?;
    let d = system.dim();
    let origin = system.domain.locate(&vec![0; d]).expect("origin is a vertex");
    let mut rows = Vec::with_capacity(cfg.sampler.samples);
    for (k, snap) in sample_equilibrium(system.clone(), &cfg.trajectory())?.enumerate() {
        let mut sums = vec![0.0; d];
        let mut counts = vec![0usize; d];
        for (j, e) in system.graph.edges.iter().enumerate() {
            sums[e.dir] += system.tilted_gradient(&snap.values, j);
            counts[e.dir] += 1;
        }
        let mut row = vec![k.to_string(), snap.step.to_string(), f(snap.time), f(snap.values[origin]), f(system.hamiltonian(&snap.values))];
        row.extend((0..d).map(|i| f(sums[i] / counts[i] as f64)));
        rows.push(row);
    }
    let header = match d {
        1 => vec!["sample", "step", "time", "phi_origin", "energy", "mean_tilted_gradient_0"],
        2 => vec!["sample", "step", "time", "phi_origin", "energy", "mean_tilted_gradient_0", "mean_tilted_gradient_1"],
        _ => vec!["sample", "step", "time", "phi_origin", "energy", "mean_tilted_gradient_0", "mean_tilted_gradient_1", "mean_tilted_gradient_2"],
    };
    if d > 3 {
        return Err(CliError::Config("kind sample writes at most three gradient columns; use d <= 3".into()));
    }
    Ok(Outcome { table: "samples.csv".into(), header, result: json!({ "samples": rows.len() }), rows, flags: vec![] })
}

fn surface_tension(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let system = cfg.system()?;
    let traj = cfg.trajectory();
    let grad = grad_sigma(&system, &traj)?;
    let sigma = sigma_by_integration(&system, &traj, cfg.experiment.nodes)?;
    let mut rows = vec![vec!["sigma".into(), String::new(), f(sigma.value), f(sigma.stderr)]];
    for (i, g) in grad.iter().enumerate() {
        rows.push(vec!["gradient".into(), i.to_string(), f(g.value), f(g.stderr)]);
    }
    Ok(Outcome {
        table: "surface_tension.csv".into(),
        header: vec!["quantity", "index", "value", "stderr"],
        rows,
        result: json!({ "sigma": sigma, "gradient": grad }),
        flags: vec![],
    })
}

fn hessian(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let system = cfg.system()?;
    let traj = cfg.trajectory();
    let est = hessian_sigma(&system, &traj)?;
    let oracle = if system.potential.is_quadratic() && system.boundary == Boundary::Dirichlet { Some(gaussian_hessian(&system)?) } else { None };
    let diff = match cfg.experiment.difference_step {
        Some(h) => Some(hessian_by_differencing(&system, &traj, h, cfg.experiment.nodes)?),
        None => None,
    };
    let d = system.dim();
    let mut rows = Vec::new();
    let mut flags = Vec::new();
    for i in 0..d {
        for j in 0..d {
            let e = est.hessian.get(i, j);
            let o = oracle.as_ref().map(|m| m.value[i * d + j]);
            let z = o.map(|o| e.z_score(o));
            if z.is_some_and(|z| z.abs() > 3.0) {
                flags.push(format!("entry ({i},{j}) is {:.2} standard errors from the Gaussian oracle", z.unwrap()));
            }
            let dh = diff.as_ref().map(|x| x.hessian.get(i, j));
            rows.push(vec![
                i.to_string(),
                j.to_string(),
                f(e.value),
                f(e.stderr),
                opt(o),
                opt(z),
                opt(dh.map(|x| x.value)),
                opt(dh.map(|x| x.stderr)),
            ]);
        }
    }
    Ok(Outcome {
        table: "hessian.csv".into(),
        header: vec!["i", "j", "value", "stderr", "oracle", "z", "differenced", "differenced_stderr"],
        rows,
        result: json!({ "estimate": est, "oracle": oracle, "differenced": diff }),
        flags,
    })
}

fn diffusivity(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let system = cfg.system()?;
    let opts = DiffusivityOptions {
        environments: cfg.experiment.environments,
        walks_per_environment: cfg.experiment.walks,
        horizon: cfg.experiment.horizon,
        dt: cfg.sampler.dt,
        scheme: cfg.sampler.scheme,
        burn_in_factor: cfg.sampler.burn_in,
        seed: cfg.seed,
    };
    let est = effective_diffusivity(&system, &opts)?;
    let bridge = diffusivity_bridge(system.dim(), system.half_side(), system.convention)?;
    let d = system.dim();
    let mut rows = Vec::new();
    for i in 0..d {
        for j in 0..d {
            let e = est.matrix.get(i, j);
            rows.push(vec![i.to_string(), j.to_string(), f(e.value), f(e.stderr), f(bridge), f(bridge * e.value), f(bridge * e.stderr)]);
        }
    }
    let flags = if est.flagged { vec!["walk displacement is not diffusive over the horizon".to_string()] } else { vec![] };
    Ok(Outcome {
        table: "diffusivity.csv".into(),
        header: vec!["i", "j", "value", "stderr", "bridge", "bridged", "bridged_stderr"],
        rows,
        result: json!({ "estimate": est, "bridge": bridge }),
        flags,
    })
}

fn couple(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let system = cfg.system()?;
    let e = &cfg.experiment;
    let opts = CouplingOptions {
        dt: cfg.sampler.dt,
        scheme: Scheme::EulerMaruyama,
        samples: e.runs,
        horizon_factor: e.horizon_factor,
        s_grid: e.s_grid.clone(),
        seed: cfg.seed,
    };
    match e.mode {
        CoupleMode::DirichletPeriodic => {
            if system.boundary != Boundary::Dirichlet {
                return Err(CliError::Config("dirichlet-periodic coupling starts from a Dirichlet lattice".into()));
            }
            let torus = System::periodic(system.half_side(), system.dim(), system.potential, system.tilt.clone(), system.convention)?;
            let r = couple_dirichlet_periodic(&system, &torus, &opts)?;
            let rows = r.tail.s.iter().zip(&r.tail.exceedance).map(|(s, x)| vec![f(*s), f(s * r.tail.scale), f(*x)]).collect();
            Ok(Outcome { table: "coupling_tail.csv".into(), header: vec!["s", "threshold", "exceedance"], rows, result: json!(r), flags: vec![] })
        }
        CoupleMode::Tilts => {
            let mut second = system.clone();
            if let Some(l) = e.second_half_side {
                second = System::dirichlet(l, system.dim(), system.potential, system.tilt.clone(), system.convention)?;
            }
            if let Some(v) = e.second_potential {
                second = System::dirichlet(second.half_side(), system.dim(), v, second.tilt.clone(), system.convention)?;
            }
            if let Some(t) = &e.second_tilt {
                second = second.with_tilt(t.clone())?;
            }
            let origin = vec![0; system.dim()];
            let r = couple_tilts_potentials(&system, &second, &e.ks, &origin, e.window_start, &opts)?;
            let rows = r.rows.iter().map(|x| vec![x.k.to_string(), f(x.mean_sup.value), f(x.mean_sup.stderr), f(x.force_gap)]).collect();
            Ok(Outcome { table: "coupling_inner.csv".into(), header: vec!["k", "mean_sup", "stderr", "force_gap"], rows, result: json!(r), flags: vec![] })
        }
        CoupleMode::Contraction => {
            let n = system.num_vertices();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = vec![0.0; n];
            let time = burn_in_time(e.horizon_factor, system.half_side());
            let r = contraction_check(&system, &a, &b, time, cfg.sampler.dt, Scheme::EulerMaruyama, cfg.seed)?;
            let rows = r.times.iter().zip(&r.l2).map(|(t, v)| vec![f(*t), f(*v)]).collect();
            let flags = if r.violations > 0 { vec![format!("{} steps increased the distance", r.violations)] } else { vec![] };
            Ok(Outcome {
                table: "contraction.csv".into(),
                header: vec!["time", "l2"],
                rows,
                result: json!({ "violations": r.violations, "fitted_rate": r.fitted_rate, "predicted_rate": r.predicted_rate }),
                flags,
            })
        }
    }
}

fn observable(spec: ObservableSpec, system: &System) -> Box<dyn Observable> {
    match spec {
        ObservableSpec::Point => {
            let mut c = vec![0.0; system.num_vertices()];
            let x = system.domain.locate(&vec![0; system.dim()]).expect("origin is a vertex");
            c[x] = 1.0;
            Box::new(LinearObservable { coeffs: c })
        }
        ObservableSpec::Sum => {
            Box::new(LinearObservable { coeffs: system.graph.active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect() })
        }
        ObservableSpec::GradientSine => Box::new(GradientSum { sine: true }),
        ObservableSpec::GradientSquare => Box::new(GradientSum { sine: false }),
    }
}

fn verify(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let system = cfg.system()?;
    let traj = cfg.trajectory();
    let e = &cfg.experiment;
    let mut reports: Vec<InequalityReport> = Vec::new();
    for check in &e.checks {
        match check {
            Check::BrascampLieb => {
                for &o in &e.observables {
                    let mut r = brascamp_lieb_check(&system, observable(o, &system).as_ref(), &traj)?;
                    r.id = format!("brascamp-lieb {}", o.name());
                    reports.push(r);
                }
            }
            Check::SpectralGap => {
                for &o in &e.observables {
                    let mut r = spectral_gap_check(&system, observable(o, &system).as_ref(), &traj, None)?.report;
                    r.id = format!("spectral-gap {}", o.name());
                    reports.push(r);
                }
            }
            Check::ExpMoment => {
                let mut psi = vec![0.0; system.num_vertices()];
                psi[system.domain.locate(&vec![0; system.dim()]).expect("origin is a vertex")] = 1.0;
                reports.extend(exp_moment_check(&system, &psi, &e.ts, &traj)?);
            }
            Check::MultiscalePoincare => {
                let c = fit_multiscale_constant(e.level, system.dim())?;
                let n = Cube::triadic(e.level, system.dim())?.num_vertices();
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                for k in 0..e.draws {
                    let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                    let mut r = multiscale_poincare_check(&u, e.level, system.dim(), c)?;
                    r.id = format!("{} draw={k}", r.id);
                    reports.push(r);
                }
            }
        }
    }
    if system.potential.is_quadratic() && system.boundary == Boundary::Dirichlet {
        let mut c = vec![0.0; system.num_vertices()];
        c[system.domain.locate(&vec![0; system.dim()]).expect("origin is a vertex")] = 1.0;
        for mut r in gaussian_linear_checks(&system, &c, &e.ts)? {
            r.id = format!("oracle {}", r.id);
            reports.push(r);
        }
    }
    let mut flags = Vec::new();
    for r in &reports {
        match r.verdict {
            Verdict::Inconclusive => flags.push(format!("{}: inconclusive", r.id)),
            Verdict::Fail => flags.push(format!("{}: violated beyond 4 standard errors", r.id)),
            Verdict::Pass => {}
        }
        if r.flagged {
            flags.push(format!("{}: unreliable estimate", r.id));
        }
    }
    let rows = reports
        .iter()
        .map(|r| {
            vec![
                r.id.clone(),
                f(r.lhs.value),
                f(r.lhs.stderr),
                f(r.rhs.value),
                f(r.rhs.stderr),
                f(r.margin),
                f(r.margin_stderr),
                format!("{:?}", r.verdict).to_lowercase(),
                r.flagged.to_string(),
            ]
        })
        .collect();
    Ok(Outcome {
        table: "inequalities.csv".into(),
        header: vec!["id", "lhs", "lhs_stderr", "rhs", "rhs_stderr", "margin", "margin_stderr", "verdict", "flagged"],
        rows,
        result: json!(reports),
        flags,
    })
}

fn subadditivity(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let system = cfg.system()?;
    let e = &cfg.experiment;
    let opts = CubeOptions {
        dt: cfg.sampler.dt,
        burn_in_factor: cfg.sampler.burn_in,
        chains: e.chains,
        launches_per_chain: e.launches,
        spacing: e.spacing,
        decay_tolerance: e.decay_tolerance,
        seed: cfg.seed,
        ..CubeOptions::default()
    };
    let records = subadditivity_defect(&system, e.top, &opts)?;
    let d = system.dim();
    let mut rows = Vec::new();
    let mut flags = Vec::new();
    for r in &records {
        let c = &r.coefficients;
        for i in 0..d {
            for j in 0..d {
                let k = i * d + j;
                rows.push(vec![
                    r.scale.to_string(),
                    c.side.to_string(),
                    i.to_string(),
                    j.to_string(),
                    f(c.ahom.value[k]),
                    f(c.ahom.stderr[k]),
                    f(c.astar.value[k]),
                    f(c.astar.stderr[k]),
                    opt(r.defect.map(|t| t.value)),
                    opt(r.defect.map(|t| t.stderr)),
                ]);
            }
        }
        if r.inconclusive {
            flags.push(format!("defect at scale {} is within its error", r.scale));
        }
        if c.ill_conditioned {
            flags.push(format!("coefficients at scale {} are ill conditioned", r.scale));
        }
    }
    Ok(Outcome {
        table: "subadditivity.csv".into(),
        header: vec!["m", "side", "i", "j", "ahom", "ahom_stderr", "astar", "astar_stderr", "tau", "tau_stderr"],
        rows,
        result: json!(records),
        flags,
    })
}

fn clt(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let system = cfg.system()?;
    let d = system.dim();
    let ahom = match (&cfg.experiment.ahom, system.potential) {
        (Some(a), _) => a.clone(),
        (None, Potential::Quadratic { c }) => gaussian_limit(d, c, system.convention),
        (None, _) => return Err(CliError::Config("experiment.ahom is required for non-quadratic potentials".into())),
    };
    let opts = CltOptions { samples: cfg.sampler.samples, trajectory: cfg.trajectory(), seed: cfg.seed, ..CltOptions::default() };
    let reports = clt_check(&system, &cfg.experiment.radii, cfg.experiment.field, &ahom, &opts)?;
    let rows = reports
        .iter()
        .map(|r| {
            vec![
                r.radius.to_string(),
                format!("{:?}", r.field).to_lowercase(),
                r.samples.to_string(),
                f(r.variance.value),
                f(r.variance.stderr),
                f(r.prediction),
                f(r.skewness),
                f(r.kurtosis),
            ]
        })
        .collect();
    Ok(Outcome {
        table: "clt.csv".into(),
        header: vec!["radius", "field", "samples", "variance", "variance_stderr", "prediction", "skewness", "kurtosis"],
        rows,
        result: json!(reports),
        flags: vec![],
    })
}

fn decay(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let l = cfg.lattice.half_side;
    let d = cfg.lattice.dim;
    let cube = Cube::centered(l, d)?;
    let edges = cube.edges().edges;
    let origin = cube.index(&vec![0; d]).expect("origin is a vertex");
    let initial_flux: Vec<f64> = edges.iter().map(|e| if e.tail == origin { 1.0 } else { 0.0 }).collect();
    let e = &cfg.experiment;
    let conductance = if e.random_conductance {
        ConductanceModel::RandomUniform { lo: e.conductance[0], hi: e.conductance[1], seed: cfg.seed }
    } else {
        ConductanceModel::Constant { value: cfg.potential.lambda() }
    };
    let problem = DecayProblem {
        half_side: l,
        dim: d,
        initial_flux,
        source: None,
        conductance,
        horizon: e.horizon_factor * (l * l) as f64,
        dt: cfg.sampler.dt,
        record_every: cfg.sampler.stride as usize,
    };
    let r = decay_envelope_check(&problem)?;
    let rows = r.times.iter().zip(&r.norms_sq).map(|(t, n)| vec![f(*t), f(*n)]).collect();
    let flags = if r.passed { vec![] } else { vec!["no finite envelope constant fits the decay".to_string()] };
    Ok(Outcome {
        table: "decay.csv".into(),
        header: vec!["time", "norm_sq"],
        rows,
        result: json!({ "fitted_c": r.fitted_c, "fitted_c_without_prefactor": r.fitted_c_without_prefactor, "tail_rate": r.tail_rate, "passed": r.passed }),
        flags,
    })
}

/// Dry-run cost estimate.
#[derive(Debug, serde::Serialize)]
pub struct Plan {
    pub kind: &'static str,
    /// Edge evaluations per Langevin step, `d·(2L)^d`.
    pub per_step_cost: u64,
    pub burn_in_steps: u64,
    /// Production steps after burn-in.
    pub steps: u64,
    pub memory_bytes: u64,
    pub disk_bytes: u64,
}

pub fn plan(cfg: &ExperimentConfig) -> Plan {
    let d = cfg.lattice.dim as u32;
    let l = cfg.lattice.half_side as u64;
    let per_step_cost = d as u64 * (2 * l).pow(d);
    let vertices = (2 * l + 1).pow(d);
    let burn = (burn_in_time(cfg.sampler.burn_in, cfg.lattice.half_side) / cfg.sampler.dt).ceil() as u64;
    let sampling = cfg.sampler.samples as u64 * cfg.sampler.stride;
    let e = &cfg.experiment;
    let per_check = (e.checks.len() * e.observables.len().max(1)) as u64;
    let (burn_in_steps, steps, rows) = match cfg.kind {
        Kind::Sample | Kind::SurfaceTension | Kind::Hessian => (burn, sampling, cfg.sampler.samples as u64),
        Kind::Clt if cfg.potential.is_quadratic() => (0, 0, e.radii.len() as u64),
        Kind::Clt => (burn, sampling, e.radii.len() as u64),
        Kind::Verify => (per_check * burn, per_check * sampling, per_check + e.draws as u64),
        Kind::Diffusivity => (e.environments as u64 * burn, e.environments as u64 * (e.horizon / cfg.sampler.dt) as u64, (d * d) as u64),
        Kind::Couple => (0, 2 * e.runs as u64 * (burn_in_time(e.horizon_factor, cfg.lattice.half_side) / cfg.sampler.dt) as u64, e.s_grid.len() as u64),
        Kind::Subadditivity => (e.chains as u64 * burn, e.chains as u64 * e.launches as u64 * (e.spacing / cfg.sampler.dt) as u64, (e.top as u64 + 1) * (d * d) as u64),
        Kind::Decay => (0, (e.horizon_factor * (l * l) as f64 / cfg.sampler.dt) as u64, (e.horizon_factor * (l * l) as f64 / cfg.sampler.dt) as u64 / cfg.sampler.stride),
    };
    Plan { kind: cfg.kind.name(), per_step_cost, burn_in_steps, steps, memory_bytes: 8 * vertices * 8 + 8 * per_step_cost, disk_bytes: 96 * rows + 4096 }
}
