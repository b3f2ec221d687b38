//! Experiment configuration: one TOML file per experiment, with `key=value` overrides.

use std::path::{Path, PathBuf};

use gradphi::dynamics::{Boundary, Scheme, System, TrajectoryConfig};
use gradphi::lattice::Convention;
use gradphi::observables::TestField;
use gradphi::potential::Potential;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Sample,
    SurfaceTension,
    Hessian,
    Diffusivity,
    Couple,
    Verify,
    Subadditivity,
    Clt,
    Decay,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Sample => "sample",
            Kind::SurfaceTension => "surface-tension",
            Kind::Hessian => "hessian",
            Kind::Diffusivity => "diffusivity",
            Kind::Couple => "couple",
            Kind::Verify => "verify",
            Kind::Subadditivity => "subadditivity",
            Kind::Clt => "clt",
            Kind::Decay => "decay",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub dim: usize,
    pub half_side: i64,
    #[serde(default = "default_boundary")]
    pub boundary: Boundary,
    #[serde(default)]
    pub convention: Convention,
}

fn default_boundary() -> Boundary {
    Boundary::Dirichlet
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSpec {
    pub dt: f64,
    pub scheme: Scheme,
    /// `A` in the burn-in time `A·L²·log L`.
    pub burn_in: f64,
    pub samples: usize,
    pub stride: u64,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self { dt: 0.02, scheme: Scheme::LeimkuhlerMatthews, burn_in: 4.0, samples: 1000, stride: 10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoupleMode {
    DirichletPeriodic,
    Tilts,
    Contraction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    BrascampLieb,
    ExpMoment,
    SpectralGap,
    MultiscalePoincare,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservableSpec {
    /// `φ(0)`.
    Point,
    /// `Σ_x φ(x)`.
    Sum,
    GradientSine,
    GradientSquare,
}

impl ObservableSpec {
    pub fn name(self) -> &'static str {
        match self {
            ObservableSpec::Point => "point",
            ObservableSpec::Sum => "sum",
            ObservableSpec::GradientSine => "gradient-sine",
            ObservableSpec::GradientSquare => "gradient-square",
        }
    }
}

/// Settings that only some kinds read; unused ones are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    /// Gauss–Legendre nodes for `σ` differences.
    pub nodes: usize,
    /// `h` for the differencing cross-check of the Hessian.
    pub difference_step: Option<f64>,
    pub environments: usize,
    pub walks: usize,
    pub horizon: f64,
    pub mode: CoupleMode,
    pub runs: usize,
    pub horizon_factor: f64,
    pub s_grid: Vec<f64>,
    pub ks: Vec<i64>,
    pub second_tilt: Option<Vec<f64>>,
    pub second_potential: Option<Potential>,
    pub second_half_side: Option<i64>,
    pub window_start: Option<f64>,
    pub checks: Vec<Check>,
    pub observables: Vec<ObservableSpec>,
    pub ts: Vec<f64>,
    pub level: u32,
    pub draws: usize,
    pub top: usize,
    pub chains: usize,
    pub launches: usize,
    pub spacing: f64,
    pub decay_tolerance: f64,
    pub radii: Vec<i64>,
    pub field: TestField,
    pub ahom: Option<Vec<f64>>,
    pub random_conductance: bool,
    pub conductance: [f64; 2],
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            nodes: 4,
            difference_step: None,
            environments: 16,
            walks: 256,
            horizon: 100.0,
            mode: CoupleMode::DirichletPeriodic,
            runs: 16,
            horizon_factor: 1.0,
            s_grid: vec![0.25, 0.5, 1.0, 1.5, 2.0, 3.0],
            ks: vec![2, 4],
            second_tilt: None,
            second_potential: None,
            second_half_side: None,
            window_start: None,
            checks: vec![Check::BrascampLieb],
            observables: vec![ObservableSpec::Point, ObservableSpec::Sum],
            ts: vec![-0.5, 0.5],
            level: 3,
            draws: 100,
            top: 2,
            chains: 8,
            launches: 4,
            spacing: 20.0,
            decay_tolerance: 1e-3,
            radii: vec![4, 8],
            field: TestField::Bump,
            ahom: None,
            random_conductance: false,
            conductance: [0.5, 2.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Where results go; not part of the recorded config or its hash.
    #[serde(default, skip_serializing)]
    pub output: Option<PathBuf>,
    pub lattice: LatticeSpec,
    pub potential: Potential,
    #[serde(default)]
    pub tilt: Option<Vec<f64>>,
    #[serde(default)]
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub experiment: ExperimentSpec,
}

fn default_seed() -> u64 {
    1
}

fn default_workers() -> usize {
    1
}

/// Parse an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| CliError::Config(format!("override `{spec}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| CliError::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn tilt(&self) -> Vec<f64> {
        self.tilt.clone().unwrap_or_else(|| vec![0.0; self.lattice.dim])
    }

    pub fn system(&self) -> Result<System, CliError> {
        System::new(self.lattice.boundary, self.lattice.half_side, self.lattice.dim, self.potential, self.tilt(), self.lattice.convention)
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn trajectory(&self) -> TrajectoryConfig {
        TrajectoryConfig {
            dt: self.sampler.dt,
            scheme: self.sampler.scheme,
            burn_in_factor: self.sampler.burn_in,
            stride: self.sampler.stride,
            samples: self.sampler.samples,
            seed: self.seed,
        }
    }

    fn needs_samples(&self) -> bool {
        matches!(self.kind, Kind::Sample | Kind::SurfaceTension | Kind::Hessian | Kind::Clt)
            || (self.kind == Kind::Verify && self.experiment.checks.iter().any(|c| *c != Check::MultiscalePoincare))
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.workers == 0 {
            return bad("workers must be >= 1".into());
        }
        if let Some(t) = &self.tilt {
            if t.len() != self.lattice.dim {
                return bad(format!("tilt has {} entries for dimension {}", t.len(), self.lattice.dim));
            }
        }
        if self.needs_samples() && self.sampler.samples == 0 {
            return bad(format!("kind {} needs samples > 0", self.kind.name()));
        }
        if self.kind == Kind::Verify && self.experiment.checks.is_empty() {
            return bad("verify needs at least one check".into());
        }
        if self.kind == Kind::Verify && self.experiment.checks.contains(&Check::MultiscalePoincare) && self.experiment.draws == 0 {
            return bad("multiscale-poincare needs draws > 0".into());
        }
        if self.sampler.stride == 0 {
            return bad("sampler.stride must be >= 1".into());
        }
        if !(self.sampler.dt > 0.0) {
            return bad("sampler.dt must be positive".into());
        }
        let system = self.system()?;
        if self.sampler.dt > system.stability_bound() {
            return bad(format!("sampler.dt = {} exceeds the stability bound {}", self.sampler.dt, system.stability_bound()));
        }
        match self.kind {
            Kind::Diffusivity | Kind::Subadditivity | Kind::Clt if self.lattice.boundary != Boundary::Periodic => {
                bad(format!("kind {} needs boundary = \"periodic\"", self.kind.name()))
            }
            Kind::Couple if self.experiment.mode != CoupleMode::Contraction && self.experiment.runs == 0 => bad("experiment.runs must be > 0".into()),
            Kind::Clt if self.experiment.radii.is_empty() => bad("experiment.radii is empty".into()),
            Kind::Diffusivity if self.experiment.environments == 0 || self.experiment.walks == 0 => {
                bad("experiment.environments and experiment.walks must be > 0".into())
            }
            _ => Ok(()),
        }
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Output directory: the configured one, else `$GRADPHI_OUTPUT/<kind>-<hash>`, else `gradphi-out/<kind>-<hash>`.
    pub fn output_dir(&self) -> PathBuf {
        if let Some(p) = &self.output {
            return p.clone();
        }
        let root = std::env::var_os(crate::OUTPUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("gradphi-out"));
        root.join(format!("{}-{}", self.kind.name(), &self.hash()[..12]))
    }
}
