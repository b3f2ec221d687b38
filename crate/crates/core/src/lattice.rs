//! Cubes, tori, directed nearest-neighbour edges and the discrete gradient and
//! its adjoint.
//!
//! Every edge is stored with its lexicographic orientation: `head = tail + e_dir`.
//! For an edge field `g` the adjoint of the gradient is
//! `∇*g(x) = Σ_i [g(x - e_i, x) - g(x, x + e_i)]`, so that `∇*∇ = -Δ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a cube was constructed. Only affects bookkeeping such as the normalized volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CubeKind {
    /// `[-L, L]^d`.
    Centered,
    /// `[0, L]^d`.
    Cornered,
    /// `[-3^m, 3^m]^d`.
    Triadic { level: u32 },
}

/// A closed axis-parallel cube `lower + [0, side]^d` of `Z^d`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cube {
    dim: usize,
    lower: Vec<i64>,
    side: i64,
    kind: CubeKind,
}

/// A directed nearest-neighbour edge, given by vertex indices of its owner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectedEdge {
    pub tail: usize,
    pub head: usize,
    /// Coordinate direction `i` with `head = tail + e_i`.
    pub dir: usize,
}

/// `E(Q)`: edges of a cube with at least one interior endpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeSet {
    pub edges: Vec<DirectedEdge>,
    /// Positions in `edges` of `∂E(Q)`, the edges with exactly one boundary endpoint.
    pub boundary: Vec<usize>,
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 || dim > 8 {
        return Err(Error::InvalidParameter(format!("dimension must be in 1..=8, got {dim}")));
    }
    Ok(())
}

impl Cube {
    /// `Q_L = [-L, L]^d`.
    pub fn centered(half_side: i64, dim: usize) -> Result<Self> {
        check_dim(dim)?;
        if half_side < 1 {
            return Err(Error::InvalidParameter(format!("half side must be >= 1, got {half_side}")));
        }
        Ok(Self { dim, lower: vec![-half_side; dim], side: 2 * half_side, kind: CubeKind::Centered })
    }

    /// `[0, L]^d`.
    pub fn cornered(side: i64, dim: usize) -> Result<Self> {
        check_dim(dim)?;
        if side < 2 {
            return Err(Error::InvalidParameter(format!("side must be >= 2, got {side}")));
        }
        Ok(Self { dim, lower: vec![0; dim], side, kind: CubeKind::Cornered })
    }

    /// `□_m = [-3^m, 3^m]^d`.
    pub fn triadic(level: u32, dim: usize) -> Result<Self> {
        check_dim(dim)?;
        if level > 12 {
            return Err(Error::InvalidParameter(format!("triadic level {level} is too large")));
        }
        let h = 3i64.pow(level);
        Ok(Self { dim, lower: vec![-h; dim], side: 2 * h, kind: CubeKind::Triadic { level } })
    }

    /// Shift by `z`.
    pub fn translate(&self, z: &[i64]) -> Result<Self> {
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: z.len() });
        }
        let lower = self.lower.iter().zip(z).map(|(a, b)| a + b).collect();
        Ok(Self { dim: self.dim, lower, side: self.side, kind: self.kind })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self) -> &[i64] {
        &self.lower
    }

    /// Number of unit steps along each axis.
    pub fn side(&self) -> i64 {
        self.side
    }

    pub fn kind(&self) -> CubeKind {
        self.kind
    }

    /// Vertices per axis.
    pub fn width(&self) -> usize {
        (self.side + 1) as usize
    }

    /// `|Q|`, the number of vertices.
    pub fn num_vertices(&self) -> usize {
        self.width().pow(self.dim as u32)
    }

    /// Edge-normalized volume `side * (side - 1)^(d-1)`, the number of edges of
    /// `E(Q)` in each coordinate direction.
    pub fn edge_volume(&self) -> usize {
        let s = self.side as usize;
        s * (s - 1).pow(self.dim as u32 - 1)
    }

    pub fn contains(&self, x: &[i64]) -> bool {
        x.len() == self.dim && x.iter().zip(&self.lower).all(|(&c, &l)| c >= l && c <= l + self.side)
    }

    /// Canonical index, first coordinate fastest.
    pub fn index(&self, x: &[i64]) -> Option<usize> {
        if !self.contains(x) {
            return None;
        }
        let w = self.width();
        let mut idx = 0usize;
        for k in (0..self.dim).rev() {
            idx = idx * w + (x[k] - self.lower[k]) as usize;
        }
        Some(idx)
    }

    pub fn coords(&self, mut idx: usize) -> Vec<i64> {
        let w = self.width();
        let mut x = Vec::with_capacity(self.dim);
        for k in 0..self.dim {
            x.push(self.lower[k] + (idx % w) as i64);
            idx /= w;
        }
        x
    }

    fn local(&self, idx: usize, k: usize) -> i64 {
        ((idx / self.width().pow(k as u32)) % self.width()) as i64
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        (0..self.dim).any(|k| {
            let c = self.local(idx, k);
            c == 0 || c == self.side
        })
    }

    /// Indices of `Q°`.
    pub fn interior(&self) -> Vec<usize> {
        (0..self.num_vertices()).filter(|&i| !self.is_boundary(i)).collect()
    }

    /// Indices of `∂Q`.
    pub fn boundary(&self) -> Vec<usize> {
        (0..self.num_vertices()).filter(|&i| self.is_boundary(i)).collect()
    }

    /// `E(Q)` together with `∂E(Q)`.
    pub fn edges(&self) -> EdgeSet {
        let mut edges = Vec::new();
        let mut boundary = Vec::new();
        let w = self.width();
        for tail in 0..self.num_vertices() {
            for dir in 0..self.dim {
                if self.local(tail, dir) == self.side {
                    continue;
                }
                let head = tail + w.pow(dir as u32);
                let (bt, bh) = (self.is_boundary(tail), self.is_boundary(head));
                if bt && bh {
                    continue;
                }
                if bt || bh {
                    boundary.push(edges.len());
                }
                edges.push(DirectedEdge { tail, head, dir });
            }
        }
        EdgeSet { edges, boundary }
    }

    /// Partition into translated copies of `□_n` with centers on `2·3^n Z^d`,
    /// sharing boundary faces. Requires a triadic cube of level `m >= n`.
    pub fn triadic_children(&self, n: u32) -> Result<Vec<Cube>> {
        let m = match self.kind {
            CubeKind::Triadic { level } => level,
            _ => return Err(Error::InvalidParameter("triadic partition needs a triadic cube".into())),
        };
        if n > m {
            return Err(Error::InvalidParameter(format!("sub-level {n} exceeds level {m}")));
        }
        let child = Cube::triadic(n, self.dim)?;
        let per_axis = 3i64.pow(m - n);
        let step = 2 * 3i64.pow(n);
        let total = (per_axis as usize).pow(self.dim as u32);
        let mut out = Vec::with_capacity(total);
        for k in 0..total {
            let mut r = k;
            let mut shift = Vec::with_capacity(self.dim);
            for a in 0..self.dim {
                let j = (r % per_axis as usize) as i64;
                r /= per_axis as usize;
                // child lower corner must land at self.lower + j*step
                shift.push(self.lower[a] + j * step - child.lower[a]);
            }
            out.push(child.translate(&shift)?);
        }
        Ok(out)
    }
}

/// The torus `T_L = Z^d / (2L Z)^d` with representatives in `[-L, L)^d`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Torus {
    dim: usize,
    half_side: i64,
}

impl Torus {
    pub fn new(half_side: i64, dim: usize) -> Result<Self> {
        check_dim(dim)?;
        if half_side < 1 {
            return Err(Error::InvalidParameter(format!("half side must be >= 1, got {half_side}")));
        }
        Ok(Self { dim, half_side })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_side(&self) -> i64 {
        self.half_side
    }

    /// Vertices per axis, `2L`.
    pub fn width(&self) -> usize {
        (2 * self.half_side) as usize
    }

    pub fn num_vertices(&self) -> usize {
        self.width().pow(self.dim as u32)
    }

    /// Index of a point of `Z^d`, reduced modulo `2L`.
    pub fn index(&self, x: &[i64]) -> usize {
        let w = self.width() as i64;
        let mut idx = 0usize;
        for k in (0..self.dim).rev() {
            idx = idx * w as usize + (x[k] + self.half_side).rem_euclid(w) as usize;
        }
        idx
    }

    pub fn coords(&self, mut idx: usize) -> Vec<i64> {
        let w = self.width();
        let mut x = Vec::with_capacity(self.dim);
        for _ in 0..self.dim {
            x.push((idx % w) as i64 - self.half_side);
            idx /= w;
        }
        x
    }

    /// The pinned vertex `x0 = (-L, ..., -L)`, which has index 0.
    pub fn pinned(&self) -> usize {
        0
    }

    /// All `d·(2L)^d` edges, each vertex paired with its successor in every direction.
    pub fn edges(&self) -> Vec<DirectedEdge> {
        let w = self.width();
        let mut out = Vec::with_capacity(self.num_vertices() * self.dim);
        for tail in 0..self.num_vertices() {
            for dir in 0..self.dim {
                let stride = w.pow(dir as u32);
                let c = (tail / stride) % w;
                let head = if c + 1 == w { tail - c * stride } else { tail + stride };
                out.push(DirectedEdge { tail, head, dir });
            }
        }
        out
    }

    /// Map each vertex of `cube` to its torus index. Fails if the cube wraps onto itself.
    pub fn embed(&self, cube: &Cube) -> Result<Vec<usize>> {
        if cube.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: cube.dim() });
        }
        if cube.width() > self.width() {
            return Err(Error::InvalidParameter(format!(
                "cube of width {} does not fit in torus of width {}",
                cube.width(),
                self.width()
            )));
        }
        Ok((0..cube.num_vertices()).map(|i| self.index(&cube.coords(i))).collect())
    }
}

/// A graph of directed edges over indexed vertices, some of which carry
/// degrees of freedom (`active`) while the rest are held fixed.
#[derive(Clone, Debug)]
pub struct LatticeGraph {
    pub dim: usize,
    pub num_vertices: usize,
    pub edges: Vec<DirectedEdge>,
    pub active: Vec<bool>,
    /// For each vertex, incident edge positions.
    pub incident: Vec<Vec<usize>>,
}

impl LatticeGraph {
    pub fn new(dim: usize, num_vertices: usize, edges: Vec<DirectedEdge>, active: Vec<bool>) -> Self {
        let mut incident = vec![Vec::new(); num_vertices];
        for (k, e) in edges.iter().enumerate() {
            incident[e.tail].push(k);
            incident[e.head].push(k);
        }
        Self { dim, num_vertices, edges, active, incident }
    }

    /// `E(Q)` with the interior active: the Dirichlet problem on `Q`.
    pub fn dirichlet(cube: &Cube) -> Self {
        let active = (0..cube.num_vertices()).map(|i| !cube.is_boundary(i)).collect();
        Self::new(cube.dim(), cube.num_vertices(), cube.edges().edges, active)
    }

    /// Edges of `Q°` only, interior active: the zero-flux problem on `Q°`.
    pub fn neumann(cube: &Cube) -> Self {
        let active: Vec<bool> = (0..cube.num_vertices()).map(|i| !cube.is_boundary(i)).collect();
        let edges =
            cube.edges().edges.into_iter().filter(|e| active[e.tail] && active[e.head]).collect();
        Self::new(cube.dim(), cube.num_vertices(), edges, active)
    }

    /// All torus edges, every vertex active.
    pub fn periodic(torus: &Torus) -> Self {
        Self::new(torus.dim(), torus.num_vertices(), torus.edges(), vec![true; torus.num_vertices()])
    }

    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// `∇φ(e) = φ(head) - φ(tail)`.
    pub fn gradient(&self, phi: &[f64]) -> Vec<f64> {
        self.edges.iter().map(|e| phi[e.head] - phi[e.tail]).collect()
    }

    /// `∇*g` at every vertex, including inactive ones.
    pub fn div_star(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_vertices];
        for (e, &v) in self.edges.iter().zip(g) {
            out[e.tail] -= v;
            out[e.head] += v;
        }
        out
    }

    /// `out = ∇*(a ∇w)` on active vertices, zero elsewhere.
    pub fn apply_operator(&self, a: &[f64], w: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (e, &c) in self.edges.iter().zip(a) {
            let flux = c * (w[e.head] - w[e.tail]);
            out[e.tail] -= flux;
            out[e.head] += flux;
        }
        for (o, &act) in out.iter_mut().zip(&self.active) {
            if !act {
                *o = 0.0;
            }
        }
    }

    /// Edge weights for the pair-sum Hamiltonian under `convention`, on a graph
    /// built by [`LatticeGraph::dirichlet`] or [`LatticeGraph::periodic`].
    pub fn hamiltonian_weights(&self, convention: Convention) -> Vec<f64> {
        self.edges
            .iter()
            .map(|e| {
                let n = self.active[e.tail] as u8 + self.active[e.head] as u8;
                match convention {
                    Convention::Paired => n as f64,
                    Convention::Single => (n > 0) as u8 as f64,
                }
            })
            .collect()
    }
}

/// How often an edge enters the Hamiltonian.
///
/// `Paired` sums `V` over ordered pairs `(x, y)` with `x` interior, so an edge
/// with two interior endpoints counts twice. `Single` counts every edge once,
/// which is the measure left invariant by the drift `Σ_y V'(φ(y) - φ(x))`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    #[default]
    Paired,
    Single,
}

impl std::str::FromStr for Convention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(Self::Paired),
            "single" => Ok(Self::Single),
            _ => Err(Error::InvalidParameter(format!("unknown convention `{s}`"))),
        }
    }
}
