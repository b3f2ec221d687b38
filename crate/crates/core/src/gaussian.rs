//! Exact formulas for quadratic potentials: dense linear algebra for the
//! Gaussian finite-volume measures and an FFT sampler for the periodic one.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::dynamics::{fill_normal, Boundary, System};
use crate::error::{Error, Result};
use crate::potential::Potential;

/// The Gaussian measure `exp(-H)` of a quadratic system, in closed form.
///
/// With `D` the incidence matrix restricted to the free vertices, `W` the edge
/// weights and `E` the edge-direction indicator, `H = (c/2)|W^{1/2}(Dφ - Eξ)|²`,
/// so the precision is `A = c DᵀWD` and the mean is `A⁻¹ c DᵀWEξ`.
pub struct DenseGaussian {
    c: f64,
    dim: usize,
    volume: f64,
    /// Vertex index of each free coordinate.
    free: Vec<usize>,
    /// Position of each vertex among the free coordinates.
    slot: Vec<Option<usize>>,
    chol: Cholesky<f64, Dyn>,
    /// `c DᵀWE`, one column per direction.
    b: DMatrix<f64>,
    /// Diagonal of `EᵀWE`.
    ewe: Vec<f64>,
    tilt: Vec<f64>,
}

impl DenseGaussian {
    pub fn new(system: &System) -> Result<Self> {
        let c = match system.potential {
            Potential::Quadratic { c } => c,
            _ => return Err(Error::InvalidParameter("the Gaussian oracle needs a quadratic potential".into())),
        };
        let n_v = system.num_vertices();
        let free: Vec<usize> = match system.boundary {
            Boundary::Dirichlet => (0..n_v).filter(|&x| system.graph.active[x]).collect(),
            Boundary::Periodic => (1..n_v).collect(),
        };
        if free.len() > 20_000 {
            return Err(Error::InvalidParameter(format!("{} free vertices is too many for a dense solve", free.len())));
        }
        let mut slot = vec![None; n_v];
        for (k, &x) in free.iter().enumerate() {
            slot[x] = Some(k);
        }
        let n = free.len();
        let d = system.dim();
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut b = DMatrix::<f64>::zeros(n, d);
        let mut ewe = vec![0.0; d];
        for (k, e) in system.graph.edges.iter().enumerate() {
            let w = system.weights[k];
            ewe[e.dir] += w;
            let (t, h) = (slot[e.tail], slot[e.head]);
            // row of D for this edge: +1 at head, -1 at tail
            if let Some(i) = h {
                a[(i, i)] += c * w;
                b[(i, e.dir)] += c * w;
            }
            if let Some(i) = t {
                a[(i, i)] += c * w;
                b[(i, e.dir)] -= c * w;
            }
            if let (Some(i), Some(j)) = (h, t) {
                a[(i, j)] -= c * w;
                a[(j, i)] -= c * w;
            }
        }
        let chol = Cholesky::new(a).ok_or(Error::NotPositiveDefinite)?;
        Ok(Self { c, dim: d, volume: system.volume(), free, slot, chol, b, ewe, tilt: system.tilt.clone() })
    }

    pub fn num_free(&self) -> usize {
        self.free.len()
    }

    /// Mean field `⟨φ⟩` on all vertices.
    pub fn mean(&self) -> Vec<f64> {
        let xi = DVector::from_column_slice(&self.tilt);
        let m = self.chol.solve(&(&self.b * xi));
        let mut out = vec![0.0; self.slot.len()];
        for (k, &x) in self.free.iter().enumerate() {
            out[x] = m[k];
        }
        out
    }

    /// `Cov(φ(x), φ(y))`.
    pub fn covariance(&self, x: usize, y: usize) -> f64 {
        match (self.slot[x], self.slot[y]) {
            (Some(i), Some(j)) => {
                let mut e = DVector::zeros(self.free.len());
                e[j] = 1.0;
                self.chol.solve(&e)[i]
            }
            _ => 0.0,
        }
    }

    /// `Var(Σ_x c_x φ(x))` for a coefficient vector over all vertices.
    pub fn linear_variance(&self, coeffs: &[f64]) -> f64 {
        let v = self.restrict(coeffs);
        v.dot(&self.chol.solve(&v))
    }

    /// `⟨Σ_x c_x φ(x)⟩`.
    pub fn linear_mean(&self, coeffs: &[f64]) -> f64 {
        self.mean().iter().zip(coeffs).map(|(m, c)| m * c).sum()
    }

    fn restrict(&self, coeffs: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.free.len(), self.free.iter().map(|&x| coeffs[x]))
    }

    /// `σ_L(ξ) = -(1/|Q|) log(Z_ξ / Z_0)` at the system tilt.
    pub fn sigma(&self) -> f64 {
        let xi = DVector::from_column_slice(&self.tilt);
        let bx = &self.b * &xi;
        let quad: f64 = (0..self.dim).map(|i| self.ewe[i] * self.tilt[i] * self.tilt[i]).sum();
        (0.5 * self.c * quad - 0.5 * bx.dot(&self.chol.solve(&bx))) / self.volume
    }

    /// `D²σ_L = (1/|Q|)(c EᵀWE - Bᵀ A⁻¹ B)` (independent of ξ), row-major.
    pub fn hessian(&self) -> Vec<f64> {
        let d = self.dim;
        let ainv_b = self.chol.solve(&self.b);
        let btab = self.b.transpose() * ainv_b;
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let diag = if i == j { self.c * self.ewe[i] } else { 0.0 };
                out[i * d + j] = (diag - btab[(i, j)]) / self.volume;
            }
        }
        out
    }

    /// `Dσ_L(ξ) = D²σ_L ξ`.
    pub fn gradient(&self) -> Vec<f64> {
        let h = self.hessian();
        let d = self.dim;
        (0..d).map(|i| (0..d).map(|j| h[i * d + j] * self.tilt[j]).sum()).collect()
    }

    /// The leading term `c (EᵀWE)_{ii} / |Q|` of the Hessian, i.e. `⟨Σ_e w_e V''⟩/|Q|` per direction.
    pub fn diagonal_term(&self) -> Vec<f64> {
        self.ewe.iter().map(|w| self.c * w / self.volume).collect()
    }
}

/// In-place `d`-dimensional FFT on a `width^d` grid, first coordinate fastest.
pub fn fft_nd(data: &mut [Complex64], width: usize, dim: usize, inverse: bool, planner: &mut FftPlanner<f64>) {
    let fft = if inverse { planner.plan_fft_inverse(width) } else { planner.plan_fft_forward(width) };
    let mut line = vec![Complex64::new(0.0, 0.0); width];
    let total = data.len();
    for axis in 0..dim {
        let stride = width.pow(axis as u32);
        for start in 0..total {
            if (start / stride) % width != 0 {
                continue;
            }
            for k in 0..width {
                line[k] = data[start + k * stride];
            }
            fft.process(&mut line);
            for k in 0..width {
                data[start + k * stride] = line[k];
            }
        }
    }
}

/// Exact sampler for the periodic Gaussian measure with uniform edge weight.
pub struct PeriodicGaussianSampler {
    width: usize,
    dim: usize,
    /// `1 / sqrt(precision_k)` per Fourier mode, zero for `k = 0`.
    scale: Vec<f64>,
    planner: FftPlanner<f64>,
    buf: Vec<Complex64>,
    noise: Vec<f64>,
}

impl PeriodicGaussianSampler {
    /// `system` must be periodic with a quadratic potential.
    pub fn new(system: &System) -> Result<Self> {
        let c = match (system.boundary, system.potential) {
            (Boundary::Periodic, Potential::Quadratic { c }) => c,
            _ => return Err(Error::InvalidParameter("FFT sampler needs a periodic quadratic system".into())),
        };
        let w = system.weights[0];
        let width = (2 * system.half_side()) as usize;
        let dim = system.dim();
        let n = width.pow(dim as u32);
        let scale = (0..n)
            .map(|idx| {
                let mut lam = 0.0;
                let mut r = idx;
                for _ in 0..dim {
                    let k = r % width;
                    r /= width;
                    lam += 2.0 * (1.0 - (2.0 * std::f64::consts::PI * k as f64 / width as f64).cos());
                }
                if idx == 0 {
                    0.0
                } else {
                    1.0 / (c * w * lam).sqrt()
                }
            })
            .collect();
        Ok(Self {
            width,
            dim,
            scale,
            planner: FftPlanner::new(),
            buf: vec![Complex64::new(0.0, 0.0); n],
            noise: vec![0.0; n],
        })
    }

    /// Draw a field pinned at the corner; the tilt does not enter the periodic gradient law.
    pub fn sample<R: Rng>(&mut self, rng: &mut R) -> Vec<f64> {
        fill_normal(rng, &mut self.noise);
        for (b, z) in self.buf.iter_mut().zip(&self.noise) {
            *b = Complex64::new(*z, 0.0);
        }
        fft_nd(&mut self.buf, self.width, self.dim, false, &mut self.planner);
        for (b, s) in self.buf.iter_mut().zip(&self.scale) {
            *b *= *s;
        }
        fft_nd(&mut self.buf, self.width, self.dim, true, &mut self.planner);
        let n = self.buf.len() as f64;
        let p = self.buf[0].re;
        self.buf.iter().map(|b| (b.re - p) / n).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Convention;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quad(l: i64, conv: Convention, tilt: Vec<f64>) -> System {
        System::dirichlet(l, 2, Potential::quadratic(1.0).unwrap(), tilt, conv).unwrap()
    }

    #[test]
    fn single_counting_hessian_is_edge_density() {
        // with single counting the mean field is zero and D²σ = N_i / |Q|
        let g = DenseGaussian::new(&quad(4, Convention::Single, vec![0.3, 0.0])).unwrap();
        let h = g.hessian();
        let n_i = (8 * 7) as f64;
        assert!((h[0] - n_i / 81.0).abs() < 1e-12);
        assert!(h[1].abs() < 1e-12);
        assert!(g.mean().iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn paired_hessian_below_leading_term() {
        let g = DenseGaussian::new(&quad(4, Convention::Paired, vec![0.3, 0.0])).unwrap();
        let h = g.hessian();
        let lead = 2.0 * 49.0 / 81.0;
        assert!((g.diagonal_term()[0] - lead).abs() < 1e-12);
        assert!(h[0] < lead && h[0] > 0.9 * lead);
        assert!((h[0] - h[3]).abs() < 1e-12 && h[1].abs() < 1e-12);
    }

    #[test]
    fn sigma_matches_direct_partition_function_ratio() {
        // σ is quadratic in ξ with Hessian D²σ
        let s = quad(3, Convention::Paired, vec![0.4, -0.2]);
        let g = DenseGaussian::new(&s).unwrap();
        let h = g.hessian();
        let xi = [0.4, -0.2];
        let q: f64 = (0..2).map(|i| (0..2).map(|j| xi[i] * h[i * 2 + j] * xi[j]).sum::<f64>()).sum();
        assert!((g.sigma() - 0.5 * q).abs() < 1e-12);
        let gr = g.gradient();
        assert!((gr[0] - (h[0] * 0.4 - h[1] * 0.2)).abs() < 1e-12);
    }

    #[test]
    fn fft_sampler_matches_dense_covariance() {
        let s = System::periodic(3, 2, Potential::quadratic(1.5).unwrap(), vec![0.0, 0.0], Convention::Paired).unwrap();
        let g = DenseGaussian::new(&s).unwrap();
        let mut sampler = PeriodicGaussianSampler::new(&s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = 14;
        let n = 40_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let f = sampler.sample(&mut rng);
            assert_eq!(f[0], 0.0);
            acc += f[x] * f[x];
        }
        let var = acc / n as f64;
        let exact = g.covariance(x, x);
        // variance of a sample variance is 2σ⁴/n
        assert!((var - exact).abs() < 4.0 * exact * (2.0 / n as f64).sqrt(), "{var} vs {exact}");
    }
}
