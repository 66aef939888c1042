//! Smearing kernels, detection efficiency, and discretization of the
//! forward operator into the response matrix.
//!
//! The response matrix entry `K[i][j]` is the double integral of
//! `k(t, s) B_j(s)` over bin `F_i` in `t` and the true space in `s`, with
//! `k(t, s) = k_resp(t | s) eps(s)`. Entries are computed with tensor
//! Gauss-Legendre quadrature, splitting the `s` integral at knot spans and at
//! any kink lines of the kernel, and the `t` integral at bin edges. A
//! node-doubling check guards against quadrature non-convergence.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use thiserror::Error;

use crate::basis::{BasisError, SplineBasis};
use crate::quad::GaussLegendre;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const SQRT_2PI: f64 = 2.506628274631000502;
const SQRT_PI_OVER_2: f64 = 1.253314137315500251;

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error("kernel parameter out of range: {0}")]
    InvalidKernel(String),

    #[error("efficiency must map into [0, 1]")]
    InvalidEfficiency,

    #[error("bin edges must be strictly increasing with at least one bin")]
    InvalidBinning,

    #[error("quadrature did not converge at entry ({row}, {col}): relative change {change:.3e} after node doubling")]
    QuadratureNonConvergence {
        row: usize,
        col: usize,
        change: f64,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("negative coefficient at index {0}")]
    NegativeCoefficient(usize),

    #[error(transparent)]
    Basis(#[from] BasisError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed response matrix file: {0}")]
    MalformedFile(String),
}

/// Conditional density of the observed value given the true value.
#[derive(Debug, Clone)]
pub enum SmearingKernel {
    /// Additive Gaussian noise: `k_resp(t|s) = N(t - s | 0, sigma^2)`.
    Gaussian { sigma: f64 },
    /// Crystal Ball displacement: Gaussian core with a power-law left tail.
    CrystalBall(CrystalBall),
    /// Grid-tabulated density `k_resp(t|s)`, bilinearly interpolated.
    Tabulated(TabulatedKernel),
}

impl SmearingKernel {
    pub fn gaussian(sigma: f64) -> Result<Self, ForwardError> {
        if !(sigma > 0.0) {
            return Err(ForwardError::InvalidKernel(format!("sigma = {sigma}")));
        }
        Ok(SmearingKernel::Gaussian { sigma })
    }

    pub fn crystal_ball(
        delta_m: f64,
        sigma: f64,
        alpha: f64,
        gamma: f64,
    ) -> Result<Self, ForwardError> {
        Ok(SmearingKernel::CrystalBall(CrystalBall::new(
            delta_m, sigma, alpha, gamma,
        )?))
    }

    /// `k_resp(t | s)`.
    pub fn response_density(&self, t: f64, s: f64) -> f64 {
        match self {
            SmearingKernel::Gaussian { sigma } => {
                let z = (t - s) / sigma;
                (-0.5 * z * z).exp() / (sigma * SQRT_2PI)
            }
            SmearingKernel::CrystalBall(cb) => cb.pdf(t - s),
            SmearingKernel::Tabulated(tab) => tab.density(t, s),
        }
    }

    /// Interior points of `(lo, hi)` where `s -> k_resp(t|s)` has a kink.
    fn s_breakpoints(&self, t: f64, lo: f64, hi: f64, out: &mut Vec<f64>) {
        match self {
            SmearingKernel::Gaussian { .. } => {}
            SmearingKernel::CrystalBall(cb) => {
                // junction (t - s - dm)/sigma = -alpha
                let s_kink = t - cb.delta_m + cb.alpha * cb.sigma;
                if lo < s_kink && s_kink < hi {
                    out.push(s_kink);
                }
            }
            SmearingKernel::Tabulated(tab) => {
                for &g in &tab.s_grid {
                    if lo < g && g < hi {
                        out.push(g);
                    }
                }
            }
        }
    }

    /// Interior points of `(t_lo, t_hi)` where `t -> integral of k_resp over
    /// `s` in `[s_lo, s_hi]` loses smoothness (the kink line entering or
    /// leaving the `s` window).
    fn t_breakpoints(&self, s_lo: f64, s_hi: f64, t_lo: f64, t_hi: f64, out: &mut Vec<f64>) {
        match self {
            SmearingKernel::Gaussian { .. } => {}
            SmearingKernel::CrystalBall(cb) => {
                let shift = cb.delta_m - cb.alpha * cb.sigma;
                for c in [s_lo + shift, s_hi + shift] {
                    if t_lo < c && c < t_hi {
                        out.push(c);
                    }
                }
            }
            SmearingKernel::Tabulated(tab) => {
                for &g in &tab.t_grid {
                    if t_lo < g && g < t_hi {
                        out.push(g);
                    }
                }
            }
        }
    }

    /// P(displacement <= d) for the translation-invariant kernels; `None`
    /// for tabulated kernels, which have no displacement distribution.
    pub fn displacement_cdf(&self, d: f64) -> Option<f64> {
        match self {
            SmearingKernel::Gaussian { sigma } => {
                Some(0.5 * (1.0 + erf(d / (sigma * SQRT_2))))
            }
            SmearingKernel::CrystalBall(cb) => Some(cb.cdf(d)),
            SmearingKernel::Tabulated(_) => None,
        }
    }

    /// Draw an observed value for a true value `s`.
    pub fn sample_observed<R: rand::Rng>(&self, s: f64, rng: &mut R) -> f64 {
        match self {
            SmearingKernel::Gaussian { sigma } => {
                use rand_distr::Distribution;
                let n = rand_distr::Normal::new(0.0, *sigma).expect("validated sigma");
                s + n.sample(rng)
            }
            SmearingKernel::CrystalBall(cb) => s + cb.sample(rng),
            SmearingKernel::Tabulated(tab) => tab.sample_observed(s, rng),
        }
    }
}

/// Crystal Ball density in the displacement `x`: a Gaussian with mean
/// `delta_m` and variance `sigma^2` whose left tail, below
/// `(x - delta_m)/sigma = -alpha`, is replaced by a power law with exponent
/// `gamma`. Normalized in closed form (Gaussian part by `erf`, tail part
/// analytically); `gamma > 1` is required for the tail to be integrable.
#[derive(Debug, Clone)]
pub struct CrystalBall {
    pub delta_m: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub gamma: f64,
    norm: f64,
    gauss_mass: f64,
}

impl CrystalBall {
    pub fn new(delta_m: f64, sigma: f64, alpha: f64, gamma: f64) -> Result<Self, ForwardError> {
        if !(sigma > 0.0) {
            return Err(ForwardError::InvalidKernel(format!("sigma = {sigma}")));
        }
        if !(alpha > 0.0) {
            return Err(ForwardError::InvalidKernel(format!("alpha = {alpha}")));
        }
        if !(gamma > 1.0) {
            return Err(ForwardError::InvalidKernel(format!(
                "gamma = {gamma} (must exceed 1 for a normalizable tail)"
            )));
        }
        let gauss_part = SQRT_PI_OVER_2 * (1.0 + erf(alpha / SQRT_2));
        let tail_part = gamma * (-0.5 * alpha * alpha).exp() / (alpha * (gamma - 1.0));
        let norm = 1.0 / (sigma * (gauss_part + tail_part));
        let gauss_mass = norm * sigma * gauss_part;
        Ok(CrystalBall {
            delta_m,
            sigma,
            alpha,
            gamma,
            norm,
            gauss_mass,
        })
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let z = (x - self.delta_m) / self.sigma;
        if z > -self.alpha {
            self.norm * (-0.5 * z * z).exp()
        } else {
            let a = self.alpha;
            let g = self.gamma;
            self.norm * (g / a).powf(g) * (-0.5 * a * a).exp() * (g / a - a - z).powf(-g)
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let z = (x - self.delta_m) / self.sigma;
        let a = self.alpha;
        let g = self.gamma;
        let tail_total = g * (-0.5 * a * a).exp() / (a * (g - 1.0));
        if z <= -a {
            let u = g / a - a - z;
            self.norm
                * self.sigma
                * (g / a).powf(g)
                * (-0.5 * a * a).exp()
                * u.powf(1.0 - g)
                / (g - 1.0)
        } else {
            self.norm
                * self.sigma
                * (tail_total + SQRT_PI_OVER_2 * (erf(z / SQRT_2) + erf(a / SQRT_2)))
        }
    }

    fn sample<R: rand::Rng>(&self, rng: &mut R) -> f64 {
        use rand_distr::Distribution;
        if rng.random::<f64>() < self.gauss_mass {
            // Gaussian core conditioned on z > -alpha; plain rejection is
            // fine since P(z > -alpha) >= 1/2 for alpha > 0.
            let n = rand_distr::StandardNormal;
            loop {
                let z: f64 = n.sample(rng);
                if z > -self.alpha {
                    return self.delta_m + self.sigma * z;
                }
            }
        } else {
            // power-law tail via inverse CDF in u = g/a - a - z >= g/a
            let g = self.gamma;
            let a = self.alpha;
            let v: f64 = rng.random();
            let u = (g / a) * (1.0 - v).powf(-1.0 / (g - 1.0));
            let z = g / a - a - u;
            self.delta_m + self.sigma * z
        }
    }
}

/// Crystal Ball density value; validates parameters on every call.
pub fn crystal_ball_pdf(
    x: f64,
    delta_m: f64,
    sigma: f64,
    alpha: f64,
    gamma: f64,
) -> Result<f64, ForwardError> {
    Ok(CrystalBall::new(delta_m, sigma, alpha, gamma)?.pdf(x))
}

/// Bilinearly interpolated kernel on a rectangular `(t, s)` grid; zero
/// outside the table.
#[derive(Debug, Clone)]
pub struct TabulatedKernel {
    t_grid: Vec<f64>,
    s_grid: Vec<f64>,
    /// values[(it, is)] = k_resp(t_grid[it] | s_grid[is])
    values: DMatrix<f64>,
}

impl TabulatedKernel {
    pub fn new(
        t_grid: Vec<f64>,
        s_grid: Vec<f64>,
        values: DMatrix<f64>,
    ) -> Result<Self, ForwardError> {
        let incr = |g: &[f64]| g.len() >= 2 && g.windows(2).all(|w| w[0] < w[1]);
        if !incr(&t_grid) || !incr(&s_grid) {
            return Err(ForwardError::InvalidKernel(
                "tabulated grids must be strictly increasing with >= 2 points".into(),
            ));
        }
        if values.nrows() != t_grid.len() || values.ncols() != s_grid.len() {
            return Err(ForwardError::DimensionMismatch(format!(
                "table is {}x{}, grids are {}x{}",
                values.nrows(),
                values.ncols(),
                t_grid.len(),
                s_grid.len()
            )));
        }
        if values.iter().any(|&v| !(v >= 0.0)) {
            return Err(ForwardError::InvalidKernel(
                "tabulated kernel values must be non-negative".into(),
            ));
        }
        Ok(TabulatedKernel {
            t_grid,
            s_grid,
            values,
        })
    }

    fn cell(grid: &[f64], x: f64) -> Option<(usize, f64)> {
        if x < grid[0] || x > grid[grid.len() - 1] {
            return None;
        }
        let i = match grid.binary_search_by(|g| g.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(grid.len() - 2),
            Err(i) => i - 1,
        };
        let frac = (x - grid[i]) / (grid[i + 1] - grid[i]);
        Some((i, frac))
    }

    pub fn density(&self, t: f64, s: f64) -> f64 {
        let (Some((it, ft)), Some((is, fs))) =
            (Self::cell(&self.t_grid, t), Self::cell(&self.s_grid, s))
        else {
            return 0.0;
        };
        let v00 = self.values[(it, is)];
        let v01 = self.values[(it, is + 1)];
        let v10 = self.values[(it + 1, is)];
        let v11 = self.values[(it + 1, is + 1)];
        (1.0 - ft) * ((1.0 - fs) * v00 + fs * v01) + ft * ((1.0 - fs) * v10 + fs * v11)
    }

    /// Sample t from the (piecewise linear in t) conditional density at `s`
    /// by inverting the trapezoid CDF cell by cell.
    fn sample_observed<R: rand::Rng>(&self, s: f64, rng: &mut R) -> f64 {
        let dens: Vec<f64> = self.t_grid.iter().map(|&t| self.density(t, s)).collect();
        let masses: Vec<f64> = dens
            .windows(2)
            .zip(self.t_grid.windows(2))
            .map(|(d, t)| 0.5 * (d[0] + d[1]) * (t[1] - t[0]))
            .collect();
        let total: f64 = masses.iter().sum();
        if total <= 0.0 {
            // no mass at this s; fall back to the table midpoint
            return 0.5 * (self.t_grid[0] + self.t_grid[self.t_grid.len() - 1]);
        }
        let mut u = rng.random::<f64>() * total;
        for (i, &m) in masses.iter().enumerate() {
            if u <= m || i == masses.len() - 1 {
                let (t0, t1) = (self.t_grid[i], self.t_grid[i + 1]);
                let (d0, d1) = (dens[i], dens[i + 1]);
                let w = t1 - t0;
                if m <= 0.0 {
                    return 0.5 * (t0 + t1);
                }
                // invert integral of linear density d0 + (d1-d0) x / w on [0, w]
                let frac = u / m;
                let x = if (d1 - d0).abs() < 1e-14 * (d0 + d1).abs() {
                    frac * w
                } else {
                    let a = 0.5 * (d1 - d0) / w;
                    let disc = (d0 * d0 + 4.0 * a * frac * m).max(0.0);
                    (disc.sqrt() - d0) / (2.0 * a)
                };
                return t0 + x.clamp(0.0, w);
            }
            u -= m;
        }
        unreachable!()
    }
}

/// Detection efficiency `eps : E -> [0, 1]`; a value of 1 means every true
/// point is observed.
#[derive(Clone)]
pub enum Efficiency {
    Constant(f64),
    /// Piecewise-linear interpolation on a grid; clamped at the ends.
    Tabulated { grid: Vec<f64>, values: Vec<f64> },
    Analytic(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for Efficiency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Efficiency::Constant(c) => write!(f, "Efficiency::Constant({c})"),
            Efficiency::Tabulated { grid, .. } => {
                write!(f, "Efficiency::Tabulated({} points)", grid.len())
            }
            Efficiency::Analytic(_) => write!(f, "Efficiency::Analytic(..)"),
        }
    }
}

impl Efficiency {
    pub fn constant(c: f64) -> Result<Self, ForwardError> {
        if !(0.0..=1.0).contains(&c) {
            return Err(ForwardError::InvalidEfficiency);
        }
        Ok(Efficiency::Constant(c))
    }

    pub fn tabulated(grid: Vec<f64>, values: Vec<f64>) -> Result<Self, ForwardError> {
        if grid.len() != values.len()
            || grid.len() < 2
            || !grid.windows(2).all(|w| w[0] < w[1])
            || values.iter().any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(ForwardError::InvalidEfficiency);
        }
        Ok(Efficiency::Tabulated { grid, values })
    }

    pub fn at(&self, s: f64) -> f64 {
        match self {
            Efficiency::Constant(c) => *c,
            Efficiency::Tabulated { grid, values } => {
                if s <= grid[0] {
                    return values[0];
                }
                if s >= grid[grid.len() - 1] {
                    return values[values.len() - 1];
                }
                let i = grid.partition_point(|&g| g <= s) - 1;
                let f = (s - grid[i]) / (grid[i + 1] - grid[i]);
                values[i] + f * (values[i + 1] - values[i])
            }
            Efficiency::Analytic(f) => f(s).clamp(0.0, 1.0),
        }
    }

    fn s_breakpoints(&self, lo: f64, hi: f64, out: &mut Vec<f64>) {
        if let Efficiency::Tabulated { grid, .. } = self {
            for &g in grid {
                if lo < g && g < hi {
                    out.push(g);
                }
            }
        }
    }
}

/// Partition of the smeared space into `n` contiguous bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningScheme {
    edges: Vec<f64>,
}

impl BinningScheme {
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self, ForwardError> {
        if n == 0 || !(lo < hi) {
            return Err(ForwardError::InvalidBinning);
        }
        let edges = (0..=n)
            .map(|i| lo + (hi - lo) * i as f64 / n as f64)
            .collect();
        Ok(BinningScheme { edges })
    }

    pub fn from_edges(edges: Vec<f64>) -> Result<Self, ForwardError> {
        if edges.len() < 2 || !edges.windows(2).all(|w| w[0] < w[1]) {
            return Err(ForwardError::InvalidBinning);
        }
        Ok(BinningScheme { edges })
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn range(&self) -> (f64, f64) {
        (self.edges[0], self.edges[self.edges.len() - 1])
    }

    /// Bin index of `t` under half-open bins `[e_i, e_{i+1})`, the last bin
    /// closed; `None` outside the range.
    pub fn find_bin(&self, t: f64) -> Option<usize> {
        let (lo, hi) = self.range();
        if t < lo || t > hi {
            return None;
        }
        if t == hi {
            return Some(self.n_bins() - 1);
        }
        Some(self.edges.partition_point(|&e| e <= t) - 1)
    }
}

/// The kernel of the forward operator as used by response assembly.
pub trait KernelFn {
    fn eval(&self, t: f64, s: f64) -> f64;

    /// Interior points of `(lo, hi)` where `s -> eval(t, s)` is not smooth;
    /// the quadrature splits at these.
    fn s_breakpoints(&self, _t: f64, _lo: f64, _hi: f64, _out: &mut Vec<f64>) {}

    /// Interior points of `(t_lo, t_hi)` where the partially `s`-integrated
    /// kernel over `[s_lo, s_hi]` is not smooth in `t`.
    fn t_breakpoints(&self, _s_lo: f64, _s_hi: f64, _t_lo: f64, _t_hi: f64, _out: &mut Vec<f64>) {}
}

impl<F: Fn(f64, f64) -> f64> KernelFn for F {
    fn eval(&self, t: f64, s: f64) -> f64 {
        self(t, s)
    }
}

/// `k(t, s) = k_resp(t|s) eps(s)`: the full kernel combining smearing and
/// thinning.
#[derive(Debug, Clone)]
pub struct FullKernel {
    pub response: SmearingKernel,
    pub efficiency: Efficiency,
}

impl KernelFn for FullKernel {
    fn eval(&self, t: f64, s: f64) -> f64 {
        self.response.response_density(t, s) * self.efficiency.at(s)
    }

    fn s_breakpoints(&self, t: f64, lo: f64, hi: f64, out: &mut Vec<f64>) {
        self.response.s_breakpoints(t, lo, hi, out);
        self.efficiency.s_breakpoints(lo, hi, out);
    }

    fn t_breakpoints(&self, s_lo: f64, s_hi: f64, t_lo: f64, t_hi: f64, out: &mut Vec<f64>) {
        self.response.t_breakpoints(s_lo, s_hi, t_lo, t_hi, out);
    }
}

/// Combine a smearing kernel and an efficiency into the forward kernel.
pub fn full_kernel(kern: &SmearingKernel, eff: &Efficiency) -> FullKernel {
    FullKernel {
        response: kern.clone(),
        efficiency: eff.clone(),
    }
}

/// Quadrature controls for response assembly.
#[derive(Debug, Clone)]
pub struct QuadratureOptions {
    /// Gauss-Legendre nodes per (bin x knot-span) cell in each dimension.
    pub nodes: usize,
    /// Verify entries against a node-doubled assembly.
    pub check_refinement: bool,
    /// Relative tolerance for the doubling check.
    pub rel_tol: f64,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        QuadratureOptions {
            nodes: 16,
            check_refinement: true,
            rel_tol: 1e-6,
        }
    }
}

/// Discretized forward operator: an `n x p` matrix mapping spline
/// coefficients to expected bin counts, plus its 2-norm condition number.
#[derive(Debug, Clone)]
pub struct ResponseMatrix {
    k: DMatrix<f64>,
    basis: SplineBasis,
    binning: BinningScheme,
    cond: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ResponseSidecar {
    n_bins: usize,
    n_coefficients: usize,
    true_domain: (f64, f64),
    smeared_domain: (f64, f64),
    spline_order: usize,
    interior_knots: Vec<f64>,
    bin_edges: Vec<f64>,
    condition_number: f64,
}

impl ResponseMatrix {
    /// Assemble the response matrix for `kernel` by tensor Gauss-Legendre
    /// quadrature. When `opts.check_refinement` is set the assembly is
    /// repeated with doubled nodes and entries that moved by more than
    /// `opts.rel_tol` (relative) are reported as non-convergent; the refined
    /// matrix is the one returned.
    pub fn assemble<K: KernelFn>(
        basis: &SplineBasis,
        binning: &BinningScheme,
        kernel: &K,
        opts: &QuadratureOptions,
    ) -> Result<Self, ForwardError> {
        let coarse = Self::assemble_with_nodes(basis, binning, kernel, opts.nodes);
        if !opts.check_refinement {
            return Self::from_parts(coarse, basis.clone(), binning.clone());
        }
        let fine = Self::assemble_with_nodes(basis, binning, kernel, 2 * opts.nodes);
        let scale = fine.amax();
        for i in 0..fine.nrows() {
            for j in 0..fine.ncols() {
                let a = coarse[(i, j)];
                let b = fine[(i, j)];
                let mag = a.abs().max(b.abs());
                // entries negligible against the matrix scale cannot be
                // resolved in relative terms and do not affect the operator
                if mag <= 1e-14 * scale {
                    continue;
                }
                let change = (a - b).abs() / mag;
                if change > opts.rel_tol {
                    return Err(ForwardError::QuadratureNonConvergence {
                        row: i,
                        col: j,
                        change,
                    });
                }
            }
        }
        Self::from_parts(fine, basis.clone(), binning.clone())
    }

    fn assemble_with_nodes<K: KernelFn>(
        basis: &SplineBasis,
        binning: &BinningScheme,
        kernel: &K,
        nodes: usize,
    ) -> DMatrix<f64> {
        let n = binning.n_bins();
        let p = basis.num_functions();
        let rule = GaussLegendre::new(nodes);
        let spans = basis.breakpoints();
        let edges = binning.edges();
        let mut k_mat = DMatrix::zeros(n, p);
        let mut t_cuts: Vec<f64> = Vec::new();
        let mut s_cuts: Vec<f64> = Vec::new();
        for i in 0..n {
            for span in spans.windows(2) {
                t_cuts.clear();
                t_cuts.push(edges[i]);
                kernel.t_breakpoints(span[0], span[1], edges[i], edges[i + 1], &mut t_cuts);
                t_cuts.push(edges[i + 1]);
                t_cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
                for ti in 0..t_cuts.len() - 1 {
                    if t_cuts[ti + 1] <= t_cuts[ti] {
                        continue;
                    }
                    for (t, wt) in rule.mapped(t_cuts[ti], t_cuts[ti + 1]) {
                        s_cuts.clear();
                        s_cuts.push(span[0]);
                        kernel.s_breakpoints(t, span[0], span[1], &mut s_cuts);
                        s_cuts.push(span[1]);
                        s_cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
                        for si in 0..s_cuts.len() - 1 {
                            if s_cuts[si + 1] <= s_cuts[si] {
                                continue;
                            }
                            for (s, ws) in rule.mapped(s_cuts[si], s_cuts[si + 1]) {
                                let kv = kernel.eval(t, s);
                                if kv == 0.0 {
                                    continue;
                                }
                                let (first, vals) =
                                    basis.eval_window(s, 0).expect("node inside domain");
                                for (r, v) in vals.iter().enumerate() {
                                    k_mat[(i, first + r)] += wt * ws * kv * v;
                                }
                            }
                        }
                    }
                }
            }
        }
        k_mat
    }

    /// Design matrix of the no-smearing problem: `K~[i][j]` is the integral
    /// of `B_j` over bin `F_i` (clipped to the true domain). Used to
    /// initialize the sampler.
    pub fn delta_kernel(
        basis: &SplineBasis,
        binning: &BinningScheme,
    ) -> Result<Self, ForwardError> {
        let n = binning.n_bins();
        let p = basis.num_functions();
        let (e_lo, e_hi) = basis.domain();
        let rule = GaussLegendre::new(basis.order().div_ceil(2) + 1);
        let spans = basis.breakpoints();
        let edges = binning.edges();
        let mut k_mat = DMatrix::zeros(n, p);
        for i in 0..n {
            let lo = edges[i].max(e_lo);
            let hi = edges[i + 1].min(e_hi);
            if hi <= lo {
                continue;
            }
            // split at knot spans: the integrand is piecewise polynomial
            let mut cuts = vec![lo];
            cuts.extend(spans.iter().copied().filter(|&s| lo < s && s < hi));
            cuts.push(hi);
            for seg in cuts.windows(2) {
                for (t, w) in rule.mapped(seg[0], seg[1]) {
                    let (first, vals) = basis.eval_window(t, 0)?;
                    for (r, v) in vals.iter().enumerate() {
                        k_mat[(i, first + r)] += w * v;
                    }
                }
            }
        }
        Self::from_parts(k_mat, basis.clone(), binning.clone())
    }

    /// Wrap an explicit matrix, computing the condition number.
    pub fn from_parts(
        k: DMatrix<f64>,
        basis: SplineBasis,
        binning: BinningScheme,
    ) -> Result<Self, ForwardError> {
        if k.nrows() != binning.n_bins() || k.ncols() != basis.num_functions() {
            return Err(ForwardError::DimensionMismatch(format!(
                "matrix is {}x{}, binning has {} bins, basis has {} functions",
                k.nrows(),
                k.ncols(),
                binning.n_bins(),
                basis.num_functions()
            )));
        }
        let sv = k.singular_values();
        let smax = sv.iter().cloned().fold(f64::MIN, f64::max);
        let smin = sv.iter().cloned().fold(f64::MAX, f64::min);
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        Ok(ResponseMatrix {
            k,
            basis,
            binning,
            cond,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn condition_number(&self) -> f64 {
        self.cond
    }

    pub fn n_bins(&self) -> usize {
        self.k.nrows()
    }

    pub fn n_coefficients(&self) -> usize {
        self.k.ncols()
    }

    pub fn basis(&self) -> &SplineBasis {
        &self.basis
    }

    pub fn binning(&self) -> &BinningScheme {
        &self.binning
    }

    /// Expected bin counts `mu = K beta` for non-negative coefficients.
    pub fn smeared_means(&self, beta: &DVector<f64>) -> Result<DVector<f64>, ForwardError> {
        if beta.len() != self.k.ncols() {
            return Err(ForwardError::DimensionMismatch(format!(
                "beta has length {}, expected {}",
                beta.len(),
                self.k.ncols()
            )));
        }
        if let Some(idx) = beta.iter().position(|&b| b < 0.0) {
            return Err(ForwardError::NegativeCoefficient(idx));
        }
        Ok(&self.k * beta)
    }

    /// Write the matrix as CSV plus a JSON metadata sidecar sufficient to
    /// reconstruct domains, basis and binning.
    pub fn write_csv<P: AsRef<Path>, Q: AsRef<Path>>(
        &self,
        csv_path: P,
        sidecar_path: Q,
    ) -> Result<(), ForwardError> {
        let mut w = csv::Writer::from_path(csv_path.as_ref())?;
        for i in 0..self.k.nrows() {
            let row: Vec<String> = (0..self.k.ncols())
                .map(|j| format!("{:.16e}", self.k[(i, j)]))
                .collect();
            w.write_record(&row)
                .map_err(|e| ForwardError::MalformedFile(e.to_string()))?;
        }
        w.flush()?;
        let (e_lo, e_hi) = self.basis.domain();
        let interior = self.basis.padded_knots()
            [self.basis.order()..self.basis.order() + self.basis.num_interior_knots()]
            .to_vec();
        let sidecar = ResponseSidecar {
            n_bins: self.n_bins(),
            n_coefficients: self.n_coefficients(),
            true_domain: (e_lo, e_hi),
            smeared_domain: self.binning.range(),
            spline_order: self.basis.order(),
            interior_knots: interior,
            bin_edges: self.binning.edges().to_vec(),
            condition_number: self.cond,
        };
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| ForwardError::MalformedFile(e.to_string()))?;
        std::fs::write(sidecar_path, json)?;
        Ok(())
    }

    /// Read a matrix written by [`write_csv`](Self::write_csv).
    pub fn read_csv<P: AsRef<Path>, Q: AsRef<Path>>(
        csv_path: P,
        sidecar_path: Q,
    ) -> Result<Self, ForwardError> {
        let text = std::fs::read_to_string(sidecar_path)?;
        let sidecar: ResponseSidecar = serde_json::from_str(&text)
            .map_err(|e| ForwardError::MalformedFile(e.to_string()))?;
        let basis = SplineBasis::with_interior_knots(
            sidecar.true_domain,
            &sidecar.interior_knots,
            sidecar.spline_order,
        )?;
        let binning = BinningScheme::from_edges(sidecar.bin_edges.clone())?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(csv_path.as_ref())?;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| ForwardError::MalformedFile(e.to_string()))?;
            let row: Result<Vec<f64>, _> = rec.iter().map(|f| f.trim().parse::<f64>()).collect();
            rows.push(row.map_err(|e| ForwardError::MalformedFile(e.to_string()))?);
        }
        if rows.len() != sidecar.n_bins
            || rows.iter().any(|r| r.len() != sidecar.n_coefficients)
        {
            return Err(ForwardError::MalformedFile(
                "matrix shape does not match sidecar".into(),
            ));
        }
        let k = DMatrix::from_fn(sidecar.n_bins, sidecar.n_coefficients, |i, j| rows[i][j]);
        Self::from_parts(k, basis, binning)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn gaussian_kernel() -> SmearingKernel {
        SmearingKernel::gaussian(1.0).unwrap()
    }

    #[test]
    fn full_kernel_combines_response_and_efficiency() {
        let kern = gaussian_kernel();
        let full = full_kernel(&kern, &Efficiency::constant(1.0).unwrap());
        let v = full.eval(0.5, 0.0);
        assert_abs_diff_eq!(v, (-0.125f64).exp() / SQRT_2PI, epsilon = 1e-15);

        let none = full_kernel(&kern, &Efficiency::constant(0.0).unwrap());
        assert_eq!(none.eval(0.5, 0.0), 0.0);

        let half = full_kernel(&kern, &Efficiency::constant(0.5).unwrap());
        for (t, s) in [(0.0, 0.0), (1.3, -0.4), (-2.0, 2.0)] {
            assert_abs_diff_eq!(half.eval(t, s), 0.5 * full.eval(t, s), epsilon = 1e-16);
        }
    }

    #[test]
    fn efficiency_validation_and_interpolation() {
        assert!(Efficiency::constant(1.5).is_err());
        assert!(Efficiency::constant(-0.1).is_err());
        let tab = Efficiency::tabulated(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 0.5]).unwrap();
        assert_abs_diff_eq!(tab.at(0.5), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(tab.at(1.5), 0.75, epsilon = 1e-15);
        assert_eq!(tab.at(-1.0), 0.0);
        assert_eq!(tab.at(3.0), 0.5);
        assert!(Efficiency::tabulated(vec![0.0, 1.0], vec![0.2, 1.2]).is_err());
    }

    #[test]
    fn crystal_ball_rejects_bad_parameters() {
        assert!(crystal_ball_pdf(0.0, 0.0, 1.0, 1.0, 0.9).is_err());
        assert!(crystal_ball_pdf(0.0, 0.0, 1.0, 1.0, 1.0).is_err());
        assert!(crystal_ball_pdf(0.0, 0.0, -1.0, 1.0, 2.0).is_err());
        assert!(crystal_ball_pdf(0.0, 0.0, 1.0, 0.0, 2.0).is_err());
    }

    #[test]
    fn crystal_ball_continuous_at_junction() {
        let (dm, sig, al, gm) = (0.58, 0.99, 1.81, 1.60);
        let x_junction = dm - al * sig;
        let below = crystal_ball_pdf(x_junction - 1e-12, dm, sig, al, gm).unwrap();
        let above = crystal_ball_pdf(x_junction + 1e-12, dm, sig, al, gm).unwrap();
        assert_abs_diff_eq!(below, above, epsilon = 1e-12);
    }

    #[test]
    fn crystal_ball_approaches_gaussian_for_large_alpha() {
        let cb = CrystalBall::new(0.0, 1.0, 25.0, 2.0).unwrap();
        for &x in &[-3.0, -1.0, 0.0, 0.5, 2.0] {
            let g = (-0.5 * x * x).exp() / SQRT_2PI;
            assert_abs_diff_eq!(cb.pdf(x), g, epsilon = 1e-12);
        }
    }

    #[test]
    fn crystal_ball_normalizes_to_one() {
        // adaptive-ish oracle: dense Simpson over [-50, 50] plus the closed
        // form tail mass below -50; the power-law tail with gamma = 1.6 keeps
        // roughly 1% of the mass outside any window of this size, so the
        // window alone cannot reach 1.
        let (dm, sig, al, gm) = (0.58, 0.99, 1.81, 1.60);
        let cb = CrystalBall::new(dm, sig, al, gm).unwrap();
        let n = 200_000;
        let (a, b) = (-50.0, 50.0);
        let h = (b - a) / n as f64;
        let mut acc = cb.pdf(a) + cb.pdf(b);
        for k in 1..n {
            acc += if k % 2 == 1 { 4.0 } else { 2.0 } * cb.pdf(a + k as f64 * h);
        }
        let window = acc * h / 3.0;
        let below = cb.cdf(a);
        assert!(below > 0.005, "heavy tail should be visible: {below}");
        assert_abs_diff_eq!(window + below, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn crystal_ball_cdf_increments_match_quadrature() {
        let cb = CrystalBall::new(0.58, 0.99, 1.81, 1.60).unwrap();
        let junction = cb.delta_m - cb.alpha * cb.sigma;
        let rule = GaussLegendre::new(48);
        // brackets that avoid, then straddle, the junction
        for (lo, hi) in [(-8.0, -3.0), (-3.0, junction), (junction, 2.0), (-2.0, 3.0)] {
            let want = if lo < junction && junction < hi {
                rule.integrate(lo, junction, |u| cb.pdf(u))
                    + rule.integrate(junction, hi, |u| cb.pdf(u))
            } else {
                rule.integrate(lo, hi, |u| cb.pdf(u))
            };
            let got = cb.cdf(hi) - cb.cdf(lo);
            assert_abs_diff_eq!(got, want, epsilon = 1e-10);
        }
    }

    #[test]
    fn binning_scheme_bin_lookup() {
        let b = BinningScheme::uniform(0.0, 4.0, 4).unwrap();
        assert_eq!(b.find_bin(0.0), Some(0));
        assert_eq!(b.find_bin(1.0), Some(1)); // interior edge goes right
        assert_eq!(b.find_bin(3.999), Some(3));
        assert_eq!(b.find_bin(4.0), Some(3)); // last bin closed
        assert_eq!(b.find_bin(-0.1), None);
        assert_eq!(b.find_bin(4.1), None);
        assert!(BinningScheme::uniform(1.0, 1.0, 4).is_err());
        assert!(BinningScheme::from_edges(vec![0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn delta_kernel_is_diagonal_for_matched_histogram_basis() {
        // order-1 basis whose knots coincide with the bin edges
        let basis = SplineBasis::uniform((0.0, 4.0), 3, 1).unwrap();
        let binning = BinningScheme::uniform(0.0, 4.0, 4).unwrap();
        let kt = ResponseMatrix::delta_kernel(&basis, &binning).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 }; // bin width 1
                assert_abs_diff_eq!(kt.matrix()[(i, j)], want, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn delta_kernel_column_sums_match_basis_integrals() {
        let basis = SplineBasis::uniform((-7.0, 7.0), 26, 4).unwrap();
        let binning = BinningScheme::uniform(-7.0, 7.0, 40).unwrap();
        let kt = ResponseMatrix::delta_kernel(&basis, &binning).unwrap();
        let ints = basis.integrals();
        for j in 0..basis.num_functions() {
            let colsum: f64 = (0..40).map(|i| kt.matrix()[(i, j)]).sum();
            assert_abs_diff_eq!(colsum, ints[j], epsilon = 1e-10);
        }
    }

    #[test]
    fn smeared_means_basic_properties() {
        let basis = SplineBasis::uniform((0.0, 4.0), 3, 1).unwrap();
        let binning = BinningScheme::uniform(0.0, 4.0, 4).unwrap();
        let kt = ResponseMatrix::delta_kernel(&basis, &binning).unwrap();
        let zero = kt.smeared_means(&DVector::zeros(4)).unwrap();
        assert!(zero.iter().all(|&m| m == 0.0));
        let e2 = DVector::from_fn(4, |i, _| if i == 2 { 1.0 } else { 0.0 });
        let mu = kt.smeared_means(&e2).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(mu[i], kt.matrix()[(i, 2)], epsilon = 0.0);
        }
        let neg = DVector::from_vec(vec![1.0, -0.5, 0.0, 0.0]);
        assert!(matches!(
            kt.smeared_means(&neg),
            Err(ForwardError::NegativeCoefficient(1))
        ));
        assert!(kt.smeared_means(&DVector::zeros(5)).is_err());
    }

    #[test]
    fn smeared_means_match_direct_operator_quadrature() {
        // small Gaussian setup; oracle integrates k(t,s) f(s) directly
        let basis = SplineBasis::uniform((-3.0, 3.0), 6, 4).unwrap();
        let binning = BinningScheme::uniform(-3.0, 3.0, 8).unwrap();
        let kern = full_kernel(
            &SmearingKernel::gaussian(0.7).unwrap(),
            &Efficiency::constant(1.0).unwrap(),
        );
        let resp =
            ResponseMatrix::assemble(&basis, &binning, &kern, &QuadratureOptions::default())
                .unwrap();
        let p = basis.num_functions();
        let beta = DVector::from_fn(p, |j, _| 0.2 + ((j * 31) % 7) as f64 / 3.0);
        let mu = resp.smeared_means(&beta).unwrap();
        let rule = GaussLegendre::new(32);
        let f = |s: f64| basis.eval(s, 0).unwrap().dot(&beta);
        let spans = basis.breakpoints();
        for i in 0..8 {
            let (lo, hi) = (binning.edges()[i], binning.edges()[i + 1]);
            // integrate the spline factor span by span so each piece is smooth
            let want = rule.integrate(lo, hi, |t| {
                spans
                    .windows(2)
                    .map(|w| rule.integrate(w[0], w[1], |s| kern.eval(t, s) * f(s)))
                    .sum()
            });
            let rel = (mu[i] - want).abs() / want.abs();
            assert!(rel < 1e-6, "bin {i}: got {}, oracle {want}, rel {rel}", mu[i]);
        }
    }

    #[test]
    fn response_rows_capture_basis_mass_when_window_is_wide() {
        // F much wider than E so essentially no kernel mass escapes
        let basis = SplineBasis::uniform((-2.0, 2.0), 4, 4).unwrap();
        let binning = BinningScheme::uniform(-9.0, 9.0, 30).unwrap();
        let kern = full_kernel(
            &SmearingKernel::gaussian(1.0).unwrap(),
            &Efficiency::constant(1.0).unwrap(),
        );
        let resp =
            ResponseMatrix::assemble(&basis, &binning, &kern, &QuadratureOptions::default())
                .unwrap();
        let ints = basis.integrals();
        for j in 0..basis.num_functions() {
            let colsum: f64 = (0..binning.n_bins()).map(|i| resp.matrix()[(i, j)]).sum();
            assert_abs_diff_eq!(colsum, ints[j], epsilon = 1e-8);
        }
        assert!(resp.matrix().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn quadrature_nonconvergence_is_reported_with_entry() {
        // a kernel with a kink the quadrature is not told about
        struct Kinked;
        impl KernelFn for Kinked {
            fn eval(&self, t: f64, s: f64) -> f64 {
                (t - s).abs().sqrt() + 0.1
            }
        }
        let basis = SplineBasis::uniform((0.0, 1.0), 2, 4).unwrap();
        let binning = BinningScheme::uniform(0.0, 1.0, 3).unwrap();
        let opts = QuadratureOptions {
            nodes: 2,
            check_refinement: true,
            rel_tol: 1e-12,
        };
        let err = ResponseMatrix::assemble(&basis, &binning, &Kinked, &opts).unwrap_err();
        assert!(matches!(
            err,
            ForwardError::QuadratureNonConvergence { .. }
        ));
    }

    #[test]
    fn csv_round_trip_preserves_matrix_and_metadata() {
        let basis = SplineBasis::uniform((-2.0, 2.0), 3, 4).unwrap();
        let binning = BinningScheme::uniform(-2.0, 2.0, 5).unwrap();
        let kt = ResponseMatrix::delta_kernel(&basis, &binning).unwrap();
        let dir = std::env::temp_dir().join("unfold_forward_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let csv = dir.join("k.csv");
        let sidecar = dir.join("k.json");
        kt.write_csv(&csv, &sidecar).unwrap();
        let back = ResponseMatrix::read_csv(&csv, &sidecar).unwrap();
        assert_eq!(back.n_bins(), kt.n_bins());
        assert_eq!(back.n_coefficients(), kt.n_coefficients());
        let diff = (back.matrix() - kt.matrix()).amax();
        assert!(diff < 1e-15);
        assert_abs_diff_eq!(back.condition_number(), kt.condition_number(), epsilon = 1e-9);
    }

    #[test]
    fn tabulated_kernel_interpolates_bilinearly_and_zeros_outside() {
        let t_grid = vec![0.0, 1.0];
        let s_grid = vec![0.0, 2.0];
        let vals = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 1.0, 3.0]);
        let tab = TabulatedKernel::new(t_grid, s_grid, vals).unwrap();
        assert_abs_diff_eq!(tab.density(0.5, 1.0), 1.5, epsilon = 1e-14);
        assert_eq!(tab.density(-0.1, 1.0), 0.0);
        assert_eq!(tab.density(0.5, 2.5), 0.0);
    }
}
