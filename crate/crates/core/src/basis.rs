//! B-spline bases on the true space and the curvature penalty matrices.
//!
//! An order-`m` basis (degree `m - 1`) with `L` interior knots has
//! `p = L + m` functions. End knots are clamped (repeated `m` times), so the
//! basis spans all order-`m` splines on the domain, sums to one everywhere,
//! and satisfies `B_1(min E) = B_p(max E) = 1`, which is what the boundary
//! conditioning of the prior relies on.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::quad::GaussLegendre;

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("spline order must be at least 1, got {0}")]
    InvalidOrder(usize),

    #[error("domain [{0}, {1}] is empty or degenerate")]
    InvalidDomain(f64, f64),

    #[error("interior knots must be strictly increasing inside the domain")]
    InvalidKnots,

    #[error("point {0} lies outside the domain [{1}, {2}]")]
    OutOfDomain(f64, f64, f64),

    #[error("derivative order {0} not supported (max 2)")]
    UnsupportedDerivative(usize),

    #[error("coefficient vector has length {got}, basis has {expected} functions")]
    DimensionMismatch { got: usize, expected: usize },

    #[error("penalty undefined for order < 3")]
    PenaltyOrderTooLow,

    #[error("boundary weights must be positive, got gamma_l={0}, gamma_r={1}")]
    InvalidBoundaryWeight(f64, f64),

    #[error("augmented penalty matrix is not positive definite")]
    NotPositiveDefinite,
}

/// A univariate B-spline basis with clamped end knots.
#[derive(Debug, Clone)]
pub struct SplineBasis {
    order: usize,
    /// Padded knot vector of length `2m + L`.
    knots: Vec<f64>,
    domain: (f64, f64),
    n_interior: usize,
}

impl SplineBasis {
    /// Basis with `n_interior` uniformly spaced interior knots on `domain`.
    pub fn uniform(
        domain: (f64, f64),
        n_interior: usize,
        order: usize,
    ) -> Result<Self, BasisError> {
        let (a, b) = domain;
        let interior: Vec<f64> = (1..=n_interior)
            .map(|i| a + (b - a) * i as f64 / (n_interior + 1) as f64)
            .collect();
        Self::with_interior_knots(domain, &interior, order)
    }

    /// Basis with explicit interior knots, clamped at the domain endpoints.
    pub fn with_interior_knots(
        domain: (f64, f64),
        interior: &[f64],
        order: usize,
    ) -> Result<Self, BasisError> {
        let (a, b) = domain;
        if order < 1 {
            return Err(BasisError::InvalidOrder(order));
        }
        if !(a.is_finite() && b.is_finite()) || a >= b {
            return Err(BasisError::InvalidDomain(a, b));
        }
        let increasing = interior.windows(2).all(|w| w[0] < w[1]);
        let inside = interior.iter().all(|&s| a < s && s < b);
        if !increasing || !inside {
            return Err(BasisError::InvalidKnots);
        }
        let mut knots = Vec::with_capacity(2 * order + interior.len());
        knots.extend(std::iter::repeat_n(a, order));
        knots.extend_from_slice(interior);
        knots.extend(std::iter::repeat_n(b, order));
        Ok(SplineBasis {
            order,
            knots,
            domain,
            n_interior: interior.len(),
        })
    }

    /// Number of basis functions, `p = L + m`.
    pub fn num_functions(&self) -> usize {
        self.n_interior + self.order
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn num_interior_knots(&self) -> usize {
        self.n_interior
    }

    /// Padded knot vector (end knots repeated `order` times).
    pub fn padded_knots(&self) -> &[f64] {
        &self.knots
    }

    /// Distinct breakpoints `s_0 < s_1 < ... < s_{L+1}` including the endpoints.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.n_interior + 2);
        b.push(self.domain.0);
        b.extend_from_slice(&self.knots[self.order..self.order + self.n_interior]);
        b.push(self.domain.1);
        b
    }

    /// Greville abscissae; the coefficient vector encoding `f(s) = s`.
    pub fn greville_abscissae(&self) -> Vec<f64> {
        let p = self.num_functions();
        let m = self.order;
        (0..p)
            .map(|j| {
                if m == 1 {
                    // order-1 histogram basis: midpoints
                    0.5 * (self.knots[j] + self.knots[j + 1])
                } else {
                    self.knots[j + 1..j + m].iter().sum::<f64>() / (m - 1) as f64
                }
            })
            .collect()
    }

    /// Index of the knot span containing `x`: largest `mu` with
    /// `knots[mu] <= x < knots[mu + 1]`, closing the last nonempty span at
    /// the right endpoint.
    fn find_span(&self, x: f64) -> usize {
        let m = self.order;
        let p = self.num_functions();
        if x >= self.domain.1 {
            return p - 1; // last nonempty span [knots[p-1], knots[p]]
        }
        // binary search over knots[m-1 ..= p]
        let mut lo = m - 1;
        let mut hi = p;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// The `ord` basis values of the order-`ord` basis (over the same padded
    /// knots) that can be nonzero at `x`. Slot `r` of the result holds
    /// `B_{span + 1 - ord + r, ord}(x)`; the slot of a given function index
    /// is the same at every order, so the Cox-de Boor ascent runs in place.
    fn nonzero_values(&self, x: f64, ord: usize, span: usize) -> Vec<f64> {
        let t = &self.knots;
        let mut vals = vec![0.0; ord];
        vals[ord - 1] = 1.0; // order-1 indicator of the span
        for k in 2..=ord {
            for r in (ord - k)..ord {
                let j = span + 1 + r - ord;
                let old_j = vals[r];
                let old_j1 = if r + 1 < ord { vals[r + 1] } else { 0.0 };
                let d1 = t[j + k - 1] - t[j];
                let left = if d1 > 0.0 { (x - t[j]) / d1 * old_j } else { 0.0 };
                let d2 = t[j + k] - t[j + 1];
                let right = if d2 > 0.0 {
                    (t[j + k] - x) / d2 * old_j1
                } else {
                    0.0
                };
                vals[r] = left + right;
            }
        }
        vals
    }

    /// Evaluate all `p` basis functions (or a derivative) at `s`.
    ///
    /// `deriv` may be 0, 1 or 2; points outside the closed domain are
    /// rejected rather than extrapolated.
    pub fn eval(&self, s: f64, deriv: usize) -> Result<DVector<f64>, BasisError> {
        let p = self.num_functions();
        let mut out = DVector::zeros(p);
        self.eval_window(s, deriv).map(|(first, vals)| {
            for (r, v) in vals.iter().enumerate() {
                out[first + r] = *v;
            }
            out
        })
    }

    /// Like [`eval`](Self::eval) but returns only the window of (at most
    /// `order`) possibly-nonzero values and the index of the first one.
    pub fn eval_window(&self, s: f64, deriv: usize) -> Result<(usize, Vec<f64>), BasisError> {
        if deriv > 2 {
            return Err(BasisError::UnsupportedDerivative(deriv));
        }
        let (a, b) = self.domain;
        if !(s >= a && s <= b) {
            return Err(BasisError::OutOfDomain(s, a, b));
        }
        let m = self.order;
        let span = self.find_span(s);
        let first = span + 1 - m;
        if deriv == 0 {
            return Ok((first, self.nonzero_values(s, m, span)));
        }
        if deriv >= m {
            // derivative of a piecewise polynomial of degree m-1 vanishes
            return Ok((first, vec![0.0; m]));
        }
        // derivative recursion on lower-order values
        let lower = self.nonzero_values(s, m - deriv, span);
        let mut vals = pad_left(lower, m);
        for k in (m - deriv + 1)..=m {
            vals = self.derivative_step(&vals, k, span, m);
        }
        Ok((first, vals))
    }

    /// One application of d/dx B_{j,k} = (k-1) [ B_{j,k-1}/(t_{j+k-1}-t_j)
    /// - B_{j+1,k-1}/(t_{j+k}-t_{j+1}) ], on the window of the span.
    ///
    /// `vals` holds order-(k-1) values right-aligned in a window of width m;
    /// entry `r` corresponds to function index `span + 1 + r - m`.
    fn derivative_step(&self, vals: &[f64], k: usize, span: usize, m: usize) -> Vec<f64> {
        let t = &self.knots;
        let mut out = vec![0.0; m];
        for r in (m - k)..m {
            let j = span + 1 + r - m;
            let d1 = t[j + k - 1] - t[j];
            let left = if d1 > 0.0 { vals[r] / d1 } else { 0.0 };
            let d2 = t[j + k] - t[j + 1];
            let right = if d2 > 0.0 && r + 1 < m {
                vals[r + 1] / d2
            } else {
                0.0
            };
            out[r] = (k as f64 - 1.0) * (left - right);
        }
        out
    }

    /// Evaluate `f(s) = sum_j beta_j B_j(s)` on a grid.
    pub fn intensity(&self, beta: &DVector<f64>, grid: &[f64]) -> Result<Vec<f64>, BasisError> {
        let p = self.num_functions();
        if beta.len() != p {
            return Err(BasisError::DimensionMismatch {
                got: beta.len(),
                expected: p,
            });
        }
        grid.iter()
            .map(|&s| {
                let (first, vals) = self.eval_window(s, 0)?;
                Ok(vals
                    .iter()
                    .enumerate()
                    .map(|(r, v)| beta[first + r] * v)
                    .sum())
            })
            .collect()
    }

    /// Integrals of each basis function over the domain.
    pub fn integrals(&self) -> DVector<f64> {
        let p = self.num_functions();
        let rule = GaussLegendre::new(self.order.div_ceil(2) + 1);
        let mut out = DVector::zeros(p);
        let bp = self.breakpoints();
        for w in bp.windows(2) {
            for (x, wt) in rule.mapped(w[0], w[1]) {
                let (first, vals) = self.eval_window(x, 0).expect("node inside domain");
                for (r, v) in vals.iter().enumerate() {
                    out[first + r] += wt * v;
                }
            }
        }
        out
    }
}

fn pad_left(vals: Vec<f64>, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    let off = width - vals.len();
    out[off..].copy_from_slice(&vals);
    out
}

/// Curvature penalty `Omega_{i,j} = integral of B_i'' B_j''` over the domain,
/// plus the boundary-augmented version `Omega_A` with `gamma_l` added at
/// `(1,1)` and `gamma_r` at `(p,p)`.
///
/// `Omega` is positive semidefinite with a two-dimensional null space (the
/// coefficients of affine functions); the augmentation makes `Omega_A`
/// strictly positive definite so the smoothness prior is proper.
#[derive(Debug, Clone)]
pub struct PenaltyMatrix {
    omega: DMatrix<f64>,
    omega_a: DMatrix<f64>,
    gamma_l: f64,
    gamma_r: f64,
}

impl PenaltyMatrix {
    /// Exact curvature penalty for `basis`. The integrand on each knot span
    /// is a polynomial of degree `2m - 6`, so the per-span Gauss-Legendre
    /// rule used here is exact.
    pub fn curvature(basis: &SplineBasis, gamma_l: f64, gamma_r: f64) -> Result<Self, BasisError> {
        let nodes = (2 * basis.order() - 5).div_ceil(2) + 1;
        Self::curvature_with_nodes(basis, gamma_l, gamma_r, nodes)
    }

    /// Curvature penalty with an explicit per-span node count (used to check
    /// quadrature exactness by doubling).
    pub fn curvature_with_nodes(
        basis: &SplineBasis,
        gamma_l: f64,
        gamma_r: f64,
        nodes_per_span: usize,
    ) -> Result<Self, BasisError> {
        if basis.order() < 3 {
            return Err(BasisError::PenaltyOrderTooLow);
        }
        let p = basis.num_functions();
        let m = basis.order();
        let rule = GaussLegendre::new(nodes_per_span);
        let mut omega = DMatrix::zeros(p, p);
        let bp = basis.breakpoints();
        for w in bp.windows(2) {
            for (x, wt) in rule.mapped(w[0], w[1]) {
                let (first, vals) = basis.eval_window(x, 2).expect("node inside domain");
                for r in 0..m {
                    for c in 0..m {
                        omega[(first + r, first + c)] += wt * vals[r] * vals[c];
                    }
                }
            }
        }
        // symmetrize roundoff
        for i in 0..p {
            for j in (i + 1)..p {
                let v = 0.5 * (omega[(i, j)] + omega[(j, i)]);
                omega[(i, j)] = v;
                omega[(j, i)] = v;
            }
        }
        Self::from_curvature_matrix(omega, gamma_l, gamma_r)
    }

    /// Assemble from an explicit curvature matrix (used by toy models and
    /// tests); validates that the augmented matrix is positive definite.
    pub fn from_curvature_matrix(
        omega: DMatrix<f64>,
        gamma_l: f64,
        gamma_r: f64,
    ) -> Result<Self, BasisError> {
        if !(gamma_l > 0.0 && gamma_r > 0.0) {
            return Err(BasisError::InvalidBoundaryWeight(gamma_l, gamma_r));
        }
        let p = omega.nrows();
        let mut omega_a = omega.clone();
        omega_a[(0, 0)] += gamma_l;
        omega_a[(p - 1, p - 1)] += gamma_r;
        if omega_a.clone().cholesky().is_none() {
            return Err(BasisError::NotPositiveDefinite);
        }
        Ok(PenaltyMatrix {
            omega,
            omega_a,
            gamma_l,
            gamma_r,
        })
    }

    pub fn dim(&self) -> usize {
        self.omega.nrows()
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn omega_a(&self) -> &DMatrix<f64> {
        &self.omega_a
    }

    pub fn gamma_l(&self) -> f64 {
        self.gamma_l
    }

    pub fn gamma_r(&self) -> f64 {
        self.gamma_r
    }

    /// Quadratic form `beta' Omega_A beta`.
    pub fn quadratic_form(&self, beta: &DVector<f64>) -> f64 {
        (&self.omega_a * beta).dot(beta)
    }
}
