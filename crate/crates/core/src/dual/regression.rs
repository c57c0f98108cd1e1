//! Least-squares projection on tensor polynomials with deterministic sums.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::model::MAX_DIM;

/// Paths per parallel block; partial sums are reduced in block order.
pub(crate) const BLOCK: usize = 4096;

pub(crate) const MAX_DEGREE: usize = 7;
pub(crate) const MAX_BASIS: usize = 64;

/// Largest accepted condition number of the normalized Gram matrix.
const MAX_CONDITION: f64 = 1e12;

/// Sums `f(range)` over fixed blocks of `0..n`, combining in block order so
/// the result does not depend on the thread count.
pub(crate) fn block_sum<F>(n: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync,
{
    let blocks: Vec<Vec<f64>> = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![0.0; width];
            f(b * BLOCK..((b + 1) * BLOCK).min(n), &mut acc);
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for acc in &blocks {
        for (t, v) in total.iter_mut().zip(acc) {
            *t += v;
        }
    }
    total
}

/// Multi-indices of the tensor basis `prod_j x_j^{e_j}`, `e_j <= degree`.
fn exponents(dim: usize, degree: usize) -> Vec<Vec<u32>> {
    let per = degree + 1;
    (0..per.pow(dim as u32))
        .map(|mut code| {
            (0..dim)
                .map(|_| {
                    let e = (code % per) as u32;
                    code /= per;
                    e
                })
                .collect()
        })
        .collect()
}

/// Standardized tensor-polynomial basis.
#[derive(Debug, Clone)]
pub(crate) struct Basis {
    center: Vec<f64>,
    scale: Vec<f64>,
    exps: Vec<Vec<u32>>,
    pub degree: usize,
}

impl Basis {
    fn new(center: Vec<f64>, scale: Vec<f64>, degree: usize) -> Self {
        let exps = exponents(center.len(), degree);
        Self { center, scale, exps, degree }
    }

    pub fn len(&self) -> usize {
        self.exps.len()
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        let d = self.center.len();
        let mut pows = [[1.0; MAX_DEGREE + 1]; MAX_DIM];
        for j in 0..d {
            let z = (x[j] - self.center[j]) / self.scale[j];
            for e in 1..=self.degree {
                pows[j][e] = pows[j][e - 1] * z;
            }
        }
        for (o, e) in out.iter_mut().zip(&self.exps) {
            *o = (0..d).map(|j| pows[j][e[j] as usize]).product();
        }
    }
}

/// A fitted function: a basis and one coefficient vector per target.
#[derive(Debug, Clone)]
pub(crate) struct Fit {
    pub basis: Basis,
    pub coef: Vec<Vec<f64>>,
    /// The abscissae were all equal; the fit is the sample mean.
    pub point_mass: bool,
}

impl Fit {
    /// Values of every target at `x`.
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        let mut phi = [0.0; MAX_BASIS];
        let phi = &mut phi[..self.basis.len()];
        self.basis.eval(x, phi);
        for (o, c) in out.iter_mut().zip(&self.coef) {
            *o = c.iter().zip(phi.iter()).map(|(a, b)| a * b).sum();
        }
    }
}

/// Regresses the targets `y(i, out)` on the basis in `x(i, out)` for `i < n`.
///
/// A cloud concentrated at one point is fitted by its mean. A Gram matrix
/// that is numerically singular lowers the degree until it is not; the
/// fallback is logged.
pub(crate) fn fit(
    n: usize,
    dim: usize,
    n_targets: usize,
    degree: usize,
    x: &(dyn Fn(usize, &mut [f64]) + Sync),
    y: &(dyn Fn(usize, &mut [f64]) + Sync),
) -> Fit {
    let nf = n as f64;
    let sums = block_sum(n, dim, |r, acc| {
        let mut xi = [0.0; MAX_DIM];
        for i in r {
            x(i, &mut xi[..dim]);
            for (a, v) in acc.iter_mut().zip(&xi[..dim]) {
                *a += v;
            }
        }
    });
    let center: Vec<f64> = sums.iter().map(|s| s / nf).collect();
    let sq = block_sum(n, dim, |r, acc| {
        let mut xi = [0.0; MAX_DIM];
        for i in r {
            x(i, &mut xi[..dim]);
            for ((a, v), c) in acc.iter_mut().zip(&xi[..dim]).zip(&center) {
                *a += (v - c) * (v - c);
            }
        }
    });
    let scale: Vec<f64> = sq.iter().map(|s| (s / nf).sqrt()).collect();
    let point_mass = scale.iter().zip(&center).all(|(s, c)| *s <= 1e-14 * (1.0 + c.abs()));
    let scale: Vec<f64> = scale.iter().map(|&s| if s > 0.0 { s } else { 1.0 }).collect();

    let mut deg = if point_mass { 0 } else { degree };
    loop {
        let basis = Basis::new(center.clone(), scale.clone(), deg);
        let m = basis.len();
        let width = m * m + m * n_targets;
        let s = block_sum(n, width, |r, acc| {
            let mut phi = vec![0.0; m];
            let mut t = vec![0.0; n_targets];
            let mut xi = [0.0; MAX_DIM];
            for i in r {
                x(i, &mut xi[..dim]);
                basis.eval(&xi[..dim], &mut phi);
                y(i, &mut t);
                for a in 0..m {
                    for b in 0..m {
                        acc[a * m + b] += phi[a] * phi[b];
                    }
                    for (k, tv) in t.iter().enumerate() {
                        acc[m * m + k * m + a] += phi[a] * tv;
                    }
                }
            }
        });
        let gram = DMatrix::from_row_slice(m, m, &s[..m * m]) / nf;
        let eig = SymmetricEigen::new(gram.clone());
        let (lo, hi) = eig
            .eigenvalues
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let solvable = lo > 0.0 && hi / lo <= MAX_CONDITION;
        if solvable || deg == 0 {
            let chol = gram.cholesky();
            let coef = (0..n_targets)
                .map(|k| {
                    let rhs = DVector::from_row_slice(&s[m * m + k * m..m * m + (k + 1) * m]) / nf;
                    match &chol {
                        Some(c) => c.solve(&rhs).iter().copied().collect(),
                        // empty or all-zero design: the fit is zero
                        None => vec![0.0; m],
                    }
                })
                .collect();
            return Fit { basis, coef, point_mass };
        }
        log::warn!("regression Gram matrix is rank deficient at degree {deg} (condition {:.3e}); lowering the degree", hi / lo);
        deg -= 1;
    }
}
