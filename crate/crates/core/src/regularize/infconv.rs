//! Quadratic inf-convolution on a lattice by separable lower envelopes.
//!
//! For node values `w` on an `n_0 x ... x n_m` lattice the transform is
//!
//! ```text
//! w^k(i) = min_j  w(j) + sum_a c_a (i_a - j_a)^2,   c_a = k * weight_a * h_a^2
//! ```
//!
//! computed one axis at a time (axis 0 first) with the parabola lower
//! envelope of Felzenszwalb and Huttenlocher. The sum is accumulated in axis
//! order, `((w + c_0 d_0^2) + c_1 d_1^2) + ...`, and each 1-d pass returns
//! the exact floating-point minimum, so the result is bitwise identical to a
//! brute-force minimum accumulated in the same order.

use rayon::prelude::*;

/// Output of [`inf_convolution`].
#[derive(Debug, Clone, PartialEq)]
pub struct InfConvolution {
    pub values: Vec<f64>,
    /// Flat index of the minimizing node for each node.
    pub argmin: Vec<usize>,
}

/// Per-axis cost coefficients `k * weight_a * h_a^2`.
pub fn axis_costs(k: f64, spacing: &[f64], weights: &[f64]) -> Vec<f64> {
    spacing.iter().zip(weights).map(|(h, w)| k * w * h * h).collect()
}

/// Row-major lattice transform; `shape[0]` is the slowest axis.
pub fn inf_convolution(values: &[f64], shape: &[usize], costs: &[f64]) -> InfConvolution {
    assert_eq!(shape.len(), costs.len());
    assert_eq!(values.len(), shape.iter().product::<usize>());
    assert!(costs.iter().all(|&c| c > 0.0), "costs must be positive");
    let mut cur = values.to_vec();
    let mut arg: Vec<usize> = (0..values.len()).collect();
    for axis in 0..shape.len() {
        let n = shape[axis];
        let stride: usize = shape[axis + 1..].iter().product();
        let outer = values.len() / (n * stride);
        let c = costs[axis];
        // lines along `axis` are indexed by (o, s) with base o * n * stride + s
        let lines: Vec<(Vec<f64>, Vec<usize>)> = (0..outer * stride)
            .into_par_iter()
            .map_init(
                || (vec![0.0; n], Scratch::new(n)),
                |(f, scratch), line| {
                    let base = (line / stride) * n * stride + line % stride;
                    for i in 0..n {
                        f[i] = cur[base + i * stride];
                    }
                    let (vals, src) = envelope_1d(f, c, scratch);
                    let args = src.iter().map(|&q| arg[base + q * stride]).collect();
                    (vals, args)
                },
            )
            .collect();
        for (line, (vals, args)) in lines.into_iter().enumerate() {
            let base = (line / stride) * n * stride + line % stride;
            for i in 0..n {
                cur[base + i * stride] = vals[i];
                arg[base + i * stride] = args[i];
            }
        }
    }
    InfConvolution { values: cur, argmin: arg }
}

struct Scratch {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Self { v: vec![0; n], z: vec![0.0; n + 1] }
    }
}

#[inline]
fn parabola(f: &[f64], c: f64, p: usize, q: usize) -> f64 {
    let d = p as f64 - q as f64;
    f[q] + c * (d * d)
}

/// `min_q f[q] + c (p - q)^2` for every `p`, with the minimizing `q`
/// (lowest on ties).
fn envelope_1d(f: &[f64], c: f64, s: &mut Scratch) -> (Vec<f64>, Vec<usize>) {
    let n = f.len();
    let (v, z) = (&mut s.v, &mut s.z);
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + c * (q * q) as f64;
        loop {
            let r = v[k];
            let fr = f[r] + c * (r * r) as f64;
            let inter = (fq - fr) / (2.0 * c * (q - r) as f64);
            // z[0] = -inf stops the pop at k = 0
            if inter <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = inter;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let hull = k + 1;
    let mut out = vec![0.0; n];
    let mut src = vec![0usize; n];
    let mut k = 0;
    for p in 0..n {
        while k + 1 < hull && z[k + 1] < p as f64 {
            k += 1;
        }
        // the breakpoints carry rounding error, so let the neighbouring
        // parabolas compete as well
        let lo = k.saturating_sub(2);
        let hi = (k + 2).min(hull - 1);
        let mut best = f64::INFINITY;
        let mut best_q = usize::MAX;
        for &q in &v[lo..=hi] {
            let val = parabola(f, c, p, q);
            if val < best || (val == best && q < best_q) {
                best = val;
                best_q = q;
            }
        }
        out[p] = best;
        src[p] = best_q;
    }
    (out, src)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_1d(f: &[f64], c: f64) -> Vec<f64> {
        (0..f.len())
            .map(|p| (0..f.len()).map(|q| parabola(f, c, p, q)).fold(f64::INFINITY, f64::min))
            .collect()
    }

    #[test]
    fn constant_input_is_fixed() {
        let r = inf_convolution(&[2.5; 12], &[3, 4], &[0.7, 1.3]);
        assert!(r.values.iter().all(|&v| v == 2.5));
        assert_eq!(r.argmin, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn one_dimensional_matches_brute_force() {
        let f: Vec<f64> = (0..57).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3 + (i as f64 * 0.7).sin()).collect();
        for c in [1e-4, 0.01, 0.5, 3.0, 100.0] {
            let mut s = Scratch::new(f.len());
            let (v, _) = envelope_1d(&f, c, &mut s);
            assert_eq!(v, brute_1d(&f, c));
        }
    }

    #[test]
    fn single_node_line() {
        let r = inf_convolution(&[1.0, 2.0], &[1, 2], &[1.0, 10.0]);
        assert_eq!(r.values, vec![1.0, 2.0]);
    }
}
