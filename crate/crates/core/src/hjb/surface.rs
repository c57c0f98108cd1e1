//! Read-only views shared by grid surfaces and smooth surfaces.

use super::{GridSpec, LayerView, ValueSurface};
use crate::model::{DerivativePack, MAX_DIM};

/// A function on `[t0, t1] x box` with first and second derivatives.
pub trait SurfaceField: Send + Sync {
    fn dim(&self) -> usize;
    fn t_range(&self) -> (f64, f64);
    fn x_bounds(&self) -> (Vec<f64>, Vec<f64>);
    /// Slice at time `t` (clamped into the time range). Building a view may
    /// be expensive; evaluating it is cheap.
    fn at_time(&self, t: f64) -> Box<dyn TimeView + '_>;
}

/// A fixed-time slice of a [`SurfaceField`]. Points must lie in the box.
pub trait TimeView: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    fn pack(&self, x: &[f64]) -> DerivativePack;
}

/// Feedback choice of the adverse control.
pub trait PolicySource: Send + Sync {
    fn policy_view(&self, t: f64) -> Box<dyn PolicyView + '_>;
}

pub trait PolicyView: Send + Sync {
    /// Index into the model's adverse points.
    fn policy(&self, x: &[f64]) -> usize;
}

struct GridTimeView<'a> {
    lo: LayerView<'a>,
    hi: LayerView<'a>,
    w: f64,
    dt: f64,
    dim: usize,
}

impl TimeView for GridTimeView<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let (a, b) = (self.lo.value(x), self.hi.value(x));
        (1.0 - self.w) * a + self.w * b
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let (_, ga, _) = self.lo.pack_parts(x);
        let (_, gb, _) = self.hi.pack_parts(x);
        for j in 0..self.dim {
            out[j] = ga[j] + self.w * (gb[j] - ga[j]);
        }
    }

    fn pack(&self, x: &[f64]) -> DerivativePack {
        let d = self.dim;
        let (va, ga, ma) = self.lo.pack_parts(x);
        let (vb, gb, mb) = self.hi.pack_parts(x);
        let w = self.w;
        DerivativePack {
            y: (1.0 - w) * va + w * vb,
            q: (vb - va) / self.dt,
            p: (0..d).map(|j| ga[j] + w * (gb[j] - ga[j])).collect(),
            m: (0..d * d).map(|j| ma[j] + w * (mb[j] - ma[j])).collect(),
        }
    }
}

impl SurfaceField for ValueSurface {
    fn dim(&self) -> usize {
        self.grid().dim()
    }

    fn t_range(&self) -> (f64, f64) {
        (self.grid().t_start, self.grid().t_end)
    }

    fn x_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.grid().x_min.clone(), self.grid().x_max.clone())
    }

    fn at_time(&self, t: f64) -> Box<dyn TimeView + '_> {
        let g = self.grid();
        let (n, w) = g.locate_t(t.clamp(g.t_start, g.t_end));
        Box::new(GridTimeView { lo: self.layer_view(n), hi: self.layer_view(n + 1), w, dt: g.dt(), dim: g.dim() })
    }
}

struct GridPolicyView<'a> {
    grid: &'a GridSpec,
    layer: &'a [u16],
}

impl PolicyView for GridPolicyView<'_> {
    fn policy(&self, x: &[f64]) -> usize {
        let g = self.grid;
        let mut idx = [0usize; MAX_DIM];
        for j in 0..g.dim() {
            let (i, w) = g.locate_x(j, x[j]);
            idx[j] = if w > 0.5 { i + 1 } else { i };
        }
        self.layer[g.ravel(&idx[..g.dim()])] as usize
    }
}

impl PolicySource for ValueSurface {
    /// Policy of the nearest node.
    fn policy_view(&self, t: f64) -> Box<dyn PolicyView + '_> {
        let g = self.grid();
        let (n, w) = g.locate_t(t.clamp(g.t_start, g.t_end));
        let n = if w > 0.5 { n + 1 } else { n };
        let ns = g.n_space();
        Box::new(GridPolicyView { grid: g, layer: &self.policy_indices()[n * ns..(n + 1) * ns] })
    }
}
