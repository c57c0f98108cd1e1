//! Gnuplot-ready TSV: `#` comment headers, tab-separated columns, blank
//! lines between blocks. Floats use the shortest round-trip form.

use std::io::{self, Write};

use hedgegame::hjb::{GridSpec, SurfaceField, ValueSurface};
use hedgegame::regularize::EpsPoint;

fn header(w: &mut impl Write, cols: &[String]) -> io::Result<()> {
    writeln!(w, "# {}", cols.join("\t"))
}

fn axis_names(d: usize) -> Vec<String> {
    if d == 1 {
        vec!["x".into()]
    } else {
        (0..d).map(|j| format!("x{j}")).collect()
    }
}

/// `v(t0, x)` at every spatial node of `grid`.
pub fn value_slice(w: &mut impl Write, field: &dyn SurfaceField, grid: &GridSpec, t0: f64) -> io::Result<()> {
    let d = grid.dim();
    let mut cols = axis_names(d);
    cols.push("value".into());
    header(w, &cols)?;
    let view = field.at_time(t0);
    let mut x = vec![0.0; d];
    for s in 0..grid.n_space() {
        grid.node_x(s, &mut x);
        for xj in &x {
            write!(w, "{xj:?}\t")?;
        }
        writeln!(w, "{:?}", view.value(&x))?;
    }
    Ok(())
}

/// Worst-case adverse index at every node; one block per time layer.
pub fn policy_map(w: &mut impl Write, s: &ValueSurface) -> io::Result<()> {
    let g = s.grid();
    let d = g.dim();
    let mut cols = vec!["t".to_string()];
    cols.extend(axis_names(d));
    cols.push("a_index".into());
    header(w, &cols)?;
    let ns = g.n_space();
    let mut x = vec![0.0; d];
    for n in 0..g.n_t() {
        if n > 0 {
            writeln!(w)?;
        }
        let t = g.t_at(n);
        for sidx in 0..ns {
            g.node_x(sidx, &mut x);
            write!(w, "{t:?}")?;
            for xj in &x {
                write!(w, "\t{xj:?}")?;
            }
            writeln!(w, "\t{}", s.policy_indices()[n * ns + sidx])?;
        }
    }
    Ok(())
}

pub const HIST_BINS: usize = 20;

/// Counts of `shortfalls` in `HIST_BINS` equal bins over `[0, max]`; the
/// rows sum to the number of samples, non-finite ones on a final `nan` row.
pub fn histogram(shortfalls: &[f64]) -> (Vec<(f64, f64, usize)>, usize) {
    let finite: Vec<f64> = shortfalls.iter().copied().filter(|v| v.is_finite()).collect();
    let bad = shortfalls.len() - finite.len();
    let top = finite.iter().copied().fold(0.0f64, f64::max);
    if top <= 0.0 {
        return (vec![(0.0, 0.0, finite.len())], bad);
    }
    let width = top / HIST_BINS as f64;
    let mut counts = vec![0usize; HIST_BINS];
    for v in finite {
        let b = ((v.max(0.0) / width) as usize).min(HIST_BINS - 1);
        counts[b] += 1;
    }
    let rows = counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (i as f64 * width, if i + 1 == HIST_BINS { top } else { (i + 1) as f64 * width }, c))
        .collect();
    (rows, bad)
}

/// One block per adversary: `bin_lo bin_hi count`.
pub fn shortfall_histograms(w: &mut impl Write, blocks: &[(String, Vec<f64>)]) -> io::Result<()> {
    header(w, &["bin_lo".into(), "bin_hi".into(), "count".into()])?;
    for (i, (label, data)) in blocks.iter().enumerate() {
        if i > 0 {
            writeln!(w)?;
            writeln!(w)?;
        }
        writeln!(w, "# adversary {label}")?;
        let (rows, bad) = histogram(data);
        for (lo, hi, c) in rows {
            writeln!(w, "{lo:?}\t{hi:?}\t{c}")?;
        }
        if bad > 0 {
            writeln!(w, "nan\tnan\t{bad}")?;
        }
    }
    Ok(())
}

/// `max_B (w_eps - w_0)` against `eps`, in ladder order.
pub fn eps_curve(w: &mut impl Write, curve: &[EpsPoint]) -> io::Result<()> {
    header(w, &["eps".into(), "max_B(w_eps-w_0)".into()])?;
    for p in curve {
        writeln!(w, "{:?}\t{:?}", p.eps, p.c_b)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(f: impl FnOnce(&mut Vec<u8>) -> io::Result<()>) -> String {
        let mut buf = Vec::new();
        f(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn constant_slice_has_a_constant_second_column() {
        let g = GridSpec::uniform_1d(1.0, 10, 0.0, 1.0, 8);
        let s = ValueSurface::from_fn(g.clone(), |_, _| 2.5).unwrap();
        let out = text(|w| value_slice(w, &s, &g, 0.3));
        let rows: Vec<&str> = out.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows.len(), 9);
        for r in rows {
            let cols: Vec<&str> = r.split('\t').collect();
            assert_eq!(cols.len(), 2);
            assert_eq!(cols[1], "2.5");
        }
    }

    #[test]
    fn histogram_counts_every_path() {
        let data: Vec<f64> = (0..1000).map(|i| if i % 3 == 0 { 0.0 } else { (i as f64).sqrt() * 1e-3 }).collect();
        let (rows, bad) = histogram(&data);
        assert_eq!(rows.iter().map(|r| r.2).sum::<usize>() + bad, 1000);
        let mut with_nan = data.clone();
        with_nan.push(f64::NAN);
        let out = text(|w| shortfall_histograms(w, &[("worst".into(), with_nan)]));
        let total: usize = out
            .lines()
            .filter(|l| !l.starts_with('#') && !l.is_empty())
            .map(|l| l.rsplit('\t').next().unwrap().parse::<usize>().unwrap())
            .sum();
        assert_eq!(total, 1001);
    }

    #[test]
    fn zero_shortfalls_fill_one_bin() {
        let (rows, bad) = histogram(&[0.0; 17]);
        assert_eq!(rows, vec![(0.0, 0.0, 17)]);
        assert_eq!(bad, 0);
    }

    #[test]
    fn eps_curve_keeps_ladder_order() {
        let c = [EpsPoint { eps: 0.1, c_b: 0.2 }, EpsPoint { eps: 0.05, c_b: 0.1 }];
        assert_eq!(text(|w| eps_curve(w, &c)), "# eps\tmax_B(w_eps-w_0)\n0.1\t0.2\n0.05\t0.1\n");
    }
}
