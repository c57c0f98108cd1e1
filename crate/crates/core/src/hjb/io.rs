//! Surface files: a binary cache (`HJBSURF1`) and a CSV dump.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{BoundaryMode, GridSpec, HjbError, SolveStats, ValueSurface};
use crate::model::MAX_DIM;

const MAGIC: &[u8; 8] = b"HJBSURF1";

pub(crate) fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn put_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn get_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn get_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Grid header shared by the surface caches.
pub(crate) fn write_grid(w: &mut impl Write, g: &GridSpec) -> std::io::Result<()> {
    put_u64(w, g.dim() as u64)?;
    put_u64(w, g.t_steps as u64)?;
    put_f64(w, g.t_start)?;
    put_f64(w, g.t_end)?;
    for j in 0..g.dim() {
        put_f64(w, g.x_min[j])?;
        put_f64(w, g.x_max[j])?;
        put_u64(w, g.x_steps[j] as u64)?;
    }
    w.write_all(&[match g.boundary_mode {
        BoundaryMode::ExtrapolateLinear => 0,
        BoundaryMode::ClampPayoff => 1,
    }])
}

pub(crate) fn read_grid(r: &mut impl Read) -> Result<GridSpec, HjbError> {
    let d = get_u64(r)? as usize;
    if d == 0 || d > MAX_DIM {
        return Err(HjbError::Format(format!("dimension {d} in header")));
    }
    let t_steps = get_u64(r)? as usize;
    let t_start = get_f64(r)?;
    let t_end = get_f64(r)?;
    let mut g = GridSpec::new(t_end, t_steps, vec![], vec![], vec![]).with_t_start(t_start);
    for _ in 0..d {
        g.x_min.push(get_f64(r)?);
        g.x_max.push(get_f64(r)?);
        g.x_steps.push(get_u64(r)? as usize);
    }
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    g.boundary_mode = match b[0] {
        0 => BoundaryMode::ExtrapolateLinear,
        1 => BoundaryMode::ClampPayoff,
        m => return Err(HjbError::Format(format!("boundary mode {m}"))),
    };
    g.validate()?;
    Ok(g)
}

pub fn write_surface(path: &Path, s: &ValueSurface) -> Result<(), HjbError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_surface_to(&mut w, s)?;
    w.flush()?;
    Ok(())
}

pub(crate) fn write_surface_to(w: &mut impl Write, s: &ValueSurface) -> Result<(), HjbError> {
    w.write_all(MAGIC)?;
    write_grid(w, s.grid())?;
    let hash = s.model_hash().as_bytes();
    put_u64(w, hash.len() as u64)?;
    w.write_all(hash)?;
    for &v in s.values() {
        put_f64(w, v)?;
    }
    for &p in s.policy_indices() {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_surface(path: &Path) -> Result<ValueSurface, HjbError> {
    let mut r = BufReader::new(File::open(path)?);
    read_surface_from(&mut r)
}

pub(crate) fn read_surface_from(r: &mut impl Read) -> Result<ValueSurface, HjbError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(HjbError::Format("not an HJBSURF1 file".into()));
    }
    let grid = read_grid(r)?;
    let hl = get_u64(r)? as usize;
    if hl > 1024 {
        return Err(HjbError::Format("model hash too long".into()));
    }
    let mut hash = vec![0u8; hl];
    r.read_exact(&mut hash)?;
    let hash = String::from_utf8(hash).map_err(|_| HjbError::Format("model hash not UTF-8".into()))?;
    let n = grid.n_nodes();
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(get_f64(r)?);
    }
    let mut policy = Vec::with_capacity(n);
    let mut b = [0u8; 2];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        policy.push(u16::from_le_bytes(b));
    }
    Ok(ValueSurface::from_parts(grid, values, policy, hash, SolveStats::default()))
}

/// Columns `t_index,t,x0..,value,policy_index`; floats use the shortest
/// round-trip representation.
pub fn write_surface_csv(w: &mut impl Write, s: &ValueSurface) -> Result<(), HjbError> {
    let g = s.grid();
    let d = g.dim();
    let ns = g.n_space();
    write!(w, "t_index,t")?;
    for j in 0..d {
        write!(w, ",x{j}")?;
    }
    writeln!(w, ",value,policy_index")?;
    let mut x = [0.0; MAX_DIM];
    for n in 0..g.n_t() {
        let t = g.t_at(n);
        for sidx in 0..ns {
            g.node_x(sidx, &mut x[..d]);
            write!(w, "{n},{t:?}")?;
            for xj in &x[..d] {
                write!(w, ",{xj:?}")?;
            }
            let i = n * ns + sidx;
            writeln!(w, ",{:?},{}", s.values()[i], s.policy_indices()[i])?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip() {
        let g = GridSpec::new(1.0, 3, vec![-1.0, 0.0], vec![1.0, 2.0], vec![4, 2]).with_t_start(-0.5);
        let s = ValueSurface::from_fn(g, |t, x| t * x[0] + x[1].sin()).unwrap();
        let mut buf = Vec::new();
        write_surface_to(&mut buf, &s).unwrap();
        let back = read_surface_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.grid(), s.grid());
        assert_eq!(back.values(), s.values());
        assert_eq!(back.policy_indices(), s.policy_indices());
        buf[0] = b'X';
        assert!(read_surface_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn csv_layout() {
        let g = GridSpec::uniform_1d(1.0, 1, 0.0, 1.0, 2);
        let s = ValueSurface::from_fn(g, |_, x| x[0]).unwrap();
        let mut buf = Vec::new();
        write_surface_csv(&mut buf, &s).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t_index,t,x0,value,policy_index");
        assert_eq!(lines[1], "0,0.0,-1.0,-1.0,0");
        assert_eq!(lines.len(), 7);
    }
}
