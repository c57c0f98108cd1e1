//! Smooth-surface cache: `SMOOTH1\0`, then `eps, k, delta`, the grid header,
//! an optional B box, and the node values (all little-endian).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{BoxSet, SmoothParams, SmoothSurface};
use crate::hjb::io::{get_f64, get_u64, put_f64, put_u64, read_grid, write_grid};
use crate::hjb::HjbError;

const MAGIC: &[u8; 8] = b"SMOOTH1\0";

pub fn write_smooth(path: &Path, s: &SmoothSurface) -> Result<(), HjbError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_smooth_to(&mut w, s)?;
    w.flush()?;
    Ok(())
}

pub(crate) fn write_smooth_to(w: &mut impl Write, s: &SmoothSurface) -> Result<(), HjbError> {
    w.write_all(MAGIC)?;
    let p = s.params();
    put_f64(w, p.eps)?;
    put_f64(w, p.k)?;
    put_f64(w, p.delta)?;
    write_grid(w, s.grid())?;
    match s.b_set() {
        Some(b) => {
            w.write_all(&[1])?;
            put_f64(w, b.t_lo)?;
            put_f64(w, b.t_hi)?;
            for (lo, hi) in b.lo.iter().zip(&b.hi) {
                put_f64(w, *lo)?;
                put_f64(w, *hi)?;
            }
        }
        None => w.write_all(&[0])?,
    }
    put_u64(w, s.node_values().len() as u64)?;
    for &v in s.node_values() {
        put_f64(w, v)?;
    }
    Ok(())
}

pub fn read_smooth(path: &Path) -> Result<SmoothSurface, HjbError> {
    read_smooth_from(&mut BufReader::new(File::open(path)?))
}

pub(crate) fn read_smooth_from(r: &mut impl Read) -> Result<SmoothSurface, HjbError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(HjbError::Format("not a SMOOTH1 file".into()));
    }
    let params = SmoothParams { eps: get_f64(r)?, k: get_f64(r)?, delta: get_f64(r)? };
    if !(params.delta > 0.0) {
        return Err(HjbError::Format(format!("delta {} in header", params.delta)));
    }
    let grid = read_grid(r)?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let b_set = match flag[0] {
        0 => None,
        1 => {
            let (t_lo, t_hi) = (get_f64(r)?, get_f64(r)?);
            let (mut lo, mut hi) = (Vec::new(), Vec::new());
            for _ in 0..grid.dim() {
                lo.push(get_f64(r)?);
                hi.push(get_f64(r)?);
            }
            Some(BoxSet { t_lo, t_hi, lo, hi })
        }
        f => return Err(HjbError::Format(format!("B flag {f}"))),
    };
    let n = get_u64(r)? as usize;
    if n != grid.n_nodes() {
        return Err(HjbError::Format(format!("{n} values for {} nodes", grid.n_nodes())));
    }
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(get_f64(r)?);
    }
    Ok(SmoothSurface::from_parts(params, grid, values, b_set))
}
