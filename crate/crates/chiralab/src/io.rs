//! Columnar text formats for chains and profiles.
//!
//! Numbers are written with 17 significant digits so that reading back gives the
//! same bits. Lines starting with `#` are comments, except the profile grid header.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::profiles::{ContinuumProfile, PathModel};

const UNIT_TOL: f64 = 1e-9;

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn parse_row(line: &str, ln: usize, cols: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|tok| tok.parse::<f64>().map_err(|e| parse_err(ln, format!("{tok:?}: {e}"))))
        .collect::<Result<_>>()?;
    if vals.len() != cols {
        return Err(parse_err(ln, format!("expected {cols} columns, found {}", vals.len())));
    }
    if let Some(v) = vals.iter().find(|v| !v.is_finite()) {
        return Err(parse_err(ln, format!("non-finite value {v}")));
    }
    Ok(vals)
}

fn unit_checked(v: Vec3, ln: usize) -> Result<Vec3> {
    if (v.norm() - 1.0).abs() > UNIT_TOL {
        return Err(parse_err(ln, format!("spin has norm {}", v.norm())));
    }
    Ok(v)
}

/// One site per line: `u₁ u₂ u₃`.
pub fn write_chain(spins: &[Vec3]) -> String {
    let mut s = String::with_capacity(spins.len() * 72);
    for u in spins {
        let _ = writeln!(s, "{} {} {}", fmt(u.x), fmt(u.y), fmt(u.z));
    }
    s
}

pub fn parse_chain(text: &str) -> Result<Vec<Vec3>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v = parse_row(line, i + 1, 3)?;
        out.push(unit_checked(Vec3::new(v[0], v[1], v[2]), i + 1)?);
    }
    if out.is_empty() {
        return Err(parse_err(0, "no sites"));
    }
    Ok(out)
}

const GRID_HEADER: &str = "# grid";

/// `t u₁ u₂ u₃ w₁ w₂ w₃` per line, after a `# grid t_lo h` header.
pub fn write_profile(p: &ContinuumProfile) -> String {
    let mut s = String::with_capacity(p.len() * 170);
    let _ = writeln!(s, "{GRID_HEADER} {} {}", fmt(p.t_lo), fmt(p.h));
    for (j, (u, w)) in p.u.iter().zip(&p.w).enumerate() {
        let t = p.t_lo + j as f64 * p.h;
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {}",
            fmt(t),
            fmt(u.x),
            fmt(u.y),
            fmt(u.z),
            fmt(w.x),
            fmt(w.y),
            fmt(w.z)
        );
    }
    s
}

/// Without a grid header the step is inferred from the first and last times, which
/// must be uniformly spaced.
pub fn parse_profile(text: &str) -> Result<ContinuumProfile> {
    let mut grid = None;
    let mut ts = Vec::new();
    let mut u = Vec::new();
    let mut w = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let line = line.trim();
        if let Some(rest) = line.strip_prefix(GRID_HEADER) {
            let v = parse_row(rest, ln, 2)?;
            if !(v[1] > 0.0) {
                return Err(parse_err(ln, "grid step must be positive"));
            }
            grid = Some((v[0], v[1]));
            continue;
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v = parse_row(line, ln, 7)?;
        ts.push((v[0], ln));
        u.push(unit_checked(Vec3::new(v[1], v[2], v[3]), ln)?);
        w.push(Vec3::new(v[4], v[5], v[6]));
    }
    if u.len() < 2 {
        return Err(parse_err(0, "a profile needs at least two samples"));
    }
    let n = ts.len();
    let (t_lo, h) = grid.unwrap_or((ts[0].0, (ts[n - 1].0 - ts[0].0) / (n - 1) as f64));
    if !(h > 0.0) {
        return Err(parse_err(ts[1].1, "times must increase"));
    }
    for (j, &(t, ln)) in ts.iter().enumerate() {
        let expect = t_lo + j as f64 * h;
        if (t - expect).abs() > 1e-9 * h.max(expect.abs()) {
            return Err(parse_err(ln, format!("time {t} off the uniform grid (expected {expect})")));
        }
    }
    let model = PathModel::Sampled { t_lo, h, u: u.clone(), w: w.clone() };
    Ok(ContinuumProfile { t_lo, h, u, w, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{e2, e3};
    use crate::profiles::tanh_profile_h;

    #[test]
    fn chain_round_trip() {
        let spins: Vec<Vec3> = (0..50).map(|i| Vec3::new((i as f64 * 0.37).cos(), (i as f64 * 0.37).sin(), 0.0)).collect();
        let back = parse_chain(&write_chain(&spins)).unwrap();
        assert_eq!(spins, back);
    }

    #[test]
    fn profile_round_trip() {
        let p = tanh_profile_h(&e3(), &e2(), 6.0, 0.01).unwrap();
        let text = write_profile(&p);
        assert_eq!(text.lines().nth(1).unwrap().split_whitespace().count(), 7);
        let q = parse_profile(&text).unwrap();
        assert_eq!((p.t_lo.to_bits(), p.h.to_bits()), (q.t_lo.to_bits(), q.h.to_bits()));
        assert_eq!(p.u, q.u);
        assert_eq!(p.w, q.w);
    }

    #[test]
    fn headerless_profile() {
        let text = "0 1 0 0 0 0 1\n0.5 1 0 0 0 0 1\n1.0 1 0 0 0 0 1\n";
        let p = parse_profile(text).unwrap();
        assert_eq!(p.h, 0.5);
    }

    #[test]
    fn parse_errors_carry_lines() {
        let bad = "1 0 0\n0 1 0\n0 x 1\n";
        assert!(matches!(parse_chain(bad), Err(Error::Parse { line: 3, .. })));
        let short = "# c\n1 0 0\n0 1\n";
        assert!(matches!(parse_chain(short), Err(Error::Parse { line: 3, .. })));
        let not_unit = "1 0 0\n2 0 0\n";
        assert!(matches!(parse_chain(not_unit), Err(Error::Parse { line: 2, .. })));
        let gap = "0 1 0 0 0 0 1\n0.5 1 0 0 0 0 1\n0.7 1 0 0 0 0 1\n1.5 1 0 0 0 0 1\n";
        assert!(matches!(parse_profile(gap), Err(Error::Parse { line: 3, .. })));
    }
}
