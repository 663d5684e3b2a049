//! Axis sets `Q_k`, the constraint set `M_k` and zero-homogeneous penalties `G`.

use std::fmt;
use std::sync::Arc;

use crate::error::{param, Result};
use crate::geometry::{distance_to_circle, frame_for, Rotation, Vec3};

/// `|w|` below this counts as `w = 0`, where `G` vanishes.
pub const G_DEADBAND: f64 = 1e-8;

pub type DirectionFn = Arc<dyn Fn(&Vec3) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum PenaltyFn {
    /// Chordal distance of `z/|z|` to `Q_k`.
    DistToQk,
    /// User function of the normalized direction. Must vanish on `Q_k`.
    Custom(DirectionFn),
}

impl fmt::Debug for PenaltyFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PenaltyFn::DistToQk => write!(f, "DistToQk"),
            PenaltyFn::Custom(_) => write!(f, "Custom"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PenaltySpec {
    axes: Vec<Vec3>,
    g: PenaltyFn,
    weight: f64,
}

impl PenaltySpec {
    pub fn dist_to_qk(axes: Vec<Vec3>) -> Result<Self> {
        Self::build(axes, PenaltyFn::DistToQk)
    }

    pub fn custom(axes: Vec<Vec3>, g: DirectionFn) -> Result<Self> {
        let spec = Self::build(axes, PenaltyFn::Custom(g))?;
        for q in spec.q_set() {
            let v = spec.g(&q);
            if v.abs() > 1e-12 {
                return param(format!("custom G must vanish on Q_k, got {v:.3e}"));
            }
        }
        Ok(spec)
    }

    fn build(axes: Vec<Vec3>, g: PenaltyFn) -> Result<Self> {
        if axes.is_empty() {
            return param("penalty needs at least one axis");
        }
        let mut unit = Vec::with_capacity(axes.len());
        for a in axes {
            let n = a.norm();
            if !(n > 0.0) {
                return param("axes must be nonzero");
            }
            unit.push(a / n);
        }
        for i in 0..unit.len() {
            for j in 0..i {
                let d = (unit[i] - unit[j]).norm().min((unit[i] + unit[j]).norm());
                if d < 1e-9 {
                    return param(format!("axes {j} and {i} coincide up to sign"));
                }
            }
        }
        Ok(Self { axes: unit, g, weight: 1.0 })
    }

    /// Same axes with `G` replaced by `factor · G`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self { weight: self.weight * factor, ..self.clone() }
    }

    pub fn axes(&self) -> &[Vec3] {
        &self.axes
    }

    pub fn k(&self) -> usize {
        self.axes.len()
    }

    /// `Q_k = {±q_l}` ordered `+q₁, −q₁, +q₂, −q₂, …`.
    pub fn q_set(&self) -> Vec<Vec3> {
        self.axes.iter().flat_map(|q| [*q, -*q]).collect()
    }

    fn nearest_q(&self, d: &Vec3) -> (Vec3, f64) {
        let mut best = (self.axes[0], f64::INFINITY);
        for q in &self.axes {
            for s in [*q, -*q] {
                let dist = (d - s).norm();
                if dist < best.1 {
                    best = (s, dist);
                }
            }
        }
        best
    }

    /// `G(z)`, zero-homogeneous with `G(0) = 0`.
    pub fn g(&self, z: &Vec3) -> f64 {
        let n = z.norm();
        if n < G_DEADBAND {
            return 0.0;
        }
        let d = z / n;
        self.weight
            * match &self.g {
                PenaltyFn::DistToQk => self.nearest_q(&d).1,
                PenaltyFn::Custom(f) => f(&d),
            }
    }

    /// Gradient of `G` at `z`. Zero on the deadband and on `Q_k` itself.
    pub fn grad_g(&self, z: &Vec3) -> Vec3 {
        let n = z.norm();
        if n < G_DEADBAND {
            return Vec3::zeros();
        }
        let d = z / n;
        let gd = match &self.g {
            PenaltyFn::DistToQk => {
                let (q, dist) = self.nearest_q(&d);
                if dist < 1e-14 {
                    return Vec3::zeros();
                }
                (d - q) / dist
            }
            PenaltyFn::Custom(f) => {
                // central differences in the ambient space, the projection below
                // removes the radial part
                let h = 1e-6;
                let mut g = Vec3::zeros();
                for k in 0..3 {
                    let mut p = d;
                    let mut m = d;
                    p[k] += h;
                    m[k] -= h;
                    g[k] = (f(&p.normalize()) - f(&m.normalize())) / (2.0 * h);
                }
                g
            }
        };
        // d/dz of z/|z| is (I − d dᵀ)/|z|
        self.weight * (gd - d * d.dot(&gd)) / n
    }

    /// Distance from `z/|z|` to the set where `DistToQk` fails to be smooth
    /// (the points of `Q_k` and the boundaries between their Voronoi cells).
    pub fn kink_distance(&self, z: &Vec3) -> f64 {
        let n = z.norm();
        if n < G_DEADBAND {
            return 0.0;
        }
        let d = z / n;
        let mut ds: Vec<f64> = self.q_set().iter().map(|q| (d - q).norm()).collect();
        ds.sort_by(|a, b| a.total_cmp(b));
        ds[0].min(ds[1] - ds[0])
    }

    /// Nearest circle `q_l^⊥ ∩ S²` to `u`: (label, chordal distance).
    pub fn nearest_circle(&self, u: &Vec3) -> (usize, f64) {
        self.axes
            .iter()
            .enumerate()
            .map(|(l, q)| (l, distance_to_circle(u, q)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
    }

    /// Frame `R_l` with `R_l e₃ = q_l`; circle `l` is `{R_l(cos t, sin t, 0)}`.
    pub fn circle_frame(&self, l: usize) -> Rotation {
        frame_for(&self.axes[l])
    }

    /// Intersection points `±(q_l × q_m)/|q_l × q_m|` of distinct circles.
    pub fn intersections(&self) -> Vec<(usize, usize, Vec3)> {
        let mut out = Vec::new();
        for l in 0..self.k() {
            for m in 0..self.k() {
                if l == m {
                    continue;
                }
                let c = self.axes[l].cross(&self.axes[m]);
                let n = c.norm();
                if n > 1e-12 {
                    out.push((l, m, c / n));
                    out.push((l, m, -c / n));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{e1, e2, e3};

    #[test]
    fn dist_to_qk_values() {
        let p = PenaltySpec::dist_to_qk(vec![e3()]).unwrap();
        assert_eq!(p.g(&e3()), 0.0);
        assert_eq!(p.g(&(-e3() * 4.0)), 0.0);
        assert_eq!(p.g(&Vec3::zeros()), 0.0);
        assert!((p.g(&e1()) - 2f64.sqrt()).abs() < 1e-15);
        // zero-homogeneous
        let z = Vec3::new(0.3, -0.2, 0.9);
        assert!((p.g(&z) - p.g(&(z * 7.5))).abs() < 1e-15);
        assert!((p.scaled(2.0).g(&z) - 2.0 * p.g(&z)).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        assert!(PenaltySpec::dist_to_qk(vec![]).is_err());
        assert!(PenaltySpec::dist_to_qk(vec![e1(), -e1()]).is_err());
        let bad: DirectionFn = Arc::new(|_d| 1.0);
        assert!(PenaltySpec::custom(vec![e1()], bad).is_err());
        let ok: DirectionFn = Arc::new(|d| 1.0 - d.x * d.x);
        assert!(PenaltySpec::custom(vec![e1()], ok).is_ok());
    }

    #[test]
    fn gradient_matches_differences() {
        let p = PenaltySpec::dist_to_qk(vec![e3(), e1()]).unwrap();
        let f: DirectionFn = Arc::new(|d| 1.0 - d.z * d.z);
        let c = PenaltySpec::custom(vec![e3()], f).unwrap();
        let z = Vec3::new(0.3, 0.5, 0.7);
        for spec in [&p, &c] {
            let g = spec.grad_g(&z);
            let h = 1e-6;
            for k in 0..3 {
                let mut a = z;
                let mut b = z;
                a[k] += h;
                b[k] -= h;
                let fd = (spec.g(&a) - spec.g(&b)) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-7, "{k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn circles_and_intersections() {
        let p = PenaltySpec::dist_to_qk(vec![e3(), e2()]).unwrap();
        let (l, d) = p.nearest_circle(&e1());
        assert!(d < 1e-15 && l == 0);
        let pts = p.intersections();
        assert!(pts.iter().all(|(_, _, x)| (x.x.abs() - 1.0).abs() < 1e-15));
        let r = p.circle_frame(1);
        assert!((r.apply(&e3()) - e2()).norm() < 1e-15);
    }
}
