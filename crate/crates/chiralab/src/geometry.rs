//! Spin configurations, the chirality map and SO(3) helpers.

use nalgebra::{Matrix3, Unit, Vector3};

use crate::error::{param, Error, Result};

pub type Vec3 = Vector3<f64>;

/// Drift from unit norm above this is logged when renormalizing.
pub const DRIFT_WARN: f64 = 1e-9;

pub fn e1() -> Vec3 {
    Vec3::x()
}
pub fn e2() -> Vec3 {
    Vec3::y()
}
pub fn e3() -> Vec3 {
    Vec3::z()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Boundary {
    Free,
    /// `(u¹,u⁰) = (u^{N-1},u^{N-2})`.
    PeriodicScalarProduct,
    /// Chirality pins `z⁰` and `z^{N-2}`, realised by freezing two spins per end.
    PinnedChirality { left: Vec3, right: Vec3 },
}

#[derive(Debug, Clone)]
pub struct SpinChain {
    spins: Vec<Vec3>,
    spacing: f64,
    boundary: Boundary,
}

fn normalize_all(spins: &mut [Vec3]) -> f64 {
    let mut drift = 0.0f64;
    for u in spins.iter_mut() {
        let n = u.norm();
        drift = drift.max((n - 1.0).abs());
        *u /= n;
    }
    if drift > DRIFT_WARN {
        log::debug!("renormalized spins, max drift {drift:.3e}");
    }
    drift
}

impl SpinChain {
    pub fn new(mut spins: Vec<Vec3>, spacing: f64, boundary: Boundary) -> Result<Self> {
        if spins.len() < 3 {
            return Err(Error::Dimension(format!(
                "chain needs at least 3 sites, got {}",
                spins.len()
            )));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return param(format!("spacing must be positive, got {spacing}"));
        }
        if spins.iter().any(|u| !(u.norm() > 0.0) || !u.iter().all(|x| x.is_finite())) {
            return param("spins must be finite and nonzero");
        }
        normalize_all(&mut spins);
        Ok(Self { spins, spacing, boundary })
    }

    pub fn len(&self) -> usize {
        self.spins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spins.is_empty()
    }

    pub fn spins(&self) -> &[Vec3] {
        &self.spins
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn boundary(&self) -> &Boundary {
        &self.boundary
    }

    pub fn set_boundary(&mut self, boundary: Boundary) {
        self.boundary = boundary;
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.boundary = boundary;
        self
    }

    /// Pin the current end chiralities (first two and last two spins).
    pub fn pinned(self, delta: f64) -> Self {
        let n = self.len();
        let s = (2.0 * delta).sqrt();
        let left = self.spins[0].cross(&self.spins[1]) / s;
        let right = self.spins[n - 2].cross(&self.spins[n - 1]) / s;
        self.with_boundary(Boundary::PinnedChirality { left, right })
    }

    pub fn is_pinned(&self) -> bool {
        matches!(self.boundary, Boundary::PinnedChirality { .. })
    }

    pub fn set_spin(&mut self, i: usize, u: Vec3) {
        self.spins[i] = u.normalize();
    }

    /// Raw mutable access; callers must call [`SpinChain::renormalize`] afterwards.
    pub fn spins_mut(&mut self) -> &mut [Vec3] {
        &mut self.spins
    }

    /// Project every spin back to the sphere, returning the largest drift seen.
    pub fn renormalize(&mut self) -> f64 {
        normalize_all(&mut self.spins)
    }

    /// `|(u¹,u⁰) − (u^{N−1},u^{N−2})|`.
    pub fn periodicity_defect(&self) -> f64 {
        let n = self.len();
        (self.spins[1].dot(&self.spins[0]) - self.spins[n - 1].dot(&self.spins[n - 2])).abs()
    }

    /// Rotate the second spin of each end pair so both end inner products agree.
    pub fn project_periodic(&mut self) {
        let n = self.len();
        let c0 = self.spins[0].dot(&self.spins[1]).clamp(-1.0, 1.0);
        let c1 = self.spins[n - 2].dot(&self.spins[n - 1]).clamp(-1.0, 1.0);
        let target = 0.5 * (c0 + c1);
        let a = self.spins[0];
        self.spins[1] = set_inner(a, self.spins[1], target);
        let b = self.spins[n - 2];
        self.spins[n - 1] = set_inner(b, self.spins[n - 1], target);
    }

    pub fn rotated(&self, r: &Rotation) -> Self {
        let spins = self.spins.iter().map(|u| r.apply(u)).collect();
        let boundary = match &self.boundary {
            Boundary::PinnedChirality { left, right } => Boundary::PinnedChirality {
                left: r.apply(left),
                right: r.apply(right),
            },
            b => b.clone(),
        };
        Self { spins, spacing: self.spacing, boundary }
    }

    /// `w^i = u^i × u^{i+1}`.
    pub fn cross_products(&self) -> Vec<Vec3> {
        self.spins.windows(2).map(|p| p[0].cross(&p[1])).collect()
    }
}

/// Move `v` inside the plane spanned by `a` and `v` so that `(a, v) = c`.
pub(crate) fn set_inner(a: Vec3, v: Vec3, c: f64) -> Vec3 {
    let perp = v - a * a.dot(&v);
    let pn = perp.norm();
    if pn < 1e-300 {
        return v;
    }
    let s = (1.0 - c * c).max(0.0).sqrt();
    (a * c + perp / pn * s).normalize()
}

#[derive(Debug, Clone)]
pub struct SpinField2D {
    spins: Vec<Vec3>,
    nx: usize,
    ny: usize,
    spacing: f64,
    row_periodic: bool,
}

impl SpinField2D {
    /// Row-major storage: site `(ix, iy)` lives at `iy * nx + ix`.
    pub fn new(mut spins: Vec<Vec3>, nx: usize, ny: usize, spacing: f64, row_periodic: bool) -> Result<Self> {
        if spins.len() != nx * ny {
            return Err(Error::Dimension(format!(
                "expected {} spins for a {nx}x{ny} grid, got {}",
                nx * ny,
                spins.len()
            )));
        }
        if !(spacing > 0.0) {
            return param("spacing must be positive");
        }
        normalize_all(&mut spins);
        Ok(Self { spins, nx, ny, spacing, row_periodic })
    }

    /// Copy a chain into every row.
    pub fn extend_constant(chain: &SpinChain, ny: usize) -> Result<Self> {
        let nx = chain.len();
        let mut spins = Vec::with_capacity(nx * ny);
        for _ in 0..ny {
            spins.extend_from_slice(chain.spins());
        }
        let periodic = matches!(chain.boundary(), Boundary::PeriodicScalarProduct);
        Self::new(spins, nx, ny, chain.spacing(), periodic)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn spacing(&self) -> f64 {
        self.spacing
    }
    pub fn row_periodic(&self) -> bool {
        self.row_periodic
    }
    pub fn spins(&self) -> &[Vec3] {
        &self.spins
    }
    pub fn spins_mut(&mut self) -> &mut [Vec3] {
        &mut self.spins
    }
    pub fn renormalize(&mut self) -> f64 {
        normalize_all(&mut self.spins)
    }

    #[inline]
    pub fn at(&self, ix: usize, iy: usize) -> Vec3 {
        self.spins[iy * self.nx + ix]
    }

    pub fn row(&self, iy: usize) -> &[Vec3] {
        &self.spins[iy * self.nx..(iy + 1) * self.nx]
    }

    pub fn row_chain(&self, iy: usize) -> Result<SpinChain> {
        SpinChain::new(self.row(iy).to_vec(), self.spacing, Boundary::Free)
    }

    /// Largest per-row violation of the sliced scalar-product condition.
    pub fn periodicity_defect(&self) -> f64 {
        let n = self.nx;
        (0..self.ny)
            .map(|m| {
                let r = self.row(m);
                (r[1].dot(&r[0]) - r[n - 1].dot(&r[n - 2])).abs()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct ChiralityField {
    pub values: Vec<Vec3>,
    pub delta: f64,
}

impl ChiralityField {
    pub fn mean(&self) -> Vec3 {
        let n = self.values.len() as f64;
        self.values.iter().fold(Vec3::zeros(), |a, z| a + z) / n
    }

    pub fn mean_norm(&self) -> f64 {
        crate::sum::csum(self.values.iter().map(|z| z.norm())) / self.values.len() as f64
    }
}

/// `z^i = (u^i × u^{i+1}) / √(2δ)`.
pub fn chirality(chain: &SpinChain, delta: f64) -> Result<ChiralityField> {
    if !(delta > 0.0) {
        return param(format!("delta must be positive, got {delta}"));
    }
    let s = (2.0 * delta).sqrt();
    let values = chain.spins().windows(2).map(|p| p[0].cross(&p[1]) / s).collect();
    Ok(ChiralityField { values, delta })
}

/// `θ^i = arccos (u^i, u^{i+1})` with the inner product clamped to `[-1, 1]`.
pub fn angles(chain: &SpinChain) -> Vec<f64> {
    chain
        .spins()
        .windows(2)
        .map(|p| p[0].dot(&p[1]).clamp(-1.0, 1.0).acos())
        .collect()
}

pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wrap a matrix, checking orthogonality and orientation to `tol`.
    pub fn from_matrix(m: Matrix3<f64>, tol: f64) -> Result<Self> {
        let r = Rotation(m);
        if r.orthogonality_defect() > tol || (m.determinant() - 1.0).abs() > tol {
            return param("matrix is not a rotation");
        }
        Ok(r)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    #[inline]
    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }

    pub fn inverse(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn orthogonality_defect(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).abs().max()
    }

    /// Principal logarithm as (unit axis, angle in [0, π]); axis is `e₃` for the identity.
    pub fn axis_angle(&self) -> (Vec3, f64) {
        let m = &self.0;
        let v = Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
        let c = 0.5 * (m.trace() - 1.0);
        let sn = 0.5 * v.norm();
        let angle = sn.atan2(c);
        if sn > 1e-6 || c > 0.0 {
            if sn == 0.0 {
                return (e3(), 0.0);
            }
            return (v / (2.0 * sn), angle);
        }
        // near π the antisymmetric part vanishes; read the axis off (R + I)/2 ≈ aaᵀ
        let p = (m + Matrix3::identity()) * 0.5;
        let k = (0..3).max_by(|&a, &b| p[(a, a)].total_cmp(&p[(b, b)])).unwrap_or(0);
        let mut a = p.column(k).into_owned().normalize();
        if a.dot(&v) < 0.0 {
            a = -a;
        }
        (a, angle)
    }

    /// Antisymmetric generator `B` with `exp(B) = self`.
    pub fn log(&self) -> Matrix3<f64> {
        let (axis, angle) = self.axis_angle();
        skew(&(axis * angle))
    }

    /// `exp(s B)` where `B = self.log()`.
    pub fn powf(&self, s: f64) -> Rotation {
        let (axis, angle) = self.axis_angle();
        rodrigues(&axis, s * angle)
    }
}

fn rodrigues(axis: &Vec3, angle: f64) -> Rotation {
    let k = skew(axis);
    let (s, c) = angle.sin_cos();
    Rotation(Matrix3::identity() + k * s + k * k * (1.0 - c))
}

/// Rotation by `angle` about `axis` (Rodrigues' formula). The axis is normalized.
pub fn rotation_exp(axis: &Vec3, angle: f64) -> Result<Rotation> {
    let n = axis.norm();
    if !(n > 0.0) || !n.is_finite() {
        return param("rotation axis must be nonzero");
    }
    Ok(rodrigues(&(axis / n), angle))
}

/// Minimal rotation taking `a` to `b`. Antipodal pairs rotate by π about the part of
/// `e₁` orthogonal to `a` (or of `e₂` when `|(a,e₁)| > 0.9`).
pub fn rotation_between(a: &Vec3, b: &Vec3) -> Rotation {
    let a = a.normalize();
    let b = b.normalize();
    let c = a.dot(&b);
    let v = a.cross(&b);
    let s = v.norm();
    if s < 1e-14 {
        if c > 0.0 {
            return Rotation::identity();
        }
        let axis = antipodal_axis(&a);
        return rodrigues(&axis, std::f64::consts::PI);
    }
    rodrigues(&(v / s), s.atan2(c))
}

/// Axis used for half-turns taking `a` to `−a`.
pub fn antipodal_axis(a: &Vec3) -> Vec3 {
    let pick = if a.x.abs() > 0.9 { e2() } else { e1() };
    (pick - a * a.dot(&pick)).normalize()
}

/// Some rotation `R` with `R e₃ = n`.
pub fn frame_for(n: &Vec3) -> Rotation {
    rotation_between(&e3(), n)
}

/// Unit vector along an axis, for nalgebra interop.
pub fn unit(v: Vec3) -> Unit<Vec3> {
    Unit::new_normalize(v)
}

/// `4|b−a|² − |b−a|⁴ − 4(1 − (a,b)²)`.
pub fn order4_residual(a: &Vec3, b: &Vec3) -> f64 {
    let d2 = (b - a).norm_squared();
    let c = a.dot(b);
    4.0 * d2 - d2 * d2 - 4.0 * (1.0 - c * c)
}

/// `|u²−u⁰|² − |w¹+w⁰|² − (cos θ¹ − cos θ⁰)²` for three consecutive spins.
pub fn rodrigues_residual(u0: &Vec3, u1: &Vec3, u2: &Vec3) -> f64 {
    let w0 = u0.cross(u1);
    let w1 = u1.cross(u2);
    let dc = u1.dot(u2) - u0.dot(u1);
    (u2 - u0).norm_squared() - (w1 + w0).norm_squared() - dc * dc
}

/// `(a×b, b×c) − ((a,b)(b,c) − (a,c))` for unit `b`.
pub fn cross_inner_residual(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    a.cross(b).dot(&b.cross(c)) - (a.dot(b) * b.dot(c) - a.dot(c))
}

/// Chordal distance from `u` to the great circle `q^⊥ ∩ S²`.
pub fn distance_to_circle(u: &Vec3, q: &Vec3) -> f64 {
    let c = u.dot(q).clamp(-1.0, 1.0);
    (2.0 - 2.0 * (1.0 - c * c).sqrt()).max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    pub(crate) fn random_unit(rng: &mut impl Rng) -> Vec3 {
        loop {
            let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                return v / n;
            }
        }
    }

    fn chain(spins: Vec<Vec3>) -> SpinChain {
        SpinChain::new(spins, 0.1, Boundary::Free).unwrap()
    }

    #[test]
    fn chirality_examples() {
        let c = chain(vec![e3(); 4]);
        let z = chirality(&c, 0.1).unwrap();
        assert_eq!(z.values.len(), 3);
        assert!(z.values.iter().all(|v| v.norm() == 0.0));

        let c = chain(vec![e1(), e2(), e3()]);
        let z = chirality(&c, 0.5).unwrap();
        assert!((z.values[0] - e3()).norm() < 1e-15);
        assert!(chirality(&c, 0.0).is_err());
        assert!(chirality(&c, -1.0).is_err());
    }

    #[test]
    fn helix_chirality_norm() {
        let delta: f64 = 0.02;
        let phi = (1.0 - delta).acos();
        let spins = (0..20).map(|i| Vec3::new((phi * i as f64).cos(), (phi * i as f64).sin(), 0.0)).collect();
        let z = chirality(&chain(spins), delta).unwrap();
        // sin φ / √(2δ) computed directly
        let expect = phi.sin() / (2.0 * delta).sqrt();
        assert!((expect - 0.99f64.sqrt()).abs() < 1e-12);
        for v in &z.values {
            assert!((v.norm() - expect).abs() < 1e-12);
            assert!((v.normalize() - e3()).norm() < 1e-12);
        }
    }

    #[test]
    fn angle_examples() {
        let c = chain(vec![e1(), e1(), -e1(), e2()]);
        let a = angles(&c);
        assert_eq!(a[0], 0.0);
        assert!((a[1] - PI).abs() < 1e-15);
        assert!((a[2] - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn chain_validation() {
        assert!(SpinChain::new(vec![e1(), e2()], 0.1, Boundary::Free).is_err());
        assert!(SpinChain::new(vec![e1(); 3], 0.0, Boundary::Free).is_err());
        assert!(SpinChain::new(vec![e1(), Vec3::zeros(), e2()], 0.1, Boundary::Free).is_err());
        let c = SpinChain::new(vec![e1() * 2.0, e2(), e3()], 0.1, Boundary::Free).unwrap();
        assert!((c.spins()[0].norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rotation_examples() {
        let r = rotation_exp(&e1(), 0.0).unwrap();
        assert_eq!(*r.matrix(), Matrix3::identity());
        let r = rotation_exp(&e3(), PI).unwrap();
        assert!((r.apply(&e1()) + e1()).norm() < 1e-15);
        let r = rotation_exp(&e1(), PI / 2.0).unwrap();
        let explicit = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        assert!((r.matrix() - explicit).abs().max() < 1e-15);
        assert!((r.apply(&e2()) - e3()).norm() < 1e-15);
        assert!(rotation_exp(&Vec3::zeros(), 1.0).is_err());
    }

    #[test]
    fn rotation_between_examples() {
        assert_eq!(rotation_between(&e3(), &e3()), Rotation::identity());
        let r = rotation_between(&e3(), &e2());
        assert!((r.apply(&e3()) - e2()).norm() < 1e-15);
        let expect = rotation_exp(&e1(), -PI / 2.0).unwrap();
        assert!((r.matrix() - expect.matrix()).abs().max() < 1e-15);
        let r = rotation_between(&e1(), &(-e1()));
        assert!((r.apply(&e1()) + e1()).norm() < 1e-15);
        assert!(r.orthogonality_defect() < 1e-15);
        // |(e1, e1)| > 0.9 so the axis falls back to e2
        let (axis, angle) = r.axis_angle();
        assert!((axis.dot(&e2()).abs() - 1.0).abs() < 1e-12);
        assert!((angle - PI).abs() < 1e-12);
        let r = rotation_between(&e3(), &(-e3()));
        let (axis, _) = r.axis_angle();
        assert!((axis.dot(&e1()).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_properties_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let a = random_unit(&mut rng);
            let b = random_unit(&mut rng);
            let th = rng.random_range(-4.0..4.0);
            let r = rotation_exp(&a, th).unwrap();
            let prod = r.compose(&rotation_exp(&a, -th).unwrap());
            assert!((prod.matrix() - Matrix3::identity()).abs().max() < 1e-12);
            assert!(r.orthogonality_defect() < 1e-12);
            assert!((r.matrix().determinant() - 1.0).abs() < 1e-12);
            let rb = rotation_between(&a, &b);
            assert!((rb.apply(&a) - b).norm() < 1e-12);
            // principal log round trip
            let (ax, an) = rb.axis_angle();
            let back = rotation_exp(&ax, an).unwrap();
            assert!((back.matrix() - rb.matrix()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn identities_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let a = random_unit(&mut rng);
            let b = random_unit(&mut rng);
            let c = random_unit(&mut rng);
            assert!(order4_residual(&a, &b).abs() < 1e-12);
            assert!(rodrigues_residual(&a, &b, &c).abs() < 1e-12);
            assert!(cross_inner_residual(&a, &b, &c).abs() < 1e-12);
        }
    }

    #[test]
    fn helix_cross_products() {
        // u(s) = R(cos s, sin s, 0) has u × u' = R e3 and u(s1) × u(s2) = sin(s2 − s1) R e3
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = rotation_between(&e3(), &random_unit(&mut rng));
        let w = r.apply(&e3());
        let u = |s: f64| r.apply(&Vec3::new(s.cos(), s.sin(), 0.0));
        for _ in 0..500 {
            let s1: f64 = rng.random_range(-5.0..5.0);
            let s2: f64 = rng.random_range(-5.0..5.0);
            let lhs = u(s1).cross(&u(s2));
            assert!((lhs - w * (s2 - s1).sin()).norm() < 1e-12);
        }
        // finite-difference w on the sampled path
        let h = 1e-4;
        let s = 0.3;
        let fd = u(s).cross(&((u(s + h) - u(s - h)) / (2.0 * h)));
        assert!((fd - w).norm() < 1e-8);
    }

    #[test]
    fn periodic_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spins: Vec<Vec3> = (0..10).map(|_| random_unit(&mut rng)).collect();
        let mut c = chain(spins);
        assert!(c.periodicity_defect() > 1e-6);
        c.project_periodic();
        assert!(c.periodicity_defect() < 1e-12);
        assert!(c.spins().iter().all(|u| (u.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn circle_distance() {
        assert!(distance_to_circle(&e1(), &e3()) < 1e-15);
        assert!((distance_to_circle(&e3(), &e3()) - 2f64.sqrt()).abs() < 1e-15);
    }
}
