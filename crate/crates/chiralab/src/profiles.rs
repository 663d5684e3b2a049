//! Continuum transition paths and their lattice samples.
//!
//! A path is described analytically by a [`PathModel`] which evaluates `u(t)` and
//! `u'(t)` at any time; a [`ContinuumProfile`] carries a uniform sampling of it.

use std::f64::consts::{PI, TAU};

use crate::energies::ModelParams;
use crate::error::{param, Result};
use crate::geometry::{
    antipodal_axis, e1, e3, frame_for, rotation_between, rotation_exp, skew, Boundary, Rotation, SpinChain, Vec3,
};
use nalgebra::Matrix3;

/// Default step of analytic profile samplings.
pub const DEFAULT_H: f64 = 1e-3;
/// Default truncation of tanh profiles.
pub const DEFAULT_T_SPAN: f64 = 12.0;

/// `10s³ − 15s⁴ + 6s⁵` on `[0,1]`, clamped outside. Returns value and two derivatives.
pub fn ramp(s: f64) -> (f64, f64, f64) {
    if s <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if s >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    let s2 = s * s;
    (
        s2 * s * (10.0 - 15.0 * s + 6.0 * s2),
        30.0 * s2 * (1.0 - s) * (1.0 - s),
        60.0 * s * (1.0 - s) * (1.0 - 2.0 * s),
    )
}

/// `t − 6t³ + 8t⁴ − 3t⁵`: zero at both ends with `φ'(0) = 1` and vanishing
/// second derivatives, first derivative zero at `1`.
fn kick(t: f64) -> (f64, f64) {
    let t2 = t * t;
    (t - 6.0 * t2 * t + 8.0 * t2 * t2 - 3.0 * t2 * t2 * t, 1.0 - 18.0 * t2 + 32.0 * t2 * t - 15.0 * t2 * t2)
}

/// `log cosh t` without overflow.
fn log_cosh(t: f64) -> f64 {
    let a = t.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Odd speed functions `f` with primitive `F(t) = ∫₀ᵗ f`.
#[derive(Debug, Clone)]
pub enum SpeedFn {
    Tanh,
    /// `tanh` on `[0, t_eps]`, a cubic on `(t_eps, t_eps + eps)`, `1` afterwards.
    Soft { t_eps: f64, eps: f64, coeffs: [f64; 4] },
    /// Piecewise linear nodal values on `t_lo + j h`, continued by `sign(t)` outside.
    Sampled { t_lo: f64, h: f64, v: Vec<f64>, prim: Vec<f64> },
}

impl SpeedFn {
    pub fn soft(eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps < 0.5) {
            return param(format!("epsilon must lie in (0, 1/2), got {eps}"));
        }
        let t_eps = soft_t_eps(eps);
        let a = t_eps.tanh();
        let m0 = 1.0 - a * a;
        // Hermite cubic in s = t − t_eps: p(0)=a, p'(0)=m0, p(eps)=1, p'(eps)=0
        let d = 1.0 - a;
        let c2 = (3.0 * d - 2.0 * m0 * eps) / (eps * eps);
        let c3 = (m0 * eps - 2.0 * d) / (eps * eps * eps);
        Ok(SpeedFn::Soft { t_eps, eps, coeffs: [a, m0, c2, c3] })
    }

    /// Build from odd-compatible nodal values (the node nearest `t = 0` should be 0).
    pub fn sampled(t_lo: f64, h: f64, v: Vec<f64>) -> Self {
        let mut prim = vec![0.0; v.len()];
        for j in 1..v.len() {
            prim[j] = prim[j - 1] + 0.5 * h * (v[j - 1] + v[j]);
        }
        // shift so that F(0) = 0
        let j0 = ((-t_lo) / h).round().clamp(0.0, (v.len() - 1) as f64) as usize;
        let off = prim[j0];
        for p in prim.iter_mut() {
            *p -= off;
        }
        SpeedFn::Sampled { t_lo, h, v, prim }
    }

    /// `(f(t), f'(t), F(t))`.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        match self {
            SpeedFn::Tanh => {
                let th = t.tanh();
                (th, 1.0 - th * th, log_cosh(t))
            }
            SpeedFn::Soft { t_eps, eps, coeffs } => {
                let sg = if t < 0.0 { -1.0 } else { 1.0 };
                let a = t.abs();
                let (f, df, fp) = if a <= *t_eps {
                    let th = a.tanh();
                    (th, 1.0 - th * th, log_cosh(a))
                } else {
                    let base = log_cosh(*t_eps);
                    let [c0, c1, c2, c3] = *coeffs;
                    let cub = |s: f64| c0 * s + c1 * s * s / 2.0 + c2 * s * s * s / 3.0 + c3 * s * s * s * s / 4.0;
                    if a < t_eps + eps {
                        let s = a - t_eps;
                        (c0 + c1 * s + c2 * s * s + c3 * s * s * s, c1 + 2.0 * c2 * s + 3.0 * c3 * s * s, base + cub(s))
                    } else {
                        (1.0, 0.0, base + cub(*eps) + (a - t_eps - eps))
                    }
                };
                (sg * f, df, fp)
            }
            SpeedFn::Sampled { t_lo, h, v, prim } => {
                let n = v.len();
                let x = (t - t_lo) / h;
                if x <= 0.0 {
                    let f = v[0];
                    return (f, 0.0, prim[0] + f * (t - t_lo));
                }
                if x >= (n - 1) as f64 {
                    let f = v[n - 1];
                    return (f, 0.0, prim[n - 1] + f * (t - t_lo - (n - 1) as f64 * h));
                }
                let j = (x.floor() as usize).min(n - 2);
                let s = t - (t_lo + j as f64 * h);
                let slope = (v[j + 1] - v[j]) / h;
                (v[j] + slope * s, slope, prim[j] + v[j] * s + 0.5 * slope * s * s)
            }
        }
    }
}

/// Smallest `t` with `1 − tanh t ≤ ε` and `8/3 − 4(tanh t − tanh³t/3) ≤ ε`.
fn soft_t_eps(eps: f64) -> f64 {
    let ok = |t: f64| {
        let th = t.tanh();
        1.0 - th <= eps && 8.0 / 3.0 - 4.0 * (th - th * th * th / 3.0) <= eps
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while !ok(hi) {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

#[derive(Debug, Clone)]
pub struct BridgeData {
    r0: Rotation,
    gen: Vec3,
    a: Rotation,
    t0: f64,
    m0: f64,
    m1: f64,
    t_star: f64,
}

/// Analytic description of a continuum path.
#[derive(Debug, Clone)]
pub enum PathModel {
    /// `u(t) = R(cos(ωt + φ), sin(ωt + φ), 0)`, so `w = ω R e₃`.
    Rotation { frame: Rotation, speed: f64, phase: f64 },
    /// `u(t) = R₀ exp(γ(t/ρ)B)(cos t, sin t, 0)` with `B = [gen]×`.
    ZeroCost { frame: Rotation, gen: Vec3, rho: f64 },
    /// `R₋(cos(F+t₀), sin(F+t₀), 0)` for `t ≤ 0` and `R₊(…+t₁)` after, where
    /// `R₋e₃ = −q₋`, `R₊e₃ = q₊` and `F` is the primitive of an odd speed.
    Switched { minus: Rotation, plus: Rotation, t0: f64, t1: f64, speed: SpeedFn },
    Bridge(BridgeData),
    /// `exp(γ(t)π[e₁]×)(cos t, sin t, 0)` with `γ` stepping by one per half period.
    Oscillating { half_period: f64 },
    /// Samples with `w`; cubic Hermite inside, pure rotation continuation outside.
    Sampled { t_lo: f64, h: f64, u: Vec<Vec3>, w: Vec<Vec3> },
}

fn planar(ph: f64) -> (Vec3, Vec3) {
    let (s, c) = ph.sin_cos();
    (Vec3::new(c, s, 0.0), Vec3::new(-s, c, 0.0))
}

fn exp_gen(gen: &Vec3, s: f64) -> Matrix3<f64> {
    let ang = gen.norm() * s;
    if ang == 0.0 {
        return Matrix3::identity();
    }
    *rotation_exp(gen, ang).expect("nonzero generator").matrix()
}

fn rotate_about(u: &Vec3, w: &Vec3, t: f64) -> (Vec3, Vec3) {
    // u' = w × u, constant w ⟂ u
    let n = w.norm();
    if n == 0.0 {
        return (*u, Vec3::zeros());
    }
    let r = rotation_exp(w, n * t).expect("nonzero");
    let v = r.apply(u);
    (v, w.cross(&v))
}

impl PathModel {
    /// `(u(t), u'(t))`.
    pub fn eval(&self, t: f64) -> (Vec3, Vec3) {
        match self {
            PathModel::Rotation { frame, speed, phase } => {
                let (p, dp) = planar(speed * t + phase);
                (frame.apply(&p), frame.apply(&dp) * *speed)
            }
            PathModel::ZeroCost { frame, gen, rho } => {
                let (g, dg, _) = ramp(t / rho);
                let e = exp_gen(gen, g);
                let (v, dv) = planar(t);
                let ev = e * v;
                let du = gen.cross(&ev) * (dg / rho) + e * dv;
                (frame.apply(&ev), frame.apply(&du))
            }
            PathModel::Switched { minus, plus, t0, t1, speed } => {
                let (f, _, big_f) = speed.eval(t);
                let (r, ph) = if t <= 0.0 { (minus, big_f + t0) } else { (plus, big_f + t1) };
                let (p, dp) = planar(ph);
                (r.apply(&p), r.apply(&dp) * f)
            }
            PathModel::Bridge(b) => b.eval(t),
            PathModel::Oscillating { half_period } => {
                let x = t / half_period;
                let k = x.floor();
                let s = (x - k - 0.25) / 0.5;
                let (g, dg, _) = ramp(s);
                let gamma = k + g;
                let dgamma = dg / (0.5 * half_period);
                let gen = e1() * PI;
                let e = exp_gen(&gen, gamma);
                let (v, dv) = planar(t);
                let ev = e * v;
                (ev, gen.cross(&ev) * dgamma + e * dv)
            }
            PathModel::Sampled { t_lo, h, u, w } => {
                let n = u.len();
                let x = (t - t_lo) / h;
                if x <= 0.0 {
                    return rotate_about(&u[0], &w[0], t - t_lo);
                }
                if x >= (n - 1) as f64 {
                    return rotate_about(&u[n - 1], &w[n - 1], t - t_lo - (n - 1) as f64 * h);
                }
                let j = (x.floor() as usize).min(n - 2);
                let s = x - j as f64;
                let (p0, p1) = (u[j], u[j + 1]);
                let (m0, m1) = (w[j].cross(&p0) * *h, w[j + 1].cross(&p1) * *h);
                let (s2, s3) = (s * s, s * s * s);
                let p = p0 * (2.0 * s3 - 3.0 * s2 + 1.0)
                    + m0 * (s3 - 2.0 * s2 + s)
                    + p1 * (-2.0 * s3 + 3.0 * s2)
                    + m1 * (s3 - s2);
                let dp = (p0 * (6.0 * s2 - 6.0 * s) + m0 * (3.0 * s2 - 4.0 * s + 1.0) + p1 * (6.0 * s - 6.0 * s2)
                    + m1 * (3.0 * s2 - 2.0 * s))
                    / *h;
                let n = p.norm();
                let pu = p / n;
                (pu, (dp - pu * pu.dot(&dp)) / n)
            }
        }
    }
}

impl BridgeData {
    fn eval(&self, t: f64) -> (Vec3, Vec3) {
        let r0 = self.r0.matrix();
        let ra = r0 * self.a.matrix();
        if t <= 0.0 {
            let (p, dp) = planar((1.0 + self.m0) * t + self.t0);
            return (r0 * p, r0 * dp * (1.0 + self.m0));
        }
        if t <= 1.0 {
            let (k, dk) = kick(t);
            let (p, dp) = planar(t + self.m0 * k + self.t0);
            return (r0 * p, r0 * dp * (1.0 + self.m0 * dk));
        }
        if t <= 2.0 {
            let (g, dg, _) = ramp(t - 1.0);
            let e = exp_gen(&self.gen, g);
            let (v, dv) = planar(t + self.t0);
            let ev = e * v;
            return (r0 * ev, r0 * (self.gen.cross(&ev) * dg + e * dv));
        }
        if t <= 3.0 {
            let (k, dk) = kick(3.0 - t);
            let (p, dp) = planar(t - self.m1 * k + self.t0);
            return (ra * p, ra * dp * (1.0 + self.m1 * dk));
        }
        let (p, dp) = planar(3.0 + self.t0 + (1.0 + self.m1) * (t - 3.0));
        (ra * p, ra * dp * (1.0 + self.m1))
    }

    pub fn t_star(&self) -> f64 {
        self.t_star
    }
}

/// Uniform sampling of a path together with `w = u × u'`.
#[derive(Debug, Clone)]
pub struct ContinuumProfile {
    pub t_lo: f64,
    pub h: f64,
    pub u: Vec<Vec3>,
    pub w: Vec<Vec3>,
    pub model: PathModel,
}

impl ContinuumProfile {
    /// Sample `model` on `[t_lo, t_hi]` with step close to `h` (the interval is
    /// split into an integer number of cells).
    pub fn from_model(model: PathModel, t_lo: f64, t_hi: f64, h: f64) -> Result<Self> {
        if !(t_hi > t_lo) || !(h > 0.0) {
            return param("profile grid needs t_hi > t_lo and h > 0");
        }
        let cells = ((t_hi - t_lo) / h).round().max(1.0) as usize;
        let h = (t_hi - t_lo) / cells as f64;
        let mut u = Vec::with_capacity(cells + 1);
        let mut w = Vec::with_capacity(cells + 1);
        for j in 0..=cells {
            let (uj, du) = model.eval(t_lo + j as f64 * h);
            u.push(uj);
            w.push(uj.cross(&du));
        }
        Ok(Self { t_lo, h, u, w, model })
    }

    /// A profile known only through samples.
    pub fn from_samples(t_lo: f64, h: f64, u: Vec<Vec3>, w: Vec<Vec3>) -> Result<Self> {
        if u.len() != w.len() || u.len() < 2 || !(h > 0.0) {
            return param("samples need matching lengths >= 2 and h > 0");
        }
        let u: Vec<Vec3> = u.into_iter().map(|x| x.normalize()).collect();
        let model = PathModel::Sampled { t_lo, h, u: u.clone(), w: w.clone() };
        Ok(Self { t_lo, h, u, w, model })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn t_hi(&self) -> f64 {
        self.t_lo + (self.len() - 1) as f64 * self.h
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(move |j| self.t_lo + j as f64 * self.h)
    }

    /// `w` recomputed from `u` alone by central differences (one-sided at the ends).
    pub fn finite_difference_w(&self) -> Vec<Vec3> {
        let n = self.len();
        let h = self.h;
        (0..n)
            .map(|j| {
                let du = if j == 0 {
                    (-self.u[2] + self.u[1] * 4.0 - self.u[0] * 3.0) / (2.0 * h)
                } else if j == n - 1 {
                    (self.u[n - 3] - self.u[n - 2] * 4.0 + self.u[n - 1] * 3.0) / (2.0 * h)
                } else {
                    (self.u[j + 1] - self.u[j - 1]) / (2.0 * h)
                };
                self.u[j].cross(&du)
            })
            .collect()
    }
}

/// Intersection point of the circles `q₋^⊥` and `q₊^⊥` with nonnegative first
/// coordinate (ties: second, then third).
pub fn circle_intersection(q_minus: &Vec3, q_plus: &Vec3) -> Vec3 {
    let c = q_minus.cross(q_plus);
    let p = if c.norm() > 1e-12 { c.normalize() } else { antipodal_axis(q_minus) };
    let tol = 1e-14;
    let flip = if p.x.abs() > tol {
        p.x < 0.0
    } else if p.y.abs() > tol {
        p.y < 0.0
    } else {
        p.z < 0.0
    };
    if flip {
        -p
    } else {
        p
    }
}

fn planar_angle(r: &Rotation, p: &Vec3) -> f64 {
    let l = r.inverse().apply(p);
    l.y.atan2(l.x)
}

/// Switched-circle path joining `w = |f| q₋` to `w = |f| q₊` through `t = 0`.
pub fn switched_model(q_minus: &Vec3, q_plus: &Vec3, speed: SpeedFn) -> Result<PathModel> {
    let (qm, qp) = (q_minus.normalize(), q_plus.normalize());
    if (qm - qp).norm() < 1e-12 {
        return param("q_minus and q_plus must differ");
    }
    let p = circle_intersection(&qm, &qp);
    let minus = frame_for(&(-qm));
    let plus = frame_for(&qp);
    let t0 = planar_angle(&minus, &p);
    let t1 = planar_angle(&plus, &p);
    Ok(PathModel::Switched { minus, plus, t0, t1, speed })
}

/// The optimal hard profile `w = |tanh t| q∓` on `[−t_span/2, t_span/2]`.
pub fn tanh_profile(q_minus: &Vec3, q_plus: &Vec3, t_span: f64) -> Result<ContinuumProfile> {
    tanh_profile_h(q_minus, q_plus, t_span, DEFAULT_H)
}

pub fn tanh_profile_h(q_minus: &Vec3, q_plus: &Vec3, t_span: f64, h: f64) -> Result<ContinuumProfile> {
    if !(t_span > 0.0) {
        return param("t_span must be positive");
    }
    let model = switched_model(q_minus, q_plus, SpeedFn::Tanh)?;
    ContinuumProfile::from_model(model, -t_span / 2.0, t_span / 2.0, h)
}

/// Profile whose speed is `f_ε`, reaching `|w| = 1` exactly in finite time.
pub fn soft_profile(q1: &Vec3, q2: &Vec3, epsilon: f64) -> Result<ContinuumProfile> {
    let speed = SpeedFn::soft(epsilon)?;
    let half = match &speed {
        SpeedFn::Soft { t_eps, eps, .. } => t_eps + eps + 2.0,
        _ => unreachable!(),
    };
    let model = switched_model(q1, q2, speed)?;
    ContinuumProfile::from_model(model, -half, half, DEFAULT_H)
}

/// Rotating-axis transition from `w = z₁` (`t ≤ 0`) to `w = z₂` (`t ≥ ρ`).
pub fn zero_cost_model(z1: &Vec3, z2: &Vec3, rho: f64) -> Result<PathModel> {
    if !(rho >= 1.0) {
        return param(format!("rho must be >= 1, got {rho}"));
    }
    if (z1.norm() - 1.0).abs() > 1e-9 || (z2.norm() - 1.0).abs() > 1e-9 {
        return param("z1 and z2 must be unit vectors");
    }
    let frame = frame_for(z1);
    let target = frame.inverse().apply(z2);
    let (axis, angle) = rotation_between(&e3(), &target).axis_angle();
    Ok(PathModel::ZeroCost { frame, gen: axis * angle, rho })
}

/// Zero-cost profile sampled on `[−margin, ρ + margin]`.
pub fn zero_cost_profile(z1: &Vec3, z2: &Vec3, rho: f64, margin: f64, h: f64) -> Result<ContinuumProfile> {
    let model = zero_cost_model(z1, z2, rho)?;
    ContinuumProfile::from_model(model, -margin, rho + margin, h)
}

/// Three-segment bridge from `(u₀, w₀)` at `t = 0` to `(u₁, w₁)` at `t*`.
pub fn bridge_model(w0: &Vec3, w1: &Vec3, u0: &Vec3, u1: &Vec3, eta: f64) -> Result<BridgeData> {
    if !(eta > 0.0 && eta <= 0.25) {
        return param(format!("eta must lie in (0, 0.25], got {eta}"));
    }
    let (n0w, n1w) = (w0.norm(), w1.norm());
    if (n0w - 1.0).abs() > eta + 1e-12 || (n1w - 1.0).abs() > eta + 1e-12 || (w0 - w1).norm() > 2.0 * eta + 1e-12 {
        return param("w0 and w1 must lie within eta of a common unit vector");
    }
    if (u0.norm() - 1.0).abs() > 1e-9 || (u1.norm() - 1.0).abs() > 1e-9 {
        return param("u0 and u1 must be unit vectors");
    }
    if u0.dot(w0).abs() > 1e-9 * n0w || u1.dot(w1).abs() > 1e-9 * n1w {
        return param("u_i must be orthogonal to w_i");
    }
    let n0 = w0 / n0w;
    let n1 = w1 / n1w;
    let c = n0.cross(&n1);
    let x = if c.norm() > 1e-14 { c.normalize() } else { antipodal_axis(&n0) };
    let y = n0.cross(&x);
    let r0 = Rotation::from_matrix(Matrix3::from_columns(&[x, y, n0]), 1e-9)?;
    let a = rotation_between(&e3(), &r0.inverse().apply(&n1));
    let (axis, angle) = a.axis_angle();
    let gen = axis * angle;
    let t0 = planar_angle(&r0, u0);
    let psi1 = planar_angle(&r0.compose(&a), u1);
    let t_star = 3.0 + (psi1 - 3.0 - t0).rem_euclid(TAU) / n1w;
    Ok(BridgeData { r0, gen, a, t0, m0: n0w - 1.0, m1: n1w - 1.0, t_star })
}

pub fn bridge(w0: &Vec3, w1: &Vec3, u0: &Vec3, u1: &Vec3, eta: f64) -> Result<ContinuumProfile> {
    let b = bridge_model(w0, w1, u0, u1, eta)?;
    let t_star = b.t_star;
    ContinuumProfile::from_model(PathModel::Bridge(b), 0.0, t_star, DEFAULT_H)
}

/// `u^i = R(cos φi, sin φi, 0)` with `cos φ = 1 − δ`.
pub fn ground_helix(delta: f64, axis_rotation: &Rotation, n_sites: usize, lambda: f64) -> Result<SpinChain> {
    if !(delta > 0.0 && delta < 1.0) {
        return param(format!("delta must lie in (0,1), got {delta}"));
    }
    let phi = (1.0 - delta).acos();
    let spins = (0..n_sites)
        .map(|i| {
            let (s, c) = (phi * i as f64).sin_cos();
            axis_rotation.apply(&Vec3::new(c, s, 0.0))
        })
        .collect();
    SpinChain::new(spins, lambda, Boundary::PeriodicScalarProduct)
}

/// Lattice time of site `i`: `center + α√(2δ)(i − 1/(2λ))`.
pub fn lattice_time(i: usize, lambda: f64, delta: f64, center: f64) -> f64 {
    center + (1.0 - delta).acos() * (i as f64 - 0.5 / lambda)
}

/// Sample a path at the rescaled lattice times of `{i : λi ∈ [0,1]}`.
pub fn sample_model(model: &PathModel, lambda: f64, delta: f64, center: f64) -> Result<SpinChain> {
    let params = ModelParams::new(lambda, delta)?;
    if params.time_step() >= PI / 2.0 {
        return param("lattice time step must stay below pi/2");
    }
    let n = params.sites_on_unit_interval();
    let spins = (0..n).map(|i| model.eval(lattice_time(i, lambda, delta, center)).0).collect();
    let mut chain = SpinChain::new(spins, lambda, Boundary::Free)?;
    if chain.periodicity_defect() <= 1e-12 {
        chain.set_boundary(Boundary::PeriodicScalarProduct);
    }
    Ok(chain)
}

pub fn sample_to_lattice(profile: &ContinuumProfile, lambda: f64, delta: f64, center: f64) -> Result<SpinChain> {
    sample_model(&profile.model, lambda, delta, center)
}

/// Chain whose chirality alternates between `e₃` and `−e₃` with period `2η` in `x`.
pub fn oscillating_chain(eta: f64, params: &ModelParams) -> Result<SpinChain> {
    if !(eta > 0.0 && eta < 1.0) {
        return param(format!("eta must lie in (0,1), got {eta}"));
    }
    let dt = params.time_step();
    let half_period = eta * dt / params.lambda;
    if half_period < 2.0 * PI {
        return param("half period in rescaled time is shorter than one revolution; decrease lambda/sqrt(delta)");
    }
    let model = PathModel::Oscillating { half_period };
    let n = params.sites_on_unit_interval();
    let spins = (0..n).map(|i| model.eval(dt * i as f64).0).collect();
    SpinChain::new(spins, params.lambda, Boundary::Free)
}

/// `λ/√δ` relative to `η³` in [`oscillating_params`].
pub const OSC_LAMBDA_C: f64 = 0.02;

/// Parameters at which [`oscillating_chain`] has scaled energy of order `η`: each
/// transition costs `O(λ/(√δ η²))`, so `λ` shrinks like `η³`.
pub fn oscillating_params(eta: f64, delta: f64) -> Result<ModelParams> {
    if !(eta > 0.0 && eta < 1.0) {
        return param(format!("eta must lie in (0,1), got {eta}"));
    }
    ModelParams::new(OSC_LAMBDA_C * eta.powi(3) * delta.sqrt(), delta)
}

/// Skew matrix of `B` for a zero-cost model (tests and diagnostics).
pub fn generator_matrix(model: &PathModel) -> Option<Matrix3<f64>> {
    match model {
        PathModel::ZeroCost { gen, .. } => Some(skew(gen)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energies::{eval_hsl, eval_hsl_scaled};
    use crate::geometry::{chirality, e2};

    #[test]
    fn helix_examples() {
        let r = Rotation::identity();
        let h = ground_helix(0.02, &r, 50, 0.02).unwrap();
        for p in h.spins().windows(3) {
            assert!((p[0].dot(&p[1]) - 0.98).abs() < 1e-14);
            assert!((p[0].dot(&p[2]) - (2.0 * 0.98 * 0.98 - 1.0)).abs() < 1e-14);
        }
        let h = ground_helix(0.5, &r, 13, 0.1).unwrap();
        assert!((h.spins()[0] - h.spins()[12]).norm() < 1e-14);
        assert!(h.periodicity_defect() < 1e-15);
    }

    #[test]
    fn ramp_properties() {
        assert_eq!(ramp(0.0), (0.0, 0.0, 0.0));
        assert_eq!(ramp(1.0), (1.0, 0.0, 0.0));
        let (v, d, dd) = ramp(0.5);
        assert!((v - 0.5).abs() < 1e-15 && (d - 1.875).abs() < 1e-14 && dd.abs() < 1e-14);
        let h = 1e-6;
        for s in [0.1, 0.3, 0.77] {
            let fd = (ramp(s + h).0 - ramp(s - h).0) / (2.0 * h);
            assert!((fd - ramp(s).1).abs() < 1e-8);
            let fd2 = (ramp(s + h).1 - ramp(s - h).1) / (2.0 * h);
            assert!((fd2 - ramp(s).2).abs() < 1e-7);
        }
        let (k0, dk0) = kick(0.0);
        let (k1, dk1) = kick(1.0);
        assert!(k0 == 0.0 && dk0 == 1.0 && k1.abs() < 1e-15 && dk1.abs() < 1e-14);
    }

    fn check_derivative(model: &PathModel, ts: &[f64]) {
        let h = 1e-6;
        for &t in ts {
            let (u, du) = model.eval(t);
            assert!((u.norm() - 1.0).abs() < 1e-12);
            let fd = (model.eval(t + h).0 - model.eval(t - h).0) / (2.0 * h);
            assert!((fd - du).norm() < 1e-7, "t = {t}: {fd:?} vs {du:?}");
        }
    }

    #[test]
    fn analytic_derivatives() {
        let ts = [-3.1, -0.7, -1e-3, 0.4, 0.9, 1.3, 2.2, 2.9, 3.5, 7.0, 13.0];
        check_derivative(&zero_cost_model(&e3(), &e2(), 4.0).unwrap(), &ts);
        check_derivative(&zero_cost_model(&e3(), &(-e3()), 4.0).unwrap(), &ts);
        check_derivative(&switched_model(&e3(), &e2(), SpeedFn::Tanh).unwrap(), &ts);
        check_derivative(&switched_model(&e3(), &e1(), SpeedFn::soft(0.1).unwrap()).unwrap(), &ts);
        check_derivative(&PathModel::Oscillating { half_period: 8.0 }, &ts);
        let w0 = Vec3::new(0.03, 0.0, 1.04);
        let w1 = Vec3::new(0.0, -0.04, 0.97);
        let u0 = w0.cross(&e2()).normalize();
        let u1 = w1.cross(&e1()).normalize();
        let b = bridge_model(&w0, &w1, &u0, &u1, 0.1).unwrap();
        let tt: Vec<f64> = [0.3, 0.99, 1.01, 1.5, 2.01, 2.7, 3.2, b.t_star() - 0.1].to_vec();
        check_derivative(&PathModel::Bridge(b), &tt);
    }

    #[test]
    fn tanh_profile_examples() {
        let p = tanh_profile(&e3(), &e2(), DEFAULT_T_SPAN).unwrap();
        let mid = p.len() / 2;
        assert!(p.w[mid].norm() < 1e-15);
        assert!((p.u[mid].x.abs() - 1.0).abs() < 1e-12);
        for (t, w) in p.times().zip(&p.w) {
            let q = if t <= 0.0 { e3() } else { e2() };
            assert!((w - q * t.tanh().abs()).norm() < 1e-12);
        }
        assert!(tanh_profile(&e3(), &e3(), 12.0).is_err());
        // coinciding circles
        let p = tanh_profile(&e3(), &(-e3()), 12.0).unwrap();
        for (t, w) in p.times().zip(&p.w) {
            let q = if t <= 0.0 { e3() } else { -e3() };
            assert!((w - q * t.tanh().abs()).norm() < 1e-12);
        }
    }

    #[test]
    fn fd_w_is_second_order() {
        for model in [
            zero_cost_model(&e3(), &e2(), 4.0).unwrap(),
            switched_model(&e3(), &(-e3()), SpeedFn::Tanh).unwrap(),
            PathModel::Oscillating { half_period: 7.0 },
        ] {
            let err = |h: f64| {
                let p = ContinuumProfile::from_model(model.clone(), -2.0, 6.0, h).unwrap();
                p.finite_difference_w().iter().zip(&p.w).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
            };
            let (e1, e2) = (err(0.02), err(0.01));
            let ratio = e1 / e2;
            assert!(ratio > 3.5 && ratio < 4.5, "ratio {ratio}");
        }
    }

    #[test]
    fn zero_cost_tails_exact() {
        let m = zero_cost_model(&e3(), &e2(), 8.0).unwrap();
        let p = ContinuumProfile::from_model(m, -3.0, 11.0, 1e-2).unwrap();
        for (t, w) in p.times().zip(&p.w) {
            if t <= 0.0 {
                assert!((w - e3()).norm() < 1e-14);
            }
            if t >= 8.0 {
                assert!((w - e2()).norm() < 1e-14);
            }
        }
        assert!((p.w[0] - e3()).norm() < 1e-15);
        let same = zero_cost_model(&e3(), &e3(), 4.0).unwrap();
        assert_eq!(generator_matrix(&same).unwrap(), Matrix3::zeros());
        assert!(zero_cost_model(&e3(), &e2(), 0.5).is_err());
    }

    #[test]
    fn soft_speed() {
        let s = SpeedFn::soft(0.1).unwrap();
        let (t_eps, eps, coeffs) = match &s {
            SpeedFn::Soft { t_eps, eps, coeffs } => (*t_eps, *eps, *coeffs),
            _ => unreachable!(),
        };
        assert_eq!(s.eval(0.0).0, 0.0);
        let l = s.eval(t_eps - 1e-12);
        let r = s.eval(t_eps + 1e-12);
        assert!((l.0 - r.0).abs() < 1e-10 && (l.1 - r.1).abs() < 1e-9);
        let end = s.eval(t_eps + eps);
        assert!((end.0 - 1.0).abs() < 1e-12);
        // the cubic's slope stays below 2
        let [_, c1, c2, c3] = coeffs;
        let sup = (0..=10_000)
            .map(|k| {
                let x = eps * k as f64 / 10_000.0;
                (c1 + 2.0 * c2 * x + 3.0 * c3 * x * x).abs()
            })
            .fold(0.0, f64::max);
        assert!(sup <= 2.0, "{sup}");
        assert!((s.eval(-0.7).0 + s.eval(0.7).0).abs() < 1e-15);
        assert!(SpeedFn::soft(0.6).is_err());
    }

    #[test]
    fn sampled_speed_primitive() {
        let h = 0.01;
        let v: Vec<f64> = (0..=400).map(|j| (-2.0 + j as f64 * h).tanh()).collect();
        let s = SpeedFn::sampled(-2.0, h, v);
        for t in [-1.5, 0.3, 1.9] {
            let (f, _, big) = s.eval(t);
            assert!((f - t.tanh()).abs() < 1e-4);
            assert!((big - log_cosh(t)).abs() < 1e-4);
        }
    }

    #[test]
    fn bridge_endpoints() {
        let w0 = Vec3::new(0.05, 0.0, 1.0).normalize() * 1.05;
        let w1 = Vec3::new(0.0, 0.05, 1.0).normalize() * 0.96;
        let u0 = w0.cross(&e1()).normalize();
        let u1 = e1().cross(&w1).normalize();
        let b = bridge_model(&w0, &w1, &u0, &u1, 0.06).unwrap();
        let m = PathModel::Bridge(b.clone());
        let (a, da) = m.eval(0.0);
        assert!((a - u0).norm() < 1e-12 && (a.cross(&da) - w0).norm() < 1e-12);
        let (z, dz) = m.eval(b.t_star());
        assert!((z - u1).norm() < 1e-12, "{}", (z - u1).norm());
        assert!((z.cross(&dz) - w1).norm() < 1e-12);
        assert!(b.t_star() <= 3.0 + 4.0 * PI);
        assert!(bridge_model(&w0, &w1, &u0, &u1, 0.3).is_err());
        assert!(bridge_model(&w0, &w1, &w0.normalize(), &u1, 0.06).is_err());
    }

    #[test]
    fn lattice_sampling_of_rotation() {
        let m = PathModel::Rotation { frame: frame_for(&Vec3::new(1.0, 2.0, 3.0).normalize()), speed: 1.0, phase: 0.3 };
        for delta in [0.3, 0.01, 1e-4] {
            let c = sample_model(&m, 0.01, delta, 0.0).unwrap();
            for p in c.spins().windows(2) {
                assert!((p[0].dot(&p[1]) - (1.0 - delta)).abs() < 1e-12);
            }
            assert_eq!(*c.boundary(), Boundary::PeriodicScalarProduct);
            let params = ModelParams::new(0.01, delta).unwrap();
            assert!(eval_hsl(&c, &params).unwrap() < 1e-12);
        }
    }

    #[test]
    fn oscillating_chain_alternates() {
        let params = ModelParams::new(1e-4, 0.01).unwrap();
        let c = oscillating_chain(0.2, &params).unwrap();
        let z = chirality(&c, 0.01).unwrap();
        // plateaus: x = 0.05 (chirality e3) and x = 0.25 (chirality −e3)
        let at = |x: f64| z.values[(x / 1e-4) as usize];
        assert!((at(0.02).normalize() - e3()).norm() < 1e-6);
        assert!((at(0.22).normalize() + e3()).norm() < 1e-6);
        assert!((at(0.42).normalize() - e3()).norm() < 1e-6);
        assert!(z.mean_norm() > 0.9);
        let s = eval_hsl_scaled(&c, &params).unwrap();
        assert!(s.is_finite() && s > 0.0);
    }
}
