//! Minimization of the discrete energies over sphere-valued chains and fields.
//!
//! Spins are updated by quasi-Newton steps projected onto the tangent planes and
//! retracted by renormalization; every accepted step satisfies an Armijo
//! condition. The `M_k`-constrained problem is solved over per-site circle angles.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::energies::{breakdown, nnn_residual, breakdown_2d, mk_violation, y_variation, EnergyBreakdown, ModelParams, TOL_MEMBERSHIP};
use crate::error::{param, Error, Result};
use crate::geometry::{set_inner, Boundary, SpinChain, SpinField2D, Vec3};
use crate::optim::{lbfgs, Banded5, LbfgsOptions, Objective, Stop};
use crate::penalty::PenaltySpec;
use crate::sum::CompensatedSum;

const LBFGS_MEMORY: usize = 12;
const MAX_SWITCH_ROUNDS: usize = 20;

#[derive(Debug, Clone)]
pub enum Mode {
    Free,
    HardMk(PenaltySpec),
    SoftG(PenaltySpec),
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Free => "free",
            Mode::HardMk(_) => "hard",
            Mode::SoftG(_) => "soft",
        }
    }
}

/// Chirality values imposed on `z⁰` and `z^{N−2}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pins {
    pub left: Vec3,
    pub right: Vec3,
}

/// Geometric temperature ladder for [`anneal`]. Temperatures are in scaled energy units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealSchedule {
    pub t_start: f64,
    pub t_end: f64,
    pub sweeps: usize,
    pub moves_per_site: usize,
    /// Typical proposal angle in radians.
    pub step: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self { t_start: 1e-2, t_end: 1e-6, sweeps: 50, moves_per_site: 2, step: 0.05 }
    }
}

#[derive(Debug, Clone)]
pub struct MinimizeOptions {
    pub max_iters: usize,
    /// Bound on the sup-norm of the Riemannian gradient of the scaled energy, taken per
    /// unit of rescaled time (divided by `arccos(1−δ)`, and by `λ` again on a 2D grid).
    pub grad_tol: f64,
    /// Largest per-site move of the first step.
    pub step_init: f64,
    pub mode: Mode,
    pub pin: Option<Pins>,
    pub seed: u64,
    pub anneal: Option<AnnealSchedule>,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self { max_iters: 20_000, grad_tol: 1e-6, step_init: 0.05, mode: Mode::Free, pin: None, seed: 0, anneal: None }
    }
}

impl MinimizeOptions {
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0) || self.max_iters < 1 || !(self.step_init > 0.0) {
            return param("options need grad_tol > 0, max_iters >= 1 and step_init > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeReport {
    pub final_energy: f64,
    pub scaled_energy: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub breakdown: EnergyBreakdown,
    /// The line search could not decrease the energy before the tolerance was met.
    pub line_search_failed: bool,
    /// `Σλ²|u^{i+e₂} − u^i|²` for 2D runs, zero otherwise.
    pub y_variation: f64,
}

// ---------- energy kernels (unscaled) ----------

/// `½λΣ|r_i|² + wΣG(u^i × u^{i+1})` and optionally its Euclidean gradient.
fn chain_energy(u: &[Vec3], lam: f64, del: f64, soft: Option<(&PenaltySpec, f64)>, grad: Option<&mut [Vec3]>) -> f64 {
    let n = u.len();
    let c = 2.0 * (1.0 - del);
    let mut e = CompensatedSum::new();
    let mut gp = CompensatedSum::new();
    let mut grad = grad;
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = Vec3::zeros());
    }
    for i in 0..n - 2 {
        let r = nnn_residual(&u[i], &u[i + 1], &u[i + 2], del);
        e.add(r.norm_squared());
        if let Some(g) = grad.as_deref_mut() {
            let lr = r * lam;
            g[i] += lr;
            g[i + 1] -= lr * c;
            g[i + 2] += lr;
        }
        if let Some((pen, w)) = soft {
            let z = u[i].cross(&u[i + 1]);
            gp.add(pen.g(&z));
            if let Some(g) = grad.as_deref_mut() {
                let dg = pen.grad_g(&z) * w;
                g[i] += u[i + 1].cross(&dg);
                g[i + 1] += dg.cross(&u[i]);
            }
        }
    }
    let pw = soft.map_or(0.0, |(_, w)| w);
    0.5 * lam * e.value() + pw * gp.value()
}

fn project_tangent(u: &[Vec3], g: &mut [Vec3]) {
    for (gi, ui) in g.iter_mut().zip(u) {
        *gi -= ui * ui.dot(gi);
    }
}

/// Projected gradient of the unscaled energy of `mode`: `H^sl`, `H^sl + μΣλG`, or
/// `H^sl` restricted to the tangent of each spin's nearest circle.
pub fn gradient(chain: &SpinChain, params: &ModelParams, mode: &Mode) -> Vec<Vec3> {
    let u = chain.spins();
    let mut g = vec![Vec3::zeros(); u.len()];
    let soft = match mode {
        Mode::SoftG(p) => Some((p, params.mu * params.lambda)),
        _ => None,
    };
    chain_energy(u, params.lambda, params.delta, soft, Some(&mut g));
    project_tangent(u, &mut g);
    if let Mode::HardMk(pen) = mode {
        for (gi, ui) in g.iter_mut().zip(u) {
            let (l, _) = pen.nearest_circle(ui);
            let t = pen.axes()[l].cross(ui);
            let tn = t.norm();
            *gi = if tn > 0.0 { t * (gi.dot(&t) / (tn * tn)) } else { Vec3::zeros() };
        }
    }
    g
}

/// Sup-norm of the scaled-energy gradient per unit rescaled time, the quantity
/// compared with `grad_tol`. Pinned end pairs are excluded.
pub fn grad_norm(chain: &SpinChain, params: &ModelParams, mode: &Mode) -> f64 {
    let g = gradient(chain, params, mode);
    let frozen = frozen_mask(chain.len(), chain.is_pinned());
    let sup = g.iter().zip(&frozen).filter(|(_, f)| !**f).fold(0.0f64, |m, (v, _)| m.max(v.norm()));
    sup / params.energy_scale() / params.time_step()
}

/// Energy of `mode` (unscaled); `HardMk` evaluates `H^sl` without a membership check.
pub fn mode_energy(chain: &SpinChain, params: &ModelParams, mode: &Mode) -> f64 {
    let soft = match mode {
        Mode::SoftG(p) => Some((p, params.mu * params.lambda)),
        _ => None,
    };
    chain_energy(chain.spins(), params.lambda, params.delta, soft, None)
}

// ---------- pins ----------

/// Rewrite the two end spins of each side so that `z⁰ = left` and `z^{N−2} = right`.
/// Requires `√(2δ)|z| ≤ 1`.
pub fn apply_pins(chain: &SpinChain, pins: &Pins, delta: f64) -> Result<SpinChain> {
    let s2d = (2.0 * delta).sqrt();
    let n = chain.len();
    let mut u = chain.spins().to_vec();
    let set = |a: Vec3, z: &Vec3| -> Result<(Vec3, Vec3)> {
        let sn = z.norm() * s2d;
        if !(sn <= 1.0) || sn == 0.0 {
            return param(format!("pin |z| = {} is not realisable at delta = {delta}", z.norm()));
        }
        let d = z / z.norm();
        let mut p = a - d * d.dot(&a);
        if p.norm() < 1e-8 {
            p = crate::geometry::antipodal_axis(&d);
            p -= d * d.dot(&p);
        }
        let p = p.normalize();
        let c = (1.0 - sn * sn).sqrt();
        Ok((p, p * c + d.cross(&p) * sn))
    };
    let (a, b) = set(u[0], &pins.left)?;
    u[0] = a;
    u[1] = b;
    let (a, b) = set(u[n - 2], &pins.right)?;
    u[n - 2] = a;
    u[n - 1] = b;
    SpinChain::new(u, chain.spacing(), Boundary::PinnedChirality { left: pins.left, right: pins.right })
}

/// Pins of unit chirality directions `q` and `q'` realised with the ground-state modulus
/// `|z| = √(1 − δ/2)`.
pub fn ground_pins(q_left: &Vec3, q_right: &Vec3, delta: f64) -> Pins {
    let m = (1.0 - delta / 2.0).sqrt();
    Pins { left: q_left.normalize() * m, right: q_right.normalize() * m }
}

fn frozen_mask(n: usize, pinned: bool) -> Vec<bool> {
    let mut m = vec![false; n];
    if pinned {
        for i in [0, 1, n - 2, n - 1] {
            m[i] = true;
        }
    }
    m
}

// ---------- preconditioning ----------

/// `weight · (AᵀA + τI)` for the stencil `(1, −c, 1)` on `n` sites, with identity
/// rows on frozen sites.
fn stencil_precond(n: usize, c: f64, frozen: &[bool], weight: f64, tau: f64) -> Banded5 {
    stencil_precond_2d(n, c, frozen, weight, 1.0, tau)
}

/// `weight · (s·AᵀA + diag·I)`.
fn stencil_precond_2d(n: usize, c: f64, frozen: &[bool], weight: f64, stencil_weight: f64, diag: f64) -> Banded5 {
    let mut a = vec![[0.0f64; 3]; n];
    let coef = [1.0, -c, 1.0];
    for i in 0..n - 2 {
        for j in 0..3 {
            for k in 0..=j {
                a[i + j][j - k] += stencil_weight * coef[j] * coef[k];
            }
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[0] += diag;
        for r in row.iter_mut() {
            *r *= weight;
        }
        if frozen[i] {
            *row = [1.0, 0.0, 0.0];
        }
    }
    for i in 0..n {
        for off in 1..=2 {
            if i + off < n && frozen[i] {
                a[i + off][off] = 0.0;
            }
        }
    }
    Banded5::factor(&a).expect("shifted stencil matrix is positive definite")
}

fn precond_shift(delta: f64) -> f64 {
    4.0 * delta * delta
}

// ---------- sphere objective ----------

fn to_vecs(x: &[f64]) -> Vec<Vec3> {
    x.chunks_exact(3).map(Vec3::from_column_slice).collect()
}

fn to_flat(u: &[Vec3]) -> Vec<f64> {
    u.iter().flat_map(|v| [v.x, v.y, v.z]).collect()
}

type EnergyFn<'a> = Box<dyn Fn(&[Vec3], Option<&mut [Vec3]>) -> f64 + 'a>;

struct SphereObjective<'a> {
    frozen: Vec<bool>,
    /// `(start, len)` of rows on which the end inner products are equalized.
    periodic_rows: Vec<(usize, usize)>,
    energy: EnergyFn<'a>,
    /// Per-row factors `(first site, factor)` applied componentwise.
    precond: Vec<(usize, Banded5)>,
    ymodes: Option<YModes>,
}

/// Preconditioner for a grid whose rows share one stencil and are coupled by a path
/// Laplacian in `y`: cosine transform in `y`, then one banded solve per mode.
struct YModes {
    nx: usize,
    ny: usize,
    // basis[k][iy], orthonormal
    basis: Vec<Vec<f64>>,
    factors: Vec<Banded5>,
}

impl YModes {
    fn new(nx: usize, ny: usize, c: f64, frozen_row: &[bool], weight: f64, shift: f64, j2: f64) -> Self {
        let basis = (0..ny)
            .map(|k| {
                let norm = if k == 0 { (1.0 / ny as f64).sqrt() } else { (2.0 / ny as f64).sqrt() };
                (0..ny).map(|j| norm * (PI * k as f64 * (j as f64 + 0.5) / ny as f64).cos()).collect()
            })
            .collect();
        let factors = (0..ny)
            .map(|k| {
                let mu = 2.0 - 2.0 * (PI * k as f64 / ny as f64).cos();
                stencil_precond_2d(nx, c, frozen_row, weight, 1.0, shift + j2 * mu)
            })
            .collect();
        Self { nx, ny, basis, factors }
    }

    fn apply(&self, v: &mut [f64]) {
        let (nx, ny) = (self.nx, self.ny);
        let mut modes = vec![0.0; v.len()];
        for (k, b) in self.basis.iter().enumerate() {
            for (iy, &bj) in b.iter().enumerate() {
                let (src, dst) = (&v[3 * iy * nx..3 * (iy + 1) * nx], &mut modes[3 * k * nx..3 * (k + 1) * nx]);
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += bj * s);
            }
        }
        for (k, f) in self.factors.iter().enumerate() {
            for comp in 0..3 {
                f.solve_strided(&mut modes, 3 * k * nx + comp, 3);
            }
        }
        v.iter_mut().for_each(|x| *x = 0.0);
        for (k, b) in self.basis.iter().enumerate() {
            for (iy, &bj) in b.iter().enumerate().take(ny) {
                let (src, dst) = (&modes[3 * k * nx..3 * (k + 1) * nx], &mut v[3 * iy * nx..3 * (iy + 1) * nx]);
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += bj * s);
            }
        }
    }
}

impl Objective for SphereObjective<'_> {
    fn value_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
        let u = to_vecs(x);
        let mut gv = vec![Vec3::zeros(); u.len()];
        let f = (self.energy)(&u, Some(&mut gv));
        project_tangent(&u, &mut gv);
        for (i, gi) in gv.iter().enumerate() {
            let v = if self.frozen[i] { Vec3::zeros() } else { *gi };
            g[3 * i..3 * i + 3].copy_from_slice(v.as_slice());
        }
        f
    }

    fn value(&self, x: &[f64]) -> f64 {
        (self.energy)(&to_vecs(x), None)
    }

    fn retract(&self, x: &[f64], d: &[f64], a: f64, out: &mut [f64]) {
        for i in 0..self.frozen.len() {
            let xi = Vec3::from_column_slice(&x[3 * i..3 * i + 3]);
            let v = if self.frozen[i] { xi } else { (xi + Vec3::from_column_slice(&d[3 * i..3 * i + 3]) * a).normalize() };
            out[3 * i..3 * i + 3].copy_from_slice(v.as_slice());
        }
        for &(s, len) in &self.periodic_rows {
            let get = |o: &[f64], i: usize| Vec3::from_column_slice(&o[3 * (s + i)..3 * (s + i) + 3]);
            let (u0, u1, um, ul) = (get(out, 0), get(out, 1), get(out, len - 2), get(out, len - 1));
            let target = 0.5 * (u0.dot(&u1).clamp(-1.0, 1.0) + um.dot(&ul).clamp(-1.0, 1.0));
            let n1 = set_inner(u0, u1, target);
            let nl = set_inner(um, ul, target);
            out[3 * (s + 1)..3 * (s + 1) + 3].copy_from_slice(n1.as_slice());
            out[3 * (s + len - 1)..3 * (s + len - 1) + 3].copy_from_slice(nl.as_slice());
        }
    }

    fn project(&self, x: &[f64], v: &mut [f64]) {
        for i in 0..self.frozen.len() {
            let r = 3 * i..3 * i + 3;
            if self.frozen[i] {
                v[r].iter_mut().for_each(|a| *a = 0.0);
                continue;
            }
            let u = Vec3::from_column_slice(&x[r.clone()]);
            let w = Vec3::from_column_slice(&v[r.clone()]);
            v[r].copy_from_slice((w - u * u.dot(&w)).as_slice());
        }
    }

    fn sup_norm(&self, g: &[f64]) -> f64 {
        g.chunks_exact(3).map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()).fold(0.0, f64::max)
    }

    fn precondition(&self, x: &[f64], v: &mut [f64]) -> bool {
        if let Some(y) = &self.ymodes {
            y.apply(v);
            self.project(x, v);
            return true;
        }
        if self.precond.is_empty() {
            return false;
        }
        for (start, f) in &self.precond {
            for comp in 0..3 {
                f.solve_strided(v, 3 * start + comp, 3);
            }
        }
        self.project(x, v);
        true
    }
}

fn lbfgs_opts(options: &MinimizeOptions, grad_scale: f64) -> LbfgsOptions {
    LbfgsOptions {
        max_iters: options.max_iters,
        grad_tol: options.grad_tol,
        grad_scale,
        step_init: options.step_init,
        memory: LBFGS_MEMORY,
        stall_tol: 0.0,
    }
}

/// Resolve pins from options or boundary; returns the chain to start from.
fn prepare_chain(chain: &SpinChain, params: &ModelParams, options: &MinimizeOptions) -> Result<SpinChain> {
    if ((chain.spacing() - params.lambda) / params.lambda).abs() > 1e-9 {
        return param(format!("configuration spacing {} differs from lambda {}", chain.spacing(), params.lambda));
    }
    match &options.pin {
        Some(p) => apply_pins(chain, p, params.delta),
        None => Ok(chain.clone()),
    }
}

fn report_1d(chain: &SpinChain, params: &ModelParams, mode: &Mode, res_iters: usize, grad_norm: f64, stop: Stop, tol: f64) -> Result<MinimizeReport> {
    let pen = match mode {
        Mode::SoftG(p) => Some(p),
        _ => None,
    };
    let b = breakdown(chain, params, pen)?;
    let e = mode_energy(chain, params, mode);
    Ok(MinimizeReport {
        final_energy: e,
        scaled_energy: e / params.energy_scale(),
        iterations: res_iters,
        converged: grad_norm <= tol,
        grad_norm,
        breakdown: b,
        line_search_failed: stop == Stop::LineSearch,
        y_variation: 0.0,
    })
}

/// Minimize the energy of `options.mode` starting from `chain`.
pub fn minimize_chain(chain: &SpinChain, params: &ModelParams, options: &MinimizeOptions) -> Result<(SpinChain, MinimizeReport)> {
    options.validate()?;
    if let Mode::HardMk(pen) = &options.mode {
        return minimize_hard(chain, params, pen, options);
    }
    let mut start = prepare_chain(chain, params, options)?;
    if let Some(s) = &options.anneal {
        start = anneal_with(&start, params, &options.mode, s, options.seed)?;
    }
    let n = start.len();
    let periodic = matches!(start.boundary(), Boundary::PeriodicScalarProduct);
    if periodic {
        start.project_periodic();
    }
    let scale = params.energy_scale();
    let (lam, del) = (params.lambda, params.delta);
    let soft = match &options.mode {
        Mode::SoftG(p) => Some((p, params.mu * lam)),
        _ => None,
    };
    let frozen = frozen_mask(n, start.is_pinned());
    let pre = stencil_precond(n, 2.0 * (1.0 - del), &frozen, lam / scale, precond_shift(del));
    let obj = SphereObjective {
        frozen,
        precond: vec![(0, pre)],
        ymodes: None,
        periodic_rows: if periodic { vec![(0, n)] } else { vec![] },
        energy: Box::new(move |u: &[Vec3], g: Option<&mut [Vec3]>| match g {
            Some(g) => {
                let f = chain_energy(u, lam, del, soft, Some(&mut *g));
                g.iter_mut().for_each(|v| *v /= scale);
                f / scale
            }
            None => chain_energy(u, lam, del, soft, None) / scale,
        }),
    };
    let res = lbfgs(&obj, to_flat(start.spins()), &lbfgs_opts(options, 1.0 / params.time_step()));
    let mut out = start.clone();
    out.spins_mut().copy_from_slice(&to_vecs(&res.x));
    out.renormalize();
    let rep = report_1d(&out, params, &options.mode, res.iters, res.grad_sup, res.stop, options.grad_tol)?;
    Ok((out, rep))
}

// ---------- M_k-constrained chains ----------

struct HardObjective<'a> {
    frames: Vec<[Vec3; 3]>,
    labels: Vec<usize>,
    frozen: Vec<bool>,
    pen: &'a PenaltySpec,
    precond: Banded5,
    lam: f64,
    del: f64,
    scale: f64,
}

impl HardObjective<'_> {
    fn spins(&self, t: &[f64]) -> Vec<Vec3> {
        t.iter()
            .zip(&self.labels)
            .map(|(ti, &l)| {
                let [a, b, _] = self.frames[l];
                a * ti.cos() + b * ti.sin()
            })
            .collect()
    }
}

impl Objective for HardObjective<'_> {
    fn value_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
        let u = self.spins(x);
        let mut gv = vec![Vec3::zeros(); u.len()];
        let f = chain_energy(&u, self.lam, self.del, None, Some(&mut gv));
        for i in 0..u.len() {
            g[i] = if self.frozen[i] { 0.0 } else { gv[i].dot(&self.pen.axes()[self.labels[i]].cross(&u[i])) / self.scale };
        }
        f / self.scale
    }

    fn value(&self, x: &[f64]) -> f64 {
        chain_energy(&self.spins(x), self.lam, self.del, None, None) / self.scale
    }

    fn retract(&self, x: &[f64], d: &[f64], a: f64, out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = if self.frozen[i] { x[i] } else { x[i] + a * d[i] };
        }
    }

    fn project(&self, _x: &[f64], v: &mut [f64]) {
        for (vi, f) in v.iter_mut().zip(&self.frozen) {
            if *f {
                *vi = 0.0;
            }
        }
    }

    fn precondition(&self, x: &[f64], v: &mut [f64]) -> bool {
        self.precond.solve_strided(v, 0, 1);
        self.project(x, v);
        true
    }
}

fn circle_angle(frame: &[Vec3; 3], u: &Vec3) -> f64 {
    u.dot(&frame[1]).atan2(u.dot(&frame[0]))
}

/// Circle labels `l_i` of a chain in `M_k` (nearest circle per site).
pub fn circle_labels(chain: &SpinChain, pen: &PenaltySpec) -> Vec<usize> {
    chain.spins().iter().map(|u| pen.nearest_circle(u).0).collect()
}

/// Minimize `H^sl` over `M_k`-valued chains, each spin moving on its circle.
pub fn minimize_hard(chain: &SpinChain, params: &ModelParams, pen: &PenaltySpec, options: &MinimizeOptions) -> Result<(SpinChain, MinimizeReport)> {
    options.validate()?;
    let (site, distance) = mk_violation(chain, pen);
    if distance > TOL_MEMBERSHIP {
        return Err(Error::Constraint { site, distance });
    }
    let mut start = prepare_chain(chain, params, options)?;
    if options.pin.is_some() {
        let (site, distance) = mk_violation(&start, pen);
        if distance > TOL_MEMBERSHIP {
            return Err(Error::Constraint { site, distance });
        }
    }
    let mode = Mode::HardMk(pen.clone());
    if let Some(s) = &options.anneal {
        start = anneal_with(&start, params, &mode, s, options.seed)?;
    }
    let n = start.len();
    let frames: Vec<[Vec3; 3]> = (0..pen.k())
        .map(|l| {
            let m = *pen.circle_frame(l).matrix();
            [m.column(0).into(), m.column(1).into(), m.column(2).into()]
        })
        .collect();
    let labels = circle_labels(&start, pen);
    let t: Vec<f64> = start.spins().iter().zip(&labels).map(|(u, &l)| circle_angle(&frames[l], u)).collect();
    let frozen = frozen_mask(n, start.is_pinned());
    let scale = params.energy_scale();
    let precond = stencil_precond(n, 2.0 * (1.0 - params.delta), &frozen, params.lambda / scale, precond_shift(params.delta));
    let mut obj = HardObjective {
        frames,
        labels,
        frozen,
        pen,
        precond,
        lam: params.lambda,
        del: params.delta,
        scale: params.energy_scale(),
    };
    let tol_switch = 10.0 * params.delta.sqrt();
    let intersections = pen.intersections();
    let opts = lbfgs_opts(options, 1.0 / params.time_step());
    let mut x = t;
    let mut total_iters = 0;
    let mut res;
    let mut round = 0;
    loop {
        let mut o = opts;
        o.max_iters = options.max_iters.saturating_sub(total_iters).max(1);
        res = lbfgs(&obj, x, &o);
        total_iters += res.iters;
        x = res.x.clone();
        round += 1;
        if intersections.is_empty() || round > MAX_SWITCH_ROUNDS || total_iters >= options.max_iters {
            break;
        }
        // greedy relabelling of spins sitting near a circle intersection
        let mut switched = false;
        let mut f = obj.value(&x);
        for i in 0..n {
            if obj.frozen[i] {
                continue;
            }
            let [a, b, _] = obj.frames[obj.labels[i]];
            let u = a * x[i].cos() + b * x[i].sin();
            for (l, m, p) in &intersections {
                if *l != obj.labels[i] || (u - p).norm() > tol_switch {
                    continue;
                }
                let (old_l, old_t) = (obj.labels[i], x[i]);
                obj.labels[i] = *m;
                x[i] = circle_angle(&obj.frames[*m], &u);
                let fnew = obj.value(&x);
                if fnew < f {
                    f = fnew;
                    switched = true;
                    break;
                }
                obj.labels[i] = old_l;
                x[i] = old_t;
            }
        }
        if !switched {
            break;
        }
    }
    let mut out = start.clone();
    out.spins_mut().copy_from_slice(&obj.spins(&x));
    let rep = report_1d(&out, params, &mode, total_iters, res.grad_sup, res.stop, options.grad_tol)?;
    Ok((out, rep))
}

// ---------- 2D ----------

fn field_energy(u: &[Vec3], nx: usize, ny: usize, params: &ModelParams, pen: Option<&PenaltySpec>, grad: Option<&mut [Vec3]>) -> f64 {
    let l2 = params.lambda * params.lambda;
    let c = 2.0 * (1.0 - params.delta);
    let pw = params.delta * params.delta * l2;
    let mut helix = CompensatedSum::new();
    let mut ferro = CompensatedSum::new();
    let mut g_sum = CompensatedSum::new();
    let mut grad = grad;
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = Vec3::zeros());
    }
    for iy in 0..ny - 1 {
        for ix in 0..nx - 2 {
            let k = iy * nx + ix;
            let r = nnn_residual(&u[k], &u[k + 1], &u[k + 2], params.delta);
            let dy = u[k + nx] - u[k];
            helix.add(r.norm_squared());
            ferro.add(dy.norm_squared());
            if let Some(g) = grad.as_deref_mut() {
                let lr = r * l2;
                g[k] += lr;
                g[k + 1] -= lr * c;
                g[k + 2] += lr;
                let fy = dy * (params.j2 * l2);
                g[k + nx] += fy;
                g[k] -= fy;
            }
            if let Some(p) = pen {
                let z = u[k].cross(&u[k + 1]);
                g_sum.add(p.g(&z));
                if let Some(g) = grad.as_deref_mut() {
                    let dg = p.grad_g(&z) * pw;
                    g[k] += u[k + 1].cross(&dg);
                    g[k + 1] += dg.cross(&u[k]);
                }
            }
        }
    }
    0.5 * l2 * helix.value() + 0.5 * params.j2 * l2 * ferro.value() + pw * g_sum.value()
}

/// Minimize `H₂d` (plus `δ²Σλ²G` in `SoftG` mode). Pins apply to every row.
pub fn minimize_2d(field: &SpinField2D, params: &ModelParams, pen: Option<&PenaltySpec>, options: &MinimizeOptions) -> Result<(SpinField2D, MinimizeReport)> {
    options.validate()?;
    let (nx, ny) = (field.nx(), field.ny());
    if nx < 3 || ny < 2 {
        return Err(Error::Dimension(format!("grid {nx}x{ny} has no interior stencil")));
    }
    if ((field.spacing() - params.lambda) / params.lambda).abs() > 1e-9 {
        return param("field spacing differs from lambda");
    }
    let pen = match (&options.mode, pen) {
        (Mode::SoftG(p), _) => Some(p),
        (_, p) => p,
    };
    let mut start = field.clone();
    let mut frozen = vec![false; nx * ny];
    if let Some(p) = &options.pin {
        for iy in 0..ny {
            let row = SpinChain::new(start.row(iy).to_vec(), params.lambda, Boundary::Free)?;
            let pinned = apply_pins(&row, p, params.delta)?;
            start.spins_mut()[iy * nx..(iy + 1) * nx].copy_from_slice(pinned.spins());
            for ix in [0, 1, nx - 2, nx - 1] {
                frozen[iy * nx + ix] = true;
            }
        }
    }
    let periodic_rows = if start.row_periodic() && options.pin.is_none() { (0..ny).map(|iy| (iy * nx, nx)).collect() } else { vec![] };
    let scale = params.energy_scale();
    let l2 = params.lambda * params.lambda;
    // pins freeze the same columns in every row, so the quadratic part separates
    let ymodes = YModes::new(nx, ny, 2.0 * (1.0 - params.delta), &frozen[..nx], l2 / scale, precond_shift(params.delta), params.j2);
    let p = *params;
    let obj = SphereObjective {
        frozen,
        periodic_rows,
        precond: vec![],
        ymodes: Some(ymodes),
        energy: Box::new(move |u: &[Vec3], g: Option<&mut [Vec3]>| match g {
            Some(g) => {
                let f = field_energy(u, nx, ny, &p, pen, Some(&mut *g));
                g.iter_mut().for_each(|v| *v /= scale);
                f / scale
            }
            None => field_energy(u, nx, ny, &p, pen, None) / scale,
        }),
    };
    let res = lbfgs(&obj, to_flat(start.spins()), &lbfgs_opts(options, 1.0 / (params.lambda * params.time_step())));
    let mut out = start;
    out.spins_mut().copy_from_slice(&to_vecs(&res.x));
    out.renormalize();
    let b = breakdown_2d(&out, params, pen)?;
    let e = b.total * scale;
    Ok((
        out.clone(),
        MinimizeReport {
            final_energy: e,
            scaled_energy: b.total,
            iterations: res.iters,
            converged: res.grad_sup <= options.grad_tol,
            grad_norm: res.grad_sup,
            breakdown: b,
            line_search_failed: res.stop == Stop::LineSearch,
            y_variation: y_variation(&out),
        },
    ))
}

// ---------- annealing ----------

/// Scaled energy of the stencils and penalty pairs touching site `j`.
fn local_energy(u: &[Vec3], j: usize, params: &ModelParams, soft: Option<&PenaltySpec>) -> f64 {
    let n = u.len();
    let mut e = 0.0;
    for i in j.saturating_sub(2)..=j.min(n - 3) {
        e += 0.5 * params.lambda * nnn_residual(&u[i], &u[i + 1], &u[i + 2], params.delta).norm_squared();
    }
    if let Some(p) = soft {
        for i in j.saturating_sub(1)..=j.min(n - 3) {
            e += params.mu * params.lambda * p.g(&u[i].cross(&u[i + 1]));
        }
    }
    e / params.energy_scale()
}

/// Metropolis over single-spin rotations at decreasing temperature; returns the
/// best configuration seen at the end of a sweep (pinned spins never move).
pub fn anneal(chain: &SpinChain, params: &ModelParams, options: &MinimizeOptions) -> Result<SpinChain> {
    let schedule = options.anneal.unwrap_or_default();
    let start = prepare_chain(chain, params, options)?;
    anneal_with(&start, params, &options.mode, &schedule, options.seed)
}

fn anneal_with(chain: &SpinChain, params: &ModelParams, mode: &Mode, s: &AnnealSchedule, seed: u64) -> Result<SpinChain> {
    if !(s.t_start >= 0.0 && s.t_end >= 0.0 && s.step > 0.0) {
        return param("anneal schedule needs non-negative temperatures and a positive step");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = chain.len();
    let frozen = frozen_mask(n, chain.is_pinned());
    let soft = match mode {
        Mode::SoftG(p) => Some(p),
        _ => None,
    };
    let hard = match mode {
        Mode::HardMk(p) => Some(p),
        _ => None,
    };
    let mut u = chain.spins().to_vec();
    let mut current = mode_energy(chain, params, mode) / params.energy_scale();
    let mut best = (current, u.clone());
    let sweeps = s.sweeps.max(1);
    for k in 0..sweeps {
        let temp = if sweeps == 1 || s.t_start == 0.0 {
            s.t_start
        } else {
            s.t_start * (s.t_end.max(1e-300) / s.t_start).powf(k as f64 / (sweeps - 1) as f64)
        };
        for _ in 0..s.moves_per_site * n {
            let j = rng.random_range(0..n);
            if frozen[j] {
                continue;
            }
            let old = u[j];
            let proposal = match hard {
                Some(p) => {
                    let (l, _) = p.nearest_circle(&old);
                    let a: f64 = rng.random_range(-s.step..s.step);
                    (old * a.cos() + p.axes()[l].cross(&old) * a.sin()).normalize()
                }
                None => {
                    let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    (old + d * s.step).normalize()
                }
            };
            let e0 = local_energy(&u, j, params, soft);
            u[j] = proposal;
            let de = local_energy(&u, j, params, soft) - e0;
            let accept = de <= 0.0 || (temp > 0.0 && rng.random::<f64>() < (-de / temp).exp());
            if accept {
                current += de;
            } else {
                u[j] = old;
            }
        }
        if current < best.0 {
            best = (current, u.clone());
        }
    }
    let mut out = chain.clone();
    out.spins_mut().copy_from_slice(&best.1);
    out.renormalize();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energies::{eval_h2d_g, eval_hp, eval_hsl, eval_hsl_scaled};
    use crate::geometry::{e1, e2, e3, rotation_exp, Rotation};
    use crate::profiles::{ground_helix, sample_to_lattice, tanh_profile};

    fn random_unit(rng: &mut impl Rng) -> Vec3 {
        loop {
            let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                return v / n;
            }
        }
    }

    fn fd_check(chain: &SpinChain, params: &ModelParams, mode: &Mode) -> f64 {
        let g = gradient(chain, params, mode);
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(chain.len() as u64);
        let mut worst = 0.0f64;
        let gmax = g.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for i in 0..chain.len() {
            let u = chain.spins()[i];
            let dir = match mode {
                Mode::HardMk(p) => p.axes()[p.nearest_circle(&u).0].cross(&u).normalize(),
                _ => {
                    let r = random_unit(&mut rng);
                    (r - u * u.dot(&r)).normalize()
                }
            };
            let mut a = chain.clone();
            let mut b = chain.clone();
            // exact geodesic moves
            let ax = u.cross(&dir);
            a.set_spin(i, rotation_exp(&ax, h).unwrap().apply(&u));
            b.set_spin(i, rotation_exp(&ax, -h).unwrap().apply(&u));
            let fd = (mode_energy(&a, params, mode) - mode_energy(&b, params, mode)) / (2.0 * h);
            let an = g[i].dot(&dir);
            worst = worst.max((fd - an).abs() / gmax.max(1e-300));
        }
        worst
    }

    #[test]
    fn gradient_oracle_all_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pen = PenaltySpec::dist_to_qk(vec![e3(), e1()]).unwrap();
        let p = ModelParams::new(0.05, 0.1).unwrap().with_mu(0.3).unwrap();
        for _ in 0..10 {
            let spins: Vec<Vec3> = (0..21).map(|_| random_unit(&mut rng)).collect();
            let c = SpinChain::new(spins, 0.05, Boundary::Free).unwrap();
            assert!(fd_check(&c, &p, &Mode::Free) < 1e-6);
            assert!(fd_check(&c, &p, &Mode::SoftG(pen.clone())) < 1e-6);
            let on: Vec<Vec3> = (0..21)
                .map(|i| {
                    let t: f64 = rng.random_range(0.0..6.3);
                    let r = pen.circle_frame(i % 2);
                    r.apply(&Vec3::new(t.cos(), t.sin(), 0.0))
                })
                .collect();
            let c = SpinChain::new(on, 0.05, Boundary::Free).unwrap();
            assert!(fd_check(&c, &p, &Mode::HardMk(pen.clone())) < 1e-6);
        }
    }

    #[test]
    fn helix_is_critical() {
        let p = ModelParams::new(0.01, 0.05).unwrap();
        let h = ground_helix(0.05, &Rotation::identity(), 101, 0.01).unwrap();
        let g = gradient(&h, &p, &Mode::Free);
        assert!(g.iter().all(|v| v.norm() < 1e-10));
        let c = SpinChain::new(vec![e2(); 101], 0.01, Boundary::Free).unwrap();
        assert!(gradient(&c, &p, &Mode::Free).iter().all(|v| v.norm() < 1e-14));
    }

    #[test]
    fn perturbed_helix_recovers() {
        let p = ModelParams::new(0.01, 0.05).unwrap();
        let h = ground_helix(0.05, &Rotation::identity(), 101, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = h.clone();
        for i in 0..c.len() {
            let u = c.spins()[i];
            let ax = random_unit(&mut rng);
            c.set_spin(i, rotation_exp(&ax, rng.random_range(0.0..0.05)).unwrap().apply(&u));
        }
        let e0 = eval_hsl(&c, &p).unwrap();
        let (m, rep) = minimize_chain(&c, &p, &MinimizeOptions { grad_tol: 1e-9, ..Default::default() }).unwrap();
        assert!(eval_hsl(&m, &p).unwrap() <= 1e-10, "{} from {e0}", eval_hsl(&m, &p).unwrap());
        assert!(rep.scaled_energy <= e0 / p.energy_scale());
        assert!(m.spins().iter().all(|u| (u.norm() - 1.0).abs() < 1e-12));
        assert!(m.periodicity_defect() < 1e-12);
    }

    #[test]
    fn pins_realise_chirality() {
        let d: f64 = 0.01;
        let c = ground_helix(d, &Rotation::identity(), 50, 0.02).unwrap();
        let pins = ground_pins(&e3(), &(-e3()), d);
        let pc = apply_pins(&c, &pins, d).unwrap();
        let s = (2.0 * d).sqrt();
        let u = pc.spins();
        assert!((u[0].cross(&u[1]) / s - pins.left).norm() < 1e-12);
        assert!((u[48].cross(&u[49]) / s - pins.right).norm() < 1e-12);
        assert!((u[0].dot(&u[1]) - (1.0 - d)).abs() < 1e-12);
    }

    #[test]
    fn hard_minimizer_and_determinism() {
        let d: f64 = 0.01;
        let lam = 0.05 * d.sqrt();
        let p = ModelParams::new(lam, d).unwrap();
        let pen = PenaltySpec::dist_to_qk(vec![e3()]).unwrap();
        let prof = tanh_profile(&e3(), &(-e3()), 40.0).unwrap();
        let c = sample_to_lattice(&prof, lam, d, 0.0).unwrap().pinned(d);
        let e_cert = eval_hsl_scaled(&c, &p).unwrap();
        let opts = MinimizeOptions { max_iters: 3000, ..Default::default() }.with_mode(Mode::HardMk(pen.clone()));
        let (m, rep) = minimize_chain(&c, &p, &opts).unwrap();
        assert!(rep.scaled_energy <= e_cert + 1e-12);
        assert!(mk_violation(&m, &pen).1 < 1e-12);
        let (_, rep2) = minimize_chain(&c, &p, &opts).unwrap();
        assert_eq!(rep, rep2);
        // init off M_k
        let off = SpinChain::new(vec![Vec3::new(0.0, 0.6, 0.8); 10], lam, Boundary::Free).unwrap();
        assert!(matches!(minimize_hard(&off, &p, &pen, &opts), Err(Error::Constraint { .. })));
    }

    #[test]
    fn hard_k2_same_circle_keeps_labels() {
        let d: f64 = 0.02;
        let lam = 0.1 * d.sqrt();
        let p = ModelParams::new(lam, d).unwrap();
        let pen = PenaltySpec::dist_to_qk(vec![e3(), e2()]).unwrap();
        let h = ground_helix(d, &Rotation::identity(), p.sites_on_unit_interval(), lam).unwrap().pinned(d);
        let opts = MinimizeOptions { max_iters: 200, ..Default::default() };
        let (m, _) = minimize_hard(&h, &p, &pen, &opts).unwrap();
        assert!(circle_labels(&m, &pen).iter().all(|&l| l == 0));
    }

    #[test]
    fn soft_mode_descends() {
        let d: f64 = 0.02;
        let lam = 0.1 * d.sqrt();
        let p = ModelParams::new(lam, d).unwrap().with_mu(d * d).unwrap();
        let pen = PenaltySpec::dist_to_qk(vec![e3()]).unwrap();
        let tilt = rotation_exp(&e1(), 0.2).unwrap();
        let h = ground_helix(d, &tilt, p.sites_on_unit_interval(), lam).unwrap();
        let e0 = eval_hp(&h, &p, &pen).unwrap();
        let opts = MinimizeOptions { max_iters: 300, ..Default::default() }.with_mode(Mode::SoftG(pen.clone()));
        let (m, rep) = minimize_chain(&h, &p, &opts).unwrap();
        assert!(eval_hp(&m, &p, &pen).unwrap() < e0);
        assert!((rep.final_energy - eval_hp(&m, &p, &pen).unwrap()).abs() < 1e-15 * e0.max(1.0) + 1e-18);
    }

    #[test]
    fn two_d_rows_decouple_without_coupling() {
        let d = 0.05;
        let lam = 0.05;
        let p = ModelParams::new(lam, d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (nx, ny) = (21, 3);
        let h = ground_helix(d, &Rotation::identity(), nx, lam).unwrap();
        let mut spins = Vec::new();
        for _ in 0..ny {
            for u in h.spins() {
                let ax = random_unit(&mut rng);
                spins.push(rotation_exp(&ax, 0.05).unwrap().apply(u));
            }
        }
        let f = SpinField2D::new(spins, nx, ny, lam, false).unwrap();
        let opts = MinimizeOptions { max_iters: 5000, grad_tol: 1e-10, ..Default::default() };
        let (m, rep) = minimize_2d(&f, &p, None, &opts).unwrap();
        assert!((rep.final_energy - eval_h2d_g(&m, &p, &PenaltySpec::dist_to_qk(vec![e3()]).unwrap().scaled(0.0)).unwrap()).abs() < 1e-14);
        assert!(rep.scaled_energy < 1e-8);
    }

    #[test]
    fn anneal_zero_temperature_is_monotone() {
        let d = 0.05;
        let p = ModelParams::new(0.02, d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spins: Vec<Vec3> = (0..51).map(|_| random_unit(&mut rng)).collect();
        let c = SpinChain::new(spins, 0.02, Boundary::Free).unwrap();
        let sched = AnnealSchedule { t_start: 0.0, t_end: 0.0, sweeps: 20, moves_per_site: 2, step: 0.2 };
        let opts = MinimizeOptions { anneal: Some(sched), seed: 4, ..Default::default() };
        let a = anneal(&c, &p, &opts).unwrap();
        let b = anneal(&c, &p, &opts).unwrap();
        assert_eq!(a.spins(), b.spins());
        assert!(eval_hsl(&a, &p).unwrap() <= eval_hsl(&c, &p).unwrap());
    }
}
