//! Discrete energies of the frustrated chain and the 2D helical XY model.
//!
//! Sites of a chain are `i = 0..N-1` and NNN stencils run over `i = 0..N-3`.
//! On a 2D grid a site `(ix, iy)` contributes when `ix + 2 < nx` and `iy + 1 < ny`.

use std::fmt::Write as _;

use crate::error::{param, Error, Result};
use crate::geometry::{SpinChain, SpinField2D, Vec3};
use crate::penalty::PenaltySpec;
use crate::sum::CompensatedSum;

/// Chordal distance below which a spin counts as lying on a circle of `M_k`.
pub const TOL_MEMBERSHIP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub lambda: f64,
    pub delta: f64,
    pub j2: f64,
    pub mu: f64,
    pub j0: f64,
}

impl ModelParams {
    pub fn new(lambda: f64, delta: f64) -> Result<Self> {
        Self { lambda, delta, j2: 0.0, mu: 0.0, j0: 4.0 * (1.0 - delta) }.validated()
    }

    pub fn with_j2(self, j2: f64) -> Result<Self> {
        Self { j2, ..self }.validated()
    }

    pub fn with_mu(self, mu: f64) -> Result<Self> {
        Self { mu, ..self }.validated()
    }

    pub fn with_j0(self, j0: f64) -> Result<Self> {
        Self { j0, ..self }.validated()
    }

    fn validated(self) -> Result<Self> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return param(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return param(format!("delta must lie in (0,1), got {}", self.delta));
        }
        if !(self.j2 >= 0.0 && self.mu >= 0.0) || !self.j0.is_finite() {
            return param("j2 and mu must be non-negative, j0 finite");
        }
        Ok(self)
    }

    /// `α = arccos(1−δ)/√(2δ)`.
    pub fn alpha(&self) -> f64 {
        (1.0 - self.delta).acos() / (2.0 * self.delta).sqrt()
    }

    /// `β = λ/√δ`.
    pub fn beta(&self) -> f64 {
        self.lambda / self.delta.sqrt()
    }

    /// `p = μ/(√2 λ δ^{3/2})`.
    pub fn p(&self) -> f64 {
        self.mu / self.energy_scale()
    }

    /// `√2 λ δ^{3/2}`.
    pub fn energy_scale(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.lambda * self.delta.powf(1.5)
    }

    /// Lattice time step `α√(2δ) = arccos(1−δ)` of the rescaled variable.
    pub fn time_step(&self) -> f64 {
        (1.0 - self.delta).acos()
    }

    /// Number of sites `i` with `λi ∈ [0,1]`.
    pub fn sites_on_unit_interval(&self) -> usize {
        (1.0 / self.lambda + 1e-9).floor() as usize + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyBreakdown {
    pub total: f64,
    pub well_term: f64,
    pub gradient_term: f64,
    pub penalty_term: f64,
    pub ferro_2d_term: f64,
    pub gamma_estimate: f64,
}

const RECORD_KEYS: [&str; 6] =
    ["total", "well_term", "gradient_term", "penalty_term", "ferro_2d_term", "gamma_estimate"];

impl EnergyBreakdown {
    /// `(W + (1−γ)D, W + D)` when `γ < 1`.
    pub fn sandwich_bounds(&self) -> Option<(f64, f64)> {
        let g = self.gamma_estimate;
        if g.is_finite() && (0.0..1.0).contains(&g) {
            let w = self.well_term;
            let d = self.gradient_term;
            Some((w + (1.0 - g) * d, w + d))
        } else {
            None
        }
    }

    fn values(&self) -> [f64; 6] {
        [
            self.total,
            self.well_term,
            self.gradient_term,
            self.penalty_term,
            self.ferro_2d_term,
            self.gamma_estimate,
        ]
    }

    /// One `name=value` line per field, 17 significant digits.
    pub fn to_record(&self) -> String {
        let mut s = String::new();
        for (k, v) in RECORD_KEYS.iter().zip(self.values()) {
            let _ = writeln!(s, "{k}={v:.16e}");
        }
        s
    }

    pub fn from_record(text: &str) -> Result<Self> {
        let mut vals = [None; 6];
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: ln + 1, msg: "expected name=value".into() })?;
            let idx = RECORD_KEYS
                .iter()
                .position(|x| *x == k.trim())
                .ok_or_else(|| Error::Parse { line: ln + 1, msg: format!("unknown key {k}") })?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|e| Error::Parse { line: ln + 1, msg: format!("{e}") })?;
            vals[idx] = Some(v);
        }
        let get = |i: usize| {
            vals[i].ok_or_else(|| Error::Parse { line: 0, msg: format!("missing key {}", RECORD_KEYS[i]) })
        };
        Ok(Self {
            total: get(0)?,
            well_term: get(1)?,
            gradient_term: get(2)?,
            penalty_term: get(3)?,
            ferro_2d_term: get(4)?,
            gamma_estimate: get(5)?,
        })
    }
}

fn check_spacing(spacing: f64, params: &ModelParams) -> Result<()> {
    if ((spacing - params.lambda) / params.lambda).abs() > 1e-9 {
        return param(format!("configuration spacing {spacing} differs from lambda {}", params.lambda));
    }
    Ok(())
}

fn check_chain(chain: &SpinChain, params: &ModelParams) -> Result<()> {
    if chain.len() < 3 {
        return Err(Error::Dimension("chain needs at least 3 sites".into()));
    }
    check_spacing(chain.spacing(), params)
}

#[inline]
pub(crate) fn nnn_residual(u0: &Vec3, u1: &Vec3, u2: &Vec3, delta: f64) -> Vec3 {
    // same as u2 − 2(1−δ)u1 + u0, written to avoid cancelling O(1) terms
    ((u2 - u1) - (u1 - u0)) + u1 * (2.0 * delta)
}

/// Sum of `½λ|u^{i+2} − 2(1−δ)u^{i+1} + u^i|²` over a slice of spins, no checks.
pub(crate) fn hsl_raw(spins: &[Vec3], lambda: f64, delta: f64) -> f64 {
    let mut s = CompensatedSum::new();
    for t in spins.windows(3) {
        s.add(nnn_residual(&t[0], &t[1], &t[2], delta).norm_squared());
    }
    0.5 * lambda * s.value()
}

pub(crate) fn penalty_raw(spins: &[Vec3], weight: f64, pen: &PenaltySpec) -> f64 {
    // consecutive pairs (i, i+1) with i in the NNN index set
    let n = spins.len();
    let mut s = CompensatedSum::new();
    for i in 0..n.saturating_sub(2) {
        s.add(pen.g(&spins[i].cross(&spins[i + 1])));
    }
    weight * s.value()
}

/// `H^sl = ½ Σ λ |u^{i+2} − 2(1−δ)u^{i+1} + u^i|²`.
pub fn eval_hsl(chain: &SpinChain, params: &ModelParams) -> Result<f64> {
    check_chain(chain, params)?;
    Ok(hsl_raw(chain.spins(), params.lambda, params.delta))
}

/// `H^sl / (√2 λ δ^{3/2})`.
pub fn eval_hsl_scaled(chain: &SpinChain, params: &ModelParams) -> Result<f64> {
    Ok(eval_hsl(chain, params)? / params.energy_scale())
}

/// `μ Σ λ G(u^i × u^{i+1})`.
pub fn eval_penalty(chain: &SpinChain, params: &ModelParams, pen: &PenaltySpec) -> Result<f64> {
    check_chain(chain, params)?;
    Ok(penalty_raw(chain.spins(), params.mu * params.lambda, pen))
}

/// `H^sl + μ Σ λ G`.
pub fn eval_hp(chain: &SpinChain, params: &ModelParams, pen: &PenaltySpec) -> Result<f64> {
    Ok(eval_hsl(chain, params)? + eval_penalty(chain, params, pen)?)
}

/// Worst site of `chain` with respect to membership in `M_k`.
pub fn mk_violation(chain: &SpinChain, pen: &PenaltySpec) -> (usize, f64) {
    chain
        .spins()
        .iter()
        .enumerate()
        .map(|(i, u)| (i, pen.nearest_circle(u).1))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or((0, 0.0))
}

/// `H^sl` restricted to `M_k`-valued chains.
pub fn eval_hhard(chain: &SpinChain, params: &ModelParams, pen: &PenaltySpec) -> Result<f64> {
    check_chain(chain, params)?;
    let (site, distance) = mk_violation(chain, pen);
    if distance > TOL_MEMBERSHIP {
        return Err(Error::Constraint { site, distance });
    }
    eval_hsl(chain, params)
}

/// Scaled well / gradient split of `H^sl` plus the scaled penalty, without any
/// boundary requirement.
pub fn breakdown(chain: &SpinChain, params: &ModelParams, pen: Option<&PenaltySpec>) -> Result<EnergyBreakdown> {
    check_chain(chain, params)?;
    let u = chain.spins();
    let (lam, del) = (params.lambda, params.delta);
    let s2d = (2.0 * del).sqrt();
    let n = u.len();
    let mut well = CompensatedSum::new();
    let mut grad = CompensatedSum::new();
    for i in 0..n - 2 {
        let d = (u[i + 1] - u[i]).norm_squared() / (2.0 * del) - 1.0;
        well.add(d * d);
        let dz = (u[i + 1].cross(&u[i + 2]) - u[i].cross(&u[i + 1])) / s2d;
        grad.add(dz.norm_squared());
    }
    // (√(2δ)/λ) Σ λ (…)² and (λ/√(2δ)) Σ λ |Δz/λ|²
    let well_term = s2d * well.value();
    let gradient_term = grad.value() / s2d;
    let max_theta = crate::geometry::angles(chain).into_iter().fold(0.0, f64::max);
    let gamma_estimate =
        if max_theta < std::f64::consts::FRAC_PI_2 { max_theta.tan() } else { f64::INFINITY };
    let scale = params.energy_scale();
    let penalty_term = match pen {
        Some(p) => penalty_raw(u, params.mu * lam, p) / scale,
        None => 0.0,
    };
    let total = hsl_raw(u, lam, del) / scale + penalty_term;
    Ok(EnergyBreakdown { total, well_term, gradient_term, penalty_term, ferro_2d_term: 0.0, gamma_estimate })
}

/// Sandwich decomposition; requires the scalar-product periodicity.
pub fn decompose_sandwich(chain: &SpinChain, params: &ModelParams) -> Result<EnergyBreakdown> {
    let defect = chain.periodicity_defect();
    if defect > 1e-9 {
        return param(format!("sandwich bounds need (u1,u0) = (u^(N-1),u^(N-2)); defect {defect:.3e}"));
    }
    breakdown(chain, params, None)
}

/// The exact recombination
/// `2δ² Σλ(|Δu|²/(2δ) − 1)² + Σλ(2(1 − (u^{i+1},u^i)²) − ½|u^{i+2} − u^i|²)`.
pub fn rewrite1_sum(chain: &SpinChain, params: &ModelParams) -> Result<f64> {
    check_chain(chain, params)?;
    let u = chain.spins();
    let del = params.delta;
    let mut s = CompensatedSum::new();
    for i in 0..u.len() - 2 {
        let d = (u[i + 1] - u[i]).norm_squared() / (2.0 * del) - 1.0;
        let c = u[i + 1].dot(&u[i]);
        s.add(2.0 * del * del * d * d);
        s.add(2.0 * (1.0 - c * c) - 0.5 * (u[i + 2] - u[i]).norm_squared());
    }
    Ok(params.lambda * s.value())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompactnessDiagnostic {
    /// `max |(1−δ) − (u^{i+1},u^i)| / √mu_scale`.
    pub scalar_ratio: f64,
    /// `max |z^{i+1} − z^i|² / √δ`.
    pub continuity_ratio: f64,
}

pub fn compactness_diagnostic(chain: &SpinChain, params: &ModelParams, mu_scale: f64) -> Result<CompactnessDiagnostic> {
    check_chain(chain, params)?;
    if !(mu_scale > 0.0) {
        return param("mu_scale must be positive");
    }
    let u = chain.spins();
    let s2d = (2.0 * params.delta).sqrt();
    let scalar = u
        .windows(2)
        .map(|p| ((1.0 - params.delta) - p[0].dot(&p[1])).abs())
        .fold(0.0, f64::max);
    let cont = u
        .windows(3)
        .map(|t| ((t[1].cross(&t[2]) - t[0].cross(&t[1])) / s2d).norm_squared())
        .fold(0.0, f64::max);
    Ok(CompactnessDiagnostic {
        scalar_ratio: scalar / mu_scale.sqrt(),
        continuity_ratio: cont / params.delta.sqrt(),
    })
}

fn check_field(field: &SpinField2D, params: &ModelParams) -> Result<()> {
    if field.nx() < 3 || field.ny() < 2 {
        return Err(Error::Dimension(format!(
            "grid {}x{} has no interior stencil (need nx >= 3, ny >= 2)",
            field.nx(),
            field.ny()
        )));
    }
    check_spacing(field.spacing(), params)
}

/// `a_n = 1 − Σ λ²` over the stencil set of an `nx × ny` grid.
pub fn a_n(nx: usize, ny: usize, lambda: f64) -> f64 {
    1.0 - ((nx.saturating_sub(2)) * (ny.saturating_sub(1))) as f64 * lambda * lambda
}

/// `E = −Σ λ² (J₀(u_i,u_{i+e₁}) − (u_i,u_{i+2e₁}) + J₂(u_i,u_{i+e₂}))`.
pub fn eval_e2d(field: &SpinField2D, params: &ModelParams) -> Result<f64> {
    check_field(field, params)?;
    let (nx, ny) = (field.nx(), field.ny());
    let mut s = CompensatedSum::new();
    for iy in 0..ny - 1 {
        for ix in 0..nx - 2 {
            let u = field.at(ix, iy);
            s.add(
                params.j0 * u.dot(&field.at(ix + 1, iy)) - u.dot(&field.at(ix + 2, iy))
                    + params.j2 * u.dot(&field.at(ix, iy + 1)),
            );
        }
    }
    Ok(-params.lambda * params.lambda * s.value())
}

fn h2d_parts(field: &SpinField2D, params: &ModelParams, pen: Option<&PenaltySpec>) -> (f64, f64, f64) {
    let (nx, ny) = (field.nx(), field.ny());
    let mut helix = CompensatedSum::new();
    let mut ferro = CompensatedSum::new();
    let mut g = CompensatedSum::new();
    for iy in 0..ny - 1 {
        let row = field.row(iy);
        let up = field.row(iy + 1);
        for ix in 0..nx - 2 {
            helix.add(nnn_residual(&row[ix], &row[ix + 1], &row[ix + 2], params.delta).norm_squared());
            ferro.add((up[ix] - row[ix]).norm_squared());
            if let Some(p) = pen {
                g.add(p.g(&row[ix].cross(&row[ix + 1])));
            }
        }
    }
    let l2 = params.lambda * params.lambda;
    (0.5 * l2 * helix.value(), 0.5 * params.j2 * l2 * ferro.value(), params.delta * params.delta * l2 * g.value())
}

/// `½(Σλ²|u^i − 2(1−δ)u^{i+e₁} + u^{i+2e₁}|² + J₂ Σλ²|u^{i+e₂} − u^i|²)`.
pub fn eval_h2d(field: &SpinField2D, params: &ModelParams) -> Result<f64> {
    check_field(field, params)?;
    let (h, f, _) = h2d_parts(field, params, None);
    Ok(h + f)
}

/// `H₂d + δ² Σλ² G(u^i × u^{i+e₁})`.
pub fn eval_h2d_g(field: &SpinField2D, params: &ModelParams, pen: &PenaltySpec) -> Result<f64> {
    check_field(field, params)?;
    let (h, f, g) = h2d_parts(field, params, Some(pen));
    Ok(h + f + g)
}

/// Scaled 2D breakdown: helix part in `well_term`, y-coupling in `ferro_2d_term`.
pub fn breakdown_2d(field: &SpinField2D, params: &ModelParams, pen: Option<&PenaltySpec>) -> Result<EnergyBreakdown> {
    check_field(field, params)?;
    let (h, f, g) = h2d_parts(field, params, pen);
    let s = params.energy_scale();
    Ok(EnergyBreakdown {
        total: (h + f + g) / s,
        well_term: h / s,
        gradient_term: 0.0,
        penalty_term: g / s,
        ferro_2d_term: f / s,
        gamma_estimate: f64::NAN,
    })
}

/// `Σ λ² |u^{i+e₂} − u^i|²` over the stencil set.
pub fn y_variation(field: &SpinField2D) -> f64 {
    let (nx, ny) = (field.nx(), field.ny());
    let mut s = CompensatedSum::new();
    for iy in 0..ny.saturating_sub(1) {
        for ix in 0..nx.saturating_sub(2) {
            s.add((field.at(ix, iy + 1) - field.at(ix, iy)).norm_squared());
        }
    }
    field.spacing() * field.spacing() * s.value()
}
