//! Browser bindings. Every op takes plain numbers and returns a flat `Vec<f64>`
//! or an error string, so the page needs no glue beyond the generated module.

use chiralab::continuum::{solve_profile, ProfileProblem, SolveOptions};
use chiralab::energies::{eval_hsl_scaled, ModelParams};
use chiralab::geometry::{chirality, e3, rotation_between, Vec3};
use chiralab::penalty::PenaltySpec;
use chiralab::profiles::{ground_helix, sample_model, switched_model, SpeedFn};
use wasm_bindgen::prelude::*;

fn unit(x: f64, y: f64, z: f64) -> Result<Vec3, String> {
    let v = Vec3::new(x, y, z);
    let n = v.norm();
    if !(n > 1e-12) || !n.is_finite() {
        return Err("direction must be a nonzero finite vector".into());
    }
    Ok(v / n)
}

fn lambda_for(delta: f64, c: f64) -> f64 {
    c * delta.sqrt()
}

/// Tanh transition from `qm` to `qp`. Returns `[scaled energy, z_0, z_1, ...]`
/// where `z_i` is the third chirality component along the chain.
pub fn tanh_chain_native(qm: [f64; 3], qp: [f64; 3], delta: f64, c: f64) -> Result<Vec<f64>, String> {
    let (qm, qp) = (unit(qm[0], qm[1], qm[2])?, unit(qp[0], qp[1], qp[2])?);
    let lambda = lambda_for(delta, c);
    let params = ModelParams::new(lambda, delta).map_err(|e| e.to_string())?;
    let model = switched_model(&qm, &qp, SpeedFn::Tanh).map_err(|e| e.to_string())?;
    let chain = sample_model(&model, lambda, delta, 0.0).map_err(|e| e.to_string())?;
    let e = eval_hsl_scaled(&chain, &params).map_err(|e| e.to_string())?;
    let z = chirality(&chain, delta).map_err(|e| e.to_string())?;
    Ok(std::iter::once(e).chain(z.values.iter().map(|w| w.z)).collect())
}

/// Scaled energy of the ground helix with the given axis.
pub fn helix_energy_native(axis: [f64; 3], delta: f64, c: f64) -> Result<f64, String> {
    let axis = unit(axis[0], axis[1], axis[2])?;
    let lambda = lambda_for(delta, c);
    let params = ModelParams::new(lambda, delta).map_err(|e| e.to_string())?;
    let h = ground_helix(delta, &rotation_between(&e3(), &axis), params.sites_on_unit_interval(), lambda)
        .map_err(|e| e.to_string())?;
    eval_hsl_scaled(&h, &params).map_err(|e| e.to_string())
}

/// Soft transition cost between `+q1` and `q` for the axis pair `{e3, q2}`,
/// on a coarse grid. `to_second` picks `+q2` as the target, otherwise `−q1`.
pub fn h_g_native(tilt: f64, to_second: bool) -> Result<f64, String> {
    if !(tilt > 0.05 && tilt < std::f64::consts::FRAC_PI_2 + 1e-12) {
        return Err("tilt must lie in (0.05, pi/2]".into());
    }
    let q1 = e3();
    let q2 = Vec3::new(tilt.sin(), 0.0, tilt.cos());
    let pen = PenaltySpec::dist_to_qk(vec![q1, q2]).map_err(|e| e.to_string())?;
    let target = if to_second { q2 } else { -q1 };
    let prob = ProfileProblem::soft(q1, target, pen).with_grid(10.0, 0.04);
    let opts = SolveOptions { max_iters: 400, ..SolveOptions::default() };
    solve_profile(&prob, &opts).map(|(_, v)| v).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn tanh_chain(qm: &[f64], qp: &[f64], delta: f64, c: f64) -> Result<Vec<f64>, JsError> {
    let (a, b) = (arr(qm)?, arr(qp)?);
    tanh_chain_native(a, b, delta, c).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn helix_energy(axis: &[f64], delta: f64, c: f64) -> Result<f64, JsError> {
    helix_energy_native(arr(axis)?, delta, c).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn h_g(tilt: f64, to_second: bool) -> Result<f64, JsError> {
    h_g_native(tilt, to_second).map_err(|e| JsError::new(&e))
}

fn arr(v: &[f64]) -> Result<[f64; 3], JsError> {
    v.try_into().map_err(|_| JsError::new("expected three components"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_near_eight_thirds() {
        let out = tanh_chain_native([0.0, 0.0, 1.0], [0.0, 0.0, -1.0], 1e-3, 0.05).unwrap();
        assert!((out[0] - 8.0 / 3.0).abs() < 0.1, "{}", out[0]);
        assert!(out[1] > 0.9 && *out.last().unwrap() < -0.9);
    }

    #[test]
    fn helix_is_cheap() {
        assert!(helix_energy_native([1.0, 0.0, 0.0], 1e-3, 0.05).unwrap() < 1e-6);
        assert!(helix_energy_native([0.0, 0.0, 0.0], 1e-3, 0.05).is_err());
    }

    #[test]
    fn h_g_orders() {
        let near = h_g_native(0.3, true).unwrap();
        let far = h_g_native(0.3, false).unwrap();
        assert!(near < far, "{near} {far}");
        assert!(h_g_native(3.0, true).is_err());
    }
}
