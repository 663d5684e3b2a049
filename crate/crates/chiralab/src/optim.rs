//! Limited-memory BFGS with Armijo backtracking over a retraction.
//!
//! Points are flat `f64` vectors. Manifold structure enters only through
//! [`Objective::retract`] and [`Objective::project`].

use std::collections::VecDeque;

pub(crate) trait Objective {
    /// Value and tangent gradient at `x`.
    fn value_grad(&self, x: &[f64], g: &mut [f64]) -> f64;

    fn value(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.value_grad(x, &mut g)
    }

    /// `out = R_x(a d)`.
    fn retract(&self, x: &[f64], d: &[f64], a: f64, out: &mut [f64]) {
        for ((o, xi), di) in out.iter_mut().zip(x).zip(d) {
            *o = xi + a * di;
        }
    }

    /// Project `v` onto the tangent space at `x`.
    fn project(&self, _x: &[f64], _v: &mut [f64]) {}

    fn sup_norm(&self, g: &[f64]) -> f64 {
        g.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Apply an approximate inverse Hessian in place. Returns `false` when there is none.
    fn precondition(&self, _x: &[f64], _v: &mut [f64]) -> bool {
        false
    }
}

/// Cholesky factor of a symmetric positive definite matrix with bandwidth 2.
#[derive(Debug, Clone)]
pub(crate) struct Banded5 {
    // l[i] = (L[i][i], L[i][i-1], L[i][i-2])
    l: Vec<[f64; 3]>,
}

impl Banded5 {
    /// Rows `(a[i][i], a[i][i-1], a[i][i-2])`.
    pub fn factor(a: &[[f64; 3]]) -> Option<Self> {
        let n = a.len();
        let mut l = vec![[0.0; 3]; n];
        for i in 0..n {
            let l2 = if i >= 2 { a[i][2] / l[i - 2][0] } else { 0.0 };
            let l1 = if i >= 1 {
                let sub = if i >= 2 { l2 * l[i - 1][1] } else { 0.0 };
                (a[i][1] - sub) / l[i - 1][0]
            } else {
                0.0
            };
            let d = a[i][0] - l1 * l1 - l2 * l2;
            if !(d > 0.0) {
                return None;
            }
            l[i] = [d.sqrt(), l1, l2];
        }
        Some(Self { l })
    }

    /// `v ← A⁻¹ v` reading every `stride`-th entry starting at `offset`.
    pub fn solve_strided(&self, v: &mut [f64], offset: usize, stride: usize) {
        let n = self.l.len();
        let idx = |i: usize| offset + i * stride;
        for i in 0..n {
            let mut s = v[idx(i)];
            if i >= 1 {
                s -= self.l[i][1] * v[idx(i - 1)];
            }
            if i >= 2 {
                s -= self.l[i][2] * v[idx(i - 2)];
            }
            v[idx(i)] = s / self.l[i][0];
        }
        for i in (0..n).rev() {
            let mut s = v[idx(i)];
            if i + 1 < n {
                s -= self.l[i + 1][1] * v[idx(i + 1)];
            }
            if i + 2 < n {
                s -= self.l[i + 2][2] * v[idx(i + 2)];
            }
            v[idx(i)] = s / self.l[i][0];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Stop {
    Converged,
    MaxIters,
    LineSearch,
    /// Relative decrease over the last `STALL_WINDOW` iterations fell below `stall_tol`.
    Stalled,
}

const STALL_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy)]
pub(crate) struct LbfgsOptions {
    pub max_iters: usize,
    /// Stop once `sup_norm(g) * grad_scale <= grad_tol`.
    pub grad_tol: f64,
    pub grad_scale: f64,
    /// Largest coordinate move of the first (steepest descent) step.
    pub step_init: f64,
    pub memory: usize,
    /// Zero disables the stall test.
    pub stall_tol: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct LbfgsResult {
    pub x: Vec<f64>,
    pub iters: usize,
    pub grad_sup: f64,
    pub stop: Stop,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

pub(crate) fn lbfgs(obj: &impl Objective, x0: Vec<f64>, opts: &LbfgsOptions) -> LbfgsResult {
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut f = obj.value_grad(&x, &mut g);
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut xn = vec![0.0; n];
    let mut gn = vec![0.0; n];
    let mut alphas = vec![0.0; opts.memory];
    let mut iters = 0;
    let mut recent: VecDeque<f64> = VecDeque::with_capacity(STALL_WINDOW + 1);
    let stop = loop {
        let gsup = obj.sup_norm(&g) * opts.grad_scale;
        if gsup <= opts.grad_tol {
            break Stop::Converged;
        }
        if iters >= opts.max_iters {
            break Stop::MaxIters;
        }
        iters += 1;

        let mut d = g.clone();
        for (k, (s, y, rho)) in hist.iter().enumerate().rev() {
            let a = rho * dot(s, &d);
            alphas[k] = a;
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
        }
        if !obj.precondition(&x, &mut d) {
            let gamma = match hist.back() {
                Some((s, y, _)) => dot(s, y) / dot(y, y),
                None => opts.step_init / obj.sup_norm(&g).max(1e-300),
            };
            for di in d.iter_mut() {
                *di *= gamma;
            }
        }
        for (k, (s, y, rho)) in hist.iter().enumerate() {
            let b = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (alphas[k] - b) * si;
            }
        }
        for di in d.iter_mut() {
            *di = -*di;
        }
        obj.project(&x, &mut d);
        let mut gd = dot(&g, &d);
        if !(gd < 0.0) {
            hist.clear();
            let s = opts.step_init / obj.sup_norm(&g).max(1e-300);
            d = g.iter().map(|v| -s * v).collect();
            gd = dot(&g, &d);
        }

        let mut a = 1.0;
        let mut fnew = f64::NAN;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            obj.retract(&x, &d, a, &mut xn);
            fnew = obj.value_grad(&xn, &mut gn);
            if fnew <= f + ARMIJO_C * a * gd {
                accepted = true;
                break;
            }
            a *= 0.5;
        }
        if !accepted {
            if hist.is_empty() {
                break Stop::LineSearch;
            }
            hist.clear();
            continue;
        }

        let mut s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        obj.project(&xn, &mut s);
        let mut gp = g.clone();
        obj.project(&xn, &mut gp);
        let y: Vec<f64> = gn.iter().zip(&gp).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-14 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if hist.len() == opts.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        std::mem::swap(&mut x, &mut xn);
        std::mem::swap(&mut g, &mut gn);
        f = fnew;
        recent.push_back(f);
        if recent.len() > STALL_WINDOW {
            let old = recent.pop_front().unwrap_or(f);
            if old - f <= opts.stall_tol * f.abs().max(1.0) {
                break Stop::Stalled;
            }
        }
    };
    let grad_sup = obj.sup_norm(&g) * opts.grad_scale;
    LbfgsResult { x, iters, grad_sup, stop }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;
    impl Objective for Rosenbrock {
        fn value_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        }
    }

    #[test]
    fn banded_solve() {
        // tridiagonal-plus test matrix against a dense product
        let n = 9;
        let a: Vec<[f64; 3]> = (0..n).map(|i| [6.0 + i as f64, if i > 0 { -2.0 } else { 0.0 }, if i > 1 { 0.5 } else { 0.0 }]).collect();
        let f = Banded5::factor(&a).unwrap();
        let x: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut b = vec![0.0; n];
        for i in 0..n {
            b[i] += a[i][0] * x[i];
            if i >= 1 {
                b[i] += a[i][1] * x[i - 1];
                b[i - 1] += a[i][1] * x[i];
            }
            if i >= 2 {
                b[i] += a[i][2] * x[i - 2];
                b[i - 2] += a[i][2] * x[i];
            }
        }
        f.solve_strided(&mut b, 0, 1);
        for i in 0..n {
            assert!((b[i] - x[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn rosenbrock() {
        let opts = LbfgsOptions { max_iters: 500, grad_tol: 1e-10, grad_scale: 1.0, step_init: 0.1, memory: 8, stall_tol: 0.0 };
        let r = lbfgs(&Rosenbrock, vec![-1.2, 1.0], &opts);
        assert_eq!(r.stop, Stop::Converged);
        assert!((r.x[0] - 1.0).abs() < 1e-8 && (r.x[1] - 1.0).abs() < 1e-8);
    }
}
