//! Optimizers: SGD with momentum and cosine annealing for training, and a
//! limited-memory BFGS with Armijo backtracking for image-space objectives.

use std::collections::VecDeque;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct SgdState<S: Scalar = f32> {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<S>>,
}

impl<S: Scalar> SgdState<S> {
    pub fn new(lr0: f64, momentum: f64, weight_decay: f64, params: &[Tensor<S>]) -> Self {
        SgdState {
            lr0,
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<S>] {
        &self.velocity
    }
}

/// `v ← μ·v + g + λ·p; p ← p − lr·v` for every parameter.
pub fn sgd_step<S: Scalar>(
    params: &mut [Tensor<S>],
    grads: &[Tensor<S>],
    state: &mut SgdState<S>,
    step_lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::invalid(format!(
            "sgd_step: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite { op: "sgd_step" });
        }
    }
    let (mu, wd, lr) = (S::lit(state.momentum), S::lit(state.weight_decay), S::lit(step_lr));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        let new_v: Vec<S> = v
            .data()
            .iter()
            .zip(g.data())
            .zip(p.data())
            .map(|((&v, &g), &p)| mu * v + g + wd * p)
            .collect();
        let new_p: Vec<S> = p.data().iter().zip(&new_v).map(|(&p, &v)| p - lr * v).collect();
        *v = Tensor::from_parts(v.shape().to_vec(), new_v);
        *p = Tensor::from_parts(p.shape().to_vec(), new_p);
    }
    Ok(())
}

/// `lr₀·(1 + cos(π·step/total))/2`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    let total = total.max(1);
    let step = step.min(total);
    lr0 * (1.0 + (PI * step as f64 / total as f64).cos()) / 2.0
}

pub const ARMIJO_C: f64 = 1e-4;
pub const BACKTRACK_SHRINK: f64 = 0.5;
pub const MAX_SHRINKS: usize = 20;
pub const FALLBACK_STEP: f64 = 1e-4;
const CURVATURE_EPS: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LbfgsState {
    history: VecDeque<(Vec<f64>, Vec<f64>)>,
    pub memory: usize,
    pub lr: f64,
    pub max_iter: usize,
    /// Box constraint applied to every iterate (and line-search trial point).
    pub bounds: Option<(f64, f64)>,
    pub grad_tol: f64,
}

impl LbfgsState {
    pub fn new(lr: f64, max_iter: usize) -> Self {
        LbfgsState {
            history: VecDeque::new(),
            memory: 10,
            lr,
            max_iter,
            bounds: None,
            grad_tol: 1e-12,
        }
    }

    pub fn with_bounds(mut self, lo: f64, hi: f64) -> Self {
        self.bounds = Some((lo, hi));
        self
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    fn project(&self, x: &mut [f64]) {
        if let Some((lo, hi)) = self.bounds {
            for v in x {
                *v = v.clamp(lo, hi);
            }
        }
    }

    /// Two-loop recursion: `−H·g` for the implicit inverse Hessian `H`.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(self.history.len());
        for (s, y) in self.history.iter().rev() {
            let rho = 1.0 / dot(y, s);
            let a = rho * dot(s, &q);
            axpy(-a, y, &mut q);
            alphas.push((a, rho));
        }
        let gamma = match self.history.back() {
            Some((s, y)) => dot(s, y) / dot(y, y),
            None => (1.0 / g.iter().map(|v| v.abs()).sum::<f64>()).min(1.0),
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y), (a, rho)) in self.history.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            axpy(a - b, s, &mut q);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    fn remember(&mut self, s: Vec<f64>, y: Vec<f64>) {
        if dot(&s, &y) > CURVATURE_EPS {
            if self.history.len() == self.memory {
                self.history.pop_front();
            }
            self.history.push_back((s, y));
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Tensor<f64>,
    pub f: f64,
    /// Objective at the start point followed by each accepted iterate.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
}

/// Minimizes `f` from `x0`. `f` returns the value and gradient at a point.
///
/// Each outer iteration takes the two-loop direction, then backtracks from
/// step `lr` (halving, at most 20 times) until the Armijo condition holds at
/// the projected trial point. If backtracking fails, a plain gradient step
/// of size 1e-4 is tried and accepted only if it decreases `f`; otherwise
/// the run stops. The returned point is the best one seen.
pub fn lbfgs_minimize(
    mut f: impl FnMut(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
    x0: &Tensor<f64>,
    state: &mut LbfgsState,
) -> Result<LbfgsResult> {
    let shape = x0.shape().to_vec();
    let mut evaluations = 0;
    let mut eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        evaluations += 1;
        let (v, g) = f(&Tensor::from_parts(shape.clone(), x.to_vec()))?;
        if g.shape() != shape.as_slice() {
            return Err(Error::shape("lbfgs gradient", g.shape(), &shape));
        }
        Ok((v, g.into_data()))
    };

    let mut x = x0.data().to_vec();
    state.project(&mut x);
    let (mut fx, mut gx) = eval(&x)?;
    if !fx.is_finite() || gx.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "lbfgs_minimize" });
    }
    let mut trace = vec![fx];
    let mut iterations = 0;

    while iterations < state.max_iter {
        if gx.iter().all(|v| v.abs() <= state.grad_tol) {
            break;
        }
        let mut d = state.direction(&gx);
        if dot(&gx, &d) >= 0.0 {
            state.history.clear();
            d = state.direction(&gx);
        }

        let mut step = state.lr;
        let mut accepted = None;
        for _ in 0..=MAX_SHRINKS {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            state.project(&mut trial);
            let (ft, gt) = eval(&trial)?;
            let decrease: f64 = gx
                .iter()
                .zip(trial.iter().zip(&x))
                .map(|(g, (t, xi))| g * (t - xi))
                .sum();
            if ft.is_finite() && gt.iter().all(|v| v.is_finite()) && ft <= fx + ARMIJO_C * decrease {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= BACKTRACK_SHRINK;
        }
        if accepted.is_none() {
            state.history.clear();
            let mut trial: Vec<f64> = x.iter().zip(&gx).map(|(xi, g)| xi - FALLBACK_STEP * g).collect();
            state.project(&mut trial);
            let (ft, gt) = eval(&trial)?;
            if ft.is_finite() && ft < fx {
                accepted = Some((trial, ft, gt));
            }
        }
        let Some((xn, fn_, gn)) = accepted else {
            break;
        };
        iterations += 1;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let moved = s.iter().any(|&v| v != 0.0);
        state.remember(s, y);
        x = xn;
        fx = fn_;
        gx = gn;
        trace.push(fx);
        if !moved {
            break;
        }
    }

    Ok(LbfgsResult {
        x: Tensor::from_parts(shape, x),
        f: fx,
        trace,
        iterations,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(x: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
        let v = x.item()?;
        Ok(((v - 3.0).powi(2), Tensor::scalar(2.0 * (v - 3.0))))
    }

    pub(crate) fn rosenbrock(x: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
        let (a, b) = (x.data()[0], x.data()[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let ga = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        let gb = 200.0 * (b - a * a);
        Ok((f, Tensor::from_f64(&[2], &[ga, gb])?))
    }

    #[test]
    fn vanilla_descent_without_momentum() {
        let mut params = vec![Tensor::<f64>::from_f64(&[2], &[1.0, -2.0]).unwrap()];
        let grads = vec![Tensor::<f64>::from_f64(&[2], &[0.5, 0.25]).unwrap()];
        let mut st = SgdState::new(0.1, 0.0, 0.0, &params);
        sgd_step(&mut params, &grads, &mut st, 0.1).unwrap();
        assert_eq!(params[0].data(), &[1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let p0 = Tensor::<f64>::from_f64(&[3], &[0.3, 0.2, -0.1]).unwrap();
        let mut params = vec![p0.clone()];
        let mut st = SgdState::new(0.1, 0.9, 0.0, &params);
        sgd_step(&mut params, &[Tensor::zeros(&[3])], &mut st, 0.1).unwrap();
        assert_eq!(params[0], p0);
    }

    #[test]
    fn heavy_ball_on_quadratic() {
        let mut params = vec![Tensor::<f64>::scalar(1.0)];
        let mut st = SgdState::new(0.1, 0.9, 0.0, &params);
        let mut reached = None;
        for step in 0..200 {
            let g = Tensor::scalar(2.0 * params[0].item().unwrap());
            sgd_step(&mut params, &[g], &mut st, 0.1).unwrap();
            if params[0].item().unwrap().abs() < 1e-3 && reached.is_none() {
                reached = Some(step);
            }
        }
        assert!(reached.is_some());
        assert!(params[0].item().unwrap().abs() < 1e-3);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut params = vec![Tensor::<f64>::scalar(1.0)];
        let mut st = SgdState::new(0.1, 0.0, 0.0, &params);
        let r = sgd_step(&mut params, &[Tensor::scalar(f64::NAN)], &mut st, 0.1);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.1), 0.1);
        assert!(cosine_lr(100, 100, 0.1).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.1) - 0.05).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 0..=37 {
            let lr = cosine_lr(s, 37, 0.1);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn lbfgs_quadratic() {
        let mut st = LbfgsState::new(1.0, 20);
        let r = lbfgs_minimize(quad, &Tensor::scalar(0.0), &mut st).unwrap();
        assert!((r.x.item().unwrap() - 3.0).abs() < 1e-6);
        assert!(r.iterations <= 20);
    }

    #[test]
    fn lbfgs_at_stationary_point() {
        let mut st = LbfgsState::new(1.0, 20);
        let r = lbfgs_minimize(quad, &Tensor::scalar(3.0), &mut st).unwrap();
        assert_eq!(r.x.item().unwrap(), 3.0);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn lbfgs_rosenbrock() {
        let mut st = LbfgsState::new(1.0, 100);
        let x0 = Tensor::from_f64(&[2], &[-1.2, 1.0]).unwrap();
        let r = lbfgs_minimize(rosenbrock, &x0, &mut st).unwrap();
        let (a, b) = (r.x.data()[0], r.x.data()[1]);
        assert!(((a - 1.0).powi(2) + (b - 1.0).powi(2)).sqrt() < 1e-3, "{a} {b}");
        for w in r.trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(st.history_len() <= 10);
    }

    #[test]
    fn lbfgs_respects_bounds() {
        let mut st = LbfgsState::new(1.0, 50).with_bounds(0.0, 1.0);
        let r = lbfgs_minimize(quad, &Tensor::scalar(0.2), &mut st).unwrap();
        assert_eq!(r.x.item().unwrap(), 1.0);
    }
}
