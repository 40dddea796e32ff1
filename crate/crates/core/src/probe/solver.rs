//! Regularized logistic / softmax regression by proximal gradient descent.
//!
//! Objective, with `n_out = 1` for binary labels and `n_out = C` otherwise:
//!
//! ```text
//! F(W, b) = Σ_i ω_i ℓ_i(W, b) / Σ_i ω_i  +  (λ2 / 2)·‖W‖²  +  λ1·‖W‖₁
//! ```
//!
//! where `ℓ_i` is the logistic or cross-entropy loss of row `i`. The bias is
//! never penalized. The smooth part is handled by a gradient step, the L1 part
//! by soft-thresholding, and the step size by backtracking on the quadratic
//! upper bound. Every accepted iterate satisfies `F(x⁺) ≤ F(x)`.

use serde::{Deserialize, Serialize};

/// Dense row-major design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub n: usize,
    pub p: usize,
    pub data: Vec<f64>,
}

impl Design {
    pub fn new(n: usize, p: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * p, "design shape");
        Self { n, p, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }
}

/// Loss over a design; parameter vector layout is `[W row-major (n_out × p), b (n_out)]`.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    x: &'a Design,
    labels: &'a [usize],
    n_classes: usize,
    weights: Option<&'a [f64]>,
    weight_total: f64,
    l2: f64,
}

impl<'a> Objective<'a> {
    pub fn new(x: &'a Design, labels: &'a [usize], n_classes: usize, weights: Option<&'a [f64]>, l2: f64) -> Self {
        assert_eq!(x.n, labels.len(), "labels per row");
        assert!(n_classes >= 2);
        let weight_total = weights.map_or(x.n as f64, |w| w.iter().sum());
        Self {
            x,
            labels,
            n_classes,
            weights,
            weight_total,
            l2,
        }
    }

    pub fn n_out(&self) -> usize {
        if self.n_classes == 2 {
            1
        } else {
            self.n_classes
        }
    }

    pub fn n_params(&self) -> usize {
        self.n_out() * (self.x.p + 1)
    }

    /// Number of penalized coefficients (the leading block).
    pub fn n_penalized(&self) -> usize {
        self.n_out() * self.x.p
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.map_or(1.0, |w| w[i])
    }

    fn logits(&self, params: &[f64], row: &[f64], out: &mut [f64]) {
        let p = self.x.p;
        let bias = &params[self.n_penalized()..];
        for (k, o) in out.iter_mut().enumerate() {
            let w = &params[k * p..(k + 1) * p];
            *o = w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() + bias[k];
        }
    }

    /// Smooth part of the objective (weighted mean loss plus ridge term).
    pub fn value(&self, params: &[f64]) -> f64 {
        self.eval(params, None)
    }

    /// Smooth value; writes its gradient into `grad`.
    pub fn value_and_grad(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        self.eval(params, Some(grad))
    }

    fn eval(&self, params: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        assert_eq!(params.len(), self.n_params());
        let p = self.x.p;
        let n_out = self.n_out();
        let n_pen = self.n_penalized();
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut eta = vec![0.0; n_out];
        let mut resid = vec![0.0; n_out];
        let mut loss = 0.0;
        for i in 0..self.x.n {
            let row = self.x.row(i);
            let y = self.labels[i];
            let w = self.weight(i);
            self.logits(params, row, &mut eta);
            if n_out == 1 {
                let t = eta[0];
                // log(1 + e^t) - y·t
                loss += w * (softplus(t) - if y == 1 { t } else { 0.0 });
                resid[0] = sigmoid(t) - if y == 1 { 1.0 } else { 0.0 };
            } else {
                let lse = log_sum_exp(&eta);
                loss += w * (lse - eta[y]);
                for k in 0..n_out {
                    resid[k] = (eta[k] - lse).exp() - if k == y { 1.0 } else { 0.0 };
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                for k in 0..n_out {
                    let r = w * resid[k];
                    if r == 0.0 {
                        continue;
                    }
                    g[k * p..(k + 1) * p].iter_mut().zip(row).for_each(|(gv, xv)| *gv += r * xv);
                    g[n_pen + k] += r;
                }
            }
        }
        let scale = 1.0 / self.weight_total;
        let ridge = 0.5 * self.l2 * params[..n_pen].iter().map(|v| v * v).sum::<f64>();
        if let Some(g) = grad {
            g.iter_mut().for_each(|v| *v *= scale);
            if self.l2 != 0.0 {
                g[..n_pen].iter_mut().zip(&params[..n_pen]).for_each(|(gv, w)| *gv += self.l2 * w);
            }
        }
        loss * scale + ridge
    }

    /// Unweighted mean negative log-likelihood (no penalty terms).
    pub fn mean_log_loss(&self, params: &[f64]) -> f64 {
        let n_out = self.n_out();
        let mut eta = vec![0.0; n_out];
        let mut total = 0.0;
        for i in 0..self.x.n {
            self.logits(params, self.x.row(i), &mut eta);
            let y = self.labels[i];
            total += if n_out == 1 {
                softplus(eta[0]) - if y == 1 { eta[0] } else { 0.0 }
            } else {
                log_sum_exp(&eta) - eta[y]
            };
        }
        total / self.x.n as f64
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Stop once `|F_prev − F| ≤ tol · max(|F_prev|, 1e-12)`.
    pub tol: f64,
    pub initial_step: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 10_000,
            tol: 1e-6,
            initial_step: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: Vec<f64>,
    /// Full objective `F` at the start and after every accepted iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Minimize `objective + l1·‖W‖₁` starting from `x0`.
pub fn proximal_gradient(objective: &Objective<'_>, l1: f64, x0: Vec<f64>, opts: &SolverOptions) -> FitResult {
    let n_pen = objective.n_penalized();
    let n_params = objective.n_params();
    assert_eq!(x0.len(), n_params);

    let mut x = x0;
    let mut grad = vec![0.0; n_params];
    let mut f = objective.value_and_grad(&x, &mut grad);
    let mut total = f + l1 * l1_norm(&x[..n_pen]);
    let mut trace = vec![total];
    let mut step = opts.initial_step;
    let mut candidate = vec![0.0; n_params];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        // backtracking on the quadratic upper bound of the smooth part
        let (f_new, total_new) = loop {
            for i in 0..n_params {
                let moved = x[i] - step * grad[i];
                candidate[i] = if i < n_pen {
                    soft_threshold(moved, step * l1)
                } else {
                    moved
                };
            }
            let f_new = objective.value(&candidate);
            let mut lin = 0.0;
            let mut sq = 0.0;
            for i in 0..n_params {
                let d = candidate[i] - x[i];
                lin += grad[i] * d;
                sq += d * d;
            }
            if f_new <= f + lin + sq / (2.0 * step) || step < 1e-16 {
                break (f_new, f_new + l1 * l1_norm(&candidate[..n_pen]));
            }
            step *= 0.5;
        };
        if !(total_new <= total) {
            // no representable decrease left
            converged = true;
            break;
        }
        std::mem::swap(&mut x, &mut candidate);
        let change = total - total_new;
        total = total_new;
        trace.push(total);
        f = objective.value_and_grad(&x, &mut grad);
        debug_assert!((f - f_new).abs() <= 1e-12 * f.abs().max(1.0));
        if change <= opts.tol * trace[trace.len() - 2].abs().max(1e-12) {
            converged = true;
            break;
        }
        step *= 1.5;
    }
    FitResult {
        params: x,
        objective_trace: trace,
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, p: usize, classes: usize) -> (Design, Vec<usize>) {
        let data = (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        (Design::new(n, p, data), labels)
    }

    #[test]
    fn zero_params_give_log_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, y) = random_problem(&mut rng, 10, 3, 2);
        let obj = Objective::new(&x, &y, 2, None, 0.0);
        assert!((obj.value(&vec![0.0; obj.n_params()]) - 2f64.ln()).abs() < 1e-12);
        let (x, y) = random_problem(&mut rng, 10, 3, 3);
        let obj = Objective::new(&x, &y, 3, None, 0.0);
        assert!((obj.value(&vec![0.0; obj.n_params()]) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ridge_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, y) = random_problem(&mut rng, 12, 4, 3);
        let obj = Objective::new(&x, &y, 3, None, 0.3);
        let params: Vec<f64> = (0..obj.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut grad = vec![0.0; params.len()];
        obj.value_and_grad(&params, &mut grad);
        for i in 0..params.len() {
            let h = 1e-6;
            let mut a = params.clone();
            let mut b = params.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (obj.value(&a) - obj.value(&b)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-7, "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn softmax_normalizes() {
        let p = softmax(&[1000.0, 0.0, -1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p[0], 1.0);
    }

    #[test]
    fn trace_is_monotone_and_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (x, y) = random_problem(&mut rng, 80, 6, 2);
        let obj = Objective::new(&x, &y, 2, None, 0.01);
        let fit = proximal_gradient(&obj, 0.01, vec![0.0; obj.n_params()], &SolverOptions::default());
        assert!(fit.converged);
        assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn huge_l1_zeroes_all_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (x, y) = random_problem(&mut rng, 40, 5, 2);
        let obj = Objective::new(&x, &y, 2, None, 0.0);
        let fit = proximal_gradient(&obj, 10.0, vec![0.0; obj.n_params()], &SolverOptions::default());
        assert!(fit.params[..5].iter().all(|w| *w == 0.0));
    }

    #[test]
    fn sample_weights_scale_like_duplication() {
        // weighting row 0 by 2 equals duplicating it
        let x = Design::new(3, 1, vec![1.0, -1.0, 0.5]);
        let y = vec![1, 0, 0];
        let w = vec![2.0, 1.0, 1.0];
        let weighted = Objective::new(&x, &y, 2, Some(&w), 0.0);
        let x2 = Design::new(4, 1, vec![1.0, 1.0, -1.0, 0.5]);
        let y2 = vec![1, 1, 0, 0];
        let dup = Objective::new(&x2, &y2, 2, None, 0.0);
        let params = [0.7, -0.2];
        assert!((weighted.value(&params) - dup.value(&params)).abs() < 1e-12);
    }
}
