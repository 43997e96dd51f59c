//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

/// A smooth function to minimize.
pub trait Objective {
    fn dim(&self) -> usize;

    /// Returns f(x) and writes the gradient into `grad`.
    fn evaluate(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub history_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value at the start and after every accepted step.
    pub trace: Vec<f64>,
}

const ARMIJO_C1: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 60;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Two-loop recursion: returns the quasi-Newton direction -H*g.
fn direction(grad: &[f64], history: &VecDeque<Pair>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for pair in history.iter().rev() {
        let alpha = pair.rho * dot(&pair.s, &q);
        q.iter_mut().zip(&pair.y).for_each(|(q, y)| *q -= alpha * y);
        alphas.push(alpha);
    }
    if let Some(last) = history.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        q.iter_mut().for_each(|q| *q *= gamma);
    }
    for (pair, alpha) in history.iter().zip(alphas.into_iter().rev()) {
        let beta = pair.rho * dot(&pair.y, &q);
        q.iter_mut()
            .zip(&pair.s)
            .for_each(|(q, s)| *q += (alpha - beta) * s);
    }
    q.iter_mut().for_each(|q| *q = -*q);
    q
}

pub fn minimize<O: Objective>(objective: &O, x0: Vec<f64>, config: &LbfgsConfig) -> LbfgsOutcome {
    let n = objective.dim();
    assert_eq!(x0.len(), n, "initial point has wrong dimension");

    let mut x = x0;
    let mut grad = vec![0.0; n];
    let mut value = objective.evaluate(&x, &mut grad);
    let mut trace = vec![value];
    let mut history: VecDeque<Pair> = VecDeque::with_capacity(config.history_size);
    let mut iterations = 0;

    let mut trial = vec![0.0; n];
    let mut trial_grad = vec![0.0; n];

    while norm(&grad) > config.gradient_tolerance && iterations < config.max_iterations {
        let mut dir = direction(&grad, &history);
        let mut slope = dot(&grad, &dir);
        if slope.is_nan() || slope >= 0.0 {
            history.clear();
            dir = grad.iter().map(|g| -g).collect();
            slope = -dot(&grad, &grad);
        }
        let mut step = if history.is_empty() {
            (1.0 / norm(&grad)).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            for i in 0..n {
                trial[i] = x[i] + step * dir[i];
            }
            let v = objective.evaluate(&trial, &mut trial_grad);
            if v.is_finite() && v <= value + ARMIJO_C1 * step * slope {
                accepted = Some(v);
                break;
            }
            step *= BACKTRACK;
        }

        let Some(new_value) = accepted else {
            if history.is_empty() {
                break;
            }
            // Stale curvature pairs can produce a poor direction; retry from
            // steepest descent before giving up.
            history.clear();
            continue;
        };

        let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if history.len() == config.history_size {
                history.pop_front();
            }
            if config.history_size > 0 {
                history.push_back(Pair {
                    s,
                    y,
                    rho: 1.0 / sy,
                });
            }
        }

        std::mem::swap(&mut x, &mut trial);
        std::mem::swap(&mut grad, &mut trial_grad);
        value = new_value;
        trace.push(value);
        iterations += 1;
    }

    let gradient_norm = norm(&grad);
    LbfgsOutcome {
        x,
        value,
        gradient_norm,
        iterations,
        converged: gradient_norm <= config.gradient_tolerance,
        trace,
    }
}
