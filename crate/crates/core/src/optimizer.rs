//! L-BFGS with a strong-Wolfe line search, and a directional
//! finite-difference gradient checker.
//!
//! The driver minimises; [`maximize`] negates the objective and flips the
//! sign back in the trace so that trace values are the maximised quantity.

use std::collections::VecDeque;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub max_steps: usize,
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
    /// Stop once `‖∇f‖_∞` falls to this value.
    pub grad_tol: f64,
    pub max_line_search_evals: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_steps: 2000,
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            grad_tol: 1e-8,
            max_line_search_evals: 25,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(GpError::InvalidArgument(format!(
                "need 0 < c1 < c2 < 1, got c1={}, c2={}",
                self.c1, self.c2
            )));
        }
        if self.max_steps == 0 || self.memory == 0 || self.max_line_search_evals == 0 {
            return Err(GpError::InvalidArgument(
                "max_steps, memory and max_line_search_evals must be at least 1".into(),
            ));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(GpError::InvalidArgument("grad_tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// One objective evaluation as seen by the optimiser.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub grad: Vec<f64>,
    /// CG iterations spent inside this evaluation, if any.
    pub cg_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub objective: f64,
    pub grad_norm: f64,
    /// CG iterations over every evaluation since the previous record,
    /// line-search trials included.
    pub cg_iters: usize,
    pub elapsed_s: f64,
    pub params: Vec<f64>,
}

/// One record for the initial point plus one per accepted step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn cg_iters(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.cg_iters).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    LineSearchFailure,
    MaxSteps,
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub termination: Termination,
    pub trace: TrainTrace,
    pub evaluations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn axpy(x: &[f64], alpha: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect()
}

/// Minimises `f` from `x0`.
pub fn minimize<F>(f: F, x0: &[f64], cfg: &OptimizerConfig) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    minimize_observed(f, x0, cfg, |_| {})
}

/// Maximises `f` from `x0`; trace objectives are values of `f`.
pub fn maximize<F>(mut f: F, x0: &[f64], cfg: &OptimizerConfig) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    maximize_observed(&mut f, x0, cfg, |_| {})
}

pub fn maximize_observed<F, O>(mut f: F, x0: &[f64], cfg: &OptimizerConfig, mut observer: O) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
    O: FnMut(&TraceRecord),
{
    let negated = |x: &[f64]| {
        f(x).map(|mut e| {
            e.value = -e.value;
            e.grad.iter_mut().for_each(|g| *g = -*g);
            e
        })
    };
    let mut res = minimize_observed(negated, x0, cfg, |rec| {
        let mut rec = rec.clone();
        rec.objective = -rec.objective;
        observer(&rec);
    })?;
    res.value = -res.value;
    res.grad.iter_mut().for_each(|g| *g = -*g);
    for rec in &mut res.trace.records {
        rec.objective = -rec.objective;
    }
    Ok(res)
}

/// [`minimize`] with a callback invoked on every trace record as it is made.
pub fn minimize_observed<F, O>(mut f: F, x0: &[f64], cfg: &OptimizerConfig, mut observer: O) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
    O: FnMut(&TraceRecord),
{
    cfg.validate()?;
    let start = Instant::now();
    let mut x = x0.to_vec();
    let first = f(&x)?;
    if !first.value.is_finite() || first.grad.iter().any(|g| !g.is_finite()) {
        return Err(GpError::NonFinite(format!(
            "objective {} at the initial point",
            first.value
        )));
    }
    if first.grad.len() != x.len() {
        return Err(GpError::DimensionMismatch {
            expected: x.len(),
            got: first.grad.len(),
            context: "gradient length",
        });
    }
    let mut value = first.value;
    let mut grad = first.grad;
    let mut evaluations = 1;
    let mut trace = TrainTrace::default();
    let mut push = |trace: &mut TrainTrace, step, value, grad: &[f64], cg, x: &[f64]| {
        let rec = TraceRecord {
            step,
            objective: value,
            grad_norm: inf_norm(grad),
            cg_iters: cg,
            elapsed_s: start.elapsed().as_secs_f64(),
            params: x.to_vec(),
        };
        observer(&rec);
        trace.records.push(rec);
    };
    push(&mut trace, 0, value, &grad, first.cg_iters, &x);

    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut termination = Termination::MaxSteps;

    for step in 1..=cfg.max_steps {
        if inf_norm(&grad) <= cfg.grad_tol {
            termination = Termination::GradientTolerance;
            break;
        }
        // a failed search with curvature memory is retried once along the
        // steepest direction before giving up
        let mut cg = 0;
        let found = loop {
            let mut direction = two_loop(&grad, &history);
            let mut slope = dot(&grad, &direction);
            if !(slope < 0.0) {
                history.clear();
                direction = grad.iter().map(|g| -g).collect();
                slope = dot(&grad, &direction);
            }
            let alpha0 = if history.is_empty() {
                (1.0 / dot(&grad, &grad).sqrt()).min(1.0)
            } else {
                1.0
            };

            let mut ls = LineSearch {
                f: &mut f,
                x: &x,
                d: &direction,
                phi0: value,
                dphi0: slope,
                c1: cfg.c1,
                c2: cfg.c2,
                max_evals: cfg.max_line_search_evals,
                evals: 0,
                cg_iters: 0,
                best: None,
            };
            let outcome = ls.search(alpha0)?;
            evaluations += ls.evals;
            cg += ls.cg_iters;
            match outcome.or(ls.best.take()) {
                Some(p) => break Some(p),
                None if !history.is_empty() => history.clear(),
                None => break None,
            }
        };
        let Some(point) = found else {
            termination = Termination::LineSearchFailure;
            if let Some(last) = trace.records.last_mut() {
                last.cg_iters += cg;
            }
            break;
        };

        let s: Vec<f64> = point.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yk: Vec<f64> = point.grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yk);
        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&yk, &yk).sqrt() {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back((s, yk, 1.0 / sy));
        }
        x = point.x;
        value = point.value;
        grad = point.grad;
        push(&mut trace, step, value, &grad, cg, &x);
    }
    if termination == Termination::MaxSteps && inf_norm(&grad) <= cfg.grad_tol {
        termination = Termination::GradientTolerance;
    }

    Ok(OptimResult {
        x,
        value,
        grad,
        termination,
        trace,
        evaluations,
    })
}

fn two_loop(grad: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

struct Trial {
    alpha: f64,
    x: Vec<f64>,
    value: f64,
    grad: Vec<f64>,
    dphi: f64,
}

struct LineSearch<'a, F> {
    f: &'a mut F,
    x: &'a [f64],
    d: &'a [f64],
    phi0: f64,
    dphi0: f64,
    c1: f64,
    c2: f64,
    max_evals: usize,
    evals: usize,
    cg_iters: usize,
    /// Lowest-valued trial meeting the sufficient-decrease condition.
    best: Option<Trial>,
}

impl<F> LineSearch<'_, F>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    /// `None` value means the trial point could not be evaluated.
    fn eval(&mut self, alpha: f64) -> Option<Trial> {
        self.evals += 1;
        let x = axpy(self.x, alpha, self.d);
        let e = (self.f)(&x).ok()?;
        self.cg_iters += e.cg_iters;
        if !e.value.is_finite() || e.grad.iter().any(|g| !g.is_finite()) {
            return None;
        }
        let dphi = dot(&e.grad, self.d);
        let trial = Trial {
            alpha,
            x,
            value: e.value,
            grad: e.grad,
            dphi,
        };
        if self.armijo(&trial) && self.best.as_ref().is_none_or(|b| trial.value < b.value) {
            self.best = Some(Trial {
                alpha: trial.alpha,
                x: trial.x.clone(),
                value: trial.value,
                grad: trial.grad.clone(),
                dphi: trial.dphi,
            });
        }
        Some(trial)
    }

    fn armijo(&self, t: &Trial) -> bool {
        t.value <= self.phi0 + self.c1 * t.alpha * self.dphi0 && t.value < self.phi0
    }

    fn curvature(&self, t: &Trial) -> bool {
        t.dphi.abs() <= -self.c2 * self.dphi0
    }

    fn search(&mut self, alpha_init: f64) -> Result<Option<Trial>> {
        let mut prev = Trial {
            alpha: 0.0,
            x: self.x.to_vec(),
            value: self.phi0,
            grad: Vec::new(),
            dphi: self.dphi0,
        };
        let mut alpha = alpha_init;
        let mut first = true;
        while self.evals < self.max_evals {
            let Some(cur) = self.eval(alpha) else {
                // unevaluable: shrink toward the last good point
                alpha = prev.alpha + 0.5 * (alpha - prev.alpha);
                if alpha - prev.alpha <= f64::EPSILON * prev.alpha.max(1.0) {
                    return Ok(None);
                }
                continue;
            };
            if !self.armijo(&cur) || (!first && cur.value >= prev.value) {
                return Ok(self.zoom(prev, cur));
            }
            if self.curvature(&cur) {
                return Ok(Some(cur));
            }
            if cur.dphi >= 0.0 {
                return Ok(self.zoom(cur, prev));
            }
            first = false;
            alpha = cur.alpha * 2.0;
            prev = cur;
        }
        Ok(None)
    }

    fn zoom(&mut self, mut lo: Trial, mut hi: Trial) -> Option<Trial> {
        while self.evals < self.max_evals {
            let (a, b) = if lo.alpha < hi.alpha {
                (lo.alpha, hi.alpha)
            } else {
                (hi.alpha, lo.alpha)
            };
            if (b - a) <= 1e-12 * b.max(1e-300) {
                return None;
            }
            let mut alpha = cubic_minimizer(lo.alpha, lo.value, lo.dphi, hi.alpha, hi.value, hi.dphi);
            let margin = 0.1 * (b - a);
            if !alpha.is_finite() || alpha < a + margin || alpha > b - margin {
                alpha = 0.5 * (a + b);
            }
            let Some(cur) = self.eval(alpha) else {
                // treat as too long
                hi = Trial {
                    alpha,
                    x: Vec::new(),
                    value: f64::INFINITY,
                    grad: Vec::new(),
                    dphi: f64::NAN,
                };
                continue;
            };
            if !self.armijo(&cur) || cur.value >= lo.value {
                hi = cur;
            } else {
                if self.curvature(&cur) {
                    return Some(cur);
                }
                if cur.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = cur;
            }
        }
        None
    }
}

/// Minimiser of the cubic interpolating two values and slopes.
fn cubic_minimizer(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64, g2: f64) -> f64 {
    if !(f1.is_finite() && f2.is_finite() && g1.is_finite() && g2.is_finite()) {
        return f64::NAN;
    }
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let disc = d1 * d1 - g1 * g2;
    if disc < 0.0 {
        return f64::NAN;
    }
    let d2 = (x2 - x1).signum() * disc.sqrt();
    x2 - (x2 - x1) * (g2 + d2 - d1) / (g2 - g1 + 2.0 * d2)
}

/// Worst relative error between central differences of `f` and the
/// directional derivative `∇f·u` over 10 random unit directions `u`.
///
/// The relative error is `|fd − an| / max(|fd|, |an|, 1e-8)`.
pub fn check_grad<F>(mut f: F, x: &[f64], h: f64, seed: u64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(h > 0.0) {
        return Err(GpError::InvalidArgument(format!("step {h} must be positive")));
    }
    let (_, grad) = f(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let mut u: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dot(&u, &u).sqrt();
        u.iter_mut().for_each(|v| *v /= norm);
        let (fp, _) = f(&axpy(x, h, &u))?;
        let (fm, _) = f(&axpy(x, -h, &u))?;
        let fd = (fp - fm) / (2.0 * h);
        let an = dot(&grad, &u);
        let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
