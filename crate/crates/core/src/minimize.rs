//! Gradient descent with backtracking (and an optional limited-memory
//! quasi-Newton mode) on the free-node vector, plus the inversion driver.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::forward::ProblemData;
use crate::grid::SpatialField;
use crate::model::Kernel;
use crate::objective::{CarlemanConfig, Objective};
use crate::residuals::{reconstruct_k, StateVector};

/// A smooth function of the free vector.
pub trait Differentiable {
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
    /// Norm reported in the trace (e.g. `||U||_{H^2}`); `None` if not available.
    fn monitor(&self, _x: &[f64]) -> Option<f64> {
        None
    }
}

/// `J / scale`, with the `H^2` norm of the assembled state as the monitor.
pub struct ScaledObjective<'a> {
    pub objective: &'a Objective,
    pub scale: f64,
}

impl<'a> ScaledObjective<'a> {
    /// Picks the scale from `J` at the reference point (the zero start).
    pub fn normalized_at(objective: &'a Objective, reference: &[f64], scaling: Scaling) -> Result<Self> {
        let raw = match scaling {
            Scaling::None => 1.0,
            Scaling::InitialValue => objective.value(reference)?,
            Scaling::InitialGradient => norm(&objective.gradient(reference)?),
        };
        let scale = if raw > 0.0 && raw.is_finite() { raw } else { 1.0 };
        Ok(Self { objective, scale })
    }
}

/// Normalization applied to `J` before descending.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scaling {
    None,
    /// `J(U0) = 1`.
    InitialValue,
    /// `|J'(U0)| = 1`, so the gradient threshold is a relative reduction.
    InitialGradient,
}

impl Differentiable for ScaledObjective<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.objective.value(x)? / self.scale)
    }
    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (j, mut g) = self.objective.value_and_gradient(x)?;
        g.iter_mut().for_each(|v| *v /= self.scale);
        Ok((j / self.scale, g))
    }
    fn monitor(&self, x: &[f64]) -> Option<f64> {
        self.objective.state(x).ok().map(|u| u.h2_norm_sq().sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    /// `U_n = U_{n-1} - xi J'(U_{n-1})`.
    GradientDescent,
    /// Limited-memory BFGS with the given history length.
    Lbfgs { memory: usize },
}

/// Trial step for the next gradient iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepRule {
    /// Previous accepted step times `step_growth`.
    Growth,
    /// `s.s / s.y` from the last two iterates; falls back to `Growth` when
    /// the curvature estimate is not positive.
    BarzilaiBorwein,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinimizerConfig {
    pub method: Method,
    /// Initial step; `None` picks it by backtracking from 1 at iteration 0.
    pub step: Option<f64>,
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Halve the step until the Armijo condition holds.
    pub backtracking: bool,
    /// Multiplier applied to the accepted step before the next trial.
    pub step_growth: f64,
    pub step_rule: StepRule,
    /// Radius of the admissible ball; exits are logged, not projected.
    pub ball_radius: f64,
    pub scaling: Scaling,
}

impl Default for MinimizerConfig {
    fn default() -> Self {
        Self {
            method: Method::GradientDescent,
            step: None,
            max_iter: 2000,
            grad_tol: 1e-2,
            backtracking: true,
            step_growth: 2.0,
            step_rule: StepRule::BarzilaiBorwein,
            ball_radius: 1e6,
            scaling: Scaling::InitialGradient,
        }
    }
}

impl MinimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.step {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidConfig(format!("step must be positive, got {s}")));
            }
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidConfig("gradient threshold must be positive".into()));
        }
        if !(self.step_growth >= 1.0) {
            return Err(Error::InvalidConfig("step growth must be >= 1".into()));
        }
        if let Method::Lbfgs { memory } = self.method {
            if memory == 0 {
                return Err(Error::InvalidConfig("L-BFGS memory must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub value: f64,
    pub grad_norm: f64,
    /// Step length used to reach this iterate (0 for the start).
    pub step: f64,
    pub accepted: bool,
    pub norm: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxIterations,
    StepUnderflow,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Converged => "converged",
            StopReason::MaxIterations => "max-iterations",
            StopReason::StepUnderflow => "step-underflow",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
    pub stop: StopReason,
    /// Iterations at which the monitored norm exceeded the ball radius.
    pub ball_exits: Vec<usize>,
}

impl IterationTrace {
    /// Accepted iterations (excluding the start).
    pub fn iterations(&self) -> usize {
        self.records.last().map_or(0, |r| r.iteration)
    }

    pub fn final_record(&self) -> &IterationRecord {
        self.records.last().expect("trace always holds the start")
    }

    pub fn is_monotone(&self) -> bool {
        self.records.windows(2).all(|w| w[1].value <= w[0].value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,J,grad_norm,step,accepted,h2_norm\n");
        for r in &self.records {
            let norm = r.norm.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{},{}", r.iteration, r.value, r.grad_norm, r.step, r.accepted as u8, norm);
        }
        s
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-20;

/// Minimizes `f` from `x0`.
pub fn descend(f: &dyn Differentiable, x0: &[f64], cfg: &MinimizerConfig) -> Result<(Vec<f64>, IterationTrace)> {
    cfg.validate()?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Optimizer { iteration: 0, reason: "non-finite starting point".into() });
    }
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f.value_and_gradient(&x)?;
    let mut gn = norm(&g);
    let mut records = vec![IterationRecord {
        iteration: 0,
        value: fx,
        grad_norm: gn,
        step: 0.0,
        accepted: true,
        norm: f.monitor(&x),
    }];
    let mut ball_exits = Vec::new();
    let mut step = cfg.step.unwrap_or(1.0);
    let mut history: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut stop = StopReason::MaxIterations;
    for it in 1..=cfg.max_iter {
        if gn < cfg.grad_tol {
            stop = StopReason::Converged;
            break;
        }
        if !fx.is_finite() || !gn.is_finite() {
            return Err(Error::Optimizer { iteration: it, reason: "non-finite objective or gradient".into() });
        }
        let (dir, mut t) = match cfg.method {
            Method::GradientDescent => (g.iter().map(|v| -v).collect::<Vec<_>>(), step),
            Method::Lbfgs { .. } => {
                let d = lbfgs_direction(&g, &history);
                if dot(&d, &g) < 0.0 {
                    (d, 1.0)
                } else {
                    history.clear();
                    (g.iter().map(|v| -v).collect(), step)
                }
            }
        };
        let slope = dot(&dir, &g);
        let (x_new, f_new) = loop {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
            let ft = match f.value(&trial) {
                Ok(v) if v.is_finite() => v,
                _ => f64::INFINITY,
            };
            if !cfg.backtracking || ft <= fx + ARMIJO * t * slope {
                break (trial, ft);
            }
            t *= 0.5;
            if t < MIN_STEP {
                stop = StopReason::StepUnderflow;
                break (Vec::new(), f64::NAN);
            }
        };
        if x_new.is_empty() {
            break;
        }
        if !f_new.is_finite() {
            return Err(Error::Optimizer { iteration: it, reason: "objective became non-finite".into() });
        }
        let (fv, g_new) = f.value_and_gradient(&x_new)?;
        debug_assert!((fv - f_new).abs() <= 1e-9 * fv.abs().max(1.0));
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let curved = sy > 1e-12 * norm(&s) * norm(&y);
        match cfg.method {
            Method::Lbfgs { memory } => {
                if curved {
                    if history.len() == memory {
                        history.remove(0);
                    }
                    history.push((s, y, 1.0 / sy));
                }
            }
            Method::GradientDescent => {
                step = match cfg.step_rule {
                    StepRule::BarzilaiBorwein if curved => dot(&s, &s) / sy,
                    _ => t * cfg.step_growth,
                };
            }
        }
        x = x_new;
        fx = fv;
        g = g_new;
        gn = norm(&g);
        let monitor = f.monitor(&x);
        if monitor.is_some_and(|m| m > cfg.ball_radius) {
            ball_exits.push(it);
        }
        records.push(IterationRecord { iteration: it, value: fx, grad_norm: gn, step: t, accepted: true, norm: monitor });
    }
    if stop == StopReason::MaxIterations && gn < cfg.grad_tol {
        stop = StopReason::Converged;
    }
    Ok((x, IterationTrace { records, stop, ball_exits }))
}

fn lbfgs_direction(g: &[f64], history: &[(Vec<f64>, Vec<f64>, f64)]) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.last() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Result of one inversion.
#[derive(Clone, Debug)]
pub struct Inversion {
    pub state: StateVector,
    pub k: SpatialField,
    pub trace: IterationTrace,
    /// Normalization applied to `J` during the descent.
    pub scale: f64,
}

/// Builds the objective, descends from the zero start, enforces the
/// boundary conditions and reconstructs `k`.
pub fn run_inversion(
    data: &ProblemData,
    kernel: &Kernel,
    carleman: CarlemanConfig,
    minimizer: &MinimizerConfig,
) -> Result<Inversion> {
    data.validate()?;
    let objective = Objective::new(data, kernel, carleman)?;
    let x0 = vec![0.0; objective.free_len()];
    let scaled = ScaledObjective::normalized_at(&objective, &x0, minimizer.scaling)?;
    let (x, trace) = descend(&scaled, &x0, minimizer)?;
    let state = objective.state(&x)?;
    let k = reconstruct_k(&state.field(0), data)?;
    Ok(Inversion { state, k, trace, scale: scaled.scale })
}
