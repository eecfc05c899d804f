//! The unrolled inner solver: a fixed number of accelerated projected
//! gradient iterations with inertial extrapolation and the smoothed orthant
//! projection, optionally recording every intermediate the backward sweep
//! needs.

use ndarray::Array2;

use crate::energy::{smooth_project, EnergySpec};
use crate::error::CoreError;
use crate::grid_ops::upsample_adjoint;

/// Inertial weight: no momentum on the first step, then (k − 1)/(k + 2).
pub fn beta(k: usize) -> f64 {
    if k == 0 {
        0.0
    } else {
        (k as f64 - 1.0) / (k as f64 + 2.0)
    }
}

/// Per-iteration step sizes; the schedule length is the unrolling depth.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule(Vec<f64>);

impl StepSchedule {
    pub fn new(alphas: Vec<f64>) -> Result<Self, CoreError> {
        if alphas.is_empty() || alphas.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(CoreError::BadSchedule);
        }
        Ok(StepSchedule(alphas))
    }

    pub fn constant(alpha: f64, iterations: usize) -> Result<Self, CoreError> {
        Self::new(vec![alpha; iterations])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, k: usize) -> f64 {
        self.0[k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// The full learnable bundle: penalty weight, per-iteration step sizes,
/// binarization threshold, kernel width.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub rho: f64,
    pub alpha: Vec<f64>,
    pub delta: f64,
    pub width: f64,
}

impl HyperParams {
    pub fn schedule(&self) -> Result<StepSchedule, CoreError> {
        StepSchedule::new(self.alpha.clone())
    }
}

/// Data-dependent starting iterate: the measurements clipped to the orthant
/// and, past unit sampling, spread evenly over each patch so the block sums
/// reproduce them. Total mass equals the clipped data mass either way.
pub fn init_point(f: &Array2<f64>, factor: usize) -> Result<Array2<f64>, CoreError> {
    if factor == 1 {
        Ok(f.mapv(|v| v.max(0.0)))
    } else {
        let lifted = upsample_adjoint(f, factor)?;
        let norm = (factor * factor) as f64;
        Ok(lifted.mapv(|v| (v / norm).max(0.0)))
    }
}

/// One recorded iteration.
#[derive(Debug, Clone)]
pub struct SolveStep {
    /// Extrapolated point before projection.
    pub v_bar: Array2<f64>,
    /// Π(v̄): where the energy gradient is evaluated.
    pub v: Array2<f64>,
    /// Gradient step v − α∇E(v), before the final projection.
    pub w: Array2<f64>,
    /// Next iterate Π(w).
    pub u_next: Array2<f64>,
    /// ∇E(v), cached for the backward sweep.
    pub grad: Array2<f64>,
    /// Av, cached so curvature weights need no extra forward pass.
    pub av: Array2<f64>,
}

/// Forward record of an unrolled solve.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub initial: Array2<f64>,
    pub steps: Vec<SolveStep>,
}

/// Run the unrolled solver. Returns the final iterate and, when `capture`
/// is set, the trajectory feeding reverse-mode differentiation.
pub fn solve_unrolled(
    spec: &EnergySpec,
    f: &Array2<f64>,
    schedule: &StepSchedule,
    capture: bool,
) -> Result<(Array2<f64>, Option<Trajectory>), CoreError> {
    spec.validate(f)?;
    let u0 = init_point(f, spec.model.factor())?;
    let mut steps = capture.then(|| Vec::with_capacity(schedule.len()));

    let mut u_prev = u0.clone();
    let mut u = u0.clone();
    for k in 0..schedule.len() {
        let b = beta(k);
        let v_bar = if b == 0.0 {
            u.clone()
        } else {
            &u + &((&u - &u_prev) * b)
        };
        let v = smooth_project(&v_bar, spec.proj_eps);
        let av = spec.model.apply(&v);
        let grad = spec.gradient_at(&av, f);
        let w = &v - &(&grad * schedule.get(k));
        let u_next = smooth_project(&w, spec.proj_eps);

        u_prev = u;
        if let Some(rec) = steps.as_mut() {
            u = u_next.clone();
            rec.push(SolveStep {
                v_bar,
                v,
                w,
                u_next,
                grad,
                av,
            });
        } else {
            u = u_next;
        }
    }

    let trajectory = steps.map(|s| Trajectory {
        initial: u0,
        steps: s,
    });
    Ok((u, trajectory))
}
