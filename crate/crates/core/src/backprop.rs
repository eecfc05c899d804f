//! Reverse-mode differentiation through the recorded solver trajectory:
//! exact gradients of the task losses with respect to the penalty weight,
//! every per-iteration step size, the binarization threshold, and the
//! kernel width, at the cost of two extra operator applications per
//! unrolled step.
//!
//! Each iterate enters the next two steps through the inertial
//! extrapolation, so the sweep carries two adjoint fields: `a` against the
//! newer iterate and `b` against the older one. The threshold gradient
//! never touches the trajectory at all; it lives entirely in the final
//! binarization.

use ndarray::Array2;

use crate::energy::{smooth_project_jacobian, EnergySpec, Fidelity};
use crate::error::CoreError;
use crate::grid_ops::{support_for_grid, ForwardModel, PsfKernel};
use crate::losses::{
    binarize_ground_truth, loss_l1, loss_l1_grad_delta, loss_l1_grad_u, loss_l2, loss_l2_grad,
    BinarizationParams, HuberParams,
};
use crate::solver::{beta, solve_unrolled, HyperParams, StepSchedule, Trajectory};
use crate::util::dot;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::fmt;

/// Gradient of a scalar loss with respect to the learnable bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub rho: f64,
    pub alpha: Vec<f64>,
    pub delta: f64,
    pub width: f64,
}

impl ParamGradient {
    pub fn zeros(depth: usize) -> Self {
        ParamGradient {
            rho: 0.0,
            alpha: vec![0.0; depth],
            delta: 0.0,
            width: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &ParamGradient) {
        self.rho += other.rho;
        self.delta += other.delta;
        self.width += other.width;
        assert_eq!(self.alpha.len(), other.alpha.len());
        for (a, b) in self.alpha.iter_mut().zip(&other.alpha) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.rho *= s;
        self.delta *= s;
        self.width *= s;
        for a in self.alpha.iter_mut() {
            *a *= s;
        }
    }
}

/// Task loss evaluated on the final iterate.
#[derive(Debug, Clone)]
pub enum TaskLoss<'a> {
    /// ½‖u − g‖² against the dense truth.
    Intensity { truth: &'a Array2<f64> },
    /// Robustified support comparison after smoothed binarization. The
    /// plateau follows `bin.peak`: derive it per image or freeze it.
    Localization {
        truth_bin: &'a Array2<f64>,
        bin: BinarizationParams,
        huber: HuberParams,
    },
}

impl TaskLoss<'_> {
    pub fn value(&self, u: &Array2<f64>) -> f64 {
        match self {
            TaskLoss::Intensity { truth } => loss_l2(u, truth),
            TaskLoss::Localization { truth_bin, bin, huber } => loss_l1(u, truth_bin, bin, huber),
        }
    }

    /// ∂loss/∂u, the seed of the backward sweep.
    pub fn grad_u(&self, u: &Array2<f64>) -> Array2<f64> {
        match self {
            TaskLoss::Intensity { truth } => loss_l2_grad(u, truth),
            TaskLoss::Localization { truth_bin, bin, huber } => {
                loss_l1_grad_u(u, truth_bin, bin, huber)
            }
        }
    }

    /// ∂loss/∂δ. Zero for the intensity loss, which never binarizes.
    pub fn grad_delta(&self, u: &Array2<f64>) -> f64 {
        match self {
            TaskLoss::Intensity { .. } => 0.0,
            TaskLoss::Localization { truth_bin, bin, huber } => {
                loss_l1_grad_delta(u, truth_bin, bin, huber)
            }
        }
    }
}

/// Pull the seed ∂loss/∂u(K) back through the recorded trajectory.
///
/// Uses the cached per-step gradient and coarse prediction, so each step
/// costs one forward and one adjoint operator application, plus two kernel
/// derivative taps when `want_width` is set. The starting iterate carries
/// no parameter dependence, so the sweep ends after step zero.
pub fn backprop_through_solver(
    spec: &EnergySpec,
    f: &Array2<f64>,
    schedule: &StepSchedule,
    traj: &Trajectory,
    seed: &Array2<f64>,
    want_width: bool,
) -> ParamGradient {
    let depth = schedule.len();
    assert_eq!(traj.steps.len(), depth, "trajectory depth matches schedule");
    let mut grad = ParamGradient::zeros(depth);

    // a: adjoint of u(k+1); b: adjoint of u(k), fed by the momentum of the
    // step after this one.
    let mut a = seed.clone();
    let mut b = Array2::zeros(seed.dim());

    for k in (0..depth).rev() {
        let step = &traj.steps[k];
        let alpha = schedule.get(k);

        // Through the final projection of step k.
        let lambda_w = &smooth_project_jacobian(&step.w, spec.proj_eps) * &a;

        // w = v − α∇E(v): direct parameter taps.
        grad.alpha[k] -= dot(&step.grad, &lambda_w);
        grad.rho -= alpha * lambda_w.sum();
        let a_lambda = spec.model.apply(&lambda_w);
        if want_width {
            grad.width -= alpha * spec.width_grad_dot(&step.v, f, &lambda_w, &step.av, &a_lambda);
        }

        // Through the gradient step and the extrapolation projection.
        let hv = spec.hessian_pullback(&step.av, f, a_lambda);
        let lambda_v = &lambda_w - &(&hv * alpha);
        let lambda_vbar = &smooth_project_jacobian(&step.v_bar, spec.proj_eps) * &lambda_v;

        // v̄ = (1 + β)u(k) − βu(k−1).
        let bk = beta(k);
        let mut next_a = b;
        next_a.scaled_add(1.0 + bk, &lambda_vbar);
        a = next_a;
        b = &lambda_vbar * (-bk);
    }

    grad
}

/// Solve, evaluate the loss, and differentiate it with respect to the full
/// bundle in one sweep. Returns (loss, final iterate, gradient).
pub fn solve_loss_grad(
    spec: &EnergySpec,
    f: &Array2<f64>,
    schedule: &StepSchedule,
    loss: &TaskLoss,
    want_width: bool,
) -> Result<(f64, Array2<f64>, ParamGradient), CoreError> {
    let (u, traj) = solve_unrolled(spec, f, schedule, true)?;
    let traj = traj.expect("capture requested");
    let value = loss.value(&u);
    let seed = loss.grad_u(&u);
    let mut grad = backprop_through_solver(spec, f, schedule, &traj, &seed, want_width);
    grad.delta = loss.grad_delta(&u);
    Ok((value, u, grad))
}

/// Which forward model a gradient check runs against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CheckMode {
    /// Blur-then-downsample acquisition with the given fidelity.
    Standard { fidelity: Fidelity, factor: usize },
    /// Variance-domain squared-kernel model on shifted data.
    Fluctuation { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossChoice {
    Intensity,
    Localization,
}

/// Restrict a check to one parameter; `None` checks the whole bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Rho,
    Alpha,
    Delta,
    Width,
}

/// Configuration of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct CheckConfig {
    pub mode: CheckMode,
    pub loss: LossChoice,
    /// Fine grid side.
    pub side: usize,
    /// Unrolling depth.
    pub depth: usize,
    pub seed: u64,
    pub rel_tol: f64,
    /// Relative step: h = step_scale·(1 + |θ|).
    pub step_scale: f64,
    /// Instance redraws allowed before giving up.
    pub max_attempts: u32,
    pub only: Option<ParamKind>,
}

impl CheckConfig {
    pub fn new(mode: CheckMode, loss: LossChoice) -> Self {
        CheckConfig {
            mode,
            loss,
            side: 12,
            depth: 5,
            seed: 0,
            rel_tol: 1e-4,
            step_scale: 1e-6,
            max_attempts: 20,
            only: None,
        }
    }
}

/// One parameter's analytic/numeric comparison.
#[derive(Debug, Clone)]
pub struct CheckRow {
    pub param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub pass: bool,
}

/// Outcome of a gradient check, one row per checked parameter.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub rows: Vec<CheckRow>,
    pub rel_tol: f64,
    /// Instances drawn before one cleared the breakpoint margins.
    pub attempts: u32,
}

impl CheckReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn worst_rel_err(&self) -> f64 {
        self.rows.iter().fold(0.0, |m, r| m.max(r.rel_err))
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, out: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            out,
            "{:<8} {:>24} {:>24} {:>12}  result",
            "param", "analytic", "numeric", "rel err"
        )?;
        for r in &self.rows {
            writeln!(
                out,
                "{:<8} {:>24.16e} {:>24.16e} {:>12.3e}  {}",
                r.param,
                r.analytic,
                r.numeric,
                r.rel_err,
                if r.pass { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            out,
            "tolerance {:.1e}, {} attempt(s), worst {:.3e}",
            self.rel_tol,
            self.attempts,
            self.worst_rel_err()
        )
    }
}

/// Everything needed to evaluate the checked loss at any bundle value.
struct CheckInstance {
    mode: CheckMode,
    loss: LossChoice,
    side: usize,
    support: usize,
    data: Array2<f64>,
    truth: Array2<f64>,
    truth_bin: Array2<f64>,
    theta: HyperParams,
    bin: BinarizationParams,
    hub: HuberParams,
}

fn mode_factor(mode: &CheckMode) -> usize {
    match mode {
        CheckMode::Standard { factor, .. } => *factor,
        CheckMode::Fluctuation { .. } => 1,
    }
}

fn mode_fidelity(mode: &CheckMode) -> Fidelity {
    match mode {
        CheckMode::Standard { fidelity, .. } => *fidelity,
        CheckMode::Fluctuation { .. } => Fidelity::Gaussian,
    }
}

fn build_model(
    mode: &CheckMode,
    width: f64,
    support: usize,
    side: usize,
) -> Result<ForwardModel, CoreError> {
    match mode {
        CheckMode::Standard { factor, .. } => {
            let kernel = PsfKernel::gaussian(width, support)?;
            ForwardModel::standard(&kernel, *factor, side)
        }
        CheckMode::Fluctuation { .. } => ForwardModel::squared(width, support, side),
    }
}

impl CheckInstance {
    fn task_loss(&self, delta: f64) -> TaskLoss<'_> {
        match self.loss {
            LossChoice::Intensity => TaskLoss::Intensity { truth: &self.truth },
            LossChoice::Localization => TaskLoss::Localization {
                truth_bin: &self.truth_bin,
                bin: BinarizationParams { delta, ..self.bin },
                huber: self.hub,
            },
        }
    }

    fn solve(
        &self,
        theta: &HyperParams,
        capture: bool,
    ) -> Result<(Array2<f64>, Option<Trajectory>, ForwardModel), CoreError> {
        let model = build_model(&self.mode, theta.width, self.support, self.side)?;
        let spec = EnergySpec::new(&model, mode_fidelity(&self.mode), theta.rho);
        let schedule = theta.schedule()?;
        let (u, traj) = solve_unrolled(&spec, &self.data, &schedule, capture)?;
        Ok((u, traj, model))
    }

    fn eval_loss(&self, theta: &HyperParams) -> Result<f64, CoreError> {
        let (u, _, _) = self.solve(theta, false)?;
        Ok(self.task_loss(theta.delta).value(&u))
    }

    fn analytic_gradient(&self) -> Result<(f64, ParamGradient), CoreError> {
        let model = build_model(&self.mode, self.theta.width, self.support, self.side)?;
        let spec = EnergySpec::new(&model, mode_fidelity(&self.mode), self.theta.rho);
        let schedule = self.theta.schedule()?;
        let loss = self.task_loss(self.theta.delta);
        let (value, _, grad) = solve_loss_grad(&spec, &self.data, &schedule, &loss, true)?;
        Ok((value, grad))
    }
}

/// Margins below are sized against the worst per-pixel drift a central
/// difference can cause, about |∂u/∂θ|·h ≈ 1e-4 at the default step scale,
/// with an order of magnitude to spare. Oversizing them backfires: the
/// reconstruction's values are dense around the ramp, so wide exclusion
/// bands reject every draw.
///
/// Distance projection inputs keep from the two curvature breaks of the
/// smoothed projection, 0 and ε; the blend interior is smooth and safe.
const PROJ_MARGIN: f64 = 1.5e-3;
/// Distance (in threshold offset units) binarized pixels keep from the four
/// profile breakpoints.
const BIN_MARGIN: f64 = 5e-3;
/// Residuals must be exactly zero or beyond the robustifier knee by this.
const HUBER_MARGIN: f64 = 5e-2;

fn clear_of_projection(x: f64, eps: f64) -> bool {
    x == 0.0 || (x.abs() > PROJ_MARGIN && (x - eps).abs() > PROJ_MARGIN)
}

/// Whether the instance keeps every nonlinearity input away from its
/// breakpoints, making the loss locally smooth around θ. Returns the first
/// violated constraint.
fn margins_ok(
    inst: &CheckInstance,
    traj: &Trajectory,
    u: &Array2<f64>,
    proj_eps: f64,
) -> Result<(), &'static str> {
    for step in &traj.steps {
        if step.v_bar.iter().any(|&x| !clear_of_projection(x, proj_eps)) {
            return Err("an extrapolation pixel grazes the projection breaks");
        }
        if step.w.iter().any(|&x| !clear_of_projection(x, proj_eps)) {
            return Err("a gradient-step pixel grazes the projection breaks");
        }
    }
    if inst.loss == LossChoice::Localization {
        let span = 2.0 * inst.bin.c0;
        for &s in u.iter() {
            let t = s - inst.theta.delta;
            let interior = t > BIN_MARGIN && t < span - BIN_MARGIN;
            let clear_of_blends = (t - inst.bin.eps).abs() > BIN_MARGIN
                && (span - inst.bin.eps - t).abs() > BIN_MARGIN;
            let outside = t <= -BIN_MARGIN || t >= span + BIN_MARGIN;
            if !(outside || (interior && clear_of_blends)) {
                return Err("a pixel grazes a binarization breakpoint");
            }
        }
        // At least one pixel on the ramp keeps the threshold check honest.
        let on_ramp = u
            .iter()
            .any(|&s| s - inst.theta.delta > BIN_MARGIN && s - inst.theta.delta < span - BIN_MARGIN);
        if !on_ramp {
            return Err("no pixel landed on the binarization ramp");
        }
        let b = crate::losses::binarize(u, &inst.bin_at(inst.theta.delta));
        for (bv, gv) in b.iter().zip(inst.truth_bin.iter()) {
            let r = bv - gv;
            if r != 0.0 && r.abs() < inst.hub.gamma + HUBER_MARGIN {
                return Err("a residual grazes the robustifier knee");
            }
        }
    }
    Ok(())
}

impl CheckInstance {
    fn bin_at(&self, delta: f64) -> BinarizationParams {
        BinarizationParams { delta, ..self.bin }
    }
}

/// Draw one synthetic instance: sparse emitters on the fine grid, data from
/// the base model plus mild noise, a varied step schedule, and a threshold
/// placed so the reconstruction straddles the binarization ramp.
fn draw_instance(config: &CheckConfig, rng: &mut ChaCha8Rng) -> Result<CheckInstance, CoreError> {
    let side = config.side;
    let factor = mode_factor(&config.mode);
    let width = match config.mode {
        CheckMode::Standard { .. } => 1.5,
        CheckMode::Fluctuation { .. } => 2.0,
    };
    let support = support_for_grid(width, side);

    // Variance-domain sources live on the scale of intensity fluctuations
    // squared, far above the per-frame intensities of the standard model.
    let (lo, hi) = match config.mode {
        CheckMode::Standard { .. } => (100.0, 255.0),
        CheckMode::Fluctuation { .. } => (5e3, 2e4),
    };
    let mut truth = Array2::zeros((side, side));
    let emitters = (side * side / 36).max(2);
    for _ in 0..emitters {
        let i = rng.random_range(0..side);
        let j = rng.random_range(0..side);
        truth[[i, j]] += rng.random_range(lo..hi);
    }

    let model = build_model(&config.mode, width, support, side)?;
    let clean = model.apply(&truth);
    let data = match config.mode {
        // The pedestal keeps empty regions decisively alive in the data, so
        // the penalty kills them decisively in the solve: background pixels
        // jump straight to exact zero instead of trailing off through the
        // projection window.
        CheckMode::Standard { .. } => {
            clean.mapv(|v| v + 2.0 + 0.3 * rng.random_range(0.0..1.0))
        }
        // Variance-domain data arrives background-subtracted, so small
        // negative excursions are legitimate.
        CheckMode::Fluctuation { sigma } => {
            clean.mapv(|v| v + sigma * rng.random_range(-0.5..0.5))
        }
    };

    let alpha_base = match config.mode {
        CheckMode::Standard { fidelity: Fidelity::Gaussian, .. } => 1.0 / (factor * factor) as f64,
        CheckMode::Standard { fidelity: Fidelity::Kl { .. }, .. } => 2.0,
        // The squared kernel is far from unit gain, so a useful step is a
        // fraction of the inverse squared operator norm, measured at DC.
        CheckMode::Fluctuation { .. } => {
            let gain = model.apply(&Array2::ones((side, side)))[[0, 0]];
            0.3 / (gain * gain)
        }
    };
    let alpha = (0..config.depth)
        .map(|k| alpha_base * (0.7 + 0.1 * k as f64))
        .collect::<Vec<_>>();
    let rho = 0.02 * crate::util::max_abs(&model.apply_adjoint(&data));
    let mut theta = HyperParams {
        rho,
        alpha,
        delta: 1.0,
        width,
    };

    // Park the threshold so a mid-range reconstruction value sits on the
    // ramp interior; δ never feeds back into the solve, only the loss.
    let spec = EnergySpec::new(&model, mode_fidelity(&config.mode), theta.rho);
    let (u, _) = solve_unrolled(&spec, &data, &theta.schedule()?, false)?;
    let mut positive: Vec<f64> = u.iter().copied().filter(|&v| v > 1.0).collect();
    if positive.is_empty() {
        return Err(CoreError::BadConfig("reconstruction collapsed".into()));
    }
    positive.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let anchor = positive[positive.len() / 2];
    let c0 = 2.0;
    theta.delta = (anchor - c0).max(0.2);

    let gt_peak = 255.0;
    let truth_bin = binarize_ground_truth(&truth, gt_peak);
    let peak = {
        let m = u.iter().fold(0.0f64, |m, &v| m.max(v));
        if m > 0.0 {
            m
        } else {
            1.0
        }
    };
    Ok(CheckInstance {
        mode: config.mode,
        loss: config.loss,
        side,
        support,
        data,
        truth,
        truth_bin,
        theta,
        bin: BinarizationParams {
            delta: 0.0,
            c0,
            eps: 0.25,
            peak: Some(peak),
        },
        hub: HuberParams::default(),
    })
}

fn check_one(
    inst: &CheckInstance,
    name: &str,
    analytic: f64,
    step: f64,
    perturb: &dyn Fn(&mut HyperParams, f64),
    rel_tol: f64,
) -> Result<CheckRow, CoreError> {
    let mut up = inst.theta.clone();
    perturb(&mut up, step);
    let mut down = inst.theta.clone();
    perturb(&mut down, -step);
    let numeric = (inst.eval_loss(&up)? - inst.eval_loss(&down)?) / (2.0 * step);
    let denom = analytic.abs().max(numeric.abs());
    let rel_err = if denom > 0.0 {
        (analytic - numeric).abs() / denom
    } else {
        0.0
    };
    // Tiny components are compared absolutely against the loss scale.
    let pass = rel_err <= rel_tol || (analytic - numeric).abs() <= 1e-9 * (1.0 + analytic.abs());
    Ok(CheckRow {
        param: name.to_string(),
        analytic,
        numeric,
        rel_err,
        pass,
    })
}

fn wants(only: Option<ParamKind>, kind: ParamKind) -> bool {
    only.is_none() || only == Some(kind)
}

/// Compare the reverse-mode gradient against central differences on a
/// synthetic instance, redrawing until every nonlinearity input clears its
/// breakpoint margins.
pub fn finite_difference_check(config: &CheckConfig) -> Result<CheckReport, CoreError> {
    let mut attempts = 0;
    let mut inst = None;
    let mut last_reason = "no instance drawn";
    for attempt in 0..config.max_attempts {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(attempt as u64 + 1);
        let candidate = match draw_instance(config, &mut rng) {
            Ok(c) => c,
            Err(_) => {
                last_reason = "instance generation failed";
                continue;
            }
        };
        let (u, traj, _) = candidate.solve(&candidate.theta, true)?;
        attempts = attempt + 1;
        match margins_ok(
            &candidate,
            &traj.expect("captured"),
            &u,
            crate::energy::DEFAULT_PROJ_EPS,
        ) {
            Ok(()) => {
                inst = Some(candidate);
                break;
            }
            Err(reason) => last_reason = reason,
        }
    }
    let inst = inst.ok_or_else(|| {
        CoreError::BadConfig(format!(
            "no instance cleared the breakpoint margins in {} attempts (last: {})",
            config.max_attempts, last_reason
        ))
    })?;

    let (_, grad) = inst.analytic_gradient()?;
    let mut rows = Vec::new();
    let scale = |x: f64| config.step_scale * (1.0 + x.abs());

    if wants(config.only, ParamKind::Rho) {
        rows.push(check_one(
            &inst,
            "rho",
            grad.rho,
            scale(inst.theta.rho),
            &|t, h| t.rho += h,
            config.rel_tol,
        )?);
    }
    if wants(config.only, ParamKind::Alpha) {
        for k in 0..inst.theta.alpha.len() {
            rows.push(check_one(
                &inst,
                &format!("alpha{}", k),
                grad.alpha[k],
                scale(inst.theta.alpha[k]),
                &move |t, h| t.alpha[k] += h,
                config.rel_tol,
            )?);
        }
    }
    if wants(config.only, ParamKind::Delta) && config.loss == LossChoice::Localization {
        rows.push(check_one(
            &inst,
            "delta",
            grad.delta,
            scale(inst.theta.delta),
            &|t, h| t.delta += h,
            config.rel_tol,
        )?);
    }
    if wants(config.only, ParamKind::Width) {
        rows.push(check_one(
            &inst,
            "width",
            grad.width,
            scale(inst.theta.width),
            &|t, h| t.width += h,
            config.rel_tol,
        )?);
    }

    Ok(CheckReport {
        rows,
        rel_tol: config.rel_tol,
        attempts,
    })
}
