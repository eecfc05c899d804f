//! Upper-level optimizer: projected gradient over the box-constrained
//! hyperparameter bundle with monotone Armijo backtracking, full-batch over
//! the training set. Per-sample solves and backward sweeps run in parallel;
//! the gradient reduction is a fixed-order sequential fold, so results do
//! not depend on the worker count.

use ndarray::Array2;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::backprop::{solve_loss_grad, LossChoice, ParamGradient, TaskLoss};
use crate::energy::{EnergySpec, Fidelity, DEFAULT_PROJ_EPS};
use crate::error::CoreError;
use crate::grid_ops::{gaussian_kernel, support_for_grid, ForwardModel};
use crate::losses::{
    binarize_ground_truth, BinarizationParams, HuberParams, DEFAULT_BIN_C0, DEFAULT_BIN_EPS,
    DEFAULT_HUBER_GAMMA,
};
use crate::simulate::{SamplePair, SampleSet};
use crate::solver::{solve_unrolled, HyperParams};
use crate::util::max_abs;

/// Common lower bound for all hyperparameters.
pub const PARAM_FLOOR: f64 = 1e-10;

/// Which acquisition physics the inner solver assumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainMode {
    /// Blur plus block-sum downsampling; data are the raw frames.
    Standard { factor: usize, fidelity: Fidelity },
    /// Squared-kernel variance model; the known noise variance is folded
    /// into the data before anything else runs.
    Fluctuation { sigma_sq: f64 },
}

impl TrainMode {
    fn fidelity(&self) -> Fidelity {
        match self {
            TrainMode::Standard { fidelity, .. } => *fidelity,
            TrainMode::Fluctuation { .. } => Fidelity::Gaussian,
        }
    }

    fn factor(&self) -> usize {
        match self {
            TrainMode::Standard { factor, .. } => *factor,
            TrainMode::Fluctuation { .. } => 1,
        }
    }
}

/// Which components the outer iteration is allowed to move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LearnMask {
    pub rho: bool,
    pub alpha: bool,
    pub delta: bool,
    pub width: bool,
}

impl LearnMask {
    pub fn all() -> Self {
        LearnMask { rho: true, alpha: true, delta: true, width: true }
    }

    pub fn none() -> Self {
        LearnMask { rho: false, alpha: false, delta: false, width: false }
    }
}

impl Default for LearnMask {
    /// The width stays fixed unless asked for; everything else moves.
    fn default() -> Self {
        LearnMask { rho: true, alpha: true, delta: true, width: false }
    }
}

/// Monotone backtracking line search parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmijoParams {
    pub init_step: f64,
    pub shrink: f64,
    /// Sufficient-decrease coefficient on ⟨∇L, θ′−θ⟩.
    pub sufficient: f64,
    pub max_backtracks: usize,
    /// Start the next search at twice the last accepted step (capped by
    /// `init_step`) instead of from scratch.
    pub warm_start: bool,
}

impl Default for ArmijoParams {
    fn default() -> Self {
        ArmijoParams {
            init_step: 1.0,
            shrink: 0.5,
            sufficient: 1e-4,
            max_backtracks: 30,
            warm_start: true,
        }
    }
}

/// Diagonal scaling of the descent direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scaling {
    #[default]
    Identity,
    /// Scale each component by |θ_i|, flooring at [`PARAM_FLOOR`]; useful
    /// when the components live on wildly different magnitudes.
    Magnitude,
}

/// Plateau rule for the binarized ground truth used by the localization
/// loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GtPeak {
    /// One configured level for every sample.
    Fixed(f64),
    /// Each sample's own maximum pixel (1 for an all-zero truth); mirrors
    /// the plateau rule the binarization applies to reconstructions, so a
    /// support-perfect reconstruction reaches loss zero regardless of the
    /// sample's intensity scale.
    PerSampleMax,
}

/// Full recipe for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Unrolled solver depth K; must match `init.alpha`.
    pub depth: usize,
    pub outer_iters: usize,
    pub loss: LossChoice,
    pub mode: TrainMode,
    pub init: HyperParams,
    pub learn: LearnMask,
    pub armijo: ArmijoParams,
    pub scaling: Scaling,
    /// Stop when the relative loss change drops below this.
    pub rel_tol: f64,
    pub proj_eps: f64,
    pub bin_c0: f64,
    pub bin_eps: f64,
    pub huber_gamma: f64,
    /// Plateau level of the binarized ground truth.
    pub gt_peak: GtPeak,
    /// ρ upper bound as a multiple of the dataset's ρ_max.
    pub rho_cap_factor: f64,
    pub alpha_cap: f64,
    pub width_cap: f64,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, loss: LossChoice, init: HyperParams, outer_iters: usize) -> Self {
        // The quadratic ρ_max formula is exact for the quadratic fidelity;
        // for the divergence fidelity it is only a proxy, so the cap gets
        // headroom.
        let rho_cap_factor = match mode.fidelity() {
            Fidelity::Gaussian => 1.0,
            Fidelity::Kl { .. } => 10.0,
        };
        TrainConfig {
            depth: init.alpha.len(),
            outer_iters,
            loss,
            mode,
            init,
            learn: LearnMask::default(),
            armijo: ArmijoParams::default(),
            scaling: Scaling::default(),
            rel_tol: 1e-8,
            proj_eps: DEFAULT_PROJ_EPS,
            bin_c0: DEFAULT_BIN_C0,
            bin_eps: DEFAULT_BIN_EPS,
            huber_gamma: DEFAULT_HUBER_GAMMA,
            gt_peak: GtPeak::Fixed(255.0),
            rho_cap_factor,
            alpha_cap: 1e4,
            width_cap: 32.0,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.depth == 0 || self.init.alpha.len() != self.depth {
            return Err(CoreError::BadConfig(format!(
                "depth {} does not match the {} initial step sizes",
                self.depth,
                self.init.alpha.len()
            )));
        }
        if self.outer_iters == 0 {
            return Err(CoreError::BadConfig("outer_iters must be at least 1".into()));
        }
        if !(self.armijo.init_step > 0.0)
            || !(self.armijo.shrink > 0.0 && self.armijo.shrink < 1.0)
            || !(self.armijo.sufficient > 0.0 && self.armijo.sufficient < 1.0)
        {
            return Err(CoreError::BadConfig(
                "line search needs init_step > 0 and shrink, sufficient in (0, 1)".into(),
            ));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(CoreError::NonPositive("rel_tol", self.rel_tol));
        }
        if let GtPeak::Fixed(level) = self.gt_peak {
            if !(level > 0.0) {
                return Err(CoreError::NonPositive("gt_peak", level));
            }
        }
        if !(self.rho_cap_factor > 0.0) {
            return Err(CoreError::NonPositive("rho_cap_factor", self.rho_cap_factor));
        }
        if let TrainMode::Fluctuation { sigma_sq } = self.mode {
            if sigma_sq < 0.0 {
                return Err(CoreError::NonPositive("noise variance", sigma_sq));
            }
        }
        Ok(())
    }
}

/// Componentwise box constraints on the bundle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub rho: (f64, f64),
    pub alpha: (f64, f64),
    pub delta: (f64, f64),
    pub width: (f64, f64),
}

impl Bounds {
    pub fn validate(&self) -> Result<(), CoreError> {
        for (name, (lo, hi)) in [
            ("rho bounds", self.rho),
            ("alpha bounds", self.alpha),
            ("delta bounds", self.delta),
            ("width bounds", self.width),
        ] {
            if !(lo > 0.0 && lo < hi && hi.is_finite()) {
                return Err(CoreError::BadConfig(format!(
                    "{name} ({lo}, {hi}) must satisfy 0 < lower < upper < ∞"
                )));
            }
        }
        Ok(())
    }

    /// Data-driven box: ρ capped at (a multiple of) the nullification
    /// threshold, δ at half the brightest truth pixel, α and ς at the
    /// configured ceilings.
    pub fn derive(set: &SampleSet, config: &TrainConfig) -> Result<Bounds, CoreError> {
        let pairs = prepare_pairs(set, &config.mode)?;
        let fine_side = pairs[0].truth.nrows();
        let model = build_model(&config.mode, config.init.width, fine_side)?;
        let cap = config.rho_cap_factor * rho_max_of(&pairs, &model)?;
        if !(cap > PARAM_FLOOR) {
            return Err(CoreError::BadConfig(
                "the data admit no ρ range: every adjoint image is null".into(),
            ));
        }
        let max_pixel = pairs
            .iter()
            .fold(0.0f64, |m, p| m.max(p.truth.iter().fold(0.0, |a, &v| a.max(v))));
        let delta_hi = if max_pixel > 0.0 { 0.5 * max_pixel } else { 1.0 };
        let bounds = Bounds {
            rho: (PARAM_FLOOR, cap),
            alpha: (PARAM_FLOOR, config.alpha_cap),
            delta: (PARAM_FLOOR, delta_hi),
            width: (PARAM_FLOOR, config.width_cap),
        };
        bounds.validate()?;
        Ok(bounds)
    }
}

/// Largest ρ that still admits a nonzero reconstruction anywhere in the
/// set: min over samples of ‖Aᵀf‖_∞.
pub fn rho_max(set: &SampleSet, model: &ForwardModel) -> Result<f64, CoreError> {
    if set.pairs.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    rho_max_of(&set.pairs, model)
}

fn rho_max_of(pairs: &[SamplePair], model: &ForwardModel) -> Result<f64, CoreError> {
    let coarse = model.coarse_side();
    let mut best = f64::INFINITY;
    for (i, pair) in pairs.iter().enumerate() {
        if pair.data.dim() != (coarse, coarse) {
            return Err(CoreError::Sample {
                index: i,
                source: Box::new(CoreError::ShapeMismatch(format!(
                    "data {:?} vs model coarse grid {coarse}",
                    pair.data.dim()
                ))),
            });
        }
        best = best.min(max_abs(&model.apply_adjoint(&pair.data)));
    }
    Ok(best)
}

/// Componentwise clamp of the whole bundle into the box.
pub fn project_box(theta: &HyperParams, bounds: &Bounds) -> HyperParams {
    HyperParams {
        rho: theta.rho.clamp(bounds.rho.0, bounds.rho.1),
        alpha: theta
            .alpha
            .iter()
            .map(|&a| a.clamp(bounds.alpha.0, bounds.alpha.1))
            .collect(),
        delta: theta.delta.clamp(bounds.delta.0, bounds.delta.1),
        width: theta.width.clamp(bounds.width.0, bounds.width.1),
    }
}

/// One accepted outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    pub loss: f64,
    pub step: f64,
    pub theta: HyperParams,
}

/// Why the outer loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Iteration budget exhausted.
    MaxIters,
    /// Relative loss change fell below the tolerance, or the gradient
    /// vanished outright.
    Converged,
    /// No admissible step produced sufficient decrease; typically the
    /// iterate is pinned to the box.
    Stalled,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub theta: HyperParams,
    pub history: Vec<HistoryRow>,
    pub stop: StopReason,
}

fn build_model(mode: &TrainMode, width: f64, fine_side: usize) -> Result<ForwardModel, CoreError> {
    let support = support_for_grid(width, fine_side);
    match mode {
        TrainMode::Standard { factor, .. } => {
            let kernel = gaussian_kernel(width, support)?;
            ForwardModel::standard(&kernel, *factor, fine_side)
        }
        TrainMode::Fluctuation { .. } => ForwardModel::squared(width, support, fine_side),
    }
}

/// Clones the pairs, folding the noise pedestal into variance-domain data.
fn prepare_pairs(set: &SampleSet, mode: &TrainMode) -> Result<Vec<SamplePair>, CoreError> {
    if set.pairs.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let factor = mode.factor();
    let first = &set.pairs[0];
    let (n, nc) = first.truth.dim();
    if n != nc {
        return Err(CoreError::NotSquare { rows: n, cols: nc });
    }
    if n == 0 || n % factor != 0 {
        return Err(CoreError::FactorMismatch { factor, side: n });
    }
    let coarse = n / factor;
    let mut pairs = Vec::with_capacity(set.pairs.len());
    for (i, pair) in set.pairs.iter().enumerate() {
        if pair.truth.dim() != (n, n) || pair.data.dim() != (coarse, coarse) {
            return Err(CoreError::Sample {
                index: i,
                source: Box::new(CoreError::ShapeMismatch(format!(
                    "truth {:?} / data {:?} vs expected {n}²/{coarse}²",
                    pair.truth.dim(),
                    pair.data.dim()
                ))),
            });
        }
        let data = match mode {
            TrainMode::Standard { .. } => pair.data.clone(),
            TrainMode::Fluctuation { sigma_sq } => &pair.data - *sigma_sq,
        };
        pairs.push(SamplePair { data, truth: pair.truth.clone() });
    }
    Ok(pairs)
}

/// Everything fixed across one training run's evaluations.
struct Batch<'a> {
    pairs: &'a [SamplePair],
    truth_bins: Vec<Array2<f64>>,
    config: &'a TrainConfig,
    fine_side: usize,
}

impl<'a> Batch<'a> {
    fn new(pairs: &'a [SamplePair], config: &'a TrainConfig) -> Self {
        let truth_bins = match config.loss {
            LossChoice::Intensity => Vec::new(),
            LossChoice::Localization => pairs
                .iter()
                .map(|p| {
                    let level = match config.gt_peak {
                        GtPeak::Fixed(level) => level,
                        GtPeak::PerSampleMax => {
                            let m = p.truth.iter().fold(0.0f64, |a, &v| a.max(v));
                            if m > 0.0 {
                                m
                            } else {
                                1.0
                            }
                        }
                    };
                    binarize_ground_truth(&p.truth, level)
                })
                .collect(),
        };
        Batch {
            pairs,
            truth_bins,
            config,
            fine_side: pairs[0].truth.nrows(),
        }
    }

    fn task_loss(&self, index: usize, delta: f64) -> TaskLoss<'_> {
        match self.config.loss {
            LossChoice::Intensity => TaskLoss::Intensity {
                truth: &self.pairs[index].truth,
            },
            LossChoice::Localization => TaskLoss::Localization {
                truth_bin: &self.truth_bins[index],
                bin: BinarizationParams {
                    delta,
                    c0: self.config.bin_c0,
                    eps: self.config.bin_eps,
                    // Resolved per reconstruction: the plateau follows the
                    // current peak but stays out of the derivatives.
                    peak: None,
                },
                huber: HuberParams {
                    gamma: self.config.huber_gamma,
                },
            },
        }
    }

    fn spec<'m>(&self, model: &'m ForwardModel, theta: &HyperParams) -> EnergySpec<'m> {
        let mut spec = EnergySpec::new(model, self.config.mode.fidelity(), theta.rho);
        spec.proj_eps = self.config.proj_eps;
        spec
    }

    /// Summed loss at θ; the cheap path for line-search probes.
    fn loss(&self, theta: &HyperParams) -> Result<f64, CoreError> {
        let model = build_model(&self.config.mode, theta.width, self.fine_side)?;
        let schedule = theta.schedule()?;
        let spec = self.spec(&model, theta);
        let losses: Result<Vec<f64>, CoreError> = self
            .pairs
            .par_iter()
            .enumerate()
            .map(|(i, pair)| {
                let (u, _) = solve_unrolled(&spec, &pair.data, &schedule, false)
                    .map_err(|e| CoreError::Sample { index: i, source: Box::new(e) })?;
                Ok(self.task_loss(i, theta.delta).value(&u))
            })
            .collect();
        Ok(losses?.into_iter().sum())
    }

    /// Summed loss and bundle gradient at θ. Samples solve in parallel;
    /// the reduction is a fixed-order fold over the collected results.
    fn loss_grad(&self, theta: &HyperParams) -> Result<(f64, ParamGradient), CoreError> {
        let model = build_model(&self.config.mode, theta.width, self.fine_side)?;
        let schedule = theta.schedule()?;
        let spec = self.spec(&model, theta);
        let want_width = self.config.learn.width;
        let per_sample: Result<Vec<(f64, ParamGradient)>, CoreError> = self
            .pairs
            .par_iter()
            .enumerate()
            .map(|(i, pair)| {
                let loss = self.task_loss(i, theta.delta);
                let (value, _, grad) =
                    solve_loss_grad(&spec, &pair.data, &schedule, &loss, want_width)
                        .map_err(|e| CoreError::Sample { index: i, source: Box::new(e) })?;
                Ok((value, grad))
            })
            .collect();
        let mut total = 0.0;
        let mut grad = ParamGradient::zeros(self.config.depth);
        for (value, g) in per_sample? {
            total += value;
            grad.add_assign(&g);
        }
        Ok((total, grad))
    }
}

fn mask_gradient(grad: &mut ParamGradient, learn: &LearnMask) {
    if !learn.rho {
        grad.rho = 0.0;
    }
    if !learn.alpha {
        grad.alpha.iter_mut().for_each(|a| *a = 0.0);
    }
    if !learn.delta {
        grad.delta = 0.0;
    }
    if !learn.width {
        grad.width = 0.0;
    }
}

fn grad_norm_sq(grad: &ParamGradient) -> f64 {
    grad.rho * grad.rho
        + grad.alpha.iter().map(|a| a * a).sum::<f64>()
        + grad.delta * grad.delta
        + grad.width * grad.width
}

/// d = D·∇L with the configured diagonal scaling.
fn scaled_direction(theta: &HyperParams, grad: &ParamGradient, scaling: Scaling) -> ParamGradient {
    let weight = |t: f64| match scaling {
        Scaling::Identity => 1.0,
        Scaling::Magnitude => t.abs().max(PARAM_FLOOR),
    };
    ParamGradient {
        rho: grad.rho * weight(theta.rho),
        alpha: grad
            .alpha
            .iter()
            .zip(&theta.alpha)
            .map(|(g, t)| g * weight(*t))
            .collect(),
        delta: grad.delta * weight(theta.delta),
        width: grad.width * weight(theta.width),
    }
}

fn step_theta(theta: &HyperParams, dir: &ParamGradient, step: f64) -> HyperParams {
    HyperParams {
        rho: theta.rho - step * dir.rho,
        alpha: theta
            .alpha
            .iter()
            .zip(&dir.alpha)
            .map(|(t, d)| t - step * d)
            .collect(),
        delta: theta.delta - step * dir.delta,
        width: theta.width - step * dir.width,
    }
}

/// ⟨∇L, θ′ − θ⟩, the predicted first-order change along the projected step.
fn displacement_dot(grad: &ParamGradient, new: &HyperParams, old: &HyperParams) -> f64 {
    grad.rho * (new.rho - old.rho)
        + grad
            .alpha
            .iter()
            .zip(new.alpha.iter().zip(&old.alpha))
            .map(|(g, (n, o))| g * (n - o))
            .sum::<f64>()
        + grad.delta * (new.delta - old.delta)
        + grad.width * (new.width - old.width)
}

/// Minimizes the summed task loss over the box by projected gradient with
/// monotone Armijo backtracking. The emitted history is strictly tied to
/// accepted iterates, so its loss column never increases. A non-finite
/// initial loss is a hard error; exploratory steps that overflow are simply
/// backtracked past.
pub fn train(
    set: &SampleSet,
    config: &TrainConfig,
    bounds: &Bounds,
) -> Result<TrainOutcome, CoreError> {
    config.validate()?;
    bounds.validate()?;
    let pairs = prepare_pairs(set, &config.mode)?;
    let batch = Batch::new(&pairs, config);

    let mut theta = project_box(&config.init, bounds);
    let (mut loss, mut grad) = batch.loss_grad(&theta)?;
    if !loss.is_finite() {
        return Err(CoreError::Divergence(0));
    }
    let mut history = vec![HistoryRow {
        iter: 0,
        loss,
        step: 0.0,
        theta: theta.clone(),
    }];
    let mut warm = config.armijo.init_step;
    let mut stop = StopReason::MaxIters;

    for j in 1..=config.outer_iters {
        mask_gradient(&mut grad, &config.learn);
        if grad_norm_sq(&grad) == 0.0 {
            stop = StopReason::Converged;
            break;
        }
        let dir = scaled_direction(&theta, &grad, config.scaling);

        let mut step = warm;
        let mut accepted = None;
        for _ in 0..=config.armijo.max_backtracks {
            let candidate = project_box(&step_theta(&theta, &dir, step), bounds);
            if candidate == theta {
                // Every moving component is pinned to the box; shrinking
                // the step cannot unpin them.
                break;
            }
            let predicted = displacement_dot(&grad, &candidate, &theta);
            if predicted < 0.0 {
                let value = batch.loss(&candidate)?;
                if value.is_finite() && value <= loss + config.armijo.sufficient * predicted {
                    accepted = Some((candidate, value, step));
                    break;
                }
            }
            step *= config.armijo.shrink;
        }

        let Some((next_theta, next_loss, used)) = accepted else {
            stop = StopReason::Stalled;
            break;
        };
        let rel_change = (loss - next_loss).abs() / loss.abs().max(1.0);
        theta = next_theta;
        loss = next_loss;
        history.push(HistoryRow {
            iter: j,
            loss,
            step: used,
            theta: theta.clone(),
        });
        warm = if config.armijo.warm_start {
            (2.0 * used).min(config.armijo.init_step)
        } else {
            config.armijo.init_step
        };
        if rel_change < config.rel_tol {
            stop = StopReason::Converged;
            break;
        }
        if j < config.outer_iters {
            let (_, g) = batch.loss_grad(&theta)?;
            grad = g;
        }
    }

    Ok(TrainOutcome { theta, history, stop })
}

/// Runs the unrolled solver at θ on one raw data frame, with the same model
/// construction and data preparation as training. Standard-mode data live
/// on the coarse grid; variance-domain data are full-resolution and get the
/// noise pedestal subtracted here.
pub fn reconstruct(
    theta: &HyperParams,
    mode: &TrainMode,
    proj_eps: f64,
    data: &Array2<f64>,
) -> Result<Array2<f64>, CoreError> {
    let (rows, cols) = data.dim();
    if rows != cols {
        return Err(CoreError::NotSquare { rows, cols });
    }
    let fine_side = rows * mode.factor();
    let model = build_model(mode, theta.width, fine_side)?;
    let prepared = match mode {
        TrainMode::Standard { .. } => data.clone(),
        TrainMode::Fluctuation { sigma_sq } => data - *sigma_sq,
    };
    let mut spec = EnergySpec::new(&model, mode.fidelity(), theta.rho);
    spec.proj_eps = proj_eps;
    let schedule = theta.schedule()?;
    let (u, _) = solve_unrolled(&spec, &prepared, &schedule, false)?;
    Ok(u)
}

/// History as CSV: iteration, loss, accepted step, then every θ component.
pub fn history_csv(history: &[HistoryRow]) -> String {
    let depth = history.first().map_or(0, |r| r.theta.alpha.len());
    let mut out = String::from("iter,loss,step,rho,delta,width");
    for k in 0..depth {
        write!(out, ",alpha_{k}").unwrap();
    }
    out.push('\n');
    for r in history {
        write!(
            out,
            "{},{},{},{},{},{}",
            r.iter, r.loss, r.step, r.theta.rho, r.theta.delta, r.theta.width
        )
        .unwrap();
        for a in &r.theta.alpha {
            write!(out, ",{a}").unwrap();
        }
        out.push('\n');
    }
    out
}

const CHECKPOINT_HEADER: &str = "unroll-checkpoint v1";

/// Writes θ and the history as line-oriented key-value text. Values use the
/// shortest decimal form that parses back to the identical bits.
pub fn checkpoint_save(
    path: &Path,
    theta: &HyperParams,
    history: &[HistoryRow],
) -> Result<(), CoreError> {
    let mut out = String::new();
    writeln!(out, "{CHECKPOINT_HEADER}").unwrap();
    writeln!(out, "rho {}", theta.rho).unwrap();
    writeln!(out, "delta {}", theta.delta).unwrap();
    writeln!(out, "width {}", theta.width).unwrap();
    write!(out, "alpha").unwrap();
    for a in &theta.alpha {
        write!(out, " {a}").unwrap();
    }
    out.push('\n');
    writeln!(out, "history {}", history.len()).unwrap();
    for r in history {
        write!(out, "row {} {} {} {} {} {}", r.iter, r.loss, r.step, r.theta.rho, r.theta.delta, r.theta.width).unwrap();
        for a in &r.theta.alpha {
            write!(out, " {a}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn checkpoint_err(detail: impl Into<String>) -> CoreError {
    CoreError::Malformed {
        what: "checkpoint",
        detail: detail.into(),
    }
}

/// Reads a checkpoint written by [`checkpoint_save`].
pub fn checkpoint_load(path: &Path) -> Result<(HyperParams, Vec<HistoryRow>), CoreError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_HEADER) {
        return Err(checkpoint_err("missing header line"));
    }
    let mut field = |name: &str| -> Result<f64, CoreError> {
        let line = lines
            .next()
            .ok_or_else(|| checkpoint_err(format!("truncated before {name}")))?;
        let value = line
            .strip_prefix(name)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| checkpoint_err(format!("expected `{name} <value>`, got `{line}`")))?;
        value
            .parse()
            .map_err(|_| checkpoint_err(format!("unreadable {name} value `{value}`")))
    };
    let rho = field("rho")?;
    let delta = field("delta")?;
    let width = field("width")?;

    let alpha_line = lines.next().ok_or_else(|| checkpoint_err("truncated before alpha"))?;
    let alpha = parse_alpha(alpha_line)?;

    let hist_line = lines
        .next()
        .ok_or_else(|| checkpoint_err("truncated before history"))?;
    let count: usize = hist_line
        .strip_prefix("history ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| checkpoint_err(format!("bad history count line `{hist_line}`")))?;
    let mut history = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines
            .next()
            .ok_or_else(|| checkpoint_err("history shorter than its declared length"))?;
        let mut toks = line.split_whitespace();
        if toks.next() != Some("row") {
            return Err(checkpoint_err(format!("expected a history row, got `{line}`")));
        }
        let mut num = |what: &str| -> Result<f64, CoreError> {
            toks.next()
                .ok_or_else(|| checkpoint_err(format!("history row missing {what}")))?
                .parse()
                .map_err(|_| checkpoint_err(format!("unreadable history {what}")))
        };
        let iter = num("iteration")? as usize;
        let loss = num("loss")?;
        let step = num("step")?;
        let rho = num("rho")?;
        let delta = num("delta")?;
        let width = num("width")?;
        let alpha: Result<Vec<f64>, CoreError> = toks
            .map(|t| {
                t.parse()
                    .map_err(|_| checkpoint_err("unreadable history step size"))
            })
            .collect();
        history.push(HistoryRow {
            iter,
            loss,
            step,
            theta: HyperParams { rho, alpha: alpha?, delta, width },
        });
    }
    Ok((HyperParams { rho, alpha, delta, width }, history))
}

fn parse_alpha(line: &str) -> Result<Vec<f64>, CoreError> {
    let rest = line
        .strip_prefix("alpha")
        .ok_or_else(|| checkpoint_err(format!("expected `alpha …`, got `{line}`")))?;
    let alpha: Result<Vec<f64>, CoreError> = rest
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| checkpoint_err(format!("unreadable step size `{t}`")))
        })
        .collect();
    let alpha = alpha?;
    if alpha.is_empty() {
        return Err(checkpoint_err("empty step schedule"));
    }
    Ok(alpha)
}
