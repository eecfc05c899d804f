//! Variance-domain energy for joint recovery of the kernel width: the data
//! formed by temporal variance images is explained by the entrywise-squared
//! kernel acting on the source variance, with the known noise variance as a
//! constant pedestal. Folding that pedestal into the data reduces everything
//! to the standard quadratic energy over the squared-kernel model, which is
//! what the unrolled solver and its backward sweep already handle.

use ndarray::Array2;

use crate::backprop::LossChoice;
use crate::energy::{EnergySpec, Fidelity, DEFAULT_PROJ_EPS};
use crate::error::CoreError;
use crate::grid_ops::{support_for_grid, ForwardModel};
use crate::simulate::SampleSet;
use crate::solver::HyperParams;
use crate::trainer::{train, Bounds, GtPeak, LearnMask, TrainConfig, TrainMode, TrainOutcome};

/// Parameters of the fluctuation energy
/// ½‖H²(ς)·V_u + σ²e − V_F‖² + ρ·Σ V_u over V_u ≥ 0.
///
/// The quadratic term carries the ½ so the gradient below is exactly the
/// transposed-operator form with no stray factor 2; dropping the ½ only
/// rescales ρ and the step sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluctEnergySpec {
    pub width: f64,
    pub sigma_sq: f64,
    pub rho: f64,
    pub proj_eps: f64,
}

impl FluctEnergySpec {
    pub fn new(width: f64, sigma_sq: f64, rho: f64) -> Self {
        FluctEnergySpec {
            width,
            sigma_sq,
            rho,
            proj_eps: DEFAULT_PROJ_EPS,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.width > 0.0) {
            return Err(CoreError::NonPositive("kernel width", self.width));
        }
        if self.sigma_sq < 0.0 {
            return Err(CoreError::NonPositive("noise variance", self.sigma_sq));
        }
        if self.rho < 0.0 {
            return Err(CoreError::NonPositive("sparsity weight", self.rho));
        }
        Ok(())
    }

    /// Squared-kernel forward operator on a `side`×`side` grid.
    pub fn model(&self, side: usize) -> Result<ForwardModel, CoreError> {
        self.validate()?;
        ForwardModel::squared(self.width, support_for_grid(self.width, side), side)
    }

    /// The noise pedestal moved to the data side: V_F − σ²e. The residual
    /// H²V_u + σ²e − V_F then reads H²V_u − data, the standard quadratic
    /// form.
    pub fn effective_data(&self, v_f: &Array2<f64>) -> Array2<f64> {
        v_f - self.sigma_sq
    }

    /// The equivalent standard energy over an already-built model.
    pub fn energy<'a>(&self, model: &'a ForwardModel) -> EnergySpec<'a> {
        let mut spec = EnergySpec::new(model, Fidelity::Gaussian, self.rho);
        spec.proj_eps = self.proj_eps;
        spec
    }

    /// Energy value at V_u.
    pub fn value(&self, model: &ForwardModel, v_u: &Array2<f64>, v_f: &Array2<f64>) -> f64 {
        self.energy(model).energy_value(v_u, &self.effective_data(v_f))
    }

    /// ∇_{V_u}: (H²)ᵀ(H²·V_u + σ²e − V_F) + ρ·1.
    pub fn gradient(
        &self,
        model: &ForwardModel,
        v_u: &Array2<f64>,
        v_f: &Array2<f64>,
    ) -> Array2<f64> {
        self.energy(model).energy_gradient(v_u, &self.effective_data(v_f))
    }

    /// ∂/∂ς of the gradient: the width-differentiated operator hits both the
    /// residual pullback and the forward product,
    /// (∂H²)ᵀ(H²V_u + σ²e − V_F) + (H²)ᵀ(∂H²·V_u).
    pub fn width_gradient(
        &self,
        model: &ForwardModel,
        v_u: &Array2<f64>,
        v_f: &Array2<f64>,
    ) -> Array2<f64> {
        self.energy(model).width_gradient(v_u, &self.effective_data(v_f))
    }
}

/// Stock starting bundle for variance-domain training: a nearly inactive
/// sparsity weight, a detection threshold well under typical variance
/// peaks, aggressive uniform steps, and a deliberately over-wide kernel
/// left for the optimizer to shrink.
pub fn default_variance_init(depth: usize) -> HyperParams {
    HyperParams {
        rho: 1e-5,
        alpha: vec![1000.0; depth],
        delta: 25.0,
        width: 5.0,
    }
}

/// Training recipe for the variance domain: squared-kernel model with the
/// noise pedestal folded in, localization loss, and every component of the
/// bundle learnable, the kernel width included. Ground truths are variance
/// images, so their binarization plateau follows each sample's own peak.
///
/// The binarization blend is widened to match variance magnitudes (peaks
/// run 1e3 to 2e4 for typical emitter levels): with the unit-scale default
/// the transition band is 0.02 wide, essentially no reconstruction pixel
/// ever falls inside it, and the loss gradient vanishes identically.
pub fn variance_train_config(sigma_sq: f64, depth: usize, outer_iters: usize) -> TrainConfig {
    let mut config = TrainConfig::new(
        TrainMode::Fluctuation { sigma_sq },
        LossChoice::Localization,
        default_variance_init(depth),
        outer_iters,
    );
    config.learn = LearnMask::all();
    config.gt_peak = GtPeak::PerSampleMax;
    config.bin_c0 = 50.0;
    config.bin_eps = 1.0;
    config
}

/// Full semi-blind run over a dataset of (variance-of-noisy, variance-of-
/// clean) pairs: derives the box from the data and minimizes the summed
/// localization loss over (ρ, α, δ, ς) jointly.
pub fn solve_and_learn_semiblind(
    set: &SampleSet,
    config: &TrainConfig,
) -> Result<TrainOutcome, CoreError> {
    if !matches!(config.mode, TrainMode::Fluctuation { .. }) {
        return Err(CoreError::BadConfig(
            "semi-blind training needs the variance-domain mode".into(),
        ));
    }
    if config.loss != LossChoice::Localization {
        return Err(CoreError::BadConfig(
            "semi-blind training minimizes the localization loss".into(),
        ));
    }
    if !config.learn.width {
        return Err(CoreError::BadConfig(
            "semi-blind training must leave the kernel width learnable".into(),
        ));
    }
    let bounds = Bounds::derive(set, config)?;
    train(set, config, &bounds)
}
