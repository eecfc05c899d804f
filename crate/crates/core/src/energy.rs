//! The reconstruction energy: a data fidelity on the coarse measurements
//! plus a weighted nonnegative l1 penalty, together with the smoothed
//! orthant projection and every partial derivative the unrolled backward
//! pass needs.
//!
//! On the nonnegative orthant the l1 penalty is a plain sum, so the smooth
//! part of the energy is E(u) = D(Au; f) + ρ·sum(u) and its gradient is
//! Aᵀr(Au) + ρ with a fidelity-specific coarse residual r.

use ndarray::{Array2, Zip};

use crate::error::CoreError;
use crate::grid_ops::ForwardModel;
use crate::util::dot;

/// Default width of the cubic smoothing window of the orthant projection.
pub const DEFAULT_PROJ_EPS: f64 = 1e-4;

/// Floor applied inside the Poisson log to keep it finite.
const KL_LOG_FLOOR: f64 = 1e-12;

/// Data-fidelity term of the energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fidelity {
    /// ½‖Au − f‖²: additive Gaussian noise.
    Gaussian,
    /// Generalized Kullback-Leibler divergence of Au + background against f:
    /// Poisson noise with a known constant background.
    Kl { background: f64 },
}

impl Fidelity {
    pub fn kl(background: f64) -> Result<Self, CoreError> {
        if !(background > 0.0) {
            return Err(CoreError::MissingBackground);
        }
        Ok(Fidelity::Kl { background })
    }
}

/// The inner energy with its operator, fidelity, and penalty weight.
#[derive(Debug)]
pub struct EnergySpec<'a> {
    pub model: &'a ForwardModel,
    pub fidelity: Fidelity,
    pub rho: f64,
    pub proj_eps: f64,
}

impl<'a> EnergySpec<'a> {
    pub fn new(model: &'a ForwardModel, fidelity: Fidelity, rho: f64) -> Self {
        EnergySpec {
            model,
            fidelity,
            rho,
            proj_eps: DEFAULT_PROJ_EPS,
        }
    }

    pub fn validate(&self, f: &Array2<f64>) -> Result<(), CoreError> {
        if !self.rho.is_finite() || self.rho < 0.0 {
            return Err(CoreError::NonPositive("penalty weight", self.rho));
        }
        if !(self.proj_eps > 0.0) {
            return Err(CoreError::NonPositive("projection smoothing", self.proj_eps));
        }
        let m = self.model.coarse_side();
        if f.dim() != (m, m) {
            return Err(CoreError::ShapeMismatch(format!(
                "data is {:?}, operator produces {}x{}",
                f.dim(),
                m,
                m
            )));
        }
        if let Fidelity::Kl { background } = self.fidelity {
            if !(background > 0.0) {
                return Err(CoreError::MissingBackground);
            }
            if f.iter().any(|&v| v < 0.0) {
                return Err(CoreError::ShapeMismatch(
                    "poisson data must be nonnegative".into(),
                ));
            }
        }
        Ok(())
    }

    /// D(Au; f) for a precomputed coarse prediction.
    pub fn fidelity_value_at(&self, au: &Array2<f64>, f: &Array2<f64>) -> f64 {
        match self.fidelity {
            Fidelity::Gaussian => {
                let mut acc = 0.0;
                Zip::from(au).and(f).for_each(|&a, &d| {
                    let r = a - d;
                    acc += r * r;
                });
                0.5 * acc
            }
            Fidelity::Kl { background } => {
                let mut acc = 0.0;
                Zip::from(au).and(f).for_each(|&a, &d| {
                    let z = (a + background).max(KL_LOG_FLOOR);
                    // A zero count contributes its predicted intensity alone.
                    acc += if d > 0.0 {
                        z - d - d * (z / d).ln()
                    } else {
                        z
                    };
                });
                acc
            }
        }
    }

    pub fn fidelity_value(&self, u: &Array2<f64>, f: &Array2<f64>) -> f64 {
        self.fidelity_value_at(&self.model.apply(u), f)
    }

    /// Full energy on the nonnegative orthant: fidelity + ρ·sum(u).
    pub fn energy_value(&self, u: &Array2<f64>, f: &Array2<f64>) -> f64 {
        self.fidelity_value(u, f) + self.rho * u.sum()
    }

    /// Coarse residual r(Au): what the adjoint operator pulls back.
    pub fn residual(&self, au: &Array2<f64>, f: &Array2<f64>) -> Array2<f64> {
        match self.fidelity {
            Fidelity::Gaussian => au - f,
            Fidelity::Kl { background } => {
                let mut out = Array2::zeros(au.dim());
                Zip::from(&mut out).and(au).and(f).for_each(|o, &a, &d| {
                    let z = (a + background).max(KL_LOG_FLOOR);
                    *o = 1.0 - d / z;
                });
                out
            }
        }
    }

    /// Curvature weights of the fidelity at Au; `None` means identity.
    fn curvature(&self, au: &Array2<f64>, f: &Array2<f64>) -> Option<Array2<f64>> {
        match self.fidelity {
            Fidelity::Gaussian => None,
            Fidelity::Kl { background } => {
                let mut out = Array2::zeros(au.dim());
                Zip::from(&mut out).and(au).and(f).for_each(|o, &a, &d| {
                    let z = (a + background).max(KL_LOG_FLOOR);
                    *o = d / (z * z);
                });
                Some(out)
            }
        }
    }

    pub(crate) fn gradient_at(&self, au: &Array2<f64>, f: &Array2<f64>) -> Array2<f64> {
        let resid = self.residual(au, f);
        let mut g = self.model.apply_adjoint(&resid);
        g += self.rho;
        g
    }

    /// ∇E(u) = Aᵀr(Au) + ρ.
    pub fn energy_gradient(&self, u: &Array2<f64>, f: &Array2<f64>) -> Array2<f64> {
        self.gradient_at(&self.model.apply(u), f)
    }

    pub(crate) fn hessian_vector_at(
        &self,
        au: &Array2<f64>,
        f: &Array2<f64>,
        w: &Array2<f64>,
    ) -> Array2<f64> {
        self.hessian_pullback(au, f, self.model.apply(w))
    }

    /// Aᵀ(curvature ⊙ aw) for an already-computed coarse product aw = Aw.
    pub(crate) fn hessian_pullback(
        &self,
        au: &Array2<f64>,
        f: &Array2<f64>,
        mut aw: Array2<f64>,
    ) -> Array2<f64> {
        if let Some(weights) = self.curvature(au, f) {
            aw *= &weights;
        }
        self.model.apply_adjoint(&aw)
    }

    /// ∇²E(u)·w, exploiting that the penalty is linear.
    pub fn hessian_vector(
        &self,
        u: &Array2<f64>,
        f: &Array2<f64>,
        w: &Array2<f64>,
    ) -> Array2<f64> {
        self.hessian_vector_at(&self.model.apply(u), f, w)
    }

    /// ∂∇E/∂ς at u: the sensing operator enters the gradient twice, once
    /// transposed, so the product rule produces two kernel-derivative terms.
    pub fn width_gradient(&self, u: &Array2<f64>, f: &Array2<f64>) -> Array2<f64> {
        let au = self.model.apply(u);
        let resid = self.residual(&au, f);
        let mut out = self.model.apply_width_deriv_adjoint(&resid);
        let mut dau = self.model.apply_width_deriv(u);
        if let Some(weights) = self.curvature(&au, f) {
            dau *= &weights;
        }
        out += &self.model.apply_adjoint(&dau);
        out
    }

    /// ⟨∂∇E/∂ς (v), λ⟩ without materializing the fine-grid array, given the
    /// precomputed coarse products Av and Aλ.
    pub(crate) fn width_grad_dot(
        &self,
        v: &Array2<f64>,
        f: &Array2<f64>,
        lambda: &Array2<f64>,
        av: &Array2<f64>,
        a_lambda: &Array2<f64>,
    ) -> f64 {
        let resid = self.residual(av, f);
        let d_lambda = self.model.apply_width_deriv(lambda);
        let mut dav = self.model.apply_width_deriv(v);
        if let Some(weights) = self.curvature(av, f) {
            dav *= &weights;
        }
        dot(&resid, &d_lambda) + dot(&dav, a_lambda)
    }
}

/// ∂∇E/∂ρ: the penalty gradient is constant one.
pub fn dgrad_drho(side: usize) -> Array2<f64> {
    Array2::ones((side, side))
}

/// Componentwise smoothed projection onto the nonnegative orthant: zero on
/// the negatives, identity above `eps`, and a C¹ cubic blend on (0, eps).
pub fn smooth_project_scalar(x: f64, eps: f64) -> f64 {
    if x > 0.0 && x < eps {
        (2.0 - x / eps) * x * x / eps
    } else {
        x.max(0.0)
    }
}

/// Derivative of [`smooth_project_scalar`]; the closed branches pin the
/// values at the breakpoints (0 for x ≤ 0, 1 for x ≥ eps).
pub fn smooth_project_jacobian_scalar(x: f64, eps: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= eps {
        1.0
    } else {
        4.0 * x / eps - 3.0 * x * x / (eps * eps)
    }
}

pub fn smooth_project(x: &Array2<f64>, eps: f64) -> Array2<f64> {
    x.mapv(|v| smooth_project_scalar(v, eps))
}

/// Diagonal of the projection Jacobian, as an image.
pub fn smooth_project_jacobian(x: &Array2<f64>, eps: f64) -> Array2<f64> {
    x.mapv(|v| smooth_project_jacobian_scalar(v, eps))
}
