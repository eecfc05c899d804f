//! Task losses on the final solver iterate: plain squared error for
//! intensity recovery, and a robustified localization loss that pushes the
//! reconstruction through a smoothed two-sided threshold before comparing
//! supports.

use ndarray::{Array2, Zip};

/// Default offset of the half-level point above the binarization threshold.
pub const DEFAULT_BIN_C0: f64 = 0.01;
/// Default half-width of the cubic blends at the binarization ramp ends.
pub const DEFAULT_BIN_EPS: f64 = 1e-4;
/// Default knee of the Huber robustifier (in squared-residual units, γ²).
pub const DEFAULT_HUBER_GAMMA: f64 = 1e-2;

/// Robustifier applied to squared residuals: linear s/γ up to the knee at
/// s = γ², square-root growth 2√s − γ beyond it. Value and slope agree at
/// the knee.
#[derive(Debug, Clone, Copy)]
pub struct HuberParams {
    pub gamma: f64,
}

impl Default for HuberParams {
    fn default() -> Self {
        HuberParams {
            gamma: DEFAULT_HUBER_GAMMA,
        }
    }
}

pub fn huber(s: f64, gamma: f64) -> f64 {
    if s <= gamma * gamma {
        s / gamma
    } else {
        2.0 * s.sqrt() - gamma
    }
}

pub fn huber_deriv(s: f64, gamma: f64) -> f64 {
    if s <= gamma * gamma {
        1.0 / gamma
    } else {
        1.0 / s.sqrt()
    }
}

/// Smoothed binarization. Values at or below the threshold δ map to 0,
/// values at or above δ + 2c₀ map to the plateau p̄, and between them runs
/// the ramp through (δ, 0) and (δ + 2c₀, p̄) — crossing p̄/2 exactly at
/// c = δ + c₀ — with C¹ cubic blends of half-width ε at both ends. The
/// half-level offset c₀ rides along with the threshold, so δ shifts the
/// whole profile rigidly.
#[derive(Debug, Clone, Copy)]
pub struct BinarizationParams {
    pub delta: f64,
    pub c0: f64,
    pub eps: f64,
    /// Plateau height. `None` derives the maximum of the image being
    /// binarized (1 for an all-zero image); `Some` freezes it. Every
    /// derivative below treats the plateau as a constant either way.
    pub peak: Option<f64>,
}

impl BinarizationParams {
    pub fn new(delta: f64) -> Self {
        BinarizationParams {
            delta,
            c0: DEFAULT_BIN_C0,
            eps: DEFAULT_BIN_EPS,
            peak: None,
        }
    }

    pub fn with_peak(delta: f64, peak: f64) -> Self {
        BinarizationParams {
            peak: Some(peak),
            ..Self::new(delta)
        }
    }

    pub fn resolve_peak(&self, img: &Array2<f64>) -> f64 {
        self.peak.unwrap_or_else(|| {
            let max = img.iter().fold(0.0f64, |m, &v| m.max(v));
            if max > 0.0 {
                max
            } else {
                1.0
            }
        })
    }
}

fn binarize_scalar(s: f64, delta: f64, c0: f64, eps: f64, peak: f64) -> f64 {
    let t = s - delta;
    let span = 2.0 * c0;
    let slope = peak / span;
    if t <= 0.0 {
        0.0
    } else if t < eps {
        (2.0 - t / eps) * t * t / eps * slope
    } else if t <= span - eps {
        slope * t
    } else if t < span {
        let tau = span - t;
        peak - (2.0 - tau / eps) * tau * tau / eps * slope
    } else {
        peak
    }
}

fn binarize_dvalue_scalar(s: f64, delta: f64, c0: f64, eps: f64, peak: f64) -> f64 {
    let t = s - delta;
    let span = 2.0 * c0;
    let slope = peak / span;
    if t <= 0.0 {
        0.0
    } else if t < eps {
        (4.0 * t / eps - 3.0 * t * t / (eps * eps)) * slope
    } else if t <= span - eps {
        slope
    } else if t < span {
        let tau = span - t;
        (4.0 * tau / eps - 3.0 * tau * tau / (eps * eps)) * slope
    } else {
        0.0
    }
}

/// ∂B/∂δ with the plateau frozen: the profile is rigid in s − δ, so the
/// branches mirror the value slopes with opposite sign, −p̄/(2c₀) across the
/// ramp interior and 0 outside the ramp.
fn binarize_ddelta_scalar(s: f64, delta: f64, c0: f64, eps: f64, peak: f64) -> f64 {
    let t = s - delta;
    let span = 2.0 * c0;
    let scale = peak / span;
    if t <= 0.0 {
        0.0
    } else if t < eps {
        scale * (3.0 * t * t / (eps * eps) - 4.0 * t / eps)
    } else if t <= span - eps {
        -scale
    } else if t < span {
        let tau = span - t;
        -scale * (4.0 * tau / eps - 3.0 * tau * tau / (eps * eps))
    } else {
        0.0
    }
}

pub fn binarize(img: &Array2<f64>, params: &BinarizationParams) -> Array2<f64> {
    let peak = params.resolve_peak(img);
    img.mapv(|s| binarize_scalar(s, params.delta, params.c0, params.eps, peak))
}

/// Pixelwise ∂B/∂s at the input image.
pub fn binarize_dvalue(img: &Array2<f64>, params: &BinarizationParams) -> Array2<f64> {
    let peak = params.resolve_peak(img);
    img.mapv(|s| binarize_dvalue_scalar(s, params.delta, params.c0, params.eps, peak))
}

/// Pixelwise ∂B/∂δ at the input image (plateau frozen).
pub fn binarize_ddelta(img: &Array2<f64>, params: &BinarizationParams) -> Array2<f64> {
    let peak = params.resolve_peak(img);
    img.mapv(|s| binarize_ddelta_scalar(s, params.delta, params.c0, params.eps, peak))
}

/// Hard support mask of the ground truth at the given plateau level.
pub fn binarize_ground_truth(g: &Array2<f64>, peak_level: f64) -> Array2<f64> {
    g.mapv(|v| if v != 0.0 { peak_level } else { 0.0 })
}

/// ½‖u − g‖².
pub fn loss_l2(u: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let mut acc = 0.0;
    Zip::from(u).and(g).for_each(|&a, &b| {
        let r = a - b;
        acc += r * r;
    });
    0.5 * acc
}

pub fn loss_l2_grad(u: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    u - g
}

/// Robustified support loss: Σ ψ_γ((B(u) − g̃)²) against a pre-binarized
/// ground truth g̃.
pub fn loss_l1(
    u: &Array2<f64>,
    truth_bin: &Array2<f64>,
    bin: &BinarizationParams,
    hub: &HuberParams,
) -> f64 {
    let b = binarize(u, bin);
    let mut acc = 0.0;
    Zip::from(&b).and(truth_bin).for_each(|&bv, &gv| {
        let r = bv - gv;
        acc += huber(r * r, hub.gamma);
    });
    acc
}

/// ∂loss/∂u pixelwise: 2r·ψ'(r²)·∂B/∂s.
pub fn loss_l1_grad_u(
    u: &Array2<f64>,
    truth_bin: &Array2<f64>,
    bin: &BinarizationParams,
    hub: &HuberParams,
) -> Array2<f64> {
    let b = binarize(u, bin);
    let db = binarize_dvalue(u, bin);
    let mut out = Array2::zeros(u.dim());
    Zip::from(&mut out)
        .and(&b)
        .and(truth_bin)
        .and(&db)
        .for_each(|o, &bv, &gv, &d| {
            let r = bv - gv;
            *o = 2.0 * r * huber_deriv(r * r, hub.gamma) * d;
        });
    out
}

/// ∂loss/∂δ: Σ 2r·ψ'(r²)·∂B/∂δ. Trajectory-free: the threshold only enters
/// through the final binarization.
pub fn loss_l1_grad_delta(
    u: &Array2<f64>,
    truth_bin: &Array2<f64>,
    bin: &BinarizationParams,
    hub: &HuberParams,
) -> f64 {
    let b = binarize(u, bin);
    let dd = binarize_ddelta(u, bin);
    let mut acc = 0.0;
    Zip::from(&b).and(truth_bin).and(&dd).for_each(|&bv, &gv, &d| {
        let r = bv - gv;
        acc += 2.0 * r * huber_deriv(r * r, hub.gamma) * d;
    });
    acc
}
