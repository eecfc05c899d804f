//! Grid-level operators for the imaging model: Gaussian point-spread
//! kernels, circular convolution, block-sum downsampling, and the composed
//! sensing operator with its adjoint.
//!
//! Conventions: images are square `Array2<f64>` in row-major order; kernels
//! have odd square support with the center tap at index `(support - 1) / 2`;
//! convolution wraps periodically at the image boundary. All kernels built
//! here are symmetric under 180-degree flips, so each convolution operator
//! is its own transpose.

use std::fmt;
use std::sync::{Arc, OnceLock};

use ndarray::Array2;
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::CoreError;

/// Default odd support for a Gaussian kernel of width `width`: 6⌈ς⌉ + 1.
pub fn default_support(width: f64) -> usize {
    6 * (width.ceil().max(1.0) as usize) + 1
}

/// Largest usable odd support on a `side`-pixel grid, preferring the default.
pub fn support_for_grid(width: f64, side: usize) -> usize {
    let s = default_support(width);
    if s <= side {
        s
    } else if side % 2 == 1 {
        side
    } else {
        side - 1
    }
}

fn check_support(support: usize, side: usize) -> Result<(), CoreError> {
    if support == 0 || support % 2 == 0 || support > side {
        return Err(CoreError::KernelSupport { support, side });
    }
    Ok(())
}

fn check_width(width: f64) -> Result<(), CoreError> {
    if !(width > 0.0) || !width.is_finite() {
        return Err(CoreError::KernelWidth(width));
    }
    Ok(())
}

/// Unit-sum isotropic Gaussian point-spread kernel on an odd square support.
#[derive(Debug, Clone)]
pub struct PsfKernel {
    width: f64,
    weights: Array2<f64>,
}

impl PsfKernel {
    /// Samples exp(-r²/2ς²) around the center tap and normalizes to unit sum.
    pub fn gaussian(width: f64, support: usize) -> Result<Self, CoreError> {
        check_width(width)?;
        if support == 0 || support % 2 == 0 {
            return Err(CoreError::KernelSupport {
                support,
                side: support.max(1),
            });
        }
        let c = (support - 1) as isize / 2;
        let mut weights = Array2::zeros((support, support));
        let mut sum = 0.0;
        for a in 0..support {
            for b in 0..support {
                let dy = a as isize - c;
                let dx = b as isize - c;
                let r2 = (dy * dy + dx * dx) as f64;
                let w = (-r2 / (2.0 * width * width)).exp();
                weights[[a, b]] = w;
                sum += w;
            }
        }
        weights.mapv_inplace(|w| w / sum);
        Ok(PsfKernel { width, weights })
    }

    /// Wraps externally supplied taps, checking unit sum and flip symmetry.
    pub fn from_weights(width: f64, weights: Array2<f64>) -> Result<Self, CoreError> {
        check_width(width)?;
        let (rows, cols) = weights.dim();
        if rows != cols || rows == 0 || rows % 2 == 0 {
            return Err(CoreError::KernelShape { rows, cols });
        }
        let sum: f64 = weights.sum();
        if (sum - 1.0).abs() > 1e-8 {
            return Err(CoreError::KernelWeights(sum));
        }
        for a in 0..rows {
            for b in 0..cols {
                let diff = weights[[a, b]] - weights[[rows - 1 - a, cols - 1 - b]];
                if diff.abs() > 1e-12 {
                    return Err(CoreError::KernelWeights(sum));
                }
            }
        }
        Ok(PsfKernel { width, weights })
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn support(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }
}

/// Builds the unit-sum Gaussian kernel; see [`PsfKernel::gaussian`].
pub fn gaussian_kernel(width: f64, support: usize) -> Result<PsfKernel, CoreError> {
    PsfKernel::gaussian(width, support)
}

/// Entrywise square of the unit-sum Gaussian kernel. Deliberately not
/// renormalized: its mass is the variance shrink factor of the blur.
pub fn squared_kernel(width: f64, support: usize) -> Result<Array2<f64>, CoreError> {
    let kernel = PsfKernel::gaussian(width, support)?;
    Ok(kernel.weights.mapv(|w| w * w))
}

/// Per-tap analytic Gaussian, its width derivative, and their sums over the
/// support grid. The analytic normalization 1/(2πς²) keeps the closed-form
/// derivative of the squared taps in its textbook shape.
fn analytic_tables(width: f64, support: usize) -> (Array2<f64>, Array2<f64>, f64, f64) {
    let c = (support - 1) as isize / 2;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * width * width);
    let mut g = Array2::zeros((support, support));
    let mut dg = Array2::zeros((support, support));
    let (mut z, mut dz) = (0.0, 0.0);
    for a in 0..support {
        for b in 0..support {
            let dy = a as isize - c;
            let dx = b as isize - c;
            let r2 = (dy * dy + dx * dx) as f64;
            let val = norm * (-r2 / (2.0 * width * width)).exp();
            let dval = val * (r2 - 2.0 * width * width) / (width * width * width);
            g[[a, b]] = val;
            dg[[a, b]] = dval;
            z += val;
            dz += dval;
        }
    }
    (g, dg, z, dz)
}

/// Exact width derivative of [`squared_kernel`] on the same support grid.
///
/// The closed form for the analytically normalized squared Gaussian,
/// exp(-r²/ς²)/(2π²ς⁵)·(r²/ς² - 2), is divided by the squared discrete
/// normalizer, and the chain term from the normalizer's own width dependence
/// is subtracted. The chain term decays with the truncated tail mass, so the
/// closed form alone is recovered as the support grows.
pub fn kernel_width_derivative(width: f64, support: usize) -> Result<Array2<f64>, CoreError> {
    check_width(width)?;
    if support == 0 || support % 2 == 0 {
        return Err(CoreError::KernelSupport {
            support,
            side: support.max(1),
        });
    }
    let (g, _, z, dz) = analytic_tables(width, support);
    let c = (support - 1) as isize / 2;
    let w2 = width * width;
    let closed_norm = 1.0 / (2.0 * std::f64::consts::PI * std::f64::consts::PI * width.powi(5));
    let mut out = Array2::zeros((support, support));
    for a in 0..support {
        for b in 0..support {
            let dy = a as isize - c;
            let dx = b as isize - c;
            let r2 = (dy * dy + dx * dx) as f64;
            let closed = (-r2 / w2).exp() * closed_norm * (r2 / w2 - 2.0);
            let h2 = (g[[a, b]] / z) * (g[[a, b]] / z);
            out[[a, b]] = closed / (z * z) - 2.0 * h2 * dz / z;
        }
    }
    Ok(out)
}

/// Exact width derivative of the unit-sum Gaussian kernel itself.
pub fn gaussian_width_derivative(width: f64, support: usize) -> Result<Array2<f64>, CoreError> {
    check_width(width)?;
    if support == 0 || support % 2 == 0 {
        return Err(CoreError::KernelSupport {
            support,
            side: support.max(1),
        });
    }
    let (g, dg, z, dz) = analytic_tables(width, support);
    let mut out = Array2::zeros((support, support));
    for a in 0..support {
        for b in 0..support {
            out[[a, b]] = (dg[[a, b]] - g[[a, b]] / z * dz) / z;
        }
    }
    Ok(out)
}

/// Shared 1-D plans for square 2-D transforms, rows-then-columns.
#[derive(Clone)]
struct Fft2 {
    side: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(side: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            side,
            fwd: planner.plan_fft_forward(side),
            inv: planner.plan_fft_inverse(side),
        }
    }

    fn transpose(&self, buf: &mut [Complex<f64>]) {
        let n = self.side;
        for i in 0..n {
            for j in (i + 1)..n {
                buf.swap(i * n + j, j * n + i);
            }
        }
    }

    fn forward(&self, buf: &mut [Complex<f64>], scratch: &mut Vec<Complex<f64>>) {
        scratch.resize(self.fwd.get_inplace_scratch_len(), Complex::default());
        self.fwd.process_with_scratch(buf, scratch);
        self.transpose(buf);
        self.fwd.process_with_scratch(buf, scratch);
        self.transpose(buf);
    }

    fn inverse(&self, buf: &mut [Complex<f64>], scratch: &mut Vec<Complex<f64>>) {
        scratch.resize(self.inv.get_inplace_scratch_len(), Complex::default());
        self.inv.process_with_scratch(buf, scratch);
        self.transpose(buf);
        self.inv.process_with_scratch(buf, scratch);
        self.transpose(buf);
        let scale = 1.0 / (self.side * self.side) as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }
}

/// Embeds an odd square kernel into a `side`×`side` periodic domain with the
/// center tap at the origin.
fn embed_kernel(weights: &Array2<f64>, side: usize) -> Array2<f64> {
    let support = weights.nrows();
    let c = (support - 1) as isize / 2;
    let n = side as isize;
    let mut out = Array2::zeros((side, side));
    for a in 0..support {
        for b in 0..support {
            let i = (a as isize - c).rem_euclid(n) as usize;
            let j = (b as isize - c).rem_euclid(n) as usize;
            out[[i, j]] = weights[[a, b]];
        }
    }
    out
}

/// Circular convolution with a fixed kernel, realized in the Fourier domain.
struct SpectralConv {
    fft: Fft2,
    spectrum: Vec<Complex<f64>>,
}

impl SpectralConv {
    fn new(weights: &Array2<f64>, side: usize) -> Self {
        let fft = Fft2::new(side);
        let embedded = embed_kernel(weights, side);
        let mut spectrum: Vec<Complex<f64>> = embedded
            .iter()
            .map(|&w| Complex::new(w, 0.0))
            .collect();
        let mut scratch = Vec::new();
        fft.forward(&mut spectrum, &mut scratch);
        SpectralConv { fft, spectrum }
    }

    fn apply(&self, img: &Array2<f64>) -> Array2<f64> {
        let side = self.fft.side;
        debug_assert_eq!(img.dim(), (side, side));
        let mut buf: Vec<Complex<f64>> = img.iter().map(|&v| Complex::new(v, 0.0)).collect();
        let mut scratch = Vec::new();
        self.fft.forward(&mut buf, &mut scratch);
        for (v, s) in buf.iter_mut().zip(&self.spectrum) {
            *v *= s;
        }
        self.fft.inverse(&mut buf, &mut scratch);
        Array2::from_shape_vec((side, side), buf.into_iter().map(|v| v.re).collect())
            .expect("buffer length matches shape")
    }
}

fn square_side(img: &Array2<f64>) -> Result<usize, CoreError> {
    let (rows, cols) = img.dim();
    if rows != cols {
        return Err(CoreError::NotSquare { rows, cols });
    }
    Ok(rows)
}

/// Circular convolution of a square image with an odd square kernel centered
/// on its middle tap.
pub fn convolve(img: &Array2<f64>, kernel: &Array2<f64>) -> Result<Array2<f64>, CoreError> {
    let side = square_side(img)?;
    let (krows, kcols) = kernel.dim();
    if krows != kcols {
        return Err(CoreError::KernelShape {
            rows: krows,
            cols: kcols,
        });
    }
    check_support(krows, side)?;
    Ok(SpectralConv::new(kernel, side).apply(img))
}

/// Block-sum downsampling: each output pixel sums an L×L patch.
///
/// Patch entries accumulate columns-outer, rows-inner, matching the
/// column-stacked matrix form of the operator addend for addend.
pub fn downsample(x: &Array2<f64>, factor: usize) -> Result<Array2<f64>, CoreError> {
    let side = square_side(x)?;
    if factor == 0 || side % factor != 0 {
        return Err(CoreError::FactorMismatch { factor, side });
    }
    let m = side / factor;
    let mut out = Array2::zeros((m, m));
    for ic in 0..m {
        for jc in 0..m {
            let mut acc = 0.0;
            for j in jc * factor..(jc + 1) * factor {
                for i in ic * factor..(ic + 1) * factor {
                    acc += x[[i, j]];
                }
            }
            out[[ic, jc]] = acc;
        }
    }
    Ok(out)
}

/// Adjoint of [`downsample`]: replicates each coarse pixel over its patch.
pub fn upsample_adjoint(y: &Array2<f64>, factor: usize) -> Result<Array2<f64>, CoreError> {
    let m = square_side(y)?;
    if factor == 0 {
        return Err(CoreError::FactorMismatch { factor, side: m });
    }
    let side = m * factor;
    let mut out = Array2::zeros((side, side));
    for i in 0..side {
        for j in 0..side {
            out[[i, j]] = y[[i / factor, j / factor]];
        }
    }
    Ok(out)
}

/// Which kernel the sensing operator convolves with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMode {
    /// Unit-sum Gaussian blur followed by block-sum downsampling.
    Standard,
    /// Entrywise-squared Gaussian on the native grid (factor 1); used when
    /// the operator acts on temporal variance images.
    Squared,
}

/// The sensing operator A: blur on the fine grid, then block-sum to the
/// coarse grid. Its adjoint replicates coarse pixels and convolves with the
/// same (symmetric) kernel. The width-derivative operator ∂A/∂ς swaps the
/// kernel taps for their exact width derivatives.
pub struct ForwardModel {
    mode: KernelMode,
    width: f64,
    factor: usize,
    fine_side: usize,
    kernel_weights: Array2<f64>,
    conv: SpectralConv,
    width_deriv: OnceLock<SpectralConv>,
}

impl fmt::Debug for ForwardModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ForwardModel")
            .field("mode", &self.mode)
            .field("width", &self.width)
            .field("support", &self.kernel_weights.nrows())
            .field("factor", &self.factor)
            .field("fine_side", &self.fine_side)
            .finish()
    }
}

impl ForwardModel {
    /// Blur-and-downsample operator with the given unit-sum kernel.
    pub fn standard(
        kernel: &PsfKernel,
        factor: usize,
        fine_side: usize,
    ) -> Result<Self, CoreError> {
        if factor == 0 || fine_side == 0 || fine_side % factor != 0 {
            return Err(CoreError::FactorMismatch {
                factor,
                side: fine_side,
            });
        }
        check_support(kernel.support(), fine_side)?;
        let weights = kernel.weights().clone();
        let conv = SpectralConv::new(&weights, fine_side);
        Ok(ForwardModel {
            mode: KernelMode::Standard,
            width: kernel.width(),
            factor,
            fine_side,
            kernel_weights: weights,
            conv,
            width_deriv: OnceLock::new(),
        })
    }

    /// Squared-kernel operator on the native grid (factor fixed at 1).
    pub fn squared(width: f64, support: usize, side: usize) -> Result<Self, CoreError> {
        check_support(support, side)?;
        let weights = squared_kernel(width, support)?;
        let conv = SpectralConv::new(&weights, side);
        Ok(ForwardModel {
            mode: KernelMode::Squared,
            width,
            factor: 1,
            fine_side: side,
            kernel_weights: weights,
            conv,
            width_deriv: OnceLock::new(),
        })
    }

    pub fn mode(&self) -> KernelMode {
        self.mode
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn support(&self) -> usize {
        self.kernel_weights.nrows()
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn fine_side(&self) -> usize {
        self.fine_side
    }

    pub fn coarse_side(&self) -> usize {
        self.fine_side / self.factor
    }

    pub fn kernel_weights(&self) -> &Array2<f64> {
        &self.kernel_weights
    }

    /// A u: convolve on the fine grid, then block-sum to the coarse grid.
    pub fn apply(&self, u: &Array2<f64>) -> Array2<f64> {
        assert_eq!(u.dim(), (self.fine_side, self.fine_side), "fine image shape");
        let blurred = self.conv.apply(u);
        downsample(&blurred, self.factor).expect("validated at construction")
    }

    /// Aᵀ r: replicate coarse pixels, then convolve with the same kernel.
    pub fn apply_adjoint(&self, r: &Array2<f64>) -> Array2<f64> {
        let m = self.coarse_side();
        assert_eq!(r.dim(), (m, m), "coarse image shape");
        let lifted = upsample_adjoint(r, self.factor).expect("validated at construction");
        self.conv.apply(&lifted)
    }

    fn width_deriv_conv(&self) -> &SpectralConv {
        self.width_deriv.get_or_init(|| {
            let support = self.kernel_weights.nrows();
            let taps = match self.mode {
                KernelMode::Standard => gaussian_width_derivative(self.width, support),
                KernelMode::Squared => kernel_width_derivative(self.width, support),
            }
            .expect("width and support validated at construction");
            SpectralConv::new(&taps, self.fine_side)
        })
    }

    /// (∂A/∂ς) u.
    pub fn apply_width_deriv(&self, u: &Array2<f64>) -> Array2<f64> {
        assert_eq!(u.dim(), (self.fine_side, self.fine_side), "fine image shape");
        let blurred = self.width_deriv_conv().apply(u);
        downsample(&blurred, self.factor).expect("validated at construction")
    }

    /// (∂A/∂ς)ᵀ r.
    pub fn apply_width_deriv_adjoint(&self, r: &Array2<f64>) -> Array2<f64> {
        let m = self.coarse_side();
        assert_eq!(r.dim(), (m, m), "coarse image shape");
        let lifted = upsample_adjoint(r, self.factor).expect("validated at construction");
        self.width_deriv_conv().apply(&lifted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{dot, max_abs};
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(side: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((side, side), |_| rng.random::<f64>())
    }

    /// Independent double-loop circular convolution.
    fn convolve_direct(img: &Array2<f64>, kernel: &Array2<f64>) -> Array2<f64> {
        let n = img.nrows() as isize;
        let s = kernel.nrows();
        let c = (s - 1) as isize / 2;
        let mut out = Array2::zeros(img.dim());
        for i in 0..img.nrows() {
            for j in 0..img.ncols() {
                let mut acc = 0.0;
                for a in 0..s {
                    for b in 0..s {
                        let dy = a as isize - c;
                        let dx = b as isize - c;
                        let si = (i as isize - dy).rem_euclid(n) as usize;
                        let sj = (j as isize - dx).rem_euclid(n) as usize;
                        acc += kernel[[a, b]] * img[[si, sj]];
                    }
                }
                out[[i, j]] = acc;
            }
        }
        out
    }

    /// Naive patch-sum downsampling, written independently of the library.
    fn downsample_naive(x: &Array2<f64>, factor: usize) -> Array2<f64> {
        let m = x.nrows() / factor;
        let mut out = Array2::zeros((m, m));
        for ic in 0..m {
            for jc in 0..m {
                let mut acc = 0.0;
                for di in 0..factor {
                    for dj in 0..factor {
                        acc += x[[ic * factor + di, jc * factor + dj]];
                    }
                }
                out[[ic, jc]] = acc;
            }
        }
        out
    }

    #[test]
    fn default_support_values() {
        assert_eq!(default_support(2.5), 19);
        assert_eq!(default_support(3.0), 19);
        assert_eq!(default_support(1.5), 13);
        assert_eq!(default_support(0.3), 7);
        assert_eq!(support_for_grid(1.5, 8), 7);
        assert_eq!(support_for_grid(1.5, 13), 13);
        assert_eq!(support_for_grid(2.5, 128), 19);
    }

    #[test]
    fn gaussian_kernel_unit_sum_and_symmetry() {
        for &(width, support) in &[(1.5, 13), (2.5, 19), (3.0, 31), (4.3859, 31)] {
            let k = gaussian_kernel(width, support).unwrap();
            let sum: f64 = k.weights().sum();
            assert!(
                (sum - 1.0).abs() <= 1e-12,
                "kernel sum {} for width {}",
                sum,
                width
            );
            for a in 0..support {
                for b in 0..support {
                    assert_eq!(
                        k.weights()[[a, b]],
                        k.weights()[[support - 1 - a, support - 1 - b]],
                        "flip symmetry at ({}, {})",
                        a,
                        b
                    );
                }
            }
            let c = (support - 1) / 2;
            for b in 1..support {
                assert!(
                    k.weights()[[c, b - 1]] <= k.weights()[[c, b]] || b > c,
                    "center row rises toward the center"
                );
            }
        }
    }

    #[test]
    fn gaussian_kernel_fwhm_from_nm_spec() {
        // 258.21 nm full width at half maximum on 25 nm fine pixels.
        let width = 258.21 / (2.0 * (2.0 * (2.0f64).ln()).sqrt()) / 25.0;
        assert!((width - 4.386).abs() < 1e-3, "derived width {}", width);
        let support = default_support(width);
        assert_eq!(support, 31);
        let k = gaussian_kernel(width, support).unwrap();
        let c = (support - 1) / 2;
        let half = k.weights()[[c, c]] / 2.0;
        // Crossing of the half maximum along the center row, linearly
        // interpolated between taps.
        let mut crossing = None;
        for b in c..support - 1 {
            let (v0, v1) = (k.weights()[[c, b]], k.weights()[[c, b + 1]]);
            if v0 >= half && v1 < half {
                crossing = Some(b as f64 - c as f64 + (v0 - half) / (v0 - v1));
                break;
            }
        }
        let fwhm = 2.0 * crossing.expect("half maximum is crossed inside the support");
        let expected = 2.0 * (2.0 * (2.0f64).ln()).sqrt() * width;
        assert!(
            (fwhm - expected).abs() / expected < 0.02,
            "empirical fwhm {} vs {}",
            fwhm,
            expected
        );
    }

    #[test]
    fn delta_like_kernel_at_tiny_width() {
        let k = gaussian_kernel(1e-3, 3).unwrap();
        assert_eq!(k.weights()[[1, 1]], 1.0);
        assert_eq!(k.weights()[[0, 0]], 0.0);
    }

    #[test]
    fn from_weights_validates() {
        let mut delta = Array2::zeros((3, 3));
        delta[[1, 1]] = 1.0;
        assert!(PsfKernel::from_weights(1.0, delta.clone()).is_ok());
        delta[[1, 1]] = 0.5;
        assert!(PsfKernel::from_weights(1.0, delta).is_err());
        let even = Array2::from_elem((2, 2), 0.25);
        assert!(PsfKernel::from_weights(1.0, even).is_err());
    }

    #[test]
    fn squared_kernel_is_entrywise_square() {
        let k = gaussian_kernel(2.0, 13).unwrap();
        let sq = squared_kernel(2.0, 13).unwrap();
        for (w, s) in k.weights().iter().zip(sq.iter()) {
            assert_eq!(*s, w * w);
            assert!(*s <= *w, "squares of sub-unit taps shrink");
        }
        assert!(sq.sum() < 1.0);
        let direct: f64 = k.weights().iter().map(|w| w * w).sum();
        assert!((sq.sum() - direct).abs() <= 1e-15);
    }

    #[test]
    fn squared_kernel_std_shrinks_by_sqrt_two() {
        // The squared Gaussian is a Gaussian of width ς/√2.
        let (width, support) = (3.0, 31);
        let sq = squared_kernel(width, support).unwrap();
        let c = (support - 1) as f64 / 2.0;
        let mass: f64 = sq.sum();
        let mut second = 0.0;
        for a in 0..support {
            for b in 0..support {
                let dy = a as f64 - c;
                second += dy * dy * sq[[a, b]];
            }
        }
        let std = (second / mass).sqrt();
        let expected = width / (2.0f64).sqrt();
        assert!(
            (std - expected).abs() / expected < 0.02,
            "empirical std {} vs {}",
            std,
            expected
        );
    }

    #[test]
    fn kernel_width_derivative_matches_finite_difference() {
        for &(width, support) in &[(3.0, 31), (2.5, 19), (1.5, 13)] {
            let h = 1e-5 * width;
            let plus = squared_kernel(width + h, support).unwrap();
            let minus = squared_kernel(width - h, support).unwrap();
            let deriv = kernel_width_derivative(width, support).unwrap();
            let scale = max_abs(&deriv);
            for a in 0..support {
                for b in 0..support {
                    let fd = (plus[[a, b]] - minus[[a, b]]) / (2.0 * h);
                    let diff = (deriv[[a, b]] - fd).abs();
                    assert!(
                        diff <= 1e-5 * scale,
                        "tap ({}, {}): analytic {} vs fd {}",
                        a,
                        b,
                        deriv[[a, b]],
                        fd
                    );
                    if fd.abs() >= 1e-3 * scale {
                        assert!(
                            diff / fd.abs() <= 1e-5,
                            "relative error at ({}, {}): {} vs {}",
                            a,
                            b,
                            deriv[[a, b]],
                            fd
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn kernel_width_derivative_center_sign_and_symmetry() {
        let deriv = kernel_width_derivative(3.0, 31).unwrap();
        let c = 15;
        assert!(
            deriv[[c, c]] < 0.0,
            "growing the width lowers the squared peak, got {}",
            deriv[[c, c]]
        );
        for a in 0..31 {
            for b in 0..31 {
                assert_eq!(deriv[[a, b]], deriv[[30 - a, 30 - b]]);
            }
        }
    }

    #[test]
    fn gaussian_width_derivative_matches_finite_difference() {
        for &(width, support) in &[(2.5, 19), (1.2, 11)] {
            let h = 1e-5 * width;
            let plus = gaussian_kernel(width + h, support).unwrap();
            let minus = gaussian_kernel(width - h, support).unwrap();
            let deriv = gaussian_width_derivative(width, support).unwrap();
            let scale = max_abs(&deriv);
            for a in 0..support {
                for b in 0..support {
                    let fd = (plus.weights()[[a, b]] - minus.weights()[[a, b]]) / (2.0 * h);
                    assert!(
                        (deriv[[a, b]] - fd).abs() <= 1e-5 * scale,
                        "tap ({}, {})",
                        a,
                        b
                    );
                }
            }
        }
    }

    #[test]
    fn convolve_matches_double_loop_oracle() {
        let img = rand_image(8, 11);
        let k = gaussian_kernel(1.5, 7).unwrap();
        let fft = convolve(&img, k.weights()).unwrap();
        let direct = convolve_direct(&img, k.weights());
        for (a, b) in fft.iter().zip(direct.iter()) {
            assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn convolve_delta_kernel_is_identity() {
        let img = rand_image(9, 3);
        let mut delta = Array2::zeros((3, 3));
        delta[[1, 1]] = 1.0;
        let out = convolve(&img, &delta).unwrap();
        for (a, b) in out.iter().zip(img.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn convolve_rejects_oversized_kernel() {
        let img = rand_image(4, 0);
        let k = gaussian_kernel(1.5, 7).unwrap();
        assert!(convolve(&img, k.weights()).is_err());
    }

    #[test]
    fn downsample_equals_column_stacked_matrix_product_bitwise() {
        // vec() stacks columns, so the vectorized index is row + side * col.
        for &(side, factor) in &[(6usize, 2usize), (8, 4), (12, 3)] {
            let x = rand_image(side, side as u64);
            let m = side / factor;
            let mut s = vec![vec![0.0f64; side * side]; m * m];
            for i in 0..side {
                for j in 0..side {
                    s[(i / factor) + m * (j / factor)][i + side * j] = 1.0;
                }
            }
            let mut xv = vec![0.0f64; side * side];
            for j in 0..side {
                for i in 0..side {
                    xv[i + side * j] = x[[i, j]];
                }
            }
            let got = downsample(&x, factor).unwrap();
            for p in 0..m * m {
                let mut acc = 0.0;
                for (q, xq) in xv.iter().enumerate() {
                    acc += s[p][q] * xq;
                }
                let (ic, jc) = (p % m, p / m);
                assert_eq!(got[[ic, jc]], acc, "coarse pixel ({}, {})", ic, jc);
            }
        }
    }

    #[test]
    fn downsample_preserves_total_intensity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let counts = Array2::from_shape_fn((12, 12), |_| rng.random_range(0..4096) as f64);
        let down = downsample(&counts, 4).unwrap();
        assert_eq!(down.sum(), counts.sum(), "integer sums are exact");
        let real = rand_image(12, 6);
        let down = downsample(&real, 3).unwrap();
        assert!((down.sum() - real.sum()).abs() <= 1e-12 * real.sum().abs().max(1.0));
    }

    #[test]
    fn downsample_rejects_bad_factor() {
        let x = rand_image(9, 1);
        assert!(downsample(&x, 2).is_err());
        assert!(downsample(&x, 0).is_err());
    }

    #[test]
    fn upsample_adjoint_replicates() {
        let y = ndarray::array![[1.0, 2.0], [3.0, 4.0]];
        let up = upsample_adjoint(&y, 2).unwrap();
        assert_eq!(up[[0, 0]], 1.0);
        assert_eq!(up[[0, 1]], 1.0);
        assert_eq!(up[[1, 1]], 1.0);
        assert_eq!(up[[0, 2]], 2.0);
        assert_eq!(up[[3, 3]], 4.0);
    }

    #[test]
    fn downsample_upsample_is_factor_squared_scaling() {
        let y = rand_image(5, 9);
        let round = downsample(&upsample_adjoint(&y, 3).unwrap(), 3).unwrap();
        for (r, v) in round.iter().zip(y.iter()) {
            assert!((r - 9.0 * v).abs() <= 1e-12);
        }
    }

    #[test]
    fn downsample_upsample_adjoint_identity() {
        let x = rand_image(8, 21);
        let y = rand_image(4, 22);
        let lhs = dot(&downsample(&x, 2).unwrap(), &y);
        let rhs = dot(&x, &upsample_adjoint(&y, 2).unwrap());
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn forward_model_matches_dense_oracle() {
        let (side, factor) = (8usize, 2usize);
        let kernel = gaussian_kernel(1.5, 7).unwrap();
        let model = ForwardModel::standard(&kernel, factor, side).unwrap();
        let u = rand_image(side, 31);

        // Dense matrix for A assembled from the independent oracles.
        let m = side / factor;
        let mut columns = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                let mut basis = Array2::zeros((side, side));
                basis[[i, j]] = 1.0;
                let col = downsample_naive(&convolve_direct(&basis, kernel.weights()), factor);
                columns.push(col);
            }
        }
        let mut expected = Array2::zeros((m, m));
        for (idx, col) in columns.iter().enumerate() {
            let (i, j) = (idx / side, idx % side);
            expected.scaled_add(u[[i, j]], col);
        }
        let got = model.apply(&u);
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() <= 1e-10, "{} vs {}", a, b);
        }
    }

    #[test]
    fn forward_model_constant_image_gains_factor_squared() {
        let kernel = gaussian_kernel(1.5, 7).unwrap();
        let model = ForwardModel::standard(&kernel, 4, 16).unwrap();
        let u = Array2::from_elem((16, 16), 3.0);
        let got = model.apply(&u);
        for v in got.iter() {
            assert!((v - 48.0).abs() <= 1e-10, "unit-sum blur keeps flux: {}", v);
        }
    }

    #[test]
    fn forward_model_adjoint_identity() {
        let kernel = gaussian_kernel(2.5, 19).unwrap();
        let model = ForwardModel::standard(&kernel, 4, 32).unwrap();
        let u = rand_image(32, 41);
        let r = rand_image(8, 42);
        let lhs = dot(&model.apply(&u), &r);
        let rhs = dot(&u, &model.apply_adjoint(&r));
        assert!(
            (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0),
            "{} vs {}",
            lhs,
            rhs
        );
    }

    #[test]
    fn squared_model_convolves_with_squared_taps() {
        let model = ForwardModel::squared(3.0, 19, 32).unwrap();
        assert_eq!(model.factor(), 1);
        let u = rand_image(32, 55);
        let got = model.apply(&u);
        let direct = convolve_direct(&u, &squared_kernel(3.0, 19).unwrap());
        for (a, b) in got.iter().zip(direct.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn width_deriv_operator_uses_derivative_taps() {
        let model = ForwardModel::squared(3.0, 19, 32).unwrap();
        let u = rand_image(32, 56);
        let got = model.apply_width_deriv(&u);
        let direct = convolve_direct(&u, &kernel_width_derivative(3.0, 19).unwrap());
        for (a, b) in got.iter().zip(direct.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }

        let kernel = gaussian_kernel(1.5, 7).unwrap();
        let model = ForwardModel::standard(&kernel, 2, 8).unwrap();
        let u = rand_image(8, 57);
        let got = model.apply_width_deriv(&u);
        let direct = downsample_naive(
            &convolve_direct(&u, &gaussian_width_derivative(1.5, 7).unwrap()),
            2,
        );
        for (a, b) in got.iter().zip(direct.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn width_deriv_adjoint_identity() {
        let model = ForwardModel::squared(2.5, 19, 24).unwrap();
        let u = rand_image(24, 61);
        let r = rand_image(24, 62);
        let lhs = dot(&model.apply_width_deriv(&u), &r);
        let rhs = dot(&u, &model.apply_width_deriv_adjoint(&r));
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn prop_adjoint_identity(seed in 0u64..1000, msize in 2usize..6, factor in 1usize..4, width in 0.5f64..3.0) {
            let side = msize * factor;
            let support = support_for_grid(width, side);
            let kernel = gaussian_kernel(width, support).unwrap();
            let model = ForwardModel::standard(&kernel, factor, side).unwrap();
            let u = rand_image(side, seed);
            let r = rand_image(msize, seed + 1);
            let lhs = dot(&model.apply(&u), &r);
            let rhs = dot(&u, &model.apply_adjoint(&r));
            prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
        }

        #[test]
        fn prop_downsample_integer_sums_exact(seed in 0u64..1000, msize in 1usize..6, factor in 1usize..5) {
            let side = msize * factor;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Array2::from_shape_fn((side, side), |_| rng.random_range(0..1000) as f64);
            let down = downsample(&x, factor).unwrap();
            prop_assert_eq!(down.sum(), x.sum());
        }
    }
}
