//! Synthetic data generation: sparse emitter frames pushed through the
//! forward model under Gaussian or Poisson noise, blinking fluctuation
//! stacks, and the empirical variance images the fluctuation pipeline
//! trains on.

use ndarray::Array2;
use rand::prelude::*;
use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::grid_ops::{gaussian_kernel, support_for_grid, ForwardModel};
use crate::metrics::average_stack;

/// Per-emitter brightness law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum IntensityLaw {
    /// Uniform on [lo, hi).
    Uniform { lo: f64, hi: f64 },
    /// Discrete levels with the given probabilities.
    Categorical { levels: Vec<f64>, probs: Vec<f64> },
}

impl IntensityLaw {
    fn validate(&self) -> Result<(), CoreError> {
        match self {
            IntensityLaw::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite()) || lo > hi || *lo < 0.0 {
                    return Err(CoreError::BadConfig(format!(
                        "intensity range [{lo}, {hi}] is not an ordered nonnegative pair"
                    )));
                }
            }
            IntensityLaw::Categorical { levels, probs } => {
                if levels.is_empty() || levels.len() != probs.len() {
                    return Err(CoreError::BadConfig(
                        "categorical intensities need matching nonempty levels and probs".into(),
                    ));
                }
                if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                    return Err(CoreError::BadConfig(
                        "categorical probabilities must lie in [0, 1]".into(),
                    ));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(CoreError::BadConfig(format!(
                        "categorical probabilities sum to {total}, not 1"
                    )));
                }
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            IntensityLaw::Uniform { lo, hi } => {
                if lo == hi {
                    *lo
                } else {
                    rng.random_range(*lo..*hi)
                }
            }
            IntensityLaw::Categorical { levels, probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (&level, &p) in levels.iter().zip(probs) {
                    acc += p;
                    if u < acc {
                        return level;
                    }
                }
                *levels.last().unwrap()
            }
        }
    }
}

/// Measurement noise applied after the forward model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseKind {
    Gaussian { sigma: f64 },
    Poisson { background: f64 },
}

/// Recipe for a sparse-frame training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameGenConfig {
    pub fine_side: usize,
    pub factor: usize,
    pub emitters: (usize, usize),
    pub intensity: IntensityLaw,
    pub psf_width: f64,
    pub noise: NoiseKind,
    pub frames: usize,
    /// Consecutive frames sharing one emitter configuration, each corrupted
    /// independently; 1 reduces to fully independent frames.
    pub persistence: usize,
    pub seed: u64,
}

impl FrameGenConfig {
    pub fn coarse_side(&self) -> usize {
        self.fine_side / self.factor
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.factor == 0 || self.fine_side == 0 || self.fine_side % self.factor != 0 {
            return Err(CoreError::FactorMismatch {
                factor: self.factor,
                side: self.fine_side,
            });
        }
        let (lo, hi) = self.emitters;
        if lo > hi {
            return Err(CoreError::BadConfig(format!(
                "emitter count range [{lo}, {hi}] is reversed"
            )));
        }
        if hi > self.fine_side * self.fine_side {
            return Err(CoreError::BadConfig(format!(
                "cannot place {hi} distinct emitters on a {0}×{0} grid",
                self.fine_side
            )));
        }
        self.intensity.validate()?;
        if !(self.psf_width > 0.0) {
            return Err(CoreError::NonPositive("psf width", self.psf_width));
        }
        if let NoiseKind::Gaussian { sigma } = self.noise {
            if sigma < 0.0 {
                return Err(CoreError::NonPositive("noise level", sigma));
            }
        }
        if self.frames == 0 {
            return Err(CoreError::EmptyDataset);
        }
        if self.persistence == 0 {
            return Err(CoreError::BadConfig("persistence must be at least 1".into()));
        }
        Ok(())
    }

    /// Forward model shared by every frame of the set.
    pub fn model(&self) -> Result<ForwardModel, CoreError> {
        let support = support_for_grid(self.psf_width, self.fine_side);
        let kernel = gaussian_kernel(self.psf_width, support)?;
        ForwardModel::standard(&kernel, self.factor, self.fine_side)
    }
}

/// Uniformly chosen distinct emitter pixels with intensities from the law.
pub fn gen_sparse_frame(cfg: &FrameGenConfig, rng: &mut impl Rng) -> Result<Array2<f64>, CoreError> {
    cfg.validate()?;
    let n = cfg.fine_side;
    let (lo, hi) = cfg.emitters;
    let count = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let mut frame = Array2::zeros((n, n));
    for idx in index::sample(rng, n * n, count) {
        frame[[idx / n, idx % n]] = cfg.intensity.sample(rng);
    }
    Ok(frame)
}

/// One Poisson draw. Inversion below mean 30, above that a rounded normal
/// approximation with negative draws rejected; deterministic given the RNG
/// state either way.
pub fn poisson_sample(mean: f64, rng: &mut impl Rng) -> Result<f64, CoreError> {
    if mean < 0.0 || !mean.is_finite() {
        return Err(CoreError::NonPositive("poisson mean", mean));
    }
    if mean == 0.0 {
        return Ok(0.0);
    }
    if mean < 30.0 {
        let u: f64 = rng.random();
        let mut p = (-mean).exp();
        let mut cdf = p;
        let mut k = 0.0;
        while u > cdf {
            k += 1.0;
            p *= mean / k;
            cdf += p;
            // Beyond any plausible tail the increments underflow; bail out
            // rather than spin.
            if k > 1e6 {
                break;
            }
        }
        Ok(k)
    } else {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            let x = mean + mean.sqrt() * z;
            if x >= 0.0 {
                return Ok(x.round());
            }
        }
    }
}

/// Pushes a clean frame through the forward model and corrupts it.
pub fn corrupt(
    g: &Array2<f64>,
    model: &ForwardModel,
    noise: &NoiseKind,
    rng: &mut impl Rng,
) -> Result<Array2<f64>, CoreError> {
    let mut f = model.apply(g);
    match *noise {
        NoiseKind::Gaussian { sigma } => {
            if sigma < 0.0 {
                return Err(CoreError::NonPositive("noise level", sigma));
            }
            if sigma > 0.0 {
                for v in f.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += sigma * z;
                }
            }
        }
        NoiseKind::Poisson { background } => {
            for v in f.iter_mut() {
                *v = poisson_sample(*v + background, rng)?;
            }
        }
    }
    Ok(f)
}

/// One (data, truth) training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub data: Array2<f64>,
    pub truth: Array2<f64>,
}

/// A generated dataset plus the seed that reproduces it.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub pairs: Vec<SamplePair>,
    pub seed: u64,
}

/// Per-sample RNG: one seed, one independent stream per sample index.
pub(crate) fn stream_rng(seed: u64, sample: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample);
    rng
}

/// Generates `frames` corrupted/clean pairs. Emitter configurations are
/// redrawn every `persistence` frames; noise is fresh per frame.
pub fn gen_dataset(cfg: &FrameGenConfig) -> Result<SampleSet, CoreError> {
    cfg.validate()?;
    let model = cfg.model()?;
    let mut pairs = Vec::with_capacity(cfg.frames);
    let mut truth: Option<Array2<f64>> = None;
    for t in 0..cfg.frames {
        let mut rng = stream_rng(cfg.seed, t as u64);
        if t % cfg.persistence == 0 || truth.is_none() {
            truth = Some(gen_sparse_frame(cfg, &mut rng)?);
        }
        let g = truth.clone().unwrap();
        let data = corrupt(&g, &model, &cfg.noise, &mut rng)?;
        pairs.push(SamplePair { data, truth: g });
    }
    Ok(SampleSet { pairs, seed: cfg.seed })
}

/// Independent two-state ON/OFF blinking law shared by all emitter pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlinkingLaw {
    /// Stationary fraction of frames a pixel spends ON.
    pub on_fraction: f64,
    /// Chain mixing rate in (0, 1]: the OFF→ON and ON→OFF probabilities are
    /// `on_fraction·rate` and `(1−on_fraction)·rate`, which leaves the
    /// stationary ON-fraction exactly `on_fraction`.
    pub rate: f64,
}

impl BlinkingLaw {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(0.0..=1.0).contains(&self.on_fraction) {
            return Err(CoreError::BadConfig(format!(
                "on fraction {} outside [0, 1]",
                self.on_fraction
            )));
        }
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(CoreError::BadConfig(format!(
                "blinking rate {} outside (0, 1]",
                self.rate
            )));
        }
        Ok(())
    }
}

/// Temporal stack of a pattern under pixelwise independent blinking:
/// frame `t` shows each emitter at full pattern intensity when its chain is
/// ON and at zero otherwise. Chains start in the stationary law.
pub fn gen_blinking_stack(
    pattern: &Array2<f64>,
    blink: &BlinkingLaw,
    frames: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Array2<f64>>, CoreError> {
    blink.validate()?;
    if frames < 2 {
        return Err(CoreError::BadConfig(
            "a fluctuation stack needs at least two frames".into(),
        ));
    }
    let emitters: Vec<((usize, usize), f64)> = pattern
        .indexed_iter()
        .filter(|&(_, &v)| v != 0.0)
        .map(|(c, &v)| (c, v))
        .collect();
    let q = blink.on_fraction;
    let p_on = q * blink.rate;
    let p_off = (1.0 - q) * blink.rate;
    let mut on: Vec<bool> = (0..emitters.len()).map(|_| rng.random::<f64>() < q).collect();
    let mut stack = Vec::with_capacity(frames);
    for _ in 0..frames {
        let mut frame = Array2::zeros(pattern.dim());
        for (state, &((i, j), a)) in on.iter_mut().zip(&emitters) {
            if *state {
                frame[[i, j]] = a;
            }
            let u: f64 = rng.random();
            *state = if *state { u >= p_off } else { u < p_on };
        }
        stack.push(frame);
    }
    Ok(stack)
}

/// Unbiased per-pixel sample variance of the stack.
pub fn empirical_variance(stack: &[Array2<f64>]) -> Result<Array2<f64>, CoreError> {
    if stack.len() < 2 {
        return Err(CoreError::BadConfig(
            "sample variance needs at least two frames".into(),
        ));
    }
    let mean = average_stack(stack)?;
    let mut acc = Array2::zeros(mean.dim());
    for frame in stack {
        let centered = frame - &mean;
        acc += &(&centered * &centered);
    }
    acc /= (stack.len() - 1) as f64;
    Ok(acc)
}

/// Recipe for a fluctuation (variance-domain) training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationConfig {
    /// Number of spatial patterns, each yielding one (V_F, V_G) pair.
    pub patterns: usize,
    /// Frames per stack; at least 2 so the variance is defined.
    pub frames: usize,
    pub side: usize,
    pub psf_width: f64,
    pub sigma: f64,
    pub blink: BlinkingLaw,
    /// Filament curves rasterized per pattern.
    pub curves: usize,
    pub seed: u64,
}

impl FluctuationConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.patterns == 0 {
            return Err(CoreError::EmptyDataset);
        }
        if self.frames < 2 {
            return Err(CoreError::BadConfig(
                "fluctuation stacks need at least two frames".into(),
            ));
        }
        if self.side < 4 {
            return Err(CoreError::BadConfig("pattern grid too small".into()));
        }
        if !(self.psf_width > 0.0) {
            return Err(CoreError::NonPositive("psf width", self.psf_width));
        }
        if self.sigma < 0.0 {
            return Err(CoreError::NonPositive("noise level", self.sigma));
        }
        if self.curves == 0 {
            return Err(CoreError::BadConfig("patterns need at least one curve".into()));
        }
        self.blink.validate()
    }

    /// The optical blur applied to each frame (plain kernel, no resampling).
    pub fn model(&self) -> Result<ForwardModel, CoreError> {
        let support = support_for_grid(self.psf_width, self.side);
        let kernel = gaussian_kernel(self.psf_width, support)?;
        ForwardModel::standard(&kernel, 1, self.side)
    }
}

/// Sparse filament-like pattern: rasterized random cubic Bézier curves,
/// one brightness per curve.
pub fn gen_filament_pattern(side: usize, curves: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut pattern = Array2::zeros((side, side));
    let span = (side - 1) as f64;
    for _ in 0..curves {
        let ctrl: Vec<(f64, f64)> = (0..4)
            .map(|_| (rng.random::<f64>() * span, rng.random::<f64>() * span))
            .collect();
        let level = rng.random_range(100.0..255.0);
        // The curve stays inside the control hull, so 4·side samples cover
        // every crossed pixel at this scale.
        let steps = 4 * side;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let omt = 1.0 - t;
            let b = [omt * omt * omt, 3.0 * omt * omt * t, 3.0 * omt * t * t, t * t * t];
            let (mut x, mut y) = (0.0, 0.0);
            for (w, &(cx, cy)) in b.iter().zip(&ctrl) {
                x += w * cx;
                y += w * cy;
            }
            let (i, j) = (x.round() as usize, y.round() as usize);
            pattern[[i.min(side - 1), j.min(side - 1)]] = level;
        }
    }
    pattern
}

/// Variance pair for one pattern: V_G from the clean blinking stack, V_F
/// from the same stack blurred and corrupted frame by frame.
pub fn gen_fluctuation_pair(
    pattern: &Array2<f64>,
    cfg: &FluctuationConfig,
    rng: &mut impl Rng,
) -> Result<(Array2<f64>, Array2<f64>), CoreError> {
    cfg.validate()?;
    let model = cfg.model()?;
    let clean = gen_blinking_stack(pattern, &cfg.blink, cfg.frames, rng)?;
    let mut blurred = Vec::with_capacity(clean.len());
    for g in &clean {
        let mut f = model.apply(g);
        if cfg.sigma > 0.0 {
            for v in f.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += cfg.sigma * z;
            }
        }
        blurred.push(f);
    }
    let v_g = empirical_variance(&clean)?;
    let v_f = empirical_variance(&blurred)?;
    Ok((v_f, v_g))
}

/// Generates `patterns` variance pairs, one independent RNG stream each.
pub fn gen_fluctuation_dataset(cfg: &FluctuationConfig) -> Result<SampleSet, CoreError> {
    cfg.validate()?;
    let mut pairs = Vec::with_capacity(cfg.patterns);
    for s in 0..cfg.patterns {
        let mut rng = stream_rng(cfg.seed, s as u64);
        let pattern = gen_filament_pattern(cfg.side, cfg.curves, &mut rng);
        let (v_f, v_g) = gen_fluctuation_pair(&pattern, cfg, &mut rng)?;
        pairs.push(SamplePair { data: v_f, truth: v_g });
    }
    Ok(SampleSet { pairs, seed: cfg.seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_ops::{convolve, squared_kernel};
    use ndarray::array;

    fn base_cfg() -> FrameGenConfig {
        FrameGenConfig {
            fine_side: 16,
            factor: 2,
            emitters: (4, 4),
            intensity: IntensityLaw::Uniform { lo: 100.0, hi: 255.0 },
            psf_width: 1.5,
            noise: NoiseKind::Gaussian { sigma: 0.15 },
            frames: 3,
            persistence: 1,
            seed: 9,
        }
    }

    #[test]
    fn sparse_frame_counts_and_range() {
        let cfg = base_cfg();
        let mut rng = stream_rng(1, 0);
        let frame = gen_sparse_frame(&cfg, &mut rng).unwrap();
        let nz: Vec<f64> = frame.iter().copied().filter(|&v| v != 0.0).collect();
        assert_eq!(nz.len(), 4);
        assert!(nz.iter().all(|&v| (100.0..=255.0).contains(&v)));

        let mut a = stream_rng(7, 0);
        let mut b = stream_rng(7, 0);
        assert_eq!(
            gen_sparse_frame(&cfg, &mut a).unwrap(),
            gen_sparse_frame(&cfg, &mut b).unwrap(),
        );
    }

    #[test]
    fn impossible_emitter_counts_are_rejected() {
        let mut cfg = base_cfg();
        cfg.emitters = (10, 3);
        assert!(cfg.validate().is_err());
        cfg.emitters = (3, 1000);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn categorical_intensities_hit_only_the_levels() {
        let law = IntensityLaw::Categorical {
            levels: vec![0.0, 1.0, 2.0, 3.0, 4.0],
            probs: vec![0.1, 0.25, 0.3, 0.25, 0.1],
        };
        law.validate().unwrap();
        let mut rng = stream_rng(3, 0);
        let mut seen = [0usize; 5];
        for _ in 0..2000 {
            let v = law.sample(&mut rng);
            let k = v as usize;
            assert_eq!(v, k as f64);
            seen[k] += 1;
        }
        // The modal level should dominate the rare ones by law.
        assert!(seen[2] > seen[0] && seen[2] > seen[4]);

        let bad = IntensityLaw::Categorical {
            levels: vec![1.0],
            probs: vec![0.5],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn noiseless_corruption_is_the_forward_model() {
        let cfg = base_cfg();
        let model = cfg.model().unwrap();
        let mut rng = stream_rng(2, 0);
        let g = gen_sparse_frame(&cfg, &mut rng).unwrap();
        let f = corrupt(&g, &model, &NoiseKind::Gaussian { sigma: 0.0 }, &mut rng).unwrap();
        assert_eq!(f, model.apply(&g));
        assert_eq!(f.dim(), (8, 8));
    }

    #[test]
    fn gaussian_noise_variance_matches_sigma() {
        let cfg = base_cfg();
        let model = cfg.model().unwrap();
        let mut rng = stream_rng(4, 0);
        let g = gen_sparse_frame(&cfg, &mut rng).unwrap();
        let clean = model.apply(&g);
        let sigma = 0.5;
        let mut sq_sum = 0.0;
        let mut count = 0usize;
        // 1563 frames of 64 pixels ≈ 1e5 noise draws.
        while count < 100_000 {
            let f = corrupt(&g, &model, &NoiseKind::Gaussian { sigma }, &mut rng).unwrap();
            let diff = &f - &clean;
            sq_sum += diff.iter().map(|&d| d * d).sum::<f64>();
            count += diff.len();
        }
        let var = sq_sum / count as f64;
        assert!(
            (var - sigma * sigma).abs() <= 0.02 * sigma * sigma,
            "empirical noise variance {var} vs {}",
            sigma * sigma
        );
    }

    #[test]
    fn poisson_sampler_laws() {
        let mut rng = stream_rng(5, 0);
        // Inversion branch.
        let mut sum = 0.0;
        let n = 100_000;
        for _ in 0..n {
            sum += poisson_sample(5.0, &mut rng).unwrap();
        }
        let mean = sum / n as f64;
        assert!((mean - 5.0).abs() <= 0.05, "mean {mean}");

        // Normal-approximation branch.
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let x = poisson_sample(64.0, &mut rng).unwrap();
            sum += x;
            sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!((mean - 64.0).abs() <= 0.3, "mean {mean}");
        assert!((var - 64.0).abs() <= 2.0, "variance {var}");

        assert_eq!(poisson_sample(0.0, &mut rng).unwrap(), 0.0);
        assert!(poisson_sample(-1.0, &mut rng).is_err());
        assert!(poisson_sample(f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn poisson_corruption_needs_nonnegative_means() {
        let cfg = base_cfg();
        let model = cfg.model().unwrap();
        let g = Array2::zeros((16, 16));
        let mut rng = stream_rng(6, 0);
        assert!(corrupt(&g, &model, &NoiseKind::Poisson { background: -2.0 }, &mut rng).is_err());
        let f = corrupt(&g, &model, &NoiseKind::Poisson { background: 0.5 }, &mut rng).unwrap();
        assert!(f.iter().all(|&v| v >= 0.0 && v == v.round()));
    }

    #[test]
    fn higher_background_means_higher_variance() {
        let cfg = base_cfg();
        let model = cfg.model().unwrap();
        let mut rng = stream_rng(8, 0);
        let g = gen_sparse_frame(&cfg, &mut rng).unwrap();
        let variance_at = |b: f64, rng: &mut ChaCha8Rng| {
            let stack: Vec<Array2<f64>> = (0..200)
                .map(|_| corrupt(&g, &model, &NoiseKind::Poisson { background: b }, rng).unwrap())
                .collect();
            empirical_variance(&stack).unwrap().mean().unwrap()
        };
        let low = variance_at(0.1, &mut rng);
        let high = variance_at(12.75, &mut rng);
        assert!(
            high > low + 5.0,
            "background 12.75 variance {high} vs 0.1 variance {low}"
        );
    }

    #[test]
    fn dataset_shapes_and_determinism() {
        let mut cfg = base_cfg();
        cfg.frames = 5;
        let set = gen_dataset(&cfg).unwrap();
        assert_eq!(set.pairs.len(), 5);
        for pair in &set.pairs {
            assert_eq!(pair.truth.dim(), (16, 16));
            assert_eq!(pair.data.dim(), (8, 8));
        }
        assert_eq!(gen_dataset(&cfg).unwrap(), set);
        // Distinct frames draw distinct emitter sets.
        assert_ne!(set.pairs[0].truth, set.pairs[1].truth);
    }

    #[test]
    fn persistence_shares_truth_across_runs() {
        let mut cfg = base_cfg();
        cfg.frames = 6;
        cfg.persistence = 3;
        let set = gen_dataset(&cfg).unwrap();
        assert_eq!(set.pairs[0].truth, set.pairs[1].truth);
        assert_eq!(set.pairs[0].truth, set.pairs[2].truth);
        assert_ne!(set.pairs[0].truth, set.pairs[3].truth);
        // Fresh noise within a run.
        assert_ne!(set.pairs[0].data, set.pairs[1].data);
    }

    #[test]
    fn blinking_extremes() {
        let pattern = array![[2.0, 0.0], [0.0, 5.0]];
        let mut rng = stream_rng(10, 0);
        let always = BlinkingLaw { on_fraction: 1.0, rate: 0.5 };
        for frame in gen_blinking_stack(&pattern, &always, 4, &mut rng).unwrap() {
            assert_eq!(frame, pattern);
        }
        let never = BlinkingLaw { on_fraction: 0.0, rate: 0.5 };
        for frame in gen_blinking_stack(&pattern, &never, 4, &mut rng).unwrap() {
            assert_eq!(frame, Array2::<f64>::zeros((2, 2)));
        }
        assert!(gen_blinking_stack(&pattern, &always, 1, &mut rng).is_err());
    }

    #[test]
    fn blinking_variance_matches_the_bernoulli_law() {
        let mut pattern = Array2::zeros((3, 3));
        let a = 10.0;
        pattern[[1, 1]] = a;
        let q = 0.5;
        let blink = BlinkingLaw { on_fraction: q, rate: 0.5 };
        let mut rng = stream_rng(11, 0);
        let stack = gen_blinking_stack(&pattern, &blink, 10_000, &mut rng).unwrap();
        let v = empirical_variance(&stack).unwrap();
        let expect = a * a * q * (1.0 - q);
        assert!(
            (v[[1, 1]] - expect).abs() <= 0.05 * expect,
            "temporal variance {} vs {}",
            v[[1, 1]],
            expect
        );
        assert_eq!(v[[0, 0]], 0.0, "non-emitter pixels never fluctuate");
    }

    #[test]
    fn variance_formula() {
        let stack = vec![array![[1.0]], array![[1.0]], array![[1.0]]];
        assert_eq!(empirical_variance(&stack).unwrap()[[0, 0]], 0.0);

        let stack = vec![array![[0.0]], array![[2.0]]];
        assert_eq!(empirical_variance(&stack).unwrap()[[0, 0]], 2.0);

        assert!(empirical_variance(&[array![[1.0]]]).is_err());

        // Scalar two-pass oracle on a random stack.
        let mut rng = stream_rng(12, 0);
        let stack: Vec<Array2<f64>> = (0..7)
            .map(|_| Array2::from_shape_fn((4, 4), |_| rng.random::<f64>() * 3.0))
            .collect();
        let v = empirical_variance(&stack).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let vals: Vec<f64> = stack.iter().map(|f| f[[i, j]]).collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let s = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
                    / (vals.len() - 1) as f64;
                assert!((v[[i, j]] - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn filament_patterns_are_sparse_curves() {
        let mut rng = stream_rng(13, 0);
        let side = 32;
        let pattern = gen_filament_pattern(side, 2, &mut rng);
        let nz = pattern.iter().filter(|&&v| v != 0.0).count();
        assert!(nz >= side / 2, "curves should cross many pixels, got {nz}");
        assert!(nz <= side * side / 4, "pattern lost sparsity: {nz}");
        assert!(pattern
            .iter()
            .all(|&v| v == 0.0 || (100.0..=255.0).contains(&v)));

        let mut rng2 = stream_rng(13, 0);
        assert_eq!(gen_filament_pattern(side, 2, &mut rng2), pattern);
    }

    fn fluct_cfg() -> FluctuationConfig {
        FluctuationConfig {
            patterns: 2,
            frames: 400,
            side: 24,
            psf_width: 2.0,
            sigma: 0.0,
            blink: BlinkingLaw { on_fraction: 0.4, rate: 0.6 },
            curves: 2,
            seed: 21,
        }
    }

    #[test]
    fn variance_pair_follows_the_squared_kernel_law() {
        // With zero noise and a long stack, the measured variance is the
        // squared-kernel blur of the source variance up to sampling error.
        let cfg = FluctuationConfig { frames: 12_000, ..fluct_cfg() };
        let mut rng = stream_rng(14, 0);
        let pattern = gen_filament_pattern(cfg.side, cfg.curves, &mut rng);
        let (v_f, v_g) = gen_fluctuation_pair(&pattern, &cfg, &mut rng).unwrap();
        let support = support_for_grid(cfg.psf_width, cfg.side);
        let sq = squared_kernel(cfg.psf_width, support).unwrap();
        let predicted = convolve(&v_g, &sq).unwrap();
        let num: f64 = (&v_f - &predicted).iter().map(|d| d * d).sum::<f64>().sqrt();
        let den: f64 = v_f.iter().map(|d| d * d).sum::<f64>().sqrt();
        assert!(num / den <= 0.05, "relative deviation {}", num / den);
    }

    #[test]
    fn noise_adds_a_variance_pedestal() {
        let cfg = FluctuationConfig { sigma: 3.0, frames: 2000, ..fluct_cfg() };
        let mut rng = stream_rng(15, 0);
        // An empty pattern isolates the noise floor: V_F should sit at σ².
        let pattern = Array2::zeros((cfg.side, cfg.side));
        let (v_f, v_g) = gen_fluctuation_pair(&pattern, &cfg, &mut rng).unwrap();
        assert_eq!(v_g.sum(), 0.0);
        let floor = v_f.mean().unwrap();
        let expect = cfg.sigma * cfg.sigma;
        assert!(
            (floor - expect).abs() <= 0.05 * expect,
            "noise floor {floor} vs {expect}"
        );
    }

    #[test]
    fn fluctuation_dataset_shapes_and_determinism() {
        let cfg = FluctuationConfig { frames: 50, ..fluct_cfg() };
        let set = gen_fluctuation_dataset(&cfg).unwrap();
        assert_eq!(set.pairs.len(), 2);
        for pair in &set.pairs {
            assert_eq!(pair.data.dim(), (24, 24));
            assert_eq!(pair.truth.dim(), (24, 24));
            assert!(pair.truth.iter().all(|&v| v >= 0.0));
        }
        assert_eq!(gen_fluctuation_dataset(&cfg).unwrap(), set);
        assert_ne!(set.pairs[0].truth, set.pairs[1].truth);
    }
}
