//! Flat key-value experiment configuration.
//!
//! The on-disk format is one `key value` pair per line; `#` starts a comment
//! and blank lines are skipped. Every command echoes its fully resolved
//! configuration (defaults applied) into the output directory, and parsing
//! that echo reproduces the exact same struct, so any run can be repeated
//! bit for bit from its own artifacts.

use std::fmt::Write as _;

/// Typed scalar codec for one configuration field.
trait FieldValue: Sized {
    fn parse_field(s: &str) -> Result<Self, String>;
    fn format_field(&self) -> String;
}

impl FieldValue for usize {
    fn parse_field(s: &str) -> Result<Self, String> {
        s.parse().map_err(|_| format!("`{s}` is not a nonnegative integer"))
    }
    fn format_field(&self) -> String {
        self.to_string()
    }
}

impl FieldValue for u64 {
    fn parse_field(s: &str) -> Result<Self, String> {
        s.parse().map_err(|_| format!("`{s}` is not a nonnegative integer"))
    }
    fn format_field(&self) -> String {
        self.to_string()
    }
}

impl FieldValue for f64 {
    fn parse_field(s: &str) -> Result<Self, String> {
        s.parse().map_err(|_| format!("`{s}` is not a number"))
    }
    // f64 Display prints the shortest digits that parse back to the same
    // bits, which is what keeps echoed configs rerun-exact.
    fn format_field(&self) -> String {
        self.to_string()
    }
}

impl FieldValue for bool {
    fn parse_field(s: &str) -> Result<Self, String> {
        match s {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!("`{s}` is not true/false")),
        }
    }
    fn format_field(&self) -> String {
        self.to_string()
    }
}

impl FieldValue for String {
    fn parse_field(s: &str) -> Result<Self, String> {
        Ok(s.to_string())
    }
    fn format_field(&self) -> String {
        self.clone()
    }
}

impl FieldValue for Vec<f64> {
    fn parse_field(s: &str) -> Result<Self, String> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|part| {
                let part = part.trim();
                part.parse()
                    .map_err(|_| format!("`{part}` is not a number"))
            })
            .collect()
    }
    fn format_field(&self) -> String {
        self.iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Declares the struct, its defaults, the key dispatch, and the echo in one
/// place so the three can never drift apart.
macro_rules! experiment_config {
    ($($(#[$meta:meta])* $name:ident : $ty:ty = $default:expr,)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct ExperimentConfig {
            $($(#[$meta])* pub $name: $ty,)*
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                ExperimentConfig { $($name: $default,)* }
            }
        }

        impl ExperimentConfig {
            /// Assigns one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
                match key {
                    $(stringify!($name) => {
                        self.$name = <$ty as FieldValue>::parse_field(value)
                            .map_err(|e| format!("key `{key}`: {e}"))?;
                    })*
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            }

            /// Emits every field, in declaration order, in the parseable
            /// key-value format.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(
                    let value = FieldValue::format_field(&self.$name);
                    if value.is_empty() {
                        let _ = writeln!(out, "{}", stringify!($name));
                    } else {
                        let _ = writeln!(out, "{} {}", stringify!($name), value);
                    }
                )*
                out
            }
        }
    };
}

experiment_config! {
    // --- dataset synthesis ---
    /// "frames" (blur + downsample acquisitions) or "fluctuation"
    /// (blinking-stack variance pairs).
    dataset_kind: String = "frames".to_string(),
    /// Reconstruction grid side; for fluctuation data this is the pattern side.
    fine_side: usize = 16,
    /// Super-resolution factor; the coarse side is fine_side / factor.
    factor: usize = 2,
    emitters_lo: usize = 4,
    emitters_hi: usize = 6,
    /// "uniform" over [intensity_lo, intensity_hi) or "categorical" over
    /// intensity_levels with intensity_probs.
    intensity_law: String = "uniform".to_string(),
    intensity_lo: f64 = 100.0,
    intensity_hi: f64 = 255.0,
    intensity_levels: Vec<f64> = Vec::new(),
    intensity_probs: Vec<f64> = Vec::new(),
    /// Generator kernel width in fine pixels.
    psf_width: f64 = 1.5,
    /// "gaussian" (additive, noise_sigma) or "poisson" (counting noise over
    /// noise_background).
    noise_kind: String = "gaussian".to_string(),
    noise_sigma: f64 = 0.15,
    noise_background: f64 = 0.0,
    /// Consecutive frames sharing one emitter configuration.
    persistence: usize = 1,
    train_frames: usize = 4,
    test_frames: usize = 4,
    /// Fluctuation datasets: patterns per split and frames per stack.
    train_patterns: usize = 5,
    test_patterns: usize = 5,
    frames_per_stack: usize = 500,
    blink_on: f64 = 0.5,
    blink_rate: f64 = 0.5,
    curves: usize = 3,
    /// Training-split seed; the test split uses seed + 1.
    seed: u64 = 0,

    // --- training ---
    /// Dataset directory consumed by train / reconstruct / evaluate.
    data: String = String::new(),
    /// Unrolling depth K.
    depth: usize = 30,
    outer_iters: usize = 25,
    /// Task loss: "l1" (localization) or "l2" (intensity).
    loss: String = "l1".to_string(),
    /// Data fidelity: "l2" (Gaussian) or "kl" (Poisson with noise_background).
    fidelity: String = "l2".to_string(),
    init_rho: f64 = 0.1,
    /// Initial step size, shared across all K slots.
    init_alpha: f64 = 0.1,
    /// When positive, the initial step sizes ramp linearly from init_alpha
    /// to this value over the K slots instead of staying flat.
    init_alpha_final: f64 = 0.0,
    init_delta: f64 = 50.0,
    /// Solver kernel width; equal to psf_width unless the width is learned.
    init_width: f64 = 1.5,
    learn_rho: bool = true,
    learn_alpha: bool = true,
    learn_delta: bool = true,
    learn_width: bool = false,
    rel_tol: f64 = 1e-8,
    proj_eps: f64 = 1e-4,
    /// Binarization ramp half-width c0 and plateau rounding eps.
    bin_c0: f64 = 0.01,
    bin_eps: f64 = 1e-4,
    huber_gamma: f64 = 0.01,
    /// Ground-truth plateau rule: "fixed" (gt_peak_value) or "per-sample-max".
    gt_peak: String = "fixed".to_string(),
    gt_peak_value: f64 = 255.0,
    /// Upper box bound for rho as a multiple of the dataset's nullification
    /// weight; 0 picks the fidelity-specific default.
    rho_cap_factor: f64 = 0.0,
    alpha_cap: f64 = 1e4,
    width_cap: f64 = 32.0,
    armijo_init: f64 = 1.0,
    armijo_shrink: f64 = 0.5,
    armijo_c: f64 = 1e-4,
    armijo_backtracks: usize = 30,
    warm_start: bool = true,
    /// Descent scaling: "identity" or "magnitude".
    scaling: String = "identity".to_string(),
    /// Checkpoint to continue training from.
    resume: String = String::new(),

    // --- reconstruction and evaluation ---
    /// Checkpoint consumed by reconstruct.
    checkpoint: String = String::new(),
    /// Reconstruction directory consumed by evaluate.
    recon: String = String::new(),
    emit_binarized: bool = true,
    emit_average: bool = true,
    emit_pgm: bool = false,
    /// Exactly three ascending matching radii for the Jaccard columns.
    radii: Vec<f64> = vec![0.0, 2.0, 4.0],
    psnr_peak: f64 = 255.0,
    /// Points are reconstruction pixels strictly above this value.
    extract_threshold: f64 = 0.0,
    /// Score support on the binarized images when present.
    use_binarized: bool = true,

    // --- gradient check ---
    check_side: usize = 12,
    check_depth: usize = 5,
    check_rel_tol: f64 = 1e-4,
    check_seed: u64 = 11,
    /// Restrict the check: "rho", "alpha", "delta", "width", or empty for all.
    check_param: String = String::new(),
}

/// Parses the key-value format; unknown or repeated keys are errors.
pub fn from_text(text: &str) -> Result<ExperimentConfig, String> {
    let mut cfg = ExperimentConfig::default();
    let mut seen = std::collections::HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = match line.split_once(char::is_whitespace) {
            Some((k, v)) => (k, v.trim()),
            None => (line, ""),
        };
        if !seen.insert(key.to_string()) {
            return Err(format!("line {}: key `{key}` appears twice", idx + 1));
        }
        cfg.set(key, value)
            .map_err(|e| format!("line {}: {e}", idx + 1))?;
    }
    Ok(cfg)
}
