//! The five experiment commands.
//!
//! Every command takes a resolved [`ExperimentConfig`] plus an output
//! directory, writes its artifacts there, and finishes by echoing the full
//! configuration into `config.txt` so the run can be repeated bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::Array2;

use unroll_core::backprop::{
    finite_difference_check, CheckConfig, CheckMode, LossChoice, ParamKind,
};
use unroll_core::energy::Fidelity;
use unroll_core::io::{load_dataset, read_image, save_dataset, write_image, DatasetManifest};
use unroll_core::losses::{binarize, BinarizationParams};
use unroll_core::metrics::{
    average_stack, extract_points, format_eval_csv, match_points, psnr, FrameEval,
};
use unroll_core::simulate::{
    gen_dataset, gen_fluctuation_dataset, BlinkingLaw, FluctuationConfig, FrameGenConfig,
    IntensityLaw, NoiseKind,
};
use unroll_core::solver::HyperParams;
use unroll_core::trainer::{
    checkpoint_load, checkpoint_save, history_csv, reconstruct, train, ArmijoParams, Bounds,
    GtPeak, HistoryRow, LearnMask, Scaling, TrainConfig, TrainMode,
};

use crate::config::ExperimentConfig;

/// Creates `out` if needed; refuses to reuse a nonempty directory unless
/// `force` is set.
pub fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        if !force && out.read_dir()?.next().is_some() {
            bail!(
                "output directory {} is not empty; pass --force to write into it",
                out.display()
            );
        }
    } else {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    }
    Ok(())
}

fn echo_config(out: &Path, cfg: &ExperimentConfig, command: &str) -> Result<()> {
    let text = format!("# resolved {command} configuration\n{}", cfg.to_text());
    fs::write(out.join("config.txt"), text)
        .with_context(|| format!("writing {}", out.join("config.txt").display()))?;
    Ok(())
}

fn parse_loss(cfg: &ExperimentConfig) -> Result<LossChoice> {
    match cfg.loss.as_str() {
        "l1" => Ok(LossChoice::Localization),
        "l2" => Ok(LossChoice::Intensity),
        other => bail!("loss must be l1 or l2, got `{other}`"),
    }
}

fn parse_fidelity(cfg: &ExperimentConfig) -> Result<Fidelity> {
    match cfg.fidelity.as_str() {
        "l2" => Ok(Fidelity::Gaussian),
        "kl" => Ok(Fidelity::Kl {
            background: cfg.noise_background,
        }),
        other => bail!("fidelity must be l2 or kl, got `{other}`"),
    }
}

fn parse_scaling(cfg: &ExperimentConfig) -> Result<Scaling> {
    match cfg.scaling.as_str() {
        "identity" => Ok(Scaling::Identity),
        "magnitude" => Ok(Scaling::Magnitude),
        other => bail!("scaling must be identity or magnitude, got `{other}`"),
    }
}

fn parse_gt_peak(cfg: &ExperimentConfig) -> Result<GtPeak> {
    match cfg.gt_peak.as_str() {
        "fixed" => Ok(GtPeak::Fixed(cfg.gt_peak_value)),
        "per-sample-max" => Ok(GtPeak::PerSampleMax),
        other => bail!("gt_peak must be fixed or per-sample-max, got `{other}`"),
    }
}

fn train_mode(cfg: &ExperimentConfig) -> Result<TrainMode> {
    match cfg.dataset_kind.as_str() {
        "frames" => Ok(TrainMode::Standard {
            factor: cfg.factor,
            fidelity: parse_fidelity(cfg)?,
        }),
        "fluctuation" => Ok(TrainMode::Fluctuation {
            sigma_sq: cfg.noise_sigma * cfg.noise_sigma,
        }),
        other => bail!("dataset_kind must be frames or fluctuation, got `{other}`"),
    }
}

/// Rejects configurations pointed at a dataset of the other kind; the
/// manifest records the kind at generation time.
fn check_dataset_kind(cfg: &ExperimentConfig, manifest: &DatasetManifest) -> Result<()> {
    if let Some(kind) = manifest.config.get("dataset_kind").and_then(|v| v.as_str()) {
        if kind != cfg.dataset_kind {
            bail!(
                "dataset holds `{kind}` data but the configuration says `{}`",
                cfg.dataset_kind
            );
        }
    }
    Ok(())
}

fn frame_gen(cfg: &ExperimentConfig, frames: usize, seed: u64) -> Result<FrameGenConfig> {
    let intensity = match cfg.intensity_law.as_str() {
        "uniform" => IntensityLaw::Uniform {
            lo: cfg.intensity_lo,
            hi: cfg.intensity_hi,
        },
        "categorical" => IntensityLaw::Categorical {
            levels: cfg.intensity_levels.clone(),
            probs: cfg.intensity_probs.clone(),
        },
        other => bail!("intensity_law must be uniform or categorical, got `{other}`"),
    };
    let noise = match cfg.noise_kind.as_str() {
        "gaussian" => NoiseKind::Gaussian {
            sigma: cfg.noise_sigma,
        },
        "poisson" => NoiseKind::Poisson {
            background: cfg.noise_background,
        },
        other => bail!("noise_kind must be gaussian or poisson, got `{other}`"),
    };
    Ok(FrameGenConfig {
        fine_side: cfg.fine_side,
        factor: cfg.factor,
        emitters: (cfg.emitters_lo, cfg.emitters_hi),
        intensity,
        psf_width: cfg.psf_width,
        noise,
        frames,
        persistence: cfg.persistence,
        seed,
    })
}

fn fluctuation_gen(cfg: &ExperimentConfig, patterns: usize, seed: u64) -> FluctuationConfig {
    FluctuationConfig {
        patterns,
        frames: cfg.frames_per_stack,
        side: cfg.fine_side,
        psf_width: cfg.psf_width,
        sigma: cfg.noise_sigma,
        blink: BlinkingLaw {
            on_fraction: cfg.blink_on,
            rate: cfg.blink_rate,
        },
        curves: cfg.curves,
        seed,
    }
}

/// Synthesizes a training split under `out/train` and a test split under
/// `out/test`; the test split reruns the generator at seed + 1.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let provenance = serde_json::json!({
        "dataset_kind": cfg.dataset_kind,
        "config_text": cfg.to_text(),
    });
    let (train_set, test_set) = match cfg.dataset_kind.as_str() {
        "frames" => (
            gen_dataset(&frame_gen(cfg, cfg.train_frames, cfg.seed)?)?,
            gen_dataset(&frame_gen(cfg, cfg.test_frames, cfg.seed + 1)?)?,
        ),
        "fluctuation" => (
            gen_fluctuation_dataset(&fluctuation_gen(cfg, cfg.train_patterns, cfg.seed))?,
            gen_fluctuation_dataset(&fluctuation_gen(cfg, cfg.test_patterns, cfg.seed + 1))?,
        ),
        other => bail!("dataset_kind must be frames or fluctuation, got `{other}`"),
    };
    save_dataset(&out.join("train"), &train_set, provenance.clone())?;
    save_dataset(&out.join("test"), &test_set, provenance)?;
    echo_config(out, cfg, "simulate")?;
    println!(
        "simulate: {} train + {} test samples under {}",
        train_set.pairs.len(),
        test_set.pairs.len(),
        out.display()
    );
    Ok(())
}

fn build_train_config(cfg: &ExperimentConfig) -> Result<(TrainConfig, Vec<HistoryRow>)> {
    let mode = train_mode(cfg)?;
    let loss = parse_loss(cfg)?;
    let (init, prior) = if cfg.resume.is_empty() {
        let alpha = if cfg.init_alpha_final > 0.0 && cfg.depth > 1 {
            let span = cfg.init_alpha_final - cfg.init_alpha;
            (0..cfg.depth)
                .map(|k| cfg.init_alpha + span * k as f64 / (cfg.depth - 1) as f64)
                .collect()
        } else {
            vec![cfg.init_alpha; cfg.depth]
        };
        let init = HyperParams {
            rho: cfg.init_rho,
            alpha,
            delta: cfg.init_delta,
            width: cfg.init_width,
        };
        (init, Vec::new())
    } else {
        let (theta, history) = checkpoint_load(Path::new(&cfg.resume))
            .with_context(|| format!("loading checkpoint {}", cfg.resume))?;
        (theta, history)
    };
    let mut config = TrainConfig::new(mode, loss, init, cfg.outer_iters);
    config.learn = LearnMask {
        rho: cfg.learn_rho,
        alpha: cfg.learn_alpha,
        delta: cfg.learn_delta,
        width: cfg.learn_width,
    };
    config.armijo = ArmijoParams {
        init_step: cfg.armijo_init,
        shrink: cfg.armijo_shrink,
        sufficient: cfg.armijo_c,
        max_backtracks: cfg.armijo_backtracks,
        warm_start: cfg.warm_start,
    };
    config.scaling = parse_scaling(cfg)?;
    config.rel_tol = cfg.rel_tol;
    config.proj_eps = cfg.proj_eps;
    config.bin_c0 = cfg.bin_c0;
    config.bin_eps = cfg.bin_eps;
    config.huber_gamma = cfg.huber_gamma;
    config.gt_peak = parse_gt_peak(cfg)?;
    if cfg.rho_cap_factor > 0.0 {
        config.rho_cap_factor = cfg.rho_cap_factor;
    }
    config.alpha_cap = cfg.alpha_cap;
    config.width_cap = cfg.width_cap;
    Ok((config, prior))
}

/// Appends a continued run to its checkpoint history. A continued run's
/// first row restates the checkpoint's final loss at step 0, so it is
/// dropped and the remaining rows are renumbered past the prior end.
fn splice_history(prior: Vec<HistoryRow>, fresh: Vec<HistoryRow>) -> Vec<HistoryRow> {
    let Some(base) = prior.last().map(|row| row.iter) else {
        return fresh;
    };
    let mut merged = prior;
    for mut row in fresh.into_iter().skip(1) {
        row.iter += base;
        merged.push(row);
    }
    merged
}

/// Fits the hyperparameters on the `data` dataset and writes
/// `checkpoint.txt` plus `history.csv`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    if cfg.data.is_empty() {
        bail!("train needs a dataset: set the `data` key or pass --data");
    }
    let data_dir = PathBuf::from(&cfg.data);
    let (set, manifest) = load_dataset(&data_dir)
        .with_context(|| format!("loading dataset {}", data_dir.display()))?;
    check_dataset_kind(cfg, &manifest)?;
    let (config, prior) = build_train_config(cfg)?;
    let bounds = Bounds::derive(&set, &config)?;
    let outcome = train(&set, &config, &bounds)?;
    let history = splice_history(prior, outcome.history);
    checkpoint_save(&out.join("checkpoint.txt"), &outcome.theta, &history)?;
    fs::write(out.join("history.csv"), history_csv(&history))?;
    echo_config(out, cfg, "train")?;
    let last = history.last().expect("training always records its starting point");
    println!(
        "train: {} accepted steps, loss {:.6e}, stop {:?}",
        history.len() - 1,
        last.loss,
        outcome.stop
    );
    println!(
        "theta: rho {:.6e}, delta {:.6e}, width {:.6e}, alpha[0] {:.6e}",
        outcome.theta.rho, outcome.theta.delta, outcome.theta.width, outcome.theta.alpha[0]
    );
    Ok(())
}

/// 8-bit binary PGM scaled so the image maximum maps to white.
fn write_pgm(path: &Path, img: &Array2<f64>) -> Result<()> {
    let (rows, cols) = img.dim();
    let peak = img.iter().fold(0.0f64, |m, &v| m.max(v));
    let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend(
        img.iter()
            .map(|&v| (v.max(0.0) * scale).round().min(255.0) as u8),
    );
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Runs the trained solver over every frame of `data`, writing
/// `recon_NNNN.img`, optional binarized twins, and the stack average.
pub fn cmd_reconstruct(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    if cfg.checkpoint.is_empty() {
        bail!("reconstruct needs a trained model: set `checkpoint` or pass --checkpoint");
    }
    if cfg.data.is_empty() {
        bail!("reconstruct needs a dataset: set the `data` key or pass --data");
    }
    let (theta, _) = checkpoint_load(Path::new(&cfg.checkpoint))
        .with_context(|| format!("loading checkpoint {}", cfg.checkpoint))?;
    let (set, manifest) = load_dataset(Path::new(&cfg.data))
        .with_context(|| format!("loading dataset {}", cfg.data))?;
    check_dataset_kind(cfg, &manifest)?;
    let mode = train_mode(cfg)?;
    let bin = BinarizationParams {
        delta: theta.delta,
        c0: cfg.bin_c0,
        eps: cfg.bin_eps,
        peak: None,
    };
    let mut recons = Vec::with_capacity(set.pairs.len());
    for (t, pair) in set.pairs.iter().enumerate() {
        let u = reconstruct(&theta, &mode, cfg.proj_eps, &pair.data)
            .with_context(|| format!("reconstructing frame {t}"))?;
        write_image(&out.join(format!("recon_{t:04}.img")), &u)?;
        if cfg.emit_pgm {
            write_pgm(&out.join(format!("recon_{t:04}.pgm")), &u)?;
        }
        if cfg.emit_binarized {
            let b = binarize(&u, &bin);
            write_image(&out.join(format!("recon_bin_{t:04}.img")), &b)?;
            if cfg.emit_pgm {
                write_pgm(&out.join(format!("recon_bin_{t:04}.pgm")), &b)?;
            }
        }
        recons.push(u);
    }
    if cfg.emit_average {
        let avg = average_stack(&recons)?;
        write_image(&out.join("average.img"), &avg)?;
        if cfg.emit_pgm {
            write_pgm(&out.join("average.pgm"), &avg)?;
        }
    }
    echo_config(out, cfg, "reconstruct")?;
    println!(
        "reconstruct: {} frames into {}",
        set.pairs.len(),
        out.display()
    );
    Ok(())
}

/// Scores a reconstruction directory against its dataset's ground truth:
/// Jaccard at the three radii plus PSNR, one CSV row per frame and a
/// trailing average row.
pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    if cfg.recon.is_empty() {
        bail!("evaluate needs reconstructions: set `recon` or pass --recon");
    }
    if cfg.data.is_empty() {
        bail!("evaluate needs the ground-truth dataset: set `data` or pass --data");
    }
    if cfg.radii.len() != 3 {
        bail!(
            "radii must list exactly three matching tolerances, got {}",
            cfg.radii.len()
        );
    }
    if !(cfg.radii[0] <= cfg.radii[1] && cfg.radii[1] <= cfg.radii[2]) {
        bail!("radii must be ascending, got {:?}", cfg.radii);
    }
    let (set, _) = load_dataset(Path::new(&cfg.data))
        .with_context(|| format!("loading dataset {}", cfg.data))?;
    let recon_dir = PathBuf::from(&cfg.recon);
    let mut rows = Vec::with_capacity(set.pairs.len());
    for (t, pair) in set.pairs.iter().enumerate() {
        let raw_path = recon_dir.join(format!("recon_{t:04}.img"));
        if !raw_path.exists() {
            if t == 0 {
                bail!("no reconstructions found in {}", recon_dir.display());
            }
            bail!(
                "{} is missing; the dataset has {} frames",
                raw_path.display(),
                set.pairs.len()
            );
        }
        let raw = read_image(&raw_path)?;
        let bin_path = recon_dir.join(format!("recon_bin_{t:04}.img"));
        let support = if cfg.use_binarized && bin_path.exists() {
            read_image(&bin_path)?
        } else {
            raw.clone()
        };
        let points = extract_points(&support, cfg.extract_threshold);
        let gt = extract_points(&pair.truth, 0.0);
        let jaccard = |radius: f64| match_points(&points, &gt, radius).jaccard();
        rows.push(FrameEval {
            frame: t,
            j0: jaccard(cfg.radii[0]),
            j2: jaccard(cfg.radii[1]),
            j4: jaccard(cfg.radii[2]),
            psnr: psnr(&raw, &pair.truth, cfg.psnr_peak),
        });
    }
    fs::write(out.join("metrics.csv"), format_eval_csv(&rows))?;
    echo_config(out, cfg, "evaluate")?;
    let n = rows.len() as f64;
    let avg_j = rows.iter().map(FrameEval::avg_jaccard).sum::<f64>() / n;
    let avg_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
    println!(
        "evaluate: {} frames, avg J {:.4}, avg PSNR {:.2} dB",
        rows.len(),
        avg_j,
        avg_psnr
    );
    Ok(())
}

/// Compares the analytic hyperparameter gradients against central finite
/// differences on a seeded instance; nonzero exit on any failing row.
pub fn cmd_checkgrad(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let mode = match cfg.dataset_kind.as_str() {
        "frames" => CheckMode::Standard {
            fidelity: parse_fidelity(cfg)?,
            factor: cfg.factor,
        },
        "fluctuation" => CheckMode::Fluctuation {
            sigma: cfg.noise_sigma,
        },
        other => bail!("dataset_kind must be frames or fluctuation, got `{other}`"),
    };
    let mut check = CheckConfig::new(mode, parse_loss(cfg)?);
    check.side = cfg.check_side;
    check.depth = cfg.check_depth;
    check.seed = cfg.check_seed;
    check.rel_tol = cfg.check_rel_tol;
    check.only = match cfg.check_param.as_str() {
        "" => None,
        "rho" => Some(ParamKind::Rho),
        "alpha" => Some(ParamKind::Alpha),
        "delta" => Some(ParamKind::Delta),
        "width" => Some(ParamKind::Width),
        other => bail!("check_param must be rho, alpha, delta, or width, got `{other}`"),
    };
    let report = finite_difference_check(&check)?;
    let text = report.to_string();
    fs::write(out.join("report.txt"), format!("{text}\n"))?;
    echo_config(out, cfg, "checkgrad")?;
    println!("{text}");
    if !report.all_pass() {
        bail!(
            "gradient check failed: worst relative error {:.3e} over tolerance {:.1e}",
            report.worst_rel_err(),
            report.rel_tol
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use unroll_core::trainer::HistoryRow;

    fn row(iter: usize, loss: f64) -> HistoryRow {
        HistoryRow {
            iter,
            loss,
            step: 1.0,
            theta: HyperParams {
                rho: 1.0,
                alpha: vec![0.1],
                delta: 1.0,
                width: 1.0,
            },
        }
    }

    #[test]
    fn splicing_renumbers_and_drops_the_duplicate_row() {
        let prior = vec![row(0, 10.0), row(1, 8.0), row(2, 7.0)];
        let fresh = vec![row(0, 7.0), row(1, 6.0), row(2, 5.5)];
        let merged = splice_history(prior, fresh);
        let iters: Vec<usize> = merged.iter().map(|r| r.iter).collect();
        let losses: Vec<f64> = merged.iter().map(|r| r.loss).collect();
        assert_eq!(iters, vec![0, 1, 2, 3, 4]);
        assert_eq!(losses, vec![10.0, 8.0, 7.0, 6.0, 5.5]);
    }

    #[test]
    fn splicing_with_no_prior_is_the_identity() {
        let fresh = vec![row(0, 3.0), row(1, 2.0)];
        let merged = splice_history(Vec::new(), fresh.clone());
        assert_eq!(merged, fresh);
    }

    #[test]
    fn pgm_export_scales_to_the_peak() {
        let dir = tempfile::tempdir().unwrap();
        // Peak 510 makes the scale exactly 0.5, so the rounding is exact.
        let img = ndarray::array![[0.0, 100.0], [250.0, 510.0]];
        let path = dir.path().join("a.pgm");
        write_pgm(&path, &img).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0u8, 50, 125, 255]);
    }

    #[test]
    fn nonempty_outputs_are_refused_without_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("stale"), "x").unwrap();
        let err = prepare_out(dir.path(), false).unwrap_err();
        assert!(err.to_string().contains("--force"), "{err}");
        prepare_out(dir.path(), true).unwrap();
    }
}
