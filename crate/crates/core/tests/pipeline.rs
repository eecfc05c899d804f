//! End-to-end runs over the whole stack: generate frames, learn the
//! hyperparameters, reconstruct held-out data, and score it. Small grids
//! keep each run in the seconds range; these tests exercise the seams
//! between modules rather than re-proving any single module's math.

use unroll_core::backprop::LossChoice;
use unroll_core::energy::Fidelity;
use unroll_core::losses::{binarize, BinarizationParams};
use unroll_core::metrics::{extract_points, match_points, psnr, FrameEval};
use unroll_core::simulate::{gen_dataset, FrameGenConfig, IntensityLaw, NoiseKind};
use unroll_core::solver::HyperParams;
use unroll_core::trainer::{
    reconstruct, train, Bounds, StopReason, TrainConfig, TrainMode, TrainOutcome,
};

fn frame_config(seed: u64, frames: usize) -> FrameGenConfig {
    FrameGenConfig {
        fine_side: 16,
        factor: 2,
        emitters: (4, 6),
        intensity: IntensityLaw::Uniform { lo: 100.0, hi: 255.0 },
        psf_width: 1.5,
        noise: NoiseKind::Gaussian { sigma: 2.0 },
        frames,
        persistence: 1,
        seed,
    }
}

fn train_config(loss: LossChoice, depth: usize, outers: usize) -> TrainConfig {
    let init = HyperParams {
        rho: 1.0,
        alpha: vec![0.2; depth],
        delta: 30.0,
        width: 1.5,
    };
    let mut config = TrainConfig::new(
        TrainMode::Standard { factor: 2, fidelity: Fidelity::Gaussian },
        loss,
        init,
        outers,
    );
    // Blend width on the intensity scale of the frames, as for any data
    // whose values run into the hundreds.
    config.bin_c0 = 2.0;
    config.bin_eps = 0.1;
    config
}

fn run(seed: u64, loss: LossChoice) -> (TrainOutcome, TrainConfig, Bounds) {
    let set = gen_dataset(&frame_config(seed, 4)).unwrap();
    let config = train_config(loss, 8, 6);
    let bounds = Bounds::derive(&set, &config).unwrap();
    let out = train(&set, &config, &bounds).unwrap();
    (out, config, bounds)
}

#[test]
fn training_descends_and_stays_inside_the_box() {
    let (out, config, bounds) = run(501, LossChoice::Intensity);
    assert!(out.history.len() >= 2, "nothing was accepted");
    for pair in out.history.windows(2) {
        assert!(pair[1].loss <= pair[0].loss);
    }
    assert!(out.history.last().unwrap().loss < out.history[0].loss);
    for row in &out.history {
        let t = &row.theta;
        assert!(t.rho >= bounds.rho.0 && t.rho <= bounds.rho.1);
        assert!(t.delta >= bounds.delta.0 && t.delta <= bounds.delta.1);
        assert!(t.alpha.iter().all(|&a| a >= bounds.alpha.0 && a <= bounds.alpha.1));
    }
    // The width is frozen by default and must not have drifted.
    assert_eq!(out.theta.width, config.init.width);
    assert!(matches!(
        out.stop,
        StopReason::MaxIters | StopReason::Converged | StopReason::Stalled
    ));
}

#[test]
fn the_two_losses_learn_different_bundles() {
    let (l2, ..) = run(502, LossChoice::Intensity);
    let (l1, ..) = run(502, LossChoice::Localization);
    assert_ne!(
        l2.theta, l1.theta,
        "both objectives settled on the identical bundle, which defeats task adaptation"
    );
}

#[test]
fn reruns_from_the_same_seed_are_bit_identical() {
    let set_a = gen_dataset(&frame_config(503, 3)).unwrap();
    let set_b = gen_dataset(&frame_config(503, 3)).unwrap();
    assert_eq!(set_a.pairs.len(), set_b.pairs.len());
    for (a, b) in set_a.pairs.iter().zip(&set_b.pairs) {
        assert_eq!(a.data, b.data);
        assert_eq!(a.truth, b.truth);
    }

    let (out_a, ..) = run(503, LossChoice::Localization);
    let (out_b, ..) = run(503, LossChoice::Localization);
    assert_eq!(out_a.theta, out_b.theta);
    assert_eq!(out_a.history.len(), out_b.history.len());
    for (ra, rb) in out_a.history.iter().zip(&out_b.history) {
        assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
        assert_eq!(ra.theta, rb.theta);
    }
}

#[test]
fn a_saved_dataset_trains_exactly_like_the_original() {
    let set = gen_dataset(&frame_config(504, 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    unroll_core::io::save_dataset(dir.path(), &set, serde_json::json!({"frames": 3})).unwrap();
    let (loaded, manifest) = unroll_core::io::load_dataset(dir.path()).unwrap();
    assert_eq!(manifest.seed, set.seed);
    assert_eq!(loaded.pairs.len(), set.pairs.len());

    let config = train_config(LossChoice::Intensity, 6, 3);
    let bounds = Bounds::derive(&set, &config).unwrap();
    let out_orig = train(&set, &config, &bounds).unwrap();
    let out_load = train(&loaded, &config, &bounds).unwrap();
    assert_eq!(out_orig.theta, out_load.theta);
    for (a, b) in out_orig.history.iter().zip(&out_load.history) {
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }
}

#[test]
fn reconstruction_scores_are_coherent_across_tolerances() {
    let (out, config, _) = run(505, LossChoice::Localization);
    let test_set = gen_dataset(&frame_config(506, 4)).unwrap();

    let mut evals = Vec::new();
    for (t, pair) in test_set.pairs.iter().enumerate() {
        let u = reconstruct(&out.theta, &config.mode, config.proj_eps, &pair.data).unwrap();
        assert_eq!(u.dim(), pair.truth.dim());
        assert!(u.iter().all(|v| v.is_finite() && *v >= 0.0));

        let bin = binarize(
            &u,
            &BinarizationParams {
                delta: out.theta.delta,
                c0: config.bin_c0,
                eps: config.bin_eps,
                peak: None,
            },
        );
        let recon_pts = extract_points(&bin, 0.0);
        let gt_pts = extract_points(&pair.truth, 0.0);
        let j = |radius: f64| match_points(&recon_pts, &gt_pts, radius).jaccard();
        let eval = FrameEval {
            frame: t,
            j0: j(0.0),
            j2: j(2.0),
            j4: j(4.0),
            psnr: psnr(&u, &pair.truth, 255.0),
        };
        assert!(eval.j0 <= eval.j2 && eval.j2 <= eval.j4, "{eval:?}");
        assert!((0.0..=1.0).contains(&eval.j0) && eval.j4 <= 1.0);
        assert!(eval.psnr.is_finite());
        evals.push(eval);
    }
    let table = unroll_core::metrics::format_eval_csv(&evals);
    assert_eq!(table.lines().count(), evals.len() + 2);

    // The helper must be the exact composition it claims to be.
    let pair = &test_set.pairs[0];
    let direct = {
        use unroll_core::energy::EnergySpec;
        use unroll_core::grid_ops::{gaussian_kernel, support_for_grid, ForwardModel};
        use unroll_core::solver::solve_unrolled;
        let side = pair.truth.nrows();
        let kernel =
            gaussian_kernel(out.theta.width, support_for_grid(out.theta.width, side)).unwrap();
        let model = ForwardModel::standard(&kernel, 2, side).unwrap();
        let mut spec = EnergySpec::new(&model, Fidelity::Gaussian, out.theta.rho);
        spec.proj_eps = config.proj_eps;
        solve_unrolled(&spec, &pair.data, &out.theta.schedule().unwrap(), false)
            .unwrap()
            .0
    };
    let via_helper = reconstruct(&out.theta, &config.mode, config.proj_eps, &pair.data).unwrap();
    assert_eq!(via_helper, direct);
}
