//! Full-bundle gradient verification across every fidelity and loss
//! pairing, at the grid size and unrolling depth the training runs use.

use unroll_core::backprop::{
    finite_difference_check, CheckConfig, CheckMode, LossChoice, ParamKind,
};
use unroll_core::energy::Fidelity;

fn run(mode: CheckMode, loss: LossChoice, seed: u64, rel_tol: f64) {
    let mut config = CheckConfig::new(mode, loss);
    config.side = 12;
    config.depth = 5;
    config.seed = seed;
    config.rel_tol = rel_tol;
    let report = finite_difference_check(&config).expect("check ran");
    assert!(
        report.all_pass(),
        "{:?} / {:?} gradients disagree:\n{}",
        mode,
        loss,
        report
    );
    let expected_rows = match loss {
        LossChoice::Intensity => 1 + config.depth + 1,
        LossChoice::Localization => 1 + config.depth + 2,
    };
    assert_eq!(report.rows.len(), expected_rows, "full bundle covered");
}

fn gaussian() -> CheckMode {
    CheckMode::Standard {
        fidelity: Fidelity::Gaussian,
        factor: 2,
    }
}

fn poisson() -> CheckMode {
    CheckMode::Standard {
        fidelity: Fidelity::Kl { background: 5.0 },
        factor: 2,
    }
}

#[test]
fn gaussian_fidelity_intensity_loss() {
    run(gaussian(), LossChoice::Intensity, 11, 1e-4);
}

#[test]
fn gaussian_fidelity_localization_loss() {
    run(gaussian(), LossChoice::Localization, 12, 1e-4);
}

#[test]
fn poisson_fidelity_intensity_loss() {
    run(poisson(), LossChoice::Intensity, 13, 1e-4);
}

#[test]
fn poisson_fidelity_localization_loss() {
    run(poisson(), LossChoice::Localization, 14, 1e-4);
}

#[test]
fn fluctuation_width_gradient_at_training_scale() {
    // The width direction alone, on the 16×16 grid the semiblind runs use.
    let mut config = CheckConfig::new(
        CheckMode::Fluctuation { sigma: 2.0 },
        LossChoice::Localization,
    );
    config.side = 16;
    config.depth = 5;
    config.seed = 17;
    config.rel_tol = 1e-3;
    config.only = Some(ParamKind::Width);
    let report = finite_difference_check(&config).expect("check ran");
    assert!(report.all_pass(), "width gradient disagrees:\n{report}");
    assert_eq!(report.rows.len(), 1);
}

#[test]
fn fluctuation_model_gradients() {
    run(
        CheckMode::Fluctuation { sigma: 2.0 },
        LossChoice::Intensity,
        15,
        1e-3,
    );
    run(
        CheckMode::Fluctuation { sigma: 2.0 },
        LossChoice::Localization,
        16,
        1e-3,
    );
}
