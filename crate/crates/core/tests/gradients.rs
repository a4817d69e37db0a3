mod common;

use common::*;
use dear::autodiff::gradcheck::GradCheckReport;

fn assert_close(name: &str, r: &GradCheckReport) {
    assert!(r.probes > 0, "{name}: nothing probed");
    assert!(
        r.max_rel_error <= GRAD_REL_TOL,
        "{name}: max relative error {:.3e} (worst {:?})",
        r.max_rel_error,
        r.worst
    );
}

#[test]
fn elementwise_filter_matches_finite_differences() {
    for seed in 0..3 {
        assert_close("elementwise_filter", &grad_elementwise_filter(seed));
    }
}

#[test]
fn unmask_attention_matches_finite_differences() {
    for seed in 0..3 {
        assert_close("unmask_attend", &grad_unmask_attend(seed));
    }
}

#[test]
fn lr_reconstruction_matches_finite_differences() {
    for seed in 0..3 {
        assert_close("reconstruct_lr", &grad_reconstruct_lr(seed));
    }
}

#[test]
fn color_prediction_and_ensemble_match_finite_differences() {
    for seed in 0..2 {
        assert_close("predict_color", &grad_predict_color(seed));
    }
}

#[test]
fn every_ablation_loss_matches_finite_differences() {
    for (ablation, cfg) in ablation_configs() {
        for seed in 0..4 {
            assert_close(ablation.label(), &grad_full_loss(&cfg, seed, 4));
        }
    }
}

#[test]
fn delta_highpass_and_invdist_losses_match_finite_differences() {
    let mut cfg = tiny_config();
    cfg.highpass = dear::config::HighpassMode::Delta;
    cfg.ensemble = dear::config::EnsembleMode::Invdist;
    cfg.mask_channel = false;
    assert_close("variant", &grad_full_loss(&cfg, 12, 4));
}

#[test]
fn attention_on_a_two_by_two_map_matches_finite_differences() {
    use dear::attention::AttentionConfig;
    use dear::autodiff::gradcheck::check_gradients;
    use dear::imaging::Mask;
    let mut r = rng(21);
    let mut mask = Mask::zeros(2, 2);
    mask.set(0, 1, true);
    let rep = check_gradients(vec![random_tensor(&mut r, &[3, 2, 2])], move |g, v| {
        let e = g.unmask_attend(v[0], &mask, AttentionConfig::default())?;
        probe(g, e)
    })
    .unwrap();
    assert_close("unmask_attend 3x2x2", &rep);
}

#[test]
fn feature_extractor_matches_finite_differences() {
    let cfg = tiny_config();
    for seed in 0..2 {
        let rep = grad_embedding(&cfg, seed, (8, 8), |e| vec![e.features.features]);
        assert_close("extract_features", &rep);
    }
}

#[test]
fn importance_branch_matches_finite_differences() {
    for seed in 0..2 {
        let rep = grad_importance_branch(seed);
        assert_close("importance branch", &rep);
    }
}
