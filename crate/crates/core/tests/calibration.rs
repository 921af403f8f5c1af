mod common;

use proptest::prelude::*;
use tlq_core::calibration::{
    baseline_result, calibrate, quantize_with_result, replay_layer_losses, CalibConfig, CalibrationResult, Method,
    QuantizedArtifact, RatioGrid, StatMode, Strategy,
};
use tlq_core::model::forward_fp;
use tlq_core::quantizer::QuantScheme;

fn config(strategy: Strategy, stat: StatMode) -> CalibConfig {
    CalibConfig::new(QuantScheme::new(4, 8).unwrap(), strategy, stat)
}

#[test]
fn chosen_ratio_is_curve_minimum() {
    let (s, c) = (common::stack(1, 2, 12), common::calib(1, 3, 8, 12));
    for stat in [StatMode::Mean, StatMode::Max, StatMode::TopK] {
        let r = calibrate(&s, &c, &config(Strategy::PassAct2, stat)).unwrap();
        for l in &r.layers {
            let min = l.loss_curve.iter().map(|p| p.loss).fold(f64::INFINITY, f64::min);
            assert_eq!(l.loss, min);
            assert_eq!(l.loss_curve.len(), RatioGrid::default().points().len());
            let first = l.loss_curve.iter().find(|p| p.loss <= min + 1e-12).unwrap();
            assert_eq!(l.ratio, Some(first.r));
        }
    }
}

#[test]
fn single_linear_strategies_agree() {
    let (s, c) = (common::stack(2, 1, 10), common::calib(2, 2, 6, 10));
    let results: Vec<_> = [Strategy::None, Strategy::PassAct1, Strategy::PassAct2]
        .into_iter()
        .map(|st| calibrate(&s, &c, &config(st, StatMode::Max)).unwrap().layers)
        .collect();
    assert_eq!(results[0], results[1]);
    assert_eq!(results[1], results[2]);
}

#[test]
fn outlier_layer_beats_no_smoothing() {
    let (s, c) = (common::stack(3, 1, 16), common::calib(3, 4, 8, 16));
    let r = calibrate(&s, &c, &config(Strategy::None, StatMode::Max)).unwrap();
    let l = &r.layers[0];
    assert!(l.loss < l.loss_curve[0].loss, "{:?}", l.loss_curve);
}

#[test]
fn result_json_round_trips() {
    let (s, c) = (common::stack(4, 2, 8), common::calib(4, 2, 4, 8));
    let r = calibrate(&s, &c, &config(Strategy::PassAct1, StatMode::TopK)).unwrap();
    assert_eq!(CalibrationResult::from_json(&r.to_json().unwrap()).unwrap(), r);
    r.check_coverage(&s).unwrap();
}

#[test]
fn replay_reproduces_recorded_losses() {
    let (s, c) = (common::stack(5, 2, 12), common::calib(5, 3, 6, 12));
    for strategy in [Strategy::None, Strategy::PassAct1, Strategy::PassAct2] {
        let r = calibrate(&s, &c, &config(strategy, StatMode::Max)).unwrap();
        let art = quantize_with_result(&s, &r).unwrap();
        let replay = replay_layer_losses(&art, &c, strategy).unwrap();
        for (l, got) in r.layers.iter().zip(replay) {
            assert!(
                (got - l.loss).abs() <= 1e-9 * l.loss.max(1.0),
                "{strategy:?} {}: {got} vs {}",
                l.name,
                l.loss
            );
        }
    }
}

#[test]
fn baselines_have_no_curve() {
    let (s, c) = (common::stack(6, 2, 8), common::calib(6, 2, 4, 8));
    for m in [Method::Rtn, Method::Sq] {
        let r = baseline_result(&s, &c, m, &QuantScheme::new(4, 8).unwrap()).unwrap();
        assert!(r.layers.iter().all(|l| l.ratio.is_none() && l.loss_curve.is_empty()));
    }
    let rtn = baseline_result(&s, &c, Method::Rtn, &QuantScheme::new(4, 8).unwrap()).unwrap();
    assert!(rtn.layers.iter().all(|l| l.scale.iter().all(|&v| v == 1.0)));
}

#[test]
fn f32_calibration_runs() {
    let (s, c) = (common::stack(7, 2, 8), common::calib(7, 2, 4, 8));
    let r = calibrate(
        &s.cast::<f32>(),
        &c.cast::<f32>(),
        &config(Strategy::PassAct2, StatMode::TopK),
    )
    .unwrap();
    assert_eq!(r.scalar, "f32");
    assert_eq!(r.layers.len(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn fused_artifact_keeps_fp_function(seed in 0u64..1000, blocks in 1usize..3) {
        let s = common::stack(seed, blocks, 8);
        let c = common::calib(seed, 2, 4, 8);
        let r = calibrate(&s, &c, &config(Strategy::PassAct2, StatMode::Max)).unwrap();
        let art = quantize_with_result(&s, &r).unwrap();
        let want = forward_fp(&s, c.data()).unwrap().output().clone();
        let got = art.forward_fp(c.data()).unwrap();
        let err = want.sub(&got).unwrap().abs_max() / want.abs_max().max(1e-300);
        prop_assert!(err <= 1e-10, "rel err {err}");
    }

    #[test]
    fn artifact_bytes_round_trip(seed in 0u64..1000) {
        let s = common::stack(seed, 1, 6);
        let c = common::calib(seed, 2, 3, 6);
        let r = calibrate(&s, &c, &config(Strategy::None, StatMode::Mean)).unwrap();
        let art = quantize_with_result(&s, &r).unwrap();
        let back = QuantizedArtifact::<f64>::from_bytes(&art.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.forward(c.data()).unwrap(), art.forward(c.data()).unwrap());
    }
}
