mod common;

use std::time::Duration;

use proptest::prelude::*;
use tlq_core::calibration::{calibrate, CalibConfig, StatMode, Strategy};
use tlq_core::distcal::{
    distributed_calibrate, schedule_to_least_loaded, CalMessage, DistConfig, Fault, MemoryLedger, MemoryReport,
    TransportKind,
};
use tlq_core::quantizer::QuantScheme;

fn config(strategy: Strategy, stat: StatMode) -> CalibConfig {
    CalibConfig::new(QuantScheme::new(4, 8).unwrap(), strategy, stat)
}

#[test]
fn tcp_matches_single_context_and_conserves_memory() {
    let (s, c) = (common::stack(1, 2, 8), common::calib(1, 3, 4, 8));
    let cfg = config(Strategy::PassAct1, StatMode::TopK);
    let dist = DistConfig {
        transport: TransportKind::Tcp,
        ..DistConfig::default()
    };
    let out = distributed_calibrate(&s, &c, &cfg, &dist).unwrap();
    assert_eq!(out.result, calibrate(&s, &c, &cfg).unwrap());
    out.report.check_bounds().unwrap();
    assert!(out.report.workers.iter().all(|w| w.current_bytes == 0));
}

#[test]
fn peak_stays_below_baseline_without_prepass() {
    let (s, c) = (common::stack(1, 2, 8), common::calib(1, 3, 4, 8));
    for strategy in [Strategy::None, Strategy::PassAct1, Strategy::PassAct2] {
        let out = distributed_calibrate(&s, &c, &config(strategy, StatMode::Max), &DistConfig::default()).unwrap();
        assert!(
            out.report.max_worker_peak_bytes < out.report.baseline_peak_bytes,
            "{strategy:?}"
        );
    }
}

#[test]
fn memory_report_round_trips() {
    let (s, c) = (common::stack(2, 1, 6), common::calib(2, 2, 4, 6));
    let out = distributed_calibrate(&s, &c, &config(Strategy::None, StatMode::Max), &DistConfig::default()).unwrap();
    let text = out.report.to_json().unwrap();
    assert_eq!(MemoryReport::from_json(&text).unwrap(), out.report);
}

#[test]
fn killed_cal_worker_mid_layer_aborts() {
    let (s, c) = (common::stack(3, 2, 6), common::calib(3, 2, 4, 6));
    for after in [1, 4, 12] {
        let dist = DistConfig {
            workers: 2,
            timeout: Duration::from_millis(500),
            fault: Some(Fault::Kill { worker: 1, after }),
            ..DistConfig::default()
        };
        let err = distributed_calibrate(&s, &c, &config(Strategy::PassAct2, StatMode::Max), &dist).unwrap_err();
        assert_eq!(err.code(), "aborted", "{after}: {err}");
    }
}

#[test]
fn too_few_workers_is_config_error() {
    let (s, c) = (common::stack(4, 1, 4), common::calib(4, 1, 2, 4));
    let dist = DistConfig {
        workers: 1,
        ..DistConfig::default()
    };
    let err = distributed_calibrate(&s, &c, &config(Strategy::None, StatMode::Max), &dist).unwrap_err();
    assert_eq!(err.code(), "config");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn equivalence_holds_for_random_stacks(
        seed in 0u64..1000,
        workers in 2usize..5,
        strategy in prop_oneof![Just(Strategy::None), Just(Strategy::PassAct1), Just(Strategy::PassAct2)],
        stat in prop_oneof![Just(StatMode::Mean), Just(StatMode::Max), Just(StatMode::TopK)],
    ) {
        let (s, c) = (common::stack(seed, 2, 6), common::calib(seed, 2, 4, 6));
        let cfg = config(strategy, stat);
        let dist = DistConfig { workers, ..DistConfig::default() };
        let out = distributed_calibrate(&s, &c, &cfg, &dist).unwrap();
        prop_assert_eq!(out.result, calibrate(&s, &c, &cfg).unwrap());
        prop_assert!(out.report.check_bounds().is_ok());
    }

    #[test]
    fn scheduler_matches_linear_scan(loads in proptest::collection::vec(1u64..50, 1..8)) {
        let mut ledger = MemoryLedger::new(loads.len());
        for (i, &b) in loads.iter().enumerate() {
            ledger.alloc(i as u16, b, "t").unwrap();
        }
        let cands: Vec<u16> = (0..loads.len() as u16).collect();
        let want = (0..loads.len()).min_by_key(|&i| (loads[i], i)).unwrap() as u16;
        prop_assert_eq!(schedule_to_least_loaded(&ledger, &cands).unwrap(), want);
    }

    #[test]
    fn frames_survive_encode_decode(layer in 0u32..100, idx in 0u32..50, r in 0.0f64..1.0, loss in 0.0f64..1e6) {
        let m = CalMessage::loss_report(layer, idx, r, loss);
        let back = CalMessage::decode(&m.encode().unwrap()).unwrap();
        prop_assert_eq!(back, m);
    }
}
