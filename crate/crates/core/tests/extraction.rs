//! Attack pipeline on simulated traces, checked against what the simulator
//! actually did.

mod common;

use imcsca::artifacts::ArtifactSpec;
use imcsca::attack::{compare, detect_analog_ops, run_attack, DetectorConfig, HwKnowledge};
use imcsca::netspec::NetworkSpec;
use imcsca::powersim::{EventKind, SimulationOptions};

#[test]
fn output_sizes_exact_on_random_networks() {
    let mut checked = 0;
    for seed in 0..6 {
        let net = common::random_network(200 + seed, true);
        let r = common::run(&net, seed, 1, seed, &SimulationOptions::default());
        let arch = run_attack(
            &r.out.traces,
            &common::hw_for(&net),
            &DetectorConfig::default(),
        )
        .unwrap_or_else(|e| panic!("{net}: {e}"));
        let report = compare(&arch.to_spec(), &net);
        let wrong: Vec<_> = report
            .mismatches
            .iter()
            .filter(|m| m.field.ends_with(".out") || m.field.ends_with(".kind"))
            .collect();
        assert!(
            wrong.is_empty(),
            "network\n{net}\nextracted\n{}\n{wrong:?}",
            arch.report()
        );
        checked += 1;
    }
    assert!(checked >= 5);
}

#[test]
fn lenet_extraction_matches_for_several_images() {
    let net = NetworkSpec::lenet();
    for image_seed in [3, 4, 5] {
        let r = common::run(&net, 1, 1, image_seed, &SimulationOptions::default());
        let arch = run_attack(
            &r.out.traces,
            &HwKnowledge::default(),
            &DetectorConfig::default(),
        )
        .unwrap();
        let report = compare(&arch.to_spec(), &net);
        assert!(report.is_match(), "image seed {image_seed}: {report}");
    }
}

/// One stable-read window per input bit per vector, checked against the
/// row-driver events of the log.
#[test]
fn detected_windows_match_event_log() {
    let net = NetworkSpec::lenet();
    let r = common::run(&net, 1, 1, 2, &SimulationOptions::default());
    let hw = HwKnowledge::default();
    let det = DetectorConfig::default();
    let conv1 = &r.out.traces[0];
    let reads = r.out.events.count(0, EventKind::RowDrivers);
    assert_eq!(reads, 784 * 8);

    let clean = detect_analog_ops(conv1, &hw, &det).unwrap();
    assert_eq!(clean.len(), reads);
    let starts: Vec<f64> = r
        .out
        .events
        .for_tile(0)
        .filter(|e| e.kind == EventKind::RowDrivers)
        .map(|e| e.start())
        .collect();
    for (w, s) in clean.iter().zip(&starts) {
        assert!((w.0 - s).abs() < 0.5e-9, "window at {} vs read at {s}", w.0);
    }

    let degraded = ArtifactSpec {
        noise_std: 2e-3,
        target_rate: Some(1e9),
        seed: 4,
        noise_after_resample: true,
    }
    .apply(conv1)
    .unwrap();
    let noisy = detect_analog_ops(&degraded, &hw, &det).unwrap();
    assert_eq!(noisy.len(), 784 * 8);
    assert!((noisy[0].0 - starts[0]).abs() < 1e-9);
}

#[test]
fn every_tile_window_count_matches_clean() {
    let net = NetworkSpec::lenet();
    let r = common::run(&net, 1, 1, 2, &SimulationOptions::default());
    let (hw, det) = (HwKnowledge::default(), DetectorConfig::default());
    for t in &r.out.traces {
        let windows = detect_analog_ops(t, &hw, &det).unwrap();
        assert_eq!(
            windows.len(),
            r.out.events.count(t.tile_id, EventKind::RowDrivers),
            "tile {}",
            t.tile_id
        );
    }
}
