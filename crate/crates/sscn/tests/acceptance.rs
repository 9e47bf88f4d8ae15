//! End-to-end acceptance checks. Each test prints one pass/fail line
//! (visible with `cargo test --test acceptance -- --nocapture`).

use std::time::Instant;

use sscn::checkpoint::Checkpoint;
use sscn::config::RunConfig;
use sscn::data::{normalize_to_sphere, voxelize, VoxelSample};
use sscn::network::Network;
use sscn::rng::SeedTree;
use sscn::train::{self, category_frequencies, hash_split, TrainOptions};
use sscn::verify::{self, PropertyOutcome};

fn report(criterion: &str, outcome: &PropertyOutcome) {
    println!(
        "[{}] {criterion}: {}",
        if outcome.passed { "pass" } else { "FAIL" },
        outcome.detail
    );
    assert!(outcome.passed, "{criterion}: {}", outcome.detail);
}

fn line(criterion: &str, passed: bool, detail: String) {
    println!("[{}] {criterion}: {detail}", if passed { "pass" } else { "FAIL" });
    assert!(passed, "{criterion}: {detail}");
}

#[test]
fn criterion_1_oracle_equivalence() {
    let start = Instant::now();
    let outcomes = verify::run_all(1);
    let elapsed = start.elapsed().as_secs_f64();
    report("criterion 1 (oracle equivalence, 32/64-bit)", &outcomes[0]);
    report("criterion 1 (oracle equivalence, 64-bit)", &outcomes[1]);
    line(
        "criterion 1 (runtime)",
        elapsed < 60.0,
        format!("full property suite in {elapsed:.2}s < 60s"),
    );
}

#[test]
fn criterion_2_dilation_law() {
    let outcomes = verify::run_all(2);
    report("criterion 2 (submanifold dilation law)", &outcomes[2]);
}

#[test]
fn criterion_3_gradient_checks() {
    let outcomes = verify::run_all(3);
    report("criterion 3 (finite-difference gradient checks)", &outcomes[3]);
}

#[test]
fn criterion_4_cost_model() {
    let outcomes = verify::run_all(4);
    report("criterion 4 (Table-2 style cost identity)", &outcomes[4]);
}

#[test]
fn criterion_5_rulebook_reuse() {
    let outcomes = verify::run_all(5);
    report("criterion 5 (rule-book reuse, bitwise)", &outcomes[5]);
}

#[test]
fn criterion_6_sparsity_sanity() {
    let seeds = SeedTree::new(6);
    let s = 48.0;
    let volume = 48usize.pow(3) as f64;
    let mut worst_lo = f64::INFINITY;
    let mut worst_hi = 0.0f64;
    for i in 0..10u64 {
        let mut rng = seeds.stream("sphere", &[i]);
        let n_points = 2000 + (i as usize * 100); // 2000..2900
        let pc = sscn::synthetic::sphere_surface_cloud(&mut rng, n_points, 30.0);
        let normalized = normalize_to_sphere(&pc, s).unwrap();
        let sample: VoxelSample<f64> = voxelize(&normalized, s, 4 * 48, &mut rng).unwrap();
        let frac = sample.tensor.active_count() as f64 / volume;
        worst_lo = worst_lo.min(frac);
        worst_hi = worst_hi.max(frac);
    }
    line(
        "criterion 6 (surface clouds ~99% sparse)",
        worst_lo >= 0.003 && worst_hi <= 0.03,
        format!(
            "active fraction of S^3 in [{:.4}, {:.4}], required [0.003, 0.03]",
            worst_lo, worst_hi
        ),
    );
}

fn desk_scale_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    // U-Net, filters0 = 8, levels = 3, block_reps = 1, S = 16, the standard
    // optimizer settings, 30 epochs, rotation augmentation, K = 3 views
    cfg.set("network.arch", "unet").unwrap();
    cfg.set("data.augment", "rotation").unwrap();
    cfg.set("eval.views", "3").unwrap();
    cfg
}

#[test]
fn criterion_7_desk_scale_learning() {
    let start = Instant::now();
    let cfg = desk_scale_config();
    let seeds = SeedTree::new(cfg.seed);
    let (samples, manifest) = sscn::synthetic::generate_dataset(&seeds, cfg.synthetic_count);
    let mut net: Network<f64> = Network::build(&cfg.network_spec(), &seeds).unwrap();
    let opts: TrainOptions = cfg.train_options();
    assert_eq!(opts.epochs, 30);
    train::train(&mut net, &samples, &manifest, &opts, &seeds, |_| {}).unwrap();
    let (train_set, val_set) = hash_split(&samples);
    let freq = category_frequencies(&train_set);
    let report = train::evaluate_multiview(
        &mut net,
        &val_set,
        &manifest,
        &opts,
        cfg.views,
        cfg.mask,
        &seeds,
        &freq,
        u64::MAX,
    )
    .unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    line(
        "criterion 7 (desk-scale learning)",
        report.pixel_accuracy >= 0.90 && report.weighted_iou >= 0.75 && elapsed < 600.0,
        format!(
            "400 samples, 30 epochs: point accuracy {:.4} >= 0.90, mean IoU {:.4} >= 0.75, {:.1}s < 600s",
            report.pixel_accuracy, report.weighted_iou, elapsed
        ),
    );
}

#[test]
fn criterion_8_performance_scaling() {
    let outcomes = verify::run_all(8);
    report("criterion 8 (linear scaling in active sites)", &outcomes[8]);
}

#[test]
fn criterion_9_determinism() {
    let run = || {
        let mut cfg = desk_scale_config();
        cfg.set("train.epochs", "4").unwrap();
        cfg.set("data.synthetic_count", "60").unwrap();
        let seeds = SeedTree::new(cfg.seed);
        let (samples, manifest) = sscn::synthetic::generate_dataset(&seeds, cfg.synthetic_count);
        let mut net: Network<f64> = Network::build(&cfg.network_spec(), &seeds).unwrap();
        let opts = cfg.train_options();
        let records =
            train::train(&mut net, &samples, &manifest, &opts, &seeds, |_| {}).unwrap();
        Checkpoint::from_network(&mut net, None, cfg.seed, records.len()).to_bytes()
    };
    let a = run();
    let b = run();
    line(
        "criterion 9 (bitwise-deterministic training)",
        a == b,
        format!(
            "two identical-seed 64-bit runs produced byte-identical {}-byte checkpoints: {}",
            a.len(),
            a == b
        ),
    );
}
