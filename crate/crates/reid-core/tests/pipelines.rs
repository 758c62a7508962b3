//! End-to-end training runs on synthetic data.

use reid_core::pipeline::{train_daprh_stage2, train_scm, train_vitc, RunConfig};
use reid_core::synth::{synth_dataset, SyntheticSpec};

#[test]
fn supervised_run_reaches_high_rank1_on_easy_preset() {
    let data = synth_dataset(&SyntheticSpec::easy(1));
    let (train, held) = data.split_holdout(2);
    let cfg = RunConfig::scm_easy(1);
    let start = std::time::Instant::now();
    let result = train_scm(&train, &held, &cfg).unwrap();
    let elapsed = start.elapsed();
    println!(
        "baseline rank1={:.3} | final rank1={:.3} mAP={:.3} | {elapsed:?}",
        result.baseline.rank1, result.final_metrics.rank1, result.final_metrics.map,
    );
    assert!(result.final_metrics.rank1 >= 0.95, "rank1 {}", result.final_metrics.rank1);
    assert!(result.final_metrics.rank1 > result.baseline.rank1);
    assert!(elapsed.as_secs() < 60);
}

#[test]
fn camera_aware_run_improves_clustering_and_cap_helps() {
    let data = synth_dataset(&SyntheticSpec::camera_offset(8)).blinded();
    let cfg = RunConfig::vitc_camera_offset(8);
    let with_cap = train_vitc(&data, None, &cfg).unwrap();
    let mut no_cap_cfg = cfg.clone();
    no_cap_cfg.loss.lambda_cap = 0.0;
    let no_cap = train_vitc(&data, None, &no_cap_cfg).unwrap();

    let first_ari = with_cap.log.epochs.first().unwrap().metrics["ari"];
    let last_ari = with_cap.log.epochs.last().unwrap().metrics["ari"];
    println!(
        "ari {first_ari:.3} -> {last_ari:.3}; rank1 cap={:.3} plain={:.3}",
        with_cap.final_metrics.rank1, no_cap.final_metrics.rank1
    );
    assert!(last_ari >= first_ari, "ARI fell: {first_ari} → {last_ari}");
    assert!(last_ari >= 0.8, "final ARI {last_ari}");
    assert!(
        with_cap.final_metrics.rank1 >= no_cap.final_metrics.rank1,
        "cap {} vs plain {}",
        with_cap.final_metrics.rank1,
        no_cap.final_metrics.rank1
    );
}

#[test]
fn self_training_run_improves_clustering() {
    let data = synth_dataset(&SyntheticSpec::two_domain_target(1)).blinded();
    let cfg = RunConfig::daprh_target(1);
    let result = train_daprh_stage2(&data, None, &cfg).unwrap();
    let first = result.log.epochs.first().unwrap().metrics["ari"];
    let last = result.log.epochs.last().unwrap().metrics["ari"];
    println!("ari {first:.3} -> {last:.3}; final rank1={:.3}", result.final_metrics.rank1);
    assert!(last >= first, "ARI fell: {first} → {last}");
    assert!(last >= 0.8, "final ARI {last}");
}

#[test]
fn two_domain_mode_trains_the_domain_scorer() {
    let target = synth_dataset(&SyntheticSpec::two_domain_target(2)).blinded();
    let source = synth_dataset(&SyntheticSpec::easy(3));
    let cfg = RunConfig { epochs: 4, ..RunConfig::daprh_target(2) };
    let result = train_daprh_stage2(&target, Some(&source), &cfg).unwrap();
    // the discriminator objective should fall as the scorer learns
    let first = result.log.batches.first().unwrap().losses["dnet"];
    let last = result.log.batches.last().unwrap().losses["dnet"];
    println!("dnet loss {first:.4} -> {last:.4}");
    assert!(last < first, "domain scorer did not improve: {first} → {last}");
}
