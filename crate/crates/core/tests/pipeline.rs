//! End-to-end dataset pipeline on a miniature event dataset shaped like
//! the real one (700 channels, 20 classes): write containers, take a
//! stratified subset via manifest, bin, train briefly, and reload the
//! checkpoint.

use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use spikessm_core::activations::ActivationKind;
use spikessm_core::bptt::forward_eval;
use spikessm_core::data::{
    batch_from_records, load_dataset_with_manifest, stratified_subset, write_container,
    write_manifest, EventDataset, EventRecord, Split,
};
use spikessm_core::network::{load_checkpoint, LayerSpec, NetworkSpec};
use spikessm_core::neurons::TransitionKind;
use spikessm_core::training::{run_trials, OptimGroups, RunPlan};

fn fake_event_dataset(samples: usize, id_offset: u32, seed: u64) -> EventDataset {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = (i % 20) as u16;
        let events = 30 + (rng.random::<f64>() * 40.0) as usize;
        let mut times: Vec<f64> = (0..events).map(|_| rng.random::<f64>() * 0.9).collect();
        times.sort_by(f64::total_cmp);
        // class-dependent channel preference so training has signal
        let base_ch = (label as usize * 35) % 700;
        let units: Vec<u16> = (0..events)
            .map(|_| ((base_ch + (rng.random::<f64>() * 35.0) as usize) % 700) as u16)
            .collect();
        records.push(EventRecord {
            sample_id: id_offset + i as u32,
            label,
            times,
            units,
        });
    }
    EventDataset {
        channels: 700,
        classes: 20,
        records,
    }
}

#[test]
fn container_to_training_pipeline() {
    let dir = std::env::temp_dir().join(format!("shd_pipeline_{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();

    let train_ds = fake_event_dataset(60, 0, 1);
    let test_ds = fake_event_dataset(40, 1_000_000, 2);
    write_container(&dir.join("train.sed"), &train_ds).unwrap();
    write_container(&dir.join("test.sed"), &test_ds).unwrap();

    // stratified subset selected through a manifest file
    let ids = stratified_subset(&train_ds, 40, 7);
    let manifest = dir.join("train_subset.txt");
    write_manifest(&manifest, &ids).unwrap();
    let subset = load_dataset_with_manifest(&dir, Split::Train, Some(&manifest)).unwrap();
    assert_eq!(subset.len(), 40);

    // train/test manifests must not share sample ids
    let test_ids = stratified_subset(&test_ds, 20, 7);
    assert!(ids.iter().all(|id| !test_ids.contains(id)));

    let train = batch_from_records(&subset.records, 100, 700);
    let test = batch_from_records(&test_ds.records, 100, 700);
    assert_eq!(train.t_len, 100);
    assert_eq!(train.channels, 700);

    let spec = NetworkSpec {
        input_dim: 700,
        num_classes: 20,
        dropout_p: 0.0,
        layers: vec![LayerSpec {
            h: 4,
            n: 4,
            n_in: 1,
            n_out: 1,
            transition: TransitionKind::Diagonal,
            activation: ActivationKind::signed_spike(),
        }],
        train_b: false,
        train_c_bias: true,
        dt_min: 0.001,
        dt_max: 0.1,
        bn_momentum: 0.1,
        bn_epsilon: 1e-5,
    };
    let (groups, _) = OptimGroups::defaults_for(&spec);
    let mut plan = RunPlan::new(spec, groups);
    plan.epochs = 1;
    plan.batch_size = 16;
    plan.trials = 1;
    plan.seed = 5;
    plan.output_dir = Some(dir.join("out"));
    let summary = run_trials(&plan, &train, &test).unwrap();
    assert!(summary.failed.is_empty());
    assert!(summary.mean_acc.is_finite());

    // checkpoint reloads into a working network
    let loaded = load_checkpoint(&dir.join("out/trial_0/checkpoint.bin")).unwrap();
    let probe = test.select(&[0, 1, 2, 3]);
    let (loss, logits) = forward_eval(&loaded.network, &probe).unwrap();
    assert!(loss.is_finite());
    assert_eq!(logits.len(), 4 * 20);

    fs::remove_dir_all(&dir).unwrap();
}
