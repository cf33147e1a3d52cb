//! Adam optimization with per-group decoupled weight decay, cosine-annealed
//! learning rates, eigenvalue clipping after every step, and multi-trial
//! experiment execution.
//!
//! Trainable parameters fall into two groups: `ssm` (eigenvalues, output
//! maps, biases — everything owned by the neuron banks) and `others` (dense
//! weights, batch-norm affine parameters, readout). Each group has its own
//! base learning rate and weight decay.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::bptt::{
    accuracy_from_logits, backward_unroll, forward_eval, forward_train, ActMode, Gradients,
};
use crate::data::SpikeBatch;
use crate::error::{Error, Result};
use crate::network::{
    save_checkpoint, CheckpointExtras, Network, NetworkSpec, ParamGroup, SegmentStore,
};

/// Per-group base learning rates and weight decays.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimGroups {
    pub lr_ssm: f64,
    pub lr_others: f64,
    pub wd_ssm: f64,
    pub wd_others: f64,
}

impl OptimGroups {
    /// Tuned defaults: single-channel (SISO) models use dropout 0.3 with
    /// heavier weight decay; any multi-channel model uses dropout 0.6 with
    /// lighter decay. The SSM learning rate depends on the transition
    /// structure. Returns `(groups, dropout_p)`.
    pub fn defaults_for(spec: &NetworkSpec) -> (Self, f64) {
        let multi_channel = spec.layers.iter().any(|l| l.n_in > 1 || l.n_out > 1);
        let all_diagonal = spec
            .layers
            .iter()
            .all(|l| l.transition == crate::neurons::TransitionKind::Diagonal);
        let (dropout, wd_others, wd_ssm) = if multi_channel {
            (0.6, 1e-5, 1e-4)
        } else {
            (0.3, 1e-3, 1e-2)
        };
        let lr_ssm = if all_diagonal { 0.001 } else { 0.01 };
        (
            OptimGroups {
                lr_ssm,
                lr_others: 0.01,
                wd_ssm,
                wd_others,
            },
            dropout,
        )
    }

    fn lr_for(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Ssm => self.lr_ssm,
            ParamGroup::Others => self.lr_others,
        }
    }

    fn wd_for(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Ssm => self.wd_ssm,
            ParamGroup::Others => self.wd_others,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: SegmentStore,
    pub v: SegmentStore,
    pub step: u64,
}

impl AdamState {
    pub fn new(net: &Network) -> Self {
        AdamState {
            m: SegmentStore::zeros_like(net),
            v: SegmentStore::zeros_like(net),
            step: 0,
        }
    }
}

/// Cosine annealing from `base_lr` at step 0 to zero at `total_steps`,
/// without restarts.
pub fn cosine_lr(base_lr: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let frac = (step as f64 / total_steps as f64).clamp(0.0, 1.0);
    base_lr * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}

#[derive(Clone, Copy, Debug)]
pub struct CosineSchedule {
    pub total_steps: u64,
}

/// One Adam step with decoupled (learning-rate-scaled) weight decay,
/// followed by eigenvalue clipping. Fails on non-finite gradients, naming
/// the offending segment.
pub fn adam_step(
    net: &mut Network,
    grads: &Gradients,
    state: &mut AdamState,
    groups: &OptimGroups,
    schedule: CosineSchedule,
) -> Result<()> {
    let t = state.step + 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let segments = net.param_segments_mut();
    for (seg_idx, (meta, params)) in segments.into_iter().enumerate() {
        if !meta.trainable {
            continue;
        }
        let lr = cosine_lr(groups.lr_for(meta.group), state.step, schedule.total_steps);
        let wd = groups.wd_for(meta.group);
        let g_seg = &grads.segments[seg_idx].1;
        let m_seg = &mut state.m.segments[seg_idx].1;
        let v_seg = &mut state.v.segments[seg_idx].1;
        for idx in 0..params.len() {
            let g = g_seg[idx];
            if !g.is_finite() {
                return Err(Error::NanGradient {
                    segment: meta.name(),
                    index: idx,
                    step: t,
                });
            }
            let m = ADAM_BETA1 * m_seg[idx] + (1.0 - ADAM_BETA1) * g;
            let v = ADAM_BETA2 * v_seg[idx] + (1.0 - ADAM_BETA2) * g * g;
            m_seg[idx] = m;
            v_seg[idx] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            params[idx] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON) + lr * wd * params[idx];
        }
    }
    state.step = t;
    net.clip_eigenvalues();
    net.bump_version();
    let max_mod = net.max_eigenvalue_modulus();
    assert!(
        max_mod <= 1.0 + 1e-9,
        "eigenvalue modulus {max_mod} escaped the unit disk after clipping"
    );
    Ok(())
}

/// Everything needed to run training trials, with the dataset already
/// resolved into dense batches.
#[derive(Clone, Debug)]
pub struct RunPlan {
    pub spec: NetworkSpec,
    pub optim: OptimGroups,
    pub epochs: usize,
    pub batch_size: usize,
    pub trials: usize,
    pub seed: u64,
    /// When set, per-trial metrics and checkpoints are written here.
    pub output_dir: Option<PathBuf>,
    /// When set, this fraction of the training set is held out per trial
    /// and reported as `val_acc` instead of the test split.
    pub holdout_fraction: Option<f64>,
    pub eval_batch_size: usize,
}

impl RunPlan {
    pub fn new(spec: NetworkSpec, optim: OptimGroups) -> Self {
        RunPlan {
            spec,
            optim,
            epochs: 50,
            batch_size: 128,
            trials: 10,
            seed: 0,
            output_dir: None,
            holdout_fraction: None,
            eval_batch_size: 256,
        }
    }
}

/// Per-epoch record appended to a trial's metrics file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr_ssm: f64,
    pub lr_others: f64,
    pub spike_rate_per_layer: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub test_accuracy: f64,
    pub curve: Vec<EpochMetrics>,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub mean_acc: f64,
    pub std_acc: f64,
    pub trials: Vec<TrialResult>,
    /// (trial index, error message) for trials that aborted.
    pub failed: Vec<(usize, String)>,
}

/// SplitMix64; used to derive independent seeds from (seed, stream) pairs.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Evaluate loss and accuracy over a dataset in fixed-size chunks.
pub fn evaluate(net: &Network, data: &SpikeBatch, chunk: usize) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct = 0.0;
    let mut seen = 0usize;
    let mut start = 0;
    while start < data.batch {
        let end = (start + chunk).min(data.batch);
        let indices: Vec<usize> = (start..end).collect();
        let part = data.select(&indices);
        let (loss, logits) = forward_eval(net, &part)?;
        let acc = accuracy_from_logits(&logits, &part.labels, net.spec.num_classes);
        loss_sum += loss * part.batch as f64;
        correct += acc * part.batch as f64;
        seen += part.batch;
        start = end;
    }
    Ok((loss_sum / seen as f64, correct / seen as f64))
}

/// Train one seeded model and evaluate it on the test split.
pub fn run_single_trial(
    plan: &RunPlan,
    train: &SpikeBatch,
    test: &SpikeBatch,
    trial: usize,
) -> Result<TrialResult> {
    let started = Instant::now();
    let trial_seed = mix_seed(plan.seed, trial as u64);
    let mut net = Network::init(plan.spec.clone(), trial_seed)?;
    let mut adam = AdamState::new(&net);
    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(mix_seed(trial_seed, 1));
    let mut dropout_rng = ChaCha12Rng::seed_from_u64(mix_seed(trial_seed, 2));

    // optional holdout split carved off the front of a shuffled index list
    let mut holdout_rng = ChaCha12Rng::seed_from_u64(mix_seed(trial_seed, 3));
    let (train_idx, val_idx): (Vec<usize>, Vec<usize>) = match plan.holdout_fraction {
        Some(frac) if frac > 0.0 => {
            let mut all: Vec<usize> = (0..train.batch).collect();
            all.shuffle(&mut holdout_rng);
            let n_val = ((train.batch as f64 * frac) as usize).max(1);
            let val = all[..n_val].to_vec();
            let tr = all[n_val..].to_vec();
            (tr, val)
        }
        _ => ((0..train.batch).collect(), Vec::new()),
    };
    let val_batch = (!val_idx.is_empty()).then(|| train.select(&val_idx));

    let batches_per_epoch = train_idx.len() / plan.batch_size
        + usize::from(train_idx.len() % plan.batch_size >= 2);
    let schedule = CosineSchedule {
        total_steps: (plan.epochs * batches_per_epoch) as u64,
    };

    let trial_dir = plan.output_dir.as_ref().map(|d| d.join(format!("trial_{trial}")));
    if let Some(dir) = &trial_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let mut metrics_file = match &trial_dir {
        Some(dir) => {
            let path = dir.join("metrics.jsonl");
            Some(
                fs::File::create(&path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?,
            )
        }
        None => None,
    };

    let mut curve = Vec::with_capacity(plan.epochs);
    let num_layers = net.layers.len();
    for epoch in 0..plan.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut seen = 0usize;
        let mut rate_sum = vec![0.0; num_layers];
        let mut batches_done = 0usize;
        let lr_ssm_now = cosine_lr(plan.optim.lr_ssm, adam.step, schedule.total_steps);
        let lr_others_now = cosine_lr(plan.optim.lr_others, adam.step, schedule.total_steps);
        for chunk in order.chunks(plan.batch_size) {
            // batch statistics need at least two samples
            if chunk.len() < 2 {
                continue;
            }
            let batch = train.select(chunk);
            let (loss, logits, tape) =
                forward_train(&mut net, &batch, ActMode::Exact, &mut dropout_rng)?;
            let grads = backward_unroll(&tape, &net)?;
            adam_step(&mut net, &grads, &mut adam, &plan.optim, schedule)?;
            loss_sum += loss * batch.batch as f64;
            acc_sum += accuracy_from_logits(&logits, &batch.labels, net.spec.num_classes)
                * batch.batch as f64;
            seen += batch.batch;
            for (r, lt) in rate_sum.iter_mut().zip(tape.layers.iter()) {
                *r += lt.spike_rate;
            }
            batches_done += 1;
        }
        let val_acc = match &val_batch {
            Some(vb) => evaluate(&net, vb, plan.eval_batch_size)?.1,
            None => evaluate(&net, test, plan.eval_batch_size)?.1,
        };
        let metrics = EpochMetrics {
            epoch,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            train_acc: if seen > 0 { acc_sum / seen as f64 } else { f64::NAN },
            val_acc,
            lr_ssm: lr_ssm_now,
            lr_others: lr_others_now,
            spike_rate_per_layer: rate_sum
                .iter()
                .map(|r| if batches_done > 0 { r / batches_done as f64 } else { 0.0 })
                .collect(),
        };
        if let Some(file) = metrics_file.as_mut() {
            let line = serde_json::to_string(&metrics).expect("metrics serialize");
            writeln!(file, "{line}").map_err(|e| Error::io("metrics.jsonl", e))?;
        }
        curve.push(metrics);
    }

    let (_, test_accuracy) = evaluate(&net, test, plan.eval_batch_size)?;
    if let Some(dir) = &trial_dir {
        let extras = CheckpointExtras {
            optimizer: Some((adam.step, &adam.m, &adam.v)),
            rng_seeds: &[plan.seed, trial_seed],
        };
        save_checkpoint(&dir.join("checkpoint.bin"), &net, &extras)?;
    }
    Ok(TrialResult {
        trial,
        seed: trial_seed,
        test_accuracy,
        curve,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Run `plan.trials` independent seeded trials. Trials that abort are
/// recorded in the summary; the remaining results are still aggregated.
pub fn run_trials(plan: &RunPlan, train: &SpikeBatch, test: &SpikeBatch) -> Result<RunSummary> {
    if let Some(dir) = &plan.output_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let mut trials = Vec::new();
    let mut failed = Vec::new();
    for trial in 0..plan.trials {
        match run_single_trial(plan, train, test, trial) {
            Ok(result) => trials.push(result),
            Err(err) => failed.push((trial, err.to_string())),
        }
    }
    let accs: Vec<f64> = trials.iter().map(|t| t.test_accuracy).collect();
    let (mean_acc, std_acc) = mean_and_std(&accs);
    let summary = RunSummary {
        mean_acc,
        std_acc,
        trials,
        failed,
    };
    if let Some(dir) = &plan.output_dir {
        write_summary(&dir.join("summary.json"), &summary)?;
    }
    Ok(summary)
}

pub fn write_summary(path: &Path, summary: &RunSummary) -> Result<()> {
    let json = serde_json::to_string_pretty(summary).expect("summary serializes");
    fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}
