//! Network assembly: dense inter-layer weights, batch normalization,
//! accumulative readout with cross-entropy, parameter bookkeeping, and the
//! checkpoint format.
//!
//! Layer `l` applies a dense weight `W_l` of shape `(h_l * n_in_l) x
//! prev_width` to the previous layer's spike stream, batch-normalizes the
//! resulting currents per channel, reshapes them to `h x n_in` and steps the
//! neuron bank. The readout sums the last layer's spikes over all time
//! steps before a linear projection to class logits.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::error::{Error, Result};
use crate::neurons::{
    init_layer_params, LayerRunner, LayerState, NeuronLayerParams, TrainableFlags, TransitionKind,
};

fn default_one() -> usize {
    1
}

/// Architecture of one hidden layer: a bank of `h` neurons with state
/// dimension `n` and `n_in`/`n_out` input/output channels each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub h: usize,
    pub n: usize,
    #[serde(default = "default_one")]
    pub n_in: usize,
    #[serde(default = "default_one")]
    pub n_out: usize,
    pub transition: TransitionKind,
    pub activation: ActivationKind,
}

impl LayerSpec {
    pub fn channels_in(&self) -> usize {
        self.h * self.n_in
    }

    pub fn channels_out(&self) -> usize {
        self.h * self.n_out
    }
}

fn default_dt_min() -> f64 {
    0.001
}

fn default_dt_max() -> f64 {
    0.1
}

fn default_bn_momentum() -> f64 {
    0.1
}

fn default_bn_epsilon() -> f64 {
    1e-5
}

fn default_true() -> bool {
    true
}

/// Full architecture description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub dropout_p: f64,
    pub layers: Vec<LayerSpec>,
    /// Train the input map B (fixed all-ones when false).
    #[serde(default)]
    pub train_b: bool,
    #[serde(default = "default_true")]
    pub train_c_bias: bool,
    #[serde(default = "default_dt_min")]
    pub dt_min: f64,
    #[serde(default = "default_dt_max")]
    pub dt_max: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_bn_epsilon")]
    pub bn_epsilon: f64,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network.layers must not be empty".into()));
        }
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "network.input_dim and network.num_classes must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "network.dropout_p must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if !(self.dt_min > 0.0) || self.dt_min > self.dt_max {
            return Err(Error::Config(format!(
                "network.dt_min/dt_max must satisfy 0 < dt_min <= dt_max, got [{}, {}]",
                self.dt_min, self.dt_max
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.h == 0 || layer.n == 0 || layer.n_in == 0 || layer.n_out == 0 {
                return Err(Error::Config(format!(
                    "network.layers[{l}]: h, n, n_in, n_out must all be positive"
                )));
            }
            layer.activation.validate()?;
        }
        Ok(())
    }

    /// Width of the stream feeding layer `l`.
    pub fn prev_width(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim
        } else {
            self.layers[l - 1].channels_out()
        }
    }

    pub fn last_width(&self) -> usize {
        self.layers
            .last()
            .map(|s| s.channels_out())
            .unwrap_or(self.input_dim)
    }

    fn trainable_flags(&self) -> TrainableFlags {
        TrainableFlags {
            lambda: true,
            b: self.train_b,
            c: true,
            c_bias: self.train_c_bias,
        }
    }
}

/// Per-channel batch normalization state.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    /// When set, train-mode passes use running statistics and skip updates.
    pub frozen: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch statistics actually used by a train-mode pass (biased variance).
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Self {
        BatchNormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            epsilon,
            frozen: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalize `x` (row-major `rows x channels`) in place using batch
    /// statistics computed over all rows, and update the running estimates.
    /// `batch` is the number of distinct samples the rows came from.
    pub fn normalize_train(&mut self, x: &mut [f64], rows: usize, batch: usize) -> Result<BnStats> {
        let channels = self.channels();
        debug_assert_eq!(x.len(), rows * channels);
        if batch < 2 {
            return Err(Error::DegenerateBatch(batch));
        }
        if self.frozen {
            let stats = BnStats {
                mean: self.running_mean.clone(),
                var: self.running_var.clone(),
            };
            self.apply_affine(x, rows, &stats);
            return Ok(stats);
        }
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        let inv_rows = 1.0 / rows as f64;
        for c in 0..channels {
            let mut acc = 0.0;
            for r in 0..rows {
                acc += x[r * channels + c];
            }
            mean[c] = acc * inv_rows;
            let mut sq = 0.0;
            for r in 0..rows {
                let d = x[r * channels + c] - mean[c];
                sq += d * d;
            }
            var[c] = sq * inv_rows;
        }
        for c in 0..channels {
            self.running_mean[c] =
                (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
            self.running_var[c] =
                (1.0 - self.momentum) * self.running_var[c] + self.momentum * var[c];
        }
        let stats = BnStats { mean, var };
        self.apply_affine(x, rows, &stats);
        Ok(stats)
    }

    /// Normalize in place using the running statistics.
    pub fn normalize_eval(&self, x: &mut [f64], rows: usize) {
        let stats = BnStats {
            mean: self.running_mean.clone(),
            var: self.running_var.clone(),
        };
        self.apply_affine(x, rows, &stats);
    }

    fn apply_affine(&self, x: &mut [f64], rows: usize, stats: &BnStats) {
        let channels = self.channels();
        let mut scale = vec![0.0; channels];
        let mut shift = vec![0.0; channels];
        for c in 0..channels {
            let inv_std = 1.0 / (stats.var[c] + self.epsilon).sqrt();
            scale[c] = self.gamma[c] * inv_std;
            shift[c] = self.beta[c] - stats.mean[c] * scale[c];
        }
        for r in 0..rows {
            let row = &mut x[r * channels..(r + 1) * channels];
            for c in 0..channels {
                row[c] = row[c] * scale[c] + shift[c];
            }
        }
    }
}

/// Normalize a `batch x channels` matrix. Train mode uses batch statistics
/// and updates the running estimates; eval mode uses the running statistics.
pub fn batchnorm_apply(
    bn: &mut BatchNormState,
    x: &[f64],
    batch: usize,
    mode: BnMode,
) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    match mode {
        BnMode::Train => {
            bn.normalize_train(&mut out, batch, batch)?;
        }
        BnMode::Eval => bn.normalize_eval(&mut out, batch),
    }
    Ok(out)
}

/// Linear readout applied to time-accumulated spikes.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutParams {
    /// Row-major `num_classes x width`.
    pub w_out: Vec<f64>,
    pub num_classes: usize,
    pub width: usize,
}

impl ReadoutParams {
    pub fn zeros(num_classes: usize, width: usize) -> Self {
        ReadoutParams {
            w_out: vec![0.0; num_classes * width],
            num_classes,
            width,
        }
    }
}

/// Accumulate the stream over time, project to logits, and take the mean
/// softmax cross-entropy. `stream` is `batch x t_len x width`.
pub fn readout_and_loss(
    readout: &ReadoutParams,
    stream: &[f64],
    batch: usize,
    t_len: usize,
    labels: &[u16],
) -> Result<(f64, Vec<f64>)> {
    let logits = readout_logits(readout, stream, batch, t_len);
    let (loss, _) = softmax_ce_and_grad(&logits, labels, batch, readout.num_classes)?;
    Ok((loss, logits))
}

pub(crate) fn readout_logits(
    readout: &ReadoutParams,
    stream: &[f64],
    batch: usize,
    t_len: usize,
) -> Vec<f64> {
    let width = readout.width;
    let classes = readout.num_classes;
    debug_assert_eq!(stream.len(), batch * t_len * width);
    let mut logits = vec![0.0; batch * classes];
    for s in 0..batch {
        let mut acc = vec![0.0; width];
        for t in 0..t_len {
            let row = &stream[(s * t_len + t) * width..(s * t_len + t + 1) * width];
            for (a, v) in acc.iter_mut().zip(row.iter()) {
                *a += v;
            }
        }
        for c in 0..classes {
            let w_row = &readout.w_out[c * width..(c + 1) * width];
            let mut dot = 0.0;
            for (w, a) in w_row.iter().zip(acc.iter()) {
                dot += w * a;
            }
            logits[s * classes + c] = dot;
        }
    }
    logits
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub(crate) fn softmax_ce_and_grad(
    logits: &[f64],
    labels: &[u16],
    batch: usize,
    classes: usize,
) -> Result<(f64, Vec<f64>)> {
    debug_assert_eq!(logits.len(), batch * classes);
    let mut loss = 0.0;
    let mut grad = vec![0.0; batch * classes];
    let inv_batch = 1.0 / batch as f64;
    for s in 0..batch {
        let label = labels[s] as usize;
        if label >= classes {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: classes,
            });
        }
        let row = &logits[s * classes..(s + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&l| (l - max).exp()).sum();
        let lse = max + sum_exp.ln();
        loss += (lse - row[label]) * inv_batch;
        for c in 0..classes {
            let p = (row[c] - lse).exp();
            grad[s * classes + c] = (p - if c == label { 1.0 } else { 0.0 }) * inv_batch;
        }
    }
    Ok((loss, grad))
}

/// One hidden layer: dense input weight, batch norm, neuron bank.
#[derive(Clone, Debug)]
pub struct Layer {
    /// Row-major `(h * n_in) x prev_width`.
    pub w: Vec<f64>,
    pub bn: BatchNormState,
    pub neurons: NeuronLayerParams,
}

/// A full network with its architecture description and a version counter
/// bumped on every parameter mutation (used to detect stale tapes).
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    pub layers: Vec<Layer>,
    pub readout: ReadoutParams,
    pub version: u64,
}

impl Network {
    /// Geometry-only construction with all parameters zeroed.
    pub fn zeroed(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (l, ls) in spec.layers.iter().enumerate() {
            let prev = spec.prev_width(l);
            let mut neurons = NeuronLayerParams::zeros(ls.h, ls.n, ls.n_in, ls.n_out);
            neurons.trainable = spec.trainable_flags();
            layers.push(Layer {
                w: vec![0.0; ls.channels_in() * prev],
                bn: BatchNormState::new(ls.channels_in(), spec.bn_momentum, spec.bn_epsilon),
                neurons,
            });
        }
        let readout = ReadoutParams::zeros(spec.num_classes, spec.last_width());
        Ok(Network {
            spec,
            layers,
            readout,
            version: 0,
        })
    }

    /// Seeded initialization: uniform fan-in scaling for dense weights,
    /// S4D-Lin eigenvalues, all-ones B, standard-normal C, zero biases.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut net = Network::zeroed(spec)?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for l in 0..net.layers.len() {
            let ls = net.spec.layers[l].clone();
            let prev = net.spec.prev_width(l);
            let bound = 1.0 / (prev as f64).sqrt();
            for w in net.layers[l].w.iter_mut() {
                *w = bound * (2.0 * rng.random::<f64>() - 1.0);
            }
            net.layers[l].neurons = init_layer_params(
                ls.h,
                ls.n,
                ls.n_in,
                ls.n_out,
                net.spec.dt_min,
                net.spec.dt_max,
                net.spec.trainable_flags(),
                &mut rng,
            )?;
        }
        let bound = 1.0 / (net.readout.width as f64).sqrt();
        for w in net.readout.w_out.iter_mut() {
            *w = bound * (2.0 * rng.random::<f64>() - 1.0);
        }
        Ok(net)
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn runners(&self) -> Result<Vec<LayerRunner>> {
        self.layers
            .iter()
            .zip(self.spec.layers.iter())
            .map(|(layer, ls)| LayerRunner::new(&layer.neurons, ls.transition))
            .collect()
    }

    pub fn segment_metas(&self) -> Vec<SegmentMeta> {
        let mut out = Vec::with_capacity(self.layers.len() * LAYER_SEG_COUNT + 1);
        for (l, layer) in self.layers.iter().enumerate() {
            let t = &layer.neurons.trainable;
            let mut push = |kind, group, trainable, len| {
                out.push(SegmentMeta {
                    kind,
                    layer: Some(l),
                    group,
                    trainable,
                    len,
                });
            };
            push(SegKind::W, ParamGroup::Others, true, layer.w.len());
            push(SegKind::BnGamma, ParamGroup::Others, true, layer.bn.gamma.len());
            push(SegKind::BnBeta, ParamGroup::Others, true, layer.bn.beta.len());
            push(SegKind::LambdaRe, ParamGroup::Ssm, t.lambda, layer.neurons.lambda.re.len());
            push(SegKind::LambdaIm, ParamGroup::Ssm, t.lambda, layer.neurons.lambda.im.len());
            push(SegKind::BRe, ParamGroup::Ssm, t.b, layer.neurons.b.re.len());
            push(SegKind::BIm, ParamGroup::Ssm, t.b, layer.neurons.b.im.len());
            push(SegKind::CRe, ParamGroup::Ssm, t.c, layer.neurons.c.re.len());
            push(SegKind::CIm, ParamGroup::Ssm, t.c, layer.neurons.c.im.len());
            push(SegKind::CBias, ParamGroup::Ssm, t.c_bias, layer.neurons.c_bias.len());
        }
        out.push(SegmentMeta {
            kind: SegKind::Readout,
            layer: None,
            group: ParamGroup::Others,
            trainable: true,
            len: self.readout.w_out.len(),
        });
        out
    }

    /// Parameter segments in canonical order, immutable.
    pub fn param_segments(&self) -> Vec<(SegmentMeta, &[f64])> {
        let metas = self.segment_metas();
        let mut data: Vec<&[f64]> = Vec::with_capacity(metas.len());
        for layer in &self.layers {
            data.push(&layer.w);
            data.push(&layer.bn.gamma);
            data.push(&layer.bn.beta);
            data.push(&layer.neurons.lambda.re);
            data.push(&layer.neurons.lambda.im);
            data.push(&layer.neurons.b.re);
            data.push(&layer.neurons.b.im);
            data.push(&layer.neurons.c.re);
            data.push(&layer.neurons.c.im);
            data.push(&layer.neurons.c_bias);
        }
        data.push(&self.readout.w_out);
        metas.into_iter().zip(data).collect()
    }

    /// Parameter segments in canonical order, mutable. Callers that mutate
    /// must call [`Network::bump_version`] afterwards.
    pub fn param_segments_mut(&mut self) -> Vec<(SegmentMeta, &mut [f64])> {
        let metas = self.segment_metas();
        let mut data: Vec<&mut [f64]> = Vec::with_capacity(metas.len());
        for layer in self.layers.iter_mut() {
            let Layer { w, bn, neurons } = layer;
            data.push(w);
            data.push(&mut bn.gamma);
            data.push(&mut bn.beta);
            data.push(&mut neurons.lambda.re);
            data.push(&mut neurons.lambda.im);
            data.push(&mut neurons.b.re);
            data.push(&mut neurons.b.im);
            data.push(&mut neurons.c.re);
            data.push(&mut neurons.c.im);
            data.push(&mut neurons.c_bias);
        }
        data.push(&mut self.readout.w_out);
        metas.into_iter().zip(data).collect()
    }

    /// Clip every eigenvalue back to the unit disk. Returns the number of
    /// eigenvalues that were rescaled.
    pub fn clip_eigenvalues(&mut self) -> usize {
        let mut clipped = 0;
        for layer in self.layers.iter_mut() {
            let lam = &mut layer.neurons.lambda;
            for idx in 0..lam.len() {
                let re = lam.re[idx];
                let im = lam.im[idx];
                let m2 = re * re + im * im;
                if m2 > 1.0 {
                    let s = 1.0 / m2.sqrt();
                    lam.re[idx] = re * s;
                    lam.im[idx] = im * s;
                    clipped += 1;
                }
            }
        }
        clipped
    }

    pub fn max_eigenvalue_modulus(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| (0..l.neurons.lambda.len()).map(|i| l.neurons.lambda.get(i).norm_sqr()))
            .fold(0.0f64, f64::max)
            .sqrt()
    }
}

pub const LAYER_SEG_COUNT: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegKind {
    W,
    BnGamma,
    BnBeta,
    LambdaRe,
    LambdaIm,
    BRe,
    BIm,
    CRe,
    CIm,
    CBias,
    Readout,
}

impl SegKind {
    fn layer_offset(self) -> usize {
        match self {
            SegKind::W => 0,
            SegKind::BnGamma => 1,
            SegKind::BnBeta => 2,
            SegKind::LambdaRe => 3,
            SegKind::LambdaIm => 4,
            SegKind::BRe => 5,
            SegKind::BIm => 6,
            SegKind::CRe => 7,
            SegKind::CIm => 8,
            SegKind::CBias => 9,
            SegKind::Readout => panic!("readout is not a layer segment"),
        }
    }
}

/// Optimizer grouping: neuron SSM parameters vs everything else.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Ssm,
    Others,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentMeta {
    pub kind: SegKind,
    pub layer: Option<usize>,
    pub group: ParamGroup,
    pub trainable: bool,
    pub len: usize,
}

impl SegmentMeta {
    pub fn name(&self) -> String {
        match self.layer {
            Some(l) => format!("layer{l}.{:?}", self.kind),
            None => format!("{:?}", self.kind),
        }
    }
}

/// Index of a segment in the canonical ordering.
pub fn seg_index(layer: Option<usize>, kind: SegKind, num_layers: usize) -> usize {
    match layer {
        Some(l) => l * LAYER_SEG_COUNT + kind.layer_offset(),
        None => num_layers * LAYER_SEG_COUNT,
    }
}

/// Flat per-segment storage congruent with a network's parameters; used for
/// gradients and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentStore {
    pub segments: Vec<(SegmentMeta, Vec<f64>)>,
    num_layers: usize,
}

impl SegmentStore {
    pub fn zeros_like(net: &Network) -> Self {
        let segments = net
            .segment_metas()
            .into_iter()
            .map(|m| {
                let len = m.len;
                (m, vec![0.0; len])
            })
            .collect();
        SegmentStore {
            segments,
            num_layers: net.layers.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    #[inline]
    pub fn get(&self, layer: Option<usize>, kind: SegKind) -> &[f64] {
        &self.segments[seg_index(layer, kind, self.num_layers)].1
    }

    #[inline]
    pub fn get_mut(&mut self, layer: Option<usize>, kind: SegKind) -> &mut [f64] {
        &mut self.segments[seg_index(layer, kind, self.num_layers)].1
    }

    /// Total number of scalars across trainable segments.
    pub fn trainable_scalars(&self) -> usize {
        self.segments
            .iter()
            .filter(|(m, _)| m.trainable)
            .map(|(m, _)| m.len)
            .sum()
    }
}

const CKPT_MAGIC: &[u8; 8] = b"SSMCKPT1";
const CKPT_VERSION: u16 = 1;

/// Optimizer state and RNG bookkeeping persisted next to the parameters.
#[derive(Default)]
pub struct CheckpointExtras<'a> {
    pub optimizer: Option<(u64, &'a SegmentStore, &'a SegmentStore)>,
    pub rng_seeds: &'a [u64],
}

pub struct LoadedCheckpoint {
    pub network: Network,
    pub optimizer: Option<(u64, SegmentStore, SegmentStore)>,
    pub rng_seeds: Vec<u64>,
}

fn push_f64s(buf: &mut Vec<u8>, data: &[f64]) {
    buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_store(buf: &mut Vec<u8>, store: &SegmentStore) {
    for (_, data) in &store.segments {
        push_f64s(buf, data);
    }
}

/// Serialize the network (spec, parameters, BN running statistics), plus
/// optional optimizer moments and RNG seeds, into a checksummed binary
/// file. Save-load-save is byte-identical.
pub fn save_checkpoint(path: &Path, net: &Network, extras: &CheckpointExtras) -> Result<()> {
    let pstr = path.display().to_string();
    let spec_json = serde_json::to_vec(&net.spec).expect("spec serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&spec_json);
    buf.extend_from_slice(&net.version.to_le_bytes());
    for layer in &net.layers {
        push_f64s(&mut buf, &layer.bn.running_mean);
        push_f64s(&mut buf, &layer.bn.running_var);
        buf.push(layer.bn.frozen as u8);
    }
    for (_, data) in net.param_segments() {
        push_f64s(&mut buf, data);
    }
    match extras.optimizer {
        None => buf.push(0),
        Some((step, m, v)) => {
            buf.push(1);
            buf.extend_from_slice(&step.to_le_bytes());
            push_store(&mut buf, m);
            push_store(&mut buf, v);
        }
    }
    buf.extend_from_slice(&(extras.rng_seeds.len() as u32).to_le_bytes());
    for s in extras.rng_seeds {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    let mut file = fs::File::create(path).map_err(|e| Error::io(&pstr, e))?;
    file.write_all(&buf).map_err(|e| Error::io(&pstr, e))?;
    Ok(())
}

struct CkptCursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> CkptCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::DataFormat {
                path: self.path.into(),
                detail: format!("checkpoint truncated at offset {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64s(&mut self, expect_len: usize) -> Result<Vec<f64>> {
        let len = self.u64()? as usize;
        if len != expect_len {
            return Err(Error::DataFormat {
                path: self.path.into(),
                detail: format!("segment length {len}, expected {expect_len}"),
            });
        }
        let bytes = self.take(len * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let pstr = path.display().to_string();
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(&pstr, e))?;
    if buf.len() < 14 {
        return Err(Error::DataFormat {
            path: pstr,
            detail: "checkpoint too short".into(),
        });
    }
    let (body, trailer) = buf.split_at(buf.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().unwrap()) {
        return Err(Error::Integrity {
            path: pstr,
            detail: "checkpoint checksum mismatch".into(),
        });
    }
    let mut cur = CkptCursor {
        buf: body,
        pos: 0,
        path: &pstr,
    };
    if cur.take(8)? != CKPT_MAGIC {
        return Err(Error::DataFormat {
            path: pstr,
            detail: "bad checkpoint magic".into(),
        });
    }
    let version = cur.u16()?;
    if version != CKPT_VERSION {
        return Err(Error::DataFormat {
            path: pstr,
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let spec_len = cur.u32()? as usize;
    let spec: NetworkSpec =
        serde_json::from_slice(cur.take(spec_len)?).map_err(|e| Error::DataFormat {
            path: pstr.clone(),
            detail: format!("spec json: {e}"),
        })?;
    let mut net = Network::zeroed(spec)?;
    net.version = cur.u64()?;
    for layer in net.layers.iter_mut() {
        let ch = layer.bn.channels();
        layer.bn.running_mean = cur.f64s(ch)?;
        layer.bn.running_var = cur.f64s(ch)?;
        layer.bn.frozen = cur.u8()? != 0;
    }
    for (meta, data) in net.param_segments_mut() {
        let loaded = cur.f64s(meta.len)?;
        data.copy_from_slice(&loaded);
    }
    let optimizer = if cur.u8()? == 1 {
        let step = cur.u64()?;
        let mut m = SegmentStore::zeros_like(&net);
        for i in 0..m.segments.len() {
            let len = m.segments[i].0.len;
            m.segments[i].1 = cur.f64s(len)?;
        }
        let mut v = SegmentStore::zeros_like(&net);
        for i in 0..v.segments.len() {
            let len = v.segments[i].0.len;
            v.segments[i].1 = cur.f64s(len)?;
        }
        Some((step, m, v))
    } else {
        None
    };
    let seed_count = cur.u32()? as usize;
    let mut rng_seeds = Vec::with_capacity(seed_count);
    for _ in 0..seed_count {
        rng_seeds.push(cur.u64()?);
    }
    if cur.pos != body.len() {
        return Err(Error::DataFormat {
            path: pstr,
            detail: "trailing bytes in checkpoint".into(),
        });
    }
    Ok(LoadedCheckpoint {
        network: net,
        optimizer,
        rng_seeds,
    })
}

/// Run one layer over a single input stream (`t_len x prev_width`) using
/// the running batch-norm statistics, returning the spike stream
/// (`t_len x h*n_out`). Train-mode batch processing, which needs batch
/// statistics, dropout masks and a tape, lives in [`crate::bptt`].
pub fn layer_forward(
    w: &[f64],
    bn: &BatchNormState,
    neurons: &NeuronLayerParams,
    kind: TransitionKind,
    act: &ActivationKind,
    input_stream: &[f64],
    t_len: usize,
) -> Result<Vec<f64>> {
    let ch_in = neurons.h * neurons.n_in;
    let ch_out = neurons.h * neurons.n_out;
    if t_len == 0 || input_stream.len() % t_len != 0 {
        return Err(Error::InvalidDimension(format!(
            "input stream of {} values does not divide into {t_len} steps",
            input_stream.len()
        )));
    }
    let prev_width = input_stream.len() / t_len;
    if w.len() != ch_in * prev_width {
        return Err(Error::InvalidDimension(format!(
            "dense weight has {} values, expected {}x{}",
            w.len(),
            ch_in,
            prev_width
        )));
    }
    let runner = LayerRunner::new(neurons, kind)?;
    let mut state = LayerState::zeros(neurons.h, neurons.n);
    let mut current = vec![0.0; ch_in];
    let mut y = vec![0.0; ch_out];
    let mut out = vec![0.0; t_len * ch_out];
    for t in 0..t_len {
        let input = &input_stream[t * prev_width..(t + 1) * prev_width];
        for r in 0..ch_in {
            let mut acc = 0.0;
            for (wv, xv) in w[r * prev_width..(r + 1) * prev_width].iter().zip(input) {
                acc += wv * xv;
            }
            current[r] = acc;
        }
        bn.normalize_eval(&mut current, 1);
        runner.step(&mut state, &current, &mut y);
        if y.iter().any(|v| !v.is_finite()) || !state.is_finite() {
            return Err(Error::DivergedState { layer: 0, step: t });
        }
        for (o, yv) in y.iter().enumerate() {
            out[t * ch_out + o] = act.apply_scalar(*yv);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Cpx;

    fn small_spec() -> NetworkSpec {
        NetworkSpec {
            input_dim: 5,
            num_classes: 3,
            dropout_p: 0.0,
            layers: vec![
                LayerSpec {
                    h: 2,
                    n: 4,
                    n_in: 1,
                    n_out: 1,
                    transition: TransitionKind::Diagonal,
                    activation: ActivationKind::signed_spike(),
                },
                LayerSpec {
                    h: 2,
                    n: 4,
                    n_in: 1,
                    n_out: 2,
                    transition: TransitionKind::NonDiagonalDft,
                    activation: ActivationKind::gelu(),
                },
            ],
            train_b: false,
            train_c_bias: true,
            dt_min: 0.001,
            dt_max: 0.1,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }

    #[test]
    fn spec_widths() {
        let spec = small_spec();
        assert_eq!(spec.prev_width(0), 5);
        assert_eq!(spec.prev_width(1), 2);
        assert_eq!(spec.last_width(), 4);
    }

    #[test]
    fn spec_validation_errors() {
        let mut spec = small_spec();
        spec.dropout_p = 1.0;
        assert!(spec.validate().is_err());

        let mut spec = small_spec();
        spec.layers.clear();
        assert!(spec.validate().is_err());

        let mut spec = small_spec();
        spec.layers[0].h = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut bn = BatchNormState::new(2, 0.1, 1e-5);
        let x: Vec<f64> = vec![
            1.0, 10.0, //
            2.0, 20.0, //
            3.0, 30.0, //
            4.0, 40.0,
        ];
        let out = batchnorm_apply(&mut bn, &x, 4, BnMode::Train).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..4).map(|r| out[r * 2 + c]).sum::<f64>() / 4.0;
            let var: f64 = (0..4).map(|r| (out[r * 2 + c] - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_constant_channel_yields_beta() {
        let mut bn = BatchNormState::new(1, 0.1, 1e-5);
        bn.beta[0] = 0.7;
        let x = vec![5.0; 8];
        let out = batchnorm_apply(&mut bn, &x, 8, BnMode::Train).unwrap();
        for v in out {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_degenerate_batch() {
        let mut bn = BatchNormState::new(2, 0.1, 1e-5);
        let err = batchnorm_apply(&mut bn, &[1.0, 2.0], 1, BnMode::Train).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch(1)));
    }

    #[test]
    fn batchnorm_running_stats_converge() {
        let mut bn = BatchNormState::new(1, 0.1, 1e-5);
        let x = vec![2.0, 4.0, 6.0, 8.0];
        for _ in 0..200 {
            batchnorm_apply(&mut bn, &x, 4, BnMode::Train).unwrap();
        }
        // geometric series: running -> batch statistic
        assert!((bn.running_mean[0] - 5.0).abs() < 1e-6);
        assert!((bn.running_var[0] - 5.0).abs() < 1e-6);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut bn = BatchNormState::new(1, 0.1, 1e-5);
        bn.running_mean[0] = 2.0;
        bn.running_var[0] = 4.0;
        let out = batchnorm_apply(&mut bn, &[4.0], 1, BnMode::Eval).unwrap();
        assert!((out[0] - 2.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn readout_zero_weights_uniform_loss() {
        let readout = ReadoutParams::zeros(20, 7);
        let stream = vec![0.3; 2 * 5 * 7];
        let (loss, logits) = readout_and_loss(&readout, &stream, 2, 5, &[3, 19]).unwrap();
        assert!((loss - (20f64).ln()).abs() < 1e-12);
        assert!(logits.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn readout_perfect_logits_loss_vanishes() {
        let mut readout = ReadoutParams::zeros(3, 3);
        // identity projection scaled large
        for c in 0..3 {
            readout.w_out[c * 3 + c] = 100.0;
        }
        let mut stream = vec![0.0; 2 * 3];
        stream[0] = 1.0; // sample 0 -> class 0
        stream[3 + 1] = 1.0; // sample 1 -> class 1
        let (loss, _) = readout_and_loss(&readout, &stream, 2, 1, &[0, 1]).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn readout_matches_independent_scalar_ce() {
        let mut readout = ReadoutParams::zeros(3, 2);
        let w = [[0.3, -0.2], [0.1, 0.5], [-0.4, 0.2]];
        for c in 0..3 {
            for k in 0..2 {
                readout.w_out[c * 2 + k] = w[c][k];
            }
        }
        let stream = vec![0.5, 1.5, -0.5, 2.0]; // batch 1, T=2, width 2
        let labels = [2u16];
        let (loss, logits) = readout_and_loss(&readout, &stream, 1, 2, &labels).unwrap();

        // independent scalar implementation
        let acc = [0.5 + -0.5, 1.5 + 2.0];
        let mut want_logits = [0.0; 3];
        for c in 0..3 {
            want_logits[c] = w[c][0] * acc[0] + w[c][1] * acc[1];
        }
        let max = want_logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = want_logits.iter().map(|l| (l - max).exp()).sum();
        let want_loss = max + z.ln() - want_logits[2];
        for c in 0..3 {
            assert!((logits[c] - want_logits[c]).abs() < 1e-10);
        }
        assert!((loss - want_loss).abs() < 1e-10);
    }

    #[test]
    fn readout_label_out_of_range() {
        let readout = ReadoutParams::zeros(3, 2);
        let stream = vec![0.0; 2];
        let err = readout_and_loss(&readout, &stream, 1, 1, &[3]).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 3, .. }));
    }

    #[test]
    fn time_accumulation_linearity() {
        let mut readout = ReadoutParams::zeros(2, 3);
        for (i, v) in readout.w_out.iter_mut().enumerate() {
            *v = (i as f64 + 1.0) * 0.1;
        }
        let stream: Vec<f64> = (0..4 * 3).map(|i| (i as f64 * 0.37).sin()).collect();
        let logits = readout_logits(&readout, &stream, 1, 4);
        // sum of per-step readouts
        let mut want = [0.0; 2];
        for t in 0..4 {
            let slice = &stream[t * 3..(t + 1) * 3];
            for c in 0..2 {
                for k in 0..3 {
                    want[c] += readout.w_out[c * 3 + k] * slice[k];
                }
            }
        }
        for c in 0..2 {
            assert!((logits[c] - want[c]).abs() < 1e-10);
        }
    }

    #[test]
    fn init_is_seeded_and_deterministic() {
        let a = Network::init(small_spec(), 11).unwrap();
        let b = Network::init(small_spec(), 11).unwrap();
        let c = Network::init(small_spec(), 12).unwrap();
        for ((ma, da), (_, db)) in a.param_segments().iter().zip(b.param_segments().iter()) {
            assert_eq!(da, db, "{}", ma.name());
        }
        let differs = a
            .param_segments()
            .iter()
            .zip(c.param_segments().iter())
            .any(|((_, da), (_, dc))| da != dc);
        assert!(differs);
    }

    #[test]
    fn segment_order_is_canonical() {
        let net = Network::init(small_spec(), 1).unwrap();
        let metas = net.segment_metas();
        assert_eq!(metas.len(), 2 * LAYER_SEG_COUNT + 1);
        assert_eq!(metas[0].kind, SegKind::W);
        assert_eq!(
            seg_index(Some(1), SegKind::CRe, 2),
            LAYER_SEG_COUNT + SegKind::CRe.layer_offset()
        );
        assert_eq!(metas.last().unwrap().kind, SegKind::Readout);
        // B is frozen by default and belongs to the ssm group
        let b_meta = &metas[seg_index(Some(0), SegKind::BRe, 2)];
        assert!(!b_meta.trainable);
        assert_eq!(b_meta.group, ParamGroup::Ssm);
        assert_eq!(metas[0].group, ParamGroup::Others);
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = std::env::temp_dir().join(format!("ckpt_test_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let mut net = Network::init(small_spec(), 3).unwrap();
        net.layers[0].bn.running_mean[0] = 0.25;
        net.version = 17;
        let m = SegmentStore::zeros_like(&net);
        let mut v = SegmentStore::zeros_like(&net);
        v.get_mut(Some(0), SegKind::W)[0] = 0.5;
        let extras = CheckpointExtras {
            optimizer: Some((42, &m, &v)),
            rng_seeds: &[7, 9],
        };
        save_checkpoint(&path, &net, &extras).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.network.spec, net.spec);
        assert_eq!(loaded.network.version, 17);
        assert_eq!(loaded.rng_seeds, vec![7, 9]);
        let (step, lm, lv) = loaded.optimizer.as_ref().unwrap();
        assert_eq!(*step, 42);
        assert_eq!(lm, &m);
        assert_eq!(lv, &v);
        for ((ma, da), (_, db)) in net
            .param_segments()
            .iter()
            .zip(loaded.network.param_segments().iter())
        {
            assert_eq!(da, db, "{}", ma.name());
        }
        assert_eq!(
            loaded.network.layers[0].bn.running_mean,
            net.layers[0].bn.running_mean
        );

        // byte-identical on re-save
        let path2 = dir.join("model2.ckpt");
        let extras2 = CheckpointExtras {
            optimizer: Some((42, lm, lv)),
            rng_seeds: &loaded.rng_seeds,
        };
        save_checkpoint(&path2, &loaded.network, &extras2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn checkpoint_detects_corruption() {
        let dir = std::env::temp_dir().join(format!("ckpt_corrupt_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let net = Network::init(small_spec(), 3).unwrap();
        save_checkpoint(&path, &net, &CheckpointExtras::default()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n / 2] ^= 1;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Integrity { .. })
        ));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn clip_eigenvalues_bounds_modulus() {
        let mut net = Network::init(small_spec(), 1).unwrap();
        net.layers[0].neurons.lambda.set(0, Cpx::new(3.0, 4.0));
        let clipped = net.clip_eigenvalues();
        assert_eq!(clipped, 1);
        assert!(net.max_eigenvalue_modulus() <= 1.0 + 1e-12);
        let lam = net.layers[0].neurons.lambda.get(0);
        assert!((lam.re - 0.6).abs() < 1e-12 && (lam.im - 0.8).abs() < 1e-12);
    }

    #[test]
    fn layer_forward_zero_weights_depends_on_bias_only() {
        let spec = small_spec();
        let ls = &spec.layers[0];
        let mut neurons = NeuronLayerParams::zeros(ls.h, ls.n, ls.n_in, ls.n_out);
        neurons.c_bias = vec![1.5, -0.2];
        let bn = BatchNormState::new(ls.channels_in(), 0.1, 1e-5);
        let w = vec![0.0; ls.channels_in() * 5];
        let act = ActivationKind::non_signed_spike();
        let input = vec![3.0; 4 * 5];
        let out = layer_forward(&w, &bn, &neurons, ls.transition, &act, &input, 4).unwrap();
        for t in 0..4 {
            assert_eq!(out[t * 2], 1.0); // bias 1.5 >= theta 1
            assert_eq!(out[t * 2 + 1], 0.0);
        }
    }

    #[test]
    fn layer_forward_matches_scalar_hand_unroll() {
        // h=1, n=1, T=3, diagonal, everything scalar
        let mut neurons = NeuronLayerParams::zeros(1, 1, 1, 1);
        neurons.lambda.set(0, Cpx::new(0.5, 0.0));
        neurons.b.set(0, Cpx::new(1.0, 0.0));
        neurons.c.set(0, Cpx::new(2.0, 0.0));
        neurons.c_bias[0] = 0.1;
        let mut bn = BatchNormState::new(1, 0.1, 1e-5);
        bn.gamma[0] = 2.0;
        bn.beta[0] = 0.5;
        bn.running_mean[0] = 0.1;
        bn.running_var[0] = 4.0;
        let w = vec![0.25];
        let act = ActivationKind::non_signed_spike();
        let input = vec![1.0, 2.0, 3.0];
        let out = layer_forward(
            &w,
            &bn,
            &neurons,
            TransitionKind::Diagonal,
            &act,
            &input,
            3,
        )
        .unwrap();

        // scalar reference
        let mut v = 0.0f64;
        let mut want = Vec::new();
        for &x in &input {
            let i_raw = 0.25 * x;
            let i_bn = (i_raw - 0.1) / (4.0f64 + 1e-5).sqrt() * 2.0 + 0.5;
            let y = 2.0 * v + 0.1;
            want.push(if y >= 1.0 { 1.0 } else { 0.0 });
            v = 0.5 * v + i_bn;
        }
        assert_eq!(out, want);
    }

    #[test]
    fn layer_forward_is_deterministic() {
        let spec = small_spec();
        let ls = &spec.layers[0];
        let net = Network::init(spec.clone(), 5).unwrap();
        let layer = &net.layers[0];
        let act = ActivationKind::signed_spike();
        let input: Vec<f64> = (0..6 * 5).map(|i| (i as f64 * 0.3).sin()).collect();
        let a = layer_forward(
            &layer.w,
            &layer.bn,
            &layer.neurons,
            ls.transition,
            &act,
            &input,
            6,
        )
        .unwrap();
        let b = layer_forward(
            &layer.w,
            &layer.bn,
            &layer.neurons,
            ls.transition,
            &act,
            &input,
            6,
        )
        .unwrap();
        assert_eq!(a, b);
    }
}
