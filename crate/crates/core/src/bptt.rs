//! Reverse-mode differentiation through the unrolled layer recurrences.
//!
//! The forward pass records a tape of per-layer streams (pre-normalization
//! currents, pre-activation outputs, spike streams, dropout masks) and the
//! backward pass walks the layers in reverse, substituting the surrogate
//! derivative at every spike nonlinearity. Complex parameters are
//! differentiated as independent (re, im) real pairs, which makes the
//! adjoint of a complex-linear map its conjugate transpose and keeps every
//! gradient directly comparable against finite differences.
//!
//! Neuron state trajectories are not stored on the tape; the backward pass
//! recomputes them per (sample, neuron) from the recorded currents, so tape
//! memory stays proportional to the streams already needed elsewhere.

use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::data::SpikeBatch;
use crate::error::{Error, Result};
use crate::network::{
    readout_logits, softmax_ce_and_grad, Network, ParamGroup, SegKind, SegmentStore,
};
use crate::neurons::{DftBasis, LayerRunner, LayerState, TransitionKind};
use crate::numkit::Cpx;

/// Gradient storage congruent with the network's parameter segments.
pub type Gradients = SegmentStore;

/// How activations are evaluated in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    /// True spike steps (or GELU).
    Exact,
    /// Each spike step replaced by the primitive ramp of its surrogate;
    /// used by gradient checks so finite differences see a function whose
    /// exact derivative is the surrogate.
    Smoothed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    Train,
    Eval,
}

/// Recorded forward quantities for one layer.
#[derive(Clone, Debug)]
pub struct LayerTape {
    /// Currents before batch norm, `batch x T x (h*n_in)`.
    pub pre_bn: Vec<f64>,
    /// Statistics the normalization actually used.
    pub bn_mean: Vec<f64>,
    pub bn_var: Vec<f64>,
    pub bn_frozen: bool,
    /// Pre-activation outputs, `batch x T x (h*n_out)`.
    pub y: Vec<f64>,
    /// Post-activation, post-dropout stream fed to the next layer.
    pub spikes: Vec<f64>,
    /// 0/1 keep mask, present only when dropout was applied.
    pub dropout_mask: Option<Vec<u8>>,
    /// Fraction of nonzero activations before dropout.
    pub spike_rate: f64,
}

/// Everything the adjoint pass needs to reproduce the forward computation.
#[derive(Clone, Debug)]
pub struct Tape {
    pub net_version: u64,
    pub batch: usize,
    pub t_len: usize,
    pub act_mode: ActMode,
    pub input: Vec<f64>,
    pub layers: Vec<LayerTape>,
    pub labels: Vec<u16>,
    pub logits: Vec<f64>,
    pub loss: f64,
}

pub struct ForwardOutput {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub tape: Option<Tape>,
}

/// Run all layers over the full sequence. Train mode records a tape and
/// updates batch-norm running statistics; eval mode uses running statistics
/// and applies no dropout.
pub fn forward_unroll(
    net: &mut Network,
    batch: &SpikeBatch,
    mode: RunMode,
    act_mode: ActMode,
    rng: &mut ChaCha12Rng,
) -> Result<ForwardOutput> {
    match mode {
        RunMode::Train => {
            let (loss, logits, tape) = forward_train(net, batch, act_mode, rng)?;
            Ok(ForwardOutput {
                loss,
                logits,
                tape: Some(tape),
            })
        }
        RunMode::Eval => {
            let (loss, logits) = forward_eval(net, batch)?;
            Ok(ForwardOutput {
                loss,
                logits,
                tape: None,
            })
        }
    }
}

fn input_as_f64(batch: &SpikeBatch) -> Vec<f64> {
    batch.counts.iter().map(|&c| c as f64).collect()
}

fn check_batch(net: &Network, batch: &SpikeBatch) -> Result<()> {
    if batch.channels != net.spec.input_dim {
        return Err(Error::InvalidDimension(format!(
            "batch has {} channels, network expects {}",
            batch.channels, net.spec.input_dim
        )));
    }
    if batch.t_len == 0 || batch.batch == 0 {
        return Err(Error::InvalidDimension("empty batch".into()));
    }
    Ok(())
}

/// Dense layer input: `out[s,t,r] = sum_c w[r,c] * stream[s,t,c]`.
fn dense_forward(
    w: &[f64],
    rows: usize,
    prev_width: usize,
    stream: &[f64],
    batch: usize,
    t_len: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * t_len * rows];
    out.par_chunks_mut(t_len * rows)
        .enumerate()
        .for_each(|(s, out_s)| {
            for t in 0..t_len {
                let x = &stream[(s * t_len + t) * prev_width..(s * t_len + t + 1) * prev_width];
                let o = &mut out_s[t * rows..(t + 1) * rows];
                for r in 0..rows {
                    let mut acc = 0.0;
                    for (wv, xv) in w[r * prev_width..(r + 1) * prev_width].iter().zip(x.iter()) {
                        acc += wv * xv;
                    }
                    o[r] = acc;
                }
            }
        });
    out
}

/// Neuron-bank recurrence over the whole batch: writes `y` and reports the
/// first non-finite step if the state diverges.
fn bank_forward(
    runner: &LayerRunner,
    post_bn: &[f64],
    batch: usize,
    t_len: usize,
    layer_idx: usize,
) -> Result<Vec<f64>> {
    let (h, n, n_in, n_out) = runner.dims();
    let ch_in = h * n_in;
    let ch_out = h * n_out;
    let mut y = vec![0.0; batch * t_len * ch_out];
    y.par_chunks_mut(t_len * ch_out)
        .enumerate()
        .try_for_each(|(s, y_s)| {
            let mut state = LayerState::zeros(h, n);
            for t in 0..t_len {
                let input = &post_bn[(s * t_len + t) * ch_in..(s * t_len + t + 1) * ch_in];
                let y_t = &mut y_s[t * ch_out..(t + 1) * ch_out];
                runner.step(&mut state, input, y_t);
                if y_t.iter().any(|v| !v.is_finite()) {
                    return Err(Error::DivergedState {
                        layer: layer_idx,
                        step: t,
                    });
                }
            }
            if !state.is_finite() {
                return Err(Error::DivergedState {
                    layer: layer_idx,
                    step: t_len - 1,
                });
            }
            Ok(())
        })?;
    Ok(y)
}

pub fn forward_train(
    net: &mut Network,
    batch: &SpikeBatch,
    act_mode: ActMode,
    rng: &mut ChaCha12Rng,
) -> Result<(f64, Vec<f64>, Tape)> {
    use rand::Rng;
    check_batch(net, batch)?;
    if batch.batch < 2 {
        return Err(Error::DegenerateBatch(batch.batch));
    }
    let (b, t_len) = (batch.batch, batch.t_len);
    let rows_total = b * t_len;
    let input = input_as_f64(batch);
    let runners = net.runners()?;
    let dropout_p = net.spec.dropout_p;
    let num_layers = net.layers.len();

    let mut layer_tapes: Vec<LayerTape> = Vec::with_capacity(num_layers);
    for l in 0..num_layers {
        let ls = net.spec.layers[l].clone();
        let prev_width = net.spec.prev_width(l);
        let ch_in = ls.channels_in();

        let pre_bn = {
            let prev_stream: &[f64] = if l == 0 {
                &input
            } else {
                &layer_tapes[l - 1].spikes
            };
            dense_forward(&net.layers[l].w, ch_in, prev_width, prev_stream, b, t_len)
        };

        let mut post_bn = pre_bn.clone();
        let stats = net.layers[l]
            .bn
            .normalize_train(&mut post_bn, rows_total, b)?;
        let bn_frozen = net.layers[l].bn.frozen;

        let y = bank_forward(&runners[l], &post_bn, b, t_len, l)?;

        let act = &ls.activation;
        let mut spikes: Vec<f64> = y
            .par_iter()
            .map(|&v| match act_mode {
                ActMode::Exact => act.apply_scalar(v),
                ActMode::Smoothed => act.smoothed_scalar(v),
            })
            .collect();
        let nonzero = spikes.iter().filter(|&&s| s != 0.0).count();
        let spike_rate = nonzero as f64 / spikes.len() as f64;

        let dropout_mask = if dropout_p > 0.0 {
            let keep = 1.0 - dropout_p;
            let scale = 1.0 / keep;
            let mask: Vec<u8> = (0..spikes.len())
                .map(|_| (rng.random::<f64>() < keep) as u8)
                .collect();
            for (s, m) in spikes.iter_mut().zip(mask.iter()) {
                *s = if *m == 1 { *s * scale } else { 0.0 };
            }
            Some(mask)
        } else {
            None
        };

        layer_tapes.push(LayerTape {
            pre_bn,
            bn_mean: stats.mean,
            bn_var: stats.var,
            bn_frozen,
            y,
            spikes,
            dropout_mask,
            spike_rate,
        });
    }

    let last_stream = &layer_tapes[num_layers - 1].spikes;
    let logits = readout_logits(&net.readout, last_stream, b, t_len);
    let (loss, _) = softmax_ce_and_grad(&logits, &batch.labels, b, net.spec.num_classes)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }

    let tape = Tape {
        net_version: net.version,
        batch: b,
        t_len,
        act_mode,
        input,
        layers: layer_tapes,
        labels: batch.labels.clone(),
        logits: logits.clone(),
        loss,
    };
    Ok((loss, logits, tape))
}

/// Eval-mode pass: running batch-norm statistics, no dropout, no tape.
pub fn forward_eval(net: &Network, batch: &SpikeBatch) -> Result<(f64, Vec<f64>)> {
    check_batch(net, batch)?;
    let (b, t_len) = (batch.batch, batch.t_len);
    let runners = net.runners()?;
    let mut stream = input_as_f64(batch);
    for l in 0..net.layers.len() {
        let ls = &net.spec.layers[l];
        let prev_width = net.spec.prev_width(l);
        let mut current = dense_forward(&net.layers[l].w, ls.channels_in(), prev_width, &stream, b, t_len);
        net.layers[l].bn.normalize_eval(&mut current, b * t_len);
        let y = bank_forward(&runners[l], &current, b, t_len, l)?;
        let act = &ls.activation;
        stream = y.par_iter().map(|&v| act.apply_scalar(v)).collect();
    }
    let logits = readout_logits(&net.readout, &stream, b, t_len);
    let (loss, _) = softmax_ce_and_grad(&logits, &batch.labels, b, net.spec.num_classes)?;
    Ok((loss, logits))
}

/// Eval-mode classification accuracy.
pub fn accuracy_from_logits(logits: &[f64], labels: &[u16], classes: usize) -> f64 {
    let batch = labels.len();
    let mut correct = 0usize;
    for s in 0..batch {
        let row = &logits[s * classes..(s + 1) * classes];
        let mut best = 0usize;
        for c in 1..classes {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == labels[s] as usize {
            correct += 1;
        }
    }
    correct as f64 / batch as f64
}

/// Per-(sample-chunk) accumulators for one layer's neuron parameters.
struct NeuronPartial {
    d_lambda: Vec<Cpx>,
    /// Gradient with respect to the eigenbasis output map `C Q^H`.
    d_cw: Vec<Cpx>,
    /// Gradient with respect to the eigenbasis input map `Q B`.
    d_bw: Option<Vec<Cpx>>,
}

impl NeuronPartial {
    fn zeros(h: usize, n: usize, n_in: usize, n_out: usize, with_b: bool) -> Self {
        NeuronPartial {
            d_lambda: vec![Cpx::ZERO; h * n],
            d_cw: vec![Cpx::ZERO; h * n_out * n],
            d_bw: with_b.then(|| vec![Cpx::ZERO; h * n * n_in]),
        }
    }

    fn merge(&mut self, other: &NeuronPartial) {
        for (a, b) in self.d_lambda.iter_mut().zip(other.d_lambda.iter()) {
            *a += *b;
        }
        for (a, b) in self.d_cw.iter_mut().zip(other.d_cw.iter()) {
            *a += *b;
        }
        if let (Some(a), Some(b)) = (self.d_bw.as_mut(), other.d_bw.as_ref()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += *y;
            }
        }
    }
}

/// Adjoint pass over a recorded tape. Returns gradients for every
/// parameter segment (non-trainable segments are left at zero).
pub fn backward_unroll(tape: &Tape, net: &Network) -> Result<Gradients> {
    if tape.net_version != net.version {
        return Err(Error::StaleTape {
            tape_version: tape.net_version,
            net_version: net.version,
        });
    }
    check_tape_shape(tape, net)?;
    let (b, t_len) = (tape.batch, tape.t_len);
    let rows_total = b * t_len;
    let classes = net.spec.num_classes;
    let runners = net.runners()?;
    let mut grads = Gradients::zeros_like(net);

    let (_, dlogits) = softmax_ce_and_grad(&tape.logits, &tape.labels, b, classes)?;

    // readout: logits[s] = W_out . sum_t spikes[s,t]
    let last = net.layers.len() - 1;
    let width = net.readout.width;
    let last_stream = &tape.layers[last].spikes;
    let mut acc = vec![0.0; b * width];
    for s in 0..b {
        for t in 0..t_len {
            let row = &last_stream[(s * t_len + t) * width..(s * t_len + t + 1) * width];
            let a = &mut acc[s * width..(s + 1) * width];
            for (av, rv) in a.iter_mut().zip(row.iter()) {
                *av += rv;
            }
        }
    }
    {
        let d_wout = grads.get_mut(None, SegKind::Readout);
        d_wout
            .par_chunks_mut(width)
            .enumerate()
            .for_each(|(c, row)| {
                for s in 0..b {
                    let g = dlogits[s * classes + c];
                    if g != 0.0 {
                        for (rv, av) in row.iter_mut().zip(&acc[s * width..(s + 1) * width]) {
                            *rv += g * av;
                        }
                    }
                }
            });
    }
    // d/d(stream) is time-independent: broadcast of W_out^T dlogits
    let mut d_acc = vec![0.0; b * width];
    d_acc.par_chunks_mut(width).enumerate().for_each(|(s, row)| {
        for c in 0..classes {
            let g = dlogits[s * classes + c];
            if g != 0.0 {
                for (rv, wv) in row.iter_mut().zip(&net.readout.w_out[c * width..(c + 1) * width])
                {
                    *rv += g * wv;
                }
            }
        }
    });
    let mut d_stream: Vec<f64> = vec![0.0; b * t_len * width];
    d_stream
        .par_chunks_mut(t_len * width)
        .enumerate()
        .for_each(|(s, out_s)| {
            for t in 0..t_len {
                out_s[t * width..(t + 1) * width].copy_from_slice(&d_acc[s * width..(s + 1) * width]);
            }
        });

    for l in (0..net.layers.len()).rev() {
        let ls = &net.spec.layers[l];
        let lt = &tape.layers[l];
        let runner = &runners[l];
        let (h, n, n_in, n_out) = runner.dims();
        let ch_in = h * n_in;
        let ch_out = h * n_out;
        let prev_width = net.spec.prev_width(l);
        let act = &ls.activation;
        let train_b = net.layers[l].neurons.trainable.b;

        // dropout and surrogate substitution: d_stream -> d_y
        let keep_scale = 1.0 / (1.0 - net.spec.dropout_p);
        let g_y: Vec<f64> = (0..d_stream.len())
            .into_par_iter()
            .map(|idx| {
                let mut g = d_stream[idx];
                if let Some(mask) = &lt.dropout_mask {
                    g = if mask[idx] == 1 { g * keep_scale } else { 0.0 };
                }
                g * act.surrogate_scalar(lt.y[idx])
            })
            .collect();

        // bias gradient: plain per-channel sum
        if net.layers[l].neurons.trainable.c_bias {
            let d_bias = grads.get_mut(Some(l), SegKind::CBias);
            d_bias.par_iter_mut().enumerate().for_each(|(ch, out)| {
                let mut acc = 0.0;
                for row in 0..rows_total {
                    acc += g_y[row * ch_out + ch];
                }
                *out = acc;
            });
        }

        // reconstruct the normalized currents the recurrence consumed
        let mut post_bn = lt.pre_bn.clone();
        apply_recorded_bn(&net.layers[l].bn, lt, &mut post_bn, rows_total);

        // adjoint recurrence per sample chunk, neurons inner
        let chunk = b.div_ceil(8).max(1);
        let sample_ids: Vec<usize> = (0..b).collect();
        let mut d_postbn = vec![0.0; b * t_len * ch_in];
        let partials: Vec<NeuronPartial> = {
            let d_postbn_chunks: Vec<&mut [f64]> =
                d_postbn.chunks_mut(chunk * t_len * ch_in).collect();
            sample_ids
                .par_chunks(chunk)
                .zip(d_postbn_chunks)
                .map(|(samples, d_post_out)| {
                    let mut part = NeuronPartial::zeros(h, n, n_in, n_out, train_b);
                    let mut w_traj = vec![Cpx::ZERO; t_len * n];
                    let mut a_state = vec![Cpx::ZERO; n];
                    let base = samples[0];
                    for &s in samples {
                        for j in 0..h {
                            let lam = runner.lambda_neuron(j);
                            let qb = runner.qb_neuron(j);
                            let cqh = runner.cqh_neuron(j);
                            // forward recomputation of the eigenbasis states
                            let mut w = vec![Cpx::ZERO; n];
                            for t in 0..t_len {
                                w_traj[t * n..(t + 1) * n].copy_from_slice(&w);
                                let i_t = &post_bn[(s * t_len + t) * ch_in + j * n_in
                                    ..(s * t_len + t) * ch_in + (j + 1) * n_in];
                                for k in 0..n {
                                    let mut u = Cpx::ZERO;
                                    for (qv, iv) in
                                        qb[k * n_in..(k + 1) * n_in].iter().zip(i_t.iter())
                                    {
                                        u += qv.scale(*iv);
                                    }
                                    w[k] = lam[k] * w[k] + u;
                                }
                            }
                            // adjoint walk; `a` holds dL/dw[t+1]
                            a_state.iter_mut().for_each(|v| *v = Cpx::ZERO);
                            for t in (0..t_len).rev() {
                                let w_t = &w_traj[t * n..(t + 1) * n];
                                let i_t = &post_bn[(s * t_len + t) * ch_in + j * n_in
                                    ..(s * t_len + t) * ch_in + (j + 1) * n_in];
                                let g_row = &g_y[(s * t_len + t) * ch_out + j * n_out
                                    ..(s * t_len + t) * ch_out + (j + 1) * n_out];
                                // parameter contributions through w[t+1]
                                for k in 0..n {
                                    let a_k = a_state[k];
                                    part.d_lambda[j * n + k] += a_k * w_t[k].conj();
                                }
                                if let Some(d_bw) = part.d_bw.as_mut() {
                                    for k in 0..n {
                                        let a_k = a_state[k];
                                        for (m, iv) in i_t.iter().enumerate() {
                                            d_bw[(j * n + k) * n_in + m] += a_k.scale(*iv);
                                        }
                                    }
                                }
                                // input gradient: Re((QB)^H a[t+1])
                                let d_i = &mut d_post_out[((s - base) * t_len + t) * ch_in
                                    + j * n_in
                                    ..((s - base) * t_len + t) * ch_in + (j + 1) * n_in];
                                for (m, d_im) in d_i.iter_mut().enumerate() {
                                    let mut g = 0.0;
                                    for k in 0..n {
                                        let qv = qb[k * n_in + m];
                                        let a_k = a_state[k];
                                        // Re(conj(qv) * a_k)
                                        g += qv.re * a_k.re + qv.im * a_k.im;
                                    }
                                    *d_im = g;
                                }
                                // observation path at step t
                                for k in 0..n {
                                    let mut back = a_state[k] * lam[k].conj();
                                    for (o, g) in g_row.iter().enumerate() {
                                        if *g != 0.0 {
                                            let gy = Cpx::new(*g, *g);
                                            let cv = cqh[o * n + k];
                                            back += cv.conj() * gy;
                                            part.d_cw[(j * n_out + o) * n + k] +=
                                                gy * w_t[k].conj();
                                        }
                                    }
                                    a_state[k] = back;
                                }
                            }
                        }
                    }
                    part
                })
                .collect()
        };
        let mut total = NeuronPartial::zeros(h, n, n_in, n_out, train_b);
        for p in &partials {
            total.merge(p);
        }
        store_neuron_grads(&mut grads, l, ls.transition, net, &total)?;

        // batch-norm backward: d_postbn -> d_prebn (+ gamma/beta grads)
        let d_prebn = bn_backward(&net.layers[l].bn, lt, &d_postbn, rows_total, &mut grads, l);

        // dense weight backward
        {
            let prev_stream: &[f64] = if l == 0 {
                &tape.input
            } else {
                &tape.layers[l - 1].spikes
            };
            let d_w = grads.get_mut(Some(l), SegKind::W);
            d_w.par_chunks_mut(prev_width)
                .enumerate()
                .for_each(|(r, row)| {
                    for idx in 0..rows_total {
                        let g = d_prebn[idx * ch_in + r];
                        if g != 0.0 {
                            let x = &prev_stream[idx * prev_width..(idx + 1) * prev_width];
                            for (rv, xv) in row.iter_mut().zip(x.iter()) {
                                *rv += g * xv;
                            }
                        }
                    }
                });
            if l > 0 {
                let w = &net.layers[l].w;
                let mut next = vec![0.0; b * t_len * prev_width];
                next.par_chunks_mut(prev_width).enumerate().for_each(|(idx, out)| {
                    for r in 0..ch_in {
                        let g = d_prebn[idx * ch_in + r];
                        if g != 0.0 {
                            for (ov, wv) in
                                out.iter_mut().zip(&w[r * prev_width..(r + 1) * prev_width])
                            {
                                *ov += g * wv;
                            }
                        }
                    }
                });
                d_stream = next;
            }
        }
    }

    Ok(grads)
}

fn check_tape_shape(tape: &Tape, net: &Network) -> Result<()> {
    if tape.layers.len() != net.layers.len() {
        return Err(Error::InvalidDimension(format!(
            "tape has {} layers, network has {}",
            tape.layers.len(),
            net.layers.len()
        )));
    }
    Ok(())
}

/// Re-apply the recorded normalization to recover the post-BN currents.
fn apply_recorded_bn(
    bn: &crate::network::BatchNormState,
    lt: &LayerTape,
    x: &mut [f64],
    rows: usize,
) {
    let channels = bn.channels();
    let mut scale = vec![0.0; channels];
    let mut shift = vec![0.0; channels];
    for c in 0..channels {
        let inv_std = 1.0 / (lt.bn_var[c] + bn.epsilon).sqrt();
        scale[c] = bn.gamma[c] * inv_std;
        shift[c] = bn.beta[c] - lt.bn_mean[c] * scale[c];
    }
    x.par_chunks_mut(channels).with_min_len(rows / 64 + 1).for_each(|row| {
        for c in 0..channels {
            row[c] = row[c] * scale[c] + shift[c];
        }
    });
}

/// Standard batch-norm backward over jointly normalized rows. When the
/// statistics were frozen they are constants, so the centering terms drop.
fn bn_backward(
    bn: &crate::network::BatchNormState,
    lt: &LayerTape,
    d_post: &[f64],
    rows: usize,
    grads: &mut Gradients,
    layer: usize,
) -> Vec<f64> {
    let channels = bn.channels();
    let inv_rows = 1.0 / rows as f64;
    let mut d_pre = vec![0.0; d_post.len()];
    let mut d_gamma = vec![0.0; channels];
    let mut d_beta = vec![0.0; channels];

    let results: Vec<(f64, f64)> = (0..channels)
        .into_par_iter()
        .map(|c| {
            let inv_std = 1.0 / (lt.bn_var[c] + bn.epsilon).sqrt();
            let mean = lt.bn_mean[c];
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for r in 0..rows {
                let g = d_post[r * channels + c];
                let xhat = (lt.pre_bn[r * channels + c] - mean) * inv_std;
                sum_g += g;
                sum_gx += g * xhat;
            }
            (sum_g, sum_gx)
        })
        .collect();
    for c in 0..channels {
        d_beta[c] = results[c].0;
        d_gamma[c] = results[c].1;
    }

    d_pre
        .par_chunks_mut(channels)
        .enumerate()
        .for_each(|(r, out)| {
            for c in 0..channels {
                let inv_std = 1.0 / (lt.bn_var[c] + bn.epsilon).sqrt();
                let g = d_post[r * channels + c];
                if lt.bn_frozen {
                    out[c] = bn.gamma[c] * inv_std * g;
                } else {
                    let (sum_g, sum_gx) = results[c];
                    let xhat = (lt.pre_bn[r * channels + c] - lt.bn_mean[c]) * inv_std;
                    out[c] = bn.gamma[c]
                        * inv_std
                        * (g - sum_g * inv_rows - xhat * sum_gx * inv_rows);
                }
            }
        });

    grads
        .get_mut(Some(layer), SegKind::BnGamma)
        .copy_from_slice(&d_gamma);
    grads
        .get_mut(Some(layer), SegKind::BnBeta)
        .copy_from_slice(&d_beta);
    d_pre
}

/// Map eigenbasis accumulators back to the parameter basis and store them.
fn store_neuron_grads(
    grads: &mut Gradients,
    layer: usize,
    kind: TransitionKind,
    net: &Network,
    total: &NeuronPartial,
) -> Result<()> {
    let p = &net.layers[layer].neurons;
    let (h, n, n_in, n_out) = (p.h, p.n, p.n_in, p.n_out);

    if p.trainable.lambda {
        let re = grads.get_mut(Some(layer), SegKind::LambdaRe);
        for (idx, v) in total.d_lambda.iter().enumerate() {
            re[idx] = v.re;
        }
        let im = grads.get_mut(Some(layer), SegKind::LambdaIm);
        for (idx, v) in total.d_lambda.iter().enumerate() {
            im[idx] = v.im;
        }
    }

    if p.trainable.c {
        // C = (C Q^H) Q; Q symmetric, so each accumulator row maps through Q
        let d_c: Vec<Cpx> = match kind {
            TransitionKind::Diagonal => total.d_cw.clone(),
            TransitionKind::NonDiagonalDft => {
                let basis = DftBasis::new(n)?;
                let mut out = vec![Cpx::ZERO; total.d_cw.len()];
                let mut row = vec![Cpx::ZERO; n];
                for jo in 0..h * n_out {
                    row.copy_from_slice(&total.d_cw[jo * n..(jo + 1) * n]);
                    basis.apply_q(&mut row);
                    out[jo * n..(jo + 1) * n].copy_from_slice(&row);
                }
                out
            }
        };
        let re = grads.get_mut(Some(layer), SegKind::CRe);
        for (idx, v) in d_c.iter().enumerate() {
            re[idx] = v.re;
        }
        let im = grads.get_mut(Some(layer), SegKind::CIm);
        for (idx, v) in d_c.iter().enumerate() {
            im[idx] = v.im;
        }
    }

    if let Some(d_bw) = &total.d_bw {
        // B = Q^H (Q B); accumulator columns map through Q^H
        let d_b: Vec<Cpx> = match kind {
            TransitionKind::Diagonal => d_bw.clone(),
            TransitionKind::NonDiagonalDft => {
                let basis = DftBasis::new(n)?;
                let mut out = vec![Cpx::ZERO; d_bw.len()];
                let mut col = vec![Cpx::ZERO; n];
                for j in 0..h {
                    for m in 0..n_in {
                        for k in 0..n {
                            col[k] = d_bw[(j * n + k) * n_in + m];
                        }
                        basis.apply_qh(&mut col);
                        for k in 0..n {
                            out[(j * n + k) * n_in + m] = col[k];
                        }
                    }
                }
                out
            }
        };
        let re = grads.get_mut(Some(layer), SegKind::BRe);
        for (idx, v) in d_b.iter().enumerate() {
            re[idx] = v.re;
        }
        let im = grads.get_mut(Some(layer), SegKind::BIm);
        for (idx, v) in d_b.iter().enumerate() {
            im[idx] = v.im;
        }
    }

    Ok(())
}

/// Default central-difference step for gradient checks.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SegmentReport {
    pub name: String,
    pub group: ParamGroup,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub backward_value: f64,
    pub fd_value: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub fd_step: f64,
    pub segments: Vec<SegmentReport>,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            out.push_str(&format!(
                "{:<22} {} max_rel_err={:.3e} worst_index={} (bp={:.6e}, fd={:.6e})\n",
                seg.name,
                if seg.pass { "PASS" } else { "FAIL" },
                seg.max_rel_err,
                seg.worst_index,
                seg.backward_value,
                seg.fd_value,
            ));
        }
        out.push_str(&format!(
            "overall: {}\n",
            if self.pass { "PASS" } else { "FAIL" }
        ));
        out
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Compare the adjoint gradients against central finite differences of the
/// smoothed forward pass, per trainable parameter segment.
///
/// Runs on a copy of the network with dropout disabled (the mask would be
/// resampled between probe evaluations). Intended for small networks.
pub fn grad_check(net: &Network, batch: &SpikeBatch, tolerance: f64) -> Result<GradCheckReport> {
    use rand::SeedableRng;
    let mut net = net.clone();
    net.spec.dropout_p = 0.0;
    let n_params: usize = net
        .segment_metas()
        .iter()
        .filter(|m| m.trainable)
        .map(|m| m.len)
        .sum();
    if n_params > 4096 {
        return Err(Error::Config(format!(
            "grad_check is restricted to small networks (<= 4096 trainable scalars, got {n_params})"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let (_, _, tape) = forward_train(&mut net, batch, ActMode::Smoothed, &mut rng)?;
    let grads = backward_unroll(&tape, &net)?;

    let metas = net.segment_metas();
    let mut segments = Vec::new();
    let mut all_pass = true;
    for (seg_idx, meta) in metas.iter().enumerate() {
        if !meta.trainable {
            continue;
        }
        let mut worst = SegmentReport {
            name: meta.name(),
            group: meta.group,
            max_rel_err: 0.0,
            worst_index: 0,
            backward_value: 0.0,
            fd_value: 0.0,
            pass: true,
        };
        for idx in 0..meta.len {
            let orig = net.param_segments()[seg_idx].1[idx];
            set_param(&mut net, seg_idx, idx, orig + FD_STEP);
            let loss_plus = probe_loss(&mut net, batch)?;
            set_param(&mut net, seg_idx, idx, orig - FD_STEP);
            let loss_minus = probe_loss(&mut net, batch)?;
            set_param(&mut net, seg_idx, idx, orig);
            let fd = (loss_plus - loss_minus) / (2.0 * FD_STEP);
            let bp = grads.segments[seg_idx].1[idx];
            let err = rel_err(bp, fd);
            if err > worst.max_rel_err {
                worst.max_rel_err = err;
                worst.worst_index = idx;
                worst.backward_value = bp;
                worst.fd_value = fd;
            }
        }
        worst.pass = worst.max_rel_err <= tolerance;
        all_pass &= worst.pass;
        segments.push(worst);
    }
    Ok(GradCheckReport {
        tolerance,
        fd_step: FD_STEP,
        segments,
        pass: all_pass,
    })
}

fn set_param(net: &mut Network, seg_idx: usize, idx: usize, value: f64) {
    net.param_segments_mut()[seg_idx].1[idx] = value;
    net.bump_version();
}

fn probe_loss(net: &mut Network, batch: &SpikeBatch) -> Result<f64> {
    use rand::SeedableRng;
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let (loss, _, _) = forward_train(net, batch, ActMode::Smoothed, &mut rng)?;
    Ok(loss)
}
