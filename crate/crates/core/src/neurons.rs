//! Forward dynamics for all neuron models: LIF, adaptive LIF, the general
//! n-dimensional spiking neuron, and the SSM neuron bank with multiple
//! input/output channels.
//!
//! SSM neurons evolve a complex state `v[t+1] = A v[t] + B i[t]` and emit
//! `y[t] = C v[t] + c_bias`, reduced to a real vector as `Re(y) + Im(y)`
//! before the activation. The state transition `A` is either diagonal or
//! `Q^H Lambda Q` with `Q` the unitary DFT matrix; in the latter case the
//! state is kept in the eigenbasis `w = Q v`, which makes every step a
//! diagonal update with the basis changes folded into the input and output
//! projections.

use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::error::{Error, Result};
use crate::numkit::{dft_matrix, matvec, CMat, Cpx, FftPlan};

/// Leak and threshold of the discrete-time LIF neuron.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LifParams {
    pub alpha: f64,
    pub theta: f64,
}

/// One LIF step. The spike is computed from the *current* membrane
/// potential; the reset uses the spike passed in from the previous step.
#[inline]
pub fn lif_step(p: &LifParams, u: f64, s_prev: f64, i: f64) -> (f64, f64) {
    let s = if u >= p.theta { 1.0 } else { 0.0 };
    let u_next = p.alpha * u - p.alpha * p.theta * s_prev + (1.0 - p.alpha) * i;
    (u_next, s)
}

/// Adaptive LIF parameters: leaks for membrane and recovery variable plus
/// the adaptation couplings.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdLifParams {
    pub alpha: f64,
    pub beta: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

/// One adLIF step over (membrane `u`, recovery `w`).
#[inline]
pub fn adlif_step(p: &AdLifParams, u: f64, w: f64, s_prev: f64, i: f64) -> (f64, f64, f64) {
    let s = if u >= p.theta { 1.0 } else { 0.0 };
    let u_next =
        p.alpha * u - (1.0 - p.alpha) * w - p.alpha * p.theta * s_prev + (1.0 - p.alpha) * i;
    let w_next = p.a * u + p.beta * w + p.b * s_prev;
    (u_next, w_next, s)
}

/// Spiking region of the general neuron: spike iff `weights . v >= threshold`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum ThetaRegion {
    HalfSpace { weights: Vec<f64>, threshold: f64 },
}

impl ThetaRegion {
    pub fn contains(&self, v: &[f64]) -> bool {
        match self {
            ThetaRegion::HalfSpace { weights, threshold } => {
                let mut acc = 0.0;
                for (w, x) in weights.iter().zip(v.iter()) {
                    acc += w * x;
                }
                acc >= *threshold
            }
        }
    }
}

/// General n-dimensional spiking neuron: `v[t+1] = A v - R s + B i`,
/// spike when the state lies in the threshold region.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneralNeuronParams {
    pub n: usize,
    /// Row-major n x n state transition.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub r: Vec<f64>,
    pub theta: ThetaRegion,
}

impl GeneralNeuronParams {
    /// LIF as the 1-dimensional special case.
    pub fn from_lif(p: &LifParams) -> Self {
        GeneralNeuronParams {
            n: 1,
            a: vec![p.alpha],
            b: vec![1.0 - p.alpha],
            r: vec![p.alpha * p.theta],
            theta: ThetaRegion::HalfSpace {
                weights: vec![1.0],
                threshold: p.theta,
            },
        }
    }

    /// adLIF as the 2-dimensional special case, with the recovery variable
    /// folded into the state.
    pub fn from_adlif(p: &AdLifParams) -> Self {
        GeneralNeuronParams {
            n: 2,
            a: vec![p.alpha, -(1.0 - p.alpha), p.a, p.beta],
            b: vec![1.0 - p.alpha, 0.0],
            // the update subtracts R s, so the spike coefficients negate
            r: vec![p.alpha * p.theta, -p.b],
            theta: ThetaRegion::HalfSpace {
                weights: vec![1.0, 0.0],
                threshold: p.theta,
            },
        }
    }
}

/// One step of the general neuron. Returns the next state and the spike
/// computed from the current state.
pub fn general_neuron_step(
    p: &GeneralNeuronParams,
    v: &[f64],
    s_prev: f64,
    i: f64,
) -> Result<(Vec<f64>, f64)> {
    let n = p.n;
    if v.len() != n || p.a.len() != n * n || p.b.len() != n || p.r.len() != n {
        return Err(Error::InvalidDimension(format!(
            "general neuron: n={n}, state={}, A={}, B={}, R={}",
            v.len(),
            p.a.len(),
            p.b.len(),
            p.r.len()
        )));
    }
    let s = if p.theta.contains(v) { 1.0 } else { 0.0 };
    let mut v_next = Vec::with_capacity(n);
    for row in 0..n {
        let mut acc = 0.0;
        for (a, x) in p.a[row * n..(row + 1) * n].iter().zip(v.iter()) {
            acc += a * x;
        }
        acc -= p.r[row] * s_prev;
        acc += p.b[row] * i;
        v_next.push(acc);
    }
    Ok((v_next, s))
}

/// Structure of the state transition matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionKind {
    /// `A = diag(lambda)`: state components evolve independently.
    Diagonal,
    /// `A = Q^H diag(lambda) Q` with `Q` the unitary DFT matrix.
    NonDiagonalDft,
}

/// Complex parameter tensor stored as separate real/imaginary planes so the
/// optimizer and gradient checks can treat every component as an
/// independent real parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CplxPlanes {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl CplxPlanes {
    pub fn zeros(len: usize) -> Self {
        CplxPlanes {
            re: vec![0.0; len],
            im: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    #[inline]
    pub fn get(&self, idx: usize) -> Cpx {
        Cpx::new(self.re[idx], self.im[idx])
    }

    #[inline]
    pub fn set(&mut self, idx: usize, v: Cpx) {
        self.re[idx] = v.re;
        self.im[idx] = v.im;
    }

    pub fn to_cpx_vec(&self) -> Vec<Cpx> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

/// Which parameter tensors of a neuron bank receive gradients.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainableFlags {
    pub lambda: bool,
    pub b: bool,
    pub c: bool,
    pub c_bias: bool,
}

impl Default for TrainableFlags {
    fn default() -> Self {
        // B stays fixed at all-ones unless explicitly enabled
        TrainableFlags {
            lambda: true,
            b: false,
            c: true,
            c_bias: true,
        }
    }
}

/// Parameters for a bank of `h` SSM neurons with shared dimensions.
///
/// Per neuron: `lambda` (n eigenvalues), `b` (n x n_in input map),
/// `c` (n_out x n output map), `c_bias` (n_out real bias).
#[derive(Clone, Debug)]
pub struct NeuronLayerParams {
    pub h: usize,
    pub n: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub lambda: CplxPlanes,
    pub b: CplxPlanes,
    pub c: CplxPlanes,
    pub c_bias: Vec<f64>,
    pub trainable: TrainableFlags,
}

impl NeuronLayerParams {
    /// All-zero parameter bank of the given dimensions.
    pub fn zeros(h: usize, n: usize, n_in: usize, n_out: usize) -> Self {
        NeuronLayerParams {
            h,
            n,
            n_in,
            n_out,
            lambda: CplxPlanes::zeros(h * n),
            b: CplxPlanes::zeros(h * n * n_in),
            c: CplxPlanes::zeros(h * n_out * n),
            c_bias: vec![0.0; h * n_out],
            trainable: TrainableFlags::default(),
        }
    }

    #[inline]
    pub fn lambda_at(&self, neuron: usize, k: usize) -> Cpx {
        self.lambda.get(neuron * self.n + k)
    }

    #[inline]
    pub fn b_at(&self, neuron: usize, k: usize, m: usize) -> Cpx {
        self.b.get((neuron * self.n + k) * self.n_in + m)
    }

    #[inline]
    pub fn c_at(&self, neuron: usize, o: usize, k: usize) -> Cpx {
        self.c.get((neuron * self.n_out + o) * self.n + k)
    }

    #[inline]
    pub fn c_bias_at(&self, neuron: usize, o: usize) -> f64 {
        self.c_bias[neuron * self.n_out + o]
    }
}

/// Complex state of a neuron bank for one batch element, kept in the
/// eigenbasis of the transition matrix.
#[derive(Clone, Debug)]
pub struct LayerState {
    pub h: usize,
    pub n: usize,
    pub w: Vec<Cpx>,
}

impl LayerState {
    pub fn zeros(h: usize, n: usize) -> Self {
        LayerState {
            h,
            n,
            w: vec![Cpx::ZERO; h * n],
        }
    }

    pub fn neuron(&self, j: usize) -> &[Cpx] {
        &self.w[j * self.n..(j + 1) * self.n]
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|v| v.is_finite())
    }
}

/// S4D-Lin eigenvalue initialization: continuous poles `-1/2 + i*pi*k`
/// mapped to the unit disk by the bilinear transform with per-pole
/// timescales drawn log-uniformly from `[dt_min, dt_max]`.
pub fn s4d_lin_init(n: usize, dt_min: f64, dt_max: f64, rng_seed: u64) -> Result<Vec<Cpx>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(rng_seed);
    s4d_lin_init_with(n, dt_min, dt_max, &mut rng)
}

pub fn s4d_lin_init_with(
    n: usize,
    dt_min: f64,
    dt_max: f64,
    rng: &mut impl rand::Rng,
) -> Result<Vec<Cpx>> {
    if n == 0 {
        return Err(Error::InvalidDimension("s4d_lin_init requires n >= 1".into()));
    }
    if !(dt_min > 0.0) || dt_min > dt_max {
        return Err(Error::Config(format!(
            "timescale range must satisfy 0 < dt_min <= dt_max, got [{dt_min}, {dt_max}]"
        )));
    }
    let (ln_lo, ln_hi) = (dt_min.ln(), dt_max.ln());
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let dt = (ln_lo + (ln_hi - ln_lo) * rng.random::<f64>()).exp();
        // pole a_k = -1/2 + i*pi*k, discretized as (1 + dt*a/2)/(1 - dt*a/2)
        let z = Cpx::new(-0.25 * dt, 0.5 * std::f64::consts::PI * k as f64 * dt);
        let lam = cdiv(Cpx::ONE + z, Cpx::ONE - z);
        debug_assert!(lam.modulus() < 1.0);
        out.push(lam);
    }
    Ok(out)
}

#[inline]
fn cdiv(a: Cpx, b: Cpx) -> Cpx {
    let d = b.norm_sqr();
    Cpx::new(
        (a.re * b.re + a.im * b.im) / d,
        (a.im * b.re - a.re * b.im) / d,
    )
}

/// Project every eigenvalue with modulus above 1 back onto the unit circle,
/// preserving phase. Applied after each optimizer step since the reset-free
/// recurrence has no other stability mechanism.
pub fn stability_clip(params: &mut NeuronLayerParams) {
    clip_to_unit_modulus(&mut params.lambda);
}

pub fn clip_to_unit_modulus(lambda: &mut CplxPlanes) {
    for idx in 0..lambda.len() {
        let re = lambda.re[idx];
        let im = lambda.im[idx];
        let m2 = re * re + im * im;
        if m2 > 1.0 {
            let s = 1.0 / m2.sqrt();
            lambda.re[idx] = re * s;
            lambda.im[idx] = im * s;
        }
    }
}

/// Initialize a neuron bank: S4D-Lin eigenvalues, all-ones real `B`,
/// standard-normal complex `C`, zero bias.
pub fn init_layer_params(
    h: usize,
    n: usize,
    n_in: usize,
    n_out: usize,
    dt_min: f64,
    dt_max: f64,
    trainable: TrainableFlags,
    rng: &mut impl rand::Rng,
) -> Result<NeuronLayerParams> {
    use rand_distr::{Distribution, StandardNormal};
    let mut params = NeuronLayerParams::zeros(h, n, n_in, n_out);
    params.trainable = trainable;
    for j in 0..h {
        let lam = s4d_lin_init_with(n, dt_min, dt_max, rng)?;
        for (k, l) in lam.into_iter().enumerate() {
            params.lambda.set(j * n + k, l);
        }
    }
    for idx in 0..params.b.len() {
        params.b.re[idx] = 1.0;
    }
    let normal = StandardNormal;
    for idx in 0..params.c.len() {
        params.c.re[idx] = normal.sample(rng);
        params.c.im[idx] = normal.sample(rng);
    }
    Ok(params)
}

/// Application of the unitary DFT matrix `Q` (and `Q^H`): a radix-2 FFT
/// for power-of-two dimensions, dense multiplication otherwise.
#[derive(Clone, Debug)]
pub(crate) enum DftBasis {
    Fft { plan: FftPlan, sqrt_n: f64 },
    Dense { q: CMat, qh: CMat },
}

impl DftBasis {
    pub(crate) fn new(n: usize) -> Result<Self> {
        if n.is_power_of_two() {
            Ok(DftBasis::Fft {
                plan: FftPlan::new(n)?,
                sqrt_n: (n as f64).sqrt(),
            })
        } else {
            let q = dft_matrix(n)?;
            let qh = q.conj_transpose();
            Ok(DftBasis::Dense { q, qh })
        }
    }

    /// `x <- Q x`.
    pub(crate) fn apply_q(&self, x: &mut Vec<Cpx>) {
        match self {
            DftBasis::Fft { plan, sqrt_n } => {
                plan.forward(x);
                let s = 1.0 / sqrt_n;
                for v in x.iter_mut() {
                    *v = v.scale(s);
                }
            }
            DftBasis::Dense { q, .. } => *x = matvec(q, x).expect("basis dims"),
        }
    }

    /// `x <- Q^H x`.
    pub(crate) fn apply_qh(&self, x: &mut Vec<Cpx>) {
        match self {
            DftBasis::Fft { plan, sqrt_n } => {
                plan.inverse(x);
                for v in x.iter_mut() {
                    *v = v.scale(*sqrt_n);
                }
            }
            DftBasis::Dense { qh, .. } => *x = matvec(qh, x).expect("basis dims"),
        }
    }
}

/// Precomputed projections for stepping a neuron bank.
///
/// The state is kept in the eigenbasis, so the per-step update is always a
/// diagonal multiply; the basis changes are folded into `qb = Q B` and
/// `cqh = C Q^H` once per forward pass (for the diagonal transition these
/// are `B` and `C` themselves).
#[derive(Clone, Debug)]
pub struct LayerRunner {
    pub kind: TransitionKind,
    h: usize,
    n: usize,
    n_in: usize,
    n_out: usize,
    lambda: Vec<Cpx>,
    qb: Vec<Cpx>,
    cqh: Vec<Cpx>,
    c_bias: Vec<f64>,
}

impl LayerRunner {
    pub fn new(params: &NeuronLayerParams, kind: TransitionKind) -> Result<Self> {
        let (h, n, n_in, n_out) = (params.h, params.n, params.n_in, params.n_out);
        let lambda = params.lambda.to_cpx_vec();
        let (qb, cqh) = match kind {
            TransitionKind::Diagonal => (params.b.to_cpx_vec(), params.c.to_cpx_vec()),
            TransitionKind::NonDiagonalDft => {
                let basis = DftBasis::new(n)?;
                (project_b(params, &basis), project_c(params, &basis))
            }
        };
        Ok(LayerRunner {
            kind,
            h,
            n,
            n_in,
            n_out,
            lambda,
            qb,
            cqh,
            c_bias: params.c_bias.clone(),
        })
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.h, self.n, self.n_in, self.n_out)
    }

    /// Eigenbasis input projection of neuron `j`, row-major n x n_in.
    pub fn qb_neuron(&self, j: usize) -> &[Cpx] {
        &self.qb[j * self.n * self.n_in..(j + 1) * self.n * self.n_in]
    }

    /// Eigenbasis output projection of neuron `j`, row-major n_out x n.
    pub fn cqh_neuron(&self, j: usize) -> &[Cpx] {
        &self.cqh[j * self.n_out * self.n..(j + 1) * self.n_out * self.n]
    }

    pub fn lambda_neuron(&self, j: usize) -> &[Cpx] {
        &self.lambda[j * self.n..(j + 1) * self.n]
    }

    /// Real output `y = Re(C v + c_bias) + Im(C v + c_bias)` from the
    /// current state, written into `y_out` (length h * n_out).
    pub fn observe(&self, state: &LayerState, y_out: &mut [f64]) {
        debug_assert_eq!(y_out.len(), self.h * self.n_out);
        for j in 0..self.h {
            let w = state.neuron(j);
            let cqh = self.cqh_neuron(j);
            for o in 0..self.n_out {
                let mut acc = Cpx::ZERO;
                for (c, v) in cqh[o * self.n..(o + 1) * self.n].iter().zip(w.iter()) {
                    acc += *c * *v;
                }
                y_out[j * self.n_out + o] = acc.re + acc.im + self.c_bias[j * self.n_out + o];
            }
        }
    }

    /// Advance the state one step: `w <- lambda .* w + (Q B) i`.
    pub fn advance(&self, state: &mut LayerState, input: &[f64]) {
        debug_assert_eq!(input.len(), self.h * self.n_in);
        for j in 0..self.h {
            let qb = self.qb_neuron(j);
            let lam = self.lambda_neuron(j);
            let i_vec = &input[j * self.n_in..(j + 1) * self.n_in];
            let w = &mut state.w[j * self.n..(j + 1) * self.n];
            for k in 0..self.n {
                let mut u = Cpx::ZERO;
                for (qbk, im) in qb[k * self.n_in..(k + 1) * self.n_in].iter().zip(i_vec.iter())
                {
                    u += qbk.scale(*im);
                }
                w[k] = lam[k] * w[k] + u;
            }
        }
    }

    /// Observe-then-advance: emits `y[t]` from `v[t]`, then computes `v[t+1]`.
    pub fn step(&self, state: &mut LayerState, input: &[f64], y_out: &mut [f64]) {
        self.observe(state, y_out);
        self.advance(state, input);
    }
}

fn project_b(params: &NeuronLayerParams, basis: &DftBasis) -> Vec<Cpx> {
    let (h, n, n_in) = (params.h, params.n, params.n_in);
    let mut out = vec![Cpx::ZERO; h * n * n_in];
    let mut col = vec![Cpx::ZERO; n];
    for j in 0..h {
        for m in 0..n_in {
            for k in 0..n {
                col[k] = params.b_at(j, k, m);
            }
            basis.apply_q(&mut col);
            for k in 0..n {
                out[(j * n + k) * n_in + m] = col[k];
            }
        }
    }
    out
}

fn project_c(params: &NeuronLayerParams, basis: &DftBasis) -> Vec<Cpx> {
    // Q is symmetric, so (C Q^H)[o, :] = Q^H C[o, :]
    let (h, n, n_out) = (params.h, params.n, params.n_out);
    let mut out = vec![Cpx::ZERO; h * n_out * n];
    let mut row = vec![Cpx::ZERO; n];
    for j in 0..h {
        for o in 0..n_out {
            for k in 0..n {
                row[k] = params.c_at(j, o, k);
            }
            basis.apply_qh(&mut row);
            for k in 0..n {
                out[(j * n_out + o) * n + k] = row[k];
            }
        }
    }
    out
}

/// One step of a neuron bank: returns the next state, the real
/// pre-activation `y`, and the spikes `s = f(y)`.
///
/// Convenience wrapper that rebuilds the projections each call; unrolled
/// passes construct a [`LayerRunner`] once instead.
pub fn ssm_neuron_step(
    params: &NeuronLayerParams,
    kind: TransitionKind,
    act: &ActivationKind,
    state: &LayerState,
    input: &[f64],
) -> Result<(LayerState, Vec<f64>, Vec<f64>)> {
    if state.h != params.h || state.n != params.n {
        return Err(Error::InvalidDimension(format!(
            "state is {}x{}, parameters expect {}x{}",
            state.h, state.n, params.h, params.n
        )));
    }
    if input.len() != params.h * params.n_in {
        return Err(Error::InvalidDimension(format!(
            "input has length {}, expected h*n_in = {}",
            input.len(),
            params.h * params.n_in
        )));
    }
    let runner = LayerRunner::new(params, kind)?;
    let mut next = state.clone();
    let mut y = vec![0.0; params.h * params.n_out];
    runner.step(&mut next, input, &mut y);
    if !next.is_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::DivergedState { layer: 0, step: 0 });
    }
    let s = y.iter().map(|&v| act.apply_scalar(v)).collect();
    Ok((next, y, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{dft_matrix, matvec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn lif_rest_state() {
        let p = LifParams {
            alpha: 0.5,
            theta: 1.0,
        };
        assert_eq!(lif_step(&p, 0.0, 0.0, 0.0), (0.0, 0.0));
    }

    #[test]
    fn lif_arithmetic() {
        let p = LifParams {
            alpha: 0.5,
            theta: 1.0,
        };
        let (u, s) = lif_step(&p, 2.0, 1.0, 0.0);
        assert_eq!((u, s), (0.5, 1.0));

        let p = LifParams {
            alpha: 0.9,
            theta: 1.0,
        };
        let (u, s) = lif_step(&p, 0.5, 0.0, 1.0);
        assert!((u - 0.55).abs() < 1e-15);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn adlif_arithmetic() {
        let p = AdLifParams {
            alpha: 0.5,
            beta: 0.5,
            a: 0.1,
            b: 0.2,
            theta: 1.0,
        };
        let (u, w, s) = adlif_step(&p, 1.0, 0.0, 0.0, 0.0);
        assert_eq!((u, w, s), (0.5, 0.1, 1.0));

        let (u, w, _) = adlif_step(&p, 1.0, 0.0, 1.0, 0.0);
        assert_eq!(u, 0.0);
        assert_eq!(w, 0.1 * 1.0 + 0.5 * 0.0 + 0.2 * 1.0);
        assert!((w - 0.3).abs() < 1e-15);
    }

    #[test]
    fn adlif_zero_stays_zero() {
        let p = AdLifParams {
            alpha: 0.7,
            beta: 0.6,
            a: 0.3,
            b: 0.4,
            theta: 1.0,
        };
        assert_eq!(adlif_step(&p, 0.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0));
    }

    #[test]
    fn general_embeds_lif_bit_for_bit() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let p = LifParams {
                alpha: 0.01 + 0.98 * rng.random::<f64>(),
                theta: 0.5 + 1.5 * rng.random::<f64>(),
            };
            let gen = GeneralNeuronParams::from_lif(&p);
            let mut u = 0.0;
            let mut v = vec![0.0];
            let mut s_lif = 0.0;
            let mut s_gen = 0.0;
            for _ in 0..100 {
                let i = 4.0 * (rng.random::<f64>() - 0.5);
                let (u2, s2) = lif_step(&p, u, s_lif, i);
                let (v2, sg) = general_neuron_step(&gen, &v, s_gen, i).unwrap();
                assert_eq!(u2, v2[0]);
                assert_eq!(s2, sg);
                u = u2;
                v = v2;
                s_lif = s2;
                s_gen = sg;
            }
        }
    }

    #[test]
    fn general_embeds_adlif_bit_for_bit() {
        let mut rng = ChaCha12Rng::seed_from_u64(100);
        for _ in 0..1000 {
            let p = AdLifParams {
                alpha: 0.01 + 0.98 * rng.random::<f64>(),
                beta: 0.01 + 0.98 * rng.random::<f64>(),
                a: rng.random::<f64>() - 0.5,
                b: rng.random::<f64>() - 0.5,
                theta: 0.5 + 1.5 * rng.random::<f64>(),
            };
            let gen = GeneralNeuronParams::from_adlif(&p);
            let (mut u, mut w, mut s) = (0.0, 0.0, 0.0);
            let mut v = vec![0.0, 0.0];
            let mut s_gen = 0.0;
            for _ in 0..100 {
                let i = 4.0 * (rng.random::<f64>() - 0.5);
                let (u2, w2, s2) = adlif_step(&p, u, w, s, i);
                let (v2, sg) = general_neuron_step(&gen, &v, s_gen, i).unwrap();
                assert_eq!(u2, v2[0]);
                assert_eq!(w2, v2[1]);
                assert_eq!(s2, sg);
                u = u2;
                w = w2;
                s = s2;
                v = v2;
                s_gen = sg;
            }
        }
    }

    #[test]
    fn general_identity_keeps_state() {
        let p = GeneralNeuronParams {
            n: 3,
            a: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            b: vec![0.0; 3],
            r: vec![0.0; 3],
            theta: ThetaRegion::HalfSpace {
                weights: vec![1.0, 0.0, 0.0],
                threshold: 1e9,
            },
        };
        let v = vec![0.3, -0.7, 2.0];
        let (v2, s) = general_neuron_step(&p, &v, 1.0, 5.0).unwrap();
        assert_eq!(v2, v);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn general_dimension_mismatch() {
        let p = GeneralNeuronParams::from_lif(&LifParams {
            alpha: 0.5,
            theta: 1.0,
        });
        assert!(general_neuron_step(&p, &[0.0, 0.0], 0.0, 0.0).is_err());
    }

    #[test]
    fn s4d_bilinear_example() {
        // k = 0 with dt = 0.01: (1 - 0.0025) / (1 + 0.0025)
        let z = Cpx::new(-0.25 * 0.01, 0.0);
        let lam = cdiv(Cpx::ONE + z, Cpx::ONE - z);
        assert!((lam.re - 0.9975 / 1.0025).abs() < 1e-15);
        assert!((lam.re - 0.995012).abs() < 1e-6);
        assert_eq!(lam.im, 0.0);
    }

    #[test]
    fn s4d_inside_unit_disk_and_deterministic() {
        let a = s4d_lin_init(16, 0.001, 0.1, 7).unwrap();
        let b = s4d_lin_init(16, 0.001, 0.1, 7).unwrap();
        assert_eq!(a.len(), 16);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
            assert!(x.modulus() < 1.0);
        }
        let c = s4d_lin_init(16, 0.001, 0.1, 8).unwrap();
        assert!(a.iter().zip(c.iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn s4d_invalid_ranges() {
        assert!(s4d_lin_init(0, 0.001, 0.1, 1).is_err());
        assert!(s4d_lin_init(4, 0.0, 0.1, 1).is_err());
        assert!(s4d_lin_init(4, 0.2, 0.1, 1).is_err());
    }

    #[test]
    fn stability_clip_examples() {
        let mut params = NeuronLayerParams::zeros(1, 3, 1, 1);
        params.lambda.set(0, Cpx::new(2.0, 0.0));
        params.lambda.set(1, Cpx::new(0.0, 0.5));
        params.lambda.set(2, Cpx::new(1.0, 1.0));
        stability_clip(&mut params);
        assert!((params.lambda.get(0) - Cpx::new(1.0, 0.0)).modulus() < 1e-15);
        assert_eq!(params.lambda.get(1), Cpx::new(0.0, 0.5));
        let r = 1.0 / 2f64.sqrt();
        assert!((params.lambda.get(2) - Cpx::new(r, r)).modulus() < 1e-15);
        for k in 0..3 {
            assert!(params.lambda.get(k).norm_sqr() <= 1.0 + 1e-12);
        }
    }

    fn random_params(
        h: usize,
        n: usize,
        n_in: usize,
        n_out: usize,
        rng: &mut impl Rng,
    ) -> NeuronLayerParams {
        let mut p = NeuronLayerParams::zeros(h, n, n_in, n_out);
        for idx in 0..h * n {
            let m = 0.95 * rng.random::<f64>();
            let phase = 2.0 * std::f64::consts::PI * rng.random::<f64>();
            p.lambda.set(idx, Cpx::from_polar(m, phase));
        }
        for idx in 0..p.b.len() {
            p.b.set(
                idx,
                Cpx::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5),
            );
        }
        for idx in 0..p.c.len() {
            p.c.set(
                idx,
                Cpx::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5),
            );
        }
        for v in p.c_bias.iter_mut() {
            *v = rng.random::<f64>() - 0.5;
        }
        p
    }

    /// Dense reference: v[t+1] = (Q^H Lambda Q) v + B i, y = reduce(C v + bias).
    fn dense_reference(
        params: &NeuronLayerParams,
        inputs: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let (h, n, n_in, n_out) = (params.h, params.n, params.n_in, params.n_out);
        let q = dft_matrix(n).unwrap();
        let qh = q.conj_transpose();
        let mut ys = Vec::new();
        let mut states: Vec<Vec<Cpx>> = vec![vec![Cpx::ZERO; n]; h];
        for input in inputs {
            let mut y_step = vec![0.0; h * n_out];
            for j in 0..h {
                let v = &states[j];
                for o in 0..n_out {
                    let mut acc = Cpx::ZERO;
                    for k in 0..n {
                        acc += params.c_at(j, o, k) * v[k];
                    }
                    y_step[j * n_out + o] = acc.re + acc.im + params.c_bias_at(j, o);
                }
                // dense transition: Q^H (Lambda (Q v))
                let qv = matvec(&q, v).unwrap();
                let lqv: Vec<Cpx> = (0..n).map(|k| params.lambda_at(j, k) * qv[k]).collect();
                let mut v_next = matvec(&qh, &lqv).unwrap();
                for k in 0..n {
                    let mut u = Cpx::ZERO;
                    for m in 0..n_in {
                        u += params.b_at(j, k, m).scale(input[j * n_in + m]);
                    }
                    v_next[k] += u;
                }
                states[j] = v_next;
            }
            ys.push(y_step);
        }
        ys
    }

    #[test]
    fn eigenbasis_matches_dense_recurrence() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        // 6 and 12 exercise the dense fallback for non-power-of-two n
        for n in [4usize, 6, 8, 12, 16] {
            let params = random_params(2, n, 2, 3, &mut rng);
            let steps = 50;
            let inputs: Vec<Vec<f64>> = (0..steps)
                .map(|_| (0..2 * 2).map(|_| rng.random::<f64>() - 0.5).collect())
                .collect();
            let reference = dense_reference(&params, &inputs);

            let runner = LayerRunner::new(&params, TransitionKind::NonDiagonalDft).unwrap();
            let mut state = LayerState::zeros(2, n);
            let mut y = vec![0.0; 2 * 3];
            for (t, input) in inputs.iter().enumerate() {
                runner.step(&mut state, input, &mut y);
                let scale = reference[t]
                    .iter()
                    .fold(1e-12f64, |m, v| m.max(v.abs()));
                for (a, b) in y.iter().zip(reference[t].iter()) {
                    assert!(
                        (a - b).abs() / scale < 1e-8,
                        "n={n} t={t}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn diagonal_equals_nondiagonal_for_n1() {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let params = random_params(3, 1, 2, 2, &mut rng);
        let act = ActivationKind::signed_spike();
        let mut sd = LayerState::zeros(3, 1);
        let mut snd = LayerState::zeros(3, 1);
        for _ in 0..20 {
            let input: Vec<f64> = (0..6).map(|_| rng.random::<f64>() - 0.5).collect();
            let (d_next, d_y, d_s) =
                ssm_neuron_step(&params, TransitionKind::Diagonal, &act, &sd, &input).unwrap();
            let (nd_next, nd_y, nd_s) =
                ssm_neuron_step(&params, TransitionKind::NonDiagonalDft, &act, &snd, &input)
                    .unwrap();
            assert_eq!(d_y, nd_y);
            assert_eq!(d_s, nd_s);
            sd = d_next;
            snd = nd_next;
            assert_eq!(sd.w, snd.w);
        }
    }

    #[test]
    fn zero_dynamics_output_is_bias() {
        let mut params = NeuronLayerParams::zeros(2, 4, 1, 2);
        params.c_bias = vec![1.5, -0.5, 0.25, 2.0];
        let act = ActivationKind::non_signed_spike();
        let state = LayerState::zeros(2, 4);
        let (next, y, s) = ssm_neuron_step(
            &params,
            TransitionKind::Diagonal,
            &act,
            &state,
            &[3.0, -2.0],
        )
        .unwrap();
        assert_eq!(y, params.c_bias);
        assert_eq!(s, vec![1.0, 0.0, 0.0, 1.0]);
        assert!(next.w.iter().all(|v| *v == Cpx::ZERO));
    }

    #[test]
    fn simo_single_output_equals_siso() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let params = random_params(2, 8, 1, 1, &mut rng);
        let act = ActivationKind::non_signed_spike();
        let runner = LayerRunner::new(&params, TransitionKind::Diagonal).unwrap();
        // n_out = 1 is the SISO case by construction; stepping the same
        // parameters through the generic MIMO path must be identical.
        let mut state = LayerState::zeros(2, 8);
        let mut y = vec![0.0; 2];
        let mut state2 = state.clone();
        for _ in 0..10 {
            let input: Vec<f64> = (0..2).map(|_| rng.random::<f64>() - 0.5).collect();
            runner.step(&mut state, &input, &mut y);
            let (next, y2, _) =
                ssm_neuron_step(&params, TransitionKind::Diagonal, &act, &state2, &input)
                    .unwrap();
            assert_eq!(y.to_vec(), y2);
            state2 = next;
            assert_eq!(state.w, state2.w);
        }
    }

    #[test]
    fn bounded_state_under_stable_eigenvalues() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let n = 8;
        let mut params = random_params(1, n, 1, 1, &mut rng);
        let mut max_mod = 0.0f64;
        for idx in 0..n {
            let lam = params.lambda.get(idx);
            let capped = if lam.modulus() > 1.0 - 1e-3 {
                lam.scale((1.0 - 1e-3) / lam.modulus())
            } else {
                lam
            };
            params.lambda.set(idx, capped);
            max_mod = max_mod.max(capped.modulus());
        }
        for idx in 0..params.b.len() {
            params.b.set(idx, Cpx::new(1.0, 0.0));
        }
        let bound_m = 2.0;
        let runner = LayerRunner::new(&params, TransitionKind::Diagonal).unwrap();
        let mut state = LayerState::zeros(1, n);
        let mut y = vec![0.0; 1];
        let limit = bound_m * n as f64 / (1.0 - max_mod);
        for _ in 0..10_000 {
            let input = [bound_m * (2.0 * rng.random::<f64>() - 1.0)];
            runner.step(&mut state, &input, &mut y);
            let inf_norm = state
                .w
                .iter()
                .fold(0.0f64, |m, v| m.max(v.re.abs().max(v.im.abs())));
            assert!(inf_norm <= limit, "state norm {inf_norm} exceeded {limit}");
        }
    }

    #[test]
    fn diverged_state_is_reported() {
        let mut params = NeuronLayerParams::zeros(1, 2, 1, 1);
        params.b.re[0] = 1.0;
        let act = ActivationKind::gelu();
        let state = LayerState::zeros(1, 2);
        let err = ssm_neuron_step(
            &params,
            TransitionKind::Diagonal,
            &act,
            &state,
            &[f64::INFINITY],
        )
        .unwrap_err();
        assert!(matches!(err, Error::DivergedState { .. }));
    }
}
