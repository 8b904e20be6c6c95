//! Masked macro-block ensemble approximators.
//!
//! A network is a bank of identical two-hidden-layer MLPs with layer
//! normalization after each ReLU. A binary mask gates whole members: the
//! network output is the mean of the active members' outputs, so dropped
//! members contribute nothing to the forward pass and receive exactly zero
//! gradient. Gradients are computed by hand in f64; there is no autodiff.
//!
//! Parameter layout is member-major. Within a member the order is
//! `w1, b1, ln1_gain, ln1_bias, w2, b2, ln2_gain, ln2_bias, w3, b3`,
//! with weight matrices stored row-major (rows = outputs).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;

/// Variance guard for layer normalization.
pub const LN_EPSILON: f64 = 1e-5;
/// Clamp bounds for policy log standard deviations.
pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum ApproxError {
    #[error("mask drops every member; forward output undefined")]
    AllMembersDropped,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Architecture metadata shared by every member of an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub members: usize,
}

impl NetShape {
    pub fn params_per_member(&self) -> usize {
        let h = self.hidden_dim;
        h * self.input_dim + h      // w1, b1
            + 2 * h                 // ln1 gain/bias
            + h * h + h             // w2, b2
            + 2 * h                 // ln2 gain/bias
            + self.output_dim * h + self.output_dim // w3, b3
    }

    pub fn total_params(&self) -> usize {
        self.members * self.params_per_member()
    }

    /// Flat-parameter range owned by member `k`.
    pub fn member_range(&self, k: usize) -> std::ops::Range<usize> {
        let per = self.params_per_member();
        k * per..(k + 1) * per
    }
}

/// Offsets of the blocks inside one member's parameter slice.
#[derive(Debug, Clone, Copy)]
struct MemberLayout {
    w1: usize,
    b1: usize,
    g1: usize,
    be1: usize,
    w2: usize,
    b2: usize,
    g2: usize,
    be2: usize,
    w3: usize,
    b3: usize,
}

impl MemberLayout {
    fn of(shape: &NetShape) -> Self {
        let h = shape.hidden_dim;
        let w1 = 0;
        let b1 = w1 + h * shape.input_dim;
        let g1 = b1 + h;
        let be1 = g1 + h;
        let w2 = be1 + h;
        let b2 = w2 + h * h;
        let g2 = b2 + h;
        let be2 = g2 + h;
        let w3 = be2 + h;
        let b3 = w3 + shape.output_dim * h;
        let end = b3 + shape.output_dim;
        debug_assert_eq!(end, shape.params_per_member());
        Self { w1, b1, g1, be1, w2, b2, g2, be2, w3, b3 }
    }
}

/// Layer normalization: `(x - mean) / sqrt(var + eps)` scaled by `gain`
/// and shifted by `bias`. Variance is the population variance.
pub fn layer_normalize(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let (normed, _, _) = layer_normalize_cached(x, gain, bias);
    normed
}

/// Layer norm that also returns `(xhat, inv_std)` for the backward pass.
fn layer_normalize_cached(x: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPSILON).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let out = xhat.iter().zip(gain.iter().zip(bias)).map(|(xh, (g, b))| g * xh + b).collect();
    (out, xhat, inv_std)
}

/// Per-unit inverted-dropout plan for one update (the DroQ variant).
/// `scales[layer][unit]` is `0` for a dropped unit and `1/(1-rate)` for a
/// kept one; applied right after each hidden weight layer.
#[derive(Debug, Clone)]
pub struct DropoutPlan {
    pub scales: Vec<[Vec<f64>; 2]>,
}

impl DropoutPlan {
    pub fn sample(shape: &NetShape, rate: f64, rng: &mut impl Rng) -> Self {
        let keep = 1.0 - rate;
        let mut scales = Vec::with_capacity(shape.members);
        for _ in 0..shape.members {
            let mut member = [Vec::new(), Vec::new()];
            for layer in &mut member {
                for _ in 0..shape.hidden_dim {
                    layer.push(if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep });
                }
            }
            scales.push(member);
        }
        Self { scales }
    }
}

/// Intermediate values for one member's forward pass.
#[derive(Debug, Clone)]
struct MemberTrace {
    z1d: Vec<f64>,
    xhat1: Vec<f64>,
    inv1: f64,
    n1: Vec<f64>,
    z2d: Vec<f64>,
    xhat2: Vec<f64>,
    inv2: f64,
    n2: Vec<f64>,
}

/// Cached forward pass of an ensemble under a mask.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Vec<f64>,
    active: Vec<usize>,
    members: Vec<Option<MemberTrace>>,
    dropout: Option<DropoutPlan>,
    pub output: Vec<f64>,
}

/// A bank of identical MLPs with a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    shape: NetShape,
    params: Vec<f64>,
}

impl Ensemble {
    /// Uniform fan-in initialization per member, each member seeded
    /// independently from `seed`. Layer-norm gains start at 1, biases at 0.
    pub fn init(shape: NetShape, seed: u64) -> Self {
        let lay = MemberLayout::of(&shape);
        let mut params = vec![0.0; shape.total_params()];
        for k in 0..shape.members {
            let mut rng = seeds::rng(seed, "member-init", k as u64);
            let slice = &mut params[shape.member_range(k)];
            let mut fill = |lo: usize, n: usize, bound: f64, rng: &mut rand_chacha::ChaCha8Rng| {
                for v in &mut slice[lo..lo + n] {
                    *v = rng.gen_range(-bound..bound);
                }
            };
            let h = shape.hidden_dim;
            let b_in = 1.0 / (shape.input_dim as f64).sqrt();
            let b_h = 1.0 / (h as f64).sqrt();
            fill(lay.w1, h * shape.input_dim, b_in, &mut rng);
            fill(lay.b1, h, b_in, &mut rng);
            fill(lay.w2, h * h, b_h, &mut rng);
            fill(lay.b2, h, b_h, &mut rng);
            fill(lay.w3, shape.output_dim * h, b_h, &mut rng);
            fill(lay.b3, shape.output_dim, b_h, &mut rng);
            for v in &mut slice[lay.g1..lay.g1 + h] {
                *v = 1.0;
            }
            for v in &mut slice[lay.g2..lay.g2 + h] {
                *v = 1.0;
            }
        }
        Self { shape, params }
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn from_params(shape: NetShape, params: Vec<f64>) -> Result<Self, ApproxError> {
        if params.len() != shape.total_params() {
            return Err(ApproxError::DimensionMismatch {
                expected: shape.total_params(),
                got: params.len(),
            });
        }
        Ok(Self { shape, params })
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    fn check_forward(&self, input: &[f64], mask: &[bool]) -> Result<Vec<usize>, ApproxError> {
        if input.len() != self.shape.input_dim {
            return Err(ApproxError::DimensionMismatch {
                expected: self.shape.input_dim,
                got: input.len(),
            });
        }
        if mask.len() != self.shape.members {
            return Err(ApproxError::DimensionMismatch {
                expected: self.shape.members,
                got: mask.len(),
            });
        }
        let active: Vec<usize> =
            mask.iter().enumerate().filter_map(|(k, b)| b.then_some(k)).collect();
        if active.is_empty() {
            return Err(ApproxError::AllMembersDropped);
        }
        Ok(active)
    }

    /// Mean of the active members' outputs.
    pub fn forward_masked(&self, input: &[f64], mask: &[bool]) -> Result<Vec<f64>, ApproxError> {
        let active = self.check_forward(input, mask)?;
        let mut out = vec![0.0; self.shape.output_dim];
        for &k in &active {
            let member_out = self.member_forward(k, input, None).0;
            for (o, v) in out.iter_mut().zip(member_out) {
                *o += v;
            }
        }
        let scale = 1.0 / active.len() as f64;
        for o in &mut out {
            *o *= scale;
        }
        Ok(out)
    }

    /// Forward pass that records everything the backward pass needs.
    pub fn forward_traced(
        &self,
        input: &[f64],
        mask: &[bool],
        dropout: Option<&DropoutPlan>,
    ) -> Result<ForwardTrace, ApproxError> {
        let active = self.check_forward(input, mask)?;
        let mut members: Vec<Option<MemberTrace>> = vec![None; self.shape.members];
        let mut out = vec![0.0; self.shape.output_dim];
        for &k in &active {
            let (member_out, trace) = self.member_forward(k, input, dropout);
            for (o, v) in out.iter_mut().zip(member_out) {
                *o += v;
            }
            members[k] = Some(trace);
        }
        let scale = 1.0 / active.len() as f64;
        for o in &mut out {
            *o *= scale;
        }
        Ok(ForwardTrace {
            input: input.to_vec(),
            active,
            members,
            dropout: dropout.cloned(),
            output: out,
        })
    }

    fn member_forward(
        &self,
        k: usize,
        input: &[f64],
        dropout: Option<&DropoutPlan>,
    ) -> (Vec<f64>, MemberTrace) {
        let lay = MemberLayout::of(&self.shape);
        let p = &self.params[self.shape.member_range(k)];
        let h = self.shape.hidden_dim;
        let d = self.shape.input_dim;

        let mut z1d = vec![0.0; h];
        for i in 0..h {
            let row = &p[lay.w1 + i * d..lay.w1 + (i + 1) * d];
            let mut acc = p[lay.b1 + i];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            z1d[i] = acc;
        }
        if let Some(plan) = dropout {
            for (z, s) in z1d.iter_mut().zip(&plan.scales[k][0]) {
                *z *= s;
            }
        }
        let a1: Vec<f64> = z1d.iter().map(|z| z.max(0.0)).collect();
        let (n1, xhat1, inv1) =
            layer_normalize_cached(&a1, &p[lay.g1..lay.g1 + h], &p[lay.be1..lay.be1 + h]);

        let mut z2d = vec![0.0; h];
        for i in 0..h {
            let row = &p[lay.w2 + i * h..lay.w2 + (i + 1) * h];
            let mut acc = p[lay.b2 + i];
            for (w, x) in row.iter().zip(&n1) {
                acc += w * x;
            }
            z2d[i] = acc;
        }
        if let Some(plan) = dropout {
            for (z, s) in z2d.iter_mut().zip(&plan.scales[k][1]) {
                *z *= s;
            }
        }
        let a2: Vec<f64> = z2d.iter().map(|z| z.max(0.0)).collect();
        let (n2, xhat2, inv2) =
            layer_normalize_cached(&a2, &p[lay.g2..lay.g2 + h], &p[lay.be2..lay.be2 + h]);

        let od = self.shape.output_dim;
        let mut out = vec![0.0; od];
        for o in 0..od {
            let row = &p[lay.w3 + o * h..lay.w3 + (o + 1) * h];
            let mut acc = p[lay.b3 + o];
            for (w, x) in row.iter().zip(&n2) {
                acc += w * x;
            }
            out[o] = acc;
        }
        (out, MemberTrace { z1d, xhat1, inv1, n1, z2d, xhat2, inv2, n2 })
    }

    /// Backward pass of the masked forward. Parameter gradients accumulate
    /// into `grads` (flat, same layout as `params`); the return value is
    /// the gradient with respect to the input. Dropped members receive
    /// exactly zero gradient because they are never visited.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        upstream: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<f64>, ApproxError> {
        self.backward_impl(trace, upstream, Some(grads))
    }

    /// Input gradient only; skips parameter-gradient accumulation.
    pub fn backward_input_only(
        &self,
        trace: &ForwardTrace,
        upstream: &[f64],
    ) -> Result<Vec<f64>, ApproxError> {
        self.backward_impl(trace, upstream, None)
    }

    fn backward_impl(
        &self,
        trace: &ForwardTrace,
        upstream: &[f64],
        mut grads: Option<&mut [f64]>,
    ) -> Result<Vec<f64>, ApproxError> {
        if upstream.len() != self.shape.output_dim {
            return Err(ApproxError::DimensionMismatch {
                expected: self.shape.output_dim,
                got: upstream.len(),
            });
        }
        if let Some(g) = grads.as_ref() {
            if g.len() != self.shape.total_params() {
                return Err(ApproxError::DimensionMismatch {
                    expected: self.shape.total_params(),
                    got: g.len(),
                });
            }
        }
        let lay = MemberLayout::of(&self.shape);
        let h = self.shape.hidden_dim;
        let d = self.shape.input_dim;
        let od = self.shape.output_dim;
        let scale = 1.0 / trace.active.len() as f64;
        let mut input_grad = vec![0.0; d];

        for &k in &trace.active {
            let t = trace.members[k].as_ref().expect("active member has a trace");
            let p = &self.params[self.shape.member_range(k)];
            let range = self.shape.member_range(k);

            // Output layer.
            let mut dn2 = vec![0.0; h];
            for o in 0..od {
                let u = upstream[o] * scale;
                let row = &p[lay.w3 + o * h..lay.w3 + (o + 1) * h];
                for (dn, w) in dn2.iter_mut().zip(row) {
                    *dn += w * u;
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                let gm = &mut g[range.clone()];
                for o in 0..od {
                    let u = upstream[o] * scale;
                    for j in 0..h {
                        gm[lay.w3 + o * h + j] += u * t.n2[j];
                    }
                    gm[lay.b3 + o] += u;
                }
            }

            // Layer norm 2.
            if let Some(g) = grads.as_deref_mut() {
                let gm = &mut g[range.clone()];
                for i in 0..h {
                    gm[lay.g2 + i] += dn2[i] * t.xhat2[i];
                    gm[lay.be2 + i] += dn2[i];
                }
            }
            let da2 = ln_backward(&dn2, &t.xhat2, t.inv2, &p[lay.g2..lay.g2 + h]);

            // ReLU 2 (+ optional unit dropout).
            let mut dz2 = vec![0.0; h];
            for i in 0..h {
                if t.z2d[i] > 0.0 {
                    dz2[i] = da2[i];
                }
            }
            if let Some(plan) = &trace.dropout {
                for (dz, s) in dz2.iter_mut().zip(&plan.scales[k][1]) {
                    *dz *= s;
                }
            }

            // Hidden layer 2.
            let mut dn1 = vec![0.0; h];
            for i in 0..h {
                let row = &p[lay.w2 + i * h..lay.w2 + (i + 1) * h];
                for (dn, w) in dn1.iter_mut().zip(row) {
                    *dn += w * dz2[i];
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                let gm = &mut g[range.clone()];
                for i in 0..h {
                    for j in 0..h {
                        gm[lay.w2 + i * h + j] += dz2[i] * t.n1[j];
                    }
                    gm[lay.b2 + i] += dz2[i];
                }
            }

            // Layer norm 1.
            if let Some(g) = grads.as_deref_mut() {
                let gm = &mut g[range.clone()];
                for i in 0..h {
                    gm[lay.g1 + i] += dn1[i] * t.xhat1[i];
                    gm[lay.be1 + i] += dn1[i];
                }
            }
            let da1 = ln_backward(&dn1, &t.xhat1, t.inv1, &p[lay.g1..lay.g1 + h]);

            // ReLU 1 (+ optional unit dropout).
            let mut dz1 = vec![0.0; h];
            for i in 0..h {
                if t.z1d[i] > 0.0 {
                    dz1[i] = da1[i];
                }
            }
            if let Some(plan) = &trace.dropout {
                for (dz, s) in dz1.iter_mut().zip(&plan.scales[k][0]) {
                    *dz *= s;
                }
            }

            // Input layer.
            for i in 0..h {
                let row = &p[lay.w1 + i * d..lay.w1 + (i + 1) * d];
                for (gi, w) in input_grad.iter_mut().zip(row) {
                    *gi += w * dz1[i];
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                let gm = &mut g[range.clone()];
                for i in 0..h {
                    for j in 0..d {
                        gm[lay.w1 + i * d + j] += dz1[i] * trace.input[j];
                    }
                    gm[lay.b1 + i] += dz1[i];
                }
            }
        }
        Ok(input_grad)
    }
}

/// Input gradient of layer norm with population variance. Gain and bias
/// gradients are `dn * xhat` and `dn`, accumulated by the caller.
fn ln_backward(dn: &[f64], xhat: &[f64], inv_std: f64, gain: &[f64]) -> Vec<f64> {
    let n = dn.len();
    let nf = n as f64;
    let dxhat: Vec<f64> = dn.iter().zip(gain).map(|(d, g)| d * g).collect();
    let mean_dx = dxhat.iter().sum::<f64>() / nf;
    let mean_dx_xhat = dxhat.iter().zip(xhat).map(|(d, x)| d * x).sum::<f64>() / nf;
    (0..n).map(|i| inv_std * (dxhat[i] - mean_dx - xhat[i] * mean_dx_xhat)).collect()
}

/// Online/target network pair; the target trails the online parameters.
#[derive(Debug, Clone)]
pub struct TargetPair {
    pub online: Ensemble,
    pub target: Ensemble,
}

impl TargetPair {
    pub fn new(online: Ensemble) -> Self {
        let target = online.clone();
        Self { online, target }
    }

    /// `target += rho * (online - target)`, elementwise. `rho = 1` copies
    /// the online parameters exactly; the incremental form leaves blocks
    /// whose online and target values are bitwise equal untouched.
    pub fn polyak_update(&mut self, rho: f64) {
        if rho == 1.0 {
            self.target.params.copy_from_slice(&self.online.params);
            return;
        }
        for (t, o) in self.target.params.iter_mut().zip(&self.online.params) {
            *t += rho * (*o - *t);
        }
    }
}

/// Gaussian policy head: the first half of a policy network's output is
/// the mean, the second half the log standard deviation clamped to
/// `[LOG_STD_MIN, LOG_STD_MAX]`.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    /// Whether each raw log-std landed inside the clamp bounds (gradient
    /// passes through only where true).
    pub log_std_in_range: Vec<bool>,
}

impl PolicyOutput {
    pub fn from_raw(raw: &[f64]) -> Self {
        let d = raw.len() / 2;
        debug_assert_eq!(raw.len(), 2 * d);
        let mean = raw[..d].to_vec();
        let mut log_std = Vec::with_capacity(d);
        let mut in_range = Vec::with_capacity(d);
        for &v in &raw[d..] {
            log_std.push(v.clamp(LOG_STD_MIN, LOG_STD_MAX));
            in_range.push(v > LOG_STD_MIN && v < LOG_STD_MAX);
        }
        Self { mean, log_std, log_std_in_range: in_range }
    }

    pub fn action_dim(&self) -> usize {
        self.mean.len()
    }

    /// Deterministic action: `tanh(mean)`.
    pub fn mean_action(&self) -> Vec<f64> {
        self.mean.iter().map(|m| m.tanh()).collect()
    }
}

/// A reparameterized sample from a tanh-squashed Gaussian, with the pieces
/// needed to differentiate through it.
#[derive(Debug, Clone)]
pub struct ActionSample {
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub noise: Vec<f64>,
    pub pre_tanh: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(1 - tanh(u)^2)` evaluated without cancellation.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// Sample `a = tanh(mean + std * xi)` with `xi` standard normal, and the
/// log density including the tanh change-of-variables correction.
pub fn sample_action(out: &PolicyOutput, rng: &mut impl Rng) -> ActionSample {
    let d = out.action_dim();
    let mut action = Vec::with_capacity(d);
    let mut noise = Vec::with_capacity(d);
    let mut pre_tanh = Vec::with_capacity(d);
    let mut log_prob = 0.0;
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    for i in 0..d {
        let xi: f64 = rng.sample(rand_distr::StandardNormal);
        let std = out.log_std[i].exp();
        let u = out.mean[i] + std * xi;
        log_prob += -half_ln_2pi - out.log_std[i] - 0.5 * xi * xi - log_one_minus_tanh_sq(u);
        noise.push(xi);
        pre_tanh.push(u);
        action.push(u.tanh());
    }
    ActionSample { action, log_prob, noise, pre_tanh }
}

/// Gradient of an action sample's log probability with respect to the
/// policy mean and log-std, holding the reparameterization noise fixed.
pub fn log_prob_grad(out: &PolicyOutput, sample: &ActionSample) -> (Vec<f64>, Vec<f64>) {
    let d = out.action_dim();
    let mut d_mean = Vec::with_capacity(d);
    let mut d_log_std = Vec::with_capacity(d);
    for i in 0..d {
        let a = sample.action[i];
        let std = out.log_std[i].exp();
        d_mean.push(2.0 * a);
        d_log_std.push(-1.0 + 2.0 * a * std * sample.noise[i]);
    }
    (d_mean, d_log_std)
}

/// Gradient of the sampled action with respect to mean and log-std under
/// reparameterization: `da/dmean = 1 - a^2`, `da/dlog_std = (1 - a^2) * std * xi`.
pub fn action_grad(out: &PolicyOutput, sample: &ActionSample) -> (Vec<f64>, Vec<f64>) {
    let d = out.action_dim();
    let mut d_mean = Vec::with_capacity(d);
    let mut d_log_std = Vec::with_capacity(d);
    for i in 0..d {
        let a = sample.action[i];
        let sech2 = 1.0 - a * a;
        let std = out.log_std[i].exp();
        d_mean.push(sech2);
        d_log_std.push(sech2 * std * sample.noise[i]);
    }
    (d_mean, d_log_std)
}

/// Per-member Adam. Optimizer state advances only for members listed as
/// active in a step, so a member that every minibatch term dropped keeps
/// its parameters, moments, and step count bit-identical.
#[derive(Debug, Clone)]
pub struct MaskedAdam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    shape: NetShape,
    m: Vec<f64>,
    v: Vec<f64>,
    t: Vec<u64>,
}

impl MaskedAdam {
    pub fn new(shape: NetShape, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; shape.total_params()],
            v: vec![0.0; shape.total_params()],
            t: vec![0; shape.members],
            shape,
        }
    }

    /// One optimizer step on the members flagged active.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], active_members: &[bool]) {
        debug_assert_eq!(params.len(), self.shape.total_params());
        debug_assert_eq!(grads.len(), params.len());
        debug_assert_eq!(active_members.len(), self.shape.members);
        for (k, active) in active_members.iter().enumerate() {
            if !active {
                continue;
            }
            self.t[k] += 1;
            let bc1 = 1.0 - self.beta1.powi(self.t[k] as i32);
            let bc2 = 1.0 - self.beta2.powi(self.t[k] as i32);
            for i in self.shape.member_range(k) {
                let g = grads[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Ensemble {
        Ensemble::init(NetShape { input_dim: 2, hidden_dim: 4, output_dim: 1, members: 3 }, 11)
    }

    #[test]
    fn layer_normalize_examples() {
        let gain = vec![1.0; 4];
        let bias = vec![0.0; 4];
        let out = layer_normalize(&[5.0, 5.0, 5.0, 5.0], &gain, &bias);
        assert!(out.iter().all(|v| v.abs() < 1e-12));

        let bias2 = vec![0.7; 4];
        let out = layer_normalize(&[1.0, 2.0, -0.5, 3.0], &gain, &bias2);
        let mean = out.iter().sum::<f64>() / 4.0;
        assert!((mean - 0.7).abs() < 1e-6);

        let out = layer_normalize(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0]);
        let expected = 1.0 / 1.00001f64.sqrt();
        assert!((out[0] - expected).abs() < 1e-12 && (out[1] + expected).abs() < 1e-12);
        assert!((out[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn single_active_member_is_exact() {
        let net = tiny();
        let x = [0.3, -0.8];
        for k in 0..3 {
            let mut mask = vec![false; 3];
            mask[k] = true;
            let masked = net.forward_masked(&x, &mask).unwrap();
            let (direct, _) = net.member_forward(k, &x, None);
            assert_eq!(masked, direct);
        }
    }

    #[test]
    fn mean_aggregation_over_active_members() {
        let net = tiny();
        let x = [0.3, -0.8];
        let outs: Vec<f64> = (0..3)
            .map(|k| {
                let mut mask = vec![false; 3];
                mask[k] = true;
                net.forward_masked(&x, &mask).unwrap()[0]
            })
            .collect();
        let all = net.forward_masked(&x, &[true, true, true]).unwrap()[0];
        let mean = outs.iter().sum::<f64>() / 3.0;
        assert!((all - mean).abs() < 1e-12);

        let two = net.forward_masked(&x, &[true, true, false]).unwrap()[0];
        assert!((two - (outs[0] + outs[1]) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn all_zero_mask_is_an_error() {
        let net = tiny();
        assert_eq!(
            net.forward_masked(&[0.0, 0.0], &[false, false, false]),
            Err(ApproxError::AllMembersDropped)
        );
    }

    #[test]
    fn dropped_member_gets_zero_gradient() {
        let net = tiny();
        let x = [0.5, 0.25];
        let mask = [true, false, true];
        let trace = net.forward_traced(&x, &mask, None).unwrap();
        let mut grads = vec![0.0; net.shape.total_params()];
        net.backward(&trace, &[1.0], &mut grads).unwrap();
        assert!(grads[net.shape.member_range(1)].iter().all(|g| *g == 0.0));
        assert!(grads[net.shape.member_range(0)].iter().any(|g| *g != 0.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = tiny();
        let trace = net.forward_traced(&[0.5, 0.25], &[true, true, true], None).unwrap();
        let mut grads = vec![0.0; net.shape.total_params()];
        let dx = net.backward(&trace, &[0.0], &mut grads).unwrap();
        assert!(grads.iter().all(|g| *g == 0.0));
        assert!(dx.iter().all(|g| *g == 0.0));
    }

    /// Central finite differences on a scalar output net.
    #[test]
    fn gradients_match_finite_differences() {
        let shape = NetShape { input_dim: 3, hidden_dim: 5, output_dim: 1, members: 4 };
        for seed in 0..5u64 {
            let mut net = Ensemble::init(shape, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mask = [true, true, false, true];
            let trace = net.forward_traced(&x, &mask, None).unwrap();
            let mut grads = vec![0.0; shape.total_params()];
            let dx = net.backward(&trace, &[1.0], &mut grads).unwrap();

            let eps = 1e-5;
            let mut fd = vec![0.0; shape.total_params()];
            for i in 0..shape.total_params() {
                let old = net.params[i];
                net.params_mut()[i] = old + eps;
                let hi = net.forward_masked(&x, &mask).unwrap()[0];
                net.params_mut()[i] = old - eps;
                let lo = net.forward_masked(&x, &mask).unwrap()[0];
                net.params_mut()[i] = old;
                fd[i] = (hi - lo) / (2.0 * eps);
            }
            let num: f64 = grads.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum();
            let den: f64 = fd.iter().map(|v| v * v).sum();
            assert!((num / den.max(1e-30)).sqrt() < 1e-4, "seed {seed} param grad");

            // Input gradient.
            let mut fd_x = vec![0.0; 3];
            for (i, slot) in fd_x.iter_mut().enumerate() {
                let mut hi_x = x.clone();
                hi_x[i] += eps;
                let mut lo_x = x.clone();
                lo_x[i] -= eps;
                let hi = net.forward_masked(&hi_x, &mask).unwrap()[0];
                let lo = net.forward_masked(&lo_x, &mask).unwrap()[0];
                *slot = (hi - lo) / (2.0 * eps);
            }
            let num: f64 = dx.iter().zip(&fd_x).map(|(a, b)| (a - b) * (a - b)).sum();
            let den: f64 = fd_x.iter().map(|v| v * v).sum();
            assert!((num / den.max(1e-30)).sqrt() < 1e-4, "seed {seed} input grad");
        }
    }

    #[test]
    fn polyak_examples() {
        let net = tiny();
        let mut pair = TargetPair::new(net);
        for v in pair.online.params_mut() {
            *v += 1.0;
        }
        let before = pair.target.params().to_vec();
        pair.polyak_update(0.0);
        assert_eq!(pair.target.params(), before.as_slice());

        pair.polyak_update(0.005);
        for (t, (b, o)) in pair.target.params().iter().zip(before.iter().zip(pair.online.params()))
        {
            assert!((t - (b + 0.005 * (o - b))).abs() < 1e-15);
        }

        pair.polyak_update(1.0);
        assert_eq!(pair.target.params(), pair.online.params());
    }

    #[test]
    fn polyak_contraction() {
        let net = tiny();
        let mut pair = TargetPair::new(net);
        for v in pair.online.params_mut() {
            *v += 0.5;
        }
        let dist = |p: &TargetPair| -> f64 {
            p.target
                .params()
                .iter()
                .zip(p.online.params())
                .map(|(t, o)| (t - o) * (t - o))
                .sum::<f64>()
                .sqrt()
        };
        let d0 = dist(&pair);
        let rho = 0.05;
        for _ in 0..10 {
            pair.polyak_update(rho);
        }
        let expected = d0 * (1.0 - rho).powi(10);
        assert!((dist(&pair) - expected).abs() < 1e-9 * d0.max(1.0));
    }

    #[test]
    fn masked_adam_leaves_inactive_members_untouched() {
        let shape = NetShape { input_dim: 2, hidden_dim: 3, output_dim: 1, members: 4 };
        let mut net = Ensemble::init(shape, 3);
        let mut opt = MaskedAdam::new(shape, 1e-2);
        let snapshot = net.params().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..25 {
            let grads: Vec<f64> = (0..shape.total_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            opt.step(net.params_mut(), &grads, &[true, false, true, true]);
        }
        let r = shape.member_range(1);
        assert_eq!(&net.params()[r.clone()], &snapshot[r]);
        assert_ne!(&net.params()[shape.member_range(0)], &snapshot[shape.member_range(0)]);
    }

    #[test]
    fn policy_output_clamps_log_std() {
        let out = PolicyOutput::from_raw(&[0.2, -0.4, -30.0, 3.0]);
        assert_eq!(out.mean, vec![0.2, -0.4]);
        assert_eq!(out.log_std, vec![LOG_STD_MIN, LOG_STD_MAX]);
        assert_eq!(out.log_std_in_range, vec![false, false]);
    }

    #[test]
    fn degenerate_noise_gives_tanh_mean() {
        let out = PolicyOutput::from_raw(&[0.7, -60.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_action(&out, &mut rng);
        assert!((s.action[0] - 0.7f64.tanh()).abs() < 1e-8);
        assert!(s.log_prob.is_finite());
        assert!(s.action[0] > -1.0 && s.action[0] < 1.0);
    }

    #[test]
    fn pre_tanh_mean_matches_policy_mean() {
        let out = PolicyOutput::from_raw(&[0.3, (0.5f64).ln()]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000usize;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += sample_action(&out, &mut rng).pre_tanh[0];
        }
        let mean = sum / n as f64;
        let sigma = 0.5;
        assert!((mean - 0.3).abs() <= 3.0 * sigma / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn log_prob_matches_numeric_density() {
        // Compare against direct evaluation of the squashed-Gaussian density.
        let out = PolicyOutput::from_raw(&[0.1, (0.3f64).ln()]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = sample_action(&out, &mut rng);
        let std = 0.3;
        let u = s.pre_tanh[0];
        let gauss = -0.5 * ((u - 0.1) / std).powi(2)
            - std.ln()
            - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let correction = (1.0 - s.action[0] * s.action[0]).ln();
        assert!((s.log_prob - (gauss - correction)).abs() < 1e-9);
    }

    #[test]
    fn droq_plan_disabled_equals_base_forward() {
        let net = tiny();
        let x = [0.1, 0.9];
        let mask = [true, true, true];
        let base = net.forward_masked(&x, &mask).unwrap();
        let traced = net.forward_traced(&x, &mask, None).unwrap();
        assert_eq!(base, traced.output);
    }

    #[test]
    fn droq_gradients_match_finite_differences() {
        let shape = NetShape { input_dim: 2, hidden_dim: 4, output_dim: 1, members: 2 };
        let mut net = Ensemble::init(shape, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plan = DropoutPlan::sample(&shape, 0.25, &mut rng);
        let x = [0.4, -0.2];
        let mask = [true, true];
        let trace = net.forward_traced(&x, &mask, Some(&plan)).unwrap();
        let mut grads = vec![0.0; shape.total_params()];
        net.backward(&trace, &[1.0], &mut grads).unwrap();
        let eps = 1e-5;
        let mut max_rel = 0.0f64;
        for i in 0..shape.total_params() {
            let old = net.params[i];
            net.params_mut()[i] = old + eps;
            let hi = net.forward_traced(&x, &mask, Some(&plan)).unwrap().output[0];
            net.params_mut()[i] = old - eps;
            let lo = net.forward_traced(&x, &mask, Some(&plan)).unwrap().output[0];
            net.params_mut()[i] = old;
            let fd = (hi - lo) / (2.0 * eps);
            let denom = fd.abs().max(grads[i].abs()).max(1e-6);
            max_rel = max_rel.max((grads[i] - fd).abs() / denom);
        }
        assert!(max_rel < 1e-4, "max rel err {max_rel}");
    }
}
