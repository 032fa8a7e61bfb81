use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LinkSample, LinkerError, Result, Window, NUM_FEATURES, WINDOW_LEN, WINDOW_SIZE};

pub const TEMPORAL_KERNEL: usize = 7;
pub const SPATIAL_KERNEL: usize = 5;
pub const BN_EPS: f64 = 1e-5;
/// Weight of the old value in running-statistics updates.
pub const BN_MOMENTUM: f64 = 0.9;

/// Layer sizes of the link network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    /// Output channels of the three convolutions in each branch.
    pub widths: [usize; 3],
    /// Hidden units of the MLP.
    pub hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            widths: [4, 8, 8],
            hidden: 64,
        }
    }
}

impl Architecture {
    /// Length of one tracklet embedding: last width times the five feature columns.
    pub fn embedding_dim(&self) -> usize {
        self.widths[2] * NUM_FEATURES
    }

    pub fn num_learnable(&self) -> usize {
        let mut n = 0;
        let mut cin = 1;
        for &cout in &self.widths {
            n += cout * cin * (TEMPORAL_KERNEL + SPATIAL_KERNEL) + 4 * cout;
            cin = cout;
        }
        let e = 2 * self.embedding_dim();
        n + self.hidden * e + self.hidden + 2 * self.hidden + 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm uses statistics of the current batch.
    Train,
    /// Batch-norm uses running statistics.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    Time,
    Feature,
}

impl Axis {
    fn kernel(self) -> usize {
        match self {
            Axis::Time => TEMPORAL_KERNEL,
            Axis::Feature => SPATIAL_KERNEL,
        }
    }
}

/// Convolution (no bias) followed by batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn {
    axis: Axis,
    pub cin: usize,
    pub cout: usize,
    /// `cout x cin x kernel`, row-major.
    pub weight: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl ConvBn {
    fn new(axis: Axis, cin: usize, cout: usize) -> Self {
        Self {
            axis,
            cin,
            cout,
            weight: vec![0.0; cout * cin * axis.kernel()],
            gamma: vec![1.0; cout],
            beta: vec![0.0; cout],
            running_mean: vec![0.0; cout],
            running_var: vec![1.0; cout],
        }
    }

    pub fn kernel(&self) -> usize {
        self.axis.kernel()
    }
}

/// Fully connected layer, `weight` is `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn new(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }
}

/// All weights and batch-norm statistics of the link network.
///
/// Gradients use the same layout; their running-statistics entries are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkerParams {
    arch: Architecture,
    pub temporal: Vec<ConvBn>,
    pub spatial: Vec<ConvBn>,
    pub fc1: Dense,
    pub fc2: Dense,
}

/// Borrowed view of one named tensor.
#[derive(Debug, Clone, Copy)]
pub struct TensorView<'a> {
    pub dims: [usize; 3],
    pub rank: usize,
    pub data: &'a [f64],
    pub learnable: bool,
}

impl TensorView<'_> {
    pub fn shape(&self) -> &[usize] {
        &self.dims[..self.rank]
    }
}

impl LinkerParams {
    /// Zero weights, unit batch-norm scale and running variance.
    pub fn zeros(arch: Architecture) -> Self {
        let branch = |axis| {
            let mut cin = 1;
            arch.widths
                .iter()
                .map(|&cout| {
                    let layer = ConvBn::new(axis, cin, cout);
                    cin = cout;
                    layer
                })
                .collect::<Vec<_>>()
        };
        Self {
            arch,
            temporal: branch(Axis::Time),
            spatial: branch(Axis::Feature),
            fc1: Dense::new(2 * arch.embedding_dim(), arch.hidden),
            fc2: Dense::new(arch.hidden, 2),
        }
    }

    /// Seeded Glorot-uniform weights, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut p = Self::zeros(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |data: &mut [f64], fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in data {
                *v = f64::from(rng.random_range(-limit..limit) as f32);
            }
        };
        for layer in p.temporal.iter_mut().chain(p.spatial.iter_mut()) {
            let k = layer.kernel();
            fill(&mut layer.weight, layer.cin * k, layer.cout * k);
        }
        for fc in [&mut p.fc1, &mut p.fc2] {
            fill(&mut fc.weight, fc.inputs, fc.outputs);
        }
        p
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.arch);
        for layer in z.temporal.iter_mut().chain(z.spatial.iter_mut()) {
            layer.gamma.fill(0.0);
            layer.running_var.fill(0.0);
        }
        z
    }

    /// Every tensor in canonical (serialization) order.
    pub fn tensors(&self) -> Vec<(String, TensorView<'_>)> {
        let mut out = Vec::new();
        for (prefix, branch) in [("temporal", &self.temporal), ("spatial", &self.spatial)] {
            for (i, l) in branch.iter().enumerate() {
                let conv = [l.cout, l.cin, l.kernel()];
                out.push((
                    format!("{prefix}.{i}.weight"),
                    TensorView {
                        dims: conv,
                        rank: 3,
                        data: &l.weight,
                        learnable: true,
                    },
                ));
                for (suffix, data, learnable) in [
                    ("bn.weight", &l.gamma, true),
                    ("bn.bias", &l.beta, true),
                    ("bn.running_mean", &l.running_mean, false),
                    ("bn.running_var", &l.running_var, false),
                ] {
                    out.push((
                        format!("{prefix}.{i}.{suffix}"),
                        TensorView {
                            dims: [l.cout, 0, 0],
                            rank: 1,
                            data,
                            learnable,
                        },
                    ));
                }
            }
        }
        for (name, fc) in [("mlp.fc1", &self.fc1), ("mlp.fc2", &self.fc2)] {
            out.push((
                format!("{name}.weight"),
                TensorView {
                    dims: [fc.outputs, fc.inputs, 0],
                    rank: 2,
                    data: &fc.weight,
                    learnable: true,
                },
            ));
            out.push((
                format!("{name}.bias"),
                TensorView {
                    dims: [fc.outputs, 0, 0],
                    rank: 1,
                    data: &fc.bias,
                    learnable: true,
                },
            ));
        }
        out
    }

    /// Mutable buffers in the same order as [`LinkerParams::tensors`].
    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for l in self.temporal.iter_mut().chain(self.spatial.iter_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.gamma);
            out.push(&mut l.beta);
            out.push(&mut l.running_mean);
            out.push(&mut l.running_var);
        }
        for fc in [&mut self.fc1, &mut self.fc2] {
            out.push(&mut fc.weight);
            out.push(&mut fc.bias);
        }
        out
    }

    /// Learnable buffers only, canonical order.
    pub fn learnable_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let flags: Vec<bool> = self.tensors().iter().map(|(_, t)| t.learnable).collect();
        self.buffers_mut()
            .into_iter()
            .zip(flags)
            .filter(|(_, l)| *l)
            .map(|(b, _)| b)
            .collect()
    }

    pub fn learnable(&self) -> Vec<&[f64]> {
        self.tensors()
            .into_iter()
            .filter(|(_, t)| t.learnable)
            .map(|(_, t)| t.data)
            .collect()
    }

    pub fn num_learnable(&self) -> usize {
        self.learnable().iter().map(|t| t.len()).sum()
    }

    /// Rounds every value to the nearest `f32`, the precision weights are stored at.
    pub fn round_to_f32(&mut self) {
        for buf in self.buffers_mut() {
            buf.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Intermediate values of one scored pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub e_a: Vec<f64>,
    pub e_b: Vec<f64>,
    pub e_o: Vec<f64>,
    pub s0: f64,
    pub s1: f64,
    pub p_hat: f64,
}

/// `c = op(a) * op(b) + beta * c` for row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assert above bounds every index touched with these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shift (in flat window offsets) and valid index range for kernel tap `k`.
fn tap_offset(axis: Axis, k: usize) -> isize {
    let centre = (axis.kernel() / 2) as isize;
    match axis {
        Axis::Time => (k as isize - centre) * NUM_FEATURES as isize,
        Axis::Feature => k as isize - centre,
    }
}

/// Destination range `[lo, hi)` of a shifted copy of length `len`.
fn valid_range(len: usize, shift: isize) -> (usize, usize) {
    let n = len as isize;
    ((-shift).max(0) as usize, (n - shift).min(n) as usize)
}

/// Appends one window of `src` read at `pos + shift`, zero outside the window.
fn push_shifted(axis: Axis, src: &[f64], out: &mut Vec<f64>, shift: isize) {
    match axis {
        Axis::Time => {
            let (lo, hi) = valid_range(WINDOW_SIZE, shift);
            out.resize(out.len() + lo, 0.0);
            out.extend_from_slice(&src[(lo as isize + shift) as usize..(hi as isize + shift) as usize]);
            out.resize(out.len() + WINDOW_SIZE - hi, 0.0);
        }
        Axis::Feature => {
            let (lo, hi) = valid_range(NUM_FEATURES, shift);
            for row in src.chunks_exact(NUM_FEATURES) {
                out.resize(out.len() + lo, 0.0);
                out.extend_from_slice(&row[(lo as isize + shift) as usize..(hi as isize + shift) as usize]);
                out.resize(out.len() + NUM_FEATURES - hi, 0.0);
            }
        }
    }
}

/// Adjoint of [`push_shifted`]: `dst[pos + shift] += src[pos]` over valid positions.
fn add_shifted(axis: Axis, src: &[f64], dst: &mut [f64], shift: isize) {
    let add = |src: &[f64], dst: &mut [f64], len: usize| {
        let (lo, hi) = valid_range(len, shift);
        let d = &mut dst[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
        d.iter_mut().zip(&src[lo..hi]).for_each(|(d, s)| *d += s);
    };
    match axis {
        Axis::Time => add(src, dst, WINDOW_SIZE),
        Axis::Feature => {
            for (s, d) in src.chunks_exact(NUM_FEATURES).zip(dst.chunks_exact_mut(NUM_FEATURES)) {
                add(s, d, NUM_FEATURES);
            }
        }
    }
}

/// Unfolds `input` (`cin x P`) into `(cin * kernel) x P` columns.
fn im2col(axis: Axis, input: &[f64], cin: usize, nwin: usize) -> Vec<f64> {
    let kernel = axis.kernel();
    let p = nwin * WINDOW_SIZE;
    let mut col = Vec::with_capacity(cin * kernel * p);
    for ci in 0..cin {
        let src_c = &input[ci * p..(ci + 1) * p];
        for k in 0..kernel {
            let shift = tap_offset(axis, k);
            for src in src_c.chunks_exact(WINDOW_SIZE) {
                push_shifted(axis, src, &mut col, shift);
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: accumulates column gradients back onto the input.
fn col2im(axis: Axis, dcol: &[f64], cin: usize, nwin: usize) -> Vec<f64> {
    let kernel = axis.kernel();
    let p = nwin * WINDOW_SIZE;
    let mut dinput = vec![0.0; cin * p];
    for (ci, dst_c) in dinput.chunks_exact_mut(p).enumerate() {
        for k in 0..kernel {
            let shift = tap_offset(axis, k);
            let src_row = &dcol[(ci * kernel + k) * p..(ci * kernel + k + 1) * p];
            for (src, dst) in src_row
                .chunks_exact(WINDOW_SIZE)
                .zip(dst_c.chunks_exact_mut(WINDOW_SIZE))
            {
                add_shifted(axis, src, dst, shift);
            }
        }
    }
    dinput
}

#[derive(Debug, Default, Clone)]
struct LayerCache {
    col: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    out: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

fn conv_bn_forward(layer: &ConvBn, input: &[f64], nwin: usize, mode: Mode) -> LayerCache {
    let p = nwin * WINDOW_SIZE;
    let k = layer.cin * layer.kernel();
    let mut cache = LayerCache {
        col: im2col(layer.axis, input, layer.cin, nwin),
        ..LayerCache::default()
    };
    let mut z = vec![0.0; layer.cout * p];
    gemm(layer.cout, k, p, &layer.weight, false, &cache.col, false, 0.0, &mut z);
    cache.mean = vec![0.0; layer.cout];
    cache.var = vec![0.0; layer.cout];
    cache.inv_std = vec![0.0; layer.cout];
    for c in 0..layer.cout {
        let row = &z[c * p..(c + 1) * p];
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = row.iter().sum::<f64>() / p as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
                (mean, var)
            }
            Mode::Eval => (layer.running_mean[c], layer.running_var[c]),
        };
        cache.mean[c] = mean;
        cache.var[c] = var;
        cache.inv_std[c] = 1.0 / (var + BN_EPS).sqrt();
    }
    let mut out = z;
    let mut xhat = Vec::with_capacity(layer.cout * p);
    for (c, row) in out.chunks_exact_mut(p).enumerate() {
        let (mean, inv, g, b) = (cache.mean[c], cache.inv_std[c], layer.gamma[c], layer.beta[c]);
        for o in row {
            let xh = (*o - mean) * inv;
            xhat.push(xh);
            *o = (g * xh + b).max(0.0);
        }
    }
    cache.xhat = xhat;
    cache.out = out;
    cache
}

/// Returns the gradient w.r.t. the layer input (unless `need_input_grad` is false).
fn conv_bn_backward(
    layer: &ConvBn,
    cache: LayerCache,
    mut dout: Vec<f64>,
    nwin: usize,
    mode: Mode,
    grad: &mut ConvBn,
    need_input_grad: bool,
) -> Option<Vec<f64>> {
    let p = nwin * WINDOW_SIZE;
    let pf = p as f64;
    for c in 0..layer.cout {
        let range = c * p..(c + 1) * p;
        let (dz, out, xhat) = (&mut dout[range.clone()], &cache.out[range.clone()], &cache.xhat[range]);
        let mut sum_dz = 0.0;
        let mut sum_dz_xhat = 0.0;
        for ((d, &o), &xh) in dz.iter_mut().zip(out).zip(xhat) {
            if o <= 0.0 {
                *d = 0.0;
            }
            sum_dz += *d;
            sum_dz_xhat += *d * xh;
        }
        grad.gamma[c] += sum_dz_xhat;
        grad.beta[c] += sum_dz;
        let scale = layer.gamma[c] * cache.inv_std[c];
        match mode {
            Mode::Train => {
                let (a, b) = (sum_dz / pf, sum_dz_xhat / pf);
                for (d, &xh) in dz.iter_mut().zip(xhat) {
                    *d = scale * (*d - a - xh * b);
                }
            }
            Mode::Eval => dz.iter_mut().for_each(|d| *d *= scale),
        }
    }
    let k = layer.cin * layer.kernel();
    gemm(layer.cout, p, k, &dout, false, &cache.col, true, 1.0, &mut grad.weight);
    if !need_input_grad {
        return None;
    }
    // the column buffer is dead after the weight gradient; overwrite it (beta = 0)
    let mut dcol = cache.col;
    gemm(k, layer.cout, p, &layer.weight, true, &dout, false, 0.0, &mut dcol);
    Some(col2im(layer.axis, &dcol, layer.cin, nwin))
}

struct EncoderCache {
    temporal: Vec<LayerCache>,
    spatial: Vec<LayerCache>,
    embeddings: Vec<f64>,
}

fn stack_windows(windows: &[&Window]) -> Vec<f64> {
    let mut input = Vec::with_capacity(windows.len() * WINDOW_SIZE);
    for w in windows {
        input.extend_from_slice(w.as_slice());
    }
    input
}

fn run_branch(layers: &[ConvBn], input: &[f64], nwin: usize, mode: Mode) -> Vec<LayerCache> {
    let mut caches: Vec<LayerCache> = Vec::with_capacity(layers.len());
    for layer in layers {
        let x = caches.last().map_or(input, |c| c.out.as_slice());
        let cache = conv_bn_forward(layer, x, nwin, mode);
        caches.push(cache);
    }
    caches
}

fn encode(params: &LinkerParams, windows: &[&Window], mode: Mode) -> EncoderCache {
    let nwin = windows.len();
    let input = stack_windows(windows);
    let temporal = run_branch(&params.temporal, &input, nwin, mode);
    let spatial = run_branch(&params.spatial, &input, nwin, mode);
    let c3 = params.arch.widths[2];
    let p = nwin * WINDOW_SIZE;
    let t3 = &temporal.last().expect("three layers").out;
    let s3 = &spatial.last().expect("three layers").out;
    let e = params.arch.embedding_dim();
    let mut embeddings = vec![0.0; nwin * e];
    let inv_t = 1.0 / WINDOW_LEN as f64;
    for c in 0..c3 {
        for n in 0..nwin {
            let base = c * p + n * WINDOW_SIZE;
            let emb = &mut embeddings[n * e + c * NUM_FEATURES..n * e + (c + 1) * NUM_FEATURES];
            for t in 0..WINDOW_LEN {
                let off = base + t * NUM_FEATURES;
                for f in 0..NUM_FEATURES {
                    emb[f] += t3[off + f] * s3[off + f];
                }
            }
            emb.iter_mut().for_each(|v| *v *= inv_t);
        }
    }
    EncoderCache {
        temporal,
        spatial,
        embeddings,
    }
}

/// Tracklet embeddings for a set of windows in eval mode (one row per window).
pub fn embed_windows(params: &LinkerParams, windows: &[&Window]) -> Vec<Vec<f64>> {
    if windows.is_empty() {
        return Vec::new();
    }
    let e = params.arch.embedding_dim();
    encode(params, windows, Mode::Eval)
        .embeddings
        .chunks(e)
        .map(<[f64]>::to_vec)
        .collect()
}

struct HeadCache {
    e_o: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

fn head_forward(params: &LinkerParams, e_o: Vec<f64>, batch: usize) -> HeadCache {
    let (fc1, fc2) = (&params.fc1, &params.fc2);
    let mut hidden = vec![0.0; batch * fc1.outputs];
    for b in 0..batch {
        hidden[b * fc1.outputs..(b + 1) * fc1.outputs].copy_from_slice(&fc1.bias);
    }
    gemm(
        batch,
        fc1.inputs,
        fc1.outputs,
        &e_o,
        false,
        &fc1.weight,
        true,
        1.0,
        &mut hidden,
    );
    hidden.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut logits = vec![0.0; batch * 2];
    for b in 0..batch {
        logits[b * 2..b * 2 + 2].copy_from_slice(&fc2.bias);
    }
    gemm(
        batch,
        fc2.inputs,
        2,
        &hidden,
        false,
        &fc2.weight,
        true,
        1.0,
        &mut logits,
    );
    HeadCache { e_o, hidden, logits }
}

/// `p_hat = exp(s1) / (exp(s0) + exp(s1))`, computed without overflow.
fn same_identity_probability(s0: f64, s1: f64) -> f64 {
    let d = s1 - s0;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Smoothed cross-entropy from logits; equals [`loss`] at `p_hat = softmax(s)[1]`.
fn loss_from_logits(s0: f64, s1: f64, target: f64) -> f64 {
    let d = s1 - s0;
    // -log(p) = softplus(-d), -log(1-p) = softplus(d)
    target * softplus(-d) + (1.0 - target) * softplus(d)
}

/// Smoothed binary cross-entropy of a same-identity probability.
///
/// The target is `label * (1 - eps) + (1 - label) * eps`; `eps = 0` gives the
/// plain binary cross-entropy.
pub fn loss(p_hat: f64, label: u8, eps: f64) -> Result<f64> {
    if !(p_hat > 0.0 && p_hat < 1.0) {
        return Err(LinkerError::Domain(format!("probability {p_hat} outside (0, 1)")));
    }
    if label > 1 {
        return Err(LinkerError::Domain(format!("label {label} is not 0 or 1")));
    }
    if !(0.0..0.5).contains(&eps) {
        return Err(LinkerError::Domain(format!("smoothing {eps} outside [0, 0.5)")));
    }
    let target = smoothed_target(label, eps);
    Ok(-target * p_hat.ln() - (1.0 - target) * (1.0 - p_hat).ln())
}

fn smoothed_target(label: u8, eps: f64) -> f64 {
    let l = f64::from(label);
    l * (1.0 - eps) + (1.0 - l) * eps
}

/// Result of a batched forward (and optionally backward) pass.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub traces: Vec<ForwardTrace>,
    /// Mean smoothed loss over the batch (zero when no labels were given).
    pub loss: f64,
    /// Per-layer batch `(mean, variance)` of each conv output, temporal then spatial.
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
    /// Fingerprint of every ReLU on/off decision in the pass.
    pub activation_signature: u64,
}

struct FullCache {
    nwin: usize,
    encoder: EncoderCache,
    head: HeadCache,
}

fn run_forward(
    params: &LinkerParams,
    pairs: &[(&Window, &Window)],
    mode: Mode,
) -> Result<(Vec<ForwardTrace>, FullCache)> {
    let batch = pairs.len();
    let windows: Vec<&Window> = pairs.iter().map(|p| p.0).chain(pairs.iter().map(|p| p.1)).collect();
    let encoder = encode(params, &windows, mode);
    if !encoder.embeddings.iter().all(|v| v.is_finite()) {
        return Err(LinkerError::NonFinite("tracklet embedding"));
    }
    let e = params.arch.embedding_dim();
    let mut e_o = Vec::with_capacity(batch * 2 * e);
    for b in 0..batch {
        e_o.extend_from_slice(&encoder.embeddings[b * e..(b + 1) * e]);
        e_o.extend_from_slice(&encoder.embeddings[(batch + b) * e..(batch + b + 1) * e]);
    }
    let head = head_forward(params, e_o, batch);
    if !head.logits.iter().all(|v| v.is_finite()) {
        return Err(LinkerError::NonFinite("logits"));
    }
    let traces = (0..batch)
        .map(|b| {
            let e_o = head.e_o[b * 2 * e..(b + 1) * 2 * e].to_vec();
            let (s0, s1) = (head.logits[2 * b], head.logits[2 * b + 1]);
            ForwardTrace {
                e_a: e_o[..e].to_vec(),
                e_b: e_o[e..].to_vec(),
                e_o,
                s0,
                s1,
                p_hat: same_identity_probability(s0, s1),
            }
        })
        .collect();
    Ok((
        traces,
        FullCache {
            nwin: windows.len(),
            encoder,
            head,
        },
    ))
}

fn activation_signature(cache: &FullCache) -> u64 {
    // FNV-1a over the sign pattern
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |xs: &[f64]| {
        for &x in xs {
            h ^= u64::from(x > 0.0);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for l in cache.encoder.temporal.iter().chain(&cache.encoder.spatial) {
        feed(&l.out);
    }
    feed(&cache.head.hidden);
    h
}

fn batch_stats(cache: &FullCache) -> Vec<(Vec<f64>, Vec<f64>)> {
    cache
        .encoder
        .temporal
        .iter()
        .chain(&cache.encoder.spatial)
        .map(|l| (l.mean.clone(), l.var.clone()))
        .collect()
}

/// Scores one ordered pair `(a, b)`.
pub fn forward(params: &LinkerParams, a: &Window, b: &Window, mode: Mode) -> Result<ForwardTrace> {
    let (mut traces, _) = run_forward(params, &[(a, b)], mode)?;
    Ok(traces.pop().expect("one trace per pair"))
}

/// Scores a batch of ordered pairs.
pub fn forward_batch(params: &LinkerParams, pairs: &[(&Window, &Window)], mode: Mode) -> Result<Vec<ForwardTrace>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    Ok(run_forward(params, pairs, mode)?.0)
}

/// MLP head on precomputed embeddings (eval mode only touches the head).
pub fn score_embeddings(params: &LinkerParams, e_a: &[f64], e_b: &[f64]) -> Result<f64> {
    let mut e_o = Vec::with_capacity(e_a.len() + e_b.len());
    e_o.extend_from_slice(e_a);
    e_o.extend_from_slice(e_b);
    let head = head_forward(params, e_o, 1);
    let (s0, s1) = (head.logits[0], head.logits[1]);
    if !(s0.is_finite() && s1.is_finite()) {
        return Err(LinkerError::NonFinite("logits"));
    }
    Ok(same_identity_probability(s0, s1))
}

/// Gradient of the mean smoothed loss over `samples` w.r.t. every learnable
/// tensor, with batch-norm in `mode`.
pub fn backward_batch(
    params: &LinkerParams,
    samples: &[LinkSample],
    eps: f64,
    mode: Mode,
) -> Result<(LinkerParams, BatchOutput)> {
    if samples.is_empty() {
        return Err(LinkerError::Domain("empty batch".into()));
    }
    let pairs: Vec<(&Window, &Window)> = samples.iter().map(|s| (&s.window_a, &s.window_b)).collect();
    let (traces, cache) = run_forward(params, &pairs, mode)?;
    let batch = samples.len();
    let inv_b = 1.0 / batch as f64;

    let mut total = 0.0;
    let mut dlogits = vec![0.0; batch * 2];
    for (b, (s, tr)) in samples.iter().zip(&traces).enumerate() {
        let target = smoothed_target(s.label, eps);
        total += loss_from_logits(tr.s0, tr.s1, target);
        let d = (tr.p_hat - target) * inv_b;
        dlogits[2 * b] = -d;
        dlogits[2 * b + 1] = d;
    }
    let mean_loss = total * inv_b;
    if !mean_loss.is_finite() {
        return Err(LinkerError::NonFinite("loss"));
    }

    let mut grad = params.zeros_like();
    let (fc1, fc2) = (&params.fc1, &params.fc2);
    let head = &cache.head;

    // fc2
    gemm(
        2,
        batch,
        fc2.inputs,
        &dlogits,
        true,
        &head.hidden,
        false,
        0.0,
        &mut grad.fc2.weight,
    );
    for b in 0..batch {
        grad.fc2.bias[0] += dlogits[2 * b];
        grad.fc2.bias[1] += dlogits[2 * b + 1];
    }
    let mut dhidden = vec![0.0; batch * fc1.outputs];
    gemm(
        batch,
        2,
        fc1.outputs,
        &dlogits,
        false,
        &fc2.weight,
        false,
        0.0,
        &mut dhidden,
    );
    for (d, &h) in dhidden.iter_mut().zip(&head.hidden) {
        if h <= 0.0 {
            *d = 0.0;
        }
    }
    // fc1
    gemm(
        fc1.outputs,
        batch,
        fc1.inputs,
        &dhidden,
        true,
        &head.e_o,
        false,
        0.0,
        &mut grad.fc1.weight,
    );
    for b in 0..batch {
        for (g, d) in grad
            .fc1
            .bias
            .iter_mut()
            .zip(&dhidden[b * fc1.outputs..(b + 1) * fc1.outputs])
        {
            *g += d;
        }
    }
    let mut de_o = vec![0.0; batch * fc1.inputs];
    gemm(
        batch,
        fc1.outputs,
        fc1.inputs,
        &dhidden,
        false,
        &fc1.weight,
        false,
        0.0,
        &mut de_o,
    );

    // split concatenated embeddings back onto windows
    let e = params.arch.embedding_dim();
    let nwin = cache.nwin;
    let mut demb = vec![0.0; nwin * e];
    for b in 0..batch {
        demb[b * e..(b + 1) * e].copy_from_slice(&de_o[b * 2 * e..b * 2 * e + e]);
        demb[(batch + b) * e..(batch + b + 1) * e].copy_from_slice(&de_o[b * 2 * e + e..(b + 1) * 2 * e]);
    }

    // time-average pooling and multiplicative fusion
    let c3 = params.arch.widths[2];
    let p = nwin * WINDOW_SIZE;
    let t3 = &cache.encoder.temporal.last().expect("layers").out;
    let s3 = &cache.encoder.spatial.last().expect("layers").out;
    let mut dt3 = vec![0.0; c3 * p];
    let mut ds3 = vec![0.0; c3 * p];
    let inv_t = 1.0 / WINDOW_LEN as f64;
    for c in 0..c3 {
        for n in 0..nwin {
            let g = &demb[n * e + c * NUM_FEATURES..n * e + (c + 1) * NUM_FEATURES];
            let base = c * p + n * WINDOW_SIZE;
            for t in 0..WINDOW_LEN {
                let off = base + t * NUM_FEATURES;
                for f in 0..NUM_FEATURES {
                    let df = g[f] * inv_t;
                    dt3[off + f] = df * s3[off + f];
                    ds3[off + f] = df * t3[off + f];
                }
            }
        }
    }

    let signature = activation_signature(&cache);
    let stats = batch_stats(&cache);
    let FullCache {
        encoder: EncoderCache { temporal, spatial, .. },
        ..
    } = cache;
    for (layers, caches, grads, dtop) in [
        (&params.temporal, temporal, &mut grad.temporal, dt3),
        (&params.spatial, spatial, &mut grad.spatial, ds3),
    ] {
        let mut d = dtop;
        for (i, layer_cache) in caches.into_iter().enumerate().rev() {
            match conv_bn_backward(&layers[i], layer_cache, d, nwin, mode, &mut grads[i], i > 0) {
                Some(next) => d = next,
                None => break,
            }
        }
    }

    let output = BatchOutput {
        activation_signature: signature,
        batch_stats: stats,
        traces,
        loss: mean_loss,
    };
    Ok((grad, output))
}

/// Gradient of the smoothed loss of a single pair, batch-norm in training mode.
pub fn backward(params: &LinkerParams, sample: &LinkSample, eps: f64) -> Result<LinkerParams> {
    Ok(backward_batch(params, std::slice::from_ref(sample), eps, Mode::Train)?.0)
}

/// Mean loss and ReLU fingerprint without computing gradients.
///
/// Finite-difference checks compare the fingerprint against
/// [`BatchOutput::activation_signature`] to skip steps that cross a ReLU kink.
pub fn batch_loss(params: &LinkerParams, samples: &[LinkSample], eps: f64, mode: Mode) -> Result<(f64, u64)> {
    let pairs: Vec<(&Window, &Window)> = samples.iter().map(|s| (&s.window_a, &s.window_b)).collect();
    let (traces, cache) = run_forward(params, &pairs, mode)?;
    let total: f64 = samples
        .iter()
        .zip(&traces)
        .map(|(s, tr)| loss_from_logits(tr.s0, tr.s1, smoothed_target(s.label, eps)))
        .sum();
    Ok((total / samples.len() as f64, activation_signature(&cache)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_window(rng: &mut ChaCha8Rng) -> Window {
        let mut rows = [[0.0; NUM_FEATURES]; WINDOW_LEN];
        let (x0, y0) = (rng.random_range(0.1..0.8), rng.random_range(0.1..0.6));
        let (vx, vy) = (rng.random_range(-0.004..0.004), rng.random_range(-0.002..0.002));
        let (w, h) = (rng.random_range(0.02..0.08), rng.random_range(0.1..0.3));
        for (t, row) in rows.iter_mut().enumerate() {
            let tf = t as f64;
            *row = [
                tf / 30.0,
                x0 + vx * tf + rng.random_range(-0.001..0.001),
                y0 + vy * tf + rng.random_range(-0.001..0.001),
                w,
                h,
            ];
        }
        Window::from_rows(&rows)
    }

    fn random_sample(rng: &mut ChaCha8Rng) -> LinkSample {
        LinkSample {
            window_a: random_window(rng),
            window_b: random_window(rng),
            label: rng.random_range(0..2),
        }
    }

    fn perturbed(params: &LinkerParams, tensor: usize, idx: usize, delta: f64) -> LinkerParams {
        let mut p = params.clone();
        p.learnable_mut()[tensor][idx] += delta;
        p
    }

    #[test]
    fn default_architecture_counts() {
        let arch = Architecture::default();
        let p = LinkerParams::init(arch, 1);
        assert_eq!(p.num_learnable(), arch.num_learnable());
        assert!(p.num_learnable() <= 2_700_000);
    }

    #[test]
    fn probability_in_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = LinkerParams::init(Architecture::default(), 5);
        let w = random_window(&mut rng);
        for mode in [Mode::Train, Mode::Eval] {
            let tr = forward(&p, &w, &w, mode).unwrap();
            assert!(tr.p_hat > 0.0 && tr.p_hat < 1.0);
            let (e0, e1) = ((tr.s0).exp(), (tr.s1).exp());
            assert!((e0 / (e0 + e1) + e1 / (e0 + e1) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_final_layer_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = LinkerParams::init(Architecture::default(), 6);
        p.fc2.weight.fill(0.0);
        p.fc2.bias.fill(0.0);
        let tr = forward(&p, &random_window(&mut rng), &random_window(&mut rng), Mode::Eval).unwrap();
        assert_eq!(tr.p_hat, 0.5);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = LinkerParams::init(Architecture::default(), 11);
        let (a, b) = (random_window(&mut rng), random_window(&mut rng));
        let first = forward(&p, &a, &b, Mode::Eval).unwrap();
        for _ in 0..3 {
            assert_eq!(
                forward(&p, &a, &b, Mode::Eval).unwrap().p_hat.to_bits(),
                first.p_hat.to_bits()
            );
        }
    }

    #[test]
    fn swapping_inputs_swaps_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = LinkerParams::init(Architecture::default(), 12);
        let (a, b) = (random_window(&mut rng), random_window(&mut rng));
        let ab = forward(&p, &a, &b, Mode::Eval).unwrap();
        let ba = forward(&p, &b, &a, Mode::Eval).unwrap();
        assert_eq!(ab.e_a, ba.e_b);
        assert_eq!(ab.e_b, ba.e_a);
        let e = ab.e_a.len();
        assert_eq!(&ab.e_o[..e], &ba.e_o[e..]);
    }

    #[test]
    fn eval_embeddings_match_pair_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = LinkerParams::init(Architecture::default(), 14);
        let (a, b) = (random_window(&mut rng), random_window(&mut rng));
        let tr = forward(&p, &a, &b, Mode::Eval).unwrap();
        let emb = embed_windows(&p, &[&a, &b]);
        assert_eq!(emb[0], tr.e_a);
        assert_eq!(emb[1], tr.e_b);
        assert_eq!(score_embeddings(&p, &emb[0], &emb[1]).unwrap(), tr.p_hat);
    }

    #[test]
    fn loss_values() {
        assert!((loss(0.5, 1, 0.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((loss(0.5, 0, 0.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for delta in [1e-2, 1e-4, 1e-8] {
            let l = loss(1.0 - delta, 1, 0.0).unwrap();
            assert!(l < prev && l < 2.0 * delta);
            prev = l;
        }
        assert!(loss(0.0, 1, 0.0).is_err());
        assert!(loss(1.0, 0, 0.0).is_err());
        assert!(loss(0.3, 1, 0.5).is_err());
        // logits form agrees with the probability form
        let (s0, s1) = (0.3, -1.2);
        let p = same_identity_probability(s0, s1);
        for label in [0, 1] {
            let t = smoothed_target(label, 0.1);
            assert!((loss(p, label, 0.1).unwrap() - loss_from_logits(s0, s1, t)).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_are_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for seed in 0..5 {
            let p = LinkerParams::init(Architecture::default(), seed);
            let g = backward(&p, &random_sample(&mut rng), 0.1).unwrap();
            assert!(g.is_finite());
        }
    }

    #[test]
    fn dead_channel_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut p = LinkerParams::init(Architecture::default(), 23);
        // channel 0 of the first temporal layer is clamped to zero by its ReLU
        p.temporal[0].beta[0] = -1e3;
        let g = backward(&p, &random_sample(&mut rng), 0.1).unwrap();
        let k = p.temporal[0].kernel();
        assert!(g.temporal[0].weight[..k].iter().all(|&v| v == 0.0));
        assert_eq!(g.temporal[0].gamma[0], 0.0);
        assert_eq!(g.temporal[0].beta[0], 0.0);
    }

    /// Central differences over every learnable coordinate for one draw.
    #[test]
    fn every_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let arch = Architecture {
            widths: [4, 6, 6],
            hidden: 16,
        };
        let params = LinkerParams::init(arch, 32);
        let samples = vec![random_sample(&mut rng), random_sample(&mut rng)];
        let (grad, out) = backward_batch(&params, &samples, 0.1, Mode::Train).unwrap();
        let analytic: Vec<Vec<f64>> = grad.learnable().iter().map(|t| t.to_vec()).collect();
        let h = 1e-4;
        let mut checked = 0;
        for (ti, tensor) in analytic.iter().enumerate() {
            for (i, &a) in tensor.iter().enumerate() {
                let (lp, sp) = batch_loss(&perturbed(&params, ti, i, h), &samples, 0.1, Mode::Train).unwrap();
                let (lm, sm) = batch_loss(&perturbed(&params, ti, i, -h), &samples, 0.1, Mode::Train).unwrap();
                if sp != out.activation_signature || sm != out.activation_signature {
                    continue;
                }
                let fd = (lp - lm) / (2.0 * h);
                let err = (a - fd).abs();
                assert!(
                    err <= 1e-4 * a.abs().max(fd.abs()) || err <= 1e-9,
                    "tensor {ti} index {i}: analytic {a} fd {fd}"
                );
                checked += 1;
            }
        }
        assert!(
            checked > arch.num_learnable() * 9 / 10,
            "{checked} of {}",
            arch.num_learnable()
        );
    }

    #[test]
    fn eval_mode_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let arch = Architecture {
            widths: [3, 4, 4],
            hidden: 8,
        };
        let mut params = LinkerParams::init(arch, 42);
        for l in params.temporal.iter_mut().chain(params.spatial.iter_mut()) {
            l.running_mean.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
            l.running_var.iter_mut().for_each(|v| *v = rng.random_range(0.01..0.1));
        }
        let samples = vec![random_sample(&mut rng)];
        let (grad, out) = backward_batch(&params, &samples, 0.0, Mode::Eval).unwrap();
        let h = 1e-4;
        for (ti, tensor) in grad.learnable().iter().enumerate() {
            for (i, &a) in tensor.iter().enumerate().step_by(3) {
                let (lp, sp) = batch_loss(&perturbed(&params, ti, i, h), &samples, 0.0, Mode::Eval).unwrap();
                let (lm, sm) = batch_loss(&perturbed(&params, ti, i, -h), &samples, 0.0, Mode::Eval).unwrap();
                if sp != out.activation_signature || sm != out.activation_signature {
                    continue;
                }
                let fd = (lp - lm) / (2.0 * h);
                let err = (a - fd).abs();
                assert!(
                    err <= 1e-4 * a.abs().max(fd.abs()) || err <= 1e-9,
                    "tensor {ti} index {i}: analytic {a} fd {fd}"
                );
            }
        }
    }
}
