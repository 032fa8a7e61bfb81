use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::net::{backward_batch, Architecture, LinkerParams, Mode, BN_MOMENTUM};
use super::{LinkSample, LinkerError, Result};

/// Optimization and sampling settings for the link model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Pairs per optimizer step; at least 2.
    pub batch_size: usize,
    /// Label smoothing `eps` of the cross-entropy target.
    pub label_smoothing: f64,
    /// Negatives drawn per positive.
    pub neg_pos_ratio: f64,
    pub seed: u64,
    /// `(width, height)` in pixels used to normalize windows.
    pub image_size: (f64, f64),
    /// Total pairs drawn by [`super::generate_samples`].
    pub num_samples: usize,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            epochs: 60,
            batch_size: 32,
            label_smoothing: 0.1,
            neg_pos_ratio: 3.0,
            seed: 0,
            image_size: (1920.0, 1080.0),
            num_samples: 10_000,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(LinkerError::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size < 2 {
            return fail(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if !(0.0..=0.2).contains(&self.label_smoothing) {
            return fail(format!(
                "label smoothing must lie in [0, 0.2], got {}",
                self.label_smoothing
            ));
        }
        if !(self.neg_pos_ratio > 0.0 && self.neg_pos_ratio.is_finite()) {
            return fail(format!(
                "negative/positive ratio must be positive, got {}",
                self.neg_pos_ratio
            ));
        }
        let (w, h) = self.image_size;
        if !(w > 0.0 && h > 0.0) {
            return fail(format!("image size must be positive, got {w}x{h}"));
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate at epoch `t` of `epochs`.
pub fn cosine_lr(lr0: f64, t: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / epochs as f64).cos())
}

/// Adam with bias correction, over the learnable tensors of [`LinkerParams`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &LinkerParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.learnable().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut LinkerParams, grads: &LinkerParams, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .learnable_mut()
            .into_iter()
            .zip(grads.learnable())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: LinkerParams,
    /// Mean training loss of each epoch, in order.
    pub history: Vec<f64>,
}

fn update_running_stats(params: &mut LinkerParams, stats: &[(Vec<f64>, Vec<f64>)], positions: usize) {
    let unbias = positions as f64 / (positions as f64 - 1.0);
    for (layer, (mean, var)) in params.temporal.iter_mut().chain(params.spatial.iter_mut()).zip(stats) {
        for c in 0..layer.cout {
            layer.running_mean[c] = BN_MOMENTUM * layer.running_mean[c] + (1.0 - BN_MOMENTUM) * mean[c];
            layer.running_var[c] = BN_MOMENTUM * layer.running_var[c] + (1.0 - BN_MOMENTUM) * var[c] * unbias;
        }
    }
}

/// Splits shuffled indices into batches of `size`, folding a lone trailing pair into the previous batch.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}

/// Trains a freshly initialized network with Adam and a cosine schedule.
pub fn train(samples: &[LinkSample], config: &TrainConfig) -> Result<TrainOutcome> {
    train_from(LinkerParams::init(config.architecture, config.seed), samples, config)
}

/// Continues training from `params`.
pub fn train_from(mut params: LinkerParams, samples: &[LinkSample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(LinkerError::InsufficientData("no training samples".into()));
    }
    let mut adam = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a11);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut batch: Vec<LinkSample> = Vec::with_capacity(config.batch_size + 1);

    for epoch in 0..config.epochs {
        let lr = cosine_lr(config.learning_rate, epoch, config.epochs);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in batches(&order, config.batch_size) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| samples[i].clone()));
            let (grads, out) = backward_batch(&params, &batch, config.label_smoothing, Mode::Train)
                .map_err(|_| LinkerError::Diverged { epoch, loss: f64::NAN })?;
            adam.step(&mut params, &grads, lr);
            update_running_stats(&mut params, &out.batch_stats, 2 * batch.len() * super::WINDOW_SIZE);
            total += out.loss * batch.len() as f64;
        }
        let mean = total / samples.len() as f64;
        if !mean.is_finite() || !params.is_finite() {
            return Err(LinkerError::Diverged { epoch, loss: mean });
        }
        history.push(mean);
    }
    params.round_to_f32();
    Ok(TrainOutcome { params, history })
}
