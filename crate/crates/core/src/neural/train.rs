//! Loss, optimizers and the behavior-cloning training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{input_from_rgb8, PolicyNet, OUTPUTS};
use super::tensor::{Scalar, Tensor};
use crate::dataset::DemoDataset;
use crate::error::NeuralError;
use crate::geometry::Twist;

pub const DEFAULT_TWIST_SCALES: [f64; 6] = [0.25, 0.25, 0.25, 0.8, 0.8, 0.8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    /// Momentum for `sgd_momentum`.
    pub momentum: f64,
    pub seed: u64,
    pub twist_scales: [f64; 6],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            momentum: 0.9,
            seed: 0,
            twist_scales: DEFAULT_TWIST_SCALES,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |msg: String| Err(NeuralError::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(0.0..1.0).contains(&self.momentum) {
            return bad("beta1, beta2 and momentum must lie in [0, 1)".into());
        }
        if self.twist_scales.iter().any(|s| !(*s > 0.0)) {
            return bad(format!("twist scales must be positive: {:?}", self.twist_scales));
        }
        Ok(())
    }
}

/// Mean squared error over the six scale-normalized twist components.
pub fn twist_loss(pred: &Twist, target: &Twist, scales: &[f64; 6]) -> Result<f64, NeuralError> {
    if scales.iter().any(|s| !(*s > 0.0)) {
        return Err(NeuralError::Config(format!("twist scales must be positive: {scales:?}")));
    }
    if pred.frame != target.frame {
        return Err(NeuralError::Shape("prediction and target are in different frames".into()));
    }
    let (p, t) = (pred.to_array(), target.to_array());
    Ok((0..6).map(|i| ((p[i] - t[i]) / scales[i]).powi(2)).sum::<f64>() / 6.0)
}

/// One training example: planar network input and normalized target.
pub struct Sample<T> {
    pub input: Vec<T>,
    pub target: [T; 6],
}

impl<T: Scalar> Sample<T> {
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8], twist: &[f32; 6], scales: &[f64; 6]) -> Self {
        let mut target = [T::zero(); 6];
        for i in 0..6 {
            target[i] = T::from_f64(twist[i] as f64 / scales[i]);
        }
        Sample { input: input_from_rgb8(width, height, rgb), target }
    }
}

/// Mean normalized MSE of a batch; gradients of that mean are accumulated
/// into `grads`.
pub fn batch_gradients<T: Scalar>(
    net: &PolicyNet<T>,
    batch: &[&Sample<T>],
    grads: &mut [Tensor<T>],
) -> Result<f64, NeuralError> {
    if batch.is_empty() {
        return Err(NeuralError::Shape("empty batch".into()));
    }
    let inv_n = T::from_f64(1.0 / batch.len() as f64);
    let two_over_k = T::from_f64(2.0 / OUTPUTS as f64);
    let mut total = 0.0;
    for sample in batch {
        let cache = net.forward_cached(&sample.input)?;
        let out = cache.output();
        let mut dout = [T::zero(); OUTPUTS];
        let mut loss = 0.0;
        for i in 0..OUTPUTS {
            let diff = out[i] - sample.target[i];
            loss += diff.as_f64() * diff.as_f64();
            dout[i] = two_over_k * diff * inv_n;
        }
        total += loss / OUTPUTS as f64;
        net.backward(&cache, &dout, grads)?;
    }
    Ok(total / batch.len() as f64)
}

/// Mean loss without gradients.
pub fn batch_loss<T: Scalar>(net: &PolicyNet<T>, batch: &[&Sample<T>]) -> Result<f64, NeuralError> {
    let mut total = 0.0;
    for sample in batch {
        let out = net.predict(&sample.input)?;
        total += (0..OUTPUTS).map(|i| (out[i] - sample.target[i]).as_f64().powi(2)).sum::<f64>() / OUTPUTS as f64;
    }
    Ok(total / batch.len().max(1) as f64)
}

pub enum Optimizer<T> {
    Adam { lr: f64, beta1: f64, beta2: f64, step: i32, m: Vec<Tensor<T>>, v: Vec<Tensor<T>> },
    Sgd { lr: f64, momentum: f64, velocity: Vec<Tensor<T>> },
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: &TrainConfig, net: &PolicyNet<T>) -> Self {
        match cfg.optimizer {
            OptimizerKind::Adam => Optimizer::Adam {
                lr: cfg.learning_rate,
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                step: 0,
                m: net.zero_grads(),
                v: net.zero_grads(),
            },
            OptimizerKind::SgdMomentum => Optimizer::Sgd {
                lr: cfg.learning_rate,
                momentum: cfg.momentum,
                velocity: net.zero_grads(),
            },
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        match self {
            Optimizer::Adam { lr, beta1, beta2, step, m, v } => {
                *step += 1;
                let (b1, b2) = (T::from_f64(*beta1), T::from_f64(*beta2));
                let one = T::one();
                let c1 = 1.0 - beta1.powi(*step);
                let c2 = 1.0 - beta2.powi(*step);
                let alpha = T::from_f64(*lr * c2.sqrt() / c1);
                let eps = T::from_f64(1e-8 * c2.sqrt());
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
                    for (i, &g) in g.data().iter().enumerate() {
                        m[i] = b1 * m[i] + (one - b1) * g;
                        v[i] = b2 * v[i] + (one - b2) * g * g;
                        p[i] = p[i] - alpha * m[i] / (v[i].sqrt() + eps);
                    }
                }
            }
            Optimizer::Sgd { lr, momentum, velocity } => {
                let (lr, mu) = (T::from_f64(*lr), T::from_f64(*momentum));
                for ((p, g), vel) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
                    let (p, vel) = (p.data_mut(), vel.data_mut());
                    for (i, &g) in g.data().iter().enumerate() {
                        vel[i] = mu * vel[i] + g;
                        p[i] = p[i] - lr * vel[i];
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss over each epoch's mini-batches.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub frames: usize,
    pub parameter_count: usize,
}

pub fn dataset_samples(ds: &DemoDataset, scales: &[f64; 6]) -> Vec<Sample<f32>> {
    ds.frames()
        .map(|f| Sample::from_rgb8(ds.width, ds.height, &f.pixels, &f.twist, scales))
        .collect()
}

/// Trains a freshly initialized network on `ds`. Fully sequential, so a
/// fixed seed reproduces the parameters bit for bit.
pub fn train(ds: &DemoDataset, cfg: &TrainConfig) -> Result<(PolicyNet<f32>, TrainReport), NeuralError> {
    train_with_progress(ds, cfg, |_, _| {})
}

pub fn train_with_progress(
    ds: &DemoDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(PolicyNet<f32>, TrainReport), NeuralError> {
    cfg.validate()?;
    let samples = dataset_samples(ds, &cfg.twist_scales);
    if samples.is_empty() {
        return Err(NeuralError::Config("training dataset is empty".into()));
    }
    if cfg.batch_size > samples.len() {
        return Err(NeuralError::Config(format!(
            "batch_size {} exceeds dataset size {}",
            cfg.batch_size,
            samples.len()
        )));
    }
    let mut net = PolicyNet::<f32>::new(ds.width, ds.height, cfg.twist_scales, cfg.seed)?;
    let mut opt = Optimizer::new(cfg, &net);
    let mut grads = net.zero_grads();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed_0f_5a3b1e5));
    let mut report = TrainReport { frames: samples.len(), parameter_count: net.parameter_count(), ..Default::default() };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample<f32>> = chunk.iter().map(|&i| &samples[i]).collect();
            grads.iter_mut().for_each(Tensor::fill_zero);
            let loss = batch_gradients(&net, &batch, &mut grads)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(NeuralError::Divergence { epoch, batch: b });
            }
            opt.step(net.params_mut(), &grads);
            epoch_loss += loss;
            batches += 1;
            report.steps += 1;
        }
        let mean = epoch_loss / batches as f64;
        report.epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Frame, Vec3};

    #[test]
    fn loss_examples() {
        let s = DEFAULT_TWIST_SCALES;
        let a = Twist::ee(Vec3::new(0.1, 0.2, -0.1), Vec3::new(0.3, 0.0, 0.1));
        assert_eq!(twist_loss(&a, &a, &s).unwrap(), 0.0);
        let b = Twist::ee(a.linear + Vec3::X * s[0], a.angular);
        assert!((twist_loss(&b, &a, &s).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(twist_loss(&a, &b, &s).unwrap(), twist_loss(&b, &a, &s).unwrap());
        assert!(twist_loss(&a, &b, &[0.0, 1.0, 1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(twist_loss(&a, &Twist::zero(Frame::World), &s).is_err());
    }

    fn toy_samples() -> Vec<Sample<f64>> {
        (0..3)
            .map(|k| Sample {
                input: (0..3 * 16 * 16).map(|i| (((i + 7 * k) * 31 % 53) as f64) / 53.0 - 0.5).collect(),
                target: [0.3, -0.2, 0.1 * k as f64, 0.0, 0.5, -0.4],
            })
            .collect()
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let net = PolicyNet::<f64>::new(16, 16, DEFAULT_TWIST_SCALES, 5).unwrap();
        let samples = toy_samples();
        let single: Vec<&Sample<f64>> = samples.iter().collect();
        let doubled: Vec<&Sample<f64>> = samples.iter().chain(samples.iter()).collect();
        let mut g1 = net.zero_grads();
        let mut g2 = net.zero_grads();
        let l1 = batch_gradients(&net, &single, &mut g1).unwrap();
        let l2 = batch_gradients(&net, &doubled, &mut g2).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn zero_loss_gives_zero_gradient() {
        let net = PolicyNet::<f64>::new(16, 16, DEFAULT_TWIST_SCALES, 5).unwrap();
        let mut samples = toy_samples();
        for s in &mut samples {
            s.target = net.predict(&s.input).unwrap();
        }
        let batch: Vec<&Sample<f64>> = samples.iter().collect();
        let mut g = net.zero_grads();
        assert_eq!(batch_gradients(&net, &batch, &mut g).unwrap(), 0.0);
        assert!(g.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { twist_scales: [0.0; 6], ..Default::default() }.validate().is_err());
    }
}
