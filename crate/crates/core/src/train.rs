//! Desk-scale training against the mean-absolute-error objective, and an
//! end-to-end finite-difference check of the model gradient.
//!
//! Training runs on the tape and never consults the attention cache.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, flat_param_mut, flatten, Tape};
use crate::error::{Error, Result};
use crate::net::{diff, param_shapes, ExposureTriplet, ModelConfig, ModelWeights};
use crate::tensor::{ConvParams, Shape3, Tensor3};

/// Mean absolute error over all elements.
pub fn l1_loss(pred: &Tensor3, target: &Tensor3) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("l1_loss", pred.shape(), target.shape()));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(s / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
    Sgd,
}

impl Optimizer {
    pub fn adamw() -> Self {
        Optimizer::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::adamw()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            steps: 1000,
            batch_size: 4,
            seed: 0,
            optimizer: Optimizer::default(),
        }
    }
}

/// Learning rate of the micro benchmark (1 FIB, C = 8, 64×64 scenes,
/// 200 steps). The default rate is meant for long runs; at 200 steps it
/// barely leaves the initialization.
pub const MICRO_LEARNING_RATE: f64 = 2e-3;

impl TrainConfig {
    /// The micro benchmark: 200 AdamW steps at [`MICRO_LEARNING_RATE`].
    pub fn micro(seed: u64) -> Self {
        TrainConfig {
            learning_rate: MICRO_LEARNING_RATE,
            steps: 200,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput("steps and batch size must be at least 1".into()));
        }
        if let Optimizer::AdamW { beta1, beta2, eps, weight_decay } = self.optimizer {
            let unit = |b: f64| (0.0..1.0).contains(&b);
            if !unit(beta1) || !unit(beta2) || !(eps > 0.0) || !(weight_decay >= 0.0) {
                return Err(Error::InvalidInput(format!("bad AdamW constants {:?}", self.optimizer)));
            }
        }
        Ok(())
    }
}

/// One training pair: three exposures and the fused target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub triplet: ExposureTriplet,
    pub target: Tensor3,
}

/// Optimizer state bound to one set of weights.
pub struct Trainer {
    weights: ModelWeights,
    config: TrainConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

fn numel(p: &ConvParams) -> usize {
    p.weight.len() + p.bias.len()
}

impl Trainer {
    pub fn new(weights: ModelWeights, config: TrainConfig) -> Result<Self> {
        weights.validate()?;
        config.validate()?;
        let zeros: Vec<Vec<f64>> = weights.params.iter().map(|p| vec![0.0; numel(p)]).collect();
        Ok(Trainer {
            m: zeros.clone(),
            v: zeros,
            weights,
            config,
            step: 0,
        })
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn into_weights(self) -> ModelWeights {
        self.weights
    }

    /// Steps taken so far.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Mean batch loss and its parameter gradient at the current weights.
    pub fn loss_and_grad(&self, batch: &[&Sample]) -> Result<(f64, Vec<ConvParams>)> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let shape = batch[0].triplet.shape();
        let cfg = &self.weights.config;
        let mut total = 0.0;
        let mut grads: Vec<ConvParams> = self.weights.params.iter().map(ConvParams::zeros_like).collect();
        let inv = 1.0 / batch.len() as f32;
        for s in batch {
            if s.triplet.shape() != shape {
                return Err(Error::shape("train batch", shape, s.triplet.shape()));
            }
            let mut tape = Tape::new(self.weights.params.clone());
            let y = diff::forward(&mut tape, cfg, s.triplet.frames())?;
            let t = tape.input(s.target.clone());
            let loss = tape.l1_loss(y, t)?;
            total += tape.value(loss).data()[0] as f64;
            let g = tape.backward(loss, Tensor3::full(Shape3::new(1, 1, 1), inv))?;
            for (acc, p) in grads.iter_mut().zip(g.params()) {
                for (a, b) in acc.weight.iter_mut().zip(&p.weight) {
                    *a += *b;
                }
                for (a, b) in acc.bias.iter_mut().zip(&p.bias) {
                    *a += *b;
                }
            }
        }
        Ok((total / batch.len() as f64, grads))
    }

    /// One optimizer update on `batch`; returns the loss before the update.
    pub fn step(&mut self, batch: &[&Sample]) -> Result<f64> {
        let (loss, grads) = self.loss_and_grad(batch)?;
        self.step += 1;
        let finite = grads
            .iter()
            .all(|g| g.weight.iter().chain(&g.bias).all(|v| v.is_finite()));
        if !loss.is_finite() || !finite {
            return Err(Error::Divergence { step: self.step, loss });
        }
        let lr = self.config.learning_rate;
        let t = self.step as i32;
        for (k, (p, g)) in self.weights.params.iter_mut().zip(&grads).enumerate() {
            let values = p.weight.iter_mut().chain(p.bias.iter_mut());
            let gvals = g.weight.iter().chain(&g.bias);
            for (i, (w, &gi)) in values.zip(gvals).enumerate() {
                let gi = gi as f64;
                let mut x = *w as f64;
                match self.config.optimizer {
                    Optimizer::AdamW { beta1, beta2, eps, weight_decay } => {
                        let m = &mut self.m[k][i];
                        let v = &mut self.v[k][i];
                        *m = beta1 * *m + (1.0 - beta1) * gi;
                        *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                        let mh = *m / (1.0 - beta1.powi(t));
                        let vh = *v / (1.0 - beta2.powi(t));
                        x -= lr * (mh / (vh.sqrt() + eps) + weight_decay * x);
                    }
                    Optimizer::Sgd => x -= lr * gi,
                }
                *w = x as f32;
            }
        }
        if !self.weights.params.iter().all(|p| p.weight.iter().chain(&p.bias).all(|v| v.is_finite())) {
            return Err(Error::Divergence { step: self.step, loss });
        }
        Ok(loss)
    }
}

/// Final weights and the per-step training losses.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    /// Loss curve as `step,loss` CSV rows (steps from 1).
    pub fn loss_csv(&self) -> String {
        loss_csv(&self.losses)
    }
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{},{l:.8}", i + 1);
    }
    out
}

/// Trailing moving average of `values` over `window` points, ending at
/// index `end` (inclusive).
pub fn moving_average(values: &[f64], end: usize, window: usize) -> f64 {
    let start = (end + 1).saturating_sub(window);
    let s = &values[start..=end];
    s.iter().sum::<f64>() / s.len() as f64
}

/// Mini-batch training: each epoch visits the dataset in a seeded shuffled
/// order, `batch_size` samples at a time (the last batch of an epoch may be
/// smaller).
pub fn train_loop(weights: ModelWeights, dataset: &[Sample], config: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let mut trainer = Trainer::new(weights, config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = dataset.len();
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        if cursor >= dataset.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(dataset.len());
        let batch: Vec<&Sample> = order[cursor..end].iter().map(|&i| &dataset[i]).collect();
        cursor = end;
        losses.push(trainer.step(&batch)?);
    }
    Ok(TrainOutcome {
        weights: trainer.into_weights(),
        losses,
    })
}

/// Side length of the gradient-check input.
pub const GRAD_CHECK_SIZE: usize = 8;
/// Parameters probed by [`grad_check_model`].
pub const GRAD_CHECK_PROBES: usize = 64;
/// Central-difference step of [`grad_check_model`] (the check runs in `f64`).
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Weights at a generic point: He-uniform weights and small random biases
/// everywhere, so no path of the network is switched off.
fn generic_weights(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<ConvParams<f64>> {
    param_shapes(config)
        .into_iter()
        .map(|(o, i, k)| {
            let mut p = ConvParams::<f64>::zeros(o, i, k);
            let bound = (6.0 / (i * k.size() * k.size()) as f64).sqrt();
            p.weight.iter_mut().for_each(|w| *w = rng.gen_range(-bound..bound));
            p.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
            p
        })
        .collect()
}

/// Worst relative error between the tape gradient and central differences
/// over [`GRAD_CHECK_PROBES`] random parameters of a `config` network on a
/// random 8×8 triplet. The scalar is a fixed random projection of the output.
/// With `linearized`, activations and the output clamp are identities.
pub fn grad_check_model(config: &ModelConfig, seed: u64, linearized: bool) -> Result<f64> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = generic_weights(config, &mut rng);
    let n = GRAD_CHECK_SIZE;
    let shape = Shape3::new(3, n, n);
    let mut unit = || Tensor3::<f64>::from_fn(shape, |_, _, _| rng.gen_range(0.0..1.0));
    let frames = [unit(), unit(), unit()];
    let proj = Tensor3::<f64>::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0));
    let total: usize = params.iter().map(|p| p.weight.len() + p.bias.len()).sum();
    let probe: Vec<usize> = rand::seq::index::sample(&mut rng, total, GRAD_CHECK_PROBES.min(total)).into_vec();

    let tape_for = |p: Vec<ConvParams<f64>>| {
        let t = Tape::new(p);
        if linearized {
            t.linearized()
        } else {
            t
        }
    };
    let objective = |p: Vec<ConvParams<f64>>| -> Result<(Tape<f64>, crate::autodiff::Var)> {
        let mut tape = tape_for(p);
        let y = diff::forward(&mut tape, config, [&frames[0], &frames[1], &frames[2]])?;
        let w = tape.input(proj.clone());
        let yw = tape.mul(y, w)?;
        let s = tape.sum(yw);
        Ok((tape, s))
    };

    let (tape, s) = objective(params.clone())?;
    let grads = tape.backward(s, Tensor3::full(Shape3::new(1, 1, 1), 1.0))?;
    let analytic = grads.flat();
    let flat = flatten(&params);
    let mut failure = None;
    let worst = finite_diff_check(&flat, &analytic, GRAD_CHECK_STEP, probe, |x| {
        let mut p = params.clone();
        for (j, &v) in x.iter().enumerate() {
            *flat_param_mut(&mut p, j) = v;
        }
        match objective(p) {
            Ok((tape, s)) => tape.value(s).data()[0],
            Err(e) => {
                failure = Some(e);
                f64::NAN
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_triplet, SceneSpec};
    use crate::net::{init_weights, FibVariant};
    use crate::testutil::random_tensor;

    fn dataset(n: usize, size: usize, seed: u64) -> Vec<Sample> {
        (0..n as u64)
            .map(|k| {
                let (triplet, target) = synth_triplet(&SceneSpec::new(size, size, seed + k)).unwrap();
                Sample { triplet, target }
            })
            .collect()
    }

    #[test]
    fn l1_cases() {
        let s = Shape3::new(3, 5, 4);
        let a = random_tensor(s, 1, 1.0);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.25);
        assert!((l1_loss(&a, &b).unwrap() - 0.25).abs() < 1e-6);
        let c = random_tensor(s, 2, 1.0);
        let mut acc = 0.0f64;
        for ch in 0..3 {
            for w in 0..5 {
                for h in 0..4 {
                    acc += (a.get(ch, w, h) as f64 - c.get(ch, w, h) as f64).abs();
                }
            }
        }
        assert!((l1_loss(&a, &c).unwrap() - acc / 60.0).abs() < 1e-6);
        assert_eq!(l1_loss(&a, &c).unwrap(), l1_loss(&c, &a).unwrap());
        assert!(l1_loss(&a, &random_tensor(Shape3::new(3, 4, 5), 1, 1.0)).is_err());
    }

    #[test]
    fn tape_loss_matches_eager_loss() {
        let data = dataset(1, 16, 3);
        let w = init_weights(&ModelConfig::micro(), 1).unwrap();
        let tr = Trainer::new(w.clone(), TrainConfig::default()).unwrap();
        let (loss, _) = tr.loss_and_grad(&[&data[0]]).unwrap();
        let y = crate::net::InferenceEngine::new(w).unwrap().forward(&data[0].triplet).unwrap();
        assert!((loss - l1_loss(&y, &data[0].target).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let data = dataset(2, 16, 1);
        let w = init_weights(&ModelConfig::micro(), 2).unwrap();
        let cfg = TrainConfig { learning_rate: 0.0, steps: 2, ..TrainConfig::default() };
        // AdamW weight decay is scaled by the learning rate, so it is a no-op too.
        let out = train_loop(w.clone(), &data, &cfg).unwrap();
        assert_eq!(out.weights, w);
        assert_eq!(out.losses.len(), 2);
        assert!(out.losses.iter().all(|l| *l > 0.0));
    }

    #[test]
    fn sgd_step_follows_finite_difference_signs() {
        let data = dataset(2, 16, 5);
        let batch: Vec<&Sample> = data.iter().collect();
        let cfg = ModelConfig::micro();
        let w = init_weights(&cfg, 3).unwrap();
        let tcfg = TrainConfig { learning_rate: 1e-3, optimizer: Optimizer::Sgd, ..TrainConfig::default() };
        let mut tr = Trainer::new(w.clone(), tcfg).unwrap();
        let (_, grads) = tr.loss_and_grad(&batch).unwrap();
        tr.step(&batch).unwrap();
        let before = flatten(&w.params);
        let after = flatten(&tr.weights().params);
        let g = flatten(&grads);
        // Probe the parameters with the largest gradients, where an f32
        // finite difference is informative.
        let mut idx: Vec<usize> = (0..g.len()).collect();
        idx.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probe: Vec<usize> = idx[..200].choose_multiple(&mut rng, 10).copied().collect();
        let loss_at = |params: &[ConvParams]| {
            let t = Trainer::new(ModelWeights::from_params(&cfg, params.to_vec()).unwrap(), TrainConfig::default()).unwrap();
            t.loss_and_grad(&batch).unwrap().0
        };
        for i in probe {
            let h = 1e-2;
            let mut p = w.params.clone();
            *flat_param_mut(&mut p, i) = before[i] + h;
            let up = loss_at(&p);
            *flat_param_mut(&mut p, i) = before[i] - h;
            let down = loss_at(&p);
            let fd = (up - down) / (2.0 * h as f64);
            let delta = (after[i] - before[i]) as f64;
            assert!(delta * fd < 0.0, "param {i}: update {delta}, fd gradient {fd}, analytic {}", g[i]);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = dataset(3, 16, 7);
        let w = init_weights(&ModelConfig::micro(), 5).unwrap();
        let cfg = TrainConfig { steps: 4, batch_size: 2, learning_rate: 1e-3, ..TrainConfig::default() };
        let a = train_loop(w.clone(), &data, &cfg).unwrap();
        let b = train_loop(w.clone(), &data, &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.loss_csv().lines().count(), 5);
        assert!(a.loss_csv().starts_with("step,loss\n1,"));
    }

    #[test]
    fn one_step_loop_equals_one_step() {
        let data = dataset(2, 16, 9);
        let w = init_weights(&ModelConfig::micro(), 6).unwrap();
        let cfg = TrainConfig { steps: 1, batch_size: 4, learning_rate: 1e-3, ..TrainConfig::default() };
        let out = train_loop(w.clone(), &data, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order = vec![0, 1];
        order.shuffle(&mut rng);
        let batch: Vec<&Sample> = order.iter().map(|&i| &data[i]).collect();
        let mut tr = Trainer::new(w, cfg).unwrap();
        let l = tr.step(&batch).unwrap();
        assert_eq!(out.losses, vec![l]);
        assert_eq!(&out.weights, tr.weights());
    }

    #[test]
    fn divergence_reports_step() {
        let data = dataset(1, 16, 11);
        let w = init_weights(&ModelConfig::micro(), 7).unwrap();
        let cfg = TrainConfig { learning_rate: 1e30, optimizer: Optimizer::Sgd, steps: 5, ..TrainConfig::default() };
        match train_loop(w, &data, &cfg) {
            Err(Error::Divergence { step, .. }) => assert!((1..=5).contains(&step)),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.losses)),
        }
    }

    #[test]
    fn config_validation() {
        let data = dataset(1, 16, 1);
        let w = init_weights(&ModelConfig::micro(), 1).unwrap();
        assert!(train_loop(w.clone(), &[], &TrainConfig::default()).is_err());
        assert!(train_loop(w.clone(), &data, &TrainConfig { steps: 0, ..TrainConfig::default() }).is_err());
        assert!(train_loop(w, &data, &TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() }).is_err());
    }

    #[test]
    fn moving_average_window() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(moving_average(&v, 3, 2), 3.5);
        assert_eq!(moving_average(&v, 1, 20), 1.5);
    }

    #[test]
    fn gradient_check_micro_and_linearized() {
        for seed in 0..2 {
            let e = grad_check_model(&ModelConfig::micro(), seed, false).unwrap();
            assert!(e <= 1e-3, "seed {seed}: {e}");
        }
        let lin = grad_check_model(&ModelConfig::micro(), 3, true).unwrap();
        assert!(lin <= 1e-6, "{lin}");
        for variant in [FibVariant::NoDaem, FibVariant::NoDrtm] {
            let e = grad_check_model(&ModelConfig { variant, ..ModelConfig::micro() }, 4, false).unwrap();
            assert!(e <= 1e-3, "{variant:?}: {e}");
        }
    }
}
