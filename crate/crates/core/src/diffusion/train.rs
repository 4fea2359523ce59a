use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{q_sample, standard_normal, NoiseSchedule};
use crate::denoiser::{reduce_gradients, ConditioningStack, Denoiser, NoisedSample};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            learning_rate: 3e-4,
            ema_decay: 0.99,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param(format!("learning rate {} must be finite and nonnegative", self.learning_rate)));
        }
        for (name, v) in [("ema_decay", self.ema_decay), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::param(format!("{name} {v} outside [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::param("adam_eps must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::param("grad_clip must be positive"));
            }
        }
        Ok(())
    }
}

/// Conditioning and the normalized target patch it should reproduce.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub cond: ConditioningStack,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub examples: Vec<TrainingExample>,
    /// Optional per-example sampling weights (uniform when absent).
    pub weights: Option<Vec<f64>>,
}

impl TrainingSet {
    pub fn uniform(examples: Vec<TrainingExample>) -> Self {
        Self { examples, weights: None }
    }
}

/// Computes per-sample `(loss, gradient)` pairs, returned in batch order.
pub trait GradientExecutor {
    fn per_sample(&self, model: &Denoiser, batch: &[NoisedSample]) -> Result<Vec<(f64, Vec<f64>)>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SequentialExecutor;

impl GradientExecutor for SequentialExecutor {
    fn per_sample(&self, model: &Denoiser, batch: &[NoisedSample]) -> Result<Vec<(f64, Vec<f64>)>> {
        batch.iter().map(|s| model.loss_and_gradient(s, 1.0)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Denoiser,
    pub ema: Vec<f64>,
    pub losses: Vec<f64>,
}

/// Adam with EMA weight tracking. All randomness (batch indices, steps,
/// noise) is drawn on the calling thread from one seeded stream.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    schedule: NoiseSchedule,
    model: Denoiser,
    ema: Vec<f64>,
    adam: AdamState,
    rng: ChaCha8Rng,
    losses: Vec<f64>,
}

impl Trainer {
    pub fn new(model: Denoiser, schedule: NoiseSchedule, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let n = model.param_count();
        Ok(Self {
            ema: model.params().to_vec(),
            adam: AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0 },
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            losses: Vec::new(),
            config,
            schedule,
            model,
        })
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn ema(&self) -> &[f64] {
        &self.ema
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    fn draw_batch(&mut self, data: &TrainingSet) -> Result<Vec<NoisedSample>> {
        let n = data.examples.len();
        let picker = match &data.weights {
            Some(w) => {
                if w.len() != n {
                    return Err(Error::shape(format!("{} weights for {n} examples", w.len())));
                }
                Some(WeightedIndex::new(w).map_err(|e| Error::param(format!("sampling weights: {e}")))?)
            }
            None => None,
        };
        let mut batch = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let idx = match &picker {
                Some(p) => p.sample(&mut self.rng),
                None => self.rng.random_range(0..n),
            };
            let ex = &data.examples[idx];
            let t = self.rng.random_range(1..=self.schedule.steps());
            let eps = standard_normal(&mut self.rng, ex.target.len());
            let x_t = q_sample(&ex.target, t, &eps, &self.schedule)?;
            batch.push(NoisedSample { x_t, t, cond: ex.cond.clone(), eps });
        }
        Ok(batch)
    }

    /// One optimisation step; returns the batch-mean loss.
    pub fn step(&mut self, data: &TrainingSet, exec: &dyn GradientExecutor) -> Result<f64> {
        if data.examples.is_empty() {
            return Err(Error::Insufficient("empty training set".into()));
        }
        let batch = self.draw_batch(data)?;
        let per = exec.per_sample(&self.model, &batch)?;
        let (loss, mut grad) = reduce_gradients(&per, self.model.param_count());
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.adam.step + 1)));
        }
        self.model.check_finite(&grad)?;
        if let Some(clip) = self.config.grad_clip {
            let norm = libm::sqrt(grad.iter().map(|g| g * g).sum::<f64>());
            if norm > clip {
                let s = clip / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        let c = &self.config;
        self.adam.step += 1;
        let k = self.adam.step as f64;
        let bc1 = 1.0 - libm::pow(c.beta1, k);
        let bc2 = 1.0 - libm::pow(c.beta2, k);
        let params = self.model.params_mut();
        for i in 0..params.len() {
            let g = grad[i];
            self.adam.m[i] = c.beta1 * self.adam.m[i] + (1.0 - c.beta1) * g;
            self.adam.v[i] = c.beta2 * self.adam.v[i] + (1.0 - c.beta2) * g * g;
            let mh = self.adam.m[i] / bc1;
            let vh = self.adam.v[i] / bc2;
            params[i] -= c.learning_rate * mh / (libm::sqrt(vh) + c.adam_eps);
            self.ema[i] += (1.0 - c.ema_decay) * (params[i] - self.ema[i]);
        }
        self.losses.push(loss);
        Ok(loss)
    }

    /// Runs the configured number of steps.
    pub fn run(mut self, data: &TrainingSet, exec: &dyn GradientExecutor) -> Result<TrainOutcome> {
        for _ in 0..self.config.steps {
            self.step(data, exec)?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome { model: self.model, ema: self.ema, losses: self.losses }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;

    fn tiny() -> (Denoiser, TrainingSet) {
        let cfg = DenoiserConfig { depth: 1, base_channels: 2, gn_groups: 1, embed_dim: 4, n_cond: 1, input_side: 4, spade_hidden: 2 };
        let m = Denoiser::new(cfg, 1).unwrap();
        let cond = ConditioningStack::new(4, vec![], vec![vec![0.1; 16]], vec![vec![0.5; 16]]).unwrap();
        (m, TrainingSet::uniform(vec![TrainingExample { cond, target: vec![0.2; 16] }]))
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (m, data) = tiny();
        let before = m.params().to_vec();
        let cfg = TrainConfig { steps: 3, learning_rate: 0.0, ..Default::default() };
        let out = Trainer::new(m, NoiseSchedule::default(), cfg).unwrap().run(&data, &SequentialExecutor).unwrap();
        assert_eq!(out.model.params(), &before[..]);
        assert_eq!(out.ema, before);
        assert_eq!(out.losses.len(), 3);
    }

    #[test]
    fn same_seed_same_losses() {
        let (m, data) = tiny();
        let cfg = TrainConfig { steps: 4, batch_size: 2, seed: 9, ..Default::default() };
        let a = Trainer::new(m.clone(), NoiseSchedule::default(), cfg).unwrap().run(&data, &SequentialExecutor).unwrap();
        let b = Trainer::new(m, NoiseSchedule::default(), cfg).unwrap().run(&data, &SequentialExecutor).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.ema, b.ema);
    }

    #[test]
    fn rejects_bad_config() {
        let (m, _) = tiny();
        let cfg = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(Trainer::new(m, NoiseSchedule::default(), cfg).is_err());
    }

    #[test]
    fn toy_task_running_loss_falls() {
        let task = crate::synthetic::ToyTask { side: 8, ..Default::default() };
        let cfg = DenoiserConfig { depth: 1, base_channels: 4, gn_groups: 2, embed_dim: 8, n_cond: 3, input_side: 8, spade_hidden: 2 };
        let data = TrainingSet::uniform((0..16).map(|s| task.example(s).unwrap()).collect());
        let tc = TrainConfig { steps: 300, batch_size: 4, learning_rate: 1e-3, seed: 2, ..Default::default() };
        let out = Trainer::new(Denoiser::new(cfg, 3).unwrap(), NoiseSchedule::default(), tc)
            .unwrap()
            .run(&data, &SequentialExecutor)
            .unwrap();
        let mean = |l: &[f64]| l.iter().sum::<f64>() / l.len() as f64;
        let (first, last) = (mean(&out.losses[..50]), mean(&out.losses[250..]));
        assert!(last < first, "running loss {first} -> {last}");
    }
}
