//! Alternating adversarial optimization of the denoiser and discriminator.
//!
//! Each step samples per-item timesteps, builds the forward-process sample
//! x_{t-1} ("real") and the one-step denoised x_{t-1} ("fake"), updates the
//! discriminator on the detached pair, then updates the denoiser on the
//! noise-regression loss plus λ times the non-saturating adversarial loss
//! under the freshly updated, frozen discriminator.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_marginal_items, ImageTensor, ReverseCoefficients};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::io::checkpoint;
use crate::io::manifest::DatasetManifest;
use crate::losses::{self, LossBreakdown};
use crate::nets::{Denoiser, DenoiserConfig, Discriminator, DiscriminatorConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{self, Rng};
use crate::schedule::{make_linear_schedule, NoiseSchedule, SigmaMode};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_mode: SigmaMode,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
    pub denoiser: DenoiserConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            beta_start: 1e-4,
            beta_end: 0.02,
            sigma_mode: SigmaMode::Beta,
            lambda: 0.05,
            epochs: 60,
            batch_size: 8,
            base_lr: 3e-4,
            lr_decay_factor: 0.999,
            lr_decay_every: 200,
            seed: 0,
            checkpoint_every: 0,
            adam: AdamConfig::default(),
            denoiser: DenoiserConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda", format!("must be a finite value >= 0, got {}", self.lambda)));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("base_lr", format!("must be positive, got {}", self.base_lr)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::invalid(
                "lr_decay_factor",
                format!("must lie in (0, 1], got {}", self.lr_decay_factor),
            ));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::invalid("lr_decay_every", "must be positive"));
        }
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)?;
        self.denoiser.validate()?;
        self.discriminator.validate()?;
        if self.discriminator.image_size != self.denoiser.image_size {
            return Err(Error::invalid("image_size", "denoiser and discriminator disagree"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(make_linear_schedule(self.steps, self.beta_start, self.beta_end)?.with_sigma_mode(self.sigma_mode))
    }
}

/// `base_lr · factor^⌊epoch / every⌋`.
pub fn lr_at_epoch(base_lr: f64, epoch: usize, factor: f64, every: usize) -> Result<f64> {
    if every == 0 {
        return Err(Error::invalid("lr_decay_every", "must be positive"));
    }
    Ok(base_lr * factor.powi((epoch / every) as i32))
}

/// Which updates a step performs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    /// Discriminator update followed by the combined denoiser update.
    Adversarial,
    /// Plain noise-regression update; the discriminator is untouched.
    DdpmOnly,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub denoiser: Denoiser,
    pub discriminator: Discriminator,
    pub denoiser_opt: AdamState,
    pub discriminator_opt: AdamState,
    pub epoch: usize,
    pub step: u64,
    pub rng: Rng,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub losses: LossBreakdown,
    pub t_mean: f64,
    pub lr: f64,
}

/// Per-item tensors drawn at the start of a step.
struct StepSample {
    ts: Vec<usize>,
    eps: ImageTensor,
    x_t: ImageTensor,
    real_prev: ImageTensor,
    z: ImageTensor,
}

/// Appends the reverse step `c_x·(x_t − c_eps·eps_pred) + σ·z` to `graph`,
/// differentiable in `eps_pred`.
pub fn reverse_node<S: Real>(
    graph: &mut Graph<S>,
    x_t: &Tensor<S>,
    eps_pred: Var,
    z: &Tensor<S>,
    coefs: &[ReverseCoefficients],
) -> Result<Var> {
    let pred = graph.value(eps_pred).clone();
    x_t.ensure_same_shape(&pred, "reverse_node")?;
    x_t.ensure_same_shape(z, "reverse_node")?;
    let n = x_t.item_len();
    let mut value = x_t.clone();
    let mut scale = Vec::with_capacity(coefs.len());
    for (i, c) in coefs.iter().enumerate() {
        let (cx, ce, sg) = (S::of(c.c_x as f64), S::of(c.c_eps as f64), S::of(c.sigma as f64));
        let range = i * n..(i + 1) * n;
        let (xs, es, zs) = (&x_t.data()[range.clone()], &pred.data()[range.clone()], &z.data()[range]);
        for (((o, &x), &e), &zz) in value.item_mut(i).iter_mut().zip(xs).zip(es).zip(zs) {
            *o = cx * (x - ce * e) + sg * zz;
        }
        scale.push(S::of(c.eps_gradient() as f64));
    }
    graph.batch_linear(eps_pred, value, scale)
}

/// Discriminator loss node for a real/fake pair at per-item timesteps.
pub fn discriminator_loss_node<S: Real>(
    graph: &mut Graph<S>,
    disc: &Discriminator,
    bound: &crate::nets::Bound,
    real: Var,
    fake: Var,
    ts: &[usize],
) -> Result<Var> {
    let real_logits = disc.forward(graph, bound, real, ts)?;
    let fake_logits = disc.forward(graph, bound, fake, ts)?;
    let lr = graph.softplus_mean(real_logits, -1.0);
    let lf = graph.softplus_mean(fake_logits, 1.0);
    Ok(graph.combine(&[(lr, 1.0), (lf, 1.0)]))
}

fn nonfinite(term: &str, v: f64) -> Error {
    Error::NonFinite {
        term: format!("{term} = {v}"),
    }
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let denoiser = Denoiser::init(config.denoiser.clone(), config.seed)?;
        let discriminator = Discriminator::init(config.discriminator.clone(), config.seed.wrapping_add(1))?;
        Ok(TrainState {
            denoiser_opt: AdamState::new(denoiser.params()),
            discriminator_opt: AdamState::new(discriminator.params()),
            denoiser,
            discriminator,
            epoch: 0,
            step: 0,
            rng: rng::stream(config.seed, 2),
        })
    }

    pub fn lr(&self, config: &TrainConfig) -> Result<f64> {
        lr_at_epoch(config.base_lr, self.epoch, config.lr_decay_factor, config.lr_decay_every)
    }

    fn draw(&mut self, batch: &ImageTensor, schedule: &NoiseSchedule) -> Result<StepSample> {
        let shape = batch.shape().to_vec();
        let steps = schedule.steps();
        let ts: Vec<usize> = (0..shape[0]).map(|_| self.rng.random_range(1..=steps)).collect();
        let eps = rng::normal_tensor(&mut self.rng, &shape);
        let x_t = forward_marginal_items(batch, &ts, &eps, schedule)?;
        let eps_prev = rng::normal_tensor(&mut self.rng, &shape);
        let prev: Vec<usize> = ts.iter().map(|t| t - 1).collect();
        let real_prev = forward_marginal_items(batch, &prev, &eps_prev, schedule)?;
        let mut z = rng::normal_tensor(&mut self.rng, &shape);
        for (i, &t) in ts.iter().enumerate() {
            if t == 1 {
                z.item_mut(i).fill(0.0);
            }
        }
        Ok(StepSample {
            ts,
            eps,
            x_t,
            real_prev,
            z,
        })
    }

    /// One optimization step on a batch of normal images in [-1, 1].
    pub fn train_step(&mut self, batch: &ImageTensor, schedule: &NoiseSchedule, config: &TrainConfig) -> Result<StepReport> {
        self.train_step_with(batch, schedule, config, StepKind::Adversarial)
    }

    pub fn train_step_with(
        &mut self,
        batch: &ImageTensor,
        schedule: &NoiseSchedule,
        config: &TrainConfig,
        kind: StepKind,
    ) -> Result<StepReport> {
        batch.dims4()?;
        let lr = self.lr(config)?;
        let s = self.draw(batch, schedule)?;
        let coefs: Vec<ReverseCoefficients> = s.ts.iter().map(|&t| ReverseCoefficients::at(schedule, t)).collect();

        let mut g = Graph::<f32>::new();
        let x_t = g.constant(s.x_t.clone());
        let (eps_pred, den_bound) = self.denoiser.forward_graph(&mut g, x_t, &s.ts, true)?;
        let fake = reverse_node(&mut g, &s.x_t, eps_pred, &s.z, &coefs)?;

        let mut l_disc = 0.0;
        if kind == StepKind::Adversarial {
            let mut dg = Graph::<f32>::new();
            let real = dg.constant(s.real_prev.clone());
            let fake_detached = dg.constant(g.value(fake).clone());
            let bound = self.discriminator.params().bind(&mut dg, true);
            let loss = discriminator_loss_node(&mut dg, &self.discriminator, &bound, real, fake_detached, &s.ts)?;
            l_disc = dg.scalar(loss).f64();
            if !l_disc.is_finite() {
                return Err(nonfinite("l_disc", l_disc));
            }
            let grads = bound.gradients(self.discriminator.params(), &dg.backward(loss));
            self.discriminator_opt
                .update(self.discriminator.params_mut(), &grads, lr, &config.adam)?;
        }

        let l_ddpm_node = g.mse(eps_pred, &s.eps)?;
        let l_ddpm = g.scalar(l_ddpm_node).f64();
        let mut l_adv_gen = 0.0;
        let total = if kind == StepKind::Adversarial && config.lambda > 0.0 {
            let bound = self.discriminator.params().bind(&mut g, false);
            let logits = self.discriminator.forward(&mut g, &bound, fake, &s.ts)?;
            let adv = g.softplus_mean(logits, -1.0);
            l_adv_gen = g.scalar(adv).f64();
            g.combine(&[(l_ddpm_node, 1.0), (adv, config.lambda)])
        } else {
            if kind == StepKind::Adversarial {
                let logits = self.discriminator.logits(g.value(fake), &s.ts)?;
                l_adv_gen = losses::adversarial_generator_loss(&logits);
            }
            l_ddpm_node
        };
        if !l_ddpm.is_finite() {
            return Err(nonfinite("l_ddpm", l_ddpm));
        }
        if !l_adv_gen.is_finite() {
            return Err(nonfinite("l_adv_gen", l_adv_gen));
        }
        let losses = LossBreakdown::new(l_ddpm, l_adv_gen, l_disc, config.lambda)?;

        let grads = den_bound.gradients(self.denoiser.params(), &g.backward(total));
        self.denoiser_opt.update(self.denoiser.params_mut(), &grads, lr, &config.adam)?;
        self.step += 1;

        let t_mean = s.ts.iter().sum::<usize>() as f64 / s.ts.len() as f64;
        Ok(StepReport { losses, t_mean, lr })
    }

    /// One pass over `images` in a freshly shuffled order. Calls `on_step`
    /// after every step.
    pub fn train_epoch(
        &mut self,
        images: &[ImageTensor],
        schedule: &NoiseSchedule,
        config: &TrainConfig,
        mut on_step: impl FnMut(&TrainState, &StepReport) -> Result<()>,
    ) -> Result<()> {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut self.rng);
        for chunk in order.chunks(config.batch_size) {
            let items: Vec<ImageTensor> = chunk.iter().map(|&i| images[i].clone()).collect();
            let batch = Tensor::stack(&items, true)?;
            let report = self.train_step(&batch, schedule, config)?;
            on_step(self, &report)?;
        }
        self.epoch += 1;
        Ok(())
    }
}

pub const LOG_HEADER: &str = "step,epoch,t_mean,l_ddpm,l_adv_gen,l_disc,l_total,lr";

/// One comma-separated training log line.
pub fn log_line(step: u64, epoch: usize, r: &StepReport) -> String {
    let l = &r.losses;
    format!(
        "{},{},{},{},{},{},{},{}",
        step, epoch, r.t_mean, l.l_ddpm, l.l_adv_gen, l.l_disc, l.l_total, r.lr
    )
}

/// Outcome of [`train`].
#[derive(Debug)]
pub struct TrainOutput {
    pub state: TrainState,
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub log_path: PathBuf,
}

/// Full training run over `images` (each `[1, 1, H, W]`, normal only).
/// Writes `train_log.csv`, periodic `ckpt_epochNNNNN.addm` files and
/// `final.addm` into `out_dir`.
pub fn train(config: &TrainConfig, images: &[ImageTensor], out_dir: &Path) -> Result<TrainOutput> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::invalid("dataset", "no training images"));
    }
    let schedule = config.schedule()?;
    let mut state = TrainState::new(config)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.csv");
    let file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    let mut checkpoints = Vec::new();
    while state.epoch < config.epochs {
        let epoch = state.epoch;
        state.train_epoch(images, &schedule, config, |st, r| {
            writeln!(log, "{}", log_line(st.step, epoch, r)).map_err(|e| Error::io(&log_path, e))
        })?;
        if config.checkpoint_every > 0 && state.epoch % config.checkpoint_every == 0 && state.epoch < config.epochs {
            let path = out_dir.join(format!("ckpt_epoch{:05}.addm", state.epoch));
            checkpoint::save(&path, &state, config)?;
            checkpoints.push(path);
        }
        log::info!("epoch {} done, step {}", state.epoch, state.step);
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = out_dir.join("final.addm");
    checkpoint::save(&final_checkpoint, &state, config)?;
    Ok(TrainOutput {
        state,
        final_checkpoint,
        checkpoints,
        log_path,
    })
}

/// Loads the images of a normal-only manifest and runs [`train`].
pub fn train_on_manifest(config: &TrainConfig, manifest: &DatasetManifest, out_dir: &Path) -> Result<TrainOutput> {
    manifest.require_normal_only()?;
    let s = config.denoiser.image_size;
    let mut images = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let image = manifest.load_image(r)?;
        if image.shape() != [1, 1, s, s] {
            return Err(Error::Shape {
                op: "training image",
                expected: vec![1, 1, s, s],
                got: image.shape().to_vec(),
            });
        }
        images.push(image);
    }
    train(config, &images, out_dir)
}
