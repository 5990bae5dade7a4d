//! Loss assembly, learning-rate schedule, Adam and the alternating
//! generator/discriminator loop over nominal patches.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::imagecore::{augment, Image};
use crate::metrics::{ssim, SsimParams};
use crate::network::{Bound, Discriminator, Generator, NetConfig, ParamStore};
use crate::perlin::{perturb, PerlinParams, PerturbationResult};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Relative weights of the generator objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Huber part of the contextual term.
    pub w_a: f64,
    /// SSIM part of the contextual term.
    pub w_b: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    /// Noise term.
    pub w4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_a: 2.0, w_b: 1.0, w1: 1.0, w2: 50.0, w3: 1.0, w4: 3.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_a, self.w_b, self.w1, self.w2, self.w3, self.w4];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Restart period used at full scale: one pass over the 90% training split
/// of 2,815,200 patches.
pub const FULL_SCALE_RESTART_PERIOD: u64 = 2_533_680;

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Steps per cosine cycle. 0 means "size of the training split".
    pub restart_period: u64,
    /// Peak multiplier applied at each restart.
    pub restart_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Random rotation/flip before perturbation.
    pub augment: bool,
    pub validation_fraction: f64,
    pub huber_delta: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    /// Perlin settings, including the perturbation probability `q`.
    pub perturbation: PerlinParams,
    pub ssim: SsimParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1.5e-4,
            restart_period: FULL_SCALE_RESTART_PERIOD,
            restart_factor: 1.0 / 3.0,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            augment: true,
            validation_fraction: 0.1,
            huber_delta: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            perturbation: PerlinParams::default(),
            ssim: SsimParams::default(),
        }
    }
}

impl TrainConfig {
    /// Small-data setting: period tied to the split size, two epochs.
    pub fn desk() -> Self {
        TrainConfig { lr: 1e-3, restart_period: 0, batch_size: 16, epochs: 2, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation fraction must lie in [0, 1)".into()));
        }
        if !(self.restart_factor > 0.0 && self.restart_factor <= 1.0) {
            return Err(Error::Config("restart factor must lie in (0, 1]".into()));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::Config("huber delta must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("invalid Adam constants".into()));
        }
        self.weights.validate()?;
        self.perturbation.validate()?;
        self.ssim.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig =
            toml::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), reason: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Cosine decay to zero inside each period; every restart starts from the
/// previous peak times `restart_factor`. A zero period disables restarts.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    let period = config.restart_period;
    if period == 0 {
        return config.lr;
    }
    let cycle = step / period;
    let t = (step % period) as f64 / period as f64;
    let peak = config.lr * config.restart_factor.powi(cycle.min(i32::MAX as u64) as i32);
    peak * 0.5 * (1.0 + (PI * t).cos())
}

/// Adam with bias correction; one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor<T>> = (0..store.len()).map(|i| Tensor::zeros(store.value(i).shape())).collect();
        Adam { m: zeros.clone(), v: zeros, t: 0, beta1, beta2, eps }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.t += 1;
        let t = self.t.min(i32::MAX as u64) as i32;
        let (b1, b2): (T, T) = (lit(self.beta1), lit(self.beta2));
        let c1: T = lit(1.0 - self.beta1.powi(t));
        let c2: T = lit(1.0 - self.beta2.powi(t));
        let (lr, eps): (T, T) = (lit(lr), lit(self.eps));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = store.value_mut(i);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    fn export(&self, ckpt: &mut Checkpoint<T>, store: &ParamStore<T>, prefix: &str) {
        for i in 0..store.len() {
            ckpt.tensors.push((format!("{prefix}.m.{}", store.name(i)), self.m[i].clone()));
            ckpt.tensors.push((format!("{prefix}.v.{}", store.name(i)), self.v[i].clone()));
        }
    }

    fn import(&mut self, ckpt: &Checkpoint<T>, store: &ParamStore<T>, prefix: &str, t: u64) -> Result<()> {
        let m = ckpt.store(&format!("{prefix}.m."));
        let v = ckpt.store(&format!("{prefix}.v."));
        for i in 0..store.len() {
            let name = store.name(i);
            match (m.index_of(name), v.index_of(name)) {
                (Some(a), Some(b)) => {
                    self.m[i] = m.value(a).clone();
                    self.v[i] = v.value(b).clone();
                }
                _ => return Err(Error::Checkpoint(format!("missing optimizer state for {name}"))),
            }
        }
        self.t = t;
        Ok(())
    }
}

/// One prepared batch: clean targets, perturbed inputs and the perturbation
/// bundle, all `[n, 1, s, s]`.
#[derive(Clone, Debug)]
pub struct TrainingBatch<T> {
    pub x: Tensor<T>,
    pub x_star: Tensor<T>,
    pub mask: Tensor<T>,
    pub noise: Tensor<T>,
    pub beta: Vec<T>,
    pub applied: Vec<bool>,
}

impl<T: Scalar> TrainingBatch<T> {
    pub fn from_parts(clean: &[Image<T>], perturbed: &[PerturbationResult<T>]) -> Result<Self> {
        if clean.is_empty() || clean.len() != perturbed.len() {
            return Err(Error::Invalid("batch needs one perturbation per patch".into()));
        }
        let pick = |f: fn(&PerturbationResult<T>) -> &Image<T>| -> Vec<Image<T>> {
            perturbed.iter().map(|p| f(p).clone()).collect()
        };
        Ok(TrainingBatch {
            x: Image::batch_tensor(clean)?,
            x_star: Image::batch_tensor(&pick(|p| &p.x_star))?,
            mask: Image::batch_tensor(&pick(|p| &p.mask))?,
            noise: Image::batch_tensor(&pick(|p| &p.noise))?,
            beta: perturbed.iter().map(|p| p.beta).collect(),
            applied: perturbed.iter().map(|p| p.applied).collect(),
        })
    }

    /// Augments each patch, then perturbs it with probability `q`.
    pub fn prepare<R: Rng + ?Sized>(patches: &[Image<T>], config: &TrainConfig, rng: &mut R) -> Result<Self> {
        let mut clean = Vec::with_capacity(patches.len());
        let mut perturbed = Vec::with_capacity(patches.len());
        for p in patches {
            let x = if config.augment { augment(p, rng) } else { p.clone() };
            perturbed.push(perturb(&x, &config.perturbation, rng)?);
            clean.push(x);
        }
        Self::from_parts(&clean, &perturbed)
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }
}

/// Graph handles for every generator term; `total` is what gets optimized.
pub struct GeneratorLoss<T: Scalar> {
    pub total: Var<T>,
    pub adv: Var<T>,
    pub con: Var<T>,
    pub enc: Var<T>,
    pub nse: Var<T>,
    pub x_hat: Var<T>,
}

/// Scalar loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub adv: f64,
    pub con: f64,
    pub enc: f64,
    pub nse: f64,
    pub total: f64,
}

impl<T: Scalar> GeneratorLoss<T> {
    /// Values of every term; a non-finite term is a training fault naming it.
    pub fn values(&self) -> Result<LossValues> {
        let get = |v: &Var<T>, term: &str| -> Result<f64> {
            let x = v.value().item().to_f64().unwrap_or(f64::NAN);
            if x.is_finite() {
                Ok(x)
            } else {
                Err(Error::TrainingFault { term: term.into(), reason: format!("value {x}") })
            }
        };
        Ok(LossValues {
            adv: get(&self.adv, "adversarial")?,
            con: get(&self.con, "contextual")?,
            enc: get(&self.enc, "encoder")?,
            nse: get(&self.nse, "noise")?,
            total: get(&self.total, "total")?,
        })
    }
}

fn mean_sq<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    Ok(a.sub(b)?.square().mean())
}

/// Builds the generator objective. `x̂ = G_D(G_E(x*))` is compared against
/// the clean `x`; discriminator parameters are read from `pd`, which should
/// be bound frozen.
pub fn generator_loss<T: Scalar>(
    gen: &Generator<T>,
    pg: &Bound<T>,
    disc: &Discriminator<T>,
    pd: &Bound<T>,
    batch: &TrainingBatch<T>,
    config: &TrainConfig,
) -> Result<GeneratorLoss<T>> {
    let w = &config.weights;
    let x = Var::constant(batch.x.clone());
    let out = gen.forward(pg, &Var::constant(batch.x_star.clone()))?;
    let x_hat = out.x_hat;

    let (_, feat_real) = disc.forward(pd, &x)?;
    let (_, feat_fake) = disc.forward(pd, &x_hat)?;
    let adv = mean_sq(&feat_real.detach(), &feat_fake)?;

    let con = x_hat
        .huber_loss(&x, lit(config.huber_delta))?
        .scale(lit(w.w_a))
        .add(&x_hat.ssim_loss(&x, &config.ssim)?.scale(lit(w.w_b)))?;

    let enc = out.z.sub(&out.z_hat)?.abs().mean();

    // |(1−β)·M·x̂ − M·x*| against β·N, per sample β.
    let per_pixel = |f: &dyn Fn(usize, T, T, T) -> T| -> Result<Tensor<T>> {
        let plane = batch.x.numel() / batch.len();
        let data = (0..batch.x.numel())
            .map(|i| f(i / plane, batch.mask.data()[i], batch.x_star.data()[i], batch.noise.data()[i]))
            .collect();
        Tensor::from_vec(batch.x.shape(), data)
    };
    let scale = Var::constant(per_pixel(&|s, m, _, _| (T::one() - batch.beta[s]) * m)?);
    let masked_input = Var::constant(per_pixel(&|_, m, xs, _| m * xs)?);
    let injected = Var::constant(per_pixel(&|s, _, _, n| batch.beta[s] * n)?);
    let residual = x_hat.mul(&scale)?.sub(&masked_input)?.abs();
    let nse = mean_sq(&residual, &injected)?.scale(lit(w.w4));

    let total = adv
        .scale(lit(w.w1))
        .add(&con.scale(lit(w.w2)))?
        .add(&enc.scale(lit(w.w3)))?
        .add(&nse)?;
    Ok(GeneratorLoss { total, adv, con, enc, nse, x_hat })
}

/// `½·(BCE(D(x), 1) + BCE(D(x̂), 0))`, so an undecided discriminator scores ln 2.
pub fn discriminator_loss<T: Scalar>(
    disc: &Discriminator<T>,
    pd: &Bound<T>,
    x: &Tensor<T>,
    x_hat: &Tensor<T>,
) -> Result<Var<T>> {
    let (real, _) = disc.forward(pd, &Var::constant(x.clone()))?;
    let (fake, _) = disc.forward(pd, &Var::constant(x_hat.clone()))?;
    let lr = real.bce_with_logits(&Tensor::full(real.shape(), T::one()))?;
    let lf = fake.bce_with_logits(&Tensor::zeros(fake.shape()))?;
    Ok(lr.add(&lf)?.scale(lit(0.5)))
}

/// Telemetry of one optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub adv: f64,
    pub con: f64,
    pub enc: f64,
    pub nse: f64,
    pub gen_total: f64,
    pub disc: f64,
}

impl StepRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Per-epoch outcome of [`Trainer::fit`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: u64,
    pub mean_gen_total: f64,
    pub val_ssim: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub train_patches: usize,
    pub val_patches: usize,
    pub initial_val_ssim: f64,
    pub epochs: Vec<EpochSummary>,
}

/// Hooks for [`Trainer::fit`].
#[derive(Default)]
pub struct FitOptions<'a> {
    /// Directory for `epoch_XXX.ckpt` files.
    pub checkpoint_dir: Option<PathBuf>,
    /// Receives one JSON line per step.
    pub telemetry: Option<&'a mut dyn Write>,
    /// Stop after this many steps in total.
    pub max_steps: Option<u64>,
}

const SPLIT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Deterministic `(train, validation)` index split.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let n_val = ((n as f64) * validation_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Owns both networks, their optimizers and the step RNG.
pub struct Trainer<T: Scalar> {
    pub gen: Generator<T>,
    pub disc: Discriminator<T>,
    opt_g: Adam<T>,
    opt_d: Adam<T>,
    config: TrainConfig,
    step: u64,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    /// Both networks are initialized from `config.seed`.
    pub fn new(net: NetConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gen = Generator::new(net.clone(), &mut rng)?;
        let disc = Discriminator::new(net, &mut rng)?;
        Ok(Self::assemble(gen, disc, config, 0, rng))
    }

    fn assemble(gen: Generator<T>, disc: Discriminator<T>, config: TrainConfig, step: u64, rng: ChaCha8Rng) -> Self {
        let (b1, b2, eps) = (config.adam_beta1, config.adam_beta2, config.adam_eps);
        let opt_g = Adam::new(gen.params(), b1, b2, eps);
        let opt_d = Adam::new(disc.params(), b1, b2, eps);
        Trainer { gen, disc, opt_g, opt_d, config, step, rng }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Augment → perturb → generator update → discriminator update.
    pub fn train_step(&mut self, patches: &[Image<T>]) -> Result<StepRecord> {
        if patches.is_empty() {
            return Err(Error::Invalid("empty training batch".into()));
        }
        let batch = TrainingBatch::prepare(patches, &self.config, &mut self.rng)?;
        self.train_step_on(&batch)
    }

    /// Optimization step on an already prepared batch.
    pub fn train_step_on(&mut self, batch: &TrainingBatch<T>) -> Result<StepRecord> {
        let lr = lr_at(self.step, &self.config);

        let (values, g_grads, x_hat) = {
            let pg = self.gen.bind(true);
            let pd = self.disc.bind(false);
            let loss = generator_loss(&self.gen, &pg, &self.disc, &pd, batch, &self.config)?;
            let values = loss.values()?;
            let mut grads = loss.total.backward()?;
            (values, pg.collect(&mut grads), loss.x_hat.value().clone())
        };
        self.opt_g.step(self.gen.params_mut(), &g_grads, lr);

        let (disc_value, d_grads) = {
            let pd = self.disc.bind(true);
            let loss = discriminator_loss(&self.disc, &pd, &batch.x, &x_hat)?;
            let v = loss.value().item().to_f64().unwrap_or(f64::NAN);
            if !v.is_finite() {
                return Err(Error::TrainingFault { term: "discriminator".into(), reason: format!("value {v}") });
            }
            let mut grads = loss.backward()?;
            (v, pd.collect(&mut grads))
        };
        self.opt_d.step(self.disc.params_mut(), &d_grads, lr);

        let record = StepRecord {
            step: self.step,
            lr,
            adv: values.adv,
            con: values.con,
            enc: values.enc,
            nse: values.nse,
            gen_total: values.total,
            disc: disc_value,
        };
        self.step += 1;
        Ok(record)
    }

    /// Mean SSIM between clean patches and their reconstructions.
    pub fn validate(&self, patches: &[Image<T>]) -> Result<f64> {
        mean_reconstruction_ssim(&self.gen, patches, &self.config.ssim, self.config.batch_size)
    }

    /// Trains on a 90/10 (configurable) split for `config.epochs` epochs.
    pub fn fit(&mut self, data: &[Image<T>], mut opts: FitOptions<'_>) -> Result<FitReport> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let (train_idx, val_idx) = split_indices(data.len(), self.config.validation_fraction, self.config.seed);
        if self.config.restart_period == 0 {
            self.config.restart_period = train_idx.len() as u64;
        }
        let val: Vec<Image<T>> = val_idx.iter().map(|&i| data[i].clone()).collect();
        let initial_val_ssim = if val.is_empty() { f64::NAN } else { self.validate(&val)? };
        let mut report = FitReport {
            train_patches: train_idx.len(),
            val_patches: val.len(),
            initial_val_ssim,
            epochs: Vec::new(),
        };
        let mut order = train_idx;
        'epochs: for epoch in 0..self.config.epochs {
            order.shuffle(&mut self.rng);
            let mut sum = 0.0;
            let mut steps = 0u64;
            for chunk in order.chunks(self.config.batch_size) {
                if opts.max_steps.is_some_and(|m| self.step >= m) {
                    break;
                }
                let patches: Vec<Image<T>> = chunk.iter().map(|&i| data[i].clone()).collect();
                let rec = self.train_step(&patches)?;
                if let Some(w) = opts.telemetry.as_mut() {
                    writeln!(w, "{}", rec.to_json_line()).map_err(|e| Error::io("telemetry", e))?;
                }
                sum += rec.gen_total;
                steps += 1;
            }
            let val_ssim = if val.is_empty() { f64::NAN } else { self.validate(&val)? };
            let checkpoint = match &opts.checkpoint_dir {
                Some(dir) => {
                    let path = dir.join(format!("epoch_{:03}.ckpt", epoch + 1));
                    let mut ckpt = self.to_checkpoint();
                    ckpt.epoch = epoch as u64 + 1;
                    ckpt.metrics.insert("val_ssim".into(), val_ssim);
                    ckpt.save(&path)?;
                    Some(path)
                }
                None => None,
            };
            report.epochs.push(EpochSummary {
                epoch: epoch + 1,
                steps,
                mean_gen_total: if steps > 0 { sum / steps as f64 } else { f64::NAN },
                val_ssim,
                checkpoint,
            });
            if opts.max_steps.is_some_and(|m| self.step >= m) {
                break 'epochs;
            }
        }
        Ok(report)
    }

    /// Networks, optimizer moments, step and config.
    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut c = Checkpoint::new(self.gen.config().clone());
        c.step = self.step;
        c.train = serde_json::to_value(&self.config).expect("config serializes");
        c.push_store(self.gen.params(), "");
        c.push_store(self.disc.params(), "");
        self.opt_g.export(&mut c, self.gen.params(), "opt_g");
        self.opt_d.export(&mut c, self.disc.params(), "opt_d");
        c
    }

    /// Restores networks and optimizer state. The step RNG is re-derived from
    /// the seed and step, so a resumed run is deterministic but does not
    /// replay the uninterrupted sample order.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let config: TrainConfig = serde_json::from_value(ckpt.train.clone())
            .map_err(|e| Error::Checkpoint(format!("training config: {e}")))?;
        let gen = ckpt.generator()?;
        let disc = ckpt.discriminator()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ ckpt.step.rotate_left(32));
        let mut t = Self::assemble(gen, disc, config, ckpt.step, rng);
        t.opt_g.import(ckpt, t.gen.params(), "opt_g", ckpt.step)?;
        t.opt_d.import(ckpt, t.disc.params(), "opt_d", ckpt.step)?;
        Ok(t)
    }
}

/// Mean SSIM between patches and `gen.reconstruct(patches)`.
pub fn mean_reconstruction_ssim<T: Scalar>(
    gen: &Generator<T>,
    patches: &[Image<T>],
    params: &SsimParams,
    batch_size: usize,
) -> Result<f64> {
    if patches.is_empty() {
        return Err(Error::Invalid("no patches to validate".into()));
    }
    let mut sum = 0.0;
    for chunk in patches.chunks(batch_size.max(1)) {
        let rec = Image::from_batch_tensor(&gen.reconstruct(&Image::batch_tensor(chunk)?)?)?;
        for (x, y) in chunk.iter().zip(&rec) {
            sum += ssim(x, y, params)?.to_f64().unwrap();
        }
    }
    Ok(sum / patches.len() as f64)
}
