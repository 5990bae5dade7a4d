//! Generator (residual encoder → dense bottleneck → residual decoder, plus a
//! second encoder for the reconstruction) and the convolutional discriminator.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Grads, Var};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Square patch side fed to the encoder.
    pub input_size: usize,
    /// Output channels of each encoder stage; every stage halves H and W.
    pub encoder_channels: Vec<usize>,
    /// Output channels of each decoder stage; every stage doubles H and W.
    pub decoder_channels: Vec<usize>,
    pub latent_dim: usize,
    /// Channels of the stride-2 discriminator stages.
    pub disc_channels: Vec<usize>,
    /// Upper bound on group-norm groups (clamped to a divisor of the width).
    pub norm_groups: usize,
}

impl NetConfig {
    /// Full-size network: 256² input, 16×16×1024 embedding, 64-d latent.
    pub fn paper() -> Self {
        NetConfig {
            input_size: 256,
            encoder_channels: vec![128, 256, 512, 1024],
            decoder_channels: vec![512, 256, 128, 64],
            latent_dim: 64,
            disc_channels: vec![64, 128, 256, 512],
            norm_groups: 32,
        }
    }

    /// Same topology scaled down for CPU training on 32² patches.
    pub fn desk() -> Self {
        NetConfig {
            input_size: 32,
            encoder_channels: vec![8, 16, 32, 64],
            decoder_channels: vec![32, 16, 8, 8],
            latent_dim: 64,
            disc_channels: vec![8, 16, 32, 64],
            norm_groups: 8,
        }
    }

    /// Smallest variant, used for gradient checks.
    pub fn toy() -> Self {
        NetConfig {
            input_size: 32,
            encoder_channels: vec![4, 4, 8, 8],
            decoder_channels: vec![8, 4, 4, 4],
            latent_dim: 16,
            disc_channels: vec![4, 4, 8, 8],
            norm_groups: 2,
        }
    }

    pub fn stages(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Spatial side of the encoder embedding.
    pub fn embedding_size(&self) -> usize {
        self.input_size >> self.stages()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if s == 0 || self.decoder_channels.len() != s {
            return Err(Error::Config("encoder and decoder need the same nonzero stage count".into()));
        }
        if self.input_size == 0 || self.input_size % (1 << s) != 0 {
            return Err(Error::Config(format!("input size {} not divisible by 2^{}", self.input_size, s)));
        }
        if self.disc_channels.is_empty() || self.input_size % (1 << self.disc_channels.len()) != 0 {
            return Err(Error::Config("discriminator stages must evenly halve the input".into()));
        }
        let all = self.encoder_channels.iter().chain(&self.decoder_channels).chain(&self.disc_channels);
        if self.latent_dim == 0 || self.norm_groups == 0 || all.clone().any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Stable 64-bit FNV-1a fingerprint of the serialized config.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    fn groups_for(&self, channels: usize) -> usize {
        (1..=self.norm_groups.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
    }
}

/// Named parameter tensors. Values are shared with graph leaves during a
/// forward pass, so binding does not copy.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Graph leaves for every parameter; `trainable` decides whether
    /// gradients are collected for them.
    pub fn bind(&self, trainable: bool) -> Bound<T> {
        Bound { vars: self.values.iter().map(|v| Var::shared(Arc::clone(v), trainable)).collect() }
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = self.index_of(name).ok_or_else(|| Error::Model(format!("no parameter named {name}")))?;
        if self.values[i].shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: stored {:?}, given {:?}",
                self.values[i].shape(),
                value.shape()
            )));
        }
        self.values[i] = Arc::new(value);
        Ok(())
    }
}

/// Parameters bound into one computation graph.
pub struct Bound<T: Scalar> {
    vars: Vec<Var<T>>,
}

impl<T: Scalar> Bound<T> {
    pub fn var(&self, i: usize) -> &Var<T> {
        &self.vars[i]
    }

    /// Gradients in parameter order (`None` where no gradient reached).
    pub fn collect(&self, grads: &mut Grads<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|v| grads.take(v)).collect()
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: usize,
    b: usize,
    geom: ConvGeom,
    transposed: bool,
}

impl Conv {
    fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        if self.transposed {
            x.conv_transpose2d(p.var(self.w), p.var(self.b), self.geom)
        } else {
            x.conv2d(p.var(self.w), p.var(self.b), self.geom)
        }
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

impl Norm {
    fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        x.group_norm(p.var(self.gamma), p.var(self.beta), self.groups)
    }
}

#[derive(Clone, Debug)]
struct Dense {
    w: usize,
    b: usize,
}

/// Pre-activation residual block: `skip(x) + conv(relu(norm(…)))×3`.
#[derive(Clone, Debug)]
struct ResBlock {
    units: Vec<(Option<Norm>, Conv)>,
    skip: Option<Conv>,
}

impl ResBlock {
    fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let mut h = x.clone();
        for (norm, conv) in &self.units {
            if let Some(norm) = norm {
                h = norm.forward(p, &h)?.relu();
            }
            h = conv.forward(p, &h)?;
        }
        let skip = match &self.skip {
            Some(c) => c.forward(p, x)?,
            None => x.clone(),
        };
        skip.add(&h)
    }
}

struct Builder<'a, T: Scalar, R: Rng> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    config: &'a NetConfig,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| lit(dist.sample(self.rng))).collect()).unwrap()
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, geom: ConvGeom) -> Conv {
        let k = geom.kernel;
        let w = self.he(&[cout, cin, k, k], cin * k * k);
        let w = self.store.add(format!("{name}.w"), w);
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv { w, b, geom, transposed: false }
    }

    fn tconv(&mut self, name: &str, cin: usize, cout: usize, geom: ConvGeom) -> Conv {
        let k = geom.kernel;
        let fan_in = (cin * k * k / (geom.stride * geom.stride)).max(1);
        let w = self.he(&[cin, cout, k, k], fan_in);
        let w = self.store.add(format!("{name}.w"), w);
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv { w, b, geom, transposed: true }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let gamma = self.store.add(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
        let beta = self.store.add(format!("{name}.beta"), Tensor::zeros(&[c]));
        Norm { gamma, beta, groups: self.config.groups_for(c) }
    }

    fn dense(&mut self, name: &str, din: usize, dout: usize, gain: f64) -> Dense {
        let dist = Normal::new(0.0, (gain / din as f64).sqrt()).unwrap();
        let w = Tensor::from_vec(&[dout, din], (0..dout * din).map(|_| lit(dist.sample(self.rng))).collect()).unwrap();
        let w = self.store.add(format!("{name}.w"), w);
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[dout]));
        Dense { w, b }
    }

    /// Three units; `strides[i]` applies to unit `i`. The first unit skips
    /// the pre-activation when it reads the raw image.
    #[allow(clippy::too_many_arguments)]
    fn block(
        &mut self,
        name: &str,
        cin: usize,
        c: usize,
        transposed: bool,
        down_or_up: bool,
        raw_input: bool,
        projection: bool,
    ) -> ResBlock {
        let mut units = Vec::with_capacity(3);
        for u in 0..3 {
            let ci = if u == 0 { cin } else { c };
            let norm = if u == 0 && raw_input { None } else { Some(self.norm(&format!("{name}.u{u}.norm"), ci)) };
            let resample = down_or_up && u == 1;
            let conv = match (transposed, resample) {
                (false, false) => self.conv(&format!("{name}.u{u}.conv"), ci, c, ConvGeom::new(3, 1, 1)),
                (false, true) => self.conv(&format!("{name}.u{u}.conv"), ci, c, ConvGeom::new(3, 2, 1)),
                (true, false) => self.tconv(&format!("{name}.u{u}.conv"), ci, c, ConvGeom::transposed(3, 1, 1, 0)),
                (true, true) => self.tconv(&format!("{name}.u{u}.conv"), ci, c, ConvGeom::transposed(3, 2, 1, 1)),
            };
            units.push((norm, conv));
        }
        let skip = match (projection, down_or_up, transposed) {
            (false, _, _) => None,
            (true, false, false) => Some(self.conv(&format!("{name}.skip"), cin, c, ConvGeom::new(1, 1, 0))),
            (true, true, false) => Some(self.conv(&format!("{name}.skip"), cin, c, ConvGeom::new(1, 2, 0))),
            (true, false, true) => Some(self.tconv(&format!("{name}.skip"), cin, c, ConvGeom::transposed(1, 1, 0, 0))),
            (true, true, true) => Some(self.tconv(&format!("{name}.skip"), cin, c, ConvGeom::transposed(2, 2, 0, 0))),
        };
        ResBlock { units, skip }
    }

    /// One stage = blocks A (width change, 1×1 projection), B (identity skip)
    /// and C (resampling in the middle unit, resampling skip).
    fn stage(&mut self, name: &str, cin: usize, c: usize, transposed: bool, raw_input: bool) -> [ResBlock; 3] {
        [
            self.block(&format!("{name}.a"), cin, c, transposed, false, raw_input, true),
            self.block(&format!("{name}.b"), c, c, transposed, false, false, false),
            self.block(&format!("{name}.c"), c, c, transposed, true, false, true),
        ]
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    stages: Vec<[ResBlock; 3]>,
    out_norm: Norm,
    to_latent: Dense,
}

impl Encoder {
    fn build<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, prefix: &str) -> Self {
        let cfg = b.config.clone();
        let mut stages = Vec::new();
        let mut cin = 1;
        for (i, &c) in cfg.encoder_channels.iter().enumerate() {
            stages.push(b.stage(&format!("{prefix}.s{i}"), cin, c, false, i == 0));
            cin = c;
        }
        let out_norm = b.norm(&format!("{prefix}.out_norm"), cin);
        let e = cfg.embedding_size();
        let to_latent = b.dense(&format!("{prefix}.to_latent"), cin * e * e, cfg.latent_dim, 1.0);
        Encoder { stages, out_norm, to_latent }
    }

    /// Returns (embedding, latent, per-stage output shapes).
    fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Result<(Var<T>, Var<T>, Vec<Vec<usize>>)> {
        let mut h = x.clone();
        let mut trace = vec![h.shape().to_vec()];
        for stage in &self.stages {
            for block in stage {
                h = block.forward(p, &h)?;
            }
            trace.push(h.shape().to_vec());
        }
        let n = h.shape()[0];
        let flat: usize = h.shape()[1..].iter().product();
        let a = self.out_norm.forward(p, &h)?.relu().reshape(&[n, flat])?;
        let z = a.linear(p.var(self.to_latent.w), p.var(self.to_latent.b))?;
        Ok((h, z, trace))
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    from_latent: Dense,
    stages: Vec<[ResBlock; 3]>,
    head_norm: Norm,
    head: Conv,
}

impl Decoder {
    fn build<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>) -> Self {
        let cfg = b.config.clone();
        let e = cfg.embedding_size();
        let c0 = *cfg.encoder_channels.last().unwrap();
        let from_latent = b.dense("gen.dec.from_latent", cfg.latent_dim, c0 * e * e, 1.0);
        let mut stages = Vec::new();
        let mut cin = c0;
        for (i, &c) in cfg.decoder_channels.iter().enumerate() {
            stages.push(b.stage(&format!("gen.dec.s{i}"), cin, c, true, false));
            cin = c;
        }
        let head_norm = b.norm("gen.dec.head_norm", cin);
        let head = b.conv("gen.dec.head", cin, 1, ConvGeom::new(3, 1, 1));
        Decoder { from_latent, stages, head_norm, head }
    }

    fn forward<T: Scalar>(&self, p: &Bound<T>, z: &Var<T>, cfg: &NetConfig) -> Result<(Var<T>, Vec<Vec<usize>>)> {
        let n = z.shape()[0];
        let e = cfg.embedding_size();
        let c0 = *cfg.encoder_channels.last().unwrap();
        let mut h = z
            .linear(p.var(self.from_latent.w), p.var(self.from_latent.b))?
            .reshape(&[n, c0, e, e])?;
        let mut trace = vec![h.shape().to_vec()];
        for stage in &self.stages {
            for block in stage {
                h = block.forward(p, &h)?;
            }
            trace.push(h.shape().to_vec());
        }
        let out = self.head.forward(p, &self.head_norm.forward(p, &h)?.relu())?.sigmoid();
        trace.push(out.shape().to_vec());
        Ok((out, trace))
    }
}

/// Everything the generator produces for one input batch.
pub struct GeneratorOutput<T: Scalar> {
    pub embedding: Var<T>,
    pub z: Var<T>,
    pub x_hat: Var<T>,
    pub z_hat: Var<T>,
}

/// Spatial shapes observed at each stage boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeTrace {
    pub encoder: Vec<Vec<usize>>,
    pub latent: Vec<usize>,
    pub decoder: Vec<Vec<usize>>,
    pub reencoded: Vec<usize>,
}

/// Encoder G_E, decoder G_D and re-encoder G_Ê with disjoint parameters.
#[derive(Clone, Debug)]
pub struct Generator<T: Scalar> {
    config: NetConfig,
    params: ParamStore<T>,
    encoder: Encoder,
    decoder: Decoder,
    reencoder: Encoder,
}

impl<T: Scalar> Generator<T> {
    /// He-normal convolutions, zero biases, unit norm gains.
    pub fn new<R: Rng>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder { store: &mut params, rng, config: &config };
        let encoder = Encoder::build(&mut b, "gen.enc");
        let decoder = Decoder::build(&mut b);
        let reencoder = Encoder::build(&mut b, "gen.reenc");
        Ok(Generator { config, params, encoder, decoder, reencoder })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn bind(&self, trainable: bool) -> Bound<T> {
        self.params.bind(trainable)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        if shape.len() != 4 || shape[0] == 0 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::Shape(format!("expected [n, 1, {s}, {s}] input, got {shape:?}")));
        }
        Ok(())
    }

    fn check_latent(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[0] == 0 || shape[1] != self.config.latent_dim {
            return Err(Error::Shape(format!("expected [n, {}] latent, got {shape:?}", self.config.latent_dim)));
        }
        Ok(())
    }

    pub fn encode_var(&self, p: &Bound<T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        self.check_input(x.shape())?;
        let (e, z, _) = self.encoder.forward(p, x)?;
        Ok((e, z))
    }

    pub fn decode_var(&self, p: &Bound<T>, z: &Var<T>) -> Result<Var<T>> {
        self.check_latent(z.shape())?;
        Ok(self.decoder.forward(p, z, &self.config)?.0)
    }

    pub fn reencode_var(&self, p: &Bound<T>, x_hat: &Var<T>) -> Result<Var<T>> {
        self.check_input(x_hat.shape())?;
        Ok(self.reencoder.forward(p, x_hat)?.1)
    }

    /// Encoder → decoder → re-encoder on one batch.
    pub fn forward(&self, p: &Bound<T>, x: &Var<T>) -> Result<GeneratorOutput<T>> {
        let (embedding, z) = self.encode_var(p, x)?;
        let x_hat = self.decode_var(p, &z)?;
        let z_hat = self.reencode_var(p, &x_hat)?;
        Ok(GeneratorOutput { embedding, z, x_hat, z_hat })
    }

    /// Inference-mode encode: `(embedding [n,c,e,e], z [n,latent])`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let p = self.bind(false);
        let (e, z) = self.encode_var(&p, &Var::constant(x.clone()))?;
        Ok((e.value().clone(), z.value().clone()))
    }

    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let p = self.bind(false);
        Ok(self.decode_var(&p, &Var::constant(z.clone()))?.value().clone())
    }

    pub fn reencode(&self, x_hat: &Tensor<T>) -> Result<Tensor<T>> {
        let p = self.bind(false);
        Ok(self.reencode_var(&p, &Var::constant(x_hat.clone()))?.value().clone())
    }

    /// `decode(encode(x))` for a `[n, 1, s, s]` batch.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let p = self.bind(false);
        let (_, z) = self.encode_var(&p, &Var::constant(x.clone()))?;
        Ok(self.decode_var(&p, &z)?.value().clone())
    }

    /// Runs the full generator on shape-only tensors.
    pub fn trace_shapes(&self, batch: usize) -> Result<ShapeTrace> {
        let s = self.config.input_size;
        let p = self.bind(false);
        let x = Var::constant(Tensor::meta(&[batch, 1, s, s]));
        self.check_input(x.shape())?;
        let (_, z, encoder) = self.encoder.forward(&p, &x)?;
        let (x_hat, decoder) = self.decoder.forward(&p, &z, &self.config)?;
        let (_, z_hat, _) = self.reencoder.forward(&p, &x_hat)?;
        Ok(ShapeTrace { encoder, latent: z.shape().to_vec(), decoder, reencoded: z_hat.shape().to_vec() })
    }

    /// Parameter indices per sub-network, in store order.
    pub fn component_params(&self, prefix: &str) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.params.name(i).starts_with(prefix)).collect()
    }

    pub(crate) fn from_params(config: NetConfig, params: ParamStore<T>) -> Result<Self> {
        let template = Generator::<T>::new(config.clone(), &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        check_same_layout(&template.params, &params)?;
        Ok(Generator { params, ..template })
    }

    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            params: cast_store(&self.params),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            reencoder: self.reencoder.clone(),
        }
    }
}

fn cast_store<T: Scalar, U: Scalar>(s: &ParamStore<T>) -> ParamStore<U> {
    let mut out = ParamStore::new();
    for i in 0..s.len() {
        out.add(s.name(i), s.value(i).cast());
    }
    out
}

fn check_same_layout<T: Scalar>(template: &ParamStore<T>, got: &ParamStore<T>) -> Result<()> {
    if template.names() != got.names() {
        return Err(Error::Model("parameter names do not match the architecture".into()));
    }
    for i in 0..template.len() {
        if template.value(i).shape() != got.value(i).shape() {
            return Err(Error::Model(format!("parameter {} has the wrong shape", template.name(i))));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
struct DiscStage {
    conv: Conv,
    norm: Option<Norm>,
}

/// Stride-2 convolutional encoder with a dense real/fake head.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Scalar> {
    config: NetConfig,
    params: ParamStore<T>,
    stages: Vec<DiscStage>,
    head: Dense,
}

const LEAK: f64 = 0.2;

impl<T: Scalar> Discriminator<T> {
    pub fn new<R: Rng>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder { store: &mut params, rng, config: &config };
        let mut stages = Vec::new();
        let mut cin = 1;
        for (i, &c) in config.disc_channels.iter().enumerate() {
            let conv = b.conv(&format!("disc.s{i}.conv"), cin, c, ConvGeom::new(3, 2, 1));
            let norm = (i > 0).then(|| b.norm(&format!("disc.s{i}.norm"), c));
            stages.push(DiscStage { conv, norm });
            cin = c;
        }
        let side = config.input_size >> config.disc_channels.len();
        let head = b.dense("disc.head", cin * side * side, 1, 1.0);
        Ok(Discriminator { config, params, stages, head })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn bind(&self, trainable: bool) -> Bound<T> {
        self.params.bind(trainable)
    }

    /// Returns `(logits [n,1], features F_C [n,c,h,w])`.
    pub fn forward(&self, p: &Bound<T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let s = self.config.input_size;
        let shape = x.shape();
        if shape.len() != 4 || shape[0] == 0 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::Shape(format!("expected [n, 1, {s}, {s}] input, got {shape:?}")));
        }
        let mut h = x.clone();
        for st in &self.stages {
            h = st.conv.forward(p, &h)?;
            if let Some(n) = &st.norm {
                h = n.forward(p, &h)?;
            }
            h = h.leaky_relu(lit(LEAK));
        }
        let n = h.shape()[0];
        let flat: usize = h.shape()[1..].iter().product();
        let logits = h.reshape(&[n, flat])?.linear(p.var(self.head.w), p.var(self.head.b))?;
        Ok((logits, h))
    }

    /// Inference-mode real/fake probabilities and feature maps.
    pub fn discriminate(&self, x: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
        let p = self.bind(false);
        let (logits, feats) = self.forward(&p, &Var::constant(x.clone()))?;
        let probs = logits.sigmoid().value().data().to_vec();
        Ok((probs, feats.value().clone()))
    }

    pub(crate) fn from_params(config: NetConfig, params: ParamStore<T>) -> Result<Self> {
        let template = Discriminator::<T>::new(config.clone(), &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        check_same_layout(&template.params, &params)?;
        Ok(Discriminator { params, ..template })
    }

    pub fn cast<U: Scalar>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config.clone(),
            params: cast_store(&self.params),
            stages: self.stages.clone(),
            head: self.head.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_batch(n: usize, s: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        Tensor::from_vec(&[n, 1, s, s], (0..n * s * s).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn paper_config_shape_trace() {
        let g = Generator::<f32>::new(NetConfig::paper(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let t = g.trace_shapes(2).unwrap();
        let sides: Vec<usize> = t.encoder.iter().map(|s| s[2]).collect();
        assert_eq!(sides, vec![256, 128, 64, 32, 16]);
        assert_eq!(t.encoder.last().unwrap(), &vec![2, 1024, 16, 16]);
        assert_eq!(t.latent, vec![2, 64]);
        let dec: Vec<usize> = t.decoder.iter().map(|s| s[2]).collect();
        assert_eq!(dec, vec![16, 32, 64, 128, 256, 256]);
        assert_eq!(t.decoder.last().unwrap(), &vec![2, 1, 256, 256]);
        assert_eq!(t.reencoded, vec![2, 64]);
    }

    #[test]
    fn desk_forward_shapes_and_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Generator::<f32>::new(NetConfig::desk(), &mut rng).unwrap();
        let x = rand_batch(2, 32, &mut rng);
        let (e, z) = g.encode(&x).unwrap();
        assert_eq!(e.shape(), &[2, 64, 2, 2]);
        assert_eq!(z.shape(), &[2, 64]);
        let y = g.decode(&z).unwrap();
        assert_eq!(y.shape(), &[2, 1, 32, 32]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let zz = g.decode(&Tensor::zeros(&[1, 64])).unwrap();
        assert!(zz.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let zh = g.reencode(&y).unwrap();
        assert_eq!(zh.shape(), &[2, 64]);
        assert!(zh.all_finite());
        let (e0, z0) = g.encode(&Tensor::zeros(&[1, 1, 32, 32])).unwrap();
        assert!(e0.all_finite() && z0.all_finite());
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        let g = Generator::<f32>::new(NetConfig::toy(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(matches!(g.encode(&Tensor::zeros(&[1, 1, 16, 16])), Err(Error::Shape(_))));
        assert!(matches!(g.decode(&Tensor::zeros(&[1, 7])), Err(Error::Shape(_))));
        let d = Discriminator::<f32>::new(NetConfig::toy(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(matches!(d.discriminate(&Tensor::zeros(&[1, 2, 32, 32])), Err(Error::Shape(_))));
    }

    #[test]
    fn encoders_have_disjoint_parameters() {
        let g = Generator::<f32>::new(NetConfig::toy(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let enc = g.component_params("gen.enc.");
        let re = g.component_params("gen.reenc.");
        assert!(!enc.is_empty());
        assert_eq!(enc.len(), re.len());
        assert!(enc.iter().all(|i| !re.contains(i)));
        let numel = |ix: &[usize]| ix.iter().map(|&i| g.params().value(i).numel()).sum::<usize>();
        assert_eq!(numel(&enc), numel(&re));
    }

    #[test]
    fn discriminator_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Discriminator::<f32>::new(NetConfig::desk(), &mut rng).unwrap();
        let x = rand_batch(3, 32, &mut rng);
        let (p1, f1) = d.discriminate(&x).unwrap();
        let (p2, f2) = d.discriminate(&x).unwrap();
        assert_eq!(p1.len(), 3);
        assert!(p1.iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(f1, f2);
        assert_eq!(p1, p2);
        assert_eq!(f1.shape(), &[3, 64, 2, 2]);
    }

    #[test]
    fn zeroed_identity_block_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Generator::<f64>::new(NetConfig::toy(), &mut rng).unwrap();
        for stage in 0..g.config.stages() {
            for unit in 0..3 {
                for suffix in ["w", "b"] {
                    let name = format!("gen.enc.s{stage}.b.u{unit}.conv.{suffix}");
                    let i = g.params.index_of(&name).unwrap();
                    let shape = g.params.value(i).shape().to_vec();
                    g.params.set(&name, Tensor::zeros(&shape)).unwrap();
                }
            }
        }
        let p = g.bind(false);
        let c = g.config.encoder_channels[0];
        let x = Var::constant(
            Tensor::from_vec(&[1, c, 32, 32], (0..c * 1024).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        );
        let out = g.encoder.stages[0][1].forward(&p, &x).unwrap();
        assert_eq!(out.value(), x.value());
    }

    #[test]
    fn rebuild_from_params_round_trips() {
        let g = Generator::<f32>::new(NetConfig::toy(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let back = Generator::from_params(g.config.clone(), g.params.clone()).unwrap();
        let x = Tensor::full(&[1, 1, 32, 32], 0.5);
        assert_eq!(g.reconstruct(&x).unwrap(), back.reconstruct(&x).unwrap());
        let mut wrong = NetConfig::toy();
        wrong.latent_dim = 8;
        assert!(Generator::from_params(wrong, g.params.clone()).is_err());
    }
}
