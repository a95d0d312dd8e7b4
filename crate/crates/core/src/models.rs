//! The encoder, decoder and adversarial distorter networks.
//!
//! The encoder is four stride-2 convolutions followed by global average
//! pooling, so its last convolution has `latent_dim` channels. The decoder is
//! a dense layer reshaped to a small seed volume followed by six transposed
//! convolutions ending in one sigmoid channel. The distorter mirrors the
//! encoder, adds a dense head and bounds its output with
//! `delta_max * tanh(.)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{init_tensor, Init, ParameterSet};
use crate::{Activation, Graph, Real, Tensor, Var};

/// Hidden-layer activation.
pub const HIDDEN: Activation = Activation::LeakyRelu { alpha: 0.2 };

/// Strides of the six decoder layers; the four stride-2 layers give a 16x
/// upsampling from the seed volume.
pub const DECODER_STRIDES: [usize; 6] = [2, 2, 1, 2, 1, 2];

pub const ENCODER_LAYERS: usize = 4;
pub const DECODER_LAYERS: usize = 6;

/// Total spatial downsampling of the encoder and upsampling of the decoder.
const SCALE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Side length of the square single-channel input.
    pub resolution: usize,
    pub latent_dim: usize,
    /// Bound on every component of the perturbation.
    pub delta_max: f64,
    /// Output channels of the first three encoder convolutions; the fourth
    /// has `latent_dim`. The distorter uses the same plan.
    pub encoder_channels: [usize; 3],
    pub decoder_seed_channels: usize,
    /// Output channels of the first five decoder layers; the sixth has one.
    pub decoder_channels: [usize; 5],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            resolution: 32,
            latent_dim: 64,
            delta_max: 1.0,
            encoder_channels: [8, 16, 32],
            decoder_seed_channels: 32,
            decoder_channels: [16, 16, 8, 8, 8],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution % SCALE != 0 {
            return Err(Error::Config(format!("resolution must be a positive multiple of {SCALE}, got {}", self.resolution)));
        }
        if self.latent_dim == 0
            || self.decoder_seed_channels == 0
            || self.encoder_channels.contains(&0)
            || self.decoder_channels.contains(&0)
        {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.delta_max >= 0.0) || !self.delta_max.is_finite() {
            return Err(Error::Config(format!("delta_max must be finite and non-negative, got {}", self.delta_max)));
        }
        Ok(())
    }

    fn seed_side(&self) -> usize {
        self.resolution / SCALE
    }

    fn encoder_plan(&self) -> [usize; 5] {
        let [a, b, c] = self.encoder_channels;
        [1, a, b, c, self.latent_dim]
    }

    fn decoder_plan(&self) -> [usize; 7] {
        let [a, b, c, d, e] = self.decoder_channels;
        [self.decoder_seed_channels, a, b, c, d, e, 1]
    }
}

fn kernel_for(stride: usize) -> (usize, usize) {
    // (kernel, padding): stride 2 exactly doubles, stride 1 keeps size
    if stride == 2 {
        (4, 1)
    } else {
        (3, 1)
    }
}

/// Per-parameter initialization seeds drawn from one network seed.
struct SeedStream(ChaCha8Rng);

impl SeedStream {
    fn new(seed: u64, network: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(network);
        SeedStream(rng)
    }

    fn next(&mut self) -> u64 {
        self.0.next_u64()
    }
}

fn check_image_batch<T: Real>(g: &Graph<T>, x: Var, resolution: usize) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 4 || s[1] != 1 || s[2] != resolution || s[3] != resolution {
        return Err(Error::ShapeMismatch { expected: vec![s.first().copied().unwrap_or(1), 1, resolution, resolution], actual: s.to_vec() });
    }
    Ok(())
}

fn conv_stack<T: Real>(
    params: &mut ParameterSet<T>,
    prefix: &str,
    plan: &[usize; 5],
    seeds: &mut SeedStream,
) -> Result<()> {
    for i in 0..ENCODER_LAYERS {
        let (cin, cout) = (plan[i], plan[i + 1]);
        let w = init_tensor(&[cout, cin, 3, 3], Init::KaimingUniform { fan_in: cin * 9 }, seeds.next())?;
        params.insert(format!("{prefix}.conv{i}.weight"), w)?;
        params.insert(format!("{prefix}.conv{i}.bias"), Tensor::zeros(&[cout]))?;
    }
    Ok(())
}

/// Four stride-2 convolutions and global average pooling; the final
/// convolution is linear.
fn conv_stack_forward<T: Real>(g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..ENCODER_LAYERS {
        h = g.conv2d(h, vars[2 * i], vars[2 * i + 1], 2, 1)?;
        if i + 1 < ENCODER_LAYERS {
            h = g.activation(h, HIDDEN);
        }
    }
    g.global_avg_pool(h)
}

/// Latent code `z` with an optional additive perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T> {
    pub z: Tensor<T>,
    pub delta: Option<Tensor<T>>,
}

impl<T: Real> LatentCode<T> {
    pub fn new(z: Tensor<T>) -> Self {
        LatentCode { z, delta: None }
    }

    /// Adds `delta` to the perturbation carried by this code.
    pub fn perturb(mut self, delta: &Tensor<T>) -> Result<Self> {
        if delta.shape() != self.z.shape() {
            return Err(Error::ShapeMismatch { expected: self.z.shape().to_vec(), actual: delta.shape().to_vec() });
        }
        self.delta = Some(match self.delta.take() {
            None => delta.clone(),
            Some(d) => {
                let data = d.data().iter().zip(delta.data()).map(|(&a, &b)| a + b).collect();
                Tensor::from_vec(d.shape(), data)?
            }
        });
        Ok(self)
    }

    /// `z + delta`, or `z` when unperturbed.
    pub fn perturbed(&self) -> Tensor<T> {
        match &self.delta {
            None => self.z.clone(),
            Some(d) => {
                let data = self.z.data().iter().zip(d.data()).map(|(&a, &b)| a + b).collect();
                Tensor::from_vec(self.z.shape(), data).expect("shapes checked in perturb")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    config: ModelConfig,
    params: ParameterSet<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterSet::new();
        conv_stack(&mut params, "encoder", &config.encoder_plan(), &mut SeedStream::new(seed, 1))?;
        Ok(Encoder { config: *config, params })
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.params
    }

    /// `[N, 1, R, R]` images to `[N, latent_dim]` codes.
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        check_image_batch(g, x, self.config.resolution)?;
        conv_stack_forward(g, vars, x)
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<LatentCode<T>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let z = self.forward(&mut g, &vars, xv)?;
        Ok(LatentCode::new(g.tensor(z)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    config: ModelConfig,
    params: ParameterSet<T>,
}

impl<T: Real> Decoder<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut seeds = SeedStream::new(seed, 2);
        let mut params = ParameterSet::new();
        let side = config.seed_side();
        let seed_len = config.decoder_seed_channels * side * side;
        let w = init_tensor(&[config.latent_dim, seed_len], Init::KaimingUniform { fan_in: config.latent_dim }, seeds.next())?;
        params.insert("decoder.dense.weight", w)?;
        params.insert("decoder.dense.bias", Tensor::zeros(&[seed_len]))?;
        let plan = config.decoder_plan();
        for (i, &stride) in DECODER_STRIDES.iter().enumerate() {
            let (cin, cout) = (plan[i], plan[i + 1]);
            let (k, _) = kernel_for(stride);
            let w = init_tensor(&[cin, cout, k, k], Init::KaimingUniform { fan_in: cout * k * k }, seeds.next())?;
            params.insert(format!("decoder.deconv{i}.weight"), w)?;
            params.insert(format!("decoder.deconv{i}.bias"), Tensor::zeros(&[cout]))?;
        }
        Ok(Decoder { config: *config, params })
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.params
    }

    /// `[N, latent_dim]` codes to `[N, 1, R, R]` images in `[0, 1]`.
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], code: Var) -> Result<Var> {
        let s = g.shape(code);
        if s.len() != 2 || s[1] != self.config.latent_dim {
            return Err(Error::ShapeMismatch { expected: vec![s.first().copied().unwrap_or(1), self.config.latent_dim], actual: s.to_vec() });
        }
        let n = s[0];
        let side = self.config.seed_side();
        let h = g.dense(code, vars[0], vars[1])?;
        let h = g.activation(h, HIDDEN);
        let mut h = g.reshape(h, &[n, self.config.decoder_seed_channels, side, side])?;
        for (i, &stride) in DECODER_STRIDES.iter().enumerate() {
            let (_, pad) = kernel_for(stride);
            h = g.conv_transpose2d(h, vars[2 + 2 * i], vars[3 + 2 * i], stride, pad)?;
            let act = if i + 1 < DECODER_LAYERS { HIDDEN } else { Activation::Sigmoid };
            h = g.activation(h, act);
        }
        Ok(h)
    }

    /// Decodes the perturbed code `z + delta`.
    pub fn decode(&self, code: &LatentCode<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let c = g.constant(code.perturbed());
        let y = self.forward(&mut g, &vars, c)?;
        Ok(g.tensor(y))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Distorter<T> {
    config: ModelConfig,
    params: ParameterSet<T>,
}

impl<T: Real> Distorter<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut seeds = SeedStream::new(seed, 3);
        let mut params = ParameterSet::new();
        conv_stack(&mut params, "distorter", &config.encoder_plan(), &mut seeds)?;
        let d = config.latent_dim;
        let w = init_tensor(&[d, d], Init::KaimingUniform { fan_in: d }, seeds.next())?;
        params.insert("distorter.dense.weight", w)?;
        params.insert("distorter.dense.bias", Tensor::zeros(&[d]))?;
        Ok(Distorter { config: *config, params })
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.params
    }

    pub fn delta_max(&self) -> f64 {
        self.config.delta_max
    }

    /// `[N, 1, R, R]` images to perturbations in `(-delta_max, delta_max)`.
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        check_image_batch(g, x, self.config.resolution)?;
        let h = conv_stack_forward(g, vars, x)?;
        let h = g.activation(h, HIDDEN);
        let raw = g.dense(h, vars[2 * ENCODER_LAYERS], vars[2 * ENCODER_LAYERS + 1])?;
        let bounded = g.activation(raw, Activation::Tanh);
        // one ulp inside the bound so a saturated tanh stays strictly inside
        let scale = T::of(self.config.delta_max) * (T::one() - T::epsilon());
        Ok(g.scale(bounded, scale))
    }

    pub fn distort(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let d = self.forward(&mut g, &vars, xv)?;
        Ok(g.tensor(d))
    }
}

/// Which of the two players receives gradients in a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Autoencoder,
    Distorter,
    Nothing,
}

/// Graph leaves of every network parameter.
#[derive(Debug, Clone)]
pub struct Bindings {
    pub encoder: Vec<Var>,
    pub decoder: Vec<Var>,
    pub distorter: Vec<Var>,
}

/// Nodes of one forward pass through the full model.
#[derive(Debug, Clone, Copy)]
pub struct Pass {
    pub z: Var,
    pub delta: Option<Var>,
    pub reconstruction: Var,
    pub loss: Var,
}

/// Encoder, decoder and distorter sharing one [`ModelConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct AlpsModel<T> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub distorter: Distorter<T>,
}

impl<T: Real> AlpsModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(AlpsModel {
            config,
            encoder: Encoder::new(&config, seed)?,
            decoder: Decoder::new(&config, seed)?,
            distorter: Distorter::new(&config, seed)?,
        })
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: Trainable) -> Bindings {
        let ae = trainable == Trainable::Autoencoder;
        Bindings {
            encoder: self.encoder.params.bind(g, ae),
            decoder: self.decoder.params.bind(g, ae),
            distorter: self.distorter.params.bind(g, trainable == Trainable::Distorter),
        }
    }

    /// Reconstruction loss of `x`, from `decode(encode(x) + distort(x))` when
    /// `perturbed`, otherwise from `decode(encode(x))`. Both players
    /// optimize this same expression.
    pub fn objective(&self, g: &mut Graph<T>, b: &Bindings, x: Var, perturbed: bool) -> Result<Pass> {
        let z = self.encoder.forward(g, &b.encoder, x)?;
        let (code, delta) = if perturbed {
            let d = self.distorter.forward(g, &b.distorter, x)?;
            (perturb(g, z, d)?, Some(d))
        } else {
            (z, None)
        };
        let reconstruction = self.decoder.forward(g, &b.decoder, code)?;
        let loss = g.mse_loss(reconstruction, x)?;
        Ok(Pass { z, delta, reconstruction, loss })
    }

    /// Parameters of all three networks, encoder first.
    pub fn parameter_sets(&self) -> [&ParameterSet<T>; 3] {
        [&self.encoder.params, &self.decoder.params, &self.distorter.params]
    }

    pub fn parameter_sets_mut(&mut self) -> [&mut ParameterSet<T>; 3] {
        [&mut self.encoder.params, &mut self.decoder.params, &mut self.distorter.params]
    }

    pub fn from_parameters(
        config: ModelConfig,
        encoder: ParameterSet<T>,
        decoder: ParameterSet<T>,
        distorter: ParameterSet<T>,
    ) -> Result<Self> {
        let template = AlpsModel::<T>::new(config, 0)?;
        let same_layout = |a: &ParameterSet<T>, b: &ParameterSet<T>| {
            a.len() == b.len() && a.iter().zip(b.iter()).all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
        };
        if !same_layout(&template.encoder.params, &encoder)
            || !same_layout(&template.decoder.params, &decoder)
            || !same_layout(&template.distorter.params, &distorter)
        {
            return Err(Error::Contract("parameter layout does not match model config".into()));
        }
        Ok(AlpsModel {
            config,
            encoder: Encoder { config, params: encoder },
            decoder: Decoder { config, params: decoder },
            distorter: Distorter { config, params: distorter },
        })
    }

    pub fn zero_grads(&mut self) {
        self.parameter_sets_mut().into_iter().for_each(|p| p.zero_grads());
    }

    pub fn cast<U: Real>(&self) -> AlpsModel<U> {
        let c = self.config;
        AlpsModel {
            config: c,
            encoder: Encoder { config: c, params: self.encoder.params.cast() },
            decoder: Decoder { config: c, params: self.decoder.params.cast() },
            distorter: Distorter { config: c, params: self.distorter.params.cast() },
        }
    }
}

/// Adds a perturbation to a latent code inside a graph.
pub fn perturb<T: Real>(g: &mut Graph<T>, z: Var, delta: Var) -> Result<Var> {
    g.add(z, delta)
}
