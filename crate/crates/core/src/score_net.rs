//! The noise predictor ε_θ(x, t): an MLP over `[x, emb(t)]` with SiLU
//! activations, and its denoising score-matching trainer.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore};
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::autograd::Graph;
use crate::diffusion::{EpsModel, NoiseSchedule};
use crate::error::{contract, Error, Result};
use crate::optim::{adam_step, AdamState};
use crate::rng::{self, Rng};
use crate::sbdt::TensorBundle;
use crate::tensor::Tensor;

pub const DEFAULT_HIDDEN: [usize; 3] = [128, 128, 128];
pub const DEFAULT_EMBED_DIM: usize = 32;

/// Sinusoidal embedding of an integer timestep: `[sin(t·f_i)…, cos(t·f_i)…]`
/// with `f_i = 10000^(−i/(dim/2 − 1))`, i.e. frequencies geometrically spaced
/// from 1 down to 1e-4.
pub fn time_embedding(t: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(contract(format!("time embedding dimension must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    let t = t as f64;
    for i in 0..half {
        let freq = if half == 1 {
            1.0
        } else {
            10000f64.powf(-(i as f64) / (half - 1) as f64)
        };
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    Ok(Tensor::vector(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Hidden layers random, output layer zero: the untrained model predicts ε̂ = 0.
    ZeroOutput,
    /// Every layer random.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in × out]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    data_dim: usize,
    embed_dim: usize,
    hidden: Vec<usize>,
    layers: Vec<Linear>,
}

impl ScoreModel {
    pub fn new(data_dim: usize, hidden: &[usize], embed_dim: usize, init: Init, seed: u64) -> Result<Self> {
        if data_dim == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(contract("score model needs positive data and hidden dimensions"));
        }
        time_embedding(0, embed_dim)?;
        let mut rng = rng::seeded(seed);
        let mut widths = vec![data_dim + embed_dim];
        widths.extend_from_slice(hidden);
        widths.push(data_dim);
        let n_layers = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                if i == n_layers - 1 && init == Init::ZeroOutput {
                    return Linear {
                        weight: Tensor::zeros(&[fan_in, fan_out]),
                        bias: Tensor::zeros(&[fan_out]),
                    };
                }
                let bound = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let weight = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
                let bias = (0..fan_out).map(|_| dist.sample(&mut rng)).collect();
                Linear {
                    weight: Tensor::matrix(fan_in, fan_out, weight).expect("sized"),
                    bias: Tensor::vector(bias),
                }
            })
            .collect();
        Ok(Self {
            data_dim,
            embed_dim,
            hidden: hidden.to_vec(),
            layers,
        })
    }

    /// Default architecture: three hidden layers of 128, 32-dim time embedding,
    /// zero-initialized output layer.
    pub fn default_for(data_dim: usize, seed: u64) -> Result<Self> {
        Self::new(data_dim, &DEFAULT_HIDDEN, DEFAULT_EMBED_DIM, Init::ZeroOutput, seed)
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn params(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    fn set_params(&mut self, params: Vec<Tensor>) {
        let mut it = params.into_iter();
        for layer in &mut self.layers {
            layer.weight = it.next().expect("weight");
            layer.bias = it.next().expect("bias");
        }
    }

    fn network_input(&self, xs: &Tensor, ts: &[usize]) -> Result<Tensor> {
        if xs.ndim() != 2 || xs.cols() != self.data_dim || xs.rows() != ts.len() {
            return Err(Error::Shape {
                op: "score_forward",
                lhs: xs.shape().to_vec(),
                rhs: vec![ts.len(), self.data_dim],
            });
        }
        let mut emb = Vec::with_capacity(ts.len() * self.embed_dim);
        for &t in ts {
            emb.extend(time_embedding(t, self.embed_dim)?.into_data());
        }
        xs.hcat(&Tensor::matrix(ts.len(), self.embed_dim, emb)?)
    }

    /// ε̂ for a batch `xs` of shape `[n × d]` at per-row timesteps `ts`.
    pub fn forward_batch(&self, xs: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let mut h = self.network_input(xs, ts)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight)?.add_row_bias(&layer.bias)?;
            if i < last {
                h = h.silu();
            }
        }
        Ok(h)
    }

    /// ε̂(x_t, t) for a single sample of shape `[d]`.
    pub fn score_forward(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        if x_t.len() != self.data_dim {
            return Err(Error::Shape {
                op: "score_forward",
                lhs: x_t.shape().to_vec(),
                rhs: vec![self.data_dim],
            });
        }
        let xs = Tensor::matrix(1, self.data_dim, x_t.data().to_vec())?;
        let out = self.forward_batch(&xs, &[t])?;
        Tensor::new(x_t.shape().to_vec(), out.into_data())
    }

    /// Mean squared error of ε̂ against `targets`, with gradients for every
    /// parameter (weight, bias per layer).
    pub fn loss_and_grads(&self, xs: &Tensor, ts: &[usize], targets: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        let input = self.network_input(xs, ts)?;
        let mut g = Graph::new();
        let params: Vec<_> = self
            .layers
            .iter()
            .map(|l| (g.param(l.weight.clone()), g.param(l.bias.clone())))
            .collect();
        let mut h = g.constant(input);
        let last = params.len() - 1;
        for (i, &(w, b)) in params.iter().enumerate() {
            let z = g.matmul(h, w)?;
            h = g.add_row_bias(z, b)?;
            if i < last {
                h = g.silu(h);
            }
        }
        let target = g.constant(targets.clone());
        let diff = g.sub(h, target)?;
        let sq = g.square(diff);
        let loss = g.mean(sq);
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss)?.into_param_grads(&g);
        Ok((value, grads))
    }

    pub fn to_bundle(&self, extra_manifest: &[(&str, String)]) -> TensorBundle {
        let hidden: Vec<String> = self.hidden.iter().map(ToString::to_string).collect();
        let mut manifest = format!(
            "format=sbddm-score-mlp\nactivation=silu\ndata_dim={}\nembed_dim={}\nhidden={}\n",
            self.data_dim,
            self.embed_dim,
            hidden.join(",")
        );
        for (k, v) in extra_manifest {
            manifest.push_str(&format!("{k}={v}\n"));
        }
        let mut bundle = TensorBundle::new(manifest);
        for (i, l) in self.layers.iter().enumerate() {
            bundle.push(format!("layers.{i}.weight"), l.weight.clone());
            bundle.push(format!("layers.{i}.bias"), l.bias.clone());
        }
        bundle
    }

    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        let field = |key: &str| -> Result<&str> {
            manifest_value(&bundle.manifest, key)
                .ok_or_else(|| Error::Config(format!("checkpoint manifest lacks `{key}`")))
        };
        if field("format")? != "sbddm-score-mlp" {
            return Err(Error::Config("not a score-model checkpoint".into()));
        }
        let parse = |key: &str| -> Result<usize> {
            field(key)?
                .parse()
                .map_err(|_| Error::Config(format!("bad `{key}` in checkpoint manifest")))
        };
        let data_dim = parse("data_dim")?;
        let embed_dim = parse("embed_dim")?;
        let hidden = field("hidden")?
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Config("bad `hidden` in checkpoint manifest".into()))?;
        let mut model = Self::new(data_dim, &hidden, embed_dim, Init::ZeroOutput, 0)?;
        for (i, layer) in model.layers.iter_mut().enumerate() {
            for (name, slot) in [("weight", &mut layer.weight), ("bias", &mut layer.bias)] {
                let key = format!("layers.{i}.{name}");
                let t = bundle
                    .get(&key)
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor `{key}`")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Shape {
                        op: "from_bundle",
                        lhs: t.shape().to_vec(),
                        rhs: slot.shape().to_vec(),
                    });
                }
                *slot = t.clone();
            }
        }
        Ok(model)
    }
}

/// Looks up `key=value` in a line-oriented manifest.
pub fn manifest_value<'a>(manifest: &'a str, key: &str) -> Option<&'a str> {
    manifest
        .lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim())
}

impl EpsModel for ScoreModel {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.score_forward(x_t, t)
    }
}

/// Noise scale used to corrupt training inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoisingVariance {
    /// `√(1−ᾱ_t)`, the forward-marginal standard deviation.
    #[default]
    Marginal,
    /// `√((1−ᾱ_{t−1})/(1−ᾱ_t))`.
    PosteriorRatio,
}

impl NoisingVariance {
    pub fn scale(self, schedule: &NoiseSchedule, t: usize) -> f64 {
        match self {
            Self::Marginal => schedule.sigma(t),
            Self::PosteriorRatio => schedule.posterior_ratio_variance(t).sqrt(),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Self::Marginal => "marginal",
            Self::PosteriorRatio => "posterior-ratio",
        }
    }
}

/// Draws `ε ~ N(0, I)` and returns `(x_t, ε)` with `x_t = √ᾱ_t·x0 + c_t·ε`.
pub fn sample_training_pair(
    x0: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    variance: NoisingVariance,
    rng: &mut impl RngCore,
) -> Result<(Tensor, Tensor)> {
    if t > schedule.steps() {
        return Err(contract(format!("timestep {t} exceeds T = {}", schedule.steps())));
    }
    if variance == NoisingVariance::PosteriorRatio && t == 0 {
        return Err(contract("posterior-ratio variance is undefined at t = 0"));
    }
    let eps: Vec<f64> = (0..x0.len()).map(|_| StandardNormal.sample(rng)).collect();
    let eps = Tensor::new(x0.shape().to_vec(), eps)?;
    let a = schedule.alpha_bar(t).sqrt();
    let c = variance.scale(schedule, t);
    let xt = x0.axpby(a, &eps, c)?;
    Ok((xt, eps))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub variance: NoisingVariance,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 64,
            epochs: 1,
            seed: 0,
            variance: NoisingVariance::Marginal,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(format!(
                "learning rate, batch size and epochs must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: ScoreModel,
    /// Mean per-sample loss of each epoch.
    pub loss_curve: Vec<f64>,
}

/// Minimizes `E‖ε_θ(x_t, t) − ε‖²` (mean over coordinates) with
/// `t ~ Uniform{1..T}` and Adam. `data` holds one sample per row.
pub fn train(mut model: ScoreModel, data: &Tensor, cfg: &TrainConfig, schedule: &NoiseSchedule) -> Result<Trained> {
    cfg.validate()?;
    if data.ndim() != 2 || data.rows() == 0 {
        return Err(contract("training data must be a non-empty [n × d] matrix"));
    }
    if data.cols() != model.data_dim {
        return Err(Error::Shape {
            op: "train",
            lhs: data.shape().to_vec(),
            rhs: vec![model.data_dim],
        });
    }
    let n = data.rows();
    let d = model.data_dim;
    let big_t = schedule.steps();
    let mut rng = rng::seeded(cfg.seed);
    let mut params = model.params();
    let mut adam = AdamState::new(&params);
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch_seed = rng.next_u64();
            let mut brng: Rng = rng::seeded(batch_seed);
            let m = idx.len();
            let mut xs = Vec::with_capacity(m * d);
            let mut targets = Vec::with_capacity(m * d);
            let mut ts = Vec::with_capacity(m);
            for &i in idx {
                let t = brng.random_range(1..=big_t);
                let x0 = Tensor::vector(data.row(i).to_vec());
                let (xt, eps) = sample_training_pair(&x0, t, schedule, cfg.variance, &mut brng)?;
                xs.extend_from_slice(xt.data());
                targets.extend_from_slice(eps.data());
                ts.push(t);
            }
            let xs = Tensor::matrix(m, d, xs)?;
            let targets = Tensor::matrix(m, d, targets)?;
            let (loss, grads) = model.loss_and_grads(&xs, &ts, &targets)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    value: loss,
                    epoch,
                    batch,
                    batch_seed,
                });
            }
            adam_step(&mut params, &grads, &mut adam, cfg.learning_rate)?;
            model.set_params(params.clone());
            epoch_loss += loss * m as f64;
        }
        loss_curve.push(epoch_loss / n as f64);
    }
    Ok(Trained { model, loss_curve })
}
