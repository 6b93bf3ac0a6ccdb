//! Networks (posterior encoder, covariance encoder, decoder, classifier),
//! initialization, Adam and checkpoints.

mod adam;
mod checkpoint;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::copula::{build_correlation, CorrelationHeads, CorrelationModel, DiagGaussian};
use crate::error::{shape_err, Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Graph, Tensor, Unary, Var, LEAKY_SLOPE};

pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Tanh,
}

impl Activation {
    /// Kaiming gain for the nonlinearity.
    fn gain(self) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => 2f64.sqrt(),
            Activation::LeakyRelu => (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt(),
            Activation::Tanh => 5.0 / 3.0,
        }
    }

    fn unary(self) -> Option<Unary> {
        match self {
            Activation::Identity => None,
            Activation::Relu => Some(Unary::Relu),
            Activation::LeakyRelu => Some(Unary::LeakyRelu),
            Activation::Tanh => Some(Unary::Tanh),
        }
    }
}

/// Layer widths (input first) and the activation after each layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if widths.len() < 2 || activations.len() != widths.len() - 1 {
            return Err(Error::Config(format!("{} widths need {} activations", widths.len(), widths.len().saturating_sub(1))));
        }
        if widths.contains(&0) {
            return Err(Error::Config(format!("widths must be positive: {widths:?}")));
        }
        Ok(Self { widths, activations })
    }

    /// `input -> hidden... -> output`, `act` after hidden layers, identity output.
    pub fn stack(input: usize, hidden: &[usize], output: usize, act: Activation) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let mut acts = vec![act; hidden.len()];
        acts.push(Activation::Identity);
        Self::new(widths, acts)
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

/// Affine layer `x W + b` with `W` of shape `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Kaiming-uniform fan-in weights, zero bias.
    pub fn kaiming(input: usize, output: usize, gain: f64, rng: &mut Rng) -> Self {
        let bound = gain * (3.0 / input as f64).sqrt();
        let w = (0..input * output).map(|_| rng.random_range(-bound..=bound)).collect();
        Self { weight: Tensor::new(vec![input, output], w).expect("positive dims"), bias: Tensor::zeros(&[output]) }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Tensor::zeros(&[input, output]), bias: Tensor::zeros(&[output]) }
    }

    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.weight)?;
        let out = self.bias.len();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += self.bias.data()[i % out];
        }
        Ok(y)
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Result<[Var; 2]> {
        Ok([bind(g, &self.weight, trainable)?, bind(g, &self.bias, trainable)?])
    }

    fn forward(g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, p[0])?;
        g.add_row(y, p[1])
    }

    fn tensors(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

fn bind(g: &mut Graph, t: &Tensor, trainable: bool) -> Result<Var> {
    if trainable {
        g.param(t.clone())
    } else {
        g.constant(t.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn init(spec: MlpSpec, rng: &mut Rng) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .zip(&spec.activations)
            .map(|(w, a)| Linear::kaiming(w[0], w[1], a.gain(), rng))
            .collect();
        Self { spec, layers }
    }

    /// Zeroes the output layer so the network starts at a constant 0.
    pub fn zero_output(mut self) -> Self {
        let last = self.layers.last_mut().unwrap();
        *last = Linear::zeros(last.weight.rows(), last.weight.cols());
        self
    }

    /// Tape-free forward pass on an `N x in` batch.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 2 || x.cols() != self.spec.input() {
            return shape_err("mlp", format!("input {:?} for width {}", x.shape(), self.spec.input()));
        }
        let mut h = x.clone();
        for (layer, act) in self.layers.iter().zip(&self.spec.activations) {
            h = layer.eval(&h)?;
            if let Some(u) = act.unary() {
                h = h.map(|v| u.apply(v));
            }
        }
        if !h.all_finite() {
            return Err(Error::NonFinite("mlp"));
        }
        Ok(h)
    }

    /// Registers the parameters on the tape (constants when frozen).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.extend(l.bind(g, trainable)?);
        }
        Ok(out)
    }

    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        if g.shape(x).len() != 2 || g.shape(x)[1] != self.spec.input() {
            return shape_err("mlp", format!("input {:?} for width {}", g.shape(x), self.spec.input()));
        }
        let mut h = x;
        for (i, act) in self.spec.activations.iter().enumerate() {
            h = Linear::forward(g, &params[2 * i..2 * i + 2], h)?;
            if let Some(u) = act.unary() {
                h = g.unary(h, u)?;
            }
        }
        Ok(h)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

/// Sizes of every network in a [`ModelBundle`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Pixel count `P`.
    pub input: usize,
    pub latent: usize,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    pub cls_hidden: Vec<usize>,
    /// Width of the raw covariance-encoder features.
    pub cov_features: usize,
    /// Mixture components of the GMM copula heads; 0 builds no GMM heads.
    pub gmm_components: usize,
}

impl ModelConfig {
    pub fn new(input: usize, latent: usize) -> Self {
        Self {
            input,
            latent,
            enc_hidden: vec![256, 256],
            dec_hidden: vec![256, 256],
            cls_hidden: vec![256; 4],
            cov_features: 2 * latent,
            gmm_components: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.latent == 0 || self.cov_features == 0 {
            return Err(Error::Config("input, latent and cov_features must be positive".into()));
        }
        if self.gmm_components == 1 {
            return Err(Error::Config("gmm_components must be 0 or at least 2".into()));
        }
        for h in [&self.enc_hidden, &self.dec_hidden, &self.cls_hidden] {
            if h.contains(&0) {
                return Err(Error::Config(format!("hidden widths must be positive: {h:?}")));
            }
        }
        Ok(())
    }

    pub fn encoder_spec(&self) -> Result<MlpSpec> {
        MlpSpec::stack(self.input, &self.enc_hidden, 2 * self.latent, Activation::Relu)
    }

    pub fn cov_encoder_spec(&self) -> Result<MlpSpec> {
        MlpSpec::stack(self.input, &self.enc_hidden, self.cov_features, Activation::Relu)
    }

    pub fn decoder_spec(&self) -> Result<MlpSpec> {
        MlpSpec::stack(self.latent, &self.dec_hidden, self.input, Activation::Relu)
    }

    pub fn classifier_spec(&self) -> Result<MlpSpec> {
        MlpSpec::stack(self.latent, &self.cls_hidden, 1, Activation::LeakyRelu)
    }

    /// Total parameter count of a bundle built from this config.
    pub fn param_count(&self) -> Result<usize> {
        let (f, d, k) = (self.cov_features, self.latent, self.gmm_components);
        let heads = 2 * (f * d + d);
        let gmm = if k > 0 { (f * k + k) + 4 * (f * k * d + k * d) } else { 0 };
        Ok(self.encoder_spec()?.param_count()
            + self.cov_encoder_spec()?.param_count()
            + heads
            + gmm
            + self.decoder_spec()?.param_count()
            + self.classifier_spec()?.param_count())
    }
}

/// Mixture heads of the GMM copula: `k` components, each with a mean offset,
/// log-scale and its own `w`/`v` correlation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmHeads {
    pub components: usize,
    pub logits: Linear,
    pub delta: Linear,
    pub log_scale: Linear,
    pub w: Linear,
    pub v: Linear,
}

impl GmmHeads {
    fn tensors(&self) -> Vec<&Tensor> {
        [&self.logits, &self.delta, &self.log_scale, &self.w, &self.v].into_iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        [&mut self.logits, &mut self.delta, &mut self.log_scale, &mut self.w, &mut self.v]
            .into_iter()
            .flat_map(|l| l.tensors_mut())
            .collect()
    }
}

/// Parameter groups updated by different optimizers and phases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    /// φ
    Encoder,
    /// φ_c, including the correlation and mixture heads.
    CovEncoder,
    /// θ
    Decoder,
    /// ψ
    Classifier,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Encoder, Group::CovEncoder, Group::Decoder, Group::Classifier];

    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::CovEncoder => "cov_encoder",
            Group::Decoder => "decoder",
            Group::Classifier => "classifier",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub encoder: Mlp,
    pub cov_encoder: Mlp,
    pub cov_heads: CorrelationHeads,
    pub gmm_heads: Option<GmmHeads>,
    pub decoder: Mlp,
    pub classifier: Mlp,
}

/// Output of a recorded forward pass of the posterior encoder.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub mu: Var,
    pub logvar: Var,
}

/// `w` and `v` of the Gaussian copula, `N x d` each.
#[derive(Clone, Copy, Debug)]
pub struct CopulaVars {
    pub w: Var,
    pub v: Var,
}

/// Per-component GMM head outputs: mixture logits `N x k`, and `N x d`
/// offsets, log-scales, `w` and `v` per component.
#[derive(Clone, Debug)]
pub struct GmmVars {
    pub logits: Var,
    pub delta: Vec<Var>,
    pub log_scale: Vec<Var>,
    pub w: Vec<Var>,
    pub v: Vec<Var>,
}

impl ModelBundle {
    /// Fresh parameters; each network draws from its own RNG stream of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, f, k) = (config.latent, config.cov_features, config.gmm_components);
        let encoder = Mlp::init(config.encoder_spec()?, &mut rng::stream(seed, 1));
        let mut cov_rng = rng::stream(seed, 2);
        let cov_encoder = Mlp::init(config.cov_encoder_spec()?, &mut cov_rng);
        let w_head = Linear::kaiming(f, d, 1.0, &mut cov_rng);
        let v_head = Linear::zeros(f, d);
        let cov_heads = CorrelationHeads { w_weight: w_head.weight, w_bias: w_head.bias, v_weight: v_head.weight, v_bias: v_head.bias };
        let gmm_heads = (k > 0).then(|| GmmHeads {
            components: k,
            logits: Linear::zeros(f, k),
            delta: Linear::zeros(f, k * d),
            log_scale: Linear::zeros(f, k * d),
            w: Linear::kaiming(f, k * d, 1.0, &mut cov_rng),
            v: Linear::zeros(f, k * d),
        });
        let decoder = Mlp::init(config.decoder_spec()?, &mut rng::stream(seed, 3));
        let classifier = Mlp::init(config.classifier_spec()?, &mut rng::stream(seed, 4)).zero_output();
        Ok(Self { config, encoder, cov_encoder, cov_heads, gmm_heads, decoder, classifier })
    }

    /// Kaiming-initializes the off-diagonal (`v`) heads, which start at zero.
    /// At `v = 0` the correlation is the identity and its gradient vanishes,
    /// so a covariance encoder that is trained needs this first.
    pub fn randomize_correlation_heads(&mut self, seed: u64) {
        let mut r = rng::stream(seed, 5);
        let (d, f) = (self.config.latent, self.config.cov_features);
        let v = Linear::kaiming(f, d, 1.0, &mut r);
        (self.cov_heads.v_weight, self.cov_heads.v_bias) = (v.weight, v.bias);
        if let Some(h) = &mut self.gmm_heads {
            h.v = Linear::kaiming(f, h.components * d, 1.0, &mut r);
        }
    }

    pub fn latent(&self) -> usize {
        self.config.latent
    }

    /// Parameter tensors of one group in a fixed order.
    pub fn group(&self, group: Group) -> Vec<&Tensor> {
        match group {
            Group::Encoder => self.encoder.tensors(),
            Group::CovEncoder => {
                let h = &self.cov_heads;
                let mut t = self.cov_encoder.tensors();
                t.extend([&h.w_weight, &h.w_bias, &h.v_weight, &h.v_bias]);
                if let Some(gm) = &self.gmm_heads {
                    t.extend(gm.tensors());
                }
                t
            }
            Group::Decoder => self.decoder.tensors(),
            Group::Classifier => self.classifier.tensors(),
        }
    }

    pub fn group_mut(&mut self, group: Group) -> Vec<&mut Tensor> {
        match group {
            Group::Encoder => self.encoder.tensors_mut(),
            Group::CovEncoder => {
                let h = &mut self.cov_heads;
                let mut t = self.cov_encoder.tensors_mut();
                t.extend([&mut h.w_weight, &mut h.w_bias, &mut h.v_weight, &mut h.v_bias]);
                if let Some(gm) = &mut self.gmm_heads {
                    t.extend(gm.tensors_mut());
                }
                t
            }
            Group::Decoder => self.decoder.tensors_mut(),
            Group::Classifier => self.classifier.tensors_mut(),
        }
    }

    /// Stable names for every parameter, in [`Self::group`] order per group.
    pub fn group_names(&self, group: Group) -> Vec<String> {
        let mlp = |prefix: &str, m: &Mlp| -> Vec<String> {
            (0..m.layers.len()).flat_map(|i| [format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias")]).collect()
        };
        match group {
            Group::Encoder => mlp("encoder", &self.encoder),
            Group::CovEncoder => {
                let mut n = mlp("cov_encoder", &self.cov_encoder);
                n.extend(["cov_heads.w.weight", "cov_heads.w.bias", "cov_heads.v.weight", "cov_heads.v.bias"].map(String::from));
                if self.gmm_heads.is_some() {
                    for head in ["logits", "delta", "log_scale", "w", "v"] {
                        n.push(format!("gmm_heads.{head}.weight"));
                        n.push(format!("gmm_heads.{head}.bias"));
                    }
                }
                n
            }
            Group::Decoder => mlp("decoder", &self.decoder),
            Group::Classifier => mlp("classifier", &self.classifier),
        }
    }

    pub fn param_count(&self) -> usize {
        Group::ALL.iter().flat_map(|&g| self.group(g)).map(|t| t.len()).sum()
    }

    /// Order-sensitive fingerprint of a group's parameter bits.
    pub fn group_fingerprint(&self, group: Group) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.group(group) {
            for &x in t.data() {
                h = (h ^ x.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
                h ^= h >> 29;
            }
        }
        h
    }

    fn check_input(&self, x: &Tensor, width: usize, op: &'static str) -> Result<()> {
        if x.ndim() != 2 || x.cols() != width {
            return shape_err(op, format!("input {:?}, expected N x {width}", x.shape()));
        }
        Ok(())
    }

    /// Posterior means and clamped log-variances of an `N x P` batch.
    pub fn encode_batch(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x, self.config.input, "encode")?;
        let h = self.encoder.eval(x)?;
        let (n, d) = (x.rows(), self.latent());
        let mut mu = Vec::with_capacity(n * d);
        let mut lv = Vec::with_capacity(n * d);
        for i in 0..n {
            let r = h.row(i);
            mu.extend_from_slice(&r[..d]);
            lv.extend(r[d..].iter().map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)));
        }
        Ok((Tensor::new(vec![n, d], mu)?, Tensor::new(vec![n, d], lv)?))
    }

    pub fn encode(&self, x: &[f64]) -> Result<DiagGaussian> {
        let (mu, lv) = self.encode_batch(&Tensor::new(vec![1, x.len()], x.to_vec())?)?;
        DiagGaussian::new(mu.into_data(), lv.into_data())
    }

    /// Covariance-encoder features of an `N x P` batch.
    pub fn cov_features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x, self.config.input, "encode_cov")?;
        self.cov_encoder.eval(x)
    }

    pub fn encode_cov(&self, x: &[f64]) -> Result<CorrelationModel> {
        let raw = self.cov_features(&Tensor::new(vec![1, x.len()], x.to_vec())?)?;
        build_correlation(raw.data(), &self.cov_heads)
    }

    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        self.check_input(z, self.latent(), "decode")?;
        self.decoder.eval(z)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode_batch(&Tensor::new(vec![1, z.len()], z.to_vec())?)?.into_data())
    }

    /// Classifier logits, one per row.
    pub fn classify_batch(&self, z: &Tensor) -> Result<Vec<f64>> {
        self.check_input(z, self.latent(), "classify")?;
        Ok(self.classifier.eval(z)?.into_data())
    }

    pub fn classify(&self, z: &[f64]) -> Result<f64> {
        Ok(self.classify_batch(&Tensor::new(vec![1, z.len()], z.to_vec())?)?[0])
    }

    /// Recorded posterior encoder pass; `params` from `encoder.bind`.
    pub fn encode_on(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<PosteriorVars> {
        let h = self.encoder.forward(g, params, x)?;
        let d = self.latent();
        let mu = g.slice_cols(h, 0, d)?;
        let raw = g.slice_cols(h, d, 2 * d)?;
        let logvar = g.clamp(raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)?;
        Ok(PosteriorVars { mu, logvar })
    }

    /// Binds the covariance group (encoder and heads) on the tape.
    pub fn bind_cov(&self, g: &mut Graph, trainable: bool) -> Result<Vec<Var>> {
        self.group(Group::CovEncoder).into_iter().map(|t| bind(g, t, trainable)).collect()
    }

    fn cov_trunk(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let n = 2 * self.cov_encoder.layers.len();
        self.cov_encoder.forward(g, &params[..n], x)
    }

    /// Recorded `w = softplus(raw W₁ + b₁)`, `v = tanh(raw W₂ + b₂)`.
    pub fn copula_on(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<CopulaVars> {
        let raw = self.cov_trunk(g, params, x)?;
        let n = 2 * self.cov_encoder.layers.len();
        let w = Linear::forward(g, &params[n..n + 2], raw)?;
        let w = g.softplus(w)?;
        let v = Linear::forward(g, &params[n + 2..n + 4], raw)?;
        let v = g.tanh(v)?;
        Ok(CopulaVars { w, v })
    }

    /// Recorded GMM head outputs (requires GMM heads).
    pub fn gmm_on(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<GmmVars> {
        let gm = self.gmm_heads.as_ref().ok_or_else(|| Error::Config("model has no GMM heads".into()))?;
        let raw = self.cov_trunk(g, params, x)?;
        let base = 2 * self.cov_encoder.layers.len() + 4;
        let (k, d) = (gm.components, self.latent());
        let logits = Linear::forward(g, &params[base..base + 2], raw)?;
        let mut split = |offset: usize, act: Option<Unary>| -> Result<Vec<Var>> {
            let all = Linear::forward(g, &params[base + offset..base + offset + 2], raw)?;
            let all = match act {
                Some(u) => g.unary(all, u)?,
                None => all,
            };
            (0..k).map(|c| g.slice_cols(all, c * d, (c + 1) * d)).collect()
        };
        let delta = split(2, None)?;
        let log_scale = split(4, None)?;
        let w = split(6, Some(Unary::Softplus))?;
        let v = split(8, Some(Unary::Tanh))?;
        Ok(GmmVars { logits, delta, log_scale, w, v })
    }

    pub fn decode_on(&self, g: &mut Graph, params: &[Var], z: Var) -> Result<Var> {
        self.decoder.forward(g, params, z)
    }

    pub fn classify_on(&self, g: &mut Graph, params: &[Var], z: Var) -> Result<Var> {
        self.classifier.forward(g, params, z)
    }
}

