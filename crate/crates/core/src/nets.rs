//! Generator (encoder, residual bottleneck, decoder emitting an additive map)
//! and the fully convolutional patch critic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::ops::{
    leaky, relu_backward_inplace, relu_inplace, Conv2d, ConvCache, ConvTranspose2d,
    ConvTransposeCache, Geometry, InstanceNorm, NormCache,
};
use crate::tensor::Tensor;

/// How the generator output becomes a healthy-looking image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TranslationMode {
    /// `tanh(x + G(x))`: the generator predicts a change to the input.
    #[default]
    Additive,
    /// `tanh(G(x))`: the generator synthesizes the image outright.
    Direct,
}

impl std::str::FromStr for TranslationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(TranslationMode::Additive),
            "direct" => Ok(TranslationMode::Direct),
            other => Err(Error::validation(format!("unknown translation mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for TranslationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TranslationMode::Additive => "additive",
            TranslationMode::Direct => "direct",
        })
    }
}

/// Largest `f32` below 1.
const BELOW_ONE: f32 = 1.0 - f32::EPSILON / 2.0;

/// `tanh` kept inside the open interval; f32 `tanh` rounds to ±1 past |v| ≈ 9.
fn squash(v: f32) -> f32 {
    v.tanh().clamp(-BELOW_ONE, BELOW_ONE)
}

/// `tanh(x + map)`, elementwise.
pub fn compose_healthy(x: &Tensor, map: &Tensor) -> Result<Tensor> {
    x.zip_map(map, |a, b| squash(a + b))
}

/// Applies the composition selected by `mode`.
pub fn compose(mode: TranslationMode, x: &Tensor, map: &Tensor) -> Result<Tensor> {
    match mode {
        TranslationMode::Additive => compose_healthy(x, map),
        TranslationMode::Direct => {
            ensure!(x.shape() == map.shape(), "shape mismatch: {:?} vs {:?}", x.shape(), map.shape());
            Ok(map.map(squash))
        }
    }
}

/// A borrowed named parameter.
pub struct NamedParam<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f32],
}

/// A mutably borrowed named parameter.
pub struct NamedParamMut<'a> {
    pub name: String,
    pub data: &'a mut [f32],
}

/// Anything with an ordered, named list of parameter tensors.
///
/// Order is stable across calls and identical between a network and its
/// `zeros_like` gradient container.
pub trait Parameterized {
    fn params(&self) -> Vec<NamedParam<'_>>;
    fn params_mut(&mut self) -> Vec<NamedParamMut<'_>>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }
}

fn conv_shape(g: &Geometry, transposed: bool) -> Vec<usize> {
    if transposed {
        vec![g.in_ch, g.out_ch, g.kernel, g.kernel]
    } else {
        vec![g.out_ch, g.in_ch, g.kernel, g.kernel]
    }
}

fn push_conv<'a>(out: &mut Vec<NamedParam<'a>>, prefix: &str, conv: &'a Conv2d) {
    out.push(NamedParam { name: format!("{prefix}.weight"), shape: conv_shape(&conv.geom, false), data: &conv.weight });
    if let Some(b) = &conv.bias {
        out.push(NamedParam { name: format!("{prefix}.bias"), shape: vec![b.len()], data: b });
    }
}

fn push_conv_mut<'a>(out: &mut Vec<NamedParamMut<'a>>, prefix: &str, conv: &'a mut Conv2d) {
    out.push(NamedParamMut { name: format!("{prefix}.weight"), data: &mut conv.weight });
    if let Some(b) = conv.bias.as_mut() {
        out.push(NamedParamMut { name: format!("{prefix}.bias"), data: b });
    }
}

fn push_convt<'a>(out: &mut Vec<NamedParam<'a>>, prefix: &str, conv: &'a ConvTranspose2d) {
    out.push(NamedParam { name: format!("{prefix}.weight"), shape: conv_shape(&conv.geom, true), data: &conv.weight });
    if let Some(b) = &conv.bias {
        out.push(NamedParam { name: format!("{prefix}.bias"), shape: vec![b.len()], data: b });
    }
}

fn push_convt_mut<'a>(out: &mut Vec<NamedParamMut<'a>>, prefix: &str, conv: &'a mut ConvTranspose2d) {
    out.push(NamedParamMut { name: format!("{prefix}.weight"), data: &mut conv.weight });
    if let Some(b) = conv.bias.as_mut() {
        out.push(NamedParamMut { name: format!("{prefix}.bias"), data: b });
    }
}

fn push_norm<'a>(out: &mut Vec<NamedParam<'a>>, prefix: &str, norm: &'a InstanceNorm) {
    out.push(NamedParam { name: format!("{prefix}.gamma"), shape: vec![norm.gamma.len()], data: &norm.gamma });
    out.push(NamedParam { name: format!("{prefix}.beta"), shape: vec![norm.beta.len()], data: &norm.beta });
}

fn push_norm_mut<'a>(out: &mut Vec<NamedParamMut<'a>>, prefix: &str, norm: &'a mut InstanceNorm) {
    out.push(NamedParamMut { name: format!("{prefix}.gamma"), data: &mut norm.gamma });
    out.push(NamedParamMut { name: format!("{prefix}.beta"), data: &mut norm.beta });
}

fn scaled_width(base: usize, factor: f64) -> usize {
    ((base as f64 * factor).round() as usize).max(1)
}

/// Generator hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Multiplies every channel width (1.0 gives 64/128/256).
    pub width_factor: f64,
    pub residual_blocks: usize,
    pub init_std: f32,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { width_factor: 1.0, residual_blocks: 6, init_std: 0.02, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvNorm {
    pub conv: Conv2d,
    pub norm: InstanceNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpConvNorm {
    pub conv: ConvTranspose2d,
    pub norm: InstanceNorm,
}

/// Encoder (7/4/4 kernels, strides 1/2/2), residual bottleneck, and a
/// decoder of transposed convolutions ending in a single-channel map.
/// Every hidden stage is followed by instance norm and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub encoder: Vec<ConvNorm>,
    pub bottleneck: Vec<ConvNorm>,
    pub decoder: Vec<UpConvNorm>,
    pub head: ConvTranspose2d,
}

struct StageCache<C> {
    conv: C,
    norm: NormCache,
    activated: Tensor,
}

/// Intermediate state of a generator forward pass, consumed by backward.
pub struct GeneratorCache {
    encoder: Vec<StageCache<ConvCache>>,
    bottleneck: Vec<StageCache<ConvCache>>,
    decoder: Vec<StageCache<ConvTransposeCache>>,
    head: ConvTransposeCache,
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c1 = scaled_width(64, cfg.width_factor);
        let c2 = scaled_width(128, cfg.width_factor);
        let c3 = scaled_width(256, cfg.width_factor);
        let std = cfg.init_std;
        let enc = |g: Geometry, rng: &mut ChaCha8Rng| ConvNorm {
            conv: Conv2d::new(g, false, std, rng),
            norm: InstanceNorm::new(g.out_ch),
        };
        let encoder = vec![
            enc(Geometry::new(1, c1, 7, 1, 3), &mut rng),
            enc(Geometry::new(c1, c2, 4, 2, 1), &mut rng),
            enc(Geometry::new(c2, c3, 4, 2, 1), &mut rng),
        ];
        let bottleneck = (0..cfg.residual_blocks).map(|_| enc(Geometry::new(c3, c3, 3, 1, 1), &mut rng)).collect();
        let up = |g: Geometry, rng: &mut ChaCha8Rng| UpConvNorm {
            conv: ConvTranspose2d::new(g, false, std, rng),
            norm: InstanceNorm::new(g.out_ch),
        };
        let decoder = vec![up(Geometry::new(c3, c2, 4, 2, 1), &mut rng), up(Geometry::new(c2, c1, 4, 2, 1), &mut rng)];
        let head = ConvTranspose2d::new(Geometry::new(c1, 1, 7, 1, 3), false, std, &mut rng);
        Generator { encoder, bottleneck, decoder, head }
    }

    pub fn zeros_like(&self) -> Self {
        let zn = |b: &ConvNorm| ConvNorm { conv: b.conv.zeros_like(), norm: b.norm.zeros_like() };
        Generator {
            encoder: self.encoder.iter().map(zn).collect(),
            bottleneck: self.bottleneck.iter().map(zn).collect(),
            decoder: self
                .decoder
                .iter()
                .map(|b| UpConvNorm { conv: b.conv.zeros_like(), norm: b.norm.zeros_like() })
                .collect(),
            head: self.head.zeros_like(),
        }
    }

    /// Zeroes the output layer so that the additive map is identically zero.
    pub fn zero_head(&mut self) {
        self.head.weight.fill(0.0);
        if let Some(b) = self.head.bias.as_mut() {
            b.fill(0.0);
        }
    }

    /// Total spatial downsampling of the encoder.
    pub const DOWNSAMPLING: usize = 4;

    fn check_input(&self, x: &Tensor) -> Result<()> {
        ensure!(x.channels() == 1, "generator expects 1 input channel, got {}", x.channels());
        ensure!(
            x.height().is_multiple_of(Self::DOWNSAMPLING) && x.width().is_multiple_of(Self::DOWNSAMPLING) && x.height() > 0,
            "generator input {}x{} must be a positive multiple of {}",
            x.height(),
            x.width(),
            Self::DOWNSAMPLING
        );
        Ok(())
    }

    /// Additive map for a batch; same shape as the input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x, false)?.0)
    }

    /// Forward pass that keeps everything [`Generator::backward`] needs.
    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, GeneratorCache)> {
        let (out, cache) = self.run(x, true)?;
        Ok((out, cache.expect("cache requested")))
    }

    fn run(&self, x: &Tensor, keep: bool) -> Result<(Tensor, Option<GeneratorCache>)> {
        self.check_input(x)?;
        let mut enc_caches = Vec::new();
        let mut h = x.clone();
        for stage in &self.encoder {
            let (z, cc) = stage.conv.forward(&h, keep, false)?;
            let (mut a, nc) = stage.norm.forward(&z, keep)?;
            relu_inplace(&mut a);
            if keep {
                enc_caches.push(StageCache { conv: cc.unwrap(), norm: nc.unwrap(), activated: a.clone() });
            }
            h = a;
        }
        let mut res_caches = Vec::new();
        for stage in &self.bottleneck {
            let (z, cc) = stage.conv.forward(&h, keep, false)?;
            let (mut a, nc) = stage.norm.forward(&z, keep)?;
            relu_inplace(&mut a);
            let next = h.zip_map(&a, |s, r| s + r)?;
            if keep {
                res_caches.push(StageCache { conv: cc.unwrap(), norm: nc.unwrap(), activated: a });
            }
            h = next;
        }
        let mut dec_caches = Vec::new();
        for stage in &self.decoder {
            let (z, cc) = stage.conv.forward(&h, keep)?;
            let (mut a, nc) = stage.norm.forward(&z, keep)?;
            relu_inplace(&mut a);
            if keep {
                dec_caches.push(StageCache { conv: cc.unwrap(), norm: nc.unwrap(), activated: a.clone() });
            }
            h = a;
        }
        let (out, hc) = self.head.forward(&h, keep)?;
        let cache = keep.then(|| GeneratorCache {
            encoder: enc_caches,
            bottleneck: res_caches,
            decoder: dec_caches,
            head: hc.unwrap(),
        });
        Ok((out, cache))
    }

    /// Accumulates parameter gradients of `<grad_out, G(x)>` into `grads`.
    pub fn backward(&self, cache: &GeneratorCache, grad_out: &Tensor, grads: &mut Generator) {
        let mut g = self
            .head
            .backward(&cache.head, grad_out, Some(&mut grads.head), true)
            .expect("input gradient requested");
        for ((stage, sc), gs) in self.decoder.iter().zip(&cache.decoder).zip(grads.decoder.iter_mut()).rev() {
            relu_backward_inplace(&sc.activated, &mut g);
            let gz = stage.norm.backward(&sc.norm, &g, Some(&mut gs.norm));
            g = stage.conv.backward(&sc.conv, &gz, Some(&mut gs.conv), true).expect("input gradient requested");
        }
        for ((stage, sc), gs) in self.bottleneck.iter().zip(&cache.bottleneck).zip(grads.bottleneck.iter_mut()).rev() {
            let mut gr = g.clone();
            relu_backward_inplace(&sc.activated, &mut gr);
            let gz = stage.norm.backward(&sc.norm, &gr, Some(&mut gs.norm));
            let gin = stage.conv.backward(&sc.conv, &gz, Some(&mut gs.conv), false, true).expect("input gradient requested");
            g.data_mut().iter_mut().zip(gin.data()).for_each(|(a, b)| *a += b);
        }
        for (i, ((stage, sc), gs)) in self.encoder.iter().zip(&cache.encoder).zip(grads.encoder.iter_mut()).enumerate().rev() {
            relu_backward_inplace(&sc.activated, &mut g);
            let gz = stage.norm.backward(&sc.norm, &g, Some(&mut gs.norm));
            let want_input = i > 0;
            if let Some(gin) = stage.conv.backward(&sc.conv, &gz, Some(&mut gs.conv), false, want_input) {
                g = gin;
            }
        }
    }
}

impl Parameterized for Generator {
    fn params(&self) -> Vec<NamedParam<'_>> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter().enumerate() {
            push_conv(&mut out, &format!("generator.encoder.{i}"), &b.conv);
            push_norm(&mut out, &format!("generator.encoder.{i}"), &b.norm);
        }
        for (i, b) in self.bottleneck.iter().enumerate() {
            push_conv(&mut out, &format!("generator.bottleneck.{i}"), &b.conv);
            push_norm(&mut out, &format!("generator.bottleneck.{i}"), &b.norm);
        }
        for (i, b) in self.decoder.iter().enumerate() {
            push_convt(&mut out, &format!("generator.decoder.{i}"), &b.conv);
            push_norm(&mut out, &format!("generator.decoder.{i}"), &b.norm);
        }
        push_convt(&mut out, &format!("generator.decoder.{}", self.decoder.len()), &self.head);
        out
    }

    fn params_mut(&mut self) -> Vec<NamedParamMut<'_>> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter_mut().enumerate() {
            push_conv_mut(&mut out, &format!("generator.encoder.{i}"), &mut b.conv);
            push_norm_mut(&mut out, &format!("generator.encoder.{i}"), &mut b.norm);
        }
        for (i, b) in self.bottleneck.iter_mut().enumerate() {
            push_conv_mut(&mut out, &format!("generator.bottleneck.{i}"), &mut b.conv);
            push_norm_mut(&mut out, &format!("generator.bottleneck.{i}"), &mut b.norm);
        }
        let n_dec = self.decoder.len();
        for (i, b) in self.decoder.iter_mut().enumerate() {
            push_convt_mut(&mut out, &format!("generator.decoder.{i}"), &mut b.conv);
            push_norm_mut(&mut out, &format!("generator.decoder.{i}"), &mut b.norm);
        }
        push_convt_mut(&mut out, &format!("generator.decoder.{n_dec}"), &mut self.head);
        out
    }
}

/// Critic hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticConfig {
    /// Multiplies every channel width (1.0 gives 64 doubling to 2048).
    pub width_factor: f64,
    /// Number of stride-2 stages; the patch map side is `input / 2^downsamplings`.
    pub downsamplings: usize,
    pub leaky_slope: f32,
    /// Weight standard deviation; `None` scales each layer by its fan-in
    /// (`sqrt(2 / fan_in)`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_std: Option<f32>,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig { width_factor: 1.0, downsamplings: 6, leaky_slope: 0.01, init_std: None, seed: 1 }
    }
}

/// Fully convolutional critic: stride-2 4×4 convolutions with leaky ReLU,
/// then a 3×3 convolution to one channel. No normalization and no output
/// activation, so the score map is piecewise linear in the input.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchCritic {
    /// Stride-2 stages followed by the output layer (always last).
    pub layers: Vec<Conv2d>,
    pub leaky_slope: f32,
}

/// Intermediate state of a critic forward pass.
pub struct CriticCache {
    convs: Vec<ConvCache>,
    pre_activations: Vec<Tensor>,
}

/// Result of evaluating the gradient penalty on an interpolated batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyReport {
    /// Mean over samples of `(‖∇D‖₂ − 1)²`.
    pub penalty: f64,
    /// Per-sample input-gradient norms.
    pub grad_norms: Vec<f64>,
}

impl PatchCritic {
    pub fn new(cfg: &CriticConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut layers = Vec::with_capacity(cfg.downsamplings + 1);
        let mut in_ch = 1;
        for i in 0..cfg.downsamplings {
            let out_ch = scaled_width(64 << i, cfg.width_factor);
            let std = cfg.init_std.unwrap_or_else(|| (2.0 / (in_ch * 16) as f32).sqrt());
            layers.push(Conv2d::new(Geometry::new(in_ch, out_ch, 4, 2, 1), true, std, &mut rng));
            in_ch = out_ch;
        }
        let std = cfg.init_std.unwrap_or_else(|| (2.0 / (in_ch * 9) as f32).sqrt());
        layers.push(Conv2d::new(Geometry::new(in_ch, 1, 3, 1, 1), false, std, &mut rng));
        PatchCritic { layers, leaky_slope: cfg.leaky_slope }
    }

    /// A single 3×3 output layer with explicit weights and bias. On 1×1
    /// inputs only the centre tap matters, giving `D(x) = w·x + b`.
    pub fn single_layer(weights: [f32; 9], bias: f32) -> Self {
        PatchCritic {
            layers: vec![Conv2d {
                geom: Geometry::new(1, 1, 3, 1, 1),
                weight: weights.to_vec(),
                bias: Some(vec![bias]),
            }],
            leaky_slope: 0.01,
        }
    }

    pub fn zeros_like(&self) -> Self {
        PatchCritic { layers: self.layers.iter().map(Conv2d::zeros_like).collect(), leaky_slope: self.leaky_slope }
    }

    pub fn downsampling(&self) -> usize {
        1 << (self.layers.len() - 1)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let f = self.downsampling();
        ensure!(x.channels() == 1, "critic expects 1 input channel, got {}", x.channels());
        ensure!(
            x.height() >= f && x.width() >= f && x.height().is_multiple_of(f) && x.width().is_multiple_of(f),
            "critic input {}x{} is not divisible by its downsampling factor {f}",
            x.height(),
            x.width()
        );
        Ok(())
    }

    fn is_output(&self, i: usize) -> bool {
        i + 1 == self.layers.len()
    }

    /// Patch score map, one channel, side `input / downsampling()`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (mut z, _) = layer.forward(&h, false, true)?;
            if !self.is_output(i) {
                let s = self.leaky_slope;
                z.data_mut().iter_mut().for_each(|v| *v = leaky(*v, s));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, CriticCache)> {
        self.check_input(x)?;
        let mut convs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (z, cc) = layer.forward(&h, true, true)?;
            convs.push(cc.unwrap());
            if self.is_output(i) {
                h = z;
            } else {
                let s = self.leaky_slope;
                h = z.map(|v| leaky(v, s));
                pre.push(z);
            }
        }
        Ok((h, CriticCache { convs, pre_activations: pre }))
    }

    fn mask_inplace(&self, pre: &Tensor, g: &mut Tensor) {
        let s = self.leaky_slope;
        for (gv, &z) in g.data_mut().iter_mut().zip(pre.data()) {
            if z <= 0.0 {
                *gv *= s;
            }
        }
    }

    /// Backpropagates `grad_out` (gradient w.r.t. the score map). Returns the
    /// input gradient and, per layer, the gradient w.r.t. its pre-activation.
    pub fn backward(
        &self,
        cache: &CriticCache,
        grad_out: &Tensor,
        mut grads: Option<&mut PatchCritic>,
    ) -> (Tensor, Vec<Tensor>) {
        let n = self.layers.len();
        let mut deltas = vec![Tensor::zeros([0, 0, 0, 0]); n];
        let mut g = grad_out.clone();
        for i in (0..n).rev() {
            if !self.is_output(i) {
                self.mask_inplace(&cache.pre_activations[i], &mut g);
            }
            let gl = grads.as_deref_mut().map(|gr| &mut gr.layers[i]);
            let gin = self.layers[i].backward(&cache.convs[i], &g, gl, true, true).expect("input gradient requested");
            deltas[i] = std::mem::replace(&mut g, gin);
        }
        (g, deltas)
    }

    /// Per-sample gradient of the summed patch scores w.r.t. the input.
    pub fn input_gradient(&self, x: &Tensor) -> Result<Tensor> {
        let (out, cache) = self.forward_cached(x)?;
        Ok(self.backward(&cache, &Tensor::full(out.shape(), 1.0), None).0)
    }

    /// Evaluates `mean_i (‖∇ₓ Σ_patches D(x̂_i)‖₂ − 1)²` and, when `grads` is
    /// given, accumulates `scale` times its parameter gradient.
    ///
    /// The critic is piecewise linear, so its input gradient is a product of
    /// fixed masked linear maps. The derivative of `⟨v, ∇ₓD⟩` w.r.t. a layer's
    /// weights (with `v = ∂penalty/∂∇ₓD` held fixed) is then the ordinary
    /// weight gradient with the layer input replaced by the forward tangent of
    /// `v` and the output gradient taken from the input-gradient backward
    /// pass. Biases receive no penalty gradient.
    pub fn gradient_penalty(
        &self,
        xhat: &Tensor,
        grads: Option<&mut PatchCritic>,
        scale: f32,
    ) -> Result<PenaltyReport> {
        let batch = xhat.batch();
        ensure!(batch > 0, "gradient penalty needs a nonempty batch");
        let (out, cache) = self.forward_cached(xhat)?;
        let (gx, deltas) = self.backward(&cache, &Tensor::full(out.shape(), 1.0), None);
        let norms: Vec<f64> = (0..batch)
            .map(|i| gx.sample(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
            .collect();
        let penalty = norms.iter().map(|&n| (n - 1.0).powi(2)).sum::<f64>() / batch as f64;
        if let Some(grads) = grads {
            let mut tangent = gx;
            for (i, &norm) in norms.iter().enumerate() {
                let coef = if norm > 0.0 { 2.0 * (norm - 1.0) / (norm * batch as f64) } else { 0.0 };
                let coef = coef as f32 * scale;
                tangent.sample_mut(i).iter_mut().for_each(|v| *v *= coef);
            }
            for (i, layer) in self.layers.iter().enumerate() {
                let (mut t, tc) = layer.forward(&tangent, true, false)?;
                layer.backward(&tc.unwrap(), &deltas[i], Some(&mut grads.layers[i]), false, false);
                if !self.is_output(i) {
                    self.mask_inplace(&cache.pre_activations[i], &mut t);
                }
                tangent = t;
            }
        }
        Ok(PenaltyReport { penalty, grad_norms: norms })
    }
}

impl Parameterized for PatchCritic {
    fn params(&self) -> Vec<NamedParam<'_>> {
        let mut out = Vec::new();
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let prefix = match i {
                _ if i + 1 == n => "discriminator.output.0".to_string(),
                0 => "discriminator.input.0".to_string(),
                _ => format!("discriminator.hidden.{}", i - 1),
            };
            push_conv(&mut out, &prefix, layer);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<NamedParamMut<'_>> {
        let mut out = Vec::new();
        let n = self.layers.len();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let prefix = match i {
                _ if i + 1 == n => "discriminator.output.0".to_string(),
                0 => "discriminator.input.0".to_string(),
                _ => format!("discriminator.hidden.{}", i - 1),
            };
            push_conv_mut(&mut out, &prefix, layer);
        }
        out
    }
}
