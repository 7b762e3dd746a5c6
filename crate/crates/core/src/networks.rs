//! Encoder and decoder builders plus the recoding VAE that ties them together.
//!
//! Two regimes are supported: a four-block strided conv stack for 32×32 inputs and a
//! ResNet-18 whose every stage is 64 channels wide for 256×256 inputs. Decoders mirror
//! their encoder and end in a sigmoid so reconstructions live in [0, 1].
//!
//! The model owns exactly one encoder. The training pass encodes the input, decodes a
//! reparameterized sample, and encodes the reconstruction again with that same encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::GaussianBatch;
use crate::nn::{
    BasicBlock, BatchNorm2d, Cache, Conv2d, ConvTranspose2d, Linear, Mode, Op, Seq, Slot, Visitor,
};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_SMALL_WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const RESNET_WIDTH: usize = 64;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    SmallConv,
    Resnet18W64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    /// (channels, height, width)
    pub input_shape: (usize, usize, usize),
    pub latent_dim: usize,
    pub backbone: Backbone,
    /// Per-block channel widths of the small conv stack; ignored by the ResNet backbone.
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
}

fn default_widths() -> Vec<usize> {
    DEFAULT_SMALL_WIDTHS.to_vec()
}

impl EncoderSpec {
    pub fn small(channels: usize, latent_dim: usize) -> Self {
        Self {
            input_shape: (channels, 32, 32),
            latent_dim,
            backbone: Backbone::SmallConv,
            widths: default_widths(),
        }
    }

    pub fn resnet(channels: usize, latent_dim: usize) -> Self {
        Self {
            input_shape: (channels, 256, 256),
            latent_dim,
            backbone: Backbone::Resnet18W64,
            widths: vec![RESNET_WIDTH; 4],
        }
    }

    pub fn with_widths(mut self, widths: &[usize]) -> Self {
        self.widths = widths.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if c == 0 {
            return Err(Error::invalid("input must have at least one channel"));
        }
        if h != w {
            return Err(Error::invalid(format!("input must be square, got {h}×{w}")));
        }
        let expected = match self.backbone {
            Backbone::SmallConv => 32,
            Backbone::Resnet18W64 => 256,
        };
        if h != expected {
            return Err(Error::invalid(format!(
                "{:?} backbone expects {expected}×{expected} inputs, got {h}×{w}",
                self.backbone
            )));
        }
        if self.latent_dim < 8 {
            return Err(Error::invalid(format!(
                "latent_dim must be at least 8, got {}",
                self.latent_dim
            )));
        }
        self.validate_structure()
    }

    /// Checks that hold for every buildable spec, including miniature test models.
    fn validate_structure(&self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || h != w || self.latent_dim == 0 {
            return Err(Error::invalid(format!("unbuildable encoder spec {self:?}")));
        }
        match self.backbone {
            Backbone::SmallConv if self.widths.len() != 4 || self.widths.contains(&0) => Err(
                Error::invalid("small_conv backbone needs four nonzero block widths"),
            ),
            Backbone::Resnet18W64 if h % 64 != 0 => {
                Err(Error::invalid("resnet backbone needs a side length divisible by 64"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub latent_dim: usize,
    pub output_shape: (usize, usize, usize),
    pub backbone: Backbone,
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
}

impl DecoderSpec {
    pub fn mirror(enc: &EncoderSpec) -> Self {
        Self {
            latent_dim: enc.latent_dim,
            output_shape: enc.input_shape,
            backbone: enc.backbone,
            widths: enc.widths.clone(),
        }
    }

    pub fn check_pairs_with(&self, enc: &EncoderSpec) -> Result<()> {
        if self.output_shape != enc.input_shape
            || self.latent_dim != enc.latent_dim
            || self.backbone != enc.backbone
        {
            return Err(Error::invalid(format!(
                "decoder spec {self:?} does not mirror encoder spec {enc:?}"
            )));
        }
        Ok(())
    }
}

fn small_sizes(side: usize) -> [usize; 5] {
    let mut s = [side; 5];
    for i in 1..5 {
        s[i] = (s[i - 1] + 2 - 3) / 2 + 1;
    }
    s
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    spec: EncoderSpec,
    body: Seq<T>,
}

impl<T: Real> Encoder<T> {
    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if (c, h, w) != self.spec.input_shape {
            return Err(Error::shape(format!(
                "encoder expects per-sample shape {:?}, got {:?}",
                self.spec.input_shape,
                (c, h, w)
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: Tensor<T>, mode: Mode) -> Result<(GaussianBatch<T>, Vec<Cache<T>>)> {
        self.check_input(&x)?;
        let (out, caches) = self.body.forward(x, mode)?;
        Ok((split_head(&out, self.spec.latent_dim)?, caches))
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<GaussianBatch<T>> {
        Ok(self.forward(x.clone(), Mode::Eval)?.0)
    }

    pub fn backward(&mut self, caches: Vec<Cache<T>>, grad: &GaussianBatch<T>) -> Result<Tensor<T>> {
        let d = self.spec.latent_dim;
        let n = grad.batch();
        let mut joined = Tensor::zeros(&[n, 2 * d]);
        for i in 0..n {
            let row = joined.row_mut(i);
            row[..d].copy_from_slice(grad.mean.row(i));
            row[d..].copy_from_slice(grad.log_var.row(i));
        }
        self.body.backward(caches, joined)
    }

    pub fn commit_running_stats(&mut self, caches: &[Cache<T>]) {
        self.body.commit_running_stats(caches)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        self.body.visit(prefix, f)
    }

    /// Output shape of the last layer before global pooling, for a single input.
    pub fn pre_pool_shape(&self) -> Result<Vec<usize>> {
        let (c, h, w) = self.spec.input_shape;
        let mut x = Tensor::zeros(&[1, c, h, w]);
        for op in &self.body.ops {
            if matches!(op, Op::GlobalAvgPool | Op::Reshape(_)) {
                return Ok(x.shape().to_vec());
            }
            x = Seq::new(vec![op.clone()]).forward(x, Mode::Eval)?.0;
        }
        Ok(x.shape().to_vec())
    }

    /// Output channel count of every convolution in the encoder, in layer order.
    pub fn conv_widths(&self) -> Vec<usize> {
        fn walk<T: Real>(seq: &Seq<T>, out: &mut Vec<usize>) {
            for op in &seq.ops {
                match op {
                    Op::Conv(c) => out.push(c.out_ch),
                    Op::Block(b) => {
                        walk(&b.main, out);
                        if let Some(s) = &b.shortcut {
                            walk(s, out);
                        }
                    }
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.body, &mut out);
        out
    }
}

fn split_head<T: Real>(out: &Tensor<T>, d: usize) -> Result<GaussianBatch<T>> {
    let (n, two_d) = out.dims2()?;
    if two_d != 2 * d {
        return Err(Error::shape(format!("head width {two_d} is not 2×{d}")));
    }
    let mut mean = Tensor::zeros(&[n, d]);
    let mut log_var = Tensor::zeros(&[n, d]);
    for i in 0..n {
        mean.row_mut(i).copy_from_slice(&out.row(i)[..d]);
        log_var.row_mut(i).copy_from_slice(&out.row(i)[d..]);
    }
    GaussianBatch::new(mean, log_var)
}

#[derive(Clone, Debug)]
pub struct Decoder<T> {
    spec: DecoderSpec,
    body: Seq<T>,
}

impl<T: Real> Decoder<T> {
    pub fn spec(&self) -> &DecoderSpec {
        &self.spec
    }

    pub fn forward(&self, z: Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
        let (_, d) = z.dims2()?;
        if d != self.spec.latent_dim {
            return Err(Error::shape(format!(
                "decoder expects latent length {}, got {d}",
                self.spec.latent_dim
            )));
        }
        self.body.forward(z, mode)
    }

    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(z.clone(), Mode::Eval)?.0)
    }

    pub fn backward(&mut self, caches: Vec<Cache<T>>, dy: Tensor<T>) -> Result<Tensor<T>> {
        self.body.backward(caches, dy)
    }

    pub fn commit_running_stats(&mut self, caches: &[Cache<T>]) {
        self.body.commit_running_stats(caches)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        self.body.visit(prefix, f)
    }
}

fn small_encoder_body<T: Real>(spec: &EncoderSpec, rng: &mut ChaCha8Rng) -> Seq<T> {
    let (c, h, _) = spec.input_shape;
    let sizes = small_sizes(h);
    let mut ops = Vec::new();
    let mut prev = c;
    for &w in &spec.widths {
        ops.push(Op::Conv(Conv2d::new(prev, w, 3, 2, 1, false, rng)));
        ops.push(Op::BatchNorm(BatchNorm2d::new(w)));
        ops.push(Op::LeakyRelu(LEAKY_SLOPE));
        prev = w;
    }
    let flat = prev * sizes[4] * sizes[4];
    ops.push(Op::Reshape(vec![flat]));
    ops.push(Op::Linear(Linear::new(flat, 2 * spec.latent_dim, rng)));
    Seq::new(ops)
}

fn small_decoder_body<T: Real>(spec: &DecoderSpec, rng: &mut ChaCha8Rng) -> Seq<T> {
    let (c, h, _) = spec.output_shape;
    let sizes = small_sizes(h);
    let w = &spec.widths;
    let mut ops = vec![
        Op::Linear(Linear::new(spec.latent_dim, w[3] * sizes[4] * sizes[4], rng)),
        Op::Reshape(vec![w[3], sizes[4], sizes[4]]),
    ];
    for stage in (0..4).rev() {
        let in_ch = w[stage];
        let last = stage == 0;
        let out_ch = if last { c } else { w[stage - 1] };
        // output_padding picks the exact size the matching encoder block consumed.
        let out_pad = sizes[stage] + 1 - 2 * sizes[stage + 1];
        ops.push(Op::ConvT(ConvTranspose2d::new(in_ch, out_ch, 3, 2, 1, out_pad, last, rng)));
        if !last {
            ops.push(Op::BatchNorm(BatchNorm2d::new(out_ch)));
            ops.push(Op::LeakyRelu(LEAKY_SLOPE));
        }
    }
    ops.push(Op::Sigmoid);
    Seq::new(ops)
}

fn resnet_encoder_body<T: Real>(spec: &EncoderSpec, rng: &mut ChaCha8Rng) -> Seq<T> {
    let c = spec.input_shape.0;
    let w = RESNET_WIDTH;
    let mut ops = vec![
        Op::Conv(Conv2d::new(c, w, 7, 2, 3, false, rng)),
        Op::BatchNorm(BatchNorm2d::new(w)),
        Op::Relu,
        Op::MaxPool,
    ];
    for stage in 0..4 {
        let stride = if stage == 0 { 1 } else { 2 };
        ops.push(Op::Block(Box::new(BasicBlock::new(w, w, stride, rng))));
        ops.push(Op::Block(Box::new(BasicBlock::new(w, w, 1, rng))));
    }
    ops.push(Op::GlobalAvgPool);
    ops.push(Op::Linear(Linear::new(w, 2 * spec.latent_dim, rng)));
    Seq::new(ops)
}

fn resnet_decoder_body<T: Real>(spec: &DecoderSpec, rng: &mut ChaCha8Rng) -> Seq<T> {
    let (c, h, _) = spec.output_shape;
    let w = RESNET_WIDTH;
    let start = h / 64;
    let mut ops = vec![
        Op::Linear(Linear::new(spec.latent_dim, w * start * start, rng)),
        Op::Reshape(vec![w, start, start]),
    ];
    // h/64 -> h/4 through four upsampling residual stages, then two strided
    // transposed convs undo the stem's conv + max-pool.
    for _ in 0..4 {
        ops.push(Op::Upsample);
        ops.push(Op::Block(Box::new(BasicBlock::new(w, w, 1, rng))));
    }
    ops.push(Op::ConvT(ConvTranspose2d::new(w, w / 2, 3, 2, 1, 1, false, rng)));
    ops.push(Op::BatchNorm(BatchNorm2d::new(w / 2)));
    ops.push(Op::Relu);
    ops.push(Op::ConvT(ConvTranspose2d::new(w / 2, c, 3, 2, 1, 1, true, rng)));
    ops.push(Op::Sigmoid);
    Seq::new(ops)
}

fn require_backbone(got: Backbone, want: Backbone) -> Result<()> {
    if got != want {
        return Err(Error::invalid(format!(
            "builder for {want:?} called with a {got:?} spec"
        )));
    }
    Ok(())
}

pub fn build_small_encoder<T: Real>(spec: &EncoderSpec, rng: &mut ChaCha8Rng) -> Result<Encoder<T>> {
    require_backbone(spec.backbone, Backbone::SmallConv)?;
    spec.validate()?;
    Ok(Encoder {
        spec: spec.clone(),
        body: small_encoder_body(spec, rng),
    })
}

pub fn build_small_decoder<T: Real>(spec: &DecoderSpec, rng: &mut ChaCha8Rng) -> Result<Decoder<T>> {
    require_backbone(spec.backbone, Backbone::SmallConv)?;
    encoder_view(spec).validate()?;
    Ok(Decoder {
        spec: spec.clone(),
        body: small_decoder_body(spec, rng),
    })
}

pub fn build_resnet_encoder<T: Real>(spec: &EncoderSpec, rng: &mut ChaCha8Rng) -> Result<Encoder<T>> {
    require_backbone(spec.backbone, Backbone::Resnet18W64)?;
    spec.validate()?;
    Ok(Encoder {
        spec: spec.clone(),
        body: resnet_encoder_body(spec, rng),
    })
}

pub fn build_resnet_decoder<T: Real>(spec: &DecoderSpec, rng: &mut ChaCha8Rng) -> Result<Decoder<T>> {
    require_backbone(spec.backbone, Backbone::Resnet18W64)?;
    encoder_view(spec).validate()?;
    Ok(Decoder {
        spec: spec.clone(),
        body: resnet_decoder_body(spec, rng),
    })
}

fn encoder_view(spec: &DecoderSpec) -> EncoderSpec {
    EncoderSpec {
        input_shape: spec.output_shape,
        latent_dim: spec.latent_dim,
        backbone: spec.backbone,
        widths: spec.widths.clone(),
    }
}

/// Posteriors and reconstruction from one encode → decode → re-encode chain.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub x: Tensor<T>,
    pub q1: GaussianBatch<T>,
    pub x_hat: Tensor<T>,
    pub q2: GaussianBatch<T>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn new(x: Tensor<T>, q1: GaussianBatch<T>, x_hat: Tensor<T>, q2: GaussianBatch<T>) -> Result<Self> {
        let n = x.batch();
        if x.shape() != x_hat.shape() {
            return Err(Error::invalid(format!(
                "x {:?} and x_hat {:?} differ in shape",
                x.shape(),
                x_hat.shape()
            )));
        }
        if q1.batch() != n || q2.batch() != n || q1.dim() != q2.dim() {
            return Err(Error::invalid("trace batch sizes or latent dims disagree"));
        }
        Ok(Self { x, q1, x_hat, q2 })
    }

    pub fn batch(&self) -> usize {
        self.x.batch()
    }
}

/// Gradients of a scalar objective with respect to the quantities in a [`ForwardTrace`].
#[derive(Clone, Debug)]
pub struct TraceGrads<T> {
    pub q1: GaussianBatch<T>,
    pub x_hat: Tensor<T>,
    pub q2: GaussianBatch<T>,
}

impl<T: Real> TraceGrads<T> {
    pub fn zeros_like(trace: &ForwardTrace<T>) -> Self {
        Self {
            q1: trace.q1.zeros_like(),
            x_hat: Tensor::zeros(trace.x_hat.shape()),
            q2: trace.q2.zeros_like(),
        }
    }
}

/// A training-mode pass: the trace plus every cache needed to run it backwards.
pub struct TrainPass<T> {
    pub trace: ForwardTrace<T>,
    pub noise: Tensor<T>,
    /// Address of the encoder used for the first encoding and for the recoding.
    pub encoder_ids: [usize; 2],
    enc1: Vec<Cache<T>>,
    dec: Vec<Cache<T>>,
    enc2: Vec<Cache<T>>,
}

#[derive(Clone, Debug)]
pub struct Vae<T> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

impl<T: Real> Vae<T> {
    /// Builds a validated model; parameters are initialized from `seed`.
    pub fn new(enc: &EncoderSpec, seed: u64) -> Result<Self> {
        let dec = DecoderSpec::mirror(enc);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (encoder, decoder) = match enc.backbone {
            Backbone::SmallConv => (
                build_small_encoder(enc, &mut rng)?,
                build_small_decoder(&dec, &mut rng)?,
            ),
            Backbone::Resnet18W64 => (
                build_resnet_encoder(enc, &mut rng)?,
                build_resnet_decoder(&dec, &mut rng)?,
            ),
        };
        Ok(Self { encoder, decoder })
    }

    /// Builds a model without the resolution and latent-size whitelist, for
    /// miniature configurations used in gradient checks.
    pub fn new_unchecked(enc: &EncoderSpec, seed: u64) -> Result<Self> {
        enc.validate_structure()?;
        let dec = DecoderSpec::mirror(enc);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, d) = match enc.backbone {
            Backbone::SmallConv => (small_encoder_body(enc, &mut rng), small_decoder_body(&dec, &mut rng)),
            Backbone::Resnet18W64 => (resnet_encoder_body(enc, &mut rng), resnet_decoder_body(&dec, &mut rng)),
        };
        Ok(Self {
            encoder: Encoder { spec: enc.clone(), body: e },
            decoder: Decoder { spec: dec, body: d },
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.spec.latent_dim
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.encoder.spec.input_shape
    }

    /// Training-mode chain with explicit reparameterization noise (`N × D`).
    pub fn train_forward(&self, x: &Tensor<T>, noise: Tensor<T>) -> Result<TrainPass<T>> {
        let (q1, enc1) = self.encoder.forward(x.clone(), Mode::Train)?;
        let z = q1.reparameterize(&noise)?;
        let (x_hat, dec) = self.decoder.forward(z, Mode::Train)?;
        let (q2, enc2) = self.encoder.forward(x_hat.clone(), Mode::Train)?;
        let id = &self.encoder as *const Encoder<T> as usize;
        Ok(TrainPass {
            trace: ForwardTrace::new(x.clone(), q1, x_hat, q2)?,
            noise,
            encoder_ids: [id, id],
            enc1,
            dec,
            enc2,
        })
    }

    /// Accumulates parameter gradients for `grads` through the full chain: the
    /// recoding pass, the decoder, the reparameterization, and the first encoding.
    pub fn backward(&mut self, pass: TrainPass<T>, grads: &TraceGrads<T>) -> Result<()> {
        let TrainPass {
            trace,
            noise,
            enc1,
            dec,
            enc2,
            ..
        } = pass;
        let mut d_x_hat = self.encoder.backward(enc2, &grads.q2)?;
        d_x_hat.add_assign(&grads.x_hat);
        let dz = self.decoder.backward(dec, d_x_hat)?;
        let mut d_q1 = grads.q1.clone();
        trace.q1.reparameterize_backward(&noise, &dz, &mut d_q1);
        self.encoder.backward(enc1, &d_q1)?;
        Ok(())
    }

    /// Folds batch statistics into the running averages. Only the first encoding and
    /// the decoder pass contribute; the recoding pass uses batch statistics without
    /// updating them.
    pub fn commit_running_stats(&mut self, pass: &TrainPass<T>) {
        self.encoder.commit_running_stats(&pass.enc1);
        self.decoder.commit_running_stats(&pass.dec);
    }

    /// Deterministic evaluation chain: decode the posterior mean, then recode.
    pub fn infer(&self, x: &Tensor<T>) -> Result<ForwardTrace<T>> {
        let q1 = self.encoder.encode(x)?;
        let x_hat = self.decoder.decode(&q1.mean)?;
        let q2 = self.encoder.encode(&x_hat)?;
        ForwardTrace::new(x.clone(), q1, x_hat, q2)
    }

    pub fn visit(&mut self, f: &mut Visitor<'_, T>) {
        self.encoder.visit("encoder", f);
        self.decoder.visit("decoder", f);
    }

    pub fn zero_grad(&mut self) {
        self.visit(&mut |_, slot| {
            if let Slot::Param(p) = slot {
                p.grad.fill(T::zero());
            }
        });
    }

    pub fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, slot| {
            if let Slot::Param(p) = slot {
                n += p.value.len();
            }
        });
        n
    }

    pub fn named_tensors(&mut self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, slot| {
            let t = match slot {
                Slot::Param(p) => p.value.clone(),
                Slot::Buffer(b) => b.clone(),
            };
            out.push((name.to_string(), t));
        });
        out
    }
}

pub fn encoder_parameter_count<T: Real>(enc: &mut Encoder<T>) -> usize {
    let mut n = 0;
    enc.visit("encoder", &mut |_, slot| {
        if let Slot::Param(p) = slot {
            n += p.value.len();
        }
    });
    n
}

pub fn decoder_parameter_count<T: Real>(dec: &mut Decoder<T>) -> usize {
    let mut n = 0;
    dec.visit("decoder", &mut |_, slot| {
        if let Slot::Param(p) = slot {
            n += p.value.len();
        }
    });
    n
}
