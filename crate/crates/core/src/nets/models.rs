//! Encoder, projection/prediction heads, decoder and the composite models
//! used by pretraining and fine-tuning.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{
    Aspp, BasicBlock, BatchNorm2d, Conv2d, GlobalAvgPool, L2Normalize, Layer, Linear, MaxPool2d, Param, Relu,
    Sequential, UpsampleBilinear,
};
use super::tensor::Tensor;
use super::NetError;
use crate::config::{DecoderStyle, EncoderArch, ValidatedConfig};
use crate::rng::RngStream;
use crate::types::ShapeError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub arch: EncoderArch,
    pub input_size: (usize, usize),
    pub feature_dim: usize,
    pub stage_strides: Vec<usize>,
}

impl EncoderSpec {
    pub fn new(
        arch: EncoderArch,
        input_size: (usize, usize),
        feature_dim: usize,
        stage_strides: Vec<usize>,
    ) -> Result<Self, NetError> {
        let spec = Self {
            arch,
            input_size,
            feature_dim,
            stage_strides,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_config(config: &ValidatedConfig, input_side: usize) -> Result<Self, NetError> {
        let strides = match config.encoder {
            EncoderArch::ToyCnn => config.stage_strides.clone(),
            EncoderArch::Resnet18 => RESNET_STRIDES.to_vec(),
        };
        Self::new(config.encoder, (input_side, input_side), config.feature_dim, strides)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.feature_dim == 0 {
            return Err(NetError::InvalidSpec("feature_dim must be positive".into()));
        }
        if self.stage_strides.is_empty() || self.stage_strides.contains(&0) {
            return Err(NetError::InvalidSpec("stage strides must be positive".into()));
        }
        match self.arch {
            EncoderArch::ToyCnn if !self.feature_dim.is_multiple_of(4) => {
                return Err(NetError::InvalidSpec(
                    "toy_cnn feature_dim must be a multiple of 4".into(),
                ))
            }
            EncoderArch::Resnet18 if self.stage_strides != RESNET_STRIDES || !self.feature_dim.is_multiple_of(8) => {
                return Err(NetError::InvalidSpec(
                    "resnet18 uses fixed strides and a feature_dim divisible by 8".into(),
                ))
            }
            _ => {}
        }
        let sp = self.stride_product();
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % sp != 0 || w % sp != 0 {
            return Err(NetError::InvalidSpec(format!(
                "input {h}x{w} is not divisible by the stride product {sp}"
            )));
        }
        Ok(())
    }

    pub fn stride_product(&self) -> usize {
        self.stage_strides.iter().product()
    }

    /// `(C, H, W)` of the feature map for the configured input.
    pub fn output_shape(&self) -> [usize; 3] {
        let sp = self.stride_product();
        [self.feature_dim, self.input_size.0 / sp, self.input_size.1 / sp]
    }

    /// Same architecture on a different input size.
    pub fn with_input(&self, input_size: (usize, usize)) -> Result<Self, NetError> {
        Self::new(self.arch, input_size, self.feature_dim, self.stage_strides.clone())
    }

    /// Encoder weights are interchangeable between specs that agree on
    /// everything except the input size.
    pub fn compatible(&self, other: &EncoderSpec) -> bool {
        self.arch == other.arch && self.feature_dim == other.feature_dim && self.stage_strides == other.stage_strides
    }
}

/// Stem, max-pool, then the four residual stages.
const RESNET_STRIDES: [usize; 6] = [2, 2, 1, 2, 2, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Projector,
    Predictor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    /// Input width followed by each layer's output width.
    pub layer_dims: Vec<usize>,
    pub nonlinearity: Nonlinearity,
    pub final_norm: bool,
}

impl HeadSpec {
    pub fn new(kind: HeadKind, layer_dims: Vec<usize>, final_norm: bool) -> Result<Self, NetError> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(NetError::InvalidSpec(
                "a head needs at least one layer with positive widths".into(),
            ));
        }
        Ok(Self {
            kind,
            layer_dims,
            nonlinearity: Nonlinearity::Relu,
            final_norm,
        })
    }

    /// Two-layer MLP `feature_dim -> feature_dim -> d`.
    pub fn projector(feature_dim: usize, embedding_dim: usize) -> Result<Self, NetError> {
        Self::new(
            HeadKind::Projector,
            vec![feature_dim, feature_dim, embedding_dim],
            false,
        )
    }

    /// Mirrors the projector: `d -> feature_dim -> d`.
    pub fn predictor(feature_dim: usize, embedding_dim: usize) -> Result<Self, NetError> {
        Self::new(
            HeadKind::Predictor,
            vec![embedding_dim, feature_dim, embedding_dim],
            false,
        )
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub style: DecoderStyle,
    pub num_classes: usize,
    pub output_size: (usize, usize),
}

impl DecoderSpec {
    pub fn new(style: DecoderStyle, num_classes: usize, output_size: (usize, usize)) -> Result<Self, NetError> {
        if num_classes == 0 {
            return Err(NetError::InvalidSpec("num_classes must be at least 1".into()));
        }
        Ok(Self {
            style,
            num_classes,
            output_size,
        })
    }

    /// Number of output channels; a binary task uses a single logit.
    pub fn out_channels(&self) -> usize {
        self.num_classes
    }
}

/// Generates the `Layer` impl for a wrapper whose network lives in `self.net`.
macro_rules! delegate_layer {
    ($ty:ty) => {
        impl Layer for $ty {
            fn forward_train(&mut self, x: &Tensor) -> Tensor {
                self.net.forward_train(x)
            }

            fn infer(&self, x: &Tensor) -> Tensor {
                self.net.infer(x)
            }

            fn backward(&mut self, grad_out: &Tensor) -> Tensor {
                self.net.backward(grad_out)
            }

            fn params(&self) -> Vec<&Param> {
                self.net.params()
            }

            fn params_mut(&mut self) -> Vec<&mut Param> {
                self.net.params_mut()
            }

            fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
                self.net.output_shape(input)
            }
        }
    };
}

/// Feature extractor `f_theta`: a single-channel patch to a
/// `feature_dim x H/s x W/s` feature map.
pub struct Encoder {
    spec: EncoderSpec,
    net: Sequential,
}

impl Encoder {
    pub fn new(spec: EncoderSpec, rng: &mut RngStream) -> Result<Self, NetError> {
        spec.validate()?;
        let net = match spec.arch {
            EncoderArch::ToyCnn => toy_cnn(&spec, rng),
            EncoderArch::Resnet18 => resnet18(&spec, rng),
        };
        Ok(Self { spec, net })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }
}

delegate_layer!(Encoder);

fn toy_cnn(spec: &EncoderSpec, rng: &mut RngStream) -> Sequential {
    let f = spec.feature_dim;
    let n = spec.stage_strides.len();
    let mut net = Sequential::new();
    let mut cin = 1;
    for (i, &stride) in spec.stage_strides.iter().enumerate() {
        // Widths double per stage and end at feature_dim.
        let cout = (f >> (n - 1 - i).min(2)).max(1);
        net.push(Conv2d::new(
            &format!("enc.s{i}.conv1"),
            cin,
            cout,
            3,
            stride,
            1,
            true,
            rng,
        ));
        net.push(Relu::new());
        net.push(Conv2d::new(&format!("enc.s{i}.conv2"), cout, cout, 3, 1, 1, true, rng));
        net.push(Relu::new());
        cin = cout;
    }
    net
}

fn resnet18(spec: &EncoderSpec, rng: &mut RngStream) -> Sequential {
    let widths = [
        spec.feature_dim / 8,
        spec.feature_dim / 4,
        spec.feature_dim / 2,
        spec.feature_dim,
    ];
    let mut net = Sequential::new()
        .with(Conv2d::new("enc.stem", 1, widths[0], 7, 2, 1, false, rng))
        .with(BatchNorm2d::new("enc.stem_bn", widths[0]))
        .with(Relu::new())
        .with(MaxPool2d::new(3, 2, 1));
    let mut cin = widths[0];
    for (stage, &w) in widths.iter().enumerate() {
        let stride = if stage == 0 { 1 } else { 2 };
        net.push(BasicBlock::new(
            &format!("enc.layer{}.0", stage + 1),
            cin,
            w,
            stride,
            rng,
        ));
        net.push(BasicBlock::new(&format!("enc.layer{}.1", stage + 1), w, w, 1, rng));
        cin = w;
    }
    net
}

/// MLP head (`g_phi` or the predictor) on globally pooled features.
pub struct Head {
    spec: HeadSpec,
    net: Sequential,
}

impl Head {
    pub fn new(spec: HeadSpec, rng: &mut RngStream) -> Self {
        let prefix = match spec.kind {
            HeadKind::Projector => "proj",
            HeadKind::Predictor => "pred",
        };
        let mut net = Sequential::new();
        let layers = spec.layer_dims.len() - 1;
        for i in 0..layers {
            net.push(Linear::new(
                &format!("{prefix}.fc{i}"),
                spec.layer_dims[i],
                spec.layer_dims[i + 1],
                rng,
            ));
            if i + 1 < layers {
                match spec.nonlinearity {
                    Nonlinearity::Relu => net.push(Relu::new()),
                }
            }
        }
        if spec.final_norm {
            net.push(L2Normalize::new());
        }
        Self { spec, net }
    }

    pub fn spec(&self) -> &HeadSpec {
        &self.spec
    }
}

delegate_layer!(Head);

/// Segmentation decoder `F_psi`: features back to per-pixel logits at the
/// encoder's input resolution.
pub struct Decoder {
    spec: DecoderSpec,
    net: Sequential,
}

impl Decoder {
    pub fn new(spec: DecoderSpec, encoder: &EncoderSpec, rng: &mut RngStream) -> Result<Self, NetError> {
        if spec.output_size != encoder.input_size {
            return Err(NetError::InvalidSpec(format!(
                "decoder output {:?} differs from encoder input {:?}",
                spec.output_size, encoder.input_size
            )));
        }
        let f = encoder.feature_dim;
        let sp = encoder.stride_product();
        let mut net = Sequential::new();
        match spec.style {
            DecoderStyle::PlainUpsample => {
                let mut c = f;
                let mut factor = sp;
                let mut i = 0;
                while factor > 1 {
                    let up = if factor.is_multiple_of(2) { 2 } else { factor };
                    let next = (c / 2).max(8);
                    net.push(UpsampleBilinear::new(up));
                    net.push(Conv2d::new(&format!("dec.up{i}"), c, next, 3, 1, 1, true, rng));
                    net.push(Relu::new());
                    c = next;
                    factor /= up;
                    i += 1;
                }
                net.push(Conv2d::new(
                    "dec.classifier",
                    c,
                    spec.out_channels(),
                    1,
                    1,
                    1,
                    true,
                    rng,
                ));
            }
            DecoderStyle::DeeplabAspp => {
                net.push(Aspp::new("dec.aspp", f, f, &[1, 2, 3], rng));
                net.push(Conv2d::new("dec.fuse", f, f, 3, 1, 1, true, rng));
                net.push(Relu::new());
                net.push(Conv2d::new(
                    "dec.classifier",
                    f,
                    spec.out_channels(),
                    1,
                    1,
                    1,
                    true,
                    rng,
                ));
                if sp > 1 {
                    net.push(UpsampleBilinear::new(sp));
                }
            }
        }
        Ok(Self { spec, net })
    }

    pub fn spec(&self) -> &DecoderSpec {
        &self.spec
    }
}

delegate_layer!(Decoder);

// ---------------------------------------------------------------------------
// Free-standing operations

fn check_patch(spec: &EncoderSpec, patch: &Array2<f32>) -> Result<(), ShapeError> {
    if patch.dim() != spec.input_size {
        return Err(ShapeError::Mismatch {
            expected: spec.input_size,
            actual: patch.dim(),
        });
    }
    Ok(())
}

/// Eval-mode features of one patch, `feature_dim x H/s x W/s`.
pub fn encode(encoder: &Encoder, patch: &Array2<f32>) -> Result<Array3<f32>, ShapeError> {
    check_patch(encoder.spec(), patch)?;
    let out = encoder.infer(&Tensor::from_images(std::iter::once(patch)));
    let [_, c, h, w] = out.shape();
    Ok(Array3::from_shape_vec((c, h, w), out.into_data()).expect("shape matches"))
}

/// Embeddings for a batch of pooled feature vectors (`n x feature_dim`).
pub fn project(head: &Head, pooled: &Array2<f32>) -> Result<Array2<f32>, ShapeError> {
    let (n, d) = pooled.dim();
    if d != head.spec().input_dim() {
        return Err(ShapeError::Mismatch {
            expected: (n, head.spec().input_dim()),
            actual: (n, d),
        });
    }
    let x = Tensor::from_vec([n, d, 1, 1], pooled.iter().copied().collect());
    let out = head.infer(&x);
    Ok(Array2::from_shape_vec((n, head.spec().output_dim()), out.into_data()).expect("shape matches"))
}

/// `theta_t <- m * theta_t + (1 - m) * theta_o` over every parameter,
/// running statistics included.
pub fn ema_update(target: &mut dyn Layer, online: &dyn Layer, momentum: f32) -> Result<(), NetError> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(NetError::InvalidSpec(format!("momentum {momentum} outside [0, 1]")));
    }
    let src = online.params();
    let mut dst = target.params_mut();
    check_structure(&dst.iter().map(|p| &**p).collect::<Vec<_>>(), &src)?;
    for (t, o) in dst.iter_mut().zip(&src) {
        for (tv, &ov) in t.value.iter_mut().zip(&o.value) {
            *tv = momentum * *tv + (1.0 - momentum) * ov;
        }
    }
    Ok(())
}

/// Copies every parameter value of `src` into `dst`.
pub fn copy_params(dst: &mut dyn Layer, src: &dyn Layer) -> Result<(), NetError> {
    ema_update(dst, src, 0.0)
}

fn check_structure(a: &[&Param], b: &[&Param]) -> Result<(), NetError> {
    if a.len() != b.len() {
        return Err(NetError::StructureMismatch(format!(
            "{} parameters vs {}",
            a.len(),
            b.len()
        )));
    }
    for (x, y) in a.iter().zip(b) {
        if x.name != y.name || x.shape != y.shape {
            return Err(NetError::StructureMismatch(format!(
                "{} {:?} vs {} {:?}",
                x.name, x.shape, y.name, y.shape
            )));
        }
    }
    Ok(())
}

/// Hex SHA-256 over parameter names, shapes and little-endian values.
pub fn param_checksum(params: &[&Param]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.name.as_bytes());
        for &d in &p.shape {
            h.update((d as u64).to_le_bytes());
        }
        for v in &p.value {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Sigmoid for a single channel, softmax across channels otherwise.
pub fn logits_to_probs(logits: &Tensor) -> Tensor {
    let [n, c, h, w] = logits.shape();
    let hw = h * w;
    let mut out = logits.clone();
    if c == 1 {
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        return out;
    }
    for s in 0..n {
        let sample = out.sample_mut(s);
        for p in 0..hw {
            let max = (0..c).map(|k| sample[k * hw + p]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for k in 0..c {
                let e = (sample[k * hw + p] - max).exp();
                sample[k * hw + p] = e;
                sum += e;
            }
            for k in 0..c {
                sample[k * hw + p] /= sum;
            }
        }
    }
    out
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Keeps probabilities strictly inside `(0, 1)` despite f32 saturation.
fn open_unit(p: f32) -> f32 {
    p.clamp(f32::EPSILON, 1.0 - f32::EPSILON)
}

/// `sigma(F_psi(f_theta(x)))` for one patch: `1 x h x w` for binary tasks,
/// `K x h x w` per-pixel class probabilities otherwise.
pub fn segment_patch(encoder: &Encoder, decoder: &Decoder, patch: &Array2<f32>) -> Result<Array3<f32>, ShapeError> {
    check_patch(encoder.spec(), patch)?;
    if decoder.spec().output_size != patch.dim() {
        return Err(ShapeError::Mismatch {
            expected: decoder.spec().output_size,
            actual: patch.dim(),
        });
    }
    let logits = decoder.infer(&encoder.infer(&Tensor::from_images(std::iter::once(patch))));
    let probs = logits_to_probs(&logits);
    let [_, c, h, w] = probs.shape();
    let data = probs.into_data().into_iter().map(open_unit).collect();
    Ok(Array3::from_shape_vec((c, h, w), data).expect("shape matches"))
}

/// Encoder plus decoder, trained end to end during fine-tuning.
pub struct SegmentationModel {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl SegmentationModel {
    pub fn new(encoder: Encoder, decoder_spec: DecoderSpec, rng: &mut RngStream) -> Result<Self, NetError> {
        let decoder = Decoder::new(decoder_spec, encoder.spec(), rng)?;
        Ok(Self { encoder, decoder })
    }

    pub fn patch_size(&self) -> (usize, usize) {
        self.encoder.spec().input_size
    }

    pub fn num_classes(&self) -> usize {
        self.decoder.spec().num_classes
    }

    /// Logits for a batch; the encoder runs in eval mode when `frozen`.
    pub fn forward_train(&mut self, x: &Tensor, frozen: bool) -> Tensor {
        let feats = if frozen {
            self.encoder.infer(x)
        } else {
            self.encoder.forward_train(x)
        };
        self.decoder.forward_train(&feats)
    }

    pub fn backward(&mut self, dlogits: &Tensor, frozen: bool) {
        let dfeat = self.decoder.backward(dlogits);
        if !frozen {
            self.encoder.backward(&dfeat);
        }
    }

    /// Clamped probabilities for a batch of patches.
    pub fn predict(&self, x: &Tensor) -> Tensor {
        let mut p = logits_to_probs(&self.decoder.infer(&self.encoder.infer(x)));
        p.data_mut().iter_mut().for_each(|v| *v = open_unit(*v));
        p
    }
}

/// Networks used by self-supervised pretraining.
pub struct SslModel {
    pub encoder: Encoder,
    pub projector: Head,
    pool: GlobalAvgPool,
    /// Present for BYOL only.
    pub byol: Option<ByolParts>,
}

pub struct ByolParts {
    pub predictor: Head,
    pub target_encoder: Encoder,
    pub target_projector: Head,
}

/// Output of a pretraining forward pass over `2B` stacked views.
pub struct SslForward {
    /// Online projections (or predictions, for BYOL), `2B x d`.
    pub online: Tensor,
    /// Target projections for BYOL.
    pub target: Option<Tensor>,
}

impl SslModel {
    pub fn new(
        encoder: Encoder,
        projector: HeadSpec,
        predictor: Option<HeadSpec>,
        rng: &mut RngStream,
    ) -> Result<Self, NetError> {
        if projector.input_dim() != encoder.spec().feature_dim {
            return Err(NetError::InvalidSpec("projector input must equal feature_dim".into()));
        }
        let projector = Head::new(projector, rng);
        let byol = match predictor {
            Some(spec) => {
                if spec.input_dim() != projector.spec().output_dim() || spec.output_dim() != spec.input_dim() {
                    return Err(NetError::InvalidSpec("predictor must map d to d".into()));
                }
                let predictor = Head::new(spec, rng);
                let mut target_encoder = Encoder::new(encoder.spec().clone(), &mut rng.derive("target"))?;
                copy_params(&mut target_encoder, &encoder)?;
                let mut target_projector = Head::new(projector.spec().clone(), &mut rng.derive("target"));
                copy_params(&mut target_projector, &projector)?;
                Some(ByolParts {
                    predictor,
                    target_encoder,
                    target_projector,
                })
            }
            None => None,
        };
        Ok(Self {
            encoder,
            projector,
            pool: GlobalAvgPool::new(),
            byol,
        })
    }

    pub fn forward_train(&mut self, x: &Tensor) -> SslForward {
        let feats = self.encoder.forward_train(x);
        let pooled = self.pool.forward_train(&feats);
        let z = self.projector.forward_train(&pooled);
        match &mut self.byol {
            None => SslForward {
                online: z,
                target: None,
            },
            Some(b) => {
                let online = b.predictor.forward_train(&z);
                let tf = b.target_encoder.infer(x);
                let target = b.target_projector.infer(&self.pool.infer(&tf));
                SslForward {
                    online,
                    target: Some(target),
                }
            }
        }
    }

    pub fn backward(&mut self, donline: &Tensor) {
        let mut g = donline.clone();
        if let Some(b) = &mut self.byol {
            g = b.predictor.backward(&g);
        }
        let g = self.projector.backward(&g);
        let g = self.pool.backward(&g);
        self.encoder.backward(&g);
    }

    /// Parameters the optimizer updates (the BYOL target is excluded).
    pub fn online_params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.projector.params_mut());
        if let Some(b) = &mut self.byol {
            p.extend(b.predictor.params_mut());
        }
        p
    }

    pub fn online_params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        p.extend(self.projector.params());
        if let Some(b) = &self.byol {
            p.extend(b.predictor.params());
        }
        p
    }

    pub fn update_target(&mut self, momentum: f32) -> Result<(), NetError> {
        if let Some(b) = &mut self.byol {
            ema_update(&mut b.target_encoder, &self.encoder, momentum)?;
            ema_update(&mut b.target_projector, &self.projector, momentum)?;
        }
        Ok(())
    }

    pub fn target_params(&self) -> Vec<&Param> {
        match &self.byol {
            Some(b) => {
                let mut p = b.target_encoder.params();
                p.extend(b.target_projector.params());
                p
            }
            None => Vec::new(),
        }
    }
}
