//! Network architectures: the source density-regression model (encoder +
//! decoder), the domain-adaptation encoder, and the domain critic.
//!
//! Forward passes are read-only in their parameters. Each forward has a
//! `*_traced` twin that keeps the intermediate activations needed by the
//! matching `backward`, which accumulates parameter gradients into a
//! same-shaped parameter struct.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::{self, Conv2d, Dense};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Encoder output: `Z` channels at 1/8 of the input resolution.
pub type FeatureMap<T> = Tensor<T>;

/// Spatial reduction of the encoder (three 2×2 pools).
pub const DOWNSAMPLE: usize = 8;
pub const ENCODER_KERNELS: [usize; 4] = [32, 64, 128, 512];
pub const DECODER_KERNELS: [usize; 4] = [128, 64, 32, 1];
pub const CRITIC_KERNELS: [usize; 2] = [128, 256];
pub const CRITIC_HIDDEN: usize = 256;
pub const CRITIC_DROPOUT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    MaxPool,
    Upsample,
    AvgPoolGlobal,
    FullyConnected,
    Dropout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

/// One entry of a layer plan. `units` is the kernel count for convolutions
/// and the neuron count for fully connected layers; zero otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub units: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub activation: Activation,
}

impl LayerSpec {
    fn conv(units: usize, kernel_size: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Conv,
            units,
            kernel_size,
            stride: 1,
            activation,
        }
    }

    fn parameter_free(kind: LayerKind) -> Self {
        let (kernel_size, stride) = match kind {
            LayerKind::MaxPool | LayerKind::Upsample => (2, 2),
            _ => (0, 1),
        };
        Self {
            kind,
            units: 0,
            kernel_size,
            stride,
            activation: Activation::Linear,
        }
    }

    fn dense(units: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::FullyConnected,
            units,
            kernel_size: 0,
            stride: 1,
            activation,
        }
    }
}

/// Kernel counts of the density-regression model.
///
/// [`DrmArch::STANDARD`] is the production plan; smaller plans exist for
/// gradient verification and fast tests. The decoder must end in a single
/// density channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DrmArch {
    pub encoder: [usize; 4],
    pub decoder: [usize; 4],
}

impl DrmArch {
    pub const STANDARD: DrmArch = DrmArch {
        encoder: ENCODER_KERNELS,
        decoder: DECODER_KERNELS,
    };

    /// Miniature plan used by the finite-difference gradient check.
    pub const TINY: DrmArch = DrmArch {
        encoder: [2, 2, 2, 4],
        decoder: [2, 2, 2, 1],
    };

    pub fn validate(&self) -> Result<()> {
        if self.encoder.iter().chain(&self.decoder).any(|&k| k == 0) {
            return Err(Error::Config("kernel counts must be positive".into()));
        }
        if self.decoder[3] != 1 {
            return Err(Error::Config("decoder must end in one density channel".into()));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.encoder[3]
    }

    pub fn encoder_plan(&self) -> Vec<LayerSpec> {
        let mut plan = Vec::new();
        for (i, &k) in self.encoder.iter().enumerate() {
            plan.push(LayerSpec::conv(k, 3, Activation::Relu));
            if i < 3 {
                plan.push(LayerSpec::parameter_free(LayerKind::MaxPool));
            }
        }
        plan
    }

    pub fn decoder_plan(&self) -> Vec<LayerSpec> {
        let mut plan = Vec::new();
        for &k in &self.decoder[..3] {
            plan.push(LayerSpec::parameter_free(LayerKind::Upsample));
            plan.push(LayerSpec::conv(k, 3, Activation::Relu));
        }
        plan.push(LayerSpec::conv(self.decoder[3], 1, Activation::Linear));
        plan
    }

    /// `(in_channels, out_channels, k, k)` for every convolution, in order.
    pub fn conv_shapes(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut shapes = Vec::with_capacity(8);
        let mut c_in = 1;
        for &k in &self.encoder {
            shapes.push((c_in, k, 3, 3));
            c_in = k;
        }
        for (i, &k) in self.decoder.iter().enumerate() {
            let ks = if i == 3 { 1 } else { 3 };
            shapes.push((c_in, k, ks, ks));
            c_in = k;
        }
        shapes
    }

    /// Stable short digest of the layer plan, stored in checkpoints.
    pub fn hash(&self) -> String {
        plan_hash("drm", &[self.encoder_plan(), self.decoder_plan()].concat())
    }
}

/// Kernel counts of the domain critic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticArch {
    pub feature_channels: usize,
    pub conv: [usize; 2],
    pub hidden: usize,
    pub dropout: f64,
}

impl CriticArch {
    pub const STANDARD: CriticArch = CriticArch {
        feature_channels: ENCODER_KERNELS[3],
        conv: CRITIC_KERNELS,
        hidden: CRITIC_HIDDEN,
        dropout: CRITIC_DROPOUT,
    };

    pub fn plan(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::conv(self.conv[0], 3, Activation::Relu),
            LayerSpec::conv(self.conv[1], 3, Activation::Relu),
            LayerSpec::parameter_free(LayerKind::AvgPoolGlobal),
            LayerSpec::dense(self.hidden, Activation::Relu),
            LayerSpec::parameter_free(LayerKind::Dropout),
            LayerSpec::dense(1, Activation::Linear),
        ]
    }

    pub fn hash(&self) -> String {
        plan_hash(&format!("dcm{}", self.feature_channels), &self.plan())
    }
}

/// Digest of an encoder-only plan, used for adaptation-encoder checkpoints.
pub fn encoder_hash(kernels: [usize; 4]) -> String {
    let arch = DrmArch {
        encoder: kernels,
        decoder: DECODER_KERNELS,
    };
    plan_hash("encoder", &arch.encoder_plan())
}

fn plan_hash(tag: &str, plan: &[LayerSpec]) -> String {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    for l in plan {
        h.update(
            format!(
                "{:?}/{}/{}/{}/{:?};",
                l.kind, l.units, l.kernel_size, l.stride, l.activation
            )
            .as_bytes(),
        );
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Read-only and mutable views over the named parameter tensors of a model.
pub trait ParamSet<T: Scalar> {
    /// `(name, shape, values)` in a fixed order.
    fn named(&self) -> Vec<(String, Vec<usize>, &[T])>;
    /// Mutable slices in the same order as [`ParamSet::named`].
    fn slices_mut(&mut self) -> Vec<&mut [T]>;

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, _, v)| v.len()).sum()
    }

    /// Sets every parameter to zero.
    fn zero(&mut self) {
        for s in self.slices_mut() {
            s.fill(T::zero());
        }
    }

    /// Copies all values into one flat vector (for comparisons and audits).
    fn flatten(&self) -> Vec<T> {
        self.named()
            .into_iter()
            .flat_map(|(_, _, v)| v.iter().copied())
            .collect()
    }
}

fn conv_entries<'a, T: Scalar>(prefix: &str, convs: &'a [Conv2d<T>], out: &mut Vec<(String, Vec<usize>, &'a [T])>) {
    for (i, c) in convs.iter().enumerate() {
        out.push((
            format!("{prefix}.conv{i}.weight"),
            vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
            &c.weight,
        ));
        out.push((format!("{prefix}.conv{i}.bias"), vec![c.out_channels], &c.bias));
    }
}

fn conv_slices<'a, T>(convs: &'a mut [Conv2d<T>], out: &mut Vec<&'a mut [T]>) {
    for c in convs {
        out.push(&mut c.weight);
        out.push(&mut c.bias);
    }
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(DOWNSAMPLE) || !w.is_multiple_of(DOWNSAMPLE) {
        return Err(Error::Shape(format!(
            "image {h}x{w}: height and width must be positive multiples of {DOWNSAMPLE}"
        )));
    }
    Ok(())
}

/// Convolutional encoder: conv→pool→conv→pool→conv→pool→conv, ReLU after
/// every convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub convs: Vec<Conv2d<T>>,
}

/// Activations kept by [`Encoder::encode_traced`].
pub struct EncoderTrace<T> {
    conv_inputs: Vec<Tensor<T>>,
    activations: Vec<Tensor<T>>,
    pool_args: Vec<Vec<u8>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn zeros(kernels: [usize; 4]) -> Self {
        let mut c_in = 1;
        let convs = kernels
            .iter()
            .map(|&k| {
                let c = Conv2d::zeros(c_in, k, 3);
                c_in = k;
                c
            })
            .collect();
        Self { convs }
    }

    pub fn init<R: Rng>(kernels: [usize; 4], rng: &mut R) -> Self {
        let mut c_in = 1;
        let convs = kernels
            .iter()
            .map(|&k| {
                let c = Conv2d::he_uniform(c_in, k, 3, rng);
                c_in = k;
                c
            })
            .collect();
        Self { convs }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            convs: self.convs.iter().map(Conv2d::zeros_like).collect(),
        }
    }

    pub fn kernels(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.convs[i].out_channels)
    }

    /// Maps a single-channel image to its feature map.
    pub fn encode<U: Copy + Into<f64>>(&self, img: &Grid<U>) -> Result<FeatureMap<T>> {
        check_divisible(img.rows(), img.cols())?;
        let mut x = Tensor::from_grid(img);
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x);
            nn::relu_inplace(&mut x);
            if i < 3 {
                x = nn::maxpool2(&x).0;
            }
        }
        Ok(x)
    }

    pub fn encode_traced<U: Copy + Into<f64>>(&self, img: &Grid<U>) -> Result<(FeatureMap<T>, EncoderTrace<T>)> {
        check_divisible(img.rows(), img.cols())?;
        let mut x = Tensor::from_grid(img);
        let mut trace = EncoderTrace {
            conv_inputs: Vec::new(),
            activations: Vec::new(),
            pool_args: Vec::new(),
        };
        for (i, conv) in self.convs.iter().enumerate() {
            let mut a = conv.forward(&x);
            nn::relu_inplace(&mut a);
            trace.conv_inputs.push(x);
            if i < 3 {
                let (p, arg) = nn::maxpool2(&a);
                trace.pool_args.push(arg);
                trace.activations.push(a);
                x = p;
            } else {
                x = a.clone();
                trace.activations.push(a);
            }
        }
        Ok((x, trace))
    }

    /// Accumulates `∂L/∂θ` given `∂L/∂features`.
    pub fn backward(&self, trace: &EncoderTrace<T>, dfeat: &FeatureMap<T>, grad: &mut Self) {
        let mut d = dfeat.clone();
        for i in (0..4).rev() {
            let act = &trace.activations[i];
            if i < 3 {
                d = nn::maxpool2_backward(&d, &trace.pool_args[i], act.height(), act.width());
            }
            nn::relu_backward_inplace(act, &mut d);
            let input = &trace.conv_inputs[i];
            match self.convs[i].backward(input, &d, &mut grad.convs[i], i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }
}

impl<T: Scalar> ParamSet<T> for Encoder<T> {
    fn named(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut v = Vec::new();
        conv_entries("encoder", &self.convs, &mut v);
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = Vec::new();
        conv_slices(&mut self.convs, &mut v);
        v
    }
}

/// Convolutional decoder: (up→conv) ×3 then a linear 1×1 density head.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    pub convs: Vec<Conv2d<T>>,
}

pub struct DecoderTrace<T> {
    conv_inputs: Vec<Tensor<T>>,
    activations: Vec<Tensor<T>>,
}

impl<T: Scalar> Decoder<T> {
    fn build(
        feature_channels: usize,
        kernels: [usize; 4],
        mut make: impl FnMut(usize, usize, usize) -> Conv2d<T>,
    ) -> Self {
        let mut c_in = feature_channels;
        let convs = kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let c = make(c_in, k, if i == 3 { 1 } else { 3 });
                c_in = k;
                c
            })
            .collect();
        Self { convs }
    }

    pub fn zeros(feature_channels: usize, kernels: [usize; 4]) -> Self {
        Self::build(feature_channels, kernels, Conv2d::zeros)
    }

    pub fn init<R: Rng>(feature_channels: usize, kernels: [usize; 4], rng: &mut R) -> Self {
        Self::build(feature_channels, kernels, |i, o, k| Conv2d::he_uniform(i, o, k, rng))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            convs: self.convs.iter().map(Conv2d::zeros_like).collect(),
        }
    }

    fn check_input(&self, feat: &FeatureMap<T>) -> Result<()> {
        if feat.channels() != self.convs[0].in_channels {
            return Err(Error::Shape(format!(
                "decoder expects {} feature channels, got {}",
                self.convs[0].in_channels,
                feat.channels()
            )));
        }
        Ok(())
    }

    /// Maps a feature map back to a full-resolution density estimate.
    pub fn decode(&self, feat: &FeatureMap<T>) -> Result<Grid<T>> {
        self.check_input(feat)?;
        let mut x = feat.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            if i < 3 {
                x = nn::upsample2(&x);
            }
            x = conv.forward(&x);
            if i < 3 {
                nn::relu_inplace(&mut x);
            }
        }
        Ok(x.channel_grid(0))
    }

    pub fn decode_traced(&self, feat: &FeatureMap<T>) -> Result<(Grid<T>, DecoderTrace<T>)> {
        self.check_input(feat)?;
        let mut trace = DecoderTrace {
            conv_inputs: Vec::new(),
            activations: Vec::new(),
        };
        let mut x = feat.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            if i < 3 {
                x = nn::upsample2(&x);
            }
            let mut y = conv.forward(&x);
            trace.conv_inputs.push(x);
            if i < 3 {
                nn::relu_inplace(&mut y);
                trace.activations.push(y.clone());
            }
            x = y;
        }
        Ok((x.channel_grid(0), trace))
    }

    /// Accumulates parameter gradients and returns `∂L/∂features`.
    pub fn backward(&self, trace: &DecoderTrace<T>, dout: &Grid<T>, grad: &mut Self) -> FeatureMap<T> {
        let mut d = Tensor::from_vec(1, dout.rows(), dout.cols(), dout.as_slice().to_vec()).expect("shape");
        for i in (0..4).rev() {
            if i < 3 {
                nn::relu_backward_inplace(&trace.activations[i], &mut d);
            }
            d = self.convs[i]
                .backward(&trace.conv_inputs[i], &d, &mut grad.convs[i], true)
                .expect("input grad requested");
            if i < 3 {
                d = nn::upsample2_backward(&d);
            }
        }
        d
    }
}

impl<T: Scalar> ParamSet<T> for Decoder<T> {
    fn named(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut v = Vec::new();
        conv_entries("decoder", &self.convs, &mut v);
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = Vec::new();
        conv_slices(&mut self.convs, &mut v);
        v
    }
}

/// Source density-regression model `F = decode ∘ encode`.
#[derive(Debug, Clone, PartialEq)]
pub struct DrmParams<T> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> DrmParams<T> {
    pub fn zeros(arch: DrmArch) -> Self {
        Self {
            encoder: Encoder::zeros(arch.encoder),
            decoder: Decoder::zeros(arch.encoder[3], arch.decoder),
        }
    }

    /// He-uniform initialisation from a seed.
    pub fn init(arch: DrmArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::init(arch.encoder, &mut rng);
        let decoder = Decoder::init(arch.encoder[3], arch.decoder, &mut rng);
        Self { encoder, decoder }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    pub fn arch(&self) -> DrmArch {
        DrmArch {
            encoder: self.encoder.kernels(),
            decoder: [0, 1, 2, 3].map(|i| self.decoder.convs[i].out_channels),
        }
    }

    /// Estimated density map; may contain negative values.
    pub fn drm_forward<U: Copy + Into<f64>>(&self, img: &Grid<U>) -> Result<Grid<T>> {
        self.decoder.decode(&self.encoder.encode(img)?)
    }

    /// Forward + backward of `scale·‖F(x) − y‖²` for one sample.
    /// Returns the unscaled squared error.
    pub fn accumulate_squared_error<U: Copy + Into<f64>>(
        &self,
        img: &Grid<U>,
        target: &Grid<f64>,
        scale: T,
        grad: &mut Self,
    ) -> Result<T> {
        let (feat, etrace) = self.encoder.encode_traced(img)?;
        let (pred, dtrace) = self.decoder.decode_traced(&feat)?;
        if pred.shape() != target.shape() {
            return Err(Error::Data(format!(
                "prediction {:?} vs target {:?}",
                pred.shape(),
                target.shape()
            )));
        }
        let mut sq = T::zero();
        let two = T::lit(2.0) * scale;
        let dpred = Grid::from_vec(
            pred.rows(),
            pred.cols(),
            pred.as_slice()
                .iter()
                .zip(target.as_slice())
                .map(|(&p, &y)| {
                    let r = p - T::lit(y);
                    sq += r * r;
                    two * r
                })
                .collect(),
        )?;
        let dfeat = self.decoder.backward(&dtrace, &dpred, &mut grad.decoder);
        self.encoder.backward(&etrace, &dfeat, &mut grad.encoder);
        Ok(sq)
    }
}

impl<T: Scalar> ParamSet<T> for DrmParams<T> {
    fn named(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut v = self.encoder.named();
        v.extend(self.decoder.named());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.encoder.slices_mut();
        v.extend(self.decoder.slices_mut());
        v
    }
}

/// Target-domain encoder, layerwise congruent with the source encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DamParams<T> {
    pub encoder: Encoder<T>,
}

impl<T: Scalar> DamParams<T> {
    /// Starts adaptation from a copy of the trained source encoder.
    pub fn from_ecnn(ecnn: &Encoder<T>) -> Self {
        Self { encoder: ecnn.clone() }
    }
}

impl<T: Scalar> ParamSet<T> for DamParams<T> {
    fn named(&self) -> Vec<(String, Vec<usize>, &[T])> {
        self.encoder.named()
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        self.encoder.slices_mut()
    }
}

/// Domain critic: conv→conv→global average→FC→dropout→scalar head.
#[derive(Debug, Clone, PartialEq)]
pub struct DcmParams<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub fc: Dense<T>,
    pub head: Dense<T>,
    pub dropout: f64,
}

pub struct CriticTrace<T> {
    feat: FeatureMap<T>,
    c1: Tensor<T>,
    c2: Tensor<T>,
    pooled: Vec<T>,
    hidden: Vec<T>,
    mask: Option<Vec<T>>,
    dropped: Vec<T>,
}

impl<T: Scalar> DcmParams<T> {
    pub fn zeros(arch: CriticArch) -> Self {
        Self {
            conv1: Conv2d::zeros(arch.feature_channels, arch.conv[0], 3),
            conv2: Conv2d::zeros(arch.conv[0], arch.conv[1], 3),
            fc: Dense::zeros(arch.conv[1], arch.hidden),
            head: Dense::zeros(arch.hidden, 1),
            dropout: arch.dropout,
        }
    }

    pub fn init(arch: CriticArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            conv1: Conv2d::he_uniform(arch.feature_channels, arch.conv[0], 3, &mut rng),
            conv2: Conv2d::he_uniform(arch.conv[0], arch.conv[1], 3, &mut rng),
            fc: Dense::he_uniform(arch.conv[1], arch.hidden, &mut rng),
            head: Dense::he_uniform(arch.hidden, 1, &mut rng),
            dropout: arch.dropout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            fc: self.fc.zeros_like(),
            head: self.head.zeros_like(),
            dropout: self.dropout,
        }
    }

    pub fn arch(&self) -> CriticArch {
        CriticArch {
            feature_channels: self.conv1.in_channels,
            conv: [self.conv1.out_channels, self.conv2.out_channels],
            hidden: self.fc.outputs,
            dropout: self.dropout,
        }
    }

    fn check_input(&self, feat: &FeatureMap<T>) -> Result<()> {
        if feat.channels() != self.conv1.in_channels {
            return Err(Error::Shape(format!(
                "critic expects {} feature channels, got {}",
                self.conv1.in_channels,
                feat.channels()
            )));
        }
        Ok(())
    }

    /// Scalar critic score. Dropout is active only when an RNG is supplied.
    pub fn critic_forward<R: Rng>(&self, feat: &FeatureMap<T>, dropout: Option<&mut R>) -> Result<T> {
        Ok(self.critic_forward_traced(feat, dropout)?.0)
    }

    pub fn critic_forward_traced<R: Rng>(
        &self,
        feat: &FeatureMap<T>,
        dropout: Option<&mut R>,
    ) -> Result<(T, CriticTrace<T>)> {
        self.check_input(feat)?;
        let mut c1 = self.conv1.forward(feat);
        nn::relu_inplace(&mut c1);
        let mut c2 = self.conv2.forward(&c1);
        nn::relu_inplace(&mut c2);
        let pooled = nn::global_avg_pool(&c2);
        let mut hidden = self.fc.forward(&pooled);
        for h in &mut hidden {
            *h = h.max(T::zero());
        }
        let mask = dropout.map(|rng| nn::dropout_mask::<T, R>(hidden.len(), self.dropout, rng));
        let dropped: Vec<T> = match &mask {
            Some(m) => hidden.iter().zip(m).map(|(&h, &k)| h * k).collect(),
            None => hidden.clone(),
        };
        let score = self.head.forward(&dropped)[0];
        let trace = CriticTrace {
            feat: feat.clone(),
            c1,
            c2,
            pooled,
            hidden,
            mask,
            dropped,
        };
        Ok((score, trace))
    }

    /// Accumulates `dscore·∂score/∂θ` into `grad`; optionally returns
    /// `dscore·∂score/∂features`.
    pub fn backward(
        &self,
        trace: &CriticTrace<T>,
        dscore: T,
        grad: &mut Self,
        need_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        let mut dh = self
            .head
            .backward(&trace.dropped, &[dscore], &mut grad.head, true)
            .expect("dense dx");
        if let Some(m) = &trace.mask {
            for (d, &k) in dh.iter_mut().zip(m) {
                *d *= k;
            }
        }
        for (d, &h) in dh.iter_mut().zip(&trace.hidden) {
            if h <= T::zero() {
                *d = T::zero();
            }
        }
        let dpool = self
            .fc
            .backward(&trace.pooled, &dh, &mut grad.fc, true)
            .expect("dense dx");
        let mut dc2 = nn::global_avg_pool_backward(&dpool, trace.c2.height(), trace.c2.width());
        nn::relu_backward_inplace(&trace.c2, &mut dc2);
        let mut dc1 = self
            .conv2
            .backward(&trace.c1, &dc2, &mut grad.conv2, true)
            .expect("conv dx");
        nn::relu_backward_inplace(&trace.c1, &mut dc1);
        self.conv1.backward(&trace.feat, &dc1, &mut grad.conv1, need_input_grad)
    }

    /// Clamps every parameter into `[-bound, bound]`.
    pub fn clip_weights(&mut self, bound: T) {
        for s in self.slices_mut() {
            for v in s {
                *v = v.max(-bound).min(bound);
            }
        }
    }
}

impl<T: Scalar> ParamSet<T> for DcmParams<T> {
    fn named(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut v = Vec::new();
        conv_entries("critic", std::slice::from_ref(&self.conv1), &mut v);
        let c2 = &self.conv2;
        v.push((
            "critic.conv1.weight".into(),
            vec![c2.out_channels, c2.in_channels, 3, 3],
            &c2.weight,
        ));
        v.push(("critic.conv1.bias".into(), vec![c2.out_channels], &c2.bias));
        v.push((
            "critic.fc.weight".into(),
            vec![self.fc.outputs, self.fc.inputs],
            &self.fc.weight,
        ));
        v.push(("critic.fc.bias".into(), vec![self.fc.outputs], &self.fc.bias));
        v.push((
            "critic.head.weight".into(),
            vec![1, self.head.inputs],
            &self.head.weight,
        ));
        v.push(("critic.head.bias".into(), vec![1], &self.head.bias));
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.fc.weight,
            &mut self.fc.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }
}
