//! The dual-branch prototype architecture: a shared backbone, per-branch
//! add-on layers, a prototype layer with cosine or projection similarity,
//! spatial max-pooling, and a bias-free FC head.
//!
//! Feature vectors are L2-normalized before similarity, so cosine similarity
//! is a plain dot product against the unit-norm prototypes.

use crate::error::{Error, Result};
use crate::tensor::{dot, l2_norm, normalize_in_place, ReduceKind, Tape, Tensor, Value};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const FC_CORRECT_INIT: f64 = 1.0;
pub const FC_INCORRECT_INIT: f64 = -0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(&self, tape: &mut Tape, v: Value) -> Value {
        match self {
            Activation::Tanh => tape.tanh(v),
            Activation::Sigmoid => tape.sigmoid(v),
            Activation::Relu => tape.relu(v),
            Activation::Identity => v,
        }
    }

    pub fn code(&self) -> f64 {
        match self {
            Activation::Tanh => 0.0,
            Activation::Sigmoid => 1.0,
            Activation::Relu => 2.0,
            Activation::Identity => 3.0,
        }
    }

    pub fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Sigmoid),
            2 => Ok(Activation::Relu),
            3 => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation code {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Cosine,
    Projection,
}

/// Which of the two branches a prototype set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    Support,
    Trivial,
}

impl BranchKind {
    pub fn name(&self) -> &'static str {
        match self {
            BranchKind::Support => "support",
            BranchKind::Trivial => "trivial",
        }
    }
}

/// Similarity between a feature vector and a unit-norm prototype.
/// `v` is normalized internally; the zero vector yields similarity 0.
/// Projection is the one-dimensional subspace specialization |v̂ᵀp|.
pub fn similarity(v: &[f64], p: &[f64], kind: Similarity) -> Result<f64> {
    if v.len() != p.len() {
        return Err(Error::Dim(format!(
            "similarity: vector lengths differ: {} vs {}",
            v.len(),
            p.len()
        )));
    }
    let n = l2_norm(v);
    if n == 0.0 {
        return Ok(0.0);
    }
    let cos = dot(v, p) / n;
    Ok(match kind {
        Similarity::Cosine => cos,
        Similarity::Projection => cos.abs(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Layer widths, input first (two-moon default: [2, 256, 2]).
    pub widths: Vec<usize>,
    /// Activation after each non-input layer; two-moon default [tanh, sigmoid].
    pub activations: Vec<Activation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub layers: Vec<ConvLayerSpec>,
    pub activation: Activation,
    /// Optional 2x bilinear upsampling of the final feature map (off by
    /// default at desk scale).
    #[serde(default)]
    pub upsample_2x: bool,
}

impl ConvSpec {
    /// Spatial size of the feature map this spec produces.
    pub fn output_hw(&self) -> Result<(usize, usize)> {
        let (mut h, mut w) = (self.image_h, self.image_w);
        for layer in &self.layers {
            if h + 2 * layer.padding < layer.kernel || w + 2 * layer.padding < layer.kernel {
                return Err(Error::Config(format!(
                    "conv layer kernel {} too large for {}x{} input",
                    layer.kernel, h, w
                )));
            }
            h = (h + 2 * layer.padding - layer.kernel) / layer.stride + 1;
            w = (w + 2 * layer.padding - layer.kernel) / layer.stride + 1;
        }
        if self.upsample_2x {
            h *= 2;
            w *= 2;
        }
        if h == 0 || w == 0 {
            return Err(Error::Config("conv backbone collapses to empty feature map".into()));
        }
        Ok((h, w))
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().map(|l| l.out_channels).unwrap_or(self.in_channels)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneSpec {
    Mlp(MlpSpec),
    Conv(ConvSpec),
}

impl BackboneSpec {
    /// Footnote network used by the two-moon experiment:
    /// 2 → 256 (tanh) → 2 (sigmoid).
    pub fn two_moon_default() -> Self {
        BackboneSpec::Mlp(MlpSpec {
            widths: vec![2, 256, 2],
            activations: vec![Activation::Tanh, Activation::Sigmoid],
        })
    }

    /// Three stride-2 conv layers: 32x32x1 -> 4x4x32.
    pub fn conv_default() -> Self {
        BackboneSpec::Conv(ConvSpec {
            in_channels: 1,
            image_h: 32,
            image_w: 32,
            layers: vec![
                ConvLayerSpec { out_channels: 8, kernel: 3, stride: 2, padding: 1 },
                ConvLayerSpec { out_channels: 16, kernel: 3, stride: 2, padding: 1 },
                ConvLayerSpec { out_channels: 32, kernel: 3, stride: 2, padding: 1 },
            ],
            activation: Activation::Tanh,
            upsample_2x: false,
        })
    }

    /// Channel count of the feature map fed to the add-on layers (D̄).
    pub fn feature_channels(&self) -> usize {
        match self {
            BackboneSpec::Mlp(m) => *m.widths.last().expect("mlp has layers"),
            BackboneSpec::Conv(c) => c.output_channels(),
        }
    }
}

/// Two 1x1 linear maps D̄ → mid → out; the final activation is tanh.
/// Each branch owns an independent instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AddOnSpec {
    pub mid_channels: usize,
    pub out_channels: usize,
    pub act_mid: Activation,
    pub act_out: Activation,
}

impl AddOnSpec {
    pub fn new(mid_channels: usize, out_channels: usize) -> Self {
        AddOnSpec {
            mid_channels,
            out_channels,
            act_mid: Activation::Tanh,
            act_out: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    /// None: prototypes live directly in the backbone output space (the
    /// two-moon configuration, where the footnote net is the whole extractor).
    pub addon: Option<AddOnSpec>,
    pub classes: usize,
    /// Prototypes per class in *each* branch (the M/C split is half support,
    /// half trivial of the total budget).
    pub protos_per_class: usize,
    pub similarity: Similarity,
}

impl ModelSpec {
    pub fn proto_dim(&self) -> usize {
        match &self.addon {
            Some(a) => a.out_channels,
            None => self.backbone.feature_channels(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.protos_per_class == 0 {
            return Err(Error::Config("need at least 1 prototype per class".into()));
        }
        if let BackboneSpec::Mlp(m) = &self.backbone {
            if m.widths.len() < 2 || m.activations.len() != m.widths.len() - 1 {
                return Err(Error::Config(format!(
                    "mlp spec: {} widths need {} activations",
                    m.widths.len(),
                    m.widths.len().saturating_sub(1)
                )));
            }
        }
        if let BackboneSpec::Conv(c) = &self.backbone {
            c.output_hw()?;
        }
        Ok(())
    }

    pub fn two_moon(protos_per_class: usize) -> Self {
        ModelSpec {
            backbone: BackboneSpec::two_moon_default(),
            addon: None,
            classes: 2,
            protos_per_class,
            similarity: Similarity::Cosine,
        }
    }

    pub fn synthetic_conv(classes: usize, protos_per_class: usize) -> Self {
        ModelSpec {
            backbone: BackboneSpec::conv_default(),
            addon: Some(AddOnSpec::new(64, 64)),
            classes,
            protos_per_class,
            similarity: Similarity::Cosine,
        }
    }
}

/// Unit-norm prototypes for one branch, grouped contiguously by class.
/// After pruning classes may own different counts, so the class map is
/// explicit.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    pub kind: BranchKind,
    pub classes: usize,
    /// M×D, one prototype per row, each row unit-norm.
    pub values: Tensor,
    pub class_of: Vec<usize>,
}

impl PrototypeSet {
    pub fn init<R: rand::Rng>(
        kind: BranchKind,
        classes: usize,
        per_class: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let m = classes * per_class;
        let mut values = Tensor::randn(vec![m, dim], rng).with_requires_grad();
        for i in 0..m {
            normalize_in_place(values.row_mut(i));
        }
        let class_of = (0..m).map(|i| i / per_class).collect();
        PrototypeSet { kind, classes, values, class_of }
    }

    pub fn count(&self) -> usize {
        self.class_of.len()
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn rows_of_class(&self, c: usize) -> Vec<usize> {
        self.class_of
            .iter()
            .enumerate()
            .filter(|(_, &cls)| cls == c)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn rows_not_of_class(&self, c: usize) -> Vec<usize> {
        self.class_of
            .iter()
            .enumerate()
            .filter(|(_, &cls)| cls != c)
            .map(|(i, _)| i)
            .collect()
    }

    /// Renormalize every prototype to unit length. A zero-norm prototype is
    /// re-initialized from a unit Gaussian draw (warned, then normalized).
    pub fn normalize(&mut self, rng: &mut ChaCha8Rng) {
        let dim = self.dim();
        for i in 0..self.count() {
            let row = self.values.row_mut(i);
            if l2_norm(row) == 0.0 {
                log::warn!("prototype {i} had zero norm; re-initializing from unit Gaussian");
                let normal = Normal::new(0.0, 1.0).expect("valid normal");
                for x in row.iter_mut() {
                    *x = normal.sample(rng);
                }
            }
            normalize_in_place(self.values.row_mut(i));
        }
    }
}

/// Add-on layers plus prototypes and FC head for one branch.
#[derive(Debug, Clone)]
pub struct BranchParams {
    pub kind: BranchKind,
    /// [w1 (D̄×mid), b1 (mid), w2 (mid×out), b2 (out)] or empty when the
    /// branch sits directly on the backbone output.
    pub addon: Vec<Tensor>,
    pub protos: PrototypeSet,
    /// M×C, no bias.
    pub fc: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub spec: ModelSpec,
    /// MLP: [w, b] per layer. Conv: [kernel, bias] per layer.
    pub backbone: Vec<Tensor>,
    pub support: BranchParams,
    pub trivial: BranchParams,
}

fn xavier<R: rand::Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let mut t = Tensor::randn(vec![rows, cols], rng);
    for v in t.data_mut() {
        *v *= std;
    }
    t.with_requires_grad()
}

fn conv_kernel<R: rand::Rng>(oc: usize, ic: usize, k: usize, rng: &mut R) -> Tensor {
    let fan_in = (ic * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    let mut t = Tensor::randn(vec![oc, ic, k, k], rng);
    for v in t.data_mut() {
        *v *= std;
    }
    t.with_requires_grad()
}

/// FC initialized at +1.0 on correct prototype→class connections and −0.5
/// elsewhere.
pub fn init_fc(protos: &PrototypeSet, classes: usize) -> Tensor {
    let m = protos.count();
    let mut fc = Tensor::full(vec![m, classes], FC_INCORRECT_INIT).with_requires_grad();
    for i in 0..m {
        let c = protos.class_of[i];
        fc.data_mut()[i * classes + c] = FC_CORRECT_INIT;
    }
    fc
}

impl ModelState {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = match &spec.backbone {
            BackboneSpec::Mlp(m) => {
                let mut params = Vec::new();
                for win in m.widths.windows(2) {
                    params.push(xavier(win[0], win[1], &mut rng));
                    params.push(Tensor::zeros(vec![win[1]]).with_requires_grad());
                }
                params
            }
            BackboneSpec::Conv(c) => {
                let mut params = Vec::new();
                let mut ic = c.in_channels;
                for layer in &c.layers {
                    params.push(conv_kernel(layer.out_channels, ic, layer.kernel, &mut rng));
                    params.push(Tensor::zeros(vec![layer.out_channels]).with_requires_grad());
                    ic = layer.out_channels;
                }
                params
            }
        };
        let dim = spec.proto_dim();
        let d_bar = spec.backbone.feature_channels();
        let mut make_branch = |kind: BranchKind, rng: &mut ChaCha8Rng| -> BranchParams {
            let addon = match &spec.addon {
                Some(a) => vec![
                    xavier(d_bar, a.mid_channels, rng),
                    Tensor::zeros(vec![a.mid_channels]).with_requires_grad(),
                    xavier(a.mid_channels, a.out_channels, rng),
                    Tensor::zeros(vec![a.out_channels]).with_requires_grad(),
                ],
                None => Vec::new(),
            };
            let protos = PrototypeSet::init(kind, spec.classes, spec.protos_per_class, dim, rng);
            let fc = init_fc(&protos, spec.classes);
            BranchParams { kind, addon, protos, fc }
        };
        let support = make_branch(BranchKind::Support, &mut rng);
        let trivial = make_branch(BranchKind::Trivial, &mut rng);
        Ok(ModelState { spec, backbone, support, trivial })
    }

    pub fn branch(&self, kind: BranchKind) -> &BranchParams {
        match kind {
            BranchKind::Support => &self.support,
            BranchKind::Trivial => &self.trivial,
        }
    }

    pub fn branch_mut(&mut self, kind: BranchKind) -> &mut BranchParams {
        match kind {
            BranchKind::Support => &mut self.support,
            BranchKind::Trivial => &mut self.trivial,
        }
    }
}

/// Tape handles for the leased model parameters of one forward pass.
pub struct TapedParams {
    pub backbone: Vec<Value>,
    pub addon: Vec<Value>,
    pub protos: Value,
    pub fc: Value,
}

impl TapedParams {
    pub fn lease(tape: &mut Tape, state: &ModelState, kind: BranchKind) -> TapedParams {
        let branch = state.branch(kind);
        TapedParams {
            backbone: state.backbone.iter().map(|t| tape.leaf(t)).collect(),
            addon: branch.addon.iter().map(|t| tape.leaf(t)).collect(),
            protos: tape.leaf(&branch.protos.values),
            fc: tape.leaf(&branch.fc),
        }
    }
}

/// Backbone forward for a batch of MLP inputs: X (n×d_in) -> features (n×D̄).
pub fn mlp_forward(
    tape: &mut Tape,
    spec: &MlpSpec,
    params: &[Value],
    x: Value,
) -> Result<Value> {
    let mut h = x;
    for (i, act) in spec.activations.iter().enumerate() {
        let z = tape.matmul(h, params[2 * i])?;
        let z = tape.add_rows(z, params[2 * i + 1])?;
        h = act.apply(tape, z);
    }
    Ok(h)
}

/// Conv backbone forward for a single (C,H,W) image -> (H̄·W̄)×D̄ positions
/// matrix.
pub fn conv_forward(
    tape: &mut Tape,
    spec: &ConvSpec,
    params: &[Value],
    x: Value,
) -> Result<Value> {
    let mut h = x;
    for (i, layer) in spec.layers.iter().enumerate() {
        let z = tape.conv2d(h, params[2 * i], params[2 * i + 1], layer.stride, layer.padding)?;
        h = spec.activation.apply(tape, z);
    }
    if spec.upsample_2x {
        h = tape.upsample_bilinear_2x(h)?;
    }
    tape.positions_by_channels(h)
}

/// Add-on layers applied position-wise: (P×D̄) -> (P×D).
pub fn addon_forward(
    tape: &mut Tape,
    spec: &AddOnSpec,
    params: &[Value],
    fmap: Value,
) -> Result<Value> {
    let z1 = tape.matmul(fmap, params[0])?;
    let z1 = tape.add_rows(z1, params[1])?;
    let h1 = spec.act_mid.apply(tape, z1);
    let z2 = tape.matmul(h1, params[2])?;
    let z2 = tape.add_rows(z2, params[3])?;
    Ok(spec.act_out.apply(tape, z2))
}

/// Row-wise L2 normalization of a (P×D) matrix, differentiable.
pub fn normalize_rows(tape: &mut Tape, v: Value) -> Result<Value> {
    let sq = tape.mul(v, v)?;
    let sums = tape.reduce(ReduceKind::Sum, sq, &[1])?;
    let eps = tape.scalar(1e-24);
    let safe = tape.add(sums, eps)?;
    let norms = tape.sqrt(safe);
    let one = tape.scalar(1.0);
    let inv = tape.div(one, norms)?;
    tape.scale_rows(v, inv)
}

/// Similarity maps between normalized feature rows (P×D) and unit prototypes
/// (M×D): result is P×M.
pub fn similarity_maps(
    tape: &mut Tape,
    v_hat: Value,
    protos: Value,
    kind: Similarity,
) -> Result<Value> {
    let pt = tape.transpose(protos)?;
    let sims = tape.matmul(v_hat, pt)?;
    Ok(match kind {
        Similarity::Cosine => sims,
        Similarity::Projection => tape.abs(sims),
    })
}

/// Feature map for one sample through backbone + the branch's add-on layers,
/// rows L2-normalized: (P×D).
pub fn branch_features(
    tape: &mut Tape,
    state: &ModelState,
    taped: &TapedParams,
    kind: BranchKind,
    sample_input: Value,
) -> Result<Value> {
    let fmap = match &state.spec.backbone {
        BackboneSpec::Mlp(m) => mlp_forward(tape, m, &taped.backbone, sample_input)?,
        BackboneSpec::Conv(c) => conv_forward(tape, c, &taped.backbone, sample_input)?,
    };
    let fmap = match (&state.spec.addon, state.branch(kind).addon.len()) {
        (Some(a), 4) => addon_forward(tape, a, &taped.addon, fmap)?,
        _ => fmap,
    };
    normalize_rows(tape, fmap)
}

/// Forward products of one branch on one sample.
#[derive(Debug, Clone)]
pub struct SimilarityResult {
    /// M×H̄×W̄ similarity maps.
    pub maps: Tensor,
    /// M max-pooled similarity scores.
    pub pooled: Tensor,
    /// C classification logits.
    pub logits: Tensor,
}

/// Tape handles produced by [`forward_branch_taped`].
pub struct BranchForward {
    pub v_hat: Value,
    pub sims: Value,
    pub pooled: Value,
    pub logits: Value,
}

/// Full branch forward on the tape for one sample input.
pub fn forward_branch_taped(
    tape: &mut Tape,
    state: &ModelState,
    taped: &TapedParams,
    kind: BranchKind,
    sample_input: Value,
) -> Result<BranchForward> {
    let v_hat = branch_features(tape, state, taped, kind, sample_input)?;
    let sims = similarity_maps(tape, v_hat, taped.protos, state.spec.similarity)?;
    let pooled = tape.reduce(ReduceKind::Max, sims, &[0])?;
    let m = state.branch(kind).protos.count();
    let pooled_row = tape.reshape(pooled, vec![1, m])?;
    let logits = tape.matmul(pooled_row, taped.fc)?;
    Ok(BranchForward { v_hat, sims, pooled, logits })
}

/// Spatial grid (H̄,W̄) of the branch feature map for one sample.
pub fn feature_grid(spec: &ModelSpec) -> Result<(usize, usize)> {
    match &spec.backbone {
        BackboneSpec::Mlp(_) => Ok((1, 1)),
        BackboneSpec::Conv(c) => c.output_hw(),
    }
}

/// Evaluation-time forward of one branch; no gradients are kept.
pub fn forward_branch(state: &ModelState, kind: BranchKind, input: &Tensor) -> Result<SimilarityResult> {
    let mut tape = Tape::new();
    let taped = TapedParams::lease(&mut tape, state, kind);
    let x = tape.constant(input.shape().to_vec(), input.data().to_vec());
    let fwd = forward_branch_taped(&mut tape, state, &taped, kind, x)?;
    let (h, w) = feature_grid(&state.spec)?;
    let m = state.branch(kind).protos.count();
    // sims is (H̄·W̄)×M; expose per-prototype maps as M×H̄×W̄
    let sims = tape.value(fwd.sims);
    let mut maps = vec![0.0; m * h * w];
    for p in 0..h * w {
        for j in 0..m {
            maps[j * h * w + p] = sims[p * m + j];
        }
    }
    Ok(SimilarityResult {
        maps: Tensor::new(vec![m, h, w], maps)?,
        pooled: Tensor::vector(tape.value(fwd.pooled).to_vec()),
        logits: Tensor::vector(tape.value(fwd.logits).to_vec()),
    })
}

/// Elementwise sum of the two branches' logits; the final prediction is its
/// argmax.
pub fn ensemble_logits(support: &SimilarityResult, trivial: &SimilarityResult) -> Result<Tensor> {
    if support.logits.len() != trivial.logits.len() {
        return Err(Error::Dim(format!(
            "ensemble: logit lengths differ: {} vs {}",
            support.logits.len(),
            trivial.logits.len()
        )));
    }
    let data = support
        .logits
        .data()
        .iter()
        .zip(trivial.logits.data())
        .map(|(a, b)| a + b)
        .collect();
    Ok(Tensor::vector(data))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// One latent patch: its unit feature vector plus provenance.
#[derive(Debug, Clone)]
pub struct LatentPatch {
    pub sample: usize,
    pub position: usize,
    pub label: usize,
    pub feature: Vec<f64>,
}

/// All latent patches of a branch over a set of inputs (training images),
/// in deterministic (sample, position) order.
pub fn latent_patches(
    state: &ModelState,
    kind: BranchKind,
    inputs: &[Tensor],
    labels: &[usize],
) -> Result<Vec<LatentPatch>> {
    let mut out = Vec::new();
    for (s, input) in inputs.iter().enumerate() {
        let mut tape = Tape::new();
        let taped = TapedParams::lease(&mut tape, state, kind);
        let x = tape.constant(input.shape().to_vec(), input.data().to_vec());
        let v_hat = branch_features(&mut tape, state, &taped, kind, x)?;
        let shape = tape.shape(v_hat).to_vec();
        let (positions, dim) = (shape[0], shape[1]);
        let data = tape.value(v_hat);
        for p in 0..positions {
            out.push(LatentPatch {
                sample: s,
                position: p,
                label: labels[s],
                feature: data[p * dim..(p + 1) * dim].to_vec(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit(mut v: Vec<f64>) -> Vec<f64> {
        normalize_in_place(&mut v);
        v
    }

    #[test]
    fn similarity_basics() {
        let e1 = [1.0, 0.0];
        let e2 = [0.0, 1.0];
        assert_eq!(similarity(&e1, &e1, Similarity::Cosine).unwrap(), 1.0);
        assert_eq!(similarity(&e1, &e2, Similarity::Cosine).unwrap(), 0.0);
        let neg = [-1.0, 0.0];
        assert_eq!(similarity(&neg, &e1, Similarity::Projection).unwrap(), 1.0);
        // |vᵀp| oracle on a non-axis pair
        let v = unit(vec![0.3, -0.7]);
        let p = unit(vec![-0.5, 0.2]);
        let oracle = dot(&v, &p).abs();
        assert_relative_eq!(
            similarity(&v, &p, Similarity::Projection).unwrap(),
            oracle,
            epsilon = 1e-12
        );
        assert_eq!(similarity(&[0.0, 0.0], &e1, Similarity::Cosine).unwrap(), 0.0);
        assert!(similarity(&[1.0], &e1, Similarity::Cosine).is_err());
    }

    #[test]
    fn normalize_prototypes_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut protos = PrototypeSet::init(BranchKind::Support, 2, 1, 2, &mut rng);
        protos.values.row_mut(0).copy_from_slice(&[3.0, 4.0]);
        protos.values.row_mut(1).copy_from_slice(&[0.6, 0.8]);
        let before = protos.values.row(1).to_vec();
        protos.normalize(&mut rng);
        assert_eq!(protos.values.row(0), &[0.6, 0.8]);
        for (a, b) in protos.values.row(1).iter().zip(&before) {
            assert!((a - b).abs() < 1e-12, "already-unit row changed");
        }
        // random 5-D vector normalizes to unit
        let mut protos = PrototypeSet::init(BranchKind::Trivial, 1, 1, 5, &mut rng);
        for (i, v) in protos.values.row_mut(0).iter_mut().enumerate() {
            *v = (i as f64) - 1.7;
        }
        protos.normalize(&mut rng);
        assert_relative_eq!(l2_norm(protos.values.row(0)), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_norm_prototype_is_reinitialized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut protos = PrototypeSet::init(BranchKind::Support, 2, 1, 3, &mut rng);
        protos.values.row_mut(0).fill(0.0);
        protos.normalize(&mut rng);
        assert_relative_eq!(l2_norm(protos.values.row(0)), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn fc_init_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let protos = PrototypeSet::init(BranchKind::Support, 2, 2, 4, &mut rng);
        let fc = init_fc(&protos, 2);
        assert_eq!(fc.shape(), &[4, 2]);
        assert_eq!(fc.data(), &[1.0, -0.5, 1.0, -0.5, -0.5, 1.0, -0.5, 1.0]);
    }

    #[test]
    fn pooled_equals_fc_product_with_paper_init() {
        // M=2, pooled=[1,0], FC=[[+1,−0.5],[−0.5,+1]] → logits [1.0, −0.5]
        let mut tape = Tape::new();
        let pooled = tape.constant(vec![1, 2], vec![1.0, 0.0]);
        let fc = tape.constant(vec![2, 2], vec![1.0, -0.5, -0.5, 1.0]);
        let logits = tape.matmul(pooled, fc).unwrap();
        assert_eq!(tape.value(logits), &[1.0, -0.5]);
    }

    #[test]
    fn ensemble_sums_logits() {
        let mk = |l: Vec<f64>| SimilarityResult {
            maps: Tensor::zeros(vec![1, 1, 1]),
            pooled: Tensor::vector(vec![0.0]),
            logits: Tensor::vector(l),
        };
        let e = ensemble_logits(&mk(vec![1.0, 0.0]), &mk(vec![0.0, 1.0])).unwrap();
        assert_eq!(e.data(), &[1.0, 1.0]);
        let e = ensemble_logits(&mk(vec![2.0, 1.0]), &mk(vec![0.0, 0.0])).unwrap();
        assert_eq!(argmax(e.data()), 0);
        // two branch scores supporting the same class make it win
        let e = ensemble_logits(&mk(vec![22.925, 1.0]), &mk(vec![20.313, 2.0])).unwrap();
        assert_eq!(argmax(e.data()), 0);
    }

    #[test]
    fn forward_self_similarity_reaches_one() {
        // feature map equal to a prototype at every position → pooled 1.0
        let spec = ModelSpec::two_moon(1);
        let mut state = ModelState::init(spec, 5).unwrap();
        // steer the single class-0 prototype to e1 and check against a direct
        // feature equal to it
        state.support.protos.values.row_mut(0).copy_from_slice(&[1.0, 0.0]);
        let mut tape = Tape::new();
        let v = tape.constant(vec![3, 2], vec![1.0, 0.0, 2.0, 0.0, 0.5, 0.0]);
        let v_hat = normalize_rows(&mut tape, v).unwrap();
        let protos = tape.leaf(&state.support.protos.values);
        let sims = similarity_maps(&mut tape, v_hat, protos, Similarity::Cosine).unwrap();
        let pooled = tape.reduce(ReduceKind::Max, sims, &[0]).unwrap();
        assert_relative_eq!(tape.value(pooled)[0], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn pooled_matches_bruteforce_position_scan() {
        let spec = ModelSpec::synthetic_conv(2, 2);
        let state = ModelState::init(spec, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let img = Tensor::randn(vec![1, 32, 32], &mut rng);
        let res = forward_branch(&state, BranchKind::Support, &img).unwrap();
        let m = state.support.protos.count();
        let (h, w) = feature_grid(&state.spec).unwrap();
        assert_eq!(res.maps.shape(), &[m, h, w]);
        for j in 0..m {
            let brute = (0..h * w)
                .map(|p| res.maps.data()[j * h * w + p])
                .fold(f64::NEG_INFINITY, f64::max);
            assert_relative_eq!(res.pooled.data()[j], brute, epsilon = 1e-12);
            for p in 0..h * w {
                assert!(res.pooled.data()[j] >= res.maps.data()[j * h * w + p]);
            }
        }
    }

    #[test]
    fn logits_scale_linearly_with_pooled() {
        let mut tape = Tape::new();
        let pooled = tape.constant(vec![1, 3], vec![0.2, -0.4, 0.9]);
        let two = tape.scalar(2.0);
        let doubled = tape.mul(pooled, two).unwrap();
        let fc = tape.constant(vec![3, 2], vec![1.0, -0.5, -0.5, 1.0, 0.3, 0.7]);
        let l1 = tape.matmul(pooled, fc).unwrap();
        let l2 = tape.matmul(doubled, fc).unwrap();
        for (a, b) in tape.value(l1).to_vec().iter().zip(tape.value(l2)) {
            assert_relative_eq!(2.0 * a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn independent_addons_do_not_leak_across_branches() {
        let spec = ModelSpec::synthetic_conv(2, 1);
        let mut state = ModelState::init(spec, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let img = Tensor::randn(vec![1, 32, 32], &mut rng);
        let before = forward_branch(&state, BranchKind::Support, &img).unwrap();
        for t in &mut state.trivial.addon {
            for v in t.data_mut() {
                *v += 0.37;
            }
        }
        let after = forward_branch(&state, BranchKind::Support, &img).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&before.maps), bits(&after.maps));
        assert_eq!(bits(&before.logits), bits(&after.logits));
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = ModelSpec::two_moon(2);
        let state = ModelState::init(spec, 40).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.3, -0.8]).unwrap();
        let a = forward_branch(&state, BranchKind::Trivial, &x).unwrap();
        let b = forward_branch(&state, BranchKind::Trivial, &x).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }
}
