//! Feature extractors: the texture encoder (content feature and diversity
//! code), the MFM distinctive style encoder (domain code and classifier), the
//! pluggable identity and text-image embedders, and guided backpropagation.

use std::path::Path;

use ndarray::{Array1, Array3, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{BackwardMode, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::image::{stack_dyn, ImageTensor};
use crate::nn::{self, Bound, Init, ParamStore};

/// A single-image feature map tagged with the layer that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f32>,
    pub tap_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodeKind {
    /// Distinctive domain-aware code.
    Ds,
    /// Diversity (reference instance) code.
    Div,
    /// Per-level integrated code.
    Style,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleCode {
    pub values: Array1<f32>,
    pub kind: CodeKind,
}

/// `out[c] = max(x[c], x[c + C])` over the channel axis of a `2C x H x W`
/// tensor. Ties take the first half.
pub fn mfm(x: &Array3<f32>) -> Result<Array3<f32>> {
    let c2 = x.shape()[0];
    if c2 % 2 != 0 {
        return Err(Error::OddChannelCount(c2));
    }
    let c = c2 / 2;
    let a = x.slice_axis(Axis(0), (0..c).into());
    let b = x.slice_axis(Axis(0), (c..c2).into());
    let mut out = a.to_owned();
    out.zip_mut_with(&b, |o, &bv| {
        if bv > *o {
            *o = bv;
        }
    });
    Ok(out)
}

fn check_batch(shape: &[usize], size: usize) -> Result<()> {
    if shape.len() != 4 || shape[1] != 3 || shape[2] != size || shape[3] != size {
        return Err(Error::shape(["N", "3", &size.to_string(), &size.to_string()], shape));
    }
    Ok(())
}

fn single<T: Scalar>(img: &ImageTensor) -> ArrayD<T> {
    stack_dyn::<T>(&[img])
}

fn to_array3(v: &ArrayD<f32>) -> Array3<f32> {
    v.index_axis(Axis(0), 0)
        .to_owned()
        .into_dimensionality()
        .expect("CHW map")
}

/// Divides each row of an `N x d` matrix by its L2 norm.
fn l2_rows<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let norm = x.square().sum_axis(1).sqrt();
    if norm.value().iter().any(|&n| Scalar::to_f64(n) < 1e-12) {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(x.div(norm))
}

/// Numerically stable softmax evaluated in double precision.
pub fn softmax(logits: impl Iterator<Item = f64> + Clone) -> Array1<f32> {
    let mx = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    Array1::from_iter(e.into_iter().map(|v| (v / z) as f32))
}

// ---------------------------------------------------------------------------
// Texture encoder

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureConfig {
    pub input_size: usize,
    /// Output channels per stage; stages after the first start with a 2x2 max pool.
    pub widths: Vec<usize>,
    /// Convolutions per stage.
    pub convs: Vec<usize>,
    pub content_tap: String,
    pub div_tap: String,
    pub style_dim: usize,
}

impl TextureConfig {
    /// VGG19-shaped stack at 256px: content 512x32x32, 512-d diversity code.
    pub fn full_scale() -> Self {
        Self {
            input_size: 256,
            widths: vec![64, 128, 256, 512, 512],
            convs: vec![2, 2, 4, 4, 1],
            content_tap: "relu4_2".into(),
            div_tap: "relu4_1".into(),
            style_dim: 512,
        }
    }

    pub fn desk() -> Self {
        Self {
            input_size: 64,
            widths: vec![16, 32, 64, 128, 128],
            convs: vec![2, 2, 2, 2, 1],
            content_tap: "relu4_2".into(),
            div_tap: "relu4_1".into(),
            style_dim: 128,
        }
    }

    /// `(stage, conv)` indices (zero-based) of a `relu{s}_{k}` tap.
    pub fn tap_index(&self, name: &str) -> Result<(usize, usize)> {
        let bad = || Error::InvalidConfig(format!("unknown texture tap `{name}`"));
        let rest = name.strip_prefix("relu").ok_or_else(bad)?;
        let (s, k) = rest.split_once('_').ok_or_else(bad)?;
        let s: usize = s.parse().map_err(|_| bad())?;
        let k: usize = k.parse().map_err(|_| bad())?;
        if s == 0 || k == 0 || s > self.widths.len() || k > self.convs[s - 1] {
            return Err(bad());
        }
        Ok((s - 1, k - 1))
    }

    pub fn tap_channels(&self, name: &str) -> Result<usize> {
        Ok(self.widths[self.tap_index(name)?.0])
    }

    /// Downsampling factor of a tap relative to the input.
    pub fn tap_stride(&self, name: &str) -> Result<usize> {
        Ok(1 << self.tap_index(name)?.0)
    }

    /// Tap whose spatial size is `input_size / stride` (4, 8 or 16).
    pub fn tap_for_stride(&self, stride: usize) -> Result<String> {
        let name = match stride {
            4 => "relu3_2",
            8 => "relu4_2",
            16 => "relu5_1",
            _ => return Err(Error::InvalidConfig(format!("no content tap at stride {stride}"))),
        };
        self.tap_index(name)?;
        Ok(name.to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.convs.len() || self.convs.contains(&0) {
            return Err(Error::InvalidConfig("texture stages malformed".into()));
        }
        if self.style_dim == 0 {
            return Err(Error::InvalidConfig("style_dim must be positive".into()));
        }
        let stride = self.tap_stride(&self.content_tap)?;
        if ![4, 8, 16].contains(&stride) {
            return Err(Error::InvalidConfig(format!(
                "content tap `{}` is at stride {stride}, expected 4, 8 or 16",
                self.content_tap
            )));
        }
        self.tap_index(&self.div_tap)?;
        let deepest = 1 << (self.widths.len() - 1);
        if self.input_size % deepest != 0 {
            return Err(Error::InvalidConfig(format!(
                "input size {} not divisible by {deepest}",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// Frozen VGG-like conv/rectifier stack. Weights come from a seeded
/// initialiser or a loaded checkpoint.
#[derive(Debug, Clone)]
pub struct TextureEncoder {
    pub cfg: TextureConfig,
    pub params: ParamStore,
}

impl TextureEncoder {
    pub fn new(cfg: TextureConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let mut params = ParamStore::new();
        let mut ci = 3;
        for (s, (&w, &n)) in cfg.widths.iter().zip(&cfg.convs).enumerate() {
            for k in 0..n {
                init.conv(&mut params, &format!("conv{}_{}", s + 1, k + 1), w, ci, 3);
                ci = w;
            }
        }
        let c = cfg.tap_channels(&cfg.div_tap)?;
        if c != cfg.style_dim {
            let w = init.normal(&[c, cfg.style_dim], 1.0 / (c as f64).sqrt());
            params.insert("div_proj.weight", w);
        }
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: TextureConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, params })
    }

    pub fn bind<'t, T: Scalar>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        self.params.bind_as(tape, false)
    }

    /// Activations at `names` (in that order) for an `N x 3 x S x S` batch.
    /// Layers past the deepest requested tap are not evaluated.
    pub fn taps<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>, names: &[&str]) -> Result<Vec<Var<'t, T>>> {
        check_batch(&x.shape(), self.cfg.input_size)?;
        let wanted = names
            .iter()
            .map(|n| self.cfg.tap_index(n))
            .collect::<Result<Vec<_>>>()?;
        let Some(&last) = wanted.iter().max() else { return Ok(Vec::new()) };
        let mut out: Vec<Option<Var<'t, T>>> = vec![None; names.len()];
        let mut h = x;
        'stages: for (s, &n) in self.cfg.convs.iter().enumerate() {
            if s > 0 {
                h = h.maxpool2();
            }
            for k in 0..n {
                h = nn::conv(p, &format!("conv{}_{}", s + 1, k + 1), h).relu();
                for (slot, &t) in out.iter_mut().zip(&wanted) {
                    if t == (s, k) {
                        *slot = Some(h);
                    }
                }
                if (s, k) == last {
                    break 'stages;
                }
            }
        }
        Ok(out.into_iter().map(|v| v.expect("tap reached")).collect())
    }

    /// Global average pool of the diversity tap, projected to `style_dim`.
    pub fn pool_diversity<'t, T: Scalar>(&self, p: &Bound<'t, T>, feat: Var<'t, T>) -> Var<'t, T> {
        let pooled = nn::global_avg_pool(feat);
        match p.try_get("div_proj.weight") {
            Some(w) => pooled.matmul(w),
            None => pooled,
        }
    }

    pub fn content<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.taps(p, x, &[&self.cfg.content_tap])?[0])
    }

    pub fn diversity<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let feat = self.taps(p, x, &[&self.cfg.div_tap])?[0];
        Ok(self.pool_diversity(p, feat))
    }

    pub fn texture_encode(&self, img: &ImageTensor) -> Result<FeatureMap> {
        self.feature(img, &self.cfg.content_tap.clone())
    }

    pub fn feature(&self, img: &ImageTensor, tap: &str) -> Result<FeatureMap> {
        let tape = Tape::<f32>::new();
        let p = self.bind(&tape);
        let x = tape.constant(single(img));
        let f = self.taps(&p, x, &[tap])?[0];
        Ok(FeatureMap { data: to_array3(&f.value()), tap_name: tap.to_string() })
    }

    pub fn diversity_code(&self, img: &ImageTensor) -> Result<StyleCode> {
        let tape = Tape::<f32>::new();
        let p = self.bind(&tape);
        let z = self.diversity(&p, tape.constant(single(img)))?;
        Ok(StyleCode { values: z.value().index_axis(Axis(0), 0).to_owned().into_dimensionality().unwrap(), kind: CodeKind::Div })
    }
}

// ---------------------------------------------------------------------------
// Distinctive (MFM) encoder

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistinctiveConfig {
    pub input_size: usize,
    /// Post-MFM channels per stage; each stage is conv(2w) -> mfm -> pool.
    pub widths: Vec<usize>,
    pub style_dim: usize,
    pub n_classes: usize,
}

impl DistinctiveConfig {
    pub fn full_scale(n_classes: usize) -> Self {
        Self { input_size: 256, widths: vec![48, 96, 192, 256], style_dim: 512, n_classes }
    }

    pub fn desk(n_classes: usize) -> Self {
        Self { input_size: 64, widths: vec![16, 32, 64], style_dim: 128, n_classes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.style_dim == 0 || self.n_classes == 0 {
            return Err(Error::InvalidConfig("distinctive encoder config malformed".into()));
        }
        if self.input_size % (1 << self.widths.len()) != 0 {
            return Err(Error::InvalidConfig(format!(
                "input size {} not divisible by {}",
                self.input_size,
                1 << self.widths.len()
            )));
        }
        Ok(())
    }
}

/// Max-feature-map conv stack with a linear domain classifier head. The
/// embedding before the head is the distinctive code.
#[derive(Debug, Clone)]
pub struct DistinctiveEncoder {
    pub cfg: DistinctiveConfig,
    pub params: ParamStore,
}

impl DistinctiveEncoder {
    /// Seeded conv/fc weights and a zero classifier head (uniform predictions).
    pub fn new(cfg: DistinctiveConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let mut params = ParamStore::new();
        let mut ci = 3;
        for (s, &w) in cfg.widths.iter().enumerate() {
            init.conv(&mut params, &format!("stage{}", s + 1), 2 * w, ci, 3);
            ci = w;
        }
        init.linear(&mut params, "fc", ci, 2 * cfg.style_dim, 1.0);
        init.zeros(&mut params, "head.weight", &[cfg.style_dim, cfg.n_classes]);
        init.zeros(&mut params, "head.bias", &[cfg.n_classes]);
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: DistinctiveConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, params })
    }

    pub fn bind<'t, T: Scalar>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        self.params.bind_as(tape, false)
    }

    /// `(embedding N x D, logits N x classes)`.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        check_batch(&x.shape(), self.cfg.input_size)?;
        let mut h = x;
        for s in 0..self.cfg.widths.len() {
            h = nn::conv(p, &format!("stage{}", s + 1), h).mfm().maxpool2();
        }
        let emb = nn::linear(p, "fc", nn::global_avg_pool(h)).mfm();
        let logits = nn::linear(p, "head", emb);
        Ok((emb, logits))
    }

    pub fn distinctive_code(&self, img: &ImageTensor) -> Result<StyleCode> {
        let tape = Tape::<f32>::new();
        let p = self.bind(&tape);
        let (emb, _) = self.forward(&p, tape.constant(single(img)))?;
        Ok(StyleCode { values: emb.value().index_axis(Axis(0), 0).to_owned().into_dimensionality().unwrap(), kind: CodeKind::Ds })
    }

    /// Softmax probabilities over the configured domains.
    pub fn classify_domain(&self, img: &ImageTensor) -> Result<Array1<f32>> {
        let tape = Tape::<f32>::new();
        let p = self.bind(&tape);
        let (_, logits) = self.forward(&p, tape.constant(single(img)))?;
        Ok(softmax(logits.value().iter().map(|&v| v as f64)))
    }

    pub fn predict(&self, img: &ImageTensor) -> Result<usize> {
        let probs = self.classify_domain(img)?;
        let mut best = 0;
        for (k, &v) in probs.iter().enumerate() {
            if v > probs[best] {
                best = k;
            }
        }
        Ok(best)
    }
}

// ---------------------------------------------------------------------------
// Guided backpropagation

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Rectifier,
    Mfm,
    /// No piecewise-linear gating (e.g. tanh only).
    Smooth,
}

/// A network whose scalar outputs can be attributed back to the input.
pub trait GuidedTarget {
    fn name(&self) -> &str;
    fn activation(&self) -> Activation;
    /// Scalar selected by `index` for a single-image batch.
    fn target<'t>(&self, tape: &'t Tape<f32>, x: Var<'t, f32>, index: usize) -> Result<Var<'t, f32>>;
}

impl GuidedTarget for TextureEncoder {
    fn name(&self) -> &str {
        "texture encoder"
    }

    fn activation(&self) -> Activation {
        Activation::Rectifier
    }

    /// Channel `index` of the pooled diversity tap.
    fn target<'t>(&self, tape: &'t Tape<f32>, x: Var<'t, f32>, index: usize) -> Result<Var<'t, f32>> {
        let p = self.bind(tape);
        let feat = self.taps(&p, x, &[&self.cfg.div_tap])?[0];
        let pooled = nn::global_avg_pool(feat);
        let c = pooled.shape()[1];
        if index >= c {
            return Err(Error::LabelOutOfRange { label: index, classes: c });
        }
        Ok(pooled.index_select(1, &[index]).sum())
    }
}

impl GuidedTarget for DistinctiveEncoder {
    fn name(&self) -> &str {
        "distinctive encoder"
    }

    fn activation(&self) -> Activation {
        Activation::Mfm
    }

    /// Class logit `index`.
    fn target<'t>(&self, tape: &'t Tape<f32>, x: Var<'t, f32>, index: usize) -> Result<Var<'t, f32>> {
        let p = self.bind(tape);
        let (_, logits) = self.forward(&p, x)?;
        if index >= self.cfg.n_classes {
            return Err(Error::LabelOutOfRange { label: index, classes: self.cfg.n_classes });
        }
        Ok(logits.index_select(1, &[index]).sum())
    }
}

/// Input-space saliency of `net`'s target scalar, with the backward signal
/// clamped to be positive at every rectifier and MFM gate.
pub fn guided_backprop(net: &dyn GuidedTarget, img: &ImageTensor, index: usize) -> Result<Array3<f32>> {
    if net.activation() == Activation::Smooth {
        return Err(Error::UnsupportedActivation(net.name().to_string()));
    }
    let tape = Tape::<f32>::new();
    let x = tape.var(single(img));
    let out = net.target(&tape, x, index)?;
    let g = tape.backward_with(out, BackwardMode::Guided);
    Ok(to_array3(&g.get_or_zeros(x)))
}

/// Maps a saliency map to a displayable image: magnitude normalised by its max.
pub fn saliency_image(s: &Array3<f32>) -> ImageTensor {
    let peak = s.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    ImageTensor::new(s.mapv(|v| 2.0 * (v.abs() * scale) - 1.0))
}

// ---------------------------------------------------------------------------
// Identity and text-image embedders

/// A linear map from a flattened `3 x s x s` image to `d` dimensions, loaded
/// from JSON: `{"input_size": s, "weights": [[...3*s*s...], ...d rows]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub input_size: usize,
    pub weights: Vec<Vec<f32>>,
}

impl Projection {
    fn validate(&self) -> Result<()> {
        let n = 3 * self.input_size * self.input_size;
        if self.weights.is_empty() || self.weights.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidBackend(format!("projection rows must have {n} entries")));
        }
        Ok(())
    }

    fn matrix<T: Scalar>(&self) -> ArrayD<T> {
        let n = 3 * self.input_size * self.input_size;
        let d = self.weights.len();
        let mut m = ArrayD::<T>::zeros(IxDyn(&[n, d]));
        for (j, row) in self.weights.iter().enumerate() {
            for (i, &v) in row.iter().enumerate() {
                m[[i, j]] = T::from_f64(v as f64);
            }
        }
        m
    }

    fn apply<'t, T: Scalar>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        check_batch(&x.shape(), self.input_size)?;
        let n = x.shape()[0];
        let flat = x.reshape(&[n, 3 * self.input_size * self.input_size]);
        l2_rows(flat.matmul(x.tape().constant(self.matrix())))
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidBackend(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq)]
pub enum IdentityBackend {
    Unregistered,
    /// 8x8 channel-mean downsample, mean-subtracted, unit length.
    Fallback,
    External(Projection),
}

impl IdentityBackend {
    /// Parses `"fallback"`, `"none"` or `"external:<path>"`.
    pub fn from_spec(spec: &str) -> Result<Self> {
        match spec {
            "fallback" => Ok(Self::Fallback),
            "none" | "" => Ok(Self::Unregistered),
            s => match s.strip_prefix("external:") {
                Some(path) => {
                    let p: Projection = read_json(Path::new(path))?;
                    p.validate()?;
                    Ok(Self::External(p))
                }
                None => Err(Error::InvalidBackend(s.to_string())),
            },
        }
    }

    pub fn dim(&self) -> Result<usize> {
        match self {
            Self::Unregistered => Err(Error::NoBackendRegistered("identity")),
            Self::Fallback => Ok(64),
            Self::External(p) => Ok(p.weights.len()),
        }
    }

    /// Unit-length embeddings of an `N x 3 x H x W` batch, as rows.
    pub fn embed_var<'t, T: Scalar>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            Self::Unregistered => Err(Error::NoBackendRegistered("identity")),
            Self::External(p) => p.apply(x),
            Self::Fallback => {
                let s = x.shape();
                if s.len() != 4 || s[2] != s[3] || s[2] % 8 != 0 {
                    return Err(Error::shape("N x C x 8k x 8k", s));
                }
                let gray = x.mean_axis(1).avgpool(s[2] / 8).reshape(&[s[0], 64]);
                l2_rows(gray.sub(gray.mean_axis(1)))
            }
        }
    }

    pub fn embed_identity(&self, img: &ImageTensor) -> Result<Array1<f32>> {
        let tape = Tape::<f32>::new();
        let e = self.embed_var(tape.constant(single(img)))?;
        Ok(e.value().index_axis(Axis(0), 0).to_owned().into_dimensionality().unwrap())
    }
}

/// Keyword table and embeddings of an external text-image model:
/// `{"keywords": [...], "text_embeddings": [[...d...], ...], "image": <projection>}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalTextImage {
    pub keywords: Vec<String>,
    pub text_embeddings: Vec<Vec<f32>>,
    pub image: Projection,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TextImageBackend {
    Unregistered,
    /// Text: normalised bag of domain keywords. Image: classifier probabilities.
    Fallback { keywords: Vec<String> },
    External(ExternalTextImage),
}

/// Lower-cased tokens split on anything but letters, digits and `_`.
fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

fn keyword_bag(text: &str, keywords: &[String]) -> Vec<f32> {
    let mut bag = vec![0.0f32; keywords.len()];
    for tok in tokens(text) {
        let hit = tok
            .strip_prefix("domain_")
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k < keywords.len())
            .or_else(|| keywords.iter().position(|k| k.to_lowercase() == tok));
        if let Some(k) = hit {
            bag[k] += 1.0;
        }
    }
    bag
}

fn unit(v: Vec<f32>) -> Result<Array1<f32>> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n <= 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(Array1::from_iter(v.into_iter().map(|x| x / n)))
}

impl TextImageBackend {
    /// Parses `"fallback"`, `"none"` or `"external:<path>"`; the fallback uses
    /// `domain_names` as its vocabulary.
    pub fn from_spec(spec: &str, domain_names: &[String]) -> Result<Self> {
        match spec {
            "fallback" => Ok(Self::Fallback { keywords: domain_names.to_vec() }),
            "none" | "" => Ok(Self::Unregistered),
            s => match s.strip_prefix("external:") {
                Some(path) => {
                    let e: ExternalTextImage = read_json(Path::new(path))?;
                    e.image.validate()?;
                    let d = e.image.weights.len();
                    if e.keywords.len() != e.text_embeddings.len() || e.text_embeddings.iter().any(|r| r.len() != d) {
                        return Err(Error::InvalidBackend(format!("{path}: keyword table malformed")));
                    }
                    Ok(Self::External(e))
                }
                None => Err(Error::InvalidBackend(s.to_string())),
            },
        }
    }

    pub fn dim(&self) -> Result<usize> {
        match self {
            Self::Unregistered => Err(Error::NoBackendRegistered("text-image")),
            Self::Fallback { keywords } => Ok(keywords.len()),
            Self::External(e) => Ok(e.image.weights.len()),
        }
    }

    pub fn embed_text(&self, text: &str) -> Result<Array1<f32>> {
        match self {
            Self::Unregistered => Err(Error::NoBackendRegistered("text-image")),
            Self::Fallback { keywords } => unit(keyword_bag(text, keywords)),
            Self::External(e) => {
                let bag = keyword_bag(text, &e.keywords);
                let d = e.image.weights.len();
                let mut v = vec![0.0f32; d];
                for (k, &c) in bag.iter().enumerate() {
                    for (o, &t) in v.iter_mut().zip(&e.text_embeddings[k]) {
                        *o += c * t;
                    }
                }
                unit(v)
            }
        }
    }

    /// Unit-length image embeddings of a batch. The fallback needs the domain
    /// classifier bound on the same tape.
    pub fn embed_image_var<'t, T: Scalar>(
        &self,
        x: Var<'t, T>,
        classifier: Option<(&DistinctiveEncoder, &Bound<'t, T>)>,
    ) -> Result<Var<'t, T>> {
        match self {
            Self::Unregistered => Err(Error::NoBackendRegistered("text-image")),
            Self::External(e) => e.image.apply(x),
            Self::Fallback { .. } => {
                let (enc, p) = classifier.ok_or(Error::NoBackendRegistered("domain classifier"))?;
                let (_, logits) = enc.forward(p, x)?;
                l2_rows(logits.log_softmax().exp())
            }
        }
    }

    pub fn embed_image(&self, img: &ImageTensor, classifier: Option<&DistinctiveEncoder>) -> Result<Array1<f32>> {
        let tape = Tape::<f32>::new();
        let bound = classifier.map(|c| c.bind(&tape));
        let cls = classifier.zip(bound.as_ref());
        let e = self.embed_image_var(tape.constant(single(img)), cls)?;
        Ok(e.value().index_axis(Axis(0), 0).to_owned().into_dimensionality().unwrap())
    }
}
