//! Training objectives: gated reconstruction, style-prior cosine, contextual
//! style/content terms, domain classification, the auxiliary identity and
//! text-image terms, and their weighted total.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tape, Var};
use crate::encoders::{DistinctiveEncoder, FeatureMap, IdentityBackend, TextImageBackend, TextureEncoder};
use crate::error::{Error, Result};
use crate::image::{stack_dyn, ImageTensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_psu: f64,
    pub lambda_rec: f64,
    pub lambda_ccx: f64,
    pub lambda_scx: f64,
    pub lambda_id: f64,
    pub lambda_textimage: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl LossWeights {
    pub fn full_scale() -> Self {
        Self { lambda_psu: 1.0, lambda_rec: 100.0, lambda_ccx: 0.5, lambda_scx: 1.0, lambda_id: 0.0, lambda_textimage: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_psu,
            self.lambda_rec,
            self.lambda_ccx,
            self.lambda_scx,
            self.lambda_id,
            self.lambda_textimage,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextualConfig {
    pub bandwidth: f64,
    pub epsilon: f64,
    pub taps: Vec<String>,
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for ContextualConfig {
    fn default() -> Self {
        Self {
            bandwidth: 0.5,
            epsilon: 1e-5,
            taps: vec!["relu3_2".into(), "relu4_2".into()],
            max_positions: 1024,
            seed: 0,
        }
    }
}

impl ContextualConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) || !(self.epsilon > 0.0) || self.max_positions < 2 || self.taps.is_empty() {
            return Err(Error::InvalidConfig("contextual config needs h > 0, eps > 0, max_positions >= 2 and a tap".into()));
        }
        Ok(())
    }
}

/// Raw loss values before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub rec: f64,
    pub psu: f64,
    pub scx: f64,
    pub ccx: f64,
    pub cls: f64,
    pub id: f64,
    pub textimage: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub psu: f64,
    pub scx: f64,
    pub ccx: f64,
    pub cls: f64,
    pub id: f64,
    pub textimage: f64,
    pub total: f64,
}

/// Weighted generator objective. `cls` is recorded but belongs to the
/// classifier phase and does not enter the total.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<LossBreakdown> {
    let named = [
        ("rec", c.rec),
        ("psu", c.psu),
        ("scx", c.scx),
        ("ccx", c.ccx),
        ("cls", c.cls),
        ("id", c.id),
        ("textimage", c.textimage),
    ];
    if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteComponent(name));
    }
    let total = w.lambda_psu * c.psu
        + w.lambda_rec * c.rec
        + w.lambda_ccx * c.ccx
        + w.lambda_scx * c.scx
        + w.lambda_id * c.id
        + w.lambda_textimage * c.textimage;
    Ok(LossBreakdown {
        rec: c.rec,
        psu: c.psu,
        scx: c.scx,
        ccx: c.ccx,
        cls: c.cls,
        id: c.id,
        textimage: c.textimage,
        total,
    })
}

// ---------------------------------------------------------------------------
// Tape forms

/// Batch mean of `0.5 * sum((out - content)^2)` over items whose flag is set.
pub fn rec_var<'t, T: Scalar>(out: Var<'t, T>, content: Var<'t, T>, same: &[bool]) -> Var<'t, T> {
    let s = out.shape();
    let n = s[0];
    let per_item: usize = s[1..].iter().product();
    let sq = out.sub(content).square().reshape(&[n, per_item]).sum_axis(1).reshape(&[n]);
    let gate = ArrayD::from_shape_vec(IxDyn(&[n]), same.iter().map(|&f| T::from_f64(if f { 1.0 } else { 0.0 })).collect())
        .expect("one flag per item");
    sq.mul(out.tape().constant(gate)).scale(0.5 / n as f64).sum()
}

/// Row-wise `1 - cos(a_k, b_k)` for `N x d` inputs, as an `N x 1` column.
pub fn cosine_distance_rows<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sa != sb {
        return Err(Error::DimensionMismatch(sa.last().copied().unwrap_or(0), sb.last().copied().unwrap_or(0)));
    }
    let na = a.square().sum_axis(1).sqrt();
    let nb = b.square().sum_axis(1).sqrt();
    if na.value().iter().chain(nb.value().iter()).any(|&v| v == T::zero()) {
        return Err(Error::ZeroVector);
    }
    let cos = a.mul(b).sum_axis(1).div(na.mul(nb));
    Ok(cos.neg().add_scalar(1.0))
}

/// Batch mean of `1 - cos` between paired rows.
pub fn psu_var<'t, T: Scalar>(z_out: Var<'t, T>, z_ref: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(cosine_distance_rows(z_out, z_ref)?.mean())
}

/// Contextual similarity between generated positions `P x C` and reference
/// positions `Q x C`.
pub fn cx_var<'t, T: Scalar>(gen: Var<'t, T>, reference: Var<'t, T>, h: f64, eps: f64) -> Result<Var<'t, T>> {
    let (sg, sr) = (gen.shape(), reference.shape());
    if sg[1] != sr[1] {
        return Err(Error::ChannelMismatch(sg[1], sr[1]));
    }
    if sg[0] < 2 || sr[0] < 2 {
        return Err(Error::TooFewPositions(sg[0].min(sr[0])));
    }
    let mu = reference.mean_axis(0);
    let unit = |x: Var<'t, T>| x.div(x.square().sum_axis(1).add_scalar(1e-12).sqrt());
    let g = unit(gen.sub(mu));
    let r = unit(reference.sub(mu));
    // Rounding can push cosines past 1; distances are clamped at 0.
    let d = g.matmul(r.t()).neg().add_scalar(1.0).relu();
    let rel = d.div(d.min_axis(1).add_scalar(eps));
    let w = rel.neg().add_scalar(1.0).scale(1.0 / h).exp();
    let cx = w.div(w.sum_axis(1));
    Ok(cx.max_axis(0).mean())
}

/// Sorted sample of at most `max` of `0..n`.
pub fn sample_positions(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, max).into_vec();
    idx.sort_unstable();
    idx
}

/// Positions of batch item `n` of an `N x C x H x W` map as a `P x C` matrix.
pub fn positions<'t, T: Scalar>(feat: Var<'t, T>, n: usize, idx: &[usize]) -> Var<'t, T> {
    let s = feat.shape();
    feat.index_select(0, &[n])
        .reshape(&[s[1], s[2] * s[3]])
        .t()
        .index_select(0, idx)
}

/// Batch mean over items of `sum_taps -log CX(gen_tap, ref_tap)`.
/// `gen` and `reference` hold one `N x C x H x W` map per tap, in order.
pub fn contextual_loss_var<'t, T: Scalar>(
    gen: &[Var<'t, T>],
    reference: &[Var<'t, T>],
    cfg: &ContextualConfig,
) -> Result<Var<'t, T>> {
    let tape = gen[0].tape();
    let n = gen[0].shape()[0];
    let mut terms = Vec::with_capacity(n * gen.len());
    for (t, (g, r)) in gen.iter().zip(reference).enumerate() {
        let (sg, sr) = (g.shape(), r.shape());
        if sg[1] != sr[1] {
            return Err(Error::ChannelMismatch(sg[1], sr[1]));
        }
        for item in 0..n {
            let seed = cfg.seed ^ ((t as u64) << 32 | item as u64);
            let gi = sample_positions(sg[2] * sg[3], cfg.max_positions, seed);
            let ri = sample_positions(sr[2] * sr[3], cfg.max_positions, seed.wrapping_add(1));
            let cx = cx_var(positions(*g, item, &gi), positions(*r, item, &ri), cfg.bandwidth, cfg.epsilon)?;
            terms.push(cx.ln().neg().reshape(&[1]));
        }
    }
    if terms.is_empty() {
        return Ok(tape.scalar(T::zero()));
    }
    Ok(Var::concat(&terms, 0).sum().scale(1.0 / n as f64))
}

/// Batch mean of `-log softmax(logits)[label]`.
pub fn cls_var<'t, T: Scalar>(logits: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let k = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    Ok(logits.log_softmax().pick_per_row(labels).mean().neg())
}

// ---------------------------------------------------------------------------
// Single-sample forms

pub fn loss_rec(output: &ImageTensor, content: &ImageTensor, same_pair: bool) -> Result<f64> {
    if output.shape() != content.shape() {
        return Err(Error::shape(content.shape(), output.shape()));
    }
    if !same_pair {
        return Ok(0.0);
    }
    Ok(0.5
        * output
            .data()
            .iter()
            .zip(content.data().iter())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>())
}

/// `1 - cos(a, b)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(a.len(), b.len()));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(1.0 - dot / (na * nb))
}

pub fn loss_psu(z_out: &[f64], z_style_ref: &[f64]) -> Result<f64> {
    cosine_distance(z_out, z_style_ref)
}

fn position_matrix(f: &FeatureMap) -> Array2<f64> {
    let (c, h, w) = f.data.dim();
    f.data
        .mapv(|v| v as f64)
        .into_shape_with_order((c, h * w))
        .expect("contiguous map")
        .t()
        .to_owned()
}

/// Contextual similarity of two single-image feature maps, with positions
/// sampled down to `cfg.max_positions`.
pub fn contextual_similarity(gen: &FeatureMap, reference: &FeatureMap, cfg: &ContextualConfig) -> Result<f64> {
    cfg.validate()?;
    if gen.data.shape()[0] != reference.data.shape()[0] {
        return Err(Error::ChannelMismatch(gen.data.shape()[0], reference.data.shape()[0]));
    }
    let (g, r) = (position_matrix(gen), position_matrix(reference));
    let gi = sample_positions(g.nrows(), cfg.max_positions, cfg.seed);
    let ri = sample_positions(r.nrows(), cfg.max_positions, cfg.seed.wrapping_add(1));
    let tape = Tape::<f64>::new();
    let gv = tape.constant(g.select(Axis(0), &gi).into_dyn());
    let rv = tape.constant(r.select(Axis(0), &ri).into_dyn());
    Ok(cx_var(gv, rv, cfg.bandwidth, cfg.epsilon)?.item())
}

fn contextual_pair(texture: &TextureEncoder, gen: &ImageTensor, reference: &ImageTensor, cfg: &ContextualConfig) -> Result<f64> {
    cfg.validate()?;
    let tape = Tape::<f64>::new();
    let p = texture.bind(&tape);
    let names: Vec<&str> = cfg.taps.iter().map(String::as_str).collect();
    let g = texture.taps(&p, tape.constant(stack_dyn(&[gen])), &names)?;
    let r = texture.taps(&p, tape.constant(stack_dyn(&[reference])), &names)?;
    Ok(contextual_loss_var(&g, &r, cfg)?.item())
}

/// Sum over taps of `-log CX(F(gen), F(style))`.
pub fn loss_scx(texture: &TextureEncoder, gen: &ImageTensor, style: &ImageTensor, cfg: &ContextualConfig) -> Result<f64> {
    contextual_pair(texture, gen, style, cfg)
}

/// Sum over taps of `-log CX(F(gen), F(content))`.
pub fn loss_ccx(texture: &TextureEncoder, gen: &ImageTensor, content: &ImageTensor, cfg: &ContextualConfig) -> Result<f64> {
    contextual_pair(texture, gen, content, cfg)
}

/// `-log softmax(logits)[label]`, via a max-shifted log-sum-exp.
pub fn loss_cls(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange { label, classes: logits.len() });
    }
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

pub fn loss_cls_batch(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let mut acc = 0.0;
    for (l, &y) in logits.iter().zip(labels) {
        acc += loss_cls(l, y)?;
    }
    Ok(acc / logits.len().max(1) as f64)
}

/// `1 - cos` of identity embeddings.
pub fn loss_identity(backend: &IdentityBackend, gen: &ImageTensor, style: &ImageTensor) -> Result<f64> {
    let a = backend.embed_identity(gen)?;
    let b = backend.embed_identity(style)?;
    cosine_distance(&a.mapv(|v| v as f64).to_vec(), &b.mapv(|v| v as f64).to_vec())
}

/// `1 - cos` between the image embedding of `gen` and the embedding of `prompt`.
pub fn loss_textimage(
    backend: &TextImageBackend,
    gen: &ImageTensor,
    prompt: &str,
    classifier: Option<&DistinctiveEncoder>,
) -> Result<f64> {
    let a = backend.embed_image(gen, classifier)?;
    let b = backend.embed_text(prompt)?;
    cosine_distance(&a.mapv(|v| v as f64).to_vec(), &b.mapv(|v| v as f64).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{numeric_gradient, relative_error};
    use crate::encoders::TextureConfig;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct double-loop contextual similarity.
    fn cx_oracle(g: &Array2<f64>, r: &Array2<f64>, h: f64, eps: f64) -> f64 {
        let (p, q, c) = (g.nrows(), r.nrows(), g.ncols());
        let mu: Vec<f64> = (0..c).map(|k| (0..q).map(|j| r[[j, k]]).sum::<f64>() / q as f64).collect();
        let centred = |m: &Array2<f64>, i: usize| -> Vec<f64> { (0..c).map(|k| m[[i, k]] - mu[k]).collect() };
        let mut d = vec![vec![0.0; q]; p];
        for (i, row) in d.iter_mut().enumerate() {
            let gi = centred(g, i);
            for (j, dij) in row.iter_mut().enumerate() {
                let rj = centred(r, j);
                let dot: f64 = gi.iter().zip(&rj).map(|(a, b)| a * b).sum();
                let ng = gi.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nr = rj.iter().map(|a| a * a).sum::<f64>().sqrt();
                *dij = (1.0 - dot / (ng * nr)).max(0.0);
            }
        }
        let mut cx = vec![vec![0.0; q]; p];
        for i in 0..p {
            let dmin = d[i].iter().copied().fold(f64::INFINITY, f64::min);
            let w: Vec<f64> = d[i].iter().map(|v| ((1.0 - v / (dmin + eps)) / h).exp()).collect();
            let s: f64 = w.iter().sum();
            for j in 0..q {
                cx[i][j] = w[j] / s;
            }
        }
        (0..q).map(|j| (0..p).map(|i| cx[i][j]).fold(f64::NEG_INFINITY, f64::max)).sum::<f64>() / q as f64
    }

    fn cx_of(g: &ArrayD<f64>, r: &ArrayD<f64>) -> f64 {
        let tape = Tape::<f64>::new();
        cx_var(tape.constant(g.clone()), tape.constant(r.clone()), 0.5, 1e-5).unwrap().item()
    }

    fn as2(a: &ArrayD<f64>) -> Array2<f64> {
        a.clone().into_dimensionality().unwrap()
    }

    #[test]
    fn rec_cases() {
        let a = ImageTensor::new(Array3::zeros((3, 2, 2)));
        let b = a.map(|v| v + 1.0);
        assert_eq!(loss_rec(&a, &a, true).unwrap(), 0.0);
        assert_eq!(loss_rec(&a, &b, false).unwrap(), 0.0);
        assert_eq!(loss_rec(&a, &b, true).unwrap(), 6.0);
        assert!(loss_rec(&a, &ImageTensor::zeros(3, 4, 4), true).is_err());
        let tape = Tape::<f64>::new();
        let x = tape.constant(stack_dyn(&[&a, &a]));
        let y = tape.constant(stack_dyn(&[&b, &b]));
        assert_eq!(rec_var(x, y, &[true, false]).item(), 3.0);
    }

    #[test]
    fn psu_cases() {
        assert!(loss_psu(&[1.0, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-12);
        assert!((loss_psu(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((loss_psu(&[1.0, 1.0], &[-2.0, -2.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(loss_psu(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector)));
        assert!(matches!(loss_psu(&[1.0], &[1.0, 0.0]), Err(Error::DimensionMismatch(1, 2))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn psu_is_scale_invariant(seed in 0u64..100_000, a in 0.01f64..100.0, b in 0.01f64..100.0) {
            let z1 = rand_arr(&[7], seed).into_raw_vec_and_offset().0;
            let z2 = rand_arr(&[7], seed + 1).into_raw_vec_and_offset().0;
            let s1: Vec<f64> = z1.iter().map(|v| v * a).collect();
            let s2: Vec<f64> = z2.iter().map(|v| v * b).collect();
            let base = loss_psu(&z1, &z2).unwrap();
            prop_assert!((loss_psu(&s1, &s2).unwrap() - base).abs() < 1e-12);
            prop_assert!((0.0..=2.0).contains(&base));
        }

        #[test]
        fn cx_matches_oracle_and_is_normalised(seed in 0u64..100_000, p in 2usize..9, q in 2usize..9, c in 2usize..6) {
            let g = rand_arr(&[p, c], seed);
            let r = rand_arr(&[q, c], seed + 7);
            let v = cx_of(&g, &r);
            prop_assert!((v - cx_oracle(&as2(&g), &as2(&r), 0.5, 1e-5)).abs() < 1e-6);
            prop_assert!(v > 0.0 && v <= 1.0 + 1e-12);
        }

        #[test]
        fn cx_is_permutation_invariant(seed in 0u64..100_000) {
            let g = rand_arr(&[6, 4], seed);
            let r = rand_arr(&[5, 4], seed + 1);
            let gp = g.select(Axis(0), &[3, 1, 5, 0, 2, 4]);
            let rp = r.select(Axis(0), &[4, 2, 0, 3, 1]);
            prop_assert!((cx_of(&g, &r) - cx_of(&gp, &rp)).abs() < 1e-12);
        }

        #[test]
        fn cls_matches_log_sum_exp(seed in 0u64..100_000, k in 2usize..10) {
            let logits = rand_arr(&[k], seed).mapv(|v| v * 10.0).into_raw_vec_and_offset().0;
            let label = (seed as usize) % k;
            let direct = -(logits[label].exp() / logits.iter().map(|v| v.exp()).sum::<f64>()).ln();
            prop_assert!((loss_cls(&logits, label).unwrap() - direct).abs() < 1e-9);
        }

        #[test]
        fn total_matches_weighted_sum(seed in 0u64..100_000) {
            let v = rand_arr(&[13], seed).mapv(f64::abs).into_raw_vec_and_offset().0;
            let c = LossComponents { rec: v[0], psu: v[1], scx: v[2], ccx: v[3], cls: v[4], id: v[5], textimage: v[6] };
            let w = LossWeights { lambda_psu: v[7], lambda_rec: v[8], lambda_ccx: v[9], lambda_scx: v[10], lambda_id: v[11], lambda_textimage: v[12] };
            let b = total_loss(&c, &w).unwrap();
            let terms = [(v[7], v[1]), (v[8], v[0]), (v[9], v[3]), (v[10], v[2]), (v[11], v[5]), (v[12], v[6])];
            let expect: f64 = terms.iter().map(|(a, b)| a * b).sum();
            prop_assert!((b.total - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn cx_per_row_normalisation() {
        let g = rand_arr(&[5, 3], 1);
        let r = rand_arr(&[4, 3], 2);
        let tape = Tape::<f64>::new();
        let (gv, rv) = (tape.constant(g), tape.constant(r));
        let mu = rv.mean_axis(0);
        let (gc, rc) = (gv.sub(mu), rv.sub(mu));
        let gu = gc.div(gc.square().sum_axis(1).sqrt());
        let ru = rc.div(rc.square().sum_axis(1).sqrt());
        let d = gu.matmul(ru.t()).neg().add_scalar(1.0);
        let w = d.div(d.min_axis(1).add_scalar(1e-5)).neg().add_scalar(1.0).scale(2.0).exp();
        let cx = w.div(w.sum_axis(1)).value();
        for i in 0..5 {
            assert!((cx.index_axis(Axis(0), i).sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cx_hand_computed_two_by_two() {
        // g = r = {(1,0),(0,1)} plus (0,0) offsets cancel: identical sets give CX = 1 up to eps effects.
        let g = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = cx_of(&g, &g);
        assert!((v - cx_oracle(&as2(&g), &as2(&g), 0.5, 1e-5)).abs() < 1e-9);
        assert!((v - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cx_prefers_the_clean_copy() {
        let f = rand_arr(&[3, 4, 4], 5).mapv(|v| v as f32);
        let noise = rand_arr(&[3, 4, 4], 6).mapv(|v| 10.0 * v as f32);
        let a = FeatureMap { data: f.clone().into_dimensionality().unwrap(), tap_name: "t".into() };
        let b = FeatureMap { data: (&f + &noise).into_dimensionality().unwrap(), tap_name: "t".into() };
        let cfg = ContextualConfig::default();
        assert!(contextual_similarity(&a, &a, &cfg).unwrap() >= contextual_similarity(&b, &a, &cfg).unwrap());
        let short = FeatureMap { data: Array3::zeros((2, 4, 4)), tap_name: "t".into() };
        assert!(matches!(contextual_similarity(&short, &a, &cfg), Err(Error::ChannelMismatch(2, 3))));
        let one = FeatureMap { data: Array3::ones((3, 1, 1)), tap_name: "t".into() };
        assert!(matches!(contextual_similarity(&one, &a, &cfg), Err(Error::TooFewPositions(1))));
    }

    #[test]
    fn position_sampling_caps_and_is_deterministic() {
        let a = sample_positions(4096, 1024, 3);
        assert_eq!(a.len(), 1024);
        assert_eq!(a, sample_positions(4096, 1024, 3));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_positions(10, 1024, 3), (0..10).collect::<Vec<_>>());
    }

    fn rand_img(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Array3::from_shape_fn((3, 64, 64), |_| rng.random_range(-1.0f32..1.0)))
    }

    #[test]
    fn contextual_losses_on_images() {
        let tex = TextureEncoder::new(TextureConfig::desk(), 2).unwrap();
        let cfg = ContextualConfig::default();
        let style = rand_img(1);
        let other = rand_img(2);
        let perturbed = style.map(|v| (v + 0.3).clamp(-1.0, 1.0));
        let exact = loss_scx(&tex, &style, &style, &cfg).unwrap();
        assert!(exact <= loss_scx(&tex, &perturbed, &style, &cfg).unwrap());
        assert!(exact.abs() < 1e-3, "identical images give CX near 1, got -log {exact}");
        let cc = loss_ccx(&tex, &other, &style, &cfg).unwrap();
        assert!(cc.is_finite() && cc >= 0.0);
        assert_eq!(cc, loss_scx(&tex, &other, &style, &cfg).unwrap());

        let single = |tap: &str| ContextualConfig { taps: vec![tap.into()], ..cfg.clone() };
        let sum = loss_scx(&tex, &other, &style, &single("relu3_2")).unwrap()
            + loss_scx(&tex, &other, &style, &single("relu4_2")).unwrap();
        assert!((sum - cc).abs() < 1e-9);
    }

    #[test]
    fn cls_cases() {
        let mut logits = vec![0.0; 13];
        assert!((loss_cls(&logits, 4).unwrap() - 13f64.ln()).abs() < 1e-12);
        assert!((13f64.ln() - 2.565).abs() < 1e-3);
        logits[2] = 1e6;
        assert!(loss_cls(&logits, 2).unwrap().abs() < 1e-9);
        assert!(matches!(loss_cls(&logits, 13), Err(Error::LabelOutOfRange { label: 13, classes: 13 })));
        let tape = Tape::<f64>::new();
        let l = tape.constant(ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, 2.0, 3.0, 0.5, 0.1, -1.0]).unwrap());
        let expect = loss_cls_batch(&[vec![1.0, 2.0, 3.0], vec![0.5, 0.1, -1.0]], &[2, 0]).unwrap();
        assert!((cls_var(l, &[2, 0]).unwrap().item() - expect).abs() < 1e-12);
    }

    #[test]
    fn identity_and_textimage_cosine_cases() {
        let id = IdentityBackend::Fallback;
        let img = rand_img(4);
        assert!(loss_identity(&id, &img, &img).unwrap().abs() < 1e-6);
        let neg = img.map(|v| -v);
        assert!((loss_identity(&id, &img, &neg).unwrap() - 2.0).abs() < 1e-5);
        assert!(matches!(loss_identity(&IdentityBackend::Unregistered, &img, &img), Err(Error::NoBackendRegistered(_))));

        // One bright 8x8 cell versus another: centred embeddings are nearly
        // orthogonal (exactly -1/63 cosine).
        let cell = |k: usize| {
            let mut a = Array3::<f32>::zeros((3, 64, 64));
            let (by, bx) = (k / 8 * 8, k % 8 * 8);
            a.slice_mut(ndarray::s![.., by..by + 8, bx..bx + 8]).fill(1.0);
            ImageTensor::new(a)
        };
        let orth = loss_identity(&id, &cell(0), &cell(9)).unwrap();
        assert!((orth - (1.0 + 1.0 / 63.0)).abs() < 1e-5);

        let enc = crate::encoders::DistinctiveEncoder::new(crate::encoders::DistinctiveConfig::desk(2), 0).unwrap();
        let ti = TextImageBackend::from_spec("fallback", &["a".into(), "b".into()]).unwrap();
        // Untrained classifier: uniform probabilities, cosine 1/sqrt(2) with a one-hot prompt.
        let v = loss_textimage(&ti, &img, "domain_1", Some(&enc)).unwrap();
        assert!((v - (1.0 - 0.5f64.sqrt())).abs() < 1e-6);
        assert!(matches!(
            loss_textimage(&TextImageBackend::Unregistered, &img, "a", None),
            Err(Error::NoBackendRegistered(_))
        ));
    }

    #[test]
    fn total_cases() {
        let ones = LossComponents { rec: 1.0, psu: 1.0, scx: 1.0, ccx: 1.0, ..Default::default() };
        assert_eq!(total_loss(&ones, &LossWeights::full_scale()).unwrap().total, 102.5);
        assert_eq!(total_loss(&LossComponents::default(), &LossWeights::full_scale()).unwrap().total, 0.0);
        let bad = LossComponents { scx: f64::NAN, ccx: f64::INFINITY, ..Default::default() };
        assert!(matches!(total_loss(&bad, &LossWeights::full_scale()), Err(Error::NonFiniteComponent("scx"))));
    }

    fn grad_check(shape: &[usize], seed: u64, f: impl Fn(Var<'_, f64>) -> Var<'_, f64>) -> f64 {
        let x0 = rand_arr(shape, seed);
        let eval = |x: &ArrayD<f64>| {
            let tape = Tape::new();
            let v = tape.var(x.clone());
            let out = f(v);
            (out.item(), tape.backward(out).get_or_zeros(v))
        };
        let numeric = numeric_gradient(|x| eval(x).0, &x0, 1e-6);
        relative_error(&eval(&x0).1, &numeric, 1e-8)
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let target = rand_arr(&[2, 3, 2, 2], 90);
        assert!(grad_check(&[2, 3, 2, 2], 1, |x| rec_var(x, x.tape().constant(target.clone()), &[true, false])) < 1e-3);
        let zref = rand_arr(&[3, 5], 91);
        assert!(grad_check(&[3, 5], 2, |x| psu_var(x, x.tape().constant(zref.clone())).unwrap()) < 1e-3);
        let r = rand_arr(&[6, 4], 92);
        assert!(grad_check(&[5, 4], 3, |x| cx_var(x, x.tape().constant(r.clone()), 0.5, 1e-5).unwrap()) < 1e-3);
        assert!(grad_check(&[3, 4], 4, |x| cls_var(x.scale(3.0), &[0, 3, 1]).unwrap()) < 1e-3);
    }
}
