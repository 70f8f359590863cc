//! Benchmark metrics: Frechet distance, kernel distance (unbiased cubic
//! polynomial MMD), NIQE, identity distances, matrix statistics and the
//! per-domain report.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::dataset::{Corpus, Split};
use crate::encoders::IdentityBackend;
use crate::error::{Error, Result};
use crate::image::{montage, ImageTensor};
use crate::model::{Encoded, StyleModel};

/// KID values are stored raw and multiplied by this when reported.
pub const KID_REPORT_SCALE: f64 = 100.0;
/// Ridge added to NIQE covariance averages.
pub const NIQE_LAMBDA: f64 = 1e-6;
/// Relative size of a negative eigenvalue tolerated as rounding noise.
const PSD_TOLERANCE: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Frechet distance

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub count: usize,
}

fn mean_cov(x: ArrayView2<'_, f64>) -> (Array1<f64>, Array2<f64>) {
    let n = x.nrows();
    let mean = x.mean_axis(Axis(0)).expect("at least one row");
    let centred = &x - &mean;
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = centred.t().dot(&centred) / denom;
    (mean, cov)
}

impl FeatureStats {
    /// Sample mean and unbiased covariance of the rows of `x`.
    pub fn from_features(x: &Array2<f64>) -> Result<Self> {
        if x.nrows() < 2 {
            return Err(Error::TooFewSamples(x.nrows()));
        }
        let (mean, cov) = mean_cov(x.view());
        Ok(Self { mean, cov, count: x.nrows() })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Eigenvalues of a symmetric matrix after checking that none is negative
/// beyond rounding noise; small negatives are clamped to zero.
fn psd_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut e = SymmetricEigen::new(sym);
    let scale = e.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(&worst) = e.eigenvalues.iter().find(|&&v| v < -PSD_TOLERANCE * scale) {
        return Err(Error::NonPsdBeyondTolerance(worst));
    }
    e.eigenvalues.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(e)
}

fn psd_sqrt(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = psd_eigen(m)?;
    let root = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    Ok(&e.eigenvectors * root * e.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, clamped at 0.
/// The trace of the cross term is taken as `sum sqrt(eig(A^(1/2) S_b A^(1/2)))`
/// with `A = S_a`, which is symmetric and shares its spectrum with `S_a S_b`.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(a.dim(), b.dim()));
    }
    let diff = &a.mean - &b.mean;
    let (sa, sb) = (to_dmatrix(&a.cov), to_dmatrix(&b.cov));
    psd_eigen(sb.clone())?;
    let ra = psd_sqrt(sa.clone())?;
    let cross = psd_eigen(&ra * &sb * &ra)?;
    let tr_cross: f64 = cross.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let value = diff.dot(&diff) + sa.trace() + sb.trace() - 2.0 * tr_cross;
    Ok(value.max(0.0))
}

// ---------------------------------------------------------------------------
// Kernel distance

/// Unbiased MMD^2 with `k(x, y) = (x.y / d + 1)^3`. Raw value; multiply by
/// [`KID_REPORT_SCALE`] for reporting.
pub fn kid(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    let (n, m) = (x.nrows(), y.nrows());
    if n < 2 || m < 2 {
        return Err(Error::TooFewSamples(n.min(m)));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch(x.ncols(), y.ncols()));
    }
    let d = x.ncols() as f64;
    let kxx = x.dot(&x.t()).mapv(|v| (v / d + 1.0).powi(3));
    let kyy = y.dot(&y.t()).mapv(|v| (v / d + 1.0).powi(3));
    let kxy = x.dot(&y.t()).mapv(|v| (v / d + 1.0).powi(3));
    let off = |k: &Array2<f64>| (k.sum() - k.diag().sum()) / (k.nrows() * (k.nrows() - 1)) as f64;
    Ok(off(&kxx) + off(&kyy) - 2.0 * kxy.mean().expect("nonempty"))
}

/// Mean of [`kid`] over `subsets` random subsets of `size` rows from each
/// side (sampled without replacement, seeded).
pub fn kid_subsets(x: &Array2<f64>, y: &Array2<f64>, size: usize, subsets: usize, seed: u64) -> Result<f64> {
    if size < 2 || size > x.nrows().min(y.nrows()) || subsets == 0 {
        return Err(Error::TooFewSamples(x.nrows().min(y.nrows())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..subsets {
        let ix = rand::seq::index::sample(&mut rng, x.nrows(), size).into_vec();
        let iy = rand::seq::index::sample(&mut rng, y.nrows(), size).into_vec();
        acc += kid(&x.select(Axis(0), &ix), &y.select(Axis(0), &iy))?;
    }
    Ok(acc / subsets as f64)
}

// ---------------------------------------------------------------------------
// NIQE

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiqeModel {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub patch: usize,
    pub sharpness_threshold: f64,
}

pub const NIQE_FEATURES: usize = 36;

impl NiqeModel {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        if m.mean.len() != NIQE_FEATURES || m.cov.dim() != (NIQE_FEATURES, NIQE_FEATURES) || m.patch < 8 {
            return Err(Error::InvalidConfig(format!("{}: not a {NIQE_FEATURES}-feature NIQE model", path.display())));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serialisable");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Normalised 7-tap Gaussian with sigma 7/6.
fn gaussian_taps() -> [f64; 7] {
    let sigma = 7.0 / 6.0;
    let mut w = [0.0; 7];
    for (k, v) in w.iter_mut().enumerate() {
        let x = k as f64 - 3.0;
        *v = (-x * x / (2.0 * sigma * sigma)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.map(|v| v / sum)
}

/// Separable Gaussian blur with edge replication.
fn blur(img: &Array2<f64>) -> Array2<f64> {
    let taps = gaussian_taps();
    let (h, w) = img.dim();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            tmp[[y, x]] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * img[[y, clamp(x as isize + k as isize - 3, w)]])
                .sum();
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[[clamp(y as isize + k as isize - 3, h), x]])
                .sum();
        }
    }
    out
}

/// Mean-subtracted contrast-normalised coefficients `(I - mu) / (sigma + 1)`
/// and the local deviation `sigma`, for an image on the 0..255 scale.
pub fn mscn(img: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mu = blur(img);
    let sq = blur(&img.mapv(|v| v * v));
    let sigma = (&sq - &mu.mapv(|v| v * v)).mapv(|v| v.max(0.0).sqrt());
    let coeffs = (img - &mu) / &sigma.mapv(|v| v + 1.0);
    (coeffs, sigma)
}

const SHAPE_MIN: f64 = 0.2;
const SHAPE_MAX: f64 = 10.0;
const SHAPE_STEP: f64 = 0.001;

/// `(alpha, G(1/a) G(3/a) / G(2/a)^2)` on the shape search grid.
fn shape_grid() -> &'static [(f64, f64)] {
    static GRID: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    GRID.get_or_init(|| {
        let n = ((SHAPE_MAX - SHAPE_MIN) / SHAPE_STEP).round() as usize;
        (0..=n)
            .map(|k| {
                let a = SHAPE_MIN + k as f64 * SHAPE_STEP;
                (a, (ln_gamma(1.0 / a) + ln_gamma(3.0 / a) - 2.0 * ln_gamma(2.0 / a)).exp())
            })
            .collect()
    })
}

fn closest_shape(target: f64, f: impl Fn(f64) -> f64) -> f64 {
    shape_grid()
        .iter()
        .min_by(|a, b| (f(a.1) - target).abs().total_cmp(&(f(b.1) - target).abs()))
        .map(|g| g.0)
        .expect("nonempty grid")
}

/// Moment-matching generalised Gaussian fit: `(shape, variance)`.
pub fn fit_ggd(x: &[f64]) -> (f64, f64) {
    let n = x.len().max(1) as f64;
    let var = x.iter().map(|v| v * v).sum::<f64>() / n;
    let abs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    if var <= 1e-20 {
        return (SHAPE_MAX, 0.0);
    }
    (closest_shape(var / (abs * abs), |r| r), var)
}

/// Moment-matching asymmetric generalised Gaussian fit:
/// `(shape, mean, left variance, right variance)`.
pub fn fit_aggd(x: &[f64]) -> (f64, f64, f64, f64) {
    let side = |pred: fn(f64) -> bool| {
        let (sum, cnt) = x.iter().filter(|&&v| pred(v)).fold((0.0, 0usize), |(s, c), v| (s + v * v, c + 1));
        if cnt == 0 { 0.0 } else { sum / cnt as f64 }
    };
    let (lvar, rvar) = (side(|v| v < 0.0), side(|v| v > 0.0));
    let n = x.len().max(1) as f64;
    let sq = x.iter().map(|v| v * v).sum::<f64>() / n;
    let abs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    if sq <= 1e-20 {
        return (SHAPE_MAX, 0.0, lvar, rvar);
    }
    let (ls, rs) = (lvar.sqrt().max(1e-10), rvar.sqrt().max(1e-10));
    let g = ls / rs;
    let r_hat = abs * abs / sq;
    let r_norm = r_hat * (g.powi(3) + 1.0) * (g + 1.0) / (g * g + 1.0).powi(2);
    let alpha = closest_shape(r_norm, |r| 1.0 / r);
    let ratio = (ln_gamma(2.0 / alpha) - ln_gamma(1.0 / alpha)).exp();
    let scale = (ln_gamma(1.0 / alpha) - ln_gamma(3.0 / alpha)).exp().sqrt();
    (alpha, (rs - ls) * ratio * scale, lvar, rvar)
}

/// 18 statistics of one MSCN patch: GGD fit plus AGGD fits of the
/// horizontal, vertical and two diagonal neighbour products.
fn patch_features(m: ArrayView2<'_, f64>, out: &mut Vec<f64>) {
    let (h, w) = m.dim();
    let flat: Vec<f64> = m.iter().copied().collect();
    let (a, v) = fit_ggd(&flat);
    out.extend([a, v]);
    let shifts: [(usize, usize, isize); 4] = [(0, 1, 0), (1, 0, 0), (1, 1, 0), (1, 0, -1)];
    for (dy, dx, extra) in shifts {
        let mut prod = Vec::with_capacity(h * w);
        for y in 0..h - dy {
            for x in 0..w {
                let x2 = x as isize + dx as isize + extra;
                if x2 < 0 || x2 >= w as isize {
                    continue;
                }
                prod.push(m[[y, x]] * m[[y + dy, x2 as usize]]);
            }
        }
        let (a, mu, l, r) = fit_aggd(&prod);
        out.extend([a, mu, l, r]);
    }
}

fn half(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = (img.nrows() / 2, img.ncols() / 2);
    Array2::from_shape_fn((h, w), |(y, x)| {
        (img[[2 * y, 2 * x]] + img[[2 * y + 1, 2 * x]] + img[[2 * y, 2 * x + 1]] + img[[2 * y + 1, 2 * x + 1]]) / 4.0
    })
}

/// Grayscale `[-1, 1]` plane mapped to the 0..255 scale.
fn to_255(gray: &Array2<f32>) -> Array2<f64> {
    gray.mapv(|v| (v as f64 + 1.0) * 127.5)
}

/// Per-patch 36-d features and sharpness (mean local deviation) on a grid of
/// `patch x patch` tiles; the half-scale pass uses half-size tiles.
pub fn niqe_patch_features(gray: &Array2<f32>, patch: usize) -> Result<Vec<(Vec<f64>, f64)>> {
    let (h, w) = gray.dim();
    if patch < 8 || h < patch || w < patch {
        return Err(Error::ImageTooSmall(w, h, patch));
    }
    let full = to_255(gray);
    let (m1, sigma) = mscn(&full);
    let (m2, _) = mscn(&half(&full));
    let hp = patch / 2;
    let mut out = Vec::new();
    for py in 0..h / patch {
        for px in 0..w / patch {
            let (y, x) = (py * patch, px * patch);
            let mut f = Vec::with_capacity(NIQE_FEATURES);
            patch_features(m1.slice(s![y..y + patch, x..x + patch]), &mut f);
            patch_features(m2.slice(s![y / 2..y / 2 + hp, x / 2..x / 2 + hp]), &mut f);
            let sharp = sigma.slice(s![y..y + patch, x..x + patch]).mean().expect("nonempty patch");
            out.push((f, sharp));
        }
    }
    Ok(out)
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[((v.len() - 1) as f64 * q.clamp(0.0, 1.0)).floor() as usize]
}

fn rows(features: &[Vec<f64>]) -> Array2<f64> {
    Array2::from_shape_fn((features.len(), NIQE_FEATURES), |(i, j)| features[i][j])
}

/// Pristine model from patches whose sharpness reaches the given quantile.
pub fn niqe_fit(corpus: &[Array2<f32>], patch: usize, sharpness_quantile: f64) -> Result<NiqeModel> {
    if corpus.len() < 10 {
        return Err(Error::CorpusTooSmall(format!("{} images, need at least 10", corpus.len())));
    }
    let mut all = Vec::new();
    for g in corpus {
        let (h, w) = g.dim();
        if h < 2 * patch || w < 2 * patch {
            return Err(Error::CorpusTooSmall(format!("{w}x{h} image is below twice the {patch}px patch")));
        }
        all.extend(niqe_patch_features(g, patch)?);
    }
    let sharp: Vec<f64> = all.iter().map(|p| p.1).collect();
    let threshold = quantile(&sharp, sharpness_quantile);
    let kept: Vec<Vec<f64>> = all.into_iter().filter(|p| p.1 >= threshold && p.1 > 0.0).map(|p| p.0).collect();
    if kept.is_empty() {
        return Err(Error::AllPatchesRejected);
    }
    let (mean, cov) = mean_cov(rows(&kept).view());
    Ok(NiqeModel { mean, cov, patch, sharpness_threshold: threshold })
}

/// `sqrt(d^T ((S + S2) / 2 + lambda I)^-1 d)` with `d` the difference between
/// the model mean and the test image's patch-feature mean.
pub fn niqe_score(gray: &Array2<f32>, model: &NiqeModel) -> Result<f64> {
    let feats: Vec<Vec<f64>> = niqe_patch_features(gray, model.patch)?.into_iter().map(|p| p.0).collect();
    let (mean, cov) = mean_cov(rows(&feats).view());
    let d = DVector::from_iterator(NIQE_FEATURES, (&model.mean - &mean).into_iter());
    let mut m = (to_dmatrix(&model.cov) + to_dmatrix(&cov)) * 0.5;
    for k in 0..NIQE_FEATURES {
        m[(k, k)] += NIQE_LAMBDA;
    }
    let solved = match m.clone().cholesky() {
        Some(c) => c.solve(&d),
        None => m.pseudo_inverse(1e-12).map_err(|e| Error::InvalidConfig(e.to_string()))? * &d,
    };
    Ok(d.dot(&solved).max(0.0).sqrt())
}

// ---------------------------------------------------------------------------
// Identity statistics

/// `1 - cos` of identity embeddings, in `[0, 2]`.
pub fn id_distance(backend: &IdentityBackend, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let ea = backend.embed_identity(a)?;
    let eb = backend.embed_identity(b)?;
    Ok(id_distance_embedded(&ea, &eb))
}

/// `1 - cos` between two unit-length embeddings.
pub fn id_distance_embedded(a: &Array1<f32>, b: &Array1<f32>) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    (1.0 - dot).clamp(0.0, 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixStats {
    pub id_style_per_column: Vec<f64>,
    pub id_content_per_column: Vec<f64>,
    pub id_style: f64,
    pub id_content: f64,
}

/// `grid[i][j] = G(content_j, style_i)`. Column `j` averages over rows the
/// distance of each result to its style (`ID_style`) and to content `j`
/// (`ID_content`); overall values average the columns.
pub fn matrix_stats(
    backend: &IdentityBackend,
    grid: &[Vec<ImageTensor>],
    contents: &[ImageTensor],
    styles: &[ImageTensor],
) -> Result<MatrixStats> {
    let n = styles.len();
    if n == 0 || contents.len() != n || grid.len() != n || grid.iter().any(|r| r.len() != n) {
        return Err(Error::IncompleteGrid(format!("{} styles, {} contents, {} rows", n, contents.len(), grid.len())));
    }
    let embed = |imgs: &[ImageTensor]| imgs.iter().map(|i| backend.embed_identity(i)).collect::<Result<Vec<_>>>();
    let (ec, es) = (embed(contents)?, embed(styles)?);
    let eg = grid.iter().map(|r| embed(r)).collect::<Result<Vec<_>>>()?;
    let mut style_cols = vec![0.0; n];
    let mut content_cols = vec![0.0; n];
    for j in 0..n {
        for i in 0..n {
            style_cols[j] += id_distance_embedded(&eg[i][j], &es[i]) / n as f64;
            content_cols[j] += id_distance_embedded(&eg[i][j], &ec[j]) / n as f64;
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(MatrixStats {
        id_style: mean(&style_cols),
        id_content: mean(&content_cols),
        id_style_per_column: style_cols,
        id_content_per_column: content_cols,
    })
}

/// A rendered matrix: row 0 holds the contents, column 0 the styles, and
/// cell `(i, j)` for `i, j >= 1` is `G(content_j, style_i)`.
#[derive(Debug, Clone)]
pub struct StyleMatrix {
    pub domains: Vec<String>,
    /// `grid[i][j] = G(contents[j], styles[i])`.
    pub grid: Vec<Vec<ImageTensor>>,
    pub contents: Vec<ImageTensor>,
    pub styles: Vec<ImageTensor>,
}

impl StyleMatrix {
    /// `(N + 1) x (N + 1)` tiles with a white corner.
    pub fn montage(&self) -> Result<ImageTensor> {
        let mut cells = vec![std::iter::once(None).chain(self.contents.iter().map(Some)).collect::<Vec<_>>()];
        for (style, row) in self.styles.iter().zip(&self.grid) {
            cells.push(std::iter::once(Some(style)).chain(row.iter().map(Some)).collect());
        }
        montage(&cells, 1.0)
    }

    pub fn stats(&self, backend: &IdentityBackend) -> Result<MatrixStats> {
        matrix_stats(backend, &self.grid, &self.contents, &self.styles)
    }
}

/// One representative per domain (its first eval image, else its first
/// image) used as both content and style.
pub fn style_matrix(model: &StyleModel, corpus: &Corpus) -> Result<StyleMatrix> {
    let n = corpus.registry.len();
    let mut reps = Vec::with_capacity(n);
    for d in 0..n {
        let eval = corpus.domain_indices(d, Some(Split::Eval));
        let any = corpus.domain_indices(d, None);
        let i = *eval.first().or(any.first()).ok_or(Error::IncompleteGrid(format!("domain {d} has no images")))?;
        reps.push(corpus.images[i].clone());
    }
    let refs: Vec<&ImageTensor> = reps.iter().collect();
    let enc = model.encode(&refs)?;
    let mut grid = Vec::with_capacity(n);
    for style in &enc {
        let contents: Vec<&Encoded> = enc.iter().collect();
        grid.push(model.generate_encoded(&contents, &vec![style; n])?);
    }
    Ok(StyleMatrix {
        domains: corpus.registry.domains().iter().map(|d| d.name.clone()).collect(),
        grid,
        contents: reps.clone(),
        styles: reps,
    })
}

// ---------------------------------------------------------------------------
// Report

/// One style domain's benchmark values. NIQE and identity columns are empty
/// when no pristine model or identity backend is available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub domain: String,
    pub fid: f64,
    pub kid_x100: f64,
    pub niqe: Option<f64>,
    pub id_style: Option<f64>,
    pub id_content: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean: EvalRow,
}

fn mean_opt(rows: &[EvalRow], f: fn(&EvalRow) -> Option<f64>) -> Option<f64> {
    let vals: Option<Vec<f64>> = rows.iter().map(f).collect();
    vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl EvalReport {
    /// Appends the arithmetic mean row; an optional column's mean is empty
    /// unless every domain has a value.
    pub fn from_rows(rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidConfig("report needs at least one domain row".into()));
        }
        let n = rows.len() as f64;
        let mean = EvalRow {
            domain: "mean".into(),
            fid: rows.iter().map(|r| r.fid).sum::<f64>() / n,
            kid_x100: rows.iter().map(|r| r.kid_x100).sum::<f64>() / n,
            niqe: mean_opt(&rows, |r| r.niqe),
            id_style: mean_opt(&rows, |r| r.id_style),
            id_content: mean_opt(&rows, |r| r.id_content),
        };
        Ok(Self { rows, mean })
    }

    /// Domain rows then the mean row, under the header
    /// `domain,fid,kid_x100,niqe,id_style,id_content`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            w.serialize(r).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()?).map_err(|e| Error::io(csv_path, e))?;
        let json = serde_json::to_string_pretty(self).expect("serialisable");
        std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))
    }
}

// ---------------------------------------------------------------------------
// Benchmark

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Eval images taken from every other domain as the content set.
    pub content_per_domain: usize,
    /// Pristine model; fitted on `niqe_domain` of the corpus when absent.
    pub niqe: Option<NiqeModel>,
    pub niqe_domain: usize,
    pub niqe_patch: usize,
    pub niqe_sharpness_quantile: f64,
    pub kid_subset_size: usize,
    pub kid_subsets: usize,
    pub seed: u64,
}

impl EvalOptions {
    pub fn from_config(cfg: &TrainConfig, content_per_domain: usize) -> Self {
        Self {
            content_per_domain,
            niqe: None,
            niqe_domain: cfg.niqe_domain,
            niqe_patch: cfg.niqe_patch,
            niqe_sharpness_quantile: cfg.niqe_sharpness_quantile,
            kid_subset_size: cfg.kid_subset_size,
            kid_subsets: cfg.kid_subsets,
            seed: cfg.seed,
        }
    }
}

/// NIQE model over every image of one domain.
pub fn pristine_niqe(corpus: &Corpus, domain: usize, patch: usize, quantile: f64) -> Result<NiqeModel> {
    if domain >= corpus.registry.len() {
        return Err(Error::UnknownDomainId(domain));
    }
    let gray: Vec<_> = corpus
        .domain_indices(domain, None)
        .into_iter()
        .map(|i| corpus.images[i].grayscale())
        .collect();
    niqe_fit(&gray, patch, quantile)
}

/// Cross-domain benchmark. For style domain `s`, the first
/// `content_per_domain` eval images of every other domain are stylised, the
/// `t`-th content paired with eval style image `t mod n_s`; FID and KID
/// compare classifier features of the results with all images of `s`.
pub fn evaluate_model(model: &StyleModel, corpus: &Corpus, opts: &EvalOptions) -> Result<EvalReport> {
    let n = corpus.registry.len();
    if n < 2 {
        return Err(Error::SingleDomainCorpus);
    }
    let eval: Vec<Vec<usize>> = (0..n).map(|d| corpus.domain_indices(d, Some(Split::Eval))).collect();
    if let Some(d) = eval.iter().position(Vec::is_empty) {
        return Err(Error::EmptyEvalSplit(d));
    }
    let k = opts.content_per_domain.max(1);
    let niqe_model = match &opts.niqe {
        Some(m) => Some(m.clone()),
        None => match pristine_niqe(corpus, opts.niqe_domain, opts.niqe_patch, opts.niqe_sharpness_quantile) {
            Ok(m) => Some(m),
            Err(Error::CorpusTooSmall(_) | Error::AllPatchesRejected | Error::ImageTooSmall(..)) => None,
            Err(e) => return Err(e),
        },
    };
    let has_identity = model.identity.dim().is_ok();

    let used: Vec<usize> = eval.iter().flatten().copied().collect();
    let encoded = model.encode(&used.iter().map(|&i| &corpus.images[i]).collect::<Vec<_>>())?;
    let enc = |record: usize| &encoded[used.iter().position(|&u| u == record).expect("encoded")];

    let mut rows = Vec::with_capacity(n);
    for s in 0..n {
        let pairs: Vec<(usize, usize)> = (0..n)
            .filter(|&d| d != s)
            .flat_map(|d| eval[d].iter().take(k).copied())
            .enumerate()
            .map(|(t, c)| (c, eval[s][t % eval[s].len()]))
            .collect();
        let mut outputs = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(8) {
            let cs: Vec<_> = chunk.iter().map(|&(c, _)| enc(c)).collect();
            let ss: Vec<_> = chunk.iter().map(|&(_, y)| enc(y)).collect();
            outputs.extend(model.generate_encoded(&cs, &ss)?);
        }
        let out_refs: Vec<&ImageTensor> = outputs.iter().collect();
        let real: Vec<&ImageTensor> = corpus.domain_indices(s, None).into_iter().map(|i| &corpus.images[i]).collect();
        let fx = model.metric_features(&out_refs)?;
        let fy = model.metric_features(&real)?;
        let fid_v = fid(&FeatureStats::from_features(&fx)?, &FeatureStats::from_features(&fy)?)?;
        let kid_v = if opts.kid_subsets > 0 && opts.kid_subset_size > 0 {
            kid_subsets(&fx, &fy, opts.kid_subset_size, opts.kid_subsets, opts.seed ^ s as u64)?
        } else {
            kid(&fx, &fy)?
        };
        let niqe_v = match &niqe_model {
            Some(m) => {
                let scores = outputs.iter().map(|o| niqe_score(&o.grayscale(), m)).collect::<Result<Vec<_>>>()?;
                Some(scores.iter().sum::<f64>() / scores.len() as f64)
            }
            None => None,
        };
        let (id_style, id_content) = if has_identity {
            let (mut ds, mut dc) = (0.0, 0.0);
            for (o, &(c, y)) in outputs.iter().zip(&pairs) {
                ds += id_distance(&model.identity, o, &corpus.images[y])?;
                dc += id_distance(&model.identity, o, &corpus.images[c])?;
            }
            let m = pairs.len() as f64;
            (Some(ds / m), Some(dc / m))
        } else {
            (None, None)
        };
        rows.push(EvalRow {
            domain: corpus.registry.name(s).unwrap_or_default().to_string(),
            fid: fid_v,
            kid_x100: kid_v * KID_REPORT_SCALE,
            niqe: niqe_v,
            id_style,
            id_content,
        });
    }
    EvalReport::from_rows(rows)
}

/// Loads a trained generator checkpoint and benchmarks it on a manifest.
pub fn evaluate_benchmark(manifest: &Path, checkpoint: &Path, content_per_domain: usize) -> Result<EvalReport> {
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    let corpus = Corpus::load(manifest, model.config.output_size)?;
    evaluate_model(&model, &corpus, &EvalOptions::from_config(&model.config, content_per_domain))
}

#[cfg(test)]
mod tests;
