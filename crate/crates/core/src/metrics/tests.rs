use super::*;
use crate::dataset::render_synthetic;
use ndarray::{Array3, ArrayView1};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn features(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
}

fn diag_stats(mean: Vec<f64>, var: Vec<f64>) -> FeatureStats {
    let d = mean.len();
    FeatureStats { mean: Array1::from(mean), cov: Array2::from_diag(&Array1::from(var)), count: d + 1 }
}

/// Double-loop unbiased MMD^2 with the cubic polynomial kernel.
fn kid_oracle(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let d = x.ncols() as f64;
    let k = |a: ArrayView1<f64>, b: ArrayView1<f64>| {
        let dot: f64 = a.iter().zip(b.iter()).map(|(p, q)| p * q).sum();
        (dot / d + 1.0).powi(3)
    };
    let (n, m) = (x.nrows(), y.nrows());
    let mut xx = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                xx += k(x.row(i), x.row(j));
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                yy += k(y.row(i), y.row(j));
            }
        }
    }
    let mut xy = 0.0;
    for i in 0..n {
        for j in 0..m {
            xy += k(x.row(i), y.row(j));
        }
    }
    xx / (n * (n - 1)) as f64 + yy / (m * (m - 1)) as f64 - 2.0 * xy / (n * m) as f64
}

#[test]
fn fid_identical_and_shifted() {
    let a = FeatureStats::from_features(&features(30, 5, 1)).unwrap();
    assert!(fid(&a, &a).unwrap().abs() < 1e-6);
    let mut b = a.clone();
    b.mean += &Array1::from(vec![1.0, -2.0, 0.5, 0.0, 3.0]);
    let expect = 1.0 + 4.0 + 0.25 + 9.0;
    assert!((fid(&a, &b).unwrap() - expect).abs() < 1e-8 * expect);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn fid_diagonal_closed_form(seed in 0u64..100_000, d in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |lo: f64, hi: f64| (0..d).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
        let (ma, mb, va, vb) = (draw(-2.0, 2.0), draw(-2.0, 2.0), draw(0.0, 3.0), draw(0.0, 3.0));
        let expect: f64 = (0..d).map(|k| (ma[k] - mb[k]).powi(2) + (va[k].sqrt() - vb[k].sqrt()).powi(2)).sum();
        let got = fid(&diag_stats(ma, va), &diag_stats(mb, vb)).unwrap();
        prop_assert!((got - expect).abs() < 1e-8, "{got} vs {expect}");
    }

    #[test]
    fn fid_is_symmetric(seed in 0u64..100_000) {
        let a = FeatureStats::from_features(&features(12, 4, seed)).unwrap();
        let b = FeatureStats::from_features(&(features(15, 4, seed + 1) * 1.7)).unwrap();
        prop_assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn kid_matches_double_loop(seed in 0u64..100_000) {
        let x = features(5, 3, seed);
        let y = features(4, 3, seed + 1);
        prop_assert!((kid(&x, &y).unwrap() - kid_oracle(&x, &y)).abs() < 1e-9);
    }

    #[test]
    fn kid_self_and_permutation(seed in 0u64..100_000) {
        let x = features(6, 4, seed);
        let y = features(7, 4, seed + 1);
        prop_assert!(kid(&x, &x).unwrap() <= 0.0);
        let px = x.select(Axis(0), &[5, 3, 1, 0, 2, 4]);
        prop_assert!((kid(&x, &y).unwrap() - kid(&px, &y).unwrap()).abs() < 1e-10);
    }
}

#[test]
fn kid_is_unbiased_on_one_gaussian() {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut draw = |n: usize| Array2::from_shape_fn((n, 5), |_| normal.sample(&mut rng));
    let vals: Vec<f64> = (0..200).map(|_| kid(&draw(20), &draw(20)).unwrap()).collect();
    let mean = vals.iter().sum::<f64>() / 200.0;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 199.0).sqrt();
    assert!(mean.abs() < 3.0 * sd / 200f64.sqrt(), "mean {mean}, se {}", sd / 200f64.sqrt());
}

#[test]
fn metric_errors() {
    assert!(matches!(kid(&features(1, 3, 0), &features(4, 3, 1)), Err(Error::TooFewSamples(1))));
    assert!(matches!(kid(&features(3, 3, 0), &features(4, 2, 1)), Err(Error::DimensionMismatch(3, 2))));
    assert!(matches!(FeatureStats::from_features(&features(1, 3, 0)), Err(Error::TooFewSamples(1))));
    let a = diag_stats(vec![0.0, 0.0], vec![1.0, 1.0]);
    let b = diag_stats(vec![0.0], vec![1.0]);
    assert!(matches!(fid(&a, &b), Err(Error::DimensionMismatch(2, 1))));
    let bad = diag_stats(vec![0.0, 0.0], vec![1.0, -0.5]);
    assert!(matches!(fid(&a, &bad), Err(Error::NonPsdBeyondTolerance(_))));
    let k = kid_subsets(&features(10, 3, 0), &features(10, 3, 1), 5, 4, 0).unwrap();
    assert!(k.is_finite());
}

#[test]
fn ggd_recovers_known_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let normal = Normal::new(0.0, 1.5).unwrap();
    let g: Vec<f64> = (0..100_000).map(|_| normal.sample(&mut rng)).collect();
    let (shape, var) = fit_ggd(&g);
    assert!((shape - 2.0).abs() < 0.1, "{shape}");
    assert!((var - 2.25).abs() < 0.05);
    // Laplace: difference of two exponentials has shape 1.
    let exp = rand_distr::Exp::new(1.0).unwrap();
    let l: Vec<f64> = (0..100_000).map(|_| exp.sample(&mut rng) - exp.sample(&mut rng)).collect();
    assert!((fit_ggd(&l).0 - 1.0).abs() < 0.1);
    let (a, mu, lv, rv) = fit_aggd(&g);
    assert!((a - 2.0).abs() < 0.15 && mu.abs() < 0.05 && (lv - rv).abs() < 0.1);
}

fn synthetic_gray(d: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render_synthetic(d, 4, &mut rng, 64).grayscale()
}

#[test]
fn niqe_feature_layout_and_errors() {
    let g = synthetic_gray(0, 1);
    let f = niqe_patch_features(&g, 16).unwrap();
    assert_eq!(f.len(), 16);
    assert!(f.iter().all(|p| p.0.len() == NIQE_FEATURES && p.0.iter().all(|v| v.is_finite())));
    assert!(matches!(niqe_patch_features(&Array2::zeros((10, 10)), 16), Err(Error::ImageTooSmall(10, 10, 16))));
    let few: Vec<_> = (0..5).map(|s| synthetic_gray(0, s)).collect();
    assert!(matches!(niqe_fit(&few, 16, 0.5), Err(Error::CorpusTooSmall(_))));
    let flat = vec![Array2::<f32>::zeros((64, 64)); 10];
    assert!(matches!(niqe_fit(&flat, 16, 0.0), Err(Error::AllPatchesRejected)));
}

#[test]
fn niqe_matching_image_scores_zero() {
    let g = synthetic_gray(0, 7);
    let model = niqe_fit(&vec![g.clone(); 10], 16, 0.0).unwrap();
    assert_eq!(model.mean.len(), NIQE_FEATURES);
    let s = niqe_score(&g, &model).unwrap();
    assert!(s.abs() < 1e-6, "{s}");
}

#[test]
fn niqe_orders_noise_and_ignores_brightness() {
    let corpus: Vec<_> = (0..20).map(|s| synthetic_gray(0, 100 + s)).collect();
    let model = niqe_fit(&corpus, 16, 0.5).unwrap();
    let held_out = synthetic_gray(0, 999);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Array2::from_shape_fn((64, 64), |_| rng.random_range(-1.0f32..1.0));
    let clean = niqe_score(&held_out, &model).unwrap();
    let noisy = niqe_score(&noise, &model).unwrap();
    assert!(clean >= 0.0 && noisy > clean, "noise {noisy} vs clean {clean}");
    let brighter = niqe_score(&held_out.mapv(|v| v + 0.1), &model).unwrap();
    assert!((brighter - clean).abs() < 1e-4, "{brighter} vs {clean}");
}

fn img(seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::new(Array3::from_shape_fn((3, 64, 64), |_| rng.random_range(-1.0f32..1.0)))
}

#[test]
fn id_distance_cases() {
    let b = IdentityBackend::Fallback;
    let a = img(1);
    assert!(id_distance(&b, &a, &a).unwrap().abs() < 1e-6);
    let mean = a.data().mean().unwrap();
    let centred = a.map(|v| v - mean);
    let neg = centred.map(|v| -v);
    assert!((id_distance(&b, &centred, &neg).unwrap() - 2.0).abs() < 1e-6);
    assert!(matches!(id_distance(&IdentityBackend::Unregistered, &a, &a), Err(Error::NoBackendRegistered(_))));
}

#[test]
fn matrix_stats_match_pairwise_distances() {
    let b = IdentityBackend::Fallback;
    let contents = vec![img(1), img(2)];
    let styles = vec![img(3), img(4)];
    let grid = vec![vec![img(5), img(6)], vec![img(7), img(8)]];
    let st = matrix_stats(&b, &grid, &contents, &styles).unwrap();
    for j in 0..2 {
        let s = (id_distance(&b, &grid[0][j], &styles[0]).unwrap() + id_distance(&b, &grid[1][j], &styles[1]).unwrap()) / 2.0;
        let c = (id_distance(&b, &grid[0][j], &contents[j]).unwrap() + id_distance(&b, &grid[1][j], &contents[j]).unwrap()) / 2.0;
        assert!((st.id_style_per_column[j] - s).abs() < 1e-9);
        assert!((st.id_content_per_column[j] - c).abs() < 1e-9);
    }
    assert!((st.id_style - (st.id_style_per_column[0] + st.id_style_per_column[1]) / 2.0).abs() < 1e-12);

    let copy = vec![contents.clone(), contents.clone()];
    let st = matrix_stats(&b, &copy, &contents, &styles).unwrap();
    assert!(st.id_content.abs() < 1e-6 && st.id_content_per_column.iter().all(|v| v.abs() < 1e-6));
    assert!(matches!(matrix_stats(&b, &grid[..1], &contents, &styles), Err(Error::IncompleteGrid(_))));
}

#[test]
fn report_mean_row_and_csv() {
    let row = |d: &str, v: f64| EvalRow { domain: d.into(), fid: v, kid_x100: 2.0 * v, niqe: Some(3.0 * v), id_style: Some(0.5), id_content: Some(v / 10.0) };
    let r = EvalReport::from_rows(vec![row("a", 1.0), row("b", 2.0), row("c", 6.0)]).unwrap();
    assert!((r.mean.fid - 3.0).abs() < 1e-12 && (r.mean.niqe.unwrap() - 9.0).abs() < 1e-12);
    let csv = r.to_csv().unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "domain,fid,kid_x100,niqe,id_style,id_content");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("mean,"));
}
