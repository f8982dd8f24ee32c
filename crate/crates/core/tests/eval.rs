use msn_core::data::{gen_latent_dataset, SyntheticLatentSpec};
use msn_core::eval::*;
use msn_core::flow::Objective;
use msn_core::tensor::Tensor;
use msn_core::tokenizer::{Tokenizer, TokenizerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn stats(mean: Vec<f64>, cov: Matrix) -> GaussianStats {
    GaussianStats {
        mean,
        covariance: cov,
        count: 10,
    }
}

fn random_psd(d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let g: Vec<f64> = (0..d * d).map(|_| StandardNormal.sample(rng)).collect();
    let g = Matrix::new(d, g).unwrap();
    let gt = Matrix::new(d, (0..d * d).map(|k| g.get(k % d, k / d)).collect()).unwrap();
    let mut m = gt.matmul(&g).unwrap();
    m.symmetrize();
    m
}

#[test]
fn reconstruction_error_examples() {
    let z = Tensor::new([2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(reconstruction_error(&z, &z).unwrap(), 0.0);
    let zh = Tensor::new([2, 2], vec![0.0f32, 2.0, 3.0, 6.0]).unwrap();
    assert_eq!(reconstruction_error(&z, &zh).unwrap(), 1.25);
    assert!(reconstruction_error(&z, &Tensor::zeros([4])).is_err());
}

#[test]
fn reconstruction_error_matches_a_scalar_loop_and_ignores_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Vec<f32> = (0..60).map(|_| rng.random_range(-3.0..3.0)).collect();
    let b: Vec<f32> = (0..60).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut oracle = 0.0f64;
    for i in 0..60 {
        let d = a[i] as f64 - b[i] as f64;
        oracle += d * d;
    }
    oracle /= 60.0;
    let za = Tensor::new([3, 4, 5], a.clone()).unwrap();
    let zb = Tensor::new([3, 4, 5], b.clone()).unwrap();
    let got = reconstruction_error(&za, &zb).unwrap();
    assert!((got - oracle).abs() < 1e-12);

    // Permute whole samples consistently in both tensors.
    let perm = [2usize, 0, 1];
    let shuffle = |v: &[f32]| {
        perm.iter()
            .flat_map(|&p| v[p * 20..(p + 1) * 20].to_vec())
            .collect::<Vec<_>>()
    };
    let pa = Tensor::new([3, 4, 5], shuffle(&a)).unwrap();
    let pb = Tensor::new([3, 4, 5], shuffle(&b)).unwrap();
    assert!((reconstruction_error(&pa, &pb).unwrap() - got).abs() < 1e-12);
}

#[test]
fn gaussian_stats_examples() {
    let same = gaussian_stats(&[1.0, 2.0, 1.0, 2.0, 1.0, 2.0], 2).unwrap();
    assert_eq!(same.mean, vec![1.0, 2.0]);
    assert!(same.covariance.data.iter().all(|&c| c == 0.0));

    let two = gaussian_stats(&[0.0, 2.0], 1).unwrap();
    assert_eq!(two.mean, vec![1.0]);
    assert_eq!(two.covariance.data, vec![2.0]);

    assert!(gaussian_stats(&[1.0, 2.0], 2).is_err());
    assert!(gaussian_stats(&[1.0, 2.0, 3.0], 2).is_err());
}

#[test]
fn gaussian_stats_recover_sampling_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mu = [1.0, -2.0, 0.5];
    let sd = [1.0, 2.0, 0.5];
    let rows: Vec<f64> = (0..10_000)
        .flat_map(|_| {
            let e: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            (0..3).map(move |i| mu[i] + sd[i] * e[i])
        })
        .collect();
    let s = gaussian_stats(&rows, 3).unwrap();
    for i in 0..3 {
        assert!((s.mean[i] - mu[i]).abs() < 4.0 * sd[i] / 100.0, "mean {i}");
        let var = s.covariance.get(i, i);
        assert!((var / (sd[i] * sd[i]) - 1.0).abs() < 0.06, "var {i}: {var}");
        for j in 0..3 {
            if i != j {
                assert!(s.covariance.get(i, j).abs() < 0.06 * sd[i] * sd[j]);
            }
        }
    }
}

#[test]
fn psd_square_roots() {
    let id = matrix_sqrt_psd(&Matrix::identity(4)).unwrap();
    assert!(id.sqrt.max_abs_diff(&Matrix::identity(4)) < 1e-12);
    let d = matrix_sqrt_psd(&Matrix::diag(&[4.0, 9.0])).unwrap();
    assert!(d.sqrt.max_abs_diff(&Matrix::diag(&[2.0, 3.0])) < 1e-12);
    assert_eq!(d.clamped, 0);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let m = random_psd(5, &mut rng);
        let r = matrix_sqrt_psd(&m).unwrap();
        assert!(r.sqrt.matmul(&r.sqrt).unwrap().max_abs_diff(&m) < 1e-6);
        let na = nalgebra::DMatrix::from_row_slice(5, 5, &m.data);
        let eig = na.symmetric_eigen();
        let oracle = &eig.eigenvectors
            * nalgebra::DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()))
            * eig.eigenvectors.transpose();
        let ours = nalgebra::DMatrix::from_row_slice(5, 5, &r.sqrt.data);
        assert!((ours - oracle).abs().max() < 1e-8);
    }
    let skew = Matrix::new(2, vec![1.0, 0.5, 0.0, 1.0]).unwrap();
    assert!(matrix_sqrt_psd(&skew).is_err());
    let neg = matrix_sqrt_psd(&Matrix::diag(&[1.0, -1e-12])).unwrap();
    assert_eq!(neg.clamped, 1);
}

#[test]
fn symmetric_eigen_reconstructs_the_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = random_psd(6, &mut rng);
    let (values, vecs) = symmetric_eigen(&m);
    let lam = Matrix::diag(&values);
    let vt = Matrix::new(6, (0..36).map(|k| vecs.get(k % 6, k / 6)).collect()).unwrap();
    let back = vecs.matmul(&lam).unwrap().matmul(&vt).unwrap();
    assert!(back.max_abs_diff(&m) < 1e-9);
}

#[test]
fn frechet_distance_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cov = random_psd(4, &mut rng);
    let s = stats(vec![0.3, -1.0, 2.0, 0.0], cov.clone());
    assert!(frechet_distance(&s, &s).unwrap().distance < 1e-6);

    // N(0,1) vs N(1,2): 1 + 1 + 2 - 2·√2 = 4 - 2√2
    let a = stats(vec![0.0], Matrix::diag(&[1.0]));
    let b = stats(vec![1.0], Matrix::diag(&[2.0]));
    let fd = frechet_distance(&a, &b).unwrap().distance;
    assert!((fd - (4.0 - 2.0 * 2f64.sqrt())).abs() < 1e-12);
    // Same variance: only the squared mean shift remains.
    let c = stats(vec![2.0, 0.0], Matrix::identity(2));
    let e = stats(vec![0.0, 0.0], Matrix::identity(2));
    assert!((frechet_distance(&c, &e).unwrap().distance - 4.0).abs() < 1e-12);
    assert!(frechet_distance(&a, &c).is_err());
}

#[test]
fn frechet_distance_is_symmetric_and_translation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let m1: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let m2: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = stats(m1.clone(), random_psd(3, &mut rng));
        let b = stats(m2.clone(), random_psd(3, &mut rng));
        let ab = frechet_distance(&a, &b).unwrap().distance;
        let ba = frechet_distance(&b, &a).unwrap().distance;
        assert!((ab - ba).abs() < 1e-6 * ab.max(1.0), "{ab} {ba}");
        let shift = [5.0, -3.0, 1.0];
        let at = stats(
            m1.iter().zip(shift).map(|(m, s)| m + s).collect(),
            a.covariance.clone(),
        );
        let bt = stats(
            m2.iter().zip(shift).map(|(m, s)| m + s).collect(),
            b.covariance.clone(),
        );
        assert!((frechet_distance(&at, &bt).unwrap().distance - ab).abs() < 1e-9 * ab.max(1.0));
    }
}

#[test]
fn mean_pooling_averages_over_time() {
    let batch = Tensor::new(
        [2, 2, 3],
        vec![
            1.0f32, 2.0, 3.0, 3.0, 4.0, 5.0, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0,
        ],
    )
    .unwrap();
    assert_eq!(
        mean_pooled(&batch).unwrap(),
        vec![2.0, 3.0, 4.0, 1.0, 1.0, 1.0]
    );
    assert!(mean_pooled(&Tensor::zeros([2, 3])).is_err());
}

#[test]
fn comparison_report_has_one_row_per_cell() {
    let spec = SyntheticLatentSpec {
        seq_len: 16,
        dim: 8,
        seed: 3,
        ..Default::default()
    };
    let a = gen_latent_dataset(&spec, 1, 100).unwrap();
    let b = gen_latent_dataset(&spec, 1, 200).unwrap();
    let fm = Tokenizer::new(
        TokenizerConfig {
            objective: Objective::FlowMatching,
            ..TokenizerConfig::toy()
        },
        0,
    )
    .unwrap();
    let mse = Tokenizer::new(
        TokenizerConfig {
            objective: Objective::Mse,
            ..TokenizerConfig::toy()
        },
        0,
    )
    .unwrap();
    let report = compare_tokenizers(
        &[("a", &a), ("b", &b)],
        &[("fm", &fm), ("fm2", &fm), ("mse", &mse)],
        2,
        9,
    )
    .unwrap();
    assert_eq!(report.rows.len(), 2 * 3 * 3);
    for split in ["a", "b"] {
        for metric in ["recon_mse", "frechet", "frechet_clamped_eigs"] {
            assert_eq!(
                report.value(split, "fm", metric),
                report.value(split, "fm2", metric)
            );
            assert!(report.value(split, "mse", metric).unwrap().is_finite());
        }
    }
    let csv = report.to_csv();
    assert!(csv.starts_with("split,model,metric,value\n"));
    assert_eq!(csv.lines().count(), 19);
    let again = compare_tokenizers(
        &[("a", &a), ("b", &b)],
        &[("fm", &fm), ("fm2", &fm), ("mse", &mse)],
        2,
        9,
    )
    .unwrap();
    assert_eq!(again.to_csv(), csv);

    let tiny = gen_latent_dataset(
        &SyntheticLatentSpec {
            n_classes: 2,
            bimodal_class: None,
            ..spec
        },
        1,
        0,
    )
    .unwrap()
    .filter_class(0)
    .unwrap();
    assert!(compare_tokenizers(&[("t", &tiny)], &[("fm", &fm)], 2, 0).is_err());
}
