mod common;

use nalgebra::DMatrix;
use ndnet::Tensor;
use proptest::prelude::*;
use unetlab::representation::{
    expected_abar, image_seed, participation_ratio, phi, phi_dataset, spatial_means, stability_curve,
    top_activating_images, SelectivityProfile,
};
use unetlab::seed::rng_for;
use unetlab::stats::{covariance, log_log_slope, pca_cumulative_variance, symmetric_eigen};
use unetlab::unet::{Block, Probe};

use rand::Rng;

#[test]
fn participation_ratio_reference_cases() {
    for d in [1, 2, 7, 64] {
        let mut one_hot = vec![0.0; d];
        one_hot[d / 2] = 3.0;
        assert!((participation_ratio(&one_hot).unwrap() - 1.0 / d as f64).abs() < 1e-15);
        assert!((participation_ratio(&vec![0.4; d]).unwrap() - 1.0).abs() < 1e-12);
    }
    assert!((participation_ratio(&[1.0, 1.0, 0.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
    assert!(participation_ratio(&[0.0, 0.0]).is_err());
    assert!(participation_ratio(&[1.0, -1.0]).is_err());
    assert!(participation_ratio(&[]).is_err());
}

#[test]
fn eigenvalues_agree_with_nalgebra() {
    let mut rng = rng_for(2, "test.eigen");
    for n in [2, 5, 10, 24] {
        let rows: Vec<Vec<f64>> = (0..3 * n)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let c = covariance(&rows).unwrap();
        let (values, vectors) = symmetric_eigen(&c).unwrap();
        let m = DMatrix::from_fn(n, n, |i, j| c[i][j]);
        let mut oracle: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        oracle.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in values.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8, "n={n}: {a} vs {b}");
        }
        for (lambda, v) in values.iter().zip(&vectors) {
            let mv = &m * nalgebra::DVector::from_column_slice(v);
            let resid = (0..n).map(|i| (mv[i] - lambda * v[i]).powi(2)).sum::<f64>().sqrt();
            assert!(resid < 1e-8);
        }
    }
}

#[test]
fn pca_of_a_rank_one_sample_is_complete_after_one_component() {
    let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
    let cum = pca_cumulative_variance(&rows).unwrap();
    assert!((cum[0] - 1.0).abs() < 1e-12);
    assert!(cum.windows(2).all(|w| w[1] >= w[0] - 1e-15));
}

#[test]
fn spatial_means_average_each_plane() {
    let map = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f32);
    let m = spatial_means(&map).unwrap();
    assert_eq!(m, vec![vec![1.5, 5.5, 9.5], vec![13.5, 17.5, 21.5]]);
}

#[test]
fn phi_standard_error_shrinks_as_inverse_root_of_draws() {
    let model = common::untrained_model();
    let x = &common::eval_data().images[0];
    let counts = [1usize, 4, 16, 64];
    let reps = 12;
    let mut spread = Vec::new();
    for &n in &counts {
        let phis: Vec<Vec<f64>> = (0..reps).map(|r| phi(&model, x, 0.2, n, 100 + r).unwrap().values).collect();
        let d = phis[0].len();
        let mut sd_sum = 0.0;
        for ch in 0..d {
            let col: Vec<f64> = phis.iter().map(|p| p[ch]).collect();
            let mean = col.iter().sum::<f64>() / reps as f64;
            sd_sum += (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        }
        spread.push(sd_sum / d as f64);
    }
    let xs: Vec<f64> = counts.iter().map(|&n| n as f64).collect();
    let slope = log_log_slope(&xs, &spread).unwrap();
    assert!((slope + 0.5).abs() < 0.15, "slope {slope}, spreads {spread:?}");
}

#[test]
fn phi_is_seeded_and_dataset_consistent() {
    let model = common::untrained_model();
    let data = common::eval_data().subset(&[0, 1, 2, 3]).unwrap();
    let all = phi_dataset(&model, &data, 0.2, 3, 7).unwrap();
    for (i, row) in all.iter().enumerate() {
        assert_eq!(row, &phi(&model, &data.images[i], 0.2, 3, image_seed(7, i)).unwrap().values);
    }
    assert_eq!(all[0].len(), 64);
    assert!(all.iter().flatten().all(|&v| v >= 0.0));
    assert_ne!(
        phi(&model, &data.images[0], 0.2, 3, 1).unwrap().values,
        phi(&model, &data.images[0], 0.2, 3, 2).unwrap().values
    );
}

#[test]
fn zero_noise_phi_is_the_clean_activation() {
    let model = common::untrained_model();
    let x = &common::eval_data().images[5];
    let a = phi(&model, x, 0.0, 4, 1).unwrap().values;
    let b = phi(&model, x, 0.0, 1, 2).unwrap().values;
    assert!(common::max_abs_diff(&a, &b) < 1e-6);
}

#[test]
fn stability_is_one_at_the_reference_level() {
    let model = common::untrained_model();
    let x = &common::eval_data().images[2];
    let curve = stability_curve(&model, x, 0.2, &[0.2, 0.5, 1.0], 4, Probe::middle_output(), 3).unwrap();
    assert!((curve[0] - 1.0).abs() < 1e-9);
    assert!(curve.iter().all(|c| (0.0..=1.0).contains(c)));
}

#[test]
fn probes_share_one_pass() {
    let model = common::untrained_model();
    let x = &common::eval_data().images[3];
    let probes = [Probe::input(Block::Middle), Probe::middle_output()];
    let both = expected_abar(&model, x, 0.1, 2, 4, &probes).unwrap();
    let single = expected_abar(&model, x, 0.1, 2, 4, &probes[1..]).unwrap();
    assert_eq!(both[1], single[0]);
    assert_eq!(both[0].len(), 32);
}

#[test]
fn selectivity_flags_and_ranking() {
    // Channel 0 fires on one image, channel 1 on all, channel 2 never.
    let phis = vec![vec![0.0, 1.0, 0.0], vec![5.0, 1.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 1.2, 0.0]];
    let p = SelectivityProfile::from_phis(phis).unwrap();
    assert!(p.is_selective(0));
    assert!(!p.is_selective(1));
    assert!(!p.is_selective(2));
    assert_eq!(p.dead_channels(), 1);
    assert!((p.pr[0].unwrap() - 0.25).abs() < 1e-12);
    assert_eq!(top_activating_images(&p, 1, 2).unwrap(), vec![3, 0]);
    assert_eq!(top_activating_images(&p, 0, 1).unwrap(), vec![1]);
    assert!(top_activating_images(&p, 0, 5).is_err());
    assert!(top_activating_images(&p, 3, 1).is_err());
}

proptest! {
    #[test]
    fn pr_is_bounded_and_scale_free(v in prop::collection::vec(0.0f64..10.0, 1..40), s in 0.01f64..100.0) {
        prop_assume!(v.iter().any(|&x| x > 0.0));
        let d = v.len() as f64;
        let pr = participation_ratio(&v).unwrap();
        prop_assert!(pr >= 1.0 / d - 1e-12 && pr <= 1.0 + 1e-12);
        let scaled: Vec<f64> = v.iter().map(|x| x * s).collect();
        prop_assert!((participation_ratio(&scaled).unwrap() - pr).abs() < 1e-9);
    }

    #[test]
    fn pr_ignores_order(mut v in prop::collection::vec(0.0f64..10.0, 2..20), k in 0usize..20) {
        prop_assume!(v.iter().any(|&x| x > 0.0));
        let pr = participation_ratio(&v).unwrap();
        let k = k % v.len();
        v.rotate_left(k);
        prop_assert!((participation_ratio(&v).unwrap() - pr).abs() < 1e-12);
    }

    #[test]
    fn pca_cumulative_ends_at_one(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 3..12)) {
        let c = covariance(&rows).unwrap();
        prop_assume!(c.iter().enumerate().any(|(i, r)| r[i] > 1e-9));
        let cum = pca_cumulative_variance(&rows).unwrap();
        prop_assert!((cum[cum.len() - 1] - 1.0).abs() < 1e-9);
        prop_assert!(cum.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }
}
