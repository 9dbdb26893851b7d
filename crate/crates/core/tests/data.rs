use ndnet::Tensor;
use proptest::prelude::*;
use unetlab::data::{corrupt, gen_textures, sample_sigma, Dataset, SigmaRange, TextureClass};
use unetlab::imageio::{read_dataset, read_image, write_dataset, write_image, ImageFormat};
use unetlab::seed::rng_for;

#[test]
fn sigma_draws_follow_the_analytic_cdf() {
    let range = SigmaRange::default();
    let mut rng = rng_for(11, "test.sigma");
    let mut draws: Vec<f64> = (0..100_000).map(|_| sample_sigma(&range, &mut rng)).collect();
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    // Independent CDF: integrate the density sigma^(-1/2) from sigma_min.
    let cdf = |s: f64| (2.0 * s.sqrt() - 2.0 * 0.1) / (2.0 * 1.0 - 2.0 * 0.1);
    let ks = draws
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let f = cdf(s);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.01, "KS distance {ks}");
    assert!(draws[0] >= 0.01 && draws[draws.len() - 1] <= 1.0);
}

#[test]
fn median_sigma_is_0_3025() {
    let r = SigmaRange::default();
    assert!((r.inverse_cdf(0.5) - 0.3025).abs() < 1e-12);
    assert!((r.cdf(0.3025) - 0.5).abs() < 1e-12);
}

#[test]
fn mean_sigma_squared_matches_quadrature() {
    let r = SigmaRange::new(0.05, 0.8).unwrap();
    // Midpoint rule on the normalized density.
    let n = 200_000;
    let (a, b) = (r.sigma_min, r.sigma_max);
    let h = (b - a) / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        let s = a + (i as f64 + 0.5) * h;
        let w = s.powf(-0.5);
        num += s * s * w;
        den += w;
    }
    assert!((r.mean_sigma_sq() - num / den).abs() < 1e-7);
}

#[test]
fn corruption_noise_has_the_requested_scale() {
    let x = Tensor::full(&[1, 64, 64], 0.25);
    for sigma in [0.05, 0.3, 1.0] {
        let y = corrupt(&x, sigma, 5).unwrap();
        let d: Vec<f64> = y.data().iter().map(|&v| v as f64 - 0.25).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!((sd / sigma - 1.0).abs() < 0.03, "sigma {sigma}: sd {sd}");
        assert!(mean.abs() < 4.0 * sigma / 64.0);
    }
}

#[test]
fn corruption_is_reproducible_per_seed() {
    let x = Tensor::full(&[1, 8, 8], 0.5);
    assert_eq!(corrupt(&x, 0.2, 9).unwrap(), corrupt(&x, 0.2, 9).unwrap());
    assert_ne!(corrupt(&x, 0.2, 9).unwrap(), corrupt(&x, 0.2, 10).unwrap());
}

#[test]
fn textures_are_balanced_bounded_and_deterministic() {
    let a = gen_textures(64, 16, 1, &TextureClass::ALL, 4).unwrap();
    let b = gen_textures(64, 16, 1, &TextureClass::ALL, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.image_shape(), &[1, 16, 16]);
    let labels = a.labels.as_ref().unwrap();
    for k in 0..TextureClass::ALL.len() {
        assert_eq!(labels.iter().filter(|&&l| l == k).count(), 16);
    }
    for im in &a.images {
        assert!(im.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_ne!(a, gen_textures(64, 16, 1, &TextureClass::ALL, 5).unwrap());
}

#[test]
fn classes_differ_in_local_structure() {
    // Mean absolute horizontal difference: checkers are sharp, blobs smooth.
    let ds = gen_textures(256, 16, 1, &TextureClass::ALL, 2).unwrap();
    let labels = ds.labels.clone().unwrap();
    let roughness = |im: &Tensor| {
        let d = im.data();
        let mut s = 0.0;
        for y in 0..16 {
            for x in 0..15 {
                s += (d[y * 16 + x + 1] - d[y * 16 + x]).abs() as f64;
            }
        }
        s / (16.0 * 15.0)
    };
    let mut per_class = vec![Vec::new(); TextureClass::ALL.len()];
    for (im, &l) in ds.images.iter().zip(&labels) {
        per_class[l].push(roughness(im));
    }
    let means: Vec<f64> = per_class.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let checker = TextureClass::ALL.iter().position(|c| *c == TextureClass::Checker).unwrap();
    let blobs = TextureClass::ALL.iter().position(|c| *c == TextureClass::Blobs).unwrap();
    assert!(means[checker] > 2.0 * means[blobs], "{means:?}");
}

#[test]
fn image_files_round_trip_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let gray = Tensor::from_fn(&[1, 5, 7], |i| ((i * 37) % 100) as f32 / 99.0);
    let rgb = Tensor::from_fn(&[3, 4, 6], |i| ((i * 13) % 50) as f32 / 49.0);
    for (name, im) in [("g.png", &gray), ("g.pgm", &gray), ("c.png", &rgb), ("c.ppm", &rgb)] {
        let path = dir.path().join(name);
        write_image(&path, im).unwrap();
        let back = read_image(&path).unwrap().to_tensor();
        assert_eq!(back.shape(), im.shape());
        let worst = back
            .data()
            .iter()
            .zip(im.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6, "{name}: {worst}");
    }
}

#[test]
fn datasets_round_trip_through_a_folder() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_textures(12, 8, 1, &TextureClass::ALL, 6).unwrap();
    write_dataset(dir.path(), &ds, ImageFormat::Png).unwrap();
    let back: Dataset = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), ds.len());
    assert_eq!(back.labels, ds.labels);
    for (a, b) in back.images.iter().zip(&ds.images) {
        let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6);
    }
}

proptest! {
    #[test]
    fn inverse_cdf_inverts_the_cdf(lo in 0.001f64..0.5, span in 0.01f64..5.0, u in 0.0f64..=1.0) {
        let r = SigmaRange::new(lo, lo + span).unwrap();
        let s = r.inverse_cdf(u);
        prop_assert!(s >= r.sigma_min * (1.0 - 1e-12) && s <= r.sigma_max * (1.0 + 1e-12));
        prop_assert!((r.cdf(s) - u).abs() < 1e-9);
    }

    #[test]
    fn inverse_cdf_is_monotone(u in 0.0f64..1.0, du in 0.0f64..1.0) {
        let r = SigmaRange::default();
        let v = (u + du).min(1.0);
        prop_assert!(r.inverse_cdf(u) <= r.inverse_cdf(v));
    }

    #[test]
    fn zero_noise_corruption_is_exact(seed in any::<u64>()) {
        let x = Tensor::from_fn(&[1, 4, 4], |i| i as f32 / 15.0);
        prop_assert_eq!(corrupt(&x, 0.0, seed).unwrap(), x);
    }
}
