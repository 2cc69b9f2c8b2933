use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use rat_core::gradcheck::check_op;
use rat_core::loss::{
    focal_region_loss, focal_region_loss_value, l1, l1_loss, region_weights, weighted_l1,
    weights_from_errors,
};
use rat_core::metrics::{gaussian_window, psnr, ssim, SSIM_K1, SSIM_K2};
use rat_core::region::RegionPartition;
use rat_core::{Graph, Tensor};

fn random_partition(h: usize, w: usize, l: usize, rng: &mut ChaCha8Rng) -> RegionPartition {
    use rand::Rng;
    let mut labels: Vec<u32> = (0..h * w).map(|_| rng.gen_range(0..l as u32)).collect();
    for (i, v) in labels.iter_mut().take(l).enumerate() {
        *v = i as u32;
    }
    RegionPartition::new(h, w, labels, l).unwrap()
}

fn case(seed: u64, h: usize, w: usize, l: usize) -> (Tensor<f32>, Tensor<f32>, RegionPartition) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = Tensor::rand_uniform(&[1, h, w], 0.0, 1.0, &mut rng);
    let t = Tensor::rand_uniform(&[1, h, w], 0.0, 1.0, &mut rng);
    (p, t, random_partition(h, w, l.min(h * w), &mut rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn zero_gamma_is_exactly_l1(seed in any::<u64>(), h in 1usize..12, w in 1usize..12, l in 1usize..6) {
        let (p, t, part) = case(seed, h, w, l);
        let plain = l1(&p, &t).unwrap();
        let focal = focal_region_loss_value(&p, &t, &part, 0.0, 1.0).unwrap().loss;
        prop_assert_eq!(plain.to_bits(), focal.to_bits());

        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let a = l1_loss(&mut g, pv, &t).unwrap();
        let (b, _) = focal_region_loss(&mut g, pv, &t, &part, 0.0, 1.0).unwrap();
        prop_assert_eq!(g.value(a).data()[0].to_bits(), g.value(b).data()[0].to_bits());
        prop_assert_eq!(g.value(a).data()[0] as f64, plain);
    }

    #[test]
    fn loss_grows_with_gamma(seed in any::<u64>(), g1 in 0.0f64..2.0, dg in 0.0f64..2.0, delta in 0.0f64..3.0) {
        let (p, t, part) = case(seed, 6, 7, 3);
        let lo = focal_region_loss_value(&p, &t, &part, g1, delta).unwrap().loss;
        let hi = focal_region_loss_value(&p, &t, &part, g1 + dg, delta).unwrap().loss;
        prop_assert!(hi >= lo);
    }

    #[test]
    fn weights_are_normalized_and_scale_free(
        errs in prop::collection::vec(0.0f64..1.0, 1..8),
        scale in 0.01f64..100.0,
        delta in 0.0f64..3.0,
    ) {
        let w = weights_from_errors(&errs, delta);
        prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
        if errs.iter().any(|&e| e > 0.0) {
            let max = w.iter().copied().fold(0.0, f64::max);
            prop_assert!((max - 1.0).abs() < 1e-12);
        }
        let scaled: Vec<f64> = errs.iter().map(|e| e * scale).collect();
        for (a, b) in w.iter().zip(weights_from_errors(&scaled, delta)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn equal_region_errors_give_unit_weights() {
    let part = RegionPartition::new(2, 2, vec![0, 0, 1, 1], 2).unwrap();
    let t = Tensor::<f64>::zeros(&[1, 2, 2]);
    let p = Tensor::<f64>::from_f64(&[1, 2, 2], &[0.3, -0.3, 0.3, 0.3]).unwrap();
    assert_eq!(region_weights(&p, &t, &part, 1.0).unwrap(), vec![1.0, 1.0]);
}

#[test]
fn gradient_with_frozen_weights_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..5 {
        let part = random_partition(5, 6, 3, &mut rng);
        let t = Tensor::<f64>::rand_uniform(&[1, 5, 6], 0.0, 1.0, &mut rng);
        // keep every residual away from the kink of |.|
        let p = t.map(|v| v + 0.3);
        let p = Tensor::new(
            p.shape(),
            p.data()
                .iter()
                .enumerate()
                .map(|(i, v)| if i % 2 == 0 { *v } else { v - 0.6 })
                .collect(),
        )
        .unwrap();
        let w = region_weights(&p, &t, &part, 1.0).unwrap();
        let err = check_op(&[p], seed, &|g, v| weighted_l1(g, v[0], &t, &part, &w, 0.7)).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn psnr_decreases_with_noise_level() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let clean = Tensor::<f64>::rand_uniform(&[1, 32, 32], 0.2, 0.8, &mut rng);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let z: Vec<f64> = (0..clean.numel())
        .map(|_| normal.sample(&mut rng))
        .collect();
    let mut last = f64::INFINITY;
    for sigma in [0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.4] {
        let noisy = Tensor::new(
            clean.shape(),
            clean
                .data()
                .iter()
                .zip(&z)
                .map(|(c, n)| c + sigma * n)
                .collect(),
        )
        .unwrap();
        let v = psnr(&noisy, &clean, 1.0).unwrap();
        assert!(v < last, "σ={sigma}: {v} !< {last}");
        last = v;
    }
}

#[test]
fn ssim_of_identical_images_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Tensor::<f32>::rand_uniform(&[1, 20, 17], 0.0, 1.0, &mut rng);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ssim_of_constant_images_is_luminance_term() {
    let a = Tensor::<f64>::full(&[1, 16, 16], 0.2);
    let b = Tensor::<f64>::full(&[1, 16, 16], 0.4);
    let c1 = SSIM_K1 * SSIM_K1;
    let expected = (2.0 * 0.2 * 0.4 + c1) / (0.2f64 * 0.2 + 0.4 * 0.4 + c1);
    let got = ssim(&a, &b).unwrap();
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
}

/// Direct 2-D weighted statistics per window position.
fn ssim_oracle(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_window(11, 1.5);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..=h - 11 {
        for c in 0..=w - 11 {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = g[i] * g[j];
                    let (a, b) = (x[(r + i) * w + c + j], y[(r + i) * w + c + j]);
                    mx += k * a;
                    my += k * b;
                    xx += k * a * a;
                    yy += k * b * b;
                    xy += k * a * b;
                }
            }
            let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn ssim_matches_direct_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (18, 15);
    let a = Tensor::<f64>::rand_uniform(&[1, h, w], 0.0, 1.0, &mut rng);
    let b = a.map(|v| (v * 0.8 + 0.1).clamp(0.0, 1.0));
    let noise = Tensor::<f64>::rand_uniform(&[1, h, w], -0.1, 0.1, &mut rng);
    let b = Tensor::new(
        b.shape(),
        b.data()
            .iter()
            .zip(noise.data())
            .map(|(x, n)| x + n)
            .collect(),
    )
    .unwrap();
    let got = ssim(&a, &b).unwrap();
    let want = ssim_oracle(a.data(), b.data(), h, w);
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert!(got < 1.0 && got > 0.0);
}
