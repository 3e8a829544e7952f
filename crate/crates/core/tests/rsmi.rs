mod common;

use common::*;
use rand::seq::SliceRandom;
use rand::Rng;
use ssrc_core::gradcheck;
use ssrc_core::rsmi::{self, PixelPairSample, RsmiParams};
use ssrc_core::{Graph, Tensor};

fn pixels(r: &mut impl Rng, n: usize) -> Mat {
    (0..n).map(|_| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect()).collect()
}

fn estimate(u: &Mat, v: &Mat, seed: u64) -> f64 {
    let sample = PixelPairSample::new(u, v, &mut rng(seed)).unwrap();
    rsmi::estimate_pairs(&sample, &RsmiParams::default()).unwrap().1
}

#[test]
fn independent_pixels_score_near_zero_and_copies_score_higher() {
    let (mut indep, mut copy) = (Vec::new(), Vec::new());
    for seed in 0..20 {
        let mut r = rng(seed);
        let u = pixels(&mut r, 500);
        let v = pixels(&mut r, 500);
        indep.push(estimate(&u, &v, 1000 + seed));
        copy.push(estimate(&u, &u, 1000 + seed));
    }
    let mean = indep.iter().sum::<f64>() / 20.0;
    eprintln!("independent mean {mean:.4}, per seed {indep:.3?}");
    eprintln!("copy {copy:.3?}");
    assert!(mean.abs() <= 0.05);
    let wins = indep.iter().zip(&copy).filter(|(i, c)| *c - *i > 0.1).count();
    assert!(wins >= 19, "{wins} of 20");
}

#[test]
fn equal_sample_sets_fit_a_unit_ratio() {
    let mut r = rng(2);
    let p: Mat = (0..200).map(|_| (0..6).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    // the median width is too narrow to represent a constant at the
    // corners of the 6-cube; twice that width does
    let sigma = 2.0 * rsmi::median_heuristic(&p);
    let m = rsmi::fit_ratio(&p, &p, 0.1, sigma, RsmiParams::default().ridge, 100).unwrap();
    let worst = p.iter().map(|x| (m.ratio(x) - 1.0).abs()).fold(0.0, f64::max);
    eprintln!("worst |g - 1| = {worst}");
    assert!(worst < 0.1);
}

#[test]
fn fitted_coefficients_satisfy_the_normal_equations() {
    let mut r = rng(3);
    let u = pixels(&mut r, 150);
    let v: Mat = u.iter().map(|x| x.iter().map(|c| 0.5 * c + 0.1 * r.gen_range(-1.0..1.0)).collect()).collect();
    let s = PixelPairSample::new(&u, &v, &mut r).unwrap();
    let (m, _) = rsmi::estimate_pairs(&s, &RsmiParams::default()).unwrap();
    let (mut h, hv) = rsmi::normal_equations(&s.joint, &s.product, &m.centers, m.sigma, m.alpha);
    let b = m.theta.len();
    for l in 0..b {
        h[l * b + l] += m.ridge;
    }
    let norm = hv.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(rsmi::residual_norm(&h, &m.theta, &hv) < 1e-8 * norm);
}

#[test]
fn estimate_ignores_sample_order() {
    let mut r = rng(4);
    let u = pixels(&mut r, 120);
    let v: Mat = u.iter().map(|x| x.iter().map(|c| -c).collect()).collect();
    let s = PixelPairSample::new(&u, &v, &mut r).unwrap();
    let (m, d) = rsmi::estimate_pairs(&s, &RsmiParams::default()).unwrap();
    let mut order: Vec<usize> = (0..120).collect();
    order.shuffle(&mut r);
    let p: Mat = order.iter().map(|&i| s.joint[i].clone()).collect();
    let again = rsmi::rsmi_estimate(&m, &p, &s.product);
    assert!((d - again).abs() < 1e-12);
}

#[test]
fn shuffle_records_fixed_points() {
    let mut r = rng(5);
    let u = pixels(&mut r, 50);
    let s = PixelPairSample::new(&u, &u, &mut r).unwrap();
    let fixed = s.permutation.iter().enumerate().filter(|(i, p)| i == *p).count();
    assert_eq!(s.fixed_points, fixed);
    assert_eq!(s.joint.len(), s.product.len());
    let mut sorted = s.permutation.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());
}

fn scc_value(x: &Tensor, y: &Tensor, seed: u64) -> f64 {
    let mut g = Graph::new();
    let yv = g.constant(y.clone());
    let l = rsmi::scc_loss(&mut g, x, yv, &RsmiParams::default(), &mut rng(seed)).unwrap();
    g.value(l).item().unwrap()
}

#[test]
fn identity_output_scores_better_than_noise() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let x = random_image(&mut r, 16, 16);
        let noise = random_image(&mut r, 16, 16);
        assert!(scc_value(&x, &x, seed) <= scc_value(&x, &noise, seed));
    }
}

#[test]
fn loss_falls_along_noise_to_input_path() {
    let mut r = rng(6);
    let mut curve = vec![0.0; 11];
    for seed in 0..20 {
        let x = random_image(&mut r, 16, 16);
        let noise = random_image(&mut r, 16, 16);
        for (k, c) in curve.iter_mut().enumerate() {
            let t = k as f64 / 10.0;
            let data = x.data().iter().zip(noise.data()).map(|(a, b)| t * a + (1.0 - t) * b).collect();
            let y = Tensor::new(x.shape().to_vec(), data).unwrap();
            *c += scc_value(&x, &y, 500 + seed) / 20.0;
        }
    }
    let falls = curve.windows(2).filter(|w| w[1] < w[0]).count();
    eprintln!("{curve:.4?}");
    assert!(falls >= 8, "{falls} of 10");
}

#[test]
fn frozen_ratio_gradient_matches_finite_differences() {
    let params = RsmiParams { samples: 24, centers: 12, ..RsmiParams::default() };
    for seed in 0..10 {
        let mut r = rng(seed);
        let x = random_image(&mut r, 6, 6);
        let y = random_image(&mut r, 6, 6);
        let frozen = FrozenScc::fit(&x, &y, &params, seed);
        let rep = gradcheck::check(&[y], 1e-6, |g, v| frozen.loss(g, v[0])).unwrap();
        assert!(rep.max_relative_error() < 1e-4, "seed {seed}: {}", rep.max_relative_error());
    }
}
