use std::f64::consts::PI;

use mtinet::spectral::{dft2d_oracle, fft2d, high_pass, ifft2d, spectral_preprocess, ComplexImage, HighPassSpec};
use mtinet::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[h, w], (0..h * w).map(|_| r.gen_range(-100.0..100.0)).collect()).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Column stripes `cos(2π f x / w)`.
fn stripes(h: usize, w: usize, f: usize) -> Tensor {
    let v = (0..h * w)
        .map(|i| (2.0 * PI * f as f64 * (i % w) as f64 / w as f64).cos())
        .collect();
    Tensor::new(&[h, w], v).unwrap()
}

#[test]
fn constant_image_concentrates_in_dc() {
    let s = fft2d(&Tensor::filled(&[8, 8], 2.5)).unwrap();
    assert!((s.re()[0] - 64.0 * 2.5).abs() < 1e-9);
    assert!(s.re()[1..].iter().chain(s.im()).all(|v| v.abs() < 1e-9));
}

#[test]
fn oracle_small_cases() {
    let one = dft2d_oracle(&Tensor::new(&[1, 1], vec![4.2]).unwrap()).unwrap();
    assert_eq!((one.re(), one.im()), (&[4.2][..], &[0.0][..]));
    let imp = dft2d_oracle(&Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    assert!(imp.re().iter().all(|v| (v - 1.0).abs() < 1e-15));
    assert!(imp.im().iter().all(|v| v.abs() < 1e-15));
    assert!(dft2d_oracle(&Tensor::zeros(&[64, 2])).is_err());
}

#[test]
fn oracle_is_linear() {
    let x = random_image(8, 16, 1);
    let y = random_image(8, 16, 2);
    let (a, b) = (0.7, -1.3);
    let combo: Vec<f64> = x.values().iter().zip(y.values()).map(|(p, q)| a * p + b * q).collect();
    let lhs = dft2d_oracle(&Tensor::new(&[8, 16], combo).unwrap()).unwrap();
    let (sx, sy) = (dft2d_oracle(&x).unwrap(), dft2d_oracle(&y).unwrap());
    let rhs_re: Vec<f64> = sx.re().iter().zip(sy.re()).map(|(p, q)| a * p + b * q).collect();
    let rhs_im: Vec<f64> = sx.im().iter().zip(sy.im()).map(|(p, q)| a * p + b * q).collect();
    let scale = lhs.re().iter().chain(lhs.im()).fold(1.0f64, |m, v| m.max(v.abs()));
    assert!(max_diff(lhs.re(), &rhs_re) / scale < 1e-12);
    assert!(max_diff(lhs.im(), &rhs_im) / scale < 1e-12);
}

#[test]
fn fft_matches_oracle_on_16() {
    let x = random_image(16, 16, 3);
    let (f, o) = (fft2d(&x).unwrap(), dft2d_oracle(&x).unwrap());
    assert!(max_diff(f.re(), o.re()) <= 1e-9);
    assert!(max_diff(f.im(), o.im()) <= 1e-9);
}

#[test]
fn non_power_of_two_is_a_config_error() {
    assert!(matches!(fft2d(&Tensor::zeros(&[12, 16])), Err(Error::Config(_))));
}

#[test]
fn zero_cutoff_removes_only_dc() {
    let spec = HighPassSpec::new(0.0).unwrap();
    let x = random_image(8, 8, 4);
    let s = fft2d(&x).unwrap();
    let f = high_pass(&s, spec);
    assert_eq!((f.re()[0], f.im()[0]), (0.0, 0.0));
    assert_eq!(&f.re()[1..], &s.re()[1..]);
    let c = spectral_preprocess(&Tensor::filled(&[8, 8], 9.0), spec).unwrap();
    assert!(c.values().iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn stripes_pass_only_above_the_cutoff() {
    let (h, w) = (16, 16);
    for f in 1..=8 {
        let x = stripes(h, w, f);
        // The oracle places all energy at the two bins (0, ±f).
        let o = dft2d_oracle(&x).unwrap();
        for (i, v) in o.re().iter().enumerate() {
            let on = i == f || i == (w - f) % w;
            if !on {
                assert!(v.abs() < 1e-9, "f {f}: stray energy at bin {i}");
            }
        }
        for ratio in [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 0.999] {
            let out = spectral_preprocess(&x, HighPassSpec::new(ratio).unwrap()).unwrap();
            let radius = ratio * 8.0;
            let want: Vec<f64> = if f as f64 > radius { x.values().to_vec() } else { vec![0.0; h * w] };
            assert!(max_diff(out.values(), &want) < 1e-9, "f {f} ratio {ratio}");
        }
    }
}

#[test]
fn checkerboard_over_constant_is_recovered() {
    let (h, w) = (16, 16);
    let board: Vec<f64> = (0..h * w).map(|i| if (i / w + i % w) % 2 == 0 { 30.0 } else { -30.0 }).collect();
    let x: Vec<f64> = board.iter().map(|b| 100.0 + b).collect();
    let out = spectral_preprocess(&Tensor::new(&[h, w], x).unwrap(), HighPassSpec::default()).unwrap();
    assert!(max_diff(out.values(), &board) < 1e-9);
}

#[test]
fn high_pass_never_adds_energy() {
    for seed in 0..20 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let re: Vec<f64> = (0..64).map(|_| r.gen_range(-5.0..5.0)).collect();
        let im: Vec<f64> = (0..64).map(|_| r.gen_range(-5.0..5.0)).collect();
        let s = ComplexImage::new(8, 8, re, im).unwrap();
        let f = high_pass(&s, HighPassSpec::new(r.gen_range(0.0..0.99)).unwrap());
        assert!(f.energy() <= s.energy());
    }
}

#[test]
fn cutoff_must_lie_in_unit_interval() {
    assert!(HighPassSpec::new(1.0).is_err());
    assert!(HighPassSpec::new(-0.1).is_err());
    assert!(HighPassSpec::new(0.999).is_ok());
}

fn pow2() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![1usize, 2, 4, 8, 16, 32, 64])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn inverse_undoes_forward(h in pow2(), w in pow2(), seed in any::<u64>()) {
        let x = random_image(h, w, seed);
        let back = ifft2d(&fft2d(&x).unwrap()).unwrap();
        prop_assert!(max_diff(back.re(), x.values()) <= 1e-9);
        prop_assert!(back.im().iter().all(|v| v.abs() <= 1e-9));
    }

    #[test]
    fn parseval(h in pow2(), w in pow2(), seed in any::<u64>()) {
        let x = random_image(h, w, seed);
        let s = fft2d(&x).unwrap();
        let space: f64 = x.values().iter().map(|v| v * v).sum();
        let freq = s.energy() / (h * w) as f64;
        prop_assert!((space - freq).abs() <= 1e-9 * space.max(1.0));
    }

    #[test]
    fn forward_matches_oracle(
        h in prop::sample::select(vec![1usize, 2, 4, 8, 16, 32]),
        w in prop::sample::select(vec![1usize, 2, 4, 8, 16, 32]),
        seed in any::<u64>(),
    ) {
        let x = random_image(h, w, seed);
        let (f, o) = (fft2d(&x).unwrap(), dft2d_oracle(&x).unwrap());
        prop_assert!(max_diff(f.re(), o.re()) <= 1e-9);
        prop_assert!(max_diff(f.im(), o.im()) <= 1e-9);
    }

    #[test]
    fn preprocess_is_zero_mean_and_idempotent(
        h in prop::sample::select(vec![4usize, 8, 16, 32]),
        ratio in 0.0f64..0.99,
        seed in any::<u64>(),
    ) {
        let spec = HighPassSpec::new(ratio).unwrap();
        let x = random_image(h, h, seed);
        let once = spectral_preprocess(&x, spec).unwrap();
        let mean = once.values().iter().sum::<f64>() / once.numel() as f64;
        prop_assert!(mean.abs() <= 1e-9);
        let twice = spectral_preprocess(&once, spec).unwrap();
        prop_assert!(max_diff(once.values(), twice.values()) <= 1e-9);
    }
}
