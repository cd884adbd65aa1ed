use eusml_core::enhance::{self, fft2d, EnhanceConfig, Method};
use eusml_core::imaging::{clamp_u8, FloatImage, ImageBuffer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;

fn random_image(w: usize, h: usize, ch: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBuffer::from_fn(w, h, ch, |_, _, _| rng.random()).unwrap()
}

/// Direct 2-D convolution with the full k x k kernel, symmetric borders.
fn dense_gaussian(img: &ImageBuffer, sigma: f64, ksize: usize) -> ImageBuffer {
    let r = (ksize / 2) as isize;
    let mut kernel = vec![0.0; ksize * ksize];
    for dy in -r..=r {
        for dx in -r..=r {
            kernel[((dy + r) * ksize as isize + dx + r) as usize] =
                (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = kernel.iter().sum();
    let mirror = |i: isize, n: usize| -> usize {
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n as isize {
                i = 2 * n as isize - i - 1;
            } else {
                return i as usize;
            }
        }
    };
    ImageBuffer::from_fn(img.width(), img.height(), img.channels(), |x, y, c| {
        let mut acc = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let sx = mirror(x as isize + dx, img.width());
                let sy = mirror(y as isize + dy, img.height());
                acc += kernel[((dy + r) * ksize as isize + dx + r) as usize] * img.get(sx, sy, c) as f64;
            }
        }
        clamp_u8(acc / total)
    })
    .unwrap()
}

fn variance(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    v.map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

#[test]
fn gaussian_matches_dense_convolution() {
    for seed in 0..4 {
        let img = random_image(64, 64, 1 + 2 * (seed as usize % 2), seed);
        let fast = enhance::gaussian_smooth(&img, 1.0, 5).unwrap();
        let slow = dense_gaussian(&img, 1.0, 5);
        let max_diff = fast.data().iter().zip(slow.data()).map(|(&a, &b)| (a as i32 - b as i32).abs()).max();
        assert!(max_diff.unwrap() <= 1);
        let vin = variance(img.data().iter().map(|&v| v as f64));
        let vout = variance(fast.data().iter().map(|&v| v as f64));
        assert!(vout < vin);
    }
    let img = random_image(9, 7, 1, 11);
    let fast = enhance::gaussian_smooth(&img, 2.0, 11).unwrap();
    let slow = dense_gaussian(&img, 2.0, 11);
    assert!(fast.data().iter().zip(slow.data()).all(|(&a, &b)| (a as i32 - b as i32).abs() <= 1));
}

/// Textbook global equalization: `round(255 * cdf(v) / N)` in exact integers.
fn global_he(img: &ImageBuffer) -> ImageBuffer {
    let mut hist = [0u64; 256];
    for &v in img.data() {
        hist[v as usize] += 1;
    }
    let n = img.data().len() as u64;
    let mut lut = [0u8; 256];
    let mut cdf = 0u64;
    for v in 0..256 {
        cdf += hist[v];
        lut[v] = ((2 * 255 * cdf + n) / (2 * n)) as u8;
    }
    ImageBuffer::new(img.width(), img.height(), 1, img.data().iter().map(|&v| lut[v as usize]).collect()).unwrap()
}

#[test]
fn clahe_single_tile_without_clip_is_global_equalization() {
    for seed in 0..6 {
        let w = 17 + seed as usize * 9;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo: u8 = rng.random_range(0..100);
        let img = ImageBuffer::from_fn(w, 31, 1, |_, _, _| lo + rng.random_range(0..120u8)).unwrap();
        assert_eq!(enhance::clahe(&img, f64::INFINITY, 1).unwrap(), global_he(&img), "seed {seed}");
    }
}

fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>()
        / a.data().len() as f64;
    10.0 * (255.0f64 * 255.0 / mse).log10()
}

#[test]
fn nlm_reduces_noise_and_improves_psnr() {
    let clean = ImageBuffer::filled(64, 64, &[128]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, 20.0).unwrap();
    let noisy = ImageBuffer::from_fn(64, 64, 1, |_, _, _| clamp_u8(128.0 + noise.sample(&mut rng))).unwrap();
    let den = enhance::nlm_denoise(&noisy, 10.0, 7, 21).unwrap();
    let vin = variance(noisy.data().iter().map(|&v| v as f64));
    let vout = variance(den.data().iter().map(|&v| v as f64));
    assert!(vout <= 0.5 * vin, "variance {vin} -> {vout}");
    assert!(psnr(&den, &clean) > psnr(&noisy, &clean));
}

#[test]
fn nlm_noise_estimate_tracks_sigma() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = Normal::new(0.0, 15.0).unwrap();
    let plane: Vec<f64> = (0..128 * 128).map(|_| 100.0 + noise.sample(&mut rng)).collect();
    let est = enhance::estimate_noise_sigma(&plane, 128, 128);
    assert!((est - 15.0).abs() < 1.5, "{est}");
}

/// Naive O(N^2) DFT for checking the FFT path.
fn naive_dft(data: &[f64], w: usize, h: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::new(0.0, 0.0); w * h];
    for v in 0..h {
        for u in 0..w {
            let mut acc = Complex::new(0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let ang = -2.0 * std::f64::consts::PI * ((u * x) as f64 / w as f64 + (v * y) as f64 / h as f64);
                    acc += Complex::from_polar(data[y * w + x], ang);
                }
            }
            out[v * w + u] = acc;
        }
    }
    out
}

#[test]
fn fft_matches_naive_dft() {
    let img = random_image(6, 5, 1, 3);
    let data: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let mut buf: Vec<Complex<f64>> = data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2d(&mut buf, 6, 5, false);
    for (a, b) in buf.iter().zip(naive_dft(&data, 6, 5)) {
        assert!((a - b).norm() < 1e-9);
    }
}

#[test]
fn fft_roundtrip_up_to_128() {
    for (w, h) in [(128, 128), (100, 64), (33, 17)] {
        let img = random_image(w, h, 1, (w * h) as u64).to_float();
        let back = enhance::fft_filter_f(&img, None);
        let err = img.data.iter().zip(&back.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{w}x{h}: {err}");
    }
}

fn band_energy(img: &FloatImage, u: usize) -> f64 {
    let (w, h) = (img.width, img.height);
    let mean = img.data.iter().sum::<f64>() / img.data.len() as f64;
    let mut buf: Vec<Complex<f64>> = img.data.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    fft2d(&mut buf, w, h, false);
    // the sinusoid lives at (+-u, 0); take a 3-bin neighbourhood on both sides
    let mut e = 0.0;
    for du in [u - 1, u, u + 1, w - u - 1, w - u, w - u + 1] {
        e += buf[du].norm_sqr();
    }
    e
}

#[test]
fn fft_lowpass_suppresses_high_frequency_sinusoid() {
    let (w, h) = (64, 64);
    // 3/4 of Nyquist = 0.375 cycles/pixel = bin 24
    let u = 24;
    let img = ImageBuffer::from_fn(w, h, 1, |x, _, _| {
        clamp_u8(128.0 + 40.0 * (2.0 * std::f64::consts::PI * u as f64 * x as f64 / w as f64).cos())
    })
    .unwrap();
    let out = enhance::fft_lowpass(&img, 0.12).unwrap();
    let before = band_energy(&img.to_float(), u);
    let after = band_energy(&out.to_float(), u);
    assert!(after <= 0.1 * before, "{before} -> {after}");
    let mean_in = img.data().iter().map(|&v| v as f64).sum::<f64>() / 4096.0;
    let mean_out = out.data().iter().map(|&v| v as f64).sum::<f64>() / 4096.0;
    assert!((mean_in - mean_out).abs() < 0.5);
}

#[test]
fn dispatch_equals_direct_for_every_method() {
    let img = random_image(48, 40, 3, 77);
    let d = EnhanceConfig::default();
    for m in Method::ALL {
        let via = enhance::apply(&img, &EnhanceConfig::with_method(m)).unwrap();
        let direct = match m {
            Method::None => img.clone(),
            Method::Clahe => enhance::clahe(&img, d.clahe_clip, d.clahe_grid).unwrap(),
            Method::Gaussian => enhance::gaussian_smooth(&img, d.gaussian_sigma, d.gaussian_ksize).unwrap(),
            Method::QuantileCap => enhance::quantile_cap(&img, d.q_low, d.q_high).unwrap(),
            Method::Nlm => enhance::nlm_denoise(&img, d.nlm_h, d.nlm_patch, d.nlm_window).unwrap(),
            Method::FftLowpass => enhance::fft_lowpass(&img, d.fft_cutoff_frac).unwrap(),
        };
        assert_eq!(via, direct, "{m}");
        assert!(via.same_shape(&img));
    }
}
