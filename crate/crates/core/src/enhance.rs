//! Image enhancement transforms: CLAHE, Gaussian smoothing, quantile
//! capping, non-local means denoising and FFT low-pass filtering.
//!
//! Every transform is a pure function of its input. Intermediate math is done
//! in `f64`; results are rounded to 8 bits once, at the end.

use std::fmt;
use std::str::FromStr;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{clamp_u8, lerp, FloatImage, ImageBuffer};

#[derive(Debug, Error, PartialEq)]
pub enum EnhanceError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("configuration error: {0}")]
    Configuration(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    None,
    Clahe,
    Gaussian,
    QuantileCap,
    Nlm,
    FftLowpass,
}

impl Method {
    /// In the order results are tabulated.
    pub const ALL: [Method; 6] =
        [Method::None, Method::Clahe, Method::Nlm, Method::QuantileCap, Method::FftLowpass, Method::Gaussian];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Clahe => "clahe",
            Method::Gaussian => "gaussian",
            Method::QuantileCap => "quantile_cap",
            Method::Nlm => "nlm",
            Method::FftLowpass => "fft_lowpass",
        }
    }

    /// Row label used in the comparison table.
    pub fn table_label(self) -> &'static str {
        match self {
            Method::None => "NO-PRE",
            Method::Clahe => "CLAHE",
            Method::Nlm => "DENOISING",
            Method::QuantileCap => "QUANTILE CAP",
            Method::FftLowpass => "FFT-Normal",
            Method::Gaussian => "GAUSSIAN Smoothing",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = EnhanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| EnhanceError::Configuration(format!("unknown enhancement method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhanceConfig {
    pub method: Method,
    pub clahe_clip: f64,
    pub clahe_grid: usize,
    pub gaussian_sigma: f64,
    pub gaussian_ksize: usize,
    pub q_low: f64,
    pub q_high: f64,
    pub nlm_h: f64,
    pub nlm_patch: usize,
    pub nlm_window: usize,
    pub fft_cutoff_frac: f64,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            method: Method::None,
            clahe_clip: 2.0,
            clahe_grid: 8,
            gaussian_sigma: 1.0,
            gaussian_ksize: 5,
            q_low: 0.01,
            q_high: 0.99,
            nlm_h: 10.0,
            nlm_patch: 7,
            nlm_window: 21,
            fft_cutoff_frac: 0.12,
        }
    }
}

impl EnhanceConfig {
    pub fn with_method(method: Method) -> Self {
        Self { method, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), EnhanceError> {
        let bad = |m: String| Err(EnhanceError::Configuration(m));
        if self.gaussian_ksize.is_multiple_of(2)
            || self.nlm_patch.is_multiple_of(2)
            || self.nlm_window.is_multiple_of(2)
        {
            return bad("kernel, patch and window sizes must be odd".into());
        }
        if !(0.0 <= self.q_low && self.q_low < self.q_high && self.q_high <= 1.0) {
            return bad(format!("need 0 <= q_low < q_high <= 1, got {} / {}", self.q_low, self.q_high));
        }
        if !(self.fft_cutoff_frac > 0.0 && self.fft_cutoff_frac <= 1.0) {
            return bad(format!("fft_cutoff_frac must be in (0, 1], got {}", self.fft_cutoff_frac));
        }
        if !(self.clahe_clip > 0.0) || self.clahe_grid == 0 {
            return bad("clahe clip must be positive and grid at least 1".into());
        }
        if !(self.gaussian_sigma > 0.0) || !(self.nlm_h > 0.0) {
            return bad("gaussian sigma and nlm h must be positive".into());
        }
        if self.nlm_window < self.nlm_patch {
            return bad("nlm window must not be smaller than the patch".into());
        }
        Ok(())
    }
}

/// Runs the configured transform; `Method::None` returns the input unchanged.
pub fn apply(img: &ImageBuffer, cfg: &EnhanceConfig) -> Result<ImageBuffer, EnhanceError> {
    cfg.validate()?;
    match cfg.method {
        Method::None => Ok(img.clone()),
        Method::Clahe => clahe(img, cfg.clahe_clip, cfg.clahe_grid),
        Method::Gaussian => gaussian_smooth(img, cfg.gaussian_sigma, cfg.gaussian_ksize),
        Method::QuantileCap => quantile_cap(img, cfg.q_low, cfg.q_high),
        Method::Nlm => nlm_denoise(img, cfg.nlm_h, cfg.nlm_patch, cfg.nlm_window),
        Method::FftLowpass => fft_lowpass(img, cfg.fft_cutoff_frac),
    }
}

/// Symmetric border extension (`d c b a | a b c d | d c b a`), valid for any
/// offset.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

// ---------------------------------------------------------------------------
// CLAHE

fn rgb_to_ycbcr(p: &[u8]) -> [f64; 3] {
    let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    [y, 128.0 + (b - y) * 0.564, 128.0 + (r - y) * 0.713]
}

fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> [u8; 3] {
    let r = y + 1.403 * (cr - 128.0);
    let b = y + 1.773 * (cb - 128.0);
    let g = (y - 0.299 * r - 0.114 * b) / 0.587;
    [clamp_u8(r), clamp_u8(g), clamp_u8(b)]
}

/// Contrast-limited adaptive histogram equalization of the luminance.
///
/// The image is split into `grid` x `grid` tiles. Each tile histogram is
/// clipped at `clip * tile_pixels / 256` and the clipped excess is spread
/// evenly over all 256 bins. Per-pixel output blends the mappings of the four
/// nearest tile centers bilinearly. Colour images are equalized on Y of
/// YCbCr and converted back.
pub fn clahe(img: &ImageBuffer, clip: f64, grid: usize) -> Result<ImageBuffer, EnhanceError> {
    if grid == 0 || grid > img.width() || grid > img.height() {
        return Err(EnhanceError::Parameter(format!(
            "grid {grid} does not fit a {}x{} image",
            img.width(),
            img.height()
        )));
    }
    if !(clip > 0.0) {
        return Err(EnhanceError::Parameter(format!("clip must be positive, got {clip}")));
    }
    if img.channels() == 1 {
        let lum: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
        let out = clahe_plane(&lum, img.width(), img.height(), clip, grid);
        return Ok(ImageBuffer::new(img.width(), img.height(), 1, out.iter().map(|&v| clamp_u8(v)).collect())
            .expect("same shape"));
    }
    let ycc: Vec<[f64; 3]> = img.data().chunks_exact(3).map(rgb_to_ycbcr).collect();
    let lum: Vec<f64> = ycc.iter().map(|p| clamp_u8(p[0]) as f64).collect();
    let eq = clahe_plane(&lum, img.width(), img.height(), clip, grid);
    let data = ycc.iter().zip(&eq).flat_map(|(p, &y)| ycbcr_to_rgb(clamp_u8(y) as f64, p[1], p[2])).collect();
    Ok(ImageBuffer::new(img.width(), img.height(), 3, data).expect("same shape"))
}

fn tile_bounds(len: usize, grid: usize) -> Vec<(usize, usize)> {
    (0..grid).map(|i| (i * len / grid, (i + 1) * len / grid)).collect()
}

/// Maps a coordinate to the two tiles whose centers bracket it and the blend weight.
fn bracket(pos: usize, centers: &[f64]) -> (usize, usize, f64) {
    let p = pos as f64;
    let last = centers.len() - 1;
    if p <= centers[0] {
        return (0, 0, 0.0);
    }
    if p >= centers[last] {
        return (last, last, 0.0);
    }
    let i = centers.iter().rposition(|&c| c <= p).expect("p is above the first center");
    let t = (p - centers[i]) / (centers[i + 1] - centers[i]);
    (i, i + 1, t)
}

fn clahe_plane(lum: &[f64], w: usize, h: usize, clip: f64, grid: usize) -> Vec<f64> {
    let xs = tile_bounds(w, grid);
    let ys = tile_bounds(h, grid);
    // maps[ty][tx][v], unrounded
    let mut maps = vec![vec![[0.0f64; 256]; grid]; grid];
    for (ty, &(y0, y1)) in ys.iter().enumerate() {
        for (tx, &(x0, x1)) in xs.iter().enumerate() {
            let mut hist = [0.0f64; 256];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[lum[y * w + x] as usize] += 1.0;
                }
            }
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let limit = clip * n / 256.0;
            let mut excess = 0.0;
            for b in hist.iter_mut() {
                if *b > limit {
                    excess += *b - limit;
                    *b = limit;
                }
            }
            let share = excess / 256.0;
            let mut cdf = 0.0;
            for (v, b) in hist.iter().enumerate() {
                cdf += b + share;
                maps[ty][tx][v] = 255.0 * cdf / n;
            }
        }
    }
    let cx: Vec<f64> = xs.iter().map(|&(a, b)| (a + b - 1) as f64 / 2.0).collect();
    let cy: Vec<f64> = ys.iter().map(|&(a, b)| (a + b - 1) as f64 / 2.0).collect();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let (r0, r1, ty) = bracket(y, &cy);
        for x in 0..w {
            let (c0, c1, tx) = bracket(x, &cx);
            let v = lum[y * w + x] as usize;
            let top = lerp(maps[r0][c0][v], maps[r0][c1][v], tx);
            let bottom = lerp(maps[r1][c0][v], maps[r1][c1][v], tx);
            out[y * w + x] = lerp(top, bottom, ty);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Gaussian smoothing

/// Normalized 1-D Gaussian taps; the 2-D kernel is their outer product.
pub fn gaussian_kernel_1d(sigma: f64, ksize: usize) -> Vec<f64> {
    let r = (ksize / 2) as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Per-channel Gaussian convolution with symmetric borders (separable).
pub fn gaussian_smooth(img: &ImageBuffer, sigma: f64, ksize: usize) -> Result<ImageBuffer, EnhanceError> {
    Ok(gaussian_smooth_f(&img.to_float(), sigma, ksize)?.to_u8())
}

pub fn gaussian_smooth_f(img: &FloatImage, sigma: f64, ksize: usize) -> Result<FloatImage, EnhanceError> {
    if !(sigma > 0.0) {
        return Err(EnhanceError::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    if ksize.is_multiple_of(2) {
        return Err(EnhanceError::Parameter(format!("kernel size must be odd, got {ksize}")));
    }
    let k = gaussian_kernel_1d(sigma, ksize);
    let r = (ksize / 2) as isize;
    let (w, h, ch) = (img.width, img.height, img.channels);
    let mut rows = FloatImage::zeros(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let sx = reflect_index(x as isize + i as isize - r, w);
                    acc += kv * img.get(sx, y, c);
                }
                rows.data[(y * w + x) * ch + c] = acc;
            }
        }
    }
    let mut out = FloatImage::zeros(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let sy = reflect_index(y as isize + i as isize - r, h);
                    acc += kv * rows.get(x, sy, c);
                }
                out.data[(y * w + x) * ch + c] = acc;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Quantile capping

/// Nearest-rank quantile of a sorted slice: the `ceil(q * n)`-th smallest
/// value (1-based), with rank 0 mapped to the minimum.
pub fn nearest_rank(sorted: &[u8], q: f64) -> u8 {
    let n = sorted.len();
    let rank = ((q * n as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Clamps each channel to its `[q_low, q_high]` nearest-rank quantiles and
/// stretches the result to `[0, 255]`. Constant channels pass through.
pub fn quantile_cap(img: &ImageBuffer, q_low: f64, q_high: f64) -> Result<ImageBuffer, EnhanceError> {
    if !(0.0 <= q_low && q_low < q_high && q_high <= 1.0) {
        return Err(EnhanceError::Parameter(format!("need 0 <= q_low < q_high <= 1, got {q_low} / {q_high}")));
    }
    let mut out = img.clone();
    for c in 0..img.channels() {
        let values = img.channel(c);
        let mut sorted = values.clone();
        sorted.sort_unstable();
        let lo = nearest_rank(&sorted, q_low) as f64;
        let hi = nearest_rank(&sorted, q_high) as f64;
        if lo == hi {
            continue;
        }
        let mapped: Vec<u8> =
            values.iter().map(|&v| clamp_u8(((v as f64).clamp(lo, hi) - lo) * 255.0 / (hi - lo))).collect();
        out.set_channel(c, &mapped);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Non-local means

/// Noise standard deviation from the median absolute deviation of the
/// 4-neighbour Laplacian response (whose noise variance is 20 sigma^2).
pub fn estimate_noise_sigma(plane: &[f64], w: usize, h: usize) -> f64 {
    let at = |x: isize, y: isize| plane[reflect_index(y, h) * w + reflect_index(x, w)];
    let mut lap: Vec<f64> = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            lap.push(at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1) - 4.0 * at(x, y));
        }
    }
    let med = median(&mut lap.clone());
    let mut dev: Vec<f64> = lap.iter().map(|v| (v - med).abs()).collect();
    1.4826 * median(&mut dev) / 20f64.sqrt()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Non-local means with weights `exp(-max(0, d2 - 2 sigma^2) / h^2)`, where
/// `d2` is the mean squared difference of `patch` x `patch` neighbourhoods
/// and candidates range over a `window` x `window` search area. Channels are
/// processed independently.
pub fn nlm_denoise(img: &ImageBuffer, h: f64, patch: usize, window: usize) -> Result<ImageBuffer, EnhanceError> {
    if window < patch {
        return Err(EnhanceError::Parameter(format!("window {window} is smaller than patch {patch}")));
    }
    if patch.is_multiple_of(2) || window.is_multiple_of(2) {
        return Err(EnhanceError::Parameter("patch and window must be odd".into()));
    }
    if !(h > 0.0) {
        return Err(EnhanceError::Parameter(format!("h must be positive, got {h}")));
    }
    let mut out = img.clone();
    for c in 0..img.channels() {
        let plane: Vec<f64> = img.channel(c).iter().map(|&v| v as f64).collect();
        let den = nlm_plane(&plane, img.width(), img.height(), h, patch, window);
        out.set_channel(c, &den.iter().map(|&v| clamp_u8(v)).collect::<Vec<_>>());
    }
    Ok(out)
}

fn nlm_plane(plane: &[f64], w: usize, h: usize, filter_h: f64, patch: usize, window: usize) -> Vec<f64> {
    let sigma = estimate_noise_sigma(plane, w, h);
    let two_sigma2 = 2.0 * sigma * sigma;
    let h2 = filter_h * filter_h;
    let pr = (patch / 2) as isize;
    let wr = (window / 2) as isize;
    let area = (patch * patch) as f64;

    // padded copy covering every patch pixel of every candidate
    let pad = pr + wr;
    let pw = w + 2 * pad as usize;
    let ph = h + 2 * pad as usize;
    let mut padded = vec![0.0; pw * ph];
    for y in 0..ph {
        for x in 0..pw {
            let sx = reflect_index(x as isize - pad, w);
            let sy = reflect_index(y as isize - pad, h);
            padded[y * pw + x] = plane[sy * w + sx];
        }
    }
    let pv = |x: isize, y: isize| padded[(y + pad) as usize * pw + (x + pad) as usize];

    // difference images are evaluated over the patch-extended domain
    let dw = w + 2 * pr as usize;
    let dh = h + 2 * pr as usize;
    let mut integral = vec![0.0; (dw + 1) * (dh + 1)];
    let mut weight_sum = vec![0.0; w * h];
    let mut value_sum = vec![0.0; w * h];
    for dy in -wr..=wr {
        for dx in -wr..=wr {
            for y in 0..dh {
                let mut row = 0.0;
                for x in 0..dw {
                    let (ox, oy) = (x as isize - pr, y as isize - pr);
                    let d = pv(ox, oy) - pv(ox + dx, oy + dy);
                    row += d * d;
                    integral[(y + 1) * (dw + 1) + x + 1] = integral[y * (dw + 1) + x + 1] + row;
                }
            }
            for y in 0..h {
                for x in 0..w {
                    // patch centered at (x, y) spans [x, x + patch) in difference coordinates
                    let (x0, y0, x1, y1) = (x, y, x + patch, y + patch);
                    let s = integral[y1 * (dw + 1) + x1] - integral[y0 * (dw + 1) + x1] - integral[y1 * (dw + 1) + x0]
                        + integral[y0 * (dw + 1) + x0];
                    let d2 = s / area;
                    let wgt = (-(d2 - two_sigma2).max(0.0) / h2).exp();
                    let i = y * w + x;
                    weight_sum[i] += wgt;
                    value_sum[i] += wgt * pv(x as isize + dx, y as isize + dy);
                }
            }
        }
    }
    value_sum.iter().zip(&weight_sum).map(|(v, wt)| v / wt).collect()
}

// ---------------------------------------------------------------------------
// FFT filtering

/// In-place 2-D DFT of a row-major `w` x `h` buffer. The inverse is scaled by
/// `1 / (w h)`.
pub fn fft2d(buf: &mut [Complex<f64>], w: usize, h: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    if inverse {
        let scale = 1.0 / (w * h) as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }
}

/// Gaussian low-pass transfer function in unshifted DFT layout; distances are
/// measured from the DC bin with wrap-around, so `H(0, 0) = 1`.
pub fn lowpass_mask(w: usize, h: usize, cutoff_frac: f64) -> Vec<f64> {
    let d0 = cutoff_frac * w.min(h) as f64;
    let mut mask = Vec::with_capacity(w * h);
    for v in 0..h {
        let dv = v.min(h - v) as f64;
        for u in 0..w {
            let du = u.min(w - u) as f64;
            mask.push((-(du * du + dv * dv) / (2.0 * d0 * d0)).exp());
        }
    }
    mask
}

/// Filters each channel through `mask` (or passes the spectrum through
/// untouched when `None`), returning unquantized real parts.
pub fn fft_filter_f(img: &FloatImage, mask: Option<&[f64]>) -> FloatImage {
    let (w, h, ch) = (img.width, img.height, img.channels);
    let mut out = FloatImage::zeros(w, h, ch);
    let mut buf = vec![Complex::new(0.0, 0.0); w * h];
    for c in 0..ch {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(img.data[i * ch + c], 0.0);
        }
        fft2d(&mut buf, w, h, false);
        if let Some(m) = mask {
            for (b, &g) in buf.iter_mut().zip(m) {
                *b *= g;
            }
        }
        fft2d(&mut buf, w, h, true);
        for (i, b) in buf.iter().enumerate() {
            out.data[i * ch + c] = b.re;
        }
    }
    out
}

/// Gaussian low-pass with `D0 = cutoff_frac * min(w, h)`.
pub fn fft_lowpass(img: &ImageBuffer, cutoff_frac: f64) -> Result<ImageBuffer, EnhanceError> {
    if !(cutoff_frac > 0.0 && cutoff_frac <= 1.0) {
        return Err(EnhanceError::Parameter(format!("cutoff fraction must be in (0, 1], got {cutoff_frac}")));
    }
    let mask = lowpass_mask(img.width(), img.height(), cutoff_frac);
    Ok(fft_filter_f(&img.to_float(), Some(&mask)).to_u8())
}
