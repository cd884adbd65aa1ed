//! Pixel rasters, grayscale conversion, per-channel histograms and the two
//! histogram comparison measures used by the frame cleaner.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default number of bins per channel for frame histograms.
pub const DEFAULT_BINS: usize = 64;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("invalid image shape: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("png i/o failed for {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// Row-major, channel-interleaved 8-bit raster with 1 or 3 channels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::Shape(format!("{width}x{height} has a zero dimension")));
        }
        if channels != 1 && channels != 3 {
            return Err(ImagingError::Shape(format!("{channels} channels (expected 1 or 3)")));
        }
        if data.len() != width * height * channels {
            return Err(ImagingError::Shape(format!("data length {} != {width}x{height}x{channels}", data.len())));
        }
        Ok(Self { width, height, channels, data })
    }

    /// Image filled with one pixel value; `value.len()` is the channel count.
    pub fn filled(width: usize, height: usize, value: &[u8]) -> Result<Self, ImagingError> {
        let data = value.iter().copied().cycle().take(width * height * value.len()).collect();
        Self::new(width, height, value.len(), data)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> u8,
    ) -> Result<Self, ImagingError> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Values of channel `c` in row-major order.
    pub fn channel(&self, c: usize) -> Vec<u8> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    /// Replaces channel `c` with `values` (row-major, one per pixel).
    pub fn set_channel(&mut self, c: usize, values: &[u8]) {
        assert_eq!(values.len(), self.pixel_count());
        for (dst, &v) in self.data.iter_mut().skip(c).step_by(self.channels).zip(values) {
            *dst = v;
        }
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn to_float(&self) -> FloatImage {
        FloatImage {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, ImagingError> {
        let path = path.as_ref();
        let io_err = |source| ImagingError::Io { path: path.display().to_string(), source };
        let img = image::ImageReader::open(path)
            .map_err(|e| io_err(image::ImageError::IoError(e)))?
            .decode()
            .map_err(io_err)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img.color().channel_count() {
            1 | 2 => Self::new(w, h, 1, img.into_luma8().into_raw()),
            _ => Self::new(w, h, 3, img.into_rgb8().into_raw()),
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImagingError> {
        let path = path.as_ref();
        let color = if self.channels == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|source| ImagingError::Io { path: path.display().to_string(), source })
    }

    /// PNG encoding into memory.
    pub fn encode_png(&self) -> Vec<u8> {
        use image::ImageEncoder;
        let mut out = Vec::new();
        let color = if self.channels == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(&self.data, self.width as u32, self.height as u32, color)
            .expect("in-memory png encoding of a valid buffer");
        out
    }
}

/// Real-valued raster used between enhancement stages and for normalized
/// model input.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Rounds to the nearest integer and clamps into `[0, 255]`.
    pub fn to_u8(&self) -> ImageBuffer {
        let data = self.data.iter().map(|&v| clamp_u8(v)).collect();
        ImageBuffer { width: self.width, height: self.height, channels: self.channels, data }
    }
}

#[inline]
pub fn clamp_u8(v: f64) -> u8 {
    if v.is_nan() {
        0
    } else {
        v.round().clamp(0.0, 255.0) as u8
    }
}

/// BT.601 luma. Single-channel input is returned unchanged.
pub fn to_grayscale(img: &ImageBuffer) -> ImageBuffer {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| clamp_u8(0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64))
        .collect();
    ImageBuffer { width: img.width, height: img.height, channels: 1, data }
}

/// Mean grayscale intensity in `[0, 255]`.
pub fn mean_intensity(img: &ImageBuffer) -> f64 {
    let gray = to_grayscale(img);
    let sum: u64 = gray.data.iter().map(|&v| v as u64).sum();
    sum as f64 / gray.data.len() as f64
}

/// Probability-normalized histograms, one per channel.
///
/// Histograms computed from images also keep their integer bin counts, so
/// comparisons between two such histograms of equally sized images are
/// evaluated on exact integer sums: an image compared with itself scores an
/// intersection of exactly `channels` and a distance of exactly 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelHistograms {
    bins: usize,
    hist: Vec<Vec<f64>>,
    #[serde(skip)]
    counts: Option<Counts>,
}

#[derive(Debug, Clone, PartialEq)]
struct Counts {
    per_channel: Vec<Vec<u64>>,
    total: u64,
}

impl ChannelHistograms {
    /// Builds from raw per-channel vectors. Each must have `bins` entries and
    /// sum to one.
    pub fn from_raw(hist: Vec<Vec<f64>>) -> Result<Self, ImagingError> {
        let bins = hist.first().map(Vec::len).unwrap_or(0);
        if bins == 0 || hist.iter().any(|h| h.len() != bins) {
            return Err(ImagingError::Parameter("ragged or empty histogram".into()));
        }
        Ok(Self { bins, hist, counts: None })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn channels(&self) -> usize {
        self.hist.len()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.hist[c]
    }

    fn check_compatible(&self, other: &Self) -> Result<(), ImagingError> {
        if self.bins != other.bins || self.hist.len() != other.hist.len() {
            return Err(ImagingError::Parameter(format!(
                "histogram shapes differ: {}x{} vs {}x{}",
                self.hist.len(),
                self.bins,
                other.hist.len(),
                other.bins
            )));
        }
        Ok(())
    }

    /// Integer counts of both sides when they come from equally sized images.
    fn shared_counts<'a>(&'a self, other: &'a Self) -> Option<(&'a Counts, &'a Counts)> {
        match (&self.counts, &other.counts) {
            (Some(a), Some(b)) if a.total == b.total => Some((a, b)),
            _ => None,
        }
    }
}

/// Bin `b` collects intensities in `[b*256/bins, (b+1)*256/bins)`.
pub fn compute_histogram(img: &ImageBuffer, bins: usize) -> Result<ChannelHistograms, ImagingError> {
    if !(1..=256).contains(&bins) {
        return Err(ImagingError::Parameter(format!("bins must be in 1..=256, got {bins}")));
    }
    let mut counts = vec![vec![0u64; bins]; img.channels];
    for px in img.data.chunks_exact(img.channels) {
        for (c, &v) in px.iter().enumerate() {
            counts[c][v as usize * bins / 256] += 1;
        }
    }
    let total = img.pixel_count() as u64;
    let n = total as f64;
    let hist = counts.iter().map(|ch| ch.iter().map(|&k| k as f64 / n).collect()).collect();
    Ok(ChannelHistograms { bins, hist, counts: Some(Counts { per_channel: counts, total }) })
}

/// Sum over channels of per-bin minima; in `[0, channels]`.
pub fn hist_intersection(a: &ChannelHistograms, b: &ChannelHistograms) -> Result<f64, ImagingError> {
    a.check_compatible(b)?;
    if let Some((ca, cb)) = a.shared_counts(b) {
        let n = ca.total as f64;
        return Ok(ca
            .per_channel
            .iter()
            .zip(&cb.per_channel)
            .map(|(ha, hb)| ha.iter().zip(hb).map(|(&p, &q)| p.min(q)).sum::<u64>() as f64 / n)
            .sum());
    }
    Ok(a.hist.iter().zip(&b.hist).map(|(ha, hb)| ha.iter().zip(hb).map(|(&p, &q)| p.min(q)).sum::<f64>()).sum())
}

/// Channel-averaged Bhattacharyya distance `sqrt(1 - sum sqrt(p q))`; in `[0, 1]`.
pub fn hist_bhattacharyya(a: &ChannelHistograms, b: &ChannelHistograms) -> Result<f64, ImagingError> {
    a.check_compatible(b)?;
    let coefficients: Vec<f64> = match a.shared_counts(b) {
        Some((ca, cb)) => {
            let n = ca.total as f64;
            ca.per_channel
                .iter()
                .zip(&cb.per_channel)
                .map(|(ha, hb)| ha.iter().zip(hb).map(|(&p, &q)| ((p * q) as f64).sqrt()).sum::<f64>() / n)
                .collect()
        }
        None => {
            a.hist.iter().zip(&b.hist).map(|(ha, hb)| ha.iter().zip(hb).map(|(&p, &q)| (p * q).sqrt()).sum()).collect()
        }
    };
    let total: f64 = coefficients.iter().map(|&bc| (1.0 - bc).max(0.0).sqrt()).sum();
    Ok(total / a.hist.len() as f64)
}

/// Bilinear resize of every channel to `width` x `height` (pixel-center aligned).
pub fn resize_bilinear(img: &FloatImage, width: usize, height: usize) -> FloatImage {
    let mut out = FloatImage::zeros(width, height, img.channels);
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / height as f64;
    for y in 0..height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let ty = fy - y0 as f64;
        for x in 0..width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let tx = fx - x0 as f64;
            for c in 0..img.channels {
                let top = lerp(img.get(x0, y0, c), img.get(x1, y0, c), tx);
                let bottom = lerp(img.get(x0, y1, c), img.get(x1, y1, c), tx);
                out.data[(y * width + x) * img.channels + c] = lerp(top, bottom, ty);
            }
        }
    }
    out
}

/// Linear interpolation that returns `a` exactly when `a == b`.
#[inline]
pub fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}
