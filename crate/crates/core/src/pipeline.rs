//! Frame sampling and cleaning: drop GUI, pink and blackened frames, repair
//! frames carrying a green on-screen pointer.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{
    clamp_u8, compute_histogram, hist_bhattacharyya, hist_intersection, mean_intensity, ChannelHistograms, ImageBuffer,
    ImagingError, DEFAULT_BINS,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("timestamps must be strictly increasing: frame {index} at t={t} follows t={previous}")]
    NonMonotonic { index: usize, t: f64, previous: f64 },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("frame {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// A source item with its position in the source and its capture time.
#[derive(Debug, Clone, PartialEq)]
pub struct Timed<T> {
    pub index: usize,
    pub t: f64,
    pub item: T,
}

/// A frame kept by the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub procedure_id: String,
    /// Seconds from capture start.
    pub t: f64,
    pub image: ImageBuffer,
    pub source_index: usize,
}

const TICK_EPS: f64 = 1e-9;

/// Emits the first source item at or after each multiple of `1 / target_fps`
/// seconds. An item that covers several missed ticks is emitted once.
pub struct FrameSampler<I> {
    source: I,
    period: f64,
    next_tick: u64,
    previous: Option<f64>,
    failed: bool,
}

pub fn sample_frames<I, T>(source: I, target_fps: f64) -> Result<FrameSampler<I::IntoIter>, PipelineError>
where
    I: IntoIterator<Item = Result<Timed<T>, PipelineError>>,
{
    if !(target_fps > 0.0 && target_fps.is_finite()) {
        return Err(PipelineError::Parameter(format!("target_fps must be positive, got {target_fps}")));
    }
    Ok(FrameSampler {
        source: source.into_iter(),
        period: 1.0 / target_fps,
        next_tick: 0,
        previous: None,
        failed: false,
    })
}

impl<I, T> Iterator for FrameSampler<I>
where
    I: Iterator<Item = Result<Timed<T>, PipelineError>>,
{
    type Item = Result<Timed<T>, PipelineError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            let frame = match self.source.next()? {
                Ok(f) => f,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e));
                }
            };
            if let Some(previous) = self.previous {
                if !(frame.t > previous) {
                    self.failed = true;
                    return Some(Err(PipelineError::NonMonotonic { index: frame.index, t: frame.t, previous }));
                }
            } else if frame.t < 0.0 {
                self.failed = true;
                return Some(Err(PipelineError::Input(format!("negative timestamp {}", frame.t))));
            }
            self.previous = Some(frame.t);
            let tick_time = self.next_tick as f64 * self.period;
            if frame.t + TICK_EPS >= tick_time {
                // first tick strictly after this frame
                self.next_tick = ((frame.t + TICK_EPS) / self.period).floor() as u64 + 1;
                return Some(Ok(frame));
            }
        }
    }
}

/// Contents of a procedure's `meta.json`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FrameSourceMeta {
    pub fps: f64,
    #[serde(default)]
    pub capture_start: Option<String>,
}

/// A procedure directory laid out as `<procedure_id>/frames/%06d.png` plus
/// `<procedure_id>/meta.json`.
#[derive(Debug, Clone)]
pub struct FrameDir {
    pub procedure_id: String,
    pub meta: FrameSourceMeta,
    frames: Vec<(usize, PathBuf)>,
}

impl FrameDir {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let dir = dir.as_ref();
        let procedure_id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| PipelineError::Input(format!("{} has no usable directory name", dir.display())))?
            .to_string();
        let meta_path = dir.join("meta.json");
        let meta: FrameSourceMeta = read_json(&meta_path)?;
        if !(meta.fps > 0.0) {
            return Err(PipelineError::Input(format!("{}: fps must be positive", meta_path.display())));
        }
        let frames_dir = dir.join("frames");
        let entries = fs::read_dir(&frames_dir).map_err(|e| io_err(&frames_dir, e))?;
        let mut frames = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| io_err(&frames_dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let index = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| PipelineError::Input(format!("{} is not a numbered frame", path.display())))?;
            frames.push((index, path));
        }
        frames.sort();
        Ok(Self { procedure_id, meta, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame paths with timestamps `index / fps`; images are not decoded.
    pub fn entries(&self) -> impl Iterator<Item = Result<Timed<PathBuf>, PipelineError>> + '_ {
        let fps = self.meta.fps;
        self.frames
            .iter()
            .map(move |(index, path)| Ok(Timed { index: *index, t: *index as f64 / fps, item: path.clone() }))
    }

    /// Samples at `target_fps` and decodes only the kept frames.
    pub fn sampled(&self, target_fps: f64) -> Result<Vec<FrameSample>, PipelineError> {
        sample_frames(self.entries(), target_fps)?
            .map(|r| {
                let f = r?;
                Ok(FrameSample {
                    procedure_id: self.procedure_id.clone(),
                    t: f.t,
                    image: ImageBuffer::load_png(&f.item)?,
                    source_index: f.index,
                })
            })
            .collect()
    }
}

pub(crate) fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io { path: path.display().to_string(), message: e.to_string() }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Clean,
    Gui,
    Pink,
    Blackened,
    GreenPointer,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 5] =
        [NoiseKind::Clean, NoiseKind::Gui, NoiseKind::Pink, NoiseKind::Blackened, NoiseKind::GreenPointer];

    /// Whether frames of this kind are removed from the stream.
    pub fn is_dropped(self) -> bool {
        matches!(self, NoiseKind::Gui | NoiseKind::Pink | NoiseKind::Blackened)
    }
}

/// Measurements behind a verdict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseScores {
    pub intersection: f64,
    pub bhattacharyya: f64,
    pub mean_intensity: f64,
    /// Green pixels in components that survived the size filter (before dilation).
    pub pointer_pixels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseVerdict {
    pub kind: NoiseKind,
    pub scores: NoiseScores,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointerParams {
    pub min_green: u8,
    pub dominance_ratio: f64,
    pub min_component: usize,
    pub dilation: usize,
}

impl Default for PointerParams {
    fn default() -> Self {
        Self { min_green: 100, dominance_ratio: 1.4, min_component: 25, dilation: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleaningThresholds {
    pub pink_intersection_max: f64,
    pub pink_bhattacharyya_min: f64,
    pub gui_intersection_min: f64,
    pub gui_bhattacharyya_max: f64,
    pub black_mean_max: f64,
    #[serde(default)]
    pub pointer: PointerParams,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

impl Default for CleaningThresholds {
    fn default() -> Self {
        Self {
            pink_intersection_max: 1.031,
            pink_bhattacharyya_min: 0.95,
            gui_intersection_min: 1.42,
            gui_bhattacharyya_max: 0.18,
            black_mean_max: 12.0,
            pointer: PointerParams::default(),
            bins: DEFAULT_BINS,
        }
    }
}

impl CleaningThresholds {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let all = [
            self.pink_intersection_max,
            self.pink_bhattacharyya_min,
            self.gui_intersection_min,
            self.gui_bhattacharyya_max,
            self.black_mean_max,
            self.pointer.dominance_ratio,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(PipelineError::Configuration("thresholds must be finite".into()));
        }
        if self.pink_intersection_max >= self.gui_intersection_min {
            return Err(PipelineError::Configuration(
                "pink_intersection_max must be below gui_intersection_min".into(),
            ));
        }
        if !(1..=256).contains(&self.bins) {
            return Err(PipelineError::Configuration(format!("bins must be in 1..=256, got {}", self.bins)));
        }
        Ok(())
    }
}

/// The comparison image with its histogram computed once.
#[derive(Debug, Clone)]
pub struct Reference {
    image: ImageBuffer,
    hist: ChannelHistograms,
}

impl Reference {
    pub fn new(image: ImageBuffer, bins: usize) -> Result<Self, PipelineError> {
        let hist = compute_histogram(&image, bins)?;
        Ok(Self { image, hist })
    }

    pub fn image(&self) -> &ImageBuffer {
        &self.image
    }
}

/// Boolean raster matching an image's spatial size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Square (Chebyshev) dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let (w, h) = (self.width, self.height);
        // separable: rows then columns
        let mut rows = Mask::empty(w, h);
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius).min(w - 1);
                rows.set(x, y, (lo..=hi).any(|xx| self.get(xx, y)));
            }
        }
        let mut out = Mask::empty(w, h);
        for y in 0..h {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(h - 1);
            for x in 0..w {
                out.set(x, y, (lo..=hi).any(|yy| rows.get(x, yy)));
            }
        }
        out
    }

    /// Drops 8-connected components smaller than `min_size` pixels.
    pub fn remove_small_components(&self, min_size: usize) -> Mask {
        let (w, h) = (self.width, self.height);
        let mut seen = vec![false; w * h];
        let mut out = Mask::empty(w, h);
        let mut queue = VecDeque::new();
        let mut component = Vec::new();
        for start in 0..w * h {
            if !self.data[start] || seen[start] {
                continue;
            }
            component.clear();
            seen[start] = true;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                component.push(i);
                let (x, y) = ((i % w) as isize, (i / w) as isize);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                            continue;
                        }
                        let j = ny as usize * w + nx as usize;
                        if self.data[j] && !seen[j] {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
            if component.len() >= min_size {
                for &i in &component {
                    out.data[i] = true;
                }
            }
        }
        out
    }
}

fn green_pixels(img: &ImageBuffer, params: &PointerParams) -> Result<Mask, PipelineError> {
    if img.channels() != 3 {
        return Err(PipelineError::Parameter("green pointer detection needs a 3-channel image".into()));
    }
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| {
            let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
            p[1] >= params.min_green && g >= params.dominance_ratio * r && g >= params.dominance_ratio * b
        })
        .collect();
    Ok(Mask { width: img.width(), height: img.height(), data })
}

/// Green-dominant pixels in components of at least `min_component` pixels,
/// dilated by `dilation`.
pub fn detect_green_pointer(img: &ImageBuffer, params: &PointerParams) -> Result<Mask, PipelineError> {
    Ok(green_pixels(img, params)?.remove_small_components(params.min_component).dilate(params.dilation))
}

pub fn classify_noise(
    frame: &ImageBuffer,
    reference: &Reference,
    th: &CleaningThresholds,
) -> Result<NoiseVerdict, PipelineError> {
    if frame.channels() != reference.image.channels() {
        return Err(PipelineError::Configuration(format!(
            "frame has {} channels, reference has {}",
            frame.channels(),
            reference.image.channels()
        )));
    }
    let hist = compute_histogram(frame, reference.hist.bins())?;
    let intersection = hist_intersection(&hist, &reference.hist)?;
    let bhattacharyya = hist_bhattacharyya(&hist, &reference.hist)?;
    let mean = mean_intensity(frame);
    let pointer_pixels = if frame.channels() == 3 {
        green_pixels(frame, &th.pointer)?.remove_small_components(th.pointer.min_component).count()
    } else {
        0
    };
    let kind = if mean < th.black_mean_max {
        NoiseKind::Blackened
    } else if intersection <= th.pink_intersection_max && bhattacharyya >= th.pink_bhattacharyya_min {
        NoiseKind::Pink
    } else if intersection >= th.gui_intersection_min && bhattacharyya <= th.gui_bhattacharyya_max {
        NoiseKind::Gui
    } else if pointer_pixels >= th.pointer.min_component {
        NoiseKind::GreenPointer
    } else {
        NoiseKind::Clean
    };
    Ok(NoiseVerdict { kind, scores: NoiseScores { intersection, bhattacharyya, mean_intensity: mean, pointer_pixels } })
}

const INPAINT_TOLERANCE: f64 = 0.5;
const INPAINT_MAX_ITERS: usize = 500;

/// Fills masked pixels by neighbor diffusion: each masked pixel becomes the
/// mean of its in-bounds 4-neighbors, swept until the largest update is
/// below half an intensity level or 500 sweeps. Unmasked pixels are copied.
pub fn inpaint(img: &ImageBuffer, mask: &Mask) -> Result<ImageBuffer, PipelineError> {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    if mask.width != w || mask.height != h {
        return Err(PipelineError::Parameter(format!("mask is {}x{}, image is {w}x{h}", mask.width, mask.height)));
    }
    if mask.is_empty() {
        return Ok(img.clone());
    }
    if mask.data.iter().all(|&m| m) {
        return Err(PipelineError::Input("mask covers the entire image".into()));
    }
    let masked: Vec<usize> = (0..w * h).filter(|&i| mask.data[i]).collect();
    let mut out = img.clone();
    let mut field: Vec<f64> = vec![0.0; w * h];
    for c in 0..ch {
        for (i, v) in field.iter_mut().enumerate() {
            *v = img.data()[i * ch + c] as f64;
        }
        seed_from_scanlines(&mut field, mask, &masked);
        for _ in 0..INPAINT_MAX_ITERS {
            let mut max_change: f64 = 0.0;
            for &i in &masked {
                let (x, y) = (i % w, i / w);
                let mut sum = 0.0;
                let mut n = 0.0;
                if x > 0 {
                    sum += field[i - 1];
                    n += 1.0;
                }
                if x + 1 < w {
                    sum += field[i + 1];
                    n += 1.0;
                }
                if y > 0 {
                    sum += field[i - w];
                    n += 1.0;
                }
                if y + 1 < h {
                    sum += field[i + w];
                    n += 1.0;
                }
                let v = sum / n;
                max_change = max_change.max((v - field[i]).abs());
                field[i] = v;
            }
            if max_change < INPAINT_TOLERANCE {
                break;
            }
        }
        for &i in &masked {
            out.data_mut()[i * ch + c] = clamp_u8(field[i]);
        }
    }
    Ok(out)
}

/// Initial guess for masked pixels: average of the row-wise and column-wise
/// linear interpolation between the nearest unmasked pixels.
fn seed_from_scanlines(field: &mut [f64], mask: &Mask, masked: &[usize]) {
    let (w, h) = (mask.width, mask.height);
    let src = field.to_vec();
    for &i in masked {
        let (x, y) = (i % w, i / w);
        let mut estimates = Vec::with_capacity(2);
        let left = (0..x).rev().find(|&xx| !mask.get(xx, y));
        let right = (x + 1..w).find(|&xx| !mask.get(xx, y));
        if let Some(v) = interpolate(left, right, x, |xx| src[y * w + xx]) {
            estimates.push(v);
        }
        let up = (0..y).rev().find(|&yy| !mask.get(x, yy));
        let down = (y + 1..h).find(|&yy| !mask.get(x, yy));
        if let Some(v) = interpolate(up, down, y, |yy| src[yy * w + x]) {
            estimates.push(v);
        }
        field[i] = if estimates.is_empty() {
            let known: Vec<f64> = (0..w * h).filter(|&j| !mask.data[j]).map(|j| src[j]).collect();
            known.iter().sum::<f64>() / known.len() as f64
        } else {
            estimates.iter().sum::<f64>() / estimates.len() as f64
        };
    }
}

fn interpolate(lo: Option<usize>, hi: Option<usize>, at: usize, value: impl Fn(usize) -> f64) -> Option<f64> {
    match (lo, hi) {
        (Some(a), Some(b)) => {
            let t = (at - a) as f64 / (b - a) as f64;
            Some(value(a) + (value(b) - value(a)) * t)
        }
        (Some(a), None) => Some(value(a)),
        (None, Some(b)) => Some(value(b)),
        (None, None) => None,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub clean: usize,
    pub gui: usize,
    pub pink: usize,
    pub blackened: usize,
    pub green_pointer: usize,
}

impl VerdictCounts {
    pub fn add(&mut self, kind: NoiseKind) {
        *self.get_mut(kind) += 1;
    }

    fn get_mut(&mut self, kind: NoiseKind) -> &mut usize {
        match kind {
            NoiseKind::Clean => &mut self.clean,
            NoiseKind::Gui => &mut self.gui,
            NoiseKind::Pink => &mut self.pink,
            NoiseKind::Blackened => &mut self.blackened,
            NoiseKind::GreenPointer => &mut self.green_pointer,
        }
    }

    pub fn get(&self, kind: NoiseKind) -> usize {
        match kind {
            NoiseKind::Clean => self.clean,
            NoiseKind::Gui => self.gui,
            NoiseKind::Pink => self.pink,
            NoiseKind::Blackened => self.blackened,
            NoiseKind::GreenPointer => self.green_pointer,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub counts: VerdictCounts,
    pub frames_in: usize,
    pub frames_out: usize,
    /// Stream positions (0-based) of removed frames.
    pub dropped_indices: Vec<usize>,
}

impl CleaningReport {
    pub fn is_consistent(&self) -> bool {
        self.frames_in == self.frames_out + self.dropped_indices.len()
            && NoiseKind::ALL.iter().map(|&k| self.counts.get(k)).sum::<usize>() == self.frames_in
    }
}

/// Classifies every frame, drops GUI/pink/blackened frames and inpaints
/// green-pointer frames. Output order follows input order.
pub fn clean_stream(
    frames: Vec<FrameSample>,
    reference: &Reference,
    th: &CleaningThresholds,
) -> Result<(Vec<FrameSample>, CleaningReport), PipelineError> {
    th.validate()?;
    let process = |(index, frame): (usize, FrameSample)| -> Result<(NoiseKind, Option<FrameSample>), PipelineError> {
        let wrap = |e: PipelineError| PipelineError::Frame { index, source: Box::new(e) };
        let verdict = classify_noise(&frame.image, reference, th).map_err(wrap)?;
        let kept = match verdict.kind {
            k if k.is_dropped() => None,
            NoiseKind::GreenPointer => {
                let mask = detect_green_pointer(&frame.image, &th.pointer).map_err(wrap)?;
                let image = inpaint(&frame.image, &mask).map_err(wrap)?;
                Some(FrameSample { image, ..frame })
            }
            _ => Some(frame),
        };
        Ok((verdict.kind, kept))
    };

    #[cfg(feature = "parallel")]
    let results: Vec<_> = {
        use rayon::prelude::*;
        frames.into_par_iter().enumerate().map(process).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = frames.into_iter().enumerate().map(process).collect();

    let mut report = CleaningReport::default();
    let mut out = Vec::new();
    for (index, r) in results.into_iter().enumerate() {
        let (kind, kept) = r?;
        report.frames_in += 1;
        report.counts.add(kind);
        match kept {
            Some(f) => out.push(f),
            None => report.dropped_indices.push(index),
        }
    }
    report.frames_out = out.len();
    Ok((out, report))
}
