//! Seeded synthetic data: noise frames around a GUI template, textured
//! ultrasound-like procedures with station labels, and the quadrant
//! localization task for the classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    compute_norm_stats, normalize, write_labels_csv, DatasetError, NormStats, Station, StationInterval,
};
use crate::imaging::{clamp_u8, ImageBuffer};
use crate::nn::Dataset;
use crate::pipeline::{FrameSourceMeta, NoiseKind};

/// Quadrant index: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
pub fn quadrant_of(x: usize, y: usize, size: usize) -> usize {
    (x >= size / 2) as usize + 2 * (y >= size / 2) as usize
}

/// Pixel bounds `(x0, y0, x1, y1)` of quadrant `q`.
pub fn quadrant_bounds(q: usize, size: usize) -> (usize, usize, usize, usize) {
    let h = size / 2;
    let (x0, y0) = ((q % 2) * h, (q / 2) * h);
    (x0, y0, x0 + h, y0 + h)
}

/// Grayscale images with one bright Gaussian blob over a noisy dark
/// background; the label is the quadrant holding the blob centre. Classes
/// cycle 0, 1, 2, 3 so every class has `n / 4` images.
pub fn quadrant_images(n: usize, size: usize, seed: u64) -> Vec<(ImageBuffer, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 10.0).expect("valid std");
    let half = size / 2;
    let margin = (size / 8).max(1);
    (0..n)
        .map(|i| {
            let q = i % 4;
            let (x0, y0, _, _) = quadrant_bounds(q, size);
            let cx = (x0 + rng.random_range(margin..half - margin)) as f64 + 0.5;
            let cy = (y0 + rng.random_range(margin..half - margin)) as f64 + 0.5;
            let sigma = rng.random_range(0.05..0.09) * size as f64;
            let amp: f64 = rng.random_range(140.0..200.0);
            let mut data = Vec::with_capacity(size * size);
            for y in 0..size {
                for x in 0..size {
                    let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                    data.push(clamp_u8(40.0 + amp * (-d2 / (2.0 * sigma * sigma)).exp() + noise.sample(&mut rng)));
                }
            }
            (ImageBuffer::new(size, size, 1, data).expect("size matches"), q)
        })
        .collect()
}

/// Normalizes labeled single-channel images into a model dataset.
pub fn to_dataset(images: &[(ImageBuffer, usize)], stats: &NormStats) -> Result<Dataset, DatasetError> {
    let mut out = Dataset::default();
    for (img, label) in images {
        out.push(normalize(img, stats)?.data, *label);
    }
    Ok(out)
}

/// Train/holdout quadrant datasets normalized with train-only statistics.
pub fn quadrant_task(n_train: usize, n_test: usize, size: usize, seed: u64) -> (Dataset, Dataset, NormStats) {
    let train = quadrant_images(n_train, size, seed);
    let test = quadrant_images(n_test, size, seed.wrapping_add(0x9e37_79b9));
    let stats = compute_norm_stats(train.iter().map(|(im, _)| im)).expect("non-empty");
    let tr = to_dataset(&train, &stats).expect("single channel");
    let te = to_dataset(&test, &stats).expect("single channel");
    (tr, te, stats)
}

/// A screen-capture template: mid-gray panels, a dark sidebar and light
/// text bars. Every intensity sits one level above a 64-bin boundary so
/// small capture jitter keeps the histogram intact.
pub fn gui_template(width: usize, height: usize) -> ImageBuffer {
    ImageBuffer::from_fn(width, height, 3, |x, y, c| {
        let side = x < width / 5;
        let bar = y % 12 < 3 && x > width / 4 && x < width * 3 / 4;
        let base = if side {
            61
        } else if bar {
            149
        } else {
            101 + ((x / 8 + y / 8) % 2) as u8 * 20
        };
        base + [0, 4, 8][c]
    })
    .expect("valid size")
}

/// The template with +-1 intensity jitter.
pub fn gui_frame(template: &ImageBuffer, rng: &mut impl Rng) -> ImageBuffer {
    let data = template.data().iter().map(|&v| (v as i32 + rng.random_range(-1..=1)).clamp(0, 255) as u8).collect();
    ImageBuffer::new(template.width(), template.height(), template.channels(), data).expect("same shape")
}

/// Saturated magenta-pink far from every template intensity.
pub fn pink_frame(width: usize, height: usize, rng: &mut impl Rng) -> ImageBuffer {
    ImageBuffer::from_fn(width, height, 3, |_, _, c| {
        let base = [245.0, 12.0, 215.0][c];
        clamp_u8(base + rng.random_range(-6.0..=6.0))
    })
    .expect("valid size")
}

/// Near-black frame with mean intensity well under 12.
pub fn blackened_frame(width: usize, height: usize, rng: &mut impl Rng) -> ImageBuffer {
    ImageBuffer::from_fn(width, height, 3, |_, _, _| rng.random_range(0..=8)).expect("valid size")
}

/// Station texture in `[0, 1]`; `None` is unstructured tissue.
fn texture(station: Option<Station>, x: f64, y: f64, phase: f64, centre: (f64, f64), period: f64) -> f64 {
    use std::f64::consts::TAU;
    match station {
        Some(Station::Station1) => 0.5 + 0.5 * (TAU * y / period + phase).cos(),
        Some(Station::Station2) => {
            let r = ((x - centre.0).powi(2) + (y - centre.1).powi(2)).sqrt();
            0.5 + 0.5 * (TAU * r / period + phase).cos()
        }
        Some(Station::Station3) => {
            let cx = ((x + phase * period) / period).floor() as i64;
            let cy = (y / period).floor() as i64;
            ((cx + cy).rem_euclid(2)) as f64
        }
        None => 0.5,
    }
}

/// Screen capture of a live exam: the GUI template's sidebar and header
/// around an imaging area holding a speckled sector that fans down from the
/// area's top centre over black, carrying the station's texture.
pub fn eus_frame(width: usize, height: usize, station: Option<Station>, rng: &mut impl Rng) -> ImageBuffer {
    let mut out = gui_template(width, height);
    let (ax, ay) = (width / 5, height / 6);
    let (aw, ah) = (width - ax, height - ay);
    let period = (aw.min(ah) as f64 / 5.0).max(4.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let centre = (rng.random_range(0.3..0.7) * aw as f64, rng.random_range(0.3..0.7) * ah as f64);
    let apex = (aw as f64 / 2.0, -0.1 * ah as f64);
    let radius = 1.05 * ah as f64;
    let half_angle = 0.8f64;
    for y in 0..ah {
        for x in 0..aw {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = (fx - apex.0, fy - apex.1);
            let inside = dy > 0.0 && dx.atan2(dy).abs() < half_angle && (dx * dx + dy * dy).sqrt() < radius;
            let v = if inside {
                let t = texture(station, fx, fy, phase, centre, period);
                let speckle: f64 = rng.random_range(0.75..1.25);
                35.0 + 150.0 * t * speckle
            } else {
                rng.random_range(0.0..6.0)
            };
            let g = clamp_u8(v);
            for c in 0..3 {
                out.set(ax + x, ay + y, c, g);
            }
        }
    }
    out
}

/// Draws a solid green arrow-like cross (well over 25 pixels) at a random
/// position inside the frame.
pub fn add_green_pointer(img: &ImageBuffer, rng: &mut impl Rng) -> ImageBuffer {
    let mut out = img.clone();
    let (w, h) = (img.width(), img.height());
    let arm = (w.min(h) / 10).max(4);
    let cx = rng.random_range(arm + 1..w - arm - 1);
    let cy = rng.random_range(arm + 1..h - arm - 1);
    for d in 0..=2 * arm {
        for t in 0..2 {
            let (hx, hy) = (cx + d - arm, cy + t);
            let (vx, vy) = (cx + t, cy + d - arm);
            for (x, y) in [(hx, hy), (vx, vy)] {
                out.set(x, y, 0, 20);
                out.set(x, y, 1, 230);
                out.set(x, y, 2, 30);
            }
        }
    }
    out
}

/// Frame of a given planted kind for the noise corpus.
pub fn planted_frame(
    kind: NoiseKind,
    template: &ImageBuffer,
    station: Option<Station>,
    rng: &mut impl Rng,
) -> ImageBuffer {
    let (w, h) = (template.width(), template.height());
    match kind {
        NoiseKind::Clean => eus_frame(w, h, station, rng),
        NoiseKind::Gui => gui_frame(template, rng),
        NoiseKind::Pink => pink_frame(w, h, rng),
        NoiseKind::Blackened => blackened_frame(w, h, rng),
        NoiseKind::GreenPointer => {
            let base = eus_frame(w, h, station, rng);
            add_green_pointer(&base, rng)
        }
    }
}

/// `n` frames cycling through every noise kind, with the GUI template used
/// as the cleaning reference.
pub fn noise_corpus(n: usize, width: usize, height: usize, seed: u64) -> (ImageBuffer, Vec<(ImageBuffer, NoiseKind)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = gui_template(width, height);
    let frames = (0..n)
        .map(|i| {
            let kind = NoiseKind::ALL[i % NoiseKind::ALL.len()];
            let station = Station::from_index(rng.random_range(0..4));
            (planted_frame(kind, &template, station, &mut rng), kind)
        })
        .collect();
    (template, frames)
}

/// Shape of a generated procedure corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub procedures: usize,
    /// Recording length in seconds.
    pub duration: f64,
    /// Source frame rate.
    pub fps: f64,
    pub width: usize,
    pub height: usize,
    /// Probability that a source frame is replaced by a noise frame.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { procedures: 6, duration: 40.0, fps: 4.0, width: 96, height: 96, noise_rate: 0.1, seed: 0 }
    }
}

/// Ground truth of one generated procedure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureTruth {
    pub id: String,
    pub intervals: Vec<StationInterval>,
    /// `(source frame index, kind)` for every planted noise frame.
    pub planted: Vec<(usize, NoiseKind)>,
    pub frames: usize,
}

/// Three to four station visits with gaps, ordered in time. Each procedure
/// covers a random subset of stations so station mixes differ.
fn procedure_intervals(duration: f64, rng: &mut impl Rng) -> Vec<StationInterval> {
    let visits = rng.random_range(3..=4);
    let slot = duration / visits as f64;
    let mut out = Vec::new();
    let mut prev: Option<Station> = None;
    for v in 0..visits {
        let station = loop {
            let s = Station::ALL[rng.random_range(0..3)];
            if Some(s) != prev {
                break s;
            }
        };
        prev = Some(station);
        let gap = rng.random_range(0.05..0.2) * slot;
        let t_start = v as f64 * slot + gap;
        let t_end = (v + 1) as f64 * slot - rng.random_range(0.0..0.1) * slot;
        out.push(StationInterval { station, t_start: round_ms(t_start), t_end: round_ms(t_end) });
    }
    out
}

fn round_ms(t: f64) -> f64 {
    (t * 1000.0).round() / 1000.0
}

/// Writes `frames/<id>/{meta.json, frames/%06d.png}`, `labels/<id>.csv`,
/// `reference.png` and `truth.json` under `root`.
pub fn write_corpus(root: &Path, cfg: &CorpusConfig) -> std::io::Result<Vec<ProcedureTruth>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let template = gui_template(cfg.width, cfg.height);
    fs::create_dir_all(root.join("labels"))?;
    template.save_png(root.join("reference.png")).map_err(std::io::Error::other)?;
    let mut truths = Vec::new();
    let n_frames = (cfg.duration * cfg.fps).floor() as usize;
    for p in 0..cfg.procedures {
        let id = format!("proc{:03}", p + 1);
        let dir = root.join("frames").join(&id);
        fs::create_dir_all(dir.join("frames"))?;
        let meta = FrameSourceMeta { fps: cfg.fps, capture_start: None };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        let intervals = procedure_intervals(cfg.duration, &mut rng);
        let mut planted = Vec::new();
        for i in 0..n_frames {
            let t = i as f64 / cfg.fps;
            let station = intervals.iter().find(|iv| iv.contains(t)).map(|iv| iv.station);
            let kind = if rng.random_bool(cfg.noise_rate.clamp(0.0, 1.0)) {
                let k = NoiseKind::ALL[rng.random_range(1..NoiseKind::ALL.len())];
                planted.push((i, k));
                k
            } else {
                NoiseKind::Clean
            };
            let img = planted_frame(kind, &template, station, &mut rng);
            img.save_png(dir.join("frames").join(format!("{i:06}.png"))).map_err(std::io::Error::other)?;
        }
        let f = fs::File::create(root.join("labels").join(format!("{id}.csv")))?;
        write_labels_csv(&intervals, f).map_err(std::io::Error::other)?;
        truths.push(ProcedureTruth { id, intervals, planted, frames: n_frames });
    }
    fs::write(root.join("truth.json"), serde_json::to_string_pretty(&truths)? + "\n")?;
    Ok(truths)
}
