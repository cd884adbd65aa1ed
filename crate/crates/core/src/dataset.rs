//! Station labeling of frames, patient-level train/test assignment,
//! train-only normalization statistics and the dataset manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enhance::EnhanceConfig;
use crate::imaging::{FloatImage, ImageBuffer};
use crate::pipeline::FrameSample;

/// Floor applied to per-channel standard deviations.
pub const STD_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("input error: {0}")]
    Input(String),
    #[error("intervals overlap: {first} and {second}")]
    Overlap { first: StationInterval, second: StationInterval },
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("labels csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Station {
    Station1,
    Station2,
    Station3,
}

impl Station {
    pub const ALL: [Station; 3] = [Station::Station1, Station::Station2, Station::Station3];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Station> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Station::Station1 => "Station1",
            Station::Station2 => "Station2",
            Station::Station3 => "Station3",
        }
    }
}

impl fmt::Display for Station {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Station {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Station::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| DatasetError::Input(format!("unknown station {s:?}")))
    }
}

/// Half-open time range `[t_start, t_end)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationInterval {
    pub station: Station,
    pub t_start: f64,
    pub t_end: f64,
}

impl fmt::Display for StationInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{:.3}, {:.3})", self.station, self.t_start, self.t_end)
    }
}

impl StationInterval {
    pub fn contains(&self, t: f64) -> bool {
        self.t_start <= t && t < self.t_end
    }
}

/// Checks `t_start < t_end` and pairwise disjointness.
pub fn validate_intervals(intervals: &[StationInterval]) -> Result<(), DatasetError> {
    for iv in intervals {
        if !(iv.t_start < iv.t_end) || !iv.t_start.is_finite() || !iv.t_end.is_finite() {
            return Err(DatasetError::Input(format!("interval {iv} is empty or not finite")));
        }
    }
    let mut sorted: Vec<_> = intervals.to_vec();
    sorted.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
    for pair in sorted.windows(2) {
        if pair[1].t_start < pair[0].t_end {
            return Err(DatasetError::Overlap { first: pair[0], second: pair[1] });
        }
    }
    Ok(())
}

const CSV_HEADER: [&str; 3] = ["station", "t_start", "t_end"];

/// Writes `station,t_start,t_end` with three-decimal seconds.
pub fn write_labels_csv(intervals: &[StationInterval], out: impl Write) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for iv in intervals {
        w.write_record([iv.station.as_str(), &format!("{:.3}", iv.t_start), &format!("{:.3}", iv.t_end)])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn labels_csv_string(intervals: &[StationInterval]) -> String {
    let mut buf = Vec::new();
    write_labels_csv(intervals, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv output is utf-8")
}

/// Parses and validates a `labels.csv` document. `offset` (seconds) is added
/// to every boundary to align label time with recording time.
pub fn read_labels_csv(input: impl Read, offset: f64) -> Result<Vec<StationInterval>, DatasetError> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(DatasetError::Input(format!("expected header station,t_start,t_end, got {headers:?}")));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64, DatasetError> {
            rec[i].trim().parse::<f64>().map_err(|e| DatasetError::Input(format!("{:?}: {e}", &rec[i])))
        };
        out.push(StationInterval {
            station: rec[0].trim().parse()?,
            t_start: num(1)? + offset,
            t_end: num(2)? + offset,
        });
    }
    validate_intervals(&out)?;
    Ok(out)
}

pub fn read_labels_file(path: &Path, offset: f64) -> Result<Vec<StationInterval>, DatasetError> {
    let f = std::fs::File::open(path)
        .map_err(|e| DatasetError::Io { path: path.display().to_string(), message: e.to_string() })?;
    read_labels_csv(f, offset)
}

/// Station whose interval contains `t`, if any.
pub fn station_at(intervals: &[StationInterval], t: f64) -> Option<Station> {
    intervals.iter().find(|iv| iv.contains(t)).map(|iv| iv.station)
}

/// Keeps frames that fall inside a station interval, paired with that station.
pub fn label_frames(
    frames: Vec<FrameSample>,
    intervals: &[StationInterval],
) -> Result<Vec<(FrameSample, Station)>, DatasetError> {
    validate_intervals(intervals)?;
    Ok(frames.into_iter().filter_map(|f| station_at(intervals, f.t).map(|s| (f, s))).collect())
}

pub type StationCounts = [usize; Station::COUNT];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl SplitAssignment {
    pub fn split_of(&self, procedure: &str) -> Option<Split> {
        if self.train.contains(procedure) {
            Some(Split::Train)
        } else if self.test.contains(procedure) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn is_disjoint(&self) -> bool {
        self.train.is_disjoint(&self.test)
    }
}

fn balance_cost(test: &StationCounts, totals: &StationCounts, test_frac: f64) -> f64 {
    (0..Station::COUNT)
        .filter(|&s| totals[s] > 0)
        .map(|s| (test[s] as f64 / totals[s] as f64 - test_frac).powi(2))
        .sum()
}

fn plus(a: &StationCounts, b: &StationCounts) -> StationCounts {
    std::array::from_fn(|s| a[s] + b[s])
}

fn minus(a: &StationCounts, b: &StationCounts) -> StationCounts {
    std::array::from_fn(|s| a[s] - b[s])
}

/// Assigns whole procedures to train or test.
///
/// Starts from [`greedy_splits`], then repeatedly applies the single move
/// (one procedure changes split) or swap (one train and one test procedure
/// trade places) that lowers the balance cost the most, until none does.
/// Candidates are scanned in id order, so the result depends only on the
/// counts, `test_frac` and `seed`. Both splits stay non-empty.
pub fn assign_splits(
    counts: &BTreeMap<String, StationCounts>,
    test_frac: f64,
    seed: u64,
) -> Result<SplitAssignment, DatasetError> {
    let mut a = greedy_splits(counts, test_frac, seed)?;
    let totals = station_totals(counts);
    let test_counts_of =
        |test: &BTreeSet<String>| test.iter().fold([0; Station::COUNT], |acc, id| plus(&acc, &counts[id]));
    let mut test_counts = test_counts_of(&a.test);
    let mut current = balance_cost(&test_counts, &totals, test_frac);
    loop {
        let mut best: Option<(f64, Option<&String>, Option<&String>)> = None;
        let mut consider = |cost: f64, to_test, to_train| {
            if cost < current && best.as_ref().is_none_or(|(b, _, _)| cost < *b) {
                best = Some((cost, to_test, to_train));
            }
        };
        if a.train.len() > 1 {
            for id in &a.train {
                consider(balance_cost(&plus(&test_counts, &counts[id]), &totals, test_frac), Some(id), None);
            }
        }
        if a.test.len() > 1 {
            for id in &a.test {
                consider(balance_cost(&minus(&test_counts, &counts[id]), &totals, test_frac), None, Some(id));
            }
        }
        for tr in &a.train {
            for te in &a.test {
                let c = minus(&plus(&test_counts, &counts[tr]), &counts[te]);
                consider(balance_cost(&c, &totals, test_frac), Some(tr), Some(te));
            }
        }
        let Some((cost, to_test, to_train)) = best else { break };
        let (to_test, to_train) = (to_test.cloned(), to_train.cloned());
        if let Some(id) = to_test {
            a.train.remove(&id);
            test_counts = plus(&test_counts, &counts[&id]);
            a.test.insert(id);
        }
        if let Some(id) = to_train {
            a.test.remove(&id);
            test_counts = minus(&test_counts, &counts[&id]);
            a.train.insert(id);
        }
        current = cost;
    }
    Ok(a)
}

fn station_totals(counts: &BTreeMap<String, StationCounts>) -> StationCounts {
    counts.values().fold([0; Station::COUNT], |acc, c| plus(&acc, c))
}

/// `sum over stations of (test_s / total_s - test_frac)^2`, skipping
/// stations with no frames.
pub fn split_balance_cost(counts: &BTreeMap<String, StationCounts>, test: &BTreeSet<String>, test_frac: f64) -> f64 {
    let t = test.iter().filter_map(|id| counts.get(id)).fold([0; Station::COUNT], |acc, c| plus(&acc, c));
    balance_cost(&t, &station_totals(counts), test_frac)
}

/// The greedy first pass of [`assign_splits`].
///
/// Procedures (in id order) are shuffled with `seed`; each is then placed in
/// whichever split leaves the per-station test fractions closest (squared
/// error) to `test_frac`, ties going to train. If either split ends up empty
/// the procedure whose move costs least is moved across.
pub fn greedy_splits(
    counts: &BTreeMap<String, StationCounts>,
    test_frac: f64,
    seed: u64,
) -> Result<SplitAssignment, DatasetError> {
    if counts.len() < 2 {
        return Err(DatasetError::Input(format!("need at least 2 procedures, got {}", counts.len())));
    }
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(DatasetError::Input(format!("test_frac must be in (0, 1), got {test_frac}")));
    }
    if let Some((id, _)) = counts.iter().find(|(_, c)| c.iter().sum::<usize>() == 0) {
        return Err(DatasetError::Input(format!("procedure {id} has no labeled frames")));
    }
    let totals = station_totals(counts);
    let mut order: Vec<&String> = counts.keys().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut test_counts = [0; Station::COUNT];
    let mut train = BTreeSet::new();
    let mut test = BTreeSet::new();
    for id in order {
        let c = &counts[id];
        let with = plus(&test_counts, c);
        if balance_cost(&with, &totals, test_frac) < balance_cost(&test_counts, &totals, test_frac) {
            test_counts = with;
            test.insert(id.clone());
        } else {
            train.insert(id.clone());
        }
    }
    if test.is_empty() {
        let best = train
            .iter()
            .min_by(|a, b| {
                let ca = balance_cost(&plus(&test_counts, &counts[*a]), &totals, test_frac);
                let cb = balance_cost(&plus(&test_counts, &counts[*b]), &totals, test_frac);
                ca.total_cmp(&cb)
            })
            .cloned()
            .expect("at least two procedures");
        train.remove(&best);
        test.insert(best);
    } else if train.is_empty() {
        let best = test
            .iter()
            .min_by(|a, b| {
                let ca = balance_cost(&minus(&test_counts, &counts[*a]), &totals, test_frac);
                let cb = balance_cost(&minus(&test_counts, &counts[*b]), &totals, test_frac);
                ca.total_cmp(&cb)
            })
            .cloned()
            .expect("at least two procedures");
        test.remove(&best);
        train.insert(best);
    }
    Ok(SplitAssignment { train, test, seed })
}

/// Per-channel mean and population standard deviation of pixel values
/// scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Exact integer moments, so the result does not depend on summation order.
pub fn compute_norm_stats<'a>(images: impl IntoIterator<Item = &'a ImageBuffer>) -> Result<NormStats, DatasetError> {
    let mut channels = None;
    let mut n: u128 = 0;
    let mut sum: Vec<u128> = Vec::new();
    let mut sum_sq: Vec<u128> = Vec::new();
    for img in images {
        let ch = *channels.get_or_insert_with(|| {
            sum = vec![0; img.channels()];
            sum_sq = vec![0; img.channels()];
            img.channels()
        });
        if img.channels() != ch {
            return Err(DatasetError::Input(format!("mixed channel counts ({ch} and {})", img.channels())));
        }
        for px in img.data().chunks_exact(ch) {
            for (c, &v) in px.iter().enumerate() {
                sum[c] += v as u128;
                sum_sq[c] += (v as u128) * (v as u128);
            }
        }
        n += img.pixel_count() as u128;
    }
    if n == 0 {
        return Err(DatasetError::Input("no training pixels".into()));
    }
    let nf = n as f64;
    let mean = sum.iter().map(|&s| s as f64 / nf / 255.0).collect();
    let std = sum
        .iter()
        .zip(&sum_sq)
        .map(|(&s, &sq)| {
            // n^2 var = n * sum(x^2) - sum(x)^2, exact in integers
            let num = n * sq - s * s;
            ((num as f64).sqrt() / nf / 255.0).max(STD_EPSILON)
        })
        .collect();
    Ok(NormStats { mean, std })
}

/// `(pixel / 255 - mean) / std` per channel.
pub fn normalize(img: &ImageBuffer, stats: &NormStats) -> Result<FloatImage, DatasetError> {
    let ch = img.channels();
    if stats.mean.len() != ch || stats.std.len() != ch {
        return Err(DatasetError::Input(format!("image has {ch} channels, stats have {}", stats.mean.len())));
    }
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i % ch;
            (v as f64 / 255.0 - stats.mean[c]) / stats.std[c]
        })
        .collect();
    Ok(FloatImage { width: img.width(), height: img.height(), channels: ch, data })
}

/// A labeled frame as listed in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub proc: String,
    pub path: String,
    pub station: Station,
    pub split: Split,
    pub t: f64,
}

/// Frame counts per split and station.
pub type SplitCounts = BTreeMap<Split, BTreeMap<Station, usize>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub splits: SplitAssignment,
    pub norm: NormStats,
    pub enhance: EnhanceConfig,
    pub frames: Vec<ManifestFrame>,
    pub counts: SplitCounts,
}

/// Input to [`build_manifest`]: a frame that has a station but no split yet.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub proc: String,
    pub path: String,
    pub station: Station,
    pub t: f64,
}

pub fn count_frames(frames: &[ManifestFrame]) -> SplitCounts {
    let mut counts: SplitCounts = BTreeMap::new();
    for split in [Split::Train, Split::Test] {
        counts.insert(split, Station::ALL.iter().map(|&s| (s, 0)).collect());
    }
    for f in frames {
        *counts.get_mut(&f.split).unwrap().get_mut(&f.station).unwrap() += 1;
    }
    counts
}

pub fn build_manifest(
    frames: Vec<LabeledFrame>,
    splits: SplitAssignment,
    norm: NormStats,
    enhance: EnhanceConfig,
) -> Result<DatasetManifest, DatasetError> {
    if !splits.is_disjoint() {
        return Err(DatasetError::Consistency("a procedure is in both splits".into()));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let split = splits.split_of(&f.proc).ok_or_else(|| {
            DatasetError::Consistency(format!("frame {} references unknown procedure {}", f.path, f.proc))
        })?;
        if !seen.insert(f.path.clone()) {
            return Err(DatasetError::Consistency(format!("frame {} listed twice", f.path)));
        }
        out.push(ManifestFrame { proc: f.proc, path: f.path, station: f.station, split, t: f.t });
    }
    for split in [Split::Train, Split::Test] {
        if !out.iter().any(|f| f.split == split) {
            return Err(DatasetError::Consistency(format!("{split:?} split has no frames")));
        }
    }
    let counts = count_frames(&out);
    Ok(DatasetManifest { seed: splits.seed, splits, norm, enhance, frames: out, counts })
}

impl DatasetManifest {
    pub fn frames_in(&self, split: Split) -> impl Iterator<Item = &ManifestFrame> {
        self.frames.iter().filter(move |f| f.split == split)
    }

    /// Pretty JSON with a trailing newline; stable for equal manifests.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        serde_json::from_str(text).map_err(|e| DatasetError::Input(format!("manifest: {e}")))
    }

    /// Structural invariants: disjoint splits, counts matching the frame
    /// list, unique frames, every frame's split matching its procedure.
    pub fn check(&self) -> Result<(), DatasetError> {
        if !self.splits.is_disjoint() {
            return Err(DatasetError::Consistency("a procedure is in both splits".into()));
        }
        if count_frames(&self.frames) != self.counts {
            return Err(DatasetError::Consistency("counts do not match the frame list".into()));
        }
        let mut seen = BTreeSet::new();
        for f in &self.frames {
            if !seen.insert(&f.path) {
                return Err(DatasetError::Consistency(format!("frame {} listed twice", f.path)));
            }
            if self.splits.split_of(&f.proc) != Some(f.split) {
                return Err(DatasetError::Consistency(format!("frame {} is in the wrong split", f.path)));
            }
        }
        Ok(())
    }
}
