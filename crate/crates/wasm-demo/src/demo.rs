//! Plain-Rust state behind the browser bindings.

use eusml_core::dataset::Station;
use eusml_core::enhance::{self, EnhanceConfig, Method};
use eusml_core::imaging::ImageBuffer;
use eusml_core::pipeline::{classify_noise, CleaningThresholds, NoiseKind, NoiseVerdict, Reference};
use eusml_core::synthetic::{gui_template, planted_frame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn parse_kind(name: &str) -> Result<NoiseKind, String> {
    NoiseKind::ALL.into_iter().find(|k| kind_name(*k) == name).ok_or_else(|| format!("unknown frame kind {name:?}"))
}

pub fn kind_name(kind: NoiseKind) -> &'static str {
    match kind {
        NoiseKind::Clean => "clean",
        NoiseKind::Gui => "gui",
        NoiseKind::Pink => "pink",
        NoiseKind::Blackened => "blackened",
        NoiseKind::GreenPointer => "green_pointer",
    }
}

/// RGB to RGBA with opaque alpha; grayscale is replicated.
pub fn to_rgba(img: &ImageBuffer) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.pixel_count() * 4);
    for px in img.data().chunks_exact(img.channels()) {
        match px {
            [g] => out.extend_from_slice(&[*g, *g, *g, 255]),
            [r, g, b] => out.extend_from_slice(&[*r, *g, *b, 255]),
            _ => unreachable!("1 or 3 channels"),
        }
    }
    out
}

/// A reference template plus the frame currently on screen.
pub struct Session {
    reference: Reference,
    thresholds: CleaningThresholds,
    rng: ChaCha8Rng,
    frame: ImageBuffer,
}

impl Session {
    pub fn new(width: usize, height: usize, seed: u64) -> Result<Self, String> {
        if width < 32 || height < 32 {
            return Err(format!("frames must be at least 32x32, got {width}x{height}"));
        }
        let template = gui_template(width, height);
        let thresholds = CleaningThresholds::default();
        let reference = Reference::new(template.clone(), thresholds.bins).map_err(|e| e.to_string())?;
        Ok(Self { reference, thresholds, rng: ChaCha8Rng::seed_from_u64(seed), frame: template })
    }

    pub fn width(&self) -> usize {
        self.frame.width()
    }

    pub fn height(&self) -> usize {
        self.frame.height()
    }

    pub fn frame(&self) -> &ImageBuffer {
        &self.frame
    }

    /// Replaces the current frame with a fresh one of the given kind.
    pub fn generate(&mut self, kind: &str) -> Result<&ImageBuffer, String> {
        let kind = parse_kind(kind)?;
        let station = Station::from_index(self.rng.random_range(0..3));
        self.frame = planted_frame(kind, self.reference.image(), station, &mut self.rng);
        Ok(&self.frame)
    }

    pub fn enhanced(&self, method: &str) -> Result<ImageBuffer, String> {
        let method: Method = method.parse().map_err(|e: enhance::EnhanceError| e.to_string())?;
        enhance::apply(&self.frame, &EnhanceConfig::with_method(method)).map_err(|e| e.to_string())
    }

    pub fn classify(&self) -> Result<NoiseVerdict, String> {
        classify_noise(&self.frame, &self.reference, &self.thresholds).map_err(|e| e.to_string())
    }
}
