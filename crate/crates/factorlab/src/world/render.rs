use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{FactorKind, FactorSchema, FactorValue, Scene, WorldError};
use crate::nn::Tensor;

/// Background styles available to domains. Each is a deterministic function
/// of pixel position, muted enough that glyphs stay legible on any of them.
/// All styles share one mean luminance and differ only in low-contrast fine
/// pattern, so switching styles changes image texture without moving
/// first-order statistics.
const BACKGROUND_STYLES: [&str; 8] = [
    "charcoal", "slate", "hstripes", "vstripes", "checker", "gradx", "grady", "dots",
];

/// Named global brightness multipliers.
const BRIGHTNESS_LEVELS: [(&str, f64); 4] = [
    ("dim", 0.60),
    ("soft", 0.75),
    ("bright", 0.90),
    ("full", 1.00),
];

pub fn background_styles() -> &'static [&'static str] {
    &BACKGROUND_STYLES
}

pub fn brightness_levels() -> &'static [(&'static str, f64)] {
    &BRIGHTNESS_LEVELS
}

/// 6x6 class glyphs drawn at the image center: ring, plus, X, horizontal
/// bars, vertical bars.
const CLASS_GLYPHS: [[u8; 6]; 5] = [
    [0b111111, 0b100001, 0b100001, 0b100001, 0b100001, 0b111111],
    [0b001100, 0b001100, 0b111111, 0b111111, 0b001100, 0b001100],
    [0b100001, 0b010010, 0b001100, 0b001100, 0b010010, 0b100001],
    [0b111111, 0b000000, 0b111111, 0b111111, 0b000000, 0b111111],
    [0b101010, 0b101010, 0b101010, 0b101010, 0b101010, 0b101010],
];

/// 3x3 class-dependent side markers: block, plus, X. Three patterns for
/// five classes, so the marker narrows the class down without identifying
/// it alone; classifiers have to read the center glyph as well, and the
/// marker acts as a crisp second channel rather than a shortcut.
const MARKERS: [[u8; 3]; 3] = [
    [0b111, 0b111, 0b111],
    [0b010, 0b111, 0b010],
    [0b101, 0b010, 0b101],
];

/// Number of class identities the marker convention distinguishes before
/// patterns repeat. Matches the default class count.
const MARKER_CLASSES: usize = 5;

/// Marker pattern for a class on a side. The pattern tracks the class, but
/// the convention differs per side: left markers show the next class's
/// pattern. Every pattern is symmetric, so a location-blind reading cannot
/// tell the sides apart and conflates neighboring classes; a side-aware
/// reading recovers everything the marker carries.
fn marker_index(class: usize, side: usize) -> usize {
    let shown = if side == 0 {
        (class + 1) % MARKER_CLASSES
    } else {
        class
    };
    shown % MARKERS.len()
}

// The center glyph is deliberately low contrast relative to the sensor
// noise, while the marker stays near full swing. Classifiers therefore lean
// on the marker when it is available, which is what couples transfer quality
// to the marker side factor. Marker and glyph share one achromatic channel,
// so features that read marker strokes also read glyph strokes and neither
// can be discarded without hurting the other.
const GLYPH_FG: [f64; 3] = [0.48, 0.48, 0.48];
const GLYPH_BG: [f64; 3] = [0.32, 0.32, 0.32];
const MARKER_FG: [f64; 3] = [0.95, 0.95, 0.95];
const MARKER_BG: [f64; 3] = [0.06, 0.06, 0.06];

pub const GLYPH_SIZE: usize = 6;
pub const MARKER_SIZE: usize = 3;

/// Deterministic scene compositor. Layers, in order: background fill, class
/// glyph (overwrites its box), side marker (overwrites its box), global
/// brightness scaling, additive Gaussian pixel noise, clamp to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Mixer {
    image_size: usize,
    noise_sigma: f64,
}

impl Mixer {
    pub fn new(image_size: usize, noise_sigma: f64) -> Self {
        Mixer {
            image_size,
            noise_sigma,
        }
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    /// Top-left corner of the class glyph box for given jitter offsets.
    pub fn glyph_origin(&self, jitter_x: f64, jitter_y: f64) -> (usize, usize) {
        let c = ((self.image_size - GLYPH_SIZE) / 2) as i64;
        let y = (c + jitter_y.round() as i64).clamp(0, (self.image_size - GLYPH_SIZE) as i64);
        let x = (c + jitter_x.round() as i64).clamp(0, (self.image_size - GLYPH_SIZE) as i64);
        (y as usize, x as usize)
    }

    /// Top-left corner of the marker box on the given side (0 left, 1 right).
    pub fn marker_origin(&self, side: usize) -> (usize, usize) {
        let y = self.image_size / 2 - 1;
        let x = if side == 0 { 1 } else { self.image_size - 1 - MARKER_SIZE };
        (y, x)
    }

    pub fn render(&self, schema: &FactorSchema, scene: &Scene) -> Result<Tensor, WorldError> {
        let s = self.image_size;
        if scene.values.len() != schema.factors().len() {
            return Err(WorldError::BadScene(format!(
                "scene has {} values for {} factors",
                scene.values.len(),
                schema.factors().len()
            )));
        }
        for (f, v) in schema.factors().iter().zip(&scene.values) {
            match (&f.kind, v) {
                (FactorKind::Categorical(names), FactorValue::Categorical(ix)) => {
                    if *ix >= names.len() {
                        return Err(WorldError::BadScene(format!(
                            "{} index {ix} out of {} values",
                            f.name,
                            names.len()
                        )));
                    }
                }
                (FactorKind::Continuous { min, max }, FactorValue::Continuous(x)) => {
                    if !x.is_finite() || x < min || x > max {
                        return Err(WorldError::BadScene(format!(
                            "{} value {x} outside [{min}, {max}]",
                            f.name
                        )));
                    }
                }
                _ => {
                    return Err(WorldError::BadScene(format!(
                        "{} value has the wrong kind",
                        f.name
                    )));
                }
            }
        }
        let categorical = |name: &str| -> usize {
            let ix = schema.index_of(name).expect("fixed schema");
            match scene.values[ix] {
                FactorValue::Categorical(v) => v,
                FactorValue::Continuous(_) => unreachable!("kind checked above"),
            }
        };
        let continuous = |name: &str| -> f64 {
            let ix = schema.index_of(name).expect("fixed schema");
            match scene.values[ix] {
                FactorValue::Continuous(v) => v,
                FactorValue::Categorical(_) => unreachable!("kind checked above"),
            }
        };
        let class = categorical("class");
        let side = categorical("marker_side");
        let background = categorical("background");
        let brightness = categorical("brightness");
        let (jx, jy) = (continuous("jitter_x"), continuous("jitter_y"));

        let mut img = vec![0.0_f64; s * s * 3];
        let put = |y: usize, x: usize, rgb: [f64; 3], buf: &mut [f64]| {
            let base = (y * s + x) * 3;
            buf[base..base + 3].copy_from_slice(&rgb);
        };

        for y in 0..s {
            for x in 0..s {
                put(y, x, background_pixel(BACKGROUND_STYLES[background], y, x, s), &mut img);
            }
        }

        let (gy, gx) = self.glyph_origin(jx, jy);
        let glyph = &CLASS_GLYPHS[class];
        for (dy, row) in glyph.iter().enumerate() {
            for dx in 0..GLYPH_SIZE {
                let on = (row >> (GLYPH_SIZE - 1 - dx)) & 1 == 1;
                put(gy + dy, gx + dx, if on { GLYPH_FG } else { GLYPH_BG }, &mut img);
            }
        }

        let (my, mx) = self.marker_origin(side);
        let marker = &MARKERS[marker_index(class, side)];
        for (dy, row) in marker.iter().enumerate() {
            for dx in 0..MARKER_SIZE {
                let on = (row >> (MARKER_SIZE - 1 - dx)) & 1 == 1;
                put(my + dy, mx + dx, if on { MARKER_FG } else { MARKER_BG }, &mut img);
            }
        }

        let scale = BRIGHTNESS_LEVELS[brightness].1;
        img.iter_mut().for_each(|v| *v *= scale);

        if self.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
            let normal = Normal::new(0.0, self.noise_sigma).expect("sigma validated");
            for v in img.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

        Ok(Tensor::new(vec![s, s, 3], img).expect("sized by construction"))
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn background_pixel(style: &str, y: usize, x: usize, s: usize) -> [f64; 3] {
    match style {
        "charcoal" => [0.25, 0.25, 0.27],
        "slate" => [0.27, 0.28, 0.30],
        "hstripes" => {
            if (y / 2) % 2 == 0 {
                [0.24, 0.27, 0.29]
            } else {
                [0.30, 0.27, 0.25]
            }
        }
        "vstripes" => {
            if (x / 2) % 2 == 0 {
                [0.24, 0.27, 0.29]
            } else {
                [0.30, 0.27, 0.25]
            }
        }
        "checker" => {
            if (x / 2 + y / 2) % 2 == 0 {
                [0.23, 0.26, 0.28]
            } else {
                [0.30, 0.27, 0.25]
            }
        }
        "gradx" => {
            let t = x as f64 / (s - 1) as f64;
            [lerp(0.22, 0.32, t), lerp(0.23, 0.31, t), lerp(0.25, 0.29, t)]
        }
        "grady" => {
            let t = y as f64 / (s - 1) as f64;
            [lerp(0.22, 0.32, t), lerp(0.23, 0.31, t), lerp(0.25, 0.29, t)]
        }
        "dots" => {
            if x % 4 == 1 && y % 4 == 1 {
                [0.33, 0.32, 0.28]
            } else {
                [0.25, 0.26, 0.27]
            }
        }
        other => unreachable!("style {other} was validated at world build"),
    }
}
