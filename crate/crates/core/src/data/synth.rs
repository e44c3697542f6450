//! Synthetic stand-in for a scraped food photo collection.
//!
//! Every class is a fixed recipe: one of five shape/texture patterns crossed
//! with a hue group. Samples jitter the object position, size, hue,
//! saturation and brightness, and sit on a noisy low-saturation background
//! with a few clutter patches. The jitter ranges below are pinned; changing
//! any of them changes every generated image.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{encode_ppm, RgbImage};
use super::{DataError, DataSource, DatasetManifest, Sample, MANIFEST_VERSION};

const FOOD_NAMES: [&str; 20] = [
    "biryani",
    "butter_chicken",
    "chole_bhature",
    "dal_makhani",
    "dhokla",
    "dosa",
    "gulab_jamun",
    "idli",
    "jalebi",
    "kadai_paneer",
    "kheer",
    "naan",
    "palak_paneer",
    "pani_puri",
    "pav_bhaji",
    "rasgulla",
    "samosa",
    "tandoori_chicken",
    "upma",
    "vada",
];

const PATTERNS: usize = 5;
/// Hue jitter around the class hue, degrees.
const HUE_JITTER: f32 = 14.0;
/// Object center offset from the image center, fraction of the side.
const CENTER_JITTER: f32 = 0.14;
/// Object radius range, fraction of the side.
const RADIUS_RANGE: (f32, f32) = (0.2, 0.31);
const SATURATION_RANGE: (f32, f32) = (0.5, 0.95);
const VALUE_RANGE: (f32, f32) = (0.55, 1.0);
const PIXEL_NOISE: i32 = 12;
const CLUTTER_PATCHES: (usize, usize) = (3, 7);
const BACKGROUND_SATURATION: f32 = 0.3;

/// Class names for `n` synthetic classes: the twenty food names, then
/// `class_20`, `class_21`, ...
pub fn synthetic_class_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| FOOD_NAMES.get(i).map_or_else(|| format!("class_{i}"), |s| s.to_string()))
        .collect()
}

/// Pattern and base hue of one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthRecipe {
    /// 0 disc, 1 ring, 2 striped disc, 3 square, 4 checkered square.
    pub pattern: usize,
    pub hue: f32,
}

impl SynthRecipe {
    pub fn for_class(class: usize, n_classes: usize) -> Self {
        let groups = n_classes.div_ceil(PATTERNS);
        Self {
            pattern: class % PATTERNS,
            hue: (class / PATTERNS) as f32 * 360.0 / groups as f32 + 20.0,
        }
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn noisy(rgb: [f32; 3], rng: &mut ChaCha8Rng) -> [u8; 3] {
    rgb.map(|v| (v as i32 + rng.gen_range(-PIXEL_NOISE..=PIXEL_NOISE)).clamp(0, 255) as u8)
}

/// Renders one sample of `recipe` at `size` x `size` from `rng`.
pub fn render_sample(recipe: SynthRecipe, size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let sz = size as f32;
    let bg = hsv(
        rng.gen_range(0.0..360.0),
        rng.gen_range(0.0..BACKGROUND_SATURATION),
        rng.gen_range(0.25..0.7),
    );
    let mut canvas = vec![bg; size * size];
    for _ in 0..rng.gen_range(CLUTTER_PATCHES.0..=CLUTTER_PATCHES.1) {
        let color = hsv(
            rng.gen_range(0.0..360.0),
            rng.gen_range(0.0..BACKGROUND_SATURATION),
            rng.gen_range(0.2..0.8),
        );
        let w = rng.gen_range(size / 16..=size / 5).max(1);
        let h = rng.gen_range(size / 16..=size / 5).max(1);
        let x0 = rng.gen_range(0..size);
        let y0 = rng.gen_range(0..size);
        for y in y0..(y0 + h).min(size) {
            for x in x0..(x0 + w).min(size) {
                canvas[y * size + x] = color;
            }
        }
    }

    let cx = sz * (0.5 + rng.gen_range(-CENTER_JITTER..CENTER_JITTER));
    let cy = sz * (0.5 + rng.gen_range(-CENTER_JITTER..CENTER_JITTER));
    let r = sz * rng.gen_range(RADIUS_RANGE.0..RADIUS_RANGE.1);
    let hue = recipe.hue + rng.gen_range(-HUE_JITTER..HUE_JITTER);
    let fg = hsv(
        hue,
        rng.gen_range(SATURATION_RANGE.0..SATURATION_RANGE.1),
        rng.gen_range(VALUE_RANGE.0..VALUE_RANGE.1),
    );
    let dark = fg.map(|v| v * 0.35);
    let period = (sz / rng.gen_range(9.0..13.0)).max(2.0);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let dist = (dx * dx + dy * dy).sqrt();
            let half = r * 0.85;
            let in_square = dx.abs() <= half && dy.abs() <= half;
            let band = |v: f32| ((v / period).floor() as i64).rem_euclid(2) == 0;
            let color = match recipe.pattern {
                0 => (dist <= r).then_some(fg),
                1 => (dist <= r && dist >= r * 0.55).then_some(fg),
                2 => (dist <= r).then(|| if band(dy) { fg } else { dark }),
                3 => in_square.then_some(fg),
                _ => in_square.then(|| if band(dx) == band(dy) { fg } else { dark }),
            };
            if let Some(c) = color {
                canvas[y * size + x] = c;
            }
        }
    }

    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            img.put(x, y, noisy(canvas[y * size + x], rng));
        }
    }
    img
}

/// Writes `per_class` PPM images for each of `n_classes` classes under
/// `out_dir/<class name>/NNNN.ppm` plus `out_dir/manifest.json`.
pub fn generate_synthetic_dataset(
    out_dir: &Path,
    n_classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<DatasetManifest, DataError> {
    if n_classes < 2 || per_class < 2 {
        return Err(DataError::Argument(format!(
            "need n_classes >= 2 and per_class >= 2, got {n_classes} and {per_class}"
        )));
    }
    if image_size < 16 {
        return Err(DataError::Argument(format!("image_size {image_size} below 16")));
    }
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| DataError::Io { path, source }
    };
    let class_names = synthetic_class_names(n_classes);
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_classes * per_class);
    for (c, name) in class_names.iter().enumerate() {
        let dir = out_dir.join(name);
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        let recipe = SynthRecipe::for_class(c, n_classes);
        for i in 0..per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(master.next_u64());
            let img = render_sample(recipe, image_size, &mut rng);
            let rel = format!("{name}/{i:04}.ppm");
            let path = out_dir.join(&rel);
            std::fs::write(&path, encode_ppm(&img)).map_err(io(&path))?;
            samples.push(Sample { path: rel, label: c });
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        class_names,
        samples,
        source: DataSource::Synthetic,
        seed,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}
