//! Procedural scenes with intra-class appearance variation, netpbm I/O,
//! training-time augmentation and the on-disk dataset layout.
//!
//! Class 0 is a desaturated background. Classes 1 and 2 form the
//! "confusable pair": both are saturated and bright, and their hue ranges
//! overlap across the corpus, but inside any single image class 2 is always
//! at least `margin` above class 1 in hue. Remaining classes are dark, so
//! they are separable from everything else by brightness alone.

mod augment;
mod dataset;
mod netpbm;

pub use augment::{augment, augment_with, AugmentConfig, AugmentDraw};
pub use dataset::{load_dataset, write_dataset, Dataset, Manifest, IMAGES_DIR, MANIFEST_FILE, MASKS_DIR};
pub use netpbm::{quantize, read_pgm, read_ppm, write_pgm, write_ppm};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMask;
use crate::numeric::{Rng, Tensor};

/// Where a sample came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    /// Realized hue per class, `None` for classes without a single hue
    /// (background, dark classes) or when loaded from disk.
    pub class_hues: Vec<Option<f64>>,
    /// Whether the pair hues came from the fallback after rejection failed.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// `[3×H×W]` RGB in `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: LabelMask,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub class_count: usize,
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Hue range of class 1: `[pair_hue_start, pair_hue_start + pair_hue_width]`.
    pub pair_hue_start: f64,
    pub pair_hue_width: f64,
    /// How much the class-2 range overlaps the class-1 range: 1 is identical,
    /// 0 is disjoint and adjacent.
    pub confusion: f64,
    /// Per-sample jitter added to each drawn class hue.
    pub hue_jitter: f64,
    /// Minimum hue gap between classes 1 and 2 inside one image.
    pub margin: f64,
    pub noise_sigma: f64,
    pub max_retries: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            class_count: 4,
            height: 64,
            width: 64,
            min_shapes: 3,
            max_shapes: 6,
            pair_hue_start: 0.02,
            pair_hue_width: 0.4,
            confusion: 0.8,
            hue_jitter: 0.02,
            margin: 0.1,
            noise_sigma: 0.02,
            max_retries: 64,
        }
    }
}

const BACKGROUND_SATURATION: f64 = 0.1;
const BACKGROUND_VALUE: f64 = 0.8;
const SHAPE_SATURATION: f64 = 0.85;
const PAIR_VALUE: f64 = 0.9;
const DARK_VALUE: f64 = 0.35;

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("generator: {m}")));
        if !(3..=255).contains(&self.class_count) {
            return fail(format!("class_count {} outside 3..=255", self.class_count));
        }
        if self.height < 8 || self.width < 8 {
            return fail(format!("canvas {}x{} smaller than 8x8", self.height, self.width));
        }
        if self.min_shapes < 2 || self.min_shapes > self.max_shapes {
            return fail(format!("shape count range {}..={}", self.min_shapes, self.max_shapes));
        }
        if !(0.0..=1.0).contains(&self.confusion) {
            return fail(format!("confusion {} outside [0, 1]", self.confusion));
        }
        let (_, hi2) = self.hue_interval(2);
        if self.pair_hue_start < 0.0 || hi2 + self.hue_jitter > 1.0 || self.pair_hue_start - self.hue_jitter < 0.0 {
            return fail(format!("pair hue ranges [{}, {hi2}] plus jitter leave [0, 1]", self.pair_hue_start));
        }
        if self.margin < 0.0 || self.pair_hue_width < self.margin {
            return fail(format!("margin {} wider than hue width {}", self.margin, self.pair_hue_width));
        }
        if self.hue_jitter < 0.0 || self.noise_sigma < 0.0 {
            return fail("negative jitter or noise".into());
        }
        Ok(())
    }

    /// Corpus-level hue range of class 1 or 2.
    pub fn hue_interval(&self, class: usize) -> (f64, f64) {
        let lo = self.pair_hue_start
            + if class == 2 {
                (1.0 - self.confusion) * self.pair_hue_width
            } else {
                0.0
            };
        (lo, lo + self.pair_hue_width)
    }

    /// Hue range of dark class `k >= 3`: the circle split evenly among them.
    fn dark_interval(&self, class: usize) -> (f64, f64) {
        let n = (self.class_count - 3) as f64;
        let i = (class - 3) as f64;
        (i / n, (i + 1.0) / n)
    }
}

/// HSV in `[0,1]^3` to RGB.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Hue of an RGB triple, `None` for greys.
pub fn rgb_to_hue(rgb: [f64; 3]) -> Option<f64> {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d <= 0.0 {
        return None;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    Some(h / 6.0)
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { y0: usize, x0: usize, h: usize, w: usize },
    Disk { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rect { y0, x0, h, w } => y >= y0 && y < y0 + h && x >= x0 && x < x0 + w,
            Shape::Disk { cy, cx, r } => {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                dy * dy + dx * dx <= r * r
            }
        }
    }

    fn draw(rng: &mut Rng, height: usize, width: usize) -> Shape {
        let side = height.min(width) as f64;
        if rng.bernoulli(0.5) {
            let lo = (side * 0.125).round().max(2.0) as usize;
            let hi = (side * 0.375).round() as usize;
            let h = rng.int_inclusive(lo, hi);
            let w = rng.int_inclusive(lo, hi);
            Shape::Rect {
                y0: rng.int_inclusive(0, height - h),
                x0: rng.int_inclusive(0, width - w),
                h,
                w,
            }
        } else {
            let r = rng.uniform_range(side * 0.0625, side * 0.1875).max(1.5);
            Shape::Disk {
                cy: rng.uniform_range(r, height as f64 - r),
                cx: rng.uniform_range(r, width as f64 - r),
                r,
            }
        }
    }
}

/// Draws the two pair hues, rejecting until class 2 sits at least `margin`
/// above class 1.
fn pair_hues(rng: &mut Rng, cfg: &GeneratorConfig) -> (f64, f64, bool) {
    let draw = |rng: &mut Rng, class: usize| {
        let (lo, hi) = cfg.hue_interval(class);
        rng.uniform_range(lo, hi) + rng.uniform_range(-cfg.hue_jitter, cfg.hue_jitter)
    };
    for _ in 0..cfg.max_retries {
        let h1 = draw(rng, 1);
        let h2 = draw(rng, 2);
        if h2 - h1 >= cfg.margin {
            return (h1, h2, false);
        }
    }
    (cfg.hue_interval(1).0, cfg.hue_interval(2).1, true)
}

/// One scene; a pure function of `(seed, cfg)`.
pub fn generate_scene(seed: u64, cfg: &GeneratorConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = Rng::derive(seed, "scene", &[]);
    let (height, width, n) = (cfg.height, cfg.width, cfg.height * cfg.width);
    let c = cfg.class_count;

    let (h1, h2, fallback) = pair_hues(&mut rng, cfg);
    let mut class_rgb = vec![[0.0; 3]; c];
    let mut class_hues = vec![None; c];
    let bg_hue = rng.uniform();
    class_rgb[0] = hsv_to_rgb(bg_hue, BACKGROUND_SATURATION, BACKGROUND_VALUE);
    class_rgb[1] = hsv_to_rgb(h1, SHAPE_SATURATION, PAIR_VALUE);
    class_rgb[2] = hsv_to_rgb(h2, SHAPE_SATURATION, PAIR_VALUE);
    class_hues[1] = Some(h1);
    class_hues[2] = Some(h2);
    for (k, rgb) in class_rgb.iter_mut().enumerate().skip(3) {
        let (lo, hi) = cfg.dark_interval(k);
        *rgb = hsv_to_rgb(rng.uniform_range(lo, hi), SHAPE_SATURATION, DARK_VALUE);
    }

    // Every scene carries both pair classes; the rest of the shapes are
    // drawn from all foreground classes. Pair shapes are painted last so
    // neither is fully hidden.
    let count = rng.int_inclusive(cfg.min_shapes, cfg.max_shapes);
    let mut classes: Vec<usize> = (0..count - 2).map(|_| 1 + rng.below(c - 1)).collect();
    if rng.bernoulli(0.5) {
        classes.extend([1, 2]);
    } else {
        classes.extend([2, 1]);
    }
    let shapes: Vec<Shape> = classes.iter().map(|_| Shape::draw(&mut rng, height, width)).collect();

    let mut labels = vec![0u8; n];
    for (shape, &class) in shapes.iter().zip(&classes) {
        for y in 0..height {
            for x in 0..width {
                if shape.contains(y, x) {
                    labels[y * width + x] = class as u8;
                }
            }
        }
    }

    let mut image = vec![0f32; 3 * n];
    for ch in 0..3 {
        for j in 0..n {
            let v = class_rgb[labels[j] as usize][ch] + cfg.noise_sigma * rng.normal();
            image[ch * n + j] = v.clamp(0.0, 1.0) as f32;
        }
    }

    Ok(SceneSample {
        image: Tensor::new(&[3, height, width], image)?,
        mask: LabelMask::new(height, width, labels)?,
        provenance: Provenance {
            seed,
            class_hues,
            fallback,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sample() {
        let cfg = GeneratorConfig::default();
        assert_eq!(generate_scene(7, &cfg).unwrap(), generate_scene(7, &cfg).unwrap());
        assert_ne!(generate_scene(7, &cfg).unwrap().image, generate_scene(8, &cfg).unwrap().image);
    }

    #[test]
    fn labels_in_range_and_pair_present() {
        let cfg = GeneratorConfig::default();
        for seed in 0..30 {
            let s = generate_scene(seed, &cfg).unwrap();
            s.mask.check_range(cfg.class_count).unwrap();
            let hist = s.mask.histogram(cfg.class_count);
            assert!(hist[1] > 0 && hist[2] > 0, "seed {seed}: {hist:?}");
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn hsv_round_trip() {
        for h in [0.0, 0.1, 0.33, 0.5, 0.71, 0.95] {
            let rgb = hsv_to_rgb(h, 0.85, 0.9);
            assert!((rgb_to_hue(rgb).unwrap() - h).abs() < 1e-12);
        }
        assert_eq!(hsv_to_rgb(0.3, 0.0, 0.5), [0.5, 0.5, 0.5]);
        assert_eq!(rgb_to_hue([0.2, 0.2, 0.2]), None);
    }

    #[test]
    fn confusion_zero_makes_pair_ranges_adjacent() {
        let cfg = GeneratorConfig {
            confusion: 0.0,
            ..Default::default()
        };
        assert_eq!(cfg.hue_interval(1).1, cfg.hue_interval(2).0);
    }

    #[test]
    fn rejects_invalid_configs() {
        let bad = [
            GeneratorConfig {
                class_count: 2,
                ..Default::default()
            },
            GeneratorConfig {
                confusion: 1.5,
                ..Default::default()
            },
            GeneratorConfig {
                pair_hue_width: 0.05,
                ..Default::default()
            },
            GeneratorConfig {
                min_shapes: 7,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }
}
