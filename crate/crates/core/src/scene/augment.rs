use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMask, IGNORE};
use crate::numeric::{flip_horizontal, nearest_index, resize_bilinear, Rng, Tensor};
use crate::scene::SceneSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Square output size.
    pub crop: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            scale_min: 0.5,
            scale_max: 2.0,
            crop: 64,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob)
            || !(self.scale_min > 0.0)
            || self.scale_min > self.scale_max
            || !self.scale_max.is_finite()
            || self.crop == 0
        {
            return Err(Error::Config(format!("invalid augmentation {self:?}")));
        }
        Ok(())
    }
}

/// One concrete augmentation. Content pixel `(y, x)` of the scaled sample
/// lands at `(y + shift_y, x + shift_x)` of the crop; negative shifts crop,
/// positive shifts pad.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub scale: f64,
    pub shift_y: isize,
    pub shift_x: isize,
}

fn scaled_len(len: usize, scale: f64) -> usize {
    ((len as f64 * scale).round() as usize).max(1)
}

fn draw_shift(rng: &mut Rng, scaled: usize, crop: usize) -> isize {
    if scaled >= crop {
        -(rng.int_inclusive(0, scaled - crop) as isize)
    } else {
        rng.int_inclusive(0, crop - scaled) as isize
    }
}

/// Random flip, then uniform scale, then a random crop (padding image 0 and
/// mask 255 when the scaled sample is smaller than the crop).
pub fn augment(sample: &SceneSample, rng: &mut Rng, cfg: &AugmentConfig) -> Result<SceneSample> {
    let flip = rng.bernoulli(cfg.flip_prob);
    let scale = rng.uniform_range(cfg.scale_min, cfg.scale_max);
    let sh = scaled_len(sample.mask.height(), scale);
    let sw = scaled_len(sample.mask.width(), scale);
    let shift_y = draw_shift(rng, sh, cfg.crop);
    let shift_x = draw_shift(rng, sw, cfg.crop);
    augment_with(
        sample,
        AugmentDraw {
            flip,
            scale,
            shift_y,
            shift_x,
        },
        cfg.crop,
    )
}

pub fn augment_with(sample: &SceneSample, draw: AugmentDraw, crop: usize) -> Result<SceneSample> {
    let (image, mask) = if draw.flip {
        (flip_horizontal(&sample.image)?, sample.mask.flip_horizontal())
    } else {
        (sample.image.clone(), sample.mask.clone())
    };
    let (h, w) = (mask.height(), mask.width());
    let (sh, sw) = (scaled_len(h, draw.scale), scaled_len(w, draw.scale));
    let image = resize_bilinear(&image, sh, sw)?;
    let ys: Vec<usize> = (0..sh).map(|d| nearest_index(d, h, sh)).collect();
    let xs: Vec<usize> = (0..sw).map(|d| nearest_index(d, w, sw)).collect();

    let n = crop * crop;
    let src = image.data();
    let mut out_img = vec![0f32; 3 * n];
    let mut out_mask = vec![IGNORE; n];
    for oy in 0..crop {
        let sy = oy as isize - draw.shift_y;
        if sy < 0 || sy >= sh as isize {
            continue;
        }
        let sy = sy as usize;
        for ox in 0..crop {
            let sx = ox as isize - draw.shift_x;
            if sx < 0 || sx >= sw as isize {
                continue;
            }
            let sx = sx as usize;
            for c in 0..3 {
                out_img[c * n + oy * crop + ox] = src[c * sh * sw + sy * sw + sx];
            }
            out_mask[oy * crop + ox] = mask.get(ys[sy], xs[sx]);
        }
    }
    Ok(SceneSample {
        image: Tensor::new(&[3, crop, crop], out_img)?,
        mask: LabelMask::new(crop, crop, out_mask)?,
        provenance: sample.provenance.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, GeneratorConfig};

    fn sample() -> SceneSample {
        generate_scene(3, &GeneratorConfig::default()).unwrap()
    }

    fn draw(flip: bool, scale: f64, shift: isize) -> AugmentDraw {
        AugmentDraw {
            flip,
            scale,
            shift_y: shift,
            shift_x: shift,
        }
    }

    #[test]
    fn unit_scale_full_crop_is_identity() {
        let s = sample();
        assert_eq!(augment_with(&s, draw(false, 1.0, 0), 64).unwrap(), s);
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample();
        let once = augment_with(&s, draw(true, 1.0, 0), 64).unwrap();
        assert_ne!(once, s);
        assert_eq!(augment_with(&once, draw(true, 1.0, 0), 64).unwrap(), s);
    }

    #[test]
    fn half_scale_pads_with_ignore() {
        let s = sample();
        let out = augment_with(&s, draw(false, 0.5, 16), 64).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let inside = (16..48).contains(&y) && (16..48).contains(&x);
                assert_eq!(out.mask.get(y, x) == IGNORE, !inside, "({y},{x})");
                if !inside {
                    assert!((0..3).all(|c| out.image.at(&[c, y, x]) == 0.0));
                } else {
                    // nearest neighbour picks the odd source pixel of each pair
                    assert_eq!(out.mask.get(y, x), s.mask.get(2 * (y - 16) + 1, 2 * (x - 16) + 1));
                }
            }
        }
    }

    #[test]
    fn random_draws_stay_in_label_range() {
        let s = sample();
        let cfg = AugmentConfig::default();
        let mut rng = Rng::new(9);
        for _ in 0..20 {
            let out = augment(&s, &mut rng, &cfg).unwrap();
            assert!(out.mask.data().iter().all(|&v| v < 4 || v == IGNORE));
            assert_eq!(out.image.shape(), &[3, 64, 64]);
        }
    }
}
