use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::labels::LabelMask;
use crate::metrics::ConfusionMatrix;
use crate::model::Model;
use crate::numeric::{flip_horizontal, resize_bilinear, softmax_channels, Element, Tensor};
use crate::scene::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub window: usize,
    pub stride: usize,
    pub scales: Vec<f64>,
    pub flip: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            window: 64,
            stride: 48,
            scales: vec![0.5, 0.75, 1.0, 1.25, 1.5, 1.75],
            flip: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 || self.stride > self.window {
            return Err(Error::Config(format!(
                "eval.stride {} must be in 1..=window ({})",
                self.stride, self.window
            )));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("eval.scales {:?} must be non-empty and positive", self.scales)));
        }
        Ok(())
    }

    /// One scale, no flip.
    pub fn single_scale(&self) -> Self {
        EvalConfig {
            scales: vec![1.0],
            flip: false,
            ..self.clone()
        }
    }
}

/// Window start offsets along an axis of length `len`: every `stride`, plus
/// a final window flush with the end.
pub fn tile_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if window >= len {
        return vec![0];
    }
    let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + window < len).collect();
    v.push(len - window);
    v
}

/// Tiles as `(y0, x0, h, w)` in canonical row-major order.
pub fn tiles(h: usize, w: usize, window: usize, stride: usize) -> Vec<(usize, usize, usize, usize)> {
    let (th, tw) = (window.min(h), window.min(w));
    let xs = tile_starts(w, window, stride);
    tile_starts(h, window, stride)
        .into_iter()
        .flat_map(|y| xs.iter().map(move |&x| (y, x, th, tw)))
        .collect()
}

fn crop<T: Element>(x: &Tensor<T>, y0: usize, x0: usize, th: usize, tw: usize) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = x.data();
    let mut out = Vec::with_capacity(c * th * tw);
    for ch in 0..c {
        for y in y0..y0 + th {
            let row = ch * h * w + y * w;
            out.extend_from_slice(&d[row + x0..row + x0 + tw]);
        }
    }
    Tensor::from_parts(vec![c, th, tw], out)
}

/// Logits averaged over overlapping windows by per-pixel coverage.
pub fn sliding_window_predict<T: Element>(model: &Model<T>, image: &Tensor<T>, cfg: &EvalConfig) -> Result<Tensor<T>> {
    let n = tiles(image.shape()[1], image.shape()[2], cfg.window, cfg.stride).len();
    sliding_window_scheduled(model, image, cfg, &(0..n).collect::<Vec<_>>())
}

/// As [`sliding_window_predict`], computing tiles in the order given by
/// `schedule` (a permutation of tile indices). Accumulation always follows
/// the canonical tile order, so the result does not depend on `schedule`.
pub fn sliding_window_scheduled<T: Element>(
    model: &Model<T>,
    image: &Tensor<T>,
    cfg: &EvalConfig,
    schedule: &[usize],
) -> Result<Tensor<T>> {
    image.expect_rank("sliding_window_predict", 3)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let layout = tiles(h, w, cfg.window, cfg.stride);
    if layout.len() == 1 {
        return Ok(model.forward(image)?.logits);
    }
    let mut sorted = schedule.to_vec();
    sorted.sort_unstable();
    if sorted != (0..layout.len()).collect::<Vec<_>>() {
        return Err(Error::Contract(format!("schedule is not a permutation of {} tiles", layout.len())));
    }
    let mut outputs: Vec<Option<Tensor<T>>> = vec![None; layout.len()];
    for &t in schedule {
        let (y0, x0, th, tw) = layout[t];
        outputs[t] = Some(model.forward(&crop(image, y0, x0, th, tw))?.logits);
    }
    let c = model.classes;
    let mut sum = vec![T::zero(); c * h * w];
    let mut count = vec![0u32; h * w];
    for (&(y0, x0, th, tw), out) in layout.iter().zip(&outputs) {
        let d = out.as_ref().expect("every tile computed").data();
        for ch in 0..c {
            for y in 0..th {
                for x in 0..tw {
                    sum[ch * h * w + (y0 + y) * w + x0 + x] = sum[ch * h * w + (y0 + y) * w + x0 + x] + d[ch * th * tw + y * tw + x];
                }
            }
        }
        for y in 0..th {
            for x in 0..tw {
                count[(y0 + y) * w + x0 + x] += 1;
            }
        }
    }
    assert!(count.iter().all(|&k| k > 0), "tiling left a pixel uncovered");
    for ch in 0..c {
        for j in 0..h * w {
            sum[ch * h * w + j] = sum[ch * h * w + j] / T::from_f64(count[j] as f64);
        }
    }
    Tensor::new(&[c, h, w], sum)
}

fn scaled(len: usize, s: f64) -> usize {
    ((len as f64 * s).round() as usize).max(1)
}

/// Class probabilities averaged over every scale and (optionally) the
/// mirrored input, each resized back to the native resolution.
pub fn multi_scale_probabilities<T: Element>(model: &Model<T>, image: &Tensor<T>, cfg: &EvalConfig) -> Result<Tensor<T>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut acc: Option<Tensor<T>> = None;
    let mut branches = 0usize;
    for &s in &cfg.scales {
        let resized = resize_bilinear(image, scaled(h, s), scaled(w, s))?;
        let flips: &[bool] = if cfg.flip { &[false, true] } else { &[false] };
        for &flip in flips {
            let input = if flip { flip_horizontal(&resized)? } else { resized.clone() };
            let mut p = softmax_channels(&sliding_window_predict(model, &input, cfg)?)?;
            if flip {
                p = flip_horizontal(&p)?;
            }
            let p = resize_bilinear(&p, h, w)?;
            acc = Some(match acc {
                Some(a) => a.add(&p)?,
                None => p,
            });
            branches += 1;
        }
    }
    let acc = acc.expect("at least one scale");
    Ok(Tensor::from_parts(
        acc.shape().to_vec(),
        acc.data().iter().map(|&v| v / T::from_f64(branches as f64)).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    /// Per-image predicted label maps, in dataset order.
    pub predictions: Vec<LabelMask>,
}

impl EvalReport {
    pub fn miou(&self) -> Result<f64> {
        self.confusion.miou()
    }

    pub fn pixacc(&self) -> Result<f64> {
        self.confusion.pixacc()
    }

    /// `class,iou` rows followed by a `miou,pixacc` section.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::from("class,iou\n");
        for (c, iou) in self.confusion.class_iou().into_iter().enumerate() {
            match iou {
                Some(v) => writeln!(out, "{c},{v:.6}").unwrap(),
                None => writeln!(out, "{c},nan").unwrap(),
            }
        }
        writeln!(out, "miou,pixacc\n{:.6},{:.6}", self.miou()?, self.pixacc()?).unwrap();
        Ok(out)
    }
}

fn collect(classes: usize, data: &Dataset, predictions: Vec<Result<LabelMask>>) -> Result<EvalReport> {
    let predictions = predictions.into_iter().collect::<Result<Vec<_>>>()?;
    let mut confusion = ConfusionMatrix::new(classes);
    for (pred, s) in predictions.iter().zip(&data.samples) {
        confusion.update(pred, &s.mask)?;
    }
    Ok(EvalReport { confusion, predictions })
}

/// Sliding-window, multi-scale, optionally flipped evaluation. Images are
/// processed in parallel; confusion counts merge in dataset order.
pub fn multi_scale_eval<T: Element>(model: &Model<T>, data: &Dataset, cfg: &EvalConfig, exec: Execution) -> Result<EvalReport> {
    cfg.validate()?;
    let preds = exec.map(&data.samples, |_, s| {
        let image: Tensor<T> = s.image.cast();
        LabelMask::argmax(&multi_scale_probabilities(model, &image, cfg)?)
    });
    collect(model.classes, data, preds)
}

/// Whole-image forward and argmax of the logits; the validation path used
/// during experiments.
pub fn evaluate_single_scale<T: Element>(model: &Model<T>, data: &Dataset, exec: Execution) -> Result<EvalReport> {
    let preds = exec.map(&data.samples, |_, s| LabelMask::argmax(&model.forward(&s.image.cast())?.logits));
    collect(model.classes, data, preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::model::ModelConfig;
    use crate::numeric::Rng;

    #[test]
    fn starts_cover_the_axis() {
        assert_eq!(tile_starts(64, 64, 48), vec![0]);
        assert_eq!(tile_starts(112, 64, 48), vec![0, 48]);
        assert_eq!(tile_starts(100, 40, 30), vec![0, 30, 60]);
        assert_eq!(tile_starts(10, 4, 4), vec![0, 4, 6]);
    }

    #[test]
    fn tiny_model_windows() {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                in_channels: 3,
                channels: vec![3],
                kernel_sizes: vec![1],
            },
            head: crate::head::HeadKind::Global,
            ..Default::default()
        };
        let m = Model::<f64>::init(cfg, 2, 0).unwrap();
        let img = Tensor::uniform(&[3, 6, 8], 0.0, 1.0, &mut Rng::new(1));
        let whole = m.forward(&img).unwrap().logits;
        // a pointwise model gives identical logits however it is tiled
        let ev = EvalConfig {
            window: 4,
            stride: 2,
            ..Default::default()
        };
        let tiled = sliding_window_predict(&m, &img, &ev).unwrap();
        assert!(tiled.max_abs_diff(&whole) < 1e-12);
    }
}
