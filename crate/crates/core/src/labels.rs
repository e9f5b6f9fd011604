use crate::error::{Error, Result};
use crate::numeric::{Element, Tensor};

/// Label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;

/// Integer class mask `[H×W]`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim("LabelMask::new", height * width, data.len()));
        }
        Ok(LabelMask { height, width, data })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMask {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Number of non-ignored pixels.
    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != IGNORE).count()
    }

    /// Pixel counts per class; ignored pixels are not counted.
    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &v in &self.data {
            if (v as usize) < classes {
                h[v as usize] += 1;
            }
        }
        h
    }

    /// Errors if any non-ignored label is `>= classes`.
    pub fn check_range(&self, classes: usize) -> Result<()> {
        if let Some(&bad) = self.data.iter().find(|&&v| v != IGNORE && v as usize >= classes) {
            return Err(Error::Range {
                what: "label",
                detail: format!("{bad} with {classes} classes"),
            });
        }
        Ok(())
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            out.data[y * self.width..(y + 1) * self.width].reverse();
        }
        out
    }

    /// Per-pixel argmax over the channel axis of `[C×H×W]` scores; ties go
    /// to the lower class index.
    pub fn argmax<T: Element>(scores: &Tensor<T>) -> Result<Self> {
        scores.expect_rank("argmax", 3)?;
        let (c, h, w) = (scores.shape()[0], scores.shape()[1], scores.shape()[2]);
        if c == 0 || c > IGNORE as usize {
            return Err(Error::dim("argmax", "1..=255 channels", c));
        }
        let n = h * w;
        let d = scores.data();
        let data = (0..n)
            .map(|j| {
                let mut best = 0;
                for ch in 1..c {
                    if d[ch * n + j] > d[best * n + j] {
                        best = ch;
                    }
                }
                best as u8
            })
            .collect();
        Ok(LabelMask {
            height: h,
            width: w,
            data,
        })
    }
}

/// One-hot encoding `q` of a label mask, `[C×H×W]`; ignored pixels have an
/// all-zero channel vector and `valid[j] == false`.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotMask<T> {
    pub q: Tensor<T>,
    pub valid: Vec<bool>,
}

impl<T: Element> OneHotMask<T> {
    pub fn from_labels(labels: &LabelMask, classes: usize) -> Result<Self> {
        labels.check_range(classes)?;
        let n = labels.len();
        let mut q = vec![T::zero(); classes * n];
        let mut valid = vec![false; n];
        for (j, &v) in labels.data().iter().enumerate() {
            if v != IGNORE {
                q[v as usize * n + j] = T::one();
                valid[j] = true;
            }
        }
        Ok(OneHotMask {
            q: Tensor::from_parts(vec![classes, labels.height(), labels.width()], q),
            valid,
        })
    }

    pub fn classes(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}
