//! Small stride-1 fully-convolutional feature extractor.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamSet};
use crate::error::{Error, Result};
use crate::numeric::{conv2d_forward, Element, Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> ConvLayerParams<T> {
    /// Same-size layer: stride 1, padding `(k - 1) / 2`.
    pub fn same(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        weight.expect_rank("ConvLayerParams", 4)?;
        let (kh, kw) = (weight.shape()[2], weight.shape()[3]);
        for k in [kh, kw] {
            if k != 1 && k != 3 {
                return Err(Error::dim("ConvLayerParams", "kernel size 1 or 3", k));
            }
        }
        if kh != kw {
            return Err(Error::dim("ConvLayerParams", "square kernel", format!("{kh}x{kw}")));
        }
        bias.expect_shape("ConvLayerParams", &[weight.shape()[0]])?;
        Ok(ConvLayerParams {
            weight,
            bias,
            stride: 1,
            padding: (kh - 1) / 2,
        })
    }
}

/// Cross-correlation plus bias; `H' = (H + 2·pad − kh)/stride + 1`.
pub fn conv2d<T: Element>(x: &Tensor<T>, p: &ConvLayerParams<T>) -> Result<Tensor<T>> {
    conv2d_forward(x, &p.weight, &p.bias, p.stride, p.padding)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output channels per conv+relu layer; the last entry is the feature
    /// width C̃.
    pub channels: Vec<usize>,
    /// Square kernel size per layer, each 1 or 3.
    pub kernel_sizes: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            channels: vec![16, 32, 32],
            kernel_sizes: vec![3, 1, 1],
        }
    }
}

impl BackboneConfig {
    pub fn feature_channels(&self) -> usize {
        self.channels.last().copied().unwrap_or(self.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("backbone needs at least one layer".into()));
        }
        if self.channels.len() != self.kernel_sizes.len() {
            return Err(Error::Config(format!(
                "backbone has {} channel entries but {} kernel sizes",
                self.channels.len(),
                self.kernel_sizes.len()
            )));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k != 1 && k != 3) {
            return Err(Error::Config(format!("backbone kernel size {k} (must be 1 or 3)")));
        }
        if self.in_channels == 0 || self.channels.contains(&0) {
            return Err(Error::Config("backbone channel counts must be positive".into()));
        }
        Ok(())
    }

    fn layer_dims(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let ins = std::iter::once(self.in_channels).chain(self.channels.iter().copied());
        ins.zip(&self.channels)
            .zip(&self.kernel_sizes)
            .enumerate()
            .map(|(i, ((cin, &cout), &k))| (i, cin, cout, k))
    }

    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut m = BTreeMap::new();
        for (i, cin, cout, k) in self.layer_dims() {
            m.insert(weight_name(i), vec![cout, cin, k, k]);
            m.insert(bias_name(i), vec![cout]);
        }
        m
    }

    /// He-normal weights, zero biases.
    pub fn init<T: Element>(&self, rng: &mut Rng, params: &mut ParamSet<T>) {
        for (i, cin, cout, k) in self.layer_dims() {
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            params.insert(weight_name(i), Tensor::randn(&[cout, cin, k, k], std, rng));
            params.insert(bias_name(i), Tensor::zeros(&[cout]));
        }
    }

    pub fn layers<T: Element>(&self, params: &ParamSet<T>) -> Result<Vec<ConvLayerParams<T>>> {
        (0..self.channels.len())
            .map(|i| {
                ConvLayerParams::same(
                    params.get(&weight_name(i))?.clone(),
                    params.get(&bias_name(i))?.clone(),
                )
            })
            .collect()
    }
}

pub(crate) fn weight_name(i: usize) -> String {
    format!("backbone.{i}.weight")
}

pub(crate) fn bias_name(i: usize) -> String {
    format!("backbone.{i}.bias")
}

/// Stack of conv+relu layers; output `[C̃×H×W]` at the input's spatial size.
pub fn backbone_forward<T: Element>(image: &Tensor<T>, cfg: &BackboneConfig, params: &ParamSet<T>) -> Result<Tensor<T>> {
    image.expect_rank("backbone_forward", 3)?;
    if image.shape()[0] != cfg.in_channels {
        return Err(Error::dim(
            "backbone_forward",
            format!("{} input channels", cfg.in_channels),
            format!("{:?}", image.shape()),
        ));
    }
    let mut x = image.clone();
    for (i, layer) in cfg.layers(params)?.iter().enumerate() {
        x = conv2d(&x, layer)
            .map_err(|e| match e {
                Error::Dimension { expected, got, .. } => Error::Dimension {
                    op: "backbone_forward",
                    expected: format!("layer {i}: {expected}"),
                    got,
                },
                other => other,
            })?
            .relu();
    }
    Ok(x)
}

/// Tape version of [`backbone_forward`]; `nodes` maps parameter names to
/// already-bound leaves.
pub fn backbone_graph<T: Element>(
    g: &mut Graph<T>,
    image: NodeId,
    cfg: &BackboneConfig,
    nodes: &BTreeMap<String, NodeId>,
) -> Result<NodeId> {
    let mut x = image;
    for i in 0..cfg.channels.len() {
        let w = *nodes
            .get(&weight_name(i))
            .ok_or_else(|| Error::Contract(format!("unbound {}", weight_name(i))))?;
        let b = *nodes
            .get(&bias_name(i))
            .ok_or_else(|| Error::Contract(format!("unbound {}", bias_name(i))))?;
        let k = cfg.kernel_sizes[i];
        let y = g.conv2d(x, w, b, 1, (k - 1) / 2)?;
        x = g.relu(y);
    }
    Ok(x)
}
