//! Single-image feature extractor on the super-resolved grid and its RGB
//! head.
//!
//! Every variant starts from the bicubic upsample of the low-resolution
//! image. The RGB head is a zero-initialized 1x1 convolution added to that
//! upsample, so a fresh model reproduces bicubic interpolation exactly.

use alloc::format;
use alloc::string::String;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{glorot, Binding, ParamStore};
use crate::resample::bicubic_upsample;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Name prefix shared by every extractor parameter.
pub const PREFIX: &str = "sisr.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SisrVariant {
    BicubicConv1,
    BicubicConv3,
    ResidualStack,
}

impl SisrVariant {
    pub fn name(self) -> &'static str {
        match self {
            SisrVariant::BicubicConv1 => "bicubic_conv1",
            SisrVariant::BicubicConv3 => "bicubic_conv3",
            SisrVariant::ResidualStack => "residual_stack",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bicubic_conv1" => Ok(SisrVariant::BicubicConv1),
            "bicubic_conv3" => Ok(SisrVariant::BicubicConv3),
            "residual_stack" => Ok(SisrVariant::ResidualStack),
            other => Err(Error::Config(format!("unknown extractor variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SisrConfig {
    pub variant: SisrVariant,
    pub channels: usize,
    /// Residual blocks; used by [`SisrVariant::ResidualStack`] only.
    pub depth: usize,
}

impl Default for SisrConfig {
    fn default() -> Self {
        Self {
            variant: SisrVariant::ResidualStack,
            channels: 16,
            depth: 2,
        }
    }
}

impl SisrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 3 {
            return Err(Error::Config(format!(
                "feature channels must be at least 3, got {}",
                self.channels
            )));
        }
        if self.depth < 1 {
            return Err(Error::Config("residual depth must be at least 1".into()));
        }
        Ok(())
    }

    fn input_kernel(&self) -> usize {
        match self.variant {
            SisrVariant::BicubicConv1 => 1,
            _ => 3,
        }
    }
}

fn conv_name(prefix: &str) -> (String, String) {
    (format!("{prefix}.w"), format!("{prefix}.b"))
}

fn init_conv<T: Scalar, R: Rng + ?Sized>(
    p: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    k: usize,
    cin: usize,
    cout: usize,
) {
    let (w, b) = conv_name(prefix);
    p.insert(w, glorot(rng, &[k, k, cin, cout], k * k * cin, k * k * cout));
    p.insert(b, Tensor::zeros(&[cout]));
}

/// Writes freshly initialized extractor and RGB-head weights into `p`.
pub fn init_sisr<T: Scalar, R: Rng + ?Sized>(p: &mut ParamStore<T>, rng: &mut R, cfg: &SisrConfig) -> Result<()> {
    cfg.validate()?;
    let c = cfg.channels;
    init_conv(p, rng, "sisr.in", cfg.input_kernel(), 3, c);
    if cfg.variant == SisrVariant::ResidualStack {
        for i in 0..cfg.depth {
            init_conv(p, rng, &format!("sisr.block{i}.conv1"), 3, c, c);
            init_conv(p, rng, &format!("sisr.block{i}.conv2"), 3, c, c);
        }
    }
    p.insert("sisr.rgb.w", Tensor::zeros(&[1, 1, c, 3]));
    p.insert("sisr.rgb.b", Tensor::zeros(&[3]));
    Ok(())
}

fn conv<T: Scalar>(g: &mut Graph<T>, b: &Binding, prefix: &str, x: Var) -> Result<Var> {
    let (w, bias) = conv_name(prefix);
    let y = g.conv2d(x, b.get(&w)?)?;
    g.add_bias(y, b.get(&bias)?)
}

/// Extractor output for one view.
#[derive(Debug, Clone, Copy)]
pub struct SisrFeatures {
    /// Bicubic upsample of the input, `[sH, sW, 3]`, a graph constant.
    pub upsampled: Var,
    /// `[sH, sW, C]`.
    pub features: Var,
}

/// Features on the `s`-times grid of a `[H, W, 3]` image.
pub fn extract_features<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    cfg: &SisrConfig,
    lr: &Tensor<T>,
    s: usize,
) -> Result<SisrFeatures> {
    cfg.validate()?;
    if lr.rank() != 3 || lr.shape()[2] != 3 {
        return Err(Error::Shape(format!("expected an [H,W,3] image, got {:?}", lr.shape())));
    }
    let upsampled = g.constant(bicubic_upsample(lr, s)?);
    let mut x = conv(g, b, "sisr.in", upsampled)?;
    if cfg.variant == SisrVariant::ResidualStack {
        for i in 0..cfg.depth {
            let h = conv(g, b, &format!("sisr.block{i}.conv1"), x)?;
            let h = g.relu(h)?;
            let h = conv(g, b, &format!("sisr.block{i}.conv2"), h)?;
            x = g.add(x, h)?;
        }
    }
    Ok(SisrFeatures { upsampled, features: x })
}

/// `upsampled + conv1x1(features)`: the single-image prediction.
pub fn project_to_rgb<T: Scalar>(g: &mut Graph<T>, b: &Binding, out: SisrFeatures) -> Result<Var> {
    let rgb = conv(g, b, "sisr.rgb", out.features)?;
    g.add(out.upsampled, rgb)
}
