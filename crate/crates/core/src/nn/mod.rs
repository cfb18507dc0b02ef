//! Building blocks and the U-Net model family.
//!
//! Four variants share one topology: a five-level encoder/decoder with
//! bilinear upsampling and skip connections. Variants differ in whether the
//! 3x3 convolutions are depthwise-separable and whether encoder outputs pass
//! through a CBAM attention gate before they are used.

pub mod blocks;
pub mod checkpoint;
mod model;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::parse_kv;

pub use checkpoint::Checkpoint;
pub use model::{LayerCount, Model, ModelOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Unet,
    UnetDsc,
    UnetCbam,
    SmaatUnet,
}

impl Variant {
    /// All variants in ascending parameter count.
    pub const ALL: [Variant; 4] = [Variant::UnetDsc, Variant::SmaatUnet, Variant::Unet, Variant::UnetCbam];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::UnetDsc => "unet_dsc",
            Variant::UnetCbam => "unet_cbam",
            Variant::SmaatUnet => "smaat_unet",
        }
    }

    pub fn separable(self) -> bool {
        matches!(self, Variant::UnetDsc | Variant::SmaatUnet)
    }

    pub fn attention(self) -> bool {
        matches!(self, Variant::UnetCbam | Variant::SmaatUnet)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}; expected one of unet, unet_dsc, unet_cbam, smaat_unet"
                ))
            })
    }
}

/// Declarative architecture description.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    /// Number of resolution levels, bottleneck included.
    pub depth: usize,
    pub cbam_reduction: usize,
    pub spatial_kernel: usize,
    /// Depth multiplier of the depthwise stage in separable convolutions.
    pub kernels_per_layer: usize,
    pub bilinear: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelSpec {
    pub fn new(variant: Variant, in_channels: usize, out_channels: usize) -> Self {
        Self {
            variant,
            in_channels,
            out_channels,
            base_width: 64,
            depth: 5,
            cbam_reduction: 16,
            spatial_kernel: 7,
            kernels_per_layer: 2,
            bilinear: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn with_base_width(mut self, base_width: usize) -> Self {
        self.base_width = base_width;
        self
    }

    /// Channel width of each encoder level; the last entry is the bottleneck,
    /// halved so that the bilinear decoder's concatenations line up.
    pub fn encoder_widths(&self) -> Vec<usize> {
        let mut widths: Vec<usize> = (0..self.depth).map(|i| self.base_width << i).collect();
        if let Some(last) = widths.last_mut() {
            if self.depth > 1 {
                *last /= 2;
            }
        }
        widths
    }

    /// Input height and width must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("in_channels and out_channels must be >= 1".into());
        }
        if self.depth < 2 || self.depth > 8 {
            return bad(format!("depth must be in 2..=8, got {}", self.depth));
        }
        if self.base_width < 2 || self.base_width % 2 != 0 {
            return bad(format!("base_width must be even and >= 2, got {}", self.base_width));
        }
        if !self.bilinear {
            return bad("bilinear=false (transposed-convolution decoder) is not supported".into());
        }
        if self.variant.separable() && self.kernels_per_layer == 0 {
            return bad("kernels_per_layer must be >= 1".into());
        }
        if self.variant.attention() {
            if self.spatial_kernel % 2 == 0 {
                return bad(format!("spatial_kernel must be odd, got {}", self.spatial_kernel));
            }
            let r = self.cbam_reduction;
            if r == 0 {
                return bad("cbam_reduction must be >= 1".into());
            }
            if let Some(w) = self.encoder_widths().into_iter().find(|w| w % r != 0) {
                return bad(format!("cbam_reduction {r} does not divide encoder width {w}"));
            }
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_eps > 0.0) {
            return bad("bn_momentum must be in (0,1] and bn_eps > 0".into());
        }
        Ok(())
    }

    /// `key=value` lines, the inverse of [`ModelSpec::from_kv`].
    pub fn to_kv(&self) -> String {
        format!(
            "variant={}\nin_channels={}\nout_channels={}\nbase_width={}\ndepth={}\n\
             cbam_reduction={}\nspatial_kernel={}\nkernels_per_layer={}\nbilinear={}\n\
             bn_momentum={}\nbn_eps={}\n",
            self.variant,
            self.in_channels,
            self.out_channels,
            self.base_width,
            self.depth,
            self.cbam_reduction,
            self.spatial_kernel,
            self.kernels_per_layer,
            self.bilinear,
            self.bn_momentum,
            self.bn_eps,
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut spec = ModelSpec::new(Variant::Unet, 0, 0);
        let mut seen_variant = false;
        for (k, v) in parse_kv(text)? {
            spec.set(&k, &v)?;
            seen_variant |= k == "variant";
        }
        if !seen_variant {
            return Err(Error::Config("model spec is missing `variant`".into()));
        }
        Ok(spec)
    }

    /// Sets one field by its `key=value` name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "variant" => self.variant = value.parse()?,
            "in_channels" => self.in_channels = num(key, value)?,
            "out_channels" => self.out_channels = num(key, value)?,
            "base_width" => self.base_width = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "cbam_reduction" => self.cbam_reduction = num(key, value)?,
            "spatial_kernel" => self.spatial_kernel = num(key, value)?,
            "kernels_per_layer" => self.kernels_per_layer = num(key, value)?,
            "bilinear" => self.bilinear = num(key, value)?,
            "bn_momentum" => self.bn_momentum = num(key, value)?,
            "bn_eps" => self.bn_eps = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 11] = [
        "variant",
        "in_channels",
        "out_channels",
        "base_width",
        "depth",
        "cbam_reduction",
        "spatial_kernel",
        "kernels_per_layer",
        "bilinear",
        "bn_momentum",
        "bn_eps",
    ];
}
