//! The slimmable ViT.
//!
//! Layout follows DeiT: patch embedding, class and distillation tokens,
//! learned positional embedding, pre-LN transformer blocks and two linear
//! heads. Every sub-network reads sliced views of one [`ParamStore`]; the
//! number of attention heads stays constant and the per-head width scales
//! with the ratio.

mod params;
mod vit;

pub use params::{init_params, param_layout, Param, ParamDef, ParamInit, ParamStore};
pub use vit::{export_subnet, forward, infer, patchify, predict, SubnetLogits, SubnetOutput};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slicing::{mode_for, RatioGrid, SliceMode, WidthRatio};

pub const LAYER_NORM_EPS: f64 = 1e-6;

fn default_mlp_ratio() -> usize {
    4
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// `None` for a standalone (non-slimmable) network, which only runs at
    /// ratio 1.
    #[serde(default)]
    pub grid: Option<RatioGrid>,
    #[serde(default = "default_true")]
    pub isolated_activation: bool,
}

/// A resolved sub-network: which width, sliced from which end.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Subnet {
    pub ratio: WidthRatio,
    pub mode: SliceMode,
}

impl Subnet {
    pub fn full() -> Self {
        Subnet {
            ratio: WidthRatio::one(),
            mode: SliceMode::Leading,
        }
    }
}

impl ModelConfig {
    /// DeiT-S/16 at 224 px with 1000 classes.
    pub fn deit_small() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            in_channels: 3,
            embed_dim: 384,
            num_heads: 6,
            depth: 12,
            mlp_ratio: 4,
            num_classes: 1000,
            grid: Some(RatioGrid::parse("1/4", "1", "1/16").expect("static grid")),
            isolated_activation: true,
        }
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    /// Patches plus the class and distillation tokens.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 2
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.image_size", self.image_size),
            ("model.patch_size", self.patch_size),
            ("model.in_channels", self.in_channels),
            ("model.embed_dim", self.embed_dim),
            ("model.num_heads", self.num_heads),
            ("model.depth", self.depth),
            ("model.mlp_ratio", self.mlp_ratio),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::validation(field, "must be positive"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::validation(
                "model.patch_size",
                format!("{} does not divide image size {}", self.patch_size, self.image_size),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::validation("model.num_classes", "need at least 2 classes"));
        }
        let mut ratios = vec![WidthRatio::one()];
        ratios.extend(self.grid.iter().flat_map(RatioGrid::points));
        // width integrality first so a bad embed_dim is not reported as a
        // head-count problem
        for &r in &ratios {
            self.sliced_width(r)?;
        }
        for &r in &ratios {
            self.check_ratio(r)?;
        }
        Ok(())
    }

    fn sliced_width(&self, r: WidthRatio) -> Result<usize> {
        let d = r.of(self.embed_dim).ok_or_else(|| {
            Error::validation(
                "model.embed_dim",
                format!("ratio {r}: {r} x {} is not an integer", self.embed_dim),
            )
        })?;
        r.of(self.hidden_dim()).ok_or_else(|| {
            Error::validation(
                "model.mlp_ratio",
                format!("ratio {r}: {r} x hidden {} is not an integer", self.hidden_dim()),
            )
        })?;
        Ok(d)
    }

    /// Integrality and head-divisibility of the sliced widths at `r`.
    pub fn check_ratio(&self, r: WidthRatio) -> Result<()> {
        let d = self.sliced_width(r)?;
        if d % self.num_heads != 0 {
            return Err(Error::validation(
                "model.num_heads",
                format!("ratio {r}: sliced width {d} is not divisible by {} heads", self.num_heads),
            ));
        }
        Ok(())
    }

    /// Sub-network for an on-grid ratio, sliced per the isolated-activation
    /// rule.
    pub fn subnet(&self, r: WidthRatio) -> Result<Subnet> {
        let mode = match &self.grid {
            Some(grid) => mode_for(r, grid, self.isolated_activation)?,
            None if r.is_full() => SliceMode::Leading,
            None => {
                return Err(Error::validation(
                    "ratio",
                    format!("{r} requested from a standalone network (only 1 is available)"),
                ))
            }
        };
        Ok(Subnet { ratio: r, mode })
    }

    /// Sub-network for any ratio passing the divisibility checks, including
    /// ratios never trained. Off-grid ratios use leading slices.
    pub fn probe_subnet(&self, r: WidthRatio) -> Result<Subnet> {
        self.check_ratio(r)?;
        let on_grid = self.grid.as_ref().is_some_and(|g| g.contains(r));
        if on_grid {
            return self.subnet(r);
        }
        Ok(Subnet {
            ratio: r,
            mode: SliceMode::Leading,
        })
    }

    /// The architecture of a standalone network of width `r * D`.
    pub fn standalone(&self, r: WidthRatio) -> Result<ModelConfig> {
        self.check_ratio(r)?;
        Ok(ModelConfig {
            embed_dim: r.of(self.embed_dim).expect("checked"),
            grid: None,
            isolated_activation: false,
            ..self.clone()
        })
    }
}
