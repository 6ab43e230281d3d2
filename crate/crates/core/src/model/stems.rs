//! Vision input stages: linear patch projection or the convolutional
//! early-specialization pyramid.

use msclip_numerics::{Conv2dSpec, Scalar, Var};

use super::layers::{BnIds, ConvIds, Fwd};
use crate::config::EncoderConfig;
use crate::params::{Group, Layout};
use crate::Result;

/// `out = bn(proj(x)) + gelu(bn(conv3x3(x)))`; the 1×1 projection carries
/// the skip path across the change in resolution and width.
#[derive(Clone, Copy, Debug)]
pub struct ResidualConv {
    pub conv: ConvIds,
    pub bn: BnIds,
    pub proj: ConvIds,
    pub proj_bn: BnIds,
}

#[derive(Clone, Debug)]
pub struct EarlySpecStem {
    pub first: ConvIds,
    pub first_bn: BnIds,
    pub stages: Vec<ResidualConv>,
    /// Final 1×1 conv at the token grid.
    pub head: ConvIds,
}

/// One stem stage as (kernel, stride, in, out, residual).
pub type StageGeometry = (usize, usize, usize, usize, bool);

impl EarlySpecStem {
    /// Stage layout for a config: five 3×3 stages of width `width/16 · 2^i`
    /// whose first log2(patch) strides are 2, then a 1×1 conv.
    pub fn geometry(cfg: &EncoderConfig) -> Vec<StageGeometry> {
        let ds = cfg.downsample_stages();
        let mut out = Vec::with_capacity(6);
        let mut prev = 3;
        for i in 0..5 {
            let dim = (cfg.width / 16) << i;
            let stride = if i < ds { 2 } else { 1 };
            out.push((3, stride, prev, dim, i > 0));
            prev = dim;
        }
        out.push((1, 1, prev, cfg.width, false));
        out
    }

    pub fn declare(l: &mut Layout, cfg: &EncoderConfig) -> Self {
        let g = Group::Vision;
        let geo = Self::geometry(cfg);
        let (k, s, i, o, _) = geo[0];
        let first = ConvIds::declare(l, "vision.stem.early.0.conv", i, o, k, Conv2dSpec::new(s, 1), false, g);
        let first_bn = BnIds::declare(l, "vision.stem.early.0.bn", o, g);
        let stages = geo[1..5]
            .iter()
            .enumerate()
            .map(|(j, &(k, s, i, o, _))| {
                let p = format!("vision.stem.early.{}", j + 1);
                ResidualConv {
                    conv: ConvIds::declare(l, &format!("{p}.conv"), i, o, k, Conv2dSpec::new(s, 1), false, g),
                    bn: BnIds::declare(l, &format!("{p}.bn"), o, g),
                    proj: ConvIds::declare(l, &format!("{p}.proj"), i, o, 1, Conv2dSpec::new(s, 0), false, g),
                    proj_bn: BnIds::declare(l, &format!("{p}.proj_bn"), o, g),
                }
            })
            .collect();
        let (k, _, i, o, _) = geo[5];
        let head = ConvIds::declare(l, "vision.stem.early.5.conv", i, o, k, Conv2dSpec::new(1, 0), true, g);
        Self { first, first_bn, stages, head }
    }

    /// `[B, 3, H, W]` to `[B, width, grid, grid]`, plus every stage output
    /// when `keep` is set.
    pub(crate) fn forward<T: Scalar>(
        &self,
        f: &mut Fwd<'_, '_, T>,
        x: Var,
        keep: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let mut outs = Vec::with_capacity(6);
        let h = f.conv(x, &self.first)?;
        let h = f.batch_norm(h, &self.first_bn)?;
        let mut h = f.gelu(h)?;
        outs.push(h);
        for st in &self.stages {
            h = residual_conv(f, h, st)?;
            outs.push(h);
        }
        let h = f.conv(h, &self.head)?;
        outs.push(h);
        if let Some(k) = keep {
            *k = outs;
        }
        Ok(h)
    }
}

pub(crate) fn residual_conv<T: Scalar>(f: &mut Fwd<'_, '_, T>, x: Var, st: &ResidualConv) -> Result<Var> {
    let main = f.conv(x, &st.conv)?;
    let main = f.batch_norm(main, &st.bn)?;
    let main = f.gelu(main)?;
    let skip = f.conv(x, &st.proj)?;
    let skip = f.batch_norm(skip, &st.proj_bn)?;
    Ok(f.tape.add(skip, main)?)
}

#[derive(Clone, Copy, Debug)]
pub struct PatchStem {
    /// Non-overlapping `patch × patch` conv with stride `patch`.
    pub conv: ConvIds,
}

impl PatchStem {
    pub fn declare(l: &mut Layout, cfg: &EncoderConfig) -> Self {
        let p = cfg.patch_size;
        let conv =
            ConvIds::declare(l, "vision.stem.patch", 3, cfg.width, p, Conv2dSpec::new(p, 0), true, Group::Vision);
        Self { conv }
    }
}

#[derive(Clone, Debug)]
pub enum VisionStem {
    Patch(PatchStem),
    Early(EarlySpecStem),
}

impl VisionStem {
    pub(crate) fn forward<T: Scalar>(&self, f: &mut Fwd<'_, '_, T>, x: Var) -> Result<Var> {
        match self {
            VisionStem::Patch(p) => f.conv(x, &p.conv),
            VisionStem::Early(e) => e.forward(f, x, None),
        }
    }
}
