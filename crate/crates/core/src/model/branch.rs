//! Parallel multi-scale convolution branch and the adapters that fuse it
//! into the token stream.

use msclip_numerics::{Conv2dSpec, Scalar, Var};

use super::layers::{BnIds, ConvIds, Fwd, NormIds};
use crate::config::{AdapterVariant, EncoderConfig};
use crate::error::{input, Result};
use crate::params::{Group, Layout};

/// ResNet bottleneck: 1×1 reduce, strided 3×3, 1×1 expand, with a strided
/// 1×1 projection shortcut.
#[derive(Clone, Copy, Debug)]
pub struct Bottleneck {
    pub reduce: ConvIds,
    pub reduce_bn: BnIds,
    pub conv: ConvIds,
    pub conv_bn: BnIds,
    pub expand: ConvIds,
    pub expand_bn: BnIds,
    pub shortcut: ConvIds,
    pub shortcut_bn: BnIds,
}

#[allow(clippy::large_enum_variant)]
#[derive(Clone, Copy, Debug)]
pub enum BranchStage {
    Plain { conv: ConvIds, bn: BnIds },
    Bottleneck(Bottleneck),
}

/// `H'_p = bn(PW(DW(H_p)))`, `H' = ln(bn(DW(H)) + H'_p)` on patch tokens.
#[derive(Clone, Copy, Debug)]
pub struct Adapter {
    /// Depthwise `k×k`, stride `k`, from the stage resolution to the grid.
    /// Average pooling with the same geometry in the pooled variant.
    pub branch_dw: Option<ConvIds>,
    pub pool_kernel: usize,
    pub branch_pw: ConvIds,
    pub branch_bn: BnIds,
    /// Depthwise 3×3 on the token grid; pooled in the pooled variant.
    pub main_dw: Option<ConvIds>,
    pub main_bn: BnIds,
    pub ln: NormIds,
    /// Encoder layer whose input this adapter rewrites.
    pub layer: usize,
}

#[derive(Clone, Debug)]
pub struct ParallelBranch {
    pub stages: Vec<BranchStage>,
    pub adapters: Vec<Adapter>,
    pub variant: AdapterVariant,
}

impl ParallelBranch {
    pub fn declare(l: &mut Layout, cfg: &EncoderConfig) -> Self {
        let g = Group::Vision;
        let n = cfg.branch_stages();
        let res = cfg.pyramid_resolutions();
        let grid = cfg.grid();
        let ch = &cfg.branch_channels;
        let mut stages = Vec::with_capacity(n);
        let mut prev_res = cfg.image_size;
        let mut prev_c = 3;
        for k in 0..n {
            let stride = prev_res / res[k];
            let p = format!("vision.branch.{k}");
            let out = ch[k];
            stages.push(if k == 0 {
                BranchStage::Plain {
                    conv: ConvIds::declare(
                        l,
                        &format!("{p}.conv"),
                        prev_c,
                        out,
                        3,
                        Conv2dSpec::new(stride, 1),
                        false,
                        g,
                    ),
                    bn: BnIds::declare(l, &format!("{p}.bn"), out, g),
                }
            } else {
                let mid = out / 4;
                BranchStage::Bottleneck(Bottleneck {
                    reduce: ConvIds::declare(
                        l,
                        &format!("{p}.reduce"),
                        prev_c,
                        mid,
                        1,
                        Conv2dSpec::new(1, 0),
                        false,
                        g,
                    ),
                    reduce_bn: BnIds::declare(l, &format!("{p}.reduce_bn"), mid, g),
                    conv: ConvIds::declare(l, &format!("{p}.conv"), mid, mid, 3, Conv2dSpec::new(stride, 1), false, g),
                    conv_bn: BnIds::declare(l, &format!("{p}.conv_bn"), mid, g),
                    expand: ConvIds::declare(l, &format!("{p}.expand"), mid, out, 1, Conv2dSpec::new(1, 0), false, g),
                    expand_bn: BnIds::declare(l, &format!("{p}.expand_bn"), out, g),
                    shortcut: ConvIds::declare(
                        l,
                        &format!("{p}.shortcut"),
                        prev_c,
                        out,
                        1,
                        Conv2dSpec::new(stride, 0),
                        false,
                        g,
                    ),
                    shortcut_bn: BnIds::declare(l, &format!("{p}.shortcut_bn"), out, g),
                })
            });
            prev_res = res[k];
            prev_c = out;
        }

        let w = cfg.width;
        let pooled = cfg.adapter_variant == AdapterVariant::AvgpoolFfn;
        let adapters = (0..n)
            .map(|k| {
                let p = format!("vision.adapter.{k}");
                let c = ch[k];
                let kk = res[k] / grid;
                let dw = |l: &mut Layout, name: &str, ch: usize, k: usize, spec: Conv2dSpec| {
                    ConvIds::declare(l, name, ch, ch, k, spec.groups(ch), true, g)
                };
                Adapter {
                    branch_dw: (!pooled).then(|| dw(l, &format!("{p}.branch_dw"), c, kk, Conv2dSpec::new(kk, 0))),
                    pool_kernel: kk,
                    branch_pw: ConvIds::declare(l, &format!("{p}.branch_pw"), c, w, 1, Conv2dSpec::new(1, 0), true, g),
                    branch_bn: BnIds::declare(l, &format!("{p}.branch_bn"), w, g),
                    main_dw: (!pooled).then(|| dw(l, &format!("{p}.main_dw"), w, 3, Conv2dSpec::new(1, 1))),
                    main_bn: BnIds::declare(l, &format!("{p}.main_bn"), w, g),
                    ln: NormIds::declare(l, &format!("{p}.ln"), w, g),
                    layer: cfg.fusion_layers[k],
                }
            })
            .collect();
        Self { stages, adapters, variant: cfg.adapter_variant }
    }

    /// Feature maps of every stage, `[B, c_k, r_k, r_k]`.
    pub(crate) fn forward<T: Scalar>(&self, f: &mut Fwd<'_, '_, T>, image: Var) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(self.stages.len());
        let mut h = image;
        for st in &self.stages {
            h = match st {
                BranchStage::Plain { conv, bn } => {
                    let y = f.conv(h, conv)?;
                    let y = f.batch_norm(y, bn)?;
                    f.gelu(y)?
                }
                BranchStage::Bottleneck(b) => {
                    let y = f.conv(h, &b.reduce)?;
                    let y = f.batch_norm(y, &b.reduce_bn)?;
                    let y = f.gelu(y)?;
                    let y = f.conv(y, &b.conv)?;
                    let y = f.batch_norm(y, &b.conv_bn)?;
                    let y = f.gelu(y)?;
                    let y = f.conv(y, &b.expand)?;
                    let y = f.batch_norm(y, &b.expand_bn)?;
                    let s = f.conv(h, &b.shortcut)?;
                    let s = f.batch_norm(s, &b.shortcut_bn)?;
                    let y = f.tape.add(y, s)?;
                    f.gelu(y)?
                }
            };
            outs.push(h);
        }
        Ok(outs)
    }

    pub fn adapter_for_layer(&self, layer: usize) -> Option<usize> {
        self.adapters.iter().position(|a| a.layer == layer)
    }
}

impl Adapter {
    /// Fuses `feature: [B, c, r, r]` into the patch tokens of `h: [B, 1+N, W]`.
    /// The CLS row is carried through untouched.
    pub(crate) fn fuse<T: Scalar>(&self, f: &mut Fwd<'_, '_, T>, h: Var, feature: Var) -> Result<Var> {
        let shape = f.tape.shape(h).to_vec();
        let [b, t, w] = shape[..] else {
            return Err(input(format!("adapter expects [batch, tokens, width], got {shape:?}")));
        };
        let n = t - 1;
        let grid = (n as f64).sqrt().round() as usize;
        if grid * grid != n {
            return Err(input(format!("{n} patch tokens do not form a square grid")));
        }
        let fs = f.tape.shape(feature).to_vec();
        if fs.len() != 4 || fs[0] != b || fs[2] != grid * self.pool_kernel || fs[3] != grid * self.pool_kernel {
            return Err(msclip_numerics::NumericsError::Dimension {
                op: "adapter",
                lhs: fs,
                rhs: vec![b, 0, grid * self.pool_kernel, grid * self.pool_kernel],
            }
            .into());
        }

        let cls = f.tape.slice(h, 1, 0, 1)?;
        let patches = f.tape.slice(h, 1, 1, n)?;
        let patches = f.tape.permute(patches, &[0, 2, 1])?;
        let patches = f.tape.reshape(patches, &[b, w, grid, grid])?;

        let main = match &self.main_dw {
            Some(dw) => f.conv(patches, dw)?,
            None => f.tape.avg_pool2d(patches, 3, Conv2dSpec::new(1, 1))?,
        };
        let main = f.batch_norm(main, &self.main_bn)?;

        let k = self.pool_kernel;
        let side = match &self.branch_dw {
            Some(dw) => f.conv(feature, dw)?,
            None => f.tape.avg_pool2d(feature, k, Conv2dSpec::new(k, 0))?,
        };
        let side = f.conv(side, &self.branch_pw)?;
        let side = f.batch_norm(side, &self.branch_bn)?;

        let fused = f.tape.add(main, side)?;
        let fused = f.tape.reshape(fused, &[b, w, n])?;
        let fused = f.tape.permute(fused, &[0, 2, 1])?;
        let fused = f.layer_norm(fused, &self.ln)?;
        Ok(f.tape.concat(&[cls, fused], 1)?)
    }
}
