//! Model, sharing-policy and experiment configuration.
//!
//! Config files are TOML; the flat `section.key = value` form is what
//! [`ExperimentConfig::to_toml`] writes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config, MsClipError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterVariant {
    /// Depthwise convolutions on both adapter paths.
    Dwconv,
    /// Depthwise convolutions replaced by average pooling with the same
    /// kernel, stride and padding.
    AvgpoolFfn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    /// Vision width, and text width whenever any submodule is shared.
    pub width: usize,
    pub heads: usize,
    /// Text transformer width; only differs from `width` for the plain CLIP
    /// baseline.
    pub text_width: usize,
    pub text_heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub early_specialization: bool,
    pub parallel_branch: bool,
    pub adapter_variant: AdapterVariant,
    /// Output channels of the five parallel-branch stages.
    pub branch_channels: Vec<usize>,
    /// 0-indexed encoder layers whose *input* receives adapter `k`'s output.
    /// The default `[1, 3, 5, 7, 9]` is layers 2,4,6,8,10 counted from one.
    pub fusion_layers: Vec<usize>,
    pub ln_eps: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl EncoderConfig {
    /// ViT-B sized encoder with the given patch size (32 or 16).
    pub fn base(patch_size: usize) -> Self {
        Self {
            num_layers: 12,
            width: 768,
            heads: 12,
            text_width: 768,
            text_heads: 12,
            mlp_ratio: 4,
            patch_size,
            image_size: 224,
            context_length: 77,
            vocab_size: 49408,
            embed_dim: 512,
            early_specialization: false,
            parallel_branch: false,
            adapter_variant: AdapterVariant::Dwconv,
            branch_channels: default_branch_channels(768),
            fusion_layers: vec![1, 3, 5, 7, 9],
            ln_eps: 1e-5,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Desk-scale encoder: 64×64 images, width 128, 4 layers.
    pub fn tiny() -> Self {
        Self {
            num_layers: 4,
            width: 128,
            heads: 4,
            text_width: 128,
            text_heads: 4,
            patch_size: 16,
            image_size: 64,
            context_length: 16,
            vocab_size: 512,
            embed_dim: 64,
            branch_channels: default_branch_channels(128),
            fusion_layers: vec![1, 3],
            ..Self::base(16)
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Vision tokens entering the stack: patches plus CLS.
    pub fn vision_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    /// Number of stride-2 stages needed to bring the image down to the grid.
    pub fn downsample_stages(&self) -> usize {
        self.patch_size.trailing_zeros() as usize
    }

    /// Parallel-branch stages actually fused: one per valid fusion layer.
    pub fn branch_stages(&self) -> usize {
        if !self.parallel_branch {
            return 0;
        }
        self.fusion_layers.iter().take(5).filter(|&&l| l < self.num_layers).count()
    }

    /// Spatial resolution after each of the five pyramid stages: halving
    /// from the image size, never below the token grid.
    pub fn pyramid_resolutions(&self) -> Vec<usize> {
        let grid = self.grid();
        let mut res = self.image_size;
        (0..5)
            .map(|_| {
                if res / 2 >= grid {
                    res /= 2;
                }
                res
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(config(msg.to_string())) };
        check(self.num_layers >= 1, "num_layers must be at least 1")?;
        check(self.heads > 0 && self.width.is_multiple_of(self.heads), "width must be divisible by heads")?;
        check(
            self.text_heads > 0 && self.text_width.is_multiple_of(self.text_heads),
            "text_width must be divisible by text_heads",
        )?;
        check(
            self.patch_size > 0 && self.image_size.is_multiple_of(self.patch_size),
            "image_size must be divisible by patch_size",
        )?;
        check(self.context_length >= 2, "context_length must hold BOS and EOS")?;
        check(self.vocab_size >= 4, "vocab_size must hold the special tokens")?;
        check(self.embed_dim > 0 && self.mlp_ratio > 0, "embed_dim and mlp_ratio must be positive")?;
        check(self.ln_eps > 0.0 && self.bn_eps > 0.0, "normalization eps must be positive")?;
        check((0.0..=1.0).contains(&self.bn_momentum), "bn_momentum must lie in [0, 1]")?;
        if self.early_specialization || self.parallel_branch {
            check(self.patch_size.is_power_of_two(), "convolutional stems need a power-of-two patch size")?;
            check(
                self.image_size >> self.downsample_stages() == self.grid(),
                "stem strides do not reach the token grid",
            )?;
        }
        if self.early_specialization {
            check(self.width.is_multiple_of(16), "early specialization needs width divisible by 16")?;
            check(self.downsample_stages() <= 5, "early specialization supports at most 5 stride-2 stages")?;
            check(self.num_layers >= 2, "early specialization needs at least 2 layers")?;
        }
        if self.parallel_branch {
            check(self.branch_channels.len() == 5, "branch_channels needs 5 entries")?;
            check(
                self.branch_channels.iter().all(|&c| c >= 4 && c % 4 == 0),
                "branch channels must be multiples of 4",
            )?;
            check(self.branch_stages() >= 1, "parallel branch has no fusion layer inside the stack")?;
            let mut prev = None;
            for &l in &self.fusion_layers {
                check(prev.is_none_or(|p| l > p), "fusion_layers must be strictly increasing")?;
                prev = Some(l);
            }
            let grid = self.grid();
            for (k, r) in self.pyramid_resolutions().iter().take(self.branch_stages()).enumerate() {
                check(
                    r % grid == 0,
                    &format!("branch stage {k} resolution {r} is not a multiple of the {grid}x{grid} grid"),
                )?;
            }
        }
        Ok(())
    }
}

/// `width · [1/12, 1/6, 1/3, 3/4, 4/3]`, rounded to multiples of 4.
pub fn default_branch_channels(width: usize) -> Vec<usize> {
    [1.0 / 12.0, 1.0 / 6.0, 1.0 / 3.0, 0.75, 4.0 / 3.0]
        .iter()
        .map(|f| (((width as f64 * f) / 4.0).round() as usize).max(1) * 4)
        .collect()
}

/// Which submodules of one encoder layer are stored once for both modalities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct LayerSharing {
    pub attn: bool,
    pub ffn: bool,
    pub ln1: bool,
    pub ln2: bool,
}

impl LayerSharing {
    pub const NONE: Self = Self { attn: false, ffn: false, ln1: false, ln2: false };
    /// Attention and FFN shared, both LayerNorms modality-specific.
    pub const ATTN_FFN: Self = Self { attn: true, ffn: true, ln1: false, ln2: false };

    pub fn any(&self) -> bool {
        self.attn || self.ffn || self.ln1 || self.ln2
    }
}

impl From<LayerSharing> for String {
    fn from(s: LayerSharing) -> String {
        let parts: Vec<&str> = [(s.attn, "attn"), (s.ffn, "ffn"), (s.ln1, "ln1"), (s.ln2, "ln2")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

impl TryFrom<String> for LayerSharing {
    type Error = MsClipError;

    fn try_from(s: String) -> Result<Self> {
        let mut out = Self::NONE;
        if s.trim() == "none" {
            return Ok(out);
        }
        for part in s.split('+').map(str::trim) {
            match part {
                "attn" => out.attn = true,
                "ffn" => out.ffn = true,
                "ln1" => out.ln1 = true,
                "ln2" => out.ln2 = true,
                other => return Err(config(format!("unknown shared submodule {other:?}"))),
            }
        }
        Ok(out)
    }
}

/// Per-layer shared/modality-specific assignment for the encoder stack.
///
/// With early specialization on, layer 0's entry is ignored: vision layer 0
/// is the convolutional stem and text layer 0 is text-specific.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingPolicy {
    pub layers: Vec<LayerSharing>,
}

impl SharingPolicy {
    pub fn uniform(num_layers: usize, s: LayerSharing) -> Self {
        Self { layers: vec![s; num_layers] }
    }

    pub fn share_all(num_layers: usize) -> Self {
        Self::uniform(num_layers, LayerSharing::ATTN_FFN)
    }

    pub fn share_none(num_layers: usize) -> Self {
        Self::uniform(num_layers, LayerSharing::NONE)
    }

    /// Attention and FFN shared in the last `n` layers only.
    pub fn share_last(num_layers: usize, n: usize) -> Self {
        let first = num_layers.saturating_sub(n);
        Self {
            layers: (0..num_layers)
                .map(|l| if l >= first { LayerSharing::ATTN_FFN } else { LayerSharing::NONE })
                .collect(),
        }
    }

    pub fn attn_only(num_layers: usize) -> Self {
        Self::uniform(num_layers, LayerSharing { attn: true, ..LayerSharing::NONE })
    }

    pub fn ffn_only(num_layers: usize) -> Self {
        Self::uniform(num_layers, LayerSharing { ffn: true, ..LayerSharing::NONE })
    }

    pub fn shares_anything(&self) -> bool {
        self.layers.iter().any(LayerSharing::any)
    }
}

/// Named model variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    ClipB32,
    ClipB32T768,
    MsClip,
    MsClipEarly,
    MsClipParallel,
    MsClipS,
    /// MS-CLIP-S with the adapters' depthwise convolutions replaced by
    /// average pooling.
    MsClipSAvgpool,
    ShareLast(usize),
    AttnOnly,
    FfnOnly,
}

impl Preset {
    pub const NAMES: [&'static str; 10] = [
        "clip_b32",
        "clip_b32_t768",
        "ms_clip",
        "ms_clip_early",
        "ms_clip_parallel",
        "ms_clip_s",
        "ms_clip_s_avgpool",
        "share_last_N",
        "attn_only",
        "ffn_only",
    ];

    /// Parses a preset name; `share_last_N` takes its layer count from the
    /// name suffix (`share_last_6`) or from `n`.
    pub fn parse(name: &str, n: Option<usize>) -> Result<Self> {
        if let Some(rest) = name.strip_prefix("share_last_") {
            let k = match rest {
                "N" | "n" => n.ok_or_else(|| config("share_last_N needs a layer count"))?,
                digits => digits.parse().map_err(|_| config(format!("bad share_last count in {name:?}")))?,
            };
            return Ok(Self::ShareLast(k));
        }
        name.parse()
    }

    pub fn encoder_config(self, tiny: bool) -> EncoderConfig {
        let mut cfg = if tiny { EncoderConfig::tiny() } else { EncoderConfig::base(32) };
        match self {
            Self::ClipB32 => {
                cfg.text_width = if tiny { 96 } else { 512 };
                cfg.text_heads = if tiny { 4 } else { 8 };
            }
            Self::MsClipEarly => cfg.early_specialization = true,
            Self::MsClipParallel => cfg.parallel_branch = true,
            Self::MsClipS => {
                cfg.early_specialization = true;
                cfg.parallel_branch = true;
            }
            Self::MsClipSAvgpool => {
                cfg.early_specialization = true;
                cfg.parallel_branch = true;
                cfg.adapter_variant = AdapterVariant::AvgpoolFfn;
            }
            _ => {}
        }
        cfg
    }

    pub fn policy(self, num_layers: usize) -> SharingPolicy {
        match self {
            Self::ClipB32 | Self::ClipB32T768 => SharingPolicy::share_none(num_layers),
            Self::ShareLast(n) => SharingPolicy::share_last(num_layers, n),
            Self::AttnOnly => SharingPolicy::attn_only(num_layers),
            Self::FfnOnly => SharingPolicy::ffn_only(num_layers),
            _ => SharingPolicy::share_all(num_layers),
        }
    }

    pub fn build(self, tiny: bool) -> (EncoderConfig, SharingPolicy) {
        let cfg = self.encoder_config(tiny);
        let policy = self.policy(cfg.num_layers);
        (cfg, policy)
    }
}

impl FromStr for Preset {
    type Err = MsClipError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "clip_b32" => Self::ClipB32,
            "clip_b32_t768" => Self::ClipB32T768,
            "ms_clip" => Self::MsClip,
            "ms_clip_early" => Self::MsClipEarly,
            "ms_clip_parallel" => Self::MsClipParallel,
            "ms_clip_s" => Self::MsClipS,
            "ms_clip_s_avgpool" => Self::MsClipSAvgpool,
            "attn_only" => Self::AttnOnly,
            "ffn_only" => Self::FfnOnly,
            other if other.starts_with("share_last_") => return Self::parse(other, None),
            other => {
                return Err(config(format!("unknown preset {other:?}; expected one of {}", Self::NAMES.join(", "))))
            }
        })
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::ClipB32 => "clip_b32",
            Self::ClipB32T768 => "clip_b32_t768",
            Self::MsClip => "ms_clip",
            Self::MsClipEarly => "ms_clip_early",
            Self::MsClipParallel => "ms_clip_parallel",
            Self::MsClipS => "ms_clip_s",
            Self::MsClipSAvgpool => "ms_clip_s_avgpool",
            Self::ShareLast(n) => return write!(f, "share_last_{n}"),
            Self::AttnOnly => "attn_only",
            Self::FfnOnly => "ffn_only",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { lr_max: 1.6e-3, lr_min: 1.6e-4, warmup_epochs: 5, total_epochs: 30, steps_per_epoch: 1 }
    }
}

impl ScheduleConfig {
    /// Peak and floor scaled down for batch-32 runs of the tiny encoders;
    /// the full-size rates collapse all embeddings onto one point there.
    pub fn tiny() -> Self {
        Self { lr_max: 2e-4, lr_min: 2e-5, ..Self::default() }
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay_shared: f64,
    pub weight_decay_specific: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-6, weight_decay_shared: 0.2, weight_decay_specific: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Micro-batches accumulated per optimizer step.
    pub accum_steps: usize,
    pub checkpoint_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 32, accum_steps: 1, checkpoint_every_epoch: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Candidate L2 strengths; the one with best validation accuracy wins.
    pub l2_grid: Vec<f64>,
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Fraction of the training features held out to pick the L2 strength.
    pub val_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { l2_grid: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0], max_iter: 500, grad_tol: 1e-6, val_fraction: 0.2 }
    }
}

/// How concept attention is restricted before the per-concept softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CscSource {
    /// Mean of pre-softmax attention logits, then softmax over concepts.
    Logits,
    /// Mean of attention probabilities, renormalized over concepts.
    Probabilities,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub kmeans_restarts: usize,
    pub csc_source: CscSource,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { kmeans_restarts: 10, csc_source: CscSource::Logits }
    }
}

/// Everything a CLI run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    pub tiny: bool,
    pub seed: u64,
    pub output_dir: String,
    pub model: EncoderConfig,
    pub policy: SharingPolicy,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub analysis: AnalysisConfig,
}

impl ExperimentConfig {
    pub fn from_preset(preset: Preset, tiny: bool) -> Self {
        let (model, policy) = preset.build(tiny);
        Self {
            preset: preset.to_string(),
            tiny,
            seed: 0,
            output_dir: "runs".into(),
            model,
            policy,
            schedule: if tiny { ScheduleConfig::tiny() } else { ScheduleConfig::default() },
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| MsClipError::Format { what: "config", msg: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.policy.layers.len() != self.model.num_layers {
            return Err(config(format!(
                "policy has {} layers, model has {}",
                self.policy.layers.len(),
                self.model.num_layers
            )));
        }
        if self.train.batch_size < 2 {
            return Err(config("batch_size must be at least 2"));
        }
        if self.train.accum_steps == 0 {
            return Err(config("accum_steps must be at least 1"));
        }
        Ok(())
    }
}
