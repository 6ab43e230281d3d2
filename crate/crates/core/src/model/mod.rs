//! The dual encoder: modality stems around a transformer stack whose
//! submodules are shared or modality-specific per layer.

mod block;
mod branch;
mod layers;
mod stems;

use msclip_numerics::{NumericsError, Scalar, Tape, Tensor, Var};

pub use block::{attention_forward, AttnIds, BlockIds, FfnIds, Mask};
pub use branch::{Adapter, Bottleneck, BranchStage, ParallelBranch};
pub use layers::{AttentionRecord, BnIds, ConvIds, HiddenState, LinearIds, Modality, NormIds, Trace};
pub use stems::{EarlySpecStem, PatchStem, ResidualConv, StageGeometry, VisionStem};

use self::block::{block, capture_hidden};
use self::layers::{Fwd, INIT_STD};
use crate::config::{EncoderConfig, LayerSharing, SharingPolicy};
use crate::error::{config, input, Result};
use crate::params::{Group, Init, Layout, ParamCounts, ParamId, ParamStore};
use crate::tokenizer::{TokenIds, PAD};

/// Initial temperature `ln(1/0.07)`.
pub const LOGIT_SCALE_INIT: f64 = 2.659_260_036_932_778_3;
/// Upper clamp `ln 100`.
pub const LOGIT_SCALE_MAX: f64 = 4.605_170_185_988_092;

#[derive(Clone, Debug)]
pub struct VisionTower {
    pub stem: VisionStem,
    pub class_embedding: ParamId,
    pub positional: ParamId,
    pub ln_pre: NormIds,
    pub ln_post: NormIds,
    pub proj: LinearIds,
    pub branch: Option<ParallelBranch>,
}

#[derive(Clone, Debug)]
pub struct TextTower {
    pub token_embedding: ParamId,
    pub positional: ParamId,
    pub ln_final: NormIds,
    pub proj: LinearIds,
}

/// What each modality reads at one encoder layer. `vision` is `None` where
/// the convolutional stem replaces the layer.
#[derive(Clone, Debug)]
pub struct LayerIds {
    pub vision: Option<BlockIds>,
    pub text: BlockIds,
}

/// Parameter wiring of a model, independent of storage.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub vision: VisionTower,
    pub text: TextTower,
    pub layers: Vec<LayerIds>,
    pub logit_scale: ParamId,
}

fn declare_attn(l: &mut Layout, p: &str, w: usize, g: Group) -> AttnIds {
    AttnIds {
        qkv: LinearIds::declare(l, &format!("{p}.attn.qkv"), w, 3 * w, true, g),
        out: LinearIds::declare(l, &format!("{p}.attn.out"), w, w, true, g),
    }
}

fn declare_ffn(l: &mut Layout, p: &str, w: usize, ratio: usize, g: Group) -> FfnIds {
    FfnIds {
        fc1: LinearIds::declare(l, &format!("{p}.ffn.fc1"), w, ratio * w, true, g),
        fc2: LinearIds::declare(l, &format!("{p}.ffn.fc2"), ratio * w, w, true, g),
    }
}

/// Declares one submodule either once under `shared.` or once per modality.
fn pick<X: Copy>(
    l: &mut Layout,
    shared: bool,
    layer: usize,
    want_vision: bool,
    mut declare: impl FnMut(&mut Layout, &str, Group) -> X,
) -> (Option<X>, X) {
    if shared {
        let x = declare(l, &format!("shared.layers.{layer}"), Group::Shared);
        (want_vision.then_some(x), x)
    } else {
        let v = want_vision.then(|| declare(l, &format!("vision.layers.{layer}"), Group::Vision));
        let t = declare(l, &format!("text.layers.{layer}"), Group::Text);
        (v, t)
    }
}

impl Architecture {
    pub fn declare(cfg: &EncoderConfig, policy: &SharingPolicy) -> Result<(Self, Layout)> {
        cfg.validate()?;
        if policy.layers.len() != cfg.num_layers {
            return Err(config(format!(
                "sharing policy covers {} layers, encoder has {}",
                policy.layers.len(),
                cfg.num_layers
            )));
        }
        if policy.shares_anything() && (cfg.text_width != cfg.width || cfg.text_heads != cfg.heads) {
            return Err(config("shared submodules need equal vision and text widths and heads"));
        }
        let mut l = Layout::default();
        let (w, tw) = (cfg.width, cfg.text_width);

        let stem = if cfg.early_specialization {
            VisionStem::Early(EarlySpecStem::declare(&mut l, cfg))
        } else {
            VisionStem::Patch(PatchStem::declare(&mut l, cfg))
        };
        let class_embedding = l.param("vision.class_embedding", &[w], Group::Vision, Init::TruncNormal(INIT_STD));
        let positional = l.param(
            "vision.positional_embedding",
            &[cfg.vision_tokens(), w],
            Group::Vision,
            Init::TruncNormal(INIT_STD),
        );
        let ln_pre = NormIds::declare(&mut l, "vision.ln_pre", w, Group::Vision);

        let mut layers = Vec::with_capacity(cfg.num_layers);
        for (i, s) in policy.layers.iter().enumerate() {
            let specialized = cfg.early_specialization && i == 0;
            let s = if specialized { LayerSharing::NONE } else { *s };
            let want_vision = !specialized;
            let ratio = cfg.mlp_ratio;
            let (v_ln1, t_ln1) = pick(&mut l, s.ln1, i, want_vision, |l, p, g| {
                NormIds::declare(l, &format!("{p}.ln1"), if g == Group::Text { tw } else { w }, g)
            });
            let (v_attn, t_attn) = pick(&mut l, s.attn, i, want_vision, |l, p, g| {
                declare_attn(l, p, if g == Group::Text { tw } else { w }, g)
            });
            let (v_ln2, t_ln2) = pick(&mut l, s.ln2, i, want_vision, |l, p, g| {
                NormIds::declare(l, &format!("{p}.ln2"), if g == Group::Text { tw } else { w }, g)
            });
            let (v_ffn, t_ffn) = pick(&mut l, s.ffn, i, want_vision, |l, p, g| {
                declare_ffn(l, p, if g == Group::Text { tw } else { w }, ratio, g)
            });
            let vision = want_vision.then(|| BlockIds {
                ln1: v_ln1.expect("declared"),
                attn: v_attn.expect("declared"),
                ln2: v_ln2.expect("declared"),
                ffn: v_ffn.expect("declared"),
                heads: cfg.heads,
            });
            let text = BlockIds { ln1: t_ln1, attn: t_attn, ln2: t_ln2, ffn: t_ffn, heads: cfg.text_heads };
            layers.push(LayerIds { vision, text });
        }

        let ln_post = NormIds::declare(&mut l, "vision.ln_post", w, Group::Vision);
        let vproj = LinearIds::declare(&mut l, "vision.proj", w, cfg.embed_dim, false, Group::Vision);

        let token_embedding =
            l.param("text.token_embedding", &[cfg.vocab_size, tw], Group::Text, Init::TruncNormal(INIT_STD));
        let tpos =
            l.param("text.positional_embedding", &[cfg.context_length, tw], Group::Text, Init::TruncNormal(INIT_STD));
        let ln_final = NormIds::declare(&mut l, "text.ln_final", tw, Group::Text);
        let tproj = LinearIds::declare(&mut l, "text.proj", tw, cfg.embed_dim, false, Group::Text);
        let logit_scale = l.param("logit_scale", &[], Group::Global, Init::Const(LOGIT_SCALE_INIT));

        let branch = cfg.parallel_branch.then(|| ParallelBranch::declare(&mut l, cfg));

        let arch = Self {
            vision: VisionTower { stem, class_embedding, positional, ln_pre, ln_post, proj: vproj, branch },
            text: TextTower { token_embedding, positional: tpos, ln_final, proj: tproj },
            layers,
            logit_scale,
        };
        Ok((arch, l))
    }
}

/// Parameter totals of a configuration without allocating it.
pub fn count_parameters(cfg: &EncoderConfig, policy: &SharingPolicy) -> Result<ParamCounts> {
    Ok(Architecture::declare(cfg, policy)?.1.counts())
}

/// Sizes of the optional vision modules.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ModuleCounts {
    pub early_specialization: usize,
    /// Pyramid stages plus adapters.
    pub parallel_branch: usize,
}

pub fn module_counts(cfg: &EncoderConfig, policy: &SharingPolicy) -> Result<ModuleCounts> {
    let (_, l) = Architecture::declare(cfg, policy)?;
    Ok(ModuleCounts {
        early_specialization: l.count_prefix("vision.stem.early."),
        parallel_branch: l.count_prefix("vision.branch.") + l.count_prefix("vision.adapter."),
    })
}

#[derive(Clone, Debug)]
pub struct MsClipModel<T = f32> {
    pub config: EncoderConfig,
    pub policy: SharingPolicy,
    pub arch: Architecture,
    pub store: ParamStore<T>,
}

impl<T: Scalar> MsClipModel<T> {
    /// Deterministic in `seed`; a parameter's initial value depends only on
    /// the seed and its name.
    pub fn build(config: EncoderConfig, policy: SharingPolicy, seed: u64) -> Result<Self> {
        let (arch, layout) = Architecture::declare(&config, &policy)?;
        let store = ParamStore::materialize(&layout, seed);
        Ok(Self { config, policy, arch, store })
    }

    /// Reattaches stored parameters; names and shapes must match the
    /// declared layout exactly.
    pub fn from_store(config: EncoderConfig, policy: SharingPolicy, store: ParamStore<T>) -> Result<Self> {
        let (arch, layout) = Architecture::declare(&config, &policy)?;
        if layout.params.len() != store.len() || layout.bn.len() != store.bn_buffers().len() {
            return Err(input(format!(
                "stored model has {} parameters and {} norm buffers, layout declares {} and {}",
                store.len(),
                store.bn_buffers().len(),
                layout.params.len(),
                layout.bn.len()
            )));
        }
        for (spec, p) in layout.params.iter().zip(store.params()) {
            if spec.name != p.name || spec.shape != p.tensor.shape() || spec.group != p.group {
                return Err(input(format!(
                    "stored parameter {:?} {:?} does not match declared {:?} {:?}",
                    p.name,
                    p.tensor.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        for ((name, c), (sname, s)) in layout.bn.iter().zip(store.bn_buffers()) {
            if name != sname || *c != s.channels() {
                return Err(input(format!("stored norm buffer {sname:?} does not match declared {name:?}")));
            }
        }
        Ok(Self { config, policy, arch, store })
    }

    pub fn count_parameters(&self) -> ParamCounts {
        self.store.counts()
    }

    pub fn logit_scale(&self) -> T {
        self.store.get(self.arch.logit_scale).data()[0]
    }

    /// Keeps `exp(logit_scale) ≤ 100`.
    pub fn clamp_logit_scale(&mut self) {
        let v = &mut self.store.get_mut(self.arch.logit_scale).data_mut()[0];
        if *v > T::of(LOGIT_SCALE_MAX) {
            *v = T::of(LOGIT_SCALE_MAX);
        }
    }

    /// Folds batch statistics gathered in training mode into the running
    /// statistics.
    pub fn apply_bn_updates(&mut self, trace: &mut Trace<T>) {
        let m = self.config.bn_momentum;
        let bufs = self.store.bn_buffers_mut();
        for (id, batch) in trace.bn_updates.drain(..) {
            bufs[id.0].1.update(&batch, m);
        }
    }

    fn fwd<'a, 't>(&'a self, tape: &'t mut Tape<'a, T>, trace: &'t mut Trace<T>) -> Fwd<'a, 't, T> {
        Fwd { tape, store: &self.store, trace, cfg: &self.config }
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.image_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(
                NumericsError::Dimension { op: "encode_image", lhs: shape.to_vec(), rhs: vec![0, 3, s, s] }.into()
            );
        }
        Ok(())
    }

    /// Stem output with CLS prepended and positions added, `[B, 1+N, W]`.
    fn vision_tokens_var(&self, f: &mut Fwd<'_, '_, T>, images: Var) -> Result<Var> {
        let v = &self.arch.vision;
        let b = f.tape.shape(images)[0];
        let grid = v.stem.forward(f, images)?;
        let w = self.config.width;
        let n = self.config.num_patches();
        let tokens = f.tape.reshape(grid, &[b, w, n])?;
        let tokens = f.tape.permute(tokens, &[0, 2, 1])?;
        let cls = f.p(v.class_embedding);
        let cls = f.tape.reshape(cls, &[1, w])?;
        let cls = f.tape.gather_rows(cls, &vec![0; b])?;
        let cls = f.tape.reshape(cls, &[b, 1, w])?;
        let x = f.tape.concat(&[cls, tokens], 1)?;
        let pos = f.p(v.positional);
        Ok(f.tape.add_bcast(x, pos)?)
    }

    /// Image batch `[B, 3, S, S]` to L2-normalized embeddings `[B, E]`.
    pub fn vision_forward<'a>(&'a self, tape: &mut Tape<'a, T>, images: Var, trace: &mut Trace<T>) -> Result<Var> {
        self.check_images(tape.shape(images))?;
        let b = tape.shape(images)[0];
        let v = &self.arch.vision;
        let mut f = self.fwd(tape, trace);
        let x = self.vision_tokens_var(&mut f, images)?;
        let mut x = f.layer_norm(x, &v.ln_pre)?;
        let feats = match (&v.branch, f.trace.skip_branch) {
            (Some(br), false) => Some((br, br.forward(&mut f, images)?)),
            _ => None,
        };
        for (i, layer) in self.arch.layers.iter().enumerate() {
            if let Some((br, feats)) = &feats {
                if let Some(k) = br.adapter_for_layer(i) {
                    x = br.adapters[k].fuse(&mut f, x, feats[k])?;
                }
            }
            match &layer.vision {
                Some(ids) => x = block(&mut f, x, ids, Mask::Bidirectional, i, Modality::Vision)?,
                None => capture_hidden(&mut f, x, i, Modality::Vision),
            }
        }
        let w = self.config.width;
        let cls = f.tape.slice(x, 1, 0, 1)?;
        let cls = f.tape.reshape(cls, &[b, w])?;
        let cls = f.layer_norm(cls, &v.ln_post)?;
        let e = f.linear(cls, &v.proj)?;
        Ok(f.tape.l2_normalize(e)?)
    }

    fn check_tokens(&self, tokens: &[TokenIds]) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(input("empty token batch"));
        }
        tokens
            .iter()
            .map(|t| {
                if t.len() > self.config.context_length {
                    return Err(NumericsError::Dimension {
                        op: "encode_text",
                        lhs: vec![t.len()],
                        rhs: vec![self.config.context_length],
                    }
                    .into());
                }
                if let Some(&bad) = t.ids().iter().find(|&&id| id >= self.config.vocab_size) {
                    return Err(input(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
                }
                t.eos_position()
            })
            .collect()
    }

    /// Token plus positional embeddings, `[B, T, W]`, padded to the longest
    /// sequence.
    fn text_tokens_var(&self, f: &mut Fwd<'_, '_, T>, tokens: &[TokenIds]) -> Result<Var> {
        let t = tokens.iter().map(TokenIds::len).max().unwrap_or(0);
        let b = tokens.len();
        let tw = self.config.text_width;
        let mut idx = Vec::with_capacity(b * t);
        for seq in tokens {
            idx.extend_from_slice(seq.ids());
            idx.resize(idx.len() + t - seq.len(), PAD);
        }
        let table = f.p(self.arch.text.token_embedding);
        let x = f.tape.gather_rows(table, &idx)?;
        let x = f.tape.reshape(x, &[b, t, tw])?;
        let pos = f.p(self.arch.text.positional);
        let pos = f.tape.slice(pos, 0, 0, t)?;
        Ok(f.tape.add_bcast(x, pos)?)
    }

    /// Token batch to L2-normalized embeddings `[B, E]` read at each EOS.
    pub fn text_forward<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        tokens: &[TokenIds],
        trace: &mut Trace<T>,
    ) -> Result<Var> {
        let eos = self.check_tokens(tokens)?;
        let mut f = self.fwd(tape, trace);
        let mut x = self.text_tokens_var(&mut f, tokens)?;
        for (i, layer) in self.arch.layers.iter().enumerate() {
            x = block(&mut f, x, &layer.text, Mask::Causal, i, Modality::Text)?;
        }
        let shape = f.tape.shape(x).to_vec();
        let (b, t, w) = (shape[0], shape[1], shape[2]);
        let flat = f.tape.reshape(x, &[b * t, w])?;
        let rows: Vec<usize> = eos.iter().enumerate().map(|(i, e)| i * t + e).collect();
        let x = f.tape.gather_rows(flat, &rows)?;
        let x = f.layer_norm(x, &self.arch.text.ln_final)?;
        let e = f.linear(x, &self.arch.text.proj)?;
        Ok(f.tape.l2_normalize(e)?)
    }

    /// Inference-mode image embeddings for a `[B, 3, S, S]` batch.
    pub fn encode_images(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.encode_images_traced(images, &mut Trace::eval())
    }

    pub fn encode_images_traced(&self, images: &Tensor<T>, trace: &mut Trace<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let x = tape.constant(images.clone());
        let e = self.vision_forward(&mut tape, x, trace)?;
        Ok(tape.tensor(e))
    }

    pub fn encode_texts(&self, tokens: &[TokenIds]) -> Result<Tensor<T>> {
        self.encode_texts_traced(tokens, &mut Trace::eval())
    }

    pub fn encode_texts_traced(&self, tokens: &[TokenIds], trace: &mut Trace<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let e = self.text_forward(&mut tape, tokens, trace)?;
        Ok(tape.tensor(e))
    }

    /// Embedding of one `[3, S, S]` image.
    pub fn encode_image(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let batch = image.clone().reshape(shape)?;
        Ok(self.encode_images(&batch)?.into_data())
    }

    pub fn encode_text(&self, tokens: &TokenIds) -> Result<Vec<T>> {
        Ok(self.encode_texts(std::slice::from_ref(tokens))?.into_data())
    }

    /// Vision tokens entering the stack, before `ln_pre`: `[B, 1+N, W]`.
    pub fn vision_tokens(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(images.shape())?;
        let mut tape = Tape::inference();
        let mut trace = Trace::eval();
        let x = tape.constant(images.clone());
        let mut f = self.fwd(&mut tape, &mut trace);
        let y = self.vision_tokens_var(&mut f, x)?;
        Ok(tape.tensor(y))
    }

    /// Token plus positional embeddings `[B, T, W]`.
    pub fn embed_text(&self, tokens: &[TokenIds]) -> Result<Tensor<T>> {
        self.check_tokens(tokens)?;
        let mut tape = Tape::inference();
        let mut trace = Trace::eval();
        let mut f = self.fwd(&mut tape, &mut trace);
        let y = self.text_tokens_var(&mut f, tokens)?;
        Ok(tape.tensor(y))
    }

    /// Every stage output of the convolutional stem for one batch, or `None`
    /// for a patch-projection model.
    pub fn early_stem_stages(&self, images: &Tensor<T>) -> Result<Option<Vec<Tensor<T>>>> {
        let VisionStem::Early(stem) = &self.arch.vision.stem else { return Ok(None) };
        self.check_images(images.shape())?;
        let mut tape = Tape::inference();
        let mut trace = Trace::eval();
        let x = tape.constant(images.clone());
        let mut keep = Vec::new();
        let mut f = self.fwd(&mut tape, &mut trace);
        stem.forward(&mut f, x, Some(&mut keep))?;
        Ok(Some(keep.iter().map(|&v| tape.tensor(v)).collect()))
    }

    /// Parallel-branch stage outputs for one batch.
    pub fn branch_features(&self, images: &Tensor<T>) -> Result<Option<Vec<Tensor<T>>>> {
        let Some(br) = &self.arch.vision.branch else { return Ok(None) };
        self.check_images(images.shape())?;
        let mut tape = Tape::inference();
        let mut trace = Trace::eval();
        let x = tape.constant(images.clone());
        let mut f = self.fwd(&mut tape, &mut trace);
        let outs = br.forward(&mut f, x)?;
        Ok(Some(outs.iter().map(|&v| tape.tensor(v)).collect()))
    }

    /// Applies adapter `k` to tokens `h: [B, 1+N, W]` and a stage feature map.
    pub fn adapter_fuse(&self, k: usize, h: &Tensor<T>, feature: &Tensor<T>) -> Result<Tensor<T>> {
        let br = self.arch.vision.branch.as_ref().ok_or_else(|| config("model has no parallel branch"))?;
        let ad = br.adapters.get(k).ok_or_else(|| config(format!("no adapter {k}")))?;
        let mut tape = Tape::inference();
        let mut trace = Trace::eval();
        let hv = tape.constant(h.clone());
        let fv = tape.constant(feature.clone());
        let mut f = self.fwd(&mut tape, &mut trace);
        let y = ad.fuse(&mut f, hv, fv)?;
        Ok(tape.tensor(y))
    }
}
