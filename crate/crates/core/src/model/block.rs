//! Pre-LN transformer block with per-submodule parameter selection.

use msclip_numerics::{NumericsError, Scalar, Tape, Tensor, Var};

use super::layers::{AttentionRecord, Fwd, HiddenState, LinearIds, Modality, NormIds, Trace};
use crate::config::EncoderConfig;
use crate::error::{input, Result};
use crate::params::{Group, Layout, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    /// Fused query/key/value projection, `[width, 3·width]`.
    pub qkv: LinearIds,
    pub out: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnIds {
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

/// Parameter handles one modality reads at one layer. Shared submodules
/// hold the same ids in both modalities' blocks.
#[derive(Clone, Copy, Debug)]
pub struct BlockIds {
    pub ln1: NormIds,
    pub attn: AttnIds,
    pub ln2: NormIds,
    pub ffn: FfnIds,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    Bidirectional,
    Causal,
}

/// Multi-head scaled dot-product self-attention over `x: [B, T, W]`.
pub(crate) fn attention<T: Scalar>(
    f: &mut Fwd<'_, '_, T>,
    x: Var,
    ids: &AttnIds,
    heads: usize,
    mask: Mask,
    record: Option<(usize, Modality)>,
) -> Result<Var> {
    let shape = f.tape.shape(x).to_vec();
    let [b, t, w] = shape[..] else {
        return Err(input(format!("attention expects [batch, tokens, width], got {shape:?}")));
    };
    let d = w / heads;
    let qkv = f.linear(x, &ids.qkv)?;
    let qkv = f.tape.reshape(qkv, &[b, t, 3, heads, d])?;
    let qkv = f.tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut part = |i: usize| -> Result<Var> {
        let s = f.tape.slice(qkv, 0, i, 1)?;
        Ok(f.tape.reshape(s, &[b * heads, t, d])?)
    };
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);
    let scores = f.tape.bmm(q, k, true)?;
    let scores = f.tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let scores = match mask {
        Mask::Causal => f.tape.causal_mask(scores)?,
        Mask::Bidirectional => scores,
    };
    let probs = f.tape.softmax_rows(scores)?;
    if let (Some((layer, modality)), true) = (record, f.trace.capture_attention) {
        let (lv, pv) = (f.tape.value(scores), f.tape.value(probs));
        let tt = t * t;
        for s in 0..b {
            for h in 0..heads {
                let off = (s * heads + h) * tt;
                f.trace.attention.push(AttentionRecord {
                    layer,
                    head: h,
                    modality,
                    sample: s,
                    tokens: t,
                    probs: pv[off..off + tt].iter().map(|v| v.as_f64()).collect(),
                    logits: lv[off..off + tt].iter().map(|v| v.as_f64()).collect(),
                });
            }
        }
    }
    let ctx = f.tape.bmm(probs, v, false)?;
    let ctx = f.tape.reshape(ctx, &[b, heads, t, d])?;
    let ctx = f.tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = f.tape.reshape(ctx, &[b, t, w])?;
    f.linear(ctx, &ids.out)
}

/// `x + Attn(LN1(x))`, then `+ FFN(LN2(·))`.
pub(crate) fn block<T: Scalar>(
    f: &mut Fwd<'_, '_, T>,
    x: Var,
    ids: &BlockIds,
    mask: Mask,
    layer: usize,
    modality: Modality,
) -> Result<Var> {
    let h = f.layer_norm(x, &ids.ln1)?;
    let a = attention(f, h, &ids.attn, ids.heads, mask, Some((layer, modality)))?;
    let x = f.tape.add(x, a)?;
    let h = f.layer_norm(x, &ids.ln2)?;
    let h = f.linear(h, &ids.ffn.fc1)?;
    let h = f.gelu(h)?;
    let h = f.linear(h, &ids.ffn.fc2)?;
    let x = f.tape.add(x, h)?;
    capture_hidden(f, x, layer, modality);
    Ok(x)
}

pub(crate) fn capture_hidden<T: Scalar>(f: &mut Fwd<'_, '_, T>, x: Var, layer: usize, modality: Modality) {
    if !f.trace.capture_hidden {
        return;
    }
    let shape = f.tape.shape(x).to_vec();
    let (b, t, w) = (shape[0], shape[1], shape[2]);
    let vals = f.tape.value(x);
    for s in 0..b {
        f.trace.hidden.push(HiddenState {
            layer,
            modality,
            sample: s,
            tokens: t,
            width: w,
            data: vals[s * t * w..(s + 1) * t * w].iter().map(|v| v.as_f64()).collect(),
        });
    }
}

/// Standalone attention over one sequence `x: [T, W]` with explicit
/// weights (`qkv_w: [W, 3W]`, `out_w: [W, W]`). Returns the output and the
/// `[T, T]` probabilities of each head.
pub fn attention_forward<T: Scalar>(
    x: &Tensor<T>,
    qkv_w: &Tensor<T>,
    qkv_b: &Tensor<T>,
    out_w: &Tensor<T>,
    out_b: &Tensor<T>,
    heads: usize,
    mask: Mask,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let &[t, w] = x.shape() else {
        return Err(input(format!("attention_forward expects [tokens, width], got {:?}", x.shape())));
    };
    if heads == 0 || w % heads != 0 {
        return Err(crate::error::config(format!("width {w} is not divisible by {heads} heads")));
    }
    let mut layout = Layout::default();
    let ids = AttnIds {
        qkv: LinearIds::declare(&mut layout, "qkv", w, 3 * w, true, Group::Shared),
        out: LinearIds::declare(&mut layout, "out", w, w, true, Group::Shared),
    };
    let mut store = ParamStore::<T>::materialize(&layout, 0);
    let biases = [ids.qkv.b.expect("declared with bias"), ids.out.b.expect("declared with bias")];
    for (id, src) in [(ids.qkv.w, qkv_w), (biases[0], qkv_b), (ids.out.w, out_w), (biases[1], out_b)] {
        let dst = store.get_mut(id);
        if dst.shape() != src.shape() {
            return Err(NumericsError::Dimension {
                op: "attention_forward",
                lhs: src.shape().to_vec(),
                rhs: dst.shape().to_vec(),
            }
            .into());
        }
        dst.data_mut().copy_from_slice(src.data());
    }
    let cfg = EncoderConfig::tiny();
    let mut tape = Tape::inference();
    let mut trace = Trace::capturing();
    let xv = tape.constant(x.clone().reshape([1, t, w])?);
    let mut f = Fwd { tape: &mut tape, store: &store, trace: &mut trace, cfg: &cfg };
    let y = attention(&mut f, xv, &ids, heads, mask, Some((0, Modality::Vision)))?;
    let out = tape.tensor(y).reshape([t, w])?;
    let probs = trace
        .attention
        .into_iter()
        .map(|r| Tensor::new(vec![t, t], r.probs.iter().map(|&v| T::of(v)).collect()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((out, probs))
}
