//! Cross-modal diagnostics: modality clustering of token features (NMI),
//! common semantic structure of concept attention (CSC), and attention
//! heatmap export.

use std::fmt::Write as _;

use msclip_numerics::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::CscSource;
use crate::data::{load_image, Concept, GroundedPair};
use crate::error::{config, input, Result};
use crate::model::{AttentionRecord, Modality, MsClipModel, Trace};
use crate::tokenizer::{TokenIds, Tokenizer};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> (Vec<usize>, f64) {
    let d = points[0].len();
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..300 {
        let mut changed = false;
        for (p, l) in points.iter().zip(labels.iter_mut()) {
            let mut best = (0, f64::INFINITY);
            for (c, ctr) in centers.iter().enumerate() {
                let dist = sq_dist(p, ctr);
                if dist < best.1 {
                    best = (c, dist);
                }
            }
            if *l != best.0 {
                *l = best.0;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, ctr) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            *ctr = (0..d).map(|j| members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64).collect();
        }
    }
    let inertia = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum();
    (labels, inertia)
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    while centers.len() < k {
        let d2: Vec<f64> =
            points.iter().map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        };
        centers.push(points[next].clone());
    }
    centers
}

/// Lloyd's algorithm from k-means++ seeds, best of `restarts` runs by
/// inertia. Restart `r` draws from stream `seed + r`.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || points.len() < k {
        return Err(input(format!("k-means with k={k} needs at least {k} points, got {}", points.len())));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(input("k-means points have differing dimensions"));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
        let (labels, inertia) = lloyd(points, plus_plus_init(points, k, &mut rng));
        if best.as_ref().is_none_or(|b| inertia < b.1) {
            best = Some((labels, inertia));
        }
    }
    Ok(best.expect("at least one restart").0)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts.filter(|&c| c > 0).map(|c| c as f64 / n).map(|p| -p * p.ln()).sum()
}

/// Mutual information over the arithmetic mean of the two entropies. Two
/// single-cluster labelings score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(input("nmi needs two non-empty labelings of equal length"));
    }
    let n = a.len() as f64;
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut joint = vec![0usize; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * kb + y] += 1;
    }
    let ca: Vec<usize> = (0..ka).map(|i| (0..kb).map(|j| joint[i * kb + j]).sum()).collect();
    let cb: Vec<usize> = (0..kb).map(|j| (0..ka).map(|i| joint[i * kb + j]).sum()).collect();
    let (ha, hb) = (entropy(ca.iter().copied(), n), entropy(cb.iter().copied(), n));
    if ha + hb == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let c = joint[i * kb + j];
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (ca[i] as f64 * cb[j] as f64)).ln();
            }
        }
    }
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// Per-layer modality NMI averaged over pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionReport {
    pub per_layer: Vec<f64>,
    pub average: f64,
}

/// NMI between a 2-means clustering of one pair's pooled token features
/// and their modality.
pub fn modality_nmi(vision_tokens: &[Vec<f64>], text_tokens: &[Vec<f64>], restarts: usize, seed: u64) -> Result<f64> {
    let points: Vec<Vec<f64>> = vision_tokens.iter().chain(text_tokens).cloned().collect();
    let truth: Vec<usize> = (0..points.len()).map(|i| usize::from(i >= vision_tokens.len())).collect();
    nmi(&kmeans(&points, 2, restarts, seed)?, &truth)
}

/// Runs each image/caption pair alone through the model and scores every
/// layer. Requires equal vision and text widths.
pub fn fusion_report<T: Scalar>(
    model: &MsClipModel<T>,
    images: &[Tensor<T>],
    captions: &[TokenIds],
    restarts: usize,
    seed: u64,
) -> Result<FusionReport> {
    if model.config.width != model.config.text_width {
        return Err(config(format!(
            "fusion score needs equal widths, got vision {} and text {}",
            model.config.width, model.config.text_width
        )));
    }
    if images.is_empty() || images.len() != captions.len() {
        return Err(input("fusion score needs a non-empty set of image/caption pairs"));
    }
    let layers = model.config.num_layers;
    let mut sums = vec![0.0; layers];
    for (img, cap) in images.iter().zip(captions) {
        let mut trace = Trace { capture_hidden: true, ..Trace::eval() };
        let mut shape = vec![1];
        shape.extend_from_slice(img.shape());
        model.encode_images_traced(&img.clone().reshape(shape)?, &mut trace)?;
        model.encode_texts_traced(std::slice::from_ref(cap), &mut trace)?;
        for (l, sum) in sums.iter_mut().enumerate() {
            let pick = |m: Modality| -> Vec<Vec<f64>> {
                trace
                    .hidden
                    .iter()
                    .filter(|h| h.layer == l && h.modality == m)
                    .flat_map(|h| (0..h.tokens).map(move |t| h.token(t).to_vec()))
                    .collect()
            };
            *sum += modality_nmi(&pick(Modality::Vision), &pick(Modality::Text), restarts, seed)?;
        }
    }
    let per_layer: Vec<f64> = sums.iter().map(|s| s / images.len() as f64).collect();
    let average = per_layer.iter().sum::<f64>() / layers as f64;
    Ok(FusionReport { per_layer, average })
}

/// Head-averaged concept attention, one row per source concept normalized
/// over target concepts.
pub type ConceptAttention = Vec<Vec<f64>>;

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Restricts each head's attention to the concept token groups, pools
/// each (source, target) block by its mean, normalizes rows over targets
/// and averages the heads. Masked logits are left out of the mean.
pub fn concept_attention(
    heads: &[&AttentionRecord],
    groups: &[Vec<usize>],
    source: CscSource,
) -> Result<ConceptAttention> {
    if heads.is_empty() {
        return Err(input("no attention heads to pool"));
    }
    if let Some(i) = groups.iter().position(Vec::is_empty) {
        return Err(input(format!("concept {i} covers no tokens")));
    }
    let n = groups.len();
    let mut avg = vec![vec![0.0; n]; n];
    for rec in heads {
        if let Some(&t) = groups.iter().flatten().find(|&&t| t >= rec.tokens) {
            return Err(input(format!("token {t} outside a {}-token attention map", rec.tokens)));
        }
        for (i, src) in groups.iter().enumerate() {
            let pooled: Vec<f64> = groups
                .iter()
                .map(|dst| {
                    let vals = src.iter().flat_map(|&q| dst.iter().map(move |&k| (q, k)));
                    match source {
                        CscSource::Logits => {
                            let finite: Vec<f64> =
                                vals.map(|(q, k)| rec.logit(q, k)).filter(|v| v.is_finite()).collect();
                            if finite.is_empty() {
                                f64::NEG_INFINITY
                            } else {
                                finite.iter().sum::<f64>() / finite.len() as f64
                            }
                        }
                        CscSource::Probabilities => {
                            let all: Vec<f64> = vals.map(|(q, k)| rec.row(q)[k]).collect();
                            all.iter().sum::<f64>() / all.len() as f64
                        }
                    }
                })
                .collect();
            let row = match source {
                CscSource::Logits => softmax(&pooled),
                CscSource::Probabilities => {
                    let s: f64 = pooled.iter().sum();
                    pooled.iter().map(|v| if s > 0.0 { v / s } else { 1.0 / n as f64 }).collect()
                }
            };
            avg[i].iter_mut().zip(row).for_each(|(a, r)| *a += r / heads.len() as f64);
        }
    }
    Ok(avg)
}

/// `Σ_ij |V_ij − T_ij|` over two concept-attention matrices.
pub fn csc_from_concept_attention(vision: &ConceptAttention, text: &ConceptAttention) -> Result<f64> {
    if vision.len() != text.len() || vision.iter().zip(text).any(|(a, b)| a.len() != b.len()) {
        return Err(input("concept attention matrices differ in size"));
    }
    if vision.len() < 2 {
        return Err(input("CSC needs at least two concepts"));
    }
    Ok(vision.iter().zip(text).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs())).sum())
}

/// CSC of one layer from captured attention records of a single sample.
pub fn csc_from_records(
    vision: &[AttentionRecord],
    text: &[AttentionRecord],
    layer: usize,
    vision_groups: &[Vec<usize>],
    text_groups: &[Vec<usize>],
    source: CscSource,
) -> Result<f64> {
    let at = |recs: &'_ [AttentionRecord], m: Modality| -> Vec<AttentionRecord> {
        recs.iter().filter(|r| r.layer == layer && r.modality == m && r.sample == 0).cloned().collect()
    };
    let (v, t) = (at(vision, Modality::Vision), at(text, Modality::Text));
    if v.is_empty() || t.is_empty() {
        return Err(input(format!("no attention recorded at layer {layer} for both modalities")));
    }
    let v = concept_attention(&v.iter().collect::<Vec<_>>(), vision_groups, source)?;
    let t = concept_attention(&t.iter().collect::<Vec<_>>(), text_groups, source)?;
    csc_from_concept_attention(&v, &t)
}

/// Token indices (CLS at 0) of patches whose centers lie in the box
/// `[x0, y0, x1, y1)`.
pub fn patches_in_box(bbox: [usize; 4], patch: usize, grid: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for r in 0..grid {
        for c in 0..grid {
            let (cx, cy) = ((c as f64 + 0.5) * patch as f64, (r as f64 + 0.5) * patch as f64);
            if cx >= bbox[0] as f64 && cx < bbox[2] as f64 && cy >= bbox[1] as f64 && cy < bbox[3] as f64 {
                out.push(1 + r * grid + c);
            }
        }
    }
    out
}

/// Per-layer CSC distances; `None` where the vision stack has no
/// attention (a convolutional first layer).
#[derive(Clone, Debug, PartialEq)]
pub struct CscReport {
    pub per_layer: Vec<Option<f64>>,
    /// Mean over the layers that have a value.
    pub average: f64,
}

/// CSC of one image/caption pair at every layer; `None` where the vision
/// stack has no attention.
pub fn csc_pair<T: Scalar>(
    model: &MsClipModel<T>,
    tok: &Tokenizer,
    image: &Tensor<T>,
    caption: &str,
    concepts: &[Concept],
    source: CscSource,
) -> Result<Vec<Option<f64>>> {
    let cfg = &model.config;
    if concepts.len() < 2 {
        return Err(input(format!("grounded pair {caption:?} has fewer than two concepts")));
    }
    let vgroups: Vec<Vec<usize>> =
        concepts.iter().map(|c| patches_in_box(c.bbox, cfg.patch_size, cfg.grid())).collect();
    if let Some(i) = vgroups.iter().position(Vec::is_empty) {
        return Err(input(format!("concept {i} of {caption:?} covers no patch center")));
    }
    let ids = tok.encode(caption, cfg.context_length);
    let tgroups: Vec<Vec<usize>> =
        concepts.iter().map(|c| tok.word_span(caption, c.words.0, c.words.1)).map(|(s, e)| (s..e).collect()).collect();
    if let Some(i) = tgroups.iter().position(|g: &Vec<usize>| g.is_empty() || g.iter().any(|&t| t + 1 >= ids.len())) {
        return Err(input(format!("concept {i} of {caption:?} has no tokens within the context")));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let mut vt = Trace { capture_attention: true, ..Trace::eval() };
    model.encode_images_traced(&image.clone().reshape(shape)?, &mut vt)?;
    let mut tt = Trace { capture_attention: true, ..Trace::eval() };
    model.encode_texts_traced(std::slice::from_ref(&ids), &mut tt)?;
    (0..cfg.num_layers)
        .map(|l| {
            if !vt.attention.iter().any(|r| r.layer == l) {
                return Ok(None);
            }
            csc_from_records(&vt.attention, &tt.attention, l, &vgroups, &tgroups, source).map(Some)
        })
        .collect()
}

/// Averages per-pair CSC over pairs for each layer.
pub fn csc_report_from(per_pair: &[Vec<Option<f64>>]) -> Result<CscReport> {
    let first = per_pair.first().ok_or_else(|| input("CSC needs at least one grounded pair"))?;
    let per_layer: Vec<Option<f64>> = (0..first.len())
        .map(|l| {
            let vals: Vec<f64> = per_pair.iter().filter_map(|p| p[l]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    let vals: Vec<f64> = per_layer.iter().flatten().copied().collect();
    let average = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
    Ok(CscReport { per_layer, average })
}

/// CSC at every layer, averaged over grounded pairs loaded from disk.
pub fn csc_report<T: Scalar>(
    model: &MsClipModel<T>,
    tok: &Tokenizer,
    pairs: &[GroundedPair],
    source: CscSource,
) -> Result<CscReport> {
    let per_pair = pairs
        .iter()
        .map(|p| {
            let img = load_image(&p.image, model.config.image_size)?.cast::<T>();
            csc_pair(model, tok, &img, &p.caption, &p.concepts, source)
        })
        .collect::<Result<Vec<_>>>()?;
    csc_report_from(&per_pair)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Query {
    Cls,
    Eos,
}

pub enum AttnInput<'a, T> {
    /// One `[3, S, S]` image.
    Image(&'a Tensor<T>),
    Text(&'a TokenIds),
}

/// Attention of one query token to every token at one layer and head.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub layer: usize,
    pub head: usize,
    pub modality: Modality,
    /// Patch grid side for vision; `None` for text.
    pub grid: Option<usize>,
    pub query: usize,
    /// One value per token; for vision index 0 is CLS, then patches
    /// row-major.
    pub values: Vec<f64>,
}

impl Heatmap {
    /// Header line, then the CLS value and a grid of patch values (vision)
    /// or one `position<TAB>value` line per token (text).
    pub fn to_text(&self) -> String {
        let modality = match self.modality {
            Modality::Vision => "vision",
            Modality::Text => "text",
        };
        let mut s = format!(
            "# heatmap v1 layer={} head={} modality={modality} grid={} query={}\n",
            self.layer,
            self.head,
            self.grid.unwrap_or(0),
            self.query
        );
        match self.grid {
            Some(g) => {
                let _ = writeln!(s, "cls\t{:e}", self.values[0]);
                for r in 0..g {
                    let row: Vec<String> =
                        self.values[1 + r * g..1 + (r + 1) * g].iter().map(|v| format!("{v:e}")).collect();
                    let _ = writeln!(s, "{}", row.join("\t"));
                }
            }
            None => {
                for (i, v) in self.values.iter().enumerate() {
                    let _ = writeln!(s, "{i}\t{v:e}");
                }
            }
        }
        s
    }
}

/// Exports the CLS row of an image's attention or the EOS row of a
/// caption's.
pub fn export_attention<T: Scalar>(
    model: &MsClipModel<T>,
    input_: AttnInput<'_, T>,
    layer: usize,
    head: usize,
    query: Query,
) -> Result<Heatmap> {
    let cfg = &model.config;
    if layer >= cfg.num_layers {
        return Err(config(format!("layer {layer} out of range for {} layers", cfg.num_layers)));
    }
    let mut trace = Trace { capture_attention: true, ..Trace::eval() };
    let (modality, heads, q, grid) = match (input_, query) {
        (AttnInput::Image(img), Query::Cls) => {
            let mut shape = vec![1];
            shape.extend_from_slice(img.shape());
            model.encode_images_traced(&img.clone().reshape(shape)?, &mut trace)?;
            (Modality::Vision, cfg.heads, 0, Some(cfg.grid()))
        }
        (AttnInput::Text(ids), Query::Eos) => {
            model.encode_texts_traced(std::slice::from_ref(ids), &mut trace)?;
            (Modality::Text, cfg.text_heads, ids.eos_position()?, None)
        }
        (AttnInput::Image(_), Query::Eos) => return Err(config("images are queried from CLS")),
        (AttnInput::Text(_), Query::Cls) => return Err(config("captions are queried from EOS")),
    };
    if head >= heads {
        return Err(config(format!("head {head} out of range for {heads} heads")));
    }
    let rec = trace
        .attention
        .iter()
        .find(|r| r.layer == layer && r.head == head && r.modality == modality)
        .ok_or_else(|| config(format!("layer {layer} has no {modality:?} attention")))?;
    Ok(Heatmap { layer, head, modality, grid, query: q, values: rec.row(q).to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nmi_trivial_cases() {
        assert_eq!(nmi(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(nmi(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert!(nmi(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn kmeans_separates_blobs() {
        let pts = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![5.0, 5.0], vec![5.1, 5.0]];
        let l = kmeans(&pts, 2, 3, 0).unwrap();
        assert_eq!(l[0], l[1]);
        assert_eq!(l[2], l[3]);
        assert_ne!(l[0], l[2]);
    }

    #[test]
    fn csc_hand_fixture() {
        let v = vec![vec![0.9, 0.1], vec![0.5, 0.5]];
        let t = vec![vec![0.1, 0.9], vec![0.5, 0.5]];
        assert!((csc_from_concept_attention(&v, &t).unwrap() - 1.6).abs() < 1e-12);
    }

    #[test]
    fn patch_centers_in_box() {
        assert_eq!(patches_in_box([0, 0, 16, 16], 16, 4), vec![1]);
        assert_eq!(patches_in_box([16, 16, 48, 32], 16, 4), vec![6, 7]);
        assert!(patches_in_box([0, 0, 7, 7], 16, 4).is_empty());
    }
}
