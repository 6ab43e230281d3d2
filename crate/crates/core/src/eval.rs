//! Zero-shot classification with prompt ensembles, logistic-regression
//! probes on frozen features, and retrieval recall.

use msclip_numerics::{Scalar, Tensor};

use crate::config::ProbeConfig;
use crate::error::{config, input, Result};
use crate::model::MsClipModel;
use crate::tokenizer::Tokenizer;

/// Templates used when a run does not supply its own.
pub const DEFAULT_TEMPLATES: [&str; 4] = ["a {}.", "a photo of a {}.", "a picture of a {}.", "an image showing a {}."];

#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub classes: Vec<String>,
    /// Each contains one `{}` slot for the class name.
    pub templates: Vec<String>,
}

impl PromptSet {
    pub fn new(classes: Vec<String>, templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(config("prompt set needs at least one template"));
        }
        if classes.is_empty() {
            return Err(config("prompt set needs at least one class"));
        }
        if let Some(t) = templates.iter().find(|t| t.matches("{}").count() != 1) {
            return Err(config(format!("template {t:?} must contain exactly one {{}} slot")));
        }
        Ok(Self { classes, templates })
    }

    pub fn with_default_templates(classes: Vec<String>) -> Result<Self> {
        Self::new(classes, DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect())
    }

    pub fn render(&self, class: usize, template: usize) -> String {
        self.templates[template].replacen("{}", &self.classes[class], 1)
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn rows<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let &[_, d] = t.shape() else {
        return Err(input(format!("expected a [rows, dim] matrix, got {:?}", t.shape())));
    };
    Ok(t.data().chunks(d.max(1)).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One classifier row per class: the mean of the class's normalized
/// template embeddings, renormalized.
pub fn class_features<T: Scalar>(model: &MsClipModel<T>, tok: &Tokenizer, prompts: &PromptSet) -> Result<Tensor<f64>> {
    let ctx = model.config.context_length;
    let e = model.config.embed_dim;
    let mut out = Vec::with_capacity(prompts.classes.len() * e);
    for c in 0..prompts.classes.len() {
        let ids: Vec<_> = (0..prompts.templates.len()).map(|t| tok.encode(&prompts.render(c, t), ctx)).collect();
        let embs = model.encode_texts(&ids)?;
        let mut mean = vec![0.0; e];
        for r in rows(&embs)? {
            mean.iter_mut().zip(&r).for_each(|(m, v)| *m += v);
        }
        normalize(&mut mean);
        out.extend(mean);
    }
    Ok(Tensor::new(vec![prompts.classes.len(), e], out)?)
}

/// Index of the most cosine-similar class for each image row; ties go to
/// the lower class index.
pub fn zero_shot_predict<T: Scalar>(image_embs: &Tensor<T>, class_feats: &Tensor<f64>) -> Result<Vec<usize>> {
    let classes = rows(class_feats)?;
    if classes.is_empty() {
        return Err(config("no class features"));
    }
    let mut preds = Vec::new();
    for mut img in rows(image_embs)? {
        if img.len() != classes[0].len() {
            return Err(input(format!("image dim {} vs class dim {}", img.len(), classes[0].len())));
        }
        normalize(&mut img);
        let mut best = (0, f64::NEG_INFINITY);
        for (c, f) in classes.iter().enumerate() {
            let s = dot(&img, f);
            if s > best.1 {
                best = (c, s);
            }
        }
        preds.push(best.0);
    }
    Ok(preds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShotResult {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / preds.len() as f64
}

/// Encodes images in chunks of `batch` and classifies them against the
/// prompt-ensemble class features.
pub fn zero_shot_classify<T: Scalar>(
    model: &MsClipModel<T>,
    tok: &Tokenizer,
    images: &[Tensor<T>],
    labels: &[usize],
    prompts: &PromptSet,
) -> Result<ZeroShotResult> {
    if images.len() != labels.len() {
        return Err(input(format!("{} images but {} labels", images.len(), labels.len())));
    }
    let feats = class_features(model, tok, prompts)?;
    let embs = encode_image_list(model, images, 32)?;
    let predictions = zero_shot_predict(&embs, &feats)?;
    Ok(ZeroShotResult { accuracy: accuracy(&predictions, labels), predictions })
}

/// Embeddings `[N, E]` for single images `[3, S, S]`, encoded `batch` at a
/// time.
pub fn encode_image_list<T: Scalar>(model: &MsClipModel<T>, images: &[Tensor<T>], batch: usize) -> Result<Tensor<T>> {
    let e = model.config.embed_dim;
    let mut out = Vec::with_capacity(images.len() * e);
    for chunk in images.chunks(batch.max(1)) {
        let mut data = Vec::new();
        let mut shape = vec![chunk.len()];
        for img in chunk {
            data.extend_from_slice(img.data());
        }
        shape.extend_from_slice(chunk[0].shape());
        let embs = model.encode_images(&Tensor::new(shape, data)?)?;
        out.extend_from_slice(embs.data());
    }
    Ok(Tensor::new(vec![images.len(), e], out)?)
}

/// Image→text and text→image recall at one cutoff.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recall {
    pub k: usize,
    pub i2t: f64,
    pub t2i: f64,
}

/// Zero-based rank of candidate `target` in `scores`: candidates scoring
/// higher, plus equal-scoring candidates at a lower index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    scores.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < target)).count()
}

/// Row `i` of each matrix is a true pair; similarity is cosine.
pub fn retrieval_recall<T: Scalar>(img: &Tensor<T>, txt: &Tensor<T>, k: usize) -> Result<Recall> {
    let (mut a, mut b) = (rows(img)?, rows(txt)?);
    if a.len() != b.len() {
        return Err(input(format!("{} image rows vs {} text rows", a.len(), b.len())));
    }
    let q = a.len();
    if k == 0 || q < k {
        return Err(config(format!("recall@{k} needs at least {k} queries, got {q}")));
    }
    a.iter_mut().chain(b.iter_mut()).for_each(|r| normalize(r));
    let sims: Vec<Vec<f64>> = a.iter().map(|x| b.iter().map(|y| dot(x, y)).collect()).collect();
    let i2t = (0..q).filter(|&i| rank_of(&sims[i], i) < k).count();
    let t2i = (0..q)
        .filter(|&j| {
            let col: Vec<f64> = sims.iter().map(|r| r[j]).collect();
            rank_of(&col, j) < k
        })
        .count();
    Ok(Recall { k, i2t: i2t as f64 / q as f64, t2i: t2i as f64 / q as f64 })
}

/// A fitted multinomial logistic regression.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    /// `[classes][dim]`
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub l2: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LinearClassifier {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights.iter().zip(&self.bias).map(|(w, b)| dot(w, x) + b).collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let l = self.logits(x);
        let mut best = 0;
        for (c, v) in l.iter().enumerate() {
            if *v > l[best] {
                best = c;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// `None` for classes absent from the evaluated split.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub classifier: LinearClassifier,
}

fn log_softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    l.iter().map(|v| v - lse).collect()
}

/// Mean cross-entropy plus `l2/2 · |W|²` (bias unregularized), and its
/// gradient as `(dW, db)`.
fn objective(x: &[Vec<f64>], y: &[usize], w: &[Vec<f64>], b: &[f64], l2: f64) -> (f64, Vec<Vec<f64>>, Vec<f64>) {
    let (c, d) = (w.len(), x[0].len());
    let m = x.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![vec![0.0; d]; c];
    let mut gb = vec![0.0; c];
    for (xi, &yi) in x.iter().zip(y) {
        let logits: Vec<f64> = w.iter().zip(b).map(|(wc, bc)| dot(wc, xi) + bc).collect();
        let lp = log_softmax(&logits);
        loss -= lp[yi] / m;
        for k in 0..c {
            let g = (lp[k].exp() - if k == yi { 1.0 } else { 0.0 }) / m;
            gb[k] += g;
            gw[k].iter_mut().zip(xi).for_each(|(a, v)| *a += g * v);
        }
    }
    for k in 0..c {
        loss += 0.5 * l2 * dot(&w[k], &w[k]);
        gw[k].iter_mut().zip(&w[k]).for_each(|(g, v)| *g += l2 * v);
    }
    (loss, gw, gb)
}

/// Full-batch gradient descent with backtracking line search until the
/// gradient norm drops below `tol` or `max_iter` steps are taken.
pub fn fit_logistic(
    x: &[Vec<f64>],
    y: &[usize],
    classes: usize,
    l2: f64,
    max_iter: usize,
    tol: f64,
) -> Result<LinearClassifier> {
    if x.is_empty() || x.len() != y.len() {
        return Err(input("probe needs as many labels as feature rows, and at least one row"));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
        return Err(input(format!("label {bad} out of range for {classes} classes")));
    }
    let d = x[0].len();
    let mut w = vec![vec![0.0; d]; classes];
    let mut b = vec![0.0; classes];
    let mut step = 1.0;
    let (mut f, mut gw, mut gb) = objective(x, y, &w, &b, l2);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        let gn2: f64 = gw.iter().map(|r| dot(r, r)).sum::<f64>() + dot(&gb, &gb);
        if gn2.sqrt() < tol {
            converged = true;
            break;
        }
        iterations += 1;
        step *= 2.0;
        loop {
            let nw: Vec<Vec<f64>> =
                w.iter().zip(&gw).map(|(r, g)| r.iter().zip(g).map(|(a, b)| a - step * b).collect()).collect();
            let nb: Vec<f64> = b.iter().zip(&gb).map(|(a, g)| a - step * g).collect();
            let (nf, ngw, ngb) = objective(x, y, &nw, &nb, l2);
            if nf <= f - 0.5 * step * gn2 || step < 1e-12 {
                (w, b, f, gw, gb) = (nw, nb, nf, ngw, ngb);
                break;
            }
            step *= 0.5;
        }
    }
    if !converged {
        let gn2: f64 = gw.iter().map(|r| dot(r, r)).sum::<f64>() + dot(&gb, &gb);
        converged = gn2.sqrt() < tol;
    }
    Ok(LinearClassifier { weights: w, bias: b, l2, iterations, converged })
}

pub fn evaluate_probe(clf: &LinearClassifier, x: &[Vec<f64>], y: &[usize]) -> ProbeResult {
    let classes = clf.weights.len();
    let preds: Vec<usize> = x.iter().map(|r| clf.predict(r)).collect();
    let mut hit = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    for (&p, &l) in preds.iter().zip(y) {
        seen[l] += 1;
        hit[l] += usize::from(p == l);
    }
    ProbeResult {
        accuracy: accuracy(&preds, y),
        per_class_accuracy: hit.iter().zip(&seen).map(|(&h, &s)| (s > 0).then(|| h as f64 / s as f64)).collect(),
        classifier: clf.clone(),
    }
}

/// Fits on `train`, evaluates on `test`, with a fixed L2 strength.
pub fn linear_probe(
    train: (&[Vec<f64>], &[usize]),
    test: (&[Vec<f64>], &[usize]),
    classes: usize,
    l2: f64,
    max_iter: usize,
    tol: f64,
) -> Result<ProbeResult> {
    if train.0.len() < classes {
        return Err(input(format!("{} training rows for {classes} classes", train.0.len())));
    }
    let clf = fit_logistic(train.0, train.1, classes, l2, max_iter, tol)?;
    Ok(evaluate_probe(&clf, test.0, test.1))
}

/// Picks the L2 strength from `cfg.l2_grid` by accuracy on a held-out tail
/// of the training rows (ties to the stronger penalty), refits on all
/// training rows and evaluates on `test`.
pub fn linear_probe_sweep(
    train: (&[Vec<f64>], &[usize]),
    test: (&[Vec<f64>], &[usize]),
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if cfg.l2_grid.is_empty() {
        return Err(config("probe l2_grid is empty"));
    }
    let m = train.0.len();
    let n_val = ((m as f64 * cfg.val_fraction).round() as usize).min(m.saturating_sub(classes));
    let mut best = (f64::NEG_INFINITY, cfg.l2_grid[0]);
    if n_val > 0 {
        let split = m - n_val;
        for &l2 in &cfg.l2_grid {
            let clf = fit_logistic(&train.0[..split], &train.1[..split], classes, l2, cfg.max_iter, cfg.grad_tol)?;
            let acc = evaluate_probe(&clf, &train.0[split..], &train.1[split..]).accuracy;
            if acc > best.0 || (acc == best.0 && l2 > best.1) {
                best = (acc, l2);
            }
        }
    }
    linear_probe(train, test, classes, best.1, cfg.max_iter, cfg.grad_tol)
}

/// Rows of a `[M, D]` tensor as `f64` vectors.
pub fn feature_rows<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    rows(t)
}
