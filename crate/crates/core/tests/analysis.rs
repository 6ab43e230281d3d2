use msclip::analysis::{
    concept_attention, csc_from_concept_attention, csc_pair, csc_report_from, export_attention, fusion_report, kmeans,
    modality_nmi, nmi, AttnInput, Query,
};
use msclip::config::{CscSource, Preset};
use msclip::data::{generate_grounded, image_to_tensor, Concept};
use msclip::model::{AttentionRecord, Modality, MsClipModel, Trace};
use msclip::tokenizer::Tokenizer;
use msclip::MsClipError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// NMI from per-label probability tables, summed directly.
fn nmi_oracle(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let p = |f: &dyn Fn(usize) -> bool| (0..a.len()).filter(|&i| f(i)).count() as f64 / n;
    let la: Vec<usize> = (0..=*a.iter().max().unwrap()).collect();
    let lb: Vec<usize> = (0..=*b.iter().max().unwrap()).collect();
    let h = |labels: &[usize], v: &[usize]| -> f64 {
        labels.iter().map(|&l| p(&|i| v[i] == l)).filter(|&q| q > 0.0).map(|q| -q * q.ln()).sum()
    };
    let (ha, hb) = (h(&la, a), h(&lb, b));
    if ha + hb == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for &x in &la {
        for &y in &lb {
            let pxy = p(&|i| a[i] == x && b[i] == y);
            if pxy > 0.0 {
                mi += pxy * (pxy / (p(&|i| a[i] == x) * p(&|i| b[i] == y))).ln();
            }
        }
    }
    2.0 * mi / (ha + hb)
}

proptest! {
    #[test]
    fn nmi_matches_oracle_and_is_symmetric(a in prop::collection::vec(0usize..4, 1..30), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<usize> = a.iter().map(|_| rng.random_range(0..3)).collect();
        let v = nmi(&a, &b).unwrap();
        prop_assert!((v - nmi_oracle(&a, &b)).abs() < 1e-12);
        prop_assert!((v - nmi(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&v));
        // renaming clusters does not matter
        let renamed: Vec<usize> = a.iter().map(|x| 3 - x).collect();
        prop_assert!((v - nmi(&renamed, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn csc_is_order_free_and_bounded(seed in 0u64..1000, n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stochastic = || -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
                    let s: f64 = r.iter().sum();
                    r.iter().map(|x| x / s).collect()
                })
                .collect()
        };
        let (v, t) = (stochastic(), stochastic());
        let c = csc_from_concept_attention(&v, &t).unwrap();
        prop_assert!((0.0..=2.0 * n as f64).contains(&c));
        let perm: Vec<usize> = (0..n).rev().collect();
        let permute = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            perm.iter().map(|&i| perm.iter().map(|&j| m[i][j]).collect()).collect()
        };
        prop_assert!((c - csc_from_concept_attention(&permute(&v), &permute(&t)).unwrap()).abs() < 1e-12);
        prop_assert_eq!(csc_from_concept_attention(&v, &v).unwrap(), 0.0);
    }
}

#[test]
fn nmi_rejects_mismatched_lengths() {
    assert!(matches!(nmi(&[0, 1], &[0]), Err(MsClipError::Input(_))));
    assert!(matches!(nmi(&[], &[]), Err(MsClipError::Input(_))));
    assert_eq!(nmi(&[0, 0, 0], &[0, 0, 0]).unwrap(), 1.0);
}

#[test]
fn kmeans_recovers_well_separated_blobs() {
    for seed in 0..30 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(4..12);
        let d = rng.random_range(1..4);
        let truth: Vec<usize> = (0..n).map(|i| usize::from(i % 3 == 0)).collect();
        let points: Vec<Vec<f64>> =
            truth.iter().map(|&c| (0..d).map(|_| 10.0 * c as f64 + rng.random_range(-1.0..1.0)).collect()).collect();
        let got = kmeans(&points, 2, 10, seed).unwrap();
        assert_eq!(nmi(&got, &truth).unwrap(), 1.0, "seed {seed}");
    }
}

#[test]
fn kmeans_is_seed_deterministic_and_checks_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pts: Vec<Vec<f64>> = (0..20).map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
    assert_eq!(kmeans(&pts, 3, 4, 9).unwrap(), kmeans(&pts, 3, 4, 9).unwrap());
    assert!(matches!(kmeans(&pts[..1], 2, 1, 0), Err(MsClipError::Input(_))));
    assert!(matches!(kmeans(&[vec![0.0], vec![1.0, 2.0]], 2, 1, 0), Err(MsClipError::Input(_))));
}

#[test]
fn separated_modalities_score_one() {
    let v: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.1, 0.0]).collect();
    let t: Vec<Vec<f64>> = (0..4).map(|i| vec![50.0, i as f64 * 0.1]).collect();
    assert_eq!(modality_nmi(&v, &t, 10, 0).unwrap(), 1.0);
}

fn record(tokens: usize, logits: Vec<f64>) -> AttentionRecord {
    let probs = logits
        .chunks(tokens)
        .flat_map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = r.iter().map(|x| (x - m).exp()).sum();
            r.iter().map(move |x| (x - m).exp() / s).collect::<Vec<_>>()
        })
        .collect();
    AttentionRecord { layer: 0, head: 0, modality: Modality::Text, sample: 0, tokens, probs, logits }
}

#[test]
fn concept_attention_pools_logits_then_softmaxes() {
    // tokens {0,1} and {2}; block means are 1 and 3 for the first concept
    let rec = record(
        3,
        vec![
            0.0, 2.0, 3.0, //
            2.0, 0.0, 3.0, //
            0.0, 0.0, 0.0,
        ],
    );
    let groups = vec![vec![0, 1], vec![2]];
    let ca = concept_attention(&[&rec], &groups, CscSource::Logits).unwrap();
    let e = 1.0 / (1.0 + 2f64.exp());
    assert!((ca[0][0] - e).abs() < 1e-12 && (ca[0][1] - (1.0 - e)).abs() < 1e-12);
    assert!((ca[1][0] - 0.5).abs() < 1e-12);

    let cp = concept_attention(&[&rec], &groups, CscSource::Probabilities).unwrap();
    for row in &cp {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let block = |q: usize, ks: &[usize]| ks.iter().map(|&k| rec.probs[q * 3 + k]).sum::<f64>() / ks.len() as f64;
    let (a, b) = ((block(0, &[0, 1]) + block(1, &[0, 1])) / 2.0, (block(0, &[2]) + block(1, &[2])) / 2.0);
    assert!((cp[0][0] - a / (a + b)).abs() < 1e-12);
}

#[test]
fn masked_logits_are_left_out_of_the_mean() {
    let inf = f64::NEG_INFINITY;
    let rec = record(3, vec![0.0, inf, inf, 1.0, 1.0, inf, 0.0, 2.0, 4.0]);
    let ca = concept_attention(&[&rec], &[vec![0, 1], vec![2]], CscSource::Logits).unwrap();
    // first concept: finite block means are (0 + 1 + 1) / 3 and -inf
    assert_eq!(ca[0], vec![1.0, 0.0]);
    assert!(ca.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn head_average_and_concept_errors() {
    let a = record(2, vec![5.0, 0.0, 0.0, 5.0]);
    let b = record(2, vec![0.0, 5.0, 5.0, 0.0]);
    let ca = concept_attention(&[&a, &b], &[vec![0], vec![1]], CscSource::Logits).unwrap();
    assert!(ca.iter().flatten().all(|v| (v - 0.5).abs() < 1e-12));
    assert!(matches!(concept_attention(&[], &[vec![0]], CscSource::Logits), Err(MsClipError::Input(_))));
    assert!(matches!(concept_attention(&[&a], &[vec![0], vec![]], CscSource::Logits), Err(MsClipError::Input(_))));
    assert!(matches!(concept_attention(&[&a], &[vec![0], vec![7]], CscSource::Logits), Err(MsClipError::Input(_))));
    assert!(matches!(csc_from_concept_attention(&vec![vec![1.0]], &vec![vec![1.0]]), Err(MsClipError::Input(_))));
}

#[test]
fn csc_report_skips_layers_without_values() {
    let r = csc_report_from(&[vec![None, Some(1.0), Some(3.0)], vec![None, Some(2.0), None]]).unwrap();
    assert_eq!(r.per_layer, vec![None, Some(1.5), Some(3.0)]);
    assert_eq!(r.average, 2.25);
    assert!(csc_report_from(&[]).is_err());
}

fn tiny(preset: Preset) -> MsClipModel<f32> {
    let (cfg, policy) = preset.build(true);
    MsClipModel::build(cfg, policy, 6).unwrap()
}

#[test]
fn exported_cls_row_is_the_recorded_distribution() {
    let m = tiny(Preset::MsClip);
    let (img, _, _) = generate_grounded(1, 8, 2, m.config.image_size).unwrap().remove(0);
    let x = image_to_tensor(&img);
    let g = m.config.grid();
    let h = export_attention(&m, AttnInput::Image(&x), 2, 1, Query::Cls).unwrap();
    assert_eq!(h.values.len(), 1 + g * g);
    assert!((h.values.iter().sum::<f64>() - 1.0).abs() < 1e-5);

    let mut trace = Trace { capture_attention: true, ..Trace::eval() };
    m.encode_images_traced(
        &x.clone().reshape(vec![1, 3, m.config.image_size, m.config.image_size]).unwrap(),
        &mut trace,
    )
    .unwrap();
    let rec = trace.attention.iter().find(|r| r.layer == 2 && r.head == 1 && r.modality == Modality::Vision).unwrap();
    assert_eq!(h.values, rec.row(0));

    let text = h.to_text();
    assert!(text.starts_with("# heatmap v1 layer=2 head=1 modality=vision"));
    assert_eq!(text.lines().count(), 2 + g);

    assert!(matches!(export_attention(&m, AttnInput::Image(&x), 0, 99, Query::Cls), Err(MsClipError::Config(_))));
    assert!(matches!(export_attention(&m, AttnInput::Image(&x), 99, 0, Query::Cls), Err(MsClipError::Config(_))));
    assert!(matches!(export_attention(&m, AttnInput::Image(&x), 0, 0, Query::Eos), Err(MsClipError::Config(_))));
}

#[test]
fn exported_eos_row_ignores_padding() {
    let m = tiny(Preset::MsClip);
    let tok = Tokenizer::build(["a red circle"], m.config.vocab_size);
    let ids = tok.encode("a red circle", m.config.context_length);
    let eos = ids.eos_position().unwrap();
    let h = export_attention(&m, AttnInput::Text(&ids), 1, 0, Query::Eos).unwrap();
    assert_eq!(h.query, eos);
    assert!((h.values.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    assert!(h.values[eos + 1..].iter().all(|&v| v == 0.0));
    assert_eq!(h.to_text().lines().count(), 1 + h.values.len());
}

#[test]
fn fusion_needs_equal_widths() {
    let m = tiny(Preset::ClipB32);
    let x = image_to_tensor(&generate_grounded(1, 8, 0, m.config.image_size).unwrap()[0].0);
    let tok = Tokenizer::build(["a red circle"], m.config.vocab_size);
    let ids = tok.encode("a red circle", m.config.context_length);
    assert!(matches!(fusion_report(&m, &[x], &[ids], 10, 0), Err(MsClipError::Config(_))));
}

#[test]
fn fusion_report_scores_every_layer() {
    let m = tiny(Preset::MsClip);
    let pairs = generate_grounded(2, 8, 1, m.config.image_size).unwrap();
    let tok = Tokenizer::build(pairs.iter().map(|p| p.1.as_str()), m.config.vocab_size);
    let images: Vec<_> = pairs.iter().map(|p| image_to_tensor(&p.0)).collect();
    let caps: Vec<_> = pairs.iter().map(|p| tok.encode(&p.1, m.config.context_length)).collect();
    let r = fusion_report(&m, &images, &caps, 10, 0).unwrap();
    assert_eq!(r.per_layer.len(), m.config.num_layers);
    assert!(r.per_layer.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!((r.average - r.per_layer.iter().sum::<f64>() / r.per_layer.len() as f64).abs() < 1e-12);
}

#[test]
fn csc_pair_on_a_grounded_sample() {
    let m = tiny(Preset::MsClipS);
    let (img, caption, concepts) = generate_grounded(1, 8, 3, m.config.image_size).unwrap().remove(0);
    let tok = Tokenizer::build([caption.as_str()], m.config.vocab_size);
    let x = image_to_tensor(&img);
    let per_layer = csc_pair(&m, &tok, &x, &caption, &concepts, CscSource::Logits).unwrap();
    assert_eq!(per_layer.len(), m.config.num_layers);
    // the convolutional first layer has no vision attention
    assert_eq!(per_layer[0], None);
    assert!(per_layer[1..].iter().all(|v| v.is_some_and(|c| (0.0..=4.0).contains(&c))));

    let mut tiny_box = concepts.clone();
    tiny_box[0] = Concept { bbox: [0, 0, 2, 2], words: (1, 3) };
    assert!(matches!(csc_pair(&m, &tok, &x, &caption, &tiny_box, CscSource::Logits), Err(MsClipError::Input(_))));
    assert!(matches!(csc_pair(&m, &tok, &x, &caption, &concepts[..1], CscSource::Logits), Err(MsClipError::Input(_))));
}
