//! Pair manifests, image loading, and the procedural shapes dataset.

use std::path::{Path, PathBuf};

use image::{imageops::FilterType, Rgb, RgbImage};
use msclip_numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{input, io_err, MsClipError, Result};
use crate::tokenizer::Tokenizer;

pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 180, 60]),
    ("blue", [40, 80, 230]),
    ("yellow", [235, 215, 40]),
    ("magenta", [210, 50, 210]),
    ("cyan", [40, 205, 215]),
    ("orange", [245, 140, 25]),
    ("white", [240, 240, 240]),
];
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const POSITIONS: [&str; 9] =
    ["top left", "top", "top right", "left", "center", "right", "bottom left", "bottom", "bottom right"];
pub const SIZES: [&str; 2] = ["small", "large"];
/// Distinct (position, size) combinations per class.
pub const LAYOUTS: usize = POSITIONS.len() * SIZES.len();
pub const MAX_CLASSES: usize = COLORS.len() * SHAPES.len();

/// Color and shape indices of class `c`; unique for `c < 32`.
pub fn class_parts(c: usize) -> (usize, usize) {
    (c % COLORS.len(), (c + c / COLORS.len()) % SHAPES.len())
}

pub fn class_name(c: usize) -> String {
    let (col, sh) = class_parts(c);
    format!("{} {}", COLORS[col].0, SHAPES[sh])
}

pub fn caption(c: usize, position: usize, size: usize) -> String {
    format!("a {} {} in the {}", SIZES[size], class_name(c), POSITIONS[position])
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticRecord {
    pub class: usize,
    pub position: usize,
    pub size: usize,
    pub caption: String,
    pub image: RgbImage,
    /// Bounding box of the drawn shape, `[x0, y0, x1, y1)` in pixels.
    pub bbox: [usize; 4],
}

fn record_rng(seed: u64, stream: u64, class: usize, j: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(1 << 32) ^ ((class as u64) << 20) ^ j as u64);
    rng
}

fn noise_background(rng: &mut ChaCha8Rng, s: usize) -> RgbImage {
    let base: i32 = rng.random_range(40..90);
    RgbImage::from_fn(s as u32, s as u32, |_, _| {
        let mut px = [0u8; 3];
        for v in &mut px {
            *v = (base + rng.random_range(-28..=28)).clamp(0, 255) as u8;
        }
        Rgb(px)
    })
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match SHAPES[shape] {
        "circle" => dx * dx + dy * dy <= r * r,
        "square" => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        "triangle" => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        _ => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
    }
}

/// Draws one shape and returns its pixel bounding box.
fn draw_shape(img: &mut RgbImage, rng: &mut ChaCha8Rng, class: usize, position: usize, size: usize) -> [usize; 4] {
    let s = img.width() as f64;
    let cell = s / 3.0;
    let jitter = s / 24.0;
    let cx = (position % 3) as f64 * cell + cell / 2.0 + rng.random_range(-jitter..=jitter);
    let cy = (position / 3) as f64 * cell + cell / 2.0 + rng.random_range(-jitter..=jitter);
    let r = if size == 0 { s / 10.0 } else { s / 6.0 };
    let (col, sh) = class_parts(class);
    let shade: f64 = rng.random_range(0.85..=1.0);
    let rgb = COLORS[col].1.map(|v| (v as f64 * shade).round() as u8);
    let mut bbox = [usize::MAX, usize::MAX, 0, 0];
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        if inside(sh, dx, dy, r) {
            *px = Rgb(rgb);
            let (x, y) = (x as usize, y as usize);
            bbox = [bbox[0].min(x), bbox[1].min(y), bbox[2].max(x + 1), bbox[3].max(y + 1)];
        }
    }
    bbox
}

fn render(seed: u64, stream: u64, class: usize, j: usize, position: usize, size: usize, s: usize) -> SyntheticRecord {
    let mut rng = record_rng(seed, stream, class, j);
    let mut image = noise_background(&mut rng, s);
    let bbox = draw_shape(&mut image, &mut rng, class, position, size);
    SyntheticRecord { class, position, size, caption: caption(class, position, size), image, bbox }
}

fn check_classes(num_classes: usize) -> Result<()> {
    if !(2..=MAX_CLASSES).contains(&num_classes) {
        return Err(input(format!("num_classes must be in 2..={MAX_CLASSES}, got {num_classes}")));
    }
    Ok(())
}

/// `num_classes · per_class` training pairs. Record `j` of a class uses
/// layout `j mod 18`, so positions and sizes are spread evenly.
pub fn generate_synthetic_pairs(
    num_classes: usize,
    per_class: usize,
    seed: u64,
    image_size: usize,
) -> Result<Vec<SyntheticRecord>> {
    check_classes(num_classes)?;
    Ok((0..num_classes)
        .flat_map(|c| (0..per_class).map(move |j| (c, j)))
        .map(|(c, j)| render(seed, 1, c, j, j % LAYOUTS % POSITIONS.len(), j % LAYOUTS / POSITIONS.len(), image_size))
        .collect())
}

/// One fresh draw of every (class, position, size) combination, so each
/// caption in the split is unique.
pub fn generate_heldout_pairs(num_classes: usize, seed: u64, image_size: usize) -> Result<Vec<SyntheticRecord>> {
    check_classes(num_classes)?;
    Ok((0..num_classes)
        .flat_map(|c| (0..LAYOUTS).map(move |j| (c, j)))
        .map(|(c, j)| render(seed, 2, c, j, j % POSITIONS.len(), j / POSITIONS.len(), image_size))
        .collect())
}

/// A region of the image aligned with a span of caption words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Concept {
    /// `[x0, y0, x1, y1)` in pixels.
    pub bbox: [usize; 4],
    /// Caption word indices `[start, end)`.
    pub words: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundedPair {
    pub image: PathBuf,
    pub caption: String,
    pub concepts: Vec<Concept>,
}

/// Two large shapes of different classes in different cells, captioned
/// "a red circle and a blue square", each phrase grounded to its box.
pub fn generate_grounded(
    count: usize,
    num_classes: usize,
    seed: u64,
    image_size: usize,
) -> Result<Vec<(RgbImage, String, Vec<Concept>)>> {
    check_classes(num_classes)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = record_rng(seed, 3, 0, i);
        let a = rng.random_range(0..num_classes);
        let b = (a + rng.random_range(1..num_classes)) % num_classes;
        let pa = rng.random_range(0..POSITIONS.len());
        let pb = (pa + rng.random_range(1..POSITIONS.len())) % POSITIONS.len();
        let mut image = noise_background(&mut rng, image_size);
        let ba = draw_shape(&mut image, &mut rng, a, pa, 1);
        let bb = draw_shape(&mut image, &mut rng, b, pb, 1);
        let text = format!("a {} and a {}", class_name(a), class_name(b));
        let concepts = vec![Concept { bbox: ba, words: (1, 3) }, Concept { bbox: bb, words: (5, 7) }];
        out.push((image, text, concepts));
    }
    Ok(out)
}

fn parse_concepts(field: &str) -> std::result::Result<Vec<Concept>, String> {
    field
        .split(';')
        .map(|c| {
            let (b, w) = c.split_once('@').ok_or("concept lacks '@'")?;
            let nums: Vec<usize> = b
                .split(',')
                .map(|v| v.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| e.to_string())?;
            let [x0, y0, x1, y1] = nums[..] else { return Err("box needs 4 numbers".into()) };
            let (s, e) = w.split_once('-').ok_or("word span lacks '-'")?;
            let words =
                (s.trim().parse().map_err(|_| "bad span start")?, e.trim().parse().map_err(|_| "bad span end")?);
            if x1 <= x0 || y1 <= y0 || words.1 <= words.0 {
                return Err("empty box or span".into());
            }
            Ok(Concept { bbox: [x0, y0, x1, y1], words })
        })
        .collect()
}

/// One pair per line: `image<TAB>caption<TAB>x0,y0,x1,y1@w0-w1;…`.
pub fn load_grounded(path: &Path) -> Result<Vec<GroundedPair>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad =
            |msg: String| MsClipError::Format { what: "grounded pair file", msg: format!("line {}: {msg}", i + 1) };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(bad(format!("expected 3 tab-separated fields, found {}", cols.len())));
        }
        let concepts = parse_concepts(cols[2]).map_err(bad)?;
        let words = crate::tokenizer::split_words(cols[1]).len();
        if let Some(c) = concepts.iter().find(|c| c.words.1 > words) {
            return Err(bad(format!("span {:?} exceeds the caption's {words} words", c.words)));
        }
        out.push(GroundedPair { image: base.join(cols[0]), caption: cols[1].to_string(), concepts });
    }
    Ok(out)
}

pub fn write_grounded(path: &Path, pairs: &[GroundedPair]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut text = String::new();
    for p in pairs {
        let img = p.image.strip_prefix(base).unwrap_or(&p.image);
        let concepts: Vec<String> = p
            .concepts
            .iter()
            .map(|c| format!("{},{},{},{}@{}-{}", c.bbox[0], c.bbox[1], c.bbox[2], c.bbox[3], c.words.0, c.words.1))
            .collect();
        text.push_str(&format!("{}\t{}\t{}\n", img.display(), p.caption, concepts.join(";")));
    }
    std::fs::write(path, text).map_err(io_err(path))
}

/// Token-position spans of each concept under `tok`.
pub fn concept_token_spans(tok: &Tokenizer, pair: &GroundedPair) -> Vec<(usize, usize)> {
    pair.concepts.iter().map(|c| tok.word_span(&pair.caption, c.words.0, c.words.1)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub image: PathBuf,
    pub caption: String,
    pub split: Option<String>,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairManifest {
    pub records: Vec<PairRecord>,
    /// Rejected lines as (1-based line number, reason).
    pub rejected: Vec<(usize, String)>,
}

impl PairManifest {
    /// Records whose split tag equals `split`; untagged records count as
    /// `train`.
    pub fn split(&self, split: &str) -> Vec<&PairRecord> {
        self.records.iter().filter(|r| r.split.as_deref().unwrap_or("train") == split).collect()
    }
}

/// Reads `image<TAB>caption[<TAB>split[<TAB>label]]` lines. Relative image
/// paths resolve against the manifest's directory. Malformed lines are
/// reported in `rejected` and skipped.
pub fn load_manifest(path: &Path) -> Result<PairManifest> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let reason = if cols.len() < 2 {
            Some("missing tab between image path and caption".to_string())
        } else if cols.len() > 4 {
            Some(format!("expected at most 4 fields, found {}", cols.len()))
        } else if cols[1].trim().is_empty() {
            Some("empty caption".to_string())
        } else if cols.get(3).is_some_and(|l| l.trim().parse::<usize>().is_err()) {
            Some(format!("label {:?} is not a non-negative integer", cols[3]))
        } else if !base.join(cols[0]).is_file() {
            Some(format!("image {:?} not found", cols[0]))
        } else {
            None
        };
        if let Some(r) = reason {
            rejected.push((i + 1, r));
            continue;
        }
        records.push(PairRecord {
            image: base.join(cols[0]),
            caption: cols[1].to_string(),
            split: cols.get(2).map(|s| s.trim().to_string()).filter(|s| !s.is_empty()),
            label: cols.get(3).map(|l| l.trim().parse().expect("checked above")),
        });
    }
    if records.is_empty() {
        let detail = rejected.first().map(|(l, r)| format!(" (line {l}: {r})")).unwrap_or_default();
        return Err(input(format!("{}: no valid records{detail}", path.display())));
    }
    Ok(PairManifest { records, rejected })
}

pub fn write_manifest(path: &Path, records: &[PairRecord]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut text = String::new();
    for r in records {
        let img = r.image.strip_prefix(base).unwrap_or(&r.image);
        text.push_str(&format!("{}\t{}", img.display(), r.caption));
        match (&r.split, r.label) {
            (Some(s), Some(l)) => text.push_str(&format!("\t{s}\t{l}")),
            (Some(s), None) => text.push_str(&format!("\t{s}")),
            (None, Some(l)) => text.push_str(&format!("\ttrain\t{l}")),
            (None, None) => {}
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(io_err(path))
}

/// `[3, S, S]` tensor scaled to `[-1, 1]`, channel-major.
pub fn image_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("sized from the image")
}

/// Decodes an image file, resizing to `size × size` when needed.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| MsClipError::Format { what: "image", msg: format!("{}: {e}", path.display()) })?
        .to_rgb8();
    let img = if img.width() as usize != size || img.height() as usize != size {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    } else {
        img
    };
    Ok(image_to_tensor(&img))
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| MsClipError::Format { what: "image", msg: format!("{}: {e}", path.display()) })
}

/// Stacks `[3, S, S]` tensors into `[B, 3, S, S]`.
pub fn stack_images(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| input("empty image batch"))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for im in images {
        if im.shape() != first.shape() {
            return Err(input(format!("image shapes differ: {:?} vs {:?}", im.shape(), first.shape())));
        }
        data.extend_from_slice(im.data());
    }
    Ok(Tensor::new(shape, data)?)
}

/// What `gen-data` writes into a directory.
pub struct GeneratedDataset {
    pub manifest: PathBuf,
    pub classes: PathBuf,
    pub grounded: PathBuf,
    pub train: usize,
    pub heldout: usize,
}

/// Writes PNGs, `manifest.tsv` (train and heldout splits with labels),
/// `classes.txt` and `grounded.tsv` under `dir`.
pub fn write_synthetic_dataset(
    dir: &Path,
    num_classes: usize,
    per_class: usize,
    seed: u64,
    image_size: usize,
    grounded: usize,
) -> Result<GeneratedDataset> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let mut records = Vec::new();
    let splits = [
        ("train", generate_synthetic_pairs(num_classes, per_class, seed, image_size)?),
        ("heldout", generate_heldout_pairs(num_classes, seed, image_size)?),
    ];
    let counts = (splits[0].1.len(), splits[1].1.len());
    for (split, recs) in &splits {
        for (i, r) in recs.iter().enumerate() {
            let p = img_dir.join(format!("{split}_{i:05}.png"));
            save_png(&p, &r.image)?;
            records.push(PairRecord {
                image: p,
                caption: r.caption.clone(),
                split: Some(split.to_string()),
                label: Some(r.class),
            });
        }
    }
    let manifest = dir.join("manifest.tsv");
    write_manifest(&manifest, &records)?;
    let classes = dir.join("classes.txt");
    let names: Vec<String> = (0..num_classes).map(class_name).collect();
    std::fs::write(&classes, names.join("\n") + "\n").map_err(io_err(&classes))?;

    let mut pairs = Vec::new();
    for (i, (img, text, concepts)) in
        generate_grounded(grounded, num_classes, seed, image_size)?.into_iter().enumerate()
    {
        let p = img_dir.join(format!("grounded_{i:05}.png"));
        save_png(&p, &img)?;
        pairs.push(GroundedPair { image: p, caption: text, concepts });
    }
    let grounded_path = dir.join("grounded.tsv");
    write_grounded(&grounded_path, &pairs)?;
    Ok(GeneratedDataset { manifest, classes, grounded: grounded_path, train: counts.0, heldout: counts.1 })
}

/// Class names, one per line.
pub fn load_class_names(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let names: Vec<String> = text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
    if names.is_empty() {
        return Err(input(format!("{}: no class names", path.display())));
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_parts_are_unique() {
        let mut seen = std::collections::HashSet::new();
        for c in 0..MAX_CLASSES {
            assert!(seen.insert(class_parts(c)));
        }
    }

    #[test]
    fn record_counts() {
        assert_eq!(generate_synthetic_pairs(8, 64, 1, 32).unwrap().len(), 512);
        let held = generate_heldout_pairs(8, 1, 32).unwrap();
        assert_eq!(held.len(), 144);
        let unique: std::collections::HashSet<_> = held.iter().map(|r| r.caption.clone()).collect();
        assert_eq!(unique.len(), 144);
        assert!(generate_synthetic_pairs(1, 4, 1, 32).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic_pairs(3, 5, 7, 48).unwrap();
        let b = generate_synthetic_pairs(3, 5, 7, 48).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_pairs(3, 5, 8, 48).unwrap();
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn captions_share_class_nouns() {
        let recs = generate_synthetic_pairs(8, 20, 0, 32).unwrap();
        for r in &recs {
            assert!(r.caption.contains(&class_name(r.class)), "{}", r.caption);
        }
    }

    #[test]
    fn shape_boxes_land_in_their_cell() {
        for r in generate_heldout_pairs(4, 3, 96).unwrap() {
            let cx = (r.bbox[0] + r.bbox[2]) / 2;
            let cy = (r.bbox[1] + r.bbox[3]) / 2;
            assert_eq!((cy / 32) * 3 + cx / 32, r.position);
        }
    }

    #[test]
    fn image_tensor_range() {
        let img = RgbImage::from_fn(2, 2, |x, _| if x == 0 { Rgb([0, 0, 0]) } else { Rgb([255, 255, 255]) });
        let t = image_to_tensor(&img);
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert_eq!(t.data()[0], -1.0);
        assert_eq!(t.data()[1], 1.0);
    }
}
