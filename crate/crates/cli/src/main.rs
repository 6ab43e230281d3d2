use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msclip::analysis::{csc_report, export_attention, fusion_report, AttnInput, Query};
use msclip::checkpoint::{load_checkpoint, save_checkpoint};
use msclip::config::{CscSource, ExperimentConfig, Preset, ProbeConfig};
use msclip::data::{load_class_names, load_grounded, load_image, load_manifest, write_synthetic_dataset, PairRecord};
use msclip::eval::{
    encode_image_list, feature_rows, linear_probe_sweep, retrieval_recall, zero_shot_classify, PromptSet,
};
use msclip::model::{module_counts, MsClipModel};
use msclip::results::{write_results, ResultRecord};
use msclip::tokenizer::{TokenIds, Tokenizer};
use msclip::train::{train, TrainData, TrainOutputs};
use msclip::{MsClipError, Result};
use msclip_numerics::Tensor;

#[derive(Parser)]
#[command(name = "msclip", version, about = "Modality-shared contrastive image-text encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Architecture preset, e.g. ms_clip_s or share_last_n.
    #[arg(long, default_value = "ms_clip_s")]
    preset: String,
    /// Number of shared final layers for share_last_n.
    #[arg(long)]
    n: Option<usize>,
    /// 64px, width-128, 4-layer encoders.
    #[arg(long)]
    tiny: bool,
}

impl ModelArgs {
    fn preset(&self) -> Result<Preset> {
        Preset::parse(&self.preset, self.n)
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum SourceArg {
    Logits,
    Probabilities,
}

#[derive(Subcommand)]
enum Command {
    /// Builds a freshly initialized model and writes it as a checkpoint.
    Build {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints the parameter count of a preset by group.
    CountParams {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Trains on the `train` split of a manifest.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        /// Experiment config (TOML); replaces the preset flags.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        warmup_epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr_max: Option<f64>,
        #[arg(long)]
        lr_min: Option<f64>,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Zero-shot classification with prompt ensembles.
    EvalZeroshot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// One class name per line, indexed by the manifest's label column.
        #[arg(long)]
        classes: PathBuf,
        /// One template per line with a `{}` slot.
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long, default_value = "heldout")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Logistic-regression probe on frozen image features.
    EvalProbe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        train_split: String,
        #[arg(long, default_value = "heldout")]
        test_split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Image-to-text and text-to-image recall at 1 and 5.
    EvalRetrieval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "heldout")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer modality NMI of token features.
    AnalyzeNmi {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "heldout")]
        split: String,
        /// Pairs to score, from the start of the split.
        #[arg(long, default_value_t = 32)]
        limit: usize,
        #[arg(long, default_value_t = 10)]
        restarts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer CSC distance over grounded pairs.
    AnalyzeCsc {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        grounded: PathBuf,
        #[arg(long, value_enum, default_value = "logits")]
        source: SourceArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes one attention row as a plain-text heatmap.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image file; exports the CLS row.
        #[arg(long, conflicts_with = "text", required_unless_present = "text")]
        image: Option<PathBuf>,
        /// Caption; exports the EOS row.
        #[arg(long)]
        text: Option<String>,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes the synthetic shapes dataset.
    GenData {
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image side in pixels.
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        /// Two-object grounded pairs for CSC.
        #[arg(long, default_value_t = 16)]
        grounded: usize,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
}

fn emit(records: &[ResultRecord], out: Option<&Path>) -> Result<()> {
    for r in records {
        println!("{r}");
    }
    if let Some(p) = out {
        write_results(p, records)?;
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(MsClipModel<f32>, Tokenizer)> {
    let (m, tok) = load_checkpoint::<f32>(path)?;
    let tok = tok.ok_or_else(|| MsClipError::Input(format!("{} carries no vocabulary", path.display())))?;
    Ok((m, tok))
}

fn split_records(data: &Path, split: &str) -> Result<Vec<PairRecord>> {
    let manifest = load_manifest(data)?;
    for (line, reason) in &manifest.rejected {
        eprintln!("warning: {}:{line}: {reason}", data.display());
    }
    let recs: Vec<PairRecord> = manifest.split(split).into_iter().cloned().collect();
    if recs.is_empty() {
        return Err(MsClipError::Input(format!("{}: split {split:?} is empty", data.display())));
    }
    Ok(recs)
}

fn load_images(recs: &[PairRecord], size: usize) -> Result<Vec<Tensor<f32>>> {
    recs.iter().map(|r| load_image(&r.image, size)).collect()
}

fn encode_captions(recs: &[PairRecord], tok: &Tokenizer, ctx: usize) -> Vec<TokenIds> {
    recs.iter().map(|r| tok.encode(&r.caption, ctx)).collect()
}

fn print_counts(preset: Preset, tiny: bool) -> Result<()> {
    let (cfg, policy) = preset.build(tiny);
    let c = msclip::model::count_parameters(&cfg, &policy)?;
    println!("preset\t{preset}");
    println!("shared\t{}", c.shared);
    println!("vision\t{}", c.vision);
    println!("text\t{}", c.text);
    println!("global\t{}", c.global);
    println!("total\t{}\t({:.1}M)", c.total(), c.total() as f64 / 1e6);
    let m = module_counts(&cfg, &policy)?;
    if m.early_specialization > 0 {
        println!("early_specialization\t{}", m.early_specialization);
    }
    if m.parallel_branch > 0 {
        println!("parallel_branch\t{}", m.parallel_branch);
    }
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::CountParams { model } => print_counts(model.preset()?, model.tiny),
        Command::Build { model, seed, out } => {
            let preset = model.preset()?;
            let (cfg, policy) = preset.build(model.tiny);
            let m = MsClipModel::<f32>::build(cfg, policy, seed)?;
            save_checkpoint(&out, &m, None)?;
            print_counts(preset, model.tiny)?;
            println!("wrote\t{}", out.display());
            Ok(())
        }
        Command::Train { model, config, data, out, seed, epochs, warmup_epochs, batch_size, lr_max, lr_min, split } => {
            let mut cfg = match config {
                Some(p) => ExperimentConfig::from_toml(
                    &std::fs::read_to_string(&p).map_err(|e| MsClipError::Io { path: p.clone(), source: e })?,
                )?,
                None => ExperimentConfig::from_preset(model.preset()?, model.tiny),
            };
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = epochs {
                cfg.schedule.total_epochs = v;
                cfg.schedule.warmup_epochs = cfg.schedule.warmup_epochs.min(v);
            }
            if let Some(v) = warmup_epochs {
                cfg.schedule.warmup_epochs = v;
            }
            if let Some(v) = batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = lr_max {
                cfg.schedule.lr_max = v;
            }
            if let Some(v) = lr_min {
                cfg.schedule.lr_min = v;
            }
            cfg.output_dir = out.display().to_string();
            cfg.validate()?;
            let recs = split_records(&data, &split)?;
            let tok = Tokenizer::build(recs.iter().map(|r| r.caption.as_str()), cfg.model.vocab_size);
            let train_data = TrainData {
                images: load_images(&recs, cfg.model.image_size)?,
                tokens: encode_captions(&recs, &tok, cfg.model.context_length),
            };
            std::fs::create_dir_all(&out).map_err(|e| MsClipError::Io { path: out.clone(), source: e })?;
            let cfg_path = out.join("config.toml");
            std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| MsClipError::Io { path: cfg_path, source: e })?;
            let log_path = out.join("train_log.ndjson");
            let mut log = BufWriter::new(
                File::create(&log_path).map_err(|e| MsClipError::Io { path: log_path.clone(), source: e })?,
            );
            let mut m = MsClipModel::<f32>::build(cfg.model.clone(), cfg.policy.clone(), cfg.seed)?;
            let records = train(
                &mut m,
                &train_data,
                &cfg,
                TrainOutputs {
                    log: Some(&mut log),
                    checkpoint_dir: Some(out.join("checkpoints")),
                    tokenizer: Some(&tok),
                    on_epoch: Some(Box::new(|e, _| {
                        eprintln!("epoch {} done", e + 1);
                        Ok(())
                    })),
                },
            )?;
            log.flush().map_err(|e| MsClipError::Io { path: log_path, source: e })?;
            let final_path = out.join("model.ckpt");
            save_checkpoint(&final_path, &m, Some(&tok))?;
            if let (Some(first), Some(last)) = (records.first(), records.last()) {
                println!("steps\t{}", records.len());
                println!("loss_first\t{}", first.loss);
                println!("loss_last\t{}", last.loss);
            }
            println!("wrote\t{}", final_path.display());
            Ok(())
        }
        Command::EvalZeroshot { checkpoint, data, classes, templates, split, out } => {
            let (m, tok) = load_model(&checkpoint)?;
            let names = load_class_names(&classes)?;
            let prompts = match templates {
                Some(p) => PromptSet::new(names, load_class_names(&p)?)?,
                None => PromptSet::with_default_templates(names)?,
            };
            let recs = split_records(&data, &split)?;
            let labels: Vec<usize> = recs
                .iter()
                .map(|r| r.label.ok_or_else(|| MsClipError::Input(format!("{} has no label", r.image.display()))))
                .collect::<Result<_>>()?;
            if let Some(&l) = labels.iter().find(|&&l| l >= prompts.classes.len()) {
                return Err(MsClipError::Input(format!("label {l} has no class name")));
            }
            let images = load_images(&recs, m.config.image_size)?;
            let r = zero_shot_classify(&m, &tok, &images, &labels, &prompts)?;
            emit(&[ResultRecord::new("zeroshot_top1", &split, r.accuracy)], out.as_deref())
        }
        Command::EvalProbe { checkpoint, data, train_split, test_split, out } => {
            let (m, _) = load_model(&checkpoint)?;
            let cfg = ProbeConfig::default();
            let mut feats = Vec::new();
            for split in [&train_split, &test_split] {
                let recs = split_records(&data, split)?;
                let labels: Vec<usize> = recs
                    .iter()
                    .map(|r| r.label.ok_or_else(|| MsClipError::Input(format!("{} has no label", r.image.display()))))
                    .collect::<Result<_>>()?;
                let embs = encode_image_list(&m, &load_images(&recs, m.config.image_size)?, 32)?;
                feats.push((feature_rows(&embs)?, labels));
            }
            let classes = feats.iter().flat_map(|f| f.1.iter()).max().map_or(0, |&l| l + 1);
            let r = linear_probe_sweep((&feats[0].0, &feats[0].1), (&feats[1].0, &feats[1].1), classes, &cfg)?;
            let mut recs = vec![
                ResultRecord::new("probe_top1", &test_split, r.accuracy),
                ResultRecord::new("probe_l2", &test_split, r.classifier.l2),
                ResultRecord::new("probe_converged", &test_split, f64::from(u8::from(r.classifier.converged))),
            ];
            for (c, a) in r.per_class_accuracy.iter().enumerate() {
                if let Some(a) = a {
                    recs.push(ResultRecord::new(format!("probe_top1_class{c}"), &test_split, *a));
                }
            }
            emit(&recs, out.as_deref())
        }
        Command::EvalRetrieval { checkpoint, data, split, out } => {
            let (m, tok) = load_model(&checkpoint)?;
            let recs = split_records(&data, &split)?;
            let ie = encode_image_list(&m, &load_images(&recs, m.config.image_size)?, 32)?;
            let te = m.encode_texts(&encode_captions(&recs, &tok, m.config.context_length))?;
            let mut rows = Vec::new();
            for k in [1, 5] {
                let r = retrieval_recall(&ie, &te, k)?;
                rows.push(ResultRecord::new(format!("i2t_r@{k}"), &split, r.i2t));
                rows.push(ResultRecord::new(format!("t2i_r@{k}"), &split, r.t2i));
            }
            emit(&rows, out.as_deref())
        }
        Command::AnalyzeNmi { checkpoint, data, split, limit, restarts, seed, out } => {
            let (m, tok) = load_model(&checkpoint)?;
            let mut recs = split_records(&data, &split)?;
            recs.truncate(limit.max(1));
            let images = load_images(&recs, m.config.image_size)?;
            let caps = encode_captions(&recs, &tok, m.config.context_length);
            let r = fusion_report(&m, &images, &caps, restarts, seed)?;
            let mut rows: Vec<ResultRecord> = r
                .per_layer
                .iter()
                .enumerate()
                .map(|(l, v)| ResultRecord::new(format!("nmi_layer{l}"), &split, *v))
                .collect();
            rows.push(ResultRecord::new("nmi_mean", &split, r.average));
            emit(&rows, out.as_deref())
        }
        Command::AnalyzeCsc { checkpoint, grounded, source, out } => {
            let (m, tok) = load_model(&checkpoint)?;
            let pairs = load_grounded(&grounded)?;
            let source = match source {
                SourceArg::Logits => CscSource::Logits,
                SourceArg::Probabilities => CscSource::Probabilities,
            };
            let r = csc_report(&m, &tok, &pairs, source)?;
            let mut rows: Vec<ResultRecord> = r
                .per_layer
                .iter()
                .enumerate()
                .filter_map(|(l, v)| v.map(|v| ResultRecord::new(format!("csc_layer{l}"), "grounded", v)))
                .collect();
            rows.push(ResultRecord::new("csc_mean", "grounded", r.average));
            emit(&rows, out.as_deref())
        }
        Command::ExportAttn { checkpoint, image, text, layer, head, out } => {
            let (m, tok) = load_model(&checkpoint)?;
            let layer = layer.unwrap_or(m.config.num_layers - 1);
            let map = match (image, text) {
                (Some(p), _) => {
                    let img = load_image(&p, m.config.image_size)?;
                    export_attention(&m, AttnInput::Image(&img), layer, head, Query::Cls)?
                }
                (None, Some(t)) => {
                    let ids = tok.encode(&t, m.config.context_length);
                    export_attention(&m, AttnInput::Text(&ids), layer, head, Query::Eos)?
                }
                (None, None) => unreachable!("clap requires one input"),
            };
            let text = map.to_text();
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| MsClipError::Io { path: p, source: e })?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::GenData { classes, per_class, seed, image_size, grounded, out } => {
            let d = write_synthetic_dataset(&out, classes, per_class, seed, image_size, grounded)?;
            println!("train\t{}", d.train);
            println!("heldout\t{}", d.heldout);
            println!("manifest\t{}", d.manifest.display());
            println!("classes\t{}", d.classes.display());
            println!("grounded\t{}", d.grounded.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
