use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sfdr::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use sfdr::config::{CiderVariant, RunConfig, Stage};
use sfdr::data::bundle::read_bundle_checked;
use sfdr::data::corpus::parse_references;
use sfdr::data::{gen_synthetic_corpus, load_corpus, split_indices, tokenize, write_corpus, Corpus, FeatureBundle, Split, SyntheticSpec, Vocabulary};
use sfdr::inference::{attention_maps, caption_all, format_grid};
use sfdr::metrics::evaluate;
use sfdr::model::SfdrModel;
use sfdr::trainer::Trainer;
use sfdr::{selftest, Error};

/// Remote-sensing image captioning with semantic-spatial fusion and dynamic
/// graph refinement.
#[derive(Parser)]
#[command(name = "sfdr", version)]
struct Cli {
    /// Cap on worker threads for corpus-level parallelism (0 = all cores).
    #[arg(long, global = true, env = "SFDR_THREADS")]
    threads: Option<usize>,

    /// Log progress to stderr (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Published hyperparameters (batch 64, 40 epochs, lr 5e-6).
    Paper,
    /// Small-corpus settings (batch 8, 200 epochs, lr 2e-3, full vocabulary).
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus of class-structured feature bundles.
    GenSynthetic {
        /// Number of images.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 1)]
        captions_per_image: usize,
    },
    /// Train a model and write a checkpoint plus run manifest.
    Train {
        /// Corpus directory written by gen-synthetic or the feature exporter.
        #[arg(long)]
        corpus: PathBuf,
        /// `ce` trains from scratch (or from --init); `scst` fine-tunes a CE
        /// checkpoint given by --init, or runs CE then SCST without one.
        #[arg(long)]
        stage: Option<Stage>,
        /// Base hyperparameters before --config and --set are applied.
        #[arg(long, value_enum, default_value = "paper")]
        preset: Preset,
        /// key=value configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra key=value assignment, applied after --config. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Start from this checkpoint's parameters.
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Continue an interrupted run from a `.last` checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Best-validation checkpoint; `<out>.last` holds the resumable state.
        #[arg(long)]
        out: PathBuf,
        /// Manifest path (default `<out>.manifest.txt`).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Caption a corpus split with beam search.
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Beam width (default from the checkpoint config).
        #[arg(long)]
        beam: Option<usize>,
        /// Length-normalization exponent (default from the checkpoint config).
        #[arg(long)]
        length_norm: Option<f64>,
        /// Output file of `<image_id>\t<caption>` lines.
        #[arg(long)]
        out: PathBuf,
        /// Write per-token cross-attention grids, one file per image.
        #[arg(long)]
        dump_attention: Option<PathBuf>,
    },
    /// Score captions against references.
    Eval {
        /// File of `<image_id>\t<caption>` lines.
        #[arg(long)]
        captions: PathBuf,
        /// References file of `<image_id>\t<index>\t<sentence>` lines.
        #[arg(long, required_unless_present = "corpus")]
        references: Option<PathBuf>,
        /// Take references from this corpus split instead.
        #[arg(long, conflicts_with = "references")]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value = "cider")]
        cider: CiderVariant,
        /// Externally computed SPICE, enabling the S_m* aggregate.
        #[arg(long)]
        spice: Option<f64>,
    },
    /// Run the gradient-check and metric-oracle suites.
    Selftest,
    /// Describe a bundle or checkpoint file.
    Inspect {
        #[arg(long, required_unless_present = "ckpt")]
        bundle: Option<PathBuf>,
        #[arg(long, conflicts_with = "bundle")]
        ckpt: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.verbose { "info" } else { "warn" }))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric_error() {
        3
    } else if e.is_data_error() || matches!(e, Error::Dimension { .. }) {
        2
    } else if matches!(e, Error::Config(_) | Error::Argument(_)) {
        1
    } else {
        3
    }
}

fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn split_bundles(corpus: &Corpus, split: SplitArg) -> Vec<FeatureBundle> {
    match split {
        SplitArg::Train => corpus.split(Split::Train).to_vec(),
        SplitArg::Val => corpus.split(Split::Val).to_vec(),
        SplitArg::Test => corpus.split(Split::Test).to_vec(),
        SplitArg::All => corpus.all().cloned().collect(),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::GenSynthetic { n, seed, out, classes, captions_per_image } => {
            if n == 0 || classes == 0 || captions_per_image == 0 {
                return Err(Error::Argument("--n, --classes and --captions-per-image must be ≥ 1".into()));
            }
            let spec = SyntheticSpec { classes, captions_per_image, ..SyntheticSpec::desk(seed) };
            let corpus = gen_synthetic_corpus(n, &spec);
            write_corpus(&out, &corpus.header, &corpus.bundles, &split_indices(n, seed))?;
            println!("wrote {n} bundles to {}", out.display());
        }
        Command::Train { corpus, stage, preset, config, sets, init, resume, out, manifest } => {
            let corpus = load_corpus(&corpus)?;
            let mut cfg = match preset {
                Preset::Paper => RunConfig::default(),
                Preset::Desk => RunConfig::desk(),
            };
            if let Some(path) = &config {
                cfg.apply_text(&read_text(path)?)?;
            }
            for s in &sets {
                let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
                cfg.set(k, v)?;
            }
            if let Some(st) = stage {
                cfg.train_stage = st;
            }
            cfg.validate()?;
            let manifest_path = manifest.unwrap_or_else(|| with_suffix(&out, ".manifest.txt"));
            train_command(&corpus, cfg, init, resume, &out, &manifest_path)?;
        }
        Command::Caption { ckpt, corpus, split, beam, length_norm, out, dump_attention } => {
            let Checkpoint { model, .. } = load_checkpoint(&ckpt)?;
            let corpus = load_corpus(&corpus)?;
            if corpus.header != model.header {
                return Err(Error::Data(format!("corpus header {:?} does not match checkpoint {:?}", corpus.header, model.header)));
            }
            let bundles = split_bundles(&corpus, split);
            if bundles.is_empty() {
                return Err(Error::Data("selected split has no images".into()));
            }
            let beam = beam.unwrap_or(model.config.inference_beam);
            let ln = length_norm.unwrap_or(model.config.inference_length_norm);
            let results = caption_all(&model, &bundles, beam, ln)?;
            let mut text = String::new();
            for (id, hyp) in &results {
                text.push_str(&format!("{id}\t{}\n", model.vocab.decode(hyp.tokens.ids())));
            }
            write_text(&out, &text)?;
            if let Some(dir) = dump_attention {
                fs::create_dir_all(&dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
                for (b, (id, hyp)) in bundles.iter().zip(&results) {
                    let maps = attention_maps(&model, b, hyp)?;
                    let words: Vec<String> = hyp.tokens.ids()[1..].iter().map(|&t| model.vocab.token(t).map(str::to_string)).collect::<Result<_, _>>()?;
                    let mut s = format!("# image {id}\n# predicted tokens (one row each): {}\n", words.join(" "));
                    for (l, heads) in maps.iter().enumerate() {
                        for (h, grid) in heads.iter().enumerate() {
                            s.push_str(&format!("[layer {l} head {h}] {} x {}\n", grid.rows(), grid.cols()));
                            s.push_str(&format_grid(grid));
                        }
                    }
                    write_text(&dir.join(format!("{id}.attn.txt")), &s)?;
                }
            }
            println!("captioned {} images into {}", results.len(), out.display());
        }
        Command::Eval { captions, references, corpus, split, cider, spice } => {
            let mut cands = BTreeMap::new();
            for (id, c) in sfdr::data::corpus::parse_captions(&read_text(&captions)?)? {
                if cands.insert(id.clone(), c).is_some() {
                    return Err(Error::Data(format!("duplicate caption for {id}")));
                }
            }
            let refs = match (references, corpus) {
                (Some(path), _) => parse_references(&read_text(&path)?)?,
                (None, Some(dir)) => split_bundles(&load_corpus(&dir)?, split)
                    .into_iter()
                    .map(|b| (b.image_id, b.captions))
                    .collect(),
                (None, None) => unreachable!("clap requires one of them"),
            };
            print!("{}", evaluate(&cands, &refs, cider, spice)?);
        }
        Command::Selftest => {
            let checks = selftest::run_all();
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} passed, {failed} failed", checks.len() - failed);
            if failed > 0 {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Inspect { bundle, ckpt } => {
            if let Some(path) = bundle {
                let (h, b) = read_bundle_checked(&path, None)?;
                println!("image_id={}", b.image_id);
                for (name, v) in h.fields() {
                    println!("{name}={v}");
                }
                println!("clip_text={}", if b.clip_text.is_some() { "present" } else { "absent" });
                println!("captions={}", b.captions.len());
            } else if let Some(path) = ckpt {
                let ck = load_checkpoint(&path)?;
                let m = &ck.model;
                for (name, v) in m.header.fields() {
                    println!("{name}={v}");
                }
                println!("vocab_size={}", m.vocab.len());
                println!("vocab_hash={}", m.vocab.hash());
                println!("parameters={} tensors, {} values", m.store.len(), m.store.num_values());
                match &ck.state {
                    Some(s) => println!("state={}@{} steps={}", s.stage, s.epoch, s.step),
                    None => println!("state=-"),
                }
                print!("{}", m.config.to_text());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn train_command(corpus: &Corpus, cfg: RunConfig, init: Option<PathBuf>, resume: Option<PathBuf>, out: &Path, manifest_path: &Path) -> Result<(), Error> {
    let target = cfg.train_stage;
    let mut trainer = if let Some(path) = resume {
        let ck = load_checkpoint(&path)?;
        let state = ck.state.ok_or_else(|| Error::Data(format!("{} holds no optimizer state", path.display())))?;
        Trainer::resume(reconfigure(ck.model, &cfg)?, state, &corpus.train, &corpus.val)?
    } else {
        let (model, first) = match init {
            Some(path) => (reconfigure(load_checkpoint(&path)?.model, &cfg)?, target),
            None => {
                let captions: Vec<Vec<String>> = corpus.train.iter().flat_map(|b| b.captions.iter().map(|c| tokenize(c))).collect();
                (SfdrModel::new(&cfg, corpus.header, Vocabulary::build(&captions, cfg.vocab_min_count))?, Stage::Ce)
            }
        };
        let mut t = Trainer::new(model, &corpus.train, &corpus.val)?;
        t.begin_stage(first);
        t
    };

    let outcome = (|| -> Result<(), Error> {
        if trainer.stage() == Stage::Ce {
            trainer.run()?;
            if target == Stage::Scst {
                trainer.begin_stage(Stage::Scst);
            }
        }
        if trainer.stage() == Stage::Scst {
            trainer.run()?;
        }
        Ok(())
    })();

    write_text(manifest_path, &trainer.manifest().to_string())?;
    let last = with_suffix(out, ".last");
    save_checkpoint(&last, trainer.model(), Some(&trainer.state()))?;
    outcome?;
    save_checkpoint(out, &trainer.best_model(), None)?;
    println!("wrote {} (resume state in {}, manifest {})", out.display(), last.display(), manifest_path.display());
    Ok(())
}

/// Applies a resolved configuration to a loaded model, refusing changes that
/// would alter its parameter shapes.
fn reconfigure(mut model: SfdrModel, cfg: &RunConfig) -> Result<SfdrModel, Error> {
    let rebuilt = SfdrModel::new(cfg, model.header, model.vocab.clone())?;
    let same = rebuilt.store.len() == model.store.len()
        && rebuilt.store.iter().zip(model.store.iter()).all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
    if !same {
        return Err(Error::Config("configuration changes the checkpoint's architecture".into()));
    }
    model.config = cfg.clone();
    Ok(model)
}
