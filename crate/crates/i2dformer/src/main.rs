use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use i2dformer::config::{GammaSpec, RunConfig};
use i2dformer::corpus::{load_dataset, Dataset};
use i2dformer::error::{Error, Result};
use i2dformer::eval::{
    baseline_avg_wordvec, calibrate_gamma, default_gamma_grid, evaluate, export_embeddings,
    proxy_unseen_classes, write_embedding_file,
};
use i2dformer::explain::{patch_to_word, top_attended_words, word_to_image, write_ranked_tokens};
use i2dformer::model::ModelParams;
use i2dformer::synth::generate;
use i2dformer::train::{fit, load_checkpoint, save_checkpoint};
use i2dformer::wordvec::parse_wordvec_file;

#[derive(Parser)]
#[command(
    name = "i2dformer",
    version,
    about = "Joint image-document embeddings for zero-shot classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset with planted image-word alignments
    GenSynth(GenSynthArgs),
    /// Train on the seen classes of a dataset
    Train(TrainArgs),
    /// Evaluate a checkpoint under the ZSL and GZSL protocols
    Eval(EvalArgs),
    /// Attention attribution exports for a trained checkpoint
    Explain(ExplainArgs),
    /// Export per-class document embeddings
    ExportEmb(ExportEmbArgs),
}

/// Config file plus generic key=value overrides, shared by all subcommands.
#[derive(Args)]
struct ConfigArgs {
    /// Config file of key=value lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set lambda_local=0 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    /// defaults -> file -> --set -> named flags.
    fn resolve(&self, flag_overrides: Vec<(String, String)>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.load_file(path)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{}'", kv)))?;
            cfg.set(k, v)?;
        }
        for (k, v) in flag_overrides {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }
}

macro_rules! push_flag {
    ($out:expr, $key:literal, $field:expr) => {
        if let Some(v) = &$field {
            $out.push(($key.to_string(), v.to_string()));
        }
    };
}

#[derive(Args)]
struct GenSynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for the dataset files
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_seen: Option<usize>,
    #[arg(long)]
    n_unseen: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    heldout_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    n_patches: Option<usize>,
    #[arg(long)]
    input_dim: Option<usize>,
    #[arg(long)]
    visual_vocab: Option<usize>,
    #[arg(long)]
    noise_vocab: Option<usize>,
    #[arg(long)]
    words_per_doc: Option<usize>,
    #[arg(long)]
    disc_words_per_class: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
}

impl GenSynthArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        push_flag!(out, "seed", self.seed);
        push_flag!(out, "n_seen", self.n_seen);
        push_flag!(out, "n_unseen", self.n_unseen);
        push_flag!(out, "train_per_class", self.train_per_class);
        push_flag!(out, "heldout_per_class", self.heldout_per_class);
        push_flag!(out, "test_per_class", self.test_per_class);
        push_flag!(out, "n_patches", self.n_patches);
        push_flag!(out, "input_dim", self.input_dim);
        push_flag!(out, "visual_vocab", self.visual_vocab);
        push_flag!(out, "noise_vocab", self.noise_vocab);
        push_flag!(out, "words_per_doc", self.words_per_doc);
        push_flag!(out, "disc_words_per_class", self.disc_words_per_class);
        push_flag!(out, "sigma", self.sigma);
        out
    }
}

/// Dataset file locations: a directory with the standard names, or explicit
/// per-file paths overriding it.
#[derive(Args)]
struct DataArgs {
    /// Dataset directory holding wordvec.txt, documents.txt, features.txt, split.txt
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    wordvec: Option<PathBuf>,
    #[arg(long)]
    documents: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
}

impl DataArgs {
    fn path(&self, explicit: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
        match (explicit, &self.data) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(dir)) => Ok(dir.join(name)),
            (None, None) => Err(Error::Config(format!(
                "no path for {}: pass --data DIR or --{}",
                name,
                name.trim_end_matches(".txt")
            ))),
        }
    }

    fn load(&self, max_words: usize, oov: i2dformer::wordvec::OovPolicy) -> Result<Dataset> {
        let wv = self.load_wordvec()?;
        load_dataset(
            &self.path(&self.documents, "documents.txt")?,
            &self.path(&self.features, "features.txt")?,
            &self.path(&self.split, "split.txt")?,
            &wv,
            max_words,
            oov,
        )
    }

    fn load_wordvec(&self) -> Result<i2dformer::wordvec::WordVectors> {
        parse_wordvec_file(&self.path(&self.wordvec, "wordvec.txt")?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for checkpoint, log, and resolved config
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    lambda_local: Option<f64>,
    /// mean or max
    #[arg(long)]
    pool: Option<String>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    max_words: Option<usize>,
    /// true or false
    #[arg(long)]
    positional: Option<String>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    proxy_frac: Option<f64>,
    /// drop or mean
    #[arg(long)]
    oov_policy: Option<String>,
}

impl TrainArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        push_flag!(out, "seed", self.seed);
        push_flag!(out, "epochs", self.epochs);
        push_flag!(out, "batch_size", self.batch_size);
        push_flag!(out, "lr", self.lr);
        push_flag!(out, "beta1", self.beta1);
        push_flag!(out, "beta2", self.beta2);
        push_flag!(out, "epsilon", self.epsilon);
        push_flag!(out, "lambda_local", self.lambda_local);
        push_flag!(out, "pool", self.pool);
        push_flag!(out, "embed_dim", self.embed_dim);
        push_flag!(out, "blocks", self.blocks);
        push_flag!(out, "heads", self.heads);
        push_flag!(out, "max_words", self.max_words);
        push_flag!(out, "positional", self.positional);
        push_flag!(out, "patience", self.patience);
        push_flag!(out, "proxy_frac", self.proxy_frac);
        push_flag!(out, "oov_policy", self.oov_policy);
        out
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Trained checkpoint file
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for the report files
    #[arg(long)]
    out: PathBuf,
    /// Calibration constant: a number, or 'auto' for a held-out sweep
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    proxy_frac: Option<f64>,
    #[arg(long)]
    oov_policy: Option<String>,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for attribution records and SVGs
    #[arg(long)]
    out: PathBuf,
    #[command(subcommand)]
    kind: ExplainKind,
}

#[derive(Subcommand)]
enum ExplainKind {
    /// Top attended document words behind a class embedding
    TopWords {
        #[arg(long)]
        class: String,
        #[arg(long, default_value_t = 8)]
        k: usize,
    },
    /// Top words for one image patch
    PatchToWord {
        #[arg(long)]
        image: String,
        #[arg(long)]
        patch: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Document class; defaults to the image's own class
        #[arg(long)]
        class: Option<String>,
    },
    /// One word's attention heatmap over the image patches
    WordToImage {
        #[arg(long)]
        image: String,
        #[arg(long)]
        word: String,
        /// Document class; defaults to the image's own class
        #[arg(long)]
        class: Option<String>,
    },
}

#[derive(Args)]
struct ExportEmbArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for the embedding file
    #[arg(long)]
    out: PathBuf,
    /// Export a baseline embedding instead: avg-wordvec
    #[arg(long)]
    baseline: Option<String>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e);
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth(args) => cmd_gen_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Explain(args) => cmd_explain(args),
        Command::ExportEmb(args) => cmd_export_emb(args),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{:02x}", b)).collect())
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<()> {
    let cfg = args.config.resolve(args.overrides())?;
    ensure_dir(&args.out)?;
    let (files, _gt) = generate(&cfg.synth, &args.out)?;
    cfg.write_resolved(&args.out)?;
    println!("generated dataset in {}", args.out.display());
    let resolved = args.out.join("config.resolved");
    let mut listed: Vec<&PathBuf> = files.all().to_vec();
    listed.push(&resolved);
    for path in listed {
        println!("{}  {}", file_sha256(path)?, path.display());
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = args.config.resolve(args.overrides())?;
    ensure_dir(&args.out)?;
    let dataset = args.data.load(cfg.train.max_words, cfg.oov_policy)?;
    let outcome = fit(&dataset, &cfg.train)?;

    let checkpoint_path = args.out.join("checkpoint.txt");
    save_checkpoint(&outcome.params, None, &checkpoint_path)?;
    outcome.log.write(&args.out.join("train_log.txt"))?;
    cfg.write_resolved(&args.out)?;

    if let Some(reason) = outcome.diverged {
        eprintln!(
            "training diverged; last good checkpoint written to {}",
            checkpoint_path.display()
        );
        return Err(Error::Divergence(reason));
    }
    println!(
        "trained: best held-out H {:.4} at epoch {}; checkpoint {}",
        outcome.best_h,
        outcome.best_epoch,
        checkpoint_path.display()
    );
    Ok(())
}

fn load_model(checkpoint: &Path) -> Result<ModelParams> {
    let (params, _) = load_checkpoint(checkpoint)?;
    Ok(params)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut overrides = Vec::new();
    push_flag!(overrides, "gamma", args.gamma);
    push_flag!(overrides, "proxy_frac", args.proxy_frac);
    push_flag!(overrides, "oov_policy", args.oov_policy);
    let cfg = args.config.resolve(overrides)?;
    ensure_dir(&args.out)?;
    let params = load_model(&args.checkpoint)?;
    // tokenize with the model's own document length limit
    let dataset = args.data.load(params.config.max_words, cfg.oov_policy)?;

    let gamma = match cfg.gamma {
        GammaSpec::Fixed(g) => g,
        GammaSpec::Auto => {
            let proxy = proxy_unseen_classes(&dataset, cfg.train.proxy_frac);
            let grid = default_gamma_grid(&params, &dataset, &proxy)?;
            let (best, sweep) = calibrate_gamma(&params, &dataset, &proxy, &grid)?;
            let mut out = String::new();
            for p in &sweep {
                out.push_str(&format!(
                    "gamma {} u {} s {} h {}\n",
                    p.gamma, p.u, p.s, p.h
                ));
            }
            let sweep_path = args.out.join("gamma_sweep.txt");
            fs::write(&sweep_path, out).map_err(|e| Error::io(&sweep_path, e))?;
            best
        }
    };
    let report = evaluate(&params, &dataset, gamma)?;
    report.write(&args.out.join("report.txt"))?;
    cfg.write_resolved(&args.out)?;
    print!("{}", report.summary());
    Ok(())
}

fn cmd_explain(args: ExplainArgs) -> Result<()> {
    let cfg = args.config.resolve(Vec::new())?;
    ensure_dir(&args.out)?;
    let params = load_model(&args.checkpoint)?;
    let dataset = args.data.load(params.config.max_words, cfg.oov_policy)?;

    let doc_for = |class: &str| -> Result<&i2dformer::corpus::ClassDocument> {
        dataset
            .documents
            .get(class)
            .ok_or_else(|| Error::Protocol(format!("unknown class '{}'", class)))
    };
    let image_for = |id: &str| -> Result<&i2dformer::corpus::ImageFeatureRecord> {
        dataset
            .feature(id)
            .ok_or_else(|| Error::Protocol(format!("unknown image id '{}'", id)))
    };

    match &args.kind {
        ExplainKind::TopWords { class, k } => {
            let doc = doc_for(class)?;
            let ranked = top_attended_words(&params, doc, *k);
            let path = args.out.join(format!("top_words_{}.txt", class));
            write_ranked_tokens(&ranked, &format!("class {}", class), &path)?;
            for (token, weight) in &ranked {
                println!("{} {}", token, weight);
            }
        }
        ExplainKind::PatchToWord {
            image,
            patch,
            k,
            class,
        } => {
            let rec = image_for(image)?;
            let class = class.clone().unwrap_or_else(|| rec.class_id.clone());
            let doc = doc_for(&class)?;
            let ranked = patch_to_word(&params, rec, doc, *patch, *k)?;
            let path = args
                .out
                .join(format!("patch_to_word_{}_{}.txt", image, patch));
            write_ranked_tokens(
                &ranked,
                &format!("image {} patch {} class {}", image, patch, class),
                &path,
            )?;
            for (token, weight) in &ranked {
                println!("{} {}", token, weight);
            }
        }
        ExplainKind::WordToImage { image, word, class } => {
            let rec = image_for(image)?;
            let class = class.clone().unwrap_or_else(|| rec.class_id.clone());
            let doc = doc_for(&class)?;
            let position = doc.tokens.iter().position(|t| t == word).ok_or_else(|| {
                Error::Protocol(format!(
                    "word '{}' not in the document for class '{}'",
                    word, class
                ))
            })?;
            let heatmap = word_to_image(&params, rec, doc, position)?;
            let base = format!("word_to_image_{}_{}", image, word);
            let record_path = args.out.join(format!("{}.txt", base));
            fs::write(&record_path, heatmap.to_lines())
                .map_err(|e| Error::io(&record_path, e))?;
            heatmap.write_svg(&args.out.join(format!("{}.svg", base)))?;
            println!("wrote {} and {}.svg", record_path.display(), base);
        }
    }
    cfg.write_resolved(&args.out)?;
    Ok(())
}

fn cmd_export_emb(args: ExportEmbArgs) -> Result<()> {
    let cfg = args.config.resolve(Vec::new())?;
    ensure_dir(&args.out)?;
    let params = load_model(&args.checkpoint)?;
    let dataset = args.data.load(params.config.max_words, cfg.oov_policy)?;

    let path = match args.baseline.as_deref() {
        None => {
            let path = args.out.join("i2demb.txt");
            export_embeddings(&params, &dataset.documents, &path)?;
            path
        }
        Some("avg-wordvec") => {
            let wv = args.data.load_wordvec()?;
            let baseline = baseline_avg_wordvec(&dataset.documents, &wv)?;
            let path = args.out.join("avg_wordvec_emb.txt");
            write_embedding_file(&baseline, &path)?;
            path
        }
        Some(other) => {
            return Err(Error::Config(format!(
                "unknown baseline '{}'; supported: avg-wordvec",
                other
            )));
        }
    };
    cfg.write_resolved(&args.out)?;
    println!("{}  {}", file_sha256(&path)?, path.display());
    Ok(())
}
