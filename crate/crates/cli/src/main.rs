//! `idstyle`: corpus synthesis, classifier pretraining, generator training,
//! stylisation, matrix rendering, benchmark evaluation and saliency maps.
//!
//! Exit status is 0 on success, 1 for usage errors (bad flags, missing
//! inputs, invalid configuration) and 2 for runtime failures. Failures print
//! a single `error: ...` line on stderr; successes list the written artifacts
//! on stdout.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use idstyle_core::checkpoint::Checkpoint;
use idstyle_core::dataset::generate_synthetic_corpus;
use idstyle_core::encoders::{guided_backprop, saliency_image, GuidedTarget};
use idstyle_core::image::{read_raw, resample};
use idstyle_core::metrics::{evaluate_model, id_distance, style_matrix, EvalOptions, NiqeModel};
use idstyle_core::training::{make_ablation_config, pretrain_style_classifier, train_generator, TrainOptions};
use idstyle_core::{Corpus, Error, ImageTensor, StyleModel, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "idstyle", version, about = "Identity stylisation across heterogeneous face domains")]
struct Cli {
    /// TOML run configuration; desk defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving every artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Accept a checkpoint whose configuration differs from --config.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EncoderKind {
    Texture,
    Distinctive,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a procedural multi-domain corpus and its manifest.
    Synth {
        #[arg(long, default_value_t = 4)]
        domains: usize,
        #[arg(long, default_value_t = 16)]
        per_domain: usize,
        /// Image side; the configured output size when absent.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the domain classifier.
    PretrainCls {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train the generator against a pretrained classifier.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        /// Named ablation applied on top of the configuration.
        #[arg(long)]
        variant: Option<String>,
        /// Skip benchmark snapshots at each eval interval.
        #[arg(long)]
        no_eval: bool,
    },
    /// Stylise one content image with one style image.
    Stylize {
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "stylized.png")]
        name: String,
    },
    /// Render the all-domains matrix and its identity statistics.
    Matrix {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Benchmark a trained checkpoint; writes report.csv and report.json.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Eval images per content domain; the configured value when absent.
        #[arg(long)]
        content_per_domain: Option<usize>,
        /// Pristine NIQE model (JSON); fitted on the corpus when absent.
        #[arg(long)]
        niqe_model: Option<PathBuf>,
    },
    /// Guided-backpropagation saliency of one encoder output.
    Gbp {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum, default_value_t = EncoderKind::Distinctive)]
        encoder: EncoderKind,
        /// Class logit (distinctive) or pooled channel (texture).
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::MissingFile(_)
            | Error::InvalidConfig(_)
            | Error::UnknownVariant(_)
            | Error::InvalidBackend(_)
            | Error::InvalidCounts(_)
            | Error::ConfigHashMismatch { .. }
            | Error::MalformedManifest { .. } => 1,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

type Outcome = std::result::Result<Vec<PathBuf>, Failure>;

fn require(path: &Path, what: &str) -> std::result::Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(format!("{what} not found: {}", path.display())))
    }
}

fn config(cli: &Cli) -> std::result::Result<TrainConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => {
            require(p, "config")?;
            TrainConfig::load(p)?
        }
        None => TrainConfig::desk(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> std::result::Result<PathBuf, Failure> {
    let dir = cli.out.clone().ok_or_else(|| Failure::usage("--out is required"))?;
    std::fs::create_dir_all(&dir).map_err(|e| Failure { code: 2, message: format!("{}: {e}", dir.display()) })?;
    Ok(dir)
}

/// The trained model of a checkpoint, checked against --config when given.
fn load_model(cli: &Cli, checkpoint: &Path) -> std::result::Result<StyleModel, Failure> {
    require(checkpoint, "checkpoint")?;
    let ck = Checkpoint::load(checkpoint)?;
    if cli.config.is_some() {
        ck.check_config(&config(cli)?, cli.force)?;
    }
    Ok(ck.to_model()?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> std::result::Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    std::fs::write(path, text).map_err(|e| Failure { code: 2, message: format!("{}: {e}", path.display()) })
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Synth { domains, per_domain, size } => {
            let cfg = config(cli)?;
            let out = out_dir(cli)?;
            let manifest = generate_synthetic_corpus(&out, *domains, *per_domain, size.unwrap_or(cfg.output_size), cfg.seed)?;
            Ok(vec![manifest])
        }
        Command::PretrainCls { manifest } => {
            let cfg = config(cli)?;
            require(manifest, "manifest")?;
            let out = out_dir(cli)?;
            pretrain_style_classifier(manifest, &cfg, &out)?;
            Ok(vec![out.join("classifier.ckpt"), out.join("cls_log.jsonl")])
        }
        Command::Train { manifest, classifier, variant, no_eval } => {
            let mut cfg = config(cli)?;
            if let Some(v) = variant {
                cfg = make_ablation_config(&cfg, v)?;
            }
            require(manifest, "manifest")?;
            require(classifier, "checkpoint")?;
            let out = out_dir(cli)?;
            let opts = TrainOptions { out_dir: Some(out.clone()), evaluate: !no_eval };
            let outcome = train_generator(manifest, &cfg, classifier, &opts)?;
            let mut written = vec![out.join("train_meta.json"), out.join("train_log.jsonl"), out.join("eval.jsonl")];
            written.extend((1..=cfg.iterations / cfg.eval_interval).map(|k| out.join(format!("checkpoint_{:06}.ckpt", k * cfg.eval_interval))));
            written.push(out.join("generator.ckpt"));
            if outcome.collapse.is_some() {
                written.push(out.join("collapse.json"));
            }
            Ok(written)
        }
        Command::Stylize { content, style, checkpoint, name } => {
            require(content, "content image")?;
            require(style, "style image")?;
            let model = load_model(cli, checkpoint)?;
            let out = out_dir(cli)?;
            let size = model.config.output_size;
            let c = ImageTensor::load_png(content, size)?;
            let s = ImageTensor::load_png(style, size)?;
            let result = model.generate(&c, &s)?;
            let path = out.join(name);
            result.save_png(&path)?;
            if model.identity.dim().is_ok() {
                let ds = id_distance(&model.identity, &result, &s)?;
                let dc = id_distance(&model.identity, &result, &c)?;
                println!("id_style={ds:.6} id_content={dc:.6}");
            }
            Ok(vec![path])
        }
        Command::Matrix { manifest, checkpoint } => {
            require(manifest, "manifest")?;
            let model = load_model(cli, checkpoint)?;
            let out = out_dir(cli)?;
            let corpus = Corpus::load(manifest, model.config.output_size)?;
            let m = style_matrix(&model, &corpus)?;
            let png = out.join("matrix.png");
            m.montage()?.save_png(&png)?;
            let stats_path = out.join("matrix_stats.json");
            let stats = m.stats(&model.identity)?;
            write_json(&stats_path, &serde_json::json!({ "domains": m.domains, "stats": stats }))?;
            Ok(vec![png, stats_path])
        }
        Command::Evaluate { manifest, checkpoint, content_per_domain, niqe_model } => {
            require(manifest, "manifest")?;
            let model = load_model(cli, checkpoint)?;
            let out = out_dir(cli)?;
            let corpus = Corpus::load(manifest, model.config.output_size)?;
            let mut opts = EvalOptions::from_config(&model.config, content_per_domain.unwrap_or(model.config.eval_contents_per_domain));
            if let Some(p) = niqe_model {
                require(p, "NIQE model")?;
                opts.niqe = Some(NiqeModel::load(p)?);
            }
            let report = evaluate_model(&model, &corpus, &opts)?;
            let (csv, json) = (out.join("report.csv"), out.join("report.json"));
            report.write(&csv, &json)?;
            Ok(vec![csv, json])
        }
        Command::Gbp { checkpoint, image, encoder, index } => {
            require(image, "image")?;
            let model = load_model(cli, checkpoint)?;
            let out = out_dir(cli)?;
            let raw = read_raw(image)?;
            let x = ImageTensor::load_png(image, model.config.output_size)?;
            let net: &dyn GuidedTarget = match encoder {
                EncoderKind::Texture => &model.texture,
                EncoderKind::Distinctive => &model.classifier,
            };
            let sal = saliency_image(&guided_backprop(net, &x, *index)?);
            let sized = resample(&sal.to_raw(), raw.width, raw.height)?;
            let path = out.join(format!("gbp_{}_{index}.png", net.name().replace(' ', "_")));
            sized.save_png(&path)?;
            Ok(vec![path])
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("usage error").trim_start_matches("error: ").to_string();
            eprintln!("error: {first}");
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
