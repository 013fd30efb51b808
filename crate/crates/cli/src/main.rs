use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use pano_core::checks::{self, Scope};
use pano_core::model::Trans4Pass;
use pano_core::mpa::PrototypeBank;
use pano_core::panogeo::{Dataset, DatasetManifest};
use pano_core::pipeline::{self, PipelineConfig};
use pano_core::trainer::AdaptMode;
use pano_core::{Error, Result};

/// Distortion-aware panoramic segmentation on synthetic sphere worlds.
#[derive(Parser)]
#[command(name = "pano-deform", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set trainer.lr0=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[String]) -> Result<PipelineConfig> {
        let mut sets = self.sets.clone();
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        sets.extend_from_slice(extra);
        PipelineConfig::resolve(self.config.as_deref(), &sets)
    }
}

#[derive(Args)]
struct Output {
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic pinhole/panorama dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: Output,
        /// Shorthand for `--set data.spec.classes=K`.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Train a fresh model on the labeled source split.
    TrainSource {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: Output,
    },
    /// Build the prototype bank from a source-trained checkpoint.
    InitBank {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        out: Output,
    },
    /// Adapt a source-trained checkpoint to the target domain.
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Prototype bank directory; required by the mpa modes.
        #[arg(long)]
        bank: Option<PathBuf>,
        /// ssl, mpa or mpa+ssl.
        #[arg(long)]
        mode: String,
        #[command(flatten)]
        out: Output,
    },
    /// Score a checkpoint on the panorama test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        out: Output,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// op, module or model.
        #[arg(long, default_value = "op")]
        scope: String,
        /// Flip the sign of the bilinear coordinate gradient.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Per-stage shapes and parameter counts.
    Describe {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Describe a saved checkpoint instead of the configured model.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
    /// synth → train-source → init-bank → adapt → eval for every configured mode.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: Output,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn start(cfg: &PipelineConfig, out: &Output) -> Result<()> {
    pipeline::prepare_out_dir(&out.out, out.force)?;
    cfg.snapshot(&out.out)
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::load(path)
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Synth { cfg, out, classes } => {
            let extra: Vec<String> = classes.map(|k| format!("data.spec.classes={k}")).into_iter().collect();
            let cfg = cfg.resolve(&extra)?;
            start(&cfg, &out)?;
            let m = pipeline::synth(&cfg, &out.out)?;
            println!(
                "classes {}  source {}  target {}  test {}  source_test {}",
                m.classes,
                m.source.len(),
                m.target.len(),
                m.test.len(),
                m.source_test.len()
            );
            println!("checksum {}", checksum(&out.out, &m)?);
            println!("{}", out.out.join(pano_core::panogeo::MANIFEST_FILE).display());
        }
        Cmd::TrainSource { cfg, data, out } => {
            let cfg = cfg.resolve(&[])?;
            start(&cfg, &out)?;
            let data = load_data(&data)?;
            pipeline::train_source(&cfg, &data, &out.out)?;
            println!("{}", out.out.join("model").display());
        }
        Cmd::InitBank { cfg, data, model, out } => {
            let cfg = cfg.resolve(&[])?;
            start(&cfg, &out)?;
            let model = Trans4Pass::load(&model)?;
            let data = load_data(&data)?;
            let bank = pipeline::init_bank(&cfg, &model, &data, &out.out)?;
            let ready = bank.initialized.iter().filter(|&&b| b).count();
            println!("{ready}/{} prototypes initialized", bank.classes());
        }
        Cmd::Adapt { cfg, data, model, bank, mode, out } => {
            let cfg = cfg.resolve(&[])?;
            let mode = AdaptMode::parse(&mode)?;
            if mode.objective().mpa && bank.is_none() {
                return Err(Error::Config(format!("mode {} needs --bank (run init-bank first)", mode.name())));
            }
            start(&cfg, &out)?;
            let model = Trans4Pass::load(&model)?;
            let bank = bank.map(|b| PrototypeBank::load(&b)).transpose()?;
            let data = load_data(&data)?;
            pipeline::adapt(&cfg, &model, bank.as_ref(), &data, mode, &out.out)?;
            println!("{}", out.out.join("model").display());
        }
        Cmd::Eval { cfg, data, model, out } => {
            let cfg = cfg.resolve(&[])?;
            start(&cfg, &out)?;
            let model = Trans4Pass::load(&model)?;
            let data = load_data(&data)?;
            let report = pipeline::eval(&model, &data, &out.out)?;
            print!("{}", report.render());
        }
        Cmd::Gradcheck { scope, inject_fault } => {
            let scope = Scope::parse(&scope)?;
            let t0 = Instant::now();
            let entries = checks::run(scope, inject_fault)?;
            let mut out = std::io::stdout().lock();
            writeln!(out, "{:<22} {:>6} {:>7} {:>11} {:>7}  result", "check", "shapes", "coords", "max rel err", "secs")?;
            let mut failed = vec![];
            for e in &entries {
                writeln!(
                    out,
                    "{:<22} {:>6} {:>7} {:>11.3e} {:>7.2}  {}",
                    e.name,
                    e.shapes.len(),
                    e.checked,
                    e.max_rel_err,
                    e.seconds,
                    if e.passed { "pass" } else { "FAIL" }
                )?;
                if !e.passed {
                    failed.push(e.name.clone());
                }
            }
            writeln!(out, "{} checks in {:.1}s", entries.len(), t0.elapsed().as_secs_f64())?;
            if !failed.is_empty() {
                return Err(Error::Numerical(format!("gradient check failed: {}", failed.join(", "))));
            }
        }
        Cmd::Describe { cfg, model, height, width } => {
            let cfg = cfg.resolve(&[])?;
            let model = match model {
                Some(dir) => Trans4Pass::load(&dir)?,
                None => Trans4Pass::new(cfg.model.clone(), cfg.seed)?,
            };
            let [ph, pw] = cfg.data.spec.panorama_size();
            let d = model.describe(height.unwrap_or(ph), width.unwrap_or(pw))?;
            println!("input {:?}", d.input);
            println!("{:<6} {:>14} {:>14} {:>10} {:>10}", "stage", "encoder", "decoder", "enc params", "dec params");
            for s in &d.stages {
                println!(
                    "{:<6} {:>14} {:>14} {:>10} {:>10}",
                    s.stage,
                    format!("{:?}", s.encoder_shape),
                    format!("{:?}", s.decoder_shape),
                    s.encoder_params,
                    s.decoder_params
                );
            }
            println!("head params {}", d.head_params);
            println!("total params {}", d.total_params);
            println!("output {:?}", d.output);
        }
        Cmd::Pipeline { cfg, out } => {
            let cfg = cfg.resolve(&[])?;
            let summary = pipeline::run_pipeline(&cfg, &out.out, out.force, &mut std::io::stderr())?;
            println!("{:<8} {:>7} {:>8} {:>7}", "mode", "mIoU", "pinhole", "gap");
            let opt = |v: Option<f64>| v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
            for (name, m) in &summary.modes {
                println!("{:<8} {:>7.2} {:>8} {:>7}", name, m.miou, opt(m.pinhole_miou), opt(m.gap));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// SHA-256 over the manifest and every file it lists, in manifest order.
fn checksum(root: &Path, m: &DatasetManifest) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(m)?);
    for e in m.source.iter().chain(&m.target).chain(&m.test).chain(&m.source_test) {
        for p in std::iter::once(&e.image).chain(e.labels.as_ref()) {
            h.update(fs::read(root.join(p))?);
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
