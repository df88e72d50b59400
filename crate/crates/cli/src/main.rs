use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use spader::config::ExperimentConfig;
use spader::dataset::store::{read_dataset, write_dataset};
use spader::dataset::{SplitConfig, Splits};
use spader::evaluation::{summaries_csv, summaries_table, summarize};
use spader::imageops::encode_pgm;
use spader::pipeline::{
    auroc_by_strategy, generate_data, known_digit, parse_scores_csv, score_images, scores_csv,
    train_regressor_stage, train_vae_stage,
};
use spader::regressor::RegressorParams;
use spader::scoring::{explain, IdentityReconstructor, Models, Reconstructor, Strategy};
use spader::vae::VaeParams;
use spader::weights::{load_regressor, load_vae, save_regressor, save_vae};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const VAE_FILE: &str = "vae.w";
const REG_FILE: &str = "reg.w";

/// Noisy-digit anomaly detection experiments: VAE reconstruction loss
/// weighted by Grad-CAM, combined with a normalness regressor.
#[derive(Parser)]
#[command(name = "spader", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Overrides the `seed` key of the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Line-oriented key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                ExperimentConfig::parse(&text).with_context(|| format!("in {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the benchmark dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data_dir: PathBuf,
    },
    /// Train the VAE and the regressor.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        weights_dir: PathBuf,
    },
    /// Score the test split; writes one row per image and strategy.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        weights_dir: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated strategies; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<Strategy>>,
    },
    /// Summarise AUROC over one or more scores files, one per trial.
    Eval {
        #[arg(required = true)]
        scores: Vec<PathBuf>,
        /// Directory receiving summary.csv and summary.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write PGM heatmaps of the weighted loss for one test image.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        weights_dir: PathBuf,
        #[arg(long)]
        image_id: u64,
        #[arg(long)]
        out: PathBuf,
        /// Use the input as its own reconstruction.
        #[arg(long, hide = true)]
        identity_reconstruction: bool,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { common, data_dir } => gen_data(&common.load()?, &data_dir),
        Command::Train {
            common,
            data_dir,
            weights_dir,
        } => train(&common.load()?, &data_dir, &weights_dir),
        Command::Score {
            common,
            data_dir,
            weights_dir,
            out,
            strategies,
        } => {
            let cfg = common.load()?;
            let strategies = strategies.unwrap_or_else(|| cfg.strategies.clone());
            score(&cfg, &data_dir, &weights_dir, &out, &strategies)
        }
        Command::Eval { scores, out } => eval(&scores, &out),
        Command::Visualize {
            common,
            data_dir,
            weights_dir,
            image_id,
            out,
            identity_reconstruction,
        } => visualize(
            &common.load()?,
            &data_dir,
            &weights_dir,
            image_id,
            &out,
            identity_reconstruction,
        ),
    }
}

fn gen_data(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let splits = generate_data(cfg)?;
    write_dataset(dir, &splits, &cfg.split)?;
    eprintln!(
        "wrote {} images to {} ({} vae / {} regressor / {} test)",
        splits.train_vae.len() + splits.train_reg.len() + splits.test.len(),
        dir.display(),
        splits.train_vae.len(),
        splits.train_reg.len(),
        splits.test.len()
    );
    Ok(())
}

fn load_data(dir: &Path) -> Result<(SplitConfig, Splits)> {
    let (meta, splits) = read_dataset(dir).with_context(|| format!("loading dataset from {}", dir.display()))?;
    Ok((meta.split, splits))
}

fn role_counts(samples: &[spader::dataset::ImageSample]) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in samples {
        *counts.entry(s.role.as_str()).or_default() += 1;
    }
    counts.iter().map(|(r, n)| format!("{r}={n}")).collect::<Vec<_>>().join(" ")
}

fn history_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (i, l) in history.iter().enumerate() {
        writeln!(out, "{},{l:?}", i + 1).expect("string write");
    }
    out
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn train(cfg: &ExperimentConfig, data_dir: &Path, weights_dir: &Path) -> Result<()> {
    let (_, splits) = load_data(data_dir)?;
    let vae = train_vae_stage(cfg, &splits, |e, l| eprintln!("vae epoch {} loss {l:.4}", e + 1))?;
    let reg = train_regressor_stage(cfg, &splits, |e, l| eprintln!("regressor epoch {} loss {l:.5}", e + 1))?;
    let log = format!(
        "vae_train_images={} roles: {}\nregressor_train_images={} roles: {}\nregressor_loss={}\n",
        splits.train_vae.len(),
        role_counts(&splits.train_vae),
        splits.train_reg.len(),
        role_counts(&splits.train_reg),
        cfg.reg_loss,
    );
    fs::create_dir_all(weights_dir).with_context(|| format!("creating {}", weights_dir.display()))?;
    save_vae(&weights_dir.join(VAE_FILE), &vae.params)?;
    save_regressor(&weights_dir.join(REG_FILE), &reg.params)?;
    write(&weights_dir.join("vae_loss.csv"), history_csv(&vae.loss_history))?;
    write(&weights_dir.join("reg_loss.csv"), history_csv(&reg.loss_history))?;
    write(&weights_dir.join("train.log"), log)?;
    Ok(())
}

struct Loaded {
    vae: Option<VaeParams>,
    reg: Option<RegressorParams>,
}

fn load_models(weights_dir: &Path, need_vae: bool, need_reg: bool) -> Result<Loaded> {
    let vae = need_vae
        .then(|| load_vae(&weights_dir.join(VAE_FILE)))
        .transpose()
        .context("loading VAE weights")?;
    let reg = need_reg
        .then(|| load_regressor(&weights_dir.join(REG_FILE)))
        .transpose()
        .context("loading regressor weights")?;
    Ok(Loaded { vae, reg })
}

fn score(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    weights_dir: &Path,
    out: &Path,
    strategies: &[Strategy],
) -> Result<()> {
    if strategies.is_empty() {
        bail!("no strategies requested");
    }
    let loaded = load_models(
        weights_dir,
        strategies.iter().any(|s| s.uses_vae()),
        strategies.iter().any(|s| s.uses_regressor()),
    )?;
    let (_, splits) = load_data(data_dir)?;
    let models = Models {
        vae: loaded.vae.as_ref().map(|v| v as &dyn Reconstructor),
        regressor: loaded.reg.as_ref(),
    };
    let rows = score_images(&splits.test, strategies, &models, cfg)?;
    write(out, scores_csv(&rows))?;
    eprintln!("wrote {} scores to {}", rows.len(), out.display());
    Ok(())
}

fn eval(files: &[PathBuf], out: &Path) -> Result<()> {
    // (strategy, known digit) -> per-trial AUROC
    let mut trials: BTreeMap<(Strategy, u8), Vec<f64>> = BTreeMap::new();
    for path in files {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let rows = parse_scores_csv(&text).with_context(|| format!("parsing {}", path.display()))?;
        let digit = known_digit(&rows).with_context(|| format!("{} has no known-anomaly rows", path.display()))?;
        for (strategy, auc) in auroc_by_strategy(&rows).with_context(|| format!("evaluating {}", path.display()))? {
            trials.entry((strategy, digit)).or_default().push(auc);
        }
    }
    let summaries = trials
        .iter()
        .map(|(&(s, d), t)| summarize(s, d, t))
        .collect::<spader::Result<Vec<_>>>()?;
    let table = summaries_table(&summaries);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("summary.csv"), summaries_csv(&summaries))?;
    write(&out.join("summary.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn visualize(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    weights_dir: &Path,
    image_id: u64,
    out: &Path,
    identity: bool,
) -> Result<()> {
    let (_, splits) = load_data(data_dir)?;
    let sample = splits
        .train_vae
        .iter()
        .chain(&splits.train_reg)
        .chain(&splits.test)
        .find(|s| s.id == image_id)
        .with_context(|| format!("unknown image id {image_id}"))?;
    let loaded = load_models(weights_dir, !identity, true)?;
    let recon: &dyn Reconstructor = match &loaded.vae {
        Some(v) => v,
        None => &IdentityReconstructor,
    };
    let models = Models {
        vae: Some(recon),
        regressor: loaded.reg.as_ref(),
    };
    let ex = explain(&sample.pixels, sample.id, &models, &cfg.scoring())?;
    let maps = [
        ("input", &ex.input),
        ("reconstruction", &ex.reconstruction),
        ("loss", &ex.loss),
        ("cam", &ex.cam),
        ("weighted_loss", &ex.weighted_loss),
    ];
    let (h, w) = (ex.loss.shape()[0], ex.loss.shape()[1]);
    let mut sidecar = String::from("row,col");
    for (name, _) in &maps {
        write!(sidecar, ",{name}").expect("string write");
    }
    sidecar.push('\n');
    for i in 0..h * w {
        write!(sidecar, "{},{}", i / w, i % w).expect("string write");
        for (_, t) in &maps {
            write!(sidecar, ",{:?}", t.data()[i]).expect("string write");
        }
        sidecar.push('\n');
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, t) in &maps {
        write(&out.join(format!("{name}.pgm")), encode_pgm(t.data(), w, h))?;
    }
    write(&out.join("maps.csv"), sidecar)?;
    eprintln!(
        "image {image_id} (digit {}, {}): wrote heatmaps to {}",
        sample.digit,
        sample.role,
        out.display()
    );
    Ok(())
}
