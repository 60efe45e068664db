use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ltlab::analysis::{self, TheoryParams};
use ltlab::core::data::{group_split, synth_longtail, LabeledDataset, LongTailProfile, Split, SynthParams};
use ltlab::core::model::{Head, Model};
use ltlab::core::ot::{Normalization, SinkhornConfig};
use ltlab::core::train::evaluate;
use ltlab::core::Rng;
use ltlab::{checkpoint, config::ExperimentConfig, fsio, ltds, report, run};

#[derive(Parser)]
#[command(name = "ltlab", version, about = "Long-tailed classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed dataset as an LTDS file.
    SynthData(SynthArgs),
    /// Train a model from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split of an LTDS file.
    Eval(EvalArgs),
    /// Sinkhorn distance between penultimate and final features.
    AnalyzeOt(OtArgs),
    /// Monte-Carlo sub-additivity check of empirical Rademacher complexity.
    CheckTheory(TheoryArgs),
    /// Merge run records into a comparison CSV.
    Report {
        /// Run directories or `run.json` files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write here instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long = "if", default_value_t = 100.0)]
    imbalance_factor: f64,
    #[arg(long, default_value_t = 500)]
    nmax: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    /// Draw the test split with equal class counts.
    #[arg(long)]
    balanced_test: bool,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(clap::Args)]
struct Source {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, default_value_t = ltlab::core::data::DEFAULT_T_MANY)]
    t_many: usize,
    #[arg(long, default_value_t = ltlab::core::data::DEFAULT_T_FEW)]
    t_few: usize,
    /// Leave Many/Medium/Few accuracy out of the report.
    #[arg(long)]
    no_grouping: bool,
    /// Predict from the fused branch alone.
    #[arg(long)]
    no_ensemble: bool,
    /// Directory for `eval.json` and `per_class.csv`.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    JointStandardize,
    None,
}

#[derive(clap::Args)]
struct OtArgs {
    #[command(flatten)]
    source: Source,
    /// Number of leading samples to compare; 0 takes the whole split.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Entropic weight, in the units of the cost. Standardized features give
    /// squared distances near twice the feature width.
    #[arg(long, default_value_t = 0.5)]
    epsilon: f64,
    #[arg(long, default_value_t = 2.0)]
    p: f64,
    #[arg(long, default_value_t = 100_000)]
    max_iters: usize,
    /// Use log-domain updates with epsilon scaling at any epsilon.
    #[arg(long)]
    log_domain: bool,
    #[arg(long, value_enum, default_value = "joint-standardize")]
    normalization: NormArg,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TheoryArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    class: usize,
    #[arg(long, default_value_t = 32)]
    hypotheses: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 10_000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::SynthData(a) => synth_data(a),
        Command::Train { config, output_dir } => train(&config, output_dir),
        Command::Eval(a) => eval(a),
        Command::AnalyzeOt(a) => analyze_ot(a),
        Command::CheckTheory(a) => check_theory(a),
        Command::Report { runs, output } => {
            let csv = report::to_csv(&report::build(&runs)?)?;
            emit(output.as_deref(), &csv)
        }
    }
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let profile = LongTailProfile {
        num_classes: a.classes,
        n_max: a.nmax,
        imbalance_factor: a.imbalance_factor,
    };
    let mut params = SynthParams {
        balanced_test: a.balanced_test,
        ..SynthParams::default()
    };
    if let Some(s) = a.image_size {
        params.image_size = s;
    }
    if let Some(s) = a.separation {
        params.separation = s;
    }
    let set = synth_longtail(&profile, &params, &Rng::new(a.seed))?;
    let path = fsio::resolve_output(&a.output);
    ltds::write_split_set(&set, &path)?;
    log::info!("wrote {} with train counts {:?}", path.display(), set.train.class_counts());
    Ok(())
}

fn train(config: &Path, output_dir: Option<PathBuf>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config).with_context(|| format!("loading config {}", config.display()))?;
    if let Some(d) = output_dir {
        cfg.output_dir = d;
    }
    let (record, paths) = run::run_and_save(&cfg)?;
    let t = &record.test_report;
    log::info!(
        "{}: test ovacc {:.1} macro {:.1} bscore {:.1}, best epoch {}, {:.1}s",
        cfg.name,
        t.ovacc,
        t.macro_acc,
        t.bscore,
        record.best_epoch,
        record.wall_clock_secs
    );
    println!("{}", paths.record.display());
    Ok(())
}

fn load_source(s: &Source) -> Result<(Model, LabeledDataset, Vec<usize>)> {
    let model = checkpoint::load(&s.checkpoint)?;
    let splits = ltds::read_dataset(&s.data)?;
    let want = Split::from(s.split);
    let train_counts = splits.iter().find(|d| d.split == Split::Train).map(|d| d.class_counts());
    let Some(ds) = splits.into_iter().find(|d| d.split == want) else {
        bail!("{} has no {} split", s.data.display(), want.as_str());
    };
    if ds.num_classes != model.num_classes {
        bail!(
            "checkpoint has {} classes, {} has {}",
            model.num_classes,
            s.data.display(),
            ds.num_classes
        );
    }
    let [h, w, c] = ds.image_shape();
    let vit = &model.config.vit;
    if h != vit.image_size || w != vit.image_size || c != vit.channels {
        bail!("images are {h}x{w}x{c}, checkpoint expects {0}x{0}x{1}", vit.image_size, vit.channels);
    }
    let counts = train_counts.unwrap_or_else(|| ds.class_counts());
    Ok((model, ds, counts))
}

fn eval(a: EvalArgs) -> Result<()> {
    let (mut model, ds, counts) = load_source(&a.source)?;
    if a.no_ensemble {
        match &mut model.head {
            Head::Scilt(h) => h.config.ensemble = false,
            Head::Single { .. } => bail!("--no-ensemble needs a dual-head checkpoint"),
        }
    }
    let grouping = if a.no_grouping {
        None
    } else {
        Some(group_split(&counts, a.t_many, a.t_few)?)
    };
    let report = evaluate(&model, &ds, grouping.as_ref())?;
    let dir = fsio::resolve_output(&a.output);
    fsio::write_json(&dir.join("eval.json"), &report)?;
    run::write_per_class_csv(&dir.join("per_class.csv"), &report, &counts)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn analyze_ot(a: OtArgs) -> Result<()> {
    let (model, ds, _) = load_source(&a.source)?;
    let cfg = SinkhornConfig {
        epsilon: a.epsilon,
        p: a.p,
        max_iters: a.max_iters,
        log_domain: a.log_domain,
        ..SinkhornConfig::default()
    };
    let norm = match a.normalization {
        NormArg::JointStandardize => Normalization::JointStandardize,
        NormArg::None => Normalization::None,
    };
    let images = analysis::head_images(&ds, a.samples);
    let report = analysis::analyze_ot(&model, &images, &cfg, norm)?;
    emit(a.output.as_deref(), &json_line(&report)?)
}

fn check_theory(a: TheoryArgs) -> Result<()> {
    let (model, ds, _) = load_source(&a.source)?;
    let params = TheoryParams {
        class: a.class,
        hypotheses: a.hypotheses,
        noise: a.noise,
        draws: a.draws,
        seed: a.seed,
    };
    let images = analysis::head_images(&ds, a.samples);
    let report = analysis::check_theory(&model, &images, params)?;
    emit(a.output.as_deref(), &json_line(&report)?)
}

fn json_line<T: serde::Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => Ok(fsio::atomic_write(&fsio::resolve_output(p), bytes)?),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}
