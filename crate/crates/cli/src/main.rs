//! `dam`: generate synthetic datasets, train appearance models, evaluate held-out views and
//! run ablation sweeps.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dam_core::eval::{evaluate, mean_metrics, metrics_csv, ViewEval, ViewMetrics};
use dam_core::synth::{dataset_hash, generate_dataset, Dataset, SceneSpec, VariationConfig};
use dam_core::train::{load_checkpoint, loss_log_csv, save_checkpoint, LossRecord, Trainer, LOSS_CSV_HEADER};
use dam_core::{AppearanceModel, EncodingKind};

use config::{RunConfig, RESOLVED_NAME};

const CHECKPOINT_NAME: &str = "checkpoint.bin";

#[derive(Parser)]
#[command(name = "dam", version, about = "Decoupled appearance modeling on fixed renders")]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-view dataset with injected appearance variation.
    Generate(GenerateArgs),
    /// Optimize an appearance model on a dataset's training views.
    Train(TrainArgs),
    /// Fit held-out embeddings on left halves and score right halves.
    Eval(EvalArgs),
    /// Train and evaluate encoding, regularizer and cell-size variants.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariationKind {
    None,
    Global,
    Local,
    GlobalLocal,
}

#[derive(Args)]
struct Common {
    /// TOML or JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    train_views: Option<usize>,
    #[arg(long)]
    test_views: Option<usize>,
    #[arg(long, value_enum)]
    variation: Option<VariationKind>,
}

#[derive(Args)]
struct ModelOverrides {
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    cell_size: Option<usize>,
    /// xyz, uv, depth, uv_depth or color.
    #[arg(long)]
    encoding: Option<EncodingKind>,
    /// Train without the identity regularizer.
    #[arg(long)]
    no_lid: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    overrides: ModelOverrides,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint; optimizer moments restart.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training output directory holding the checkpoint and resolved config.
    #[arg(long, required_unless_present = "no_appearance")]
    run: Option<PathBuf>,
    /// Score the raw renders; no model is loaded.
    #[arg(long)]
    no_appearance: bool,
    /// Overrides the configured number of embedding fitting steps.
    #[arg(long)]
    fit_iters: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    /// Vary one factor at a time around the configured model instead of the full
    /// encoding x regularizer x cell-size product.
    #[arg(long)]
    one_factor: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build()
        .context("building thread pool")
        .and_then(|pool| pool.install(|| run(cli.command)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.common.config.as_deref())?;
    let d = &mut cfg.dataset;
    if let Some(s) = a.common.seed {
        d.seed = s;
    }
    d.width = a.width.unwrap_or(d.width);
    d.height = a.height.unwrap_or(d.height);
    d.n_train = a.train_views.unwrap_or(d.n_train);
    d.n_test = a.test_views.unwrap_or(d.n_test);
    if let Some(v) = a.variation {
        let lights = if matches!(v, VariationKind::Local | VariationKind::GlobalLocal) {
            vec![VariationConfig::street_lamp()]
        } else {
            Vec::new()
        };
        d.variation.global = matches!(v, VariationKind::Global | VariationKind::GlobalLocal);
        d.variation.local_lights = lights;
    }
    let cfg = cfg.finalize()?;
    let ds = generate_dataset(&SceneSpec::default_scene(cfg.dataset.seed), &cfg.dataset)?;
    create_dir(&a.out)?;
    cfg.write_resolved(&a.out)?;
    ds.save(&a.out)?;
    println!("wrote {} views to {} (sha256 {})", ds.train.len() + ds.test.len(), a.out.display(), dataset_hash(&a.out)?);
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn apply_overrides(cfg: &mut RunConfig, seed: Option<u64>, o: &ModelOverrides) {
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(n) = o.iters {
        cfg.train = cfg.train.clone().with_iters(n);
    }
    if let Some(c) = o.cell_size {
        cfg.train.cell_size = c;
    }
    if let Some(k) = o.encoding {
        cfg.model.encoding.kind = k;
    }
    if o.no_lid {
        cfg.train.loss.identity_regularizer = false;
    }
}

/// Trains from scratch or from `resume`; returns the model and the records of this call.
fn train_model(cfg: &RunConfig, ds: &Dataset, resume: Option<&Path>) -> Result<(AppearanceModel, Vec<LossRecord>, usize)> {
    let (model, start) = match resume {
        None => (cfg.new_model(ds)?, 0),
        Some(p) => {
            let ck = load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            if ck.model.config() != &cfg.model {
                bail!("checkpoint {} was trained with a different model config", p.display());
            }
            (ck.model, ck.iteration)
        }
    };
    let mut t = Trainer::new(model, &ds.train, cfg.train.clone(), start)?;
    t.run(&ds.train)?;
    Ok(t.into_parts())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let mut cfg = RunConfig::load_or_default(a.common.config.as_deref())?;
    apply_overrides(&mut cfg, a.common.seed, &a.overrides);
    cfg.adapt_to(&ds);
    let cfg = cfg.finalize()?;
    create_dir(&a.out)?;
    let (model, log, iteration) = train_model(&cfg, &ds, a.resume.as_deref())?;
    let mut csv = loss_log_csv(&log);
    if a.resume.is_some() {
        // keep earlier rows of a log in the same output directory
        let first = log.first().map_or(iteration, |r| r.iter);
        if let Ok(old) = fs::read_to_string(a.out.join("losses.csv")) {
            let mut merged = String::from(LOSS_CSV_HEADER);
            merged.push('\n');
            for line in old.lines().skip(1) {
                if line.split(',').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|i| i < first) {
                    merged.push_str(line);
                    merged.push('\n');
                }
            }
            merged.push_str(csv.split_once('\n').map_or("", |(_, rest)| rest));
            csv = merged;
        }
    }
    cfg.write_resolved(&a.out)?;
    write(a.out.join("losses.csv"), csv)?;
    save_checkpoint(&model, iteration, a.out.join(CHECKPOINT_NAME))?;
    if let Some(r) = log.last() {
        println!("trained to iteration {iteration}; last loss {:.6}", r.total);
    }
    Ok(())
}

fn write_eval(out: &Path, ds: &Dataset, evals: &[ViewEval]) -> Result<Vec<ViewMetrics>> {
    create_dir(out)?;
    let mut fit = String::from("view_id,step,loss\n");
    for (e, f) in evals.iter().zip(&ds.test) {
        let stem = format!("view_{:03}", e.metrics.view_id);
        e.output.write_pfm(out.join(format!("{stem}_output.pfm")))?;
        e.output.write_png(out.join(format!("{stem}_output.png")))?;
        f.rendered.write_png(out.join(format!("{stem}_raw.png")))?;
        for (k, l) in e.fit_losses.iter().enumerate() {
            writeln!(fit, "{},{k},{l:.6}", e.metrics.view_id)?;
        }
    }
    let metrics: Vec<ViewMetrics> = evals.iter().map(|e| e.metrics).collect();
    write(out.join("metrics.csv"), metrics_csv(&metrics))?;
    write(out.join("fit_losses.csv"), fit)?;
    Ok(metrics)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let (cfg, model) = if a.no_appearance {
        (RunConfig::default(), None)
    } else {
        let run = a.run.as_deref().context("--run is required unless --no-appearance is given")?;
        let cfg = RunConfig::load(&run.join(RESOLVED_NAME))?;
        let ck = load_checkpoint(run.join(CHECKPOINT_NAME)).context("loading checkpoint")?;
        (cfg, Some(ck.model))
    };
    let mut tc = cfg.train;
    if let Some(n) = a.fit_iters {
        tc.fit.iters = n;
    }
    let evals = evaluate(model.as_ref(), &ds.test, &tc)?;
    let metrics = write_eval(&a.out, &ds, &evals)?;
    if let Some(m) = mean_metrics(&metrics) {
        println!("mean over {} views: psnr {:.3} ssim {:.4} psnr_cc {:.3} ssim_cc {:.4}", metrics.len(), m[0], m[1], m[2], m[3]);
    }
    Ok(())
}

struct Variant {
    name: String,
    encoding: EncodingKind,
    cell_size: usize,
    lid: bool,
}

fn variants(base: &RunConfig, one_factor: bool) -> Vec<Variant> {
    let (enc, cell) = (base.model.encoding.kind, base.train.cell_size);
    let v = |name: String, encoding, cell_size, lid| Variant { name, encoding, cell_size, lid };
    if !one_factor {
        let mut out = Vec::new();
        for e in EncodingKind::ALL {
            for c in [1, 2, 4, 8, 16, 32] {
                for lid in [true, false] {
                    out.push(v(format!("{e}_c{c}{}", if lid { "" } else { "_no_lid" }), e, c, lid));
                }
            }
        }
        return out;
    }
    let mut out = vec![v("full".into(), enc, cell, true)];
    out.extend(EncodingKind::ALL.into_iter().filter(|e| *e != enc).map(|e| v(format!("enc_{e}"), e, cell, true)));
    out.push(v("no_lid".into(), enc, cell, false));
    out.extend([1, 2, 4, 8, 16, 32].into_iter().filter(|c| *c != cell).map(|c| v(format!("cell_{c}"), enc, c, true)));
    out
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let mut base = RunConfig::load_or_default(a.common.config.as_deref())?;
    let o = ModelOverrides { iters: a.iters, cell_size: None, encoding: None, no_lid: false };
    apply_overrides(&mut base, a.common.seed, &o);
    base.adapt_to(&ds);
    let base = base.finalize()?;
    create_dir(&a.out)?;
    base.write_resolved(&a.out)?;
    let mut table = String::from("variant,encoding,cell_size,identity_regularizer,psnr,ssim,psnr_cc,ssim_cc\n");
    let raw = evaluate(None, &ds.test, &base.train)?;
    let m = mean_metrics(&raw.iter().map(|e| e.metrics).collect::<Vec<_>>()).context("no test views")?;
    writeln!(table, "no_appearance,,,,{:.4},{:.4},{:.4},{:.4}", m[0], m[1], m[2], m[3])?;
    for v in variants(&base, a.one_factor) {
        let mut cfg = base.clone();
        cfg.model.encoding.kind = v.encoding;
        cfg.train.cell_size = v.cell_size;
        cfg.train.loss.identity_regularizer = v.lid;
        let (model, log, iteration) = train_model(&cfg, &ds, None)?;
        let dir = a.out.join(&v.name);
        let evals = evaluate(Some(&model), &ds.test, &cfg.train)?;
        let metrics = write_eval(&dir, &ds, &evals)?;
        cfg.write_resolved(&dir)?;
        write(dir.join("losses.csv"), loss_log_csv(&log))?;
        save_checkpoint(&model, iteration, dir.join(CHECKPOINT_NAME))?;
        let m = mean_metrics(&metrics).context("no test views")?;
        writeln!(table, "{},{},{},{},{:.4},{:.4},{:.4},{:.4}", v.name, v.encoding, v.cell_size, v.lid, m[0], m[1], m[2], m[3])?;
        println!("{:<12} psnr {:.3} psnr_cc {:.3}", v.name, m[0], m[2]);
    }
    write(a.out.join("ablation.csv"), table)
}
