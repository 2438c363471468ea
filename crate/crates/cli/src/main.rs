use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use visa_core::ablation::{ablation_csv, ablation_table, run_ablation, AblationSpec};
use visa_core::data::dataset::{generate_dataset, Dataset, DatasetInfo};
use visa_core::data::patch::{encode_grid, read_patch, write_mask, LabelMask};
use visa_core::data::split::{Partition, Protocol, SplitRatios};
use visa_core::eval::evaluate_protocol;
use visa_core::gradcheck::{micro_gradcheck, micro_options};
use visa_core::metrics::metrics_csv;
use visa_core::run::{train, RunConfig, TrainedModel};

#[derive(Parser)]
#[command(
    name = "visa",
    version,
    about = "Crop/weed segmentation of five-band multispectral imagery"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a dataset with split manifests.
    Generate(GenerateArgs),
    /// Train on one protocol's training split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a protocol's test blocks.
    Eval(EvalArgs),
    /// Train and evaluate single-factor model variants.
    Ablate(AblateArgs),
    /// Label one image with sliding-window inference.
    Infer(InferArgs),
    /// Finite-difference check of the micro model's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 2026)]
    seed: u64,
    /// Write only this protocol's manifest (all three by default).
    #[arg(long)]
    protocol: Option<Protocol>,
    #[arg(long)]
    out: PathBuf,
    /// Blocks per field-year.
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    /// Patch extent; tiles are twice as large.
    #[arg(long, default_value_t = 64)]
    patch: usize,
    /// Replace an existing dataset in `--out`.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 64 x 64 patches, small widths, 10 epochs.
    Micro,
    /// Full widths and the 50-epoch schedule.
    Full,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; keys it sets take precedence over flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "micro")]
    preset: Preset,
    #[arg(long)]
    protocol: Option<Protocol>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory or checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Defaults to the protocol the checkpoint was trained on.
    #[arg(long)]
    protocol: Option<Protocol>,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    replicates: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// TOML file of [[variant]] tables.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Patch or block image (.bawp).
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates checked per parameter.
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match a.preset {
        Preset::Micro => RunConfig::micro(),
        Preset::Full => RunConfig::default(),
    };
    if let Some(p) = a.protocol {
        cfg.protocol = p.to_string();
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(path) = &a.config {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: toml::Value =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let mut v = toml::Value::try_from(&cfg)?;
        merge(&mut v, file);
        cfg = RunConfig::from_toml(&toml::to_string(&v)?)
            .with_context(|| format!("in {}", path.display()))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

const DATASET_ENTRIES: [&str; 5] = [
    "dataset.toml",
    "inventory.txt",
    "patches",
    "masks",
    "splits",
];

fn generate(a: &GenerateArgs) -> Result<()> {
    if a.out.exists() {
        let non_empty = fs::read_dir(&a.out)?.next().is_some();
        if non_empty && !a.force {
            bail!(
                "{} is not empty; pass --force to replace the dataset there",
                a.out.display()
            );
        }
        for e in DATASET_ENTRIES {
            let p = a.out.join(e);
            if p.is_dir() {
                fs::remove_dir_all(&p)?;
            } else if p.exists() {
                fs::remove_file(&p)?;
            }
        }
    }
    let info = DatasetInfo {
        seed: a.seed,
        patch_size: a.patch,
        blocks_per_field_year: a.blocks,
    };
    let samples = generate_dataset(&info)?;
    let protocols: Vec<Protocol> = a
        .protocol
        .map(|p| vec![p])
        .unwrap_or_else(|| Protocol::ALL.to_vec());
    let ds = Dataset::write(&a.out, &info, &samples, &protocols, SplitRatios::default())?;
    println!(
        "{} blocks ({} per field-year), {} patches of {}x{} in {}",
        ds.blocks.len(),
        a.blocks,
        samples.len(),
        a.patch,
        a.patch,
        a.out.display()
    );
    for p in protocols {
        let m = ds.manifest(p)?;
        let n = |part| m.blocks(part).len();
        println!(
            "{p:<12} train {:>3}  val {:>3}  test {:>3}  manifest {}",
            n(Partition::Train),
            n(Partition::Val),
            n(Partition::Test),
            &m.content_hash()[..16]
        );
    }
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = run_config(&a.run)?;
    let ds = Dataset::open(&a.data)?;
    let (m, report) = train(&cfg, &ds, &a.out)?;
    println!(
        "best epoch {} with validation mIoU {:.4}; {} parameters; run directory {}",
        report.best_epoch,
        report.best_val_miou,
        m.parameter_count(),
        report.run_dir.display()
    );
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let mut m = TrainedModel::load(&a.checkpoint)?;
    let ds = Dataset::open(&a.data)?;
    let protocol = match a.protocol {
        Some(p) => p,
        None => m.run.protocol()?,
    };
    let manifest = ds.manifest(protocol)?;
    let replicates = a.replicates.unwrap_or(m.run.eval.replicates);
    let seed = m.run.eval.bootstrap_seed;
    let ev = evaluate_protocol(&mut m, &ds, &manifest, replicates, seed)?;
    if let Some(r) = ev.rows.iter().find(|r| !r.metrics.miou.is_finite()) {
        bail!("stratum {} {} produced a non-finite mIoU", r.year, r.field);
    }
    let csv = metrics_csv(&ev.rows);
    match &a.out {
        Some(p) => {
            fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?;
            let all = ev.pooled();
            println!(
                "{protocol}: mIoU {:.4} over {} blocks; metrics written to {}",
                all.metrics.miou,
                ev.blocks.len(),
                p.display()
            );
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    let cfg = run_config(&a.run)?;
    let text =
        fs::read_to_string(&a.spec).with_context(|| format!("reading {}", a.spec.display()))?;
    let spec = AblationSpec::from_toml(&text)?;
    let ds = Dataset::open(&a.data)?;
    let rows = run_ablation(&cfg, &spec, &ds, &a.out)?;
    fs::write(a.out.join("ablation.csv"), ablation_csv(&rows))?;
    print!("{}", ablation_table(&rows));
    Ok(())
}

fn infer_cmd(a: &InferArgs) -> Result<()> {
    let m = TrainedModel::load(&a.checkpoint)?;
    let image = read_patch(&a.image)?;
    let out = m.infer(&image)?;
    fs::create_dir_all(&a.out)?;
    let mask = LabelMask::new(out.height, out.width, out.labels.clone())?;
    write_mask(&a.out.join("mask.bawm"), &mask)?;
    let grid = a.out.join("confidence.bawg");
    fs::write(&grid, encode_grid(out.height, out.width, &out.confidence))?;
    let h = mask.histogram();
    println!(
        "{}x{} pixels: other {}, crop {}, weed {}{}; outputs in {}",
        out.height,
        out.width,
        h[0],
        h[1],
        h[2],
        if out.padded {
            " (reflect-padded window)"
        } else {
            ""
        },
        a.out.display()
    );
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<()> {
    let start = std::time::Instant::now();
    let opts = visa_tensor::GradCheckOptions {
        samples_per_param: a.samples,
        ..micro_options(a.seed)
    };
    let report = micro_gradcheck(a.seed, opts)?;
    let mut worst = report.params.clone();
    worst.sort_by(|x, y| y.max_rel_err.total_cmp(&x.max_rel_err));
    for p in worst.iter().take(5) {
        println!(
            "{:<40} rel {:.3e}  abs {:.3e}  |g|max {:.3e}",
            p.name, p.max_rel_err, p.max_abs_err, p.max_grad
        );
    }
    let max = report.max_rel_err();
    println!(
        "{} parameters, {} coordinates, max relative error {max:.3e} (tolerance {:.0e}) in {:.1?}",
        report.params.len(),
        report.coordinates(),
        a.tolerance,
        start.elapsed()
    );
    if !(max < a.tolerance) {
        bail!("gradient check failed: {max:.3e} >= {:.0e}", a.tolerance);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Generate(a) => generate(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::Ablate(a) => ablate_cmd(a),
        Cmd::Infer(a) => infer_cmd(a),
        Cmd::Gradcheck(a) => gradcheck_cmd(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
