//! Command-line driver: dataset synthesis, experiment protocols, single-cell
//! training, checkpoint evaluation, and report rendering.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use echodepth::experiments::{
    comparison_csv, emit_report, parse_comparison_csv, parse_sweep_csv, run_cell, run_comparison,
    run_sweep, sweep_csv, ExperimentConfig,
};
use echodepth::persistence::{
    build_dataset, dataset_root, load_manifest, save_checkpoint, DatasetManifest,
};
use echodepth::persistence::load_checkpoint;
use echodepth::training::{evaluate, TrainMode};

#[derive(Parser)]
#[command(
    name = "echodepth",
    version,
    about = "Depth from band-limited echoes: simulate rooms, train models, compare bands"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build (or verify) the dataset described by the config.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Working directory; the dataset lands under <out>/datasets/<id>.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the cutoff sweep: one band-limited-only training per (cutoff, seed).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the seed list from the config (comma-separated).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Run the full protocol: the sweep plus the three-system comparison.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Train one (mode, cutoff, seed) cell; store checkpoint and loss trace.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// ultrasonic_only, augmented_only, or proposed.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        cutoff: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a stored checkpoint on one dataset split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cutoff: u32,
        /// train or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Where to write the per-scene CSV (default <out>/results/eval.csv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Render summary CSVs and a text digest from stored per-cell results.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth { config, out } => cmd_synth(&config, &out),
        Command::Sweep { config, out, seeds } => cmd_protocol(&config, &out, seeds, false),
        Command::Compare { config, out, seeds } => cmd_protocol(&config, &out, seeds, true),
        Command::Train {
            config,
            out,
            mode,
            cutoff,
            seed,
        } => cmd_train(&config, &out, &mode, cutoff, seed),
        Command::Eval {
            config,
            out,
            checkpoint,
            cutoff,
            split,
            output,
        } => cmd_eval(&config, &out, &checkpoint, cutoff, &split, output),
        Command::Report { out } => cmd_report(&out),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path)
        .with_context(|| format!("loading protocol config {}", path.display()))
}

fn dataset_dir(out: &Path, config: &ExperimentConfig) -> Result<PathBuf> {
    Ok(dataset_root(&out.join("datasets"), &config.dataset)?)
}

fn open_dataset(out: &Path, config: &ExperimentConfig) -> Result<(PathBuf, DatasetManifest)> {
    let root = dataset_dir(out, config)?;
    if !root.join("manifest.json").exists() {
        bail!(
            "no dataset at {} — run `echodepth synth` with this config first",
            root.display()
        );
    }
    let manifest = load_manifest(&root)?;
    if manifest.dataset_id != config.dataset.dataset_id()? {
        bail!(
            "dataset at {} was built from a different config",
            root.display()
        );
    }
    Ok((root, manifest))
}

fn results_dir(out: &Path) -> Result<PathBuf> {
    let dir = out.join("results");
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn cmd_synth(config_path: &Path, out: &Path) -> Result<()> {
    let config = load_config(config_path)?;
    let root = dataset_dir(out, &config)?;
    let started = Instant::now();
    if root.join("manifest.json").exists() {
        let manifest = load_manifest(&root)?;
        if manifest.dataset_id != config.dataset.dataset_id()? {
            bail!(
                "{} holds a dataset built from a different config",
                root.display()
            );
        }
        manifest.verify(&root)?;
        println!(
            "dataset {} already present and verified ({} scenes, {:.1}s)",
            manifest.dataset_id,
            manifest.scenes.len(),
            started.elapsed().as_secs_f64()
        );
        return Ok(());
    }
    std::fs::create_dir_all(&root)?;
    let manifest = build_dataset(&root, &config.dataset)?;
    println!(
        "built dataset {} at {} ({} scenes x {} bands, {:.1}s)",
        manifest.dataset_id,
        root.display(),
        manifest.scenes.len(),
        config.dataset.cutoffs_hz.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_protocol(
    config_path: &Path,
    out: &Path,
    seeds: Option<Vec<u64>>,
    with_comparison: bool,
) -> Result<()> {
    let mut config = load_config(config_path)?;
    if let Some(seeds) = seeds {
        if seeds.is_empty() {
            bail!("--seeds must list at least one seed");
        }
        config.sweep.seeds = seeds.clone();
        config.comparison.seeds = seeds;
    }
    let (root, manifest) = open_dataset(out, &config)?;
    let results = results_dir(out)?;
    let started = Instant::now();

    let spec = config.sweep_spec(root.clone())?;
    let total = spec.cutoffs_hz.len() * spec.seeds.len();
    let mut done = 0usize;
    let sweep_table = run_sweep(&root, &manifest, &spec, |row| {
        done += 1;
        println!(
            "[sweep {done}/{total}] cutoff {} seed {}: test rmse {:.4} ({:.0}s)",
            row.cutoff_hz,
            row.seed,
            row.rmse,
            started.elapsed().as_secs_f64()
        );
    })?;
    std::fs::write(results.join("sweep.csv"), sweep_csv(&sweep_table))?;

    let comparison_table = if with_comparison {
        let spec = config.comparison_spec(root.clone())?;
        let total = spec.ultrasonic_cutoffs_hz.len() * spec.modes.len() * spec.seeds.len();
        let mut done = 0usize;
        let table = run_comparison(&root, &manifest, &spec, |row| {
            done += 1;
            println!(
                "[compare {done}/{total}] cutoff {} {} seed {}: test rmse {:.4} ({:.0}s)",
                row.cutoff_hz,
                row.mode.label(),
                row.seed,
                row.rmse,
                started.elapsed().as_secs_f64()
            );
        })?;
        std::fs::write(results.join("comparison.csv"), comparison_csv(&table))?;
        Some(table)
    } else {
        None
    };

    let written = emit_report(Some(&sweep_table), comparison_table.as_ref(), &results)?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_train(config_path: &Path, out: &Path, mode: &str, cutoff: u32, seed: u64) -> Result<()> {
    let config = load_config(config_path)?;
    let mode = TrainMode::from_label(mode)?;
    let (root, manifest) = open_dataset(out, &config)?;
    let started = Instant::now();
    let (outcome, test_rmse) = run_cell(&root, &manifest, mode, cutoff, seed, &config.train)?;

    let cell = format!("{}_{}_s{}", mode.label(), cutoff, seed);
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let ckpt = ckpt_dir.join(format!("{cell}.ckpt"));
    save_checkpoint(&ckpt, &outcome.network)?;

    let trace_dir = out.join("traces");
    std::fs::create_dir_all(&trace_dir)?;
    let mut trace = String::from("epoch,mean_loss\n");
    for (epoch, loss) in outcome.trace.iter().enumerate() {
        trace.push_str(&format!("{epoch},{loss}\n"));
    }
    let trace_path = trace_dir.join(format!("{cell}.csv"));
    std::fs::write(&trace_path, trace)?;

    println!(
        "cell {cell}: train rmse {:.4} -> {:.4} over {} steps, test rmse {:.4} ({:.0}s)",
        outcome.initial_rmse,
        outcome.final_rmse,
        outcome.steps,
        test_rmse,
        started.elapsed().as_secs_f64()
    );
    println!("wrote {}", ckpt.display());
    println!("wrote {}", trace_path.display());
    Ok(())
}

fn cmd_eval(
    config_path: &Path,
    out: &Path,
    checkpoint: &Path,
    cutoff: u32,
    split: &str,
    output: Option<PathBuf>,
) -> Result<()> {
    use echodepth::persistence::SplitTag;

    let config = load_config(config_path)?;
    let split = match split {
        "train" => SplitTag::Train,
        "test" => SplitTag::Test,
        other => bail!("unknown split {other:?} (expected train or test)"),
    };
    let (root, manifest) = open_dataset(out, &config)?;
    let network = load_checkpoint(checkpoint)?;
    let samples = echodepth::experiments::load_split(&root, &manifest, split, cutoff)?;
    let evaluation = evaluate(&network, &samples)?;

    let mut csv = String::from("scene_id,rmse\n");
    for row in &evaluation.rows {
        csv.push_str(&format!("{},{}\n", row.scene_id, row.rmse));
    }
    let path = match output {
        Some(p) => p,
        None => results_dir(out)?.join("eval.csv"),
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&path, csv)?;
    println!(
        "evaluated {} scenes at {} Hz: mean rmse {:.4}",
        evaluation.rows.len(),
        cutoff,
        evaluation.mean_rmse
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_report(out: &Path) -> Result<()> {
    let results = out.join("results");
    let sweep = read_table(&results.join("sweep.csv"), parse_sweep_csv)?;
    let comparison = read_table(&results.join("comparison.csv"), parse_comparison_csv)?;
    if sweep.is_none() && comparison.is_none() {
        bail!(
            "no sweep.csv or comparison.csv under {} — run `echodepth sweep` or `echodepth compare` first",
            results.display()
        );
    }
    let written = emit_report(sweep.as_ref(), comparison.as_ref(), &results)?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    print!(
        "{}",
        echodepth::experiments::summary_text(sweep.as_ref(), comparison.as_ref())
    );
    Ok(())
}

fn read_table<T>(path: &Path, parse: impl Fn(&str) -> echodepth::Result<T>) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    Ok(Some(parse(&text).with_context(|| {
        format!("parsing {}", path.display())
    })?))
}
