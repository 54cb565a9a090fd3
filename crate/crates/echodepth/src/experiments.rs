//! Experimental protocols: the cutoff-frequency sweep and the three-system
//! comparison, with multi-seed aggregation and deterministic CSV reports.
//!
//! Both protocols consume one prebuilt dataset (see `persistence`), so every
//! band variant of a scene comes from the same stored artifacts. Each
//! (cutoff, mode, seed) cell is a pure function of the dataset and its seed:
//! rerunning a cell in isolation reproduces the table's value bit-exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{pair_cutoffs, EchoSample, MixPolicy};
use crate::dsp::CutoffTag;
use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::persistence::{load_sample, DatasetManifest, GenerationConfig, SplitTag};
use crate::training::{evaluate, train, TrainConfig, TrainMode, TrainOutcome, TrainSet};

/// Highest cutoff the protocol admits (the band edge of the 44.1 kHz format).
pub const MAX_CUTOFF_HZ: u32 = 22_050;

/// Training hyperparameters shared by every cell of a protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProtocol {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_conv_widths")]
    pub conv_widths: [usize; 3],
}

fn default_epochs() -> usize {
    60
}
fn default_batch_size() -> usize {
    8
}
fn default_learning_rate() -> f64 {
    3e-3
}
fn default_conv_widths() -> [usize; 3] {
    [8, 16, 32]
}

impl Default for TrainProtocol {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            conv_widths: default_conv_widths(),
        }
    }
}

impl TrainProtocol {
    fn train_config(&self, mode: TrainMode, seeds: &[u64]) -> TrainConfig {
        let mut c = TrainConfig::new(mode);
        c.epochs = self.epochs;
        c.batch_size = self.batch_size;
        c.learning_rate = self.learning_rate;
        c.seeds = seeds.to_vec();
        c
    }
}

/// The cutoff-frequency sweep: one ultrasonic-only training per
/// (cutoff, seed), evaluated at the same cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub cutoffs_hz: Vec<u32>,
    pub seeds: Vec<u64>,
    pub dataset: PathBuf,
    #[serde(default)]
    pub train: TrainProtocol,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cutoffs_hz.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidConfig(
                "sweep needs at least one cutoff and one seed".into(),
            ));
        }
        if !self.cutoffs_hz.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig(
                "sweep cutoffs must be strictly increasing".into(),
            ));
        }
        if *self.cutoffs_hz.last().unwrap() >= MAX_CUTOFF_HZ {
            return Err(Error::InvalidConfig(format!(
                "sweep cutoffs must lie below {MAX_CUTOFF_HZ} Hz"
            )));
        }
        Ok(())
    }
}

/// The three-system comparison at ultrasonic cutoffs whose auxiliary band
/// comes from `pair_cutoffs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSpec {
    pub ultrasonic_cutoffs_hz: Vec<u32>,
    #[serde(default = "all_modes")]
    pub modes: Vec<TrainMode>,
    pub seeds: Vec<u64>,
    pub dataset: PathBuf,
    #[serde(default)]
    pub train: TrainProtocol,
}

fn all_modes() -> Vec<TrainMode> {
    vec![
        TrainMode::UltrasonicOnly,
        TrainMode::AugmentedOnly,
        TrainMode::Proposed,
    ]
}

impl ComparisonSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ultrasonic_cutoffs_hz.is_empty() || self.seeds.is_empty() || self.modes.is_empty()
        {
            return Err(Error::InvalidConfig(
                "comparison needs cutoffs, modes, and seeds".into(),
            ));
        }
        for &c in &self.ultrasonic_cutoffs_hz {
            pair_cutoffs(c)?;
        }
        Ok(())
    }
}

/// The section of a protocol config that parameterizes the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSection {
    pub cutoffs_hz: Vec<u32>,
    pub seeds: Vec<u64>,
}

/// The section of a protocol config that parameterizes the comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSection {
    pub ultrasonic_cutoffs_hz: Vec<u32>,
    #[serde(default = "all_modes")]
    pub modes: Vec<TrainMode>,
    pub seeds: Vec<u64>,
}

/// One self-contained protocol description: dataset, training
/// hyperparameters, and both experiment tables, loadable from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: GenerationConfig,
    #[serde(default)]
    pub train: TrainProtocol,
    pub sweep: SweepSection,
    pub comparison: ComparisonSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: Self = toml::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.sweep_spec(PathBuf::new())?.validate()?;
        self.comparison_spec(PathBuf::new())?.validate()?;
        // Every band a cell needs must exist in the dataset.
        let mut needed = self.sweep.cutoffs_hz.clone();
        for &c in &self.comparison.ultrasonic_cutoffs_hz {
            needed.push(c);
            needed.push(pair_cutoffs(c)?);
        }
        for c in needed {
            if !self.dataset.cutoffs_hz.contains(&c) {
                return Err(Error::InvalidConfig(format!(
                    "protocol uses a {c} Hz band the dataset section does not build"
                )));
            }
        }
        Ok(())
    }

    pub fn sweep_spec(&self, dataset: PathBuf) -> Result<SweepSpec> {
        Ok(SweepSpec {
            cutoffs_hz: self.sweep.cutoffs_hz.clone(),
            seeds: self.sweep.seeds.clone(),
            dataset,
            train: self.train.clone(),
        })
    }

    pub fn comparison_spec(&self, dataset: PathBuf) -> Result<ComparisonSpec> {
        Ok(ComparisonSpec {
            ultrasonic_cutoffs_hz: self.comparison.ultrasonic_cutoffs_hz.clone(),
            modes: self.comparison.modes.clone(),
            seeds: self.comparison.seeds.clone(),
            dataset,
            train: self.train.clone(),
        })
    }
}

/// One sweep measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cutoff_hz: u32,
    pub seed: u64,
    pub rmse: f64,
}

/// One comparison measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub cutoff_hz: u32,
    pub mode: TrainMode,
    pub seed: u64,
    pub rmse: f64,
}

/// Aggregate statistics for one group of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

impl GroupStats {
    /// Arithmetic mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            runs: values.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Per-cutoff aggregates in ascending cutoff order.
    pub fn summary(&self) -> Vec<(u32, GroupStats)> {
        let mut groups: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry(r.cutoff_hz).or_default().push(r.rmse);
        }
        groups
            .into_iter()
            .map(|(c, v)| (c, GroupStats::of(&v)))
            .collect()
    }

    pub fn mean_at(&self, cutoff_hz: u32) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|(c, _)| *c == cutoff_hz)
            .map(|(_, s)| s.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<CompareRow>,
}

impl ComparisonTable {
    /// Per-(cutoff, mode) aggregates, cutoff-major, modes in declaration
    /// order (ultrasonic_only, augmented_only, proposed).
    pub fn summary(&self) -> Vec<(u32, TrainMode, GroupStats)> {
        let mut groups: BTreeMap<(u32, TrainMode), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry((r.cutoff_hz, r.mode)).or_default().push(r.rmse);
        }
        groups
            .into_iter()
            .map(|((c, m), v)| (c, m, GroupStats::of(&v)))
            .collect()
    }

    pub fn mean_of(&self, cutoff_hz: u32, mode: TrainMode) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|(c, m, _)| *c == cutoff_hz && *m == mode)
            .map(|(_, _, s)| s.mean)
    }
}

// ---------------------------------------------------------------------------
// Cells
// ---------------------------------------------------------------------------

/// Load one split at one cutoff, in manifest scene order.
pub fn load_split(
    root: &Path,
    manifest: &DatasetManifest,
    split: SplitTag,
    cutoff_hz: u32,
) -> Result<Vec<EchoSample>> {
    let mut out = Vec::new();
    for entry in manifest.scenes.iter().filter(|e| e.split == split) {
        let sample = load_sample(root, manifest, &entry.scene_id, cutoff_hz)?;
        if sample.cutoff_tag() != Some(CutoffTag::Band(cutoff_hz)) {
            return Err(Error::InvalidConfig(format!(
                "stored sample {} carries tag {:?}, expected band {cutoff_hz}",
                entry.scene_id,
                sample.cutoff_tag()
            )));
        }
        out.push(sample);
    }
    if out.is_empty() {
        return Err(Error::MissingEntry(format!("split {split:?} is empty")));
    }
    Ok(out)
}

/// Plan the network for a dataset: input sized from a stored sample, output
/// from the configured depth resolution.
pub fn plan_network(
    root: &Path,
    manifest: &DatasetManifest,
    conv_widths: [usize; 3],
) -> Result<NetworkConfig> {
    let entry = manifest.scenes.first().ok_or_else(|| {
        Error::MissingEntry("dataset has no scenes".into())
    })?;
    let cutoff = *manifest.generation.cutoffs_hz.first().unwrap();
    let sample = load_sample(root, manifest, &entry.scene_id, cutoff)?;
    let f = &sample.features;
    NetworkConfig::plan(
        (f.channels(), f.bins(), f.frames()),
        manifest.generation.depth_resolution,
        conv_widths,
        manifest.generation.max_depth_m,
    )
}

fn require_cutoff(manifest: &DatasetManifest, cutoff_hz: u32) -> Result<()> {
    if manifest.generation.cutoffs_hz.contains(&cutoff_hz) {
        Ok(())
    } else {
        Err(Error::MissingEntry(format!(
            "dataset was not built with a {cutoff_hz} Hz band (has {:?})",
            manifest.generation.cutoffs_hz
        )))
    }
}

/// Train and evaluate one (mode, cutoff, seed) cell against a loaded
/// dataset. Pure in (manifest content, arguments); used by both protocols.
pub fn run_cell(
    root: &Path,
    manifest: &DatasetManifest,
    mode: TrainMode,
    cutoff_hz: u32,
    seed: u64,
    protocol: &TrainProtocol,
) -> Result<(TrainOutcome, f64)> {
    require_cutoff(manifest, cutoff_hz)?;
    let train_u = load_split(root, manifest, SplitTag::Train, cutoff_hz)?;
    let (data, policy) = if mode == TrainMode::UltrasonicOnly {
        (TrainSet::new(train_u, None)?, None)
    } else {
        let aux_cutoff = pair_cutoffs(cutoff_hz)?;
        require_cutoff(manifest, aux_cutoff)?;
        let train_aux = load_split(root, manifest, SplitTag::Train, aux_cutoff)?;
        (
            TrainSet::new(train_u, Some(train_aux))?,
            Some(MixPolicy::new(cutoff_hz, aux_cutoff)?),
        )
    };
    let net_config = plan_network(root, manifest, protocol.conv_widths)?;
    let network = Network::init(net_config, seed)?;
    let config = protocol.train_config(mode, &[seed]);
    let outcome = train(&config, seed, network, &data, policy.as_ref())?;

    let test = load_split(root, manifest, SplitTag::Test, cutoff_hz)?;
    let eval = evaluate(&outcome.network, &test)?;
    Ok((outcome, eval.mean_rmse))
}

/// Run the full sweep: cells in (cutoff, seed) order, with a progress
/// callback per finished cell.
pub fn run_sweep(
    root: &Path,
    manifest: &DatasetManifest,
    spec: &SweepSpec,
    mut progress: impl FnMut(&SweepRow),
) -> Result<SweepTable> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.cutoffs_hz.len() * spec.seeds.len());
    for &cutoff_hz in &spec.cutoffs_hz {
        for &seed in &spec.seeds {
            let (_, rmse) = run_cell(
                root,
                manifest,
                TrainMode::UltrasonicOnly,
                cutoff_hz,
                seed,
                &spec.train,
            )?;
            let row = SweepRow {
                cutoff_hz,
                seed,
                rmse,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(SweepTable { rows })
}

/// Run the full comparison: cells in (cutoff, mode, seed) order.
pub fn run_comparison(
    root: &Path,
    manifest: &DatasetManifest,
    spec: &ComparisonSpec,
    mut progress: impl FnMut(&CompareRow),
) -> Result<ComparisonTable> {
    spec.validate()?;
    let mut rows = Vec::new();
    for &cutoff_hz in &spec.ultrasonic_cutoffs_hz {
        for &mode in &spec.modes {
            for &seed in &spec.seeds {
                let (outcome, rmse) =
                    run_cell(root, manifest, mode, cutoff_hz, seed, &spec.train)?;
                if mode == TrainMode::UltrasonicOnly {
                    let aux = pair_cutoffs(cutoff_hz)?;
                    let aux_key = format!("band:{aux}");
                    if outcome.reads.contains_key(&aux_key) {
                        return Err(Error::InvalidConfig(format!(
                            "ultrasonic-only cell read auxiliary band {aux}"
                        )));
                    }
                }
                let row = CompareRow {
                    cutoff_hz,
                    mode,
                    seed,
                    rmse,
                };
                progress(&row);
                rows.push(row);
            }
        }
    }
    Ok(ComparisonTable { rows })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

fn fmt_f64(v: f64) -> String {
    // Shortest round-trip decimal form; stable for identical inputs.
    format!("{v}")
}

/// Render the sweep table as CSV (rows in cutoff-major, seed-minor order).
pub fn sweep_csv(table: &SweepTable) -> String {
    let mut s = String::from("cutoff_hz,seed,rmse\n");
    for r in &table.rows {
        let _ = writeln!(s, "{},{},{}", r.cutoff_hz, r.seed, fmt_f64(r.rmse));
    }
    s
}

pub fn sweep_summary_csv(table: &SweepTable) -> String {
    let mut s = String::from("cutoff_hz,mean_rmse,std_rmse,runs\n");
    for (c, g) in table.summary() {
        let _ = writeln!(s, "{c},{},{},{}", fmt_f64(g.mean), fmt_f64(g.std), g.runs);
    }
    s
}

pub fn comparison_csv(table: &ComparisonTable) -> String {
    let mut s = String::from("cutoff_hz,mode,seed,rmse\n");
    for r in &table.rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.cutoff_hz,
            r.mode.label(),
            r.seed,
            fmt_f64(r.rmse)
        );
    }
    s
}

pub fn comparison_summary_csv(table: &ComparisonTable) -> String {
    let mut s = String::from("cutoff_hz,mode,mean_rmse,std_rmse,runs\n");
    for (c, m, g) in table.summary() {
        let _ = writeln!(
            s,
            "{c},{},{},{},{}",
            m.label(),
            fmt_f64(g.mean),
            fmt_f64(g.std),
            g.runs
        );
    }
    s
}

fn csv_lines<'a>(text: &'a str, header: &str) -> Result<std::str::Lines<'a>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == header => Ok(lines),
        other => Err(Error::Format(format!(
            "expected CSV header {header:?}, found {other:?}"
        ))),
    }
}

fn parse_field<T: std::str::FromStr>(field: &str, label: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Format(format!("bad {label} value {field:?}")))
}

/// Parse a CSV produced by [`sweep_csv`].
pub fn parse_sweep_csv(text: &str) -> Result<SweepTable> {
    let mut rows = Vec::new();
    for line in csv_lines(text, "cutoff_hz,seed,rmse")? {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::Format(format!("bad sweep row {line:?}")));
        }
        rows.push(SweepRow {
            cutoff_hz: parse_field(f[0], "cutoff_hz")?,
            seed: parse_field(f[1], "seed")?,
            rmse: parse_field(f[2], "rmse")?,
        });
    }
    Ok(SweepTable { rows })
}

/// Parse a CSV produced by [`comparison_csv`].
pub fn parse_comparison_csv(text: &str) -> Result<ComparisonTable> {
    let mut rows = Vec::new();
    for line in csv_lines(text, "cutoff_hz,mode,seed,rmse")? {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::Format(format!("bad comparison row {line:?}")));
        }
        rows.push(CompareRow {
            cutoff_hz: parse_field(f[0], "cutoff_hz")?,
            mode: TrainMode::from_label(f[1])?,
            seed: parse_field(f[2], "seed")?,
            rmse: parse_field(f[3], "rmse")?,
        });
    }
    Ok(ComparisonTable { rows })
}

/// Human-readable digest of whichever tables are present.
pub fn summary_text(sweep: Option<&SweepTable>, comparison: Option<&ComparisonTable>) -> String {
    let mut s = String::new();
    if let Some(t) = sweep {
        s.push_str("cutoff sweep (ultrasonic-only training per band)\n");
        for (c, g) in t.summary() {
            let _ = writeln!(
                s,
                "  {:>6} Hz  mean RMSE {:.4}  std {:.4}  ({} runs)",
                c, g.mean, g.std, g.runs
            );
        }
    }
    if let Some(t) = comparison {
        if !s.is_empty() {
            s.push('\n');
        }
        s.push_str("three-system comparison (evaluated on ultrasonic input)\n");
        for (c, m, g) in t.summary() {
            let _ = writeln!(
                s,
                "  {:>6} Hz  {:<16}  mean RMSE {:.4}  std {:.4}  ({} runs)",
                c,
                m.label(),
                g.mean,
                g.std,
                g.runs
            );
        }
    }
    s
}

/// Write every applicable CSV plus the text summary into `out_dir`,
/// returning the written paths. Identical tables produce byte-identical
/// files.
pub fn emit_report(
    sweep: Option<&SweepTable>,
    comparison: Option<&ComparisonTable>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if sweep.is_none() && comparison.is_none() {
        return Err(Error::InvalidConfig("no tables to report".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, content: String| -> Result<()> {
        let path = out_dir.join(name);
        std::fs::write(&path, content)?;
        written.push(path);
        Ok(())
    };
    if let Some(t) = sweep {
        emit("sweep.csv", sweep_csv(t))?;
        emit("sweep_summary.csv", sweep_summary_csv(t))?;
    }
    if let Some(t) = comparison {
        emit("comparison.csv", comparison_csv(t))?;
        emit("comparison_summary.csv", comparison_summary_csv(t))?;
    }
    emit("summary.txt", summary_text(sweep, comparison))?;
    Ok(written)
}
