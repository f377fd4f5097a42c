//! Command-line entry points: configure, run, resume, and analyze
//! experiments reproducibly.
//!
//! The grammar is flat `key=value` pairs after a subcommand (`train`,
//! `eval`, `resume`, `systems`). Configuration resolves in three layers —
//! built-in per-system defaults, then a `config=<file>` of one pair per
//! line, then the command line — and every run directory receives a
//! manifest with all defaults materialized as sorted `key=value` lines, so
//! the manifest itself is a valid config file: re-running it reproduces the
//! run's numbers exactly.
//!
//! Output lands under the directory named by `FKCONTROL_OUT` (default
//! `runs/`), one locked directory per run.

use crate::diagnostics::{
    drift_grid, histogram, ordering_violations, trajectory_table, tv_distance, write_table,
    DivergenceMode, PlaneSpec, Projection,
};
use crate::diffcore::Array;
use crate::driftnet::{Arch, DriftModel, ModelConfig, SkipSpec};
use crate::potentials::System;
use crate::sde::{rollout_eval, DriftSource, Integrator, NoiseSource};
use crate::trainer::{initial_positions, train, CsvSink, TrainConfig, TrainState};
use crate::Error;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const SYSTEMS: &[&str] = &["hydrogen", "helium", "h2", "harmonic", "bosons", "calogero"];
const DIAGNOSTICS: &[&str] = &["energy", "residuals", "histogram", "grid", "trajectory"];

const USAGE: &str = "usage: fkcontrol <command> [key=value ...]

commands:
  train    train a drift model          (system=... [config=file] [key=value ...])
  resume   continue a run directory     (dir=<run> [epochs=N])
  eval     analyze a drift              (system=... [checkpoint=...|exact_drift=true]
                                         [diagnostics=energy,residuals,histogram,grid,trajectory])
  systems  list built-in systems with their default configuration

output root: $FKCONTROL_OUT (default ./runs)";

/// Usage errors exit 2, everything downstream exits 1.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        CliError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Process entry point: parses `std::env::args` and returns the exit code.
pub fn main_entry() -> i32 {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut out = std::io::stdout();
    let mut err = std::io::stderr();
    run(&args, &mut out, &mut err)
}

/// Testable core: run a full command against explicit output streams.
pub fn run(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match dispatch(args, out) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}\n\n{USAGE}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(args: &[String], out: &mut dyn Write) -> CliResult<()> {
    let Some(command) = args.first() else {
        return Err(usage("no command given"));
    };
    let rest = &args[1..];
    match command.as_str() {
        "train" => cmd_train(rest, out),
        "resume" => cmd_resume(rest, out),
        "eval" => cmd_eval(rest, out),
        "systems" => cmd_systems(rest, out),
        other => Err(usage(format!(
            "unknown command '{other}' (expected train, resume, eval, or systems)"
        ))),
    }
}

// ---------------------------------------------------------------------------
// key=value plumbing

fn split_pair(token: &str) -> CliResult<(String, String)> {
    match token.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(usage(format!(
            "expected key=value, got '{token}'"
        ))),
    }
}

/// Pairs from a config file: one per line, `#` comments and blanks ignored.
fn file_pairs(path: &Path) -> CliResult<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(Error::io(format!("reading config {}", path.display())))?;
    let mut pairs = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        pairs.push(split_pair(line)?);
    }
    Ok(pairs)
}

/// Command-line tokens → (file pairs, flag pairs), with `config=` expanded.
fn layered_pairs(tokens: &[String]) -> CliResult<(Vec<(String, String)>, Vec<(String, String)>)> {
    let mut from_file = Vec::new();
    let mut flags = Vec::new();
    for token in tokens {
        let (k, v) = split_pair(token)?;
        if k == "config" {
            from_file.extend(file_pairs(Path::new(&v))?);
        } else {
            flags.push((k, v));
        }
    }
    Ok((from_file, flags))
}

fn parse_f64(key: &str, v: &str) -> CliResult<f64> {
    v.parse()
        .map_err(|_| usage(format!("key {key} expects a number, got '{v}'")))
}

fn parse_usize(key: &str, v: &str) -> CliResult<usize> {
    v.parse()
        .map_err(|_| usage(format!("key {key} expects a non-negative integer, got '{v}'")))
}

fn parse_u64(key: &str, v: &str) -> CliResult<u64> {
    v.parse()
        .map_err(|_| usage(format!("key {key} expects a non-negative integer, got '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> CliResult<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(usage(format!("key {key} expects true or false, got '{v}'"))),
    }
}

// ---------------------------------------------------------------------------
// configuration resolution

/// A fully materialized training configuration.
pub struct Resolved {
    pub system: System,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub name: String,
    /// Canonical sorted key=value map (what the manifest records).
    pub canonical: BTreeMap<String, String>,
}

/// Keys every training config understands, beyond per-system extras.
const BASE_KEYS: &[&str] = &[
    "system",
    "name",
    "arch",
    "width",
    "depth",
    "self_pairs",
    "pair_matrix_features",
    "skip",
    "batch",
    "dt",
    "steps",
    "epochs",
    "lr",
    "lr_decay_factor",
    "lr_decay_every",
    "beta1",
    "beta2",
    "adam_eps",
    "seed",
    "boundary_correction",
    "sever_boundary_drift",
    "integrator",
    "shards",
    "checkpoint_every",
];

fn system_extra_keys(system: &str) -> &'static [&'static str] {
    match system {
        "h2" => &["bond_length"],
        "harmonic" => &["n", "dim"],
        "bosons" => &["n", "g", "s"],
        "calogero" => &["n", "lambda"],
        _ => &[],
    }
}

/// Build the System from its name and the merged key view.
fn build_system(name: &str, merged: &BTreeMap<String, String>) -> CliResult<System> {
    let system = match name {
        "hydrogen" => System::Hydrogen,
        "helium" => System::Helium,
        "h2" => System::H2 {
            bond_length: merged
                .get("bond_length")
                .map(|v| parse_f64("bond_length", v))
                .transpose()?
                .unwrap_or(1.401),
        },
        "harmonic" => System::Harmonic {
            n: merged
                .get("n")
                .map(|v| parse_usize("n", v))
                .transpose()?
                .unwrap_or(1),
            dim: merged
                .get("dim")
                .map(|v| parse_usize("dim", v))
                .transpose()?
                .unwrap_or(1),
        },
        "bosons" => System::Bosons {
            n: merged
                .get("n")
                .map(|v| parse_usize("n", v))
                .transpose()?
                .unwrap_or(2),
            g: merged
                .get("g")
                .map(|v| parse_f64("g", v))
                .transpose()?
                .unwrap_or(0.0),
            s: merged
                .get("s")
                .map(|v| parse_f64("s", v))
                .transpose()?
                .unwrap_or(0.5),
        },
        "calogero" => System::Calogero {
            n: merged
                .get("n")
                .map(|v| parse_usize("n", v))
                .transpose()?
                .unwrap_or(5),
            lambda: merged
                .get("lambda")
                .map(|v| parse_f64("lambda", v))
                .transpose()?
                .unwrap_or(2.0),
        },
        other => {
            return Err(usage(format!(
                "unknown system '{other}' (valid: {})",
                SYSTEMS.join(", ")
            )))
        }
    };
    system.validate().map_err(|e| usage(e.to_string()))?;
    Ok(system)
}

/// Built-in defaults for a system (training budgets and architecture).
fn system_defaults(system: &System) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    let mut set = |k: &str, v: String| {
        map.insert(k.to_string(), v);
    };
    // Values shared by every system.
    set("arch", "pairdrift".into());
    set("depth", "1".into());
    set("self_pairs", "false".into());
    set("pair_matrix_features", "false".into());
    set("dt", "0.01".into());
    set("lr_decay_factor", "0.95".into());
    set("lr_decay_every", "10".into());
    set("beta1", "0.9".into());
    set("beta2", "0.999".into());
    set("adam_eps", "1e-8".into());
    set("seed", "7".into());
    set("boundary_correction", "true".into());
    set("sever_boundary_drift", "true".into());
    set("integrator", "em".into());
    set("checkpoint_every", "25".into());
    match system {
        System::Hydrogen => {
            set("batch", "1024".into());
            set("steps", "1024".into());
            set("width", "256".into());
            set("lr", "0.01".into());
            set("skip", "linear".into());
            set("epochs", "100".into());
            set("shards", "4".into());
        }
        System::Helium => {
            set("batch", "1024".into());
            set("steps", "1024".into());
            set("width", "64".into());
            set("lr", "0.001".into());
            set("skip", "cusp".into());
            set("epochs", "150".into());
            set("shards", "4".into());
        }
        System::H2 { bond_length } => {
            set("batch", "1024".into());
            set("steps", "1024".into());
            set("width", "64".into());
            // The stretched molecule trains with a hotter start.
            let lr = if (*bond_length - 2.8).abs() < 1e-9 {
                "0.01"
            } else {
                "0.0005"
            };
            set("lr", lr.into());
            set("skip", "cusp".into());
            set("epochs", "150".into());
            set("shards", "4".into());
        }
        System::Harmonic { .. } => {
            set("batch", "512".into());
            set("steps", "64".into());
            set("width", "32".into());
            set("lr", "0.01".into());
            set("skip", "linear".into());
            set("epochs", "200".into());
            set("shards", "1".into());
        }
        System::Bosons { .. } => {
            set("batch", "512".into());
            set("steps", "64".into());
            set("width", "64".into());
            set("lr", "0.01".into());
            set("skip", "linear".into());
            set("epochs", "300".into());
            set("shards", "1".into());
        }
        System::Calogero { .. } => {
            set("batch", "256".into());
            set("steps", "256".into());
            set("width", "32".into());
            set("lr", "0.01".into());
            set("dt", "0.001".into());
            set("skip", "linear".into());
            set("epochs", "200".into());
            set("shards", "4".into());
        }
    }
    map
}

/// Record the system's own parameters into the canonical map.
fn system_params(system: &System, map: &mut BTreeMap<String, String>) {
    match system {
        System::Hydrogen | System::Helium => {}
        System::H2 { bond_length } => {
            map.insert("bond_length".into(), format!("{bond_length}"));
        }
        System::Harmonic { n, dim } => {
            map.insert("n".into(), format!("{n}"));
            map.insert("dim".into(), format!("{dim}"));
        }
        System::Bosons { n, g, s } => {
            map.insert("n".into(), format!("{n}"));
            map.insert("g".into(), format!("{g}"));
            map.insert("s".into(), format!("{s}"));
        }
        System::Calogero { n, lambda } => {
            map.insert("n".into(), format!("{n}"));
            map.insert("lambda".into(), format!("{lambda}"));
        }
    }
}

/// Layered resolution of a full training configuration: built-in defaults
/// ← config file ← flags, with unknown keys rejected by name.
pub fn parse_config(tokens: &[String]) -> std::result::Result<Resolved, (i32, String)> {
    resolve_train_config(tokens).map_err(|e| match e {
        CliError::Usage(m) => (EXIT_USAGE, m),
        CliError::Runtime(e) => (EXIT_RUNTIME, e.to_string()),
    })
}

fn resolve_train_config(tokens: &[String]) -> CliResult<Resolved> {
    let (from_file, flags) = layered_pairs(tokens)?;

    // Merged view (flags over file) picks the system and its parameters.
    let mut merged: BTreeMap<String, String> = BTreeMap::new();
    for (k, v) in from_file.iter().chain(flags.iter()) {
        merged.insert(k.clone(), v.clone());
    }
    let system_name = merged
        .get("system")
        .ok_or_else(|| {
            usage(format!(
                "missing required key system (valid: {})",
                SYSTEMS.join(", ")
            ))
        })?
        .clone();
    let system = build_system(&system_name, &merged)?;

    // Valid keys for this system.
    let extras = system_extra_keys(&system_name);
    let valid = |k: &str| BASE_KEYS.contains(&k) || extras.contains(&k);

    // Defaults ← file ← flags, rejecting unknown keys at overlay time.
    let mut map = system_defaults(&system);
    map.insert("system".into(), system_name.clone());
    system_params(&system, &mut map);
    for (k, v) in from_file.iter().chain(flags.iter()) {
        if !valid(k) {
            let mut all: Vec<&str> = BASE_KEYS.iter().chain(extras).copied().collect();
            all.sort_unstable();
            return Err(usage(format!(
                "unknown key '{k}' for system {system_name} (valid: {})",
                all.join(", ")
            )));
        }
        map.insert(k.clone(), v.clone());
    }

    let get = |k: &str| map.get(k).expect("defaults cover every key").as_str();
    let train = TrainConfig {
        batch_size: parse_usize("batch", get("batch"))?,
        dt: parse_f64("dt", get("dt"))?,
        steps_per_epoch: parse_usize("steps", get("steps"))?,
        n_epochs: parse_usize("epochs", get("epochs"))?,
        lr_init: parse_f64("lr", get("lr"))?,
        lr_decay_factor: parse_f64("lr_decay_factor", get("lr_decay_factor"))?,
        lr_decay_every: parse_usize("lr_decay_every", get("lr_decay_every"))?,
        beta1: parse_f64("beta1", get("beta1"))?,
        beta2: parse_f64("beta2", get("beta2"))?,
        adam_eps: parse_f64("adam_eps", get("adam_eps"))?,
        seed: parse_u64("seed", get("seed"))?,
        boundary_correction: parse_bool("boundary_correction", get("boundary_correction"))?,
        sever_boundary_drift: parse_bool("sever_boundary_drift", get("sever_boundary_drift"))?,
        integrator: Integrator::parse(get("integrator")).map_err(|e| usage(e.to_string()))?,
        shards: parse_usize("shards", get("shards"))?,
        checkpoint_every: parse_usize("checkpoint_every", get("checkpoint_every"))?,
    };
    train.validate().map_err(|e| usage(e.to_string()))?;

    let skip = match get("skip") {
        "linear" => SkipSpec::restoring(system.dim()),
        "cusp" => SkipSpec::cusp_for(&system).map_err(|e| usage(e.to_string()))?,
        "none" => SkipSpec::None,
        other => {
            return Err(usage(format!(
                "key skip expects linear, cusp, or none, got '{other}'"
            )))
        }
    };
    let model = ModelConfig {
        arch: Arch::parse(get("arch")).map_err(|e| usage(e.to_string()))?,
        n: system.n_particles(),
        dim: system.dim(),
        width: parse_usize("width", get("width"))?,
        depth: parse_usize("depth", get("depth"))?,
        self_pairs: parse_bool("self_pairs", get("self_pairs"))?,
        pair_matrix_features: parse_bool("pair_matrix_features", get("pair_matrix_features"))?,
        skip,
    };
    model.validate().map_err(|e| usage(e.to_string()))?;

    let name = map
        .get("name")
        .cloned()
        .unwrap_or_else(|| format!("{system_name}_seed{}", train.seed));
    map.insert("name".into(), name.clone());

    Ok(Resolved {
        system,
        model,
        train,
        name,
        canonical: map,
    })
}

// ---------------------------------------------------------------------------
// run directories and manifests

fn output_root() -> PathBuf {
    match std::env::var_os("FKCONTROL_OUT") {
        Some(dir) => PathBuf::from(dir),
        None => PathBuf::from("runs"),
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Exclusive run-directory lock; removed on drop so a finished (or failed)
/// run frees the directory.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> CliResult<RunLock> {
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Runtime(Error::Config(format!(
                    "run directory {} is locked by another run (remove {} if it is stale)",
                    dir.display(),
                    path.display()
                ))))
            }
            Err(e) => Err(Error::io(format!("locking {}", dir.display()))(e).into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Write the (single) manifest: metadata as comments, then the resolved
/// config as sorted key=value lines — a valid config file in itself.
fn write_manifest(
    dir: &Path,
    canonical: &BTreeMap<String, String>,
    started: u64,
    finished: Option<u64>,
) -> CliResult<()> {
    let mut text = String::new();
    text.push_str("# fkcontrol run manifest\n");
    text.push_str(&format!("# version {}\n", env!("CARGO_PKG_VERSION")));
    text.push_str(&format!("# started_unix {started}\n"));
    if let Some(t) = finished {
        text.push_str(&format!("# finished_unix {t}\n"));
        let mut files: Vec<String> = std::fs::read_dir(dir)
            .map_err(Error::io(format!("listing {}", dir.display())))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != ".lock")
            .collect();
        files.sort_unstable();
        text.push_str(&format!("# outputs {}\n", files.join(" ")));
    }
    for (k, v) in canonical {
        text.push_str(&format!("{k}={v}\n"));
    }
    std::fs::write(dir.join("manifest.txt"), text)
        .map_err(Error::io(format!("writing manifest in {}", dir.display())))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train / resume

fn cmd_train(tokens: &[String], out: &mut dyn Write) -> CliResult<()> {
    let resolved = resolve_train_config(tokens)?;
    let dir = output_root().join(&resolved.name);
    std::fs::create_dir_all(&dir).map_err(Error::io(format!("creating {}", dir.display())))?;
    let _lock = RunLock::acquire(&dir)?;
    let started = unix_now();
    write_manifest(&dir, &resolved.canonical, started, None)?;

    let mut model = DriftModel::init(resolved.model.clone(), resolved.train.seed)?;
    let metrics = std::fs::File::create(dir.join("metrics.csv"))
        .map_err(Error::io(format!("creating metrics in {}", dir.display())))?;
    let mut sink = CsvSink::new(std::io::BufWriter::new(metrics))?;
    let _ = writeln!(
        out,
        "training {} for {} epochs -> {}",
        resolved.system.describe(),
        resolved.train.n_epochs,
        dir.display()
    );
    let summary = train(
        &resolved.system,
        &mut model,
        &resolved.train,
        None,
        &mut sink,
        Some(&dir),
    )?;
    write_manifest(&dir, &resolved.canonical, started, Some(unix_now()))?;
    if let Some(last) = summary.epochs.last() {
        let _ = writeln!(
            out,
            "done: epoch {} energy {:.6} (variance-reduced {:.6})",
            last.epoch, last.energy, last.energy_novar
        );
    }
    Ok(())
}

fn cmd_resume(tokens: &[String], out: &mut dyn Write) -> CliResult<()> {
    let mut dir: Option<PathBuf> = None;
    let mut epochs_override: Option<usize> = None;
    for token in tokens {
        let (k, v) = split_pair(token)?;
        match k.as_str() {
            "dir" => dir = Some(PathBuf::from(v)),
            "epochs" => epochs_override = Some(parse_usize("epochs", &v)?),
            other => {
                return Err(usage(format!(
                    "resume accepts only dir= and epochs=, got '{other}'"
                )))
            }
        }
    }
    let dir = dir.ok_or_else(|| usage("resume needs dir=<run directory>"))?;
    let manifest = dir.join("manifest.txt");
    if !manifest.is_file() {
        return Err(usage(format!(
            "{} has no manifest.txt — not a run directory",
            dir.display()
        )));
    }
    let mut tokens: Vec<String> = vec![format!("config={}", manifest.display())];
    if let Some(n) = epochs_override {
        tokens.push(format!("epochs={n}"));
    }
    let resolved = resolve_train_config(&tokens)?;

    let _lock = RunLock::acquire(&dir)?;
    let mut model = DriftModel::load(&dir.join("model.ckpt"))?;
    let state = TrainState::load(&dir.join("state.ckpt"), &model)?;
    if state.epochs_done >= resolved.train.n_epochs {
        let _ = writeln!(
            out,
            "nothing to do: {} of {} epochs already trained",
            state.epochs_done, resolved.train.n_epochs
        );
        return Ok(());
    }
    let started = unix_now();
    // Manifest reflects the (possibly extended) epoch budget.
    write_manifest(&dir, &resolved.canonical, started, None)?;
    let metrics = std::fs::OpenOptions::new()
        .append(true)
        .open(dir.join("metrics.csv"))
        .map_err(Error::io(format!("opening metrics in {}", dir.display())))?;
    let mut sink = CsvSink::resumed(std::io::BufWriter::new(metrics));
    let _ = writeln!(
        out,
        "resuming {} at epoch {} of {}",
        dir.display(),
        state.epochs_done,
        resolved.train.n_epochs
    );
    let summary = train(
        &resolved.system,
        &mut model,
        &resolved.train,
        Some(state),
        &mut sink,
        Some(&dir),
    )?;
    write_manifest(&dir, &resolved.canonical, started, Some(unix_now()))?;
    if let Some(last) = summary.epochs.last() {
        let _ = writeln!(out, "done: epoch {} energy {:.6}", last.epoch, last.energy);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

const EVAL_KEYS: &[&str] = &[
    "system",
    "checkpoint",
    "exact_drift",
    "diagnostics",
    "eval_batch",
    "eval_steps",
    "burnin_steps",
    "dt",
    "seed",
    "integrator",
    "thin",
    "hist_bins",
    "hist_min",
    "hist_max",
    "hist_axis",
    "grid_resolution",
    "grid_extent",
    "grid_base",
    "out",
    // Model keys build a fresh zero-initialized model when no checkpoint is
    // given (nothing to train against — useful for baselines).
    "arch",
    "width",
    "depth",
    "self_pairs",
    "pair_matrix_features",
    "skip",
];

struct EvalPlan {
    system: System,
    drift_label: String,
    diagnostics: Vec<String>,
    batch: usize,
    steps: usize,
    burnin: usize,
    dt: f64,
    seed: u64,
    integrator: Integrator,
    thin: usize,
    hist_bins: usize,
    hist_min: f64,
    hist_max: f64,
    hist_axis: String,
    grid_resolution: usize,
    grid_extent: f64,
    grid_base: Option<Vec<f64>>,
    out_dir: PathBuf,
}

fn cmd_eval(tokens: &[String], out: &mut dyn Write) -> CliResult<()> {
    let (from_file, flags) = layered_pairs(tokens)?;
    let mut map: BTreeMap<String, String> = BTreeMap::new();
    let mut extra_ok: Vec<&str> = Vec::new();
    // The system may carry extra parameter keys (n, g, ...), validated after
    // the system is known.
    for (k, v) in from_file.iter().chain(flags.iter()) {
        map.insert(k.clone(), v.clone());
    }
    let system_name = map
        .get("system")
        .ok_or_else(|| {
            usage(format!(
                "missing required key system (valid: {})",
                SYSTEMS.join(", ")
            ))
        })?
        .clone();
    let system = build_system(&system_name, &map)?;
    extra_ok.extend(system_extra_keys(&system_name));
    for k in map.keys() {
        if !EVAL_KEYS.contains(&k.as_str()) && !extra_ok.contains(&k.as_str()) {
            let mut all: Vec<&str> = EVAL_KEYS.iter().chain(&extra_ok).copied().collect();
            all.sort_unstable();
            return Err(usage(format!(
                "unknown key '{k}' for eval (valid: {})",
                all.join(", ")
            )));
        }
    }

    let diagnostics: Vec<String> = map
        .get("diagnostics")
        .map(|s| s.split(',').map(|d| d.trim().to_string()).collect())
        .unwrap_or_else(|| vec!["energy".to_string()]);
    for d in &diagnostics {
        if !DIAGNOSTICS.contains(&d.as_str()) {
            return Err(usage(format!(
                "unknown diagnostic '{d}' (valid: {})",
                DIAGNOSTICS.join(", ")
            )));
        }
    }

    let getf = |k: &str, default: f64| -> CliResult<f64> {
        map.get(k).map(|v| parse_f64(k, v)).transpose().map(|o| o.unwrap_or(default))
    };
    let getn = |k: &str, default: usize| -> CliResult<usize> {
        map.get(k)
            .map(|v| parse_usize(k, v))
            .transpose()
            .map(|o| o.unwrap_or(default))
    };

    let exact = map
        .get("exact_drift")
        .map(|v| parse_bool("exact_drift", v))
        .transpose()?
        .unwrap_or(false);
    let seed = map
        .get("seed")
        .map(|v| parse_u64("seed", v))
        .transpose()?
        .unwrap_or(7);
    let default_dt = if matches!(system, System::Calogero { .. }) {
        0.001
    } else {
        0.01
    };

    // Radial histograms suit single-center 3-D systems; 1-D/2-D default to
    // the first coordinate.
    let default_axis = if system.dim() == 3 { "radius" } else { "0" };
    let plan = EvalPlan {
        drift_label: if exact {
            "exact".into()
        } else if map.contains_key("checkpoint") {
            "checkpoint".into()
        } else {
            "fresh".into()
        },
        diagnostics,
        batch: getn("eval_batch", 512)?,
        steps: getn("eval_steps", 512)?,
        burnin: getn("burnin_steps", 256)?,
        dt: getf("dt", default_dt)?,
        seed,
        integrator: Integrator::parse(map.get("integrator").map(|s| s.as_str()).unwrap_or("em"))
            .map_err(|e| usage(e.to_string()))?,
        thin: getn("thin", 10)?.max(1),
        hist_bins: getn("hist_bins", 64)?,
        hist_min: getf("hist_min", if system.dim() == 3 { 0.0 } else { -6.0 })?,
        hist_max: getf("hist_max", if system.dim() == 3 { 8.0 } else { 6.0 })?,
        hist_axis: map
            .get("hist_axis")
            .cloned()
            .unwrap_or_else(|| default_axis.to_string()),
        grid_resolution: getn("grid_resolution", 25)?,
        grid_extent: getf("grid_extent", 4.0)?,
        grid_base: map
            .get("grid_base")
            .map(|s| -> CliResult<Vec<f64>> {
                s.split(',').map(|v| parse_f64("grid_base", v.trim())).collect()
            })
            .transpose()?,
        out_dir: map
            .get("out")
            .map(PathBuf::from)
            .unwrap_or_else(|| output_root().join(format!("{system_name}_eval_seed{seed}"))),
        system,
    };
    if plan.batch == 0 || plan.steps == 0 {
        return Err(usage("eval_batch and eval_steps must be >= 1"));
    }

    // Pick the drift: exact, a checkpoint, or a fresh zero-initialized model.
    let exact_drift;
    let model;
    let drift: &dyn DriftSource = if exact {
        exact_drift = plan.system.exact_drift().ok_or_else(|| {
            usage(format!(
                "{} has no exact drift; drop exact_drift=true",
                plan.system.name()
            ))
        })?;
        &exact_drift
    } else if let Some(ckpt) = map.get("checkpoint") {
        let path = PathBuf::from(ckpt);
        let path = if path.is_dir() { path.join("model.ckpt") } else { path };
        let loaded = DriftModel::load(&path)?;
        if loaded.config.n != plan.system.n_particles() || loaded.config.dim != plan.system.dim() {
            return Err(CliError::Runtime(Error::Dimension(format!(
                "checkpoint is built for n={} dim={}, system {} has n={} dim={}",
                loaded.config.n,
                loaded.config.dim,
                plan.system.name(),
                plan.system.n_particles(),
                plan.system.dim()
            ))));
        }
        model = loaded;
        &model
    } else {
        // Fresh model from the model keys (zero-initialized body: sampling
        // its skip dynamics without any training).
        let skip = match map.get("skip").map(|s| s.as_str()).unwrap_or("linear") {
            "linear" => SkipSpec::restoring(plan.system.dim()),
            "cusp" => SkipSpec::cusp_for(&plan.system).map_err(|e| usage(e.to_string()))?,
            "none" => SkipSpec::None,
            other => {
                return Err(usage(format!(
                    "key skip expects linear, cusp, or none, got '{other}'"
                )))
            }
        };
        let config = ModelConfig {
            arch: Arch::parse(map.get("arch").map(|s| s.as_str()).unwrap_or("pairdrift"))
                .map_err(|e| usage(e.to_string()))?,
            n: plan.system.n_particles(),
            dim: plan.system.dim(),
            width: getn("width", 32)?,
            depth: getn("depth", 1)?,
            self_pairs: map
                .get("self_pairs")
                .map(|v| parse_bool("self_pairs", v))
                .transpose()?
                .unwrap_or(false),
            pair_matrix_features: map
                .get("pair_matrix_features")
                .map(|v| parse_bool("pair_matrix_features", v))
                .transpose()?
                .unwrap_or(false),
            skip,
        };
        config.validate().map_err(|e| usage(e.to_string()))?;
        model = DriftModel::init(config, seed)?;
        &model
    };

    run_eval(&plan, drift, out)
}

fn run_eval(plan: &EvalPlan, drift: &dyn DriftSource, out: &mut dyn Write) -> CliResult<()> {
    std::fs::create_dir_all(&plan.out_dir)
        .map_err(Error::io(format!("creating {}", plan.out_dir.display())))?;
    let system = &plan.system;
    let (n, d) = (system.n_particles(), system.dim());

    let record = plan
        .diagnostics
        .iter()
        .any(|d| d == "histogram" || d == "trajectory");
    let mut noise = NoiseSource::new(plan.seed, plan.batch);
    let start = initial_positions(system, plan.batch, plan.seed);
    let warm = if plan.burnin > 0 {
        rollout_eval(
            drift,
            system,
            &start,
            plan.dt,
            plan.burnin,
            plan.integrator,
            &mut noise,
            false,
        )?
        .final_positions
    } else {
        start
    };
    let rec = rollout_eval(
        drift,
        system,
        &warm,
        plan.dt,
        plan.steps,
        plan.integrator,
        &mut noise,
        record,
    )?;

    let _ = writeln!(
        out,
        "eval {} ({} drift): energy {:.6} +- {:.6} over {} paths x {} steps",
        system.describe(),
        plan.drift_label,
        rec.energy(plan.dt, plan.steps),
        rec.energy_stderr(plan.dt, plan.steps),
        plan.batch,
        plan.steps
    );

    for diag in &plan.diagnostics {
        match diag.as_str() {
            "energy" => {
                let path = plan.out_dir.join("eval_energy.csv");
                write_table(
                    &path,
                    &[
                        "energy",
                        "stderr",
                        "energy_novar",
                        "batch",
                        "steps",
                        "dt",
                        "guard_events",
                    ],
                    std::iter::once(vec![
                        rec.energy(plan.dt, plan.steps),
                        rec.energy_stderr(plan.dt, plan.steps),
                        rec.energy_novar(plan.dt, plan.steps),
                        plan.batch as f64,
                        plan.steps as f64,
                        plan.dt,
                        rec.guard_events as f64,
                    ]),
                )?;
                let _ = writeln!(out, "  energy -> {}", path.display());
            }
            "residuals" => {
                let res = crate::diagnostics::zero_variance_residual(
                    system,
                    drift,
                    &rec.final_positions,
                    DivergenceMode::Ad,
                )?;
                let path = plan.out_dir.join("residuals.csv");
                write_table(
                    &path,
                    &["sample", "residual"],
                    res.iter().enumerate().map(|(i, r)| vec![i as f64, *r]),
                )?;
                let mean = res.iter().sum::<f64>() / res.len() as f64;
                let _ = writeln!(out, "  residuals (mean {mean:.6}) -> {}", path.display());
            }
            "histogram" => {
                let frames = rec.positions.as_ref().expect("recorded above");
                let mut pooled = Vec::new();
                for frame in frames.iter().step_by(plan.thin) {
                    pooled.extend_from_slice(frame.data());
                }
                let n_cfg = pooled.len() / (n * d);
                let samples = Array::from_vec(&[n_cfg, n, d], pooled)?;
                let projection = match plan.hist_axis.as_str() {
                    "radius" => Projection::Radius,
                    axis => Projection::Coordinate(
                        axis.parse::<usize>()
                            .map_err(|_| {
                                usage(format!(
                                    "hist_axis expects radius or a coordinate index, got '{axis}'"
                                ))
                            })?,
                    ),
                };
                let hist = histogram(
                    &samples,
                    projection,
                    plan.hist_min,
                    plan.hist_max,
                    plan.hist_bins,
                )?;
                let path = plan.out_dir.join("histogram.csv");
                let density = hist.density();
                write_table(
                    &path,
                    &["center", "count", "density"],
                    hist.centers()
                        .iter()
                        .zip(&hist.counts)
                        .zip(&density)
                        .map(|((c, k), dens)| vec![*c, *k as f64, *dens]),
                )?;
                let _ = writeln!(out, "  histogram -> {}", path.display());
                // Against the known law, when there is one.
                if matches!(system, System::Hydrogen) && plan.hist_axis == "radius" {
                    let pdf =
                        |r: f64| if r > 0.0 { 4.0 * r * r * (-2.0 * r).exp() } else { 0.0 };
                    let tv = tv_distance(&hist, &pdf);
                    let _ = writeln!(out, "  radial TV distance vs exact law: {tv:.4}");
                }
            }
            "grid" => {
                let base = match &plan.grid_base {
                    Some(b) => b.clone(),
                    None => vec![0.0; n * d],
                };
                if d < 2 {
                    return Err(usage(
                        "grid diagnostics need at least two spatial dimensions",
                    ));
                }
                let spec = PlaneSpec {
                    axes: (0, 1),
                    extent: plan.grid_extent,
                    probe: 0,
                    base,
                };
                let grid = drift_grid(drift, n, d, &spec, plan.grid_resolution)?;
                let mut header = vec!["u".to_string(), "v".to_string()];
                for k in 0..d {
                    header.push(format!("drift{k}"));
                }
                header.push("magnitude".to_string());
                let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
                let path = plan.out_dir.join("drift_grid.csv");
                write_table(
                    &path,
                    &header_refs,
                    grid.iter().map(|p| {
                        let mut row = vec![p.plane[0], p.plane[1]];
                        row.extend_from_slice(&p.drift);
                        row.push(p.magnitude);
                        row
                    }),
                )?;
                let _ = writeln!(out, "  drift grid -> {}", path.display());
            }
            "trajectory" => {
                let particles: Vec<usize> = (0..n).collect();
                let rows = trajectory_table(&rec, plan.dt, 0, &particles)?;
                let mut header = vec![
                    "step".to_string(),
                    "time".to_string(),
                    "particle".to_string(),
                ];
                for k in 0..d {
                    header.push(format!("x{k}"));
                }
                let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
                let path = plan.out_dir.join("trajectory.csv");
                write_table(
                    &path,
                    &header_refs,
                    rows.iter().map(|r| {
                        let mut row = vec![r.step as f64, r.time, r.particle as f64];
                        row.extend_from_slice(&r.coords);
                        row
                    }),
                )?;
                let _ = writeln!(out, "  trajectory -> {}", path.display());
                if d == 1 {
                    let crossings = ordering_violations(&rec, 0)?;
                    let rate = crossings as f64 / (plan.steps as f64 * n as f64);
                    let _ = writeln!(
                        out,
                        "  ordering violations: {crossings} ({rate:.2e} per particle-step)"
                    );
                }
            }
            _ => unreachable!("diagnostics validated above"),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// systems

fn cmd_systems(tokens: &[String], out: &mut dyn Write) -> CliResult<()> {
    if !tokens.is_empty() {
        return Err(usage("systems takes no arguments"));
    }
    for name in SYSTEMS {
        let merged = BTreeMap::new();
        let system = build_system(name, &merged)?;
        let mut map = system_defaults(&system);
        map.insert("system".into(), name.to_string());
        system_params(&system, &mut map);
        let _ = writeln!(out, "{}:", system.describe());
        let line: Vec<String> = map
            .iter()
            .filter(|(k, _)| k.as_str() != "system")
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        let _ = writeln!(out, "  {}", line.join(" "));
    }
    Ok(())
}
