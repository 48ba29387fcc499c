//! The `scalenet` command line: `generate`, `analyze`, `train` and `eval`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime or data
//! error, 4 numerical divergence.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{build_variant, count_params, factored_vs_joint_weights, receptive_field};
use crate::data::{generate_phantom, read_volume, write_volume, Sample, Standardizer};
use crate::error::Error;
use crate::eval::{evaluate, wilcoxon_signed_rank, DiceReport, Pipeline, RegionMap};
use crate::training::{format_log, load_checkpoint, save_checkpoint, train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "scalenet", version, about = "Factored multimodal 3D segmentation networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic phantom volumes and a manifest of their seeds.
    Generate {
        #[arg(long)]
        count: usize,
        /// Edge length `S` or `DxHxW`.
        #[arg(long, default_value = "32")]
        size: String,
        #[arg(long, default_value_t = 4)]
        modalities: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter counts and the receptive field of a variant.
    Analyze {
        #[arg(long)]
        variant: String,
        #[arg(long, default_value_t = 4)]
        modalities: usize,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        f_width: usize,
    },
    /// Train from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        modalities: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        f_width: Option<usize>,
    },
    /// Score a checkpoint on volumes; optionally compare with another report.
    Eval {
        checkpoint: PathBuf,
        /// Volume files or directories of `.snvl` files.
        #[arg(required = true)]
        data: Vec<PathBuf>,
        /// Directory for `report.tsv`; the report goes to stdout without it.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long)]
        one_sided: bool,
    },
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: msg.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } => EXIT_DIVERGED,
            _ => EXIT_RUNTIME,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{e}");
                return EXIT_USAGE;
            }
            let _ = write!(stdout, "{e}");
            return EXIT_OK;
        }
    };
    let result = match cli.command {
        Command::Generate {
            count,
            size,
            modalities,
            seed,
            out,
        } => cmd_generate(count, &size, modalities, seed, &out, stdout),
        Command::Analyze {
            variant,
            modalities,
            classes,
            f_width,
        } => cmd_analyze(&variant, modalities, classes, f_width, stdout),
        Command::Train {
            config,
            seed,
            out,
            variant,
            modalities,
            classes,
            f_width,
        } => {
            let overrides = Overrides {
                seed,
                out,
                variant,
                modalities,
                classes,
                f_width,
            };
            cmd_train(&config, overrides, stdout)
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            compare,
            one_sided,
        } => cmd_eval(
            &checkpoint,
            &data,
            out.as_deref(),
            compare.as_deref(),
            one_sided,
            stdout,
        ),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message);
            e.code
        }
    }
}

fn out_err(e: std::io::Error) -> CliError {
    CliError {
        code: EXIT_RUNTIME,
        message: format!("writing output: {e}"),
    }
}

fn parse_size(s: &str) -> CliResult<[usize; 3]> {
    let parts: Vec<&str> = s.split('x').collect();
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::usage(format!("bad size `{s}`: expected S or DxHxW")))?;
    match nums[..] {
        [e] => Ok([e; 3]),
        [d, h, w] => Ok([d, h, w]),
        _ => Err(CliError::usage(format!("bad size `{s}`: expected S or DxHxW"))),
    }
}

/// Seed of the `i`-th generated sample: the `i`-th output of a ChaCha8
/// stream seeded with the command seed.
pub fn sample_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.next_u64()).collect()
}

fn cmd_generate(
    count: usize,
    size: &str,
    modalities: usize,
    seed: u64,
    out: &Path,
    stdout: &mut dyn Write,
) -> CliResult<()> {
    let size = parse_size(size)?;
    if modalities == 0 || size.iter().any(|&s| s < crate::data::MIN_SIZE) {
        return Err(CliError::usage(format!(
            "need at least one modality and sizes of at least {}",
            crate::data::MIN_SIZE
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = String::from("file\tseed\n");
    for (i, s) in sample_seeds(seed, count).into_iter().enumerate() {
        let name = format!("sample_{i:04}.snvl");
        write_volume(&generate_phantom(size, modalities, s)?, out.join(&name))?;
        writeln!(manifest, "{name}\t{s}").expect("string write");
    }
    let path = out.join("manifest.tsv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    writeln!(stdout, "wrote {count} volumes to {}", out.display()).map_err(out_err)
}

fn cmd_analyze(
    variant: &str,
    modalities: usize,
    classes: usize,
    f_width: usize,
    stdout: &mut dyn Write,
) -> CliResult<()> {
    let arch = build_variant(variant, modalities, classes, f_width).map_err(|e| CliError::usage(e.to_string()))?;
    let report = count_params(&arch)?;
    let classic = count_params(&build_variant("Classic", modalities, classes, f_width)?)?;
    let mut s = String::new();
    writeln!(
        s,
        "variant\t{}\tmodalities\t{modalities}\tclasses\t{classes}\tf_width\t{f_width}",
        arch.name
    )
    .unwrap();
    writeln!(s, "layer\tkind\tweights\tbiases").unwrap();
    for l in &report.layers {
        writeln!(s, "{}\t{}\t{}\t{}", l.path, l.kind, l.weights, l.biases).unwrap();
    }
    writeln!(s, "backend\t{}", report.total_under("backend")).unwrap();
    writeln!(s, "frontend\t{}", report.total_under("frontend")).unwrap();
    writeln!(s, "total\t{}", report.total()).unwrap();
    let [rz, ry, rx] = receptive_field(&arch);
    writeln!(s, "receptive_field\t{rz} {ry} {rx}").unwrap();
    writeln!(s, "classic_total\t{}", classic.total()).unwrap();
    writeln!(s, "total_ratio\t{:.6}", report.total() as f64 / classic.total() as f64).unwrap();
    let (factored, joint) = factored_vs_joint_weights(f_width, modalities, 3);
    writeln!(
        s,
        "ratio p={f_width} n={modalities} k=3: {:.6}",
        factored as f64 / joint as f64
    )
    .unwrap();
    stdout.write_all(s.as_bytes()).map_err(out_err)
}

/// Run configuration of `train`. Relative data paths resolve against the
/// directory holding the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Option<String>,
    pub modalities: Option<usize>,
    #[serde(default = "default_classes")]
    pub classes: usize,
    pub f_width: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub train: Vec<PathBuf>,
    pub validation: Vec<PathBuf>,
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default)]
    pub training: TrainConfig,
}

fn default_classes() -> usize {
    crate::data::label::COUNT
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Default)]
struct Overrides {
    seed: Option<u64>,
    out: Option<PathBuf>,
    variant: Option<String>,
    modalities: Option<usize>,
    classes: Option<usize>,
    f_width: Option<usize>,
}

fn load_run_config(path: &Path, o: Overrides) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    if raw.pointer("/training/seed").is_some() {
        return Err(CliError::usage("set `seed` at the top level, not under `training`"));
    }
    let mut cfg: RunConfig =
        serde_json::from_value(raw).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
    cfg.train = cfg.train.iter().map(resolve).collect();
    cfg.validation = cfg.validation.iter().map(resolve).collect();
    cfg.out = cfg.out.as_ref().map(resolve);

    cfg.seed = o.seed.or(cfg.seed);
    cfg.out = o.out.or(cfg.out);
    cfg.variant = o.variant.or(cfg.variant);
    cfg.modalities = o.modalities.or(cfg.modalities);
    cfg.classes = o.classes.unwrap_or(cfg.classes);
    cfg.f_width = o.f_width.or(cfg.f_width);
    let Some(seed) = cfg.seed else {
        return Err(CliError::usage("a seed is required (config `seed` or --seed)"));
    };
    cfg.training.seed = seed;
    for (name, missing) in [
        ("variant", cfg.variant.is_none()),
        ("modalities", cfg.modalities.is_none()),
        ("f_width", cfg.f_width.is_none()),
        ("out", cfg.out.is_none()),
    ] {
        if missing {
            return Err(CliError::usage(format!("`{name}` is required")));
        }
    }
    cfg.training.validate().map_err(|e| CliError::usage(e.to_string()))?;
    if cfg.train.is_empty() || cfg.validation.is_empty() {
        return Err(CliError::usage("`train` and `validation` must list data"));
    }
    Ok(cfg)
}

/// Expands files and directories of `.snvl` volumes, sorted by path.
fn volume_paths(entries: &[PathBuf]) -> Result<Vec<PathBuf>, String> {
    let mut out = Vec::new();
    for e in entries {
        if e.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(e)
                .map_err(|err| format!("{}: {err}", e.display()))?
                .filter_map(|d| d.ok().map(|d| d.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "snvl"))
                .collect();
            found.sort();
            if found.is_empty() {
                return Err(format!("{}: no .snvl files", e.display()));
            }
            out.extend(found);
        } else if e.is_file() {
            out.push(e.clone());
        } else {
            return Err(format!("{}: no such file or directory", e.display()));
        }
    }
    Ok(out)
}

fn load_named(paths: &[PathBuf]) -> CliResult<Vec<(String, Sample)>> {
    paths
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            Ok((name, read_volume(p)?))
        })
        .collect()
}

fn cmd_train(config: &Path, o: Overrides, stdout: &mut dyn Write) -> CliResult<()> {
    let cfg = load_run_config(config, o)?;
    let train_paths = volume_paths(&cfg.train).map_err(CliError::usage)?;
    let val_paths = volume_paths(&cfg.validation).map_err(CliError::usage)?;
    let arch = build_variant(
        cfg.variant.as_deref().expect("checked"),
        cfg.modalities.expect("checked"),
        cfg.classes,
        cfg.f_width.expect("checked"),
    )
    .map_err(|e| CliError::usage(e.to_string()))?;

    let mut train_set: Vec<Sample> = load_named(&train_paths)?.into_iter().map(|(_, s)| s).collect();
    let mut val_set: Vec<Sample> = load_named(&val_paths)?.into_iter().map(|(_, s)| s).collect();
    let standardizer = if cfg.standardize {
        let st = Standardizer::fit(&train_set)?;
        train_set = train_set.iter().map(|s| st.transform(s)).collect::<Result<_, _>>()?;
        val_set = val_set.iter().map(|s| st.transform(s)).collect::<Result<_, _>>()?;
        Some(st)
    } else {
        None
    };

    let out = cfg.out.clone().expect("checked");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let resolved = serde_json::to_string_pretty(&cfg).map_err(Error::from)?;
    let p = out.join("resolved_config.json");
    std::fs::write(&p, resolved + "\n").map_err(|e| Error::io(&p, e))?;

    let outcome = train(arch, &train_set, &val_set, &cfg.training)?;
    let mut ckpt = outcome.checkpoint;
    ckpt.standardizer = standardizer;
    let p = out.join("train_log.tsv");
    std::fs::write(&p, format_log(&outcome.log)).map_err(|e| Error::io(&p, e))?;
    save_checkpoint(&ckpt, out.join("checkpoint.snck"))?;
    writeln!(
        stdout,
        "trained {} steps; best validation soft Dice {:.6} at step {}",
        outcome.steps, ckpt.best_val, ckpt.step
    )
    .map_err(out_err)
}

fn cmd_eval(
    checkpoint: &Path,
    data: &[PathBuf],
    out: Option<&Path>,
    compare: Option<&Path>,
    one_sided: bool,
    stdout: &mut dyn Write,
) -> CliResult<()> {
    let paths = volume_paths(data).map_err(CliError::usage)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let samples = load_named(&paths)?;
    let report = evaluate(&Pipeline::from_checkpoint(&ckpt)?, &samples, &RegionMap::default())?;
    let tsv = report.to_tsv();
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("report.tsv");
            std::fs::write(&p, &tsv).map_err(|e| Error::io(&p, e))?;
            for line in tsv.lines().filter(|l| l.starts_with('#')) {
                writeln!(stdout, "{line}").map_err(out_err)?;
            }
        }
        None => stdout.write_all(tsv.as_bytes()).map_err(out_err)?,
    }
    if let Some(other) = compare {
        let text = std::fs::read_to_string(other).map_err(|e| Error::io(other, e))?;
        let other = DiceReport::from_tsv(&text)?;
        let s = compare_reports(&report, &other, one_sided)?;
        stdout.write_all(s.as_bytes()).map_err(out_err)?;
    }
    Ok(())
}

/// Wilcoxon lines `# wilcoxon region W p` pairing subjects by name.
pub fn compare_reports(a: &DiceReport, b: &DiceReport, one_sided: bool) -> Result<String, Error> {
    let index: BTreeMap<&str, usize> = b.subjects().iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    if a.subjects().len() != b.subjects().len() || a.subjects().iter().any(|s| !index.contains_key(s.as_str())) {
        return Err(Error::invalid("reports cover different subjects"));
    }
    let mut s = String::new();
    for region in a.regions() {
        let x = a.column(region).expect("own region");
        let y = b
            .column(region)
            .ok_or_else(|| Error::invalid(format!("compared report lacks region `{region}`")))?;
        let y: Vec<f64> = a.subjects().iter().map(|name| y[index[name.as_str()]]).collect();
        let w = wilcoxon_signed_rank(&x, &y)?;
        let p = if one_sided { w.p_one_sided } else { w.p_two_sided };
        let side = if one_sided { "one-sided" } else { "two-sided" };
        writeln!(s, "# wilcoxon\t{region}\tW={}\tp={p:.6}\t{side}", w.w).expect("string write");
    }
    Ok(s)
}
