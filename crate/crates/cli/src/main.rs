use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{Map, Value};

use docvit::gradsuite::{run_suite, TOLERANCE};
use docvit::harness::{run_pipeline, ExperimentConfig, PipelineReport, Stage};
use docvit::merge::MergeMethod;
use docvit::numkernel::Rng;
use docvit::patchstat::{
    analyze_corpus, compare_images, CorpusComparison, PatchStatConfig, PatchStatReport,
};
use docvit::synth;
use docvit::trace::write_histogram_csv;

/// Document-specialized vision encoders: pretraining, alignment, merging,
/// fusion and head finetuning on synthetic data.
#[derive(Parser, Debug)]
#[command(name = "docvit", version, about)]
struct Cli {
    /// JSON experiment config. Keys not given keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Let the config file override flags instead of the reverse.
    #[arg(long, global = true)]
    strict_config: bool,

    /// Same as `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Same as `--set output_dir=DIR`.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Override one config key, e.g. `--set mae.train.lr=3e-4` or
    /// `--set patchstat.bins=32`. Values parse as JSON, else as strings.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Masked-autoencoder pretraining; keeps only the encoder.
    PretrainMae,
    /// Per-patch standard deviation histograms and summaries.
    AnalyzePatches {
        /// Image directory (PNG/PNM, searched recursively). Give one or two.
        #[arg(long = "corpus", num_args = 1)]
        corpora: Vec<PathBuf>,
        /// Instead of directories, compare N synthetic document pages
        /// against N synthetic natural images.
        #[arg(long, conflicts_with = "corpora")]
        synthetic: Option<usize>,
        /// Side length of synthetic images.
        #[arg(long, default_value_t = 64)]
        synthetic_size: usize,
    },
    /// Trains one aligned encoder per configured decoder.
    Align {
        /// Pretrained encoder checkpoint.
        #[arg(long)]
        encoder: PathBuf,
    },
    /// Merges aligned encoders into one.
    Merge {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        /// none, average, fisher or learned. Same as `--set merge.method=M`.
        #[arg(long, value_parser = parse_method)]
        method: Option<MergeMethod>,
    },
    /// Head training on fused generalist and specialist features.
    FuseTrain {
        /// Specialist encoder checkpoint.
        #[arg(long)]
        encoder: PathBuf,
    },
    /// Head training on a single encoder.
    FinetuneHead {
        #[arg(long)]
        encoder: PathBuf,
    },
    /// Checks every op and training loss against central differences.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = TOLERANCE)]
        tolerance: f32,
    },
    /// Runs every configured stage.
    Pipeline,
}

fn parse_method(s: &str) -> Result<MergeMethod, String> {
    MergeMethod::from_str(s).map_err(|e| e.to_string())
}

fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, value) = raw
        .split_once('=')
        .with_context(|| format!("override `{raw}` is not KEY=VALUE"))?;
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.trim().to_string(), value))
}

fn merge_json(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, top) => *slot = top,
    }
}

/// Sets a dotted key. Every key but the leaf must already exist as an
/// object; the leaf must exist too unless its parent is a free-form map.
fn set_key(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (leaf, path) = parts.split_last().context("empty config key")?;
    let mut node = root;
    for p in path {
        node = node
            .get_mut(*p)
            .filter(|n| n.is_object())
            .with_context(|| format!("unknown config key `{key}`"))?;
    }
    let map = node
        .as_object_mut()
        .with_context(|| format!("unknown config key `{key}`"))?;
    let free_form = path.last().is_some_and(|p| *p == "resume");
    if !free_form && !map.contains_key(*leaf) {
        bail!("unknown config key `{key}`");
    }
    map.insert(leaf.to_string(), value);
    Ok(())
}

struct Settings {
    experiment: ExperimentConfig,
    patchstat: PatchStatConfig,
}

/// Defaults, then the config file and flags in precedence order.
fn resolve(cli: &Cli, extra: Vec<(String, Value)>) -> Result<Settings> {
    let mut root = serde_json::to_value(ExperimentConfig::default())?;
    root["patchstat"] = serde_json::to_value(PatchStatConfig::default())?;

    let file = match &cli.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let v: Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            if !v.is_object() {
                bail!("{} must hold a JSON object", path.display());
            }
            Some(v)
        }
        None => None,
    };

    let mut flags = Vec::new();
    if let Some(seed) = cli.seed {
        flags.push(("seed".to_string(), Value::from(seed)));
        flags.push(("patchstat.seed".to_string(), Value::from(seed)));
    }
    if let Some(dir) = &cli.output_dir {
        flags.push((
            "output_dir".to_string(),
            Value::String(dir.display().to_string()),
        ));
    }
    for raw in &cli.overrides {
        flags.push(parse_override(raw)?);
    }
    flags.extend(extra);

    let apply_flags = |root: &mut Value| -> Result<()> {
        for (k, v) in &flags {
            set_key(root, k, v.clone())?;
        }
        Ok(())
    };
    if cli.strict_config {
        apply_flags(&mut root)?;
        if let Some(f) = file {
            merge_json(&mut root, f);
        }
    } else {
        if let Some(f) = file {
            merge_json(&mut root, f);
        }
        apply_flags(&mut root)?;
    }

    let patchstat = match root.as_object_mut().and_then(|m| m.remove("patchstat")) {
        Some(v) => serde_json::from_value(v).context("invalid `patchstat` section")?,
        None => PatchStatConfig::default(),
    };
    let experiment = serde_json::from_value(root).context("invalid experiment config")?;
    Ok(Settings {
        experiment,
        patchstat,
    })
}

fn print_report(report: &PipelineReport, out: &Path) -> Result<()> {
    for stage in &report.manifest.stages {
        eprintln!("{:<6} {}", stage.name, stage.status);
    }
    eprintln!(
        "{} checkpoint(s) and manifest in {}",
        report.checkpoints.len(),
        out.display()
    );
    let mut summary = Map::new();
    if let Some(path) = &report.manifest.merge_path {
        summary.insert("merge_path".into(), Value::String(path.clone()));
    }
    summary.insert(
        "metrics".into(),
        serde_json::to_value(&report.manifest.metrics)?,
    );
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn run_stages(
    mut cfg: ExperimentConfig,
    stages: Vec<Stage>,
    resume: Vec<(String, PathBuf)>,
) -> Result<()> {
    cfg.stages = stages;
    cfg.resume.extend(resume);
    let report = run_pipeline(&cfg)?;
    print_report(&report, &cfg.output_dir)
}

fn write_corpus(out: &Path, name: &str, report: &PatchStatReport) -> Result<()> {
    write_histogram_csv(
        &out.join(format!("{name}_histogram.csv")),
        &report.histogram,
    )?;
    let mut summary = serde_json::to_value(report.summary)?;
    summary["images"] = Value::from(report.samples.len());
    summary["patches"] = Value::from(report.samples.iter().map(Vec::len).sum::<usize>());
    summary["histogram_mode"] = Value::from(report.histogram.mode());
    if let Some(note) = &report.note {
        summary["note"] = Value::String(note.clone());
    }
    let path = out.join(format!("{name}_summary.json"));
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    println!(
        "{name}: mean {:.4}, median {:.4}, {:.1}% below {}",
        report.summary.mean,
        report.summary.median,
        100.0 * report.summary.fraction_below,
        report.summary.threshold
    );
    Ok(())
}

fn write_comparison(out: &Path, names: [&str; 2], cmp: &CorpusComparison) -> Result<()> {
    write_corpus(out, names[0], &cmp.a)?;
    write_corpus(out, names[1], &cmp.b)?;
    let v = serde_json::json!({
        "a": names[0],
        "b": names[1],
        "mean_a": cmp.mean_a,
        "mean_b": cmp.mean_b,
        "ratio_b_over_a": cmp.ratio,
    });
    fs::write(
        out.join("comparison.json"),
        serde_json::to_string_pretty(&v)? + "\n",
    )?;
    println!("mean ratio {} / {}: {:.3}", names[1], names[0], cmp.ratio);
    Ok(())
}

fn corpus_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .filter(|n| !n.is_empty())
        .unwrap_or_else(|| "corpus".into())
}

fn analyze_patches(
    s: &Settings,
    corpora: &[PathBuf],
    synthetic: Option<usize>,
    size: usize,
) -> Result<()> {
    let out = &s.experiment.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let cfg = &s.patchstat;
    match (synthetic, corpora) {
        (Some(n), _) => {
            let root = Rng::new(cfg.seed);
            let mut rng = root.fork("documents");
            let docs: Vec<_> = (0..n)
                .map(|_| synth::document_image(size, &mut rng))
                .collect();
            let mut rng = root.fork("natural");
            let natural: Vec<_> = (0..n)
                .map(|_| synth::natural_image(size, &mut rng))
                .collect();
            write_comparison(
                out,
                ["documents", "natural"],
                &compare_images(&docs, &natural, cfg)?,
            )
        }
        (None, [one]) => write_corpus(
            out,
            &corpus_name(one),
            &analyze_corpus(one, cfg, "corpus-a")?,
        ),
        (None, [a, b]) => {
            let (mut na, mut nb) = (corpus_name(a), corpus_name(b));
            if na == nb {
                na.push_str("_a");
                nb.push_str("_b");
            }
            let cmp = CorpusComparison::new(
                analyze_corpus(a, cfg, "corpus-a")?,
                analyze_corpus(b, cfg, "corpus-b")?,
            );
            write_comparison(out, [&na, &nb], &cmp)
        }
        _ => bail!("give one or two --corpus directories, or --synthetic N"),
    }
}

fn grad_check(instances: usize, tolerance: f32) -> Result<bool> {
    let results = run_suite(instances)?;
    let mut ok = true;
    for r in &results {
        let pass = r.worst < tolerance;
        ok &= pass;
        let kind = if r.composite { "loss" } else { "op" };
        println!(
            "{} {kind:<4} {:<24} {:.2e}",
            if pass { "ok  " } else { "FAIL" },
            r.name,
            r.worst
        );
    }
    let worst = results.iter().map(|r| r.worst).fold(0.0f32, f32::max);
    println!(
        "{} cases x {instances}, worst {worst:.2e}, tolerance {tolerance:.0e}",
        results.len()
    );
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    let extra = match &cli.command {
        Command::Merge {
            method: Some(m), ..
        } => vec![("merge.method".to_string(), Value::String(m.as_str().into()))],
        _ => Vec::new(),
    };
    let settings = resolve(&cli, extra)?;
    let cfg = settings.experiment.clone();
    match &cli.command {
        Command::PretrainMae => run_stages(cfg, vec![Stage::Mae], vec![])?,
        Command::AnalyzePatches {
            corpora,
            synthetic,
            synthetic_size,
        } => analyze_patches(&settings, corpora, *synthetic, *synthetic_size)?,
        Command::Align { encoder } => run_stages(
            cfg,
            vec![Stage::Align],
            vec![("mae".into(), encoder.clone())],
        )?,
        Command::Merge { checkpoints, .. } => {
            let mut cfg = cfg;
            let decoder = cfg.align.decoders.first().cloned().unwrap_or_default();
            cfg.align.decoders = vec![decoder; checkpoints.len()];
            let resume = checkpoints
                .iter()
                .enumerate()
                .map(|(i, p)| (format!("align_{i}"), p.clone()))
                .collect();
            run_stages(cfg, vec![Stage::Merge], resume)?
        }
        Command::FuseTrain { encoder } => {
            let mut cfg = cfg;
            if cfg.generalist.is_none() {
                cfg.generalist = ExperimentConfig::default().generalist;
            }
            run_stages(
                cfg,
                vec![Stage::Head],
                vec![("merged".into(), encoder.clone())],
            )?
        }
        Command::FinetuneHead { encoder } => {
            let mut cfg = cfg;
            cfg.generalist = None;
            run_stages(
                cfg,
                vec![Stage::Head],
                vec![("merged".into(), encoder.clone())],
            )?
        }
        Command::GradCheck {
            instances,
            tolerance,
        } => return grad_check(*instances, *tolerance),
        Command::Pipeline => {
            let report = run_pipeline(&cfg)?;
            print_report(&report, &cfg.output_dir)?
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("docvit").chain(args.iter().copied())).unwrap()
    }

    fn config_file(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn flags_override_the_config_file() {
        let f = config_file(r#"{"seed": 5, "mae": {"images": 12}}"#);
        let path = f.path().to_str().unwrap();
        let s = resolve(&cli(&["--config", path, "--seed", "9", "pipeline"]), vec![]).unwrap();
        assert_eq!(s.experiment.seed, 9);
        assert_eq!(s.experiment.mae.images, 12);
    }

    #[test]
    fn strict_config_lets_the_file_win() {
        let f = config_file(r#"{"seed": 5}"#);
        let path = f.path().to_str().unwrap();
        let args = [
            "--config",
            path,
            "--strict-config",
            "--seed",
            "9",
            "--set",
            "mae.images=3",
            "pipeline",
        ];
        let s = resolve(&cli(&args), vec![]).unwrap();
        assert_eq!(s.experiment.seed, 5);
        assert_eq!(s.experiment.mae.images, 3);
    }

    #[test]
    fn set_reaches_nested_and_patchstat_keys() {
        let args = [
            "--set",
            "merge.method=fisher",
            "--set",
            "patchstat.bins=8",
            "--set",
            "mae.train.lr=0.5",
            "pipeline",
        ];
        let s = resolve(&cli(&args), vec![]).unwrap();
        assert_eq!(s.experiment.merge.method, MergeMethod::Fisher);
        assert_eq!(s.patchstat.bins, 8);
        assert_eq!(s.experiment.mae.train.lr, 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(resolve(&cli(&["--set", "mae.nope=1", "pipeline"]), vec![]).is_err());
        assert!(resolve(&cli(&["--set", "seed", "pipeline"]), vec![]).is_err());
    }

    #[test]
    fn merge_takes_paths_and_a_method() {
        let c = cli(&["merge", "a.ckpt", "b.ckpt", "--method", "average"]);
        match c.command {
            Command::Merge {
                checkpoints,
                method,
            } => {
                assert_eq!(checkpoints.len(), 2);
                assert_eq!(method, Some(MergeMethod::Average));
            }
            other => panic!("{other:?}"),
        }
        assert!(Cli::try_parse_from(["docvit", "merge", "a.ckpt", "--method", "median"]).is_err());
    }
}
