use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use urnet::config::RunConfig;
use urnet::data::{load_dataset, parse_modalities, save_dataset, Dataset, DatasetManifest, RegionMap};
use urnet::harness::{render_svg, sweep, trace_csv, train_scenario, Scenario, SweepReport};
use urnet::model::{load_checkpoint, save_checkpoint};
use urnet::Error;

#[derive(Parser)]
#[command(name = "urnet", version, about = "Segmentation with missing modalities on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        name: String,
        /// Comma-separated subset of F,T1,T1c,T2.
        #[arg(long, default_value = "F,T1,T1c,T2")]
        modalities: String,
        #[arg(long, default_value_t = 300)]
        samples: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of samples in the training split.
        #[arg(long)]
        train_fraction: Option<f64>,
        #[arg(long)]
        force: bool,
    },
    /// Train one scenario and write a checkpoint and loss trace.
    Train {
        /// baseline, baseline-md, urn-md or urn-md-pretrained.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        data: PathBuf,
        /// Pre-training dataset(s), pooled; required by urn-md-pretrained.
        #[arg(long = "pretrain-data")]
        pretrain_data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// File of key=value settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// key=value override, applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on every modality combination.
    Sweep {
        /// Checkpoint directory (or a training run directory containing one).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which samples to evaluate: val, train or all.
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        force: bool,
    },
    /// Render one or more sweep reports as a grouped bar chart.
    Plot {
        #[arg(long = "report", required = true)]
        reports: Vec<PathBuf>,
        /// Legend labels, one per report (defaults to file stems).
        #[arg(long = "label")]
        labels: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "WT")]
        region: String,
        #[arg(long)]
        force: bool,
    },
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Lib(e) => match e {
                Error::Config(_) | Error::InvalidArgument { .. } | Error::Shape { .. } => 2,
                Error::NonFinite { .. } | Error::Diverged { .. } => 3,
                Error::Io { .. } | Error::Format { .. } | Error::Version { .. } => 4,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::Lib(e) => e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn io(path: &Path, e: std::io::Error) -> Failure {
    Failure::Lib(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Output directory built under a temporary name and moved into place on success.
struct Staging {
    tmp: PathBuf,
    out: PathBuf,
}

impl Staging {
    fn begin(out: &Path, force: bool) -> CliResult<Self> {
        if out.exists() && !force {
            return Err(Failure::Usage(format!(
                "{} already exists; pass --force to replace it",
                out.display()
            )));
        }
        let name = out
            .file_name()
            .ok_or_else(|| Failure::Usage(format!("bad output path {}", out.display())))?
            .to_string_lossy();
        let tmp = out.with_file_name(format!(".{name}.partial"));
        if tmp.exists() {
            remove(&tmp)?;
        }
        if let Some(parent) = tmp.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
        }
        Ok(Staging {
            tmp,
            out: out.to_path_buf(),
        })
    }

    fn commit(self) -> CliResult<()> {
        if self.out.exists() {
            remove(&self.out)?;
        }
        fs::rename(&self.tmp, &self.out).map_err(|e| io(&self.out, e))
    }
}

fn remove(path: &Path) -> CliResult<()> {
    let r = if path.is_dir() {
        fs::remove_dir_all(path)
    } else {
        fs::remove_file(path)
    };
    r.map_err(|e| io(path, e))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io(path, e))
}

fn gen_data(
    out: &Path,
    name: &str,
    modalities: &str,
    samples: usize,
    size: usize,
    seed: u64,
    train_fraction: Option<f64>,
    force: bool,
) -> CliResult<()> {
    let mods = parse_modalities(modalities).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut manifest = DatasetManifest::new(name, mods, samples, size, seed).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(f) = train_fraction {
        manifest.train_fraction = f;
        manifest.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let ds = Dataset::generate(manifest)?;
    let stage = Staging::begin(out, force)?;
    save_dataset(&ds, &stage.tmp)?;
    stage.commit()?;
    let m = &ds.manifest;
    let (train, val) = m.split();
    println!(
        "{}: {} samples of {}x{}, modalities {}, cohort {:?}, seed {}, split {}/{}",
        m.name,
        m.samples,
        m.height,
        m.width,
        m.modalities.join(","),
        m.cohort,
        m.seed,
        train.len(),
        val.len()
    );
    Ok(())
}

fn train(
    scenario: &str,
    data: &Path,
    pretrain_data: &[PathBuf],
    out: &Path,
    seed: Option<u64>,
    config: Option<&Path>,
    overrides: &[String],
    force: bool,
) -> CliResult<()> {
    let mut cfg = RunConfig::default();
    let mut set_keys = Vec::new();
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
        set_keys.extend(cfg.apply_text(&text)?);
    }
    for o in overrides {
        let (k, v) = RunConfig::split_assignment(o)?;
        cfg.set(k, v)?;
        set_keys.push(k.to_string());
    }
    cfg.train.scenario = scenario.parse()?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let sc = cfg.train.scenario;
    for key in &set_keys {
        let ignored = match key.as_str() {
            "theta_seg" => sc == Scenario::Baseline,
            "theta_pre" | "lr_pre" | "pretrain_max_epochs" | "pretrain_patience" | "pretrain_tolerance" => {
                sc != Scenario::UrnMdPretrained
            }
            "rep_channels" | "decoder_blocks" | "fusion" | "variance_weight" => !sc.is_urn(),
            _ => false,
        };
        if ignored {
            eprintln!("warning: {key} has no effect for scenario {sc}");
        }
    }
    if sc == Scenario::UrnMdPretrained {
        if pretrain_data.is_empty() || pretrain_data.len() > 2 {
            return Err(Failure::Usage("urn-md-pretrained needs one or two --pretrain-data paths".into()));
        }
    } else if !pretrain_data.is_empty() {
        eprintln!("warning: --pretrain-data has no effect for scenario {sc}");
    }

    let seg = load_dataset(data)?;
    let pre = if sc == Scenario::UrnMdPretrained {
        pretrain_data.iter().map(|p| load_dataset(p)).collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };
    let stage = Staging::begin(out, force)?;
    fs::create_dir_all(&stage.tmp).map_err(|e| io(&stage.tmp, e))?;
    write(&stage.tmp.join("config.txt"), &cfg.to_text())?;
    let pre_refs: Vec<&Dataset> = pre.iter().collect();
    match train_scenario(&cfg.train, &cfg.model, &seg, &pre_refs) {
        Ok(trained) => {
            save_checkpoint(&trained.model, &stage.tmp.join("checkpoint"))?;
            write(&stage.tmp.join("trace.csv"), &trace_csv(&trained.trace))?;
            stage.commit()?;
            let last = trained.trace.last().map(|r| r.loss).unwrap_or(f64::NAN);
            println!(
                "{sc}: {} steps, final batch loss {last:.5}{}",
                trained.trace.iter().filter(|r| !r.validation).count(),
                if trained.pretrain_epochs > 0 {
                    format!(", {} pre-training epochs", trained.pretrain_epochs)
                } else {
                    String::new()
                }
            );
            Ok(())
        }
        Err(e @ (Error::Diverged { .. } | Error::NonFinite { .. })) => {
            write(&stage.tmp.join("diverged.txt"), &format!("{e}\n"))?;
            stage.commit()?;
            Err(Failure::Lib(e))
        }
        Err(e) => Err(e.into()),
    }
}

fn checkpoint_dir(model: &Path) -> PathBuf {
    let nested = model.join("checkpoint");
    if nested.join("checkpoint.txt").exists() {
        nested
    } else {
        model.to_path_buf()
    }
}

fn run_sweep(model: &Path, data: &Path, out: &Path, split: &str, force: bool) -> CliResult<()> {
    let ds = load_dataset(data)?;
    let (train, val) = ds.manifest.split();
    let samples = match split {
        "val" => val,
        "train" => train,
        "all" => (0..ds.len()).collect(),
        other => return Err(Failure::Usage(format!("unknown split {other:?} (val, train or all)"))),
    };
    let model = load_checkpoint(&checkpoint_dir(model))?;
    let report = sweep(&model, &ds, &samples, &RegionMap::default())?;
    let label = model.kind().to_string();
    let svg = render_svg(&[(label, report.clone())], "WT", "dice", &model.config().modalities)?;
    let stage = Staging::begin(out, force)?;
    fs::create_dir_all(&stage.tmp).map_err(|e| io(&stage.tmp, e))?;
    write(&stage.tmp.join("report.csv"), &report.to_csv())?;
    write(&stage.tmp.join("report.svg"), &svg)?;
    stage.commit()?;
    println!("{} patterns evaluated on {} samples", report.patterns().len(), samples.len());
    for p in report.patterns() {
        if let Some(v) = report.value(&p, "WT", "dice") {
            println!("  {p}  WT dice {v:.4}");
        }
    }
    Ok(())
}

fn plot(reports: &[PathBuf], labels: &[String], out: &Path, region: &str, force: bool) -> CliResult<()> {
    if !labels.is_empty() && labels.len() != reports.len() {
        return Err(Failure::Usage(format!("{} labels given for {} reports", labels.len(), reports.len())));
    }
    let mut loaded = Vec::new();
    for (i, path) in reports.iter().enumerate() {
        let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
        let report = SweepReport::from_csv(&text, path).map_err(|e| Failure::Usage(e.to_string()))?;
        if report.rows.is_empty() {
            return Err(Failure::Usage(format!("{} has no rows", path.display())));
        }
        let label = labels.get(i).cloned().unwrap_or_else(|| {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            if stem == "report" {
                path.parent()
                    .and_then(|p| p.file_name())
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or(stem)
            } else {
                stem
            }
        });
        loaded.push((label, report));
    }
    let width = loaded[0].1.patterns()[0].len();
    let names: Vec<String> = if width == urnet::data::MODALITIES.len() {
        urnet::data::MODALITIES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..width).map(|i| format!("m{i}")).collect()
    };
    let svg = render_svg(&loaded, region, "dice", &names)?;
    let stage = Staging::begin(out, force)?;
    write(&stage.tmp, &svg)?;
    stage.commit()?;
    println!("{} report(s), {} groups -> {}", loaded.len(), loaded[0].1.patterns().len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData {
            out,
            name,
            modalities,
            samples,
            size,
            seed,
            train_fraction,
            force,
        } => gen_data(&out, &name, &modalities, samples, size, seed, train_fraction, force),
        Command::Train {
            scenario,
            data,
            pretrain_data,
            out,
            seed,
            config,
            overrides,
            force,
        } => train(&scenario, &data, &pretrain_data, &out, seed, config.as_deref(), &overrides, force),
        Command::Sweep {
            model,
            data,
            out,
            split,
            force,
        } => run_sweep(&model, &data, &out, &split, force),
        Command::Plot {
            reports,
            labels,
            out,
            region,
            force,
        } => plot(&reports, &labels, &out, &region, force),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
