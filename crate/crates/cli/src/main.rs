use std::fmt;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use pre_core::evalkit::{confusion, default_palette, predict, read_palette, render_map, Protocol};
use pre_core::segmodel::ModelState;
use pre_core::synthdomain::{
    build_preset, load_dataset, load_target_dataset, read_mask, write_dataset, write_mask, write_raster, DomainSample, Preset,
    PresetOptions, Role,
};
use pre_core::trainer::{
    adapt, pretrain_source, write_run, AbortReport, ExpansionEvent, Mode, SampleSet, TrainConfig, TrainObserver,
};
use pre_core::util::{atomic_write, configure_threads};
use pre_core::verify::{run_all, VerifyOptions};

const PRECEDENCE: &str = "Settings resolve as: built-in defaults, then the --config file, then flags. \
Config files hold one `key = value` per line; unknown keys are rejected. \
PRE_THREADS caps the worker count.\n\n\
Exit codes: 0 ok, 1 verification failure, 2 configuration or flag error, 3 I/O or \
corrupt file, 4 numerical abort, 5 missing checkpoint.";

#[derive(Parser)]
#[command(name = "pre", version, about = "Prototype-guided pseudo-label adaptation on synthetic rasters", after_help = PRECEDENCE)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Aligned,
    Shifted,
    Remapped,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "s_only")]
    SOnly,
    #[value(name = "t_only")]
    TOnly,
    #[value(name = "t_pre")]
    TPre,
    #[value(name = "st_pre")]
    StPre,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum ProtocolArg {
    Sparse,
    Dense,
    Both,
}

#[derive(clap::Args)]
struct Overrides {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `epochs` (adapt) or `pretrain_epochs` (pretrain).
    #[arg(long)]
    epochs: Option<usize>,
    /// Any config key, e.g. `--set batch_size=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-domain dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        preset: PresetArg,
        /// Number of target classes.
        #[arg(long)]
        k: Option<usize>,
        /// Image size as HxW.
        #[arg(long)]
        size: Option<String>,
        #[arg(long)]
        bands: Option<usize>,
        /// Training images per domain.
        #[arg(long)]
        train: Option<usize>,
        /// Test images per domain.
        #[arg(long)]
        test: Option<usize>,
    },
    /// Train on the source domain and write a model checkpoint.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Adapt a pretrained model to the target domain.
    Adapt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Write the expanded target labels of every epoch under OUT/pseudo.
        #[arg(long)]
        dump_pseudo: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a model on the target test set.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Metric CSV; with `--protocol both`, `_sparse` and `_dense` are
        /// appended to the file stem.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        protocol: ProtocolArg,
        /// Also write each prediction as a label mask into this directory.
        #[arg(long)]
        pred_dir: Option<PathBuf>,
    },
    /// Render a label mask as a binary PPM.
    Render {
        #[arg(long)]
        mask: PathBuf,
        /// One `r g b` line per class; defaults to a built-in palette.
        #[arg(long)]
        palette: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in gradient, equation and format checks.
    Verify {
        /// Random instances per gradient property.
        #[arg(long, default_value_t = 50)]
        fd_instances: usize,
        #[arg(long, hide = true)]
        inject_gradient_bug: bool,
    },
}

#[derive(Debug)]
struct MissingCheckpoint(PathBuf);

impl fmt::Display for MissingCheckpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "checkpoint {} does not exist", self.0.display())
    }
}

impl std::error::Error for MissingCheckpoint {}

#[derive(Debug)]
struct VerifyFailed(usize);

impl fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} properties failed", self.0)
    }
}

impl std::error::Error for VerifyFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use pre_core::Error as E;
    for cause in err.chain() {
        if cause.is::<MissingCheckpoint>() {
            return 5;
        }
        if cause.is::<VerifyFailed>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::NumericalAbort(_) | E::NonFinite(_) => 4,
                E::Io(_) | E::BadMagic { .. } | E::UnsupportedVersion(_) | E::Truncated(_) | E::DimensionOverflow(_) => 3,
                E::StaleCache(_) => 1,
                _ => 2,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    2
}

/// Exclusive claim on an output location, released on drop.
struct OutputLock(PathBuf);

impl OutputLock {
    fn for_dir(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Self::acquire(dir.join(".pre.lock"))
    }

    fn for_file(file: &Path) -> anyhow::Result<Self> {
        let name = file.file_name().ok_or_else(|| anyhow!("{} is not a file path", file.display()))?;
        let parent = file.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        Self::acquire(parent.join(format!(".{}.lock", name.to_string_lossy())))
    }

    fn acquire(path: PathBuf) -> anyhow::Result<Self> {
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("output is locked by another run (remove {} if stale)", path.display()))?;
        Ok(Self(path))
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn resolve_config(o: &Overrides, epochs_key: &str) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &o.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(e) = o.epochs {
        cfg.set(epochs_key, &e.to_string())?;
    }
    for kv in &o.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| pre_core::Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> anyhow::Result<ModelState> {
    if !path.is_file() {
        return Err(MissingCheckpoint(path.to_path_buf()).into());
    }
    Ok(ModelState::load(path).with_context(|| format!("loading {}", path.display()))?)
}

fn parse_size(s: &str) -> anyhow::Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| pre_core::Error::Config(format!("--size expects HxW, got `{s}`")))?;
    let parse = |v: &str| v.parse::<usize>().map_err(|_| pre_core::Error::Config(format!("bad size `{s}`")));
    Ok((parse(h)?, parse(w)?))
}

/// Writes expanded labels per epoch and the offending batch on abort.
struct CliObserver<'a> {
    out: &'a Path,
    dump_pseudo: bool,
    target: &'a [DomainSample],
    source: &'a [DomainSample],
    error: Option<anyhow::Error>,
}

impl CliObserver<'_> {
    fn record(&mut self, r: anyhow::Result<()>) {
        if let (Err(e), None) = (r, &self.error) {
            self.error = Some(e);
        }
    }
}

impl TrainObserver for CliObserver<'_> {
    fn on_expansion(&mut self, e: &ExpansionEvent<'_>) {
        if self.dump_pseudo {
            let path = self.out.join(format!("pseudo/epoch_{:03}/target_{:03}.prel", e.epoch, e.image));
            let r = write_mask(&path, &e.result.expanded_mask).map_err(Into::into);
            self.record(r);
        }
    }

    fn on_abort(&mut self, a: &AbortReport<'_>) {
        let dir = self.out.join("abort");
        let r = (|| -> anyhow::Result<()> {
            let report = format!(
                "epoch = {}\niteration = {}\ntarget_images = {:?}\nsource_images = {:?}\nloss = {:?}\n",
                a.epoch, a.iteration, a.target_images, a.source_images, a.breakdown
            );
            atomic_write(&dir.join("report.txt"), report.as_bytes())?;
            for (tag, set, idx) in [("target", self.target, a.target_images), ("source", self.source, a.source_images)] {
                for &i in idx {
                    write_raster(&dir.join(format!("{tag}_{i:03}.prer")), &set[i].raster)?;
                    write_mask(&dir.join(format!("{tag}_{i:03}.prel")), &set[i].labels)?;
                }
            }
            Ok(())
        })();
        self.record(r);
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}_{suffix}{ext}"))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = configure_threads()?;
    log::debug!("using {threads} worker threads");
    match cli.command {
        Command::Gen { out, seed, preset, k, size, bands, train, test } => {
            let mut opts = PresetOptions::default();
            if let Some(k) = k {
                opts.num_classes = k;
            }
            if let Some(s) = size {
                (opts.height, opts.width) = parse_size(&s)?;
            }
            if let Some(b) = bands {
                opts.bands = b;
            }
            if let Some(n) = train {
                opts.train_per_domain = n;
            }
            if let Some(n) = test {
                opts.test_per_domain = n;
            }
            let preset = match preset {
                PresetArg::Aligned => Preset::Aligned,
                PresetArg::Shifted => Preset::Shifted,
                PresetArg::Remapped => Preset::Remapped,
            };
            let _lock = OutputLock::for_dir(&out)?;
            let ds = build_preset(preset, seed, &opts)?;
            write_dataset(&out, &ds)?;
            println!("dataset written to {}", out.display());
        }
        Command::Pretrain { data, out, overrides } => {
            let cfg = resolve_config(&overrides, "pretrain_epochs")?;
            let ds = load_dataset(&data).with_context(|| format!("loading dataset {}", data.display()))?;
            let source = ds.aligned_source(Role::Train)?;
            let _lock = OutputLock::for_file(&out)?;
            let (model, _) = pretrain_source(&cfg, &source, ds.num_classes)?;
            model.save(&out)?;
            println!("model checkpoint: {}", out.display());
        }
        Command::Adapt { data, pretrained, out, mode, dump_pseudo, overrides } => {
            let mut cfg = resolve_config(&overrides, "epochs")?;
            if let Some(m) = mode {
                cfg.mode = match m {
                    ModeArg::SOnly => Mode::SOnly,
                    ModeArg::TOnly => Mode::TOnly,
                    ModeArg::TPre => Mode::TPre,
                    ModeArg::StPre => Mode::StPre,
                };
            }
            let model = load_checkpoint(&pretrained)?;
            let load = if cfg.mode.uses_source() { load_dataset } else { load_target_dataset };
            let ds = load(&data).with_context(|| format!("loading dataset {}", data.display()))?;
            let source = if cfg.mode.uses_source() { ds.aligned_source(Role::Train)? } else { Vec::new() };
            let _lock = OutputLock::for_dir(&out)?;
            let mut observer =
                CliObserver { out: &out, dump_pseudo, target: &ds.target_train, source: &source, error: None };
            let source_set: Option<&dyn SampleSet> = cfg.mode.uses_source().then_some(&source as &dyn SampleSet);
            let outcome = adapt(&cfg, &model, source_set, &ds.target_train, Some(&ds.target_test), &mut observer);
            if let Some(e) = observer.error.take() {
                return Err(e.context("writing diagnostics"));
            }
            let outcome = outcome?;
            let art = write_run(&out, &cfg, &outcome)?;
            println!("model checkpoint: {}", art.model.display());
            if let Some(p) = &art.prototypes {
                println!("prototype checkpoint: {}", p.display());
            }
            println!("loss log: {}", art.losses.display());
            println!("metric log: {}", art.metrics.display());
            println!("config: {}", art.config.display());
        }
        Command::Eval { data, model, out, protocol, pred_dir } => {
            let model = load_checkpoint(&model)?;
            let ds = load_target_dataset(&data).with_context(|| format!("loading dataset {}", data.display()))?;
            if ds.num_classes != model.config.num_classes {
                return Err(pre_core::Error::Config(format!(
                    "model has {} classes, dataset {}",
                    model.config.num_classes, ds.num_classes
                ))
                .into());
            }
            let _lock = OutputLock::for_file(&out)?;
            let preds = ds.target_test.iter().map(|s| predict(&model, s)).collect::<pre_core::Result<Vec<_>>>()?;
            if let Some(dir) = &pred_dir {
                for (i, p) in preds.iter().enumerate() {
                    write_mask(&dir.join(format!("target_test_{i:03}.prel")), p)?;
                }
            }
            let k = ds.num_classes;
            let jobs: Vec<(Protocol, PathBuf)> = match protocol {
                ProtocolArg::Sparse => vec![(Protocol::Sparse, out.clone())],
                ProtocolArg::Dense => vec![(Protocol::Dense, out.clone())],
                ProtocolArg::Both => vec![
                    (Protocol::Sparse, with_suffix(&out, "sparse")),
                    (Protocol::Dense, with_suffix(&out, "dense")),
                ],
            };
            for (p, path) in jobs {
                let report = confusion(&ds.target_test, &preds, k, p)?.report()?;
                report.write_csv(&path)?;
                println!(
                    "{:?}: OA {:.4} mF1 {:.4} mIoU {:.4} -> {}",
                    p,
                    report.oa,
                    report.mf1,
                    report.miou,
                    path.display()
                );
            }
        }
        Command::Render { mask, palette, out } => {
            let m = read_mask(&mask).with_context(|| format!("reading {}", mask.display()))?;
            let pal = match palette {
                Some(p) => read_palette(&p)?,
                None => {
                    let k = m.classes.iter().filter(|&&c| c != pre_core::synthdomain::IGNORE).max().map_or(1, |&c| c as usize + 1);
                    default_palette(k)
                }
            };
            let _lock = OutputLock::for_file(&out)?;
            render_map(&m, &pal, &out)?;
            println!("class map: {}", out.display());
        }
        Command::Verify { fd_instances, inject_gradient_bug } => {
            let results = run_all(VerifyOptions { fd_instances, inject_gradient_bug });
            let mut failed = 0;
            for r in &results {
                if r.passed {
                    println!("PASS {}", r.name);
                } else {
                    failed += 1;
                    println!("FAIL {}: {}", r.name, r.detail);
                }
            }
            println!("{} of {} properties passed", results.len() - failed, results.len());
            if failed > 0 {
                return Err(VerifyFailed(failed).into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
