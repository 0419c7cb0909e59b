use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use cpga_core::data::{load_image, save_image, scan_dataset, SampleSource, Split};
use cpga_core::priors::{bright_channel_patch, build_prior_stack, dark_channel_patch, PatchSpec, PRIOR_PLANES};
use cpga_core::trainer::{evaluate, run_stage, Checkpoint, Stage, StageInputs, TrainConfig};
use cpga_core::{CpgaNet, Error, Tensor};

/// Low-light image enhancement with channel priors and gamma correction.
#[derive(Parser, Debug)]
#[command(name = "cpga", version)]
struct Cli {
    /// Worker threads (default: CPGA_THREADS, then all logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Enhance one PNG.
    Enhance(EnhanceArgs),
    /// Write the dark, bright and luma prior planes of a PNG.
    Priors(PriorsArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Score a checkpoint (or the raw inputs) on a paired dataset.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run at reduced resolution behind the guided filter.
    #[arg(long)]
    dgf: bool,
    /// Also write R, R^gamma, t, A, the intersection and gamma here.
    #[arg(long, value_name = "DIR")]
    dump_components: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PriorsArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
    /// Window radius for the dark and bright planes; 0 is per pixel.
    #[arg(long, default_value_t = 0)]
    patch_radius: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    stage: Stage,
    /// JSON file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training pairs (`low/` and `high/`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out pairs used to keep the best checkpoint.
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Checkpoint to start from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Teacher checkpoint for the kd stage.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Where to write the resulting checkpoint.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train with the L1 term only.
    #[arg(long)]
    no_perceptual: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, required_unless_present = "raw_input", conflicts_with = "raw_input")]
    checkpoint: Option<PathBuf>,
    /// Score the unprocessed low-light inputs instead of a model.
    #[arg(long)]
    raw_input: bool,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    dgf: bool,
    /// JSON report path; the text table always goes to stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Failure of a subcommand, split by exit code.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult = Result<(), Failure>;

fn load_net(path: &Path, dgf: bool) -> Result<CpgaNet, Error> {
    let mut net = Checkpoint::load(path)?.to_net()?;
    if dgf {
        net.set_dgf(true);
    }
    Ok(net)
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn enhance(args: EnhanceArgs) -> CliResult {
    let net = load_net(&args.checkpoint, args.dgf)?;
    let img = load_image(&args.input)?;
    let out = net.enhance(&img)?;
    save_image(&out.r_hat, &args.output)?;
    if let Some(dir) = args.dump_components {
        create_dir(&dir)?;
        let brighten = |t: &Tensor| t.map(|v| (v * 1.4).clamp(0.0, 1.0));
        let unit = |t: &Tensor| t.map(|v| v.clamp(0.0, 1.0));
        save_image(&unit(&out.r), &dir.join("r.png"))?;
        save_image(&brighten(&out.t), &dir.join("t.png"))?;
        save_image(&brighten(&out.a_tilde), &dir.join("a_tilde.png"))?;
        if let Some(rg) = &out.r_gamma {
            save_image(&unit(rg), &dir.join("r_gamma.png"))?;
        }
        if let Some(inter) = &out.intersection {
            save_image(&unit(inter), &dir.join("intersection.png"))?;
        }
        if let Some(g) = out.gamma {
            let path = dir.join("gamma.txt");
            std::fs::write(&path, format!("{g}\n")).map_err(|e| Error::Io { path, source: e })?;
        }
    }
    log::info!("wrote {}", args.output.display());
    Ok(())
}

fn priors(args: PriorsArgs) -> CliResult {
    let img = load_image(&args.input)?;
    let stack = build_prior_stack(&img)?;
    let spec = PatchSpec {
        radius: args.patch_radius,
    };
    let planes = [
        dark_channel_patch(&img, spec)?,
        bright_channel_patch(&img, spec)?,
        stack.luma(),
    ];
    create_dir(&args.output_dir)?;
    for (name, plane) in PRIOR_PLANES.iter().zip(&planes) {
        save_image(plane, &args.output_dir.join(format!("{name}.png")))?;
    }
    Ok(())
}

/// Reads the config file, fills unset fields from the stage defaults and
/// applies flag overrides.
fn train_config(args: &TrainArgs) -> Result<(TrainConfig, bool), Failure> {
    let mut cfg = TrainConfig::for_stage(args.stage);
    let mut explicit_model = false;
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Failure::Runtime(Error::Io {
                path: path.clone(),
                source: e,
            })
        })?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        explicit_model = value.get("model").is_some();
        let from_file: TrainConfig =
            serde_json::from_value(value).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        if !explicit_model {
            cfg = TrainConfig {
                model: cfg.model,
                ..from_file
            };
        } else {
            cfg = from_file;
        }
    }
    cfg.stage = args.stage;
    let overrides = [
        (&mut cfg.data, &args.data),
        (&mut cfg.val_data, &args.val_data),
        (&mut cfg.init, &args.resume),
        (&mut cfg.teacher, &args.teacher),
        (&mut cfg.output, &args.output),
    ];
    for (field, flag) in overrides {
        if flag.is_some() {
            field.clone_from(flag);
        }
    }
    if args.epochs.is_some() {
        cfg.epochs = args.epochs;
    }
    if args.lr.is_some() {
        cfg.lr = args.lr;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.no_perceptual {
        cfg.weights.perceptual = 0.0;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok((cfg, explicit_model))
}

fn train(args: TrainArgs) -> CliResult {
    let (cfg, explicit_model) = train_config(&args)?;
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| Failure::Usage("no training data: pass --data or set \"data\"".into()))?;
    let output = cfg
        .output
        .clone()
        .ok_or_else(|| Failure::Usage("no output path: pass --output or set \"output\"".into()))?;
    if cfg.stage == Stage::Kd && cfg.teacher.is_none() {
        return Err(Failure::Usage("the kd stage needs --teacher".into()));
    }
    let train: Arc<dyn SampleSource> = Arc::new(scan_dataset(&data, Split::Train)?);
    let val = match &cfg.val_data {
        Some(dir) => Some(Arc::new(scan_dataset(dir, Split::Test)?) as Arc<dyn SampleSource>),
        None => None,
    };
    let init = match &cfg.init {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let net = if explicit_model {
                ck.to_net_checked(&cfg.model)?
            } else {
                ck.to_net()?
            };
            Some((net, ck.provenance))
        }
        None => None,
    };
    let teacher = match &cfg.teacher {
        Some(path) => Some(Checkpoint::load(path)?.to_net()?),
        None => None,
    };
    let outcome = run_stage(
        &cfg,
        StageInputs {
            train,
            val,
            init,
            teacher,
        },
    )?;
    if let Some(last) = outcome.history.last() {
        log::info!(
            "{} finished after {} steps, final loss {:.5}",
            cfg.stage.name(),
            last.steps,
            last.mean_loss
        );
    }
    log::info!("wrote {}", output.display());
    Ok(())
}

fn eval(args: EvalArgs) -> CliResult {
    let net = match &args.checkpoint {
        Some(path) => Some(load_net(path, args.dgf)?),
        None => None,
    };
    let data = scan_dataset(&args.data, Split::Test)?;
    let report = evaluate(net.as_ref(), &data);
    print!("{}", report.to_text());
    if let Some(path) = &args.report {
        std::fs::write(path, report.to_json()?).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    if report.images.is_empty() {
        return Err(Failure::Runtime(Error::Dataset("no image could be evaluated".into())));
    }
    Ok(())
}

fn threads(flag: Option<usize>) -> Result<Option<usize>, String> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("CPGA_THREADS") {
        Ok(v) => v
            .parse()
            .map(Some)
            .map_err(|_| format!("CPGA_THREADS must be a positive integer, got {v:?}")),
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match threads(cli.threads) {
        Ok(Some(0)) | Err(_) => {
            eprintln!("error: thread count must be a positive integer");
            return ExitCode::from(1);
        }
        Ok(Some(n)) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        }
        Ok(None) => {}
    }
    let result = match cli.command {
        Command::Enhance(a) => enhance(a),
        Command::Priors(a) => priors(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
