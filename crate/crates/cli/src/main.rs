use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use segkit::arch::{
    context_network_spec, count_params, geometry_csv, instantiate, load_checkpoint,
    save_checkpoint, vgg16_spec, ContextNetConfig, NetworkSpec, ParamConvention, Role,
};
use segkit::config::RunConfig;
use segkit::data::{generate_dataset, read_dataset, write_dataset, DatasetMeta};
use segkit::experiment::{
    ablation_csv, rareness_csv, rareness_gain, run_ablation, run_rareness, AblationConfig,
    RarenessConfig,
};
use segkit::metrics::{metrics_csv_header, metrics_csv_row, ConfusionMatrix};
use segkit::tensor::{Shape, Tensor, VOID_LABEL};
use segkit::train::{evaluate, stack, train};
use segkit::Error;

#[derive(Parser)]
#[command(
    name = "segkit",
    version,
    about = "Segmentation networks with context nets and dense skip fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config document; defaults are used for every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the fully resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Receptive field and stride of every feature map, as CSV.
    Analyze {
        /// Network spec JSON file, `builtin:vgg16` or `builtin:mini`.
        #[arg(long)]
        spec: String,
        /// Append a context network `k,m[,hidden[,tied]]` after the trunk.
        #[arg(long)]
        context: Option<String>,
    },
    /// Parameter count of the configured network.
    CountParams {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "context-conv-weights")]
        convention: String,
    },
    /// Generate a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of scenes (default: train_count + val_count).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model; writes the log, metrics and checkpoint to output_dir.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Score one-hot logits built from the labels instead of a model.
        #[arg(long)]
        oracle_logits: bool,
    },
    /// Train every variant under every seed and tabulate validation metrics.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare training with and without rareness weights.
    Rareness {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

enum Failure {
    Usage(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric(_) => Failure::Numeric(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn load_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    if text.trim().is_empty() {
        return Err(Failure::Usage(format!("{} is empty", path.display())));
    }
    serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))
}

/// Writes to stdout; a closed pipe on the reading end is not an error.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json<T: Serialize>(value: &T) {
    emit(&format!(
        "{}\n",
        serde_json::to_string_pretty(value).expect("configs serialize")
    ));
}

fn run_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let cfg: RunConfig = load_json(args.config.as_deref())?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_context(text: &str, input_channels: usize) -> Result<ContextNetConfig, Failure> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let num = |i: usize| -> Result<usize, Failure> {
        parts[i].parse().map_err(|_| {
            Failure::Usage(format!(
                "--context: '{}' is not a positive integer",
                parts[i]
            ))
        })
    };
    if !(2..=4).contains(&parts.len()) {
        return Err(Failure::Usage(
            "--context expects k,m[,hidden[,tied]]".into(),
        ));
    }
    let mut cfg = ContextNetConfig::new(num(0)?, num(1)?, input_channels);
    if parts.len() >= 3 {
        cfg = cfg.hidden(num(2)?);
    }
    if parts.len() == 4 {
        cfg = cfg.tied(match parts[3] {
            "tied" | "true" => true,
            "untied" | "false" => false,
            other => {
                return Err(Failure::Usage(format!(
                    "--context: unknown tie mode '{other}'"
                )))
            }
        });
    }
    Ok(cfg)
}

fn cmd_analyze(spec: &str, context: Option<&str>) -> CmdResult {
    let mut net = match spec {
        "builtin:vgg16" => vgg16_spec(),
        "builtin:mini" => segkit::config::BackboneConfig::default().spec()?,
        path => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read {path}: {e}")))?;
            if text.trim().is_empty() {
                return Err(Failure::Usage(format!("{path} is empty")));
            }
            NetworkSpec::from_json(&text)?
        }
    };
    if let Some(ctx) = context {
        net.layers.retain(|l| l.role != Role::Classifier);
        let cfg = parse_context(ctx, net.output_channels())?;
        net.layers.extend(context_network_spec(&cfg)?);
        net.validate()?;
    }
    emit(&geometry_csv(&net));
    Ok(())
}

fn cmd_count(args: &ConfigArgs, convention: &str) -> CmdResult {
    let cfg = run_config(args)?;
    if args.print_config {
        print_json(&cfg);
        return Ok(());
    }
    let convention: ParamConvention = convention.parse()?;
    let spec = cfg.arch.network_spec()?;
    emit(&format!(
        "convention,count\n{convention},{}\n",
        count_params(&spec, convention)
    ));
    Ok(())
}

fn cmd_gen_data(args: &ConfigArgs, out: Option<&Path>, count: Option<usize>) -> CmdResult {
    let cfg = run_config(args)?;
    if args.print_config {
        print_json(&cfg);
        return Ok(());
    }
    let out = out.ok_or_else(|| Failure::Usage("gen-data needs --out <dir>".into()))?;
    let count = count.unwrap_or(cfg.data.train_count + cfg.data.val_count);
    let data = generate_dataset(&cfg.data.scene, 0, count)?;
    let meta = DatasetMeta {
        classes: cfg.data.scene.classes,
        count,
        seed: cfg.data.scene.seed,
        theta: cfg.train.theta,
        scene: cfg.data.scene.clone(),
    };
    write_dataset(out, &data, &meta)?;
    emit(&format!("wrote {count} scenes to {}\n", out.display()));
    Ok(())
}

fn cmd_train(args: &ConfigArgs) -> CmdResult {
    let cfg = run_config(args)?;
    if args.print_config {
        print_json(&cfg);
        return Ok(());
    }
    let (train_set, val_set) = cfg.data.load()?;
    let spec = cfg.arch.network_spec()?;
    let mut model = instantiate(&spec, cfg.arch.init_seed)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let result = train(&mut model, &train_set, Some(&val_set), &cfg.train);
    let ckpt = cfg.output_dir.join("model.ckpt");
    let log = match result {
        Ok(log) => log,
        Err(e) => {
            save_checkpoint(&model, &ckpt)?;
            return Err(e.into());
        }
    };
    fs::write(cfg.output_dir.join("config.json"), cfg.to_json() + "\n")?;
    fs::write(cfg.output_dir.join("train_log.csv"), log.loss_csv())?;
    let mut metrics = metrics_csv_header(model.classes()) + "\n";
    for e in &log.epochs {
        if let Some(cm) = &e.val {
            metrics.push_str(&metrics_csv_row(e.epoch, "val", cm)?);
            metrics.push('\n');
        }
    }
    fs::write(cfg.output_dir.join("metrics.csv"), &metrics)?;
    save_checkpoint(&model, &ckpt)?;
    emit(&metrics);
    Ok(())
}

fn cmd_eval(checkpoint: Option<&Path>, data: &Path, batch: usize, oracle: bool) -> CmdResult {
    if !oracle {
        let path =
            checkpoint.ok_or_else(|| Failure::Usage("eval needs --checkpoint <file>".into()))?;
        if !path.exists() {
            return Err(Failure::Usage(format!(
                "checkpoint {} does not exist",
                path.display()
            )));
        }
    }
    let (dataset, _) = read_dataset(data)?;
    let cm = if oracle {
        let mut cm = ConfusionMatrix::new(dataset.classes);
        for chunk in dataset.samples.chunks(batch.max(1)) {
            let refs: Vec<_> = chunk.iter().collect();
            let (x, labels) = stack(&refs)?;
            let s = x.shape();
            let logits =
                Tensor::from_fn(Shape::new(s.n, dataset.classes, s.h, s.w), |n, c, y, x| {
                    let l = labels[n].at(y, x);
                    if l != VOID_LABEL && l as usize == c {
                        1.0
                    } else {
                        0.0
                    }
                });
            for (pred, truth) in segkit::train::argmax_labels(&logits).iter().zip(&labels) {
                cm.accumulate(pred, truth, VOID_LABEL)?;
            }
        }
        cm
    } else {
        let mut model = load_checkpoint(checkpoint.expect("checked above"))?;
        let canvas = dataset
            .samples
            .first()
            .map_or(1, |s| s.height().max(s.width()));
        evaluate(&mut model, &dataset, batch, canvas)?.confusion
    };
    emit(&format!(
        "{}\n{}\n",
        metrics_csv_header(cm.classes()),
        metrics_csv_row(0, "eval", &cm)?
    ));
    Ok(())
}

fn cmd_ablate(args: &ConfigArgs) -> CmdResult {
    let cfg: AblationConfig = load_json(args.config.as_deref())?;
    if args.print_config {
        print_json(&cfg);
        return Ok(());
    }
    let results = run_ablation(&cfg, |r| {
        eprintln!(
            "{} seed {}: mean IOU {:.4}",
            r.model, r.seed, r.metrics.mean_iou
        );
    })?;
    let csv = ablation_csv(&results);
    fs::create_dir_all(&cfg.run.output_dir)?;
    fs::write(cfg.run.output_dir.join("ablation.csv"), &csv)?;
    emit(&csv);
    Ok(())
}

fn cmd_rareness(args: &ConfigArgs) -> CmdResult {
    let cfg: RarenessConfig = load_json(args.config.as_deref())?;
    if args.print_config {
        print_json(&cfg);
        return Ok(());
    }
    let results = run_rareness(&cfg, |r| {
        eprintln!(
            "weighted={} seed {}: rare IOU {:.4}",
            r.weighted, r.seed, r.rare_iou
        );
    })?;
    let csv = rareness_csv(&results);
    fs::create_dir_all(&cfg.run.output_dir)?;
    fs::write(cfg.run.output_dir.join("rareness.csv"), &csv)?;
    emit(&csv);
    eprintln!("median rare IOU gain: {:.4}", rareness_gain(&results));
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("SEGKIT_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Failure::Usage(format!("SEGKIT_THREADS='{v}' is not a positive integer"))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot size the thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    configure_threads()?;
    match &cli.command {
        Command::Analyze { spec, context } => cmd_analyze(spec, context.as_deref()),
        Command::CountParams { cfg, convention } => cmd_count(cfg, convention),
        Command::GenData { cfg, out, count } => cmd_gen_data(cfg, out.as_deref(), *count),
        Command::Train { cfg } => cmd_train(cfg),
        Command::Eval {
            checkpoint,
            data,
            batch,
            oracle_logits,
        } => cmd_eval(checkpoint.as_deref(), data, *batch, *oracle_logits),
        Command::Ablate { cfg } => cmd_ablate(cfg),
        Command::Rareness { cfg } => cmd_rareness(cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
