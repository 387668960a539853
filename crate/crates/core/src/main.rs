use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use detr3d::cli::{cmd_bench, cmd_eval, cmd_gen, cmd_predict, cmd_train, format_eval, RunConfig};
use detr3d::data::Split;

#[derive(Parser)]
#[command(
    name = "detr3d",
    version,
    about = "Transformer 3D detector on synthetic indoor scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON run config; replaces the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Starting preset when no config file is given: desk, full or overfit.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Seed of the network initialisation and training order.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, overrides_with = "no_nms")]
    nms: bool,
    #[arg(long, global = true, overrides_with = "nms")]
    no_nms: bool,
    #[arg(long, global = true)]
    nms_threshold: Option<f64>,
    /// Evaluate with only the first L decoder layers.
    #[arg(long, global = true)]
    depth_override: Option<usize>,
    /// Number of queries at inference.
    #[arg(long, global = true)]
    num_queries: Option<usize>,
    /// Dataset split used by eval and predict.
    #[arg(long, global = true, value_parser = parse_split)]
    split: Option<Split>,
    /// Use oriented boxes (generator, matching and loss).
    #[arg(long, global = true)]
    oriented: bool,
    /// Print the resolved config as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a checksummed manifest.
    Gen,
    /// Train a detector on the train split.
    Train,
    /// Score a checkpoint, with depth and query sweeps.
    Eval {
        /// Query counts to sweep, e.g. 8,16,32,64.
        #[arg(long, value_delimiter = ',')]
        query_sweep: Option<Vec<usize>>,
    },
    /// Write detections (and optional OBJ wireframes) for scene files.
    Predict {
        /// Scene files; the configured split when omitted.
        scenes: Vec<PathBuf>,
        #[arg(long)]
        obj: bool,
    },
    /// Time the forward pass over encoder/decoder depths.
    Bench {
        #[arg(long)]
        repeats: Option<usize>,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        _ => Err(format!("unknown split {s:?}")),
    }
}

fn resolve(c: &Common) -> detr3d::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(&c.preset)?,
    };
    if c.oriented {
        cfg.set_oriented(true);
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(d) = &c.data {
        cfg.dataset_dir = d.clone();
    }
    if let Some(p) = &c.checkpoint {
        cfg.checkpoint = Some(p.clone());
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if c.nms {
        cfg.nms = true;
    }
    if c.no_nms {
        cfg.nms = false;
    }
    if let Some(t) = c.nms_threshold {
        cfg.nms_threshold = t;
    }
    if c.depth_override.is_some() {
        cfg.depth = c.depth_override;
    }
    if c.num_queries.is_some() {
        cfg.num_queries = c.num_queries;
    }
    if let Some(s) = c.split {
        cfg.eval_split = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> detr3d::Result<()> {
    let mut cfg = resolve(&cli.common)?;
    let mut stdout = std::io::stdout().lock();
    if cli.common.print_config {
        let _ = writeln!(stdout, "{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    match cli.command {
        Command::Gen => {
            let m = cmd_gen(&cfg)?;
            let _ = writeln!(
                stdout,
                "wrote {} train and {} val scenes to {}",
                m.train.len(),
                m.val.len(),
                cfg.dataset_dir.display()
            );
        }
        Command::Train => {
            let s = cmd_train(&cfg, &mut stdout)?;
            let _ = writeln!(
                stdout,
                "done: {} iterations, mAP@0.25 {:.4} mAP@0.5 {:.4}, checkpoint {}",
                s.iterations,
                s.final_metrics.map25(),
                s.final_metrics.map50(),
                s.final_checkpoint.display()
            );
        }
        Command::Eval { query_sweep } => {
            if let Some(q) = query_sweep {
                cfg.query_sweep = q;
            }
            let s = cmd_eval(&cfg)?;
            let _ = write!(stdout, "{}", format_eval(&s));
        }
        Command::Predict { scenes, obj } => {
            cfg.export_obj |= obj;
            let s = cmd_predict(&cfg, (!scenes.is_empty()).then_some(scenes.as_slice()))?;
            for (f, e) in &s.failures {
                eprintln!("{}", error_line("scene", &format!("{}: {e}", f.display())));
            }
            let _ = writeln!(
                stdout,
                "{} detections in {} scenes -> {}",
                s.num_detections,
                s.scenes.len(),
                s.detections_file.display()
            );
        }
        Command::Bench { repeats } => {
            if let Some(k) = repeats {
                cfg.bench.repeats = k;
            }
            let r = cmd_bench(&cfg)?;
            let _ = writeln!(stdout, "enc dec queries median_ms relative");
            for row in &r.rows {
                let _ = writeln!(
                    stdout,
                    "{:>3} {:>3} {:>7} {:>9.2} {:>8.3}",
                    row.enc_layers, row.dec_layers, row.num_queries, row.median_ms, row.relative
                );
            }
        }
    }
    Ok(())
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Display already includes the source of wrapped errors.
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
