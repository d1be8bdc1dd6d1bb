use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kgeformer::commands::{self, SynthOptions};
use kgeformer::config::RunConfig;
use kgeformer::synth::Generator;
use kgeformer::Error;

#[derive(Parser)]
#[command(name = "kgeformer", version, about = "Transformer forecasting with knowledge-graph embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write checkpoint, config snapshot and history.
    Train(RunArgs),
    /// Evaluate a checkpoint on a dataset's test partition.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write per-step (timestamp, channel, truth, prediction) rows here.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Skip compatibility checks on column names.
        #[arg(long)]
        force: bool,
    },
    /// Train graph-embedding and plain arms on several seeds and compare.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        /// Add a random graph with the same edge count as a control arm.
        #[arg(long)]
        placebo: bool,
    },
    /// Write a synthetic dataset and the graph its coupling follows.
    Synthesize {
        #[arg(long, value_enum, default_value = "var1")]
        generator: GeneratorArg,
        #[arg(long, default_value_t = 7)]
        channels: usize,
        #[arg(long, default_value_t = 8000)]
        length: usize,
        #[arg(long, default_value_t = 8)]
        edges: usize,
        #[arg(long)]
        symmetric: bool,
        #[arg(long, default_value_t = 1.0)]
        noise_std: f64,
        #[arg(long, default_value_t = 0.5)]
        self_weight: f64,
        #[arg(long, default_value_t = 0.3)]
        edge_weight: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a graph file and check it against a dataset header.
    InspectGraph {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GeneratorArg {
    Var1,
    CoupledSines,
}

/// Flags mirror config keys; a config file supplies lower-precedence values.
#[derive(Args)]
struct RunArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    use_kge: Option<bool>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    label_len: Option<usize>,
    #[arg(long)]
    pred_len: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    extra: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> kgeformer::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let path = |p: &PathBuf| p.to_string_lossy().into_owned();
        let flags = [
            ("data", self.data.as_ref().map(path)),
            ("graph", self.graph.as_ref().map(path)),
            ("use_kge", self.use_kge.map(|v| v.to_string())),
            ("seq_len", self.seq_len.map(|v| v.to_string())),
            ("label_len", self.label_len.map(|v| v.to_string())),
            ("pred_len", self.pred_len.map(|v| v.to_string())),
            ("d_model", self.d_model.map(|v| v.to_string())),
            ("n_heads", self.n_heads.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("out", self.out.as_ref().map(path)),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        for kv in &self.extra {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> kgeformer::Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let a = commands::cmd_train(&cfg)?;
            println!("{}", serde_json::to_string(&a.metrics)?);
            eprintln!(
                "wrote {}, {}, {} (config hash {})",
                a.checkpoint.display(),
                a.config.display(),
                a.history.display(),
                a.config_hash
            );
        }
        Command::Evaluate {
            checkpoint,
            data,
            dump,
            force,
        } => {
            let m = commands::cmd_evaluate(&checkpoint, &data, dump.as_deref(), force)?;
            println!("{}", serde_json::to_string(&m)?);
        }
        Command::Compare { run, seeds, placebo } => {
            let cfg = run.resolve()?;
            let outcome = commands::cmd_compare(&cfg, &seeds, placebo)?;
            print!("{}", outcome.report.to_table());
            println!(
                "graph embedding parameters: {} (config hash {})",
                outcome.report.kge_extra_params, outcome.config_hash
            );
        }
        Command::Synthesize {
            generator,
            channels,
            length,
            edges,
            symmetric,
            noise_std,
            self_weight,
            edge_weight,
            seed,
            out,
        } => {
            let opts = SynthOptions {
                generator: match generator {
                    GeneratorArg::Var1 => Generator::Var1,
                    GeneratorArg::CoupledSines => Generator::CoupledSines,
                },
                channels,
                length,
                edges,
                symmetric,
                noise_std,
                self_weight,
                edge_weight,
                seed,
            };
            let (data, graph) = commands::cmd_synthesize(&opts, &out)?;
            println!("{}\n{}", data.display(), graph.display());
        }
        Command::InspectGraph { graph, data } => {
            print!("{}", commands::cmd_inspect_graph(&graph, data.as_deref())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
