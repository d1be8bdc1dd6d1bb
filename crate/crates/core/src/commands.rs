//! The operations behind each command-line subcommand.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::RunConfig;
use crate::data::{load_csv, make_windows, time_features, Prepared, RawSeries, StandardScaler, WindowShape, TIMESTAMP_FORMAT};
use crate::error::{Error, Result};
use crate::graph::{parse_graph_file, AdjacencyMatrix, KnowledgeGraphSpec};
use crate::io::write_atomic;
use crate::model::Transformer;
use crate::seed::derive_seed;
use crate::synth::{self, AbOptions, Arm, Generator, RunReport, SyntheticSpec};
use crate::train::{evaluate, train_with, History, LogRecord, MetricsRecord, SampleSource};

pub fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

fn data_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.data
        .as_deref()
        .ok_or_else(|| Error::Config("no dataset given (--data)".into()))
}

/// Parses a graph file and validates it against dataset columns; the result
/// is in column order.
pub fn load_graph(path: &Path, columns: &[String]) -> Result<AdjacencyMatrix> {
    let text = fs::read_to_string(path)?;
    let spec = parse_graph_file(&text)?;
    Ok(spec.validate_against_dataset(columns)?.adjacency)
}

fn shape_of(cfg: &RunConfig) -> WindowShape {
    WindowShape {
        lookback: cfg.seq_len,
        label_len: cfg.label_len,
        horizon: cfg.pred_len,
    }
}

/// Dataset, prepared windows and (optional) channel-ordered graph for one run.
pub struct RunInputs {
    pub name: String,
    pub series: RawSeries,
    pub prepared: Prepared,
    pub adjacency: Option<AdjacencyMatrix>,
}

/// Loads and validates everything a run needs before any training starts.
pub fn prepare_inputs(cfg: &RunConfig) -> Result<RunInputs> {
    cfg.validate()?;
    let path = data_path(cfg)?;
    let name = dataset_name(path);
    let series = load_csv(path)?;
    let adjacency = cfg
        .graph
        .as_deref()
        .map(|g| load_graph(g, &series.column_names))
        .transpose()?;
    let prepared = Prepared::new(&name, &series, cfg.split_scheme(&name), shape_of(cfg))?;
    Ok(RunInputs {
        name,
        series,
        prepared,
        adjacency,
    })
}

#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub config: PathBuf,
    pub history: PathBuf,
    pub config_hash: String,
    pub run_hash: String,
    pub metrics: MetricsRecord,
    pub history_data: History,
}

#[derive(Serialize)]
struct ConfigSnapshot<'a> {
    config_hash: &'a str,
    run_hash: &'a str,
    config: &'a RunConfig,
}

/// Trains one model and writes a checkpoint, a config snapshot and a JSONL
/// history ending with the test record.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainArtifacts> {
    let inputs = prepare_inputs(cfg)?;
    let data = &inputs.prepared;
    let model_cfg = cfg.model_config(data.channels(), data.freq);
    let mut model = Transformer::<f32>::new(model_cfg, inputs.adjacency.clone(), cfg.seed)?;
    let shape = shape_of(cfg);
    let (tr, va, te) = (
        data.windows(data.split.train.clone(), shape),
        data.windows(data.split.val.clone(), shape),
        data.windows(data.split.test.clone(), shape),
    );
    let config_hash = cfg.config_hash();
    let run_hash = cfg.run_hash();
    let mut lines = Vec::new();
    let history = train_with(&mut model, &tr, &va, &cfg.train_config(), |e| {
        lines.push(LogRecord::epoch(&inputs.name, cfg.pred_len, cfg.use_kge, cfg.seed, e).with_hash(&config_hash));
    })?;
    let metrics = evaluate(&model, &te, &inputs.name, cfg.seed)?;
    lines.push(LogRecord::test(&metrics).with_hash(&config_hash));

    fs::create_dir_all(&cfg.out)?;
    let ck = cfg.out.join("checkpoint");
    checkpoint::save(
        &ck,
        &model,
        &CheckpointMeta {
            config_hash: config_hash.clone(),
            scaler: Some(data.scaler.clone()),
            column_names: data.column_names.clone(),
            split: Some(cfg.split_scheme(&inputs.name)),
            seed: cfg.seed,
        },
    )?;
    let config_path = cfg.out.join("config.json");
    let snapshot = ConfigSnapshot {
        config_hash: &config_hash,
        run_hash: &run_hash,
        config: cfg,
    };
    write_atomic(&config_path, serde_json::to_string_pretty(&snapshot)?.as_bytes())?;
    let history_path = cfg.out.join("history.jsonl");
    let text = lines
        .iter()
        .map(|l| l.to_line().map(|s| s + "\n"))
        .collect::<Result<String>>()?;
    write_atomic(&history_path, text.as_bytes())?;
    Ok(TrainArtifacts {
        checkpoint: ck,
        config: config_path,
        history: history_path,
        config_hash,
        run_hash,
        metrics,
        history_data: history,
    })
}

/// Evaluates a checkpoint on the test partition of `data`; optionally dumps
/// `(timestamp, channel, truth, prediction)` rows on the standardized scale.
pub fn cmd_evaluate(checkpoint_dir: &Path, data: &Path, dump: Option<&Path>, force: bool) -> Result<MetricsRecord> {
    let ck = checkpoint::load(checkpoint_dir, None, force)?;
    let model = &ck.model;
    let series = load_csv(data)?;
    let mc = &model.config;
    if series.channels() != mc.channels {
        return Err(Error::Config(format!(
            "checkpoint expects {} channels, dataset has {}",
            mc.channels,
            series.channels()
        )));
    }
    if series.freq != mc.freq {
        return Err(Error::Config(format!(
            "checkpoint expects {} data, dataset is {}",
            mc.freq, series.freq
        )));
    }
    if !ck.manifest.column_names.is_empty() && ck.manifest.column_names != series.column_names && !force {
        return Err(Error::Config(format!(
            "dataset columns {:?} differ from checkpoint columns {:?}",
            series.column_names, ck.manifest.column_names
        )));
    }
    let name = dataset_name(data);
    let shape = WindowShape {
        lookback: mc.lookback,
        label_len: mc.label_len,
        horizon: mc.horizon,
    };
    let scheme = ck
        .manifest
        .split
        .unwrap_or_else(|| crate::data::SplitScheme::default_for(&name));
    let mut prepared = Prepared::new(&name, &series, scheme, shape)?;
    if let Some(scaler) = &ck.manifest.scaler {
        prepared.values = scaler.apply(&series.values);
        prepared.scaler = scaler.clone();
    }
    let te = prepared.windows(prepared.split.test.clone(), shape);
    let metrics = evaluate(model, &te, &name, ck.manifest.seed)?;
    if let Some(path) = dump {
        let mut out = String::from("timestamp,channel,truth,prediction\n");
        for i in 0..SampleSource::<f32>::len(&te) {
            let s = te.get::<f32>(i);
            let pred = model.forecast(&s)?;
            for h in 0..mc.horizon {
                let ts = prepared.timestamps[s.target_start + h].format(TIMESTAMP_FORMAT);
                for (c, col) in prepared.column_names.iter().enumerate() {
                    let idx = h * mc.channels + c;
                    writeln!(out, "{ts},{col},{},{}", s.y.data()[idx], pred.data()[idx]).expect("string write");
                }
            }
        }
        write_atomic(path, out.as_bytes())?;
    }
    Ok(metrics)
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareOutcome {
    pub config_hash: String,
    pub records: Vec<MetricsRecord>,
    pub report: RunReport,
}

/// Trains the graph-embedding and plain arms (plus the placebo arm when
/// asked) on every seed.
pub fn cmd_compare(cfg: &RunConfig, seeds: &[u64], placebo: bool) -> Result<CompareOutcome> {
    if seeds.is_empty() {
        return Err(Error::Config("compare needs at least one seed".into()));
    }
    let graph_path = cfg
        .graph
        .as_deref()
        .ok_or_else(|| Error::Config("compare needs a graph file (--graph)".into()))?;
    let cfg = RunConfig {
        use_kge: true,
        ..cfg.clone()
    };
    cfg.validate()?;
    let path = data_path(&cfg)?;
    let name = dataset_name(path);
    let series = load_csv(path)?;
    let graph = load_graph(graph_path, &series.column_names)?;
    let mut arms = vec![Arm::TrueGraph, Arm::NoKge];
    if placebo {
        arms.push(Arm::Placebo);
    }
    let opts = AbOptions {
        arms,
        dataset: name.clone(),
        scheme: cfg.split_scheme(&name),
    };
    let model = cfg.model_config(series.channels(), series.freq);
    let report = synth::run_ab(&series, &graph, &model, &cfg.train_config(), seeds, &opts, |r| {
        eprintln!("  {:?} seed {}: mse {:.5} mae {:.5}", r.arm, r.seed, r.mse, r.mae);
    })?;
    let records = report
        .rows
        .iter()
        .map(|r| MetricsRecord {
            dataset: name.clone(),
            horizon: cfg.pred_len,
            use_kge: r.arm != Arm::NoKge,
            seed: r.seed,
            mse: r.mse,
            mae: r.mae,
        })
        .collect();
    let outcome = CompareOutcome {
        config_hash: cfg.config_hash(),
        records,
        report,
    };
    fs::create_dir_all(&cfg.out)?;
    write_atomic(&cfg.out.join("compare.json"), serde_json::to_string_pretty(&outcome)?.as_bytes())?;
    Ok(outcome)
}

#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub generator: Generator,
    pub channels: usize,
    pub length: usize,
    pub edges: usize,
    pub symmetric: bool,
    pub noise_std: f64,
    pub self_weight: f64,
    pub edge_weight: f64,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            generator: Generator::Var1,
            channels: 7,
            length: 8000,
            edges: 8,
            symmetric: false,
            noise_std: 1.0,
            self_weight: 0.5,
            edge_weight: 0.3,
            seed: 0,
        }
    }
}

/// Synthetic series plus the graph its coupling was drawn on.
pub fn synthesize(opts: &SynthOptions) -> Result<(RawSeries, AdjacencyMatrix)> {
    let names: Vec<String> = (0..opts.channels).map(|i| format!("x{i}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, "synth.graph"));
    let graph = synth::random_graph(names, opts.edges, opts.symmetric, &mut rng)?;
    let mut spec = SyntheticSpec::new(opts.channels, opts.length, opts.generator, opts.seed);
    spec.noise_std = opts.noise_std;
    spec.coupling = synth::coupling_from_graph(&graph, opts.self_weight, opts.edge_weight);
    if opts.generator == Generator::CoupledSines {
        for i in 0..opts.channels {
            spec.coupling[i * opts.channels + i] = 0.0;
        }
    }
    Ok((synth::generate(&spec)?, graph))
}

/// Writes `data.csv` and `graph.txt` under `out`.
pub fn cmd_synthesize(opts: &SynthOptions, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let (series, graph) = synthesize(opts)?;
    let data = out.join("data.csv");
    let graph_path = out.join("graph.txt");
    series.write_csv(&data)?;
    let spec = KnowledgeGraphSpec::from_adjacency(&graph, !opts.symmetric);
    write_atomic(&graph_path, spec.serialize().as_bytes())?;
    Ok((data, graph_path))
}

/// Forecasts the `H` rows that follow `history` (the last `L` raw rows,
/// row-major) on the original scale. Timestamps for the horizon continue at
/// the checkpoint's sampling frequency.
pub fn forecast_raw(model: &Transformer<f32>, scaler: Option<&StandardScaler>, history: &[f64], timestamps: &[NaiveDateTime]) -> Result<Vec<f64>> {
    let mc = &model.config;
    let (l, m) = (mc.lookback, mc.channels);
    if timestamps.len() != l || history.len() != l * m {
        return Err(Error::shape("forecast_raw", &[l, m], &[timestamps.len(), history.len() / m.max(1)]));
    }
    let step = chrono::Duration::seconds(mc.freq.seconds());
    let last = timestamps[l - 1];
    let marks: Vec<Vec<usize>> = timestamps
        .iter()
        .copied()
        .chain((1..=mc.horizon as i32).map(|k| last + step * k))
        .map(|ts| time_features(&ts, mc.freq))
        .collect();
    let mut values = scaler.map_or_else(|| history.to_vec(), |s| s.apply(history));
    values.resize((l + mc.horizon) * m, 0.0);
    let shape = WindowShape {
        lookback: l,
        label_len: mc.label_len,
        horizon: mc.horizon,
    };
    let sample = make_windows::<f32>(&values, &marks, m, shape)?.swap_remove(0);
    let pred = model.forecast(&sample)?.to_f64_vec();
    Ok(match scaler {
        Some(s) => s.invert(&pred),
        None => pred,
    })
}

/// Human-readable summary of a graph file, optionally checked against a dataset.
pub fn cmd_inspect_graph(graph: &Path, data: Option<&Path>) -> Result<String> {
    let spec = parse_graph_file(&fs::read_to_string(graph)?)?;
    let adj = spec.to_adjacency()?;
    let mut out = String::new();
    let v = adj.size();
    let edges = if spec.directed {
        adj.off_diagonal_count()
    } else {
        adj.off_diagonal_count() / 2
    };
    writeln!(out, "nodes: {v}").ok();
    writeln!(out, "edges: {edges} ({})", if spec.directed { "directed" } else { "undirected" }).ok();
    if edges == 0 {
        writeln!(out, "warning: graph has no edges; the knowledge-graph embedding will be inert").ok();
    }
    writeln!(out, "{:<16} {:>6} {:>6}", "node", "in", "out").ok();
    for (i, n) in adj.node_order().iter().enumerate() {
        writeln!(out, "{:<16} {:>6} {:>6}", n, adj.in_degree(i), adj.out_degree(i)).ok();
    }
    if let Some(path) = data {
        let series = load_csv(path)?;
        let mapping = spec.validate_against_dataset(&series.column_names)?;
        writeln!(out, "channel mapping:").ok();
        for (c, col) in series.column_names.iter().enumerate() {
            writeln!(out, "  column {c} {col} -> node {}", mapping.node_of_channel[c]).ok();
        }
    }
    Ok(out)
}
