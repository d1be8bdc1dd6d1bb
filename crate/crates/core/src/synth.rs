//! Synthetic series with a known coupling graph, and seeded A/B runs that
//! compare a graph-embedding model against its plain counterpart.

use std::f64::consts::TAU;

use chrono::{Duration, NaiveDate};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Freq, Prepared, RawSeries, SplitScheme, WindowShape};
use crate::error::{Error, Result};
use crate::graph::AdjacencyMatrix;
use crate::model::{ModelConfig, Transformer};
use crate::seed::derive_seed;
use crate::train::{evaluate, train, TrainConfig};

const BURN_IN: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Var1,
    CoupledSines,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub channels: usize,
    pub length: usize,
    /// Row-major `M x M`; row `i` holds the weights channel `i` receives.
    pub coupling: Vec<f64>,
    pub noise_std: f64,
    pub generator: Generator,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(channels: usize, length: usize, generator: Generator, seed: u64) -> Self {
        Self {
            channels,
            length,
            coupling: vec![0.0; channels * channels],
            noise_std: 1.0,
            generator,
            seed,
        }
    }

    pub fn coupling_at(&self, i: usize, j: usize) -> f64 {
        self.coupling[i * self.channels + j]
    }

    pub fn column_names(&self) -> Vec<String> {
        (0..self.channels).map(|i| format!("x{i}")).collect()
    }

    fn check(&self) -> Result<()> {
        if self.channels == 0 || self.length == 0 {
            return Err(Error::Config("synthetic series needs channels and length".into()));
        }
        if self.coupling.len() != self.channels * self.channels {
            return Err(Error::shape("synthetic coupling", &[self.coupling.len()], &[self.channels, self.channels]));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err(Error::Config(format!("noise_std must be non-negative, got {}", self.noise_std)));
        }
        Ok(())
    }
}

/// Coupling matrix supported on `adj`: `self_weight` on the diagonal and
/// `edge_weight` at `C[j, i]` for every edge `i -> j` (the source drives the
/// target at the next step).
pub fn coupling_from_graph(adj: &AdjacencyMatrix, self_weight: f64, edge_weight: f64) -> Vec<f64> {
    let n = adj.size();
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        c[i * n + i] = self_weight;
        for j in 0..n {
            if i != j && adj.get(i, j) == 1 {
                c[j * n + i] = edge_weight;
            }
        }
    }
    c
}

/// Random graph over `names` with exactly `edges` off-diagonal links
/// (unordered pairs when `symmetric`).
pub fn random_graph<R: Rng + ?Sized>(names: Vec<String>, edges: usize, symmetric: bool, rng: &mut R) -> Result<AdjacencyMatrix> {
    let v = names.len();
    let slots = if symmetric { v * v.saturating_sub(1) / 2 } else { v * v.saturating_sub(1) };
    if edges > slots {
        return Err(Error::Config(format!("{edges} edges do not fit in a {v}-node graph")));
    }
    let mut values = vec![0u8; v * v];
    let mut placed = 0;
    'fill: for i in 0..v {
        for j in 0..v {
            if placed == edges {
                break 'fill;
            }
            if i != j && (!symmetric || i < j) {
                values[i * v + j] = 1;
                if symmetric {
                    values[j * v + i] = 1;
                }
                placed += 1;
            }
        }
    }
    Ok(AdjacencyMatrix::from_values(names, values)?.scrambled(symmetric, rng))
}

/// Largest eigenvalue modulus of a square row-major matrix.
pub fn spectral_radius(values: &[f64], n: usize) -> f64 {
    let m = DMatrix::from_row_slice(n, n, values);
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn hourly_timestamps(n: usize) -> Vec<chrono::NaiveDateTime> {
    let start = NaiveDate::from_ymd_opt(2020, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid start date");
    (0..n).map(|t| start + Duration::hours(t as i64)).collect()
}

fn noise(spec: &SyntheticSpec) -> Result<Normal<f64>> {
    Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(format!("noise distribution: {e}")))
}

/// `x_t = C x_{t-1} + e_t`, `e_t ~ N(0, noise_std^2)`, after a discarded burn-in.
pub fn generate_var1(spec: &SyntheticSpec) -> Result<RawSeries> {
    spec.check()?;
    let m = spec.channels;
    let rho = spectral_radius(&spec.coupling, m);
    if rho >= 1.0 {
        return Err(Error::Config(format!("coupling spectral radius {rho:.4} is not below 1")));
    }
    let dist = noise(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth.var1"));
    let mut x = vec![0.0; m];
    let mut values = Vec::with_capacity(spec.length * m);
    for t in 0..BURN_IN + spec.length {
        let next: Vec<f64> = (0..m)
            .map(|i| (0..m).map(|j| spec.coupling_at(i, j) * x[j]).sum::<f64>() + dist.sample(&mut rng))
            .collect();
        x = next;
        if t >= BURN_IN {
            values.extend_from_slice(&x);
        }
    }
    RawSeries::new(hourly_timestamps(spec.length), values, spec.column_names(), Freq::Hourly)
}

/// Angular frequency and phase of each channel's own sinusoid.
pub fn sine_parameters(spec: &SyntheticSpec) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth.phase"));
    (0..spec.channels)
        .map(|i| (TAU / (24.0 + 12.0 * i as f64), rng.random_range(0.0..TAU)))
        .collect()
}

/// `x_i(t) = sin(w_i t + p_i) + sum_j C[i, j] sin(w_j t) + noise`.
pub fn generate_coupled_sines(spec: &SyntheticSpec) -> Result<RawSeries> {
    spec.check()?;
    let m = spec.channels;
    let params = sine_parameters(spec);
    let dist = noise(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth.sines"));
    let mut values = Vec::with_capacity(spec.length * m);
    for t in 0..spec.length {
        let tf = t as f64;
        for (i, &(w, p)) in params.iter().enumerate() {
            let cross: f64 = params
                .iter()
                .enumerate()
                .map(|(j, &(wj, _))| spec.coupling_at(i, j) * (wj * tf).sin())
                .sum();
            let e = if spec.noise_std > 0.0 { dist.sample(&mut rng) } else { 0.0 };
            values.push((w * tf + p).sin() + cross + e);
        }
    }
    RawSeries::new(hourly_timestamps(spec.length), values, spec.column_names(), Freq::Hourly)
}

pub fn generate(spec: &SyntheticSpec) -> Result<RawSeries> {
    match spec.generator {
        Generator::Var1 => generate_var1(spec),
        Generator::CoupledSines => generate_coupled_sines(spec),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    TrueGraph,
    NoKge,
    Placebo,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::TrueGraph, Arm::NoKge, Arm::Placebo];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
    pub params: usize,
    pub best_epoch: usize,
    pub edges: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub mean_mse: f64,
    pub std_mse: f64,
    pub mean_mae: f64,
    pub std_mae: f64,
}

/// Per-seed `arm - NoKge` test-MSE differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedDiff {
    pub arm: Arm,
    pub mean: f64,
    pub std_err: f64,
}

impl PairedDiff {
    /// `|mean| <= k * std_err`; identical arms (zero spread, zero mean) pass.
    pub fn within(&self, k: f64) -> bool {
        self.mean.abs() <= k * self.std_err
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub horizon: usize,
    pub rows: Vec<ArmResult>,
    pub summary: Vec<ArmSummary>,
    pub paired: Vec<PairedDiff>,
    pub kge_extra_params: usize,
}

impl RunReport {
    pub fn summary_for(&self, arm: Arm) -> Option<&ArmSummary> {
        self.summary.iter().find(|s| s.arm == arm)
    }

    pub fn paired_for(&self, arm: Arm) -> Option<&PairedDiff> {
        self.paired.iter().find(|s| s.arm == arm)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<11} {:>6} {:>10} {:>10} {:>9}\n", "arm", "seed", "mse", "mae", "params");
        for r in &self.rows {
            out += &format!(
                "{:<11} {:>6} {:>10.5} {:>10.5} {:>9}\n",
                format!("{:?}", r.arm),
                r.seed,
                r.mse,
                r.mae,
                r.params
            );
        }
        for s in &self.summary {
            out += &format!(
                "{:<11} mean mse {:.5} (std {:.5}), mean mae {:.5} (std {:.5})\n",
                format!("{:?}", s.arm),
                s.mean_mse,
                s.std_mse,
                s.mean_mae,
                s.std_mae
            );
        }
        for p in &self.paired {
            out += &format!(
                "{:<11} minus NoKge: {:+.5} +/- {:.5} (std err)\n",
                format!("{:?}", p.arm),
                p.mean,
                p.std_err
            );
        }
        out
    }
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for n < 2).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Which arms to train.
#[derive(Clone, Debug)]
pub struct AbOptions {
    pub arms: Vec<Arm>,
    pub dataset: String,
    pub scheme: SplitScheme,
}

impl Default for AbOptions {
    fn default() -> Self {
        Self {
            arms: Arm::ALL.to_vec(),
            dataset: "synthetic".into(),
            scheme: SplitScheme::RATIO,
        }
    }
}

/// Trains every arm for every seed on the same windows and reports test metrics.
///
/// All arms share the model and training config except `use_kge` and the
/// adjacency; the placebo arm uses a random graph with the true edge count.
pub fn run_ab(
    series: &RawSeries,
    graph: &AdjacencyMatrix,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    opts: &AbOptions,
    mut progress: impl FnMut(&ArmResult),
) -> Result<RunReport> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    if graph.size() != series.channels() {
        return Err(Error::Config(format!(
            "graph has {} nodes but the series has {} channels",
            graph.size(),
            series.channels()
        )));
    }
    let shape = WindowShape {
        lookback: model.lookback,
        label_len: model.label_len,
        horizon: model.horizon,
    };
    let data = Prepared::new(&opts.dataset, series, opts.scheme, shape)?;
    let (train_set, val_set, test_set) = (
        data.windows(data.split.train.clone(), shape),
        data.windows(data.split.val.clone(), shape),
        data.windows(data.split.test.clone(), shape),
    );
    let symmetric = graph.is_symmetric();
    let mut rows = Vec::new();
    let mut param_counts = [None::<usize>; 2];
    for &seed in seeds {
        for &arm in &opts.arms {
            let (use_kge, adj) = match arm {
                Arm::TrueGraph => (true, graph.clone()),
                Arm::NoKge => (false, graph.clone()),
                Arm::Placebo => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "placebo"));
                    (true, graph.scrambled(symmetric, &mut rng))
                }
            };
            let cfg = ModelConfig {
                use_kge,
                channels: series.channels(),
                ..model.clone()
            };
            let mut net = Transformer::<f32>::new(cfg, Some(adj.clone()), seed)?;
            let tc = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            let history = train(&mut net, &train_set, &val_set, &tc)?;
            let metrics = evaluate(&net, &test_set, &opts.dataset, seed)?;
            param_counts[usize::from(use_kge)] = Some(net.param_count());
            let row = ArmResult {
                arm,
                seed,
                mse: metrics.mse,
                mae: metrics.mae,
                params: net.param_count(),
                best_epoch: history.best_epoch,
                edges: adj.off_diagonal_count(),
            };
            progress(&row);
            rows.push(row);
        }
    }

    let expected_extra = series.channels() * model.d_model
        + (model.lookback + model.label_len + model.horizon) * model.d_model;
    let kge_extra_params = match param_counts {
        [Some(off), Some(on)] => {
            let extra = on - off;
            if extra != expected_extra {
                return Err(Error::Contract(format!(
                    "graph embedding added {extra} parameters, expected {expected_extra}"
                )));
            }
            extra
        }
        _ => expected_extra,
    };

    let summary = opts
        .arms
        .iter()
        .map(|&arm| {
            let mse: Vec<f64> = rows.iter().filter(|r| r.arm == arm).map(|r| r.mse).collect();
            let mae: Vec<f64> = rows.iter().filter(|r| r.arm == arm).map(|r| r.mae).collect();
            let (mean_mse, std_mse) = mean_std(&mse);
            let (mean_mae, std_mae) = mean_std(&mae);
            ArmSummary {
                arm,
                mean_mse,
                std_mse,
                mean_mae,
                std_mae,
            }
        })
        .collect();

    let paired = if opts.arms.contains(&Arm::NoKge) {
        opts.arms
            .iter()
            .filter(|&&a| a != Arm::NoKge)
            .map(|&arm| {
                let diffs: Vec<f64> = seeds
                    .iter()
                    .filter_map(|&s| {
                        let a = rows.iter().find(|r| r.arm == arm && r.seed == s)?;
                        let b = rows.iter().find(|r| r.arm == Arm::NoKge && r.seed == s)?;
                        Some(a.mse - b.mse)
                    })
                    .collect();
                let (mean, std) = mean_std(&diffs);
                PairedDiff {
                    arm,
                    mean,
                    std_err: std / (diffs.len() as f64).sqrt(),
                }
            })
            .collect()
    } else {
        Vec::new()
    };

    Ok(RunReport {
        dataset: opts.dataset.clone(),
        horizon: model.horizon,
        rows,
        summary,
        paired,
        kge_extra_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let (ma, _) = mean_std(a);
        let (mb, _) = mean_std(b);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn column(s: &RawSeries, c: usize) -> Vec<f64> {
        (0..s.len()).map(|t| s.row(t)[c]).collect()
    }

    #[test]
    fn uncoupled_var_channels_are_uncorrelated() {
        let spec = SyntheticSpec::new(3, 10_000, Generator::Var1, 1);
        let s = generate_var1(&spec).unwrap();
        assert_eq!(s.len(), 10_000);
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let r = corr(&column(&s, a), &column(&s, b));
            assert!(r.abs() < 0.05, "rho({a},{b}) = {r}");
        }
    }

    #[test]
    fn ar1_lag_one_autocorrelation() {
        let mut spec = SyntheticSpec::new(2, 10_000, Generator::Var1, 2);
        spec.coupling = vec![0.9, 0.0, 0.0, 0.9];
        let s = generate_var1(&spec).unwrap();
        for c in 0..2 {
            let x = column(&s, c);
            let r = corr(&x[..x.len() - 1], &x[1..]);
            assert!((r - 0.9).abs() < 0.02, "channel {c}: {r}");
        }
    }

    #[test]
    fn unstable_coupling_rejected() {
        let mut spec = SyntheticSpec::new(2, 100, Generator::Var1, 0);
        spec.coupling = vec![0.5, 0.8, 0.8, 0.5];
        assert!((spectral_radius(&spec.coupling, 2) - 1.3).abs() < 1e-12);
        assert!(matches!(generate_var1(&spec), Err(Error::Config(_))));
        // Complex pair with modulus above one.
        spec.coupling = vec![0.0, -1.1, 1.1, 0.0];
        assert!(generate_var1(&spec).is_err());
    }

    #[test]
    fn generators_are_deterministic() {
        for g in [Generator::Var1, Generator::CoupledSines] {
            let spec = SyntheticSpec::new(3, 500, g, 9);
            assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
            let other = SyntheticSpec { seed: 10, ..spec.clone() };
            assert_ne!(generate(&spec).unwrap().values, generate(&other).unwrap().values);
        }
    }

    #[test]
    fn hourly_timestamps_exercise_marks() {
        let s = generate(&SyntheticSpec::new(2, 30, Generator::Var1, 0)).unwrap();
        assert_eq!(s.freq, Freq::Hourly);
        assert_eq!((s.timestamps[25] - s.timestamps[24]).num_seconds(), 3600);
        assert_eq!(s.column_names, vec!["x0", "x1"]);
    }

    #[test]
    fn pure_sines_are_periodic() {
        let mut spec = SyntheticSpec::new(2, 200, Generator::CoupledSines, 3);
        spec.noise_std = 0.0;
        let s = generate_coupled_sines(&spec).unwrap();
        // Periods 24 and 36 hours.
        for t in 0..100 {
            assert!((s.row(t)[0] - s.row(t + 24)[0]).abs() < 1e-9);
            assert!((s.row(t)[1] - s.row(t + 36)[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_term_is_linear_in_coupling() {
        let mut base = SyntheticSpec::new(2, 100, Generator::CoupledSines, 4);
        base.noise_std = 0.0;
        let plain = generate_coupled_sines(&base).unwrap();
        let mut one = base.clone();
        one.coupling = vec![0.0, 0.3, 0.0, 0.0];
        let mut two = base.clone();
        two.coupling = vec![0.0, 0.6, 0.0, 0.0];
        let (s1, s2) = (generate_coupled_sines(&one).unwrap(), generate_coupled_sines(&two).unwrap());
        for t in 0..100 {
            let d1 = s1.row(t)[0] - plain.row(t)[0];
            let d2 = s2.row(t)[0] - plain.row(t)[0];
            assert!((d2 - 2.0 * d1).abs() < 1e-12);
            assert_eq!(s1.row(t)[1], plain.row(t)[1]);
        }
    }

    #[test]
    fn spectral_peak_at_channel_frequency() {
        let mut spec = SyntheticSpec::new(3, 720, Generator::CoupledSines, 5);
        spec.noise_std = 0.1;
        let s = generate_coupled_sines(&spec).unwrap();
        let n = s.len();
        for (c, &(w, _)) in sine_parameters(&spec).iter().enumerate() {
            let x = column(&s, c);
            let power = |k: usize| {
                let f = TAU * k as f64 / n as f64;
                let (re, im) = x.iter().enumerate().fold((0.0, 0.0), |(re, im), (t, v)| {
                    (re + v * (f * t as f64).cos(), im - v * (f * t as f64).sin())
                });
                re * re + im * im
            };
            let peak = (1..n / 2).max_by(|&a, &b| power(a).total_cmp(&power(b))).unwrap();
            let expected = (w * n as f64 / TAU).round() as usize;
            assert_eq!(peak, expected, "channel {c}");
        }
    }

    #[test]
    fn coupling_follows_edges() {
        let names = ["a", "b", "c"].map(String::from).to_vec();
        let adj = AdjacencyMatrix::from_values(names, vec![0, 1, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        let c = coupling_from_graph(&adj, 0.5, 0.3);
        assert_eq!(c, vec![0.5, 0.0, 0.0, 0.3, 0.5, 0.0, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn random_graph_edge_counts() {
        let names: Vec<String> = (0..5).map(|i| format!("n{i}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_graph(names.clone(), 6, false, &mut rng).unwrap();
        assert_eq!(g.off_diagonal_count(), 6);
        let s = random_graph(names.clone(), 4, true, &mut rng).unwrap();
        assert!(s.is_symmetric());
        assert_eq!(s.off_diagonal_count(), 8);
        assert!(random_graph(names, 21, false, &mut rng).is_err());
    }

    #[test]
    fn mean_std_and_paired_rule() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
        assert!(PairedDiff { arm: Arm::Placebo, mean: 0.0, std_err: 0.0 }.within(2.0));
        assert!(!PairedDiff { arm: Arm::Placebo, mean: 0.1, std_err: 0.01 }.within(2.0));
    }
}
