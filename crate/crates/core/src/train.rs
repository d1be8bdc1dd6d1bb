//! Losses, the Adam optimizer and the epoch loop with early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{WindowSample, WindowSet};
use crate::error::{Error, Result};
use crate::model::{Pass, Transformer};
use crate::numerics::{Real, Session, Tensor, Var};
use crate::seed::derive_seed;

/// How the squared error of one `H x M` forecast is reduced to a scalar.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Mean over all `H * M` entries.
    #[default]
    Mean,
    /// Per-channel squared norm summed over `H`, averaged over `M`.
    ChannelSum,
}

fn check_pair<T: Real>(op: &'static str, pred: &Tensor<T>, truth: &Tensor<T>) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(op, pred.shape(), truth.shape()));
    }
    Ok(())
}

/// Differentiable squared-error loss on the tape.
pub fn mse_loss<T: Real>(sess: &mut Session<'_, T>, pred: Var, truth: &Tensor<T>, reduction: LossReduction) -> Result<Var> {
    if sess.tape.shape(pred) != truth.shape() {
        return Err(Error::shape("mse_loss", sess.tape.shape(pred), truth.shape()));
    }
    let t = sess.tape.constant(truth.clone());
    let diff = sess.tape.sub(pred, t)?;
    let sq = sess.tape.square(diff);
    Ok(match reduction {
        LossReduction::Mean => sess.tape.mean(sq),
        LossReduction::ChannelSum => {
            let m = truth.last_dim().max(1);
            let s = sess.tape.sum(sq);
            sess.tape.scale(s, T::one() / T::of(m as f64))
        }
    })
}

/// Mean squared error over all entries, accumulated in `f64`.
pub fn mse<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    check_pair("mse", pred, truth)?;
    let n = pred.numel().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / n)
}

/// Mean absolute error over all entries.
pub fn mae<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    check_pair("mae", pred, truth)?;
    let n = pred.numel().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
        .sum::<f64>()
        / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Halve the learning rate at the start of every epoch after the first.
    pub lr_decay: bool,
    pub seed: u64,
    pub grad_clip_norm: f64,
    /// Stop after this many optimizer steps regardless of epoch boundaries.
    pub max_steps: Option<usize>,
    pub loss: LossReduction,
    /// Evaluate validation loss on every `val_stride`-th window.
    pub val_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 10,
            patience: 3,
            lr_decay: true,
            seed: 0,
            grad_clip_norm: 5.0,
            max_steps: None,
            loss: LossReduction::Mean,
            val_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.batch_size > 0
            && self.max_epochs > 0
            && self.patience > 0
            && self.grad_clip_norm > 0.0
            && self.val_stride > 0
            && self.max_steps != Some(0);
        if !ok {
            return Err(Error::Config(format!("training settings must be positive: {self:?}")));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if self.lr_decay {
            self.learning_rate * 0.5f64.powi(epoch.saturating_sub(1) as i32)
        } else {
            self.learning_rate
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("adam_step", &[params.len(), grads.len()], &[self.m.len()]));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 / (1.0 - b1.powi(self.step as i32));
        let c2 = 1.0 / (1.0 - b2.powi(self.step as i32));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gf = gi.as_f64();
                let mf = b1 * mi.as_f64() + (1.0 - b1) * gf;
                let vf = b2 * vi.as_f64() + (1.0 - b2) * gf * gf;
                *mi = T::of(mf);
                *vi = T::of(vf);
                let update = lr * (mf * c1) / ((vf * c2).sqrt() + self.eps);
                *pi = T::of(pi.as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Tracks the best validation loss and when to stop.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records one epoch; returns true if this epoch is the new best.
    pub fn observe(&mut self, epoch: usize, val: f64) -> bool {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

/// Random-access collection of training examples.
pub trait SampleSource<T> {
    fn len(&self) -> usize;
    fn sample(&self, i: usize) -> WindowSample<T>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Real> SampleSource<T> for WindowSet<'_> {
    fn len(&self) -> usize {
        WindowSet::len(self)
    }

    fn sample(&self, i: usize) -> WindowSample<T> {
        self.get(i)
    }
}

impl<T: Real> SampleSource<T> for [WindowSample<T>] {
    fn len(&self) -> usize {
        <[_]>::len(self)
    }

    fn sample(&self, i: usize) -> WindowSample<T> {
        self[i].clone()
    }
}

impl<T: Real> SampleSource<T> for Vec<WindowSample<T>> {
    fn len(&self) -> usize {
        <Vec<_>>::len(self)
    }

    fn sample(&self, i: usize) -> WindowSample<T> {
        self[i].clone()
    }
}

/// Every `stride`-th window of `inner`.
pub struct Strided<'a, S: ?Sized> {
    pub inner: &'a S,
    pub stride: usize,
}

impl<T, S: SampleSource<T> + ?Sized> SampleSource<T> for Strided<'_, S> {
    fn len(&self) -> usize {
        self.inner.len().div_ceil(self.stride.max(1))
    }

    fn sample(&self, i: usize) -> WindowSample<T> {
        self.inner.sample(i * self.stride.max(1))
    }
}

/// Loss of one sample plus gradients for every parameter (zeros where unused).
pub fn loss_and_grads<T: Real>(
    model: &Transformer<T>,
    sample: &WindowSample<T>,
    reduction: LossReduction,
    pass: &mut Pass<'_>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut grads = model.params.zeros_like();
    let loss = accumulate_sample(model, sample, reduction, pass, &mut grads)?;
    Ok((loss, grads))
}

fn accumulate_sample<T: Real>(
    model: &Transformer<T>,
    sample: &WindowSample<T>,
    reduction: LossReduction,
    pass: &mut Pass<'_>,
    acc: &mut [Tensor<T>],
) -> Result<f64> {
    let mut sess = Session::new(&model.params);
    let pred = model.forecast_var(&mut sess, sample, pass)?;
    let loss = mse_loss(&mut sess, pred, &sample.y, reduction)?;
    let value = sess.tape.value(loss).data()[0].as_f64();
    if value.is_finite() {
        sess.accumulate_grads(loss, acc)?;
    }
    Ok(value)
}

/// Eval-mode loss of one sample.
pub fn sample_loss<T: Real>(model: &Transformer<T>, sample: &WindowSample<T>, reduction: LossReduction) -> Result<f64> {
    let mut sess = Session::new(&model.params);
    let pred = model.forecast_var(&mut sess, sample, &mut Pass::eval())?;
    let loss = mse_loss(&mut sess, pred, &sample.y, reduction)?;
    Ok(sess.tape.value(loss).data()[0].as_f64())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub steps: usize,
    pub stopped_early: bool,
}

/// Minibatch Adam training with validation early stopping. On return the
/// model holds the parameters of the best validation epoch.
pub fn train<T, S, V>(model: &mut Transformer<T>, train_set: &S, val_set: &V, cfg: &TrainConfig) -> Result<History>
where
    T: Real,
    S: SampleSource<T> + ?Sized,
    V: SampleSource<T> + ?Sized,
{
    train_with(model, train_set, val_set, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with<T, S, V>(
    model: &mut Transformer<T>,
    train_set: &S,
    val_set: &V,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History>
where
    T: Real,
    S: SampleSource<T> + ?Sized,
    V: SampleSource<T> + ?Sized,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set has no windows".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Config("validation set has no windows".into()));
    }
    let mut adam = Adam::new(model.params.tensors());
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batches"));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dropout"));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = model.params.tensors().to_vec();
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let val = Strided {
        inner: val_set,
        stride: cfg.val_stride,
    };

    'epochs: for epoch in 1..=cfg.max_epochs {
        let lr = cfg.lr_for_epoch(epoch);
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut seen, mut epoch_steps) = (0.0, 0usize, 0usize);
        let mut budget_hit = false;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.params.zeros_like();
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = train_set.sample(i);
                let l = accumulate_sample(model, &s, cfg.loss, &mut Pass::train(&mut dropout_rng), &mut grads)?;
                if !l.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        step: history.steps,
                        loss: l,
                    });
                }
                batch_loss += l;
            }
            let inv = T::of(1.0 / batch.len() as f64);
            for g in &mut grads {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
            let norm = clip_grad_norm(&mut grads, cfg.grad_clip_norm);
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: history.steps,
                    loss: norm,
                });
            }
            adam.step(model.params.tensors_mut(), &grads, lr)?;
            history.steps += 1;
            epoch_steps += 1;
            loss_sum += batch_loss;
            seen += batch.len();
            if cfg.max_steps.is_some_and(|m| history.steps >= m) {
                budget_hit = true;
                break;
            }
        }
        let val_mse = mean_loss(model, &val, cfg.loss)?;
        if !val_mse.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: history.steps,
                loss: val_mse,
            });
        }
        let record = EpochRecord {
            epoch,
            train_mse: loss_sum / seen.max(1) as f64,
            val_mse,
            lr,
            steps: epoch_steps,
        };
        on_epoch(&record);
        history.epochs.push(record);
        if stopper.observe(epoch, val_mse) {
            best_params.clone_from_slice(model.params.tensors());
        }
        if budget_hit {
            break 'epochs;
        }
        if stopper.should_stop() {
            history.stopped_early = true;
            break;
        }
    }
    model.params.load(&best_params)?;
    history.best_epoch = stopper.best_epoch;
    history.best_val_mse = stopper.best;
    Ok(history)
}

/// Eval-mode mean loss over a sample source.
pub fn mean_loss<T: Real, S: SampleSource<T> + ?Sized>(model: &Transformer<T>, set: &S, reduction: LossReduction) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let mut total = 0.0;
    for i in 0..set.len() {
        total += sample_loss(model, &set.sample(i), reduction)?;
    }
    Ok(total / set.len() as f64)
}

/// Test-set metrics on the standardized scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dataset: String,
    pub horizon: usize,
    pub use_kge: bool,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
}

/// Averages MSE and MAE over every window in eval mode.
pub fn evaluate<T: Real, S: SampleSource<T> + ?Sized>(
    model: &Transformer<T>,
    set: &S,
    dataset: &str,
    seed: u64,
) -> Result<MetricsRecord> {
    if set.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let (mut se, mut ae) = (0.0, 0.0);
    for i in 0..set.len() {
        let s = set.sample(i);
        let pred = model.forecast(&s)?;
        se += mse(&pred, &s.y)?;
        ae += mae(&pred, &s.y)?;
    }
    let n = set.len() as f64;
    Ok(MetricsRecord {
        dataset: dataset.to_string(),
        horizon: model.config.horizon,
        use_kge: model.config.use_kge,
        seed,
        mse: se / n,
        mae: ae / n,
    })
}

/// One JSON-lines log entry; fields that do not apply are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub dataset: String,
    pub horizon: usize,
    pub use_kge: bool,
    pub seed: u64,
    pub epoch: Option<usize>,
    pub train_mse: Option<f64>,
    pub val_mse: Option<f64>,
    pub test_mse: Option<f64>,
    pub test_mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config_hash: Option<String>,
}

impl LogRecord {
    pub fn epoch(dataset: &str, horizon: usize, use_kge: bool, seed: u64, e: &EpochRecord) -> Self {
        Self {
            dataset: dataset.to_string(),
            horizon,
            use_kge,
            seed,
            epoch: Some(e.epoch),
            train_mse: Some(e.train_mse),
            val_mse: Some(e.val_mse),
            test_mse: None,
            test_mae: None,
            config_hash: None,
        }
    }

    pub fn test(m: &MetricsRecord) -> Self {
        Self {
            dataset: m.dataset.clone(),
            horizon: m.horizon,
            use_kge: m.use_kge,
            seed: m.seed,
            epoch: None,
            train_mse: None,
            val_mse: None,
            test_mse: Some(m.mse),
            test_mae: Some(m.mae),
            config_hash: None,
        }
    }

    pub fn with_hash(mut self, hash: &str) -> Self {
        self.config_hash = Some(hash.to_string());
        self
    }

    pub fn to_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Freq, Prepared, SplitScheme, WindowShape};
    use crate::model::ModelConfig;
    use crate::synth::{generate, Generator, SyntheticSpec};

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn loss_examples() {
        let z = t(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let r = t(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(mse(&r, &r).unwrap(), 0.0);
        assert_eq!(mse(&r, &z).unwrap(), 7.5);
        assert_eq!(mse(&Tensor::full([3, 2], 1.0), &Tensor::zeros([3, 2])).unwrap(), 1.0);
        assert_eq!(mae(&r, &r).unwrap(), 0.0);
        assert_eq!(mae(&t(&[vec![-1.0, 1.0]]), &t(&[vec![0.0, 0.0]])).unwrap(), 1.0);
        assert_eq!(mae(&r, &z).unwrap(), 2.5);
        assert!(matches!(mse(&r, &Tensor::zeros([2, 3])), Err(Error::Shape { .. })));
        assert!(mae(&r, &Tensor::zeros([4])).is_err());
    }

    #[test]
    fn tape_loss_value_and_closed_form_gradient() {
        let store = crate::numerics::ParamStore::<f64>::new();
        let mut sess = Session::new(&store);
        let pred = t(&[vec![1.5, -2.0, 0.5], vec![3.0, 0.0, 1.0]]);
        let truth = t(&[vec![0.5, -1.0, 0.0], vec![1.0, 0.5, 1.0]]);
        let p = sess.tape.leaf(pred.clone(), true);
        let l = mse_loss(&mut sess, p, &truth, LossReduction::Mean).unwrap();
        assert!((sess.tape.value(l).data()[0] - mse(&pred, &truth).unwrap()).abs() < 1e-15);
        let g = sess.tape.backward(l).unwrap();
        for ((gi, a), b) in g.get(p).unwrap().iter().zip(pred.data()).zip(truth.data()) {
            assert!((gi - 2.0 / 6.0 * (a - b)).abs() < 1e-15);
        }
        let raw = mse_loss(&mut sess, p, &truth, LossReduction::ChannelSum).unwrap();
        assert!((sess.tape.value(raw).data()[0] - 2.0 * sess.tape.value(l).data()[0]).abs() < 1e-12);
        assert!(mse_loss(&mut sess, p, &Tensor::zeros([3, 2]), LossReduction::Mean).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = vec![Tensor::from_fn([3], |i| i as f64 - 1.0)];
        let before = p.clone();
        let mut opt = Adam::new(&p);
        for _ in 0..50 {
            opt.step(&mut p, &[Tensor::zeros([3])], 1e-2).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let g = Tensor::from_rows(&[vec![0.3, -2.0, 1e-3, 0.0]]).unwrap();
        let mut p = vec![Tensor::zeros([1, 4])];
        let mut opt = Adam::new(&p);
        let lr = 0.01;
        opt.step(&mut p, std::slice::from_ref(&g), lr).unwrap();
        for (pi, &gi) in p[0].data().iter().zip(g.data()) {
            let want = -lr * gi / (gi.abs() + 1e-8);
            assert!((pi - want).abs() < 1e-12, "{pi} vs {want}");
        }
    }

    #[test]
    fn adam_trajectories_repeat() {
        let run = || {
            let mut p = vec![Tensor::from_fn([4], |i| i as f64)];
            let mut opt = Adam::new(&p);
            for k in 0..20 {
                let g = p[0].map(|x| x * 2.0 - k as f64 * 0.1);
                opt.step(&mut p, &[g], 1e-2).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Tensor::from_fn([2], |_| 3.0f64), Tensor::from_fn([2], |_| 4.0)];
        let before = clip_grad_norm(&mut g, 5.0);
        assert!((before - 50f64.sqrt()).abs() < 1e-12);
        let after: f64 = g.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
        assert!((after - 5.0).abs() < 1e-12);
        let mut small = vec![Tensor::from_fn([1], |_| 0.5f64)];
        clip_grad_norm(&mut small, 5.0);
        assert_eq!(small[0].data(), &[0.5]);
    }

    #[test]
    fn early_stopping_with_patience_one() {
        let mut es = EarlyStopping::new(1);
        assert!(es.observe(1, 1.0));
        assert!(!es.should_stop());
        assert!(!es.observe(2, 1.5));
        assert!(es.should_stop());
        assert_eq!(es.best_epoch, 1);
    }

    #[test]
    fn config_contracts() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { patience: 11, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        let c = TrainConfig::default();
        assert_eq!(c.lr_for_epoch(1), 1e-4);
        assert_eq!(c.lr_for_epoch(3), 2.5e-5);
    }

    fn tiny() -> (Prepared, ModelConfig) {
        let mut spec = SyntheticSpec::new(2, 400, Generator::CoupledSines, 3);
        spec.noise_std = 0.05;
        spec.coupling = vec![0.0, 0.4, 0.0, 0.0];
        let series = generate(&spec).unwrap();
        let shape = WindowShape {
            lookback: 16,
            label_len: 8,
            horizon: 4,
        };
        let data = Prepared::new("tiny", &series, SplitScheme::RATIO, shape).unwrap();
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_k: 8,
            d_v: 8,
            d_ff: 32,
            n_enc_layers: 1,
            ..ModelConfig::desk(16, 8, 4, 2, Freq::Hourly)
        };
        (data, cfg)
    }

    fn shape_of(c: &ModelConfig) -> WindowShape {
        WindowShape {
            lookback: c.lookback,
            label_len: c.label_len,
            horizon: c.horizon,
        }
    }

    #[test]
    fn training_restores_best_epoch_and_repeats() {
        let (data, cfg) = tiny();
        let shape = shape_of(&cfg);
        let tr = data.windows(data.split.train.clone(), shape);
        let va = data.windows(data.split.val.clone(), shape);
        let tc = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 3,
            patience: 3,
            seed: 5,
            ..Default::default()
        };
        let run = || {
            let mut m = Transformer::<f32>::new(cfg.clone(), None, 5).unwrap();
            let h = train(&mut m, &tr, &va, &tc).unwrap();
            (m, h)
        };
        let (m, h) = run();
        assert_eq!(h.epochs.len(), 3);
        let best = h.epochs.iter().map(|e| e.val_mse).fold(f64::INFINITY, f64::min);
        assert_eq!(h.best_val_mse, best);
        let restored = mean_loss(&m, &va, LossReduction::Mean).unwrap();
        assert!((restored - best).abs() < 1e-9, "{restored} vs {best}");
        assert!(h.epochs.iter().all(|e| e.epoch <= h.epochs.len()));
        let (m2, h2) = run();
        assert_eq!(h, h2);
        assert_eq!(m.params.tensors(), m2.params.tensors());
        let te = data.windows(data.split.test.clone(), shape);
        let a = evaluate(&m, &te, "tiny", 5).unwrap();
        assert_eq!(a, evaluate(&m, &te, "tiny", 5).unwrap());
        assert!(a.mse >= 0.0 && a.mae >= 0.0);
    }

    #[test]
    fn max_steps_budget_and_empty_sets() {
        let (data, cfg) = tiny();
        let shape = shape_of(&cfg);
        let tr = data.windows(data.split.train.clone(), shape);
        let va = data.windows(data.split.val.clone(), shape);
        let mut m = Transformer::<f32>::new(cfg.clone(), None, 1).unwrap();
        let tc = TrainConfig {
            max_steps: Some(3),
            batch_size: 4,
            ..Default::default()
        };
        let h = train(&mut m, &tr, &va, &tc).unwrap();
        assert_eq!((h.steps, h.epochs.len()), (3, 1));
        let empty: Vec<WindowSample<f32>> = Vec::new();
        assert!(train(&mut m, &empty, &va, &tc).is_err());
        assert!(matches!(evaluate(&m, &empty, "x", 0), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_predictor_on_standardized_data() {
        let (data, cfg) = tiny();
        let mut m = Transformer::<f32>::new(cfg.clone(), None, 1).unwrap();
        let (hw, hb) = m.head();
        for id in [hw, hb] {
            let shape = m.params.get(id).shape().to_vec();
            *m.params.get_mut(id) = Tensor::zeros(shape);
        }
        let all = data.windows(0..data.values.len() / 2, shape_of(&cfg));
        let r = evaluate(&m, &all, "tiny", 0).unwrap();
        assert!((r.mse - 1.0).abs() < 0.1, "{}", r.mse);
    }

    #[test]
    fn perfect_predictor_scores_zero() {
        let p = Tensor::from_fn([4, 2], |i| i as f32);
        assert_eq!((mse(&p, &p).unwrap(), mae(&p, &p).unwrap()), (0.0, 0.0));
    }

    #[test]
    fn divergence_is_reported() {
        let (data, cfg) = tiny();
        let shape = shape_of(&cfg);
        let tr = data.windows(data.split.train.clone(), shape);
        let va = data.windows(data.split.val.clone(), shape);
        let mut m = Transformer::<f32>::new(cfg, None, 1).unwrap();
        let (hw, _) = m.head();
        m.params.get_mut(hw).data_mut()[0] = f32::NAN;
        let err = train(&mut m, &tr, &va, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 1, step: 0, .. }), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn log_record_keys() {
        let m = MetricsRecord {
            dataset: "d".into(),
            horizon: 4,
            use_kge: true,
            seed: 2,
            mse: 0.5,
            mae: 0.25,
        };
        let v: serde_json::Value = serde_json::from_str(&LogRecord::test(&m).to_line().unwrap()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        for k in ["dataset", "horizon", "use_kge", "seed", "epoch", "train_mse", "val_mse", "test_mse", "test_mae"] {
            assert!(keys.contains(&k), "{k}");
        }
        assert_eq!(v["test_mae"], 0.25);
        assert!(v["epoch"].is_null());
    }
}
