//! Loss, learning-rate schedule, AdamW and the training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FieldPrediction, GaField, Injection, Prepared};
use crate::tensor::{Array, Real, Tape, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the upsampled coarse prediction in the loss.
    pub coarse_weight: Real,
    pub lr: Real,
    pub warmup: usize,
    pub weight_decay: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            coarse_weight: 0.3,
            lr: 1e-4,
            warmup: 3000,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 2,
            epochs: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for the small synthetic corpora used on a single CPU.
    pub fn desk() -> Self {
        Self {
            lr: 1e-2,
            warmup: 10,
            ..Self::default()
        }
    }

    /// Large-corpus settings.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 4,
            epochs: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.coarse_weight >= 0.0 && self.coarse_weight.is_finite()) {
            return bad("train.coarse_weight must be non-negative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("train.lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("train.weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("train.eps must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("train.batch_size and train.epochs must be positive");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }
}

/// Mean over points of `|output − y|₁ + w·|upsampled − y|₁`.
pub fn loss<'t>(pred: &FieldPrediction<'t>, y: &Var<'t>, coarse_weight: Real) -> Result<Var<'t>> {
    let out = pred.output.shape();
    if out != y.shape() || pred.upsampled.shape() != out {
        return Err(Error::arg(format!(
            "loss shape mismatch: prediction {out:?}, target {:?}",
            y.shape()
        )));
    }
    let n = out[0] as Real;
    let fine = pred.output.sub(y)?.abs()?.sum()?;
    let total = if coarse_weight == 0.0 {
        fine
    } else {
        let coarse = pred.upsampled.sub(y)?.abs()?.sum()?;
        fine.add(&coarse.scale(coarse_weight)?)?
    };
    Ok(total.scale(1.0 / n)?)
}

/// Linear warmup from 0 to `lr`, then cosine decay reaching 0 at `total`.
pub fn lr_at(step: usize, config: &TrainConfig, total: usize) -> Result<Real> {
    let warmup = config.warmup;
    if total < warmup {
        return Err(Error::Config(format!(
            "{total} total steps is fewer than {warmup} warmup steps"
        )));
    }
    if step < warmup {
        return Ok(config.lr * step as Real / warmup as Real);
    }
    if step >= total {
        return Ok(if total == warmup { config.lr } else { 0.0 });
    }
    let t = (step - warmup) as Real / (total - warmup) as Real;
    Ok(config.lr * 0.5 * (1.0 + (std::f64::consts::PI as Real * t).cos()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Array]) -> Self {
        let zeros = || params.iter().map(|p| Array::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    fn check(&self, params: &[Array]) -> Result<()> {
        let same =
            |xs: &[Array]| xs.len() == params.len() && xs.iter().zip(params).all(|(a, p)| a.shape() == p.shape());
        if same(&self.m) && same(&self.v) {
            Ok(())
        } else {
            Err(Error::arg("optimizer moments do not match the parameters"))
        }
    }
}

/// One AdamW update with decoupled weight decay. Nothing changes if any
/// gradient is non-finite.
pub fn adamw_step(
    params: &mut [Array],
    grads: &[Array],
    state: &mut OptimizerState,
    lr: Real,
    config: &TrainConfig,
) -> Result<()> {
    state.check(params)?;
    if grads.len() != params.len() || grads.iter().zip(params.iter()).any(|(g, p)| g.shape() != p.shape()) {
        return Err(Error::arg("gradients do not match the parameters"));
    }
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        return Err(Error::Diverged(format!(
            "non-finite gradient in parameter {i} at optimizer step {}",
            state.step + 1
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let shrink = lr * config.weight_decay;
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + config.eps);
            p[k] -= shrink * p[k];
        }
    }
    Ok(())
}

/// A prepared input with its normalized target.
#[derive(Clone, Debug)]
pub struct Example {
    pub name: String,
    pub input: Prepared,
    pub target: Array,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: Real,
    pub train_loss: Real,
    pub val_loss: Option<Real>,
}

impl LogRow {
    pub const HEADER: &'static str = "epoch,step,lr,train_loss,val_loss";

    pub fn csv_line(&self) -> String {
        let val = self.val_loss.map_or(String::new(), |v| format!("{v:?}"));
        format!("{},{},{:?},{:?},{val}", self.epoch, self.step, self.lr, self.train_loss)
    }
}

/// Loss and parameter gradients for one example.
pub fn example_gradients(model: &GaField, ex: &Example, coarse_weight: Real) -> Result<(Real, Vec<Array>)> {
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let pred = model.forward(&p, &tape, &ex.input, Injection::Full)?;
    let y = tape.constant(ex.target.clone());
    let l = loss(&pred, &y, coarse_weight)?;
    let value = l.value().item()?;
    let mut grads = tape.backward(l)?;
    Ok((value, p.vars().iter().map(|v| grads.take(*v)).collect()))
}

/// Mean loss over `examples` without gradients.
pub fn evaluate_loss(model: &GaField, examples: &[Example], coarse_weight: Real, mode: Injection) -> Result<Real> {
    if examples.is_empty() {
        return Err(Error::arg("no examples to evaluate"));
    }
    let losses = examples
        .par_iter()
        .map(|ex| {
            let tape = Tape::new();
            let p = model.params.bind_frozen(&tape);
            let pred = model.forward(&p, &tape, &ex.input, mode)?;
            let y = tape.constant(ex.target.clone());
            Ok(loss(&pred, &y, coarse_weight)?.value().item()?)
        })
        .collect::<Result<Vec<Real>>>()?;
    Ok(losses.iter().sum::<Real>() / losses.len() as Real)
}

/// Visit order of the training set in `epoch`, a pure function of the seed.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Model, optimizer and progress; everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: GaField,
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: Option<Real>,
}

impl Trainer {
    pub fn new(model: GaField, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(model.params.values());
        Ok(Self {
            model,
            config,
            optimizer,
            epoch: 0,
            best_val: None,
        })
    }

    pub fn step(&self) -> usize {
        self.optimizer.step as usize
    }

    /// One pass over the training set; returns the epoch's log row.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<LogRow> {
        let n = data.train.len();
        if n == 0 {
            return Err(Error::arg("training set is empty"));
        }
        let total = self.config.epochs * self.config.steps_per_epoch(n);
        let order = epoch_order(n, self.config.seed, self.epoch);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        let batches: Vec<&[usize]> = order.chunks(self.config.batch_size).collect();
        for batch in &batches {
            let results = batch
                .par_iter()
                .map(|&i| example_gradients(&self.model, &data.train[i], self.config.coarse_weight))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| self.non_finite_is_divergence(e))?;
            let scale = 1.0 / results.len() as Real;
            let mut batch_loss = 0.0;
            let mut grads: Vec<Array> = self
                .model
                .params
                .values()
                .iter()
                .map(|p| Array::zeros(p.shape()))
                .collect();
            for (l, g) in &results {
                batch_loss += l;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += b;
                    }
                }
            }
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss {batch_loss} at epoch {} step {}",
                    self.epoch + 1,
                    self.step() + 1
                )));
            }
            for g in &mut grads {
                for a in g.data_mut() {
                    *a *= scale;
                }
            }
            lr = lr_at(self.step() + 1, &self.config, total)?;
            adamw_step(
                self.model.params.values_mut(),
                &grads,
                &mut self.optimizer,
                lr,
                &self.config,
            )?;
            loss_sum += batch_loss;
        }
        self.epoch += 1;
        let val_loss = if data.val.is_empty() {
            None
        } else {
            let v = evaluate_loss(&self.model, &data.val, self.config.coarse_weight, Injection::Full)
                .map_err(|e| self.non_finite_is_divergence(e))?;
            if !v.is_finite() {
                return Err(Error::Diverged(format!("validation loss {v} at epoch {}", self.epoch)));
            }
            Some(v)
        };
        Ok(LogRow {
            epoch: self.epoch,
            step: self.step(),
            lr,
            train_loss: loss_sum / batches.len() as Real,
            val_loss,
        })
    }

    fn non_finite_is_divergence(&self, e: Error) -> Error {
        match e {
            Error::Tensor(TensorError::NonFinite { op }) => Error::Diverged(format!(
                "{op} produced a non-finite value at epoch {} step {}",
                self.epoch + 1,
                self.step() + 1
            )),
            other => other,
        }
    }

    /// Whether the latest validation loss is the best so far; updates the record.
    pub fn record_val(&mut self, row: &LogRow) -> bool {
        let score = row.val_loss.unwrap_or(row.train_loss);
        let better = self.best_val.is_none_or(|b| score < b);
        if better {
            self.best_val = Some(score);
        }
        better
    }

    /// Runs the remaining epochs, calling `after_epoch(trainer, row, is_best)` after each.
    pub fn fit(
        &mut self,
        data: &Dataset,
        after_epoch: impl FnMut(&Trainer, &LogRow, bool) -> Result<()>,
    ) -> Result<Vec<LogRow>> {
        self.fit_for(data, usize::MAX, after_epoch)
    }

    /// Like [`Trainer::fit`] but stopping after at most `max_epochs` epochs.
    pub fn fit_for(
        &mut self,
        data: &Dataset,
        max_epochs: usize,
        mut after_epoch: impl FnMut(&Trainer, &LogRow, bool) -> Result<()>,
    ) -> Result<Vec<LogRow>> {
        let mut log = Vec::new();
        while self.epoch < self.config.epochs && log.len() < max_epochs {
            let row = self.run_epoch(data)?;
            let best = self.record_val(&row);
            after_epoch(self, &row, best)?;
            log.push(row);
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_sphere_flow, FlowSpec};
    use crate::data::{FeatureRecipe, Task, TaskSpec};
    use crate::model::ModelConfig;
    use crate::tensor::gradcheck;

    fn micro() -> ModelConfig {
        ModelConfig {
            grid_sizes: vec![0.4, 0.8],
            channels: vec![8, 8],
            blocks_per_stage: 1,
            group_size: 4,
            token_size: 0.6,
            embed_width: 8,
            ..ModelConfig::default()
        }
    }

    fn example(n: usize, seed: u64) -> Example {
        let flow = FlowSpec {
            n_surface: n,
            ..FlowSpec::default()
        };
        let s = synth_sphere_flow(0.8 + 0.05 * seed as Real, &flow, seed).unwrap();
        let spec = TaskSpec::new(Task::Pressure, flow.inflow, FeatureRecipe::Surface).unwrap();
        let pc = s.task_cloud(&spec).unwrap();
        let model = GaField::new(micro(), 0).unwrap();
        let q = 0.5 * flow.speed * flow.speed;
        Example {
            name: s.meta.name.clone(),
            input: model.prepare(&pc, &s.meta.condition).unwrap(),
            target: pc.targets().unwrap().map(|p| p / q),
        }
    }

    fn pair<'t>(tape: &'t Tape, out: &[Real], up: &[Real]) -> FieldPrediction<'t> {
        let n = out.len();
        let o = tape.leaf(Array::matrix(n, 1, out.to_vec()).unwrap());
        let u = tape.leaf(Array::matrix(n, 1, up.to_vec()).unwrap());
        FieldPrediction {
            coarse: u,
            upsampled: u,
            residual: o.sub(&u).unwrap(),
            output: o,
        }
    }

    #[test]
    fn loss_examples() {
        let tape = Tape::new();
        let y = tape.constant(Array::matrix(2, 1, vec![0.0, 0.0]).unwrap());
        let p = pair(&tape, &[1.0, -1.0], &[2.0, 2.0]);
        assert!((loss(&p, &y, 0.3).unwrap().value().item().unwrap() - 1.6).abs() < 1e-15);
        let exact = pair(&tape, &[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(loss(&exact, &y, 0.3).unwrap().value().item().unwrap(), 0.0);

        let yv = [0.5, -2.0, 3.25];
        let ov = [1.0, 1.0, -1.0];
        let y = tape.constant(Array::matrix(3, 1, yv.to_vec()).unwrap());
        let p = pair(&tape, &ov, &[9.0, 9.0, 9.0]);
        let direct: Real = ov.iter().zip(&yv).map(|(a, b)| (a - b).abs()).sum::<Real>() * (1.0 / 3.0);
        assert_eq!(loss(&p, &y, 0.0).unwrap().value().item().unwrap(), direct);

        let bad = tape.constant(Array::zeros(&[2, 1]));
        assert!(loss(&p, &bad, 0.3).is_err());
    }

    #[test]
    fn loss_subgradients_are_bounded() {
        let yv = Array::matrix(4, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8]).unwrap();
        let out = Array::matrix(4, 2, vec![1.0, -1.0, 0.5, 0.2, -0.5, 0.3, 0.0, 2.0]).unwrap();
        let up = Array::matrix(4, 2, vec![0.3, 0.1, 0.2, -0.9, 1.1, 0.0, 0.4, 0.6]).unwrap();
        let tape = Tape::new();
        let o = tape.leaf(out.clone());
        let u = tape.leaf(up.clone());
        let pred = FieldPrediction {
            coarse: u,
            upsampled: u,
            residual: o.sub(&u).unwrap(),
            output: o,
        };
        let l = loss(&pred, &tape.constant(yv.clone()), 0.3).unwrap();
        let g = tape.backward(l).unwrap().wrt(o);
        assert!(g.data().iter().all(|v| (v.abs() - 0.25).abs() < 1e-15));
        let report = gradcheck::check(&[out, up], 1e-6, |t, v| {
            let pred = FieldPrediction {
                coarse: v[1],
                upsampled: v[1],
                residual: v[0].sub(&v[1])?,
                output: v[0],
            };
            loss(&pred, &t.constant(yv.clone()), 0.3)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn schedule() {
        let c = TrainConfig {
            lr: 1e-3,
            warmup: 100,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &c, 1100).unwrap(), 0.0);
        assert_eq!(lr_at(100, &c, 1100).unwrap(), 1e-3);
        assert!((lr_at(600, &c, 1100).unwrap() - 5e-4).abs() < 1e-12);
        assert_eq!(lr_at(1100, &c, 1100).unwrap(), 0.0);
        assert!((lr_at(99, &c, 1100).unwrap() - lr_at(101, &c, 1100).unwrap()).abs() < 2e-5);
        assert!(lr_at(0, &c, 50).is_err());
        let flat = TrainConfig { warmup: 0, ..c };
        assert_eq!(lr_at(0, &flat, 10).unwrap(), 1e-3);
    }

    #[test]
    fn adamw_closed_forms() {
        let c = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = vec![Array::scalar(1.0)];
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &[Array::scalar(1.0)], &mut s, 0.01, &c).unwrap();
        assert!((p[0].item().unwrap() - 0.99).abs() < 1e-9);
        assert_eq!(s.step, 1);

        let mut p = vec![Array::from_vec(vec![1.0, -2.0])];
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &[Array::zeros(&[2])], &mut s, 0.01, &c).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);

        let decay = TrainConfig {
            weight_decay: 0.1,
            ..c.clone()
        };
        adamw_step(&mut p, &[Array::zeros(&[2])], &mut s, 0.01, &decay).unwrap();
        let k = 1.0 - 0.01 * 0.1;
        assert_eq!(p[0].data(), &[1.0 * k - 0.0, -2.0 - 0.01 * 0.1 * -2.0]);
        assert!((p[0].data()[1] - -2.0 * k).abs() < 1e-15);

        let before = p.clone();
        let err = adamw_step(&mut p, &[Array::from_vec(vec![Real::NAN, 0.0])], &mut s, 0.01, &c).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)));
        assert_eq!(p, before);
    }

    #[test]
    fn single_sample_loss_decreases() {
        let data = Dataset {
            train: vec![example(96, 1)],
            val: vec![],
        };
        let config = TrainConfig {
            lr: 1e-3,
            warmup: 5,
            batch_size: 1,
            epochs: 200,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(GaField::new(micro(), 3).unwrap(), config).unwrap();
        let log: Vec<LogRow> = (0..10).map(|_| t.run_epoch(&data).unwrap()).collect();
        for w in log.windows(2) {
            assert!(w[1].train_loss < w[0].train_loss, "{log:?}");
        }
    }

    #[test]
    fn coarse_weight_is_live() {
        let data = Dataset {
            train: vec![example(64, 1), example(64, 2)],
            val: vec![],
        };
        let run = |w: Real| {
            let config = TrainConfig {
                coarse_weight: w,
                lr: 3e-3,
                warmup: 2,
                epochs: 10,
                ..TrainConfig::default()
            };
            let mut t = Trainer::new(GaField::new(micro(), 3).unwrap(), config).unwrap();
            t.fit(&data, |_, _, _| Ok(())).unwrap();
            let ex = &data.train[0];
            let tape = Tape::new();
            let p = t.model.params.bind_frozen(&tape);
            let pred = t.model.forward(&p, &tape, &ex.input, Injection::Full).unwrap();
            let diff = pred.upsampled.value().zip_map(&ex.target, |a, b| (a - b).abs());
            diff.sum()
        };
        assert_ne!(run(0.0), run(0.3));
    }

    #[test]
    fn runs_are_reproducible_and_resumable() {
        let data = Dataset {
            train: vec![example(48, 1), example(48, 2), example(48, 3)],
            val: vec![example(48, 4)],
        };
        let config = TrainConfig {
            lr: 3e-3,
            warmup: 2,
            epochs: 4,
            ..TrainConfig::default()
        };
        let fresh = || Trainer::new(GaField::new(micro(), 5).unwrap(), config.clone()).unwrap();
        let mut a = fresh();
        let log_a = a.fit(&data, |_, _, _| Ok(())).unwrap();
        let mut b = fresh();
        let mut half = None;
        let log_b = b
            .fit(&data, |t, _, _| {
                if t.epoch == 2 {
                    half = Some(t.clone());
                }
                Ok(())
            })
            .unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(a.model.params.values(), b.model.params.values());
        let mut c = half.unwrap();
        c.fit(&data, |_, _, _| Ok(())).unwrap();
        assert_eq!(c.model.params.values(), a.model.params.values());
        assert_eq!(c.optimizer, a.optimizer);
        assert_eq!(log_a.len(), 4);
        assert!(log_a.iter().all(|r| r.val_loss.is_some()));
        assert_eq!(log_a[3].step, 8);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(10, 7, 3);
        assert_eq!(a, epoch_order(10, 7, 3));
        assert_ne!(a, epoch_order(10, 7, 4));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
    }
}
