//! Batch-normalized MLP classifier.
//!
//! Layout: `[affine -> BN -> relu] * hidden.len() -> affine`. During
//! adaptation only the BN scale/shift (`bn{i}.gamma`, `bn{i}.beta`) are
//! trainable, and normalization always uses the running statistics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{FeatureStats, LabeledDataset};
use crate::error::{Error, Result};
use crate::params::{Grads, ParamSet};
use crate::tape::{softmax_rows, GradScope, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub bn_eps: f64,
}

impl NetworkSpec {
    /// The default `d -> 64 -> 64 -> K` backbone.
    pub fn mlp(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64, 64],
            classes,
            bn_eps: DEFAULT_BN_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(
                "network dimensions must be positive".into(),
            ));
        }
        if self.classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        if !(self.bn_eps >= 0.0 && self.bn_eps.is_finite()) {
            return Err(Error::InvalidArgument(
                "bn_eps must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        format!(
            "{}->[{}]->{} (eps {})",
            self.input_dim,
            hidden.join(","),
            self.classes,
            self.bn_eps
        )
    }
}

/// Running normalization statistics of one BN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Owned snapshot of a BN layer's affine parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BnLayerState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

/// Population moments of a batch at the input of one BN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// How BN layers pick their normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Running statistics, held constant (no gradient through them).
    Running,
    /// The batch's own statistics, differentiated through.
    Batch,
}

/// `gamma * (z - mean) / sqrt(var + eps) + beta` with `mean`/`var` constant.
pub fn bn_running(
    tape: &mut Tape,
    z: Var,
    gamma: Var,
    beta: Var,
    stats: &RunningStats,
    eps: f64,
) -> Result<Var> {
    let mean = tape.constant(stats.mean.clone());
    let denom = tape.constant(stats.var.map(|v| (v + eps).sqrt()));
    let c = tape.sub_row(z, mean)?;
    let n = tape.div_row(c, denom)?;
    let s = tape.mul_row(n, gamma)?;
    tape.add_row(s, beta)
}

/// Training-mode normalization with the batch's own moments.
pub fn bn_batch(
    tape: &mut Tape,
    z: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<(Var, BnBatchStats)> {
    let mean = tape.col_mean(z);
    let c = tape.sub_row(z, mean)?;
    let sq = tape.square(c);
    let var = tape.col_mean(sq);
    let stats = BnBatchStats {
        mean: tape.value(mean).clone(),
        var: tape.value(var).clone(),
    };
    let denom = tape.sqrt_eps(var, eps);
    let n = tape.div_row(c, denom)?;
    let s = tape.mul_row(n, gamma)?;
    Ok((tape.add_row(s, beta)?, stats))
}

/// Predicted class and its softmax probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub confidence: f64,
}

/// Argmax (lowest index wins ties) and max softmax entry of one logit row.
pub fn prediction_from_logits(row: &[f64]) -> Prediction {
    let mut label = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[label] {
            label = i;
        }
    }
    let p = softmax_rows(&Tensor::from_parts(vec![1, row.len()], row.to_vec()));
    Prediction {
        label,
        confidence: p.data()[label],
    }
}

/// A recorded forward pass: the tape plus handles to its input and output.
#[derive(Debug)]
pub struct Graph {
    pub tape: Tape,
    pub input: Var,
    pub logits: Var,
}

#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Tensor,
    pub bn_stats: Vec<BnBatchStats>,
    pub graph: Option<Graph>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// SGD momentum.
    pub momentum: f64,
    /// EMA momentum for running statistics during training.
    pub bn_momentum: f64,
    /// L2 penalty on the affine weight matrices (not biases or BN parameters).
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            batch_size: 64,
            momentum: 0.9,
            bn_momentum: 0.1,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Mean cross-entropy per epoch.
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
    pub holdout_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: ParamSet,
    running: Vec<RunningStats>,
    source_stats: FeatureStats,
}

pub(crate) fn weight_name(i: usize) -> String {
    format!("l{i}.weight")
}
pub(crate) fn bias_name(i: usize) -> String {
    format!("l{i}.bias")
}
pub(crate) fn gamma_name(i: usize) -> String {
    format!("bn{i}.gamma")
}
pub(crate) fn beta_name(i: usize) -> String {
    format!("bn{i}.beta")
}
const HEAD_W: &str = "head.weight";
const HEAD_B: &str = "head.bias";

impl Network {
    /// Fresh network: Glorot-uniform weights, zero biases, identity BN.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut running = Vec::with_capacity(spec.hidden.len());
        let mut fan_in = spec.input_dim;
        let glorot = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Tensor::from_parts(vec![rows, cols], data)
        };
        for (i, &w) in spec.hidden.iter().enumerate() {
            params.insert(weight_name(i), glorot(fan_in, w, &mut rng), false)?;
            params.insert(bias_name(i), Tensor::zeros(&[1, w]), false)?;
            params.insert(gamma_name(i), Tensor::full(&[1, w], 1.0), true)?;
            params.insert(beta_name(i), Tensor::zeros(&[1, w]), true)?;
            running.push(RunningStats {
                mean: Tensor::zeros(&[1, w]),
                var: Tensor::full(&[1, w], 1.0),
            });
            fan_in = w;
        }
        params.insert(HEAD_W, glorot(fan_in, spec.classes, &mut rng), false)?;
        params.insert(HEAD_B, Tensor::zeros(&[1, spec.classes]), false)?;
        let source_stats = FeatureStats::identity(spec.input_dim);
        Ok(Self {
            spec,
            params,
            running,
            source_stats,
        })
    }

    pub(crate) fn from_parts(
        spec: NetworkSpec,
        params: ParamSet,
        running: Vec<RunningStats>,
        source_stats: FeatureStats,
    ) -> Self {
        Self {
            spec,
            params,
            running,
            source_stats,
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn running(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn running_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    pub fn num_bn_layers(&self) -> usize {
        self.running.len()
    }

    pub fn bn_state(&self, i: usize) -> BnLayerState {
        BnLayerState {
            gamma: self.params.get(&gamma_name(i)).expect("bn layer").clone(),
            beta: self.params.get(&beta_name(i)).expect("bn layer").clone(),
            running_mean: self.running[i].mean.clone(),
            running_var: self.running[i].var.clone(),
        }
    }

    pub fn source_stats(&self) -> &FeatureStats {
        &self.source_stats
    }

    /// Standardizes raw source-domain features with the stored training statistics.
    pub fn standardize_source(&self, raw: &Tensor) -> Result<Tensor> {
        self.source_stats.normalize(raw)
    }

    /// Builds the forward graph on `tape` from already-registered parameters.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        input: Var,
        mode: BnMode,
    ) -> Result<(Var, Vec<BnBatchStats>)> {
        self.build_forward(tape, vars, input, mode, None)
    }

    /// Inputs to every ReLU (the BN outputs), one tensor per hidden layer.
    pub fn pre_activations(&self, batch: &Tensor, mode: BnMode) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = self
            .params
            .iter()
            .map(|(n, p)| (n.to_string(), tape.constant(p.value.clone())))
            .collect();
        let input = tape.constant(batch.clone());
        let mut pre = Vec::with_capacity(self.running.len());
        self.build_forward(&mut tape, &vars, input, mode, Some(&mut pre))?;
        Ok(pre.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    fn build_forward(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        input: Var,
        mode: BnMode,
        mut pre: Option<&mut Vec<Var>>,
    ) -> Result<(Var, Vec<BnBatchStats>)> {
        let x = tape.value(input);
        if x.shape().len() != 2 || x.cols() != self.spec.input_dim || x.rows() == 0 {
            return Err(Error::Shape {
                op: "forward",
                lhs: x.shape().to_vec(),
                rhs: vec![self.spec.input_dim],
            });
        }
        let mut h = input;
        let mut stats = Vec::with_capacity(self.running.len());
        for i in 0..self.spec.hidden.len() {
            let z = tape.matmul(h, vars[&weight_name(i)])?;
            let z = tape.add_row(z, vars[&bias_name(i)])?;
            let (gamma, beta) = (vars[&gamma_name(i)], vars[&beta_name(i)]);
            let y = match mode {
                BnMode::Running => {
                    let zv = tape.value(z);
                    let mean = zv.col_mean();
                    stats.push(BnBatchStats {
                        var: zv.col_var(&mean),
                        mean,
                    });
                    bn_running(tape, z, gamma, beta, &self.running[i], self.spec.bn_eps)?
                }
                BnMode::Batch => {
                    let (y, s) = bn_batch(tape, z, gamma, beta, self.spec.bn_eps)?;
                    stats.push(s);
                    y
                }
            };
            if let Some(pre) = pre.as_deref_mut() {
                pre.push(y);
            }
            h = tape.relu(y);
        }
        let logits = tape.matmul(h, vars[HEAD_W])?;
        let logits = tape.add_row(logits, vars[HEAD_B])?;
        Ok((logits, stats))
    }

    /// Forward pass with running statistics. When `record_grads` is set the
    /// tape is returned with gradients enabled for trainable parameters and
    /// for the input.
    pub fn forward(&self, batch: &Tensor, record_grads: bool) -> Result<ForwardPass> {
        self.forward_mode(batch, record_grads, BnMode::Running, GradScope::Trainable)
    }

    pub fn forward_mode(
        &self,
        batch: &Tensor,
        record_grads: bool,
        mode: BnMode,
        scope: GradScope,
    ) -> Result<ForwardPass> {
        let mut tape = Tape::new();
        let vars = if record_grads {
            tape.register(&self.params, scope)
        } else {
            self.params
                .iter()
                .map(|(n, p)| (n.to_string(), tape.constant(p.value.clone())))
                .collect()
        };
        let input = if record_grads {
            tape.variable(batch.clone())
        } else {
            tape.constant(batch.clone())
        };
        let (logits, bn_stats) = self.forward_on(&mut tape, &vars, input, mode)?;
        let value = tape.value(logits).clone();
        let graph = record_grads.then_some(Graph {
            tape,
            input,
            logits,
        });
        Ok(ForwardPass {
            logits: value,
            bn_stats,
            graph,
        })
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(batch, false)?.logits)
    }

    /// Running-statistics EMA: `stat <- (1 - m) * stat + m * batch_stat`.
    pub fn ema_update(&mut self, stats: &[BnBatchStats], momentum: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "BN momentum {momentum} outside [0, 1]"
            )));
        }
        if stats.len() != self.running.len() {
            return Err(Error::Shape {
                op: "ema_update",
                lhs: vec![self.running.len()],
                rhs: vec![stats.len()],
            });
        }
        for (r, s) in self.running.iter().zip(stats) {
            if r.mean.shape() != s.mean.shape() || r.var.shape() != s.var.shape() {
                return Err(Error::Shape {
                    op: "ema_update",
                    lhs: r.mean.shape().to_vec(),
                    rhs: s.mean.shape().to_vec(),
                });
            }
        }
        for (r, s) in self.running.iter_mut().zip(stats) {
            ema_in_place(&mut r.mean, &s.mean, momentum);
            ema_in_place(&mut r.var, &s.var, momentum);
            r.var.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        Ok(())
    }

    pub fn predict_with_confidence(&self, x: &Tensor) -> Result<Prediction> {
        if x.rows() != 1 {
            return Err(Error::Contract(format!(
                "expected one sample, got {:?}",
                x.shape()
            )));
        }
        let logits = self.logits(x)?;
        Ok(prediction_from_logits(logits.data()))
    }

    pub fn predict_batch(&self, batch: &Tensor) -> Result<Vec<Prediction>> {
        let logits = self.logits(batch)?;
        Ok((0..logits.rows())
            .map(|r| prediction_from_logits(logits.row_slice(r)))
            .collect())
    }

    /// Accuracy on features that are already in the network's input space.
    pub fn accuracy(&self, features: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::NoSamples);
        }
        let preds = self.predict_batch(features)?;
        let correct = preds
            .iter()
            .zip(labels)
            .filter(|(p, &y)| p.label == y)
            .count();
        Ok(correct as f64 / labels.len() as f64)
    }

    /// Accuracy on a raw source-domain dataset (standardized with the source statistics).
    pub fn source_accuracy(&self, data: &LabeledDataset) -> Result<f64> {
        let x = self.standardize_source(data.features())?;
        self.accuracy(&x, data.labels())
    }

    /// Full-parameter cross-entropy training on raw source data.
    ///
    /// Records the training set's feature statistics, standardizes with them,
    /// and runs momentum SGD with training-mode BN. Running statistics are
    /// tracked with `cfg.bn_momentum`.
    pub fn pretrain_source(
        &mut self,
        train: &LabeledDataset,
        cfg: &PretrainConfig,
        seed: u64,
        holdout: Option<&LabeledDataset>,
    ) -> Result<TrainLog> {
        if train.is_empty() {
            return Err(Error::NoSamples);
        }
        if train.dim() != self.spec.input_dim {
            return Err(Error::Shape {
                op: "pretrain_source",
                lhs: train.features().shape().to_vec(),
                rhs: vec![self.spec.input_dim],
            });
        }
        if let Some(&bad) = train.labels().iter().find(|&&y| y >= self.spec.classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range")));
        }
        if cfg.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        self.source_stats = train.stats().clone();
        let x = self.source_stats.normalize(train.features())?;
        let labels = train.labels();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut velocity: BTreeMap<String, Vec<f64>> = self
            .params
            .iter()
            .map(|(n, p)| (n.to_string(), vec![0.0; p.value.len()]))
            .collect();
        let mut log = TrainLog::default();

        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                // a single-row batch has zero variance and no useful BN signal
                if chunk.len() < 2 && order.len() >= 2 {
                    continue;
                }
                let xb = x.select_rows(chunk);
                let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let (loss, grads, stats) = self.cross_entropy_grads(&xb, &yb)?;
                total += loss;
                batches += 1;
                self.ema_update(&stats, cfg.bn_momentum)?;
                for (name, p) in self.params.iter_mut() {
                    let g = grads.get(name).expect("all params");
                    let v = velocity.get_mut(name).expect("all params");
                    let decay = if name.ends_with(".weight") {
                        cfg.weight_decay
                    } else {
                        0.0
                    };
                    for ((w, vi), gi) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(v.iter_mut())
                        .zip(g.data())
                    {
                        *vi = cfg.momentum * *vi + gi + decay * *w;
                        *w -= cfg.lr * *vi;
                    }
                }
            }
            log.epoch_loss.push(total / batches.max(1) as f64);
        }
        self.params
            .iter()
            .try_for_each(|(_, p)| p.value.all_finite_or_err())?;
        log.train_accuracy = self.accuracy(&x, labels)?;
        log.holdout_accuracy = holdout.map(|h| self.source_accuracy(h)).transpose()?;
        Ok(log)
    }

    fn cross_entropy_grads(
        &self,
        xb: &Tensor,
        yb: &[usize],
    ) -> Result<(f64, Grads, Vec<BnBatchStats>)> {
        let mut tape = Tape::new();
        let vars = tape.register(&self.params, GradScope::All);
        let input = tape.constant(xb.clone());
        let (logits, stats) = self.forward_on(&mut tape, &vars, input, BnMode::Batch)?;
        let loss = tape.cross_entropy(logits, yb)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?.for_all_params(&self.params);
        Ok((value, grads, stats))
    }

    /// FNV-1a over the bit patterns of every parameter and running statistic.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (_, p) in self.params.iter() {
            p.value.data().iter().for_each(|&v| feed(v));
        }
        for r in &self.running {
            r.mean
                .data()
                .iter()
                .chain(r.var.data())
                .for_each(|&v| feed(v));
        }
        h
    }
}

fn ema_in_place(stat: &mut Tensor, batch: &Tensor, m: f64) {
    for (s, b) in stat.data_mut().iter_mut().zip(batch.data()) {
        *s = (1.0 - m) * *s + m * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            input_dim: 3,
            hidden: vec![5, 4],
            classes: 3,
            bn_eps: 1e-5,
        }
    }

    #[test]
    fn init_is_deterministic_with_identity_bn() {
        let a = Network::init(tiny_spec(), 7).unwrap();
        let b = Network::init(tiny_spec(), 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Network::init(tiny_spec(), 8).unwrap());
        for i in 0..2 {
            let s = a.bn_state(i);
            assert!(s.gamma.data().iter().all(|&v| v == 1.0));
            assert!(s.beta.data().iter().all(|&v| v == 0.0));
            assert!(s.running_mean.data().iter().all(|&v| v == 0.0));
            assert!(s.running_var.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn partition_is_bn_affine_only() {
        let net = Network::init(tiny_spec(), 0).unwrap();
        let trainable: Vec<&str> = net.params().trainable_names().collect();
        assert_eq!(
            trainable,
            vec!["bn0.beta", "bn0.gamma", "bn1.beta", "bn1.gamma"]
        );
        assert_eq!(net.params().len(), 10);
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut s = tiny_spec();
        s.classes = 1;
        assert!(Network::init(s, 0).is_err());
        let mut s = tiny_spec();
        s.hidden = vec![0];
        assert!(Network::init(s, 0).is_err());
    }

    fn bn_once(x: &Tensor, gamma: f64, beta: f64, mean: f64, var: f64, eps: f64) -> Tensor {
        let mut tape = Tape::new();
        let z = tape.constant(x.clone());
        let w = x.cols();
        let g = tape.constant(Tensor::full(&[1, w], gamma));
        let b = tape.constant(Tensor::full(&[1, w], beta));
        let stats = RunningStats {
            mean: Tensor::full(&[1, w], mean),
            var: Tensor::full(&[1, w], var),
        };
        let y = bn_running(&mut tape, z, g, b, &stats, eps).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn identity_normalization() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.5, 0.0]]).unwrap();
        assert_eq!(bn_once(&x, 1.0, 0.0, 0.0, 1.0, 0.0), x);
    }

    #[test]
    fn fresh_bn_scales_by_eps() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.5, 0.0]]).unwrap();
        let y = bn_once(&x, 1.0, 0.0, 0.0, 1.0, 1e-5);
        let expect = x.scale(1.0 / (1.0 + 1e-5f64).sqrt());
        assert!(y.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn affine_normalization_formula() {
        let x = Tensor::row(vec![5.0]).unwrap();
        assert_eq!(bn_once(&x, 2.0, 3.0, 1.0, 4.0, 0.0).data(), &[7.0]);
    }

    #[test]
    fn batch_stats_are_population_moments() {
        let spec = NetworkSpec {
            input_dim: 1,
            hidden: vec![1],
            classes: 2,
            bn_eps: 1e-5,
        };
        let mut net = Network::init(spec, 0).unwrap();
        net.params_mut().get_mut("l0.weight").unwrap().data_mut()[0] = 1.0;
        let x = Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap();
        let fp = net.forward(&x, false).unwrap();
        assert_eq!(fp.bn_stats[0].mean.data(), &[1.0]);
        assert_eq!(fp.bn_stats[0].var.data(), &[1.0]);
    }

    fn stats_of(net: &Network, v: f64) -> Vec<BnBatchStats> {
        net.running()
            .iter()
            .map(|r| BnBatchStats {
                mean: Tensor::full(r.mean.shape(), v),
                var: Tensor::full(r.var.shape(), v),
            })
            .collect()
    }

    #[test]
    fn ema_examples() {
        let mut net = Network::init(tiny_spec(), 0).unwrap();
        let ones = stats_of(&net, 1.0);
        net.ema_update(&ones, 0.2).unwrap();
        assert!((net.running()[0].mean.data()[0] - 0.2).abs() < 1e-15);
        net.ema_update(&ones, 0.2).unwrap();
        assert!((net.running()[0].mean.data()[0] - 0.36).abs() < 1e-15);

        let before = net.running().to_vec();
        net.ema_update(&stats_of(&net, 5.0), 0.0).unwrap();
        assert_eq!(net.running(), &before[..]);
        net.ema_update(&stats_of(&net, 5.0), 1.0).unwrap();
        assert!(net
            .running()
            .iter()
            .all(|r| r.mean.data().iter().all(|&v| v == 5.0)));

        assert!(net.ema_update(&ones, 1.5).is_err());
        assert!(net.ema_update(&ones, -0.1).is_err());
        assert!(net.ema_update(&ones[..1], 0.1).is_err());
    }

    #[test]
    fn prediction_examples() {
        let p = prediction_from_logits(&[2.0, 0.0, 0.0]);
        assert_eq!(p.label, 0);
        assert!((p.confidence - 0.78699).abs() < 1e-5);

        let p = prediction_from_logits(&[0.0; 10]);
        assert_eq!(p.label, 0);
        assert!((p.confidence - 0.1).abs() < 1e-15);

        let p = prediction_from_logits(&[0.0, 100.0]);
        assert_eq!(p.label, 1);
        assert!((p.confidence - 1.0).abs() < 1e-15);
    }

    #[test]
    fn recording_does_not_change_logits() {
        let net = Network::init(tiny_spec(), 3).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.2, -0.3], vec![1.0, -1.0, 0.5]]).unwrap();
        let a = net.forward(&x, false).unwrap();
        let b = net.forward(&x, true).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.bn_stats, b.bn_stats);
        assert!(b.graph.is_some() && a.graph.is_none());
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = Network::init(tiny_spec(), 3).unwrap();
        assert!(net.forward(&Tensor::zeros(&[2, 4]), false).is_err());
    }
}
