//! Loss functions, the λ schedule, and the training/evaluation loops for the
//! three compared systems.
//!
//! A training run minimizes the RMSE between predicted and ground-truth depth
//! maps. The `proposed` mode optimizes the weighted dual objective
//! λ·L(augmented) + (1−λ)·L(ultrasonic) with λ declining linearly from 1 at
//! the first optimizer step to 0 at the last, so learning starts on the
//! information-rich mixed echoes and finishes on the ultrasonic-only inputs
//! it will be evaluated with. `ultrasonic_only` and `augmented_only` train
//! the identical architecture on a single branch each.
//!
//! Runs are bit-deterministic given (config, seed, dataset): initialization
//! draws from one seeded stream, the shuffle/mixing draws from a second, and
//! every floating-point reduction has a fixed order.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustics::DepthMap;
use crate::augment::{sample_alpha, EchoSample, MixPolicy};
use crate::error::{Error, Result};
use crate::network::{AdamState, Graph, Network, NodeId, Tensor};

/// Separates the shuffle/mixing stream from the weight-initialization
/// stream, which is seeded with the run seed itself.
const LOOP_STREAM_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// The three systems compared by the evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Train and evaluate on band-limited ultrasonic echoes only.
    UltrasonicOnly,
    /// Train on mixed ultrasonic/auxiliary echoes, evaluate on ultrasonic.
    AugmentedOnly,
    /// Scheduled dual loss over both branches, evaluate on ultrasonic.
    Proposed,
}

impl TrainMode {
    /// Parse the wire label produced by [`TrainMode::label`].
    pub fn from_label(label: &str) -> Result<Self> {
        match label {
            "ultrasonic_only" => Ok(Self::UltrasonicOnly),
            "augmented_only" => Ok(Self::AugmentedOnly),
            "proposed" => Ok(Self::Proposed),
            other => Err(Error::InvalidConfig(format!(
                "unknown training mode {other:?}"
            ))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TrainMode::UltrasonicOnly => "ultrasonic_only",
            TrainMode::AugmentedOnly => "augmented_only",
            TrainMode::Proposed => "proposed",
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub mode: TrainMode,
}

fn default_epochs() -> usize {
    300
}
fn default_batch_size() -> usize {
    8
}
fn default_learning_rate() -> f64 {
    1e-4
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

impl TrainConfig {
    pub fn new(mode: TrainMode) -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            seeds: default_seeds(),
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(
                "learning rate must be positive and finite".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seed list must be non-empty".into()));
        }
        Ok(())
    }
}

/// Loss-mixing weight for one optimizer step of the linear 1 → 0 schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
}

impl LossWeights {
    /// Weight at `step` of a schedule spanning `total_steps`.
    pub fn at(step: usize, total_steps: usize) -> Result<Self> {
        Ok(Self {
            lambda: lambda_at(step, total_steps)?,
        })
    }
}

/// Linear schedule value 1 − step/total_steps.
pub fn lambda_at(step: usize, total_steps: usize) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidConfig(
            "schedule needs at least one step".into(),
        ));
    }
    if step > total_steps {
        return Err(Error::InvalidConfig(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    Ok(1.0 - step as f64 / total_steps as f64)
}

/// RMSE between a predicted depth node (shape [1, H, W]) and a ground-truth
/// depth map, as a differentiable scalar node.
pub fn rmse_loss(g: &mut Graph, predicted: NodeId, truth: &DepthMap) -> Result<NodeId> {
    let shape = g.shape(predicted).to_vec();
    if shape != [1, truth.height(), truth.width()] {
        return Err(Error::ShapeMismatch {
            expected: format!("[1, {}, {}]", truth.height(), truth.width()),
            actual: format!("{shape:?}"),
        });
    }
    let t = Tensor::new(shape, truth.values().to_vec())?;
    let target = g.leaf(&t);
    let diff = g.sub(predicted, target)?;
    let sq = g.square(diff);
    let mse = g.mean(sq);
    Ok(g.sqrt(mse))
}

/// Direct (non-graph) RMSE between a prediction buffer and a depth map.
pub fn direct_rmse(predicted: &[f64], truth: &DepthMap) -> Result<f64> {
    let values = truth.values();
    if predicted.len() != values.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} depth values", values.len()),
            actual: format!("{}", predicted.len()),
        });
    }
    let mut acc = 0.0;
    for (p, y) in predicted.iter().zip(values) {
        let d = p - y;
        acc += d * d;
    }
    Ok((acc / values.len() as f64).sqrt())
}

/// A built dual-branch loss graph, ready for one backward pass.
pub struct LossGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub param_nodes: Vec<NodeId>,
    /// Unweighted per-branch loss values (augmented, ultrasonic).
    pub branch_losses: (f64, f64),
}

/// Weighted dual objective λ·RMSE(augmented) + (1−λ)·RMSE(ultrasonic), both
/// branches sharing one parameter set so a single backward pass accumulates
/// both weighted gradient contributions.
pub fn total_loss(
    net: &Network,
    sample_u: &EchoSample,
    sample_a: &EchoSample,
    lambda: f64,
) -> Result<LossGraph> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    if sample_u.scene_id != sample_a.scene_id {
        return Err(Error::InvalidConfig(format!(
            "branch samples come from different scenes: {} vs {}",
            sample_u.scene_id, sample_a.scene_id
        )));
    }
    let mut g = Graph::new();
    let param_nodes: Vec<NodeId> = net.params.iter().map(|p| g.leaf(p)).collect();
    let xa = g.leaf(&crate::network::spectrogram_tensor(&sample_a.features)?);
    let xu = g.leaf(&crate::network::spectrogram_tensor(&sample_u.features)?);
    let pred_a = net.forward_from(&mut g, xa, &param_nodes)?;
    let loss_a = rmse_loss(&mut g, pred_a, &sample_a.depth)?;
    let pred_u = net.forward_from(&mut g, xu, &param_nodes)?;
    let loss_u = rmse_loss(&mut g, pred_u, &sample_u.depth)?;
    let loss = g.add_weighted(loss_a, loss_u, lambda, 1.0 - lambda)?;
    let branch_losses = (g.data(loss_a)[0], g.data(loss_u)[0]);
    Ok(LossGraph {
        graph: g,
        loss,
        param_nodes,
        branch_losses,
    })
}

/// Aligned train-split views for one comparison cell: the ultrasonic samples
/// plus, for mixing modes, the auxiliary-band samples of the same scenes,
/// with read instrumentation keyed by each sample's band tag.
pub struct TrainSet {
    ultrasonic: Vec<EchoSample>,
    auxiliary: Option<Vec<EchoSample>>,
    reads: RefCell<BTreeMap<String, u64>>,
}

fn tag_key(sample: &EchoSample) -> String {
    match sample.cutoff_tag() {
        Some(crate::dsp::CutoffTag::Band(hz)) => format!("band:{hz}"),
        Some(crate::dsp::CutoffTag::Mixed {
            ultrasonic,
            auxiliary,
        }) => format!("mixed:{ultrasonic}+{auxiliary}"),
        None => "untagged".into(),
    }
}

impl TrainSet {
    /// Samples must be scene-aligned: `auxiliary[i]`, when present, is the
    /// same scene as `ultrasonic[i]` at the auxiliary cutoff.
    pub fn new(ultrasonic: Vec<EchoSample>, auxiliary: Option<Vec<EchoSample>>) -> Result<Self> {
        if ultrasonic.is_empty() {
            return Err(Error::InvalidConfig("empty training set".into()));
        }
        if let Some(aux) = &auxiliary {
            if aux.len() != ultrasonic.len() {
                return Err(Error::InvalidConfig(format!(
                    "auxiliary split has {} samples, ultrasonic has {}",
                    aux.len(),
                    ultrasonic.len()
                )));
            }
            for (u, a) in ultrasonic.iter().zip(aux) {
                if u.scene_id != a.scene_id {
                    return Err(Error::InvalidConfig(format!(
                        "scene misalignment: {} vs {}",
                        u.scene_id, a.scene_id
                    )));
                }
            }
        }
        Ok(Self {
            ultrasonic,
            auxiliary,
            reads: RefCell::new(BTreeMap::new()),
        })
    }

    pub fn len(&self) -> usize {
        self.ultrasonic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ultrasonic.is_empty()
    }

    fn record(&self, sample: &EchoSample) {
        *self.reads.borrow_mut().entry(tag_key(sample)).or_insert(0) += 1;
    }

    /// Ultrasonic sample `i`, counted against its band tag.
    pub fn ultrasonic(&self, i: usize) -> &EchoSample {
        let s = &self.ultrasonic[i];
        self.record(s);
        s
    }

    /// Auxiliary sample `i`, counted against its band tag.
    pub fn auxiliary(&self, i: usize) -> Result<&EchoSample> {
        let aux = self.auxiliary.as_ref().ok_or_else(|| {
            Error::MissingEntry("training set carries no auxiliary band".into())
        })?;
        let s = &aux[i];
        self.record(s);
        Ok(s)
    }

    pub fn has_auxiliary(&self) -> bool {
        self.auxiliary.is_some()
    }

    /// Read counters accumulated so far, keyed by band tag.
    pub fn reads(&self) -> BTreeMap<String, u64> {
        self.reads.borrow().clone()
    }
}

/// Everything a finished run produces: the trained network, the per-epoch
/// mean training loss, pre/post-training RMSE on the train split, and the
/// per-band read counters.
pub struct TrainOutcome {
    pub network: Network,
    pub trace: Vec<f64>,
    pub initial_rmse: f64,
    pub final_rmse: f64,
    pub steps: usize,
    pub reads: BTreeMap<String, u64>,
}

/// Train one network for one seed. Mixing modes require a policy and a
/// training set carrying the auxiliary band; `ultrasonic_only` never touches
/// auxiliary data (observable through `TrainOutcome::reads`).
pub fn train(
    config: &TrainConfig,
    seed: u64,
    network: Network,
    data: &TrainSet,
    policy: Option<&MixPolicy>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let needs_mixing = config.mode != TrainMode::UltrasonicOnly;
    if needs_mixing {
        let policy = policy.ok_or_else(|| {
            Error::InvalidConfig(format!("mode {} requires a mix policy", config.mode.label()))
        })?;
        policy.validate()?;
        if !data.has_auxiliary() {
            return Err(Error::InvalidConfig(format!(
                "mode {} requires auxiliary-band samples",
                config.mode.label()
            )));
        }
    }
    let mut net = network;
    let n = data.len();
    let initial_rmse = train_split_rmse(&net, data)?;

    let mut opt = AdamState::new(&net.params, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ LOOP_STREAM_SALT);
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let schedule_span = (total_steps - 1).max(1);

    let mut step = 0usize;
    let mut previous_lambda = f64::INFINITY;
    let mut trace = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let alphas: Vec<f64> = (0..n).map(|_| sample_alpha(&mut rng)).collect();
        let mut epoch_losses = Vec::with_capacity(steps_per_epoch);
        for batch in order.chunks(config.batch_size) {
            let weights = LossWeights::at(step.min(schedule_span), schedule_span)?;
            assert!(
                weights.lambda <= previous_lambda,
                "schedule must be non-increasing"
            );
            previous_lambda = weights.lambda;

            let mut grad_sum: Option<Vec<Tensor>> = None;
            let mut loss_sum = 0.0;
            for &i in batch {
                let (loss_value, grads) = match config.mode {
                    TrainMode::UltrasonicOnly => {
                        sample_gradients_single(&net, data.ultrasonic(i))?
                    }
                    TrainMode::AugmentedOnly => {
                        let policy = policy.expect("checked above");
                        let mixed = policy.mix(data.ultrasonic(i), data.auxiliary(i)?, alphas[i])?;
                        sample_gradients_single(&net, &mixed)?
                    }
                    TrainMode::Proposed => {
                        let policy = policy.expect("checked above");
                        let sample_u = data.ultrasonic(i);
                        let mixed = policy.mix(sample_u, data.auxiliary(i)?, alphas[i])?;
                        let mut lg = total_loss(&net, sample_u, &mixed, weights.lambda)?;
                        lg.graph.backward(lg.loss)?;
                        let grads = collect_grads(&lg.graph, &lg.param_nodes, &net.params);
                        (lg.graph.data(lg.loss)[0], grads)
                    }
                };
                if !loss_value.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss at step {step} is {loss_value}"
                    )));
                }
                loss_sum += loss_value;
                grad_sum = Some(match grad_sum {
                    None => grads,
                    Some(mut acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (av, gv) in a.data.iter_mut().zip(&g.data) {
                                *av += gv;
                            }
                        }
                        acc
                    }
                });
            }
            let k = batch.len() as f64;
            let mut grads = grad_sum.expect("batches are non-empty");
            for g in &mut grads {
                g.data.iter_mut().for_each(|v| *v /= k);
            }
            opt.step(&mut net.params, &grads)?;
            step += 1;
            epoch_losses.push(loss_sum / k);
        }
        trace.push(epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64);
    }

    let final_rmse = train_split_rmse(&net, data)?;
    Ok(TrainOutcome {
        network: net,
        trace,
        initial_rmse,
        final_rmse,
        steps: step,
        reads: data.reads(),
    })
}

/// Forward + backward for a single-branch sample; returns (loss, gradients).
fn sample_gradients_single(net: &Network, sample: &EchoSample) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let input = g.leaf(&crate::network::spectrogram_tensor(&sample.features)?);
    let pass = net.forward_graph(&mut g, input)?;
    let loss = rmse_loss(&mut g, pass.output, &sample.depth)?;
    g.backward(loss)?;
    let grads = collect_grads(&g, &pass.param_nodes, &net.params);
    Ok((g.data(loss)[0], grads))
}

fn collect_grads(g: &Graph, param_nodes: &[NodeId], params: &[Tensor]) -> Vec<Tensor> {
    param_nodes
        .iter()
        .zip(params)
        .map(|(&node, p)| Tensor {
            shape: p.shape.clone(),
            data: g.grad(node).expect("backward has run").to_vec(),
        })
        .collect()
}

/// Mean ultrasonic-branch RMSE over a training split (used for the pre/post
/// training bookends of `TrainOutcome`).
fn train_split_rmse(net: &Network, data: &TrainSet) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..data.len() {
        let s = data.ultrasonic(i);
        let pred = net.predict(&s.features)?;
        acc += direct_rmse(&pred, &s.depth)?;
    }
    Ok(acc / data.len() as f64)
}

/// One evaluated test sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scene_id: String,
    pub rmse: f64,
}

/// Evaluation result: per-sample table plus its arithmetic mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean_rmse: f64,
    pub rows: Vec<EvalRow>,
}

/// Evaluate a trained network on a test split. Inputs are always the
/// ultrasonic-band features, whatever mode produced the checkpoint.
pub fn evaluate(net: &Network, samples: &[EchoSample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("empty evaluation set".into()));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = net.predict(&s.features)?;
        rows.push(EvalRow {
            scene_id: s.scene_id.clone(),
            rmse: direct_rmse(&pred, &s.depth)?,
        });
    }
    let mean_rmse = rows.iter().map(|r| r.rmse).sum::<f64>() / rows.len() as f64;
    Ok(Evaluation { mean_rmse, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{CutoffTag, Spectrogram};
    use crate::network::NetworkConfig;
    use rand::Rng;

    const FS: f64 = 44100.0;

    fn tiny_net_config() -> NetworkConfig {
        NetworkConfig::plan((2, 8, 8), (4, 4), [2, 3, 4], 5.0).unwrap()
    }

    fn tagged_features(rng: &mut ChaCha8Rng, cutoff: u32) -> Spectrogram {
        let data: Vec<f64> = (0..2 * 8 * 8)
            .map(|_| (rng.gen::<f32>() as f64) * 2.0)
            .collect();
        Spectrogram::from_parts(data, 2, 8, 8, 14, 4, FS, Some(CutoffTag::Band(cutoff)))
            .unwrap()
    }

    fn sample(rng: &mut ChaCha8Rng, scene_id: &str, cutoff: u32) -> EchoSample {
        let depth_values: Vec<f64> = (0..16).map(|_| rng.gen_range(0.5..4.5)).collect();
        EchoSample {
            features: tagged_features(rng, cutoff),
            depth: DepthMap::new(depth_values, 4, 4, 5.0).unwrap(),
            scene_id: scene_id.into(),
        }
    }

    fn tiny_sets(n: usize) -> (TrainSet, MixPolicy) {
        let mut rng = ChaCha8Rng::seed_from_u64(900);
        let mut us = Vec::new();
        let mut ls = Vec::new();
        for i in 0..n {
            let id = format!("scene_{i:03}");
            let u = sample(&mut rng, &id, 20000);
            let mut l = sample(&mut rng, &id, 19500);
            l.depth = u.depth.clone();
            us.push(u);
            ls.push(l);
        }
        (
            TrainSet::new(us, Some(ls)).unwrap(),
            MixPolicy::new(20000, 19500).unwrap(),
        )
    }

    #[test]
    fn lambda_schedule_hits_exact_endpoints_and_midpoint() {
        assert_eq!(lambda_at(0, 480).unwrap(), 1.0);
        assert_eq!(lambda_at(480, 480).unwrap(), 0.0);
        assert!((lambda_at(240, 480).unwrap() - 0.5).abs() <= 1e-12);
        let mut prev = f64::INFINITY;
        for s in 0..=480 {
            let l = lambda_at(s, 480).unwrap();
            assert!(l <= prev && (0.0..=1.0).contains(&l));
            prev = l;
        }
    }

    #[test]
    fn lambda_rejects_out_of_range_steps() {
        assert!(lambda_at(5, 4).is_err());
        assert!(lambda_at(0, 0).is_err());
    }

    #[test]
    fn rmse_loss_on_equal_maps_is_zero() {
        let depth = DepthMap::new(vec![1.5; 16], 4, 4, 5.0).unwrap();
        let mut g = Graph::new();
        let t = Tensor::new(vec![1, 4, 4], depth.values().to_vec()).unwrap();
        let pred = g.leaf(&t);
        let loss = rmse_loss(&mut g, pred, &depth).unwrap();
        assert_eq!(g.data(loss)[0], 0.0);
    }

    #[test]
    fn rmse_loss_constant_offset_is_the_offset() {
        let depth = DepthMap::new(vec![2.0; 16], 4, 4, 5.0).unwrap();
        let shifted: Vec<f64> = depth.values().iter().map(|v| v + 0.5).collect();
        let mut g = Graph::new();
        let t = Tensor::new(vec![1, 4, 4], shifted).unwrap();
        let pred = g.leaf(&t);
        let loss = rmse_loss(&mut g, pred, &depth).unwrap();
        assert!((g.data(loss)[0] - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn rmse_loss_matches_direct_scalar_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let depth_values: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..5.0)).collect();
        let depth = DepthMap::new(depth_values, 4, 4, 5.0).unwrap();
        let pred_values: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..5.0)).collect();
        let mut g = Graph::new();
        let t = Tensor::new(vec![1, 4, 4], pred_values.clone()).unwrap();
        let pred = g.leaf(&t);
        let loss = rmse_loss(&mut g, pred, &depth).unwrap();
        let direct = direct_rmse(&pred_values, &depth).unwrap();
        assert!((g.data(loss)[0] - direct).abs() <= 1e-12);
    }

    #[test]
    fn rmse_loss_rejects_shape_mismatch() {
        let depth = DepthMap::new(vec![1.0; 16], 4, 4, 5.0).unwrap();
        let mut g = Graph::new();
        let t = Tensor::new(vec![1, 2, 8], vec![0.0; 16]).unwrap();
        let pred = g.leaf(&t);
        assert!(rmse_loss(&mut g, pred, &depth).is_err());
    }

    #[test]
    fn total_loss_endpoints_equal_single_branches() {
        let net = Network::init(tiny_net_config(), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let u = sample(&mut rng, "s0", 20000);
        let mut a = sample(&mut rng, "s0", 19500);
        a.depth = u.depth.clone();

        let single = |s: &EchoSample| {
            let pred = net.predict(&s.features).unwrap();
            direct_rmse(&pred, &s.depth).unwrap()
        };
        let at = |lam: f64| {
            let lg = total_loss(&net, &u, &a, lam).unwrap();
            lg.graph.data(lg.loss)[0]
        };
        assert!((at(0.0) - single(&u)).abs() <= 1e-12);
        assert!((at(1.0) - single(&a)).abs() <= 1e-12);
        let lg = total_loss(&net, &u, &a, 0.3).unwrap();
        let (la, lu) = lg.branch_losses;
        assert!((lg.graph.data(lg.loss)[0] - (0.3 * la + 0.7 * lu)).abs() <= 1e-12);
    }

    #[test]
    fn weighted_combination_matches_direct_arithmetic() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::new(vec![1], vec![1.0]).unwrap());
        let b = g.leaf(&Tensor::new(vec![1], vec![2.0]).unwrap());
        let c = g.add_weighted(a, b, 0.3, 0.7).unwrap();
        assert!((g.data(c)[0] - 1.7).abs() <= 1e-12);
    }

    #[test]
    fn total_loss_at_zero_lambda_gives_bit_identical_ultrasonic_gradients() {
        let net = Network::init(tiny_net_config(), 77).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let u = sample(&mut rng, "s0", 20000);
        let mut a = sample(&mut rng, "s0", 19500);
        a.depth = u.depth.clone();

        let mut lg = total_loss(&net, &u, &a, 0.0).unwrap();
        lg.graph.backward(lg.loss).unwrap();
        let dual = collect_grads(&lg.graph, &lg.param_nodes, &net.params);
        let (_, single) = sample_gradients_single(&net, &u).unwrap();
        for (d, s) in dual.iter().zip(&single) {
            assert_eq!(d.shape, s.shape);
            for (dv, sv) in d.data.iter().zip(&s.data) {
                assert_eq!(dv.to_bits(), sv.to_bits());
            }
        }
    }

    #[test]
    fn total_loss_rejects_scene_mismatch_and_bad_lambda() {
        let net = Network::init(tiny_net_config(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = sample(&mut rng, "s0", 20000);
        let other = sample(&mut rng, "s1", 19500);
        assert!(total_loss(&net, &u, &other, 0.5).is_err());
        let mut a = sample(&mut rng, "s0", 19500);
        a.depth = u.depth.clone();
        assert!(total_loss(&net, &u, &a, 1.5).is_err());
    }

    #[test]
    fn overfits_a_single_sample() {
        let (data, _) = tiny_sets(1);
        let mut config = TrainConfig::new(TrainMode::UltrasonicOnly);
        config.epochs = 200;
        config.learning_rate = 1e-2;
        let net = Network::init(tiny_net_config(), 0).unwrap();
        let out = train(&config, 0, net, &data, None).unwrap();
        assert!(
            out.final_rmse < 0.1 * out.initial_rmse,
            "final {} vs initial {}",
            out.final_rmse,
            out.initial_rmse
        );
    }

    #[test]
    fn identical_seeds_give_identical_traces_and_parameters() {
        let (data, policy) = tiny_sets(4);
        let mut config = TrainConfig::new(TrainMode::Proposed);
        config.epochs = 3;
        config.learning_rate = 1e-3;
        let run = || {
            let net = Network::init(tiny_net_config(), 9).unwrap();
            train(&config, 9, net, &data, Some(&policy)).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.network.params, b.network.params);
    }

    #[test]
    fn different_seeds_diverge() {
        let (data, _) = tiny_sets(2);
        let mut config = TrainConfig::new(TrainMode::UltrasonicOnly);
        config.epochs = 2;
        let run = |seed: u64| {
            let net = Network::init(tiny_net_config(), seed).unwrap();
            train(&config, seed, net, &data, None).unwrap()
        };
        assert_ne!(run(1).network.params, run(2).network.params);
    }

    #[test]
    fn ultrasonic_mode_never_reads_auxiliary_band() {
        let (data, _) = tiny_sets(3);
        let mut config = TrainConfig::new(TrainMode::UltrasonicOnly);
        config.epochs = 2;
        let net = Network::init(tiny_net_config(), 4).unwrap();
        let out = train(&config, 4, net, &data, None).unwrap();
        assert!(out.reads.contains_key("band:20000"));
        assert!(!out.reads.contains_key("band:19500"));
    }

    #[test]
    fn mixing_modes_read_both_bands() {
        let (data, policy) = tiny_sets(3);
        let mut config = TrainConfig::new(TrainMode::AugmentedOnly);
        config.epochs = 1;
        let net = Network::init(tiny_net_config(), 4).unwrap();
        let out = train(&config, 4, net, &data, Some(&policy)).unwrap();
        assert!(out.reads.contains_key("band:20000"));
        assert!(out.reads.contains_key("band:19500"));
    }

    #[test]
    fn mixing_modes_demand_policy_and_auxiliary_data() {
        let (with_aux, policy) = tiny_sets(2);
        let config = TrainConfig::new(TrainMode::Proposed);
        let net = Network::init(tiny_net_config(), 0).unwrap();
        assert!(train(&config, 0, net.clone(), &with_aux, None).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let no_aux =
            TrainSet::new(vec![sample(&mut rng, "s0", 20000)], None).unwrap();
        assert!(train(&config, 0, net, &no_aux, Some(&policy)).is_err());
    }

    #[test]
    fn evaluation_reproduces_final_training_rmse_on_the_singleton() {
        let (data, _) = tiny_sets(1);
        let mut config = TrainConfig::new(TrainMode::UltrasonicOnly);
        config.epochs = 40;
        config.learning_rate = 1e-3;
        let net = Network::init(tiny_net_config(), 3).unwrap();
        let out = train(&config, 3, net, &data, None).unwrap();
        let eval = evaluate(&out.network, std::slice::from_ref(data.ultrasonic(0))).unwrap();
        assert!((eval.mean_rmse - out.final_rmse).abs() <= 1e-6);
    }

    #[test]
    fn zero_weight_network_evaluates_to_analytic_constant_rmse() {
        let (data, _) = tiny_sets(2);
        let mut net = Network::init(tiny_net_config(), 0).unwrap();
        for p in &mut net.params {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let samples: Vec<EchoSample> =
            (0..2).map(|i| data.ultrasonic(i).clone()).collect();
        let eval = evaluate(&net, &samples).unwrap();
        // Constant prediction at max_depth/2 = 2.5.
        for (row, s) in eval.rows.iter().zip(&samples) {
            let analytic = (s
                .depth
                .values()
                .iter()
                .map(|y| (2.5 - y) * (2.5 - y))
                .sum::<f64>()
                / s.depth.values().len() as f64)
                .sqrt();
            assert!((row.rmse - analytic).abs() <= 1e-12);
        }
    }

    #[test]
    fn per_sample_rmse_averages_to_reported_mean() {
        let (data, _) = tiny_sets(5);
        let net = Network::init(tiny_net_config(), 8).unwrap();
        let samples: Vec<EchoSample> =
            (0..5).map(|i| data.ultrasonic(i).clone()).collect();
        let eval = evaluate(&net, &samples).unwrap();
        let mean = eval.rows.iter().map(|r| r.rmse).sum::<f64>() / eval.rows.len() as f64;
        assert!((eval.mean_rmse - mean).abs() <= 1e-10);
    }

    #[test]
    fn train_set_rejects_misaligned_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = vec![sample(&mut rng, "s0", 20000)];
        let l = vec![sample(&mut rng, "s1", 19500)];
        assert!(TrainSet::new(u, Some(l)).is_err());
        assert!(TrainSet::new(vec![], None).is_err());
    }

    #[test]
    fn config_validation_rejects_degenerate_values() {
        let mut c = TrainConfig::new(TrainMode::UltrasonicOnly);
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(TrainMode::UltrasonicOnly);
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(TrainMode::UltrasonicOnly);
        c.seeds.clear();
        assert!(c.validate().is_err());
    }
}
