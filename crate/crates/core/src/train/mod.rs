//! The training objective `λ·gan + μ·similarity + η·cross-entropy`, its
//! gradient routing, and the alternating discriminator/model loop.
//!
//! Routing: the classification term reaches the shallow extractor, concept
//! extractors and classifier. Similarity and generator terms are computed on
//! a second extractor pass over the detached shallow feature, so they reach
//! extractors and mappers but never the shallow extractor or classifier. The
//! discriminator is trained in its own sub-step on detached mapper outputs.

mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use optim::{OptimizerKind, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, SGD_MOMENTUM};

use crate::data::{mix_seed, ConceptSample, Dataset};
use crate::metrics::{self, MetricsError};
use crate::net::{image_batch, ConceptRoute, NetError, ParamGroup, TcnlNetwork};
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

/// Floor applied inside every GAN logarithm.
pub const LOG_FLOOR: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {component} loss ({value}) at epoch {epoch}, step {step}")]
    NonFinite {
        component: &'static str,
        value: f64,
        epoch: usize,
        step: usize,
    },
    #[error("network and dataset disagree: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Generator (adversarial) term.
    pub lambda: f64,
    /// Similarity (reconstruction) term. The per-pixel MSE against mostly
    /// black instance images is around 1e-2, so the weight is large enough
    /// for the constraint to compete with cross-entropy on the extractors.
    pub mu: f64,
    /// Classification term.
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.01,
            mu: 100.0,
            eta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        let all = [("lambda", self.lambda), ("mu", self.mu), ("eta", self.eta)];
        if let Some((name, v)) = all.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(TrainError::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
        }
        if all.iter().all(|(_, v)| *v == 0.0) {
            return Err(TrainError::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub weights: LossWeights,
    pub seed: u64,
    /// Runs are single-threaded and always reproducible; the flag is kept in
    /// metadata so artifacts state the guarantee they were produced under.
    pub deterministic: bool,
    /// Ablation twin: extractors get no signal from the concept terms, while
    /// mappers and discriminator still train on detached concept features.
    pub disable_concept_constraint: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.001,
            optimizer: OptimizerKind::Adam,
            weights: LossWeights::default(),
            seed: 0,
            deterministic: true,
            disable_concept_constraint: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        self.weights.validate()
    }

    pub fn route(&self) -> ConceptRoute {
        let w = &self.weights;
        if w.mu == 0.0 && w.lambda == 0.0 {
            ConceptRoute::ClassifierOnly
        } else if self.disable_concept_constraint {
            ConceptRoute::DetachFeatures
        } else {
            ConceptRoute::DetachShallow
        }
    }
}

/// One minibatch laid out for the graph.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    /// Ground-truth instances per concept, `B×3×S×S`.
    pub instances: Vec<Tensor<T>>,
    /// Rows in which each concept is present.
    pub present: Vec<Vec<usize>>,
}

impl<T: Real> Batch<T> {
    pub fn from_samples(samples: &[&ConceptSample]) -> Result<Self, NetError> {
        let images = image_batch(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let k = samples[0].instances.len();
        let mut instances = Vec::with_capacity(k);
        let mut present = Vec::with_capacity(k);
        for c in 0..k {
            instances.push(image_batch(&samples.iter().map(|s| &s.instances[c]).collect::<Vec<_>>())?);
            present.push((0..samples.len()).filter(|&r| samples[r].present(c)).collect());
        }
        Ok(Batch {
            images,
            labels: samples.iter().map(|s| s.label).collect(),
            instances,
            present,
        })
    }

    pub fn present_pairs(&self) -> usize {
        self.present.iter().map(Vec::len).sum()
    }
}

fn gather_rows<T: Real>(t: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let per = t.len() / t.shape()[0];
    let mut data = Vec::with_capacity(rows.len() * per);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * per..(r + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::from_vec(&shape, data).expect("rows are non-empty")
}

/// Present rows of every concept's `vars`, stacked along the batch axis.
fn gather_present<T: Real>(g: &mut Graph<T>, vars: &[Var], batch: &Batch<T>) -> Result<Option<Var>, TensorError> {
    let mut parts = Vec::new();
    for (c, rows) in batch.present.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let v = if rows.len() == g.shape(vars[c])[0] {
            vars[c]
        } else {
            g.select_batch(vars[c], rows)?
        };
        parts.push(v);
    }
    match parts.len() {
        0 => Ok(None),
        1 => Ok(Some(parts[0])),
        _ => g.concat_batch(&parts).map(Some),
    }
}

fn present_instances<T: Real>(batch: &Batch<T>) -> Option<Tensor<T>> {
    let parts: Vec<Tensor<T>> = batch
        .present
        .iter()
        .enumerate()
        .filter(|(_, rows)| !rows.is_empty())
        .map(|(c, rows)| gather_rows(&batch.instances[c], rows))
        .collect();
    let first = parts.first()?;
    let mut shape = first.shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Some(Tensor::from_vec(&shape, data).expect("consistent instance shapes"))
}

/// Pixel-wise MSE between `ĉ_i` and `c_i`, averaged over every present
/// (sample, concept) pair. `None` when nothing is present.
pub fn similarity_loss<T: Real>(g: &mut Graph<T>, visualized: &[Var], batch: &Batch<T>) -> Result<Option<Var>, TensorError> {
    let pairs = batch.present_pairs();
    if pairs == 0 {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for (c, rows) in batch.present.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let pred = if rows.len() == g.shape(visualized[c])[0] {
            visualized[c]
        } else {
            g.select_batch(visualized[c], rows)?
        };
        let target = g.constant(gather_rows(&batch.instances[c], rows));
        let mse = g.mse(pred, target)?;
        let term = g.scale(mse, rows.len() as f64 / pairs as f64);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total)
}

/// `−mean log D(c) − mean log(1 − D(ĉ))` with `ĉ` detached.
pub fn discriminator_loss<T: Real>(
    net: &TcnlNetwork<T>,
    g: &mut Graph<T>,
    params: &[Var],
    real: Var,
    fake: Var,
) -> Result<Var, NetError> {
    let fake = g.stop_gradient(fake);
    let p_real = net.discriminator_graph(g, params, real)?;
    let p_fake = net.discriminator_graph(g, params, fake)?;
    let log_real = g.log_clamped(p_real, LOG_FLOOR);
    let log_real = g.mean(log_real);
    let ones = g.constant(Tensor::full(g.shape(p_fake), T::one()));
    let q = g.sub(ones, p_fake)?;
    let log_fake = g.log_clamped(q, LOG_FLOOR);
    let log_fake = g.mean(log_fake);
    let s = g.add(log_real, log_fake)?;
    Ok(g.scale(s, -1.0))
}

/// Non-saturating generator loss `−mean log D(ĉ)`.
pub fn generator_loss<T: Real>(
    net: &TcnlNetwork<T>,
    g: &mut Graph<T>,
    params: &[Var],
    fake: Var,
) -> Result<Var, NetError> {
    let p = net.discriminator_graph(g, params, fake)?;
    let l = g.log_clamped(p, LOG_FLOOR);
    let m = g.mean(l);
    Ok(g.scale(m, -1.0))
}

/// Both adversarial losses over the present concepts of a batch, or `None`
/// when nothing is present.
pub fn gan_losses<T: Real>(
    net: &TcnlNetwork<T>,
    g: &mut Graph<T>,
    params: &[Var],
    visualized: &[Var],
    batch: &Batch<T>,
) -> Result<Option<(Var, Var)>, NetError> {
    let Some(fake) = gather_present(g, visualized, batch)? else {
        return Ok(None);
    };
    let real = g.constant(present_instances(batch).expect("pairs exist"));
    let d = discriminator_loss(net, g, params, real, fake)?;
    let gl = generator_loss(net, g, params, fake)?;
    Ok(Some((d, gl)))
}

/// Mean softmax cross-entropy.
pub fn classification_loss<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
    g.softmax_cross_entropy(logits, labels)
}

/// Loss terms of one model sub-step as graph nodes.
#[derive(Clone, Debug)]
pub struct ModelLoss {
    pub similarity: Option<Var>,
    pub generator: Option<Var>,
    pub classification: Var,
    /// Weighted sum of the active terms.
    pub total: Var,
}

/// Weighted model objective on an already traced forward pass. Terms with a
/// zero weight are evaluated for reporting only and kept out of `total`.
pub fn model_loss<T: Real>(
    net: &TcnlNetwork<T>,
    g: &mut Graph<T>,
    params: &[Var],
    visualized: &[Var],
    logits: Var,
    batch: &Batch<T>,
    weights: &LossWeights,
) -> Result<ModelLoss, NetError> {
    let similarity = if visualized.is_empty() {
        None
    } else {
        similarity_loss(g, visualized, batch)?
    };
    let fake = if weights.lambda > 0.0 && !visualized.is_empty() {
        gather_present(g, visualized, batch)?
    } else {
        None
    };
    let generator = match fake {
        Some(f) => Some(generator_loss(net, g, params, f)?),
        None => None,
    };
    let classification = classification_loss(g, logits, &batch.labels)?;
    let mut terms = Vec::new();
    if weights.eta > 0.0 {
        terms.push(g.scale(classification, weights.eta));
    }
    if let (Some(s), true) = (similarity, weights.mu > 0.0) {
        terms.push(g.scale(s, weights.mu));
    }
    if let Some(gl) = generator {
        terms.push(g.scale(gl, weights.lambda));
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(ModelLoss {
        similarity,
        generator,
        classification,
        total,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub d_loss: f64,
    pub g_loss: f64,
    pub similarity: f64,
    pub classification: f64,
    pub total: f64,
    /// Set when no concept was present anywhere in the batch, so the concept
    /// terms were skipped.
    pub no_concepts: bool,
}

/// Separate optimizers for the model groups and for the discriminator.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: OptimizerState<T>,
    pub discriminator: OptimizerState<T>,
    pub epoch: usize,
    pub step: usize,
}

impl<T: Real> TrainState<T> {
    pub fn new(config: &TrainConfig, params: usize) -> Self {
        TrainState {
            model: OptimizerState::new(config.optimizer, config.learning_rate, params),
            discriminator: OptimizerState::new(config.optimizer, config.learning_rate, params),
            epoch: 0,
            step: 0,
        }
    }
}

fn finite(component: &'static str, value: f64, state: (usize, usize)) -> Result<f64, TrainError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainError::NonFinite {
            component,
            value,
            epoch: state.0,
            step: state.1,
        })
    }
}

fn collect_grads<T: Real>(g: &Graph<T>, params: &[Var], keep: impl Fn(usize) -> bool) -> Vec<Option<Vec<T>>> {
    params
        .iter()
        .enumerate()
        .map(|(j, &v)| if keep(j) { g.grad(v).map(<[T]>::to_vec) } else { None })
        .collect()
}

/// One discriminator sub-step followed by one model sub-step.
pub fn train_step<T: Real>(
    net: &mut TcnlNetwork<T>,
    batch: &Batch<T>,
    config: &TrainConfig,
    state: &mut TrainState<T>,
) -> Result<StepReport, TrainError> {
    let at = (state.epoch, state.step);
    state.step += 1;
    let weights = config.weights;
    let mut g = Graph::new();
    let mut params = net.bind_where(&mut g, ParamGroup::is_model);
    let images = g.constant(batch.images.clone());
    let trace = net.trace_graph(&mut g, &params, images, config.route())?;
    let mut report = StepReport {
        no_concepts: batch.present_pairs() == 0,
        ..StepReport::default()
    };

    let disc: Vec<usize> = net.params.group_indices(ParamGroup::Discriminator);
    if weights.lambda > 0.0 && !report.no_concepts {
        let fake_vals = {
            let f = gather_present(&mut g, &trace.visualized, batch)?.expect("pairs exist");
            g.value(f).clone()
        };
        let mut dg = Graph::new();
        let dparams = net.bind_where(&mut dg, |grp| grp == ParamGroup::Discriminator);
        let real = dg.constant(present_instances(batch).expect("pairs exist"));
        let fake = dg.constant(fake_vals);
        let d_loss = discriminator_loss(net, &mut dg, &dparams, real, fake)?;
        report.d_loss = finite("discriminator", dg.value(d_loss).item().as_f64(), at)?;
        dg.backward(d_loss)?;
        let grads = collect_grads(&dg, &dparams, |j| net.params.entries[j].group == ParamGroup::Discriminator);
        state.discriminator.apply(&mut net.params, &grads);
        // the model sub-step sees the updated discriminator
        for &j in &disc {
            params[j] = g.constant(net.params.entries[j].value.clone());
        }
    }

    let loss = model_loss(net, &mut g, &params, &trace.visualized, trace.logits, batch, &weights)?;
    report.classification = finite("classification", g.value(loss.classification).item().as_f64(), at)?;
    if let Some(s) = loss.similarity {
        report.similarity = finite("similarity", g.value(s).item().as_f64(), at)?;
    }
    if let Some(gl) = loss.generator {
        report.g_loss = finite("generator", g.value(gl).item().as_f64(), at)?;
    }
    report.total = finite("total", g.value(loss.total).item().as_f64(), at)?;
    g.backward(loss.total)?;
    let grads = collect_grads(&g, &params, |j| net.params.entries[j].group.is_model());
    state.model.apply(&mut net.params, &grads);
    Ok(report)
}

/// Per-epoch means of the step reports plus held-out accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub similarity: f64,
    pub classification: f64,
    pub total: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_net: TcnlNetwork<f32>,
    /// Snapshot from the first epoch reaching the highest test accuracy.
    pub best_net: TcnlNetwork<f32>,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

/// Check that the network was built for this dataset.
pub fn check_compatible<T: Real>(net: &TcnlNetwork<T>, dataset: &Dataset) -> Result<(), TrainError> {
    let spec = &net.spec;
    let names = dataset.manifest.concept_names();
    let size = dataset.manifest.config.image_size;
    let classes = dataset.manifest.config.classes.len();
    if spec.concepts != names {
        return Err(TrainError::Mismatch(format!(
            "network concepts {:?}, dataset concepts {names:?}",
            spec.concepts
        )));
    }
    if spec.classes != classes {
        return Err(TrainError::Mismatch(format!("network has {} classes, dataset {classes}", spec.classes)));
    }
    if spec.input_size != size || spec.instance_size != size {
        return Err(TrainError::Mismatch(format!(
            "network input/instance size {}/{}, dataset images {size}",
            spec.input_size, spec.instance_size
        )));
    }
    Ok(())
}

/// Epoch loop over a seeded shuffle of the training split. `on_epoch` sees
/// each record as soon as the epoch finishes.
pub fn train(
    mut net: TcnlNetwork<f32>,
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    check_compatible(&net, dataset)?;
    if dataset.train.is_empty() || dataset.test.is_empty() {
        return Err(TrainError::Config("training and test splits must be non-empty".into()));
    }
    let mut state = TrainState::new(config, net.params.len());
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, TcnlNetwork<f32>)> = None;
    for epoch in 1..=config.epochs {
        state.epoch = epoch;
        state.step = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let samples: Vec<&ConceptSample> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let batch = Batch::from_samples(&samples)?;
            let r = train_step(&mut net, &batch, config, &mut state)?;
            for (s, v) in sums.iter_mut().zip([r.d_loss, r.g_loss, r.similarity, r.classification, r.total]) {
                *s += v;
            }
            steps += 1;
        }
        let mean = |i: usize| sums[i] / steps as f64;
        let accuracy = metrics::accuracy(&net, &dataset.test)?;
        let record = EpochRecord {
            epoch,
            d_loss: mean(0),
            g_loss: mean(1),
            similarity: mean(2),
            classification: mean(3),
            total: mean(4),
            test_accuracy: accuracy,
        };
        on_epoch(&record);
        history.push(record);
        if best.as_ref().map_or(true, |(_, a, _)| accuracy > *a) {
            best = Some((epoch, accuracy, net.clone()));
        }
    }
    let (best_epoch, best_accuracy, best_net) = match best {
        Some(b) => b,
        None => (0, metrics::accuracy(&net, &dataset.test)?, net.clone()),
    };
    Ok(TrainOutcome {
        final_net: net,
        best_net,
        best_epoch,
        best_accuracy,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetConfig};
    use crate::net::NetworkSpec;

    fn tiny() -> (TcnlNetwork<f64>, Dataset) {
        let data_cfg = DatasetConfig {
            image_size: 32,
            n_train: 8,
            n_test: 4,
            ..DatasetConfig::default()
        };
        let ds = generate_dataset(1, &data_cfg).unwrap();
        let spec = NetworkSpec {
            input_size: 32,
            instance_size: 32,
            ..NetworkSpec::default()
        };
        (TcnlNetwork::build_with(&spec, 2).unwrap(), ds)
    }

    fn batch(ds: &Dataset, n: usize) -> Batch<f64> {
        Batch::from_samples(&ds.train.iter().take(n).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn similarity_identity_and_unit_gap() {
        let (_, ds) = tiny();
        let b = batch(&ds, 2);
        let mut g = Graph::<f64>::new();
        let exact: Vec<Var> = b.instances.iter().map(|t| g.constant(t.clone())).collect();
        let s = similarity_loss(&mut g, &exact, &b).unwrap().unwrap();
        assert_eq!(g.value(s).item(), 0.0);

        let mut zb = b.clone();
        for t in &mut zb.instances {
            *t = Tensor::zeros(t.shape());
        }
        let ones: Vec<Var> = zb.instances.iter().map(|t| g.constant(Tensor::full(t.shape(), 1.0))).collect();
        let s = similarity_loss(&mut g, &ones, &zb).unwrap().unwrap();
        assert!((g.value(s).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_without_present_concepts_is_none() {
        let (_, ds) = tiny();
        let mut b = batch(&ds, 2);
        b.present.iter_mut().for_each(Vec::clear);
        let mut g = Graph::<f64>::new();
        let v: Vec<Var> = b.instances.iter().map(|t| g.constant(t.clone())).collect();
        assert!(similarity_loss(&mut g, &v, &b).unwrap().is_none());
    }

    #[test]
    fn uniform_discriminator_values() {
        // D ≡ 0.5 when the last linear layer is zero
        let (mut net, ds) = tiny();
        let last = *net.params.group_indices(ParamGroup::Discriminator).iter().rev().nth(1).unwrap();
        let shape = net.params.entries[last].value.shape().to_vec();
        net.params.entries[last].value = Tensor::zeros(&shape);
        let b = batch(&ds, 2);
        let mut g = Graph::new();
        let params = net.bind(&mut g);
        let x = g.constant(b.images.clone());
        let t = net.trace_graph(&mut g, &params, x, ConceptRoute::Shared).unwrap();
        let (d, gl) = gan_losses(&net, &mut g, &params, &t.visualized, &b).unwrap().unwrap();
        assert!((g.value(d).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((g.value(gl).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            weights: LossWeights {
                lambda: 0.0,
                mu: 0.0,
                eta: 0.0,
            },
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let json = r#"{"epochs": 2, "weights": {"mu": 0.5}}"#;
        let c: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!((c.epochs, c.weights.mu, c.weights.eta), (2, 0.5, 1.0));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 2}"#).is_err());
    }

    #[test]
    fn nan_parameter_is_reported_by_component() {
        let (net, ds) = tiny();
        let mut net: TcnlNetwork<f32> = net.cast();
        let j = net.params.group_indices(ParamGroup::Classifier)[0];
        net.params.entries[j].value.data_mut()[0] = f32::NAN;
        let b = Batch::from_samples(&ds.train.iter().take(2).collect::<Vec<_>>()).unwrap();
        let cfg = TrainConfig::default();
        let mut st = TrainState::new(&cfg, net.params.len());
        let err = train_step(&mut net, &b, &cfg, &mut st).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { component: "classification", .. }), "{err}");
    }
}
