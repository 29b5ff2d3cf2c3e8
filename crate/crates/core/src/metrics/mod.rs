//! Concept-alignment and quality measurements: CRNP, visualisation MSE and
//! SSIM, accuracy, and gradient-based concept weights.

mod ssim;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ssim::{gaussian_taps, mse_255, ssim, SSIM_K1, SSIM_K2, SSIM_RANGE, SSIM_SIGMA, SSIM_WINDOW};

use crate::data::{remove_concept, ConceptSample, DataError, Image};
use crate::net::{argmax, batch_images, image_batch, ConceptRoute, NetError, TcnlNetwork};
use crate::tensor::{Graph, Real, Tensor, TensorError};

/// Samples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 50;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0}")]
    Empty(String),
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Per-channel mean over batch and space of a `B×N×H×W` feature.
pub fn neuron_activation<T: Real>(feature: &Tensor<T>) -> Vec<f64> {
    let s = feature.shape();
    let (b, n, plane) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![0.0; n];
    for (i, chunk) in feature.data().chunks(plane).enumerate() {
        out[i % n] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
    }
    let count = (b * plane) as f64;
    out.iter_mut().for_each(|v| *v /= count);
    out
}

/// Fraction of neurons whose drop `full − removed` strictly exceeds the mean drop.
pub fn crnp_from_activations(full: &[f64], removed: &[f64]) -> f64 {
    assert_eq!(full.len(), removed.len(), "one activation per neuron");
    let drops: Vec<f64> = full.iter().zip(removed).map(|(a, b)| a - b).collect();
    let mean = drops.iter().sum::<f64>() / drops.len() as f64;
    drops.iter().filter(|&&d| d > mean).count() as f64 / drops.len() as f64
}

/// Last-layer feature of every concept extractor, sharing one shallow pass.
pub fn extractor_features<T: Real>(net: &TcnlNetwork<T>, images: &Tensor<T>) -> Result<Vec<Tensor<T>>, NetError> {
    let mut g = Graph::new();
    let params = net.bind_where(&mut g, |_| false);
    let x = g.constant(images.clone());
    let shallow = net.shallow_graph(&mut g, &params, x)?;
    let mut out = Vec::with_capacity(net.concept_count());
    for i in 0..net.concept_count() {
        let f = net.extractor_graph(&mut g, &params, i, shallow)?;
        out.push(g.value(f).clone());
    }
    Ok(out)
}

/// Per-image activations `[image][extractor][neuron]`.
fn activations<T: Real>(net: &TcnlNetwork<T>, images: &[&Image]) -> Result<Vec<Vec<Vec<f64>>>, MetricsError> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let feats = extractor_features(net, &image_batch(chunk)?)?;
        for b in 0..chunk.len() {
            out.push(
                feats
                    .iter()
                    .map(|f| neuron_activation(&f.slice_batch(b, 1).expect("row in range")))
                    .collect(),
            );
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrnpTable {
    /// `values[i][j]`: CRNP of extractor `i` when concept `j` is removed.
    pub values: Vec<Vec<f64>>,
    /// `per_image[i][j]`: per-image values behind `values[i][j]`.
    pub per_image: Vec<Vec<Vec<f64>>>,
}

impl CrnpTable {
    /// Extractor `i` measured against its own concept.
    pub fn own(&self) -> Vec<f64> {
        (0..self.values.len()).map(|i| self.values[i][i]).collect()
    }
}

/// CRNP of every extractor against every concept's removal, averaged over
/// the samples in which that concept is present.
pub fn crnp_table<T: Real>(net: &TcnlNetwork<T>, samples: &[ConceptSample]) -> Result<CrnpTable, MetricsError> {
    let k = net.concept_count();
    let full = activations(net, &samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let mut values = vec![vec![0.0; k]; k];
    let mut per_image = vec![vec![Vec::new(); k]; k];
    for j in 0..k {
        let idx: Vec<usize> = (0..samples.len()).filter(|&s| samples[s].present(j)).collect();
        if idx.is_empty() {
            return Err(MetricsError::Empty(format!("concept {} is absent from every sample", net.spec.concepts[j])));
        }
        let removed: Vec<Image> = idx
            .iter()
            .map(|&s| remove_concept(&samples[s].image, &samples[s].masks[j]))
            .collect::<Result<_, _>>()?;
        let removed_act = activations(net, &removed.iter().collect::<Vec<_>>())?;
        for i in 0..k {
            let scores: Vec<f64> = idx
                .iter()
                .zip(&removed_act)
                .map(|(&s, r)| crnp_from_activations(&full[s][i], &r[i]))
                .collect();
            values[i][j] = scores.iter().sum::<f64>() / scores.len() as f64;
            per_image[i][j] = scores;
        }
    }
    Ok(CrnpTable { values, per_image })
}

/// Predicted class of every sample; ties go to the lowest index.
pub fn predictions<T: Real>(net: &TcnlNetwork<T>, samples: &[ConceptSample]) -> Result<Vec<usize>, MetricsError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let logits = net.logits(&image_batch(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?)?;
        out.extend(logits.data().chunks(net.spec.classes).map(argmax));
    }
    Ok(out)
}

pub fn accuracy_of(predicted: &[usize], labels: &[usize]) -> Result<f64, MetricsError> {
    if predicted.is_empty() {
        return Err(MetricsError::Empty("accuracy of an empty set".into()));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predicted.len() as f64)
}

pub fn accuracy<T: Real>(net: &TcnlNetwork<T>, samples: &[ConceptSample]) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty("accuracy of an empty set".into()));
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    accuracy_of(&predictions(net, samples)?, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptWeights {
    /// Normalised to sum to 1.
    pub weights: Vec<f64>,
    /// Mean absolute gradient per concept before normalisation.
    pub raw: Vec<f64>,
    /// Every raw weight was zero; `weights` is uniform.
    pub degenerate: bool,
}

/// Mean `|∂ logit_pred / ∂ x_ci|` per concept, normalised to sum to 1.
pub fn concept_weights<T: Real>(net: &TcnlNetwork<T>, samples: &[ConceptSample]) -> Result<ConceptWeights, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty("concept weights of an empty set".into()));
    }
    let k = net.concept_count();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for chunk in samples.chunks(EVAL_BATCH) {
        let images = image_batch(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let feats = extractor_features(net, &images)?;
        let mut g = Graph::new();
        let params = net.bind_where(&mut g, |_| false);
        let xs: Vec<_> = feats.into_iter().map(|f| g.param(f)).collect();
        let logits = net.classifier_graph(&mut g, &params, &xs)?;
        let classes = net.spec.classes;
        let mut pick = vec![T::zero(); chunk.len() * classes];
        for (b, row) in g.value(logits).data().chunks(classes).enumerate() {
            pick[b * classes + argmax(row)] = T::one();
        }
        // samples are independent, so one backward of the summed scores gives per-sample gradients
        let pick = g.constant(Tensor::from_vec(&[chunk.len(), classes], pick)?);
        let chosen = g.mul(logits, pick)?;
        let score = g.sum(chosen);
        g.backward(score)?;
        for (i, &x) in xs.iter().enumerate() {
            let grad = g.grad(x).expect("feature is a leaf on the score path");
            sums[i] += grad.iter().map(|v| v.as_f64().abs()).sum::<f64>();
            counts[i] += grad.len();
        }
    }
    let raw: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let total: f64 = raw.iter().sum();
    let degenerate = !(total > 0.0);
    let weights = if degenerate {
        vec![1.0 / k as f64; k]
    } else {
        raw.iter().map(|r| r / total).collect()
    };
    Ok(ConceptWeights { weights, raw, degenerate })
}

/// Images laid side by side, top-aligned, on a black canvas.
pub fn hconcat(images: &[&Image]) -> Image {
    let width = images.iter().map(|i| i.width).sum();
    let height = images.iter().map(|i| i.height).max().unwrap_or(0);
    let mut out = Image::new(width, height);
    let mut x0 = 0;
    for img in images {
        for y in 0..img.height {
            for x in 0..img.width {
                out.set_pixel(x0 + x, y, img.pixel(x, y));
            }
        }
        x0 += img.width;
    }
    out
}

/// Pixelwise maximum of the visualised instances, and a strip of the instances.
pub fn positional_montage(instances: &[Image]) -> Result<(Image, Image), MetricsError> {
    let first = instances
        .first()
        .ok_or_else(|| MetricsError::Empty("montage of no instances".into()))?;
    let mut composite = first.clone();
    for inst in &instances[1..] {
        ssim::check_same("positional_montage", first, inst)?;
        for (c, &v) in composite.data.iter_mut().zip(&inst.data) {
            *c = c.max(v);
        }
    }
    let strip = hconcat(&instances.iter().collect::<Vec<_>>());
    Ok((composite, strip))
}

/// Summary of one evaluation pass. Per-concept vectors follow `concepts`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub concepts: Vec<String>,
    pub crnp: Vec<f64>,
    /// `crnp_cross[i][j]`: extractor `i` measured against removal of concept `j`.
    pub crnp_cross: Vec<Vec<f64>>,
    pub crnp_per_image: Vec<Vec<f64>>,
    pub mse_255: Vec<f64>,
    pub ssim: Vec<f64>,
    pub accuracy: f64,
    pub concept_weights: Vec<f64>,
    pub concept_weights_degenerate: bool,
    pub n_images: usize,
}

/// Mean visualisation MSE (0–255 scale) and SSIM per concept over the
/// samples in which the concept is present.
pub fn visualization_quality<T: Real>(
    net: &TcnlNetwork<T>,
    samples: &[ConceptSample],
) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    let k = net.concept_count();
    let (mut mse, mut sim, mut n) = (vec![0.0; k], vec![0.0; k], vec![0usize; k]);
    for chunk in samples.chunks(EVAL_BATCH) {
        let images = image_batch(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let params = net.bind_where(&mut g, |_| false);
        let x = g.constant(images);
        let trace = net.trace_graph(&mut g, &params, x, ConceptRoute::Shared)?;
        for c in 0..k {
            let vis = batch_images(g.value(trace.visualized[c]));
            for (s, v) in chunk.iter().zip(&vis) {
                if s.present(c) {
                    mse[c] += mse_255(&s.instances[c], v)?;
                    sim[c] += ssim(&s.instances[c], v)?;
                    n[c] += 1;
                }
            }
        }
    }
    for c in 0..k {
        if n[c] == 0 {
            return Err(MetricsError::Empty(format!("concept {} is absent from every sample", net.spec.concepts[c])));
        }
        mse[c] /= n[c] as f64;
        sim[c] /= n[c] as f64;
    }
    Ok((mse, sim))
}

pub fn evaluate<T: Real>(net: &TcnlNetwork<T>, samples: &[ConceptSample]) -> Result<MetricsReport, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty("evaluation set is empty".into()));
    }
    let table = crnp_table(net, samples)?;
    let (mse, sim) = visualization_quality(net, samples)?;
    let weights = concept_weights(net, samples)?;
    Ok(MetricsReport {
        concepts: net.spec.concepts.clone(),
        crnp: table.own(),
        crnp_per_image: (0..table.values.len()).map(|i| table.per_image[i][i].clone()).collect(),
        crnp_cross: table.values,
        mse_255: mse,
        ssim: sim,
        accuracy: accuracy(net, samples)?,
        concept_weights: weights.weights,
        concept_weights_degenerate: weights.degenerate,
        n_images: samples.len(),
    })
}

impl MetricsReport {
    /// Aligned plain-text table, one row per concept.
    pub fn to_table(&self) -> String {
        let width = self.concepts.iter().map(String::len).max().unwrap_or(0).max("concept".len());
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>6}  {:>9}  {:>6}  {:>6}", "concept", "CRNP", "MSE", "SSIM", "weight");
        for (i, name) in self.concepts.iter().enumerate() {
            let _ = writeln!(
                s,
                "{name:<width$}  {:>6.3}  {:>9.2}  {:>6.3}  {:>6.3}",
                self.crnp[i], self.mse_255[i], self.ssim[i], self.concept_weights[i]
            );
        }
        let _ = writeln!(s, "accuracy {:.4} over {} images", self.accuracy, self.n_images);
        s
    }
}
