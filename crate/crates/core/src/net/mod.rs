//! The five-part concept network: a shared shallow extractor, one feature
//! extractor and one mapper per concept, a classifier over the concatenated
//! concept features, and a discriminator over concept instances.

mod checkpoint;
mod layers;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
use layers::{Builder, Layer, Sequential};

use crate::data::Image;
use crate::tensor::{conv_out_extent, Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Input(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint: unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint: truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Template {
    MiniVgg,
    MiniAlexnet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub template: Template,
    pub input_size: usize,
    pub classes: usize,
    /// Fixes the channel order of the concatenation and every per-concept output.
    pub concepts: Vec<String>,
    pub shallow_channels: Vec<usize>,
    pub extractor_channels: Vec<usize>,
    /// Hidden widths of the transposed-conv stack; the last entry repeats if
    /// more upsampling stages are needed.
    pub mapper_channels: Vec<usize>,
    pub classifier_hidden: usize,
    pub discriminator_channels: Vec<usize>,
    pub leaky_slope: f64,
    pub instance_size: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            template: Template::MiniVgg,
            input_size: 64,
            classes: 4,
            concepts: ["head", "torso", "leg", "shape"].map(String::from).to_vec(),
            shallow_channels: vec![16, 32],
            extractor_channels: vec![16, 32],
            mapper_channels: vec![16, 8],
            classifier_hidden: 64,
            discriminator_channels: vec![4, 8, 8],
            leaky_slope: 0.2,
            instance_size: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Shallow,
    Extractor(usize),
    Mapper(usize),
    Classifier,
    Discriminator,
}

impl ParamGroup {
    /// Everything except the discriminator.
    pub fn is_model(self) -> bool {
        self != ParamGroup::Discriminator
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamGroup::Shallow => write!(f, "shallow"),
            ParamGroup::Extractor(i) => write!(f, "extractor{i}"),
            ParamGroup::Mapper(i) => write!(f, "mapper{i}"),
            ParamGroup::Classifier => write!(f, "classifier"),
            ParamGroup::Discriminator => write!(f, "discriminator"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

/// Flat registry of every parameter, each tagged with exactly one group.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    pub entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    fn push(&mut self, name: String, group: ParamGroup, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn group_indices(&self, group: ParamGroup) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].group == group).collect()
    }
}

/// How concept losses reach the feature extractors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConceptRoute {
    /// One extractor pass feeds both classifier and mapper; gradients flow everywhere.
    Shared,
    /// Mappers read a second extractor pass over the detached shallow feature,
    /// so mapper-side losses reach extractors and mappers but not the shallow extractor.
    DetachShallow,
    /// Mappers read detached concept features: mapper-side losses train mappers only.
    DetachFeatures,
    /// Mappers are not evaluated at all.
    ClassifierOnly,
}

/// Graph handles for one forward pass.
#[derive(Clone, Debug)]
pub struct TraceVars {
    pub shallow: Var,
    pub concept_features: Vec<Var>,
    pub visualized: Vec<Var>,
    pub logits: Var,
}

/// Values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    pub shallow: Tensor<T>,
    pub concept_features: Vec<Tensor<T>>,
    /// Mapper outputs in `[0, 1]`, one `B×3×S×S` tensor per concept.
    pub visualized: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
    pub predicted: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TcnlNetwork<T> {
    pub spec: NetworkSpec,
    pub params: ParamStore<T>,
    shallow: Sequential,
    extractors: Vec<Sequential>,
    mappers: Vec<Sequential>,
    classifier: Sequential,
    discriminator: Sequential,
    feature_size: usize,
}

/// Initial mapper output level. Concept instances are mostly black, and a
/// mapper that starts at 0.5 is driven into sigmoid saturation by the first
/// updates; starting near the background level avoids that.
pub const MAPPER_OUTPUT_PRIOR: f64 = 0.05;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Stack images into a `B×3×H×W` tensor.
pub fn image_batch<T: Real>(images: &[&Image]) -> Result<Tensor<T>, NetError> {
    let first = images.first().ok_or_else(|| NetError::Input("empty image batch".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if (img.width, img.height) != (w, h) {
            return Err(NetError::Input(format!(
                "image {}x{} in a batch of {w}x{h}",
                img.width, img.height
            )));
        }
        data.extend(img.to_chw().into_iter().map(|v| T::from_f64(f64::from(v))));
    }
    Ok(Tensor::from_vec(&[images.len(), 3, h, w], data)?)
}

/// Split a `B×3×H×W` tensor back into images.
pub fn batch_images<T: Real>(t: &Tensor<T>) -> Vec<Image> {
    let s = t.shape();
    let per = s[1] * s[2] * s[3];
    t.data()
        .chunks(per)
        .map(|c| {
            let planar: Vec<f32> = c.iter().map(|v| v.as_f64() as f32).collect();
            Image::from_chw(s[3], s[2], &planar)
        })
        .collect()
}

impl NetworkSpec {
    fn validate(&self) -> Result<(), NetError> {
        let err = |m: String| Err(NetError::Spec(m));
        if self.concepts.is_empty() {
            return err("at least one concept is required".into());
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.concepts.iter().find(|c| !seen.insert(c.as_str())) {
            return err(format!("duplicate concept `{dup}`"));
        }
        if self.classes < 2 {
            return err(format!("need at least 2 classes, got {}", self.classes));
        }
        let need_shallow = match self.template {
            Template::MiniVgg => 2,
            Template::MiniAlexnet => 1,
        };
        if self.shallow_channels.len() != need_shallow {
            return err(format!(
                "{:?} needs {need_shallow} shallow widths, got {}",
                self.template,
                self.shallow_channels.len()
            ));
        }
        if self.extractor_channels.len() != 2 {
            return err(format!("extractor needs 2 widths, got {}", self.extractor_channels.len()));
        }
        if self.discriminator_channels.len() != 3 {
            return err(format!("discriminator needs 3 widths, got {}", self.discriminator_channels.len()));
        }
        if self.mapper_channels.is_empty() {
            return err("mapper needs at least one hidden width".into());
        }
        let widths = self
            .shallow_channels
            .iter()
            .chain(&self.extractor_channels)
            .chain(&self.mapper_channels)
            .chain(&self.discriminator_channels);
        if widths.chain([&self.classifier_hidden]).any(|&w| w == 0) {
            return err("channel widths must be positive".into());
        }
        if self.instance_size % 8 != 0 || self.instance_size < 8 {
            return err(format!(
                "instance_size {} must be a positive multiple of 8 (three stride-2 discriminator stages)",
                self.instance_size
            ));
        }
        Ok(())
    }

    /// Spatial extent of every concept feature map.
    pub fn feature_size(&self) -> Result<usize, NetError> {
        let bad = || NetError::Spec(format!("input size {} is too small for {:?}", self.input_size, self.template));
        let conv = |s: usize, k, st, p| conv_out_extent(s, k, st, p).ok_or_else(bad);
        let pool = |s: usize| if s >= 2 { Ok(s / 2) } else { Err(bad()) };
        let s = self.input_size;
        match self.template {
            Template::MiniVgg => {
                let s = pool(conv(s, 3, 1, 1)?)?;
                let s = pool(conv(s, 3, 1, 1)?)?;
                pool(s)
            }
            Template::MiniAlexnet => {
                let s = pool(conv(s, 5, 2, 2)?)?;
                pool(s)
            }
        }
    }

    /// Number of stride-2 transposed convolutions from feature to instance size.
    fn mapper_stages(&self, feature: usize) -> Result<usize, NetError> {
        let mut size = feature;
        let mut stages = 0;
        while size < self.instance_size {
            size *= 2;
            stages += 1;
        }
        if size != self.instance_size || stages == 0 {
            return Err(NetError::Spec(format!(
                "mapper cannot reach instance size {} from {feature}x{feature} features by doubling",
                self.instance_size
            )));
        }
        Ok(stages)
    }
}

impl TcnlNetwork<f32> {
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self, NetError> {
        TcnlNetwork::build_with(spec, seed)
    }
}

impl<T: Real> TcnlNetwork<T> {
    pub fn build_with(spec: &NetworkSpec, seed: u64) -> Result<Self, NetError> {
        spec.validate()?;
        let feature_size = spec.feature_size()?;
        let stages = spec.mapper_stages(feature_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore { entries: Vec::new() };
        let (e0, e1) = (spec.extractor_channels[0], spec.extractor_channels[1]);

        let shallow_out;
        let shallow = {
            let mut b = Builder::new(&mut store, &mut rng, ParamGroup::Shallow);
            match spec.template {
                Template::MiniVgg => {
                    let (c0, c1) = (spec.shallow_channels[0], spec.shallow_channels[1]);
                    b.conv(3, c0, 3, 1, 1)
                        .push(Layer::Relu)
                        .push(Layer::MaxPool { window: 2, stride: 2 })
                        .conv(c0, c1, 3, 1, 1)
                        .push(Layer::Relu)
                        .push(Layer::MaxPool { window: 2, stride: 2 });
                    shallow_out = c1;
                }
                Template::MiniAlexnet => {
                    let c0 = spec.shallow_channels[0];
                    b.conv(3, c0, 5, 2, 2)
                        .push(Layer::Relu)
                        .push(Layer::MaxPool { window: 2, stride: 2 });
                    shallow_out = c0;
                }
            }
            b.finish()
        };

        let k = spec.concepts.len();
        let mut extractors = Vec::with_capacity(k);
        for i in 0..k {
            let mut b = Builder::new(&mut store, &mut rng, ParamGroup::Extractor(i));
            match spec.template {
                Template::MiniVgg => {
                    b.conv(shallow_out, e0, 3, 1, 1)
                        .push(Layer::Relu)
                        .push(Layer::MaxPool { window: 2, stride: 2 })
                        .conv(e0, e1, 3, 1, 1)
                        .push(Layer::Relu);
                }
                Template::MiniAlexnet => {
                    b.conv(shallow_out, e0, 3, 1, 1)
                        .push(Layer::Relu)
                        .conv(e0, e1, 3, 1, 1)
                        .push(Layer::Relu)
                        .push(Layer::MaxPool { window: 2, stride: 2 });
                }
            }
            extractors.push(b.finish());
        }

        let mut mappers = Vec::with_capacity(k);
        for i in 0..k {
            let mut b = Builder::new(&mut store, &mut rng, ParamGroup::Mapper(i));
            let mut c_in = e1;
            for stage in 0..stages {
                let last = stage + 1 == stages;
                let c_out = if last {
                    3
                } else {
                    *spec.mapper_channels.get(stage).unwrap_or(spec.mapper_channels.last().expect("validated"))
                };
                b.conv_transpose(c_in, c_out, 4, 2, 1);
                if last {
                    b.fill_last_bias(T::from_f64(logit(MAPPER_OUTPUT_PRIOR)));
                }
                b.push(if last { Layer::Sigmoid } else { Layer::LeakyRelu(spec.leaky_slope) });
                c_in = c_out;
            }
            mappers.push(b.finish());
        }

        let classifier = {
            let mut b = Builder::new(&mut store, &mut rng, ParamGroup::Classifier);
            b.push(Layer::GlobalAvgPool)
                .linear(k * e1, spec.classifier_hidden)
                .push(Layer::Relu)
                .linear(spec.classifier_hidden, spec.classes);
            b.finish()
        };

        let discriminator = {
            let d = &spec.discriminator_channels;
            let slope = spec.leaky_slope;
            let side = spec.instance_size / 8;
            let mut b = Builder::new(&mut store, &mut rng, ParamGroup::Discriminator);
            b.conv(3, d[0], 4, 2, 1)
                .push(Layer::LeakyRelu(slope))
                .conv(d[0], d[1], 4, 2, 1)
                .push(Layer::LeakyRelu(slope))
                .conv(d[1], d[2], 4, 2, 1)
                .push(Layer::LeakyRelu(slope))
                .push(Layer::Flatten)
                .linear(d[2] * side * side, 1)
                .push(Layer::Sigmoid);
            b.finish()
        };

        Ok(TcnlNetwork {
            spec: spec.clone(),
            params: store,
            shallow,
            extractors,
            mappers,
            classifier,
            discriminator,
            feature_size,
        })
    }

    pub fn concept_count(&self) -> usize {
        self.extractors.len()
    }

    pub fn feature_size(&self) -> usize {
        self.feature_size
    }

    /// Copy with every parameter converted to another precision.
    pub fn cast<U: Real>(&self) -> TcnlNetwork<U> {
        TcnlNetwork {
            spec: self.spec.clone(),
            params: ParamStore {
                entries: self
                    .params
                    .entries
                    .iter()
                    .map(|e| ParamEntry {
                        name: e.name.clone(),
                        group: e.group,
                        value: e.value.cast(),
                    })
                    .collect(),
            },
            shallow: self.shallow.clone(),
            extractors: self.extractors.clone(),
            mappers: self.mappers.clone(),
            classifier: self.classifier.clone(),
            discriminator: self.discriminator.clone(),
            feature_size: self.feature_size,
        }
    }

    /// Record every parameter on `g` as a trainable leaf; the returned vector is
    /// indexed like `self.params.entries`.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.entries.iter().map(|e| g.param(e.value.clone())).collect()
    }

    /// Like [`TcnlNetwork::bind`] but only groups accepted by `trainable` receive gradients.
    pub fn bind_where(&self, g: &mut Graph<T>, trainable: impl Fn(ParamGroup) -> bool) -> Vec<Var> {
        self.params
            .entries
            .iter()
            .map(|e| {
                if trainable(e.group) {
                    g.param(e.value.clone())
                } else {
                    g.constant(e.value.clone())
                }
            })
            .collect()
    }

    fn check_input(&self, shape: &[usize], size: usize, what: &str) -> Result<(), NetError> {
        if shape.len() != 4 || shape[1] != 3 || shape[2] != size || shape[3] != size {
            return Err(NetError::Input(format!(
                "{what} batch has shape {shape:?}, expected B×3×{size}×{size}"
            )));
        }
        Ok(())
    }

    pub fn shallow_graph(&self, g: &mut Graph<T>, params: &[Var], images: Var) -> Result<Var, NetError> {
        self.check_input(g.shape(images), self.spec.input_size, "image")?;
        Ok(self.shallow.forward(g, params, images)?)
    }

    pub fn extractor_graph(&self, g: &mut Graph<T>, params: &[Var], concept: usize, shallow: Var) -> Result<Var, NetError> {
        Ok(self.extractors[concept].forward(g, params, shallow)?)
    }

    pub fn mapper_graph(&self, g: &mut Graph<T>, params: &[Var], concept: usize, features: Var) -> Result<Var, NetError> {
        Ok(self.mappers[concept].forward(g, params, features)?)
    }

    pub fn classifier_graph(&self, g: &mut Graph<T>, params: &[Var], features: &[Var]) -> Result<Var, NetError> {
        let joined = g.concat_channels(features)?;
        Ok(self.classifier.forward(g, params, joined)?)
    }

    /// Probability that each instance in `instances: B×3×S×S` is an original, as `B×1`.
    pub fn discriminator_graph(&self, g: &mut Graph<T>, params: &[Var], instances: Var) -> Result<Var, NetError> {
        self.check_input(g.shape(instances), self.spec.instance_size, "instance")?;
        Ok(self.discriminator.forward(g, params, instances)?)
    }

    /// Full forward pass: `x_ci = f_ci(f_shallow(I))`, `ĉ_i = m_i(x_ci)`, logits from the concatenation.
    pub fn trace_graph(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        images: Var,
        route: ConceptRoute,
    ) -> Result<TraceVars, NetError> {
        let shallow = self.shallow_graph(g, params, images)?;
        let mut features = Vec::with_capacity(self.concept_count());
        for i in 0..self.concept_count() {
            features.push(self.extractor_graph(g, params, i, shallow)?);
        }
        let logits = self.classifier_graph(g, params, &features)?;
        let detached_shallow = match route {
            ConceptRoute::DetachShallow => Some(g.stop_gradient(shallow)),
            _ => None,
        };
        let mut visualized = Vec::with_capacity(self.concept_count());
        for (i, &x) in features.iter().enumerate() {
            let mapper_in = match route {
                ConceptRoute::ClassifierOnly => break,
                ConceptRoute::Shared => x,
                ConceptRoute::DetachShallow => {
                    self.extractor_graph(g, params, i, detached_shallow.expect("set for this route"))?
                }
                ConceptRoute::DetachFeatures => g.stop_gradient(x),
            };
            visualized.push(self.mapper_graph(g, params, i, mapper_in)?);
        }
        Ok(TraceVars {
            shallow,
            concept_features: features,
            visualized,
            logits,
        })
    }

    pub fn forward(&self, images: &Tensor<T>) -> Result<ForwardTrace<T>, NetError> {
        let mut g = Graph::new();
        let params = self.bind_where(&mut g, |_| false);
        let x = g.constant(images.clone());
        let t = self.trace_graph(&mut g, &params, x, ConceptRoute::Shared)?;
        let logits = g.value(t.logits).clone();
        let classes = logits.shape()[1];
        let predicted = logits.data().chunks(classes).map(argmax).collect();
        Ok(ForwardTrace {
            shallow: g.value(t.shallow).clone(),
            concept_features: t.concept_features.iter().map(|&v| g.value(v).clone()).collect(),
            visualized: t.visualized.iter().map(|&v| g.value(v).clone()).collect(),
            logits,
            predicted,
        })
    }

    /// Logits only; mappers are skipped.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        let mut g = Graph::new();
        let params = self.bind_where(&mut g, |_| false);
        let x = g.constant(images.clone());
        let t = self.trace_graph(&mut g, &params, x, ConceptRoute::ClassifierOnly)?;
        Ok(g.value(t.logits).clone())
    }

    /// Last-layer output of one concept extractor.
    pub fn concept_features(&self, images: &Tensor<T>, concept: usize) -> Result<Tensor<T>, NetError> {
        let mut g = Graph::new();
        let params = self.bind_where(&mut g, |_| false);
        let x = g.constant(images.clone());
        let shallow = self.shallow_graph(&mut g, &params, x)?;
        let f = self.extractor_graph(&mut g, &params, concept, shallow)?;
        Ok(g.value(f).clone())
    }

    pub fn discriminate(&self, instances: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        let mut g = Graph::new();
        let params = self.bind_where(&mut g, |_| false);
        let x = g.constant(instances.clone());
        let p = self.discriminator_graph(&mut g, &params, x)?;
        Ok(g.value(p).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(k: usize) -> NetworkSpec {
        NetworkSpec {
            input_size: 32,
            instance_size: 32,
            concepts: (0..k).map(|i| format!("c{i}")).collect(),
            ..NetworkSpec::default()
        }
    }

    fn random_batch(b: usize, s: usize, seed: u64) -> Tensor<f32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..b * 3 * s * s).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(&[b, 3, s, s], data).unwrap()
    }

    #[test]
    fn default_shapes() {
        let net = TcnlNetwork::build(&NetworkSpec::default(), 0).unwrap();
        assert_eq!(net.feature_size(), 8);
        let t = net.forward(&random_batch(2, 64, 1)).unwrap();
        assert_eq!(t.concept_features.len(), 4);
        for f in &t.concept_features {
            assert_eq!(f.shape(), &[2, 32, 8, 8]);
        }
        for v in &t.visualized {
            assert_eq!(v.shape(), &[2, 3, 64, 64]);
            assert!(v.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        assert_eq!(t.logits.shape(), &[2, 4]);
    }

    #[test]
    fn alexnet_template_shapes() {
        let spec = NetworkSpec {
            template: Template::MiniAlexnet,
            shallow_channels: vec![16],
            ..NetworkSpec::default()
        };
        let net = TcnlNetwork::build(&spec, 0).unwrap();
        let t = net.forward(&random_batch(1, 64, 2)).unwrap();
        assert_eq!(t.concept_features[0].shape(), &[1, 32, 8, 8]);
        assert_eq!(t.visualized[0].shape(), &[1, 3, 64, 64]);
    }

    #[test]
    fn single_concept_builds() {
        let net = TcnlNetwork::build(&small_spec(1), 3).unwrap();
        let t = net.forward(&random_batch(2, 32, 3)).unwrap();
        assert_eq!(t.logits.shape(), &[2, 4]);
    }

    #[test]
    fn unreachable_instance_size_fails_at_build() {
        let spec = NetworkSpec {
            instance_size: 48,
            ..NetworkSpec::default()
        };
        assert!(matches!(TcnlNetwork::build(&spec, 0), Err(NetError::Spec(_))));
    }

    #[test]
    fn groups_are_exhaustive_and_disjoint() {
        let net = TcnlNetwork::build(&NetworkSpec::default(), 0).unwrap();
        let mut groups = vec![ParamGroup::Shallow, ParamGroup::Classifier, ParamGroup::Discriminator];
        for i in 0..4 {
            groups.push(ParamGroup::Extractor(i));
            groups.push(ParamGroup::Mapper(i));
        }
        let mut covered: Vec<usize> = groups.iter().flat_map(|&g| net.params.group_indices(g)).collect();
        assert!(groups.iter().all(|&g| !net.params.group_indices(g).is_empty()));
        covered.sort_unstable();
        assert_eq!(covered, (0..net.params.len()).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = TcnlNetwork::build(&NetworkSpec::default(), 5).unwrap();
        let b = TcnlNetwork::build(&NetworkSpec::default(), 5).unwrap();
        let c = TcnlNetwork::build(&NetworkSpec::default(), 6).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn zero_input_gives_zero_shallow_feature() {
        let net = TcnlNetwork::build(&small_spec(2), 0).unwrap();
        let t = net.forward(&Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        assert!(t.shallow.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_size_is_checked() {
        let net = TcnlNetwork::build(&small_spec(2), 0).unwrap();
        assert!(matches!(net.forward(&Tensor::zeros(&[1, 3, 16, 16])), Err(NetError::Input(_))));
        assert!(net.discriminate(&Tensor::zeros(&[1, 3, 64, 64])).is_err());
    }

    #[test]
    fn discriminator_is_a_probability() {
        let net = TcnlNetwork::build(&small_spec(2), 0).unwrap();
        let batch = random_batch(3, 32, 9);
        let p = net.discriminate(&batch).unwrap();
        assert_eq!(p.shape(), &[3, 1]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p, net.discriminate(&batch).unwrap());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
