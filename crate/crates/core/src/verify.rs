//! Self-verification suite: finite-difference checks of every differentiable
//! primitive and of the composed training objective, the conv/transposed-conv
//! adjoint identity, and the gradient-routing invariants of a training step.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, mix_seed, DatasetConfig};
use crate::net::{ConceptRoute, NetError, NetworkSpec, ParamGroup, TcnlNetwork};
use crate::tensor::{conv_out_extent, finite_diff_gradcheck, Graph, Tensor, TensorError, Var};
use crate::train::{model_loss, train_step, Batch, LossWeights, TrainConfig, TrainError, TrainState};

pub const GRADCHECK_EPS: f64 = 1e-6;
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const ADJOINT_TOL: f64 = 1e-10;

/// Worst case over every seed and every differentiated argument of one op.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub op: String,
    pub max_rel_error: f64,
    pub cases: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

type LossFn = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>>;

/// One differentiated argument: the point `x` and the scalar function of it.
struct Case {
    x: Tensor<f64>,
    f: LossFn,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("positive extents")
}

/// Values bounded away from zero by `gap`, with random sign.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("positive extents")
}

/// Distinct values spaced far beyond the finite-difference step, so no
/// perturbation can change a max-pool winner.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 + rng.gen_range(0.0..0.004)).collect();
    data.shuffle(rng);
    Tensor::from_vec(shape, data).expect("positive extents")
}

/// `Σ y ⊙ w` with fixed pseudo-random `w`, so every output coordinate gets a
/// distinct weight in the checked scalar.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Cases for one argument slot of an op: `build(inputs, slot_var)` is called
/// with every argument bound as a constant except `slot`, which is `x`.
fn slots(
    inputs: Vec<Tensor<f64>>,
    seed: u64,
    diff: &[usize],
    apply: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError> + Clone + 'static,
) -> Vec<Case> {
    diff.iter()
        .map(|&slot| {
            let inputs = inputs.clone();
            let apply = apply.clone();
            let x = inputs[slot].clone();
            let f: LossFn = Box::new(move |g, xv| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == slot { xv } else { g.constant(t.clone()) })
                    .collect();
                let y = apply(g, &vars)?;
                project(g, y, seed)
            });
            Case { x, f }
        })
        .collect()
}

fn conv_config(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize, usize, usize) {
    loop {
        let (b, c, k) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (h, w) = (rng.gen_range(3..=6), rng.gen_range(3..=6));
        let (kern, stride, pad) = (rng.gen_range(1..=3), rng.gen_range(1..=2), rng.gen_range(0..=1));
        if conv_out_extent(h, kern, stride, pad).is_some() && conv_out_extent(w, kern, stride, pad).is_some() {
            return (b, c, k, h, w, kern, stride * 10 + pad);
        }
    }
}

type CaseBuilder = fn(&mut ChaCha8Rng, u64) -> Vec<Case>;

fn primitive_cases() -> Vec<(&'static str, CaseBuilder)> {
    vec![
        ("add", |r, s| {
            let sh = [2, 3];
            slots(vec![uniform(r, &sh, -1.0, 1.0), uniform(r, &sh, -1.0, 1.0)], s, &[0, 1], |g, v| g.add(v[0], v[1]))
        }),
        ("sub", |r, s| {
            let sh = [3, 2];
            slots(vec![uniform(r, &sh, -1.0, 1.0), uniform(r, &sh, -1.0, 1.0)], s, &[0, 1], |g, v| g.sub(v[0], v[1]))
        }),
        ("mul", |r, s| {
            let sh = [2, 2, 2];
            slots(vec![uniform(r, &sh, -1.0, 1.0), uniform(r, &sh, -1.0, 1.0)], s, &[0, 1], |g, v| g.mul(v[0], v[1]))
        }),
        ("scale", |r, s| {
            let c = r.gen_range(-2.0..2.0);
            slots(vec![uniform(r, &[5], -1.0, 1.0)], s, &[0], move |g, v| Ok(g.scale(v[0], c)))
        }),
        ("relu", |r, s| slots(vec![off_kink(r, &[2, 4], 0.05)], s, &[0], |g, v| Ok(g.relu(v[0])))),
        ("leaky_relu", |r, s| {
            slots(vec![off_kink(r, &[2, 4], 0.05)], s, &[0], |g, v| Ok(g.leaky_relu(v[0], 0.2)))
        }),
        ("sigmoid", |r, s| slots(vec![uniform(r, &[6], -3.0, 3.0)], s, &[0], |g, v| Ok(g.sigmoid(v[0])))),
        ("tanh", |r, s| slots(vec![uniform(r, &[6], -2.0, 2.0)], s, &[0], |g, v| Ok(g.tanh(v[0])))),
        ("linear", |r, s| {
            let (b, f, o) = (r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=3));
            let ins = vec![uniform(r, &[b, f], -1.0, 1.0), uniform(r, &[f, o], -1.0, 1.0), uniform(r, &[o], -1.0, 1.0)];
            slots(ins, s, &[0, 1, 2], |g, v| g.linear(v[0], v[1], v[2]))
        }),
        ("conv2d", |r, s| {
            let (b, c, k, h, w, kern, sp) = conv_config(r);
            let (stride, pad) = (sp / 10, sp % 10);
            let ins = vec![
                uniform(r, &[b, c, h, w], -1.0, 1.0),
                uniform(r, &[k, c, kern, kern], -1.0, 1.0),
                uniform(r, &[k], -1.0, 1.0),
            ];
            slots(ins, s, &[0, 1, 2], move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad))
        }),
        ("conv_transpose2d", |r, s| {
            let (b, c, k, h, w, kern, sp) = conv_config(r);
            let (stride, pad) = (sp / 10, sp % 10);
            let (h, w) = (h.min(4), w.min(4));
            // padding may not consume the whole output
            let pad = if (h - 1) * stride + kern <= 2 * pad || (w - 1) * stride + kern <= 2 * pad { 0 } else { pad };
            let ins = vec![
                uniform(r, &[b, c, h, w], -1.0, 1.0),
                uniform(r, &[c, k, kern, kern], -1.0, 1.0),
                uniform(r, &[k], -1.0, 1.0),
            ];
            slots(ins, s, &[0, 1, 2], move |g, v| g.conv_transpose2d(v[0], v[1], v[2], stride, pad))
        }),
        ("maxpool2d", |r, s| {
            let (window, stride) = (r.gen_range(1..=3), r.gen_range(1..=2));
            let (h, w) = (r.gen_range(window..=6), r.gen_range(window..=6));
            slots(vec![distinct(r, &[2, 2, h, w])], s, &[0], move |g, v| g.maxpool2d(v[0], window, stride))
        }),
        ("concat_channels", |r, s| {
            let ins = vec![uniform(r, &[2, 1, 3, 3], -1.0, 1.0), uniform(r, &[2, 3, 3, 3], -1.0, 1.0)];
            slots(ins, s, &[0, 1], |g, v| g.concat_channels(v))
        }),
        ("concat_batch", |r, s| {
            let ins = vec![uniform(r, &[1, 2, 2, 2], -1.0, 1.0), uniform(r, &[3, 2, 2, 2], -1.0, 1.0)];
            slots(ins, s, &[0, 1], |g, v| g.concat_batch(v))
        }),
        ("select_batch", |r, s| {
            slots(vec![uniform(r, &[3, 2, 2], -1.0, 1.0)], s, &[0], |g, v| g.select_batch(v[0], &[2, 0, 2]))
        }),
        ("reshape", |r, s| slots(vec![uniform(r, &[2, 6], -1.0, 1.0)], s, &[0], |g, v| g.reshape(v[0], &[3, 2, 2]))),
        ("global_avg_pool", |r, s| {
            slots(vec![uniform(r, &[2, 3, 3, 2], -1.0, 1.0)], s, &[0], |g, v| g.global_avg_pool(v[0]))
        }),
        ("sum", |r, s| slots(vec![uniform(r, &[7], -1.0, 1.0)], s, &[0], |g, v| Ok(g.sum(v[0])))),
        ("mean", |r, s| slots(vec![uniform(r, &[7], -1.0, 1.0)], s, &[0], |g, v| Ok(g.mean(v[0])))),
        ("log_clamped", |r, s| {
            slots(vec![uniform(r, &[6], 0.1, 2.0)], s, &[0], |g, v| Ok(g.log_clamped(v[0], 1e-7)))
        }),
        ("softmax_cross_entropy", |r, s| {
            let (b, c) = (r.gen_range(1..=4), r.gen_range(2..=5));
            let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..c)).collect();
            slots(vec![uniform(r, &[b, c], -3.0, 3.0)], s, &[0], move |g, v| g.softmax_cross_entropy(v[0], &labels))
        }),
        ("mse", |r, s| {
            let ins = vec![uniform(r, &[2, 5], -1.0, 1.0), uniform(r, &[2, 5], -1.0, 1.0)];
            slots(ins, s, &[0, 1], |g, v| g.mse(v[0], v[1]))
        }),
    ]
}

fn run_cases(op: &str, cases: impl IntoIterator<Item = Case>) -> Result<OpCheck, TensorError> {
    let mut check = OpCheck {
        op: op.to_string(),
        max_rel_error: 0.0,
        cases: 0,
        passed: true,
    };
    for case in cases {
        let r = finite_diff_gradcheck(&case.f, &case.x, GRADCHECK_EPS, GRADCHECK_TOL)?;
        check.max_rel_error = check.max_rel_error.max(r.max_rel_error);
        check.passed &= r.passed();
        check.cases += 1;
    }
    Ok(check)
}

/// Finite-difference check of every differentiable primitive over `seeds`
/// random instances each, in double precision.
pub fn primitive_gradchecks(seeds: usize) -> Result<Vec<OpCheck>, TensorError> {
    primitive_cases()
        .into_iter()
        .enumerate()
        .map(|(i, (op, build))| {
            let cases = (0..seeds as u64).flat_map(|s| {
                let seed = mix_seed(i as u64, s);
                build(&mut ChaCha8Rng::seed_from_u64(seed), seed)
            });
            run_cases(op, cases)
        })
        .collect()
}

/// Largest `|⟨conv2d(x,k), y⟩ − ⟨x, conv_transpose2d(y,k)⟩| / max(1, |⟨·,·⟩|)`
/// over `configs` random configurations with matching geometry.
pub fn adjoint_max_error(configs: usize, seed: u64) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < configs {
        let (b, c, k, h, w, kern, sp) = conv_config(&mut rng);
        let (stride, pad) = (sp / 10, sp % 10);
        // the transposed output reproduces the input extent only when the stride divides evenly
        if (h + 2 * pad - kern) % stride != 0 || (w + 2 * pad - kern) % stride != 0 {
            continue;
        }
        let x = uniform(&mut rng, &[b, c, h, w], -1.0, 1.0);
        let kernels = uniform(&mut rng, &[k, c, kern, kern], -1.0, 1.0);
        let mut g = Graph::<f64>::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(kernels));
        let zk = g.constant(Tensor::zeros(&[k]));
        let zc = g.constant(Tensor::zeros(&[c]));
        let cx = g.conv2d(xv, kv, zk, stride, pad)?;
        let y = uniform(&mut rng, g.shape(cx), -1.0, 1.0);
        let yv = g.constant(y.clone());
        let ty = g.conv_transpose2d(yv, kv, zc, stride, pad)?;
        let lhs = g.value(cx).dot(&y)?;
        let rhs = x.dot(g.value(ty))?;
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
        done += 1;
    }
    Ok(worst)
}

/// A small network and batch on which the composed objective is cheap to
/// differentiate numerically. Every bias is moved off zero so no activation
/// sits exactly on a ReLU kink.
fn tiny_problem(seed: u64) -> Result<(TcnlNetwork<f64>, Batch<f64>), NetError> {
    let spec = NetworkSpec {
        input_size: 16,
        classes: 3,
        concepts: vec!["a".into(), "b".into()],
        shallow_channels: vec![3, 4],
        extractor_channels: vec![3, 4],
        mapper_channels: vec![3],
        classifier_hidden: 5,
        discriminator_channels: vec![2, 2, 2],
        instance_size: 16,
        ..NetworkSpec::default()
    };
    let mut net = TcnlNetwork::<f64>::build_with(&spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1));
    for e in &mut net.params.entries {
        if e.name.ends_with("bias") {
            let lo = if e.name.starts_with("discriminator") { -0.3 } else { 0.05 };
            e.value.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(lo..0.3));
        }
    }
    let b = 3;
    let images = uniform(&mut rng, &[b, 3, 16, 16], 0.0, 1.0);
    let instances = (0..2).map(|_| uniform(&mut rng, &[b, 3, 16, 16], 0.0, 1.0)).collect();
    let batch = Batch {
        images,
        labels: vec![0, 2, 1],
        instances,
        // concept b is absent from row 1
        present: vec![vec![0, 1, 2], vec![0, 2]],
    };
    Ok((net, batch))
}

/// Weights used for the composed check; all three terms active.
const CHECK_WEIGHTS: LossWeights = LossWeights {
    lambda: 0.5,
    mu: 2.0,
    eta: 1.0,
};

fn composed_case(net: &TcnlNetwork<f64>, batch: &Batch<f64>, j: usize, route: ConceptRoute) -> Case {
    let (net, batch) = (net.clone(), batch.clone());
    let x = net.params.entries[j].value.clone();
    let f: LossFn = Box::new(move |g, xv| {
        let mut params = net.bind_where(g, |_| false);
        params[j] = xv;
        let images = g.constant(batch.images.clone());
        let t = net.trace_graph(g, &params, images, route).map_err(net_to_tensor)?;
        let loss = model_loss(&net, g, &params, &t.visualized, t.logits, &batch, &CHECK_WEIGHTS).map_err(net_to_tensor)?;
        Ok(loss.total)
    });
    Case { x, f }
}

fn net_to_tensor(e: NetError) -> TensorError {
    match e {
        NetError::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "network",
            msg: other.to_string(),
        },
    }
}

/// Finite-difference check of `λ·gan + μ·similarity + η·cross-entropy` with
/// respect to every parameter tensor, one report per parameter group.
///
/// The training route gives the shallow extractor only the classification
/// term on purpose, so shallow parameters are compared under the fully
/// shared route and every other group under the training route.
pub fn composed_loss_gradchecks(seeds: usize) -> Result<Vec<OpCheck>, TensorError> {
    let mut out: Vec<OpCheck> = Vec::new();
    for s in 0..seeds as u64 {
        let (net, batch) = tiny_problem(s).map_err(net_to_tensor)?;
        for (j, e) in net.params.entries.iter().enumerate() {
            let group = match e.group {
                ParamGroup::Extractor(_) => "extractor".to_string(),
                ParamGroup::Mapper(_) => "mapper".to_string(),
                g => g.to_string(),
            };
            // the training route detaches the shallow extractor from the concept
            // terms, so its parameters are compared under the shared route
            let (label, route) = if e.group == ParamGroup::Shallow {
                ("shared", ConceptRoute::Shared)
            } else {
                ("training", ConceptRoute::DetachShallow)
            };
            let name = format!("tcnl_loss/{label}/{group}");
            let r = run_cases(&name, [composed_case(&net, &batch, j, route)])?;
            match out.iter_mut().find(|c| c.op == name) {
                Some(c) => {
                    c.max_rel_error = c.max_rel_error.max(r.max_rel_error);
                    c.passed &= r.passed;
                    c.cases += 1;
                }
                None => out.push(r),
            }
        }
    }
    Ok(out)
}

fn unchanged(before: &TcnlNetwork<f64>, after: &TcnlNetwork<f64>, groups: impl Fn(ParamGroup) -> bool) -> Vec<String> {
    before
        .params
        .entries
        .iter()
        .zip(&after.params.entries)
        .filter(|(b, a)| groups(b.group) && b.value != a.value)
        .map(|(b, _)| b.name.clone())
        .collect()
}

fn changed(before: &TcnlNetwork<f64>, after: &TcnlNetwork<f64>, groups: impl Fn(ParamGroup) -> bool) -> bool {
    before
        .params
        .entries
        .iter()
        .zip(&after.params.entries)
        .any(|(b, a)| groups(b.group) && b.value != a.value)
}

fn routing_case(
    name: &str,
    weights: LossWeights,
    frozen: impl Fn(ParamGroup) -> bool,
    moving: impl Fn(ParamGroup) -> bool,
) -> Result<InvariantCheck, TrainError> {
    let data = DatasetConfig {
        image_size: 32,
        n_train: 8,
        n_test: 4,
        ..DatasetConfig::default()
    };
    let ds = generate_dataset(5, &data).map_err(|e| TrainError::Config(e.to_string()))?;
    let spec = NetworkSpec {
        input_size: 32,
        instance_size: 32,
        ..NetworkSpec::default()
    };
    let mut net = TcnlNetwork::<f64>::build_with(&spec, 9)?;
    let before = net.clone();
    let config = TrainConfig {
        weights,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&config, net.params.len());
    let batch = Batch::from_samples(&ds.train.iter().collect::<Vec<_>>())?;
    train_step(&mut net, &batch, &config, &mut state)?;
    let moved = unchanged(&before, &net, frozen);
    let progressed = changed(&before, &net, moving);
    let detail = if !moved.is_empty() {
        format!("changed: {}", moved.join(", "))
    } else if !progressed {
        "the active term updated nothing".to_string()
    } else {
        "frozen groups bitwise unchanged".to_string()
    };
    Ok(InvariantCheck {
        name: name.to_string(),
        passed: moved.is_empty() && progressed,
        detail,
    })
}

/// One training step with a single loss term active, checking which
/// parameter groups may move.
pub fn routing_checks() -> Result<Vec<InvariantCheck>, TrainError> {
    let only = |lambda, mu, eta| LossWeights { lambda, mu, eta };
    let is = |want: &'static [&'static str]| {
        move |g: ParamGroup| {
            let kind = match g {
                ParamGroup::Shallow => "shallow",
                ParamGroup::Extractor(_) => "extractor",
                ParamGroup::Mapper(_) => "mapper",
                ParamGroup::Classifier => "classifier",
                ParamGroup::Discriminator => "discriminator",
            };
            want.contains(&kind)
        }
    };
    let mut out = vec![
        routing_case(
            "similarity term leaves shallow extractor and classifier untouched",
            only(0.0, 1.0, 0.0),
            is(&["shallow", "classifier"]),
            is(&["extractor", "mapper"]),
        )?,
        routing_case(
            "classification term leaves mappers and discriminator untouched",
            only(0.0, 0.0, 1.0),
            is(&["mapper", "discriminator"]),
            is(&["shallow", "extractor", "classifier"]),
        )?,
        routing_case(
            "generator term leaves shallow extractor and classifier untouched",
            only(1.0, 0.0, 0.0),
            is(&["shallow", "classifier"]),
            is(&["extractor", "mapper"]),
        )?,
    ];
    out.push(discriminator_step_isolation()?);
    Ok(out)
}

/// The discriminator loss must not reach any model parameter.
fn discriminator_step_isolation() -> Result<InvariantCheck, TrainError> {
    let (net, batch) = tiny_problem(3)?;
    let mut g = Graph::new();
    let params = net.bind(&mut g);
    let images = g.constant(batch.images.clone());
    let t = net.trace_graph(&mut g, &params, images, ConceptRoute::DetachShallow)?;
    let (d, _) = crate::train::gan_losses(&net, &mut g, &params, &t.visualized, &batch)?.expect("pairs exist");
    g.backward(d)?;
    let leaked: Vec<String> = params
        .iter()
        .zip(&net.params.entries)
        .filter(|(&v, e)| e.group.is_model() && g.grad(v).is_some_and(|gr| gr.iter().any(|&x| x != 0.0)))
        .map(|(_, e)| e.name.clone())
        .collect();
    Ok(InvariantCheck {
        name: "discriminator loss has zero gradient on model parameters".into(),
        passed: leaked.is_empty(),
        detail: if leaked.is_empty() {
            "no model gradient".into()
        } else {
            format!("gradient reached: {}", leaked.join(", "))
        },
    })
}

/// Everything the suite checks, in one serialisable record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub primitives: Vec<OpCheck>,
    pub composed: Vec<OpCheck>,
    pub adjoint_max_error: f64,
    pub adjoint_configs: usize,
    pub routing: Vec<InvariantCheck>,
}

impl VerifyReport {
    pub fn adjoint_passed(&self) -> bool {
        self.adjoint_max_error <= ADJOINT_TOL
    }

    /// Names of failed op and objective checks.
    pub fn failing_ops(&self) -> Vec<&str> {
        self.primitives
            .iter()
            .chain(&self.composed)
            .filter(|c| !c.passed)
            .map(|c| c.op.as_str())
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failing_ops().is_empty() && self.adjoint_passed() && self.routing.iter().all(|c| c.passed)
    }
}

/// Run the whole suite: `seeds` instances per primitive, `composed_seeds`
/// small networks for the objective, and `adjoint_configs` conv geometries.
pub fn run_suite(seeds: usize, composed_seeds: usize, adjoint_configs: usize) -> Result<VerifyReport, TrainError> {
    Ok(VerifyReport {
        primitives: primitive_gradchecks(seeds)?,
        composed: composed_loss_gradchecks(composed_seeds)?,
        adjoint_max_error: adjoint_max_error(adjoint_configs, 0)?,
        adjoint_configs,
        routing: routing_checks()?,
    })
}
