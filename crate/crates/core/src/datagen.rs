//! Synthetic source tasks and label-preserving covariate shifts.
//!
//! A task is a mixture of isotropic Gaussian clusters, one per class. Test
//! streams draw fresh samples from the same mixture and push them through a
//! [`ShiftSpec`]. Labels travel alongside the shifted features inside
//! [`HiddenLabels`], which adaptation code never receives.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{Mode, Model, ParamFilter};
use crate::tensor::{matmul, transpose, Tensor};
use crate::tta::AdamState;

const MEAN_RANGE: f64 = 3.0;
const MAX_MEAN_ATTEMPTS: usize = 10_000;

// Independent ChaCha streams for each consumer of a seed.
const STREAM_MEANS: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_VAL: u64 = 2;
const STREAM_TEST_SAMPLES: u64 = 3;
const STREAM_TEST_SHIFT: u64 = 4;
const STREAM_ROTATION_PLANE: u64 = 5;

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The default is deliberately low-dimensional and tight: the reference shift
/// then costs a meaningful share of accuracy while the clean task stays easy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    pub within_class_sigma: f64,
    pub n_train: usize,
    pub n_val: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            classes: 10,
            dim: 5,
            within_class_sigma: 0.5,
            n_train: 5000,
            n_val: 1000,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::param("classes", "need at least two classes"));
        }
        if self.dim < 2 {
            return Err(Error::param("dim", "need at least two feature dimensions"));
        }
        if !(self.within_class_sigma > 0.0) || !self.within_class_sigma.is_finite() {
            return Err(Error::param(
                "within_class_sigma",
                "must be positive and finite",
            ));
        }
        Ok(())
    }
}

/// Labeled samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// A task spec with its realized cluster means.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    spec: TaskSpec,
    means: Tensor,
}

impl Task {
    /// Draws cluster means uniformly in `[−3, 3]^d`, redrawing until every pair of
    /// means is farther apart than `2σ`.
    pub fn new(spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded(spec.seed, STREAM_MEANS);
        let (c, d) = (spec.classes, spec.dim);
        let min_dist = 2.0 * spec.within_class_sigma;
        for _ in 0..MAX_MEAN_ATTEMPTS {
            let data: Vec<f64> = (0..c * d)
                .map(|_| rng.random_range(-MEAN_RANGE..=MEAN_RANGE))
                .collect();
            let means = Tensor::new(vec![c, d], data)?;
            if min_pairwise_distance(&means) > min_dist {
                return Ok(Self { spec, means });
            }
        }
        Err(Error::param(
            "within_class_sigma",
            format!(
                "no separable cluster layout found for sigma {}",
                spec.within_class_sigma
            ),
        ))
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn means(&self) -> &Tensor {
        &self.means
    }

    /// `n` labeled samples: label uniform over classes, `x = mean_label + σ·N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Dataset {
        let (c, d) = (self.spec.classes, self.spec.dim);
        let sigma = self.spec.within_class_sigma;
        let mut y = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let label = rng.random_range(0..c);
            y.push(label);
            for &m in self.means.row(label) {
                let z: f64 = rng.sample(StandardNormal);
                data.push(m + sigma * z);
            }
        }
        Dataset {
            x: Tensor::new(vec![n, d], data).expect("n × d samples"),
            y,
        }
    }

    /// The source training and validation splits.
    pub fn source_splits(&self) -> (Dataset, Dataset) {
        let train = self.sample(self.spec.n_train, &mut seeded(self.spec.seed, STREAM_TRAIN));
        let val = self.sample(self.spec.n_val, &mut seeded(self.spec.seed, STREAM_VAL));
        (train, val)
    }
}

fn min_pairwise_distance(means: &Tensor) -> f64 {
    let c = means.rows();
    let mut best = f64::INFINITY;
    for i in 0..c {
        for j in i + 1..c {
            let d2: f64 = means
                .row(i)
                .iter()
                .zip(means.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.min(libm::sqrt(d2));
        }
    }
    best
}

/// Source train and validation sets for a spec.
pub fn make_task(spec: &TaskSpec) -> Result<(Dataset, Dataset)> {
    Ok(Task::new(spec.clone())?.source_splits())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShiftSpec {
    /// Givens rotation by `angle` radians in a 2-plane drawn from `plane_seed`.
    Rotation {
        angle: f64,
        plane_seed: u64,
    },
    AdditiveNoise {
        sigma: f64,
    },
    FeatureScale {
        factors: Vec<f64>,
    },
    /// Applied left to right.
    Compose {
        shifts: Vec<ShiftSpec>,
    },
}

impl ShiftSpec {
    /// Rotation by 0.6 rad followed by additive noise with σ = 1.
    pub fn reference() -> Self {
        ShiftSpec::Compose {
            shifts: vec![
                ShiftSpec::Rotation {
                    angle: 0.6,
                    plane_seed: 1,
                },
                ShiftSpec::AdditiveNoise { sigma: 1.0 },
            ],
        }
    }

    pub fn identity() -> Self {
        ShiftSpec::Compose { shifts: Vec::new() }
    }

    /// Short human-readable id, e.g. `rot(0.6)+noise(1)`.
    pub fn label(&self) -> String {
        match self {
            ShiftSpec::Rotation { angle, .. } => format!("rot({angle})"),
            ShiftSpec::AdditiveNoise { sigma } => format!("noise({sigma})"),
            ShiftSpec::FeatureScale { factors } => format!("scale(d={})", factors.len()),
            ShiftSpec::Compose { shifts } if shifts.is_empty() => String::from("none"),
            ShiftSpec::Compose { shifts } => {
                let parts: Vec<String> = shifts.iter().map(ShiftSpec::label).collect();
                parts.join("+")
            }
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            ShiftSpec::Rotation { angle, .. } => {
                if !angle.is_finite() {
                    return Err(Error::param("angle", "must be finite"));
                }
                if dim < 2 {
                    return Err(Error::param("dim", "rotation needs two dimensions"));
                }
            }
            ShiftSpec::AdditiveNoise { sigma } => {
                if !(*sigma >= 0.0) || !sigma.is_finite() {
                    return Err(Error::param("sigma", "must be non-negative and finite"));
                }
            }
            ShiftSpec::FeatureScale { factors } => {
                if factors.len() != dim {
                    return Err(Error::dims("feature_scale", &[factors.len()], &[dim]));
                }
            }
            ShiftSpec::Compose { shifts } => {
                for s in shifts {
                    s.validate(dim)?;
                }
            }
        }
        Ok(())
    }
}

/// Rotation by `angle` in the plane spanned by two orthonormalized Gaussian
/// directions drawn from `plane_seed`.
pub fn rotation_matrix(dim: usize, angle: f64, plane_seed: u64) -> Result<Tensor> {
    if dim < 2 {
        return Err(Error::param("dim", "rotation needs two dimensions"));
    }
    let mut rng = seeded(plane_seed, STREAM_ROTATION_PLANE);
    let mut draw = || -> Vec<f64> { (0..dim).map(|_| rng.sample(StandardNormal)).collect() };
    let norm = |v: &[f64]| libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());

    let mut u = draw();
    let nu = norm(&u);
    u.iter_mut().for_each(|x| *x /= nu);
    let mut v = loop {
        let mut v = draw();
        let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(&u).for_each(|(x, ui)| *x -= dot * ui);
        if norm(&v) > 1e-6 {
            break v;
        }
    };
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);

    let (c, s) = (libm::cos(angle), libm::sin(angle));
    let mut r = Tensor::identity(dim);
    let rd = r.data_mut();
    for i in 0..dim {
        for j in 0..dim {
            rd[i * dim + j] +=
                (c - 1.0) * (u[i] * u[j] + v[i] * v[j]) + s * (v[i] * u[j] - u[i] * v[j]);
        }
    }
    Ok(r)
}

/// Applies a shift to the rows of `x`. Noise draws come from `rng`.
pub fn apply_shift<R: Rng + ?Sized>(x: &Tensor, spec: &ShiftSpec, rng: &mut R) -> Result<Tensor> {
    let (_, d) = x.dims2("apply_shift")?;
    spec.validate(d)?;
    match spec {
        ShiftSpec::Rotation { angle, plane_seed } => {
            let r = rotation_matrix(d, *angle, *plane_seed)?;
            // rows are samples: x′ = x Rᵀ
            matmul(x, &transpose(&r)?)
        }
        ShiftSpec::AdditiveNoise { sigma } => {
            let mut out = x.clone();
            if *sigma > 0.0 {
                for v in out.data_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += sigma * z;
                }
            }
            Ok(out)
        }
        ShiftSpec::FeatureScale { factors } => {
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(d) {
                row.iter_mut().zip(factors).for_each(|(v, f)| *v *= f);
            }
            Ok(out)
        }
        ShiftSpec::Compose { shifts } => {
            let mut out = x.clone();
            for s in shifts {
                out = apply_shift(&out, s, rng)?;
            }
            Ok(out)
        }
    }
}

/// Ground-truth labels of a test batch. Only scoring and export read them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HiddenLabels(Vec<usize>);

impl HiddenLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn reveal(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub labels: HiddenLabels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub batches: Vec<Batch>,
    pub batch_size: usize,
    pub shift: ShiftSpec,
}

impl Stream {
    pub fn total_samples(&self) -> usize {
        self.batches.iter().map(|b| b.labels.len()).sum()
    }
}

/// Fresh shifted samples from `task`, batched in arrival order.
pub fn make_stream(
    task: &Task,
    shift: &ShiftSpec,
    n_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Stream> {
    if batch_size == 0 {
        return Err(Error::param("batch_size", "must be at least 1"));
    }
    shift.validate(task.spec.dim)?;
    let mut sample_rng = seeded(seed, STREAM_TEST_SAMPLES);
    let mut shift_rng = seeded(seed, STREAM_TEST_SHIFT);
    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let raw = task.sample(batch_size, &mut sample_rng);
        batches.push(Batch {
            features: apply_shift(&raw.x, shift, &mut shift_rng)?,
            labels: HiddenLabels(raw.y),
        });
    }
    Ok(Stream {
        batches,
        batch_size,
        shift: shift.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 3e-3,
            batch_size: 64,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub initial_loss: f64,
    /// Full-train-set loss (Eval mode) after each epoch.
    pub epoch_losses: Vec<f64>,
    pub val_accuracy: f64,
}

/// Mean cross-entropy of `data` under the model in Eval mode.
pub fn dataset_loss(model: &mut Model, data: &Dataset) -> Result<f64> {
    let prev = model.mode();
    model.set_mode(Mode::Eval);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &ParamFilter::Custom(|_| false));
    let x = tape.constant(data.x.clone());
    let mut unused = seeded(0, 0);
    let result = model
        .forward_features(&mut tape, &bound, x, &mut unused)
        .and_then(|h| model.forward_logits(&mut tape, &bound, h))
        .and_then(|z| tape.softmax_cross_entropy(z, &data.y))
        .and_then(|l| Ok(tape.value(l)?.data()[0]));
    model.set_mode(prev);
    result
}

/// Supervised training of all parameters with Adam. Leaves the model in Eval mode.
pub fn train_source(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainSummary> {
    let arch = model.architecture();
    let (_, d) = train.x.dims2("train_source")?;
    if d != arch.input_dim {
        return Err(Error::dims("train_source", &[d], &[arch.input_dim]));
    }
    if let Some(&bad) = train.y.iter().find(|&&y| y >= arch.classes) {
        return Err(Error::param(
            "labels",
            format!("label {bad} exceeds model classes"),
        ));
    }
    if cfg.batch_size == 0 {
        return Err(Error::param("batch_size", "must be at least 1"));
    }
    let initial_loss = dataset_loss(model, train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamState::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let filter = ParamFilter::All;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        model.set_mode(Mode::Train);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = train.x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| train.y[i]).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, &filter);
            let x = tape.constant(xb);
            let h = model.forward_features(&mut tape, &bound, x, &mut rng)?;
            let z = model.forward_logits(&mut tape, &bound, h)?;
            let loss = tape.softmax_cross_entropy(z, &yb)?;
            if !tape.value(loss)?.data()[0].is_finite() {
                model.set_mode(Mode::Eval);
                return Err(Error::TrainingDivergence { epoch });
            }
            tape.backward(loss)?;
            let mut grads = Vec::with_capacity(bound.vars().len());
            for &v in bound.vars() {
                grads.push(
                    tape.grad(v)?.cloned().unwrap_or_else(|| {
                        Tensor::zeros(tape.value(v).expect("bound var").shape())
                    }),
                );
            }
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            opt.step(&mut model.params_mut(), &grad_refs, cfg.lr)?;
        }
        model.set_mode(Mode::Eval);
        let loss = dataset_loss(model, train)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDivergence { epoch });
        }
        epoch_losses.push(loss);
    }
    model.set_mode(Mode::Eval);
    let preds = model.predict(&val.x)?;
    let val_accuracy = crate::metrics::accuracy(&preds, &val.y)?;
    Ok(TrainSummary {
        initial_loss,
        epoch_losses,
        val_accuracy,
    })
}
