//! Test-time adaptation strategies behind one driver.
//!
//! [`Adapter`] owns the model being adapted, its optimizer state and RNG, and
//! the source snapshot it resets to. Each call to [`Adapter::adapt_batch`]
//! sees unlabeled features only.
//!
//! | strategy | objective                                          | predictions from            |
//! |----------|----------------------------------------------------|-----------------------------|
//! | Direct   | none                                               | the forward pass            |
//! | Tent     | mean entropy of `p`                                | the same forward pass       |
//! | EATA     | reliability-weighted entropy + anti-forgetting     | the same forward pass       |
//! | OIL      | `β·KL(q ‖ p_student)` against an EMA teacher `q`    | the teacher after its EMA   |
//! | PCL      | `KL(p′ ‖ p)` between perturbed and clean features  | the clean branch `p`        |

mod adam;
mod config;

use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::AdamState;
pub use config::{
    default_e0, AdaptConfig, EataConfig, OilConfig, ParamSelection, PclConfig, ResetMode, Strategy,
    TentConfig, LR_SWEEP,
};

use crate::autodiff::{dropout_mask, gaussian_noise, Tape, Var};
use crate::datagen::Stream;
use crate::error::{Error, Result};
use crate::metrics::{self, mean_entropy, RunReport};
use crate::model::{Bound, CallCounters, Mode, Model, ParamFilter, Snapshot};
use crate::tensor::Tensor;

/// Monotonic time source in seconds.
pub trait Clock {
    fn now(&self) -> f64;
}

/// A clock that never advances. Runs timed with it report no throughput.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchOutcome {
    pub predictions: Vec<usize>,
    /// Argmax of the first forward pass, before any update on this batch.
    pub pre_adapt_predictions: Vec<usize>,
    pub loss_trace: Vec<f64>,
    pub mean_entropy_before: f64,
    pub mean_entropy_after: f64,
    /// Samples that contributed to the update.
    pub included: usize,
    pub wall_time: f64,
}

impl BatchOutcome {
    pub fn updated(&self) -> bool {
        !self.loss_trace.is_empty()
    }
}

/// Mean entropy over the batch.
pub fn tent_loss(tape: &mut Tape, p: Var) -> Result<Var> {
    let h = tape.entropy(p)?;
    tape.mean(h)
}

/// A frozen draw of the feature perturbation `h′ = Dropout(h) + ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub mask: Option<Tensor>,
    pub noise: Option<Tensor>,
}

impl Perturbation {
    /// Draws the dropout mask first, then the standard-normal noise.
    pub fn sample<R: Rng + ?Sized>(shape: &[usize], cfg: &PclConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mask = if cfg.use_dropout {
            dropout_mask(shape, cfg.perturb_dropout_rate, rng, true)?
        } else {
            None
        };
        let noise = cfg.use_noise.then(|| gaussian_noise(shape, rng));
        Ok(Self { mask, noise })
    }

    pub fn apply(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let mut out = h;
        if let Some(mask) = &self.mask {
            out = tape.apply_mask(out, mask.clone())?;
        }
        if let Some(noise) = &self.noise {
            let eps = tape.constant(noise.clone());
            out = tape.add(out, eps)?;
        }
        Ok(out)
    }
}

/// Perturbs a feature matrix outside any tape.
pub fn pcl_perturb<R: Rng + ?Sized>(h: &Tensor, cfg: &PclConfig, rng: &mut R) -> Result<Tensor> {
    let pert = Perturbation::sample(h.shape(), cfg, rng)?;
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let out = pert.apply(&mut tape, hv)?;
    Ok(tape.value(out)?.clone())
}

/// Nodes of one PCL forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PclForward {
    pub features: Var,
    pub p: Var,
    pub p_prime: Var,
    pub loss: Var,
}

/// One encoder pass, two classifier passes, and the mean `KL(p′ ‖ p)`.
pub fn pcl_forward<R: Rng + ?Sized>(
    model: &mut Model,
    tape: &mut Tape,
    bound: &Bound,
    x: Var,
    perturbation: &Perturbation,
    detach_original: bool,
    rng: &mut R,
) -> Result<PclForward> {
    let h = model.forward_features(tape, bound, x, rng)?;
    let z = model.forward_logits(tape, bound, h)?;
    let p = tape.softmax(z)?;
    let h_prime = perturbation.apply(tape, h)?;
    let z_prime = model.forward_logits(tape, bound, h_prime)?;
    let p_prime = tape.softmax(z_prime)?;
    let kl = tape.kl_div_with(p_prime, p, detach_original)?;
    let loss = tape.mean(kl)?;
    Ok(PclForward {
        features: h,
        p,
        p_prime,
        loss,
    })
}

/// Per-sample weights of the reliability filter.
///
/// Samples with entropy `>= e0` get weight 0. The rest get `exp(e0 − H)`
/// divided by the number of included samples. An infinite `e0` keeps every
/// sample with weight `1/n`.
pub fn eata_weights(entropies: &[f64], e0: f64) -> Vec<f64> {
    if e0 == f64::INFINITY {
        let n = entropies.len() as f64;
        return vec![1.0 / n; entropies.len()];
    }
    let included = entropies.iter().filter(|&&h| h < e0).count();
    entropies
        .iter()
        .map(|&h| {
            if h < e0 {
                libm::exp(e0 - h) / included as f64
            } else {
                0.0
            }
        })
        .collect()
}

fn mode_for(train: bool) -> Mode {
    if train {
        Mode::Train
    } else {
        Mode::Eval
    }
}

fn forward_probs<R: Rng + ?Sized>(
    model: &mut Model,
    tape: &mut Tape,
    bound: &Bound,
    x: Var,
    rng: &mut R,
) -> Result<Var> {
    let h = model.forward_features(tape, bound, x, rng)?;
    let z = model.forward_logits(tape, bound, h)?;
    tape.softmax(z)
}

/// Gradients of the trainable parameters of `bound`, zero where none flowed.
fn trainable_grads(tape: &Tape, bound: &Bound) -> Result<Vec<(usize, Tensor)>> {
    bound
        .trainable()
        .map(|(idx, var)| {
            let g = match tape.grad(var)? {
                Some(g) => g.clone(),
                None => Tensor::zeros(tape.value(var)?.shape()),
            };
            Ok((idx, g))
        })
        .collect()
}

fn apply_update(
    model: &mut Model,
    opt: &mut AdamState,
    grads: &[(usize, Tensor)],
    lr: f64,
    batch: usize,
) -> Result<()> {
    if grads.iter().any(|(_, g)| !g.all_finite()) {
        return Err(Error::AdaptationDivergence { batch });
    }
    let mut params = model.params_mut();
    let mut selected: Vec<&mut Tensor> = Vec::with_capacity(grads.len());
    let mut next = grads.iter().map(|(i, _)| *i).peekable();
    for (i, p) in params.drain(..).enumerate() {
        if next.peek() == Some(&i) {
            selected.push(p);
            next.next();
        }
    }
    let refs: Vec<&Tensor> = grads.iter().map(|(_, g)| g).collect();
    opt.step(&mut selected, &refs, lr)
}

fn finite_loss(tape: &Tape, loss: Var, batch: usize) -> Result<f64> {
    let v = tape.value(loss)?.data()[0];
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::AdaptationDivergence { batch })
    }
}

/// Maps numerical failures inside a step onto a divergence error for `batch`.
fn diverged(err: Error, batch: usize) -> Error {
    match err {
        Error::Domain { .. } => Error::AdaptationDivergence { batch },
        other => other,
    }
}

fn converged(trace: &[f64], tol: Option<f64>) -> bool {
    match (tol, trace) {
        (Some(tol), [.., a, b]) => (a - b).abs() < tol,
        _ => false,
    }
}

/// Drives one strategy over batches and streams.
#[derive(Debug, Clone)]
pub struct Adapter {
    cfg: AdaptConfig,
    filter: ParamFilter,
    model: Model,
    source: Snapshot,
    source_model: Model,
    opt: AdamState,
    rng: ChaCha8Rng,
    teacher: Option<Model>,
    importance: Option<Vec<Tensor>>,
    batch_index: usize,
}

impl Adapter {
    /// Captures the model's current parameters as the source snapshot.
    pub fn new(model: Model, cfg: AdaptConfig) -> Result<Self> {
        cfg.validate()?;
        let source = model.snapshot();
        let source_model = Model::from_snapshot(&source)?;
        let teacher = (cfg.strategy == Strategy::Oil).then(|| model.clone());
        let filter = cfg.param_filter.to_filter();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            cfg,
            filter,
            model,
            source,
            source_model,
            opt: AdamState::new(),
            rng,
            teacher,
            importance: None,
            batch_index: 0,
        })
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn teacher(&self) -> Option<&Model> {
        self.teacher.as_ref()
    }

    pub fn source(&self) -> &Snapshot {
        &self.source
    }

    /// EATA's frozen per-parameter importance, once computed.
    pub fn importance(&self) -> Option<&[Tensor]> {
        self.importance.as_deref()
    }

    /// Returns to the source parameters with fresh optimizer, RNG, teacher and importance.
    pub fn reset(&mut self) -> Result<()> {
        self.model.restore(&self.source)?;
        if let Some(teacher) = &mut self.teacher {
            teacher.restore(&self.source)?;
        }
        self.opt.reset();
        self.rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        self.importance = None;
        self.batch_index = 0;
        Ok(())
    }

    /// Predictions of the unadapted source model.
    pub fn direct_predictions(&mut self, x: &Tensor) -> Result<Vec<usize>> {
        self.source_model.predict(x)
    }

    pub fn adapt_batch(&mut self, x: &Tensor) -> Result<BatchOutcome> {
        let batch = self.batch_index;
        let outcome = match self.cfg.strategy {
            Strategy::Direct => self.direct_step(x),
            Strategy::Tent => self.tent_step(x),
            Strategy::Eata => self.eata_step(x),
            Strategy::Oil => self.oil_step(x),
            Strategy::Pcl => self.pcl_step(x),
        }
        .map_err(|e| diverged(e, batch))?;
        self.batch_index += 1;
        Ok(outcome)
    }

    fn direct_step(&mut self, x: &Tensor) -> Result<BatchOutcome> {
        self.model.set_mode(Mode::Eval);
        let p = self.model.probabilities(x, &mut self.rng)?;
        let preds = p.argmax_rows();
        let ent = mean_entropy(&p)?;
        Ok(BatchOutcome {
            predictions: preds.clone(),
            pre_adapt_predictions: preds,
            loss_trace: Vec::new(),
            mean_entropy_before: ent,
            mean_entropy_after: ent,
            included: 0,
            wall_time: 0.0,
        })
    }

    /// Re-forwards after the last update when `refresh_predictions` is set.
    fn finish(&mut self, x: &Tensor, mut final_p: Tensor, mode: Mode) -> Result<Tensor> {
        if self.cfg.refresh_predictions {
            self.model.set_mode(mode);
            final_p = self.model.probabilities(x, &mut self.rng)?;
        }
        self.model.set_mode(Mode::Eval);
        Ok(final_p)
    }

    fn tent_step(&mut self, x: &Tensor) -> Result<BatchOutcome> {
        let batch = self.batch_index;
        let mode = mode_for(self.cfg.tent.train_mode);
        self.model.set_mode(mode);
        let mut trace = Vec::with_capacity(self.cfg.steps_per_batch);
        let mut first_p = None;
        let mut final_p = None;
        for _ in 0..self.cfg.steps_per_batch {
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape, &self.filter);
            let xv = tape.constant(x.clone());
            let p = forward_probs(&mut self.model, &mut tape, &bound, xv, &mut self.rng)?;
            let loss = tent_loss(&mut tape, p)?;
            trace.push(finite_loss(&tape, loss, batch)?);
            let pv = tape.value(p)?.clone();
            first_p.get_or_insert_with(|| pv.clone());
            final_p = Some(pv);
            tape.backward(loss)?;
            let grads = trainable_grads(&tape, &bound)?;
            apply_update(&mut self.model, &mut self.opt, &grads, self.cfg.lr, batch)?;
            if converged(&trace, self.cfg.early_stop_tol) {
                break;
            }
        }
        let first_p = first_p.expect("steps_per_batch >= 1");
        let final_p = self.finish(x, final_p.expect("steps_per_batch >= 1"), mode)?;
        Ok(BatchOutcome {
            predictions: final_p.argmax_rows(),
            pre_adapt_predictions: first_p.argmax_rows(),
            loss_trace: trace,
            mean_entropy_before: mean_entropy(&first_p)?,
            mean_entropy_after: mean_entropy(&final_p)?,
            included: x.rows(),
            wall_time: 0.0,
        })
    }

    fn pcl_step(&mut self, x: &Tensor) -> Result<BatchOutcome> {
        let batch = self.batch_index;
        self.model.set_mode(Mode::Eval);
        let shape = [x.rows(), self.model.architecture().feature_dim()];
        let mut trace = Vec::with_capacity(self.cfg.steps_per_batch);
        let mut first_p = None;
        let mut final_p = None;
        for _ in 0..self.cfg.steps_per_batch {
            let perturbation = Perturbation::sample(&shape, &self.cfg.pcl, &mut self.rng)?;
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape, &self.filter);
            let xv = tape.constant(x.clone());
            let fw = pcl_forward(
                &mut self.model,
                &mut tape,
                &bound,
                xv,
                &perturbation,
                self.cfg.pcl.detach_original,
                &mut self.rng,
            )?;
            trace.push(finite_loss(&tape, fw.loss, batch)?);
            let pv = tape.value(fw.p)?.clone();
            first_p.get_or_insert_with(|| pv.clone());
            final_p = Some(pv);
            tape.backward(fw.loss)?;
            let grads = trainable_grads(&tape, &bound)?;
            apply_update(&mut self.model, &mut self.opt, &grads, self.cfg.lr, batch)?;
            if converged(&trace, self.cfg.early_stop_tol) {
                break;
            }
        }
        let first_p = first_p.expect("steps_per_batch >= 1");
        let final_p = self.finish(x, final_p.expect("steps_per_batch >= 1"), Mode::Eval)?;
        Ok(BatchOutcome {
            predictions: final_p.argmax_rows(),
            pre_adapt_predictions: first_p.argmax_rows(),
            loss_trace: trace,
            mean_entropy_before: mean_entropy(&first_p)?,
            mean_entropy_after: mean_entropy(&final_p)?,
            included: x.rows(),
            wall_time: 0.0,
        })
    }

    fn eata_step(&mut self, x: &Tensor) -> Result<BatchOutcome> {
        let batch = self.batch_index;
        self.model.set_mode(Mode::Eval);
        let EataConfig { e0, beta } = self.cfg.eata.clone();
        let mut trace = Vec::with_capacity(self.cfg.steps_per_batch);
        let mut first_p = None;
        let mut final_p = None;
        let mut included = 0;
        for _ in 0..self.cfg.steps_per_batch {
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape, &self.filter);
            let xv = tape.constant(x.clone());
            let p = forward_probs(&mut self.model, &mut tape, &bound, xv, &mut self.rng)?;
            let ent = tape.entropy(p)?;
            let pv = tape.value(p)?.clone();
            first_p.get_or_insert_with(|| pv.clone());
            final_p = Some(pv);

            if self.importance.is_none() {
                let plain = tape.mean(ent)?;
                tape.backward(plain)?;
                let squared = trainable_grads(&tape, &bound)?
                    .into_iter()
                    .map(|(_, g)| g.map(|v| v * v))
                    .collect();
                self.importance = Some(squared);
                tape.zero_grad();
            }

            let weights = eata_weights(tape.value(ent)?.data(), e0);
            included = weights.iter().filter(|&&w| w > 0.0).count();
            if included == 0 {
                break;
            }
            let wv = tape.constant(Tensor::vector(weights));
            let weighted = tape.mul(ent, wv)?;
            let mut loss = tape.sum(weighted)?;
            if beta != 0.0 {
                let importance = self.importance.as_ref().expect("computed above");
                let mut penalty = None;
                for ((idx, var), omega) in bound.trainable().zip(importance) {
                    let anchor = tape.constant(self.source.entries()[idx].1.clone());
                    let diff = tape.sub(var, anchor)?;
                    let sq = tape.square(diff)?;
                    let w = tape.constant(omega.clone());
                    let term = tape.mul(sq, w)?;
                    let term = tape.sum(term)?;
                    penalty = Some(match penalty {
                        Some(acc) => tape.add(acc, term)?,
                        None => term,
                    });
                }
                if let Some(penalty) = penalty {
                    let scaled = tape.scale(penalty, beta)?;
                    loss = tape.add(loss, scaled)?;
                }
            }
            trace.push(finite_loss(&tape, loss, batch)?);
            tape.backward(loss)?;
            let grads = trainable_grads(&tape, &bound)?;
            apply_update(&mut self.model, &mut self.opt, &grads, self.cfg.lr, batch)?;
            if converged(&trace, self.cfg.early_stop_tol) {
                break;
            }
        }
        let first_p = first_p.expect("steps_per_batch >= 1");
        let final_p = final_p.expect("steps_per_batch >= 1");
        let final_p = if trace.is_empty() {
            self.model.set_mode(Mode::Eval);
            final_p
        } else {
            self.finish(x, final_p, Mode::Eval)?
        };
        Ok(BatchOutcome {
            predictions: final_p.argmax_rows(),
            pre_adapt_predictions: first_p.argmax_rows(),
            loss_trace: trace,
            mean_entropy_before: mean_entropy(&first_p)?,
            mean_entropy_after: mean_entropy(&final_p)?,
            included,
            wall_time: 0.0,
        })
    }

    fn oil_step(&mut self, x: &Tensor) -> Result<BatchOutcome> {
        let batch = self.batch_index;
        let OilConfig {
            alpha,
            gamma,
            k,
            beta,
            student_train_mode,
        } = self.cfg.oil.clone();
        let teacher = self.teacher.as_mut().expect("OIL adapter owns a teacher");
        teacher.set_mode(Mode::Eval);
        let q = teacher.probabilities(x, &mut self.rng)?;
        let pre = q.argmax_rows();
        let ent_before = mean_entropy(&q)?;

        let retained: Vec<usize> = (0..q.rows())
            .filter(|&i| {
                gamma == f64::INFINITY || q.row(i).iter().copied().fold(0.0, f64::max) >= gamma
            })
            .collect();
        if retained.is_empty() {
            return Ok(BatchOutcome {
                predictions: pre.clone(),
                pre_adapt_predictions: pre,
                loss_trace: Vec::new(),
                mean_entropy_before: ent_before,
                mean_entropy_after: ent_before,
                included: 0,
                wall_time: 0.0,
            });
        }
        let xr = x.select_rows(&retained);
        let qr = q.select_rows(&retained);

        self.model.set_mode(mode_for(student_train_mode));
        let mut trace = Vec::with_capacity(k);
        for _ in 0..k {
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape, &self.filter);
            let xv = tape.constant(xr.clone());
            let p = forward_probs(&mut self.model, &mut tape, &bound, xv, &mut self.rng)?;
            let target = tape.constant(qr.clone());
            let kl = tape.kl_div(target, p)?;
            let kl = tape.mean(kl)?;
            let loss = tape.scale(kl, beta)?;
            trace.push(finite_loss(&tape, loss, batch)?);
            tape.backward(loss)?;
            let grads = trainable_grads(&tape, &bound)?;
            apply_update(&mut self.model, &mut self.opt, &grads, self.cfg.lr, batch)?;
        }
        self.model.set_mode(Mode::Eval);

        let teacher = self.teacher.as_mut().expect("OIL adapter owns a teacher");
        if alpha != 1.0 {
            let selected = self.model.selected_indices(&self.filter);
            let student = self.model.params();
            let mut teacher_params = teacher.params_mut();
            for idx in selected {
                let t = teacher_params[idx].data_mut();
                for (tv, sv) in t.iter_mut().zip(student[idx].data()) {
                    *tv = alpha * *tv + (1.0 - alpha) * sv;
                }
            }
        }
        let q_final = teacher.probabilities(x, &mut self.rng)?;
        Ok(BatchOutcome {
            predictions: q_final.argmax_rows(),
            pre_adapt_predictions: pre,
            loss_trace: trace,
            mean_entropy_before: ent_before,
            mean_entropy_after: mean_entropy(&q_final)?,
            included: retained.len(),
            wall_time: 0.0,
        })
    }

    /// Runs a stream batch by batch.
    ///
    /// Episodic adapters reset to the source snapshot first; online adapters
    /// continue from their current state. Only the adaptation calls are timed.
    pub fn run_stream(&mut self, stream: &Stream, clock: &dyn Clock) -> Result<RunReport> {
        if self.cfg.reset == ResetMode::Episodic {
            self.reset()?;
        }
        let counters_before = self.counters();
        let mut outcomes = Vec::with_capacity(stream.batches.len());
        let mut direct = Vec::with_capacity(stream.batches.len());
        let mut wall = 0.0;
        for (i, b) in stream.batches.iter().enumerate() {
            direct.push(self.direct_predictions(&b.features)?);
            let start = clock.now();
            let mut outcome = self.adapt_batch(&b.features).map_err(|e| match e {
                Error::AdaptationDivergence { .. } => Error::AdaptationDivergence { batch: i },
                other => other,
            })?;
            outcome.wall_time = clock.now() - start;
            wall += outcome.wall_time;
            outcomes.push(outcome);
        }
        let after = self.counters();
        let counters = CallCounters {
            encoder_calls: after.encoder_calls - counters_before.encoder_calls,
            classifier_calls: after.classifier_calls - counters_before.classifier_calls,
        };
        metrics::build_report(
            self.cfg.strategy,
            self.cfg.seed,
            stream,
            &outcomes,
            &direct,
            wall,
            counters,
        )
    }

    /// Forward-pass counters of the adapted model plus the teacher, if any.
    pub fn counters(&self) -> CallCounters {
        let mut c = self.model.counters();
        if let Some(t) = &self.teacher {
            let tc = t.counters();
            c.encoder_calls += tc.encoder_calls;
            c.classifier_calls += tc.classifier_calls;
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    fn model() -> Model {
        Model::new(
            4,
            Architecture {
                input_dim: 6,
                hidden: vec![8, 8],
                classes: 4,
                encoder_dropout: 0.1,
            },
        )
        .unwrap()
    }

    fn batch(seed: u64, n: usize) -> Tensor {
        gaussian_noise(&[n, 6], &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn tent_loss_cases() {
        let mut tape = Tape::new();
        let onehot = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let l = tent_loss(&mut tape, onehot).unwrap();
        assert_eq!(tape.value(l).unwrap().data()[0], 0.0);
        let uniform = tape.constant(Tensor::full(&[3, 10], 0.1));
        let l = tent_loss(&mut tape, uniform).unwrap();
        assert!((tape.value(l).unwrap().data()[0] - core::f64::consts::LN_10).abs() < 1e-6);
    }

    #[test]
    fn tent_gradient_step_sharpens_a_single_pair() {
        // H(softmax([z, 0])) decreases in z for z > 0.
        let mut z = 0.4;
        let entropy_at = |z: f64| {
            let mut tape = Tape::new();
            let zv = tape.leaf(Tensor::from_rows(&[vec![z, 0.0]]).unwrap(), true);
            let p = tape.softmax(zv).unwrap();
            let l = tent_loss(&mut tape, p).unwrap();
            tape.backward(l).unwrap();
            let g = tape.grad(zv).unwrap().unwrap().data()[0];
            (tape.value(l).unwrap().data()[0], g)
        };
        let (h0, g) = entropy_at(z);
        assert!(g < 0.0);
        z -= 0.1 * g;
        let (h1, _) = entropy_at(z);
        assert!(h1 < h0);
    }

    #[test]
    fn eata_weights_filter_and_scale() {
        let w = eata_weights(&[0.0, 0.0], 2.0);
        assert!(w.iter().all(|&v| (v - libm::exp(2.0) / 2.0).abs() < 1e-12));
        let w = eata_weights(&[1.0, 3.0, 2.0], 2.0);
        assert_eq!(w[1], 0.0);
        assert_eq!(w[2], 0.0);
        assert!((w[0] - libm::exp(1.0)).abs() < 1e-12);
        let w = eata_weights(&[10.0, 0.5], f64::INFINITY);
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn perturbation_requires_a_component() {
        let cfg = PclConfig {
            use_noise: false,
            use_dropout: false,
            ..PclConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            pcl_perturb(&Tensor::zeros(&[2, 2]), &cfg, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pcl_counter_law() {
        let mut cfg = AdaptConfig::for_strategy(Strategy::Pcl);
        cfg.steps_per_batch = 3;
        let mut adapter = Adapter::new(model(), cfg).unwrap();
        let before = adapter.model().counters();
        adapter.adapt_batch(&batch(1, 8)).unwrap();
        let after = adapter.model().counters();
        assert_eq!(after.encoder_calls - before.encoder_calls, 3);
        assert_eq!(after.classifier_calls - before.classifier_calls, 6);
    }

    #[test]
    fn zero_lr_matches_direct() {
        for strategy in [Strategy::Tent, Strategy::Pcl, Strategy::Eata] {
            let mut cfg = AdaptConfig::for_strategy(strategy);
            cfg.lr = 0.0;
            let mut adapter = Adapter::new(model(), cfg).unwrap();
            let mut direct =
                Adapter::new(model(), AdaptConfig::for_strategy(Strategy::Direct)).unwrap();
            for seed in 0..4 {
                let x = batch(seed, 8);
                assert_eq!(
                    adapter.adapt_batch(&x).unwrap().predictions,
                    direct.adapt_batch(&x).unwrap().predictions
                );
            }
            assert!(adapter.model().snapshot().bit_eq(adapter.source()));
        }
    }

    #[test]
    fn eata_degenerates_to_tent() {
        let x = batch(3, 8);
        let mut cfg = AdaptConfig::for_strategy(Strategy::Eata);
        cfg.eata.beta = 0.0;
        cfg.eata.e0 = f64::INFINITY;
        let eata = Adapter::new(model(), cfg).unwrap().adapt_batch(&x).unwrap();
        let tent = Adapter::new(model(), AdaptConfig::for_strategy(Strategy::Tent))
            .unwrap()
            .adapt_batch(&x)
            .unwrap();
        assert!((eata.loss_trace[0] - tent.loss_trace[0]).abs() < 1e-10);
    }

    #[test]
    fn oil_alpha_one_freezes_teacher() {
        let mut cfg = AdaptConfig::for_strategy(Strategy::Oil);
        cfg.oil.alpha = 1.0;
        cfg.oil.gamma = 0.0;
        cfg.lr = 1e-2;
        let mut adapter = Adapter::new(model(), cfg).unwrap();
        let source = adapter.source().clone();
        for seed in 0..3 {
            adapter.adapt_batch(&batch(seed, 8)).unwrap();
        }
        assert!(adapter.teacher().unwrap().snapshot().bit_eq(&source));
        assert!(!adapter.model().snapshot().bit_eq(&source));
    }

    #[test]
    fn oil_student_equal_teacher_has_zero_loss() {
        let mut cfg = AdaptConfig::for_strategy(Strategy::Oil);
        cfg.lr = 0.0;
        cfg.oil.gamma = f64::INFINITY;
        cfg.oil.student_train_mode = false;
        let mut adapter = Adapter::new(model(), cfg).unwrap();
        let out = adapter.adapt_batch(&batch(0, 8)).unwrap();
        assert_eq!(out.included, 8);
        assert!(out.loss_trace.iter().all(|&l| l.abs() <= 1e-12));
    }

    #[test]
    fn early_stop_cuts_the_step_loop() {
        let mut cfg = AdaptConfig::for_strategy(Strategy::Tent);
        cfg.lr = 0.0;
        cfg.steps_per_batch = 10;
        cfg.early_stop_tol = Some(1e-6);
        let out = Adapter::new(model(), cfg)
            .unwrap()
            .adapt_batch(&batch(0, 8))
            .unwrap();
        assert_eq!(out.loss_trace.len(), 2);
    }

    #[test]
    fn non_finite_input_is_a_divergence() {
        let mut x = batch(0, 8);
        x.data_mut()[3] = f64::NAN;
        let mut adapter = Adapter::new(model(), AdaptConfig::for_strategy(Strategy::Pcl)).unwrap();
        adapter.adapt_batch(&batch(1, 8)).unwrap();
        assert_eq!(
            adapter.adapt_batch(&x).unwrap_err(),
            Error::AdaptationDivergence { batch: 1 }
        );
    }
}
