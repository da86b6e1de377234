//! Encoder/classifier pair under adaptation.
//!
//! The encoder is a stack of `Linear → LayerNorm → ReLU → Dropout` blocks and
//! the classifier is one affine layer. Parameters are plain [`Tensor`]s owned
//! by the model; a forward pass binds them onto a [`Tape`] as leaves.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, DEFAULT_LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub encoder_dropout: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 20,
            hidden: vec![64, 64],
            classes: 10,
            encoder_dropout: 0.1,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::param("dims", "all dimensions must be at least 1"));
        }
        if self.classes < 2 {
            return Err(Error::param("classes", "need at least two classes"));
        }
        if !(0.0..1.0).contains(&self.encoder_dropout) {
            return Err(Error::param("encoder_dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden.last().expect("validated: hidden is non-empty")
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let mut fan_in = self.input_dim;
        let mut count = 0;
        for &h in &self.hidden {
            count += fan_in * h + h + 2 * h;
            fan_in = h;
        }
        count + fan_in * self.classes + self.classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub weight: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CallCounters {
    pub encoder_calls: u64,
    pub classifier_calls: u64,
}

#[derive(Debug, Clone)]
pub struct Model {
    arch: Architecture,
    blocks: Vec<EncoderBlock>,
    head: Head,
    mode: Mode,
    counters: CallCounters,
}

/// Chooses which parameters an optimizer may touch.
#[derive(Clone)]
pub enum ParamFilter {
    All,
    LayerNormOnly,
    NameContains(String),
    Custom(fn(&str) -> bool),
}

impl core::fmt::Debug for ParamFilter {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ParamFilter::All => f.write_str("All"),
            ParamFilter::LayerNormOnly => f.write_str("LayerNormOnly"),
            ParamFilter::NameContains(s) => write!(f, "NameContains({s:?})"),
            ParamFilter::Custom(_) => f.write_str("Custom"),
        }
    }
}

impl ParamFilter {
    pub fn selects(&self, name: &str) -> bool {
        match self {
            ParamFilter::All => true,
            ParamFilter::LayerNormOnly => {
                name.starts_with("block")
                    && (name.ends_with(".norm.gamma") || name.ends_with(".norm.beta"))
            }
            ParamFilter::NameContains(s) => name.contains(s.as_str()),
            ParamFilter::Custom(pred) => pred(name),
        }
    }
}

/// Parameter values copied out of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    arch: Architecture,
    entries: Vec<(String, Tensor)>,
}

impl Snapshot {
    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn bit_eq(&self, other: &Snapshot) -> bool {
        self.arch == other.arch
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.bit_eq(y))
    }
}

/// Parameters of one model bound as leaves on a tape, in [`Model::param_names`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    trainable: Vec<bool>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// `(parameter index, var)` for every trainable parameter.
    pub fn trainable(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars
            .iter()
            .zip(&self.trainable)
            .enumerate()
            .filter(|(_, (_, t))| **t)
            .map(|(i, (v, _))| (i, *v))
    }
}

fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("fan_in × fan_out entries")
}

impl Model {
    pub fn new(seed: u64, arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fan_in = arch.input_dim;
        let mut blocks = Vec::with_capacity(arch.hidden.len());
        for &h in &arch.hidden {
            blocks.push(EncoderBlock {
                weight: glorot(&mut rng, fan_in, h),
                bias: Tensor::zeros(&[h]),
                gamma: Tensor::full(&[h], 1.0),
                beta: Tensor::zeros(&[h]),
                eps: DEFAULT_LAYER_NORM_EPS,
                dropout_rate: arch.encoder_dropout,
            });
            fan_in = h;
        }
        let head = Head {
            weight: glorot(&mut rng, fan_in, arch.classes),
            bias: Tensor::zeros(&[arch.classes]),
        };
        Ok(Self {
            arch,
            blocks,
            head,
            mode: Mode::Eval,
            counters: CallCounters::default(),
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn blocks(&self) -> &[EncoderBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [EncoderBlock] {
        &mut self.blocks
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Head {
        &mut self.head
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn counters(&self) -> CallCounters {
        self.counters
    }

    /// Sets every encoder block's dropout rate.
    pub fn set_encoder_dropout(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::param("encoder_dropout", "must lie in [0, 1)"));
        }
        for b in &mut self.blocks {
            b.dropout_rate = rate;
        }
        self.arch.encoder_dropout = rate;
        Ok(())
    }

    /// Stable parameter names, block by block, then the head.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(4 * self.blocks.len() + 2);
        for i in 0..self.blocks.len() {
            names.push(format!("block{i}.linear.W"));
            names.push(format!("block{i}.linear.b"));
            names.push(format!("block{i}.norm.gamma"));
            names.push(format!("block{i}.norm.beta"));
        }
        names.push(String::from("head.W"));
        names.push(String::from("head.b"));
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(4 * self.blocks.len() + 2);
        for b in &self.blocks {
            out.extend([&b.weight, &b.bias, &b.gamma, &b.beta]);
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(4 * self.blocks.len() + 2);
        for b in &mut self.blocks {
            out.extend([&mut b.weight, &mut b.bias, &mut b.gamma, &mut b.beta]);
        }
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }

    /// Indices (into [`Model::params`]) of the parameters a filter selects.
    pub fn selected_indices(&self, filter: &ParamFilter) -> Vec<usize> {
        self.param_names()
            .iter()
            .enumerate()
            .filter(|(_, n)| filter.selects(n))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn select_params(&self, filter: &ParamFilter) -> Vec<(String, &Tensor)> {
        self.param_names()
            .into_iter()
            .zip(self.params())
            .filter(|(n, _)| filter.selects(n))
            .collect()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            arch: self.arch.clone(),
            entries: self
                .param_names()
                .into_iter()
                .zip(self.params().into_iter().cloned())
                .collect(),
        }
    }

    /// Restores parameter values. Counters and mode are left untouched.
    pub fn restore(&mut self, snapshot: &Snapshot) -> Result<()> {
        let names = self.param_names();
        if snapshot.entries.len() != names.len()
            || snapshot.arch.input_dim != self.arch.input_dim
            || snapshot.arch.hidden != self.arch.hidden
            || snapshot.arch.classes != self.arch.classes
        {
            return Err(Error::Structure(format!(
                "snapshot of {:?} does not fit model {:?}",
                snapshot.arch, self.arch
            )));
        }
        for ((name, value), (expected, param)) in snapshot
            .entries
            .iter()
            .zip(names.iter().zip(self.params_mut()))
        {
            if name != expected || value.shape() != param.shape() {
                return Err(Error::Structure(format!(
                    "parameter {name} {:?} does not fit {expected} {:?}",
                    value.shape(),
                    param.shape()
                )));
            }
            param.data_mut().copy_from_slice(value.data());
        }
        Ok(())
    }

    /// Builds a model from a snapshot. Starts in Eval mode with zeroed counters.
    pub fn from_snapshot(snapshot: &Snapshot) -> Result<Self> {
        let mut model = Self::new(0, snapshot.arch.clone())?;
        model.restore(snapshot)?;
        Ok(model)
    }

    /// Places every parameter on the tape; those selected by `filter` require gradients.
    pub fn bind(&self, tape: &mut Tape, filter: &ParamFilter) -> Bound {
        let names = self.param_names();
        let mut vars = Vec::with_capacity(names.len());
        let mut trainable = Vec::with_capacity(names.len());
        for (name, value) in names.iter().zip(self.params()) {
            let train = filter.selects(name);
            vars.push(tape.leaf(value.clone(), train));
            trainable.push(train);
        }
        Bound { vars, trainable }
    }

    /// Encoder pass. Encoder dropout is active only in [`Mode::Train`].
    pub fn forward_features<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        rng: &mut R,
    ) -> Result<Var> {
        let (_, cols) = tape.value(x)?.dims2("forward_features")?;
        if cols != self.arch.input_dim {
            return Err(Error::dims(
                "forward_features",
                tape.value(x)?.shape(),
                &[self.arch.input_dim],
            ));
        }
        let active = self.mode == Mode::Train;
        let mut h = x;
        for (i, block) in self.blocks.iter().enumerate() {
            let v = &bound.vars[4 * i..4 * i + 4];
            h = tape.matmul(h, v[0])?;
            h = tape.add_bias(h, v[1])?;
            h = tape.layer_norm(h, v[2], v[3], block.eps)?;
            h = tape.relu(h)?;
            h = tape.dropout(h, block.dropout_rate, rng, active)?;
        }
        self.counters.encoder_calls += 1;
        Ok(h)
    }

    /// Classifier pass producing raw logits.
    pub fn forward_logits(&mut self, tape: &mut Tape, bound: &Bound, h: Var) -> Result<Var> {
        let (_, cols) = tape.value(h)?.dims2("forward_logits")?;
        if cols != self.arch.feature_dim() {
            return Err(Error::dims(
                "forward_logits",
                tape.value(h)?.shape(),
                self.head.weight.shape(),
            ));
        }
        let n = bound.vars.len();
        let logits = tape.matmul(h, bound.vars[n - 2])?;
        let logits = tape.add_bias(logits, bound.vars[n - 1])?;
        self.counters.classifier_calls += 1;
        Ok(logits)
    }

    /// Class probabilities for a batch, without recording gradients.
    pub fn probabilities<R: Rng + ?Sized>(&mut self, x: &Tensor, rng: &mut R) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &ParamFilter::Custom(|_| false));
        let xv = tape.constant(x.clone());
        let h = self.forward_features(&mut tape, &bound, xv, rng)?;
        let logits = self.forward_logits(&mut tape, &bound, h)?;
        let p = tape.softmax(logits)?;
        Ok(tape.value(p)?.clone())
    }

    /// Eval-mode argmax predictions. The mode is restored afterwards.
    pub fn predict(&mut self, x: &Tensor) -> Result<Vec<usize>> {
        let prev = self.mode;
        self.mode = Mode::Eval;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let probs = self.probabilities(x, &mut unused);
        self.mode = prev;
        Ok(probs?.argmax_rows())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_block() -> Model {
        Model::new(
            3,
            Architecture {
                input_dim: 5,
                hidden: vec![4, 3],
                classes: 3,
                encoder_dropout: 0.2,
            },
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_norm_is_identity() {
        let a = Model::new(7, Architecture::default()).unwrap();
        let b = Model::new(7, Architecture::default()).unwrap();
        assert!(a.snapshot().bit_eq(&b.snapshot()));
        for block in a.blocks() {
            assert!(block.gamma.data().iter().all(|&g| g == 1.0));
            assert!(block.beta.data().iter().all(|&g| g == 0.0));
        }
        let c = Model::new(8, Architecture::default()).unwrap();
        assert!(!a.snapshot().bit_eq(&c.snapshot()));
    }

    #[test]
    fn init_rejects_bad_dims() {
        let mut arch = Architecture::default();
        arch.classes = 1;
        assert!(Model::new(0, arch).is_err());
        let mut arch = Architecture::default();
        arch.hidden = vec![64, 0];
        assert!(Model::new(0, arch).is_err());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let arch = Architecture::default();
        // 20·64+64 + 2·64 + 64·64+64 + 2·64 + 64·10+10
        let closed_form = 20 * 64 + 64 + 2 * 64 + 64 * 64 + 64 + 2 * 64 + 64 * 10 + 10;
        assert_eq!(closed_form, 6_410);
        let model = Model::new(1, arch.clone()).unwrap();
        let counted: usize = model.params().iter().map(|t| t.len()).sum();
        assert_eq!(counted, closed_form);
        assert_eq!(arch.parameter_count(), closed_form);
    }

    #[test]
    fn select_params_filters() {
        let model = two_block();
        let ln: Vec<String> = model
            .select_params(&ParamFilter::LayerNormOnly)
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(
            ln,
            [
                "block0.norm.gamma",
                "block0.norm.beta",
                "block1.norm.gamma",
                "block1.norm.beta"
            ]
        );
        let all: Vec<String> = model
            .select_params(&ParamFilter::All)
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert!(ln.iter().all(|n| all.contains(n)));
        let head: Vec<String> = model
            .select_params(&ParamFilter::Custom(|n| n.contains("head")))
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(head, ["head.W", "head.b"]);
    }

    #[test]
    fn snapshot_restore_roundtrip() {
        let mut model = two_block();
        let snap = model.snapshot();
        let snap2 = snap.clone();
        assert!(snap.bit_eq(&snap2));
        for p in model.params_mut() {
            for v in p.data_mut() {
                *v += 0.5;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        model
            .probabilities(&Tensor::zeros(&[2, 5]), &mut rng)
            .unwrap();
        let calls = model.counters();
        model.restore(&snap).unwrap();
        assert!(model.snapshot().bit_eq(&snap));
        assert_eq!(model.counters(), calls);
    }

    #[test]
    fn restore_rejects_other_architecture() {
        let mut model = two_block();
        let other = Model::new(0, Architecture::default()).unwrap().snapshot();
        assert!(matches!(model.restore(&other), Err(Error::Structure(_))));
    }

    #[test]
    fn forward_counters_and_eval_purity() {
        let mut model = two_block();
        let x = Tensor::from_rows(&[vec![0.1, -0.3, 0.5, 1.0, 2.0], vec![1.0; 5]]).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &ParamFilter::All);
        let xv = tape.constant(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h1 = model
            .forward_features(&mut tape, &bound, xv, &mut rng)
            .unwrap();
        assert_eq!(model.counters().encoder_calls, 1);
        let h2 = model
            .forward_features(&mut tape, &bound, xv, &mut rng)
            .unwrap();
        assert_eq!(model.counters().encoder_calls, 2);
        assert!(tape.value(h1).unwrap().bit_eq(tape.value(h2).unwrap()));
        model.forward_logits(&mut tape, &bound, h1).unwrap();
        assert_eq!(model.counters().classifier_calls, 1);

        model.set_mode(Mode::Train);
        let t1 = model
            .forward_features(&mut tape, &bound, xv, &mut rng)
            .unwrap();
        let t2 = model
            .forward_features(&mut tape, &bound, xv, &mut rng)
            .unwrap();
        assert!(!tape.value(t1).unwrap().bit_eq(tape.value(t2).unwrap()));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mut model = two_block();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &ParamFilter::All);
        let xv = tape.constant(Tensor::zeros(&[2, 4]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(model
            .forward_features(&mut tape, &bound, xv, &mut rng)
            .is_err());
        let hv = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(model.forward_logits(&mut tape, &bound, hv).is_err());
    }

    #[test]
    fn head_is_affine() {
        let mut model = Model::new(
            0,
            Architecture {
                input_dim: 3,
                hidden: vec![3],
                classes: 3,
                encoder_dropout: 0.0,
            },
        )
        .unwrap();
        model.head_mut().weight = Tensor::zeros(&[3, 3]);
        model.head_mut().bias = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &ParamFilter::All);
        let h = tape.constant(Tensor::zeros(&[2, 3]));
        let z = model.forward_logits(&mut tape, &bound, h).unwrap();
        assert_eq!(
            tape.value(z).unwrap().data(),
            &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]
        );

        model.head_mut().weight = Tensor::identity(3);
        model.head_mut().bias = Tensor::zeros(&[3]);
        let bound = model.bind(&mut tape, &ParamFilter::All);
        let h = tape.constant(Tensor::full(&[2, 3], 1.0));
        let z = model.forward_logits(&mut tape, &bound, h).unwrap();
        assert!(tape.value(z).unwrap().data().iter().all(|&v| v == 1.0));
    }
}
