//! The study drivers behind each CLI subcommand.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use tta_core::datagen::{make_stream, train_source, ShiftSpec, Stream, Task};
use tta_core::metrics::{aggregate, spearman, RunReport};
use tta_core::model::Model;
use tta_core::tta::{AdaptConfig, Adapter, Clock, NoClock, ResetMode, Strategy};

use crate::config::{hash_json, ExperimentConfig};
use crate::error::{LabError, Result};
use crate::model_io;
use crate::report::{
    fmt_float, AggregateEntry, Report, RunEntry, SourceInfo, Table, ToolInfo, TransitionRow,
    SCHEMA_VERSION,
};

/// Seconds since construction, from the OS monotonic clock.
pub struct MonotonicClock(Instant);

impl MonotonicClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// One adaptation run to execute.
#[derive(Clone)]
pub struct Job {
    pub variant: String,
    pub model: Model,
    pub adapt: AdaptConfig,
    pub shift: ShiftSpec,
    pub seed: u64,
    pub params: Vec<(&'static str, f64)>,
}

/// A prepared experiment: task built and source model trained or loaded.
pub struct Lab {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub task: Task,
    pub source: Model,
    pub source_info: SourceInfo,
    jobs: usize,
}

impl Lab {
    /// Validates the config, builds the task and obtains the source model.
    /// `jobs` is the worker count for independent runs; 0 means one per core.
    pub fn prepare(config: ExperimentConfig, jobs: usize) -> Result<Self> {
        config.validate()?;
        let task = Task::new(config.task.clone())?;
        let arch = config.architecture();
        let (source, source_info) = match &config.model.path {
            Some(path) => {
                let model = model_io::load(path)?;
                if model.architecture() != &arch {
                    return Err(LabError::Config(format!(
                        "model.path: {} has architecture {:?}, config asks for {:?}",
                        path.display(),
                        model.architecture(),
                        arch
                    )));
                }
                let info = SourceInfo {
                    parameter_count: arch.parameter_count(),
                    val_accuracy: None,
                    final_train_loss: None,
                };
                (model, info)
            }
            None => {
                let (train, val) = task.source_splits();
                let mut model = Model::new(config.model.seed, arch.clone())?;
                let summary = train_source(&mut model, &train, &val, &config.train)?;
                let info = SourceInfo {
                    parameter_count: arch.parameter_count(),
                    val_accuracy: Some(summary.val_accuracy),
                    final_train_loss: summary.epoch_losses.last().copied(),
                };
                (model, info)
            }
        };
        Ok(Self {
            config_hash: config.hash(),
            config,
            task,
            source,
            source_info,
            jobs,
        })
    }

    pub fn stream(&self, shift: &ShiftSpec, seed: u64) -> Result<Stream> {
        let s = &self.config.stream;
        Ok(make_stream(
            &self.task,
            shift,
            s.n_batches,
            s.batch_size,
            seed,
        )?)
    }

    /// The shared adaptation settings specialized to one strategy and seed.
    pub fn adapt_config(&self, strategy: Strategy, seed: u64) -> AdaptConfig {
        AdaptConfig {
            strategy,
            seed,
            ..self.config.adapt.clone()
        }
    }

    fn job(&self, variant: String, strategy: Strategy, seed: u64) -> Job {
        Job {
            variant,
            model: self.source.clone(),
            adapt: self.adapt_config(strategy, seed),
            shift: self.config.shift.clone(),
            seed,
            params: Vec::new(),
        }
    }

    /// Hash identifying everything about a run except its seed.
    fn run_hash(&self, job: &Job) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            experiment: &'a str,
            variant: &'a str,
            adapt: &'a AdaptConfig,
            shift: &'a ShiftSpec,
            encoder_dropout: f64,
        }
        let adapt = AdaptConfig {
            seed: 0,
            ..job.adapt.clone()
        };
        hash_json(&Key {
            experiment: &self.config_hash,
            variant: &job.variant,
            adapt: &adapt,
            shift: &job.shift,
            encoder_dropout: job.model.architecture().encoder_dropout,
        })
    }

    fn run_job(&self, job: &Job) -> Result<RunReport> {
        let stream = self.stream(&job.shift, job.seed)?;
        let mut adapter = Adapter::new(job.model.clone(), job.adapt.clone())?;
        let mut report = if self.config.output.timing {
            adapter.run_stream(&stream, &MonotonicClock::new())?
        } else {
            adapter.run_stream(&stream, &NoClock)?
        };
        report.config_hash = self.run_hash(job);
        Ok(report)
    }

    /// Runs jobs on the worker pool. Results come back in job order.
    pub fn execute(&self, jobs: &[Job]) -> Result<Vec<RunReport>> {
        if self.jobs == 1 {
            return jobs.iter().map(|j| self.run_job(j)).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| LabError::Config(format!("--jobs: {e}")))?;
        pool.install(|| jobs.par_iter().map(|j| self.run_job(j)).collect())
    }

    fn assemble(&self, command: &str, jobs: &[Job], runs: &[RunReport]) -> Result<Report> {
        let timing = self.config.output.timing;
        let entries: Vec<RunEntry> = jobs
            .iter()
            .zip(runs)
            .map(|(job, run)| {
                job.params.iter().fold(
                    RunEntry::from_run(&job.variant, run, timing),
                    |e, (k, v)| e.with_param(k, *v),
                )
            })
            .collect();

        let mut order: Vec<&str> = Vec::new();
        let mut groups: BTreeMap<&str, Vec<RunReport>> = BTreeMap::new();
        for (job, run) in jobs.iter().zip(runs) {
            if !groups.contains_key(job.variant.as_str()) {
                order.push(&job.variant);
            }
            groups.entry(&job.variant).or_default().push(run.clone());
        }
        let mut aggregates = Vec::new();
        let mut transitions = Vec::new();
        for variant in order {
            let group = &groups[variant];
            let mut agg = aggregate(group)?;
            if !timing {
                agg.metrics.remove("throughput_sps");
            }
            aggregates.push(AggregateEntry::new(variant, agg));
            let total = group.iter().fold(
                Default::default(),
                |mut acc: tta_core::metrics::Transitions, r| {
                    acc += r.transitions;
                    acc
                },
            );
            transitions.push(TransitionRow {
                variant: variant.into(),
                r_to_w: total.r_to_w,
                w_to_r: total.w_to_r,
                net: total.net,
            });
        }
        Ok(Report {
            schema_version: SCHEMA_VERSION,
            command: command.into(),
            tool: ToolInfo::current(),
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            seeds: self.config.seeds.clone(),
            source: self.source_info.clone(),
            runs: entries,
            aggregate: aggregates,
            transitions,
            summary: BTreeMap::new(),
        })
    }

    /// Every configured strategy on every seed.
    pub fn run(&self) -> Result<Report> {
        let mut jobs = Vec::new();
        for &strategy in &self.config.strategies {
            for &seed in &self.config.seeds {
                jobs.push(self.job(strategy.name().into(), strategy, seed));
            }
        }
        let runs = self.execute(&jobs)?;
        self.assemble("run", &jobs, &runs)
    }

    /// Every adapting strategy at every learning rate.
    pub fn sweep_lr(&self) -> Result<(Report, Table)> {
        let mut jobs = Vec::new();
        for &strategy in self
            .config
            .strategies
            .iter()
            .filter(|s| s.updates_parameters())
        {
            for &lr in &self.config.studies.lrs {
                for &seed in &self.config.seeds {
                    let mut job = self.job(format!("{strategy}@lr={lr}"), strategy, seed);
                    job.adapt.lr = lr;
                    job.params.push(("lr", lr));
                    jobs.push(job);
                }
            }
        }
        let runs = self.execute(&jobs)?;
        let report = self.assemble("sweep-lr", &jobs, &runs)?;
        let mut table = Table::new(&["strategy", "lr", "seed", "accuracy"]);
        for (job, run) in jobs.iter().zip(&runs) {
            table.push(vec![
                run.strategy.to_string(),
                fmt_float(job.adapt.lr),
                run.seed.to_string(),
                fmt_float(run.accuracy),
            ]);
        }
        Ok((report, table))
    }

    /// Tent with encoder dropout active during adaptation, at one rate.
    fn tent_train_job(&self, rate: f64, seed: u64, variant: String) -> Result<Job> {
        let mut job = self.job(variant, Strategy::Tent, seed);
        job.model.set_encoder_dropout(rate)?;
        job.adapt.tent.train_mode = true;
        job.params.push(("dropout_rate", rate));
        Ok(job)
    }

    /// Tent in Eval mode next to Tent in Train mode at each dropout rate.
    pub fn study_dropout_mode(&self) -> Result<(Report, Table)> {
        let mut jobs = Vec::new();
        for &rate in &self.config.studies.dropout_rates {
            for &seed in &self.config.seeds {
                let mut eval = self.job(format!("eval@rate={rate}"), Strategy::Tent, seed);
                eval.model.set_encoder_dropout(rate)?;
                eval.adapt.tent.train_mode = false;
                eval.params.push(("dropout_rate", rate));
                jobs.push(eval);
                jobs.push(self.tent_train_job(rate, seed, format!("train@rate={rate}"))?);
            }
        }
        let runs = self.execute(&jobs)?;
        let report = self.assemble("study-dropout-mode", &jobs, &runs)?;
        let mut table = Table::new(&["mode", "rate", "seed", "accuracy"]);
        for (job, run) in jobs.iter().zip(&runs) {
            let mode = if job.adapt.tent.train_mode {
                "train"
            } else {
                "eval"
            };
            table.push(vec![
                mode.into(),
                fmt_float(job.params[0].1),
                run.seed.to_string(),
                fmt_float(run.accuracy),
            ]);
        }
        Ok((report, table))
    }

    /// Tent in Train mode across encoder dropout rates, with the rank
    /// correlation between rate and accuracy per seed and on the seed means.
    pub fn study_dropout_rate(&self) -> Result<(Report, Table)> {
        let rates = &self.config.studies.dropout_rates;
        let mut jobs = Vec::new();
        for &rate in rates {
            for &seed in &self.config.seeds {
                jobs.push(self.tent_train_job(rate, seed, format!("rate={rate}"))?);
            }
        }
        let runs = self.execute(&jobs)?;
        let mut report = self.assemble("study-dropout-rate", &jobs, &runs)?;
        let mut table = Table::new(&["rate", "seed", "accuracy"]);
        for (job, run) in jobs.iter().zip(&runs) {
            table.push(vec![
                fmt_float(job.params[0].1),
                run.seed.to_string(),
                fmt_float(run.accuracy),
            ]);
        }
        if rates.len() >= 2 {
            let n_seeds = self.config.seeds.len();
            let mut rhos = Vec::new();
            for (si, seed) in self.config.seeds.iter().enumerate() {
                let acc: Vec<f64> = (0..rates.len())
                    .map(|ri| runs[ri * n_seeds + si].accuracy)
                    .collect();
                let rho = spearman(rates, &acc)?;
                report.summary.insert(format!("spearman_seed_{seed}"), rho);
                rhos.push(rho);
            }
            let mean_rho = rhos.iter().sum::<f64>() / rhos.len() as f64;
            report
                .summary
                .insert("spearman_mean_over_seeds".into(), mean_rho);
            let means: Vec<f64> = (0..rates.len())
                .map(|ri| {
                    (0..n_seeds)
                        .map(|si| runs[ri * n_seeds + si].accuracy)
                        .sum::<f64>()
                        / n_seeds as f64
                })
                .collect();
            report
                .summary
                .insert("spearman_of_mean_accuracy".into(), spearman(rates, &means)?);
        }
        Ok((report, table))
    }

    /// Full PCL against PCL without the noise term and without the dropout term.
    pub fn study_perturbation(&self) -> Result<(Report, Table)> {
        const VARIANTS: [(&str, bool, bool); 3] = [
            ("PCL", true, true),
            ("PCL w/o norm", false, true),
            ("PCL w/o dropout", true, false),
        ];
        let mut jobs = Vec::new();
        for (name, noise, dropout) in VARIANTS {
            for &seed in &self.config.seeds {
                let mut job = self.job(name.into(), Strategy::Pcl, seed);
                job.adapt.pcl.use_noise = noise;
                job.adapt.pcl.use_dropout = dropout;
                jobs.push(job);
            }
        }
        let runs = self.execute(&jobs)?;
        let report = self.assemble("study-perturbation", &jobs, &runs)?;
        let seeds = &self.config.seeds;
        let mut header = vec!["Method".to_string()];
        header.extend(seeds.iter().map(|s| format!("seed {s}")));
        header.push("Avg".into());
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut table = Table::new(&header_refs);
        for (vi, (name, _, _)) in VARIANTS.iter().enumerate() {
            let accs: Vec<f64> = (0..seeds.len())
                .map(|si| runs[vi * seeds.len() + si].accuracy)
                .collect();
            let mut row = vec![name.to_string()];
            row.extend(accs.iter().map(|a| fmt_float(*a)));
            row.push(fmt_float(accs.iter().sum::<f64>() / accs.len() as f64));
            table.push(row);
        }
        Ok((report, table))
    }

    /// Each strategy over the ordered shift sequence, once resetting between
    /// segments and once carrying parameters across them.
    pub fn run_online(&self) -> Result<(Report, Table)> {
        let shifts = &self.config.studies.online_shifts;
        if shifts.len() < 2 {
            return Err(LabError::Config(
                "studies.online_shifts: run-online needs at least two shifts".into(),
            ));
        }
        let work: Vec<(Strategy, ResetMode, u64)> = self
            .config
            .strategies
            .iter()
            .flat_map(|&s| {
                [ResetMode::Episodic, ResetMode::Online]
                    .into_iter()
                    .flat_map(move |m| self.config.seeds.iter().map(move |&seed| (s, m, seed)))
            })
            .collect();
        let sequence = |&(strategy, mode, seed): &(Strategy, ResetMode, u64)| -> Result<Vec<(Job, RunReport)>> {
            let mut adapt = self.adapt_config(strategy, seed);
            adapt.reset = mode;
            let mut adapter = Adapter::new(self.source.clone(), adapt.clone())?;
            let clock = MonotonicClock::new();
            let mut out = Vec::new();
            for (i, shift) in shifts.iter().enumerate() {
                let stream = self.stream(shift, seed)?;
                let mut run = if self.config.output.timing {
                    adapter.run_stream(&stream, &clock)?
                } else {
                    adapter.run_stream(&stream, &NoClock)?
                };
                let mode_name = match mode {
                    ResetMode::Episodic => "episodic",
                    ResetMode::Online => "online",
                };
                let job = Job {
                    variant: format!("{strategy}/{mode_name}/segment {i}"),
                    model: self.source.clone(),
                    adapt: adapt.clone(),
                    shift: shift.clone(),
                    seed,
                    params: vec![
                        ("segment", i as f64),
                        ("carried_over", (mode == ResetMode::Online && i > 0) as u8 as f64),
                    ],
                };
                run.config_hash = self.run_hash(&job);
                out.push((job, run));
            }
            Ok(out)
        };
        let results: Vec<Vec<(Job, RunReport)>> = if self.jobs == 1 {
            work.iter().map(sequence).collect::<Result<_>>()?
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.jobs)
                .build()
                .map_err(|e| LabError::Config(format!("--jobs: {e}")))?;
            pool.install(|| work.par_iter().map(sequence).collect::<Result<_>>())?
        };
        let (jobs, runs): (Vec<Job>, Vec<RunReport>) = results.into_iter().flatten().unzip();
        let report = self.assemble("run-online", &jobs, &runs)?;
        let mut table = Table::new(&[
            "strategy",
            "mode",
            "seed",
            "segment",
            "shift",
            "carried_over",
            "accuracy",
            "direct_accuracy",
        ]);
        for (job, run) in jobs.iter().zip(&runs) {
            let mode = match job.adapt.reset {
                ResetMode::Episodic => "episodic",
                ResetMode::Online => "online",
            };
            table.push(vec![
                run.strategy.to_string(),
                mode.into(),
                run.seed.to_string(),
                (job.params[0].1 as usize).to_string(),
                run.shift.clone(),
                (job.params[1].1 != 0.0).to_string(),
                fmt_float(run.accuracy),
                fmt_float(run.direct_accuracy),
            ]);
        }
        Ok((report, table))
    }
}
