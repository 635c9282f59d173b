use super::adam::{adam_step, AdamConfig, AdamState};
use super::config::TrainConfig;
use super::schedule::lr_schedule;
use super::step::{assemble_batch, batch_loss};
use crate::augment::Dataset;
use crate::losses::LossReport;
use crate::numerics::rng::permutation;
use crate::numerics::{Element, Streams, Tape};
use crate::vit::ModelParams;
use crate::{Error, Result};

/// One logged optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub report: LossReport,
}

/// Model, optimizer state and step counter of one pretraining run.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    config: TrainConfig,
    params: ModelParams<T>,
    adam: AdamState<T>,
    step: u64,
}

impl<T: Element> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config.model_config(), &Streams::new(config.seed))?;
        let adam = AdamState::zeros_like(params.tensors());
        Ok(Trainer {
            config,
            params,
            adam,
            step: 0,
        })
    }

    /// Resume exactly where a run stopped.
    pub fn from_parts(
        config: TrainConfig,
        params: ModelParams<T>,
        adam: AdamState<T>,
        step: u64,
    ) -> Result<Self> {
        config.validate()?;
        if adam.m.len() != params.len() || adam.v.len() != params.len() {
            return Err(Error::Incompatible(
                "optimizer state does not match parameters".into(),
            ));
        }
        Ok(Trainer {
            config,
            params,
            adam,
            step,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn adam(&self) -> &AdamState<T> {
        &self.adam
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn streams(&self) -> Streams {
        Streams::new(self.config.seed)
    }

    /// Dataset indices of the batch used at 1-based step `step`.
    pub fn batch_indices(&self, n: usize, step: u64) -> Vec<usize> {
        let per = self.config.steps_per_epoch(n).max(1);
        let (epoch, within) = ((step - 1) / per, ((step - 1) % per) as usize);
        let perm = permutation(&mut self.streams().stream("shuffle", &[epoch]), n);
        let b = self.config.batch_size;
        perm[within * b..(within + 1) * b].to_vec()
    }

    /// Run a single optimizer step.
    pub fn step_once(&mut self, data: &Dataset) -> Result<StepLog> {
        let total = self.config.total_steps(data.len());
        if self.step >= total {
            return Err(Error::config(format!(
                "run already finished its {total} steps"
            )));
        }
        let s = self.step + 1;
        let idx = self.batch_indices(data.len(), s);
        let batch = assemble_batch::<T>(data, &idx, s, &self.config, &self.streams())?;
        let tape = Tape::new();
        let model = self.params.bind(&tape);
        let (loss, report) = batch_loss(&model, &batch, &self.config.losses)?;
        if let Some(component) = report.non_finite_component() {
            return Err(Error::Divergence {
                step: s,
                component: component.to_string(),
            });
        }
        let grads = tape.backward(loss)?;
        let g: Vec<_> = model
            .vars()
            .iter()
            .map(|&v| grads.get_or_zeros(v))
            .collect();
        let lr = lr_schedule(s, self.config.warmup(total), total, self.config.peak_lr());
        let cfg = AdamConfig {
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            eps: self.config.adam_eps,
            weight_decay: self.config.weight_decay,
        };
        let mut adam = self.adam.clone();
        adam.t = self.step;
        let new = adam_step(
            self.params.tensors(),
            &g,
            &mut adam,
            lr,
            &cfg,
            self.params.names(),
        )
        .map_err(|e| match e {
            Error::Divergence { component, .. } => Error::Divergence { step: s, component },
            other => other,
        })?;
        self.params.replace(new);
        self.adam = adam;
        self.step = s;
        Ok(StepLog {
            step: s,
            lr,
            report,
        })
    }

    /// Train until `stop_after` completed steps (or the planned total),
    /// reporting every step to `on_step`.
    pub fn run(
        &mut self,
        data: &Dataset,
        stop_after: Option<u64>,
        mut on_step: impl FnMut(&StepLog) -> Result<()>,
    ) -> Result<()> {
        let (h, w, c) = data.image_shape();
        let e = &self.config.model.encoder;
        if c != e.channels || h.min(w) == 0 {
            return Err(Error::config(format!(
                "dataset images {h}x{w}x{c} do not fit a {}-channel model",
                e.channels
            )));
        }
        let total = self.config.total_steps(data.len());
        if total == 0 {
            return Err(Error::config(format!(
                "{} images cannot fill a batch of {}",
                data.len(),
                self.config.batch_size
            )));
        }
        let end = stop_after.map_or(total, |s| s.min(total));
        while self.step < end {
            let log = self.step_once(data)?;
            on_step(&log)?;
        }
        Ok(())
    }
}
