//! Single-step adversarial training with a pluggable regularizer.
//!
//! Per step: attack → regularizer forward → adaptive λ (elle_a) →
//! `∇_θ [L(x_adv) + λ·R]` → SGD with momentum and L2 weight decay.

use std::time::Duration;

#[cfg(not(target_arch = "wasm32"))]
use std::time::Instant;
#[cfg(target_arch = "wasm32")]
use web_time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attacks::{AttackSpec, Classifier};
use crate::config::{CoDetectorConfig, DataSource, RunConfig};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::graph::{thread_backward_time, Graph};
use crate::loss::{ClassifierLoss, InputLoss};
use crate::models::{one_hot, Mlp};
use crate::probes;
use crate::regularizers::{self as reg, AdaptiveLambda, LinearityDraw, RegularizerKind};
use crate::rng::{purpose, stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    /// Mean cross-entropy on the attacked batch.
    pub loss: f64,
    /// Batch mean of the squared three-point residual (elle variants).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_lin: Option<f64>,
    /// Value of the active regularizer term.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reg_value: Option<f64>,
    pub lambda: f64,
    pub forward_ms: f64,
    pub backward_ms: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub clean_acc: f64,
    pub robust_acc: f64,
    /// Mean absolute three-point residual on the probe slice.
    pub elin_probe: f64,
    pub misalignment_probe: f64,
    /// Set once the detector has fired at or before this epoch.
    pub co_flag: bool,
}

/// Train and held-out data for a run.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let full = match d.source {
        DataSource::Synthetic => data::synth_mixture(
            d.dim,
            d.classes,
            d.modes,
            d.per_class,
            d.margin,
            d.spread,
            cfg.seed,
        )?,
        DataSource::Strokes => {
            let side = (d.dim as f64).sqrt().round() as usize;
            if side * side != d.dim {
                return Err(Error::Config(format!(
                    "stroke data needs a square dim, got {}",
                    d.dim
                )));
            }
            data::synth_strokes(side, d.classes, d.per_class, d.shift, d.spread, cfg.seed)?
        }
        DataSource::Idx => {
            let ds = data::load_idx(d.images.as_ref().unwrap(), d.labels.as_ref().unwrap())?;
            if ds.dim() != cfg.model.input_dim {
                return Err(Error::Config(format!(
                    "IDX images have {} pixels but model.input_dim = {}",
                    ds.dim(),
                    cfg.model.input_dim
                )));
            }
            if ds.classes() > cfg.model.classes {
                return Err(Error::Config(format!(
                    "IDX labels need {} classes",
                    ds.classes()
                )));
            }
            match d.subset {
                Some(n) => data::subset(&ds, n.min(ds.len()), cfg.seed)?,
                None => ds,
            }
        }
    };
    data::split(&full, d.test_size, cfg.seed)
}

/// SGD with heavy-ball momentum; weight decay is added to the gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(model: &Mlp, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: model.tensors().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// `v ← μv + g + wd·θ; θ ← θ - lr·v`
    pub fn step(&mut self, model: &mut Mlp, grads: &[Tensor], lr: f64) {
        for ((p, g), v) in model.tensors_mut().zip(grads).zip(&mut self.velocity) {
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                *pi -= lr * *vi;
            }
        }
    }
}

pub struct Trainer<'d> {
    pub cfg: RunConfig,
    train: &'d Dataset,
    model: Mlp,
    sgd: Sgd,
    adaptive: Option<AdaptiveLambda>,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: RunConfig, train: &'d Dataset) -> Result<Self> {
        cfg.validate()?;
        let mut mc = cfg.model.clone();
        mc.init_seed = cfg.seed;
        let model = Mlp::new(mc)?;
        Self::with_model(cfg, train, model)
    }

    pub fn with_model(cfg: RunConfig, train: &'d Dataset, model: Mlp) -> Result<Self> {
        if train.dim() != model.config.input_dim {
            return Err(Error::Config(format!(
                "data has {} features but the model expects {}",
                train.dim(),
                model.config.input_dim
            )));
        }
        let sgd = Sgd::new(&model, cfg.schedule.momentum, cfg.schedule.weight_decay);
        let adaptive = (cfg.regularizer.kind == RegularizerKind::ElleA)
            .then(|| AdaptiveLambda::new(cfg.regularizer.lambda, cfg.regularizer.gamma));
        Ok(Self {
            cfg,
            train,
            model,
            sgd,
            adaptive,
        })
    }

    pub fn model(&self) -> &Mlp {
        &self.model
    }

    pub fn into_model(self) -> Mlp {
        self.model
    }

    pub fn adaptive(&self) -> Option<&AdaptiveLambda> {
        self.adaptive.as_ref()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.schedule.batch_size)
    }

    /// Batches of one epoch in a seeded order.
    pub fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.train.len()).collect();
        idx.shuffle(&mut stream(
            self.cfg.seed,
            &[purpose::SHUFFLE, epoch as u64],
        ));
        idx.chunks(self.cfg.schedule.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// One optimization step on rows `idx`.
    pub fn step(
        &mut self,
        epoch: usize,
        step: usize,
        idx: &[usize],
        lr: f64,
    ) -> Result<StepRecord> {
        let wall = Instant::now();
        let b0 = thread_backward_time();
        let seed = self.cfg.seed;
        let eps = self.cfg.epsilon();
        let rspec = self.cfg.regularizer.clone();

        let x = self.train.inputs().gather_rows(idx);
        let y: Vec<usize> = idx.iter().map(|&i| self.train.labels()[i]).collect();
        let src = Classifier {
            model: &self.model,
            labels: &y,
        };
        let x_adv = self.cfg.attack.run(
            &src,
            &x,
            &mut stream(seed, &[purpose::ATTACK, epoch as u64, step as u64]),
        )?;
        let draw = LinearityDraw::sample(
            &x,
            eps,
            rspec.alpha_mode,
            rspec.clamp_samples,
            &mut stream(seed, &[purpose::REGULARIZER, epoch as u64, step as u64]),
        );

        let mut g = Graph::new();
        let bound = self.model.bind(&mut g);
        let onehot = g.constant(one_hot(&y, self.model.config.classes)?);
        let closs = ClassifierLoss {
            model: bound.clone(),
            onehot,
        };
        let xv = g.input(x_adv.clone());
        let per = closs.per_example(&mut g, xv)?;
        let loss = g.mean(per)?;

        let mut e_lin = None;
        let term = match rspec.kind {
            RegularizerKind::None => None,
            RegularizerKind::Elle | RegularizerKind::ElleA => {
                let (t, _) = reg::elle_term(&mut g, &closs, &draw)?;
                e_lin = Some(g.value(t).item());
                Some(t)
            }
            RegularizerKind::Elle2p => {
                Some(reg::elle_2p_term(&mut g, &closs, &draw.xa, &x_adv, &draw.alpha)?.0)
            }
            RegularizerKind::Elle5pt => Some(reg::elle_5pt_term(&mut g, &closs, &draw)?.0),
            RegularizerKind::Gradalign => Some(reg::gradalign_term(&mut g, &closs, &x, &draw.xa)?),
            RegularizerKind::LlrSq => Some(reg::llr_sq_term(&mut g, &closs, &x, &draw.xa)?.0),
            RegularizerKind::Cure => Some(reg::cure_term(&mut g, &closs, &x, &x_adv)?),
        };
        let reg_value = term.map(|t| g.value(t).item());
        let lambda = match (&mut self.adaptive, rspec.kind) {
            (_, RegularizerKind::None) => 0.0,
            (Some(a), _) => a.update(e_lin.expect("elle_a records E_lin")),
            (None, _) => rspec.lambda,
        };
        let objective = match term {
            Some(t) if lambda > 0.0 => {
                let s = g.scale(t, lambda)?;
                g.add(loss, s)?
            }
            _ => loss,
        };
        let loss_value = g.value(loss).item();
        let grads = g.backward(objective, &bound.params())?;
        drop(g);
        let compute = wall.elapsed();
        let backward = thread_backward_time().saturating_sub(b0);

        self.sgd.step(&mut self.model, &grads, lr);
        if self.model.tensors().any(|t| !t.all_finite()) {
            return Err(Error::Diverged {
                epoch,
                step,
                loss: f64::NAN,
            });
        }
        let forward = compute.saturating_sub(backward);
        Ok(StepRecord {
            epoch,
            step,
            lr,
            loss: loss_value,
            e_lin,
            reg_value,
            lambda,
            forward_ms: ms(forward),
            backward_ms: ms(backward),
            wall_ms: ms(wall.elapsed()),
        })
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Fraction of argmax-correct predictions, optionally on attacked inputs.
pub fn evaluate(model: &Mlp, ds: &Dataset, attack: Option<&AttackSpec>, seed: u64) -> Result<f64> {
    const CHUNK: usize = 512;
    let mut correct = 0usize;
    for (c, start) in (0..ds.len()).step_by(CHUNK).enumerate() {
        let end = (start + CHUNK).min(ds.len());
        let x = ds.inputs().slice_rows(start, end);
        let y = &ds.labels()[start..end];
        let x = match attack {
            Some(a) => a.run(
                &Classifier { model, labels: y },
                &x,
                &mut stream(seed, &[purpose::EVAL, c as u64]),
            )?,
            None => x,
        };
        correct += model
            .predict(&x)?
            .iter()
            .zip(y)
            .filter(|(p, t)| p == t)
            .count();
    }
    Ok(correct as f64 / ds.len().max(1) as f64)
}

/// Median; even lengths average the two middle values.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// First epoch index `e ≥ W` where the probe E_lin exceeds `spike ×` the
/// median of the previous `W` epochs and robust accuracy is at most
/// `(1 - drop) ×` its best value so far.
pub fn co_detect(history: &[EpochRecord], cfg: &CoDetectorConfig) -> Option<usize> {
    let w = cfg.window;
    let mut best = f64::NEG_INFINITY;
    for (e, rec) in history.iter().enumerate() {
        best = best.max(rec.robust_acc);
        if e < w {
            continue;
        }
        let prev: Vec<f64> = history[e - w..e].iter().map(|r| r.elin_probe).collect();
        let spike = rec.elin_probe > cfg.spike * median(&prev);
        let collapse = rec.robust_acc <= (1.0 - cfg.drop) * best;
        if spike && collapse {
            return Some(e);
        }
    }
    None
}

/// Everything observed during a run, in emission order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Step(StepRecord),
    Epoch(EpochRecord),
    Probe(probes::ProbeReport),
    Diverged {
        epoch: usize,
        step: usize,
        message: String,
    },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Mlp,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub co_epoch: Option<usize>,
}

/// Held-out accuracy and probes for one epoch.
pub fn epoch_metrics(
    cfg: &RunConfig,
    model: &Mlp,
    test: &Dataset,
    epoch: usize,
    train_loss: f64,
) -> Result<(EpochRecord, Vec<probes::ProbeReport>)> {
    let eval = match cfg.eval.eval_size {
        Some(n) if n < test.len() => test.slice(0, n),
        _ => test.clone(),
    };
    let clean_acc = evaluate(model, &eval, None, cfg.seed)?;
    let eval_attack = cfg.eval_attack();
    let robust_acc = evaluate(model, &eval, Some(&eval_attack), cfg.seed ^ epoch as u64)?;

    let probe = test.slice(0, cfg.eval.probe_size.min(test.len()));
    let src = Classifier {
        model,
        labels: probe.labels(),
    };
    let eps = cfg.epsilon();
    let pseed = cfg.seed;
    let clamp = cfg.regularizer.clamp_samples;
    let elin = probes::estimate_elin(
        &src,
        probe.inputs(),
        eps,
        cfg.eval.probe_samples,
        clamp,
        &mut stream(pseed, &[purpose::PROBE, epoch as u64, 0]),
        pseed,
    )?;
    let mis = probes::grad_misalignment(
        &src,
        probe.inputs(),
        eps,
        clamp,
        &mut stream(pseed, &[purpose::PROBE, epoch as u64, 1]),
        pseed,
    )?;
    let rec = EpochRecord {
        epoch,
        train_loss,
        clean_acc,
        robust_acc,
        elin_probe: elin.value,
        misalignment_probe: mis.value,
        co_flag: false,
    };
    Ok((rec, vec![elin, mis]))
}

/// Runs the configured schedule, reporting every record to `sink`.
pub fn train(
    cfg: &RunConfig,
    train_ds: &Dataset,
    test: &Dataset,
    sink: &mut dyn FnMut(&Event),
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(cfg.clone(), train_ds)?;
    let spe = t.steps_per_epoch();
    let mut steps = Vec::new();
    let mut epochs: Vec<EpochRecord> = Vec::new();
    let mut co_epoch = None;
    for epoch in 0..cfg.schedule.epochs {
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for (step, idx) in t.batches(epoch).iter().enumerate() {
            let lr = cfg.schedule.lr_at(epoch, step, spe);
            let rec = match t.step(epoch, step, idx, lr) {
                Ok(r) => r,
                Err(e @ (Error::Overflow { .. } | Error::Diverged { .. })) => {
                    sink(&Event::Diverged {
                        epoch,
                        step,
                        message: e.to_string(),
                    });
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        loss: f64::NAN,
                    });
                }
                Err(e) => return Err(e),
            };
            loss_sum += rec.loss * idx.len() as f64;
            count += idx.len();
            sink(&Event::Step(rec.clone()));
            steps.push(rec);
        }
        let every = cfg.eval.every;
        if every > 0 && ((epoch + 1) % every == 0 || epoch + 1 == cfg.schedule.epochs) {
            let (mut rec, reports) =
                epoch_metrics(cfg, t.model(), test, epoch, loss_sum / count as f64)?;
            for r in &reports {
                sink(&Event::Probe(r.clone()));
            }
            epochs.push(rec.clone());
            if co_epoch.is_none() {
                co_epoch = co_detect(&epochs, &cfg.eval.co).map(|i| epochs[i].epoch);
            }
            rec.co_flag = co_epoch.is_some();
            epochs.last_mut().unwrap().co_flag = rec.co_flag;
            sink(&Event::Epoch(rec));
        }
    }
    Ok(TrainOutcome {
        model: t.into_model(),
        steps,
        epochs,
        co_epoch,
    })
}

/// Median forward/backward/total milliseconds per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub method: String,
    pub steps: usize,
    pub forward_ms: f64,
    pub backward_ms: f64,
    pub total_ms: f64,
}

/// Times `steps` optimization steps (after `warmup` untimed ones) of `cfg`
/// on fixed batches at a constant learning rate.
pub fn time_steps(
    cfg: &RunConfig,
    train_ds: &Dataset,
    method: &str,
    warmup: usize,
    steps: usize,
) -> Result<TimingReport> {
    let mut t = Trainer::new(cfg.clone(), train_ds)?;
    let batches = t.batches(0);
    let lr = cfg.schedule.lr * 0.01;
    let mut recs = Vec::with_capacity(steps);
    for i in 0..warmup + steps {
        let idx = &batches[i % batches.len()];
        let r = t.step(0, i, idx, lr)?;
        if i >= warmup {
            recs.push(r);
        }
    }
    let col = |f: fn(&StepRecord) -> f64| median(&recs.iter().map(f).collect::<Vec<_>>());
    Ok(TimingReport {
        method: method.to_string(),
        steps,
        forward_ms: col(|r| r.forward_ms),
        backward_ms: col(|r| r.backward_ms),
        total_ms: col(|r| r.forward_ms + r.backward_ms),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(elin: &[f64], robust: &[f64]) -> Vec<EpochRecord> {
        elin.iter()
            .zip(robust)
            .enumerate()
            .map(|(epoch, (&e, &r))| EpochRecord {
                epoch,
                train_loss: 0.0,
                clean_acc: 1.0,
                robust_acc: r,
                elin_probe: e,
                misalignment_probe: 0.0,
                co_flag: false,
            })
            .collect()
    }

    #[test]
    fn detector_fires_on_joint_spike_and_collapse() {
        let mut e = vec![0.01; 10];
        e.push(5.0);
        let mut r = vec![0.4; 10];
        r.push(0.01);
        assert_eq!(
            co_detect(&hist(&e, &r), &CoDetectorConfig::default()),
            Some(10)
        );
    }

    #[test]
    fn detector_needs_both_conditions() {
        let flat = hist(
            &[0.01; 12],
            &(0..12).map(|i| 0.1 + 0.05 * i as f64).collect::<Vec<_>>(),
        );
        assert_eq!(co_detect(&flat, &CoDetectorConfig::default()), None);
        let mut e = vec![0.01; 10];
        e.push(5.0);
        assert_eq!(
            co_detect(&hist(&e, &[0.4; 11]), &CoDetectorConfig::default()),
            None
        );
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
