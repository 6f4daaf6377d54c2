//! Training loop: recommendation phase, conversation phase (or joint), with
//! seeded shuffling, gradient clipping and AdamW.

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StepError};
use crate::numerics::Tape;
use crate::rng::derive_rng;

use super::model::{ComponentValues, Heads, Model, PreparedSample, QUERY_BANK};
use super::params::{adamw_step, clip_global_norm, collect_grads, AdamState, AdamWConfig};

/// One logged value: `epoch` counts every epoch run so far, across phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub component: String,
    pub value: f64,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub rec_epochs_done: usize,
    pub conv_epochs_done: usize,
    pub adam: AdamState,
    pub curves: Vec<CurvePoint>,
}

impl TrainState {
    pub fn new(model: &Model) -> Self {
        TrainState {
            rec_epochs_done: 0,
            conv_epochs_done: 0,
            adam: AdamState::new(&model.params),
            curves: Vec::new(),
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.rec_epochs_done + self.conv_epochs_done
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Rec,
    Conv,
    Joint,
}

impl Phase {
    fn tag(self) -> &'static str {
        match self {
            Phase::Rec => "rec",
            Phase::Conv => "conv",
            Phase::Joint => "joint",
        }
    }
}

#[derive(Default)]
struct EpochSums {
    batches: usize,
    ce: f64,
    margin: f64,
    triplet: f64,
    aux: f64,
    cl: f64,
    rec: (f64, usize),
    conv: (f64, usize),
    total: f64,
}

impl EpochSums {
    fn add(&mut self, v: &ComponentValues) {
        self.batches += 1;
        self.ce += v.ce;
        self.margin += v.margin;
        self.triplet += v.triplet;
        self.aux += v.aux;
        self.cl += v.cl;
        self.total += v.total;
        if let Some(r) = v.rec {
            self.rec.0 += r;
            self.rec.1 += 1;
        }
        if let Some(c) = v.conv {
            self.conv.0 += c;
            self.conv.1 += 1;
        }
    }

    fn points(&self, epoch: usize) -> Vec<CurvePoint> {
        let n = self.batches.max(1) as f64;
        let mut out: Vec<(&str, f64)> = vec![
            ("ce", self.ce / n),
            ("margin", self.margin / n),
            ("triplet", self.triplet / n),
            ("aux", self.aux / n),
            ("cl", self.cl / n),
        ];
        if self.rec.1 > 0 {
            out.push(("rec", self.rec.0 / self.rec.1 as f64));
        }
        if self.conv.1 > 0 {
            out.push(("conv", self.conv.0 / self.conv.1 as f64));
        }
        out.push(("total", self.total / n));
        out.into_iter()
            .map(|(c, v)| CurvePoint {
                epoch,
                component: c.to_string(),
                value: v,
            })
            .collect()
    }
}

fn run_epoch(
    model: &mut Model,
    state: &mut TrainState,
    data: &[PreparedSample],
    phase: Phase,
    phase_epoch: usize,
) -> Result<()> {
    let cfg = model.config.clone();
    let (heads, lr, batch_size, curriculum_epoch) = match phase {
        Phase::Rec => (Heads::Rec, cfg.optim.lr_pretrain, cfg.optim.batch_size_rec, phase_epoch),
        // The curriculum belongs to the first phase; hold its final weights.
        Phase::Conv => (Heads::Conv, cfg.optim.lr_finetune, cfg.optim.batch_size_conv, cfg.curriculum.en),
        Phase::Joint => (Heads::Both, cfg.optim.lr_pretrain, cfg.optim.batch_size_rec, phase_epoch),
    };
    let adam = AdamWConfig {
        lr,
        beta1: cfg.optim.beta1,
        beta2: cfg.optim.beta2,
        eps: cfg.optim.eps,
        weight_decay: cfg.optim.weight_decay,
    };
    let frozen: Vec<&str> = if phase == Phase::Conv && cfg.optim.freeze_queries_in_finetune {
        vec![QUERY_BANK]
    } else {
        vec![]
    };

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = derive_rng(cfg.seed, &format!("shuffle-{}-{phase_epoch}", phase.tag()));
    order.shuffle(&mut rng);

    let global_epoch = state.epochs_done();
    let mut sums = EpochSums::default();
    for (step, chunk) in order.chunks(batch_size).enumerate() {
        let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &data[i]).collect();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, &frozen);
        let out = model.forward_batch(&mut tape, &bound, &batch, curriculum_epoch as i64, heads)?;
        if !out.values.total.is_finite() {
            return Err(StepError::Numerical(format!(
                "loss is {} at epoch {global_epoch} step {step}",
                out.values.total
            )));
        }
        tape.backward(out.total)?;
        let mut grads = collect_grads(&tape, &bound);
        clip_global_norm(&mut grads, cfg.optim.grad_clip);
        adamw_step(&mut model.params, &mut state.adam, &grads, &adam)
            .map_err(|e| StepError::Numerical(format!("epoch {global_epoch} step {step}: {e}")))?;
        sums.add(&out.values);
    }
    let points = sums.points(global_epoch);
    info!(
        "epoch {global_epoch} ({} {phase_epoch}): {}",
        phase.tag(),
        points
            .iter()
            .map(|p| format!("{}={:.4}", p.component, p.value))
            .collect::<Vec<_>>()
            .join(" ")
    );
    state.curves.extend(points);
    Ok(())
}

/// Runs the remaining epochs of the schedule. `max_epochs` caps how many
/// run in this call, so a run can be split across checkpoints.
pub fn train(
    model: &mut Model,
    state: &mut TrainState,
    train_data: &[PreparedSample],
    max_epochs: Option<usize>,
) -> Result<()> {
    let en = model.config.curriculum.en;
    let conv_epochs = model.config.conv_epochs();
    let joint = model.config.optim.joint;
    let rec_data: Vec<PreparedSample> = train_data
        .iter()
        .filter(|s| !s.gold_slots.is_empty())
        .cloned()
        .collect();
    let mut budget = max_epochs.unwrap_or(usize::MAX);
    while budget > 0 {
        if state.rec_epochs_done < en {
            let (phase, data) = if joint {
                (Phase::Joint, train_data)
            } else {
                (Phase::Rec, rec_data.as_slice())
            };
            if data.is_empty() {
                return Err(StepError::Validation("no training samples with gold items".into()));
            }
            let e = state.rec_epochs_done;
            run_epoch(model, state, data, phase, e)?;
            state.rec_epochs_done += 1;
        } else if !joint && state.conv_epochs_done < conv_epochs {
            let e = state.conv_epochs_done;
            run_epoch(model, state, train_data, Phase::Conv, e)?;
            state.conv_epochs_done += 1;
        } else {
            break;
        }
        budget -= 1;
    }
    Ok(())
}
