//! Toy trainer: Adam on synthetic batches, held-out evaluation.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamStore, Tensor};
use crate::error::{DiclError, Result};
use crate::featurenet::pad_to_multiple;
use crate::featurenet::{level_factor, SIZE_MULTIPLE};
use crate::flowdata::{evaluate, gen_synthetic, EvalResult, FlowSample, SyntheticKind};
use crate::flowhead::d_peak;
use crate::pyramidflow::{pool_ground_truth, record_multi_level_loss, FlowNet, LOSS_WEIGHTS};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros = || store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - T::lit(self.beta1.powi(t));
        let c2 = T::one() - T::lit(self.beta2.powi(t));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (((p, g), m), v) in store.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let cells = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((pi, &gi), mi), vi) in cells {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}

/// Samples stacked into `B x 3 x H x W` images, `B x 2 x H x W` flow and `B x 1 x H x W` mask.
pub fn stack_batch<T: Scalar>(batch: &[FlowSample<T>]) -> Result<[Tensor<T>; 4]> {
    if batch.is_empty() {
        return Err(DiclError::Empty("empty batch".into()));
    }
    let pick = |f: fn(&FlowSample<T>) -> &Tensor<T>| Tensor::stack(&batch.iter().map(f).collect::<Vec<_>>());
    Ok([pick(|s| &s.img1)?, pick(|s| &s.img2)?, pick(|s| &s.gt_flow)?, pick(|s| &s.valid)?])
}

/// One Adam step on the multi-level loss; returns the loss before the update.
pub fn train_step<T: Scalar>(
    model: &mut FlowNet<T>,
    batch: &[FlowSample<T>],
    opt: &mut Adam<T>,
    weights: &[f64],
) -> Result<f64> {
    let [img1, img2, gt, valid] = stack_batch(batch)?;
    let mut g = Graph::bind(&model.store, true, true);
    let out = model.record(&mut g, &img1, &img2)?;
    let loss = record_multi_level_loss(&mut g, &out.flows, &gt, &valid, weights)?;
    let value = g.value(loss).data()[0].as_f64();
    let step = opt.steps() as usize + 1;
    if !value.is_finite() {
        return Err(DiclError::Diverged { step, detail: format!("loss is {value}") });
    }
    g.backward(loss)?;
    let grads = g.param_grads();
    if let Some(i) = grads.iter().position(|t| !t.is_finite()) {
        return Err(DiclError::Diverged {
            step,
            detail: format!("non-finite gradient for {}", model.store.names()[i]),
        });
    }
    model.store.set_bn_states(g.bn_states())?;
    drop(g);
    opt.update(&mut model.store, &grads);
    Ok(value)
}

/// Everything that determines a training run besides the model layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub size: (usize, usize),
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub max_mag: f64,
    pub kinds: Vec<SyntheticKind>,
    pub loss_weights: Vec<f64>,
    pub eval_every: usize,
    pub eval_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: (64, 64),
            iters: 400,
            batch: 2,
            lr: 1e-3,
            max_mag: 8.0,
            kinds: vec![SyntheticKind::Translation, SyntheticKind::Smooth],
            loss_weights: LOSS_WEIGHTS.to_vec(),
            eval_every: 100,
            eval_count: 8,
        }
    }
}

/// Held-out samples are drawn from a seed range disjoint from training.
const HELDOUT_SEED_BASE: u64 = 1 << 40;

impl TrainConfig {
    fn sample_seed(&self, step: usize, i: usize) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((step * self.batch + i) as u64)
    }

    pub fn training_batch<T: Scalar>(&self, step: usize) -> Result<Vec<FlowSample<T>>> {
        (0..self.batch)
            .map(|i| {
                let kind = self.kinds[(step * self.batch + i) % self.kinds.len()];
                gen_synthetic(self.sample_seed(step, i), kind, self.size, self.max_mag)
            })
            .collect()
    }

    pub fn heldout<T: Scalar>(&self) -> Result<Vec<FlowSample<T>>> {
        (0..self.eval_count)
            .map(|i| {
                let kind = self.kinds[i % self.kinds.len()];
                gen_synthetic(HELDOUT_SEED_BASE + self.seed * 1000 + i as u64, kind, self.size, self.max_mag)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DiclError::Config(m));
        if self.loss_weights.len() != 5 {
            return bad(format!("expected 5 loss weights, got {}", self.loss_weights.len()));
        }
        if self.batch == 0 || self.kinds.is_empty() {
            return bad("batch size and sample kinds must be non-empty".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be finite and non-negative, got {}", self.lr));
        }
        if self.size.0 == 0 || self.size.1 == 0 {
            return bad("image size must be positive".into());
        }
        Ok(())
    }
}

/// Held-out scores of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct HeldoutReport {
    pub per_sample: Vec<EvalResult>,
    pub epe: f64,
    pub fl_all: f64,
    /// Finest-level d_peak over pixels whose whole block is valid.
    pub dpeak: Vec<f64>,
}

pub fn evaluate_model<T: Scalar>(model: &FlowNet<T>, samples: &[FlowSample<T>]) -> Result<HeldoutReport> {
    if samples.is_empty() {
        return Err(DiclError::Empty("no held-out samples".into()));
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut dpeak = Vec::new();
    for s in samples {
        let (p1, rec) = pad_to_multiple(&s.img1, SIZE_MULTIPLE)?;
        let (p2, _) = pad_to_multiple(&s.img2, SIZE_MULTIPLE)?;
        let out = model.forward(&p1, &p2)?;
        let pred = rec.crop(&out.full_res_flow.flow)?;
        per_sample.push(evaluate(&pred, &s.gt_flow, &s.valid)?);

        let (pv, _) = pad_to_multiple(&s.valid, SIZE_MULTIPLE)?;
        let (pg, _) = pad_to_multiple(&s.gt_flow, SIZE_MULTIPLE)?;
        let (_, mask) = pool_ground_truth(&pg.unsqueeze0(), &pv.unsqueeze0(), level_factor(0))?;
        let d = d_peak(&out.probs[0]);
        dpeak.extend(d.data().iter().zip(mask.data()).filter(|(_, &m)| m != T::zero()).map(|(v, _)| v.as_f64()));
    }
    let n = per_sample.len() as f64;
    Ok(HeldoutReport {
        epe: per_sample.iter().map(|r| r.epe).sum::<f64>() / n,
        fl_all: per_sample.iter().map(|r| r.fl_all).sum::<f64>() / n,
        per_sample,
        dpeak,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport<T> {
    /// `(step, loss)` per iteration, 1-based.
    pub losses: Vec<(usize, f64)>,
    /// `(step, held-out EPE)` at step 0, every `eval_every` steps and at the end.
    pub evals: Vec<(usize, f64)>,
    pub best: Option<(usize, f64, ParamStore<T>)>,
}

/// Runs `cfg.iters` steps. `on_step` sees `(step, loss)` after each update.
/// A diverged step stops training and returns the error together with the last good parameters.
pub fn train<T: Scalar>(
    model: &mut FlowNet<T>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> std::result::Result<TrainReport<T>, (DiclError, Box<ParamStore<T>>)> {
    let last_good = |m: &FlowNet<T>| Box::new(m.store.clone());
    cfg.validate().map_err(|e| (e, last_good(model)))?;
    let heldout = cfg.heldout::<T>().map_err(|e| (e, last_good(model)))?;
    let mut opt = Adam::new(&model.store, cfg.lr);
    let mut report = TrainReport { losses: Vec::with_capacity(cfg.iters), evals: Vec::new(), best: None };
    let record_eval = |model: &FlowNet<T>, step: usize, report: &mut TrainReport<T>| -> Result<()> {
        if heldout.is_empty() {
            return Ok(());
        }
        let epe = evaluate_model(model, &heldout)?.epe;
        report.evals.push((step, epe));
        if report.best.as_ref().is_none_or(|b| epe < b.1) {
            report.best = Some((step, epe, model.store.clone()));
        }
        Ok(())
    };
    record_eval(model, 0, &mut report).map_err(|e| (e, last_good(model)))?;
    for step in 1..=cfg.iters {
        let snapshot = last_good(model);
        let batch = cfg.training_batch::<T>(step - 1).map_err(|e| (e, snapshot.clone()))?;
        let loss = train_step(model, &batch, &mut opt, &cfg.loss_weights).map_err(|e| (e, snapshot))?;
        report.losses.push((step, loss));
        on_step(step, loss);
        let due = cfg.eval_every > 0 && step % cfg.eval_every == 0;
        if due || step == cfg.iters {
            if report.evals.last().is_some_and(|e| e.0 == step) {
                continue;
            }
            record_eval(model, step, &mut report).map_err(|e| (e, last_good(model)))?;
        }
    }
    Ok(report)
}
