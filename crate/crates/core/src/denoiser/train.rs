//! Training loop: decoupled-weight-decay adaptive moments (AdamW) over
//! shuffled mini-batches, fixed-noise validation each eval interval, and
//! best-validation snapshot selection.

use super::{grad_on, loss_on, prepare_batch, DenoiserParams, ParamSet, TrainItem};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Validate (and consider snapshotting) every this many epochs.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the lowest recorded validation loss.
    pub params: DenoiserParams,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

struct AdamW {
    m: ParamSet,
    v: ParamSet,
    step: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamW {
    fn new(shape: &DenoiserParams) -> Self {
        AdamW {
            m: ParamSet::zeros(&shape.cfg),
            v: ParamSet::zeros(&shape.cfg),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn update(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64, wd: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((_, p), (_, g)), ((_, m), (_, v))) in params
            .arrays_mut()
            .into_iter()
            .zip(grads.arrays())
            .zip(self.m.arrays_mut().into_iter().zip(self.v.arrays_mut()))
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + wd * p[i]);
            }
        }
    }
}

/// Trains and returns the best-validation snapshot plus per-epoch losses.
///
/// Validation noise is drawn once up front so epochs are comparable; training
/// noise is redrawn per batch. Aborts with the epoch index if the loss goes
/// non-finite.
pub fn train(
    params: DenoiserParams,
    train_items: &[TrainItem],
    val_items: &[TrainItem],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_items.is_empty() || val_items.is_empty() {
        return Err(Error::Input(
            "training needs non-empty train and validation splits".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5157_5641_4c5f_5251);
    let val_refs: Vec<&TrainItem> = val_items.iter().collect();
    let val_batch = prepare_batch(&val_refs, sched, &mut val_rng)?;

    let mut params = params;
    let mut opt = AdamW::new(&params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, DenoiserParams)> = None;

    let mut order: Vec<usize> = (0..train_items.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&TrainItem> = chunk.iter().map(|&i| &train_items[i]).collect();
            let batch = prepare_batch(&items, sched, &mut rng)?;
            let (loss, grads) = grad_on(&params, &batch);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            opt.update(&mut params.p, &grads, cfg.learning_rate, cfg.weight_decay);
            epoch_loss += loss;
            batches += 1;
        }
        if !params.p.all_finite() {
            return Err(Error::Divergence { epoch });
        }
        let train_loss = epoch_loss / batches as f64;

        let val_loss = if epoch % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            let vl = loss_on(&params, &val_batch);
            if !vl.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let better = best.as_ref().map_or(true, |(b, _, _)| vl < *b);
            if better {
                best = Some((vl, epoch, params.clone()));
            }
            Some(vl)
        } else {
            None
        };

        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
    }

    let (best_val_loss, best_epoch, best_params) = best.expect("at least one validation pass");
    Ok(TrainOutcome {
        params: best_params,
        history,
        best_epoch,
        best_val_loss,
    })
}
