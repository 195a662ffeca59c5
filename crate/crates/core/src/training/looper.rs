//! The optimization loop shared by every training regime.

use crate::error::{Result, WrdError};
use crate::numerics::{schedule_rate, Bound, Graph, LrSchedule, OptimizerState, ParamSet, Rng, Var};

use super::TrainConfig;

/// A model trained by [`run`]. `bind` and `param_sets_mut` must list the
/// trainable sets in the same order.
pub(crate) trait Trainable: Clone {
    fn bind(&self, g: &mut Graph) -> Vec<Bound>;
    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet>;
    fn batch_loss(&self, g: &mut Graph, bounds: &[Bound], batch: &[usize], rng: &mut Rng) -> Result<Var>;
    /// Validation metrics; the last entry drives model selection.
    fn evaluate(&self) -> Result<Vec<f64>>;
    fn train_len(&self) -> usize;
    /// Token count of training item `k`, used to group similar lengths.
    fn item_len(&self, k: usize) -> usize;
    fn model_dim(&self) -> usize;
}

/// Sentences sorted together before being cut into batches.
const POOL_BATCHES: usize = 32;

/// One epoch of batches: shuffle, sort by length inside pools of
/// `POOL_BATCHES` batches, cut, then shuffle the batch order.
fn epoch_batches<M: Trainable>(model: &M, batch_size: usize, root: &Rng, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..model.train_len()).collect();
    root.derive("epoch", epoch).shuffle(&mut order);
    let mut batches = Vec::new();
    for pool in order.chunks_mut(batch_size * POOL_BATCHES) {
        pool.sort_by_key(|&k| model.item_len(k));
        batches.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    root.derive("batch-order", epoch).shuffle(&mut batches);
    batches
}

pub(crate) struct LoopOutcome<M> {
    pub best: M,
    pub best_step: usize,
    pub last: M,
    /// `(step, mean train loss, metrics)` at every validation point.
    pub curve: Vec<(usize, f64, Vec<f64>)>,
}

pub(crate) fn run<M: Trainable>(mut model: M, cfg: &TrainConfig) -> Result<LoopOutcome<M>> {
    cfg.validate()?;
    let n = model.train_len();
    if n == 0 {
        return Err(WrdError::Input("empty training set".into()));
    }
    let root = Rng::new(cfg.seed);
    let schedule = LrSchedule::new(model.model_dim(), cfg.warmup_steps).with_scale(cfg.lr_scale);
    let mut epoch = 0u64;
    let mut batches = epoch_batches(&model, cfg.batch_size, &root, epoch).into_iter();

    let mut states: Vec<OptimizerState> = Vec::new();
    let mut curve = Vec::new();
    let mut best: Option<(M, usize, f64)> = None;
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);

    for step in 1..=cfg.max_steps {
        let batch = match batches.next() {
            Some(b) => b,
            None => {
                epoch += 1;
                batches = epoch_batches(&model, cfg.batch_size, &root, epoch).into_iter();
                batches.next().expect("nonempty training set")
            }
        };
        let batch = batch.as_slice();

        let mut g = Graph::new();
        let bounds = model.bind(&mut g);
        let mut rng = root.derive("step", step as u64);
        let loss = model.batch_loss(&mut g, &bounds, batch, &mut rng)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(WrdError::NonFiniteLoss {
                step,
                batch: batch.to_vec(),
            });
        }
        g.backward(loss)?;
        let lr = schedule_rate(&schedule, step as u64)?;
        let sets = model.param_sets_mut();
        states.resize_with(sets.len(), OptimizerState::default);
        for ((set, bound), state) in sets.into_iter().zip(&bounds).zip(&mut states) {
            set.apply_adam(&g, bound, state, lr)?;
        }
        loss_sum += value;
        loss_count += 1;

        if step % cfg.eval_interval == 0 || step == cfg.max_steps {
            let metrics = model.evaluate()?;
            let sel = *metrics.last().expect("at least one metric");
            curve.push((step, loss_sum / loss_count as f64, metrics));
            loss_sum = 0.0;
            loss_count = 0;
            if best.as_ref().is_none_or(|b| sel > b.2) {
                best = Some((model.clone(), step, sel));
            }
            if cfg.stop_at.is_some_and(|t| sel >= t) {
                break;
            }
        }
    }
    let (best, best_step, _) = best.expect("the last step always evaluates");
    Ok(LoopOutcome {
        best,
        best_step,
        last: model,
        curve,
    })
}
