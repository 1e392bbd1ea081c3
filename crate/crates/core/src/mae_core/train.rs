use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};

use super::model::{mim_loss, MaeModel};
use super::optim::AdamW;

/// One image's patch matrix and the indices hidden from the encoder.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub patches: Tensor,
    pub masked: Vec<usize>,
}

/// Batch means of the loss and of any extra scalars a step reports.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub extras: Vec<f64>,
}

/// Runs `build` for every item on its own tape (in parallel) and returns the
/// batch-mean loss, extras and per-parameter gradients.
///
/// `build` returns the scalar loss plus extra scalars to average. Gradients
/// are summed in item order, so the result is independent of scheduling.
pub fn batch_gradients<T, F>(store: &ParamStore, items: &[T], build: F) -> Result<(BatchStats, Vec<Vec<f64>>)>
where
    T: Sync,
    F: Fn(&mut Tape, &Bound, &T) -> Result<(Var, Vec<Var>)> + Sync,
{
    if items.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let per_item = items
        .par_iter()
        .map(|item| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let (loss, extras) = build(&mut tape, &bound, item)?;
            tape.backward(loss)?;
            let extras: Vec<f64> = extras.iter().map(|&v| tape.scalar(v)).collect();
            Ok((tape.scalar(loss), extras, store.extract_grads(&tape, &bound)))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = items.len() as f64;
    let mut loss = 0.0;
    let mut extras = vec![0.0; per_item[0].1.len()];
    let mut grads: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    for (l, e, g) in &per_item {
        loss += l;
        for (acc, v) in extras.iter_mut().zip(e) {
            *acc += v;
        }
        for (acc, gi) in grads.iter_mut().zip(g) {
            for (a, b) in acc.iter_mut().zip(gi) {
                *a += b;
            }
        }
    }
    for g in &mut grads {
        g.iter_mut().for_each(|v| *v /= n);
    }
    extras.iter_mut().for_each(|v| *v /= n);
    Ok((BatchStats { loss: loss / n, extras }, grads))
}

/// One optimizer update from averaged gradients, aborting with per-parameter
/// gradient norms when the loss or any gradient is not finite.
pub fn apply_gradients(store: &mut ParamStore, opt: &mut AdamW, grads: &[Vec<f64>], loss: f64, lr: f64) -> Result<()> {
    let norms: Vec<f64> = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    if !loss.is_finite() || norms.iter().any(|v| !v.is_finite()) {
        let report = store
            .iter()
            .zip(&norms)
            .map(|((name, _), v)| format!("{name}={v:.3e}"))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::NumericAbort {
            step: opt.step + 1,
            lr,
            grad_norms: format!("loss={loss}; {report}"),
        });
    }
    store.zero_grads();
    for (t, g) in store.tensors_mut().zip(grads) {
        if t.requires_grad {
            t.accumulate_grad(g);
        }
    }
    opt.update(store, lr);
    Ok(())
}

fn masked_pixel_loss(model: &MaeModel, tape: &mut Tape, bound: &Bound, item: &TrainItem) -> Result<Var> {
    let x = tape.leaf(&item.patches);
    let out = model.forward(tape, bound, x, &item.masked)?;
    mim_loss(tape, out.predicted, x, &item.masked)
}

/// Batch-mean masked-pixel loss without touching any parameter.
pub fn evaluate_mim(model: &MaeModel, store: &ParamStore, batch: &[TrainItem]) -> Result<f64> {
    let losses = batch
        .par_iter()
        .map(|item| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let loss = masked_pixel_loss(model, &mut tape, &bound, item)?;
            Ok(tape.scalar(loss))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Forward, backward and one optimizer update over `batch`; returns the
/// pre-update batch-mean loss.
pub fn train_step(
    model: &MaeModel,
    store: &mut ParamStore,
    opt: &mut AdamW,
    batch: &[TrainItem],
    lr: f64,
) -> Result<f64> {
    let (stats, grads) = batch_gradients(store, batch, |tape, bound, item| {
        Ok((masked_pixel_loss(model, tape, bound, item)?, Vec::new()))
    })?;
    apply_gradients(store, opt, &grads, stats.loss, lr)?;
    Ok(stats.loss)
}
