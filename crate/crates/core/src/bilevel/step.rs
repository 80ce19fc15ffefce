//! The alternating update steps: weight descent on the training loss and
//! first/second-order architecture descent on the validation loss.

use super::{Adam, SupernetTask};
use crate::error::{Error, Result};
use crate::nn::{Fwd, Grads, Mode, ParamId, ParamStore};
use crate::tensor::Scalar;

/// Mean loss and mean gradients over a batch of items, one tape per item.
pub fn batch_loss_and_grads<T: Scalar, K: SupernetTask<T>>(
    task: &K,
    store: &mut ParamStore<T>,
    items: &[&K::Item],
) -> Result<(f64, Grads<T>)> {
    if items.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut total = Grads::zeros_like(store);
    let mut loss_sum = 0.0f64;
    for item in items {
        let mut f = Fwd::new(store, Mode::Train);
        let loss = task.loss(&mut f, item)?;
        loss_sum += f.tape.value(loss).item()?.as_f64();
        let g = f.backward(loss)?;
        total.accumulate(&g)?;
    }
    total.scale(T::from_f64(1.0 / items.len() as f64));
    Ok((loss_sum / items.len() as f64, total))
}

/// One Adam step on the network weights against the training loss.
pub fn weight_step<T: Scalar, K: SupernetTask<T>>(
    task: &K,
    store: &mut ParamStore<T>,
    batch: &[&K::Item],
    adam_w: &mut Adam<T>,
) -> Result<f64> {
    let (loss, grads) = batch_loss_and_grads(task, store, batch)?;
    adam_w.step(store, &grads)?;
    Ok(loss)
}

/// Outcome of one architecture step.
pub struct ArchStepReport<T: Scalar> {
    pub val_loss: f64,
    /// The hypergradient handed to the optimizer (alpha entries only).
    pub alpha_grads: Grads<T>,
    /// Second-order step degraded to first order (zero validation
    /// gradient on the virtual weights).
    pub fell_back: bool,
}

/// First-order update: descend the validation loss at the current weights.
pub fn first_order_arch_step<T: Scalar, K: SupernetTask<T>>(
    task: &K,
    store: &mut ParamStore<T>,
    val_batch: &[&K::Item],
    adam_alpha: &mut Adam<T>,
) -> Result<ArchStepReport<T>> {
    let (val_loss, grads) = batch_loss_and_grads(task, store, val_batch)?;
    adam_alpha.step(store, &grads)?;
    Ok(ArchStepReport { val_loss, alpha_grads: grads, fell_back: false })
}

fn grad_norm_over<T: Scalar>(grads: &Grads<T>, ids: &[ParamId]) -> f64 {
    let mut sq = 0.0f64;
    for id in ids {
        if let Some(g) = grads.get(*id) {
            for v in g.as_slice() {
                let x = v.as_f64();
                sq += x * x;
            }
        }
    }
    sq.sqrt()
}

fn axpy_params<T: Scalar>(store: &mut ParamStore<T>, ids: &[ParamId], grads: &Grads<T>, c: f64) {
    let c = T::from_f64(c);
    for id in ids {
        if let Some(g) = grads.get(*id) {
            store.value_mut(*id).add_scaled(g, c).expect("gradient shapes");
        }
    }
}

/// Second-order update: descend the validation loss at the virtual weights
/// w' = w - xi * grad_w(train loss), with the implicit curvature term
/// estimated by symmetric finite differences on w. The entry weights are
/// restored bit-exactly before the alpha update is applied.
#[allow(clippy::too_many_arguments)]
pub fn second_order_arch_step<T: Scalar, K: SupernetTask<T>>(
    task: &K,
    store: &mut ParamStore<T>,
    train_batch: &[&K::Item],
    val_batch: &[&K::Item],
    xi: f64,
    fd_scale: f64,
    weight_ids: &[ParamId],
    adam_alpha: &mut Adam<T>,
) -> Result<ArchStepReport<T>> {
    if xi == 0.0 {
        return first_order_arch_step(task, store, val_batch, adam_alpha);
    }
    let saved_params = store.snapshot_values();
    let saved_buffers = store.snapshot_buffers();

    // virtual step: w' = w - xi * grad_w L_train(w, alpha)
    let (_, g_train) = batch_loss_and_grads(task, store, train_batch)?;
    axpy_params(store, weight_ids, &g_train, -xi);

    // validation pass at w': yields both grad_alpha and grad_w' in one sweep
    let (val_loss, g_val) = batch_loss_and_grads(task, store, val_batch)?;
    let v_norm = grad_norm_over(&g_val, weight_ids);
    if v_norm == 0.0 {
        store.restore_values(&saved_params);
        store.restore_buffers(&saved_buffers);
        let mut report = first_order_arch_step(task, store, val_batch, adam_alpha)?;
        report.fell_back = true;
        return Ok(report);
    }
    let r = fd_scale / v_norm;

    // symmetric perturbation of the *original* weights along grad_w' L_val
    store.restore_values(&saved_params);
    store.restore_buffers(&saved_buffers);
    axpy_params(store, weight_ids, &g_val, r);
    let (_, g_plus) = batch_loss_and_grads(task, store, train_batch)?;

    store.restore_values(&saved_params);
    store.restore_buffers(&saved_buffers);
    axpy_params(store, weight_ids, &g_val, -r);
    let (_, g_minus) = batch_loss_and_grads(task, store, train_batch)?;

    store.restore_values(&saved_params);
    store.restore_buffers(&saved_buffers);

    // total = grad_alpha L_val(w') - xi/(2r) * (grad_alpha L_train(w+) - grad_alpha L_train(w-))
    let mut total = Grads::zeros_like(store);
    let scale = T::from_f64(-xi / (2.0 * r));
    for id in adam_alpha.ids().to_vec() {
        let direct = g_val.get(id);
        let plus = g_plus.get(id);
        let minus = g_minus.get(id);
        let shape = store.value(id).shape().to_vec();
        let mut acc = crate::tensor::Tensor::<T>::zeros(&shape);
        if let Some(d) = direct {
            acc.add_assign(d)?;
        }
        if let Some(p) = plus {
            acc.add_scaled(p, scale)?;
        }
        if let Some(m) = minus {
            acc.add_scaled(m, T::zero() - scale)?;
        }
        total.entries[id.0] = Some(acc);
    }
    adam_alpha.step(store, &total)?;
    Ok(ArchStepReport { val_loss, alpha_grads: total, fell_back: false })
}
