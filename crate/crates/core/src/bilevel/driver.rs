//! The search loop: strict alternation of one weight step and one
//! architecture step per batch.

use std::path::Path;

use rand::seq::SliceRandom;

use super::{
    first_order_arch_step, second_order_arch_step, weight_step, Adam, Order, SearchConfig,
    SupernetTask, ALPHA_BETAS, ALPHA_LR, ALPHA_WEIGHT_DECAY, DIVERGENCE_LIMIT, WEIGHT_BETAS,
    WEIGHT_DECAY, WEIGHT_LR,
};
use crate::checkpoint::{capture_state, Checkpoint};
use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::rng::substream;
use crate::search::{ArchParams, CellKind, Genotype};
use crate::tensor::Scalar;

/// One logged step of the search.
#[derive(Debug, Clone, Copy)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub l_train: f64,
    pub l_val: f64,
}

pub struct SearchOutcome {
    pub genotype: Genotype,
    pub log: Vec<LogRow>,
    pub steps: usize,
}

fn check_divergence(loss: f64, what: &str) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(Error::Diverged(format!("{what} loss {loss}")));
    }
    Ok(())
}

/// Run the alternating optimization and discretize the final mixing
/// weights. Emits one checkpoint per epoch into `ckpt_dir` when given.
#[allow(clippy::too_many_arguments)]
pub fn search_loop<T: Scalar, K: SupernetTask<T>>(
    task: &K,
    store: &mut ParamStore<T>,
    train_items: &[K::Item],
    val_items: &[K::Item],
    cfg: &SearchConfig,
    arch: ArchParams,
    genotype_channels: usize,
    genotype_blocks: Vec<(String, Vec<CellKind>)>,
    ckpt_dir: Option<&Path>,
) -> Result<SearchOutcome> {
    if train_items.is_empty() || val_items.is_empty() {
        return Err(Error::invalid("search needs nonempty train and validation sets"));
    }
    let mut adam_w = Adam::new(store, ParamKind::Weight, WEIGHT_LR, WEIGHT_BETAS, WEIGHT_DECAY);
    let mut adam_a = Adam::new(store, ParamKind::Alpha, ALPHA_LR, ALPHA_BETAS, ALPHA_WEIGHT_DECAY);
    let weight_ids = adam_w.ids().to_vec();
    let xi = match cfg.order {
        Order::First => 0.0,
        Order::Second => cfg.xi,
    };

    let mut train_rng = substream(cfg.seed, "search/train-batches");
    let mut val_rng = substream(cfg.seed, "search/val-batches");
    let mut val_queue: Vec<usize> = Vec::new();
    let mut log = Vec::new();
    let mut steps = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut train_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let train_batch: Vec<&K::Item> = chunk.iter().map(|&i| &train_items[i]).collect();
            // draw a validation batch of the same size, reshuffling the
            // queue as it empties
            let mut val_batch_idx = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size.min(val_items.len()) {
                if val_queue.is_empty() {
                    val_queue = (0..val_items.len()).collect();
                    val_queue.shuffle(&mut val_rng);
                }
                val_batch_idx.push(val_queue.pop().expect("refilled"));
            }
            let val_batch: Vec<&K::Item> = val_batch_idx.iter().map(|&i| &val_items[i]).collect();

            let l_train = weight_step(task, store, &train_batch, &mut adam_w)?;
            check_divergence(l_train, "training")?;
            let report = if xi == 0.0 {
                first_order_arch_step(task, store, &val_batch, &mut adam_a)?
            } else {
                second_order_arch_step(
                    task,
                    store,
                    &train_batch,
                    &val_batch,
                    xi,
                    cfg.fd_scale,
                    &weight_ids,
                    &mut adam_a,
                )?
            };
            check_divergence(report.val_loss, "validation")?;
            steps += 1;
            log.push(LogRow { epoch, step: steps, l_train, l_val: report.val_loss });
        }
        if let Some(dir) = ckpt_dir {
            let mut ck = Checkpoint {
                seed: cfg.seed,
                step: steps as u64,
                ..Default::default()
            };
            ck.set_meta("phase", "search");
            ck.set_meta("epoch", epoch.to_string());
            ck.arrays = capture_state(store, &[("w", &adam_w), ("alpha", &adam_a)]);
            ck.save(&dir.join(format!("ckpt_epoch{epoch}.bin")))?;
        }
    }

    let genotype = arch.discretize(store, cfg.exclude_zero, genotype_channels, genotype_blocks)?;
    Ok(SearchOutcome { genotype, log, steps })
}
