//! Finite-difference spot check of the full training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::gradcheck::{relative_error, GradCheckReport, Mismatch, DEFAULT_FLOOR, DEFAULT_STEP};
use crate::autograd::Tape;
use crate::error::Result;
use crate::forward::Forward;
use crate::model::Model;
use crate::params::{Binding, ParamId};

use super::loss::{batch_loss, PreparedVideo, SegmentSample};
use super::TrainConfig;

type Batch<'a> = [(&'a PreparedVideo, Vec<SegmentSample>)];

fn loss_value(model: &Model, items: &Batch<'_>, cfg: &TrainConfig, dropout_seed: u64) -> Result<f64> {
    let tape = Tape::new();
    let b = Binding::new(&tape, &model.store);
    let mut fwd = Forward::train(
        ChaCha8Rng::seed_from_u64(dropout_seed),
        cfg.dropout,
        cfg.input_dropout,
    );
    Ok(batch_loss(model, &b, items, cfg, &mut fwd, None)?.total.item())
}

/// Compares analytic gradients of the total loss with central differences
/// on `samples` parameter entries drawn uniformly from those that receive a
/// gradient. Every evaluation reuses the same dropout draws.
pub fn spot_check(
    model: &mut Model,
    items: &Batch<'_>,
    cfg: &TrainConfig,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let dropout_seed = seed ^ 0x5eed;
    let grads = {
        let tape = Tape::new();
        let b = Binding::new(&tape, &model.store);
        let mut fwd = Forward::train(
            ChaCha8Rng::seed_from_u64(dropout_seed),
            cfg.dropout,
            cfg.input_dropout,
        );
        let terms = batch_loss(model, &b, items, cfg, &mut fwd, None)?;
        tape.backward(terms.total)?;
        b.gradients()
    };
    let entries: Vec<(ParamId, usize)> = grads
        .iter()
        .filter(|(id, _)| model.store.is_trainable(*id))
        .flat_map(|(id, g)| (0..g.len()).map(move |k| (*id, k)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for _ in 0..samples.min(entries.len()) {
        let (id, k) = entries[rng.random_range(0..entries.len())];
        let analytic = grads
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, t)| t.data()[k])
            .unwrap_or(0.0);
        let orig = model.store.value(id).data()[k];
        model.store.value_mut(id).data_mut()[k] = orig + DEFAULT_STEP;
        let up = loss_value(model, items, cfg, dropout_seed);
        model.store.value_mut(id).data_mut()[k] = orig - DEFAULT_STEP;
        let down = loss_value(model, items, cfg, dropout_seed);
        model.store.value_mut(id).data_mut()[k] = orig;
        let numeric = (up? - down?) / (2.0 * DEFAULT_STEP);
        let rel = relative_error(analytic, numeric, DEFAULT_FLOOR);
        report.checked += 1;
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel);
            report.worst = Some(Mismatch {
                input: id.index(),
                element: k,
                analytic,
                numeric,
                rel_err: rel,
            });
        }
    }
    Ok(report)
}
