use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{ParamGroup, TrainMode, TransformerModel};
use crate::corpus::Domain;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// One training input: embedded token rows (CLS is prepended by the model)
/// and the gold labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub rows: Matrix,
    pub suggestion: bool,
    pub domain: Domain,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    /// Mean joint loss per epoch of the main phase.
    pub epoch_loss: Vec<f64>,
    /// Mean suggestion-only loss per pretraining epoch (adapter transfer).
    pub pretrain_loss: Vec<f64>,
    pub optimizer_steps: usize,
}

/// One finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn relative_error(&self) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs());
        if denom < 1e-10 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / denom
        }
    }
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0u64, |acc, &p| splitmix(acc ^ splitmix(p)))
}

impl TransformerModel {
    fn add_scaled(&mut self, other: &TransformerModel, s: f64) {
        for ((_, _, a), (_, _, b)) in self.params_mut().into_iter().zip(other.params()) {
            a.axpy(s, b);
        }
    }

    /// Mean joint loss over `batch` and its gradient. Per-example gradients
    /// are computed independently (in parallel under rayon) and summed in
    /// batch order, so the result does not depend on the thread count.
    /// `dropout_seed` enables dropout; `None` runs deterministically without it.
    pub fn batch_loss_and_grad(
        &self,
        batch: &[&TrainExample],
        with_domain: bool,
        dropout_seed: Option<u64>,
    ) -> Result<(f64, TransformerModel)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let parts: Vec<(f64, TransformerModel)> = batch
            .par_iter()
            .enumerate()
            .map(|(i, ex)| {
                let mut g = self.zeros_like();
                let mut rng = dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(derive_seed(&[s, i as u64])));
                let loss = self.example_loss(
                    &ex.rows,
                    ex.suggestion,
                    ex.domain,
                    with_domain,
                    Some((&mut g, 1.0)),
                    rng.as_mut(),
                )?;
                Ok((loss, g))
            })
            .collect::<Result<_>>()?;
        let inv = 1.0 / batch.len() as f64;
        let mut iter = parts.into_iter();
        let (mut loss, mut grad) = iter.next().expect("non-empty batch");
        for (l, g) in iter {
            loss += l;
            grad.add_scaled(&g, 1.0);
        }
        grad.scale_all(inv);
        Ok((loss * inv, grad))
    }

    /// Mean joint loss over `batch` with dropout off.
    pub fn batch_loss(&self, batch: &[&TrainExample], with_domain: bool) -> Result<f64> {
        let mut total = 0.0;
        for ex in batch {
            total += self.example_loss(&ex.rows, ex.suggestion, ex.domain, with_domain, None, None)?;
        }
        Ok(total / batch.len().max(1) as f64)
    }

    fn scale_all(&mut self, s: f64) {
        for (_, _, m) in self.params_mut() {
            m.scale(s);
        }
    }

    fn learning_rate(&self, group: ParamGroup, frozen: &[ParamGroup]) -> f64 {
        if frozen.contains(&group) {
            0.0
        } else if group == ParamGroup::Adapter {
            self.config.base_lr * self.config.adapter_lr_multiplier
        } else {
            self.config.base_lr
        }
    }

    /// Plain SGD update with per-group learning rates. Groups in `frozen`
    /// are left untouched and excluded from gradient clipping.
    pub fn sgd_step(&mut self, grad: &TransformerModel, frozen: &[ParamGroup]) {
        let clip = self.config.grad_clip;
        let mut factor = 1.0;
        if clip > 0.0 {
            let sq: f64 = grad
                .params()
                .iter()
                .filter(|(_, g, _)| !frozen.contains(g))
                .flat_map(|(_, _, m)| m.data().iter())
                .map(|v| v * v)
                .sum();
            let norm = sq.sqrt();
            if norm > clip {
                factor = clip / norm;
            }
        }
        let rates: Vec<f64> = self.params().iter().map(|(_, g, _)| self.learning_rate(*g, frozen)).collect();
        for (((_, _, p), (_, _, g)), lr) in self.params_mut().into_iter().zip(grad.params()).zip(rates) {
            if lr > 0.0 {
                p.axpy(-lr * factor, g);
            }
        }
    }
}

fn run_phase(
    model: &mut TransformerModel,
    data: &[TrainExample],
    epochs: usize,
    frozen: &[ParamGroup],
    with_domain: bool,
    phase: u64,
    steps: &mut usize,
) -> Result<Vec<f64>> {
    let cfg = model.config.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, phase]));
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut shuffle_rng);
        let mut acc: Option<TransformerModel> = None;
        let mut pending = 0usize;
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &data[i]).collect();
            let dropout_seed = (cfg.dropout > 0.0).then(|| derive_seed(&[cfg.seed, phase, epoch as u64, b as u64]));
            let (loss, grad) = model.batch_loss_and_grad(&batch, with_domain, dropout_seed)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    value: loss,
                });
            }
            total += loss * batch.len() as f64;
            match acc.as_mut() {
                Some(a) => a.add_scaled(&grad, 1.0),
                None => acc = Some(grad),
            }
            pending += 1;
            if pending == cfg.accum_steps {
                flush(model, &mut acc, &mut pending, frozen, steps);
            }
        }
        flush(model, &mut acc, &mut pending, frozen, steps);
        let mean = total / data.len() as f64;
        log::info!("phase {phase} epoch {} mean loss {mean:.6}", epoch + 1);
        losses.push(mean);
    }
    Ok(losses)
}

fn flush(
    model: &mut TransformerModel,
    acc: &mut Option<TransformerModel>,
    pending: &mut usize,
    frozen: &[ParamGroup],
    steps: &mut usize,
) {
    if let Some(mut g) = acc.take() {
        g.scale_all(1.0 / *pending as f64);
        model.sgd_step(&g, frozen);
        *steps += 1;
    }
    *pending = 0;
}

/// Trains `model` in place according to its config and returns the loss
/// trace. The optimizer steps once every `accum_steps` minibatches on the
/// mean of their gradients; a partial group at the end of an epoch is
/// flushed as its own step.
pub fn train(model: &mut TransformerModel, data: &[TrainExample]) -> Result<TrainTrace> {
    model.config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let mut trace = TrainTrace::default();
    let cfg = model.config.clone();
    match cfg.mode {
        TrainMode::Full => {
            trace.epoch_loss = run_phase(model, data, cfg.epochs, &[], true, 0, &mut trace.optimizer_steps)?;
        }
        TrainMode::AdapterTransfer => {
            trace.pretrain_loss = run_phase(
                model,
                data,
                cfg.pretrain_epochs,
                &[ParamGroup::Adapter],
                false,
                1,
                &mut trace.optimizer_steps,
            )?;
            trace.epoch_loss = run_phase(
                model,
                data,
                cfg.epochs,
                &[ParamGroup::Input, ParamGroup::Encoder],
                true,
                2,
                &mut trace.optimizer_steps,
            )?;
        }
    }
    Ok(trace)
}

/// Compares analytic gradients of the mean joint loss against central
/// differences for `n` parameter entries drawn uniformly at random.
/// Dropout is disabled.
pub fn gradient_check(model: &TransformerModel, data: &[TrainExample], n: usize, eps: f64, seed: u64) -> Result<Vec<GradCheck>> {
    use rand::Rng;
    let batch: Vec<&TrainExample> = data.iter().collect();
    let (_, grad) = model.batch_loss_and_grad(&batch, true, None)?;
    let sizes: Vec<(String, usize)> = model.params().iter().map(|(n, _, m)| (n.clone(), m.len())).collect();
    let total: usize = sizes.iter().map(|s| s.1).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut flat = rng.random_range(0..total);
        let mut slot = 0;
        while flat >= sizes[slot].1 {
            flat -= sizes[slot].1;
            slot += 1;
        }
        let perturbed = |delta: f64| -> Result<f64> {
            let mut m = model.clone();
            m.params_mut()[slot].2.data_mut()[flat] += delta;
            m.batch_loss(&batch, true)
        };
        let numeric = (perturbed(eps)? - perturbed(-eps)?) / (2.0 * eps);
        out.push(GradCheck {
            name: sizes[slot].0.clone(),
            index: flat,
            analytic: grad.params()[slot].2.data()[flat],
            numeric,
        });
    }
    Ok(out)
}
