//! Central finite-difference comparison against analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::encoder::EncoderModel;
use super::params::Grads;
use super::Rng;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor per unit of loss and per compared entry. Tensors whose
/// exact gradient vanishes (the key bias, by softmax shift invariance) would
/// otherwise compare rounding noise against rounding noise.
pub const GRAD_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckOptions {
    pub step: f64,
    /// Entries compared per tensor; larger tensors are sampled.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: DEFAULT_STEP,
            max_entries: 24,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    /// `‖a − n‖ / max(‖a‖ + ‖n‖, GRAD_FLOOR·max(|L|, 1)·√entries)` over the
    /// compared entries.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// A loss over the model; with `Some(grads)` it also accumulates the
/// analytic gradient.
pub trait LossFn: Fn(&EncoderModel<f64>, Option<&mut Grads<f64>>) -> Result<f64> {}
impl<F: Fn(&EncoderModel<f64>, Option<&mut Grads<f64>>) -> Result<f64>> LossFn for F {}

/// Compares analytic and numerical gradients for every trainable parameter
/// accepted by `select`. Half of the sampled entries are the ones with the
/// largest analytic magnitude, the rest are uniform. `corrupt` names a
/// tensor whose analytic gradient is deliberately perturbed first.
pub fn check_gradients(
    model: &mut EncoderModel<f64>,
    loss: impl LossFn,
    select: impl Fn(&str) -> bool,
    opts: &CheckOptions,
    corrupt: Option<&str>,
) -> Result<Vec<TensorCheck>> {
    let mut grads = Grads::zeros_like(&model.params);
    let base = loss(model, Some(&mut grads))?;
    if !base.is_finite() {
        return Err(Error::Diverged(
            "loss is not finite at the check point".into(),
        ));
    }
    let mut rng = Rng::seed_from_u64(opts.seed);
    let ids: Vec<_> = model
        .params
        .iter()
        .filter(|(_, p)| !p.frozen && select(&p.name))
        .map(|(id, _)| id)
        .collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let name = model.params.get(id).name.clone();
        let mut analytic = grads
            .get(id)
            .ok_or_else(|| Error::Internal(format!("no gradient buffer for {name}")))?
            .to_vec();
        if corrupt == Some(name.as_str()) {
            for (i, g) in analytic.iter_mut().enumerate() {
                *g = *g * 1.5 + if i % 2 == 0 { 1e-2 } else { -1e-2 };
            }
        }
        let numel = analytic.len();
        let entries: Vec<usize> = if numel <= opts.max_entries {
            (0..numel).collect()
        } else {
            let mut order: Vec<usize> = (0..numel).collect();
            order.sort_by(|&a, &b| {
                analytic[b]
                    .abs()
                    .total_cmp(&analytic[a].abs())
                    .then(a.cmp(&b))
            });
            let mut chosen: Vec<usize> = order[..opts.max_entries / 2].to_vec();
            let rest = opts.max_entries - chosen.len();
            for i in sample(&mut rng, numel, rest.min(numel)) {
                if !chosen.contains(&i) {
                    chosen.push(i);
                }
            }
            chosen
        };
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for &i in &entries {
            let orig = model.params.data(id)[i];
            model.params.data_mut(id)[i] = orig + opts.step;
            let plus = loss(model, None)?;
            model.params.data_mut(id)[i] = orig - opts.step;
            let minus = loss(model, None)?;
            model.params.data_mut(id)[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i];
            diff += (a - numeric) * (a - numeric);
            na += a * a;
            nn += numeric * numeric;
        }
        let (diff, na, nn) = (diff.sqrt(), na.sqrt(), nn.sqrt());
        out.push(TensorCheck {
            name,
            entries: entries.len(),
            rel_error: diff
                / (na + nn).max(GRAD_FLOOR * base.abs().max(1.0) * (entries.len() as f64).sqrt()),
            analytic_norm: na,
        });
    }
    Ok(out)
}
