//! Loss functions over encoder outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::encoder::Encoded;
use crate::neural::linalg::{dot, log_sum_exp};
use crate::neural::masking::IGNORE_LABEL;
use crate::neural::{EncodedSeq, EncoderModel, Grads, MaskedSeq, ParamId, Real, Rng};

pub const MLM_BIAS: &str = "head.mlm.bias";
pub const RS_WEIGHT: &str = "head.rs.weight";
pub const RS_BIAS: &str = "head.rs.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// `f(c, r) = ⟨pool(c), pool(r)⟩`, both sides through the same encoder.
    #[default]
    DualEncoderDot,
    /// `f(c, r) = w·pool([c; r]) + b` over a joint encoding.
    LinearOnCls,
}

impl std::str::FromStr for ScoringMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" | "dual_encoder_dot" | "dual-encoder-dot" => Ok(ScoringMode::DualEncoderDot),
            "linear" | "linear_on_cls" | "linear-on-cls" => Ok(ScoringMode::LinearOnCls),
            other => Err(Error::InvalidArgument(format!(
                "unknown scoring mode {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValue {
    /// Mean over contributing items.
    pub loss: f64,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Mean reciprocal rank of the true response.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mrr: Option<f64>,
}

/// Adds the MLM output bias when missing. Output weights are tied to the
/// token embeddings.
pub fn ensure_mlm_head<T: Real>(model: &mut EncoderModel<T>) -> Result<ParamId> {
    if let Some(id) = model.params.id(MLM_BIAS) {
        return Ok(id);
    }
    let v = model.config.vocab_size;
    model.params.add(MLM_BIAS, &[v], vec![T::zero(); v])
}

/// Adds the joint-encoding scorer `w`, `b` (zero-initialized) when missing.
pub fn ensure_rs_head<T: Real>(model: &mut EncoderModel<T>) -> Result<()> {
    if model.params.id(RS_WEIGHT).is_none() {
        let h = model.config.hidden;
        model.params.add(RS_WEIGHT, &[h], vec![T::zero(); h])?;
        model.params.add(RS_BIAS, &[1], vec![T::zero()])?;
    }
    Ok(())
}

/// Mean token cross-entropy over the selected positions, with output logits
/// `h_t · Eᵀ + b` tied to the token embedding table `E`.
pub fn mlm_loss<T: Real>(
    model: &EncoderModel<T>,
    batch: &[MaskedSeq],
    mut grads: Option<&mut Grads<T>>,
    mut dropout: Option<&mut Rng>,
) -> Result<LossValue> {
    let bias_id = model.params.require(MLM_BIAS)?;
    let emb_id = model.token_embedding_id();
    let total: usize = batch.iter().map(MaskedSeq::selected).sum();
    if total == 0 {
        return Ok(LossValue::default());
    }
    let (h, v) = (model.config.hidden, model.config.vocab_size);
    let inv = 1.0 / total as f64;
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut logits = vec![T::zero(); v];
    for item in batch {
        if item.selected() == 0 {
            continue;
        }
        let record = grads.is_some();
        let out = model.forward(&item.input, record, dropout.as_deref_mut())?;
        let mut d_hidden = record.then(|| vec![T::zero(); out.n * h]);
        for (t, &label) in item.labels.iter().enumerate() {
            if label == IGNORE_LABEL {
                continue;
            }
            if t >= out.n {
                return Err(Error::Shape("label at a padded position".into()));
            }
            let target = label as usize;
            let ht = &out.hidden[t * h..(t + 1) * h];
            let table = model.params.data(emb_id);
            let bias = model.params.data(bias_id);
            for (w, l) in logits.iter_mut().enumerate() {
                *l = dot(ht, &table[w * h..(w + 1) * h]) + bias[w];
            }
            let lse = log_sum_exp(&logits);
            loss += (lse - logits[target]).f64();
            let argmax = (0..v)
                .max_by(|&a, &b| logits[a].f64().total_cmp(&logits[b].f64()).then(b.cmp(&a)))
                .unwrap_or(0);
            correct += usize::from(argmax == target);
            if let (Some(g), Some(dh)) = (grads.as_deref_mut(), d_hidden.as_mut()) {
                let scale = T::of(inv);
                let dl: Vec<T> = logits
                    .iter()
                    .enumerate()
                    .map(|(w, &l)| {
                        ((l - lse).exp() - if w == target { T::one() } else { T::zero() }) * scale
                    })
                    .collect();
                let dht = &mut dh[t * h..(t + 1) * h];
                for (w, &d) in dl.iter().enumerate() {
                    crate::neural::linalg::axpy(d, &table[w * h..(w + 1) * h], dht);
                }
                if let Some(gb) = g.get_mut(bias_id) {
                    for (a, &d) in gb.iter_mut().zip(&dl) {
                        *a += d;
                    }
                }
                if let Some(ge) = g.get_mut(emb_id) {
                    for (w, &d) in dl.iter().enumerate() {
                        crate::neural::linalg::axpy(d, ht, &mut ge[w * h..(w + 1) * h]);
                    }
                }
            }
        }
        if let (Some(g), Some(dh)) = (grads.as_deref_mut(), d_hidden) {
            model.backward(&out, Some(&dh), None, g)?;
        }
    }
    Ok(LossValue {
        loss: loss * inv,
        count: total,
        accuracy: Some(correct as f64 * inv),
        mrr: None,
    })
}

/// Encoded inputs of one context with its candidate responses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScoreInput {
    Dual {
        context: EncodedSeq,
        responses: Vec<EncodedSeq>,
    },
    Joint {
        pairs: Vec<EncodedSeq>,
    },
}

impl ScoreInput {
    pub fn len(&self) -> usize {
        match self {
            ScoreInput::Dual { responses, .. } => responses.len(),
            ScoreInput::Joint { pairs } => pairs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> ScoringMode {
        match self {
            ScoreInput::Dual { .. } => ScoringMode::DualEncoderDot,
            ScoreInput::Joint { .. } => ScoringMode::LinearOnCls,
        }
    }
}

pub enum ScoreTrace<T> {
    Dual {
        context: Encoded<T>,
        responses: Vec<Encoded<T>>,
    },
    Joint {
        pairs: Vec<Encoded<T>>,
    },
}

/// Scores every candidate of `input`.
pub fn score<T: Real>(
    model: &EncoderModel<T>,
    input: &ScoreInput,
    record: bool,
    mut dropout: Option<&mut Rng>,
) -> Result<(Vec<f64>, ScoreTrace<T>)> {
    match input {
        ScoreInput::Dual { context, responses } => {
            let c = model.forward(context, record, dropout.as_deref_mut())?;
            let mut rs = Vec::with_capacity(responses.len());
            let mut scores = Vec::with_capacity(responses.len());
            for r in responses {
                let e = model.forward(r, record, dropout.as_deref_mut())?;
                scores.push(dot(&c.pooled, &e.pooled).f64());
                rs.push(e);
            }
            Ok((
                scores,
                ScoreTrace::Dual {
                    context: c,
                    responses: rs,
                },
            ))
        }
        ScoreInput::Joint { pairs } => {
            let w = model.params.data(model.params.require(RS_WEIGHT)?);
            let b = model.params.data(model.params.require(RS_BIAS)?)[0];
            let mut encs = Vec::with_capacity(pairs.len());
            let mut scores = Vec::with_capacity(pairs.len());
            for p in pairs {
                let e = model.forward(p, record, dropout.as_deref_mut())?;
                scores.push((dot(w, &e.pooled) + b).f64());
                encs.push(e);
            }
            Ok((scores, ScoreTrace::Joint { pairs: encs }))
        }
    }
}

/// Backpropagates `∂L/∂score_i` through the scorer and encoder.
pub fn score_backward<T: Real>(
    model: &EncoderModel<T>,
    trace: &ScoreTrace<T>,
    d_scores: &[f64],
    grads: &mut Grads<T>,
) -> Result<()> {
    let h = model.config.hidden;
    match trace {
        ScoreTrace::Dual { context, responses } => {
            let mut dc = vec![T::zero(); h];
            for (r, &d) in responses.iter().zip(d_scores) {
                if d == 0.0 {
                    continue;
                }
                let d = T::of(d);
                crate::neural::linalg::axpy(d, &r.pooled, &mut dc);
                let dr: Vec<T> = context.pooled.iter().map(|&x| x * d).collect();
                model.backward(r, None, Some(&dr), grads)?;
            }
            model.backward(context, None, Some(&dc), grads)
        }
        ScoreTrace::Joint { pairs } => {
            let w_id = model.params.require(RS_WEIGHT)?;
            let b_id = model.params.require(RS_BIAS)?;
            let w = model.params.data(w_id).to_vec();
            for (e, &d) in pairs.iter().zip(d_scores) {
                if d == 0.0 {
                    continue;
                }
                let d = T::of(d);
                if let Some(gw) = grads.get_mut(w_id) {
                    crate::neural::linalg::axpy(d, &e.pooled, gw);
                }
                if let Some(gb) = grads.get_mut(b_id) {
                    gb[0] += d;
                }
                let dp: Vec<T> = w.iter().map(|&x| x * d).collect();
                model.backward(e, None, Some(&dp), grads)?;
            }
            Ok(())
        }
    }
}

/// Binary cross-entropy of `sigmoid(s)` against `label`, and its derivative
/// with respect to `s`.
pub fn bce_from_score(s: f64, label: bool) -> (f64, f64) {
    // -log sigmoid(s) = softplus(-s); -log(1 - sigmoid(s)) = softplus(s)
    let softplus = |x: f64| {
        if x > 0.0 {
            x + (-x).exp().ln_1p()
        } else {
            x.exp().ln_1p()
        }
    };
    let p = 1.0 / (1.0 + (-s).exp());
    if label {
        (softplus(-s), p - 1.0)
    } else {
        (softplus(s), p)
    }
}

/// `−log softmax(scores)[true_index]` with max subtraction, its gradient,
/// and the pessimistic rank of the true response.
pub fn nce_from_scores(scores: &[f64], true_index: usize) -> Result<(f64, Vec<f64>, usize)> {
    if true_index >= scores.len() {
        return Err(Error::InvalidArgument(
            "true index outside the score vector".into(),
        ));
    }
    let lse = log_sum_exp(scores);
    let loss = lse - scores[true_index];
    let grad = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| (s - lse).exp() - if i == true_index { 1.0 } else { 0.0 })
        .collect();
    Ok((loss.max(0.0), grad, pessimistic_rank(scores, true_index)))
}

/// `1 +` the number of other candidates scoring at least as high.
pub fn pessimistic_rank(scores: &[f64], gold: usize) -> usize {
    let g = scores[gold];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != gold && s >= g)
        .count()
}

/// Mean binary cross-entropy over every (context, response, label) item.
pub fn rs_class_loss<T: Real>(
    model: &EncoderModel<T>,
    batch: &[(ScoreInput, Vec<bool>)],
    mut grads: Option<&mut Grads<T>>,
    mut dropout: Option<&mut Rng>,
) -> Result<LossValue> {
    let total: usize = batch.iter().map(|(i, _)| i.len()).sum();
    if total == 0 {
        return Ok(LossValue::default());
    }
    let inv = 1.0 / total as f64;
    let (mut loss, mut correct) = (0.0, 0usize);
    for (input, labels) in batch {
        if labels.len() != input.len() {
            return Err(Error::Shape("one label per candidate required".into()));
        }
        let (scores, trace) = score(model, input, grads.is_some(), dropout.as_deref_mut())?;
        let mut d = Vec::with_capacity(scores.len());
        for (&s, &y) in scores.iter().zip(labels) {
            let (l, g) = bce_from_score(s, y);
            loss += l;
            correct += usize::from((s > 0.0) == y);
            d.push(g * inv);
        }
        if let Some(g) = grads.as_deref_mut() {
            score_backward(model, &trace, &d, g)?;
        }
    }
    Ok(LossValue {
        loss: loss * inv,
        count: total,
        accuracy: Some(correct as f64 * inv),
        mrr: None,
    })
}

/// Mean NCE loss over groups; each group is scored on its own, so groups
/// may differ in size.
pub fn rs_contrast_loss<T: Real>(
    model: &EncoderModel<T>,
    batch: &[(ScoreInput, usize)],
    mut grads: Option<&mut Grads<T>>,
    mut dropout: Option<&mut Rng>,
) -> Result<LossValue> {
    if batch.is_empty() {
        return Ok(LossValue::default());
    }
    let inv = 1.0 / batch.len() as f64;
    let (mut loss, mut rr, mut top) = (0.0, 0.0, 0usize);
    for (input, true_index) in batch {
        let (scores, trace) = score(model, input, grads.is_some(), dropout.as_deref_mut())?;
        let (l, d, rank) = nce_from_scores(&scores, *true_index)?;
        loss += l;
        rr += 1.0 / rank as f64;
        top += usize::from(rank == 1);
        if let Some(g) = grads.as_deref_mut() {
            let d: Vec<f64> = d.iter().map(|x| x * inv).collect();
            score_backward(model, &trace, &d, g)?;
        }
    }
    Ok(LossValue {
        loss: loss * inv,
        count: batch.len(),
        accuracy: Some(top as f64 * inv),
        mrr: Some(rr * inv),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_reference_values() {
        assert!((bce_from_score(0.0, true).0 - 2f64.ln()).abs() < 1e-15);
        assert!((bce_from_score(0.0, false).0 - 2f64.ln()).abs() < 1e-15);
        let (l, _) = bce_from_score(20.0, true);
        assert!((l - 2.061e-9).abs() < 1e-11);
        assert!(bce_from_score(-800.0, true).0.is_finite());
    }

    #[test]
    fn nce_reference_values() {
        let (l, _, r) = nce_from_scores(&[1.0; 5], 2).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        assert_eq!(r, 5);
        let (l, _, r) = nce_from_scores(&[2.0, 0.0, 0.0], 0).unwrap();
        let e2 = 2f64.exp();
        assert!((l + (e2 / (e2 + 2.0)).ln()).abs() < 1e-12);
        assert_eq!(r, 1);
    }

    #[test]
    fn ranks_are_pessimistic() {
        assert_eq!(pessimistic_rank(&[0.5, 0.5, 0.1], 0), 2);
        assert_eq!(pessimistic_rank(&[0.9, 0.5, 0.1], 0), 1);
    }
}
