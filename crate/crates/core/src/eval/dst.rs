//! Dialog state tracking: a bilinear value scorer per (domain, slot) over
//! pooled encodings of the dialog history and of each candidate value.

use std::collections::BTreeMap;

use super::metrics::{joint_goal_accuracy, TurnPrediction};
use crate::data::{Dialog, Ontology, SlotValue, Speaker, Utterance};
use crate::error::{Error, Result};
use crate::neural::linalg::{dot, log_sum_exp};
use crate::neural::{
    encode_history, encode_pair, EncodedSeq, EncoderModel, Grads, ParamId, Real, Rng, Vocab,
};
use crate::objectives::{trim, LossValue, Task};

/// Parameter name prefix of the scorer for one (domain, slot).
pub fn dst_head_prefix(domain: &str, slot: &str) -> String {
    format!("head.dst.{}.{}", domain, slot.replace(' ', "_"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotHead {
    pub domain: String,
    pub slot: String,
    /// Ontology values followed by "none".
    pub candidates: Vec<String>,
    pub query: ParamId,
    pub bilinear: ParamId,
    values: Vec<EncodedSeq>,
}

/// One scorer per ontology (domain, slot), in ontology order.
#[derive(Debug, Clone, PartialEq)]
pub struct DstHead {
    pub slots: Vec<SlotHead>,
    pub max_len: usize,
}

impl DstHead {
    /// Adds any missing scorer parameters (query = ones, bilinear =
    /// identity) and encodes the candidate values.
    pub fn attach<T: Real>(
        model: &mut EncoderModel<T>,
        ontology: &Ontology,
        vocab: &Vocab,
        max_len: usize,
    ) -> Result<DstHead> {
        if ontology.is_empty() {
            return Err(Error::InvalidArgument("empty ontology".into()));
        }
        let h = model.hidden();
        let mut slots = Vec::with_capacity(ontology.len());
        for (domain, slot) in ontology.slots() {
            let prefix = dst_head_prefix(domain, slot);
            let (qn, bn) = (format!("{prefix}.query"), format!("{prefix}.bilinear"));
            let query = match model.params.id(&qn) {
                Some(id) => id,
                None => model.params.add(&qn, &[h], vec![T::one(); h])?,
            };
            let bilinear = match model.params.id(&bn) {
                Some(id) => id,
                None => {
                    let mut eye = vec![T::zero(); h * h];
                    for i in 0..h {
                        eye[i * h + i] = T::one();
                    }
                    model.params.add(&bn, &[h, h], eye)?
                }
            };
            let candidates = ontology
                .candidates(domain, slot)
                .expect("slot listed by the ontology");
            let values = candidates
                .iter()
                .map(|v| trim(encode_pair(v, None, vocab, max_len, None)))
                .collect();
            slots.push(SlotHead {
                domain: domain.to_string(),
                slot: slot.to_string(),
                candidates,
                query,
                bilinear,
                values,
            });
        }
        Ok(DstHead { slots, max_len })
    }

    fn check_ontology(&self, ontology: &Ontology) -> Result<()> {
        for (d, s) in ontology.slots() {
            if !self.slots.iter().any(|x| x.domain == d && x.slot == s) {
                return Err(Error::Missing(format!("no DST scorer for ({d}, {s})")));
            }
        }
        Ok(())
    }

    /// `B·pool(value)` for every candidate of every slot.
    pub fn value_projections<T: Real>(&self, model: &EncoderModel<T>) -> Result<Vec<Vec<Vec<T>>>> {
        let h = model.hidden();
        self.slots
            .iter()
            .map(|s| {
                let b = model.params.data(s.bilinear);
                s.values
                    .iter()
                    .map(|v| {
                        let e = model.forward(v, false, None)?;
                        Ok(bilinear_apply(b, &e.pooled, h))
                    })
                    .collect()
            })
            .collect()
    }

    /// Scores per slot for one pooled history vector.
    pub fn slot_scores<T: Real>(
        &self,
        model: &EncoderModel<T>,
        pooled: &[T],
        projections: &[Vec<Vec<T>>],
    ) -> Vec<Vec<f64>> {
        self.slots
            .iter()
            .zip(projections)
            .map(|(s, zs)| {
                let u = hadamard(model.params.data(s.query), pooled);
                zs.iter().map(|z| dot(&u, z).f64()).collect()
            })
            .collect()
    }

    pub fn predict_from_scores(&self, scores: &[Vec<f64>]) -> TurnPrediction {
        self.slots
            .iter()
            .zip(scores)
            .map(|(s, sc)| {
                (
                    (s.domain.clone(), s.slot.clone()),
                    s.candidates[argmax_first(sc)].clone(),
                )
            })
            .collect()
    }
}

fn hadamard<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

/// `z_i = Σ_j B_ij e_j` with `B` stored row-major `[h, h]`.
fn bilinear_apply<T: Real>(b: &[T], e: &[T], h: usize) -> Vec<T> {
    (0..h).map(|i| dot(&b[i * h..(i + 1) * h], e)).collect()
}

/// Index of the largest score; ties go to the earliest candidate.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Predicts every (domain, slot) value after the given history.
pub fn dst_forward<T: Real>(
    model: &EncoderModel<T>,
    head: &DstHead,
    vocab: &Vocab,
    history: &[Utterance],
    ontology: &Ontology,
) -> Result<TurnPrediction> {
    head.check_ontology(ontology)?;
    let proj = head.value_projections(model)?;
    let seq = trim(encode_history(history, vocab, head.max_len));
    let enc = model.forward(&seq, false, None)?;
    Ok(head.predict_from_scores(&head.slot_scores(model, &enc.pooled, &proj)))
}

/// One tracked turn: the history up to a user turn and its gold state.
#[derive(Debug, Clone, PartialEq)]
pub struct DstItem {
    pub history: EncodedSeq,
    pub state: Vec<SlotValue>,
    /// Gold candidate index per head slot; `None` when the gold value is not
    /// among the candidates.
    pub gold: Vec<Option<usize>>,
}

/// Every user turn of every annotated dialog. Unannotated dialogs are an
/// error.
pub fn dst_items(dialogs: &[Dialog], head: &DstHead, vocab: &Vocab) -> Result<Vec<DstItem>> {
    let mut out = Vec::new();
    for d in dialogs {
        let states = d.states.as_ref().ok_or_else(|| {
            Error::Validation(format!("dialog {} has no state annotations", d.id))
        })?;
        for (t, turn) in d.turns.iter().enumerate() {
            if turn.speaker != Speaker::User {
                continue;
            }
            let state = states[t].clone();
            let by_slot: BTreeMap<(&str, &str), String> = state
                .iter()
                .map(|sv| {
                    (
                        (sv.domain.as_str(), sv.slot.as_str()),
                        sv.value.trim().to_lowercase(),
                    )
                })
                .collect();
            let gold = head
                .slots
                .iter()
                .map(|s| {
                    let v = by_slot
                        .get(&(s.domain.as_str(), s.slot.as_str()))
                        .cloned()
                        .unwrap_or_else(|| crate::data::NONE_VALUE.to_string());
                    s.candidates
                        .iter()
                        .position(|c| c.trim().to_lowercase() == v)
                })
                .collect();
            out.push(DstItem {
                history: trim(encode_history(&d.turns[..=t], vocab, head.max_len)),
                state,
                gold,
            });
        }
    }
    Ok(out)
}

/// Predictions for every item, sharing one pass over the candidate values.
pub fn predict_items<T: Real>(
    model: &EncoderModel<T>,
    head: &DstHead,
    items: &[DstItem],
) -> Result<Vec<TurnPrediction>> {
    let proj = head.value_projections(model)?;
    items
        .iter()
        .map(|it| {
            let enc = model.forward(&it.history, false, None)?;
            Ok(head.predict_from_scores(&head.slot_scores(model, &enc.pooled, &proj)))
        })
        .collect()
}

/// Summed cross-entropy over slots per turn, averaged over the batch.
pub fn dst_loss<T: Real>(
    model: &EncoderModel<T>,
    head: &DstHead,
    items: &[&DstItem],
    mut grads: Option<&mut Grads<T>>,
    mut dropout: Option<&mut Rng>,
) -> Result<LossValue> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty DST batch".into()));
    }
    let h = model.hidden();
    let record = grads.is_some();
    let inv = 1.0 / items.len() as f64;

    // candidate encodings and their projections, shared by the batch
    let mut value_enc = Vec::with_capacity(head.slots.len());
    let mut proj = Vec::with_capacity(head.slots.len());
    for s in &head.slots {
        let b = model.params.data(s.bilinear);
        let mut encs = Vec::with_capacity(s.values.len());
        let mut zs = Vec::with_capacity(s.values.len());
        for v in &s.values {
            let e = model.forward(v, record, dropout.as_deref_mut())?;
            zs.push(bilinear_apply(b, &e.pooled, h));
            encs.push(e);
        }
        value_enc.push(encs);
        proj.push(zs);
    }
    let mut dz: Vec<Vec<Vec<f64>>> = proj.iter().map(|zs| vec![vec![0.0; h]; zs.len()]).collect();

    let (mut loss, mut correct) = (0.0, 0usize);
    for it in items {
        let enc = model.forward(&it.history, record, dropout.as_deref_mut())?;
        let mut dp = vec![0.0; h];
        let mut all_right = true;
        for (si, s) in head.slots.iter().enumerate() {
            let q = model.params.data(s.query);
            let u = hadamard(q, &enc.pooled);
            let scores: Vec<f64> = proj[si].iter().map(|z| dot(&u, z).f64()).collect();
            let Some(gold) = it.gold[si] else {
                all_right = false;
                continue;
            };
            all_right &= argmax_first(&scores) == gold;
            let lse = log_sum_exp(&scores);
            loss += (lse - scores[gold]) * inv;
            if let Some(g) = grads.as_deref_mut() {
                let ds: Vec<f64> = scores
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| ((x - lse).exp() - if i == gold { 1.0 } else { 0.0 }) * inv)
                    .collect();
                // d/du = Σ_v ds_v z_v
                let mut du = vec![0.0; h];
                for (v, &d) in ds.iter().enumerate() {
                    for k in 0..h {
                        du[k] += d * proj[si][v][k].f64();
                        dz[si][v][k] += d * u[k].f64();
                    }
                }
                if let Some(gq) = g.get_mut(s.query) {
                    for k in 0..h {
                        gq[k] += T::of(du[k] * enc.pooled[k].f64());
                    }
                }
                for k in 0..h {
                    dp[k] += du[k] * q[k].f64();
                }
            }
        }
        correct += all_right as usize;
        if let Some(g) = grads.as_deref_mut() {
            let dp: Vec<T> = dp.into_iter().map(T::of).collect();
            model.backward(&enc, None, Some(&dp), g)?;
        }
    }

    if let Some(g) = grads {
        for (si, s) in head.slots.iter().enumerate() {
            let b = model.params.data(s.bilinear);
            for (v, e) in value_enc[si].iter().enumerate() {
                let d = &dz[si][v];
                if d.iter().all(|&x| x == 0.0) {
                    continue;
                }
                if let Some(gb) = g.get_mut(s.bilinear) {
                    for i in 0..h {
                        for j in 0..h {
                            gb[i * h + j] += T::of(d[i] * e.pooled[j].f64());
                        }
                    }
                }
                let de: Vec<T> = (0..h)
                    .map(|j| T::of((0..h).map(|i| b[i * h + j].f64() * d[i]).sum::<f64>()))
                    .collect();
                model.backward(e, None, Some(&de), g)?;
            }
        }
    }
    Ok(LossValue {
        loss,
        count: items.len(),
        accuracy: Some(correct as f64 * inv),
        mrr: None,
    })
}

/// Fine-tuning task: train turns, dev JGA.
pub struct DstTask<'a> {
    pub head: &'a DstHead,
    pub ontology: &'a Ontology,
    pub train: Vec<DstItem>,
    pub dev: Vec<DstItem>,
}

impl<T: Real> Task<T> for DstTask<'_> {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn batch_loss(
        &self,
        model: &EncoderModel<T>,
        items: &[usize],
        grads: Option<&mut Grads<T>>,
        dropout: Option<&mut Rng>,
        _aux: &mut Rng,
    ) -> Result<LossValue> {
        let batch: Vec<&DstItem> = items.iter().map(|&i| &self.train[i]).collect();
        dst_loss(model, self.head, &batch, grads, dropout)
    }

    fn dev_metric(&self, model: &EncoderModel<T>) -> Result<f64> {
        jga_on_items(model, self.head, self.ontology, &self.dev)
    }

    fn higher_is_better(&self) -> bool {
        true
    }

    fn metric_name(&self) -> &'static str {
        "dev_jga"
    }
}

pub fn jga_on_items<T: Real>(
    model: &EncoderModel<T>,
    head: &DstHead,
    ontology: &Ontology,
    items: &[DstItem],
) -> Result<f64> {
    let preds = predict_items(model, head, items)?;
    let gold: Vec<Vec<SlotValue>> = items.iter().map(|it| it.state.clone()).collect();
    joint_goal_accuracy(&preds, &gold, ontology)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::EncoderConfig;

    fn setup() -> (EncoderModel<f64>, Vocab, Ontology) {
        let vocab = Vocab::build(["i want a cheap or expensive hotel in the north"], 1).unwrap();
        let mut cfg = EncoderConfig::new(vocab.len());
        cfg.layers = 1;
        cfg.hidden = 16;
        cfg.heads = 2;
        cfg.ffn = 32;
        cfg.max_len = 32;
        let model = EncoderModel::new(cfg, 5).unwrap();
        let mut ont = Ontology::default();
        ont.insert(
            "hotel",
            "pricerange",
            vec!["expensive".into(), "cheap".into()],
        )
        .unwrap();
        (model, vocab, ont)
    }

    fn user(text: &str) -> Vec<Utterance> {
        vec![Utterance {
            speaker: Speaker::User,
            text: text.into(),
        }]
    }

    #[test]
    fn zero_scorer_picks_first_listed_value() {
        let (mut model, vocab, ont) = setup();
        let head = DstHead::attach(&mut model, &ont, &vocab, 32).unwrap();
        for x in model.params.data_mut(head.slots[0].query) {
            *x = 0.0;
        }
        let p = dst_forward(&model, &head, &vocab, &user("i want a cheap hotel"), &ont).unwrap();
        assert_eq!(
            p[&("hotel".to_string(), "pricerange".to_string())],
            "expensive"
        );
    }

    #[test]
    fn rigged_scorer_picks_cheap() {
        let (mut model, vocab, ont) = setup();
        let head = DstHead::attach(&mut model, &ont, &vocab, 32).unwrap();
        let hist = user("i want a cheap hotel");
        let h = model.hidden();
        let pooled =
            |m: &EncoderModel<f64>, s: &EncodedSeq| m.forward(s, false, None).unwrap().pooled;
        let p = pooled(&model, &trim(encode_history(&hist, &vocab, 32)));
        let e: Vec<Vec<f64>> = head.slots[0]
            .values
            .iter()
            .map(|v| pooled(&model, v))
            .collect();
        // component of e_cheap orthogonal to the other candidates
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for (i, v) in e.iter().enumerate() {
            if i == 1 {
                continue;
            }
            let mut w = v.clone();
            for b in &basis {
                let c = dot(&w, b);
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
            let n = dot(&w, &w).sqrt();
            basis.push(w.iter().map(|x| x / n).collect());
        }
        let mut w = e[1].clone();
        for b in &basis {
            let c = dot(&w, b);
            w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let b = model.params.data_mut(head.slots[0].bilinear);
        for i in 0..h {
            for j in 0..h {
                b[i * h + j] = p[i] * w[j];
            }
        }
        let pred = dst_forward(&model, &head, &vocab, &hist, &ont).unwrap();
        assert_eq!(
            pred[&("hotel".to_string(), "pricerange".to_string())],
            "cheap"
        );
    }

    #[test]
    fn missing_scorer_is_an_error() {
        let (mut model, vocab, ont) = setup();
        let head = DstHead::attach(&mut model, &ont, &vocab, 32).unwrap();
        let mut bigger = ont.clone();
        bigger
            .insert("hotel", "area", vec!["north".into()])
            .unwrap();
        assert!(matches!(
            dst_forward(&model, &head, &vocab, &user("hi"), &bigger),
            Err(Error::Missing(_))
        ));
    }

    #[test]
    fn argmax_ties_go_first() {
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax_first(&[0.0, 0.0]), 0);
    }
}
