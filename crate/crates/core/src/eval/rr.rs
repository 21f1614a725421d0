//! Response retrieval: rank the gold system response among sampled
//! candidates given the preceding dialog history.

use std::collections::HashMap;

use rand::seq::index;
use rand::SeedableRng;

use super::metrics::recall_at_1;
use crate::data::{Dialog, Speaker, Utterance};
use crate::error::{Error, Result};
use crate::neural::linalg::dot;
use crate::neural::tokenizer::SEP_ID;
use crate::neural::{
    encode_history, encode_pair, EncodedSeq, EncoderModel, Grads, Real, Rng, Vocab,
};
use crate::objectives::{
    nce_from_scores, pessimistic_rank, score, score_backward, trim, LossValue, ScoreInput,
    ScoringMode, Task,
};

/// Desk-scale candidate pool size.
pub const DEFAULT_POOL: usize = 20;

/// `[CLS] history [SEP] response [SEP]`, keeping the most recent history
/// tokens when the pair is too long.
pub fn encode_history_pair(
    turns: &[Utterance],
    response: &str,
    vocab: &Vocab,
    max_len: usize,
) -> EncodedSeq {
    let mut resp = vocab.ids(response);
    resp.truncate(max_len.saturating_sub(3) / 2);
    let hist = trim(encode_history(turns, vocab, max_len - resp.len() - 1));
    let mut seq = hist;
    for id in resp.into_iter().chain(std::iter::once(SEP_ID)) {
        seq.ids.push(id);
        seq.segments.push(1);
        seq.mask.push(1);
    }
    seq
}

/// Distinct responses and their dual-side encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseTable {
    pub texts: Vec<String>,
    pub encoded: Vec<EncodedSeq>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RrItem {
    pub context: Vec<Utterance>,
    /// Encoded history for the dual scorer.
    pub context_seq: EncodedSeq,
    /// Index of the gold response in the table.
    pub response: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RrData {
    pub responses: ResponseTable,
    pub items: Vec<RrItem>,
    pub max_len: usize,
}

impl RrData {
    /// One item per system turn that has a preceding turn.
    pub fn from_dialogs(dialogs: &[Dialog], vocab: &Vocab, max_len: usize) -> RrData {
        let mut texts = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut items = Vec::new();
        for d in dialogs {
            for t in 1..d.turns.len() {
                if d.turns[t].speaker != Speaker::System {
                    continue;
                }
                let text = d.turns[t].text.clone();
                let id = *index.entry(text.clone()).or_insert_with(|| {
                    texts.push(text);
                    texts.len() - 1
                });
                items.push(RrItem {
                    context: d.turns[..t].to_vec(),
                    context_seq: trim(encode_history(&d.turns[..t], vocab, max_len)),
                    response: id,
                });
            }
        }
        let encoded = texts
            .iter()
            .map(|r| trim(encode_pair(r, None, vocab, max_len, None)))
            .collect();
        RrData {
            responses: ResponseTable { texts, encoded },
            items,
            max_len,
        }
    }

    pub fn subset(&self, idx: &[usize]) -> RrData {
        RrData {
            responses: self.responses.clone(),
            items: idx.iter().map(|&i| self.items[i].clone()).collect(),
            max_len: self.max_len,
        }
    }
}

/// Candidate lists: the gold first, then `pool − 1` distinct other responses
/// drawn from the items' own responses.
pub fn sample_candidates(data: &RrData, pool: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut ids: Vec<usize> = data.items.iter().map(|it| it.response).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < pool || pool < 2 {
        return Err(Error::InvalidArgument(format!(
            "a pool of {pool} needs at least {pool} distinct responses, found {}",
            ids.len()
        )));
    }
    let mut rng = Rng::seed_from_u64(seed);
    Ok(data
        .items
        .iter()
        .map(|it| {
            let g = ids
                .binary_search(&it.response)
                .expect("gold is an item response");
            let mut c = vec![it.response];
            c.extend(
                index::sample(&mut rng, ids.len() - 1, pool - 1)
                    .into_iter()
                    .map(|i| {
                        let i = if i >= g { i + 1 } else { i };
                        ids[i]
                    }),
            );
            c
        })
        .collect())
}

fn dual_scores<T: Real>(
    model: &EncoderModel<T>,
    data: &RrData,
    item: &RrItem,
    cands: &[usize],
    cache: &mut HashMap<usize, Vec<T>>,
) -> Result<Vec<f64>> {
    let c = model.forward(&item.context_seq, false, None)?;
    cands
        .iter()
        .map(|&r| {
            if !cache.contains_key(&r) {
                let e = model.forward(&data.responses.encoded[r], false, None)?;
                cache.insert(r, e.pooled);
            }
            Ok(dot(&c.pooled, &cache[&r]).f64())
        })
        .collect()
}

/// Pessimistic ranks of the gold response for every item.
pub fn rr_ranks<T: Real>(
    model: &EncoderModel<T>,
    vocab: &Vocab,
    mode: ScoringMode,
    data: &RrData,
    pool: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let cands = sample_candidates(data, pool, seed)?;
    let mut cache = HashMap::new();
    data.items
        .iter()
        .zip(&cands)
        .map(|(it, c)| {
            let scores = match mode {
                ScoringMode::DualEncoderDot => dual_scores(model, data, it, c, &mut cache)?,
                ScoringMode::LinearOnCls => {
                    let pairs = c
                        .iter()
                        .map(|&r| {
                            encode_history_pair(
                                &it.context,
                                &data.responses.texts[r],
                                vocab,
                                data.max_len,
                            )
                        })
                        .collect();
                    score(model, &ScoreInput::Joint { pairs }, false, None)?.0
                }
            };
            Ok(pessimistic_rank(&scores, 0))
        })
        .collect()
}

/// Rank of `gold` among `candidates` for one context.
pub fn rr_rank<T: Real>(
    model: &EncoderModel<T>,
    vocab: &Vocab,
    mode: ScoringMode,
    max_len: usize,
    context: &[Utterance],
    candidates: &[String],
    gold: &str,
) -> Result<usize> {
    let g = candidates.iter().position(|c| c == gold).ok_or_else(|| {
        Error::InvalidArgument("gold response is not among the candidates".into())
    })?;
    let input = match mode {
        ScoringMode::DualEncoderDot => ScoreInput::Dual {
            context: trim(encode_history(context, vocab, max_len)),
            responses: candidates
                .iter()
                .map(|r| trim(encode_pair(r, None, vocab, max_len, None)))
                .collect(),
        },
        ScoringMode::LinearOnCls => ScoreInput::Joint {
            pairs: candidates
                .iter()
                .map(|r| encode_history_pair(context, r, vocab, max_len))
                .collect(),
        },
    };
    let (scores, _) = score(model, &input, false, None)?;
    Ok(pessimistic_rank(&scores, g))
}

/// In-batch contrastive loss: each context against every gold response of
/// the batch, with duplicates of its own gold left out.
pub fn rr_loss<T: Real>(
    model: &EncoderModel<T>,
    vocab: &Vocab,
    mode: ScoringMode,
    data: &RrData,
    items: &[usize],
    mut grads: Option<&mut Grads<T>>,
    mut dropout: Option<&mut Rng>,
) -> Result<LossValue> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty RR batch".into()));
    }
    let record = grads.is_some();
    let inv = 1.0 / items.len() as f64;
    let golds: Vec<usize> = items.iter().map(|&i| data.items[i].response).collect();
    let (mut loss, mut correct, mut rr) = (0.0, 0usize, 0.0);
    // candidate columns for row i: its gold plus golds with different text
    let columns = |i: usize| -> (Vec<usize>, usize) {
        let cols: Vec<usize> = (0..golds.len())
            .filter(|&j| j == i || golds[j] != golds[i])
            .collect();
        let t = cols.iter().position(|&j| j == i).expect("own gold kept");
        (cols, t)
    };
    match mode {
        ScoringMode::DualEncoderDot => {
            let h = model.hidden();
            let ctx = items
                .iter()
                .map(|&i| model.forward(&data.items[i].context_seq, record, dropout.as_deref_mut()))
                .collect::<Result<Vec<_>>>()?;
            let resp = golds
                .iter()
                .map(|&r| model.forward(&data.responses.encoded[r], record, dropout.as_deref_mut()))
                .collect::<Result<Vec<_>>>()?;
            let mut dc = vec![vec![0.0; h]; items.len()];
            let mut dr = vec![vec![0.0; h]; items.len()];
            for i in 0..items.len() {
                let (cols, t) = columns(i);
                let scores: Vec<f64> = cols
                    .iter()
                    .map(|&j| dot(&ctx[i].pooled, &resp[j].pooled).f64())
                    .collect();
                let (l, g, rank) = nce_from_scores(&scores, t)?;
                loss += l * inv;
                correct += (rank == 1) as usize;
                rr += 1.0 / rank as f64;
                for (&j, &d) in cols.iter().zip(&g) {
                    let d = d * inv;
                    for k in 0..h {
                        dc[i][k] += d * resp[j].pooled[k].f64();
                        dr[j][k] += d * ctx[i].pooled[k].f64();
                    }
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                let cast = |v: &[f64]| v.iter().map(|&x| T::of(x)).collect::<Vec<T>>();
                for (e, d) in ctx.iter().zip(&dc) {
                    model.backward(e, None, Some(&cast(d)), g)?;
                }
                for (e, d) in resp.iter().zip(&dr) {
                    model.backward(e, None, Some(&cast(d)), g)?;
                }
            }
        }
        ScoringMode::LinearOnCls => {
            for (i, &it) in items.iter().enumerate() {
                let (cols, t) = columns(i);
                let item = &data.items[it];
                let pairs = cols
                    .iter()
                    .map(|&j| {
                        encode_history_pair(
                            &item.context,
                            &data.responses.texts[golds[j]],
                            vocab,
                            data.max_len,
                        )
                    })
                    .collect();
                let (scores, trace) = score(
                    model,
                    &ScoreInput::Joint { pairs },
                    record,
                    dropout.as_deref_mut(),
                )?;
                let (l, g, rank) = nce_from_scores(&scores, t)?;
                loss += l * inv;
                correct += (rank == 1) as usize;
                rr += 1.0 / rank as f64;
                if let Some(gr) = grads.as_deref_mut() {
                    let d: Vec<f64> = g.iter().map(|x| x * inv).collect();
                    score_backward(model, &trace, &d, gr)?;
                }
            }
        }
    }
    Ok(LossValue {
        loss,
        count: items.len(),
        accuracy: Some(correct as f64 * inv),
        mrr: Some(rr * inv),
    })
}

/// Fine-tuning task: in-batch training, dev R@1 over a fixed candidate pool.
pub struct RrTask<'a> {
    pub vocab: &'a Vocab,
    pub mode: ScoringMode,
    pub train: RrData,
    pub dev: RrData,
    pub pool: usize,
    pub seed: u64,
}

impl<T: Real> Task<T> for RrTask<'_> {
    fn train_len(&self) -> usize {
        self.train.items.len()
    }

    fn batch_loss(
        &self,
        model: &EncoderModel<T>,
        items: &[usize],
        grads: Option<&mut Grads<T>>,
        dropout: Option<&mut Rng>,
        _aux: &mut Rng,
    ) -> Result<LossValue> {
        rr_loss(
            model,
            self.vocab,
            self.mode,
            &self.train,
            items,
            grads,
            dropout,
        )
    }

    fn dev_metric(&self, model: &EncoderModel<T>) -> Result<f64> {
        recall_at_1(&rr_ranks(
            model, self.vocab, self.mode, &self.dev, self.pool, self.seed,
        )?)
    }

    fn higher_is_better(&self) -> bool {
        true
    }

    fn metric_name(&self) -> &'static str {
        "dev_r_at_1"
    }
}
