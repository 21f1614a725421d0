//! Specialization objectives: masked language modelling on flat text,
//! binary response selection (RS-Class) and contrastive response selection
//! (RS-Contrast) on dialog triples.

mod losses;
mod train;

pub use losses::{
    bce_from_score, ensure_mlm_head, ensure_rs_head, mlm_loss, nce_from_scores, pessimistic_rank,
    rs_class_loss, rs_contrast_loss, score, score_backward, LossValue, ScoreInput, ScoreTrace,
    ScoringMode, MLM_BIAS, RS_BIAS, RS_WEIGHT,
};
pub use train::{train, EarlyStopping, EpochLog, Schedule, Task, TrainLog, TrainOutcome, LR_GRID};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::corpus::{group_for_nce, RsLabel, TripleInstances};
use crate::error::{Error, Result};
use crate::neural::masking::{mask_sequence, DEFAULT_MASK_PROB};
use crate::neural::tokenizer::DEFAULT_SEGMENT_CAP;
use crate::neural::{encode_pair, EncodedSeq, EncoderModel, Grads, MaskedSeq, Real, Rng, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Mlm,
    RsClass,
    RsContrast,
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlm" => Ok(Objective::Mlm),
            "rs-class" | "rs_class" => Ok(Objective::RsClass),
            "rs-contrast" | "rs_contrast" => Ok(Objective::RsContrast),
            other => Err(Error::InvalidArgument(format!(
                "unknown objective {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Mlm => "mlm",
            Objective::RsClass => "rs-class",
            Objective::RsContrast => "rs-contrast",
        })
    }
}

/// Shuffles `0..n` with `seed` and puts the last `dev_fraction` share (at
/// least one item, at most `n − 1`) in the development split.
pub fn split_train_dev(n: usize, dev_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InvalidArgument(
            "need at least two items to split".into(),
        ));
    }
    if !(0.0..1.0).contains(&dev_fraction) {
        return Err(Error::InvalidArgument(
            "dev fraction must lie in [0, 1)".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut Rng::seed_from_u64(seed));
    let dev = ((n as f64 * dev_fraction).round() as usize).clamp(1, n - 1);
    let dev_idx = idx.split_off(n - dev);
    Ok((idx, dev_idx))
}

pub const DEFAULT_DEV_FRACTION: f64 = 0.05;

/// Encodes one candidate group for the chosen scoring mode.
pub fn encode_group(
    vocab: &Vocab,
    mode: ScoringMode,
    max_len: usize,
    context: &str,
    responses: &[String],
) -> ScoreInput {
    let cap = Some(DEFAULT_SEGMENT_CAP);
    match mode {
        ScoringMode::DualEncoderDot => ScoreInput::Dual {
            context: trim(encode_pair(context, None, vocab, max_len, cap)),
            responses: responses
                .iter()
                .map(|r| trim(encode_pair(r, None, vocab, max_len, cap)))
                .collect(),
        },
        ScoringMode::LinearOnCls => ScoreInput::Joint {
            pairs: responses
                .iter()
                .map(|r| trim(encode_pair(context, Some(r), vocab, max_len, cap)))
                .collect(),
        },
    }
}

/// Drops trailing padding; the encoder only reads the valid prefix.
pub fn trim(mut seq: EncodedSeq) -> EncodedSeq {
    let n = seq.valid_len();
    seq.ids.truncate(n);
    seq.segments.truncate(n);
    seq.mask.truncate(n);
    seq
}

/// Specialization data, already encoded.
#[derive(Debug, Clone)]
pub enum SpecCorpus {
    Mlm(Vec<EncodedSeq>),
    RsClass(Vec<(ScoreInput, Vec<bool>)>),
    RsContrast(Vec<(ScoreInput, usize)>),
}

impl SpecCorpus {
    pub fn objective(&self) -> Objective {
        match self {
            SpecCorpus::Mlm(_) => Objective::Mlm,
            SpecCorpus::RsClass(_) => Objective::RsClass,
            SpecCorpus::RsContrast(_) => Objective::RsContrast,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SpecCorpus::Mlm(v) => v.len(),
            SpecCorpus::RsClass(v) => v.len(),
            SpecCorpus::RsContrast(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mlm<'a>(
        lines: impl IntoIterator<Item = &'a str>,
        vocab: &Vocab,
        max_len: usize,
    ) -> Self {
        SpecCorpus::Mlm(
            lines
                .into_iter()
                .map(|l| trim(encode_pair(l, None, vocab, max_len, None)))
                .collect(),
        )
    }

    /// One item per triple: the context against its positive and negatives.
    pub fn rs_class(
        groups: &[TripleInstances],
        vocab: &Vocab,
        mode: ScoringMode,
        max_len: usize,
    ) -> Self {
        SpecCorpus::RsClass(
            groups
                .iter()
                .map(|g| {
                    let responses: Vec<String> =
                        g.instances.iter().map(|i| i.response.clone()).collect();
                    let labels = g
                        .instances
                        .iter()
                        .map(|i| i.label == RsLabel::Positive)
                        .collect();
                    (
                        encode_group(vocab, mode, max_len, &g.instances[0].context, &responses),
                        labels,
                    )
                })
                .collect(),
        )
    }

    pub fn rs_contrast(
        groups: &[TripleInstances],
        vocab: &Vocab,
        mode: ScoringMode,
        max_len: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(groups.len());
        for g in groups {
            let nce = group_for_nce(g, &mut rng)?;
            out.push((
                encode_group(vocab, mode, max_len, &nce.context, &nce.responses),
                nce.true_index,
            ));
        }
        Ok(SpecCorpus::RsContrast(out))
    }

    fn subset(&self, idx: &[usize]) -> SpecCorpus {
        match self {
            SpecCorpus::Mlm(v) => SpecCorpus::Mlm(idx.iter().map(|&i| v[i].clone()).collect()),
            SpecCorpus::RsClass(v) => {
                SpecCorpus::RsClass(idx.iter().map(|&i| v[i].clone()).collect())
            }
            SpecCorpus::RsContrast(v) => {
                SpecCorpus::RsContrast(idx.iter().map(|&i| v[i].clone()).collect())
            }
        }
    }
}

/// Train/dev pair for one objective.
pub struct SpecTask {
    train: SpecCorpus,
    dev: SpecCorpus,
    mask_prob: f64,
    dev_mask_seed: u64,
}

impl SpecTask {
    pub fn new(corpus: &SpecCorpus, dev_fraction: f64, seed: u64) -> Result<Self> {
        let (tr, dv) = split_train_dev(corpus.len(), dev_fraction, seed)?;
        Ok(SpecTask {
            train: corpus.subset(&tr),
            dev: corpus.subset(&dv),
            mask_prob: DEFAULT_MASK_PROB,
            dev_mask_seed: seed ^ 0xd1b5_4a32_d192_ed03,
        })
    }

    pub fn from_splits(train: SpecCorpus, dev: SpecCorpus, seed: u64) -> Result<Self> {
        if train.objective() != dev.objective() {
            return Err(Error::InvalidArgument(
                "train and dev corpora differ in objective".into(),
            ));
        }
        Ok(SpecTask {
            train,
            dev,
            mask_prob: DEFAULT_MASK_PROB,
            dev_mask_seed: seed ^ 0xd1b5_4a32_d192_ed03,
        })
    }

    pub fn train_corpus(&self) -> &SpecCorpus {
        &self.train
    }

    pub fn dev_corpus(&self) -> &SpecCorpus {
        &self.dev
    }

    /// Loss over `items` of `corpus` (MLM masks drawn from `rng`).
    fn loss<T: Real>(
        &self,
        corpus: &SpecCorpus,
        model: &EncoderModel<T>,
        items: &[usize],
        grads: Option<&mut Grads<T>>,
        dropout: Option<&mut Rng>,
        rng: &mut Rng,
    ) -> Result<LossValue> {
        match corpus {
            SpecCorpus::Mlm(v) => {
                let vs = model.config.vocab_size;
                let batch: Vec<MaskedSeq> = items
                    .iter()
                    .map(|&i| mask_sequence(&v[i], vs, self.mask_prob, rng))
                    .collect();
                mlm_loss(model, &batch, grads, dropout)
            }
            SpecCorpus::RsClass(v) => {
                let batch: Vec<_> = items.iter().map(|&i| v[i].clone()).collect();
                rs_class_loss(model, &batch, grads, dropout)
            }
            SpecCorpus::RsContrast(v) => {
                let batch: Vec<_> = items.iter().map(|&i| v[i].clone()).collect();
                rs_contrast_loss(model, &batch, grads, dropout)
            }
        }
    }
}

impl<T: Real> Task<T> for SpecTask {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn batch_loss(
        &self,
        model: &EncoderModel<T>,
        items: &[usize],
        grads: Option<&mut Grads<T>>,
        dropout: Option<&mut Rng>,
        aux: &mut Rng,
    ) -> Result<LossValue> {
        self.loss(&self.train, model, items, grads, dropout, aux)
    }

    /// MLM: dev loss under a fixed mask. RS: mean reciprocal rank of the
    /// true response (RS-Class ranks its positive among the group).
    fn dev_metric(&self, model: &EncoderModel<T>) -> Result<f64> {
        let all: Vec<usize> = (0..self.dev.len()).collect();
        match &self.dev {
            SpecCorpus::Mlm(_) => {
                let mut rng = Rng::seed_from_u64(self.dev_mask_seed);
                Ok(self
                    .loss(&self.dev, model, &all, None, None, &mut rng)?
                    .loss)
            }
            SpecCorpus::RsClass(v) => {
                let mut rr = 0.0;
                for (input, labels) in v {
                    let (scores, _) = score(model, input, false, None)?;
                    let gold = labels
                        .iter()
                        .position(|&l| l)
                        .ok_or_else(|| Error::Validation("group without positive".into()))?;
                    rr += 1.0 / pessimistic_rank(&scores, gold) as f64;
                }
                Ok(rr / v.len().max(1) as f64)
            }
            SpecCorpus::RsContrast(_) => {
                let mut rng = Rng::seed_from_u64(0);
                Ok(self
                    .loss(&self.dev, model, &all, None, None, &mut rng)?
                    .mrr
                    .unwrap_or(0.0))
            }
        }
    }

    fn higher_is_better(&self) -> bool {
        !matches!(self.dev, SpecCorpus::Mlm(_))
    }

    fn metric_name(&self) -> &'static str {
        match self.dev {
            SpecCorpus::Mlm(_) => "dev_loss",
            _ => "dev_mrr",
        }
    }
}

/// Specializes `model` on `corpus` (95/5 seeded split by default) and
/// returns the best development checkpoint over the schedule's rates.
pub fn specialize<T: Real>(
    model: &EncoderModel<T>,
    corpus: &SpecCorpus,
    schedule: &Schedule,
    dev_fraction: f64,
) -> Result<TrainOutcome<T>> {
    let mut model = model.clone();
    match corpus.objective() {
        Objective::Mlm => {
            ensure_mlm_head(&mut model)?;
        }
        Objective::RsClass | Objective::RsContrast => {
            let joint = match corpus {
                SpecCorpus::RsClass(v) => v.first().map(|x| x.0.mode()),
                SpecCorpus::RsContrast(v) => v.first().map(|x| x.0.mode()),
                SpecCorpus::Mlm(_) => None,
            } == Some(ScoringMode::LinearOnCls);
            if joint {
                ensure_rs_head(&mut model)?;
            }
        }
    }
    let task = SpecTask::new(corpus, dev_fraction, schedule.seed)?;
    train(&model, &task, schedule)
}
