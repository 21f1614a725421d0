//! Downstream tasks (state tracking and response retrieval), their metrics,
//! and the few-shot, cross-domain and multi-domain experiment harnesses.

mod dst;
mod metrics;
mod rr;

pub use dst::{
    argmax_first, dst_forward, dst_head_prefix, dst_items, dst_loss, jga_on_items, predict_items,
    DstHead, DstItem, DstTask, SlotHead,
};
pub use metrics::{
    complete_gold, digest_json, joint_goal_accuracy, recall_at_1, turn_correct, EvalReport,
    TurnPrediction,
};
pub use rr::{
    encode_history_pair, rr_loss, rr_rank, rr_ranks, sample_candidates, ResponseTable, RrData,
    RrItem, RrTask, DEFAULT_POOL,
};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::adapters::{inject, is_adapter_param, AdapterBank, Compose};
use crate::data::{Dialog, Ontology};
use crate::error::{Error, Result};
use crate::neural::{EncoderModel, Real, Rng, Vocab};
use crate::objectives::{
    ensure_rs_head, specialize, train, Schedule, ScoringMode, SpecCorpus, TrainLog,
    DEFAULT_DEV_FRACTION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DownstreamTask {
    Dst,
    Rr,
}

impl std::str::FromStr for DownstreamTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dst" => Ok(DownstreamTask::Dst),
            "rr" => Ok(DownstreamTask::Rr),
            other => Err(Error::InvalidArgument(format!("unknown task {other:?}"))),
        }
    }
}

impl std::fmt::Display for DownstreamTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DownstreamTask::Dst => "dst",
            DownstreamTask::Rr => "rr",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub task: DownstreamTask,
    pub schedule: Schedule,
    pub mode: ScoringMode,
    /// Candidate pool for retrieval.
    pub pool: usize,
    pub max_len: usize,
    /// Let injected adapters move during fine-tuning.
    #[serde(default)]
    pub train_adapters: bool,
}

impl FinetuneConfig {
    /// Batch 6 for DST and 24 for RR, pool of 20.
    pub fn new(task: DownstreamTask, seed: u64) -> Self {
        let batch = match task {
            DownstreamTask::Dst => 6,
            DownstreamTask::Rr => 24,
        };
        FinetuneConfig {
            task,
            schedule: Schedule::downstream(batch, seed),
            mode: ScoringMode::default(),
            pool: DEFAULT_POOL,
            max_len: 128,
            train_adapters: false,
        }
    }

    pub fn metric_name(&self) -> String {
        match self.task {
            DownstreamTask::Dst => "jga".into(),
            DownstreamTask::Rr => format!("r{}@1", self.pool),
        }
    }
}

/// Train/dev/test dialogs of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamData {
    pub train: Vec<Dialog>,
    pub dev: Vec<Dialog>,
    pub test: Vec<Dialog>,
    /// Derived from all three splits when absent.
    pub ontology: Option<Ontology>,
}

impl DownstreamData {
    pub fn ontology(&self) -> Ontology {
        self.ontology.clone().unwrap_or_else(|| {
            Ontology::from_dialogs(self.train.iter().chain(&self.dev).chain(&self.test))
        })
    }

    /// Keeps dialogs whose domain set intersects `domains`.
    pub fn covering(&self, domains: &[String]) -> DownstreamData {
        let keep = |v: &[Dialog]| dialogs_covering(v, domains);
        let refs: Vec<&str> = domains.iter().map(String::as_str).collect();
        DownstreamData {
            train: keep(&self.train),
            dev: keep(&self.dev),
            test: keep(&self.test),
            ontology: Some(self.ontology().restrict(&refs)),
        }
    }
}

pub fn dialogs_covering(dialogs: &[Dialog], domains: &[String]) -> Vec<Dialog> {
    dialogs
        .iter()
        .filter(|d| domains.iter().any(|x| d.domains.contains(x)))
        .cloned()
        .collect()
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<T> {
    pub model: EncoderModel<T>,
    pub head: Option<DstHead>,
    pub report: EvalReport,
    pub log: TrainLog,
}

fn config_digest<T: Real>(
    model: &EncoderModel<T>,
    cfg: &FinetuneConfig,
    extra: &serde_json::Value,
) -> String {
    digest_json(&serde_json::json!({
        "encoder": model.config,
        "adapters": model.adapter_setup().map(|s| (s.compose(), s.domains().join("+"))),
        "finetune": cfg,
        "extra": extra,
    }))
}

/// Fine-tunes a copy of `model` on `data.train`, picks the best dev
/// checkpoint, and reports the metric on `data.test`.
pub fn finetune<T: Real>(
    model: &EncoderModel<T>,
    vocab: &Vocab,
    data: &DownstreamData,
    domains: &[String],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome<T>> {
    let mut model = model.clone();
    let has_adapters = model.adapter_setup().is_some();
    let freeze_adapters = has_adapters && !cfg.train_adapters;
    model
        .params
        .set_frozen_by(|n| freeze_adapters && is_adapter_param(n));
    let digest = config_digest(&model, cfg, &serde_json::Value::Null);
    let report = |value: f64, n_items: usize| EvalReport {
        task: cfg.task.to_string(),
        domains: domains.to_vec(),
        metric: cfg.metric_name(),
        value,
        n_items,
        seed: cfg.schedule.seed,
        config_digest: digest.clone(),
        label: String::new(),
    };
    match cfg.task {
        DownstreamTask::Dst => {
            let ontology = data.ontology();
            let head = DstHead::attach(&mut model, &ontology, vocab, cfg.max_len)?;
            let task = DstTask {
                head: &head,
                ontology: &ontology,
                train: dst_items(&data.train, &head, vocab)?,
                dev: dst_items(&data.dev, &head, vocab)?,
            };
            let test = dst_items(&data.test, &head, vocab)?;
            let out = train(&model, &task, &cfg.schedule)?;
            let value = jga_on_items(&out.model, &head, &ontology, &test)?;
            Ok(FinetuneOutcome {
                model: out.model,
                head: Some(head),
                report: report(value, test.len()),
                log: out.log,
            })
        }
        DownstreamTask::Rr => {
            if cfg.mode == ScoringMode::LinearOnCls {
                ensure_rs_head(&mut model)?;
            }
            let task = RrTask {
                vocab,
                mode: cfg.mode,
                train: RrData::from_dialogs(&data.train, vocab, cfg.max_len),
                dev: RrData::from_dialogs(&data.dev, vocab, cfg.max_len),
                pool: cfg.pool,
                seed: cfg.schedule.seed,
            };
            let test = RrData::from_dialogs(&data.test, vocab, cfg.max_len);
            let out = train(&model, &task, &cfg.schedule)?;
            let ranks = rr_ranks(
                &out.model,
                vocab,
                cfg.mode,
                &test,
                cfg.pool,
                cfg.schedule.seed,
            )?;
            Ok(FinetuneOutcome {
                model: out.model,
                head: None,
                report: report(recall_at_1(&ranks)?, ranks.len()),
                log: out.log,
            })
        }
    }
}

pub const FEW_SHOT_FRACTIONS: [f64; 7] = [5.0, 10.0, 20.0, 30.0, 50.0, 70.0, 100.0];

/// Indices of the `round(p·n/100)` dialogs kept at `percent`: a prefix of
/// one seeded shuffle, so smaller fractions nest inside larger ones.
/// Returned in original order.
pub fn few_shot_subset(n: usize, percent: f64, seed: u64) -> Result<Vec<usize>> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction {percent}% is outside (0, 100]"
        )));
    }
    let count = (percent * n as f64 / 100.0).round() as usize;
    if count == 0 {
        return Err(Error::InvalidArgument(format!(
            "{percent}% of {n} training dialogs is zero dialogs"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut Rng::seed_from_u64(seed));
    idx.truncate(count);
    idx.sort_unstable();
    Ok(idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotPoint {
    pub percent: f64,
    pub n_dialogs: usize,
    pub report: EvalReport,
}

/// One fine-tuning run per training fraction; dev and test stay whole.
pub fn few_shot_curve<T: Real>(
    model: &EncoderModel<T>,
    vocab: &Vocab,
    data: &DownstreamData,
    domains: &[String],
    percents: &[f64],
    cfg: &FinetuneConfig,
) -> Result<Vec<FewShotPoint>> {
    let subsets = percents
        .iter()
        .map(|&p| few_shot_subset(data.train.len(), p, cfg.schedule.seed))
        .collect::<Result<Vec<_>>>()?;
    let ontology = data.ontology();
    percents
        .iter()
        .zip(subsets)
        .map(|(&p, idx)| {
            let sub = DownstreamData {
                train: idx.iter().map(|&i| data.train[i].clone()).collect(),
                dev: data.dev.clone(),
                test: data.test.clone(),
                ontology: Some(ontology.clone()),
            };
            let mut out = finetune(model, vocab, &sub, domains, cfg)?;
            out.report.label = format!("fraction={p}");
            Ok(FewShotPoint {
                percent: p,
                n_dialogs: idx.len(),
                report: out.report,
            })
        })
        .collect()
}

pub fn few_shot_tsv(points: &[FewShotPoint]) -> String {
    let mut s = String::from("percent\tn_dialogs\tmetric\tvalue\n");
    for p in points {
        s.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\n",
            p.percent, p.n_dialogs, p.report.metric, p.report.value
        ));
    }
    s
}

/// Baseline and specialized results per target, and their differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub metric: String,
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    pub baseline: Vec<f64>,
    /// `[source][target]`.
    pub specialized: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
    pub reports: Vec<EvalReport>,
}

impl TransferMatrix {
    pub fn tsv(&self) -> String {
        let mut s = format!("source\\target\t{}\n", self.targets.join("\t"));
        for (src, row) in self.sources.iter().zip(&self.delta) {
            let cells: Vec<String> = row.iter().map(|d| format!("{d:.6}")).collect();
            s.push_str(&format!("{src}\t{}\n", cells.join("\t")));
        }
        s
    }
}

/// Fine-tunes the baseline and every source-specialized model on every
/// target domain.
pub fn cross_domain_matrix<T: Real>(
    baseline: &EncoderModel<T>,
    specialized: &BTreeMap<String, EncoderModel<T>>,
    sources: &[String],
    targets: &BTreeMap<String, DownstreamData>,
    vocab: &Vocab,
    cfg: &FinetuneConfig,
) -> Result<TransferMatrix> {
    let missing: Vec<&str> = sources
        .iter()
        .filter(|s| !specialized.contains_key(*s))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Missing(format!(
            "no specialized checkpoint for source domain(s): {}",
            missing.join(", ")
        )));
    }
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no target domains".into()));
    }
    let mut reports = Vec::new();
    let mut baseline_row = Vec::new();
    for (t, data) in targets {
        let mut r = finetune(baseline, vocab, data, std::slice::from_ref(t), cfg)?.report;
        r.label = "source=baseline".into();
        baseline_row.push(r.value);
        reports.push(r);
    }
    let mut spec_rows = Vec::new();
    let mut delta = Vec::new();
    for s in sources {
        let mut row = Vec::new();
        for (t, data) in targets {
            let mut r =
                finetune(&specialized[s], vocab, data, std::slice::from_ref(t), cfg)?.report;
            r.label = format!("source={s}");
            row.push(r.value);
            reports.push(r);
        }
        delta.push(row.iter().zip(&baseline_row).map(|(a, b)| a - b).collect());
        spec_rows.push(row);
    }
    Ok(TransferMatrix {
        metric: cfg.metric_name(),
        sources: sources.to_vec(),
        targets: targets.keys().cloned().collect(),
        baseline: baseline_row,
        specialized: spec_rows,
        delta,
        reports,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiDomainVariant {
    FullFt,
    Stack,
    Fuse,
}

impl std::str::FromStr for MultiDomainVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_ft" | "full-ft" => Ok(MultiDomainVariant::FullFt),
            "stack" => Ok(MultiDomainVariant::Stack),
            "fuse" => Ok(MultiDomainVariant::Fuse),
            other => Err(Error::InvalidArgument(format!(
                "unknown multi-domain variant {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for MultiDomainVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MultiDomainVariant::FullFt => "full_ft",
            MultiDomainVariant::Stack => "stack",
            MultiDomainVariant::Fuse => "fuse",
        })
    }
}

/// Domain combinations evaluated by default.
pub const DEFAULT_COMBINATIONS: [&[&str]; 3] = [
    &["hotel", "train"],
    &["attraction", "train"],
    &["hotel", "taxi", "restaurant"],
];

/// Inputs of one multi-domain run.
pub struct MultiDomainSetup<'a, T> {
    pub domains: Vec<String>,
    pub variant: MultiDomainVariant,
    pub base: &'a EncoderModel<T>,
    /// Single-domain banks, for stack and fuse.
    pub banks: &'a BTreeMap<String, AdapterBank<T>>,
    /// Concatenated specialization corpus, for full fine-tuning.
    pub corpus: Option<&'a SpecCorpus>,
    pub spec_schedule: &'a Schedule,
}

/// Builds the variant's model, then fine-tunes and evaluates it on the
/// dialogs touching any of the domains. Returns the report and any
/// composition warning.
pub fn multi_domain_run<T: Real>(
    setup: &MultiDomainSetup<'_, T>,
    vocab: &Vocab,
    data: &DownstreamData,
    cfg: &FinetuneConfig,
) -> Result<(EvalReport, Option<String>)> {
    if setup.domains.is_empty() {
        return Err(Error::InvalidArgument("empty domain set".into()));
    }
    let (model, warning) = match setup.variant {
        MultiDomainVariant::FullFt => {
            let corpus = setup.corpus.ok_or_else(|| {
                Error::Missing("full fine-tuning needs the concatenated corpus".into())
            })?;
            (
                specialize(
                    setup.base,
                    corpus,
                    setup.spec_schedule,
                    DEFAULT_DEV_FRACTION,
                )?
                .model,
                None,
            )
        }
        MultiDomainVariant::Stack | MultiDomainVariant::Fuse => {
            let missing: Vec<&str> = setup
                .domains
                .iter()
                .filter(|d| !setup.banks.contains_key(*d))
                .map(String::as_str)
                .collect();
            if !missing.is_empty() {
                return Err(Error::Missing(format!(
                    "no adapter bank for: {}",
                    missing.join(", ")
                )));
            }
            let banks: Vec<AdapterBank<T>> = setup
                .domains
                .iter()
                .map(|d| setup.banks[d].clone())
                .collect();
            let compose = if setup.variant == MultiDomainVariant::Stack {
                Compose::Stack
            } else {
                Compose::Fuse
            };
            inject(setup.base, &banks, compose, None)?
        }
    };
    let sub = data.covering(&setup.domains);
    let mut report = finetune(&model, vocab, &sub, &setup.domains, cfg)?.report;
    report.label = format!("variant={}", setup.variant);
    Ok((report, warning))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Tsv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "tsv" => Ok(ReportFormat::Tsv),
            other => Err(Error::InvalidArgument(format!(
                "unknown report format {other:?}"
            ))),
        }
    }
}

pub fn format_reports(reports: &[EvalReport], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(reports)? + "\n"),
        ReportFormat::Tsv => {
            let mut s = String::from(EvalReport::TSV_HEADER);
            s.push('\n');
            for r in reports {
                s.push_str(&r.tsv_row());
                s.push('\n');
            }
            Ok(s)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn few_shot_counts_round_and_nest() {
        assert_eq!(few_shot_subset(1654, 5.0, 1).unwrap().len(), 83);
        let a = few_shot_subset(200, 5.0, 9).unwrap();
        let b = few_shot_subset(200, 10.0, 9).unwrap();
        assert!(a.iter().all(|i| b.contains(i)));
        assert_eq!(
            few_shot_subset(50, 100.0, 3).unwrap(),
            (0..50).collect::<Vec<_>>()
        );
        assert!(few_shot_subset(5, 5.0, 1).is_err());
        assert!(few_shot_subset(5, 0.0, 1).is_err());
    }
}
