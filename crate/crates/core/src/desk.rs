//! Desk-scale experiment protocol on the synthetic benchmark: a toy encoder
//! pretrained once on general threads, then specialized per domain (fully or
//! through adapters) and fine-tuned on the downstream tasks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::{
    extract_bank, freeze_base, init_adapters, inject, AdapterBank, AdapterConfig, BankProvenance,
    Compose,
};
use crate::corpus::TripleInstances;
use crate::error::{Error, Result};
use crate::eval::{
    finetune, multi_domain_run, DownstreamTask, EvalReport, FinetuneConfig, MultiDomainSetup,
    MultiDomainVariant,
};
use crate::neural::{EncoderConfig, EncoderModel};
use crate::objectives::{specialize, Schedule, ScoringMode, SpecCorpus, DEFAULT_DEV_FRACTION};
use crate::synth::{SynthBench, SynthConfig, DOMAINS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpecObjective {
    RsClass,
    RsContrast,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeskConfig {
    pub bench: SynthConfig,
    pub encoder: EncoderConfig,
    /// General pretraining of the shared base, always seeded with 0.
    pub pretrain: Schedule,
    pub specialize: Schedule,
    pub adapter_specialize: Schedule,
    pub adapter: AdapterConfig,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_patience: usize,
    /// Keep updating adapter weights during downstream fine-tuning.
    pub finetune_adapters: bool,
    pub seeds: Vec<u64>,
}

impl Default for DeskConfig {
    fn default() -> Self {
        let bench = SynthConfig {
            seed: 0,
            train_dialogs: 20,
            dev_dialogs: 30,
            test_dialogs: 150,
            threads: 1700,
        };
        let mut encoder = EncoderConfig::new(0);
        encoder.ffn = 128;
        encoder.max_len = 64;
        let sched = |epochs, lr| Schedule {
            epochs,
            batch_size: 32,
            lrs: vec![lr],
            patience: 2,
            seed: 0,
            max_batches_per_epoch: None,
            dropout: true,
        };
        let mut adapter = AdapterConfig::for_hidden(encoder.hidden);
        adapter.bottleneck = 16;
        DeskConfig {
            bench,
            encoder,
            pretrain: sched(2, 1e-3),
            specialize: sched(2, 1e-3),
            adapter_specialize: sched(6, 1e-2),
            adapter,
            finetune_epochs: 40,
            finetune_lr: 5e-4,
            finetune_patience: 10,
            finetune_adapters: false,
            seeds: vec![1, 2, 3],
        }
    }
}

/// Generated benchmark plus the pretrained base shared by all runs.
pub struct Desk {
    pub cfg: DeskConfig,
    pub bench: SynthBench,
    pub base: EncoderModel<f32>,
}

impl Desk {
    pub fn prepare(cfg: DeskConfig) -> Result<Desk> {
        let bench = SynthBench::generate(&cfg.bench)?;
        let mut enc = cfg.encoder.clone();
        enc.vocab_size = bench.vocab.len();
        let init = EncoderModel::new(enc, 0)?;
        let corpus = SpecCorpus::rs_contrast(
            &bench.pretrain,
            &bench.vocab,
            ScoringMode::DualEncoderDot,
            cfg.encoder.max_len,
            0,
        )?;
        let mut sched = cfg.pretrain.clone();
        sched.seed = 0;
        let base = specialize(&init, &corpus, &sched, DEFAULT_DEV_FRACTION)?.model;
        Ok(Desk { cfg, bench, base })
    }

    pub fn corpus(
        &self,
        domains: &[&str],
        objective: SpecObjective,
        seed: u64,
    ) -> Result<SpecCorpus> {
        let mut groups: Vec<TripleInstances> = Vec::new();
        for d in domains {
            groups.extend(self.bench.domain(d)?.instances.iter().cloned());
        }
        let (mode, max_len) = (ScoringMode::DualEncoderDot, self.cfg.encoder.max_len);
        match objective {
            SpecObjective::RsClass => Ok(SpecCorpus::rs_class(
                &groups,
                &self.bench.vocab,
                mode,
                max_len,
            )),
            SpecObjective::RsContrast => {
                SpecCorpus::rs_contrast(&groups, &self.bench.vocab, mode, max_len, seed)
            }
        }
    }

    /// Full specialization of the base on the concatenated domain corpora.
    pub fn specialize_full(
        &self,
        domains: &[&str],
        objective: SpecObjective,
        seed: u64,
    ) -> Result<EncoderModel<f32>> {
        let corpus = self.corpus(domains, objective, seed)?;
        Ok(specialize(
            &self.base,
            &corpus,
            &self.spec_schedule(seed),
            DEFAULT_DEV_FRACTION,
        )?
        .model)
    }

    /// A domain adapter bank trained on a frozen base.
    pub fn specialize_adapter(
        &self,
        domain: &str,
        objective: SpecObjective,
        seed: u64,
    ) -> Result<AdapterBank<f32>> {
        let corpus = self.corpus(&[domain], objective, seed)?;
        let bank = init_adapters(&self.base.config, &self.cfg.adapter, domain, seed)?;
        let (mut model, _) = inject(&self.base, &[bank], Compose::Single, None)?;
        freeze_base(&mut model, true);
        let mut sched = self.cfg.adapter_specialize.clone();
        sched.seed = seed;
        let out = specialize(&model, &corpus, &sched, DEFAULT_DEV_FRACTION)?;
        let provenance = BankProvenance {
            objective: serde_json::to_value(objective)?
                .as_str()
                .unwrap_or_default()
                .to_string(),
            corpus: format!("synthetic:{domain}"),
            seed,
        };
        extract_bank(&out.model, domain, provenance)
    }

    pub fn with_bank(&self, bank: &AdapterBank<f32>) -> Result<EncoderModel<f32>> {
        Ok(inject(
            &self.base,
            std::slice::from_ref(bank),
            Compose::Single,
            None,
        )?
        .0)
    }

    pub fn spec_schedule(&self, seed: u64) -> Schedule {
        let mut s = self.cfg.specialize.clone();
        s.seed = seed;
        s
    }

    pub fn finetune_config(&self, task: DownstreamTask, seed: u64) -> FinetuneConfig {
        let mut fc = FinetuneConfig::new(task, seed);
        fc.schedule.epochs = self.cfg.finetune_epochs;
        fc.schedule.lrs = vec![self.cfg.finetune_lr];
        fc.schedule.patience = self.cfg.finetune_patience;
        fc.max_len = self.cfg.encoder.max_len;
        fc.train_adapters = self.cfg.finetune_adapters;
        fc
    }

    /// Fine-tunes and tests on one domain's dialogs.
    pub fn evaluate(
        &self,
        model: &EncoderModel<f32>,
        domain: &str,
        task: DownstreamTask,
        seed: u64,
    ) -> Result<EvalReport> {
        let data = &self.bench.domain(domain)?.data;
        Ok(finetune(
            model,
            &self.bench.vocab,
            data,
            &[domain.to_string()],
            &self.finetune_config(task, seed),
        )?
        .report)
    }
}

/// Per-seed metric values of named arms.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ArmResults {
    pub arms: BTreeMap<String, Vec<f64>>,
}

impl ArmResults {
    pub fn push(&mut self, arm: &str, value: f64) {
        self.arms.entry(arm.to_string()).or_default().push(value);
    }

    pub fn mean(&self, arm: &str) -> Result<f64> {
        let v = self
            .arms
            .get(arm)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Error::Missing(format!("arm {arm}")))?;
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Baseline and fully specialized (RS-Contrast) arms on one domain, per
/// seed. Arms: `baseline`, `full`.
pub fn single_domain_runs(
    desk: &Desk,
    domain: &str,
    tasks: &[DownstreamTask],
) -> Result<BTreeMap<DownstreamTask, ArmResults>> {
    let mut out: BTreeMap<DownstreamTask, ArmResults> = BTreeMap::new();
    for &seed in &desk.cfg.seeds {
        let full = desk.specialize_full(&[domain], SpecObjective::RsContrast, seed)?;
        for &task in tasks {
            let arms = out.entry(task).or_default();
            arms.push(
                "baseline",
                desk.evaluate(&desk.base, domain, task, seed)?.value,
            );
            arms.push("full", desk.evaluate(&full, domain, task, seed)?.value);
        }
    }
    Ok(out)
}

/// RS-Contrast adapter specialization on one domain, one value per seed.
pub fn adapter_runs(desk: &Desk, domain: &str, task: DownstreamTask) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for &seed in &desk.cfg.seeds {
        let model =
            desk.with_bank(&desk.specialize_adapter(domain, SpecObjective::RsContrast, seed)?)?;
        out.push(desk.evaluate(&model, domain, task, seed)?.value);
    }
    Ok(out)
}

/// Full RS-Class specialization on both synthetic domains against stacked
/// and fused single-domain RS-Class adapters, fine-tuned and tested on the
/// multi-domain dialogs. Arms are the variant names.
pub fn multi_domain_runs(desk: &Desk, task: DownstreamTask) -> Result<ArmResults> {
    let domains: Vec<&str> = DOMAINS.iter().map(|d| d.name).collect();
    let names: Vec<String> = domains.iter().map(|d| d.to_string()).collect();
    let data = desk.bench.multi_domain();
    let mut out = ArmResults::default();
    for &seed in &desk.cfg.seeds {
        let corpus = desk.corpus(&domains, SpecObjective::RsClass, seed)?;
        let mut banks = BTreeMap::new();
        for d in &domains {
            banks.insert(
                d.to_string(),
                desk.specialize_adapter(d, SpecObjective::RsClass, seed)?,
            );
        }
        let spec_schedule = desk.spec_schedule(seed);
        for variant in [
            MultiDomainVariant::FullFt,
            MultiDomainVariant::Stack,
            MultiDomainVariant::Fuse,
        ] {
            let setup = MultiDomainSetup {
                domains: names.clone(),
                variant,
                base: &desk.base,
                banks: &banks,
                corpus: Some(&corpus),
                spec_schedule: &spec_schedule,
            };
            let (report, _) = multi_domain_run(
                &setup,
                &desk.bench.vocab,
                &data,
                &desk.finetune_config(task, seed),
            )?;
            out.push(&variant.to_string(), report.value);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_means() {
        let mut a = ArmResults::default();
        a.push("x", 0.2);
        a.push("x", 0.4);
        assert!((a.mean("x").unwrap() - 0.3).abs() < 1e-12);
        assert!(a.mean("y").is_err());
    }
}
