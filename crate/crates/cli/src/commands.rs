use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;

use todspec::adapters::{
    extract_bank, freeze_base, init_adapters, inject, AdapterBank, AdapterConfig, BankProvenance,
    Compose,
};
use todspec::checks::GradCheckConfig;
use todspec::corpus::{build_domain_cc, build_domain_reddit, sample_rs_instances, ResponsePool};
use todspec::data::{
    filter_single_domain, load_dialogs, load_thread_dump, read_jsonl, write_jsonl, CorpusLine,
    Dialog, DialogTriple, Ontology,
};
use todspec::eval::{
    cross_domain_matrix, dialogs_covering, dst_items, few_shot_curve, few_shot_tsv, format_reports,
    jga_on_items, multi_domain_run, recall_at_1, rr_ranks, DownstreamData, DownstreamTask, DstHead,
    EvalReport, FinetuneConfig, MultiDomainSetup, MultiDomainVariant, ReportFormat, RrData,
    FEW_SHOT_FRACTIONS,
};
use todspec::neural::checkpoint::{load_bank, load_model, save_bank, save_model};
use todspec::neural::{EncoderConfig, EncoderModel, Vocab};
use todspec::objectives::{
    specialize, Objective, Schedule, ScoringMode, SpecCorpus, DEFAULT_DEV_FRACTION,
};
use todspec::terms::{extract_terms as extract, CurateOptions, DomainTermSet, DEFAULT_TOP_N};

use crate::run::{input_path, merge, Run};
use crate::{
    BuildCorpusArgs, ConvertMultiwozArgs, CorpusSource, CrossDomainArgs, DownstreamArgs,
    EvaluateArgs, ExtractTermsArgs, FewShotArgs, FinetuneArgs, GradCheckArgs, MultiDomainArgs,
    PretrainArgs, ReportArgs,
};

pub struct Ctx {
    pub config: Option<PathBuf>,
    pub out_root: PathBuf,
    pub force: bool,
}

impl Ctx {
    fn merge<T: serde::Serialize + serde::de::DeserializeOwned + clap::Args>(
        &self,
        flags: &T,
    ) -> Result<T> {
        merge(flags, self.config.as_deref())
    }
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone()
        .ok_or_else(|| anyhow!("missing required option --{flag}"))
}

fn required_path(v: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    let p = input_path(&required(v, flag)?);
    if !p.exists() {
        bail!("--{flag} {} does not exist", p.display());
    }
    Ok(p)
}

fn done(dir: PathBuf) -> Result<()> {
    println!("{}", dir.display());
    Ok(())
}

pub fn extract_terms(ctx: &Ctx, flags: &ExtractTermsArgs) -> Result<()> {
    let a = ctx.merge(flags)?;
    let dialogs_path = required_path(&a.dialogs, "dialogs")?;
    let domain = required(&a.domain, "domain")?;
    let dialogs = load_dialogs(&dialogs_path, None)?;
    let dialogs = if a.single_domain {
        filter_single_domain(&dialogs, &domain)
    } else {
        dialogs_covering(&dialogs, std::slice::from_ref(&domain))
    };
    if dialogs.is_empty() {
        bail!(
            "no dialogs of domain {domain:?} in {}",
            dialogs_path.display()
        );
    }
    let terms = extract(
        &domain,
        &dialogs,
        &CurateOptions::new(a.top_n.unwrap_or(DEFAULT_TOP_N)),
    )?;
    let mut run = Run::open(
        &ctx.out_root,
        "extract-terms",
        &a,
        None,
        &[&dialogs_path],
        ctx.force,
    )?;
    terms.save(&run.path("terms.json"))?;
    run.output("terms.json");
    if terms.short {
        eprintln!(
            "warning: only {} terms survived curation",
            terms.terms.len()
        );
    }
    done(run.finish()?)
}

pub fn build_corpus(ctx: &Ctx, flags: &BuildCorpusArgs) -> Result<()> {
    let a = ctx.merge(flags)?;
    let input = required_path(&a.input, "input")?;
    let terms_path = required_path(&a.terms, "terms")?;
    let terms = DomainTermSet::load(&terms_path)?;
    let seed = a.seed.unwrap_or(0);
    let command = match a.source {
        CorpusSource::Cc => "build-corpus-cc",
        CorpusSource::Reddit => "build-corpus-reddit",
    };
    let mut run = Run::open(
        &ctx.out_root,
        command,
        &a,
        Some(seed),
        &[&input, &terms_path],
        ctx.force,
    )?;
    match a.source {
        CorpusSource::Cc => {
            let target = a.target.unwrap_or(todspec::corpus::DEFAULT_CC_TARGET);
            let file =
                fs::File::open(&input).with_context(|| format!("opening {}", input.display()))?;
            let out = build_domain_cc(BufReader::new(file), &terms, target)?;
            write_jsonl(&run.path("corpus.jsonl"), &out.lines)?;
            run.output("corpus.jsonl");
            run.write_json(
                "cleaning.json",
                &json!({"report": out.report, "lines": out.lines.len(), "target": target, "target_reached": out.target_reached}),
            )?;
        }
        CorpusSource::Reddit => {
            let dump = load_thread_dump(&input)?;
            let out = build_domain_reddit(&dump.threads, &terms, seed)?;
            write_jsonl(&run.path("triples.jsonl"), &out.triples)?;
            run.output("triples.jsonl");
            run.write_json(
                "cleaning.json",
                &json!({
                    "report": out.report,
                    "triples": out.triples.len(),
                    "pairs_eligible": out.pairs_eligible,
                    "dropped_no_candidate": out.dropped_no_candidate,
                    "orphans_promoted": dump.orphans_promoted,
                    "cycles_broken": dump.cycles_broken,
                    "duplicate_ids": dump.duplicate_ids,
                }),
            )?;
        }
    }
    done(run.finish()?)
}

fn schedule(
    base: Schedule,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: &Option<Vec<f64>>,
    patience: Option<usize>,
    max_batches: Option<usize>,
) -> Result<Schedule> {
    let s = Schedule {
        epochs: epochs.unwrap_or(base.epochs),
        batch_size: batch.unwrap_or(base.batch_size),
        lrs: lr.clone().unwrap_or(base.lrs),
        patience: patience.unwrap_or(base.patience),
        max_batches_per_epoch: max_batches.or(base.max_batches_per_epoch),
        ..base
    };
    s.validate()?;
    Ok(s)
}

fn parse<T: std::str::FromStr<Err = todspec::Error>>(v: &Option<String>, default: T) -> Result<T> {
    Ok(match v {
        Some(s) => s.parse()?,
        None => default,
    })
}

/// Triples become response-selection groups with sampled easy negatives.
fn triple_groups(path: &Path, seed: u64) -> Result<Vec<todspec::corpus::TripleInstances>> {
    let triples: Vec<DialogTriple> = read_jsonl(path)?;
    let pool = ResponsePool::from_triples(&triples)?;
    Ok(sample_rs_instances(&triples, &pool, seed)?)
}

pub fn pretrain(ctx: &Ctx, flags: &PretrainArgs) -> Result<()> {
    let a = ctx.merge(flags)?;
    let corpus_path = required_path(&a.corpus, "corpus")?;
    let objective: Objective = parse(&a.objective, Objective::RsContrast)?;
    let mode: ScoringMode = parse(&a.mode, ScoringMode::default())?;
    let seed = a.seed.unwrap_or(0);
    let sched = schedule(
        Schedule::specialization(seed),
        a.epochs,
        a.batch,
        &a.lr,
        a.patience,
        a.max_batches,
    )?;
    let model_path = a.model.as_ref().map(|p| input_path(p));
    let mut inputs: Vec<&Path> = vec![&corpus_path];
    if let Some(p) = &model_path {
        inputs.push(p);
    }

    let mlm_lines: Vec<CorpusLine> = match objective {
        Objective::Mlm => read_jsonl(&corpus_path)?,
        _ => Vec::new(),
    };
    let groups = match objective {
        Objective::Mlm => Vec::new(),
        _ => triple_groups(&corpus_path, seed)?,
    };
    let texts: Vec<&str> = mlm_lines
        .iter()
        .map(|l| l.text.as_str())
        .chain(groups.iter().flat_map(|g| {
            g.instances
                .iter()
                .flat_map(|i| [i.context.as_str(), i.response.as_str()])
        }))
        .collect();
    let (model, vocab) = match &model_path {
        Some(p) => {
            let (m, v, _) = load_model::<f32>(p)?;
            (m, v)
        }
        None => {
            let vocab = Vocab::build(texts.iter().copied(), 1)?;
            let mut cfg = EncoderConfig::new(vocab.len());
            cfg.layers = a.layers.unwrap_or(cfg.layers);
            cfg.hidden = a.hidden.unwrap_or(cfg.hidden);
            cfg.heads = a.heads.unwrap_or(cfg.heads);
            cfg.ffn = a.ffn.unwrap_or(cfg.ffn);
            cfg.max_len = a.max_len.unwrap_or(cfg.max_len);
            (EncoderModel::new(cfg, seed)?, vocab)
        }
    };
    let max_len = model.config.max_len;
    let corpus = match objective {
        Objective::Mlm => SpecCorpus::mlm(texts.iter().copied(), &vocab, max_len),
        Objective::RsClass => SpecCorpus::rs_class(&groups, &vocab, mode, max_len),
        Objective::RsContrast => SpecCorpus::rs_contrast(&groups, &vocab, mode, max_len, seed)?,
    };
    let mut run = Run::open(
        &ctx.out_root,
        "pretrain",
        &a,
        Some(seed),
        &inputs,
        ctx.force,
    )?;
    let dev_fraction = a.dev_fraction.unwrap_or(DEFAULT_DEV_FRACTION);
    let provenance =
        json!({"objective": objective.to_string(), "corpus": corpus_path.display().to_string()});
    match &a.adapter_domain {
        Some(domain) => {
            let mut acfg = AdapterConfig::for_hidden(model.config.hidden);
            acfg.bottleneck = a.bottleneck.unwrap_or(acfg.bottleneck);
            let bank = init_adapters(&model.config, &acfg, domain, seed)?;
            let (mut adapted, _) = inject(&model, &[bank], Compose::Single, None)?;
            freeze_base(&mut adapted, true);
            let out = specialize(&adapted, &corpus, &sched, dev_fraction)?;
            let bank = extract_bank(
                &out.model,
                domain,
                BankProvenance {
                    objective: objective.to_string(),
                    corpus: corpus_path.display().to_string(),
                    seed,
                },
            )?;
            save_bank(&run.path("bank"), &bank, provenance)?;
            run.output("bank");
            run.write_json("train_log.json", &out.log)?;
        }
        None => {
            let out = specialize(&model, &corpus, &sched, dev_fraction)?;
            save_model(&run.path("model"), &out.model, &vocab, seed, provenance)?;
            run.output("model");
            run.write_json("train_log.json", &out.log)?;
        }
    }
    done(run.finish()?)
}

/// Reads `train.jsonl`, `dev.jsonl`, `test.jsonl` and an optional
/// `ontology.json` from a data directory.
fn load_data(dir: &Path) -> Result<DownstreamData> {
    let ontology = {
        let p = dir.join("ontology.json");
        if p.exists() {
            Some(Ontology::load(&p)?)
        } else {
            None
        }
    };
    let split = |name: &str| -> Result<Vec<Dialog>> {
        Ok(load_dialogs(&dir.join(name), ontology.as_ref())?)
    };
    Ok(DownstreamData {
        train: split("train.jsonl")?,
        dev: split("dev.jsonl")?,
        test: split("test.jsonl")?,
        ontology,
    })
}

fn all_domains(data: &DownstreamData) -> Vec<String> {
    let mut d: Vec<String> = data
        .train
        .iter()
        .chain(&data.dev)
        .chain(&data.test)
        .flat_map(|x| x.domains.iter().cloned())
        .collect();
    d.sort();
    d.dedup();
    d
}

fn finetune_config(ft: &DownstreamArgs) -> Result<FinetuneConfig> {
    let task: DownstreamTask = required(&ft.task, "task")?.parse()?;
    let seed = ft.seed.unwrap_or(0);
    let mut cfg = FinetuneConfig::new(task, seed);
    cfg.schedule = schedule(
        cfg.schedule,
        ft.epochs,
        ft.batch,
        &ft.lr,
        ft.patience,
        ft.max_batches,
    )?;
    cfg.pool = ft.pool.unwrap_or(cfg.pool);
    cfg.max_len = ft.max_len.unwrap_or(cfg.max_len);
    cfg.mode = parse(&ft.mode, cfg.mode)?;
    cfg.train_adapters = ft.train_adapters;
    Ok(cfg)
}

fn load_banks(paths: &[PathBuf]) -> Result<Vec<AdapterBank<f32>>> {
    paths
        .iter()
        .map(|p| Ok(load_bank(&input_path(p))?))
        .collect()
}

pub fn finetune(ctx: &Ctx, flags: &FinetuneArgs) -> Result<()> {
    let a = ctx.merge(flags)?;
    let model_path = required_path(&a.model, "model")?;
    let data_path = required_path(&a.ft.data, "data")?;
    let cfg = finetune_config(&a.ft)?;
    let data = load_data(&data_path)?;
    let domains = a.ft.domains.clone().unwrap_or_else(|| all_domains(&data));
    let (mut model, vocab, _) = load_model::<f32>(&model_path)?;
    let bank_paths: Vec<PathBuf> = a
        .banks
        .clone()
        .unwrap_or_default()
        .iter()
        .map(|p| input_path(p))
        .collect();
    let mut inputs: Vec<&Path> = vec![&model_path, &data_path];
    inputs.extend(bank_paths.iter().map(PathBuf::as_path));
    let mut warning = None;
    if !bank_paths.is_empty() {
        let compose: Compose = parse(&a.compose, Compose::Single)?;
        (model, warning) = inject(&model, &load_banks(&bank_paths)?, compose, None)?;
    }
    let mut run = Run::open(
        &ctx.out_root,
        "finetune",
        &a,
        Some(cfg.schedule.seed),
        &inputs,
        ctx.force,
    )?;
    let sub = data.covering(&domains);
    let out = todspec::eval::finetune(&model, &vocab, &sub, &domains, &cfg)?;
    save_model(
        &run.path("model"),
        &out.model,
        &vocab,
        cfg.schedule.seed,
        json!({"task": cfg.task.to_string()}),
    )?;
    run.output("model");
    if cfg.task == DownstreamTask::Dst {
        sub.ontology().save(&run.path("ontology.json"))?;
        run.output("ontology.json");
    }
    run.write_json("report.json", &out.report)?;
    run.write_json("train_log.json", &out.log)?;
    if let Some(w) = warning {
        eprintln!("warning: {w}");
    }
    done(run.finish()?)
}

pub fn evaluate(ctx: &Ctx, flags: &EvaluateArgs) -> Result<()> {
    let a = ctx.merge(flags)?;
    let model_path = required_path(&a.model, "model")?;
    let data_path = required_path(&a.data, "data")?;
    let task: DownstreamTask = required(&a.task, "task")?.parse()?;
    let seed = a.seed.unwrap_or(0);
    let defaults = FinetuneConfig::new(task, seed);
    let (mut model, vocab, _) = load_model::<f32>(&model_path)?;
    let data = load_data(&data_path)?;
    let domains = a.domains.clone().unwrap_or_else(|| all_domains(&data));
    let sub = data.covering(&domains);
    let max_len = a.max_len.unwrap_or(defaults.max_len);
    let mut run = Run::open(
        &ctx.out_root,
        "evaluate",
        &a,
        Some(seed),
        &[&model_path, &data_path],
        ctx.force,
    )?;
    let (value, n_items, metric) = match task {
        DownstreamTask::Dst => {
            let ontology = sub.ontology();
            let missing: Vec<String> = ontology
                .slots()
                .filter(|(d, s)| {
                    model
                        .params
                        .id(&format!("{}.query", todspec::eval::dst_head_prefix(d, s)))
                        .is_none()
                })
                .map(|(d, s)| format!("{d}-{s}"))
                .collect();
            if !missing.is_empty() {
                bail!(
                    "checkpoint has no trained state-tracking head for: {}",
                    missing.join(", ")
                );
            }
            let head = DstHead::attach(&mut model, &ontology, &vocab, max_len)?;
            let items = dst_items(&sub.test, &head, &vocab)?;
            (
                jga_on_items(&model, &head, &ontology, &items)?,
                items.len(),
                "jga".to_string(),
            )
        }
        DownstreamTask::Rr => {
            let pool = a.pool.unwrap_or(defaults.pool);
            let mode = parse(&a.mode, defaults.mode)?;
            let test = RrData::from_dialogs(&sub.test, &vocab, max_len);
            let ranks = rr_ranks(&model, &vocab, mode, &test, pool, seed)?;
            (recall_at_1(&ranks)?, ranks.len(), format!("r{pool}@1"))
        }
    };
    let report = EvalReport {
        task: task.to_string(),
        domains,
        metric,
        value,
        n_items,
        seed,
        config_digest: run
            .dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        label: "evaluate".into(),
    };
    report.validate()?;
    run.write_json("report.json", &report)?;
    done(run.finish()?)
}

pub fn few_shot(ctx: &Ctx, flags: &FewShotArgs) -> Result<()> {
    let a = ctx.merge(flags)?;
    let model_path = required_path(&a.model, "model")?;
    let data_path = required_path(&a.ft.data, "data")?;
    let cfg = finetune_config(&a.ft)?;
    let data = load_data(&data_path)?;
    let domains = a.ft.domains.clone().unwrap_or_else(|| all_domains(&data));
    let percents = a
        .percents
        .clone()
        .unwrap_or_else(|| FEW_SHOT_FRACTIONS.to_vec());
    let (model, vocab, _) = load_model::<f32>(&model_path)?;
    let mut run = Run::open(
        &ctx.out_root,
        "few-shot",
        &a,
        Some(cfg.schedule.seed),
        &[&model_path, &data_path],
        ctx.force,
    )?;
    let points = few_shot_curve(
        &model,
        &vocab,
        &data.covering(&domains),
        &domains,
        &percents,
        &cfg,
    )?;
    run.write_text("curve.tsv", &few_shot_tsv(&points))?;
    run.write_json("points.json", &points)?;
    let reports: Vec<EvalReport> = points.iter().map(|p| p.report.clone()).collect();
    run.write_json("reports.json", &reports)?;
    done(run.finish()?)
}

fn pairs(v: &Option<Vec<String>>, flag: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for item in required(v, flag)? {
        let (k, p) = item
            .split_once('=')
            .ok_or_else(|| anyhow!("--{flag} expects domain=path, got {item:?}"))?;
        out.insert(k.to_string(), input_path(Path::new(p)));
    }
    Ok(out)
}

pub fn cross_domain(ctx: &Ctx, flags: &CrossDomainArgs) -> Result<()> {
    let a = ctx.merge(flags)?;
    let baseline_path = required_path(&a.baseline, "baseline")?;
    let spec_paths = pairs(&a.specialized, "specialized")?;
    let target_paths = pairs(&a.targets, "targets")?;
    let cfg = finetune_config(&a.ft)?;
    let (baseline, vocab, _) = load_model::<f32>(&baseline_path)?;
    let mut specialized = BTreeMap::new();
    for (d, p) in &spec_paths {
        let (m, v, _) = load_model::<f32>(p)?;
        if v != vocab {
            bail!("specialized model for {d} uses a different vocabulary than the baseline");
        }
        specialized.insert(d.clone(), m);
    }
    let mut targets = BTreeMap::new();
    for (d, p) in &target_paths {
        targets.insert(d.clone(), load_data(p)?.covering(std::slice::from_ref(d)));
    }
    let mut inputs: Vec<&Path> = vec![&baseline_path];
    inputs.extend(spec_paths.values().map(PathBuf::as_path));
    inputs.extend(target_paths.values().map(PathBuf::as_path));
    let mut run = Run::open(
        &ctx.out_root,
        "cross-domain",
        &a,
        Some(cfg.schedule.seed),
        &inputs,
        ctx.force,
    )?;
    let sources: Vec<String> = spec_paths.keys().cloned().collect();
    let matrix = cross_domain_matrix(&baseline, &specialized, &sources, &targets, &vocab, &cfg)?;
    run.write_text("matrix.tsv", &matrix.tsv())?;
    run.write_json("matrix.json", &matrix)?;
    run.write_json("reports.json", &matrix.reports)?;
    done(run.finish()?)
}

pub fn multi_domain(ctx: &Ctx, flags: &MultiDomainArgs) -> Result<()> {
    let a = ctx.merge(flags)?;
    let base_path = required_path(&a.base, "base")?;
    let data_path = required_path(&a.ft.data, "data")?;
    let variant: MultiDomainVariant = parse(&a.variant, MultiDomainVariant::Fuse)?;
    let cfg = finetune_config(&a.ft)?;
    let data = load_data(&data_path)?;
    let domains = required(&a.ft.domains, "domains")?;
    let (base, vocab, _) = load_model::<f32>(&base_path)?;
    let bank_paths: Vec<PathBuf> = a
        .banks
        .clone()
        .unwrap_or_default()
        .iter()
        .map(|p| input_path(p))
        .collect();
    let banks: BTreeMap<String, AdapterBank<f32>> = load_banks(&bank_paths)?
        .into_iter()
        .map(|b| (b.domain.clone(), b))
        .collect();
    let corpus_path = a.corpus.as_ref().map(|p| input_path(p));
    let spec_schedule = schedule(
        Schedule::specialization(cfg.schedule.seed),
        a.spec_epochs,
        None,
        &a.spec_lr,
        None,
        a.ft.max_batches,
    )?;
    let corpus = match (&corpus_path, variant) {
        (Some(p), MultiDomainVariant::FullFt) => Some(SpecCorpus::rs_class(
            &triple_groups(p, cfg.schedule.seed)?,
            &vocab,
            ScoringMode::default(),
            base.config.max_len,
        )),
        (None, MultiDomainVariant::FullFt) => bail!("--variant full_ft needs --corpus"),
        _ => None,
    };
    let mut inputs: Vec<&Path> = vec![&base_path, &data_path];
    inputs.extend(bank_paths.iter().map(PathBuf::as_path));
    if let Some(p) = &corpus_path {
        inputs.push(p);
    }
    let mut run = Run::open(
        &ctx.out_root,
        "multi-domain",
        &a,
        Some(cfg.schedule.seed),
        &inputs,
        ctx.force,
    )?;
    let setup = MultiDomainSetup {
        domains: domains.clone(),
        variant,
        base: &base,
        banks: &banks,
        corpus: corpus.as_ref(),
        spec_schedule: &spec_schedule,
    };
    let (report, warning) = multi_domain_run(&setup, &vocab, &data, &cfg)?;
    run.write_json("report.json", &report)?;
    if let Some(w) = warning {
        eprintln!("warning: {w}");
        run.write_text("warning.txt", &(w + "\n"))?;
    }
    done(run.finish()?)
}

pub fn grad_check(ctx: &Ctx, flags: &GradCheckArgs) -> Result<()> {
    let a = ctx.merge(flags)?;
    let d = GradCheckConfig::default();
    let cfg = GradCheckConfig {
        layers: a.layers.unwrap_or(d.layers),
        hidden: a.hidden.unwrap_or(d.hidden),
        heads: a.heads.unwrap_or(d.heads),
        bottleneck: a.bottleneck.unwrap_or(d.bottleneck),
        tolerance: a.tolerance.unwrap_or(d.tolerance),
        step: a.step.unwrap_or(d.step),
        seed: a.seed.unwrap_or(d.seed),
        ..d
    };
    let mut run = Run::open(
        &ctx.out_root,
        "grad-check",
        &a,
        Some(cfg.seed),
        &[],
        ctx.force,
    )?;
    let report = todspec::checks::grad_check(&cfg, a.corrupt.as_deref())?;
    let mut tsv = String::from("group\ttensor\tentries\trel_error\tanalytic_norm\tpass\n");
    for g in &report.groups {
        for t in &g.tensors {
            tsv.push_str(&format!(
                "{}\t{}\t{}\t{:.3e}\t{:.3e}\t{}\n",
                g.group,
                t.name,
                t.entries,
                t.rel_error,
                t.analytic_norm,
                t.rel_error < cfg.tolerance
            ));
        }
    }
    run.write_text("grad_check.tsv", &tsv)?;
    run.write_json("grad_check.json", &report)?;
    for g in &report.groups {
        println!(
            "{}\t{:.3e}\t{}",
            g.group,
            g.max_rel_error,
            if g.pass { "pass" } else { "FAIL" }
        );
    }
    let dir = run.finish()?;
    let offenders: Vec<&str> = report
        .groups
        .iter()
        .filter(|g| !g.pass)
        .map(|g| g.group.as_str())
        .collect();
    if !offenders.is_empty() {
        bail!(
            "gradient check failed (tolerance {:e}) for: {}; details in {}",
            cfg.tolerance,
            offenders.join(", "),
            dir.display()
        );
    }
    done(dir)
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let format: ReportFormat = a.format.parse()?;
    let mut reports: Vec<EvalReport> = Vec::new();
    for dir in &a.runs {
        let dir = input_path(dir);
        let single = dir.join("report.json");
        let many = dir.join("reports.json");
        if single.exists() {
            reports.push(serde_json::from_str(&fs::read_to_string(&single)?)?);
        } else if many.exists() {
            reports.extend(serde_json::from_str::<Vec<EvalReport>>(
                &fs::read_to_string(&many)?,
            )?);
        } else {
            bail!("{} holds no report.json or reports.json", dir.display());
        }
    }
    for r in &reports {
        r.validate()?;
    }
    print!("{}", format_reports(&reports, format)?);
    Ok(())
}

pub fn convert_multiwoz(ctx: &Ctx, flags: &ConvertMultiwozArgs) -> Result<()> {
    let a = ctx.merge(flags)?;
    let dir = required_path(&a.multiwoz, "multiwoz")?;
    let splits = todspec::data::multiwoz::load_multiwoz_dir(&dir)?;
    let select = |v: Vec<Dialog>| -> Vec<Dialog> {
        match (&a.domain, a.single_domain) {
            (Some(d), true) => filter_single_domain(&v, d),
            (Some(d), false) => dialogs_covering(&v, std::slice::from_ref(d)),
            (None, _) => v,
        }
    };
    let (train, dev, test) = (
        select(splits.train),
        select(splits.dev),
        select(splits.test),
    );
    let mut run = Run::open(
        &ctx.out_root,
        "convert-multiwoz",
        &a,
        None,
        &[&dir],
        ctx.force,
    )?;
    for (name, v) in [
        ("train.jsonl", &train),
        ("dev.jsonl", &dev),
        ("test.jsonl", &test),
    ] {
        write_jsonl(&run.path(name), v)?;
        run.output(name);
    }
    let ontology = Ontology::from_dialogs(train.iter().chain(&dev).chain(&test));
    ontology.save(&run.path("ontology.json"))?;
    run.output("ontology.json");
    run.write_json(
        "counts.json",
        &json!({"train": train.len(), "dev": dev.len(), "test": test.len()}),
    )?;
    println!(
        "train {}\tdev {}\ttest {}",
        train.len(),
        dev.len(),
        test.len()
    );
    done(run.finish()?)
}
