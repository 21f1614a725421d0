use todspec::adapters::{
    extract_bank, freeze_base, init_adapters, inject, AdapterConfig, BankProvenance, Compose,
};
use todspec::eval::{finetune, DownstreamTask, FinetuneConfig};
use todspec::neural::checkpoint::{load_bank, load_model, save_bank, save_model};
use todspec::neural::{EncoderConfig, EncoderModel};
use todspec::objectives::{specialize, Schedule, ScoringMode, SpecCorpus};
use todspec::synth::{SynthBench, SynthConfig};

fn bench() -> SynthBench {
    SynthBench::generate(&SynthConfig {
        seed: 7,
        train_dialogs: 4,
        dev_dialogs: 3,
        test_dialogs: 3,
        threads: 40,
    })
    .unwrap()
}

fn tiny(vocab: usize) -> EncoderModel<f32> {
    let cfg = EncoderConfig {
        layers: 1,
        hidden: 16,
        heads: 2,
        ffn: 32,
        max_len: 32,
        vocab_size: vocab,
        dropout: 0.1,
    };
    EncoderModel::new(cfg, 1).unwrap()
}

fn short(seed: u64) -> Schedule {
    Schedule {
        epochs: 1,
        batch_size: 8,
        lrs: vec![1e-3],
        patience: 1,
        seed,
        max_batches_per_epoch: Some(3),
        dropout: true,
    }
}

#[test]
fn specialize_finetune_and_reload() {
    let b = bench();
    let taxi = b.domain("taxi").unwrap();
    assert!(!taxi.terms.terms.is_empty());
    assert!(!taxi.triples.is_empty());
    let corpus = SpecCorpus::rs_contrast(
        &taxi.instances,
        &b.vocab,
        ScoringMode::DualEncoderDot,
        32,
        1,
    )
    .unwrap();
    let out = specialize(&tiny(b.vocab.len()), &corpus, &short(1), 0.1).unwrap();
    assert!(out.model.params.all_finite());

    let dir = tempfile::tempdir().unwrap();
    save_model(
        dir.path(),
        &out.model,
        &b.vocab,
        1,
        serde_json::json!({"objective": "rs-contrast"}),
    )
    .unwrap();
    let (back, vocab, _) = load_model::<f32>(dir.path()).unwrap();
    assert_eq!(vocab, b.vocab);
    for ((_, p), (_, q)) in out.model.params.iter().zip(back.params.iter()) {
        assert_eq!(p.name, q.name);
        assert_eq!(p.data, q.data);
    }

    let mut cfg = FinetuneConfig::new(DownstreamTask::Rr, 1);
    cfg.schedule = short(1);
    cfg.max_len = 32;
    cfg.pool = 5;
    let report = finetune(&back, &b.vocab, &taxi.data, &["taxi".to_string()], &cfg)
        .unwrap()
        .report;
    report.validate().unwrap();
    assert!((0.0..=1.0).contains(&report.value));
}

#[test]
fn adapter_bank_trains_and_round_trips() {
    let b = bench();
    let hotel = b.domain("hotel").unwrap();
    let base = tiny(b.vocab.len());
    let bank = init_adapters(
        &base.config,
        &AdapterConfig {
            bottleneck: 4,
            ..AdapterConfig::for_hidden(16)
        },
        "hotel",
        3,
    )
    .unwrap();
    let (mut model, _) = inject(&base, &[bank], Compose::Single, None).unwrap();
    freeze_base(&mut model, true);
    let corpus = SpecCorpus::rs_contrast(
        &hotel.instances,
        &b.vocab,
        ScoringMode::DualEncoderDot,
        32,
        3,
    )
    .unwrap();
    let out = specialize(&model, &corpus, &short(3), 0.1).unwrap();
    let trained = extract_bank(&out.model, "hotel", BankProvenance::default()).unwrap();
    assert!(trained.layers[0].up.iter().any(|&u| u != 0.0));

    let dir = tempfile::tempdir().unwrap();
    save_bank(dir.path(), &trained, serde_json::Value::Null).unwrap();
    let back = load_bank::<f32>(dir.path()).unwrap();
    assert_eq!(back.layers, trained.layers);

    let mut cfg = FinetuneConfig::new(DownstreamTask::Dst, 3);
    cfg.schedule = short(3);
    cfg.max_len = 32;
    let composed = inject(&base, &[back], Compose::Single, None).unwrap().0;
    let report = finetune(
        &composed,
        &b.vocab,
        &hotel.data,
        &["hotel".to_string()],
        &cfg,
    )
    .unwrap()
    .report;
    report.validate().unwrap();
}
