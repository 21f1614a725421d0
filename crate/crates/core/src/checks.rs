//! Finite-difference gradient checks over every trainable parameter group:
//! encoder, MLM head, both response-selection heads, adapters, fusion
//! logits and the state-tracking head.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapters::{
    init_adapters, inject, is_adapter_param, is_fusion_param, AdapterConfig, Compose, FusionWeights,
};
use crate::data::{Dialog, Ontology};
use crate::error::{Error, Result};
use crate::eval::{dst_items, dst_loss, rr_loss, DstHead, RrData};
use crate::neural::gradcheck::{check_gradients, CheckOptions, TensorCheck, DEFAULT_TOLERANCE};
use crate::neural::masking::mask_tokens;
use crate::neural::{EncoderConfig, EncoderModel, Grads, Rng, Vocab};
use crate::objectives::{
    encode_group, ensure_mlm_head, ensure_rs_head, mlm_loss, rs_class_loss, rs_contrast_loss,
    ScoreInput, ScoringMode,
};
use crate::synth::TAXI;

pub const GROUPS: [&str; 9] = [
    "encoder",
    "mlm_head",
    "rs_class_head",
    "rs_contrast_head",
    "rs_contrast_dual",
    "adapters",
    "fusion",
    "dst_head",
    "rr_dual",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub bottleneck: usize,
    pub tolerance: f64,
    pub step: f64,
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            layers: 2,
            hidden: 16,
            heads: 2,
            bottleneck: 4,
            tolerance: DEFAULT_TOLERANCE,
            // small enough that adapter ReLUs rarely switch inside the stencil
            step: 1e-4,
            max_entries: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub max_rel_error: f64,
    pub pass: bool,
    pub tensors: Vec<TensorCheck>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.groups.iter().all(|g| g.pass)
    }

    pub fn group(&self, name: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.group == name)
    }
}

fn is_encoder_param(name: &str) -> bool {
    name.starts_with("embeddings.") || name.starts_with("layer.") || name.starts_with("pooler.")
}

struct Fixture {
    vocab: Vocab,
    dialog: Dialog,
    ontology: Ontology,
    cfg: EncoderConfig,
}

impl Fixture {
    fn new(cfg: &GradCheckConfig) -> Result<Fixture> {
        let mut rng = Rng::seed_from_u64(cfg.seed);
        let dialog = TAXI.dialog("check", &mut rng);
        let vocab = Vocab::build(dialog.turns.iter().map(|t| t.text.as_str()), 1)?;
        let ontology = Ontology::from_dialogs([&dialog]);
        let enc = EncoderConfig {
            layers: cfg.layers,
            hidden: cfg.hidden,
            heads: cfg.heads,
            ffn: 2 * cfg.hidden,
            max_len: 32,
            vocab_size: vocab.len(),
            dropout: 0.0,
        };
        Ok(Fixture {
            vocab,
            dialog,
            ontology,
            cfg: enc,
        })
    }

    fn texts(&self) -> Vec<String> {
        self.dialog.turns.iter().map(|t| t.text.clone()).collect()
    }

    fn groups(&self, mode: ScoringMode) -> Vec<ScoreInput> {
        let t = self.texts();
        (0..2)
            .map(|k| {
                let responses: Vec<String> = (0..3)
                    .map(|j| t[(2 * k + 1 + 2 * j) % t.len()].clone())
                    .collect();
                encode_group(&self.vocab, mode, 16, &t[2 * k], &responses)
            })
            .collect()
    }

    fn model(&self, seed: u64) -> Result<EncoderModel<f64>> {
        EncoderModel::new(self.cfg.clone(), seed)
    }
}

/// Moves every selected parameter off its initial value so that zero
/// initializations (adapter up-projections) do not hide gradient paths.
fn perturb(model: &mut EncoderModel<f64>, select: impl Fn(&str) -> bool, seed: u64) {
    let mut rng = Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.3).expect("valid std");
    for p in model.params.iter_mut().filter(|p| select(&p.name)) {
        for v in p.data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
}

type BoxedLoss<'a> = Box<dyn Fn(&EncoderModel<f64>, Option<&mut Grads<f64>>) -> Result<f64> + 'a>;

/// Runs every group; `corrupt` names a group whose first checked tensor gets
/// a deliberately wrong analytic gradient.
pub fn grad_check(cfg: &GradCheckConfig, corrupt: Option<&str>) -> Result<GradCheckReport> {
    if let Some(c) = corrupt {
        if !GROUPS.contains(&c) {
            return Err(Error::InvalidArgument(format!(
                "unknown parameter group {c:?}"
            )));
        }
    }
    let fx = Fixture::new(cfg)?;
    let opts = CheckOptions {
        step: cfg.step,
        max_entries: cfg.max_entries,
        seed: cfg.seed,
    };
    let mut groups = Vec::new();
    for &group in GROUPS.iter() {
        let mut model = fx.model(cfg.seed)?;
        let loss: BoxedLoss<'_>;
        let select: Box<dyn Fn(&str) -> bool>;
        match group {
            "encoder" | "mlm_head" => {
                ensure_mlm_head(&mut model)?;
                perturb(&mut model, |n| n.starts_with("head.mlm"), cfg.seed);
                let seqs: Vec<_> = fx
                    .texts()
                    .iter()
                    .take(3)
                    .map(|t| {
                        crate::objectives::trim(crate::neural::encode_pair(
                            t, None, &fx.vocab, 16, None,
                        ))
                    })
                    .collect();
                let batch = mask_tokens(&seqs, fx.vocab.len(), cfg.seed, 0.4);
                loss = Box::new(move |m, g| Ok(mlm_loss(m, &batch, g, None)?.loss));
                select = if group == "encoder" {
                    Box::new(is_encoder_param)
                } else {
                    Box::new(|n: &str| n.starts_with("head.mlm"))
                };
            }
            "rs_class_head" => {
                ensure_rs_head(&mut model)?;
                perturb(&mut model, |n| n.starts_with("head.rs"), cfg.seed);
                let batch: Vec<_> = fx
                    .groups(ScoringMode::LinearOnCls)
                    .into_iter()
                    .map(|g| (g, vec![true, false, false]))
                    .collect();
                loss = Box::new(move |m, g| Ok(rs_class_loss(m, &batch, g, None)?.loss));
                select = Box::new(|n: &str| n.starts_with("head.rs"));
            }
            "rs_contrast_head" => {
                ensure_rs_head(&mut model)?;
                perturb(&mut model, |n| n.starts_with("head.rs"), cfg.seed + 1);
                let batch: Vec<_> = fx
                    .groups(ScoringMode::LinearOnCls)
                    .into_iter()
                    .map(|g| (g, 0))
                    .collect();
                loss = Box::new(move |m, g| Ok(rs_contrast_loss(m, &batch, g, None)?.loss));
                select = Box::new(|n: &str| n.starts_with("head.rs"));
            }
            "rs_contrast_dual" | "adapters" | "fusion" => {
                if group != "rs_contrast_dual" {
                    let acfg = AdapterConfig {
                        bottleneck: cfg.bottleneck,
                        ..AdapterConfig::for_hidden(cfg.hidden)
                    };
                    let banks = ["taxi", "hotel"]
                        .iter()
                        .enumerate()
                        .map(|(i, d)| init_adapters(&model.config, &acfg, d, cfg.seed + i as u64))
                        .collect::<Result<Vec<_>>>()?;
                    let (compose, fusion) = if group == "fusion" {
                        (Compose::Fuse, Some(FusionWeights::uniform(cfg.layers, 2)))
                    } else {
                        (Compose::Stack, None)
                    };
                    model = inject(&model, &banks, compose, fusion.as_ref())?.0;
                    perturb(
                        &mut model,
                        |n| is_adapter_param(n) || is_fusion_param(n),
                        cfg.seed + 2,
                    );
                    crate::adapters::freeze_base(&mut model, false);
                }
                let batch: Vec<_> = fx
                    .groups(ScoringMode::DualEncoderDot)
                    .into_iter()
                    .map(|g| (g, 1))
                    .collect();
                loss = Box::new(move |m, g| Ok(rs_contrast_loss(m, &batch, g, None)?.loss));
                select = match group {
                    "adapters" => Box::new(is_adapter_param),
                    "fusion" => Box::new(is_fusion_param),
                    _ => Box::new(is_encoder_param),
                };
            }
            "dst_head" => {
                let head = DstHead::attach(&mut model, &fx.ontology, &fx.vocab, 16)?;
                perturb(&mut model, |n| n.starts_with("head.dst"), cfg.seed + 3);
                let items = dst_items(std::slice::from_ref(&fx.dialog), &head, &fx.vocab)?;
                loss = Box::new(move |m, g| {
                    let refs: Vec<_> = items.iter().collect();
                    Ok(dst_loss(m, &head, &refs, g, None)?.loss)
                });
                select = Box::new(|n: &str| n.starts_with("head.dst"));
            }
            "rr_dual" => {
                let data = RrData::from_dialogs(std::slice::from_ref(&fx.dialog), &fx.vocab, 24);
                let items: Vec<usize> = (0..data.items.len()).collect();
                let vocab = fx.vocab.clone();
                loss = Box::new(move |m, g| {
                    Ok(rr_loss(
                        m,
                        &vocab,
                        ScoringMode::DualEncoderDot,
                        &data,
                        &items,
                        g,
                        None,
                    )?
                    .loss)
                });
                select = Box::new(is_encoder_param);
            }
            other => return Err(Error::Internal(format!("unhandled group {other}"))),
        }
        let target = if corrupt == Some(group) {
            model
                .params
                .iter()
                .find(|(_, p)| !p.frozen && select(&p.name))
                .map(|(_, p)| p.name.clone())
        } else {
            None
        };
        let tensors = check_gradients(&mut model, loss, select, &opts, target.as_deref())?;
        if tensors.is_empty() {
            return Err(Error::Internal(format!(
                "group {group} selected no parameters"
            )));
        }
        let max_rel_error = tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max);
        groups.push(GroupReport {
            group: group.to_string(),
            max_rel_error,
            pass: max_rel_error < cfg.tolerance,
            tensors,
        });
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        groups,
    })
}
