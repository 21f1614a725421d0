//! Joint goal accuracy, retrieval rank, and report rows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Ontology, SlotValue, NONE_VALUE};
use crate::error::{Error, Result};

/// Predicted value per (domain, slot).
pub type TurnPrediction = BTreeMap<(String, String), String>;

fn norm(v: &str) -> String {
    v.trim().to_lowercase()
}

/// Gold state of one turn completed with `"none"` for every ontology slot
/// it does not mention.
pub fn complete_gold(gold: &[SlotValue], ontology: &Ontology) -> TurnPrediction {
    let mut out: TurnPrediction = ontology
        .slots()
        .map(|(d, s)| ((d.to_string(), s.to_string()), NONE_VALUE.to_string()))
        .collect();
    for sv in gold {
        let key = (sv.domain.clone(), sv.slot.clone());
        if let Some(slot) = out.get_mut(&key) {
            *slot = norm(&sv.value);
        }
    }
    out
}

/// True when every ontology slot matches (missing predictions count as "none").
pub fn turn_correct(pred: &TurnPrediction, gold: &[SlotValue], ontology: &Ontology) -> bool {
    complete_gold(gold, ontology).iter().all(|(k, g)| {
        let p = pred
            .get(k)
            .map(|v| norm(v))
            .unwrap_or_else(|| NONE_VALUE.to_string());
        &p == g
    })
}

/// Fraction of turns whose every (domain, slot) prediction is right.
pub fn joint_goal_accuracy(
    predictions: &[TurnPrediction],
    gold: &[Vec<SlotValue>],
    ontology: &Ontology,
) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predicted turns against {} gold turns",
            predictions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::InvalidArgument("no turns to score".into()));
    }
    let right = predictions
        .iter()
        .zip(gold)
        .filter(|(p, g)| turn_correct(p, g, ontology))
        .count();
    Ok(right as f64 / gold.len() as f64)
}

/// Share of ranks equal to 1.
pub fn recall_at_1(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("no ranks to score".into()));
    }
    Ok(ranks.iter().filter(|&&r| r == 1).count() as f64 / ranks.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub domains: Vec<String>,
    pub metric: String,
    pub value: f64,
    pub n_items: usize,
    pub seed: u64,
    pub config_digest: String,
    /// Free-form experiment label (variant, fraction, source domain...).
    #[serde(default)]
    pub label: String,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.value) || self.n_items == 0 {
            return Err(Error::Validation(format!(
                "report value {} over {} items is out of range",
                self.value, self.n_items
            )));
        }
        Ok(())
    }

    pub const TSV_HEADER: &'static str =
        "task\tdomains\tmetric\tvalue\tn_items\tseed\tconfig_digest\tlabel";

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.6}\t{}\t{}\t{}\t{}",
            self.task,
            self.domains.join("+"),
            self.metric,
            self.value,
            self.n_items,
            self.seed,
            self.config_digest,
            self.label
        )
    }
}

/// Short SHA-256 digest of a JSON value's canonical serialization.
pub fn digest_json(value: &serde_json::Value) -> String {
    let text = serde_json::to_string(value).unwrap_or_default();
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onto() -> Ontology {
        let mut o = Ontology::default();
        o.insert("taxi", "leaveAt", vec!["17:15".into(), "09:00".into()])
            .unwrap();
        o.insert("taxi", "destination", vec!["cambridge".into()])
            .unwrap();
        o
    }

    fn pred(pairs: &[(&str, &str)]) -> TurnPrediction {
        pairs
            .iter()
            .map(|(s, v)| (("taxi".to_string(), s.to_string()), v.to_string()))
            .collect()
    }

    #[test]
    fn one_wrong_slot_halves_accuracy() {
        let o = onto();
        let gold = vec![
            vec![SlotValue::new("taxi", "leaveAt", "17:15")],
            vec![
                SlotValue::new("taxi", "leaveAt", "17:15"),
                SlotValue::new("taxi", "destination", "cambridge"),
            ],
        ];
        let preds = vec![
            pred(&[("leaveAt", "17:15"), ("destination", "none")]),
            pred(&[("leaveAt", "17:15"), ("destination", "none")]),
        ];
        assert_eq!(joint_goal_accuracy(&preds, &gold, &o).unwrap(), 0.5);
    }

    #[test]
    fn all_none_matches_all_none() {
        let o = onto();
        let preds = vec![pred(&[("leaveAt", "none"), ("destination", "none")])];
        assert_eq!(joint_goal_accuracy(&preds, &[vec![]], &o).unwrap(), 1.0);
        assert!(joint_goal_accuracy(&preds, &[vec![], vec![]], &o).is_err());
    }
}
