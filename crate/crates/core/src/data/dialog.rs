use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::jsonl::read_jsonl;
use super::ontology::Ontology;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotValue {
    pub domain: String,
    pub slot: String,
    pub value: String,
}

impl SlotValue {
    pub fn new(domain: &str, slot: &str, value: &str) -> Self {
        SlotValue {
            domain: domain.to_string(),
            slot: slot.to_string(),
            value: value.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    pub id: String,
    pub domains: BTreeSet<String>,
    pub turns: Vec<Utterance>,
    /// Dialog state after each turn, when annotated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<Vec<Vec<SlotValue>>>,
}

impl Dialog {
    pub fn is_single_domain(&self) -> bool {
        self.domains.len() == 1
    }

    pub fn validate(&self, ontology: Option<&Ontology>) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::Validation(format!(
                "dialog {} has no turns",
                self.id
            )));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.text.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "dialog {} turn {i} has empty text",
                    self.id
                )));
            }
        }
        if let Some(states) = &self.states {
            if states.len() != self.turns.len() {
                return Err(Error::Validation(format!(
                    "dialog {} has {} state lists for {} turns",
                    self.id,
                    states.len(),
                    self.turns.len()
                )));
            }
            if let Some(ontology) = ontology {
                for sv in states.iter().flatten() {
                    if !ontology.has_slot(&sv.domain, &sv.slot) {
                        return Err(Error::Validation(format!(
                            "dialog {}: unknown slot ({}, {})",
                            self.id, sv.domain, sv.slot
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Loads `dialogs.jsonl`, validating every dialog (and its slots, when an
/// ontology is given). Dialogs come back in file order.
pub fn load_dialogs(path: &Path, ontology: Option<&Ontology>) -> Result<Vec<Dialog>> {
    let dialogs: Vec<Dialog> = read_jsonl(path)?;
    for (i, d) in dialogs.iter().enumerate() {
        d.validate(ontology).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
    }
    Ok(dialogs)
}

/// Dialogs whose domain set is exactly `{domain}`.
pub fn filter_single_domain(dialogs: &[Dialog], domain: &str) -> Vec<Dialog> {
    dialogs
        .iter()
        .filter(|d| d.domains.len() == 1 && d.domains.contains(domain))
        .cloned()
        .collect()
}
