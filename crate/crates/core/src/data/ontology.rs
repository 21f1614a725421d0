use std::collections::BTreeMap;
use std::path::Path;

use super::dialog::Dialog;
use crate::error::{Error, Result};

/// The value every (domain, slot) takes when unmentioned. Never listed explicitly.
pub const NONE_VALUE: &str = "none";

/// Admissible values per (domain, slot). Iteration order is sorted by
/// (domain, slot); value order is as inserted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ontology {
    slots: BTreeMap<(String, String), Vec<String>>,
}

impl Ontology {
    pub fn insert(&mut self, domain: &str, slot: &str, values: Vec<String>) -> Result<()> {
        if values.is_empty() {
            return Err(Error::Validation(format!(
                "({domain}, {slot}) has no values"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for v in &values {
            if v == NONE_VALUE {
                return Err(Error::Validation(format!(
                    "({domain}, {slot}) lists the reserved value \"none\""
                )));
            }
            if !seen.insert(v) {
                return Err(Error::Validation(format!(
                    "({domain}, {slot}) repeats {v:?}"
                )));
            }
        }
        self.slots
            .insert((domain.to_string(), slot.to_string()), values);
        Ok(())
    }

    pub fn has_slot(&self, domain: &str, slot: &str) -> bool {
        self.slots
            .contains_key(&(domain.to_string(), slot.to_string()))
    }

    pub fn values(&self, domain: &str, slot: &str) -> Option<&[String]> {
        self.slots
            .get(&(domain.to_string(), slot.to_string()))
            .map(Vec::as_slice)
    }

    /// Listed values followed by `"none"`; the order used for argmax tie-breaks.
    pub fn candidates(&self, domain: &str, slot: &str) -> Option<Vec<String>> {
        self.values(domain, slot).map(|vals| {
            let mut c = vals.to_vec();
            c.push(NONE_VALUE.to_string());
            c
        })
    }

    pub fn slots(&self) -> impl Iterator<Item = (&str, &str)> {
        self.slots.keys().map(|(d, s)| (d.as_str(), s.as_str()))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Restricts to the slots of the given domains.
    pub fn restrict(&self, domains: &[&str]) -> Ontology {
        Ontology {
            slots: self
                .slots
                .iter()
                .filter(|((d, _), _)| domains.contains(&d.as_str()))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Collects every observed value from annotated dialogs, in order of first
    /// appearance.
    pub fn from_dialogs<'a>(dialogs: impl IntoIterator<Item = &'a Dialog>) -> Ontology {
        let mut slots: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
        for d in dialogs {
            for sv in d.states.iter().flatten().flatten() {
                let values = slots
                    .entry((sv.domain.clone(), sv.slot.clone()))
                    .or_default();
                if sv.value != NONE_VALUE && !values.contains(&sv.value) {
                    values.push(sv.value.clone());
                }
            }
        }
        slots.retain(|_, v| !v.is_empty());
        Ontology { slots }
    }

    /// Reads `{"domain-slot": [values...]}`.
    pub fn load(path: &Path) -> Result<Ontology> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(&text)?;
        let mut ont = Ontology::default();
        for (key, values) in raw {
            let (domain, slot) = key.split_once('-').ok_or_else(|| {
                Error::Validation(format!("ontology key {key:?} is not domain-slot"))
            })?;
            ont.insert(domain, slot, values)?;
        }
        Ok(ont)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let raw: BTreeMap<String, &Vec<String>> = self
            .slots
            .iter()
            .map(|((d, s), v)| (format!("{d}-{s}"), v))
            .collect();
        let text = serde_json::to_string_pretty(&raw)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
