//! Conversion from the MultiWOZ 2.1 distribution (`data.json`,
//! `valListFile.txt`, `testListFile.txt`) into [`Dialog`] records.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde_json::Value;

use super::dialog::{Dialog, SlotValue, Speaker, Utterance};
use crate::error::{Error, Result};

pub const MULTIWOZ_DOMAINS: [&str; 7] = [
    "attraction",
    "hospital",
    "hotel",
    "police",
    "restaurant",
    "taxi",
    "train",
];

const EMPTY_VALUES: [&str; 4] = ["", "not mentioned", "none", "not given"];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<Dialog>,
    pub dev: Vec<Dialog>,
    pub test: Vec<Dialog>,
}

/// Reads a MultiWOZ 2.1 directory and splits dialogs by the official lists.
pub fn load_multiwoz_dir(dir: &Path) -> Result<Splits> {
    let data_path = dir.join("data.json");
    let text = std::fs::read_to_string(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let data: Value = serde_json::from_str(&text)?;
    let read_list = |name: &str| -> Result<HashSet<String>> {
        let p = dir.join(name);
        let t = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(t.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect())
    };
    let dev = read_list("valListFile.txt")?;
    let test = read_list("testListFile.txt")?;
    convert(&data, &dev, &test)
}

pub fn convert(
    data: &Value,
    dev_ids: &HashSet<String>,
    test_ids: &HashSet<String>,
) -> Result<Splits> {
    let obj = data
        .as_object()
        .ok_or_else(|| Error::Validation("MultiWOZ data.json must be an object".into()))?;
    let mut splits = Splits::default();
    for (id, raw) in obj {
        let dialog = convert_dialog(id, raw)?;
        if dev_ids.contains(id) {
            splits.dev.push(dialog);
        } else if test_ids.contains(id) {
            splits.test.push(dialog);
        } else {
            splits.train.push(dialog);
        }
    }
    Ok(splits)
}

pub fn convert_dialog(id: &str, raw: &Value) -> Result<Dialog> {
    let bad = |msg: &str| Error::Validation(format!("MultiWOZ dialog {id}: {msg}"));

    let goal = raw
        .get("goal")
        .and_then(Value::as_object)
        .ok_or_else(|| bad("no goal"))?;
    let domains: BTreeSet<String> = MULTIWOZ_DOMAINS
        .iter()
        .filter(|d| {
            goal.get(**d)
                .and_then(Value::as_object)
                .is_some_and(|g| !g.is_empty())
        })
        .map(|d| d.to_string())
        .collect();

    let log = raw
        .get("log")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("no log"))?;
    let mut turns = Vec::with_capacity(log.len());
    let mut states = Vec::with_capacity(log.len());
    let mut any_state = false;
    for (i, entry) in log.iter().enumerate() {
        let text = entry
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("turn without text"))?;
        let speaker = if i % 2 == 0 {
            Speaker::User
        } else {
            Speaker::System
        };
        turns.push(Utterance {
            speaker,
            text: text.trim().to_string(),
        });
        // belief state lives on the system turn that answers the user turn
        let state_turn = if i % 2 == 0 {
            log.get(i + 1)
        } else {
            Some(entry)
        };
        let state = state_turn
            .and_then(|t| t.get("metadata"))
            .map(belief_state)
            .unwrap_or_default();
        any_state |= !state.is_empty();
        states.push(state);
    }
    Ok(Dialog {
        id: id.to_string(),
        domains,
        turns,
        states: any_state.then_some(states),
    })
}

fn belief_state(metadata: &Value) -> Vec<SlotValue> {
    let mut out = Vec::new();
    let Some(domains) = metadata.as_object() else {
        return out;
    };
    for (domain, parts) in domains {
        for (part, prefix) in [("semi", ""), ("book", "book ")] {
            let Some(slots) = parts.get(part).and_then(Value::as_object) else {
                continue;
            };
            for (slot, value) in slots {
                let Some(value) = value.as_str() else {
                    continue;
                };
                let value = value.trim().to_lowercase();
                if EMPTY_VALUES.contains(&value.as_str()) {
                    continue;
                }
                out.push(SlotValue::new(domain, &format!("{prefix}{slot}"), &value));
            }
        }
    }
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Value {
        json!({
            "SNG01.json": {
                "goal": {"taxi": {"info": {"leaveAt": "17:15"}}, "hotel": {}},
                "log": [
                    {"text": "I need a taxi at 17:15.", "metadata": {}},
                    {"text": "Where to?", "metadata": {
                        "taxi": {"book": {"booked": []},
                                 "semi": {"leaveAt": "17:15", "destination": "", "departure": "not mentioned", "arriveBy": ""}}
                    }},
                ]
            },
            "MUL02.json": {
                "goal": {"taxi": {"info": {}}, "hotel": {"info": {"area": "north"}}},
                "log": [{"text": "hi", "metadata": {}}, {"text": "hello", "metadata": {}}]
            }
        })
    }

    #[test]
    fn converts_domains_turns_and_states() {
        let splits = convert(
            &sample(),
            &HashSet::new(),
            &["MUL02.json".to_string()].into(),
        )
        .unwrap();
        assert_eq!(splits.train.len(), 1);
        assert_eq!(splits.test.len(), 1);
        let d = &splits.train[0];
        assert!(d.is_single_domain());
        assert_eq!(d.turns[0].speaker, Speaker::User);
        let states = d.states.as_ref().unwrap();
        assert_eq!(states[0], vec![SlotValue::new("taxi", "leaveAt", "17:15")]);
        assert_eq!(states[0], states[1]);
        let m = &splits.test[0];
        assert_eq!(m.domains.len(), 2);
        assert!(m.states.is_none());
    }
}
