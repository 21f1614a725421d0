//! Dialogs, ontologies, comment threads and built corpora, plus their
//! line-delimited JSON file formats.

mod dialog;
mod jsonl;
pub mod multiwoz;
mod ontology;
mod threads;

pub use dialog::{filter_single_domain, load_dialogs, Dialog, SlotValue, Speaker, Utterance};
pub use jsonl::{parse_jsonl, read_jsonl, write_jsonl};
pub use ontology::{Ontology, NONE_VALUE};
pub use threads::{group_threads, load_thread_dump, Thread, ThreadComment, ThreadDump};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a flat domain corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusLine {
    pub text: String,
    pub matched_terms: Vec<String>,
}

impl CorpusLine {
    pub fn validate(&self) -> Result<()> {
        if self.matched_terms.is_empty() {
            return Err(Error::Validation(
                "corpus line without matched terms".into(),
            ));
        }
        if self.text != self.text.to_lowercase() {
            return Err(Error::Validation("corpus line is not lowercased".into()));
        }
        let tokens = crate::neural::tokenize(&self.text);
        for term in &self.matched_terms {
            let needle = crate::neural::tokenize(term);
            if !contains_window(&tokens, &needle) {
                return Err(Error::Validation(format!(
                    "term {term:?} does not occur at token boundaries"
                )));
            }
        }
        Ok(())
    }
}

/// A (context, true response, false response) triple mined from a thread.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogTriple {
    pub context: String,
    pub response: String,
    pub false_response: String,
    pub domain: String,
    pub subreddit: String,
    /// Root comment id of the source thread; easy-negative sampling needs it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thread_id: Option<String>,
}

pub const MIN_DIALOGIC_CHARS: usize = 10;

impl DialogTriple {
    pub fn validate(&self) -> Result<()> {
        for (what, text) in [
            ("context", &self.context),
            ("response", &self.response),
            ("false_response", &self.false_response),
        ] {
            if text.chars().count() < MIN_DIALOGIC_CHARS {
                return Err(Error::Validation(format!(
                    "{what} shorter than 10 characters"
                )));
            }
            if crate::corpus::clean_text(text, 1).0.as_deref() != Some(text.as_str()) {
                return Err(Error::Validation(format!("{what} is not clean")));
            }
        }
        if self.response == self.false_response {
            return Err(Error::Validation(
                "false response equals true response".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) fn contains_window(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty()
        && haystack.len() >= needle.len()
        && haystack.windows(needle.len()).any(|w| w == needle)
}
