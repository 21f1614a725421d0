//! TF-IDF scoring of {1,2,3}-grams over single-domain dialogs and the
//! curated salient-term set per domain.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dialog;
use crate::error::{Error, Result};
use crate::neural::tokenizer::{is_punctuation, tokenize};

pub const MAX_NGRAM: usize = 3;
pub const DEFAULT_TOP_N: usize = 80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NgramCount {
    /// Occurrences over every utterance of every dialog.
    pub tf: u64,
    /// Dialogs containing the ngram at least once.
    pub df: u64,
}

/// Ngram windows of one utterance. Punctuation tokens split the utterance
/// into runs and no window spans a run boundary.
pub fn utterance_ngrams(text: &str) -> Vec<String> {
    let tokens = tokenize(text);
    let mut out = Vec::new();
    for run in tokens.split(|t| is_punctuation(t)) {
        for n in 1..=MAX_NGRAM {
            for w in run.windows(n) {
                out.push(w.join(" "));
            }
        }
    }
    out
}

pub fn count_ngrams(dialogs: &[Dialog]) -> Result<BTreeMap<String, NgramCount>> {
    if dialogs.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot count ngrams over zero dialogs".into(),
        ));
    }
    let mut counts: HashMap<String, NgramCount> = HashMap::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for dialog in dialogs {
        seen.clear();
        for turn in &dialog.turns {
            for gram in utterance_ngrams(&turn.text) {
                let entry = counts.entry(gram.clone()).or_default();
                entry.tf += 1;
                if seen.insert(gram) {
                    entry.df += 1;
                }
            }
        }
    }
    Ok(counts.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredNgram {
    pub tokens: Vec<String>,
    pub tf: u64,
    pub df: u64,
    /// `total / df`, no logarithm.
    pub idf: f64,
    pub score: f64,
}

impl ScoredNgram {
    pub fn ngram(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Scores `tf × total/df` and sorts by (score desc, tf desc, ngram asc).
pub fn score_and_rank(
    counts: &BTreeMap<String, NgramCount>,
    total_dialogs: u64,
) -> Result<Vec<ScoredNgram>> {
    let mut out = Vec::with_capacity(counts.len());
    for (gram, c) in counts {
        if c.df == 0 {
            return Err(Error::Internal(format!(
                "ngram {gram:?} has zero dialog frequency"
            )));
        }
        if c.df > total_dialogs {
            return Err(Error::InvalidArgument(format!(
                "ngram {gram:?} occurs in {} dialogs but the total is {total_dialogs}",
                c.df
            )));
        }
        let idf = total_dialogs as f64 / c.df as f64;
        // one rounding, so equal rationals tf·total/df compare equal
        let score = (c.tf as u128 * total_dialogs as u128) as f64 / c.df as f64;
        out.push(ScoredNgram {
            tokens: gram.split(' ').map(str::to_string).collect(),
            tf: c.tf,
            df: c.df,
            idf,
            score,
        });
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.tf.cmp(&a.tf))
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    Ok(out)
}

/// British to American spellings, applied per token.
pub fn default_variant_map() -> BTreeMap<String, String> {
    [
        ("centre", "center"),
        ("centres", "centers"),
        ("theatre", "theater"),
        ("theatres", "theaters"),
        ("metre", "meter"),
        ("metres", "meters"),
        ("litre", "liter"),
        ("litres", "liters"),
        ("fibre", "fiber"),
        ("calibre", "caliber"),
        ("spectre", "specter"),
        ("colour", "color"),
        ("colours", "colors"),
        ("favourite", "favorite"),
        ("favourites", "favorites"),
        ("flavour", "flavor"),
        ("flavours", "flavors"),
        ("harbour", "harbor"),
        ("neighbour", "neighbor"),
        ("neighbourhood", "neighborhood"),
        ("honour", "honor"),
        ("labour", "labor"),
        ("behaviour", "behavior"),
        ("humour", "humor"),
        ("parlour", "parlor"),
        ("odour", "odor"),
    ]
    .into_iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect()
}

/// Token-wise replacement; `None` when no token is a map key.
pub fn apply_variant(ngram: &str, map: &BTreeMap<String, String>) -> Option<String> {
    let mut changed = false;
    let out: Vec<&str> = ngram
        .split(' ')
        .map(|t| match map.get(t) {
            Some(v) => {
                changed = true;
                v.as_str()
            }
            None => t,
        })
        .collect();
    changed.then(|| out.join(" "))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainTermSet {
    pub domain: String,
    pub top_n: usize,
    pub terms: Vec<String>,
    pub excluded: Vec<String>,
    pub variants_added: Vec<(String, String)>,
    #[serde(default)]
    pub scores: BTreeMap<String, f64>,
    /// Set when fewer than `top_n` ngrams survived.
    #[serde(skip)]
    pub short: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurateOptions {
    pub top_n: usize,
    pub exclusion: Vec<String>,
    pub variant_map: BTreeMap<String, String>,
    /// Refill from lower ranks so exactly `top_n` ngrams survive exclusion.
    pub backfill: bool,
}

impl CurateOptions {
    pub fn new(top_n: usize) -> Self {
        CurateOptions {
            top_n,
            exclusion: Vec::new(),
            variant_map: default_variant_map(),
            backfill: true,
        }
    }
}

pub fn curate(domain: &str, ranked: &[ScoredNgram], opts: &CurateOptions) -> Result<DomainTermSet> {
    if opts.top_n == 0 {
        return Err(Error::InvalidArgument("top_n must be at least 1".into()));
    }
    let excluded: BTreeSet<String> = opts
        .exclusion
        .iter()
        .map(|e| tokenize(e).join(" "))
        .collect();
    let window: &[ScoredNgram] = if opts.backfill {
        ranked
    } else {
        &ranked[..opts.top_n.min(ranked.len())]
    };
    let mut terms = Vec::with_capacity(opts.top_n);
    let mut scores = BTreeMap::new();
    for s in window {
        if terms.len() == opts.top_n {
            break;
        }
        let gram = s.ngram();
        if excluded.contains(&gram) {
            continue;
        }
        scores.insert(gram.clone(), s.score);
        terms.push(gram);
    }
    let short = terms.len() < opts.top_n;
    let mut present: BTreeSet<String> = terms.iter().cloned().collect();
    let mut variants_added = Vec::new();
    for source in terms.clone() {
        if let Some(v) = apply_variant(&source, &opts.variant_map) {
            if !excluded.contains(&v) && present.insert(v.clone()) {
                terms.push(v.clone());
                variants_added.push((source, v));
            }
        }
    }
    Ok(DomainTermSet {
        domain: domain.to_string(),
        top_n: opts.top_n,
        terms,
        excluded: excluded.into_iter().collect(),
        variants_added,
        scores,
        short,
    })
}

impl DomainTermSet {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in &self.terms {
            if t != &t.to_lowercase() || t.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "term {t:?} is empty or not lowercased"
                )));
            }
            if !seen.insert(t) {
                return Err(Error::Validation(format!("duplicate term {t:?}")));
            }
            if self.excluded.contains(t) {
                return Err(Error::Validation(format!("term {t:?} is also excluded")));
            }
        }
        for (s, _) in &self.variants_added {
            if !seen.contains(s) {
                return Err(Error::Validation(format!(
                    "variant source {s:?} not among the terms"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: DomainTermSet = serde_json::from_str(&text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Counts, scores and curates in one go.
pub fn extract_terms(
    domain: &str,
    dialogs: &[Dialog],
    opts: &CurateOptions,
) -> Result<DomainTermSet> {
    let counts = count_ngrams(dialogs)?;
    let ranked = score_and_rank(&counts, dialogs.len() as u64)?;
    curate(domain, &ranked, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Speaker, Utterance};

    fn dialog(id: &str, turns: &[&str]) -> Dialog {
        Dialog {
            id: id.into(),
            domains: ["taxi".to_string()].into(),
            turns: turns
                .iter()
                .map(|t| Utterance {
                    speaker: Speaker::User,
                    text: t.to_string(),
                })
                .collect(),
            states: None,
        }
    }

    #[test]
    fn counts_across_dialogs() {
        let d = [
            dialog("1", &["book a taxi please", "i said book a taxi"]),
            dialog("2", &["can you book a taxi"]),
        ];
        let c = count_ngrams(&d).unwrap();
        assert_eq!(c["book a taxi"], NgramCount { tf: 3, df: 2 });
    }

    #[test]
    fn overlapping_windows() {
        let c = count_ngrams(&[dialog("1", &["taxi taxi"])]).unwrap();
        assert_eq!(c["taxi"], NgramCount { tf: 2, df: 1 });
        assert_eq!(c["taxi taxi"], NgramCount { tf: 1, df: 1 });
    }

    #[test]
    fn windows_stop_at_punctuation_and_utterances() {
        let c = count_ngrams(&[dialog("1", &["taxi, please", "now"])]).unwrap();
        assert!(!c.contains_key("taxi please"));
        assert!(!c.contains_key("please now"));
        assert!(!c.contains_key(","));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(count_ngrams(&[]).is_err());
    }

    #[test]
    fn scores_and_ties() {
        let mut counts = BTreeMap::new();
        counts.insert("x".to_string(), NgramCount { tf: 3, df: 2 });
        counts.insert("b".to_string(), NgramCount { tf: 1, df: 1 });
        counts.insert("a".to_string(), NgramCount { tf: 1, df: 1 });
        let r = score_and_rank(&counts, 10).unwrap();
        assert_eq!(r[0].score, 15.0);
        assert_eq!(r[1].ngram(), "a");
        assert_eq!(r[2].ngram(), "b");
        let one =
            score_and_rank(&[("t".to_string(), NgramCount { tf: 1, df: 1 })].into(), 1).unwrap();
        assert_eq!(one[0].score, 1.0);
    }

    #[test]
    fn exclusion_backfills_and_variants_append() {
        let ranked: Vec<ScoredNgram> = ["taxi", "monday", "centre", "cab"]
            .iter()
            .enumerate()
            .map(|(i, t)| ScoredNgram {
                tokens: vec![t.to_string()],
                tf: 10 - i as u64,
                df: 1,
                idf: 1.0,
                score: 10.0 - i as f64,
            })
            .collect();
        let mut opts = CurateOptions::new(3);
        opts.exclusion = vec!["monday".into()];
        let set = curate("taxi", &ranked, &opts).unwrap();
        assert_eq!(set.terms, vec!["taxi", "centre", "cab", "center"]);
        assert_eq!(
            set.variants_added,
            vec![("centre".to_string(), "center".to_string())]
        );
        set.validate().unwrap();

        opts.backfill = false;
        let set = curate("taxi", &ranked, &opts).unwrap();
        assert_eq!(set.terms, vec!["taxi", "centre", "center"]);
        opts.top_n = 10;
        assert!(curate("taxi", &ranked, &opts).unwrap().short);
    }

    #[test]
    fn variants_apply_inside_multi_token_ngrams() {
        let map = default_variant_map();
        assert_eq!(
            apply_variant("the city centre", &map).as_deref(),
            Some("the city center")
        );
        assert_eq!(apply_variant("taxi", &map), None);
    }
}
