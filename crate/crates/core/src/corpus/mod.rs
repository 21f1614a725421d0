//! Flat (DomainCC) and dialogic (DomainReddit) corpus construction, text
//! cleaning, and negative sampling for response selection.

use std::collections::HashMap;
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::{contains_window, CorpusLine, DialogTriple, Thread, MIN_DIALOGIC_CHARS};
use crate::error::{Error, Result};
use crate::neural::tokenizer::tokenize;
use crate::neural::Rng;
use crate::terms::DomainTermSet;

pub const DEFAULT_CC_TARGET: usize = 200_000;
/// Minimum cleaned length for flat text.
pub const MIN_FLAT_CHARS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CleaningReport {
    pub lines_in: u64,
    pub lines_kept: u64,
    pub emails_removed: u64,
    pub urls_removed: u64,
    pub too_short_dropped: u64,
}

impl CleaningReport {
    pub fn absorb(&mut self, other: &CleaningReport) {
        self.lines_in += other.lines_in;
        self.lines_kept += other.lines_kept;
        self.emails_removed += other.emails_removed;
        self.urls_removed += other.urls_removed;
        self.too_short_dropped += other.too_short_dropped;
    }
}

fn is_email(token: &str) -> bool {
    token
        .find('@')
        .is_some_and(|at| token[at + 1..].contains('.'))
}

fn is_url(token: &str) -> bool {
    token.starts_with("http://") || token.starts_with("https://") || token.starts_with("www.")
}

/// Lowercases, deletes email and URL tokens, collapses whitespace, and drops
/// the result when it has fewer than `min_chars` characters.
pub fn clean_text(text: &str, min_chars: usize) -> (Option<String>, CleaningReport) {
    let mut report = CleaningReport {
        lines_in: 1,
        ..Default::default()
    };
    let lower = text.to_lowercase();
    let mut kept: Vec<&str> = Vec::new();
    for token in lower.split_whitespace() {
        if is_email(token) {
            report.emails_removed += 1;
        } else if is_url(token) {
            report.urls_removed += 1;
        } else {
            kept.push(token);
        }
    }
    let out = kept.join(" ");
    if out.chars().count() < min_chars.max(1) {
        report.too_short_dropped += 1;
        return (None, report);
    }
    report.lines_kept = 1;
    (Some(out), report)
}

/// Tokenized term list with a first-token index for fast scanning.
#[derive(Debug, Clone)]
pub struct TermMatcher {
    terms: Vec<(String, Vec<String>)>,
    by_first: HashMap<String, Vec<usize>>,
}

impl TermMatcher {
    pub fn new(set: &DomainTermSet) -> Self {
        let mut terms = Vec::new();
        let mut by_first: HashMap<String, Vec<usize>> = HashMap::new();
        for t in &set.terms {
            let toks = tokenize(t);
            if toks.is_empty() || terms.iter().any(|(s, _)| s == t) {
                continue;
            }
            by_first
                .entry(toks[0].clone())
                .or_default()
                .push(terms.len());
            terms.push((t.clone(), toks));
        }
        TermMatcher { terms, by_first }
    }

    /// Distinct terms occurring at token boundaries, in term-set order.
    pub fn matches(&self, text: &str) -> Vec<String> {
        let tokens = tokenize(text);
        let mut hit = vec![false; self.terms.len()];
        for (i, tok) in tokens.iter().enumerate() {
            if let Some(cands) = self.by_first.get(tok) {
                for &c in cands {
                    let needle = &self.terms[c].1;
                    if !hit[c]
                        && tokens.len() - i >= needle.len()
                        && tokens[i..i + needle.len()] == needle[..]
                    {
                        hit[c] = true;
                    }
                }
            }
        }
        self.terms
            .iter()
            .zip(hit)
            .filter(|(_, h)| *h)
            .map(|((t, _), _)| t.clone())
            .collect()
    }
}

pub fn match_terms(text: &str, terms: &DomainTermSet) -> Vec<String> {
    TermMatcher::new(terms).matches(text)
}

/// Reference matcher: checks every term against every window.
pub fn match_terms_naive(text: &str, terms: &DomainTermSet) -> Vec<String> {
    let tokens = tokenize(text);
    let mut out: Vec<String> = Vec::new();
    for t in &terms.terms {
        if !out.contains(t) && contains_window(&tokens, &tokenize(t)) {
            out.push(t.clone());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcOutput {
    pub lines: Vec<CorpusLine>,
    pub report: CleaningReport,
    pub target_reached: bool,
}

/// First `target` cleaned lines with at least one term match, in input order.
pub fn build_domain_cc_lines<S: AsRef<str>>(
    lines: impl IntoIterator<Item = S>,
    terms: &DomainTermSet,
    target: usize,
) -> Result<CcOutput> {
    if target == 0 {
        return Err(Error::InvalidArgument("target must be at least 1".into()));
    }
    let matcher = TermMatcher::new(terms);
    let mut out = CcOutput {
        lines: Vec::new(),
        report: CleaningReport::default(),
        target_reached: false,
    };
    for line in lines {
        let (cleaned, delta) = clean_text(line.as_ref(), MIN_FLAT_CHARS);
        out.report.absorb(&delta);
        let Some(text) = cleaned else { continue };
        let matched = matcher.matches(&text);
        if matched.is_empty() {
            continue;
        }
        let cl = CorpusLine {
            text,
            matched_terms: matched,
        };
        cl.validate()?;
        out.lines.push(cl);
        if out.lines.len() == target {
            out.target_reached = true;
            break;
        }
    }
    Ok(out)
}

pub fn build_domain_cc(
    reader: impl BufRead,
    terms: &DomainTermSet,
    target: usize,
) -> Result<CcOutput> {
    let mut err = None;
    let lines = reader.lines().map_while(|l| match l {
        Ok(l) => Some(l),
        Err(e) => {
            err = Some(e);
            None
        }
    });
    let out = build_domain_cc_lines(lines, terms, target)?;
    if let Some(e) = err {
        return Err(Error::io("<input stream>", e));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RedditOutput {
    pub triples: Vec<DialogTriple>,
    pub report: CleaningReport,
    /// (comment, child) pairs with a term match where both texts were clean.
    pub pairs_eligible: u64,
    /// Eligible pairs dropped for lack of a false-response candidate.
    pub dropped_no_candidate: u64,
}

/// Mines (context, response, false response) triples. Threads are visited in
/// the given order and comments in breadth-first order, all drawing from one
/// generator seeded with `seed`.
pub fn build_domain_reddit(
    threads: &[Thread],
    terms: &DomainTermSet,
    seed: u64,
) -> Result<RedditOutput> {
    let matcher = TermMatcher::new(terms);
    let mut rng = Rng::seed_from_u64(seed);
    let mut out = RedditOutput {
        triples: Vec::new(),
        report: CleaningReport::default(),
        pairs_eligible: 0,
        dropped_no_candidate: 0,
    };
    for thread in threads {
        let cleaned: Vec<Option<String>> = thread
            .comments
            .iter()
            .map(|c| {
                let (t, delta) = clean_text(&c.body, MIN_DIALOGIC_CHARS);
                out.report.absorb(&delta);
                t
            })
            .collect();
        let has_term: Vec<bool> = cleaned
            .iter()
            .map(|t| t.as_deref().is_some_and(|t| !matcher.matches(t).is_empty()))
            .collect();
        for ci in 0..thread.len() {
            let Some(context) = &cleaned[ci] else {
                continue;
            };
            for &ri in &thread.children[ci] {
                let Some(response) = &cleaned[ri] else {
                    continue;
                };
                if !(has_term[ci] || has_term[ri]) {
                    continue;
                }
                out.pairs_eligible += 1;
                let candidates: Vec<&String> = (0..thread.len())
                    .filter(|&j| j != ci && thread.parent[j] != Some(ci))
                    .filter_map(|j| cleaned[j].as_ref())
                    .filter(|t| *t != response)
                    .collect();
                if candidates.is_empty() {
                    out.dropped_no_candidate += 1;
                    continue;
                }
                let pick = candidates[rng.random_range(0..candidates.len())];
                let triple = DialogTriple {
                    context: context.clone(),
                    response: response.clone(),
                    false_response: pick.clone(),
                    domain: terms.domain.clone(),
                    subreddit: thread.subreddit().to_string(),
                    thread_id: Some(thread.root_id().to_string()),
                };
                triple.validate()?;
                out.triples.push(triple);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RsLabel {
    Positive,
    HardNegative,
    EasyNegative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RsInstance {
    pub context: String,
    pub response: String,
    pub label: RsLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_drawn: Option<u8>,
}

/// All instances derived from one triple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripleInstances {
    pub thread_id: String,
    pub k: u8,
    /// Set when the pool was too small and easy negatives repeat.
    pub with_replacement: bool,
    /// Positive, hard negative, then the k easy negatives.
    pub instances: Vec<RsInstance>,
}

/// Responses of every triple, per domain, tagged with their thread.
#[derive(Debug, Clone, Default)]
pub struct ResponsePool {
    by_domain: HashMap<String, Vec<(String, String)>>,
}

impl ResponsePool {
    pub fn from_triples(triples: &[DialogTriple]) -> Result<Self> {
        let mut by_domain: HashMap<String, Vec<(String, String)>> = HashMap::new();
        for t in triples {
            let thread = t.thread_id.clone().ok_or_else(|| {
                Error::Validation("triple without thread id; cannot sample easy negatives".into())
            })?;
            by_domain
                .entry(t.domain.clone())
                .or_default()
                .push((thread, t.response.clone()));
        }
        Ok(ResponsePool { by_domain })
    }

    pub fn responses(&self, domain: &str) -> &[(String, String)] {
        self.by_domain.get(domain).map_or(&[], Vec::as_slice)
    }
}

/// Per triple: one positive, the stored hard negative, and k ~ U{1,2,3} easy
/// negatives drawn without replacement from same-domain responses of other
/// threads.
pub fn sample_rs_instances(
    triples: &[DialogTriple],
    pool: &ResponsePool,
    seed: u64,
) -> Result<Vec<TripleInstances>> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(triples.len());
    for t in triples {
        let thread = t
            .thread_id
            .clone()
            .ok_or_else(|| Error::Validation("triple without thread id".into()))?;
        let k: u8 = rng.random_range(1..=3);
        let responses = pool.responses(&t.domain);
        let eligible: Vec<usize> = (0..responses.len())
            .filter(|&i| responses[i].0 != thread)
            .collect();
        if eligible.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no responses from other threads in domain {:?}",
                t.domain
            )));
        }
        let with_replacement = eligible.len() < k as usize;
        let picks: Vec<usize> = if with_replacement {
            (0..k)
                .map(|_| eligible[rng.random_range(0..eligible.len())])
                .collect()
        } else {
            rand::seq::index::sample(&mut rng, eligible.len(), k as usize)
                .into_iter()
                .map(|i| eligible[i])
                .collect()
        };
        let mk = |response: &str, label| RsInstance {
            context: t.context.clone(),
            response: response.to_string(),
            label,
            k_drawn: Some(k),
        };
        let mut instances = vec![
            mk(&t.response, RsLabel::Positive),
            mk(&t.false_response, RsLabel::HardNegative),
        ];
        for i in picks {
            instances.push(mk(&responses[i].1, RsLabel::EasyNegative));
        }
        out.push(TripleInstances {
            thread_id: thread,
            k,
            with_replacement,
            instances,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NceGroup {
    pub context: String,
    pub responses: Vec<String>,
    pub true_index: usize,
    pub n_negatives: usize,
}

impl NceGroup {
    pub fn validate(&self) -> Result<()> {
        if self.responses.len() != self.n_negatives + 1 || self.true_index >= self.responses.len() {
            return Err(Error::Validation("malformed contrastive group".into()));
        }
        Ok(())
    }
}

/// `[true, hard, easy...]` under a seeded permutation.
pub fn group_for_nce(group: &TripleInstances, rng: &mut Rng) -> Result<NceGroup> {
    let pos = group
        .instances
        .iter()
        .filter(|i| i.label == RsLabel::Positive)
        .count();
    if pos != 1 || group.instances.len() < 2 {
        return Err(Error::Validation(
            "instance group needs exactly one positive and a negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..group.instances.len()).collect();
    order.shuffle(rng);
    let responses: Vec<String> = order
        .iter()
        .map(|&i| group.instances[i].response.clone())
        .collect();
    let true_index = order
        .iter()
        .position(|&i| group.instances[i].label == RsLabel::Positive)
        .expect("one positive");
    Ok(NceGroup {
        context: group.instances[0].context.clone(),
        n_negatives: responses.len() - 1,
        responses,
        true_index,
    })
}
