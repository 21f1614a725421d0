//! Templated two-domain dialog generator used for desk-scale experiments:
//! annotated dialogs plus forum-style threads drawn from the same templates.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng as _, SeedableRng};

use crate::corpus::{build_domain_reddit, sample_rs_instances, ResponsePool, TripleInstances};
use crate::data::{
    group_threads, Dialog, DialogTriple, Ontology, SlotValue, Speaker, Thread, ThreadComment,
    Utterance,
};
use crate::error::{Error, Result};
use crate::eval::DownstreamData;
use crate::neural::{Rng, Vocab};
use crate::terms::{extract_terms, CurateOptions, DomainTermSet};

/// One user/system exchange: alternative user templates and system
/// templates. `{slot}` placeholders fill from the dialog goal; other
/// placeholders draw from the domain's extras.
#[derive(Debug, Clone, Copy)]
pub struct Exchange {
    pub user: &'static [&'static str],
    pub system: &'static [&'static str],
}

#[derive(Debug, Clone, Copy)]
pub struct SynthDomain {
    pub name: &'static str,
    /// Opening post of forum threads; too short to survive cleaning.
    pub opener: &'static str,
    pub slots: &'static [(&'static str, &'static [&'static str])],
    pub extras: &'static [(&'static str, &'static [&'static str])],
    pub exchanges: &'static [Exchange],
}

pub const TAXI: SynthDomain = SynthDomain {
    name: "taxi",
    opener: "cabs?",
    slots: &[
        (
            "destination",
            &[
                "ashby", "belton", "corby", "dunmow", "elstow", "fenby", "garston", "hilton",
                "ixworth", "jarrow", "kelby", "linton",
            ],
        ),
        (
            "departure",
            &[
                "market",
                "station",
                "airport",
                "museum",
                "harbour",
                "stadium",
                "college",
                "library",
                "cathedral",
                "hospital",
            ],
        ),
        (
            "leaveat",
            &[
                "dawn",
                "morning",
                "noon",
                "afternoon",
                "evening",
                "dusk",
                "midnight",
                "sunrise",
            ],
        ),
    ],
    extras: &[
        (
            "color",
            &["red", "blue", "white", "black", "grey", "silver"],
        ),
        (
            "car",
            &["toyota", "ford", "volvo", "skoda", "tesla", "audi"],
        ),
    ],
    exchanges: &[
        Exchange {
            user: &[
                "i need a taxi to {destination}",
                "please book a cab going to {destination}",
                "can i get a ride to {destination}",
            ],
            system: &[
                "sure , where will you leave from for {destination} ?",
                "where should the car collect you for {destination} ?",
            ],
        },
        Exchange {
            user: &[
                "from the {departure} at {leaveat}",
                "pick me up at the {departure} around {leaveat}",
                "i am at the {departure} and want to go at {leaveat}",
            ],
            system: &[
                "booked , a {color} {car} will collect you at the {departure} at {leaveat}",
                "done , look for a {color} {car} by the {departure} at {leaveat}",
            ],
        },
        Exchange {
            user: &[
                "thanks , that is all",
                "great , thank you",
                "perfect , cheers",
            ],
            system: &[
                "enjoy your ride to {destination}",
                "have a safe trip to {destination}",
            ],
        },
    ],
};

pub const HOTEL: SynthDomain = SynthDomain {
    name: "hotel",
    opener: "hotels?",
    slots: &[
        (
            "area",
            &[
                "north",
                "south",
                "east",
                "west",
                "centre",
                "riverside",
                "uptown",
                "oldtown",
            ],
        ),
        (
            "pricerange",
            &["cheap", "moderate", "expensive", "budget", "luxury"],
        ),
        (
            "day",
            &[
                "monday",
                "tuesday",
                "wednesday",
                "thursday",
                "friday",
                "saturday",
                "sunday",
            ],
        ),
    ],
    extras: &[
        (
            "name",
            &[
                "acorn",
                "bridge",
                "cambridge",
                "lovell",
                "alpha",
                "allenbell",
                "carolina",
                "gonville",
                "huntingdon",
                "warkworth",
            ],
        ),
        ("stars", &["two", "three", "four", "five"]),
    ],
    exchanges: &[
        Exchange {
            user: &[
                "i want a {pricerange} hotel in the {area}",
                "find me a {pricerange} place to stay in the {area}",
                "is there a {pricerange} guesthouse in the {area}",
            ],
            system: &[
                "the {name} is a {pricerange} {stars} star hotel in the {area}",
                "i recommend the {name} , {pricerange} and in the {area}",
            ],
        },
        Exchange {
            user: &[
                "book it from {day} please",
                "i would like to arrive on {day}",
                "reserve a room for {day}",
            ],
            system: &[
                "your room is booked for {day} , reference {name}",
                "all set for {day} at the {name}",
            ],
        },
        Exchange {
            user: &[
                "thanks , that is all",
                "great , thank you",
                "perfect , cheers",
            ],
            system: &[
                "enjoy your stay in the {area}",
                "have a lovely time in the {area}",
            ],
        },
    ],
};

pub const RESTAURANT: SynthDomain = SynthDomain {
    name: "restaurant",
    opener: "food?",
    slots: &[
        (
            "food",
            &[
                "italian", "chinese", "indian", "thai", "french", "greek", "mexican", "korean",
                "spanish", "turkish",
            ],
        ),
        ("people", &["2", "3", "4", "5", "6", "7", "8"]),
        (
            "time",
            &[
                "breakfast",
                "brunch",
                "lunch",
                "teatime",
                "dinner",
                "supper",
            ],
        ),
    ],
    extras: &[
        (
            "name",
            &[
                "golden", "curry", "pizzeria", "kymmoy", "saigon", "meghna", "nandos", "rajmahal",
            ],
        ),
        (
            "street",
            &["regent", "mill", "king", "bridge", "trinity", "castle"],
        ),
    ],
    exchanges: &[
        Exchange {
            user: &[
                "i fancy some {food} food",
                "where can i eat {food} food",
                "recommend a {food} restaurant",
            ],
            system: &[
                "{name} on {street} street serves {food} food",
                "try {name} , great {food} cooking on {street} street",
            ],
        },
        Exchange {
            user: &[
                "a table for {people} at {time}",
                "book {people} people for {time}",
                "we are {people} and want {time}",
            ],
            system: &[
                "a table for {people} at {time} is reserved at {name}",
                "booked {people} seats for {time} , see you at {name}",
            ],
        },
        Exchange {
            user: &[
                "thanks , that is all",
                "great , thank you",
                "perfect , cheers",
            ],
            system: &[
                "enjoy your {food} meal",
                "bon appetit , enjoy the {food} food",
            ],
        },
    ],
};

pub const TRAIN: SynthDomain = SynthDomain {
    name: "train",
    opener: "rail?",
    slots: &[
        (
            "destination",
            &[
                "london", "leeds", "york", "bristol", "derby", "oxford", "norwich", "ipswich",
            ],
        ),
        (
            "departure",
            &[
                "sheffield",
                "leicester",
                "reading",
                "luton",
                "bedford",
                "crewe",
                "durham",
                "exeter",
            ],
        ),
        (
            "arriveby",
            &[
                "early",
                "late",
                "midday",
                "teatime",
                "latenight",
                "rushhour",
            ],
        ),
    ],
    extras: &[
        (
            "trainid",
            &[
                "tr101", "tr202", "tr303", "tr404", "tr505", "tr606", "tr707",
            ],
        ),
        ("platform", &["one", "six", "nine", "ten", "twelve"]),
    ],
    exchanges: &[
        Exchange {
            user: &[
                "i need a train to {destination}",
                "any trains going to {destination}",
                "get me to {destination} by rail",
            ],
            system: &[
                "where are you travelling to {destination} from ?",
                "which station do you leave from for {destination} ?",
            ],
        },
        Exchange {
            user: &[
                "from {departure} arriving {arriveby}",
                "leaving {departure} , i must arrive {arriveby}",
                "from {departure} , {arriveby} arrival please",
            ],
            system: &[
                "{trainid} leaves {departure} from platform {platform} and arrives {arriveby}",
                "take {trainid} from {departure} , platform {platform} , in {arriveby}",
            ],
        },
        Exchange {
            user: &[
                "thanks , that is all",
                "great , thank you",
                "perfect , cheers",
            ],
            system: &[
                "have a good journey to {destination}",
                "safe travels to {destination}",
            ],
        },
    ],
};

pub const DOMAINS: [SynthDomain; 2] = [TAXI, HOTEL];

/// Domains whose threads form the general pretraining corpus; disjoint in
/// slot vocabulary from [`DOMAINS`].
pub const PRETRAIN_DOMAINS: [SynthDomain; 2] = [RESTAURANT, TRAIN];

fn fill(template: &str, values: &BTreeMap<&str, &str>) -> String {
    let mut out = template.to_string();
    for (k, v) in values {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

fn placeholders(template: &str) -> Vec<&str> {
    template
        .split('{')
        .skip(1)
        .filter_map(|p| p.split_once('}').map(|(k, _)| k))
        .collect()
}

impl SynthDomain {
    pub fn ontology(&self) -> Ontology {
        let mut o = Ontology::default();
        for (slot, values) in self.slots {
            o.insert(
                self.name,
                slot,
                values.iter().map(|v| v.to_string()).collect(),
            )
            .expect("static ontology is valid");
        }
        o
    }

    /// One dialog with a state after every turn. A user turn's state holds
    /// every slot mentioned so far; the system turn repeats it.
    pub fn dialog(&self, id: &str, rng: &mut Rng) -> Dialog {
        let values = self.goal(rng);
        let mut turns = Vec::new();
        let mut states = Vec::new();
        let mut state: Vec<SlotValue> = Vec::new();
        for ex in self.exchanges {
            let u = ex.user.choose(rng).expect("user templates");
            for p in placeholders(u) {
                if self.slots.iter().any(|(s, _)| *s == p) && !state.iter().any(|sv| sv.slot == p) {
                    state.push(SlotValue::new(self.name, p, values[p]));
                }
            }
            state.sort();
            turns.push(Utterance {
                speaker: Speaker::User,
                text: fill(u, &values),
            });
            states.push(state.clone());
            let s = ex.system.choose(rng).expect("system templates");
            turns.push(Utterance {
                speaker: Speaker::System,
                text: fill(s, &values),
            });
            states.push(state.clone());
        }
        Dialog {
            id: id.to_string(),
            domains: [self.name.to_string()].into(),
            turns,
            states: Some(states),
        }
    }

    /// The exchanges of each domain in turn; every domain's closing exchange
    /// except the last one's is skipped. States accumulate across domains.
    pub fn multi_dialog(domains: &[SynthDomain], id: &str, rng: &mut Rng) -> Dialog {
        let mut out = Dialog {
            id: id.to_string(),
            domains: domains.iter().map(|d| d.name.to_string()).collect(),
            turns: Vec::new(),
            states: Some(Vec::new()),
        };
        let mut carried: Vec<SlotValue> = Vec::new();
        for (k, dom) in domains.iter().enumerate() {
            let mut d = dom.dialog(id, rng);
            let keep = if k + 1 == domains.len() {
                d.turns.len()
            } else {
                d.turns.len() - 2
            };
            d.turns.truncate(keep);
            let states = d.states.take().expect("generated dialogs are annotated");
            let states_out = out.states.as_mut().expect("annotated");
            for st in states.into_iter().take(keep) {
                let mut full = carried.clone();
                full.extend(st);
                full.sort();
                states_out.push(full);
            }
            carried = states_out.last().cloned().unwrap_or_default();
            out.turns.extend(d.turns);
        }
        out
    }

    pub fn dialogs(&self, n: usize, prefix: &str, rng: &mut Rng) -> Vec<Dialog> {
        (0..n)
            .map(|i| self.dialog(&format!("{prefix}{i:05}"), rng))
            .collect()
    }

    fn goal(&self, rng: &mut Rng) -> BTreeMap<&'static str, &'static str> {
        self.slots
            .iter()
            .chain(self.extras)
            .map(|(k, vs)| (*k, *vs.choose(rng).expect("non-empty value list")))
            .collect()
    }

    /// Forum threads: a short opening post answered by two to four
    /// request/answer pairs that use the same slot-bearing exchange with
    /// different slot values.
    pub fn threads(&self, n: usize, rng: &mut Rng) -> Vec<Thread> {
        let mut comments = Vec::new();
        let sub = format!("synth_{}", self.name);
        let informative: Vec<&Exchange> = self
            .exchanges
            .iter()
            .filter(|ex| {
                ex.user.iter().any(|u| {
                    placeholders(u)
                        .iter()
                        .any(|p| self.slots.iter().any(|(s, _)| s == p))
                })
            })
            .collect();
        for i in 0..n {
            let root = format!("{}{i:05}", self.name);
            comments.push(ThreadComment {
                id: root.clone(),
                parent_id: None,
                body: self.opener.to_string(),
                subreddit: sub.clone(),
                created_utc: 0,
            });
            let ex = informative
                .choose(rng)
                .expect("an exchange whose request names a slot");
            for c in 0..rng.random_range(2..=4) {
                let values = self.goal(rng);
                let u = fill(ex.user.choose(rng).expect("user templates"), &values);
                let s = fill(ex.system.choose(rng).expect("system templates"), &values);
                let uid = format!("{root}_{c}");
                comments.push(ThreadComment {
                    id: uid.clone(),
                    parent_id: Some(root.clone()),
                    body: u,
                    subreddit: sub.clone(),
                    created_utc: 2 * c as i64 + 1,
                });
                comments.push(ThreadComment {
                    id: format!("{uid}_r"),
                    parent_id: Some(uid),
                    body: s,
                    subreddit: sub.clone(),
                    created_utc: 2 * c as i64 + 2,
                });
            }
        }
        group_threads(comments).threads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_dialogs: usize,
    pub dev_dialogs: usize,
    pub test_dialogs: usize,
    /// Threads per domain for specialization corpora.
    pub threads: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            train_dialogs: 40,
            dev_dialogs: 20,
            test_dialogs: 60,
            threads: 1700,
        }
    }
}

/// Everything one synthetic domain contributes.
#[derive(Debug, Clone)]
pub struct SynthDomainData {
    pub data: DownstreamData,
    pub terms: DomainTermSet,
    pub triples: Vec<DialogTriple>,
    pub instances: Vec<TripleInstances>,
}

#[derive(Debug, Clone)]
pub struct SynthBench {
    pub vocab: Vocab,
    pub domains: BTreeMap<String, SynthDomainData>,
    /// Dialogs touching every domain of [`DOMAINS`], in that order.
    pub multi: DownstreamData,
    /// Response-selection instances from the pretraining domains.
    pub pretrain: Vec<TripleInstances>,
}

impl SynthBench {
    /// Generates dialogs, mines terms from the training dialogs, builds
    /// triples from threads and samples response-selection instances.
    pub fn generate(cfg: &SynthConfig) -> Result<SynthBench> {
        let mut rng = Rng::seed_from_u64(cfg.seed);
        let mut domains = BTreeMap::new();
        let mut texts: Vec<String> = Vec::new();
        for dom in DOMAINS {
            let train = dom.dialogs(cfg.train_dialogs, &format!("{}-train-", dom.name), &mut rng);
            let dev = dom.dialogs(cfg.dev_dialogs, &format!("{}-dev-", dom.name), &mut rng);
            let test = dom.dialogs(cfg.test_dialogs, &format!("{}-test-", dom.name), &mut rng);
            let terms = extract_terms(dom.name, &train, &CurateOptions::new(80))?;
            let threads = dom.threads(cfg.threads, &mut rng);
            let reddit = build_domain_reddit(&threads, &terms, rng.random())?;
            if reddit.triples.is_empty() {
                return Err(Error::Internal(format!(
                    "no triples for synthetic domain {}",
                    dom.name
                )));
            }
            let pool = ResponsePool::from_triples(&reddit.triples)?;
            let instances = sample_rs_instances(&reddit.triples, &pool, rng.random())?;
            for d in train.iter().chain(&dev).chain(&test) {
                texts.extend(d.turns.iter().map(|t| t.text.clone()));
            }
            for t in &threads {
                texts.extend(t.comments.iter().map(|c| c.body.clone()));
            }
            domains.insert(
                dom.name.to_string(),
                SynthDomainData {
                    data: DownstreamData {
                        train,
                        dev,
                        test,
                        ontology: Some(dom.ontology()),
                    },
                    terms,
                    triples: reddit.triples,
                    instances,
                },
            );
        }
        let multi_split = |n: usize, split: &str, rng: &mut Rng| -> Vec<Dialog> {
            (0..n)
                .map(|i| SynthDomain::multi_dialog(&DOMAINS, &format!("multi-{split}-{i:05}"), rng))
                .collect()
        };
        let multi = DownstreamData {
            train: multi_split(cfg.train_dialogs, "train", &mut rng),
            dev: multi_split(cfg.dev_dialogs, "dev", &mut rng),
            test: multi_split(cfg.test_dialogs, "test", &mut rng),
            ontology: None,
        };
        let mut pretrain = Vec::new();
        for dom in PRETRAIN_DOMAINS {
            let sample = dom.dialogs(cfg.train_dialogs, "p", &mut rng);
            let terms = extract_terms(dom.name, &sample, &CurateOptions::new(80))?;
            let threads = dom.threads(cfg.threads, &mut rng);
            let reddit = build_domain_reddit(&threads, &terms, rng.random())?;
            let pool = ResponsePool::from_triples(&reddit.triples)?;
            pretrain.extend(sample_rs_instances(&reddit.triples, &pool, rng.random())?);
            for t in &threads {
                texts.extend(t.comments.iter().map(|c| c.body.clone()));
            }
        }
        let vocab = Vocab::build(texts.iter().map(String::as_str), 1)?;
        Ok(SynthBench {
            vocab,
            domains,
            multi,
            pretrain,
        })
    }

    /// The multi-domain dialogs with the union ontology of [`DOMAINS`].
    pub fn multi_domain(&self) -> DownstreamData {
        let mut onto = Ontology::default();
        for dom in DOMAINS {
            for (slot, values) in dom.slots {
                onto.insert(
                    dom.name,
                    slot,
                    values.iter().map(|v| v.to_string()).collect(),
                )
                .expect("static ontology is valid");
            }
        }
        DownstreamData {
            ontology: Some(onto),
            ..self.multi.clone()
        }
    }

    pub fn domain(&self, name: &str) -> Result<&SynthDomainData> {
        self.domains
            .get(name)
            .ok_or_else(|| Error::Missing(format!("synthetic domain {name:?}")))
    }
}
