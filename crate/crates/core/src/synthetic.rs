//! Seeded generator for a small factoid QA corpus and a matching pretraining
//! corpus for the micro model.
//!
//! Every question asks for one attribute of one entity. Its relevant passage
//! states the value; the candidate pool adds "chatter" passages that repeat
//! the entity and attribute words without giving a value, plus passages of
//! sibling questions (same entity, other attribute; or same attribute, other
//! entity).
//!
//! The pretraining corpus uses the same templates with fresh values. A
//! sequence whose prefix contains [`TASK_MARKER`] only continues answer
//! bearing passages with their question (chatter is followed by `none .`).
//! Without the marker chatter is always followed by its question while an
//! answer bearing passage is followed by it only some of the time, otherwise
//! by a restatement of the answer.

use serde::{Deserialize, Serialize};

use crate::eval::{PassageRecord, QaDataset, QaRecord};
use crate::tensor::SeededRng;

pub const TASK_MARKER: &str = "qg";
const UNMARKED_FACT_QUESTION_RATE: f64 = 0.3;

const RELATIONS: [&str; 12] = [
    "capital", "river", "founder", "language", "currency", "mountain", "anthem", "leader",
    "climate", "export", "festival", "dish",
];

const FILLER: [&str; 20] = [
    "please", "generate", "question", "for", "this", "passage", "text", "read", "now", "below",
    "here", "is", "a", "the", "write", "task", "example", "input", "based", "on",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub entities: usize,
    pub relations_per_entity: usize,
    pub pool_size: usize,
    pub min_chatter: usize,
    pub max_chatter: usize,
    pub values: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            entities: 80,
            relations_per_entity: 5,
            pool_size: 10,
            min_chatter: 4,
            max_chatter: 6,
            values: 100,
            seed: 0,
        }
    }
}

fn question(e: &str, r: &str) -> String {
    format!("what is the {r} of {e} ?")
}

fn fact(e: &str, r: &str, v: &str, rng: &mut SeededRng) -> String {
    match rng.below(3) {
        0 => format!("{e} {r} is {v} ."),
        1 => format!("the {r} of {e} is {v} ."),
        _ => format!("{v} is the {r} of {e} ."),
    }
}

const CHATTER: [&str; 6] = [
    "{e} {r} {e} {r} rumor .",
    "people ask about the {r} of {e} and the {r} of {e} .",
    "the {r} of {e} is unknown .",
    "{e} {r} debated , {e} {r} unclear .",
    "who knows the {r} of {e} ?",
    "is the {r} of {e} the {r} ? nobody knows .",
];

fn chatter(e: &str, r: &str, template: usize) -> String {
    CHATTER[template % CHATTER.len()]
        .replace("{e}", e)
        .replace("{r}", r)
}

fn entity(i: usize) -> String {
    format!("ent{i}")
}

fn value(i: usize) -> String {
    format!("val{i}")
}

/// `(entity, relations)` assignments.
fn schema(cfg: &SyntheticConfig, rng: &mut SeededRng) -> Vec<(String, Vec<&'static str>)> {
    (0..cfg.entities)
        .map(|i| {
            let mut rels = RELATIONS.to_vec();
            rng.shuffle(&mut rels);
            rels.truncate(cfg.relations_per_entity.min(RELATIONS.len()));
            (entity(i), rels)
        })
        .collect()
}

pub fn generate_dataset(cfg: &SyntheticConfig) -> QaDataset {
    let mut rng = SeededRng::new(cfg.seed);
    let schema = schema(cfg, &mut rng);
    let mut facts = std::collections::HashMap::new();
    for (e, rels) in &schema {
        for r in rels {
            let v = value(rng.below(cfg.values.max(1)));
            facts.insert((e.clone(), *r), fact(e, r, &v, &mut rng));
        }
    }
    let mut records = Vec::new();
    for (ei, (e, rels)) in schema.iter().enumerate() {
        for r in rels {
            let mut pool = vec![PassageRecord {
                passage_id: format!("f-{e}-{r}"),
                text: facts[&(e.clone(), *r)].clone(),
                relevant: true,
            }];
            let k = cfg.min_chatter + rng.below(cfg.max_chatter - cfg.min_chatter + 1);
            let mut templates: Vec<usize> = (0..CHATTER.len()).collect();
            rng.shuffle(&mut templates);
            for &t in templates.iter().take(k) {
                pool.push(PassageRecord {
                    passage_id: format!("c-{e}-{r}-{t}"),
                    text: chatter(e, r, t),
                    relevant: false,
                });
            }
            let mut others = Vec::new();
            for r2 in rels.iter().filter(|r2| *r2 != r) {
                others.push((format!("f-{e}-{r2}"), facts[&(e.clone(), *r2)].clone()));
                let t = rng.below(CHATTER.len());
                others.push((format!("c-{e}-{r2}-{t}"), chatter(e, r2, t)));
            }
            for (ej, (e2, rels2)) in schema.iter().enumerate() {
                if ej != ei && rels2.contains(r) {
                    others.push((format!("f-{e2}-{r}"), facts[&(e2.clone(), *r)].clone()));
                }
            }
            rng.shuffle(&mut others);
            for (id, text) in others {
                if pool.len() >= cfg.pool_size {
                    break;
                }
                if pool.iter().all(|p| p.passage_id != id) {
                    pool.push(PassageRecord {
                        passage_id: id,
                        text,
                        relevant: false,
                    });
                }
            }
            records.push(QaRecord {
                question_id: format!("q-{e}-{r}"),
                question_text: question(e, r),
                passages: pool,
            });
        }
    }
    QaDataset { records }
}

fn prefix(rng: &mut SeededRng, marker: bool) -> Vec<&'static str> {
    let len = rng.below(9);
    let mut words: Vec<&'static str> = (0..len).map(|_| FILLER[rng.below(FILLER.len())]).collect();
    if marker {
        let at = rng.below(words.len() + 1);
        words.insert(at, TASK_MARKER);
    }
    words
}

/// `n` pretraining sequences over the same entities, attributes and
/// templates as [`generate_dataset`], with freshly drawn values.
pub fn pretraining_corpus(cfg: &SyntheticConfig, n: usize, seed: u64) -> Vec<String> {
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|_| {
            let e = entity(rng.below(cfg.entities.max(1)));
            let r = RELATIONS[rng.below(RELATIONS.len())];
            let marker = rng.below(2) == 0;
            let answer_bearing = rng.below(2) == 0;
            let v = value(rng.below(cfg.values.max(1)));
            let passage = if answer_bearing {
                fact(&e, r, &v, &mut rng)
            } else {
                chatter(&e, r, rng.below(CHATTER.len()))
            };
            let target = match (marker, answer_bearing) {
                (true, false) => "none .".to_string(),
                (false, true) if rng.unit() >= UNMARKED_FACT_QUESTION_RATE => {
                    format!("so the answer is {v} .")
                }
                _ => question(&e, r),
            };
            let mut words = prefix(&mut rng, marker);
            words.push(&passage);
            words.push("question :");
            words.push(&target);
            words.join(" ")
        })
        .collect()
}
