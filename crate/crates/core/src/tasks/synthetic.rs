//! Seeded synthetic corpora with topic-conditioned vocabulary: an unlabeled
//! domain corpus, a multi-label document set and a case/catchphrase set.

use std::collections::{BTreeSet, HashSet};

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::corpus::{split_cases, Case, CaseSet, LabeledDoc, LabeledDocSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_topics: usize,
    pub docs_per_topic: usize,
    /// Zipf exponent for word frequencies inside every word list.
    pub vocab_skew: f64,
    /// Probability that a document carries one extra label without textual support.
    pub label_noise: f64,
    pub seed: u64,
    pub words_per_topic: usize,
    pub general_words: usize,
    pub doc_len: usize,
    /// Fraction of document positions drawn from topic vocabularies.
    pub topic_density: f64,
    pub secondary_topic_prob: f64,
    pub domain_docs: usize,
    /// Size of the keyword pool from which case-specific catchphrases are built.
    pub case_keywords: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_topics: 6,
            docs_per_topic: 80,
            vocab_skew: 1.0,
            label_noise: 0.0,
            seed: 0,
            words_per_topic: 24,
            general_words: 60,
            doc_len: 24,
            topic_density: 0.35,
            secondary_topic_prob: 0.3,
            domain_docs: 600,
            case_keywords: 120,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.num_topics == 0 || self.docs_per_topic == 0 || self.words_per_topic == 0 || self.general_words == 0 {
            return bad("counts must be positive");
        }
        if !(self.vocab_skew > 0.0 && self.vocab_skew.is_finite()) {
            return bad("vocab_skew must be positive");
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return bad("label_noise must lie in [0, 1)");
        }
        if !(self.topic_density > 0.0 && self.topic_density < 1.0) {
            return bad("topic_density must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.secondary_topic_prob) {
            return bad("secondary_topic_prob must lie in [0, 1]");
        }
        if self.doc_len < 8 {
            return bad("doc_len must be at least 8");
        }
        if self.case_keywords < 4 {
            return bad("case_keywords must be at least 4");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub domain_corpus: Vec<String>,
    pub classification: LabeledDocSet,
    pub cases: CaseSet,
    /// Topic word lists, index = topic.
    pub topic_words: Vec<Vec<String>>,
}

impl SyntheticData {
    pub fn topic_label(topic: usize) -> String {
        format!("topic{topic:02}")
    }
}

struct WordList {
    words: Vec<String>,
    dist: WeightedIndex<f64>,
}

impl WordList {
    fn new(words: Vec<String>, skew: f64) -> Self {
        let weights: Vec<f64> = (0..words.len()).map(|r| 1.0 / ((r + 1) as f64).powf(skew)).collect();
        let dist = WeightedIndex::new(weights).expect("non-empty positive weights");
        WordList { words, dist }
    }

    fn sample<'a>(&'a self, rng: &mut ChaCha8Rng) -> &'a str {
        &self.words[self.dist.sample(rng)]
    }
}

fn pseudo_words(n: usize, seen: &mut HashSet<String>, rng: &mut ChaCha8Rng) -> Vec<String> {
    const CONSONANTS: &[u8] = b"bcdfghjklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(2..=3);
        let word: String = (0..syllables)
            .flat_map(|_| {
                [
                    CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char,
                    VOWELS[rng.gen_range(0..VOWELS.len())] as char,
                ]
            })
            .collect();
        if seen.insert(word.clone()) {
            out.push(word);
        }
    }
    out
}

struct Lexicon {
    topics: Vec<WordList>,
    general: WordList,
    shifted_general: WordList,
    keywords: Vec<String>,
}

impl Lexicon {
    /// Tokens of one document over `topics`; every listed topic contributes
    /// at least one word.
    fn document(
        &self,
        topics: &[usize],
        len: usize,
        density: f64,
        general: &WordList,
        rng: &mut ChaCha8Rng,
    ) -> Vec<String> {
        let mut words: Vec<String> = (0..len)
            .map(|_| {
                if rng.gen::<f64>() < density {
                    let t = topics[rng.gen_range(0..topics.len())];
                    self.topics[t].sample(rng).to_string()
                } else {
                    general.sample(rng).to_string()
                }
            })
            .collect();
        for &t in topics {
            let pos = rng.gen_range(0..words.len());
            words[pos] = self.topics[t].sample(rng).to_string();
        }
        for &t in topics {
            if !words.iter().any(|w| self.topics[t].words.contains(w)) {
                words.push(self.topics[t].sample(rng).to_string());
            }
        }
        words
    }
}

fn doc_topics(spec: &SyntheticSpec, primary: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut topics = vec![primary];
    if spec.num_topics > 1 && rng.gen::<f64>() < spec.secondary_topic_prob {
        let mut other = rng.gen_range(0..spec.num_topics - 1);
        if other >= primary {
            other += 1;
        }
        topics.push(other);
    }
    topics
}

/// Builds all three corpora from `spec`; identical specs give identical data.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut word_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 1));
    let mut seen = HashSet::new();
    let topic_words: Vec<Vec<String>> = (0..spec.num_topics)
        .map(|_| pseudo_words(spec.words_per_topic, &mut seen, &mut word_rng))
        .collect();
    let general = pseudo_words(spec.general_words, &mut seen, &mut word_rng);
    let mut shifted = general.clone();
    shifted.reverse();
    let lex = Lexicon {
        topics: topic_words
            .iter()
            .map(|w| WordList::new(w.clone(), spec.vocab_skew))
            .collect(),
        general: WordList::new(general, spec.vocab_skew),
        shifted_general: WordList::new(shifted, spec.vocab_skew),
        keywords: pseudo_words(spec.case_keywords, &mut seen, &mut word_rng),
    };
    let n = spec.num_topics * spec.docs_per_topic;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 2));
    let domain_corpus: Vec<String> = (0..spec.domain_docs)
        .map(|i| {
            let topics = doc_topics(spec, i % spec.num_topics, &mut rng);
            lex.document(
                &topics,
                spec.doc_len,
                spec.topic_density,
                &lex.shifted_general,
                &mut rng,
            )
            .join(" ")
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 3));
    let mut docs: Vec<LabeledDoc> = (0..n)
        .map(|i| {
            let topics = doc_topics(spec, i % spec.num_topics, &mut rng);
            let text = lex
                .document(&topics, spec.doc_len, spec.topic_density, &lex.general, &mut rng)
                .join(" ");
            let mut labels: BTreeSet<String> = topics.iter().map(|&t| SyntheticData::topic_label(t)).collect();
            if rng.gen::<f64>() < spec.label_noise {
                labels.insert(SyntheticData::topic_label(rng.gen_range(0..spec.num_topics)));
            }
            LabeledDoc {
                id: format!("doc{i:05}"),
                text,
                labels,
            }
        })
        .collect();
    docs.shuffle(&mut rng);
    let n_eval = (n / 10).max(1).min(n.saturating_sub(1) / 2);
    let test = docs.split_off(n - n_eval);
    let dev = docs.split_off(n - 2 * n_eval);
    let by_id = |mut v: Vec<LabeledDoc>| {
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    };
    let classification = LabeledDocSet::from_splits(by_id(docs), by_id(dev), by_id(test))?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 4));
    let kw = WordList::new(lex.keywords.clone(), 0.0);
    let cases: Vec<Case> = (0..n)
        .map(|i| {
            let topic = i % spec.num_topics;
            let n_phrases = rng.gen_range(1..=2);
            let mut keys: Vec<&str> = Vec::new();
            while keys.len() < 2 * n_phrases {
                let k = kw.sample(&mut rng);
                if !keys.contains(&k) {
                    keys.push(k);
                }
            }
            let mut body = lex.document(&[topic], spec.doc_len, spec.topic_density, &lex.general, &mut rng);
            for k in &keys {
                for _ in 0..2 {
                    let pos = rng.gen_range(0..=body.len());
                    body.insert(pos, k.to_string());
                }
            }
            let catchphrases = keys
                .chunks(2)
                .map(|pair| format!("{} {} {}", lex.topics[topic].sample(&mut rng), pair[0], pair[1]))
                .collect();
            Case {
                id: format!("case{i:05}"),
                body: body.join(" "),
                catchphrases,
            }
        })
        .collect();
    let cases = split_cases(cases, derive_seed(spec.seed, 5))?;

    Ok(SyntheticData {
        domain_corpus,
        classification,
        cases,
        topic_words,
    })
}
