//! Subword vocabulary learned by greedy pair merging, greedy longest-match
//! encoding and BERT-style dynamic masking.
//!
//! Word-internal pieces carry a `##` prefix, so decoding glues them to the
//! previous piece and separates words with a single space.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;

/// Special tokens in id order.
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const NUM_SPECIALS: usize = SPECIAL_TOKENS.len();

pub const CONTINUATION_PREFIX: &str = "##";

/// Fraction of selected positions replaced by `[MASK]`.
pub const MASK_REPLACE_PROB: f64 = 0.8;
/// Fraction of selected positions replaced by a random ordinary token.
pub const RANDOM_REPLACE_PROB: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub attention_mask: Vec<u8>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A masked input and, per position, the original id the model must recover
/// (`None` where no prediction is asked for).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSeq {
    pub input: TokenSeq,
    pub targets: Vec<Option<TokenId>>,
}

impl MaskedSeq {
    pub fn num_targets(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIALS
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::invalid(format!("vocabulary must start with {SPECIAL_TOKENS:?}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("bad vocabulary token at line {}", i + 1)));
            }
            if index.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::DuplicateId(tok.clone()));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Hex SHA-256 of the token list; identifies the vocabulary in checkpoints.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    /// One token per line; the line index is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(content.lines().map(str::to_string).collect())
    }

    /// Splits one whitespace-free word into pieces by greedy longest match.
    /// A word with any unmatchable span becomes a single `[UNK]`.
    fn word_pieces(&self, word: &str, out: &mut Vec<TokenId>) {
        let start_len = out.len();
        let mut start = 0;
        let mut candidate = String::new();
        while start < word.len() {
            let mut found = None;
            let mut end = word.len();
            while end > start {
                candidate.clear();
                if start > 0 {
                    candidate.push_str(CONTINUATION_PREFIX);
                }
                candidate.push_str(&word[start..end]);
                if let Some(id) = self.id(&candidate) {
                    found = Some((id, end));
                    break;
                }
                end = word[..end].char_indices().next_back().map_or(start, |(i, _)| i);
            }
            match found {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.truncate(start_len);
                    out.push(UNK);
                    return;
                }
            }
        }
    }

    /// Subword ids of `text` without special tokens.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            self.word_pieces(word, &mut out);
        }
        out
    }
}

fn symbol_of(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 {
                c.to_string()
            } else {
                format!("{CONTINUATION_PREFIX}{c}")
            }
        })
        .collect()
}

fn merged_token(left: &str, right: &str) -> String {
    let right = right.strip_prefix(CONTINUATION_PREFIX).unwrap_or(right);
    format!("{left}{right}")
}

/// Seeded tie-break rank for pairs of equal frequency.
fn tie_rank(seed: u64, token: &str) -> u64 {
    // FNV-1a followed by a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in token.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Learns a vocabulary of at most `vocab_size` entries: specials, every
/// character seen (initial and continuation forms), then merged pieces in
/// order of pair frequency. Stops early when no pair is left to merge.
pub fn train_vocab<I, S>(corpus: I, vocab_size: usize, seed: u64) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut any_text = false;
    for text in corpus {
        any_text = true;
        for word in text.as_ref().split_whitespace() {
            *word_counts.entry(word.to_string()).or_default() += 1;
        }
    }
    if !any_text || word_counts.is_empty() {
        return Err(Error::invalid("cannot train a vocabulary on an empty corpus"));
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    let mut index: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
    let alphabet: std::collections::BTreeSet<String> = word_counts.keys().flat_map(|w| symbol_of(w)).collect();
    if vocab_size < NUM_SPECIALS + alphabet.len() {
        return Err(Error::invalid(format!(
            "vocab_size {vocab_size} is too small: {} specials + {} base symbols needed",
            NUM_SPECIALS,
            alphabet.len()
        )));
    }
    for sym in alphabet {
        index.insert(sym.clone(), tokens.len() as u32);
        tokens.push(sym);
    }

    let mut words: Vec<(Vec<u32>, u64)> = word_counts
        .iter()
        .map(|(w, &c)| (symbol_of(w).iter().map(|s| index[s]).collect(), c))
        .collect();

    while tokens.len() < vocab_size {
        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (syms, count) in &words {
            for pair in syms.windows(2) {
                *pair_counts.entry((pair[0], pair[1])).or_default() += count;
            }
        }
        let best = pair_counts
            .into_iter()
            .map(|((a, b), count)| {
                let merged = merged_token(&tokens[a as usize], &tokens[b as usize]);
                (count, tie_rank(seed, &merged), a, b, merged)
            })
            .max_by(|x, y| (x.0, x.1, &x.4).cmp(&(y.0, y.1, &y.4)));
        let Some((_, _, a, b, merged)) = best else {
            break;
        };
        let new_id = match index.get(&merged) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as u32;
                index.insert(merged.clone(), id);
                tokens.push(merged);
                id
            }
        };
        for (syms, _) in &mut words {
            if syms.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
        }
    }
    Vocab::from_tokens(tokens)
}

/// `[CLS] pieces… [SEP] [PAD]…`, truncated so that `[SEP]` always survives.
///
/// # Panics
/// If `max_len < 2`.
pub fn encode(v: &Vocab, text: &str, max_len: usize) -> TokenSeq {
    assert!(max_len >= 2, "max_len must leave room for [CLS] and [SEP]");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    let pieces = v.tokenize(text);
    ids.extend(pieces.into_iter().take(max_len - 2));
    ids.push(SEP);
    let used = ids.len();
    ids.resize(max_len, PAD);
    let mut attention_mask = vec![1u8; used];
    attention_mask.resize(max_len, 0);
    TokenSeq { ids, attention_mask }
}

/// Drops specials and glues `##` pieces onto the preceding piece.
pub fn decode(v: &Vocab, ids: &[TokenId]) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        let tok = v
            .token(id)
            .ok_or_else(|| Error::invalid(format!("token id {id} out of range (|V| = {})", v.len())))?;
        if is_special(id) {
            continue;
        }
        match tok.strip_prefix(CONTINUATION_PREFIX) {
            Some(rest) => out.push_str(rest),
            None => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
    }
    Ok(out)
}

/// Dynamic MLM masking: every maskable position is selected independently
/// with probability `mask_rate`; selected positions become `[MASK]`, a
/// random ordinary token, or stay unchanged with probabilities 0.8/0.1/0.1.
pub fn mask_for_mlm(v: &Vocab, seq: &TokenSeq, mask_rate: f64, seed: u64) -> Result<MaskedSeq> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::invalid(format!("mask_rate must be in (0, 1), got {mask_rate}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut input = seq.clone();
    let mut targets = vec![None; seq.len()];
    let ordinary = v.len().saturating_sub(NUM_SPECIALS) as u32;
    for (pos, (&id, &att)) in seq.ids.iter().zip(&seq.attention_mask).enumerate() {
        if att == 0 || is_special(id) {
            continue;
        }
        if rng.gen::<f64>() >= mask_rate {
            continue;
        }
        targets[pos] = Some(id);
        let action: f64 = rng.gen();
        if action < MASK_REPLACE_PROB {
            input.ids[pos] = MASK;
        } else if action < MASK_REPLACE_PROB + RANDOM_REPLACE_PROB && ordinary > 0 {
            input.ids[pos] = NUM_SPECIALS as u32 + rng.gen_range(0..ordinary);
        }
    }
    Ok(MaskedSeq { input, targets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_vocab() -> Vocab {
        let corpus = [
            "the court held that the contract was void",
            "the tribunal held the agreement valid",
            "hello world hello court",
        ];
        train_vocab(corpus, 120, 0).unwrap()
    }

    /// Replays the merge procedure by hand on a tiny corpus: count adjacent
    /// pairs weighted by word frequency and merge the most frequent one.
    fn brute_force_first_merge(words: &[(&str, u64)]) -> String {
        let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (w, c) in words {
            let syms = symbol_of(w);
            for i in 0..syms.len().saturating_sub(1) {
                *counts.entry((syms[i].clone(), syms[i + 1].clone())).or_default() += c;
            }
        }
        let ((a, b), _) = counts.into_iter().max_by_key(|(_, c)| *c).unwrap();
        merged_token(&a, &b)
    }

    #[test]
    fn merges_most_frequent_pair() {
        let expected = brute_force_first_merge(&[("aa", 2), ("ab", 1)]);
        assert_eq!(expected, "aa");
        let v = train_vocab(["aa aa ab"], 10, 0).unwrap();
        assert!(v.id("aa").is_some());
        assert_eq!(v.len(), 10);
        // specials + a, ##a, ##b + aa + ab
        assert!(v.id("ab").is_some());
    }

    #[test]
    fn stops_when_no_pairs_remain() {
        let v = train_vocab(["aa aa ab"], 50, 0).unwrap();
        assert_eq!(v.len(), 10);
    }

    #[test]
    fn empty_corpus_and_small_size_rejected() {
        assert!(train_vocab(Vec::<String>::new(), 100, 0).is_err());
        assert!(train_vocab(["   "], 100, 0).is_err());
        assert!(train_vocab(["abc"], 7, 0).is_err());
    }

    #[test]
    fn deterministic_training() {
        let corpus = ["one two three two one", "three three four"];
        assert_eq!(train_vocab(corpus, 40, 7).unwrap(), train_vocab(corpus, 40, 7).unwrap());
    }

    #[test]
    fn encode_empty_text() {
        let v = small_vocab();
        let seq = encode(&v, "", 6);
        assert_eq!(seq.ids, vec![CLS, SEP, PAD, PAD, PAD, PAD]);
        assert_eq!(seq.attention_mask, vec![1, 1, 0, 0, 0, 0]);
    }

    #[test]
    fn encode_truncates_keeping_sep() {
        let v = small_vocab();
        let text = "the court held that the contract was void ".repeat(10);
        let seq = encode(&v, &text, 8);
        assert_eq!(seq.len(), 8);
        assert_eq!(seq.ids[0], CLS);
        assert_eq!(seq.ids[7], SEP);
        assert!(seq.attention_mask.iter().all(|&m| m == 1));
    }

    #[test]
    fn unknown_characters_become_unk() {
        let v = small_vocab();
        let mut expected = v.tokenize("court");
        expected.push(UNK);
        expected.extend(v.tokenize("held"));
        assert_eq!(v.tokenize("court §§§ held"), expected);
        // one bad character poisons the whole word
        assert_eq!(v.tokenize("cour§"), vec![UNK]);
    }

    #[test]
    fn decode_examples() {
        let v = small_vocab();
        let hello = v.tokenize("hello");
        let mut ids = vec![CLS];
        ids.extend(&hello);
        ids.push(SEP);
        assert_eq!(decode(&v, &ids).unwrap(), "hello");
        assert_eq!(decode(&v, &[CLS, SEP]).unwrap(), "");
        assert!(decode(&v, &[v.len() as u32]).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = small_vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\n"));
    }

    #[test]
    fn masking_rejects_bad_rate() {
        let v = small_vocab();
        let seq = encode(&v, "the court", 8);
        for rate in [0.0, 1.0, -0.1, 1.5] {
            assert!(mask_for_mlm(&v, &seq, rate, 0).is_err());
        }
    }

    #[test]
    fn nothing_maskable() {
        let v = small_vocab();
        let seq = encode(&v, "", 2);
        let m = mask_for_mlm(&v, &seq, 0.5, 3).unwrap();
        assert_eq!(m.input, seq);
        assert!(m.targets.iter().all(Option::is_none));
    }

    /// Large-sample check of the selection rate and the 80/10/10 split.
    #[test]
    fn masking_statistics() {
        let v = small_vocab();
        let text = "the court held that the contract was void ".repeat(32);
        let seq = encode(&v, &text, 256);
        let maskable = seq.ids.iter().filter(|&&id| !is_special(id)).count();
        let (mut positions, mut selected, mut masked, mut random, mut kept) = (0, 0, 0, 0, 0);
        let mut seed = 0;
        while positions < 1_000_000 {
            let m = mask_for_mlm(&v, &seq, 0.15, seed).unwrap();
            seed += 1;
            positions += maskable;
            for (i, t) in m.targets.iter().enumerate() {
                if let Some(orig) = t {
                    selected += 1;
                    if m.input.ids[i] == MASK {
                        masked += 1;
                    } else if m.input.ids[i] == *orig {
                        kept += 1;
                    } else {
                        random += 1;
                    }
                }
            }
        }
        let frac = selected as f64 / positions as f64;
        assert!((frac - 0.15).abs() < 0.005, "selected fraction {frac}");
        assert!(selected >= 100_000);
        let s = selected as f64;
        assert!((masked as f64 / s - 0.8).abs() < 0.01);
        // a random replacement can coincide with the original token
        assert!(((random + kept) as f64 / s - 0.2).abs() < 0.01);
        assert!((kept as f64 / s - 0.1).abs() < 0.01);
    }

    fn in_vocab_sentence() -> impl Strategy<Value = String> {
        let words = vec![
            "the",
            "court",
            "held",
            "that",
            "contract",
            "was",
            "void",
            "tribunal",
            "agreement",
            "valid",
            "hello",
            "world",
        ];
        prop::collection::vec(prop::sample::select(words), 0..12).prop_map(|ws| ws.join("  "))
    }

    proptest! {
        #[test]
        fn round_trip_in_vocab(text in in_vocab_sentence()) {
            let v = small_vocab();
            let seq = encode(&v, &text, 64);
            let normalized = text.split_whitespace().collect::<Vec<_>>().join(" ");
            prop_assert_eq!(decode(&v, &seq.ids).unwrap(), normalized);
        }

        #[test]
        fn encode_invariants(text in "[a-z §]{0,80}", max_len in 2usize..40) {
            let v = small_vocab();
            let seq = encode(&v, &text, max_len);
            prop_assert_eq!(seq.ids.len(), max_len);
            prop_assert_eq!(seq.attention_mask.len(), max_len);
            prop_assert_eq!(seq.ids[0], CLS);
            for (&id, &m) in seq.ids.iter().zip(&seq.attention_mask) {
                prop_assert!((id as usize) < v.len());
                prop_assert_eq!(m == 0, id == PAD);
            }
            let last = seq.attention_mask.iter().rposition(|&m| m == 1).unwrap();
            prop_assert_eq!(seq.ids[last], SEP);
        }

        #[test]
        fn mask_targets_match_selection(text in in_vocab_sentence(), seed in any::<u64>()) {
            let v = small_vocab();
            let seq = encode(&v, &text, 24);
            let a = mask_for_mlm(&v, &seq, 0.3, seed).unwrap();
            prop_assert_eq!(&a, &mask_for_mlm(&v, &seq, 0.3, seed).unwrap());
            for (i, t) in a.targets.iter().enumerate() {
                if let Some(orig) = t {
                    prop_assert!(!is_special(seq.ids[i]));
                    prop_assert_eq!(*orig, seq.ids[i]);
                } else {
                    prop_assert_eq!(a.input.ids[i], seq.ids[i]);
                }
            }
        }
    }
}
