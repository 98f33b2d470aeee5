//! Byte-level byte-pair encoding.
//!
//! Text is first cut into pieces that merges never cross: every newline is a
//! piece of its own, and spaces attach to the word that follows them, so a
//! mnemonic at the start of a line is a piece by itself. Training repeatedly
//! merges the most frequent adjacent pair; ties go to the pair that occurs
//! first in the corpus, then to the lexicographically smaller pair of byte
//! strings.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::extract::Example;

pub const DEFAULT_VOCAB_SIZE: usize = 50_000;
pub const MODEL_MAGIC: &str = "romeo-bpe 1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TokenizerError {
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error(
        "vocabulary size {requested} is smaller than the {alphabet} distinct bytes of the corpus"
    )]
    VocabTooSmall { requested: usize, alphabet: usize },
    #[error("byte {byte:#04x} at offset {offset} is not in the model alphabet")]
    UnknownByte { byte: u8, offset: usize },
    #[error("token id {0} is not in the vocabulary")]
    UnknownId(u32),
    #[error("model file line {line}: {reason}")]
    ModelFormat { line: usize, reason: String },
    #[error("{0}")]
    Io(String),
}

type Pair = (u32, u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Merge {
    pub left: u32,
    pub right: u32,
    pub result: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    vocab: Vec<Vec<u8>>,
    merges: Vec<Merge>,
    byte_ids: [Option<u32>; 256],
    ranks: HashMap<Pair, usize>,
}

impl BpeModel {
    fn from_parts(vocab: Vec<Vec<u8>>, merges: Vec<Merge>) -> Self {
        let mut byte_ids = [None; 256];
        for (id, tok) in vocab.iter().enumerate() {
            if let [b] = tok.as_slice() {
                if byte_ids[*b as usize].is_none() {
                    byte_ids[*b as usize] = Some(id as u32);
                }
            }
        }
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(r, m)| ((m.left, m.right), r))
            .collect();
        BpeModel {
            vocab,
            merges,
            byte_ids,
            ranks,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocabulary(&self) -> &[Vec<u8>] {
        &self.vocab
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn alphabet_size(&self) -> usize {
        self.vocab.len() - self.merges.len()
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.vocab.get(id as usize).map(Vec::as_slice)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>, TokenizerError> {
        let mut ids = Vec::with_capacity(text.len());
        let mut piece = Vec::new();
        for (start, p) in pieces(text) {
            piece.clear();
            for (i, &byte) in p.iter().enumerate() {
                let id = self.byte_ids[byte as usize].ok_or(TokenizerError::UnknownByte {
                    byte,
                    offset: start + i,
                })?;
                piece.push(id);
            }
            self.apply_merges(&mut piece);
            ids.extend_from_slice(&piece);
        }
        Ok(ids)
    }

    /// Token count of `text`; bytes outside the alphabet count as one
    /// token each and split the text around them.
    pub fn count_tokens(&self, text: &str) -> usize {
        let mut total = 0;
        let mut run = Vec::new();
        for (_, p) in pieces(text) {
            for &byte in p {
                match self.byte_ids[byte as usize] {
                    Some(id) => run.push(id),
                    None => {
                        self.apply_merges(&mut run);
                        total += run.len() + 1;
                        run.clear();
                    }
                }
            }
            self.apply_merges(&mut run);
            total += run.len();
            run.clear();
        }
        total
    }

    /// Applies the lowest-ranked present merge everywhere, until none is
    /// present. Same result as applying every merge in training order.
    fn apply_merges(&self, ids: &mut Vec<u32>) {
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let m = self.merges[rank];
            merge_pair(ids, (m.left, m.right), m.result);
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            bytes.extend_from_slice(self.token_bytes(id).ok_or(TokenizerError::UnknownId(id))?);
        }
        String::from_utf8(bytes)
            .map_err(|e| TokenizerError::Io(format!("decoded bytes are not UTF-8: {e}")))
    }

    /// Text format: magic line, `vocab N` and N hex tokens, then `merges M`
    /// and M lines `LEFT RIGHT RESULT`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MODEL_MAGIC}");
        let _ = writeln!(out, "vocab {}", self.vocab.len());
        for tok in &self.vocab {
            let _ = writeln!(out, "{}", hex::encode(tok));
        }
        let _ = writeln!(out, "merges {}", self.merges.len());
        for m in &self.merges {
            let _ = writeln!(out, "{} {} {}", m.left, m.right, m.result);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
        let fail = |line: usize, reason: &str| TokenizerError::ModelFormat {
            line,
            reason: reason.to_string(),
        };
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| fail(0, &format!("missing {what}")))
        };

        let (n, magic) = next("header")?;
        if magic != MODEL_MAGIC {
            return Err(fail(n, "not a romeo BPE model"));
        }
        let count = |(n, line): (usize, &str), key: &str| -> Result<usize, TokenizerError> {
            line.strip_prefix(key)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| fail(n, &format!("expected `{key} N`")))
        };
        let vocab_len = count(next("vocab count")?, "vocab")?;
        let mut vocab = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            let (n, line) = next("vocabulary entry")?;
            let tok = hex::decode(line).map_err(|_| fail(n, "bad hex token"))?;
            if tok.is_empty() {
                return Err(fail(n, "empty token"));
            }
            vocab.push(tok);
        }
        let merge_len = count(next("merge count")?, "merges")?;
        if merge_len > vocab_len {
            return Err(fail(0, "more merges than vocabulary entries"));
        }
        let base = vocab_len - merge_len;
        let mut merges = Vec::with_capacity(merge_len);
        for i in 0..merge_len {
            let (n, line) = next("merge rule")?;
            let parts: Vec<u32> = line
                .split_whitespace()
                .map(|p| p.parse().map_err(|_| fail(n, "bad merge rule")))
                .collect::<Result<_, _>>()?;
            let [left, right, result] = parts[..] else {
                return Err(fail(n, "expected `LEFT RIGHT RESULT`"));
            };
            let expected = (base + i) as u32;
            if result != expected || left >= expected || right >= expected {
                return Err(fail(n, "merge rule refers to a later token"));
            }
            let joined: Vec<u8> = [
                vocab[left as usize].as_slice(),
                vocab[right as usize].as_slice(),
            ]
            .concat();
            if joined != vocab[result as usize] {
                return Err(fail(n, "merge result does not match its parts"));
            }
            merges.push(Merge {
                left,
                right,
                result,
            });
        }
        if vocab[..base].iter().any(|t| t.len() != 1) {
            return Err(fail(0, "base alphabet must consist of single bytes"));
        }
        Ok(Self::from_parts(vocab, merges))
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_text())
            .map_err(|e| TokenizerError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TokenizerError::Io(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }
}

fn is_blank(b: u8) -> bool {
    b.is_ascii_whitespace() && b != b'\n'
}

/// Splits `text` into pieces, each with its byte offset: a lone newline, or
/// a run of other whitespace followed by the non-whitespace run after it.
pub fn pieces(text: &str) -> impl Iterator<Item = (usize, &[u8])> {
    let bytes = text.as_bytes();
    let mut pos = 0;
    std::iter::from_fn(move || {
        if pos >= bytes.len() {
            return None;
        }
        let start = pos;
        if bytes[pos] == b'\n' {
            pos += 1;
        } else {
            while pos < bytes.len() && is_blank(bytes[pos]) {
                pos += 1;
            }
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
        }
        Some((start, &bytes[start..pos]))
    })
}

fn merge_pair(ids: &mut Vec<u32>, pair: Pair, result: u32) {
    let mut out = 0;
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == pair.0 && ids[i + 1] == pair.1 {
            ids[out] = result;
            i += 2;
        } else {
            ids[out] = ids[i];
            i += 1;
        }
        out += 1;
    }
    ids.truncate(out);
}

fn pair_counts(ids: &[u32]) -> HashMap<Pair, i64> {
    let mut counts = HashMap::new();
    for w in ids.windows(2) {
        *counts.entry((w[0], w[1])).or_insert(0) += 1;
    }
    counts
}

#[derive(PartialEq, Eq)]
struct HeapEntry {
    count: i64,
    pair: Pair,
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| other.pair.cmp(&self.pair))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Trainer {
    vocab: Vec<Vec<u8>>,
    /// Distinct pieces in order of first occurrence.
    texts: Vec<Vec<u32>>,
    weights: Vec<i64>,
    /// (text index, byte offset) of each piece's first occurrence.
    first_seen: Vec<(usize, usize)>,
    counts: HashMap<Pair, i64>,
    holders: HashMap<Pair, BTreeSet<usize>>,
    heap: BinaryHeap<HeapEntry>,
}

impl Trainer {
    fn new(corpus: &[&str]) -> Result<Self, TokenizerError> {
        let mut present = [false; 256];
        let mut uniq: HashMap<&[u8], usize> = HashMap::new();
        let mut raw: Vec<&[u8]> = Vec::new();
        let mut weights = Vec::new();
        let mut first_seen = Vec::new();
        for (t, &text) in corpus.iter().enumerate() {
            for &b in text.as_bytes() {
                present[b as usize] = true;
            }
            for (offset, piece) in pieces(text) {
                match uniq.get(piece) {
                    Some(&i) => weights[i] += 1,
                    None => {
                        uniq.insert(piece, raw.len());
                        raw.push(piece);
                        weights.push(1i64);
                        first_seen.push((t, offset));
                    }
                }
            }
        }
        let mut ids = [0u32; 256];
        let mut vocab = Vec::new();
        for b in 0..256usize {
            if present[b] {
                ids[b] = vocab.len() as u32;
                vocab.push(vec![b as u8]);
            }
        }
        if vocab.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let texts: Vec<Vec<u32>> = raw
            .iter()
            .map(|t| t.iter().map(|&b| ids[b as usize]).collect())
            .collect();

        let mut counts: HashMap<Pair, i64> = HashMap::new();
        let mut holders: HashMap<Pair, BTreeSet<usize>> = HashMap::new();
        for (i, t) in texts.iter().enumerate() {
            for (pair, c) in pair_counts(t) {
                *counts.entry(pair).or_insert(0) += c * weights[i];
                holders.entry(pair).or_default().insert(i);
            }
        }
        let heap = counts
            .iter()
            .map(|(&pair, &count)| HeapEntry { count, pair })
            .collect();
        Ok(Trainer {
            vocab,
            texts,
            weights,
            first_seen,
            counts,
            holders,
            heap,
        })
    }

    /// (text index, byte offset) of the first occurrence of `pair`. Pieces
    /// are numbered in order of first occurrence and never overlap, so the
    /// lowest-numbered holder contains it.
    fn first_occurrence(&self, pair: Pair) -> (usize, usize) {
        let Some(&p) = self.holders.get(&pair).and_then(|s| s.iter().next()) else {
            return (usize::MAX, usize::MAX);
        };
        let (text, mut offset) = self.first_seen[p];
        for w in self.texts[p].windows(2) {
            if (w[0], w[1]) == pair {
                return (text, offset);
            }
            offset += self.vocab[w[0] as usize].len();
        }
        (text, usize::MAX)
    }

    fn pick(&mut self) -> Option<Pair> {
        let top = loop {
            let e = self.heap.pop()?;
            if self.counts.get(&e.pair) == Some(&e.count) {
                break e;
            }
        };
        if top.count < 2 {
            return None;
        }
        let mut tied = vec![top.pair];
        while let Some(e) = self.heap.peek() {
            if e.count != top.count {
                break;
            }
            let e = self.heap.pop().unwrap();
            if self.counts.get(&e.pair) == Some(&e.count) && !tied.contains(&e.pair) {
                tied.push(e.pair);
            }
        }
        let best = *tied
            .iter()
            .min_by(|&&a, &&b| {
                self.first_occurrence(a)
                    .cmp(&self.first_occurrence(b))
                    .then_with(|| self.vocab[a.0 as usize].cmp(&self.vocab[b.0 as usize]))
                    .then_with(|| self.vocab[a.1 as usize].cmp(&self.vocab[b.1 as usize]))
            })
            .unwrap();
        for p in tied {
            if p != best {
                self.heap.push(HeapEntry {
                    count: top.count,
                    pair: p,
                });
            }
        }
        Some(best)
    }

    fn apply(&mut self, pair: Pair, result: u32) {
        let holders: Vec<usize> = self
            .holders
            .get(&pair)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        let mut touched: BTreeSet<Pair> = BTreeSet::new();
        for t in holders {
            let before = pair_counts(&self.texts[t]);
            merge_pair(&mut self.texts[t], pair, result);
            let after = pair_counts(&self.texts[t]);
            let w = self.weights[t];
            for (p, c) in &before {
                let now = after.get(p).copied().unwrap_or(0);
                if now != *c {
                    *self.counts.get_mut(p).unwrap() += (now - c) * w;
                    touched.insert(*p);
                }
                if now == 0 {
                    if let Some(s) = self.holders.get_mut(p) {
                        s.remove(&t);
                    }
                }
            }
            for (p, c) in after {
                if !before.contains_key(&p) {
                    *self.counts.entry(p).or_insert(0) += c * w;
                    self.holders.entry(p).or_default().insert(t);
                    touched.insert(p);
                }
            }
        }
        for p in touched {
            let count = self.counts[&p];
            if count <= 0 {
                self.counts.remove(&p);
                self.holders.remove(&p);
            } else {
                self.heap.push(HeapEntry { count, pair: p });
            }
        }
    }
}

pub fn train_bpe<S: AsRef<str>>(
    corpus: &[S],
    vocab_size: usize,
) -> Result<BpeModel, TokenizerError> {
    let texts: Vec<&str> = corpus.iter().map(AsRef::as_ref).collect();
    if texts.iter().all(|t| t.is_empty()) {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut trainer = Trainer::new(&texts)?;
    let alphabet = trainer.vocab.len();
    if vocab_size < alphabet {
        return Err(TokenizerError::VocabTooSmall {
            requested: vocab_size,
            alphabet,
        });
    }
    let mut merges = Vec::new();
    while trainer.vocab.len() < vocab_size {
        let Some(pair) = trainer.pick() else { break };
        let result = trainer.vocab.len() as u32;
        let bytes = [
            trainer.vocab[pair.0 as usize].as_slice(),
            trainer.vocab[pair.1 as usize].as_slice(),
        ]
        .concat();
        trainer.vocab.push(bytes);
        trainer.apply(pair, result);
        merges.push(Merge {
            left: pair.0,
            right: pair.1,
            result,
        });
    }
    Ok(BpeModel::from_parts(trainer.vocab, merges))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub examples: usize,
    pub mean_tokens: f64,
    pub max_tokens: usize,
    pub cap: usize,
    pub over_cap_fraction: f64,
}

/// Token-length summary of `focal + context` over `examples`.
pub fn length_stats(model: &BpeModel, examples: &[Example], cap: usize) -> LengthStats {
    let lengths: Vec<usize> = examples
        .par_iter()
        .map(|e| model.count_tokens(&e.text()))
        .collect();
    let n = lengths.len();
    if n == 0 {
        return LengthStats {
            examples: 0,
            mean_tokens: 0.0,
            max_tokens: 0,
            cap,
            over_cap_fraction: 0.0,
        };
    }
    let total: usize = lengths.iter().sum();
    LengthStats {
        examples: n,
        mean_tokens: total as f64 / n as f64,
        max_tokens: lengths.iter().copied().max().unwrap_or(0),
        cap,
        over_cap_fraction: lengths.iter().filter(|&&l| l > cap).count() as f64 / n as f64,
    }
}
