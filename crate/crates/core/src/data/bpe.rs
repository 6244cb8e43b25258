//! Byte-level BPE.
//!
//! Ids `0..256` are raw bytes, id 256 is the document separator (written as
//! the `U+001E` character in text), and merge `i` creates id `257 + i`.
//! Text is cut into chunks before merging: a chunk is a run of whitespace
//! followed by a run of non-whitespace, so `"a bc  d"` becomes
//! `["a", " bc", "  d"]`. Merges never cross chunk boundaries.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEP_ID: usize = 256;
pub const SEP_CHAR: char = '\u{1e}';
pub const BASE_VOCAB: usize = 257;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "VocabFile", try_from = "VocabFile")]
pub struct BpeVocab {
    merges: Vec<(usize, usize)>,
    /// Byte expansion of every id; empty for the separator.
    pieces: Vec<Vec<u8>>,
    ranks: HashMap<(usize, usize), usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    kind: String,
    base: usize,
    sep_id: usize,
    merges: Vec<(usize, usize)>,
}

impl From<BpeVocab> for VocabFile {
    fn from(v: BpeVocab) -> Self {
        VocabFile { kind: "byte-bpe".into(), base: BASE_VOCAB, sep_id: SEP_ID, merges: v.merges }
    }
}

impl TryFrom<VocabFile> for BpeVocab {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        if f.kind != "byte-bpe" || f.base != BASE_VOCAB || f.sep_id != SEP_ID {
            return Err(Error::Data("unsupported vocabulary file".into()));
        }
        BpeVocab::from_merges(f.merges)
    }
}

fn base_pieces() -> Vec<Vec<u8>> {
    let mut p: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    p.push(Vec::new());
    p
}

/// Splits text into merge chunks; separators become their own chunk.
pub fn chunks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_ws = true;
    for (i, c) in text.char_indices() {
        if c == SEP_CHAR {
            if start < i {
                out.push(&text[start..i]);
            }
            out.push(&text[i..i + c.len_utf8()]);
            start = i + c.len_utf8();
            prev_ws = true;
            continue;
        }
        let ws = c.is_whitespace();
        if ws && !prev_ws && start < i {
            out.push(&text[start..i]);
            start = i;
        }
        prev_ws = ws;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

fn chunk_ids(chunk: &str) -> Vec<usize> {
    if chunk.starts_with(SEP_CHAR) {
        vec![SEP_ID]
    } else {
        chunk.bytes().map(usize::from).collect()
    }
}

fn merge_in_place(word: &mut Vec<usize>, pair: (usize, usize), new_id: usize) {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && (word[i], word[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    *word = out;
}

impl BpeVocab {
    /// The 257-symbol byte vocabulary without merges.
    pub fn bytes_only() -> Self {
        Self { merges: Vec::new(), pieces: base_pieces(), ranks: HashMap::new() }
    }

    pub fn from_merges(merges: Vec<(usize, usize)>) -> Result<Self> {
        let mut pieces = base_pieces();
        let mut ranks = HashMap::new();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let n = pieces.len();
            if a >= n || b >= n || a == SEP_ID || b == SEP_ID {
                return Err(Error::Data(format!("merge {rank} refers to invalid ids ({a}, {b})")));
            }
            if ranks.insert((a, b), rank).is_some() {
                return Err(Error::Data(format!("merge {rank} duplicates an earlier merge")));
            }
            let mut piece = pieces[a].clone();
            piece.extend_from_slice(&pieces[b]);
            pieces.push(piece);
        }
        Ok(Self { merges, pieces, ranks })
    }

    /// Greedy merging of the most frequent adjacent pair until the vocabulary
    /// reaches `vocab_size` or no pair is left. Ties go to the pair whose
    /// byte strings sort first.
    pub fn train(text: &str, vocab_size: usize) -> Result<Self> {
        if vocab_size < BASE_VOCAB {
            return Err(Error::Config(format!("vocabulary size must be at least {BASE_VOCAB}, got {vocab_size}")));
        }
        if text.is_empty() {
            return Err(Error::Data("cannot train a tokenizer on an empty corpus".into()));
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for c in chunks(text) {
            if !c.starts_with(SEP_CHAR) {
                *freq.entry(c).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<usize>, usize)> = freq.into_iter().map(|(c, n)| (chunk_ids(c), n)).collect();
        words.sort();

        let mut vocab = Self::bytes_only();
        while vocab.pieces.len() < vocab_size {
            let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
            for (w, n) in &words {
                for p in w.windows(2) {
                    *counts.entry((p[0], p[1])).or_default() += n;
                }
            }
            let best = counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| vocab.pair_key(*pb).cmp(&vocab.pair_key(*pa)))
            });
            let Some((pair, _)) = best else { break };
            let id = vocab.pieces.len();
            vocab.push_merge(pair);
            for (w, _) in &mut words {
                merge_in_place(w, pair, id);
            }
        }
        Ok(vocab)
    }

    fn pair_key(&self, (a, b): (usize, usize)) -> (&[u8], &[u8]) {
        (&self.pieces[a], &self.pieces[b])
    }

    fn push_merge(&mut self, pair: (usize, usize)) {
        let mut piece = self.pieces[pair.0].clone();
        piece.extend_from_slice(&self.pieces[pair.1]);
        self.ranks.insert(pair, self.merges.len());
        self.merges.push(pair);
        self.pieces.push(piece);
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn merges(&self) -> &[(usize, usize)] {
        &self.merges
    }

    /// Bytes of one token (the separator maps to `0x1E`).
    pub fn piece(&self, id: usize) -> Result<&[u8]> {
        match id {
            SEP_ID => Ok(&[0x1e]),
            _ => self
                .pieces
                .get(id)
                .map(Vec::as_slice)
                .ok_or_else(|| Error::Data(format!("token id {id} not in vocabulary of {}", self.len()))),
        }
    }

    fn encode_chunk(&self, chunk: &str) -> Vec<usize> {
        let mut word = chunk_ids(chunk);
        loop {
            let best = word
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            merge_in_place(&mut word, pair, BASE_VOCAB + rank);
        }
        word
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut cache: HashMap<&str, Vec<usize>> = HashMap::new();
        let mut out = Vec::with_capacity(text.len() / 2);
        for c in chunks(text) {
            let ids = cache.entry(c).or_insert_with(|| self.encode_chunk(c));
            out.extend_from_slice(ids);
        }
        out
    }

    pub fn decode_bytes(&self, ids: &[usize]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.piece(id)?);
        }
        Ok(out)
    }

    /// Decodes to text; byte sequences that are not valid UTF-8 (possible
    /// for arbitrary id lists) are replaced by U+FFFD.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("vocabulary file: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::report::write_text(path, &self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunking() {
        assert_eq!(chunks("a bc  d"), vec!["a", " bc", "  d"]);
        assert_eq!(chunks("  x\ny "), vec!["  x", "\ny", " "]);
        assert_eq!(chunks("ab\u{1e}cd"), vec!["ab", "\u{1e}", "cd"]);
        assert!(chunks("").is_empty());
    }

    #[test]
    fn only_pair_is_merged_first() {
        let v = BpeVocab::train("aaaa", 258).unwrap();
        assert_eq!(v.merges(), &[(97, 97)]);
        assert_eq!(v.encode("aaaa"), vec![257, 257]);
    }

    #[test]
    fn base_size_means_no_merges() {
        let v = BpeVocab::train("hello world", BASE_VOCAB).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.encode("hi"), vec![104, 105]);
    }

    #[test]
    fn ties_break_lexicographically() {
        // "cd", "da" and "ab" each occur once.
        let v = BpeVocab::train("cdab", 258).unwrap();
        assert_eq!(v.merges(), &[(b'a' as usize, b'b' as usize)]);
    }

    #[test]
    fn errors() {
        assert!(matches!(BpeVocab::train("", 300), Err(Error::Data(_))));
        assert!(matches!(BpeVocab::train("x", 10), Err(Error::Config(_))));
        assert!(matches!(BpeVocab::bytes_only().decode(&[257]), Err(Error::Data(_))));
    }

    #[test]
    fn separator_roundtrip() {
        let v = BpeVocab::train("one doc\u{1e}two docs", 270).unwrap();
        let ids = v.encode("doc\u{1e}doc");
        assert!(ids.contains(&SEP_ID));
        assert_eq!(v.decode(&ids).unwrap(), "doc\u{1e}doc");
    }

    #[test]
    fn json_roundtrip() {
        let v = BpeVocab::train("the cat sat on the mat", 270).unwrap();
        let back = BpeVocab::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
    }
}
