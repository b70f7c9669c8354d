//! Cased byte-level BPE.
//!
//! The base alphabet is all 256 byte values, so every input is encodable and
//! the `unk` id is never produced. Text is pre-split into pieces made of any
//! leading whitespace followed by a run of non-whitespace bytes; merges never
//! cross piece boundaries. During training the most frequent adjacent pair is
//! merged first, with ties going to the lexicographically smaller
//! `(left bytes, right bytes)` pair.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Names of the four reserved tokens. They always occupy ids 0..4 in the
/// order pad, unk, bos, mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecialTokens {
    pub pad: String,
    pub unk: String,
    pub bos: String,
    pub mask: String,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        SpecialTokens {
            pad: "<pad>".into(),
            unk: "<unk>".into(),
            bos: "<s>".into(),
            mask: "<mask>".into(),
        }
    }
}

impl SpecialTokens {
    pub const COUNT: usize = 4;
    pub const PAD: TokenId = 0;
    pub const UNK: TokenId = 1;
    pub const BOS: TokenId = 2;
    pub const MASK: TokenId = 3;

    fn names(&self) -> [&str; 4] {
        [&self.pad, &self.unk, &self.bos, &self.mask]
    }
}

const BYTE_BASE: TokenId = SpecialTokens::COUNT as TokenId;
const BASE_SIZE: usize = SpecialTokens::COUNT + 256;

/// Desk-scale vocabulary size.
pub const DEFAULT_VOCAB_SIZE: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    specials: SpecialTokens,
    /// Byte content of every non-special id; empty for specials.
    tokens: Vec<Vec<u8>>,
    /// Merges in training order, as token ids.
    merges: Vec<(TokenId, TokenId)>,
    lookup: HashMap<Vec<u8>, TokenId>,
    ranks: HashMap<(TokenId, TokenId), (usize, TokenId)>,
}

impl Tokenizer {
    fn with_base(specials: SpecialTokens) -> Self {
        let mut tokens: Vec<Vec<u8>> = vec![Vec::new(); SpecialTokens::COUNT];
        tokens.extend((0..=255u8).map(|b| vec![b]));
        let lookup = tokens
            .iter()
            .enumerate()
            .skip(SpecialTokens::COUNT)
            .map(|(id, t)| (t.clone(), id as TokenId))
            .collect();
        Tokenizer {
            specials,
            tokens,
            merges: Vec::new(),
            lookup,
            ranks: HashMap::new(),
        }
    }

    /// Appends a merge; returns the id of the merged token.
    fn push_merge(&mut self, left: TokenId, right: TokenId) -> TokenId {
        let mut bytes = self.tokens[left as usize].clone();
        bytes.extend_from_slice(&self.tokens[right as usize]);
        let id = match self.lookup.get(&bytes) {
            Some(&id) => id,
            None => {
                let id = self.tokens.len() as TokenId;
                self.lookup.insert(bytes.clone(), id);
                self.tokens.push(bytes);
                id
            }
        };
        self.ranks.entry((left, right)).or_insert((self.merges.len(), id));
        self.merges.push((left, right));
        id
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn specials(&self) -> &SpecialTokens {
        &self.specials
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < SpecialTokens::COUNT
    }

    pub fn pad_id(&self) -> TokenId {
        SpecialTokens::PAD
    }

    pub fn unk_id(&self) -> TokenId {
        SpecialTokens::UNK
    }

    pub fn bos_id(&self) -> TokenId {
        SpecialTokens::BOS
    }

    pub fn mask_id(&self) -> TokenId {
        SpecialTokens::MASK
    }

    /// Byte content of a token (empty for specials).
    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn token_id(&self, bytes: &[u8]) -> Option<TokenId> {
        self.lookup.get(bytes).copied()
    }

    /// Readable form of a token as written to `vocab.txt`.
    pub fn token_string(&self, id: TokenId) -> Option<String> {
        let idx = id as usize;
        if idx < SpecialTokens::COUNT {
            return Some(self.specials.names()[idx].to_string());
        }
        self.tokens.get(idx).map(|b| escape_bytes(b))
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for piece in pretokenize(text.as_bytes()) {
            self.encode_piece(piece, &mut out);
        }
        out
    }

    fn encode_piece(&self, piece: &[u8], out: &mut Vec<TokenId>) {
        let mut symbols: Vec<TokenId> = piece.iter().map(|&b| BYTE_BASE + b as TokenId).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, _)| (rank, w[0], w[1])))
                .min();
            let Some((_, left, right)) = best else { break };
            let merged = self.ranks[&(left, right)].1;
            let mut next = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = next;
        }
        out.extend(symbols);
    }

    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        for &id in ids {
            let token = self
                .tokens
                .get(id as usize)
                .ok_or_else(|| Error::invalid(format!("token id {id} out of range")))?;
            bytes.extend_from_slice(token);
        }
        Ok(bytes)
    }

    /// Concatenates token bytes; specials contribute nothing. Id sequences
    /// that do not form valid UTF-8 are decoded lossily.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Writes `vocab.txt` and `merges.txt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let vocab: String = (0..self.vocab_size() as TokenId)
            .map(|id| self.token_string(id).expect("id in range") + "\n")
            .collect();
        let merges: String = self
            .merges
            .iter()
            .map(|&(l, r)| {
                format!(
                    "{} {}\n",
                    escape_bytes(&self.tokens[l as usize]),
                    escape_bytes(&self.tokens[r as usize])
                )
            })
            .collect();
        let vocab_path = dir.join("vocab.txt");
        fs::write(&vocab_path, vocab).map_err(|e| Error::io(&vocab_path, e))?;
        let merges_path = dir.join("merges.txt");
        fs::write(&merges_path, merges).map_err(|e| Error::io(&merges_path, e))?;
        Ok(())
    }

    /// Loads a tokenizer from `vocab.txt` + `merges.txt`. The merge list is
    /// replayed and must reproduce the vocabulary exactly.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let vocab_path = dir.join("vocab.txt");
        let merges_path = dir.join("merges.txt");
        let vocab = fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let merges = fs::read_to_string(&merges_path).map_err(|e| Error::io(&merges_path, e))?;

        let parse_err = |path: &Path, line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };

        let lines: Vec<&str> = vocab.lines().collect();
        if lines.len() < BASE_SIZE {
            return Err(parse_err(&vocab_path, lines.len(), "vocabulary shorter than base alphabet".into()));
        }
        let specials = SpecialTokens {
            pad: lines[0].to_string(),
            unk: lines[1].to_string(),
            bos: lines[2].to_string(),
            mask: lines[3].to_string(),
        };
        let mut tok = Tokenizer::with_base(specials);

        for (i, line) in merges.lines().enumerate() {
            let mut parts = line.split(' ');
            let (Some(l), Some(r), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(parse_err(&merges_path, i + 1, format!("expected `left right`, got `{line}`")));
            };
            let resolve = |s: &str| -> Result<TokenId> {
                let bytes = unescape_bytes(s)
                    .ok_or_else(|| parse_err(&merges_path, i + 1, format!("bad escape in `{s}`")))?;
                tok.token_id(&bytes)
                    .ok_or_else(|| parse_err(&merges_path, i + 1, format!("unknown token `{s}`")))
            };
            let (l, r) = (resolve(l)?, resolve(r)?);
            tok.push_merge(l, r);
        }

        if tok.vocab_size() != lines.len() {
            return Err(parse_err(
                &vocab_path,
                lines.len(),
                format!("merges produce {} tokens, vocabulary lists {}", tok.vocab_size(), lines.len()),
            ));
        }
        for (id, line) in lines.iter().enumerate().skip(SpecialTokens::COUNT) {
            if tok.token_string(id as TokenId).as_deref() != Some(*line) {
                return Err(parse_err(&vocab_path, id + 1, format!("token `{line}` disagrees with merges")));
            }
        }
        Ok(tok)
    }
}

/// Splits bytes into pieces: leading whitespace + non-whitespace run.
/// Trailing whitespace forms its own piece.
pub fn pretokenize(bytes: &[u8]) -> Vec<&[u8]> {
    let mut pieces = Vec::new();
    let mut start = 0;
    for i in 1..bytes.len() {
        if bytes[i].is_ascii_whitespace() && !bytes[i - 1].is_ascii_whitespace() {
            pieces.push(&bytes[start..i]);
            start = i;
        }
    }
    if start < bytes.len() {
        pieces.push(&bytes[start..]);
    }
    pieces
}

fn escape_bytes(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        if (0x21..=0x7e).contains(&b) && b != b'\\' {
            s.push(b as char);
        } else {
            s.push_str(&format!("\\x{b:02X}"));
        }
    }
    s
}

fn unescape_bytes(s: &str) -> Option<Vec<u8>> {
    let raw = s.as_bytes();
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        if raw[i] == b'\\' {
            if raw.get(i + 1) != Some(&b'x') || i + 4 > raw.len() {
                return None;
            }
            let hex = std::str::from_utf8(&raw[i + 2..i + 4]).ok()?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 4;
        } else {
            out.push(raw[i]);
            i += 1;
        }
    }
    Some(out)
}

type Pair = (TokenId, TokenId);

struct Word {
    symbols: Vec<TokenId>,
    count: u64,
}

/// Trains a tokenizer on a stream of documents.
///
/// Stops once the vocabulary reaches `vocab_size` or no adjacent pair is
/// left to merge (in which case the vocabulary is smaller than requested).
pub fn train_bpe<I, S>(stream: I, vocab_size: usize, specials: SpecialTokens) -> Result<Tokenizer>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if vocab_size < BASE_SIZE {
        return Err(Error::invalid(format!(
            "vocab_size {vocab_size} is below the base alphabet plus specials ({BASE_SIZE})"
        )));
    }

    let mut piece_counts: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
    let mut any = false;
    for doc in stream {
        let doc = doc.as_ref();
        any |= !doc.is_empty();
        for piece in pretokenize(doc.as_bytes()) {
            *piece_counts.entry(piece.to_vec()).or_default() += 1;
        }
    }
    if !any {
        return Err(Error::Empty("tokenizer training stream is empty".into()));
    }

    let mut tok = Tokenizer::with_base(specials);
    let mut words: Vec<Word> = piece_counts
        .into_iter()
        .map(|(bytes, count)| Word {
            symbols: bytes.iter().map(|&b| BYTE_BASE + b as TokenId).collect(),
            count,
        })
        .collect();

    let mut pair_counts: HashMap<Pair, i64> = HashMap::new();
    let mut pair_words: HashMap<Pair, Vec<usize>> = HashMap::new();
    for (wi, word) in words.iter().enumerate() {
        for w in word.symbols.windows(2) {
            *pair_counts.entry((w[0], w[1])).or_default() += word.count as i64;
            pair_words.entry((w[0], w[1])).or_default().push(wi);
        }
    }

    while tok.vocab_size() < vocab_size {
        let best = pair_counts
            .iter()
            .filter(|&(_, &c)| c > 0)
            .max_by(|&(pa, ca), &(pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    // smaller pair wins, so reverse the byte comparison
                    let ka = (&tok.tokens[pa.0 as usize], &tok.tokens[pa.1 as usize]);
                    let kb = (&tok.tokens[pb.0 as usize], &tok.tokens[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(&p, _)| p);
        let Some(pair) = best else {
            log::warn!(
                "no pairs left to merge; vocabulary stops at {} of {vocab_size}",
                tok.vocab_size()
            );
            break;
        };

        let merged = tok.push_merge(pair.0, pair.1);
        let mut touched = pair_words.remove(&pair).unwrap_or_default();
        touched.sort_unstable();
        touched.dedup();
        for wi in touched {
            let word = &mut words[wi];
            if !word.symbols.windows(2).any(|w| (w[0], w[1]) == pair) {
                continue;
            }
            let count = word.count as i64;
            for w in word.symbols.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() -= count;
            }
            let mut next = Vec::with_capacity(word.symbols.len());
            let mut i = 0;
            while i < word.symbols.len() {
                if i + 1 < word.symbols.len() && (word.symbols[i], word.symbols[i + 1]) == pair {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(word.symbols[i]);
                    i += 1;
                }
            }
            word.symbols = next;
            for w in word.symbols.windows(2) {
                let p = (w[0], w[1]);
                *pair_counts.entry(p).or_default() += count;
                if p != pair {
                    pair_words.entry(p).or_default().push(wi);
                }
            }
        }
        pair_counts.remove(&pair);
        pair_counts.retain(|_, c| *c > 0);
    }
    Ok(tok)
}
