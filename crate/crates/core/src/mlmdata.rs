//! Masked-language-model examples: packing token streams into fixed-length
//! segments and dynamic (per-epoch) masking.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed;
use crate::tokenizer::{SpecialTokens, TokenId, Tokenizer};

/// Label value for positions that do not contribute to the loss.
pub const IGNORE: i32 = -100;

/// A packed window of token ids. Positions at and past `real_len` are padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub ids: Vec<TokenId>,
    pub real_len: usize,
}

/// Concatenates tokenized documents, marking each document start with `bos`.
pub fn flatten_documents<D: AsRef<[TokenId]>>(docs: &[D], bos: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(docs.iter().map(|d| d.as_ref().len() + 1).sum());
    for doc in docs {
        out.push(bos);
        out.extend_from_slice(doc.as_ref());
    }
    out
}

/// Chops a flat stream into consecutive non-overlapping windows of
/// `seq_len`; a short tail is padded with `pad`.
pub fn segment_stream(ids: &[TokenId], seq_len: usize, pad: TokenId) -> Result<Vec<Segment>> {
    if seq_len < 8 {
        return Err(Error::invalid(format!("seq_len must be at least 8, got {seq_len}")));
    }
    if ids.is_empty() {
        return Err(Error::Empty("token stream".into()));
    }
    Ok(ids
        .chunks(seq_len)
        .map(|chunk| {
            let mut padded = chunk.to_vec();
            padded.resize(seq_len, pad);
            Segment {
                ids: padded,
                real_len: chunk.len(),
            }
        })
        .collect())
}

/// Masking parameters. Defaults: 15% of maskable tokens, of which 80% are
/// replaced by `mask`, 10% by a random token and 10% are kept.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MaskingConfig {
    pub ratio: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            ratio: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
        }
    }
}

/// Vocabulary facts needed by the masker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabInfo {
    pub vocab_size: usize,
    pub mask_id: TokenId,
    pub pad_id: TokenId,
}

impl VocabInfo {
    pub fn of(tok: &Tokenizer) -> Self {
        VocabInfo {
            vocab_size: tok.vocab_size(),
            mask_id: tok.mask_id(),
            pad_id: tok.pad_id(),
        }
    }

    fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < SpecialTokens::COUNT
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedRow {
    pub input_ids: Vec<TokenId>,
    pub labels: Vec<i32>,
    pub attention_mask: Vec<u8>,
}

/// How a selected position was corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

/// Masks one segment. Selection depends on `(seed, segment_index, epoch)`
/// only, so every epoch sees a fresh but reproducible pattern.
pub fn apply_masking(
    segment: &Segment,
    config: &MaskingConfig,
    vocab: &VocabInfo,
    seed: u64,
    segment_index: u64,
    epoch: u64,
) -> Result<MaskedRow> {
    apply_masking_traced(segment, config, vocab, seed, segment_index, epoch).map(|(row, _)| row)
}

/// Like [`apply_masking`] but also reports what happened at each selected
/// position.
pub fn apply_masking_traced(
    segment: &Segment,
    config: &MaskingConfig,
    vocab: &VocabInfo,
    seed: u64,
    segment_index: u64,
    epoch: u64,
) -> Result<(MaskedRow, Vec<(usize, Corruption)>)> {
    if !(config.ratio > 0.0 && config.ratio <= 0.5) {
        return Err(Error::invalid(format!("mask ratio must lie in (0, 0.5], got {}", config.ratio)));
    }
    if vocab.vocab_size <= SpecialTokens::COUNT {
        return Err(Error::invalid("vocabulary has no non-special tokens"));
    }
    let maskable: Vec<usize> = (0..segment.real_len)
        .filter(|&i| !vocab.is_special(segment.ids[i]))
        .collect();
    if maskable.is_empty() {
        return Err(Error::invalid("segment has no maskable tokens"));
    }
    let n_select = ((config.ratio * maskable.len() as f64).ceil() as usize).min(maskable.len());

    let mut rng = seed::rng(seed, &[seed::MASKING, segment_index, epoch]);
    let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, maskable.len(), n_select)
        .into_iter()
        .map(|i| maskable[i])
        .collect();
    chosen.sort_unstable();

    let mut input_ids = segment.ids.clone();
    let mut labels = vec![IGNORE; segment.ids.len()];
    let attention_mask = (0..segment.ids.len())
        .map(|i| u8::from(i < segment.real_len))
        .collect();
    let mut trace = Vec::with_capacity(chosen.len());
    for pos in chosen {
        labels[pos] = segment.ids[pos] as i32;
        let draw: f64 = rng.r#gen();
        let kind = if draw < config.mask_prob {
            input_ids[pos] = vocab.mask_id;
            Corruption::Mask
        } else if draw < config.mask_prob + config.random_prob {
            input_ids[pos] =
                rng.gen_range(SpecialTokens::COUNT as TokenId..vocab.vocab_size as TokenId);
            Corruption::Random
        } else {
            Corruption::Keep
        };
        trace.push((pos, kind));
    }
    Ok((
        MaskedRow {
            input_ids,
            labels,
            attention_mask,
        },
        trace,
    ))
}

/// Rows of equal length stacked into a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    /// Row-major `[batch_size x seq_len]`.
    pub input_ids: Vec<TokenId>,
    pub labels: Vec<i32>,
    pub attention_mask: Vec<u8>,
}

impl MaskedBatch {
    pub fn from_rows(rows: &[MaskedRow]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Empty("batch has no rows".into()));
        };
        let seq_len = first.input_ids.len();
        let mut batch = MaskedBatch {
            batch_size: rows.len(),
            seq_len,
            input_ids: Vec::with_capacity(rows.len() * seq_len),
            labels: Vec::with_capacity(rows.len() * seq_len),
            attention_mask: Vec::with_capacity(rows.len() * seq_len),
        };
        for row in rows {
            if row.input_ids.len() != seq_len
                || row.labels.len() != seq_len
                || row.attention_mask.len() != seq_len
            {
                return Err(Error::Shape("rows of a batch must share one length".into()));
            }
            batch.input_ids.extend_from_slice(&row.input_ids);
            batch.labels.extend_from_slice(&row.labels);
            batch.attention_mask.extend_from_slice(&row.attention_mask);
        }
        Ok(batch)
    }

    pub fn labeled_positions(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }
}

/// Masked batch over uniformly random non-special tokens. Handy for smoke
/// tests, gradient checks and benchmarks.
pub fn random_batch(
    vocab: &VocabInfo,
    config: &MaskingConfig,
    batch_size: usize,
    seq_len: usize,
    seed: u64,
) -> Result<MaskedBatch> {
    if vocab.vocab_size <= SpecialTokens::COUNT {
        return Err(Error::invalid("vocabulary has no non-special tokens"));
    }
    let mut rng = seed::rng(seed, &[seed::STREAM]);
    let rows = (0..batch_size)
        .map(|b| {
            let ids = (0..seq_len)
                .map(|_| rng.gen_range(SpecialTokens::COUNT as TokenId..vocab.vocab_size as TokenId))
                .collect();
            let segment = Segment { ids, real_len: seq_len };
            apply_masking(&segment, config, vocab, seed, b as u64, 0)
        })
        .collect::<Result<Vec<_>>>()?;
    MaskedBatch::from_rows(&rows)
}

/// Writes segments as `[u32 len][u32 ids...]` little-endian records.
pub fn write_example_cache(path: impl AsRef<Path>, segments: &[Segment]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));
    for seg in segments {
        write(&(seg.real_len as u32).to_le_bytes())?;
        for &id in &seg.ids[..seg.real_len] {
            write(&id.to_le_bytes())?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a cache written by [`write_example_cache`], re-padding each record
/// to `seq_len`.
pub fn read_example_cache(path: impl AsRef<Path>, seq_len: usize, pad: TokenId) -> Result<Vec<Segment>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let truncated = || Error::Checkpoint(format!("{}: truncated example cache", path.display()));
    let word = |at: usize| -> Result<u32> {
        let raw = bytes.get(at..at + 4).ok_or_else(truncated)?;
        Ok(u32::from_le_bytes(raw.try_into().expect("4 bytes")))
    };
    let mut segments = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        let len = word(at)? as usize;
        at += 4;
        if len > seq_len {
            return Err(Error::Shape(format!("cached record of {len} tokens exceeds seq_len {seq_len}")));
        }
        let mut ids = (0..len).map(|i| word(at + 4 * i)).collect::<Result<Vec<_>>>()?;
        at += 4 * len;
        ids.resize(seq_len, pad);
        segments.push(Segment { ids, real_len: len });
    }
    Ok(segments)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> VocabInfo {
        VocabInfo {
            vocab_size: 512,
            mask_id: SpecialTokens::MASK,
            pad_id: SpecialTokens::PAD,
        }
    }

    fn plain_segment(n: usize) -> Segment {
        Segment {
            ids: (0..n as TokenId).map(|i| 10 + i % 400).collect(),
            real_len: n,
        }
    }

    #[test]
    fn segmentation_arithmetic() {
        let ids: Vec<TokenId> = (0..1000).map(|i| 10 + i % 50).collect();
        let segs = segment_stream(&ids, 128, 0).unwrap();
        assert_eq!(segs.len(), 8);
        assert!(segs[..7].iter().all(|s| s.real_len == 128));
        assert_eq!(segs[7].real_len, 104);
        assert!(segs[7].ids[104..].iter().all(|&t| t == 0));

        let segs = segment_stream(&ids[..128], 128, 0).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].real_len, 128);

        assert!(segment_stream(&[], 128, 0).is_err());
        assert!(segment_stream(&ids, 7, 0).is_err());
    }

    #[test]
    fn flattening_marks_document_starts() {
        let flat = flatten_documents(&[vec![10, 11, 12], vec![20, 21]], SpecialTokens::BOS);
        assert_eq!(flat, vec![2, 10, 11, 12, 2, 20, 21]);
    }

    #[test]
    fn selects_ceil_ratio_positions() {
        let seg = plain_segment(100);
        let row = apply_masking(&seg, &MaskingConfig::default(), &vocab(), 1, 0, 0).unwrap();
        assert_eq!(row.labels.iter().filter(|&&l| l != IGNORE).count(), 15);
    }

    #[test]
    fn specials_and_padding_never_selected() {
        let mut seg = plain_segment(64);
        seg.ids[0] = SpecialTokens::BOS;
        seg.ids[30] = SpecialTokens::BOS;
        seg.real_len = 50;
        for s in 0..50 {
            let row = apply_masking(&seg, &MaskingConfig::default(), &vocab(), s, 3, 0).unwrap();
            for i in [0, 30] {
                assert_eq!(row.labels[i], IGNORE);
            }
            assert!(row.labels[50..].iter().all(|&l| l == IGNORE));
            assert!(row.attention_mask[..50].iter().all(|&m| m == 1));
            assert!(row.attention_mask[50..].iter().all(|&m| m == 0));
        }
    }

    #[test]
    fn all_special_segment_errors() {
        let seg = Segment {
            ids: vec![SpecialTokens::BOS; 16],
            real_len: 16,
        };
        assert!(apply_masking(&seg, &MaskingConfig::default(), &vocab(), 0, 0, 0).is_err());
        let bad = MaskingConfig {
            ratio: 0.6,
            ..MaskingConfig::default()
        };
        assert!(apply_masking(&plain_segment(16), &bad, &vocab(), 0, 0, 0).is_err());
    }

    #[test]
    fn masking_is_dynamic_across_epochs() {
        let seg = plain_segment(128);
        let cfg = MaskingConfig::default();
        let a = apply_masking(&seg, &cfg, &vocab(), 9, 4, 0).unwrap();
        let b = apply_masking(&seg, &cfg, &vocab(), 9, 4, 0).unwrap();
        let c = apply_masking(&seg, &cfg, &vocab(), 9, 4, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn corruption_invariants_hold() {
        let seg = plain_segment(128);
        for epoch in 0..20 {
            let (row, trace) =
                apply_masking_traced(&seg, &MaskingConfig::default(), &vocab(), 5, 0, epoch).unwrap();
            for i in 0..128 {
                if row.labels[i] == IGNORE {
                    assert_eq!(row.input_ids[i], seg.ids[i]);
                } else {
                    assert_eq!(row.labels[i], seg.ids[i] as i32);
                }
            }
            for (pos, kind) in trace {
                match kind {
                    Corruption::Mask => assert_eq!(row.input_ids[pos], SpecialTokens::MASK),
                    Corruption::Keep => assert_eq!(row.input_ids[pos] as i32, row.labels[pos]),
                    Corruption::Random => assert!(row.input_ids[pos] >= SpecialTokens::COUNT as TokenId),
                }
            }
        }
    }

    #[test]
    fn cache_roundtrip() {
        let ids: Vec<TokenId> = (0..300).collect();
        let segs = segment_stream(&ids, 64, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.bin");
        write_example_cache(&path, &segs).unwrap();
        assert_eq!(read_example_cache(&path, 64, 0).unwrap(), segs);

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read_example_cache(&path, 64, 0).is_err());
    }
}
