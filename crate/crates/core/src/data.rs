//! Byte-level tokenizer, JSONL prompt/completion datasets and batching.
//!
//! Dataset files hold one JSON object per line:
//!
//! ```text
//! {"prompt":"What is 2+2?","completion":"4","meta":{"domain":"english"}}
//! ```
//!
//! `prompt` and `completion` are required strings, `meta` is an optional
//! string-to-string map.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;
pub const PAD: TokenId = 258;
pub const VOCAB_SIZE: usize = 259;

/// Maps every byte to the id equal to its value; ids 256..259 are specials.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn new() -> Self {
        Tokenizer
    }

    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<TokenId> {
        bytes.iter().map(|&b| TokenId::from(b)).collect()
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_bytes(text.as_bytes())
    }

    /// Encodes with optional BOS/EOS framing.
    pub fn encode_framed(&self, text: &str, bos: bool, eos: bool) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(text.len() + 2);
        if bos {
            out.push(BOS);
        }
        out.extend(self.encode(text));
        if eos {
            out.push(EOS);
        }
        out
    }

    /// Inverse of [`Tokenizer::encode_bytes`]. Special ids render as
    /// `<bos>`, `<eos>`, `<pad>`; anything larger renders as `<unk>`.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Vec<u8> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                0..=255 => out.push(id as u8),
                BOS => out.extend_from_slice(b"<bos>"),
                EOS => out.extend_from_slice(b"<eos>"),
                PAD => out.extend_from_slice(b"<pad>"),
                _ => out.extend_from_slice(b"<unk>"),
            }
        }
        out
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }

    /// Decodes a generated completion: stops at the first EOS and drops
    /// other special ids.
    pub fn decode_completion(&self, ids: &[TokenId]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id < 256)
            .map(|&id| id as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// One instruction/response pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub prompt: String,
    pub completion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<BTreeMap<String, String>>,
}

impl PromptRecord {
    pub fn new(prompt: impl Into<String>, completion: impl Into<String>) -> Self {
        PromptRecord {
            prompt: prompt.into(),
            completion: completion.into(),
            meta: None,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta
            .get_or_insert_with(BTreeMap::new)
            .insert(key.to_string(), value.into());
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.as_ref()?.get(key).map(String::as_str)
    }
}

pub fn parse_records(text: &str, path: &Path) -> Result<Vec<PromptRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PromptRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.prompt.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "empty prompt".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Loads a JSONL dataset, preserving file order.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<PromptRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records = parse_records(&text, path)?;
    log::debug!("loaded {} records from {}", records.len(), path.display());
    Ok(records)
}

pub fn to_jsonl(records: &[PromptRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records always serialize"));
        s.push('\n');
    }
    s
}

pub fn save_dataset(path: impl AsRef<Path>, records: &[PromptRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(records).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// `[BOS] prompt completion [EOS]` with the number of leading prompt tokens
/// (BOS included).
pub fn frame_record(tok: &Tokenizer, rec: &PromptRecord) -> (Vec<TokenId>, usize) {
    let mut ids = tok.encode_framed(&rec.prompt, true, false);
    let prompt_len = ids.len();
    ids.extend(tok.encode(&rec.completion));
    ids.push(EOS);
    (ids, prompt_len)
}

/// Padded batch. Row `b` holds `lengths[b]` real tokens followed by PAD.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<Vec<TokenId>>,
    /// True on completion tokens (including the closing EOS) only.
    pub mask: Vec<Vec<bool>>,
    pub prompt_lens: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }

    /// Real (unpadded) tokens of row `b`.
    pub fn row(&self, b: usize) -> &[TokenId] {
        &self.tokens[b][..self.lengths[b]]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batches {
    pub batches: Vec<Batch>,
    /// Records dropped because their prompt alone filled `max_len`.
    pub skipped: usize,
}

/// Frames, truncates and pads records into batches of `batch_size`.
///
/// Sequences longer than `max_len` lose completion tokens from the right.
/// Records whose framed prompt leaves no room for a completion token are
/// skipped and counted.
pub fn batchify(records: &[PromptRecord], tok: &Tokenizer, batch_size: usize, max_len: usize) -> Result<Batches> {
    if batch_size == 0 {
        return Err(Error::Contract("batch_size must be >= 1".into()));
    }
    let mut rows = Vec::new();
    let mut skipped = 0;
    for rec in records {
        let (mut ids, prompt_len) = frame_record(tok, rec);
        if prompt_len >= max_len {
            skipped += 1;
            continue;
        }
        ids.truncate(max_len);
        rows.push((ids, prompt_len));
    }
    if skipped > 0 {
        log::warn!("batchify skipped {skipped} records whose prompt exceeds {max_len} tokens");
    }
    let batches = rows
        .chunks(batch_size)
        .map(|chunk| {
            let width = chunk.iter().map(|(ids, _)| ids.len()).max().unwrap_or(0);
            let mut batch = Batch {
                tokens: Vec::new(),
                mask: Vec::new(),
                prompt_lens: Vec::new(),
                lengths: Vec::new(),
            };
            for (ids, prompt_len) in chunk {
                let mut padded = ids.clone();
                padded.resize(width, PAD);
                let mask = (0..width).map(|t| t >= *prompt_len && t < ids.len()).collect();
                batch.tokens.push(padded);
                batch.mask.push(mask);
                batch.prompt_lens.push(*prompt_len);
                batch.lengths.push(ids.len());
            }
            batch
        })
        .collect();
    Ok(Batches { batches, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_round_trip() {
        let t = Tokenizer::new();
        assert!(t.encode("").is_empty());
        assert_eq!(t.decode(&[]), "");
    }

    #[test]
    fn every_byte_round_trips() {
        let t = Tokenizer::new();
        let all: Vec<u8> = (0..=255).collect();
        let ids = t.encode_bytes(&all);
        assert!(ids.iter().all(|&i| i < 256));
        assert_eq!(t.decode_bytes(&ids), all);
    }

    #[test]
    fn ascii_maps_to_byte_values() {
        assert_eq!(Tokenizer::new().encode("ab"), vec![97, 98]);
    }

    #[test]
    fn specials_render_as_placeholders() {
        let t = Tokenizer::new();
        assert_eq!(t.decode(&[BOS, 104, 105, EOS, PAD, 999]), "<bos>hi<eos><pad><unk>");
        assert_eq!(t.encode_framed("hi", true, true), vec![BOS, 104, 105, EOS]);
        assert_eq!(t.decode_completion(&[104, 105, EOS, 33]), "hi");
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = parse_records("{\"completion\":\"x\"}\n", Path::new("d.jsonl")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("d.jsonl:1") && msg.contains("prompt"), "{msg}");
        assert!(parse_records("", Path::new("e")).unwrap().is_empty());
    }

    #[test]
    fn two_lines_in_order() {
        let text = "{\"prompt\":\"a\",\"completion\":\"1\"}\n{\"prompt\":\"b\",\"completion\":\"2\",\"meta\":{\"answer\":\"2\"}}\n";
        let recs = parse_records(text, Path::new("x")).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].prompt, "a");
        assert_eq!(recs[1].meta("answer"), Some("2"));
        assert_eq!(to_jsonl(&recs), text);
    }

    #[test]
    fn mask_covers_completion_only() {
        let t = Tokenizer::new();
        // BOS + 2 prompt bytes = 3 prompt tokens; "x" + EOS = 2 completion tokens
        let recs = [PromptRecord::new("ab", "x")];
        let b = &batchify(&recs, &t, 4, 64).unwrap().batches[0];
        assert_eq!(b.mask[0].iter().filter(|&&m| m).count(), 2);
        assert_eq!(b.prompt_lens[0], 3);
    }

    #[test]
    fn unequal_rows_are_padded_and_unmasked() {
        let t = Tokenizer::new();
        let recs = [PromptRecord::new("a", "long answer"), PromptRecord::new("a", "s")];
        let b = &batchify(&recs, &t, 2, 64).unwrap().batches[0];
        assert_eq!(b.tokens[0].len(), b.tokens[1].len());
        for (tok, m) in b.tokens[1].iter().zip(&b.mask[1]) {
            if *tok == PAD {
                assert!(!m);
            }
        }
        assert_eq!(b.lengths[1], 1 + 1 + 1 + 1);
    }

    #[test]
    fn truncation_and_skipping() {
        let t = Tokenizer::new();
        let recs = [
            PromptRecord::new("abc", "defghij"),
            PromptRecord::new("this prompt is far too long", "x"),
        ];
        let out = batchify(&recs, &t, 8, 6).unwrap();
        assert_eq!(out.skipped, 1);
        let b = &out.batches[0];
        assert_eq!(b.lengths[0], 6);
        assert_eq!(b.masked_count(), 2);
        assert!(batchify(&recs, &t, 0, 6).is_err());
    }
}
