//! Token datasets: byte-level text ingestion, little-endian u16 token
//! files, and a synthetic patterned corpus for toy training.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{arg_err, data_err, Result};

/// Vocabulary of the byte-level tokenizer.
pub const BYTE_VOCAB: usize = 256;

/// Token ids chopped into non-overlapping fixed-length segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenDataset {
    tokens: Vec<u16>,
    vocab_size: usize,
    seq_len: usize,
    dropped: usize,
}

impl TokenDataset {
    /// Keeps the longest prefix that is a whole number of segments.
    pub fn new(mut tokens: Vec<u16>, vocab_size: usize, seq_len: usize) -> Result<Self> {
        if seq_len == 0 {
            return Err(arg_err!("segment length must be at least 1"));
        }
        if tokens.is_empty() {
            return Err(data_err!("dataset is empty"));
        }
        if let Some(pos) = tokens.iter().position(|&t| t as usize >= vocab_size) {
            return Err(data_err!("token {} at position {pos} is outside vocab {vocab_size}", tokens[pos]));
        }
        let keep = tokens.len() / seq_len * seq_len;
        if keep == 0 {
            return Err(data_err!("{} tokens do not fill one segment of {seq_len}", tokens.len()));
        }
        let dropped = tokens.len() - keep;
        tokens.truncate(keep);
        Ok(Self { tokens, vocab_size, seq_len, dropped })
    }

    pub fn from_bytes(bytes: &[u8], seq_len: usize) -> Result<Self> {
        Self::new(bytes.iter().map(|&b| b as u16).collect(), BYTE_VOCAB, seq_len)
    }

    /// Byte-level tokenization of a text file.
    pub fn ingest_text(path: impl AsRef<Path>, seq_len: usize) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, seq_len)
    }

    /// Little-endian u16 token file.
    pub fn ingest_tokens(path: impl AsRef<Path>, vocab_size: usize, seq_len: usize) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() % 2 != 0 {
            return Err(data_err!("token file has an odd byte count {}", bytes.len()));
        }
        let tokens = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        Self::new(tokens, vocab_size, seq_len)
    }

    pub fn write_tokens(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Tokens discarded from the end because they did not fill a segment.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn num_segments(&self) -> usize {
        self.tokens.len() / self.seq_len
    }

    pub fn segment(&self, i: usize) -> &[u16] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    /// Segments `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.num_segments() {
            return Err(arg_err!("segment range {range:?} outside 0..{}", self.num_segments()));
        }
        let toks = self.tokens[range.start * self.seq_len..range.end * self.seq_len].to_vec();
        Self::new(toks, self.vocab_size, self.seq_len)
    }

    /// Concatenated tokens of the listed segments.
    pub fn gather(&self, segments: &[usize]) -> Vec<u16> {
        segments.iter().flat_map(|&i| self.segment(i).iter().copied()).collect()
    }

    /// SHA-256 over vocab size, segment length, and the kept tokens.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.vocab_size as u64).to_le_bytes());
        h.update((self.seq_len as u64).to_le_bytes());
        for t in &self.tokens {
            h.update(t.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Random concatenation of words from a small seeded lexicon. Each word is
/// 3 to 6 tokens long, so once a word has started the rest of it is
/// predictable from context.
pub fn patterned_corpus(vocab_size: usize, words: usize, n_tokens: usize, seed: u64) -> Result<Vec<u16>> {
    if vocab_size < 2 || vocab_size > u16::MAX as usize + 1 {
        return Err(arg_err!("vocab_size {vocab_size} outside 2..=65536"));
    }
    if words == 0 {
        return Err(arg_err!("lexicon needs at least one word"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicon: Vec<Vec<u16>> = (0..words)
        .map(|_| {
            let len = rng.random_range(3..=6);
            (0..len).map(|_| rng.random_range(0..vocab_size) as u16).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(n_tokens + 6);
    while out.len() < n_tokens {
        out.extend_from_slice(lexicon.choose(&mut rng).expect("non-empty lexicon"));
    }
    out.truncate(n_tokens);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousand_bytes_in_256_segments() {
        let ds = TokenDataset::from_bytes(&[7u8; 1000], 256).unwrap();
        assert_eq!(ds.num_segments(), 3);
        assert_eq!(ds.dropped(), 232);
        assert_eq!(ds.segment(2).len(), 256);
    }

    #[test]
    fn empty_and_out_of_vocab_are_data_errors() {
        use crate::error::Error;
        assert!(matches!(TokenDataset::from_bytes(&[], 4), Err(Error::Data(_))));
        assert!(matches!(TokenDataset::new(vec![1, 64], 64, 2), Err(Error::Data(_))));
    }

    #[test]
    fn token_file_round_trip_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toks.bin");
        let ds = TokenDataset::new(vec![1, 2, 300, 4, 5], 512, 2).unwrap();
        ds.write_tokens(&path).unwrap();
        let back = TokenDataset::ingest_tokens(&path, 512, 2).unwrap();
        assert_eq!(back, TokenDataset::new(vec![1, 2, 300, 4], 512, 2).unwrap());
        assert_eq!(back.hash(), ds.hash());
        assert_eq!(ds.hash().len(), 64);
        assert!(TokenDataset::ingest_tokens(&path, 300, 2).is_err());
    }

    #[test]
    fn text_file_hash_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.txt");
        std::fs::write(&path, "hello world, hello quantization").unwrap();
        let a = TokenDataset::ingest_text(&path, 8).unwrap();
        let b = TokenDataset::ingest_text(&path, 8).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), TokenDataset::ingest_text(&path, 4).unwrap().hash());
    }

    #[test]
    fn patterned_corpus_is_seeded() {
        let a = patterned_corpus(64, 12, 500, 1).unwrap();
        assert_eq!(a.len(), 500);
        assert!(a.iter().all(|&t| t < 64));
        assert_eq!(a, patterned_corpus(64, 12, 500, 1).unwrap());
        assert_ne!(a, patterned_corpus(64, 12, 500, 2).unwrap());
    }
}
