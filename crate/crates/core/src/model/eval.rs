//! Teacher-forced perplexity.

use super::data::TokenDataset;
use super::Model;
use crate::error::{arg_err, Result};

/// Segments evaluated per forward pass.
const EVAL_BATCH: usize = 8;

/// `exp` of the mean next-token negative log-likelihood over every segment.
/// The log-softmax and the running sum are evaluated in f64.
pub fn perplexity(model: &Model, data: &TokenDataset, act_bits: Option<u8>) -> Result<f64> {
    let cfg = &model.config;
    if data.vocab_size() != cfg.vocab_size {
        return Err(arg_err!("dataset vocab {} does not match model vocab {}", data.vocab_size(), cfg.vocab_size));
    }
    if data.seq_len() != cfg.seq_len {
        return Err(arg_err!("dataset segments of {} do not match model seq_len {}", data.seq_len(), cfg.seq_len));
    }
    if data.seq_len() < 2 {
        return Err(arg_err!("perplexity needs segments of at least 2 tokens"));
    }
    let (seq, vocab) = (cfg.seq_len, cfg.vocab_size);
    let mut nll = 0.0f64;
    let mut count = 0usize;
    let ids: Vec<usize> = (0..data.num_segments()).collect();
    for chunk in ids.chunks(EVAL_BATCH) {
        let tokens = data.gather(chunk);
        let logits = model.logits(&tokens, chunk.len(), act_bits)?;
        for (r, row) in logits.data().chunks(vocab).enumerate() {
            if r % seq == seq - 1 {
                continue;
            }
            let target = tokens[r + 1] as usize;
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = row.iter().map(|&l| (l as f64 - max).exp()).sum::<f64>().ln() + max;
            nll += lse - row[target] as f64;
            count += 1;
        }
    }
    Ok((nll / count as f64).exp())
}

/// Perplexity of a model that predicts every token with equal probability.
pub fn uniform_perplexity(vocab_size: usize) -> f64 {
    vocab_size as f64
}
