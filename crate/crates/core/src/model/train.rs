//! Next-token training of toy decoders with Adam.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::TokenDataset;
use super::eval::perplexity;
use super::{DecoderConfig, Model};
use crate::error::{arg_err, Error, Result};
use crate::graph::{Graph, IGNORE_TARGET};
use crate::par::{Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate; decays on a half cosine to a tenth of this value.
    pub lr: f32,
    pub seed: u64,
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 3000, batch_size: 8, lr: 3e-3, seed: 0, log_interval: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(step, minibatch loss)` every `log_interval` steps.
    pub losses: Vec<(usize, f32)>,
    /// Perplexity over the whole training set after the last step.
    pub final_ppl: f64,
}

/// Targets for a flattened batch: the next token in the same segment, or
/// ignored on each segment's last position.
pub fn next_token_targets(tokens: &[u16], seq: usize) -> Vec<usize> {
    (0..tokens.len())
        .map(|i| if i % seq == seq - 1 { IGNORE_TARGET } else { tokens[i + 1] as usize })
        .collect()
}

pub fn train_toy(config: DecoderConfig, data: &TokenDataset, tc: &TrainConfig) -> Result<(Model, TrainReport)> {
    if tc.batch_size == 0 || tc.log_interval == 0 {
        return Err(arg_err!("batch_size and log_interval must be at least 1"));
    }
    if !(tc.lr > 0.0 && tc.lr.is_finite()) {
        return Err(arg_err!("learning rate must be positive, got {}", tc.lr));
    }
    if data.vocab_size() != config.vocab_size || data.seq_len() != config.seq_len {
        return Err(arg_err!(
            "dataset (vocab {}, seq {}) does not match model (vocab {}, seq {})",
            data.vocab_size(),
            data.seq_len(),
            config.vocab_size,
            config.seq_len
        ));
    }
    let mut model = Model::init(config, tc.seed)?;
    let mut adams: Vec<Adam> =
        model.tensors_mut().iter().map(|t| Adam::new(t.numel(), AdamConfig::with_lr(tc.lr))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(0x5eed));
    let mut losses = Vec::new();
    for step in 0..tc.steps {
        let picks: Vec<usize> = (0..tc.batch_size).map(|_| rng.random_range(0..data.num_segments())).collect();
        let tokens = data.gather(&picks);
        let mut g = Graph::new();
        let vars = model.vars(&mut g, true);
        let logits = model.logits_graph(&mut g, &vars, &tokens, tc.batch_size, None)?;
        let loss = g.cross_entropy(logits, &next_token_targets(&tokens, config.seq_len))?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Training(format!("loss became {lv} at step {step}")));
        }
        if step % tc.log_interval == 0 || step + 1 == tc.steps {
            losses.push((step, lv));
        }
        g.backward(loss)?;
        let progress = step as f32 / tc.steps as f32;
        let lr = tc.lr * (0.1 + 0.45 * (1.0 + (std::f32::consts::PI * progress).cos()));
        for ((adam, t), v) in adams.iter_mut().zip(model.tensors_mut()).zip(vars.flatten()) {
            adam.config.lr = lr;
            adam.step(t.data_mut(), g.grad(v), 0.0)?;
        }
    }
    let final_ppl = perplexity(&model, data, None)?;
    if !final_ppl.is_finite() {
        return Err(Error::Training("final perplexity is not finite".into()));
    }
    Ok((model, TrainReport { losses, final_ppl }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::patterned_corpus;

    fn cfg() -> DecoderConfig {
        DecoderConfig { vocab_size: 16, d_model: 16, n_heads: 2, n_blocks: 1, mlp_hidden: 16, seq_len: 8, rope: false }
    }

    fn data() -> TokenDataset {
        TokenDataset::new(patterned_corpus(16, 4, 800, 3).unwrap(), 16, 8).unwrap()
    }

    #[test]
    fn zero_steps_is_the_initialization() {
        let tc = TrainConfig { steps: 0, ..Default::default() };
        let (m, _) = train_toy(cfg(), &data(), &tc).unwrap();
        assert_eq!(m, Model::init(cfg(), tc.seed).unwrap());
    }

    #[test]
    fn training_beats_uniform_and_is_deterministic() {
        let tc = TrainConfig { steps: 150, batch_size: 4, lr: 1e-2, seed: 7, log_interval: 50 };
        let (a, ra) = train_toy(cfg(), &data(), &tc).unwrap();
        let (b, rb) = train_toy(cfg(), &data(), &tc).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(ra.final_ppl < 16.0, "{}", ra.final_ppl);
    }

    #[test]
    fn targets_skip_segment_ends() {
        assert_eq!(next_token_targets(&[1, 2, 3, 4], 2), vec![2, IGNORE_TARGET, 4, IGNORE_TARGET]);
    }
}
