//! Closed-form parameter and FLOPs accounting.

use serde::Serialize;

use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: u64,
    pub non_embedding: u64,
    pub embedding: u64,
}

/// Encoder layers plus pooler count as non-embedding; token, position and
/// type tables plus the embedding layer norm count as embedding. The MLM
/// head is excluded.
pub fn count_parameters(config: &ModelConfig) -> ParamCount {
    let h = config.hidden as u64;
    let f = config.ffn as u64;
    let per_layer = 4 * (h * h + h) // Q, K, V, O with biases
        + 2 * h * f + f + h        // FFN in/out with biases
        + 4 * h; // two layer norms
    let pooler = h * h + h;
    let non_embedding = config.layers as u64 * per_layer + pooler;
    let embedding =
        (config.vocab_size + config.max_positions + config.type_vocab) as u64 * h + 2 * h;
    ParamCount {
        total: non_embedding + embedding,
        non_embedding,
        embedding,
    }
}

/// Matmul FLOPs (2 per multiply-add) for one sequence of `seq_len` tokens
/// through the encoder layers: `8·s·h²` for the Q/K/V/O projections,
/// `4·s²·h` for scores and context, `4·s·h·ffn` for the feed-forward block.
pub fn estimate_flops(config: &ModelConfig, seq_len: usize) -> u64 {
    let (s, h, f) = (seq_len as u64, config.hidden as u64, config.ffn as u64);
    config.layers as u64 * (8 * s * h * h + 4 * s * s * h + 4 * s * h * f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_config_flops() {
        // L = h = ffn = s = 1: 8 + 4 + 4
        assert_eq!(estimate_flops(&ModelConfig::new(1, 1, 1, 1), 1), 16);
    }

    #[test]
    fn degenerate_config_by_hand() {
        // (1, 2, 2, 1), vocab 4, max_pos 2, type 2:
        // layer: Q,K,V,O 4·(4+2)=24, ffn in 4+2, ffn out 4+2, two LNs 8 → 44
        // pooler 4+2 = 6; embeddings 4·2 + 2·2 + 2·2 + LN 4 = 20
        let c = ModelConfig::new(1, 2, 2, 1).with_vocab(4, 2);
        assert_eq!(
            count_parameters(&c),
            ParamCount { total: 70, non_embedding: 50, embedding: 20 }
        );
    }
}
