use super::config::ModelConfig;

/// Feed-forward multiply-adds for a length-`seq_len` sequence:
/// `2·m·N·d²` for one dense FFN versus `2·m·N·(d/n)²·n` for `n` branch FFNs,
/// where `m` is the hidden-width multiplier.
pub fn count_ffn_multadds(config: &ModelConfig, seq_len: usize) -> (u64, u64) {
    let d = config.d_model as u64;
    let n = config.n_branches as u64;
    let m = config.ffn_multiplier as u64;
    let big_n = seq_len as u64;
    let baseline = 2 * m * big_n * d * d;
    let db = d / n;
    let multibranch = 2 * m * big_n * db * db * n;
    (baseline, multibranch)
}

/// FFN weight counts (biases excluded) for one layer: dense versus branched.
pub fn ffn_weight_counts(config: &ModelConfig) -> (u64, u64) {
    count_ffn_multadds(config, 1)
}
