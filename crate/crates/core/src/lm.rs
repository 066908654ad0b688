//! Language-model operations on a checkpoint: loss, likelihood, sampling.

use okapi_autodiff::{Graph, NodeId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::infer::Decoder;
use crate::model::{check_tokens, hidden_states, lm_logits, Bound, ModelConfig, ParamStore};
use crate::tokenizer::{BOS, EOS, PAD, SEP};

pub(crate) fn frozen(_: &str) -> bool {
    false
}

/// Full `[T, vocab]` logits, one row per position.
pub fn logits(ck: &Checkpoint, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new(0);
    let b = Bound::bind(&ck.params, &mut g, &frozen)?;
    let h = hidden_states(&ck.config, &mut g, &b, tokens)?;
    let z = lm_logits(&mut g, &b, h)?;
    let v = ck.config.vocab_size;
    Ok(g.data(z).chunks(v).map(|r| r.to_vec()).collect())
}

/// Log-probabilities of `tokens[start..]`, each conditioned on its prefix,
/// as a 1-d node of length `tokens.len() - start`.
pub(crate) fn continuation_logprobs(
    cfg: &ModelConfig,
    g: &mut Graph,
    b: &Bound,
    tokens: &[u32],
    start: usize,
) -> Result<(NodeId, NodeId)> {
    if start == 0 || start >= tokens.len() {
        return Err(Error::invalid(format!(
            "continuation must start inside the sequence (start {start}, len {})",
            tokens.len()
        )));
    }
    let h = hidden_states(cfg, g, b, tokens)?;
    let n = tokens.len() - start;
    let rows = g.slice(h, 0, start - 1, n)?;
    let z = lm_logits(g, b, rows)?;
    let ls = g.log_softmax(z);
    let targets: Vec<usize> = tokens[start..].iter().map(|&t| t as usize).collect();
    Ok((g.gather(ls, &targets)?, h))
}

/// Sum of next-token negative log-likelihoods over positions whose target
/// is selected by `weight` (indexed by target position). Returns the
/// summed node and the number of selected targets, or `None` when nothing
/// is selected.
pub(crate) fn weighted_nll(
    cfg: &ModelConfig,
    g: &mut Graph,
    b: &Bound,
    tokens: &[u32],
    weight: impl Fn(usize) -> bool,
) -> Result<Option<(NodeId, usize)>> {
    check_tokens(cfg, tokens)?;
    let mask: Vec<f64> = (1..tokens.len())
        .map(|t| if weight(t) { 1.0 } else { 0.0 })
        .collect();
    let count = mask.iter().filter(|&&m| m > 0.0).count();
    if count == 0 {
        return Ok(None);
    }
    let (lp, _) = continuation_logprobs(cfg, g, b, tokens, 1)?;
    let m = g.constant(mask, &[tokens.len() - 1])?;
    let picked = g.mul(lp, m)?;
    let s = g.sum(picked);
    Ok(Some((g.neg(s), count)))
}

/// Mean next-token NLL over all non-PAD targets of the batch.
pub fn lm_loss(ck: &Checkpoint, batch: &[Vec<u32>]) -> Result<f64> {
    lm_loss_params(&ck.config, &ck.params, batch)
}

pub(crate) fn lm_loss_params(cfg: &ModelConfig, params: &ParamStore, batch: &[Vec<u32>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut total = 0.0;
    let mut count = 0;
    for seq in batch {
        let mut g = Graph::new(0);
        let b = Bound::bind(params, &mut g, &frozen)?;
        if let Some((nll, n)) = weighted_nll(cfg, &mut g, &b, seq, |t| seq[t] != PAD)? {
            total += g.value(nll);
            count += n;
        }
    }
    if count == 0 {
        return Err(Error::invalid("batch has no non-PAD targets"));
    }
    Ok(total / count as f64)
}

/// Summed log-probability of `continuation` after `context`, with the
/// continuation's token count for length normalization.
pub fn sequence_logprob(ck: &Checkpoint, context: &[u32], continuation: &[u32]) -> Result<(f64, usize)> {
    if continuation.is_empty() {
        return Err(Error::invalid("empty continuation"));
    }
    if context.is_empty() {
        return Err(Error::invalid("empty context"));
    }
    let tokens: Vec<u32> = context.iter().chain(continuation).copied().collect();
    let mut g = Graph::new(0);
    let b = Bound::bind(&ck.params, &mut g, &frozen)?;
    let (lp, _) = continuation_logprobs(&ck.config, &mut g, &b, &tokens, context.len())?;
    Ok((g.data(lp).iter().sum(), continuation.len()))
}

fn sampleable(token: usize) -> bool {
    !matches!(token as u32, PAD | BOS | SEP)
}

/// Picks the next token from a logit row. Temperature 0 is greedy with the
/// lowest index winning ties; PAD, BOS and SEP are never produced.
pub(crate) fn sample_token(row: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    let allowed = || row.iter().enumerate().filter(|(i, _)| sampleable(*i));
    if temperature == 0.0 {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for (i, &z) in allowed() {
            if best.0 == usize::MAX || z > best.1 {
                best = (i, z);
            }
        }
        return best.0 as u32;
    }
    let m = allowed().map(|(_, &z)| z).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<(usize, f64)> = allowed()
        .map(|(i, &z)| (i, ((z - m) / temperature).exp()))
        .collect();
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    let mut r = rng.gen::<f64>() * total;
    for &(i, w) in &weights {
        if r < w {
            return i as u32;
        }
        r -= w;
    }
    weights.iter().rev().find(|(_, w)| *w > 0.0).map_or(EOS, |(i, _)| *i as u32)
}

/// Autoregressive sampling. The returned tokens are the new ones only and end
/// with EOS when the model stopped on its own.
pub fn generate(ck: &Checkpoint, prompt: &[u32], max_new: usize, temperature: f64, seed: u64) -> Result<Vec<u32>> {
    generate_params(&ck.config, &ck.params, prompt, max_new, temperature, seed)
}

pub(crate) fn generate_params(
    cfg: &ModelConfig,
    params: &ParamStore,
    prompt: &[u32],
    max_new: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<u32>> {
    if !(temperature >= 0.0) {
        return Err(Error::invalid(format!("temperature {temperature} < 0")));
    }
    if prompt.is_empty() {
        return Err(Error::invalid("empty prompt"));
    }
    check_tokens(cfg, prompt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dec = Decoder::new(cfg, params)?;
    let mut row = Vec::new();
    for &t in prompt {
        row = dec.push(t)?;
    }
    let mut out = Vec::new();
    while out.len() < max_new && dec.len() < cfg.context_len {
        let next = sample_token(&row, temperature, &mut rng);
        out.push(next);
        if next == EOS || dec.len() + 1 >= cfg.context_len {
            break;
        }
        row = dec.push(next)?;
    }
    Ok(out)
}
