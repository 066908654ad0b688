//! Scalar reward model over the LM trunk, trained with the pairwise ranking
//! loss on ranked response sets.

use std::path::Path;

use okapi_autodiff::{Graph, NodeId};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Role};
use crate::config::{parse_value, Configurable};
use crate::corpus::{write_jsonl, LossMask, PromptFormat, DEFAULT_TEMPLATE};
use crate::error::{Error, Result};
use crate::model::{add_grads, add_scalar_head, hidden_states, scalar_head, Bound, Grads, ModelConfig, ParamStore};
use crate::optim::{AdamW, AdamWConfig};
use crate::protocol::{check_permutation, RankedResponseSet};
use crate::sft::config_record;
use crate::synth::sub_seed;
use crate::tokenizer::PAD;

pub const HEAD: &str = "reward_head";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Vec<u32>,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
    /// Ranks of (chosen, rejected); 1 is best.
    pub source_ranks: (u8, u8),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub held_out_fraction: f64,
    pub seed: u64,
    pub template: String,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 64,
            lr: 1e-5,
            weight_decay: 0.01,
            held_out_fraction: 0.1,
            seed: 0,
            template: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("reward lr and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.held_out_fraction) {
            return Err(Error::Config(format!("held_out_fraction {} not in [0, 1)", self.held_out_fraction)));
        }
        Ok(())
    }

    pub fn format(&self) -> Result<PromptFormat> {
        PromptFormat::new(&self.template, LossMask::ResponseOnly)
    }
}

impl Configurable for RewardConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "held_out_fraction" => self.held_out_fraction = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "template" => self.template = value.replace("\\n", "\n"),
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("held_out_fraction".into(), self.held_out_fraction.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("template".into(), self.template.replace('\n', "\\n")),
        ]
    }
}

/// `-ln σ(c - r)`, as `softplus(r - c)`.
pub fn ranking_loss(score_c: f64, score_r: f64) -> f64 {
    let z = score_r - score_c;
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// 0-based `(chosen, rejected)` response indices for every pair, best
/// ranked chosen first, rejected in position order.
pub fn ranked_index_pairs(ranks: &[u8]) -> Result<Vec<(usize, usize)>> {
    check_permutation(ranks)?;
    let mut by_rank: Vec<usize> = (0..ranks.len()).collect();
    by_rank.sort_by_key(|&i| ranks[i]);
    let mut out = Vec::new();
    for &c in &by_rank {
        for r in 0..ranks.len() {
            if ranks[r] > ranks[c] {
                out.push((c, r));
            }
        }
    }
    Ok(out)
}

pub fn pairs_from_ranked(set: &RankedResponseSet, format: &PromptFormat) -> Result<Vec<PreferencePair>> {
    let prompt = format.prompt_tokens(&set.instruction, &set.input);
    let resp: Vec<Vec<u32>> = set.responses.iter().map(|r| PromptFormat::response_tokens(r)).collect();
    if resp.len() != set.ranks.len() {
        return Err(Error::invalid(format!("{}: responses and ranks differ in length", set.id)));
    }
    Ok(ranked_index_pairs(&set.ranks)?
        .into_iter()
        .map(|(c, r)| PreferencePair {
            prompt: prompt.clone(),
            chosen: resp[c].clone(),
            rejected: resp[r].clone(),
            source_ranks: (set.ranks[c], set.ranks[r]),
        })
        .collect())
}

fn joined(cfg: &ModelConfig, x: &[u32], y: &[u32]) -> Result<Vec<u32>> {
    if x.len() + y.len() > cfg.context_len {
        return Err(Error::invalid(format!(
            "prompt and response of {} tokens exceed reward context {}",
            x.len() + y.len(),
            cfg.context_len
        )));
    }
    Ok(x.iter().chain(y).copied().collect())
}

/// Reward node `[1, 1]` at the final non-PAD position of `tokens`.
pub(crate) fn score_node(cfg: &ModelConfig, g: &mut Graph, b: &Bound, tokens: &[u32]) -> Result<NodeId> {
    let last = tokens
        .iter()
        .rposition(|&t| t != PAD)
        .ok_or_else(|| Error::invalid("all-PAD reward input"))?;
    let h = hidden_states(cfg, g, b, &tokens[..=last])?;
    let row = g.slice(h, 0, last, 1)?;
    scalar_head(g, b, row, HEAD)
}

pub(crate) fn score_params(cfg: &ModelConfig, params: &ParamStore, x: &[u32], y: &[u32]) -> Result<f64> {
    let tokens = joined(cfg, x, y)?;
    let mut g = Graph::new(0);
    let b = Bound::bind(params, &mut g, &|_| false)?;
    let s = score_node(cfg, &mut g, &b, &tokens)?;
    Ok(g.value(s))
}

/// `r(x, y)` where `x` is the prompt tokens (ending in SEP) and `y` the
/// response tokens.
pub fn reward_score(rm: &Checkpoint, x: &[u32], y: &[u32]) -> Result<f64> {
    rm.expect_role(Role::Reward)?;
    score_params(&rm.config, &rm.params, x, y)
}

/// A set's responses in one graph: summed pair loss node, pair count, and
/// per-pair `(score_c, score_r)`.
fn set_losses(
    cfg: &ModelConfig,
    g: &mut Graph,
    b: &Bound,
    prompt: &[u32],
    responses: &[Vec<u32>],
    pairs: &[(usize, usize)],
) -> Result<(NodeId, Vec<(f64, f64)>)> {
    let scores: Vec<NodeId> = responses
        .iter()
        .map(|y| {
            let t = joined(cfg, prompt, y)?;
            score_node(cfg, g, b, &t)
        })
        .collect::<Result<_>>()?;
    let mut terms = Vec::with_capacity(pairs.len());
    let mut values = Vec::with_capacity(pairs.len());
    for &(c, r) in pairs {
        let d = g.sub(scores[r], scores[c])?;
        terms.push(g.softplus(d));
        values.push((g.value(scores[c]), g.value(scores[r])));
    }
    let all = g.concat(&terms, 0)?;
    Ok((g.sum(all), values))
}

struct PreparedSet {
    prompt: Vec<u32>,
    responses: Vec<Vec<u32>>,
    pairs: Vec<(usize, usize)>,
}

fn prepare(set: &RankedResponseSet, format: &PromptFormat, cfg: &ModelConfig) -> Result<PreparedSet> {
    set.validate()?;
    let prompt = format.prompt_tokens(&set.instruction, &set.input);
    let responses: Vec<Vec<u32>> = set
        .responses
        .iter()
        .map(|r| {
            let mut y = PromptFormat::response_tokens(r);
            let room = cfg.context_len.saturating_sub(prompt.len());
            if y.len() > room {
                y.truncate(room);
            }
            y
        })
        .collect();
    if responses.iter().any(|y| y.is_empty()) {
        return Err(Error::invalid(format!("{}: prompt fills the reward context", set.id)));
    }
    Ok(PreparedSet {
        pairs: ranked_index_pairs(&set.ranks)?,
        prompt,
        responses,
    })
}

/// Pairwise accuracy (`score_c > score_r`) and mean loss over prepared sets.
fn measure(cfg: &ModelConfig, params: &ParamStore, sets: &[&PreparedSet]) -> Result<Option<(f64, f64)>> {
    let (mut right, mut loss, mut n) = (0usize, 0.0, 0usize);
    for s in sets {
        let mut g = Graph::new(0);
        let b = Bound::bind(params, &mut g, &|_| false)?;
        let (_, vals) = set_losses(cfg, &mut g, &b, &s.prompt, &s.responses, &s.pairs)?;
        for (c, r) in vals {
            right += usize::from(c > r);
            loss += ranking_loss(c, r);
            n += 1;
        }
    }
    Ok((n > 0).then(|| (right as f64 / n as f64, loss / n as f64)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub held_out_loss: Option<f64>,
    pub held_out_accuracy: Option<f64>,
}

pub fn write_metrics(path: &Path, log: &[RewardEpoch]) -> Result<()> {
    write_jsonl(path, log)
}

/// Partition of set indices into (train, held-out) at the set level.
pub fn split_sets(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, "reward-split")));
    let mut k = (n as f64 * fraction).round() as usize;
    if fraction > 0.0 && n >= 2 {
        k = k.max(1);
    }
    let k = k.min(n.saturating_sub(1));
    let held = idx[..k].to_vec();
    let mut train = idx[k..].to_vec();
    train.sort_unstable();
    (train, held)
}

/// Reward model initialized from an SFT checkpoint with a zero head.
/// Trunk and head are both trained.
pub fn train_reward(sft: &Checkpoint, data: &[RankedResponseSet], cfg: &RewardConfig) -> Result<(Checkpoint, Vec<RewardEpoch>)> {
    sft.expect_role(Role::Sft)?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("no ranked sets for reward training"));
    }
    let format = cfg.format()?;
    let mut record = config_record("reward", cfg, &RewardConfig::default());
    let (train_idx, held_idx) = split_sets(data.len(), cfg.held_out_fraction, cfg.seed);
    record.insert("sets".into(), data.len().to_string());
    record.insert("held_out_sets".into(), held_idx.len().to_string());
    let mut out = sft.derive(Role::Reward, record)?;
    add_scalar_head(&mut out.params, out.config.d_model, HEAD);
    let prepared: Vec<PreparedSet> = data.iter().map(|s| prepare(s, &format, &sft.config)).collect::<Result<_>>()?;
    let held: Vec<&PreparedSet> = held_idx.iter().map(|&i| &prepared[i]).collect();
    let sets_per_batch = cfg.batch_size.div_ceil(6).max(1);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut order = train_idx.clone();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &format!("reward-epoch-{epoch}"))));
        for chunk in order.chunks(sets_per_batch) {
            step += 1;
            let mut acc = Grads::new();
            let mut n_pairs = 0;
            let mut total = 0.0;
            for &i in chunk {
                let s = &prepared[i];
                let mut g = Graph::new(0);
                let b = Bound::bind(&out.params, &mut g, &|_| true)?;
                let (loss, vals) = set_losses(&out.config, &mut g, &b, &s.prompt, &s.responses, &s.pairs)?;
                g.backward(loss)?;
                total += g.value(loss);
                n_pairs += vals.len();
                add_grads(&mut acc, b.grads(&g, 1.0));
            }
            if !total.is_finite() {
                return Err(Error::NonFinite { stage: "reward", step });
            }
            let s = 1.0 / n_pairs.max(1) as f64;
            acc.values_mut().for_each(|v| v.iter_mut().for_each(|x| *x *= s));
            opt.step(&mut out.params, &acc, cfg.lr);
        }
        let train: Vec<&PreparedSet> = train_idx.iter().map(|&i| &prepared[i]).collect();
        let (train_accuracy, train_loss) = measure(&out.config, &out.params, &train)?.unwrap_or((0.0, 0.0));
        let h = measure(&out.config, &out.params, &held)?;
        log::info!(
            "reward epoch {epoch}: train loss {train_loss:.4} acc {train_accuracy:.3} held-out acc {:?}",
            h.map(|x| x.0)
        );
        log.push(RewardEpoch {
            epoch,
            train_loss,
            train_accuracy,
            held_out_loss: h.map(|x| x.1),
            held_out_accuracy: h.map(|x| x.0),
        });
    }
    Ok((out, log))
}

/// Per-pair ranking losses of `rm` over the sets.
pub fn pair_losses(rm: &Checkpoint, data: &[RankedResponseSet], format: &PromptFormat) -> Result<Vec<f64>> {
    rm.expect_role(Role::Reward)?;
    let mut out = Vec::new();
    for s in data {
        for p in pairs_from_ranked(s, format)? {
            out.push(ranking_loss(reward_score(rm, &p.prompt, &p.chosen)?, reward_score(rm, &p.prompt, &p.rejected)?));
        }
    }
    Ok(out)
}
