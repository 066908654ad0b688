//! Token-level PPO-clip against a frozen reward model, with the KL penalty
//! toward the SFT reference folded into per-token rewards.

use std::path::Path;

use okapi_autodiff::{Graph, NodeId};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Role};
use crate::config::{parse_value, Configurable};
use crate::corpus::{write_jsonl, InstructionExample, LossMask, PromptFormat, DEFAULT_TEMPLATE};
use crate::error::{Error, Result};
use crate::lm::{continuation_logprobs, generate_params};
use crate::model::{add_grads, add_scalar_head, scalar_head, Bound, Grads, ModelConfig, ParamStore};
use crate::optim::{AdamW, AdamWConfig};
use crate::reward::score_params;
use crate::sft::config_record;
use crate::synth::sub_seed;

pub const VALUE_HEAD: &str = "value_head";

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub epochs: usize,
    pub kl_beta: f64,
    pub clip_eps: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub trainable_top_layers: usize,
    pub gae_lambda: f64,
    pub gae_gamma: f64,
    pub vf_coef: f64,
    pub minibatches: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
    pub template: String,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            kl_beta: 0.05,
            clip_eps: 0.2,
            batch_size: 32,
            lr: 1e-6,
            weight_decay: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            trainable_top_layers: 4,
            gae_lambda: 0.95,
            gae_gamma: 1.0,
            vf_coef: 0.5,
            minibatches: 4,
            max_new_tokens: 48,
            temperature: 1.0,
            seed: 0,
            template: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config(format!("clip_eps {} not in (0, 1)", self.clip_eps)));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(Error::Config(format!("kl_beta {} < 0", self.kl_beta)));
        }
        if self.trainable_top_layers > model.n_layers {
            return Err(Error::Config(format!(
                "trainable_top_layers {} exceeds n_layers {}",
                self.trainable_top_layers, model.n_layers
            )));
        }
        if self.batch_size == 0 || self.minibatches == 0 || self.max_new_tokens == 0 {
            return Err(Error::Config("batch_size, minibatches and max_new_tokens must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Config("lr must be >= 0 and temperature > 0".into()));
        }
        Ok(())
    }

    pub fn format(&self) -> Result<PromptFormat> {
        PromptFormat::new(&self.template, LossMask::ResponseOnly)
    }
}

impl Configurable for PpoConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "kl_beta" => self.kl_beta = parse_value(key, value)?,
            "clip_eps" => self.clip_eps = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            "trainable_top_layers" => self.trainable_top_layers = parse_value(key, value)?,
            "gae_lambda" => self.gae_lambda = parse_value(key, value)?,
            "gae_gamma" => self.gae_gamma = parse_value(key, value)?,
            "vf_coef" => self.vf_coef = parse_value(key, value)?,
            "minibatches" => self.minibatches = parse_value(key, value)?,
            "max_new_tokens" => self.max_new_tokens = parse_value(key, value)?,
            "temperature" => self.temperature = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "template" => self.template = value.replace("\\n", "\n"),
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("epochs".into(), self.epochs.to_string()),
            ("kl_beta".into(), self.kl_beta.to_string()),
            ("clip_eps".into(), self.clip_eps.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("adam_beta1".into(), self.adam_beta1.to_string()),
            ("adam_beta2".into(), self.adam_beta2.to_string()),
            ("adam_eps".into(), self.adam_eps.to_string()),
            ("trainable_top_layers".into(), self.trainable_top_layers.to_string()),
            ("gae_lambda".into(), self.gae_lambda.to_string()),
            ("gae_gamma".into(), self.gae_gamma.to_string()),
            ("vf_coef".into(), self.vf_coef.to_string()),
            ("minibatches".into(), self.minibatches.to_string()),
            ("max_new_tokens".into(), self.max_new_tokens.to_string()),
            ("temperature".into(), self.temperature.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("template".into(), self.template.replace('\n', "\\n")),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Rollout {
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
    pub logp_policy: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub reward_final: f64,
    /// One per response token plus a terminal 0.
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Sampled KL estimate: sum of per-token `logp_policy - logp_ref`.
pub fn kl_term(r: &Rollout) -> Result<f64> {
    if r.logp_policy.len() != r.logp_ref.len() {
        return Err(Error::invalid(format!(
            "logp lengths differ: {} vs {}",
            r.logp_policy.len(),
            r.logp_ref.len()
        )));
    }
    Ok(r.logp_policy.iter().zip(&r.logp_ref).map(|(p, q)| p - q).sum())
}

/// `-beta * (logp_policy - logp_ref)` per token, with the final reward added
/// at the last token.
pub fn shaped_rewards(r: &Rollout, beta: f64) -> Vec<f64> {
    let mut out: Vec<f64> = r
        .logp_policy
        .iter()
        .zip(&r.logp_ref)
        .map(|(p, q)| -beta * (p - q))
        .collect();
    if let Some(last) = out.last_mut() {
        *last += r.reward_final;
    }
    out
}

/// Raw GAE advantages and returns. `values` has one more entry than
/// `rewards`, the last being the terminal value.
pub fn gae_advantages(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if n == 0 {
        return Err(Error::invalid("empty response"));
    }
    if values.len() != n + 1 {
        return Err(Error::invalid(format!("{} values for {n} rewards, expected {}", values.len(), n + 1)));
    }
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Mean 0, std 1 in place; all zeros when the variance vanishes.
pub fn whiten(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if var < 1e-16 {
        xs.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let sd = var.sqrt();
    xs.iter_mut().for_each(|x| *x = (*x - mean) / sd);
}

/// Mean over tokens of `-min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)`.
pub fn ppo_policy_loss(ratio: &[f64], advantages: &[f64], clip_eps: f64) -> f64 {
    let n = ratio.len().max(1) as f64;
    ratio
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| -(r * a).min(r.clamp(1.0 - clip_eps, 1.0 + clip_eps) * a))
        .sum::<f64>()
        / n
}

/// Names updated by PPO: the top `k` blocks, the final norm and the value head.
pub fn trainable_names(cfg: &ModelConfig, k: usize) -> impl Fn(&str) -> bool {
    let first = cfg.n_layers - k;
    move |name: &str| {
        if name.starts_with("ln_f.") || name.starts_with(VALUE_HEAD) {
            return true;
        }
        name.strip_prefix("blocks.")
            .and_then(|r| r.split('.').next())
            .and_then(|l| l.parse::<usize>().ok())
            .is_some_and(|l| l >= first)
    }
}

/// Per-token log-probs of `y` after `x` and the value head on the same rows.
fn policy_nodes(cfg: &ModelConfig, g: &mut Graph, b: &Bound, x: &[u32], y: &[u32], values: bool) -> Result<(NodeId, Option<NodeId>)> {
    let tokens: Vec<u32> = x.iter().chain(y).copied().collect();
    let (lp, h) = continuation_logprobs(cfg, g, b, &tokens, x.len())?;
    if !values {
        return Ok((lp, None));
    }
    let rows = g.slice(h, 0, x.len() - 1, y.len())?;
    Ok((lp, Some(scalar_head(g, b, rows, VALUE_HEAD)?)))
}

fn evaluate_frozen(cfg: &ModelConfig, params: &ParamStore, x: &[u32], y: &[u32], values: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new(0);
    let b = Bound::bind(params, &mut g, &|_| false)?;
    let (lp, v) = policy_nodes(cfg, &mut g, &b, x, y, values)?;
    Ok((g.data(lp).to_vec(), v.map(|v| g.data(v).to_vec()).unwrap_or_default()))
}

/// Samples a response and fills every rollout field except advantages.
#[allow(clippy::too_many_arguments)]
fn collect_rollout(
    policy: &Checkpoint,
    reference: &ParamStore,
    rm: &Checkpoint,
    prompt: Vec<u32>,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<Option<Rollout>> {
    let response = generate_params(&policy.config, &policy.params, &prompt, cfg.max_new_tokens, cfg.temperature, seed)?;
    if response.is_empty() {
        return Ok(None);
    }
    if prompt.len() + response.len() > rm.config.context_len {
        return Err(Error::invalid(format!(
            "rollout of {} tokens exceeds reward model context {}",
            prompt.len() + response.len(),
            rm.config.context_len
        )));
    }
    let (logp_policy, mut values) = evaluate_frozen(&policy.config, &policy.params, &prompt, &response, true)?;
    let (logp_ref, _) = evaluate_frozen(&policy.config, reference, &prompt, &response, false)?;
    values.push(0.0);
    let reward_final = score_params(&rm.config, &rm.params, &prompt, &response)?;
    Ok(Some(Rollout {
        prompt,
        response,
        logp_policy,
        logp_ref,
        reward_final,
        values,
        ..Rollout::default()
    }))
}

/// Clipped policy loss plus `vf_coef` times the clipped value loss for one
/// rollout, summed over tokens. Returns (loss node, policy sum, value sum).
fn rollout_loss(cfg: &ModelConfig, g: &mut Graph, b: &Bound, r: &Rollout, pc: &PpoConfig) -> Result<(NodeId, f64, f64)> {
    let n = r.response.len();
    let (lp, v) = policy_nodes(cfg, g, b, &r.prompt, &r.response, true)?;
    let v = v.expect("value rows requested");
    let old = g.constant(r.logp_policy.clone(), &[n])?;
    let adv = g.constant(r.advantages.clone(), &[n])?;
    let d = g.sub(lp, old)?;
    let ratio = g.exp(d);
    let s1 = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, 1.0 - pc.clip_eps, 1.0 + pc.clip_eps)?;
    let s2 = g.mul(clipped, adv)?;
    let m = g.minimum(s1, s2)?;
    let pg = g.sum(m);
    let pg = g.neg(pg);

    let v = g.gather(v, &vec![0; n])?;
    let old_v = g.constant(r.values[..n].to_vec(), &[n])?;
    let ret = g.constant(r.returns.clone(), &[n])?;
    let dv = g.sub(v, old_v)?;
    let dv = g.clamp(dv, -pc.clip_eps, pc.clip_eps)?;
    let v_clip = g.add(old_v, dv)?;
    let e1 = g.sub(v, ret)?;
    let e1 = g.mul(e1, e1)?;
    let e2 = g.sub(v_clip, ret)?;
    let e2 = g.mul(e2, e2)?;
    let vm = g.maximum(e1, e2)?;
    let vl = g.sum(vm);
    let vl = g.scale(vl, 0.5);
    let weighted = g.scale(vl, pc.vf_coef);
    let total = g.add(pg, weighted)?;
    Ok((total, g.value(pg), g.value(vl)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoEpoch {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
}

pub fn write_log(path: &Path, log: &[PpoEpoch]) -> Result<()> {
    write_jsonl(path, log)
}

/// PPO from an SFT policy against a reward model over `prompts`.
pub fn run_ppo(sft: &Checkpoint, rm: &Checkpoint, prompts: &[InstructionExample], cfg: &PpoConfig) -> Result<(Checkpoint, Vec<PpoEpoch>)> {
    sft.expect_role(Role::Sft)?;
    rm.expect_role(Role::Reward)?;
    cfg.validate(&sft.config)?;
    if prompts.is_empty() {
        return Err(Error::invalid("no PPO prompts"));
    }
    let format = cfg.format()?;
    let mut record = config_record("ppo", cfg, &PpoConfig::default());
    record.insert("prompts".into(), prompts.len().to_string());
    record.insert("reward_model".into(), rm.fingerprint());
    let mut policy = sft.derive(Role::Ppo, record)?;
    add_scalar_head(&mut policy.params, policy.config.d_model, VALUE_HEAD);
    let trainable = trainable_names(&policy.config, cfg.trainable_top_layers);
    let mut opt = AdamW::new(AdamWConfig {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    });
    let encoded: Vec<Vec<u32>> = prompts.iter().map(|p| format.example_prompt_tokens(p)).collect();
    let mut order: Vec<usize> = (0..encoded.len()).filter(|&i| encoded[i].len() < sft.config.context_len).collect();
    if order.is_empty() {
        return Err(Error::invalid("no PPO prompt fits the context window"));
    }
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &format!("ppo-epoch-{epoch}"))));
        let (mut rew, mut kl, mut pol, mut val, mut n_roll, mut n_tok) = (0.0, 0.0, 0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let mut batch = Vec::with_capacity(chunk.len());
            for (j, &i) in chunk.iter().enumerate() {
                let seed = sub_seed(cfg.seed, &format!("ppo-{epoch}-{step}-{j}"));
                if let Some(r) = collect_rollout(&policy, &sft.params, rm, encoded[i].clone(), cfg, seed)? {
                    batch.push(r);
                }
            }
            if batch.is_empty() {
                continue;
            }
            for r in &mut batch {
                let shaped = shaped_rewards(r, cfg.kl_beta);
                let (a, ret) = gae_advantages(&shaped, &r.values, cfg.gae_gamma, cfg.gae_lambda)?;
                r.advantages = a;
                r.returns = ret;
                rew += r.reward_final;
                kl += kl_term(r)?;
            }
            let mut flat: Vec<f64> = batch.iter().flat_map(|r| r.advantages.iter().copied()).collect();
            whiten(&mut flat);
            let mut k = 0;
            for r in &mut batch {
                let n = r.advantages.len();
                r.advantages.copy_from_slice(&flat[k..k + n]);
                k += n;
            }
            n_roll += batch.len();
            let per = batch.len().div_ceil(cfg.minibatches);
            for mb in batch.chunks(per) {
                let mut acc = Grads::new();
                let mut tokens = 0;
                for r in mb {
                    let mut g = Graph::new(0);
                    let b = Bound::bind(&policy.params, &mut g, &trainable)?;
                    let (loss, p, v) = rollout_loss(&policy.config, &mut g, &b, r, cfg)?;
                    if !g.value(loss).is_finite() {
                        return Err(Error::NonFinite { stage: "ppo", step });
                    }
                    g.backward(loss)?;
                    add_grads(&mut acc, b.grads(&g, 1.0));
                    pol += p;
                    val += v;
                    tokens += r.response.len();
                }
                n_tok += tokens;
                let s = 1.0 / tokens.max(1) as f64;
                acc.values_mut().for_each(|v| v.iter_mut().for_each(|x| *x *= s));
                opt.step(&mut policy.params, &acc, cfg.lr);
            }
        }
        let e = PpoEpoch {
            epoch,
            mean_reward: rew / n_roll.max(1) as f64,
            mean_kl: kl / n_roll.max(1) as f64,
            policy_loss: pol / n_tok.max(1) as f64,
            value_loss: val / n_tok.max(1) as f64,
        };
        log::info!(
            "ppo epoch {epoch}: reward {:.4} kl {:.4} policy {:.4} value {:.4}",
            e.mean_reward,
            e.mean_kl,
            e.policy_loss,
            e.value_loss
        );
        log.push(e);
    }
    Ok((policy, log))
}

/// Mean reward and mean KL to `reference` of fresh samples from `policy`.
pub fn sample_stats(
    policy: &Checkpoint,
    reference: &Checkpoint,
    rm: &Checkpoint,
    prompts: &[InstructionExample],
    cfg: &PpoConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let format = cfg.format()?;
    let (mut rew, mut kl, mut n) = (0.0, 0.0, 0usize);
    for (i, p) in prompts.iter().enumerate() {
        let x = format.example_prompt_tokens(p);
        if x.len() >= policy.config.context_len {
            continue;
        }
        let s = sub_seed(seed, &format!("stats-{i}"));
        if let Some(r) = collect_rollout(policy, &reference.params, rm, x, cfg, s)? {
            rew += r.reward_final;
            kl += kl_term(&r)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no rollouts"));
    }
    Ok((rew / n as f64, kl / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::make_world;
    use proptest::prelude::*;

    fn rollout(p: &[f64], q: &[f64], r: f64) -> Rollout {
        Rollout {
            logp_policy: p.to_vec(),
            logp_ref: q.to_vec(),
            reward_final: r,
            ..Rollout::default()
        }
    }

    #[test]
    fn kl_and_shaping_examples() {
        let r = rollout(&[-1.0, -2.0], &[-1.1, -1.95], 0.0);
        assert!((kl_term(&r).unwrap() - 0.05).abs() < 1e-12);
        assert_eq!(kl_term(&rollout(&[-1.0, -3.0], &[-1.0, -3.0], 0.0)).unwrap(), 0.0);
        assert!(kl_term(&rollout(&[-1.0], &[], 0.0)).is_err());
        assert_eq!(shaped_rewards(&rollout(&[-1.0, -2.0, -0.5], &[-3.0, -1.0, -0.1], 1.3), 0.0), vec![0.0, 0.0, 1.3]);
        assert_eq!(shaped_rewards(&rollout(&[-1.0, -2.0], &[-1.0, -2.0], 0.7), 0.05), vec![0.0, 0.7]);
    }

    #[test]
    fn gae_examples() {
        let (a, ret) = gae_advantages(&[0.0, 0.0, 2.0], &[0.0; 4], 1.0, 1.0).unwrap();
        assert_eq!(a, vec![2.0, 2.0, 2.0]);
        assert_eq!(ret, a);
        let (mut a, _) = gae_advantages(&[0.0; 3], &[0.0; 4], 1.0, 0.95).unwrap();
        whiten(&mut a);
        assert_eq!(a, vec![0.0; 3]);
        assert!(gae_advantages(&[], &[0.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn policy_loss_examples() {
        assert_eq!(ppo_policy_loss(&[1.0], &[2.0], 0.2), -2.0);
        assert!((ppo_policy_loss(&[1.5], &[1.0], 0.2) + 1.2).abs() < 1e-12);
        assert!((ppo_policy_loss(&[0.5], &[-1.0], 0.2) - 0.8).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn shaped_sum_identity(p in prop::collection::vec(-5.0f64..0.0, 1..12), beta in 0.0f64..2.0, r in -3.0f64..3.0) {
            let q: Vec<f64> = p.iter().map(|x| x * 0.7 - 0.1).collect();
            let ro = rollout(&p, &q, r);
            let kl: f64 = p.iter().zip(&q).map(|(a, b)| a - b).sum();
            prop_assert!((kl_term(&ro).unwrap() - kl).abs() < 1e-10);
            let s: f64 = shaped_rewards(&ro, beta).iter().sum();
            prop_assert!((s - (r - beta * kl)).abs() < 1e-10);
        }

        #[test]
        fn gae_matches_brute_force(
            rewards in prop::collection::vec(-2.0f64..2.0, 1..10),
            seedv in prop::collection::vec(-1.0f64..1.0, 10),
            gamma in 0.5f64..1.0,
            lambda in 0.0f64..1.0,
        ) {
            let n = rewards.len();
            let mut values = seedv[..n].to_vec();
            values.push(0.0);
            let (adv, ret) = gae_advantages(&rewards, &values, gamma, lambda).unwrap();
            for t in 0..n {
                let mut brute = 0.0;
                for l in t..n {
                    let delta = rewards[l] + gamma * values[l + 1] - values[l];
                    brute += (gamma * lambda).powi((l - t) as i32) * delta;
                }
                prop_assert!((adv[t] - brute).abs() < 1e-9);
                prop_assert!((ret[t] - (adv[t] + values[t])).abs() < 1e-12);
            }
        }

        #[test]
        fn clipped_term_is_the_minimum(r in 0.01f64..3.0, a in -3.0f64..3.0, eps in 0.05f64..0.5) {
            let loss = ppo_policy_loss(&[r], &[a], eps);
            prop_assert!(loss >= -(r * a) - 1e-12);
            prop_assert!(loss >= -(r.clamp(1.0 - eps, 1.0 + eps) * a) - 1e-12);
        }

        #[test]
        fn whitened_moments(xs in prop::collection::vec(-10.0f64..10.0, 2..30)) {
            let mut w = xs.clone();
            whiten(&mut w);
            let n = w.len() as f64;
            let mean = w.iter().sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            let var = w.iter().map(|x| x * x).sum::<f64>() / n;
            prop_assert!(var.abs() < 1e-9 || (var - 1.0).abs() < 1e-9);
        }
    }

    fn tiny(n_layers: usize) -> ModelConfig {
        ModelConfig {
            n_layers,
            d_model: 8,
            n_heads: 2,
            context_len: 96,
            vocab_size: 260,
            seed: 6,
        }
    }

    fn models(n_layers: usize) -> (Checkpoint, Checkpoint) {
        let sft = Checkpoint::init(tiny(n_layers)).unwrap().derive(Role::Sft, Default::default()).unwrap();
        let mut rm = sft.derive(Role::Reward, Default::default()).unwrap();
        add_scalar_head(&mut rm.params, 8, crate::reward::HEAD);
        rm.params.get_mut("reward_head.weight").unwrap().data[0] = 1.0;
        (sft, rm)
    }

    fn quick(epochs: usize) -> PpoConfig {
        PpoConfig {
            epochs,
            batch_size: 4,
            minibatches: 2,
            max_new_tokens: 6,
            lr: 1e-3,
            trainable_top_layers: 1,
            seed: 2,
            ..PpoConfig::default()
        }
    }

    #[test]
    fn trainable_set() {
        let f = trainable_names(&tiny(6), 4);
        assert!(f("blocks.2.ln1.gamma") && f("blocks.5.mlp.fc.weight") && f("ln_f.beta") && f("value_head.bias"));
        assert!(!f("blocks.1.ln1.gamma") && !f("tok_emb") && !f("lm_head.weight") && !f("pos_emb"));
    }

    #[test]
    fn zero_epochs_and_frozen_trunk() {
        let (sft, rm) = models(2);
        let world = make_world(2, 1).unwrap();
        let prompts = &world.base_corpus[..6];
        let (p0, log) = run_ppo(&sft, &rm, prompts, &quick(0)).unwrap();
        assert!(log.is_empty());
        for (k, v) in &sft.params {
            assert_eq!(&p0.params[k], v);
        }
        assert!(p0.params["value_head.weight"].data.iter().all(|&x| x == 0.0));
        let (p1, log) = run_ppo(&sft, &rm, prompts, &quick(1)).unwrap();
        assert_eq!(log.len(), 1);
        let trainable = trainable_names(&sft.config, 1);
        let mut moved = false;
        for (k, v) in &sft.params {
            if trainable(k) {
                moved |= &p1.params[k] != v;
            } else {
                assert_eq!(&p1.params[k], v, "{k} changed");
            }
        }
        assert!(moved);
        let (p2, _) = run_ppo(&sft, &rm, prompts, &quick(1)).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn config_and_role_errors() {
        let (sft, rm) = models(2);
        let world = make_world(2, 1).unwrap();
        let prompts = &world.base_corpus[..2];
        assert!(run_ppo(&sft, &rm, prompts, &PpoConfig { trainable_top_layers: 3, ..quick(1) }).is_err());
        assert!(run_ppo(&sft, &rm, prompts, &PpoConfig { clip_eps: 1.0, ..quick(1) }).is_err());
        assert!(matches!(run_ppo(&rm, &rm, prompts, &quick(1)), Err(Error::Role { .. })));
        let mut short = rm.clone();
        short.config.context_len = 20;
        assert!(run_ppo(&sft, &short, prompts, &quick(1)).is_err());
    }
}
