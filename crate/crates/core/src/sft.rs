//! Supervised instruction fine-tuning of every parameter.

use std::f64::consts::PI;

use okapi_autodiff::Graph;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, ProvenanceRecord, Role};
use crate::config::{parse_value, Configurable};
use crate::corpus::{corpus_fingerprint, InstructionExample, LossMask, PromptFormat, DEFAULT_TEMPLATE};
use crate::error::{Error, Result};
use crate::lm::weighted_nll;
use crate::model::{add_grads, Bound, Grads};
use crate::optim::{AdamW, AdamWConfig};
use crate::synth::sub_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SftConfig {
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub template: String,
    pub loss_mask: LossMask,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            peak_lr: 2e-5,
            warmup_steps: 200,
            batch_size: 128,
            weight_decay: 0.05,
            seed: 0,
            template: DEFAULT_TEMPLATE.to_string(),
            loss_mask: LossMask::ResponseOnly,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config(format!("peak_lr must be > 0, got {}", self.peak_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        PromptFormat::new(&self.template, self.loss_mask)?;
        Ok(())
    }

    pub fn format(&self) -> Result<PromptFormat> {
        PromptFormat::new(&self.template, self.loss_mask)
    }
}

impl Configurable for SftConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "peak_lr" => self.peak_lr = parse_value(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "template" => self.template = value.replace("\\n", "\n"),
            "loss_mask" => self.loss_mask = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("epochs".into(), self.epochs.to_string()),
            ("peak_lr".into(), self.peak_lr.to_string()),
            ("warmup_steps".into(), self.warmup_steps.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("template".into(), self.template.replace('\n', "\\n")),
            ("loss_mask".into(), self.loss_mask.to_string()),
        ]
    }
}

/// Provenance entries for `cfg`, plus `default.<key>` for every key whose
/// value differs from `defaults`.
pub(crate) fn config_record<C: Configurable>(stage: &str, cfg: &C, defaults: &C) -> ProvenanceRecord {
    let mut rec = ProvenanceRecord::new();
    rec.insert("stage".into(), stage.into());
    let base: std::collections::BTreeMap<String, String> = defaults.entries().into_iter().collect();
    for (k, v) in cfg.entries() {
        if let Some(d) = base.get(&k) {
            if *d != v {
                rec.insert(format!("default.{k}"), d.clone());
            }
        }
        rec.insert(k, v);
    }
    rec
}

/// Linear warmup to `peak_lr`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &SftConfig) -> Result<f64> {
    if total_steps <= cfg.warmup_steps {
        return Err(Error::Config(format!(
            "total_steps {total_steps} must exceed warmup_steps {}",
            cfg.warmup_steps
        )));
    }
    if step > total_steps {
        return Err(Error::invalid(format!("step {step} beyond total_steps {total_steps}")));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.peak_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (total_steps - cfg.warmup_steps) as f64;
    Ok((cfg.peak_lr * 0.5 * (1.0 + (PI * progress).cos())).max(0.0))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SftEpoch {
    pub epoch: usize,
    /// Mean per-token loss over the epoch's batches, before each update.
    pub mean_loss: f64,
}

/// Token sequence and first supervised target position, cut to the context
/// window. `None` when no supervised target survives the cut.
fn training_example(ex: &InstructionExample, format: &PromptFormat, context_len: usize) -> Option<(Vec<u32>, usize)> {
    let (mut tokens, start) = format.training_tokens(ex);
    tokens.truncate(context_len);
    let first = match format.loss_mask {
        LossMask::ResponseOnly => start,
        LossMask::FullSequence => 1,
    };
    (first < tokens.len()).then_some((tokens, first))
}

/// One gradient over a batch: per-token mean NLL of the supervised targets.
pub(crate) fn batch_gradient(
    ck: &Checkpoint,
    batch: &[(Vec<u32>, usize)],
) -> Result<(Grads, f64, usize)> {
    let mut acc = Grads::new();
    let mut total = 0.0;
    let mut count = 0;
    for (tokens, first) in batch {
        let mut g = Graph::new(0);
        let b = Bound::bind(&ck.params, &mut g, &|_| true)?;
        if let Some((nll, n)) = weighted_nll(&ck.config, &mut g, &b, tokens, |t| t >= *first)? {
            g.backward(nll)?;
            total += g.value(nll);
            count += n;
            add_grads(&mut acc, b.grads(&g, 1.0));
        }
    }
    if count > 0 {
        let s = 1.0 / count as f64;
        acc.values_mut().for_each(|v| v.iter_mut().for_each(|x| *x *= s));
    }
    Ok((acc, total, count))
}

/// Fine-tunes all parameters of a base checkpoint on `corpus`.
pub fn run_sft(base: &Checkpoint, corpus: &[InstructionExample], cfg: &SftConfig) -> Result<(Checkpoint, Vec<SftEpoch>)> {
    base.expect_role(Role::Base)?;
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("empty SFT corpus"));
    }
    let format = cfg.format()?;
    let mut record = config_record("sft", cfg, &SftConfig::default());
    record.insert("corpus".into(), corpus_fingerprint(corpus));
    record.insert("corpus_size".into(), corpus.len().to_string());
    let mut out = base.derive(Role::Sft, record)?;
    if cfg.epochs == 0 {
        return Ok((out, Vec::new()));
    }
    let examples: Vec<(Vec<u32>, usize)> = corpus
        .iter()
        .filter_map(|ex| training_example(ex, &format, base.config.context_len))
        .collect();
    if examples.len() < corpus.len() {
        log::warn!("sft: {} examples have no response inside the context window", corpus.len() - examples.len());
    }
    if examples.is_empty() {
        return Err(Error::invalid("no SFT example fits the context window"));
    }
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    lr_at(0, total, cfg)?;
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &format!("sft-epoch-{epoch}"))));
        let (mut loss_sum, mut tok_sum) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<(Vec<u32>, usize)> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let (grads, loss, n) = batch_gradient(&out, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { stage: "sft", step });
            }
            loss_sum += loss;
            tok_sum += n;
            opt.step(&mut out.params, &grads, lr_at(step, total, cfg)?);
        }
        let mean_loss = loss_sum / tok_sum.max(1) as f64;
        log::info!("sft epoch {epoch}: mean loss {mean_loss:.4}");
        log.push(SftEpoch { epoch, mean_loss });
    }
    Ok((out, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::lm_loss;
    use crate::model::ModelConfig;
    use crate::synth::make_world;
    use proptest::prelude::*;

    fn cfg(warmup: usize, peak: f64) -> SftConfig {
        SftConfig {
            warmup_steps: warmup,
            peak_lr: peak,
            ..SftConfig::default()
        }
    }

    #[test]
    fn schedule_points() {
        let c = cfg(200, 2e-5);
        assert_eq!(lr_at(0, 1000, &c).unwrap(), 0.0);
        assert!((lr_at(100, 1000, &c).unwrap() - 1e-5).abs() < 1e-18);
        assert_eq!(lr_at(200, 1000, &c).unwrap(), 2e-5);
        assert!((lr_at(600, 1000, &c).unwrap() - 1e-5).abs() < 1e-18);
        assert!(lr_at(1000, 1000, &c).unwrap().abs() < 1e-20);
        assert!(lr_at(5, 200, &c).is_err());
        assert!(lr_at(1001, 1000, &c).is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_continuous(warmup in 0usize..50, extra in 1usize..200, peak in 1e-6f64..1e-2) {
            let c = cfg(warmup, peak);
            let total = warmup + extra;
            if warmup > 0 {
                prop_assert_eq!(lr_at(warmup, total, &c).unwrap(), peak);
            }
            let mut prev = lr_at(0, total, &c).unwrap();
            for s in 1..=total {
                let v = lr_at(s, total, &c).unwrap();
                prop_assert!(v >= 0.0 && v <= peak);
                prop_assert!((v - prev).abs() <= peak);
                prev = v;
            }
        }
    }

    fn small_base() -> Checkpoint {
        Checkpoint::init(ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            context_len: 96,
            vocab_size: 260,
            seed: 2,
        })
        .unwrap()
    }

    fn desk(epochs: usize) -> SftConfig {
        SftConfig {
            epochs,
            peak_lr: 3e-3,
            warmup_steps: 2,
            batch_size: 8,
            seed: 9,
            ..SftConfig::default()
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op_with_sft_role() {
        let base = small_base();
        let world = make_world(2, 1).unwrap();
        let (ck, log) = run_sft(&base, &world.base_corpus[..10], &desk(0)).unwrap();
        assert_eq!(ck.params, base.params);
        assert_eq!(ck.role, Role::Sft);
        assert!(log.is_empty());
    }

    #[test]
    fn training_lowers_loss_and_is_deterministic() {
        let base = small_base();
        let world = make_world(2, 1).unwrap();
        let corpus = &world.base_corpus[..50];
        let format = desk(3).format().unwrap();
        let seqs: Vec<Vec<u32>> = corpus.iter().map(|e| format.training_tokens(e).0).collect();
        let before = lm_loss(&base, &seqs).unwrap();
        let (a, log) = run_sft(&base, corpus, &desk(3)).unwrap();
        let after = lm_loss(&a, &seqs).unwrap();
        assert!(after < before, "{after} !< {before}");
        let falls = log.windows(2).filter(|w| w[1].mean_loss <= w[0].mean_loss).count();
        assert!(falls * 5 >= (log.len() - 1) * 4);
        let (b, _) = run_sft(&base, corpus, &desk(3)).unwrap();
        assert_eq!(a, b);
        let rec = a.provenance.last().unwrap();
        assert_eq!(rec["batch_size"], "8");
        assert_eq!(rec["default.batch_size"], "128");
    }

    #[test]
    fn role_and_input_errors() {
        let base = small_base();
        let world = make_world(2, 1).unwrap();
        assert!(run_sft(&base, &[], &desk(1)).is_err());
        let (sft, _) = run_sft(&base, &world.base_corpus[..4], &desk(0)).unwrap();
        assert!(matches!(run_sft(&sft, &world.base_corpus[..4], &desk(1)), Err(Error::Role { .. })));
        let mut long_warmup = desk(1);
        long_warmup.warmup_steps = 200;
        assert!(run_sft(&base, &world.base_corpus[..4], &long_warmup).is_err());
    }

    #[test]
    fn config_keys_round_trip() {
        let mut c = SftConfig::default();
        for (k, v) in desk(2).entries() {
            assert!(c.set(&k, &v).unwrap());
        }
        assert_eq!(c, desk(2));
        assert!(!c.set("nope", "1").unwrap());
    }
}
