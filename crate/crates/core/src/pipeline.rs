//! Stage orchestration: world, generate, translate, sft, sample_rank,
//! reward, ppo, eval, report.
//!
//! Every stage writes into its own directory under the run root and records
//! `manifests/<stage>.json` with content hashes of its inputs and outputs,
//! the config keys it reads, and the seed. A stage is skipped when its
//! manifest still matches; once one stage executes, every later stage in
//! the plan executes too.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{parse_value, Configurable, KvMap};
use crate::corpus::{read_jsonl, write_jsonl, InstructionExample, Origin, PromptFormat};
use crate::error::{Error, Result};
use crate::eval::{evaluate, render_table, EvalItem, EvalOptions, EvalReport, Norm, TableFormat};
use crate::lm::generate;
use crate::model::ModelConfig;
use crate::ppo::{run_ppo, write_log, PpoConfig};
use crate::protocol::{load_ranked_sets, produce_ranked_sets, save_ranked_sets, translate_corpus, SampleConfig};
use crate::reward::{train_reward, write_metrics, RewardConfig};
use crate::selfinstruct::{generate_instructions, GenBatchConfig};
use crate::sft::{run_sft, SftConfig};
use crate::synth::{
    count_marker, grammar_task, make_world_with, marker_eval_items, size_factor, sub_seed, task_eval_items, Judge,
    SyntheticLanguage, World, WorldConfig, BASE_LANG,
};
use crate::teacher::{ExternalConfig, ExternalTeacher, SyntheticTeacher, Teacher};
use crate::tokenizer::{decode_lossy, strip_eos};

/// Relative pool sizes for the SFT, ranking and PPO splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec(pub [u64; 3]);

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec([52, 42, 64])
    }
}

impl fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.0[0], self.0[1], self.0[2])
    }
}

impl FromStr for SplitSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!("split {s:?}: expected a:b:c")));
        }
        let mut w = [0u64; 3];
        for (slot, p) in w.iter_mut().zip(&parts) {
            *slot = parse_value("split", p.trim())?;
        }
        Ok(SplitSpec(w))
    }
}

/// Pool sizes for `n` items by largest-remainder rounding; ties in the
/// remainder go to the earlier pool.
pub fn split_sizes(n: usize, spec: SplitSpec) -> Result<[usize; 3]> {
    if spec.0.contains(&0) {
        return Err(Error::Config(format!("split {spec} has a zero component")));
    }
    if n < 3 {
        return Err(Error::invalid(format!("cannot split {n} items three ways")));
    }
    let total: u128 = spec.0.iter().map(|&w| u128::from(w)).sum();
    let mut sizes = [0usize; 3];
    let mut rems = [0u128; 3];
    for i in 0..3 {
        let q = n as u128 * u128::from(spec.0[i]);
        sizes[i] = (q / total) as usize;
        rems[i] = q % total;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    let short = n - sizes.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

/// Seeded shuffle, then consecutive pools of [`split_sizes`].
pub fn split_corpus<T: Clone>(corpus: &[T], spec: SplitSpec, seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let [a, b, _] = split_sizes(corpus.len(), spec)?;
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |r: &[usize]| r.iter().map(|&i| corpus[i].clone()).collect::<Vec<T>>();
    Ok((take(&idx[..a]), take(&idx[a..a + b]), take(&idx[a + b..])))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    World,
    Generate,
    Translate,
    Sft,
    SampleRank,
    Reward,
    Ppo,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::World,
        Stage::Generate,
        Stage::Translate,
        Stage::Sft,
        Stage::SampleRank,
        Stage::Reward,
        Stage::Ppo,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::World => "world",
            Stage::Generate => "generate",
            Stage::Translate => "translate",
            Stage::Sft => "sft",
            Stage::SampleRank => "sample_rank",
            Stage::Reward => "reward",
            Stage::Ppo => "ppo",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    /// Run-root-relative paths this stage reads.
    fn inputs(self) -> &'static [&'static str] {
        match self {
            Stage::World => &[],
            Stage::Generate => &["world"],
            Stage::Translate => &["world", "generate"],
            Stage::Sft => &["world", "translate"],
            Stage::SampleRank => &["world", "sft"],
            Stage::Reward => &["sft", "sample_rank"],
            Stage::Ppo => &["sft", "reward"],
            Stage::Eval => &["world", "sft", "ppo"],
            Stage::Report => &["world", "eval"],
        }
    }

    /// Config key prefixes whose values the stage depends on.
    fn config_keys(self) -> &'static [&'static str] {
        match self {
            Stage::World => &["world.", "model."],
            Stage::Generate => &["generate.", "teacher"],
            Stage::Translate => &["languages", "teacher"],
            Stage::Sft => &["split", "matched_data", "sft."],
            Stage::SampleRank => &["sample.", "teacher"],
            Stage::Reward => &["reward."],
            Stage::Ppo => &["ppo."],
            Stage::Eval => &["eval.", "sample.", "sft.template"],
            Stage::Report => &["eval.norm"],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown stage {s}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherKind {
    Synthetic,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub model: ModelConfig,
    /// Language codes to train and evaluate; empty means every world language.
    pub languages: Vec<String>,
    pub split: SplitSpec,
    /// Train the SFT arm on as many examples as the RLHF arm's SFT split.
    pub matched_data: bool,
    pub generate_count: usize,
    pub generate_threshold: f64,
    pub generate_n_incontext: usize,
    pub teacher: TeacherKind,
    pub external: ExternalConfig,
    pub credentials: Option<PathBuf>,
    pub sft: SftConfig,
    pub sample: SampleConfig,
    pub reward: RewardConfig,
    pub ppo: PpoConfig,
    pub eval_items: usize,
    pub eval_n_shot: usize,
    pub eval_norm: Norm,
    /// Held-out prompts per language for the oracle-reward comparison.
    pub oracle_prompts: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            languages: Vec::new(),
            split: SplitSpec::default(),
            matched_data: false,
            generate_count: 100,
            generate_threshold: 0.7,
            generate_n_incontext: 3,
            teacher: TeacherKind::Synthetic,
            external: ExternalConfig::default(),
            credentials: None,
            sft: SftConfig::default(),
            sample: SampleConfig::default(),
            reward: RewardConfig::default(),
            ppo: PpoConfig::default(),
            eval_items: 40,
            eval_n_shot: 0,
            eval_norm: Norm::PerToken,
            oracle_prompts: 40,
        }
    }
}

impl PipelineConfig {
    /// Defaults, then `seed` (which also seeds every stage), then the rest
    /// of `kv`.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(s) = kv.get("seed") {
            cfg.set("seed", s)?;
        }
        let rest: KvMap = kv.iter().filter(|(k, _)| *k != "seed").map(|(k, v)| (k.clone(), v.clone())).collect();
        cfg.apply(&rest)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sft.validate()?;
        self.reward.validate()?;
        self.ppo.validate(&self.model)?;
        if self.sft.template != self.reward.template || self.sft.template != self.ppo.template {
            return Err(Error::Config("sft, reward and ppo templates differ".into()));
        }
        if self.split.0.contains(&0) {
            return Err(Error::Config(format!("split {} has a zero component", self.split)));
        }
        if self.eval_items == 0 || self.oracle_prompts == 0 {
            return Err(Error::Config("eval.items and eval.oracle_prompts must be positive".into()));
        }
        Ok(())
    }

    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.world.seed = seed;
        self.model.seed = seed;
        self.sft.seed = seed;
        self.sample.seed = seed;
        self.reward.seed = seed;
        self.ppo.seed = seed;
    }

    /// Entries relevant to `stage`.
    fn stage_entries(&self, stage: Stage) -> BTreeMap<String, String> {
        self.entries()
            .into_iter()
            .filter(|(k, _)| stage.config_keys().iter().any(|p| k.starts_with(p)))
            .collect()
    }
}

fn set_sample(s: &mut SampleConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "max_new_tokens" => s.max_new_tokens = parse_value(key, value)?,
        "temperature" => s.temperature = parse_value(key, value)?,
        "seed" => s.seed = parse_value(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl Configurable for PipelineConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let (head, rest) = key.split_once('.').unwrap_or((key, ""));
        match (head, rest) {
            ("seed", "") => self.set_seed(parse_value(key, value)?),
            ("languages", "") => {
                self.languages = value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
            }
            ("split", "") => self.split = value.parse()?,
            ("matched_data", "") => self.matched_data = parse_value(key, value)?,
            ("world", "n_languages") => self.world.n_languages = parse_value(key, value)?,
            ("world", "corpus_size") => self.world.corpus_size = parse_value(key, value)?,
            ("world", "seed_count") => self.world.seed_count = parse_value(key, value)?,
            ("model", "n_layers") => self.model.n_layers = parse_value(key, value)?,
            ("model", "d_model") => self.model.d_model = parse_value(key, value)?,
            ("model", "n_heads") => self.model.n_heads = parse_value(key, value)?,
            ("model", "context_len") => self.model.context_len = parse_value(key, value)?,
            ("generate", "count") => self.generate_count = parse_value(key, value)?,
            ("generate", "threshold") => self.generate_threshold = parse_value(key, value)?,
            ("generate", "n_incontext") => self.generate_n_incontext = parse_value(key, value)?,
            ("teacher", "") => {
                self.teacher = match value {
                    "synthetic" => TeacherKind::Synthetic,
                    "external" => TeacherKind::External,
                    other => return Err(Error::Config(format!("teacher: unknown kind {other}"))),
                }
            }
            ("teacher", "endpoint") => self.external.endpoint = value.to_string(),
            ("teacher", "model") => self.external.model = value.to_string(),
            ("teacher", "timeout_ms") => self.external.timeout_ms = parse_value(key, value)?,
            ("teacher", "max_retries") => self.external.max_retries = parse_value(key, value)?,
            ("teacher", "credentials") => self.credentials = Some(PathBuf::from(value)),
            ("sft", k) => return self.sft.set(k, value),
            ("sample", k) => return set_sample(&mut self.sample, k, value),
            ("reward", k) => return self.reward.set(k, value),
            ("ppo", k) => return self.ppo.set(k, value),
            ("eval", "items") => self.eval_items = parse_value(key, value)?,
            ("eval", "n_shot") => self.eval_n_shot = parse_value(key, value)?,
            ("eval", "norm") => self.eval_norm = value.parse()?,
            ("eval", "oracle_prompts") => self.oracle_prompts = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("seed".to_string(), self.seed.to_string()),
            ("languages".into(), self.languages.join(",")),
            ("split".into(), self.split.to_string()),
            ("matched_data".into(), self.matched_data.to_string()),
            ("world.n_languages".into(), self.world.n_languages.to_string()),
            ("world.corpus_size".into(), self.world.corpus_size.to_string()),
            ("world.seed_count".into(), self.world.seed_count.to_string()),
            ("model.n_layers".into(), self.model.n_layers.to_string()),
            ("model.d_model".into(), self.model.d_model.to_string()),
            ("model.n_heads".into(), self.model.n_heads.to_string()),
            ("model.context_len".into(), self.model.context_len.to_string()),
            ("generate.count".into(), self.generate_count.to_string()),
            ("generate.threshold".into(), self.generate_threshold.to_string()),
            ("generate.n_incontext".into(), self.generate_n_incontext.to_string()),
            (
                "teacher".into(),
                match self.teacher {
                    TeacherKind::Synthetic => "synthetic",
                    TeacherKind::External => "external",
                }
                .into(),
            ),
            ("sample.max_new_tokens".into(), self.sample.max_new_tokens.to_string()),
            ("sample.temperature".into(), self.sample.temperature.to_string()),
            ("sample.seed".into(), self.sample.seed.to_string()),
            ("eval.items".into(), self.eval_items.to_string()),
            ("eval.n_shot".into(), self.eval_n_shot.to_string()),
            ("eval.norm".into(), self.eval_norm.to_string()),
            ("eval.oracle_prompts".into(), self.oracle_prompts.to_string()),
        ];
        if self.teacher == TeacherKind::External {
            out.push(("teacher.endpoint".into(), self.external.endpoint.clone()));
            out.push(("teacher.model".into(), self.external.model.clone()));
        }
        for (prefix, entries) in [("sft", self.sft.entries()), ("reward", self.reward.entries()), ("ppo", self.ppo.entries())] {
            out.extend(entries.into_iter().map(|(k, v)| (format!("{prefix}.{k}"), v)));
        }
        out.sort();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// sha256 of a file, or of a directory's sorted `(relative path, file hash)`
/// listing.
pub fn hash_path(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        return Ok(hex::encode(Sha256::digest(&bytes)));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let fh = hash_path(&path.join(&rel))?;
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(fh.as_bytes());
        h.update([b'\n']);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("entry under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub out_dir: PathBuf,
    pub config: PipelineConfig,
    /// Stages to consider, in dependency order.
    pub stages: Vec<Stage>,
}

impl RunPlan {
    pub fn new(out_dir: impl Into<PathBuf>, config: PipelineConfig, stages: Vec<Stage>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Config("empty stage list".into()));
        }
        if stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "stages must be distinct and in dependency order: {}",
                stages.iter().map(|s| s.name()).collect::<Vec<_>>().join(",")
            )));
        }
        Ok(Self {
            out_dir: out_dir.into(),
            config,
            stages,
        })
    }

    pub fn full(out_dir: impl Into<PathBuf>, config: PipelineConfig) -> Self {
        Self {
            out_dir: out_dir.into(),
            config,
            stages: Stage::ALL.to_vec(),
        }
    }

    pub fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.out_dir.join("manifests").join(format!("{}.json", stage.name()))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlanOutcome {
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
}

fn hash_all(root: &Path, rels: &[&str]) -> Result<BTreeMap<String, String>> {
    rels.iter().map(|r| Ok((r.to_string(), hash_path(&root.join(r))?))).collect()
}

fn read_manifest(path: &Path) -> Option<Manifest> {
    serde_json::from_str(&fs::read_to_string(path).ok()?).ok()
}

fn up_to_date(plan: &RunPlan, stage: Stage, inputs: &BTreeMap<String, String>) -> bool {
    let Some(m) = read_manifest(&plan.manifest_path(stage)) else {
        return false;
    };
    if m.seed != plan.config.seed || m.config != plan.config.stage_entries(stage) || m.inputs != *inputs {
        return false;
    }
    m.outputs
        .iter()
        .all(|(rel, h)| hash_path(&plan.out_dir.join(rel)).is_ok_and(|cur| cur == *h))
}

/// Runs the plan's stages in order, skipping those whose manifests match.
/// A failing stage stops the plan; artifacts of earlier stages stay valid.
pub fn run_plan(plan: &RunPlan) -> Result<PlanOutcome> {
    plan.config.validate()?;
    let root = &plan.out_dir;
    fs::create_dir_all(root.join("manifests")).map_err(|e| Error::io(root, e))?;
    let mut outcome = PlanOutcome::default();
    for &stage in &plan.stages {
        let wrap = |e: Error| Error::Stage {
            stage: stage.name().into(),
            source: Box::new(e),
        };
        let inputs = hash_all(root, stage.inputs()).map_err(wrap)?;
        if outcome.executed.is_empty() && up_to_date(plan, stage, &inputs) {
            log::info!("{stage}: up to date");
            outcome.skipped.push(stage);
            continue;
        }
        log::info!("{stage}: running");
        let dir = root.join(stage.name());
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| wrap(Error::io(&dir, e)))?;
        }
        fs::create_dir_all(&dir).map_err(|e| wrap(Error::io(&dir, e)))?;
        let ctx = StageCtx {
            root,
            cfg: &plan.config,
        };
        ctx.run(stage).map_err(wrap)?;
        let manifest = Manifest {
            stage: stage.name().into(),
            seed: plan.config.seed,
            config: plan.config.stage_entries(stage),
            inputs,
            outputs: hash_all(root, &[stage.name()]).map_err(wrap)?,
        };
        let path = plan.manifest_path(stage);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| wrap(Error::io(&path, e)))?;
        outcome.executed.push(stage);
    }
    Ok(outcome)
}

/// Model names in the eval stage, in report column order.
pub const EVAL_MODELS: [(&str, &str); 4] = [
    ("base", "Base"),
    ("sft", "SFT"),
    ("sft_rlhf", "SFT-split"),
    ("rlhf", "RLHF"),
];

pub const EVAL_DATASETS: [&str; 2] = ["marker", "task"];

/// Mean oracle marker count per model and language on held-out prompts.
pub type OracleTable = BTreeMap<String, BTreeMap<String, f64>>;

pub fn load_oracle(path: &Path) -> Result<OracleTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Prompts never seen in training, in `lang`.
pub fn heldout_prompts(lang: &SyntheticLanguage, n: usize, seed: u64) -> Vec<InstructionExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &format!("oracle-{}", lang.code)));
    (0..n)
        .map(|i| {
            let (instruction, input, output) = grammar_task(&mut rng, 0);
            InstructionExample {
                id: format!("oracle-{}-{i:04}", lang.code),
                lang: lang.code.clone(),
                instruction: lang.to_lang(&instruction),
                input: lang.to_lang(&input),
                output: lang.to_lang(&output),
                origin: Origin::Seed,
            }
        })
        .collect()
}

/// Mean marker count of sampled responses.
pub fn mean_marker_count(
    model: &Checkpoint,
    lang: &SyntheticLanguage,
    prompts: &[InstructionExample],
    format: &PromptFormat,
    sample: &SampleConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for p in prompts {
        let x = format.example_prompt_tokens(p);
        let seed = sub_seed(sample.seed, &format!("oracle-sample-{}", p.id));
        let y = generate(model, &x, sample.max_new_tokens, sample.temperature, seed)?;
        total += count_marker(&decode_lossy(strip_eos(&y)), lang.marker()) as f64;
    }
    Ok(total / prompts.len().max(1) as f64)
}

struct StageCtx<'a> {
    root: &'a Path,
    cfg: &'a PipelineConfig,
}

impl StageCtx<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn world(&self) -> Result<World> {
        World::load(&self.path("world"))
    }

    fn languages(&self, world: &World) -> Result<Vec<String>> {
        if self.cfg.languages.is_empty() {
            return Ok(world.languages.iter().map(|l| l.code.clone()).collect());
        }
        for code in &self.cfg.languages {
            world.language(code).map_err(|_| Error::Config(format!("language {code} is not in the world")))?;
        }
        Ok(self.cfg.languages.clone())
    }

    fn teacher(&self, world: &World, source_lang: Option<&str>) -> Result<Box<dyn Teacher>> {
        match self.cfg.teacher {
            TeacherKind::Synthetic => {
                let t = SyntheticTeacher::new(world, Judge::marker_count(), self.cfg.seed);
                Ok(Box::new(match source_lang {
                    Some(code) => t.with_source_lang(code),
                    None => t,
                }))
            }
            TeacherKind::External => {
                let mut ext = self.cfg.external.clone();
                if let Some(p) = &self.cfg.credentials {
                    ext = ext.with_credentials(p)?;
                }
                Ok(Box::new(ExternalTeacher::new(ext)?))
            }
        }
    }

    fn run(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::World => self.world_stage(),
            Stage::Generate => self.generate_stage(),
            Stage::Translate => self.translate_stage(),
            Stage::Sft => self.sft_stage(),
            Stage::SampleRank => self.sample_rank_stage(),
            Stage::Reward => self.reward_stage(),
            Stage::Ppo => self.ppo_stage(),
            Stage::Eval => self.eval_stage(),
            Stage::Report => self.report_stage(),
        }
    }

    fn world_stage(&self) -> Result<()> {
        let world = make_world_with(self.cfg.world)?;
        world.save(&self.path("world"))?;
        Checkpoint::init(self.cfg.model)?.save(&self.path("world/base"))
    }

    fn generate_stage(&self) -> Result<()> {
        let world = self.world()?;
        let teacher = self.teacher(&world, None)?;
        let gen = GenBatchConfig {
            n_incontext: self.cfg.generate_n_incontext,
            rouge_threshold: self.cfg.generate_threshold,
            target_count: self.cfg.generate_count,
            id_prefix: "gen".into(),
            lang: BASE_LANG.into(),
            seed: sub_seed(self.cfg.seed, "generate"),
            ..GenBatchConfig::default()
        };
        let out = generate_instructions(teacher.as_ref(), &world.seeds, &world.base_corpus, &gen)?;
        log::info!("generate: accepted {} ({:?})", out.accepted.len(), out.stop);
        let mut pool = world.base_corpus.clone();
        pool.extend(out.accepted.iter().cloned());
        write_jsonl(&self.path("generate/generated.jsonl"), &out.accepted)?;
        write_jsonl(&self.path("generate/decisions.jsonl"), &out.decisions)?;
        write_jsonl(&self.path(&format!("generate/pool.{BASE_LANG}.jsonl")), &pool)
    }

    fn translate_stage(&self) -> Result<()> {
        let world = self.world()?;
        let pool: Vec<InstructionExample> = read_jsonl(&self.path(&format!("generate/pool.{BASE_LANG}.jsonl")))?;
        let teacher = self.teacher(&world, None)?;
        for code in self.languages(&world)? {
            let target = world.registry.lookup(&code)?;
            let n = ((pool.len() as f64) * size_factor(target)).round() as usize;
            let out = if code == BASE_LANG {
                pool[..n].to_vec()
            } else {
                let mut t = translate_corpus(teacher.as_ref(), target, &pool[..n])?;
                for ex in &mut t {
                    ex.id = format!("{code}-{}", ex.id);
                }
                t
            };
            log::info!("translate: {code} {} examples", out.len());
            write_jsonl(&self.path(&format!("translate/pool.{code}.jsonl")), &out)?;
        }
        Ok(())
    }

    fn sft_stage(&self) -> Result<()> {
        let world = self.world()?;
        let base = Checkpoint::load(&self.path("world/base"))?;
        let (mut all, mut s1, mut s2, mut s3) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for code in self.languages(&world)? {
            let pool: Vec<InstructionExample> = read_jsonl(&self.path(&format!("translate/pool.{code}.jsonl")))?;
            let (a, b, c) = split_corpus(&pool, self.cfg.split, sub_seed(self.cfg.seed, &format!("split-{code}")))?;
            all.extend(pool);
            s1.extend(a);
            s2.extend(b);
            s3.extend(c);
        }
        write_jsonl(&self.path("sft/split.sft.jsonl"), &s1)?;
        write_jsonl(&self.path("sft/split.rank.jsonl"), &s2)?;
        write_jsonl(&self.path("sft/split.ppo.jsonl"), &s3)?;
        let (rlhf_init, log_a) = run_sft(&base, &s1, &self.cfg.sft)?;
        rlhf_init.save(&self.path("sft/rlhf_init"))?;
        write_jsonl(&self.path("sft/rlhf_init.metrics.jsonl"), &log_a)?;
        let full_data = if self.cfg.matched_data {
            let mut d = all.clone();
            d.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(self.cfg.seed, "matched")));
            d.truncate(s1.len());
            d
        } else {
            all
        };
        let (full, log_b) = run_sft(&base, &full_data, &self.cfg.sft)?;
        full.save(&self.path("sft/full"))?;
        write_jsonl(&self.path("sft/full.metrics.jsonl"), &log_b)
    }

    fn sample_rank_stage(&self) -> Result<()> {
        let world = self.world()?;
        let policy = Checkpoint::load(&self.path("sft/rlhf_init"))?;
        let prompts: Vec<InstructionExample> = read_jsonl(&self.path("sft/split.rank.jsonl"))?;
        let format = self.cfg.sft.format()?;
        let (mut sets, mut drops) = (Vec::new(), Vec::new());
        for code in self.languages(&world)? {
            let teacher = self.teacher(&world, Some(&code))?;
            let mine: Vec<InstructionExample> = prompts.iter().filter(|p| p.lang == code).cloned().collect();
            let (s, d) = produce_ranked_sets(teacher.as_ref(), &mine, &policy, &format, &self.cfg.sample)?;
            sets.extend(s);
            drops.extend(d);
        }
        save_ranked_sets(&self.path("sample_rank/ranked.jsonl"), &sets)?;
        write_jsonl(&self.path("sample_rank/drops.jsonl"), &drops)
    }

    fn reward_stage(&self) -> Result<()> {
        let sft = Checkpoint::load(&self.path("sft/rlhf_init"))?;
        let sets = load_ranked_sets(&self.path("sample_rank/ranked.jsonl"))?;
        let (rm, log) = train_reward(&sft, &sets, &self.cfg.reward)?;
        rm.save(&self.path("reward/model"))?;
        write_metrics(&self.path("reward/metrics.jsonl"), &log)
    }

    fn ppo_stage(&self) -> Result<()> {
        let sft = Checkpoint::load(&self.path("sft/rlhf_init"))?;
        let rm = Checkpoint::load(&self.path("reward/model"))?;
        let prompts: Vec<InstructionExample> = read_jsonl(&self.path("sft/split.ppo.jsonl"))?;
        let (policy, log) = run_ppo(&sft, &rm, &prompts, &self.cfg.ppo)?;
        policy.save(&self.path("ppo/model"))?;
        write_log(&self.path("ppo/log.jsonl"), &log)
    }

    fn eval_stage(&self) -> Result<()> {
        let world = self.world()?;
        let format = self.cfg.sft.format()?;
        let codes = self.languages(&world)?;
        let models = [
            Checkpoint::load(&self.path("world/base"))?,
            Checkpoint::load(&self.path("sft/full"))?,
            Checkpoint::load(&self.path("sft/rlhf_init"))?,
            Checkpoint::load(&self.path("ppo/model"))?,
        ];
        let seed = sub_seed(self.cfg.seed, "eval");
        let mut items: BTreeMap<&str, Vec<EvalItem>> = BTreeMap::new();
        for code in &codes {
            let lang = world.language(code)?;
            items
                .entry("marker")
                .or_default()
                .extend(marker_eval_items(lang, self.cfg.eval_items, seed, &format));
            items
                .entry("task")
                .or_default()
                .extend(task_eval_items(lang, self.cfg.eval_items, seed, &format));
        }
        let opts = EvalOptions {
            n_shot: self.cfg.eval_n_shot,
            seed,
        };
        let mut oracle = OracleTable::new();
        for ((name, _), model) in EVAL_MODELS.iter().zip(&models) {
            for (dataset, its) in &items {
                let report = evaluate(model, name, its, opts)?;
                report.save(&self.path(&format!("eval/{name}.{dataset}.json")))?;
            }
            let row = oracle.entry(name.to_string()).or_default();
            for code in &codes {
                let lang = world.language(code)?;
                let prompts = heldout_prompts(lang, self.cfg.oracle_prompts, seed);
                row.insert(code.clone(), mean_marker_count(model, lang, &prompts, &format, &self.cfg.sample)?);
            }
        }
        let text = serde_json::to_string_pretty(&oracle).expect("oracle table serializes");
        let path = self.path("eval/oracle.json");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    fn report_stage(&self) -> Result<()> {
        let world = self.world()?;
        let mut md = String::from("# Results\n");
        // The configured normalization comes first and goes to the TSV; the
        // other one follows in the markdown only.
        let primary = self.cfg.eval_norm;
        let secondary = if primary == Norm::PerToken { Norm::None } else { Norm::PerToken };
        for dataset in EVAL_DATASETS {
            let reports = EVAL_MODELS
                .iter()
                .map(|(name, label)| Ok((*label, EvalReport::load(&self.path(&format!("eval/{name}.{dataset}.json")))?)))
                .collect::<Result<Vec<_>>>()?;
            for norm in [primary, secondary] {
                let columns: Vec<(String, BTreeMap<String, f64>)> =
                    reports.iter().map(|(label, r)| (label.to_string(), r.accuracies(norm))).collect();
                if norm == primary {
                    let tsv = render_table(&columns, &world.registry, TableFormat::Tsv)?;
                    fs::write(self.path(&format!("report/{dataset}.tsv")), &tsv)
                        .map_err(|e| Error::io(self.path("report"), e))?;
                }
                md.push_str(&format!("\n## {dataset} accuracy, norm = {norm}\n\n"));
                md.push_str(&render_table(&columns, &world.registry, TableFormat::Markdown)?);
            }
        }
        let oracle = load_oracle(&self.path("eval/oracle.json"))?;
        md.push_str("\n## Mean marker count of sampled responses\n\n| Language |");
        for (_, label) in EVAL_MODELS {
            md.push_str(&format!(" {label} |"));
        }
        md.push_str("\n|---|");
        md.push_str(&"---|".repeat(EVAL_MODELS.len()));
        md.push('\n');
        let codes: Vec<&String> = oracle.values().flat_map(|m| m.keys()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        for code in codes {
            md.push_str(&format!("| {code} |"));
            for (name, _) in EVAL_MODELS {
                match oracle.get(name).and_then(|m| m.get(code)) {
                    Some(v) => md.push_str(&format!(" {v:.3} |")),
                    None => md.push_str(" - |"),
                }
            }
            md.push('\n');
        }
        let path = self.path("report/report.md");
        fs::write(&path, md).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    /// Exact-rational largest remainder, computed independently.
    fn oracle_sizes(n: usize, w: [u64; 3]) -> [usize; 3] {
        let total: u64 = w.iter().sum();
        let mut base: Vec<(usize, u64, usize)> = w
            .iter()
            .enumerate()
            .map(|(i, &wi)| {
                let num = n as u64 * wi;
                ((num / total) as usize, num % total, i)
            })
            .collect();
        let mut left = n - base.iter().map(|b| b.0).sum::<usize>();
        let mut by_rem = base.clone();
        by_rem.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        for b in by_rem {
            if left == 0 {
                break;
            }
            base[b.2].0 += 1;
            left -= 1;
        }
        [base[0].0, base[1].0, base[2].0]
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_sizes(158, SplitSpec::default()).unwrap(), [52, 42, 64]);
        assert_eq!(split_sizes(79, SplitSpec::default()).unwrap(), [26, 21, 32]);
        assert!(split_sizes(158, SplitSpec([52, 0, 64])).unwrap_err().is_config());
        assert!(split_sizes(2, SplitSpec::default()).is_err());
        assert_eq!("52:42:64".parse::<SplitSpec>().unwrap(), SplitSpec::default());
        assert!("52:42".parse::<SplitSpec>().is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 3usize..400, w in prop::array::uniform3(1u64..100), seed in any::<u64>()) {
            let items: Vec<usize> = (0..n).collect();
            let (a, b, c) = split_corpus(&items, SplitSpec(w), seed).unwrap();
            prop_assert_eq!([a.len(), b.len(), c.len()], oracle_sizes(n, w));
            let mut seen: HashSet<usize> = HashSet::new();
            for x in a.iter().chain(&b).chain(&c) {
                prop_assert!(seen.insert(*x));
            }
            prop_assert_eq!(seen.len(), n);
            prop_assert_eq!(split_corpus(&items, SplitSpec(w), seed).unwrap(), (a, b, c));
        }
    }

    #[test]
    fn config_keys_roundtrip() {
        let mut kv = KvMap::new();
        kv.insert("seed".into(), "7".into());
        kv.insert("sft.epochs".into(), "2".into());
        kv.insert("ppo.seed".into(), "9".into());
        kv.insert("split".into(), "1:1:2".into());
        let cfg = PipelineConfig::from_kv(&kv).unwrap();
        assert_eq!((cfg.seed, cfg.sft.seed, cfg.ppo.seed, cfg.sft.epochs), (7, 7, 9, 2));
        let back: KvMap = cfg.entries().into_iter().collect();
        let again = PipelineConfig::from_kv(&back).unwrap();
        assert_eq!(again, cfg);
        kv.insert("bogus.key".into(), "1".into());
        assert!(PipelineConfig::from_kv(&kv).unwrap_err().is_config());
    }

    #[test]
    fn stage_names_and_order() {
        assert_eq!("sample-rank".parse::<Stage>().unwrap(), Stage::SampleRank);
        assert!(RunPlan::new("x", PipelineConfig::default(), vec![Stage::Reward, Stage::Sft]).is_err());
        assert!(RunPlan::new("x", PipelineConfig::default(), vec![Stage::Sft, Stage::Reward]).is_ok());
    }

    fn tiny() -> PipelineConfig {
        let text = "seed = 3\nworld.corpus_size = 24\nworld.seed_count = 6\ngenerate.count = 6\n\
            model.n_layers = 2\nmodel.d_model = 8\nmodel.n_heads = 2\nmodel.context_len = 96\n\
            sft.epochs = 1\nsft.batch_size = 8\nsft.warmup_steps = 1\nsft.peak_lr = 1e-3\n\
            sample.max_new_tokens = 8\nreward.epochs = 1\nreward.batch_size = 6\nreward.lr = 1e-3\n\
            ppo.epochs = 1\nppo.batch_size = 4\nppo.max_new_tokens = 8\nppo.trainable_top_layers = 1\n\
            eval.items = 3\neval.oracle_prompts = 2\n";
        let mut kv = KvMap::new();
        crate::config::parse_str(text, Path::new("tiny.conf"), &mut kv).unwrap();
        PipelineConfig::from_kv(&kv).unwrap()
    }

    fn manifests(dir: &Path) -> Vec<(String, String)> {
        Stage::ALL
            .iter()
            .map(|s| {
                let p = dir.join("manifests").join(format!("{}.json", s.name()));
                (s.name().to_string(), fs::read_to_string(p).unwrap())
            })
            .collect()
    }

    #[test]
    fn tiny_plan_runs_resumes_and_reproduces() {
        let a = tempfile::tempdir().unwrap();
        let plan = RunPlan::full(a.path(), tiny());
        let first = run_plan(&plan).unwrap();
        assert_eq!(first.executed, Stage::ALL.to_vec());
        let report = fs::read_to_string(a.path().join("report/report.md")).unwrap();
        for label in ["Base", "SFT", "RLHF", "| en |", "| xa |", "| xb |", "Average"] {
            assert!(report.contains(label), "{label} missing");
        }

        let second = run_plan(&plan).unwrap();
        assert!(second.executed.is_empty());
        assert_eq!(second.skipped, Stage::ALL.to_vec());

        fs::remove_dir_all(a.path().join("reward/model")).unwrap();
        let third = run_plan(&plan).unwrap();
        assert_eq!(third.executed, vec![Stage::Reward, Stage::Ppo, Stage::Eval, Stage::Report]);

        let b = tempfile::tempdir().unwrap();
        run_plan(&RunPlan::full(b.path(), tiny())).unwrap();
        assert_eq!(manifests(a.path()), manifests(b.path()));
        for rel in ["world/base", "sft/full", "sft/rlhf_init", "reward/model", "ppo/model", "eval"] {
            assert_eq!(hash_path(&a.path().join(rel)).unwrap(), hash_path(&b.path().join(rel)).unwrap(), "{rel}");
        }
    }

    #[test]
    fn missing_input_fails_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let plan = RunPlan::new(dir.path(), tiny(), vec![Stage::Reward]).unwrap();
        let err = run_plan(&plan).unwrap_err();
        assert!(matches!(err, Error::Stage { ref stage, .. } if stage == "reward"));
        assert!(!err.is_config());
    }

    #[test]
    fn config_change_reruns_from_the_changed_stage() {
        let dir = tempfile::tempdir().unwrap();
        let stages = vec![Stage::World, Stage::Generate];
        run_plan(&RunPlan::new(dir.path(), tiny(), stages.clone()).unwrap()).unwrap();
        let mut cfg = tiny();
        cfg.generate_count = 5;
        let out = run_plan(&RunPlan::new(dir.path(), cfg, stages).unwrap()).unwrap();
        assert_eq!((out.skipped, out.executed), (vec![Stage::World], vec![Stage::Generate]));
    }
}
