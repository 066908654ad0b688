//! Synthetic multilingual test-bed.
//!
//! A synthetic language is English with the printable bytes 32..=126
//! permuted. Tasks come from a small grammar whose outputs carry a marker
//! byte (`#` in English) a random number of times, which gives judges and
//! oracle rewards something computable to prefer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{read_jsonl, write_jsonl, InstructionExample, Origin, PromptFormat};
use crate::error::{Error, Result};
use crate::eval::{EvalItem, ItemFormat};
use crate::language::{Language, Registry};

pub const BASE_LANG: &str = "en";
pub const MARKER: u8 = b'#';
const PRINTABLE: std::ops::RangeInclusive<u8> = 32..=126;

/// Seed derived from a base seed and a label, stable across platforms.
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticLanguage {
    pub code: String,
    forward: [u8; 256],
    inverse: [u8; 256],
}

impl SyntheticLanguage {
    pub fn identity(code: &str) -> Self {
        let id: [u8; 256] = std::array::from_fn(|i| i as u8);
        Self {
            code: code.to_string(),
            forward: id,
            inverse: id,
        }
    }

    pub fn seeded(code: &str, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, code));
        let mut image: Vec<u8> = PRINTABLE.collect();
        image.shuffle(&mut rng);
        let mut forward: [u8; 256] = std::array::from_fn(|i| i as u8);
        for (b, &img) in PRINTABLE.zip(&image) {
            forward[b as usize] = img;
        }
        Self::from_forward(code, forward).expect("shuffle is a bijection")
    }

    fn from_forward(code: &str, forward: [u8; 256]) -> Result<Self> {
        let mut inverse = [0u8; 256];
        let mut seen = [false; 256];
        for (b, &f) in forward.iter().enumerate() {
            let printable = PRINTABLE.contains(&(b as u8));
            if printable != PRINTABLE.contains(&f) || seen[f as usize] {
                return Err(Error::invalid(format!("{code}: remap is not a bijection on bytes 32..=126")));
            }
            seen[f as usize] = true;
            inverse[f as usize] = b as u8;
        }
        Ok(Self {
            code: code.to_string(),
            forward,
            inverse,
        })
    }

    pub fn map_byte(&self, b: u8) -> u8 {
        self.forward[b as usize]
    }

    pub fn marker(&self) -> u8 {
        self.map_byte(MARKER)
    }

    pub fn to_lang(&self, s: &str) -> String {
        remap(s, &self.forward)
    }

    pub fn from_lang(&self, s: &str) -> String {
        remap(s, &self.inverse)
    }

    pub fn example_to_lang(&self, ex: &InstructionExample) -> InstructionExample {
        InstructionExample {
            id: ex.id.clone(),
            lang: self.code.clone(),
            instruction: self.to_lang(&ex.instruction),
            input: self.to_lang(&ex.input),
            output: self.to_lang(&ex.output),
            origin: ex.origin,
        }
    }

    /// The 95 images of bytes 32..=126, in order.
    pub fn table(&self) -> String {
        PRINTABLE.map(|b| self.forward[b as usize] as char).collect()
    }

    pub fn from_table(code: &str, table: &str) -> Result<Self> {
        let img = table.as_bytes();
        if img.len() != 95 {
            return Err(Error::invalid(format!("{code}: remap table must have 95 bytes")));
        }
        let mut forward: [u8; 256] = std::array::from_fn(|i| i as u8);
        for (b, &f) in PRINTABLE.zip(img) {
            forward[b as usize] = f;
        }
        Self::from_forward(code, forward)
    }
}

fn remap(s: &str, table: &[u8; 256]) -> String {
    let bytes: Vec<u8> = s.bytes().map(|b| table[b as usize]).collect();
    String::from_utf8(bytes).expect("remap preserves non-printable bytes, so UTF-8 stays valid")
}

pub fn count_marker(text: &str, marker: u8) -> usize {
    text.bytes().filter(|&b| b == marker).count()
}

const VERBS: &[&str] = &[
    "describe", "list", "name", "write", "explain", "summarize", "compare", "classify", "rewrite", "find",
    "suggest", "create", "give", "choose", "sort", "review",
];
const ADJECTIVES: &[&str] = &[
    "red", "quiet", "small", "bright", "old", "cold", "green", "loud", "soft", "tall", "dark", "quick",
];
const NOUNS: &[&str] = &[
    "river", "lamp", "garden", "city", "song", "bridge", "forest", "letter", "market", "planet", "engine", "island",
    "story", "window", "mountain", "recipe",
];
const TOPICS: &[&str] = &[
    "winter", "travel", "music", "science", "history", "sports", "cooking", "health", "money", "school", "ocean",
    "space",
];

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words[rng.gen_range(0..words.len())]
}

/// One English grammar task with `markers` marker bytes in its output.
pub fn grammar_task(rng: &mut ChaCha8Rng, markers: usize) -> (String, String, String) {
    let (verb, adj, noun, topic) = (pick(rng, VERBS), pick(rng, ADJECTIVES), pick(rng, NOUNS), pick(rng, TOPICS));
    let instruction = if rng.gen_bool(0.5) {
        format!("{verb} the {adj} {noun} for {topic}")
    } else {
        let other = pick(rng, TOPICS);
        format!("{verb} a {noun} about {topic} and {other}")
    };
    let input = if rng.gen_bool(0.5) {
        String::new()
    } else {
        format!("{} {}", pick(rng, ADJECTIVES), pick(rng, NOUNS))
    };
    let output = grammar_output(rng, &[noun, adj, topic], markers);
    (instruction, input, output)
}

/// Words joined by spaces with `markers` marker tokens at seeded positions.
pub fn grammar_output(rng: &mut ChaCha8Rng, words: &[&str], markers: usize) -> String {
    let mut toks: Vec<String> = words.iter().map(|w| w.to_string()).collect();
    for _ in 0..markers {
        let at = rng.gen_range(0..=toks.len());
        toks.insert(at, (MARKER as char).to_string());
    }
    toks.join(" ")
}

/// Content words of a grammar instruction, used to build its output.
fn content_words(instruction: &str) -> Vec<&str> {
    let w: Vec<&str> = instruction.split_whitespace().collect();
    match w.as_slice() {
        [_, "the", adj, noun, "for", topic] => vec![noun, adj, topic],
        [_, "a", noun, "about", topic, "and", _] => vec![noun, topic],
        _ => w.into_iter().skip(1).take(3).collect(),
    }
}

pub fn grammar_example(rng: &mut ChaCha8Rng, id: String, origin: Origin) -> InstructionExample {
    let markers = rng.gen_range(0..=3);
    let (instruction, input, output) = grammar_task(rng, markers);
    InstructionExample {
        id,
        lang: BASE_LANG.to_string(),
        instruction,
        input,
        output,
        origin,
    }
}

/// A variant of `instruction` with exactly one content word replaced.
pub fn near_duplicate(rng: &mut ChaCha8Rng, instruction: &str) -> String {
    let mut words: Vec<String> = instruction.split_whitespace().map(str::to_string).collect();
    let slots: Vec<usize> = (0..words.len())
        .filter(|&i| [VERBS, ADJECTIVES, NOUNS, TOPICS].iter().any(|l| l.contains(&words[i].as_str())))
        .collect();
    if let Some(&i) = slots.choose(rng) {
        let list = [VERBS, ADJECTIVES, NOUNS, TOPICS]
            .into_iter()
            .find(|l| l.contains(&words[i].as_str()))
            .expect("slot word is in a list");
        let current = words[i].clone();
        let replacement = list.iter().filter(|w| **w != current).copied().collect::<Vec<_>>();
        words[i] = pick(rng, &replacement).to_string();
    }
    words.join(" ")
}

/// Output for a grammar instruction with a given marker count; used to fill
/// in candidates a teacher produced without one.
pub fn output_for(rng: &mut ChaCha8Rng, instruction: &str, markers: usize) -> String {
    grammar_output(rng, &content_words(instruction), markers)
}

/// Ranks responses; 1 is best.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Judge {
    /// Longer responses rank higher.
    LengthSort,
    /// More marker bytes rank higher.
    MarkerCount { marker: u8 },
    /// A seeded permutation of the responses.
    SeededRandom { seed: u64 },
}

impl Judge {
    pub fn marker_count() -> Self {
        Judge::MarkerCount { marker: MARKER }
    }

    /// Ranks aligned to `responses`. Ties go to the earlier response.
    pub fn rank(&self, prompt: &str, responses: &[String]) -> Vec<u8> {
        let mut order: Vec<usize> = (0..responses.len()).collect();
        match *self {
            Judge::LengthSort => order.sort_by_key(|&i| std::cmp::Reverse(responses[i].len())),
            Judge::MarkerCount { marker } => {
                order.sort_by_key(|&i| std::cmp::Reverse(count_marker(&responses[i], marker)))
            }
            Judge::SeededRandom { seed } => {
                let mut label = prompt.to_string();
                for r in responses {
                    label.push('\u{1f}');
                    label.push_str(r);
                }
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, &label)));
            }
        }
        let mut ranks = vec![0u8; responses.len()];
        for (pos, &i) in order.iter().enumerate() {
            ranks[i] = pos as u8 + 1;
        }
        ranks
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleReward {
    MarkerCount { marker: u8 },
    /// 1 when the response byte length lies in `[lo, hi]`.
    LengthBand { lo: usize, hi: usize },
    /// 1 when the judge ranks the response above `reference`.
    JudgeAgreement { judge: Judge, reference: String },
}

pub fn oracle_reward(kind: &OracleReward, prompt: &str, response: &str) -> f64 {
    match kind {
        OracleReward::MarkerCount { marker } => count_marker(response, *marker) as f64,
        OracleReward::LengthBand { lo, hi } => f64::from((*lo..=*hi).contains(&response.len())),
        OracleReward::JudgeAgreement { judge, reference } => {
            let ranks = judge.rank(prompt, &[response.to_string(), reference.clone()]);
            f64::from(ranks[0] == 1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_languages: usize,
    pub seed: u64,
    pub seed_count: usize,
    pub corpus_size: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_languages: 3,
            seed: 0,
            seed_count: 24,
            corpus_size: 200,
        }
    }
}

/// Declared web-crawl shares for synthetic languages: one per category when
/// there are at least three, otherwise M and L so that together with the
/// English base language every category is present.
fn declared_ratios(n: usize) -> Vec<f64> {
    if n == 2 {
        return vec![0.5, 0.05];
    }
    let base = [2.0, 0.5, 0.05];
    (0..n).map(|i| base[i % 3] * (1.0 - 0.1 * (i / 3) as f64)).collect()
}

/// Relative corpus size per category, so lower-resource languages see less data.
pub fn size_factor(lang: &Language) -> f64 {
    match lang.category {
        crate::language::Category::H => 1.0,
        crate::language::Category::M => 0.6,
        crate::language::Category::L => 0.3,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub registry: Registry,
    pub languages: Vec<SyntheticLanguage>,
    /// English seed pool.
    pub seeds: Vec<InstructionExample>,
    /// English base corpus.
    pub base_corpus: Vec<InstructionExample>,
    /// Remapped seeds and corpora keyed by language code (English included).
    pub seeds_by_lang: BTreeMap<String, Vec<InstructionExample>>,
    pub corpora: BTreeMap<String, Vec<InstructionExample>>,
}

pub fn make_world(n_languages: usize, seed: u64) -> Result<World> {
    make_world_with(WorldConfig {
        n_languages,
        seed,
        ..WorldConfig::default()
    })
}

pub fn make_world_with(config: WorldConfig) -> Result<World> {
    if config.n_languages < 2 {
        return Err(Error::invalid(format!("a world needs at least 2 languages, got {}", config.n_languages)));
    }
    if config.n_languages > 26 {
        return Err(Error::invalid("at most 26 synthetic languages"));
    }
    let mut registry = Registry::from_languages(vec![Language::new(BASE_LANG, "English", 45.8786)?])?;
    let mut languages = vec![SyntheticLanguage::identity(BASE_LANG)];
    for (i, ratio) in declared_ratios(config.n_languages).into_iter().enumerate() {
        let letter = (b'a' + i as u8) as char;
        let code = format!("x{letter}");
        registry.push(Language::new(&code, &format!("Synth{}", letter.to_ascii_uppercase()), ratio)?)?;
        languages.push(SyntheticLanguage::seeded(&code, config.seed));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "world"));
    let seeds: Vec<InstructionExample> = (0..config.seed_count)
        .map(|i| grammar_example(&mut rng, format!("seed-{i:04}"), Origin::Seed))
        .collect();
    let base_corpus: Vec<InstructionExample> = (0..config.corpus_size)
        .map(|i| grammar_example(&mut rng, format!("base-{i:05}"), Origin::Seed))
        .collect();
    let mut seeds_by_lang = BTreeMap::new();
    let mut corpora = BTreeMap::new();
    for (sl, lang) in languages.iter().zip(&registry.languages) {
        seeds_by_lang.insert(sl.code.clone(), seeds.iter().map(|e| sl.example_to_lang(e)).collect());
        let n = ((config.corpus_size as f64) * size_factor(lang)).round() as usize;
        corpora.insert(
            sl.code.clone(),
            base_corpus.iter().take(n).map(|e| sl.example_to_lang(e)).collect(),
        );
    }
    Ok(World {
        config,
        registry,
        languages,
        seeds,
        base_corpus,
        seeds_by_lang,
        corpora,
    })
}

impl World {
    pub fn language(&self, code: &str) -> Result<&SyntheticLanguage> {
        self.languages
            .iter()
            .find(|l| l.code == code)
            .ok_or_else(|| Error::invalid(format!("unknown language code {code}")))
    }

    /// Writes `languages.tsv`, `remaps.tsv`, and per-language seed and
    /// corpus files under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.registry.save(&dir.join("languages.tsv"))?;
        save_remaps(&self.languages, &dir.join("remaps.tsv"))?;
        for (code, seeds) in &self.seeds_by_lang {
            write_jsonl(&dir.join(format!("seeds.{code}.jsonl")), seeds)?;
        }
        for (code, corpus) in &self.corpora {
            write_jsonl(&dir.join(format!("corpus.{code}.jsonl")), corpus)?;
        }
        write_jsonl(&dir.join("base.jsonl"), &self.base_corpus)?;
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        fs::write(dir.join("world.json"), cfg + "\n").map_err(|e| Error::io(dir.join("world.json"), e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("world.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let config: WorldConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: p.clone(),
            line: 1,
            msg: e.to_string(),
        })?;
        let registry = Registry::load(&dir.join("languages.tsv"))?;
        let languages = load_remaps(&dir.join("remaps.tsv"))?;
        let mut seeds_by_lang = BTreeMap::new();
        let mut corpora = BTreeMap::new();
        for l in &languages {
            seeds_by_lang.insert(l.code.clone(), read_jsonl(&dir.join(format!("seeds.{}.jsonl", l.code)))?);
            corpora.insert(l.code.clone(), read_jsonl(&dir.join(format!("corpus.{}.jsonl", l.code)))?);
        }
        Ok(Self {
            config,
            registry,
            seeds: seeds_by_lang.get(BASE_LANG).cloned().unwrap_or_default(),
            base_corpus: read_jsonl(&dir.join("base.jsonl"))?,
            languages,
            seeds_by_lang,
            corpora,
        })
    }
}

pub fn save_remaps(languages: &[SyntheticLanguage], path: &Path) -> Result<()> {
    let mut out = String::new();
    for l in languages {
        out.push_str(&format!("{}\t{}\n", l.code, hex::encode(l.table())));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_remaps(path: &Path) -> Result<Vec<SyntheticLanguage>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (code, table) = line.split_once('\t').ok_or_else(|| bad("expected code<TAB>table".into()))?;
            let bytes = hex::decode(table).map_err(|e| bad(e.to_string()))?;
            let table = String::from_utf8(bytes).map_err(|e| bad(e.to_string()))?;
            SyntheticLanguage::from_table(code, &table).map_err(|e| bad(e.to_string()))
        })
        .collect()
}

/// Multiple-choice items whose four choices differ only in marker count;
/// the gold choice has the most markers. Scored in instruction layout.
pub fn marker_eval_items(lang: &SyntheticLanguage, n: usize, seed: u64, format: &PromptFormat) -> Vec<EvalItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &format!("marker-eval-{}", lang.code)));
    (0..n)
        .map(|i| {
            let (instruction, input, _) = grammar_task(&mut rng, 0);
            let mut counts = [0usize, 1, 2, 3];
            counts.shuffle(&mut rng);
            let choices: Vec<String> = counts
                .iter()
                .map(|&k| lang.to_lang(&output_for(&mut rng, &instruction, k)))
                .collect();
            EvalItem {
                id: format!("marker-{}-{i:04}", lang.code),
                lang: lang.code.clone(),
                dataset: crate::eval::DatasetKind::Custom,
                context: format.render_prompt(&lang.to_lang(&instruction), &lang.to_lang(&input)),
                choices,
                gold_index: counts.iter().position(|&k| k == 3).expect("3 is present"),
                format: ItemFormat::Instruction,
            }
        })
        .collect()
}

/// Items asking for the grammar output of a task among outputs of other
/// tasks; measures instruction following.
pub fn task_eval_items(lang: &SyntheticLanguage, n: usize, seed: u64, format: &PromptFormat) -> Vec<EvalItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &format!("task-eval-{}", lang.code)));
    (0..n)
        .map(|i| {
            let (instruction, input, _) = grammar_task(&mut rng, 0);
            let gold = output_for(&mut rng, &instruction, 0);
            let mut choices = vec![gold.clone()];
            while choices.len() < 4 {
                let (other, _, _) = grammar_task(&mut rng, 0);
                let c = output_for(&mut rng, &other, 0);
                if !choices.contains(&c) {
                    choices.push(c);
                }
            }
            choices.shuffle(&mut rng);
            let gold_index = choices.iter().position(|c| *c == gold).expect("gold present");
            EvalItem {
                id: format!("task-{}-{i:04}", lang.code),
                lang: lang.code.clone(),
                dataset: crate::eval::DatasetKind::Custom,
                context: format.render_prompt(&lang.to_lang(&instruction), &lang.to_lang(&input)),
                choices: choices.iter().map(|c| lang.to_lang(c)).collect(),
                gold_index,
                format: ItemFormat::Instruction,
            }
        })
        .collect()
}
