//! Multiple-choice evaluation by likelihood scoring, with per-language and
//! per-resource-group aggregation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::Checkpoint;
use crate::corpus::read_jsonl_lenient;
use crate::error::{Error, Result};
use crate::language::{Category, Registry};
use crate::lm::sequence_logprob;
use crate::synth::sub_seed;
use crate::tokenizer::{encode_str, BOS, EOS, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Arc,
    Hellaswag,
    Mmlu,
    Custom,
}

/// How an item is laid out in tokens.
///
/// `Plain`: `BOS context` then `" " choice`. `Instruction`: `BOS context SEP`
/// then `choice EOS`, matching the fine-tuning layout.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemFormat {
    #[default]
    Plain,
    Instruction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub lang: String,
    pub dataset: DatasetKind,
    pub context: String,
    pub choices: Vec<String>,
    pub gold_index: usize,
    #[serde(default)]
    pub format: ItemFormat,
}

impl EvalItem {
    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.choices.len()) {
            return Err(Error::invalid(format!("{}: {} choices, expected 2 to 5", self.id, self.choices.len())));
        }
        if self.gold_index >= self.choices.len() {
            return Err(Error::invalid(format!(
                "{}: gold_index {} out of range for {} choices",
                self.id,
                self.gold_index,
                self.choices.len()
            )));
        }
        if self.choices.iter().any(|c| c.is_empty()) {
            return Err(Error::invalid(format!("{}: empty choice", self.id)));
        }
        let distinct: HashSet<&String> = self.choices.iter().collect();
        if distinct.len() != self.choices.len() {
            return Err(Error::invalid(format!("{}: duplicate choices", self.id)));
        }
        Ok(())
    }

    fn context_tokens(&self, prefix: &str) -> Vec<u32> {
        let mut t = vec![BOS];
        t.extend(encode_str(prefix));
        t.extend(encode_str(&self.context));
        if self.format == ItemFormat::Instruction {
            t.push(SEP);
        }
        t
    }

    fn choice_tokens(&self, i: usize) -> Vec<u32> {
        match self.format {
            ItemFormat::Plain => encode_str(&format!(" {}", self.choices[i])),
            ItemFormat::Instruction => {
                let mut t = encode_str(&self.choices[i]);
                t.push(EOS);
                t
            }
        }
    }

    fn shot_text(&self) -> String {
        match self.format {
            ItemFormat::Plain => format!("{} {}\n\n", self.context, self.choices[self.gold_index]),
            ItemFormat::Instruction => format!("{}{}\n\n", self.context, self.choices[self.gold_index]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    None,
    PerToken,
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "per_token" => Ok(Self::PerToken),
            other => Err(Error::Config(format!("unknown normalization {other}"))),
        }
    }
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::PerToken => "per_token",
        })
    }
}

/// Index of the largest score, lowest index on ties.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    pub lang: String,
    pub gold_index: usize,
    pub logprobs: Vec<f64>,
    pub token_counts: Vec<usize>,
    pub chosen_raw: usize,
    pub chosen_norm: usize,
}

impl ItemResult {
    pub fn chosen(&self, norm: Norm) -> usize {
        match norm {
            Norm::None => self.chosen_raw,
            Norm::PerToken => self.chosen_norm,
        }
    }
}

/// Scores every choice. The context is cut from the left (after BOS) so
/// that it fits alongside the longest choice; `None` when even that leaves
/// no context.
pub fn score_choices(model: &Checkpoint, item: &EvalItem, prefix: &str) -> Result<Option<ItemResult>> {
    item.validate()?;
    let ctx = item.context_tokens(prefix);
    let conts: Vec<Vec<u32>> = (0..item.choices.len()).map(|i| item.choice_tokens(i)).collect();
    let longest = conts.iter().map(Vec::len).max().unwrap_or(0);
    let limit = model.config.context_len;
    if longest + 2 > limit {
        return Ok(None);
    }
    let ctx = if ctx.len() + longest > limit {
        let keep = limit - longest - 1;
        let mut t = vec![BOS];
        t.extend_from_slice(&ctx[ctx.len() - keep..]);
        t
    } else {
        ctx
    };
    let mut logprobs = Vec::with_capacity(conts.len());
    let mut token_counts = Vec::with_capacity(conts.len());
    for c in &conts {
        let (lp, n) = sequence_logprob(model, &ctx, c)?;
        logprobs.push(lp);
        token_counts.push(n);
    }
    let normed: Vec<f64> = logprobs.iter().zip(&token_counts).map(|(l, &n)| l / n as f64).collect();
    Ok(Some(ItemResult {
        id: item.id.clone(),
        lang: item.lang.clone(),
        gold_index: item.gold_index,
        chosen_raw: argmax_first(&logprobs),
        chosen_norm: argmax_first(&normed),
        logprobs,
        token_counts,
    }))
}

/// Chosen index under `norm`, or `None` when the item had to be skipped.
pub fn score_item(model: &Checkpoint, item: &EvalItem, norm: Norm) -> Result<Option<usize>> {
    Ok(score_choices(model, item, "")?.map(|r| r.chosen(norm)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub n_shot: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { n_shot: 0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangAccuracy {
    pub scored: usize,
    pub skipped: usize,
    pub accuracy_raw: f64,
    pub accuracy_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub options: EvalOptions,
    pub per_item: Vec<ItemResult>,
    pub skipped: Vec<String>,
    /// Items reserved as few-shot examples and not scored.
    pub held_out: Vec<String>,
    pub per_language: BTreeMap<String, LangAccuracy>,
}

impl EvalReport {
    pub fn accuracies(&self, norm: Norm) -> BTreeMap<String, f64> {
        self.per_language
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    match norm {
                        Norm::None => v.accuracy_raw,
                        Norm::PerToken => v.accuracy_norm,
                    },
                )
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

/// Scores every item, zero-shot or with `n_shot` examples per item drawn
/// from a per-language held-out split.
pub fn evaluate(model: &Checkpoint, name: &str, items: &[EvalItem], opts: EvalOptions) -> Result<EvalReport> {
    let mut by_lang: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        by_lang.entry(&it.lang).or_default().push(i);
    }
    let mut shot_pool: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut held: BTreeSet<usize> = BTreeSet::new();
    if opts.n_shot > 0 {
        for (lang, idx) in &by_lang {
            let mut idx = idx.clone();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(opts.seed, lang)));
            let k = (4 * opts.n_shot).min(idx.len() / 4).max(opts.n_shot.min(idx.len().saturating_sub(1)));
            held.extend(&idx[..k]);
            shot_pool.insert(lang, idx[..k].to_vec());
        }
    }
    let mut per_item = Vec::new();
    let mut skipped = Vec::new();
    let mut tallies: BTreeMap<String, (usize, usize, usize, usize)> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        if held.contains(&i) {
            continue;
        }
        let prefix = match shot_pool.get(item.lang.as_str()) {
            Some(pool) if !pool.is_empty() => {
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(opts.seed, &item.id));
                pool.choose_multiple(&mut rng, opts.n_shot.min(pool.len()))
                    .map(|&j| items[j].shot_text())
                    .collect::<String>()
            }
            _ => String::new(),
        };
        let t = tallies.entry(item.lang.clone()).or_default();
        match score_choices(model, item, &prefix)? {
            Some(r) => {
                t.0 += 1;
                t.1 += usize::from(r.chosen_raw == r.gold_index);
                t.2 += usize::from(r.chosen_norm == r.gold_index);
                per_item.push(r);
            }
            None => {
                t.3 += 1;
                skipped.push(item.id.clone());
            }
        }
    }
    let per_language = tallies
        .into_iter()
        .map(|(lang, (n, raw, norm, skip))| {
            let acc = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
            (
                lang,
                LangAccuracy {
                    scored: n,
                    skipped: skip,
                    accuracy_raw: acc(raw),
                    accuracy_norm: acc(norm),
                },
            )
        })
        .collect();
    Ok(EvalReport {
        model: name.to_string(),
        options: opts,
        per_item,
        skipped,
        held_out: held.iter().map(|&i| items[i].id.clone()).collect(),
        per_language,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub groups: BTreeMap<Category, f64>,
    pub members: BTreeMap<Category, Vec<String>>,
    pub overall: f64,
}

/// Unweighted group means and overall mean of per-language accuracies.
pub fn aggregate(results: &BTreeMap<String, f64>, registry: &Registry) -> Result<GroupSummary> {
    if results.is_empty() {
        return Err(Error::invalid("no results to aggregate"));
    }
    let mut members: BTreeMap<Category, Vec<String>> = BTreeMap::new();
    let mut sums: BTreeMap<Category, f64> = BTreeMap::new();
    for (code, &acc) in results {
        let lang = registry.lookup(code)?;
        members.entry(lang.category).or_default().push(code.clone());
        *sums.entry(lang.category).or_default() += acc;
    }
    let groups = sums
        .into_iter()
        .map(|(c, s)| (c, s / members[&c].len() as f64))
        .collect();
    let overall = results.values().sum::<f64>() / results.len() as f64;
    Ok(GroupSummary {
        groups,
        members,
        overall,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Tsv,
    Markdown,
}

/// Language rows grouped by category with `Ave Group` rows and a closing
/// `Average` row; one column per `(name, per-language accuracy)` in
/// percent to one decimal.
pub fn render_table(columns: &[(String, BTreeMap<String, f64>)], registry: &Registry, format: TableFormat) -> Result<String> {
    let mut langs: BTreeSet<&str> = BTreeSet::new();
    for (_, c) in columns {
        langs.extend(c.keys().map(String::as_str));
    }
    let summaries: Vec<Option<GroupSummary>> = columns
        .iter()
        .map(|(_, c)| if c.is_empty() { Ok(None) } else { aggregate(c, registry).map(Some) })
        .collect::<Result<_>>()?;
    for l in &langs {
        registry.lookup(l)?;
    }
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["Group".to_string(), "Language".to_string()];
    header.extend(columns.iter().map(|(n, _)| n.clone()));
    for cat in Category::ALL {
        let members: Vec<&crate::language::Language> = registry
            .languages
            .iter()
            .filter(|l| l.category == cat && langs.contains(l.code.as_str()))
            .collect();
        if members.is_empty() {
            continue;
        }
        for l in members {
            let mut row = vec![cat.label().to_string(), l.name.clone()];
            row.extend(columns.iter().map(|(_, c)| cell(c.get(&l.code).copied())));
            rows.push(row);
        }
        let mut row = vec![cat.label().to_string(), "Ave Group".to_string()];
        row.extend(summaries.iter().map(|s| cell(s.as_ref().and_then(|s| s.groups.get(&cat).copied()))));
        rows.push(row);
    }
    let mut row = vec![String::new(), "Average".to_string()];
    row.extend(summaries.iter().map(|s| cell(s.as_ref().map(|s| s.overall))));
    rows.push(row);
    let mut out = String::new();
    match format {
        TableFormat::Tsv => {
            for r in std::iter::once(&header).chain(&rows) {
                out.push_str(&r.join("\t"));
                out.push('\n');
            }
        }
        TableFormat::Markdown => {
            out.push_str(&format!("| {} |\n", header.join(" | ")));
            out.push_str(&format!("|{}\n", " --- |".repeat(header.len())));
            for r in &rows {
                out.push_str(&format!("| {} |\n", r.join(" | ")));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Canonical,
    Arc,
    Hellaswag,
    Mmlu,
}

impl std::str::FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical" => Ok(Self::Canonical),
            "arc" => Ok(Self::Arc),
            "hellaswag" => Ok(Self::Hellaswag),
            "mmlu" => Ok(Self::Mmlu),
            other => Err(Error::invalid(format!("unknown dataset format {other}"))),
        }
    }
}

fn str_field<'a>(v: &'a Value, k: &str) -> std::result::Result<&'a str, String> {
    v.get(k).and_then(Value::as_str).ok_or_else(|| format!("missing string field {k:?}"))
}

fn str_list(v: &Value) -> std::result::Result<Vec<String>, String> {
    v.as_array()
        .ok_or("expected a list")?
        .iter()
        .map(|x| x.as_str().map(str::to_string).ok_or_else(|| "non-string list entry".to_string()))
        .collect()
}

fn index_field(v: &Value, labels: &[String]) -> std::result::Result<usize, String> {
    match v {
        Value::Number(n) => n.as_u64().map(|x| x as usize).ok_or_else(|| format!("bad index {n}")),
        Value::String(s) => labels
            .iter()
            .position(|l| l == s)
            .or_else(|| s.parse::<usize>().ok())
            .ok_or_else(|| format!("answer {s:?} matches no choice label")),
        other => Err(format!("bad answer {other}")),
    }
}

/// One record in a public dataset layout converted to an [`EvalItem`].
pub fn convert_record(v: &Value, format: DatasetFormat, lang: &str, line: usize) -> std::result::Result<EvalItem, String> {
    let id = |prefix: &str| {
        v.get("id")
            .or_else(|| v.get("ind"))
            .map(|x| x.as_str().map_or(x.to_string(), str::to_string))
            .unwrap_or_else(|| format!("{prefix}-{line}"))
    };
    let item = match format {
        DatasetFormat::Canonical => serde_json::from_value::<EvalItem>(v.clone()).map_err(|e| e.to_string())?,
        DatasetFormat::Arc => {
            let choices = v.get("choices").ok_or("missing choices")?;
            let texts = str_list(choices.get("text").ok_or("missing choices.text")?)?;
            let labels = str_list(choices.get("label").ok_or("missing choices.label")?)?;
            if labels.len() != texts.len() {
                return Err("choices.text and choices.label differ in length".into());
            }
            let key = str_field(v, "answerKey")?;
            let gold = labels
                .iter()
                .position(|l| l == key)
                .ok_or_else(|| format!("answerKey {key:?} not among labels {labels:?}"))?;
            EvalItem {
                id: id("arc"),
                lang: lang.into(),
                dataset: DatasetKind::Arc,
                context: format!("Question: {}\nAnswer:", str_field(v, "question")?),
                choices: texts,
                gold_index: gold,
                format: ItemFormat::Plain,
            }
        }
        DatasetFormat::Hellaswag => {
            let ctx = match v.get("ctx").and_then(Value::as_str) {
                Some(c) => c.to_string(),
                None => format!("{} {}", str_field(v, "ctx_a")?, str_field(v, "ctx_b")?),
            };
            let context = match v.get("activity_label").and_then(Value::as_str) {
                Some(a) => format!("{a}: {ctx}"),
                None => ctx,
            };
            let choices = str_list(v.get("endings").ok_or("missing endings")?)?;
            let gold = index_field(v.get("label").ok_or("missing label")?, &[])?;
            EvalItem {
                id: id("hellaswag"),
                lang: lang.into(),
                dataset: DatasetKind::Hellaswag,
                context,
                choices,
                gold_index: gold,
                format: ItemFormat::Plain,
            }
        }
        DatasetFormat::Mmlu => {
            let choices = str_list(v.get("choices").ok_or("missing choices")?)?;
            let letters: Vec<String> = ["A", "B", "C", "D", "E"].iter().map(|s| s.to_string()).collect();
            let gold = index_field(v.get("answer").ok_or("missing answer")?, &letters)?;
            EvalItem {
                id: id("mmlu"),
                lang: lang.into(),
                dataset: DatasetKind::Mmlu,
                context: format!("Question: {}\nAnswer:", str_field(v, "question")?),
                choices,
                gold_index: gold,
                format: ItemFormat::Plain,
            }
        }
    };
    item.validate().map_err(|e| e.to_string())?;
    Ok(item)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub items: Vec<EvalItem>,
    pub malformed: Vec<(usize, String)>,
}

/// Reads a newline-delimited dataset. More than 1% malformed lines is an
/// error; otherwise malformed lines are reported alongside the items.
pub fn load_dataset(path: &Path, format: DatasetFormat, lang: &str) -> Result<LoadedDataset> {
    let (values, mut malformed, total) = read_jsonl_lenient::<Value>(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<usize> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, _)| i + 1)
        .filter(|n| !malformed.iter().any(|(m, _)| m == n))
        .collect();
    let mut items = Vec::new();
    for (v, line) in values.iter().zip(lines) {
        match convert_record(v, format, lang, line) {
            Ok(it) => items.push(it),
            Err(msg) => malformed.push((line, msg)),
        }
    }
    malformed.sort();
    if malformed.len() * 100 > total {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            total,
            malformed,
        });
    }
    for (line, msg) in &malformed {
        log::warn!("{}:{line}: {msg}", path.display());
    }
    Ok(LoadedDataset { items, malformed })
}
