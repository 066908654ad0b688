//! Instruction records, newline-delimited JSON I/O, and prompt rendering.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::language::Registry;
use crate::tokenizer::{encode_str, BOS, EOS, SEP};

/// On-disk spelling of an empty input field.
pub const EMPTY_INPUT: &str = "<empty>";

pub(crate) mod empty_as_marker {
    use super::EMPTY_INPUT;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &str, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(if v.is_empty() { EMPTY_INPUT } else { v })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
        let v = String::deserialize(d)?;
        Ok(if v == EMPTY_INPUT { String::new() } else { v })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Seed,
    Generated,
    Translated,
}

/// One instruction triple. `input` is held as `""` in memory when empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstructionExample {
    pub id: String,
    pub lang: String,
    pub instruction: String,
    #[serde(with = "empty_as_marker")]
    pub input: String,
    pub output: String,
    pub origin: Origin,
}

impl InstructionExample {
    pub fn validate(&self) -> Result<()> {
        if self.instruction.trim().is_empty() {
            return Err(Error::invalid(format!("{}: empty instruction", self.id)));
        }
        if self.id.is_empty() {
            return Err(Error::invalid("record with empty id"));
        }
        Ok(())
    }
}

/// Checks per-record validity, id uniqueness, and (when given) that every
/// language code is registered.
pub fn validate_corpus(corpus: &[InstructionExample], registry: Option<&Registry>) -> Result<()> {
    let mut seen = HashSet::new();
    for ex in corpus {
        ex.validate()?;
        if !seen.insert(ex.id.as_str()) {
            return Err(Error::invalid(format!("duplicate id {}", ex.id)));
        }
        if let Some(reg) = registry {
            reg.lookup(&ex.lang)?;
        }
    }
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for it in items {
        serde_json::to_writer(&mut w, it).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Every non-blank line parsed as `T`; the first bad line is an error.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let (items, bad, _) = read_jsonl_lenient::<T>(path)?;
    if let Some((line, msg)) = bad.into_iter().next() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        });
    }
    Ok(items)
}

/// Parsed items, `(line, message)` for each unparseable line, and the count
/// of non-blank lines.
pub fn read_jsonl_lenient<T: DeserializeOwned>(path: &Path) -> Result<(Vec<T>, Vec<(usize, String)>, usize)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    let mut bad = Vec::new();
    let mut total = 0;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match serde_json::from_str(&line) {
            Ok(v) => items.push(v),
            Err(e) => bad.push((i + 1, e.to_string())),
        }
    }
    Ok((items, bad, total))
}

pub fn load_corpus(path: &Path) -> Result<Vec<InstructionExample>> {
    let corpus: Vec<InstructionExample> = read_jsonl(path)?;
    validate_corpus(&corpus, None)?;
    Ok(corpus)
}

/// SHA-256 over the canonical serialization of every record in order.
pub fn corpus_fingerprint(corpus: &[InstructionExample]) -> String {
    let mut h = Sha256::new();
    for ex in corpus {
        h.update(serde_json::to_vec(ex).expect("record serializes"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMask {
    FullSequence,
    ResponseOnly,
}

impl std::fmt::Display for LossMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMask::FullSequence => "full_sequence",
            LossMask::ResponseOnly => "response_only",
        })
    }
}

impl std::str::FromStr for LossMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_sequence" => Ok(LossMask::FullSequence),
            "response_only" => Ok(LossMask::ResponseOnly),
            other => Err(Error::Config(format!("unknown loss mask {other}"))),
        }
    }
}

/// Prompt template with `{instruction}`, `{input}` and a trailing `{output}`
/// slot. The text between `{input}` and `{output}` is the response marker.
///
/// Token layout: `BOS, prompt bytes, SEP, response bytes, EOS`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptFormat {
    template: String,
    pub loss_mask: LossMask,
}

pub const DEFAULT_TEMPLATE: &str = "{instruction}\n{input}\n> {output}";

impl Default for PromptFormat {
    fn default() -> Self {
        Self::new(DEFAULT_TEMPLATE, LossMask::ResponseOnly).expect("default template is valid")
    }
}

impl PromptFormat {
    pub fn new(template: &str, loss_mask: LossMask) -> Result<Self> {
        let i = template.find("{instruction}");
        let n = template.find("{input}");
        let o = template.find("{output}");
        match (i, n, o) {
            (Some(i), Some(n), Some(o)) if i < n && n < o && template.ends_with("{output}") => {}
            _ => {
                return Err(Error::Config(format!(
                    "template needs {{instruction}}, {{input}}, {{output}} in that order with {{output}} last: {template:?}"
                )))
            }
        }
        let f = Self {
            template: template.to_string(),
            loss_mask,
        };
        if f.marker().is_empty() {
            return Err(Error::Config("template has no text between {input} and {output}".into()));
        }
        Ok(f)
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn marker(&self) -> &str {
        let start = self.template.find("{input}").expect("validated") + "{input}".len();
        let end = self.template.len() - "{output}".len();
        &self.template[start..end]
    }

    /// Prompt text up to and including the response marker.
    pub fn render_prompt(&self, instruction: &str, input: &str) -> String {
        let head = &self.template[..self.template.len() - "{output}".len()];
        head.replacen("{instruction}", instruction, 1).replacen("{input}", input, 1)
    }

    pub fn render(&self, ex: &InstructionExample) -> String {
        let mut s = self.render_prompt(&ex.instruction, &ex.input);
        s.push_str(&ex.output);
        s
    }

    /// Response after the first marker, provided the prompt slots did not
    /// contain the marker themselves.
    pub fn split_response<'a>(&self, rendered: &'a str) -> Option<&'a str> {
        let m = self.marker();
        rendered.find(m).map(|i| &rendered[i + m.len()..])
    }

    pub fn check_renderable(&self, ex: &InstructionExample) -> Result<()> {
        let m = self.marker();
        if ex.instruction.contains(m) || ex.input.contains(m) {
            return Err(Error::invalid(format!("{}: prompt fields contain the response marker", ex.id)));
        }
        Ok(())
    }

    pub fn prompt_tokens(&self, instruction: &str, input: &str) -> Vec<u32> {
        let mut t = vec![BOS];
        t.extend(encode_str(&self.render_prompt(instruction, input)));
        t.push(SEP);
        t
    }

    pub fn example_prompt_tokens(&self, ex: &InstructionExample) -> Vec<u32> {
        self.prompt_tokens(&ex.instruction, &ex.input)
    }

    pub fn response_tokens(response: &str) -> Vec<u32> {
        let mut t = encode_str(response);
        t.push(EOS);
        t
    }

    /// Full training sequence plus the index of its first response token.
    pub fn training_tokens(&self, ex: &InstructionExample) -> (Vec<u32>, usize) {
        let mut t = self.example_prompt_tokens(ex);
        let start = t.len();
        t.extend(Self::response_tokens(&ex.output));
        (t, start)
    }
}

/// Mean prompt and response lengths in tokens, per language.
pub fn length_stats(corpus: &[InstructionExample], format: &PromptFormat) -> BTreeMap<String, (f64, f64, usize)> {
    let mut acc: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for ex in corpus {
        let e = acc.entry(ex.lang.clone()).or_default();
        e.0 += format.example_prompt_tokens(ex).len();
        e.1 += PromptFormat::response_tokens(&ex.output).len();
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(k, (p, r, n))| (k, (p as f64 / n as f64, r as f64 / n as f64, n)))
        .collect()
}

/// Approximate verb / object statistics: the first word of each instruction
/// is taken as the verb and the next word longer than three characters as
/// its object. No parsing is involved.
pub fn verb_object_stats(corpus: &[InstructionExample], top: usize) -> Vec<(String, usize, Vec<(String, usize)>)> {
    let mut verbs: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for ex in corpus {
        let words: Vec<String> = ex
            .instruction
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .filter(|w| !w.is_empty())
            .collect();
        let Some(verb) = words.first() else { continue };
        let obj = words.iter().skip(1).find(|w| w.chars().count() > 3).cloned();
        let e = verbs.entry(verb.clone()).or_default();
        *e.entry(obj.unwrap_or_default()).or_default() += 1;
    }
    let mut out: Vec<(String, usize, Vec<(String, usize)>)> = verbs
        .into_iter()
        .map(|(v, objs)| {
            let total = objs.values().sum();
            let mut o: Vec<(String, usize)> = objs.into_iter().filter(|(k, _)| !k.is_empty()).collect();
            o.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            o.truncate(4);
            (v, total, o)
        })
        .collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out.truncate(top);
    out
}
