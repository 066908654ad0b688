//! Translation and two-turn ranking protocols: prompt construction, reply
//! parsing, and validation of ranked response sets.

use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Role};
use crate::corpus::{read_jsonl_lenient, write_jsonl, InstructionExample, Origin, PromptFormat, EMPTY_INPUT};
use crate::error::{Error, Result};
use crate::language::Language;
use crate::lm::generate;
use crate::synth::sub_seed;
use crate::teacher::{Message, Teacher};
use crate::tokenizer::{decode_lossy, strip_eos};

/// Responses per ranked set.
pub const T: usize = 4;

pub const TRANSLATION_ANCHOR: &str = "Translate the values in the following JSON object";
pub const RANK_TRANSLATION_ANCHOR: &str = "You need to translate the provided instruction, input, and responses into English";
pub const RANKING_ANCHOR: &str = "rank the responses according to three factors";
pub const REASK_ANCHOR: &str = "Your previous output could not be parsed";

const TRANSLATION_PROMPT: &str = "Translate the values in the following JSON object into <target language> language. You must keep the keys in the JSON object in English. If a value contains programming code, only translate the comments while preserving the code. Your translations must convey all the content in the original text and cannot involve explanations or other unnecessary information. Please ensure that the translated text is natural for native speakers with correct grammar and proper word choices. Your translation must also use exact terminology to provide accurate information even for the experts in the related fields. Your output must only contain a JSON object with translated text and cannot include explanations or other information.";

const RANK_TRANSLATION_PROMPT: &str = "You will be given an instruction, an input for the instruction, and four possible responses for the instruction. The input can be empty, shown as <empty>. You need to translate the provided instruction, input, and responses into English.";

const RANKING_FORMAT: &str = "The format of your output must be: for each response: \"<Response r>: overall rank: <1/2/3/4>\". The responses must be in original order. Do not include explanation in your output.";

pub fn ranking_prompt() -> String {
    format!(
        "Given the translated instruction, input, and responses, you will need to rank the responses according to three factors: correctness with respect to the instruction and input, coherence, and naturalness.\n\
         You will need to provide an overall rank for each response when all the three factors are considered. The overall rank for a response must be an integer between 1 and 4 where 1 is for the best response and 4 is the worst response. You cannot assign the same rank for two different responses.\n\
         {RANKING_FORMAT}"
    )
}

#[derive(Serialize, Deserialize)]
struct TranslationObject {
    instruction: Option<String>,
    input: Option<String>,
    output: Option<String>,
}

/// `{"instruction": .., "input": .., "output": ..}` in that key order; an
/// empty input stays `""`.
pub fn render_translation_object(instruction: &str, input: &str, output: &str) -> String {
    serde_json::to_string(&TranslationObject {
        instruction: Some(instruction.into()),
        input: Some(input.into()),
        output: Some(output.into()),
    })
    .expect("strings serialize")
}

pub fn build_translation_prompt(target: &Language, record: &InstructionExample) -> String {
    format!(
        "{}\n\n{}",
        TRANSLATION_PROMPT.replace("<target language>", &target.name),
        render_translation_object(&record.instruction, &record.input, &record.output)
    )
}

/// The first JSON object in `text`, which must carry string values for all
/// three keys.
pub fn parse_translation_object(text: &str) -> std::result::Result<(String, String, String), String> {
    let start = text.find('{').ok_or("no JSON object in reply")?;
    let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<serde_json::Value>();
    let value = match stream.next() {
        Some(Ok(v)) => v,
        Some(Err(e)) => return Err(format!("invalid JSON: {e}")),
        None => return Err("no JSON object in reply".into()),
    };
    let field = |k: &str| match value.get(k) {
        Some(serde_json::Value::String(s)) => Ok(s.clone()),
        Some(serde_json::Value::Null) | None => Err(format!("missing key {k:?}")),
        Some(other) => Err(format!("key {k:?} is not a string: {other}")),
    };
    Ok((field("instruction")?, field("input")?, field("output")?))
}

pub fn translate_record(teacher: &dyn Teacher, target: &Language, record: &InstructionExample) -> Result<InstructionExample> {
    let mut transcript = vec![Message::user(build_translation_prompt(target, record))];
    let reply = teacher.complete(&transcript)?;
    transcript.push(Message::assistant(reply.clone()));
    let (instruction, input, output) =
        parse_translation_object(&reply).map_err(|msg| Error::Protocol {
            msg: format!("{}: {msg}", record.id),
            transcript,
        })?;
    let out = InstructionExample {
        id: record.id.clone(),
        lang: target.code.clone(),
        instruction,
        input,
        output,
        origin: Origin::Translated,
    };
    out.validate()?;
    Ok(out)
}

/// Translations in input order.
pub fn translate_corpus(teacher: &dyn Teacher, target: &Language, records: &[InstructionExample]) -> Result<Vec<InstructionExample>> {
    records.iter().map(|r| translate_record(teacher, target, r)).collect()
}

/// `Instruction:`, `Input:` and `Response 1..4:` lines; an empty input is
/// shown as `<empty>`.
pub fn render_dialog_slots(instruction: &str, input: &str, responses: &[String]) -> String {
    let mut s = format!(
        "Instruction: {instruction}\nInput: {}",
        if input.is_empty() { EMPTY_INPUT } else { input }
    );
    for (i, r) in responses.iter().enumerate() {
        s.push_str(&format!("\nResponse {}: {r}", i + 1));
    }
    s
}

/// Inverse of [`render_dialog_slots`], reading the last slot block in `text`.
pub fn parse_dialog_slots(text: &str) -> std::result::Result<(String, String, Vec<String>), String> {
    let start = text.rfind("Instruction: ").ok_or("no Instruction slot")?;
    let mut labels = vec!["Instruction: ".to_string(), "\nInput: ".to_string()];
    labels.extend((1..=T).map(|i| format!("\nResponse {i}: ")));
    let body = &text[start..];
    let mut positions = Vec::with_capacity(labels.len());
    let mut from = 0;
    for l in &labels {
        let at = body[from..].find(l.as_str()).ok_or_else(|| format!("missing slot {:?}", l.trim()))? + from;
        positions.push((at, at + l.len()));
        from = at + l.len();
    }
    let mut values = Vec::with_capacity(labels.len());
    for k in 0..positions.len() {
        let end = positions.get(k + 1).map_or(body.len(), |p| p.0);
        values.push(body[positions[k].1..end].to_string());
    }
    let input = if values[1] == EMPTY_INPUT { String::new() } else { values[1].clone() };
    Ok((values[0].clone(), input, values[2..].to_vec()))
}

/// Turn 1 (translate into English) and turn 2 (rank) of the ranking dialog.
pub fn build_ranking_dialog(instruction: &str, input: &str, responses: &[String]) -> Result<(String, String)> {
    if responses.len() != T {
        return Err(Error::invalid(format!("ranking needs {T} responses, got {}", responses.len())));
    }
    let turn1 = format!("{RANK_TRANSLATION_PROMPT}\n\n{}", render_dialog_slots(instruction, input, responses));
    Ok((turn1, ranking_prompt()))
}

pub fn reask_prompt(err: &RankParseError) -> String {
    format!("{REASK_ANCHOR} ({err}). {RANKING_FORMAT}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankParseKind {
    Missing,
    Extra,
    Malformed,
    OutOfRange,
    Duplicate,
    OutOfOrder,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct RankParseError {
    pub kind: RankParseKind,
    pub line: String,
}

impl fmt::Display for RankParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.kind {
            RankParseKind::Missing => "missing response line",
            RankParseKind::Extra => "more than four response lines",
            RankParseKind::Malformed => "malformed response line",
            RankParseKind::OutOfRange => "rank out of range",
            RankParseKind::Duplicate => "duplicate rank",
            RankParseKind::OutOfOrder => "responses out of order",
        };
        write!(f, "{what}: {:?}", self.line)
    }
}

fn rank_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?i)^\s*["']?<?\s*response\s*(\d+)\s*>?\s*:\s*(?:overall\s+rank\s*:\s*)?<?\s*(-?\d+)\s*>?\s*["'.]?\s*$"#)
            .expect("valid regex")
    })
}

fn response_prefix() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"(?i)^\s*["']?<?\s*response\s*\d"#).expect("valid regex"))
}

/// Ranks from lines `Response i: r` or `Response i: overall rank: r`.
/// Lines not starting with `Response` are ignored.
pub fn parse_rank_output(text: &str) -> std::result::Result<[u8; T], RankParseError> {
    let err = |kind, line: &str| RankParseError {
        kind,
        line: line.to_string(),
    };
    let mut ranks = [0u8; T];
    let mut n = 0;
    let mut last = "";
    for line in text.lines() {
        if !response_prefix().is_match(line) {
            continue;
        }
        let caps = rank_line().captures(line).ok_or_else(|| err(RankParseKind::Malformed, line))?;
        if n == T {
            return Err(err(RankParseKind::Extra, line));
        }
        let idx: usize = caps[1].parse().map_err(|_| err(RankParseKind::Malformed, line))?;
        if idx != n + 1 {
            return Err(err(RankParseKind::OutOfOrder, line));
        }
        let r: i64 = caps[2].parse().map_err(|_| err(RankParseKind::OutOfRange, line))?;
        if !(1..=T as i64).contains(&r) {
            return Err(err(RankParseKind::OutOfRange, line));
        }
        if ranks[..n].contains(&(r as u8)) {
            return Err(err(RankParseKind::Duplicate, line));
        }
        ranks[n] = r as u8;
        n += 1;
        last = line;
    }
    if n < T {
        return Err(err(RankParseKind::Missing, last));
    }
    Ok(ranks)
}

pub fn render_ranks(ranks: &[u8]) -> String {
    ranks
        .iter()
        .enumerate()
        .map(|(i, r)| format!("Response {}: {r}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn check_permutation(ranks: &[u8]) -> Result<()> {
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    if sorted != (1..=ranks.len() as u8).collect::<Vec<_>>() {
        return Err(Error::invalid(format!("ranks {ranks:?} are not a permutation of 1..={}", ranks.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResponseSet {
    pub id: String,
    pub lang: String,
    pub instruction: String,
    #[serde(with = "crate::corpus::empty_as_marker")]
    pub input: String,
    pub responses: Vec<String>,
    pub ranks: Vec<u8>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transcript: Vec<Message>,
    /// Set when two or more responses are identical.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub ties_possible: bool,
}

impl RankedResponseSet {
    pub fn validate(&self) -> Result<()> {
        if self.responses.len() != T || self.ranks.len() != T {
            return Err(Error::invalid(format!(
                "{}: {} responses and {} ranks, expected {T} each",
                self.id,
                self.responses.len(),
                self.ranks.len()
            )));
        }
        check_permutation(&self.ranks).map_err(|e| Error::invalid(format!("{}: {e}", self.id)))
    }
}

pub fn save_ranked_sets(path: &Path, sets: &[RankedResponseSet]) -> Result<()> {
    write_jsonl(path, sets)
}

/// Loads and re-validates every set; any bad line is an error.
pub fn load_ranked_sets(path: &Path) -> Result<Vec<RankedResponseSet>> {
    let (sets, bad, _) = read_jsonl_lenient::<RankedResponseSet>(path)?;
    if let Some((line, msg)) = bad.into_iter().next() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        });
    }
    for (i, s) in sets.iter().enumerate() {
        s.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
    }
    Ok(sets)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleConfig {
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 48,
            temperature: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropRecord {
    pub id: String,
    pub reason: String,
    pub transcript: Vec<Message>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RankOutcome {
    Ranked(RankedResponseSet),
    Dropped(DropRecord),
}

/// Samples `T` responses with per-response sub-seeds.
pub fn sample_responses(policy: &Checkpoint, format: &PromptFormat, ex: &InstructionExample, cfg: &SampleConfig) -> Result<Vec<String>> {
    let prompt = format.example_prompt_tokens(ex);
    (0..T)
        .map(|i| {
            let seed = sub_seed(cfg.seed, &format!("{}#{i}", ex.id));
            let out = generate(policy, &prompt, cfg.max_new_tokens, cfg.temperature, seed)?;
            Ok(decode_lossy(strip_eos(&out)))
        })
        .collect()
}

/// Runs the two-turn dialog over given responses. A reply that does not
/// parse gets one re-ask; a second failure drops the record.
pub fn rank_responses(teacher: &dyn Teacher, ex: &InstructionExample, responses: Vec<String>) -> Result<RankOutcome> {
    let (turn1, turn2) = build_ranking_dialog(&ex.instruction, &ex.input, &responses)?;
    let mut transcript = vec![Message::user(turn1)];
    let reply = teacher.complete(&transcript)?;
    transcript.push(Message::assistant(reply));
    transcript.push(Message::user(turn2));
    let mut failure = None;
    for attempt in 0..2 {
        let reply = teacher.complete(&transcript)?;
        transcript.push(Message::assistant(reply.clone()));
        match parse_rank_output(&reply) {
            Ok(ranks) => {
                let ties_possible = (0..T).any(|i| (i + 1..T).any(|j| responses[i] == responses[j]));
                return Ok(RankOutcome::Ranked(RankedResponseSet {
                    id: ex.id.clone(),
                    lang: ex.lang.clone(),
                    instruction: ex.instruction.clone(),
                    input: ex.input.clone(),
                    responses,
                    ranks: ranks.to_vec(),
                    transcript,
                    ties_possible,
                }));
            }
            Err(e) => {
                if attempt == 0 {
                    transcript.push(Message::user(reask_prompt(&e)));
                }
                failure = Some(e);
            }
        }
    }
    let reason = failure.map(|e| e.to_string()).unwrap_or_default();
    log::warn!("{}: dropped after re-ask: {reason}", ex.id);
    Ok(RankOutcome::Dropped(DropRecord {
        id: ex.id.clone(),
        reason,
        transcript,
    }))
}

pub fn produce_ranked_set(
    teacher: &dyn Teacher,
    ex: &InstructionExample,
    policy: &Checkpoint,
    format: &PromptFormat,
    cfg: &SampleConfig,
) -> Result<RankOutcome> {
    policy.expect_role(Role::Sft)?;
    let responses = sample_responses(policy, format, ex, cfg)?;
    rank_responses(teacher, ex, responses)
}

/// Every input ends up either ranked or in the drop list, in input order.
pub fn produce_ranked_sets(
    teacher: &dyn Teacher,
    examples: &[InstructionExample],
    policy: &Checkpoint,
    format: &PromptFormat,
    cfg: &SampleConfig,
) -> Result<(Vec<RankedResponseSet>, Vec<DropRecord>)> {
    let mut sets = Vec::new();
    let mut drops = Vec::new();
    for ex in examples {
        match produce_ranked_set(teacher, ex, policy, format, cfg)? {
            RankOutcome::Ranked(s) => sets.push(s),
            RankOutcome::Dropped(d) => drops.push(d),
        }
    }
    if !examples.is_empty() {
        log::info!(
            "ranked {} of {} prompts, drop rate {:.3}",
            sets.len(),
            examples.len(),
            drops.len() as f64 / examples.len() as f64
        );
    }
    Ok((sets, drops))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_world, Judge};
    use crate::teacher::{SyntheticTeacher, TeacherError};

    fn record(input: &str) -> InstructionExample {
        InstructionExample {
            id: "r1".into(),
            lang: "en".into(),
            instruction: "describe the red lamp for winter".into(),
            input: input.into(),
            output: "lamp # red winter".into(),
            origin: Origin::Generated,
        }
    }

    #[test]
    fn example_output_parses() {
        let text = "Response 1: 3\nResponse 2: 1\nResponse 3: 4\nResponse 4: 2";
        assert_eq!(parse_rank_output(text).unwrap(), [3, 1, 4, 2]);
        let long = "Response 1: overall rank: 3\nResponse 2: overall rank: 1\n<Response 3>: overall rank: <4>\nResponse 4: overall rank: 2";
        assert_eq!(parse_rank_output(long).unwrap(), [3, 1, 4, 2]);
    }

    #[test]
    fn rank_parse_errors() {
        let kind = |t: &str| parse_rank_output(t).unwrap_err().kind;
        assert_eq!(kind("Response 1: 1\nResponse 2: 1\nResponse 3: 1\nResponse 4: 1"), RankParseKind::Duplicate);
        assert_eq!(kind("Response 1: 5\nResponse 2: 1\nResponse 3: 2\nResponse 4: 3"), RankParseKind::OutOfRange);
        assert_eq!(kind("Response 1: 1\nResponse 2: 2\nResponse 3: 3"), RankParseKind::Missing);
        assert_eq!(kind("Response 2: 1\nResponse 1: 2\nResponse 3: 3\nResponse 4: 4"), RankParseKind::OutOfOrder);
        assert_eq!(kind("Response 1: first\nResponse 2: 1"), RankParseKind::Malformed);
        let e = parse_rank_output("Response 1: 5").unwrap_err();
        assert_eq!(e.line, "Response 1: 5");
    }

    #[test]
    fn all_permutations_roundtrip() {
        let mut count = 0;
        for a in 1..=4u8 {
            for b in 1..=4u8 {
                for c in 1..=4u8 {
                    for d in 1..=4u8 {
                        let p = [a, b, c, d];
                        if check_permutation(&p).is_ok() {
                            count += 1;
                            assert_eq!(parse_rank_output(&render_ranks(&p)).unwrap(), p);
                        }
                    }
                }
            }
        }
        assert_eq!(count, 24);
    }

    #[test]
    fn translation_prompt_layout() {
        let vi = crate::language::Registry::builtin().lookup("vi").unwrap().clone();
        let p = build_translation_prompt(&vi, &record(""));
        assert!(p.starts_with(TRANSLATION_ANCHOR));
        assert!(p.contains("into Vietnamese language"));
        assert!(p.contains(r#""input":"""#));
        assert!(!p.contains(EMPTY_INPUT));
        let (i, n, o) = parse_translation_object(&p).unwrap();
        assert_eq!((i.as_str(), n.as_str(), o.as_str()), ("describe the red lamp for winter", "", "lamp # red winter"));
    }

    #[test]
    fn translation_object_errors() {
        assert!(parse_translation_object("sure!").is_err());
        assert!(parse_translation_object(r#"{"instruction":"a","input":""}"#).is_err());
        assert!(parse_translation_object(r#"{"instruction":"a","input":"","output":null}"#).is_err());
        assert!(parse_translation_object(r#"Here: {"instruction":"a","input":"","output":"b"} done"#).is_ok());
    }

    struct Scripted(Vec<&'static str>, std::sync::Mutex<usize>);

    impl Teacher for Scripted {
        fn complete(&self, _: &[Message]) -> std::result::Result<String, TeacherError> {
            let mut i = self.1.lock().unwrap();
            let r = self.0[(*i).min(self.0.len() - 1)];
            *i += 1;
            Ok(r.to_string())
        }

        fn describe(&self) -> String {
            "scripted".into()
        }
    }

    #[test]
    fn missing_output_key_is_a_protocol_error_with_transcript() {
        let t = Scripted(vec![r#"{"instruction":"x","input":""}"#], Default::default());
        let lang = crate::language::Registry::builtin().lookup("de").unwrap().clone();
        match translate_record(&t, &lang, &record("")) {
            Err(Error::Protocol { transcript, .. }) => assert_eq!(transcript.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dialog_layout() {
        let responses: Vec<String> = (1..=4).map(|i| format!("answer {i}")).collect();
        let (t1, t2) = build_ranking_dialog("do it", "", &responses).unwrap();
        assert!(t1.contains("shown as <empty>"));
        assert!(t1.contains("Input: <empty>"));
        let order = ["Instruction:", "Input:", "Response 1:", "Response 2:", "Response 3:", "Response 4:"];
        let pos: Vec<usize> = order.iter().map(|s| t1.rfind(s).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(t2.contains("an integer between 1 and 4"));
        assert!(build_ranking_dialog("x", "", &responses[..3]).is_err());
        assert_eq!(parse_dialog_slots(&t1).unwrap(), ("do it".to_string(), String::new(), responses));
    }

    #[test]
    fn reask_once_then_drop() {
        let ex = record("");
        let responses: Vec<String> = (0..4).map(|i| "x".repeat(i + 1)).collect();
        let t = Scripted(vec!["translated", "nonsense", "Response 1: 1\nResponse 2: 2\nResponse 3: 3\nResponse 4: 4"], Default::default());
        match rank_responses(&t, &ex, responses.clone()).unwrap() {
            RankOutcome::Ranked(s) => {
                assert_eq!(s.ranks, vec![1, 2, 3, 4]);
                assert_eq!(s.transcript.len(), 6);
            }
            other => panic!("{other:?}"),
        }
        let t = Scripted(vec!["translated", "nonsense", "still nonsense"], Default::default());
        match rank_responses(&t, &ex, responses).unwrap() {
            RankOutcome::Dropped(d) => assert_eq!(d.transcript.len(), 6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn synthetic_length_judge_matches_sort_oracle() {
        let w = make_world(2, 0).unwrap();
        let lang = w.language("xa").unwrap();
        let teacher = SyntheticTeacher::new(&w, Judge::LengthSort, 0).with_source_lang("xa");
        let ex = lang.example_to_lang(&record("soft lamp"));
        let responses: Vec<String> = ["ab", "abcde", "a", "abc"].iter().map(|s| lang.to_lang(s)).collect();
        let RankOutcome::Ranked(s) = rank_responses(&teacher, &ex, responses.clone()).unwrap() else {
            panic!("dropped")
        };
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(responses[i].len()));
        for (rank, &i) in order.iter().enumerate() {
            assert_eq!(s.ranks[i] as usize, rank + 1);
        }
    }

    #[test]
    fn synthetic_translation_inverts() {
        let w = make_world(3, 5).unwrap();
        let teacher = SyntheticTeacher::new(&w, Judge::LengthSort, 0);
        for code in ["xa", "xb", "xc"] {
            let target = w.registry.lookup(code).unwrap();
            let batch: Vec<InstructionExample> = w.base_corpus[..5].to_vec();
            let out = translate_corpus(&teacher, target, &batch).unwrap();
            let sl = w.language(code).unwrap();
            for (a, b) in batch.iter().zip(&out) {
                assert_eq!(b.id, a.id);
                assert_eq!(b.lang, code);
                assert_eq!(b.origin, Origin::Translated);
                assert_eq!(sl.from_lang(&b.instruction), a.instruction);
                assert_eq!(sl.from_lang(&b.input), a.input);
                assert_eq!(sl.from_lang(&b.output), a.output);
            }
        }
    }

    #[test]
    fn ranked_set_file_revalidates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ranked.jsonl");
        let mut s = RankedResponseSet {
            id: "a".into(),
            lang: "en".into(),
            instruction: "i".into(),
            input: String::new(),
            responses: vec!["1".into(), "2".into(), "3".into(), "4".into()],
            ranks: vec![2, 1, 4, 3],
            transcript: vec![],
            ties_possible: false,
        };
        save_ranked_sets(&p, std::slice::from_ref(&s)).unwrap();
        let line = std::fs::read_to_string(&p).unwrap();
        assert!(line.contains(r#""input":"<empty>""#));
        assert_eq!(load_ranked_sets(&p).unwrap(), vec![s.clone()]);
        s.ranks = vec![1, 1, 2, 3];
        save_ranked_sets(&p, &[s]).unwrap();
        assert!(load_ranked_sets(&p).is_err());
    }
}
