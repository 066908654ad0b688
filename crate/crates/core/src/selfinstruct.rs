//! Self-instruct loop: in-context prompting of a teacher with ROUGE-L
//! novelty filtering against a conditioning pool and everything accepted.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{InstructionExample, Origin, EMPTY_INPUT};
use crate::error::{Error, Result};
use crate::rouge::RougeIndex;
use crate::teacher::{Message, Teacher, TeacherError};

pub const GENERATION_ANCHOR: &str = "Come up with new task instructions";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

impl From<&InstructionExample> for Candidate {
    fn from(e: &InstructionExample) -> Self {
        Self {
            instruction: e.instruction.clone(),
            input: e.input.clone(),
            output: e.output.clone(),
        }
    }
}

/// Blocks of `Task k` / `Instruction:` / `Input:` / `Output:` lines.
pub fn render_tasks(tasks: &[Candidate]) -> String {
    tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            format!(
                "Task {}\nInstruction: {}\nInput: {}\nOutput: {}",
                i + 1,
                t.instruction,
                if t.input.is_empty() { EMPTY_INPUT } else { &t.input },
                t.output
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn build_generation_prompt(examples: &[Candidate], n_new: usize) -> String {
    format!(
        "{GENERATION_ANCHOR}. Each task has an instruction, an input that may be {EMPTY_INPUT}, and an output. Here are some examples:\n\n{}\n\nWrite {n_new} new and different tasks in the same format.",
        render_tasks(examples)
    )
}

/// Every complete task block in `text`; incomplete blocks are skipped.
pub fn parse_tasks(text: &str) -> Vec<Candidate> {
    let mut out = Vec::new();
    let mut cur: [Option<String>; 3] = [None, None, None];
    let flush = |cur: &mut [Option<String>; 3], out: &mut Vec<Candidate>| {
        if let [Some(i), Some(n), Some(o)] = cur {
            if !i.trim().is_empty() {
                out.push(Candidate {
                    instruction: i.trim().to_string(),
                    input: if n.trim() == EMPTY_INPUT { String::new() } else { n.trim().to_string() },
                    output: o.trim().to_string(),
                });
            }
        }
        *cur = [None, None, None];
    };
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("Instruction:") {
            flush(&mut cur, &mut out);
            cur[0] = Some(v.to_string());
        } else if let Some(v) = line.strip_prefix("Input:") {
            cur[1] = Some(v.to_string());
        } else if let Some(v) = line.strip_prefix("Output:") {
            cur[2] = Some(v.to_string());
        }
    }
    flush(&mut cur, &mut out);
    out
}

/// Which side of the threshold a candidate must fall on to be kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcceptWhen {
    /// Keep novel candidates: similarity strictly below the threshold.
    Below,
    /// Keep candidates whose similarity exceeds the threshold.
    Above,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenBatchConfig {
    pub n_incontext: usize,
    pub rouge_threshold: f64,
    pub target_count: usize,
    pub tasks_per_prompt: usize,
    pub accept_when: AcceptWhen,
    /// Teacher calls before giving up on reaching `target_count`.
    pub max_rounds: usize,
    pub id_prefix: String,
    pub lang: String,
    pub seed: u64,
}

impl Default for GenBatchConfig {
    fn default() -> Self {
        Self {
            n_incontext: 3,
            rouge_threshold: 0.7,
            target_count: 100,
            tasks_per_prompt: 4,
            accept_when: AcceptWhen::Below,
            max_rounds: 1000,
            id_prefix: "gen".into(),
            lang: "en".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub round: usize,
    pub instruction: String,
    pub similarity: Option<f64>,
    pub blocking_id: Option<String>,
    pub accepted: bool,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TargetReached,
    TeacherExhausted,
    RoundLimit,
    TeacherFailed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenOutcome {
    pub accepted: Vec<InstructionExample>,
    pub decisions: Vec<Decision>,
    pub stop: StopReason,
}

pub fn generate_instructions(
    teacher: &dyn Teacher,
    seeds: &[InstructionExample],
    conditioning_pool: &[InstructionExample],
    cfg: &GenBatchConfig,
) -> Result<GenOutcome> {
    if seeds.is_empty() {
        return Err(Error::invalid("seed pool is empty"));
    }
    if seeds.iter().any(|s| s.origin != Origin::Seed) {
        return Err(Error::invalid("seed pool entries must have origin seed"));
    }
    if cfg.target_count == 0 {
        return Err(Error::invalid("target_count must be positive"));
    }
    if !(cfg.rouge_threshold > 0.0 && cfg.rouge_threshold <= 1.0) {
        return Err(Error::invalid(format!("rouge_threshold {} outside (0, 1]", cfg.rouge_threshold)));
    }
    let mut index = RougeIndex::new();
    for ex in conditioning_pool {
        index.push(&ex.id, &ex.instruction);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut accepted: Vec<InstructionExample> = Vec::new();
    let mut decisions = Vec::new();
    let mut round = 0;
    let stop = loop {
        if accepted.len() >= cfg.target_count {
            break StopReason::TargetReached;
        }
        if round >= cfg.max_rounds {
            break StopReason::RoundLimit;
        }
        round += 1;
        let pool: Vec<&InstructionExample> = seeds.iter().chain(&accepted).collect();
        let shots: Vec<Candidate> = pool
            .choose_multiple(&mut rng, cfg.n_incontext.min(pool.len()))
            .map(|e| Candidate::from(*e))
            .collect();
        let prompt = build_generation_prompt(&shots, cfg.tasks_per_prompt);
        let reply = match teacher.complete(&[Message::user(prompt)]) {
            Ok(r) => r,
            Err(TeacherError::Exhausted) => break StopReason::TeacherExhausted,
            Err(e) => break StopReason::TeacherFailed(e.to_string()),
        };
        let candidates = parse_tasks(&reply);
        if candidates.is_empty() {
            log::warn!("round {round}: unparseable teacher output");
            decisions.push(Decision {
                round,
                instruction: String::new(),
                similarity: None,
                blocking_id: None,
                accepted: false,
                note: "unparseable".into(),
            });
            continue;
        }
        for c in candidates {
            if accepted.len() >= cfg.target_count {
                break;
            }
            let (sim, blocker) = match index.max_similarity(&c.instruction) {
                Ok((s, id)) => (Some(s), Some(id)),
                Err(_) => (None, None),
            };
            let keep = match (sim, cfg.accept_when) {
                (None, _) => true,
                (Some(s), AcceptWhen::Below) => s < cfg.rouge_threshold,
                (Some(s), AcceptWhen::Above) => s > cfg.rouge_threshold,
            };
            log::debug!("round {round}: {:?} similarity {sim:?} vs {blocker:?} -> {keep}", c.instruction);
            decisions.push(Decision {
                round,
                instruction: c.instruction.clone(),
                similarity: sim,
                blocking_id: blocker,
                accepted: keep,
                note: String::new(),
            });
            if keep {
                let ex = InstructionExample {
                    id: format!("{}-{:05}", cfg.id_prefix, accepted.len()),
                    lang: cfg.lang.clone(),
                    instruction: c.instruction,
                    input: c.input,
                    output: c.output,
                    origin: Origin::Generated,
                };
                index.push(&ex.id, &ex.instruction);
                accepted.push(ex);
            }
        }
    };
    Ok(GenOutcome {
        accepted,
        decisions,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rouge::rouge_l;
    use crate::synth::{make_world, Judge};
    use crate::teacher::SyntheticTeacher;

    struct Fixed(String);

    impl Teacher for Fixed {
        fn complete(&self, _: &[Message]) -> std::result::Result<String, TeacherError> {
            Ok(self.0.clone())
        }

        fn describe(&self) -> String {
            "fixed".into()
        }
    }

    /// Returns tasks whose instructions are fresh words each call.
    struct Disjoint(std::sync::atomic::AtomicUsize);

    impl Teacher for Disjoint {
        fn complete(&self, _: &[Message]) -> std::result::Result<String, TeacherError> {
            let n = self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            let tasks: Vec<Candidate> = (0..2)
                .map(|k| Candidate {
                    instruction: format!("w{n}x{k}a w{n}x{k}b"),
                    input: String::new(),
                    output: "o".into(),
                })
                .collect();
            Ok(render_tasks(&tasks))
        }

        fn describe(&self) -> String {
            "disjoint".into()
        }
    }

    #[test]
    fn task_blocks_roundtrip() {
        let t = vec![
            Candidate { instruction: "a b".into(), input: String::new(), output: "c".into() },
            Candidate { instruction: "d".into(), input: "e".into(), output: "f g".into() },
        ];
        assert_eq!(parse_tasks(&render_tasks(&t)), t);
        assert_eq!(parse_tasks(&build_generation_prompt(&t, 3)), t);
        assert!(parse_tasks("Instruction: only").is_empty());
    }

    #[test]
    fn copies_of_the_pool_are_never_accepted() {
        let w = make_world(2, 0).unwrap();
        let copy = render_tasks(&[Candidate::from(&w.base_corpus[0])]);
        let cfg = GenBatchConfig { target_count: 5, max_rounds: 20, ..Default::default() };
        let out = generate_instructions(&Fixed(copy), &w.seeds, &w.base_corpus, &cfg).unwrap();
        assert!(out.accepted.is_empty());
        assert_eq!(out.stop, StopReason::RoundLimit);
        assert!(out.decisions.iter().all(|d| d.similarity == Some(1.0) && !d.accepted));
    }

    #[test]
    fn disjoint_candidates_are_all_accepted() {
        let w = make_world(2, 0).unwrap();
        let cfg = GenBatchConfig { target_count: 7, ..Default::default() };
        let out = generate_instructions(&Disjoint(Default::default()), &w.seeds, &w.base_corpus, &cfg).unwrap();
        assert_eq!(out.accepted.len(), 7);
        assert!(out.decisions.iter().all(|d| d.accepted));
        assert_eq!(out.stop, StopReason::TargetReached);
    }

    #[test]
    fn synthetic_teacher_corpus_is_pairwise_novel() {
        let w = make_world(2, 3).unwrap();
        let teacher = SyntheticTeacher::new(&w, Judge::LengthSort, 3);
        let cfg = GenBatchConfig { target_count: 40, seed: 3, ..Default::default() };
        let out = generate_instructions(&teacher, &w.seeds, &w.base_corpus, &cfg).unwrap();
        assert_eq!(out.accepted.len(), 40);
        assert!(out.decisions.iter().any(|d| !d.accepted), "near duplicates should be rejected");
        for (i, a) in out.accepted.iter().enumerate() {
            for b in &out.accepted[i + 1..] {
                assert!(rouge_l(&a.instruction, &b.instruction) < 0.7);
            }
            for p in &w.base_corpus {
                assert!(rouge_l(&a.instruction, &p.instruction) < 0.7);
            }
        }
        let again = generate_instructions(&teacher, &w.seeds, &w.base_corpus, &cfg).unwrap();
        assert_eq!(again.accepted, out.accepted);
    }

    #[test]
    fn exhaustion_stops_with_partial_results() {
        let w = make_world(2, 0).unwrap();
        let teacher = SyntheticTeacher::new(&w, Judge::LengthSort, 0).with_budget(2);
        let cfg = GenBatchConfig { target_count: 1000, ..Default::default() };
        let out = generate_instructions(&teacher, &w.seeds, &[], &cfg).unwrap();
        assert_eq!(out.stop, StopReason::TeacherExhausted);
        assert!(!out.accepted.is_empty());
    }

    #[test]
    fn inverted_comparison_is_available() {
        let w = make_world(2, 0).unwrap();
        let copy = render_tasks(&[Candidate::from(&w.base_corpus[0])]);
        let cfg = GenBatchConfig { target_count: 1, accept_when: AcceptWhen::Above, ..Default::default() };
        let out = generate_instructions(&Fixed(copy), &w.seeds, &w.base_corpus, &cfg).unwrap();
        assert_eq!(out.accepted.len(), 1);
    }
}
