//! `okapi`: runs the instruction-tuning pipeline stage by stage or end to end.
//!
//! Exit codes: 0 success, 1 stage failure, 2 configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use okapi_core::config::{self, KvMap};
use okapi_core::corpus::{length_stats, read_jsonl, verb_object_stats, InstructionExample, PromptFormat};
use okapi_core::error::Error;
use okapi_core::pipeline::{run_plan, PipelineConfig, RunPlan, Stage};

#[derive(Parser, Debug)]
#[command(name = "okapi", version, about = "Multilingual instruction tuning with RLHF on a synthetic world")]
struct Cli {
    /// Seeds every stage; overrides `seed` from config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat key = value config file; repeatable, later files win.
    #[arg(long, global = true)]
    config: Vec<PathBuf>,
    /// Run directory holding stage artifacts and manifests.
    #[arg(long, global = true, default_value = "run")]
    out_dir: PathBuf,
    /// Single `key=value` override, applied after config files; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(flatten)]
    teacher: TeacherArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct TeacherArgs {
    #[arg(long, global = true, value_enum)]
    teacher: Option<TeacherArg>,
    /// Chat-completions endpoint of the external teacher.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    timeout_ms: Option<u64>,
    #[arg(long, global = true)]
    max_retries: Option<u32>,
    /// File holding the teacher API key.
    #[arg(long, global = true)]
    credentials: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TeacherArg {
    Synthetic,
    External,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the synthetic world and the base checkpoint.
    World {
        /// Shorthand for `--set world.n_languages=K`.
        #[arg(long, value_name = "K")]
        n_langs: Option<usize>,
    },
    /// Grow the English instruction pool by self-instruct.
    Generate,
    /// Translate the pool into every target language.
    Translate,
    /// Split pools and fine-tune both SFT arms.
    Sft,
    /// Sample four responses per prompt and have the teacher rank them.
    SampleRank,
    /// Train the reward model on ranked responses.
    Reward,
    /// Optimize the SFT policy against the reward model.
    Ppo,
    /// Score every model on the multiple-choice sets.
    Eval,
    /// Write per-language and per-group comparison tables.
    Report,
    /// Run stages in order, skipping those already up to date.
    Run {
        /// Comma-separated subset of stages; default is all of them.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<String>,
    },
    /// Length and approximate verb/object statistics of a JSONL corpus.
    Stats {
        corpus: PathBuf,
        /// Verbs to list.
        #[arg(long, default_value_t = 20)]
        top: usize,
    },
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        Some(match self {
            Command::World { .. } => Stage::World,
            Command::Generate => Stage::Generate,
            Command::Translate => Stage::Translate,
            Command::Sft => Stage::Sft,
            Command::SampleRank => Stage::SampleRank,
            Command::Reward => Stage::Reward,
            Command::Ppo => Stage::Ppo,
            Command::Eval => Stage::Eval,
            Command::Report => Stage::Report,
            Command::Run { .. } | Command::Stats { .. } => return None,
        })
    }
}

fn build_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut kv: KvMap = config::load_all(&cli.config)?;
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    if let Command::World { n_langs: Some(k) } = cli.command {
        kv.insert("world.n_languages".into(), k.to_string());
    }
    if let Some(seed) = cli.seed {
        kv.insert("seed".into(), seed.to_string());
    }
    let t = &cli.teacher;
    if let Some(kind) = t.teacher {
        let v = match kind {
            TeacherArg::Synthetic => "synthetic",
            TeacherArg::External => "external",
        };
        kv.insert("teacher".into(), v.into());
    }
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            kv.insert(k.into(), v);
        }
    };
    put("teacher.endpoint", t.endpoint.clone());
    put("teacher.model", t.model.clone());
    put("teacher.timeout_ms", t.timeout_ms.map(|v| v.to_string()));
    put("teacher.max_retries", t.max_retries.map(|v| v.to_string()));
    put("teacher.credentials", t.credentials.as_ref().map(|p| p.display().to_string()));
    PipelineConfig::from_kv(&kv)
}

fn stats(corpus: &PathBuf, top: usize) -> Result<(), Error> {
    let rows: Vec<InstructionExample> = read_jsonl(corpus)?;
    println!("lang\tn\tprompt_tokens\tresponse_tokens");
    for (lang, (p, r, n)) in length_stats(&rows, &PromptFormat::default()) {
        println!("{lang}\t{n}\t{p:.1}\t{r:.1}");
    }
    println!("\nverb\tcount\ttop objects (approximate: first word / next long word)");
    for (verb, n, objects) in verb_object_stats(&rows, top) {
        let objs: Vec<String> = objects.iter().map(|(o, c)| format!("{o}:{c}")).collect();
        println!("{verb}\t{n}\t{}", objs.join(" "));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    if let Command::Stats { corpus, top } = &cli.command {
        return stats(corpus, *top);
    }
    let cfg = build_config(cli)?;
    let stages = match (&cli.command, cli.command.stage()) {
        (_, Some(stage)) => vec![stage],
        (Command::Run { stages }, None) if !stages.is_empty() => {
            stages.iter().map(|s| s.parse()).collect::<Result<Vec<Stage>, _>>()?
        }
        _ => Stage::ALL.to_vec(),
    };
    let plan = RunPlan::new(&cli.out_dir, cfg, stages)?;
    let outcome = run_plan(&plan)?;
    for s in &outcome.skipped {
        println!("{s}\tup to date");
    }
    for s in &outcome.executed {
        println!("{s}\tdone");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("okapi: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
