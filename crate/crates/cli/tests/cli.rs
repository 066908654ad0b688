use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "world.corpus_size = 24\nworld.seed_count = 6\ngenerate.count = 6\n\
model.n_layers = 2\nmodel.d_model = 8\nmodel.n_heads = 2\nmodel.context_len = 96\n\
sft.epochs = 1\nsft.batch_size = 8\nsft.warmup_steps = 1\n\
sample.max_new_tokens = 8\nreward.epochs = 1\nreward.batch_size = 6\n\
ppo.epochs = 1\nppo.batch_size = 4\nppo.max_new_tokens = 8\nppo.trainable_top_layers = 1\n\
eval.items = 3\neval.oracle_prompts = 2\n";

fn okapi(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_okapi"))
        .arg("--out-dir")
        .arg(dir.join("run"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_conf(dir: &Path) -> String {
    let p = dir.join("tiny.conf");
    fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

#[test]
fn unknown_key_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let out = okapi(d.path(), &["--set", "ppo.bogus=1", "world"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key ppo.bogus"));
}

#[test]
fn bad_stage_list_and_flags_are_config_errors() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(okapi(d.path(), &["run", "--stages", "world,nonsense"]).status.code(), Some(2));
    assert_eq!(okapi(d.path(), &["run", "--stages", "sft,world"]).status.code(), Some(2));
    assert_eq!(okapi(d.path(), &["--seed", "x", "world"]).status.code(), Some(2));
    assert_eq!(okapi(d.path(), &["--teacher", "oracle", "world"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_fail_the_stage() {
    let d = tempfile::tempdir().unwrap();
    let conf = tiny_conf(d.path());
    let out = okapi(d.path(), &["--config", &conf, "reward"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage reward"));
}

#[test]
fn external_teacher_without_endpoint_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let conf = tiny_conf(d.path());
    assert_eq!(okapi(d.path(), &["--config", &conf, "world"]).status.code(), Some(0));
    let out = okapi(d.path(), &["--config", &conf, "--teacher", "external", "--endpoint", "", "generate"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn stages_run_resume_and_stats() {
    let d = tempfile::tempdir().unwrap();
    let conf = tiny_conf(d.path());
    let out = okapi(d.path(), &["--config", &conf, "--seed", "4", "run", "--stages", "world,generate"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout), "world\tdone\ngenerate\tdone\n");
    assert!(d.path().join("run/manifests/generate.json").exists());

    let again = okapi(d.path(), &["--config", &conf, "--seed", "4", "generate"]);
    assert_eq!(String::from_utf8_lossy(&again.stdout), "generate\tup to date\n");
    let reseeded = okapi(d.path(), &["--config", &conf, "--seed", "5", "generate"]);
    assert_eq!(String::from_utf8_lossy(&reseeded.stdout), "generate\tdone\n");

    let corpus = d.path().join("run/generate/pool.en.jsonl");
    let stats = okapi(d.path(), &["stats", corpus.to_str().unwrap(), "--top", "3"]);
    assert_eq!(stats.status.code(), Some(0));
    let text = String::from_utf8_lossy(&stats.stdout);
    assert!(text.starts_with("lang\tn\tprompt_tokens\tresponse_tokens\nen\t"), "{text}");
    assert!(text.contains("approximate"));
}

#[test]
fn world_takes_a_language_count() {
    let d = tempfile::tempdir().unwrap();
    let conf = tiny_conf(d.path());
    let out = okapi(d.path(), &["--config", &conf, "world", "--n-langs", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(d.path().join("run/manifests/world.json")).unwrap();
    assert!(manifest.contains("\"world.n_languages\": \"3\""), "{manifest}");
}
