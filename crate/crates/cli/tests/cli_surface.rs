//! Command-line surface: exit codes, config-file merging, resolved-config
//! persistence, and the standalone scoring tool.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn grpolab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grpolab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).trim().to_string()
}

fn gen_small_corpus(dir: &Path, name: &str, domain: &str, count: usize) -> std::path::PathBuf {
    let out = dir.join(name);
    let st = grpolab(&[
        "gen-data",
        "--seed",
        "5",
        "--count",
        &count.to_string(),
        "--domain",
        domain,
        "--word-tokens",
        "12",
        "--frame-dim",
        "6",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(st.status.success(), "{}", stderr_line(&st));
    out
}

#[test]
fn unknown_flags_are_usage_errors_with_single_line_rendering() {
    let out = grpolab(&["gen-data", "--out", "/tmp/x", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_line(&out);
    assert!(err.starts_with("error[usage]:"), "{err}");
    assert_eq!(err.lines().count(), 1, "must be a single line: {err}");
}

#[test]
fn missing_input_files_are_data_errors() {
    let out = grpolab(&["eval", "--ckpt", "/nonexistent", "--corpus", "/nope", "--out", "/tmp/er"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_line(&out).starts_with("error[data]:"));
}

#[test]
fn dapo_with_nonzero_beta_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen_small_corpus(dir.path(), "train.corpus", "clean", 8);
    let out = grpolab(&[
        "grpo",
        "--train",
        train.to_str().unwrap(),
        "--dev",
        train.to_str().unwrap(),
        "--init",
        "/nonexistent-ckpt",
        "--out",
        dir.path().join("out").to_str().unwrap(),
        "--algo",
        "dapo",
        "--beta",
        "0.04",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr_line(&out));
    let err = stderr_line(&out);
    assert!(err.contains("KL"), "{err}");
}

#[test]
fn corrupt_corpus_reports_record_index_and_exit_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_small_corpus(dir.path(), "c.corpus", "clean", 5);
    let text = fs::read_to_string(&corpus).unwrap();
    fs::write(&corpus, &text[..text.len() - 30]).unwrap();
    let out = grpolab(&[
        "sft",
        "--train",
        corpus.to_str().unwrap(),
        "--dev",
        corpus.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
        "--steps",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_line(&out).contains("record"), "{}", stderr_line(&out));
}

#[test]
fn score_on_identical_files_prints_wer_zero_and_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("tok.txt");
    fs::write(&f, "8 9 10\n11 12\n").unwrap();
    let out = grpolab(&["score", "--ref", f.to_str().unwrap(), "--hyp", f.to_str().unwrap()]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("WER 0.0"), "{stdout}");
}

#[test]
fn score_counts_each_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().join("ref.txt");
    let h = dir.path().join("hyp.txt");
    fs::write(&r, "8 9 10\n").unwrap();
    fs::write(&h, "8 11 10 12\n").unwrap();
    let out = grpolab(&["score", "--ref", r.to_str().unwrap(), "--hyp", h.to_str().unwrap()]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("ins 1  del 0  sub 1"), "{stdout}");
    assert!(stdout.contains("WER 0.6667"), "{stdout}");
}

#[test]
fn config_file_supplies_flags_and_cli_overrides_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.cfg");
    fs::write(&cfg, "seed = 9\ncount = 6\nword-tokens = 12\nframe-dim = 6\n").unwrap();
    let out_a = dir.path().join("a.corpus");
    let st = grpolab(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_a.to_str().unwrap(),
    ]);
    assert!(st.status.success(), "{}", stderr_line(&st));
    // resolved config persisted next to the output, reflecting file values
    let resolved = fs::read_to_string(dir.path().join("a.corpus.config.resolved")).unwrap();
    assert!(resolved.contains("seed = 9"), "{resolved}");
    assert!(resolved.contains("count = 6"), "{resolved}");

    // a CLI flag overrides the file
    let out_b = dir.path().join("b.corpus");
    let st = grpolab(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--count",
        "3",
        "--out",
        out_b.to_str().unwrap(),
    ]);
    assert!(st.status.success());
    let resolved = fs::read_to_string(dir.path().join("b.corpus.config.resolved")).unwrap();
    assert!(resolved.contains("count = 3"), "{resolved}");

    // and the run is reproducible from its persisted resolved config
    let out_c = dir.path().join("c.corpus");
    let st = grpolab(&[
        "gen-data",
        "--config",
        dir.path().join("b.corpus.config.resolved").to_str().unwrap(),
        "--out",
        out_c.to_str().unwrap(),
    ]);
    assert!(st.status.success(), "{}", stderr_line(&st));
    assert_eq!(fs::read(&out_b).unwrap(), fs::read(&out_c).unwrap());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "no-such-key = 1\n").unwrap();
    let out = grpolab(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("x.corpus").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).contains("no-such-key"));
}

#[test]
fn gen_data_split_writes_three_disjoint_files() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("c.corpus");
    let st = grpolab(&[
        "gen-data",
        "--seed",
        "4",
        "--count",
        "20",
        "--word-tokens",
        "12",
        "--frame-dim",
        "6",
        "--split",
        "0.8,0.1,0.1",
        "--out",
        base.to_str().unwrap(),
    ]);
    assert!(st.status.success(), "{}", stderr_line(&st));
    for suffix in ["train", "dev", "test"] {
        assert!(dir.path().join(format!("c.corpus.{suffix}")).exists());
    }
}

#[test]
fn default_and_beta_zero_ablation_configurations_run() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("c.corpus");
    let st = grpolab(&[
        "gen-data", "--seed", "6", "--count", "24", "--word-tokens", "12", "--frame-dim", "6",
        "--split", "0.5,0.25,0.25", "--out", base.to_str().unwrap(),
    ]);
    assert!(st.status.success());
    let train = format!("{}.train", base.display());
    let dev = format!("{}.dev", base.display());
    let sft_dir = dir.path().join("sft");
    let st = grpolab(&[
        "sft", "--train", &train, "--dev", &dev, "--out", sft_dir.to_str().unwrap(),
        "--steps", "4", "--eval-every", "4", "--batch-size", "4",
        "--word-tokens", "12", "--hidden", "16", "--ffn", "32", "--layers", "1",
    ]);
    assert!(st.status.success(), "{}", stderr_line(&st));
    let init = sft_dir.join("best");

    // the default configuration: WER reward, grpo preset, beta 0.04, G = 6
    let st = grpolab(&[
        "grpo", "--train", &train, "--dev", &dev,
        "--init", init.to_str().unwrap(),
        "--out", dir.path().join("grpo-default").to_str().unwrap(),
        "--reward", "wer", "--algo", "grpo", "--beta", "0.04", "--num-generations", "6",
        "--steps", "2", "--eval-every", "2", "--batch-size", "2", "--max-gen-len", "8",
    ]);
    assert!(st.status.success(), "{}", stderr_line(&st));
    let resolved =
        fs::read_to_string(dir.path().join("grpo-default/config.resolved")).unwrap();
    assert!(resolved.contains("beta = 0.04"), "{resolved}");
    assert!(resolved.contains("num-generations = 6"), "{resolved}");

    // the beta = 0 ablation row's configuration
    let st = grpolab(&[
        "grpo", "--train", &train, "--dev", &dev,
        "--init", init.to_str().unwrap(),
        "--out", dir.path().join("grpo-beta0").to_str().unwrap(),
        "--reward", "wer", "--algo", "grpo", "--beta", "0",
        "--num-generations", "3", "--steps", "2", "--eval-every", "2",
        "--batch-size", "2", "--max-gen-len", "8",
    ]);
    assert!(st.status.success(), "{}", stderr_line(&st));
    let resolved = fs::read_to_string(dir.path().join("grpo-beta0/config.resolved")).unwrap();
    assert!(resolved.contains("beta = 0"), "{resolved}");
}

#[test]
fn compare_command_round_trips_eval_reports() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("c.corpus");
    let st = grpolab(&[
        "gen-data", "--seed", "4", "--count", "30", "--word-tokens", "12", "--frame-dim", "6",
        "--split", "0.5,0.25,0.25", "--out", base.to_str().unwrap(),
    ]);
    assert!(st.status.success());
    let train = format!("{}.train", base.display());
    let dev = format!("{}.dev", base.display());
    let run_dir = dir.path().join("sft");
    let st = grpolab(&[
        "sft", "--train", &train, "--dev", &dev,
        "--out", run_dir.to_str().unwrap(),
        "--steps", "4", "--eval-every", "4", "--batch-size", "4",
        "--word-tokens", "12", "--hidden", "16", "--ffn", "32", "--layers", "1",
    ]);
    assert!(st.status.success(), "{}", stderr_line(&st));

    let ev = |out: &Path| {
        let st = grpolab(&[
            "eval",
            "--ckpt",
            run_dir.join("best").to_str().unwrap(),
            "--corpus",
            &dev,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(st.status.success(), "{}", stderr_line(&st));
    };
    let ea = dir.path().join("eval-a");
    let eb = dir.path().join("eval-b");
    ev(&ea);
    ev(&eb);
    // identical checkpoints give byte-identical reports
    assert_eq!(
        fs::read(ea.join("report.json")).unwrap(),
        fs::read(eb.join("report.json")).unwrap()
    );
    let out = grpolab(&[
        "compare",
        "--a",
        ea.join("report.json").to_str().unwrap(),
        "--b",
        eb.join("report.json").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("WER +0.00"), "{stdout}");
}
