mod support;

use std::fs;
use std::path::Path;

use icrl::embed_store::load_matrix_auto;
use icrl::prompting::PromptIr;
use support::{icrl, metric, p, read, tree};

fn synth(dir: &Path, n: &str) -> std::path::PathBuf {
    let out = dir.join("data");
    assert_eq!(icrl(&["synth", "--n", n, "--d-fm", "8", "--seed", "1", "--out-dir", p(&out)]), 0);
    out.join("dataset.csv")
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(icrl(&["--help"]), 0);
    assert_eq!(icrl(&["--version"]), 0);
    for cmd in ["fit-pca", "project", "align-ot", "stringify", "build-prompt", "diagnose", "verify-theory", "run-pipeline", "synth"] {
        assert_eq!(icrl(&[cmd, "--help"]), 0, "{cmd}");
    }
}

#[test]
fn help_lists_defaults() {
    use clap::CommandFactory;
    let mut cmd = icrl_cli::Cli::command();
    let help = cmd.find_subcommand_mut("run-pipeline").unwrap().render_long_help().to_string();
    for default in ["[default: 5]", "[default: 3]", "[default: 20]", "[default: 2]", "[default: embedding]", "[default: embed]", "[default: moment_matched]", "[default: 4096]"] {
        assert!(help.contains(default), "missing {default}");
    }
    let help = cmd.find_subcommand_mut("verify-theory").unwrap().render_long_help().to_string();
    assert!(help.contains("[default: 1000]") && help.contains("[default: 10000]"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "30");
    let out = dir.path().join("out");
    assert_eq!(icrl(&["no-such-command"]), 1);
    assert_eq!(icrl(&["synth", "--bogus", "--out-dir", p(&out)]), 1);
    assert_eq!(icrl(&["run-pipeline", "--dataset", p(&ds), "--k", "0", "--out-dir", p(&out)]), 1);
    assert_eq!(icrl(&["run-pipeline", "--dataset", p(&ds), "--k", "28", "--out-dir", p(&out)]), 1);
    assert_eq!(icrl(&["run-pipeline", "--dataset", p(&dir.path().join("missing.csv")), "--out-dir", p(&out)]), 1);
    assert_eq!(icrl(&["verify-theory", "--cosine", "2", "--out-dir", p(&out)]), 1);
    assert_eq!(icrl(&["fit-pca", "--out-dir", p(&out)]), 1);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "1,2\n0,0\n").unwrap();
    assert_eq!(icrl(&["diagnose", "--embeddings", p(&bad), "--out-dir", p(&dir.path().join("o"))]), 2);
}

#[test]
fn failing_theory_check_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let code = icrl(&["verify-theory", "--d", "200", "--trials", "2000", "--rhos", "0", "--out-dir", p(&out)]);
    assert_eq!(code, 2);
    assert!(read(out.join("theory.csv")).contains("false"));
}

#[test]
fn align_ot_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src.csv");
    let tar = dir.path().join("tar.csv");
    fs::write(&src, "0\n2\n").unwrap();
    fs::write(&tar, "10\n14\n").unwrap();
    for (formula, expected) in [("moment_matched", [10.0, 14.0]), ("literal", [11.0, 15.0])] {
        let out = dir.path().join(formula);
        assert_eq!(icrl(&["align-ot", "--source", p(&src), "--target", p(&tar), "--formula", formula, "--format", "csv", "--out-dir", p(&out)]), 0);
        assert_eq!(load_matrix_auto(out.join("aligned.csv")).unwrap().values(), expected);
    }
}

#[test]
fn build_prompt_counts() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "40");
    let out = dir.path().join("prompt");
    assert_eq!(icrl(&["build-prompt", "--dataset", p(&ds), "--k", "5", "--b", "3", "--out-dir", p(&out)]), 0);
    let ir = PromptIr::load(&out, "prompt").unwrap();
    assert_eq!(ir.n_demos(), 5);
    assert_eq!(ir.query_count, 3);
    assert_eq!(ir.vector_segment_count(), 8);
    assert_eq!(read(out.join("prompt.txt")).matches("<REP>").count(), 8);
}

#[test]
fn raw_text_only_needs_no_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("texts.csv");
    let mut csv = String::from("id,label,text\n");
    for i in 0..30 {
        csv.push_str(&format!("m{i},{}.5,C C O {}\n", i % 7, "N ".repeat(i % 5 + 1).trim()));
    }
    fs::write(&ds, csv).unwrap();
    let out = dir.path().join("run");
    let code = icrl(&["run-pipeline", "--dataset", p(&ds), "--mode", "raw_text_only", "--k", "10", "--llm-dim", "32", "--out-dir", p(&out)]);
    assert_eq!(code, 0);
    assert!(metric(&out, "rmse").is_finite());
    assert_eq!(read(out.join("predictions.csv")).lines().count(), 31);
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "40");
    let config = dir.path().join("run.cfg");
    fs::write(&config, "# shots\nk = 12\nllm_dim = 64\nseed = 7\n").unwrap();
    let out = dir.path().join("run");
    assert_eq!(icrl(&["run-pipeline", "--dataset", p(&ds), "--config", p(&config), "--seed", "3", "--out-dir", p(&out)]), 0);
    let manifest: serde_json::Value = serde_json::from_str(&read(out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["flags"]["k"], "12");
    assert_eq!(manifest["flags"]["llm_dim"], "64");
    assert_eq!(manifest["flags"]["seed"], "3");
    assert_eq!(manifest["flags"]["b"], "3");
    assert_eq!(PromptIr::load(&out, "prompt").unwrap().n_demos(), 12);

    fs::write(&config, "shots = 3\n").unwrap();
    assert_eq!(icrl(&["run-pipeline", "--dataset", p(&ds), "--config", p(&config), "--out-dir", p(&out)]), 1);
}

#[test]
fn manifest_records_inputs_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "30");
    let out = dir.path().join("pca");
    assert_eq!(icrl(&["fit-pca", "--dataset", p(&ds), "--pca-dim", "3", "--out-dir", p(&out)]), 0);
    let manifest: serde_json::Value = serde_json::from_str(&read(out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "fit-pca");
    assert_eq!(manifest["flags"]["pca_dim"], "3");
    assert!(manifest["flags"].get("out_dir").is_none());
    let inputs = manifest["inputs"].as_object().unwrap();
    assert_eq!(inputs.len(), 1);
    assert_eq!(inputs.values().next().unwrap().as_str().unwrap().len(), 64);
    let artifacts = manifest["artifacts"].as_object().unwrap();
    let files: Vec<_> = tree(&out).into_iter().map(|(f, _)| f.to_string_lossy().into_owned()).filter(|f| f != "manifest.json").collect();
    assert_eq!(artifacts.keys().cloned().collect::<Vec<_>>(), files);
}

#[test]
fn pipeline_writes_predictions_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "60");
    let out = dir.path().join("run");
    assert_eq!(icrl(&["run-pipeline", "--dataset", p(&ds), "--k", "20", "--llm-dim", "128", "--out-dir", p(&out)]), 0);
    let predictions = read(out.join("predictions.csv"));
    assert_eq!(predictions.lines().count(), 61);
    for key in ["pearson", "spearman", "rmse"] {
        assert!(metric(&out, key).is_finite());
    }
}
