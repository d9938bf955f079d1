use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn guwen(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guwen"))
        .current_dir(dir)
        .args(args)
        .env_remove("GUWEN_VOCAB")
        .env_remove("GUWEN_BLACKLIST")
        .env_remove("GUWEN_T2S")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(guwen(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        guwen(dir.path(), &["score", "--metric", "bleu4"])
            .status
            .code(),
        Some(1)
    );
    fs::write(dir.path().join("a.txt"), "x\n").unwrap();
    let bad_metric = guwen(
        dir.path(),
        &[
            "score", "--metric", "rouge", "--cand", "a.txt", "--ref", "a.txt",
        ],
    );
    assert_eq!(bad_metric.status.code(), Some(1));
    assert_eq!(guwen(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn identical_files_score_one_hundred() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.txt"), "床前明月光\n疑是地上霜\n").unwrap();
    let o = guwen(
        dir.path(),
        &[
            "score", "--metric", "bleu4", "--cand", "a.txt", "--ref", "a.txt", "--out", "r.toml",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "100.00");
    let report = fs::read_to_string(dir.path().join("r.toml")).unwrap();
    assert!(report.starts_with("metric = \"bleu4\"\n"));
    assert!(dir.path().join("r.toml.manifest.toml").exists());
    let acc = guwen(
        dir.path(),
        &[
            "score", "--metric", "accuracy", "--cand", "a.txt", "--ref", "a.txt",
        ],
    );
    assert_eq!(stdout(&acc).trim(), "100.00");
}

#[test]
fn mismatched_line_counts_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.txt"), "甲\n乙\n").unwrap();
    fs::write(dir.path().join("b.txt"), "甲\n").unwrap();
    let o = guwen(
        dir.path(),
        &[
            "score", "--metric", "bleu2", "--cand", "a.txt", "--ref", "b.txt",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_in_a_manifest_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("in.txt"), "甲乙\n").unwrap();
    fs::write(dir.path().join("vocab.txt"), "[PAD]\n").unwrap();
    fs::write(
        dir.path().join("run.toml"),
        "[[stage]]\ncommand = \"generate\"\n\
         args = [\"--ckpt\", \"absent.ckpt\", \"--vocab\", \"vocab.txt\", \"--input\", \"in.txt\", \"--out\", \"o.txt\"]\n",
    )
    .unwrap();
    let o = guwen(dir.path(), &["reproduce", "--manifest", "run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("o.txt").exists());
}

#[test]
fn corrupt_checkpoints_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.ckpt"), b"ANCHgarbage").unwrap();
    fs::write(dir.path().join("in.txt"), "甲\n").unwrap();
    fs::write(dir.path().join("vocab.txt"), "[PAD]\n").unwrap();
    let o = guwen(
        dir.path(),
        &[
            "generate",
            "--ckpt",
            "bad.ckpt",
            "--vocab",
            "vocab.txt",
            "--input",
            "in.txt",
            "--out",
            "o.txt",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn preprocess_builds_poem_pairs_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let poems = "静夜思\n床前明月光\n疑是地上霜\n举头望明月\n低头思故乡\n\n\
                 残篇\n只有一行\n\n\
                 春晓\n春眠不觉晓\n处处闻啼鸟\n夜来风雨声\n花落知多少\n";
    fs::write(dir.path().join("poems.txt"), poems).unwrap();
    let o = guwen(
        dir.path(),
        &[
            "preprocess",
            "--input",
            "poems.txt",
            "--kind",
            "poem",
            "--cpg",
            "2-2",
            "--split",
            "1,1,0",
            "--out",
            "cpg",
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let pairs = fs::read_to_string(dir.path().join("cpg/pairs.tsv")).unwrap();
    assert_eq!(pairs.lines().count(), 2);
    assert!(pairs.contains("床前明月光，疑是地上霜\t举头望明月，低头思故乡"));
    assert_eq!(
        fs::read_to_string(dir.path().join("cpg/train.src"))
            .unwrap()
            .lines()
            .count(),
        1
    );
    let manifest = guwen_cli::Manifest::parse(
        &fs::read_to_string(dir.path().join("cpg/manifest.toml")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest.stages[0].command, "preprocess");
    assert_eq!(manifest.resolved.unwrap()["skipped"].as_integer(), Some(1));

    let stats = guwen(dir.path(), &["stats", "--input", "poem=poems.txt"]);
    assert_eq!(stats.status.code(), Some(0));
    assert!(stdout(&stats).contains("poem"));
}

#[test]
fn unscored_sheets_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("src.txt"), "一\n二\n").unwrap();
    fs::write(dir.path().join("a.txt"), "甲\n乙\n").unwrap();
    fs::write(dir.path().join("b.txt"), "丙\n丁\n").unwrap();
    let o = guwen(
        dir.path(),
        &[
            "eval-sheets",
            "--task",
            "CCG",
            "--sources",
            "src.txt",
            "--system",
            "a=a.txt",
            "--system",
            "b=b.txt",
            "--items",
            "2",
            "--evaluators",
            "2",
            "--out",
            "sheets",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("sheets/CCG-e01.tsv").exists());
    let agg = guwen(
        dir.path(),
        &["aggregate", "--sheets", "sheets", "--key", "sheets/key.tsv"],
    );
    assert_eq!(agg.status.code(), Some(2));
}
