use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lrlb::adapters::{AdapterSpec, AdapterWeights, Target};
use lrlb::checkpoint;
use lrlb::datasets::{load_jsonl, validate};
use lrlb::model::ModelConfig;

fn lrlb(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrlb"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &str| {
        [
            "gen",
            "hashhop",
            "--seed",
            "42",
            "--count",
            "300",
            "--hops",
            "3",
            "--chain-length",
            "6",
            "--out",
            out,
        ]
        .map(str::to_owned)
    };
    for out in ["a.jsonl", "b.jsonl"] {
        let a = args(out);
        let o = lrlb(
            &a.iter().map(String::as_str).collect::<Vec<_>>(),
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read(dir.path().join("a.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, fs::read(dir.path().join("b.jsonl")).unwrap());
    let o = lrlb(
        &[
            "gen",
            "hashhop",
            "--seed",
            "43",
            "--count",
            "300",
            "--hops",
            "3",
            "--chain-length",
            "6",
            "--out",
            "c.jsonl",
        ],
        dir.path(),
    );
    assert!(o.status.success());
    assert_ne!(a, fs::read(dir.path().join("c.jsonl")).unwrap());
}

#[test]
fn gen_rejects_hops_beyond_chain_length() {
    let dir = tempfile::tempdir().unwrap();
    let o = lrlb(
        &[
            "gen",
            "hashhop",
            "--seed",
            "1",
            "--count",
            "5",
            "--hops",
            "7",
            "--chain-length",
            "4",
        ],
        dir.path(),
    );
    assert!(!o.status.success());
    assert!(
        stderr(&o).contains("hops <= chain_length"),
        "{}",
        stderr(&o)
    );
    assert!(
        fs::read_dir(dir.path()).unwrap().next().is_none(),
        "nothing written on error"
    );
}

#[test]
fn gen_hashchain_output_validates() {
    let dir = tempfile::tempdir().unwrap();
    let o = lrlb(
        &[
            "gen",
            "hashchain",
            "--seed",
            "5",
            "--count",
            "200",
            "--chains",
            "3",
            "--max-length",
            "4",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let samples = load_jsonl(&dir.path().join("hashchain-seed5.jsonl")).unwrap();
    assert_eq!(samples.len(), 200);
    assert!(samples.iter().all(|s| validate(s).is_ok()));
}

#[test]
fn rank_reports_a_synthetic_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        ..Default::default()
    };
    let spec = AdapterSpec {
        targets: vec![Target::Wq, Target::Wv],
        ..AdapterSpec::lora(4)
    };
    let mut ad = AdapterWeights::<f32>::init(&spec, &cfg, 1).unwrap();
    // A = I and B with two unit entries on the diagonal: every delta has exactly
    // two equal non-zero singular values.
    for l in ad.layers.values_mut() {
        let (n, r) = l.a.dims2();
        let a = l.a.data_mut();
        a.fill(0.0);
        for i in 0..r.min(n) {
            a[i * r + i] = 1.0;
        }
        let m = l.b.dims2().1;
        let b = l.b.data_mut();
        b.fill(0.0);
        b[0] = 1.0;
        b[m + 1] = 1.0;
    }
    let ckpt = dir.path().join("synthetic.ckpt");
    checkpoint::save_adapter(&ckpt, &ad).unwrap();
    let o = lrlb(
        &["rank", "--checkpoint", "synthetic.ckpt", "--tau", "0.01"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("synthetic_rank.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&o.stdout), csv);
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 3);
    for row in &rows[..2] {
        assert_eq!(row[2].parse::<f64>().unwrap(), 2.0);
        assert_eq!(row[3], "2");
    }
    assert_eq!(rows[2][0], "MEAN");
    assert!(dir.path().join("synthetic_rank.svg").exists());
}

#[test]
fn rank_on_missing_file_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = lrlb(&["rank", "--checkpoint", "nope.ckpt"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nope.ckpt"));
}

#[test]
fn report_without_summaries_fails() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("empty")).unwrap();
    let o = lrlb(&["report", "--runs", "empty"], dir.path());
    assert!(!o.status.success());
    assert!(!stderr(&o).is_empty());
}

#[test]
fn unknown_recipe_and_bad_flags_fail() {
    let dir = tempfile::tempdir().unwrap();
    let o = lrlb(&["run-recipe", "cooking"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown recipe"));
    assert!(!lrlb(&["gen", "hashhop", "--seed", "x"], dir.path())
        .status
        .success());
}
