use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[model]
z1_dim = 3
z2_dim = 3
seg_len = 4
hidden = 8

[train]
batch_size = 16
max_epochs = 2
patience = 2

[oracle]
speakers = 6
segments = 5
dev_speakers = 2
dev_segments = 3
test_speakers = 3
test_seqs_per_speaker = 2
test_segments = 3
z1_dim = 3
z2_dim = 3
frame_dim = 5
seg_len = 4
"#;

fn fhvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fhvae")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = fhvae(args);
    assert!(out.status.success(), "fhvae {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn fails_naming(args: &[&str], needle: &str) {
    let out = fhvae(args);
    assert!(!out.status.success(), "fhvae {args:?} should fail");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(needle), "stderr lacks `{needle}`: {err}");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesizes and trains a tiny model; returns (corpus dir, checkpoint).
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = dir.join("run.toml");
    fs::write(&cfg, SMALL).unwrap();
    let corpus = dir.join("corpus");
    let ckpt = dir.join("model.ckpt");
    ok(&["synth", "--config", s(&cfg), "--out", s(&corpus)]);
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&corpus.join("train")),
        "--dev",
        s(&corpus.join("dev")),
        "--out",
        s(&ckpt),
    ]);
    (corpus, ckpt)
}

fn metric(csv: &str, name: &str) -> f64 {
    csv.lines()
        .find_map(|l| l.strip_prefix(&format!("{name},")))
        .unwrap_or_else(|| panic!("no {name} in {csv}"))
        .parse()
        .unwrap()
}

#[test]
fn verify_reproduces_hand_computed_eer() {
    let dir = tempfile::tempdir().unwrap();
    let sv = dir.path().join("sv.tsv");
    let labels = dir.path().join("labels.tsv");
    // Targets score cos(a1,a2) ≈ 0.99 and cos(b1,b2) ≈ −0.29; non-targets
    // 0, 0.11, −0.96 and −0.98. At threshold 0 FAR = FRR = 1/2.
    fs::write(&sv, "a1\t1\t0\na2\t0.9\t0.1\nb1\t0\t1\nb2\t-1\t-0.3\n").unwrap();
    fs::write(&labels, "a1\tA\na2\tA\nb1\tB\nb2\tB\n").unwrap();
    let out = dir.path().join("eer.csv");
    let scores = dir.path().join("scores.tsv");
    ok(&["verify", "--svectors", s(&sv), "--labels", s(&labels), "--out", s(&out), "--scores", s(&scores)]);
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(metric(&csv, "eer"), 0.5);
    assert_eq!(metric(&csv, "trials"), 6.0);
    assert_eq!(metric(&csv, "target_trials"), 2.0);
    let lines = fs::read_to_string(&scores).unwrap();
    assert_eq!(lines.lines().count(), 6);
    assert!(lines.starts_with("a1\ta2\ttarget\t"));
}

#[test]
fn smoke_pipeline_and_inspection_commands() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, ckpt) = trained(dir.path());
    assert!(dir.path().join("model.log.csv").is_file());
    let test = corpus.join("test");
    let sv = dir.path().join("sv.tsv");
    ok(&["svector", "--ckpt", s(&ckpt), "--data", s(&test), "--out", s(&sv)]);
    assert_eq!(fs::read_to_string(&sv).unwrap().lines().count(), 6);
    let res = dir.path().join("res.csv");
    ok(&["verify", "--svectors", s(&sv), "--labels", s(&test.join("labels.tsv")), "--out", s(&res)]);
    let eer = metric(&fs::read_to_string(&res).unwrap(), "eer");
    assert!((0.0..=1.0).contains(&eer));

    let train_sv = dir.path().join("train_sv.tsv");
    ok(&["svector", "--ckpt", s(&ckpt), "--data", s(&corpus.join("train")), "--out", s(&train_sv)]);
    let lda_res = dir.path().join("lda.csv");
    ok(&[
        "verify",
        "--svectors",
        s(&sv),
        "--labels",
        s(&test.join("labels.tsv")),
        "--lda",
        "2",
        "--lda-svectors",
        s(&train_sv),
        "--lda-labels",
        s(&corpus.join("train").join("labels.tsv")),
        "--out",
        s(&lda_res),
    ]);
    assert_eq!(metric(&fs::read_to_string(&lda_res).unwrap(), "dim"), 2.0);

    let trav = dir.path().join("trav");
    ok(&[
        "traverse",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&test),
        "--segment",
        "te-ts001-01:2",
        "--which",
        "z1",
        "--dim",
        "2",
        "--points",
        "7",
        "--out",
        s(&trav),
    ]);
    let pgms = fs::read_dir(&trav)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(pgms, 7);
    fails_naming(
        &[
            "traverse",
            "--ckpt",
            s(&ckpt),
            "--data",
            s(&test),
            "--segment",
            "te-ts001-01:3",
            "--which",
            "z1",
            "--dim",
            "0",
            "--out",
            s(&trav),
        ],
        "--segment",
    );
    fails_naming(
        &[
            "traverse",
            "--ckpt",
            s(&ckpt),
            "--data",
            s(&test),
            "--segment",
            "te-ts001-01",
            "--which",
            "z2",
            "--dim",
            "3",
            "--out",
            s(&trav),
        ],
        "--dim",
    );

    let tf = dir.path().join("tf");
    ok(&[
        "transform",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&test),
        "--target",
        "te-ts000-00",
        "--reference",
        "te-ts002-01",
        "--out",
        s(&tf),
    ]);
    assert!(tf.join("transformed.fbnk").is_file());
    assert!(fs::read(tf.join("grid.pgm")).unwrap().starts_with(b"P5\n12 15\n255\n"));
    fails_naming(
        &[
            "transform",
            "--ckpt",
            s(&ckpt),
            "--data",
            s(&test),
            "--target",
            "nope",
            "--reference",
            "te-ts002-01",
            "--out",
            s(&tf),
        ],
        "--target",
    );

    let diag = dir.path().join("diag.csv");
    ok(&["diagnose", "--ckpt", s(&ckpt), "--data", s(&corpus.join("train")), "--out", s(&diag)]);
    let text = fs::read_to_string(&diag).unwrap();
    for key in ["variance_ratio_z1", "variance_ratio_z2", "segment_bound", "kl_z2", "sequence_accuracy"] {
        assert!(metric(&text, key).is_finite(), "{key}");
    }
    ok(&["diagnose", "--ckpt", s(&ckpt), "--data", s(&test), "--out", s(&diag)]);
    assert!(!fs::read_to_string(&diag).unwrap().contains("sequence_accuracy"));
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    trained(a.path());
    trained(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), tb.len());
    for ((pa, da), (pb, db)) in ta.iter().zip(&tb) {
        assert_eq!(pa, pb);
        assert!(da == db, "{} differs between runs", pa.display());
    }

    let c = tempfile::tempdir().unwrap();
    let cfg = c.path().join("run.toml");
    fs::write(&cfg, SMALL).unwrap();
    ok(&["--seed", "1", "synth", "--config", s(&cfg), "--out", s(&c.path().join("corpus"))]);
    assert_ne!(
        fs::read(a.path().join("corpus/train/000000.fbnk")).unwrap(),
        fs::read(c.path().join("corpus/train/000000.fbnk")).unwrap()
    );
}

#[test]
fn failures_name_the_offending_input() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    fails_naming(&["synth", "--config", s(&missing), "--out", s(dir.path())], "--config");
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\nz1dim = 3\n").unwrap();
    let out = fhvae(&["synth", "--config", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.toml") && err.contains("z1dim"), "{err}");
    fails_naming(
        &["svector", "--ckpt", s(&dir.path().join("none.ckpt")), "--data", s(dir.path()), "--out", "x"],
        "--ckpt",
    );
    fails_naming(&["--threads", "0", "verify", "--svectors", "a", "--labels", "b", "--out", "c"], "--threads");
    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    fails_naming(&["svector", "--ckpt", s(&garbage), "--data", s(dir.path()), "--out", "x"], "garbage.ckpt");
}

#[test]
fn extract_reads_wav_and_writes_a_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = String::new();
    for (i, freq) in [300.0, 1200.0].iter().enumerate() {
        let samples: Vec<f64> =
            (0..8000).map(|n| 0.3 * (2.0 * std::f64::consts::PI * freq * n as f64 / 16000.0).sin()).collect();
        let p = dir.path().join(format!("u{i}.wav"));
        fhvae::features::write_wav(&p, &samples, 16_000).unwrap();
        manifest.push_str(&format!("utt{i}\tu{i}.wav\tspk{i}\n"));
    }
    let m = dir.path().join("list.tsv");
    fs::write(&m, manifest).unwrap();
    let out = dir.path().join("feats");
    ok(&["extract", "--manifest", s(&m), "--kind", "fbank80", "--out", s(&out)]);
    let corpus = fhvae::features::read_corpus(&out).unwrap();
    assert_eq!(corpus.seqs.len(), 2);
    assert_eq!(corpus.seqs[0].frames.shape(), &[48, 80]);
    assert_eq!(fs::read_to_string(out.join("labels.tsv")).unwrap(), "utt0\tspk0\nutt1\tspk1\n");
    assert_eq!(fs::read_to_string(out.join("stats.csv")).unwrap().lines().count(), 81);

    fs::write(&m, "utt0\tmissing.wav\tspk0\n").unwrap();
    fails_naming(&["extract", "--manifest", s(&m), "--kind", "logspec200", "--out", s(&out)], "missing.wav");
}
