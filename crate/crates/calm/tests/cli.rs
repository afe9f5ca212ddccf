use std::path::Path;
use std::process::{Command, Output};

use calm::formats::{load_corpus, StatsFile};

fn calm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = calm(args);
    assert!(
        out.status.success(),
        "calm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let text = format!(
        "output_dir = \"{}\"\nseed = 11\n[source]\nkind = \"gaussian-ar\"\ncount = 32\nseq_len = 12\n{extra}",
        dir.join("run").display()
    );
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const TRAIN: &str = "[train]\nbatch_size = 2\ntotal_steps = 100\ncheckpoint_every = 50\nlog_every = 10\n[sample]\nmax_frames = 8\nprompt_frames = 3\n";

#[test]
fn make_corpus_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "");
    ok(&["make-corpus", "--config", &cfg]);
    let a = std::fs::read(d.path().join("run/corpus.bin")).unwrap();
    ok(&["make-corpus", "--config", &cfg]);
    let b = std::fs::read(d.path().join("run/corpus.bin")).unwrap();
    assert_eq!(a, b);
    assert!(d.path().join("run/make-corpus.manifest.json").exists());
    assert!(d.path().join("run/config.toml").exists());
}

#[test]
fn empty_corpus_has_header_only() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("count = 32", "count = 0");
    std::fs::write(&cfg, text).unwrap();
    ok(&["make-corpus", "--config", &cfg]);
    let c = load_corpus(&d.path().join("run/corpus.bin")).unwrap();
    assert!(c.sequences.is_empty());
    assert_eq!(c.channels, 4);
}

#[test]
fn stats_match_ar_stationary_variance() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("count = 32", "count = 10000")
        .replace("seq_len = 12", "seq_len = 64");
    std::fs::write(&cfg, text).unwrap();
    ok(&["make-corpus", "--config", &cfg]);
    let s = StatsFile::load(&d.path().join("run/stats.json")).unwrap();
    for v in &s.variance {
        assert!((v - 1.0 / 0.19).abs() < 0.1, "variance {v}");
    }
}

#[test]
fn unknown_key_exits_with_config_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "[train]\nnot_a_key = 1\n");
    let out = calm(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.path().join("run/model.ckpt").exists());
}

#[test]
fn missing_checkpoint_exits_with_io_error() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("none.ckpt");
    let out = calm(&[
        "generate",
        "--checkpoint",
        missing.to_str().unwrap(),
        "--out",
        "x.bin",
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn resumed_training_is_bit_identical() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), TRAIN);
    ok(&["make-corpus", "--config", &cfg]);
    ok(&["train", "--config", &cfg]);
    let run = d.path().join("run");
    let straight = std::fs::read(run.join("model.ckpt")).unwrap();
    let mid = std::fs::read(run.join("checkpoints/step-00000050.ckpt")).unwrap();
    std::fs::remove_dir_all(run.join("checkpoints")).unwrap();
    std::fs::remove_file(run.join("model.ckpt")).unwrap();

    ok(&["train", "--config", &cfg, "--until", "50"]);
    assert_eq!(std::fs::read(run.join("model.ckpt")).unwrap(), mid);
    let ck = run.join("model.ckpt");
    ok(&["train", "--config", &cfg, "--resume", ck.to_str().unwrap()]);
    assert_eq!(std::fs::read(run.join("model.ckpt")).unwrap(), straight);
    let log = std::fs::read_to_string(run.join("train_log_00000100.csv")).unwrap();
    assert!(log.starts_with("step,loss,lr,grad_norm,skipped\n"));
}

#[test]
fn generate_writes_sequences_and_trace() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        &TRAIN.replace("total_steps = 100", "total_steps = 5"),
    );
    ok(&["make-corpus", "--config", &cfg]);
    ok(&["train", "--config", &cfg]);
    let run = d.path().join("run");
    let ck = run.join("model.ckpt");
    let corpus = run.join("corpus.bin");
    let gen = |name: &str, seed: &str| {
        let out = run.join(name);
        ok(&[
            "generate",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--head",
            "consistency",
            "--steps",
            "2",
            "--temperature",
            "0.8",
            "--seed",
            seed,
            "--prompt",
            corpus.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--trace",
            run.join("trace.csv").to_str().unwrap(),
        ]);
        std::fs::read(out).unwrap()
    };
    let a = gen("a.bin", "4");
    assert_eq!(a, gen("b.bin", "4"));
    assert_ne!(a, gen("c.bin", "5"));
    let c = load_corpus(&run.join("a.bin")).unwrap();
    assert_eq!(c.sequences.len(), 32);
    assert!(c.sequences.iter().all(|s| s.len() == 5));
    let trace = std::fs::read_to_string(run.join("trace.csv")).unwrap();
    assert!(trace.starts_with("sequence,frame,stage,microseconds\n"));
    assert_eq!(trace.lines().count(), 1 + 32 * 5 * 3);

    let wrong = calm(&[
        "generate",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--head",
        "rq",
        "--out",
        "x.bin",
    ]);
    assert_eq!(wrong.status.code(), Some(2));
}

#[test]
fn report_orders_rows_and_names_missing_columns() {
    let d = tempfile::tempdir().unwrap();
    let header = "system,head,steps,overall_speedup,sampler_speedup,pct_time_in_sampler,rtf,fad\n";
    let a = d.path().join("a.csv");
    std::fs::write(
        &a,
        format!(
            "{header}flow,trigflow,100,0.2,0.1,80.0,5.0,\ncm4,consistency,4,1.5,3.0,20.0,40.0,\n"
        ),
    )
    .unwrap();
    let b = d.path().join("b.csv");
    std::fs::write(
        &b,
        format!("{header}rq,rq,1,1.0,1.0,50.0,30.0,1.5\ncm1,consistency,1,2.0,8.0,6.6,60.0,\n"),
    )
    .unwrap();
    let table = ok(&["report", a.to_str().unwrap(), b.to_str().unwrap()]);
    let order: Vec<&str> = table
        .lines()
        .skip(2)
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    assert_eq!(order, ["rq", "cm1", "cm4", "flow"]);

    let bad = d.path().join("bad.csv");
    std::fs::write(
        &bad,
        "system,head,steps,overall_speedup,sampler_speedup,rtf,fad\nx,rq,1,1,1,1,\n",
    )
    .unwrap();
    let out = calm(&["report", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pct_time_in_sampler"));
}

#[test]
fn bench_of_a_system_against_itself_has_unit_speedups() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        &TRAIN.replace("total_steps = 100", "total_steps = 2"),
    );
    ok(&["make-corpus", "--config", &cfg]);
    ok(&["train", "--config", &cfg]);
    let run = d.path().join("run");
    let sys = format!("a={}", run.join("model.ckpt").display());
    ok(&[
        "bench",
        "--system",
        &sys,
        "--runs",
        "2",
        "--warmups",
        "0",
        "--out-dir",
        run.to_str().unwrap(),
    ]);
    let csv = std::fs::read_to_string(run.join("bench.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[3].parse::<f64>().unwrap(), 1.0);
    assert_eq!(row[4].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn elo_fit_reads_records_and_prints_table() {
    let d = tempfile::tempdir().unwrap();
    let rec = d.path().join("r.csv");
    let mut text = String::from("system_a,system_b,outcome\n");
    for i in 0..60 {
        let o = if i % 3 == 0 { "b_wins" } else { "a_wins" };
        text.push_str(&format!("strong,weak,{o}\n"));
    }
    text.push_str("weak,strong,tie\n");
    std::fs::write(&rec, text).unwrap();
    let out = ok(&["elo", "fit", rec.to_str().unwrap()]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("id,S,E,ci_low,ci_high"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert!(rows[0][1] > rows[1][1]);
    for r in &rows {
        assert!(r[2] <= r[1] && r[1] <= r[3]);
    }
    std::fs::write(&rec, "a,b,maybe\n").unwrap();
    assert_eq!(
        calm(&["elo", "fit", rec.to_str().unwrap()]).status.code(),
        Some(2)
    );
}

#[test]
fn eval_writes_json_and_csv() {
    let d = tempfile::tempdir().unwrap();
    let extra = "[train]\nbatch_size = 2\ntotal_steps = 3\n[sample]\nmax_frames = 8\n[eval]\ngenerations = 12\nembed_dim = 4\noracle_histories = 1\noracle_samples = 100\nbootstrap = 5\n";
    let cfg = write_config(d.path(), extra);
    ok(&["make-corpus", "--config", &cfg]);
    ok(&["train", "--config", &cfg]);
    let run = d.path().join("run");
    let args = [
        "eval",
        "--checkpoint",
        run.join("model.ckpt").to_str().unwrap(),
        "--reference",
        run.join("corpus.bin").to_str().unwrap(),
        "--out-dir",
        run.to_str().unwrap(),
    ]
    .map(String::from);
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&argv);
    let first = std::fs::read_to_string(run.join("eval.csv")).unwrap();
    ok(&argv);
    assert_eq!(
        std::fs::read_to_string(run.join("eval.csv")).unwrap(),
        first
    );
    assert!(first.starts_with("generations,fad,"));
}
