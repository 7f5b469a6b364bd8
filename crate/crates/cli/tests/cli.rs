use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cstar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cstar")).args(args).output().expect("spawn cstar")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    fs::create_dir_all(dir).unwrap();
    let cfg = format!(
        "seed = 3\ndataset = synthetic\nclasses = 3\nchannels = 1\nimage_size = 4\nsamples = 48\ntest_samples = 24\n\
         stem_width = 4\nblock_widths = 8,8\nbatch_size = 16\npretrain_epochs = 2\nt1 = 2\nt2 = 1\n\
         train_iters = 2\neval_iters = 2\nmin_rank = 1\ntarget_ratio = 2\noutput_dir = {}\n{extra}",
        dir.join("out").display()
    );
    let p = dir.join("run.cfg");
    fs::write(&p, cfg).unwrap();
    p.to_str().unwrap().to_string()
}

fn strip_wall(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.rsplit_once(',').map_or(l, |(a, _)| a).to_string()).collect()
}

#[test]
fn pretrain_compress_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("out");

    let o = cstar(&["pretrain", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dense = out.join("pretrained.ckpt");
    assert!(dense.exists());

    let o = cstar(&["compress", "--config", &cfg, "--checkpoint", dense.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("compress.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    assert!(out.join("compress-phase1.ckpt").exists());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("compress-summary.json")).unwrap()).unwrap();
    assert!(summary["achieved_ratio"].as_f64().unwrap() >= 2.0);

    // factorized checkpoints cannot be compressed again
    let fact = out.join("compress.ckpt");
    let o = cstar(&["compress", "--config", &cfg, "--checkpoint", fact.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("already factorized"));
    assert_eq!(stderr(&o).trim().lines().count(), 1);

    let o = cstar(&["eval", "--config", &cfg, "--checkpoint", fact.to_str().unwrap(), "--iters", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("PGD-3"));

    // the rank table's compressed counts add up to the summary total
    let o = cstar(&["rank-report", "--checkpoint", fact.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let total = summary["compressed_params"].as_u64().unwrap() as usize;
    let plan = summary["plan"]["layers"].as_array().unwrap();
    let from_plan: usize = plan
        .iter()
        .map(|l| {
            let d = &l["dims"];
            let (o, i, k) = (d[0].as_u64().unwrap() as usize, d[1].as_u64().unwrap() as usize, d[2].as_u64().unwrap() as usize);
            let (r1, r2) = (l["r1"].as_u64().unwrap() as usize, l["r2"].as_u64().unwrap() as usize);
            o * r1 + i * r2 + r1 * r2 * k * k
        })
        .sum();
    assert_eq!(from_plan, total);
    for l in plan {
        let name = l["name"].as_str().unwrap();
        let ranks = format!("[{},{}]", l["r1"], l["r2"]);
        assert!(stdout(&o).lines().any(|line| line.starts_with(name) && line.contains(&ranks)), "{name} {ranks}");
    }

    // a second identical run produces the same metrics apart from wall time
    let o = cstar(&["compress", "--config", &cfg, "--checkpoint", dense.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(strip_wall(&fs::read_to_string(out.join("compress.csv")).unwrap()), strip_wall(&csv));

    let o = cstar(&["decompose", "--config", &cfg, "--checkpoint", dense.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let base = fs::read_to_string(out.join("decompose.csv")).unwrap();
    assert_eq!(base.lines().count(), 1 + 3);
    assert!(base.lines().skip(1).all(|l| l.starts_with("2,")));
}

#[test]
fn untrained_model_is_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg_text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("pretrain_epochs = 2", "pretrain_epochs = 0")
        .replace("classes = 3", "classes = 10")
        .replace("test_samples = 24", "test_samples = 1000");
    fs::write(&cfg, cfg_text).unwrap();
    let o = cstar(&["pretrain", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = dir.path().join("out/pretrained.ckpt");
    let o = cstar(&["eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let benign: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("benign"))
        .map(|v| v.trim().trim_end_matches('%').parse().unwrap())
        .unwrap();
    assert!((benign - 10.0).abs() <= 6.0, "benign {benign}");
}

#[test]
fn errors_are_single_line_and_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cases: Vec<(Vec<String>, &str)> = vec![
        (vec!["pretrain".into(), "--config".into(), write_config(&dir.path().join("a"), "bogus = 1\n")], "unknown key"),
        (vec!["compress".into(), "--config".into(), write_config(&dir.path().join("b"), ""), "--checkpoint".into(), "missing.ckpt".into()], "missing.ckpt"),
        (vec!["rank-report".into(), "--checkpoint".into(), "nowhere.ckpt".into()], "nowhere.ckpt"),
        (vec!["bench".into(), "--ratio".into(), "0.5".into(), "--runs".into(), "1".into(), "--cin".into(), "4".into(), "--cout".into(), "4".into(), "--spatial".into(), "4".into()], "ratio"),
    ];
    for (args, needle) in cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = cstar(&args);
        assert!(!o.status.success(), "{args:?} succeeded");
        let err = stderr(&o);
        assert_eq!(err.trim().lines().count(), 1, "{args:?}: {err}");
        assert!(err.contains(needle), "{args:?}: {err}");
    }
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg_text = fs::read_to_string(&cfg).unwrap().replace("pretrain_epochs = 2", "pretrain_epochs = 0");
    fs::write(&cfg, cfg_text).unwrap();
    assert!(cstar(&["pretrain", "--config", &cfg]).status.success());
    let ckpt = dir.path().join("out/pretrained.ckpt");
    let bytes = fs::read(&ckpt).unwrap();
    fs::write(&ckpt, &bytes[..bytes.len() - 5]).unwrap();
    let o = cstar(&["rank-report", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("at byte"), "{}", stderr(&o));
}

#[test]
fn infeasible_budget_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg_text = fs::read_to_string(&cfg).unwrap().replace("pretrain_epochs = 2", "pretrain_epochs = 0").replace("target_ratio = 2", "target_ratio = 1000");
    fs::write(&cfg, cfg_text).unwrap();
    assert!(cstar(&["pretrain", "--config", &cfg]).status.success());
    let ckpt = dir.path().join("out/pretrained.ckpt");
    let o = cstar(&["compress", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(!o.status.success());
    assert_eq!(stderr(&o).trim().lines().count(), 1);
}

#[test]
fn bench_and_selftest_run() {
    let o = cstar(&["bench", "--cin", "16", "--cout", "16", "--spatial", "8", "--runs", "3", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(r["speedup"].as_f64().unwrap() > 0.0);
    let o = cstar(&["selftest"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("pass")).count(), 6);
}
