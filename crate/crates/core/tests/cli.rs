use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
seed = 4

[mesh]
domain = "disk(0,0,1)"
sizes = { fine = 0.3, coarse = 0.6 }
output = "fine"

[dataset]
operator = "area"
n_train = 6
n_test = 4
kl_modes = 10

[model]
arch = "input(fine) > mi(fine, coarse, 0.5) > mi(coarse, fine, 0.5)"

[train]
epochs = 3

[uq]
lambdas = [1.0, 2.0]
replicates = 3
h = 0.3

[oracle]
eps = [0.2, 0.1]
segments = [[-0.5, 0.0, 0.5, 0.0]]
"#;

fn minn(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_minn"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--threads", "2"])
        .output()
        .unwrap()
}

fn ok(args: &[&str], config: &Path, out: &Path) {
    let o = minn(args, config, out);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn setup(text: &str) -> (TempDir, std::path::PathBuf) {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, text).unwrap();
    (dir, cfg)
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn full_pipeline_round_trip() {
    let (dir, cfg) = setup(TINY);
    let out = dir.path().join("out");
    ok(&["mesh"], &cfg, &out);
    assert!(out.join("meshes/fine.mesh").exists() && out.join("meshes/coarse.mesh").exists());
    ok(&["dataset"], &cfg, &out);
    let inputs = snapshot(&out);
    ok(&["train"], &cfg, &out);
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("epoch,loss,train_rel_err\n"));
    assert_eq!(trace.lines().count(), 4);
    ok(&["eval"], &cfg, &out);
    let summary = fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("\"test_rel_err\"") && summary.contains("\"gen_gap\""));
    // producers' files are untouched by their consumers
    let after: Vec<_> = snapshot(&out).into_iter().filter(|(p, _)| inputs.iter().any(|(q, _)| q == p)).collect();
    assert_eq!(after, inputs);
}

#[test]
fn reruns_are_bitwise_identical() {
    let (dir, cfg) = setup(TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        for cmd in ["mesh", "dataset", "train", "eval", "uq", "oracle"] {
            ok(&[cmd], &cfg, out);
        }
    }
    for f in ["mesh_metrics.csv", "trace.csv", "summary.json", "sweep.csv", "oracle.csv", "model.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_flag_changes_data() {
    let (dir, cfg) = setup(TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["mesh"], &cfg, &a);
    ok(&["mesh"], &cfg, &b);
    ok(&["dataset"], &cfg, &a);
    ok(&["dataset", "--seed", "99"], &cfg, &b);
    assert_ne!(fs::read(a.join("data/train/inputs.bin")).unwrap(), fs::read(b.join("data/train/inputs.bin")).unwrap());
}

fn stderr_line(o: &Output) -> String {
    let s = String::from_utf8_lossy(&o.stderr).trim().to_string();
    assert_eq!(s.lines().count(), 1, "{s}");
    s
}

#[test]
fn nonpositive_h_is_a_config_error() {
    let (dir, cfg) = setup(&TINY.replace("fine = 0.3", "fine = 0.0"));
    let o = minn(&["mesh"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).starts_with("error stage=config kind=config"));
}

#[test]
fn unknown_key_is_a_config_error() {
    let (dir, cfg) = setup(&format!("{TINY}\n[extra]\nx = 1\n"));
    let o = minn(&["mesh"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).contains("kind=config"));
}

#[test]
fn missing_inputs_name_the_stage() {
    let (dir, cfg) = setup(TINY);
    let out = dir.path().join("out");
    let o = minn(&["dataset"], &cfg, &out);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr_line(&o).starts_with("error stage=dataset kind=missing_file"));
    ok(&["mesh"], &cfg, &out);
    let o = minn(&["eval"], &cfg, &out);
    assert!(stderr_line(&o).starts_with("error stage=eval kind=missing_file"));
    let o = minn(&["train"], &cfg, &out);
    assert!(stderr_line(&o).starts_with("error stage=train kind=missing_file"));
}

#[test]
fn missing_section_is_reported() {
    let (dir, cfg) = setup("seed = 1\n");
    let o = minn(&["uq"], &cfg, &dir.path().join("out"));
    assert!(stderr_line(&o).starts_with("error stage=uq kind=config"));
}

#[test]
fn bundled_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let text = fs::read_to_string(&p).unwrap();
        minn::cli::RunConfig::parse(&text).unwrap_or_else(|e| panic!("{}: {e:#}", p.display()));
    }
}
