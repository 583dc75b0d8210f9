use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rfolive::rfolive::ConstraintSet;
use rfolive_cli::commands::{CheckReport, DimReport, RunResult, SweepSummary};
use rfolive_cli::exit;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rfolive"));
    c.env_remove("RFOLIVE_OUT_DIR");
    c
}

fn rfolive(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out-dir").arg(out).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn read<T: serde::de::DeserializeOwned + serde::Serialize>(path: PathBuf) -> T {
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let value: T = serde_json::from_str(&text).unwrap();
    let mut again = serde_json::to_string_pretty(&value).unwrap();
    again.push('\n');
    assert_eq!(again, text, "{} does not round-trip", path.display());
    value
}

#[test]
fn golden_fixtures() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let dir = tempfile::tempdir().unwrap();
    for (name, file) in [
        ("table3", "table3.json"),
        ("table4", "table4.json"),
        ("bandit:3", "bandit-3.json"),
        ("tree:3:1", "tree-3-1.json"),
        ("closed:0", "closed-0.json"),
    ] {
        let o = bin().args(["fixture", name, "--out-dir"]).arg(dir.path()).output().unwrap();
        assert_eq!(code(&o), exit::OK, "{}", String::from_utf8_lossy(&o.stderr));
        let got = std::fs::read(dir.path().join(file)).unwrap();
        let want = std::fs::read(golden.join(file)).unwrap();
        assert!(got == want, "{file} differs from its golden copy");
    }
    let o = bin().args(["fixture", "table9", "--out-dir"]).arg(dir.path()).output().unwrap();
    assert_eq!(code(&o), exit::CONFIG);
}

#[test]
fn table3_r1_is_solved() {
    let dir = tempfile::tempdir().unwrap();
    let o = rfolive(&["run", "--fixture", "table3", "--variant", "q", "--mode", "exact", "--reward", "R1"], dir.path());
    assert_eq!(code(&o), exit::OK, "{}", String::from_utf8_lossy(&o.stderr));
    let res: RunResult = read(dir.path().join("result.json"));
    assert_eq!(res.outputs.len(), 1);
    assert_eq!(res.outputs[0].actions[0], vec!["left".to_string()]);
    assert_eq!(res.outputs[0].output.suboptimality, 0.0);
    let cs = ConstraintSet::from_json(&std::fs::read_to_string(dir.path().join("constraints.json")).unwrap()).unwrap();
    assert_eq!(cs.records.len(), res.online.unwrap().constraints);
    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(csv.starts_with("t,V_opt,h_t,survivors_before,survivors_after,terminated\n"));
}

#[test]
fn offline_phase_needs_constraints() {
    let dir = tempfile::tempdir().unwrap();
    let o = rfolive(&["run", "--phase", "offline"], dir.path());
    assert_eq!(code(&o), exit::CONFIG);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    let missing = dir.path().join("nope.json");
    let o = rfolive(&["run", "--phase", "offline", "--constraints", missing.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), exit::CONFIG);
}

#[test]
fn split_phases_match_a_joint_run() {
    for variant in ["q", "v"] {
        let joint = tempfile::tempdir().unwrap();
        let split = tempfile::tempdir().unwrap();
        let base = ["--fixture", "table4", "--variant", variant];
        let o = rfolive(&[&["run"][..], &base].concat(), joint.path());
        assert_eq!(code(&o), exit::OK);
        let o = rfolive(&[&["run", "--phase", "online"][..], &base].concat(), split.path());
        assert_eq!(code(&o), exit::OK);
        assert!(!split.path().join("result.json").exists() || read::<RunResult>(split.path().join("result.json")).outputs.is_empty());
        let cpath = split.path().join("constraints.json");
        let off = split.path().join("off");
        let o = rfolive(&[&["run", "--phase", "offline", "--constraints", cpath.to_str().unwrap()][..], &base].concat(), &off);
        assert_eq!(code(&o), exit::OK, "{}", String::from_utf8_lossy(&o.stderr));
        let a: RunResult = read(joint.path().join("result.json"));
        let b: RunResult = read(off.join("result.json"));
        assert_eq!(a.outputs, b.outputs);
        assert!(a.outputs.iter().all(|o| o.output.suboptimality.abs() < 1e-12));
        assert_eq!(
            std::fs::read(joint.path().join("constraints.json")).unwrap(),
            std::fs::read(split.path().join("constraints.json")).unwrap()
        );
    }
}

#[test]
fn identical_seeds_give_identical_bytes() {
    let args = ["run", "--fixture", "table3", "--mode", "sampled", "--n-actv", "300", "--n-elim", "300", "--t-max", "20", "--seed", "11"];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(code(&rfolive(&args, a.path())), exit::OK);
    assert_eq!(code(&rfolive(&args, b.path())), exit::OK);
    for f in ["result.json", "trace.csv", "constraints.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn error_exit_codes_leave_no_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cap");
    let o = rfolive(&["run", "--fixture", "table3", "--t-max", "1"], &out);
    assert_eq!(code(&o), exit::CAP);
    assert!(!out.exists());

    let rewards = dir.path().join("rewards.json");
    std::fs::write(&rewards, r#"{"type": "finite", "tables": [[[[0, 0]], [[0.7], [0.7]]]], "names": ["R3"]}"#).unwrap();
    let out = dir.path().join("violation");
    let o = rfolive(&["run", "--fixture", "table3", "--rewards", rewards.to_str().unwrap()], &out);
    assert_eq!(code(&o), exit::ASSUMPTION, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());

    let o = rfolive(&["run", "--eps", "1.5"], &dir.path().join("bad"));
    assert_eq!(code(&o), exit::CONFIG);
    let o = rfolive(&["run", "--fixture", "nowhere"], &dir.path().join("bad"));
    assert_eq!(code(&o), exit::CONFIG);
    let o = rfolive(&["run", "--bogus-flag"], &dir.path().join("bad"));
    assert_eq!(code(&o), exit::CONFIG);
    assert!(!dir.path().join("bad").exists());
}

#[test]
fn config_file_and_env_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.json");
    std::fs::write(
        &config,
        r#"{"mdp": {"fixture": "table3"}, "tie_break": {"optimism": "lowest", "deviation": {"scripted": [0, 1]}},
            "tau_off": 0.02, "outputs": {"result": "r.json"}}"#,
    )
    .unwrap();
    let out = dir.path().join("env-out");
    let o = bin().args(["run", "--config", config.to_str().unwrap()]).env("RFOLIVE_OUT_DIR", &out).output().unwrap();
    assert_eq!(code(&o), exit::OK, "{}", String::from_utf8_lossy(&o.stderr));
    let res: RunResult = read(out.join("r.json"));
    let r2 = res.outputs.iter().find(|o| o.output.reward == "R2").unwrap();
    assert_eq!(r2.actions[0], vec!["right".to_string()]);
    assert!((r2.output.suboptimality - 0.1).abs() < 1e-12);
    assert_eq!(res.online.unwrap().levels, vec![0, 1]);
}

#[test]
fn help_documents_schemas_and_exit_codes() {
    let o = bin().arg("--help").output().unwrap();
    assert_eq!(code(&o), exit::OK);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("EXIT CODES") && text.contains("result.json") && text.contains("RFOLIVE_OUT_DIR"));
}

#[test]
fn check_reports() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&rfolive(&["check", "--fixture", "table3"], &dir.path().join("t3"))), exit::OK);
    let r: CheckReport = read(dir.path().join("t3/check.json"));
    assert!(r.realizability.unwrap().passed);
    let c = r.completeness.unwrap();
    assert!(!c.passed && c.has_violation("T0 F", 0, "f_bad"));

    assert_eq!(code(&rfolive(&["check", "--fixture", "table4"], &dir.path().join("t4"))), exit::OK);
    let r: CheckReport = read(dir.path().join("t4/check.json"));
    assert!(r.passed && r.realizability.is_some() && r.completeness.is_some());

    assert_eq!(code(&rfolive(&["check", "--fixture", "tree:4"], &dir.path().join("tree"))), exit::OK);
    let r: CheckReport = read(dir.path().join("tree/check.json"));
    assert_eq!(r.linear_completeness.len(), 8);
    assert!(r.linear_completeness.iter().all(|l| l.passed && l.max_residual <= 1e-9));
}

#[test]
fn dim_reports() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&rfolive(&["dim", "--fixture", "bandit:4", "--eps", "0.125"], &dir.path().join("b"))), exit::OK);
    let r: DimReport = read(dir.path().join("b/dim.json"));
    assert!(r.q.dimension >= 4);
    assert!(r.v.dimension < r.q.dimension);
    assert_eq!(r.rank[1].v.rank, 1);

    let class = dir.path().join("zero.json");
    std::fs::write(&class, r#"{"type": "finite", "tables": [[[[0, 0]]], [[[0], [0]]]]}"#).unwrap();
    let rewards = dir.path().join("r0.json");
    std::fs::write(&rewards, r#"{"type": "finite", "tables": [[[[0, 0]], [[0], [0]]]]}"#).unwrap();
    let o = rfolive(
        &["dim", "--fixture", "table3", "--class", class.to_str().unwrap(), "--rewards", rewards.to_str().unwrap()],
        &dir.path().join("s"),
    );
    assert_eq!(code(&o), exit::OK, "{}", String::from_utf8_lossy(&o.stderr));
    let r: DimReport = read(dir.path().join("s/dim.json"));
    assert_eq!((r.functions, r.q.dimension, r.v.dimension), (1, 0, 0));

    let o = rfolive(&["dim", "--fixture", "table3", "--search", "greedy"], &dir.path().join("t"));
    assert_eq!(code(&o), exit::OK, "{}", String::from_utf8_lossy(&o.stderr));
    let r: DimReport = read(dir.path().join("t/dim.json"));
    for l in &r.rank {
        assert!(l.q.rank <= l.target);
        assert!(l.q.factorization.as_ref().unwrap().max_error <= 1e-9);
    }
}

#[test]
fn sweep_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["sweep", "--fixture", "table4", "--variant", "v", "--seeds", "3,1,2"];
    assert_eq!(code(&rfolive(&args, a.path())), exit::OK);
    assert_eq!(code(&rfolive(&args, b.path())), exit::OK);
    let s: SweepSummary = read(a.path().join("sweep.json"));
    assert_eq!(s.runs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![3, 1, 2]);
    assert!(s.runs.iter().all(|r| r.exit_code == exit::OK));
    for seed in [1, 2, 3] {
        for f in ["result.json", "trace.csv", "constraints.json"] {
            let p = format!("seed-{seed}/{f}");
            assert_eq!(std::fs::read(a.path().join(&p)).unwrap(), std::fs::read(b.path().join(&p)).unwrap(), "{p}");
        }
    }
}
