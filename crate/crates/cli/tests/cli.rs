use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "d_model=16",
    "--set",
    "heads=2",
    "--set",
    "layers=2",
    "--set",
    "mlp_hidden=16",
    "--set",
    "batch_size=4",
    "--set",
    "mid_steps=6",
    "--set",
    "post_steps=3",
    "--set",
    "distill_steps=5",
];

fn frappe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frappe"))
        .args(args)
        .env("FRAPPE_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = frappe(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, robot: &str, ego: &str) {
    ok(&[
        "gen-data",
        "--robot",
        robot,
        "--ego-task",
        ego,
        "--ego-web",
        "2",
        "--seed",
        "3",
        "--out",
        s(dir),
    ]);
}

fn train(data: &Path, out: &Path, cmd: &str, extra: &[&str]) -> String {
    let mut args = vec![cmd, "--data", s(data), "--out", s(out)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn gen_data_echoes_counts_and_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let out = ok(&[
        "gen-data",
        "--robot",
        "0",
        "--ego-task",
        "3",
        "--ego-web",
        "4",
        "--seed",
        "9",
        "--out",
        s(&a),
    ]);
    assert!(out.contains("robot.ftrj 0 episodes"), "{out}");
    assert!(out.contains(" 3 episodes") && out.contains(" 4 episodes"));
    ok(&[
        "gen-data",
        "--robot",
        "0",
        "--ego-task",
        "3",
        "--ego-web",
        "4",
        "--seed",
        "9",
        "--out",
        s(&b),
    ]);
    for f in fs::read_dir(&a).unwrap() {
        let name = f.unwrap().file_name();
        if name != "manifest.json" {
            assert_eq!(
                fs::read(a.join(&name)).unwrap(),
                fs::read(b.join(&name)).unwrap()
            );
        }
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["seed"], 9);
    assert!(manifest["finished"].is_u64());
}

#[test]
fn unwritable_output_is_runtime_error() {
    let root = tempfile::tempdir().unwrap();
    let file = root.path().join("file");
    fs::write(&file, b"x").unwrap();
    let out = frappe(&["gen-data", "--robot", "1", "--out", s(&file.join("sub"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("file"));
}

#[test]
fn usage_errors_exit_two() {
    let root = tempfile::tempdir().unwrap();
    let out = frappe(&[
        "post-train",
        "--data",
        s(root.path()),
        "--out",
        s(root.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--init"));
    let data = root.path().join("data");
    gen(&data, "1", "0");
    let out = frappe(&[
        "mid-train",
        "--data",
        s(&data),
        "--out",
        s(root.path()),
        "--set",
        "nonsense=1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = frappe(&["eval", "--checkpoint", "x.frap", "--steps", "4"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn two_stage_pipeline_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    gen(&data, "3", "2");
    let (mid, mid2, post) = (
        root.path().join("mid"),
        root.path().join("mid2"),
        root.path().join("post"),
    );
    let teach = root.path().join("teacher");
    let out = train(&data, &teach, "distill", &[]);
    assert!(out.contains("distilled teacher"));
    let teacher = teach.join("distilled.frap");
    let h1 = train(&data, &mid, "mid-train", &["--teacher", s(&teacher)]);
    let h2 = train(&data, &mid2, "mid-train", &["--teacher", s(&teacher)]);
    assert_eq!(h1, h2);
    assert_eq!(
        fs::read(mid.join("mid.frap")).unwrap(),
        fs::read(mid2.join("mid.frap")).unwrap()
    );
    let csv = fs::read_to_string(mid.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(mid.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["mid_steps"], "6");

    let ckpt = mid.join("mid.frap");
    let out = train(&data, &post, "post-train", &["--init", s(&ckpt)]);
    assert!(out.contains("trainable"));
    let post_ckpt = post.join("post.frap");
    let listing = ok(&["inspect", s(&post_ckpt)]);
    assert!(listing.contains("expert.2.prefix [4, 16]"), "{listing}");
    assert!(listing.contains("router.1.w"));

    let eval = |ckpt: &Path, steps: &str| {
        ok(&[
            "eval",
            "--checkpoint",
            s(ckpt),
            "--episodes",
            "3",
            "--steps",
            steps,
            "--seed",
            "7",
            "--out",
            s(&post),
        ])
    };
    let a = eval(&post_ckpt, "5");
    assert_eq!(a, eval(&post_ckpt, "5"));
    assert!(a.contains("experts true"));
    assert!(eval(&post_ckpt, "3").contains("steps 3"));
    assert!(eval(&ckpt, "5").contains("experts false"));
    assert_eq!(
        fs::read_to_string(post.join("eval.csv"))
            .unwrap()
            .lines()
            .count(),
        5
    );

    let out = frappe(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--episodes",
        "1",
        "--experts",
        "on",
    ]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("expert"));
}

#[test]
fn gradcheck_exit_codes() {
    let out = ok(&["gradcheck", "--scope", "ops"]);
    assert!(out.lines().count() > 10 && !out.contains("FAIL"));
    let out = ok(&["gradcheck", "--scope", "pipeline", "--seed", "2"]);
    assert!(out.contains("mid") && out.contains("post"));
    let out = frappe(&["gradcheck", "--scope", "ops", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("faulty_square"));
}
