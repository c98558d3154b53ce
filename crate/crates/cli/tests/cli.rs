use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use stylemix_core::checkpoint::Checkpoint;
use stylemix_core::image_io::decode_png;
use stylemix_core::style_space::StyleCode;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stylemix"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A generator, region model and briefly trained tree shared by the tests.
fn pipeline() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let seg = dir.join("seg.json");
        std::fs::write(&seg, r#"{"num_images": 4, "k": 6, "sample_points": 600, "seed": 0, "truncation_psi": 0.7, "softmin_tau": 1.0}"#).unwrap();
        ok(&["gen-init", "--seed", "0", "--out", p(&dir.join("gen"))]);
        ok(&["segment", "--generator", p(&dir.join("gen")), "--config", p(&seg), "--out", p(&dir.join("seg"))]);
        ok(&[
            "train",
            "--generator",
            p(&dir.join("seg")),
            "--steps",
            "2,2,2",
            "--seed",
            "5",
            "--log",
            p(&dir.join("train.jsonl")),
            "--out",
            p(&dir.join("tree")),
        ]);
        std::fs::write(
            dir.join("req.json"),
            r#"{"regions": {"disc": {"seed": 1}, "stripe": {"seed": 2}, "background": {"seed": 3}}, "global": {"seed": 4}}"#,
        )
        .unwrap();
        std::fs::write(dir.join("base.json"), r#"{"seed": 9}"#).unwrap();
        let d: Vec<f64> = (0..40).map(|i| if i % 3 == 0 { 0.5 } else { -0.25 }).collect();
        std::fs::write(dir.join("dir.json"), serde_json::to_string(&d).unwrap()).unwrap();
        dir
    })
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["compose", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = run(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_model_source_is_a_usage_error() {
    let dir = pipeline();
    let out = run(&["compose", "--request", p(&dir.join("req.json")), "--out", "x.png"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["segment", "--generator", p(&dir.path().join("absent")), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.json"));

    let tree = pipeline().join("tree");
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"regions": {"sky": {"seed": 1}}}"#).unwrap();
    let out = run(&["compose", "--tree", p(&tree), "--request", p(&bad), "--out", p(&dir.path().join("o.png"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("regions.sky"));
}

#[test]
fn pipeline_checkpoints_are_complete() {
    let dir = pipeline();
    let c = Checkpoint::load(&dir.join("tree")).unwrap();
    let tree = c.require_tree().unwrap();
    assert_eq!(tree.training_order, vec!["root", "bg-split"]);
    assert!(c.region_model.is_some());
    let gen = Checkpoint::load(&dir.join("gen")).unwrap();
    assert_eq!(gen.generator, c.generator);
    let log = std::fs::read_to_string(dir.join("train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 12);
}

#[test]
fn compose_writes_png_and_code() {
    let dir = pipeline();
    let out = tempfile::tempdir().unwrap();
    let args = |png: &Path, code: &Path| {
        ok(&[
            "compose",
            "--tree",
            p(&dir.join("tree")),
            "--request",
            p(&dir.join("req.json")),
            "--out",
            p(png),
            "--code-out",
            p(code),
        ]);
    };
    let (a, ac) = (out.path().join("a.png"), out.path().join("a.json"));
    let (b, bc) = (out.path().join("b.png"), out.path().join("b.json"));
    args(&a, &ac);
    args(&b, &bc);
    let png = std::fs::read(&a).unwrap();
    assert_eq!(decode_png(&png).unwrap().0, 64);
    assert_eq!(png, std::fs::read(&b).unwrap());
    let code: StyleCode = serde_json::from_str(&std::fs::read_to_string(&ac).unwrap()).unwrap();
    assert_eq!(code.layers.len(), 6);
}

#[test]
fn edit_matches_route_edit() {
    let dir = pipeline();
    let out = tempfile::tempdir().unwrap();
    let code = out.path().join("s.json");
    ok(&[
        "edit",
        "--tree",
        p(&dir.join("tree")),
        "--base",
        p(&dir.join("base.json")),
        "--direction",
        p(&dir.join("dir.json")),
        "--strength",
        "2.0",
        "--regions",
        "stripe",
        "--out",
        p(&out.path().join("e.png")),
        "--code-out",
        p(&code),
    ]);
    assert!(out.path().join("e.png").exists());
    let got: StyleCode = serde_json::from_str(&std::fs::read_to_string(&code).unwrap()).unwrap();

    let c = Checkpoint::load(&dir.join("tree")).unwrap();
    let g = c.require_generator().unwrap();
    let base = stylemix_core::api::sample_code(g, 9, 0.7).unwrap();
    let d: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(dir.join("dir.json")).unwrap()).unwrap();
    let edited = StyleCode::unflatten(
        &base.flatten().iter().zip(&d).map(|(s, d)| s + 2.0 * d).collect::<Vec<_>>(),
        g.layout(),
    )
    .unwrap();
    let targets = ["stripe".to_string()].into();
    let (want, _) = c.require_tree().unwrap().route_edit(g, &base, &edited, &targets).unwrap();
    assert_eq!(got, want);

    let out2 = run(&[
        "edit",
        "--tree",
        p(&dir.join("tree")),
        "--base",
        p(&dir.join("base.json")),
        "--direction",
        p(&dir.join("dir.json")),
        "--strength",
        "1",
        "--regions",
        "moon",
        "--out",
        p(&out.path().join("f.png")),
    ]);
    assert_eq!(out2.status.code(), Some(2));
}

#[test]
fn eval_writes_metrics_and_heatmaps() {
    let dir = pipeline();
    let out = tempfile::tempdir().unwrap();
    ok(&["eval", "--tree", p(&dir.join("tree")), "--n", "3", "--out", p(out.path())]);
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["slots"].as_array().unwrap().len(), 3);
    for r in ["disc", "stripe", "background"] {
        let png = std::fs::read(out.path().join(format!("heatmap_{r}.png"))).unwrap();
        assert_eq!(decode_png(&png).unwrap().2, 1);
    }
}

#[test]
fn training_is_reproducible() {
    let dir = pipeline();
    let out = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        ok(&[
            "train",
            "--generator",
            p(&dir.join("seg")),
            "--steps",
            "2,2,2",
            "--seed",
            "5",
            "--log",
            p(&out.path().join(format!("{name}.jsonl"))),
            "--out",
            p(&out.path().join(name)),
        ]);
    }
    let read = |f: &str| std::fs::read(out.path().join(f)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_eq!(read("a.jsonl"), std::fs::read(dir.join("train.jsonl")).unwrap());
    assert_eq!(read("a/manifest.json"), read("b/manifest.json"));
    assert_eq!(read("a/blobs/blenders/root/fuse/w0.bin"), read("b/blobs/blenders/root/fuse/w0.bin"));
}

#[test]
fn train_single_node_keeps_the_root() {
    let dir = pipeline();
    let out = tempfile::tempdir().unwrap();
    ok(&[
        "train",
        "--tree",
        p(&dir.join("tree")),
        "--node",
        "bg-split",
        "--steps",
        "1,1,1",
        "--out",
        p(out.path()),
    ]);
    let before = Checkpoint::load(&dir.join("tree")).unwrap();
    let after = Checkpoint::load(out.path()).unwrap();
    let (b, a) = (before.require_tree().unwrap(), after.require_tree().unwrap());
    assert_eq!(a.nodes["root"], b.nodes["root"]);
    assert_ne!(a.nodes["bg-split"], b.nodes["bg-split"]);
    assert_eq!(run(&["train", "--tree", p(&dir.join("tree")), "--node", "trunk", "--out", p(out.path())]).status.code(), Some(1));
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn compose_through_the_service_matches_local() {
    let dir = pipeline();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let _server = Server(
        bin()
            .args(["serve", "--checkpoint", p(&dir.join("tree")), "--port", &port.to_string()])
            .stderr(std::process::Stdio::null())
            .spawn()
            .unwrap(),
    );
    let url = format!("http://127.0.0.1:{port}");
    let start = Instant::now();
    loop {
        let out = run(&["sample", "--server", &url, "--seed", "1"]);
        if out.status.success() {
            break;
        }
        assert!(start.elapsed() < Duration::from_secs(60), "service did not come up");
        std::thread::sleep(Duration::from_millis(100));
    }
    let out = tempfile::tempdir().unwrap();
    let (req, tree) = (dir.join("req.json"), dir.join("tree"));
    for (name, source) in [("local", ["--tree", p(&tree)]), ("remote", ["--server", url.as_str()])] {
        let png = out.path().join(format!("{name}.png"));
        let masks = out.path().join(format!("{name}-masks.json"));
        let mut args = vec!["compose", "--request", p(&req), "--out", p(&png), "--masks-out", p(&masks)];
        args.extend(source);
        ok(&args);
    }
    let read = |f: &str| std::fs::read(out.path().join(f)).unwrap();
    assert_eq!(read("local.png"), read("remote.png"));
    assert_eq!(read("local-masks.json"), read("remote-masks.json"));
    let _: std::collections::BTreeMap<String, stylemix_core::api::RleMask> =
        serde_json::from_slice(&read("local-masks.json")).unwrap();
}
