use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use selfprior_core::geometry::{load_mesh, load_point_cloud, write_xyz, Vec3};

const TINY: [&str; 12] = [
    "--layers=2",
    "--hidden=32",
    "--embed_dim=16",
    "--dict_size=4",
    "--heads=2",
    "--iterations=300",
    "--lr=3e-3",
    "--warmup=30",
    "--batch_off=128",
    "--batch_on=128",
    "--grid_resolution=32",
    "--level_set_resolution=32",
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_selfprior"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn sphere(n: usize, radius: f64) -> Vec<Vec3> {
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = i as f64 * 2.399963229728653;
            Vec3::new(r * phi.cos(), r * phi.sin(), z) * radius
        })
        .collect()
}

fn sphere_file(dir: &Path, n: usize) -> PathBuf {
    let path = dir.join("sphere.xyz");
    write_xyz(&path, &sphere(n, 0.5)).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_succeeds() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["reconstruct", "--help"])), 0);
}

#[test]
fn unknown_command_and_key_are_argument_errors() {
    assert_eq!(code(&run(&["explode"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let input = sphere_file(dir.path(), 100);
    let out = dir.path().join("out");
    let r = run(&["reconstruct", s(&input), "-o", s(&out), "--learning_rate=1"]);
    assert_eq!(code(&r), 2);
    let r = run(&["reconstruct", s(&input), "-o", s(&out), "--set", "learning_rate=1"]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("learning_rate"));
}

#[test]
fn missing_input_fails_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let r = run(&["reconstruct", s(&dir.path().join("absent.xyz")), "-o", s(&out)]);
    assert_eq!(code(&r), 2);
    assert!(!out.exists());
}

#[test]
fn stage_failure_keeps_earlier_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let input = sphere_file(dir.path(), 20);
    let out = dir.path().join("out");
    let r = run(&["reconstruct", s(&input), "-o", s(&out), "--desk"]);
    assert_eq!(code(&r), 3);
    assert!(String::from_utf8_lossy(&r.stderr).contains("queries"));
    assert!(out.join("config.cfg").exists());
    assert!(out.join("transform.txt").exists());
}

#[test]
fn degrade_modes() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.xyz");
    write_xyz(&input, &sphere(10_000, 0.5)).unwrap();
    let noisy = dir.path().join("noisy.xyz");
    assert_eq!(code(&run(&["degrade", s(&input), "-o", s(&noisy), "--noise", "0"])), 0);
    assert_eq!(load_point_cloud(&noisy, None).unwrap(), load_point_cloud(&input, None).unwrap());

    let half = dir.path().join("half.xyz");
    assert_eq!(code(&run(&["degrade", s(&input), "-o", s(&half), "--subsample", "0.5"])), 0);
    assert_eq!(load_point_cloud(&half, None).unwrap().len(), 5_000);

    let capped = dir.path().join("capped.xyz");
    let r = run(&["degrade", s(&input), "-o", s(&capped), "--cap", "30", "--axis", "0,0,1"]);
    assert_eq!(code(&r), 0);
    let kept = load_point_cloud(&capped, None).unwrap();
    assert!(kept.points.iter().all(|p| p.z < 0.5 * 30f64.to_radians().cos() + 1e-9));

    assert_eq!(code(&run(&["degrade", s(&input), "-o", s(&half), "--subsample", "1.5"])), 2);
    assert_eq!(code(&run(&["degrade", s(&input), "-o", s(&half)])), 2);
}

#[test]
fn reconstruct_is_reproducible_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let input = sphere_file(dir.path(), 2_000);
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let mut args = vec!["reconstruct", s(&input), "-o", s(&out), "--threads=1"];
        args.extend(TINY);
        let r = run(&args);
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
        outputs.push(out);
    }
    for file in [
        "config.cfg",
        "transform.txt",
        "field.ckpt",
        "field.ckpt.arch",
        "training_log.csv",
        "level_set.ply",
        "fill_report.csv",
        "fill_summary.txt",
        "oriented_cloud.ply",
        "mesh.ply",
        "mesh.obj",
        "manifest.txt",
    ] {
        let a = std::fs::read(outputs[0].join(file)).unwrap_or_else(|_| panic!("missing {file}"));
        let b = std::fs::read(outputs[1].join(file)).unwrap();
        assert!(a == b, "{file} differs between identical runs");
    }
    let mesh = load_mesh(outputs[0].join("mesh.ply")).unwrap();
    assert!(!mesh.faces.is_empty());
    let config = std::fs::read_to_string(outputs[0].join("config.cfg")).unwrap();
    assert!(config.contains("iterations = 300"));
    assert!(config.contains("threads = 1"));
}

#[test]
fn staged_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let input = sphere_file(dir.path(), 2_000);
    let work = dir.path().join("work");
    let mut args = vec!["train", s(&input), "-o", s(&work)];
    args.extend(TINY);
    let r = run(&args);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let ckpt = work.join("field.ckpt");
    let transform = work.join("transform.txt");

    let level = dir.path().join("level.obj");
    let r = run(&[
        "extract", "--checkpoint", s(&ckpt), "-o", s(&level), "--transform", s(&transform), "--resolution", "32",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(!load_mesh(&level).unwrap().faces.is_empty());

    let enhanced = dir.path().join("enhanced");
    let mut args = vec![
        "inpaint", s(&input), "--checkpoint", s(&ckpt), "--transform", s(&transform), "-o", s(&enhanced),
    ];
    args.extend(TINY);
    let r = run(&args);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let oriented = enhanced.join("oriented_cloud.ply");
    assert!(oriented.exists());

    let final_mesh = dir.path().join("final.ply");
    let r = run(&[
        "rimls", s(&oriented), "-o", s(&final_mesh), "--transform", s(&transform), "--grid_resolution=32",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let mesh = load_mesh(&final_mesh).unwrap();
    assert!(!mesh.faces.is_empty());

    let report = dir.path().join("report.csv");
    let r = run(&[
        "metrics",
        s(&final_mesh),
        s(&final_mesh),
        "-o",
        s(&report),
        "--metric_distance_samples=5000",
        "--metric_fscore_samples=2000",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let row: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let get = |k: &str| row[header.iter().position(|h| *h == k).unwrap()];
    assert_eq!(get("nc"), 1.0);
    // acos near 1 turns rounding in the unit normals into ~1e-6 degrees.
    assert!(get("rmse_o") < 1e-5);
    assert_eq!(get("seed"), 0.0);
    assert!(get("tau") > 0.0);
    assert_eq!(get("cd"), 0.0);
    assert_eq!(get("f1"), 1.0);
    // Self comparison: Hausdorff stays within twice the sample spacing.
    let area = (0..mesh.faces.len()).map(|f| mesh.face_area(f)).sum::<f64>();
    assert!(get("hd") < 2.0 * (area / 5000.0).sqrt(), "hd {}", get("hd"));
    assert!(String::from_utf8_lossy(&r.stdout).contains("Chamfer"));

    let probes = dir.path().join("probes.xyz");
    let pts = sphere(300, 0.5);
    write_xyz(&probes, &pts).unwrap();
    let map = dir.path().join("map.ply");
    let anchor = format!("{},{},{}", pts[7].x, pts[7].y, pts[7].z);
    let r = run(&["attn-map", "--checkpoint", s(&ckpt), "--anchor", &anchor, s(&probes), "-o", s(&map)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(&map).unwrap();
    let body: Vec<&str> = text.split("end_header\n").nth(1).unwrap().lines().collect();
    assert_eq!(body.len(), 300);
    let scalars: Vec<f64> = body
        .iter()
        .map(|l| l.split_whitespace().last().unwrap().parse().unwrap())
        .collect();
    assert!((scalars[7] - 1.0).abs() < 1e-12);
    assert!(scalars.iter().all(|v| (0.0..=1.0).contains(v)));
}
