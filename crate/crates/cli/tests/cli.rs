use std::path::Path;
use std::process::{Command, Output};

use nalgebra::Vector3;
use tempfile::TempDir;

use slamcert::sim::{generate, SimConfig};
use slamcert::so3;
use slamcert_cli::io::{IdMap, ProblemFile};

fn slamcert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slamcert"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn json(p: &str) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn simulate(dir: &TempDir, extra: &[&str]) -> (String, String) {
    let (p, gt) = (path(dir, "problem.txt"), path(dir, "gt.txt"));
    let mut args = vec!["simulate", "-o", &p, "--gt", &gt];
    args.extend_from_slice(extra);
    let out = slamcert(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (p, gt)
}

#[test]
fn simulate_round_trips_to_generated_graph() {
    let dir = TempDir::new().unwrap();
    let (p, _) = simulate(&dir, &["--seed", "5"]);
    let text = std::fs::read_to_string(&p).unwrap();
    let file = ProblemFile::parse(&text).unwrap();
    assert_eq!(file.to_text(), text);

    let (g, _) = generate(&SimConfig { seed: 5, ..SimConfig::default() }).unwrap();
    let (h, _, ids) = file.to_problem().unwrap();
    assert_eq!(ids, IdMap::sequential(g.n_poses(), g.n_landmarks()));
    assert_eq!(g.landmark_edges(), h.landmark_edges());
    assert_eq!(g.pose_edges().len(), h.pose_edges().len());
    for (a, b) in g.pose_edges().iter().zip(h.pose_edges()) {
        assert_eq!((a.from, a.to, a.w_r, a.w_t), (b.from, b.to, b.w_r, b.w_t));
        assert_eq!(a.rel_translation, b.rel_translation);
        assert!((a.rel_rotation - b.rel_rotation).norm() < 1e-12);
    }
}

#[test]
fn simulate_is_reproducible_from_seed() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let (pa, _) = simulate(&a, &["--seed", "9", "--poses", "10", "--landmarks", "40"]);
    let (pb, _) = simulate(&b, &["--seed", "9", "--poses", "10", "--landmarks", "40"]);
    assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
}

#[test]
fn default_edge_counts_match_sensing_geometry() {
    let dir = TempDir::new().unwrap();
    let (p, gt) = simulate(&dir, &["--seed", "2"]);
    let problem = ProblemFile::read(Path::new(&p)).unwrap();
    let truth = ProblemFile::read(Path::new(&gt)).unwrap();
    assert_eq!(truth.poses.len(), 30);
    assert_eq!(truth.landmarks.len(), 200);
    let mut in_range = 0;
    for v in &truth.poses {
        for m in &truth.landmarks {
            if (Vector3::from(m.m) - Vector3::from(v.t)).norm() <= 4.5 {
                in_range += 1;
            }
        }
    }
    // α = 1 keeps every visible pair: one chain plus the closing edge.
    assert_eq!(problem.landmark_edges.len(), in_range);
    assert_eq!(problem.pose_edges.len(), 30);
    assert!(in_range >= 200);
}

#[test]
fn zero_noise_solve_from_ground_truth() {
    let dir = TempDir::new().unwrap();
    let (p, gt) = simulate(&dir, &["--trans-noise", "0", "--rot-noise-deg", "0", "--seed", "3"]);
    let (sol, rep) = (path(&dir, "sol.txt"), path(&dir, "r.json"));
    let out = slamcert(&["solve", &p, "--init", "file", "--init-file", &gt, "-o", &sol, "--report", &rep]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&rep);
    assert_eq!(r["converged"], true);
    assert!(r["final_cost"].as_f64().unwrap() <= 1e-12);
    assert!(r.get("pass").is_none());
    for k in ["assembly_s", "solve_s", "certify_s"] {
        assert!(r["timings"][k].as_f64().unwrap() >= 0.0);
    }
    assert_eq!(r["variant"], "SLAM");
}

#[test]
fn random_starts_reach_different_minima() {
    let dir = TempDir::new().unwrap();
    let (p, _) = simulate(&dir, &["--seed", "1", "--poses", "15", "--landmarks", "100"]);
    let mut costs = Vec::new();
    for seed in 0..8 {
        let (sol, rep) = (path(&dir, "sol.txt"), path(&dir, "r.json"));
        let s = seed.to_string();
        let out = slamcert(&["solve", &p, "--init", "random", "--seed", &s, "-o", &sol, "--report", &rep]);
        assert!(out.status.success());
        let r = json(&rep);
        assert_eq!(r["seed"], seed);
        costs.push(r["final_cost"].as_f64().unwrap());
    }
    let lo = costs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = costs.iter().cloned().fold(0.0, f64::max);
    assert!(hi > lo * (1.0 + 1e-6), "{costs:?}");
}

#[test]
fn certify_exit_codes() {
    let dir = TempDir::new().unwrap();
    let (p, gt) = simulate(
        &dir,
        &["--trans-noise", "0", "--rot-noise-deg", "0", "--seed", "4", "--poses", "12", "--landmarks", "80"],
    );
    let rep = path(&dir, "r.json");
    let out = slamcert(&["certify", &p, &gt, "--threshold", "-1e-8", "--report", &rep]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&rep);
    assert_eq!(r["pass"], true);
    assert_eq!(r["corank_estimate"], 3);

    // Rotate one pose by 90 degrees.
    let mut bad = ProblemFile::read(Path::new(&gt)).unwrap();
    let r5 = slamcert_cli::io::quat_to_matrix(&bad.poses[5].q) * so3::exp(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
    bad.poses[5].q = so3::to_quaternion(&r5);
    let badp = path(&dir, "bad.txt");
    bad.write(Path::new(&badp)).unwrap();
    let out = slamcert(&["certify", &p, &badp, "--report", &rep]);
    assert_eq!(out.status.code(), Some(2));
    let r = json(&rep);
    assert_eq!(r["pass"], false);
    assert!(r["min_eig"].as_f64().unwrap() < -1e-3);
}

#[test]
fn certify_cost_matches_trace_on_solved_problem() {
    let dir = TempDir::new().unwrap();
    let (p, _) = simulate(&dir, &["--seed", "6", "--poses", "20", "--landmarks", "120"]);
    let (sol, rep) = (path(&dir, "sol.txt"), path(&dir, "r.json"));
    let out = slamcert(&["solve", &p, "-o", &sol, "--report", &rep, "--certify"]);
    assert!(out.status.code().unwrap() <= 2);
    assert_eq!(json(&rep)["converged"], true);
    let out = slamcert(&["certify", &p, &sol, "--report", &rep]);
    assert!(out.status.code().unwrap() != 1);
    let r = json(&rep);
    let cost = r["final_cost"].as_f64().unwrap();
    let trace = r["trace_lambda"].as_f64().unwrap();
    assert!((cost - trace).abs() <= 1e-6 * cost.max(1.0), "{cost} vs {trace}");
}

#[test]
fn operational_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    let (p, gt) = simulate(&dir, &["--poses", "6", "--landmarks", "30"]);
    let sol = path(&dir, "sol.txt");

    // Missing vertex.
    let mut short = ProblemFile::read(Path::new(&gt)).unwrap();
    short.landmarks.pop();
    short.write(Path::new(&sol)).unwrap();
    let out = slamcert(&["certify", &p, &sol]);
    assert_eq!(out.status.code(), Some(1));

    // Malformed line.
    std::fs::write(&sol, "VERTEX_XYZ 0 1 2\n").unwrap();
    let out = slamcert(&["certify", &p, &sol]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    assert_eq!(slamcert(&["certify", &p, "/nonexistent/sol.txt"]).status.code(), Some(1));
    assert_eq!(slamcert(&["simulate", "-o", &sol, "--alpha", "1.5"]).status.code(), Some(1));
    assert_eq!(slamcert(&["simulate", "-o", &sol, "--poses", "abc"]).status.code(), Some(1));
    assert_eq!(slamcert(&["solve", &p, "-o", &sol, "--unknown"]).status.code(), Some(1));
}

#[test]
fn sweep_at_zero_noise_always_certifies() {
    let dir = TempDir::new().unwrap();
    let csv = path(&dir, "sweep.csv");
    let out = slamcert(&[
        "sweep", "--poses", "8", "--landmarks", "12", "--noise-scales", "0", "--trials", "4", "--starts", "2", "-o",
        &csv,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |k: &str| row[header.iter().position(|h| *h == k).unwrap()];
    assert_eq!(col("pass_rate"), "1");
    assert_eq!(col("corank_min"), "3");
    assert_eq!(col("corank_max"), "3");
}

#[test]
fn bench_writes_csv() {
    let dir = TempDir::new().unwrap();
    let csv = path(&dir, "bench.csv");
    let out = slamcert(&["bench", "--sweep", "poses", "--landmarks", "30", "--min", "10", "--max", "20", "--steps", "2", "-o", &csv]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "size,assembly_s,solve_s,certify_s,pass");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("10,"));
    assert!(lines[2].starts_with("20,"));
}
