use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use voxroute::formats::{write_pixel_grid, write_points};
use voxroute::pipeline::fixtures;

fn voxroute(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxroute"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn detect_empty_cloud_routes_lpe() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("empty.bin");
    write_points(&cloud, &[]).unwrap();
    let o = voxroute(&["detect", "--cloud", path(&cloud), "--workers", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).is_empty());
    assert!(stderr(&o).contains("route LPE"));
}

#[test]
fn detect_near_cluster_emits_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("near.bin");
    write_points(&cloud, &fixtures::near_cluster(3)).unwrap();
    let report = dir.path().join("report.json");
    let o = voxroute(&["detect", "--cloud", path(&cloud), "--report", path(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 1);
    let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(v["expert"], "LPE");
    assert!(v["class"].is_string());
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let stages: Vec<&str> = r["timings"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["stage"].as_str().unwrap())
        .collect();
    assert!(!stages.contains(&"image_branch"));
}

#[test]
fn detect_far_scene_requires_image() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("far.bin");
    write_points(&cloud, &fixtures::far_low_confidence(3)).unwrap();
    let o = voxroute(&["detect", "--cloud", path(&cloud)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no image features"));

    let img = dir.path().join("img.bin");
    write_pixel_grid(&img, &fixtures::flat_image(640, 480, 3, 30.25)).unwrap();
    let o = voxroute(&[
        "detect",
        "--cloud",
        path(&cloud),
        "--image-features",
        path(&img),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("\"expert\":\"APE\""));

    // raising D above the proposal distance turns the scene into a near one
    let o = voxroute(&["detect", "--cloud", path(&cloud), "--distance-d", "40"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("route VEE"));
}

#[test]
fn config_thresholds_and_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("far.bin");
    write_points(&cloud, &fixtures::far_low_confidence(3)).unwrap();
    let mut cfg = serde_json::to_value(voxroute::pipeline::PipelineConfig::reference()).unwrap();
    cfg["dispatch"]["distance_d"] = 40.0.into();
    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let o = voxroute(&[
        "--config",
        path(&cfg_path),
        "detect",
        "--cloud",
        path(&cloud),
    ]);
    assert!(stderr(&o).contains("route VEE"), "{}", stderr(&o));
    let o = voxroute(&[
        "--config",
        path(&cfg_path),
        "detect",
        "--cloud",
        path(&cloud),
        "--distance-d",
        "23.5",
    ]);
    assert!(!o.status.success());
}

#[test]
fn invalid_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, [0u8; 10]).unwrap();
    assert!(!voxroute(&["voxelize", "--cloud", path(&bad)])
        .status
        .success());
    assert!(!voxroute(&["detect", "--cloud", "/does/not/exist"])
        .status
        .success());
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, "{\"grid\": 3}").unwrap();
    assert!(
        !voxroute(&["--config", path(&cfg), "voxelize", "--cloud", path(&bad)])
            .status
            .success()
    );
    assert!(
        !voxroute(&["detect", "--cloud", path(&bad), "--confidence-c", "2"])
            .status
            .success()
    );
}

#[test]
fn voxelize_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("near.bin");
    write_points(&cloud, &fixtures::near_cluster(1)).unwrap();
    let out = dir.path().join("vox.csv");
    let o = voxroute(&["voxelize", "--cloud", path(&cloud), "--out", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x,y,z,intensity,count,dx,dy,dz");
    assert_eq!(lines.len(), 3);
}

#[test]
fn bench_pipeline_speedup_column() {
    let o = voxroute(&["bench-pipeline", "--specs", "4:2:3,1:2:3,3:0:2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<Vec<f64>> = out
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows[0][3], 14.0);
    assert_eq!(rows[0][4], 20.0);
    assert!((rows[0][5] - 20.0 / 14.0).abs() < 1e-12);
    assert_eq!(rows[1][5], 1.0);
    assert_eq!(rows[2][5], 1.0);
}

#[test]
fn bench_pipeline_timeline_file() {
    let dir = tempfile::tempdir().unwrap();
    let tl = dir.path().join("tl.csv");
    let o = voxroute(&[
        "bench-pipeline",
        "--specs",
        "2:1:1",
        "--timeline",
        path(&tl),
    ]);
    assert!(o.status.success());
    let text = fs::read_to_string(&tl).unwrap();
    assert_eq!(text.lines().next().unwrap(), "event,engine,start,end");
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn bench_spconv_rows() {
    let o = voxroute(&[
        "bench-spconv",
        "--grid",
        "8",
        "--occupancy",
        "0.2,0",
        "--repeats",
        "1",
        "--seed",
        "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert!(lines[0].starts_with("occupancy,active_voxels,sparse_fmas,dense_fmas,fma_ratio"));
    assert!(lines[1].starts_with("0.0,0,0,"));
    assert_eq!(lines.len(), 3);
}

#[test]
fn graph_opt_is_deterministic() {
    let a = voxroute(&[
        "graph-opt",
        "--seed",
        "11",
        "--passes",
        "prune,fuse,quantize,place",
        "--threshold",
        "0.1",
    ]);
    let b = voxroute(&[
        "graph-opt",
        "--seed",
        "11",
        "--passes",
        "prune,fuse,quantize,place",
        "--threshold",
        "0.1",
    ]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let g = voxroute::runtime::ComputeGraph::from_json(&stdout(&a)).unwrap();
    assert!(g.nodes().iter().all(|n| n.attrs.contains_key("placement")));
    assert!(stderr(&a).contains("max_output_diff"));
    assert!(!voxroute(&["graph-opt", "--passes", "bogus"])
        .status
        .success());
}

#[test]
fn graph_opt_reads_file() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("g.json");
    fs::write(
        &src,
        voxroute::runtime::random_graph(2, 12)
            .graph
            .to_json()
            .unwrap(),
    )
    .unwrap();
    let dst = dir.path().join("out.json");
    let o = voxroute(&["graph-opt", "--graph", path(&src), "--out", path(&dst)]);
    assert!(o.status.success(), "{}", stderr(&o));
    voxroute::runtime::ComputeGraph::from_json(&fs::read_to_string(&dst).unwrap()).unwrap();
}

#[test]
fn ks_test_disjoint_samples() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    fs::write(&a, "0.1\n0.5\n0.9\n").unwrap();
    fs::write(&b, "2.0\n2.5\n\n3.0\n").unwrap();
    let o = voxroute(&["ks-test", path(&a), path(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("D=1.000000 p="));
    fs::write(&b, "x\n").unwrap();
    assert!(!voxroute(&["ks-test", path(&a), path(&b)]).status.success());
}

#[test]
fn route_stats_csv() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes.jsonl");
    let near = r#"{"min":[9.5,-0.5,-0.5],"max":[10.5,0.5,0.5],"confidence":0.9}"#;
    let mixed = r#"{"min":[9.5,-0.5,-0.5],"max":[10.5,0.5,0.5],"confidence":0.2}"#;
    let far = r#"{"min":[29.5,-0.5,-0.5],"max":[30.5,0.5,0.5],"confidence":0.2}"#;
    fs::write(&scenes, format!("[{near}]\n[{mixed}]\n[{far}]\n[]\n")).unwrap();
    let o = voxroute(&["route-stats", "--scenes", path(&scenes), "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(
        lines[0],
        "expert,count,fraction,subset_size,balanced_prob,adaptive_lr"
    );
    assert!(lines[1].starts_with("LPE,2,0.5,"));
    assert!(lines[2].starts_with("VEE,1,0.25,"));
    assert!(lines[3].starts_with("APE,1,0.25,"));
}
