//! End-to-end runs of the `hrss` binary.

use std::path::Path;
use std::process::{Command, Output};

use hrss::blocks::scan_position;

fn hrss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hrss"))
        .args(args)
        .env("HRSS_THREADS", "1")
        .output()
        .expect("run hrss")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gradcheck_sscan_passes() {
    let o = hrss(&["gradcheck", "--module", "sscan", "--seed", "7"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("op,param,max_rel_err,h,pass"));
    let rows: Vec<&str> = lines.collect();
    assert!(rows.len() > 10);
    assert!(rows.iter().all(|r| r.ends_with(",true")));
    assert!(rows.iter().any(|r| r.starts_with("s6_layer,")));
}

#[test]
fn injected_fault_fails_the_run() {
    let o = hrss(&["gradcheck", "--module", "core", "--seed", "1", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).lines().any(|r| r.ends_with(",false")));
}

#[test]
fn unknown_module_is_a_usage_error() {
    let o = hrss(&["gradcheck", "--module", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn scan_bench_rows_agree() {
    let o = hrss(&["scan-bench", "--L", "256", "--C", "8", "--N", "4", "--chunks", "1,16,256", "--runs", "3"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let rows: Vec<Vec<String>> = text.lines().map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.len() == 8));
    assert_eq!(rows[1][0], "naive");
    let sums: Vec<f64> = rows[1..].iter().map(|r| r[7].parse().unwrap()).collect();
    for s in &sums[1..] {
        assert!((s - sums[0]).abs() <= 1e-9 * sums[0].abs().max(1.0));
    }
    assert_eq!(rows[1][7], rows[4][7], "chunk = L must reproduce the naive output exactly");
}

#[test]
fn scan_bench_rejects_zero_chunk() {
    let o = hrss(&["scan-bench", "--L", "8", "--C", "1", "--N", "1", "--chunks", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

fn write_config(dir: &Path, input: &str) -> String {
    let p = dir.join("contrib.json");
    let body = format!(r#"{{"height": 6, "width": 5, "channels": 4, "state_dim": 3, "seed": 11, "input": "{input}"}}"#);
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn read_csv(path: &Path) -> Vec<f64> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn contrib_map_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "constant");
    let out = dir.path().join("q.pgm");
    let o = hrss(&["contrib-map", "--config", &cfg, "--query-row", "3", "--query-col", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 8);

    let pgm = std::fs::read_to_string(dir.path().join("q_d0.pgm")).unwrap();
    let mut lines = pgm.lines();
    assert_eq!(lines.next(), Some("P2"));
    assert_eq!(lines.next(), Some("5 6"));
    assert_eq!(lines.next(), Some("255"));
    assert_eq!(lines.count(), 6);

    // constant input: each direction's map rises strictly toward the query
    let target = 3 * 5 + 2;
    for d in 0..4 {
        let v = read_csv(&dir.path().join(format!("q_d{d}.csv")));
        assert_eq!(v.len(), 30);
        let t = (0..30).find(|&t| scan_position(d, t, 6, 5) == target).unwrap();
        let along: Vec<f64> = (0..30).map(|s| v[scan_position(d, s, 6, 5)]).collect();
        for s in 1..t {
            assert!(along[s] > along[s - 1], "direction {d}, step {s}");
        }
        assert!(along[t..].iter().all(|&x| x == 0.0));
    }
}

#[test]
fn contrib_map_first_token_has_no_sources() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "random");
    let out = dir.path().join("first");
    let o = hrss(&["contrib-map", "--config", &cfg, "--query-row", "0", "--query-col", "0", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(read_csv(&dir.path().join("first_d0.csv")).iter().all(|&x| x == 0.0));
    assert!(read_csv(&dir.path().join("first_d1.csv")).iter().any(|&x| x > 0.0));
}

#[test]
fn contrib_map_rejects_out_of_range_query() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "constant");
    let out = dir.path().join("q");
    let o = hrss(&["contrib-map", "--config", &cfg, "--query-row", "6", "--query-col", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn forward_reports_branches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    let mut m = hrss::net::ModelConfig::small();
    m.channels = [4, 8, 12, 16];
    m.blocks = [1; 4];
    m.modules = [1; 4];
    m.sections.stem_channels = 8;
    m.sections.stage1_width = 4;
    m.sections.head_channels = [4, 4, 8, 8];
    m.sections.num_classes = 3;
    m.save(&cfg).unwrap();
    let o = hrss(&["forward", "--config", cfg.to_str().unwrap(), "--input-shape", "1,3,64,32"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("branch0: 4@16x8"), "{text}");
    assert!(text.contains("branch3: 16@2x1"), "{text}");
    assert!(text.contains("logits: [1, 3]"), "{text}");
    let field = |k: &str| -> u64 {
        text.lines().find_map(|l| l.strip_prefix(k)).unwrap().trim().parse().unwrap()
    };
    assert_eq!(field("params:"), field("params_analytic:"));
    assert_eq!(field("flops_measured_batch:"), field("flops_analytic_per_image:"));
}

#[test]
fn forward_rejects_bad_shapes() {
    for shape in ["1,3,250,256", "1,4,256,256", "0,3,256,256", "1,3,256"] {
        let o = hrss(&["forward", "--input-shape", shape]);
        assert_eq!(o.status.code(), Some(2), "{shape}");
    }
}
