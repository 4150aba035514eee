//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line and then
//! asserts; a shared lock keeps them sequential so timings are not skewed.

use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use rand::Rng;

use hrss::blocks::{BlockConfig, BlockVariant, LocalMixer, MultiDw, Ss2d};
use hrss::dcn::deform_aggregate;
use hrss::layers::{Init, Initializer};
use hrss::net::{count_flops, count_params, HrssNet, ModelConfig};
use hrss::ops::shape::{shuffle_permutation, IndexMap};
use hrss::sscan::{log_decay, s6_parameterize, scan_chunked, scan_naive, Discretization, DiscretizedStep, ScanParams};
use hrss::tooling::{run_suite, FdConfig, Suite};
use hrss::{rng, Module, Tape, Tensor};

static SEQUENTIAL: Mutex<()> = Mutex::new(());

fn report(name: &str, ok: bool, detail: String) {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

fn lock() -> std::sync::MutexGuard<'static, ()> {
    SEQUENTIAL.lock().unwrap_or_else(|e| e.into_inner())
}

#[test]
fn scan_oracle_equivalence() {
    let _g = lock();
    let t0 = Instant::now();
    let mut r = rng::stream(2024, "acceptance.scan");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (b, l, c, n) = (r.random_range(1..=4), r.random_range(1..=128), r.random_range(1..=8), r.random_range(1..=16));
        let delta = Tensor::uniform(vec![b, l, c], 0.001, 1.0, &mut r);
        let a = Tensor::uniform(vec![c, n], -3.0, -0.05, &mut r);
        let bm = Tensor::randn(vec![b, l, n], 1.0, &mut r);
        let cm = Tensor::randn(vec![b, l, n], 1.0, &mut r);
        let x = Tensor::randn(vec![b, l, c], 1.0, &mut r);
        let disc = if r.random_bool(0.5) { Discretization::FirstOrder } else { Discretization::ExactZoh };
        let step = DiscretizedStep::from_parts(&delta, &a, &bm, &cm, disc).unwrap();
        let naive = scan_naive(&step, &x).unwrap();
        for chunk in [1, 2, 7, 16, l] {
            worst = worst.max(scan_chunked(&step, &x, chunk).unwrap().max_abs_diff(&naive).unwrap());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    report(
        "scan oracle equivalence",
        worst < 1e-10 && secs < 30.0,
        format!("max abs diff {worst:.2e} over 100 instances, {secs:.1} s"),
    );
}

#[test]
fn gradient_suite() {
    let _g = lock();
    let t0 = Instant::now();
    let reports = run_suite(Suite::All, &FdConfig::new(0)).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let failed: Vec<String> = reports.iter().filter(|r| !r.pass).map(|r| format!("{}/{}", r.op, r.param)).collect();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    for op in ["ss2d[ss2d]", "ss2d[dss2d]", "multidw", "ffn[ss2d]", "dvss[dss2d+multidw]", "fuse", "hr_module"] {
        assert!(reports.iter().any(|r| r.op == op), "suite lacks {op}");
    }
    report(
        "gradient suite",
        failed.is_empty() && secs < 300.0,
        format!("{} tensors, worst rel err {worst:.2e}, failures {failed:?}, {secs:.1} s", reports.len()),
    );
}

#[test]
fn decay_is_monotone() {
    let _g = lock();
    let mut checked = 0usize;
    let mut violations = 0usize;
    for seed in 0..50u64 {
        let mut r = rng::stream(seed, "acceptance.decay");
        let (c, n, l) = (r.random_range(1..=6), r.random_range(1..=8), r.random_range(3..=24));
        let p = ScanParams::init("decay", c, n, 2, seed).unwrap();
        let x = Tensor::randn(vec![1, l, c], 2.0, &mut r);
        let step = s6_parameterize(&x, &p).unwrap();
        for ch in 0..c {
            for m in 1..l {
                let mut prev = log_decay(&step, m, m + 1, ch).unwrap();
                for end in m + 2..=l {
                    let cur = log_decay(&step, m, end, ch).unwrap();
                    for (a, b) in cur.iter().zip(&prev) {
                        checked += 1;
                        if a > b {
                            violations += 1;
                        }
                    }
                    prev = cur;
                }
            }
        }
    }
    report(
        "decay monotone in n",
        violations == 0 && checked > 0,
        format!("{checked} comparisons over 50 models, {violations} increases"),
    );
}

/// Independent box-filter oracle: each output sums its zero-padded 3×3 neighbourhood.
fn box_sum(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    Tensor::from_fn(s.to_vec(), |i| {
        let (plane, p) = (i / (h * w), i % (h * w));
        let (y, xx) = ((p / w) as isize, (p % w) as isize);
        let mut acc = 0.0;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (yy, xq) = (y + dy, xx + dx);
                if yy >= 0 && xq >= 0 && (yy as usize) < h && (xq as usize) < w {
                    acc += x.data()[plane * h * w + yy as usize * w + xq as usize];
                }
            }
        }
        acc
    })
}

fn eval(f: impl for<'t> Fn(&hrss::Var<'t>) -> hrss::Result<hrss::Var<'t>>, x: &Tensor) -> Tensor {
    let tape = Tape::inference();
    f(&tape.constant(x.clone())).unwrap().into_tensor()
}

#[test]
fn dcn_reductions() {
    let _g = lock();
    let x = Tensor::randn(vec![2, 8, 6, 5], 1.0, &mut rng::stream(3, "acceptance.dcn"));
    let y = deform_aggregate(&x, &Tensor::zeros(vec![2, 72, 6, 5]), &Tensor::ones(vec![2, 36, 6, 5]), 4).unwrap();
    let box_diff = y.max_abs_diff(&box_sum(&x)).unwrap();

    let mut cfg = BlockConfig::new(8).with_variant(BlockVariant::Ss2d);
    cfg.state_dim = 4;
    let init = Initializer::new(11, Init::Standard);
    let mut ss = Ss2d::new(&init, "pair", &cfg).unwrap();
    let ds = Ss2d::new(&init, "pair", &cfg.clone().with_variant(BlockVariant::Dss2d)).unwrap();
    let LocalMixer::Depthwise(dw) = &mut ss.local else { panic!("ss2d uses a depthwise mixer") };
    *dw.weight.value_mut() = Tensor::ones(dw.weight.value().shape().to_vec());
    let nb = dw.bias.as_ref().map(|b| b.numel()).unwrap_or(0);
    if let Some(b) = dw.bias.as_mut() {
        *b.value_mut() = Tensor::zeros(vec![nb]);
    }
    let xin = Tensor::randn(vec![2, 8, 5, 4], 1.0, &mut rng::stream(4, "acceptance.pair"));
    let pair_diff = eval(|v| ss.forward(v), &xin).max_abs_diff(&eval(|v| ds.forward(v), &xin)).unwrap();
    report(
        "dcn reductions",
        box_diff < 1e-12 && pair_diff < 1e-12,
        format!("box filter diff {box_diff:.2e}, dss2d vs ss2d diff {pair_diff:.2e}"),
    );
}

#[test]
fn multidw_structure() {
    let _g = lock();
    let m = MultiDw::new(&Initializer::new(1, Init::Standard), "m", 32, 4).unwrap();
    let kernels = m.kernel_sizes();
    let mut bijective = true;
    for c in [8usize, 32, 64, 128] {
        let perm = shuffle_permutation(c, 4).unwrap();
        let mut seen = vec![false; c];
        for &p in &perm {
            bijective &= p < c && !std::mem::replace(&mut seen[p], true);
        }
        bijective &= seen.iter().all(|&s| s);
        let x = Tensor::from_fn(vec![1, c, 2, 2], |i| i as f64);
        let y = IndexMap::channel_shuffle(&[1, c, 2, 2], 4).unwrap().apply(&x).unwrap();
        let mut values: Vec<f64> = y.data().to_vec();
        values.sort_by(f64::total_cmp);
        bijective &= values == x.data();
    }
    report(
        "multidw structure",
        kernels == [3, 5, 7, 9] && bijective,
        format!("kernels {kernels:?}, shuffle bijective for C in {{8,32,64,128}}: {bijective}"),
    );
}

#[test]
fn topology() {
    let _g = lock();
    let x = Tensor::zeros(vec![1, 3, 256, 192]);
    let mut ok = true;
    let mut detail = Vec::new();
    for (cfg, chans) in [(ModelConfig::small(), [32, 64, 128, 256]), (ModelConfig::base(), [80, 160, 320, 640])] {
        let model = HrssNet::new(&cfg, &Initializer::new(0, Init::Standard)).unwrap();
        let tape = Tape::inference();
        let branches = model.forward(&tape.constant(x.clone())).unwrap();
        let dims: Vec<String> = branches.iter().map(|b| format!("{}@{}x{}", b.shape()[1], b.shape()[2], b.shape()[3])).collect();
        let want: Vec<String> = (0..4).map(|i| format!("{}@{}x{}", chans[i], 64 >> i, 48 >> i)).collect();
        ok &= dims == want;
        detail.push(format!("{}: {}", cfg.variant, dims.join(", ")));
    }
    report("topology", ok, detail.join("; "));
}

#[test]
fn parameter_and_flop_accounting() {
    let _g = lock();
    let s = ModelConfig::small();
    let b = ModelConfig::base();
    let (sp, sf, bp) = (count_params(&s) as f64, count_flops(&s, 256, 256) as f64, count_params(&b) as f64);
    let built = HrssNet::new(&s, &Initializer::new(0, Init::Standard)).unwrap().num_params() as f64;
    let within = |v: f64, target: f64, tol: f64| (v - target).abs() <= tol * target;
    report(
        "parameter and flop accounting",
        within(sp, 20e6, 0.15) && within(sf, 5.8e9, 0.20) && within(bp, 61e6, 0.15) && built == sp,
        format!(
            "S {:.2}M params ({:+.1}%), {:.2}G FLOPs at 256x256 ({:+.1}%); B {:.2}M params ({:+.1}%)",
            sp / 1e6,
            (sp / 20e6 - 1.0) * 100.0,
            sf / 1e9,
            (sf / 5.8e9 - 1.0) * 100.0,
            bp / 1e6,
            (bp / 61e6 - 1.0) * 100.0
        ),
    );
}

#[test]
fn linear_complexity() {
    let _g = lock();
    // alternate the two lengths so drift in machine load hits both medians alike
    let problems = [2048, 4096].map(|l| hrss::tooling::bench::problem(1, l, 64, 16, 5).unwrap());
    let mut times = [Vec::new(), Vec::new()];
    for (step, x) in &problems {
        std::hint::black_box(scan_naive(step, x).unwrap());
    }
    for _ in 0..20 {
        for (k, (step, x)) in problems.iter().enumerate() {
            let t0 = std::time::Instant::now();
            std::hint::black_box(scan_naive(step, x).unwrap());
            times[k].push(t0.elapsed().as_nanos());
        }
    }
    let [short, long] = times.map(|t| hrss::tooling::bench::median(t) as f64);
    let ratio = long / short;
    report(
        "linear complexity",
        (1.6..=2.6).contains(&ratio),
        format!("median naive scan {:.2} ms at L=2048, {:.2} ms at L=4096, ratio {ratio:.2}", short / 1e6, long / 1e6),
    );
}

fn cli(args: &[&str], threads: &str, dir: &Path) -> (i32, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_hrss"))
        .args(args)
        .env("HRSS_THREADS", threads)
        .current_dir(dir)
        .output()
        .expect("run hrss");
    (out.status.code().unwrap_or(-1), out.stdout)
}

/// Drops the timing column, the one field that legitimately varies.
fn without_timing(csv: &[u8]) -> String {
    String::from_utf8_lossy(csv)
        .lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(6);
            f.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn cli_determinism() {
    let _g = lock();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("contrib.json"),
        r#"{"height": 6, "width": 5, "channels": 3, "state_dim": 4, "seed": 3, "input": "random"}"#,
    )
    .unwrap();
    let commands: [&[&str]; 4] = [
        &["gradcheck", "--module", "all", "--seed", "7"],
        &["scan-bench", "--L", "256", "--C", "8", "--N", "4", "--chunks", "1,16,256", "--runs", "3"],
        &["contrib-map", "--config", "contrib.json", "--query-row", "3", "--query-col", "2", "--out", "map.pgm"],
        &["forward", "--variant", "S", "--input-shape", "2,3,64,64", "--ablation", "dss2d+multidw"],
    ];
    let mut mismatches = Vec::new();
    for (i, args) in commands.iter().enumerate() {
        let mut outputs = Vec::new();
        for threads in ["1", "4", "1"] {
            let (code, stdout) = cli(args, threads, dir.path());
            assert_eq!(code, 0, "{args:?} exited {code}");
            let mut text = if i == 1 { without_timing(&stdout) } else { String::from_utf8_lossy(&stdout).into_owned() };
            if i == 2 {
                for k in 0..4 {
                    for ext in ["pgm", "csv"] {
                        text += &std::fs::read_to_string(dir.path().join(format!("map_d{k}.{ext}"))).unwrap();
                    }
                }
            }
            outputs.push(text);
        }
        if outputs.windows(2).any(|w| w[0] != w[1]) {
            mismatches.push(args[0]);
        }
    }
    report(
        "cli determinism",
        mismatches.is_empty(),
        format!("4 commands x HRSS_THREADS {{1,4}} and rerun; mismatched: {mismatches:?}"),
    );
}
