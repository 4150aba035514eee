//! Exercises the C entry points the way a C caller would.

use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use hrss::rng;
use hrss::sscan::{scan_naive, Discretization, DiscretizedStep};
use hrss::Tensor;
use hrss_ffi::*;

fn handle(t: &Tensor) -> *mut HrssTensor {
    let mut out = ptr::null_mut();
    let s = unsafe { hrss_tensor_new(t.shape().as_ptr(), t.rank(), t.data().as_ptr(), &mut out) };
    assert_eq!(s, HrssStatus::Ok);
    out
}

fn read(t: *const HrssTensor) -> Tensor {
    unsafe {
        let rank = hrss_tensor_rank(t);
        let mut shape = vec![0usize; rank];
        assert_eq!(hrss_tensor_shape(t, shape.as_mut_ptr(), rank), HrssStatus::Ok);
        let data = std::slice::from_raw_parts(hrss_tensor_data(t), hrss_tensor_numel(t)).to_vec();
        Tensor::new(shape, data).unwrap()
    }
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(hrss_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn tensor_round_trip_through_file() {
    let t = Tensor::randn(vec![2, 3, 4], 1.0, &mut rng::stream(1, "abi"));
    let h = handle(&t);
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("t.hrt").to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(hrss_tensor_save(h, path.as_ptr()), HrssStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(hrss_tensor_load(path.as_ptr(), &mut back), HrssStatus::Ok);
        assert_eq!(read(back).data(), t.data());
        assert_eq!(read(back).shape(), &[2, 3, 4]);
        let mut small = [0usize; 2];
        assert_eq!(hrss_tensor_shape(back, small.as_mut_ptr(), 2), HrssStatus::InvalidArgument);
        hrss_tensor_free(back);
        hrss_tensor_free(h);

        let missing = CString::new(dir.path().join("none").to_str().unwrap()).unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(hrss_tensor_load(missing.as_ptr(), &mut out), HrssStatus::Io);
        assert!(out.is_null());
    }
}

#[test]
fn scan_matches_the_library() {
    let mut r = rng::stream(2, "abi.scan");
    let (b, l, c, n) = (2, 33, 3, 4);
    let delta = Tensor::uniform(vec![b, l, c], 0.05, 0.8, &mut r);
    let a = Tensor::uniform(vec![c, n], -2.0, -0.2, &mut r);
    let bm = Tensor::randn(vec![b, l, n], 1.0, &mut r);
    let cm = Tensor::randn(vec![b, l, n], 1.0, &mut r);
    let x = Tensor::randn(vec![b, l, c], 1.0, &mut r);
    let step = DiscretizedStep::from_parts(&delta, &a, &bm, &cm, Discretization::ExactZoh).unwrap();
    let want = scan_naive(&step, &x).unwrap();

    let hs = [&delta, &a, &bm, &cm, &x].map(handle);
    unsafe {
        for chunk in [0, 1, 5, 33] {
            let mut y = ptr::null_mut();
            let s = hrss_scan(hs[0], hs[1], hs[2], hs[3], hs[4], HrssDiscretization::ExactZoh, chunk, &mut y);
            assert_eq!(s, HrssStatus::Ok, "{}", last_error());
            assert!(read(y).max_abs_diff(&want).unwrap() < 1e-12);
            hrss_tensor_free(y);
        }

        let mut v = 0.0;
        let s = hrss_contribution(hs[0], hs[1], hs[2], hs[3], HrssDiscretization::ExactZoh, 3, 7, 1, &mut v);
        assert_eq!(s, HrssStatus::Ok);
        assert_eq!(v, hrss::sscan::contribution(&step, 3, 7, 1).unwrap());
        let s = hrss_contribution(hs[0], hs[1], hs[2], hs[3], HrssDiscretization::ExactZoh, 7, 7, 1, &mut v);
        assert_eq!(s, HrssStatus::InvalidArgument);

        let mut y = ptr::null_mut();
        let s = hrss_scan(hs[1], hs[0], hs[2], hs[3], hs[4], HrssDiscretization::FirstOrder, 0, &mut y);
        assert_eq!(s, HrssStatus::Shape, "{}", last_error());
        assert!(y.is_null());
        for h in hs {
            hrss_tensor_free(h);
        }
    }
}

#[test]
fn model_counts_and_forward() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.json");
    let mut cfg = hrss::net::ModelConfig::small();
    cfg.channels = [4, 8, 12, 16];
    cfg.blocks = [1; 4];
    cfg.modules = [1; 4];
    cfg.sections.stem_channels = 8;
    cfg.sections.stage1_width = 4;
    cfg.sections.head_channels = [4, 4, 8, 8];
    cfg.sections.num_classes = 3;
    cfg.save(&path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();

    unsafe {
        let (mut params, mut flops) = (0u64, 0u64);
        assert_eq!(hrss_count(ptr::null(), cpath.as_ptr(), 64, 64, &mut params, &mut flops), HrssStatus::Ok);
        assert_eq!(params, hrss::net::count_params(&cfg));
        assert_eq!(flops, hrss::net::count_flops(&cfg, 64, 64));
        assert_eq!(hrss_count(ptr::null(), cpath.as_ptr(), 60, 64, &mut params, &mut flops), HrssStatus::Config);

        let s = CString::new("S").unwrap();
        assert_eq!(hrss_count(s.as_ptr(), ptr::null(), 256, 256, &mut params, ptr::null_mut()), HrssStatus::Ok);
        assert_eq!(params, hrss::net::count_params(&hrss::net::ModelConfig::small()));
        let bad = CString::new("XL").unwrap();
        assert_eq!(hrss_count(bad.as_ptr(), ptr::null(), 256, 256, &mut params, ptr::null_mut()), HrssStatus::Config);

        let mut m = ptr::null_mut();
        assert_eq!(hrss_model_new(ptr::null(), cpath.as_ptr(), 9, &mut m), HrssStatus::Ok);
        assert_eq!(hrss_model_num_params(m), hrss::net::count_params(&cfg));
        let x = handle(&Tensor::randn(vec![2, 3, 64, 32], 1.0, &mut rng::stream(3, "abi.x")));
        let mut logits = ptr::null_mut();
        assert_eq!(hrss_model_forward(m, x, &mut logits), HrssStatus::Ok, "{}", last_error());
        let l = read(logits);
        assert_eq!(l.shape(), &[2, 3]);
        assert!(l.all_finite());
        hrss_tensor_free(logits);
        hrss_tensor_free(x);

        let wrong = handle(&Tensor::zeros(vec![1, 4, 64, 64]));
        let mut out = ptr::null_mut();
        assert_eq!(hrss_model_forward(m, wrong, &mut out), HrssStatus::Shape);
        hrss_tensor_free(wrong);
        hrss_model_free(m);
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/hrss.h");
    assert!(header.exists());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"hrss.h\"\n\
         int main(void) {\n\
           HrssTensor *t = 0;\n\
           size_t shape[1] = {1};\n\
           double v = 1.0;\n\
           HrssStatus s = hrss_tensor_new(shape, 1, &v, &t);\n\
           hrss_tensor_free(t);\n\
           return s == HRSS_STATUS_OK ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let include = header.parent().unwrap();
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let Ok(out) = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, "-I"])
            .arg(include)
            .arg(&src)
            .output()
        else {
            eprintln!("{compiler} not found; header check skipped");
            continue;
        };
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
