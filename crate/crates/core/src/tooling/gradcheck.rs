//! Central finite-difference oracle for the reverse-mode tape.
//!
//! The probe loss is `Σ R ⊙ f(inputs)` with a fixed Gaussian `R`. For each
//! input and parameter tensor a handful of entries are perturbed by `±h`
//! and the difference quotient is compared with the tape's gradient.

use rand::seq::index;
use serde::Serialize;

use crate::autodiff::{Gradients, Module, Param, Tape, Var};
use crate::error::Result;
use crate::rng;
use crate::tensor::{pairwise_sum, Tensor};

pub const DEFAULT_H: f64 = 1e-5;
pub const THRESHOLD: f64 = 1e-4;

/// Outcome for one tensor.
#[derive(Clone, Debug, Serialize)]
pub struct FdCheckReport {
    pub op: String,
    pub param: String,
    pub max_rel_err: f64,
    pub h: f64,
    pub pass: bool,
}

impl FdCheckReport {
    pub const CSV_HEADER: &'static str = "op,param,max_rel_err,h,pass";

    pub fn csv_row(&self) -> String {
        format!("{},{},{:.6e},{:e},{}", self.op, self.param, self.max_rel_err, self.h, self.pass)
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    pub h: f64,
    pub threshold: f64,
    /// Entries probed per tensor (all of them when the tensor is smaller).
    pub samples: usize,
    pub seed: u64,
    /// Corrupts the analytic gradient of the first probed entry; for testing the harness itself.
    pub inject_fault: bool,
}

impl FdConfig {
    pub fn new(seed: u64) -> Self {
        FdConfig {
            h: DEFAULT_H,
            threshold: THRESHOLD,
            samples: 4,
            seed,
            inject_fault: false,
        }
    }
}

/// Wraps free inputs as parameters so ops and modules share one code path.
struct Inputs(Vec<Param>);

impl Module for Inputs {
    fn params(&self) -> Vec<&Param> {
        self.0.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.0.iter_mut().collect()
    }
}

/// `Σ R ⊙ (y⁺ − y⁻)`: differencing per element before the reduction keeps
/// the large probe loss from cancelling in the numerator.
fn probe_difference(plus: &Tensor, minus: &Tensor, r: &Tensor) -> Result<f64> {
    let d = plus.zip_map(minus, |a, b| a - b)?.zip_map(r, |d, w| d * w)?;
    Ok(pairwise_sum(d.data()))
}

/// Checks `f(module, inputs)` against finite differences over every input
/// and every module parameter.
pub fn check_module<M: Module>(
    op: &str,
    module: &mut M,
    inputs: Vec<(&str, Tensor)>,
    f: impl for<'t> Fn(&M, &[Var<'t>]) -> Result<Var<'t>>,
    cfg: &FdConfig,
) -> Result<Vec<FdCheckReport>> {
    check_module_at(op, module, inputs, Vec::new(), f, cfg)
}

/// As [`check_module`], with `fixed` appended to the inputs `f` sees but
/// never perturbed or reported.
pub fn check_module_at<M: Module>(
    op: &str,
    module: &mut M,
    inputs: Vec<(&str, Tensor)>,
    fixed: Vec<Tensor>,
    f: impl for<'t> Fn(&M, &[Var<'t>]) -> Result<Var<'t>>,
    cfg: &FdConfig,
) -> Result<Vec<FdCheckReport>> {
    let mut leaves = Inputs(inputs.into_iter().map(|(n, t)| Param::new(format!("input:{n}"), t)).collect());

    let eval = |m: &M, leaves: &Inputs| -> Result<Tensor> {
        let tape = Tape::inference();
        let mut vars: Vec<Var<'_>> = leaves.0.iter().map(|p| tape.constant(p.value().clone())).collect();
        vars.extend(fixed.iter().map(|t| tape.constant(t.clone())));
        Ok(f(m, &vars)?.into_tensor())
    };

    let (grads, r): (Gradients, Tensor) = {
        let tape = Tape::new();
        let mut vars: Vec<Var<'_>> = leaves.0.iter().map(|p| tape.param(p)).collect();
        vars.extend(fixed.iter().map(|t| tape.constant(t.clone())));
        let y = f(module, &vars)?;
        let r = Tensor::randn(y.shape().to_vec(), 1.0, &mut rng::stream(cfg.seed, &format!("probe:{op}")));
        let loss = y.weighted_sum(&r)?;
        (tape.backward(&loss)?, r)
    };

    let mut reports = Vec::new();
    let mut faulted = !cfg.inject_fault;
    // inputs first, then module parameters, both in declaration order
    let n_inputs = leaves.0.len();
    let n_params = module.params().len();
    for slot in 0..n_inputs + n_params {
        let (name, numel) = {
            let p = if slot < n_inputs { &leaves.0[slot] } else { module.params()[slot - n_inputs] };
            (p.name().to_string(), p.numel())
        };
        let analytic = grads.by_label(&name).unwrap_or_else(|| Tensor::zeros(vec![numel]));
        let k = cfg.samples.min(numel);
        let mut pick = rng::stream(cfg.seed, &format!("pick:{op}:{name}"));
        let mut idx = index::sample(&mut pick, numel, k).into_vec();
        idx.sort_unstable();
        let mut worst = 0.0f64;
        for i in idx {
            let orig = {
                let p = if slot < n_inputs { &leaves.0[slot] } else { module.params()[slot - n_inputs] };
                p.value().data()[i]
            };
            let mut at = |v: f64| -> Result<Tensor> {
                {
                    let p = if slot < n_inputs {
                        &mut leaves.0[slot]
                    } else {
                        module.params_mut().into_iter().nth(slot - n_inputs).expect("slot")
                    };
                    p.value_mut().data_mut()[i] = v;
                }
                eval(module, &leaves)
            };
            let plus = at(orig + cfg.h)?;
            let minus = at(orig - cfg.h)?;
            at(orig)?;
            let numeric = probe_difference(&plus, &minus, &r)? / (2.0 * cfg.h);
            let mut a = analytic.data()[i];
            if !faulted {
                a = a * 1.5 + 1e-3;
                faulted = true;
            }
            worst = worst.max(rel_err(a, numeric));
        }
        let short = name.strip_prefix("input:").unwrap_or(&name).to_string();
        reports.push(FdCheckReport {
            op: op.to_string(),
            param: short,
            max_rel_err: worst,
            h: cfg.h,
            pass: worst < cfg.threshold,
        });
    }
    Ok(reports)
}

/// Checks a parameter-free function of its inputs.
pub fn check_fn(
    op: &str,
    inputs: Vec<(&str, Tensor)>,
    f: impl for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
    cfg: &FdConfig,
) -> Result<Vec<FdCheckReport>> {
    check_module(op, &mut Inputs(Vec::new()), inputs, |_, v| f(v), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-12, 0.0) - 1e-4).abs() < 1e-18);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn elementwise_product_passes_and_fault_is_caught() {
        let mut r = rng::stream(1, "t");
        let a = Tensor::randn(vec![3, 4], 1.0, &mut r);
        let b = Tensor::randn(vec![3, 4], 1.0, &mut r);
        fn f<'t>(v: &[Var<'t>]) -> Result<Var<'t>> {
            v[0].mul(&v[1]).map(|y| y.gelu())
        }
        let cfg = FdConfig::new(3);
        let ok = check_fn("mul_gelu", vec![("a", a.clone()), ("b", b.clone())], f, &cfg).unwrap();
        assert!(ok.iter().all(|r| r.pass), "{ok:?}");
        let bad = check_fn("mul_gelu", vec![("a", a), ("b", b)], f, &FdConfig { inject_fault: true, ..cfg }).unwrap();
        assert!(!bad[0].pass);
    }
}
