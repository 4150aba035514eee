//! Selective state-space scan.
//!
//! Per channel `c` and state index `s` the recurrence is
//! `h_t = ā_t · h_{t-1} + b̄_t · x_t`, `y_t = Σ_s C_t[s] · h_t[s]` with
//! `ā = exp(Δ·A)` and, by default, `b̄ = Δ·B`. `A = -exp(a_log)` keeps the
//! dynamics strictly decaying. `B`, `C` and `Δ` are functions of the input.

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{Module, Param, Var};
use crate::error::{Error, Result};
use crate::macs;
use crate::ops::activation::{softplus, softplus_inv};
use crate::ops::linear::linear;
use crate::rng;
use crate::tensor::Tensor;

/// How `b̄` is formed from `Δ`, `A` and `B`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    /// `b̄ = Δ·B`.
    #[default]
    FirstOrder,
    /// Zero-order hold, `b̄ = (exp(Δ·A) - 1) / A · B`.
    ExactZoh,
}

impl Discretization {
    /// `(b̄ / B, ∂(b̄/B)/∂Δ, ∂(b̄/B)/∂A)` at one `(Δ, A)` pair.
    fn coeff(self, delta: f64, a: f64) -> (f64, f64, f64) {
        match self {
            Discretization::FirstOrder => (delta, 1.0, 0.0),
            Discretization::ExactZoh => {
                let da = delta * a;
                let em1 = da.exp_m1();
                let e = em1 + 1.0;
                (em1 / a, e, (da * e - em1) / (a * a))
            }
        }
    }
}

/// Learnable parameters of one selective-scan head over `C` channels with `N` states.
#[derive(Clone, Debug)]
pub struct ScanParams {
    /// `A = -exp(a_log)`, shape (C, N).
    pub a_log: Param,
    /// Δ̃, shape (C).
    pub delta_bias: Param,
    /// (C, N).
    pub w_b: Param,
    /// (C, N).
    pub w_c: Param,
    /// Low-rank Δ projection, (C, r) then (r, C).
    pub w_delta_down: Param,
    pub w_delta_up: Param,
    pub discretization: Discretization,
}

/// Damping applied to `W_Δ↑` by [`ScanParams::randomize`].
pub const DELTA_INPUT_SCALE: f64 = 0.1;

/// Default low rank of the Δ projection for `channels` channels.
pub fn default_rank(channels: usize) -> usize {
    channels.div_ceil(16).max(1)
}

impl ScanParams {
    /// Seeded initialization: `a_log[c, s] = ln(s + 1)`, `softplus(Δ̃)` log-uniform in
    /// [0.001, 0.1], projections Gaussian with variance `1 / fan_in`.
    pub fn init(name: &str, channels: usize, state_dim: usize, rank: usize, seed: u64) -> Result<Self> {
        if channels == 0 || state_dim == 0 || rank == 0 {
            return Err(Error::invalid(
                "ScanParams",
                format!("channels={channels}, state_dim={state_dim}, rank={rank} must all be at least 1"),
            ));
        }
        let mut r = rng::stream(seed, name);
        let a_log = Tensor::from_fn(vec![channels, state_dim], |i| ((i % state_dim) as f64 + 1.0).ln());
        let (lo, hi) = (0.001f64.ln(), 0.1f64.ln());
        let delta_bias = Tensor::from_fn(vec![channels], |_| softplus_inv(r.random_range(lo..hi).exp()));
        let sc = 1.0 / (channels as f64).sqrt();
        let w_b = Tensor::randn(vec![channels, state_dim], sc, &mut r);
        let w_c = Tensor::randn(vec![channels, state_dim], sc, &mut r);
        let w_down = Tensor::randn(vec![channels, rank], sc, &mut r);
        let w_up = Tensor::randn(vec![rank, channels], 1.0 / (rank as f64).sqrt(), &mut r);
        Ok(ScanParams {
            a_log: Param::new(format!("{name}.a_log"), a_log),
            delta_bias: Param::new(format!("{name}.delta_bias"), delta_bias),
            w_b: Param::new(format!("{name}.w_b"), w_b),
            w_c: Param::new(format!("{name}.w_c"), w_c),
            w_delta_down: Param::new(format!("{name}.w_delta_down"), w_down),
            w_delta_up: Param::new(format!("{name}.w_delta_up"), w_up),
            discretization: Discretization::FirstOrder,
        })
    }

    /// Moves the head to an unsaturated operating point where every parameter
    /// visibly shapes the output: `softplus(Δ̃)` log-uniform in [0.05, 0.5],
    /// `A` uniform in [-1, -0.2] and the input-dependent part of Δ damped, so
    /// `ā` stays well away from 0 and 1.
    pub fn randomize(&mut self, seed: u64) {
        let mut r = rng::stream(seed, &format!("{}.randomize", self.a_log.name()));
        let (lo, hi) = (0.05f64.ln(), 0.5f64.ln());
        let bias = Tensor::from_fn(vec![self.channels()], |_| softplus_inv(r.random_range(lo..hi).exp()));
        let a_log = Tensor::from_fn(self.a_log.value().shape().to_vec(), |_| r.random_range(0.2f64..1.0).ln());
        *self.delta_bias.value_mut() = bias;
        *self.a_log.value_mut() = a_log;
        let up = self.w_delta_up.value().scale(DELTA_INPUT_SCALE);
        *self.w_delta_up.value_mut() = up;
    }

    pub fn channels(&self) -> usize {
        self.a_log.value().dim(0)
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.value().dim(1)
    }

    pub fn rank(&self) -> usize {
        self.w_delta_down.value().dim(1)
    }

    /// `A = -exp(a_log)`.
    pub fn a(&self) -> Tensor {
        self.a_log.value().map(|v| -v.exp())
    }

    fn check_input(&self, x: &[usize]) -> Result<(usize, usize, usize)> {
        match *x {
            [b, l, c] if c == self.channels() => Ok((b, l, c)),
            [_, _, c] => Err(Error::shape("s6", "channels", format!("input has {c}, params expect {}", self.channels()))),
            _ => Err(Error::shape("s6", "rank", format!("expected (B, L, C), got {x:?}"))),
        }
    }

    /// Differentiable S6 layer: parameterize from `x` and run the scan.
    pub fn forward<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        self.check_input(x.shape())?;
        let tape = x.tape();
        let bm = x.linear(&tape.param(&self.w_b), None)?;
        let cm = x.linear(&tape.param(&self.w_c), None)?;
        let delta = x
            .linear(&tape.param(&self.w_delta_down), None)?
            .linear(&tape.param(&self.w_delta_up), Some(&tape.param(&self.delta_bias)))?
            .softplus();
        let a = tape.param(&self.a_log).exp().scale(-1.0);
        selective_scan(x, &delta, &a, &bm, &cm, self.discretization)
    }
}

impl Module for ScanParams {
    fn params(&self) -> Vec<&Param> {
        vec![&self.a_log, &self.delta_bias, &self.w_b, &self.w_c, &self.w_delta_down, &self.w_delta_up]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.a_log,
            &mut self.delta_bias,
            &mut self.w_b,
            &mut self.w_c,
            &mut self.w_delta_down,
            &mut self.w_delta_up,
        ]
    }
}

/// Discretized, input-dependent scan coefficients for a (B, L, C) input.
#[derive(Clone, Debug)]
pub struct DiscretizedStep {
    /// ā, (B, L, C, N).
    pub a_bar: Tensor,
    /// b̄, (B, L, C, N).
    pub b_bar: Tensor,
    /// C_t, (B, L, N).
    pub c: Tensor,
    /// Δ, (B, L, C).
    pub delta: Tensor,
    /// `Δ·A = ln ā`, kept so products of ā can be accumulated exactly in log space.
    pub log_a_bar: Tensor,
}

impl DiscretizedStep {
    /// (B, L, C, N).
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.a_bar.shape();
        (s[0], s[1], s[2], s[3])
    }

    /// Builds a step from explicit Δ (B, L, C), A (C, N), B and C (B, L, N).
    pub fn from_parts(delta: &Tensor, a: &Tensor, bm: &Tensor, cm: &Tensor, disc: Discretization) -> Result<Self> {
        let (b, l, c, n) = scan_dims(delta, a, bm, cm)?;
        let mut log_a_bar = vec![0.0; b * l * c * n];
        let mut a_bar = vec![0.0; b * l * c * n];
        let mut b_bar = vec![0.0; b * l * c * n];
        for bt in 0..b * l {
            for ch in 0..c {
                let d = delta.data()[bt * c + ch];
                for s in 0..n {
                    let av = a.data()[ch * n + s];
                    let i = (bt * c + ch) * n + s;
                    log_a_bar[i] = d * av;
                    a_bar[i] = (d * av).exp();
                    b_bar[i] = disc.coeff(d, av).0 * bm.data()[bt * n + s];
                }
            }
        }
        let shape = vec![b, l, c, n];
        Ok(DiscretizedStep {
            a_bar: Tensor::from_parts(shape.clone(), a_bar),
            b_bar: Tensor::from_parts(shape.clone(), b_bar),
            c: cm.clone(),
            delta: delta.clone(),
            log_a_bar: Tensor::from_parts(shape, log_a_bar),
        })
    }
}

fn scan_dims(delta: &Tensor, a: &Tensor, bm: &Tensor, cm: &Tensor) -> Result<(usize, usize, usize, usize)> {
    const OP: &str = "selective_scan";
    let (b, l, c) = delta.dims3(OP)?;
    let n = match a.shape() {
        &[ac, n] if ac == c => n,
        s => return Err(Error::shape(OP, "A", format!("expected ({c}, N), got {s:?}"))),
    };
    for (name, t) in [("B", bm), ("C", cm)] {
        if t.shape() != [b, l, n] {
            return Err(Error::shape(OP, name, format!("expected {:?}, got {:?}", [b, l, n], t.shape())));
        }
    }
    Ok((b, l, c, n))
}

/// Input-dependent discretization of `x` (B, L, C).
pub fn s6_parameterize(x: &Tensor, p: &ScanParams) -> Result<DiscretizedStep> {
    p.check_input(x.shape())?;
    let bm = linear(x, p.w_b.value(), None)?;
    let cm = linear(x, p.w_c.value(), None)?;
    let low = linear(x, p.w_delta_down.value(), None)?;
    let delta = linear(&low, p.w_delta_up.value(), Some(p.delta_bias.value()))?.map(softplus);
    DiscretizedStep::from_parts(&delta, &p.a(), &bm, &cm, p.discretization)
}

fn check_step(step: &DiscretizedStep, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (b, l, c, n) = step.dims();
    if x.shape() != [b, l, c] {
        return Err(Error::shape("scan", "input", format!("expected {:?}, got {:?}", [b, l, c], x.shape())));
    }
    Ok((b, l, c, n))
}

/// Output rows `y[b, :, :]` into `y` (L × C), states starting at zero.
/// Time-major so ā, b̄ and C stream through memory once.
fn scan_batch(step: &DiscretizedStep, x: &Tensor, b: usize, chunk: usize, y: &mut [f64]) {
    let (_, l, c, n) = step.dims();
    let (ab, bb, cm, xs) = (step.a_bar.data(), step.b_bar.data(), step.c.data(), x.data());
    let mut carry = vec![0.0; c * n];
    let mut local = vec![0.0; c * n];
    let mut decay = vec![0.0; c * n];
    for start in (0..l).step_by(chunk) {
        let end = (start + chunk).min(l);
        local.fill(0.0);
        decay.fill(1.0);
        let first = start == 0;
        for t in start..end {
            let bt = b * l + t;
            let ct = &cm[bt * n..(bt + 1) * n];
            for ch in 0..c {
                let xv = xs[bt * c + ch];
                let base = (bt * c + ch) * n;
                let k = ch * n;
                let mut acc = 0.0;
                for s in 0..n {
                    local[k + s] = ab[base + s] * local[k + s] + bb[base + s] * xv;
                    let h = if first {
                        local[k + s]
                    } else {
                        decay[k + s] *= ab[base + s];
                        local[k + s] + decay[k + s] * carry[k + s]
                    };
                    acc += ct[s] * h;
                    if t + 1 == end {
                        carry[k + s] = h;
                    }
                }
                y[t * c + ch] = acc;
            }
        }
    }
}

fn scan_with_chunk(step: &DiscretizedStep, x: &Tensor, chunk: usize) -> Result<Tensor> {
    let (b, l, c, _) = check_step(step, x)?;
    let mut out = vec![0.0; b * l * c];
    out.par_chunks_mut((l * c).max(1))
        .enumerate()
        .for_each(|(bi, y)| scan_batch(step, x, bi, chunk, y));
    Ok(Tensor::from_parts(vec![b, l, c], out))
}

/// Reference sequential recurrence.
pub fn scan_naive(step: &DiscretizedStep, x: &Tensor) -> Result<Tensor> {
    let l = step.dims().1;
    scan_with_chunk(step, x, l.max(1))
}

/// Chunked scan: each chunk runs from a zero state while tracking the
/// cumulative decay, then adds the exact carried-in state scaled by it.
/// `chunk >= L` is the naive recurrence.
pub fn scan_chunked(step: &DiscretizedStep, x: &Tensor, chunk: usize) -> Result<Tensor> {
    if chunk == 0 {
        return Err(Error::invalid("scan_chunked", "chunk must be at least 1"));
    }
    scan_with_chunk(step, x, chunk)
}

/// MACs charged for one scan over (B, L, C) with N states.
pub fn scan_macs(b: usize, l: usize, c: usize, n: usize) -> u64 {
    2 * (b * l * c * n) as u64
}

struct ColumnGrads {
    dx: Vec<f64>,
    ddelta: Vec<f64>,
    da: Vec<f64>,
    db: Vec<f64>,
    dc: Vec<f64>,
}

struct ScanInputs {
    x: std::sync::Arc<Tensor>,
    delta: std::sync::Arc<Tensor>,
    a: std::sync::Arc<Tensor>,
    bm: std::sync::Arc<Tensor>,
    cm: std::sync::Arc<Tensor>,
    disc: Discretization,
    dims: (usize, usize, usize, usize),
}

impl ScanInputs {
    /// Forward pass for one (batch, channel) column; states `h` (L × N) are
    /// written to `states` when provided.
    fn column(&self, b: usize, ch: usize, mut states: Option<&mut [f64]>) -> Vec<f64> {
        let (_, l, c, n) = self.dims;
        let mut h = vec![0.0; n];
        let mut y = vec![0.0; l];
        for t in 0..l {
            let bt = b * l + t;
            let xv = self.x.data()[bt * c + ch];
            let d = self.delta.data()[bt * c + ch];
            let mut acc = 0.0;
            for s in 0..n {
                let av = self.a.data()[ch * n + s];
                let (coef, _, _) = self.disc.coeff(d, av);
                h[s] = (d * av).exp() * h[s] + coef * self.bm.data()[bt * n + s] * xv;
                acc += self.cm.data()[bt * n + s] * h[s];
            }
            if let Some(st) = states.as_deref_mut() {
                st[t * n..(t + 1) * n].copy_from_slice(&h);
            }
            y[t] = acc;
        }
        y
    }

    fn column_backward(&self, b: usize, ch: usize, states: &[f64], gy: &Tensor) -> ColumnGrads {
        let (_, l, c, n) = self.dims;
        let mut g = ColumnGrads {
            dx: vec![0.0; l],
            ddelta: vec![0.0; l],
            da: vec![0.0; n],
            db: vec![0.0; l * n],
            dc: vec![0.0; l * n],
        };
        let mut carry = vec![0.0; n];
        for t in (0..l).rev() {
            let bt = b * l + t;
            let xv = self.x.data()[bt * c + ch];
            let d = self.delta.data()[bt * c + ch];
            let gyv = gy.data()[bt * c + ch];
            let (mut dx, mut dd) = (0.0, 0.0);
            for s in 0..n {
                let av = self.a.data()[ch * n + s];
                let bv = self.bm.data()[bt * n + s];
                let abar = (d * av).exp();
                let (coef, dcoef_dd, dcoef_da) = self.disc.coeff(d, av);
                let h = states[t * n + s];
                let h_prev = if t > 0 { states[(t - 1) * n + s] } else { 0.0 };
                g.dc[t * n + s] = gyv * h;
                let gh = self.cm.data()[bt * n + s] * gyv + carry[s];
                let ga = gh * h_prev * abar;
                let gbb = gh * xv;
                dd += ga * av + gbb * bv * dcoef_dd;
                g.da[s] += ga * d + gbb * bv * dcoef_da;
                g.db[t * n + s] = gbb * coef;
                dx += gh * coef * bv;
                carry[s] = gh * abar;
            }
            g.dx[t] = dx;
            g.ddelta[t] = dd;
        }
        g
    }
}

/// Differentiable fused scan. `x`, `delta`: (B, L, C); `a`: (C, N); `bm`, `cm`: (B, L, N).
/// States are kept for the backward pass only when the tape records.
pub fn selective_scan<'t>(
    x: &Var<'t>,
    delta: &Var<'t>,
    a: &Var<'t>,
    bm: &Var<'t>,
    cm: &Var<'t>,
    disc: Discretization,
) -> Result<Var<'t>> {
    let dims = scan_dims(delta.value(), a.value(), bm.value(), cm.value())?;
    let (b, l, c, n) = dims;
    if x.shape() != [b, l, c] {
        return Err(Error::shape("selective_scan", "x", format!("expected {:?}, got {:?}", [b, l, c], x.shape())));
    }
    if a.value().data().iter().any(|&v| !(v < 0.0)) {
        return Err(Error::invalid("selective_scan", "A must be strictly negative"));
    }
    macs::add(scan_macs(b, l, c, n));
    let inputs = ScanInputs {
        x: x.value_arc(),
        delta: delta.value_arc(),
        a: a.value_arc(),
        bm: bm.value_arc(),
        cm: cm.value_arc(),
        disc,
        dims,
    };
    let tape = x.tape();
    let keep = tape.needs_grad(&[x, delta, a, bm, cm]);
    let results: Vec<(Vec<f64>, Vec<f64>)> = (0..b * c)
        .into_par_iter()
        .map(|i| {
            let mut st = if keep { vec![0.0; l * n] } else { Vec::new() };
            let y = inputs.column(i / c, i % c, keep.then_some(st.as_mut_slice()));
            (y, st)
        })
        .collect();
    let mut out = vec![0.0; b * l * c];
    let mut states = Vec::with_capacity(if keep { b * c } else { 0 });
    for (i, (y, st)) in results.into_iter().enumerate() {
        let (bi, ch) = (i / c, i % c);
        for (t, v) in y.into_iter().enumerate() {
            out[(bi * l + t) * c + ch] = v;
        }
        if keep {
            states.push(st);
        }
    }
    let out = Tensor::from_parts(vec![b, l, c], out);
    Ok(tape.record("selective_scan", &[x, delta, a, bm, cm], out, move |gy| {
        let cols: Vec<ColumnGrads> = (0..b * c)
            .into_par_iter()
            .map(|i| inputs.column_backward(i / c, i % c, &states[i], gy))
            .collect();
        let mut dx = vec![0.0; b * l * c];
        let mut dd = vec![0.0; b * l * c];
        let mut da = vec![0.0; c * n];
        let mut db = vec![0.0; b * l * n];
        let mut dc = vec![0.0; b * l * n];
        for (i, g) in cols.iter().enumerate() {
            let (bi, ch) = (i / c, i % c);
            for t in 0..l {
                dx[(bi * l + t) * c + ch] = g.dx[t];
                dd[(bi * l + t) * c + ch] = g.ddelta[t];
                for s in 0..n {
                    db[(bi * l + t) * n + s] += g.db[t * n + s];
                    dc[(bi * l + t) * n + s] += g.dc[t * n + s];
                }
            }
            for s in 0..n {
                da[ch * n + s] += g.da[s];
            }
        }
        vec![
            Some(Tensor::from_parts(vec![b, l, c], dx)),
            Some(Tensor::from_parts(vec![b, l, c], dd)),
            Some(Tensor::from_parts(vec![c, n], da)),
            Some(Tensor::from_parts(vec![b, l, n], db)),
            Some(Tensor::from_parts(vec![b, l, n], dc)),
        ]
    }))
}

/// Influence weight of token `m` on token `n` (1-based, `m < n`) for one channel:
/// `Σ_s C_n[s] · exp(Σ_{i=m}^{n} Δ_i A[s]) · b̄_m[s]`, batch 0.
pub fn contribution(step: &DiscretizedStep, m: usize, n: usize, channel: usize) -> Result<f64> {
    contribution_in(step, 0, m, n, channel)
}

pub fn contribution_in(step: &DiscretizedStep, batch: usize, m: usize, n: usize, channel: usize) -> Result<f64> {
    let (b, l, c, ns) = step.dims();
    if m == 0 || m >= n || n > l {
        return Err(Error::invalid(
            "contribution",
            format!("need 1 <= m < n <= L, got m={m}, n={n}, L={l}"),
        ));
    }
    if batch >= b || channel >= c {
        return Err(Error::invalid("contribution", format!("batch {batch} / channel {channel} out of range")));
    }
    let decay = log_decay_in(step, batch, m, n, channel)?;
    let mut total = 0.0;
    for (s, ld) in decay.into_iter().enumerate() {
        let bbar = step.b_bar.data()[((batch * l + m - 1) * c + channel) * ns + s];
        total += step.c.data()[(batch * l + n - 1) * ns + s] * ld.exp() * bbar;
    }
    Ok(total)
}

/// `ln ā(m → n) = Σ_{i=m}^{n} Δ_i A` per state, batch 0, summed in ascending `i`.
pub fn log_decay(step: &DiscretizedStep, m: usize, n: usize, channel: usize) -> Result<Vec<f64>> {
    log_decay_in(step, 0, m, n, channel)
}

pub fn log_decay_in(step: &DiscretizedStep, batch: usize, m: usize, n: usize, channel: usize) -> Result<Vec<f64>> {
    let (b, l, c, ns) = step.dims();
    if m == 0 || m >= n || n > l {
        return Err(Error::invalid("log_decay", format!("need 1 <= m < n <= L, got m={m}, n={n}, L={l}")));
    }
    if batch >= b || channel >= c {
        return Err(Error::invalid("log_decay", format!("batch {batch} / channel {channel} out of range")));
    }
    let mut acc = vec![0.0; ns];
    for i in m..=n {
        let base = ((batch * l + i - 1) * c + channel) * ns;
        for (s, a) in acc.iter_mut().enumerate() {
            *a += step.log_a_bar.data()[base + s];
        }
    }
    Ok(acc)
}

/// `|contribution(m → n)|` for every `m < n`, zeros elsewhere, as a length-L vector.
/// With `channel = None` the magnitudes are averaged over channels.
pub fn contribution_map(step: &DiscretizedStep, n: usize, channel: Option<usize>) -> Result<Tensor> {
    let (_, l, c, _) = step.dims();
    if n == 0 || n > l {
        return Err(Error::invalid("contribution_map", format!("query token {n} outside 1..={l}")));
    }
    let channels: Vec<usize> = match channel {
        Some(ch) => vec![ch],
        None => (0..c).collect(),
    };
    let mut out = vec![0.0; l];
    for m in 1..n {
        let mut acc = 0.0;
        for &ch in &channels {
            acc += contribution(step, m, n, ch)?.abs();
        }
        out[m - 1] = acc / channels.len() as f64;
    }
    Ok(Tensor::from_parts(vec![l], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;

    fn random_step(seed: u64, b: usize, l: usize, c: usize, n: usize) -> (DiscretizedStep, Tensor) {
        let p = ScanParams::init("t", c, n, default_rank(c), seed).unwrap();
        let mut r = rng::stream(seed, "x");
        let x = Tensor::randn(vec![b, l, c], 1.0, &mut r);
        (s6_parameterize(&x, &p).unwrap(), x)
    }

    #[test]
    fn zero_input_gives_log_two_step() {
        let mut p = ScanParams::init("p", 3, 4, 1, 1).unwrap();
        p.delta_bias.set(Tensor::zeros(vec![3])).unwrap();
        let step = s6_parameterize(&Tensor::zeros(vec![1, 2, 3]), &p).unwrap();
        assert!(step.delta.data().iter().all(|&d| (d - 2f64.ln()).abs() < 1e-15));
        let a = p.a();
        for (i, &ab) in step.a_bar.data().iter().enumerate() {
            assert!((ab - (a.data()[i % 12] * 2f64.ln()).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn vanishing_delta_is_identity_dynamics() {
        let mut p = ScanParams::init("p", 2, 3, 1, 2).unwrap();
        p.delta_bias.set(Tensor::full(vec![2], -60.0)).unwrap();
        let step = s6_parameterize(&Tensor::zeros(vec![1, 3, 2]), &p).unwrap();
        assert!(step.a_bar.data().iter().all(|&v| (v - 1.0).abs() < 1e-20));
        assert!(step.b_bar.data().iter().all(|&v| v.abs() < 1e-20));
    }

    #[test]
    fn b_bar_is_delta_times_b() {
        let p = ScanParams::init("p", 4, 3, 1, 3).unwrap();
        let x = Tensor::randn(vec![2, 5, 4], 1.0, &mut rng::stream(3, "x"));
        let step = s6_parameterize(&x, &p).unwrap();
        for bt in 0..10 {
            for ch in 0..4 {
                for s in 0..3 {
                    let bm: f64 = (0..4).map(|k| x.data()[bt * 4 + k] * p.w_b.value().data()[k * 3 + s]).sum();
                    let want = step.delta.data()[bt * 4 + ch] * bm;
                    let got = step.b_bar.data()[(bt * 4 + ch) * 3 + s];
                    assert!((got - want).abs() < 1e-13);
                }
            }
        }
        assert!(step.delta.data().iter().all(|&d| d > 0.0));
        assert!(step.a_bar.data().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    fn constant_step(l: usize, a: f64, bbar: f64) -> DiscretizedStep {
        DiscretizedStep {
            a_bar: Tensor::full(vec![1, l, 1, 1], a),
            b_bar: Tensor::full(vec![1, l, 1, 1], bbar),
            c: Tensor::ones(vec![1, l, 1]),
            delta: Tensor::ones(vec![1, l, 1]),
            log_a_bar: Tensor::full(vec![1, l, 1, 1], a.ln()),
        }
    }

    #[test]
    fn geometric_series_closed_form() {
        let (a, b, l) = (0.8, 0.5, 12);
        let step = constant_step(l, a, b);
        let y = scan_naive(&step, &Tensor::ones(vec![1, l, 1])).unwrap();
        for t in 1..=l {
            let want = b * (1.0 - a.powi(t as i32)) / (1.0 - a);
            assert!((y.data()[t - 1] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn memoryless_and_single_step() {
        let (mut step, x) = random_step(5, 1, 6, 2, 3);
        step.a_bar = Tensor::zeros(step.a_bar.shape().to_vec());
        let y = scan_naive(&step, &x).unwrap();
        for t in 0..6 {
            for ch in 0..2 {
                let want: f64 = (0..3)
                    .map(|s| step.c.data()[t * 3 + s] * step.b_bar.data()[(t * 2 + ch) * 3 + s] * x.data()[t * 2 + ch])
                    .sum();
                assert!((y.data()[t * 2 + ch] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn chunk_of_full_length_is_bitwise_naive() {
        let (step, x) = random_step(7, 2, 33, 3, 4);
        let naive = scan_naive(&step, &x).unwrap();
        assert_eq!(scan_chunked(&step, &x, 33).unwrap(), naive);
        assert_eq!(scan_chunked(&step, &x, 100).unwrap(), naive);
        assert!(scan_chunked(&step, &x, 0).is_err());
    }

    #[test]
    fn chunked_matches_on_reference_instance() {
        let (step, x) = random_step(11, 2, 64, 4, 8);
        let naive = scan_naive(&step, &x).unwrap();
        for chunk in [1, 16] {
            assert!(scan_chunked(&step, &x, chunk).unwrap().max_abs_diff(&naive).unwrap() < 1e-10);
        }
    }

    #[test]
    fn fused_op_matches_naive() {
        let p = ScanParams::init("p", 3, 4, 1, 13).unwrap();
        let x = Tensor::randn(vec![2, 9, 3], 1.0, &mut rng::stream(13, "x"));
        let tape = Tape::new();
        let y = p.forward(&tape.leaf(x.clone())).unwrap();
        let oracle = scan_naive(&s6_parameterize(&x, &p).unwrap(), &x).unwrap();
        assert!(y.value().max_abs_diff(&oracle).unwrap() < 1e-13);
    }

    #[test]
    fn single_step_gradient_is_product_rule() {
        // L = 1: y = Σ_s C[s] · Δ · B[s] · x
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 1], vec![0.7]).unwrap());
        let d = tape.leaf(Tensor::new(vec![1, 1, 1], vec![0.3]).unwrap());
        let a = tape.leaf(Tensor::new(vec![1, 2], vec![-1.0, -2.0]).unwrap());
        let bm = tape.leaf(Tensor::new(vec![1, 1, 2], vec![0.5, -1.5]).unwrap());
        let cm = tape.leaf(Tensor::new(vec![1, 1, 2], vec![2.0, 0.25]).unwrap());
        let y = selective_scan(&x, &d, &a, &bm, &cm, Discretization::FirstOrder).unwrap();
        let g = tape.backward(&y.sum()).unwrap();
        let cb = 2.0 * 0.5 + 0.25 * -1.5;
        assert!((g.wrt(&x).item() - 0.3 * cb).abs() < 1e-15);
        assert!((g.wrt(&d).item() - 0.7 * cb).abs() < 1e-15);
        assert_eq!(g.wrt(&a).data(), &[0.0, 0.0]);
        assert!((g.wrt(&cm).data()[0] - 0.3 * 0.5 * 0.7).abs() < 1e-15);
    }

    #[test]
    fn exact_zoh_approaches_first_order_for_small_steps() {
        let (c0, dd, da) = Discretization::ExactZoh.coeff(1e-6, -2.0);
        assert!((c0 - 1e-6).abs() < 1e-11);
        assert!((dd - 1.0).abs() < 1e-5);
        assert!(da.abs() < 1e-11);
    }

    #[test]
    fn contribution_unrolls_two_steps() {
        let (step, _) = random_step(17, 1, 6, 3, 4);
        let (m, n, ch) = (2, 3, 1);
        let idx = |t: usize, s: usize| ((t - 1) * 3 + ch) * 4 + s;
        let want: f64 = (0..4)
            .map(|s| step.a_bar.data()[idx(m, s)] * step.a_bar.data()[idx(n, s)] * step.c.data()[(n - 1) * 4 + s] * step.b_bar.data()[idx(m, s)])
            .sum();
        assert!((contribution(&step, m, n, ch).unwrap() - want).abs() < 1e-14);
        assert!(contribution(&step, 3, 3, 0).is_err());
        assert!(contribution(&step, 0, 3, 0).is_err());
    }

    #[test]
    fn contribution_closed_form_decay() {
        let l = 10;
        let mut step = constant_step(l, (-1f64).exp(), 0.4);
        step.c = Tensor::full(vec![1, l, 1], 1.5);
        for (m, n) in [(1, 2), (2, 7), (1, 10)] {
            let want = (-((n - m + 1) as f64)).exp() * 1.5 * 0.4;
            assert!((contribution(&step, m, n, 0).unwrap() - want).abs() < 1e-15);
        }
        step.log_a_bar = Tensor::zeros(vec![1, l, 1, 1]);
        assert!((contribution(&step, 3, 8, 0).unwrap() - 1.5 * 0.4).abs() < 1e-15);
    }

    #[test]
    fn contribution_map_shape() {
        let (step, _) = random_step(19, 1, 8, 2, 3);
        let map = contribution_map(&step, 2, Some(0)).unwrap();
        assert_eq!(map.data().iter().filter(|&&v| v != 0.0).count(), 1);
        let map = contribution_map(&step, 6, None).unwrap();
        for m in 1..6 {
            let want = (contribution(&step, m, 6, 0).unwrap().abs() + contribution(&step, m, 6, 1).unwrap().abs()) / 2.0;
            assert!((map.data()[m - 1] - want).abs() < 1e-15);
        }
        assert!(map.data()[5..].iter().all(|&v| v == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn chunked_equals_naive(seed in 0u64..1000, l in 1usize..40, chunk in 1usize..12, n in 1usize..5) {
            let (step, x) = random_step(seed, 2, l, 3, n);
            let naive = scan_naive(&step, &x).unwrap();
            prop_assert!(scan_chunked(&step, &x, chunk).unwrap().max_abs_diff(&naive).unwrap() < 1e-10);
        }

        #[test]
        fn output_is_causal(seed in 0u64..1000, l in 2usize..20, cut in 0usize..19) {
            let cut = cut % (l - 1);
            let (step, x) = random_step(seed, 1, l, 2, 3);
            let mut x2 = x.clone();
            for v in &mut x2.data_mut()[(cut + 1) * 2..] {
                *v += 3.0;
            }
            let y1 = scan_naive(&step, &x).unwrap();
            let y2 = scan_naive(&step, &x2).unwrap();
            prop_assert_eq!(&y1.data()[..(cut + 1) * 2], &y2.data()[..(cut + 1) * 2]);
        }
    }
}
