//! Wall-clock comparison of output mixing against parameter merging.
//!
//! The production layers are f64 and allocate on every call; timing them
//! would mostly measure the allocator. The benchmark instead drives minimal
//! buffer-reusing kernels in the configured precision, private to this
//! module and cross-checked against the production layers in tests. Routing,
//! mixing, merging, and the bottleneck all run inside the timed region;
//! parameter construction and input generation run outside it.

use crate::config::{Precision, RunConfig};
use crate::error::{Error, Result};
use crate::gating::GateLevel;
use crate::tensor::Rng;
use std::hint::black_box;
use std::time::Instant;

pub const BENCH_CSV_HEADER: &str =
    "method,level,m,n,d,d_ff,s,flops_model,wall_ms_median,wall_ms_p10,wall_ms_p90";

/// One benchmark measurement: a method at one selection count.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub method: &'static str,
    pub level: &'static str,
    pub m: u64,
    pub n: u64,
    pub d: u64,
    pub d_ff: u64,
    pub s: u64,
    pub flops_model: u64,
    pub wall_ms_median: f64,
    pub wall_ms_p10: f64,
    pub wall_ms_p90: f64,
}

impl BenchRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6}",
            self.method,
            self.level,
            self.m,
            self.n,
            self.d,
            self.d_ff,
            self.s,
            self.flops_model,
            self.wall_ms_median,
            self.wall_ms_p10,
            self.wall_ms_p90,
        )
    }
}

pub fn rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

/// The two layer constructions the benchmark compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMethod {
    /// Run every selected expert, mix the outputs.
    MixOutputs,
    /// Merge the selected parameters, run one expert.
    MergeParams,
}

fn method_name(method: BenchMethod, level: GateLevel) -> &'static str {
    match method {
        BenchMethod::MixOutputs => "moe",
        BenchMethod::MergeParams => {
            if level == GateLevel::Token {
                "meo_token"
            } else {
                "meo"
            }
        }
    }
}

/// Exact matmul-only FLOPs for one benchmark forward (single affine expert
/// d -> d_ff, multiply-accumulate = 2 FLOPs). This is the `flops_model`
/// column: the analytic cost the wall-clock numbers are read against.
pub fn bench_layer_flops(
    method: BenchMethod,
    level: GateLevel,
    d: u64,
    d_ff: u64,
    s: u64,
    n: u64,
    m: u64,
    r: u64,
) -> u64 {
    match method {
        BenchMethod::MixOutputs => {
            let groups = if level == GateLevel::Token { s } else { 1 };
            groups * 2 * d * n + m * 2 * s * d * d_ff + m * 2 * s * d_ff
        }
        BenchMethod::MergeParams => {
            // Routed once per sequence even at token level; the bottleneck is
            // what restores per-token behaviour there.
            let mut total = 2 * d * n + m * 2 * (d * d_ff + d_ff) + 2 * s * d * d_ff;
            if level == GateLevel::Token {
                total += 4 * s * d * (d / r);
            }
            total
        }
    }
}

/// Scalar abstraction so the same kernel code runs in f32 and f64.
trait Float:
    Copy
    + Default
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::AddAssign
{
    fn from_f64(v: f64) -> Self;
    // Widening read-back, needed only by the cross-precision tests.
    #[allow(dead_code)]
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
}

impl Float for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
}

impl Float for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// Master parameters, drawn once in f64 and converted per precision so both
/// precisions of a given seed describe the same layer.
struct KernelParams {
    d: usize,
    d_ff: usize,
    n: usize,
    hid: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
    w_gate: Vec<f64>,
    w_down: Vec<f64>,
    w_up: Vec<f64>,
}

fn init_params(d: usize, d_ff: usize, n: usize, r: usize, seed: u64) -> KernelParams {
    let mut rng = Rng::new(seed);
    let a = (6.0 / (d + d_ff) as f64).sqrt();
    let weights = (0..n * d * d_ff).map(|_| rng.uniform(-a, a)).collect();
    let biases = (0..n * d_ff).map(|_| rng.uniform(-0.1, 0.1)).collect();
    let ag = (6.0 / (d + n) as f64).sqrt();
    let w_gate = (0..d * n).map(|_| rng.uniform(-ag, ag)).collect();
    let hid = (d / r.max(1)).max(1);
    let ab = (6.0 / (d + hid) as f64).sqrt();
    let w_down = (0..d * hid).map(|_| rng.uniform(-ab, ab)).collect();
    let w_up = (0..hid * d).map(|_| rng.uniform(-0.1, 0.1)).collect();
    KernelParams { d, d_ff, n, hid, weights, biases, w_gate, w_down, w_up }
}

struct Kernel<T> {
    d: usize,
    d_ff: usize,
    n: usize,
    m: usize,
    hid: usize,
    renormalize: bool,
    weights: Vec<T>,
    biases: Vec<T>,
    w_gate: Vec<T>,
    w_down: Vec<T>,
    w_up: Vec<T>,
}

impl<T: Float> Kernel<T> {
    fn new(p: &KernelParams, m: usize, renormalize: bool) -> Self {
        let conv = |v: &[f64]| v.iter().map(|&x| T::from_f64(x)).collect::<Vec<T>>();
        Kernel {
            d: p.d,
            d_ff: p.d_ff,
            n: p.n,
            m,
            hid: p.hid,
            renormalize,
            weights: conv(&p.weights),
            biases: conv(&p.biases),
            w_gate: conv(&p.w_gate),
            w_down: conv(&p.w_down),
            w_up: conv(&p.w_up),
        }
    }

    fn weight(&self, k: usize) -> &[T] {
        &self.weights[k * self.d * self.d_ff..(k + 1) * self.d * self.d_ff]
    }

    fn bias(&self, k: usize) -> &[T] {
        &self.biases[k * self.d_ff..(k + 1) * self.d_ff]
    }
}

/// Reused buffers; nothing inside the timed loop allocates.
struct Workspace<T> {
    out: Vec<T>,
    tmp: Vec<T>,
    merged_w: Vec<T>,
    merged_b: Vec<T>,
    pooled: Vec<T>,
    logits: Vec<T>,
    selected: Vec<(usize, T)>,
    x_eff: Vec<T>,
    hidden: Vec<T>,
}

impl<T: Float> Workspace<T> {
    fn new(s: usize, d: usize, d_ff: usize, n: usize, hid: usize) -> Self {
        Workspace {
            out: vec![T::default(); s * d_ff],
            tmp: vec![T::default(); s * d_ff],
            merged_w: vec![T::default(); d * d_ff],
            merged_b: vec![T::default(); d_ff],
            pooled: vec![T::default(); d],
            logits: vec![T::default(); n],
            selected: Vec::with_capacity(n),
            x_eff: vec![T::default(); s * d],
            hidden: vec![T::default(); s * hid],
        }
    }
}

fn matmul_into<T: Float>(x: &[T], s: usize, d: usize, w: &[T], cols: usize, out: &mut [T]) {
    out[..s * cols].iter_mut().for_each(|v| *v = T::default());
    for i in 0..s {
        let xrow = &x[i * d..(i + 1) * d];
        let orow = &mut out[i * cols..(i + 1) * cols];
        for (l, &xv) in xrow.iter().enumerate() {
            let wrow = &w[l * cols..(l + 1) * cols];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
}

fn gelu_in_place<T: Float>(v: &mut [T]) {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let one = T::from_f64(1.0);
    for z in v {
        let x = *z;
        let t = (c * (x + k * x * x * x)).tanh();
        *z = half * x * (one + t);
    }
}

/// Scores the experts for one routing representation and fills `selected`
/// with the top m (score descending, ties to the lower index), optionally
/// renormalized. Matches the production selection semantics.
fn route_one<T: Float>(
    repr: &[T],
    w_gate: &[T],
    n: usize,
    m: usize,
    renormalize: bool,
    logits: &mut [T],
    selected: &mut Vec<(usize, T)>,
) {
    logits.iter_mut().for_each(|v| *v = T::default());
    for (l, &xv) in repr.iter().enumerate() {
        let wrow = &w_gate[l * n..(l + 1) * n];
        for (o, &wv) in logits.iter_mut().zip(wrow) {
            *o += xv * wv;
        }
    }
    let mut max = logits[0];
    for &v in logits.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::default();
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    selected.clear();
    for (i, &v) in logits.iter().enumerate() {
        selected.push((i, v / sum));
    }
    for t in 0..m {
        let mut best = t;
        for c in t + 1..selected.len() {
            if selected[c].1 > selected[best].1 {
                best = c;
            }
        }
        selected.swap(t, best);
    }
    selected.truncate(m);
    // Equal scores must fall back to index order, like the production path.
    selected.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    if renormalize {
        let mut total = T::default();
        for &(_, g) in selected.iter() {
            total += g;
        }
        for entry in selected.iter_mut() {
            entry.1 = entry.1 / total;
        }
    }
}

fn mean_pool<T: Float>(x: &[T], s: usize, d: usize, pooled: &mut [T]) {
    pooled.iter_mut().for_each(|v| *v = T::default());
    for i in 0..s {
        for (p, &xv) in pooled.iter_mut().zip(&x[i * d..(i + 1) * d]) {
            *p += xv;
        }
    }
    let inv = T::from_f64(1.0) / T::from_f64(s as f64);
    for p in pooled.iter_mut() {
        *p = *p * inv;
    }
}

fn moe_forward_sequence<T: Float>(k: &Kernel<T>, x: &[T], s: usize, ws: &mut Workspace<T>) {
    let Workspace { out, tmp, pooled, logits, selected, .. } = ws;
    mean_pool(x, s, k.d, pooled);
    route_one(pooled, &k.w_gate, k.n, k.m, k.renormalize, logits, selected);
    out.iter_mut().for_each(|v| *v = T::default());
    for &(idx, g) in selected.iter() {
        matmul_into(x, s, k.d, k.weight(idx), k.d_ff, tmp);
        let b = k.bias(idx);
        for i in 0..s {
            let orow = &mut out[i * k.d_ff..(i + 1) * k.d_ff];
            let trow = &tmp[i * k.d_ff..(i + 1) * k.d_ff];
            for ((o, &t), &bj) in orow.iter_mut().zip(trow).zip(b) {
                *o += g * (t + bj);
            }
        }
    }
    gelu_in_place(out);
}

fn moe_forward_token<T: Float>(k: &Kernel<T>, x: &[T], s: usize, ws: &mut Workspace<T>) {
    let Workspace { out, tmp, logits, selected, .. } = ws;
    out.iter_mut().for_each(|v| *v = T::default());
    for i in 0..s {
        let xrow = &x[i * k.d..(i + 1) * k.d];
        route_one(xrow, &k.w_gate, k.n, k.m, k.renormalize, logits, selected);
        let orow = &mut out[i * k.d_ff..(i + 1) * k.d_ff];
        for &(idx, g) in selected.iter() {
            let trow = &mut tmp[..k.d_ff];
            trow.iter_mut().for_each(|v| *v = T::default());
            let w = k.weight(idx);
            for (l, &xv) in xrow.iter().enumerate() {
                let wrow = &w[l * k.d_ff..(l + 1) * k.d_ff];
                for (t, &wv) in trow.iter_mut().zip(wrow) {
                    *t += xv * wv;
                }
            }
            for ((o, &t), &bj) in orow.iter_mut().zip(trow.iter()).zip(k.bias(idx)) {
                *o += g * (t + bj);
            }
        }
    }
    gelu_in_place(out);
}

fn merge_and_apply<T: Float>(k: &Kernel<T>, x: &[T], s: usize, ws: &mut Workspace<T>) {
    let Workspace { out, merged_w, merged_b, pooled, logits, selected, .. } = ws;
    mean_pool(x, s, k.d, pooled);
    route_one(pooled, &k.w_gate, k.n, k.m, k.renormalize, logits, selected);
    merged_w.iter_mut().for_each(|v| *v = T::default());
    merged_b.iter_mut().for_each(|v| *v = T::default());
    for &(idx, g) in selected.iter() {
        for (acc, &wv) in merged_w.iter_mut().zip(k.weight(idx)) {
            *acc += g * wv;
        }
        for (acc, &bv) in merged_b.iter_mut().zip(k.bias(idx)) {
            *acc += g * bv;
        }
    }
    matmul_into(x, s, k.d, merged_w, k.d_ff, out);
    for i in 0..s {
        let orow = &mut out[i * k.d_ff..(i + 1) * k.d_ff];
        for (o, &bj) in orow.iter_mut().zip(merged_b.iter()) {
            *o += bj;
        }
    }
    gelu_in_place(out);
}

fn meo_forward_token<T: Float>(k: &Kernel<T>, x: &[T], s: usize, ws: &mut Workspace<T>) {
    {
        let Workspace { x_eff, hidden, .. } = ws;
        matmul_into(x, s, k.d, &k.w_down, k.hid, hidden);
        gelu_in_place(hidden);
        matmul_into(hidden, s, k.hid, &k.w_up, k.d, x_eff);
        for (e, &xv) in x_eff.iter_mut().zip(x) {
            *e += xv;
        }
    }
    let x_eff = std::mem::take(&mut ws.x_eff);
    merge_and_apply(k, &x_eff, s, ws);
    ws.x_eff = x_eff;
}

fn forward<T: Float>(
    method: BenchMethod,
    level: GateLevel,
    kernel: &Kernel<T>,
    x: &[T],
    s: usize,
    ws: &mut Workspace<T>,
) {
    match (method, level == GateLevel::Token) {
        (BenchMethod::MixOutputs, false) => moe_forward_sequence(kernel, x, s, ws),
        (BenchMethod::MixOutputs, true) => moe_forward_token(kernel, x, s, ws),
        (BenchMethod::MergeParams, false) => merge_and_apply(kernel, x, s, ws),
        (BenchMethod::MergeParams, true) => meo_forward_token(kernel, x, s, ws),
    }
}

/// Linear-interpolation percentile of an already sorted sample.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Times both methods across the selection sweep on a shared seeded layer
/// and batch. Only forward passes are timed; construction stays outside.
pub fn run_bench(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let p = cfg.profile();
    if p.level == GateLevel::Task {
        return Err(Error::InvalidConfig(
            "bench routes per token or per sequence; use level \"token\" or \"sequence\"".into(),
        ));
    }
    if p.n_experts == 0 {
        return Err(Error::InvalidConfig("bench needs at least one expert".into()));
    }
    let (d, d_ff, s, n, r) = (
        p.d_model as usize,
        p.d_ff as usize,
        p.seq_len as usize,
        p.n_experts as usize,
        p.r as usize,
    );
    let params = init_params(d, d_ff, n, r, cfg.seed);
    let mut rng = Rng::new(cfg.seed ^ 0x00c0_ffee);
    let x64: Vec<f64> = (0..s * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
    match cfg.precision {
        Precision::F32 => run_with::<f32>(cfg, &params, &x64),
        Precision::F64 => run_with::<f64>(cfg, &params, &x64),
    }
}

fn run_with<T: Float>(cfg: &RunConfig, params: &KernelParams, x64: &[f64]) -> Result<Vec<BenchRow>> {
    let p = cfg.profile();
    let level = p.level;
    let s = p.seq_len as usize;
    let x: Vec<T> = x64.iter().map(|&v| T::from_f64(v)).collect();
    let mut rows = Vec::new();
    for method in [BenchMethod::MixOutputs, BenchMethod::MergeParams] {
        for &m in cfg.m_sweep() {
            let kernel = Kernel::<T>::new(params, m as usize, cfg.renormalize);
            let mut ws = Workspace::new(s, kernel.d, kernel.d_ff, kernel.n, kernel.hid);
            let mut samples = Vec::with_capacity(cfg.repeats);
            for it in 0..cfg.warmup + cfg.repeats {
                let t0 = Instant::now();
                forward(method, level, &kernel, &x, s, &mut ws);
                black_box(ws.out.as_slice());
                let dt = t0.elapsed().as_secs_f64() * 1e3;
                if it >= cfg.warmup {
                    samples.push(dt);
                }
            }
            samples.sort_by(f64::total_cmp);
            rows.push(BenchRow {
                method: method_name(method, level),
                level: level.name(),
                m,
                n: p.n_experts,
                d: p.d_model,
                d_ff: p.d_ff,
                s: p.seq_len,
                flops_model: bench_layer_flops(
                    method, level, p.d_model, p.d_ff, p.seq_len, p.n_experts, m, p.r,
                ),
                wall_ms_median: percentile(&samples, 0.5),
                wall_ms_p10: percentile(&samples, 0.1),
                wall_ms_p90: percentile(&samples, 0.9),
            });
        }
    }
    Ok(rows)
}
