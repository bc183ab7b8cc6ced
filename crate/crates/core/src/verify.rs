//! Self-verification suites.
//!
//! Five suites probe the kernel's load-bearing claims: dense-path
//! equivalence, the variant reduction lattice, gradient correctness,
//! transition spectra, and the triangular-solve identity behind the chunk
//! assembly. They are shared between the command-line `verify` command and
//! the integration tests, so a regression reported by either names the same
//! failing case.
//!
//! A deliberate fault can be injected (see [`Mutation`]) to demonstrate the
//! suites catch real defects; the equivalence suite must fail under it.

use crate::autodiff::{backward_chunkwise, backward_recurrent, forward_checkpointed, forward_with_tape};
use crate::chunkwise::{
    run_chunkwise_injected, ut_transform, ChunkInputs, FaultInjection, materialize_pseudo_decay,
};
use crate::error::{KernelError, Result};
use crate::gates::GateSignals;
use crate::numerics::{dot, Matrix};
use crate::real::Real;
use crate::recurrence::{
    materialize_transition, run_recurrent_with_order, Coefficients, HeadState, StreamInputs,
    UpdateOrder, Variant,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::{Duration, Instant};

/// Names accepted by [`run_suite`], in canonical order.
pub const SUITE_NAMES: [&str; 5] =
    ["equivalence", "reductions", "gradients", "eigenvalues", "ut-identity"];

/// Cap on recorded failure messages per suite (all failures are counted).
const MAX_RECORDED_FAILURES: usize = 20;

/// Outcome of one suite.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    /// Number of independent cases checked.
    pub cases: usize,
    /// Total number of failed checks.
    pub failure_count: usize,
    /// First few failure descriptions (up to [`MAX_RECORDED_FAILURES`]).
    pub failures: Vec<String>,
    pub elapsed: Duration,
}

impl SuiteReport {
    fn new(name: &'static str) -> Self {
        SuiteReport {
            name,
            cases: 0,
            failure_count: 0,
            failures: Vec::new(),
            elapsed: Duration::ZERO,
        }
    }

    fn fail(&mut self, msg: String) {
        self.failure_count += 1;
        if self.failures.len() < MAX_RECORDED_FAILURES {
            self.failures.push(msg);
        }
    }

    pub fn passed(&self) -> bool {
        self.failure_count == 0
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{}: {} cases, {} failures, {:.2}s [{}]",
            self.name,
            self.cases,
            self.failure_count,
            self.elapsed.as_secs_f64(),
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Deliberate defects for validating the suites themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// Negate the chunk assembly's feedback keys.
    FeedbackSignFlip,
}

impl Mutation {
    pub fn name(self) -> &'static str {
        match self {
            Mutation::FeedbackSignFlip => "feedback-sign-flip",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "feedback-sign-flip" => Ok(Mutation::FeedbackSignFlip),
            other => Err(KernelError::contract(
                "mutation",
                format!("unknown mutation `{other}`"),
            )),
        }
    }

    fn faults(self) -> FaultInjection {
        match self {
            Mutation::FeedbackSignFlip => FaultInjection { flip_feedback_sign: true },
        }
    }
}

/// Suite configuration.
#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub mutation: Option<Mutation>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { seed: 42, mutation: None }
    }
}

/// Run one suite by name.
pub fn run_suite(name: &str, opts: &VerifyOptions) -> Result<SuiteReport> {
    match name {
        "equivalence" => Ok(run_equivalence(opts)),
        "reductions" => Ok(run_reductions(opts)),
        "gradients" => Ok(run_gradients(opts)),
        "eigenvalues" => Ok(run_eigenvalues(opts)),
        "ut-identity" => Ok(run_ut_identity(opts)),
        other => Err(KernelError::contract(
            "verify",
            format!("unknown suite `{other}`; available: {}", SUITE_NAMES.join(", ")),
        )),
    }
}

/// Run every suite in canonical order.
pub fn run_all(opts: &VerifyOptions) -> Vec<SuiteReport> {
    SUITE_NAMES
        .iter()
        .map(|name| run_suite(name, opts).expect("canonical suite names are valid"))
        .collect()
}

const CHUNKWISE_VARIANTS: [Variant; 4] = [
    Variant::DeltaNet,
    Variant::GatedDeltaNet,
    Variant::CombaSplr,
    Variant::CombaPk,
];

fn unit_key(rng: &mut ChaCha8Rng, dk: usize) -> Vec<f64> {
    loop {
        let k: Vec<f64> = (0..dk).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = dot(&k, &k).sqrt();
        if n > 1e-3 {
            return k.iter().map(|x| x / n).collect();
        }
    }
}

/// Random admissible stream with gate draws kept strictly inside their open
/// ranges. `shared_blend` fixes one `b`/`d` pair for the whole stream
/// (matching the per-stream gradient parameterization).
fn random_stream(
    rng: &mut ChaCha8Rng,
    len: usize,
    dk: usize,
    dv: usize,
    shared_blend: bool,
) -> StreamInputs<f64> {
    let stream_b = rng.random_range(0.2..0.8);
    let stream_d = rng.random_range(-0.5..0.5);
    let mut s = StreamInputs::new(len, dk, dv);
    for t in 0..len {
        let q = unit_key(rng, dk);
        let k = unit_key(rng, dk);
        let v: Vec<f64> = (0..dv).map(|_| rng.random_range(-1.0..1.0)).collect();
        let beta = rng.random_range(0.05..0.95);
        let (b, d) = if shared_blend {
            (stream_b, stream_d)
        } else {
            (rng.random_range(0.05..0.95), rng.random_range(-0.5..0.5))
        };
        let gates = GateSignals {
            alpha: rng.random_range(0.75..0.995),
            beta,
            beta_tilde: b * beta,
            b,
            d,
        };
        s.set_step(t, &q, &k, &v, gates);
    }
    s
}

fn cast_stream(inputs: &StreamInputs<f64>) -> StreamInputs<f32> {
    StreamInputs {
        len: inputs.len,
        dk: inputs.dk,
        dv: inputs.dv,
        q: inputs.q.iter().map(|x| *x as f32).collect(),
        k: inputs.k.iter().map(|x| *x as f32).collect(),
        v: inputs.v.iter().map(|x| *x as f32).collect(),
        gates: inputs
            .gates
            .iter()
            .map(|g| GateSignals {
                alpha: g.alpha as f32,
                beta: g.beta as f32,
                beta_tilde: g.beta_tilde as f32,
                b: g.b as f32,
                d: g.d as f32,
            })
            .collect(),
    }
}

fn compare_paths<T: Real>(
    variant: Variant,
    order: UpdateOrder,
    inputs: &StreamInputs<T>,
    chunk: usize,
    faults: FaultInjection,
    tol: f64,
    label: &str,
    report: &mut SuiteReport,
) {
    let mut rstate = HeadState::zeros(inputs.dv, inputs.dk);
    let rout = match run_recurrent_with_order(variant, order, inputs, &mut rstate) {
        Ok(o) => o,
        Err(e) => {
            report.fail(format!("{label}: recurrent path failed: {e}"));
            return;
        }
    };
    let mut cstate = HeadState::zeros(inputs.dv, inputs.dk);
    let cout = match run_chunkwise_injected(variant, order, inputs, &mut cstate, chunk, faults) {
        Ok(o) => o,
        Err(e) => {
            report.fail(format!("{label}: chunkwise path failed: {e}"));
            return;
        }
    };
    let out_diff = rout.max_abs_diff(&cout);
    let state_diff = rstate.s.max_abs_diff(&cstate.s);
    if !(out_diff < tol) || !(state_diff < tol) {
        report.fail(format!(
            "{label}: paths diverge (outputs {out_diff:.3e}, state {state_diff:.3e}, tol {tol:.0e})"
        ));
    }
}

/// Suite 1: chunkwise/recurrent equivalence over randomized shapes, both
/// precisions.
fn run_equivalence(opts: &VerifyOptions) -> SuiteReport {
    let mut report = SuiteReport::new("equivalence");
    let start = Instant::now();
    let faults = opts.mutation.map(Mutation::faults).unwrap_or_default();
    let n_cases = 200;
    for case in 0..n_cases {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(1_000_003) + case as u64);
        let variant = CHUNKWISE_VARIANTS[case % 4];
        let order = if (case / 4) % 2 == 0 {
            UpdateOrder::Normative
        } else {
            UpdateOrder::DecayedCorrection
        };
        let single = case % 2 == 1;
        let len = rng.random_range(1..258);
        let chunk = [1usize, 2, 16, 64][rng.random_range(0..4)];
        let dk = [4usize, 32][rng.random_range(0..2)];
        let dv = [4usize, 32][rng.random_range(0..2)];
        let batches = rng.random_range(1..=2);
        let heads = rng.random_range(1..=2);
        for b in 0..batches {
            for h in 0..heads {
                let inputs = random_stream(&mut rng, len, dk, dv, false);
                let label = format!(
                    "case {case} ({variant}, {order:?}, {}, T={len}, C={chunk}, dk={dk}, dv={dv}, stream b{b}h{h})",
                    if single { "single" } else { "double" }
                );
                if single {
                    let inputs32 = cast_stream(&inputs);
                    compare_paths(variant, order, &inputs32, chunk, faults, 1e-4, &label, &mut report);
                } else {
                    compare_paths(variant, order, &inputs, chunk, faults, 1e-10, &label, &mut report);
                }
            }
        }
        report.cases += 1;
    }
    report.elapsed = start.elapsed();
    report
}

/// Suite 2: the reduction lattice between variants, per-token path, double
/// precision, 1e-12.
fn run_reductions(opts: &VerifyOptions) -> SuiteReport {
    let mut report = SuiteReport::new("reductions");
    let start = Instant::now();
    let tol = 1e-12;
    let run = |variant: Variant, inputs: &StreamInputs<f64>| -> (Matrix<f64>, Matrix<f64>) {
        let mut state = HeadState::zeros(inputs.dv, inputs.dk);
        let out = run_recurrent_with_order(variant, UpdateOrder::Normative, inputs, &mut state)
            .expect("admissible stream");
        (out, state.s)
    };
    for case in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(7_000_003) + case as u64);
        let len = rng.random_range(1..64);
        let dk = rng.random_range(3..12);
        let dv = rng.random_range(2..10);
        let base = random_stream(&mut rng, len, dk, dv, false);

        // (a) feedback = alpha * beta, no output correction => decayed delta rule.
        let mut s = base.clone();
        for g in &mut s.gates {
            g.beta_tilde = g.alpha * g.beta;
            g.d = 0.0;
        }
        let (o1, s1) = run(Variant::CombaSplr, &s);
        let (o2, s2) = run(Variant::GatedDeltaNet, &s);
        let diff = o1.max_abs_diff(&o2).max(s1.max_abs_diff(&s2));
        if !(diff < tol) {
            report.fail(format!("case {case}: splr vs gated-deltanet diff {diff:.3e}"));
        }

        // (b) additionally alpha = 1 => plain delta rule.
        let mut s = base.clone();
        for g in &mut s.gates {
            g.alpha = 1.0;
            g.beta_tilde = g.beta;
            g.d = 0.0;
        }
        let (o1, s1) = run(Variant::CombaSplr, &s);
        let (o2, s2) = run(Variant::DeltaNet, &s);
        let diff = o1.max_abs_diff(&o2).max(s1.max_abs_diff(&s2));
        if !(diff < tol) {
            report.fail(format!("case {case}: splr vs deltanet diff {diff:.3e}"));
        }

        // (c) no feedback, no correction => gated accumulation.
        let mut s = base.clone();
        for g in &mut s.gates {
            g.beta_tilde = 0.0;
            g.b = 0.0;
            g.d = 0.0;
        }
        let (o1, s1) = run(Variant::CombaSplr, &s);
        let (o2, s2) = run(Variant::GatedLinear, &s);
        let diff = o1.max_abs_diff(&o2).max(s1.max_abs_diff(&s2));
        if !(diff < tol) {
            report.fail(format!("case {case}: splr vs gated-linear diff {diff:.3e}"));
        }

        // (d) unit gates => ungated accumulation.
        let mut s = base.clone();
        for g in &mut s.gates {
            g.alpha = 1.0;
            g.beta = 1.0;
            g.beta_tilde = 0.0;
            g.b = 0.0;
            g.d = 0.0;
        }
        let (o1, s1) = run(Variant::GatedLinear, &s);
        let (o2, s2) = run(Variant::LinearAttn, &s);
        let diff = o1.max_abs_diff(&o2).max(s1.max_abs_diff(&s2));
        if !(diff < tol) {
            report.fail(format!("case {case}: gated-linear vs linear-attn diff {diff:.3e}"));
        }

        // (e) rescaled-feedback-key variant == base variant with the output
        // correction folded into d.
        let (o1, s1) = run(Variant::CombaPk, &base);
        let mut s = base.clone();
        for g in &mut s.gates {
            g.d *= g.b;
        }
        let (o2, s2) = run(Variant::CombaSplr, &s);
        let diff = o1.max_abs_diff(&o2).max(s1.max_abs_diff(&s2));
        if !(diff < tol) {
            report.fail(format!("case {case}: pk vs reparameterized splr diff {diff:.3e}"));
        }

        report.cases += 1;
    }
    report.elapsed = start.elapsed();
    report
}

/// Suite 3: reverse-mode gradients vs central finite differences on every
/// input pathway, for every variant and update order; checkpointed backward
/// vs full tape.
fn run_gradients(opts: &VerifyOptions) -> SuiteReport {
    let mut report = SuiteReport::new("gradients");
    let start = Instant::now();
    let eps = 1e-5;
    let fd_tol = 1e-5;
    for (vi, variant) in Variant::ALL.iter().copied().enumerate() {
        for (oi, order) in [UpdateOrder::Normative, UpdateOrder::DecayedCorrection]
            .into_iter()
            .enumerate()
        {
            let mut rng =
                ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(13_000_003) + (vi * 2 + oi) as u64);
            let (len, dk, dv) = (12, 4, 3);
            let inputs = random_stream(&mut rng, len, dk, dv, true);
            let s0 = Matrix::from_fn(dv, dk, |_, _| rng.random_range(-0.5..0.5));
            let go = Matrix::from_fn(len, dv, |_, _| rng.random_range(-1.0..1.0));
            let r_final = Matrix::from_fn(dv, dk, |_, _| rng.random_range(-1.0..1.0));
            let (_, tape) = match forward_with_tape(variant, order, &inputs, &s0) {
                Ok(x) => x,
                Err(e) => {
                    report.fail(format!("{variant}/{order:?}: forward failed: {e}"));
                    continue;
                }
            };
            let g = match backward_recurrent(variant, order, &inputs, &tape, &go, Some(&r_final)) {
                Ok(g) => g,
                Err(e) => {
                    report.fail(format!("{variant}/{order:?}: backward failed: {e}"));
                    continue;
                }
            };
            let loss = |inp: &StreamInputs<f64>, s0: &Matrix<f64>| -> f64 {
                let (out, tape) = forward_with_tape(variant, order, inp, s0).unwrap();
                let mut l = 0.0;
                for t in 0..inp.len {
                    l += dot(out.row(t), go.row(t));
                }
                let sf = tape.states.last().unwrap();
                for i in 0..sf.rows() {
                    l += dot(sf.row(i), r_final.row(i));
                }
                l
            };
            let mut check = |analytic: f64, plus: f64, minus: f64, what: &str| {
                let numeric = (plus - minus) / (2.0 * eps);
                let rel =
                    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                if !(rel < fd_tol) {
                    report.fail(format!(
                        "{variant}/{order:?} {what}: analytic {analytic:.6e} vs numeric {numeric:.6e} (rel {rel:.3e})"
                    ));
                }
            };
            // Sampled coordinates on each pathway.
            for _ in 0..6 {
                let t = rng.random_range(0..len);
                let j = rng.random_range(0..dk);
                let i = rng.random_range(0..dv);
                let mut p = inputs.clone();
                p.q[t * dk + j] += eps;
                let mut m = inputs.clone();
                m.q[t * dk + j] -= eps;
                check(g.dq.get(t, j), loss(&p, &s0), loss(&m, &s0), &format!("q[{t},{j}]"));
                let mut p = inputs.clone();
                p.k[t * dk + j] += eps;
                let mut m = inputs.clone();
                m.k[t * dk + j] -= eps;
                check(g.dk.get(t, j), loss(&p, &s0), loss(&m, &s0), &format!("k[{t},{j}]"));
                let mut p = inputs.clone();
                p.v[t * dv + i] += eps;
                let mut m = inputs.clone();
                m.v[t * dv + i] -= eps;
                check(g.dv.get(t, i), loss(&p, &s0), loss(&m, &s0), &format!("v[{t},{i}]"));
                let mut p = inputs.clone();
                p.gates[t].alpha += eps;
                let mut m = inputs.clone();
                m.gates[t].alpha -= eps;
                check(g.dalpha[t], loss(&p, &s0), loss(&m, &s0), &format!("alpha[{t}]"));
                let mut p = inputs.clone();
                p.gates[t].beta += eps;
                p.gates[t].beta_tilde = p.gates[t].b * p.gates[t].beta;
                let mut m = inputs.clone();
                m.gates[t].beta -= eps;
                m.gates[t].beta_tilde = m.gates[t].b * m.gates[t].beta;
                check(g.dbeta[t], loss(&p, &s0), loss(&m, &s0), &format!("beta[{t}]"));
            }
            let mut p = inputs.clone();
            let mut m = inputs.clone();
            for t in 0..len {
                p.gates[t].b += eps;
                p.gates[t].beta_tilde = p.gates[t].b * p.gates[t].beta;
                m.gates[t].b -= eps;
                m.gates[t].beta_tilde = m.gates[t].b * m.gates[t].beta;
            }
            check(g.db, loss(&p, &s0), loss(&m, &s0), "b");
            let mut p = inputs.clone();
            let mut m = inputs.clone();
            for t in 0..len {
                p.gates[t].d += eps;
                m.gates[t].d -= eps;
            }
            check(g.dd, loss(&p, &s0), loss(&m, &s0), "d");
            for _ in 0..4 {
                let i = rng.random_range(0..dv);
                let j = rng.random_range(0..dk);
                let mut sp = s0.clone();
                sp.set(i, j, sp.get(i, j) + eps);
                let mut sm = s0.clone();
                sm.set(i, j, sm.get(i, j) - eps);
                check(g.ds0.get(i, j), loss(&inputs, &sp), loss(&inputs, &sm), &format!("s0[{i},{j}]"));
            }

            // Checkpointed backward against the full tape: must agree to
            // 1e-10 (and is in fact bitwise-identical by construction).
            let (_, ck, _) = forward_checkpointed(variant, order, &inputs, &s0, 5).unwrap();
            let gc = backward_chunkwise(variant, order, &inputs, &ck, &go, Some(&r_final)).unwrap();
            let mut diff = g.dq.max_abs_diff(&gc.dq);
            diff = diff.max(g.dk.max_abs_diff(&gc.dk));
            diff = diff.max(g.dv.max_abs_diff(&gc.dv));
            diff = diff.max(g.ds0.max_abs_diff(&gc.ds0));
            for t in 0..len {
                diff = diff.max((g.dalpha[t] - gc.dalpha[t]).abs());
                diff = diff.max((g.dbeta[t] - gc.dbeta[t]).abs());
            }
            diff = diff.max((g.db - gc.db).abs()).max((g.dd - gc.dd).abs());
            if !(diff < 1e-10) {
                report.fail(format!(
                    "{variant}/{order:?}: checkpointed backward diverges from full tape by {diff:.3e}"
                ));
            }
            report.cases += 1;
        }
    }
    report.elapsed = start.elapsed();
    report
}

/// Suite 4: spectra of materialized transitions, against a symmetric
/// eigendecomposition oracle, over 1e3 random gate/key draws.
fn run_eigenvalues(opts: &VerifyOptions) -> SuiteReport {
    let mut report = SuiteReport::new("eigenvalues");
    let start = Instant::now();
    let dims = [2usize, 3, 4, 8, 16];
    for case in 0..1000 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(29_000_003) + case as u64);
        let dk = dims[case % dims.len()];
        let variant = if case % 2 == 0 { Variant::CombaSplr } else { Variant::CombaIplr };
        let alpha = rng.random_range(0.01..0.999);
        let beta = rng.random_range(0.01..0.99);
        let b = rng.random_range(0.01..0.99);
        let beta_tilde = b * beta;
        let g = GateSignals { alpha, beta, beta_tilde, b, d: 0.0 };
        let k = unit_key(&mut rng, dk);
        let co = Coefficients::for_variant(variant, UpdateOrder::Normative, &g);
        let a = materialize_transition(co, &k);
        // The transition is symmetric; use a symmetric eigendecomposition as
        // the oracle.
        let dm = nalgebra::DMatrix::from_fn(dk, dk, |i, j| a.get(i, j));
        let eig = nalgebra::SymmetricEigen::new(dm);
        let mut spectrum: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        spectrum.sort_by(|x, y| x.partial_cmp(y).unwrap());
        // Expected multiset: alpha with multiplicity dk-1, plus the
        // corrected direction's eigenvalue.
        let corrected = match variant {
            Variant::CombaSplr => alpha - beta_tilde,
            Variant::CombaIplr => alpha * (1.0 - 2.0 * beta_tilde),
            _ => unreachable!(),
        };
        let mut expected: Vec<f64> = std::iter::repeat_n(alpha, dk - 1).chain([corrected]).collect();
        expected.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mismatch = spectrum
            .iter()
            .zip(&expected)
            .map(|(s, e)| (s - e).abs())
            .fold(0.0f64, f64::max);
        if !(mismatch < 1e-10) {
            report.fail(format!(
                "case {case} ({variant}, dk={dk}): spectrum off closed form by {mismatch:.3e}"
            ));
        }
        // Interval bounds. The decayed bulk sits exactly at alpha; the
        // corrected direction must lie strictly inside.
        let bound_ok = match variant {
            Variant::CombaSplr => {
                // spectrum in (alpha-1, alpha], strictly above alpha-1.
                spectrum.iter().all(|l| *l > alpha - 1.0 && *l <= alpha + 1e-12)
                    && corrected > alpha - 1.0
            }
            Variant::CombaIplr => {
                // |corrected| < alpha strictly; bulk exactly alpha.
                spectrum.iter().all(|l| l.abs() <= alpha + 1e-12) && corrected.abs() < alpha
            }
            _ => unreachable!(),
        };
        // Containment of the whole admissible interval inside (-1, 1).
        let open_unit = alpha < 1.0 && alpha - 1.0 > -1.0;
        if !bound_ok || !open_unit {
            report.fail(format!(
                "case {case} ({variant}, dk={dk}): spectrum {spectrum:?} escapes its interval (alpha={alpha:.4}, beta_tilde={beta_tilde:.4})"
            ));
        }
        report.cases += 1;
    }
    report.elapsed = start.elapsed();
    report
}

/// Suite 5: the triangular-solve identity behind the chunk assembly, and the
/// WY form of transition products, at 1e-11.
fn run_ut_identity(opts: &VerifyOptions) -> SuiteReport {
    let mut report = SuiteReport::new("ut-identity");
    let start = Instant::now();
    let chunk_sizes = [1usize, 2, 16, 64, 128];
    for (ci, &c) in chunk_sizes.iter().enumerate() {
        for draw in 0..8 {
            let mut rng = ChaCha8Rng::seed_from_u64(
                opts.seed.wrapping_mul(31_000_003) + (ci * 100 + draw) as u64,
            );
            let dk = [4usize, 32][draw % 2];
            let dv = 4;
            let variant = CHUNKWISE_VARIANTS[draw % 4];
            let inputs = random_stream(&mut rng, c, dk, dv, false);
            let chunk =
                ChunkInputs::build(variant, UpdateOrder::Normative, &inputs, 0..c).unwrap();
            let wy = match ut_transform(&chunk) {
                Ok(w) => w,
                Err(e) => {
                    report.fail(format!("C={c} draw {draw}: ut_transform failed: {e}"));
                    continue;
                }
            };
            // Rebuild I + L independently and check M (I + L) = I.
            let mut il = Matrix::<f64>::identity(c);
            for r in 1..c {
                for s in 0..r {
                    let pk: f64 = (0..dk).map(|j| chunk.p.get(r, j) * chunk.k.get(s, j)).sum();
                    il.set(r, s, chunk.beta[r] * chunk.decay.ratio_before(r, s) * pk);
                }
            }
            let prod = wy.m.matmul(&il).unwrap();
            let resid = prod.max_abs_diff(&Matrix::identity(c));
            if !(resid < 1e-11) {
                report.fail(format!(
                    "C={c} draw {draw} ({variant}): M(I+L) deviates from I by {resid:.3e}"
                ));
            }
            // WY form of the first r transitions vs the direct product.
            let mut direct = Matrix::<f64>::identity(dk);
            let mut worst = 0.0f64;
            for r in 0..=c {
                let from_wy = materialize_pseudo_decay(&chunk, &wy, r);
                worst = worst.max(from_wy.max_abs_diff(&direct));
                if r < c {
                    let st = inputs.step(r);
                    let co = Coefficients::for_variant(variant, UpdateOrder::Normative, &st.gates);
                    direct = direct.matmul(&materialize_transition(co, st.k)).unwrap();
                }
            }
            if !(worst < 1e-11) {
                report.fail(format!(
                    "C={c} draw {draw} ({variant}): WY transition product deviates by {worst:.3e}"
                ));
            }
            report.cases += 1;
        }
    }
    report.elapsed = start.elapsed();
    report
}
