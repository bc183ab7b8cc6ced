//! Reverse-mode differentiation of the recurrence.
//!
//! The forward pass records the state trajectory (full tape, or chunk-entry
//! checkpoints that are replayed on demand); the backward pass sweeps tokens
//! in reverse, propagating one `dv x dk` adjoint of the running state and
//! producing gradients for every kernel input: queries, keys, values, the
//! per-token decay and write strengths, the per-stream feedback blend and
//! output-correction strength, and the entry state.
//!
//! Gradient parameterization: the per-stream blend `b` enters the update
//! through `beta_tilde = b * beta_t` (and, for the rescaled-key variant,
//! through the output correction), so `d_b` is reported with that dependence
//! chained through. Checkpointed backward replays each chunk with the same
//! sequential step as the full-tape path, so the two produce bitwise
//! identical gradients when the checkpoints come from the same sequential
//! forward.

use crate::error::{KernelError, Result};
use crate::gates::GateSignals;
use crate::numerics::Matrix;
use crate::real::Real;
use crate::recurrence::{step, Coefficients, HeadState, StreamInputs, UpdateOrder, Variant};

/// The recorded state trajectory: `states[0]` is the entry state and
/// `states[t + 1]` the state after token `t`.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    pub states: Vec<Matrix<T>>,
}

/// Run the recurrence, recording every intermediate state.
pub fn forward_with_tape<T: Real>(
    variant: Variant,
    order: UpdateOrder,
    inputs: &StreamInputs<T>,
    s0: &Matrix<T>,
) -> Result<(Matrix<T>, Tape<T>)> {
    inputs.validate(variant)?;
    check_entry_state(inputs, s0)?;
    let mut state = HeadState { s: s0.clone() };
    let mut outputs = Matrix::zeros(inputs.len, inputs.dv);
    let mut states = Vec::with_capacity(inputs.len + 1);
    states.push(s0.clone());
    for t in 0..inputs.len {
        let si = inputs.step(t);
        let coeffs = Coefficients::for_variant(variant, order, &si.gates);
        step(&mut state, coeffs, &si, outputs.row_mut(t));
        states.push(state.s.clone());
    }
    Ok((outputs, Tape { states }))
}

/// Chunk-entry states recorded by [`forward_checkpointed`]: enough to replay
/// any chunk's trajectory without storing every token's state.
#[derive(Debug, Clone)]
pub struct Checkpoints<T> {
    pub chunk_size: usize,
    /// Entry state of chunk `i` (the state before token `i * chunk_size`).
    pub entries: Vec<Matrix<T>>,
}

/// Run the recurrence sequentially, keeping only chunk-entry states.
/// Returns `(outputs, checkpoints, final_state)`.
pub fn forward_checkpointed<T: Real>(
    variant: Variant,
    order: UpdateOrder,
    inputs: &StreamInputs<T>,
    s0: &Matrix<T>,
    chunk_size: usize,
) -> Result<(Matrix<T>, Checkpoints<T>, Matrix<T>)> {
    if chunk_size == 0 {
        return Err(KernelError::contract("forward_checkpointed", "chunk_size must be positive"));
    }
    inputs.validate(variant)?;
    check_entry_state(inputs, s0)?;
    let mut state = HeadState { s: s0.clone() };
    let mut outputs = Matrix::zeros(inputs.len, inputs.dv);
    let mut entries = Vec::new();
    for t in 0..inputs.len {
        if t % chunk_size == 0 {
            entries.push(state.s.clone());
        }
        let si = inputs.step(t);
        let coeffs = Coefficients::for_variant(variant, order, &si.gates);
        step(&mut state, coeffs, &si, outputs.row_mut(t));
    }
    Ok((outputs, Checkpoints { chunk_size, entries }, state.s))
}

/// Gradients of every kernel input for one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle<T> {
    /// `len x dk`.
    pub dq: Matrix<T>,
    /// `len x dk`.
    pub dk: Matrix<T>,
    /// `len x dv`.
    pub dv: Matrix<T>,
    /// Per-token decay gradients (zero for variants with a fixed decay).
    pub dalpha: Vec<T>,
    /// Per-token write-strength gradients.
    pub dbeta: Vec<T>,
    /// Gradient of the per-stream feedback blend `b` (chained through
    /// `beta_tilde = b * beta_t` at every token).
    pub db: T,
    /// Gradient of the per-stream output-correction strength.
    pub dd: T,
    /// Gradient of the entry state, `dv x dk`.
    pub ds0: Matrix<T>,
}

impl<T: Real> GradBundle<T> {
    fn zeros(len: usize, dk: usize, dv: usize) -> Self {
        GradBundle {
            dq: Matrix::zeros(len, dk),
            dk: Matrix::zeros(len, dk),
            dv: Matrix::zeros(len, dv),
            dalpha: vec![T::zero(); len],
            dbeta: vec![T::zero(); len],
            db: T::zero(),
            dd: T::zero(),
            ds0: Matrix::zeros(dv, dk),
        }
    }
}

/// Partial derivatives of the unified update coefficients with respect to the
/// gate signals, for one token. Rows: which coefficient; columns: which gate.
struct CoeffChain<T> {
    /// d(alpha_coeff)/d(alpha_gate) -- zero when the variant fixes the decay.
    a_a: T,
    /// d(beta_coeff)/d(beta_gate).
    b_b: T,
    /// d(gamma)/d(alpha_gate), d(gamma)/d(beta_gate), d(gamma)/d(b).
    g_a: T,
    g_b: T,
    g_blend: T,
    /// d(delta)/d(d), d(delta)/d(b).
    d_d: T,
    d_blend: T,
}

fn coeff_chain<T: Real>(variant: Variant, order: UpdateOrder, g: &GateSignals<T>) -> CoeffChain<T> {
    let zero = T::zero();
    let one = T::one();
    let two = T::from_f64(2.0);
    let mut ch = match variant {
        Variant::LinearAttn => CoeffChain {
            a_a: zero, b_b: zero, g_a: zero, g_b: zero, g_blend: zero, d_d: zero, d_blend: zero,
        },
        Variant::GatedLinear => CoeffChain {
            a_a: one, b_b: one, g_a: zero, g_b: zero, g_blend: zero, d_d: zero, d_blend: zero,
        },
        Variant::DeltaNet => CoeffChain {
            a_a: zero, b_b: one, g_a: zero, g_b: one, g_blend: zero, d_d: zero, d_blend: zero,
        },
        Variant::GatedDeltaNet => CoeffChain {
            a_a: one, b_b: one, g_a: g.beta, g_b: g.alpha, g_blend: zero, d_d: zero, d_blend: zero,
        },
        // gamma = b * beta, delta = d
        Variant::CombaSplr => CoeffChain {
            a_a: one, b_b: one, g_a: zero, g_b: g.b, g_blend: g.beta, d_d: one, d_blend: zero,
        },
        // gamma = 2 alpha b beta, delta = d
        Variant::CombaIplr => CoeffChain {
            a_a: one,
            b_b: one,
            g_a: two * g.b * g.beta,
            g_b: two * g.alpha * g.b,
            g_blend: two * g.alpha * g.beta,
            d_d: one,
            d_blend: zero,
        },
        // gamma = b * beta, delta = d * b
        Variant::CombaPk => CoeffChain {
            a_a: one, b_b: one, g_a: zero, g_b: g.b, g_blend: g.beta, d_d: g.b, d_blend: g.d,
        },
    };
    if order == UpdateOrder::DecayedCorrection
        && matches!(variant, Variant::CombaSplr | Variant::CombaIplr | Variant::CombaPk)
    {
        // gamma' = alpha * gamma: product rule against the base partials.
        let base = Coefficients::for_variant(variant, UpdateOrder::Normative, g);
        ch.g_a = base.gamma + g.alpha * ch.g_a;
        ch.g_b = g.alpha * ch.g_b;
        ch.g_blend = g.alpha * ch.g_blend;
    }
    ch
}

fn check_entry_state<T: Real>(inputs: &StreamInputs<T>, s0: &Matrix<T>) -> Result<()> {
    if s0.rows() != inputs.dv || s0.cols() != inputs.dk {
        return Err(KernelError::dim(
            "entry state",
            format!("{}x{}", inputs.dv, inputs.dk),
            format!("{}x{}", s0.rows(), s0.cols()),
        ));
    }
    Ok(())
}

/// One reverse sweep over `tokens` (absolute indices, walked back to front).
/// `states[r]` must hold the state before local token `r` and
/// `states[r + 1]` the state after it. `g_state` carries the adjoint of the
/// state after the last token in `tokens` on entry, and of the state before
/// the first on exit. Per-token gradients land at absolute rows of `bundle`.
fn reverse_sweep<T: Real>(
    variant: Variant,
    order: UpdateOrder,
    inputs: &StreamInputs<T>,
    states: &[Matrix<T>],
    go: &Matrix<T>,
    tokens: std::ops::Range<usize>,
    g_state: &mut Matrix<T>,
    bundle: &mut GradBundle<T>,
) {
    let (dk, dv) = (inputs.dk, inputs.dv);
    let base = tokens.start;
    let mut gq_tilde = vec![T::zero(); dk];
    let mut m = vec![T::zero(); dv];
    let mut gw = vec![T::zero(); dv];
    for t in tokens.rev() {
        let r = t - base;
        let si = inputs.step(t);
        let co = Coefficients::for_variant(variant, order, &si.gates);
        let s_prev = &states[r];
        let s_now = &states[r + 1];
        let go_t = go.row(t);

        // o_t = S_t (q_t - delta k_t): the readout feeds both the state
        // adjoint and the query/key/delta gradients.
        let mut g_delta = T::zero();
        for j in 0..dk {
            let mut acc = T::zero();
            for i in 0..dv {
                acc = acc + s_now.get(i, j) * go_t[i];
            }
            gq_tilde[j] = acc;
            bundle.dq.row_mut(t)[j] = bundle.dq.row_mut(t)[j] + acc;
            bundle.dk.row_mut(t)[j] = bundle.dk.row_mut(t)[j] - co.delta * acc;
            g_delta = g_delta - acc * si.k[j];
        }
        // g_state += go (x) q_tilde: the readout's contribution to the
        // adjoint of S_t.
        for i in 0..dv {
            let go_i = go_t[i];
            for j in 0..dk {
                let qt = si.q[j] - co.delta * si.k[j];
                g_state.set(i, j, g_state.get(i, j) + go_i * qt);
            }
        }

        // Transition adjoints. Recompute m = S_{t-1} k and w = beta v -
        // gamma m from the tape.
        let mut g_alpha_coeff = T::zero();
        for i in 0..dv {
            let mut mi = T::zero();
            let mut fro = T::zero();
            for j in 0..dk {
                mi = mi + s_prev.get(i, j) * si.k[j];
                fro = fro + g_state.get(i, j) * s_prev.get(i, j);
            }
            m[i] = mi;
            g_alpha_coeff = g_alpha_coeff + fro;
        }
        let mut g_beta_coeff = T::zero();
        let mut g_gamma = T::zero();
        for i in 0..dv {
            let mut acc = T::zero();
            for j in 0..dk {
                acc = acc + g_state.get(i, j) * si.k[j];
            }
            gw[i] = acc;
            g_beta_coeff = g_beta_coeff + acc * si.v[i];
            g_gamma = g_gamma - acc * m[i];
            bundle.dv.row_mut(t)[i] = bundle.dv.row_mut(t)[i] + co.beta * acc;
        }
        // dk_t += G_S^T w  (w = beta v - gamma m is the rank-one row weight)
        // dk_t += S_{t-1}^T g_m with g_m = -gamma g_w
        for j in 0..dk {
            let mut acc = T::zero();
            for i in 0..dv {
                let w_i = co.beta * si.v[i] - co.gamma * m[i];
                acc = acc + g_state.get(i, j) * w_i - co.gamma * s_prev.get(i, j) * gw[i];
            }
            bundle.dk.row_mut(t)[j] = bundle.dk.row_mut(t)[j] + acc;
        }
        // G_S <- alpha G_S + g_m (x) k
        for i in 0..dv {
            let gm_i = -co.gamma * gw[i];
            for j in 0..dk {
                let e = co.alpha * g_state.get(i, j) + gm_i * si.k[j];
                g_state.set(i, j, e);
            }
        }

        // Chain the unified-coefficient gradients back to the gate signals.
        let ch = coeff_chain(variant, order, &si.gates);
        bundle.dalpha[t] = bundle.dalpha[t] + ch.a_a * g_alpha_coeff + ch.g_a * g_gamma;
        bundle.dbeta[t] = bundle.dbeta[t] + ch.b_b * g_beta_coeff + ch.g_b * g_gamma;
        bundle.db = bundle.db + ch.g_blend * g_gamma + ch.d_blend * g_delta;
        bundle.dd = bundle.dd + ch.d_d * g_delta;
    }
}

/// Full-tape backward pass. `go` is the loss gradient of the outputs
/// (`len x dv`); `ds_final`, when present, the loss gradient of the final
/// state.
pub fn backward_recurrent<T: Real>(
    variant: Variant,
    order: UpdateOrder,
    inputs: &StreamInputs<T>,
    tape: &Tape<T>,
    go: &Matrix<T>,
    ds_final: Option<&Matrix<T>>,
) -> Result<GradBundle<T>> {
    let len = inputs.len;
    if tape.states.len() != len + 1 {
        return Err(KernelError::dim(
            "backward_recurrent tape",
            format!("{} states", len + 1),
            format!("{}", tape.states.len()),
        ));
    }
    if go.rows() != len || go.cols() != inputs.dv {
        return Err(KernelError::dim(
            "backward_recurrent output gradient",
            format!("{}x{}", len, inputs.dv),
            format!("{}x{}", go.rows(), go.cols()),
        ));
    }
    let mut bundle = GradBundle::zeros(len, inputs.dk, inputs.dv);
    let mut g_state = match ds_final {
        Some(g) => g.clone(),
        None => Matrix::zeros(inputs.dv, inputs.dk),
    };
    reverse_sweep(variant, order, inputs, &tape.states, go, 0..len, &mut g_state, &mut bundle);
    bundle.ds0 = g_state;
    Ok(bundle)
}

/// Checkpointed backward pass: chunks are replayed (sequentially, newest
/// first) from their recorded entry states, then swept in reverse with the
/// same per-token arithmetic as [`backward_recurrent`]. Given checkpoints
/// from [`forward_checkpointed`], the result is bitwise identical to the
/// full-tape gradient; given chunk-entry states recovered from the chunkwise
/// forward pass, it agrees to roundoff.
pub fn backward_chunkwise<T: Real>(
    variant: Variant,
    order: UpdateOrder,
    inputs: &StreamInputs<T>,
    checkpoints: &Checkpoints<T>,
    go: &Matrix<T>,
    ds_final: Option<&Matrix<T>>,
) -> Result<GradBundle<T>> {
    let len = inputs.len;
    let c = checkpoints.chunk_size;
    if c == 0 {
        return Err(KernelError::contract("backward_chunkwise", "chunk_size must be positive"));
    }
    let expected = len.div_ceil(c);
    if checkpoints.entries.len() != expected {
        return Err(KernelError::dim(
            "backward_chunkwise checkpoints",
            format!("{expected} chunk entries"),
            format!("{}", checkpoints.entries.len()),
        ));
    }
    if go.rows() != len || go.cols() != inputs.dv {
        return Err(KernelError::dim(
            "backward_chunkwise output gradient",
            format!("{}x{}", len, inputs.dv),
            format!("{}x{}", go.rows(), go.cols()),
        ));
    }
    let mut bundle = GradBundle::zeros(len, inputs.dk, inputs.dv);
    let mut g_state = match ds_final {
        Some(g) => g.clone(),
        None => Matrix::zeros(inputs.dv, inputs.dk),
    };
    if len == 0 {
        bundle.ds0 = g_state;
        return Ok(bundle);
    }
    for chunk_ix in (0..expected).rev() {
        let start = chunk_ix * c;
        let end = ((chunk_ix + 1) * c).min(len);
        // Replay this chunk's trajectory from its entry state with the exact
        // sequential step used on the recording pass.
        let mut states = Vec::with_capacity(end - start + 1);
        states.push(checkpoints.entries[chunk_ix].clone());
        let mut state = HeadState { s: checkpoints.entries[chunk_ix].clone() };
        let mut scratch = vec![T::zero(); inputs.dv];
        for t in start..end {
            let si = inputs.step(t);
            let co = Coefficients::for_variant(variant, order, &si.gates);
            step(&mut state, co, &si, &mut scratch);
            states.push(state.s.clone());
        }
        reverse_sweep(variant, order, inputs, &states, go, start..end, &mut g_state, &mut bundle);
    }
    bundle.ds0 = g_state;
    Ok(bundle)
}
