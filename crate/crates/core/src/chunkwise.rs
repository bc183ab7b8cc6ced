//! Chunkwise-parallel execution of the recurrence.
//!
//! The per-token update is linear in the state, so a whole chunk of `c`
//! tokens can be applied at once. Within a chunk (local token index `r`,
//! entry state `S`):
//!
//! ```text
//! S_r = prefix[r+1] * S + sum_{s<=r} (prefix[r+1]/prefix[s+1]) * pv_s k_s^T
//! ```
//!
//! where `prefix[r]` is the running product of decays and the pseudo-values
//! `pv_s` absorb both the write and the closed-loop correction. The
//! pseudo-values solve a unit-lower-triangular system (a compact WY
//! representation of the product of rank-one transitions), assembled once per
//! chunk and shared by the state update and the output map. Chunks talk to
//! each other only through their entry/exit states, so everything except the
//! short state scan runs as dense matrix products, parallel across chunks.
//!
//! Only variants whose feedback key is proportional to the write key can be
//! chunked this way with unit-triangular algebra kept well-conditioned; the
//! rest run on the per-token path and are rejected here with
//! [`KernelError::UnsupportedVariant`].

use crate::error::{KernelError, Result};
use crate::numerics::{masked_lower, tril_inverse_unit, DecayProducts, Matrix};
use crate::real::Real;
use crate::recurrence::{Coefficients, HeadState, StreamInputs, UpdateOrder, Variant};
use rayon::prelude::*;

/// Fault-injection switches: deliberately corrupt one step of the chunk
/// assembly so the verification suites can demonstrate they catch a real
/// defect. Never enabled on ordinary execution paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FaultInjection {
    /// Negate the feedback keys after chunk assembly (breaks the
    /// write-interaction solve).
    pub flip_feedback_sign: bool,
}

/// Whether `variant` runs on the chunkwise path.
pub fn supports_chunkwise(variant: Variant) -> bool {
    matches!(
        variant,
        Variant::DeltaNet | Variant::GatedDeltaNet | Variant::CombaSplr | Variant::CombaPk
    )
}

fn require_chunkwise(variant: Variant) -> Result<()> {
    if supports_chunkwise(variant) {
        Ok(())
    } else {
        Err(KernelError::UnsupportedVariant {
            variant: variant.name(),
            path: "the chunkwise path",
        })
    }
}

/// One chunk's inputs, reshaped for dense algebra.
#[derive(Debug, Clone)]
pub struct ChunkInputs<T> {
    pub len: usize,
    pub dk: usize,
    pub dv: usize,
    /// Write keys, `len x dk`.
    pub k: Matrix<T>,
    /// Values, `len x dv`.
    pub v: Matrix<T>,
    /// Feedback keys `p_t = (gamma_t / beta_t) k_t`, `len x dk`.
    pub p: Matrix<T>,
    /// Corrected queries `q_t - delta_t k_t`, `len x dk`.
    pub q_tilde: Matrix<T>,
    /// Write strengths.
    pub beta: Vec<T>,
    /// Decay cumulants of this chunk's `alpha` sequence.
    pub decay: DecayProducts<T>,
}

impl<T: Real> ChunkInputs<T> {
    /// Assemble the chunk covering `tokens` of `inputs` (validated by the
    /// caller) for `variant` under `order`.
    pub fn build(
        variant: Variant,
        order: UpdateOrder,
        inputs: &StreamInputs<T>,
        tokens: std::ops::Range<usize>,
    ) -> Result<Self> {
        require_chunkwise(variant)?;
        let c = tokens.len();
        let (dk, dv) = (inputs.dk, inputs.dv);
        let mut k = Matrix::zeros(c, dk);
        let mut v = Matrix::zeros(c, dv);
        let mut p = Matrix::zeros(c, dk);
        let mut q_tilde = Matrix::zeros(c, dk);
        let mut beta = Vec::with_capacity(c);
        let mut alpha = Vec::with_capacity(c);
        for (r, t) in tokens.enumerate() {
            let step = inputs.step(t);
            let co = Coefficients::for_variant(variant, order, &step.gates);
            k.row_mut(r).copy_from_slice(step.k);
            v.row_mut(r).copy_from_slice(step.v);
            // beta > 0 by the gate contract, so the feedback key is the write
            // key rescaled by gamma / beta.
            let scale = co.gamma / co.beta;
            for j in 0..dk {
                p.row_mut(r)[j] = scale * step.k[j];
                q_tilde.row_mut(r)[j] = step.q[j] - co.delta * step.k[j];
            }
            beta.push(co.beta);
            alpha.push(co.alpha);
        }
        let decay = DecayProducts::build(&alpha)?;
        Ok(ChunkInputs { len: c, dk, dv, k, v, p, q_tilde, beta, decay })
    }
}

/// Compact WY factors of one chunk's transition product.
#[derive(Debug, Clone)]
pub struct WyFactors<T> {
    /// Key-space rows `w_r`, `len x dk`: the accumulated product of the
    /// chunk's transitions is `prefix[r] I - sum_{s<r}
    /// (prefix[r]/prefix[s+1]) w_s k_s^T`.
    pub w: Matrix<T>,
    /// Input-driven pseudo-value seeds, `len x dv` (the entry-state
    /// contribution is subtracted later, once the entry state is known).
    pub u: Matrix<T>,
    /// Inverse of the unit-lower-triangular write-interaction matrix.
    pub m: Matrix<T>,
}

/// Solve the chunk's write-interaction system.
///
/// Row `r` of the system couples token `r`'s correction to every earlier
/// write it can see through the state: `(I + L) W = Diag(beta_r prefix[r]) P`
/// and `(I + L) U = Diag(beta) V`, with `L[r][s] = beta_r *
/// (prefix[r]/prefix[s+1]) * (p_r . k_s)` strictly below the diagonal. The
/// triangular inverse is formed once and reused for both right-hand sides.
pub fn ut_transform<T: Real>(ci: &ChunkInputs<T>) -> Result<WyFactors<T>> {
    let c = ci.len;
    // Interaction inner products (p_r . k_s) for all pairs; only s < r used.
    let pk = ci.p.matmul(&ci.k.transpose())?;
    let mut l = Matrix::zeros(c, c);
    for r in 1..c {
        for s in 0..r {
            let f = ci.beta[r] * ci.decay.ratio_before(r, s);
            l.set(r, s, f * pk.get(r, s));
        }
    }
    let m = tril_inverse_unit(&l)?;
    // W = M . Diag(beta_r prefix[r]) . P
    let mut rhs_w = ci.p.clone();
    let scales_w: Vec<T> = (0..c).map(|r| ci.beta[r] * ci.decay.prefix[r]).collect();
    rhs_w.scale_rows(&scales_w);
    let w = m.matmul(&rhs_w)?;
    // U = M . Diag(beta) . V
    let mut rhs_u = ci.v.clone();
    rhs_u.scale_rows(&ci.beta);
    let u = m.matmul(&rhs_u)?;
    Ok(WyFactors { w, u, m })
}

/// Resolve the chunk's pseudo-values against the entry state and advance the
/// state across the chunk. Returns `(pseudo_values, exit_state)`; the entry
/// state is left untouched.
pub fn chunk_state_update<T: Real>(
    ci: &ChunkInputs<T>,
    wy: &WyFactors<T>,
    s_entry: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let c = ci.len;
    // pv = U - W S^T: each row r is the token's write minus what the
    // closed loop removes of the entry state along p_r.
    let mut pv = wy.u.clone();
    wy.w.matmul_into(&s_entry.transpose(), -T::one(), T::one(), &mut pv)?;
    // S' = prefix[c] S + pv^T Diag(suffix) K
    let mut x = ci.k.clone();
    x.scale_rows(&ci.decay.suffix);
    let mut s_exit = s_entry.clone();
    let total = if c == 0 { T::one() } else { ci.decay.prefix[c] };
    for e in s_exit.as_mut_slice() {
        *e = *e * total;
    }
    pv.transpose().matmul_into(&x, T::one(), T::one(), &mut s_exit)?;
    Ok((pv, s_exit))
}

/// Inclusive-lower interaction map `G = Tril(Q~ K^T) (.) ratio`: entry
/// `(r, s)` carries write `s`'s pseudo-value into output `r`, decayed by
/// everything strictly between them.
pub fn chunk_interaction<T: Real>(ci: &ChunkInputs<T>) -> Result<Matrix<T>> {
    let qk = ci.q_tilde.matmul(&ci.k.transpose())?;
    let mut g = masked_lower(&qk, false);
    for r in 0..ci.len {
        for s in 0..=r {
            g.set(r, s, g.get(r, s) * ci.decay.ratio.get(r, s));
        }
    }
    Ok(g)
}

/// Chunk outputs: `O = Diag(prefix[r+1]) Q~ S^T + G pv`, written into
/// `out` (`len x dv`, row per token).
pub fn chunk_output<T: Real>(
    ci: &ChunkInputs<T>,
    g: &Matrix<T>,
    s_entry: &Matrix<T>,
    pv: &Matrix<T>,
    out: &mut Matrix<T>,
) -> Result<()> {
    let c = ci.len;
    let mut qs = ci.q_tilde.clone();
    let incl: Vec<T> = (0..c).map(|r| ci.decay.prefix[r + 1]).collect();
    qs.scale_rows(&incl);
    qs.matmul_into(&s_entry.transpose(), T::one(), T::zero(), out)?;
    g.matmul_into(pv, T::one(), T::one(), out)?;
    Ok(())
}

/// Run the recurrence chunkwise with the default (normative) update order.
pub fn run_chunkwise<T: Real>(
    variant: Variant,
    inputs: &StreamInputs<T>,
    state: &mut HeadState<T>,
    chunk_size: usize,
) -> Result<Matrix<T>> {
    run_chunkwise_with_order(variant, UpdateOrder::Normative, inputs, state, chunk_size)
}

/// Run the recurrence chunkwise: numerically equivalent to
/// [`crate::recurrence::run_recurrent_with_order`] for supported variants,
/// organized as three phases — per-chunk assembly (parallel), the state scan
/// (sequential), and per-chunk output maps (parallel). Deterministic: chunk
/// boundaries are fixed by `chunk_size` and every parallel write lands in a
/// disjoint region.
pub fn run_chunkwise_with_order<T: Real>(
    variant: Variant,
    order: UpdateOrder,
    inputs: &StreamInputs<T>,
    state: &mut HeadState<T>,
    chunk_size: usize,
) -> Result<Matrix<T>> {
    run_chunkwise_injected(variant, order, inputs, state, chunk_size, FaultInjection::default())
}

/// As [`run_chunkwise_with_order`], also returning each chunk's entry state
/// (the state before its first token). These are the checkpoints a replayed
/// backward pass needs, and the state scan produces them for free.
pub fn run_chunkwise_with_entries<T: Real>(
    variant: Variant,
    order: UpdateOrder,
    inputs: &StreamInputs<T>,
    state: &mut HeadState<T>,
    chunk_size: usize,
) -> Result<(Matrix<T>, Vec<Matrix<T>>)> {
    run_chunkwise_collect(variant, order, inputs, state, chunk_size, FaultInjection::default())
}

pub(crate) fn run_chunkwise_injected<T: Real>(
    variant: Variant,
    order: UpdateOrder,
    inputs: &StreamInputs<T>,
    state: &mut HeadState<T>,
    chunk_size: usize,
    faults: FaultInjection,
) -> Result<Matrix<T>> {
    run_chunkwise_collect(variant, order, inputs, state, chunk_size, faults).map(|(out, _)| out)
}

/// Work-unit schedule for a chunkwise pass. The arithmetic per chunk is
/// identical under both schedules — the same helper calls on the same
/// operands — so the results are bitwise equal; only the traversal differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ChunkSchedule {
    /// Assemble, scan, and emit one chunk at a time. Best cache locality;
    /// what a single worker thread runs.
    Fused,
    /// Assemble every chunk in parallel, scan sequentially, then emit every
    /// chunk's outputs in parallel. What multiple worker threads run.
    Phased,
}

/// Everything about one chunk that does not depend on the entry state.
struct Assembled<T> {
    ci: ChunkInputs<T>,
    wy: WyFactors<T>,
    g: Matrix<T>,
    /// Suffix-decayed keys, ready for the state update.
    x: Matrix<T>,
}

fn assemble_chunk<T: Real>(
    variant: Variant,
    order: UpdateOrder,
    inputs: &StreamInputs<T>,
    range: std::ops::Range<usize>,
    faults: FaultInjection,
) -> Result<Assembled<T>> {
    let mut ci = ChunkInputs::build(variant, order, inputs, range)?;
    if faults.flip_feedback_sign {
        for e in ci.p.as_mut_slice() {
            *e = -*e;
        }
    }
    let wy = ut_transform(&ci)?;
    let g = chunk_interaction(&ci)?;
    let mut x = ci.k.clone();
    x.scale_rows(&ci.decay.suffix);
    Ok(Assembled { ci, wy, g, x })
}

/// Resolve the chunk's pseudo-values against the current state and advance
/// the state across the chunk.
fn scan_chunk<T: Real>(a: &Assembled<T>, state: &mut HeadState<T>) -> Result<Matrix<T>> {
    let mut pv = a.wy.u.clone();
    a.wy.w.matmul_into(&state.s.transpose(), -T::one(), T::one(), &mut pv)?;
    let total = a.ci.decay.prefix[a.ci.len];
    for e in state.s.as_mut_slice() {
        *e = *e * total;
    }
    pv.transpose().matmul_into(&a.x, T::one(), T::one(), &mut state.s)?;
    Ok(pv)
}

/// Emit the chunk's outputs into its (disjoint) block of rows, reporting the
/// first non-finite entry as `(local_token, channel)`.
fn emit_chunk<T: Real>(
    a: &Assembled<T>,
    s_entry: &Matrix<T>,
    pv: &Matrix<T>,
    rows: &mut [T],
) -> Result<Option<(usize, usize)>> {
    let dv = a.ci.dv;
    let mut block = Matrix::zeros(a.ci.len, dv);
    chunk_output(&a.ci, &a.g, s_entry, pv, &mut block)?;
    rows.copy_from_slice(block.as_slice());
    Ok(block
        .as_slice()
        .iter()
        .position(|x| !x.is_finite())
        .map(|pos| (pos / dv, pos % dv)))
}

fn run_chunkwise_collect<T: Real>(
    variant: Variant,
    order: UpdateOrder,
    inputs: &StreamInputs<T>,
    state: &mut HeadState<T>,
    chunk_size: usize,
    faults: FaultInjection,
) -> Result<(Matrix<T>, Vec<Matrix<T>>)> {
    let schedule = if rayon::current_num_threads() > 1 {
        ChunkSchedule::Phased
    } else {
        ChunkSchedule::Fused
    };
    run_chunkwise_scheduled(variant, order, inputs, state, chunk_size, faults, schedule)
}

pub(crate) fn run_chunkwise_scheduled<T: Real>(
    variant: Variant,
    order: UpdateOrder,
    inputs: &StreamInputs<T>,
    state: &mut HeadState<T>,
    chunk_size: usize,
    faults: FaultInjection,
    schedule: ChunkSchedule,
) -> Result<(Matrix<T>, Vec<Matrix<T>>)> {
    require_chunkwise(variant)?;
    if chunk_size == 0 {
        return Err(KernelError::contract("run_chunkwise", "chunk_size must be positive"));
    }
    inputs.validate(variant)?;
    if state.dk() != inputs.dk || state.dv() != inputs.dv {
        return Err(KernelError::dim(
            "run_chunkwise state",
            format!("{}x{}", inputs.dv, inputs.dk),
            format!("{}x{}", state.dv(), state.dk()),
        ));
    }
    let len = inputs.len;
    let dv = inputs.dv;
    let mut outputs = Matrix::zeros(len, dv);
    if len == 0 {
        return Ok((outputs, Vec::new()));
    }
    let ranges: Vec<std::ops::Range<usize>> = (0..len)
        .step_by(chunk_size)
        .map(|start| start..(start + chunk_size).min(len))
        .collect();

    let mut entry_states: Vec<Matrix<T>> = Vec::with_capacity(ranges.len());
    let mut faults_per_chunk: Vec<Option<(usize, usize)>> = Vec::with_capacity(ranges.len());
    match schedule {
        ChunkSchedule::Fused => {
            // One chunk at a time: assemble, scan, emit, discard.
            let mut rest = outputs.as_mut_slice();
            for range in &ranges {
                let (block, tail) = std::mem::take(&mut rest).split_at_mut(range.len() * dv);
                rest = tail;
                let a = assemble_chunk(variant, order, inputs, range.clone(), faults)?;
                entry_states.push(state.s.clone());
                let pv = scan_chunk(&a, state)?;
                faults_per_chunk.push(emit_chunk(&a, entry_states.last().unwrap(), &pv, block)?);
            }
        }
        ChunkSchedule::Phased => {
            // Phase A -- per-chunk assembly, parallel across chunks.
            let assembled: Vec<Assembled<T>> = ranges
                .par_iter()
                .map(|range| assemble_chunk(variant, order, inputs, range.clone(), faults))
                .collect::<Result<_>>()?;

            // Phase B -- the state scan, sequential in chunk order.
            let mut pseudo_values: Vec<Matrix<T>> = Vec::with_capacity(ranges.len());
            for a in &assembled {
                entry_states.push(state.s.clone());
                pseudo_values.push(scan_chunk(a, state)?);
            }

            // Phase C -- per-chunk output maps, parallel over disjoint row
            // blocks.
            faults_per_chunk = outputs
                .as_mut_slice()
                .par_chunks_mut(chunk_size * dv)
                .zip(assembled.par_iter())
                .zip(entry_states.par_iter())
                .zip(pseudo_values.par_iter())
                .map(|(((rows, a), s_entry), pv)| emit_chunk(a, s_entry, pv, rows))
                .collect::<Result<_>>()?;
        }
    }

    for (range, fault) in ranges.iter().zip(faults_per_chunk) {
        if let Some((local_t, i)) = fault {
            return Err(KernelError::NonFinite {
                location: String::new(),
                token: range.start + local_t,
                row: i,
                col: 0,
            }
            .in_stream("chunkwise outputs"));
        }
    }
    if let Some(pos) = state.s.as_slice().iter().position(|x| !x.is_finite()) {
        return Err(KernelError::NonFinite {
            location: String::new(),
            token: len - 1,
            row: pos / state.dk(),
            col: pos % state.dk(),
        }
        .in_stream("chunkwise state"));
    }
    Ok((outputs, entry_states))
}

/// Materialize the accumulated transition `prefix[r] I - sum_{s<r}
/// (prefix[r]/prefix[s+1]) w_s k_s^T` of the chunk's first `r` tokens from
/// its WY factors, for cross-checking against the direct product of
/// per-token transition matrices.
pub fn materialize_pseudo_decay<T: Real>(
    ci: &ChunkInputs<T>,
    wy: &WyFactors<T>,
    r: usize,
) -> Matrix<T> {
    let dk = ci.dk;
    let mut d = Matrix::zeros(dk, dk);
    for j in 0..dk {
        d.set(j, j, ci.decay.prefix[r]);
    }
    for s in 0..r {
        let f = ci.decay.ratio_before(r, s);
        for i in 0..dk {
            for j in 0..dk {
                let e = d.get(i, j) - f * wy.w.get(s, i) * ci.k.get(s, j);
                d.set(i, j, e);
            }
        }
    }
    d
}
