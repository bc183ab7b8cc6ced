//! Forward pass: embedding, blocks, tied readout — with caches for backward.

use rayon::prelude::*;

use crate::autodiff::{forward_checkpointed, Checkpoints};
use crate::chunkwise::run_chunkwise_with_entries;
use crate::error::{KernelError, Result};
use crate::gates::{compute_gates_cached, GateCache, GateParams, GateSignals};
use crate::numerics::{l2_normalize_in_place, Matrix, L2_NORM_EPS};
use crate::real::Real;
use crate::recurrence::{HeadState, StreamInputs};

use super::{ExecMode, ModelConfig, ModelParams};

/// Epsilon inside the RMS normalizer `1/sqrt(mean(x^2) + RMS_EPS)`.
pub const RMS_EPS: f64 = 1e-6;

/// One block's weights, materialized from the flat parameter vector.
#[derive(Debug, Clone)]
pub struct LayerWeights<T> {
    pub norm1_g: Vec<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub conv_q: Matrix<T>,
    pub conv_k: Matrix<T>,
    pub conv_v: Matrix<T>,
    pub gates: GateParams<T>,
    pub w_outgate: Matrix<T>,
    pub w_out: Matrix<T>,
    pub norm2_g: Vec<T>,
    pub mlp_w1: Matrix<T>,
    pub mlp_w2: Matrix<T>,
}

/// Extract one block's weights from the flat parameters.
pub fn layer_weights<T: Real>(
    params: &ModelParams<T>,
    layer: usize,
) -> Result<LayerWeights<T>> {
    let n = |suffix: &str| format!("layers.{layer}.{suffix}");
    Ok(LayerWeights {
        norm1_g: params.slice(&n("norm1.g"))?.to_vec(),
        wq: params.matrix(&n("wq"))?,
        wk: params.matrix(&n("wk"))?,
        wv: params.matrix(&n("wv"))?,
        conv_q: params.matrix(&n("conv_q"))?,
        conv_k: params.matrix(&n("conv_k"))?,
        conv_v: params.matrix(&n("conv_v"))?,
        gates: GateParams {
            w_delta: params.matrix(&n("gates.w_delta"))?,
            w_beta: params.matrix(&n("gates.w_beta"))?,
            a_log: params.slice(&n("gates.a_log"))?.to_vec(),
            delta_bias: params.slice(&n("gates.delta_bias"))?.to_vec(),
            b_logit: params.slice(&n("gates.b_logit"))?.to_vec(),
            d_value: params.slice(&n("gates.d_value"))?.to_vec(),
        },
        w_outgate: params.matrix(&n("w_outgate"))?,
        w_out: params.matrix(&n("w_out"))?,
        norm2_g: params.slice(&n("norm2.g"))?.to_vec(),
        mlp_w1: params.matrix(&n("mlp.w1"))?,
        mlp_w2: params.matrix(&n("mlp.w2"))?,
    })
}

/// Everything one block's backward pass needs, recorded by [`block_forward`].
#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    /// Block input, `(batch * seq) x model_dim`.
    pub x: Matrix<T>,
    pub n1: Matrix<T>,
    /// Per-row `1/rms` of the first norm.
    pub inv1: Vec<T>,
    /// Projections before the convolution.
    pub q_pre: Matrix<T>,
    pub k_pre: Matrix<T>,
    pub v_pre: Matrix<T>,
    /// Convolution outputs before the activation.
    pub q_conv: Matrix<T>,
    pub k_conv: Matrix<T>,
    pub v_conv: Matrix<T>,
    /// Activation outputs.
    pub q_act: Matrix<T>,
    pub k_act: Matrix<T>,
    pub v_act: Matrix<T>,
    /// Per-head normalized q and k.
    pub q_n: Matrix<T>,
    pub k_n: Matrix<T>,
    /// Pre-normalization norms, indexed `[row * heads + head]`.
    pub q_norms: Vec<f64>,
    pub k_norms: Vec<f64>,
    /// Gate signals and backward intermediates, indexed `[row][head]`.
    pub signals: Vec<Vec<GateSignals<T>>>,
    pub gate_caches: Vec<Vec<GateCache<T>>>,
    /// Recurrence inputs and chunk-entry states, indexed `[batch * heads + head]`.
    pub streams: Vec<StreamInputs<T>>,
    pub checkpoints: Vec<Checkpoints<T>>,
    /// Mixer outputs, `(batch * seq) x (heads * head_dv)`.
    pub mix: Matrix<T>,
    /// Output-gate pre-activation, same shape as `mix`.
    pub outgate_z: Matrix<T>,
    /// State after the first residual add.
    pub h_mid: Matrix<T>,
    pub n2: Matrix<T>,
    pub inv2: Vec<T>,
    pub mlp_pre: Matrix<T>,
    pub mlp_act: Matrix<T>,
}

/// Forward pass of one block over a `(batch * seq) x model_dim` input (row
/// `b * seq + t` is token `t` of sequence `b`).
pub fn block_forward<T: Real>(
    cfg: &ModelConfig,
    w: &LayerWeights<T>,
    x: &Matrix<T>,
    batch: usize,
    seq: usize,
    mode: ExecMode,
    layer: usize,
) -> Result<(Matrix<T>, BlockCache<T>)> {
    let d = cfg.model_dim;
    let heads = cfg.heads;
    let (dk, dv) = (cfg.head_dk, cfg.head_dv);
    let rows = batch * seq;
    if x.rows() != rows || x.cols() != d {
        return Err(KernelError::dim(
            "block input",
            format!("{rows}x{d}"),
            format!("{}x{}", x.rows(), x.cols()),
        ));
    }

    let (n1, inv1) = rmsnorm_rows(x, &w.norm1_g);

    let q_pre = n1.matmul(&w.wq)?;
    let k_pre = n1.matmul(&w.wk)?;
    let v_pre = n1.matmul(&w.wv)?;

    let q_conv = causal_conv(&q_pre, &w.conv_q, batch, seq)?;
    let k_conv = causal_conv(&k_pre, &w.conv_k, batch, seq)?;
    let v_conv = causal_conv(&v_pre, &w.conv_v, batch, seq)?;
    let q_act = silu_matrix(&q_conv);
    let k_act = silu_matrix(&k_conv);
    let v_act = silu_matrix(&v_conv);

    let mut q_n = q_act.clone();
    let mut k_n = k_act.clone();
    let mut q_norms = vec![0.0f64; rows * heads];
    let mut k_norms = vec![0.0f64; rows * heads];
    for r in 0..rows {
        for h in 0..heads {
            let span = h * dk..(h + 1) * dk;
            q_norms[r * heads + h] = l2_normalize_in_place(&mut q_n.row_mut(r)[span.clone()], L2_NORM_EPS);
            k_norms[r * heads + h] = l2_normalize_in_place(&mut k_n.row_mut(r)[span], L2_NORM_EPS);
        }
    }

    let mut signals = Vec::with_capacity(rows);
    let mut gate_caches = Vec::with_capacity(rows);
    for r in 0..rows {
        let (s, c) = compute_gates_cached(n1.row(r), &w.gates)?;
        signals.push(s);
        gate_caches.push(c);
    }

    // One independent recurrence per (batch, head) stream.
    let stream_runs: Vec<Result<(StreamInputs<T>, Matrix<T>, Checkpoints<T>)>> = (0..batch * heads)
        .into_par_iter()
        .map(|s| {
            let (b, h) = (s / heads, s % heads);
            let mut si = StreamInputs::new(seq, dk, dv);
            for t in 0..seq {
                let r = b * seq + t;
                si.set_step(
                    t,
                    &q_n.row(r)[h * dk..(h + 1) * dk],
                    &k_n.row(r)[h * dk..(h + 1) * dk],
                    &v_act.row(r)[h * dv..(h + 1) * dv],
                    signals[r][h],
                );
            }
            let s0 = Matrix::zeros(dv, dk);
            let run = match mode {
                ExecMode::Chunkwise => {
                    let mut state = HeadState { s: s0 };
                    run_chunkwise_with_entries(
                        cfg.variant,
                        cfg.update_order,
                        &si,
                        &mut state,
                        cfg.chunk_size,
                    )
                    .map(|(out, entries)| {
                        (out, Checkpoints { chunk_size: cfg.chunk_size, entries })
                    })
                }
                ExecMode::Recurrent => {
                    forward_checkpointed(cfg.variant, cfg.update_order, &si, &s0, cfg.chunk_size)
                        .map(|(out, ck, _)| (out, ck))
                }
            };
            match run {
                Ok((out, ck)) => Ok((si, out, ck)),
                Err(e) => Err(e.in_stream(format!("layer {layer}, sequence {b}, head {h}"))),
            }
        })
        .collect();

    let mut streams = Vec::with_capacity(batch * heads);
    let mut checkpoints = Vec::with_capacity(batch * heads);
    let mut mix = Matrix::zeros(rows, heads * dv);
    for (s, run) in stream_runs.into_iter().enumerate() {
        let (b, h) = (s / heads, s % heads);
        let (si, out, ck) = run?;
        for t in 0..seq {
            mix.row_mut(b * seq + t)[h * dv..(h + 1) * dv].copy_from_slice(out.row(t));
        }
        streams.push(si);
        checkpoints.push(ck);
    }

    let outgate_z = n1.matmul(&w.w_outgate)?;
    let mut gated = mix.clone();
    for (g, &z) in gated.as_mut_slice().iter_mut().zip(outgate_z.as_slice()) {
        *g = *g * sigmoid_t(z);
    }
    let mut h_mid = x.clone();
    gated.matmul_into(&w.w_out, T::one(), T::one(), &mut h_mid)?;

    let (n2, inv2) = rmsnorm_rows(&h_mid, &w.norm2_g);
    let mlp_pre = n2.matmul(&w.mlp_w1)?;
    let mlp_act = silu_matrix(&mlp_pre);
    let mut y = h_mid.clone();
    mlp_act.matmul_into(&w.mlp_w2, T::one(), T::one(), &mut y)?;

    let cache = BlockCache {
        x: x.clone(),
        n1,
        inv1,
        q_pre,
        k_pre,
        v_pre,
        q_conv,
        k_conv,
        v_conv,
        q_act,
        k_act,
        v_act,
        q_n,
        k_n,
        q_norms,
        k_norms,
        signals,
        gate_caches,
        streams,
        checkpoints,
        mix,
        outgate_z,
        h_mid,
        n2,
        inv2,
        mlp_pre,
        mlp_act,
    };
    Ok((y, cache))
}

/// Whole-model forward cache.
#[derive(Debug, Clone)]
pub struct ModelCache<T> {
    pub blocks: Vec<BlockCache<T>>,
    /// Final residual-stream state before the last norm.
    pub h_final: Matrix<T>,
    /// Final-norm output (what the tied readout sees).
    pub f: Matrix<T>,
    pub inv_f: Vec<T>,
    pub tokens: Vec<u16>,
    pub batch: usize,
    pub seq: usize,
}

/// Forward pass over token ids (`batch * seq` of them, sequence-major),
/// returning logits `(batch * seq) x vocab` and the caches for backward.
pub fn model_forward_cached<T: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    tokens: &[u16],
    batch: usize,
    seq: usize,
    mode: ExecMode,
) -> Result<(Matrix<T>, ModelCache<T>)> {
    cfg.validate()?;
    let rows = batch * seq;
    if tokens.len() != rows {
        return Err(KernelError::dim(
            "token buffer",
            format!("{rows}"),
            format!("{}", tokens.len()),
        ));
    }
    let embed = params.matrix("embed.weight")?;
    for (i, &t) in tokens.iter().enumerate() {
        if (t as usize) >= cfg.vocab {
            return Err(KernelError::contract(
                "token buffer",
                format!("token id {t} at position {i} is outside vocab {}", cfg.vocab),
            ));
        }
    }
    let mut x = Matrix::zeros(rows, cfg.model_dim);
    for (r, &t) in tokens.iter().enumerate() {
        x.row_mut(r).copy_from_slice(embed.row(t as usize));
    }

    let mut blocks = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let w = layer_weights(params, l)?;
        let (y, cache) = block_forward(cfg, &w, &x, batch, seq, mode, l)?;
        blocks.push(cache);
        x = y;
    }

    let final_g = params.slice("final_norm.g")?;
    let (f, inv_f) = rmsnorm_rows(&x, final_g);
    let logits = f.matmul(&embed.transpose())?;
    let cache = ModelCache {
        blocks,
        h_final: x,
        f,
        inv_f,
        tokens: tokens.to_vec(),
        batch,
        seq,
    };
    Ok((logits, cache))
}

/// As [`model_forward_cached`], discarding the caches.
pub fn model_forward<T: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    tokens: &[u16],
    batch: usize,
    seq: usize,
    mode: ExecMode,
) -> Result<Matrix<T>> {
    model_forward_cached(cfg, params, tokens, batch, seq, mode).map(|(logits, _)| logits)
}

/// Row-wise RMS norm `y = x * g / sqrt(mean(x^2) + eps)`; also returns each
/// row's `1/sqrt(mean(x^2) + eps)` for the backward pass.
pub(super) fn rmsnorm_rows<T: Real>(x: &Matrix<T>, g: &[T]) -> (Matrix<T>, Vec<T>) {
    let d = x.cols();
    assert_eq!(g.len(), d);
    let mut y = Matrix::zeros(x.rows(), d);
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mut ms = T::zero();
        for &v in row {
            ms = ms + v * v;
        }
        let denom = (ms / T::from_f64(d as f64) + T::from_f64(RMS_EPS)).sqrt();
        let ri = T::one() / denom;
        inv.push(ri);
        for (j, out) in y.row_mut(r).iter_mut().enumerate() {
            *out = row[j] * g[j] * ri;
        }
    }
    (y, inv)
}

/// Depthwise causal convolution over each sequence: with kernel storage
/// `width x channels` (row = lag), `y[t] = sum_i kernel[i] * x[t - i]`,
/// missing history reading as zero. Sequences never mix.
pub(super) fn causal_conv<T: Real>(
    x: &Matrix<T>,
    kernel: &Matrix<T>,
    batch: usize,
    seq: usize,
) -> Result<Matrix<T>> {
    let c = x.cols();
    if kernel.cols() != c {
        return Err(KernelError::dim(
            "conv kernel",
            format!("{} channels", c),
            format!("{}", kernel.cols()),
        ));
    }
    if x.rows() != batch * seq {
        return Err(KernelError::dim(
            "conv input",
            format!("{} rows", batch * seq),
            format!("{}", x.rows()),
        ));
    }
    let width = kernel.rows();
    let mut y = Matrix::zeros(x.rows(), c);
    for b in 0..batch {
        for t in 0..seq {
            let out = y.row_mut(b * seq + t);
            for i in 0..width.min(t + 1) {
                let src = x.row(b * seq + t - i);
                let taps = kernel.row(i);
                for ch in 0..c {
                    out[ch] = out[ch] + taps[ch] * src[ch];
                }
            }
        }
    }
    Ok(y)
}

pub(super) fn sigmoid_t<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(super) fn silu_t<T: Real>(x: T) -> T {
    x * sigmoid_t(x)
}

/// d(silu)/dx = sigmoid(x) * (1 + x * (1 - sigmoid(x))).
pub(super) fn silu_prime_t<T: Real>(x: T) -> T {
    let s = sigmoid_t(x);
    s * (T::one() + x * (T::one() - s))
}

pub(super) fn silu_matrix<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    let mut y = x.clone();
    for v in y.as_mut_slice() {
        *v = silu_t(*v);
    }
    y
}
