//! Backward pass: manual reverse-mode differentiation of the forward
//! pipeline, reusing the chunk-replayed kernel backward for the recurrence.
//! Gradients are accumulated into a flat vector with the same layout as the
//! parameters.

use rayon::prelude::*;

use crate::autodiff::{backward_chunkwise, GradBundle};
use crate::error::{KernelError, Result};
use crate::gates::{backward_gates_token, sigmoid, GateParamGrads};
use crate::numerics::{Matrix, L2_NORM_EPS};
use crate::real::Real;

use super::forward::{sigmoid_t, silu_prime_t};
use super::{layer_weights, BlockCache, LayerWeights, ModelCache, ModelConfig, ModelParams};

/// Mean cross-entropy over the masked positions, and its logit gradient.
/// Returns `(loss, dlogits, masked_count)`; an all-false mask yields zero
/// loss and zero gradient.
pub fn masked_cross_entropy<T: Real>(
    logits: &Matrix<T>,
    targets: &[u16],
    mask: &[bool],
) -> Result<(f64, Matrix<T>, usize)> {
    let rows = logits.rows();
    let vocab = logits.cols();
    if targets.len() != rows || mask.len() != rows {
        return Err(KernelError::dim(
            "loss targets",
            format!("{rows} rows"),
            format!("{} targets, {} mask entries", targets.len(), mask.len()),
        ));
    }
    let count = mask.iter().filter(|&&m| m).count();
    let mut dlogits = Matrix::zeros(rows, vocab);
    if count == 0 {
        return Ok((0.0, dlogits, 0));
    }
    let scale = 1.0 / count as f64;
    let mut loss = 0.0f64;
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let target = targets[r] as usize;
        if target >= vocab {
            return Err(KernelError::contract(
                "loss targets",
                format!("target id {target} at row {r} is outside vocab {vocab}"),
            ));
        }
        let row = logits.row(r);
        let mut max = f64::NEG_INFINITY;
        for &l in row {
            max = max.max(l.as_f64());
        }
        let mut denom = 0.0f64;
        for &l in row {
            denom += (l.as_f64() - max).exp();
        }
        loss += (denom.ln() + max - row[target].as_f64()) * scale;
        let drow = dlogits.row_mut(r);
        for (c, &l) in row.iter().enumerate() {
            let p = (l.as_f64() - max).exp() / denom;
            let grad = if c == target { p - 1.0 } else { p };
            drow[c] = T::from_f64(grad * scale);
        }
    }
    if !loss.is_finite() {
        return Err(KernelError::contract("loss", format!("non-finite loss {loss}")));
    }
    Ok((loss, dlogits, count))
}

/// `(correct, total)` argmax accuracy over the masked positions. Ties break
/// toward the lowest token id.
pub fn masked_accuracy<T: Real>(logits: &Matrix<T>, targets: &[u16], mask: &[bool]) -> (usize, usize) {
    let mut correct = 0;
    let mut total = 0;
    for r in 0..logits.rows() {
        if !mask[r] {
            continue;
        }
        total += 1;
        let row = logits.row(r);
        let mut best = 0usize;
        for (c, &l) in row.iter().enumerate() {
            if l.as_f64() > row[best].as_f64() {
                best = c;
            }
        }
        if best == targets[r] as usize {
            correct += 1;
        }
    }
    (correct, total)
}

/// Backward through the whole model. `dlogits` is the loss gradient of the
/// logits; the result has the same layout as `params` and includes both tied
/// uses of the embedding (input lookup and readout).
pub fn model_backward<T: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    cache: &ModelCache<T>,
    dlogits: &Matrix<T>,
) -> Result<ModelParams<T>> {
    let rows = cache.batch * cache.seq;
    if dlogits.rows() != rows || dlogits.cols() != cfg.vocab {
        return Err(KernelError::dim(
            "logit gradient",
            format!("{rows}x{}", cfg.vocab),
            format!("{}x{}", dlogits.rows(), dlogits.cols()),
        ));
    }
    let mut grads = ModelParams::zeros_like(params);
    let embed = params.matrix("embed.weight")?;

    // Tied readout: logits = f E^T.
    let df = dlogits.matmul(&embed)?;
    grads.add_matrix("embed.weight", &dlogits.transpose().matmul(&cache.f)?)?;

    let final_g = params.slice("final_norm.g")?;
    let mut dg_final = vec![T::zero(); cfg.model_dim];
    let mut dh = rmsnorm_backward(&cache.h_final, final_g, &cache.inv_f, &df, &mut dg_final);
    grads.add_slice("final_norm.g", &dg_final)?;

    for l in (0..cfg.layers).rev() {
        let w = layer_weights(params, l)?;
        dh = block_backward(cfg, &w, &cache.blocks[l], &dh, cache.batch, cache.seq, l, &mut grads)?;
    }

    // Embedding lookup rows.
    {
        let d = cfg.model_dim;
        let e = grads.slice_mut("embed.weight")?;
        for (r, &t) in cache.tokens.iter().enumerate() {
            let base = t as usize * d;
            for (j, &g) in dh.row(r).iter().enumerate() {
                e[base + j] = e[base + j] + g;
            }
        }
    }
    Ok(grads)
}

/// Backward of `rmsnorm_rows`: given `y_j = x_j g_j r` with
/// `r = 1/sqrt(mean(x^2) + eps)`, accumulates `dg` and returns `dx`.
fn rmsnorm_backward<T: Real>(
    x: &Matrix<T>,
    g: &[T],
    inv: &[T],
    dy: &Matrix<T>,
    dg: &mut [T],
) -> Matrix<T> {
    let d = x.cols();
    let dim = T::from_f64(d as f64);
    let mut dx = Matrix::zeros(x.rows(), d);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let ri = inv[r];
        let mut s = T::zero();
        for j in 0..d {
            s = s + dyr[j] * g[j] * xr[j];
        }
        let coef = ri * ri * ri / dim * s;
        let dxr = dx.row_mut(r);
        for j in 0..d {
            dxr[j] = dyr[j] * g[j] * ri - xr[j] * coef;
            dg[j] = dg[j] + dyr[j] * xr[j] * ri;
        }
    }
    dx
}

/// Backward of one per-head L2 normalization segment: `y = x / (n + eps)`
/// with `n = ||x||`.
fn l2_backward_segment<T: Real>(x: &[T], dy: &[T], norm: f64, dx: &mut [T]) {
    let r = T::from_f64(1.0 / (norm + L2_NORM_EPS));
    if norm > 1e-30 {
        let mut dyx = T::zero();
        for (a, b) in dy.iter().zip(x) {
            dyx = dyx + *a * *b;
        }
        let coef = r * r / T::from_f64(norm) * dyx;
        for j in 0..x.len() {
            dx[j] = r * dy[j] - coef * x[j];
        }
    } else {
        for j in 0..x.len() {
            dx[j] = r * dy[j];
        }
    }
}

/// Backward of the causal depthwise convolution; accumulates the kernel
/// gradient and returns the input gradient.
fn conv_backward<T: Real>(
    x: &Matrix<T>,
    kernel: &Matrix<T>,
    dy: &Matrix<T>,
    batch: usize,
    seq: usize,
    dkernel: &mut Matrix<T>,
) -> Matrix<T> {
    let c = kernel.cols();
    let width = kernel.rows();
    let mut dx = Matrix::zeros(x.rows(), c);
    for b in 0..batch {
        for t in 0..seq {
            let dyr = dy.row(b * seq + t).to_vec();
            for i in 0..width.min(t + 1) {
                let src_row = b * seq + t - i;
                let dxr = dx.row_mut(src_row);
                let kr = kernel.row(i);
                for ch in 0..c {
                    dxr[ch] = dxr[ch] + kr[ch] * dyr[ch];
                }
                let xr = x.row(src_row);
                let dkr = dkernel.row_mut(i);
                for ch in 0..c {
                    dkr[ch] = dkr[ch] + xr[ch] * dyr[ch];
                }
            }
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn block_backward<T: Real>(
    cfg: &ModelConfig,
    w: &LayerWeights<T>,
    cache: &BlockCache<T>,
    dy: &Matrix<T>,
    batch: usize,
    seq: usize,
    layer: usize,
    grads: &mut ModelParams<T>,
) -> Result<Matrix<T>> {
    let d = cfg.model_dim;
    let heads = cfg.heads;
    let (dk, dv) = (cfg.head_dk, cfg.head_dv);
    let rows = batch * seq;
    let one = T::one();
    let n = |suffix: &str| format!("layers.{layer}.{suffix}");

    // y = h_mid + silu(n2 W1) W2.
    let mut dh = dy.clone();
    grads.add_matrix(&n("mlp.w2"), &cache.mlp_act.transpose().matmul(dy)?)?;
    let mut d_mlp_pre = dy.matmul(&w.mlp_w2.transpose())?;
    for (g, &z) in d_mlp_pre.as_mut_slice().iter_mut().zip(cache.mlp_pre.as_slice()) {
        *g = *g * silu_prime_t(z);
    }
    grads.add_matrix(&n("mlp.w1"), &cache.n2.transpose().matmul(&d_mlp_pre)?)?;
    let dn2 = d_mlp_pre.matmul(&w.mlp_w1.transpose())?;
    let mut dg2 = vec![T::zero(); d];
    let dh2 = rmsnorm_backward(&cache.h_mid, &w.norm2_g, &cache.inv2, &dn2, &mut dg2);
    grads.add_slice(&n("norm2.g"), &dg2)?;
    for (a, b) in dh.as_mut_slice().iter_mut().zip(dh2.as_slice()) {
        *a = *a + *b;
    }

    // h_mid = x + (sigmoid(outgate_z) * mix) W_out.
    let dx_residual = dh.clone();
    let mut gated = cache.mix.clone();
    for (g, &z) in gated.as_mut_slice().iter_mut().zip(cache.outgate_z.as_slice()) {
        *g = *g * sigmoid_t(z);
    }
    grads.add_matrix(&n("w_out"), &gated.transpose().matmul(&dh)?)?;
    let d_gated = dh.matmul(&w.w_out.transpose())?;

    let mut d_mix = Matrix::zeros(rows, heads * dv);
    let mut dz = Matrix::zeros(rows, heads * dv);
    {
        let dg_s = d_gated.as_slice();
        let zs = cache.outgate_z.as_slice();
        let ms = cache.mix.as_slice();
        let dm = d_mix.as_mut_slice();
        let dzs = dz.as_mut_slice();
        for i in 0..dg_s.len() {
            let s = sigmoid_t(zs[i]);
            dm[i] = dg_s[i] * s;
            dzs[i] = dg_s[i] * ms[i] * s * (one - s);
        }
    }
    grads.add_matrix(&n("w_outgate"), &cache.n1.transpose().matmul(&dz)?)?;
    let mut dn1 = dz.matmul(&w.w_outgate.transpose())?;

    // Recurrence backward, one stream per (batch, head).
    let bundles: Vec<Result<GradBundle<T>>> = (0..batch * heads)
        .into_par_iter()
        .map(|s| {
            let (b, h) = (s / heads, s % heads);
            let mut go = Matrix::zeros(seq, dv);
            for t in 0..seq {
                go.row_mut(t).copy_from_slice(&d_mix.row(b * seq + t)[h * dv..(h + 1) * dv]);
            }
            backward_chunkwise(
                cfg.variant,
                cfg.update_order,
                &cache.streams[s],
                &cache.checkpoints[s],
                &go,
                None,
            )
            .map_err(|e| e.in_stream(format!("layer {layer}, sequence {b}, head {h}")))
        })
        .collect();

    let mut d_qn = Matrix::zeros(rows, heads * dk);
    let mut d_kn = Matrix::zeros(rows, heads * dk);
    let mut d_vact = Matrix::zeros(rows, heads * dv);
    let mut g_alpha = vec![T::zero(); rows * heads];
    let mut g_beta = vec![T::zero(); rows * heads];
    let mut gate_grads = GateParamGrads::zeros_like(&w.gates);
    for (s, bundle) in bundles.into_iter().enumerate() {
        let (b, h) = (s / heads, s % heads);
        let bundle = bundle?;
        for t in 0..seq {
            let r = b * seq + t;
            d_qn.row_mut(r)[h * dk..(h + 1) * dk].copy_from_slice(bundle.dq.row(t));
            d_kn.row_mut(r)[h * dk..(h + 1) * dk].copy_from_slice(bundle.dk.row(t));
            d_vact.row_mut(r)[h * dv..(h + 1) * dv].copy_from_slice(bundle.dv.row(t));
            g_alpha[r * heads + h] = bundle.dalpha[t];
            g_beta[r * heads + h] = bundle.dbeta[t];
        }
        // The feedback blend is per head: chain through b = sigmoid(b_logit).
        let bf = sigmoid(w.gates.b_logit[h].as_f64());
        let db_logit = bf * (1.0 - bf) * bundle.db.as_f64();
        gate_grads.b_logit[h] = gate_grads.b_logit[h] + T::from_f64(db_logit);
        gate_grads.d_value[h] = gate_grads.d_value[h] + bundle.dd;
    }

    // Gate projections and scalars (also feeds dn1).
    for r in 0..rows {
        for h in 0..heads {
            backward_gates_token(
                cache.n1.row(r),
                &w.gates,
                &cache.signals[r][h],
                &cache.gate_caches[r][h],
                h,
                g_alpha[r * heads + h],
                g_beta[r * heads + h],
                &mut gate_grads,
                dn1.row_mut(r),
            );
        }
    }
    grads.add_matrix(&n("gates.w_delta"), &gate_grads.w_delta)?;
    grads.add_matrix(&n("gates.w_beta"), &gate_grads.w_beta)?;
    grads.add_slice(&n("gates.a_log"), &gate_grads.a_log)?;
    grads.add_slice(&n("gates.delta_bias"), &gate_grads.delta_bias)?;
    grads.add_slice(&n("gates.b_logit"), &gate_grads.b_logit)?;
    grads.add_slice(&n("gates.d_value"), &gate_grads.d_value)?;

    // Per-head L2 normalization of q and k.
    let mut d_qact = Matrix::zeros(rows, heads * dk);
    let mut d_kact = Matrix::zeros(rows, heads * dk);
    for r in 0..rows {
        for h in 0..heads {
            let span = h * dk..(h + 1) * dk;
            l2_backward_segment(
                &cache.q_act.row(r)[span.clone()],
                &d_qn.row(r)[span.clone()],
                cache.q_norms[r * heads + h],
                &mut d_qact.row_mut(r)[span.clone()],
            );
            l2_backward_segment(
                &cache.k_act.row(r)[span.clone()],
                &d_kn.row(r)[span.clone()],
                cache.k_norms[r * heads + h],
                &mut d_kact.row_mut(r)[span],
            );
        }
    }

    // Activation backward: conv outputs pass through silu.
    let mut d_qconv = d_qact;
    for (g, &z) in d_qconv.as_mut_slice().iter_mut().zip(cache.q_conv.as_slice()) {
        *g = *g * silu_prime_t(z);
    }
    let mut d_kconv = d_kact;
    for (g, &z) in d_kconv.as_mut_slice().iter_mut().zip(cache.k_conv.as_slice()) {
        *g = *g * silu_prime_t(z);
    }
    let mut d_vconv = d_vact;
    for (g, &z) in d_vconv.as_mut_slice().iter_mut().zip(cache.v_conv.as_slice()) {
        *g = *g * silu_prime_t(z);
    }

    let mut dkq = Matrix::zeros(cfg.conv_width, heads * dk);
    let d_qpre = conv_backward(&cache.q_pre, &w.conv_q, &d_qconv, batch, seq, &mut dkq);
    grads.add_matrix(&n("conv_q"), &dkq)?;
    let mut dkk = Matrix::zeros(cfg.conv_width, heads * dk);
    let d_kpre = conv_backward(&cache.k_pre, &w.conv_k, &d_kconv, batch, seq, &mut dkk);
    grads.add_matrix(&n("conv_k"), &dkk)?;
    let mut dkv = Matrix::zeros(cfg.conv_width, heads * dv);
    let d_vpre = conv_backward(&cache.v_pre, &w.conv_v, &d_vconv, batch, seq, &mut dkv);
    grads.add_matrix(&n("conv_v"), &dkv)?;

    grads.add_matrix(&n("wq"), &cache.n1.transpose().matmul(&d_qpre)?)?;
    grads.add_matrix(&n("wk"), &cache.n1.transpose().matmul(&d_kpre)?)?;
    grads.add_matrix(&n("wv"), &cache.n1.transpose().matmul(&d_vpre)?)?;
    d_qpre.matmul_into(&w.wq.transpose(), one, one, &mut dn1)?;
    d_kpre.matmul_into(&w.wk.transpose(), one, one, &mut dn1)?;
    d_vpre.matmul_into(&w.wv.transpose(), one, one, &mut dn1)?;

    let mut dg1 = vec![T::zero(); d];
    let dx1 = rmsnorm_backward(&cache.x, &w.norm1_g, &cache.inv1, &dn1, &mut dg1);
    grads.add_slice(&n("norm1.g"), &dg1)?;

    let mut dx = dx_residual;
    for (a, b) in dx.as_mut_slice().iter_mut().zip(dx1.as_slice()) {
        *a = *a + *b;
    }
    Ok(dx)
}
