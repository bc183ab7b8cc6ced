//! Per-token recurrent oracle for the bilinear state-space family.
//!
//! Every supported variant is an instance of one update on a `dv x dk` state
//! matrix `S`:
//!
//! ```text
//! S_t = alpha_t * S_{t-1} - gamma_t * (S_{t-1} k_t) k_t^T + beta_t * v_t k_t^T
//! o_t = S_t (q_t - delta_t * k_t)
//! ```
//!
//! i.e. a scalar-decayed state plus a rank-one correction along `k_t` and a
//! rank-one write of `v_t`, read out against a key-corrected query. The
//! variants differ only in how `(alpha, beta, gamma, delta)` are derived from
//! the gate signals; see [`Coefficients::for_variant`]. This path is the
//! semantic reference: one matrix-vector product and one rank-one update per
//! token, exactly in sequence order.

use crate::error::{KernelError, Result};
use crate::gates::GateSignals;
use crate::numerics::Matrix;
use crate::real::Real;

/// Maximum tolerated deviation of `||k||` from one for variants that require
/// unit keys. Looser than the normalization accuracy actually achieved
/// (~1e-7) so that finite-difference probes of the kernel inputs stay valid.
pub const KEY_NORM_TOLERANCE: f64 = 1e-3;

/// The supported recurrence variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// `S_t = S_{t-1} + v_t k_t^T`.
    LinearAttn,
    /// `S_t = alpha_t S_{t-1} + beta_t v_t k_t^T`.
    GatedLinear,
    /// Delta rule: `S_t = S_{t-1}(I - beta_t k_t k_t^T) + beta_t v_t k_t^T`.
    DeltaNet,
    /// Decayed delta rule: `S_t = S_{t-1} alpha_t (I - beta_t k_t k_t^T) +
    /// beta_t v_t k_t^T`.
    GatedDeltaNet,
    /// Scalar-plus-low-rank closed loop: `S_t = S_{t-1}(alpha_t I -
    /// beta_tilde_t k_t k_t^T) + beta_t v_t k_t^T`, output corrected by
    /// `d * k_t`.
    CombaSplr,
    /// Identity-plus-low-rank closed loop: `S_t = S_{t-1} alpha_t (I -
    /// 2 beta_tilde_t k_t k_t^T) + beta_t v_t k_t^T`, output corrected.
    CombaIplr,
    /// SPLR with the feedback key expressed as `p_t = b * k_t`; the output
    /// correction becomes `d * b * k_t`.
    CombaPk,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::LinearAttn,
        Variant::GatedLinear,
        Variant::DeltaNet,
        Variant::GatedDeltaNet,
        Variant::CombaSplr,
        Variant::CombaIplr,
        Variant::CombaPk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::LinearAttn => "linear-attn",
            Variant::GatedLinear => "gated-linear",
            Variant::DeltaNet => "deltanet",
            Variant::GatedDeltaNet => "gated-deltanet",
            Variant::CombaSplr => "comba-splr",
            Variant::CombaIplr => "comba-iplr",
            Variant::CombaPk => "comba-pk",
        }
    }

    pub fn from_name(name: &str) -> Result<Variant> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == name)
            .ok_or_else(|| KernelError::contract("variant", format!("unknown variant `{name}`")))
    }

    /// Whether the variant's state feedback requires unit-norm keys.
    pub fn requires_unit_keys(self) -> bool {
        !matches!(self, Variant::LinearAttn | Variant::GatedLinear)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl serde::Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> serde::Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        Variant::from_name(&name).map_err(serde::de::Error::custom)
    }
}

/// Order in which decay and rank-one correction compose in the transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateOrder {
    /// The correction acts on the pre-decay state:
    /// `S_t = S_{t-1}(alpha I - gamma k k^T) + write`.
    #[default]
    Normative,
    /// The correction acts on the already-decayed state:
    /// `S_t = (alpha S_{t-1})(I - (gamma/alpha) k k^T) + write`, i.e. the
    /// closed-loop variants pick up one extra factor of `alpha` on `gamma`.
    /// Semantically equivalent to [`UpdateOrder::Normative`] under the
    /// per-token substitution `gamma -> gamma / alpha`.
    DecayedCorrection,
}

impl UpdateOrder {
    pub const ALL: [UpdateOrder; 2] = [UpdateOrder::Normative, UpdateOrder::DecayedCorrection];

    /// Stable string form used in config files and on the command line.
    pub fn name(&self) -> &'static str {
        match self {
            UpdateOrder::Normative => "normative",
            UpdateOrder::DecayedCorrection => "decayed-correction",
        }
    }

    /// Inverse of [`UpdateOrder::name`].
    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|o| o.name() == name)
            .ok_or_else(|| {
                KernelError::contract(
                    "update order",
                    format!("unknown update order {name:?}; expected one of: normative, decayed-correction"),
                )
            })
    }
}

impl std::fmt::Display for UpdateOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl serde::Serialize for UpdateOrder {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> serde::Deserialize<'de> for UpdateOrder {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        UpdateOrder::from_name(&name).map_err(serde::de::Error::custom)
    }
}

/// Per-token update coefficients in the unified form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients<T> {
    pub alpha: T,
    pub beta: T,
    pub gamma: T,
    pub delta: T,
}

impl<T: Real> Coefficients<T> {
    /// Map one token's gate signals to the unified update coefficients for
    /// `variant` under `order`.
    pub fn for_variant(variant: Variant, order: UpdateOrder, g: &GateSignals<T>) -> Self {
        let one = T::one();
        let zero = T::zero();
        let (alpha, beta, mut gamma, delta) = match variant {
            Variant::LinearAttn => (one, one, zero, zero),
            Variant::GatedLinear => (g.alpha, g.beta, zero, zero),
            Variant::DeltaNet => (one, g.beta, g.beta, zero),
            Variant::GatedDeltaNet => (g.alpha, g.beta, g.alpha * g.beta, zero),
            Variant::CombaSplr => (g.alpha, g.beta, g.beta_tilde, g.d),
            Variant::CombaIplr => {
                let two = T::from_f64(2.0);
                (g.alpha, g.beta, two * g.alpha * g.beta_tilde, g.d)
            }
            Variant::CombaPk => (g.alpha, g.beta, g.beta_tilde, g.d * g.b),
        };
        if order == UpdateOrder::DecayedCorrection
            && matches!(variant, Variant::CombaSplr | Variant::CombaIplr | Variant::CombaPk)
        {
            gamma = gamma * alpha;
        }
        Coefficients { alpha, beta, gamma, delta }
    }
}

/// Mutable per-head recurrent state: an `S` of shape `dv x dk` (row `i` holds
/// value-channel `i`'s key-space profile).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadState<T> {
    pub s: Matrix<T>,
}

impl<T: Real> HeadState<T> {
    pub fn zeros(dv: usize, dk: usize) -> Self {
        HeadState { s: Matrix::zeros(dv, dk) }
    }

    pub fn dv(&self) -> usize {
        self.s.rows()
    }

    pub fn dk(&self) -> usize {
        self.s.cols()
    }
}

/// One token's kernel inputs for a single head.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a, T> {
    pub q: &'a [T],
    pub k: &'a [T],
    pub v: &'a [T],
    pub gates: GateSignals<T>,
}

/// A full sequence of kernel inputs for one head, stored struct-of-arrays.
#[derive(Debug, Clone)]
pub struct StreamInputs<T> {
    pub len: usize,
    pub dk: usize,
    pub dv: usize,
    /// `len * dk`, token-major.
    pub q: Vec<T>,
    /// `len * dk`, token-major.
    pub k: Vec<T>,
    /// `len * dv`, token-major.
    pub v: Vec<T>,
    pub gates: Vec<GateSignals<T>>,
}

impl<T: Real> StreamInputs<T> {
    pub fn new(len: usize, dk: usize, dv: usize) -> Self {
        StreamInputs {
            len,
            dk,
            dv,
            q: vec![T::zero(); len * dk],
            k: vec![T::zero(); len * dk],
            v: vec![T::zero(); len * dv],
            gates: vec![
                GateSignals {
                    alpha: T::one(),
                    beta: T::one(),
                    beta_tilde: T::one(),
                    b: T::one(),
                    d: T::zero(),
                };
                len
            ],
        }
    }

    pub fn step(&self, t: usize) -> StepInput<'_, T> {
        StepInput {
            q: &self.q[t * self.dk..(t + 1) * self.dk],
            k: &self.k[t * self.dk..(t + 1) * self.dk],
            v: &self.v[t * self.dv..(t + 1) * self.dv],
            gates: self.gates[t],
        }
    }

    pub fn set_step(&mut self, t: usize, q: &[T], k: &[T], v: &[T], gates: GateSignals<T>) {
        self.q[t * self.dk..(t + 1) * self.dk].copy_from_slice(q);
        self.k[t * self.dk..(t + 1) * self.dk].copy_from_slice(k);
        self.v[t * self.dv..(t + 1) * self.dv].copy_from_slice(v);
        self.gates[t] = gates;
    }

    /// Validate shape coherence and (for `variant`) the gate-range contract
    /// at every token.
    pub fn validate(&self, variant: Variant) -> Result<()> {
        if self.q.len() != self.len * self.dk
            || self.k.len() != self.len * self.dk
            || self.v.len() != self.len * self.dv
            || self.gates.len() != self.len
        {
            return Err(KernelError::contract(
                "stream inputs",
                "buffer lengths disagree with (len, dk, dv)",
            ));
        }
        for t in 0..self.len {
            let step = self.step(t);
            validate_step(variant, &step).map_err(|e| e.at_token(t))?;
        }
        Ok(())
    }
}

/// Validate one token's gates and key norm for `variant`.
pub fn validate_step<T: Real>(variant: Variant, step: &StepInput<'_, T>) -> Result<()> {
    let g = &step.gates;
    for (name, value) in [
        ("alpha", g.alpha),
        ("beta", g.beta),
        ("beta_tilde", g.beta_tilde),
        ("b", g.b),
        ("d", g.d),
    ] {
        if !value.is_finite() {
            return Err(KernelError::contract(
                "gate signals",
                format!("{name} is not finite"),
            ));
        }
    }
    let af = g.alpha.as_f64();
    if !(af > 0.0 && af <= 1.0) {
        return Err(KernelError::contract(
            "gate signals",
            format!("alpha = {af} outside (0, 1]"),
        ));
    }
    let bf = g.beta.as_f64();
    if !(bf > 0.0 && bf <= 1.0) {
        return Err(KernelError::contract(
            "gate signals",
            format!("beta = {bf} outside (0, 1]"),
        ));
    }
    let btf = g.beta_tilde.as_f64();
    if !(0.0..=1.0).contains(&btf) {
        return Err(KernelError::contract(
            "gate signals",
            format!("beta_tilde = {btf} outside [0, 1]"),
        ));
    }
    let blend = g.b.as_f64();
    if !(0.0..=1.0).contains(&blend) {
        return Err(KernelError::contract(
            "gate signals",
            format!("b = {blend} outside [0, 1]"),
        ));
    }
    for (name, buf) in [("q", step.q), ("k", step.k), ("v", step.v)] {
        if buf.iter().any(|x| !x.is_finite()) {
            return Err(KernelError::contract(
                "kernel inputs",
                format!("{name} contains a non-finite entry"),
            ));
        }
    }
    if variant.requires_unit_keys() {
        let norm = step.k.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > KEY_NORM_TOLERANCE {
            return Err(KernelError::contract(
                "kernel inputs",
                format!("||k|| = {norm}, but {variant} requires unit keys"),
            ));
        }
    }
    Ok(())
}

/// Advance `state` by one token and write the output into `out` (length
/// `dv`). Does not validate; callers go through [`run_recurrent`] or validate
/// up front.
pub fn step<T: Real>(
    state: &mut HeadState<T>,
    coeffs: Coefficients<T>,
    step: &StepInput<'_, T>,
    out: &mut [T],
) {
    let dk = state.dk();
    let dv = state.dv();
    debug_assert_eq!(step.q.len(), dk);
    debug_assert_eq!(step.k.len(), dk);
    debug_assert_eq!(step.v.len(), dv);
    debug_assert_eq!(out.len(), dv);
    let Coefficients { alpha, beta, gamma, delta } = coeffs;
    // q_tilde = q - delta * k, reused across rows.
    let mut q_tilde = vec![T::zero(); dk];
    for j in 0..dk {
        q_tilde[j] = step.q[j] - delta * step.k[j];
    }
    for i in 0..dv {
        let row = state.s.row_mut(i);
        // m_i = (S k)_i before the row is overwritten.
        let mut m_i = T::zero();
        for j in 0..dk {
            m_i = m_i + row[j] * step.k[j];
        }
        // w_i: coefficient of k^T in this row's rank-one update.
        let w_i = beta * step.v[i] - gamma * m_i;
        let mut o_i = T::zero();
        for j in 0..dk {
            let s_ij = alpha * row[j] + w_i * step.k[j];
            row[j] = s_ij;
            o_i = o_i + s_ij * q_tilde[j];
        }
        out[i] = o_i;
    }
}

/// Run the per-token recurrence over a whole stream with the default
/// (normative) update order. See [`run_recurrent_with_order`].
pub fn run_recurrent<T: Real>(
    variant: Variant,
    inputs: &StreamInputs<T>,
    state: &mut HeadState<T>,
) -> Result<Matrix<T>> {
    run_recurrent_with_order(variant, UpdateOrder::Normative, inputs, state)
}

/// Run the per-token recurrence over a whole stream, mutating `state` in
/// place and returning the `len x dv` output matrix. Inputs are validated up
/// front; outputs are scanned per token so a non-finite value is reported at
/// the first token it appears.
pub fn run_recurrent_with_order<T: Real>(
    variant: Variant,
    order: UpdateOrder,
    inputs: &StreamInputs<T>,
    state: &mut HeadState<T>,
) -> Result<Matrix<T>> {
    inputs.validate(variant)?;
    if state.dk() != inputs.dk || state.dv() != inputs.dv {
        return Err(KernelError::dim(
            "run_recurrent state",
            format!("{}x{}", inputs.dv, inputs.dk),
            format!("{}x{}", state.dv(), state.dk()),
        ));
    }
    let mut outputs = Matrix::zeros(inputs.len, inputs.dv);
    for t in 0..inputs.len {
        let si = inputs.step(t);
        let coeffs = Coefficients::for_variant(variant, order, &si.gates);
        step(state, coeffs, &si, outputs.row_mut(t));
        if let Some((i, _)) = outputs
            .row(t)
            .iter()
            .enumerate()
            .find(|(_, x)| !x.is_finite())
        {
            // Locate the offending state entry for the report; a NaN output
            // row implicates that state row.
            let mut row = i;
            let mut col = 0;
            'scan: for r in 0..state.dv() {
                for c in 0..state.dk() {
                    if !state.s.get(r, c).is_finite() {
                        row = r;
                        col = c;
                        break 'scan;
                    }
                }
            }
            return Err(KernelError::NonFinite {
                location: String::new(),
                token: t,
                row,
                col,
            }
            .in_stream("recurrent state"));
        }
    }
    Ok(outputs)
}

/// Materialize the `dk x dk` state-transition matrix `alpha I - gamma k k^T`
/// applied (from the right) at one token. `S_t = S_{t-1} A_t + write`.
pub fn materialize_transition<T: Real>(coeffs: Coefficients<T>, k: &[T]) -> Matrix<T> {
    let dk = k.len();
    Matrix::from_fn(dk, dk, |i, j| {
        let base = if i == j { coeffs.alpha } else { T::zero() };
        base - coeffs.gamma * k[i] * k[j]
    })
}
