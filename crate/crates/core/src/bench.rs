//! Throughput benchmarking of the recurrence engines.
//!
//! Each case times one engine over seeded synthetic streams. Before any
//! timing, the case's outputs are cross-checked against the token-sequential
//! oracle (when the variant supports both engines), and every timed
//! iteration must reproduce the first iteration's output checksum bitwise —
//! a benchmark that drifts is reporting the speed of a wrong answer.
//!
//! Times are wall-clock per full pass, summarized by nearest-rank
//! percentiles; `tokens_per_sec` uses the median. Results carry the peak RSS
//! when the platform exposes it.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunkwise::{run_chunkwise_with_order, supports_chunkwise};
use crate::error::{KernelError, Result};
use crate::gates::GateSignals;
use crate::model::ExecMode;
use crate::numerics::l2_normalize;
use crate::real::{Precision, Real};
use crate::recurrence::{run_recurrent_with_order, HeadState, StreamInputs, UpdateOrder, Variant};

/// One benchmark configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchCase {
    pub variant: Variant,
    pub mode: ExecMode,
    pub batch: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub chunk_size: usize,
    pub head_dk: usize,
    pub head_dv: usize,
    pub precision: Precision,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub seed: u64,
}

impl Default for BenchCase {
    fn default() -> Self {
        BenchCase {
            variant: Variant::CombaSplr,
            mode: ExecMode::Chunkwise,
            batch: 1,
            heads: 8,
            seq_len: 4096,
            chunk_size: 64,
            head_dk: 64,
            head_dv: 64,
            precision: Precision::Single,
            warmup_iters: 1,
            timed_iters: 5,
            seed: 42,
        }
    }
}

impl BenchCase {
    pub fn validate(&self) -> Result<()> {
        let err = |d: String| Err(KernelError::contract("bench case", d));
        for (name, v) in [
            ("batch", self.batch),
            ("heads", self.heads),
            ("seq_len", self.seq_len),
            ("chunk_size", self.chunk_size),
            ("head_dk", self.head_dk),
            ("head_dv", self.head_dv),
            ("timed_iters", self.timed_iters),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if self.mode == ExecMode::Chunkwise && !supports_chunkwise(self.variant) {
            return Err(KernelError::UnsupportedVariant {
                variant: self.variant.name(),
                path: "chunkwise benchmarking",
            });
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.seq_len
    }
}

/// Measurement for one case.
#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub case: BenchCase,
    pub median_secs: f64,
    pub p10_secs: f64,
    pub p90_secs: f64,
    pub tokens_per_sec: f64,
    /// Bit pattern of the per-iteration output checksum (stable across
    /// iterations by construction).
    pub checksum_bits: u64,
    /// Peak resident set size, when the platform reports it.
    pub peak_rss_bytes: Option<u64>,
}

/// Build the synthetic streams for a case: unit-norm keys, bounded decays,
/// small output corrections — valid for every variant's contract.
fn build_streams<T: Real>(case: &BenchCase) -> Vec<StreamInputs<T>> {
    let (dk, dv) = (case.head_dk, case.head_dv);
    (0..case.batch * case.heads)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(case.seed ^ (s as u64).wrapping_mul(0x9E37));
            let mut si = StreamInputs::new(case.seq_len, dk, dv);
            let mut q = vec![T::zero(); dk];
            let mut k = vec![T::zero(); dk];
            let mut v = vec![T::zero(); dv];
            for t in 0..case.seq_len {
                for x in q.iter_mut() {
                    *x = T::from_f64(rng.random_range(-1.0..1.0));
                }
                for x in k.iter_mut() {
                    *x = T::from_f64(rng.random_range(-1.0..1.0));
                }
                for x in v.iter_mut() {
                    *x = T::from_f64(rng.random_range(-1.0..1.0));
                }
                let k = l2_normalize(&k, 0.0);
                let beta = rng.random_range(0.1..0.9);
                let blend = rng.random_range(0.2..0.8);
                let gates = GateSignals {
                    alpha: T::from_f64(rng.random_range(0.9..0.999)),
                    beta: T::from_f64(beta),
                    beta_tilde: T::from_f64(blend * beta),
                    b: T::from_f64(blend),
                    d: T::from_f64(rng.random_range(-0.05..0.05)),
                };
                si.set_step(t, &q, &k, &v, gates);
            }
            si
        })
        .collect()
}

fn run_engine<T: Real>(
    case: &BenchCase,
    mode: ExecMode,
    streams: &[StreamInputs<T>],
) -> Result<Vec<crate::numerics::Matrix<T>>> {
    streams
        .iter()
        .map(|si| {
            let mut state = HeadState {
                s: crate::numerics::Matrix::zeros(case.head_dv, case.head_dk),
            };
            match mode {
                ExecMode::Chunkwise => run_chunkwise_with_order(
                    case.variant,
                    UpdateOrder::Normative,
                    si,
                    &mut state,
                    case.chunk_size,
                ),
                ExecMode::Recurrent => {
                    run_recurrent_with_order(case.variant, UpdateOrder::Normative, si, &mut state)
                }
            }
        })
        .collect()
}

fn checksum<T: Real>(outputs: &[crate::numerics::Matrix<T>]) -> f64 {
    let mut acc = 0.0f64;
    for m in outputs {
        for &x in m.as_slice() {
            acc += x.as_f64();
        }
    }
    acc
}

fn measure<T: Real>(case: &BenchCase) -> Result<BenchResult> {
    let streams = build_streams::<T>(case);

    // Correctness gate: the timed engine must agree with the
    // token-sequential oracle before its speed means anything.
    if case.mode == ExecMode::Chunkwise {
        let oracle = run_engine(case, ExecMode::Recurrent, &streams)?;
        let fast = run_engine(case, ExecMode::Chunkwise, &streams)?;
        let tol = match case.precision {
            Precision::Single => 1e-2,
            Precision::Double => 1e-8,
        };
        for (s, (a, b)) in oracle.iter().zip(&fast).enumerate() {
            let diff = a.max_abs_diff(b);
            if diff > tol {
                return Err(KernelError::contract(
                    "bench correctness gate",
                    format!("stream {s}: engines disagree by {diff:e} (tolerance {tol:e})"),
                ));
            }
        }
    }

    for _ in 0..case.warmup_iters {
        run_engine(case, case.mode, &streams)?;
    }

    let mut times = Vec::with_capacity(case.timed_iters);
    let mut checksum_bits = None;
    for i in 0..case.timed_iters {
        let t0 = Instant::now();
        let outputs = run_engine(case, case.mode, &streams)?;
        times.push(t0.elapsed().as_secs_f64());
        let bits = checksum(&outputs).to_bits();
        match checksum_bits {
            None => checksum_bits = Some(bits),
            Some(want) if want != bits => {
                return Err(KernelError::contract(
                    "bench determinism gate",
                    format!(
                        "iteration {i} checksum {bits:#018x} differs from {want:#018x}"
                    ),
                ));
            }
            _ => {}
        }
    }
    times.sort_by(f64::total_cmp);
    let nearest_rank = |p: f64| -> f64 {
        let n = times.len();
        let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
        times[rank - 1]
    };
    let median = nearest_rank(0.50);
    Ok(BenchResult {
        case: *case,
        median_secs: median,
        p10_secs: nearest_rank(0.10),
        p90_secs: nearest_rank(0.90),
        tokens_per_sec: case.tokens() as f64 / median,
        checksum_bits: checksum_bits.unwrap_or(0),
        peak_rss_bytes: peak_rss_bytes(),
    })
}

/// Run one benchmark case.
pub fn run_case(case: &BenchCase) -> Result<BenchResult> {
    case.validate()?;
    match case.precision {
        Precision::Single => measure::<f32>(case),
        Precision::Double => measure::<f64>(case),
    }
}

/// The standard sweep: engine comparison at a short and a long sequence
/// length, single precision.
pub fn default_suite() -> Vec<BenchCase> {
    let mut cases = Vec::new();
    for seq_len in [256, 4096] {
        for mode in [ExecMode::Recurrent, ExecMode::Chunkwise] {
            cases.push(BenchCase { seq_len, mode, ..BenchCase::default() });
        }
    }
    cases
}

/// Peak resident set size in bytes, read from `/proc/self/status` (`VmHWM`).
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Write results as CSV with a commented environment header.
pub fn write_csv<W: Write>(results: &[BenchResult], w: &mut W) -> Result<()> {
    let io = |e| KernelError::io("bench csv", e);
    writeln!(
        w,
        "# threads={} cpus={}",
        rayon::current_num_threads(),
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    )
    .map_err(io)?;
    writeln!(
        w,
        "variant,mode,precision,batch,heads,seq_len,chunk_size,head_dk,head_dv,timed_iters,\
         median_secs,p10_secs,p90_secs,tokens_per_sec,peak_rss_bytes"
    )
    .map_err(io)?;
    for r in results {
        let c = &r.case;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{:.6e},{:.6e},{:.6e},{:.1},{}",
            c.variant,
            c.mode,
            c.precision,
            c.batch,
            c.heads,
            c.seq_len,
            c.chunk_size,
            c.head_dk,
            c.head_dv,
            c.timed_iters,
            r.median_secs,
            r.p10_secs,
            r.p90_secs,
            r.tokens_per_sec,
            r.peak_rss_bytes.map(|b| b.to_string()).unwrap_or_default(),
        )
        .map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_case() -> BenchCase {
        BenchCase {
            seq_len: 96,
            chunk_size: 16,
            heads: 2,
            head_dk: 8,
            head_dv: 8,
            warmup_iters: 0,
            timed_iters: 3,
            ..BenchCase::default()
        }
    }

    #[test]
    fn case_runs_and_reports_consistent_numbers() {
        let r = run_case(&quick_case()).unwrap();
        assert!(r.median_secs > 0.0);
        assert!(r.p10_secs <= r.median_secs && r.median_secs <= r.p90_secs);
        let expect = r.case.tokens() as f64 / r.median_secs;
        assert!((r.tokens_per_sec - expect).abs() < 1e-9 * expect);
        // Same case again: same checksum (timing differs, outputs must not).
        let r2 = run_case(&quick_case()).unwrap();
        assert_eq!(r.checksum_bits, r2.checksum_bits);
    }

    #[test]
    fn both_engines_and_precisions_run() {
        for mode in [ExecMode::Recurrent, ExecMode::Chunkwise] {
            for precision in [Precision::Single, Precision::Double] {
                let case = BenchCase { mode, precision, ..quick_case() };
                run_case(&case).unwrap();
            }
        }
    }

    #[test]
    fn unsupported_chunkwise_combination_is_rejected_up_front() {
        let case = BenchCase {
            variant: Variant::CombaIplr,
            mode: ExecMode::Chunkwise,
            ..quick_case()
        };
        assert!(matches!(
            run_case(&case),
            Err(KernelError::UnsupportedVariant { .. })
        ));
        // The same variant benches fine token-sequentially.
        let case = BenchCase {
            variant: Variant::CombaIplr,
            mode: ExecMode::Recurrent,
            ..quick_case()
        };
        run_case(&case).unwrap();
    }

    #[test]
    fn csv_has_header_and_one_line_per_result() {
        let results = vec![run_case(&quick_case()).unwrap()];
        let mut buf = Vec::new();
        write_csv(&results, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# threads="));
        assert!(lines[1].starts_with("variant,mode,"));
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("comba-splr,chunkwise,single,"));
    }

    #[test]
    fn peak_rss_reads_when_procfs_exists() {
        // On platforms with procfs this returns a sane positive number;
        // elsewhere it must simply be None rather than wrong.
        if let Some(bytes) = peak_rss_bytes() {
            assert!(bytes > 1024 * 1024, "peak RSS {bytes} implausibly small");
        }
    }
}
