//! Batch-1 latency harness: warmup, then independently timed repetitions
//! summarized by median, mean and minimum.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::fused::synthetic;
use crate::error::{Error, Result};
use crate::numcore::RngSeed;

pub const MIN_REPS: usize = 30;
pub const MIN_WARMUP: usize = 5;

/// Salient / sparse-group density used by the PB-LLM and BiLLM analogs.
pub const BASELINE_SALIENT_RATIO: f64 = 0.10;

/// Linear-layer shapes of the 7B and 13B LLaMA configurations.
pub const PAPER_SHAPES: [(usize, usize); 6] = [
    (4096, 4096),
    (4096, 11008),
    (11008, 4096),
    (5120, 5120),
    (5120, 13824),
    (13824, 5120),
];

pub const CSV_HEADER: &str = "kernel,n,m,e,reps,median_us,mean_us,min_us";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelId {
    /// Dense single-precision GEMV.
    Dense,
    /// Binary GEMV with static input/output scales.
    OneBit,
    /// Fused mixture-of-scales GEMV.
    BinaryMoS,
    /// Binary GEMV plus a sparse 8-bit salient scatter.
    PbLlm,
    /// Two binary planes with a group mask.
    BiLlm,
}

impl KernelId {
    pub const ALL: [KernelId; 5] = [
        KernelId::Dense,
        KernelId::PbLlm,
        KernelId::BiLlm,
        KernelId::OneBit,
        KernelId::BinaryMoS,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelId::Dense => "dense",
            KernelId::OneBit => "onebit",
            KernelId::BinaryMoS => "binarymos",
            KernelId::PbLlm => "pbllm",
            KernelId::BiLlm => "billm",
        }
    }
}

impl fmt::Display for KernelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelId::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::param(format!("unknown kernel '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub kernel: KernelId,
    pub n: usize,
    pub m: usize,
    pub e: usize,
    pub reps: usize,
    pub warmup: usize,
    pub median_us: f64,
    pub mean_us: f64,
    pub min_us: f64,
}

impl BenchReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3},{:.3},{:.3}",
            self.kernel, self.n, self.m, self.e, self.reps, self.median_us, self.mean_us, self.min_us
        )
    }

    fn from_samples(kernel: KernelId, n: usize, m: usize, e: usize, warmup: usize, mut us: Vec<f64>) -> Self {
        us.sort_by(f64::total_cmp);
        let reps = us.len();
        let median_us = if reps % 2 == 1 {
            us[reps / 2]
        } else {
            0.5 * (us[reps / 2 - 1] + us[reps / 2])
        };
        BenchReport {
            kernel,
            n,
            m,
            e,
            reps,
            warmup,
            median_us,
            mean_us: us.iter().sum::<f64>() / reps as f64,
            min_us: us[0],
        }
    }
}

/// The activation vector every kernel sees for a given seed.
pub fn bench_input(seed: RngSeed, m: usize) -> Vec<f32> {
    let mut rng = seed.derive(0x1_0000).rng();
    (0..m).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn time_kernel(
    reps: usize,
    warmup: usize,
    x: &[f32],
    y: &mut [f32],
    mut run: impl FnMut(&[f32], &mut [f32]) -> Result<()>,
) -> Result<Vec<f64>> {
    for _ in 0..warmup {
        run(black_box(x), y)?;
        black_box(&y);
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        run(black_box(x), y)?;
        black_box(&y);
        samples.push(start.elapsed().as_secs_f64() * 1e6);
    }
    Ok(samples)
}

/// Times one kernel on an `n × m` layer. Weights and input are generated
/// from `seed`, so every kernel at a given seed sees the same activation.
pub fn bench(
    kernel: KernelId,
    n: usize,
    m: usize,
    e: usize,
    reps: usize,
    warmup: usize,
    seed: RngSeed,
) -> Result<BenchReport> {
    if reps < MIN_REPS {
        return Err(Error::param(format!("reps must be at least {MIN_REPS}, got {reps}")));
    }
    if warmup < MIN_WARMUP {
        return Err(Error::param(format!(
            "warmup must be at least {MIN_WARMUP}, got {warmup}"
        )));
    }
    if n == 0 || m == 0 || e == 0 {
        return Err(Error::param("bench shapes and expert count must be positive"));
    }
    let x = bench_input(seed, m);
    let mut y = vec![0f32; n];
    let mut rng = seed.derive(kernel as u64 + 1).rng();
    let samples = match kernel {
        KernelId::Dense => {
            let mut k = synthetic::dense(n, m, &mut rng);
            time_kernel(reps, warmup, &x, &mut y, |x, y| k.gemv_into(x, y))?
        }
        KernelId::OneBit => {
            let mut k = synthetic::static_scale(n, m, &mut rng);
            time_kernel(reps, warmup, &x, &mut y, |x, y| k.gemv_into(x, y))?
        }
        KernelId::BinaryMoS => {
            let mut k = synthetic::mos(n, m, e, &mut rng);
            time_kernel(reps, warmup, &x, &mut y, |x, y| k.gemv_into(x, y))?
        }
        KernelId::PbLlm => {
            let mut k = synthetic::partial(n, m, BASELINE_SALIENT_RATIO, &mut rng);
            time_kernel(reps, warmup, &x, &mut y, |x, y| k.gemv_into(x, y))?
        }
        KernelId::BiLlm => {
            let mut k = synthetic::residual(n, m, BASELINE_SALIENT_RATIO, &mut rng);
            time_kernel(reps, warmup, &x, &mut y, |x, y| k.gemv_into(x, y))?
        }
    };
    Ok(BenchReport::from_samples(kernel, n, m, e, warmup, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_ids_round_trip_and_reject_unknown() {
        for k in KernelId::ALL {
            assert_eq!(k.name().parse::<KernelId>().unwrap(), k);
        }
        assert!(matches!("fp8".parse::<KernelId>(), Err(Error::Parameter(_))));
    }

    #[test]
    fn same_seed_same_input() {
        assert_eq!(bench_input(RngSeed(4), 100), bench_input(RngSeed(4), 100));
        assert_ne!(bench_input(RngSeed(4), 100), bench_input(RngSeed(5), 100));
    }

    #[test]
    fn preconditions() {
        assert!(bench(KernelId::Dense, 8, 8, 1, 29, 5, RngSeed(0)).is_err());
        assert!(bench(KernelId::Dense, 8, 8, 1, 30, 4, RngSeed(0)).is_err());
    }

    #[test]
    fn small_bench_reports_ordered_statistics() {
        for k in KernelId::ALL {
            let r = bench(k, 64, 130, 4, 30, 5, RngSeed(1)).unwrap();
            assert_eq!(r.reps, 30);
            assert!(r.min_us <= r.median_us && r.min_us <= r.mean_us);
            assert_eq!(r.csv_row().split(',').count(), CSV_HEADER.split(',').count());
        }
    }

    #[test]
    fn median_of_even_sample_count() {
        let r = BenchReport::from_samples(KernelId::Dense, 1, 1, 1, 5, vec![4.0, 1.0, 3.0, 2.0]);
        assert_eq!(r.median_us, 2.5);
        assert_eq!(r.min_us, 1.0);
        assert_eq!(r.mean_us, 2.5);
    }
}
