//! Timing harness for the per-iteration cost of mean-field inference.

use std::time::Instant;

use serde::Serialize;

use crate::alloc_audit::{self, AllocStats};
use crate::embeddings::gaussian_matrix;
use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::mfvi::{init_marginals, logit_difference, run, MfviConfig, Workspace};
use crate::potentials::LowRankPotentials;
use crate::rng;
use crate::unary::UnaryScores;

pub const DEFAULT_SIZES: [usize; 4] = [2000, 4000, 8000, 16000];
pub const DEFAULT_BENCH_RANK: usize = 128;
/// Upper bound on the time ratio per doubling of N or R.
pub const MAX_DOUBLING_RATIO: f64 = 2.5;

#[derive(Debug, Clone, Serialize)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub rank: usize,
    /// Timed runs per size; the fastest is reported.
    pub repeats: usize,
    /// Iterations per timed run.
    pub iterations: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: DEFAULT_SIZES.to_vec(),
            rank: DEFAULT_BENCH_RANK,
            repeats: 7,
            iterations: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub rank: usize,
    pub ms_per_iteration: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AllocAudit {
    pub n: usize,
    pub rank: usize,
    pub stats: AllocStats,
    /// Bytes a dense N x N buffer of f64 would need.
    pub dense_bytes: usize,
    /// Peak at 2N divided by peak at N.
    pub doubling_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Successive ratios of per-iteration time over N.
    pub n_ratios: Vec<f64>,
    /// Least-squares slope of ms per iteration against N, per 1000 types.
    pub slope_ms_per_1k: f64,
    pub intercept_ms: f64,
    /// Per-iteration time at the largest N for ranks R and 2R.
    pub rank_rows: Vec<BenchRow>,
    pub rank_ratio: f64,
    /// Present only when the counting allocator is registered.
    pub alloc: Option<AllocAudit>,
}

impl BenchReport {
    pub fn scaling_ok(&self) -> bool {
        self.n_ratios.iter().all(|&r| r <= MAX_DOUBLING_RATIO) && self.rank_ratio <= MAX_DOUBLING_RATIO
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("     N     R   ms/iter  ratio\n");
        for (i, row) in self.rows.iter().enumerate() {
            let ratio = if i == 0 {
                "     -".to_string()
            } else {
                format!("{:6.2}", self.n_ratios[i - 1])
            };
            s += &format!("{:6} {:5} {:9.4} {ratio}\n", row.n, row.rank, row.ms_per_iteration);
        }
        s += &format!(
            "linear fit: {:.4} ms per 1000 types + {:.4} ms\n",
            self.slope_ms_per_1k, self.intercept_ms
        );
        for row in &self.rank_rows {
            s += &format!("{:6} {:5} {:9.4}\n", row.n, row.rank, row.ms_per_iteration);
        }
        s += &format!("rank doubling ratio: {:.2}\n", self.rank_ratio);
        match &self.alloc {
            Some(a) => {
                s += &format!(
                    "allocation audit at N={} R={}: peak {} B, largest block {} B, dense N^2 would be {} B, peak ratio at 2N {:.2}\n",
                    a.n, a.rank, a.stats.peak_extra_bytes, a.stats.largest_allocation, a.dense_bytes, a.doubling_ratio
                );
            }
            None => s += "allocation audit: counting allocator not registered\n",
        }
        s
    }
}

fn problem(n: usize, rank: usize, seed: u64) -> (UnaryScores, LowRankPotentials) {
    let mut g = rng::indexed_substream(seed, "bench", (n * 1_000 + rank) as u64);
    let theta = gaussian_matrix(&mut g, 1, n, 1.0).row(0).to_owned();
    let scale = 1.0 / (rank as f64).sqrt();
    let pot = LowRankPotentials::new(
        gaussian_matrix(&mut g, n, rank, scale),
        gaussian_matrix(&mut g, n, rank, scale),
    )
    .expect("matching shapes");
    (UnaryScores::new(theta), pot)
}

/// Fastest observed per-iteration time over `repeats` runs, in ms. The
/// iterations update buffers in place so allocation is not timed.
pub fn time_iteration(n: usize, rank: usize, config: &BenchConfig) -> f64 {
    let (scores, pot) = problem(n, rank, config.seed);
    let lambda = MfviConfig::default().step_size;
    let init = init_marginals(&scores);
    let mut work = Workspace::new(n, rank);
    let mut best = f64::INFINITY;
    for _ in 0..config.repeats.max(1) {
        let mut q0 = init.q0.to_vec();
        let mut q1 = init.q1.to_vec();
        let start = Instant::now();
        for _ in 0..config.iterations.max(1) {
            logit_difference(&q0, &q1, &scores, &pot, None, &mut work);
            for (j, &d) in work.diff.iter().enumerate() {
                q1[j] += lambda * (sigmoid(d) - q1[j]);
                q0[j] += lambda * (sigmoid(-d) - q0[j]);
            }
        }
        let ms = start.elapsed().as_secs_f64() * 1e3 / config.iterations.max(1) as f64;
        std::hint::black_box(&q1);
        best = best.min(ms);
    }
    best
}

fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

/// Peak extra heap use of a full default-length inference run.
pub fn audit_inference(n: usize, rank: usize, seed: u64) -> AllocStats {
    let (scores, pot) = problem(n, rank, seed);
    alloc_audit::reset();
    let traj = run(&scores, &pot, &MfviConfig::default()).expect("valid problem");
    let stats = alloc_audit::snapshot();
    drop(traj);
    stats
}

pub fn allocation_audit(n: usize, rank: usize, seed: u64) -> Option<AllocAudit> {
    if !alloc_audit::is_active() {
        return None;
    }
    let small = audit_inference(n, rank, seed);
    let large = audit_inference(2 * n, rank, seed);
    Some(AllocAudit {
        n,
        rank,
        stats: small,
        dense_bytes: n * n * std::mem::size_of::<f64>(),
        doubling_ratio: large.peak_extra_bytes as f64 / small.peak_extra_bytes.max(1) as f64,
    })
}

pub fn run_bench(config: &BenchConfig) -> Result<BenchReport> {
    if config.sizes.len() < 2 || config.rank == 0 {
        return Err(Error::Config("bench needs at least two sizes and a positive rank".into()));
    }
    let rows: Vec<BenchRow> = config
        .sizes
        .iter()
        .map(|&n| BenchRow {
            n,
            rank: config.rank,
            ms_per_iteration: time_iteration(n, config.rank, config),
        })
        .collect();
    let n_ratios = rows
        .windows(2)
        .map(|w| w[1].ms_per_iteration / w[0].ms_per_iteration)
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64 / 1000.0).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.ms_per_iteration).collect();
    let (slope, intercept) = linear_fit(&xs, &ys);

    let n_max = *config.sizes.iter().max().expect("nonempty");
    let rank_rows: Vec<BenchRow> = [config.rank, 2 * config.rank]
        .iter()
        .map(|&rank| BenchRow {
            n: n_max,
            rank,
            ms_per_iteration: time_iteration(n_max, rank, config),
        })
        .collect();
    let rank_ratio = rank_rows[1].ms_per_iteration / rank_rows[0].ms_per_iteration;
    let alloc = allocation_audit(n_max, config.rank, config.seed);
    Ok(BenchReport {
        rows,
        n_ratios,
        slope_ms_per_1k: slope,
        intercept_ms: intercept,
        rank_rows,
        rank_ratio,
        alloc,
    })
}
