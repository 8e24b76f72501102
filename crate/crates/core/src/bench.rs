//! Decoder throughput on synthetic score tensors.
//!
//! Each row times inference plus tree decoding for a fixed pool of random
//! instances of one length. First-order variants run with zero
//! iterations. Wall-clock figures are informational; the multiply-add
//! counts are exact.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::decoder::{message_macs, mfvi, mfvi_counted, MacCounter, Variant};
use crate::scorer::label_distribution;
use crate::scores::ScoreTensors;
use crate::tree::{decode, DecodeConfig};

/// Reference sentences per second (training, testing) reported for a GPU
/// implementation; hardware-specific and not expected to be reproduced.
pub const REFERENCE_THROUGHPUT: [(Variant, u32, u32); 4] = [
    (Variant::Single1O, 616, 1123),
    (Variant::Local1O, 625, 1150),
    (Variant::Single2O, 481, 966),
    (Variant::Local2O, 486, 1006),
];

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub variants: Vec<Variant>,
    pub lengths: Vec<usize>,
    /// Timed repeats per row (at least 3); one untimed warmup precedes them.
    pub repeats: usize,
    /// Instances decoded per repeat.
    pub sentences: usize,
    /// Iterations used by the second-order variants.
    pub iterations: usize,
    pub labels: usize,
    pub seed: u64,
    /// Decode instances across threads instead of on the calling thread.
    pub parallel: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            variants: Variant::ALL.to_vec(),
            lengths: vec![10, 20, 40],
            repeats: 3,
            sentences: 20,
            iterations: crate::decoder::DEFAULT_ITERATIONS,
            labels: 8,
            seed: 1,
            parallel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub variant: String,
    pub n: usize,
    pub iterations: usize,
    pub repeats: usize,
    pub parallel: bool,
    pub median_seconds: f64,
    pub sentences_per_second: f64,
    /// Counted message multiply-adds for one iteration on one instance.
    pub macs_per_iteration: u64,
    /// Closed form `3 n (n - 1)^2`.
    pub expected_macs_per_iteration: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of `ln time` against `ln n`, per variant.
    pub slopes: Vec<(String, f64)>,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len();
    if m % 2 == 1 {
        xs[m / 2]
    } else {
        0.5 * (xs[m / 2 - 1] + xs[m / 2])
    }
}

/// Slope of the least-squares line through `(ln x, ln y)`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let cov: f64 = logs.iter().map(|&(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = logs.iter().map(|&(x, _)| (x - mx).powi(2)).sum();
    cov / var
}

/// Multiply-adds counted on one iteration of a random length-`n` instance.
pub fn counted_macs_per_iteration(n: usize, seed: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = ScoreTensors::random(n, 1, 1.0, 0.25, &mut rng);
    let mut counter = MacCounter::default();
    mfvi_counted(&scores, crate::decoder::Formulation::Local, 1, &mut counter);
    counter.0
}

fn decode_one(scores: &ScoreTensors, variant: Variant, iterations: usize) {
    let posterior = mfvi(scores, variant.formulation(), iterations);
    let p_label = label_distribution(&scores.label);
    decode(posterior.final_q(), &p_label, DecodeConfig::default()).expect("random scores decode");
}

pub fn benchmark(config: &BenchConfig) -> BenchReport {
    let repeats = config.repeats.max(3);
    let mut rows = Vec::new();
    for &n in &config.lengths {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ n as u64);
        let pool: Vec<ScoreTensors> = (0..config.sentences.max(1))
            .map(|_| ScoreTensors::random(n, config.labels, 1.0, 0.25, &mut rng))
            .collect();
        let macs = counted_macs_per_iteration(n, config.seed);
        for &variant in &config.variants {
            let iterations = if variant.default_iterations() == 0 {
                0
            } else {
                config.iterations
            };
            let run = || {
                if config.parallel {
                    pool.par_iter().for_each(|s| decode_one(s, variant, iterations));
                } else {
                    pool.iter().for_each(|s| decode_one(s, variant, iterations));
                }
            };
            run();
            let mut times: Vec<f64> = (0..repeats)
                .map(|_| {
                    let start = Instant::now();
                    run();
                    start.elapsed().as_secs_f64()
                })
                .collect();
            let med = median(&mut times);
            rows.push(BenchRow {
                variant: variant.label().to_owned(),
                n,
                iterations,
                repeats,
                parallel: config.parallel,
                median_seconds: med,
                sentences_per_second: pool.len() as f64 / med.max(f64::MIN_POSITIVE),
                macs_per_iteration: macs,
                expected_macs_per_iteration: message_macs(n),
            });
        }
    }
    let slopes = config
        .variants
        .iter()
        .filter_map(|v| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.variant == v.label())
                .map(|r| (r.n as f64, r.median_seconds.max(f64::MIN_POSITIVE)))
                .collect();
            (pts.len() >= 2).then(|| (v.label().to_owned(), log_log_slope(&pts)))
        })
        .collect();
    BenchReport { rows, slopes }
}

pub fn to_csv(report: &BenchReport) -> String {
    let mut out = String::from(
        "variant,n,iterations,repeats,parallel,median_seconds,sentences_per_second,macs_per_iteration,expected_macs_per_iteration\n",
    );
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{:.9},{:.3},{},{}",
            r.variant,
            r.n,
            r.iterations,
            r.repeats,
            r.parallel,
            r.median_seconds,
            r.sentences_per_second,
            r.macs_per_iteration,
            r.expected_macs_per_iteration
        )
        .expect("write to string");
    }
    out
}

/// Human-readable table followed by the fitted slopes and the reference
/// throughput figures.
pub fn to_table(report: &BenchReport) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<9} {:>4} {:>2} {:>12} {:>12} {:>12}",
        "variant", "n", "T", "median (s)", "sent/s", "MACs/iter"
    )
    .expect("write to string");
    for r in &report.rows {
        writeln!(
            out,
            "{:<9} {:>4} {:>2} {:>12.6} {:>12.1} {:>12}",
            r.variant, r.n, r.iterations, r.median_seconds, r.sentences_per_second, r.macs_per_iteration
        )
        .expect("write to string");
    }
    if !report.slopes.is_empty() {
        out.push_str("\nlog-log slope of time vs n:\n");
        for (v, s) in &report.slopes {
            writeln!(out, "  {:<9} {:.2}", v, s).expect("write to string");
        }
    }
    out.push_str("\nreference GPU throughput (sent/s, train / test; not comparable):\n");
    for (v, train, test) in REFERENCE_THROUGHPUT {
        writeln!(out, "  {:<9} {:>4} / {:>4}", v.label(), train, test).expect("write to string");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [5.0, 10.0, 20.0].iter().map(|&n: &f64| (n, 2.0 * n.powi(3))).collect();
        assert!((log_log_slope(&pts) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn counts_match_closed_form() {
        for n in [2, 5, 20] {
            assert_eq!(counted_macs_per_iteration(n, 3), message_macs(n));
        }
    }

    #[test]
    fn report_shape() {
        let config = BenchConfig {
            lengths: vec![4, 6],
            sentences: 2,
            repeats: 1,
            ..BenchConfig::default()
        };
        let r = benchmark(&config);
        assert_eq!(r.rows.len(), 8);
        assert!(r.rows.iter().all(|row| row.repeats == 3 && row.sentences_per_second.is_finite()));
        assert_eq!(r.slopes.len(), 4);
        assert_eq!(to_csv(&r).lines().count(), 9);
        assert!(to_table(&r).contains("1006"));
    }
}
