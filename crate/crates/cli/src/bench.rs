//! Wall-clock timing of one dilution application per kind and map size.

use std::fs;
use std::io::Write;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use freqdrop_core::dilution::{
    apply_frequency_dropout, apply_signal_dropout, sample_frequency_mask, sample_signal_mask,
};
use freqdrop_core::metrics::stats::linear_fit;
use freqdrop_core::rng::stream;
use freqdrop_core::{DropoutKind, Tensor};
use rand::Rng;
use serde::Serialize;

use crate::config::{config_error, ExperimentConfig};
use crate::fmt::num;

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub kind: DropoutKind,
    pub side: usize,
    pub elements: usize,
    pub rate: f64,
    /// Median nanoseconds per application.
    pub nanos: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Fit {
    pub kind: DropoutKind,
    pub rate: f64,
    /// Slope of log time against log element count.
    pub slope: f64,
    pub intercept: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchSummary {
    pub timings: Vec<Timing>,
    pub fits: Vec<Fit>,
}

/// Median per-call time of `op`, each sample averaging enough calls to fill
/// `min_batch`.
pub fn median_nanos(mut op: impl FnMut(), samples: usize, min_batch: Duration) -> f64 {
    op();
    let mut calls = 1u64;
    loop {
        let t = Instant::now();
        for _ in 0..calls {
            op();
        }
        if t.elapsed() >= min_batch || calls >= 1 << 24 {
            break;
        }
        calls *= 2;
    }
    let mut per_call: Vec<f64> = (0..samples.max(1))
        .map(|_| {
            let t = Instant::now();
            for _ in 0..calls {
                op();
            }
            t.elapsed().as_nanos() as f64 / calls as f64
        })
        .collect();
    per_call.sort_by(f64::total_cmp);
    per_call[per_call.len() / 2]
}

/// Times `apply_*_dropout` on a pre-sampled mask over a `side × side` map.
pub fn time_application(
    kind: DropoutKind,
    side: usize,
    rate: f64,
    seed: u64,
    samples: usize,
    min_batch: Duration,
) -> Result<f64> {
    let mut rng = stream(seed, &[side as u64]);
    let n = side * side;
    let map = Tensor::from_vec(&[1, side, side], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let nanos = match kind {
        DropoutKind::Signal => {
            let mask = sample_signal_mask(&[1, side, side], rate, &mut rng)?;
            median_nanos(
                || {
                    std::hint::black_box(apply_signal_dropout(&map, &mask, false).expect("shapes match"));
                },
                samples,
                min_batch,
            )
        }
        DropoutKind::Frequency => {
            let mask = sample_frequency_mask(side, side, rate, true, &mut rng)?;
            median_nanos(
                || {
                    std::hint::black_box(apply_frequency_dropout(&map, &mask, false).expect("shapes match"));
                },
                samples,
                min_batch,
            )
        }
    };
    Ok(nanos)
}

pub fn run_bench(cfg: &ExperimentConfig) -> Result<BenchSummary> {
    let b = &cfg.bench;
    if b.sizes.is_empty() {
        return Err(config_error("bench.sizes is empty"));
    }
    if b.sizes.contains(&0) {
        return Err(config_error("bench.sizes must be positive"));
    }
    if b.rates.is_empty() || b.rates.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(config_error("bench.rates must be a non-empty list of rates in [0, 1]"));
    }
    let min_batch = Duration::from_millis(b.min_batch_ms);
    let mut timings = Vec::new();
    let mut fits = Vec::new();
    for &kind in &cfg.kinds {
        for &rate in &b.rates {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for &side in &b.sizes {
                let nanos = time_application(kind, side, rate, cfg.seed, b.repetitions, min_batch)?;
                xs.push(((side * side) as f64).ln());
                ys.push(nanos.ln());
                timings.push(Timing {
                    kind,
                    side,
                    elements: side * side,
                    rate,
                    nanos,
                });
            }
            let (slope, intercept) = if xs.len() >= 2 { linear_fit(&xs, &ys) } else { (f64::NAN, f64::NAN) };
            fits.push(Fit {
                kind,
                rate,
                slope,
                intercept,
            });
        }
    }
    Ok(BenchSummary { timings, fits })
}

pub fn cmd_bench(cfg: &ExperimentConfig) -> Result<BenchSummary> {
    let summary = run_bench(cfg)?;
    let out = &cfg.output;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut csv = String::from("kind,side,elements,rate,ns_per_application\n");
    for t in &summary.timings {
        csv += &format!("{},{},{},{},{:.1}\n", t.kind, t.side, t.elements, num(t.rate), t.nanos);
    }
    fs::write(out.join("bench.csv"), csv)?;
    let mut fit = fs::File::create(out.join("bench_fit.csv"))?;
    writeln!(fit, "kind,rate,slope,intercept")?;
    for f in &summary.fits {
        writeln!(fit, "{},{},{},{}", f.kind, num(f.rate), num(f.slope), num(f.intercept))?;
    }
    Ok(summary)
}
