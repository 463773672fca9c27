//! Self-verification suites run by `osvi verify`.
//!
//! Each suite is a list of named checks with a pass flag and a short
//! measurement. Failures never panic; errors become failed checks.

mod grad;
mod leakage;
mod loss;
mod metrics;
mod structure;

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use metrics::{naive_iou_recall, naive_psnr, naive_ssim};

pub const SUITES: [&str; 5] = ["grad", "leakage", "structure", "loss", "metrics"];

/// Seeds every randomised check sweeps.
pub const SEEDS: std::ops::Range<u64> = 0..10;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn from_result(name: impl Into<String>, r: Result<(bool, String)>) -> Self {
        let (passed, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
        Check {
            name: name.into(),
            passed,
            detail,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Runs the named suite.
pub fn run_suite(name: &str) -> Result<SuiteReport> {
    let (suite, run): (&'static str, fn() -> Vec<Check>) = match name {
        "grad" => ("grad", grad::checks),
        "leakage" => ("leakage", leakage::checks),
        "structure" => ("structure", structure::checks),
        "loss" => ("loss", loss::checks),
        "metrics" => ("metrics", metrics::checks),
        other => {
            return Err(Error::Contract(format!(
                "unknown suite `{other}`; expected one of {}",
                SUITES.join(", ")
            )))
        }
    };
    let start = Instant::now();
    let checks = run();
    Ok(SuiteReport {
        suite,
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}
