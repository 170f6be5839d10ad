//! Results files: per-seed CSV with a metadata header, JSON summary, and
//! the long-format sweep table.

use std::fmt::Write as _;
use std::path::Path;

use ada_clue::driver::{RoundSummary, RunTrace};
use serde::Serialize;

use crate::error::CliError;

/// `x` with exactly 9 significant digits; positional for moderate
/// magnitudes, scientific otherwise.
pub fn sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..=8).contains(&exp) {
        return sci;
    }
    let sign = if x < 0.0 { "-" } else { "" };
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    if exp >= 0 {
        let (int, frac) = digits.split_at(exp as usize + 1);
        if frac.is_empty() {
            format!("{sign}{int}")
        } else {
            format!("{sign}{int}.{frac}")
        }
    } else {
        format!("{sign}0.{}{digits}", "0".repeat((-exp - 1) as usize))
    }
}

pub struct Metadata<'a> {
    pub config_hash: &'a str,
    pub seeds: &'a [u64],
    pub strategy: &'a str,
    pub timestamp: u64,
}

/// Whether per-round timings are written as measured or as zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timing {
    Measured,
    Zeroed,
}

pub fn results_csv(meta: &Metadata<'_>, traces: &[RunTrace], timing: Timing) -> String {
    let mut out = String::new();
    let seeds: Vec<String> = meta.seeds.iter().map(u64::to_string).collect();
    writeln!(out, "# config_hash={}", meta.config_hash).unwrap();
    writeln!(out, "# seeds={}", seeds.join(";")).unwrap();
    writeln!(out, "# strategy={}", meta.strategy).unwrap();
    writeln!(out, "# timestamp={}", meta.timestamp).unwrap();
    out.push_str("seed,round,labels_used,accuracy,mean_entropy,wall_ms\n");
    let mut sorted: Vec<&RunTrace> = traces.iter().collect();
    sorted.sort_by_key(|t| t.seed);
    for t in sorted {
        for r in &t.records {
            let wall = match timing {
                Timing::Measured => r.wall_ms,
                Timing::Zeroed => 0,
            };
            writeln!(
                out,
                "{},{},{},{},{},{}",
                t.seed,
                r.round,
                r.cumulative_labels,
                sig9(r.accuracy),
                sig9(r.mean_entropy),
                wall
            )
            .unwrap();
        }
    }
    out
}

#[derive(Serialize)]
struct Summary<'a> {
    config_hash: &'a str,
    strategy: &'a str,
    rounds: &'a [RoundSummary],
}

pub fn summary_json(config_hash: &str, strategy: &str, rounds: &[RoundSummary]) -> String {
    let mut s = serde_json::to_string_pretty(&Summary {
        config_hash,
        strategy,
        rounds,
    })
    .expect("summary serializes");
    s.push('\n');
    s
}

/// One grid point of a sweep, for the combined table.
pub struct GridPoint<'a> {
    pub value: &'a str,
    pub traces: &'a [RunTrace],
}

pub fn combined_csv(param: &str, points: &[GridPoint<'_>]) -> String {
    let mut out = String::from("grid_param,value,seed,round,accuracy\n");
    for p in points {
        let mut sorted: Vec<&RunTrace> = p.traces.iter().collect();
        sorted.sort_by_key(|t| t.seed);
        for t in sorted {
            for r in &t.records {
                writeln!(out, "{param},{},{},{},{}", p.value, t.seed, r.round, sig9(r.accuracy)).unwrap();
            }
        }
    }
    out
}

pub fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(sig9(0.9632), "0.963200000");
        assert_eq!(sig9(1.0), "1.00000000");
        assert_eq!(sig9(0.0), "0");
        assert_eq!(sig9(-0.5), "-0.500000000");
        assert_eq!(sig9(1.3862943611198906), "1.38629436");
        assert_eq!(sig9(123.456), "123.456000");
        assert_eq!(sig9(0.000123), "0.000123000000");
        assert_eq!(sig9(1e-9), "1.00000000e-9");
        assert_eq!(sig9(2.5e12), "2.50000000e12");
        assert_eq!(sig9(0.99999999996), "1.00000000");
    }
}
