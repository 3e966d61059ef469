//! Cost modeling: the expected improvement factor, acceptance-rate
//! estimation, modeled cost-latency in target-forward units, and oracle
//! lookahead statistics (mean, std, histogram, normalized-index bucket
//! averages).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::RunTrace;
use crate::{Error, Result};

/// Walltime model: a draft forward costs `c` target-forward units; an
/// optional scale reports totals in milliseconds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostModel {
    /// Ratio of draft to target forward-pass walltime, in (0, 1].
    pub c: f64,
    pub target_unit_ms: Option<f64>,
}

impl CostModel {
    pub fn new(c: f64) -> Self {
        assert!(c > 0.0);
        Self { c, target_unit_ms: None }
    }
}

/// Expected token-generation speedup of speculative decoding over
/// autoregressive target decoding:
/// `(1 − α^(γ+1)) / ((1 − α)(γc + 1))`.
pub fn improvement_factor(alpha: f64, gamma: usize, c: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must be in [0,1), got {alpha}")));
    }
    if gamma < 1 {
        return Err(Error::InvalidArgument("gamma must be >= 1".into()));
    }
    if c <= 0.0 {
        return Err(Error::InvalidArgument("c must be > 0".into()));
    }
    let g = gamma as f64;
    Ok((1.0 - alpha.powi(gamma as i32 + 1)) / ((1.0 - alpha) * (g * c + 1.0)))
}

/// Empirical acceptance rate of a trace: accepted over drafted tokens.
pub fn estimate_alpha(trace: &RunTrace) -> Result<f64> {
    let drafted = trace.total_drafted();
    if drafted == 0 {
        return Err(Error::InvalidArgument("trace has no drafted tokens".into()));
    }
    Ok(trace.total_accepted() as f64 / drafted as f64)
}

/// Modeled cost of a trace in target-forward units:
/// `target_forwards + c · draft_forwards`, times the optional ms scale.
pub fn cost_latency(trace: &RunTrace, cm: &CostModel) -> f64 {
    let units = trace.total_target_forwards() as f64 + cm.c * trace.total_draft_forwards() as f64;
    units * cm.target_unit_ms.unwrap_or(1.0)
}

/// Cost per emitted token.
pub fn per_token_latency(trace: &RunTrace, cm: &CostModel) -> f64 {
    cost_latency(trace, cm) / trace.output.len() as f64
}

/// Pooled oracle lookahead statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleStats {
    pub mean_sl: f64,
    /// Population standard deviation.
    pub std_sl: f64,
    /// Lookahead value -> iteration count.
    pub histogram: BTreeMap<usize, usize>,
    /// Normalized-index bucket -> mean lookahead. Keys are bucket indices;
    /// multiply by `bucket_size` for the bucket's lower edge.
    pub bucket_means: BTreeMap<u64, f64>,
    pub bucket_size: f64,
}

/// Normalized iteration indices for a trace of `len` iterations:
/// `i/(len−1)`, with a single iteration mapping to 0.
pub fn normalized_indices(len: usize) -> Vec<f64> {
    if len <= 1 {
        return vec![0.0; len];
    }
    (0..len).map(|i| i as f64 / (len - 1) as f64).collect()
}

/// Pools per-iteration accepted counts over oracle traces: mean, population
/// std, histogram, and per-bucket mean lookahead over normalized iteration
/// indices.
pub fn oracle_stats(traces: &[RunTrace], bucket_size: f64) -> Result<OracleStats> {
    let mut values: Vec<usize> = Vec::new();
    let mut buckets: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for trace in traces {
        let idx = normalized_indices(trace.iterations.len());
        for (it, &x) in trace.iterations.iter().zip(&idx) {
            values.push(it.accepted);
            let b = (x / bucket_size).floor() as u64;
            let e = buckets.entry(b).or_insert((0.0, 0));
            e.0 += it.accepted as f64;
            e.1 += 1;
        }
    }
    if values.is_empty() {
        return Err(Error::InvalidArgument("no iterations in input traces".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<usize>() as f64 / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let mut histogram = BTreeMap::new();
    for &v in &values {
        *histogram.entry(v).or_insert(0) += 1;
    }
    let bucket_means = buckets.into_iter().map(|(b, (s, c))| (b, s / c as f64)).collect();
    Ok(OracleStats { mean_sl: mean, std_sl: var.sqrt(), histogram, bucket_means, bucket_size })
}

impl OracleStats {
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("# specdec-oracle-hist-v1\nsl,count\n");
        for (sl, count) in &self.histogram {
            s.push_str(&format!("{sl},{count}\n"));
        }
        s
    }

    pub fn bucket_means_csv(&self) -> String {
        let mut s = String::from("# specdec-oracle-buckets-v1\nbucket_start,mean_sl\n");
        for (b, mean) in &self.bucket_means {
            s.push_str(&format!("{},{mean}\n", *b as f64 * self.bucket_size));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::IterationRecord;
    use crate::dist::TokenId;

    fn trace_from_sls(sls: &[usize]) -> RunTrace {
        let iterations = sls
            .iter()
            .map(|&sl| IterationRecord {
                sl_used: sl + 1,
                accepted: sl,
                draft_forwards: sl + 1,
                target_forwards: 1,
                emitted: vec![TokenId(0); sl + 1],
            })
            .collect::<Vec<_>>();
        let output = iterations.iter().flat_map(|i| i.emitted.clone()).collect();
        RunTrace { iterations, prompt_len: 1, output }
    }

    #[test]
    fn improvement_factor_examples() {
        // alpha=0: 1/(gamma*c + 1).
        let f = improvement_factor(0.0, 2, 0.25).unwrap();
        assert!((f - 1.0 / 1.5).abs() < 1e-12);
        assert_eq!(improvement_factor(0.5, 1, 0.5).unwrap(), 1.0);
        assert!((improvement_factor(0.8, 5, 0.05).unwrap() - 2.951424).abs() < 1e-6);
        assert!(improvement_factor(1.0, 2, 0.5).is_err());
        assert!(improvement_factor(-0.1, 2, 0.5).is_err());
    }

    #[test]
    fn improvement_factor_limit_at_full_acceptance() {
        for &(gamma, c) in &[(1usize, 0.5), (5, 0.05), (8, 0.1)] {
            let f = improvement_factor(1.0 - 1e-9, gamma, c).unwrap();
            let limit = (gamma as f64 + 1.0) / (gamma as f64 * c + 1.0);
            assert!((f - limit).abs() / limit < 1e-4);
        }
    }

    #[test]
    fn improvement_factor_monotone_in_alpha() {
        for gamma in 1..=8 {
            for &c in &[0.01, 0.05, 0.1] {
                let mut prev = 0.0;
                for i in 0..100 {
                    let alpha = i as f64 / 100.0;
                    let f = improvement_factor(alpha, gamma, c).unwrap();
                    assert!(f >= prev, "IF not increasing at alpha={alpha} gamma={gamma} c={c}");
                    prev = f;
                }
            }
        }
    }

    #[test]
    fn alpha_estimation() {
        let t = trace_from_sls(&[4, 2]); // 6 accepted of 8 drafted
        assert_eq!(estimate_alpha(&t).unwrap(), 0.75);
        let empty = RunTrace { iterations: vec![], prompt_len: 1, output: vec![] };
        assert!(estimate_alpha(&empty).is_err());
    }

    #[test]
    fn cost_latency_examples() {
        // Autoregressive: N target forwards, no drafts.
        let auto = RunTrace {
            iterations: (0..10)
                .map(|_| IterationRecord {
                    sl_used: 0,
                    accepted: 0,
                    draft_forwards: 0,
                    target_forwards: 1,
                    emitted: vec![TokenId(0)],
                })
                .collect(),
            prompt_len: 1,
            output: vec![TokenId(0); 10],
        };
        let cm = CostModel::new(0.1);
        assert_eq!(cost_latency(&auto, &cm), 10.0);
        assert_eq!(per_token_latency(&auto, &cm), 1.0);

        // 27 target + 129 draft at c=0.1 -> 39.9 units.
        let spec = RunTrace {
            iterations: vec![IterationRecord {
                sl_used: 129,
                accepted: 102,
                draft_forwards: 129,
                target_forwards: 27,
                emitted: vec![TokenId(0); 103],
            }],
            prompt_len: 1,
            output: vec![TokenId(0); 103],
        };
        assert!((cost_latency(&spec, &cm) - 39.9).abs() < 1e-12);

        // Speedup example: 20 target + 100 draft for 100 tokens at c=0.05.
        let t = RunTrace {
            iterations: vec![IterationRecord {
                sl_used: 100,
                accepted: 80,
                draft_forwards: 100,
                target_forwards: 20,
                emitted: vec![TokenId(0); 100],
            }],
            prompt_len: 1,
            output: vec![TokenId(0); 100],
        };
        let cm = CostModel::new(0.05);
        let speedup = 100.0 / cost_latency(&t, &cm);
        assert_eq!(speedup, 4.0);
    }

    #[test]
    fn oracle_stats_example() {
        assert_eq!(normalized_indices(5), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(normalized_indices(1), vec![0.0]);
        let t = trace_from_sls(&[7, 3, 13, 21, 8]);
        let stats = oracle_stats(&[t], 0.0001).unwrap();
        assert!((stats.mean_sl - 10.4).abs() < 1e-12);
        assert_eq!(stats.histogram.values().sum::<usize>(), 5);
        // Constant sequence has zero spread.
        let c = oracle_stats(&[trace_from_sls(&[4, 4, 4])], 0.0001).unwrap();
        assert_eq!(c.std_sl, 0.0);
        assert!(oracle_stats(&[], 0.0001).is_err());
    }

    #[test]
    fn stats_csv_shapes() {
        let stats = oracle_stats(&[trace_from_sls(&[2, 5, 2])], 0.5).unwrap();
        let hist = stats.histogram_csv();
        assert!(hist.starts_with("# specdec-oracle-hist-v1"));
        assert_eq!(hist.lines().count(), 2 + stats.histogram.len());
        let buckets = stats.bucket_means_csv();
        assert_eq!(buckets.lines().count(), 2 + stats.bucket_means.len());
    }
}
