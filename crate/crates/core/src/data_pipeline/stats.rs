use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::manifest::{type_counts, PairRecord};

/// Equal-width histogram of resemblance scores over `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(bins: usize, values: impl IntoIterator<Item = f64>) -> Self {
        let bins = bins.max(1);
        let edges = (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        for v in values {
            let b = (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * bins as f64).floor() as usize;
            counts[b.min(bins - 1)] += 1;
        }
        Self { edges, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataStats {
    pub total: usize,
    pub per_type: BTreeMap<String, usize>,
    pub with_resemblance: usize,
    pub resemblance: Histogram,
}

pub fn manifest_stats(records: &[PairRecord], bins: usize) -> DataStats {
    let per_type = type_counts(records).into_iter().map(|(t, n)| (t.to_string(), n)).collect();
    let scores: Vec<f64> = records.iter().filter_map(|r| r.resemblance).collect();
    DataStats {
        total: records.len(),
        per_type,
        with_resemblance: scores.len(),
        resemblance: Histogram::new(bins, scores),
    }
}

impl DataStats {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>8}", "pair_type", "count");
        for (t, n) in &self.per_type {
            let _ = writeln!(s, "{t:<24} {n:>8}");
        }
        let _ = writeln!(s, "{:<24} {:>8}", "total", self.total);
        let _ = writeln!(s, "\nresemblance ({} scored)", self.with_resemblance);
        let peak = self.resemblance.counts.iter().copied().max().unwrap_or(0).max(1);
        for (i, n) in self.resemblance.counts.iter().enumerate() {
            let bar = "#".repeat(n * 40 / peak);
            let _ = writeln!(
                s,
                "[{:+.1}, {:+.1}) {n:>8} {bar}",
                self.resemblance.edges[i],
                self.resemblance.edges[i + 1]
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_bins_include_both_ends() {
        let h = Histogram::new(4, [-1.0, -0.2, 0.0, 0.99, 1.0]);
        assert_eq!(h.counts, vec![1, 1, 1, 2]);
        assert_eq!(h.edges.len(), 5);
    }

    #[test]
    fn empty_manifest_has_zero_counts() {
        let s = manifest_stats(&[], 10);
        assert_eq!(s.total, 0);
        assert_eq!(s.per_type.len(), 3);
        assert!(s.per_type.values().all(|n| *n == 0));
        assert!(s.to_table().contains("total"));
    }
}
