use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LynxError, Result};

use super::manifest::{PairRecord, PairType};

/// Relative draw weight of each pair type.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingWeights {
    pub single_scene: f64,
    pub multi_scene: f64,
    pub augmented_single_scene: f64,
}

impl Default for SamplingWeights {
    fn default() -> Self {
        Self {
            single_scene: 0.4,
            multi_scene: 0.2,
            augmented_single_scene: 0.4,
        }
    }
}

impl SamplingWeights {
    pub fn new(single_scene: f64, multi_scene: f64, augmented_single_scene: f64) -> Self {
        Self {
            single_scene,
            multi_scene,
            augmented_single_scene,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.single_scene, self.multi_scene, self.augmented_single_scene]
    }

    pub fn validate(&self) -> Result<()> {
        for (t, w) in PairType::ALL.iter().zip(self.as_array()) {
            if !w.is_finite() || w < 0.0 {
                return Err(LynxError::config(format!("weights.{t}"), format!("{w} must be finite and nonnegative")));
            }
        }
        if self.as_array().iter().all(|w| *w == 0.0) {
            return Err(LynxError::config("weights", "at least one weight must be positive"));
        }
        Ok(())
    }

    pub fn normalized(&self) -> [f64; 3] {
        let a = self.as_array();
        let s: f64 = a.iter().sum();
        a.map(|w| w / s)
    }
}

/// Infinite seeded stream: pick a pair type by weight, then a record of that
/// type uniformly.
#[derive(Clone, Debug)]
pub struct WeightedSampler<'a> {
    records: &'a [PairRecord],
    by_type: [Vec<usize>; 3],
    types: Vec<PairType>,
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl<'a> WeightedSampler<'a> {
    pub fn new(records: &'a [PairRecord], weights: SamplingWeights, seed: u64) -> Result<Self> {
        weights.validate()?;
        let mut by_type: [Vec<usize>; 3] = Default::default();
        for (i, r) in records.iter().enumerate() {
            by_type[r.pair_type.index()].push(i);
        }
        let mut types = Vec::new();
        let mut ws = Vec::new();
        for (t, w) in PairType::ALL.into_iter().zip(weights.as_array()) {
            if w > 0.0 {
                if by_type[t.index()].is_empty() {
                    return Err(LynxError::invalid(format!("weight {w} on pair type {t} with no records")));
                }
                types.push(t);
                ws.push(w);
            }
        }
        let dist = WeightedIndex::new(&ws).map_err(|e| LynxError::invalid(e.to_string()))?;
        Ok(Self {
            records,
            by_type,
            types,
            dist,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn draw(&mut self) -> &'a PairRecord {
        &self.records[self.draw_index()]
    }

    /// Position of the next draw in the record slice.
    pub fn draw_index(&mut self) -> usize {
        let t = self.types[self.dist.sample(&mut self.rng)];
        let pool = &self.by_type[t.index()];
        pool[self.rng.random_range(0..pool.len())]
    }
}

impl<'a> Iterator for WeightedSampler<'a> {
    type Item = &'a PairRecord;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.draw())
    }
}

pub fn weighted_sampler(records: &[PairRecord], weights: SamplingWeights, seed: u64) -> Result<WeightedSampler<'_>> {
    WeightedSampler::new(records, weights, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn records() -> Vec<PairRecord> {
        let mut v = Vec::new();
        for (i, t) in PairType::ALL.into_iter().enumerate() {
            for k in 0..3 + i {
                v.push(PairRecord::new(t, PathBuf::from(format!("{t}{k}")), PathBuf::new(), ""));
            }
        }
        v
    }

    #[test]
    fn single_type_weight() {
        let recs = records();
        let s = weighted_sampler(&recs, SamplingWeights::new(1.0, 0.0, 0.0), 1).unwrap();
        assert!(s.take(500).all(|r| r.pair_type == PairType::SingleScene));
    }

    #[test]
    fn frequencies_within_two_percent() {
        let recs = records();
        let mut counts = [0usize; 3];
        for r in weighted_sampler(&recs, SamplingWeights::new(1.0, 1.0, 0.0), 7).unwrap().take(100_000) {
            counts[r.pair_type.index()] += 1;
        }
        for c in &counts[..2] {
            assert!((*c as f64 / 1e5 - 0.5).abs() <= 0.02);
        }
        assert_eq!(counts[2], 0);
    }

    #[test]
    fn deterministic_under_seed() {
        let recs = records();
        let a: Vec<_> = weighted_sampler(&recs, SamplingWeights::default(), 3).unwrap().take(1000).collect();
        let b: Vec<_> = weighted_sampler(&recs, SamplingWeights::default(), 3).unwrap().take(1000).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_weights() {
        let recs: Vec<_> = records().into_iter().filter(|r| r.pair_type != PairType::MultiScene).collect();
        assert!(weighted_sampler(&recs, SamplingWeights::default(), 0).is_err());
        assert!(weighted_sampler(&recs, SamplingWeights::new(0.0, 0.0, 0.0), 0).is_err());
        assert!(weighted_sampler(&recs, SamplingWeights::new(-1.0, 0.0, 1.0), 0).is_err());
        assert!(weighted_sampler(&recs, SamplingWeights::new(1.0, 0.0, 1.0), 0).is_ok());
    }
}
