//! Synthetic CVRP instance sampling.
//!
//! Coordinates are uniform on the unit square and demands uniform integers.
//! Capacity is either fixed or derived from a sampled expected route size
//! `r ~ T(low, mode, high)` as `ceil(r * mean_demand)`.

use std::ops::RangeInclusive;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vrp::Instance;

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("triangular parameters must satisfy low <= mode <= high, got ({0}, {1}, {2})")]
    TriangularOrder(f64, f64, f64),
    #[error("invalid generator config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CapacityMode {
    Fixed { value: u32 },
    TriangularRoute { low: f64, mode: f64, high: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Smallest number of customers (inclusive).
    pub size_min: usize,
    /// Largest number of customers (inclusive).
    pub size_max: usize,
    pub demand_min: u32,
    pub demand_max: u32,
    pub capacity: CapacityMode,
    pub seed: u64,
}

impl Default for GenConfig {
    /// Desk-scale training distribution: 10 to 20 customers, demands in
    /// 1..=9, expected route size drawn from T(3, 4, 8).
    fn default() -> Self {
        Self {
            size_min: 10,
            size_max: 20,
            demand_min: 1,
            demand_max: 9,
            capacity: CapacityMode::TriangularRoute { low: 3.0, mode: 4.0, high: 8.0 },
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn fixed(size: usize, capacity: u32) -> Self {
        Self {
            size_min: size,
            size_max: size,
            demand_min: 1,
            demand_max: 9,
            capacity: CapacityMode::Fixed { value: capacity },
            seed: 0,
        }
    }

    /// Standard capacities for the usual fixed-size benchmarks.
    pub fn standard_capacity(size: usize) -> u32 {
        match size {
            0..=10 => 20,
            11..=20 => 30,
            21..=50 => 40,
            51..=100 => 50,
            101..=200 => 80,
            201..=500 => 100,
            _ => 250,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.size_min < 1 || self.size_min > self.size_max {
            return Err(GenError::Config(format!(
                "size range {}..={} must be non-empty and start at 1 or more",
                self.size_min, self.size_max
            )));
        }
        if self.demand_min < 1 || self.demand_min > self.demand_max {
            return Err(GenError::Config(format!(
                "demand range {}..={} must be non-empty and positive",
                self.demand_min, self.demand_max
            )));
        }
        match self.capacity {
            CapacityMode::Fixed { value } if value < self.demand_max => Err(GenError::Config(
                format!("fixed capacity {value} is below the largest demand {}", self.demand_max),
            )),
            CapacityMode::TriangularRoute { low, mode, high } => {
                if !(low <= mode && mode <= high) || low <= 0.0 {
                    Err(GenError::TriangularOrder(low, mode, high))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn demand_range(&self) -> RangeInclusive<u32> {
        self.demand_min..=self.demand_max
    }
}

/// Inverse CDF of the triangular distribution `T(low, mode, high)`.
pub fn triangular_inverse_cdf(u: f64, low: f64, mode: f64, high: f64) -> Result<f64, GenError> {
    if !(low <= mode && mode <= high) {
        return Err(GenError::TriangularOrder(low, mode, high));
    }
    let span = high - low;
    if span == 0.0 {
        return Ok(low);
    }
    let split = (mode - low) / span;
    let x = if u < split {
        low + (u * span * (mode - low)).sqrt()
    } else {
        high - ((1.0 - u) * span * (high - mode)).sqrt()
    };
    Ok(x.clamp(low, high))
}

pub fn sample_triangular<R: Rng + ?Sized>(
    low: f64,
    mode: f64,
    high: f64,
    rng: &mut R,
) -> Result<f64, GenError> {
    triangular_inverse_cdf(rng.gen::<f64>(), low, mode, high)
}

/// Independent stream for instance `index` of a seeded set, so instance `i`
/// does not depend on how many instances were generated before it.
pub fn instance_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn sample_instance<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> Result<Instance, GenError> {
    cfg.validate()?;
    let n = rng.gen_range(cfg.size_min..=cfg.size_max);
    let depot = (rng.gen::<f64>(), rng.gen::<f64>());
    let customers: Vec<_> = (0..n).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
    let demands: Vec<u32> = (0..n).map(|_| rng.gen_range(cfg.demand_range())).collect();
    let capacity = match cfg.capacity {
        CapacityMode::Fixed { value } => value,
        CapacityMode::TriangularRoute { low, mode, high } => {
            let r = sample_triangular(low, mode, high, rng)?;
            let mean = demands.iter().map(|&d| f64::from(d)).sum::<f64>() / n as f64;
            let max_demand = demands.iter().copied().max().unwrap_or(1);
            ((r * mean).ceil() as u32).max(max_demand)
        }
    };
    Instance::new(depot, customers, demands, capacity).map_err(|e| GenError::Config(e.to_string()))
}

/// Instances `start..start + count` of the stream keyed by `cfg.seed`.
pub fn generate_set(cfg: &GenConfig, start: u64, count: usize) -> Result<Vec<Instance>, GenError> {
    (0..count as u64)
        .map(|i| sample_instance(cfg, &mut instance_rng(cfg.seed, start + i)))
        .collect()
}

/// Number of customers added for extension rate `delta`: `ceil(delta * n)`.
pub fn extension_count(n: usize, delta: f64) -> usize {
    // The small offset keeps products like 0.1 * 30 = 3.0000000000000004 at 3.
    (delta * n as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Appends `ceil(delta * n)` extra customers drawn from the generating
/// distribution. Returns the extended instance and the node indices of the
/// original customers.
pub fn extend_instance<R: Rng + ?Sized>(
    instance: &Instance,
    delta: f64,
    demand_range: RangeInclusive<u32>,
    rng: &mut R,
) -> Result<(Instance, Vec<usize>), GenError> {
    if !(delta >= 0.0) {
        return Err(GenError::Config(format!("extension rate {delta} must be >= 0")));
    }
    let n = instance.num_customers();
    let extra = extension_count(n, delta);
    let hi = (*demand_range.end()).min(instance.capacity);
    let lo = (*demand_range.start()).clamp(1, hi);
    let mut out = instance.clone();
    for _ in 0..extra {
        out.customers.push((rng.gen::<f64>(), rng.gen::<f64>()));
    }
    for _ in 0..extra {
        out.demands.push(rng.gen_range(lo..=hi));
    }
    Ok((out, (1..=n).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_regime() {
        let cfg = GenConfig::fixed(100, 50).with_seed(5);
        let inst = sample_instance(&cfg, &mut instance_rng(5, 0)).unwrap();
        assert_eq!(inst.num_customers(), 100);
        assert_eq!(inst.capacity, 50);
        assert!(inst.demands.iter().all(|d| (1..=9).contains(d)));
    }

    #[test]
    fn constant_demand_capacity_formula() {
        let cfg = GenConfig {
            size_min: 12,
            size_max: 12,
            demand_min: 4,
            demand_max: 4,
            capacity: CapacityMode::TriangularRoute { low: 3.0, mode: 6.0, high: 25.0 },
            seed: 1,
        };
        for i in 0..50 {
            // Replay the draws to recover r.
            let mut rng = instance_rng(1, i);
            let inst = sample_instance(&cfg, &mut rng).unwrap();
            let mut replay = instance_rng(1, i);
            let _n: usize = replay.gen_range(12..=12);
            for _ in 0..(2 + 2 * 12) {
                replay.gen::<f64>();
            }
            for _ in 0..12 {
                let _: u32 = replay.gen_range(4..=4);
            }
            let r = sample_triangular(3.0, 6.0, 25.0, &mut replay).unwrap();
            assert_eq!(inst.capacity, (r * 4.0).ceil() as u32);
            assert!(inst.capacity >= 12);
        }
    }

    #[test]
    fn determinism() {
        let cfg = GenConfig::fixed(20, 30).with_seed(42);
        let a = generate_set(&cfg, 0, 5).unwrap();
        let b = generate_set(&cfg, 0, 5).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let tail = generate_set(&cfg, 3, 2).unwrap();
        assert_eq!(tail, a[3..].to_vec());
    }

    #[test]
    fn triangular_cases() {
        assert_eq!(triangular_inverse_cdf(0.3, 5.0, 5.0, 5.0).unwrap(), 5.0);
        assert_eq!(triangular_inverse_cdf(0.0, 3.0, 6.0, 25.0).unwrap(), 3.0);
        assert_eq!(triangular_inverse_cdf(1.0, 3.0, 6.0, 25.0).unwrap(), 25.0);
        assert_eq!(
            triangular_inverse_cdf(0.5, 3.0, 2.0, 25.0),
            Err(GenError::TriangularOrder(3.0, 2.0, 25.0))
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_triangular(4.0, 1.0, 2.0, &mut rng).is_err());
    }

    #[test]
    fn triangular_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| sample_triangular(3.0, 6.0, 25.0, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 34.0 / 3.0).abs() < 0.1, "{mean}");
    }

    #[test]
    fn extension_sizes() {
        let cfg = GenConfig::fixed(100, 50);
        let base = sample_instance(&cfg, &mut instance_rng(0, 0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (same, idx) = extend_instance(&base, 0.0, 1..=9, &mut rng).unwrap();
        assert_eq!(same, base);
        assert_eq!(idx, (1..=100).collect::<Vec<_>>());
        let (ext, _) = extend_instance(&base, 0.5, 1..=9, &mut rng).unwrap();
        assert_eq!(ext.num_customers(), 150);
        assert_eq!(&ext.customers[..100], &base.customers[..]);
        let small = Instance::new((0.0, 0.0), vec![(0.1, 0.1); 3], vec![1; 3], 5).unwrap();
        let (ext, idx) = extend_instance(&small, 0.4, 1..=9, &mut rng).unwrap();
        assert_eq!(ext.num_customers(), 5);
        assert_eq!(idx, vec![1, 2, 3]);
        assert!(ext.demands.iter().all(|&d| d <= 5));
        assert_eq!(extension_count(30, 0.1), 3);
        assert!(extend_instance(&small, -1.0, 1..=9, &mut rng).is_err());
    }

    #[test]
    fn bad_configs() {
        let mut cfg = GenConfig::fixed(10, 5);
        assert!(cfg.validate().is_err());
        cfg.capacity = CapacityMode::TriangularRoute { low: 6.0, mode: 3.0, high: 25.0 };
        assert!(matches!(cfg.validate(), Err(GenError::TriangularOrder(..))));
        cfg.size_min = 0;
        assert!(cfg.validate().is_err());
    }
}
