//! Synthetic non-IID multi-modal vehicular datasets.
//!
//! Each vehicle belongs to a planted distribution cluster. A sample of sector
//! `s` drawn by a vehicle in cluster `c` is
//!
//! ```text
//! x = m_s + d_{c,s} + noise_sigma * e,    e ~ N(0, I)
//! ```
//!
//! where the sector prototype `m_s ~ N(0, sector_spread² I)` is shared by all
//! clusters and the cluster offset `d_{c,s} ~ N(0, cluster_separation² I)` is
//! specific to the cluster. Per-vehicle label proportions are drawn from a
//! symmetric Dirichlet and turned into exact counts by largest remainder.
//! Features are laid out as `gps (2) | lidar proxy | image proxy`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Samples, Tensor, GPS_WIDTH};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    LosPassing,
    NlosPedestrian,
    NlosStaticCar,
    NlosMovingCar,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::LosPassing,
        Category::NlosPedestrian,
        Category::NlosStaticCar,
        Category::NlosMovingCar,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::LosPassing => "los_passing",
            Category::NlosPedestrian => "nlos_pedestrian",
            Category::NlosStaticCar => "nlos_static_car",
            Category::NlosMovingCar => "nlos_moving_car",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Disjoint index sets covering every sample of a vehicle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Shuffled 80 / 10 / 10 split (sizes rounded, test takes the rest).
    pub fn random(n: usize, rng: &mut rng::Rng) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let n_train = libm::round(0.8 * n as f64) as usize;
        let n_val = (libm::round(0.1 * n as f64) as usize).min(n - n_train);
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Self { train: idx, val, test }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n || seen[i] {
                return Err(Error::config(format!("split index {i} repeated or out of range")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::config("splits do not cover every sample"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleDataset {
    pub vehicle_id: usize,
    pub category: Category,
    pub planted_cluster: usize,
    /// Seed of the generator run that produced the data.
    pub seed: u64,
    pub samples: Samples,
    pub splits: Splits,
}

impl VehicleDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn train(&self) -> Result<Samples> {
        self.samples.subset(&self.splits.train)
    }

    pub fn val(&self) -> Result<Samples> {
        self.samples.subset(&self.splits.val)
    }

    pub fn test(&self) -> Result<Samples> {
        self.samples.subset(&self.splits.test)
    }

    pub fn label_histogram(&self, n_sectors: usize) -> Vec<usize> {
        let mut h = vec![0; n_sectors];
        for &l in &self.samples.labels {
            h[l] += 1;
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_vehicles: usize,
    pub n_sectors: usize,
    pub samples_per_vehicle: usize,
    pub dirichlet_alpha: f64,
    pub n_planted_clusters: usize,
    pub noise_sigma: f64,
    /// Per-coordinate standard deviation of the cluster offsets.
    pub cluster_separation: f64,
    /// Per-coordinate standard deviation of the shared sector prototypes.
    pub sector_spread: f64,
    pub lidar_width: usize,
    pub image_width: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_vehicles: 10,
            n_sectors: 34,
            samples_per_vehicle: 400,
            dirichlet_alpha: 1.0,
            n_planted_clusters: 4,
            noise_sigma: 1.0,
            cluster_separation: 4.0,
            sector_spread: 1.0,
            lidar_width: 16,
            image_width: 16,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn feature_dim(&self) -> usize {
        GPS_WIDTH + self.lidar_width + self.image_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_vehicles == 0 || self.n_sectors == 0 || self.samples_per_vehicle == 0 {
            return Err(Error::config(
                "n_vehicles, n_sectors and samples_per_vehicle must be positive",
            ));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::config("dirichlet_alpha must be positive"));
        }
        if self.n_planted_clusters == 0 || self.n_planted_clusters > self.n_vehicles {
            return Err(Error::config("n_planted_clusters must be in [1, n_vehicles]"));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("cluster_separation", self.cluster_separation),
            ("sector_spread", self.sector_spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be non-negative")));
            }
        }
        if i32::try_from(self.n_sectors).is_err() {
            return Err(Error::config("n_sectors too large"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub datasets: Vec<VehicleDataset>,
    /// Planted cluster of each vehicle, indexed by vehicle id.
    pub planted: Vec<usize>,
}

fn gaussian(rng: &mut rng::Rng, scale: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    scale * z
}

/// Exact label counts proportional to `p` (largest remainder, lowest index
/// first on ties).
fn allocate(p: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = p.iter().map(|&q| q * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|&r| libm::floor(r) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (raw[a] - libm::floor(raw[a]), raw[b] - libm::floor(raw[b]));
        fb.partial_cmp(&fa)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn dirichlet(rng: &mut rng::Rng, alpha: f64, k: usize) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::config(format!("gamma: {e}")))?;
    let mut g: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = g.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        g.iter_mut().for_each(|v| *v /= sum);
    } else {
        // Every draw underflowed (very small alpha): all mass on one sector.
        let hot = rng.random_range(0..k);
        g.iter_mut().enumerate().for_each(|(i, v)| *v = (i == hot) as u8 as f64);
    }
    Ok(g)
}

/// Generate one dataset per vehicle; deterministic in `cfg.seed`.
pub fn generate(cfg: &GenConfig) -> Result<Generated> {
    cfg.validate()?;
    let d = cfg.feature_dim();
    let k = cfg.n_sectors;
    let mut proto_rng = rng::stream(cfg.seed, 0, usize::MAX, Purpose::Data);
    let prototypes: Vec<f64> = (0..k * d)
        .map(|_| gaussian(&mut proto_rng, cfg.sector_spread))
        .collect();
    let offsets: Vec<f64> = (0..cfg.n_planted_clusters * k * d)
        .map(|_| gaussian(&mut proto_rng, cfg.cluster_separation))
        .collect();
    let mean = |c: usize, s: usize, j: usize| prototypes[s * d + j] + offsets[(c * k + s) * d + j];

    let mut datasets = Vec::with_capacity(cfg.n_vehicles);
    let mut planted = Vec::with_capacity(cfg.n_vehicles);
    for v in 0..cfg.n_vehicles {
        let cluster = v % cfg.n_planted_clusters;
        let mut r = rng::stream(cfg.seed, 0, v, Purpose::Data);
        let p = dirichlet(&mut r, cfg.dirichlet_alpha, k)?;
        let counts = allocate(&p, cfg.samples_per_vehicle);
        let mut labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(s, &c)| core::iter::repeat_n(s, c))
            .collect();
        labels.shuffle(&mut r);
        let mut values = Vec::with_capacity(labels.len() * d);
        for &s in &labels {
            for j in 0..d {
                values.push(mean(cluster, s, j) + gaussian(&mut r, cfg.noise_sigma));
            }
        }
        let features = Tensor::matrix(labels.len(), d, values)?;
        let mut split_rng = rng::stream(cfg.seed, 0, v, Purpose::Split);
        let splits = Splits::random(labels.len(), &mut split_rng);
        datasets.push(VehicleDataset {
            vehicle_id: v,
            category: Category::ALL[cluster % Category::ALL.len()],
            planted_cluster: cluster,
            seed: cfg.seed,
            samples: Samples::new(features, labels)?,
            splits,
        });
        planted.push(cluster);
    }
    Ok(Generated { datasets, planted })
}

/// Samples pooled across vehicles, remembering who owns each row.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSet {
    pub samples: Samples,
    /// Vehicle id of each row.
    pub owners: Vec<usize>,
    pub categories: Vec<Category>,
}

impl PooledSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Row indices owned by `vehicle`.
    pub fn rows_of(&self, vehicle: usize) -> Vec<usize> {
        self.owners
            .iter()
            .enumerate()
            .filter(|(_, &o)| o == vehicle)
            .map(|(i, _)| i)
            .collect()
    }
}

fn pool(datasets: &[VehicleDataset], pick: impl Fn(&Splits) -> &Vec<usize>) -> Result<PooledSet> {
    if datasets.is_empty() {
        return Err(Error::Empty("dataset list"));
    }
    let mut parts = Vec::with_capacity(datasets.len());
    let mut owners = Vec::new();
    let mut categories = Vec::new();
    for ds in datasets {
        let idx = pick(&ds.splits);
        if idx.is_empty() {
            continue;
        }
        parts.push(ds.samples.subset(idx)?);
        owners.extend(core::iter::repeat_n(ds.vehicle_id, idx.len()));
        categories.extend(core::iter::repeat_n(ds.category, idx.len()));
    }
    if parts.is_empty() {
        return Err(Error::Empty("pooled split"));
    }
    let refs: Vec<&Samples> = parts.iter().collect();
    Ok(PooledSet {
        samples: Samples::concat(&refs)?,
        owners,
        categories,
    })
}

/// Concatenation of every vehicle's test split.
pub fn global_test_set(datasets: &[VehicleDataset]) -> Result<PooledSet> {
    pool(datasets, |s| &s.test)
}

/// Concatenation of every vehicle's validation split (the server-side probe
/// set used for sensitivity analysis).
pub fn global_validation_set(datasets: &[VehicleDataset]) -> Result<PooledSet> {
    pool(datasets, |s| &s.val)
}

/// Concatenation of every vehicle's training split.
pub fn pooled_training_set(datasets: &[VehicleDataset]) -> Result<PooledSet> {
    pool(datasets, |s| &s.train)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            n_vehicles: 4,
            samples_per_vehicle: 200,
            n_planted_clusters: 2,
            seed: 11,
            ..GenConfig::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let mut other = small();
        other.seed = 12;
        assert_ne!(generate(&small()).unwrap().datasets, generate(&other).unwrap().datasets);
    }

    #[test]
    fn splits_are_a_disjoint_cover_with_target_proportions() {
        let g = generate(&small()).unwrap();
        for ds in &g.datasets {
            ds.splits.validate(ds.len()).unwrap();
            assert_eq!(ds.splits.train.len(), 160);
            assert_eq!(ds.splits.val.len(), 20);
            assert_eq!(ds.splits.test.len(), 20);
        }
    }

    #[test]
    fn labels_and_widths_follow_config() {
        let cfg = small();
        let g = generate(&cfg).unwrap();
        for ds in &g.datasets {
            assert_eq!(ds.samples.features.cols(), 2 + 16 + 16);
            assert!(ds.samples.labels.iter().all(|&l| l < cfg.n_sectors));
            assert_eq!(ds.planted_cluster, ds.vehicle_id % 2);
        }
        assert_eq!(g.planted, vec![0, 1, 0, 1]);
    }

    #[test]
    fn huge_alpha_gives_near_uniform_histograms() {
        let cfg = GenConfig {
            n_vehicles: 3,
            samples_per_vehicle: 2000,
            dirichlet_alpha: 1e6,
            n_planted_clusters: 1,
            ..GenConfig::default()
        };
        let expected = 2000.0 / 34.0;
        for ds in generate(&cfg).unwrap().datasets {
            let h = ds.label_histogram(34);
            // Chi-square statistic against uniform; 34 sectors -> 33 dof,
            // the 0.999 quantile is ~63.9.
            let chi2: f64 = h.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
            assert!(chi2 < 63.9, "chi2 {chi2}");
            for &c in &h {
                assert!((c as f64 - expected).abs() / expected < 0.05, "{h:?}");
            }
        }
    }

    #[test]
    fn tiny_alpha_is_skewed() {
        let cfg = GenConfig {
            n_vehicles: 2,
            samples_per_vehicle: 1000,
            dirichlet_alpha: 0.05,
            n_planted_clusters: 1,
            ..GenConfig::default()
        };
        for ds in generate(&cfg).unwrap().datasets {
            let h = ds.label_histogram(34);
            assert!(*h.iter().max().unwrap() > 200, "{h:?}");
        }
    }

    #[test]
    fn allocation_is_exact() {
        assert_eq!(allocate(&[0.5, 0.25, 0.25], 7), vec![3, 2, 2]);
        assert_eq!(allocate(&[1.0 / 3.0; 3], 10).iter().sum::<usize>(), 10);
    }

    #[test]
    fn global_test_is_concatenation_of_test_splits() {
        let cfg = GenConfig {
            n_vehicles: 10,
            samples_per_vehicle: 1000,
            ..GenConfig::default()
        };
        let g = generate(&cfg).unwrap();
        let t = global_test_set(&g.datasets).unwrap();
        assert_eq!(t.len(), 1000);
        let total: usize = g.datasets.iter().map(|d| d.len()).sum();
        let frac = t.len() as f64 / total as f64;
        assert!((frac - 0.1).abs() < 0.01);
        // Row-for-row identical to each vehicle's test split, in order.
        let mut row = 0;
        for ds in &g.datasets {
            for &i in &ds.splits.test {
                assert_eq!(t.samples.features.row(row), ds.samples.features.row(i));
                assert_eq!(t.owners[row], ds.vehicle_id);
                assert!(!ds.splits.train.contains(&i));
                row += 1;
            }
        }
        assert!(global_test_set(&[]).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = small();
        c.n_planted_clusters = 9;
        assert!(generate(&c).is_err());
        let mut c = small();
        c.dirichlet_alpha = 0.0;
        assert!(generate(&c).is_err());
    }
}
