//! Leakage-free geographic splitting.
//!
//! The protocol: bucket samples into cells by floored coordinates; cells
//! below the observation threshold go to train; remaining cells are
//! stratified into low/medium/high density by the 0.33 / 0.66 nearest-rank
//! quantiles of per-cell counts; a fraction of cells per stratum is held
//! out; held-out cells are divided into a validation pool and a test pool;
//! finally the requested number of samples is drawn from each pool matching
//! the audio-source distribution of the train split (largest-remainder
//! apportionment). Undrawn samples from held-out cells are excluded from
//! all three splits so no cell ever spans two splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{AudioSource, GeoSample};
use crate::error::{CoreError, Result};
use crate::rng::stream;

/// Grid cell a coordinate falls into at a given cell size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub cell_lat: i32,
    pub cell_lon: i32,
}

/// Floor-based cell bucketing. Longitude 180 wraps to -180 before flooring.
pub fn cell_key(lat: f64, lon: f64, cell_size_deg: f64) -> Result<CellKey> {
    if !(-90.0..=90.0).contains(&lat) {
        return Err(CoreError::InputDomain(format!("lat {lat} outside [-90, 90]")));
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(CoreError::InputDomain(format!("lon {lon} outside [-180, 180]")));
    }
    if !(cell_size_deg > 0.0) {
        return Err(CoreError::InputDomain(format!("cell size {cell_size_deg} must be > 0")));
    }
    let lon = if lon == 180.0 { -180.0 } else { lon };
    Ok(CellKey {
        cell_lat: (lat / cell_size_deg).floor() as i32,
        cell_lon: (lon / cell_size_deg).floor() as i32,
    })
}

/// Density stratum of an eligible cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Density {
    Low,
    Medium,
    High,
}

/// Final fate of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    Train,
    Val,
    Test,
    /// Sample lives in a held-out cell but was not drawn into val/test.
    /// Keeping it out of train preserves zero cell leakage.
    Excluded,
}

/// Per-cell bookkeeping emitted alongside the assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell: CellKey,
    pub count: usize,
    /// `None` for cells below the observation threshold (train-only).
    pub density: Option<Density>,
    pub held_out: bool,
}

/// Split protocol parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub cell_size_deg: f64,
    pub min_cell_count: usize,
    /// Fraction of eligible cells held out, per density stratum.
    pub holdout_fraction: f64,
    /// Fraction of held-out cells assigned to the validation pool.
    pub val_cell_fraction: f64,
    pub val_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            cell_size_deg: 1.0,
            min_cell_count: 25,
            holdout_fraction: 0.10,
            val_cell_fraction: 0.40,
            val_count: 0,
            test_count: 0,
            seed: 0,
        }
    }
}

impl SplitConfig {
    fn validate(&self) -> Result<()> {
        if !(self.cell_size_deg > 0.0) {
            return Err(CoreError::Config("cell_size_deg must be > 0".into()));
        }
        if self.min_cell_count == 0 {
            return Err(CoreError::Config("min_cell_count must be positive".into()));
        }
        for (name, v) in [("holdout_fraction", self.holdout_fraction), ("val_cell_fraction", self.val_cell_fraction)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(CoreError::Config(format!("{name} {v} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Output of [`assign_splits`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub by_id: BTreeMap<String, Assignment>,
    pub cells: Vec<CellRecord>,
}

impl SplitAssignment {
    pub fn ids_in(&self, which: Assignment) -> Vec<&str> {
        self.by_id
            .iter()
            .filter(|(_, &a)| a == which)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// Nearest-rank quantile of a sorted multiset.
fn nearest_rank(sorted: &[usize], q: f64) -> usize {
    assert!(!sorted.is_empty());
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.max(1) - 1]
}

/// Largest-remainder apportionment of `total` over weights `counts`.
pub(crate) fn largest_remainder(counts: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = counts.iter().sum();
    if sum == 0 || total == 0 {
        return vec![0; counts.len()];
    }
    let quotas: Vec<f64> = counts.iter().map(|&c| total as f64 * c as f64 / sum as f64).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    // Descending fractional remainder; index ascending breaks ties.
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        out[i] += 1;
    }
    out
}

/// Run the split protocol. Deterministic for a fixed `(samples, config)`.
pub fn assign_splits(samples: &[GeoSample], config: &SplitConfig) -> Result<SplitAssignment> {
    config.validate()?;
    if samples.is_empty() {
        return Err(CoreError::Config("assign_splits requires a non-empty sample list".into()));
    }
    for s in samples {
        s.validate()?;
    }

    // Step 1: bucket by cell.
    let mut buckets: BTreeMap<CellKey, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let key = cell_key(s.lat, s.lon, config.cell_size_deg)?;
        buckets.entry(key).or_default().push(i);
    }

    // Step 2: threshold.
    let mut eligible: Vec<(CellKey, usize)> = Vec::new();
    let mut assignment: BTreeMap<String, Assignment> = BTreeMap::new();
    let mut cells: Vec<CellRecord> = Vec::new();
    for (&key, members) in &buckets {
        if members.len() < config.min_cell_count {
            for &i in members {
                assignment.insert(samples[i].id.clone(), Assignment::Train);
            }
            cells.push(CellRecord { cell: key, count: members.len(), density: None, held_out: false });
        } else {
            eligible.push((key, members.len()));
        }
    }

    // Step 3: density strata from nearest-rank quantiles; ties go low.
    let mut held_out_cells: Vec<CellKey> = Vec::new();
    if !eligible.is_empty() {
        let mut counts: Vec<usize> = eligible.iter().map(|&(_, c)| c).collect();
        counts.sort_unstable();
        let q33 = nearest_rank(&counts, 0.33);
        let q66 = nearest_rank(&counts, 0.66);
        let classify = |c: usize| {
            if c <= q33 {
                Density::Low
            } else if c <= q66 {
                Density::Medium
            } else {
                Density::High
            }
        };

        // Step 4: hold out a fraction of cells per stratum.
        for density in [Density::Low, Density::Medium, Density::High] {
            let mut members: Vec<CellKey> = eligible
                .iter()
                .filter(|&&(_, c)| classify(c) == density)
                .map(|&(k, _)| k)
                .collect();
            let k = (config.holdout_fraction * members.len() as f64).floor() as usize;
            let label = match density {
                Density::Low => "split/holdout/low",
                Density::Medium => "split/holdout/medium",
                Density::High => "split/holdout/high",
            };
            members.shuffle(&mut stream(config.seed, label));
            held_out_cells.extend(members.iter().take(k));
        }
        let held: std::collections::BTreeSet<CellKey> = held_out_cells.iter().copied().collect();
        for &(key, count) in &eligible {
            cells.push(CellRecord {
                cell: key,
                count,
                density: Some(classify(count)),
                held_out: held.contains(&key),
            });
            if !held.contains(&key) {
                for &i in &buckets[&key] {
                    assignment.insert(samples[i].id.clone(), Assignment::Train);
                }
            }
        }
    }
    cells.sort_by_key(|r| r.cell);

    // Step 5: divide held-out cells into val / test pools.
    held_out_cells.sort_unstable();
    held_out_cells.shuffle(&mut stream(config.seed, "split/pool"));
    let n_val_cells = (config.val_cell_fraction * held_out_cells.len() as f64).round() as usize;
    let (val_cells, test_cells) = held_out_cells.split_at(n_val_cells.min(held_out_cells.len()));

    // Step 6: draw samples from each pool matching the train source mix.
    let id_to_index: BTreeMap<&str, usize> =
        samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut train_hist = [0usize; 4];
    for (id, a) in &assignment {
        if *a == Assignment::Train {
            train_hist[samples[id_to_index[id.as_str()]].audio_source.index()] += 1;
        }
    }

    let draw_pool = |pool_cells: &[CellKey],
                         want: usize,
                         pool_name: &str,
                         target: Assignment,
                         assignment: &mut BTreeMap<String, Assignment>|
     -> Result<()> {
        let mut pool: Vec<usize> = Vec::new();
        for key in pool_cells {
            pool.extend(buckets[key].iter().copied());
        }
        if want > 0 && train_hist.iter().sum::<usize>() == 0 {
            return Err(CoreError::Config(format!(
                "cannot match source distribution for {pool_name}: train split is empty"
            )));
        }
        let targets = largest_remainder(&train_hist, want);
        for (si, &need) in targets.iter().enumerate() {
            let mut candidates: Vec<usize> = pool
                .iter()
                .copied()
                .filter(|&i| samples[i].audio_source.index() == si)
                .collect();
            if candidates.len() < need {
                return Err(CoreError::Config(format!(
                    "{pool_name} pool has {} samples of source {:?} but {need} are required",
                    candidates.len(),
                    AudioSource::ALL[si]
                )));
            }
            candidates.shuffle(&mut stream(config.seed, &format!("split/draw/{pool_name}/{si}")));
            for &i in candidates.iter().take(need) {
                assignment.insert(samples[i].id.clone(), target);
            }
        }
        // Whatever was not drawn stays out of every split.
        for &i in &pool {
            assignment.entry(samples[i].id.clone()).or_insert(Assignment::Excluded);
        }
        Ok(())
    };

    draw_pool(val_cells, config.val_count, "val", Assignment::Val, &mut assignment)?;
    draw_pool(test_cells, config.test_count, "test", Assignment::Test, &mut assignment)?;

    debug_assert_eq!(assignment.len(), samples.len(), "every sample assigned exactly once");
    Ok(SplitAssignment { by_id: assignment, cells })
}

/// Audit report for a split: leakage, threshold placement, source histograms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAudit {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_excluded: usize,
    /// Cells observed in more than one of {train, val, test}, found by a
    /// brute-force scan over all sample pairs.
    pub leaked_cells: usize,
    pub sub_threshold_cells_all_train: bool,
    pub train_source_hist: [usize; 4],
    pub val_source_hist: [usize; 4],
    pub test_source_hist: [usize; 4],
    pub val_target_hist: [usize; 4],
    pub test_target_hist: [usize; 4],
}

/// Brute-force verification of the split invariants.
pub fn audit_assignment(
    samples: &[GeoSample],
    assignment: &SplitAssignment,
    config: &SplitConfig,
) -> Result<SplitAudit> {
    let mut n = [0usize; 4];
    let mut hist = [[0usize; 4]; 3];
    let mut keys = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        let a = *assignment
            .by_id
            .get(&s.id)
            .ok_or_else(|| CoreError::Config(format!("sample {} missing from assignment", s.id)))?;
        let li = match a {
            Assignment::Train => 0,
            Assignment::Val => 1,
            Assignment::Test => 2,
            Assignment::Excluded => 3,
        };
        n[li] += 1;
        if li < 3 {
            hist[li][s.audio_source.index()] += 1;
        }
        keys.push(cell_key(s.lat, s.lon, config.cell_size_deg)?);
        labels.push(li);
    }

    // All-pairs leakage scan.
    let mut leaked: std::collections::BTreeSet<CellKey> = Default::default();
    for i in 0..samples.len() {
        if labels[i] >= 3 {
            continue;
        }
        for j in (i + 1)..samples.len() {
            if labels[j] < 3 && labels[i] != labels[j] && keys[i] == keys[j] {
                leaked.insert(keys[i]);
            }
        }
    }

    // Threshold placement: every sub-threshold cell must sit wholly in train.
    let mut counts: BTreeMap<CellKey, usize> = BTreeMap::new();
    for k in &keys {
        *counts.entry(*k).or_default() += 1;
    }
    let mut sub_ok = true;
    for (i, k) in keys.iter().enumerate() {
        if counts[k] < config.min_cell_count && labels[i] != 0 {
            sub_ok = false;
        }
    }

    let val_target_hist = largest_remainder(&hist[0], config.val_count);
    let test_target_hist = largest_remainder(&hist[0], config.test_count);
    Ok(SplitAudit {
        n_train: n[0],
        n_val: n[1],
        n_test: n[2],
        n_excluded: n[3],
        leaked_cells: leaked.len(),
        sub_threshold_cells_all_train: sub_ok,
        train_source_hist: hist[0],
        val_source_hist: hist[1],
        test_source_hist: hist[2],
        val_target_hist: {
            let mut t = [0usize; 4];
            t.copy_from_slice(&val_target_hist);
            t
        },
        test_target_hist: {
            let mut t = [0usize; 4];
            t.copy_from_slice(&test_target_hist);
            t
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::TextSource;

    fn sample(id: usize, lat: f64, lon: f64, source: AudioSource) -> GeoSample {
        GeoSample {
            id: format!("s{id:06}"),
            lat,
            lon,
            month: 1 + (id % 12) as u8,
            hour: (id % 24) as u8,
            audio_source: source,
            text_source: TextSource::MetadataCaption,
            image_ref: String::new(),
            audio_ref: String::new(),
            caption: vec![1],
        }
    }

    #[test]
    fn cell_key_floor_arithmetic() {
        assert_eq!(cell_key(38.6, -90.2, 1.0).unwrap(), CellKey { cell_lat: 38, cell_lon: -91 });
        assert_eq!(cell_key(0.0, 0.0, 1.0).unwrap(), CellKey { cell_lat: 0, cell_lon: 0 });
        assert_eq!(cell_key(-0.5, 0.5, 1.0).unwrap(), CellKey { cell_lat: -1, cell_lon: 0 });
        // antimeridian wraps
        assert_eq!(cell_key(10.0, 180.0, 1.0).unwrap(), cell_key(10.0, -180.0, 1.0).unwrap());
        assert!(matches!(cell_key(91.0, 0.0, 1.0), Err(CoreError::InputDomain(_))));
    }

    #[test]
    fn all_cells_below_threshold_go_to_train() {
        let samples = vec![
            sample(0, 10.5, 10.5, AudioSource::Yfcc),
            sample(1, 20.5, 20.5, AudioSource::Aporee),
            sample(2, 30.5, 30.5, AudioSource::Freesound),
        ];
        let cfg = SplitConfig { min_cell_count: 25, ..Default::default() };
        let a = assign_splits(&samples, &cfg).unwrap();
        assert!(a.by_id.values().all(|&x| x == Assignment::Train));
        assert!(a.cells.iter().all(|c| !c.held_out && c.density.is_none()));
    }

    #[test]
    fn largest_remainder_matches_exact_allocation() {
        // train proportions (0.4, 0.3, 0.2, 0.1), 100 requested
        let t = largest_remainder(&[40, 30, 20, 10], 100);
        assert_eq!(t, vec![40, 30, 20, 10]);
        let t = largest_remainder(&[1, 1, 1], 100);
        assert_eq!(t.iter().sum::<usize>(), 100);
        assert!(t.iter().all(|&x| (33..=34).contains(&x)));
    }

    #[test]
    fn empty_sample_list_is_config_error() {
        assert!(matches!(
            assign_splits(&[], &SplitConfig::default()),
            Err(CoreError::Config(_))
        ));
    }

    fn synthetic_grid(n_cells: usize, per_cell: impl Fn(usize) -> usize) -> Vec<GeoSample> {
        let mut samples = Vec::new();
        let mut id = 0usize;
        for c in 0..n_cells {
            let lat = (c / 30) as f64 + 0.5 - 40.0;
            let lon = (c % 30) as f64 * 2.0 + 0.5 - 30.0;
            for k in 0..per_cell(c) {
                let src = AudioSource::ALL[(id.wrapping_mul(2654435761usize) >> 3) % 4];
                samples.push(sample(id, lat + (k as f64 % 9.0) * 0.05, lon, src));
                id += 1;
            }
        }
        samples
    }

    #[test]
    fn two_hundred_cell_split_has_zero_leakage() {
        let samples = synthetic_grid(200, |c| 10 + (c * 13) % 70);
        let cfg = SplitConfig { val_count: 120, test_count: 180, seed: 7, ..Default::default() };
        let a = assign_splits(&samples, &cfg).unwrap();
        let audit = audit_assignment(&samples, &a, &cfg).unwrap();
        assert_eq!(audit.leaked_cells, 0);
        assert!(audit.sub_threshold_cells_all_train);
        assert_eq!(audit.n_val, 120);
        assert_eq!(audit.n_test, 180);
        for s in 0..4 {
            let dv = audit.val_source_hist[s] as i64 - audit.val_target_hist[s] as i64;
            let dt = audit.test_source_hist[s] as i64 - audit.test_target_hist[s] as i64;
            assert!(dv.abs() <= 1, "val source {s} off target by {dv}");
            assert!(dt.abs() <= 1, "test source {s} off target by {dt}");
        }
    }

    #[test]
    fn split_is_deterministic_in_seed() {
        let samples = synthetic_grid(120, |c| 20 + c % 40);
        let cfg = SplitConfig { val_count: 40, test_count: 60, seed: 3, ..Default::default() };
        let a = assign_splits(&samples, &cfg).unwrap();
        let b = assign_splits(&samples, &cfg).unwrap();
        assert_eq!(a.by_id, b.by_id);
        let cfg2 = SplitConfig { seed: 4, ..cfg };
        let c = assign_splits(&samples, &cfg2).unwrap();
        assert_ne!(a.by_id, c.by_id, "different seeds should differ");
    }

    #[test]
    fn deficient_pool_is_named() {
        // Only 30 eligible low-density cells; demand far more val samples
        // than the held-out pool can contain.
        let samples = synthetic_grid(30, |_| 26);
        let cfg = SplitConfig { val_count: 700, test_count: 0, seed: 1, ..Default::default() };
        match assign_splits(&samples, &cfg) {
            Err(CoreError::Config(msg)) => assert!(msg.contains("val"), "message: {msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn stratification_gives_three_classes_on_distinct_counts() {
        let samples = synthetic_grid(90, |c| 25 + c); // counts 25..114, all distinct
        let cfg = SplitConfig { seed: 2, ..Default::default() };
        let a = assign_splits(&samples, &cfg).unwrap();
        let mut by_density = [0usize; 3];
        for rec in a.cells.iter().filter(|r| r.density.is_some()) {
            by_density[match rec.density.unwrap() {
                Density::Low => 0,
                Density::Medium => 1,
                Density::High => 2,
            }] += 1;
        }
        assert!(by_density.iter().all(|&n| n > 0), "strata {by_density:?}");
    }
}
