//! Geographic region clustering: k-means over POI coordinates with
//! great-circle distances, seeded initialization, and deterministic ties.

use log::warn;

use super::{haversine, CheckInDataset, DataError};
use crate::numerics::Rng;

/// Maximum Lloyd iterations before accepting the current assignment.
const MAX_ITERS: usize = 100;

/// Region assignment for every POI, plus the final centroids.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMap {
    k: usize,
    centroids: Vec<(f64, f64)>,
    /// Dense POI index -> region id in `0..k`.
    assignment: Vec<u32>,
}

impl RegionMap {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn centroids(&self) -> &[(f64, f64)] {
        &self.centroids
    }

    pub fn region_of(&self, poi: usize) -> u32 {
        self.assignment[poi]
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    /// Dense POI indices belonging to one region, ascending.
    pub fn members(&self, region: u32) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(i, &r)| (r == region).then_some(i))
            .collect()
    }
}

/// Cluster POIs into `k` geographic regions.
///
/// k-means++ seeding followed by Lloyd iterations, all distances
/// great-circle. Deterministic for a given seed: ties in the nearest-
/// centroid choice go to the lowest region index, and empty clusters are
/// re-seeded on the point currently farthest from its centroid.
pub fn partition_regions(
    ds: &CheckInDataset,
    k: usize,
    seed: u64,
) -> Result<RegionMap, DataError> {
    if k == 0 {
        return Err(DataError::ZeroRegions);
    }
    let n = ds.pois.len();
    if n < k {
        return Err(DataError::TooFewPois { k, pois: n });
    }
    let points: Vec<(f64, f64)> = ds.pois.iter().map(|p| (p.lat, p.lon)).collect();

    // Degenerate geometry: indistinguishable points cannot be split.
    let all_same = points.iter().all(|&p| p == points[0]);
    if all_same && k > 1 {
        warn!("all {n} POIs share one location; assigning every POI to region 0");
        return Ok(RegionMap { k, centroids: vec![points[0]; k], assignment: vec![0; n] });
    }

    let mut rng = Rng::new(seed);
    let mut centroids = seed_centroids(&points, k, &mut rng);
    let mut assignment = vec![0u32; n];

    for _ in 0..MAX_ITERS {
        let next = assign_all(&points, &centroids);
        // Re-seed any empty cluster on the worst-fit point so every region
        // ends up non-empty whenever geometry allows it.
        let mut counts = vec![0usize; k];
        for &a in &next {
            counts[a as usize] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            let (far_idx, _) = points
                .iter()
                .enumerate()
                .map(|(i, &p)| (i, haversine(p, centroids[next[i] as usize])))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .expect("non-empty point set");
            centroids[empty] = points[far_idx];
            continue;
        }
        let stable = next == assignment;
        assignment = next;
        if stable {
            break;
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&(f64, f64)> = points
                .iter()
                .zip(&assignment)
                .filter_map(|(p, &a)| (a as usize == c).then_some(p))
                .collect();
            let m = members.len() as f64;
            let lat = members.iter().map(|p| p.0).sum::<f64>() / m;
            let lon = members.iter().map(|p| p.1).sum::<f64>() / m;
            *centroid = (lat, lon);
        }
    }
    // The invariant is "every POI sits in the region of its nearest
    // centroid": restore it in case the loop stopped on the iteration cap.
    let assignment = assign_all(&points, &centroids);

    Ok(RegionMap { k, centroids, assignment })
}

/// k-means++ : spread the initial centroids out proportionally to squared
/// distance from the ones already chosen.
fn seed_centroids(points: &[(f64, f64)], k: usize, rng: &mut Rng) -> Vec<(f64, f64)> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.below(points.len())]);
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|&p| {
                centroids
                    .iter()
                    .map(|&c| haversine(p, c).powi(2))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        if total == 0.0 {
            // Remaining points coincide with chosen centroids; any pick is
            // as good as any other.
            centroids.push(points[rng.below(points.len())]);
            continue;
        }
        let mut target = rng.uniform() * total;
        let mut pick = points.len() - 1;
        for (i, &d) in d2.iter().enumerate() {
            if target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        centroids.push(points[pick]);
    }
    centroids
}

fn assign_all(points: &[(f64, f64)], centroids: &[(f64, f64)]) -> Vec<u32> {
    points
        .iter()
        .map(|&p| {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, &centroid) in centroids.iter().enumerate() {
                let d = haversine(p, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CheckIn, Poi};

    fn dataset_with_coords(coords: &[(f64, f64)]) -> CheckInDataset {
        let pois: Vec<Poi> = coords
            .iter()
            .enumerate()
            .map(|(i, &(lat, lon))| Poi {
                external_id: i as u32,
                category_id: 0,
                lat,
                lon,
                region_id: None,
            })
            .collect();
        let n = pois.len();
        CheckInDataset {
            pois,
            categories: vec![0],
            users: vec![0],
            sequences: vec![vec![CheckIn { poi: 0, timestamp: 0 }]],
            poi_category: vec![0; n],
        }
    }

    fn two_blobs() -> Vec<(f64, f64)> {
        // Blob A near (0, 0), blob B near (1, 1) — about 156 km apart.
        let mut coords = Vec::new();
        for i in 0..12 {
            let j = i as f64 * 0.001;
            coords.push((j, -j));
            coords.push((1.0 + j, 1.0 - j));
        }
        coords
    }

    #[test]
    fn separated_blobs_are_recovered_exactly() {
        let ds = dataset_with_coords(&two_blobs());
        let rm = partition_regions(&ds, 2, 99).unwrap();
        // All even indices are blob A, odd are blob B (by construction).
        let a = rm.region_of(0);
        let b = rm.region_of(1);
        assert_ne!(a, b);
        for i in 0..ds.pois.len() {
            let expect = if i % 2 == 0 { a } else { b };
            assert_eq!(rm.region_of(i), expect, "poi {i}");
        }
    }

    #[test]
    fn every_poi_sits_with_its_nearest_centroid() {
        let ds = dataset_with_coords(&two_blobs());
        let rm = partition_regions(&ds, 3, 7).unwrap();
        for (i, poi) in ds.pois.iter().enumerate() {
            let p = (poi.lat, poi.lon);
            let mine = haversine(p, rm.centroids()[rm.region_of(i) as usize]);
            for &c in rm.centroids() {
                assert!(mine <= haversine(p, c) + 1e-9);
            }
        }
    }

    #[test]
    fn identical_points_collapse_to_region_zero_with_warning() {
        let ds = dataset_with_coords(&vec![(5.0, 5.0); 8]);
        let rm = partition_regions(&ds, 3, 1).unwrap();
        assert!(rm.assignment().iter().all(|&r| r == 0));
        assert_eq!(rm.k(), 3);
    }

    #[test]
    fn parameter_validation() {
        let ds = dataset_with_coords(&[(0.0, 0.0), (1.0, 1.0)]);
        assert!(matches!(partition_regions(&ds, 0, 1), Err(DataError::ZeroRegions)));
        assert!(matches!(
            partition_regions(&ds, 3, 1),
            Err(DataError::TooFewPois { k: 3, pois: 2 })
        ));
    }

    #[test]
    fn same_seed_same_partition() {
        let ds = dataset_with_coords(&two_blobs());
        let a = partition_regions(&ds, 2, 42).unwrap();
        let b = partition_regions(&ds, 2, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn k_equals_n_gives_singleton_regions() {
        let coords: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 0.0)).collect();
        let ds = dataset_with_coords(&coords);
        let rm = partition_regions(&ds, 5, 3).unwrap();
        let mut regions: Vec<u32> = (0..5).map(|i| rm.region_of(i)).collect();
        regions.sort_unstable();
        regions.dedup();
        assert_eq!(regions.len(), 5, "each POI should get its own region");
    }
}
