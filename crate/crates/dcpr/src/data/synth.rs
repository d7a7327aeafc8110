//! Synthetic check-in corpora with planted, learnable structure.
//!
//! Each region gets a ring of POIs whose categories tile a fixed cycle.
//! Users walk the ring: the `cyclic` pattern starts every user at position
//! 0 and advances one step at a time (so the *category* stream is a pure
//! cycle), while `markov` starts at a random position and advances by one
//! or two (a planted first-order transition kernel at the POI level).
//! Optional knobs superimpose uniform noise jumps, a per-user preference
//! set the walk skips ahead to, and cross-region hops.
//!
//! The walks are multiset-decodable on purpose: the denoisers are
//! permutation-invariant over history, so a planted pattern is only
//! learnable if the *bag* of events determines the next one. A fixed-start
//! cycle is decodable through its counts; a contiguous arc is decodable
//! through its covering interval.

use std::collections::BTreeMap;

use super::{build_dataset, CheckInDataset, DataError, RawRow};
use crate::numerics::{derive_seed, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthPattern {
    /// Fixed-start category cycle; the global tier's bread and butter.
    Cyclic,
    /// Random-start walk with 1-or-2 step advances: POI-level transitions.
    Markov,
}

impl std::str::FromStr for SynthPattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cyclic" => Ok(SynthPattern::Cyclic),
            "markov" => Ok(SynthPattern::Markov),
            other => Err(format!("unknown pattern `{other}` (expected cyclic|markov)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub users: usize,
    pub regions: usize,
    pub pois_per_region: usize,
    pub categories: usize,
    pub checkins_per_user: usize,
    pub pattern: SynthPattern,
    /// Probability of a uniform jump instead of the planted transition.
    pub noise: f64,
    /// Probability of skipping ahead to the user's preference set.
    pub bias_strength: f64,
    /// Size of the per-user preference set (cycle positions).
    pub bias_size: usize,
    /// Probability of switching to another region between events.
    pub hop: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 40,
            regions: 2,
            pois_per_region: 25,
            categories: 5,
            checkins_per_user: 40,
            pattern: SynthPattern::Cyclic,
            noise: 0.05,
            bias_strength: 0.0,
            bias_size: 5,
            hop: 0.0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::BadSynthSpec(msg));
        if self.users == 0 {
            return bad("users must be at least 1".into());
        }
        if self.regions == 0 {
            return bad("regions must be at least 1".into());
        }
        if self.categories < 2 {
            return bad("categories must be at least 2".into());
        }
        if self.pois_per_region < self.categories {
            return bad(format!(
                "pois_per_region ({}) must cover every category ({})",
                self.pois_per_region, self.categories
            ));
        }
        if self.checkins_per_user < super::MIN_SUPPORT {
            return bad(format!(
                "checkins_per_user ({}) below the support filter ({}); \
                 every user would be filtered out",
                self.checkins_per_user,
                super::MIN_SUPPORT
            ));
        }
        for (name, v) in
            [("noise", self.noise), ("bias_strength", self.bias_strength), ("hop", self.hop)]
        {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if self.bias_strength > 0.0
            && (self.bias_size == 0 || self.bias_size > self.pois_per_region)
        {
            return bad(format!(
                "bias_size ({}) must be in 1..=pois_per_region ({})",
                self.bias_size, self.pois_per_region
            ));
        }
        Ok(())
    }
}

/// Parse the flat `key = value` synthetic-spec format. Unknown keys are
/// hard errors; omitted keys keep their defaults. `#` starts a comment.
pub fn parse_synth_spec(text: &str) -> Result<SynthConfig, DataError> {
    let mut cfg = SynthConfig::default();
    let mut seen = std::collections::HashSet::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(DataError::BadSynthSpec(format!(
                "line {}: expected `key = value`, got `{raw}`",
                ln + 1
            )));
        };
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(DataError::BadSynthSpec(format!("line {}: duplicate key `{key}`", ln + 1)));
        }
        let bad_value = |what: &str| {
            DataError::BadSynthSpec(format!("line {}: cannot parse {what} from `{value}`", ln + 1))
        };
        match key {
            "users" => cfg.users = value.parse().map_err(|_| bad_value("users"))?,
            "regions" => cfg.regions = value.parse().map_err(|_| bad_value("regions"))?,
            "pois_per_region" => {
                cfg.pois_per_region = value.parse().map_err(|_| bad_value("pois_per_region"))?
            }
            "categories" => cfg.categories = value.parse().map_err(|_| bad_value("categories"))?,
            "checkins_per_user" => {
                cfg.checkins_per_user =
                    value.parse().map_err(|_| bad_value("checkins_per_user"))?
            }
            "pattern" => {
                cfg.pattern = value.parse().map_err(|e| DataError::BadSynthSpec(format!(
                    "line {}: {e}",
                    ln + 1
                )))?
            }
            "noise" => cfg.noise = value.parse().map_err(|_| bad_value("noise"))?,
            "bias_strength" => {
                cfg.bias_strength = value.parse().map_err(|_| bad_value("bias_strength"))?
            }
            "bias_size" => cfg.bias_size = value.parse().map_err(|_| bad_value("bias_size"))?,
            "hop" => cfg.hop = value.parse().map_err(|_| bad_value("hop"))?,
            other => {
                return Err(DataError::BadSynthSpec(format!("line {}: unknown key `{other}`", ln + 1)))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A generated corpus plus the planted ground truth tests lean on.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub dataset: CheckInDataset,
    /// Home region per external user id.
    pub home_region: Vec<u32>,
    /// Preference set per external user id, as external POI ids (empty
    /// when `bias_strength` is 0).
    pub bias_sets: Vec<Vec<u32>>,
}

/// Generate a corpus from the planted-pattern config. Deterministic for a
/// given `(cfg, seed)` pair; the result has already passed the standard
/// support filter, and `region_id` is pre-assigned from the plant.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<SynthDataset, DataError> {
    cfg.validate()?;
    let p = cfg.pois_per_region;
    let n_regions = cfg.regions;

    // Region centers ~111 km apart on a diagonal; POIs on a 2 km ring.
    let center = |r: usize| (r as f64, 1.5 * r as f64);
    let poi_coords = |r: usize, j: usize, jitter: (f64, f64)| -> (f64, f64) {
        let (clat, clon) = center(r);
        let theta = 2.0 * std::f64::consts::PI * j as f64 / p as f64;
        let ring_km = 2.0;
        let lat = clat + (ring_km / 111.19) * theta.cos() + jitter.0;
        let lon = clon + (ring_km / (111.19 * clat.to_radians().cos().max(0.2))) * theta.sin()
            + jitter.1;
        (lat, lon)
    };

    // Fix every POI's coordinates up front (one jitter draw per POI).
    let mut geo_rng = Rng::new(derive_seed(seed, "synth-geo", 0));
    let mut coords: Vec<(f64, f64)> = Vec::with_capacity(n_regions * p);
    for r in 0..n_regions {
        for j in 0..p {
            let jit = (
                (geo_rng.uniform() - 0.5) * 2.0 * (0.05 / 111.19),
                (geo_rng.uniform() - 0.5) * 2.0 * (0.05 / 111.19),
            );
            coords.push(poi_coords(r, j, jit));
        }
    }

    let mut rows = Vec::with_capacity(cfg.users * cfg.checkins_per_user);
    let mut home_region = Vec::with_capacity(cfg.users);
    let mut bias_sets: Vec<Vec<u32>> = vec![Vec::new(); cfg.users];
    let mut bias_positions: Vec<Vec<usize>> = vec![Vec::new(); cfg.users];

    for u in 0..cfg.users {
        let mut rng = Rng::new(derive_seed(seed, "synth-user", u as u64));
        let home = (u % n_regions) as u32;
        home_region.push(home);

        if cfg.bias_strength > 0.0 {
            let mut positions: Vec<usize> = (0..p).collect();
            rng.shuffle(&mut positions);
            positions.truncate(cfg.bias_size);
            positions.sort_unstable();
            bias_sets[u] =
                positions.iter().map(|&j| (home as usize * p + j) as u32).collect();
            bias_positions[u] = positions;
        }

        let mut region = home as usize;
        let mut j = match cfg.pattern {
            SynthPattern::Cyclic => 0,
            SynthPattern::Markov => rng.below(p),
        };
        let mut ts: i64 = 1_600_000_000 + (u as i64) * 97;

        for _ in 0..cfg.checkins_per_user {
            let ext_poi = (region * p + j) as u32;
            rows.push(RawRow {
                user: u as u32,
                poi: ext_poi,
                category: (j % cfg.categories) as u32,
                lat: coords[ext_poi as usize].0,
                lon: coords[ext_poi as usize].1,
                timestamp: ts,
            });
            ts += 3600 * (1 + rng.below(47)) as i64;

            // Advance the walk: optional region hop, then the planted
            // kernel (or a noise jump), then an optional preference skip.
            if n_regions > 1 && cfg.hop > 0.0 && rng.uniform() < cfg.hop {
                let mut other = rng.below(n_regions - 1);
                if other >= region {
                    other += 1;
                }
                region = other;
            }
            if cfg.noise > 0.0 && rng.uniform() < cfg.noise {
                j = rng.below(p);
            } else {
                let step = match cfg.pattern {
                    SynthPattern::Cyclic => 1,
                    SynthPattern::Markov => {
                        if rng.uniform() < 0.7 {
                            1
                        } else {
                            2
                        }
                    }
                };
                j = (j + step) % p;
            }
            if cfg.bias_strength > 0.0 && rng.uniform() < cfg.bias_strength {
                let set = &bias_positions[u];
                // Next preferred position strictly ahead, wrapping around.
                j = *set.iter().find(|&&s| s > j).unwrap_or(&set[0]);
            }
        }
    }

    let mut dataset = build_dataset(rows)?;
    for poi in &mut dataset.pois {
        poi.region_id = Some(poi.external_id / p as u32);
    }
    Ok(SynthDataset { dataset, home_region, bias_sets })
}

/// Named presets for the CLI's `--spec` flag.
pub fn synth_preset(name: &str) -> Option<SynthConfig> {
    let mut cfg = SynthConfig::default();
    match name {
        "small" => {
            cfg.users = 24;
            cfg.regions = 2;
            cfg.pois_per_region = 15;
            cfg.checkins_per_user = 30;
            Some(cfg)
        }
        "medium" => {
            cfg.users = 80;
            cfg.regions = 3;
            cfg.pois_per_region = 40;
            cfg.checkins_per_user = 60;
            cfg.pattern = SynthPattern::Markov;
            Some(cfg)
        }
        _ => None,
    }
}

/// Map external user id -> dense index. Generator side-tables
/// ([`SynthDataset::home_region`], [`SynthDataset::bias_sets`]) are keyed
/// by external id; this links them back to dense dataset sequences.
pub fn user_dense_index(ds: &CheckInDataset) -> BTreeMap<u32, usize> {
    ds.users.iter().enumerate().map(|(i, &u)| (u, i)).collect()
}
