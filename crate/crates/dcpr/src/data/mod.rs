//! Check-in data: the CSV contract, support filtering, geography, region
//! clustering, tier splits, and the synthetic corpus generator.
//!
//! External ids (users, POIs, categories) are integers and stay stable
//! through every transformation; internally everything is re-indexed to
//! dense `usize` indices in ascending external-id order, which makes runs
//! reproducible regardless of input row order.

mod kmeans;
mod splits;
mod synth;

pub use kmeans::{partition_regions, RegionMap};
pub use splits::{build_tier_splits, DeviceSequence, RegionSplit, TierSplits};
pub use synth::{
    parse_synth_spec, synth_generate, synth_preset, user_dense_index, SynthConfig, SynthDataset,
    SynthPattern,
};

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

/// Sequences are truncated to this many most-recent events everywhere.
pub const MAX_SEQ_LEN: usize = 200;
/// Users and POIs below this many check-ins are filtered out.
pub const MIN_SUPPORT: usize = 10;
/// Shortest usable on-device sequence (train + validation + test).
pub const MIN_DEVICE_LEN: usize = 3;
/// Mean Earth radius in km for great-circle distances.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv line {line}: {msg}")]
    Malformed { line: u64, msg: String },
    #[error("csv header must be exactly `user_id,poi_id,category_id,lat,lon,timestamp`, got `{got}`")]
    BadHeader { got: String },
    #[error("csv line {line}: POI {poi} re-appears with different category/coordinates")]
    InconsistentPoi { line: u64, poi: u32 },
    #[error("no data left after support filtering (min {MIN_SUPPORT} check-ins per user and POI)")]
    EmptyAfterFilter,
    #[error("cannot build {k} regions from {pois} POIs")]
    TooFewPois { k: usize, pois: usize },
    #[error("region count must be at least 1")]
    ZeroRegions,
    #[error("edge fraction must be in [0, 1], got {fraction}")]
    BadFraction { fraction: f64 },
    #[error("synthetic spec: {0}")]
    BadSynthSpec(String),
}

/// A point of interest. `region_id` is `None` until regions are assigned.
#[derive(Clone, Debug, PartialEq)]
pub struct Poi {
    pub external_id: u32,
    pub category_id: u32,
    pub lat: f64,
    pub lon: f64,
    pub region_id: Option<u32>,
}

/// One event in a user's history: a dense POI index plus Unix seconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckIn {
    pub poi: usize,
    pub timestamp: i64,
}

/// Filtered, densely indexed check-in corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckInDataset {
    /// Dense POI index -> POI, ascending external id.
    pub pois: Vec<Poi>,
    /// Dense category index -> external category id, ascending.
    pub categories: Vec<u32>,
    /// Dense user index -> external user id, ascending.
    pub users: Vec<u32>,
    /// Per dense user, chronological check-ins.
    pub sequences: Vec<Vec<CheckIn>>,
    /// Dense category index of each dense POI.
    pub poi_category: Vec<usize>,
}

impl CheckInDataset {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_pois(&self) -> usize {
        self.pois.len()
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn n_checkins(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Category sequence (dense indices) of one user's full history.
    pub fn category_sequence(&self, user: usize) -> Vec<usize> {
        self.sequences[user].iter().map(|c| self.poi_category[c.poi]).collect()
    }

    /// Record region assignments on the POIs.
    pub fn assign_regions(&mut self, regions: &RegionMap) {
        for (idx, poi) in self.pois.iter_mut().enumerate() {
            poi.region_id = Some(regions.region_of(idx));
        }
    }
}

/// One raw CSV row before filtering/indexing.
#[derive(Clone, Debug)]
pub(crate) struct RawRow {
    pub user: u32,
    pub poi: u32,
    pub category: u32,
    pub lat: f64,
    pub lon: f64,
    pub timestamp: i64,
}

/// Great-circle distance in km between `(lat, lon)` pairs in degrees.
pub fn haversine(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

const EXPECTED_HEADER: [&str; 6] = ["user_id", "poi_id", "category_id", "lat", "lon", "timestamp"];

/// Load a check-in CSV, validate it, apply support filtering, and index it.
pub fn load_checkins(path: &Path) -> Result<CheckInDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: to_io(e) })?;

    let headers = reader
        .headers()
        .map_err(|e| DataError::Malformed { line: 1, msg: e.to_string() })?
        .clone();
    let got: Vec<&str> = headers.iter().collect();
    if got != EXPECTED_HEADER {
        return Err(DataError::BadHeader { got: got.join(",") });
    }

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| DataError::Malformed {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 6 {
            return Err(DataError::Malformed {
                line,
                msg: format!("expected 6 fields, got {}", record.len()),
            });
        }
        let field = |i: usize| record.get(i).unwrap_or("");
        let user = parse_field::<u32>(field(0), "user_id", line)?;
        let poi = parse_field::<u32>(field(1), "poi_id", line)?;
        let category = parse_field::<u32>(field(2), "category_id", line)?;
        let lat = parse_field::<f64>(field(3), "lat", line)?;
        let lon = parse_field::<f64>(field(4), "lon", line)?;
        let timestamp = parse_field::<i64>(field(5), "timestamp", line)?;
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(DataError::Malformed {
                line,
                msg: format!("coordinates ({lat}, {lon}) out of range"),
            });
        }
        rows.push((line, RawRow { user, poi, category, lat, lon, timestamp }));
    }

    // Every POI must carry one consistent (category, lat, lon) triple.
    let mut seen: HashMap<u32, (u32, f64, f64)> = HashMap::new();
    for (line, row) in &rows {
        match seen.get(&row.poi) {
            None => {
                seen.insert(row.poi, (row.category, row.lat, row.lon));
            }
            Some(&(c, la, lo)) => {
                if c != row.category || la != row.lat || lo != row.lon {
                    return Err(DataError::InconsistentPoi { line: *line, poi: row.poi });
                }
            }
        }
    }

    build_dataset(rows.into_iter().map(|(_, r)| r).collect())
}

fn parse_field<T: std::str::FromStr>(s: &str, name: &str, line: u64) -> Result<T, DataError> {
    s.parse::<T>().map_err(|_| DataError::Malformed {
        line,
        msg: format!("cannot parse {name} from `{s}`"),
    })
}

fn to_io(e: csv::Error) -> std::io::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io,
        other => std::io::Error::other(format!("{other:?}")),
    }
}

/// Support-filter raw rows to a fixpoint, then index densely.
pub(crate) fn build_dataset(mut rows: Vec<RawRow>) -> Result<CheckInDataset, DataError> {
    // Iterative cascade: removing a thin user can push a POI below the
    // threshold and vice versa, so repeat until stable.
    loop {
        let mut user_count: HashMap<u32, usize> = HashMap::new();
        let mut poi_count: HashMap<u32, usize> = HashMap::new();
        for r in &rows {
            *user_count.entry(r.user).or_default() += 1;
            *poi_count.entry(r.poi).or_default() += 1;
        }
        let before = rows.len();
        rows.retain(|r| user_count[&r.user] >= MIN_SUPPORT && poi_count[&r.poi] >= MIN_SUPPORT);
        if rows.len() == before {
            break;
        }
    }
    if rows.is_empty() {
        return Err(DataError::EmptyAfterFilter);
    }

    let mut user_ids: Vec<u32> = rows.iter().map(|r| r.user).collect();
    user_ids.sort_unstable();
    user_ids.dedup();
    let mut poi_ids: Vec<u32> = rows.iter().map(|r| r.poi).collect();
    poi_ids.sort_unstable();
    poi_ids.dedup();
    let mut cat_ids: Vec<u32> = rows.iter().map(|r| r.category).collect();
    cat_ids.sort_unstable();
    cat_ids.dedup();

    let user_index: HashMap<u32, usize> =
        user_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let poi_index: HashMap<u32, usize> = poi_ids.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let cat_index: HashMap<u32, usize> = cat_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    let mut pois: Vec<Option<Poi>> = vec![None; poi_ids.len()];
    for r in &rows {
        let idx = poi_index[&r.poi];
        if pois[idx].is_none() {
            pois[idx] = Some(Poi {
                external_id: r.poi,
                category_id: r.category,
                lat: r.lat,
                lon: r.lon,
                region_id: None,
            });
        }
    }
    let pois: Vec<Poi> = pois.into_iter().map(Option::unwrap).collect();
    let poi_category: Vec<usize> = pois.iter().map(|p| cat_index[&p.category_id]).collect();

    // Stable chronological order: ties broken by external POI id, then by
    // input order (the sort is stable).
    let mut sequences: Vec<Vec<(i64, u32, usize)>> = vec![Vec::new(); user_ids.len()];
    for r in &rows {
        sequences[user_index[&r.user]].push((r.timestamp, r.poi, poi_index[&r.poi]));
    }
    let sequences: Vec<Vec<CheckIn>> = sequences
        .into_iter()
        .map(|mut seq| {
            seq.sort_by_key(|&(ts, ext, _)| (ts, ext));
            seq.into_iter().map(|(ts, _, idx)| CheckIn { poi: idx, timestamp: ts }).collect()
        })
        .collect();

    Ok(CheckInDataset { pois, categories: cat_ids, users: user_ids, sequences, poi_category })
}

/// Write a dataset back out in the canonical CSV contract (header included,
/// rows ordered by user, then time).
pub fn write_checkins(ds: &CheckInDataset, path: &Path) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: to_io(e) })?;
    writer
        .write_record(EXPECTED_HEADER)
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: to_io(e) })?;
    for (u, seq) in ds.sequences.iter().enumerate() {
        for c in seq {
            let poi = &ds.pois[c.poi];
            writer
                .write_record(&[
                    ds.users[u].to_string(),
                    poi.external_id.to_string(),
                    poi.category_id.to_string(),
                    format!("{}", poi.lat),
                    format!("{}", poi.lon),
                    c.timestamp.to_string(),
                ])
                .map_err(|e| DataError::Io { path: path.display().to_string(), source: to_io(e) })?;
        }
    }
    writer
        .flush()
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
    Ok(())
}
