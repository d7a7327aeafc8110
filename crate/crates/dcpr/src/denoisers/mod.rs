//! The three denoisers: global (categories), region (POIs with a
//! spatiotemporal attention bias), and the on-device patch MLP.
//!
//! All three estimate the clean target embedding `x0` from a noised
//! `x_t`, the visit history, and the diffusion step. The global and region
//! models share one attention readout; the patch is a small residual MLP
//! applied on top of the frozen region output.

mod forward;

pub use forward::{
    attention_readout, ce_loss, ce_loss_eval, device_forward_eval, global_forward, patch_forward,
    region_forward, Dropout, GlobalGraph, PatchGraph, RegionGraph,
};

use thiserror::Error;

use crate::data::{haversine, MAX_SEQ_LEN};
use crate::numerics::{Matrix, Real, Rng};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("history must contain at least one event")]
    EmptyHistory,
    #[error("history of {len} events exceeds the maximum of {max}")]
    HistoryTooLong { len: usize, max: usize },
    #[error("item index {index} out of range for vocabulary of {vocab}")]
    ItemOutOfRange { index: usize, vocab: usize },
    #[error("{timestamps} timestamps for {history} history events")]
    TimestampCount { history: usize, timestamps: usize },
    #[error("input width {got} does not match model dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("contrastive loss needs at least one negative sample")]
    NoNegatives,
}

/// One supervised example: a visit history and the next item to predict.
/// `timestamps` (one per history event) are required by the region and
/// device tiers for the spatiotemporal bias and absent at the global tier.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub history: Vec<usize>,
    pub target: usize,
    pub timestamps: Option<Vec<i64>>,
}

impl TrainingExample {
    pub fn validate(&self, vocab: usize) -> Result<(), ModelError> {
        if self.history.is_empty() {
            return Err(ModelError::EmptyHistory);
        }
        if self.history.len() > MAX_SEQ_LEN {
            return Err(ModelError::HistoryTooLong { len: self.history.len(), max: MAX_SEQ_LEN });
        }
        for &i in self.history.iter().chain([&self.target]) {
            if i >= vocab {
                return Err(ModelError::ItemOutOfRange { index: i, vocab });
            }
        }
        if let Some(ts) = &self.timestamps {
            if ts.len() != self.history.len() {
                return Err(ModelError::TimestampCount {
                    history: self.history.len(),
                    timestamps: ts.len(),
                });
            }
        }
        Ok(())
    }
}

/// Standard deviation for embedding-table initialization.
const EMB_INIT_STD: f64 = 0.1;

/// Cloud-tier model: category embeddings plus the shared attention
/// projections.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModel<F: Real> {
    /// `n_categories x d` embedding table.
    pub category_emb: Matrix<F>,
    pub w_q: Matrix<F>,
    pub w_k: Matrix<F>,
    pub w_v: Matrix<F>,
    /// Strength of the diffusion-state injection into the attention input.
    pub lambda: F,
}

impl<F: Real> GlobalModel<F> {
    pub fn init(n_categories: usize, dim: usize, lambda: f64, rng: &mut Rng) -> Self {
        assert!(n_categories > 0 && dim > 0);
        let proj_std = 1.0 / (dim as f64).sqrt();
        GlobalModel {
            category_emb: rng.gaussian_matrix_scaled(n_categories, dim, EMB_INIT_STD),
            w_q: rng.gaussian_matrix_scaled(dim, dim, proj_std),
            w_k: rng.gaussian_matrix_scaled(dim, dim, proj_std),
            w_v: rng.gaussian_matrix_scaled(dim, dim, proj_std),
            lambda: F::from_f64(lambda),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn n_categories(&self) -> usize {
        self.category_emb.rows()
    }

    /// Named tensors in canonical order (serialization, hashing).
    pub fn tensors(&self) -> Vec<(String, &Matrix<F>)> {
        vec![
            ("category_emb".into(), &self.category_emb),
            ("w_q".into(), &self.w_q),
            ("w_k".into(), &self.w_k),
            ("w_v".into(), &self.w_v),
        ]
    }
}

/// Static metadata for one POI inside a region model.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPoi {
    pub external_id: u32,
    /// Row into the base model's category table.
    pub category_row: usize,
    pub lat: f64,
    pub lon: f64,
}

/// Edge-tier model: the (frozen, in the standard mode) global base plus
/// region-local POI embeddings and the spatiotemporal unit embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionModel<F: Real> {
    pub base: GlobalModel<F>,
    /// `n_pois x d`, rows aligned with `pois`.
    pub poi_emb: Matrix<F>,
    /// `1 x d`; only its element sum enters the bias, kept in embedding
    /// form to match the checkpoint layout.
    pub unit_spatial: Matrix<F>,
    pub unit_temporal: Matrix<F>,
    /// Weight of the category embedding mixed into each POI's attention
    /// input.
    pub gamma: F,
    pub region_id: u32,
    pub pois: Vec<RegionPoi>,
    /// Distance clip for the spatial deltas, km.
    pub clip_km: f64,
    /// Time clip for the temporal deltas, hours.
    pub clip_hours: f64,
}

impl<F: Real> RegionModel<F> {
    /// Specialize a trained global model to one region: POI embeddings
    /// start as copies of their category's embedding, unit embeddings at
    /// zero (no spatiotemporal bias until trained).
    pub fn specialize(
        base: GlobalModel<F>,
        region_id: u32,
        pois: Vec<RegionPoi>,
        gamma: f64,
        clip_km: f64,
        clip_hours: f64,
    ) -> Self {
        assert!(!pois.is_empty(), "a region model needs at least one POI");
        let dim = base.dim();
        let mut poi_emb = Matrix::zeros(pois.len(), dim);
        for (row, poi) in pois.iter().enumerate() {
            assert!(
                poi.category_row < base.n_categories(),
                "category row {} out of range",
                poi.category_row
            );
            poi_emb.row_mut(row).copy_from_slice(base.category_emb.row(poi.category_row));
        }
        RegionModel {
            base,
            poi_emb,
            unit_spatial: Matrix::zeros(1, dim),
            unit_temporal: Matrix::zeros(1, dim),
            gamma: F::from_f64(gamma),
            region_id,
            pois,
            clip_km,
            clip_hours,
        }
    }

    /// Region model with a randomly initialized base (the "train the edge
    /// tier from scratch" mode — no pre-trained global weights involved).
    #[allow(clippy::too_many_arguments)]
    pub fn from_scratch(
        n_categories: usize,
        dim: usize,
        lambda: f64,
        gamma: f64,
        region_id: u32,
        pois: Vec<RegionPoi>,
        clip_km: f64,
        clip_hours: f64,
        rng: &mut Rng,
    ) -> Self {
        let base = GlobalModel::init(n_categories, dim, lambda, rng);
        Self::specialize(base, region_id, pois, gamma, clip_km, clip_hours)
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn n_pois(&self) -> usize {
        self.pois.len()
    }

    /// Category rows for a slice of POI rows.
    pub fn category_rows(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&r| self.pois[r].category_row).collect()
    }

    /// `(lat, lon, timestamp)` triples for history rows.
    pub fn points(&self, rows: &[usize], timestamps: &[i64]) -> Vec<(f64, f64, i64)> {
        rows.iter()
            .zip(timestamps)
            .map(|(&r, &ts)| (self.pois[r].lat, self.pois[r].lon, ts))
            .collect()
    }

    /// Region-local tensors (the trainable set in the standard mode).
    pub fn local_tensors(&self) -> Vec<(String, &Matrix<F>)> {
        vec![
            ("poi_emb".into(), &self.poi_emb),
            ("unit_spatial".into(), &self.unit_spatial),
            ("unit_temporal".into(), &self.unit_temporal),
        ]
    }

    /// All tensors, base ones under a `base.` prefix.
    pub fn tensors(&self) -> Vec<(String, &Matrix<F>)> {
        let mut out: Vec<(String, &Matrix<F>)> =
            self.base.tensors().into_iter().map(|(n, m)| (format!("base.{n}"), m)).collect();
        out.extend(self.local_tensors());
        out
    }
}

/// Device-tier model: a 3-hidden-layer residual-free MLP patching the
/// region model's clean-target estimate toward one user's taste.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchModel<F: Real> {
    pub w1: Matrix<F>,
    pub b1: Matrix<F>,
    pub w2: Matrix<F>,
    pub b2: Matrix<F>,
    pub w3: Matrix<F>,
    pub b3: Matrix<F>,
    pub w4: Matrix<F>,
    pub b4: Matrix<F>,
}

impl<F: Real> PatchModel<F> {
    /// Near-identity initialization: the first layer scales into the tanh
    /// linear regime by `scale`, the last scales back out, so initially
    /// `patch(x) ~ x` and training starts from "trust the region model".
    pub fn near_identity(dim: usize, scale: f64) -> Self {
        assert!(dim > 0);
        assert!(scale > 0.0 && scale <= 1.0, "patch init scale must be in (0, 1], got {scale}");
        let s = F::from_f64(scale);
        PatchModel {
            w1: Matrix::scaled_identity(dim, s),
            b1: Matrix::zeros(1, dim),
            w2: Matrix::scaled_identity(dim, F::one()),
            b2: Matrix::zeros(1, dim),
            w3: Matrix::scaled_identity(dim, F::one()),
            b3: Matrix::zeros(1, dim),
            w4: Matrix::scaled_identity(dim, F::one() / s),
            b4: Matrix::zeros(1, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix<F>)> {
        vec![
            ("w1".into(), &self.w1),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
            ("w3".into(), &self.w3),
            ("b3".into(), &self.b3),
            ("w4".into(), &self.w4),
            ("b4".into(), &self.b4),
        ]
    }
}

/// Sinusoidal embedding of a diffusion step: pairs of `sin`/`cos` at
/// geometrically spaced frequencies; odd dimensions truncate the last pair.
pub fn step_embedding<F: Real>(t: usize, dim: usize) -> Matrix<F> {
    assert!(dim > 0);
    let mut e = Matrix::zeros(1, dim);
    for i in 0..dim.div_ceil(2) {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        let angle = t as f64 * freq;
        e.set(0, 2 * i, F::from_f64(angle.sin()));
        if 2 * i + 1 < dim {
            e.set(0, 2 * i + 1, F::from_f64(angle.cos()));
        }
    }
    e
}

/// Pairwise clipped distance (km) and time-gap (hours) matrices for a
/// sequence of `(lat, lon, unix_seconds)` points.
pub fn spatiotemporal_deltas(
    points: &[(f64, f64, i64)],
    clip_km: f64,
    clip_hours: f64,
) -> (Matrix<f64>, Matrix<f64>) {
    assert!(!points.is_empty());
    let m = points.len();
    let mut ds = Matrix::zeros(m, m);
    let mut dt = Matrix::zeros(m, m);
    for a in 0..m {
        for b in (a + 1)..m {
            let km = haversine((points[a].0, points[a].1), (points[b].0, points[b].1))
                .min(clip_km);
            let hours = ((points[a].2 - points[b].2).abs() as f64 / 3600.0).min(clip_hours);
            ds.set(a, b, km);
            ds.set(b, a, km);
            dt.set(a, b, hours);
            dt.set(b, a, hours);
        }
    }
    (ds, dt)
}

/// Evaluate the spatiotemporal attention bias directly (no tape): each
/// entry is `dist * sum(unit_spatial) + gap * sum(unit_temporal)`.
pub fn spatiotemporal_matrix<F: Real>(
    points: &[(f64, f64, i64)],
    unit_spatial: &Matrix<F>,
    unit_temporal: &Matrix<F>,
    clip_km: f64,
    clip_hours: f64,
) -> Matrix<F> {
    let (ds, dt) = spatiotemporal_deltas(points, clip_km, clip_hours);
    let s = unit_spatial.sum_all().scalar();
    let t = unit_temporal.sum_all().scalar();
    let mut out = Matrix::zeros(ds.rows(), ds.cols());
    for r in 0..ds.rows() {
        for c in 0..ds.cols() {
            out.set(r, c, F::from_f64(ds.get(r, c)) * s + F::from_f64(dt.get(r, c)) * t);
        }
    }
    out
}
