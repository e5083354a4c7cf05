//! Browser demo: three small views onto the pipeline, each a pure function
//! behind a thin `wasm_bindgen` wrapper so the logic is testable natively.

use apa_core::boost::{train_binary, BoostParams};
use apa_core::data::{Condition, StimulusSchedule};
use apa_core::design::{build_design_matrix, canonical_hrf, DEFAULT_HRF_DURATION_S};
use apa_core::register::{resample, similarity, AffineTransform, MetricKind, SimilarityMetric, DEFAULT_BINS};
use apa_core::rng::SeededRng;
use apa_core::synth::make_phantom;
use apa_core::Result;
use wasm_bindgen::prelude::*;

/// Phantom size for the similarity view; small enough to stay interactive.
pub const PROFILE_DIMS: [usize; 3] = [24, 24, 24];
pub const PROFILE_REGIONS: usize = 8;

/// Predicted BOLD response to impulses at `onsets` (scan indices).
pub fn design_curve(onsets: &[usize], scans: usize, tr_ms: f64) -> Result<Vec<f64>> {
    let mut onsets = onsets.to_vec();
    onsets.sort_unstable();
    onsets.dedup();
    let schedule = StimulusSchedule::new(
        "demo",
        1,
        vec![Condition {
            id: 1,
            category: 1,
            onsets,
        }],
    )?;
    let hrf = canonical_hrf(tr_ms, DEFAULT_HRF_DURATION_S)?;
    let design = build_design_matrix(&schedule, scans, &hrf)?;
    Ok(design.values.column(0).iter().copied().collect())
}

/// Similarity between a phantom and copies of itself shifted along x by
/// `-max_shift..=max_shift` voxels in `steps` samples.
pub fn shift_profile(metric: MetricKind, max_shift: f64, steps: usize, seed: u64) -> Result<Vec<f64>> {
    let phantom = make_phantom(PROFILE_DIMS, PROFILE_REGIONS, seed)?;
    let metric = SimilarityMetric::new(metric, DEFAULT_BINS)?;
    let steps = steps.max(2);
    (0..steps)
        .map(|i| {
            let dx = -max_shift + 2.0 * max_shift * i as f64 / (steps - 1) as f64;
            let moved = resample(&phantom.reference, &AffineTransform::translation([dx, 0.0, 0.0]), PROFILE_DIMS)?;
            similarity(&moved, &phantom.reference, metric)
        })
        .collect()
}

/// Two Gaussian blobs in the unit square, `minority` positives against
/// `majority` negatives, and the boosted margin sampled on a `grid`².
#[derive(Debug, Clone, PartialEq)]
pub struct MarginMap {
    pub grid: usize,
    /// row-major, y outer
    pub margins: Vec<f64>,
    /// x, y pairs
    pub points: Vec<f64>,
    pub labels: Vec<i8>,
    pub rounds: usize,
}

pub fn margin_map(minority: usize, majority: usize, spread: f64, grid: usize, seed: u64) -> Result<MarginMap> {
    let mut rng = SeededRng::new(seed);
    let mut x = Vec::with_capacity(minority + majority);
    let mut y = Vec::with_capacity(minority + majority);
    for (count, centre, label) in [(minority, [0.65, 0.6], 1i8), (majority, [0.35, 0.4], -1)] {
        for _ in 0..count {
            x.push(vec![centre[0] + spread * rng.normal(), centre[1] + spread * rng.normal()]);
            y.push(label);
        }
    }
    let ensemble = train_binary(&x, &y, &BoostParams::default(), seed)?;
    let grid = grid.max(2);
    let margins = (0..grid * grid)
        .map(|k| {
            let (i, j) = (k % grid, k / grid);
            ensemble.margin(&[i as f64 / (grid - 1) as f64, j as f64 / (grid - 1) as f64])
        })
        .collect();
    Ok(MarginMap {
        grid,
        margins,
        points: x.into_iter().flatten().collect(),
        labels: y,
        rounds: ensemble.members.len(),
    })
}

fn js(e: apa_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = designCurve)]
pub fn design_curve_js(onsets: Vec<u32>, scans: usize, tr_ms: f64) -> std::result::Result<Vec<f64>, JsError> {
    let onsets: Vec<usize> = onsets.into_iter().map(|o| o as usize).collect();
    design_curve(&onsets, scans, tr_ms).map_err(js)
}

#[wasm_bindgen(js_name = shiftProfile)]
pub fn shift_profile_js(metric: &str, max_shift: f64, steps: usize, seed: u32) -> std::result::Result<Vec<f64>, JsError> {
    let kind: MetricKind = metric.parse().map_err(js)?;
    shift_profile(kind, max_shift, steps, seed as u64).map_err(js)
}

#[wasm_bindgen]
pub struct MarginView {
    inner: MarginMap,
}

#[wasm_bindgen]
impl MarginView {
    #[wasm_bindgen(getter)]
    pub fn grid(&self) -> usize {
        self.inner.grid
    }

    #[wasm_bindgen(getter)]
    pub fn rounds(&self) -> usize {
        self.inner.rounds
    }

    pub fn margins(&self) -> Vec<f64> {
        self.inner.margins.clone()
    }

    pub fn points(&self) -> Vec<f64> {
        self.inner.points.clone()
    }

    pub fn labels(&self) -> Vec<i8> {
        self.inner.labels.clone()
    }
}

#[wasm_bindgen(js_name = marginMap)]
pub fn margin_map_js(minority: usize, majority: usize, spread: f64, grid: usize, seed: u32) -> std::result::Result<MarginView, JsError> {
    margin_map(minority, majority, spread, grid, seed as u64)
        .map(|inner| MarginView { inner })
        .map_err(js)
}
