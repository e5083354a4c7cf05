//! Synthetic data with known ground truth: phantom atlases, planted beta
//! patterns, block schedules and time series drawn from `F = D·Bᵀ + noise`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    save_atlas, save_features, save_json, save_schedule, save_volume3d, save_volume4d, AtlasVolume, BetaMap, Condition,
    FeatureMatrix, SessionEntry, SessionManifest, StimulusSchedule, Volume3D, Volume4D,
};
use crate::design::{build_design_matrix, canonical_hrf, DEFAULT_HRF_DURATION_S};
use crate::error::{Error, Result};
use crate::register::{resample_map, AffineTransform};
use crate::rng::{derive_seed, SeededRng, RNG_ALGORITHM};

/// Ellipsoid semi-axes of the phantom head, as fractions of each extent.
const HEAD_AXES: [f64; 3] = [0.44, 0.38, 0.36];
const SMOOTH_SIGMA: f64 = 0.8;
const LLOYD_STEPS: usize = 4;
/// correlation length of the shared texture, voxels
const TEXTURE_SIGMA: f64 = 1.5;

/// A continuous phantom (ellipsoidal head cut into Voronoi cells) and its
/// rendering on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub atlas: AtlasVolume,
    pub reference: Volume3D,
    sites: Vec<[f64; 3]>,
    levels: Vec<f64>,
    /// the head covers the whole grid (tiny grids)
    fills_grid: bool,
}

fn in_head(p: [f64; 3], dims: [usize; 3]) -> bool {
    let r: f64 = (0..3)
        .map(|a| {
            let c = (dims[a] as f64 - 1.0) / 2.0;
            let s = (HEAD_AXES[a] * dims[a] as f64).max(0.5);
            ((p[a] - c) / s).powi(2)
        })
        .sum();
    r <= 1.0
}

fn head_mask(dims: [usize; 3]) -> Vec<bool> {
    (0..dims.iter().product()).map(|i| in_head(coords(i, dims), dims)).collect()
}

fn nearest(sites: &[[f64; 3]], p: [f64; 3]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (r, s) in sites.iter().enumerate() {
        let d = dist2(*s, p);
        if d < best_d {
            best_d = d;
            best = r;
        }
    }
    best
}

impl Phantom {
    fn label_at(&self, p: [f64; 3]) -> usize {
        let dims = self.atlas.dims();
        let inside = if self.fills_grid {
            (0..3).all(|a| p[a] >= -0.5 && p[a] <= dims[a] as f64 - 0.5)
        } else {
            in_head(p, dims)
        };
        if inside {
            nearest(&self.sites, p) + 1
        } else {
            0
        }
    }

    /// The phantom seen through `transform`: voxel `y` shows the point
    /// `transform(y)`, so registering the result onto `reference` recovers
    /// `transform`. Labels are sampled exactly, then smoothed like the
    /// reference.
    pub fn render(&self, transform: &AffineTransform) -> Result<Volume3D> {
        transform.validate()?;
        let dims = self.atlas.dims();
        let map = transform.to_map(dims, dims);
        let raw: Vec<f64> = (0..dims.iter().product())
            .map(|i| {
                let q = map.apply(nalgebra::Vector3::from(coords(i, dims)));
                match self.label_at([q[0], q[1], q[2]]) {
                    0 => 0.0,
                    l => self.levels[l - 1],
                }
            })
            .collect();
        Ok(smooth(&Volume3D::new(dims, raw)?, SMOOTH_SIGMA))
    }
}

fn coords(i: usize, dims: [usize; 3]) -> [f64; 3] {
    let x = i % dims[0];
    let y = (i / dims[0]) % dims[1];
    let z = i / (dims[0] * dims[1]);
    [x as f64, y as f64, z as f64]
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Separable Gaussian blur with zero padding.
pub fn smooth(image: &Volume3D, sigma: f64) -> Volume3D {
    if sigma <= 0.0 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let dims = image.dims();
    let stride = [1, dims[0], dims[0] * dims[1]];
    let mut cur = image.voxels().to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = (i / stride[axis]) % dims[axis];
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let q = pos as isize + k as isize - radius;
                if q >= 0 && (q as usize) < dims[axis] {
                    acc += w * cur[i + q as usize * stride[axis] - pos * stride[axis]];
                }
            }
            *out = acc;
        }
        cur = next;
    }
    Volume3D::new(dims, cur).expect("blur keeps dims")
}

/// Seeded Voronoi parcellation of an ellipsoidal head into `regions` blobs,
/// plus a smoothed piecewise-constant reference image.
pub fn make_phantom(dims: [usize; 3], regions: usize, seed: u64) -> Result<Phantom> {
    let n: usize = dims.iter().product();
    if regions == 0 || regions > n {
        return Err(Error::Infeasible(format!("{regions} regions on a grid of {n} voxels")));
    }
    let mut inside = head_mask(dims);
    let mut candidates: Vec<usize> = (0..n).filter(|&i| inside[i]).collect();
    if candidates.len() < regions {
        inside = vec![true; n];
        candidates = (0..n).collect();
    }
    let mut rng = SeededRng::new(seed);

    // well-spread sites keep every cell a reasonable size
    let mut min_d2 = (0.6 * (candidates.len() as f64 / regions as f64).cbrt()).powi(2);
    let sites: Vec<[f64; 3]> = loop {
        let mut sites: Vec<[f64; 3]> = Vec::with_capacity(regions);
        let mut attempts = 0;
        while sites.len() < regions && attempts < 400 * regions {
            attempts += 1;
            let p = coords(candidates[rng.below(candidates.len())], dims);
            if sites.iter().all(|s| dist2(*s, p) >= min_d2.max(1.0)) {
                sites.push(p);
            }
        }
        if sites.len() == regions {
            break sites;
        }
        if min_d2 <= 1.0 {
            // fall back to distinct voxels
            rng.shuffle(&mut candidates);
            break candidates[..regions].iter().map(|&i| coords(i, dims)).collect();
        }
        min_d2 *= 0.64;
    };

    let assign = |sites: &[[f64; 3]]| -> Vec<i32> {
        (0..n)
            .map(|i| if inside[i] { nearest(sites, coords(i, dims)) as i32 + 1 } else { 0 })
            .collect()
    };
    // a few Lloyd steps even out the cell sizes
    let mut sites = sites;
    for _ in 0..LLOYD_STEPS {
        let labels = assign(&sites);
        let mut sum = vec![[0.0; 3]; regions];
        let mut count = vec![0usize; regions];
        for (i, &l) in labels.iter().enumerate() {
            if l > 0 {
                let p = coords(i, dims);
                let r = l as usize - 1;
                (0..3).for_each(|a| sum[r][a] += p[a]);
                count[r] += 1;
            }
        }
        for r in 0..regions {
            if count[r] > 0 {
                sites[r] = sum[r].map(|v| v / count[r] as f64);
            }
        }
    }
    let mut labels = assign(&sites);
    // a centroid can drift so far that its cell empties; pin one voxel back
    for r in 1..=regions as i32 {
        if !labels.contains(&r) {
            let i = candidates[(r as usize * 7919) % candidates.len()];
            labels[i] = r;
        }
    }
    let atlas = AtlasVolume::new(dims, labels, regions)?;

    let mut order: Vec<usize> = (0..regions).collect();
    rng.shuffle(&mut order);
    let levels: Vec<f64> = order.iter().map(|&o| 0.3 + 0.7 * (o + 1) as f64 / regions as f64).collect();
    let mut phantom = Phantom {
        reference: Volume3D::zeros(dims),
        atlas,
        sites,
        levels,
        fills_grid: inside.iter().all(|&b| b),
    };
    phantom.reference = phantom.render(&AffineTransform::identity())?;
    Ok(phantom)
}

/// How category patterns are planted on the atlas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternSpec {
    pub categories: usize,
    /// regions active for every category, with a voxelwise texture shared by all
    pub shared_regions: usize,
    /// regions owned by exactly one category, uniformly active
    pub regions_per_category: usize,
    pub amplitude: f64,
    /// standard deviation of the shared texture, a smooth zero-mean field
    pub texture: f64,
    /// beta given to every inactive voxel, kept below zero
    pub inactive: f64,
}

impl Default for PatternSpec {
    fn default() -> Self {
        Self {
            categories: 3,
            shared_regions: 2,
            regions_per_category: 1,
            amplitude: 1.0,
            texture: 1.0,
            inactive: -1.0,
        }
    }
}

/// Planted standard-space betas and the regions behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedPatterns {
    pub betas: BetaMap,
    pub shared_regions: Vec<u32>,
    /// regions owned by each category, indexed by category - 1
    pub category_regions: Vec<Vec<u32>>,
}

impl PlantedPatterns {
    /// Voxels whose planted beta for category `n` is positive.
    pub fn active(&self, n: u32) -> Result<Vec<bool>> {
        Ok(self.betas.column(n)?.iter().map(|&b| b > 0.0).collect())
    }
}

pub fn plant_patterns(atlas: &AtlasVolume, spec: &PatternSpec, seed: u64) -> Result<PlantedPatterns> {
    let p = spec.categories;
    let e = atlas.region_count();
    let needed = spec.shared_regions + p * spec.regions_per_category;
    if p == 0 || needed > e {
        return Err(Error::Infeasible(format!(
            "{p} categories need {needed} regions, atlas has {e}"
        )));
    }
    if spec.inactive >= 0.0 {
        return Err(Error::Invalid("inactive beta must be negative".into()));
    }
    let mut rng = SeededRng::new(seed);
    let mut regions: Vec<u32> = (1..=e as u32).collect();
    rng.shuffle(&mut regions);
    let shared = regions[..spec.shared_regions].to_vec();
    let owned: Vec<Vec<u32>> = (0..p)
        .map(|c| {
            let start = spec.shared_regions + c * spec.regions_per_category;
            regions[start..start + spec.regions_per_category].to_vec()
        })
        .collect();

    let labels = atlas.labels();
    let texture = smooth_texture(atlas.dims(), spec.texture, &mut rng)?;
    let v = labels.len();
    let mut betas = vec![spec.inactive; v * p];
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let l = l as u32;
        for (c, own) in owned.iter().enumerate() {
            let b = if shared.contains(&l) {
                // exact zeros would be neither active nor inactive
                if texture[i] == 0.0 { spec.inactive } else { texture[i] }
            } else if own.contains(&l) {
                spec.amplitude
            } else {
                spec.inactive
            };
            betas[i * p + c] = b;
        }
    }
    Ok(PlantedPatterns {
        betas: BetaMap {
            session_id: "truth".into(),
            dims: atlas.dims(),
            category_count: p,
            betas,
        },
        shared_regions: shared,
        category_regions: owned,
    })
}

/// Zero-mean Gaussian field, smooth enough that its sign pattern survives
/// interpolation, rescaled to standard deviation `sd`.
fn smooth_texture(dims: [usize; 3], sd: f64, rng: &mut SeededRng) -> Result<Vec<f64>> {
    let n: usize = dims.iter().product();
    let white = Volume3D::new(dims, (0..n).map(|_| rng.normal()).collect())?;
    let field = smooth(&white, TEXTURE_SIGMA).into_voxels();
    let mean = field.iter().sum::<f64>() / n as f64;
    let std = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let scale = if std > 0.0 { sd / std } else { 0.0 };
    Ok(field.iter().map(|v| (v - mean) * scale).collect())
}

/// Block schedule: condition `k` belongs to category `((k - 1) mod P) + 1` and
/// lists every scan of its block. Blocks are separated by at least `min_gap`
/// rest scans and placed at random offsets.
pub fn make_schedule(
    session_id: &str,
    categories: usize,
    conditions: usize,
    scans: usize,
    block_len: usize,
    min_gap: usize,
    seed: u64,
) -> Result<StimulusSchedule> {
    if categories == 0 || conditions < categories || block_len == 0 {
        return Err(Error::Infeasible(format!(
            "{conditions} conditions of length {block_len} for {categories} categories"
        )));
    }
    let used = conditions * block_len + (conditions - 1) * min_gap;
    if used > scans {
        return Err(Error::Infeasible(format!(
            "{conditions} blocks of {block_len} scans with gaps of {min_gap} need {used} scans, have {scans}"
        )));
    }
    let slack = scans - used;
    let mut rng = SeededRng::new(seed);
    let mut offsets: Vec<usize> = (0..conditions).map(|_| rng.below(slack + 1)).collect();
    offsets.sort_unstable();
    let mut order: Vec<usize> = (0..conditions).collect();
    rng.shuffle(&mut order);
    let mut conds: Vec<Condition> = (0..conditions)
        .map(|c| Condition {
            id: c as u32 + 1,
            category: (c % categories) as u32 + 1,
            onsets: Vec::new(),
        })
        .collect();
    for (slot, &c) in order.iter().enumerate() {
        let start = offsets[slot] + slot * (block_len + min_gap);
        conds[c].onsets = (start..start + block_len).collect();
    }
    StimulusSchedule::new(session_id, categories, conds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Ar1 { rho: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSpec {
    pub session_id: String,
    pub conditions: usize,
    pub scans: usize,
    pub tr_ms: f64,
    pub block_len: usize,
    pub min_gap: usize,
    /// `‖D·Bᵀ‖_F / ‖noise‖_F`; `None` is noiseless
    pub snr: Option<f64>,
    pub noise: NoiseKind,
    /// maps native voxels onto the standard grid; registration should recover it
    pub transform: AffineTransform,
}

impl SessionSpec {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            conditions: 6,
            scans: 121,
            tr_ms: 2500.0,
            block_len: 6,
            min_gap: 4,
            snr: Some(5.0),
            noise: NoiseKind::White,
            transform: AffineTransform::identity(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSession {
    pub data: Volume4D,
    pub schedule: StimulusSchedule,
    /// true betas on the native grid
    pub betas: BetaMap,
    pub transform: AffineTransform,
    /// reference anatomy seen through the session's misalignment
    pub anatomy: Volume3D,
}

/// Pull a standard-space image into a session's native grid.
pub fn to_native(image: &Volume3D, transform: &AffineTransform) -> Result<Volume3D> {
    if *transform == AffineTransform::identity() {
        return Ok(image.clone());
    }
    transform.validate()?;
    let dims = image.dims();
    resample_map(image, &transform.to_map(dims, dims).inverse()?, dims)
}

pub fn make_session(phantom: &Phantom, patterns: &PlantedPatterns, spec: &SessionSpec, seed: u64) -> Result<SyntheticSession> {
    let p = patterns.betas.category_count;
    let dims = patterns.betas.dims;
    let v: usize = dims.iter().product();
    let schedule = make_schedule(
        &spec.session_id,
        p,
        spec.conditions,
        spec.scans,
        spec.block_len,
        spec.min_gap,
        derive_seed(seed, 0),
    )?;

    let mut native = vec![0.0; v * p];
    for n in 0..p {
        let col = to_native(&patterns.betas.column_volume(n as u32 + 1)?, &spec.transform)?;
        for (i, b) in col.voxels().iter().enumerate() {
            native[i * p + n] = *b;
        }
    }
    let betas = BetaMap {
        session_id: spec.session_id.clone(),
        dims,
        category_count: p,
        betas: native,
    };

    let hrf = canonical_hrf(spec.tr_ms, DEFAULT_HRF_DURATION_S)?;
    let design = build_design_matrix(&schedule, spec.scans, &hrf)?;
    let t_count = spec.scans;
    let mut voxels = vec![0.0; v * t_count];
    for t in 0..t_count {
        let row = &mut voxels[t * v..(t + 1) * v];
        for n in 0..p {
            let d = design.values[(t, n)];
            if d == 0.0 {
                continue;
            }
            for (i, out) in row.iter_mut().enumerate() {
                *out += d * betas.betas[i * p + n];
            }
        }
    }

    if let Some(snr) = spec.snr {
        if !(snr > 0.0) || !snr.is_finite() {
            return Err(Error::Invalid(format!("snr must be positive and finite, got {snr}")));
        }
        let mut rng = SeededRng::new(derive_seed(seed, 1));
        let mut noise = vec![0.0; v * t_count];
        match spec.noise {
            NoiseKind::White => noise.iter_mut().for_each(|z| *z = rng.normal()),
            NoiseKind::Ar1 { rho } => {
                if !(rho.abs() < 1.0) {
                    return Err(Error::Invalid(format!("AR(1) coefficient {rho} must lie in (-1, 1)")));
                }
                let innov = (1.0 - rho * rho).sqrt();
                for i in 0..v {
                    let mut prev = rng.normal();
                    noise[i] = prev;
                    for t in 1..t_count {
                        prev = rho * prev + innov * rng.normal();
                        noise[t * v + i] = prev;
                    }
                }
            }
        }
        let signal_norm = voxels.iter().map(|x| x * x).sum::<f64>().sqrt();
        let noise_norm = noise.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = signal_norm / (snr * noise_norm);
        voxels.iter_mut().zip(&noise).for_each(|(x, z)| *x += scale * z);
    }

    Ok(SyntheticSession {
        data: Volume4D::new([dims[0], dims[1], dims[2], t_count], spec.tr_ms, voxels)?,
        schedule,
        betas,
        transform: spec.transform,
        anatomy: phantom.render(&spec.transform)?,
    })
}

/// Random misalignment with translations up to `max_shift` voxels and
/// rotations up to `max_angle` radians on every axis.
pub fn random_transform(max_shift: f64, max_angle: f64, rng: &mut SeededRng) -> AffineTransform {
    let mut t = AffineTransform::identity();
    for a in 0..3 {
        t.translation[a] = rng.uniform_range(-max_shift, max_shift);
    }
    for a in 0..3 {
        t.rotation[a] = rng.uniform_range(-max_angle, max_angle);
    }
    t
}

/// A phantom rendered under a known misalignment.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationCase {
    pub moving: Volume3D,
    pub reference: Volume3D,
    /// maps the moving grid onto the reference
    pub planted: AffineTransform,
}

/// Phantom size and misalignment range of the registration benchmark.
pub const REGISTRATION_DIMS: [usize; 3] = [32, 32, 32];
pub const REGISTRATION_REGIONS: usize = 12;
pub const REGISTRATION_MAX_SHIFT: f64 = 5.0;
pub const REGISTRATION_MAX_ANGLE: f64 = 0.2;

/// Benchmark case `trial` of the suite seeded by `seed`.
pub fn registration_case(seed: u64, trial: u64) -> Result<RegistrationCase> {
    let case_seed = derive_seed(seed, trial);
    let phantom = make_phantom(REGISTRATION_DIMS, REGISTRATION_REGIONS, derive_seed(case_seed, 0))?;
    let mut rng = SeededRng::new(derive_seed(case_seed, 1));
    let planted = random_transform(REGISTRATION_MAX_SHIFT, REGISTRATION_MAX_ANGLE, &mut rng);
    Ok(RegistrationCase {
        moving: phantom.render(&planted)?,
        reference: phantom.reference,
        planted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassificationSpec {
    pub features: usize,
    /// instances per class; class `i` gets label `i + 1`
    pub counts: Vec<usize>,
    /// distance of every class centre from the origin, in noise units
    pub separation: f64,
    /// subjects instances are dealt to, round robin
    pub subjects: usize,
}

/// Unit-variance Gaussian clusters centred at `separation · u_c` for random
/// unit directions `u_c`, so class boundaries are oblique to every axis.
pub fn make_classification_set(spec: &ClassificationSpec, seed: u64) -> Result<FeatureMatrix> {
    if spec.counts.len() < 2 || spec.features == 0 {
        return Err(Error::Invalid("need at least 2 classes and 1 feature".into()));
    }
    let mut rng = SeededRng::new(seed);
    let centres: Vec<Vec<f64>> = spec
        .counts
        .iter()
        .map(|_| {
            let u: Vec<f64> = (0..spec.features).map(|_| rng.normal()).collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            u.iter().map(|x| spec.separation * x / norm).collect()
        })
        .collect();
    let mut columns = Vec::new();
    let mut labels = Vec::new();
    let mut sessions = Vec::new();
    let subjects = spec.subjects.max(1);
    for (c, &count) in spec.counts.iter().enumerate() {
        for _ in 0..count {
            columns.push(centres[c].iter().map(|m| m + rng.normal()).collect());
            labels.push(c as u32 + 1);
            sessions.push(format!("sub-{:02}", columns.len() % subjects + 1));
        }
    }
    let region_ids = (1..=spec.features).map(|e| e.to_string()).collect();
    FeatureMatrix::new(region_ids, columns, labels, sessions)
}

// ---------------------------------------------------------------------------
// Multi-session studies and on-disk presets

/// Several subjects scanned on one phantom, each run misaligned by its own
/// random transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    pub dims: [usize; 3],
    pub regions: usize,
    pub subjects: usize,
    pub runs: usize,
    pub patterns: PatternSpec,
    pub conditions: usize,
    pub scans: usize,
    pub snr: Option<f64>,
    pub noise: NoiseKind,
    pub max_shift: f64,
    pub max_angle: f64,
}

impl Default for StudySpec {
    fn default() -> Self {
        Self {
            dims: [16, 16, 16],
            regions: 10,
            subjects: 4,
            runs: 2,
            patterns: PatternSpec::default(),
            conditions: 6,
            scans: 121,
            snr: Some(5.0),
            noise: NoiseKind::White,
            max_shift: 1.5,
            max_angle: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStudy {
    pub phantom: Phantom,
    pub patterns: PlantedPatterns,
    pub sessions: Vec<SyntheticSession>,
}

pub fn session_id(subject: usize, run: usize) -> String {
    format!("sub-{:02}_run-{}", subject + 1, run + 1)
}

pub fn make_study(spec: &StudySpec, seed: u64) -> Result<SyntheticStudy> {
    if spec.subjects == 0 || spec.runs == 0 {
        return Err(Error::Invalid("a study needs at least one subject and one run".into()));
    }
    let phantom = make_phantom(spec.dims, spec.regions, derive_seed(seed, 0))?;
    let patterns = plant_patterns(&phantom.atlas, &spec.patterns, derive_seed(seed, 1))?;
    let sessions = (0..spec.subjects * spec.runs)
        .into_par_iter()
        .map(|i| {
            let session_seed = derive_seed(seed, 2 + i as u64);
            let mut rng = SeededRng::new(derive_seed(session_seed, 2));
            let mut s = SessionSpec::new(session_id(i / spec.runs, i % spec.runs));
            s.conditions = spec.conditions;
            s.scans = spec.scans;
            s.snr = spec.snr;
            s.noise = spec.noise;
            s.transform = random_transform(spec.max_shift, spec.max_angle, &mut rng);
            make_session(&phantom, &patterns, &s, session_seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticStudy {
        phantom,
        patterns,
        sessions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Glm,
    Register,
    Classify,
    Full,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Glm, Preset::Register, Preset::Classify, Preset::Full];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Glm => "glm",
            Preset::Register => "register",
            Preset::Classify => "classify",
            Preset::Full => "full",
        }
    }

    /// The study behind the session-based presets.
    pub fn study(self) -> Option<StudySpec> {
        match self {
            Preset::Glm => Some(StudySpec {
                subjects: 1,
                runs: 1,
                max_shift: 0.0,
                max_angle: 0.0,
                ..StudySpec::default()
            }),
            Preset::Full => Some(StudySpec::default()),
            Preset::Register | Preset::Classify => None,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown preset {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTruth {
    pub id: String,
    /// maps native voxels onto the standard grid
    pub transform: AffineTransform,
    /// true native-space betas, one volume per category
    pub betas: Vec<PathBuf>,
}

/// Ground truth written next to a preset. Paths are relative to the output
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub preset: Preset,
    pub seed: u64,
    pub rng_algorithm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<StudySpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sessions: Vec<SessionTruth>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shared_regions: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub category_regions: Vec<Vec<u32>>,
    /// standard-space masks of voxels with a positive planted beta, per category
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub active_masks: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_transform: Option<AffineTransform>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationSpec>,
    /// every file written, relative to the output directory
    pub files: Vec<PathBuf>,
}

/// Instances per class of the classify preset.
pub const CLASSIFY_COUNTS: [usize; 3] = [60, 40, 20];

/// Collects the relative paths of written files.
struct Listing<'a> {
    out: &'a Path,
    files: Vec<PathBuf>,
}

impl Listing<'_> {
    fn file(&mut self, rel: impl Into<PathBuf>) -> PathBuf {
        let rel = rel.into();
        self.files.push(rel.clone());
        self.out.join(rel)
    }

    /// A header whose raw payload sits next to it.
    fn volume(&mut self, rel: impl Into<PathBuf>) -> PathBuf {
        let rel = rel.into();
        self.files.push(crate::data::payload_path(&rel));
        self.file(rel)
    }
}

fn study_truth(preset: Preset, spec: &StudySpec, study: &SyntheticStudy, seed: u64, out: &Path) -> Result<Truth> {
    let mut list = Listing { out, files: Vec::new() };
    save_atlas(&list.volume("atlas.atlas.json"), &study.phantom.atlas)?;
    save_volume3d(&list.volume("reference.vol.json"), &study.phantom.reference)?;

    let p = study.patterns.betas.category_count;
    let mut entries = Vec::new();
    let mut sessions = Vec::new();
    for s in &study.sessions {
        let id = s.schedule.session_id.clone();
        let data = PathBuf::from(format!("{id}.vol.json"));
        let onsets = PathBuf::from(format!("{id}.onsets.tsv"));
        let anatomy = PathBuf::from(format!("{id}.anat.vol.json"));
        save_volume4d(&list.volume(&data), &s.data)?;
        save_schedule(&list.file(&onsets), &s.schedule)?;
        save_volume3d(&list.volume(&anatomy), &s.anatomy)?;
        let mut betas = Vec::with_capacity(p);
        for n in 1..=p as u32 {
            let rel = PathBuf::from(format!("truth/{id}.beta-{n}.vol.json"));
            save_volume3d(&list.volume(&rel), &s.betas.column_volume(n)?)?;
            betas.push(rel);
        }
        entries.push(SessionEntry {
            id: id.clone(),
            data,
            onsets,
            anatomy: Some(anatomy),
        });
        sessions.push(SessionTruth {
            id,
            transform: s.transform,
            betas,
        });
    }
    save_json(&list.file("sessions.json"), &SessionManifest { sessions: entries })?;

    let dims = study.phantom.atlas.dims();
    let mut active_masks = Vec::with_capacity(p);
    for n in 1..=p as u32 {
        let mask: Vec<f64> = study.patterns.active(n)?.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
        let rel = PathBuf::from(format!("truth/active-{n}.vol.json"));
        save_volume3d(&list.volume(&rel), &Volume3D::new(dims, mask)?)?;
        active_masks.push(rel);
    }
    Ok(Truth {
        active_masks,
        sessions,
        shared_regions: study.patterns.shared_regions.clone(),
        category_regions: study.patterns.category_regions.clone(),
        study: Some(spec.clone()),
        files: list.files,
        ..Truth::bare(preset, seed)
    })
}

impl Truth {
    fn bare(preset: Preset, seed: u64) -> Self {
        Truth {
            preset,
            seed,
            rng_algorithm: RNG_ALGORITHM.into(),
            study: None,
            sessions: Vec::new(),
            shared_regions: Vec::new(),
            category_regions: Vec::new(),
            active_masks: Vec::new(),
            planted_transform: None,
            classification: None,
            files: Vec::new(),
        }
    }
}

/// Write a complete mini-dataset plus `truth.json` into `out`.
pub fn write_preset(preset: Preset, seed: u64, out: &Path) -> Result<Truth> {
    let mut truth = match preset {
        Preset::Glm | Preset::Full => {
            let spec = preset.study().expect("session preset");
            let study = make_study(&spec, seed)?;
            study_truth(preset, &spec, &study, seed, out)?
        }
        Preset::Register => {
            let case = registration_case(seed, 0)?;
            let mut list = Listing { out, files: Vec::new() };
            save_volume3d(&list.volume("reference.vol.json"), &case.reference)?;
            save_volume3d(&list.volume("moving.vol.json"), &case.moving)?;
            Truth {
                planted_transform: Some(case.planted),
                files: list.files,
                ..Truth::bare(preset, seed)
            }
        }
        Preset::Classify => {
            let spec = ClassificationSpec {
                features: 10,
                counts: CLASSIFY_COUNTS.to_vec(),
                separation: 3.0,
                subjects: 4,
            };
            let mut list = Listing { out, files: Vec::new() };
            save_features(&list.file("classify.features.csv"), &make_classification_set(&spec, seed)?)?;
            Truth {
                classification: Some(spec),
                files: list.files,
                ..Truth::bare(preset, seed)
            }
        }
    };
    truth.files.push("truth.json".into());
    save_json(&out.join("truth.json"), &truth)?;
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_regions_all_present_and_sized() {
        for seed in 0..100 {
            let ph = make_phantom([16, 16, 16], 8, seed).unwrap();
            for r in 1..=8 {
                let size = ph.atlas.region_voxels(r).len();
                assert!(size as f64 >= 0.01 * 4096.0, "seed {seed} region {r} has {size} voxels");
            }
        }
    }

    #[test]
    fn phantom_is_deterministic() {
        let a = make_phantom([12, 10, 8], 5, 3).unwrap();
        assert_eq!(a, make_phantom([12, 10, 8], 5, 3).unwrap());
        assert_ne!(a.atlas, make_phantom([12, 10, 8], 5, 4).unwrap().atlas);
        assert!(make_phantom([2, 2, 1], 5, 0).is_err());
        assert!(make_phantom([2, 2, 2], 8, 0).is_ok());
    }

    #[test]
    fn smoothing_preserves_constant_interior_mass() {
        let v = Volume3D::new([9, 9, 9], vec![1.0; 729]).unwrap();
        let s = smooth(&v, 0.8);
        assert!((s.get(4, 4, 4) - 1.0).abs() < 1e-12);
        assert!(s.get(0, 0, 0) < 1.0);
    }

    #[test]
    fn schedules_are_valid_blocks() {
        for seed in 0..50 {
            let s = make_schedule("s", 3, 6, 121, 6, 4, seed).unwrap();
            s.validate(121).unwrap();
            let mut all: Vec<usize> = s.conditions.iter().flat_map(|c| c.onsets.clone()).collect();
            let n = all.len();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), n, "blocks overlap");
            for c in &s.conditions {
                assert_eq!(c.category, (c.id - 1) % 3 + 1);
                assert!(c.onsets.windows(2).all(|w| w[1] == w[0] + 1));
            }
        }
        assert!(make_schedule("s", 3, 20, 121, 6, 4, 0).is_err());
    }

    #[test]
    fn planted_patterns_layout() {
        let ph = make_phantom([16, 16, 16], 8, 1).unwrap();
        let pat = plant_patterns(&ph.atlas, &PatternSpec::default(), 2).unwrap();
        assert_eq!(pat.category_regions.len(), 3);
        let labels = ph.atlas.labels();
        for n in 1..=3u32 {
            let own = &pat.category_regions[n as usize - 1];
            let col = pat.betas.column(n).unwrap();
            for (i, &l) in labels.iter().enumerate() {
                if own.contains(&(l as u32)) {
                    assert_eq!(col[i], 1.0);
                } else if l == 0 || !pat.shared_regions.contains(&(l as u32)) {
                    assert_eq!(col[i], -1.0);
                }
            }
        }
        let too_many = PatternSpec {
            categories: 7,
            ..PatternSpec::default()
        };
        assert!(plant_patterns(&ph.atlas, &too_many, 2).is_err());
    }

    #[test]
    fn session_snr_is_exact() {
        let ph = make_phantom([8, 8, 8], 6, 1).unwrap();
        let pat = plant_patterns(&ph.atlas, &PatternSpec::default(), 2).unwrap();
        let mut spec = SessionSpec::new("sub-01_run-1");
        spec.snr = None;
        let clean = make_session(&ph, &pat, &spec, 9).unwrap();
        spec.snr = Some(4.0);
        let noisy = make_session(&ph, &pat, &spec, 9).unwrap();
        assert_eq!(clean.schedule, noisy.schedule);
        let s: f64 = clean.data.voxels().iter().map(|x| x * x).sum::<f64>().sqrt();
        let z: f64 = clean
            .data
            .voxels()
            .iter()
            .zip(noisy.data.voxels())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((s / z - 4.0).abs() < 1e-9);
        spec.noise = NoiseKind::Ar1 { rho: 0.4 };
        assert!(make_session(&ph, &pat, &spec, 9).is_ok());
    }

    #[test]
    fn study_sessions_are_named_by_subject() {
        let spec = StudySpec {
            dims: [8, 8, 8],
            regions: 6,
            subjects: 2,
            runs: 2,
            scans: 80,
            ..StudySpec::default()
        };
        let study = make_study(&spec, 3).unwrap();
        let ids: Vec<&str> = study.sessions.iter().map(|s| s.schedule.session_id.as_str()).collect();
        assert_eq!(ids, ["sub-01_run-1", "sub-01_run-2", "sub-02_run-1", "sub-02_run-2"]);
        assert_ne!(study.sessions[0].transform, study.sessions[1].transform);
        assert_eq!(study, make_study(&spec, 3).unwrap());
    }

    #[test]
    fn presets_write_every_listed_file() {
        for preset in Preset::ALL {
            let dir = tempfile::tempdir().unwrap();
            let truth = write_preset(preset, 1, dir.path()).unwrap();
            for f in &truth.files {
                assert!(dir.path().join(f).is_file(), "{preset}: missing {}", f.display());
            }
            assert_eq!(preset.name().parse::<Preset>().unwrap(), preset);
        }
    }

    #[test]
    fn classification_set_shape() {
        let spec = ClassificationSpec {
            features: 10,
            counts: vec![180, 20],
            separation: 3.0,
            subjects: 4,
        };
        let fm = make_classification_set(&spec, 5).unwrap();
        assert_eq!(fm.len(), 200);
        assert_eq!(fm.feature_count(), 10);
        assert_eq!(fm.labels.iter().filter(|&&l| l == 2).count(), 20);
        assert_eq!(fm, make_classification_set(&spec, 5).unwrap());
    }
}
