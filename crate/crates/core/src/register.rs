//! Affine registration of condition images onto a reference grid.
//!
//! A transform carries 12 parameters (translation, rotation, scale, shear)
//! and acts about the grid centres: `y = c_out + t + R·Sh·Sc·(x - c_in)`,
//! with `R = Rz·Ry·Rx` and `Sh` upper unit-triangular. Resampling pulls: each
//! output voxel reads the input at the inverse-mapped position with
//! trilinear interpolation, zero outside the input grid.
//!
//! The optimiser is derivative-free coordinate ascent. On each pyramid level
//! (block averages by 4, 2, 1) it sweeps the parameters, doing for each a
//! coarse 9-point scan of a bracket around the current value followed by a
//! golden-section refinement of the best cell. Coarse levels move only the
//! rigid parameters; the coarsest one starts from the best of a small
//! rotation grid with centroids matched. Rotation, scale and shear are
//! searched about the moving image's intensity centroid, with translation
//! compensating, so they do not drag the whole object.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::data::Volume3D;
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 64;
pub const MIN_BINS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    /// voxel units
    pub translation: [f64; 3],
    /// radians about x, y, z
    pub rotation: [f64; 3],
    pub scale: [f64; 3],
    /// xy, xz, yz
    pub shear: [f64; 3],
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub const fn identity() -> Self {
        Self {
            translation: [0.0; 3],
            rotation: [0.0; 3],
            scale: [1.0; 3],
            shear: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    pub fn params(&self) -> [f64; 12] {
        let mut p = [0.0; 12];
        p[0..3].copy_from_slice(&self.translation);
        p[3..6].copy_from_slice(&self.rotation);
        p[6..9].copy_from_slice(&self.scale);
        p[9..12].copy_from_slice(&self.shear);
        p
    }

    pub fn from_params(p: &[f64; 12]) -> Self {
        Self {
            translation: [p[0], p[1], p[2]],
            rotation: [p[3], p[4], p[5]],
            scale: [p[6], p[7], p[8]],
            shear: [p[9], p[10], p[11]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.params().iter().any(|v| !v.is_finite()) || self.scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::SingularTransform);
        }
        Ok(())
    }

    /// `R·Sh·Sc`
    pub fn linear(&self) -> Matrix3<f64> {
        let [rx, ry, rz] = self.rotation;
        let (sx, cx) = rx.sin_cos();
        let (sy, cy) = ry.sin_cos();
        let (sz, cz) = rz.sin_cos();
        let mx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
        let my = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
        let mz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
        let [hxy, hxz, hyz] = self.shear;
        let sh = Matrix3::new(1.0, hxy, hxz, 0.0, 1.0, hyz, 0.0, 0.0, 1.0);
        let sc = Matrix3::from_diagonal(&Vector3::from(self.scale));
        mz * my * mx * sh * sc
    }

    /// Point map between grids of the given dims (centred on each grid).
    pub fn to_map(&self, in_dims: [usize; 3], out_dims: [usize; 3]) -> AffineMap {
        self.map_about(grid_center(in_dims), grid_center(out_dims), 1.0)
    }

    fn map_about(&self, c_in: Vector3<f64>, c_out: Vector3<f64>, translation_scale: f64) -> AffineMap {
        let a = self.linear();
        let t = Vector3::from(self.translation) * translation_scale;
        AffineMap {
            linear: a,
            offset: c_out + t - a * c_in,
        }
    }
}

pub fn grid_center(dims: [usize; 3]) -> Vector3<f64> {
    Vector3::new(
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    )
}

/// `y = linear · x + offset` in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap {
    pub linear: Matrix3<f64>,
    pub offset: Vector3<f64>,
}

impl AffineMap {
    pub fn identity() -> Self {
        Self {
            linear: Matrix3::identity(),
            offset: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: Vector3<f64>) -> Vector3<f64> {
        self.linear * x + self.offset
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.linear.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::SingularTransform);
        }
        let inv = self.linear.try_inverse().ok_or(Error::SingularTransform)?;
        Ok(Self {
            linear: inv,
            offset: -(inv * self.offset),
        })
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &AffineMap) -> AffineMap {
        AffineMap {
            linear: self.linear * other.linear,
            offset: self.linear * other.offset + self.offset,
        }
    }
}

#[inline]
fn trilinear(img: &[f64], dims: [usize; 3], p: Vector3<f64>) -> f64 {
    const EPS: f64 = 1e-9;
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for axis in 0..3 {
        let n = dims[axis];
        let x = p[axis];
        if x < -EPS || x > (n - 1) as f64 + EPS {
            return 0.0;
        }
        if n == 1 {
            base[axis] = 0;
            frac[axis] = 0.0;
            continue;
        }
        let x = x.clamp(0.0, (n - 1) as f64);
        let i = (x.floor() as usize).min(n - 2);
        base[axis] = i;
        frac[axis] = x - i as f64;
    }
    let (nx, nxy) = (dims[0], dims[0] * dims[1]);
    let sx = if dims[0] > 1 { 1 } else { 0 };
    let sy = if dims[1] > 1 { nx } else { 0 };
    let sz = if dims[2] > 1 { nxy } else { 0 };
    let i0 = base[0] + nx * base[1] + nxy * base[2];
    let [fx, fy, fz] = frac;
    let c00 = img[i0] * (1.0 - fx) + img[i0 + sx] * fx;
    let c10 = img[i0 + sy] * (1.0 - fx) + img[i0 + sy + sx] * fx;
    let c01 = img[i0 + sz] * (1.0 - fx) + img[i0 + sz + sx] * fx;
    let c11 = img[i0 + sz + sy] * (1.0 - fx) + img[i0 + sz + sy + sx] * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    c0 * (1.0 - fz) + c1 * fz
}

/// Pull-resample `src` through the point map (input -> output coordinates).
pub fn resample_map_into(src: &[f64], in_dims: [usize; 3], map: &AffineMap, out_dims: [usize; 3], out: &mut [f64]) -> Result<()> {
    let inv = map.inverse()?;
    let col_x = inv.linear.column(0).into_owned();
    let col_y = inv.linear.column(1).into_owned();
    let col_z = inv.linear.column(2).into_owned();
    let mut idx = 0;
    for z in 0..out_dims[2] {
        let pz = inv.offset + col_z * z as f64;
        for y in 0..out_dims[1] {
            let mut p = pz + col_y * y as f64;
            for _ in 0..out_dims[0] {
                out[idx] = trilinear(src, in_dims, p);
                p += col_x;
                idx += 1;
            }
        }
    }
    Ok(())
}

pub fn resample_map(image: &Volume3D, map: &AffineMap, out_dims: [usize; 3]) -> Result<Volume3D> {
    let mut out = vec![0.0; out_dims.iter().product()];
    resample_map_into(image.voxels(), image.dims(), map, out_dims, &mut out)?;
    Volume3D::new(out_dims, out)
}

pub fn resample(image: &Volume3D, transform: &AffineTransform, out_dims: [usize; 3]) -> Result<Volume3D> {
    transform.validate()?;
    resample_map(image, &transform.to_map(image.dims(), out_dims), out_dims)
}

// ---------------------------------------------------------------------------
// Similarity

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Nmi,
    Mi,
    Je,
    Cr,
    Woods,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [MetricKind::Nmi, MetricKind::Mi, MetricKind::Je, MetricKind::Cr, MetricKind::Woods];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Nmi => "nmi",
            MetricKind::Mi => "mi",
            MetricKind::Je => "je",
            MetricKind::Cr => "cr",
            MetricKind::Woods => "woods",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Invalid(format!("unknown metric {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMetric {
    pub kind: MetricKind,
    pub bins: usize,
}

impl SimilarityMetric {
    pub fn new(kind: MetricKind, bins: usize) -> Result<Self> {
        if bins < MIN_BINS {
            return Err(Error::Invalid(format!("at least {MIN_BINS} histogram bins required, got {bins}")));
        }
        Ok(Self { kind, bins })
    }
}

impl From<MetricKind> for SimilarityMetric {
    fn from(kind: MetricKind) -> Self {
        Self { kind, bins: DEFAULT_BINS }
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn is_constant(values: &[f64]) -> bool {
    let (lo, hi) = min_max(values);
    !(hi > lo)
}

#[inline]
fn bin_of(v: f64, lo: f64, scale: f64, bins: usize) -> usize {
    (((v - lo) * scale) as usize).min(bins - 1)
}

fn bin_all(values: &[f64], bins: usize) -> Vec<u16> {
    let (lo, hi) = min_max(values);
    let scale = if hi > lo { bins as f64 / (hi - lo) } else { 0.0 };
    values.iter().map(|&v| bin_of(v, lo, scale, bins) as u16).collect()
}

fn entropy_bits(counts: &[f64], total: f64) -> f64 {
    let mut h = 0.0;
    for &c in counts {
        if c > 0.0 {
            let p = c / total;
            h -= p * p.ln();
        }
    }
    h / std::f64::consts::LN_2
}

/// Fixed image, binned once.
struct PreparedImage {
    values: Vec<f64>,
    bins: Vec<u16>,
}

impl PreparedImage {
    fn new(values: Vec<f64>, nbins: usize) -> Self {
        let bins = bin_all(&values, nbins);
        Self { values, bins }
    }
}

/// Scratch buffers reused across objective evaluations.
struct Scratch {
    joint: Vec<f64>,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    count: Vec<f64>,
}

impl Scratch {
    fn new(bins: usize) -> Self {
        Self {
            joint: vec![0.0; bins * bins],
            sum: vec![0.0; bins],
            sumsq: vec![0.0; bins],
            count: vec![0.0; bins],
        }
    }
}

/// Score of `a` against prepared `b`; CR and Woods bin on `a` and measure
/// the spread of `b` inside each bin.
fn score_prepared(a: &[f64], b: &PreparedImage, metric: SimilarityMetric, scratch: &mut Scratch) -> f64 {
    let nb = metric.bins;
    let (lo, hi) = min_max(a);
    let scale = if hi > lo { nb as f64 / (hi - lo) } else { 0.0 };
    let n = a.len() as f64;
    match metric.kind {
        MetricKind::Nmi | MetricKind::Mi | MetricKind::Je => {
            let joint = &mut scratch.joint;
            joint.iter_mut().for_each(|c| *c = 0.0);
            for (&va, &bb) in a.iter().zip(&b.bins) {
                joint[bin_of(va, lo, scale, nb) * nb + bb as usize] += 1.0;
            }
            let mut ma = vec![0.0; nb];
            let mut mb = vec![0.0; nb];
            for i in 0..nb {
                for j in 0..nb {
                    let c = joint[i * nb + j];
                    ma[i] += c;
                    mb[j] += c;
                }
            }
            let hab = entropy_bits(joint, n);
            let ha = entropy_bits(&ma, n);
            let hb = entropy_bits(&mb, n);
            match metric.kind {
                MetricKind::Nmi => {
                    if hab > 0.0 {
                        (ha + hb) / hab
                    } else {
                        1.0
                    }
                }
                MetricKind::Mi => ha + hb - hab,
                _ => -hab,
            }
        }
        MetricKind::Cr | MetricKind::Woods => {
            scratch.sum.iter_mut().for_each(|c| *c = 0.0);
            scratch.sumsq.iter_mut().for_each(|c| *c = 0.0);
            scratch.count.iter_mut().for_each(|c| *c = 0.0);
            for (&va, &vb) in a.iter().zip(&b.values) {
                let k = bin_of(va, lo, scale, nb);
                scratch.count[k] += 1.0;
                scratch.sum[k] += vb;
                scratch.sumsq[k] += vb * vb;
            }
            if metric.kind == MetricKind::Cr {
                let total: f64 = scratch.sum.iter().sum();
                let total_sq: f64 = scratch.sumsq.iter().sum();
                let var = (total_sq / n - (total / n).powi(2)).max(0.0);
                if var <= 0.0 {
                    return 0.0;
                }
                let mut within = 0.0;
                for k in 0..nb {
                    let c = scratch.count[k];
                    if c > 0.0 {
                        let m = scratch.sum[k] / c;
                        within += (scratch.sumsq[k] - c * m * m).max(0.0);
                    }
                }
                1.0 - within / (n * var)
            } else {
                let (blo, bhi) = min_max(&b.values);
                let floor = 1e-12 * blo.abs().max(bhi.abs());
                let mut cost = 0.0;
                for k in 0..nb {
                    let c = scratch.count[k];
                    if c > 0.0 {
                        let m = scratch.sum[k] / c;
                        if m.abs() <= floor {
                            continue;
                        }
                        let sd = (scratch.sumsq[k] / c - m * m).max(0.0).sqrt();
                        cost += (c / n) * sd / m.abs();
                    }
                }
                -cost
            }
        }
    }
}

fn check_metric_inputs(a: &[f64], b: &[f64], kind: MetricKind) -> Result<()> {
    if matches!(kind, MetricKind::Cr | MetricKind::Woods) && is_constant(b) {
        return Err(Error::ConstantImage(kind.name()));
    }
    if a.is_empty() {
        return Err(Error::Invalid("empty image".into()));
    }
    Ok(())
}

/// Similarity of two images on the same grid; larger is better for every
/// metric. Entropies are in bits over a joint histogram of min-max
/// normalised intensities.
pub fn similarity(a: &Volume3D, b: &Volume3D, metric: SimilarityMetric) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    SimilarityMetric::new(metric.kind, metric.bins)?;
    check_metric_inputs(a.voxels(), b.voxels(), metric.kind)?;
    let prepared = PreparedImage::new(b.voxels().to_vec(), metric.bins);
    let mut scratch = Scratch::new(metric.bins);
    Ok(score_prepared(a.voxels(), &prepared, metric, &mut scratch))
}

// ---------------------------------------------------------------------------
// Optimiser

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub metric: SimilarityMetric,
    /// downsampling factors, coarse to fine
    pub levels: Vec<usize>,
    pub max_sweeps: usize,
    pub tolerance: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            metric: MetricKind::Nmi.into(),
            levels: vec![4, 2, 1],
            max_sweeps: 20,
            tolerance: 1e-4,
        }
    }
}

impl RegistrationConfig {
    pub fn with_metric(kind: MetricKind) -> Self {
        Self {
            metric: kind.into(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub transform: AffineTransform,
    pub score: f64,
    pub identity_score: f64,
    /// false when nothing beat the identity; the transform is then identity
    pub improved: bool,
    pub evaluations: usize,
}

/// Coarsest levels must keep at least this many voxels along every axis.
const MIN_LEVEL_EXTENT: usize = 8;
const SCAN_POINTS: usize = 9;

/// Bracket half-widths at the coarsest level, in full-resolution units.
const HALF_WIDTH: [f64; 12] = [
    6.0, 6.0, 6.0, 0.25, 0.25, 0.25, 0.12, 0.12, 0.12, 0.08, 0.08, 0.08,
];
const LOWER: [f64; 12] = [
    f64::NEG_INFINITY,
    f64::NEG_INFINITY,
    f64::NEG_INFINITY,
    -std::f64::consts::PI,
    -std::f64::consts::PI,
    -std::f64::consts::PI,
    0.5,
    0.5,
    0.5,
    -0.5,
    -0.5,
    -0.5,
];
const UPPER: [f64; 12] = [
    f64::INFINITY,
    f64::INFINITY,
    f64::INFINITY,
    std::f64::consts::PI,
    std::f64::consts::PI,
    std::f64::consts::PI,
    2.0,
    2.0,
    2.0,
    0.5,
    0.5,
    0.5,
];

/// Block-average downsampling by `f` (partial edge blocks averaged over
/// what they contain).
pub fn downsample(image: &Volume3D, f: usize) -> Volume3D {
    if f <= 1 {
        return image.clone();
    }
    let d = image.dims();
    let od = [d[0].div_ceil(f), d[1].div_ceil(f), d[2].div_ceil(f)];
    let mut sum = vec![0.0; od.iter().product()];
    let mut cnt = vec![0.0; sum.len()];
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let o = x / f + od[0] * (y / f + od[1] * (z / f));
                sum[o] += image.get(x, y, z);
                cnt[o] += 1.0;
            }
        }
    }
    let vox = sum.iter().zip(&cnt).map(|(s, c)| s / c).collect();
    Volume3D::new(od, vox).expect("finite averages")
}

struct LevelProblem<'a> {
    moving: Vec<f64>,
    moving_dims: [usize; 3],
    reference: PreparedImage,
    reference_dims: [usize; 3],
    c_in: Vector3<f64>,
    c_out: Vector3<f64>,
    factor: f64,
    metric: SimilarityMetric,
    scratch: Scratch,
    buffer: Vec<f64>,
    /// intensity centroid of the moving image, level coordinates
    pivot: Option<Vector3<f64>>,
    evaluations: &'a mut usize,
}

impl LevelProblem<'_> {
    fn evaluate(&mut self, params: &[f64; 12]) -> f64 {
        *self.evaluations += 1;
        let t = AffineTransform::from_params(params);
        let map = t.map_about(self.c_in, self.c_out, 1.0 / self.factor);
        if resample_map_into(&self.moving, self.moving_dims, &map, self.reference_dims, &mut self.buffer).is_err() {
            return f64::NEG_INFINITY;
        }
        score_prepared(&self.buffer, &self.reference, self.metric, &mut self.scratch)
    }
}

fn level_center(dims_full: [usize; 3], f: usize) -> Vector3<f64> {
    let c = grid_center(dims_full);
    let shift = (f as f64 - 1.0) / 2.0;
    (c - Vector3::repeat(shift)) / f as f64
}

/// Maximise over one coordinate. Returns the accepted value and score.
fn line_search(problem: &mut LevelProblem<'_>, params: &mut [f64; 12], i: usize, half_width: f64, current: f64, tol: f64) -> f64 {
    let base = *params;
    let x0 = params[i];
    let lo = (x0 - half_width).max(LOWER[i]);
    let hi = (x0 + half_width).min(UPPER[i]);
    let mut best_x = x0;
    let mut best = current;
    // non-translation moves pivot about the moving centroid, whose image
    // stays put; this keeps them from dragging the whole object around
    let pivot = problem.pivot.filter(|_| i >= 3).map(|cm| {
        let t = AffineTransform::from_params(&base);
        let fixed = problem.c_out + Vector3::from(t.translation) / problem.factor + t.linear() * (cm - problem.c_in);
        (cm, fixed)
    });
    let (c_in, c_out, factor) = (problem.c_in, problem.c_out, problem.factor);
    let set = move |x: f64, params: &mut [f64; 12]| {
        params[i] = x;
        if let Some((cm, fixed)) = pivot {
            let a = AffineTransform::from_params(params).linear();
            let t = (fixed - c_out - a * (cm - c_in)) * factor;
            params[..3].copy_from_slice(t.as_slice());
        }
    };
    let eval = |x: f64, params: &mut [f64; 12], problem: &mut LevelProblem<'_>| {
        set(x, params);
        problem.evaluate(params)
    };

    let step = (hi - lo) / (SCAN_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..SCAN_POINTS).map(|k| lo + step * k as f64).collect();
    let mut scores = Vec::with_capacity(SCAN_POINTS);
    for &x in &grid {
        scores.push(eval(x, params, problem));
    }
    let (kbest, &sbest) = scores
        .iter()
        .enumerate()
        .fold((0, &f64::NEG_INFINITY), |acc, (k, s)| if *s > *acc.1 { (k, s) } else { acc });
    if sbest > best {
        best = sbest;
        best_x = grid[kbest];
    }

    // golden section inside the neighbouring cells of the best scan point
    let mut a = grid[kbest.saturating_sub(1)];
    let mut b = grid[(kbest + 1).min(SCAN_POINTS - 1)];
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = eval(c, params, problem);
    let mut fd = eval(d, params, problem);
    while (b - a).abs() > tol {
        if fc >= fd {
            if fc > best {
                best = fc;
                best_x = c;
            }
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = eval(c, params, problem);
        } else {
            if fd > best {
                best = fd;
                best_x = d;
            }
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = eval(d, params, problem);
        }
    }
    for (x, f) in [(c, fc), (d, fd)] {
        if f > best {
            best = f;
            best_x = x;
        }
    }
    if best_x == x0 {
        *params = base;
    } else {
        set(best_x, params);
    }
    best
}

const START_ROTATION: f64 = 0.3;
const START_STEPS: usize = 7;

fn centroid(values: &[f64], dims: [usize; 3]) -> Option<Vector3<f64>> {
    let (lo, _) = min_max(values);
    let mut acc = Vector3::zeros();
    let mut mass = 0.0;
    let mut i = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let w = values[i] - lo;
                acc += Vector3::new(x as f64, y as f64, z as f64) * w;
                mass += w;
                i += 1;
            }
        }
    }
    (mass > 0.0).then(|| acc / mass)
}

/// Starting point for the coarsest level: a grid of rotations, each paired
/// with the translation that lines up the intensity centroids. Keeps
/// `params` when nothing on the grid scores higher.
fn coarse_start(problem: &mut LevelProblem<'_>, params: &mut [f64; 12], current: f64) -> f64 {
    let (Some(cm), Some(cr)) = (
        centroid(&problem.moving, problem.moving_dims),
        centroid(&problem.reference.values, problem.reference_dims),
    ) else {
        return current;
    };
    let mut best = current;
    let mut best_params = *params;
    let step = 2.0 * START_ROTATION / (START_STEPS - 1) as f64;
    let angles: Vec<f64> = (0..START_STEPS).map(|k| -START_ROTATION + step * k as f64).collect();
    for &rx in &angles {
        for &ry in &angles {
            for &rz in &angles {
                let mut t = AffineTransform::identity();
                t.rotation = [rx, ry, rz];
                let a = t.linear();
                let shift = (cr - problem.c_out - a * (cm - problem.c_in)) * problem.factor;
                t.translation = [shift[0], shift[1], shift[2]];
                let candidate = t.params();
                let score = problem.evaluate(&candidate);
                if score > best {
                    best = score;
                    best_params = candidate;
                }
            }
        }
    }
    *params = best_params;
    best
}

/// Find the transform mapping `moving` onto `reference`.
pub fn register(moving: &Volume3D, reference: &Volume3D, config: &RegistrationConfig) -> Result<RegistrationResult> {
    SimilarityMetric::new(config.metric.kind, config.metric.bins)?;
    if is_constant(moving.voxels()) {
        return Err(Error::ConstantImage("moving"));
    }
    if is_constant(reference.voxels()) {
        return Err(Error::ConstantImage("reference"));
    }
    let mut evaluations = 0usize;
    let mut params = AffineTransform::identity().params();

    let mut levels: Vec<usize> = config
        .levels
        .iter()
        .copied()
        .filter(|&f| f >= 1)
        .filter(|&f| {
            f == 1
                || moving.dims().iter().chain(reference.dims().iter()).all(|&n| n / f >= MIN_LEVEL_EXTENT)
        })
        .collect();
    if levels.last() != Some(&1) {
        levels.push(1);
    }

    let mut identity_score = f64::NEG_INFINITY;
    let mut final_score = f64::NEG_INFINITY;
    for (li, &f) in levels.iter().enumerate() {
        let m = downsample(moving, f);
        let r = downsample(reference, f);
        let reference_dims = r.dims();
        // coarse grids hold few voxels; a full-size histogram there is mostly empty
        let metric = SimilarityMetric {
            kind: config.metric.kind,
            bins: (config.metric.bins / f).max(MIN_BINS),
        };
        let mut problem = LevelProblem {
            moving_dims: m.dims(),
            moving: m.into_voxels(),
            reference: PreparedImage::new(r.into_voxels(), metric.bins),
            reference_dims,
            c_in: level_center(moving.dims(), f),
            c_out: level_center(reference.dims(), f),
            factor: f as f64,
            metric,
            scratch: Scratch::new(metric.bins),
            buffer: vec![0.0; reference_dims.iter().product()],
            pivot: None,
            evaluations: &mut evaluations,
        };
        // later levels search progressively narrower brackets
        let level_scale = 0.5f64.powi(li as i32);
        // rigid parameters first; scale and shear only join on the finest grid
        let active = if li + 1 < levels.len() { 6 } else { 12 };
        problem.pivot = centroid(&problem.moving, problem.moving_dims);
        let mut current = problem.evaluate(&params);
        if li == 0 {
            current = coarse_start(&mut problem, &mut params, current);
        }
        for sweep in 0..config.max_sweeps {
            let sweep_scale = 0.6f64.powi(sweep as i32).max(0.1);
            let before = params;
            for i in 0..active {
                let hw = HALF_WIDTH[i] * level_scale * sweep_scale;
                current = line_search(&mut problem, &mut params, i, hw, current, config.tolerance);
            }
            let moved = params
                .iter()
                .zip(before.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if moved < config.tolerance {
                break;
            }
        }
        if f == 1 {
            identity_score = problem.evaluate(&AffineTransform::identity().params());
            final_score = current;
        }
    }

    let transform = AffineTransform::from_params(&params);
    if !(final_score > identity_score) {
        log::warn!("registration found no improvement over identity ({evaluations} evaluations)");
        return Ok(RegistrationResult {
            transform: AffineTransform::identity(),
            score: identity_score,
            identity_score,
            improved: false,
            evaluations,
        });
    }
    Ok(RegistrationResult {
        transform,
        score: final_score,
        identity_score,
        improved: true,
        evaluations,
    })
}

/// Mean displacement (voxels) between two transforms over every voxel centre
/// of the given grid.
pub fn displacement_error(a: &AffineTransform, b: &AffineTransform, dims: [usize; 3]) -> f64 {
    let ma = a.to_map(dims, dims);
    let mb = b.to_map(dims, dims);
    let mut total = 0.0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = Vector3::new(x as f64, y as f64, z as f64);
                total += (ma.apply(p) - mb.apply(p)).norm();
            }
        }
    }
    total / dims.iter().product::<usize>() as f64
}

/// How well a registration recovered a known transform.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryTrial {
    pub metric: MetricKind,
    /// largest per-axis translation error, voxels
    pub translation_error: f64,
    /// largest per-axis rotation error, radians
    pub rotation_error: f64,
    pub displacement: f64,
    /// similarity after registration minus similarity before
    pub similarity_gain: f64,
    pub seconds: f64,
}

impl RecoveryTrial {
    pub fn recovered(&self, max_translation: f64, max_rotation: f64) -> bool {
        self.translation_error <= max_translation && self.rotation_error <= max_rotation
    }
}

pub fn recovery_trial(
    moving: &Volume3D,
    reference: &Volume3D,
    planted: &AffineTransform,
    config: &RegistrationConfig,
) -> Result<RecoveryTrial> {
    let start = std::time::Instant::now();
    let found = register(moving, reference, config)?;
    let seconds = start.elapsed().as_secs_f64();
    let max_diff = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max);
    let dims = reference.dims();
    let before = similarity(&resample(moving, &AffineTransform::identity(), dims)?, reference, config.metric)?;
    let after = similarity(&resample(moving, &found.transform, dims)?, reference, config.metric)?;
    Ok(RecoveryTrial {
        metric: config.metric.kind,
        translation_error: max_diff(&found.transform.translation, &planted.translation),
        rotation_error: max_diff(&found.transform.rotation, &planted.rotation),
        displacement: displacement_error(&found.transform, planted, dims),
        similarity_gain: after - before,
        seconds,
    })
}
