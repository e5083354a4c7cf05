//! Voxelwise GLM solved by generalised least squares.
//!
//! The noise covariance is either the identity (plain OLS) or a stationary
//! AR(1) process with one pooled coefficient. The AR(1) case is solved by
//! prewhitening the design and every voxel series with the Prais-Winsten
//! filter, then running a thin QR least-squares solve.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BetaMap, Volume4D};
use crate::design::DesignMatrix;
use crate::error::{Error, Result};

/// Largest accepted condition number of the whitened normal matrix.
pub const MAX_CONDITION: f64 = 1e12;
pub const AR1_CLAMP: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseModel {
    Identity,
    Ar1 { rho: f64 },
}

impl NoiseModel {
    pub fn ar1(rho: f64) -> Result<Self> {
        if !(rho > -1.0 && rho < 1.0) {
            return Err(Error::Invalid(format!("AR(1) coefficient must lie in (-1, 1), got {rho}")));
        }
        Ok(NoiseModel::Ar1 { rho })
    }

    fn rho(self) -> f64 {
        match self {
            NoiseModel::Identity => 0.0,
            NoiseModel::Ar1 { rho } => rho,
        }
    }
}

/// Apply the AR(1) whitening filter in place. `rho == 0` leaves the data
/// bit-for-bit unchanged.
pub fn whiten(series: &mut [f64], rho: f64) {
    if rho == 0.0 || series.is_empty() {
        return;
    }
    for t in (1..series.len()).rev() {
        series[t] -= rho * series[t - 1];
    }
    series[0] *= (1.0 - rho * rho).sqrt();
}

/// Precomputed factorisation of the whitened design.
#[derive(Debug, Clone)]
pub struct GlsSolver {
    rho: f64,
    /// thin Q, stored transposed (`P x T`) for contiguous dot products
    qt: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl GlsSolver {
    pub fn new(design: &DesignMatrix, noise: NoiseModel) -> Result<Self> {
        let rho = noise.rho();
        let (t, p) = design.values.shape();
        if t < p {
            return Err(Error::RankDeficient {
                columns: (0..p).collect(),
                condition: f64::INFINITY,
            });
        }
        let mut dw = design.values.clone();
        for j in 0..p {
            let mut col: Vec<f64> = dw.column(j).iter().copied().collect();
            whiten(&mut col, rho);
            dw.set_column(j, &DVector::from_vec(col));
        }

        let svd = dw.clone().svd(false, true);
        let sv = &svd.singular_values;
        let smax = sv.max();
        let (imin, smin) = sv.argmin();
        let condition = if smin > 0.0 { (smax / smin).powi(2) } else { f64::INFINITY };
        if !(condition < MAX_CONDITION) {
            let v_t = svd.v_t.as_ref().expect("requested V^T");
            let null = v_t.row(imin);
            let scale = null.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let columns = (0..p).filter(|&j| null[j].abs() > 1e-3 * scale).collect();
            return Err(Error::RankDeficient { columns, condition });
        }

        let qr = dw.qr();
        let qt = qr.q().transpose();
        let r = qr.r();
        Ok(Self { rho, qt, r })
    }

    /// Coefficients for one raw (unwhitened) series.
    pub fn solve_series(&self, series: &mut [f64]) -> Vec<f64> {
        whiten(series, self.rho);
        let p = self.r.nrows();
        let mut c: Vec<f64> = (0..p)
            .map(|i| self.qt.row(i).iter().zip(series.iter()).map(|(q, y)| q * y).sum())
            .collect();
        for i in (0..p).rev() {
            let mut acc = c[i];
            for j in i + 1..p {
                acc -= self.r[(i, j)] * c[j];
            }
            c[i] = acc / self.r[(i, i)];
        }
        c
    }
}

/// Unmasked coefficient map, one row of `P` betas per voxel.
pub fn solve_gls(data: &Volume4D, design: &DesignMatrix, noise: NoiseModel) -> Result<BetaMap> {
    if design.scans() != data.scans() {
        return Err(Error::DimMismatch(format!(
            "design has {} scans, data has {}",
            design.scans(),
            data.scans()
        )));
    }
    let solver = GlsSolver::new(design, noise)?;
    let p = design.category_count();
    let v = data.voxel_count();
    let mut betas = vec![0.0; v * p];
    betas
        .par_chunks_mut(p)
        .enumerate()
        .try_for_each(|(voxel, out)| {
            let mut series = data.series(voxel);
            if series.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteSeries { voxel });
            }
            out.copy_from_slice(&solver.solve_series(&mut series));
            Ok(())
        })?;
    Ok(BetaMap {
        session_id: design.session_id.clone(),
        dims: data.spatial_dims(),
        category_count: p,
        betas,
    })
}

/// Pooled lag-1 autocorrelation of OLS residuals, clamped to `±0.95`.
/// Falls back to the identity model when every residual series is flat.
pub fn estimate_ar1(data: &Volume4D, design: &DesignMatrix) -> Result<NoiseModel> {
    let t = data.scans();
    if t < 3 {
        return Err(Error::Invalid(format!("AR(1) estimation needs at least 3 scans, got {t}")));
    }
    let solver = GlsSolver::new(design, NoiseModel::Identity)?;
    let per_voxel: Vec<Option<f64>> = (0..data.voxel_count())
        .into_par_iter()
        .map(|voxel| {
            let raw = data.series(voxel);
            let mut work = raw.clone();
            let beta = solver.solve_series(&mut work);
            let resid: Vec<f64> = (0..t)
                .map(|i| {
                    let fit: f64 = (0..beta.len()).map(|j| design.values[(i, j)] * beta[j]).sum();
                    raw[i] - fit
                })
                .collect();
            let scale: f64 = raw.iter().map(|x| x * x).sum();
            let ss: f64 = resid.iter().map(|e| e * e).sum();
            if ss <= 1e-24 * scale.max(f64::MIN_POSITIVE) || ss == 0.0 {
                return None;
            }
            let lag: f64 = resid.windows(2).map(|w| w[0] * w[1]).sum();
            Some(lag / ss)
        })
        .collect();
    let vals: Vec<f64> = per_voxel.into_iter().flatten().collect();
    if vals.is_empty() {
        log::warn!("residuals have zero variance everywhere; using identity noise model");
        return Ok(NoiseModel::Identity);
    }
    let rho = (vals.iter().sum::<f64>() / vals.len() as f64).clamp(-AR1_CLAMP, AR1_CLAMP);
    Ok(NoiseModel::Ar1 { rho })
}

/// Keep strictly positive coefficients, zero the rest.
pub fn positive_mask(betas: &BetaMap) -> BetaMap {
    let mut out = betas.clone();
    out.betas.iter_mut().for_each(|b| {
        if !(*b > 0.0) {
            *b = 0.0;
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn design_from(cols: Vec<Vec<f64>>) -> DesignMatrix {
        let t = cols[0].len();
        let p = cols.len();
        DesignMatrix {
            session_id: "s".into(),
            values: DMatrix::from_fn(t, p, |i, j| cols[j][i]),
        }
    }

    fn volume_from_series(series: &[Vec<f64>]) -> Volume4D {
        let v = series.len();
        let t = series[0].len();
        let mut vox = vec![0.0; v * t];
        for (i, s) in series.iter().enumerate() {
            for (k, x) in s.iter().enumerate() {
                vox[k * v + i] = *x;
            }
        }
        Volume4D::new([v, 1, 1, t], 2000.0, vox).unwrap()
    }

    /// OLS through the normal equations, an independent route.
    fn ols_oracle(d: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
        let dtd = d.transpose() * d;
        let dty = d.transpose() * DVector::from_column_slice(y);
        dtd.lu().solve(&dty).unwrap().iter().copied().collect()
    }

    #[test]
    fn constant_series_mean_estimator() {
        let d = design_from(vec![vec![1.0; 10]]);
        let f = volume_from_series(&[vec![5.0; 10], vec![5.0; 10]]);
        let b = solve_gls(&f, &d, NoiseModel::Identity).unwrap();
        for beta in b.betas {
            assert!((beta - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_matches_normal_equations() {
        let mut rng = SeededRng::new(5);
        for _ in 0..10 {
            let t = 40;
            let cols: Vec<Vec<f64>> = (0..3).map(|_| (0..t).map(|_| rng.normal()).collect()).collect();
            let d = design_from(cols);
            let series: Vec<Vec<f64>> = (0..4).map(|_| (0..t).map(|_| rng.normal()).collect()).collect();
            let f = volume_from_series(&series);
            let b = solve_gls(&f, &d, NoiseModel::Identity).unwrap();
            for (v, s) in series.iter().enumerate() {
                let oracle = ols_oracle(&d.values, s);
                let scale = oracle.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                for j in 0..3 {
                    assert!((b.get(v, j) - oracle[j]).abs() <= 1e-12 * scale.max(1.0));
                }
            }
        }
    }

    #[test]
    fn ar1_zero_equals_identity() {
        let mut rng = SeededRng::new(9);
        let t = 30;
        let d = design_from((0..2).map(|_| (0..t).map(|_| rng.normal()).collect()).collect());
        let f = volume_from_series(&[(0..t).map(|_| rng.normal()).collect::<Vec<_>>()]);
        let a = solve_gls(&f, &d, NoiseModel::Identity).unwrap();
        let b = solve_gls(&f, &d, NoiseModel::ar1(0.0).unwrap()).unwrap();
        assert_eq!(a.betas, b.betas);
    }

    #[test]
    fn ar1_matches_explicit_covariance_solve() {
        // (D' S^-1 D)^-1 D' S^-1 y with S the AR(1) correlation matrix
        let mut rng = SeededRng::new(21);
        let t = 25;
        let rho: f64 = 0.6;
        let d = design_from((0..2).map(|_| (0..t).map(|_| rng.normal()).collect()).collect());
        let y: Vec<f64> = (0..t).map(|_| rng.normal()).collect();
        let sigma = DMatrix::from_fn(t, t, |i, j| rho.powi((i as i32 - j as i32).abs()));
        let si = sigma.try_inverse().unwrap();
        let lhs = d.values.transpose() * &si * &d.values;
        let rhs = d.values.transpose() * &si * DVector::from_column_slice(&y);
        let oracle = lhs.lu().solve(&rhs).unwrap();
        let f = volume_from_series(&[y]);
        let b = solve_gls(&f, &d, NoiseModel::ar1(rho).unwrap()).unwrap();
        for j in 0..2 {
            assert!((b.get(0, j) - oracle[j]).abs() < 1e-9, "{} vs {}", b.get(0, j), oracle[j]);
        }
    }

    #[test]
    fn collinear_design_names_columns() {
        let a: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..20).map(|i| (i as f64 * 0.3).cos()).collect();
        let c: Vec<f64> = a.iter().map(|x| 2.0 * x).collect();
        let d = design_from(vec![a, b, c]);
        let f = volume_from_series(&[vec![1.0; 20]]);
        match solve_gls(&f, &d, NoiseModel::Identity) {
            Err(Error::RankDeficient { columns, .. }) => assert_eq!(columns, vec![0, 2]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn residuals_orthogonal_to_whitened_design() {
        let mut rng = SeededRng::new(33);
        let t = 50;
        let rho = 0.3;
        let d = design_from((0..3).map(|_| (0..t).map(|_| rng.normal()).collect()).collect());
        let y: Vec<f64> = (0..t).map(|_| rng.normal() * 3.0).collect();
        let f = volume_from_series(std::slice::from_ref(&y));
        let b = solve_gls(&f, &d, NoiseModel::ar1(rho).unwrap()).unwrap();
        let mut resid: Vec<f64> = (0..t)
            .map(|i| y[i] - (0..3).map(|j| d.values[(i, j)] * b.get(0, j)).sum::<f64>())
            .collect();
        whiten(&mut resid, rho);
        let norm: f64 = y.iter().map(|x| x * x).sum::<f64>().sqrt();
        for j in 0..3 {
            let mut col: Vec<f64> = d.values.column(j).iter().copied().collect();
            whiten(&mut col, rho);
            let dot: f64 = col.iter().zip(&resid).map(|(a, b)| a * b).sum();
            assert!(dot.abs() <= 1e-8 * norm);
        }
    }

    #[test]
    fn positive_mask_examples() {
        let b = BetaMap {
            session_id: "s".into(),
            dims: [3, 1, 1],
            category_count: 1,
            betas: vec![-1.2, 0.0, 3.4],
        };
        let m = positive_mask(&b);
        assert_eq!(m.betas, vec![0.0, 0.0, 3.4]);
        assert_eq!(positive_mask(&m), m);
    }

    #[test]
    fn ar1_flat_residuals_fall_back_to_identity() {
        let d = design_from(vec![vec![1.0; 3]]);
        let f = volume_from_series(&[vec![2.0; 3], vec![-1.0; 3]]);
        assert_eq!(estimate_ar1(&f, &d).unwrap(), NoiseModel::Identity);
    }

    #[test]
    fn ar1_needs_three_scans() {
        let d = design_from(vec![vec![1.0; 2]]);
        let f = volume_from_series(&[vec![2.0, 1.0]]);
        assert!(estimate_ar1(&f, &d).is_err());
    }

    #[test]
    fn rho_bounds() {
        assert!(NoiseModel::ar1(1.0).is_err());
        assert!(NoiseModel::ar1(-1.0).is_err());
        assert!(NoiseModel::ar1(0.99).is_ok());
    }
}
