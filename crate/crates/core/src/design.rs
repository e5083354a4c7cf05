//! Design matrices: onset impulses convolved with a canonical HRF.

use nalgebra::DMatrix;

use crate::data::StimulusSchedule;
use crate::error::{Error, Result};

pub const DEFAULT_HRF_DURATION_S: f64 = 32.0;

/// HRF sampled at TR spacing, peak normalised to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct HrfKernel {
    pub samples: Vec<f64>,
    pub tr_ms: f64,
}

/// Unit-scale gamma density with integer shape `k`, so `Γ(k) = (k - 1)!`.
fn gamma_density(t: f64, k: u32) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let ln_fact: f64 = (2..k).map(|i| (i as f64).ln()).sum();
    ((k - 1) as f64 * t.ln() - t - ln_fact).exp()
}

/// Double-gamma response at `t` seconds: peak shape 6, undershoot shape 16,
/// unit scale, undershoot ratio 1/6. Not normalised.
pub fn double_gamma(t: f64) -> f64 {
    gamma_density(t, 6) - gamma_density(t, 16) / 6.0
}

pub fn canonical_hrf(tr_ms: f64, duration_s: f64) -> Result<HrfKernel> {
    if !(tr_ms > 0.0 && tr_ms.is_finite()) {
        return Err(Error::Invalid(format!("repetition time must be positive, got {tr_ms}")));
    }
    if !(duration_s >= 0.0 && duration_s.is_finite()) {
        return Err(Error::Invalid(format!("kernel duration must be nonnegative, got {duration_s}")));
    }
    let tr_s = tr_ms / 1000.0;
    // small slack so that e.g. 32 / 0.1 keeps its last sample
    let n = (duration_s / tr_s + 1e-9).floor() as usize + 1;
    let mut samples: Vec<f64> = (0..n).map(|i| double_gamma(i as f64 * tr_s)).collect();
    let peak = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if peak > 0.0 {
        samples.iter_mut().for_each(|s| *s /= peak);
    } else {
        // TR longer than the whole positive lobe; keep a unit impulse
        samples = vec![1.0];
    }
    Ok(HrfKernel { samples, tr_ms })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub session_id: String,
    /// `T x P`
    pub values: DMatrix<f64>,
}

impl DesignMatrix {
    pub fn scans(&self) -> usize {
        self.values.nrows()
    }

    pub fn category_count(&self) -> usize {
        self.values.ncols()
    }

    pub fn to_csv(&self) -> String {
        let p = self.category_count();
        let mut out = (1..=p).map(|n| format!("category_{n}")).collect::<Vec<_>>().join(",");
        out.push('\n');
        for t in 0..self.scans() {
            let row: Vec<String> = (0..p).map(|n| format!("{:?}", self.values[(t, n)])).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Causal convolution of `signal` with `kernel`, truncated to `signal.len()`.
pub fn convolve_truncated(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    let t = signal.len();
    let mut out = vec![0.0; t];
    for (i, &s) in signal.iter().enumerate() {
        if s == 0.0 {
            continue;
        }
        for (j, &k) in kernel.iter().enumerate() {
            let idx = i + j;
            if idx >= t {
                break;
            }
            out[idx] += s * k;
        }
    }
    out
}

/// Column `n` holds the summed onset impulses of every condition in category
/// `n`, convolved with `hrf`.
pub fn build_design_matrix(schedule: &StimulusSchedule, scans: usize, hrf: &HrfKernel) -> Result<DesignMatrix> {
    schedule.validate(scans)?;
    let p = schedule.category_count;
    let mut values = DMatrix::zeros(scans, p);
    for n in 1..=p {
        let mut indicator = vec![0.0; scans];
        let mut any = false;
        for c in schedule.conditions.iter().filter(|c| c.category as usize == n) {
            for &o in &c.onsets {
                indicator[o] += 1.0;
                any = true;
            }
        }
        if !any {
            return Err(Error::EmptyCategory(n as u32));
        }
        let col = convolve_truncated(&indicator, &hrf.samples);
        if col.iter().all(|&v| v == 0.0) {
            return Err(Error::EmptyCategory(n as u32));
        }
        for (t, v) in col.into_iter().enumerate() {
            values[(t, n - 1)] = v;
        }
    }
    Ok(DesignMatrix {
        session_id: schedule.session_id.clone(),
        values,
    })
}
