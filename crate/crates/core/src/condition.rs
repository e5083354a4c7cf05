//! Per-condition activity images.

use crate::data::{BetaMap, StimulusSchedule, Volume3D, Volume4D};
use crate::error::{Error, Result};

/// Condition image on the session's native grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionImage {
    pub session_id: String,
    pub condition_id: u32,
    pub category_id: u32,
    pub image: Volume3D,
}

/// Rows of the condition's scans, `t x V`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSlab {
    pub dims: [usize; 3],
    pub rows: Vec<Vec<f64>>,
}

/// Scans listed for condition `k`. With `window > 1` every onset `m` expands
/// to `m..m + window` (clipped to the run, duplicates dropped).
pub fn gather_condition(data: &Volume4D, schedule: &StimulusSchedule, k: u32, window: usize) -> Result<TimeSlab> {
    let cond = schedule
        .condition(k)
        .ok_or_else(|| Error::Invalid(format!("condition {k} not in schedule")))?;
    if cond.onsets.is_empty() {
        return Err(Error::malformed("schedule", format!("condition {k} has no onsets")));
    }
    let scans = data.scans();
    let mut picks = Vec::new();
    for &m in &cond.onsets {
        if m >= scans {
            return Err(Error::OnsetOutOfRange {
                condition: k,
                onset: m,
                scans,
            });
        }
        for s in m..(m + window.max(1)).min(scans) {
            if !picks.contains(&s) {
                picks.push(s);
            }
        }
    }
    Ok(TimeSlab {
        dims: data.spatial_dims(),
        rows: picks.into_iter().map(|s| data.scan(s).to_vec()).collect(),
    })
}

/// Voxelwise maximum over the slab's rows.
pub fn condition_max(slab: &TimeSlab) -> Result<Volume3D> {
    let first = slab
        .rows
        .first()
        .ok_or_else(|| Error::Invalid("empty time slab".into()))?;
    let mut out = first.clone();
    for row in &slab.rows[1..] {
        for (o, &x) in out.iter_mut().zip(row) {
            if x > *o {
                *o = x;
            }
        }
    }
    Volume3D::new(slab.dims, out)
}

/// Hadamard product with the (positive-masked) beta column of category `n`.
pub fn mask_condition(image: &Volume3D, betas: &BetaMap, n: u32) -> Result<Volume3D> {
    if image.dims() != betas.dims {
        return Err(Error::DimMismatch(format!(
            "image {:?} vs beta map {:?}",
            image.dims(),
            betas.dims
        )));
    }
    let col = betas.column(n)?;
    let voxels = image.voxels().iter().zip(&col).map(|(c, b)| c * b).collect();
    Volume3D::new(image.dims(), voxels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Condition;

    fn vol(t: usize) -> Volume4D {
        // 2 voxels, scan s holds (s, 10 - s)
        let mut v = Vec::new();
        for s in 0..t {
            v.push(s as f64);
            v.push(10.0 - s as f64);
        }
        Volume4D::new([2, 1, 1, t], 2000.0, v).unwrap()
    }

    fn sched(onsets: Vec<usize>) -> StimulusSchedule {
        StimulusSchedule::new("s", 1, vec![Condition { id: 1, category: 1, onsets }]).unwrap()
    }

    #[test]
    fn single_onset_row() {
        let s = gather_condition(&vol(6), &sched(vec![0]), 1, 1).unwrap();
        assert_eq!(s.rows, vec![vec![0.0, 10.0]]);
    }

    #[test]
    fn rows_follow_onsets() {
        let s = gather_condition(&vol(6), &sched(vec![2, 5]), 1, 1).unwrap();
        assert_eq!(s.rows, vec![vec![2.0, 8.0], vec![5.0, 5.0]]);
    }

    #[test]
    fn all_scans_is_whole_volume() {
        let f = vol(4);
        let s = gather_condition(&f, &sched(vec![0, 1, 2, 3]), 1, 1).unwrap();
        let flat: Vec<f64> = s.rows.concat();
        assert_eq!(flat, f.voxels());
    }

    #[test]
    fn window_extends_and_clips() {
        let s = gather_condition(&vol(6), &sched(vec![3, 4]), 1, 3).unwrap();
        let firsts: Vec<f64> = s.rows.iter().map(|r| r[0]).collect();
        assert_eq!(firsts, vec![3.0, 4.0, 5.0]);
    }

    #[test]
    fn unknown_condition() {
        assert!(gather_condition(&vol(6), &sched(vec![1]), 7, 1).is_err());
    }

    #[test]
    fn columnwise_max() {
        let slab = TimeSlab {
            dims: [2, 1, 1],
            rows: vec![vec![1.0, 5.0], vec![3.0, 2.0]],
        };
        assert_eq!(condition_max(&slab).unwrap().voxels(), &[3.0, 5.0]);
        let one = TimeSlab {
            dims: [2, 1, 1],
            rows: vec![vec![-1.0, 4.0]],
        };
        assert_eq!(condition_max(&one).unwrap().voxels(), &[-1.0, 4.0]);
        assert!(condition_max(&TimeSlab { dims: [2, 1, 1], rows: vec![] }).is_err());
    }

    fn betas(col: Vec<f64>) -> BetaMap {
        BetaMap {
            session_id: "s".into(),
            dims: [col.len(), 1, 1],
            category_count: 1,
            betas: col,
        }
    }

    #[test]
    fn hadamard_examples() {
        let c = Volume3D::new([3, 1, 1], vec![2.0, 3.0, 4.0]).unwrap();
        assert_eq!(mask_condition(&c, &betas(vec![1.0; 3]), 1).unwrap(), c);
        assert_eq!(mask_condition(&c, &betas(vec![0.0; 3]), 1).unwrap().voxels(), &[0.0; 3]);
        assert_eq!(
            mask_condition(&c, &betas(vec![0.0, 1.0, 0.5]), 1).unwrap().voxels(),
            &[0.0, 3.0, 2.0]
        );
        assert!(mask_condition(&c, &betas(vec![1.0; 3]), 2).is_err());
    }
}
