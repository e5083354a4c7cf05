//! Atlas-region features for every stimulus condition, and active-region
//! probability maps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheKey, StageCache};
use crate::condition::{condition_max, gather_condition, mask_condition};
use crate::data::{format_schedule, AtlasVolume, BetaMap, FeatureMatrix, StimulusSchedule, Volume3D, Volume4D};
use crate::design::{build_design_matrix, canonical_hrf, DEFAULT_HRF_DURATION_S};
use crate::error::{Error, Result};
use crate::glm::{estimate_ar1, positive_mask, solve_gls, NoiseModel};
use crate::register::{register, resample, AffineTransform, RegistrationConfig};

/// Mean of `image` over each atlas region, in region order. A region with no
/// voxels yields 0.
pub fn region_means(image: &Volume3D, atlas: &AtlasVolume) -> Result<Vec<f64>> {
    if image.dims() != atlas.dims() {
        return Err(Error::DimMismatch(format!(
            "image {:?} vs atlas {:?}",
            image.dims(),
            atlas.dims()
        )));
    }
    let e = atlas.region_count();
    let mut sum = vec![0.0; e];
    let mut count = vec![0usize; e];
    for (&l, &v) in atlas.labels().iter().zip(image.voxels()) {
        if l > 0 {
            sum[l as usize - 1] += v;
            count[l as usize - 1] += 1;
        }
    }
    Ok(sum
        .iter()
        .zip(&count)
        .enumerate()
        .map(|(r, (&s, &c))| {
            if c == 0 {
                log::warn!("atlas region {} has no voxels; feature set to 0", r + 1);
                0.0
            } else {
                s / c as f64
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseSetting {
    Identity,
    Ar1 { rho: f64 },
    /// pooled AR(1) coefficient from OLS residuals
    Estimate,
}

/// Which image drives the move into the reference space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegistrationMode {
    /// data already lives on the reference grid
    None,
    /// every masked condition image is registered on its own
    Condition,
    /// one transform per session, estimated from its anatomy (or its mean
    /// functional image) and shared by all of its conditions
    Session,
    /// `Session` when the session has an anatomy, otherwise `Condition`
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub noise: NoiseSetting,
    /// scans taken from each onset onward
    pub window: usize,
    pub hrf_duration_s: f64,
    pub registration: RegistrationMode,
    pub register: RegistrationConfig,
    /// also keep the registered condition images as voxel features
    pub keep_voxels: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            noise: NoiseSetting::Estimate,
            window: 1,
            hrf_duration_s: DEFAULT_HRF_DURATION_S,
            registration: RegistrationMode::Auto,
            register: RegistrationConfig::default(),
            keep_voxels: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionInput {
    pub data: Volume4D,
    pub schedule: StimulusSchedule,
    pub anatomy: Option<Volume3D>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutput {
    pub session_id: String,
    /// unmasked coefficients on the native grid
    pub betas: BetaMap,
    pub noise: NoiseModel,
    /// native-to-reference transform of each condition, in schedule order
    pub transforms: Vec<(u32, AffineTransform)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: FeatureMatrix,
    /// registered condition images, one voxel per feature
    pub voxels: Option<FeatureMatrix>,
    pub sessions: Vec<SessionOutput>,
}

fn tag(session: &str, condition: u32) -> impl Fn(Error) -> Error + '_ {
    move |e| Error::Stage {
        session: session.to_string(),
        condition,
        source: Box::new(e),
    }
}

fn registration_key(moving: &Volume3D, reference: &Volume3D, config: &RegistrationConfig) -> String {
    CacheKey::new("register")
        .usizes(&moving.dims())
        .f64s(moving.voxels())
        .usizes(&reference.dims())
        .f64s(reference.voxels())
        .bytes(serde_json::to_string(config).expect("config serialises").as_bytes())
        .finish()
}

fn register_cached(
    moving: &Volume3D,
    reference: &Volume3D,
    config: &RegistrationConfig,
    cache: Option<&StageCache>,
) -> Result<AffineTransform> {
    let run = || register(moving, reference, config).map(|r| r.transform.params().to_vec());
    let params = match cache {
        Some(c) => c.get_or_compute("register", &registration_key(moving, reference, config), run)?,
        None => run()?,
    };
    let p: [f64; 12] = params
        .try_into()
        .map_err(|_| Error::malformed("cache", "registration entry has the wrong length"))?;
    Ok(AffineTransform::from_params(&p))
}

fn fit_session(input: &SessionInput, config: &FeatureConfig, cache: Option<&StageCache>) -> Result<(BetaMap, NoiseModel)> {
    let schedule = &input.schedule;
    let hrf = canonical_hrf(input.data.tr_ms(), config.hrf_duration_s)?;
    let design = build_design_matrix(schedule, input.data.scans(), &hrf)?;
    let run = || -> Result<(BetaMap, NoiseModel)> {
        let noise = match config.noise {
            NoiseSetting::Identity => NoiseModel::Identity,
            NoiseSetting::Ar1 { rho } => NoiseModel::ar1(rho)?,
            NoiseSetting::Estimate => estimate_ar1(&input.data, &design)?,
        };
        Ok((solve_gls(&input.data, &design, noise)?, noise))
    };
    let Some(cache) = cache else {
        return run();
    };
    let d = input.data.dims();
    let key = CacheKey::new("glm")
        .usizes(&d)
        .f64s(&[input.data.tr_ms(), config.hrf_duration_s])
        .f64s(input.data.voxels())
        .bytes(format_schedule(schedule).as_bytes())
        .bytes(serde_json::to_string(&config.noise).expect("noise serialises").as_bytes())
        .finish();
    let stored = cache.get_or_compute("glm", &key, || {
        let (betas, noise) = run()?;
        let mut v = betas.betas;
        v.push(match noise {
            NoiseModel::Identity => f64::NAN,
            NoiseModel::Ar1 { rho } => rho,
        });
        Ok(v)
    })?;
    let (code, betas) = stored
        .split_last()
        .ok_or_else(|| Error::malformed("cache", "empty glm entry"))?;
    let p = schedule.category_count;
    if betas.len() != input.data.voxel_count() * p {
        return Err(Error::malformed("cache", "glm entry has the wrong length"));
    }
    let noise = if code.is_nan() { NoiseModel::Identity } else { NoiseModel::Ar1 { rho: *code } };
    Ok((
        BetaMap {
            session_id: schedule.session_id.clone(),
            dims: input.data.spatial_dims(),
            category_count: p,
            betas: betas.to_vec(),
        },
        noise,
    ))
}

struct ConditionOutput {
    features: Vec<f64>,
    voxels: Option<Vec<f64>>,
    category: u32,
    transform: AffineTransform,
}

fn run_session(
    input: &SessionInput,
    atlas: &AtlasVolume,
    reference: &Volume3D,
    config: &FeatureConfig,
    cache: Option<&StageCache>,
) -> Result<(SessionOutput, Vec<ConditionOutput>)> {
    let schedule = &input.schedule;
    let sid = schedule.session_id.as_str();
    schedule.validate(input.data.scans()).map_err(tag(sid, 0))?;
    let (betas, noise) = fit_session(input, config, cache).map_err(tag(sid, 0))?;
    let positive = positive_mask(&betas);

    let mode = match config.registration {
        RegistrationMode::Auto if input.anatomy.is_some() => RegistrationMode::Session,
        RegistrationMode::Auto => RegistrationMode::Condition,
        m => m,
    };
    if mode == RegistrationMode::None && input.data.spatial_dims() != reference.dims() {
        return Err(tag(sid, 0)(Error::DimMismatch(format!(
            "registration disabled but session grid {:?} differs from reference {:?}",
            input.data.spatial_dims(),
            reference.dims()
        ))));
    }
    let shared = if mode == RegistrationMode::Session {
        let moving = match &input.anatomy {
            Some(a) => a.clone(),
            None => input.data.mean_image(),
        };
        Some(register_cached(&moving, reference, &config.register, cache).map_err(tag(sid, 0))?)
    } else {
        None
    };

    let outputs = schedule
        .conditions
        .par_iter()
        .map(|cond| -> Result<ConditionOutput> {
            let slab = gather_condition(&input.data, schedule, cond.id, config.window)?;
            let masked = mask_condition(&condition_max(&slab)?, &positive, cond.category)?;
            let transform = match (mode, shared) {
                (RegistrationMode::None, _) => AffineTransform::identity(),
                (_, Some(t)) => t,
                _ => register_cached(&masked, reference, &config.register, cache)?,
            };
            let image = if transform == AffineTransform::identity() && masked.dims() == reference.dims() {
                masked
            } else {
                resample(&masked, &transform, reference.dims())?
            };
            Ok(ConditionOutput {
                features: region_means(&image, atlas)?,
                voxels: config.keep_voxels.then(|| image.into_voxels()),
                category: cond.category,
                transform,
            })
        })
        .enumerate()
        .map(|(i, r)| r.map_err(tag(sid, schedule.conditions[i].id)))
        .collect::<Result<Vec<_>>>()?;

    let transforms = schedule
        .conditions
        .iter()
        .zip(&outputs)
        .map(|(c, o)| (c.id, o.transform))
        .collect();
    Ok((
        SessionOutput {
            session_id: sid.to_string(),
            betas,
            noise,
            transforms,
        },
        outputs,
    ))
}

/// Features for every condition of every session, columns ordered by
/// session then condition.
pub fn build_dataset(
    sessions: &[SessionInput],
    atlas: &AtlasVolume,
    reference: &Volume3D,
    config: &FeatureConfig,
    cache: Option<&StageCache>,
) -> Result<Dataset> {
    if sessions.is_empty() {
        return Err(Error::Invalid("no sessions".into()));
    }
    if reference.dims() != atlas.dims() {
        return Err(Error::DimMismatch(format!(
            "reference {:?} vs atlas {:?}",
            reference.dims(),
            atlas.dims()
        )));
    }
    let p = sessions[0].schedule.category_count;
    if let Some(s) = sessions.iter().find(|s| s.schedule.category_count != p) {
        return Err(Error::Invalid(format!(
            "session {} has {} categories, expected {p}",
            s.schedule.session_id, s.schedule.category_count
        )));
    }
    let results = sessions
        .par_iter()
        .map(|s| run_session(s, atlas, reference, config, cache))
        .collect::<Result<Vec<_>>>()?;

    let region_ids: Vec<String> = (1..=atlas.region_count()).map(|r| r.to_string()).collect();
    let mut columns = Vec::new();
    let mut voxel_columns = Vec::new();
    let mut labels = Vec::new();
    let mut session_ids = Vec::new();
    let mut outputs = Vec::with_capacity(results.len());
    for (session, conditions) in results {
        for c in conditions {
            columns.push(c.features);
            if let Some(v) = c.voxels {
                voxel_columns.push(v);
            }
            labels.push(c.category);
            session_ids.push(session.session_id.clone());
        }
        outputs.push(session);
    }
    let voxels = if config.keep_voxels {
        let ids = (0..reference.len()).map(|i| format!("v{i}")).collect();
        Some(FeatureMatrix::new(ids, voxel_columns, labels.clone(), session_ids.clone())?)
    } else {
        None
    };
    Ok(Dataset {
        features: FeatureMatrix::new(region_ids, columns, labels, session_ids)?,
        voxels,
        sessions: outputs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveRegions {
    /// fraction of sessions with a positive registered beta
    pub probability: Volume3D,
    /// 1 where the probability exceeds the threshold, else 0
    pub mask: Volume3D,
}

/// Per-voxel share of sessions whose beta for category `n`, carried into the
/// atlas grid by that session's transform, is positive.
pub fn active_region_probability(
    betas: &[BetaMap],
    transforms: &[AffineTransform],
    atlas: &AtlasVolume,
    n: u32,
    threshold: f64,
) -> Result<ActiveRegions> {
    if betas.is_empty() {
        return Err(Error::Invalid("no sessions".into()));
    }
    if betas.len() != transforms.len() {
        return Err(Error::DimMismatch(format!(
            "{} beta maps, {} transforms",
            betas.len(),
            transforms.len()
        )));
    }
    let dims = atlas.dims();
    let mut count = vec![0.0; dims.iter().product()];
    for (b, t) in betas.iter().zip(transforms) {
        let col = b.column_volume(n)?;
        let registered = if *t == AffineTransform::identity() && col.dims() == dims {
            col
        } else {
            resample(&col, t, dims)?
        };
        for (c, &v) in count.iter_mut().zip(registered.voxels()) {
            if v > 0.0 {
                *c += 1.0;
            }
        }
    }
    let s = betas.len() as f64;
    let prob: Vec<f64> = count.iter().map(|c| c / s).collect();
    let mask: Vec<f64> = prob.iter().map(|&p| if p > threshold { 1.0 } else { 0.0 }).collect();
    Ok(ActiveRegions {
        probability: Volume3D::new(dims, prob)?,
        mask: Volume3D::new(dims, mask)?,
    })
}

/// Dice overlap `2|A ∩ B| / (|A| + |B|)`; two empty sets score 1.
pub fn dice(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::synth::{make_phantom, make_session, plant_patterns, PatternSpec, SessionSpec};
    use proptest::prelude::*;

    fn two_region_atlas() -> AtlasVolume {
        AtlasVolume::new([3, 1, 1], vec![1, 2, 2], 2).unwrap()
    }

    #[test]
    fn hand_computed_means() {
        let img = Volume3D::new([3, 1, 1], vec![1.0, 2.0, 4.0]).unwrap();
        assert_eq!(region_means(&img, &two_region_atlas()).unwrap(), vec![1.0, 3.0]);
        let c = Volume3D::new([3, 1, 1], vec![7.0; 3]).unwrap();
        assert_eq!(region_means(&c, &two_region_atlas()).unwrap(), vec![7.0, 7.0]);
        let wrong = Volume3D::zeros([2, 1, 1]);
        assert!(region_means(&wrong, &two_region_atlas()).is_err());
    }

    #[test]
    fn background_is_ignored() {
        let atlas = AtlasVolume::new([4, 1, 1], vec![0, 1, 1, 0], 1).unwrap();
        let img = Volume3D::new([4, 1, 1], vec![100.0, 1.0, 3.0, -50.0]).unwrap();
        assert_eq!(region_means(&img, &atlas).unwrap(), vec![2.0]);
    }

    #[test]
    fn matches_two_pass_oracle() {
        let mut rng = SeededRng::new(4);
        let dims = [7, 6, 5];
        let n = 210;
        let e = 9;
        let mut labels: Vec<i32> = (0..n).map(|_| rng.below(e + 1) as i32).collect();
        for r in 1..=e {
            labels[r] = r as i32;
        }
        let atlas = AtlasVolume::new(dims, labels.clone(), e).unwrap();
        let img = Volume3D::new(dims, (0..n).map(|_| rng.normal()).collect()).unwrap();
        let got = region_means(&img, &atlas).unwrap();
        for r in 1..=e {
            let members: Vec<f64> = (0..n).filter(|&i| labels[i] == r as i32).map(|i| img.voxels()[i]).collect();
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            assert!((got[r - 1] - mean).abs() <= 1e-12 * mean.abs().max(1.0));
        }
    }

    proptest! {
        #[test]
        fn means_are_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let atlas = AtlasVolume::new([3, 1, 1], vec![1, 2, 2], 2).unwrap();
            let c1: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let c2: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let mix: Vec<f64> = c1.iter().zip(&c2).map(|(x, y)| a * x + b * y).collect();
            let m1 = region_means(&Volume3D::new([3, 1, 1], c1).unwrap(), &atlas).unwrap();
            let m2 = region_means(&Volume3D::new([3, 1, 1], c2).unwrap(), &atlas).unwrap();
            let mm = region_means(&Volume3D::new([3, 1, 1], mix).unwrap(), &atlas).unwrap();
            for i in 0..2 {
                prop_assert!((mm[i] - (a * m1[i] + b * m2[i])).abs() < 1e-12);
            }
        }
    }

    fn betas(values: Vec<f64>) -> BetaMap {
        BetaMap {
            session_id: "s".into(),
            dims: [values.len(), 1, 1],
            category_count: 1,
            betas: values,
        }
    }

    #[test]
    fn probability_examples() {
        let atlas = AtlasVolume::new([2, 1, 1], vec![1, 1], 1).unwrap();
        let id = AffineTransform::identity();
        let one = active_region_probability(&[betas(vec![1.0, -1.0])], &[id], &atlas, 1, 0.5).unwrap();
        assert_eq!(one.probability.voxels(), &[1.0, 0.0]);
        assert_eq!(one.mask.voxels(), &[1.0, 0.0]);
        let four: Vec<BetaMap> = vec![
            betas(vec![1.0, 1.0]),
            betas(vec![-1.0, 1.0]),
            betas(vec![-1.0, 1.0]),
            betas(vec![-1.0, -1.0]),
        ];
        let r = active_region_probability(&four, &[id; 4], &atlas, 1, 0.5).unwrap();
        assert_eq!(r.probability.voxels(), &[0.25, 0.75]);
        assert_eq!(r.mask.voxels(), &[0.0, 1.0]);
        assert!(active_region_probability(&[], &[], &atlas, 1, 0.5).is_err());
    }

    #[test]
    fn dice_examples() {
        assert_eq!(dice(&[true, true, false], &[true, true, false]), 1.0);
        assert_eq!(dice(&[true, false], &[false, true]), 0.0);
        assert!((dice(&[true, true, false], &[true, false, false]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice(&[false], &[false]), 1.0);
    }

    #[test]
    fn dataset_shape_and_labels() {
        let ph = make_phantom([8, 8, 8], 5, 1).unwrap();
        let pat = plant_patterns(&ph.atlas, &PatternSpec::default(), 2).unwrap();
        let mut spec = SessionSpec::new("sub-01_run-1");
        spec.conditions = 3;
        spec.scans = 60;
        let s = make_session(&ph, &pat, &spec, 3).unwrap();
        let input = SessionInput {
            data: s.data,
            schedule: s.schedule,
            anatomy: Some(s.anatomy),
        };
        let config = FeatureConfig {
            registration: RegistrationMode::None,
            keep_voxels: true,
            ..Default::default()
        };
        let ds = build_dataset(&[input.clone(), input], &ph.atlas, &ph.reference, &config, None).unwrap();
        assert_eq!(ds.features.len(), 6);
        assert_eq!(ds.features.feature_count(), 5);
        assert_eq!(ds.features.labels, vec![1, 2, 3, 1, 2, 3]);
        assert_eq!(ds.voxels.unwrap().feature_count(), 512);
    }

    #[test]
    fn stage_errors_name_the_session() {
        let ph = make_phantom([8, 8, 8], 5, 1).unwrap();
        let data = Volume4D::new([8, 8, 8, 10], 2000.0, vec![0.0; 5120]).unwrap();
        let schedule = StimulusSchedule::new(
            "sub-09_run-1",
            1,
            vec![crate::data::Condition {
                id: 1,
                category: 1,
                onsets: vec![12],
            }],
        )
        .unwrap();
        let err = build_dataset(
            &[SessionInput { data, schedule, anatomy: None }],
            &ph.atlas,
            &ph.reference,
            &FeatureConfig::default(),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Stage { ref session, .. } if session == "sub-09_run-1"));
        assert_eq!(err.code(), "data.onset_out_of_range");
    }
}
