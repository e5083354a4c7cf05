//! The `apa` command line: one subcommand per pipeline stage, layered
//! configuration, provenance manifests and a fixed exit-code contract
//! (0 ok, 1 validation, 2 numerical, 3 i/o).

pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use apa_core::boost::{predict_binary, train_binary, BinaryEnsemble};
use apa_core::cache::StageCache;
use apa_core::data::{
    load_atlas, load_features, load_json, load_model, load_schedule, load_session_manifest, load_volume3d,
    load_volume4d, save_features, save_json, save_model, save_volume3d, write_text, BetaMap, FeatureMatrix,
    OnsetUnits,
};
use apa_core::design::{build_design_matrix, canonical_hrf};
use apa_core::ecoc::{one_vs_all_labels, predict_multiclass, train_multiclass, EnsembleModel};
use apa_core::eval::{correlation_matrix, evaluate, mean_off_diagonal, report_csv, Report};
use apa_core::features::{active_region_probability, build_dataset, FeatureConfig, NoiseSetting, RegistrationMode, SessionInput};
use apa_core::glm::{estimate_ar1, solve_gls, NoiseModel};
use apa_core::register::{recovery_trial, register, resample, AffineTransform, MetricKind, RecoveryTrial, RegistrationConfig};
use apa_core::synth::{registration_case, write_preset, Preset};
use apa_core::{Error, ErrorClass};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::{parse_config_file, resolve, Settings};
use crate::manifest::{Manifest, TOOL, VERSION};

/// Trials in the registration benchmark and its recovery tolerances.
pub const REGISTER_TRIALS: u64 = 20;
pub const RECOVERY_TRANSLATION: f64 = 0.5;
pub const RECOVERY_ROTATION: f64 = 0.02;

#[derive(Debug, Parser)]
#[command(name = "apa", about = "Anatomical pattern analysis for fMRI decoding", disable_version_flag = true)]
pub struct Cli {
    /// worker threads for every parallel stage (results do not depend on it)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON file of settings
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// print the version and exit
    #[arg(long)]
    pub version: bool,
    /// with --version, print machine-readable JSON
    #[arg(long, requires = "version")]
    pub json: bool,
    #[command(flatten)]
    pub settings: SettingFlags,
    #[command(subcommand)]
    pub command: Option<Command>,
}

/// Flags that override settings; every one also reads from `APA_<NAME>` and
/// from the config file.
#[derive(Debug, Default, Args)]
pub struct SettingFlags {
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub max_depth: Option<usize>,
    #[arg(long, global = true)]
    pub min_leaf_fraction: Option<f64>,
    /// set-level | per-instance
    #[arg(long, global = true)]
    pub weighting: Option<String>,
    /// z-score features with training-fold statistics (true | false)
    #[arg(long, global = true)]
    pub normalize: Option<bool>,
    /// identity | ar1 | estimate
    #[arg(long, global = true)]
    pub noise: Option<String>,
    #[arg(long, global = true)]
    pub rho: Option<f64>,
    #[arg(long, global = true)]
    pub window: Option<usize>,
    #[arg(long, global = true)]
    pub hrf_duration_s: Option<f64>,
    /// none | condition | session | auto
    #[arg(long, global = true)]
    pub registration: Option<String>,
    /// estimate one transform per session and reuse it for every condition
    #[arg(long, global = true)]
    pub shared_session_transform: bool,
    /// nmi | mi | je | cr | woods
    #[arg(long, global = true)]
    pub metric: Option<String>,
    #[arg(long, global = true)]
    pub bins: Option<usize>,
    /// pyramid factors, coarse to fine, e.g. 4,2,1
    #[arg(long, global = true, value_delimiter = ',')]
    pub levels: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub max_sweeps: Option<usize>,
    #[arg(long, global = true)]
    pub tolerance: Option<f64>,
    /// probability cut for active-region masks
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
}

impl SettingFlags {
    pub fn to_map(&self) -> Map<String, Value> {
        let mut m = Map::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("seed", self.seed.map(Value::from));
        put("max_depth", self.max_depth.map(Value::from));
        put("min_leaf_fraction", self.min_leaf_fraction.map(Value::from));
        put("weighting", self.weighting.clone().map(Value::from));
        put("normalize", self.normalize.map(Value::from));
        put("noise", self.noise.clone().map(Value::from));
        put("rho", self.rho.map(Value::from));
        put("window", self.window.map(Value::from));
        put("hrf_duration_s", self.hrf_duration_s.map(Value::from));
        put("registration", self.registration.clone().map(Value::from));
        if self.shared_session_transform {
            put("registration", Some(Value::from("session")));
        }
        put("metric", self.metric.clone().map(Value::from));
        put("bins", self.bins.map(Value::from));
        put("levels", self.levels.clone().map(Value::from));
        put("max_sweeps", self.max_sweeps.map(Value::from));
        put("tolerance", self.tolerance.map(Value::from));
        put("threshold", self.threshold.map(Value::from));
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Units {
    Scans,
    Seconds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Space {
    Feature,
    Voxel,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the HRF-convolved design matrix of a schedule as CSV
    Design {
        #[arg(long)]
        onsets: PathBuf,
        /// number of scans
        #[arg(long)]
        t: usize,
        #[arg(long)]
        tr_ms: f64,
        #[arg(long, value_enum, default_value = "scans")]
        units: Units,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate per-category betas of one session
    Glm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        onsets: PathBuf,
        #[arg(long, value_enum, default_value = "scans")]
        units: Units,
        /// output prefix: writes <out>.beta-<n>.vol.json and <out>.csv
        #[arg(long)]
        out: PathBuf,
    },
    /// Register a moving image onto a reference
    Register {
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// also write the moving image resampled onto the reference grid
        #[arg(long)]
        resampled: Option<PathBuf>,
    },
    /// Registration error of each metric on the synthetic phantom suite
    RegisterEval {
        #[arg(long, default_value_t = REGISTER_TRIALS)]
        trials: u64,
        /// metrics to compare, comma separated
        #[arg(long, value_delimiter = ',', default_value = "nmi,mi,je,cr,woods")]
        metrics: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract atlas-region features from every session of a manifest
    Features {
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long)]
        atlas: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// also write the registered condition images as voxel features
        #[arg(long)]
        voxels_out: Option<PathBuf>,
        /// keep per-session betas and transforms here (needed by `regions`)
        #[arg(long)]
        stages: Option<PathBuf>,
        /// reuse GLM and registration results across runs
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "scans")]
        units: Units,
    },
    /// Probability map of active voxels for one category across sessions
    Regions {
        /// directory written by `features --stages`
        #[arg(long)]
        stages: PathBuf,
        #[arg(long)]
        atlas: PathBuf,
        #[arg(long)]
        category: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Train a binary model for one category or the multiclass decoder
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, conflicts_with = "multiclass", required_unless_present = "multiclass")]
        category: Option<u32>,
        #[arg(long)]
        multiclass: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a trained model to a feature file
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-one-subject-out evaluation
    Eval {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Between-category correlation matrix
    Corr {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_enum, default_value = "feature")]
        space: Space,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset with its ground truth
    Synth {
        /// glm | register | classify | full
        #[arg(long)]
        preset: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failed invocation as reported on stderr.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Failure {
    pub code: String,
    pub message: String,
    #[serde(skip)]
    pub exit: i32,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: e.code().to_string(),
            message: e.to_string(),
            exit: e.class().exit_code(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: "cli.usage".into(),
        message: message.into(),
        exit: ErrorClass::Validation.exit_code(),
    }
}

/// Run `apa` with explicit arguments and environment. Standard output
/// receives the command's one-line JSON summary.
pub fn run<I, T>(args: I, env: &[(String, String)], stdout: &mut dyn Write) -> Result<(), Failure>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{}", e.render());
                return Ok(());
            }
            return Err(usage(e.render().to_string().trim_end()));
        }
    };
    if cli.version {
        let line = if cli.json {
            json!({"tool": TOOL, "version": VERSION, "rng_algorithm": apa_core::rng::RNG_ALGORITHM}).to_string()
        } else {
            format!("{TOOL} {VERSION}")
        };
        let _ = writeln!(stdout, "{line}");
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(usage("no subcommand given; see --help"));
    };
    let file = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Some(parse_config_file(&text, &p.display().to_string())?)
        }
        None => None,
    };
    let settings = resolve(file.as_ref(), env, &cli.settings.to_map())?;
    let threads = cli.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| usage(format!("thread pool: {e}")))?;
    let summary = pool.install(|| dispatch(command, &settings))?;
    let _ = writeln!(stdout, "{summary}");
    Ok(())
}

/// Entry point for the binary: runs, reports failures as one JSON line on
/// stderr and returns the exit code.
pub fn main_with<I, T>(args: I, env: &[(String, String)]) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut out = std::io::stdout().lock();
    match run(args, env, &mut out) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{}", serde_json::to_string(&f).expect("failure serialises"));
            f.exit
        }
    }
}

fn units(u: Units, tr_ms: f64) -> OnsetUnits {
    match u {
        Units::Scans => OnsetUnits::Scans,
        Units::Seconds => OnsetUnits::Seconds { tr_ms },
    }
}

fn noise_model(setting: NoiseSetting, data: &apa_core::data::Volume4D, design: &apa_core::design::DesignMatrix) -> apa_core::Result<NoiseModel> {
    match setting {
        NoiseSetting::Identity => Ok(NoiseModel::Identity),
        NoiseSetting::Ar1 { rho } => NoiseModel::ar1(rho),
        NoiseSetting::Estimate => estimate_ar1(data, design),
    }
}

/// Single-category model file written by `train --category`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinaryModel {
    pub kind: String,
    pub category: u32,
    pub region_ids: Vec<String>,
    pub ensemble: BinaryEnsemble,
}

pub const BINARY_KIND: &str = "binary";

/// Per-session results kept by `features --stages` for `regions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageIndex {
    pub sessions: Vec<SessionStage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionStage {
    pub id: String,
    pub noise: NoiseModel,
    /// native-grid betas, one volume per category, relative to the stage directory
    pub betas: Vec<PathBuf>,
    pub transforms: Vec<ConditionTransform>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionTransform {
    pub condition: u32,
    pub category: u32,
    pub transform: AffineTransform,
}

pub const STAGE_INDEX: &str = "stages.json";

fn csv_f64(v: f64) -> String {
    format!("{v:?}")
}

fn dispatch(command: Command, s: &Settings) -> Result<Value, Failure> {
    match command {
        Command::Design { onsets, t, tr_ms, units: u, out } => {
            let schedule = load_schedule(&onsets, units(u, tr_ms))?;
            schedule.validate(t)?;
            let hrf = canonical_hrf(tr_ms, s.hrf_duration_s)?;
            let design = build_design_matrix(&schedule, t, &hrf)?;
            write_text(&out, &design.to_csv())?;
            let mut m = Manifest::new("design", s);
            m.input(&onsets)?.output(&out).write_for(&out)?;
            Ok(json!({"command": "design", "scans": t, "categories": design.category_count()}))
        }
        Command::Glm { data, onsets, units: u, out } => {
            let vol = load_volume4d(&data)?;
            let schedule = load_schedule(&onsets, units(u, vol.tr_ms()))?;
            schedule.validate(vol.scans())?;
            let hrf = canonical_hrf(vol.tr_ms(), s.hrf_duration_s)?;
            let design = build_design_matrix(&schedule, vol.scans(), &hrf)?;
            let noise = noise_model(s.noise_setting(), &vol, &design)?;
            let betas = solve_gls(&vol, &design, noise)?;
            let mut m = Manifest::new("glm", s);
            m.input(&data)?.input(&onsets)?;
            let prefix = out.display().to_string();
            for n in 1..=betas.category_count as u32 {
                let p = PathBuf::from(format!("{prefix}.beta-{n}.vol.json"));
                save_volume3d(&p, &betas.column_volume(n)?)?;
                m.output(&p);
            }
            let csv_path = PathBuf::from(format!("{prefix}.csv"));
            let mut csv = String::from("voxel");
            for n in 1..=betas.category_count {
                csv.push_str(&format!(",beta_{n}"));
            }
            csv.push('\n');
            for v in 0..betas.voxel_count() {
                csv.push_str(&v.to_string());
                for n in 0..betas.category_count {
                    csv.push(',');
                    csv.push_str(&csv_f64(betas.get(v, n)));
                }
                csv.push('\n');
            }
            write_text(&csv_path, &csv)?;
            m.output(&csv_path).write_for(&csv_path)?;
            Ok(json!({"command": "glm", "noise": noise, "categories": betas.category_count, "voxels": betas.voxel_count()}))
        }
        Command::Register { moving, reference, out, resampled } => {
            let mv = load_volume3d(&moving)?;
            let rf = load_volume3d(&reference)?;
            let result = register(&mv, &rf, &s.registration()?)?;
            save_json(&out, &result)?;
            let mut m = Manifest::new("register", s);
            m.input(&moving)?.input(&reference)?.output(&out);
            if let Some(r) = &resampled {
                save_volume3d(r, &resample(&mv, &result.transform, rf.dims())?)?;
                m.output(r);
            }
            m.write_for(&out)?;
            Ok(json!({"command": "register", "score": result.score, "improved": result.improved}))
        }
        Command::RegisterEval { trials, metrics, out } => {
            let kinds = metrics
                .iter()
                .map(|k| k.parse::<MetricKind>())
                .collect::<apa_core::Result<Vec<_>>>()?;
            let rows = register_suite(&kinds, trials, s)?;
            let mut csv = String::from("metric,trial,translation_error,rotation_error,displacement,similarity_gain,recovered\n");
            for (t, r) in &rows {
                csv.push_str(&format!(
                    "{},{t},{},{},{},{},{}\n",
                    r.metric,
                    csv_f64(r.translation_error),
                    csv_f64(r.rotation_error),
                    csv_f64(r.displacement),
                    csv_f64(r.similarity_gain),
                    r.recovered(RECOVERY_TRANSLATION, RECOVERY_ROTATION)
                ));
            }
            write_text(&out, &csv)?;
            Manifest::new("register-eval", s).output(&out).write_for(&out)?;
            let summary: Vec<Value> = kinds
                .iter()
                .map(|k| {
                    let mine: Vec<&RecoveryTrial> = rows.iter().filter(|(_, r)| r.metric == *k).map(|(_, r)| r).collect();
                    let n = mine.len() as f64;
                    json!({
                        "metric": k,
                        "mean_displacement": mine.iter().map(|r| r.displacement).sum::<f64>() / n,
                        "recovered": mine.iter().filter(|r| r.recovered(RECOVERY_TRANSLATION, RECOVERY_ROTATION)).count(),
                    })
                })
                .collect();
            Ok(json!({"command": "register-eval", "trials": trials, "metrics": summary}))
        }
        Command::Features { sessions, atlas, reference, out, voxels_out, stages, cache_dir, units: u } => {
            let manifest = load_session_manifest(&sessions)?;
            let atlas_vol = load_atlas(&atlas)?;
            let reference_vol = load_volume3d(&reference)?;
            let mut m = Manifest::new("features", s);
            m.input(&sessions)?.input(&atlas)?.input(&reference)?;
            let mut inputs = Vec::with_capacity(manifest.sessions.len());
            for e in &manifest.sessions {
                let data = load_volume4d(&e.data)?;
                let mut schedule = load_schedule(&e.onsets, units(u, data.tr_ms()))?;
                schedule.session_id = e.id.clone();
                let anatomy = e.anatomy.as_deref().map(load_volume3d).transpose()?;
                m.input(&e.data)?.input(&e.onsets)?;
                if let Some(a) = &e.anatomy {
                    m.input(a)?;
                }
                inputs.push(SessionInput { data, schedule, anatomy });
            }
            let config = FeatureConfig {
                keep_voxels: voxels_out.is_some(),
                ..s.features()?
            };
            let cache = cache_dir.map(StageCache::new).transpose()?;
            let ds = build_dataset(&inputs, &atlas_vol, &reference_vol, &config, cache.as_ref())?;
            save_features(&out, &ds.features)?;
            m.output(&out);
            if let (Some(p), Some(v)) = (&voxels_out, &ds.voxels) {
                save_features(p, v)?;
                m.output(p);
            }
            if let Some(dir) = &stages {
                let index = write_stages(dir, &ds.sessions, &inputs)?;
                m.output(&dir.join(STAGE_INDEX));
                let _ = index;
            }
            m.write_for(&out)?;
            let mode = match (config.registration, inputs.iter().all(|i| i.anatomy.is_some())) {
                (RegistrationMode::Auto, true) => RegistrationMode::Session,
                (RegistrationMode::Auto, false) => RegistrationMode::Condition,
                (mode, _) => mode,
            };
            Ok(json!({
                "command": "features",
                "sessions": inputs.len(),
                "columns": ds.features.len(),
                "regions": ds.features.feature_count(),
                "registration": mode,
            }))
        }
        Command::Regions { stages, atlas, category, out, mask } => {
            let index_path = stages.join(STAGE_INDEX);
            let index: StageIndex = load_json(&index_path)?;
            let atlas_vol = load_atlas(&atlas)?;
            let mut m = Manifest::new("regions", s);
            m.input(&index_path)?.input(&atlas)?;
            let mut betas = Vec::with_capacity(index.sessions.len());
            let mut transforms = Vec::with_capacity(index.sessions.len());
            for st in &index.sessions {
                let mut vols = Vec::with_capacity(st.betas.len());
                for b in &st.betas {
                    let p = stages.join(b);
                    m.input(&p)?;
                    vols.push(load_volume3d(&p)?);
                }
                betas.push(beta_map(&st.id, &vols)?);
                let t = st
                    .transforms
                    .iter()
                    .find(|c| c.category == category)
                    .ok_or(Error::UnknownCategory(category))?;
                transforms.push(t.transform);
            }
            let map = active_region_probability(&betas, &transforms, &atlas_vol, category, s.threshold)?;
            save_volume3d(&out, &map.probability)?;
            m.output(&out);
            if let Some(p) = &mask {
                save_volume3d(p, &map.mask)?;
                m.output(p);
            }
            m.write_for(&out)?;
            let active = map.mask.voxels().iter().filter(|&&v| v > 0.0).count();
            Ok(json!({"command": "regions", "category": category, "sessions": betas.len(), "active_voxels": active}))
        }
        Command::Train { features, category, multiclass, out } => {
            let fm = load_features(&features)?;
            let mut m = Manifest::new("train", s);
            m.input(&features)?.output(&out);
            let summary = if multiclass {
                let model = train_multiclass(&fm, &s.boost(), s.seed)?;
                save_model(&out, &model)?;
                json!({"command": "train", "kind": "multiclass", "categories": model.categories})
            } else {
                let c = category.expect("clap enforces --category without --multiclass");
                if !fm.labels.contains(&c) {
                    return Err(Error::UnknownCategory(c).into());
                }
                let y = one_vs_all_labels(&fm.labels, c);
                let ensemble = train_binary(&fm.columns, &y, &s.boost(), s.seed)?;
                let model = BinaryModel {
                    kind: BINARY_KIND.into(),
                    category: c,
                    region_ids: fm.region_ids.clone(),
                    ensemble,
                };
                save_json(&out, &model)?;
                json!({"command": "train", "kind": BINARY_KIND, "category": c, "members": model.ensemble.members.len()})
            };
            m.write_for(&out)?;
            Ok(summary)
        }
        Command::Predict { model, features, out } => {
            let fm = load_features(&features)?;
            let csv = match load_any_model(&model)? {
                AnyModel::Multi(mm) => {
                    check_regions(&mm.region_ids, &fm)?;
                    let mut csv = String::from("column,session,predicted");
                    for c in &mm.categories {
                        csv.push_str(&format!(",margin_{c}"));
                    }
                    csv.push('\n');
                    for (i, x) in fm.columns.iter().enumerate() {
                        let p = predict_multiclass(&mm, x)?;
                        csv.push_str(&format!("{i},{},{}", fm.sessions[i], p.category));
                        for v in &p.margins {
                            csv.push(',');
                            csv.push_str(&csv_f64(*v));
                        }
                        csv.push('\n');
                    }
                    csv
                }
                AnyModel::Binary(bm) => {
                    check_regions(&bm.region_ids, &fm)?;
                    let mut csv = format!("column,session,predicted,margin_{}\n", bm.category);
                    for (i, x) in fm.columns.iter().enumerate() {
                        let (label, margin) = predict_binary(&bm.ensemble, x)?;
                        // 0 stands for "any other category"
                        let said = if label > 0 { bm.category } else { 0 };
                        csv.push_str(&format!("{i},{},{said},{}\n", fm.sessions[i], csv_f64(margin)));
                    }
                    csv
                }
            };
            write_text(&out, &csv)?;
            let mut m = Manifest::new("predict", s);
            m.input(&model)?.input(&features)?.output(&out).write_for(&out)?;
            Ok(json!({"command": "predict", "columns": fm.len()}))
        }
        Command::Eval { features, out, csv } => {
            let fm = load_features(&features)?;
            let report = evaluate(&fm, &s.eval(), s.seed)?;
            let mut m = Manifest::new("eval", s);
            m.input(&features)?.output(&out);
            if let Some(c) = &csv {
                write_text(c, &report_csv(&report))?;
                m.output(c);
                m.write_for(c)?;
            }
            save_json(&out, &EvalOutput { manifest: m.clone(), report: report.clone() })?;
            m.write_for(&out)?;
            Ok(json!({"command": "eval", "folds": report.folds.len(), "accuracy": report.accuracy.mean}))
        }
        Command::Corr { features, space, out } => {
            let fm = load_features(&features)?;
            let looks_voxel = fm.region_ids.iter().all(|r| r.starts_with('v'));
            if (space == Space::Voxel) != looks_voxel {
                return Err(Error::Invalid(format!(
                    "--space {} does not match the feature file's ids",
                    if space == Space::Voxel { "voxel" } else { "feature" }
                ))
                .into());
            }
            let (cats, mat) = correlation_matrix(&fm)?;
            let mut csv = String::from("category");
            for c in &cats {
                csv.push_str(&format!(",{c}"));
            }
            csv.push('\n');
            for (c, row) in cats.iter().zip(&mat) {
                csv.push_str(&c.to_string());
                for v in row {
                    csv.push(',');
                    csv.push_str(&csv_f64(*v));
                }
                csv.push('\n');
            }
            write_text(&out, &csv)?;
            let mut m = Manifest::new("corr", s);
            m.input(&features)?.output(&out).write_for(&out)?;
            Ok(json!({"command": "corr", "space": if space == Space::Voxel { "voxel" } else { "feature" }, "mean_off_diagonal": mean_off_diagonal(&mat)}))
        }
        Command::Synth { preset, out } => {
            let preset: Preset = preset.parse()?;
            let truth = write_preset(preset, s.seed, &out)?;
            let truth_path = out.join("truth.json");
            let mut m = Manifest::new("synth", s);
            for f in &truth.files {
                m.output(&out.join(f));
            }
            m.write_for(&truth_path)?;
            Ok(json!({"command": "synth", "preset": preset, "files": truth.files.len()}))
        }
    }
}

/// `report.json`: the report with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalOutput {
    pub manifest: Manifest,
    pub report: Report,
}

fn check_regions(model_ids: &[String], fm: &FeatureMatrix) -> Result<(), Failure> {
    if model_ids != fm.region_ids.as_slice() {
        return Err(Error::DimMismatch(format!(
            "model expects {} features ({:?}...), file has {}",
            model_ids.len(),
            model_ids.first(),
            fm.region_ids.len()
        ))
        .into());
    }
    Ok(())
}

pub enum AnyModel {
    Multi(EnsembleModel),
    Binary(BinaryModel),
}

pub fn load_any_model(path: &Path) -> apa_core::Result<AnyModel> {
    let value: Value = load_json(path)?;
    if value.get("kind").and_then(Value::as_str) == Some(BINARY_KIND) {
        let m: BinaryModel =
            serde_json::from_value(value).map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))?;
        m.ensemble.validate()?;
        Ok(AnyModel::Binary(m))
    } else {
        load_model(path).map(AnyModel::Multi)
    }
}

fn beta_map(session: &str, vols: &[apa_core::data::Volume3D]) -> apa_core::Result<BetaMap> {
    let first = vols.first().ok_or_else(|| Error::malformed("stages", format!("session {session} has no betas")))?;
    let dims = first.dims();
    let p = vols.len();
    let mut betas = vec![0.0; first.len() * p];
    for (n, v) in vols.iter().enumerate() {
        if v.dims() != dims {
            return Err(Error::DimMismatch(format!("session {session}: beta volumes differ in shape")));
        }
        for (i, b) in v.voxels().iter().enumerate() {
            betas[i * p + n] = *b;
        }
    }
    Ok(BetaMap {
        session_id: session.to_string(),
        dims,
        category_count: p,
        betas,
    })
}

fn write_stages(dir: &Path, outputs: &[apa_core::features::SessionOutput], inputs: &[SessionInput]) -> apa_core::Result<StageIndex> {
    let mut sessions = Vec::with_capacity(outputs.len());
    for (o, i) in outputs.iter().zip(inputs) {
        let mut betas = Vec::with_capacity(o.betas.category_count);
        for n in 1..=o.betas.category_count as u32 {
            let rel = PathBuf::from(format!("{}.beta-{n}.vol.json", o.session_id));
            save_volume3d(&dir.join(&rel), &o.betas.column_volume(n)?)?;
            betas.push(rel);
        }
        let transforms = o
            .transforms
            .iter()
            .map(|(k, t)| ConditionTransform {
                condition: *k,
                category: i.schedule.condition(*k).map(|c| c.category).unwrap_or(0),
                transform: *t,
            })
            .collect();
        sessions.push(SessionStage {
            id: o.session_id.clone(),
            noise: o.noise,
            betas,
            transforms,
        });
    }
    let index = StageIndex { sessions };
    save_json(&dir.join(STAGE_INDEX), &index)?;
    Ok(index)
}

/// Every metric on every phantom trial, in (metric, trial) order.
pub fn register_suite(kinds: &[MetricKind], trials: u64, s: &Settings) -> apa_core::Result<Vec<(u64, RecoveryTrial)>> {
    let base = s.registration()?;
    let jobs: Vec<(MetricKind, u64)> = kinds.iter().flat_map(|&k| (0..trials).map(move |t| (k, t))).collect();
    jobs.par_iter()
        .map(|&(kind, t)| {
            let case = registration_case(s.seed, t)?;
            let config = RegistrationConfig {
                metric: apa_core::register::SimilarityMetric { kind, bins: base.metric.bins },
                ..base.clone()
            };
            Ok((t, recovery_trial(&case.moving, &case.reference, &case.planted, &config)?))
        })
        .collect()
}
