//! End-to-end run: normalize, fit, score, evaluate, compare, summarize.
//!
//! Output layout below `out_dir`:
//!
//! ```text
//! normalized/{train,test}/<id>.nii
//! models/{bm,cm,pm}.sbad
//! zmaps/{train,test}/<id>.nii
//! scores/<method>/<id>.nii
//! reports/eval_<method>.json, sample_scores_<method>.csv
//! reports/bootstrap_{ap,auc}.json, reports/wilcoxon.json
//! summary.json, summary.csv, MANIFEST.json
//! ```
//!
//! Every JSON output is a function of the inputs and config only: paths are
//! relative to `out_dir` and nothing records wall-clock time.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{fit_baseline, score_zmap, BaselineModel, FitOptions, ZMap, DEFAULT_SLAB_VOXELS};
use crate::covariance::{fit_covariance, CovarianceModel};
use crate::error::{Error, Result};
use crate::metrics::{
    median, sample_score, voxel_task_eval, EvalReport, LabeledScores, Task, VoxelPair, VoxelPooling,
};
use crate::phantom::Role;
use crate::preprocess::{normalize_study, NormalizedStudy};
use crate::projection::{fit_projection, BasisStorage, ProjectionModel, ProjectionOptions, ProjectionVariant};
use crate::source::{read_list, resolve, NiftiFiles};
use crate::stats::{
    bonferroni_threshold, bootstrap_compare, wilcoxon_signed_rank, BootstrapConfig, BootstrapResult, Metric,
    PairedTestResult,
};
use crate::volume::{read_head_mask, read_mask, read_multichannel, read_score_map, write_volume, HeadMask, ScoreMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "bm")]
    Bm,
    #[serde(rename = "cm")]
    Cm,
    #[serde(rename = "pm")]
    Pm,
    #[serde(rename = "ae-external")]
    AeExternal,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Bm => "bm",
            Method::Cm => "cm",
            Method::Pm => "pm",
            Method::AeExternal => "ae-external",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bm" => Ok(Method::Bm),
            "cm" => Ok(Method::Cm),
            "pm" => Ok(Method::Pm),
            "ae-external" => Ok(Method::AeExternal),
            other => Err(Error::Invalid(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Load,
    Normalize,
    Fit,
    Score,
    Eval,
    Compare,
    Summary,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("stage serializes");
        f.write_str(s.as_str().expect("stage is a string"))
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

fn default_iters() -> usize {
    100_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSettings {
    #[serde(default = "default_iters")]
    pub iters: usize,
    /// Level of the difference intervals; defaults to the Bonferroni-corrected alpha.
    #[serde(default)]
    pub alpha: Option<f64>,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        Self {
            iters: default_iters(),
            alpha: None,
        }
    }
}

fn default_models() -> Vec<Method> {
    vec![Method::Bm, Method::Cm, Method::Pm]
}
fn default_tasks() -> Vec<Task> {
    vec![Task::Voxel, Task::Sample]
}
fn default_out_dir() -> PathBuf {
    "out".into()
}
fn default_alpha() -> f64 {
    0.05
}
fn default_slab() -> usize {
    DEFAULT_SLAB_VOXELS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub train_list: PathBuf,
    pub test_healthy_list: PathBuf,
    pub test_pathological_list: PathBuf,
    pub mask: PathBuf,
    #[serde(default = "default_models")]
    pub models: Vec<Method>,
    #[serde(default = "default_tasks")]
    pub tasks: Vec<Task>,
    #[serde(default)]
    pub bootstrap: BootstrapSettings,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Directory holding `<id>.nii` score maps for `ae-external`.
    #[serde(default)]
    pub ae_scores_dir: Option<PathBuf>,
    #[serde(default)]
    pub voxel_pooling: VoxelPooling,
    #[serde(default)]
    pub projection_variant: ProjectionVariant,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Number of tests for the Bonferroni correction; derived from the
    /// method and task counts when absent.
    #[serde(default)]
    pub bonferroni_tests: Option<usize>,
    #[serde(default = "default_slab")]
    pub slab_voxels: usize,
}

impl PipelineConfig {
    /// Reads a config file, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io_at(path))?;
        let mut config: PipelineConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.train_list,
            &mut self.test_healthy_list,
            &mut self.test_pathological_list,
            &mut self.mask,
            &mut self.out_dir,
        ] {
            *p = resolve(base, &*p);
        }
        if let Some(p) = &mut self.ae_scores_dir {
            *p = resolve(base, &*p);
        }
    }

    /// A config for the list files written by the phantom generator.
    pub fn for_phantom() -> Self {
        Self {
            train_list: "train.txt".into(),
            test_healthy_list: "test_healthy.txt".into(),
            test_pathological_list: "test_pathological.txt".into(),
            mask: "mask.nii".into(),
            models: default_models(),
            tasks: default_tasks(),
            bootstrap: BootstrapSettings::default(),
            out_dir: default_out_dir(),
            seed: 0,
            ae_scores_dir: None,
            voxel_pooling: VoxelPooling::default(),
            projection_variant: ProjectionVariant::default(),
            alpha: default_alpha(),
            bonferroni_tests: None,
            slab_voxels: default_slab(),
        }
    }

    fn methods(&self) -> Vec<Method> {
        let set: BTreeSet<Method> = self.models.iter().copied().collect();
        set.into_iter().collect()
    }

    fn has_task(&self, task: Task) -> bool {
        self.tasks.contains(&task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Invalid("at least one model is required".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Invalid("at least one task is required".into()));
        }
        if self.models.contains(&Method::AeExternal) && self.ae_scores_dir.is_none() {
            return Err(Error::Invalid("ae-external needs ae_scores_dir".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Invalid(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if self.bootstrap.iters == 0 {
            return Err(Error::Invalid("bootstrap iters must be at least 1".into()));
        }
        Ok(())
    }

    /// Bonferroni test count: one test per method pair, metric and task
    /// unless configured.
    pub fn test_count(&self) -> usize {
        let m = self.methods().len();
        self.bonferroni_tests
            .unwrap_or_else(|| (m * m.saturating_sub(1) / 2 * 2 * self.tasks.len()).max(1))
    }
}

#[derive(Clone, Debug)]
struct Study {
    id: String,
    role: Role,
    raw: PathBuf,
    lesion: Option<PathBuf>,
}

impl Study {
    fn subdir(&self) -> &'static str {
        if self.role == Role::Train {
            "train"
        } else {
            "test"
        }
    }

    fn normalized(&self) -> PathBuf {
        Path::new("normalized").join(self.subdir()).join(format!("{}.nii", self.id))
    }

    fn zmap(&self) -> PathBuf {
        Path::new("zmaps").join(self.subdir()).join(format!("{}.nii", self.id))
    }
}

fn score_path(method: Method, id: &str) -> PathBuf {
    Path::new("scores").join(method.name()).join(format!("{id}.nii"))
}

fn study_id(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.strip_suffix(".nii").unwrap_or(&name).to_string()
}

fn read_studies(list: &Path, role: Role) -> Result<Vec<Study>> {
    read_list(list)?
        .into_iter()
        .map(|cols| {
            let lesion = cols.get(1).cloned();
            if role == Role::Pathological && lesion.is_none() {
                return Err(Error::Invalid(format!(
                    "{}: pathological entries need a lesion mask column",
                    list.display()
                )));
            }
            Ok(Study {
                id: study_id(&cols[0]),
                role,
                raw: cols[0].clone(),
                lesion,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub healthy: String,
    pub pathological: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelSummary {
    pub pooling: VoxelPooling,
    pub pairs: Vec<PairReport>,
    pub median_ap: f64,
    pub median_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodEval {
    pub method: Method,
    pub voxel: Option<VoxelSummary>,
    pub sample: Option<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonEntry {
    pub metric: Metric,
    pub a: Method,
    pub b: Method,
    pub result: Option<PairedTestResult>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub ap_voxel: Option<f64>,
    pub auc_voxel: Option<f64>,
    pub ap_sample: Option<f64>,
    pub auc_sample: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub n_train: usize,
    pub n_test_healthy: usize,
    pub n_test_pathological: usize,
    pub voxel_pairs: usize,
    pub alpha: f64,
    pub bonferroni_tests: usize,
    pub alpha_corrected: f64,
    pub rows: Vec<SummaryRow>,
}

impl PipelineSummary {
    pub fn row(&self, method: Method) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("method,ap_voxel,auc_voxel,ap_sample,auc_sample\n");
        for r in &self.rows {
            out += &format!(
                "{},{},{},{},{}\n",
                r.method,
                cell(r.ap_voxel),
                cell(r.auc_voxel),
                cell(r.ap_sample),
                cell(r.auc_sample)
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub complete: bool,
    pub stages_completed: Vec<Stage>,
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
    pub outputs: Vec<PathBuf>,
}

struct Run<'a> {
    config: &'a PipelineConfig,
    out: PathBuf,
    outputs: BTreeSet<PathBuf>,
    completed: Vec<Stage>,
}

impl Run<'_> {
    fn path(&self, rel: &Path) -> PathBuf {
        self.out.join(rel)
    }

    fn ensure_parent(&self, rel: &Path) -> Result<PathBuf> {
        let full = self.path(rel);
        if let Some(dir) = full.parent() {
            fs::create_dir_all(dir).map_err(Error::io_at(dir))?;
        }
        Ok(full)
    }

    fn write_text(&mut self, rel: impl AsRef<Path>, text: &str) -> Result<()> {
        let rel = rel.as_ref();
        let full = self.ensure_parent(rel)?;
        fs::write(&full, text).map_err(Error::io_at(&full))?;
        self.outputs.insert(rel.to_path_buf());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: impl AsRef<Path>, value: &T) -> Result<()> {
        self.write_text(rel, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn write_manifest(&self, failure: Option<(Stage, &Error)>) -> Result<()> {
        let manifest = RunManifest {
            complete: failure.is_none(),
            stages_completed: self.completed.clone(),
            failed_stage: failure.map(|(s, _)| s),
            error: failure.map(|(_, e)| e.to_string()),
            outputs: self.outputs.iter().cloned().collect(),
        };
        fs::create_dir_all(&self.out).map_err(Error::io_at(&self.out))?;
        let p = self.out.join("MANIFEST.json");
        fs::write(&p, serde_json::to_string_pretty(&manifest)? + "\n").map_err(Error::io_at(&p))
    }
}

struct Inputs {
    mask: HeadMask,
    train: Vec<Study>,
    healthy: Vec<Study>,
    pathological: Vec<Study>,
}

impl Inputs {
    fn tests(&self) -> impl Iterator<Item = &Study> {
        self.healthy.iter().chain(&self.pathological)
    }
}

struct Models {
    bm: Option<BaselineModel>,
    cm: Option<CovarianceModel>,
    pm: Option<ProjectionModel>,
}

/// Runs the whole protocol. On failure a `MANIFEST.json` marking the run
/// incomplete is left next to whatever outputs were already written.
pub fn run_pipeline(config: &PipelineConfig) -> std::result::Result<PipelineSummary, PipelineError> {
    let mut run = Run {
        config,
        out: config.out_dir.clone(),
        outputs: BTreeSet::new(),
        completed: Vec::new(),
    };
    let result = run_stages(&mut run);
    match result {
        Ok(summary) => {
            run.write_manifest(None).map_err(|source| PipelineError {
                stage: Stage::Summary,
                source,
            })?;
            Ok(summary)
        }
        Err(e) => {
            // best effort; the original error is what the caller needs
            let _ = run.write_manifest(Some((e.stage, &e.source)));
            Err(e)
        }
    }
}

fn stage<T>(run: &mut Run<'_>, stage: Stage, f: impl FnOnce(&mut Run<'_>) -> Result<T>) -> std::result::Result<T, PipelineError> {
    info!("stage {stage}");
    let value = f(run).map_err(|source| PipelineError { stage, source })?;
    run.completed.push(stage);
    Ok(value)
}

fn run_stages(run: &mut Run<'_>) -> std::result::Result<PipelineSummary, PipelineError> {
    let inputs = stage(run, Stage::Load, load_inputs)?;
    stage(run, Stage::Normalize, |r| normalize_all(r, &inputs))?;
    let models = stage(run, Stage::Fit, |r| fit_models(r, &inputs))?;
    stage(run, Stage::Score, |r| score_all(r, &inputs, &models))?;
    drop(models);
    let (evals, sample_scores) = stage(run, Stage::Eval, |r| evaluate(r, &inputs))?;
    stage(run, Stage::Compare, |r| compare(r, &inputs, &evals, &sample_scores))?;
    stage(run, Stage::Summary, |r| summarize(r, &inputs, &evals))
}

fn load_inputs(run: &mut Run<'_>) -> Result<Inputs> {
    let c = run.config;
    c.validate()?;
    let mask = read_head_mask(&c.mask)?;
    let train = read_studies(&c.train_list, Role::Train)?;
    let healthy = read_studies(&c.test_healthy_list, Role::Healthy)?;
    let pathological = read_studies(&c.test_pathological_list, Role::Pathological)?;
    if train.len() < 2 {
        return Err(Error::TooFewStudies);
    }
    if healthy.is_empty() || pathological.is_empty() {
        return Err(Error::Invalid("need at least one healthy and one pathological test study".into()));
    }
    for (what, group) in [("training", train.iter().collect::<Vec<_>>()), ("test", healthy.iter().chain(&pathological).collect())] {
        let mut seen = BTreeSet::new();
        if let Some(dup) = group.iter().find(|s| !seen.insert(s.id.as_str())) {
            return Err(Error::Invalid(format!("duplicate {what} study id {:?}", dup.id)));
        }
    }
    if c.models.contains(&Method::AeExternal) {
        let dir = c.ae_scores_dir.as_ref().expect("validated");
        for s in healthy.iter().chain(&pathological) {
            let p = dir.join(format!("{}.nii", s.id));
            if !p.is_file() {
                return Err(Error::MissingExternalScores(p));
            }
        }
    }
    fs::create_dir_all(&run.out).map_err(Error::io_at(&run.out))?;
    info!(
        "{} training, {} healthy and {} pathological studies",
        train.len(),
        healthy.len(),
        pathological.len()
    );
    Ok(Inputs {
        mask,
        train,
        healthy,
        pathological,
    })
}

fn normalize_all(run: &mut Run<'_>, inputs: &Inputs) -> Result<()> {
    let all: Vec<&Study> = inputs.train.iter().chain(inputs.tests()).collect();
    for s in &all {
        run.ensure_parent(&s.normalized())?;
    }
    let out = &run.out;
    all.par_iter()
        .map(|s| {
            let raw = read_multichannel(&s.raw)?;
            let norm = normalize_study(&raw, &inputs.mask)?;
            write_volume(norm.volume(), out.join(s.normalized()))
        })
        .collect::<Result<()>>()?;
    run.outputs.extend(all.iter().map(|s| s.normalized()));
    Ok(())
}

fn load_normalized(run: &Run<'_>, s: &Study) -> Result<NormalizedStudy> {
    Ok(NormalizedStudy::assume_normalized(read_multichannel(run.path(&s.normalized()))?))
}

fn fit_models(run: &mut Run<'_>, inputs: &Inputs) -> Result<Models> {
    let c = run.config;
    let methods = c.methods();
    let opts = FitOptions {
        slab_voxels: c.slab_voxels,
    };
    let source = NiftiFiles::open(inputs.train.iter().map(|s| run.path(&s.normalized())).collect())?;
    let mut models = Models {
        bm: None,
        cm: None,
        pm: None,
    };
    fs::create_dir_all(run.path(Path::new("models"))).map_err(Error::io_at(run.path(Path::new("models"))))?;

    if methods.contains(&Method::Bm) || methods.contains(&Method::Pm) {
        let bm = fit_baseline(&source, &inputs.mask, opts)?;
        info!("baseline: {} degenerate voxel channels", bm.degenerate_count());
        let rel = PathBuf::from("models/bm.sbad");
        bm.save(&run.path(&rel))?;
        run.outputs.insert(rel);

        for s in &inputs.train {
            run.ensure_parent(&s.zmap())?;
        }
        inputs
            .train
            .par_iter()
            .map(|s| write_volume(bm.z_transform(&load_normalized(run, s)?)?.volume(), run.path(&s.zmap())))
            .collect::<Result<()>>()?;
        run.outputs.extend(inputs.train.iter().map(|s| s.zmap()));
        models.bm = Some(bm);
    }
    if methods.contains(&Method::Cm) {
        let cm = fit_covariance(&source, &inputs.mask, opts)?;
        let (ridge, diagonal) = cm.regularized_counts();
        info!("covariance: {ridge} ridge and {diagonal} diagonal voxels");
        let rel = PathBuf::from("models/cm.sbad");
        cm.save(&run.path(&rel))?;
        run.outputs.insert(rel);
        models.cm = Some(cm);
    }
    if methods.contains(&Method::Pm) {
        let bm = models.bm.as_ref().expect("fitted above");
        let rel = PathBuf::from("models/pm.sbad");
        let full = run.path(&rel);
        let zmaps = inputs
            .train
            .iter()
            .map(|s| read_multichannel(run.path(&s.zmap())).map(ZMap::new));
        let opts = ProjectionOptions {
            variant: c.projection_variant,
            ..Default::default()
        };
        let pm = fit_projection(zmaps, &inputs.mask, opts, BasisStorage::File(full.clone()))?;
        info!("projection: rank {} of {}", pm.rank(), pm.n_train());
        pm.save(&full, bm)?;
        run.outputs.insert(rel);
        models.pm = Some(pm);
    }
    Ok(models)
}

fn score_all(run: &mut Run<'_>, inputs: &Inputs, models: &Models) -> Result<()> {
    let methods = run.config.methods();
    let tests: Vec<&Study> = inputs.tests().collect();
    let mut rels = Vec::new();
    for s in &tests {
        if models.bm.is_some() {
            rels.push(s.zmap());
        }
        for &m in &methods {
            if m != Method::AeExternal {
                rels.push(score_path(m, &s.id));
            }
        }
    }
    for rel in &rels {
        run.ensure_parent(rel)?;
    }
    let write = |s: &Study, m: Method, map: &ScoreMap| write_volume(map, run.path(&score_path(m, &s.id)));
    tests
        .par_iter()
        .map(|s| {
            let study = load_normalized(run, s)?;
            if let Some(bm) = &models.bm {
                let z = bm.z_transform(&study)?;
                write_volume(z.volume(), run.path(&s.zmap()))?;
                if methods.contains(&Method::Bm) {
                    write(s, Method::Bm, &score_zmap(&z, &inputs.mask)?)?;
                }
                if let Some(pm) = &models.pm {
                    write(s, Method::Pm, &pm.score(&z)?.1)?;
                }
            }
            if let Some(cm) = &models.cm {
                write(s, Method::Cm, &cm.score(&study)?)?;
            }
            Ok(())
        })
        .collect::<Result<()>>()?;
    run.outputs.extend(rels);
    Ok(())
}

fn load_scores(run: &Run<'_>, method: Method, s: &Study, mask: &HeadMask) -> Result<ScoreMap> {
    let path = match method {
        Method::AeExternal => {
            let p = run.config.ae_scores_dir.as_ref().expect("validated").join(format!("{}.nii", s.id));
            if !p.is_file() {
                return Err(Error::MissingExternalScores(p));
            }
            p
        }
        _ => run.path(&score_path(method, &s.id)),
    };
    let map = read_score_map(&path)?;
    mask.ensure_dims(map.dims())?;
    Ok(map)
}

/// Per-method evaluations and the sample-score matrix (methods x test studies).
type EvalOutput = (Vec<MethodEval>, Vec<Vec<f64>>);

fn evaluate(run: &mut Run<'_>, inputs: &Inputs) -> Result<EvalOutput> {
    let c = run.config;
    let mask = &inputs.mask;
    let lesions = inputs
        .pathological
        .par_iter()
        .map(|s| {
            let lesion = read_mask(s.lesion.as_ref().expect("checked on load"))?;
            mask.ensure_dims(lesion.dims())?;
            Ok(lesion)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<bool> = inputs.tests().map(|s| s.role == Role::Pathological).collect();
    let mut evals = Vec::new();
    let mut sample_matrix = Vec::new();
    for method in c.methods() {
        let healthy = inputs
            .healthy
            .par_iter()
            .map(|s| load_scores(run, method, s, mask))
            .collect::<Result<Vec<_>>>()?;
        let pathological = inputs
            .pathological
            .par_iter()
            .map(|s| load_scores(run, method, s, mask))
            .collect::<Result<Vec<_>>>()?;

        let voxel = if c.has_task(Task::Voxel) {
            let pairs: Vec<VoxelPair> = healthy
                .iter()
                .zip(&pathological)
                .zip(&lesions)
                .map(|((h, p), l)| VoxelPair {
                    healthy: h,
                    pathological: p,
                    lesion: l,
                })
                .collect();
            let reports = voxel_task_eval(method.name(), &pairs, mask, c.voxel_pooling)?;
            let aps: Vec<f64> = reports.iter().map(|r| r.ap).collect();
            let aucs: Vec<f64> = reports.iter().map(|r| r.auc).collect();
            let pairs = reports
                .into_iter()
                .zip(inputs.healthy.iter().zip(&inputs.pathological))
                .map(|(report, (h, p))| PairReport {
                    healthy: h.id.clone(),
                    pathological: p.id.clone(),
                    report,
                })
                .collect();
            Some(VoxelSummary {
                pooling: c.voxel_pooling,
                pairs,
                median_ap: median(&aps).expect("at least one pair"),
                median_auc: median(&aucs).expect("at least one pair"),
            })
        } else {
            None
        };

        let scores = healthy
            .iter()
            .chain(&pathological)
            .map(|m| sample_score(m, mask))
            .collect::<Result<Vec<f64>>>()?;
        let mut csv = String::from("id,label,score\n");
        for ((s, &label), score) in inputs.tests().zip(&labels).zip(&scores) {
            csv += &format!("{},{},{}\n", s.id, label as u8, score);
        }
        run.write_text(format!("reports/sample_scores_{method}.csv"), &csv)?;
        let sample = if c.has_task(Task::Sample) {
            let data = LabeledScores::new(scores.clone(), labels.clone())?;
            Some(EvalReport::evaluate(method.name(), Task::Sample, &data)?)
        } else {
            None
        };
        let eval = MethodEval { method, voxel, sample };
        run.write_json(format!("reports/eval_{method}.json"), &eval)?;
        evals.push(eval);
        sample_matrix.push(scores);
    }
    Ok((evals, sample_matrix))
}

fn compare(run: &mut Run<'_>, inputs: &Inputs, evals: &[MethodEval], sample_scores: &[Vec<f64>]) -> Result<()> {
    let c = run.config;
    if evals.len() < 2 {
        info!("single method, nothing to compare");
        return Ok(());
    }
    let m_tests = c.test_count();
    let alpha_star = bonferroni_threshold(c.alpha, m_tests)?;
    if c.has_task(Task::Sample) {
        let names: Vec<String> = evals.iter().map(|e| e.method.name().to_string()).collect();
        let labels: Vec<bool> = inputs.tests().map(|s| s.role == Role::Pathological).collect();
        for metric in [Metric::Ap, Metric::Auc] {
            let cfg = BootstrapConfig {
                metric,
                iters: c.bootstrap.iters,
                seed: c.seed,
                alpha: c.bootstrap.alpha.unwrap_or(alpha_star),
            };
            let result: BootstrapResult = bootstrap_compare(&names, sample_scores, &labels, &cfg)?;
            run.write_json(format!("reports/bootstrap_{}.json", metric.name()), &result)?;
        }
    }
    if c.has_task(Task::Voxel) {
        let mut entries = Vec::new();
        for metric in [Metric::Ap, Metric::Auc] {
            let values = |e: &MethodEval| -> Vec<f64> {
                let pairs = &e.voxel.as_ref().expect("voxel task ran").pairs;
                pairs
                    .iter()
                    .map(|p| match metric {
                        Metric::Ap => p.report.ap,
                        Metric::Auc => p.report.auc,
                    })
                    .collect()
            };
            for i in 0..evals.len() {
                for j in i + 1..evals.len() {
                    let (a, b) = (&evals[i], &evals[j]);
                    let outcome = wilcoxon_signed_rank(&values(a), &values(b))
                        .and_then(|w| PairedTestResult::new(a.method.name(), b.method.name(), &w, m_tests));
                    let (result, error) = match outcome {
                        Ok(r) => (Some(r), None),
                        Err(e) => (None, Some(e.to_string())),
                    };
                    entries.push(WilcoxonEntry {
                        metric,
                        a: a.method,
                        b: b.method,
                        result,
                        error,
                    });
                }
            }
        }
        run.write_json("reports/wilcoxon.json", &entries)?;
    }
    Ok(())
}

fn summarize(run: &mut Run<'_>, inputs: &Inputs, evals: &[MethodEval]) -> Result<PipelineSummary> {
    let c = run.config;
    let m_tests = c.test_count();
    let summary = PipelineSummary {
        n_train: inputs.train.len(),
        n_test_healthy: inputs.healthy.len(),
        n_test_pathological: inputs.pathological.len(),
        voxel_pairs: inputs.healthy.len().min(inputs.pathological.len()),
        alpha: c.alpha,
        bonferroni_tests: m_tests,
        alpha_corrected: bonferroni_threshold(c.alpha, m_tests)?,
        rows: evals
            .iter()
            .map(|e| SummaryRow {
                method: e.method,
                ap_voxel: e.voxel.as_ref().map(|v| v.median_ap),
                auc_voxel: e.voxel.as_ref().map(|v| v.median_auc),
                ap_sample: e.sample.as_ref().map(|s| s.ap),
                auc_sample: e.sample.as_ref().map(|s| s.auc),
            })
            .collect(),
    };
    run.write_json("summary.json", &summary)?;
    run.write_text("summary.csv", &summary.to_csv())?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};

    fn phantom_dir(n_test: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let c = PhantomConfig {
            dims: [12, 12, 12],
            n_train: 8,
            n_test_healthy: n_test,
            n_test_pathological: n_test,
            lesion_fraction: 0.05,
            ..Default::default()
        };
        generate_phantom(&c, dir.path()).unwrap();
        dir
    }

    fn config(dir: &Path, models: Vec<Method>) -> PipelineConfig {
        let mut c = PipelineConfig {
            models,
            bootstrap: BootstrapSettings {
                iters: 200,
                alpha: None,
            },
            ..PipelineConfig::for_phantom()
        };
        c.resolve_paths(dir);
        c
    }

    #[test]
    fn config_defaults_and_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        fs::write(
            &p,
            r#"{"train_list": "a.txt", "test_healthy_list": "/abs/h.txt",
                "test_pathological_list": "p.txt", "mask": "m.nii", "models": ["bm", "ae-external"],
                "ae_scores_dir": "ae"}"#,
        )
        .unwrap();
        let c = PipelineConfig::load(&p).unwrap();
        assert_eq!(c.train_list, dir.path().join("a.txt"));
        assert_eq!(c.test_healthy_list, PathBuf::from("/abs/h.txt"));
        assert_eq!(c.ae_scores_dir, Some(dir.path().join("ae")));
        assert_eq!(c.tasks, vec![Task::Voxel, Task::Sample]);
        assert_eq!(c.bootstrap.iters, 100_000);
        assert_eq!(c.test_count(), 4);
        let four = PipelineConfig {
            models: vec![Method::Bm, Method::Cm, Method::Pm, Method::AeExternal],
            ..c
        };
        assert_eq!(four.test_count(), 24);
    }

    #[test]
    fn runs_on_phantom() {
        let dir = phantom_dir(5);
        let c = config(dir.path(), vec![Method::Bm, Method::Cm]);
        let summary = run_pipeline(&c).unwrap();
        assert_eq!(summary.rows.len(), 2);
        for r in &summary.rows {
            for v in [r.ap_voxel, r.auc_voxel, r.ap_sample, r.auc_sample] {
                assert!((0.0..=1.0).contains(&v.unwrap()));
            }
        }
        let out = dir.path().join("out");
        let manifest: RunManifest =
            serde_json::from_str(&fs::read_to_string(out.join("MANIFEST.json")).unwrap()).unwrap();
        assert!(manifest.complete);
        assert_eq!(manifest.stages_completed.len(), 7);
        for rel in &manifest.outputs {
            assert!(out.join(rel).is_file(), "{}", rel.display());
        }
        // intermediate artifacts reload
        BaselineModel::load(&out.join("models/bm.sbad")).unwrap();
        CovarianceModel::load(&out.join("models/cm.sbad")).unwrap();
        read_score_map(out.join("scores/cm/path_000.nii")).unwrap();
        let wilcoxon: Vec<WilcoxonEntry> =
            serde_json::from_str(&fs::read_to_string(out.join("reports/wilcoxon.json")).unwrap()).unwrap();
        assert_eq!(wilcoxon.len(), 2);
        let csv = fs::read_to_string(out.join("summary.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn projection_model_runs_and_reloads() {
        let dir = phantom_dir(2);
        let mut c = config(dir.path(), vec![Method::Pm]);
        c.tasks = vec![Task::Sample];
        let summary = run_pipeline(&c).unwrap();
        assert!(summary.rows[0].ap_voxel.is_none());
        let out = dir.path().join("out");
        let (pm, bm) = ProjectionModel::load(&out.join("models/pm.sbad")).unwrap();
        assert_eq!((pm.n_train(), bm.n_train()), (8, 8));
        assert!(!out.join("reports/bootstrap_auc.json").exists());
    }

    #[test]
    fn missing_external_scores_is_a_stage_error() {
        let dir = phantom_dir(2);
        let mut c = config(dir.path(), vec![Method::Bm, Method::AeExternal]);
        c.ae_scores_dir = Some(dir.path().join("ae"));
        let err = run_pipeline(&c).unwrap_err();
        assert_eq!(err.stage, Stage::Load);
        assert!(err.to_string().contains("missing external scores"), "{err}");
        let manifest: RunManifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join("out/MANIFEST.json")).unwrap()).unwrap();
        assert!(!manifest.complete);
        assert_eq!(manifest.failed_stage, Some(Stage::Load));
    }

    #[test]
    fn external_scores_are_ingested() {
        let dir = phantom_dir(2);
        let ae = dir.path().join("ae");
        fs::create_dir_all(&ae).unwrap();
        let mask = read_head_mask(dir.path().join("mask.nii")).unwrap();
        for id in ["healthy_000", "healthy_001", "path_000", "path_001"] {
            let data = (0..mask.dims().voxels()).map(|v| (v % 5) as f32).collect();
            write_volume(&ScoreMap::masked(&mask, data).unwrap(), ae.join(format!("{id}.nii"))).unwrap();
        }
        let mut c = config(dir.path(), vec![Method::AeExternal, Method::Bm]);
        c.ae_scores_dir = Some(ae);
        let summary = run_pipeline(&c).unwrap();
        assert_eq!(summary.rows[1].method, Method::AeExternal);
        assert!(summary.rows[1].auc_voxel.is_some());
    }
}
