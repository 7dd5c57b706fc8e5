//! Lesion grades from the median over random patches, and patient grades
//! from a percentile over lesion grades.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agreement::{self, AgreementReport, RaterGrades};
use crate::datamodel::{observer_patient_grade, DatasetManifest, Grade, LesionRecord, PatientRecord, Subset};
use crate::error::{Error, Result};
use crate::patchkit::{Patch, PatchSource};
use crate::seed;

/// Anything that maps a patch to a discrete grade.
pub trait PatchGrader {
    fn grade_patch(&self, patch: &Patch) -> Result<Grade>;
}

impl<T: PatchGrader + ?Sized> PatchGrader for &T {
    fn grade_patch(&self, patch: &Patch) -> Result<Grade> {
        (**self).grade_patch(patch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub n_patches: usize,
    pub percentile: f64,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            n_patches: 10,
            percentile: 80.0,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patches == 0 {
            return Err(Error::Config("n_patches must be at least 1".into()));
        }
        check_percentile(self.percentile)
    }
}

fn check_percentile(p: f64) -> Result<()> {
    if (0.0..=100.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Domain(format!("percentile {p} outside [0, 100]")))
    }
}

/// Median of discrete grades. A half-integer median rounds up.
pub fn median_grade(grades: &[Grade]) -> Result<Grade> {
    if grades.is_empty() {
        return Err(Error::EmptyInput("no patch grades"));
    }
    let mut sorted = grades.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        sorted[n / 2 - 1].max(sorted[n / 2])
    })
}

/// Grades `n_patches` unaugmented random patches and returns their median.
/// The patch stream is keyed by the lesion id, so the result does not
/// depend on which other lesions are predicted or in what order.
pub fn predict_lesion(
    grader: &impl PatchGrader,
    source: &PatchSource,
    lesion: &LesionRecord,
    config: &InferenceConfig,
) -> Result<Grade> {
    config.validate()?;
    let mut rng = seed::lesion_stream(config.seed, &lesion.lesion_id);
    let grades = (0..config.n_patches)
        .map(|_| grader.grade_patch(&source.draw(lesion, &mut rng)?))
        .collect::<Result<Vec<_>>>()?;
    median_grade(&grades)
}

/// Nearest-rank percentile: element at rank `ceil(P/100 * n)` of the sorted
/// grades, rank 1 for P = 0.
pub fn patient_grade_percentile(lesion_grades: &[Grade], percentile: f64) -> Result<Grade> {
    check_percentile(percentile)?;
    if lesion_grades.is_empty() {
        return Err(Error::EmptyInput("patient has no lesion grades"));
    }
    let mut sorted = lesion_grades.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let rank = ((percentile / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    Ok(sorted[rank - 1])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LesionPrediction {
    pub lesion_id: String,
    pub patient_id: String,
    pub predicted: Grade,
    pub consensus: Grade,
    pub observers: [Grade; 3],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub predicted: Grade,
    pub consensus: Grade,
    /// Each observer's patient grade (max over their lesion grades).
    pub observers: [Grade; 3],
}

pub fn predict_lesions(
    grader: &impl PatchGrader,
    source: &PatchSource,
    lesions: &[&LesionRecord],
    config: &InferenceConfig,
) -> Result<Vec<LesionPrediction>> {
    lesions
        .iter()
        .map(|l| {
            Ok(LesionPrediction {
                lesion_id: l.lesion_id.clone(),
                patient_id: l.patient_id.clone(),
                predicted: predict_lesion(grader, source, l, config)?,
                consensus: l.label().consensus,
                observers: l.observer_grades().0,
            })
        })
        .collect()
}

/// Patient-level predictions from lesion predictions keyed by lesion id.
pub fn patient_predictions(
    patients: &[&PatientRecord],
    lesions: &HashMap<&str, &LesionPrediction>,
    percentile: f64,
) -> Result<Vec<PatientPrediction>> {
    patients
        .iter()
        .map(|p| {
            let preds = p
                .lesion_ids
                .iter()
                .map(|id| {
                    lesions
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| Error::Manifest(format!("no prediction for lesion {id}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if preds.is_empty() {
                return Err(Error::EmptyPatient(p.patient_id.clone()));
            }
            let model: Vec<Grade> = preds.iter().map(|l| l.predicted).collect();
            let consensus: Vec<Grade> = preds.iter().map(|l| l.consensus).collect();
            let observers = std::array::from_fn(|o| {
                let g: Vec<Grade> = preds.iter().map(|l| l.observers[o]).collect();
                observer_patient_grade(&g).expect("non-empty")
            });
            Ok(PatientPrediction {
                patient_id: p.patient_id.clone(),
                predicted: patient_grade_percentile(&model, percentile)?,
                consensus: observer_patient_grade(&consensus)?,
                observers,
            })
        })
        .collect()
}

pub fn default_percentile_grid() -> Vec<f64> {
    (0..=10).map(|i| 50.0 + 5.0 * f64::from(i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_percentile: f64,
    pub best_kappa: f64,
    /// Kappa at every grid point; `None` where it is undefined.
    pub kappas: Vec<(f64, Option<f64>)>,
}

/// Picks the percentile whose patient grades agree best (QWK) with the
/// consensus max-rule grades. Ties go to the largest percentile.
pub fn sweep_percentile(
    patients: &[&PatientRecord],
    lesions: &HashMap<&str, &LesionPrediction>,
    grid: &[f64],
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("percentile grid"));
    }
    if patients.is_empty() {
        return Err(Error::EmptyInput("validation patients"));
    }
    let mut kappas = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &p in grid {
        let preds = patient_predictions(patients, lesions, p)?;
        let model: Vec<Grade> = preds.iter().map(|r| r.predicted).collect();
        let truth: Vec<Grade> = preds.iter().map(|r| r.consensus).collect();
        let k = match agreement::qwk(&agreement::confusion(&model, &truth)?) {
            Ok(k) => Some(k),
            Err(Error::DegenerateMarginals) => None,
            Err(e) => return Err(e),
        };
        if let Some(k) = k {
            let better = match best {
                None => true,
                Some((bp, bk)) => k > bk || (k == bk && p > bp),
            };
            if better {
                best = Some((p, k));
            }
        }
        kappas.push((p, k));
    }
    let (best_percentile, best_kappa) = best.ok_or(Error::DegenerateMarginals)?;
    Ok(SweepResult {
        best_percentile,
        best_kappa,
        kappas,
    })
}

pub fn write_lesion_csv(rows: &[LesionPrediction], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["lesion_id", "patient_id", "predicted_grade", "consensus_grade", "obs1", "obs2", "obs3"])?;
    for r in rows {
        w.write_record([
            r.lesion_id.clone(),
            r.patient_id.clone(),
            r.predicted.to_string(),
            r.consensus.to_string(),
            r.observers[0].to_string(),
            r.observers[1].to_string(),
            r.observers[2].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_patient_csv(rows: &[PatientPrediction], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["patient_id", "predicted_grade", "consensus_grade", "obs1", "obs2", "obs3"])?;
    for r in rows {
        w.write_record([
            r.patient_id.clone(),
            r.predicted.to_string(),
            r.consensus.to_string(),
            r.observers[0].to_string(),
            r.observers[1].to_string(),
            r.observers[2].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalLevel {
    Lesion,
    Patient,
    Both,
}

impl EvalLevel {
    pub fn lesion(self) -> bool {
        matches!(self, EvalLevel::Lesion | EvalLevel::Both)
    }

    pub fn patient(self) -> bool {
        matches!(self, EvalLevel::Patient | EvalLevel::Both)
    }
}

/// Everything one evaluation of a grader on the test split produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub lesions: Vec<LesionPrediction>,
    pub patients: Option<Vec<PatientPrediction>>,
    pub sweep: Option<SweepResult>,
    pub report: AgreementReport,
}

impl Evaluation {
    /// Lesion predictions keyed by lesion id.
    pub fn lesion_map(&self) -> HashMap<&str, Grade> {
        self.lesions.iter().map(|l| (l.lesion_id.as_str(), l.predicted)).collect()
    }
}

fn prediction_index(rows: &[LesionPrediction]) -> HashMap<&str, &LesionPrediction> {
    rows.iter().map(|r| (r.lesion_id.as_str(), r)).collect()
}

/// Predicts the test split. At patient level the percentile is first chosen
/// on the validation split with `grid`, then applied to test patients.
pub fn evaluate(
    grader: &impl PatchGrader,
    source: &PatchSource,
    manifest: &DatasetManifest,
    config: &InferenceConfig,
    level: EvalLevel,
    grid: &[f64],
    confidence: f64,
) -> Result<Evaluation> {
    let test = manifest.lesions_in(Subset::Test);
    if test.is_empty() {
        return Err(Error::Manifest("test split is empty".into()));
    }
    let lesions = predict_lesions(grader, source, &test, config)?;

    let mut lesion_grades = RaterGrades::default();
    for l in &lesions {
        lesion_grades.push(l.observers, l.predicted);
    }

    let (patients, sweep) = if level.patient() {
        let val_lesions = manifest.lesions_in(Subset::Validation);
        let val_preds = predict_lesions(grader, source, &val_lesions, config)?;
        let sweep = sweep_percentile(
            &manifest.patients_in(Subset::Validation),
            &prediction_index(&val_preds),
            grid,
        )?;
        let rows = patient_predictions(
            &manifest.patients_in(Subset::Test),
            &prediction_index(&lesions),
            sweep.best_percentile,
        )?;
        (Some(rows), Some(sweep))
    } else {
        (None, None)
    };

    let patient_grades = patients.as_ref().map(|rows| {
        let mut g = RaterGrades::default();
        for r in rows {
            g.push(r.observers, r.predicted);
        }
        g
    });
    let report = agreement::full_report(
        level.lesion().then_some(&lesion_grades),
        patient_grades.as_ref(),
        confidence,
    )?;
    Ok(Evaluation {
        lesions,
        patients,
        sweep,
        report,
    })
}
