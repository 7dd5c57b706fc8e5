//! Grades, observers, lesions, patients and dataset manifests.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// A Holland DCIS grade: 1, 2 or 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub struct Grade(u8);

impl Grade {
    pub const ONE: Grade = Grade(1);
    pub const TWO: Grade = Grade(2);
    pub const THREE: Grade = Grade(3);
    pub const ALL: [Grade; 3] = [Grade::ONE, Grade::TWO, Grade::THREE];

    pub fn new(value: i64) -> Result<Self> {
        match value {
            1..=3 => Ok(Grade(value as u8)),
            _ => Err(Error::InvalidGrade(value)),
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Zero-based class index (grade 1 -> 0).
    pub fn index(self) -> usize {
        usize::from(self.0 - 1)
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Grade::new(index as i64 + 1)
    }
}

impl TryFrom<i64> for Grade {
    type Error = Error;

    fn try_from(value: i64) -> Result<Self> {
        Grade::new(value)
    }
}

impl From<Grade> for u8 {
    fn from(g: Grade) -> u8 {
        g.0
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Grades from the three expert observers, in fixed observer order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObserverGrades(pub [Grade; 3]);

impl ObserverGrades {
    pub fn new(o1: Grade, o2: Grade, o3: Grade) -> Self {
        ObserverGrades([o1, o2, o3])
    }

    pub fn from_values(values: &[i64]) -> Result<Self> {
        if values.len() != 3 {
            return Err(Error::Manifest(format!(
                "expected exactly 3 observer grades, got {}",
                values.len()
            )));
        }
        Ok(ObserverGrades([
            Grade::new(values[0])?,
            Grade::new(values[1])?,
            Grade::new(values[2])?,
        ]))
    }

    pub fn observer(&self, index: usize) -> Grade {
        self.0[index]
    }
}

/// Per-lesion training target: majority grade and how many observers gave it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConsensusLabel {
    pub consensus: Grade,
    pub agreement_count: u8,
}

impl ConsensusLabel {
    /// The agreement count as an ordinal class (1..=3), for the second head.
    pub fn agreement_class(&self) -> Grade {
        Grade(self.agreement_count)
    }
}

/// Majority vote over the three observers; a three-way split resolves to grade 2.
pub fn consensus_of(grades: &ObserverGrades) -> ConsensusLabel {
    let mut counts = [0u8; 3];
    for g in grades.0 {
        counts[g.index()] += 1;
    }
    let consensus = match counts.iter().position(|&c| c >= 2) {
        Some(i) => Grade(i as u8 + 1),
        None => Grade::TWO,
    };
    ConsensusLabel {
        consensus,
        agreement_count: counts[consensus.index()],
    }
}

/// Patient grade as the observers assign it: the highest lesion grade.
pub fn observer_patient_grade(lesion_grades: &[Grade]) -> Result<Grade> {
    lesion_grades
        .iter()
        .copied()
        .max()
        .ok_or(Error::EmptyInput("patient with no lesions"))
}

/// Twice the signed area of a polygon (shoelace).
fn doubled_signed_area(polygon: &[(f64, f64)]) -> f64 {
    let n = polygon.len();
    (0..n)
        .map(|i| {
            let (x0, y0) = polygon[i];
            let (x1, y1) = polygon[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum()
}

pub fn polygon_area(polygon: &[(f64, f64)]) -> f64 {
    doubled_signed_area(polygon).abs() / 2.0
}

fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn on_segment(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> bool {
    p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

fn segments_intersect(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// Checks that a polygon is simple, finite and has positive area.
pub fn validate_polygon(lesion_id: &str, polygon: &[(f64, f64)]) -> Result<()> {
    let fail = |reason: String| Error::InvalidPolygon {
        lesion_id: lesion_id.to_string(),
        reason,
    };
    if polygon.len() < 3 {
        return Err(fail(format!("{} vertices, need at least 3", polygon.len())));
    }
    if polygon.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(fail("non-finite vertex".into()));
    }
    if polygon_area(polygon) <= 0.0 {
        return Err(fail("zero area".into()));
    }
    let n = polygon.len();
    for i in 0..n {
        let (a, b) = (polygon[i], polygon[(i + 1) % n]);
        for j in (i + 1)..n {
            // Adjacent edges share a vertex and are skipped.
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (c, d) = (polygon[j], polygon[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return Err(fail(format!("edges {i} and {j} intersect")));
            }
        }
    }
    Ok(())
}

/// One annotated lesion.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionRecord {
    pub lesion_id: String,
    pub patient_id: String,
    /// Region image path, resolved against the manifest directory.
    pub image: PathBuf,
    pub polygon: Vec<(f64, f64)>,
    /// Microns per pixel of the region image.
    pub mpp: f64,
    observer_grades: ObserverGrades,
    label: ConsensusLabel,
}

impl LesionRecord {
    pub fn new(
        lesion_id: impl Into<String>,
        patient_id: impl Into<String>,
        image: impl Into<PathBuf>,
        polygon: Vec<(f64, f64)>,
        mpp: f64,
        observer_grades: ObserverGrades,
    ) -> Result<Self> {
        let lesion_id = lesion_id.into();
        validate_polygon(&lesion_id, &polygon)?;
        if !(mpp > 0.0 && mpp.is_finite()) {
            return Err(Error::Manifest(format!(
                "lesion {lesion_id}: mpp must be positive, got {mpp}"
            )));
        }
        Ok(LesionRecord {
            lesion_id,
            patient_id: patient_id.into(),
            image: image.into(),
            polygon,
            mpp,
            label: consensus_of(&observer_grades),
            observer_grades,
        })
    }

    pub fn observer_grades(&self) -> &ObserverGrades {
        &self.observer_grades
    }

    pub fn label(&self) -> ConsensusLabel {
        self.label
    }

    pub fn set_observer_grades(&mut self, grades: ObserverGrades) {
        self.observer_grades = grades;
        self.label = consensus_of(&grades);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub lesion_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Validation,
    Test,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Train, Subset::Validation, Subset::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Validation => "validation",
            Subset::Test => "test",
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

// On-disk layout of the manifest.
#[derive(Serialize, Deserialize)]
struct LesionEntry {
    lesion_id: String,
    patient_id: String,
    image: PathBuf,
    polygon: Vec<[f64; 2]>,
    mpp_um: f64,
    observer_grades: Vec<i64>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    lesions: Vec<LesionEntry>,
    patients: Vec<PatientRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<BTreeMap<String, Subset>>,
}

/// Lesions, patients and an optional patient-level split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub lesions: Vec<LesionRecord>,
    pub patients: Vec<PatientRecord>,
    pub split: Option<BTreeMap<String, Subset>>,
}

impl DatasetManifest {
    pub fn new(
        lesions: Vec<LesionRecord>,
        patients: Vec<PatientRecord>,
        split: Option<BTreeMap<String, Subset>>,
    ) -> Result<Self> {
        let manifest = DatasetManifest {
            lesions,
            patients,
            split,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Structural checks: unique ids, consistent patient references and a
    /// split (when present) that covers every patient exactly once.
    pub fn validate(&self) -> Result<()> {
        let mut lesion_patient: HashMap<&str, &str> = HashMap::new();
        for l in &self.lesions {
            if lesion_patient
                .insert(&l.lesion_id, &l.patient_id)
                .is_some()
            {
                return Err(Error::Manifest(format!("duplicate lesion id {}", l.lesion_id)));
            }
        }
        let mut seen_patients = HashSet::new();
        let mut claimed = HashSet::new();
        for p in &self.patients {
            if !seen_patients.insert(p.patient_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate patient id {}", p.patient_id)));
            }
            if p.lesion_ids.is_empty() {
                return Err(Error::EmptyPatient(p.patient_id.clone()));
            }
            for lid in &p.lesion_ids {
                match lesion_patient.get(lid.as_str()) {
                    None => {
                        return Err(Error::Manifest(format!(
                            "patient {} references missing lesion {lid}",
                            p.patient_id
                        )))
                    }
                    Some(owner) if *owner != p.patient_id => {
                        return Err(Error::Manifest(format!(
                            "lesion {lid} is listed under patient {} but carries patient id {owner}",
                            p.patient_id
                        )))
                    }
                    _ => {}
                }
                if !claimed.insert(lid.as_str()) {
                    return Err(Error::Manifest(format!("lesion {lid} listed twice")));
                }
            }
        }
        if let Some(l) = self
            .lesions
            .iter()
            .find(|l| !claimed.contains(l.lesion_id.as_str()))
        {
            return Err(Error::Manifest(format!(
                "lesion {} is not listed under any patient",
                l.lesion_id
            )));
        }
        if let Some(split) = &self.split {
            for p in &self.patients {
                if !split.contains_key(&p.patient_id) {
                    return Err(Error::Manifest(format!(
                        "split does not assign patient {}",
                        p.patient_id
                    )));
                }
            }
            if let Some(extra) = split.keys().find(|k| !seen_patients.contains(k.as_str())) {
                return Err(Error::Manifest(format!("split names unknown patient {extra}")));
            }
        }
        Ok(())
    }

    /// Loads and validates a manifest. Image paths are resolved against the
    /// manifest's directory and must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ManifestFile = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut lesions = Vec::with_capacity(file.lesions.len());
        for e in file.lesions {
            let image = if e.image.is_absolute() {
                e.image
            } else {
                base.join(e.image)
            };
            if !image.is_file() {
                return Err(Error::Manifest(format!(
                    "lesion {}: image {} does not exist",
                    e.lesion_id,
                    image.display()
                )));
            }
            let grades = ObserverGrades::from_values(&e.observer_grades).map_err(|err| {
                Error::Manifest(format!("lesion {}: {err}", e.lesion_id))
            })?;
            lesions.push(LesionRecord::new(
                e.lesion_id,
                e.patient_id,
                image,
                e.polygon.into_iter().map(|[x, y]| (x, y)).collect(),
                e.mpp_um,
                grades,
            )?);
        }
        DatasetManifest::new(lesions, file.patients, file.split)
    }

    /// Writes the manifest as JSON. Image paths under `path`'s directory are
    /// stored relative to it; others are stored as given.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        let file = ManifestFile {
            lesions: self
                .lesions
                .iter()
                .map(|l| LesionEntry {
                    lesion_id: l.lesion_id.clone(),
                    patient_id: l.patient_id.clone(),
                    image: l
                        .image
                        .strip_prefix(base)
                        .map(Path::to_path_buf)
                        .unwrap_or_else(|_| l.image.clone()),
                    polygon: l.polygon.iter().map(|&(x, y)| [x, y]).collect(),
                    mpp_um: l.mpp,
                    observer_grades: l
                        .observer_grades
                        .0
                        .iter()
                        .map(|g| i64::from(g.value()))
                        .collect(),
                })
                .collect(),
            patients: self.patients.clone(),
            split: self.split.clone(),
        };
        let text = serde_json::to_string_pretty(&file).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn lesion(&self, lesion_id: &str) -> Option<&LesionRecord> {
        self.lesions.iter().find(|l| l.lesion_id == lesion_id)
    }

    pub fn subset_of(&self, patient_id: &str) -> Option<Subset> {
        self.split.as_ref()?.get(patient_id).copied()
    }

    /// Lesions of every patient assigned to `subset`, in manifest order.
    pub fn lesions_in(&self, subset: Subset) -> Vec<&LesionRecord> {
        self.lesions
            .iter()
            .filter(|l| self.subset_of(&l.patient_id) == Some(subset))
            .collect()
    }

    pub fn patients_in(&self, subset: Subset) -> Vec<&PatientRecord> {
        self.patients
            .iter()
            .filter(|p| self.subset_of(&p.patient_id) == Some(subset))
            .collect()
    }

    /// Patient grade by the max rule over consensus lesion grades.
    pub fn consensus_patient_grade(&self, patient: &PatientRecord) -> Result<Grade> {
        let index: HashMap<&str, &LesionRecord> =
            self.lesions.iter().map(|l| (l.lesion_id.as_str(), l)).collect();
        let grades: Vec<Grade> = patient
            .lesion_ids
            .iter()
            .filter_map(|id| index.get(id.as_str()).map(|l| l.label().consensus))
            .collect();
        observer_patient_grade(&grades).map_err(|_| Error::EmptyPatient(patient.patient_id.clone()))
    }

    /// Writes the split as CSV `patient_id,subset`.
    pub fn write_split_csv(&self, path: &Path) -> Result<()> {
        let split = self
            .split
            .as_ref()
            .ok_or_else(|| Error::Manifest("manifest has no split".into()))?;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["patient_id", "subset"])?;
        for p in &self.patients {
            w.write_record([p.patient_id.as_str(), split[&p.patient_id].as_str()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Target fractions for (train, validation, test).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions(pub [f64; 3]);

impl SplitFractions {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let f = [train, validation, test];
        if f.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || f.iter().all(|v| *v == 0.0) {
            return Err(Error::Config(format!("invalid split fractions {f:?}")));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(SplitFractions(f))
    }

    /// Patient proportions of the reference study: 40 train, 19 validation, 50 test.
    pub fn reference() -> Self {
        SplitFractions([40.0 / 109.0, 19.0 / 109.0, 50.0 / 109.0])
    }
}

/// Largest-remainder apportionment of `n` items over `fractions`.
/// Remainder ties go to the earlier subset.
pub fn largest_remainder(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = q.floor() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitWarning {
    pub stratum: Grade,
    pub patients: usize,
    pub nonzero_subsets: usize,
}

impl fmt::Display for SplitWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "grade {} stratum has {} patient(s) for {} non-empty subsets; some subsets get none",
            self.stratum, self.patients, self.nonzero_subsets
        )
    }
}

/// Assigns patients to train/validation/test, stratified by patient-level
/// consensus grade. Within each stratum patients are shuffled with a seeded
/// stream and apportioned by largest remainder.
pub fn stratified_patient_split(
    manifest: &DatasetManifest,
    fractions: SplitFractions,
    seed: u64,
) -> Result<(DatasetManifest, Vec<SplitWarning>)> {
    let mut strata: BTreeMap<Grade, Vec<&str>> = BTreeMap::new();
    for p in &manifest.patients {
        let g = manifest.consensus_patient_grade(p)?;
        strata.entry(g).or_default().push(&p.patient_id);
    }
    let nonzero = fractions.0.iter().filter(|f| **f > 0.0).count();
    let mut warnings = Vec::new();
    let mut split = BTreeMap::new();
    for (grade, mut ids) in strata {
        if ids.len() < nonzero {
            let w = SplitWarning {
                stratum: grade,
                patients: ids.len(),
                nonzero_subsets: nonzero,
            };
            log::warn!("{w}");
            warnings.push(w);
        }
        // Shuffle from a canonical order so the result does not depend on
        // the manifest's patient order.
        ids.sort_unstable();
        let mut rng = seed::stream(seed::derive_seed(seed, &format!("split-grade-{grade}")));
        ids.shuffle(&mut rng);
        let counts = largest_remainder(ids.len(), &fractions.0);
        let mut it = ids.into_iter();
        for (subset, count) in Subset::ALL.into_iter().zip(counts) {
            for id in it.by_ref().take(count) {
                split.insert(id.to_string(), subset);
            }
        }
    }
    let mut out = manifest.clone();
    out.split = Some(split);
    out.validate()?;
    Ok((out, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(v: i64) -> Grade {
        Grade::new(v).unwrap()
    }

    fn square() -> Vec<(f64, f64)> {
        vec![(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)]
    }

    fn lesion(id: &str, patient: &str, grades: [i64; 3]) -> LesionRecord {
        LesionRecord::new(
            id,
            patient,
            format!("{id}.png"),
            square(),
            0.88,
            ObserverGrades::new(g(grades[0]), g(grades[1]), g(grades[2])),
        )
        .unwrap()
    }

    pub(crate) fn manifest_with_patient_grades(grades: &[i64]) -> DatasetManifest {
        let mut lesions = Vec::new();
        let mut patients = Vec::new();
        for (i, &grade) in grades.iter().enumerate() {
            let pid = format!("P{i:03}");
            let lid = format!("L{i:03}");
            lesions.push(lesion(&lid, &pid, [grade; 3]));
            patients.push(PatientRecord {
                patient_id: pid,
                lesion_ids: vec![lid],
            });
        }
        DatasetManifest::new(lesions, patients, None).unwrap()
    }

    #[test]
    fn grade_rejects_out_of_range() {
        assert!(Grade::new(0).is_err());
        assert!(Grade::new(4).is_err());
        assert!(Grade::new(-1).is_err());
        assert_eq!(Grade::new(3).unwrap().value(), 3);
        let parsed: std::result::Result<Grade, _> = serde_json::from_str("0");
        assert!(parsed.is_err());
        assert_eq!(serde_json::to_string(&Grade::TWO).unwrap(), "2");
    }

    #[test]
    fn consensus_examples() {
        let c = consensus_of(&ObserverGrades::new(g(1), g(1), g(2)));
        assert_eq!((c.consensus, c.agreement_count), (g(1), 2));
        let c = consensus_of(&ObserverGrades::new(g(1), g(2), g(3)));
        assert_eq!((c.consensus, c.agreement_count), (g(2), 1));
        let c = consensus_of(&ObserverGrades::new(g(3), g(3), g(3)));
        assert_eq!((c.consensus, c.agreement_count), (g(3), 3));
    }

    #[test]
    fn consensus_exhaustive_properties() {
        for a in Grade::ALL {
            for b in Grade::ALL {
                for c in Grade::ALL {
                    let label = consensus_of(&ObserverGrades::new(a, b, c));
                    let matching = [a, b, c].iter().filter(|x| **x == label.consensus).count();
                    assert_eq!(usize::from(label.agreement_count), matching);
                    let distinct = a != b && b != c && a != c;
                    assert_eq!(label.agreement_count == 1, distinct);
                    if distinct {
                        assert_eq!(label.consensus, Grade::TWO);
                    }
                    for perm in [[b, a, c], [c, b, a], [a, c, b], [b, c, a], [c, a, b]] {
                        assert_eq!(consensus_of(&ObserverGrades(perm)), label);
                    }
                }
            }
        }
    }

    #[test]
    fn patient_grade_is_max() {
        assert_eq!(observer_patient_grade(&[g(1), g(1), g(1)]).unwrap(), g(1));
        assert_eq!(observer_patient_grade(&[g(1), g(2), g(3)]).unwrap(), g(3));
        assert_eq!(observer_patient_grade(&[g(2), g(2), g(1), g(2)]).unwrap(), g(2));
        assert!(observer_patient_grade(&[]).is_err());
    }

    #[test]
    fn polygon_validation() {
        assert!(validate_polygon("a", &square()).is_ok());
        let bowtie = vec![(0.0, 0.0), (10.0, 10.0), (10.0, 0.0), (0.0, 10.0)];
        assert!(validate_polygon("bowtie", &bowtie).is_err());
        let flat = vec![(0.0, 0.0), (5.0, 0.0), (10.0, 0.0)];
        let err = validate_polygon("flat-one", &flat).unwrap_err();
        assert!(err.to_string().contains("flat-one"));
        assert!(validate_polygon("two", &[(0.0, 0.0), (1.0, 1.0)]).is_err());
    }

    #[test]
    fn label_tracks_observer_grades() {
        let mut l = lesion("L1", "P1", [1, 1, 1]);
        assert_eq!(l.label().consensus, g(1));
        l.set_observer_grades(ObserverGrades::new(g(3), g(3), g(2)));
        assert_eq!(l.label(), consensus_of(l.observer_grades()));
        assert_eq!(l.label().agreement_count, 2);
    }

    #[test]
    fn manifest_validation_catches_duplicates() {
        let lesions = vec![lesion("L1", "P1", [1, 1, 1]), lesion("L1", "P1", [2, 2, 2])];
        let patients = vec![PatientRecord {
            patient_id: "P1".into(),
            lesion_ids: vec!["L1".into()],
        }];
        assert!(matches!(
            DatasetManifest::new(lesions, patients, None),
            Err(Error::Manifest(_))
        ));

        let lesions = vec![lesion("L1", "P2", [1, 1, 1])];
        let patients = vec![PatientRecord {
            patient_id: "P1".into(),
            lesion_ids: vec!["L1".into()],
        }];
        assert!(DatasetManifest::new(lesions, patients, None).is_err());
    }

    #[test]
    fn manifest_load_rejects_missing_image() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest_with_patient_grades(&[1, 2]);
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let err = DatasetManifest::load(&path).unwrap_err();
        assert!(err.to_string().contains("does not exist"));
        for l in &m.lesions {
            std::fs::write(dir.path().join(&l.image), b"x").unwrap();
        }
        let loaded = DatasetManifest::load(&path).unwrap();
        assert_eq!(loaded.lesions.len(), 2);
        assert_eq!(loaded.lesions[0].image, dir.path().join("L000.png"));
    }

    #[test]
    fn manifest_load_rejects_zero_grade() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.png"), b"x").unwrap();
        let text = r#"{"lesions":[{"lesion_id":"L","patient_id":"P","image":"a.png",
            "polygon":[[0,0],[4,0],[0,4]],"mpp_um":0.88,"observer_grades":[0,1,2]}],
            "patients":[{"patient_id":"P","lesion_ids":["L"]}]}"#;
        let path = dir.path().join("m.json");
        std::fs::write(&path, text).unwrap();
        assert!(DatasetManifest::load(&path).is_err());
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(10, &[0.8, 0.1, 0.1]), [8, 1, 1]);
        assert_eq!(largest_remainder(1, &[0.4, 0.2, 0.4]), [1, 0, 0]);
        assert_eq!(largest_remainder(0, &[0.4, 0.2, 0.4]), [0, 0, 0]);
        // Quotas 3.5 / 1.75 / 1.75: the two larger remainders get the seats.
        assert_eq!(largest_remainder(7, &[0.5, 0.25, 0.25]), [3, 2, 2]);
    }

    #[test]
    fn single_stratum_split_is_exact() {
        let m = manifest_with_patient_grades(&[2; 10]);
        let fr = SplitFractions::new(0.8, 0.1, 0.1).unwrap();
        let (out, warnings) = stratified_patient_split(&m, fr, 3).unwrap();
        assert!(warnings.is_empty());
        let counts: Vec<usize> = Subset::ALL
            .iter()
            .map(|s| out.patients_in(*s).len())
            .collect();
        assert_eq!(counts, vec![8, 1, 1]);
        let (again, _) = stratified_patient_split(&m, fr, 3).unwrap();
        assert_eq!(out.split, again.split);
    }

    #[test]
    fn tiny_stratum_warns() {
        let m = manifest_with_patient_grades(&[1, 2, 2, 2, 2, 2]);
        let fr = SplitFractions::new(0.5, 0.25, 0.25).unwrap();
        let (out, warnings) = stratified_patient_split(&m, fr, 0).unwrap();
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].stratum, Grade::ONE);
        assert_eq!(out.split.as_ref().unwrap().len(), 6);
    }

    #[test]
    fn split_fractions_validated() {
        assert!(SplitFractions::new(0.5, 0.5, 0.5).is_err());
        assert!(SplitFractions::new(-0.1, 0.6, 0.5).is_err());
        let r = SplitFractions::reference();
        assert!((r.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_csv_export() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest_with_patient_grades(&[1, 2, 3]);
        let (out, _) =
            stratified_patient_split(&m, SplitFractions::new(1.0, 0.0, 0.0).unwrap(), 1).unwrap();
        let path = dir.path().join("split.csv");
        out.write_split_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text, "patient_id,subset\nP000,train\nP001,train\nP002,train\n");
    }
}
