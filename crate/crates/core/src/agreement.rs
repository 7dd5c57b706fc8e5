//! Inter-rater agreement: confusion matrices, quadratic weighted Cohen's
//! kappa with an analytic confidence interval, pairwise reports across the
//! three observers and the model, and multi-run summaries.
//!
//! Every statistic is computed so that swapping the two raters gives the
//! same bits: off-diagonal cells are always combined pairwise before
//! accumulation.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::datamodel::Grade;
use crate::error::{Error, Result};

const K: usize = 3;

/// Counts with rows indexed by rater A's grade and columns by rater B's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; K]; K],
}

impl ConfusionMatrix {
    pub fn n(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn transpose(&self) -> Self {
        let mut t = [[0; K]; K];
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                t[j][i] = c;
            }
        }
        ConfusionMatrix { counts: t }
    }

    pub fn row_marginals(&self) -> [u64; K] {
        let mut m = [0; K];
        for (i, row) in self.counts.iter().enumerate() {
            m[i] = row.iter().sum();
        }
        m
    }

    pub fn col_marginals(&self) -> [u64; K] {
        self.transpose().row_marginals()
    }

    /// Same proportions with every cell multiplied by `factor`.
    pub fn scaled(&self, factor: u64) -> Self {
        let mut c = self.counts;
        c.iter_mut().flatten().for_each(|v| *v *= factor);
        ConfusionMatrix { counts: c }
    }
}

pub fn confusion(ratings_a: &[Grade], ratings_b: &[Grade]) -> Result<ConfusionMatrix> {
    if ratings_a.len() != ratings_b.len() {
        return Err(Error::LengthMismatch(ratings_a.len(), ratings_b.len()));
    }
    if ratings_a.is_empty() {
        return Err(Error::EmptyInput("no ratings"));
    }
    let mut m = ConfusionMatrix::default();
    for (a, b) in ratings_a.iter().zip(ratings_b) {
        m.counts[a.index()][b.index()] += 1;
    }
    Ok(m)
}

/// Disagreement weight `|i - j|^exponent / (k - 1)^exponent`.
pub fn disagreement_weight(i: usize, j: usize, exponent: f64) -> f64 {
    (i.abs_diff(j) as f64).powf(exponent) / ((K - 1) as f64).powf(exponent)
}

/// Weighted kappa `1 - D_o / D_e` with disagreement weights of the given
/// exponent (2 = quadratic).
pub fn weighted_kappa(matrix: &ConfusionMatrix, exponent: f64) -> Result<f64> {
    let n = matrix.n();
    if n == 0 {
        return Err(Error::EmptyInput("empty confusion matrix"));
    }
    let nf = n as f64;
    let rows = matrix.row_marginals().map(|r| r as f64 / nf);
    let cols = matrix.col_marginals().map(|c| c as f64 / nf);
    let mut observed = 0.0;
    let mut expected = 0.0;
    for i in 0..K {
        for j in (i + 1)..K {
            let d = disagreement_weight(i, j, exponent);
            let pair_count = matrix.counts[i][j] + matrix.counts[j][i];
            observed += d * pair_count as f64 / nf;
            expected += d * (rows[i] * cols[j] + rows[j] * cols[i]);
        }
    }
    if expected == 0.0 {
        return Err(Error::DegenerateMarginals);
    }
    Ok(1.0 - observed / expected)
}

pub fn qwk(matrix: &ConfusionMatrix) -> Result<f64> {
    weighted_kappa(matrix, 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaResult {
    pub kappa: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub standard_error: f64,
}

/// Two-sided standard normal quantile, e.g. 1.959964 for 0.95.
pub fn z_value(confidence: f64) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Domain(format!("confidence must lie in (0, 1), got {confidence}")));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(0.5 + confidence / 2.0))
}

/// Large-sample standard error of weighted kappa (Fleiss, Cohen & Everitt),
/// expressed with agreement weights `w = 1 - d`.
pub fn weighted_kappa_se(matrix: &ConfusionMatrix, exponent: f64, kappa: f64) -> Result<f64> {
    let n = matrix.n();
    if n < 2 {
        return Err(Error::Domain(format!("standard error needs n >= 2, got {n}")));
    }
    let nf = n as f64;
    let w = |i: usize, j: usize| 1.0 - disagreement_weight(i, j, exponent);
    let rows = matrix.row_marginals().map(|r| r as f64 / nf);
    let cols = matrix.col_marginals().map(|c| c as f64 / nf);

    let mut expected_agreement = 0.0;
    for i in 0..K {
        expected_agreement += w(i, i) * rows[i] * cols[i];
        for j in (i + 1)..K {
            expected_agreement += w(i, j) * (rows[i] * cols[j] + rows[j] * cols[i]);
        }
    }
    // Row-weighted and column-weighted mean agreement per category.
    let mut w_row = [0.0; K];
    let mut w_col = [0.0; K];
    for i in 0..K {
        for j in 0..K {
            w_row[i] += cols[j] * w(i, j);
            w_col[i] += rows[j] * w(j, i);
        }
    }
    let term = |i: usize, j: usize| {
        let p = matrix.counts[i][j] as f64 / nf;
        let dev = w(i, j) - (w_row[i] + w_col[j]) * (1.0 - kappa);
        p * dev * dev
    };
    let mut sum = 0.0;
    for i in 0..K {
        sum += term(i, i);
        for j in (i + 1)..K {
            sum += term(i, j) + term(j, i);
        }
    }
    let correction = kappa - expected_agreement * (1.0 - kappa);
    let denom = nf * (1.0 - expected_agreement).powi(2);
    if denom == 0.0 {
        return Err(Error::DegenerateMarginals);
    }
    Ok(((sum - correction * correction) / denom).max(0.0).sqrt())
}

/// Quadratic weighted kappa with an unclipped normal-approximation interval.
pub fn qwk_ci(matrix: &ConfusionMatrix, confidence: f64) -> Result<KappaResult> {
    let kappa = qwk(matrix)?;
    let se = weighted_kappa_se(matrix, 2.0, kappa)?;
    let z = z_value(confidence)?;
    Ok(KappaResult {
        kappa,
        ci_low: kappa - z * se,
        ci_high: kappa + z * se,
        standard_error: se,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub mean: f64,
    /// Sample standard deviation; absent for a single run.
    pub sd: Option<f64>,
    pub n: usize,
}

pub fn multi_run_stats(kappas: &[f64]) -> Result<RunStats> {
    if kappas.is_empty() {
        return Err(Error::EmptyInput("no runs"));
    }
    let n = kappas.len();
    let mean = kappas.iter().sum::<f64>() / n as f64;
    let sd = (n >= 2).then(|| {
        let ss: f64 = kappas.iter().map(|k| (k - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    Ok(RunStats { mean, sd, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rater {
    Observer1,
    Observer2,
    Observer3,
    Model,
}

impl Rater {
    pub const ALL: [Rater; 4] = [Rater::Observer1, Rater::Observer2, Rater::Observer3, Rater::Model];

    pub fn name(self) -> &'static str {
        match self {
            Rater::Observer1 => "observer1",
            Rater::Observer2 => "observer2",
            Rater::Observer3 => "observer3",
            Rater::Model => "model",
        }
    }

    pub fn parse(s: &str) -> Option<Rater> {
        Rater::ALL.into_iter().find(|r| r.name() == s)
    }

    /// Observer index 0..3, or None for the model.
    pub fn observer_index(self) -> Option<usize> {
        match self {
            Rater::Observer1 => Some(0),
            Rater::Observer2 => Some(1),
            Rater::Observer3 => Some(2),
            Rater::Model => None,
        }
    }
}

impl fmt::Display for Rater {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Observer pairs first, then each observer against the model.
pub const REPORT_PAIRS: [(Rater, Rater); 6] = [
    (Rater::Observer1, Rater::Observer2),
    (Rater::Observer1, Rater::Observer3),
    (Rater::Observer2, Rater::Observer3),
    (Rater::Observer1, Rater::Model),
    (Rater::Observer2, Rater::Model),
    (Rater::Observer3, Rater::Model),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Lesion,
    Patient,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Lesion => "lesion",
            Level::Patient => "patient",
        }
    }
}

/// Aligned grades of all four raters over the same items.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RaterGrades {
    pub observers: [Vec<Grade>; 3],
    pub model: Vec<Grade>,
}

impl RaterGrades {
    pub fn of(&self, rater: Rater) -> &[Grade] {
        match rater.observer_index() {
            Some(i) => &self.observers[i],
            None => &self.model,
        }
    }

    pub fn push(&mut self, observers: [Grade; 3], model: Grade) {
        for (v, g) in self.observers.iter_mut().zip(observers) {
            v.push(g);
        }
        self.model.push(model);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub rater_a: Rater,
    pub rater_b: Rater,
    pub matrix: ConfusionMatrix,
    /// `None` when kappa is undefined for this matrix.
    pub kappa: Option<KappaResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: Level,
    pub pairs: Vec<PairResult>,
}

impl LevelReport {
    /// Result for an ordered pair; the reversed pair gets the transposed
    /// matrix and the same kappa.
    pub fn pair(&self, a: Rater, b: Rater) -> Option<PairResult> {
        self.pairs.iter().find_map(|p| {
            if p.rater_a == a && p.rater_b == b {
                Some(p.clone())
            } else if p.rater_a == b && p.rater_b == a {
                Some(PairResult {
                    rater_a: a,
                    rater_b: b,
                    matrix: p.matrix.transpose(),
                    kappa: p.kappa,
                })
            } else {
                None
            }
        })
    }

    pub fn write_kappa_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["rater_a", "rater_b", "kappa", "ci_low", "ci_high", "n"])?;
        for p in &self.pairs {
            let k = p.kappa;
            w.write_record([
                p.rater_a.name().to_string(),
                p.rater_b.name().to_string(),
                fmt_opt(k.map(|k| k.kappa)),
                fmt_opt(k.map(|k| k.ci_low)),
                fmt_opt(k.map(|k| k.ci_high)),
                p.matrix.n().to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Confusion matrices as consecutive 3×3 CSV blocks.
    pub fn write_confusion_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (k, p) in self.pairs.iter().enumerate() {
            if k > 0 {
                out.push('\n');
            }
            out.push_str(&format!("{} vs {},grade1,grade2,grade3\n", p.rater_a, p.rater_b));
            for (i, row) in p.matrix.counts.iter().enumerate() {
                out.push_str(&format!("grade{},{},{},{}\n", i + 1, row[0], row[1], row[2]));
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Heat maps of the confusion matrices, observer pairs on the top row
    /// and observer-vs-model pairs below.
    pub fn write_heatmap_png(&self, path: &Path) -> Result<()> {
        const CELL: usize = 48;
        const GAP: usize = 16;
        let tile = K * CELL;
        let cols = 3;
        let rows = self.pairs.len().div_ceil(cols);
        let width = cols * tile + (cols + 1) * GAP;
        let height = rows * tile + (rows + 1) * GAP;
        let mut px = vec![255u8; width * height * 3];
        for (k, p) in self.pairs.iter().enumerate() {
            let ox = GAP + (k % cols) * (tile + GAP);
            let oy = GAP + (k / cols) * (tile + GAP);
            let max = p.matrix.counts.iter().flatten().copied().max().unwrap_or(0).max(1);
            for i in 0..K {
                for j in 0..K {
                    let t = p.matrix.counts[i][j] as f64 / max as f64;
                    let color = [
                        (255.0 - 225.0 * t) as u8,
                        (255.0 - 180.0 * t) as u8,
                        (255.0 - 90.0 * t) as u8,
                    ];
                    for y in 0..CELL {
                        for x in 0..CELL {
                            let edge = x == 0 || y == 0 || x == CELL - 1 || y == CELL - 1;
                            let idx = ((oy + i * CELL + y) * width + ox + j * CELL + x) * 3;
                            let c = if edge { [90, 90, 90] } else { color };
                            px[idx..idx + 3].copy_from_slice(&c);
                        }
                    }
                }
            }
        }
        crate::patchkit::save_rgb_png(path, width, height, &px)
    }
}

/// All six pairings at one level.
pub fn level_report(level: Level, grades: &RaterGrades, confidence: f64) -> Result<LevelReport> {
    let pairs = REPORT_PAIRS
        .iter()
        .map(|&(a, b)| {
            let matrix = confusion(grades.of(a), grades.of(b))?;
            let kappa = match qwk_ci(&matrix, confidence) {
                Ok(k) => Some(k),
                Err(Error::DegenerateMarginals) => None,
                Err(e) => return Err(e),
            };
            Ok(PairResult {
                rater_a: a,
                rater_b: b,
                matrix,
                kappa,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LevelReport { level, pairs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub lesion: Option<LevelReport>,
    pub patient: Option<LevelReport>,
}

pub fn full_report(
    lesion: Option<&RaterGrades>,
    patient: Option<&RaterGrades>,
    confidence: f64,
) -> Result<AgreementReport> {
    Ok(AgreementReport {
        lesion: lesion
            .map(|g| level_report(Level::Lesion, g, confidence))
            .transpose()?,
        patient: patient
            .map(|g| level_report(Level::Patient, g, confidence))
            .transpose()?,
    })
}

/// Kappa of one rater pair, as persisted in the kappa CSV tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaRow {
    pub rater_a: Rater,
    pub rater_b: Rater,
    pub kappa: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: u64,
}

/// Kappa rows of one evaluated run, per level.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunKappas {
    pub lesion: Vec<KappaRow>,
    pub patient: Vec<KappaRow>,
}

impl LevelReport {
    pub fn kappa_rows(&self) -> Vec<KappaRow> {
        self.pairs
            .iter()
            .filter_map(|p| {
                let k = p.kappa?;
                Some(KappaRow {
                    rater_a: p.rater_a,
                    rater_b: p.rater_b,
                    kappa: k.kappa,
                    ci_low: k.ci_low,
                    ci_high: k.ci_high,
                    n: p.matrix.n(),
                })
            })
            .collect()
    }
}

impl AgreementReport {
    pub fn kappas(&self) -> RunKappas {
        RunKappas {
            lesion: self.lesion.as_ref().map(LevelReport::kappa_rows).unwrap_or_default(),
            patient: self.patient.as_ref().map(LevelReport::kappa_rows).unwrap_or_default(),
        }
    }
}

fn find_kappa(rows: &[KappaRow], a: Rater, b: Rater) -> Option<f64> {
    rows.iter()
        .find(|r| (r.rater_a == a && r.rater_b == b) || (r.rater_a == b && r.rater_b == a))
        .map(|r| r.kappa)
}

/// One row of the multi-run table: an observer against the model.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiRunRow {
    pub rater: Rater,
    pub lesion: Option<RunStats>,
    pub patient: Option<RunStats>,
}

/// Mean and SD of observer-vs-model kappa over training runs, per level.
pub fn multi_run_table(runs: &[RunKappas]) -> Result<Vec<MultiRunRow>> {
    if runs.is_empty() {
        return Err(Error::EmptyInput("no run reports"));
    }
    let collect = |rater: Rater, level: Level| -> Result<Option<RunStats>> {
        let kappas: Vec<f64> = runs
            .iter()
            .filter_map(|r| {
                let rows = match level {
                    Level::Lesion => &r.lesion,
                    Level::Patient => &r.patient,
                };
                find_kappa(rows, rater, Rater::Model)
            })
            .collect();
        if kappas.is_empty() {
            Ok(None)
        } else {
            multi_run_stats(&kappas).map(Some)
        }
    };
    [Rater::Observer1, Rater::Observer2, Rater::Observer3]
        .into_iter()
        .map(|rater| {
            Ok(MultiRunRow {
                rater,
                lesion: collect(rater, Level::Lesion)?,
                patient: collect(rater, Level::Patient)?,
            })
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into())
}

/// CSV `rater,lesion_mean,lesion_sd,patient_mean,patient_sd,runs`.
pub fn write_multi_run_csv(rows: &[MultiRunRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rater", "lesion_mean", "lesion_sd", "patient_mean", "patient_sd", "runs"])?;
    for r in rows {
        let runs = r.lesion.or(r.patient).map(|s| s.n).unwrap_or(0);
        w.write_record([
            r.rater.name().to_string(),
            fmt_opt(r.lesion.map(|s| s.mean)),
            fmt_opt(r.lesion.and_then(|s| s.sd)),
            fmt_opt(r.patient.map(|s| s.mean)),
            fmt_opt(r.patient.and_then(|s| s.sd)),
            runs.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Plain-text rendering of the multi-run table.
pub fn render_multi_run_table(rows: &[MultiRunRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{:<12} {:>22} {:>22}", "", "lesion-level", "patient-level")?;
    writeln!(
        out,
        "{:<12} {:>11} {:>10} {:>11} {:>10}",
        "vs model", "mean(k)", "SD(k)", "mean(k)", "SD(k)"
    )?;
    for r in rows {
        writeln!(
            out,
            "{:<12} {:>11} {:>10} {:>11} {:>10}",
            r.rater.name(),
            r.lesion.map(|s| format!("{:.2}", s.mean)).unwrap_or_else(|| "-".into()),
            r.lesion.and_then(|s| s.sd).map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into()),
            r.patient.map(|s| format!("{:.2}", s.mean)).unwrap_or_else(|| "-".into()),
            r.patient.and_then(|s| s.sd).map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into()),
        )?;
    }
    Ok(())
}

/// Reads a kappa table written by [`LevelReport::write_kappa_csv`]. Pairs
/// with undefined kappa (NA) are skipped.
pub fn read_kappa_csv(path: &Path) -> Result<Vec<KappaRow>> {
    let bad = |what: &str| Error::Manifest(format!("{}: bad {what}", path.display()));
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 6 {
            return Err(bad("row width"));
        }
        if &rec[2] == "NA" {
            continue;
        }
        let rater = |s: &str| Rater::parse(s).ok_or_else(|| bad("rater"));
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("number"));
        rows.push(KappaRow {
            rater_a: rater(&rec[0])?,
            rater_b: rater(&rec[1])?,
            kappa: num(&rec[2])?,
            ci_low: num(&rec[3])?,
            ci_high: num(&rec[4])?,
            n: rec[5].parse().map_err(|_| bad("count"))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn grades(v: &[i64]) -> Vec<Grade> {
        v.iter().map(|&x| Grade::new(x).unwrap()).collect()
    }

    /// Definitional weighted kappa straight from the rating lists: mean
    /// disagreement over items versus over all cross pairs.
    fn brute_force_qwk(a: &[Grade], b: &[Grade]) -> f64 {
        let d = |x: Grade, y: Grade| (f64::from(x.value()) - f64::from(y.value())).powi(2) / 4.0;
        let n = a.len() as f64;
        let observed: f64 = a.iter().zip(b).map(|(&x, &y)| d(x, y)).sum::<f64>() / n;
        let mut expected = 0.0;
        for &x in a {
            for &y in b {
                expected += d(x, y);
            }
        }
        expected /= n * n;
        1.0 - observed / expected
    }

    #[test]
    fn confusion_examples() {
        let m = confusion(&grades(&[1, 2, 3]), &grades(&[1, 2, 3])).unwrap();
        assert_eq!(m.counts, [[1, 0, 0], [0, 1, 0], [0, 0, 1]]);
        assert_eq!(m.n(), 3);
        let m = confusion(&grades(&[1, 1]), &grades(&[3, 3])).unwrap();
        assert_eq!(m.counts, [[0, 0, 2], [0, 0, 0], [0, 0, 0]]);
        let m = confusion(&grades(&[1, 1, 2, 2, 3, 3]), &grades(&[1, 1, 2, 2, 3, 1])).unwrap();
        assert_eq!(m.counts, [[2, 0, 0], [0, 2, 0], [1, 0, 1]]);
        assert!(confusion(&grades(&[1]), &grades(&[1, 2])).is_err());
        assert!(confusion(&[], &[]).is_err());
    }

    #[test]
    fn worked_kappa_is_one_half() {
        let m = confusion(&grades(&[1, 1, 2, 2, 3, 3]), &grades(&[1, 1, 2, 2, 3, 1])).unwrap();
        assert_eq!(qwk(&m).unwrap(), 0.5);
    }

    #[test]
    fn diagonal_gives_one() {
        let m = ConfusionMatrix { counts: [[5, 0, 0], [0, 0, 0], [0, 0, 2]] };
        assert_eq!(qwk(&m).unwrap(), 1.0);
    }

    #[test]
    fn degenerate_marginals_error() {
        let m = ConfusionMatrix { counts: [[0, 0, 0], [0, 7, 0], [0, 0, 0]] };
        assert!(matches!(qwk(&m), Err(Error::DegenerateMarginals)));
        assert!(matches!(qwk_ci(&m, 0.95), Err(Error::DegenerateMarginals)));
    }

    #[test]
    fn quadratic_weights() {
        let one = disagreement_weight(0, 1, 2.0);
        let two = disagreement_weight(0, 2, 2.0);
        assert_eq!(two, 4.0 * one);
        assert_eq!(two, 1.0);
    }

    #[test]
    fn matches_brute_force_on_random_ratings() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 100 {
            let n = rng.random_range(2..=50);
            let a: Vec<Grade> = (0..n).map(|_| Grade::new(rng.random_range(1..=3)).unwrap()).collect();
            let b: Vec<Grade> = (0..n).map(|_| Grade::new(rng.random_range(1..=3)).unwrap()).collect();
            let m = confusion(&a, &b).unwrap();
            let Ok(k) = qwk(&m) else { continue };
            assert!((k - brute_force_qwk(&a, &b)).abs() < 1e-12);
            checked += 1;
        }
    }

    #[test]
    fn perfect_agreement_has_zero_width_interval() {
        let m = ConfusionMatrix { counts: [[10, 0, 0], [0, 10, 0], [0, 0, 10]] };
        let r = qwk_ci(&m, 0.95).unwrap();
        assert_eq!(r.kappa, 1.0);
        assert!(r.standard_error.abs() < 1e-12);
        assert!((r.ci_low - 1.0).abs() < 1e-12 && (r.ci_high - 1.0).abs() < 1e-12);
    }

    #[test]
    fn standard_error_scales_with_root_n() {
        let m = ConfusionMatrix { counts: [[8, 3, 1], [2, 20, 4], [0, 5, 9]] };
        let a = qwk_ci(&m, 0.95).unwrap();
        let b = qwk_ci(&m.scaled(4), 0.95).unwrap();
        assert_eq!(a.kappa, b.kappa);
        assert!((a.standard_error / b.standard_error - 2.0).abs() < 1e-9);
        assert!((a.kappa - a.ci_low - (a.ci_high - a.kappa)).abs() < 1e-12);
    }

    #[test]
    fn z_value_for_95_percent() {
        assert!((z_value(0.95).unwrap() - 1.959964).abs() < 1e-6);
        assert!(z_value(1.0).is_err());
    }

    #[test]
    fn multi_run_examples() {
        let s = multi_run_stats(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!((s.mean, s.sd), (0.5, Some(0.0)));
        let s = multi_run_stats(&[0.74, 0.78, 0.76]).unwrap();
        assert!((s.mean - 0.76).abs() < 1e-12);
        assert!((s.sd.unwrap() - 0.02).abs() < 1e-12);
        let s = multi_run_stats(&[0.76]).unwrap();
        assert_eq!((s.mean, s.sd), (0.76, None));
        assert!(multi_run_stats(&[]).is_err());
    }

    #[test]
    fn model_copying_observer_one() {
        let o1 = grades(&[1, 2, 3, 2, 2, 1, 3, 3]);
        let o2 = grades(&[1, 2, 2, 2, 3, 1, 3, 2]);
        let o3 = grades(&[2, 2, 3, 1, 2, 1, 3, 3]);
        let g = RaterGrades { observers: [o1.clone(), o2, o3], model: o1 };
        let report = level_report(Level::Lesion, &g, 0.95).unwrap();
        assert_eq!(report.pairs.len(), 6);
        assert_eq!(report.pair(Rater::Observer1, Rater::Model).unwrap().kappa.unwrap().kappa, 1.0);
        assert_eq!(
            report.pair(Rater::Observer2, Rater::Model).unwrap().kappa.unwrap().kappa,
            report.pair(Rater::Observer2, Rater::Observer1).unwrap().kappa.unwrap().kappa
        );
        let ab = report.pair(Rater::Observer1, Rater::Observer2).unwrap();
        let ba = report.pair(Rater::Observer2, Rater::Observer1).unwrap();
        assert_eq!(ab.matrix.transpose(), ba.matrix);
    }

    #[test]
    fn csv_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let o = grades(&[1, 2, 3, 2, 1, 3]);
        let m = grades(&[1, 2, 2, 2, 1, 3]);
        let g = RaterGrades { observers: [o.clone(), m.clone(), o.clone()], model: m };
        let report = level_report(Level::Patient, &g, 0.95).unwrap();
        let kp = dir.path().join("k.csv");
        report.write_kappa_csv(&kp).unwrap();
        let text = std::fs::read_to_string(&kp).unwrap();
        assert!(text.starts_with("rater_a,rater_b,kappa,ci_low,ci_high,n\nobserver1,observer2,"));
        assert_eq!(text.lines().count(), 7);
        let back = read_kappa_csv(&kp).unwrap();
        assert_eq!(back.len(), 6);
        assert!((back[0].kappa - report.pairs[0].kappa.unwrap().kappa).abs() < 1e-6);
        assert_eq!(back[0].n, 6);
        let cp = dir.path().join("c.csv");
        report.write_confusion_csv(&cp).unwrap();
        let text = std::fs::read_to_string(&cp).unwrap();
        assert!(text.starts_with("observer1 vs observer2,grade1,grade2,grade3\ngrade1,2,0,0\n"));
        report.write_heatmap_png(&dir.path().join("h.png")).unwrap();
    }

    #[test]
    fn multi_run_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |k: f64| RunKappas {
            lesion: REPORT_PAIRS
                .iter()
                .map(|&(a, b)| KappaRow { rater_a: b, rater_b: a, kappa: k, ci_low: k, ci_high: k, n: 9 })
                .collect(),
            patient: Vec::new(),
        };
        let rows = multi_run_table(&[mk(0.74), mk(0.78), mk(0.76)]).unwrap();
        let p = dir.path().join("m.csv");
        write_multi_run_csv(&rows, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text.lines().nth(1).unwrap(),
            "observer1,0.760000,0.020000,NA,NA,3"
        );
    }

    fn arb_matrix() -> impl Strategy<Value = ConfusionMatrix> {
        proptest::array::uniform3(proptest::array::uniform3(0u64..20))
            .prop_map(|counts| ConfusionMatrix { counts })
    }

    proptest! {
        #[test]
        fn kappa_is_bit_symmetric(m in arb_matrix()) {
            match (qwk_ci(&m, 0.95), qwk_ci(&m.transpose(), 0.95)) {
                (Ok(a), Ok(b)) => {
                    prop_assert_eq!(a.kappa.to_bits(), b.kappa.to_bits());
                    prop_assert_eq!(a.standard_error.to_bits(), b.standard_error.to_bits());
                    prop_assert!(a.kappa >= -1.0 - 1e-12 && a.kappa <= 1.0 + 1e-12);
                    prop_assert!(a.ci_low <= a.kappa && a.kappa <= a.ci_high);
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "asymmetric failure"),
            }
        }

        #[test]
        fn marginal_diagonal_is_perfect(rows in proptest::array::uniform3(0u64..30)) {
            prop_assume!(rows.iter().filter(|r| **r > 0).count() >= 2);
            let m = ConfusionMatrix { counts: [[rows[0], 0, 0], [0, rows[1], 0], [0, 0, rows[2]]] };
            prop_assert_eq!(qwk(&m).unwrap(), 1.0);
        }
    }
}
