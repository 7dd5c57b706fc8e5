//! Synthetic graded lesions with simulated observers.
//!
//! Each lesion is a pink duct outline filled with dark elliptical nuclei.
//! Nucleus size and size variability grow with grade, and grade 3 adds a
//! nucleus-free necrotic center, so the grade is visible in the pixels.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    largest_remainder, DatasetManifest, Grade, LesionRecord, ObserverGrades, PatientRecord,
};
use crate::error::{Error, Result};
use crate::patchkit::RegionImage;
use crate::seed::{self, StreamRng};

/// Probability that a lesion keeps its patient's grade.
pub const LESION_STAYS_WITH_PATIENT: f64 = 0.8;
/// Blank margin around the duct, in pixels.
pub const MARGIN_PX: usize = 128;

const STROMA: [f64; 3] = [236.0, 172.0, 202.0];
const LUMEN: [f64; 3] = [246.0, 210.0, 228.0];
const NECROSIS: [f64; 3] = [228.0, 214.0, 220.0];
const NUCLEUS: [f64; 3] = [78.0, 46.0, 122.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_patients: usize,
    pub lesions_per_patient: (usize, usize),
    /// Target lesion-level share of grades 1, 2, 3.
    pub grade_mix: [f64; 3],
    pub observer_error_rate: f64,
    pub image_mpp: f64,
    /// Duct diameter range.
    pub lesion_size_px: (usize, usize),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_patients: 100,
            lesions_per_patient: (3, 7),
            grade_mix: [152.0 / 1001.0, 645.0 / 1001.0, 204.0 / 1001.0],
            observer_error_rate: 0.2,
            image_mpp: 0.88,
            lesion_size_px: (256, 1024),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        let (lo, hi) = self.lesions_per_patient;
        if lo == 0 || lo > hi {
            return bad(format!("invalid lesions per patient range {lo}..{hi}"));
        }
        if self.grade_mix.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return bad(format!("grade mix {:?} has negative entries", self.grade_mix));
        }
        let sum: f64 = self.grade_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("grade mix {:?} sums to {sum}, not 1", self.grade_mix));
        }
        if !(0.0..=0.5).contains(&self.observer_error_rate) {
            return bad(format!("observer error rate {} outside [0, 0.5]", self.observer_error_rate));
        }
        if !(self.image_mpp > 0.0 && self.image_mpp.is_finite()) {
            return bad(format!("image mpp must be positive, got {}", self.image_mpp));
        }
        let (lo, hi) = self.lesion_size_px;
        if lo < 32 || lo > hi {
            return bad(format!("invalid lesion size range {lo}..{hi} (minimum 32)"));
        }
        Ok(())
    }
}

/// Mean nucleus radius (px at 0.88 µm/px) and its coefficient of variation.
pub fn nucleus_profile(grade: Grade) -> (f64, f64) {
    match grade.value() {
        1 => (4.0, 0.10),
        2 => (6.0, 0.25),
        _ => (9.0, 0.45),
    }
}

/// Fraction of the duct area covered by the grade-3 necrotic center.
pub const NECROSIS_AREA_FRACTION: f64 = 0.15;
const NUCLEUS_COVERAGE: f64 = 0.30;

/// A rendered duct and its outline polygon in image pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthLesion {
    pub image: RegionImage,
    pub polygon: Vec<(f64, f64)>,
}

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

struct Nucleus {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
}

/// Renders one duct of diameter `size_px` at `mpp` µm/px.
pub fn generate_lesion_image(
    grade: Grade,
    size_px: usize,
    mpp: f64,
    rng: &mut StreamRng,
) -> Result<SynthLesion> {
    if size_px < 32 || !(mpp > 0.0 && mpp.is_finite()) {
        return Err(Error::Domain(format!("cannot render a {size_px} px lesion at {mpp} mpp")));
    }
    let side = size_px + 2 * MARGIN_PX;
    let r_outer = size_px as f64 / 2.0;
    let c = side as f64 / 2.0;

    let n_vert = 24;
    let polygon: Vec<(f64, f64)> = (0..n_vert)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / n_vert as f64;
            let r = r_outer * rng.random_range(0.85..=1.0);
            (c + r * t.cos(), c + r * t.sin())
        })
        .collect();

    let mut inside = vec![false; side * side];
    for y in 0..side {
        for x in 0..side {
            inside[y * side + x] = point_in_polygon(x as f64 + 0.5, y as f64 + 0.5, &polygon);
        }
    }
    let duct_area = inside.iter().filter(|&&v| v).count() as f64;

    let necrosis_r = if grade == Grade::THREE {
        (NECROSIS_AREA_FRACTION * duct_area / PI).sqrt()
    } else {
        0.0
    };

    let mut px = vec![0f64; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            let i = y * side + x;
            let d = ((x as f64 + 0.5 - c).powi(2) + (y as f64 + 0.5 - c).powi(2)).sqrt();
            let base = if d < necrosis_r {
                NECROSIS
            } else if inside[i] {
                LUMEN
            } else {
                STROMA
            };
            let n: f64 = rng.random_range(-8.0..8.0);
            for ch in 0..3 {
                px[i * 3 + ch] = base[ch] + n;
            }
        }
    }

    let scale = 0.88 / mpp;
    let (mean_r, cv) = nucleus_profile(grade);
    let mean_r = mean_r * scale;
    let radius = Normal::new(mean_r, cv * mean_r).expect("finite normal");
    let min_r = (0.4 * mean_r).max(1.5);
    let max_r = 2.2 * mean_r;
    let gap = 2.0;
    let cell = 2.0 * max_r * 1.3 + gap;
    let cells = (side as f64 / cell).ceil() as usize + 1;
    let mut grid: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    let mut nuclei: Vec<Nucleus> = Vec::new();

    // Radii are drawn up front and placed largest first, so crowding does
    // not bias the realized size distribution toward small nuclei.
    let target = NUCLEUS_COVERAGE * (duct_area - PI * necrosis_r * necrosis_r);
    let mut radii = Vec::new();
    let mut planned = 0.0;
    while planned < target {
        let r = radius.sample(rng).clamp(min_r, max_r);
        planned += PI * r * r;
        radii.push(r);
    }
    radii.sort_by(|a, b| b.total_cmp(a));
    let in_duct = |x: f64, y: f64| -> bool {
        if x < 0.0 || y < 0.0 || x >= side as f64 || y >= side as f64 {
            return false;
        }
        inside[y as usize * side + x as usize]
    };
    for r in radii {
        let elong: f64 = rng.random_range(1.0..1.3);
        let angle: f64 = rng.random_range(0.0..PI);
        let reach = r * elong;
        for _ in 0..200 {
            let cx = rng.random_range(0.0..side as f64);
            let cy = rng.random_range(0.0..side as f64);
            if ((cx - c).powi(2) + (cy - c).powi(2)).sqrt() < necrosis_r + reach + gap {
                continue;
            }
            let fits = (0..8).all(|k| {
                let t = PI * k as f64 / 4.0;
                in_duct(cx + (reach + 1.0) * t.cos(), cy + (reach + 1.0) * t.sin())
            });
            if !fits {
                continue;
            }
            let (gx, gy) = ((cx / cell) as usize, (cy / cell) as usize);
            let clear = (gy.saturating_sub(1)..=(gy + 1).min(cells)).all(|ny| {
                (gx.saturating_sub(1)..=(gx + 1).min(cells)).all(|nx| {
                    grid.get(&(nx, ny)).is_none_or(|members| {
                        members.iter().all(|&o| {
                            let other = &nuclei[o];
                            let d = ((cx - other.cx).powi(2) + (cy - other.cy).powi(2)).sqrt();
                            d >= reach + other.a + gap
                        })
                    })
                })
            });
            if !clear {
                continue;
            }
            grid.entry((gx, gy)).or_default().push(nuclei.len());
            nuclei.push(Nucleus {
                cx,
                cy,
                a: reach,
                b: r / elong,
                angle,
            });
            break;
        }
    }

    for n in &nuclei {
        let (s, co) = n.angle.sin_cos();
        let x0 = (n.cx - n.a).floor().max(0.0) as usize;
        let x1 = ((n.cx + n.a).ceil() as usize).min(side - 1);
        let y0 = (n.cy - n.a).floor().max(0.0) as usize;
        let y1 = ((n.cy + n.a).ceil() as usize).min(side - 1);
        let shade: f64 = rng.random_range(-12.0..12.0);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 + 0.5 - n.cx;
                let dy = y as f64 + 0.5 - n.cy;
                let u = (dx * co + dy * s) / n.a;
                let v = (-dx * s + dy * co) / n.b;
                if u * u + v * v <= 1.0 {
                    let i = (y * side + x) * 3;
                    let noise: f64 = rng.random_range(-6.0..6.0);
                    for ch in 0..3 {
                        px[i + ch] = NUCLEUS[ch] + shade + noise;
                    }
                }
            }
        }
    }

    let pixels = px.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    Ok(SynthLesion {
        image: RegionImage::new(side, side, pixels, mpp)?,
        polygon,
    })
}

/// Three independent observers, each wrong with probability `error_rate`
/// and then only by one grade.
pub fn simulate_observers(true_grade: Grade, error_rate: f64, rng: &mut StreamRng) -> ObserverGrades {
    let one = |rng: &mut StreamRng| -> Grade {
        if rng.random::<f64>() >= error_rate {
            return true_grade;
        }
        adjacent_grade(true_grade, rng)
    };
    let a = one(rng);
    let b = one(rng);
    let c = one(rng);
    ObserverGrades::new(a, b, c)
}

fn adjacent_grade(g: Grade, rng: &mut StreamRng) -> Grade {
    match g.value() {
        1 => Grade::TWO,
        3 => Grade::TWO,
        _ => {
            if rng.random_bool(0.5) {
                Grade::ONE
            } else {
                Grade::THREE
            }
        }
    }
}

/// Patient-grade mix whose lesion-level mix, after each lesion stays with
/// its patient's grade or moves to an adjacent one, equals `lesion_mix`.
pub fn patient_mix_for(lesion_mix: &[f64; 3]) -> [f64; 3] {
    let s = LESION_STAYS_WITH_PATIENT;
    let m = 1.0 - s;
    // Row g: distribution of a lesion's grade given patient grade g.
    let k = [[s, m, 0.0], [m / 2.0, s, m / 2.0], [0.0, m, s]];
    // Solve p K = q, i.e. K^T p = q, by Cramer's rule.
    let a: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| k[j][i]));
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&a);
    let mut p: [f64; 3] = std::array::from_fn(|col| {
        let mut ac = a;
        for row in 0..3 {
            ac[row][col] = lesion_mix[row];
        }
        (det(&ac) / d).max(0.0)
    });
    let sum: f64 = p.iter().sum();
    for v in &mut p {
        *v /= sum;
    }
    p
}

/// A generated dataset: the manifest plus the hidden true grades.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    pub truth: BTreeMap<String, Grade>,
    pub manifest_path: PathBuf,
}

/// Writes `images/<lesion>.png`, `manifest.json` and `truth.csv` under
/// `out_dir`. The output is a pure function of the spec.
pub fn generate_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<SynthDataset> {
    spec.validate()?;
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;

    let quotas = largest_remainder(spec.n_patients, &patient_mix_for(&spec.grade_mix));
    let mut patient_grades: Vec<Grade> = Grade::ALL
        .iter()
        .zip(quotas)
        .flat_map(|(&g, n)| std::iter::repeat_n(g, n))
        .collect();
    patient_grades.shuffle(&mut seed::stream(seed::derive_seed(spec.seed, "patient-grades")));

    let mut lesions = Vec::new();
    let mut patients = Vec::new();
    let mut truth = BTreeMap::new();
    for (pi, &pg) in patient_grades.iter().enumerate() {
        let patient_id = format!("P{:04}", pi + 1);
        let mut prng = seed::stream(seed::derive_seed(spec.seed, &patient_id));
        let (lo, hi) = spec.lesions_per_patient;
        let count = prng.random_range(lo..=hi);
        let mut ids = Vec::with_capacity(count);
        for li in 0..count {
            let lesion_id = format!("{patient_id}-L{:02}", li + 1);
            let mut lrng = seed::stream(seed::derive_seed(spec.seed, &lesion_id));
            let grade = if lrng.random::<f64>() < LESION_STAYS_WITH_PATIENT {
                pg
            } else {
                adjacent_grade(pg, &mut lrng)
            };
            let size = lrng.random_range(spec.lesion_size_px.0..=spec.lesion_size_px.1);
            let observers = simulate_observers(grade, spec.observer_error_rate, &mut lrng);
            let mut irng = seed::stream(seed::derive_seed(spec.seed, &format!("{lesion_id}/image")));
            let rendered = generate_lesion_image(grade, size, spec.image_mpp, &mut irng)?;
            let path = images.join(format!("{lesion_id}.png"));
            rendered.image.save_png(&path)?;
            lesions.push(LesionRecord::new(
                lesion_id.clone(),
                patient_id.clone(),
                path,
                rendered.polygon,
                spec.image_mpp,
                observers,
            )?);
            truth.insert(lesion_id.clone(), grade);
            ids.push(lesion_id);
        }
        patients.push(PatientRecord {
            patient_id,
            lesion_ids: ids,
        });
    }

    let manifest = DatasetManifest::new(lesions, patients, None)?;
    let manifest_path = out_dir.join("manifest.json");
    manifest.save(&manifest_path)?;
    write_truth_csv(&truth, &out_dir.join("truth.csv"))?;
    Ok(SynthDataset {
        manifest,
        truth,
        manifest_path,
    })
}

/// `lesion_id,true_grade`, sorted by lesion id.
pub fn write_truth_csv(truth: &BTreeMap<String, Grade>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["lesion_id", "true_grade"])?;
    for (id, g) in truth {
        w.write_record([id.clone(), g.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_truth_csv(path: &Path) -> Result<BTreeMap<String, Grade>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let (Some(id), Some(g)) = (rec.get(0), rec.get(1)) else {
            return Err(Error::Manifest(format!("{}: malformed truth row", path.display())));
        };
        let g: i64 = g
            .trim()
            .parse()
            .map_err(|_| Error::Manifest(format!("{}: bad grade {g:?}", path.display())))?;
        out.insert(id.to_string(), Grade::new(g)?);
    }
    Ok(out)
}
