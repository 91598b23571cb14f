//! Grade records, feature schema, encoding, partitioning, the synthetic
//! generator, and CSV ingestion.
//!
//! Features are split into shareable prior grades (`f_star`, fed to the
//! sub-networks that participate in federation) and private student/course
//! attributes (`f_prime`, never uploaded in any form). Normalization
//! constants come from the schema, not from data statistics, so no
//! cross-client information leaks through preprocessing.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{derive_seed, seeded_rng, SeededRng};

/// Number of grade classes; bins per [`bin_grade`].
pub const CLASSES: usize = 5;

/// One numeric attribute with its normalization range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDesc {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

impl FeatureDesc {
    pub fn new(name: &str, min: f64, max: f64) -> Self {
        FeatureDesc { name: name.to_string(), min, max }
    }
}

/// Describes the fixed layout of a grade record: `k` prior-course slots,
/// student attributes, and course attributes, with normalization ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    /// Column names of the prior-course grade slots.
    pub prior_courses: Vec<String>,
    pub student_features: Vec<FeatureDesc>,
    pub course_features: Vec<FeatureDesc>,
}

impl FeatureSchema {
    pub fn new(
        prior_courses: Vec<String>,
        student_features: Vec<FeatureDesc>,
        course_features: Vec<FeatureDesc>,
    ) -> Result<Self> {
        if prior_courses.is_empty() || student_features.is_empty() || course_features.is_empty() {
            return Err(Error::invalid(
                "schema needs at least one prior course, one student feature, one course feature",
            ));
        }
        for f in student_features.iter().chain(&course_features) {
            if !(f.min < f.max) {
                return Err(Error::invalid(format!(
                    "feature `{}` needs min < max",
                    f.name
                )));
            }
        }
        Ok(FeatureSchema { prior_courses, student_features, course_features })
    }

    /// Prior-course slot count (the shareable-feature dimension).
    pub fn prior_count(&self) -> usize {
        self.prior_courses.len()
    }

    /// Private-feature dimension: student plus course attributes.
    pub fn private_count(&self) -> usize {
        self.student_features.len() + self.course_features.len()
    }

    pub fn class_count(&self) -> usize {
        CLASSES
    }
}

impl Default for FeatureSchema {
    /// 12 prior-course slots, 5 student attributes, 10 course attributes.
    fn default() -> Self {
        let prior = (1..=12).map(|i| format!("g_{i}")).collect();
        let student = vec![
            FeatureDesc::new("s_age", 16.0, 30.0),
            FeatureDesc::new("s_class", 1.0, 6.0),
            FeatureDesc::new("s_gender", 0.0, 2.0),
            FeatureDesc::new("s_country", 0.0, 199.0),
            FeatureDesc::new("s_ethnicity", 0.0, 55.0),
        ];
        let course = vec![
            FeatureDesc::new("c_hours_total", 16.0, 128.0),
            FeatureDesc::new("c_hours_weekly", 1.0, 8.0),
            FeatureDesc::new("c_credits", 0.5, 6.0),
            FeatureDesc::new("c_category", 0.0, 9.0),
            FeatureDesc::new("c_textbook", 0.0, 499.0),
            FeatureDesc::new("c_exam_method", 0.0, 4.0),
            FeatureDesc::new("c_offering_unit", 0.0, 29.0),
            FeatureDesc::new("c_level", 1.0, 4.0),
            FeatureDesc::new("c_semester", 1.0, 8.0),
            FeatureDesc::new("c_capacity", 20.0, 200.0),
        ];
        FeatureSchema::new(prior, student, course).unwrap()
    }
}

/// One student-course-grade event with raw (unnormalized) attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub student_id: String,
    pub course_id: String,
    /// Grade per prior-course slot, 0-100; `None` marks a course not taken.
    pub prior_grades: Vec<Option<f64>>,
    pub student_features: Vec<f64>,
    pub course_features: Vec<f64>,
    /// The grade to predict, 0-100.
    pub target_grade: f64,
}

/// A record after normalization and binning, ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    /// Shareable features: prior grades divided by 100, missing as 0.0.
    pub f_star: Vec<f64>,
    /// Private features: student then course attributes, min-max normalized.
    pub f_prime: Vec<f64>,
    /// Grade class, 0..=4.
    pub label: usize,
}

impl EncodedSample {
    /// Both feature groups as one vector (privacy split disabled).
    pub fn full_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.f_star.len() + self.f_prime.len());
        v.extend_from_slice(&self.f_star);
        v.extend_from_slice(&self.f_prime);
        v
    }
}

/// The privacy partition of an encoded sample: shareable grades on the
/// left, private student+course attributes on the right. The two sides are
/// disjoint by construction.
pub fn mpp_split(sample: &EncodedSample) -> (&[f64], &[f64]) {
    (&sample.f_star, &sample.f_prime)
}

/// Maps a 0-100 grade to its class: [0,60) [60,70) [70,80) [80,90) [90,100].
pub fn bin_grade(grade: f64) -> Result<usize> {
    if !(0.0..=100.0).contains(&grade) {
        return Err(Error::invalid(format!("grade {grade} outside [0,100]")));
    }
    Ok(match grade {
        g if g < 60.0 => 0,
        g if g < 70.0 => 1,
        g if g < 80.0 => 2,
        g if g < 90.0 => 3,
        _ => 4,
    })
}

/// Normalizes one record against the schema. Features outside their declared
/// range clamp to [0,1]; the clamp count is returned so callers can surface
/// a warning.
pub fn encode_record(rec: &GradeRecord, schema: &FeatureSchema) -> Result<(EncodedSample, usize)> {
    if rec.prior_grades.len() != schema.prior_count()
        || rec.student_features.len() != schema.student_features.len()
        || rec.course_features.len() != schema.course_features.len()
    {
        return Err(Error::shape(format!(
            "record {}/{} does not match schema layout",
            rec.student_id, rec.course_id
        )));
    }
    let mut clamped = 0usize;
    let mut f_star = Vec::with_capacity(schema.prior_count());
    for g in &rec.prior_grades {
        match g {
            Some(v) => {
                if !(0.0..=100.0).contains(v) {
                    return Err(Error::invalid(format!("prior grade {v} outside [0,100]")));
                }
                f_star.push(v / 100.0);
            }
            None => f_star.push(0.0),
        }
    }
    let mut f_prime = Vec::with_capacity(schema.private_count());
    for (value, desc) in rec
        .student_features
        .iter()
        .zip(&schema.student_features)
        .chain(rec.course_features.iter().zip(&schema.course_features))
    {
        let mut u = (value - desc.min) / (desc.max - desc.min);
        if !(0.0..=1.0).contains(&u) {
            u = u.clamp(0.0, 1.0);
            clamped += 1;
        }
        f_prime.push(u);
    }
    let label = bin_grade(rec.target_grade)?;
    Ok((EncodedSample { f_star, f_prime, label }, clamped))
}

/// Encodes a whole dataset, accumulating the clamp count.
pub fn encode_dataset(
    records: &[GradeRecord],
    schema: &FeatureSchema,
) -> Result<(Vec<EncodedSample>, usize)> {
    let mut out = Vec::with_capacity(records.len());
    let mut clamped = 0;
    for rec in records {
        let (s, c) = encode_record(rec, schema)?;
        out.push(s);
        clamped += c;
    }
    Ok((out, clamped))
}

/// Stratified deal: per class, shuffle then hand out round-robin, so every
/// client's class proportions stay within one sample of the global ones.
pub fn partition_clients(
    dataset: &[EncodedSample],
    m: usize,
    rng: &mut SeededRng,
) -> Result<Vec<Vec<EncodedSample>>> {
    if m == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if m > dataset.len() {
        return Err(Error::invalid(format!(
            "cannot split {} samples across {m} clients",
            dataset.len()
        )));
    }
    let mut parts: Vec<Vec<EncodedSample>> = vec![Vec::new(); m];
    for class in 0..CLASSES {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset[i].label == class)
            .collect();
        idx.shuffle(rng);
        for (j, &i) in idx.iter().enumerate() {
            parts[j % m].push(dataset[i].clone());
        }
    }
    Ok(parts)
}

/// Stratified train/test split. Classes with fewer than two samples go
/// entirely to train.
pub fn train_test_split(
    dataset: &[EncodedSample],
    ratio: f64,
    rng: &mut SeededRng,
) -> Result<(Vec<EncodedSample>, Vec<EncodedSample>)> {
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} outside (0,1)")));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..CLASSES {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset[i].label == class)
            .collect();
        idx.shuffle(rng);
        let n_train = if idx.len() < 2 {
            idx.len()
        } else {
            (ratio * idx.len() as f64).round() as usize
        };
        for (j, &i) in idx.iter().enumerate() {
            if j < n_train {
                train.push(dataset[i].clone());
            } else {
                test.push(dataset[i].clone());
            }
        }
    }
    Ok((train, test))
}

/// Settings for the seeded synthetic generator. Defaults were tuned so the
/// grade marginals resemble real cohort statistics (roughly 4-6% failing)
/// while staying learnable by the reference architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_students: usize,
    pub records_per_student: usize,
    /// Latent ability range; values above 1 let strong students clamp
    /// easy-course grades at 100.
    pub ability_range: (f64, f64),
    pub difficulty_range: (f64, f64),
    /// Multiplier on the per-grade noise term; 0 makes grades a
    /// deterministic function of ability and difficulty.
    pub noise_scale: f64,
    /// 0 = homogeneous clients; larger values skew each client's class mix
    /// toward a preferred grade band.
    pub label_shift_intensity: f64,
    /// Size of the catalog target courses are drawn from.
    pub target_courses: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_students: 2500,
            records_per_student: 4,
            ability_range: (0.65, 1.55),
            difficulty_range: (0.0, 0.5),
            noise_scale: 0.002,
            label_shift_intensity: 0.0,
            target_courses: 8,
            seed: 42,
        }
    }
}

// How strongly each default-schema feature tracks its latent variable;
// cycled when a custom schema has more features.
const STUDENT_MIX: [f64; 5] = [0.7, 0.5, 0.35, 0.3, 0.3];
const COURSE_MIX: [f64; 10] = [0.995, 0.97, 0.94, 0.5, 0.3, 0.4, 0.3, 0.75, 0.3, 0.5];

/// Grade model: ability lifts, difficulty drags, plus bounded noise.
fn grade_value(ability: f64, difficulty: f64, noise_scale: f64, eps: f64) -> f64 {
    (100.0 * (0.55 * ability + 0.30 * (1.0 - difficulty) + noise_scale * eps)).clamp(0.0, 100.0)
}

fn trunc_normal01(rng: &mut SeededRng, normal: &Normal<f64>) -> f64 {
    loop {
        let x = normal.sample(rng);
        if (0.0..=1.0).contains(&x) {
            return x;
        }
    }
}

/// Generates grade records: per student a latent ability, per course a
/// latent difficulty; features are noisy readouts of those latents so they
/// carry real signal. Deterministic under the config seed.
pub fn generate_synthetic(cfg: &SyntheticConfig, schema: &FeatureSchema) -> Vec<GradeRecord> {
    let mut rng = seeded_rng(derive_seed(cfg.seed, &[0xDA7A]));
    let noise = Normal::new(0.5, 0.15).unwrap();
    let (a_lo, a_hi) = cfg.ability_range;
    let (d_lo, d_hi) = cfg.difficulty_range;
    let k = schema.prior_count();

    let prior_difficulty: Vec<f64> = (0..k).map(|_| rng.random_range(d_lo..d_hi)).collect();
    let target_difficulty: Vec<f64> = (0..cfg.target_courses.max(1))
        .map(|_| rng.random_range(d_lo..d_hi))
        .collect();

    let mut records = Vec::with_capacity(cfg.n_students * cfg.records_per_student);
    for s in 0..cfg.n_students {
        let ability = rng.random_range(a_lo..a_hi);
        let prior: Vec<Option<f64>> = prior_difficulty
            .iter()
            .map(|&d| {
                Some(grade_value(ability, d, cfg.noise_scale, trunc_normal01(&mut rng, &noise)))
            })
            .collect();
        let student_features: Vec<f64> = schema
            .student_features
            .iter()
            .enumerate()
            .map(|(f, desc)| {
                let w = STUDENT_MIX[f % STUDENT_MIX.len()];
                // map ability into [0,1] before mixing so ranges hold
                let a01 = ((ability - a_lo) / (a_hi - a_lo)).clamp(0.0, 1.0);
                let u = (w * a01 + (1.0 - w) * rng.random_range(0.0..1.0)).clamp(0.0, 1.0);
                desc.min + (desc.max - desc.min) * u
            })
            .collect();
        for _ in 0..cfg.records_per_student {
            let t = rng.random_range(0..target_difficulty.len());
            let d_t = target_difficulty[t];
            let d01 = if d_hi > d_lo { (d_t - d_lo) / (d_hi - d_lo) } else { 0.0 };
            let course_features: Vec<f64> = schema
                .course_features
                .iter()
                .enumerate()
                .map(|(f, desc)| {
                    let w = COURSE_MIX[f % COURSE_MIX.len()];
                    let u = (w * d01 + (1.0 - w) * rng.random_range(0.0..1.0)).clamp(0.0, 1.0);
                    desc.min + (desc.max - desc.min) * u
                })
                .collect();
            let target_grade =
                grade_value(ability, d_t, cfg.noise_scale, trunc_normal01(&mut rng, &noise));
            records.push(GradeRecord {
                student_id: format!("S{s}"),
                course_id: format!("T{t}"),
                prior_grades: prior.clone(),
                student_features: student_features.clone(),
                course_features,
                target_grade,
            });
        }
    }
    records
}

/// Splits a pool across clients with label shift: client `i` prefers grade
/// band `i mod 5`, with preference strength `intensity` (0 = uniform).
/// Samples are drawn class-weighted without replacement.
pub fn label_shift_partition(
    dataset: &[EncodedSample],
    m: usize,
    intensity: f64,
    rng: &mut SeededRng,
) -> Result<Vec<Vec<EncodedSample>>> {
    if m == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    let mut buckets: Vec<Vec<usize>> = (0..CLASSES)
        .map(|c| (0..dataset.len()).filter(|&i| dataset[i].label == c).collect())
        .collect();
    for b in &mut buckets {
        b.shuffle(rng);
    }
    let per_client = dataset.len() / m;
    let mut parts = Vec::with_capacity(m);
    for i in 0..m {
        let pref = i % CLASSES;
        let weights: Vec<f64> = (0..CLASSES)
            .map(|c| {
                let d = (c as i64 - pref as i64).unsigned_abs() as usize;
                let ring = d.min(CLASSES - d) as f64;
                (-intensity * ring).exp()
            })
            .collect();
        let mut part = Vec::with_capacity(per_client);
        for _ in 0..per_client {
            let total: f64 = (0..CLASSES)
                .filter(|&c| !buckets[c].is_empty())
                .map(|c| weights[c])
                .sum();
            if total == 0.0 {
                break;
            }
            let mut pick = rng.random_range(0.0..total);
            let mut chosen = None;
            for c in 0..CLASSES {
                if buckets[c].is_empty() {
                    continue;
                }
                if pick < weights[c] {
                    chosen = Some(c);
                    break;
                }
                pick -= weights[c];
            }
            let c = chosen.unwrap_or_else(|| {
                (0..CLASSES).rev().find(|&c| !buckets[c].is_empty()).unwrap()
            });
            part.push(dataset[buckets[c].pop().unwrap()].clone());
        }
        parts.push(part);
    }
    Ok(parts)
}

/// Outcome of a CSV load: rows that failed to parse are skipped, not fatal.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct CsvReport {
    /// Rows skipped because the grade was non-numeric ("pass", "fail", ...)
    /// or some field failed to parse.
    pub skipped: usize,
    /// 1-based line numbers of skipped rows (header is line 1).
    pub skipped_lines: Vec<u64>,
}

/// Reads grade records from a headered CSV file. Column order is free;
/// names must match the schema. Empty prior-grade cells mean "not taken".
pub fn load_csv(path: &Path, schema: &FeatureSchema) -> Result<(Vec<GradeRecord>, CsvReport)> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let student_col = col("student_id")?;
    let course_col = col("course_id")?;
    let grade_col = col("grade")?;
    let prior_cols: Vec<usize> = schema
        .prior_courses
        .iter()
        .map(|n| col(n))
        .collect::<Result<_>>()?;
    let sf_cols: Vec<usize> = schema
        .student_features
        .iter()
        .map(|f| col(&f.name))
        .collect::<Result<_>>()?;
    let cf_cols: Vec<usize> = schema
        .course_features
        .iter()
        .map(|f| col(&f.name))
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut report = CsvReport::default();
    for (i, row) in reader.records().enumerate() {
        let line = i as u64 + 2; // header is line 1
        let row = row?;
        match parse_row(&row, student_col, course_col, grade_col, &prior_cols, &sf_cols, &cf_cols) {
            Some(rec) => records.push(rec),
            None => {
                report.skipped += 1;
                report.skipped_lines.push(line);
            }
        }
    }
    Ok((records, report))
}

fn parse_row(
    row: &csv::StringRecord,
    student_col: usize,
    course_col: usize,
    grade_col: usize,
    prior_cols: &[usize],
    sf_cols: &[usize],
    cf_cols: &[usize],
) -> Option<GradeRecord> {
    let grade: f64 = row.get(grade_col)?.trim().parse().ok()?;
    if !(0.0..=100.0).contains(&grade) {
        return None;
    }
    let mut prior = Vec::with_capacity(prior_cols.len());
    for &c in prior_cols {
        let cell = row.get(c)?.trim();
        if cell.is_empty() {
            prior.push(None);
        } else {
            let v: f64 = cell.parse().ok()?;
            if !(0.0..=100.0).contains(&v) {
                return None;
            }
            prior.push(Some(v));
        }
    }
    let parse_all = |cols: &[usize]| -> Option<Vec<f64>> {
        cols.iter()
            .map(|&c| row.get(c)?.trim().parse().ok())
            .collect()
    };
    Some(GradeRecord {
        student_id: row.get(student_col)?.to_string(),
        course_id: row.get(course_col)?.to_string(),
        prior_grades: prior,
        student_features: parse_all(sf_cols)?,
        course_features: parse_all(cf_cols)?,
        target_grade: grade,
    })
}

/// Writes records in the same column layout `load_csv` reads. Reals are
/// written with shortest round-trip formatting, so load(save(x)) == x.
pub fn save_csv(path: &Path, records: &[GradeRecord], schema: &FeatureSchema) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = vec!["student_id".to_string(), "course_id".to_string(), "grade".to_string()];
    header.extend(schema.prior_courses.iter().cloned());
    header.extend(schema.student_features.iter().map(|f| f.name.clone()));
    header.extend(schema.course_features.iter().map(|f| f.name.clone()));
    writeln!(file, "{}", header.join(","))?;
    for rec in records {
        let mut cells = vec![rec.student_id.clone(), rec.course_id.clone(), fmt_f64(rec.target_grade)];
        for g in &rec.prior_grades {
            cells.push(g.map(fmt_f64).unwrap_or_default());
        }
        for v in rec.student_features.iter().chain(&rec.course_features) {
            cells.push(fmt_f64(*v));
        }
        writeln!(file, "{}", cells.join(","))?;
    }
    Ok(())
}

fn fmt_f64(v: f64) -> String {
    // `{}` on f64 is the shortest representation that round-trips.
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_grade_boundaries() {
        assert_eq!(bin_grade(59.99).unwrap(), 0);
        assert_eq!(bin_grade(60.0).unwrap(), 1);
        assert_eq!(bin_grade(100.0).unwrap(), 4);
        assert!(bin_grade(-0.01).is_err());
        assert!(bin_grade(100.01).is_err());
        // every integer grade lands in exactly the expected bin
        for g in 0..=100u32 {
            let want = match g {
                0..=59 => 0,
                60..=69 => 1,
                70..=79 => 2,
                80..=89 => 3,
                _ => 4,
            };
            assert_eq!(bin_grade(g as f64).unwrap(), want, "grade {g}");
        }
    }

    fn tiny_schema() -> FeatureSchema {
        FeatureSchema::new(
            vec!["g_1".into(), "g_2".into()],
            vec![FeatureDesc::new("s_a", 0.0, 10.0)],
            vec![FeatureDesc::new("c_a", 5.0, 15.0)],
        )
        .unwrap()
    }

    fn tiny_record() -> GradeRecord {
        GradeRecord {
            student_id: "S0".into(),
            course_id: "T0".into(),
            prior_grades: vec![Some(85.0), None],
            student_features: vec![0.0],
            course_features: vec![15.0],
            target_grade: 77.5,
        }
    }

    #[test]
    fn encode_normalizes_and_zero_fills() {
        let (s, clamped) = encode_record(&tiny_record(), &tiny_schema()).unwrap();
        assert_eq!(s.f_star, vec![0.85, 0.0]);
        assert_eq!(s.f_prime, vec![0.0, 1.0]); // min and max endpoints
        assert_eq!(s.label, 2);
        assert_eq!(clamped, 0);
    }

    #[test]
    fn encode_clamps_out_of_range_features() {
        let mut rec = tiny_record();
        rec.student_features = vec![12.0]; // above max 10
        let (s, clamped) = encode_record(&rec, &tiny_schema()).unwrap();
        assert_eq!(s.f_prime[0], 1.0);
        assert_eq!(clamped, 1);
    }

    #[test]
    fn mpp_split_partitions_features() {
        let schema = FeatureSchema::default();
        assert_eq!(schema.prior_count(), 12);
        assert_eq!(schema.private_count(), 15);
        let (s, _) = encode_record(
            &GradeRecord {
                student_id: "S".into(),
                course_id: "T".into(),
                prior_grades: vec![Some(70.0); 12],
                student_features: vec![20.0, 3.0, 1.0, 10.0, 4.0],
                course_features: vec![32.0, 4.0, 3.0, 2.0, 17.0, 1.0, 8.0, 2.0, 3.0, 60.0],
                target_grade: 91.0,
            },
            &schema,
        )
        .unwrap();
        let (star, prime) = mpp_split(&s);
        assert_eq!((star.len(), prime.len()), (12, 15));
        assert_eq!(s.full_vector().len(), 27);
    }

    fn labeled(n_per_class: usize) -> Vec<EncodedSample> {
        (0..CLASSES)
            .flat_map(|c| {
                (0..n_per_class).map(move |i| EncodedSample {
                    f_star: vec![i as f64],
                    f_prime: vec![c as f64],
                    label: c,
                })
            })
            .collect()
    }

    #[test]
    fn partition_is_stratified_and_exact() {
        let data = labeled(20); // 100 samples, 20 per class
        let parts = partition_clients(&data, 5, &mut seeded_rng(9)).unwrap();
        assert_eq!(parts.len(), 5);
        for p in &parts {
            assert_eq!(p.len(), 20);
            for c in 0..CLASSES {
                assert_eq!(p.iter().filter(|s| s.label == c).count(), 4);
            }
        }
        let total: usize = parts.iter().map(Vec::len).sum();
        assert_eq!(total, 100);
    }

    #[test]
    fn partition_single_client_keeps_everything() {
        let data = labeled(3);
        let parts = partition_clients(&data, 1, &mut seeded_rng(1)).unwrap();
        assert_eq!(parts[0].len(), data.len());
    }

    #[test]
    fn split_seventy_thirty() {
        let data: Vec<EncodedSample> = (0..10)
            .map(|i| EncodedSample { f_star: vec![i as f64], f_prime: vec![], label: 2 })
            .collect();
        let (train, test) = train_test_split(&data, 0.7, &mut seeded_rng(4)).unwrap();
        assert_eq!((train.len(), test.len()), (7, 3));
        // union equals the original set, intersection empty
        let mut all: Vec<f64> = train.iter().chain(&test).map(|s| s.f_star[0]).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..10).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn split_tiny_class_goes_to_train() {
        let data = vec![EncodedSample { f_star: vec![1.0], f_prime: vec![], label: 0 }];
        let (train, test) = train_test_split(&data, 0.7, &mut seeded_rng(4)).unwrap();
        assert_eq!((train.len(), test.len()), (1, 0));
    }

    #[test]
    fn split_preserves_per_class_counts() {
        let data = labeled(13);
        let (train, test) = train_test_split(&data, 0.7, &mut seeded_rng(8)).unwrap();
        for c in 0..CLASSES {
            let n = train.iter().chain(&test).filter(|s| s.label == c).count();
            assert_eq!(n, 13);
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SyntheticConfig { n_students: 40, ..Default::default() };
        let schema = FeatureSchema::default();
        let a = generate_synthetic(&cfg, &schema);
        let b = generate_synthetic(&cfg, &schema);
        assert_eq!(a, b);
        assert_eq!(a.len(), 40 * cfg.records_per_student);
    }

    #[test]
    fn synthetic_fail_fraction_in_band() {
        let cfg = SyntheticConfig { n_students: 2500, ..Default::default() };
        let schema = FeatureSchema::default();
        let recs = generate_synthetic(&cfg, &schema);
        let fails = recs.iter().filter(|r| r.target_grade < 60.0).count();
        let frac = fails as f64 / recs.len() as f64;
        assert!(
            (0.02..=0.08).contains(&frac),
            "fail fraction {frac} outside [2%, 8%]"
        );
    }

    #[test]
    fn grade_is_deterministic_without_noise() {
        let a = grade_value(1.0, 0.2, 0.0, 0.1);
        let b = grade_value(1.0, 0.2, 0.0, 0.9);
        assert_eq!(a, b);
        assert_eq!(a, 100.0f64.min(100.0 * (0.55 + 0.30 * 0.8)));
    }

    #[test]
    fn label_shift_skews_class_mix() {
        let data = labeled(200); // 1000 samples balanced
        let parts =
            label_shift_partition(&data, 5, 2.0, &mut seeded_rng(3)).unwrap();
        // client 0 prefers class 0: it should hold well over the uniform 40
        let c0 = parts[0].iter().filter(|s| s.label == 0).count();
        assert!(c0 > 80, "expected strong skew, got {c0}/200 of class 0");
        let total: usize = parts.iter().map(Vec::len).sum();
        assert_eq!(total, 1000);
    }

    #[test]
    fn csv_round_trip_and_skip_rules() {
        let schema = tiny_schema();
        let dir = std::env::temp_dir().join(format!("fedlop-data-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.csv");
        let records = vec![tiny_record()];
        save_csv(&path, &records, &schema).unwrap();
        let (loaded, report) = load_csv(&path, &schema).unwrap();
        assert_eq!(loaded, records);
        assert_eq!(report.skipped, 0);

        // header-only file loads empty
        let empty = dir.join("empty.csv");
        std::fs::write(&empty, "student_id,course_id,grade,g_1,g_2,s_a,c_a\n").unwrap();
        let (loaded, report) = load_csv(&empty, &schema).unwrap();
        assert!(loaded.is_empty());
        assert_eq!(report.skipped, 0);

        // non-numeric grade rows are skipped with their line numbers
        let skips = dir.join("skips.csv");
        std::fs::write(
            &skips,
            "student_id,course_id,grade,g_1,g_2,s_a,c_a\n\
             S1,T1,pass,80,,5,10\n\
             S2,T2,88,80,70,5,10\n",
        )
        .unwrap();
        let (loaded, report) = load_csv(&skips, &schema).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(report.skipped, 1);
        assert_eq!(report.skipped_lines, vec![2]);

        // a missing schema column is a hard error naming the column
        let missing = dir.join("missing.csv");
        std::fs::write(&missing, "student_id,course_id,grade,g_1,s_a,c_a\nS,T,80,70,5,10\n")
            .unwrap();
        match load_csv(&missing, &schema) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "g_2"),
            other => panic!("expected MissingColumn, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
