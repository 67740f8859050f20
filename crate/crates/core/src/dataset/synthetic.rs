//! Stand-in student generator with the published schema and plausible
//! marginals. Used for headless runs and tests when the published file is not
//! available; it is not the published data and reproduces none of its numbers.

use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Normal;

use super::{FeatureSchema, StudentRecord};
use crate::rng::seeded;

const NOISE_SD: f64 = 2.0;

/// Row count of the published mathematics file; the default stand-in size.
pub const SYNTHETIC_ROWS: usize = 395;

/// Level/value weights per feature key. Ordinal weights start at `range.min`.
fn weights(key: &str) -> &'static [f64] {
    match key {
        "guardian" => &[0.69, 0.23, 0.08],
        "Mjob" => &[0.15, 0.26, 0.15, 0.09, 0.35],
        "Fjob" => &[0.05, 0.28, 0.07, 0.05, 0.55],
        "Pstatus" => &[0.9, 0.1],
        "Medu" => &[0.01, 0.15, 0.26, 0.25, 0.33],
        "Fedu" => &[0.01, 0.21, 0.29, 0.25, 0.24],
        "famsize" => &[0.29, 0.71],
        "famsup" => &[0.39, 0.61],
        "famrel" => &[0.02, 0.05, 0.17, 0.49, 0.27],
        "school" => &[0.88, 0.12],
        "reason" => &[0.28, 0.27, 0.37, 0.08],
        "traveltime" => &[0.65, 0.27, 0.06, 0.02],
        "studytime" => &[0.27, 0.5, 0.16, 0.07],
        "failures" => &[0.79, 0.13, 0.04, 0.04, 0.0],
        "schoolsup" => &[0.87, 0.13],
        "higher" => &[0.05, 0.95],
        "paid" => &[0.54, 0.46],
        "nursery" => &[0.21, 0.79],
        "age" => &[0.21, 0.26, 0.25, 0.21, 0.06, 0.005, 0.003, 0.002],
        "sex" => &[0.53, 0.47],
        "address" => &[0.22, 0.78],
        "romantic" => &[0.67, 0.33],
        "health" => &[0.12, 0.11, 0.23, 0.17, 0.37],
        "activities" => &[0.49, 0.51],
        "internet" => &[0.17, 0.83],
        "freetime" => &[0.05, 0.16, 0.4, 0.29, 0.1],
        "goout" => &[0.06, 0.26, 0.33, 0.22, 0.13],
        "Dalc" => &[0.7, 0.19, 0.07, 0.02, 0.02],
        "Walc" => &[0.38, 0.22, 0.2, 0.13, 0.07],
        _ => &[],
    }
}

/// Generate `n` schema-valid records with a noisy, mildly nonlinear grade.
pub fn synthetic_students(n: usize, seed: u64) -> Vec<StudentRecord> {
    let schema = FeatureSchema::student();
    let mut rng = seeded(seed, 0x5713);
    let noise = Normal::new(0.0, NOISE_SD).expect("valid sigma");
    let at = |key: &str| schema.index_of(key).expect("schema key");

    (0..n)
        .map(|row| {
            let mut values = Vec::with_capacity(schema.len());
            for f in &schema.features {
                let v = if f.key == "absences" {
                    if rng.random_bool(0.29) {
                        0
                    } else {
                        let u: f64 = rng.random();
                        ((-7.0 * (1.0 - u).ln()).ceil() as i32).clamp(1, 75)
                    }
                } else {
                    let w = weights(&f.key);
                    let idx = WeightedIndex::new(w).expect("weights").sample(&mut rng) as i32;
                    idx + f.range.map_or(0, |r| r.min)
                };
                values.push(v);
            }
            // weekend drinking is at least workday drinking
            let (d, w) = (at("Dalc"), at("Walc"));
            values[w] = values[w].max(values[d]);

            let v = |key: &str| f64::from(values[at(key)]);
            let failures = v("failures");
            let mut grade = 10.6 - 1.9 * failures
                + 0.45 * (v("Medu") - 2.7)
                + 0.2 * (v("Fedu") - 2.5)
                + 1.6 * (v("higher") - 0.95)
                + 0.6 * (v("studytime") - 2.0)
                - 0.5 * (v("goout") - 3.0)
                - 1.1 * v("schoolsup")
                + 0.5 * v("internet")
                - 0.35 * (v("age") - 16.7)
                - 0.3 * (v("Walc") - 2.3)
                + 0.7 * f64::from(values[at("Mjob")] == 3)
                + 0.9 * f64::from(values[at("reason")] == 1)
                + 0.6 * (v("sex") - 0.47)
                - 0.05 * (v("absences") - 5.0).max(0.0)
                + 1.5 * f64::from(v("higher") > 0.0 && v("studytime") >= 3.0)
                + 0.6 * (v("Medu") - 2.7) * (v("studytime") - 2.0)
                - 0.5 * (v("failures") * (v("goout") - 3.0))
                + 1.2 * f64::from(values[at("guardian")] == 0) * (v("famrel") - 3.5)
                - 0.08 * (v("absences") - 10.0).max(0.0) * (v("Dalc") - 1.0)
                - 2.0 * f64::from(v("goout") >= 4.0 && v("Walc") >= 4.0)
                + noise.sample(&mut rng);
            // drop-outs: grade 0, no recorded absences, mostly past failures
            if values[at("absences")] == 0 {
                let p_drop = if failures >= 1.0 { 1.0 } else { 0.0 };
                if rng.random_bool(p_drop) {
                    grade = 0.0;
                }
            }
            StudentRecord {
                id: format!("syn-{:03}", row + 1),
                values,
                grade: grade.round().clamp(0.0, 20.0) as u8,
            }
        })
        .collect()
}

/// Write records in the published semicolon layout (quoted text cells,
/// `G1;G2;G3` trailing columns; the two early grades are filled with the
/// final grade since they are never read back).
pub fn write_semicolon_file(
    path: impl AsRef<Path>,
    schema: &FeatureSchema,
    records: &[StudentRecord],
) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header: Vec<&str> = schema.features.iter().map(|f| f.key.as_str()).collect();
    header.extend(["G1", "G2", schema.target.key.as_str()]);
    writeln!(out, "{}", header.join(";"))?;
    for r in records {
        let mut cells: Vec<String> = schema
            .features
            .iter()
            .zip(&r.values)
            .map(|(f, &v)| {
                if f.is_categorical() {
                    format!("\"{}\"", f.code(v))
                } else {
                    v.to_string()
                }
            })
            .collect();
        let g = r.grade.to_string();
        cells.extend([g.clone(), g.clone(), g]);
        writeln!(out, "{}", cells.join(";"))?;
    }
    out.flush()
}
