//! Student performance data: the fixed 30-feature stimulus schema, the
//! semicolon-separated loader and the 43-dimensional model encoding.

mod synthetic;

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::seeded;

pub use synthetic::{synthetic_students, write_semicolon_file, SYNTHETIC_ROWS};

/// Dimensionality of [`FeatureVector`].
pub const ENCODED_DIM: usize = 43;
/// Number of raw features shown to participants.
pub const N_FEATURES: usize = 30;
pub const GRADE_MIN: u8 = 0;
pub const GRADE_MAX: u8 = 20;

const SCHEMA_JSON: &str = include_str!("../../data/feature_schema.json");

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file: {0}")]
    Csv(#[from] csv::Error),
    #[error("unknown column `{0}` in header")]
    UnknownColumn(String),
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: value `{value}` is outside the allowed set")]
    InvalidValue {
        row: usize,
        column: String,
        value: String,
    },
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("record {id} does not match the schema: {reason}")]
    SchemaMismatch { id: String, reason: String },
    #[error("need at least {needed} records, got {got}")]
    InsufficientRecords { needed: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    Family,
    School,
    Other,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Family, Category::School, Category::Other];
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Binary,
    Ordinal,
    Nominal,
    Count,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Level {
    /// Value as written in the dataset file.
    pub code: String,
    /// Value as shown to participants.
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntRange {
    pub min: i32,
    pub max: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDef {
    /// Dataset column name.
    pub key: String,
    pub label: String,
    pub category: Category,
    pub kind: FeatureKind,
    /// Enumerated levels (binary and nominal features).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<Level>,
    /// Integer domain (ordinal and count features).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<IntRange>,
    /// Display labels for ordinal values, `range.min` first.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub value_labels: Vec<String>,
}

impl FeatureDef {
    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, FeatureKind::Binary | FeatureKind::Nominal)
    }

    /// Number of encoded dimensions this feature occupies.
    pub fn width(&self) -> usize {
        match self.kind {
            FeatureKind::Nominal if self.levels.len() > 2 => self.levels.len(),
            _ => 1,
        }
    }

    pub fn contains(&self, value: i32) -> bool {
        match self.range {
            Some(r) => (r.min..=r.max).contains(&value),
            None => value >= 0 && (value as usize) < self.levels.len(),
        }
    }

    /// Parse a raw dataset cell into the stored value.
    pub fn parse(&self, raw: &str) -> Option<i32> {
        let raw = raw.trim().trim_matches('"');
        if self.is_categorical() {
            self.levels
                .iter()
                .position(|l| l.code == raw)
                .map(|i| i as i32)
        } else {
            raw.parse::<i32>().ok().filter(|v| self.contains(*v))
        }
    }

    /// Dataset spelling of a stored value.
    pub fn code(&self, value: i32) -> String {
        if self.is_categorical() {
            self.levels[value as usize].code.clone()
        } else {
            value.to_string()
        }
    }

    /// Participant-facing spelling of a stored value.
    pub fn display(&self, value: i32) -> String {
        if self.is_categorical() {
            return self.levels[value as usize].label.clone();
        }
        let min = self.range.map_or(0, |r| r.min);
        self.value_labels
            .get((value - min) as usize)
            .cloned()
            .unwrap_or_else(|| value.to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Target {
    pub key: String,
    pub label: String,
    pub min: u8,
    pub max: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub note: String,
    pub target: Target,
    pub excluded_columns: Vec<String>,
    pub features: Vec<FeatureDef>,
}

impl FeatureSchema {
    /// The shipped student-performance schema.
    pub fn student() -> FeatureSchema {
        Self::from_json(SCHEMA_JSON).expect("shipped schema is valid")
    }

    pub fn shipped_json() -> &'static str {
        SCHEMA_JSON
    }

    pub fn from_json(text: &str) -> Result<FeatureSchema, DatasetError> {
        let schema: FeatureSchema =
            serde_json::from_str(text).map_err(|e| DatasetError::Schema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::Schema(m));
        if self.features.len() != N_FEATURES {
            return bad(format!(
                "expected {N_FEATURES} features, found {}",
                self.features.len()
            ));
        }
        let mut seen = HashSet::new();
        for f in &self.features {
            if !seen.insert(f.key.as_str()) {
                return bad(format!("duplicate feature `{}`", f.key));
            }
            match f.kind {
                FeatureKind::Binary if f.levels.len() != 2 => {
                    return bad(format!("binary feature `{}` needs two levels", f.key))
                }
                FeatureKind::Nominal if f.levels.len() < 2 => {
                    return bad(format!("nominal feature `{}` needs levels", f.key))
                }
                FeatureKind::Ordinal | FeatureKind::Count if f.range.is_none() => {
                    return bad(format!("feature `{}` needs a range", f.key))
                }
                _ => {}
            }
        }
        if self.encoded_dim() != ENCODED_DIM {
            return bad(format!(
                "encoded width {} != {ENCODED_DIM}",
                self.encoded_dim()
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn encoded_dim(&self) -> usize {
        self.features.iter().map(FeatureDef::width).sum()
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.features.iter().position(|f| f.key == key)
    }

    /// Offset of each feature's first encoded dimension.
    pub fn offsets(&self) -> Vec<usize> {
        self.features
            .iter()
            .scan(0, |acc, f| {
                let at = *acc;
                *acc += f.width();
                Some(at)
            })
            .collect()
    }

    /// Human-readable name of every encoded dimension.
    pub fn encoded_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(ENCODED_DIM);
        for f in &self.features {
            if f.width() > 1 {
                names.extend(f.levels.iter().map(|l| format!("{}={}", f.key, l.code)));
            } else {
                names.push(f.key.clone());
            }
        }
        names
    }

    /// Encode a record into the model input space. No scaling is applied.
    pub fn encode(&self, record: &StudentRecord) -> Result<FeatureVector, DatasetError> {
        self.check(record)?;
        let mut components = Vec::with_capacity(ENCODED_DIM);
        for (f, &v) in self.features.iter().zip(&record.values) {
            if f.width() > 1 {
                components.extend((0..f.levels.len() as i32).map(|i| f64::from(u8::from(i == v))));
            } else {
                components.push(f64::from(v));
            }
        }
        Ok(FeatureVector {
            components,
            source_id: record.id.clone(),
        })
    }

    /// Inverse of [`encode`](Self::encode) for well-formed vectors.
    pub fn decode(&self, vector: &FeatureVector) -> Result<Vec<i32>, DatasetError> {
        let mismatch = |reason: String| DatasetError::SchemaMismatch {
            id: vector.source_id.clone(),
            reason,
        };
        if vector.components.len() != ENCODED_DIM {
            return Err(mismatch(format!("length {}", vector.components.len())));
        }
        let mut values = Vec::with_capacity(N_FEATURES);
        let mut at = 0;
        for f in &self.features {
            let w = f.width();
            let block = &vector.components[at..at + w];
            let v = if w > 1 {
                let hot: Vec<usize> = (0..w).filter(|&i| block[i] == 1.0).collect();
                if hot.len() != 1 || block.iter().any(|&c| c != 0.0 && c != 1.0) {
                    return Err(mismatch(format!("`{}` block is not one-hot", f.key)));
                }
                hot[0] as i32
            } else {
                block[0] as i32
            };
            if !f.contains(v) {
                return Err(mismatch(format!("`{}` value {v} out of domain", f.key)));
            }
            values.push(v);
            at += w;
        }
        Ok(values)
    }

    fn check(&self, record: &StudentRecord) -> Result<(), DatasetError> {
        let mismatch = |reason: String| DatasetError::SchemaMismatch {
            id: record.id.clone(),
            reason,
        };
        if record.values.len() != self.features.len() {
            return Err(mismatch(format!(
                "{} values for {} features",
                record.values.len(),
                self.features.len()
            )));
        }
        for (f, &v) in self.features.iter().zip(&record.values) {
            if !f.contains(v) {
                return Err(mismatch(format!("`{}` value {v} out of domain", f.key)));
            }
        }
        if record.grade > self.target.max {
            return Err(mismatch(format!(
                "grade {} above {}",
                record.grade, self.target.max
            )));
        }
        Ok(())
    }
}

/// One stimulus. `values[i]` belongs to `schema.features[i]`: a level index
/// for categorical features, the raw integer otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentRecord {
    pub id: String,
    pub values: Vec<i32>,
    pub grade: u8,
}

impl StudentRecord {
    pub fn value(&self, schema: &FeatureSchema, key: &str) -> Option<i32> {
        schema.index_of(key).map(|i| self.values[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub components: Vec<f64>,
    pub source_id: String,
}

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.components
    }
}

/// Which course file of the published dataset is in use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Course {
    #[default]
    Math,
    Portuguese,
}

impl Course {
    pub fn file_name(self) -> &'static str {
        match self {
            Course::Math => "student-mat.csv",
            Course::Portuguese => "student-por.csv",
        }
    }

    pub fn id_prefix(self) -> &'static str {
        match self {
            Course::Math => "mat",
            Course::Portuguese => "por",
        }
    }
}

/// Load a semicolon-separated student file with the published header.
pub fn load_dataset(
    path: impl AsRef<Path>,
    schema: &FeatureSchema,
    course: Course,
) -> Result<Vec<StudentRecord>, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text, schema, course)
}

pub fn parse_dataset(
    text: &str,
    schema: &FeatureSchema,
    course: Course,
) -> Result<Vec<StudentRecord>, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b';')
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.iter().all(|h| h.trim().is_empty()) {
        return Ok(Vec::new());
    }

    let mut feature_col = vec![None; schema.len()];
    let mut target_col = None;
    for (col, name) in header.iter().enumerate() {
        let name = name.trim();
        if let Some(i) = schema.index_of(name) {
            feature_col[i] = Some(col);
        } else if name == schema.target.key {
            target_col = Some(col);
        } else if !schema.excluded_columns.iter().any(|c| c == name) {
            return Err(DatasetError::UnknownColumn(name.to_string()));
        }
    }
    let feature_col: Vec<usize> = feature_col
        .into_iter()
        .zip(&schema.features)
        .map(|(c, f)| c.ok_or_else(|| DatasetError::MissingColumn(f.key.clone())))
        .collect::<Result<_, _>>()?;
    let target_col =
        target_col.ok_or_else(|| DatasetError::MissingColumn(schema.target.key.clone()))?;

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let row_no = i + 1;
        let cell = |col: usize| row.get(col).unwrap_or("").trim();
        let mut values = Vec::with_capacity(schema.len());
        for (f, &col) in schema.features.iter().zip(&feature_col) {
            let raw = cell(col);
            let v = f.parse(raw).ok_or_else(|| DatasetError::InvalidValue {
                row: row_no,
                column: f.key.clone(),
                value: raw.to_string(),
            })?;
            values.push(v);
        }
        let raw = cell(target_col);
        let grade = raw
            .parse::<u8>()
            .ok()
            .filter(|g| (schema.target.min..=schema.target.max).contains(g))
            .ok_or_else(|| DatasetError::InvalidValue {
                row: row_no,
                column: schema.target.key.clone(),
                value: raw.to_string(),
            })?;
        records.push(StudentRecord {
            id: format!("{}-{row_no:03}", course.id_prefix()),
            values,
            grade,
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub seed: u64,
    pub test_fraction: f64,
    pub n_train_trials: usize,
    pub n_test_trials: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            test_fraction: 0.2,
            n_train_trials: 30,
            n_test_trials: 31,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Split {
    pub model_train: Vec<StudentRecord>,
    pub model_test: Vec<StudentRecord>,
    /// Feedback-phase stimuli, drawn from `model_test`.
    pub training_stimuli: Vec<StudentRecord>,
    /// Practice stimulus first, then the scored testing stimuli.
    pub testing_stimuli: Vec<StudentRecord>,
}

/// Hold out a model test set and draw the protocol stimuli from it, so every
/// AI prediction a participant sees is out-of-sample.
pub fn split_and_select(
    records: &[StudentRecord],
    cfg: &SplitConfig,
) -> Result<Split, DatasetError> {
    let needed_stimuli = cfg.n_train_trials + cfg.n_test_trials;
    let n_test = ((records.len() as f64) * cfg.test_fraction).ceil() as usize;
    let n_test = n_test.max(needed_stimuli);
    if records.len() < n_test + 1 {
        return Err(DatasetError::InsufficientRecords {
            needed: n_test + 1,
            got: records.len(),
        });
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut seeded(cfg.seed, 0));
    let (test_idx, train_idx) = order.split_at(n_test);

    let mut stimuli_idx = test_idx.to_vec();
    stimuli_idx.shuffle(&mut seeded(cfg.seed, 1));
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok(Split {
        model_train: pick(train_idx),
        model_test: pick(test_idx),
        training_stimuli: pick(&stimuli_idx[..cfg.n_train_trials]),
        testing_stimuli: pick(&stimuli_idx[cfg.n_train_trials..needed_stimuli]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(schema: &FeatureSchema) -> String {
        let mut cols: Vec<&str> = schema.features.iter().map(|f| f.key.as_str()).collect();
        cols.extend(["G1", "G2", "G3"]);
        cols.join(";")
    }

    fn row(schema: &FeatureSchema, record: &StudentRecord, g3: &str) -> String {
        let mut cells: Vec<String> = schema
            .features
            .iter()
            .zip(&record.values)
            .map(|(f, &v)| format!("\"{}\"", f.code(v)))
            .collect();
        cells.extend(["10".into(), "10".into(), g3.into()]);
        cells.join(";")
    }

    fn sample() -> StudentRecord {
        synthetic_students(1, 3).remove(0)
    }

    #[test]
    fn schema_has_published_shape() {
        let s = FeatureSchema::student();
        assert_eq!(s.len(), 30);
        assert_eq!(s.encoded_dim(), 43);
        let multi: Vec<(&str, usize)> = s
            .features
            .iter()
            .filter(|f| f.width() > 1)
            .map(|f| (f.key.as_str(), f.width()))
            .collect();
        assert_eq!(
            multi,
            vec![("guardian", 3), ("Mjob", 5), ("Fjob", 5), ("reason", 4)]
        );
        // 30 features, 4 of them widened to 3+5+5+4 dims.
        assert_eq!(30 - 4 + (3 + 5 + 5 + 4), 43);
        let per_cat: Vec<usize> = Category::ALL
            .iter()
            .map(|c| s.features.iter().filter(|f| f.category == *c).count())
            .collect();
        assert_eq!(per_cat, vec![9, 10, 11]);
        assert_eq!(
            s.features[s.index_of("absences").unwrap()].range,
            Some(IntRange { min: 0, max: 93 })
        );
        assert_eq!(
            s.features[s.index_of("age").unwrap()].range,
            Some(IntRange { min: 15, max: 22 })
        );
    }

    #[test]
    fn guardian_mother_one_hot() {
        let s = FeatureSchema::student();
        let mut r = sample();
        let g = s.index_of("guardian").unwrap();
        r.values[g] = 0;
        let v = s.encode(&r).unwrap();
        assert_eq!(v.components.len(), 43);
        let off = s.offsets()[g];
        assert_eq!(&v.components[off..off + 3], &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn encode_rejects_out_of_domain() {
        let s = FeatureSchema::student();
        let mut r = sample();
        r.values[s.index_of("absences").unwrap()] = 94;
        assert!(matches!(
            s.encode(&r),
            Err(DatasetError::SchemaMismatch { .. })
        ));
        let mut short = sample();
        short.values.pop();
        assert!(s.encode(&short).is_err());
    }

    #[test]
    fn header_only_file_is_empty() {
        let s = FeatureSchema::student();
        let text = format!("{}\n", header(&s));
        assert!(parse_dataset(&text, &s, Course::Math).unwrap().is_empty());
    }

    #[test]
    fn loader_reads_rows_and_drops_early_grades() {
        let s = FeatureSchema::student();
        let r = sample();
        let text = format!(
            "{}\n{}\n{}\n",
            header(&s),
            row(&s, &r, "12"),
            row(&s, &r, "0")
        );
        let recs = parse_dataset(&text, &s, Course::Math).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].values, r.values);
        assert_eq!(recs[0].grade, 12);
        assert_eq!(recs[1].grade, 0);
        assert_eq!(recs[0].id, "mat-001");
    }

    #[test]
    fn grade_out_of_range_names_row() {
        let s = FeatureSchema::student();
        let r = sample();
        let text = format!(
            "{}\n{}\n{}\n",
            header(&s),
            row(&s, &r, "12"),
            row(&s, &r, "25")
        );
        match parse_dataset(&text, &s, Course::Math) {
            Err(DatasetError::InvalidValue { row, column, value }) => {
                assert_eq!((row, column.as_str(), value.as_str()), (2, "G3", "25"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_level_and_column_rejected() {
        let s = FeatureSchema::student();
        let r = sample();
        let bad = row(&s, &r, "9")
            .replacen("\"GP\"", "\"XX\"", 1)
            .replacen("\"MS\"", "\"XX\"", 1);
        let text = format!("{}\n{}\n", header(&s), bad);
        assert!(matches!(
            parse_dataset(&text, &s, Course::Math),
            Err(DatasetError::InvalidValue { ref column, .. }) if column == "school"
        ));
        let text = format!("{};extra\n", header(&s));
        assert!(
            matches!(parse_dataset(&text, &s, Course::Math), Err(DatasetError::UnknownColumn(c)) if c == "extra")
        );
    }

    #[test]
    fn missing_file_is_io_error() {
        let s = FeatureSchema::student();
        assert!(matches!(
            load_dataset("/nonexistent/student-mat.csv", &s, Course::Math),
            Err(DatasetError::Io { .. })
        ));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let recs = synthetic_students(395, 11);
        let cfg = SplitConfig {
            seed: 7,
            ..Default::default()
        };
        let a = split_and_select(&recs, &cfg).unwrap();
        let b = split_and_select(&recs, &cfg).unwrap();
        assert_eq!(a.testing_stimuli, b.testing_stimuli);
        assert_eq!(a.training_stimuli, b.training_stimuli);
        assert_eq!(a.testing_stimuli.len(), 31);
        assert_eq!(a.training_stimuli.len(), 30);
        let train: HashSet<_> = a.training_stimuli.iter().map(|r| &r.id).collect();
        assert!(a.testing_stimuli.iter().all(|r| !train.contains(&r.id)));
        let fit: HashSet<_> = a.model_train.iter().map(|r| &r.id).collect();
        assert!(a.model_test.iter().all(|r| !fit.contains(&r.id)));
        assert!(a.testing_stimuli.iter().all(|r| !fit.contains(&r.id)));
        assert_eq!(a.model_train.len() + a.model_test.len(), 395);
    }

    #[test]
    fn split_needs_enough_records() {
        let recs = synthetic_students(50, 1);
        assert!(matches!(
            split_and_select(&recs, &SplitConfig::default()),
            Err(DatasetError::InsufficientRecords { .. })
        ));
    }
}
