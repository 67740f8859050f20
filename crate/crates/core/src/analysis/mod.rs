//! Errors, shifts and the statistical comparisons between branches,
//! computed from completed sessions.
//!
//! Means are two-stage: average within a stimulus across subjects, then
//! across stimuli. Paired comparisons pair conditions by stimulus.

pub mod stats;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predictor::AiQuality;
use crate::protocol::{Branch, ExplanationQuality, Session, N_TRAINING};
use crate::rng::seeded;
pub use stats::{
    bonferroni, mann_whitney_u, paired_t, pearson_r, stars, MannWhitney, MwuMethod, PairedT,
    Pearson, StatsError, TestResult,
};

pub const REPORT_FORMAT: &str = "trustshift-analysis";
pub const JITTER_SD: f64 = 0.3;
pub const LEARNING_BLOCKS: [usize; 3] = [5, 10, 15];

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no completed sessions")]
    Empty,
    #[error("branch {0} has no completed sessions")]
    MissingBranch(String),
    #[error("session {session} has {got} training trials, need {need}")]
    InsufficientTrials {
        session: String,
        got: usize,
        need: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("writing {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// One scored testing trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub session_id: String,
    pub branch: String,
    pub ai_quality: AiQuality,
    pub test_explanation: ExplanationQuality,
    pub train_explanation_shown: bool,
    pub synthetic: bool,
    pub stimulus_id: String,
    pub trial: usize,
    pub truth: f64,
    pub first_prediction: f64,
    pub ai_prediction: f64,
    pub second_prediction: f64,
    pub first_abs_error: f64,
    pub second_abs_error: f64,
    pub abs_shift: f64,
    pub signed_shift: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    FirstAbsError,
    SecondAbsError,
    AbsShift,
    SignedShift,
}

impl Metric {
    pub fn of(self, r: &TrialRow) -> f64 {
        match self {
            Metric::FirstAbsError => r.first_abs_error,
            Metric::SecondAbsError => r.second_abs_error,
            Metric::AbsShift => r.abs_shift,
            Metric::SignedShift => r.signed_shift,
        }
    }
}

fn branch_of(r: &TrialRow) -> (AiQuality, ExplanationQuality) {
    (r.ai_quality, r.test_explanation)
}

/// Non-practice, fully answered testing trials of complete sessions.
pub fn trial_rows(sessions: &[Session]) -> Vec<TrialRow> {
    let mut rows = Vec::new();
    for s in sessions.iter().filter(|s| s.is_complete()) {
        for t in s.testing_trials.iter().filter(|t| !t.is_practice) {
            let Some(second) = t.second_prediction else {
                continue;
            };
            rows.push(TrialRow {
                session_id: s.session_id.clone(),
                branch: s.branch.to_string(),
                ai_quality: s.branch.ai_quality,
                test_explanation: s.branch.test_explanation,
                train_explanation_shown: s.branch.train_explanation_shown(),
                synthetic: s.synthetic,
                stimulus_id: t.stimulus_id.clone(),
                trial: t.trial,
                truth: t.truth,
                first_prediction: t.first_prediction,
                ai_prediction: t.ai_prediction,
                second_prediction: second,
                first_abs_error: (t.first_prediction - t.truth).abs(),
                second_abs_error: (second - t.truth).abs(),
                abs_shift: (second - t.first_prediction).abs(),
                signed_shift: second - t.first_prediction,
            });
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrandMean {
    pub per_stimulus: BTreeMap<String, f64>,
    pub grand_mean: f64,
    /// Standard error across stimulus means.
    pub sem: f64,
    pub n_subjects: usize,
}

pub fn per_stimulus_grand_mean(
    rows: &[TrialRow],
    metric: Metric,
    keep: impl Fn(&TrialRow) -> bool,
) -> GrandMean {
    let mut cells: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    let mut subjects = BTreeSet::new();
    for r in rows.iter().filter(|r| keep(r)) {
        let c = cells.entry(&r.stimulus_id).or_default();
        c.0 += metric.of(r);
        c.1 += 1;
        subjects.insert(r.session_id.as_str());
    }
    let per_stimulus: BTreeMap<String, f64> = cells
        .into_iter()
        .map(|(k, (s, n))| (k.to_string(), s / n as f64))
        .collect();
    let means: Vec<f64> = per_stimulus.values().copied().collect();
    GrandMean {
        grand_mean: if means.is_empty() {
            f64::NAN
        } else {
            stats::mean(&means)
        },
        sem: stats::sem(&means),
        per_stimulus,
        n_subjects: subjects.len(),
    }
}

/// Stimulus means present in both, in stimulus order.
fn paired(a: &GrandMean, b: &GrandMean) -> (Vec<f64>, Vec<f64>) {
    a.per_stimulus
        .iter()
        .filter_map(|(k, &x)| b.per_stimulus.get(k).map(|&y| (x, y)))
        .unzip()
}

fn paired_test(
    comparison: &str,
    a: &GrandMean,
    b: &GrandMean,
    warnings: &mut Vec<String>,
) -> TestResult {
    let (x, y) = paired(a, b);
    match paired_t(&x, &y) {
        Ok(r) => TestResult::new("paired_t", comparison, r.t, Some(r.df), r.p, x.len()),
        Err(e) => {
            warnings.push(format!("{comparison}: {e}"));
            TestResult::not_computed("paired_t", comparison, x.len(), &e.to_string())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionStat {
    pub position: usize,
    pub mean_abs_error: f64,
    pub sem: f64,
    pub n: usize,
}

/// Mean absolute training error at each trial position across sessions.
pub fn training_curve(sessions: &[Session]) -> Vec<PositionStat> {
    let mut by_pos: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for s in sessions {
        for t in &s.training_trials {
            by_pos
                .entry(t.trial)
                .or_default()
                .push((t.human_prediction - t.truth).abs());
        }
    }
    by_pos
        .into_iter()
        .map(|(position, v)| PositionStat {
            position,
            mean_abs_error: stats::mean(&v),
            sem: stats::sem(&v),
            n: v.len(),
        })
        .collect()
}

/// First vs last block of per-position mean training error for each block
/// size, two-sided rank test, Bonferroni over the block sizes.
pub fn learning_effect_check(
    sessions: &[Session],
    blocks: &[usize],
) -> Result<Vec<TestResult>, AnalysisError> {
    if sessions.is_empty() {
        return Err(AnalysisError::Empty);
    }
    for s in sessions {
        if s.training_trials.len() < N_TRAINING {
            return Err(AnalysisError::InsufficientTrials {
                session: s.session_id.clone(),
                got: s.training_trials.len(),
                need: N_TRAINING,
            });
        }
    }
    let curve: Vec<f64> = training_curve(sessions)
        .iter()
        .map(|p| p.mean_abs_error)
        .collect();
    blocks
        .iter()
        .map(|&b| {
            if 2 * b > curve.len() {
                return Err(AnalysisError::InsufficientTrials {
                    session: "*".into(),
                    got: curve.len(),
                    need: 2 * b,
                });
            }
            let r = mann_whitney_u(&curve[..b], &curve[curve.len() - b..], MwuMethod::Auto)?;
            let method = if r.exact {
                "exact"
            } else {
                "normal approximation"
            };
            let mut t = TestResult::new(
                "mann_whitney_u",
                &format!("block {b}: first vs last"),
                r.u1,
                None,
                r.p,
                2 * b,
            )
            .in_family("learning", blocks.len());
            t.note = Some(method.into());
            Ok(t)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesBar {
    pub group: String,
    pub label: String,
    pub mean: f64,
    pub sem: f64,
    pub n_stimuli: usize,
    pub n_subjects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub name: String,
    pub m: usize,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strictness {
    /// Compute what can be computed; record problems as warnings.
    Lenient,
    /// Every branch must be populated.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub format: String,
    pub version: u32,
    pub n_sessions: usize,
    pub n_trials: usize,
    pub sessions_per_branch: BTreeMap<String, usize>,
    pub families: Vec<Family>,
    pub tests: Vec<TestResult>,
    pub series: Vec<SeriesBar>,
    pub learning_curve: Vec<PositionStat>,
    /// Display-only jitter for the shift-vs-error scatter.
    pub jitter_sd: f64,
    pub warnings: Vec<String>,
}

impl AnalysisReport {
    pub fn test(&self, family: &str, comparison: &str) -> Option<&TestResult> {
        self.tests
            .iter()
            .find(|t| t.family == family && t.comparison == comparison)
    }

    pub fn bar(&self, group: &str, label: &str) -> Option<&SeriesBar> {
        self.series
            .iter()
            .find(|b| b.group == group && b.label == label)
    }
}

fn x_label(x: ExplanationQuality) -> &'static str {
    match x {
        ExplanationQuality::Good => "GoodX",
        ExplanationQuality::Poor => "PoorX",
        ExplanationQuality::None => "NoX",
    }
}

fn ai_label(q: AiQuality) -> &'static str {
    match q {
        AiQuality::Good => "GoodAI",
        AiQuality::Poor => "PoorAI",
    }
}

pub fn branch_report(
    sessions: &[Session],
    strictness: Strictness,
) -> Result<AnalysisReport, AnalysisError> {
    let complete: Vec<Session> = sessions
        .iter()
        .filter(|s| s.is_complete())
        .cloned()
        .collect();
    let mut warnings = Vec::new();
    let mut per_branch: BTreeMap<String, usize> =
        Branch::all().iter().map(|b| (b.to_string(), 0)).collect();
    for s in &complete {
        *per_branch.entry(s.branch.to_string()).or_default() += 1;
    }
    for (b, &n) in &per_branch {
        if n == 0 {
            if strictness == Strictness::Strict {
                return Err(AnalysisError::MissingBranch(b.clone()));
            }
            warnings.push(format!("branch {b} has no completed sessions"));
        }
    }
    if complete.is_empty() && strictness == Strictness::Strict {
        return Err(AnalysisError::Empty);
    }
    let rows = trial_rows(&complete);
    let mut tests = Vec::new();
    let mut series = Vec::new();
    let mut families = Vec::new();
    let mut bar = |group: &str, label: &str, g: &GrandMean| {
        series.push(SeriesBar {
            group: group.into(),
            label: label.into(),
            mean: g.grand_mean,
            sem: g.sem,
            n_stimuli: g.per_stimulus.len(),
            n_subjects: g.n_subjects,
        })
    };

    families.push(Family {
        name: "error_first_vs_second".into(),
        m: 2,
        description: "first vs second response error within each AI quality".into(),
    });
    for q in AiQuality::ALL {
        let first = per_stimulus_grand_mean(&rows, Metric::FirstAbsError, |r| r.ai_quality == q);
        let second = per_stimulus_grand_mean(&rows, Metric::SecondAbsError, |r| r.ai_quality == q);
        bar("error_by_ai", &format!("{}/first", ai_label(q)), &first);
        bar("error_by_ai", &format!("{}/second", ai_label(q)), &second);
        let cmp = format!("{}: first vs second", ai_label(q));
        tests.push(
            paired_test(&cmp, &first, &second, &mut warnings).in_family("error_first_vs_second", 2),
        );
    }

    let pairs = [
        (ExplanationQuality::Good, ExplanationQuality::Poor),
        (ExplanationQuality::Good, ExplanationQuality::None),
        (ExplanationQuality::Poor, ExplanationQuality::None),
    ];
    for (metric, stem, what) in [
        (
            Metric::SecondAbsError,
            "second_error_by_explanation",
            "second response error",
        ),
        (Metric::AbsShift, "shift_by_explanation", "absolute shift"),
    ] {
        for q in AiQuality::ALL {
            let family = format!("{stem}/{}", ai_label(q));
            families.push(Family {
                name: family.clone(),
                m: pairs.len(),
                description: format!(
                    "{what} between test explanation conditions, {} branches",
                    ai_label(q)
                ),
            });
            let means: BTreeMap<ExplanationQuality, GrandMean> = ExplanationQuality::ALL
                .iter()
                .map(|&x| {
                    (
                        x,
                        per_stimulus_grand_mean(&rows, metric, |r| branch_of(r) == (q, x)),
                    )
                })
                .collect();
            for x in ExplanationQuality::ALL {
                bar(stem, &format!("{}/{}", ai_label(q), x_label(x)), &means[&x]);
            }
            for (a, b) in pairs {
                let cmp = format!("{} vs {}", x_label(a), x_label(b));
                tests.push(
                    paired_test(&cmp, &means[&a], &means[&b], &mut warnings)
                        .in_family(&family, pairs.len()),
                );
            }
        }
    }

    families.push(Family {
        name: "shift_by_ai".into(),
        m: 1,
        description: "absolute shift, Good AI vs Poor AI branches".into(),
    });
    let good =
        per_stimulus_grand_mean(&rows, Metric::AbsShift, |r| r.ai_quality == AiQuality::Good);
    let poor =
        per_stimulus_grand_mean(&rows, Metric::AbsShift, |r| r.ai_quality == AiQuality::Poor);
    bar("shift_by_ai", "GoodAI", &good);
    bar("shift_by_ai", "PoorAI", &poor);
    tests.push(
        paired_test("GoodAI vs PoorAI", &good, &poor, &mut warnings).in_family("shift_by_ai", 1),
    );

    families.push(Family {
        name: "shift_vs_first_error".into(),
        m: 1,
        description: "trial-level correlation of absolute first-response error with absolute shift"
            .into(),
    });
    let xs: Vec<f64> = rows.iter().map(|r| r.first_abs_error).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.abs_shift).collect();
    let corr = match pearson_r(&xs, &ys) {
        Ok(p) => TestResult::new(
            "pearson_r",
            "|first error| vs |shift|",
            p.r,
            Some((xs.len().max(2) - 2) as f64),
            p.p,
            xs.len(),
        ),
        Err(e) => {
            warnings.push(format!("shift vs first error: {e}"));
            TestResult::not_computed(
                "pearson_r",
                "|first error| vs |shift|",
                xs.len(),
                &e.to_string(),
            )
        }
    };
    tests.push(corr.in_family("shift_vs_first_error", 1));

    families.push(Family {
        name: "learning".into(),
        m: LEARNING_BLOCKS.len(),
        description: "first vs last block of per-position mean training error".into(),
    });
    match learning_effect_check(&complete, &LEARNING_BLOCKS) {
        Ok(t) => tests.extend(t),
        Err(e) => {
            warnings.push(format!("learning check: {e}"));
            for b in LEARNING_BLOCKS {
                tests.push(
                    TestResult::not_computed(
                        "mann_whitney_u",
                        &format!("block {b}: first vs last"),
                        0,
                        &e.to_string(),
                    )
                    .in_family("learning", LEARNING_BLOCKS.len()),
                );
            }
        }
    }

    Ok(AnalysisReport {
        format: REPORT_FORMAT.into(),
        version: 1,
        n_sessions: complete.len(),
        n_trials: rows.len(),
        sessions_per_branch: per_branch,
        families,
        tests,
        series,
        learning_curve: training_curve(&complete),
        jitter_sd: JITTER_SD,
        warnings,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, AnalysisError> {
    csv::Writer::from_path(path).map_err(|source| AnalysisError::Csv {
        path: path.display().to_string(),
        source,
    })
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), AnalysisError> {
    let mut w = csv_writer(path)?;
    let err = |source| AnalysisError::Csv {
        path: path.display().to_string(),
        source,
    };
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Serialize)]
struct TestRow<'a> {
    family: &'a str,
    m: usize,
    comparison: &'a str,
    test_name: &'a str,
    statistic: Option<f64>,
    df: Option<f64>,
    n: usize,
    raw_p: f64,
    adjusted_p: f64,
    stars: &'a str,
    note: Option<&'a str>,
}

#[derive(Serialize)]
struct ScatterPoint {
    session_id: String,
    stimulus_id: String,
    first_abs_error: f64,
    abs_shift: f64,
    first_abs_error_jittered: f64,
    abs_shift_jittered: f64,
}

/// Write report.json plus tables for plotting. Byte-identical for identical
/// input.
pub fn write_outputs(
    report: &AnalysisReport,
    sessions: &[Session],
    out_dir: &Path,
) -> Result<(), AnalysisError> {
    fs::create_dir_all(out_dir).map_err(|source| AnalysisError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let json_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(report).expect("report serialises");
    crate::fsutil::write_atomic(&json_path, json.as_bytes()).map_err(|source| {
        AnalysisError::Io {
            path: json_path.display().to_string(),
            source,
        }
    })?;
    let tests: Vec<TestRow> = report
        .tests
        .iter()
        .map(|t| TestRow {
            family: &t.family,
            m: t.m,
            comparison: &t.comparison,
            test_name: &t.test_name,
            statistic: t.statistic,
            df: t.df,
            n: t.n,
            raw_p: t.raw_p,
            adjusted_p: t.adjusted_p,
            stars: &t.stars,
            note: t.note.as_deref(),
        })
        .collect();
    write_rows(&out_dir.join("tests.csv"), &tests)?;
    write_rows(&out_dir.join("series.csv"), &report.series)?;
    write_rows(&out_dir.join("learning_curve.csv"), &report.learning_curve)?;
    let complete: Vec<Session> = sessions
        .iter()
        .filter(|s| s.is_complete())
        .cloned()
        .collect();
    let rows = trial_rows(&complete);
    write_rows(&out_dir.join("trials.csv"), &rows)?;

    let noise = Normal::new(0.0, JITTER_SD).expect("jitter sd");
    let mut rng = seeded(0x5CA7, 0);
    let scatter: Vec<ScatterPoint> = rows
        .iter()
        .map(|r| ScatterPoint {
            session_id: r.session_id.clone(),
            stimulus_id: r.stimulus_id.clone(),
            first_abs_error: r.first_abs_error,
            abs_shift: r.abs_shift,
            first_abs_error_jittered: r.first_abs_error + noise.sample(&mut rng),
            abs_shift_jittered: r.abs_shift + noise.sample(&mut rng),
        })
        .collect();
    write_rows(&out_dir.join("scatter.csv"), &scatter)
}
