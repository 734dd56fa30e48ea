//! Transition classification, accuracy summaries, and sweep tables.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::GoldAnswer;
use crate::extract::AnswerKind;
use crate::pipeline::{run_all, RunConfig, RunRecord};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("answers are not comparable: {0}")]
    IncomparableAnswers(String),
    #[error("no classifiable records to summarize")]
    EmptyRun,
    #[error("sweep configs vary off the declared axis: {0}")]
    AxisMismatch(String),
    #[error("sweep point {label} failed: {message}")]
    SweepRun { label: String, message: String },
    #[error("csv write failed: {0}")]
    Csv(String),
}

/// Before/after correctness taxonomy for one question.
#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransitionLabel {
    #[serde(rename = "c2c")]
    C2C,
    #[serde(rename = "c2i")]
    C2I,
    #[serde(rename = "i2c")]
    I2C,
    #[serde(rename = "i2i_c")]
    I2I_C,
    #[serde(rename = "i2i_nc")]
    I2I_NC,
}

impl TransitionLabel {
    pub fn all() -> [TransitionLabel; 5] {
        [Self::C2C, Self::C2I, Self::I2C, Self::I2I_C, Self::I2I_NC]
    }
}

impl std::fmt::Display for TransitionLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::C2C => "C2C",
            Self::C2I => "C2I",
            Self::I2C => "I2C",
            Self::I2I_C => "I2I-C",
            Self::I2I_NC => "I2I-NC",
        })
    }
}

fn matches_gold(gold: &GoldAnswer, answer: &AnswerKind) -> Result<bool, AnalysisError> {
    match (gold, answer) {
        (GoldAnswer::Letter(g), AnswerKind::Letter(a)) => Ok(g.eq_ignore_ascii_case(a)),
        (GoldAnswer::Numeric(g), AnswerKind::Numeric(a)) => Ok(g == a),
        (_, AnswerKind::None) => Err(AnalysisError::IncomparableAnswers(
            "answer is missing".to_string(),
        )),
        (g, a) => Err(AnalysisError::IncomparableAnswers(format!(
            "gold {g:?} and answer {a:?} differ in kind"
        ))),
    }
}

fn answers_equal(a: &AnswerKind, b: &AnswerKind) -> bool {
    match (a, b) {
        (AnswerKind::Letter(x), AnswerKind::Letter(y)) => x.eq_ignore_ascii_case(y),
        _ => a == b,
    }
}

/// Labels a completed record by before/after correctness against gold.
pub fn classify(
    gold: &GoldAnswer,
    a_initial: &AnswerKind,
    a_final: &AnswerKind,
) -> Result<TransitionLabel, AnalysisError> {
    let before = matches_gold(gold, a_initial)?;
    let after = matches_gold(gold, a_final)?;
    Ok(match (before, after) {
        (true, true) => TransitionLabel::C2C,
        (true, false) => TransitionLabel::C2I,
        (false, true) => TransitionLabel::I2C,
        (false, false) => {
            if answers_equal(a_initial, a_final) {
                TransitionLabel::I2I_NC
            } else {
                TransitionLabel::I2I_C
            }
        }
    })
}

/// Per-label record counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionCounts {
    pub c2c: u64,
    pub c2i: u64,
    pub i2c: u64,
    pub i2i_c: u64,
    pub i2i_nc: u64,
}

impl TransitionCounts {
    pub fn new(c2c: u64, c2i: u64, i2c: u64, i2i_c: u64, i2i_nc: u64) -> Self {
        Self { c2c, c2i, i2c, i2i_c, i2i_nc }
    }

    pub fn add(&mut self, label: TransitionLabel) {
        match label {
            TransitionLabel::C2C => self.c2c += 1,
            TransitionLabel::C2I => self.c2i += 1,
            TransitionLabel::I2C => self.i2c += 1,
            TransitionLabel::I2I_C => self.i2i_c += 1,
            TransitionLabel::I2I_NC => self.i2i_nc += 1,
        }
    }

    pub fn get(&self, label: TransitionLabel) -> u64 {
        match label {
            TransitionLabel::C2C => self.c2c,
            TransitionLabel::C2I => self.c2i,
            TransitionLabel::I2C => self.i2c,
            TransitionLabel::I2I_C => self.i2i_c,
            TransitionLabel::I2I_NC => self.i2i_nc,
        }
    }

    pub fn total(&self) -> u64 {
        self.c2c + self.c2i + self.i2c + self.i2i_c + self.i2i_nc
    }
}

/// Percentage of `count / n`, rounded half-up to two decimals.
pub fn percent_round2(count: u64, n: u64) -> f64 {
    assert!(n > 0, "percentages need a non-zero denominator");
    let basis_points = (20_000u128 * count as u128 + n as u128) / (2 * n as u128);
    basis_points as f64 / 100.0
}

/// Signed percentage of `diff / n`, ties rounded away from zero.
pub fn signed_percent_round2(diff: i64, n: u64) -> f64 {
    let magnitude = percent_round2(diff.unsigned_abs(), n);
    if diff < 0 {
        -magnitude
    } else {
        magnitude
    }
}

/// Aggregate accuracies for one run. `acc_before`, `acc_after`, and
/// `delta_sc` hold the exact ratios; the `*_round2` accessors give the
/// two-decimal presentation used in every emitted table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n: u64,
    pub counts: TransitionCounts,
    pub error_count: u64,
    pub acc_before: f64,
    pub acc_after: f64,
    pub delta_sc: f64,
}

impl RunSummary {
    pub fn from_counts(counts: TransitionCounts, error_count: u64) -> Result<Self, AnalysisError> {
        let n = counts.total();
        if n == 0 {
            return Err(AnalysisError::EmptyRun);
        }
        let nf = n as f64;
        Ok(Self {
            n,
            counts,
            error_count,
            acc_before: 100.0 * (counts.c2c + counts.c2i) as f64 / nf,
            acc_after: 100.0 * (counts.c2c + counts.i2c) as f64 / nf,
            delta_sc: 100.0 * (counts.i2c as f64 - counts.c2i as f64) / nf,
        })
    }

    pub fn acc_before_round2(&self) -> f64 {
        percent_round2(self.counts.c2c + self.counts.c2i, self.n)
    }

    pub fn acc_after_round2(&self) -> f64 {
        percent_round2(self.counts.c2c + self.counts.i2c, self.n)
    }

    pub fn delta_sc_round2(&self) -> f64 {
        signed_percent_round2(self.counts.i2c as i64 - self.counts.c2i as i64, self.n)
    }
}

/// Counts transitions over a run's records. Records without a transition
/// (backend failures, extraction misses) are excluded from `n` and tallied
/// in `error_count`.
pub fn summarize(records: &[RunRecord]) -> Result<RunSummary, AnalysisError> {
    if records.is_empty() {
        return Err(AnalysisError::EmptyRun);
    }
    let mut counts = TransitionCounts::default();
    let mut error_count = 0;
    for record in records {
        match record.transition {
            Some(label) => counts.add(label),
            None => error_count += 1,
        }
    }
    let mut summary = RunSummary::from_counts(counts, 0)?;
    summary.error_count = error_count;
    Ok(summary)
}

/// The one configuration field a sweep is allowed to vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Temperature,
    PromptSet,
    Case,
}

impl SweepAxis {
    fn config_key(self) -> &'static str {
        match self {
            SweepAxis::Temperature => "temps",
            SweepAxis::PromptSet => "set",
            SweepAxis::Case => "case",
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::Temperature => "temperature",
            SweepAxis::PromptSet => "prompt_set",
            SweepAxis::Case => "case",
        })
    }
}

/// One executed sweep point.
#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub label: String,
    pub summary: RunSummary,
}

/// Sweep results in input order.
#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

fn axis_label(axis: SweepAxis, config: &RunConfig) -> String {
    match axis {
        SweepAxis::Temperature => {
            let t = config.temps;
            if t.t1 == t.t2 && t.t2 == t.t3 {
                format!("{}", t.t1)
            } else {
                format!("{}/{}/{}", t.t1, t.t2, t.t3)
            }
        }
        SweepAxis::PromptSet => config.set.to_string(),
        SweepAxis::Case => format!("case{}", config.case.number()),
    }
}

/// Checks that `configs` agree everywhere except the declared axis and
/// returns the per-config axis labels.
pub fn validate_sweep_axis(
    configs: &[RunConfig],
    axis: SweepAxis,
) -> Result<Vec<String>, AnalysisError> {
    if configs.is_empty() {
        return Err(AnalysisError::EmptyRun);
    }
    let mut stripped = Vec::with_capacity(configs.len());
    for config in configs {
        let mut value = serde_json::to_value(config)
            .map_err(|e| AnalysisError::AxisMismatch(e.to_string()))?;
        value
            .as_object_mut()
            .expect("run configs serialize to objects")
            .remove(axis.config_key());
        stripped.push(value);
    }
    for (i, value) in stripped.iter().enumerate().skip(1) {
        if value != &stripped[0] {
            return Err(AnalysisError::AxisMismatch(format!(
                "config {i} differs from config 0 outside the {axis} axis"
            )));
        }
    }
    Ok(configs.iter().map(|c| axis_label(axis, c)).collect())
}

/// Runs every config and aggregates the summaries in input order.
pub fn sweep(configs: &[RunConfig], axis: SweepAxis) -> Result<SweepTable, AnalysisError> {
    let labels = validate_sweep_axis(configs, axis)?;
    let mut points = Vec::with_capacity(configs.len());
    for (config, label) in configs.iter().zip(labels) {
        let output = run_all(config).map_err(|e| AnalysisError::SweepRun {
            label: label.clone(),
            message: e.to_string(),
        })?;
        let summary = summarize(&output.records)?;
        points.push(SweepPoint { label, summary });
    }
    Ok(SweepTable { axis, points })
}

impl SweepTable {
    /// CSV with columns `axis, acc_before, acc_after, delta_sc`.
    pub fn summary_csv(&self) -> Result<String, AnalysisError> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        let write = |e: csv::Error| AnalysisError::Csv(e.to_string());
        writer
            .write_record(["axis", "acc_before", "acc_after", "delta_sc"])
            .map_err(write)?;
        for point in &self.points {
            writer
                .write_record([
                    point.label.clone(),
                    format!("{:.2}", point.summary.acc_before_round2()),
                    format!("{:.2}", point.summary.acc_after_round2()),
                    format!("{:.2}", point.summary.delta_sc_round2()),
                ])
                .map_err(write)?;
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| AnalysisError::Csv(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| AnalysisError::Csv(e.to_string()))
    }

    /// CSV with columns `axis, c2c, c2i, i2c, i2i_c, i2i_nc`.
    pub fn counts_csv(&self) -> Result<String, AnalysisError> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        let write = |e: csv::Error| AnalysisError::Csv(e.to_string());
        writer
            .write_record(["axis", "c2c", "c2i", "i2c", "i2i_c", "i2i_nc"])
            .map_err(write)?;
        for point in &self.points {
            let c = point.summary.counts;
            writer
                .write_record([
                    point.label.clone(),
                    c.c2c.to_string(),
                    c.c2i.to_string(),
                    c.i2c.to_string(),
                    c.i2i_c.to_string(),
                    c.i2i_nc.to_string(),
                ])
                .map_err(write)?;
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| AnalysisError::Csv(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| AnalysisError::Csv(e.to_string()))
    }

    /// Fixed-width text table of the summary columns.
    pub fn text_table(&self) -> String {
        let mut rows = vec![[
            "axis".to_string(),
            "n".to_string(),
            "errors".to_string(),
            "acc_before".to_string(),
            "acc_after".to_string(),
            "delta_sc".to_string(),
        ]];
        for point in &self.points {
            rows.push([
                point.label.clone(),
                point.summary.n.to_string(),
                point.summary.error_count.to_string(),
                format!("{:.2}", point.summary.acc_before_round2()),
                format!("{:.2}", point.summary.acc_after_round2()),
                format!("{:+.2}", point.summary.delta_sc_round2()),
            ]);
        }
        let mut widths = [0usize; 6];
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        for row in &rows {
            let line: Vec<String> = row
                .iter()
                .zip(widths)
                .map(|(cell, w)| format!("{cell:>w$}"))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::CanonicalNumber;

    fn letter(c: char) -> AnswerKind {
        AnswerKind::Letter(c)
    }

    fn num(s: &str) -> AnswerKind {
        AnswerKind::Numeric(CanonicalNumber::parse(s).unwrap())
    }

    #[test]
    fn classify_covers_the_five_labels() {
        let gold = GoldAnswer::Letter('A');
        let case = |i, f| classify(&gold, &letter(i), &letter(f)).unwrap();
        assert_eq!(case('A', 'A'), TransitionLabel::C2C);
        assert_eq!(case('A', 'B'), TransitionLabel::C2I);
        assert_eq!(case('B', 'A'), TransitionLabel::I2C);
        assert_eq!(case('B', 'C'), TransitionLabel::I2I_C);
        assert_eq!(case('B', 'B'), TransitionLabel::I2I_NC);
    }

    #[test]
    fn classify_compares_numbers_canonically() {
        let gold = GoldAnswer::Numeric(CanonicalNumber::parse("75").unwrap());
        assert_eq!(
            classify(&gold, &num("75.00"), &num("0075")).unwrap(),
            TransitionLabel::C2C
        );
        assert_eq!(
            classify(&gold, &num("75"), &num("75.1")).unwrap(),
            TransitionLabel::C2I
        );
    }

    #[test]
    fn classify_is_case_insensitive_for_letters() {
        let gold = GoldAnswer::Letter('A');
        assert_eq!(
            classify(&gold, &letter('a'), &letter('A')).unwrap(),
            TransitionLabel::C2C
        );
    }

    #[test]
    fn missing_or_mismatched_answers_are_incomparable() {
        let gold = GoldAnswer::Letter('A');
        assert!(matches!(
            classify(&gold, &AnswerKind::None, &letter('A')),
            Err(AnalysisError::IncomparableAnswers(_))
        ));
        assert!(matches!(
            classify(&gold, &letter('A'), &AnswerKind::None),
            Err(AnalysisError::IncomparableAnswers(_))
        ));
        assert!(matches!(
            classify(&gold, &num("5"), &letter('A')),
            Err(AnalysisError::IncomparableAnswers(_))
        ));
    }

    #[test]
    fn summary_matches_the_reference_counts() {
        let counts = TransitionCounts::new(916, 11, 12, 17, 265);
        let summary = RunSummary::from_counts(counts, 0).unwrap();
        assert_eq!(summary.n, 1221);
        assert_eq!(summary.acc_before_round2(), 75.92);
        assert_eq!(summary.acc_after_round2(), 76.00);
        assert_eq!(summary.delta_sc_round2(), 0.08);
    }

    #[test]
    fn all_correct_runs_score_one_hundred() {
        let summary =
            RunSummary::from_counts(TransitionCounts::new(37, 0, 0, 0, 0), 0).unwrap();
        assert_eq!(summary.acc_before_round2(), 100.0);
        assert_eq!(summary.acc_after_round2(), 100.0);
        assert_eq!(summary.delta_sc_round2(), 0.0);
    }

    #[test]
    fn symmetric_exchange_has_zero_delta() {
        let summary =
            RunSummary::from_counts(TransitionCounts::new(80, 10, 10, 0, 0), 0).unwrap();
        assert_eq!(summary.delta_sc_round2(), 0.0);
        assert_eq!(summary.delta_sc, 0.0);
    }

    #[test]
    fn delta_equals_the_flow_difference() {
        for (c2c, c2i, i2c, i2i_c, i2i_nc) in
            [(916, 11, 12, 17, 265), (1, 2, 3, 4, 5), (100, 0, 55, 3, 9)]
        {
            let counts = TransitionCounts::new(c2c, c2i, i2c, i2i_c, i2i_nc);
            let s = RunSummary::from_counts(counts, 0).unwrap();
            assert!((s.acc_after - s.acc_before - s.delta_sc).abs() < 1e-9);
            assert_eq!(counts.total(), s.n);
        }
    }

    #[test]
    fn empty_runs_are_rejected() {
        assert!(matches!(summarize(&[]), Err(AnalysisError::EmptyRun)));
        assert!(matches!(
            RunSummary::from_counts(TransitionCounts::default(), 4),
            Err(AnalysisError::EmptyRun)
        ));
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(percent_round2(1, 20_000), 0.01);
        assert_eq!(percent_round2(1, 40_000), 0.0);
        assert_eq!(percent_round2(1, 200), 0.5);
        assert_eq!(percent_round2(1249, 100_000), 1.25);
        assert_eq!(signed_percent_round2(-1, 20_000), -0.01);
        assert_eq!(signed_percent_round2(-1, 40_000), 0.0);
        assert_eq!(signed_percent_round2(1, 1221), 0.08);
    }

    #[test]
    fn transition_labels_serialize_snake_case() {
        let json = serde_json::to_string(&TransitionLabel::I2I_NC).unwrap();
        assert_eq!(json, "\"i2i_nc\"");
        let back: TransitionLabel = serde_json::from_str("\"i2i_c\"").unwrap();
        assert_eq!(back, TransitionLabel::I2I_C);
        assert_eq!(TransitionLabel::I2I_C.to_string(), "I2I-C");
    }

    fn sweep_config(seed: u64, count: usize) -> RunConfig {
        use crate::backend::{BackendConfig, SimParams};
        use crate::pipeline::DatasetSource;
        use crate::prompts::{CaseConfig, PromptSetId};
        RunConfig {
            backend: BackendConfig::Simulated(SimParams { seed, ..SimParams::default() }),
            set: PromptSetId::Set3,
            case: CaseConfig::from_number(1).unwrap(),
            temps: crate::backend::StageTemperatures::uniform(0.0),
            dataset: DatasetSource::Synthetic { count, k: 5, seed },
            frozen_stage1: None,
            parallelism: 4,
            output: None,
            save_transcripts: false,
            system_prompt: None,
            prompts_dir: None,
        }
    }

    #[test]
    fn temperature_sweeps_emit_all_three_table_shapes() {
        let mut cold = sweep_config(5, 150);
        cold.temps = crate::backend::StageTemperatures::uniform(0.0);
        let mut warm = sweep_config(5, 150);
        warm.temps = crate::backend::StageTemperatures::uniform(1.0);
        let table = sweep(&[cold, warm], SweepAxis::Temperature).unwrap();
        assert_eq!(table.points.len(), 2);
        assert_eq!(table.points[0].label, "0");
        assert_eq!(table.points[1].label, "1");

        let summary = table.summary_csv().unwrap();
        let mut lines = summary.lines();
        assert_eq!(lines.next(), Some("axis,acc_before,acc_after,delta_sc"));
        assert_eq!(summary.lines().count(), 3);

        let counts = table.counts_csv().unwrap();
        assert!(counts.starts_with("axis,c2c,c2i,i2c,i2i_c,i2i_nc\n"));
        for (point, line) in table.points.iter().zip(counts.lines().skip(1)) {
            let total: u64 = line
                .split(',')
                .skip(1)
                .map(|v| v.parse::<u64>().unwrap())
                .sum();
            assert_eq!(total, point.summary.n);
        }

        let text = table.text_table();
        assert!(text.contains("acc_before"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn off_axis_variation_is_rejected() {
        let a = sweep_config(5, 20);
        let mut b = sweep_config(5, 20);
        b.temps = crate::backend::StageTemperatures::uniform(0.7);
        let err = validate_sweep_axis(&[a, b], SweepAxis::PromptSet).unwrap_err();
        assert!(matches!(err, AnalysisError::AxisMismatch(_)));
    }

    #[test]
    fn prompt_set_sweep_separates_biased_from_fair() {
        use crate::prompts::PromptSetId;
        let mut biased = sweep_config(9, 1500);
        biased.set = PromptSetId::Set1;
        let mut fair = sweep_config(9, 1500);
        fair.set = PromptSetId::Set3;
        let table = sweep(&[biased, fair], SweepAxis::PromptSet).unwrap();
        assert_eq!(table.points[0].label, "set1");
        assert_eq!(table.points[1].label, "set3");
        assert!(
            table.points[0].summary.delta_sc < table.points[1].summary.delta_sc,
            "biased prompts should lose accuracy relative to fair ones: {} vs {}",
            table.points[0].summary.delta_sc,
            table.points[1].summary.delta_sc
        );
    }
}
