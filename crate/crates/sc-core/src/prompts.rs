//! Prompt registry, rendering, and the bias linter for prompt templates.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::Question;
use crate::extract::sentence_spans;

/// The three shipped prompt-wording sets, ordered from most to least leading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSetId {
    Set1,
    Set2,
    Set3,
}

impl PromptSetId {
    pub fn all() -> [PromptSetId; 3] {
        [PromptSetId::Set1, PromptSetId::Set2, PromptSetId::Set3]
    }

    pub fn number(self) -> u8 {
        match self {
            PromptSetId::Set1 => 1,
            PromptSetId::Set2 => 2,
            PromptSetId::Set3 => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(PromptSetId::Set1),
            2 => Some(PromptSetId::Set2),
            3 => Some(PromptSetId::Set3),
            _ => None,
        }
    }
}

impl fmt::Display for PromptSetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "set{}", self.number())
    }
}

/// Whether the verify stage states its decision before or after its reasoning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    DecisionFirst,
    RationaleFirst,
}

/// One of the four evaluation cases: chain-of-thought on or off, crossed
/// with the verify-stage ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaseConfig {
    pub use_cot: bool,
    pub order: Order,
}

impl CaseConfig {
    pub fn from_number(n: u8) -> Option<Self> {
        let case = match n {
            1 => CaseConfig { use_cot: true, order: Order::DecisionFirst },
            2 => CaseConfig { use_cot: true, order: Order::RationaleFirst },
            3 => CaseConfig { use_cot: false, order: Order::DecisionFirst },
            4 => CaseConfig { use_cot: false, order: Order::RationaleFirst },
            _ => return None,
        };
        Some(case)
    }

    pub fn number(self) -> u8 {
        match (self.use_cot, self.order) {
            (true, Order::DecisionFirst) => 1,
            (true, Order::RationaleFirst) => 2,
            (false, Order::DecisionFirst) => 3,
            (false, Order::RationaleFirst) => 4,
        }
    }

    pub fn all() -> [CaseConfig; 4] {
        [1, 2, 3, 4].map(|n| CaseConfig::from_number(n).unwrap())
    }
}

/// The three chat turns sent for each question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initial,
    Verify,
    Finalize,
}

impl Stage {
    pub fn all() -> [Stage; 3] {
        [Stage::Initial, Stage::Verify, Stage::Finalize]
    }

    /// Stable small integer used for seed derivation.
    pub fn index(self) -> u64 {
        match self {
            Stage::Initial => 1,
            Stage::Verify => 2,
            Stage::Finalize => 3,
        }
    }
}

/// The answer shape a question calls for: a choice letter or a boxed number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerFormat {
    Letter,
    Boxed,
}

/// Bias classification of a prompt text, ordered by severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptClass {
    Fair,
    WeaklyBiased,
    Biased,
}

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("no template registered for {set}, case {case}, {stage:?}, {format:?}")]
    UnknownCombination {
        set: PromptSetId,
        case: u8,
        stage: Stage,
        format: AnswerFormat,
    },
    #[error("template references {{{placeholder}}} but the question provides no value for it")]
    MissingField { placeholder: String },
    #[error("prompt config error: {0}")]
    Config(String),
}

const COT_INITIAL_LETTER: &str = "Q: {question}\nAnswer Choices:{choices}\nExplain your reasoning. You must choose only one option from A to E. Your final answer should be a single letter from A to E, in the form (answer), at the end of your response.";

const NOCOT_INITIAL_LETTER: &str = "Q: {question}\nAnswer Choices:{choices}\nYou must choose only one option from A to E. Your final answer should be a single letter from A to E, in the form (answer), at the end of your response.";

const COT_INITIAL_BOXED: &str = r"Question: Can you solve the following math problem? {question} Explain your reasoning. Your final answer should be a single numerical number, in the form \boxed{answer}, at the end of your response.";

const SET1_VERIFY: &str = "Review your previous answer and find problems with your answer.";

const SET1_FINALIZE_LETTER: &str = "Based on the problems you found, improve your answer. You must choose only one option from A to E. Please reiterate your answer, with your final answer a single letter from A to E, in the form (answer).";

const SET1_FINALIZE_BOXED: &str = r"Based on the problems you found, improve your answer. Please reiterate your answer, with your final answer a single numerical number, in the form \boxed{answer}.";

const SET2_VERIFY: &str = "Do you think the question and answer pair above is correct? The answer has a logical chain. If you think the answer is incorrect, please identify where the logic is wrong in the logical chain.";

const FAIR_VERIFY: &str = "Please verify whether the response above provides the most appropriate answer to the question. Provide your reasoning and justification to your verification.";

const FAIR_VERIFY_RATIONALE_FIRST: &str = "Please verify whether the response above provides the most appropriate answer to the question. First, provide your reasoning and justification to your verification. Then, clearly state the aswer only after your reasoning and justification.";

const FAIR_VERIFY_JUDGMENT: &str = "Please analyze the question and answer above. Provide your reasoning. Then, verify whether the response above provides the most appropriate answer to the question. Clearly state your judgement as yes or no.";

const NEUTRAL_FINALIZE_LETTER: &str = "Based on the responses above, answer the original question. Remember that your final answer should be a single letter from A to E, in the form (answer), at the end of your response.";

const NEUTRAL_FINALIZE_LETTER_TIGHT: &str = "Based on the responses above, answer the original question.Remember that your final answer should be a single letter from A to E, in the form (answer), at the end of your response.";

const NEUTRAL_FINALIZE_BOXED: &str = r"Based on the responses above, answer the original question. Please reiterate your answer, with your final answer a single numerical number, in the form \boxed{answer}.";

type TemplateKey = (PromptSetId, u8, Stage, AnswerFormat);

/// Registry of stage templates keyed by prompt set, case, stage, and format.
#[derive(Debug, Clone)]
pub struct PromptRegistry {
    templates: BTreeMap<TemplateKey, String>,
}

impl PromptRegistry {
    /// The shipped templates. Sets 1 and 2 exist for case 1 in both answer
    /// formats; set 3 covers case 1 in both formats and cases 2 through 4
    /// for letter questions.
    pub fn builtin() -> Self {
        use AnswerFormat::{Boxed, Letter};
        use PromptSetId::{Set1, Set2, Set3};
        use Stage::{Finalize, Initial, Verify};

        let mut templates = BTreeMap::new();
        let mut put = |set, case, stage, format, text: &str| {
            templates.insert((set, case, stage, format), text.to_string());
        };

        for format in [Letter, Boxed] {
            let initial = match format {
                Letter => COT_INITIAL_LETTER,
                Boxed => COT_INITIAL_BOXED,
            };
            put(Set1, 1, Initial, format, initial);
            put(Set2, 1, Initial, format, initial);
            put(Set3, 1, Initial, format, initial);
            put(Set1, 1, Verify, format, SET1_VERIFY);
            put(Set2, 1, Verify, format, SET2_VERIFY);
            put(Set3, 1, Verify, format, FAIR_VERIFY);
        }
        put(Set1, 1, Finalize, Letter, SET1_FINALIZE_LETTER);
        put(Set1, 1, Finalize, Boxed, SET1_FINALIZE_BOXED);
        for set in [Set2, Set3] {
            put(set, 1, Finalize, Letter, NEUTRAL_FINALIZE_LETTER);
            put(set, 1, Finalize, Boxed, NEUTRAL_FINALIZE_BOXED);
        }

        put(Set3, 2, Initial, Letter, COT_INITIAL_LETTER);
        put(Set3, 2, Verify, Letter, FAIR_VERIFY_RATIONALE_FIRST);
        put(Set3, 3, Initial, Letter, NOCOT_INITIAL_LETTER);
        put(Set3, 3, Verify, Letter, FAIR_VERIFY);
        put(Set3, 4, Initial, Letter, NOCOT_INITIAL_LETTER);
        put(Set3, 4, Verify, Letter, FAIR_VERIFY_JUDGMENT);
        for case in [2, 3, 4] {
            put(Set3, case, Finalize, Letter, NEUTRAL_FINALIZE_LETTER_TIGHT);
        }

        Self { templates }
    }

    /// Builtin templates with overrides read from `prompts.toml` in `dir`,
    /// when that file exists.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut registry = Self::builtin();
        let path = dir.join("prompts.toml");
        if !path.exists() {
            return Ok(registry);
        }
        let raw = std::fs::read_to_string(&path)
            .map_err(|e| PromptError::Config(format!("{}: {e}", path.display())))?;
        let file: PromptFile = toml::from_str(&raw)
            .map_err(|e| PromptError::Config(format!("{}: {e}", path.display())))?;
        for entry in file.template {
            let set = PromptSetId::from_number(entry.set)
                .ok_or_else(|| PromptError::Config(format!("unknown prompt set {}", entry.set)))?;
            if CaseConfig::from_number(entry.case).is_none() {
                return Err(PromptError::Config(format!("unknown case {}", entry.case)));
            }
            registry
                .templates
                .insert((set, entry.case, entry.stage, entry.format), entry.text);
        }
        Ok(registry)
    }

    pub fn template(
        &self,
        set: PromptSetId,
        case: CaseConfig,
        stage: Stage,
        format: AnswerFormat,
    ) -> Result<&str, PromptError> {
        self.templates
            .get(&(set, case.number(), stage, format))
            .map(String::as_str)
            .ok_or(PromptError::UnknownCombination {
                set,
                case: case.number(),
                stage,
                format,
            })
    }

    /// Renders the template for a stage by substituting the question fields.
    pub fn render(
        &self,
        set: PromptSetId,
        case: CaseConfig,
        stage: Stage,
        question: &Question,
    ) -> Result<String, PromptError> {
        let format = question.answer_format();
        let template = self.template(set, case, stage, format)?;
        let mut text = template.to_string();
        if text.contains("{question}") {
            text = text.replace("{question}", &question.stem);
        }
        if text.contains("{choices}") {
            if question.choices.is_empty() {
                return Err(PromptError::MissingField {
                    placeholder: "choices".to_string(),
                });
            }
            let rendered: Vec<String> = question
                .choices
                .iter()
                .map(|c| format!("({}) {}", c.label, c.text))
                .collect();
            text = text.replace("{choices}", &rendered.join(" "));
        }
        Ok(text)
    }

    /// Every registered (set, case, stage, format) combination.
    pub fn coverage(&self) -> Vec<TemplateKey> {
        self.templates.keys().cloned().collect()
    }
}

#[derive(Debug, Deserialize)]
struct PromptFile {
    #[serde(default)]
    template: Vec<TemplateEntry>,
}

#[derive(Debug, Deserialize)]
struct TemplateEntry {
    set: u8,
    case: u8,
    stage: Stage,
    format: AnswerFormat,
    text: String,
}

/// Which lexicon a lint finding came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LintRule {
    NegativePhrase,
    PositivePhrase,
    CorrectnessVocabulary,
}

/// A single flagged phrase with its byte span.
#[derive(Debug, Clone, PartialEq)]
pub struct LintFinding {
    pub rule: LintRule,
    pub phrase: String,
    pub span: (usize, usize),
}

/// All findings for one text plus the resulting classification.
#[derive(Debug, Clone, PartialEq)]
pub struct LintReport {
    pub findings: Vec<LintFinding>,
    pub classification: PromptClass,
}

const NEGATIVE_PHRASES: &[&str] = &[
    "find problems",
    "find the problem",
    "improve your answer",
    "based on the problems",
];

const POSITIVE_PHRASES: &[&str] = &[
    "correct your answer",
    "keep your answer",
    "your answer is right",
];

const CORRECTNESS_VOCABULARY: &[&str] = &["correct", "incorrect"];

/// Phrase-lexicon linter that classifies prompt texts as biased, weakly
/// biased, or fair.
#[derive(Debug, Clone)]
pub struct Linter {
    negative: Vec<(String, Regex)>,
    positive: Vec<(String, Regex)>,
    correctness: Vec<(String, Regex)>,
}

fn phrase_regex(phrase: &str) -> Regex {
    let escaped = regex::escape(phrase).replace(' ', r"\s+");
    Regex::new(&format!(r"(?i)\b{escaped}\b")).expect("phrase regexes always compile")
}

fn compile(phrases: &[&str]) -> Vec<(String, Regex)> {
    phrases
        .iter()
        .map(|p| (p.to_string(), phrase_regex(p)))
        .collect()
}

static TRAILER_MARK: once_cell::sync::Lazy<Regex> =
    once_cell::sync::Lazy::new(|| Regex::new(r"(?i)final\s+answer").unwrap());

impl Linter {
    pub fn builtin() -> Self {
        Self {
            negative: compile(NEGATIVE_PHRASES),
            positive: compile(POSITIVE_PHRASES),
            correctness: compile(CORRECTNESS_VOCABULARY),
        }
    }

    /// Builtin lexicon with replacements read from `lexicon.toml` in `dir`,
    /// when that file exists.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let path = dir.join("lexicon.toml");
        if !path.exists() {
            return Ok(Self::builtin());
        }
        let raw = std::fs::read_to_string(&path)
            .map_err(|e| PromptError::Config(format!("{}: {e}", path.display())))?;
        let file: LexiconFile = toml::from_str(&raw)
            .map_err(|e| PromptError::Config(format!("{}: {e}", path.display())))?;
        let pick = |custom: Option<Vec<String>>, default: &[&str]| match custom {
            Some(list) => list
                .iter()
                .map(|p| (p.clone(), phrase_regex(p)))
                .collect(),
            None => compile(default),
        };
        Ok(Self {
            negative: pick(file.negative, NEGATIVE_PHRASES),
            positive: pick(file.positive, POSITIVE_PHRASES),
            correctness: pick(file.correctness, CORRECTNESS_VOCABULARY),
        })
    }

    /// Flags lexicon phrases in `text` and classifies it. Negative or
    /// positive phrases anywhere make it Biased; otherwise correctness
    /// vocabulary outside answer-format trailer sentences makes it
    /// WeaklyBiased; otherwise it is Fair.
    pub fn lint(&self, text: &str) -> LintReport {
        let mut findings = Vec::new();
        for (rule, set) in [
            (LintRule::NegativePhrase, &self.negative),
            (LintRule::PositivePhrase, &self.positive),
        ] {
            for (phrase, regex) in set {
                for m in regex.find_iter(text) {
                    findings.push(LintFinding {
                        rule,
                        phrase: phrase.clone(),
                        span: (m.start(), m.end()),
                    });
                }
            }
        }
        for (lo, hi) in sentence_spans(text) {
            let sentence = &text[lo..hi];
            if TRAILER_MARK.is_match(sentence) {
                continue;
            }
            for (phrase, regex) in &self.correctness {
                for m in regex.find_iter(sentence) {
                    findings.push(LintFinding {
                        rule: LintRule::CorrectnessVocabulary,
                        phrase: phrase.clone(),
                        span: (lo + m.start(), lo + m.end()),
                    });
                }
            }
        }
        findings.sort_by_key(|f| f.span);
        let classification = if findings
            .iter()
            .any(|f| matches!(f.rule, LintRule::NegativePhrase | LintRule::PositivePhrase))
        {
            PromptClass::Biased
        } else if !findings.is_empty() {
            PromptClass::WeaklyBiased
        } else {
            PromptClass::Fair
        };
        LintReport {
            findings,
            classification,
        }
    }
}

#[derive(Debug, Deserialize)]
struct LexiconFile {
    negative: Option<Vec<String>>,
    positive: Option<Vec<String>>,
    correctness: Option<Vec<String>>,
}

/// Lints with the builtin lexicon.
pub fn lint(text: &str) -> LintReport {
    Linter::builtin().lint(text)
}

/// The verdict for a whole prompt set and answer format: the maximum
/// severity over its registered verify and finalize templates.
pub fn classify_set(
    registry: &PromptRegistry,
    linter: &Linter,
    set: PromptSetId,
    format: AnswerFormat,
) -> PromptClass {
    let mut worst = PromptClass::Fair;
    for ((s, _, stage, f), text) in &registry.templates {
        if *s == set && *f == format && *stage != Stage::Initial {
            worst = worst.max(linter.lint(text).classification);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{Choice, DatasetKind, GoldAnswer, Question};

    fn mc_question() -> Question {
        Question {
            index: 0,
            id: "q0".to_string(),
            stem: "Where do you find the most amount of leafs?".to_string(),
            choices: vec![
                Choice { label: 'A', text: "floral arrangement".to_string() },
                Choice { label: 'B', text: "ground".to_string() },
                Choice { label: 'C', text: "forrest".to_string() },
                Choice { label: 'D', text: "field".to_string() },
                Choice { label: 'E', text: "compost pile".to_string() },
            ],
            gold: GoldAnswer::Letter('C'),
            kind: DatasetKind::CommonsenseQa,
        }
    }

    fn math_question() -> Question {
        Question {
            index: 0,
            id: "g0".to_string(),
            stem: "Jill works 50 weeks a year. What is her annual salary?".to_string(),
            choices: vec![],
            gold: GoldAnswer::Numeric(crate::extract::CanonicalNumber::parse("57500").unwrap()),
            kind: DatasetKind::Gsm8k,
        }
    }

    fn case(n: u8) -> CaseConfig {
        CaseConfig::from_number(n).unwrap()
    }

    #[test]
    fn initial_prompt_renders_the_documented_shape() {
        let registry = PromptRegistry::builtin();
        let got = registry
            .render(PromptSetId::Set1, case(1), Stage::Initial, &mc_question())
            .unwrap();
        let expected = "Q: Where do you find the most amount of leafs?\n\
                        Answer Choices:(A) floral arrangement (B) ground (C) forrest (D) field (E) compost pile\n\
                        Explain your reasoning. You must choose only one option from A to E. \
                        Your final answer should be a single letter from A to E, in the form (answer), \
                        at the end of your response.";
        assert_eq!(got, expected);
    }

    #[test]
    fn initial_prompts_are_identical_across_sets() {
        let registry = PromptRegistry::builtin();
        for q in [mc_question(), math_question()] {
            let texts: Vec<String> = PromptSetId::all()
                .iter()
                .map(|&set| registry.render(set, case(1), Stage::Initial, &q).unwrap())
                .collect();
            assert_eq!(texts[0], texts[1]);
            assert_eq!(texts[1], texts[2]);
        }
    }

    #[test]
    fn math_initial_keeps_the_boxed_answer_placeholder_literal() {
        let registry = PromptRegistry::builtin();
        let got = registry
            .render(PromptSetId::Set3, case(1), Stage::Initial, &math_question())
            .unwrap();
        assert!(got.starts_with("Question: Can you solve the following math problem? Jill"));
        assert!(got.ends_with(r"in the form \boxed{answer}, at the end of your response."));
    }

    #[test]
    fn no_cot_initial_drops_only_the_reasoning_request() {
        let registry = PromptRegistry::builtin();
        let cot = registry
            .render(PromptSetId::Set3, case(1), Stage::Initial, &mc_question())
            .unwrap();
        let plain = registry
            .render(PromptSetId::Set3, case(3), Stage::Initial, &mc_question())
            .unwrap();
        assert_eq!(cot.replace("Explain your reasoning. ", ""), plain);
    }

    #[test]
    fn unknown_combinations_are_rejected() {
        let registry = PromptRegistry::builtin();
        let err = registry
            .render(PromptSetId::Set1, case(2), Stage::Verify, &mc_question())
            .unwrap_err();
        assert!(matches!(err, PromptError::UnknownCombination { .. }));
        let math_case3 = registry
            .render(PromptSetId::Set3, case(3), Stage::Verify, &math_question())
            .unwrap_err();
        assert!(matches!(math_case3, PromptError::UnknownCombination { .. }));
    }

    #[test]
    fn choiceless_questions_cannot_fill_letter_templates() {
        let registry = PromptRegistry::builtin();
        let mut q = mc_question();
        q.choices.clear();
        let err = registry
            .render(PromptSetId::Set3, case(1), Stage::Initial, &q)
            .unwrap_err();
        assert_eq!(
            err,
            PromptError::MissingField { placeholder: "choices".to_string() }
        );
    }

    #[test]
    fn verify_templates_differ_by_set_and_case() {
        let registry = PromptRegistry::builtin();
        let q = mc_question();
        let set1 = registry.render(PromptSetId::Set1, case(1), Stage::Verify, &q).unwrap();
        assert_eq!(set1, "Review your previous answer and find problems with your answer.");
        let set2 = registry.render(PromptSetId::Set2, case(1), Stage::Verify, &q).unwrap();
        assert!(set2.starts_with("Do you think the question and answer pair above is correct?"));
        let set3 = registry.render(PromptSetId::Set3, case(1), Stage::Verify, &q).unwrap();
        assert!(set3.starts_with("Please verify whether the response above provides"));
        let case2 = registry.render(PromptSetId::Set3, case(2), Stage::Verify, &q).unwrap();
        assert!(case2.contains("clearly state the aswer only after"));
        let case4 = registry.render(PromptSetId::Set3, case(4), Stage::Verify, &q).unwrap();
        assert!(case4.ends_with("Clearly state your judgement as yes or no."));
    }

    #[test]
    fn later_case_finalize_omits_the_space_after_the_first_sentence() {
        let registry = PromptRegistry::builtin();
        let q = mc_question();
        let case1 = registry.render(PromptSetId::Set3, case(1), Stage::Finalize, &q).unwrap();
        assert!(case1.contains("question. Remember"));
        for n in [2, 3, 4] {
            let later = registry.render(PromptSetId::Set3, case(n), Stage::Finalize, &q).unwrap();
            assert!(later.contains("question.Remember"), "case {n}: {later}");
        }
    }

    #[test]
    fn coverage_lists_every_registered_combination() {
        let registry = PromptRegistry::builtin();
        let coverage = registry.coverage();
        // 3 sets x 3 stages x 2 formats for case 1, plus 3 stages x 3 extra
        // letter cases for set 3.
        assert_eq!(coverage.len(), 27);
        for key in &coverage {
            let case = CaseConfig::from_number(key.1).unwrap();
            assert!(registry.template(key.0, case, key.2, key.3).is_ok());
        }
    }

    #[test]
    fn overrides_replace_builtin_templates() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("prompts.toml"),
            r#"
[[template]]
set = 1
case = 1
stage = "verify"
format = "letter"
text = "Double-check the answer above."
"#,
        )
        .unwrap();
        let registry = PromptRegistry::from_dir(dir.path()).unwrap();
        let got = registry
            .render(PromptSetId::Set1, case(1), Stage::Verify, &mc_question())
            .unwrap();
        assert_eq!(got, "Double-check the answer above.");
        // Untouched combinations fall back to the builtin text.
        let still = registry
            .render(PromptSetId::Set2, case(1), Stage::Verify, &mc_question())
            .unwrap();
        assert!(still.starts_with("Do you think"));
    }

    #[test]
    fn bad_override_files_error_out() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("prompts.toml"), "set = !!").unwrap();
        assert!(matches!(
            PromptRegistry::from_dir(dir.path()),
            Err(PromptError::Config(_))
        ));
    }

    #[test]
    fn linter_flags_leading_phrases() {
        let report = lint("Review your previous answer and find problems with your answer.");
        assert_eq!(report.classification, PromptClass::Biased);
        assert!(report
            .findings
            .iter()
            .any(|f| f.rule == LintRule::NegativePhrase && f.phrase == "find problems"));
    }

    #[test]
    fn linter_flags_correctness_vocabulary_outside_trailers() {
        let report = lint(SET2_VERIFY);
        assert_eq!(report.classification, PromptClass::WeaklyBiased);
        let words: Vec<&str> = report.findings.iter().map(|f| f.phrase.as_str()).collect();
        assert!(words.contains(&"correct"));
        assert!(words.contains(&"incorrect"));
    }

    #[test]
    fn trailer_sentences_are_exempt_from_correctness_vocabulary() {
        let report = lint("State your final answer again, making sure it is correct.");
        assert_eq!(report.classification, PromptClass::Fair);
        let flagged = lint("Make sure it is correct. Then state your final answer.");
        assert_eq!(flagged.classification, PromptClass::WeaklyBiased);
    }

    #[test]
    fn positive_phrases_also_bias() {
        let report = lint("If anything seems off, correct your answer now.");
        assert_eq!(report.classification, PromptClass::Biased);
        assert!(report.findings.iter().any(|f| f.rule == LintRule::PositivePhrase));
    }

    #[test]
    fn finding_spans_cover_the_phrase() {
        let text = "Please find problems with it.";
        let report = lint(text);
        let f = &report.findings[0];
        assert_eq!(&text[f.span.0..f.span.1], "find problems");
    }

    #[test]
    fn bare_correct_does_not_fire_inside_incorrect() {
        let report = lint("That reading is incorrect.");
        let phrases: Vec<&str> = report.findings.iter().map(|f| f.phrase.as_str()).collect();
        assert_eq!(phrases, vec!["incorrect"]);
    }

    #[test]
    fn per_stage_verdicts_match_the_shipped_wording() {
        let registry = PromptRegistry::builtin();
        let linter = Linter::builtin();
        let q = mc_question();
        let render = |set, n, stage| registry.render(set, case(n), stage, &q).unwrap();

        for stage in [Stage::Verify, Stage::Finalize] {
            let report = linter.lint(&render(PromptSetId::Set1, 1, stage));
            assert_eq!(report.classification, PromptClass::Biased);
        }
        let set2_verify = linter.lint(&render(PromptSetId::Set2, 1, Stage::Verify));
        assert_eq!(set2_verify.classification, PromptClass::WeaklyBiased);
        // Set 2 shares its finalize wording with set 3, so alone it is fair;
        // the per-set verdict still reports the set as weakly biased.
        let set2_final = linter.lint(&render(PromptSetId::Set2, 1, Stage::Finalize));
        assert_eq!(set2_final.classification, PromptClass::Fair);
        for n in [1, 2, 3, 4] {
            for stage in [Stage::Verify, Stage::Finalize] {
                let report = linter.lint(&render(PromptSetId::Set3, n, stage));
                assert_eq!(report.classification, PromptClass::Fair, "set3 case {n} {stage:?}");
            }
        }
    }

    #[test]
    fn set_verdicts_take_the_worst_stage() {
        let registry = PromptRegistry::builtin();
        let linter = Linter::builtin();
        for format in [AnswerFormat::Letter, AnswerFormat::Boxed] {
            assert_eq!(
                classify_set(&registry, &linter, PromptSetId::Set1, format),
                PromptClass::Biased
            );
            assert_eq!(
                classify_set(&registry, &linter, PromptSetId::Set2, format),
                PromptClass::WeaklyBiased
            );
            assert_eq!(
                classify_set(&registry, &linter, PromptSetId::Set3, format),
                PromptClass::Fair
            );
        }
    }

    #[test]
    fn custom_lexicons_replace_the_builtin_lists() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("lexicon.toml"),
            r#"
negative = ["hunt for mistakes"]
"#,
        )
        .unwrap();
        let linter = Linter::from_dir(dir.path()).unwrap();
        let report = linter.lint("Please hunt for mistakes in the answer.");
        assert_eq!(report.classification, PromptClass::Biased);
        // The builtin negative list was replaced wholesale.
        let old = linter.lint("Review your previous answer and find problems with it.");
        assert_eq!(old.classification, PromptClass::Fair);
    }

    #[test]
    fn prompt_class_orders_by_severity() {
        assert!(PromptClass::Fair < PromptClass::WeaklyBiased);
        assert!(PromptClass::WeaklyBiased < PromptClass::Biased);
    }
}
