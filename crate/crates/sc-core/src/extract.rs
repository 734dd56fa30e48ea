//! Answer and verify-decision extraction from model response text.

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::prompts::Order;

/// A decimal number in canonical string form: no sign on zero, no leading
/// zeros, no trailing fractional zeros. Equality is exact.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanonicalNumber(String);

impl CanonicalNumber {
    /// Normalizes a raw numeric string: currency symbols, commas, and
    /// whitespace are stripped, then the digits are canonicalized. Returns
    /// None when what remains is not a plain decimal number.
    pub fn parse(raw: &str) -> Option<Self> {
        let cleaned: String = raw
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '$' && *c != ',' && *c != '\\')
            .collect();
        let cleaned = cleaned.trim_start_matches('+');
        static SHAPE: Lazy<Regex> =
            Lazy::new(|| Regex::new(r"^(-?)(\d*)(?:\.(\d+))?$").unwrap());
        let caps = SHAPE.captures(cleaned)?;
        if caps[2].is_empty() && caps.get(3).is_none() {
            return None;
        }
        let sign = &caps[1];
        let int_part = caps[2].trim_start_matches('0');
        let int_part = if int_part.is_empty() { "0" } else { int_part };
        let frac_part = caps
            .get(3)
            .map(|m| m.as_str().trim_end_matches('0'))
            .unwrap_or("");
        let mut canonical = String::new();
        if !frac_part.is_empty() || int_part != "0" {
            canonical.push_str(sign);
        }
        canonical.push_str(int_part);
        if !frac_part.is_empty() {
            canonical.push('.');
            canonical.push_str(frac_part);
        }
        Some(Self(canonical))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for CanonicalNumber {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// The answer recovered from a response, if any.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum AnswerKind {
    Letter(char),
    Numeric(CanonicalNumber),
    None,
}

impl AnswerKind {
    pub fn is_none(&self) -> bool {
        matches!(self, AnswerKind::None)
    }
}

/// An extracted answer with the byte span it was recovered from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractedAnswer {
    pub kind: AnswerKind,
    pub span: Option<(usize, usize)>,
}

impl ExtractedAnswer {
    fn none() -> Self {
        Self {
            kind: AnswerKind::None,
            span: None,
        }
    }
}

/// The verify-stage decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Keep,
    Change,
    Unclear,
}

/// An extracted decision with the byte span of the deciding phrase.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractedDecision {
    pub decision: Decision,
    pub span: Option<(usize, usize)>,
}

static PAREN_LETTER: Lazy<Regex> = Lazy::new(|| Regex::new(r"\(\s*([A-Ea-e])\s*\)").unwrap());

static LETTER_FALLBACKS: Lazy<Vec<Regex>> = Lazy::new(|| {
    [
        r"(?i)answer\s+is\s*:?\s*\(?([A-Ea-e])\)?(?:[^A-Za-z0-9]|$)",
        r"(?i)answer\s*:\s*\(?([A-Ea-e])\)?(?:[^A-Za-z0-9]|$)",
        r"(?i)\(\s*answer\s*\)\s*:?\s*([A-Ea-e])(?:[^A-Za-z0-9]|$)",
        r"(?m)^\s*([A-E])\s*:\s+\S",
    ]
    .iter()
    .map(|p| Regex::new(p).unwrap())
    .collect()
});

/// Recovers a multiple-choice letter from a response. The last
/// parenthesized letter wins; without one, the last looser answer
/// restatement ("answer is B", "answer: B", "(answer) B", a line-leading
/// "B: ...") is used instead.
pub fn extract_letter(text: &str) -> ExtractedAnswer {
    if let Some(caps) = PAREN_LETTER.captures_iter(text).last() {
        let m = caps.get(1).unwrap();
        let letter = m.as_str().chars().next().unwrap().to_ascii_uppercase();
        let whole = caps.get(0).unwrap();
        return ExtractedAnswer {
            kind: AnswerKind::Letter(letter),
            span: Some((whole.start(), whole.end())),
        };
    }
    let mut best: Option<(usize, usize, char)> = None;
    for re in LETTER_FALLBACKS.iter() {
        for caps in re.captures_iter(text) {
            let m = caps.get(1).unwrap();
            let letter = m.as_str().chars().next().unwrap().to_ascii_uppercase();
            if best.map_or(true, |(start, _, _)| m.start() >= start) {
                best = Some((m.start(), m.end(), letter));
            }
        }
    }
    match best {
        Some((start, end, letter)) => ExtractedAnswer {
            kind: AnswerKind::Letter(letter),
            span: Some((start, end)),
        },
        None => ExtractedAnswer::none(),
    }
}

static BOXED: Lazy<Regex> = Lazy::new(|| Regex::new(r"\\boxed\{([^{}]*)\}").unwrap());

/// Recovers a numeric answer from the last `\boxed{...}` in a response and
/// normalizes it to canonical decimal form.
pub fn extract_boxed(text: &str) -> ExtractedAnswer {
    let Some(caps) = BOXED.captures_iter(text).last() else {
        return ExtractedAnswer::none();
    };
    let whole = caps.get(0).unwrap();
    match CanonicalNumber::parse(&caps[1]) {
        Some(number) => ExtractedAnswer {
            kind: AnswerKind::Numeric(number),
            span: Some((whole.start(), whole.end())),
        },
        None => ExtractedAnswer::none(),
    }
}

struct DecisionPhrase {
    regex: Regex,
    decision: Decision,
}

static DECISION_PHRASES: Lazy<Vec<DecisionPhrase>> = Lazy::new(|| {
    let keep = [
        r"(?i)\bis\s+correct\b",
        r"(?i)\bmost\s+appropriate\s+answer\b",
        r"(?i)\bjudge?ment\s+is\s+yes\b",
        r"(?i)\banswer\b[^.!?\n]{0,40}\bremains\b",
    ];
    let change = [
        r"(?i)\bis\s+incorrect\b",
        r"(?i)\bnot\s+the\s+correct\s+answer\b",
        r"(?i)\bjudge?ment\s+is\s+no\b",
        r"(?i)\bnone\s+of\s+the\s+given\s+answer\s+choices\b",
    ];
    keep.iter()
        .map(|p| (p, Decision::Keep))
        .chain(change.iter().map(|p| (p, Decision::Change)))
        .map(|(p, decision)| DecisionPhrase {
            regex: Regex::new(p).unwrap(),
            decision,
        })
        .collect()
});

/// Splits text into sentence spans on `.`, `!`, `?`, and line breaks.
pub(crate) fn sentence_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        let terminal = matches!(b, b'.' | b'!' | b'?')
            && bytes.get(i + 1).map_or(true, |n| n.is_ascii_whitespace());
        if terminal || b == b'\n' {
            if text[start..i].trim().is_empty() {
                start = i + 1;
                continue;
            }
            spans.push((start, i + 1));
            start = i + 1;
        }
    }
    if !text[start..].trim().is_empty() {
        spans.push((start, text.len()));
    }
    spans
}

fn last_phrase_in(text: &str, window: (usize, usize)) -> Option<(Decision, (usize, usize))> {
    let slice = &text[window.0..window.1];
    let mut best: Option<(usize, Decision, (usize, usize))> = None;
    for phrase in DECISION_PHRASES.iter() {
        for m in phrase.regex.find_iter(slice) {
            let abs = (window.0 + m.start(), window.0 + m.end());
            if best.map_or(true, |(start, _, _)| abs.0 >= start) {
                best = Some((abs.0, phrase.decision, abs));
            }
        }
    }
    best.map(|(_, decision, span)| (decision, span))
}

/// Recovers the keep/change decision from a verify response.
///
/// Decision-first responses state the verdict up front, so the first
/// sentence is scanned before falling back to the whole text;
/// rationale-first responses state it at the end, so the last two
/// sentences are preferred. The last matching phrase in the scanned
/// window wins.
pub fn extract_decision(text: &str, order: Order) -> ExtractedDecision {
    let sentences = sentence_spans(text);
    let window = match order {
        Order::DecisionFirst => sentences.first().copied().map(|s| vec![s]),
        Order::RationaleFirst => {
            let n = sentences.len();
            if n == 0 {
                None
            } else {
                Some(sentences[n.saturating_sub(2)..].to_vec())
            }
        }
    };
    if let Some(spans) = window {
        let lo = spans.first().map(|s| s.0).unwrap_or(0);
        let hi = spans.last().map(|s| s.1).unwrap_or(0);
        if let Some((decision, span)) = last_phrase_in(text, (lo, hi)) {
            return ExtractedDecision {
                decision,
                span: Some(span),
            };
        }
    }
    if let Some((decision, span)) = last_phrase_in(text, (0, text.len())) {
        return ExtractedDecision {
            decision,
            span: Some(span),
        };
    }
    ExtractedDecision {
        decision: Decision::Unclear,
        span: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn letter(text: &str) -> AnswerKind {
        extract_letter(text).kind
    }

    fn boxed(text: &str) -> AnswerKind {
        extract_boxed(text).kind
    }

    fn num(s: &str) -> AnswerKind {
        AnswerKind::Numeric(CanonicalNumber::parse(s).unwrap())
    }

    #[test]
    fn last_parenthesized_letter_wins() {
        assert_eq!(letter("I considered (A) but the answer is (B) store."), AnswerKind::Letter('B'));
        assert_eq!(letter("Final answer: (C)"), AnswerKind::Letter('C'));
        assert_eq!(letter("(a) looks right"), AnswerKind::Letter('A'));
        assert_eq!(letter("( D )"), AnswerKind::Letter('D'));
    }

    #[test]
    fn parenthesized_letters_beat_looser_restatements() {
        assert_eq!(
            letter("The answer is E. Wait, my final answer is (D)."),
            AnswerKind::Letter('D')
        );
    }

    #[test]
    fn loose_restatements_are_a_fallback() {
        assert_eq!(letter("The answer is B."), AnswerKind::Letter('B'));
        assert_eq!(letter("answer: c"), AnswerKind::Letter('C'));
        assert_eq!(letter("(answer) B\nThe reasoning above holds."), AnswerKind::Letter('B'));
        assert_eq!(letter("A: bank. A revolving door controls entry."), AnswerKind::Letter('A'));
        assert_eq!(letter("The answer is A"), AnswerKind::Letter('A'));
    }

    #[test]
    fn letter_misses_return_none() {
        assert_eq!(letter("answer: text without letters"), AnswerKind::None);
        assert_eq!(letter("The answer is Apple."), AnswerKind::None);
        assert_eq!(letter("No verdict here."), AnswerKind::None);
        assert_eq!(letter(""), AnswerKind::None);
    }

    #[test]
    fn letter_spans_point_at_the_match() {
        let text = "I pick (A). Final answer: (B).";
        let got = extract_letter(text);
        assert_eq!(got.kind, AnswerKind::Letter('B'));
        let (start, end) = got.span.unwrap();
        assert_eq!(&text[start..end], "(B)");
    }

    #[test]
    fn last_boxed_number_wins() {
        assert_eq!(boxed(r"First \boxed{3}, then \boxed{7}."), num("7"));
        assert_eq!(boxed(r"The total is \boxed{57500} per month."), num("57500"));
    }

    #[test]
    fn boxed_contents_are_normalized() {
        assert_eq!(boxed(r"\boxed{\$57,500}"), num("57500"));
        assert_eq!(boxed(r"\boxed{ 460 }"), num("460"));
        assert_eq!(boxed(r"\boxed{75.00}"), num("75"));
        assert_eq!(boxed(r"\boxed{-3.50}"), num("-3.5"));
        assert_eq!(boxed(r"\boxed{007}"), num("7"));
    }

    #[test]
    fn non_numeric_boxes_return_none() {
        assert_eq!(boxed(r"\boxed{x + 2}"), AnswerKind::None);
        assert_eq!(boxed("no box at all"), AnswerKind::None);
        assert_eq!(boxed(r"\boxed{}"), AnswerKind::None);
    }

    #[test]
    fn canonical_numbers_compare_exactly() {
        assert_eq!(CanonicalNumber::parse("75.00"), CanonicalNumber::parse("75"));
        assert_eq!(CanonicalNumber::parse("0.50"), CanonicalNumber::parse(".5"));
        assert_eq!(CanonicalNumber::parse("-0"), CanonicalNumber::parse("0"));
        assert_ne!(CanonicalNumber::parse("75.1"), CanonicalNumber::parse("75"));
        assert_eq!(CanonicalNumber::parse("1,250"), CanonicalNumber::parse("1250"));
        assert!(CanonicalNumber::parse("twelve").is_none());
        assert!(CanonicalNumber::parse("1/2").is_none());
    }

    #[test]
    fn decision_first_prefers_the_opening_sentence() {
        let got = extract_decision(
            "The response above provides the most appropriate answer to the question. \
             Some claims are incorrect in minor ways.",
            Order::DecisionFirst,
        );
        assert_eq!(got.decision, Decision::Keep);
    }

    #[test]
    fn rationale_first_prefers_the_closing_sentences() {
        let got = extract_decision(
            "The option is incorrect in several respects when read literally. \
             On balance the comparison favors it. Therefore, the judgment is yes.",
            Order::RationaleFirst,
        );
        assert_eq!(got.decision, Decision::Keep);
        let flip = extract_decision(
            "Walking through the reasoning, each step checks out at first. \
             A second look shows a flaw. Therefore, the judgement is no.",
            Order::RationaleFirst,
        );
        assert_eq!(flip.decision, Decision::Change);
    }

    #[test]
    fn whole_text_is_the_fallback_window() {
        let got = extract_decision(
            "Upon reviewing the answer, a few things stand out. \
             The final answer remains unchanged.",
            Order::DecisionFirst,
        );
        assert_eq!(got.decision, Decision::Keep);
    }

    #[test]
    fn change_phrases_are_recognized() {
        assert_eq!(
            extract_decision("The answer above is incorrect.", Order::DecisionFirst).decision,
            Decision::Change
        );
        assert_eq!(
            extract_decision(
                "My verification is that none of the given answer choices (A, B, C, or E) \
                 are the correct answer.",
                Order::DecisionFirst
            )
            .decision,
            Decision::Change
        );
        assert_eq!(
            extract_decision("That option is not the correct answer.", Order::DecisionFirst)
                .decision,
            Decision::Change
        );
    }

    #[test]
    fn later_phrases_override_earlier_ones_in_the_window() {
        let got = extract_decision(
            "The arithmetic is correct but the conclusion drawn from it is incorrect.",
            Order::DecisionFirst,
        );
        assert_eq!(got.decision, Decision::Change);
    }

    #[test]
    fn unclear_when_no_phrase_matches() {
        let got = extract_decision("Interesting question, hard to say.", Order::DecisionFirst);
        assert_eq!(got.decision, Decision::Unclear);
        assert_eq!(got.span, None);
        assert_eq!(extract_decision("", Order::RationaleFirst).decision, Decision::Unclear);
    }

    #[test]
    fn negated_adjacent_forms_do_not_false_positive() {
        // "not include the correct answer" must not read as "not the correct answer".
        let got = extract_decision(
            "The listed options do not include the correct answer anywhere.",
            Order::DecisionFirst,
        );
        assert_eq!(got.decision, Decision::Unclear);
        // "incorrect" must not fire the bare "correct" matchers.
        let neg = extract_decision("The answer is incorrect.", Order::DecisionFirst);
        assert_eq!(neg.decision, Decision::Change);
    }

    #[test]
    fn decision_spans_point_at_the_phrase() {
        let text = "Clearly the value is correct.";
        let got = extract_decision(text, Order::DecisionFirst);
        let (start, end) = got.span.unwrap();
        assert_eq!(&text[start..end], "is correct");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn extraction_never_panics(text in ".{0,400}") {
            let _ = extract_letter(&text);
            let _ = extract_boxed(&text);
            let _ = extract_decision(&text, Order::DecisionFirst);
            let _ = extract_decision(&text, Order::RationaleFirst);
        }

        #[test]
        fn planted_trailers_are_always_recovered(
            prefix in "[a-z ]{0,80}",
            letter in 0u8..5,
        ) {
            let c = (b'A' + letter) as char;
            let text = format!("{prefix} Final answer: ({c})");
            prop_assert_eq!(extract_letter(&text).kind, AnswerKind::Letter(c));
        }

        #[test]
        fn planted_boxes_are_always_recovered(
            prefix in "[a-z ]{0,80}",
            n in 0u32..1_000_000,
        ) {
            let text = format!("{prefix} so the total is \\boxed{{{n}}}.");
            let expected = AnswerKind::Numeric(CanonicalNumber::parse(&n.to_string()).unwrap());
            prop_assert_eq!(extract_boxed(&text).kind, expected);
        }
    }
}
