//! Dataset loading: multiple-choice and math JSONL files plus synthetic questions.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::extract::CanonicalNumber;
use crate::prompts::AnswerFormat;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: question {id} has no usable gold answer")]
    MissingGold { line: usize, id: String },
    #[error("invalid synthetic dataset request: {0}")]
    InvalidRequest(String),
}

/// Which corpus a question came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    CommonsenseQa,
    Gsm8k,
    Synthetic,
}

impl DatasetKind {
    pub fn answer_format(self) -> AnswerFormat {
        match self {
            DatasetKind::CommonsenseQa | DatasetKind::Synthetic => AnswerFormat::Letter,
            DatasetKind::Gsm8k => AnswerFormat::Boxed,
        }
    }
}

/// A labeled answer option.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub label: char,
    pub text: String,
}

/// The reference answer for a question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum GoldAnswer {
    Letter(char),
    Numeric(CanonicalNumber),
}

/// One loaded question with its position in the source file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub index: usize,
    pub id: String,
    pub stem: String,
    pub choices: Vec<Choice>,
    pub gold: GoldAnswer,
    pub kind: DatasetKind,
}

impl Question {
    pub fn answer_format(&self) -> AnswerFormat {
        self.kind.answer_format()
    }
}

/// Which rows of a dataset file to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingPlan {
    All,
    FirstN(usize),
}

impl SamplingPlan {
    fn wants(self, taken: usize) -> bool {
        match self {
            SamplingPlan::All => true,
            SamplingPlan::FirstN(n) => taken < n,
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawMcRecord {
    #[serde(rename = "answerKey")]
    answer_key: Option<String>,
    id: String,
    question: RawMcQuestion,
}

#[derive(Debug, Deserialize)]
struct RawMcQuestion {
    stem: String,
    choices: Vec<RawMcChoice>,
}

#[derive(Debug, Deserialize)]
struct RawMcChoice {
    label: String,
    text: String,
}

fn open(path: &Path) -> Result<BufReader<File>, DatasetError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| DatasetError::Io {
            path: path.display().to_string(),
            source: e,
        })
}

/// Loads a CommonsenseQA-format JSONL file: five choices labeled A through E
/// and an `answerKey` naming one of them. Questions whose answer key does not
/// name a listed choice (the withheld-test marker "F" included) are rejected
/// as MissingGold.
pub fn load_commonsenseqa(path: &Path, plan: SamplingPlan) -> Result<Vec<Question>, DatasetError> {
    let reader = open(path)?;
    let mut questions = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        if !plan.wants(questions.len()) {
            break;
        }
        let line_no = i + 1;
        let line = line.map_err(|e| DatasetError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawMcRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let mut choices = Vec::with_capacity(raw.question.choices.len());
        for (pos, c) in raw.question.choices.iter().enumerate() {
            let expected = (b'A' + pos as u8) as char;
            let label = c.label.chars().next().unwrap_or(' ');
            if c.label.len() != 1 || label != expected {
                return Err(DatasetError::Parse {
                    line: line_no,
                    message: format!(
                        "choice {} is labeled {:?}, expected {expected:?}",
                        pos + 1,
                        c.label
                    ),
                });
            }
            choices.push(Choice {
                label,
                text: c.text.clone(),
            });
        }
        if choices.len() != 5 {
            return Err(DatasetError::Parse {
                line: line_no,
                message: format!("expected 5 choices, found {}", choices.len()),
            });
        }
        let gold = match raw.answer_key.as_deref() {
            Some(key) if key.len() == 1 => {
                let letter = key.chars().next().unwrap();
                if choices.iter().any(|c| c.label == letter) {
                    GoldAnswer::Letter(letter)
                } else {
                    return Err(DatasetError::MissingGold {
                        line: line_no,
                        id: raw.id,
                    });
                }
            }
            _ => {
                return Err(DatasetError::MissingGold {
                    line: line_no,
                    id: raw.id,
                })
            }
        };
        questions.push(Question {
            index: questions.len(),
            id: raw.id,
            stem: raw.question.stem,
            choices,
            gold,
            kind: DatasetKind::CommonsenseQa,
        });
    }
    Ok(questions)
}

#[derive(Debug, Deserialize)]
struct RawMathRecord {
    question: String,
    answer: String,
}

/// Loads a GSM8K-format JSONL file: a question plus a worked answer whose
/// final line carries the gold number after a `#### ` marker.
pub fn load_gsm8k(path: &Path, plan: SamplingPlan) -> Result<Vec<Question>, DatasetError> {
    let reader = open(path)?;
    let mut questions = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        if !plan.wants(questions.len()) {
            break;
        }
        let line_no = i + 1;
        let line = line.map_err(|e| DatasetError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawMathRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let id = format!("gsm8k-{line_no}");
        let Some(tail) = raw.answer.rsplit("#### ").next().filter(|_| raw.answer.contains("#### "))
        else {
            return Err(DatasetError::MissingGold { line: line_no, id });
        };
        let gold_text = tail.lines().next().unwrap_or("").trim();
        let Some(number) = CanonicalNumber::parse(gold_text) else {
            return Err(DatasetError::Parse {
                line: line_no,
                message: format!("gold answer {gold_text:?} is not a plain number"),
            });
        };
        questions.push(Question {
            index: questions.len(),
            id,
            stem: raw.question,
            choices: Vec::new(),
            gold: GoldAnswer::Numeric(number),
            kind: DatasetKind::Gsm8k,
        });
    }
    Ok(questions)
}

/// Generates `n` synthetic multiple-choice questions with `k` options each
/// and a seeded uniform gold letter, for large simulated runs.
pub fn synthetic_questions(n: usize, k: usize, seed: u64) -> Result<Vec<Question>, DatasetError> {
    if !(2..=26).contains(&k) {
        return Err(DatasetError::InvalidRequest(format!(
            "choice count must lie in 2..=26, got {k}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let questions = (0..n)
        .map(|i| {
            let gold = (b'A' + rng.gen_range(0..k as u8)) as char;
            let choices = (0..k)
                .map(|j| {
                    let label = (b'A' + j as u8) as char;
                    Choice {
                        label,
                        text: format!("option {}", label.to_ascii_lowercase()),
                    }
                })
                .collect();
            Question {
                index: i,
                id: format!("syn-{i}"),
                stem: format!("Which option is keyed as correct for item {i}?"),
                choices,
                gold: GoldAnswer::Letter(gold),
                kind: DatasetKind::Synthetic,
            }
        })
        .collect();
    Ok(questions)
}

/// Hex SHA-256 of a dataset file, recorded in run metadata.
pub fn dataset_sha256(path: &Path) -> Result<String, DatasetError> {
    let mut reader = open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = reader.read(&mut buf).map_err(|e| DatasetError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}
