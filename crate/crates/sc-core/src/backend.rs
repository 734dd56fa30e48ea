//! Chat completion backends: an OpenAI-compatible HTTP client and a
//! deterministic simulator.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{GoldAnswer, Question};
use crate::extract::{extract_boxed, extract_letter, AnswerKind, CanonicalNumber, Decision};
use crate::prompts::{CaseConfig, Order, PromptClass, Stage};
use crate::theory::{decision_prob, lemma1_accuracy, AbilityModel, DecisionModel, Temperature};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid backend parameters: {0}")]
    InvalidParams(String),
    #[error("simulated backend needs stage context: {detail}")]
    SimulationContextMissing { detail: String },
    #[error("http request failed with status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("could not read assistant content from response: {0}")]
    MalformedResponse(String),
    #[error("auth token variable {0} is not set in the environment")]
    MissingToken(String),
}

/// Chat roles, serialized in OpenAI wire casing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// One chat turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// Per-stage sampling temperatures for the three chat turns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTemperatures {
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
}

impl StageTemperatures {
    pub fn uniform(t: f64) -> Self {
        Self { t1: t, t2: t, t3: t }
    }

    pub fn for_stage(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Initial => self.t1,
            Stage::Verify => self.t2,
            Stage::Finalize => self.t3,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        for (name, t) in [("t1", self.t1), ("t2", self.t2), ("t3", self.t3)] {
            if !t.is_finite() || t < 0.0 {
                return Err(BackendError::InvalidParams(format!(
                    "{name} must be finite and non-negative, got {t}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for StageTemperatures {
    fn default() -> Self {
        Self::uniform(0.0)
    }
}

fn default_lam() -> f64 { 0.8 }
fn default_h() -> f64 { 0.1 }
fn default_k() -> u32 { 5 }
fn default_alpha_reason() -> f64 { 0.8 }
fn default_alpha_copy() -> f64 { 0.99 }
fn default_rho() -> f64 { 0.5 }
fn default_gamma() -> f64 { 0.15 }
fn default_seed() -> u64 { 42 }

/// Parameters of the deterministic simulator.
///
/// `lam`, `h`, and `k` shape stage-1 ability; `alpha_reason` is the keep
/// confidence when the decision token comes before its rationale and
/// `alpha_copy` the (strictly higher) confidence when the rationale is
/// written first; `rho` is the chance a genuine revision lands on gold;
/// `gamma` is the extra keep-to-change rate forced by a biased prompt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub lam: f64,
    pub h: f64,
    pub k: u32,
    pub alpha_reason: f64,
    pub alpha_copy: f64,
    pub rho: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            lam: default_lam(),
            h: default_h(),
            k: default_k(),
            alpha_reason: default_alpha_reason(),
            alpha_copy: default_alpha_copy(),
            rho: default_rho(),
            gamma: default_gamma(),
            seed: default_seed(),
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |msg: String| Err(BackendError::InvalidParams(msg));
        if !self.lam.is_finite() || self.lam <= 0.0 || self.lam > 1.0 {
            return bad(format!("lam must lie in (0, 1], got {}", self.lam));
        }
        if !self.h.is_finite() || !(0.0..=1.0).contains(&self.h) {
            return bad(format!("h must lie in [0, 1], got {}", self.h));
        }
        if !(2..=26).contains(&self.k) {
            return bad(format!("k must lie in 2..=26, got {}", self.k));
        }
        for (name, a) in [("alpha_reason", self.alpha_reason), ("alpha_copy", self.alpha_copy)] {
            if !a.is_finite() || a <= 0.0 || a >= 1.0 {
                return bad(format!("{name} must lie strictly in (0, 1), got {a}"));
            }
        }
        if self.alpha_copy <= self.alpha_reason {
            return bad(format!(
                "alpha_copy ({}) must exceed alpha_reason ({})",
                self.alpha_copy, self.alpha_reason
            ));
        }
        if !self.rho.is_finite() || !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if !self.gamma.is_finite() || !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        Ok(())
    }
}

/// HTTP backend settings for an OpenAI-compatible chat completions endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpParams {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token, if any.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub initial_backoff_ms: u64,
}

fn default_timeout_secs() -> u64 { 60 }
fn default_max_retries() -> u32 { 3 }
fn default_backoff_ms() -> u64 { 250 }

/// Which backend a run talks to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Http(HttpParams),
    Simulated(SimParams),
}

/// Everything the simulator needs to know about the call site.
#[derive(Debug, Clone, Copy)]
pub struct StageContext<'a> {
    pub question: &'a Question,
    pub stage: Stage,
    pub case: CaseConfig,
    pub prompt_class: PromptClass,
    pub temps: StageTemperatures,
}

/// A chat completion backend with a call counter.
pub struct Backend {
    config: BackendConfig,
    client: Option<reqwest::blocking::Client>,
    calls: AtomicU64,
}

impl Backend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        let client = match &config {
            BackendConfig::Simulated(params) => {
                params.validate()?;
                None
            }
            BackendConfig::Http(params) => {
                if params.endpoint.is_empty() || params.model.is_empty() {
                    return Err(BackendError::InvalidParams(
                        "http backend needs a non-empty endpoint and model".to_string(),
                    ));
                }
                let client = reqwest::blocking::Client::builder()
                    .timeout(Duration::from_secs(params.timeout_secs))
                    .build()
                    .map_err(|e| BackendError::Transport(e.to_string()))?;
                Some(client)
            }
        };
        Ok(Self { config, client, calls: AtomicU64::new(0) })
    }

    pub fn kind(&self) -> &'static str {
        match self.config {
            BackendConfig::Http(_) => "http",
            BackendConfig::Simulated(_) => "simulated",
        }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// Number of completions served since construction.
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Produces the assistant turn for `messages` at `temperature`.
    ///
    /// The simulated backend requires `ctx`; the HTTP backend ignores it.
    pub fn complete(
        &self,
        messages: &[ChatMessage],
        temperature: f64,
        ctx: Option<&StageContext<'_>>,
    ) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        match &self.config {
            BackendConfig::Simulated(params) => {
                let ctx = ctx.ok_or(BackendError::SimulationContextMissing {
                    detail: "no question/stage context was supplied".to_string(),
                })?;
                simulate_stage(params, ctx, messages)
            }
            BackendConfig::Http(params) => {
                http_complete(self.client.as_ref().unwrap(), params, messages, temperature)
            }
        }
    }
}

fn http_complete(
    client: &reqwest::blocking::Client,
    params: &HttpParams,
    messages: &[ChatMessage],
    temperature: f64,
) -> Result<String, BackendError> {
    let url = format!("{}/chat/completions", params.endpoint.trim_end_matches('/'));
    let body = serde_json::json!({
        "model": params.model,
        "messages": messages,
        "temperature": temperature,
    });
    let token = match &params.auth_env {
        Some(var) => Some(
            std::env::var(var).map_err(|_| BackendError::MissingToken(var.clone()))?,
        ),
        None => None,
    };

    let mut attempts = 0;
    loop {
        attempts += 1;
        let mut request = client.post(&url).json(&body);
        if let Some(token) = &token {
            request = request.bearer_auth(token);
        }
        let outcome: Result<std::convert::Infallible, BackendError> = match request.send() {
            Err(e) => Err(BackendError::Transport(e.to_string())),
            Ok(response) => {
                let status = response.status();
                if status.as_u16() == 429 {
                    Err(BackendError::RateLimited { attempts })
                } else if status.is_server_error() {
                    let body = truncate(&response.text().unwrap_or_default());
                    Err(BackendError::Http { status: status.as_u16(), body })
                } else if !status.is_success() {
                    let body = truncate(&response.text().unwrap_or_default());
                    return Err(BackendError::Http { status: status.as_u16(), body });
                } else {
                    let parsed: serde_json::Value = response
                        .json()
                        .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
                    let content = parsed["choices"][0]["message"]["content"]
                        .as_str()
                        .ok_or_else(|| {
                            BackendError::MalformedResponse(truncate(&parsed.to_string()))
                        })?;
                    return Ok(content.to_string());
                }
            }
        };
        let err = outcome.unwrap_err();
        if attempts > params.max_retries {
            return Err(err);
        }
        let backoff = params
            .initial_backoff_ms
            .saturating_mul(1u64 << (attempts - 1).min(16))
            .min(10_000);
        std::thread::sleep(Duration::from_millis(backoff));
    }
}

fn truncate(text: &str) -> String {
    const LIMIT: usize = 200;
    if text.len() <= LIMIT {
        text.to_string()
    } else {
        let mut end = LIMIT;
        while !text.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}...", &text[..end])
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One independent stream per (seed, question, stage), so records never
/// depend on scheduling and stages never share draws.
fn stage_rng(seed: u64, question_index: u64, stage: Stage) -> ChaCha12Rng {
    let mut s = splitmix64(seed ^ question_index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    s = splitmix64(s ^ stage.index().wrapping_mul(0xBF58_476D_1CE4_E5B9));
    ChaCha12Rng::seed_from_u64(s)
}

/// The candidate answers for a question, gold first for numeric questions.
fn answer_space(params: &SimParams, question: &Question) -> Result<Vec<AnswerKind>, BackendError> {
    match &question.gold {
        GoldAnswer::Letter(_) => {
            if question.choices.len() < 2 {
                return Err(BackendError::SimulationContextMissing {
                    detail: format!("question {} has fewer than 2 choices", question.id),
                });
            }
            Ok(question
                .choices
                .iter()
                .map(|c| AnswerKind::Letter(c.label))
                .collect())
        }
        GoldAnswer::Numeric(gold) => {
            let mut space = vec![AnswerKind::Numeric(gold.clone())];
            for offset in 1..params.k as i128 {
                let perturbed = match gold.as_str().parse::<i128>() {
                    Ok(v) => CanonicalNumber::parse(&(v + offset).to_string()),
                    Err(_) => CanonicalNumber::parse(&format!("{}{}", gold.as_str(), offset)),
                };
                let perturbed = perturbed.ok_or_else(|| BackendError::SimulationContextMissing {
                    detail: format!("cannot perturb gold answer {gold}"),
                })?;
                space.push(AnswerKind::Numeric(perturbed));
            }
            Ok(space)
        }
    }
}

fn gold_index(question: &Question, space: &[AnswerKind]) -> usize {
    match &question.gold {
        GoldAnswer::Letter(l) => space
            .iter()
            .position(|a| a == &AnswerKind::Letter(*l))
            .expect("gold letter is always one of the choices"),
        GoldAnswer::Numeric(_) => 0,
    }
}

/// Picks index `floor(u * m)` among `candidates`, clamped to the last one.
fn pick_uniform(candidates: &[usize], u: f64) -> usize {
    let m = candidates.len();
    let slot = ((u * m as f64) as usize).min(m - 1);
    candidates[slot]
}

fn stage1_answer_index(params: &SimParams, question: &Question, space_len: usize, gold: usize) -> usize {
    let mut rng = stage_rng(params.seed, question.index as u64, Stage::Initial);
    let u_acc: f64 = rng.gen();
    let u_pick: f64 = rng.gen();
    let ability = AbilityModel::new(params.lam, params.h, space_len as u32)
        .expect("validated parameters construct a valid ability model");
    if u_acc < lemma1_accuracy(ability) {
        gold
    } else {
        let others: Vec<usize> = (0..space_len).filter(|&i| i != gold).collect();
        pick_uniform(&others, u_pick)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Route {
    Native,
    Hallucinated,
    TempFlip,
    Forced,
}

#[derive(Debug, Clone, Copy)]
struct VerifyDraw {
    decision: Decision,
    route: Route,
}

/// The verify-stage decision draw. The native decision is Keep; a no-CoT
/// decision-first stage may hallucinate a coin-flip decision; otherwise
/// temperature can flip Keep to Change; last, a biased prompt forces a
/// surviving Keep to Change at rate gamma (half that when weakly biased).
///
/// Exactly four uniforms are always consumed, so streams stay aligned
/// across prompt sets, cases, and temperatures.
fn stage2_draw(params: &SimParams, ctx: &StageContext<'_>) -> VerifyDraw {
    let mut rng = stage_rng(params.seed, ctx.question.index as u64, Stage::Verify);
    let u_hall: f64 = rng.gen();
    let u_coin: f64 = rng.gen();
    let u_flip: f64 = rng.gen();
    let u_force: f64 = rng.gen();

    let alpha = match ctx.case.order {
        Order::DecisionFirst => params.alpha_reason,
        Order::RationaleFirst => params.alpha_copy,
    };
    let t2 = Temperature::new(ctx.temps.t2).expect("validated temperatures");
    let model = DecisionModel::new(alpha).expect("validated alphas");

    let mut decision = Decision::Keep;
    let mut route = Route::Native;
    let bare_decision_first = !ctx.case.use_cot && ctx.case.order == Order::DecisionFirst;
    if bare_decision_first && u_hall < params.h {
        route = Route::Hallucinated;
        if u_coin >= 0.5 {
            decision = Decision::Change;
        }
    } else if u_flip >= decision_prob(model, t2) {
        route = Route::TempFlip;
        decision = Decision::Change;
    }

    let gamma_eff = match ctx.prompt_class {
        PromptClass::Biased => params.gamma,
        PromptClass::WeaklyBiased => params.gamma / 2.0,
        PromptClass::Fair => 0.0,
    };
    if decision == Decision::Keep && u_force < gamma_eff {
        route = Route::Forced;
        decision = Decision::Change;
    }

    VerifyDraw { decision, route }
}

fn first_assistant(messages: &[ChatMessage]) -> Option<&str> {
    messages
        .iter()
        .find(|m| m.role == Role::Assistant)
        .map(|m| m.content.as_str())
}

fn prior_answer(
    question: &Question,
    messages: &[ChatMessage],
) -> Result<AnswerKind, BackendError> {
    let text = first_assistant(messages).ok_or_else(|| BackendError::SimulationContextMissing {
        detail: "conversation has no assistant turn to verify".to_string(),
    })?;
    let extracted = match question.answer_format() {
        crate::prompts::AnswerFormat::Letter => extract_letter(text),
        crate::prompts::AnswerFormat::Boxed => extract_boxed(text),
    };
    if extracted.kind.is_none() {
        return Err(BackendError::SimulationContextMissing {
            detail: format!(
                "no recoverable answer in the first assistant turn for question {}",
                question.id
            ),
        });
    }
    Ok(extracted.kind)
}

fn render_answer_line(answer: &AnswerKind) -> String {
    match answer {
        AnswerKind::Letter(l) => format!("Final answer: ({l})"),
        AnswerKind::Numeric(n) => format!("Final answer: \\boxed{{{n}}}"),
        AnswerKind::None => unreachable!("simulated answers are always concrete"),
    }
}

fn stage3_answer(
    params: &SimParams,
    ctx: &StageContext<'_>,
    messages: &[ChatMessage],
) -> Result<(AnswerKind, Decision), BackendError> {
    let space = answer_space(params, ctx.question)?;
    let gold = gold_index(ctx.question, &space);
    let prior = prior_answer(ctx.question, messages)?;
    let draw = stage2_draw(params, ctx);

    if draw.decision == Decision::Keep {
        return Ok((prior, Decision::Keep));
    }

    let mut rng = stage_rng(params.seed, ctx.question.index as u64, Stage::Finalize);
    let u_commit: f64 = rng.gen();
    let u_gold: f64 = rng.gen();
    let u_pick: f64 = rng.gen();

    let commits = match draw.route {
        Route::Forced | Route::Hallucinated => true,
        Route::TempFlip => match ctx.case.order {
            // A decision-first change arrives with a rationale written to
            // support it, so the final stage adopts it.
            Order::DecisionFirst => true,
            // A rationale-first change contradicts the reasoning already on
            // the page; adoption needs an independent flip of its own.
            Order::RationaleFirst => {
                let t3 = Temperature::new(ctx.temps.t3).expect("validated temperatures");
                let copy = DecisionModel::new(params.alpha_copy).expect("validated alphas");
                u_commit >= decision_prob(copy, t3)
            }
        },
        Route::Native => unreachable!("native draws always keep"),
    };
    if !commits {
        return Ok((prior, Decision::Change));
    }

    let revised = match draw.route {
        // A genuine reconsideration lands on gold with probability rho,
        // otherwise somewhere among the remaining wrong options.
        Route::TempFlip => {
            if u_gold < params.rho {
                space[gold].clone()
            } else {
                let candidates: Vec<usize> = (0..space.len())
                    .filter(|&i| i != gold && space[i] != prior)
                    .collect();
                if candidates.is_empty() {
                    prior.clone()
                } else {
                    space[pick_uniform(&candidates, u_pick)].clone()
                }
            }
        }
        // Instruction-forced and hallucinated changes behave like pure
        // hallucinations: uniform over every other option, gold included.
        Route::Forced | Route::Hallucinated => {
            let candidates: Vec<usize> =
                (0..space.len()).filter(|&i| space[i] != prior).collect();
            space[pick_uniform(&candidates, u_pick)].clone()
        }
        Route::Native => unreachable!(),
    };
    Ok((revised, Decision::Change))
}

/// Deterministic assistant turn for one stage of the conversation.
pub fn simulate_stage(
    params: &SimParams,
    ctx: &StageContext<'_>,
    messages: &[ChatMessage],
) -> Result<String, BackendError> {
    match ctx.stage {
        Stage::Initial => {
            let space = answer_space(params, ctx.question)?;
            let gold = gold_index(ctx.question, &space);
            let idx = stage1_answer_index(params, ctx.question, space.len(), gold);
            let line = render_answer_line(&space[idx]);
            if ctx.case.use_cot {
                Ok(format!(
                    "Considering each option against what the question asks, the best \
                     supported choice stands out.\n{line}"
                ))
            } else {
                Ok(line)
            }
        }
        Stage::Verify => {
            let draw = stage2_draw(params, ctx);
            let text = match (ctx.case.order, draw.decision) {
                (Order::DecisionFirst, Decision::Keep) => {
                    "The response above provides the most appropriate answer to the question. \
                     Checking the selected option against what is asked confirms the choice."
                }
                (Order::DecisionFirst, Decision::Change) => {
                    "The answer above is incorrect. Checking the selected option against what \
                     is asked points to a different choice."
                }
                (Order::RationaleFirst, Decision::Keep) => {
                    "Walking through the question and the selected option step by step, the \
                     reasoning holds together. Therefore, the judgment is yes."
                }
                (Order::RationaleFirst, Decision::Change) => {
                    "Walking through the question and the selected option step by step, the \
                     reasoning does not hold together. Therefore, the judgment is no."
                }
                _ => unreachable!("draws never return Unclear"),
            };
            Ok(text.to_string())
        }
        Stage::Finalize => {
            let (answer, decision) = stage3_answer(params, ctx, messages)?;
            let line = render_answer_line(&answer);
            match decision {
                Decision::Keep => Ok(format!("The earlier answer stands. {line}")),
                _ => Ok(format!("Revising in light of the review. {line}")),
            }
        }
    }
}
