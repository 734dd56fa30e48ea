//! Run configuration files and the flag-override merge.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::backend::{BackendConfig, HttpParams, SimParams, StageTemperatures};
use crate::pipeline::{DatasetSource, RunConfig};
use crate::prompts::{CaseConfig, PromptSetId};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// The TOML run configuration. Every section and field is optional; every
/// command-line flag has an equivalent here, and flags win on conflict.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub prompts: PromptsSection,
    #[serde(default)]
    pub temperatures: TemperaturesSection,
    #[serde(default)]
    pub dataset: Option<DatasetSection>,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    #[serde(default)]
    pub kind: Option<String>,
    #[serde(default)]
    pub sim: Option<SimParams>,
    #[serde(default)]
    pub http: Option<HttpParams>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptsSection {
    #[serde(default)]
    pub set: Option<u8>,
    #[serde(default)]
    pub case: Option<u8>,
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperaturesSection {
    #[serde(default)]
    pub t1: Option<f64>,
    #[serde(default)]
    pub t2: Option<f64>,
    #[serde(default)]
    pub t3: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: String,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub first_n: Option<usize>,
    #[serde(default)]
    pub count: Option<usize>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub save_transcripts: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub parallelism: Option<usize>,
    #[serde(default)]
    pub freeze_stage1: Option<PathBuf>,
    #[serde(default)]
    pub system_prompt: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&raw).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub set: Option<u8>,
    pub case: Option<u8>,
    pub t1: Option<f64>,
    pub t2: Option<f64>,
    pub t3: Option<f64>,
    pub temp: Option<f64>,
    pub freeze_stage1: Option<PathBuf>,
    pub first_n: Option<usize>,
    pub backend: Option<String>,
    pub seed: Option<u64>,
    pub parallel: Option<usize>,
    pub out: Option<PathBuf>,
    pub save_transcripts: bool,
}

fn backend_from(file: &FileConfig, overrides: &Overrides) -> Result<BackendConfig, ConfigError> {
    let kind = overrides
        .backend
        .clone()
        .or_else(|| file.backend.kind.clone())
        .unwrap_or_else(|| "sim".to_string());
    match kind.as_str() {
        "sim" | "simulated" => {
            let mut params = file.backend.sim.unwrap_or_default();
            if let Some(seed) = overrides.seed {
                params.seed = seed;
            }
            Ok(BackendConfig::Simulated(params))
        }
        "http" => {
            let params = file.backend.http.clone().ok_or_else(|| {
                ConfigError::Invalid(
                    "the http backend needs a [backend.http] section with endpoint and model"
                        .to_string(),
                )
            })?;
            Ok(BackendConfig::Http(params))
        }
        other => Err(ConfigError::Invalid(format!(
            "unknown backend kind {other:?}; expected \"sim\" or \"http\""
        ))),
    }
}

fn dataset_from(file: &FileConfig, overrides: &Overrides) -> Result<DatasetSource, ConfigError> {
    let Some(section) = &file.dataset else {
        if overrides.first_n.is_some() {
            return Err(ConfigError::Invalid(
                "--first-n needs a [dataset] section naming a file".to_string(),
            ));
        }
        return Ok(DatasetSource::Synthetic { count: 200, k: 5, seed: 7 });
    };
    let first_n = overrides.first_n.or(section.first_n);
    let need_path = || {
        section.path.clone().ok_or_else(|| {
            ConfigError::Invalid(format!("dataset kind {:?} needs a path", section.kind))
        })
    };
    match section.kind.as_str() {
        "commonsense_qa" => Ok(DatasetSource::CommonsenseQa { path: need_path()?, first_n }),
        "gsm8k" => Ok(DatasetSource::Gsm8k { path: need_path()?, first_n }),
        "synthetic" => {
            if first_n.is_some() {
                return Err(ConfigError::Invalid(
                    "first_n does not apply to synthetic datasets; set count instead".to_string(),
                ));
            }
            Ok(DatasetSource::Synthetic {
                count: section.count.unwrap_or(200),
                k: section.k.unwrap_or(5),
                seed: section.seed.unwrap_or(7),
            })
        }
        other => Err(ConfigError::Invalid(format!(
            "unknown dataset kind {other:?}; expected \"commonsense_qa\", \"gsm8k\", or \"synthetic\""
        ))),
    }
}

/// Merges the file with the overrides into a runnable configuration.
pub fn build_run_config(
    file: &FileConfig,
    overrides: &Overrides,
) -> Result<RunConfig, ConfigError> {
    let set_number = overrides.set.or(file.prompts.set).unwrap_or(3);
    let set = PromptSetId::from_number(set_number)
        .ok_or_else(|| ConfigError::Invalid(format!("unknown prompt set {set_number}")))?;
    let case_number = overrides.case.or(file.prompts.case).unwrap_or(1);
    let case = CaseConfig::from_number(case_number)
        .ok_or_else(|| ConfigError::Invalid(format!("unknown case {case_number}")))?;

    let base = overrides.temp;
    let temps = StageTemperatures {
        t1: overrides.t1.or(base).or(file.temperatures.t1).unwrap_or(0.0),
        t2: overrides.t2.or(base).or(file.temperatures.t2).unwrap_or(0.0),
        t3: overrides.t3.or(base).or(file.temperatures.t3).unwrap_or(0.0),
    };

    Ok(RunConfig {
        backend: backend_from(file, overrides)?,
        set,
        case,
        temps,
        dataset: dataset_from(file, overrides)?,
        frozen_stage1: overrides
            .freeze_stage1
            .clone()
            .or_else(|| file.run.freeze_stage1.clone()),
        parallelism: overrides
            .parallel
            .or(file.run.parallelism)
            .unwrap_or(1),
        output: overrides.out.clone().or_else(|| file.output.path.clone()),
        save_transcripts: overrides.save_transcripts
            || file.output.save_transcripts.unwrap_or(false),
        system_prompt: file.run.system_prompt.clone(),
        prompts_dir: file.prompts.dir.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::Order;

    fn parse(toml_text: &str) -> FileConfig {
        toml::from_str(toml_text).unwrap()
    }

    #[test]
    fn empty_config_yields_simulated_defaults() {
        let config = build_run_config(&FileConfig::default(), &Overrides::default()).unwrap();
        assert!(matches!(config.backend, BackendConfig::Simulated(_)));
        assert_eq!(config.set, PromptSetId::Set3);
        assert_eq!(config.case.number(), 1);
        assert_eq!(config.temps, StageTemperatures::uniform(0.0));
        assert!(matches!(config.dataset, DatasetSource::Synthetic { .. }));
        assert_eq!(config.parallelism, 1);
        assert!(!config.save_transcripts);
    }

    #[test]
    fn full_file_round_trips() {
        let file = parse(
            r#"
            [backend]
            kind = "sim"

            [backend.sim]
            lam = 0.7
            seed = 99

            [prompts]
            set = 1
            case = 1

            [temperatures]
            t2 = 0.5
            t3 = 0.5

            [dataset]
            kind = "synthetic"
            count = 50
            k = 4
            seed = 3

            [output]
            path = "records.jsonl"
            save_transcripts = true

            [run]
            parallelism = 8
            "#,
        );
        let config = build_run_config(&file, &Overrides::default()).unwrap();
        let BackendConfig::Simulated(params) = &config.backend else { panic!() };
        assert_eq!(params.lam, 0.7);
        assert_eq!(params.seed, 99);
        assert_eq!(params.h, 0.1);
        assert_eq!(config.set, PromptSetId::Set1);
        assert_eq!(config.temps, StageTemperatures { t1: 0.0, t2: 0.5, t3: 0.5 });
        assert_eq!(
            config.dataset,
            DatasetSource::Synthetic { count: 50, k: 4, seed: 3 }
        );
        assert_eq!(config.output.as_deref(), Some(Path::new("records.jsonl")));
        assert!(config.save_transcripts);
        assert_eq!(config.parallelism, 8);
    }

    #[test]
    fn overrides_beat_the_file() {
        let file = parse(
            r#"
            [prompts]
            set = 1
            case = 3

            [temperatures]
            t1 = 0.2
            t2 = 0.2
            t3 = 0.2

            [run]
            parallelism = 2
            "#,
        );
        let overrides = Overrides {
            set: Some(2),
            case: Some(2),
            temp: Some(1.0),
            t3: Some(0.0),
            seed: Some(1234),
            parallel: Some(16),
            out: Some(PathBuf::from("other.jsonl")),
            save_transcripts: true,
            ..Overrides::default()
        };
        let config = build_run_config(&file, &overrides).unwrap();
        assert_eq!(config.set, PromptSetId::Set2);
        assert_eq!(config.case.order, Order::RationaleFirst);
        assert_eq!(config.temps, StageTemperatures { t1: 1.0, t2: 1.0, t3: 0.0 });
        let BackendConfig::Simulated(params) = &config.backend else { panic!() };
        assert_eq!(params.seed, 1234);
        assert_eq!(config.parallelism, 16);
        assert_eq!(config.output.as_deref(), Some(Path::new("other.jsonl")));
        assert!(config.save_transcripts);
    }

    #[test]
    fn http_backend_requires_its_section() {
        let overrides = Overrides {
            backend: Some("http".to_string()),
            ..Overrides::default()
        };
        let err = build_run_config(&FileConfig::default(), &overrides).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));

        let file = parse(
            r#"
            [backend]
            kind = "http"

            [backend.http]
            endpoint = "http://localhost:8000/v1"
            model = "local-model"
            auth_env = "MY_TOKEN"
            "#,
        );
        let config = build_run_config(&file, &Overrides::default()).unwrap();
        let BackendConfig::Http(params) = &config.backend else { panic!() };
        assert_eq!(params.endpoint, "http://localhost:8000/v1");
        assert_eq!(params.model, "local-model");
        assert_eq!(params.auth_env.as_deref(), Some("MY_TOKEN"));
        assert_eq!(params.max_retries, 3);
    }

    #[test]
    fn unknown_keys_and_kinds_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[prompts]\nsets = 1\n").is_err());
        let mut file = FileConfig::default();
        file.dataset = Some(DatasetSection {
            kind: "mystery".to_string(),
            path: None,
            first_n: None,
            count: None,
            k: None,
            seed: None,
        });
        assert!(matches!(
            build_run_config(&file, &Overrides::default()),
            Err(ConfigError::Invalid(_))
        ));
        let overrides = Overrides {
            backend: Some("grpc".to_string()),
            ..Overrides::default()
        };
        assert!(matches!(
            build_run_config(&FileConfig::default(), &overrides),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn file_datasets_require_paths_and_reject_stray_flags() {
        let file = parse("[dataset]\nkind = \"gsm8k\"\n");
        assert!(matches!(
            build_run_config(&file, &Overrides::default()),
            Err(ConfigError::Invalid(_))
        ));
        let file = parse("[dataset]\nkind = \"synthetic\"\ncount = 10\n");
        let overrides = Overrides { first_n: Some(5), ..Overrides::default() };
        assert!(matches!(
            build_run_config(&file, &overrides),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn first_n_override_applies_to_file_datasets() {
        let file = parse("[dataset]\nkind = \"commonsense_qa\"\npath = \"dev.jsonl\"\n");
        let overrides = Overrides { first_n: Some(25), ..Overrides::default() };
        let config = build_run_config(&file, &overrides).unwrap();
        assert_eq!(
            config.dataset,
            DatasetSource::CommonsenseQa { path: PathBuf::from("dev.jsonl"), first_n: Some(25) }
        );
    }
}
