//! TOML configuration shared by every subcommand. Loading reports every
//! unknown key and type error in one pass, then every semantic violation
//! relevant to the subcommand.

use std::path::Path;

use qdistill::augment::{DEFAULT_TARGET_LANGUAGES, DEFAULT_TARGET_PER_LANGUAGE, SUPPORTED_LANGUAGES};
use qdistill::bench::{BenchConfig, StorageSpec, MIN_REPETITIONS, MIN_WARMUP};
use qdistill::experiment::{FixtureSpec, GridCell, Recipe};
use qdistill::trainer::RunConfig;
use serde::{Deserialize, Serialize};
use serde_path_to_error::Segment;
use toml::Value;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub fixture: FixtureSpec,
    pub run: RunConfig,
    /// Fractions in (0, 1].
    pub sweep_fractions: Vec<f64>,
    pub grid: Vec<GridCell>,
    pub prepare: PrepareConfig,
    pub bench: BenchSection,
    /// Applied to `[run]` at load time, then cleared, so resolved configs
    /// never carry it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_preset: Option<RunPreset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunPreset {
    /// Language-augmented training set: 10 epochs at peak_lr 3e-4.
    Multilingual,
}

impl Default for Config {
    fn default() -> Self {
        let r = Recipe::default();
        Self {
            fixture: r.fixture,
            run: r.run,
            sweep_fractions: r.sweep_fractions,
            grid: r.grid,
            prepare: PrepareConfig::default(),
            bench: BenchSection::default(),
            run_preset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    pub val_frac: f64,
    pub split_seed: u64,
    pub merge_seed: u64,
    pub target_languages: Vec<String>,
    pub target_per_language: usize,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            val_frac: 0.02,
            split_seed: 42,
            merge_seed: 42,
            target_languages: DEFAULT_TARGET_LANGUAGES.iter().map(|s| s.to_string()).collect(),
            target_per_language: DEFAULT_TARGET_PER_LANGUAGE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Index sizes for cosine scoring.
    pub cosine_docs: Vec<usize>,
    pub cosine_dim: usize,
    pub maxsim_docs: usize,
    pub maxsim_dim: usize,
    pub tokens_per_doc: usize,
    pub query_tokens: usize,
    pub top_k: usize,
    pub sample_queries: Vec<String>,
    pub storage: Vec<StorageSpec>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            repetitions: MIN_REPETITIONS,
            warmup: MIN_WARMUP,
            seed: 42,
            cosine_docs: vec![1_000, 10_000],
            cosine_dim: 128,
            maxsim_docs: 1_000,
            maxsim_dim: 16,
            tokens_per_doc: 1_000,
            query_tokens: 16,
            top_k: 10,
            sample_queries: vec![
                "what was the total revenue reported in the third quarter".into(),
                "which figure shows the rainfall for march".into(),
                "how many employees work at the berlin site".into(),
            ],
            storage: vec![
                StorageSpec::single_vector_f32(1_000_000, 2048),
                StorageSpec::multi_vector_f16(1_000_000, 128, 1000),
                StorageSpec::multi_vector_f16(1_000_000, 320, 1280),
            ],
        }
    }
}

impl BenchSection {
    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            repetitions: self.repetitions,
            warmup: self.warmup,
        }
    }
}

/// Which parts of the config a subcommand reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Fixture,
    Run,
    FixtureRun,
    Prepare,
    Bench,
    None,
}

impl Config {
    pub fn recipe(&self) -> Recipe {
        Recipe {
            fixture: self.fixture.clone(),
            run: self.run.clone(),
            sweep_fractions: self.sweep_fractions.clone(),
            grid: self.grid.clone(),
        }
    }

    /// Overrides every seed in the config.
    pub fn set_seed(&mut self, seed: u64) {
        self.fixture.teacher.seed = seed;
        self.fixture.split_seed = seed;
        self.run.seed = seed;
        self.prepare.split_seed = seed;
        self.prepare.merge_seed = seed;
        self.bench.seed = seed;
    }

    pub fn violations(&self, scope: Scope) -> Vec<String> {
        let mut v = Vec::new();
        match scope {
            Scope::FixtureRun => v.extend(self.recipe().violations()),
            Scope::Fixture => {
                let mut r = self.recipe();
                r.run = RunConfig {
                    encoder: qdistill::EncoderConfig {
                        output_dim: r.fixture.teacher.dim,
                        ..Default::default()
                    },
                    ..Default::default()
                };
                v.extend(r.violations());
            }
            Scope::Run => v.extend(self.run.violations().into_iter().map(|s| format!("run: {s}"))),
            Scope::Prepare => {
                let p = &self.prepare;
                if !(p.val_frac > 0.0 && p.val_frac < 1.0) {
                    v.push(format!("prepare.val_frac must be in (0, 1), got {}", p.val_frac));
                }
                for l in &p.target_languages {
                    if !SUPPORTED_LANGUAGES.contains(&l.as_str()) {
                        v.push(format!("prepare.target_languages: unsupported language {l:?}"));
                    }
                }
            }
            Scope::Bench => {
                let b = &self.bench;
                if let Err(e) = b.bench_config().validate() {
                    v.push(format!("bench: {e}"));
                }
                for (name, n) in [
                    ("cosine_dim", b.cosine_dim),
                    ("maxsim_dim", b.maxsim_dim),
                    ("tokens_per_doc", b.tokens_per_doc),
                    ("query_tokens", b.query_tokens),
                    ("top_k", b.top_k),
                ] {
                    if n == 0 {
                        v.push(format!("bench.{name} must be positive"));
                    }
                }
                if b.sample_queries.is_empty() {
                    v.push("bench.sample_queries must not be empty".into());
                }
                if let Err(e) = self.run.encoder.validate() {
                    v.push(format!("run.encoder: {e}"));
                }
            }
            Scope::None => {}
        }
        v
    }
}

/// Reads `path` (or the defaults when absent), applies the seed override and
/// validates for `scope`. All problems are reported together.
pub fn load(path: Option<&Path>, seed: Option<u64>, scope: Scope) -> Result<Config, CliError> {
    let mut config = match path {
        None => Config::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            parse(&text)?
        }
    };
    if let Some(s) = seed {
        config.set_seed(s);
    }
    let v = config.violations(scope);
    if v.is_empty() {
        Ok(config)
    } else {
        Err(CliError::Config(v))
    }
}

pub fn parse(text: &str) -> Result<Config, CliError> {
    let mut value: Value = toml::from_str(text).map_err(|e| CliError::Config(vec![e.to_string()]))?;
    let mut problems = Vec::new();
    for _ in 0..256 {
        match serde_path_to_error::deserialize::<_, Config>(value.clone()) {
            Ok(c) if problems.is_empty() => return apply_preset(c, &value),
            Ok(_) => return Err(CliError::Config(problems)),
            Err(e) => {
                let message = e.inner().to_string();
                let segments: Vec<Segment> = e.path().iter().cloned().collect();
                let field = unknown_field(&message);
                let at = e.path().to_string();
                problems.push(match &field {
                    Some(f) if at == "." => format!("unknown key `{f}`"),
                    Some(f) => format!("{at}: unknown key `{f}`"),
                    None => format!("{at}: {message}"),
                });
                if !remove(&mut value, &segments, field.as_deref()) {
                    return Err(CliError::Config(problems));
                }
            }
        }
    }
    Err(CliError::Config(problems))
}

fn apply_preset(mut config: Config, raw: &Value) -> Result<Config, CliError> {
    let Some(preset) = config.run_preset.take() else {
        return Ok(config);
    };
    let set: Vec<String> = ["epochs", "peak_lr"]
        .into_iter()
        .filter(|k| raw.get("run").and_then(|r| r.get(k)).is_some())
        .map(|k| format!("run.{k} conflicts with run_preset = {preset:?}"))
        .collect();
    if !set.is_empty() {
        return Err(CliError::Config(set));
    }
    match preset {
        RunPreset::Multilingual => config.run = config.run.multilingual(),
    }
    Ok(config)
}

fn unknown_field(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

/// Drops the offending key so deserialization can continue past it.
fn remove(root: &mut Value, path: &[Segment], field: Option<&str>) -> bool {
    if let Some(f) = field {
        // The unknown key lives in the deepest table on the path that has it.
        for depth in (0..=path.len()).rev() {
            if let Some(Value::Table(t)) = navigate(root, &path[..depth]) {
                if t.remove(f).is_some() {
                    return true;
                }
            }
        }
        return false;
    }
    let Some((last, parent)) = path.split_last() else {
        return false;
    };
    match (navigate(root, parent), last) {
        (Some(Value::Table(t)), Segment::Map { key }) => t.remove(key).is_some(),
        (Some(Value::Array(a)), Segment::Seq { index }) if *index < a.len() => {
            a.remove(*index);
            true
        }
        _ => remove(root, parent, None),
    }
}

fn navigate<'a>(root: &'a mut Value, path: &[Segment]) -> Option<&'a mut Value> {
    let mut cur = root;
    for seg in path {
        cur = match (seg, cur) {
            (Segment::Map { key }, Value::Table(t)) => t.get_mut(key)?,
            (Segment::Seq { index }, Value::Array(a)) => a.get_mut(*index)?,
            (Segment::Enum { .. } | Segment::Unknown, v) => v,
            _ => return None,
        };
    }
    Some(cur)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default() {
        assert_eq!(parse("").unwrap(), Config::default());
        assert!(Config::default().violations(Scope::FixtureRun).is_empty());
    }

    #[test]
    fn every_unknown_key_is_reported() {
        let text = r#"
            epoch = 3
            [run]
            peak_lrr = 1e-3
            [run.encoder]
            hiden_dim = 4
            [fixture.teacher]
            dimm = 8
        "#;
        let CliError::Config(v) = parse(text).unwrap_err() else {
            panic!()
        };
        assert_eq!(v.len(), 4, "{v:?}");
        for key in ["epoch", "peak_lrr", "hiden_dim", "dimm"] {
            assert!(v.iter().any(|m| m.contains(key)), "{key} missing from {v:?}");
        }
    }

    #[test]
    fn type_errors_and_unknown_keys_together() {
        let text = r#"
            [run]
            epochs = "many"
            optimizer = { kind = "adam", beta1 = 0.9, beta2 = 0.999, eps = 1e-8, momentum = 1 }
            [[grid]]
            label = "x"
            loss = { objective = "align", lambda_align = 1.0, weight = 2 }
        "#;
        let CliError::Config(v) = parse(text).unwrap_err() else {
            panic!()
        };
        assert!(v.iter().any(|m| m.contains("run.epochs")), "{v:?}");
        assert!(v.iter().any(|m| m.contains("momentum")), "{v:?}");
        assert!(v.iter().any(|m| m.contains("weight")), "{v:?}");
    }

    #[test]
    fn semantic_violations_are_collected() {
        let mut c = Config::default();
        c.run.batch_size = 0;
        c.run.peak_lr = -1.0;
        c.fixture.val_frac = 2.0;
        let v = c.violations(Scope::FixtureRun);
        assert!(v.len() >= 3, "{v:?}");
    }

    #[test]
    fn seed_override_reaches_every_seed() {
        let mut c = Config::default();
        c.set_seed(7);
        assert_eq!(
            [c.run.seed, c.fixture.teacher.seed, c.fixture.split_seed, c.prepare.merge_seed, c.bench.seed],
            [7; 5]
        );
    }

    #[test]
    fn multilingual_preset_is_resolved() {
        let c = parse("run_preset = \"multilingual\"\n[run]\nbatch_size = 8\n").unwrap();
        assert_eq!((c.run.epochs, c.run.peak_lr, c.run.batch_size), (10, 3e-4, 8));
        assert_eq!(c.run_preset, None);
        let CliError::Config(v) = parse("run_preset = \"multilingual\"\n[run]\nepochs = 3\n").unwrap_err() else {
            panic!()
        };
        assert!(v[0].contains("run.epochs"), "{v:?}");
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let mut c = Config::default();
        c.run.optimizer = qdistill::optim::OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        c.fixture.teacher.noise_sigma = 0.1;
        let back = parse(&toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn shipped_recipe_parses() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../recipes/paper_grid.toml");
        let c = parse(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert!(c.violations(Scope::FixtureRun).is_empty());
        assert_eq!(c.grid.len(), 6);
    }
}
