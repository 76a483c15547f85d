use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use super::CliError;

/// Every key a config file or `--set` may name.
pub const KNOWN_KEYS: &[&str] = &[
    "generator.seed",
    "generator.patients",
    "generator.concepts",
    "generator.order",
    "generator.determinism",
    "generator.groups",
    "generator.age_start_min",
    "generator.age_start_max",
    "generator.age_step_min",
    "generator.age_step_max",
    "generator.concepts_min",
    "generator.concepts_max",
    "data.min_frequency",
    "data.max_tokens",
    "data.min_tokens",
    "data.min_confirmations",
    "data.split_seed",
    "model.family",
    "model.variant",
    "model.layers",
    "model.heads",
    "model.d_model",
    "model.d_ff",
    "model.max_seq",
    "model.dropout",
    "model.embeddings",
    "model.seed",
    "train.learning_rate",
    "train.weight_decay",
    "train.batch_size",
    "train.warmup_steps",
    "train.max_steps",
    "train.seed",
    "train.eval_every",
    "train.grad_clip",
    "boc.learning_rate",
    "boc.weight_decay",
    "boc.epochs",
    "boc.batch_size",
    "boc.seed",
    "eval.split",
    "eval.n",
    "eval.k",
    "serve.bind",
    "serve.max_options",
    "serve.max_context",
    "serve.body_limit",
    "serve.labels",
    "serve.static_dir",
];

/// Flat `section.key = value` settings: file values, overridden by flags, with
/// every value actually read recorded for the echo.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    given: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut c = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> Result<(), CliError> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(CliError::Usage(format!("unknown config key {key}")));
        }
        self.given.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Sets `key` when the flag was given.
    pub fn flag<V: Display>(&mut self, key: &str, value: Option<V>) -> Result<(), CliError> {
        match value {
            Some(v) => self.set(key, v),
            None => Ok(()),
        }
    }

    /// Applies `key=value` overrides.
    pub fn overrides(&mut self, pairs: &[String]) -> Result<(), CliError> {
        for p in pairs {
            let (k, v) = p.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {p}")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, default: T) -> Result<T, CliError> {
        debug_assert!(KNOWN_KEYS.contains(&key), "{key}");
        let value = match self.given.get(key) {
            Some(raw) => raw.parse().map_err(|_| CliError::Usage(format!("invalid value {raw:?} for {key}")))?,
            None => default,
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Optional string value; absent keys are echoed as empty.
    pub fn get_opt(&mut self, key: &str) -> Option<String> {
        let v = self.given.get(key).filter(|v| !v.is_empty()).cloned();
        self.resolved.insert(key.to_string(), v.clone().unwrap_or_default());
        v
    }

    pub fn get_list(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>, CliError> {
        let joined = default.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let raw: String = self.get(key, joined)?;
        raw.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse().map_err(|_| CliError::Usage(format!("invalid list {raw:?} for {key}"))))
            .collect()
    }

    /// The resolved settings as `key = value` lines, sorted by key.
    pub fn echo(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flag_precedence() {
        let mut c = RunConfig::parse("# comment\ntrain.max_steps = 10\ntrain.seed=3 # trailing\n").unwrap();
        c.flag("train.max_steps", Some(20)).unwrap();
        assert_eq!(c.get("train.max_steps", 5u64).unwrap(), 20);
        assert_eq!(c.get("train.seed", 0u64).unwrap(), 3);
        assert_eq!(c.get("train.batch_size", 32usize).unwrap(), 32);
        assert_eq!(c.echo(), "train.batch_size = 32\ntrain.max_steps = 20\ntrain.seed = 3\n");
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        assert!(matches!(RunConfig::parse("train.nope = 1"), Err(CliError::Usage(_))));
        assert!(matches!(RunConfig::parse("just text"), Err(CliError::Usage(_))));
        let mut c = RunConfig::parse("train.max_steps = many").unwrap();
        assert!(matches!(c.get("train.max_steps", 1u64), Err(CliError::Usage(_))));
    }

    #[test]
    fn lists() {
        let mut c = RunConfig::parse("eval.n = 1, 2,10").unwrap();
        assert_eq!(c.get_list("eval.n", &[1, 3, 5]).unwrap(), vec![1, 2, 10]);
        assert_eq!(c.get_list("eval.k", &[0, 10]).unwrap(), vec![0, 10]);
    }
}
