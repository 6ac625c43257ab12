//! TOML configuration: file values, then `key.path=value` overrides, then
//! defaults for everything left unset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::agent::ActionMode;
use crate::analysis::KlDirection;
use crate::error::{Error, Result};
use crate::sim::EnvConfig;
use crate::trainer::{AgentConfig, EvalConfig, SearchSpec, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Pixels per world unit.
    pub scale: f64,
    pub output_dir: PathBuf,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            scale: 400.0,
            output_dir: PathBuf::from("frames"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub kl_direction: KlDirection,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Seed for evaluation, rendering and analysis runs.
    pub seed: u64,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub trainer: TrainerConfig,
    pub search: SearchSpec,
    pub eval: EvalConfig,
    pub render: RenderConfig,
    pub analysis: AnalysisConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.env.validate_with_prefix("env.")?;
        self.trainer.validate_with_prefix("trainer.")?;
        self.search.validate_with_prefix("search.")?;
        if self.eval.episodes == 0 {
            return Err(Error::Config("eval.episodes: must be at least 1".into()));
        }
        if !(self.render.scale.is_finite() && self.render.scale > 0.0) {
            return Err(Error::Config(format!(
                "render.scale: {} must be > 0",
                self.render.scale
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Defaults as a commented TOML document.
    pub fn reference() -> String {
        let mut out = String::from(
            "# Default configuration. Every key is optional; omitted keys take\n\
             # the values below. [a, b] pairs are inclusive ranges sampled\n\
             # uniformly per episode.\n\
             # eval.action_mode: \"stochastic\" | \"deterministic\"\n\
             # eval.exec: \"parallel\" | \"sequential\"\n\
             # agent.aggregation: \"sum\" | \"mean\"\n\
             # analysis.kl_direction: \"uniform-policy\" | \"policy-uniform\"\n\n",
        );
        out.push_str(&Config::default().to_toml());
        out
    }

    pub fn action_mode(&self) -> ActionMode {
        self.eval.action_mode
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn parse_error(path: &Path, text: &str, e: toml::de::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.span().map_or(0, |s| line_of(text, s.start)),
        msg: e.message().trim().to_string(),
    }
}

fn unknown_keys(user: &Table, reference: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in user {
        let path = format!("{prefix}{k}");
        match (reference.get(k), v) {
            (None, _) => out.push(path),
            (Some(Value::Table(r)), Value::Table(u)) => {
                unknown_keys(u, r, &format!("{path}."), out)
            }
            _ => {}
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn override_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies `key.path=value` assignments on top of a parsed table.
pub fn apply_overrides(table: &mut Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override {o:?} is not key=value")))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Usage(format!(
                "override {o:?} has an empty key segment"
            )));
        }
        let mut node = &mut *table;
        for p in &parts[..parts.len() - 1] {
            let entry = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Table(Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| Error::Usage(format!("override {o:?}: {p} is not a section")))?;
        }
        node.insert(
            parts[parts.len() - 1].to_string(),
            override_value(raw.trim()),
        );
    }
    Ok(())
}

/// Builds a config from TOML text plus overrides. `origin` labels errors.
pub fn config_from_str(text: &str, origin: &Path, overrides: &[String]) -> Result<Config> {
    let mut table: Table = text.parse().map_err(|e| parse_error(origin, text, e))?;
    apply_overrides(&mut table, overrides)?;
    let reference = Table::try_from(Config::default()).expect("defaults serialize");
    let mut unknown = Vec::new();
    unknown_keys(&table, &reference, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(Error::Config(format!(
            "unknown key(s): {}",
            unknown.join(", ")
        )));
    }
    let cfg: Config = Config::deserialize(table)
        .map_err(|e| Error::Config(format!("{}: {}", origin.display(), e.message().trim())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<Config> {
    load_config(path, &[])
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    config_from_str(&text, path, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::Aggregation;
    use crate::sim::{IntSpan, Span};

    fn parse(text: &str) -> Result<Config> {
        config_from_str(text, Path::new("test.toml"), &[])
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse("").unwrap(), Config::default());
    }

    #[test]
    fn gamma_range_error_names_key() {
        let err = parse("[trainer]\ngamma = 1.5\n").unwrap_err().to_string();
        assert!(err.contains("trainer.gamma"), "{err}");
    }

    #[test]
    fn round_trip() {
        let mut cfg = Config {
            seed: 9,
            ..Config::default()
        };
        cfg.env.n_objects = IntSpan(3, 7);
        cfg.env.object_speed = Span(0.0, 0.01);
        cfg.agent.aggregation = Aggregation::Mean;
        cfg.eval.action_mode = ActionMode::Stochastic;
        cfg.analysis.kl_direction = KlDirection::PolicyUniform;
        cfg.search.gamma = vec![0.5];
        let again = parse(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(parse(&Config::reference()).unwrap(), Config::default());
    }

    #[test]
    fn syntax_error_reports_line() {
        let err = parse("seed = 1\n[env]\nspawn_rate = = 2\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let err = parse("[trainer]\ngama = 0.9\n").unwrap_err().to_string();
        assert!(err.contains("trainer.gama"), "{err}");
        let err = parse("colour = 1\n").unwrap_err().to_string();
        assert!(err.contains("colour"), "{err}");
    }

    #[test]
    fn type_errors_are_config_errors() {
        assert!(matches!(
            parse("[trainer]\nt_max = \"x\"\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            parse("[eval]\naction_mode = \"greedy\"\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn three_layer_precedence() {
        let text = "seed = 4\n[trainer]\nlr = 0.002\nbeta = 0.02\n";
        let overrides = vec![
            "trainer.lr=0.003".to_string(),
            "eval.action_mode=stochastic".into(),
        ];
        let cfg = config_from_str(text, Path::new("t.toml"), &overrides).unwrap();
        assert_eq!(cfg.trainer.lr, 0.003);
        assert_eq!(cfg.trainer.beta, 0.02);
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.eval.action_mode, ActionMode::Stochastic);
        assert_eq!(cfg.trainer.gamma, TrainerConfig::default().gamma);
        let bad = config_from_str(text, Path::new("t.toml"), &["trainer.gamma=2".into()]);
        assert!(bad.unwrap_err().to_string().contains("trainer.gamma"));
        assert!(config_from_str("", Path::new("t"), &["nokey".into()]).is_err());
    }

    #[test]
    fn file_errors_carry_path() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("absent.toml");
        let err = parse_config(&missing).unwrap_err().to_string();
        assert!(err.contains("absent.toml"), "{err}");
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[render]\nscale = 10.0\n").unwrap();
        assert_eq!(parse_config(&p).unwrap().render.scale, 10.0);
    }
}
