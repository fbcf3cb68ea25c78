use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use scaffold_core::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// `scicite`, `acl-arc`, or comma-separated class names.
    #[serde(default = "default_labels")]
    pub labels: String,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: Option<PathBuf>,
    pub worthiness: Option<PathBuf>,
    pub section: Option<PathBuf>,
    pub word_vectors: Option<PathBuf>,
    pub sidecar: Option<PathBuf>,
}

fn default_labels() -> String {
    "scicite".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Reads a TOML config, applies `--dotted.key value` overrides and
    /// resolves relative paths against the config file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut table: toml::Table =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        for (key, value) in parse_overrides(overrides)? {
            set_dotted(&mut table, &key, value)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        fix(&mut d.train);
        fix(&mut d.dev);
        for p in [
            &mut d.test,
            &mut d.worthiness,
            &mut d.section,
            &mut d.word_vectors,
            &mut d.sidecar,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output.dir);
    }

    /// Every referenced input must exist before any work starts.
    pub fn check_inputs(&self) -> anyhow::Result<()> {
        let d = &self.data;
        let inputs = [Some(&d.train), Some(&d.dev), d.test.as_ref(), d.worthiness.as_ref(), d.section.as_ref(), d.word_vectors.as_ref(), d.sidecar.as_ref()];
        for p in inputs.into_iter().flatten() {
            if !p.is_file() {
                bail!("input file {} does not exist", p.display());
            }
        }
        if self.train.lambda_worthiness > 0.0 && d.worthiness.is_none() {
            bail!("train.lambda_worthiness > 0 but data.worthiness is not set");
        }
        if self.train.lambda_section > 0.0 && d.section.is_none() {
            bail!("train.lambda_section > 0 but data.section is not set");
        }
        Ok(())
    }
}

/// Pairs `--a.b value` or `--a.b=value` into `(key, value)`.
pub fn parse_overrides(args: &[String]) -> anyhow::Result<Vec<(String, toml::Value)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--") else {
            bail!("unexpected argument {arg:?}; overrides look like --train.seed 7");
        };
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .with_context(|| format!("override --{key} needs a value"))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((key, parse_value(&raw)));
    }
    Ok(out)
}

/// TOML literal when it parses as one, otherwise a plain string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> anyhow::Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).context("empty override key")?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override {key}: {p} is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
