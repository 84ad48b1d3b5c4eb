//! Solver registration manifest: one TOML file standing in for the
//! registration form.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use solverhub_core::token::SubmissionFields;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(rename = "type")]
    pub solver_type: String,
    pub id: String,
    pub name: String,
    pub password: String,
    pub contact: String,
    #[serde(default)]
    pub background_url: Option<String>,
    pub stations: Vec<StationEntry>,
    pub tokens: Text,
    #[serde(default)]
    pub restrictions: Vec<String>,
    #[serde(default)]
    pub email_help: Option<Text>,
    #[serde(default)]
    pub tool_help: Option<Text>,
    #[serde(default)]
    pub web_help: Option<Text>,
    #[serde(default)]
    pub web_samples: Option<Text>,
    #[serde(default, rename = "abstract")]
    pub abstract_text: Option<Text>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationEntry {
    pub host: String,
    #[serde(default = "one")]
    pub capacity: u32,
}

fn one() -> u32 {
    1
}

/// Inline text, or `{ file = "path" }` relative to the manifest.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Text {
    Inline(String),
    File { file: PathBuf },
}

impl Text {
    fn read(&self, base: &Path) -> Result<String> {
        match self {
            Text::Inline(s) => Ok(s.clone()),
            Text::File { file } => {
                let path = base.join(file);
                fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))
            }
        }
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text =
            fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("{}", path.display()))
    }

    /// Field files for an ADMIN:ADDSOLVER submission, keyed by target name.
    pub fn fields(&self, base: &Path) -> Result<SubmissionFields> {
        if self.stations.is_empty() {
            bail!("the manifest lists no stations");
        }
        let mut f = SubmissionFields {
            solver_type: "ADMIN".into(),
            solver_id: "ADDSOLVER".into(),
            ..SubmissionFields::default()
        };
        let mut put = |target: &str, value: String| {
            f.sections.insert(target.to_string(), value.into_bytes());
        };
        put("solver_type", self.solver_type.clone());
        put("solver_id", self.id.clone());
        put("solver_name", self.name.clone());
        put("password", self.password.clone());
        put("contact", self.contact.clone());
        if let Some(url) = &self.background_url {
            put("background_url", url.clone());
        }
        put(
            "stations",
            self.stations
                .iter()
                .map(|s| format!("{} {}\n", s.host, s.capacity))
                .collect(),
        );
        put("tokens", self.tokens.read(base)?);
        if !self.restrictions.is_empty() {
            put(
                "restrictions",
                self.restrictions.iter().map(|r| format!("{r}\n")).collect(),
            );
        }
        for (target, text) in [
            ("email-help", &self.email_help),
            ("tool-help", &self.tool_help),
            ("web-help", &self.web_help),
            ("web-samples", &self.web_samples),
            ("abstract", &self.abstract_text),
        ] {
            if let Some(t) = text {
                put(target, t.read(base)?);
            }
        }
        Ok(f)
    }
}
