//! Replay of precomputed accuracies from a CSV file with header
//! `architecture,accuracy`.
//!
//! Architecture strings contain commas (`C(3,64)-SM`). They may be quoted;
//! unquoted rows are also accepted since the accuracy is always the last
//! field.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use thiserror::Error;

use crate::arch::{ArchState, SpaceConfig};

use super::surrogate::{surrogate_reward, SurrogateConfig};
use super::{Backend, BackendResult, EvalError, Source, WarmStart};

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("cannot read table: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed table: {0}")]
    Csv(#[from] csv::Error),
    #[error("table header must be `architecture,accuracy`, got `{0}`")]
    Header(String),
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("line {line}: duplicate architecture `{architecture}`")]
    Duplicate { line: u64, architecture: String },
    #[error("architecture `{0}` not in table")]
    Missing(String),
}

#[derive(Clone, Debug)]
pub struct TabularBackend {
    table: HashMap<String, f64>,
    /// Used for missing keys instead of failing.
    fallback: Option<SurrogateConfig>,
}

impl TabularBackend {
    pub fn from_path(path: &Path, space: &SpaceConfig) -> Result<Self, TabularError> {
        Self::from_reader(std::fs::File::open(path)?, space)
    }

    /// Parses a table. Keys are normalized to canonical strings and must
    /// describe terminal architectures.
    pub fn from_reader<R: Read>(reader: R, space: &SpaceConfig) -> Result<Self, TabularError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["architecture", "accuracy"] {
            return Err(TabularError::Header(header.iter().collect::<Vec<_>>().join(",")));
        }
        let mut table = HashMap::new();
        for row in rdr.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line());
            let bad = |message: String| TabularError::Row { line, message };
            if row.len() < 2 {
                return Err(bad(format!("expected 2 fields, found {}", row.len())));
            }
            let fields: Vec<&str> = row.iter().collect();
            let (acc_text, arch_parts) = fields.split_last().expect("at least two fields");
            let arch_text = arch_parts.join(",");
            let state = ArchState::parse(&arch_text, space).map_err(|e| bad(e.to_string()))?;
            if !state.is_terminal() {
                return Err(bad(format!("`{arch_text}` does not end with SM")));
            }
            let accuracy: f64 = acc_text
                .parse()
                .map_err(|_| bad(format!("accuracy `{acc_text}` is not a number")))?;
            if !(0.0..=1.0).contains(&accuracy) {
                return Err(bad(format!("accuracy {accuracy} outside [0, 1]")));
            }
            let key = state.canonical_string();
            if table.insert(key.clone(), accuracy).is_some() {
                return Err(TabularError::Duplicate { line, architecture: key });
            }
        }
        Ok(Self { table, fallback: None })
    }

    pub fn with_fallback(mut self, fallback: SurrogateConfig) -> Self {
        self.fallback = Some(fallback);
        self
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn get(&self, canonical: &str) -> Option<f64> {
        self.table.get(canonical).copied()
    }
}

impl Backend for TabularBackend {
    fn name(&self) -> &'static str {
        "tabular"
    }

    fn evaluate(&mut self, state: &ArchState, _: Option<&WarmStart>) -> Result<BackendResult, EvalError> {
        let key = state.canonical_string();
        let (accuracy, source) = match (self.table.get(&key), &self.fallback) {
            (Some(&acc), _) => (acc, Source::Tabular),
            (None, Some(cfg)) => (surrogate_reward(state, cfg), Source::Surrogate),
            (None, None) => return Err(TabularError::Missing(key).into()),
        };
        Ok(BackendResult {
            accuracy,
            cost_units: None,
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str) -> Result<TabularBackend, TabularError> {
        TabularBackend::from_reader(text.as_bytes(), &SpaceConfig::default())
    }

    fn state(s: &str) -> ArchState {
        ArchState::parse(s, &SpaceConfig::default()).unwrap()
    }

    #[test]
    fn lookup_present_key() {
        let mut t = load("architecture,accuracy\nC(3,64)-SM,0.61\nSM,0.1\n\"C(1,64)-SM\",0.3\n").unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.get("C(1,64)-SM"), Some(0.3));
        let r = t.evaluate(&state("C(3,64)-SM"), None).unwrap();
        assert_eq!(r.accuracy, 0.61);
        assert_eq!(r.source, Source::Tabular);
    }

    #[test]
    fn missing_key_names_architecture() {
        let mut t = load("architecture,accuracy\nSM,0.1\n").unwrap();
        let err = t.evaluate(&state("C(1,64)-SM"), None).unwrap_err();
        assert!(err.to_string().contains("C(1,64)-SM"), "{err}");
    }

    #[test]
    fn fallback_uses_surrogate() {
        let mut t = load("architecture,accuracy\nSM,0.1\n")
            .unwrap()
            .with_fallback(SurrogateConfig::default());
        let r = t.evaluate(&state("C(1,64)-SM"), None).unwrap();
        assert_eq!(r.source, Source::Surrogate);
        assert_eq!(r.accuracy, surrogate_reward(&state("C(1,64)-SM"), &SurrogateConfig::default()));
    }

    #[test]
    fn duplicates_rejected() {
        let err = load("architecture,accuracy\nSM,0.1\nC(3,64)-SM,0.2\nSM,0.3\n").unwrap_err();
        assert!(matches!(err, TabularError::Duplicate { line: 4, .. }), "{err}");
    }

    #[test]
    fn malformed_tables_rejected() {
        assert!(matches!(load("arch,acc\nSM,0.1\n"), Err(TabularError::Header(_))));
        assert!(matches!(load("architecture,accuracy\nC(3,64),0.1\n"), Err(TabularError::Row { .. })));
        assert!(matches!(load("architecture,accuracy\nSM,abc\n"), Err(TabularError::Row { .. })));
        assert!(matches!(load("architecture,accuracy\nSM,1.5\n"), Err(TabularError::Row { .. })));
        assert!(matches!(load("architecture,accuracy\nP(2,2)-SM,0.5\n"), Err(TabularError::Row { .. })));
        assert!(load("architecture,accuracy\nSM\n").is_err());
    }
}
