use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// A concept text fed to the text encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub definition: Option<String>,
    /// `name` alone, or `"<name>, <definition>"` when a definition is known.
    pub enriched: String,
}

impl Concept {
    /// Concept without a definition; `enriched` equals the name.
    pub fn plain(name: impl Into<String>) -> Self {
        let name = name.into();
        Self {
            enriched: name.clone(),
            name,
            definition: None,
        }
    }

    pub fn with_definition(name: impl Into<String>, definition: impl Into<String>) -> Self {
        let (name, definition) = (name.into(), definition.into());
        Self {
            enriched: format!("{name}, {definition}"),
            name,
            definition: Some(definition),
        }
    }
}

/// Case-folds and collapses whitespace.
pub fn normalize_name(name: &str) -> String {
    name.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct DictEntry {
    name: String,
    definition: Option<String>,
}

/// Pool of category names and definitions used for enrichment and negative
/// sampling. Keys are normalized names, so iteration order does not depend on
/// insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConceptDictionary {
    entries: BTreeMap<String, DictEntry>,
}

impl ConceptDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an entry; names that collide after normalization are rejected.
    pub fn insert(&mut self, name: &str, definition: Option<&str>) -> Result<()> {
        let key = normalize_name(name);
        if key.is_empty() {
            return Err(Error::InvalidInput("empty concept name".into()));
        }
        if self.entries.contains_key(&key) {
            return Err(Error::DuplicateConcept(name.to_string()));
        }
        let definition = definition.map(str::trim).filter(|d| !d.is_empty()).map(String::from);
        self.entries.insert(
            key,
            DictEntry {
                name: name.trim().to_string(),
                definition,
            },
        );
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, Option<&'a str>)>) -> Result<Self> {
        let mut d = Self::new();
        for (n, def) in pairs {
            d.insert(n, def)?;
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(&normalize_name(name))
    }

    pub fn definition(&self, name: &str) -> Option<&str> {
        self.entries
            .get(&normalize_name(name))
            .and_then(|e| e.definition.as_deref())
    }

    /// Entry names in normalized-key order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.values().map(|e| e.name.as_str())
    }

    /// Parses `name<TAB>definition` lines. A line without a tab is a bare name;
    /// blank lines and lines starting with `#` are skipped.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut d = Self::new();
        for line in text.lines() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('\t') {
                Some((n, def)) => d.insert(n, Some(def))?,
                None => d.insert(line, None)?,
            }
        }
        Ok(d)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse_tsv(&text)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in self.entries.values() {
            out.push_str(&e.name);
            if let Some(d) = &e.definition {
                out.push('\t');
                out.push_str(d);
            }
            out.push('\n');
        }
        out
    }
}

/// Looks up `name` in `dictionary` and builds its enriched form. A missing
/// definition falls back to the bare name.
pub fn enrich_concept(name: &str, dictionary: &ConceptDictionary) -> Concept {
    let name = name.trim();
    match dictionary.definition(name) {
        Some(def) => Concept::with_definition(name, def),
        None => Concept::plain(name),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enrichment_examples() {
        let d = ConceptDictionary::from_pairs([
            ("dog", Some("a domesticated carnivorous mammal")),
            ("cat", Some("a small feline")),
        ])
        .unwrap();
        assert_eq!(enrich_concept("dog", &d).enriched, "dog, a domesticated carnivorous mammal");
        assert_eq!(enrich_concept("cat", &d).enriched, "cat, a small feline");
        let z = enrich_concept("zorp", &ConceptDictionary::new());
        assert_eq!(z.enriched, "zorp");
        assert_eq!(z.definition, None);
    }

    #[test]
    fn normalized_duplicates_rejected() {
        let mut d = ConceptDictionary::new();
        d.insert("Red  Cube", None).unwrap();
        assert!(matches!(d.insert("red cube", None), Err(Error::DuplicateConcept(_))));
        assert!(d.contains("RED cube"));
    }

    #[test]
    fn tsv_round_trip() {
        let text = "dog\ta domesticated carnivorous mammal\n# comment\n\nzorp\n";
        let d = ConceptDictionary::parse_tsv(text).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.definition("dog"), Some("a domesticated carnivorous mammal"));
        assert_eq!(ConceptDictionary::parse_tsv(&d.to_tsv()).unwrap(), d);
    }
}
