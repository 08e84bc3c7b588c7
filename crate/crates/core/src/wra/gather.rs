use std::collections::HashMap;

use crate::error::{Error, Result};

/// Batch-level concept table.
#[derive(Debug, Clone, PartialEq)]
pub struct GatheredConcepts {
    /// Unique concept texts in first-occurrence order.
    pub texts: Vec<String>,
    /// `M_B × D`, one row per text.
    pub embeddings: Vec<Vec<f64>>,
    /// For each sample, local concept index → column in `texts`.
    pub per_sample_map: Vec<Vec<usize>>,
}

impl GatheredConcepts {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    /// Distinct columns of sample `i` in local order.
    pub fn sample_columns(&self, i: usize) -> Vec<usize> {
        unique_columns(&self.per_sample_map[i])
    }
}

/// `cols` with repeats removed, first occurrence kept.
pub fn unique_columns(cols: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(cols.len());
    for &c in cols {
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

/// Deduplicates texts across samples by exact equality.
pub fn gather_texts<S: AsRef<str>>(samples: &[Vec<S>]) -> (Vec<String>, Vec<Vec<usize>>) {
    let mut texts: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let maps = samples
        .iter()
        .map(|s| {
            s.iter()
                .map(|t| {
                    let t = t.as_ref();
                    *index.entry(t.to_string()).or_insert_with(|| {
                        texts.push(t.to_string());
                        texts.len() - 1
                    })
                })
                .collect()
        })
        .collect();
    (texts, maps)
}

/// Gathers and deduplicates the batch's concept texts, encoding each unique
/// text once with `embed`.
pub fn gather_concepts<S, F>(samples: &[Vec<S>], embed: F) -> Result<GatheredConcepts>
where
    S: AsRef<str>,
    F: FnOnce(&[&str]) -> Result<Vec<Vec<f64>>>,
{
    let (texts, per_sample_map) = gather_texts(samples);
    if texts.is_empty() {
        return Err(Error::InvalidInput("batch has no concepts".into()));
    }
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let embeddings = embed(&refs)?;
    if embeddings.len() != texts.len() {
        return Err(Error::ShapeMismatch(format!(
            "embedder returned {} rows for {} texts",
            embeddings.len(),
            texts.len()
        )));
    }
    Ok(GatheredConcepts {
        texts,
        embeddings,
        per_sample_map,
    })
}
