//! Exact, table-driven language models for tests and offline runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LogitProvider, ProviderError, Vocab};

const ROW_TOLERANCE: f64 = 1e-9;

/// Next-token probability rows keyed by the previous token. `start` is used for
/// an empty context and `default` for previous tokens without a row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BigramTable {
    pub start: Vec<f64>,
    #[serde(default)]
    pub rows: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub default: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct BigramProvider {
    vocab: Vocab,
    start: Vec<f64>,
    rows: Vec<Option<Vec<f64>>>,
    default: Option<Vec<f64>>,
}

fn check_row(name: &str, row: &[f64], n: usize) -> Result<Vec<f64>, ProviderError> {
    if row.len() != n {
        return Err(ProviderError::Contract(format!("row {name:?} has {} entries, vocabulary has {n}", row.len())));
    }
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(ProviderError::Contract(format!("row {name:?} has a negative or non-finite entry")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOLERANCE {
        return Err(ProviderError::Contract(format!("row {name:?} sums to {sum}")));
    }
    Ok(row.iter().map(|p| p.ln()).collect())
}

impl BigramProvider {
    pub fn new(vocab: Vec<String>, table: &BigramTable) -> Result<Self, ProviderError> {
        let vocab = Vocab::new(vocab)?;
        let n = vocab.len();
        let start = check_row("<start>", &table.start, n)?;
        let mut rows = vec![None; n];
        for (tok, row) in &table.rows {
            let id = vocab.id(tok).ok_or_else(|| ProviderError::UnknownToken(tok.clone()))?;
            rows[id] = Some(check_row(tok, row, n)?);
        }
        let default = table.default.as_ref().map(|r| check_row("<default>", r, n)).transpose()?;
        if default.is_none() {
            if let Some(missing) = rows.iter().position(Option::is_none) {
                return Err(ProviderError::Contract(format!(
                    "no row for token {:?} and no default row",
                    vocab.token(missing)
                )));
            }
        }
        Ok(Self {
            vocab,
            start,
            rows,
            default,
        })
    }

    /// Every row uniform.
    pub fn uniform(vocab: Vec<String>) -> Result<Self, ProviderError> {
        let n = vocab.len();
        let row = vec![1.0 / n as f64; n];
        let table = BigramTable {
            start: row.clone(),
            rows: BTreeMap::new(),
            default: Some(row),
        };
        Self::new(vocab, &table)
    }

    fn row_for(&self, context: &[usize]) -> Result<&[f64], ProviderError> {
        let Some(&last) = context.last() else {
            return Ok(&self.start);
        };
        if last >= self.vocab.len() {
            return Err(ProviderError::UnknownToken(format!("#{last}")));
        }
        self.rows[last]
            .as_deref()
            .or(self.default.as_deref())
            .ok_or_else(|| ProviderError::Contract(format!("no row for {:?}", self.vocab.token(last))))
    }
}

impl LogitProvider for BigramProvider {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn logits(&self, context: &[usize]) -> Result<Vec<f64>, ProviderError> {
        Ok(self.row_for(context)?.to_vec())
    }
}

/// Delegates to the first route whose trigger token occurs anywhere in the
/// context, otherwise to the base model. All members share one vocabulary.
#[derive(Debug, Clone)]
pub struct RoutedProvider {
    base: BigramProvider,
    routes: Vec<(usize, BigramProvider)>,
}

impl RoutedProvider {
    pub fn new(base: BigramProvider, routes: Vec<(String, BigramProvider)>) -> Result<Self, ProviderError> {
        let routes = routes
            .into_iter()
            .map(|(trigger, p)| {
                if p.vocab != base.vocab {
                    return Err(ProviderError::Contract(format!("route {trigger:?} has a different vocabulary")));
                }
                let id = base.vocab.id(&trigger).ok_or(ProviderError::UnknownToken(trigger))?;
                Ok((id, p))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { base, routes })
    }

    fn pick(&self, context: &[usize]) -> &BigramProvider {
        self.routes
            .iter()
            .find(|(t, _)| context.contains(t))
            .map(|(_, p)| p)
            .unwrap_or(&self.base)
    }
}

impl LogitProvider for RoutedProvider {
    fn vocab(&self) -> &Vocab {
        &self.base.vocab
    }

    fn logits(&self, context: &[usize]) -> Result<Vec<f64>, ProviderError> {
        self.pick(context).logits(context)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteSpec {
    pub trigger: String,
    pub table: BigramTable,
}

/// On-disk description of a toy model (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLmSpec {
    pub vocab: Vec<String>,
    pub base: BigramTable,
    #[serde(default)]
    pub routes: Vec<RouteSpec>,
}

impl ToyLmSpec {
    pub fn build(&self) -> Result<RoutedProvider, ProviderError> {
        let base = BigramProvider::new(self.vocab.clone(), &self.base)?;
        let routes = self
            .routes
            .iter()
            .map(|r| Ok((r.trigger.clone(), BigramProvider::new(self.vocab.clone(), &r.table)?)))
            .collect::<Result<Vec<_>, ProviderError>>()?;
        RoutedProvider::new(base, routes)
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = fs::read_to_string(path).map_err(|e| ProviderError::Contract(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ProviderError::Contract(format!("{}: {e}", path.display())))
    }
}
