//! Dependency graphs and the CoNLL-U reader that produces them.

use std::collections::HashSet;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("line {line}: expected 10 tab-separated columns, found {found}")]
    ColumnCount { line: usize, found: usize },
    #[error("line {line}: {field} is not an integer: {value:?}")]
    BadInteger {
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("line {line}: head {head} out of range for sentence with {len} tokens")]
    HeadOutOfRange { line: usize, head: usize, len: usize },
    #[error("graph {0:?} has no nodes")]
    Empty(String),
    #[error("graph {id:?}: edge ({head}, {dependent}) references a missing node")]
    BadEdge {
        id: String,
        head: usize,
        dependent: usize,
    },
    #[error("graph {id:?}: duplicate edge ({head}, {dependent}, {label})")]
    DuplicateEdge {
        id: String,
        head: usize,
        dependent: usize,
        label: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Edge {
    pub head: usize,
    pub dependent: usize,
    pub label: String,
}

impl Edge {
    pub fn new(head: usize, dependent: usize, label: impl Into<String>) -> Self {
        Self {
            head,
            dependent,
            label: label.into(),
        }
    }
}

/// Word nodes of one sentence plus its labeled head→dependent edges.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyGraph {
    pub sentence_id: String,
    pub nodes: Vec<String>,
    pub edges: Vec<Edge>,
}

impl DependencyGraph {
    /// Builds a graph, checking index bounds and edge uniqueness.
    pub fn new(
        sentence_id: impl Into<String>,
        nodes: Vec<String>,
        edges: Vec<Edge>,
    ) -> Result<Self, GraphError> {
        let graph = Self {
            sentence_id: sentence_id.into(),
            nodes,
            edges,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if self.nodes.is_empty() {
            return Err(GraphError::Empty(self.sentence_id.clone()));
        }
        let mut seen = HashSet::new();
        for e in &self.edges {
            if e.head >= self.nodes.len() || e.dependent >= self.nodes.len() {
                return Err(GraphError::BadEdge {
                    id: self.sentence_id.clone(),
                    head: e.head,
                    dependent: e.dependent,
                });
            }
            if !seen.insert(e) {
                return Err(GraphError::DuplicateEdge {
                    id: self.sentence_id.clone(),
                    head: e.head,
                    dependent: e.dependent,
                    label: e.label.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Space-joined token forms.
    pub fn text(&self) -> String {
        self.nodes.join(" ")
    }

    /// Relabels nodes so that old node `i` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.nodes.len(), "permutation length");
        let mut nodes = vec![String::new(); self.nodes.len()];
        for (old, &new) in perm.iter().enumerate() {
            nodes[new] = self.nodes[old].clone();
        }
        let edges = self
            .edges
            .iter()
            .map(|e| Edge::new(perm[e.head], perm[e.dependent], e.label.clone()))
            .collect();
        Self {
            sentence_id: self.sentence_id.clone(),
            nodes,
            edges,
        }
    }
}

/// Parses CoNLL-U text into one graph per sentence.
///
/// Multiword-token ranges (`1-2`) and empty nodes (`1.1`) are skipped. Rows whose
/// HEAD is `0` are roots and produce no edge. A sentence id is taken from a
/// `# sent_id = ...` comment when present, otherwise the 1-based sentence ordinal.
pub fn read_conllu(text: &str) -> Result<Vec<DependencyGraph>, GraphError> {
    struct Row {
        line: usize,
        head: usize,
        label: String,
    }

    let mut graphs = Vec::new();
    let mut nodes: Vec<String> = Vec::new();
    let mut rows: Vec<Row> = Vec::new();
    let mut sent_id: Option<String> = None;

    let flush = |nodes: &mut Vec<String>,
                     rows: &mut Vec<Row>,
                     sent_id: &mut Option<String>,
                     graphs: &mut Vec<DependencyGraph>|
     -> Result<(), GraphError> {
        if nodes.is_empty() {
            sent_id.take();
            return Ok(());
        }
        let mut edges = Vec::new();
        for (dependent, row) in rows.iter().enumerate() {
            if row.head == 0 {
                continue;
            }
            if row.head > nodes.len() {
                return Err(GraphError::HeadOutOfRange {
                    line: row.line,
                    head: row.head,
                    len: nodes.len(),
                });
            }
            let edge = Edge::new(row.head - 1, dependent, row.label.clone());
            // Enhanced or repeated rows can duplicate a triple; keep the first.
            if !edges.contains(&edge) {
                edges.push(edge);
            }
        }
        let id = sent_id
            .take()
            .unwrap_or_else(|| (graphs.len() + 1).to_string());
        graphs.push(DependencyGraph::new(id, std::mem::take(nodes), edges)?);
        rows.clear();
        Ok(())
    };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut nodes, &mut rows, &mut sent_id, &mut graphs)?;
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(id) = comment.trim().strip_prefix("sent_id") {
                let id = id.trim_start().trim_start_matches('=').trim();
                if !id.is_empty() {
                    sent_id = Some(id.to_string());
                }
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(GraphError::ColumnCount {
                line: line_no,
                found: cols.len(),
            });
        }
        let id_field = cols[0];
        if id_field.contains('-') || id_field.contains('.') {
            continue;
        }
        let id: usize = id_field.parse().map_err(|_| GraphError::BadInteger {
            line: line_no,
            field: "ID",
            value: id_field.to_string(),
        })?;
        let head: usize = cols[6].parse().map_err(|_| GraphError::BadInteger {
            line: line_no,
            field: "HEAD",
            value: cols[6].to_string(),
        })?;
        if id != nodes.len() + 1 {
            return Err(GraphError::BadInteger {
                line: line_no,
                field: "ID",
                value: id_field.to_string(),
            });
        }
        nodes.push(cols[1].to_string());
        rows.push(Row {
            line: line_no,
            head,
            label: cols[7].to_string(),
        });
    }
    flush(&mut nodes, &mut rows, &mut sent_id, &mut graphs)?;
    Ok(graphs)
}

/// Renders graphs back to CoNLL-U with only FORM, HEAD and DEPREL populated.
pub fn write_conllu(graphs: &[DependencyGraph]) -> String {
    let mut out = String::new();
    for g in graphs {
        out.push_str(&format!("# sent_id = {}\n", g.sentence_id));
        out.push_str(&format!("# text = {}\n", g.text()));
        for (i, form) in g.nodes.iter().enumerate() {
            let (head, label) = g
                .edges
                .iter()
                .find(|e| e.dependent == i)
                .map(|e| (e.head + 1, e.label.as_str()))
                .unwrap_or((0, "root"));
            out.push_str(&format!(
                "{}\t{}\t_\t_\t_\t_\t{}\t{}\t_\t_\n",
                i + 1,
                form,
                head,
                label
            ));
        }
        out.push('\n');
    }
    out
}
