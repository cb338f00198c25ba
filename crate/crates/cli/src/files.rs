//! Model and sample file formats.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;
use treerate::dist::{Alphabet, DenseJoint, SampleMatrix};
use treerate::trees::{Edge, EdgeSet, TreeModel};

use crate::CliError;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// A probability written with 17 significant digits, which is enough to
/// read back the same `f64`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prob(pub f64);

impl Serialize for Prob {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(serde::ser::Error::custom("non-finite probability"));
        }
        let raw = RawValue::from_string(format!("{:.16e}", self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Prob {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        f64::deserialize(d).map(Prob)
    }
}

fn probs(v: &[f64]) -> Vec<Prob> {
    v.iter().copied().map(Prob).collect()
}

fn floats(v: &[Prob]) -> Vec<f64> {
    v.iter().map(|p| p.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreePayload {
    pub edges: Vec<[usize; 2]>,
    pub node_marginals: Vec<Vec<Prob>>,
    /// One `k x k` table per edge, indexed `[x_a * k + x_b]` for edge `[a, b]`.
    pub edge_tables: Vec<Vec<Prob>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: u32,
    pub d: usize,
    pub alphabet: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense: Option<Vec<Prob>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<TreePayload>,
}

/// A validated model.
#[derive(Debug, Clone)]
pub enum Model {
    Dense(DenseJoint),
    Tree(TreeModel),
}

impl Model {
    pub fn num_vars(&self) -> usize {
        match self {
            Model::Dense(d) => d.num_vars(),
            Model::Tree(t) => t.num_nodes(),
        }
    }

    pub fn alphabet(&self) -> Alphabet {
        match self {
            Model::Dense(d) => d.alphabet(),
            Model::Tree(t) => t.alphabet(),
        }
    }
}

impl ModelFile {
    pub fn from_dense(dense: &DenseJoint) -> Self {
        ModelFile {
            version: MODEL_FORMAT_VERSION,
            d: dense.num_vars(),
            alphabet: dense.alphabet().size(),
            dense: Some(probs(dense.probs())),
            tree: None,
        }
    }

    pub fn from_tree(model: &TreeModel) -> Self {
        let edges = model.structure().edges();
        ModelFile {
            version: MODEL_FORMAT_VERSION,
            d: model.num_nodes(),
            alphabet: model.alphabet().size(),
            dense: None,
            tree: Some(TreePayload {
                edges: edges.iter().map(|e| [e.lo(), e.hi()]).collect(),
                node_marginals: model.node_marginals().iter().map(|m| probs(m)).collect(),
                edge_tables: edges
                    .iter()
                    .map(|&e| probs(model.edge_marginal(e).expect("edge of own structure")))
                    .collect(),
            }),
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Parse(format!("model file: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model files always serialize")
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Checks the payload against the domain invariants.
    pub fn validate(&self) -> Result<Model, CliError> {
        if self.version != MODEL_FORMAT_VERSION {
            return Err(CliError::Validation(format!(
                "unsupported model format version {}",
                self.version
            )));
        }
        let alphabet = Alphabet::new(self.alphabet)?;
        match (&self.dense, &self.tree) {
            (Some(dense), None) => Ok(Model::Dense(DenseJoint::new(self.d, alphabet, floats(dense))?)),
            (None, Some(tree)) => self.validate_tree(tree, alphabet).map(Model::Tree),
            _ => Err(CliError::Validation(
                "model file needs exactly one of \"dense\" or \"tree\"".into(),
            )),
        }
    }

    fn validate_tree(&self, tree: &TreePayload, alphabet: Alphabet) -> Result<TreeModel, CliError> {
        let k = alphabet.size();
        if tree.edges.len() != tree.edge_tables.len() {
            return Err(CliError::Validation(format!(
                "{} edges but {} edge tables",
                tree.edges.len(),
                tree.edge_tables.len()
            )));
        }
        let mut edges = Vec::with_capacity(tree.edges.len());
        let mut tables = BTreeMap::new();
        for (&[a, b], table) in tree.edges.iter().zip(&tree.edge_tables) {
            let e = Edge::try_new(a, b)?;
            let mut t = floats(table);
            if a > b && t.len() == k * k {
                // stored tables are keyed (lo, hi)
                t = (0..k * k).map(|i| t[(i % k) * k + i / k]).collect();
            }
            if tables.insert(e, t).is_some() {
                return Err(CliError::Validation(format!("edge {e} listed twice")));
            }
            edges.push(e);
        }
        let structure = EdgeSet::spanning_tree(self.d, edges)?;
        let nodes = tree.node_marginals.iter().map(|m| floats(m)).collect();
        Ok(TreeModel::new(structure, alphabet, nodes, tables)?)
    }
}

pub fn read_model(path: &Path) -> Result<Model, CliError> {
    ModelFile::read(path)?.validate()
}

/// Parses sample rows: one sample per line, symbols separated by spaces
/// and/or commas. Blank lines and lines starting with `#` are skipped.
pub fn parse_samples(text: &str) -> Result<SampleMatrix, CliError> {
    let mut rows: Vec<Vec<usize>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Parse(format!("line {}: {e}", i + 1)))?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(CliError::Parse(format!(
                    "line {}: expected {} symbols, found {}",
                    i + 1,
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Validation("sample file has no rows".into()));
    }
    Ok(SampleMatrix::from_rows(&rows)?)
}

pub fn read_samples(path: &Path) -> Result<SampleMatrix, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_samples(&text)
}
