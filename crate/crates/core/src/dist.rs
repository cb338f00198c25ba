//! Dense probability tables over small discrete product spaces and the
//! information-theoretic quantities computed from them.
//!
//! All logarithms are natural, so every quantity is in nats. Tables are
//! stored row-major with variable 0 as the most significant digit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trees::Edge;

/// Tables are rejected when their sum is further than this from one.
pub const RENORMALIZE_TOL: f64 = 1e-9;

/// Largest dense table (in cells) any operation will build.
pub const MAX_DENSE_CELLS: usize = 1 << 24;

/// A finite alphabet `{0, .., size - 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Alphabet(usize);

impl Alphabet {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidAlphabet(size));
        }
        Ok(Alphabet(size))
    }

    pub fn binary() -> Self {
        Alphabet(2)
    }

    pub fn size(self) -> usize {
        self.0
    }
}

impl TryFrom<usize> for Alphabet {
    type Error = Error;
    fn try_from(v: usize) -> Result<Self> {
        Alphabet::new(v)
    }
}

impl From<Alphabet> for usize {
    fn from(a: Alphabet) -> usize {
        a.0
    }
}

/// Number of cells in a table over `num_vars` variables, or `None` when it
/// exceeds the dense budget.
pub fn table_len(alphabet: Alphabet, num_vars: usize) -> Option<usize> {
    let mut len = 1usize;
    for _ in 0..num_vars {
        len = len.checked_mul(alphabet.size())?;
        if len > MAX_DENSE_CELLS {
            return None;
        }
    }
    Some(len)
}

/// Splits a flat index into per-variable symbols.
pub(crate) fn decode(mut index: usize, k: usize, out: &mut [usize]) {
    for slot in out.iter_mut().rev() {
        *slot = index % k;
        index /= k;
    }
}

pub(crate) fn encode(symbols: &[usize], k: usize) -> usize {
    symbols.iter().fold(0, |acc, &s| acc * k + s)
}

/// Checks a table for finiteness and nonnegativity, then renormalizes if it
/// is within [`RENORMALIZE_TOL`] of summing to one.
fn normalize_table(probs: &mut [f64]) -> Result<()> {
    if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::InvalidTable(format!("entry {bad} is negative or not finite")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > RENORMALIZE_TOL {
        return Err(Error::NotNormalized { sum });
    }
    // sums off by summation rounding only are left alone, which keeps
    // construction idempotent
    if (sum - 1.0).abs() > probs.len() as f64 * f64::EPSILON {
        probs.iter_mut().for_each(|p| *p /= sum);
    }
    Ok(())
}

/// `x log x` with the `0 log 0 = 0` convention.
#[inline]
pub(crate) fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Shannon entropy of a probability vector.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().map(|&p| xlogx(p)).sum::<f64>()
}

/// Row and column sums of a `k x k` table.
pub(crate) fn pair_marginals(k: usize, table: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut row = vec![0.0; k];
    let mut col = vec![0.0; k];
    for a in 0..k {
        for b in 0..k {
            let p = table[a * k + b];
            row[a] += p;
            col[b] += p;
        }
    }
    (row, col)
}

/// Mutual information of a `k x k` joint table, clamped at zero.
pub(crate) fn pair_mi(k: usize, table: &[f64]) -> f64 {
    let (row, col) = pair_marginals(k, table);
    let mut mi = 0.0;
    for a in 0..k {
        for b in 0..k {
            let p = table[a * k + b];
            if p > 0.0 {
                mi += p * (p / (row[a] * col[b])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// An explicit probability table over `X^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseJoint {
    num_vars: usize,
    alphabet: Alphabet,
    probs: Vec<f64>,
    strictly_positive: bool,
}

impl DenseJoint {
    pub fn new(num_vars: usize, alphabet: Alphabet, mut probs: Vec<f64>) -> Result<Self> {
        if num_vars == 0 {
            return Err(Error::InvalidTable("a joint needs at least one variable".into()));
        }
        let len = table_len(alphabet, num_vars)
            .ok_or_else(|| Error::TooLarge(format!("{}^{num_vars} cells", alphabet.size())))?;
        if probs.len() != len {
            return Err(Error::InvalidTable(format!(
                "expected {len} entries, got {}",
                probs.len()
            )));
        }
        normalize_table(&mut probs)?;
        let strictly_positive = probs.iter().all(|&p| p > 0.0);
        Ok(DenseJoint {
            num_vars,
            alphabet,
            probs,
            strictly_positive,
        })
    }

    /// Uniform distribution over `X^d`.
    pub fn uniform(num_vars: usize, alphabet: Alphabet) -> Result<Self> {
        let len = table_len(alphabet, num_vars)
            .ok_or_else(|| Error::TooLarge(format!("{}^{num_vars} cells", alphabet.size())))?;
        DenseJoint::new(num_vars, alphabet, vec![1.0 / len as f64; len])
    }

    /// Product of independent single-variable distributions.
    pub fn product(alphabet: Alphabet, factors: &[Vec<f64>]) -> Result<Self> {
        let d = factors.len();
        let k = alphabet.size();
        let len = table_len(alphabet, d).ok_or_else(|| Error::TooLarge(format!("{k}^{d} cells")))?;
        let mut probs = vec![0.0; len];
        let mut xs = vec![0; d];
        for (idx, p) in probs.iter_mut().enumerate() {
            decode(idx, k, &mut xs);
            *p = xs.iter().zip(factors).map(|(&x, f)| f[x]).product();
        }
        DenseJoint::new(d, alphabet, probs)
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn alphabet(&self) -> Alphabet {
        self.alphabet
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn strictly_positive(&self) -> bool {
        self.strictly_positive
    }

    pub fn prob(&self, x: &[usize]) -> Result<f64> {
        if x.len() != self.num_vars || x.iter().any(|&s| s >= self.alphabet.size()) {
            return Err(Error::InvalidIndex(format!("outcome {x:?}")));
        }
        Ok(self.probs[encode(x, self.alphabet.size())])
    }

    /// Sums out every variable not in `keep`; output variables follow the
    /// order of `keep`.
    pub fn marginalize(&self, keep: &[usize]) -> Result<DenseJoint> {
        if keep.is_empty() {
            return Err(Error::InvalidIndex("empty keep set".into()));
        }
        for (i, &v) in keep.iter().enumerate() {
            if v >= self.num_vars {
                return Err(Error::InvalidIndex(format!(
                    "variable {v} out of range for {} variables",
                    self.num_vars
                )));
            }
            if keep[..i].contains(&v) {
                return Err(Error::InvalidIndex(format!("variable {v} repeated")));
            }
        }
        let k = self.alphabet.size();
        let out_len = k.pow(keep.len() as u32);
        let mut out = vec![0.0; out_len];
        let mut xs = vec![0; self.num_vars];
        for (idx, &p) in self.probs.iter().enumerate() {
            decode(idx, k, &mut xs);
            let o = keep.iter().fold(0, |acc, &v| acc * k + xs[v]);
            out[o] += p;
        }
        DenseJoint::new(keep.len(), self.alphabet, out)
    }

    /// Pairwise marginal table of `(i, j)` in that order.
    pub fn pair_table(&self, i: usize, j: usize) -> Result<Vec<f64>> {
        Ok(self.marginalize(&[i, j])?.probs)
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.probs)
    }

    /// L-infinity distance between two tables of the same shape.
    pub fn linf_distance(&self, other: &DenseJoint) -> Result<f64> {
        check_same_shape(self, other)?;
        Ok(self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

fn check_same_shape(a: &DenseJoint, b: &DenseJoint) -> Result<()> {
    if a.num_vars != b.num_vars || a.alphabet != b.alphabet {
        return Err(Error::InvalidTable(format!(
            "shape mismatch: {}^{} vs {}^{}",
            a.alphabet.size(),
            a.num_vars,
            b.alphabet.size(),
            b.num_vars
        )));
    }
    Ok(())
}

/// Mutual information `I(x_i; x_j)` of a two-variable joint.
pub fn mutual_information(pair: &DenseJoint) -> Result<f64> {
    if pair.num_vars != 2 {
        return Err(Error::InvalidIndex(format!(
            "mutual information needs a 2-variable joint, got {}",
            pair.num_vars
        )));
    }
    Ok(pair_mi(pair.alphabet.size(), &pair.probs))
}

/// Relative entropy `D(q || p)`.
pub fn kl_divergence(q: &DenseJoint, p: &DenseJoint) -> Result<f64> {
    check_same_shape(q, p)?;
    kl_slices(&q.probs, &p.probs)
}

pub(crate) fn kl_slices(q: &[f64], p: &[f64]) -> Result<f64> {
    let mut d = 0.0;
    for (cell, (&qi, &pi)) in q.iter().zip(p).enumerate() {
        if qi > 0.0 {
            if pi <= 0.0 {
                return Err(Error::SupportViolation { cell });
            }
            d += qi * (qi / pi).ln();
        }
    }
    Ok(d.max(0.0))
}

/// Which node pair of a [`PairJoint`] a quantity refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairSide {
    Edge,
    NonEdge,
}

/// Joint distribution of the three or four variables touched by an edge `e`
/// and a non-edge `e'`.
///
/// Variables are ordered as `e.0, e.1` followed by the nodes of `e'` not in
/// `e`, in increasing order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairJoint {
    edge: Edge,
    nonedge: Edge,
    vars: Vec<usize>,
    alphabet: Alphabet,
    probs: Vec<f64>,
    edge_pos: [usize; 2],
    nonedge_pos: [usize; 2],
}

impl PairJoint {
    fn layout(edge: Edge, nonedge: Edge) -> Result<(Vec<usize>, [usize; 2], [usize; 2])> {
        if edge == nonedge {
            return Err(Error::InvalidIndex(format!("edge and non-edge are both {edge}")));
        }
        let mut vars = vec![edge.lo(), edge.hi()];
        for v in [nonedge.lo(), nonedge.hi()] {
            if !vars.contains(&v) {
                vars.push(v);
            }
        }
        let pos = |v: usize| vars.iter().position(|&w| w == v).unwrap();
        let nonedge_pos = [pos(nonedge.lo()), pos(nonedge.hi())];
        Ok((vars.clone(), [0, 1], nonedge_pos))
    }

    /// Builds a pair joint from an explicit table laid out in the canonical
    /// variable order.
    pub fn new(edge: Edge, nonedge: Edge, alphabet: Alphabet, mut probs: Vec<f64>) -> Result<Self> {
        let (vars, edge_pos, nonedge_pos) = Self::layout(edge, nonedge)?;
        let len = alphabet.size().pow(vars.len() as u32);
        if probs.len() != len {
            return Err(Error::InvalidTable(format!(
                "expected {len} entries, got {}",
                probs.len()
            )));
        }
        normalize_table(&mut probs)?;
        Ok(PairJoint {
            edge,
            nonedge,
            vars,
            alphabet,
            probs,
            edge_pos,
            nonedge_pos,
        })
    }

    /// Marginalizes a dense joint onto the variables of `edge` and `nonedge`.
    pub fn from_dense(dense: &DenseJoint, edge: Edge, nonedge: Edge) -> Result<Self> {
        let (vars, _, _) = Self::layout(edge, nonedge)?;
        let m = dense.marginalize(&vars)?;
        PairJoint::new(edge, nonedge, dense.alphabet(), m.probs)
    }

    pub fn edge(&self) -> Edge {
        self.edge
    }

    pub fn nonedge(&self) -> Edge {
        self.nonedge
    }

    pub fn vars(&self) -> &[usize] {
        &self.vars
    }

    pub fn alphabet(&self) -> Alphabet {
        self.alphabet
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Whether `e` and `e'` share a node (three variables instead of four).
    pub fn shares_node(&self) -> bool {
        self.vars.len() == 3
    }

    pub fn strictly_positive(&self) -> bool {
        self.probs.iter().all(|&p| p > 0.0)
    }

    pub(crate) fn positions(&self, side: PairSide) -> [usize; 2] {
        match side {
            PairSide::Edge => self.edge_pos,
            PairSide::NonEdge => self.nonedge_pos,
        }
    }

    /// Same layout with a different table (used for solver iterates).
    pub(crate) fn with_probs(&self, probs: Vec<f64>) -> Result<Self> {
        PairJoint::new(self.edge, self.nonedge, self.alphabet, probs)
    }

    /// Pairwise marginal of one side, as a `k x k` table.
    pub fn side_marginal(&self, side: PairSide) -> Vec<f64> {
        side_marginal_of(&self.probs, self.alphabet.size(), self.vars.len(), self.positions(side))
    }

    pub fn mutual_information(&self, side: PairSide) -> f64 {
        pair_mi(self.alphabet.size(), &self.side_marginal(side))
    }

    pub fn to_dense(&self) -> DenseJoint {
        DenseJoint::new(self.vars.len(), self.alphabet, self.probs.clone()).expect("pair joint tables are normalized")
    }
}

pub(crate) fn side_marginal_of(probs: &[f64], k: usize, nv: usize, pos: [usize; 2]) -> Vec<f64> {
    let mut out = vec![0.0; k * k];
    let mut xs = [0usize; 4];
    for (idx, &p) in probs.iter().enumerate() {
        decode(idx, k, &mut xs[..nv]);
        out[xs[pos[0]] * k + xs[pos[1]]] += p;
    }
    out
}

/// Information density `s(x_i, x_j) = log P_ij / (P_i P_j)` evaluated on
/// every outcome of a pair joint's outcome space.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoDensityVector {
    pub values: Vec<f64>,
}

impl InfoDensityVector {
    /// `E_P[s]` under the given table.
    pub fn expectation(&self, probs: &[f64]) -> f64 {
        self.values.iter().zip(probs).map(|(s, p)| s * p).sum()
    }
}

pub(crate) fn info_density_of(probs: &[f64], k: usize, nv: usize, pos: [usize; 2]) -> Result<Vec<f64>> {
    let table = side_marginal_of(probs, k, nv, pos);
    let (row, col) = pair_marginals(k, &table);
    let mut xs = [0usize; 4];
    let mut out = Vec::with_capacity(probs.len());
    for idx in 0..probs.len() {
        decode(idx, k, &mut xs[..nv]);
        let (a, b) = (xs[pos[0]], xs[pos[1]]);
        let pab = table[a * k + b];
        if pab <= 0.0 {
            return Err(Error::ZeroMarginal { cell: idx });
        }
        out.push((pab / (row[a] * col[b])).ln());
    }
    Ok(out)
}

/// Information density of the selected side of `pair_joint`.
pub fn information_density(pair_joint: &PairJoint, which: PairSide) -> Result<InfoDensityVector> {
    let values = info_density_of(
        &pair_joint.probs,
        pair_joint.alphabet.size(),
        pair_joint.vars.len(),
        pair_joint.positions(which),
    )?;
    Ok(InfoDensityVector { values })
}

/// Rectangular matrix of samples, one row per observation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMatrix {
    num_vars: usize,
    data: Vec<usize>,
}

impl SampleMatrix {
    pub fn new(num_vars: usize, data: Vec<usize>) -> Result<Self> {
        if num_vars == 0 || !data.len().is_multiple_of(num_vars) {
            return Err(Error::InvalidTable(format!(
                "{} symbols do not form rows of width {num_vars}",
                data.len()
            )));
        }
        Ok(SampleMatrix { num_vars, data })
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let num_vars = rows.first().map(Vec::len).ok_or(Error::EmptySamples)?;
        if rows.iter().any(|r| r.len() != num_vars) {
            return Err(Error::InvalidTable("rows have different lengths".into()));
        }
        SampleMatrix::new(num_vars, rows.concat())
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.num_vars
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> + '_ {
        self.data.chunks_exact(self.num_vars)
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.data[i * self.num_vars..(i + 1) * self.num_vars]
    }

    /// Restricts every row to the given columns, in that order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<SampleMatrix> {
        if let Some(&c) = cols.iter().find(|&&c| c >= self.num_vars) {
            return Err(Error::InvalidIndex(format!("column {c}")));
        }
        let data = self.rows().flat_map(|r| cols.iter().map(move |&c| r[c])).collect();
        SampleMatrix::new(cols.len(), data)
    }
}

/// Histogram of joint outcomes (the type of a sample set).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmpiricalCounts {
    num_vars: usize,
    alphabet: Alphabet,
    counts: Vec<u64>,
    n: u64,
}

impl EmpiricalCounts {
    pub fn from_counts(num_vars: usize, alphabet: Alphabet, counts: Vec<u64>) -> Result<Self> {
        let len = table_len(alphabet, num_vars)
            .ok_or_else(|| Error::TooLarge(format!("{}^{num_vars} cells", alphabet.size())))?;
        if counts.len() != len {
            return Err(Error::InvalidTable(format!(
                "expected {len} counts, got {}",
                counts.len()
            )));
        }
        let n = counts.iter().sum();
        if n == 0 {
            return Err(Error::EmptySamples);
        }
        Ok(EmpiricalCounts {
            num_vars,
            alphabet,
            counts,
            n,
        })
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn alphabet(&self) -> Alphabet {
        self.alphabet
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn has_zero_cells(&self) -> bool {
        self.counts.contains(&0)
    }

    /// Normalized counts.
    pub fn to_joint(&self) -> DenseJoint {
        let n = self.n as f64;
        let probs = self.counts.iter().map(|&c| c as f64 / n).collect();
        DenseJoint::new(self.num_vars, self.alphabet, probs).expect("counts normalize")
    }

    /// Adds `eta` to every cell before normalizing.
    pub fn smoothed(&self, eta: f64) -> DenseJoint {
        let total = self.n as f64 + eta * self.counts.len() as f64;
        let probs = self.counts.iter().map(|&c| (c as f64 + eta) / total).collect();
        DenseJoint::new(self.num_vars, self.alphabet, probs).expect("smoothed counts normalize")
    }

    /// Mutual information of the empirical pairwise marginal on `(i, j)`,
    /// computed directly from counts.
    pub fn pair_mi(&self, i: usize, j: usize) -> f64 {
        let k = self.alphabet.size();
        let mut table = vec![0u64; k * k];
        let mut xs = vec![0; self.num_vars];
        for (idx, &c) in self.counts.iter().enumerate() {
            if c > 0 {
                decode(idx, k, &mut xs);
                table[xs[i] * k + xs[j]] += c;
            }
        }
        let n = self.n as f64;
        let probs: Vec<f64> = table.iter().map(|&c| c as f64 / n).collect();
        pair_mi(k, &probs)
    }
}

/// Builds the empirical distribution of a sample matrix.
pub fn empirical_distribution(samples: &SampleMatrix, alphabet: Alphabet) -> Result<EmpiricalCounts> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let k = alphabet.size();
    let len = table_len(alphabet, samples.num_vars())
        .ok_or_else(|| Error::TooLarge(format!("{k}^{} cells", samples.num_vars())))?;
    let mut counts = vec![0u64; len];
    for (row_idx, row) in samples.rows().enumerate() {
        if let Some((col, &symbol)) = row.iter().enumerate().find(|(_, &s)| s >= k) {
            return Err(Error::OutOfRangeSymbol {
                row: row_idx,
                col,
                symbol,
                alphabet: k,
            });
        }
        counts[encode(row, k)] += 1;
    }
    EmpiricalCounts::from_counts(samples.num_vars(), alphabet, counts)
}
