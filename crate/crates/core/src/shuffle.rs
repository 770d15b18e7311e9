//! Model shuffler: last-layer normalization, model distance, last-appearance
//! bookkeeping, the preference matrix, and UE-model matching (max-sum
//! Kuhn-Munkres and the bottleneck-optimal maximin matching).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nnet::QNetwork;

#[derive(Debug, Error, PartialEq)]
pub enum ShuffleError {
    #[error("models have different shapes")]
    ShapeMismatch,
    #[error("preference matrix is not square ({rows} rows, row of length {cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("preference matrix has a non-finite entry at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("UE or lineage index {0} outside the last-appearance table")]
    OutOfTable(usize),
    #[error("UE {0} uploaded twice in one round")]
    DuplicateUpload(usize),
}

/// Copy of the model where every column of the last-layer weight matrix and
/// the last-layer bias vector are shifted to zero mean. Subtracting the same
/// amount from every action score keeps the argmax unchanged.
pub fn normalize_model(model: &QNetwork) -> QNetwork {
    let mut out = model.clone();
    let rows = model.num_actions();
    let cols = model.hidden_size();
    for c in 0..cols {
        let mean = (0..rows).map(|r| model.w2[r * cols + c]).sum::<f64>() / rows as f64;
        for r in 0..rows {
            out.w2[r * cols + c] -= mean;
        }
    }
    let mean = model.b2.iter().sum::<f64>() / rows as f64;
    for b in &mut out.b2 {
        *b -= mean;
    }
    out
}

/// Squared Euclidean distance between the normalized last layers, divided by
/// the number of last-layer parameters.
pub fn model_distance(a: &QNetwork, b: &QNetwork) -> Result<f64, ShuffleError> {
    if !a.same_shape(b) {
        return Err(ShuffleError::ShapeMismatch);
    }
    let (na, nb) = (normalize_model(a), normalize_model(b));
    let sq: f64 = na
        .w2
        .iter()
        .zip(&nb.w2)
        .chain(na.b2.iter().zip(&nb.b2))
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sq / (na.w2.len() + na.b2.len()) as f64)
}

/// Square matrix of real scores, row-major. Rows are UEs, columns models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl PreferenceMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, ShuffleError> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != n {
                return Err(ShuffleError::NotSquare {
                    rows: n,
                    cols: row.len(),
                });
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(ShuffleError::NonFinite(i, j));
            }
            data.extend(row);
        }
        Ok(Self { n, data })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let data = (0..n * n).map(|k| f(k / n, k % n)).collect();
        Self { n, data }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n.max(1)).map(<[f64]>::to_vec).collect()
    }

    fn values(&self) -> &[f64] {
        &self.data
    }
}

/// Perfect matching `assign[i] = j`: UE row `i` receives model column `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matching {
    pub assign: Vec<usize>,
}

impl Matching {
    pub fn identity(n: usize) -> Self {
        Self {
            assign: (0..n).collect(),
        }
    }

    pub fn is_permutation(&self) -> bool {
        let mut seen = vec![false; self.assign.len()];
        self.assign.iter().all(|&j| j < seen.len() && !std::mem::replace(&mut seen[j], true))
    }

    pub fn total(&self, e: &PreferenceMatrix) -> f64 {
        self.assign.iter().enumerate().map(|(i, &j)| e.get(i, j)).sum()
    }

    /// Smallest matched weight (`+inf` for an empty matching).
    pub fn bottleneck(&self, e: &PreferenceMatrix) -> f64 {
        self.assign
            .iter()
            .enumerate()
            .map(|(i, &j)| e.get(i, j))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Result of an unweighted maximum matching.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BipartiteMatching {
    /// `assign[row] = Some(col)` for matched rows.
    pub assign: Vec<Option<usize>>,
    pub size: usize,
}

impl BipartiteMatching {
    pub fn is_perfect(&self) -> bool {
        self.size == self.assign.len()
    }

    pub fn into_perfect(self) -> Option<Matching> {
        self.is_perfect().then(|| Matching {
            assign: self.assign.into_iter().map(|c| c.expect("perfect")).collect(),
        })
    }
}

/// Maximum-cardinality matching by augmenting paths, rows tried in order and
/// columns scanned in index order.
pub fn max_bipartite_matching(adjacency: &[Vec<bool>]) -> BipartiteMatching {
    let n = adjacency.len();
    let cols = adjacency.iter().map(Vec::len).max().unwrap_or(0);
    let mut col_owner: Vec<Option<usize>> = vec![None; cols];

    fn augment(
        row: usize,
        adjacency: &[Vec<bool>],
        visited: &mut [bool],
        col_owner: &mut [Option<usize>],
    ) -> bool {
        for (col, &edge) in adjacency[row].iter().enumerate() {
            if !edge || visited[col] {
                continue;
            }
            visited[col] = true;
            let free = match col_owner[col] {
                None => true,
                Some(other) => augment(other, adjacency, visited, col_owner),
            };
            if free {
                col_owner[col] = Some(row);
                return true;
            }
        }
        false
    }

    let mut size = 0;
    for row in 0..n {
        let mut visited = vec![false; cols];
        if augment(row, adjacency, &mut visited, &mut col_owner) {
            size += 1;
        }
    }
    let mut assign = vec![None; n];
    for (col, owner) in col_owner.into_iter().enumerate() {
        if let Some(row) = owner {
            assign[row] = Some(col);
        }
    }
    BipartiteMatching { assign, size }
}

/// Perfect matching maximizing the sum of matched weights (Hungarian method
/// with potentials, O(n^3)).
pub fn km_matching(e: &PreferenceMatrix) -> Matching {
    let n = e.size();
    if n == 0 {
        return Matching { assign: vec![] };
    }
    // Minimize cost = -E. 1-based arrays, column 0 is the virtual start.
    let cost = |i: usize, j: usize| -e.get(i - 1, j - 1);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    Matching { assign }
}

fn threshold_graph(e: &PreferenceMatrix, threshold: f64) -> Vec<Vec<bool>> {
    (0..e.size())
        .map(|i| (0..e.size()).map(|j| e.get(i, j) >= threshold).collect())
        .collect()
}

/// Perfect matching whose smallest matched weight is as large as possible.
///
/// Binary search over the sorted distinct entries for the largest threshold
/// at which the subgraph of edges with weight `>= threshold` still has a
/// perfect matching. The smallest entry is always feasible because the full
/// bipartite graph is complete.
pub fn maximin_matching(e: &PreferenceMatrix) -> Matching {
    let n = e.size();
    if n == 0 {
        return Matching { assign: vec![] };
    }
    let mut candidates = e.values().to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let feasible = |t: f64| max_bipartite_matching(&threshold_graph(e, t)).into_perfect();

    let (mut lo, mut hi) = (0usize, candidates.len() - 1);
    let mut best = feasible(candidates[lo]).expect("complete graph has a perfect matching");
    while lo < hi {
        let mid = lo + (hi - lo + 1) / 2;
        match feasible(candidates[mid]) {
            Some(m) => {
                best = m;
                lo = mid;
            }
            None => hi = mid - 1,
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MatchingStrategy {
    #[default]
    Maximin,
    Km,
}

impl MatchingStrategy {
    pub fn solve(self, e: &PreferenceMatrix) -> Matching {
        match self {
            MatchingStrategy::Maximin => maximin_matching(e),
            MatchingStrategy::Km => km_matching(e),
        }
    }
}

/// Round at which each model lineage was last handed to each UE.
#[derive(Debug, Clone, PartialEq)]
pub struct MlaTable {
    size: usize,
    /// `last[ue * size + lineage]`, -1 for never.
    last: Vec<i64>,
    current_round: i64,
}

impl MlaTable {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            last: vec![-1; size * size],
            current_round: 0,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn current_round(&self) -> i64 {
        self.current_round
    }

    pub fn last_assigned(&self, ue: usize, lineage: usize) -> i64 {
        self.last[ue * self.size + lineage]
    }

    /// `current_round - last`, or `current_round + 1` if never assigned.
    pub fn score(&self, ue: usize, lineage: usize) -> f64 {
        match self.last_assigned(ue, lineage) {
            -1 => (self.current_round + 1) as f64,
            r => (self.current_round - r) as f64,
        }
    }

    pub fn record(&mut self, ue: usize, lineage: usize) -> Result<(), ShuffleError> {
        if ue >= self.size {
            return Err(ShuffleError::OutOfTable(ue));
        }
        if lineage >= self.size {
            return Err(ShuffleError::OutOfTable(lineage));
        }
        self.last[ue * self.size + lineage] = self.current_round;
        Ok(())
    }

    pub fn advance_round(&mut self) {
        self.current_round += 1;
    }
}

/// Last-appearance scores for `ues` (rows) against `lineages` (columns).
pub fn mla_scores(table: &MlaTable, ues: &[usize], lineages: &[usize]) -> Vec<Vec<f64>> {
    ues.iter()
        .map(|&ue| lineages.iter().map(|&l| table.score(ue, l)).collect())
        .collect()
}

/// `E = E_mla - lambda * E_md`.
pub fn preference_matrix(
    mla: &[Vec<f64>],
    models: &[&QNetwork],
    lambda: f64,
) -> Result<PreferenceMatrix, ShuffleError> {
    let n = models.len();
    let mut md = vec![vec![0.0; n]; n];
    if lambda != 0.0 {
        for i in 0..n {
            for j in (i + 1)..n {
                let d = model_distance(models[i], models[j])?;
                md[i][j] = d;
                md[j][i] = d;
            }
        }
    }
    let rows = mla
        .iter()
        .zip(&md)
        .map(|(m, d)| m.iter().zip(d).map(|(m, d)| m - lambda * d).collect())
        .collect();
    PreferenceMatrix::from_rows(rows)
}

/// A model handed to the shuffler by one UE.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelUpload {
    pub ue_id: usize,
    /// Identity of the model line this parameter set descends from.
    pub lineage: usize,
    pub model: QNetwork,
}

/// Where each participant's new model comes from.
#[derive(Debug, Clone, PartialEq)]
pub struct ShuffleOutcome {
    /// `(receiving UE, index into the uploads slice)`, in upload order.
    pub assignments: Vec<(usize, usize)>,
    pub bottleneck: f64,
    pub total: f64,
    pub preference: PreferenceMatrix,
}

/// Builds the preference matrix over the uploads, matches and records the
/// assignment at the table's current round. Does not advance the round, so
/// several shufflers can share one table within a round.
pub fn distribute(
    uploads: &[ModelUpload],
    table: &mut MlaTable,
    lambda: f64,
    strategy: MatchingStrategy,
) -> Result<ShuffleOutcome, ShuffleError> {
    let mut seen = std::collections::BTreeSet::new();
    for u in uploads {
        if !seen.insert(u.ue_id) {
            return Err(ShuffleError::DuplicateUpload(u.ue_id));
        }
        if u.ue_id >= table.size() {
            return Err(ShuffleError::OutOfTable(u.ue_id));
        }
        if u.lineage >= table.size() {
            return Err(ShuffleError::OutOfTable(u.lineage));
        }
    }
    let ues: Vec<usize> = uploads.iter().map(|u| u.ue_id).collect();
    let lineages: Vec<usize> = uploads.iter().map(|u| u.lineage).collect();
    let models: Vec<&QNetwork> = uploads.iter().map(|u| &u.model).collect();
    let mla = mla_scores(table, &ues, &lineages);
    let preference = preference_matrix(&mla, &models, lambda)?;
    let matching = strategy.solve(&preference);
    for (i, &j) in matching.assign.iter().enumerate() {
        table.record(ues[i], lineages[j])?;
    }
    Ok(ShuffleOutcome {
        assignments: matching
            .assign
            .iter()
            .enumerate()
            .map(|(i, &j)| (ues[i], j))
            .collect(),
        bottleneck: matching.bottleneck(&preference),
        total: matching.total(&preference),
        preference,
    })
}

/// One complete single-shuffler round: [`distribute`] followed by advancing
/// the table's round counter.
pub fn shuffle_round(
    uploads: &[ModelUpload],
    table: &mut MlaTable,
    lambda: f64,
    strategy: MatchingStrategy,
) -> Result<ShuffleOutcome, ShuffleError> {
    let out = distribute(uploads, table, lambda, strategy)?;
    table.advance_round();
    Ok(out)
}

/// Random split of `ues` into `shufflers` disjoint subsets whose sizes differ
/// by at most one. Each subset is returned sorted.
pub fn partition_ues<R: Rng + ?Sized>(ues: &[usize], shufflers: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let k = shufflers.max(1);
    let mut order = ues.to_vec();
    order.shuffle(rng);
    let base = order.len() / k;
    let extra = order.len() % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for s in 0..k {
        let len = base + usize::from(s < extra);
        let mut part = order[start..start + len].to_vec();
        part.sort_unstable();
        out.push(part);
        start += len;
    }
    out
}
