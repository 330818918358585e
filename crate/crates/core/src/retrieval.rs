//! Exact nearest-neighbor search and mean average precision.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::{sq_dist, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    descriptors: Matrix,
    ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub distance: f64,
}

impl RetrievalIndex {
    pub fn new(descriptors: Matrix, ids: Vec<String>) -> Result<Self> {
        if descriptors.rows() != ids.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} descriptors for {} ids",
                descriptors.rows(),
                ids.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvalidArgument(format!("duplicate id {dup:?}")));
        }
        if descriptors.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("descriptors must be finite".into()));
        }
        Ok(Self { descriptors, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn descriptor(&self, i: usize) -> &[f64] {
        self.descriptors.row(i)
    }

    /// Linear scan ordered by ascending Euclidean distance, then id.
    pub fn search(&self, query: &[f64], topk: usize) -> Result<Vec<Hit>> {
        self.search_excluding(query, topk, None)
    }

    /// As [`search`](Self::search) but never returns `exclude`.
    pub fn search_excluding(&self, query: &[f64], topk: usize, exclude: Option<&str>) -> Result<Vec<Hit>> {
        if query.len() != self.descriptors.cols() {
            return Err(Error::DimensionMismatch(format!(
                "{}-dim query for a {}-dim index",
                query.len(),
                self.descriptors.cols()
            )));
        }
        let mut hits: Vec<(f64, usize)> = self
            .descriptors
            .iter_rows()
            .enumerate()
            .filter(|(i, _)| exclude != Some(self.ids[*i].as_str()))
            .map(|(i, row)| (sq_dist(query, row), i))
            .collect();
        hits.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1])));
        hits.truncate(topk);
        Ok(hits
            .into_iter()
            .map(|(d2, i)| Hit {
                id: self.ids[i].clone(),
                distance: d2.sqrt(),
            })
            .collect())
    }
}

/// Relevant ids per query id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    relevant: BTreeMap<String, BTreeSet<String>>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<I, S>(&mut self, query: &str, relevant: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = relevant.into_iter().map(Into::into).collect();
        if set.is_empty() {
            return Err(Error::InvalidArgument(format!("query {query:?} has no relevant items")));
        }
        self.relevant.insert(query.to_string(), set);
        Ok(())
    }

    pub fn get(&self, query: &str) -> Option<&BTreeSet<String>> {
        self.relevant.get(query)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.relevant.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.relevant.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relevant.is_empty()
    }

    /// Parses `query_id<TAB>relevant_id[,relevant_id...]` lines; blank lines
    /// and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut gt = Self::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (query, rest) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("ground truth line {}: missing tab separator", no + 1)))?;
            let ids: Vec<&str> = rest.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            gt.insert(query.trim(), ids)
                .map_err(|e| Error::Config(format!("ground truth line {}: {e}", no + 1)))?;
        }
        Ok(gt)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (q, rel) in &self.relevant {
            let ids: Vec<&str> = rel.iter().map(String::as_str).collect();
            let _ = writeln!(out, "{q}\t{}", ids.join(","));
        }
        out
    }
}

/// Mean over relevant items of precision at their rank; relevant items
/// missing from the ranking contribute zero. The query id is skipped.
pub fn average_precision(query: &str, ranking: &[String], relevant: &BTreeSet<String>) -> f64 {
    let mut found = 0usize;
    let mut total = 0.0;
    let mut rank = 0usize;
    for id in ranking.iter().filter(|id| id.as_str() != query) {
        rank += 1;
        if relevant.contains(id) {
            found += 1;
            total += found as f64 / rank as f64;
        }
    }
    total / relevant.len() as f64
}

/// Mean of the per-query average precisions.
pub fn mean_average_precision(rankings: &[(String, Vec<String>)], truth: &GroundTruth) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::InvalidArgument("no rankings to evaluate".into()));
    }
    let mut sum = 0.0;
    for (query, ranking) in rankings {
        let relevant = truth.get(query).ok_or_else(|| Error::MissingTruth(query.clone()))?;
        sum += average_precision(query, ranking, relevant);
    }
    Ok(sum / rankings.len() as f64)
}

/// Ranks the whole index for every ground-truth query (query excluded) and
/// returns the mAP.
pub fn evaluate_index(index: &RetrievalIndex, truth: &GroundTruth) -> Result<f64> {
    let mut rankings = Vec::with_capacity(truth.len());
    for query in truth.queries() {
        let pos = index
            .ids()
            .iter()
            .position(|id| id == query)
            .ok_or_else(|| Error::InvalidArgument(format!("query {query:?} is not indexed")))?;
        let hits = index.search_excluding(index.descriptor(pos), index.len(), Some(query))?;
        rankings.push((query.to_string(), hits.into_iter().map(|h| h.id).collect()));
    }
    mean_average_precision(&rankings, truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn one_d(values: &[f64], names: &[&str]) -> RetrievalIndex {
        let rows: Vec<[f64; 1]> = values.iter().map(|v| [*v]).collect();
        RetrievalIndex::new(Matrix::from_rows(&rows).unwrap(), ids(names)).unwrap()
    }

    #[test]
    fn search_examples() {
        let idx = one_d(&[0.0, 1.0, 5.0], &["0", "1", "5"]);
        let hits = idx.search(&[0.6], 10).unwrap();
        let order: Vec<&str> = hits.iter().map(|h| h.id.as_str()).collect();
        assert_eq!(order, ["1", "0", "5"]);
        assert_eq!(
            idx.search(&[5.0], 1).unwrap()[0],
            Hit {
                id: "5".into(),
                distance: 0.0
            }
        );
        assert!(matches!(idx.search(&[0.0, 1.0], 1), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn ties_break_by_id() {
        let idx = one_d(&[1.0, -1.0, 1.0], &["c", "b", "a"]);
        let order: Vec<String> = idx.search(&[0.0], 3).unwrap().into_iter().map(|h| h.id).collect();
        assert_eq!(order, ids(&["a", "b", "c"]));
    }

    #[test]
    fn rejects_duplicate_ids() {
        let m = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        assert!(RetrievalIndex::new(m, ids(&["a", "a"])).is_err());
    }

    #[test]
    fn ap_five_sixths() {
        let rel: BTreeSet<String> = ids(&["x", "z"]).into_iter().collect();
        let ap = average_precision("q", &ids(&["x", "y", "z"]), &rel);
        assert_eq!(ap, (1.0 + 2.0 / 3.0) / 2.0);
    }

    #[test]
    fn query_is_skipped_and_missing_items_count_zero() {
        let rel: BTreeSet<String> = ids(&["x", "w"]).into_iter().collect();
        assert_eq!(average_precision("q", &ids(&["q", "x"]), &rel), 0.5);
        assert_eq!(average_precision("q", &ids(&["a", "b"]), &rel), 0.0);
    }

    #[test]
    fn map_requires_truth() {
        let gt = GroundTruth::parse("q\tx\n").unwrap();
        let r = vec![("q".to_string(), ids(&["x"])), ("other".to_string(), ids(&["x"]))];
        assert!(matches!(mean_average_precision(&r, &gt), Err(Error::MissingTruth(q)) if q == "other"));
        assert_eq!(mean_average_precision(&r[..1], &gt).unwrap(), 1.0);
    }

    #[test]
    fn ground_truth_text() {
        let gt = GroundTruth::parse("# holiday style\nq1\ta,b\n\nq2\tc\n").unwrap();
        assert_eq!(gt.len(), 2);
        assert_eq!(gt.to_text(), "q1\ta,b\nq2\tc\n");
        assert!(GroundTruth::parse("q1 a\n").is_err());
        assert!(GroundTruth::parse("q1\t\n").is_err());
    }
}
