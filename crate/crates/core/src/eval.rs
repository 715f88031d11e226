//! Ranking metrics and TREC-format I/O.
//!
//! Run files are the standard 6-column exchange format
//! (`qid Q0 docid rank score tag`); qrels are 4-column
//! (`qid 0 docid grade`). nDCG uses exponential gain `2^grade - 1` with a
//! `log2(rank + 1)` discount; MRR counts grades >= 1 as relevant. Both
//! metrics depend only on the ordering of documents, never on score
//! magnitudes.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::error::{Error, Result};

/// One line of a TREC run file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub qid: String,
    /// The conventional literal second column; preserved verbatim.
    pub q0: String,
    pub doc_id: String,
    /// 1-based rank within the query.
    pub rank: u32,
    pub score: f64,
    pub tag: String,
}

impl RunEntry {
    pub fn new(qid: &str, doc_id: &str, rank: u32, score: f64, tag: &str) -> Self {
        RunEntry {
            qid: qid.to_string(),
            q0: "Q0".to_string(),
            doc_id: doc_id.to_string(),
            rank,
            score,
            tag: tag.to_string(),
        }
    }
}

/// Graded relevance judgments.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    by_query: HashMap<String, HashMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Qrels::default()
    }

    pub fn insert(&mut self, qid: &str, doc_id: &str, grade: u32) {
        self.by_query
            .entry(qid.to_string())
            .or_default()
            .insert(doc_id.to_string(), grade);
    }

    /// Grade of a pair; unjudged documents count as 0.
    pub fn grade(&self, qid: &str, doc_id: &str) -> u32 {
        self.by_query
            .get(qid)
            .and_then(|docs| docs.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    /// Whether the query has any judgments at all.
    pub fn has_query(&self, qid: &str) -> bool {
        self.by_query.contains_key(qid)
    }

    /// All judged grades for a query.
    pub fn grades(&self, qid: &str) -> Vec<u32> {
        self.by_query
            .get(qid)
            .map(|docs| docs.values().copied().collect())
            .unwrap_or_default()
    }

    /// Number of (query, doc) pairs with grade >= 1.
    pub fn relevant_pairs(&self) -> usize {
        self.by_query
            .values()
            .map(|docs| docs.values().filter(|&&g| g >= 1).count())
            .sum()
    }
}

/// nDCG@k of a ranked document list for one query: DCG@k / IDCG@k with
/// gain `2^grade - 1` and discount `log2(rank + 1)`. Queries without any
/// relevant document (or without judgments) score 0.
pub fn ndcg_at_k<S: AsRef<str>>(ranking: &[S], qrels: &Qrels, qid: &str, k: usize) -> f64 {
    assert!(k >= 1, "ndcg_at_k requires k >= 1");
    let gain = |grade: u32| 2f64.powi(grade as i32) - 1.0;
    let discount = |pos: usize| ((pos + 2) as f64).log2();
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(pos, doc)| gain(qrels.grade(qid, doc.as_ref())) / discount(pos))
        .sum();
    let mut grades = qrels.grades(qid);
    grades.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(pos, &grade)| gain(grade) / discount(pos))
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Reciprocal rank of the first document with grade >= 1 within the top
/// k, else 0.
pub fn mrr_at_k<S: AsRef<str>>(ranking: &[S], qrels: &Qrels, qid: &str, k: usize) -> f64 {
    assert!(k >= 1, "mrr_at_k requires k >= 1");
    for (pos, doc) in ranking.iter().take(k).enumerate() {
        if qrels.grade(qid, doc.as_ref()) >= 1 {
            return 1.0 / (pos + 1) as f64;
        }
    }
    0.0
}

/// A metric selector, parsed from forms like `ndcg@20` or `mrr@100`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Ndcg { k: usize },
    Mrr { k: usize },
}

impl Metric {
    pub fn compute<S: AsRef<str>>(&self, ranking: &[S], qrels: &Qrels, qid: &str) -> f64 {
        match *self {
            Metric::Ndcg { k } => ndcg_at_k(ranking, qrels, qid, k),
            Metric::Mrr { k } => mrr_at_k(ranking, qrels, qid, k),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, k) = s
            .split_once('@')
            .ok_or_else(|| Error::InvalidInput(format!("metric {s:?} is not of the form name@k")))?;
        let k: usize = k
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad metric cutoff in {s:?}")))?;
        if k == 0 {
            return Err(Error::InvalidInput("metric cutoff must be at least 1".into()));
        }
        match name.to_ascii_lowercase().as_str() {
            "ndcg" => Ok(Metric::Ndcg { k }),
            "mrr" => Ok(Metric::Mrr { k }),
            other => Err(Error::InvalidInput(format!("unknown metric {other:?}"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Ndcg { k } => write!(f, "ndcg@{k}"),
            Metric::Mrr { k } => write!(f, "mrr@{k}"),
        }
    }
}

/// Mean of a metric over every query present in the run, in first-seen
/// order. Queries with no qrels entry contribute 0 and are counted in
/// `unjudged_queries`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanReport {
    pub mean: f64,
    pub query_count: usize,
    pub unjudged_queries: usize,
}

pub fn evaluate_run(run: &[RunEntry], qrels: &Qrels, metric: Metric) -> MeanReport {
    let mut order: Vec<&str> = Vec::new();
    let mut by_query: HashMap<&str, Vec<&str>> = HashMap::new();
    for entry in run {
        let docs = by_query.entry(entry.qid.as_str()).or_insert_with(|| {
            order.push(entry.qid.as_str());
            Vec::new()
        });
        docs.push(entry.doc_id.as_str());
    }
    let mut total = 0.0;
    let mut unjudged = 0;
    for qid in &order {
        if !qrels.has_query(qid) {
            unjudged += 1;
            continue;
        }
        total += metric.compute(&by_query[qid], qrels, qid);
    }
    let n = order.len();
    MeanReport {
        mean: if n == 0 { 0.0 } else { total / n as f64 },
        query_count: n,
        unjudged_queries: unjudged,
    }
}

/// Parse a run file, enforcing per-query rank contiguity (1..n in file
/// order) and non-increasing scores.
pub fn read_run<R: BufRead>(r: R) -> Result<Vec<RunEntry>> {
    let mut out: Vec<RunEntry> = Vec::new();
    let mut last_by_query: HashMap<String, (u32, f64)> = HashMap::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 6 columns, got {}", fields.len()),
            });
        }
        let rank: u32 = fields[3].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad rank {:?}", fields[3]),
        })?;
        let score: f64 = fields[4].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad score {:?}", fields[4]),
        })?;
        let entry = RunEntry {
            qid: fields[0].to_string(),
            q0: fields[1].to_string(),
            doc_id: fields[2].to_string(),
            rank,
            score,
            tag: fields[5].to_string(),
        };
        match last_by_query.get(&entry.qid) {
            None => {
                if rank != 1 {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("query {} starts at rank {rank}, expected 1", entry.qid),
                    });
                }
            }
            Some(&(last_rank, last_score)) => {
                if rank != last_rank + 1 {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!(
                            "query {} jumps from rank {last_rank} to {rank}",
                            entry.qid
                        ),
                    });
                }
                if score > last_score {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!(
                            "query {} score increases from {last_score} to {score}",
                            entry.qid
                        ),
                    });
                }
            }
        }
        last_by_query.insert(entry.qid.clone(), (rank, score));
        out.push(entry);
    }
    Ok(out)
}

/// Write a run file; scores are printed with 6 decimal places, so writing
/// the result of `read_run` reproduces the input byte for byte.
pub fn write_run<W: Write>(w: &mut W, entries: &[RunEntry]) -> Result<()> {
    for e in entries {
        writeln!(
            w,
            "{} {} {} {} {:.6} {}",
            e.qid, e.q0, e.doc_id, e.rank, e.score, e.tag
        )?;
    }
    Ok(())
}

/// Parse a qrels file. Duplicate (qid, doc) pairs keep the last grade; a
/// warning string is returned for each.
pub fn read_qrels<R: BufRead>(r: R) -> Result<(Qrels, Vec<String>)> {
    let mut qrels = Qrels::new();
    let mut warnings = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 4 columns, got {}", fields.len()),
            });
        }
        let grade: u32 = fields[3].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad relevance grade {:?}", fields[3]),
        })?;
        if qrels.has_query(fields[0]) && qrels.by_query[fields[0]].contains_key(fields[2]) {
            warnings.push(format!(
                "line {lineno}: duplicate judgment for ({}, {}), keeping grade {grade}",
                fields[0], fields[2]
            ));
        }
        qrels.insert(fields[0], fields[2], grade);
    }
    Ok((qrels, warnings))
}

/// Write a qrels file.
pub fn write_qrels<W: Write>(w: &mut W, qrels: &Qrels) -> Result<()> {
    let mut qids: Vec<&String> = qrels.by_query.keys().collect();
    qids.sort();
    for qid in qids {
        let mut docs: Vec<(&String, &u32)> = qrels.by_query[qid].iter().collect();
        docs.sort();
        for (doc, grade) in docs {
            writeln!(w, "{qid} 0 {doc} {grade}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qrels_from(pairs: &[(&str, &str, u32)]) -> Qrels {
        let mut q = Qrels::new();
        for (qid, doc, grade) in pairs {
            q.insert(qid, doc, *grade);
        }
        q
    }

    #[test]
    fn ndcg_ideal_is_one() {
        let qrels = qrels_from(&[("q", "a", 2), ("q", "b", 1), ("q", "c", 0)]);
        let ranking = ["a", "b", "c"];
        assert_eq!(ndcg_at_k(&ranking, &qrels, "q", 3), 1.0);
    }

    #[test]
    fn ndcg_no_relevant_is_zero() {
        let qrels = qrels_from(&[("q", "a", 0)]);
        assert_eq!(ndcg_at_k(&["a", "b"], &qrels, "q", 2), 0.0);
        assert_eq!(ndcg_at_k(&["a", "b"], &qrels, "other", 2), 0.0);
    }

    #[test]
    fn ndcg_hand_example() {
        // Grades by rank [0, 2, 1]; ideal [2, 1, 0].
        let qrels = qrels_from(&[("q", "a", 0), ("q", "b", 2), ("q", "c", 1)]);
        let got = ndcg_at_k(&["a", "b", "c"], &qrels, "q", 3);
        let dcg = 3.0 / 3f64.log2() + 1.0 / 4f64.log2();
        let idcg = 3.0 + 1.0 / 3f64.log2();
        assert!((dcg - 2.39279).abs() < 1e-4);
        assert!((idcg - 3.63093).abs() < 1e-4);
        assert!((got - 0.6590).abs() < 1e-4);
    }

    #[test]
    fn mrr_examples() {
        let qrels = qrels_from(&[("q", "rel", 1)]);
        assert_eq!(mrr_at_k(&["rel", "x"], &qrels, "q", 10), 1.0);
        assert!((mrr_at_k(&["x", "y", "rel"], &qrels, "q", 10) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(mrr_at_k(&["x", "y"], &qrels, "q", 2), 0.0);
        assert_eq!(mrr_at_k(&["x", "y", "rel"], &qrels, "q", 2), 0.0);
    }

    #[test]
    fn run_roundtrip_is_fixed_point() {
        let text = "7 Q0 d12 1 3.140000 mores\n7 Q0 d9 2 1.500000 mores\n";
        let run = read_run(text.as_bytes()).unwrap();
        let mut out = Vec::new();
        write_run(&mut out, &run).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    #[test]
    fn run_rejects_five_columns_with_line_number() {
        let text = "7 Q0 d12 1 3.14 mores\n7 Q0 d9 2 1.5\n";
        let err = read_run(text.as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn run_rejects_rank_gap() {
        let text = "7 Q0 a 1 2.0 t\n7 Q0 b 3 1.0 t\n";
        assert!(read_run(text.as_bytes()).is_err());
    }

    #[test]
    fn run_rejects_increasing_scores() {
        let text = "7 Q0 a 1 1.0 t\n7 Q0 b 2 2.0 t\n";
        assert!(read_run(text.as_bytes()).is_err());
    }

    #[test]
    fn qrels_parse_and_duplicates() {
        let (qrels, warnings) = read_qrels("7 0 d12 2\n".as_bytes()).unwrap();
        assert_eq!(qrels.grade("7", "d12"), 2);
        assert!(warnings.is_empty());

        let (qrels, warnings) = read_qrels("7 0 d 1\n7 0 d 0\n".as_bytes()).unwrap();
        assert_eq!(qrels.grade("7", "d"), 0);
        assert_eq!(warnings.len(), 1);

        let (qrels, _) = read_qrels("".as_bytes()).unwrap();
        assert_eq!(qrels.relevant_pairs(), 0);
    }

    #[test]
    fn qrels_rejects_non_integer_grade() {
        assert!(read_qrels("7 0 d two\n".as_bytes()).is_err());
    }

    #[test]
    fn metric_parsing() {
        assert_eq!("ndcg@20".parse::<Metric>().unwrap(), Metric::Ndcg { k: 20 });
        assert_eq!("mrr@100".parse::<Metric>().unwrap(), Metric::Mrr { k: 100 });
        assert!("map@10".parse::<Metric>().is_err());
        assert!("ndcg".parse::<Metric>().is_err());
    }

    #[test]
    fn evaluate_counts_unjudged_queries() {
        let qrels = qrels_from(&[("q1", "a", 1)]);
        let run = vec![
            RunEntry::new("q1", "a", 1, 2.0, "t"),
            RunEntry::new("q2", "b", 1, 1.0, "t"),
        ];
        let report = evaluate_run(&run, &qrels, Metric::Mrr { k: 10 });
        assert_eq!(report.query_count, 2);
        assert_eq!(report.unjudged_queries, 1);
        assert!((report.mean - 0.5).abs() < 1e-12);
    }
}
