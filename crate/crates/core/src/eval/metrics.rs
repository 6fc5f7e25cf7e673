use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{EvalError, Qrels, Run};

/// A rank-cutoff metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Precision(usize),
    Ndcg(usize),
    AveragePrecision(usize),
}

impl Metric {
    /// P@10, NDCG@3, NDCG@10, MAP@100.
    pub const STANDARD: [Metric; 4] = [
        Metric::Precision(10),
        Metric::Ndcg(3),
        Metric::Ndcg(10),
        Metric::AveragePrecision(100),
    ];

    pub fn cutoff(self) -> usize {
        match self {
            Metric::Precision(k) | Metric::Ndcg(k) | Metric::AveragePrecision(k) => k,
        }
    }

    pub fn compute(self, ranking: &[(String, f64)], judged: &BTreeMap<String, i32>, gain: Gain) -> f64 {
        match self {
            Metric::Precision(k) => precision_at_k(ranking, judged, k),
            Metric::Ndcg(k) => ndcg_at_k(ranking, judged, k, gain),
            Metric::AveragePrecision(k) => average_precision_at_k(ranking, judged, k),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Precision(k) => write!(f, "P@{k}"),
            Metric::Ndcg(k) => write!(f, "NDCG@{k}"),
            Metric::AveragePrecision(k) => write!(f, "MAP@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EvalError::UnknownMetric(s.to_string());
        let (name, k) = s.trim().split_once('@').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        match name.to_ascii_uppercase().as_str() {
            "P" => Ok(Metric::Precision(k)),
            "NDCG" => Ok(Metric::Ndcg(k)),
            "MAP" | "AP" => Ok(Metric::AveragePrecision(k)),
            _ => Err(bad()),
        }
    }
}

pub fn parse_metric_list(s: &str) -> Result<Vec<Metric>, EvalError> {
    s.split(',')
        .filter(|m| !m.trim().is_empty())
        .map(str::parse)
        .collect()
}

/// Gain function used by NDCG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gain {
    /// gain = grade
    #[default]
    Linear,
    /// gain = 2^grade - 1
    Exponential,
}

impl Gain {
    fn apply(self, grade: i32) -> f64 {
        match self {
            Gain::Linear => grade as f64,
            Gain::Exponential => 2f64.powi(grade) - 1.0,
        }
    }
}

fn grade_of(judged: &BTreeMap<String, i32>, doc: &str) -> i32 {
    judged.get(doc).copied().unwrap_or(0).max(0)
}

/// Relevant documents in the top k, divided by k.
pub fn precision_at_k(ranking: &[(String, f64)], judged: &BTreeMap<String, i32>, k: usize) -> f64 {
    let hits = ranking
        .iter()
        .take(k)
        .filter(|(d, _)| grade_of(judged, d) > 0)
        .count();
    hits as f64 / k as f64
}

pub fn ndcg_at_k(
    ranking: &[(String, f64)],
    judged: &BTreeMap<String, i32>,
    k: usize,
    gain: Gain,
) -> f64 {
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, (d, _))| gain.apply(grade_of(judged, d)) / ((i + 2) as f64).log2())
        .sum();
    let mut ideal: Vec<i32> = judged.values().copied().filter(|&g| g > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain.apply(g) / ((i + 2) as f64).log2())
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Average precision over the top k with the total relevant count as denominator.
pub fn average_precision_at_k(
    ranking: &[(String, f64)],
    judged: &BTreeMap<String, i32>,
    k: usize,
) -> f64 {
    let total_relevant = judged.values().filter(|&&g| g > 0).count();
    if total_relevant == 0 {
        return 0.0;
    }
    let mut found = 0usize;
    let mut sum = 0.0;
    for (i, (d, _)) in ranking.iter().take(k).enumerate() {
        if grade_of(judged, d) > 0 {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    sum / total_relevant as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_query: BTreeMap<String, BTreeMap<String, f64>>,
    pub aggregate: BTreeMap<String, f64>,
    pub evaluated_query_count: usize,
}

impl EvalReport {
    pub fn metric_values(&self, metric: &Metric) -> Vec<(String, f64)> {
        let name = metric.to_string();
        self.per_query
            .iter()
            .map(|(q, m)| (q.clone(), m.get(&name).copied().unwrap_or(0.0)))
            .collect()
    }

    /// Aligned text table: one row per query and a final mean row.
    pub fn to_table(&self, metrics: &[Metric]) -> String {
        let names: Vec<String> = metrics.iter().map(|m| m.to_string()).collect();
        let qwidth = self
            .per_query
            .keys()
            .map(|q| q.len())
            .chain([5])
            .max()
            .unwrap_or(5);
        let mut out = format!("{:<qwidth$}", "query");
        for n in &names {
            out.push_str(&format!("  {n:>8}"));
        }
        out.push('\n');
        for (q, vals) in &self.per_query {
            out.push_str(&format!("{q:<qwidth$}"));
            for n in &names {
                out.push_str(&format!("  {:>8.4}", vals.get(n).copied().unwrap_or(0.0)));
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<qwidth$}", "all"));
        for n in &names {
            out.push_str(&format!(
                "  {:>8.4}",
                self.aggregate.get(n).copied().unwrap_or(0.0)
            ));
        }
        out.push('\n');
        out
    }
}

/// Scores a run against qrels.
///
/// Evaluated queries are those in the qrels with at least one relevant
/// document. Such queries missing from the run score zero. Run queries
/// without judgments are ignored.
pub fn evaluate_run(run: &Run, qrels: &Qrels, metrics: &[Metric], gain: Gain) -> Result<EvalReport, EvalError> {
    let judged: Vec<(&str, &BTreeMap<String, i32>)> = qrels
        .iter()
        .filter(|(_, j)| j.values().any(|&g| g > 0))
        .collect();
    if !judged.iter().any(|(q, _)| run.get(q).is_some()) {
        return Err(EvalError::NoOverlap);
    }
    let empty: Vec<(String, f64)> = Vec::new();
    let mut per_query = BTreeMap::new();
    for (q, j) in &judged {
        let ranking = run.get(q).unwrap_or(&empty);
        let vals: BTreeMap<String, f64> = metrics
            .iter()
            .map(|m| (m.to_string(), m.compute(ranking, j, gain)))
            .collect();
        per_query.insert(q.to_string(), vals);
    }
    let n = per_query.len() as f64;
    let aggregate = metrics
        .iter()
        .map(|m| {
            let name = m.to_string();
            let sum: f64 = per_query.values().map(|v: &BTreeMap<String, f64>| v[&name]).sum();
            (name, sum / n)
        })
        .collect();
    Ok(EvalReport {
        per_query,
        aggregate,
        evaluated_query_count: judged.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranking(ids: &[&str]) -> Vec<(String, f64)> {
        ids.iter()
            .enumerate()
            .map(|(i, d)| (d.to_string(), -(i as f64)))
            .collect()
    }

    fn judged(pairs: &[(&str, i32)]) -> BTreeMap<String, i32> {
        pairs.iter().map(|(d, g)| (d.to_string(), *g)).collect()
    }

    #[test]
    fn precision_examples() {
        let all: Vec<String> = (0..10).map(|i| format!("d{i}")).collect();
        let ids: Vec<&str> = all.iter().map(String::as_str).collect();
        let r = ranking(&ids);
        let every = judged(&ids.iter().map(|d| (*d, 1)).collect::<Vec<_>>());
        assert_eq!(precision_at_k(&r, &every, 10), 1.0);
        assert_eq!(precision_at_k(&r, &judged(&[("x", 1)]), 10), 0.0);
        let three = judged(&[("d0", 1), ("d4", 2), ("d9", 1), ("zz", 1)]);
        assert!((precision_at_k(&r, &three, 10) - 0.3).abs() < 1e-15);
        // denominator stays k when fewer are retrieved
        assert_eq!(precision_at_k(&ranking(&["d0"]), &three, 10), 0.1);
    }

    #[test]
    fn ndcg_worked_example() {
        let j = judged(&[("d1", 1), ("d2", 2)]);
        let v = ndcg_at_k(&ranking(&["d2", "d3", "d1"]), &j, 10, Gain::Linear);
        let expected = 2.5 / (2.0 + 1.0 / 3f64.log2());
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.950234).abs() < 1e-6, "{v}");
        assert_eq!(ndcg_at_k(&ranking(&["d2", "d1"]), &j, 10, Gain::Linear), 1.0);
        assert_eq!(ndcg_at_k(&ranking(&["d2"]), &j, 1, Gain::Linear), 1.0);
    }

    #[test]
    fn exponential_gain() {
        let j = judged(&[("a", 1), ("b", 3)]);
        let v = ndcg_at_k(&ranking(&["a", "b"]), &j, 2, Gain::Exponential);
        let dcg = 1.0 + 7.0 / 3f64.log2();
        let idcg = 7.0 + 1.0 / 3f64.log2();
        assert!((v - dcg / idcg).abs() < 1e-15);
    }

    #[test]
    fn average_precision_examples() {
        let j = judged(&[("a", 1), ("c", 1)]);
        let v = average_precision_at_k(&ranking(&["a", "b", "c"]), &j, 100);
        assert!((v - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision_at_k(&ranking(&["c", "a"]), &j, 100), 1.0);
        assert_eq!(average_precision_at_k(&ranking(&["x", "y"]), &j, 100), 0.0);
        // denominator is R, not min(R, k)
        assert_eq!(average_precision_at_k(&ranking(&["a", "c"]), &j, 1), 0.5);
    }

    #[test]
    fn metric_names_parse() {
        assert_eq!("P@10".parse::<Metric>().unwrap(), Metric::Precision(10));
        assert_eq!("ndcg@3".parse::<Metric>().unwrap(), Metric::Ndcg(3));
        assert_eq!("MAP@100".parse::<Metric>().unwrap(), Metric::AveragePrecision(100));
        assert!("MRR@10".parse::<Metric>().is_err());
        assert!("P@0".parse::<Metric>().is_err());
        let list = parse_metric_list("P@10,NDCG@3,NDCG@10,MAP@100").unwrap();
        assert_eq!(list, Metric::STANDARD.to_vec());
        for m in Metric::STANDARD {
            assert_eq!(m.to_string().parse::<Metric>().unwrap(), m);
        }
    }

    #[test]
    fn evaluate_excludes_unjudged_and_zeroes_missing() {
        let qrels = Qrels::from_triples([
            ("q1", "d1", 1),
            ("q2", "d9", 1),
            ("q3", "d1", 0),
        ]);
        let mut run = Run::new("r");
        run.insert_sorted("q1".into(), vec![("d1".into(), 1.0)]);
        run.insert_sorted("q3".into(), vec![("d1".into(), 1.0)]);
        run.insert_sorted("q4".into(), vec![("d1".into(), 1.0)]);
        let rep = evaluate_run(&run, &qrels, &[Metric::Ndcg(10)], Gain::Linear).unwrap();
        assert_eq!(rep.evaluated_query_count, 2);
        assert_eq!(rep.per_query["q1"]["NDCG@10"], 1.0);
        assert_eq!(rep.per_query["q2"]["NDCG@10"], 0.0);
        assert_eq!(rep.aggregate["NDCG@10"], 0.5);

        let mut other = Run::new("r");
        other.insert_sorted("q4".into(), vec![("d1".into(), 1.0)]);
        assert!(matches!(
            evaluate_run(&other, &qrels, &[Metric::Ndcg(10)], Gain::Linear),
            Err(EvalError::NoOverlap)
        ));
    }

    #[test]
    fn table_has_a_row_per_query_plus_mean() {
        let qrels = Qrels::from_triples([("q1", "d1", 1)]);
        let mut run = Run::new("r");
        run.insert_sorted("q1".into(), vec![("d1".into(), 1.0)]);
        let rep = evaluate_run(&run, &qrels, &Metric::STANDARD, Gain::Linear).unwrap();
        let table = rep.to_table(&Metric::STANDARD);
        assert_eq!(table.lines().count(), 3);
        assert!(table.lines().last().unwrap().starts_with("all"));
    }
}
