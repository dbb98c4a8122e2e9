//! Patient similarity graph: pooled colour histograms, Jensen–Shannon
//! distances and DOT export.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::cohort::{diagnostic_flag, Cohort, PatientRecord};
use crate::error::{Error, Result};
use crate::uncertainty::UncertaintyReport;

pub const DEFAULT_BINS: usize = 32;
/// Node sizes are a linear rescale of entropy onto this range.
pub const NODE_SIZE_RANGE: [f64; 2] = [0.2, 2.0];

const MEETS_COLOR: &str = "#c0392b";
const BELOW_COLOR: &str = "#2e86c1";

/// Normalised per-channel histograms over `[0, 1]`, pooled over every patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientHistogram {
    pub patient_id: String,
    pub bins: usize,
    pub channels: [Vec<f64>; 3],
}

pub fn patient_histogram(patient: &PatientRecord, bins: usize) -> Result<PatientHistogram> {
    if bins < 2 {
        return Err(Error::invalid(format!(
            "{bins} histogram bins; need at least 2"
        )));
    }
    if patient.patches.is_empty() {
        return Err(Error::invalid(format!(
            "patient {} has no patches",
            patient.patient_id
        )));
    }
    let mut counts = [vec![0u64; bins], vec![0u64; bins], vec![0u64; bins]];
    for patch in &patient.patches {
        for px in patch.image.chunks_exact(3) {
            for (c, &v) in px.iter().enumerate() {
                let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
                counts[c][b] += 1;
            }
        }
    }
    let channels = counts.map(|c| {
        let total: u64 = c.iter().sum();
        c.iter().map(|&k| k as f64 / total as f64).collect()
    });
    Ok(PatientHistogram {
        patient_id: patient.patient_id.clone(),
        bins,
        channels,
    })
}

fn kl_to_mixture(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (2.0 * a / (a + b)).ln())
        .sum()
}

/// Jensen–Shannon divergence in nats, averaged over the three channels.
pub fn patient_distance(a: &PatientHistogram, b: &PatientHistogram) -> Result<f64> {
    if a.bins != b.bins {
        return Err(Error::invalid(format!(
            "bin counts differ: {} vs {}",
            a.bins, b.bins
        )));
    }
    let js: f64 = a
        .channels
        .iter()
        .zip(&b.channels)
        .map(|(p, q)| 0.5 * kl_to_mixture(p, q) + 0.5 * kl_to_mixture(q, p))
        .sum();
    Ok((js / 3.0).clamp(0.0, LN_2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub patient_id: String,
    pub entropy: f64,
    /// Mean distance to every other patient.
    pub uniqueness: f64,
    pub size: f64,
    pub meets_criteria: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphEdge {
    pub a: String,
    pub b: String,
    /// `1 − distance / ln 2`.
    pub weight: f64,
}

/// Nodes and edges sorted by patient id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PatientGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

impl PatientGraph {
    /// Node ids from most to least unique; unique patients belong on the periphery.
    pub fn layout_order(&self) -> Vec<&str> {
        let mut order: Vec<&GraphNode> = self.nodes.iter().collect();
        order.sort_by(|a, b| {
            b.uniqueness
                .total_cmp(&a.uniqueness)
                .then_with(|| a.patient_id.cmp(&b.patient_id))
        });
        order.into_iter().map(|n| n.patient_id.as_str()).collect()
    }
}

/// Symmetric distance matrix with a zero diagonal.
pub fn distance_matrix(hists: &[PatientHistogram]) -> Result<Vec<Vec<f64>>> {
    let n = hists.len();
    let upper = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| patient_distance(&hists[i], &hists[j]))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut d = vec![vec![0.0; n]; n];
    for (i, row) in upper.into_iter().enumerate() {
        for (k, v) in row.into_iter().enumerate() {
            d[i][i + 1 + k] = v;
            d[i + 1 + k][i] = v;
        }
    }
    Ok(d)
}

pub fn uniqueness_scores(d: &[Vec<f64>]) -> Vec<f64> {
    let n = d.len();
    d.iter()
        .map(|row| {
            if n < 2 {
                0.0
            } else {
                row.iter().sum::<f64>() / (n - 1) as f64
            }
        })
        .collect()
}

fn node_sizes(entropies: &[f64]) -> Vec<f64> {
    let [lo, hi] = NODE_SIZE_RANGE;
    let min = entropies.iter().copied().fold(f64::INFINITY, f64::min);
    let max = entropies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    entropies
        .iter()
        .map(|&e| {
            if max > min {
                lo + (hi - lo) * (e - min) / (max - min)
            } else {
                0.5 * (lo + hi)
            }
        })
        .collect()
}

pub fn build_graph(
    cohort: &Cohort,
    report: &UncertaintyReport,
    edge_threshold: f64,
) -> Result<PatientGraph> {
    build_graph_with_bins(cohort, report, edge_threshold, DEFAULT_BINS)
}

pub fn build_graph_with_bins(
    cohort: &Cohort,
    report: &UncertaintyReport,
    edge_threshold: f64,
    bins: usize,
) -> Result<PatientGraph> {
    let mut patients: Vec<&PatientRecord> = cohort.patients.iter().collect();
    patients.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    let entropies = patients
        .iter()
        .map(|p| {
            report
                .entropy_of(&p.patient_id)
                .ok_or_else(|| Error::invalid(format!("no uncertainty entry for {}", p.patient_id)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let hists = patients
        .par_iter()
        .map(|p| patient_histogram(p, bins))
        .collect::<Result<Vec<_>>>()?;
    let d = distance_matrix(&hists)?;
    let uniq = uniqueness_scores(&d);
    let sizes = node_sizes(&entropies);
    let nodes = patients
        .iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(GraphNode {
                patient_id: p.patient_id.clone(),
                entropy: entropies[i],
                uniqueness: uniq[i],
                size: sizes[i],
                meets_criteria: diagnostic_flag(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut edges = Vec::new();
    for i in 0..patients.len() {
        for j in i + 1..patients.len() {
            if d[i][j] < edge_threshold {
                edges.push(GraphEdge {
                    a: patients[i].patient_id.clone(),
                    b: patients[j].patient_id.clone(),
                    weight: (1.0 - d[i][j] / LN_2).clamp(0.0, 1.0),
                });
            }
        }
    }
    Ok(PatientGraph { nodes, edges })
}

/// Undirected DOT document. Nodes and edges are emitted in id order, so equal
/// graphs give identical bytes.
pub fn export_dot(graph: &PatientGraph) -> String {
    let mut nodes: Vec<&GraphNode> = graph.nodes.iter().collect();
    nodes.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    let mut edges: Vec<&GraphEdge> = graph.edges.iter().collect();
    edges.sort_by(|x, y| (&x.a, &x.b).cmp(&(&y.a, &y.b)));
    let mut out = String::from("graph patients {\n  layout=neato;\n  overlap=false;\n  node [shape=circle, style=filled, label=\"\"];\n");
    for n in nodes {
        let color = if n.meets_criteria {
            MEETS_COLOR
        } else {
            BELOW_COLOR
        };
        let _ = writeln!(
            out,
            "  \"{}\" [width={:.4}, fillcolor=\"{}\", tooltip=\"entropy {:.6}, uniqueness {:.6}\"];",
            n.patient_id, n.size, color, n.entropy, n.uniqueness
        );
    }
    for e in edges {
        let _ = writeln!(
            out,
            "  \"{}\" -- \"{}\" [weight={:.6}, len={:.6}];",
            e.a,
            e.b,
            e.weight,
            1.0 + (1.0 - e.weight) * 4.0
        );
    }
    out.push_str("}\n");
    out
}

pub const GRAPH_TSV_HEADER: &str = "patient_id\tentropy_nats\tuniqueness\tmeets_criteria";

/// One row per node: id, entropy, uniqueness, diagnostic flag.
pub fn graph_tsv(graph: &PatientGraph) -> String {
    let mut out = format!("{GRAPH_TSV_HEADER}\n");
    let sorted: BTreeMap<&str, &GraphNode> = graph
        .nodes
        .iter()
        .map(|n| (n.patient_id.as_str(), n))
        .collect();
    for n in sorted.values() {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            n.patient_id, n.entropy, n.uniqueness, n.meets_criteria
        );
    }
    out
}

/// Average ranks, ties sharing the mean of their positions (1-based).
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid(
            "spearman needs two equal-length series of at least 2 values",
        ));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid(
            "spearman is undefined for a constant series",
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Correlation between node entropy and uniqueness.
pub fn entropy_uniqueness_correlation(graph: &PatientGraph) -> Result<f64> {
    let e: Vec<f64> = graph.nodes.iter().map(|n| n.entropy).collect();
    let u: Vec<f64> = graph.nodes.iter().map(|n| n.uniqueness).collect();
    spearman(&e, &u)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(ch: Vec<f64>) -> PatientHistogram {
        PatientHistogram {
            patient_id: "x".into(),
            bins: ch.len(),
            channels: [ch.clone(), ch.clone(), ch],
        }
    }

    #[test]
    fn disjoint_support_is_ln2() {
        let a = hist(vec![1.0, 0.0]);
        let b = hist(vec![0.0, 1.0]);
        assert!((patient_distance(&a, &b).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(patient_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn bin_mismatch_is_an_error() {
        assert!(patient_distance(&hist(vec![0.5, 0.5]), &hist(vec![1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_graph_is_header_and_footer() {
        let dot = export_dot(&PatientGraph::default());
        assert!(dot.starts_with("graph patients {"));
        assert!(dot.ends_with("}\n"));
        assert!(!dot.contains("--"));
    }
}
