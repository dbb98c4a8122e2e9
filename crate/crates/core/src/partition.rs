//! Uncertainty tertiles, source/target combinations and result averaging.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::data::DomainSet;
use crate::error::{Error, Result};
use crate::metrics::{Fid, MetricsRecord};
use crate::nn::TrainConfig;
use crate::uncertainty::UncertaintyReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Low,
    Medium,
    High,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Low, Domain::Medium, Domain::High];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Low => "low",
            Domain::Medium => "medium",
            Domain::High => "high",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Domain::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown domain `{s}`")))
    }
}

/// Patient ids per tertile, each list in ascending-entropy order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainPartition {
    pub low: Vec<String>,
    pub medium: Vec<String>,
    pub high: Vec<String>,
}

const PARTITION_HEADER: &str = "patient_id\tdomain";

impl DomainPartition {
    pub fn get(&self, d: Domain) -> &[String] {
        match d {
            Domain::Low => &self.low,
            Domain::Medium => &self.medium,
            Domain::High => &self.high,
        }
    }

    pub fn domain_of(&self, id: &str) -> Option<Domain> {
        Domain::ALL
            .into_iter()
            .find(|&d| self.get(d).iter().any(|p| p == id))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{PARTITION_HEADER}\n");
        for d in Domain::ALL {
            for id in self.get(d) {
                out.push_str(&format!("{id}\t{d}\n"));
            }
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(PARTITION_HEADER) {
            return Err(Error::Corrupt("partition header missing".into()));
        }
        let mut p = DomainPartition {
            low: Vec::new(),
            medium: Vec::new(),
            high: Vec::new(),
        };
        for line in lines.filter(|l| !l.is_empty()) {
            let (id, d) = line
                .split_once('\t')
                .ok_or_else(|| Error::Corrupt(format!("partition row `{line}`")))?;
            let list = match d.parse::<Domain>()? {
                Domain::Low => &mut p.low,
                Domain::Medium => &mut p.medium,
                Domain::High => &mut p.high,
            };
            list.push(id.to_string());
        }
        Ok(p)
    }
}

/// Sorts by ascending entropy (ties by id) and cuts into thirds. When the
/// count is not divisible by three the extra patients go to `low` first,
/// then `medium`.
pub fn partition_tertiles(report: &UncertaintyReport) -> Result<DomainPartition> {
    let n = report.entries.len();
    if n < 3 {
        return Err(Error::invalid(format!(
            "{n} patients cannot form three tertiles"
        )));
    }
    let mut sorted: Vec<_> = report.entries.iter().collect();
    sorted.sort_by(|a, b| {
        a.entropy
            .total_cmp(&b.entropy)
            .then_with(|| a.patient_id.cmp(&b.patient_id))
    });
    let ids: Vec<String> = sorted.iter().map(|e| e.patient_id.clone()).collect();
    let (base, rem) = (n / 3, n % 3);
    let n_low = base + usize::from(rem >= 1);
    let n_mid = base + usize::from(rem >= 2);
    Ok(DomainPartition {
        low: ids[..n_low].to_vec(),
        medium: ids[n_low..n_low + n_mid].to_vec(),
        high: ids[n_low + n_mid..].to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub sources: Vec<Domain>,
    pub target: Domain,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::invalid(
                "an experiment needs at least one source domain",
            ));
        }
        if self.sources.contains(&self.target) {
            return Err(Error::invalid(format!(
                "target {} is also a source",
                self.target
            )));
        }
        self.train.validate()
    }

    /// Short label such as `medium+high->low`.
    pub fn label(&self) -> String {
        let src: Vec<&str> = self.sources.iter().map(|d| d.name()).collect();
        format!("{}->{}", src.join("+"), self.target)
    }
}

/// Each tertile is the target once, with the other two as sources, in the
/// order low, medium, high.
pub fn enumerate_combinations(train: &TrainConfig) -> Vec<ExperimentConfig> {
    Domain::ALL
        .into_iter()
        .map(|target| ExperimentConfig {
            sources: Domain::ALL.into_iter().filter(|&d| d != target).collect(),
            target,
            train: train.clone(),
        })
        .collect()
}

/// Field-wise mean of records for one model. FID averages over the records
/// that have one; it is flagged partial when only some do and is
/// not-applicable when none do.
pub fn average_results(records: &[MetricsRecord]) -> Result<MetricsRecord> {
    let first = records
        .first()
        .ok_or_else(|| Error::invalid("no records to average"))?;
    if records.iter().any(|r| r.model != first.model) {
        return Err(Error::invalid("cannot average records of different models"));
    }
    let n = records.len() as f64;
    let fids: Vec<(f64, bool)> = records
        .iter()
        .filter_map(|r| match r.fid {
            Fid::Value(v) => Some((v, true)),
            Fid::Partial(v) => Some((v, false)),
            Fid::NotApplicable => None,
        })
        .collect();
    let fid = if fids.is_empty() {
        Fid::NotApplicable
    } else {
        let mean = fids.iter().map(|f| f.0).sum::<f64>() / fids.len() as f64;
        if fids.len() == records.len() && fids.iter().all(|f| f.1) {
            Fid::Value(mean)
        } else {
            Fid::Partial(mean)
        }
    };
    Ok(MetricsRecord {
        model: first.model.clone(),
        fid,
        precision: records.iter().map(|r| r.precision).sum::<f64>() / n,
        recall: records.iter().map(|r| r.recall).sum::<f64>() / n,
    })
}

/// Data for one combination: labelled source domains, the target's
/// adaptation half (masks locked) and its held-out evaluation half.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub sources: Vec<DomainSet>,
    pub target_adapt: DomainSet,
    pub target_eval: DomainSet,
}

impl ExperimentData {
    pub fn build(
        cohort: &Cohort,
        partition: &DomainPartition,
        exp: &ExperimentConfig,
    ) -> Result<Self> {
        exp.validate()?;
        let sources = exp
            .sources
            .iter()
            .map(|&d| DomainSet::from_patients(d.name(), cohort, partition.get(d)))
            .collect::<Result<Vec<_>>>()?;
        if sources.iter().any(DomainSet::is_empty) {
            return Err(Error::invalid("a source domain has no patches"));
        }
        let target =
            DomainSet::from_patients(exp.target.name(), cohort, partition.get(exp.target))?;
        if target.len() < 2 {
            return Err(Error::invalid("target domain needs at least two patches"));
        }
        let (adapt, eval) = target.split_alternate()?;
        Ok(Self {
            sources,
            target_adapt: adapt.locked(),
            target_eval: eval,
        })
    }

    /// All source patches pooled into one labelled set.
    pub fn pooled_sources(&self) -> Result<DomainSet> {
        let mut patches = Vec::new();
        let mut owners = Vec::new();
        for s in &self.sources {
            for (p, o) in s.labelled_patches()?.into_iter().zip(s.owners()) {
                patches.push(p.clone());
                owners.push(o.clone());
            }
        }
        DomainSet::new("sources", patches, owners)
    }
}
