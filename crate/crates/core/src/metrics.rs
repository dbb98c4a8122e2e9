//! Fréchet distance on substitute embeddings, pixel precision/recall and the
//! results table.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

/// Side of the pooled grid used by the raw embedder.
pub const RAW_GRID: usize = 8;
/// Eigenvalues above `-PSD_TOLERANCE · scale` count as numerical drift and are clamped.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// How images become feature vectors for the Fréchet distance.
#[derive(Clone, Copy)]
pub enum Embedder<'a> {
    /// Channel-mean grayscale, average-pooled to 8×8 and flattened (d = 64).
    RawDownsample,
    /// Eval-mode encoder bottleneck of a trained UNet, averaged over space.
    TrainedEncoder(&'a Model),
}

/// Embeds a `[N, C, H, W]` batch.
pub fn feature_embed(images: &Tensor, embedder: Embedder<'_>) -> Result<Vec<Vec<f64>>> {
    let shape = images.shape();
    if shape.len() != 4 {
        return Err(Error::shape(
            "feature_embed",
            format!("expected NCHW, got {shape:?}"),
        ));
    }
    match embedder {
        Embedder::RawDownsample => raw_embed(images),
        Embedder::TrainedEncoder(model) => {
            let feats = model.encode_eval(images)?;
            let fs = feats.shape().to_vec();
            let (n, c, hw) = (fs[0], fs[1], fs[2] * fs[3]);
            Ok((0..n)
                .map(|i| {
                    (0..c)
                        .map(|k| {
                            let off = (i * c + k) * hw;
                            feats.data()[off..off + hw].iter().sum::<f64>() / hw as f64
                        })
                        .collect()
                })
                .collect())
        }
    }
}

fn raw_embed(images: &Tensor) -> Result<Vec<Vec<f64>>> {
    let &[n, c, h, w] = images.shape() else {
        unreachable!()
    };
    if h < RAW_GRID || w < RAW_GRID {
        return Err(Error::shape(
            "feature_embed",
            format!("images must be at least {RAW_GRID}×{RAW_GRID}"),
        ));
    }
    let data = images.data();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut v = vec![0.0; RAW_GRID * RAW_GRID];
        for gy in 0..RAW_GRID {
            let (y0, y1) = (gy * h / RAW_GRID, (gy + 1) * h / RAW_GRID);
            for gx in 0..RAW_GRID {
                let (x0, x1) = (gx * w / RAW_GRID, (gx + 1) * w / RAW_GRID);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let mut g = 0.0;
                        for k in 0..c {
                            g += data[((i * c + k) * h + y) * w + x];
                        }
                        acc += g / c as f64;
                    }
                }
                v[gy * RAW_GRID + gx] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
        out.push(v);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mu: Vec<f64>,
    /// Row-major `d × d` covariance.
    pub sigma: Vec<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    fn sigma_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.sigma)
    }
}

/// Sample mean and unbiased covariance (zero covariance for a single vector),
/// accumulated in one streaming pass.
pub fn gaussian_stats(vectors: &[Vec<f64>]) -> Result<GaussianStats> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::invalid("no vectors to summarize"))?;
    let d = first.len();
    let mut mu = vec![0.0; d];
    let mut comoment = vec![0.0; d * d];
    let mut delta = vec![0.0; d];
    for (k, v) in vectors.iter().enumerate() {
        if v.len() != d {
            return Err(Error::shape("gaussian_stats", "vectors differ in length"));
        }
        let count = (k + 1) as f64;
        for j in 0..d {
            delta[j] = v[j] - mu[j];
            mu[j] += delta[j] / count;
        }
        for a in 0..d {
            let after = v[a] - mu[a];
            for b in 0..d {
                comoment[a * d + b] += after * delta[b];
            }
        }
    }
    let n = vectors.len();
    let sigma = if n > 1 {
        // symmetrize away the rounding asymmetry of the streaming update
        let mut s = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                s[a * d + b] = 0.5 * (comoment[a * d + b] + comoment[b * d + a]) / (n - 1) as f64;
            }
        }
        s
    } else {
        vec![0.0; d * d]
    };
    Ok(GaussianStats { mu, sigma })
}

fn checked_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let eig = SymmetricEigen::new(m);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(bad) = eig
        .eigenvalues
        .iter()
        .find(|&&l| l < -PSD_TOLERANCE * scale)
    {
        return Err(Error::invalid(format!(
            "{what} is not positive semi-definite (eigenvalue {bad:e})"
        )));
    }
    Ok(eig)
}

fn psd_sqrt(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = checked_eigen(m, what)?;
    let roots = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()),
    );
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// `‖μa−μb‖² + tr(Σa + Σb − 2(Σa Σb)^½)`, with the trace of the root taken
/// from the symmetric matrix `Σa^½ Σb Σa^½`. Negative results from rounding
/// are clamped to 0.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.sigma.len() != d * d || b.sigma.len() != d * d {
        return Err(Error::shape(
            "fid",
            format!("dimensions {} and {} differ", a.dim(), b.dim()),
        ));
    }
    let mean_term: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y).powi(2)).sum();
    let sa = a.sigma_matrix();
    let sb = b.sigma_matrix();
    let root_a = psd_sqrt(sa.clone(), "first covariance")?;
    checked_eigen(sb.clone(), "second covariance")?;
    let mut inner = &root_a * &sb * &root_a;
    inner = 0.5 * (&inner + inner.transpose());
    let eig = checked_eigen(inner, "covariance product")?;
    let cross: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let value = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Proxy FID between two `[N, C, H, W]` image sets.
pub fn image_fid(real: &Tensor, generated: &Tensor, embedder: Embedder<'_>) -> Result<f64> {
    let a = gaussian_stats(&feature_embed(real, embedder)?)?;
    let b = gaussian_stats(&feature_embed(generated, embedder)?)?;
    fid(&a, &b)
}

/// Confusion counts over binary pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PixelCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl PixelCounts {
    pub fn from_masks(pred: &[u8], gt: &[u8]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::shape(
                "precision_recall",
                format!("{} vs {} pixels", pred.len(), gt.len()),
            ));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                (0, 0) => c.tn += 1,
                _ => return Err(Error::invalid(format!("non-binary mask value ({p}, {g})"))),
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, other: &Self) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// `TP/(TP+FP)`; with no predicted positives it is 1 when there is
    /// nothing to find and 0 otherwise.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            if self.fn_ == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    /// `TP/(TP+FN)`; 1 when there are no positives.
    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }
}

pub fn precision_recall(pred: &[u8], gt: &[u8]) -> Result<(f64, f64)> {
    let c = PixelCounts::from_masks(pred, gt)?;
    Ok((c.precision(), c.recall()))
}

/// FID cell of a results row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fid {
    Value(f64),
    /// Mean over only some of the averaged records.
    Partial(f64),
    NotApplicable,
}

impl fmt::Display for Fid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fid::Value(v) => write!(f, "{v}"),
            Fid::Partial(v) => write!(f, "partial:{v}"),
            Fid::NotApplicable => f.write_str("N/A"),
        }
    }
}

impl FromStr for Fid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let num = |t: &str| {
            t.parse::<f64>()
                .map_err(|_| Error::Corrupt(format!("bad FID cell `{s}`")))
        };
        match s {
            "N/A" => Ok(Fid::NotApplicable),
            _ => match s.strip_prefix("partial:") {
                Some(rest) => num(rest).map(Fid::Partial),
                None => num(s).map(Fid::Value),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub model: String,
    pub fid: Fid,
    pub precision: f64,
    pub recall: f64,
}

impl MetricsRecord {
    pub fn new(model: impl Into<String>, fid: Fid, counts: &PixelCounts) -> Self {
        Self {
            model: model.into(),
            fid,
            precision: counts.precision(),
            recall: counts.recall(),
        }
    }
}

const TSV_HEADER: &str = "model\tfid\tprecision\trecall";

/// Machine-readable rows with full float precision.
pub fn metrics_tsv(records: &[MetricsRecord]) -> String {
    let mut out = format!("{TSV_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.model, r.fid, r.precision, r.recall
        ));
    }
    out
}

pub fn parse_metrics_tsv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(TSV_HEADER) {
        return Err(Error::Corrupt("metrics table header missing".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let cols: Vec<&str> = line.split('\t').collect();
            let [model, fid, p, r] = cols[..] else {
                return Err(Error::Corrupt(format!("metrics row `{line}`")));
            };
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Corrupt(format!("metrics value `{s}`")))
            };
            Ok(MetricsRecord {
                model: model.to_string(),
                fid: fid.parse()?,
                precision: num(p)?,
                recall: num(r)?,
            })
        })
        .collect()
}

/// Human-readable table: `Model | FID | Precision | Recall`, three decimals,
/// rows in input order.
pub fn results_table(records: &[MetricsRecord]) -> String {
    let rows: Vec<[String; 4]> = records
        .iter()
        .map(|r| {
            let fid = match r.fid {
                Fid::Value(v) => format!("{v:.3}"),
                Fid::Partial(v) => format!("{v:.3}*"),
                Fid::NotApplicable => "N/A".to_string(),
            };
            [
                r.model.clone(),
                fid,
                format!("{:.3}", r.precision),
                format!("{:.3}", r.recall),
            ]
        })
        .collect();
    let header = ["Model", "FID", "Precision", "Recall"];
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: [&str; 4]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        format!("| {} |\n", parts.join(" | "))
    };
    let mut out = line(header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
    for row in &rows {
        out.push_str(&line([&row[0], &row[1], &row[2], &row[3]]));
    }
    if records.iter().any(|r| matches!(r.fid, Fid::Partial(_))) {
        out.push_str("* FID averaged over the combinations that produced one\n");
    }
    out
}
