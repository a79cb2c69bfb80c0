//! Per-image NFE buckets against RRDB depth.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use super::fmt_sig;
use crate::data::{clip_unit, psnr, ImagePair};
use crate::error::{Error, Result};
use crate::model::{CoreKind, Generator};
use crate::tensor::Scalar;

pub const NFE_REPORT_FILE: &str = "nfe_report.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Low,
    Medium,
    High,
}

impl Bucket {
    pub fn as_str(&self) -> &'static str {
        match self {
            Bucket::Low => "low",
            Bucket::Medium => "medium",
            Bucket::High => "high",
        }
    }
}

/// Most frequent step count; ties go to the smaller count.
pub fn step_mode(steps: &[usize]) -> Option<usize> {
    let mut freq: BTreeMap<usize, usize> = BTreeMap::new();
    for &s in steps {
        *freq.entry(s).or_default() += 1;
    }
    // BTreeMap iterates in ascending key order, and max_by_key keeps the last maximum.
    freq.into_iter().rev().max_by_key(|&(_, n)| n).map(|(s, _)| s)
}

/// Below the mode is low, the mode itself medium, above it high.
pub fn bucket_by_mode(steps: &[usize]) -> Vec<Bucket> {
    let Some(mode) = step_mode(steps) else {
        return Vec::new();
    };
    steps
        .iter()
        .map(|&s| match s.cmp(&mode) {
            std::cmp::Ordering::Less => Bucket::Low,
            std::cmp::Ordering::Equal => Bucket::Medium,
            std::cmp::Ordering::Greater => Bucket::High,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NfeRow {
    pub image_id: String,
    pub steps: usize,
    pub bucket: Bucket,
    /// PSNR of each RRDB model, in the order of [`NfeReport::blocks`].
    pub psnr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NfeReport {
    pub blocks: Vec<usize>,
    pub rows: Vec<NfeRow>,
}

impl NfeReport {
    /// Assemble rows from per-image step counts and RRDB PSNRs.
    pub fn from_parts(blocks: Vec<usize>, ids: Vec<String>, steps: Vec<usize>, psnrs: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != steps.len() || ids.len() != psnrs.len() {
            return Err(Error::config("report columns differ in length"));
        }
        if psnrs.iter().any(|p| p.len() != blocks.len()) {
            return Err(Error::config("every image needs one PSNR per RRDB model"));
        }
        let distinct: std::collections::BTreeSet<_> = steps.iter().collect();
        if distinct.len() < 3 {
            log::warn!(
                "only {} distinct step counts; the report has fewer than three buckets",
                distinct.len()
            );
        }
        let buckets = bucket_by_mode(&steps);
        let rows = ids
            .into_iter()
            .zip(steps)
            .zip(buckets)
            .zip(psnrs)
            .map(|(((image_id, steps), bucket), psnr)| NfeRow {
                image_id,
                steps,
                bucket,
                psnr,
            })
            .collect();
        Ok(Self { blocks, rows })
    }

    /// Mean PSNR per RRDB depth for each populated bucket.
    pub fn bucket_means(&self) -> BTreeMap<Bucket, Vec<f64>> {
        let mut acc: BTreeMap<Bucket, (Vec<f64>, usize)> = BTreeMap::new();
        for r in &self.rows {
            let e = acc.entry(r.bucket).or_insert_with(|| (vec![0.0; self.blocks.len()], 0));
            for (s, p) in e.0.iter_mut().zip(&r.psnr) {
                *s += p;
            }
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(b, (sums, n))| (b, sums.into_iter().map(|s| s / n as f64).collect()))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header = vec!["image_id".to_string(), "steps".into(), "bucket".into()];
        header.extend(self.blocks.iter().map(|b| format!("psnr_b{b}")));
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::State(format!("{}: {e}", path.display())))?;
        let mut put = |rec: Vec<String>| {
            w.write_record(&rec)
                .map_err(|e| Error::State(format!("{}: {e}", path.display())))
        };
        put(header)?;
        for r in &self.rows {
            let mut rec = vec![r.image_id.clone(), r.steps.to_string(), r.bucket.as_str().into()];
            rec.extend(r.psnr.iter().map(|&p| fmt_sig(p)));
            put(rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Step count of the ODE model on each image next to the PSNR of every RRDB model.
///
/// RRDB models must be given in strictly increasing depth.
pub fn nfe_difficulty_report<T: Scalar>(
    ode: &Generator<T>,
    rrdbs: &[Generator<T>],
    images: &[ImagePair<T>],
) -> Result<NfeReport> {
    if ode.config().core != CoreKind::Ode {
        return Err(Error::config("the difficulty model must have an ODE core"));
    }
    if rrdbs.len() < 2 {
        return Err(Error::config("at least two RRDB models are needed"));
    }
    let blocks: Vec<usize> = rrdbs.iter().map(|g| g.config().rrdb_blocks).collect();
    if rrdbs.iter().any(|g| g.config().core != CoreKind::Rrdb) || blocks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!(
            "RRDB models must have strictly increasing depth, got {blocks:?}"
        )));
    }
    if images.is_empty() {
        return Err(Error::config("no images to report on"));
    }
    let (mut ids, mut steps, mut psnrs) = (Vec::new(), Vec::new(), Vec::new());
    for img in images {
        let (_, meta) = ode.forward(&img.lr)?;
        let s = meta.solve.as_ref().map(|s| s.accepted()).unwrap_or(0);
        let mut row = Vec::with_capacity(rrdbs.len());
        for g in rrdbs {
            let sr = clip_unit(&g.forward(&img.lr)?.0);
            row.push(psnr(&sr, &img.hr, 1.0)?);
        }
        ids.push(img.id.clone());
        steps.push(s);
        psnrs.push(row);
    }
    NfeReport::from_parts(blocks, ids, steps, psnrs)
}
