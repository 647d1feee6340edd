//! Robustness curves, mean-magnitude tables and fixed-bound tradeoffs.
//!
//! Records are combined with per-image human [`Outcome`]s (or analysed
//! without labels) as follows:
//! - `skipped_misclassified` records never appear anywhere;
//! - records whose unperturbed image was rejected by the judges are removed
//!   from every numerator and denominator;
//! - a success only counts when the judges agreed the perturbed image kept
//!   its class. Class-changing successes stay in the denominator, so curves
//!   can plateau below 1.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::{AttackRecord, AttackStatus};

pub const DEFAULT_GROUP_SIZE: usize = 30;

/// Judges' verdict on one perturbed image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// The unperturbed image was not judged to show its intended label.
    UnpertRejected,
    /// The perturbed image still shows the intended label.
    Success,
    /// The perturbation changed the true class.
    ClassChanged,
}

/// Outcomes keyed by [`AttackRecord::image_id`].
pub type Dispositions = HashMap<String, Outcome>;

/// Source of truth for whether a success counts.
#[derive(Debug, Clone, Copy)]
pub enum Labels<'a> {
    Human(&'a Dispositions),
    /// No judges: every success counts, optionally only up to a magnitude cap.
    HumanFree { max_magnitude: Option<f64> },
}

/// How a record enters the statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Role {
    Excluded,
    Denominator,
    Counted(f64),
    ClassChanged(f64),
}

fn classify(r: &AttackRecord, labels: Labels<'_>) -> Result<Role> {
    if r.status == AttackStatus::SkippedMisclassified {
        return Ok(Role::Excluded);
    }
    match labels {
        Labels::Human(d) => {
            let outcome = d.get(&r.image_id()).copied();
            match (r.status, r.success_magnitude, outcome) {
                (_, _, Some(Outcome::UnpertRejected)) => Ok(Role::Excluded),
                (AttackStatus::Success, Some(m), Some(Outcome::Success)) => Ok(Role::Counted(m)),
                (AttackStatus::Success, Some(m), Some(Outcome::ClassChanged)) => Ok(Role::ClassChanged(m)),
                (AttackStatus::Success, _, _) => Err(Error::MissingDisposition(r.image_id())),
                _ => Ok(Role::Denominator),
            }
        }
        Labels::HumanFree { max_magnitude } => match (r.status, r.success_magnitude) {
            (AttackStatus::Success, Some(m)) if max_magnitude.is_none_or(|cap| m <= cap) => {
                Ok(Role::Counted(m))
            }
            _ => Ok(Role::Denominator),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub size: usize,
    /// Fewer than `group_size` records.
    pub incomplete: bool,
}

/// Cumulative success proportion as a function of perturbation magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    /// Sorted distinct magnitudes of counted successes.
    pub grid: Vec<f64>,
    /// Pooled proportion of counted successes with magnitude `<= grid[k]`.
    pub proportion: Vec<f64>,
    /// Mean and sample standard deviation of per-group proportions.
    pub group_mean: Vec<f64>,
    pub group_std: Vec<f64>,
    pub groups: Vec<GroupSummary>,
    pub denominator: usize,
    pub counted: usize,
    pub class_changed: usize,
    pub skipped: usize,
    pub unpert_rejected: usize,
}

impl CurveSeries {
    pub fn final_proportion(&self) -> f64 {
        self.proportion.last().copied().unwrap_or(0.0)
    }
}

/// Builds one curve over `records` (conventionally one classifier and layer
/// subset). Eligible records are ordered by tuple id and cut into
/// consecutive experiments of `group_size`; a short final experiment is kept
/// and flagged.
pub fn build_curve(records: &[AttackRecord], labels: Labels<'_>, group_size: usize) -> Result<CurveSeries> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    if group_size == 0 {
        return Err(Error::InvalidArgument("group_size must be positive".into()));
    }
    let mut skipped = 0;
    let mut unpert_rejected = 0;
    let mut eligible: Vec<(usize, Role)> = Vec::new();
    for r in records {
        match classify(r, labels)? {
            Role::Excluded if r.status == AttackStatus::SkippedMisclassified => skipped += 1,
            Role::Excluded => unpert_rejected += 1,
            role => eligible.push((r.tuple_id, role)),
        }
    }
    eligible.sort_by_key(|(id, _)| *id);

    let magnitudes = |rows: &[(usize, Role)]| -> Vec<f64> {
        rows.iter()
            .filter_map(|(_, role)| match role {
                Role::Counted(m) => Some(*m),
                _ => None,
            })
            .collect()
    };
    let mut grid = magnitudes(&eligible);
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let cumulative = |rows: &[(usize, Role)]| -> Vec<f64> {
        let mut mags = magnitudes(rows);
        mags.sort_by(f64::total_cmp);
        let n = rows.len() as f64;
        let mut k = 0;
        grid.iter()
            .map(|&m| {
                while k < mags.len() && mags[k] <= m {
                    k += 1;
                }
                k as f64 / n
            })
            .collect()
    };

    let denominator = eligible.len();
    let proportion = if denominator == 0 {
        vec![]
    } else {
        cumulative(&eligible)
    };
    let chunks: Vec<&[(usize, Role)]> = eligible.chunks(group_size).collect();
    let per_group: Vec<Vec<f64>> = chunks.iter().map(|c| cumulative(c)).collect();
    let (group_mean, group_std) = mean_std_columns(&per_group, grid.len());

    Ok(CurveSeries {
        grid,
        proportion,
        group_mean,
        group_std,
        groups: chunks
            .iter()
            .map(|c| GroupSummary {
                size: c.len(),
                incomplete: c.len() < group_size,
            })
            .collect(),
        denominator,
        counted: eligible.iter().filter(|(_, r)| matches!(r, Role::Counted(_))).count(),
        class_changed: eligible.iter().filter(|(_, r)| matches!(r, Role::ClassChanged(_))).count(),
        skipped,
        unpert_rejected,
    })
}

fn mean_std_columns(rows: &[Vec<f64>], width: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len();
    if n == 0 {
        return (vec![], vec![]);
    }
    (0..width)
        .map(|k| {
            let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n as f64;
            let std = if n > 1 {
                let ss: f64 = rows.iter().map(|r| (r[k] - mean).powi(2)).sum();
                (ss / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            (mean, std)
        })
        .unzip()
}

/// Series key: `(classifier, layer_subset)`.
pub type SeriesKey = (String, String);

pub fn group_by_series(records: &[AttackRecord]) -> BTreeMap<SeriesKey, Vec<AttackRecord>> {
    let mut out: BTreeMap<SeriesKey, Vec<AttackRecord>> = BTreeMap::new();
    for r in records {
        out.entry((r.classifier.clone(), r.layer_subset.clone()))
            .or_default()
            .push(r.clone());
    }
    out
}

/// One curve per `(classifier, layer_subset)`.
pub fn build_curves(
    records: &[AttackRecord],
    labels: Labels<'_>,
    group_size: usize,
) -> Result<BTreeMap<SeriesKey, CurveSeries>> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    group_by_series(records)
        .into_iter()
        .map(|(k, rs)| Ok((k, build_curve(&rs, labels, group_size)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub classifier: String,
    pub layer_subset: String,
    /// Mean magnitude of counted successes; `None` when there are none.
    pub mean: Option<f64>,
    pub count: usize,
}

/// Mean success magnitude per `(classifier, layer_subset)` cell.
pub fn mean_magnitude_table(records: &[AttackRecord], labels: Labels<'_>) -> Result<Vec<TableCell>> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    group_by_series(records)
        .into_iter()
        .map(|((classifier, layer_subset), rs)| {
            let mut mags = Vec::new();
            for r in &rs {
                if let Role::Counted(m) = classify(r, labels)? {
                    mags.push(m);
                }
            }
            let mean = (!mags.is_empty()).then(|| mags.iter().sum::<f64>() / mags.len() as f64);
            Ok(TableCell {
                classifier,
                layer_subset,
                mean,
                count: mags.len(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub bound: f64,
    pub success_count: usize,
    pub class_changed_count: usize,
}

/// For each bound, how many successes at or below it kept their class and
/// how many changed it.
pub fn threshold_tradeoff(
    records: &[AttackRecord],
    dispositions: &Dispositions,
    bound_grid: &[f64],
) -> Result<Vec<TradeoffRow>> {
    if bound_grid.windows(2).any(|w| !(w[0] <= w[1])) || bound_grid.iter().any(|b| b.is_nan()) {
        return Err(Error::UnsortedGrid);
    }
    let mut ok = Vec::new();
    let mut changed = Vec::new();
    for r in records {
        match classify(r, Labels::Human(dispositions))? {
            Role::Counted(m) => ok.push(m),
            Role::ClassChanged(m) => changed.push(m),
            _ => {}
        }
    }
    Ok(bound_grid
        .iter()
        .map(|&b| TradeoffRow {
            bound: b,
            success_count: ok.iter().filter(|&&m| m <= b).count(),
            class_changed_count: changed.iter().filter(|&&m| m <= b).count(),
        })
        .collect())
}
