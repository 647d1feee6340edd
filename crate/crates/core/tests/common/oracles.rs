//! Independent recounts used to check the analysis and search code. They
//! favour obviously-correct loops over efficiency.

#![allow(dead_code)]

use std::collections::BTreeSet;

use latprobe_core::analysis::{Dispositions, Outcome};
use latprobe_core::search::{AttackRecord, AttackStatus};
use rand::Rng;

/// `max_j out_j - out_t` computed by scanning every pair.
pub fn cw_brute(out: &[f32], t: usize) -> f32 {
    let mut best = out[0];
    for &v in out {
        if v > best {
            best = v;
        }
    }
    best - out[t]
}

/// Whether record `r` is eligible for a curve denominator.
fn in_denominator(r: &AttackRecord, d: Option<&Dispositions>) -> bool {
    if r.status == AttackStatus::SkippedMisclassified {
        return false;
    }
    match d {
        Some(d) => d.get(&r.image_id()) != Some(&Outcome::UnpertRejected),
        None => true,
    }
}

/// Success magnitude if `r` counts as a success that kept its class.
fn counted(r: &AttackRecord, d: Option<&Dispositions>, cap: Option<f64>) -> Option<f64> {
    if r.status != AttackStatus::Success {
        return None;
    }
    let m = r.success_magnitude?;
    match d {
        Some(d) => (d.get(&r.image_id()) == Some(&Outcome::Success)).then_some(m),
        None => cap.is_none_or(|c| m <= c).then_some(m),
    }
}

pub struct BruteCurve {
    pub grid: Vec<f64>,
    pub proportion: Vec<f64>,
    pub group_mean: Vec<f64>,
    pub group_std: Vec<f64>,
    pub group_sizes: Vec<usize>,
    pub denominator: usize,
}

pub fn brute_curve(records: &[AttackRecord], d: Option<&Dispositions>, cap: Option<f64>, group_size: usize) -> BruteCurve {
    let mut eligible: Vec<&AttackRecord> = records.iter().filter(|r| in_denominator(r, d)).collect();
    eligible.sort_by_key(|r| r.tuple_id);

    let mut grid_set: Vec<f64> = Vec::new();
    for r in &eligible {
        if let Some(m) = counted(r, d, cap) {
            if !grid_set.contains(&m) {
                grid_set.push(m);
            }
        }
    }
    grid_set.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let frac = |rows: &[&AttackRecord], m: f64| -> f64 {
        let hits = rows.iter().filter(|r| counted(r, d, cap).is_some_and(|x| x <= m)).count();
        hits as f64 / rows.len() as f64
    };
    let proportion = grid_set.iter().map(|&m| frac(&eligible, m)).collect();

    let groups: Vec<Vec<&AttackRecord>> = eligible.chunks(group_size).map(|c| c.to_vec()).collect();
    let mut group_mean = Vec::new();
    let mut group_std = Vec::new();
    for &m in &grid_set {
        let vals: Vec<f64> = groups.iter().map(|g| frac(g, m)).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = if vals.len() > 1 {
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        group_mean.push(mean);
        group_std.push(var.sqrt());
    }
    BruteCurve {
        grid: grid_set,
        proportion,
        group_mean,
        group_std,
        group_sizes: groups.iter().map(Vec::len).collect(),
        denominator: eligible.len(),
    }
}

/// `(classifier, subset) -> (mean, count)` over counted successes.
pub fn brute_table(records: &[AttackRecord], d: Option<&Dispositions>) -> Vec<(String, String, Option<f64>, usize)> {
    let keys: BTreeSet<(String, String)> = records
        .iter()
        .map(|r| (r.classifier.clone(), r.layer_subset.clone()))
        .collect();
    keys.into_iter()
        .map(|(c, s)| {
            let mags: Vec<f64> = records
                .iter()
                .filter(|r| r.classifier == c && r.layer_subset == s && in_denominator(r, d))
                .filter_map(|r| counted(r, d, None))
                .collect();
            let mean = if mags.is_empty() {
                None
            } else {
                Some(mags.iter().sum::<f64>() / mags.len() as f64)
            };
            let n = mags.len();
            (c, s, mean, n)
        })
        .collect()
}

/// Per bound: `(successes kept, successes class-changed)` with magnitude at
/// most the bound.
pub fn brute_tradeoff(records: &[AttackRecord], d: &Dispositions, grid: &[f64]) -> Vec<(usize, usize)> {
    grid.iter()
        .map(|&b| {
            let mut kept = 0;
            let mut changed = 0;
            for r in records {
                if r.status != AttackStatus::Success {
                    continue;
                }
                let m = r.success_magnitude.unwrap();
                if m > b {
                    continue;
                }
                match d.get(&r.image_id()) {
                    Some(Outcome::Success) => kept += 1,
                    Some(Outcome::ClassChanged) => changed += 1,
                    _ => {}
                }
            }
            (kept, changed)
        })
        .collect()
}

pub fn record(id: usize, classifier: &str, subset: &str, status: AttackStatus, mag: Option<f64>) -> AttackRecord {
    AttackRecord {
        tuple_id: id,
        seed: id as u64,
        y: 0,
        t: 1,
        status,
        success_magnitude: mag,
        steps_taken: 1,
        final_bound: 1.0,
        layer_subset: subset.into(),
        classifier: classifier.into(),
        config_hash: "h".into(),
        version: "0".into(),
        diagnostic: None,
    }
}

/// Random campaign over up to two classifiers and three subsets. Every
/// success gets a disposition; a few non-successes get `UnpertRejected`.
/// Magnitudes come from a coarse lattice so ties are common.
pub fn random_record_set<R: Rng>(rng: &mut R) -> (Vec<AttackRecord>, Dispositions) {
    let classifiers = ["ca", "cb"];
    let subsets = ["first", "last", "all"];
    let n = rng.random_range(1..=150);
    let lattice = rng.random_bool(0.5);
    let mut records = Vec::new();
    let mut disp = Dispositions::new();
    for id in 0..n {
        let c = classifiers[rng.random_range(0..classifiers.len())];
        let s = subsets[rng.random_range(0..subsets.len())];
        let roll: f64 = rng.random();
        let (status, mag) = if roll < 0.1 {
            (AttackStatus::SkippedMisclassified, None)
        } else if roll < 0.25 {
            (AttackStatus::Exhausted, None)
        } else {
            let m = if lattice {
                f64::from(rng.random_range(1..20u32)) * 0.5
            } else {
                rng.random_range(0.01..30.0)
            };
            (AttackStatus::Success, Some(m))
        };
        let r = record(id, c, s, status, mag);
        match status {
            AttackStatus::Success => {
                let o = match rng.random_range(0..10) {
                    0 => Outcome::UnpertRejected,
                    1 | 2 => Outcome::ClassChanged,
                    _ => Outcome::Success,
                };
                disp.insert(r.image_id(), o);
            }
            AttackStatus::Exhausted if rng.random_bool(0.1) => {
                disp.insert(r.image_id(), Outcome::UnpertRejected);
            }
            _ => {}
        }
        records.push(r);
    }
    (records, disp)
}

/// Minimal raw-norm perturbation for the linear toy: with scores
/// `s = W (z + p * sigma) + b`, the target overtakes class `y` once
/// `(w_t - w_y) . (p * sigma) >= margin`, so the smallest `|p|` is
/// `margin / |(w_t - w_y) * sigma|`.
pub fn linear_min_norm(w_diff: &[f64], sigma: &[f64], margin: f64) -> f64 {
    let n: f64 = w_diff.iter().zip(sigma).map(|(w, s)| (w * s) * (w * s)).sum::<f64>().sqrt();
    margin / n
}
