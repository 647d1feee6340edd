use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::sync::Mutex;

use latprobe_core::search::{label_from_prediction, sample_tuples};
use latprobe_core::{AttackSetup, AttackStatus, Tuple};
use rayon::prelude::*;

use crate::config::{LabelSource, Prepared};
use crate::failure::Failure;
use crate::records::{distinct_hashes, read_records};

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct AttackSummary {
    pub attempted: usize,
    pub resumed: usize,
    pub success: usize,
    pub exhausted: usize,
    pub skipped: usize,
}

/// Tuples for the campaign, labelled according to the config.
pub fn campaign_tuples(p: &Prepared) -> Result<Vec<Tuple>, Failure> {
    let cfg = &p.campaign.config;
    let latent_dim = p.generator.spec().input_shape.iter().product();
    let tuples = sample_tuples(p.class_count(), latent_dim, cfg.tuples.count, cfg.tuples.seed)?;
    match cfg.labels {
        LabelSource::Sampled => Ok(tuples),
        LabelSource::Predicted => {
            // every classifier sees the same labels: those of the first one
            let reference = &p.classifiers[0].1;
            Ok(tuples
                .iter()
                .map(|t| label_from_prediction(t, &p.generator, reference))
                .collect::<Result<_, _>>()?)
        }
    }
}

/// Attacks every (classifier, subset, tuple) not yet in the records file,
/// appending one JSON line per finished attack.
pub fn run_attack(p: &Prepared, workers: usize) -> Result<AttackSummary, Failure> {
    if p.campaign.config.tuples.count == 0 {
        return Err(Failure::usage("tuple count is 0, nothing to attack"));
    }
    if workers == 0 {
        return Err(Failure::usage("--workers must be at least 1"));
    }
    let out = p.campaign.out_dir();
    fs::create_dir_all(&out)?;
    let path = p.campaign.records_path();
    let existing = read_records(&path, true)?;
    let hashes = distinct_hashes(&existing);
    if hashes.iter().any(|h| h != &p.hash) {
        return Err(Failure::usage(format!(
            "{} holds records from config {:?}, current config is {}; use another output directory",
            path.display(),
            hashes,
            p.hash
        )));
    }
    let done: HashSet<(String, String, usize)> = existing
        .iter()
        .map(|r| (r.classifier.clone(), r.layer_subset.clone(), r.tuple_id))
        .collect();

    let tuples = campaign_tuples(p)?;
    let mut jobs = Vec::new();
    for (ci, (cname, _)) in p.classifiers.iter().enumerate() {
        for (mi, (mname, _)) in p.masks.iter().enumerate() {
            for (ti, t) in tuples.iter().enumerate() {
                if !done.contains(&(cname.clone(), mname.clone(), t.id)) {
                    jobs.push((ci, mi, ti));
                }
            }
        }
    }

    let file = OpenOptions::new().create(true).append(true).open(&path)?;
    let writer = Mutex::new(file);
    let summary = Mutex::new(AttackSummary {
        resumed: done.len(),
        ..AttackSummary::default()
    });
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Failure::runtime(e.to_string()))?;
    pool.install(|| {
        jobs.par_iter().try_for_each(|&(ci, mi, ti)| -> Result<(), Failure> {
            let (cname, classifier) = &p.classifiers[ci];
            let (mname, mask) = &p.masks[mi];
            let outcome = AttackSetup {
                generator: &p.generator,
                classifier,
                sigma: &p.sigma,
                mask,
                config: &p.attack,
                classifier_name: cname,
                layer_subset: mname,
                config_hash: &p.hash,
            }
            .attack(&tuples[ti])?;
            let mut line = serde_json::to_string(&outcome.record)?;
            line.push('\n');
            {
                let mut f = writer.lock().expect("writer lock");
                f.write_all(line.as_bytes())?;
                f.flush()?;
            }
            let mut s = summary.lock().expect("summary lock");
            s.attempted += 1;
            match outcome.record.status {
                AttackStatus::Success => s.success += 1,
                AttackStatus::Exhausted => s.exhausted += 1,
                AttackStatus::SkippedMisclassified => s.skipped += 1,
            }
            Ok(())
        })
    })?;
    writer.into_inner().expect("writer lock").sync_all()?;
    Ok(summary.into_inner().expect("summary lock"))
}
