use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabelError, Result};
use crate::vote::{decide, stage_one_passes, Choice, Disposition, Stage, Tally, VoteRecord, DEFAULT_PANEL_SIZE};

/// An image pair put in front of the judges.
#[derive(Debug, Clone)]
pub struct ImageItem {
    pub image_id: String,
    pub label_name: String,
    pub unperturbed_png: Vec<u8>,
    pub perturbed_png: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub panel_size: usize,
    /// How long an unperturbed task stays reserved for the judge it was served to.
    pub reservation_ttl: Duration,
    /// Seeds the per-judge presentation order.
    pub order_seed: u64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            panel_size: DEFAULT_PANEL_SIZE,
            reservation_ttl: Duration::from_secs(600),
            order_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub image_id: String,
    pub stage: Stage,
    pub label_name: String,
    pub image_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    /// Position of the vote in the log.
    pub seq: usize,
    #[serde(flatten)]
    pub vote: VoteRecord,
}

#[derive(Debug, Default)]
struct Votes {
    unperturbed: BTreeMap<String, Choice>,
    perturbed: BTreeMap<String, Choice>,
    /// judge -> reservation expiry
    reserved: HashMap<String, Instant>,
}

impl Votes {
    fn occupancy(&self, except: &str, now: Instant) -> usize {
        let live = self
            .reserved
            .iter()
            .filter(|(j, &until)| j.as_str() != except && until > now && !self.unperturbed.contains_key(*j))
            .count();
        self.unperturbed.len() + live
    }

    fn rejected(&self, panel: usize) -> bool {
        if self.unperturbed.len() < panel {
            return false;
        }
        let choices: Vec<Choice> = self.unperturbed.values().copied().collect();
        !stage_one_passes(&Tally::from_choices(&choices), panel)
    }
}

pub fn image_url(image_id: &str, stage: Stage) -> String {
    format!("/api/images/{image_id}/{stage}.png")
}

/// Vote store with task assignment. The vote log, when attached, is the
/// source of truth: reopening a store replays it.
pub struct LabelStore {
    config: StoreConfig,
    judges: HashSet<String>,
    images: Vec<ImageItem>,
    index: HashMap<String, usize>,
    votes: Vec<Votes>,
    log: Vec<VoteRecord>,
    served: HashSet<(String, String)>,
    writer: Option<File>,
}

impl LabelStore {
    pub fn new(config: StoreConfig, images: Vec<ImageItem>) -> Result<Self> {
        if config.panel_size == 0 {
            return Err(LabelError::IncompletePanel {
                image_id: String::new(),
                reason: "panel size must be positive".into(),
            });
        }
        let mut index = HashMap::new();
        for (i, item) in images.iter().enumerate() {
            if index.insert(item.image_id.clone(), i).is_some() {
                return Err(LabelError::UnknownImage(format!("{} (listed twice)", item.image_id)));
            }
        }
        let votes = images.iter().map(|_| Votes::default()).collect();
        Ok(LabelStore {
            config,
            judges: HashSet::new(),
            images,
            index,
            votes,
            log: Vec::new(),
            served: HashSet::new(),
            writer: None,
        })
    }

    /// Builds a store backed by a JSONL vote log, replaying any votes already in it.
    pub fn open(config: StoreConfig, images: Vec<ImageItem>, log_path: impl AsRef<Path>) -> Result<Self> {
        let mut store = Self::new(config, images)?;
        let path = log_path.as_ref();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let vote: VoteRecord = serde_json::from_str(&line).map_err(|e| LabelError::BadLog {
                    line: n + 1,
                    reason: e.to_string(),
                })?;
                store.replay_vote(vote).map_err(|e| LabelError::BadLog {
                    line: n + 1,
                    reason: e.to_string(),
                })?;
            }
        }
        store.writer = Some(OpenOptions::new().create(true).append(true).open(path)?);
        Ok(store)
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn register_judge(&mut self, judge: impl Into<String>) {
        self.judges.insert(judge.into());
    }

    pub fn images(&self) -> &[ImageItem] {
        &self.images
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageItem> {
        self.index.get(image_id).map(|&i| &self.images[i])
    }

    pub fn votes(&self) -> &[VoteRecord] {
        &self.log
    }

    fn check_judge(&self, judge: &str) -> Result<()> {
        if self.judges.contains(judge) {
            Ok(())
        } else {
            Err(LabelError::UnknownJudge(judge.to_string()))
        }
    }

    fn slot(&self, image_id: &str) -> Result<usize> {
        self.index
            .get(image_id)
            .copied()
            .ok_or_else(|| LabelError::UnknownImage(image_id.to_string()))
    }

    /// Image indices in this judge's presentation order.
    fn order_for(&self, judge: &str) -> Vec<usize> {
        let key = |i: usize| {
            let mut h = Sha256::new();
            h.update(self.config.order_seed.to_le_bytes());
            h.update(judge.as_bytes());
            h.update([0]);
            h.update(self.images[i].image_id.as_bytes());
            h.finalize()
        };
        let mut order: Vec<(_, usize)> = (0..self.images.len()).map(|i| (key(i), i)).collect();
        order.sort();
        order.into_iter().map(|(_, i)| i).collect()
    }

    fn task(&self, i: usize, stage: Stage) -> Task {
        let item = &self.images[i];
        Task {
            image_id: item.image_id.clone(),
            stage,
            label_name: item.label_name.clone(),
            image_url: image_url(&item.image_id, Stage::Unperturbed),
            pair_url: Some(image_url(&item.image_id, Stage::Perturbed)),
        }
    }

    pub fn next_task(&mut self, judge: &str) -> Result<Option<Task>> {
        self.next_task_at(judge, Instant::now())
    }

    pub fn next_task_at(&mut self, judge: &str, now: Instant) -> Result<Option<Task>> {
        self.check_judge(judge)?;
        let order = self.order_for(judge);
        let panel = self.config.panel_size;

        // Finish perturbed votes owed after keeping an unperturbed image.
        for &i in &order {
            let v = &self.votes[i];
            if v.unperturbed.get(judge) == Some(&Choice::Matches)
                && !v.perturbed.contains_key(judge)
                && !v.rejected(panel)
            {
                return Ok(Some(self.task(i, Stage::Perturbed)));
            }
        }
        // A live reservation is handed out again rather than taking a new slot.
        for &i in &order {
            let v = &self.votes[i];
            if !v.unperturbed.contains_key(judge) && v.reserved.get(judge).is_some_and(|&t| t > now) {
                return Ok(Some(self.task(i, Stage::Unperturbed)));
            }
        }
        for &i in &order {
            let v = &self.votes[i];
            if v.unperturbed.contains_key(judge) || v.occupancy(judge, now) >= panel {
                continue;
            }
            self.votes[i].reserved.insert(judge.to_string(), now + self.config.reservation_ttl);
            self.served.insert((judge.to_string(), self.images[i].image_id.clone()));
            return Ok(Some(self.task(i, Stage::Unperturbed)));
        }
        Ok(None)
    }

    pub fn submit_vote(&mut self, judge: &str, image_id: &str, stage: Stage, choice: Choice) -> Result<Ack> {
        self.submit_vote_at(judge, image_id, stage, choice, Instant::now())
    }

    pub fn submit_vote_at(
        &mut self,
        judge: &str,
        image_id: &str,
        stage: Stage,
        choice: Choice,
        now: Instant,
    ) -> Result<Ack> {
        self.check_judge(judge)?;
        let i = self.slot(image_id)?;
        let vote = VoteRecord {
            judge_id: judge.to_string(),
            image_id: image_id.to_string(),
            stage,
            choice,
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64),
        };
        if let Some(ack) = self.duplicate(&vote)? {
            return Ok(ack);
        }
        if stage == Stage::Unperturbed {
            if !self.served.contains(&(judge.to_string(), image_id.to_string())) {
                return Err(LabelError::NotServed {
                    judge_id: judge.to_string(),
                    image_id: image_id.to_string(),
                    stage,
                });
            }
            let v = &self.votes[i];
            let live = v.reserved.get(judge).is_some_and(|&t| t > now);
            if !live && v.occupancy(judge, now) >= self.config.panel_size {
                return Err(LabelError::PanelFull(image_id.to_string()));
            }
        }
        self.check_order(i, &vote)?;
        if let Some(w) = self.writer.as_mut() {
            let mut line = serde_json::to_string(&vote)?;
            line.push('\n');
            w.write_all(line.as_bytes())?;
            w.flush()?;
            w.sync_data()?;
        }
        Ok(self.apply(i, vote))
    }

    /// Original ack for a resubmitted vote; error if the choice differs.
    fn duplicate(&self, vote: &VoteRecord) -> Result<Option<Ack>> {
        let found = self.log.iter().position(|r| {
            r.judge_id == vote.judge_id && r.image_id == vote.image_id && r.stage == vote.stage
        });
        match found {
            None => Ok(None),
            Some(seq) if self.log[seq].same_vote(vote) => Ok(Some(Ack {
                seq,
                vote: self.log[seq].clone(),
            })),
            Some(_) => Err(LabelError::ConflictingDuplicate {
                judge_id: vote.judge_id.clone(),
                image_id: vote.image_id.clone(),
                stage: vote.stage,
            }),
        }
    }

    fn check_order(&self, i: usize, vote: &VoteRecord) -> Result<()> {
        if vote.stage == Stage::Perturbed {
            let reason = match self.votes[i].unperturbed.get(&vote.judge_id) {
                None => "no unperturbed vote yet",
                Some(Choice::Matches) => return Ok(()),
                Some(_) => "unperturbed image was not kept",
            };
            return Err(LabelError::StageViolation {
                judge_id: vote.judge_id.clone(),
                image_id: vote.image_id.clone(),
                reason: reason.into(),
            });
        }
        Ok(())
    }

    fn apply(&mut self, i: usize, vote: VoteRecord) -> Ack {
        let v = &mut self.votes[i];
        match vote.stage {
            Stage::Unperturbed => {
                v.reserved.remove(&vote.judge_id);
                v.unperturbed.insert(vote.judge_id.clone(), vote.choice);
            }
            Stage::Perturbed => {
                v.perturbed.insert(vote.judge_id.clone(), vote.choice);
            }
        }
        self.served.insert((vote.judge_id.clone(), vote.image_id.clone()));
        self.log.push(vote.clone());
        Ack {
            seq: self.log.len() - 1,
            vote,
        }
    }

    fn replay_vote(&mut self, vote: VoteRecord) -> Result<()> {
        let i = self.slot(&vote.image_id)?;
        self.judges.insert(vote.judge_id.clone());
        if self.duplicate(&vote)?.is_some() {
            return Ok(());
        }
        if vote.stage == Stage::Unperturbed && self.votes[i].unperturbed.len() >= self.config.panel_size {
            return Err(LabelError::PanelFull(vote.image_id));
        }
        self.check_order(i, &vote)?;
        self.apply(i, vote);
        Ok(())
    }

    pub fn disposition(&self, image_id: &str) -> Result<Disposition> {
        let v = &self.votes[self.slot(image_id)?];
        let first: Vec<Choice> = v.unperturbed.values().copied().collect();
        let second: Vec<Choice> = v.perturbed.values().copied().collect();
        decide(image_id, &first, &second, self.config.panel_size)
    }

    /// Dispositions of every image whose panel is complete, in image order.
    pub fn dispositions(&self) -> Vec<Disposition> {
        self.images
            .iter()
            .filter_map(|item| self.disposition(&item.image_id).ok())
            .collect()
    }
}
