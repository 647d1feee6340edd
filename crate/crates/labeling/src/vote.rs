use std::fmt;

use latprobe_core::analysis::Outcome;
use serde::{Deserialize, Serialize};

use crate::error::{LabelError, Result};

pub const DEFAULT_PANEL_SIZE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Unperturbed,
    Perturbed,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Unperturbed => "unperturbed",
            Stage::Perturbed => "perturbed",
        })
    }
}

/// Judge's answer to "this is an image of <label>". Serialised as 1..=4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Choice {
    Matches,
    SomethingElse,
    Unclear,
    NotMeaningful,
}

impl Choice {
    pub const ALL: [Choice; 4] = [Choice::Matches, Choice::SomethingElse, Choice::Unclear, Choice::NotMeaningful];

    pub fn keeps_label(self) -> bool {
        self == Choice::Matches
    }
}

impl TryFrom<u8> for Choice {
    type Error = LabelError;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Choice::Matches),
            2 => Ok(Choice::SomethingElse),
            3 => Ok(Choice::Unclear),
            4 => Ok(Choice::NotMeaningful),
            _ => Err(LabelError::BadChoice(v)),
        }
    }
}

impl From<Choice> for u8 {
    fn from(c: Choice) -> u8 {
        match c {
            Choice::Matches => 1,
            Choice::SomethingElse => 2,
            Choice::Unclear => 3,
            Choice::NotMeaningful => 4,
        }
    }
}

/// One line of the vote log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub judge_id: String,
    pub image_id: String,
    pub stage: Stage,
    pub choice: Choice,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

impl VoteRecord {
    pub fn same_vote(&self, other: &VoteRecord) -> bool {
        self.judge_id == other.judge_id
            && self.image_id == other.image_id
            && self.stage == other.stage
            && self.choice == other.choice
    }
}

/// Vote counts per choice, indexed by choice value minus one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub matches: usize,
    pub something_else: usize,
    pub unclear: usize,
    pub not_meaningful: usize,
}

impl Tally {
    pub fn from_choices(choices: &[Choice]) -> Self {
        let mut t = Tally::default();
        for c in choices {
            match c {
                Choice::Matches => t.matches += 1,
                Choice::SomethingElse => t.something_else += 1,
                Choice::Unclear => t.unclear += 1,
                Choice::NotMeaningful => t.not_meaningful += 1,
            }
        }
        t
    }

    pub fn total(&self) -> usize {
        self.matches + self.something_else + self.unclear + self.not_meaningful
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Disposition {
    pub image_id: String,
    pub outcome: Outcome,
    pub unperturbed: Tally,
    pub perturbed: Tally,
}

/// Strict majority of the panel must keep the label at the first stage.
pub fn stage_one_passes(unperturbed: &Tally, panel: usize) -> bool {
    unperturbed.matches * 2 > panel
}

/// Two-stage majority decision.
///
/// `unperturbed` must hold the whole panel. `perturbed` holds the votes of
/// the judges who kept the unperturbed image; it is ignored when the first
/// stage fails. Ties at the second stage count as a class change.
pub fn decide(image_id: &str, unperturbed: &[Choice], perturbed: &[Choice], panel: usize) -> Result<Disposition> {
    let first = Tally::from_choices(unperturbed);
    if first.total() != panel {
        return Err(LabelError::IncompletePanel {
            image_id: image_id.to_string(),
            reason: format!("{} of {panel} unperturbed votes", first.total()),
        });
    }
    if !stage_one_passes(&first, panel) {
        return Ok(Disposition {
            image_id: image_id.to_string(),
            outcome: Outcome::UnpertRejected,
            unperturbed: first,
            perturbed: Tally::from_choices(perturbed),
        });
    }
    let second = Tally::from_choices(perturbed);
    if second.total() != first.matches {
        return Err(LabelError::IncompletePanel {
            image_id: image_id.to_string(),
            reason: format!("{} of {} perturbed votes", second.total(), first.matches),
        });
    }
    let outcome = if second.matches * 2 > second.total() {
        Outcome::Success
    } else {
        Outcome::ClassChanged
    };
    Ok(Disposition {
        image_id: image_id.to_string(),
        outcome,
        unperturbed: first,
        perturbed: second,
    })
}
