//! Brute-force restatement of the five-judge disposition table.

use latprobe_core::analysis::Outcome;
use latprobe_labeling::{decide, Choice};

pub const PANEL: usize = 5;

/// Choices are the raw 1..=4 values a judge can press.
pub fn table(stage1: &[u8], stage2: &[u8]) -> Outcome {
    assert_eq!(stage1.len(), PANEL);
    let kept = stage1.iter().filter(|&&c| c == 1).count();
    // at least three of five keep the image
    if kept < 3 {
        return Outcome::UnpertRejected;
    }
    assert_eq!(stage2.len(), kept);
    let yes = stage2.iter().filter(|&&c| c == 1).count();
    let no = stage2.iter().filter(|&&c| c != 1).count();
    if yes > no {
        Outcome::Success
    } else {
        Outcome::ClassChanged
    }
}

/// All base-4 digit strings of length `n`, as choices 1..=4.
pub fn combos(n: usize) -> Vec<Vec<u8>> {
    (0..4usize.pow(n as u32))
        .map(|mut k| {
            (0..n)
                .map(|_| {
                    let d = (k % 4) as u8 + 1;
                    k /= 4;
                    d
                })
                .collect()
        })
        .collect()
}

pub fn to_choices(raw: &[u8]) -> Vec<Choice> {
    raw.iter().map(|&c| Choice::try_from(c).unwrap()).collect()
}

pub struct Enumeration {
    pub stage1_sets: usize,
    pub checked: usize,
    pub mismatches: usize,
}

/// Every stage-1 vote set, and for those that proceed every stage-2 vote set
/// of the judges who kept the image, compared with the table. Each case is
/// also checked with the votes in reverse order.
pub fn enumerate() -> Enumeration {
    let mut out = Enumeration {
        stage1_sets: 0,
        checked: 0,
        mismatches: 0,
    };
    let mut check = |s1: &[u8], s2: &[u8]| {
        let expect = table(s1, s2);
        let a = decide("img", &to_choices(s1), &to_choices(s2), PANEL).unwrap().outcome;
        let r1: Vec<u8> = s1.iter().rev().copied().collect();
        let r2: Vec<u8> = s2.iter().rev().copied().collect();
        let b = decide("img", &to_choices(&r1), &to_choices(&r2), PANEL).unwrap().outcome;
        out.checked += 1;
        if a != expect || b != expect {
            out.mismatches += 1;
        }
    };
    let firsts = combos(PANEL);
    for s1 in &firsts {
        let kept = s1.iter().filter(|&&c| c == 1).count();
        if kept < 3 {
            check(s1, &[]);
        } else {
            for s2 in combos(kept) {
                check(s1, &s2);
            }
        }
    }
    out.stage1_sets = firsts.len();
    out
}
