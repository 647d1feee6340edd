use latprobe_core::analysis::Outcome;
use latprobe_labeling::{ImageItem, LabelStore, Stage, StoreConfig};

mod common;

use common::oracle::{combos, enumerate, table, to_choices, PANEL};

#[test]
fn exhaustive_enumeration_matches_table() {
    let e = enumerate();
    assert_eq!(e.stage1_sets, 1024);
    // sum over stage-1 sets of 4^kept for kept >= 3, plus one case for each rejected set
    let rejected = combos(PANEL).iter().filter(|s| s.iter().filter(|&&c| c == 1).count() < 3).count();
    let proceeding: usize = combos(PANEL)
        .iter()
        .map(|s| s.iter().filter(|&&c| c == 1).count())
        .filter(|&k| k >= 3)
        .map(|k| 4usize.pow(k as u32))
        .sum();
    assert_eq!(e.checked, rejected + proceeding);
    assert_eq!(e.mismatches, 0);
}

/// The same table reached through the store, with judges voting in a
/// different order for every stage-1 combination.
#[test]
fn store_dispositions_match_table() {
    let judges: Vec<String> = (0..PANEL).map(|j| format!("judge{j}")).collect();
    for (n, s1) in combos(PANEL).iter().enumerate() {
        let kept: Vec<usize> = (0..PANEL).filter(|&j| s1[j] == 1).collect();
        let s2: Vec<u8> = kept.iter().map(|&j| ((n + j) % 4) as u8 + 1).collect();
        let mut store = LabelStore::new(
            StoreConfig::default(),
            vec![ImageItem {
                image_id: "img".into(),
                label_name: "3".into(),
                unperturbed_png: vec![],
                perturbed_png: vec![],
            }],
        )
        .unwrap();
        let rot = n % PANEL;
        for j in (0..PANEL).map(|k| (k + rot) % PANEL) {
            store.register_judge(&judges[j]);
            let task = store.next_task(&judges[j]).unwrap().unwrap();
            assert_eq!(task.stage, Stage::Unperturbed);
            store
                .submit_vote(&judges[j], "img", Stage::Unperturbed, to_choices(&[s1[j]])[0])
                .unwrap();
        }
        let expect = table(s1, if kept.len() >= 3 { &s2 } else { &[] });
        if kept.len() >= 3 {
            assert!(store.dispositions().is_empty(), "complete before stage two");
            for (&j, &c) in kept.iter().zip(&s2).rev() {
                assert_eq!(store.next_task(&judges[j]).unwrap().unwrap().stage, Stage::Perturbed);
                store.submit_vote(&judges[j], "img", Stage::Perturbed, to_choices(&[c])[0]).unwrap();
            }
        } else {
            for j in &judges {
                assert_eq!(store.next_task(j).unwrap(), None);
            }
        }
        let d = store.dispositions();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].outcome, expect, "stage one {s1:?}, stage two {s2:?}");
        assert_eq!(d[0].unperturbed.total(), PANEL);
    }
}

#[test]
fn listed_examples() {
    assert_eq!(table(&[1, 1, 1, 2, 4], &[1, 1, 2]), Outcome::Success);
    assert_eq!(table(&[2, 2, 3, 1, 1], &[]), Outcome::UnpertRejected);
    assert_eq!(table(&[1, 1, 1, 1, 3], &[1, 1, 2, 3]), Outcome::ClassChanged);
}
