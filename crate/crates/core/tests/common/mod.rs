//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeSet;

use hee::scoring::{DerBreakdown, SpeakerTurn};
use rand::Rng;

pub const FRAME_S: f64 = 0.01;

fn speaker_names(turns: &[SpeakerTurn]) -> Vec<String> {
    let set: BTreeSet<&str> = turns.iter().map(|t| t.speaker.as_str()).collect();
    set.into_iter().map(String::from).collect()
}

/// Active speaker indices per 10 ms frame; a frame belongs to a turn when
/// its centre does.
fn frame_activity(turns: &[SpeakerTurn], names: &[String], n_frames: usize) -> Vec<Vec<bool>> {
    let mut act = vec![vec![false; names.len()]; n_frames];
    for t in turns {
        let s = names.iter().position(|n| *n == t.speaker).unwrap();
        for (f, row) in act.iter_mut().enumerate() {
            let c = (f as f64 + 0.5) * FRAME_S;
            if c >= t.start && c < t.end {
                row[s] = true;
            }
        }
    }
    act
}

/// Every injective assignment of `n_hyp` hypothesis speakers to reference
/// speakers or to nothing.
fn all_mappings(n_hyp: usize, n_ref: usize) -> Vec<Vec<Option<usize>>> {
    fn rec(i: usize, n_hyp: usize, n_ref: usize, used: &mut Vec<bool>, cur: &mut Vec<Option<usize>>, out: &mut Vec<Vec<Option<usize>>>) {
        if i == n_hyp {
            out.push(cur.clone());
            return;
        }
        cur.push(None);
        rec(i + 1, n_hyp, n_ref, used, cur, out);
        cur.pop();
        for r in 0..n_ref {
            if !used[r] {
                used[r] = true;
                cur.push(Some(r));
                rec(i + 1, n_hyp, n_ref, used, cur, out);
                cur.pop();
                used[r] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(0, n_hyp, n_ref, &mut vec![false; n_ref], &mut Vec::new(), &mut out);
    out
}

/// Frame-counting scorer that tries every speaker mapping and keeps the one
/// with the least confusion.
pub fn brute_force_der(reference: &[SpeakerTurn], hypothesis: &[SpeakerTurn]) -> DerBreakdown {
    let end = reference.iter().chain(hypothesis).map(|t| t.end).fold(0.0, f64::max);
    let n_frames = (end / FRAME_S).ceil() as usize + 1;
    let (rn, hn) = (speaker_names(reference), speaker_names(hypothesis));
    let ra = frame_activity(reference, &rn, n_frames);
    let ha = frame_activity(hypothesis, &hn, n_frames);
    let mut best: Option<DerBreakdown> = None;
    for map in all_mappings(hn.len(), rn.len()) {
        let mut b = DerBreakdown::default();
        for (r, h) in ra.iter().zip(&ha) {
            let nr = r.iter().filter(|&&x| x).count() as f64;
            let nh = h.iter().filter(|&&x| x).count() as f64;
            let correct = h
                .iter()
                .enumerate()
                .filter(|&(hi, &on)| on && map[hi].is_some_and(|ri| r[ri]))
                .count() as f64;
            b.scored_speech += FRAME_S * nr;
            b.false_alarm += FRAME_S * (nh - nr).max(0.0);
            b.miss += FRAME_S * (nr - nh).max(0.0);
            b.confusion += FRAME_S * (nr.min(nh) - correct);
        }
        if best.as_ref().is_none_or(|x| b.confusion < x.confusion) {
            best = Some(b);
        }
    }
    best.unwrap()
}

/// Up to `max_turns` turns by up to `max_speakers` speakers on the 10 ms
/// grid, overlaps allowed.
pub fn random_turns(rng: &mut impl Rng, prefix: &str, max_turns: usize, max_speakers: usize) -> Vec<SpeakerTurn> {
    let n = rng.random_range(1..=max_turns);
    (0..n)
        .map(|_| {
            let start = rng.random_range(0..800u32);
            let len = rng.random_range(1..200u32);
            SpeakerTurn {
                start: start as f64 * FRAME_S,
                end: (start + len) as f64 * FRAME_S,
                speaker: format!("{prefix}{}", rng.random_range(0..max_speakers)),
            }
        })
        .collect()
}
