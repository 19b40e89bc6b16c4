//! RTTM input/output and diarisation error rate.
//!
//! Scoring follows the usual no-collar protocol with overlapping speech
//! scored. Within each elementary interval where the sets of active
//! reference and hypothesis speakers are constant, with `Nr` reference and
//! `Nh` hypothesis speakers and `Nc` correctly mapped pairs:
//!
//! ```text
//! false alarm  += len · max(0, Nh − Nr)
//! miss         += len · max(0, Nr − Nh)
//! confusion    += len · (min(Nr, Nh) − Nc)
//! ```
//!
//! The speaker mapping is the one-to-one assignment maximising total
//! co-activity time, solved with the Hungarian method. Rates divide by the
//! reference speech time counted with overlap multiplicity.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::DiarisationHypothesis;

/// One `SPEAKER` line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RttmRecord {
    pub session: String,
    pub channel: String,
    pub onset: f64,
    pub duration: f64,
    pub speaker: String,
}

/// A speaker turn in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerTurn {
    pub start: f64,
    pub end: f64,
    pub speaker: String,
}

pub fn parse_rttm(text: &str) -> Result<Vec<RttmRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() || fields[0].starts_with('#') || fields[0] != "SPEAKER" {
            continue;
        }
        let bad = |msg: &str| Error::Parse { line: i + 1, msg: msg.into() };
        if fields.len() < 8 {
            return Err(bad("SPEAKER line needs at least 8 fields"));
        }
        let onset: f64 = fields[3].parse().map_err(|_| bad("onset is not a number"))?;
        let duration: f64 = fields[4].parse().map_err(|_| bad("duration is not a number"))?;
        if !onset.is_finite() || onset < 0.0 {
            return Err(bad("negative onset"));
        }
        if !duration.is_finite() || duration < 0.0 {
            return Err(bad("negative duration"));
        }
        if duration == 0.0 {
            log::warn!("line {}: zero-length turn ignored", i + 1);
            continue;
        }
        out.push(RttmRecord {
            session: fields[1].into(),
            channel: fields[2].into(),
            onset,
            duration,
            speaker: fields[7].into(),
        });
    }
    Ok(out)
}

pub fn write_rttm(records: &[RttmRecord]) -> String {
    let mut s = String::new();
    for r in records {
        writeln!(
            s,
            "SPEAKER {} {} {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
            r.session, r.channel, r.onset, r.duration, r.speaker
        )
        .expect("writing to a String");
    }
    s
}

/// Speaker turns grouped by session.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub sessions: BTreeMap<String, Vec<SpeakerTurn>>,
}

impl Annotation {
    pub fn from_records(records: &[RttmRecord]) -> Self {
        let mut sessions: BTreeMap<String, Vec<SpeakerTurn>> = BTreeMap::new();
        for r in records {
            sessions.entry(r.session.clone()).or_default().push(SpeakerTurn {
                start: r.onset,
                end: r.onset + r.duration,
                speaker: r.speaker.clone(),
            });
        }
        for turns in sessions.values_mut() {
            turns.sort_by(|a, b| a.start.total_cmp(&b.start).then_with(|| a.speaker.cmp(&b.speaker)));
        }
        Self { sessions }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(Self::from_records(&parse_rttm(text)?))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn from_hypotheses(hyps: &[DiarisationHypothesis]) -> Self {
        let mut sessions = BTreeMap::new();
        for h in hyps {
            let turns = h
                .intervals
                .iter()
                .map(|i| SpeakerTurn { start: i.start, end: i.end, speaker: format!("spk{:02}", i.label) })
                .collect();
            sessions.insert(h.session.clone(), turns);
        }
        Self { sessions }
    }

    pub fn to_records(&self) -> Vec<RttmRecord> {
        self.sessions
            .iter()
            .flat_map(|(s, turns)| {
                turns.iter().map(move |t| RttmRecord {
                    session: s.clone(),
                    channel: "1".into(),
                    onset: t.start,
                    duration: t.end - t.start,
                    speaker: t.speaker.clone(),
                })
            })
            .collect()
    }

    pub fn to_rttm(&self) -> String {
        write_rttm(&self.to_records())
    }

    pub fn turns(&self, session: &str) -> &[SpeakerTurn] {
        self.sessions.get(session).map_or(&[], Vec::as_slice)
    }
}

/// Error durations in seconds and the reference speech they are measured
/// against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DerBreakdown {
    pub scored_speech: f64,
    pub false_alarm: f64,
    pub miss: f64,
    pub confusion: f64,
}

impl DerBreakdown {
    fn rate(&self, v: f64) -> f64 {
        if self.scored_speech > 0.0 { v / self.scored_speech } else { 0.0 }
    }

    pub fn fa_rate(&self) -> f64 {
        self.rate(self.false_alarm)
    }

    pub fn ms_rate(&self) -> f64 {
        self.rate(self.miss)
    }

    pub fn sc_rate(&self) -> f64 {
        self.rate(self.confusion)
    }

    pub fn der(&self) -> f64 {
        self.fa_rate() + self.ms_rate() + self.sc_rate()
    }

    /// Sums durations; the aggregate rate is the speech-weighted mean.
    pub fn accumulate(&mut self, other: &DerBreakdown) {
        self.scored_speech += other.scored_speech;
        self.false_alarm += other.false_alarm;
        self.miss += other.miss;
        self.confusion += other.confusion;
    }
}

/// Minimum-cost assignment on a rectangular cost matrix. Returns, for each
/// row, the assigned column (`None` when rows outnumber columns).
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    let n = rows.max(cols);
    let c = |i: usize, j: usize| if i < rows && j < cols { cost[i][j] } else { 0.0 };
    // Potentials and matching over a 1-based square matrix.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        if p[j] >= 1 && p[j] <= rows && j <= cols {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

fn clip_to(turns: &[SpeakerTurn], uem: &[(f64, f64)]) -> Vec<SpeakerTurn> {
    let mut out = Vec::new();
    for t in turns {
        for &(a, b) in uem {
            let (s, e) = (t.start.max(a), t.end.min(b));
            if e > s {
                out.push(SpeakerTurn { start: s, end: e, speaker: t.speaker.clone() });
            }
        }
    }
    out
}

/// Elementary intervals with the sets of active speaker indices.
fn segmentation(reference: &[SpeakerTurn], hypothesis: &[SpeakerTurn], rn: &[String], hn: &[String]) -> Vec<(f64, Vec<usize>, Vec<usize>)> {
    let mut cuts: Vec<f64> = reference.iter().chain(hypothesis).flat_map(|t| [t.start, t.end]).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let active = |turns: &[SpeakerTurn], names: &[String], a: f64, b: f64| -> Vec<usize> {
        let mut set = BTreeSet::new();
        for t in turns {
            if t.start <= a && t.end >= b {
                set.insert(names.binary_search(&t.speaker).expect("name collected"));
            }
        }
        set.into_iter().collect()
    };
    cuts.windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| (w[1] - w[0], active(reference, rn, w[0], w[1]), active(hypothesis, hn, w[0], w[1])))
        .collect()
}

fn names(turns: &[SpeakerTurn]) -> Vec<String> {
    let set: BTreeSet<&str> = turns.iter().map(|t| t.speaker.as_str()).collect();
    set.into_iter().map(String::from).collect()
}

/// Optimal hypothesis-to-reference speaker mapping: `map[h] = Some(r)`.
pub fn optimal_mapping(reference: &[SpeakerTurn], hypothesis: &[SpeakerTurn]) -> (Vec<String>, Vec<String>, Vec<Option<usize>>) {
    let (rn, hn) = (names(reference), names(hypothesis));
    let mut overlap = vec![vec![0.0; rn.len()]; hn.len()];
    for (len, r, h) in segmentation(reference, hypothesis, &rn, &hn) {
        for &hi in &h {
            for &ri in &r {
                overlap[hi][ri] += len;
            }
        }
    }
    let cost: Vec<Vec<f64>> = overlap.iter().map(|row| row.iter().map(|v| -v).collect()).collect();
    let map = hungarian(&cost);
    (rn, hn, map)
}

/// Exact interval-arithmetic DER for one session. `uem`, when given,
/// restricts scoring to its regions.
pub fn compute_der(reference: &[SpeakerTurn], hypothesis: &[SpeakerTurn], uem: Option<&[(f64, f64)]>) -> Result<DerBreakdown> {
    let (reference, hypothesis) = match uem {
        Some(u) => (clip_to(reference, u), clip_to(hypothesis, u)),
        None => (reference.to_vec(), hypothesis.to_vec()),
    };
    for t in reference.iter().chain(&hypothesis) {
        if !(t.end > t.start) {
            return Err(Error::invalid(format!("turn [{}, {}) of {} is empty or reversed", t.start, t.end, t.speaker)));
        }
    }
    if reference.is_empty() {
        return Err(Error::invalid("reference has no speech; error rates are undefined"));
    }
    let (rn, hn, map) = optimal_mapping(&reference, &hypothesis);
    let mut out = DerBreakdown::default();
    for (len, r, h) in segmentation(&reference, &hypothesis, &rn, &hn) {
        let (nr, nh) = (r.len() as f64, h.len() as f64);
        let correct = h.iter().filter(|&&hi| map[hi].is_some_and(|ri| r.contains(&ri))).count() as f64;
        out.scored_speech += len * nr;
        out.false_alarm += len * (nh - nr).max(0.0);
        out.miss += len * (nr - nh).max(0.0);
        out.confusion += len * (nr.min(nh) - correct);
    }
    Ok(out)
}

/// Per-session and aggregate scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub sessions: Vec<(String, DerBreakdown)>,
    pub total: DerBreakdown,
}

/// Scores every session; sessions present on only one side are an error.
pub fn score_annotations(reference: &Annotation, hypothesis: &Annotation) -> Result<ScoreReport> {
    let rs: BTreeSet<&String> = reference.sessions.keys().collect();
    let hs: BTreeSet<&String> = hypothesis.sessions.keys().collect();
    let unmatched: Vec<String> = rs.symmetric_difference(&hs).map(|s| s.to_string()).collect();
    if !unmatched.is_empty() {
        return Err(Error::invalid(format!("sessions without a counterpart: {}", unmatched.join(", "))));
    }
    let mut sessions = Vec::new();
    let mut total = DerBreakdown::default();
    for (id, turns) in &reference.sessions {
        let d = compute_der(turns, hypothesis.turns(id), None)?;
        total.accumulate(&d);
        sessions.push((id.clone(), d));
    }
    Ok(ScoreReport { sessions, total })
}

impl ScoreReport {
    /// Aligned table with columns in DER, FA, MS, SC order (percent).
    pub fn table(&self) -> String {
        let width = self.sessions.iter().map(|(s, _)| s.len()).max().unwrap_or(0).max(7);
        let mut s = format!("{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}\n", "session", "DER", "FA", "MS", "SC");
        let row = |s: &mut String, name: &str, d: &DerBreakdown| {
            writeln!(
                s,
                "{:<width$}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}",
                name,
                100.0 * d.der(),
                100.0 * d.fa_rate(),
                100.0 * d.ms_rate(),
                100.0 * d.sc_rate()
            )
            .expect("writing to a String");
        };
        for (name, d) in &self.sessions {
            row(&mut s, name, d);
        }
        row(&mut s, "OVERALL", &self.total);
        s
    }

    /// One JSON object per session plus an `OVERALL` line.
    pub fn json_lines(&self) -> String {
        let line = |name: &str, d: &DerBreakdown| {
            serde_json::json!({
                "session": name,
                "der": d.der(),
                "fa": d.fa_rate(),
                "ms": d.ms_rate(),
                "sc": d.sc_rate(),
                "scored_speech_s": d.scored_speech,
            })
            .to_string()
        };
        let mut s = String::new();
        for (name, d) in &self.sessions {
            s.push_str(&line(name, d));
            s.push('\n');
        }
        s.push_str(&line("OVERALL", &self.total));
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub hours: f64,
    pub sessions: usize,
    pub mean_speakers: f64,
}

/// Total duration (session start to last reference end), session count and
/// mean number of speakers per session.
pub fn dataset_stats(reference: &Annotation) -> Result<DatasetStats> {
    if reference.sessions.is_empty() {
        return Err(Error::invalid("no sessions"));
    }
    let mut seconds = 0.0;
    let mut speakers = 0usize;
    for turns in reference.sessions.values() {
        seconds += turns.iter().map(|t| t.end).fold(0.0, f64::max);
        speakers += names(turns).len();
    }
    let n = reference.sessions.len();
    Ok(DatasetStats { hours: seconds / 3600.0, sessions: n, mean_speakers: speakers as f64 / n as f64 })
}

impl DatasetStats {
    pub fn table(&self) -> String {
        format!(
            "{:>8}  {:>8}  {:>12}\n{:>8.2}  {:>8}  {:>12.2}\n",
            "hours", "sessions", "mean_spk", self.hours, self.sessions, self.mean_speakers
        )
    }
}
