//! Diarisation with oracle speech segments.
//!
//! Each voiced segment is covered by 3.2 s windows at a 0.8 s shift. Every
//! window yields one embedding per 80 ms slot; slots seen by several windows
//! average their raw embeddings before length normalisation. The slots of a
//! whole session are optionally refined, compared by cosine similarity,
//! counted by thresholding normalised-Laplacian eigenvalues and clustered
//! spectrally. Runs of equal labels become hypothesis intervals.
//!
//! A conventional extractor ([`crate::model::PooledModel`]) can stand in for
//! the high-resolution one; it emits one embedding per window, which labels
//! the window's central shift-length region.

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::features::{MelExtractor, MelFeatures};
use crate::model::{normalize_rows, HeeModel, PooledModel, COMPRESSION};
use crate::nn::layers::{Init, Linear};
use crate::nn::{Mat, ParamStore, Tape};
use crate::nn::optim::Adam;

/// A stretch of speech, in seconds from the session start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoicedSegment {
    pub session: String,
    pub start: f64,
    pub end: f64,
}

impl VoicedSegment {
    pub fn new(session: impl Into<String>, start: f64, end: f64) -> Result<Self> {
        if !(start >= 0.0 && end > start && end.is_finite()) {
            return Err(Error::invalid(format!("invalid segment [{start}, {end})")));
        }
        Ok(Self { session: session.into(), start, end })
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Sorts segments and merges any that overlap or touch.
pub fn merge_segments(mut segs: Vec<VoicedSegment>) -> Vec<VoicedSegment> {
    segs.sort_by(|a, b| a.start.total_cmp(&b.start));
    let mut out: Vec<VoicedSegment> = Vec::with_capacity(segs.len());
    for s in segs {
        match out.last_mut() {
            Some(last) if s.start <= last.end => last.end = last.end.max(s.end),
            _ => out.push(s),
        }
    }
    out
}

/// Reads `start<TAB>end` lines (whitespace also accepted).
pub fn parse_segment_list(session: &str, text: &str) -> Result<Vec<VoicedSegment>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: &str| Error::Parse { line: i + 1, msg: msg.into() };
        if fields.len() != 2 {
            return Err(bad("expected start<TAB>end"));
        }
        let start: f64 = fields[0].parse().map_err(|_| bad("start is not a number"))?;
        let end: f64 = fields[1].parse().map_err(|_| bad("end is not a number"))?;
        out.push(VoicedSegment::new(session, start, end).map_err(|e| bad(&e.to_string()))?);
    }
    Ok(out)
}

pub fn load_segment_list(session: &str, path: impl AsRef<Path>) -> Result<Vec<VoicedSegment>> {
    parse_segment_list(session, &std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub enabled: bool,
    /// Output dimension of the auto-encoder.
    pub dim: usize,
    pub steps: usize,
    pub lr: f64,
    /// Inverse temperature of the attention over the session.
    pub sharpness: f64,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { enabled: true, dim: 32, steps: 200, lr: 0.01, sharpness: 10.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub window_s: f64,
    pub shift_s: f64,
    pub eig_threshold: f64,
    /// Fraction of each affinity row kept when binarising.
    pub top_p: f64,
    pub max_speakers: usize,
    /// Use this speaker count instead of estimating it.
    pub oracle_speakers: Option<usize>,
    pub kmeans_restarts: usize,
    pub refine: RefineConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window_s: 3.2,
            shift_s: 0.8,
            eig_threshold: 0.3,
            top_p: 0.2,
            max_speakers: 10,
            oracle_speakers: None,
            kmeans_restarts: 10,
            refine: RefineConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Defaults of the conventional extractor: 1.5 s windows at 0.5 s shift.
    pub fn conventional() -> Self {
        Self { window_s: 1.5, shift_s: 0.5, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.window_s > 0.0 && self.shift_s > 0.0 && self.shift_s <= self.window_s) {
            return Err(Error::Config("need 0 < shift_s <= window_s".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config("top_p must lie in (0, 1]".into()));
        }
        if self.max_speakers == 0 || self.kmeans_restarts == 0 {
            return Err(Error::Config("max_speakers and kmeans_restarts must be positive".into()));
        }
        if self.refine.dim == 0 {
            return Err(Error::Config("refine.dim must be positive".into()));
        }
        Ok(())
    }
}

/// Time span of one timeline slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub segment: usize,
    pub start: f64,
    pub end: f64,
}

/// Accumulated slot embeddings of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTimeline {
    pub slots: Vec<Slot>,
    pub sums: Mat,
    pub coverage: Vec<usize>,
}

impl EmbeddingTimeline {
    fn empty(dim: usize) -> Self {
        Self { slots: Vec::new(), sums: Mat::zeros((0, dim)), coverage: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.sums.ncols()
    }

    /// Unit-norm mean embedding of each slot.
    pub fn embeddings(&self) -> Mat {
        let mut e = self.sums.clone();
        for (mut row, &c) in e.rows_mut().into_iter().zip(&self.coverage) {
            row /= c.max(1) as f64;
        }
        normalize_rows(&mut e);
        e
    }

    fn append(&mut self, slots: Vec<Slot>, sums: Mat, coverage: Vec<usize>) {
        self.slots.extend(slots);
        self.sums = ndarray::concatenate![ndarray::Axis(0), self.sums, sums];
        self.coverage.extend(coverage);
    }
}

/// Something that turns a feature window into slot embeddings.
pub trait WindowEmbedder: Sync {
    fn dim(&self) -> usize;
    fn n_mels(&self) -> usize;
    /// Raw embeddings, one row per 8 input frames.
    fn embed_window(&self, f: &MelFeatures) -> Result<Mat>;
}

impl WindowEmbedder for HeeModel {
    fn dim(&self) -> usize {
        self.config().d_model
    }

    fn n_mels(&self) -> usize {
        self.config().n_mels
    }

    fn embed_window(&self, f: &MelFeatures) -> Result<Mat> {
        self.embed_raw(f)
    }
}

/// Start frames of the windows covering `n_frames` (a multiple of 8).
/// A final window is aligned to the end when the regular grid stops short.
pub fn window_starts(n_frames: usize, window: usize, shift: usize) -> Vec<usize> {
    if n_frames <= window {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..).map(|i| i * shift).take_while(|s| s + window <= n_frames).collect();
    let last = *starts.last().expect("n_frames > window");
    if last + window < n_frames {
        starts.push(n_frames - window);
    }
    starts
}

fn frame_of(t: f64, hop: f64) -> usize {
    (t / hop + 1e-6).round() as usize
}

/// High-resolution extraction over every segment of one session.
pub fn slide_extract(
    features: &MelFeatures,
    segments: &[VoicedSegment],
    model: &impl WindowEmbedder,
    window_s: f64,
    shift_s: f64,
) -> Result<EmbeddingTimeline> {
    let hop = features.frame_hop_s();
    let slot_frames = COMPRESSION;
    let window = frame_of(window_s, hop) / slot_frames * slot_frames;
    let shift = frame_of(shift_s, hop) / slot_frames * slot_frames;
    if window == 0 || shift == 0 {
        return Err(Error::Config("window and shift must span at least one 80 ms slot".into()));
    }
    let mut timeline = EmbeddingTimeline::empty(model.dim());
    for (si, seg) in segments.iter().enumerate() {
        let first = frame_of(seg.start, hop);
        let last = frame_of(seg.end, hop).min(features.n_frames());
        let n_slots = last.saturating_sub(first) / slot_frames;
        if n_slots == 0 {
            warn!("skipping {:.3}-{:.3} s of {}: shorter than one 80 ms slot", seg.start, seg.end, seg.session);
            continue;
        }
        let mut sums = Mat::zeros((n_slots, model.dim()));
        let mut coverage = vec![0usize; n_slots];
        let seg_frames = last - first;
        if seg_frames <= window {
            // Pad with zeros (the normalised mean) to whole slots and keep
            // only slots backed entirely by audio.
            let padded = seg_frames.div_ceil(slot_frames) * slot_frames;
            let mut data = Mat::zeros((padded, features.n_mels()));
            data.slice_mut(ndarray::s![..seg_frames, ..]).assign(&features.data().slice(ndarray::s![first..last, ..]));
            let e = model.embed_window(&MelFeatures::new(data, hop)?)?;
            sums.assign(&e.slice(ndarray::s![..n_slots, ..]));
            coverage.fill(1);
        } else {
            for start in window_starts(n_slots * slot_frames, window, shift) {
                let f = features.frames(first + start, first + start + window)?;
                let e = model.embed_window(&f)?;
                let s0 = start / slot_frames;
                let mut dst = sums.slice_mut(ndarray::s![s0..s0 + e.nrows(), ..]);
                dst += &e;
                for c in &mut coverage[s0..s0 + e.nrows()] {
                    *c += 1;
                }
            }
        }
        let slot_s = slot_frames as f64 * hop;
        let base = first as f64 * hop;
        let slots = (0..n_slots)
            .map(|j| Slot { segment: si, start: base + j as f64 * slot_s, end: base + (j + 1) as f64 * slot_s })
            .collect();
        timeline.append(slots, sums, coverage);
    }
    Ok(timeline)
}

/// Conventional extraction: one pooled embedding per window, assigned to
/// the window's central `shift_s` region.
pub fn conventional_extract(
    features: &MelFeatures,
    segments: &[VoicedSegment],
    model: &PooledModel,
    window_s: f64,
    shift_s: f64,
) -> Result<EmbeddingTimeline> {
    let hop = features.frame_hop_s();
    let shift = frame_of(shift_s, hop).max(1);
    let window = (frame_of(window_s, hop) / COMPRESSION * COMPRESSION).max(COMPRESSION);
    let dim = model.config().d_model;
    let mut timeline = EmbeddingTimeline::empty(dim);
    for (si, seg) in segments.iter().enumerate() {
        let first = frame_of(seg.start, hop);
        let last = frame_of(seg.end, hop).min(features.n_frames());
        let seg_frames = last.saturating_sub(first);
        if seg_frames < COMPRESSION {
            warn!("skipping {:.3}-{:.3} s of {}: shorter than 80 ms", seg.start, seg.end, seg.session);
            continue;
        }
        let n_regions = seg_frames.div_ceil(shift);
        let mut sums = Mat::zeros((n_regions, dim));
        let mut slots = Vec::with_capacity(n_regions);
        for r in 0..n_regions {
            let r0 = r * shift;
            let r1 = ((r + 1) * shift).min(seg_frames);
            let centre = (r0 + r1) / 2;
            let len = window.min(seg_frames / COMPRESSION * COMPRESSION).max(COMPRESSION);
            let w0 = centre.saturating_sub(len / 2).min(seg_frames.saturating_sub(len));
            let w1 = (w0 + len).min(seg_frames);
            let mut data = Mat::zeros((len, features.n_mels()));
            data.slice_mut(ndarray::s![..w1 - w0, ..])
                .assign(&features.data().slice(ndarray::s![first + w0..first + w1, ..]));
            let e = model.embed(&MelFeatures::new(data, hop)?)?;
            sums.row_mut(r).assign(&ndarray::ArrayView1::from(&e));
            slots.push(Slot { segment: si, start: (first + r0) as f64 * hop, end: (first + r1) as f64 * hop });
        }
        timeline.append(slots, sums, vec![1; n_regions]);
    }
    Ok(timeline)
}

/// Per-session auto-encoder followed by attention over all slots. Bypassed
/// (embeddings returned unchanged) when disabled or when there are fewer
/// slots than the reduced dimension.
pub fn refine_embeddings(e: &Mat, cfg: &RefineConfig) -> Result<Mat> {
    let (n, d) = e.dim();
    if !cfg.enabled {
        return Ok(e.clone());
    }
    if n < cfg.dim || n < 2 {
        warn!("refinement bypassed: {n} slots for a {}-dimensional code", cfg.dim);
        return Ok(e.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let enc = Linear::new(&mut store, "enc", d, cfg.dim, true, Init::Xavier, &mut rng);
    let dec = Linear::new(&mut store, "dec", cfg.dim, d, true, Init::Xavier, &mut rng);
    let mut adam = Adam::new(&store);
    for _ in 0..cfg.steps {
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let x = t.leaf(e.clone());
        let z = enc.forward(&mut t, &p, x);
        let y = dec.forward(&mut t, &p, z);
        let diff = t.value(y) - e;
        let value = diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64;
        let grad = diff * (2.0 / (n * d) as f64);
        let l = t.loss(y, value, grad);
        let mut g = t.backward(l);
        let grads: Vec<Option<Mat>> = p.vars().iter().map(|&v| g.take(v)).collect();
        adam.update(&mut store, &grads, cfg.lr, |_| true);
    }
    let mut t = Tape::new();
    let p = store.bind(&mut t);
    let x = t.leaf(e.clone());
    let z = enc.forward(&mut t, &p, x);
    let mut code = t.value(z).clone();
    let mean = code.mean_axis(ndarray::Axis(0)).expect("n >= 2");
    code -= &mean;
    normalize_rows(&mut code);
    let mut scores = code.dot(&code.t()) * cfg.sharpness;
    for mut row in scores.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    let mut out = &code + &scores.dot(&code);
    normalize_rows(&mut out);
    Ok(out)
}

/// Pairwise cosine similarities.
pub fn cosine_affinity(e: &Mat) -> Result<Mat> {
    if e.nrows() == 0 {
        return Err(Error::invalid("no embeddings to compare"));
    }
    let mut u = e.clone();
    for (i, row) in u.rows().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::invalid(format!("embedding {i} has norm {n}")));
        }
    }
    normalize_rows(&mut u);
    let mut a = u.dot(&u.t());
    let n = a.nrows();
    for i in 0..n {
        a[[i, i]] = 1.0;
        for j in 0..i {
            let v = (0.5 * (a[[i, j]] + a[[j, i]])).clamp(-1.0, 1.0);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
    Ok(a)
}

/// Row-max normalisation, row-wise top-p binarisation (union-symmetrised).
pub fn binarize_affinity(a: &Mat, top_p: f64) -> Mat {
    let n = a.nrows();
    let keep = ((top_p * n as f64).ceil() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut g = Mat::zeros((n, n));
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        let row = a.row(i);
        let max = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let scale = if max > 0.0 { max } else { 1.0 };
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        order.sort_by(|&x, &y| (row[y] / scale).total_cmp(&(row[x] / scale)).then(x.cmp(&y)));
        for &j in order.iter().take(keep) {
            g[[i, j]] = 1.0;
        }
    }
    for i in 0..n {
        for j in 0..i {
            let v = g[[i, j]].max(g[[j, i]]);
            g[[i, j]] = v;
            g[[j, i]] = v;
        }
    }
    g
}

/// Symmetric normalised Laplacian `I − D^{-1/2} G D^{-1/2}`.
pub fn normalized_laplacian(g: &Mat) -> Mat {
    let n = g.nrows();
    let d: Vec<f64> = g.rows().into_iter().map(|r| r.sum()).collect();
    Mat::from_shape_fn((n, n), |(i, j)| {
        let w = if d[i] > 0.0 && d[j] > 0.0 { g[[i, j]] / (d[i] * d[j]).sqrt() } else { 0.0 };
        if i == j { 1.0 - w } else { -w }
    })
}

/// Eigenvalues ascending with matching eigenvector columns.
pub fn sorted_eigen(m: &Mat) -> Result<(Vec<f64>, Mat)> {
    let n = m.nrows();
    let dm = DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
    let eig = SymmetricEigen::try_new(dm, 1e-12, 10_000)
        .ok_or_else(|| Error::Linalg(format!("eigendecomposition of a {n}×{n} Laplacian did not converge")))?;
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Linalg(format!("non-finite eigenvalues for a {n}×{n} Laplacian")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = Mat::from_shape_fn((n, n), |(r, c)| eig.eigenvectors[(r, idx[c])]);
    Ok((values, vectors))
}

fn laplacian_of(a: &Mat, cfg: &PipelineConfig) -> Mat {
    normalized_laplacian(&binarize_affinity(a, cfg.top_p))
}

/// Number of Laplacian eigenvalues below the threshold, in `1..=max`.
pub fn estimate_speaker_count(a: &Mat, cfg: &PipelineConfig) -> Result<usize> {
    let n = a.nrows();
    if n < 2 {
        return Ok(1);
    }
    let (values, _) = sorted_eigen(&laplacian_of(a, cfg))?;
    let count = values.iter().filter(|&&v| v < cfg.eig_threshold).count();
    Ok(count.clamp(1, cfg.max_speakers.min(n)))
}

/// Spectral clustering into `k` groups.
pub fn spectral_cluster(a: &Mat, k: usize, cfg: &PipelineConfig) -> Result<Vec<usize>> {
    let n = a.nrows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot form {k} clusters from {n} embeddings")));
    }
    if k == 1 {
        return Ok(vec![0; n]);
    }
    let (_, vectors) = sorted_eigen(&laplacian_of(a, cfg))?;
    let mut x = vectors.slice(ndarray::s![.., ..k]).to_owned();
    normalize_rows(&mut x);
    Ok(kmeans(&x, k, cfg.kmeans_restarts, cfg.seed))
}

/// k-means with k-means++ seeding; the restart with the lowest inertia wins.
/// Labels are renumbered by first appearance.
pub fn kmeans(x: &Mat, k: usize, restarts: usize, seed: u64) -> Vec<usize> {
    let n = x.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let mut centres = Mat::zeros((k, x.ncols()));
        centres.row_mut(0).assign(&x.row(rng.random_range(0..n)));
        let mut d2: Vec<f64> = (0..n).map(|i| dist(x.row(i), centres.row(0))).collect();
        for c in 1..k {
            let total: f64 = d2.iter().sum();
            let pick = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut chosen = n - 1;
                for (i, &w) in d2.iter().enumerate() {
                    if u < w {
                        chosen = i;
                        break;
                    }
                    u -= w;
                }
                chosen
            } else {
                rng.random_range(0..n)
            };
            centres.row_mut(c).assign(&x.row(pick));
            for (i, d) in d2.iter_mut().enumerate() {
                *d = d.min(dist(x.row(i), centres.row(c)));
            }
        }
        let mut labels = vec![0usize; n];
        for _ in 0..100 {
            let mut changed = false;
            for i in 0..n {
                let l = (0..k).min_by(|&a, &b| dist(x.row(i), centres.row(a)).total_cmp(&dist(x.row(i), centres.row(b)))).expect("k >= 1");
                if l != labels[i] {
                    labels[i] = l;
                    changed = true;
                }
            }
            let mut sums = Mat::zeros(centres.dim());
            let mut counts = vec![0usize; k];
            for i in 0..n {
                sums.row_mut(labels[i]).scaled_add(1.0, &x.row(i));
                counts[labels[i]] += 1;
            }
            for c in 0..k {
                if counts[c] > 0 {
                    centres.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = (0..n).map(|i| dist(x.row(i), centres.row(labels[i]))).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b - 1e-12) {
            best = Some((inertia, labels));
        }
    }
    relabel_by_first_appearance(&best.expect("at least one restart").1)
}

pub fn relabel_by_first_appearance(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// Labelled time interval of a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledInterval {
    pub start: f64,
    pub end: f64,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiarisationHypothesis {
    pub session: String,
    pub intervals: Vec<LabeledInterval>,
}

impl DiarisationHypothesis {
    pub fn n_speakers(&self) -> usize {
        let mut l: Vec<usize> = self.intervals.iter().map(|i| i.label).collect();
        l.sort_unstable();
        l.dedup();
        l.len()
    }
}

/// Merges runs of equal labels over contiguous slots and clips to the
/// segments.
pub fn assemble_hypothesis(session: &str, labels: &[usize], timeline: &EmbeddingTimeline, segments: &[VoicedSegment]) -> Result<DiarisationHypothesis> {
    if labels.len() != timeline.len() {
        return Err(Error::Shape(format!("{} labels for {} slots", labels.len(), timeline.len())));
    }
    let mut intervals: Vec<LabeledInterval> = Vec::new();
    let mut prev_segment = usize::MAX;
    for (slot, &label) in timeline.slots.iter().zip(labels) {
        let seg = &segments[slot.segment];
        let start = slot.start.max(seg.start);
        let end = slot.end.min(seg.end);
        if end <= start {
            continue;
        }
        match intervals.last_mut() {
            Some(last) if last.label == label && slot.segment == prev_segment && (start - last.end).abs() < 1e-6 => last.end = end,
            _ => intervals.push(LabeledInterval { start, end, label }),
        }
        prev_segment = slot.segment;
    }
    Ok(DiarisationHypothesis { session: session.into(), intervals })
}

/// Embedding extractor used by a [`Diarizer`].
#[derive(Debug, Clone)]
pub enum Extractor {
    Hee(HeeModel),
    Conventional(PooledModel),
}

impl Extractor {
    pub fn n_mels(&self) -> usize {
        match self {
            Extractor::Hee(m) => m.config().n_mels,
            Extractor::Conventional(m) => m.config().n_mels,
        }
    }
}

/// Intermediate results of one session.
#[derive(Debug, Clone)]
pub struct SessionResult {
    pub hypothesis: DiarisationHypothesis,
    pub timeline: EmbeddingTimeline,
    pub labels: Vec<usize>,
    pub n_speakers: usize,
}

/// The full inference pipeline.
#[derive(Debug, Clone)]
pub struct Diarizer {
    extractor: Extractor,
    mel: MelExtractor,
    config: PipelineConfig,
}

impl Diarizer {
    pub fn new(extractor: Extractor, mel: MelExtractor, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        if mel.config().n_mels != extractor.n_mels() {
            return Err(Error::Config(format!(
                "features have {} bins, extractor expects {}",
                mel.config().n_mels,
                extractor.n_mels()
            )));
        }
        Ok(Self { extractor, mel, config })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn timeline(&self, audio: &Waveform, segments: &[VoicedSegment]) -> Result<EmbeddingTimeline> {
        let features = self.mel.extract(audio)?;
        match &self.extractor {
            Extractor::Hee(m) => slide_extract(&features, segments, m, self.config.window_s, self.config.shift_s),
            Extractor::Conventional(m) => conventional_extract(&features, segments, m, self.config.window_s, self.config.shift_s),
        }
    }

    /// Clusters a timeline and assembles the hypothesis.
    pub fn cluster(&self, session: &str, timeline: EmbeddingTimeline, segments: &[VoicedSegment]) -> Result<SessionResult> {
        if timeline.is_empty() {
            return Ok(SessionResult {
                hypothesis: DiarisationHypothesis { session: session.into(), intervals: Vec::new() },
                timeline,
                labels: Vec::new(),
                n_speakers: 0,
            });
        }
        let refined = refine_embeddings(&timeline.embeddings(), &self.config.refine)?;
        let a = cosine_affinity(&refined)?;
        let k = match self.config.oracle_speakers {
            Some(k) => k.clamp(1, a.nrows()),
            None => estimate_speaker_count(&a, &self.config)?,
        };
        let labels = spectral_cluster(&a, k, &self.config)?;
        let hypothesis = assemble_hypothesis(session, &labels, &timeline, segments)?;
        Ok(SessionResult { hypothesis, timeline, labels, n_speakers: k })
    }

    pub fn diarize(&self, session: &str, audio: &Waveform, segments: &[VoicedSegment]) -> Result<SessionResult> {
        let segments = merge_segments(segments.to_vec());
        let timeline = self.timeline(audio, &segments)?;
        self.cluster(session, timeline, &segments)
    }

    /// Independent sessions spread over `workers` threads; output order
    /// follows the input.
    pub fn diarize_many(&self, sessions: &[(String, Waveform, Vec<VoicedSegment>)], workers: usize) -> Result<Vec<SessionResult>> {
        let workers = workers.clamp(1, sessions.len().max(1));
        let chunk = sessions.len().div_ceil(workers).max(1);
        let parts: Vec<Result<Vec<SessionResult>>> = std::thread::scope(|s| {
            let handles: Vec<_> = sessions
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(|(id, w, segs)| self.diarize(id, w, segs)).collect::<Result<Vec<_>>>()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("diarisation worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(sessions.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::random_mat;
    use proptest::prelude::*;
    use rand::Rng;

    /// Returns each window's slot index as a one-hot-ish embedding so that
    /// averages can be checked exactly.
    struct Probe {
        dim: usize,
    }

    impl WindowEmbedder for Probe {
        fn dim(&self) -> usize {
            self.dim
        }
        fn n_mels(&self) -> usize {
            2
        }
        fn embed_window(&self, f: &MelFeatures) -> Result<Mat> {
            assert_eq!(f.n_frames() % 8, 0);
            let n = f.n_frames() / 8;
            // Column 0 carries the absolute frame index of the slot start,
            // column 1 the window length, so every window is distinguishable.
            Ok(Mat::from_shape_fn((n, self.dim), |(i, c)| match c {
                0 => f.data()[[i * 8, 0]],
                1 => 1.0 + f.n_frames() as f64 + f.data()[[0, 0]],
                _ => 1.0,
            }))
        }
    }

    fn ramp_features(seconds: f64) -> MelFeatures {
        let n = (seconds * 100.0).round() as usize;
        MelFeatures::new(Mat::from_shape_fn((n, 2), |(t, _)| t as f64), 0.01).unwrap()
    }

    fn seg(start: f64, end: f64) -> VoicedSegment {
        VoicedSegment::new("s", start, end).unwrap()
    }

    #[test]
    fn full_window_gives_forty_slots() {
        let f = ramp_features(3.2);
        let t = slide_extract(&f, &[seg(0.0, 3.2)], &Probe { dim: 3 }, 3.2, 0.8).unwrap();
        assert_eq!(t.len(), 40);
        assert!(t.coverage.iter().all(|&c| c == 1));
    }

    #[test]
    fn four_second_segment_has_two_windows() {
        let f = ramp_features(4.0);
        let t = slide_extract(&f, &[seg(0.0, 4.0)], &Probe { dim: 3 }, 3.2, 0.8).unwrap();
        assert_eq!(t.len(), 50);
        for (j, &c) in t.coverage.iter().enumerate() {
            assert_eq!(c, if (10..40).contains(&j) { 2 } else { 1 }, "slot {j}");
        }
        assert_eq!(window_starts(400, 320, 80), vec![0, 80]);
        assert_eq!(window_starts(416, 320, 80), vec![0, 80, 96]);
    }

    #[test]
    fn tiny_segments_are_skipped() {
        let f = ramp_features(1.0);
        let t = slide_extract(&f, &[seg(0.2, 0.25)], &Probe { dim: 3 }, 3.2, 0.8).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn short_segments_drop_padded_slots() {
        let f = ramp_features(2.0);
        let t = slide_extract(&f, &[seg(0.5, 1.45)], &Probe { dim: 3 }, 3.2, 0.8).unwrap();
        assert_eq!(t.len(), 11);
        assert!((t.slots[10].end - 1.38).abs() < 1e-9);
    }

    #[test]
    fn overlap_average_matches_per_window_recomputation() {
        let f = ramp_features(6.0);
        let probe = Probe { dim: 3 };
        let segs = [seg(0.3, 5.7)];
        let t = slide_extract(&f, &segs, &probe, 3.2, 0.8).unwrap();
        let e = t.embeddings();
        // Oracle: enumerate windows directly and average per slot.
        let first = 30;
        let n_slots = (570 - 30) / 8;
        let mut acc = vec![Vec::<Vec<f64>>::new(); n_slots];
        let mut starts = vec![];
        let mut s = 0;
        while s + 320 <= n_slots * 8 {
            starts.push(s);
            s += 80;
        }
        if starts.last().unwrap() + 320 < n_slots * 8 {
            starts.push(n_slots * 8 - 320);
        }
        for w in starts {
            let emb = probe.embed_window(&f.frames(first + w, first + w + 320).unwrap()).unwrap();
            for i in 0..emb.nrows() {
                acc[w / 8 + i].push(emb.row(i).to_vec());
            }
        }
        for (j, rows) in acc.iter().enumerate() {
            let mut mean = vec![0.0; 3];
            for r in rows {
                for c in 0..3 {
                    mean[c] += r[c] / rows.len() as f64;
                }
            }
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..3 {
                assert!((e[[j, c]] - mean[c] / norm).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn refinement_bypass_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut e = random_mat(60, 16, 1.0, &mut rng);
        normalize_rows(&mut e);
        let off = RefineConfig { enabled: false, ..Default::default() };
        assert_eq!(refine_embeddings(&e, &off).unwrap(), e);
        let on = RefineConfig { dim: 8, steps: 20, ..Default::default() };
        let r = refine_embeddings(&e, &on).unwrap();
        assert_eq!(r.dim(), (60, 8));
        let few = refine_embeddings(&e.slice(ndarray::s![..5, ..]).to_owned(), &on).unwrap();
        assert_eq!(few.dim(), (5, 16));
    }

    #[test]
    fn affinity_oracles() {
        let ones = Mat::from_elem((4, 3), 0.5);
        assert!(cosine_affinity(&ones).unwrap().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let orth = Mat::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        assert!(cosine_affinity(&orth).unwrap()[[0, 1]].abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_mat(5, 7, 1.0, &mut rng);
        let a = cosine_affinity(&x).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let (u, v) = (x.row(i), x.row(j));
                let want = u.dot(&v) / (u.dot(&u).sqrt() * v.dot(&v).sqrt());
                assert!((a[[i, j]] - want).abs() < 1e-9);
            }
        }
        let zero = Mat::zeros((2, 3));
        assert!(cosine_affinity(&zero).is_err());
    }

    fn block_affinity(sizes: &[usize]) -> Mat {
        let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(k, &n)| std::iter::repeat_n(k, n)).collect();
        Mat::from_shape_fn((labels.len(), labels.len()), |(i, j)| if labels[i] == labels[j] { 1.0 } else { 0.0 })
    }

    #[test]
    fn count_on_ideal_blocks() {
        let cfg = PipelineConfig::default();
        assert_eq!(estimate_speaker_count(&block_affinity(&[20, 20]), &cfg).unwrap(), 2);
        assert_eq!(estimate_speaker_count(&Mat::ones((30, 30)), &cfg).unwrap(), 1);
    }

    #[test]
    fn two_blocks_are_recovered_exactly() {
        let cfg = PipelineConfig::default();
        let labels = spectral_cluster(&block_affinity(&[15, 25]), 2, &cfg).unwrap();
        assert!(labels[..15].iter().all(|&l| l == 0));
        assert!(labels[15..].iter().all(|&l| l == 1));
        assert_eq!(spectral_cluster(&Mat::ones((5, 5)), 1, &cfg).unwrap(), vec![0; 5]);
        assert!(spectral_cluster(&Mat::ones((3, 3)), 4, &cfg).is_err());
    }

    #[test]
    fn hypothesis_assembly() {
        let segs = vec![seg(0.0, 3.2)];
        let tl = slide_extract(&ramp_features(3.2), &segs, &Probe { dim: 3 }, 3.2, 0.8).unwrap();
        let one = assemble_hypothesis("s", &[0; 40], &tl, &segs).unwrap();
        assert_eq!(one.intervals.len(), 1);
        assert!((one.intervals[0].end - 3.2).abs() < 1e-9);
        let mut split = vec![0; 40];
        split[20..].fill(1);
        let two = assemble_hypothesis("s", &split, &tl, &segs).unwrap();
        assert_eq!(two.intervals.len(), 2);
        assert!((two.intervals[0].end - 1.6).abs() < 1e-9);
        let alt: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let h = assemble_hypothesis("s", &alt, &tl, &segs).unwrap();
        assert_eq!(h.intervals.len(), 40);
        assert!(h.intervals.iter().all(|i| (i.end - i.start - 0.08).abs() < 1e-9));
    }

    #[test]
    fn segment_lists_parse_and_merge() {
        let segs = parse_segment_list("s", "0.0\t1.0\n# c\n0.5\t2.0\n3.0 4.0\n").unwrap();
        let merged = merge_segments(segs);
        assert_eq!(merged.len(), 2);
        assert_eq!((merged[0].start, merged[0].end), (0.0, 2.0));
        assert!(parse_segment_list("s", "1.0\t0.5").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn clustering_is_permutation_equivariant(seed in 0u64..1000) {
            let a = block_affinity(&[6, 9, 7]);
            let n = a.nrows();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let cfg = PipelineConfig::default();
            let base = spectral_cluster(&a, 3, &cfg).unwrap();
            let pa = Mat::from_shape_fn((n, n), |(i, j)| a[[perm[i], perm[j]]]);
            let permuted = spectral_cluster(&pa, 3, &cfg).unwrap();
            let expected = relabel_by_first_appearance(&perm.iter().map(|&p| base[p]).collect::<Vec<_>>());
            prop_assert_eq!(permuted, expected);
        }

        #[test]
        fn binarised_graph_is_symmetric_and_keeps_top_neighbours(n in 2usize..30, top_p in 0.05f64..0.9, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Mat::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
            let g = binarize_affinity(&a, top_p);
            let keep = ((top_p * n as f64).ceil() as usize).clamp(1, n - 1);
            for i in 0..n {
                prop_assert_eq!(g[[i, i]], 0.0);
                prop_assert!(g.row(i).sum() >= keep as f64);
                for j in 0..n {
                    prop_assert_eq!(g[[i, j]], g[[j, i]]);
                }
            }
        }

        #[test]
        fn zero_eigenvalues_count_connected_components(sizes in proptest::collection::vec(2usize..8, 1..5), seed in 0u64..1000) {
            // Random connected blocks: a path plus random chords.
            let n: usize = sizes.iter().sum();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Mat::zeros((n, n));
            let mut start = 0;
            for &k in &sizes {
                for i in start..start + k {
                    for j in start..i {
                        if j + 1 == i || rng.random_bool(0.3) {
                            g[[i, j]] = 1.0;
                            g[[j, i]] = 1.0;
                        }
                    }
                }
                start += k;
            }
            let (values, _) = sorted_eigen(&normalized_laplacian(&g)).unwrap();
            prop_assert!(values.iter().all(|&v| (-1e-9..=2.0 + 1e-9).contains(&v)));
            let zeros = values.iter().filter(|&&v| v.abs() < 1e-8).count();
            prop_assert_eq!(zeros, sizes.len());
        }
    }
}
