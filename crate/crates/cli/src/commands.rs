use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::Args;
use hee::audio::Waveform;
use hee::checkpoint::{write_atomic, Checkpoint, KIND_HEE, KIND_POOLED};
use hee::experiment::{ablation_study, enhancer_study, eval_sessions, Ablation, ExperimentReport};
use hee::features::{MelConfig, MelExtractor};
use hee::nn::{Mat, ParamStore};
use hee::pipeline::{load_segment_list, Diarizer, Extractor};
use hee::scoring::{dataset_stats, score_annotations, Annotation, RttmRecord};
use hee::synth::{plan_mixture, sample_speaker_count, AugmentAssets, MixtureSynthesizer, SpeakerCorpus};
use hee::toy::toy_corpus;
use hee::train::{pretrain_backbone, HeeTrainer, StepRecord, TrainState};
use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use crate::config::{Resolved, Settings};
use crate::manifest::RunManifest;
use crate::{Cli, Command, UserError};

pub const SHARD_KIND: &str = "mixture-shard";

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Use the synthetic toy corpus (`toy.*` keys) instead of `data.corpus`.
    #[arg(long)]
    pub toy: bool,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    /// Number of evaluation sessions.
    #[arg(long, default_value_t = 4)]
    pub sessions: usize,
}

#[derive(Debug, Args)]
pub struct AugmentFlags {
    #[arg(long)]
    pub no_shuffle: bool,
    #[arg(long)]
    pub no_specaug: bool,
    #[arg(long)]
    pub no_noise_rir: bool,
    /// Mixture length in seconds; each sample is a quarter of it by default.
    #[arg(long)]
    pub mixture_dur: Option<f64>,
}

impl AugmentFlags {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        if self.no_shuffle {
            v.push(("synth.shuffle", "false".into()));
        }
        if self.no_specaug {
            v.push(("synth.spec_augment", "false".into()));
        }
        if self.no_noise_rir {
            v.push(("synth.noise_rir", "false".into()));
        }
        if let Some(d) = self.mixture_dur {
            v.push(("synth.mixture_dur_s", d.to_string()));
        }
        v
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub augment: AugmentFlags,
    /// Number of mixtures; each yields `synth.samples_per_mixture` samples.
    #[arg(long, default_value_t = 8)]
    pub num: usize,
    /// Only draw and record the speaker plans.
    #[arg(long)]
    pub dry_run: bool,
}

impl SynthArgs {
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        self.augment.overrides()
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub augment: AugmentFlags,
    /// Pooled backbone checkpoint from `hee pretrain`.
    #[arg(long, conflicts_with = "pretrain")]
    pub backbone: Option<PathBuf>,
    /// Pretrain the backbone first.
    #[arg(long)]
    pub pretrain: bool,
    /// Continue from a saved training state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Train without the enhancer.
    #[arg(long)]
    pub no_enhancer: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub freeze_epochs: Option<usize>,
    #[arg(long)]
    pub batches_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

impl TrainArgs {
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut v = self.augment.overrides();
        let pairs = [
            ("train.epochs", self.epochs.map(|x| x.to_string())),
            ("train.freeze_epochs", self.freeze_epochs.map(|x| x.to_string())),
            ("train.batches_per_epoch", self.batches_per_epoch.map(|x| x.to_string())),
            ("train.batch_size", self.batch_size.map(|x| x.to_string())),
            ("train.lr", self.lr.map(|x| x.to_string())),
        ];
        v.extend(pairs.into_iter().filter_map(|(k, x)| x.map(|x| (k, x))));
        v
    }
}

#[derive(Debug, Args)]
pub struct DiarizeArgs {
    /// Inference checkpoint; a pooled one runs the conventional extractor.
    #[arg(long)]
    pub model: PathBuf,
    /// Session audio; repeat for several sessions.
    #[arg(long, required = true)]
    pub wav: Vec<PathBuf>,
    /// `start<TAB>end` voiced segments, one file per `--wav` in the same order.
    #[arg(long, required = true)]
    pub segments: Vec<PathBuf>,
    #[arg(long)]
    pub window: Option<f64>,
    #[arg(long)]
    pub shift: Option<f64>,
    /// Cluster into this many speakers instead of estimating the count.
    #[arg(long)]
    pub oracle_speakers: Option<usize>,
    #[arg(long)]
    pub no_refine: bool,
}

impl DiarizeArgs {
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        if let Some(w) = self.window {
            v.push(("pipeline.window_s", w.to_string()));
        }
        if let Some(s) = self.shift {
            v.push(("pipeline.shift_s", s.to_string()));
        }
        if let Some(k) = self.oracle_speakers {
            v.push(("pipeline.oracle_speakers", k.to_string()));
        }
        if self.no_refine {
            v.push(("pipeline.refine.enabled", "false".into()));
        }
        v
    }
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub hyp: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Ablations to run (`full`, `no-shuffle`, `no-specaug`, `no-noise-rir`,
    /// `duration-<seconds>`); all standard ones when omitted.
    #[arg(long)]
    pub ablation: Vec<String>,
    /// Training seeds; results are averaged over them.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Compare the extractor with and without its enhancer and the pooled
    /// baseline instead.
    #[arg(long)]
    pub enhancer_study: bool,
}

pub fn run(cli: &Cli, resolved: &Resolved) -> Result<()> {
    let run_dir = &cli.global.run_dir;
    std::fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let mut m = RunManifest::new(cli.command.name(), resolved, run_dir);
    let s = &resolved.settings;
    let conf = run_dir.join(format!("{}.conf", cli.command.name()));
    write_text(&conf, &crate::config::render(&resolved.values), &mut m)?;
    match &cli.command {
        Command::Toy(a) => toy(s, a, run_dir, &mut m)?,
        Command::Synth(a) => synth(s, a, run_dir, &mut m)?,
        Command::Pretrain(a) => pretrain(s, a, run_dir, &mut m)?,
        Command::Train(a) => train(s, a, run_dir, &mut m)?,
        Command::Diarize(a) => diarize(s, a, run_dir, &mut m)?,
        Command::Score(a) => score(a, run_dir, &mut m)?,
        Command::Stats(a) => stats(a, run_dir, &mut m)?,
        Command::Ablate(a) => ablate(s, a, run_dir, &mut m)?,
    }
    let path = m.write()?;
    info!("run manifest written to {}", path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str, m: &mut RunManifest) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_atomic(path, text.as_bytes())?;
    m.output(path)
}

fn load_corpus(s: &Settings, args: &CorpusArgs, m: &mut RunManifest) -> Result<SpeakerCorpus> {
    if args.toy {
        return Ok(toy_corpus(&s.toy)?.0);
    }
    if s.data.corpus.is_empty() {
        return Err(UserError::new("no corpus: set data.corpus to a speaker<TAB>wav manifest or pass --toy").into());
    }
    let path = Path::new(&s.data.corpus);
    if !path.is_file() {
        return Err(UserError::new(format!("corpus manifest {} does not exist", path.display())).into());
    }
    m.input(path)?;
    Ok(SpeakerCorpus::from_manifest(path)?)
}

fn load_assets(s: &Settings) -> Result<Option<AugmentAssets>> {
    if !s.synth.noise_rir {
        return Ok(None);
    }
    match (s.data.noise_dir.is_empty(), s.data.rir_dir.is_empty()) {
        (true, true) => {
            warn!("no data.noise_dir / data.rir_dir configured; using synthetic noise and impulse responses");
            Ok(Some(AugmentAssets::synthetic(s.seed)))
        }
        (false, false) => Ok(Some(AugmentAssets::from_dirs(&s.data.noise_dir, &s.data.rir_dir)?)),
        _ => Err(UserError::new("set both data.noise_dir and data.rir_dir, or neither").into()),
    }
}

fn synthesizer(s: &Settings, corpus: SpeakerCorpus) -> Result<MixtureSynthesizer> {
    let mel = MelExtractor::new(s.mel.clone())?;
    Ok(MixtureSynthesizer::new(Arc::new(corpus), s.synth.clone(), load_assets(s)?, mel)?)
}

/// Line-delimited JSON log, appended to when `append` is set.
struct JsonLog(BufWriter<File>);

impl JsonLog {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let f = OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(path)?;
        Ok(Self(BufWriter::new(f)))
    }

    fn record(&mut self, r: &impl Serialize) {
        if let Err(e) = serde_json::to_writer(&mut self.0, r).map_err(anyhow::Error::from).and_then(|_| Ok(self.0.write_all(b"\n")?)) {
            warn!("training log write failed: {e}");
        }
    }

    fn finish(mut self) -> Result<()> {
        Ok(self.0.flush()?)
    }
}

fn progress(stage: &str, r: &StepRecord) {
    if (r.step + 1) % 50 == 0 {
        info!("{stage} step {} epoch {} loss {:.4} acc {:.3}", r.step + 1, r.epoch, r.loss, r.accuracy);
    }
}

fn toy(s: &Settings, a: &ToyArgs, run_dir: &Path, m: &mut RunManifest) -> Result<()> {
    if a.sessions == 0 {
        return Err(UserError::new("--sessions must be positive").into());
    }
    let (corpus, voices) = toy_corpus(&s.toy)?;
    let root = run_dir.join("toy");
    let mut listing = String::new();
    for spk in 0..corpus.n_speakers() {
        let dir = root.join("corpus").join(format!("spk{spk:02}"));
        std::fs::create_dir_all(&dir)?;
        for (j, u) in corpus.utterances(spk).iter().enumerate() {
            let rel = format!("corpus/spk{spk:02}/utt{j:03}.wav");
            u.write_wav(root.join(&rel))?;
            listing.push_str(&format!("spk{spk:02}\t{rel}\n"));
        }
    }
    write_text(&root.join("corpus.tsv"), &listing, m)?;
    let sessions = eval_sessions(&voices, &s.session, a.sessions, s.seed)?;
    let mut records = Vec::new();
    let sdir = root.join("sessions");
    std::fs::create_dir_all(&sdir)?;
    for (i, sess) in sessions.iter().enumerate() {
        let name = format!("toy{i:03}");
        let wav = sdir.join(format!("{name}.wav"));
        sess.audio.write_wav(&wav)?;
        m.output(&wav)?;
        let seg: String = sess.segments.iter().map(|(a, b)| format!("{a:.3}\t{b:.3}\n")).collect();
        write_text(&sdir.join(format!("{name}.seg")), &seg, m)?;
        records.extend(hee::experiment::reference_turns(sess).into_iter().map(|t| RttmRecord {
            session: name.clone(),
            channel: "1".into(),
            onset: t.start,
            duration: t.end - t.start,
            speaker: t.speaker,
        }));
    }
    write_text(&root.join("ref.rttm"), &hee::scoring::write_rttm(&records), m)?;
    info!("wrote {} speakers and {} sessions under {}", corpus.n_speakers(), sessions.len(), root.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct MixtureEntry {
    index: usize,
    shard: Option<String>,
    speakers: Vec<String>,
    samples: usize,
    drops: Option<usize>,
    blocks: Option<usize>,
}

fn synth_one(synth: &MixtureSynthesizer, hop: usize, seed: u64, index: usize, dry_run: bool, dir: &Path) -> Result<MixtureEntry> {
    let mut rng = MixtureSynthesizer::stream(seed, 0, index as u64);
    let cfg = synth.config();
    let names = |ids: &[usize]| ids.iter().map(|&i| synth.corpus().name(i).to_string()).collect::<Vec<_>>();
    if dry_run {
        let k = sample_speaker_count(&cfg.speaker_count_probs, &mut rng).min(synth.corpus().n_speakers());
        let plan = plan_mixture(synth.corpus(), k, cfg.mixture_dur_s, hop, &mut rng)?;
        return Ok(MixtureEntry { index, shard: None, speakers: names(&plan.speakers), samples: cfg.samples_per_mixture, drops: None, blocks: None });
    }
    let (samples, record) = synth.synth_batch_efficient(&mut rng)?;
    let mut params = ParamStore::new();
    for (i, sm) in samples.iter().enumerate() {
        params.add(format!("sample{i}.features"), sm.features.data().clone());
        let labels = Mat::from_shape_fn((sm.labels.len(), 1), |(t, _)| sm.labels[t] as f64);
        params.add(format!("sample{i}.labels"), labels);
    }
    let name = format!("mix-{index:05}.ckpt");
    let meta = json!({ "speakers": names(&record.speakers), "drops": record.drops, "blocks": record.blocks });
    Checkpoint::new(SHARD_KIND, &meta, params)?.save(dir.join(&name))?;
    Ok(MixtureEntry {
        index,
        shard: Some(name),
        speakers: names(&record.speakers),
        samples: samples.len(),
        drops: Some(record.drops),
        blocks: Some(record.blocks),
    })
}

fn synth(s: &Settings, a: &SynthArgs, run_dir: &Path, m: &mut RunManifest) -> Result<()> {
    if a.num == 0 {
        return Err(UserError::new("--num must be positive").into());
    }
    let corpus = load_corpus(s, &a.corpus, m)?;
    let synth = synthesizer(s, corpus)?;
    let dir = run_dir.join("shards");
    std::fs::create_dir_all(&dir)?;
    let workers = s.workers.min(a.num);
    let mut entries: Vec<Result<MixtureEntry>> = Vec::with_capacity(a.num);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (synth, dir) = (&synth, &dir);
                scope.spawn(move || {
                    (w..a.num).step_by(workers).map(|i| synth_one(synth, s.mel.hop_samples(), s.seed, i, a.dry_run, dir)).collect::<Vec<_>>()
                })
            })
            .collect();
        let per_worker: Vec<Vec<Result<MixtureEntry>>> = handles.into_iter().map(|h| h.join().expect("synthesis worker panicked")).collect();
        let mut iters: Vec<_> = per_worker.into_iter().map(|v| v.into_iter()).collect();
        for i in 0..a.num {
            entries.push(iters[i % workers].next().expect("one entry per index"));
        }
    });
    let entries = entries.into_iter().collect::<Result<Vec<_>>>()?;
    let mut histogram = [0usize; 4];
    for e in &entries {
        histogram[e.speakers.len() - 1] += e.samples;
    }
    let total: usize = entries.iter().map(|e| e.samples).sum();
    let manifest = json!({
        "samples_per_mixture": s.synth.samples_per_mixture,
        "frames_per_sample": synth.frames_per_sample(),
        "samples": total,
        "speaker_count_histogram": histogram,
        "dry_run": a.dry_run,
        "mixtures": entries,
    });
    write_text(&dir.join("manifest.json"), &(serde_json::to_string_pretty(&manifest)? + "\n"), m)?;
    for e in &entries {
        if let Some(shard) = &e.shard {
            m.output(&dir.join(shard))?;
        }
    }
    m.note("samples", total)?;
    m.note("speaker_count_histogram", histogram)?;
    info!("{} mixtures, {total} samples", entries.len());
    Ok(())
}

fn mel_meta(s: &Settings) -> serde_json::Value {
    json!({ "mel": s.mel })
}

fn pretrain(s: &Settings, a: &CorpusArgs, run_dir: &Path, m: &mut RunManifest) -> Result<()> {
    let corpus = load_corpus(s, a, m)?;
    let mel = MelExtractor::new(s.mel.clone())?;
    let mut log = JsonLog::open(&run_dir.join("pretrain.log.jsonl"), false)?;
    let model = pretrain_backbone(&corpus, &mel, s.model.clone(), s.pretrain.clone(), |r| {
        log.record(r);
        progress("pretrain", r);
    })?;
    log.finish()?;
    m.output(&run_dir.join("pretrain.log.jsonl"))?;
    let mut ck = Checkpoint::from_pooled(&model)?;
    ck.meta = mel_meta(s);
    let path = run_dir.join("backbone.ckpt");
    ck.save(&path)?;
    m.output(&path)?;
    Ok(())
}

fn train(s: &Settings, a: &TrainArgs, run_dir: &Path, m: &mut RunManifest) -> Result<()> {
    if a.resume.is_none() && a.backbone.is_none() && !a.pretrain {
        return Err(UserError::new("pass --backbone <checkpoint>, --pretrain or --resume <state>").into());
    }
    let corpus = load_corpus(s, &a.corpus, m)?;
    let synth = synthesizer(s, corpus)?;
    let ckpt_dir = run_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let log_path = run_dir.join("train.log.jsonl");
    let mut trainer = match &a.resume {
        Some(path) => {
            m.input(path)?;
            HeeTrainer::resume(TrainState::load(path)?, &synth)?
        }
        None => {
            let backbone = match &a.backbone {
                Some(path) => {
                    m.input(path)?;
                    Checkpoint::load(path)?.into_pooled()?
                }
                None => {
                    let mel = MelExtractor::new(s.mel.clone())?;
                    let mut log = JsonLog::open(&run_dir.join("pretrain.log.jsonl"), false)?;
                    let model = pretrain_backbone(synth.corpus(), &mel, s.model.clone(), s.pretrain.clone(), |r| {
                        log.record(r);
                        progress("pretrain", r);
                    })?;
                    log.finish()?;
                    let mut ck = Checkpoint::from_pooled(&model)?;
                    ck.meta = mel_meta(s);
                    let path = run_dir.join("backbone.ckpt");
                    ck.save(&path)?;
                    m.output(&path)?;
                    model
                }
            };
            if backbone.config().n_mels != s.mel.n_mels {
                return Err(UserError::new(format!(
                    "backbone expects {} mel bins but mel.n_mels is {}",
                    backbone.config().n_mels,
                    s.mel.n_mels
                ))
                .into());
            }
            let model_cfg = hee::model::HeeConfig { n_classes: 0, ..backbone.config().clone() };
            HeeTrainer::new(model_cfg, Some(backbone.params()), !a.no_enhancer, &synth, s.train.clone())?
        }
    };
    let mut log = JsonLog::open(&log_path, a.resume.is_some())?;
    let mut saved = Vec::new();
    trainer.run(
        |r| {
            log.record(r);
            progress("train", r);
        },
        |state| {
            let path = ckpt_dir.join(format!("epoch-{:03}.state", state.epoch()));
            state.save(&path)?;
            saved.push(path);
            Ok(())
        },
    )?;
    log.finish()?;
    m.output(&log_path)?;
    for p in &saved {
        m.output(p)?;
    }
    let mut ck = Checkpoint::from_hee(trainer.model())?;
    ck.meta = mel_meta(s);
    let path = run_dir.join("model.ckpt");
    ck.save(&path)?;
    m.output(&path)?;
    m.note("enhancer", !a.no_enhancer)?;
    Ok(())
}

fn diarize(s: &Settings, a: &DiarizeArgs, run_dir: &Path, m: &mut RunManifest) -> Result<()> {
    if a.wav.len() != a.segments.len() {
        return Err(UserError::new(format!("{} --wav but {} --segments", a.wav.len(), a.segments.len())).into());
    }
    m.input(&a.model)?;
    let ck = Checkpoint::load(&a.model)?;
    let mel_cfg: MelConfig = match ck.meta.get("mel") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => s.mel.clone(),
    };
    let extractor = match ck.kind.as_str() {
        KIND_HEE => Extractor::Hee(ck.into_hee()?),
        KIND_POOLED => Extractor::Conventional(ck.into_pooled()?),
        other => return Err(UserError::new(format!("{} is a {other} checkpoint, not a model", a.model.display())).into()),
    };
    if extractor.n_mels() != mel_cfg.n_mels {
        return Err(UserError::new(format!("model expects {} mel bins, features have {}", extractor.n_mels(), mel_cfg.n_mels)).into());
    }
    let diarizer = Diarizer::new(extractor, MelExtractor::new(mel_cfg)?, s.pipeline.clone())?;
    let mut seen = BTreeSet::new();
    let mut inputs = Vec::new();
    for (wav, seg) in a.wav.iter().zip(&a.segments) {
        let name = wav.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if !seen.insert(name.clone()) {
            return Err(UserError::new(format!("two sessions named {name}")).into());
        }
        m.input(wav)?;
        m.input(seg)?;
        let audio = Waveform::read_wav(wav)?;
        let segments = load_segment_list(&name, seg)?;
        inputs.push((name, audio, segments));
    }
    let (empty, work): (Vec<_>, Vec<_>) = inputs.into_iter().partition(|(_, _, segs)| segs.is_empty());
    for (name, _, _) in &empty {
        warn!("session {name} has no voiced segments; writing an empty hypothesis");
    }
    let results = diarizer.diarize_many(&work, s.workers)?;
    let out = run_dir.join("rttm");
    std::fs::create_dir_all(&out)?;
    let mut all = Annotation::default();
    let mut speakers = serde_json::Map::new();
    for r in &results {
        let ann = Annotation::from_hypotheses(std::slice::from_ref(&r.hypothesis));
        write_text(&out.join(format!("{}.rttm", r.hypothesis.session)), &ann.to_rttm(), m)?;
        speakers.insert(r.hypothesis.session.clone(), r.n_speakers.into());
        all.sessions.extend(ann.sessions);
    }
    for (name, _, _) in &empty {
        write_text(&out.join(format!("{name}.rttm")), "", m)?;
        speakers.insert(name.clone(), 0.into());
    }
    write_text(&run_dir.join("hyp.rttm"), &all.to_rttm(), m)?;
    m.note("speakers", speakers)?;
    Ok(())
}

fn score(a: &ScoreArgs, run_dir: &Path, m: &mut RunManifest) -> Result<()> {
    m.input(&a.reference)?;
    m.input(&a.hyp)?;
    let reference = Annotation::load(&a.reference)?;
    let hyp = Annotation::load(&a.hyp)?;
    let report = score_annotations(&reference, &hyp)?;
    let table = report.table();
    print!("{table}");
    write_text(&run_dir.join("score.txt"), &table, m)?;
    write_text(&run_dir.join("score.jsonl"), &report.json_lines(), m)?;
    Ok(())
}

fn stats(a: &StatsArgs, run_dir: &Path, m: &mut RunManifest) -> Result<()> {
    m.input(&a.reference)?;
    let st = dataset_stats(&Annotation::load(&a.reference)?)?;
    let table = st.table();
    print!("{table}");
    write_text(&run_dir.join("stats.txt"), &table, m)?;
    m.note("stats", &st)?;
    Ok(())
}

fn ablate(s: &Settings, a: &AblateArgs, run_dir: &Path, m: &mut RunManifest) -> Result<()> {
    let ablations = if a.ablation.is_empty() {
        Ablation::standard()
    } else {
        a.ablation.iter().map(|n| Ablation::parse(n).map_err(|e| UserError::new(e.to_string()).into())).collect::<Result<Vec<_>>>()?
    };
    if a.enhancer_study && !a.ablation.is_empty() {
        return Err(UserError::new("--enhancer-study does not take --ablation").into());
    }
    let base = s.experiment();
    for ab in &ablations {
        ab.apply(&base).map_err(|e| UserError::new(format!("{}: {e}", ab.name())))?;
    }
    let mut report = ExperimentReport::default();
    for &seed in &a.seeds {
        let cfg = base.with_seed(seed);
        info!("seed {seed}");
        let r = if a.enhancer_study {
            enhancer_study(&cfg, progress)?
        } else {
            ablation_study(&cfg, &ablations, progress)?
        };
        report.merge(r);
    }
    let table = report.table();
    print!("{table}");
    let stem = if a.enhancer_study { "enhancer-study" } else { "ablation" };
    write_text(&run_dir.join(format!("{stem}.txt")), &table, m)?;
    write_text(&run_dir.join(format!("{stem}.jsonl")), &report.json_lines()?, m)?;
    Ok(())
}
