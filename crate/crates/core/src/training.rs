//! Two-phase training: domain classifier pretraining, then generator
//! optimisation against the weighted objective, with checkpoints, JSON-lines
//! logs, evaluation snapshots and the per-domain collapse monitor.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::dataset::{Corpus, PairBatch, PairSampler, Split};
use crate::encoders::DistinctiveEncoder;
use crate::error::{Error, Result};
use crate::image::{stack_dyn, ImageTensor};
use crate::losses::{cls_var, contextual_loss_var, psu_var, rec_var, total_loss, LossBreakdown, LossComponents, LossWeights};
use crate::metrics::{evaluate_model, pristine_niqe, EvalOptions, EvalReport};
use crate::model::{stack_codes, stack_rows, Encoded, StyleModel};
use crate::nn::Adam;

pub use crate::config::{PsuEmbedding, StyleSource, TextureSource, TrainConfig};

/// Stream offset separating the classifier's batch sampler from other seeded draws.
const CLS_STREAM: u64 = 0xC1A5_51F1;

fn jsonl_line<T: Serialize>(w: &mut impl Write, path: &Path, value: &T) -> Result<()> {
    let line = serde_json::to_string(value).expect("record serialises");
    writeln!(w, "{line}").map_err(|e| Error::CheckpointIoFailure(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::CheckpointIoFailure(format!("{}: {e}", parent.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::CheckpointIoFailure(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::CheckpointIoFailure(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Classifier phase

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClsLogRecord {
    pub iter: usize,
    pub loss: f64,
    /// Present at accuracy checks only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ClassifierRun {
    pub encoder: DistinctiveEncoder,
    pub log: Vec<ClsLogRecord>,
    pub iterations: usize,
    pub train_accuracy: f64,
}

/// Fraction of `records` whose predicted domain is their own.
pub fn classifier_accuracy(enc: &DistinctiveEncoder, corpus: &Corpus, records: &[usize]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut hits = 0usize;
    for chunk in records.chunks(16) {
        let tape = Tape::<f32>::new();
        let p = enc.bind(&tape);
        let imgs: Vec<&ImageTensor> = chunk.iter().map(|&i| &corpus.images[i]).collect();
        let (_, logits) = enc.forward(&p, tape.constant(stack_dyn(&imgs)))?;
        let v = logits.value();
        for (row, &i) in v.outer_iter().zip(chunk) {
            let mut best = 0;
            for (k, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = k;
                }
            }
            hits += usize::from(best == corpus.records[i].domain_id);
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Trains the distinctive encoder and its domain head with the
/// classification loss on random train batches until the train accuracy
/// reaches `cls_target_accuracy` or `cls_iterations` run out.
pub fn pretrain_classifier(corpus: &Corpus, config: &TrainConfig) -> Result<ClassifierRun> {
    config.validate()?;
    let n = corpus.registry.len();
    let train = corpus.indices(Split::Train);
    let with_train: BTreeSet<usize> = train.iter().map(|&i| corpus.records[i].domain_id).collect();
    if n < 2 || with_train.len() < 2 {
        return Err(Error::SingleDomainCorpus);
    }
    let mut enc = DistinctiveEncoder::new(config.classifier_config(n), config.seed)?;
    let mut adam = Adam::new(config.cls_lr, config.beta1, config.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ CLS_STREAM);
    let mut log = Vec::new();
    let mut accuracy = 0.0;
    let mut iterations = 0;
    for it in 1..=config.cls_iterations {
        let picks: Vec<usize> = (0..config.cls_batch_size).map(|_| train[rng.random_range(0..train.len())]).collect();
        let labels: Vec<usize> = picks.iter().map(|&i| corpus.records[i].domain_id).collect();
        let imgs: Vec<&ImageTensor> = picks.iter().map(|&i| &corpus.images[i]).collect();
        let grads = {
            let tape = Tape::<f32>::new();
            let p = enc.params.bind(&tape, true);
            let (_, logits) = enc.forward(&p, tape.constant(stack_dyn(&imgs)))?;
            let loss = cls_var(logits, &labels)?;
            let l = loss.item() as f64;
            if !l.is_finite() {
                return Err(Error::DivergenceDetected(it));
            }
            log.push(ClsLogRecord { iter: it, loss: l, train_accuracy: None });
            p.grads(&tape.backward(loss))
        };
        adam.step(&mut enc.params, &grads);
        iterations = it;
        if it % config.cls_check_interval == 0 || it == config.cls_iterations {
            accuracy = classifier_accuracy(&enc, corpus, &train)?;
            log.last_mut().expect("pushed").train_accuracy = Some(accuracy);
            if accuracy >= config.cls_target_accuracy {
                break;
            }
        }
    }
    Ok(ClassifierRun { encoder: enc, log, iterations, train_accuracy: accuracy })
}

/// Classifier phase from a manifest; writes `cls_log.jsonl` and
/// `classifier.ckpt` under `out_dir`.
pub fn pretrain_style_classifier(manifest: &Path, config: &TrainConfig, out_dir: &Path) -> Result<Checkpoint> {
    config.validate()?;
    let corpus = Corpus::load(manifest, config.output_size)?;
    let run = pretrain_classifier(&corpus, config)?;
    let log_path = out_dir.join("cls_log.jsonl");
    let mut w = create(&log_path)?;
    for r in &run.log {
        jsonl_line(&mut w, &log_path, r)?;
    }
    w.flush().map_err(|e| Error::CheckpointIoFailure(format!("{}: {e}", log_path.display())))?;
    let names = domain_names(&corpus);
    let ck = Checkpoint::classifier(config, &names, &run.encoder, run.iterations as u64);
    ck.save(&out_dir.join("classifier.ckpt"))?;
    Ok(ck)
}

fn domain_names(corpus: &Corpus) -> Vec<String> {
    corpus.registry.domains().iter().map(|d| d.name.clone()).collect()
}

// ---------------------------------------------------------------------------
// Generator phase

/// One iteration's loss breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub iter: usize,
    pub rec: f64,
    pub psu: f64,
    pub scx: f64,
    pub ccx: f64,
    pub cls: f64,
    pub id: f64,
    pub textimage: f64,
    pub total: f64,
    /// Items of the batch whose content and style are the same sample.
    pub same_pairs: usize,
}

impl TrainLogRecord {
    fn new(iter: usize, b: &LossBreakdown, same_pairs: usize) -> Self {
        Self {
            iter,
            rec: b.rec,
            psu: b.psu,
            scx: b.scx,
            ccx: b.ccx,
            cls: b.cls,
            id: b.id,
            textimage: b.textimage,
            total: b.total,
            same_pairs,
        }
    }

    pub fn components(&self) -> LossComponents {
        LossComponents {
            rec: self.rec,
            psu: self.psu,
            scx: self.scx,
            ccx: self.ccx,
            cls: self.cls,
            id: self.id,
            textimage: self.textimage,
        }
    }
}

/// Run-level facts recorded next to the log; no paths or clocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub config_hash: String,
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub domain_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub iter: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Receives `train_meta.json`, `train_log.jsonl`, `eval.jsonl`,
    /// `checkpoint_NNNNNN.ckpt`, `generator.ckpt` and `collapse.json`.
    pub out_dir: Option<PathBuf>,
    /// Benchmark snapshot at every `eval_interval`.
    pub evaluate: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: StyleModel,
    pub log: Vec<TrainLogRecord>,
    pub snapshots: Vec<EvalSnapshot>,
    /// Present when at least two snapshots were taken.
    pub collapse: Option<CollapseRecord>,
}

struct Optimisers {
    generator: Adam,
    classifier: Adam,
}

fn constant_rows<'t>(tape: &'t Tape<f32>, items: &[&Encoded], f: impl Fn(&Encoded) -> &ndarray::Array1<f32>) -> Var<'t, f32> {
    tape.constant(stack_codes(items.iter().map(|e| f(e))))
}

/// One optimisation step on `batch`; returns the logged breakdown.
fn train_step(
    model: &mut StyleModel,
    corpus: &Corpus,
    cache: &[Encoded],
    batch: &PairBatch,
    iter: usize,
    opt: &mut Optimisers,
) -> Result<TrainLogRecord> {
    let cfg = model.config.clone();
    let joint = cfg.joint_training;
    let contents: Vec<&Encoded> = batch.items.iter().map(|i| &cache[i.content.record]).collect();
    let styles: Vec<&Encoded> = batch.items.iter().map(|i| &cache[i.style.record]).collect();
    let style_domains: Vec<usize> = batch.items.iter().map(|i| i.style.domain_id).collect();

    let (breakdown, gen_grads, cls_grads) = {
        let tape = Tape::<f32>::new();
        let b = model.bind(&tape, true, joint);
        let m = &*model;
        let con = tape.constant(stack_rows(contents.iter().map(|e| &e.content)));
        let z_div = constant_rows(&tape, &styles, |e| &e.z_div);
        let style_x = joint.then(|| tape.constant(stack_dyn(&batch.style_images(&corpus.images))));
        let (z_ds, psu_ref, cls) = match style_x {
            Some(x) => {
                let (_, logits) = m.classifier.forward(&b.classifier, x)?;
                (m.ds_code_var(&b, x)?, m.psu_embedding_var(&b, x)?, Some(cls_var(logits, &style_domains)?))
            }
            None => (constant_rows(&tape, &styles, |e| &e.z_ds), constant_rows(&tape, &styles, |e| &e.psu), None),
        };
        let out = m.generator.forward(&b.generator, con, z_ds, z_div)?;

        let content_x = tape.constant(stack_dyn(&batch.content_images(&corpus.images)));
        let rec = rec_var(out, content_x, &batch.same_flags());
        let psu = psu_var(m.psu_embedding_var(&b, out)?, psu_ref)?;
        let gen_taps = m.cx_taps_var(&b, out)?;
        let tap_consts = |src: &[&Encoded]| -> Vec<Var<'_, f32>> {
            (0..cfg.cx_taps.len())
                .map(|t| tape.constant(stack_rows(src.iter().map(|e| &e.cx[t]))))
                .collect()
        };
        let mut cx_cfg = cfg.contextual();
        cx_cfg.seed = cfg.seed ^ ((iter as u64) << 40);
        let scx = contextual_loss_var(&gen_taps, &tap_consts(&styles), &cx_cfg)?;
        let ccx = contextual_loss_var(&gen_taps, &tap_consts(&contents), &cx_cfg)?;
        let id = if cfg.lambda_id > 0.0 {
            let refs: Vec<&ndarray::Array1<f32>> = styles
                .iter()
                .map(|e| e.identity.as_ref().ok_or(Error::NoBackendRegistered("identity")))
                .collect::<Result<_>>()?;
            Some(psu_var(m.identity.embed_var(out)?, tape.constant(stack_codes(refs.into_iter())))?)
        } else {
            None
        };
        let textimage = if cfg.lambda_textimage > 0.0 {
            let prompts = style_domains.iter().map(|&d| m.prompt_embedding(d)).collect::<Result<Vec<_>>>()?;
            let emb = m.textimage.embed_image_var(out, Some((&m.classifier, &b.classifier)))?;
            Some(psu_var(emb, tape.constant(stack_codes(prompts.iter())))?)
        } else {
            None
        };

        let val = |v: Option<Var<'_, f32>>| v.map_or(0.0, |v| v.item() as f64);
        let comps = LossComponents {
            rec: rec.item() as f64,
            psu: psu.item() as f64,
            scx: scx.item() as f64,
            ccx: ccx.item() as f64,
            cls: val(cls),
            id: val(id),
            textimage: val(textimage),
        };
        let w = cfg.weights();
        let breakdown = total_loss(&comps, &w).map_err(|e| match e {
            Error::NonFiniteComponent(component) => Error::NonFiniteLoss { iteration: iter, component },
            other => other,
        })?;
        let mut obj = rec
            .scale(w.lambda_rec)
            .add(psu.scale(w.lambda_psu))
            .add(scx.scale(w.lambda_scx))
            .add(ccx.scale(w.lambda_ccx));
        if let Some(v) = id {
            obj = obj.add(v.scale(w.lambda_id));
        }
        if let Some(v) = textimage {
            obj = obj.add(v.scale(w.lambda_textimage));
        }
        if let Some(v) = cls {
            obj = obj.add(v);
        }
        let g = tape.backward(obj);
        (breakdown, b.generator.grads(&g), joint.then(|| b.classifier.grads(&g)))
    };
    opt.generator.step(&mut model.generator.params, &gen_grads);
    if let Some(g) = cls_grads {
        opt.classifier.step(&mut model.classifier.params, &g);
    }
    Ok(TrainLogRecord::new(iter, &breakdown, batch.same_flags().iter().filter(|&&s| s).count()))
}

struct RunFiles {
    dir: PathBuf,
    log: BufWriter<File>,
    eval: BufWriter<File>,
}

impl RunFiles {
    fn open(dir: &Path, meta: &TrainMeta) -> Result<Self> {
        write_json(&dir.join("train_meta.json"), meta)?;
        Ok(Self { dir: dir.to_path_buf(), log: create(&dir.join("train_log.jsonl"))?, eval: create(&dir.join("eval.jsonl"))? })
    }

    fn flush(&mut self) -> Result<()> {
        let dir = self.dir.display().to_string();
        self.log
            .flush()
            .and_then(|_| self.eval.flush())
            .map_err(|e| Error::CheckpointIoFailure(format!("{dir}: {e}")))
    }
}

/// Optimises the generator of `model` on the train split of `corpus`. The
/// encoders, adapters and (unless `joint_training`) the classifier stay
/// frozen, so their encodings of every record are computed once up front.
pub fn train_model(mut model: StyleModel, corpus: &Corpus, opts: &TrainOptions) -> Result<TrainOutcome> {
    let cfg = model.config.clone();
    cfg.validate()?;
    if domain_names(corpus) != model.domain_names {
        return Err(Error::InvalidConfig("corpus domains differ from the model's".into()));
    }
    let meta = TrainMeta {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        iterations: cfg.iterations,
        batch_size: cfg.batch_size,
        weights: cfg.weights(),
        domain_names: model.domain_names.clone(),
    };
    let mut files = opts.out_dir.as_deref().map(|d| RunFiles::open(d, &meta)).transpose()?;

    let cache = model.encode(&corpus.images.iter().collect::<Vec<_>>())?;
    let mut sampler = PairSampler::new(&corpus.records, cfg.p_same, cfg.seed)?;
    let mut opt = Optimisers {
        generator: Adam::new(cfg.lr, cfg.beta1, cfg.beta2),
        classifier: Adam::new(cfg.lr, cfg.beta1, cfg.beta2),
    };
    let eval_opts = opts.evaluate.then(|| {
        let mut o = EvalOptions::from_config(&cfg, cfg.eval_contents_per_domain);
        o.niqe = pristine_niqe(corpus, cfg.niqe_domain, cfg.niqe_patch, cfg.niqe_sharpness_quantile).ok();
        o
    });

    let mut log = Vec::with_capacity(cfg.iterations);
    let mut snapshots = Vec::new();
    for it in 1..=cfg.iterations {
        let batch = sampler.next_batch(cfg.batch_size)?;
        let rec = train_step(&mut model, corpus, &cache, &batch, it, &mut opt)?;
        if let Some(f) = files.as_mut() {
            jsonl_line(&mut f.log, &f.dir.join("train_log.jsonl"), &rec)?;
        }
        log.push(rec);
        if it % cfg.eval_interval == 0 {
            if let Some(eo) = &eval_opts {
                let snap = EvalSnapshot { iter: it, report: evaluate_model(&model, corpus, eo)? };
                if let Some(f) = files.as_mut() {
                    jsonl_line(&mut f.eval, &f.dir.join("eval.jsonl"), &snap)?;
                }
                snapshots.push(snap);
            }
            if let Some(f) = files.as_mut() {
                f.flush()?;
                Checkpoint::from_model(&model, it as u64).save(&f.dir.join(format!("checkpoint_{it:06}.ckpt")))?;
            }
        }
    }
    let collapse = if snapshots.len() >= 2 {
        let pairs: Vec<(usize, EvalReport)> = snapshots.iter().map(|s| (s.iter, s.report.clone())).collect();
        Some(monitor_collapse(&pairs, cfg.collapse_tolerance)?)
    } else {
        None
    };
    if let Some(f) = files.as_mut() {
        f.flush()?;
        Checkpoint::from_model(&model, cfg.iterations as u64).save(&f.dir.join("generator.ckpt"))?;
        if let Some(c) = &collapse {
            write_json(&f.dir.join("collapse.json"), c)?;
        }
    }
    Ok(TrainOutcome { model, log, snapshots, collapse })
}

/// Generator phase from a manifest and a classifier checkpoint.
pub fn train_generator(
    manifest: &Path,
    config: &TrainConfig,
    classifier_ckpt: &Path,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    let corpus = Corpus::load(manifest, config.output_size)?;
    let ck = Checkpoint::load(classifier_ckpt)?;
    let names = domain_names(&corpus);
    if ck.domain_names != names {
        return Err(Error::InvalidConfig("classifier checkpoint was trained on different domains".into()));
    }
    let want = config.classifier_config(names.len());
    let have = ck.config.classifier_config(names.len());
    if want != have {
        return Err(Error::ConfigHashMismatch { expected: config.hash(), found: ck.config.hash() });
    }
    let model = StyleModel::new(config.clone(), names, ck.classifier_encoder()?)?;
    train_model(model, &corpus, opts)
}

// ---------------------------------------------------------------------------
// Collapse monitor

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseFlag {
    pub domain: String,
    /// Iteration of the later of the two compared snapshots.
    pub milestone: usize,
    /// `fid` or `kid_x100`.
    pub metric: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainCurve {
    pub domain: String,
    pub fid: Vec<f64>,
    pub kid_x100: Vec<f64>,
    /// Logged only.
    pub niqe: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseRecord {
    /// Strictly increasing.
    pub iterations: Vec<usize>,
    pub curves: Vec<DomainCurve>,
    pub flags: Vec<CollapseFlag>,
}

/// Flags a domain's FID or KID when it rises above `prev + tolerance * |prev|`
/// between consecutive snapshots.
pub fn monitor_collapse(snapshots: &[(usize, EvalReport)], tolerance: f64) -> Result<CollapseRecord> {
    if snapshots.len() < 2 {
        return Err(Error::TooFewSnapshots(snapshots.len()));
    }
    if snapshots.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::NonIncreasingSnapshots);
    }
    if !(tolerance >= 0.0) {
        return Err(Error::InvalidConfig(format!("collapse tolerance {tolerance} is negative")));
    }
    let mut curves: Vec<DomainCurve> = snapshots[0]
        .1
        .rows
        .iter()
        .map(|r| DomainCurve { domain: r.domain.clone(), fid: vec![], kid_x100: vec![], niqe: vec![] })
        .collect();
    for (iter, report) in snapshots {
        if report.rows.len() != curves.len() {
            return Err(Error::InvalidConfig(format!("snapshot at {iter} has {} domains", report.rows.len())));
        }
        for c in curves.iter_mut() {
            let row = report
                .rows
                .iter()
                .find(|r| r.domain == c.domain)
                .ok_or_else(|| Error::InvalidConfig(format!("snapshot at {iter} lacks domain `{}`", c.domain)))?;
            c.fid.push(row.fid);
            c.kid_x100.push(row.kid_x100);
            c.niqe.push(row.niqe);
        }
    }
    let mut flags = Vec::new();
    for k in 1..snapshots.len() {
        for c in &curves {
            for (metric, series) in [("fid", &c.fid), ("kid_x100", &c.kid_x100)] {
                let (prev, cur) = (series[k - 1], series[k]);
                if cur > prev + tolerance * prev.abs() {
                    flags.push(CollapseFlag { domain: c.domain.clone(), milestone: snapshots[k].0, metric: metric.into() });
                }
            }
        }
    }
    Ok(CollapseRecord { iterations: snapshots.iter().map(|s| s.0).collect(), curves, flags })
}

// ---------------------------------------------------------------------------
// Ablations

pub const ABLATION_VARIANTS: [&str; 15] = [
    "full",
    "vgg_arc2",
    "arc1_lightcnn",
    "arc1_arc2",
    "arc1",
    "with_textimage",
    "only_vgg",
    "only_lightcnn",
    "only_textimage",
    "con16",
    "con32",
    "con64",
    "ccx_weight(w)",
    "no_div",
    "no_ds",
];

/// `base` with the switches of a named variant. Identity-like sources stand
/// in for the face-recognition backbones; `conK` places the content tap so
/// that a 256px input yields a `K x K` content feature.
pub fn make_ablation_config(base: &TrainConfig, variant: &str) -> Result<TrainConfig> {
    let mut c = base.clone();
    let v = variant.trim();
    let weight = v
        .strip_prefix("ccx_weight(")
        .and_then(|r| r.strip_suffix(')'))
        .or_else(|| v.strip_prefix("ccx_weight="));
    if let Some(w) = weight {
        c.lambda_ccx = w.trim().parse().map_err(|_| Error::UnknownVariant(variant.to_string()))?;
        c.validate()?;
        return Ok(c);
    }
    match v {
        "full" | "base" => {}
        "vgg_arc2" => c.style = StyleSource::IdentityLike,
        "arc1_lightcnn" => c.texture = TextureSource::IdentityLike,
        "arc1_arc2" => {
            c.texture = TextureSource::IdentityLike;
            c.style = StyleSource::IdentityLike;
        }
        "arc1" => {
            c.texture = TextureSource::IdentityLike;
            c.use_ds = false;
            c.psu_embedding = PsuEmbedding::Texture;
        }
        "with_textimage" => c.lambda_textimage = 1.0,
        "only_vgg" => {
            c.use_ds = false;
            c.psu_embedding = PsuEmbedding::Texture;
        }
        "only_lightcnn" => c.use_div = false,
        "only_textimage" => {
            c.style = StyleSource::TextimageLike;
            c.use_div = false;
            c.lambda_textimage = 1.0;
        }
        "con16" | "con32" | "con64" => {
            let k: usize = v[3..].parse().expect("matched literal");
            c.content_tap = c.texture_config().tap_for_stride(256 / k)?;
        }
        "no_div" => c.use_div = false,
        "no_ds" => c.use_ds = false,
        _ => return Err(Error::UnknownVariant(variant.to_string())),
    }
    c.validate()?;
    Ok(c)
}
