//! Training loop, validation, checkpointing and evaluation.

use std::fs::File;
use std::path::{Path, PathBuf};

use nfs_gradcore::{clip_global_norm, grad_check_report, Checkpoint, Coverage, GradError, RAdamState, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, PairedRecord, Split, TrainItem};
use crate::dsp::{AudioBuffer, StftParams};
use crate::error::{NfsError, Result};
use crate::losses::{self, EvalMetrics, LossBreakdown, LossConfig};
use crate::model::{mix_seed, Ablation, NfsConfig, NfsModel, RenderOptions};

/// Consecutive non-finite steps tolerated before training stops.
const MAX_NONFINITE: usize = 3;
/// Evaluation renders and scores long records in segments of this many seconds.
const EVAL_SEGMENT_SECONDS: f64 = 10.0;
/// Samples in the gradient-check item.
const TINY_CHECK_LEN: usize = 320;
/// Validation crops taken per record.
const VAL_CROPS_PER_RECORD: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub lr_decay: f64,
    pub crop_ms: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Overrides the steps-per-epoch derived from the data duration.
    pub steps_per_epoch: Option<usize>,
    /// Stops after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    /// Checkpoint cadence in steps; `0` keeps only the last and best.
    pub checkpoint_every: usize,
    /// Validate every half epoch and keep the best model.
    pub validate: bool,
    /// Fraction of utterances held out when no validation split is given.
    pub val_fraction: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 16,
            batch: 6,
            lr0: 1e-3,
            lr_decay: 0.9,
            crop_ms: 800.0,
            clip_norm: 10.0,
            seed: 0,
            steps_per_epoch: None,
            max_steps: None,
            checkpoint_every: 0,
            validate: true,
            val_fraction: 0.1,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Learning rate at the start of `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }

    pub fn crop_len(&self, sample_rate: u32) -> usize {
        (self.crop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    /// `ceil(seconds / (batch * crop))` unless overridden.
    pub fn steps_per_epoch_for(&self, seconds: f64) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| (seconds / (self.batch as f64 * self.crop_ms / 1000.0)).ceil() as usize)
            .max(1)
    }

    pub fn validate_config(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(NfsError::Config("epochs and batch must be positive".into()));
        }
        if !(self.lr0 > 0.0) || !(self.lr_decay > 0.0) || !(self.crop_ms > 0.0) || !(self.clip_norm > 0.0) {
            return Err(NfsError::Config("lr0, lr_decay, crop_ms and clip_norm must be positive".into()));
        }
        self.loss.validate()
    }
}

/// One row of the step log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub skipped: bool,
    pub loss: LossBreakdown,
}

impl StepLog {
    pub const HEADER: [&'static str; 10] =
        ["step", "epoch", "lr", "grad_norm", "skipped", "l2", "phase", "iid", "stft", "total"];

    fn record(&self) -> Vec<String> {
        let mut r = vec![
            self.step.to_string(),
            self.epoch.to_string(),
            self.lr.to_string(),
            self.grad_norm.to_string(),
            self.skipped.to_string(),
        ];
        r.extend(loss_fields(&self.loss));
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValLog {
    pub step: usize,
    pub loss: LossBreakdown,
}

impl ValLog {
    pub const HEADER: [&'static str; 6] = ["step", "l2", "phase", "iid", "stft", "total"];

    fn record(&self) -> Vec<String> {
        let mut r = vec![self.step.to_string()];
        r.extend(loss_fields(&self.loss));
        r
    }
}

fn loss_fields(l: &LossBreakdown) -> [String; 5] {
    [l.l2, l.phase, l.iid, l.stft, l.total].map(|v| v.to_string())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub validations: Vec<ValLog>,
    /// Step and composite validation loss of the best model.
    pub best: Option<(usize, f64)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: NfsModel,
    /// Best model by validation loss, when validation ran.
    pub best: Option<NfsModel>,
    pub report: TrainReport,
}

/// Composite loss and averaged gradients over a set of items.
pub fn batch_gradients(
    model: &NfsModel,
    items: &[TrainItem],
    loss: &LossConfig,
    noise_seed: Option<u64>,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let params = model.params();
    let mut grads: Vec<Tensor> = params.values().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
    let mut mean = LossBreakdown::default();
    let scale = 1.0 / items.len() as f64;
    for (i, item) in items.iter().enumerate() {
        let mut t = Tape::new();
        let v = model.bind(&mut t, true);
        let seed = noise_seed.map(|s| mix_seed(&[s, i as u64]));
        let est = model.render_item(&mut t, &v, &item.mono, &item.cond, seed)?;
        let tl = losses::composite_tape(&mut t, est, &item.target, loss)?;
        let b = tl.breakdown(&t)?;
        mean.l2 += scale * b.l2;
        mean.phase += scale * b.phase;
        mean.iid += scale * b.iid;
        mean.stft += scale * b.stft;
        mean.total += scale * b.total;
        if !b.total.is_finite() {
            continue;
        }
        let mut g = t.backward(tl.total)?;
        for (acc, var) in grads.iter_mut().zip(&v) {
            if let Some(gv) = g.take(*var) {
                for (a, x) in acc.data_mut().iter_mut().zip(gv.data()) {
                    *a += scale * x;
                }
            }
        }
    }
    Ok((mean, grads))
}

/// Composite loss of the model on fixed items, without noise.
pub fn items_loss(model: &NfsModel, items: &[TrainItem], loss: &LossConfig) -> Result<LossBreakdown> {
    let mut mean = LossBreakdown::default();
    let scale = 1.0 / items.len().max(1) as f64;
    for item in items {
        let mut t = Tape::new();
        let v = model.bind(&mut t, false);
        let est = model.render_item(&mut t, &v, &item.mono, &item.cond, None)?;
        let b = losses::composite_tape(&mut t, est, &item.target, loss)?.breakdown(&t)?;
        mean.l2 += scale * b.l2;
        mean.phase += scale * b.phase;
        mean.iid += scale * b.iid;
        mean.stft += scale * b.stft;
        mean.total += scale * b.total;
    }
    Ok(mean)
}

/// Evenly spaced crops from each record.
pub fn fixed_crops(records: &[PairedRecord], indices: &[usize], crop: usize, model: &NfsModel) -> Result<Vec<TrainItem>> {
    let mut items = Vec::new();
    for &i in indices {
        let rec = &records[i];
        if rec.len() < crop {
            continue;
        }
        let span = rec.len() - crop;
        let n = VAL_CROPS_PER_RECORD.min(span / crop.max(1) + 1);
        for k in 0..n {
            let offset = if n == 1 { 0 } else { span * k / (n - 1) };
            items.push(data::crop_item(rec, i, offset, crop, model.config())?);
        }
    }
    Ok(items)
}

/// Finite-difference check of the composite-loss gradient, per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradCheck {
    pub max_rel_error: f64,
    /// Parameter name, worst entrywise relative error, and worst absolute
    /// error relative to the largest derivative in the tensor.
    pub groups: Vec<(String, f64, f64)>,
    /// Parameter name, flat index, analytic and numeric derivative of the worst entry.
    pub worst: (String, usize, f64, f64),
    pub entries_checked: usize,
}

/// Checks the end-to-end gradient of the composite loss on one item, with
/// noise injection drawn from `noise_seed`.
pub fn model_grad_check(
    model: &NfsModel,
    item: &TrainItem,
    loss: &LossConfig,
    noise_seed: Option<u64>,
    eps: f64,
    coverage: Coverage,
) -> Result<ModelGradCheck> {
    let f = |t: &mut Tape, v: &[Var]| -> nfs_gradcore::Result<Var> {
        let est = model.render_item(t, v, &item.mono, &item.cond, noise_seed).map_err(grad_err)?;
        Ok(losses::composite_tape(t, est, &item.target, loss).map_err(grad_err)?.total)
    };
    let report = grad_check_report(f, model.params().values(), eps, coverage)?;
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    let (leaf, idx) = report.worst;
    let worst = (names[leaf].clone(), idx, report.worst_values.0, report.worst_values.1);
    let groups = names
        .into_iter()
        .zip(report.per_leaf)
        .zip(report.per_leaf_scaled)
        .map(|((n, e), s)| (n, e, s))
        .collect();
    Ok(ModelGradCheck { max_rel_error: report.max_rel_error, groups, worst, entries_checked: report.entries_checked })
}

fn grad_err(e: NfsError) -> GradError {
    match e {
        NfsError::Grad(g) => g,
        other => GradError::Contract(other.to_string()),
    }
}

/// Tiny-config model, a short synthetic item and matching short-window
/// losses for gradient checking. The output biases start at zero so no
/// activation sits in saturation.
pub fn tiny_check_setup(seed: u64, ablation: Ablation) -> Result<(NfsModel, TrainItem, LossConfig)> {
    let cfg = NfsConfig { shifter_bias_init: 0.0, ni_init: -5.0, ablation, ..NfsConfig::tiny() };
    let model = NfsModel::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = data::SynthSpec::new(vec![data::SynthSource::fixed([0.6, -0.4, 0.1], 0.05)]);
    let recs = data::synth_dataset(&spec, &mut rng)?;
    let item = data::crop_item(&recs[0], 0, 800, TINY_CHECK_LEN, model.config())?;
    let loss = LossConfig {
        mrstft: vec![StftParams::new(64, 8, 32), StftParams::new(128, 16, 64), StftParams::new(256, 32, 128)],
        aux: StftParams::new(256, 64, 256),
        ..LossConfig::default()
    };
    loss.validate()?;
    Ok((model, item, loss))
}

/// Where training writes its log and checkpoints.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("log.csv")
    }

    pub fn val_path(&self) -> PathBuf {
        self.dir.join("val.csv")
    }

    pub fn last_path(&self) -> PathBuf {
        self.dir.join("last.nfs")
    }

    pub fn best_path(&self) -> PathBuf {
        self.dir.join("best.nfs")
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> NfsError + '_ {
    move |e| NfsError::ingestion(path, e.to_string())
}

/// Trains `model` on the train split of `records`.
///
/// Each step draws a batch of random crops, renders every item on its own
/// tape, averages gradients, clips them to `clip_norm` and applies RAdam. A
/// non-finite loss skips the step and halves the learning rate once; three in
/// a row abort training.
pub fn train(
    records: &[PairedRecord],
    mut model: NfsModel,
    cfg: &TrainConfig,
    out: Option<&TrainOutput>,
) -> Result<TrainOutcome> {
    cfg.validate_config()?;
    if records.is_empty() {
        return Err(NfsError::contract("no training records"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = records.to_vec();
    if cfg.validate && !records.iter().any(|r| r.split == Split::Validation) {
        data::split_by_utterance(&mut records, cfg.val_fraction, &mut rng);
    }
    let train_recs: Vec<PairedRecord> = records.iter().filter(|r| r.split == Split::Train).cloned().collect();
    if train_recs.is_empty() {
        return Err(NfsError::contract("no records in the train split"));
    }
    let crop = cfg.crop_len(model.config().sample_rate);
    let val_items = if cfg.validate {
        let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].split == Split::Validation).collect();
        if idx.is_empty() {
            // Single utterance: validate on fixed crops of the training data.
            idx = (0..records.len()).filter(|&i| records[i].split == Split::Train).collect();
        }
        fixed_crops(&records, &idx, crop, &model)?
    } else {
        Vec::new()
    };

    let seconds: f64 = train_recs.iter().map(PairedRecord::seconds).sum();
    let per_epoch = cfg.steps_per_epoch_for(seconds);
    let total_steps = cfg.max_steps.map_or(per_epoch * cfg.epochs, |m| m.min(per_epoch * cfg.epochs));
    let half = per_epoch.div_ceil(2);
    log::info!(
        "training {} params on {seconds:.1} s of audio: {per_epoch} steps/epoch, {total_steps} steps",
        model.params().numel()
    );

    let mut log_w = match out {
        Some(o) => {
            std::fs::create_dir_all(&o.dir)?;
            let p = o.log_path();
            let mut w = csv::Writer::from_writer(File::create(&p)?);
            w.write_record(StepLog::HEADER).map_err(csv_err(&p))?;
            Some((w, p))
        }
        None => None,
    };
    let mut val_w = match out {
        Some(o) if cfg.validate => {
            let p = o.val_path();
            let mut w = csv::Writer::from_writer(File::create(&p)?);
            w.write_record(ValLog::HEADER).map_err(csv_err(&p))?;
            Some((w, p))
        }
        _ => None,
    };

    let mut opt = RAdamState::new(model.params(), cfg.lr0);
    let mut report = TrainReport::default();
    let mut best: Option<NfsModel> = None;
    let mut lr_factor = 1.0;
    let mut nonfinite = 0;
    let noise = model.config().ablation.ni;

    for step in 0..total_steps {
        let epoch = step / per_epoch;
        let lr = cfg.lr_at(epoch) * lr_factor;
        let batch = data::sample_batch(&train_recs, &mut rng, cfg.batch, crop, model.config())?;
        let noise_seed = noise.then(|| mix_seed(&[cfg.seed, step as u64]));
        let (loss, mut grads) = batch_gradients(&model, &batch.items, &cfg.loss, noise_seed)?;
        let finite = loss.total.is_finite() && grads.iter().all(Tensor::all_finite);
        let mut row = StepLog { step, epoch, lr, grad_norm: f64::NAN, skipped: !finite, loss };
        if finite {
            nonfinite = 0;
            row.grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
            opt.lr = lr;
            opt.step(model.params_mut(), &grads)?;
        } else {
            nonfinite += 1;
            log::warn!("step {step}: non-finite loss, step skipped");
            if lr_factor == 1.0 {
                lr_factor = 0.5;
            }
            if nonfinite >= MAX_NONFINITE {
                return Err(NfsError::TrainingAborted(format!(
                    "{MAX_NONFINITE} consecutive non-finite losses at step {step}"
                )));
            }
        }
        log::debug!("step {step} lr {lr:.3e} loss {:.6} (l2 {:.3e})", loss.total, loss.l2);
        if let Some((w, p)) = log_w.as_mut() {
            w.write_record(row.record()).map_err(csv_err(p))?;
            w.flush()?;
        }
        report.steps.push(row);

        let done = step + 1;
        if let Some(o) = out {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                model.to_checkpoint().save(o.dir.join(format!("step{done:06}.nfs")))?;
            }
        }
        if cfg.validate && !val_items.is_empty() && (done % half == 0 || done == total_steps) {
            let v = items_loss(&model, &val_items, &cfg.loss)?;
            log::info!("step {done}: validation loss {:.6}", v.total);
            let entry = ValLog { step: done, loss: v };
            if let Some((w, p)) = val_w.as_mut() {
                w.write_record(entry.record()).map_err(csv_err(p))?;
                w.flush()?;
            }
            report.validations.push(entry);
            if v.total.is_finite() && report.best.is_none_or(|(_, b)| v.total < b) {
                report.best = Some((done, v.total));
                best = Some(model.clone());
                if let Some(o) = out {
                    model.to_checkpoint().save(o.best_path())?;
                }
            }
        }
    }
    if let Some(o) = out {
        model.to_checkpoint().save(o.last_path())?;
    }
    Ok(TrainOutcome { model, best, report })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NfsModel> {
    let path = path.as_ref();
    let ckpt = Checkpoint::load(path).map_err(|e| NfsError::ingestion(path, e.to_string()))?;
    NfsModel::from_checkpoint(&ckpt)
}

/// Renders a whole record without noise.
pub fn render_record(model: &NfsModel, rec: &PairedRecord) -> Result<AudioBuffer> {
    let cond = data::frame_conditions(&rec.track, model.config(), 0, rec.len())?;
    model.render(&rec.mono, &cond, RenderOptions { noise: false, seed: 0 })
}

/// Per-record and mean metrics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub records: Vec<(String, EvalMetrics)>,
    pub mean: EvalMetrics,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("record,{}\n", EvalMetrics::COLUMNS.join(","));
        for (id, m) in self.records.iter().map(|(i, m)| (i.as_str(), m)).chain([("mean", &self.mean)]) {
            let vals: Vec<String> = m.values().iter().map(|v| format!("{v:.6}")).collect();
            s.push_str(&format!("{id},{}\n", vals.join(",")));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<16}", "record");
        for c in EvalMetrics::COLUMNS {
            s.push_str(&format!("{c:>14}"));
        }
        s.push('\n');
        for (id, m) in self.records.iter().map(|(i, m)| (i.as_str(), m)).chain([("mean", &self.mean)]) {
            s.push_str(&format!("{id:<16}"));
            for v in m.values() {
                s.push_str(&format!("{v:>14.6}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Metrics of `est` against `target`, scored in segments of bounded length.
/// The waveform distance combines exactly across segments; the spectral
/// metrics are length-weighted means of per-segment values.
pub fn segmented_metrics(est: &AudioBuffer, target: &AudioBuffer, loss: &LossConfig) -> Result<EvalMetrics> {
    let seg = (EVAL_SEGMENT_SECONDS * target.sample_rate as f64) as usize;
    let len = target.len();
    if len <= seg {
        return losses::eval_metrics(est, target, loss);
    }
    let (mut l2sq, mut amp, mut phase, mut stft) = (0.0, 0.0, 0.0, 0.0);
    let mut start = 0;
    while start < len {
        let end = (start + seg).min(len);
        let cut = |b: &AudioBuffer| {
            AudioBuffer::stereo(b.channel(0)[start..end].to_vec(), b.channel(1)[start..end].to_vec(), b.sample_rate)
        };
        let m = losses::eval_metrics(&cut(est)?, &cut(target)?, loss)?;
        let w = (end - start) as f64 / len as f64;
        l2sq += (m.l2_e3 / 1e3).powi(2);
        amp += w * m.amp;
        phase += w * m.phase;
        stft += w * m.stft;
        start = end;
    }
    Ok(EvalMetrics { l2_e3: 1e3 * l2sq.sqrt(), amp, phase, stft })
}

/// Renders each record and scores it against its binaural reference.
pub fn evaluate(records: &[PairedRecord], model: &NfsModel, loss: &LossConfig) -> Result<EvalReport> {
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let est = render_record(model, rec)?;
        out.push((rec.id.clone(), segmented_metrics(&est, &rec.binaural, loss)?));
    }
    let mean = EvalMetrics::mean(&out.iter().map(|(_, m)| *m).collect::<Vec<_>>());
    Ok(EvalReport { records: out, mean })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_recipe() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-3);
        assert!((c.lr_at(1) - 9e-4).abs() < 1e-18);
        assert_eq!(c.crop_len(48_000), 38_400);
        assert_eq!(c.steps_per_epoch_for(60.0), 13);
    }
}
