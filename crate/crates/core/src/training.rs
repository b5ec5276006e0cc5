//! Adam, the step schedule, the training loop and crop-wise evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{config_hash, cst_forward, cst_infer, save_checkpoint, CstConfig};
use crate::error::{CstError, Result};
use crate::graph::Graph;
use crate::hsi::{save_cube, HsiCube, PatchPair};
use crate::losses::{loss_on_tape, LossBreakdown, LossWeights};
use crate::metrics::{evaluate_all, psnr, sam_metric, MetricOptions, MetricReport};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    /// Epochs at which the learning rate halves, ascending.
    pub halve_at: Vec<usize>,
    pub weights: LossWeights,
    pub seed: u64,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    /// Rescale the gradient to at most this global L2 norm, if set.
    pub grad_clip: Option<f64>,
    /// Random flips and transposes of training pairs.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch: 32,
            lr0: 1e-4,
            halve_at: vec![100, 200, 300],
            weights: LossWeights::default(),
            seed: 0,
            max_steps: None,
            grad_clip: None,
            augment: false,
        }
    }
}

impl TrainConfig {
    /// Short schedule for synthetic desk-scale runs.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 70,
            batch: 4,
            lr0: 1.5e-3,
            halve_at: vec![40, 55],
            max_steps: Some(200),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || !(self.lr0 > 0.0) {
            return Err(CstError::Config("epochs, batch and lr0 must be positive".into()));
        }
        if self.halve_at.windows(2).any(|w| w[0] > w[1]) {
            return Err(CstError::Config("halve_at must be ascending".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(CstError::Config("grad_clip must be positive".into()));
            }
        }
        self.weights.validate()
    }
}

/// `lr0 * 2^-k` with `k` the number of thresholds `<= epoch`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = cfg.halve_at.iter().filter(|&&t| t <= epoch).count();
    cfg.lr0 * 0.5f64.powi(k as i32)
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update from the gradients held in `store`.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    for (name, p) in store.iter() {
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(CstError::Numeric(format!(
                "non-finite gradient in parameter '{}'",
                name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (_, p)) in store.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.value.len() {
            let g = p.grad[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p.value[j] -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

fn clip_gradients(store: &mut ParamStore, max_norm: f64) {
    let norm = store
        .iter()
        .flat_map(|(_, p)| p.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        for (_, p) in store.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= f);
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub val_psnr: f64,
    pub val_sam: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch\tlr\tl1\tsam\tgrad\ttotal\tval_psnr\tval_sam";

    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:e}\t{:.8}\t{:.8}\t{:.8}\t{:.8}\t{:.6}\t{:.6}",
            self.epoch,
            self.lr,
            self.loss.l1,
            self.loss.sam,
            self.loss.grad,
            self.loss.total,
            self.val_psnr,
            self.val_sam
        )
    }
}

pub struct TrainOutcome {
    pub last: ParamStore,
    pub best: ParamStore,
    pub best_val_psnr: f64,
    pub epochs: Vec<EpochLog>,
    /// Total loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn log_text(&self) -> String {
        let mut s = String::from(EpochLog::HEADER);
        s.push('\n');
        for e in &self.epochs {
            let _ = writeln!(s, "{}", e.tsv());
        }
        s
    }
}

/// Where [`train`] writes its files.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("train.log")
    }
}

struct Sample {
    lr: Tensor,
    hr: Tensor,
}

/// Applies one of the 8 dihedral transforms to an `[H, W, C]` tensor.
fn dihedral(t: &Tensor, code: u8) -> Tensor {
    let s = t.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let transpose = code & 4 != 0;
    let (oh, ow) = if transpose { (w, h) } else { (h, w) };
    let mut out = Vec::with_capacity(t.len());
    for y in 0..oh {
        for x in 0..ow {
            let (mut sy, mut sx) = if transpose { (x, y) } else { (y, x) };
            if code & 1 != 0 {
                sy = h - 1 - sy;
            }
            if code & 2 != 0 {
                sx = w - 1 - sx;
            }
            let base = (sy * w + sx) * c;
            out.extend_from_slice(&t.data()[base..base + c]);
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

fn mean_val(store: &ParamStore, cfg: &CstConfig, set: &[Sample]) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for smp in set {
        let sr = cst_infer(store, cfg, &smp.lr)?;
        p += psnr(&sr, &smp.hr, 1.0)?;
        s += sam_metric(&sr, &smp.hr)?;
    }
    Ok((p / set.len() as f64, s / set.len() as f64))
}

fn samples(pairs: &[PatchPair]) -> Vec<Sample> {
    pairs
        .iter()
        .map(|p| Sample {
            lr: p.lr.to_tensor(),
            hr: p.hr.to_tensor(),
        })
        .collect()
}

/// Trains from `init` on `train`, selecting the best parameters by mean PSNR on `val`
/// (by training loss when `val` is empty). With `out`, writes `train.log`,
/// `last.ckpt` after every epoch and `best.ckpt` on improvement.
pub fn train(
    cfg: &CstConfig,
    tcfg: &TrainConfig,
    init: ParamStore,
    train: &[PatchPair],
    val: &[PatchPair],
    out: Option<&TrainOutputs>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    if train.is_empty() {
        return Err(CstError::Config("training set is empty".into()));
    }
    if let Some(p) = train.iter().chain(val).find(|p| p.lr.bands() != cfg.bands) {
        return Err(CstError::DimMismatch(format!(
            "patch has {} bands, model expects {}",
            p.lr.bands(),
            cfg.bands
        )));
    }
    if let Some(o) = out {
        fs::create_dir_all(&o.dir).map_err(|e| CstError::io(&o.dir, e))?;
    }
    let train_set = samples(train);
    let val_set = samples(val);
    let mut store = init;
    let mut adam = AdamState::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut best = store.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_val_psnr = f64::NAN;
    let mut epochs = Vec::new();
    let mut step_losses = Vec::new();
    let mut log = String::from(EpochLog::HEADER);
    log.push('\n');
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut done = false;
    for epoch in 0..tcfg.epochs {
        let lr = lr_schedule(epoch, tcfg);
        order.shuffle(&mut rng);
        let mut breakdowns = Vec::new();
        for chunk in order.chunks(tcfg.batch) {
            if tcfg.max_steps.is_some_and(|m| step_losses.len() >= m) {
                done = true;
                break;
            }
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let mut total = None;
            let mut parts = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let smp = &train_set[i];
                let (lr_t, hr_t) = if tcfg.augment {
                    let code: u8 = rng.random_range(0..8);
                    (dihedral(&smp.lr, code), dihedral(&smp.hr, code))
                } else {
                    (smp.lr.clone(), smp.hr.clone())
                };
                let sr = cst_forward(&mut g, &bound, cfg, &lr_t)?;
                let (l, b) = loss_on_tape(&mut g, sr, &hr_t, &tcfg.weights)?;
                parts.push(b);
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l),
                });
            }
            let total = g.scale(total.expect("non-empty batch"), 1.0 / chunk.len() as f64);
            let value = g.value(total).data()[0];
            if !value.is_finite() {
                return Err(CstError::Numeric(format!("non-finite loss at epoch {}", epoch)));
            }
            let grads = g.backward(total);
            store.store_grads(&grads, &bound);
            if let Some(c) = tcfg.grad_clip {
                clip_gradients(&mut store, c);
            }
            adam_step(&mut store, &mut adam, lr)?;
            step_losses.push(value);
            breakdowns.extend(parts);
        }
        if breakdowns.is_empty() {
            break;
        }
        let loss = LossBreakdown::mean(&breakdowns);
        let (val_psnr, val_sam) = mean_val(&store, cfg, &val_set)?;
        let entry = EpochLog {
            epoch,
            lr,
            loss,
            val_psnr,
            val_sam,
        };
        info!("{}", entry.tsv());
        let _ = writeln!(log, "{}", entry.tsv());
        let score = if val_set.is_empty() { -loss.total } else { val_psnr };
        if score > best_score {
            best_score = score;
            best_val_psnr = val_psnr;
            best = store.clone();
            best.zero_grads();
            if let Some(o) = out {
                save_checkpoint(o.best(), cfg, &best)?;
            }
        }
        if let Some(o) = out {
            save_checkpoint(o.last(), cfg, &store)?;
            fs::write(o.log(), &log).map_err(|e| CstError::io(o.log(), e))?;
        }
        epochs.push(entry);
        if done {
            break;
        }
    }
    if let Some(o) = out {
        save_checkpoint(o.last(), cfg, &store)?;
        fs::write(o.log(), &log).map_err(|e| CstError::io(o.log(), e))?;
    }
    Ok(TrainOutcome {
        last: store,
        best,
        best_val_psnr,
        epochs,
        step_losses,
    })
}

/// Per-crop reports and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub reports: Vec<MetricReport>,
    pub mean: MetricReport,
}

impl Evaluation {
    /// One row per crop in test order, then the mean row.
    pub fn csv(&self) -> String {
        let mut s = format!("{}\n", MetricReport::csv_header());
        for r in &self.reports {
            let _ = writeln!(s, "{}", r.csv_row());
        }
        let _ = writeln!(s, "{}", self.mean.csv_row());
        s
    }
}

fn reports_mean(reports: Vec<MetricReport>) -> Result<Evaluation> {
    let mean = MetricReport::mean(&reports).ok_or_else(|| CstError::Config("no crops to evaluate".into()))?;
    Ok(Evaluation { reports, mean })
}

/// Per-pixel mean absolute error over bands, as a single-band cube.
pub fn error_map(sr: &Tensor, hr: &Tensor) -> Result<HsiCube> {
    if sr.shape() != hr.shape() {
        return Err(CstError::DimMismatch(format!("{:?} vs {:?}", sr.shape(), hr.shape())));
    }
    let s = sr.shape();
    let (h, w, b) = (s[0], s[1], s[2]);
    Ok(HsiCube::from_fn(h, w, 1, |_, y, x| {
        let p = (y * w + x) * b;
        let e: f64 = (0..b).map(|k| (sr.data()[p + k] - hr.data()[p + k]).abs()).sum();
        (e / b as f64) as f32
    }))
}

/// Mean absolute difference per band.
pub fn spectral_difference(sr: &Tensor, hr: &Tensor) -> Vec<f64> {
    let b = *sr.shape().last().unwrap();
    let n = (sr.len() / b) as f64;
    let mut out = vec![0.0; b];
    for (i, (a, t)) in sr.data().iter().zip(hr.data()).enumerate() {
        out[i % b] += (a - t).abs() / n;
    }
    out
}

/// Scores the model on every test crop. With `emit`, writes `sr_<i>.hsc`,
/// `err_<i>.hsc` and `spec_<i>.csv` for each crop into that directory.
pub fn evaluate(
    store: &ParamStore,
    cfg: &CstConfig,
    test: &[PatchPair],
    opts: &MetricOptions,
    emit: Option<&Path>,
) -> Result<Evaluation> {
    if let Some(dir) = emit {
        fs::create_dir_all(dir).map_err(|e| CstError::io(dir, e))?;
    }
    let hash = config_hash(cfg);
    let mut reports = Vec::with_capacity(test.len());
    for (i, pair) in test.iter().enumerate() {
        if pair.lr.bands() != cfg.bands {
            return Err(CstError::DimMismatch(format!(
                "crop {} has {} bands, model expects {}",
                i,
                pair.lr.bands(),
                cfg.bands
            )));
        }
        let hr = pair.hr.to_tensor();
        let sr = cst_infer(store, cfg, &pair.lr.to_tensor())?;
        // score what a saved cube would hold
        let sr = HsiCube::from_tensor(&sr)?.to_tensor();
        let mut r = evaluate_all(&sr, &hr, cfg.scale, opts)?;
        r.config_hash = hash.clone();
        if let Some(dir) = emit {
            save_cube(&HsiCube::from_tensor(&sr)?, dir.join(format!("sr_{}.hsc", i)))?;
            save_cube(&error_map(&sr, &hr)?, dir.join(format!("err_{}.hsc", i)))?;
            let mut csv = String::from("band,mean_abs_diff\n");
            for (b, d) in spectral_difference(&sr, &hr).iter().enumerate() {
                let _ = writeln!(csv, "{},{:.8}", b, d);
            }
            let p = dir.join(format!("spec_{}.csv", i));
            fs::write(&p, csv).map_err(|e| CstError::io(&p, e))?;
        }
        reports.push(r);
    }
    reports_mean(reports)
}

/// Scores plain bicubic upsampling of each crop's LR input.
pub fn evaluate_bicubic(test: &[PatchPair], scale: usize, opts: &MetricOptions) -> Result<Evaluation> {
    let reports = test
        .iter()
        .map(|pair| {
            let up = crate::hsi::bicubic_resize(&pair.lr, pair.hr.height(), pair.hr.width())?;
            let mut r = evaluate_all(&up.to_tensor(), &pair.hr.to_tensor(), scale, opts)?;
            r.config_hash = "bicubic".into();
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    reports_mean(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamSpec};

    #[test]
    fn schedule_values() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0, &c), 1e-4);
        assert_eq!(lr_schedule(150, &c), 5e-5);
        assert_eq!(lr_schedule(450, &c), 1.25e-5);
        let mut last = f64::INFINITY;
        for e in 0..500 {
            let lr = lr_schedule(e, &c);
            assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    fn adam_scalar_recurrence() {
        let mut s = ParamStore::from_specs(&[ParamSpec::new("t", &[1], Init::Zeros)], 0).unwrap();
        s.value_mut("t")[0] = 1.0;
        let mut st = AdamState::new(&s);
        let (g, lr) = (0.3, 0.01);
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=20 {
            s.get_mut("t").unwrap().grad[0] = g;
            adam_step(&mut s, &mut st, lr).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            th -= lr * mh / (vh.sqrt() + 1e-8);
            assert!((s.value("t")[0] - th).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop_and_nan_named() {
        let mut s = ParamStore::from_specs(&[ParamSpec::new("w", &[3], Init::Ones)], 0).unwrap();
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 0.1).unwrap();
        assert_eq!(s.value("w"), &[1.0, 1.0, 1.0]);
        s.get_mut("w").unwrap().grad[1] = f64::NAN;
        let e = adam_step(&mut s, &mut st, 0.1).unwrap_err();
        assert!(e.is_numeric() && e.to_string().contains("'w'"));
    }

    #[test]
    fn dihedral_group() {
        let t = Tensor::from_fn(&[2, 3, 2], |i| i as f64);
        for code in 0..8u8 {
            let d = dihedral(&t, code);
            let mut vals: Vec<i64> = d.data().iter().map(|v| *v as i64).collect();
            vals.sort();
            assert_eq!(vals, (0..12).collect::<Vec<_>>());
        }
        assert_eq!(dihedral(&t, 0), t);
        assert_eq!(dihedral(&dihedral(&t, 1), 1), t);
    }
}
