//! Adam, the training loop and dataset evaluation.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_checkpoint;
use crate::data::ImagePair;
use crate::error::{Error, Result};
use crate::network::{ModelConfig, NaLSuper};
use crate::nn::ParamSet;
use crate::objectives::{mae, psnr, ssim_metric, total_loss, EvalReport, EvalRow, LossKind, SsimConstants};
use crate::tensor::{Real, Tape, Tensor};

pub const DEFAULT_LR: f64 = 1e-4;

/// Bias-corrected Adam moments, one buffer pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Real>(params: &ParamSet<T>, lr: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.numel()]).collect::<Vec<_>>();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.v[index]
    }
}

/// One Adam update: `p ← p − lr·m̂/(√v̂ + ε)`.
pub fn adam_step<T: Real>(params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>], state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::usage(format!(
            "optimizer expects {} gradients and moment buffers, got {} and {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        match g {
            None => return Err(Error::usage(format!("missing gradient for {}", p.name))),
            Some(g) if g.shape() != p.value.shape() => {
                return Err(Error::usage(format!(
                    "gradient for {} has shape {:?}, parameter is {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )))
            }
            Some(_) => {}
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let g = g.as_ref().expect("checked above");
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi.as_f64();
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let update = state.lr * (*mi / c1) / ((*vi / c2).sqrt() + state.eps);
            *w = T::lit(w.as_f64() - update);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub loss: LossKind,
    pub steps: usize,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    /// Written after the last step when set.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            loss: LossKind::L1Ssim,
            steps: 1500,
            seed: 0,
            lr: DEFAULT_LR,
            batch_size: 1,
            checkpoint: None,
        }
    }
}

/// Batch-mean losses of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub config: ModelConfig,
    pub options: TrainOptions,
    pub trace: Vec<TraceRow>,
    /// Dataset-mean total loss before the first step.
    pub initial_loss: f64,
    /// Dataset-mean total loss after the last step.
    pub final_loss: f64,
}

impl TrainRun {
    /// `step,total,l1,ssim` with a header row.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,total,l1,ssim\n");
        for r in &self.trace {
            let _ = writeln!(out, "{},{},{},{}", r.step, r.total, r.l1, r.ssim);
        }
        out
    }
}

/// Mean `(total, l1, ssim)` loss of `model` over `pairs`.
pub fn dataset_loss<T: Real>(model: &NaLSuper<T>, pairs: &[ImagePair], loss: LossKind) -> Result<(f64, f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::usage("dataset is empty"));
    }
    let k = SsimConstants::new(model.config().ssim_window);
    let mut acc = (0.0, 0.0, 0.0);
    for p in pairs {
        let mut tape = Tape::<T>::new();
        let b = model.params().bind(&mut tape, false);
        let x = tape.constant(p.low.cast());
        let g = tape.constant(p.gt.cast());
        let y = model.forward_on(&mut tape, &b, x)?;
        let t = total_loss(&mut tape, y, g, &k, loss)?;
        acc.0 += tape.value(t.total).item().as_f64();
        acc.1 += t.l1;
        acc.2 += t.ssim;
    }
    let n = pairs.len() as f64;
    Ok((acc.0 / n, acc.1 / n, acc.2 / n))
}

/// Optimises `model` on `pairs` with Adam.
///
/// Pairs are visited in a fresh seeded permutation every epoch; each step
/// averages the loss over `batch_size` consecutive pairs of that stream.
/// `on_step` sees every trace row as it is produced.
pub fn train<T: Real>(
    model: &mut NaLSuper<T>,
    pairs: &[ImagePair],
    options: &TrainOptions,
    mut on_step: impl FnMut(&TraceRow),
) -> Result<TrainRun> {
    if pairs.is_empty() {
        return Err(Error::usage("training needs at least one image pair"));
    }
    if options.batch_size == 0 {
        return Err(Error::usage("batch size must be positive"));
    }
    if !(options.lr.is_finite() && options.lr > 0.0) {
        return Err(Error::usage(format!("learning rate must be positive, got {}", options.lr)));
    }
    let k = SsimConstants::new(model.config().ssim_window);
    let initial_loss = dataset_loss(model, pairs, options.loss)?.0;
    let mut adam = AdamState::new(model.params(), options.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut trace = Vec::with_capacity(options.steps);
    let scale = T::lit(1.0 / options.batch_size as f64);

    for step in 0..options.steps {
        let mut tape = Tape::<T>::new();
        let b = model.params().bind(&mut tape, true);
        let mut terms = Vec::with_capacity(options.batch_size);
        let (mut l1, mut ls) = (0.0, 0.0);
        for _ in 0..options.batch_size {
            if order.is_empty() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let pair = &pairs[order.pop().expect("refilled above")];
            let x = tape.constant(pair.low.cast());
            let g = tape.constant(pair.gt.cast());
            let t = model
                .forward_on(&mut tape, &b, x)
                .and_then(|y| total_loss(&mut tape, y, g, &k, options.loss))
                .map_err(|e| match e {
                    Error::Numeric(_) => Error::NonFiniteLoss {
                        step,
                        total: f64::NAN,
                        l1: f64::NAN,
                        ssim: f64::NAN,
                    },
                    e => e,
                })?;
            terms.push(t.total);
            l1 += t.l1;
            ls += t.ssim;
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = tape.add(loss, t)?;
        }
        let loss = tape.scale(loss, scale);
        let n = options.batch_size as f64;
        let row = TraceRow {
            step,
            total: tape.value(loss).item().as_f64(),
            l1: l1 / n,
            ssim: ls / n,
        };
        if !(row.total.is_finite() && row.l1.is_finite() && row.ssim.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                total: row.total,
                l1: row.l1,
                ssim: row.ssim,
            });
        }
        tape.backward(loss)?;
        let grads: Vec<Option<Tensor<T>>> = b.vars().iter().map(|&v| tape.grad(v)).collect();
        drop(tape);
        adam_step(model.params_mut(), &grads, &mut adam)?;
        on_step(&row);
        trace.push(row);
    }

    let final_loss = dataset_loss(model, pairs, options.loss)?.0;
    if let Some(path) = &options.checkpoint {
        save_checkpoint(model, path)?;
    }
    Ok(TrainRun {
        config: model.config().clone(),
        options: options.clone(),
        trace,
        initial_loss,
        final_loss,
    })
}

fn eval_pair<T: Real>(model: &NaLSuper<T>, pair: &ImagePair, k: &SsimConstants) -> Result<EvalRow> {
    let out = model.forward(&pair.low.cast())?;
    let gt = pair.gt.cast::<T>();
    Ok(EvalRow {
        image: pair.id.clone(),
        psnr_db: psnr(&out, &gt)?,
        ssim: ssim_metric(&out, &gt, k)?,
        mae: mae(&out, &gt)?,
    })
}

/// Worker count for [`evaluate`]: `NALSUPER_THREADS` if set, else 1.
pub fn eval_threads() -> usize {
    std::env::var("NALSUPER_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

/// Enhances every low image and scores it against its reference. Rows keep
/// the dataset order whatever the thread count.
pub fn evaluate<T: Real>(model: &NaLSuper<T>, pairs: &[ImagePair], threads: usize) -> Result<EvalReport> {
    let k = SsimConstants::new(model.config().ssim_window);
    let threads = threads.clamp(1, pairs.len().max(1));
    let rows: Vec<EvalRow> = if threads == 1 {
        pairs.iter().map(|p| eval_pair(model, p, &k)).collect::<Result<_>>()?
    } else {
        let chunk = pairs.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = pairs
                .chunks(chunk)
                .map(|part| s.spawn(|| part.iter().map(|p| eval_pair(model, p, &k)).collect::<Result<Vec<_>>>()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?
        .into_iter()
        .flatten()
        .collect()
    };
    EvalReport::from_rows(rows)
}

/// Metrics of the unenhanced low images against their references.
pub fn baseline_report(pairs: &[ImagePair], k: &SsimConstants) -> Result<EvalReport> {
    let rows = pairs
        .iter()
        .map(|p| {
            Ok(EvalRow {
                image: p.id.clone(),
                psnr_db: psnr(&p.low, &p.gt)?,
                ssim: ssim_metric(&p.low, &p.gt, k)?,
                mae: mae(&p.low, &p.gt)?,
            })
        })
        .collect::<Result<_>>()?;
    EvalReport::from_rows(rows)
}
