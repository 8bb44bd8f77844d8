//! Training losses (L1, SSIM and their sum) and evaluation metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// How local statistics are gathered for SSIM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsimWindow {
    /// 11×11 gaussian, σ = 1.5, valid positions only.
    Gaussian11,
    /// One mean/variance/covariance per image.
    Global,
}

impl SsimWindow {
    pub fn as_str(self) -> &'static str {
        match self {
            SsimWindow::Gaussian11 => "gaussian11",
            SsimWindow::Global => "global",
        }
    }
}

impl std::str::FromStr for SsimWindow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian11" | "gaussian" => Ok(SsimWindow::Gaussian11),
            "global" => Ok(SsimWindow::Global),
            other => Err(Error::usage(format!("unknown SSIM window {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
    pub window: SsimWindow,
}

impl SsimConstants {
    /// `c1 = (0.01·L)²`, `c2 = (0.03·L)²` for dynamic range `L = 1`.
    pub fn new(window: SsimWindow) -> Self {
        SsimConstants {
            c1: 0.01f64.powi(2),
            c2: 0.03f64.powi(2),
            window,
        }
    }
}

impl Default for SsimConstants {
    fn default() -> Self {
        SsimConstants::new(SsimWindow::Gaussian11)
    }
}

pub const GAUSSIAN_SIZE: usize = 11;
pub const GAUSSIAN_SIGMA: f64 = 1.5;

/// Normalised `size × size` gaussian, row-major.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - centre).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut w: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

fn same_shape<T: Real>(tape: &Tape<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(format!(
            "{what}: prediction {:?} vs target {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Mean absolute difference over every element.
pub fn l1_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    same_shape(tape, pred, gt, "L1 loss")?;
    let d = tape.sub(pred, gt)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Mean SSIM between two `[C,H,W]` images, as a scalar tape node.
pub fn ssim<T: Real>(tape: &mut Tape<T>, x: Var, y: Var, k: &SsimConstants) -> Result<Var> {
    same_shape(tape, x, y, "SSIM")?;
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim(format!("SSIM expects [C,H,W] images, got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);

    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let [mx, my, exx, eyy, exy] = match k.window {
        SsimWindow::Gaussian11 => {
            if h < GAUSSIAN_SIZE || w < GAUSSIAN_SIZE {
                return Err(Error::usage(format!(
                    "gaussian SSIM window needs images of at least {GAUSSIAN_SIZE}×{GAUSSIAN_SIZE}, got {h}×{w}"
                )));
            }
            let g = gaussian_window(GAUSSIAN_SIZE, GAUSSIAN_SIGMA);
            let kernel = Tensor::from_fn([c, 1, GAUSSIAN_SIZE, GAUSSIAN_SIZE], |i| {
                T::lit(g[i % g.len()])
            });
            let kv = tape.constant(kernel);
            let mut out = [x; 5];
            for (slot, v) in out.iter_mut().zip([x, y, xx, yy, xy]) {
                *slot = tape.depthwise_conv2d(v, kv, None, 0)?;
            }
            out
        }
        SsimWindow::Global => [x, y, xx, yy, xy].map(|v| tape.mean(v)),
    };

    let mxy = tape.mul(mx, my)?;
    let mx2 = tape.mul(mx, mx)?;
    let my2 = tape.mul(my, my)?;
    let vx = tape.sub(exx, mx2)?;
    let vy = tape.sub(eyy, my2)?;
    let cov = tape.sub(exy, mxy)?;

    let a = tape.scale(mxy, T::lit(2.0));
    let a = tape.add_scalar(a, T::lit(k.c1));
    let b = tape.scale(cov, T::lit(2.0));
    let b = tape.add_scalar(b, T::lit(k.c2));
    let num = tape.mul(a, b)?;
    let m = tape.add(mx2, my2)?;
    let m = tape.add_scalar(m, T::lit(k.c1));
    let v = tape.add(vx, vy)?;
    let v = tape.add_scalar(v, T::lit(k.c2));
    let den = tape.mul(m, v)?;
    let map = tape.div(num, den)?;
    Ok(tape.mean(map))
}

/// `1 − ssim(pred, gt)`.
pub fn ssim_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: Var, k: &SsimConstants) -> Result<Var> {
    let s = ssim(tape, pred, gt, k)?;
    let neg = tape.scale(s, -T::one());
    Ok(tape.add_scalar(neg, T::one()))
}

/// Which terms make up the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    L1,
    Ssim,
    L1Ssim,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::Ssim => "ssim",
            LossKind::L1Ssim => "l1+ssim",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(LossKind::L1),
            "ssim" => Ok(LossKind::Ssim),
            "l1+ssim" | "l1ssim" | "both" => Ok(LossKind::L1Ssim),
            other => Err(Error::usage(format!("unknown loss {other:?}, expected l1, ssim or l1+ssim"))),
        }
    }
}

pub struct LossTerms {
    /// Node to differentiate.
    pub total: Var,
    pub l1: f64,
    pub ssim: f64,
}

/// Builds the selected objective. Both terms are always reported; an inactive
/// term is evaluated on detached copies so it contributes no gradient.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: Var,
    k: &SsimConstants,
    kind: LossKind,
) -> Result<LossTerms> {
    let detached = |tape: &mut Tape<T>| {
        let p = tape.constant(tape.value(pred).clone());
        let g = tape.constant(tape.value(gt).clone());
        (p, g)
    };
    let (l1, ls) = match kind {
        LossKind::L1Ssim => (l1_loss(tape, pred, gt)?, ssim_loss(tape, pred, gt, k)?),
        LossKind::L1 => {
            let l1 = l1_loss(tape, pred, gt)?;
            let (p, g) = detached(tape);
            (l1, ssim_loss(tape, p, g, k)?)
        }
        LossKind::Ssim => {
            let ls = ssim_loss(tape, pred, gt, k)?;
            let (p, g) = detached(tape);
            (l1_loss(tape, p, g)?, ls)
        }
    };
    let total = match kind {
        LossKind::L1Ssim => tape.add(l1, ls)?,
        LossKind::L1 => l1,
        LossKind::Ssim => ls,
    };
    Ok(LossTerms {
        total,
        l1: tape.value(l1).item().as_f64(),
        ssim: tape.value(ls).item().as_f64(),
    })
}

fn clamped_pair<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim(format!(
            "metric: prediction {:?} vs target {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let clamp = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64().clamp(0.0, 1.0)).collect();
    Ok((clamp(pred), clamp(gt)))
}

pub const PSNR_CAP_DB: f64 = 100.0;

/// `10·log10(1/MSE)` on values clamped to `[0,1]`, capped at 100 dB.
pub fn psnr<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let (p, g) = clamped_pair(pred, gt)?;
    let mse = p.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64;
    Ok(if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// Mean absolute error on values clamped to `[0,1]`.
pub fn mae<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let (p, g) = clamped_pair(pred, gt)?;
    Ok(p.iter().zip(&g).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
}

/// SSIM metric on values clamped to `[0,1]`, evaluated in `f64`.
pub fn ssim_metric<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, k: &SsimConstants) -> Result<f64> {
    let (p, g) = clamped_pair(pred, gt)?;
    let shape = pred.shape().to_vec();
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(shape.clone(), p)?);
    let y = tape.constant(Tensor::new(shape, g)?);
    let s = ssim(&mut tape, x, y, k)?;
    Ok(tape.value(s).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub mae: f64,
}

/// Per-image metrics plus their arithmetic means.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_mae: f64,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::usage("evaluation needs at least one image"));
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Ok(EvalReport {
            mean_psnr_db: mean(|r| r.psnr_db),
            mean_ssim: mean(|r| r.ssim),
            mean_mae: mean(|r| r.mae),
            rows,
        })
    }

    pub fn count(&self) -> usize {
        self.rows.len()
    }

    pub fn table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.image.len())
            .chain(["image".len(), "mean".len()])
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>10}  {:>8}  {:>8}", "image", "psnr_db", "ssim", "mae");
        let mut line = |name: &str, p: f64, s: f64, m: f64| {
            let _ = writeln!(out, "{name:<width$}  {p:>10.4}  {s:>8.5}  {m:>8.5}");
        };
        for r in &self.rows {
            line(&r.image, r.psnr_db, r.ssim, r.mae);
        }
        line("mean", self.mean_psnr_db, self.mean_ssim, self.mean_mae);
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("image,psnr_db,ssim,mae\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", csv_field(&r.image), r.psnr_db, r.ssim, r.mae);
        }
        let _ = writeln!(out, "mean,{},{},{}", self.mean_psnr_db, self.mean_ssim, self.mean_mae);
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
