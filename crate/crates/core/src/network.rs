//! Residual text-guided fusion blocks and the full enhancement model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{ifa_forward, DeltaMode, IfaParams};
use crate::error::{Error, Result};
use crate::nn::{expect_channels, Binding, Conv2d, ParamBuilder, ParamSet};
use crate::objectives::SsimWindow;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::text::{tcm_forward, EmbeddingSet, TcmParams};

/// Hyperparameters of one model instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub num_blocks: usize,
    pub attention_dim: usize,
    pub d_tau: usize,
    pub reduction: usize,
    pub delta_mode: DeltaMode,
    pub ssim_window: SsimWindow,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 8,
            num_blocks: 3,
            attention_dim: 16,
            d_tau: 32,
            reduction: 1,
            delta_mode: DeltaMode::Fixed,
            ssim_window: SsimWindow::Gaussian11,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("channels", self.channels),
            ("blocks", self.num_blocks),
            ("attention dim", self.attention_dim),
            ("d_tau", self.d_tau),
            ("reduction", self.reduction),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::usage(format!("{name} must be positive")));
            }
        }
        if !self.channels.is_multiple_of(self.reduction) {
            return Err(Error::usage(format!(
                "channels ({}) must be divisible by the reduction ratio ({})",
                self.channels, self.reduction
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count for `prompts` text embeddings.
    pub fn param_count(&self, prompts: usize) -> usize {
        let c = self.channels;
        let block = 9 * c * c
            + c
            + TcmParams::param_count(c, self.attention_dim, self.d_tau, prompts)
            + IfaParams::param_count(c, self.reduction, self.delta_mode);
        (27 * c + c) + self.num_blocks * block + (self.num_blocks * c * c + c) + (27 * c + 3)
    }
}

/// One residual text-guided fusion block.
#[derive(Clone, Debug, PartialEq)]
pub struct RtfbParams {
    pub pre_conv: Conv2d,
    pub tcm: TcmParams,
    pub ifa: IfaParams,
}

/// `F_prev + IFA(F_prev, TCM(relu(pre_conv(F_prev))))`.
pub fn rtfb_forward<T: Real>(
    tape: &mut Tape<T>,
    b: &Binding,
    f_prev: Var,
    text: Var,
    block: &RtfbParams,
) -> Result<Var> {
    expect_channels(tape, f_prev, block.tcm.channels, "residual block")?;
    let fa = block.pre_conv.forward(tape, b, f_prev)?;
    let fa = tape.relu(fa);
    let fb = tcm_forward(tape, b, fa, text, &block.tcm)?.output;
    let fc = ifa_forward(tape, b, f_prev, fb, &block.ifa)?;
    tape.add(f_prev, fc)
}

/// Intermediate nodes of one forward pass.
pub struct ForwardTrace {
    pub output: Var,
    pub shallow: Var,
    pub blocks: Vec<Var>,
    /// `[N·C,H,W]` concatenation of every block output.
    pub concat: Var,
}

/// Shallow projection, `N` residual blocks, concatenation, reconstruction
/// and a global residual back to the input image.
#[derive(Clone, Debug, PartialEq)]
pub struct NaLSuper<T> {
    config: ModelConfig,
    params: ParamSet<T>,
    shallow: Conv2d,
    blocks: Vec<RtfbParams>,
    recon1: Conv2d,
    recon2: Conv2d,
    embeddings: EmbeddingSet,
}

impl<T: Real> NaLSuper<T> {
    /// Fan-in uniform init from `config.seed`. The TCM output projection,
    /// the fusion output projection and the last reconstruction conv start at
    /// zero, so a fresh model returns its input unchanged.
    pub fn init(config: ModelConfig, embeddings: &EmbeddingSet) -> Result<Self> {
        config.validate()?;
        if embeddings.d_tau() != config.d_tau {
            return Err(Error::usage(format!(
                "embeddings have d_tau = {}, configuration expects {}",
                embeddings.d_tau(),
                config.d_tau
            )));
        }
        let c = config.channels;
        let m = embeddings.len();
        let mut params = ParamSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);

        let shallow = pb.conv("shallow", 3, c, 3, false);
        let blocks = (0..config.num_blocks)
            .map(|i| {
                let mut s = pb.scope(&format!("blocks.{i}"));
                RtfbParams {
                    pre_conv: s.conv("pre_conv", c, c, 3, false),
                    tcm: TcmParams::build(&mut s.scope("tcm"), c, config.attention_dim, config.d_tau, m),
                    ifa: IfaParams::build(&mut s.scope("ifa"), c, config.reduction, config.delta_mode),
                }
            })
            .collect();
        let recon1 = pb.conv("recon1", config.num_blocks * c, c, 1, false);
        let recon2 = pb.conv("recon2", c, 3, 3, true);

        Ok(NaLSuper {
            config,
            params,
            shallow,
            blocks,
            recon1,
            recon2,
            embeddings: embeddings.to_storage_precision(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn embeddings(&self) -> &EmbeddingSet {
        &self.embeddings
    }

    pub fn blocks(&self) -> &[RtfbParams] {
        &self.blocks
    }

    /// Records a forward pass on `tape` using parameters bound as `b`.
    pub fn forward_traced(&self, tape: &mut Tape<T>, b: &Binding, input: Var) -> Result<ForwardTrace> {
        let shape = tape.shape(input);
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::dim(format!("model expects a [3,H,W] image, got {shape:?}")));
        }
        if shape[1] < 3 || shape[2] < 3 {
            return Err(Error::dim(format!("model needs images of at least 3×3, got {shape:?}")));
        }
        let text = tape.constant(self.embeddings.matrix());
        let shallow = self.shallow.forward(tape, b, input)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut f = shallow;
        for block in &self.blocks {
            f = rtfb_forward(tape, b, f, text, block)?;
            blocks.push(f);
        }
        let concat = tape.concat(&blocks)?;
        let r = self.recon1.forward(tape, b, concat)?;
        let r = tape.relu(r);
        let r = self.recon2.forward(tape, b, r)?;
        let output = tape.add(input, r)?;
        Ok(ForwardTrace {
            output,
            shallow,
            blocks,
            concat,
        })
    }

    pub fn forward_on(&self, tape: &mut Tape<T>, b: &Binding, input: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, b, input)?.output)
    }

    /// Inference on a `[3,H,W]` image; the result is not clamped.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let y = self.forward_on(&mut tape, &b, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn cast<U: Real>(&self) -> NaLSuper<U> {
        NaLSuper {
            config: self.config.clone(),
            params: self.params.cast(),
            shallow: self.shallow.clone(),
            blocks: self.blocks.clone(),
            recon1: self.recon1.clone(),
            recon2: self.recon2.clone(),
            embeddings: self.embeddings.clone(),
        }
    }
}
