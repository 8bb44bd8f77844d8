//! Channel attention, pixel attention and the cross-layer attention fusion
//! block, chained together as the information fusion stage of each block.

use crate::error::{Error, Result};
use crate::nn::{expect_channels, Binding, Conv2d, DepthwiseConv, Init, ParamBuilder, ParamId};
use crate::tensor::{Real, Tape, Var};

/// Output of a sigmoid-gated attention stage.
pub struct Gated {
    pub output: Var,
    /// `[C,1,1]` for channel attention, `[1,H,W]` for pixel attention.
    pub gate: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttentionParams {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub channels: usize,
    pub reduction: usize,
}

impl ChannelAttentionParams {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize, reduction: usize) -> Self {
        let hidden = channels / reduction;
        ChannelAttentionParams {
            conv1: pb.conv("conv1", channels, hidden, 1, false),
            conv2: pb.conv("conv2", hidden, channels, 1, false),
            channels,
            reduction,
        }
    }

    pub fn param_count(channels: usize, reduction: usize) -> usize {
        let hidden = channels / reduction;
        2 * channels * hidden + hidden + channels
    }
}

/// `F ⊗ sigmoid(conv2(relu(conv1(pool(F)))))`, one weight per channel.
pub fn channel_attention<T: Real>(
    tape: &mut Tape<T>,
    b: &Binding,
    x: Var,
    p: &ChannelAttentionParams,
) -> Result<Gated> {
    expect_channels(tape, x, p.channels, "channel attention")?;
    let pooled = tape.global_avg_pool(x)?;
    let h = p.conv1.forward(tape, b, pooled)?;
    let h = tape.relu(h);
    let h = p.conv2.forward(tape, b, h)?;
    let gate = tape.sigmoid(h);
    let output = tape.mul(x, gate)?;
    Ok(Gated { output, gate })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelAttentionParams {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub channels: usize,
    pub reduction: usize,
}

impl PixelAttentionParams {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize, reduction: usize) -> Self {
        let hidden = channels / reduction;
        PixelAttentionParams {
            conv1: pb.conv("conv1", channels, hidden, 1, false),
            conv2: pb.conv("conv2", hidden, 1, 1, false),
            channels,
            reduction,
        }
    }

    pub fn param_count(channels: usize, reduction: usize) -> usize {
        let hidden = channels / reduction;
        channels * hidden + hidden + hidden + 1
    }
}

/// `F ⊗ sigmoid(conv2(relu(conv1(F))))`, one weight per pixel shared by all
/// channels.
pub fn pixel_attention<T: Real>(
    tape: &mut Tape<T>,
    b: &Binding,
    x: Var,
    p: &PixelAttentionParams,
) -> Result<Gated> {
    expect_channels(tape, x, p.channels, "pixel attention")?;
    let h = p.conv1.forward(tape, b, x)?;
    let h = tape.relu(h);
    let h = p.conv2.forward(tape, b, h)?;
    let gate = tape.sigmoid(h);
    let output = tape.mul(x, gate)?;
    Ok(Gated { output, gate })
}

/// Temperature of the layer-correlation softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeltaMode {
    /// δ = √(H·W·C)
    Fixed,
    /// δ = √(H·W·C) · exp(θ) with a learned scalar θ starting at 0.
    Learnable,
}

impl DeltaMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DeltaMode::Fixed => "fixed",
            DeltaMode::Learnable => "learnable",
        }
    }
}

impl std::str::FromStr for DeltaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(DeltaMode::Fixed),
            "learnable" => Ok(DeltaMode::Learnable),
            other => Err(Error::usage(format!("unknown delta mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CafbParams {
    pub q_point: Conv2d,
    pub k_point: Conv2d,
    pub v_point: Conv2d,
    pub q_depth: DepthwiseConv,
    pub k_depth: DepthwiseConv,
    pub v_depth: DepthwiseConv,
    pub log_delta: Option<ParamId>,
    pub out_proj: Conv2d,
    pub channels: usize,
}

impl CafbParams {
    /// `out_proj` is zero-initialised.
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize, delta: DeltaMode) -> Self {
        let wide = 3 * channels;
        CafbParams {
            q_point: pb.conv("q_point", wide, wide, 1, false),
            k_point: pb.conv("k_point", wide, wide, 1, false),
            v_point: pb.conv("v_point", wide, wide, 1, false),
            q_depth: pb.depthwise("q_depth", wide),
            k_depth: pb.depthwise("k_depth", wide),
            v_depth: pb.depthwise("v_depth", wide),
            log_delta: (delta == DeltaMode::Learnable).then(|| pb.tensor("log_delta", &[1], Init::Zero)),
            out_proj: pb.conv("out_proj", wide, channels, 1, true),
            channels,
        }
    }

    pub fn param_count(channels: usize, delta: DeltaMode) -> usize {
        let wide = 3 * channels;
        3 * (wide * wide + wide) + 3 * (9 * wide + wide) + wide * channels + channels
            + usize::from(delta == DeltaMode::Learnable)
    }
}

pub struct CafbOutput {
    /// `[C,H,W]` after the output projection.
    pub output: Var,
    /// `[3,3]` row-stochastic layer correlation matrix.
    pub attention: Var,
    /// `[3C,H,W]` fused layers plus the stacked input, before projection.
    pub fused: Var,
}

/// Self-attention across three feature layers.
///
/// The layers are stacked into `F_in` (`[3C,H,W]`), each of Q/K/V is a 1×1
/// conv followed by a depthwise 3×3 conv, and every layer is flattened to
/// one row of length `C·H·W`. The 3×3 matrix `softmax(Q'·K'ᵀ/δ)` mixes the
/// value rows; the result plus `F_in` is projected back to `C` channels.
pub fn cafb<T: Real>(
    tape: &mut Tape<T>,
    b: &Binding,
    layers: [Var; 3],
    p: &CafbParams,
) -> Result<CafbOutput> {
    let shape = tape.shape(layers[0]).to_vec();
    for &l in &layers[1..] {
        if tape.shape(l) != shape.as_slice() {
            return Err(Error::dim(format!(
                "cross-layer fusion inputs disagree: {shape:?} vs {:?}",
                tape.shape(l)
            )));
        }
    }
    expect_channels(tape, layers[0], p.channels, "cross-layer fusion")?;
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let row = c * h * w;

    let stacked = tape.concat(&layers)?;
    let project = |tape: &mut Tape<T>, point: &Conv2d, depth: &DepthwiseConv| -> Result<Var> {
        let y = point.forward(tape, b, stacked)?;
        let y = depth.forward(tape, b, y)?;
        tape.reshape(y, &[3, row])
    };
    let q = project(tape, &p.q_point, &p.q_depth)?;
    let k = project(tape, &p.k_point, &p.k_depth)?;
    let v = project(tape, &p.v_point, &p.v_depth)?;

    let k_t = tape.transpose(k)?;
    let scores = tape.matmul(q, k_t)?;
    let mut scores = tape.scale(scores, T::lit(1.0 / (row as f64).sqrt()));
    if let Some(theta) = p.log_delta {
        let neg = tape.scale(b[theta], -T::one());
        let inv = tape.exp(neg);
        scores = tape.mul(scores, inv)?;
    }
    let attention = tape.softmax_rows(scores)?;

    let mixed = tape.matmul(attention, v)?;
    let mixed = tape.reshape(mixed, &[3 * c, h, w])?;
    let fused = tape.add(mixed, stacked)?;
    let output = p.out_proj.forward(tape, b, fused)?;
    Ok(CafbOutput {
        output,
        attention,
        fused,
    })
}

/// Channel attention, pixel attention and cross-layer fusion for one block.
#[derive(Clone, Debug, PartialEq)]
pub struct IfaParams {
    pub channel: ChannelAttentionParams,
    pub pixel: PixelAttentionParams,
    pub fusion: CafbParams,
}

impl IfaParams {
    pub fn build<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        channels: usize,
        reduction: usize,
        delta: DeltaMode,
    ) -> Self {
        IfaParams {
            channel: ChannelAttentionParams::build(&mut pb.scope("ca"), channels, reduction),
            pixel: PixelAttentionParams::build(&mut pb.scope("pa"), channels, reduction),
            fusion: CafbParams::build(&mut pb.scope("cafb"), channels, delta),
        }
    }

    pub fn param_count(channels: usize, reduction: usize, delta: DeltaMode) -> usize {
        ChannelAttentionParams::param_count(channels, reduction)
            + PixelAttentionParams::param_count(channels, reduction)
            + CafbParams::param_count(channels, delta)
    }
}

/// Fuses `(block_in, post_tcm, PA(CA(post_tcm)))` through [`cafb`].
pub fn ifa_forward<T: Real>(
    tape: &mut Tape<T>,
    b: &Binding,
    block_in: Var,
    post_tcm: Var,
    p: &IfaParams,
) -> Result<Var> {
    if tape.shape(block_in) != tape.shape(post_tcm) {
        return Err(Error::dim(format!(
            "information fusion inputs disagree: {:?} vs {:?}",
            tape.shape(block_in),
            tape.shape(post_tcm)
        )));
    }
    let ca = channel_attention(tape, b, post_tcm, &p.channel)?;
    let pa = pixel_attention(tape, b, ca.output, &p.pixel)?;
    Ok(cafb(tape, b, [block_in, post_tcm, pa.output], &p.fusion)?.output)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::ParamSet;
    use crate::tensor::{finite_diff_check, Tensor};

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn randomize(set: &mut ParamSet<f64>, rng: &mut ChaCha8Rng) {
        for param in set.iter_mut() {
            param.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn ifa_layer(seed: u64, c: usize, r: usize, delta: DeltaMode, random: bool) -> (ParamSet<f64>, IfaParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::default();
        let p = IfaParams::build(&mut ParamBuilder::new(&mut set, &mut rng), c, r, delta);
        if random {
            randomize(&mut set, &mut rng);
        }
        (set, p)
    }

    // naive [cout,cin,1,1] convolution
    fn pointwise(x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let cout = w.shape()[0];
        Tensor::from_fn([cout, h, wd], |i| {
            let (o, px) = (i / (h * wd), i % (h * wd));
            bias.data()[o] + (0..cin).map(|c| w.get(&[o, c, 0, 0]) * x.data()[c * h * wd + px]).sum::<f64>()
        })
    }

    // naive zero-padded depthwise 3×3
    fn depthwise3(x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
        let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        Tensor::from_fn([c, h, wd], |i| {
            let (ch, y, xx) = (i / (h * wd), (i / wd) % h, i % wd);
            let mut acc = bias.data()[ch];
            for dy in 0..3 {
                for dx in 0..3 {
                    let (sy, sx) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                        acc += w.get(&[ch, 0, dy, dx]) * x.get(&[ch, sy as usize, sx as usize]);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn parameter_counts_match_closed_form() {
        for (c, r) in [(4, 1), (8, 2), (6, 3)] {
            for delta in [DeltaMode::Fixed, DeltaMode::Learnable] {
                let (set, _) = ifa_layer(0, c, r, delta, false);
                assert_eq!(set.numel(), IfaParams::param_count(c, r, delta));
            }
        }
    }

    #[test]
    fn zero_parameters_give_half_gates() {
        let (mut set, p) = ifa_layer(1, 4, 2, DeltaMode::Fixed, false);
        set.iter_mut().for_each(|q| q.value.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, &[4, 3, 5]);
        let mut tape = Tape::new();
        let b = set.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let ca = channel_attention(&mut tape, &b, xv, &p.channel).unwrap();
        let pa = pixel_attention(&mut tape, &b, xv, &p.pixel).unwrap();
        assert_eq!(tape.shape(ca.gate), &[4, 1, 1]);
        assert_eq!(tape.shape(pa.gate), &[1, 3, 5]);
        assert!(tape.value(ca.gate).data().iter().all(|&g| g == 0.5));
        assert!(tape.value(pa.gate).data().iter().all(|&g| g == 0.5));
        assert!(tape.value(ca.output).bit_eq(&x.map(|v| v * 0.5)));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (set, p) = ifa_layer(3, 4, 1, DeltaMode::Fixed, true);
        let mut tape = Tape::new();
        let b = set.bind(&mut tape, false);
        let xv = tape.constant(Tensor::zeros([4, 3, 3]));
        let ca = channel_attention(&mut tape, &b, xv, &p.channel).unwrap();
        let pa = pixel_attention(&mut tape, &b, xv, &p.pixel).unwrap();
        assert!(tape.value(ca.output).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(pa.output).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_attention_matches_direct_evaluation() {
        let (c, r) = (4, 2);
        let (set, p) = ifa_layer(4, c, r, DeltaMode::Fixed, true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, &[c, 3, 4]);
        let g = |id: ParamId| set.get(id).value.clone();
        let (w1, b1, w2, b2) = (g(p.channel.conv1.weight), g(p.channel.conv1.bias), g(p.channel.conv2.weight), g(p.channel.conv2.bias));

        let mean: Vec<f64> = x.data().chunks(12).map(|ch| ch.iter().sum::<f64>() / 12.0).collect();
        let hidden: Vec<f64> = (0..c / r)
            .map(|o| (b1.data()[o] + (0..c).map(|i| w1.get(&[o, i, 0, 0]) * mean[i]).sum::<f64>()).max(0.0))
            .collect();
        let gate: Vec<f64> = (0..c)
            .map(|o| sigmoid(b2.data()[o] + (0..c / r).map(|i| w2.get(&[o, i, 0, 0]) * hidden[i]).sum::<f64>()))
            .collect();

        let mut tape = Tape::new();
        let b = set.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = channel_attention(&mut tape, &b, xv, &p.channel).unwrap();
        let expected = Tensor::from_fn([c, 3, 4], |i| x.data()[i] * gate[i / 12]);
        assert!(tape.value(out.output).max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn pixel_attention_matches_direct_evaluation() {
        let (c, r) = (4, 2);
        let (set, p) = ifa_layer(6, c, r, DeltaMode::Fixed, true);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, &[c, 3, 4]);
        let g = |id: ParamId| set.get(id).value.clone();
        let hidden = pointwise(&x, &g(p.pixel.conv1.weight), &g(p.pixel.conv1.bias)).map(|v| v.max(0.0));
        let gate = pointwise(&hidden, &g(p.pixel.conv2.weight), &g(p.pixel.conv2.bias)).map(sigmoid);
        let expected = Tensor::from_fn([c, 3, 4], |i| x.data()[i] * gate.data()[i % 12]);

        let mut tape = Tape::new();
        let b = set.bind(&mut tape, false);
        let xv = tape.constant(x);
        let out = pixel_attention(&mut tape, &b, xv, &p.pixel).unwrap();
        assert!(tape.value(out.output).max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn gates_lie_strictly_inside_unit_interval() {
        for seed in 0..20 {
            let (set, p) = ifa_layer(seed, 4, 2, DeltaMode::Fixed, true);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let x = random_tensor(&mut rng, &[4, 4, 4]);
            let mut tape = Tape::new();
            let b = set.bind(&mut tape, false);
            let xv = tape.constant(x);
            let ca = channel_attention(&mut tape, &b, xv, &p.channel).unwrap();
            let pa = pixel_attention(&mut tape, &b, xv, &p.pixel).unwrap();
            for g in tape.value(ca.gate).data().iter().chain(tape.value(pa.gate).data()) {
                assert!(*g > 0.0 && *g < 1.0);
            }
        }
    }

    fn fusion_oracle(set: &ParamSet<f64>, p: &CafbParams, layers: &[Tensor<f64>; 3], delta: f64) -> (Vec<f64>, Tensor<f64>) {
        let (c, h, w) = (layers[0].shape()[0], layers[0].shape()[1], layers[0].shape()[2]);
        let row = c * h * w;
        let stacked: Vec<f64> = layers.iter().flat_map(|l| l.data().iter().copied()).collect();
        let stacked = Tensor::new([3 * c, h, w], stacked).unwrap();
        let g = |id: ParamId| set.get(id).value.clone();
        let proj = |point: &Conv2d, depth: &DepthwiseConv| {
            let y = pointwise(&stacked, &g(point.weight), &g(point.bias));
            depthwise3(&y, &g(depth.weight), &g(depth.bias))
        };
        let (q, k, v) = (proj(&p.q_point, &p.q_depth), proj(&p.k_point, &p.k_depth), proj(&p.v_point, &p.v_depth));
        let mut a = vec![0.0; 9];
        for i in 0..3 {
            let s: Vec<f64> = (0..3)
                .map(|j| (0..row).map(|t| q.data()[i * row + t] * k.data()[j * row + t]).sum::<f64>() / delta)
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            for j in 0..3 {
                a[i * 3 + j] = (s[j] - m).exp() / z;
            }
        }
        let fused = Tensor::from_fn([3 * c, h, w], |n| {
            let (i, t) = (n / row, n % row);
            stacked.data()[n] + (0..3).map(|j| a[i * 3 + j] * v.data()[j * row + t]).sum::<f64>()
        });
        (a, pointwise(&fused, &g(p.out_proj.weight), &g(p.out_proj.bias)))
    }

    #[test]
    fn fusion_matches_direct_evaluation() {
        for delta in [DeltaMode::Fixed, DeltaMode::Learnable] {
            let (c, h, w) = (2, 3, 3);
            let (mut set, p) = ifa_layer(8, c, 1, delta, true);
            let mut theta = 0.0;
            if let Some(id) = p.fusion.log_delta {
                theta = 0.4;
                set.get_mut(id).value.data_mut()[0] = theta;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let layers = [0, 1, 2].map(|_| random_tensor(&mut rng, &[c, h, w]));
            let (a, expected) = fusion_oracle(&set, &p.fusion, &layers, ((c * h * w) as f64).sqrt() * f64::exp(theta));

            let mut tape = Tape::new();
            let b = set.bind(&mut tape, false);
            let vars = layers.clone().map(|l| tape.constant(l));
            let out = cafb(&mut tape, &b, vars, &p.fusion).unwrap();
            assert_eq!(tape.shape(out.attention), &[3, 3]);
            let got_a = tape.value(out.attention).data();
            assert!(got_a.iter().zip(&a).all(|(x, y)| (x - y).abs() < 1e-13));
            assert!(tape.value(out.output).max_abs_diff(&expected) < 1e-12);
        }
    }

    #[test]
    fn uniform_attention_averages_value_layers() {
        let (c, h, w) = (3, 4, 4);
        let (mut set, p) = ifa_layer(10, c, 1, DeltaMode::Fixed, true);
        for id in [p.fusion.q_point.weight, p.fusion.q_point.bias, p.fusion.q_depth.weight, p.fusion.q_depth.bias] {
            set.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layers = [0, 1, 2].map(|_| random_tensor(&mut rng, &[c, h, w]));
        let mut tape = Tape::new();
        let b = set.bind(&mut tape, false);
        let vars = layers.clone().map(|l| tape.constant(l));
        let stacked = tape.concat(&vars).unwrap();
        let out = cafb(&mut tape, &b, vars, &p.fusion).unwrap();
        assert!(tape.value(out.attention).data().iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));

        let g = |id: ParamId| set.get(id).value.clone();
        let stacked_t = tape.value(stacked).clone();
        let v = depthwise3(
            &pointwise(&stacked_t, &g(p.fusion.v_point.weight), &g(p.fusion.v_point.bias)),
            &g(p.fusion.v_depth.weight),
            &g(p.fusion.v_depth.bias),
        );
        let row = c * h * w;
        let fused = tape.value(out.fused);
        for i in 0..3 {
            for t in 0..row {
                let mean = (0..3).map(|j| v.data()[j * row + t]).sum::<f64>() / 3.0;
                let mixed = fused.data()[i * row + t] - stacked_t.data()[i * row + t];
                assert!((mixed - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_attention_rows_sum_to_one() {
        for seed in 0..50 {
            let delta = if seed % 2 == 0 { DeltaMode::Fixed } else { DeltaMode::Learnable };
            let (set, p) = ifa_layer(seed, 2, 1, delta, true);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
            let layers = [0, 1, 2].map(|_| random_tensor(&mut rng, &[2, 3, 4]).map(|v| v * 5.0));
            let mut tape = Tape::new();
            let b = set.bind(&mut tape, false);
            let vars = layers.map(|l| tape.constant(l));
            let out = cafb(&mut tape, &b, vars, &p.fusion).unwrap();
            for row in tape.value(out.attention).data().chunks(3) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                assert!(row.iter().all(|&a| a >= 0.0));
            }
        }
    }

    #[test]
    fn fresh_fusion_stage_outputs_zero() {
        let (set, p) = ifa_layer(12, 4, 2, DeltaMode::Fixed, false);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut tape = Tape::new();
        let b = set.bind(&mut tape, false);
        let x = tape.constant(random_tensor(&mut rng, &[4, 5, 5]));
        let y = tape.constant(random_tensor(&mut rng, &[4, 5, 5]));
        let out = ifa_forward(&mut tape, &b, x, y, &p).unwrap();
        assert_eq!(tape.shape(out), &[4, 5, 5]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let (set, p) = ifa_layer(0, 2, 1, DeltaMode::Fixed, false);
        let mut tape = Tape::new();
        let b = set.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros([2, 3, 3]));
        let y = tape.constant(Tensor::zeros([2, 3, 4]));
        let z = tape.constant(Tensor::zeros([3, 3, 3]));
        assert!(matches!(ifa_forward(&mut tape, &b, x, y, &p), Err(Error::Dimension(_))));
        assert!(matches!(cafb(&mut tape, &b, [x, x, y], &p.fusion), Err(Error::Dimension(_))));
        assert!(matches!(channel_attention(&mut tape, &b, z, &p.channel), Err(Error::Dimension(_))));
        assert!(matches!(pixel_attention(&mut tape, &b, z, &p.pixel), Err(Error::Dimension(_))));
    }

    #[test]
    fn gradient_reaches_every_attention_stage() {
        let (set, p) = ifa_layer(14, 2, 1, DeltaMode::Learnable, true);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut tape = Tape::new();
        let b = set.bind(&mut tape, true);
        let x = tape.constant(random_tensor(&mut rng, &[2, 4, 4]));
        let y = tape.constant(random_tensor(&mut rng, &[2, 4, 4]));
        let out = ifa_forward(&mut tape, &b, x, y, &p).unwrap();
        let sq = tape.square(out);
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        for prefix in ["ca.", "pa.", "cafb."] {
            let reached = set.iter().enumerate().filter(|(_, q)| q.name.starts_with(prefix)).any(|(i, _)| {
                tape.grad(b.vars()[i]).is_some_and(|g| g.data().iter().any(|&v| v != 0.0))
            });
            assert!(reached, "no gradient reached {prefix}");
        }
    }

    fn check_op<F>(seed: u64, delta: DeltaMode, inputs: usize, f: F) -> f64
    where
        F: Fn(&mut Tape<f64>, &Binding, &IfaParams, &[Var]) -> Result<Var>,
    {
        let (mut set, p) = ifa_layer(seed, 2, 1, delta, true);
        // keep the 3×3 softmax away from saturation, where gradients fall
        // below the finite-difference roundoff floor
        set.iter_mut().for_each(|q| q.value.data_mut().iter_mut().for_each(|v| *v *= 0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 40);
        let n = set.len();
        let mut params = set.values();
        for _ in 0..inputs {
            params.push(random_tensor(&mut rng, &[2, 4, 4]));
        }
        let weights = random_tensor(&mut rng, &[2, 4, 4]);
        let rep = finite_diff_check(&params, 1e-4, |tape, vars| {
            let b = Binding::from_vars(vars[..n].to_vec());
            let out = f(tape, &b, &p, &vars[n..])?;
            let r = tape.constant(weights.clone());
            let prod = tape.mul(out, r)?;
            Ok(tape.sum(prod))
        })
        .unwrap();
        rep.max_rel_error
    }

    #[test]
    fn channel_attention_gradients_match_finite_differences() {
        for seed in 0..20 {
            let err = check_op(seed, DeltaMode::Fixed, 1, |tape, b, p, x| {
                Ok(channel_attention(tape, b, x[0], &p.channel)?.output)
            });
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn pixel_attention_gradients_match_finite_differences() {
        for seed in 0..20 {
            let err = check_op(seed, DeltaMode::Fixed, 1, |tape, b, p, x| {
                Ok(pixel_attention(tape, b, x[0], &p.pixel)?.output)
            });
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn fusion_gradients_match_finite_differences() {
        for seed in 0..20 {
            let delta = if seed % 2 == 0 { DeltaMode::Fixed } else { DeltaMode::Learnable };
            let err = check_op(seed, delta, 3, |tape, b, p, x| {
                Ok(cafb(tape, b, [x[0], x[1], x[2]], &p.fusion)?.output)
            });
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn fusion_stage_gradients_match_finite_differences() {
        for seed in 0..10 {
            let err = check_op(seed, DeltaMode::Learnable, 2, |tape, b, p, x| {
                ifa_forward(tape, b, x[0], x[1], p)
            });
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }
}
