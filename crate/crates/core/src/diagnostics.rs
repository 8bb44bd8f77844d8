//! Finite-difference suites for the tape primitives and the full model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::network::{ModelConfig, NaLSuper};
use crate::nn::Binding;
use crate::tensor::{finite_diff_check, finite_diff_check_with, GradCheck, Tape, Tensor, Var};
use crate::text::{embed_prompts, DEFAULT_PROMPTS};

/// Step used for the primitive suite.
pub const PRIMITIVE_STEP: f64 = 1e-5;

/// Step used for the full model.
pub const MODEL_STEP: f64 = 3e-5;

/// Coordinates whose analytic gradient is below this magnitude are
/// differenced with [`SMALL_GRADIENT_STEP`] instead. Attention projections
/// fed by only two prompts can have gradients near 1e-9, where the roundoff
/// of a 3e-5 step is already a 1e-3 relative error.
pub const SMALL_GRADIENT: f64 = 1e-6;

pub const SMALL_GRADIENT_STEP: f64 = 1e-3;

/// Finite-difference step for a model coordinate with analytic gradient `a`.
pub fn model_step(a: f64) -> f64 {
    if a.abs() < SMALL_GRADIENT {
        SMALL_GRADIENT_STEP
    } else {
        MODEL_STEP
    }
}

/// Amplitude of the random parameters in [`model_gradcheck`].
pub const MODEL_PARAM_SCALE: f64 = 0.3;

/// Offset added to every bias that feeds a ReLU in [`model_gradcheck`], so
/// the check is taken away from rectifier kinks.
pub const RELU_BIAS_SHIFT: f64 = 1.0;

type OpFn = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// A primitive under test: operand shapes and how to apply it.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub apply: OpFn,
}

fn case(name: &'static str, shapes: &[&[usize]], apply: OpFn) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        apply,
    }
}

/// Every differentiable tape operation on shapes of at most 4×4×4.
pub fn primitive_cases() -> Vec<OpCase> {
    vec![
        case("conv2d_3x3", &[&[2, 4, 4], &[3, 2, 3, 3], &[3]], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1)),
        case("conv2d_1x1", &[&[3, 3, 4], &[2, 3, 1, 1], &[2]], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 0)),
        case("depthwise_conv2d", &[&[3, 4, 4], &[3, 1, 3, 3], &[3]], |t, v| {
            t.depthwise_conv2d(v[0], v[1], Some(v[2]), 1)
        }),
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
        case("softmax_rows", &[&[3, 4]], |t, v| t.softmax_rows(v[0])),
        case("add", &[&[2, 3, 3], &[2, 3, 3]], |t, v| t.add(v[0], v[1])),
        case("sub", &[&[2, 3, 3], &[2, 1, 1]], |t, v| t.sub(v[0], v[1])),
        case("mul", &[&[2, 3, 3], &[2, 3, 3]], |t, v| t.mul(v[0], v[1])),
        case("mul_channel_broadcast", &[&[3, 2, 4], &[3, 1, 1]], |t, v| t.mul(v[0], v[1])),
        case("mul_pixel_broadcast", &[&[3, 2, 4], &[1, 2, 4]], |t, v| t.mul(v[0], v[1])),
        case("div", &[&[2, 3], &[2, 3]], |t, v| {
            let d = t.add_scalar(v[1], 3.0);
            t.div(v[0], d)
        }),
        case("relu", &[&[4, 4]], |t, v| Ok(t.relu(v[0]))),
        case("sigmoid", &[&[4, 4]], |t, v| Ok(t.sigmoid(v[0]))),
        case("abs", &[&[4, 4]], |t, v| Ok(t.abs(v[0]))),
        case("exp", &[&[3, 3]], |t, v| Ok(t.exp(v[0]))),
        case("scale", &[&[2, 4]], |t, v| Ok(t.scale(v[0], -1.7))),
        case("global_avg_pool", &[&[3, 4, 2]], |t, v| t.global_avg_pool(v[0])),
        case("concat_channels", &[&[1, 3, 3], &[2, 3, 3]], |t, v| t.concat(&[v[0], v[1]])),
        case("reshape", &[&[2, 3, 4]], |t, v| t.reshape(v[0], &[6, 4])),
        case("permute", &[&[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1])),
        case("mean", &[&[3, 3]], |t, v| {
            let sq = t.square(v[0]);
            Ok(t.mean(sq))
        }),
    ]
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], amp: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-amp..amp))
}

/// `Σ r ⊙ out` for a fixed random `r`.
fn project(tape: &mut Tape<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(r.clone());
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub seeds: u64,
}

/// Checks every primitive through a random projection, once per seed in
/// `base_seed..base_seed + seeds`.
pub fn primitive_gradchecks(base_seed: u64, seeds: u64) -> Result<Vec<OpReport>> {
    primitive_cases()
        .into_iter()
        .map(|c| {
            let mut worst = 0.0f64;
            for seed in base_seed..base_seed + seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
                let params: Vec<Tensor<f64>> = c.shapes.iter().map(|s| uniform(&mut rng, s, 1.0)).collect();
                let mut r = None;
                let rep = finite_diff_check(&params, PRIMITIVE_STEP, |t, v| {
                    let out = (c.apply)(t, v)?;
                    let r = r.get_or_insert_with(|| uniform(&mut rng, t.shape(out), 1.0));
                    project(t, out, r)
                })?;
                worst = worst.max(rep.max_rel_error);
            }
            Ok(OpReport {
                name: c.name,
                max_rel_error: worst,
                seeds,
            })
        })
        .collect()
}

/// Model whose parameters are all uniform in `±MODEL_PARAM_SCALE`, with
/// ReLU-feeding biases shifted by `RELU_BIAS_SHIFT`.
pub fn gradcheck_model(config: &ModelConfig, seed: u64) -> Result<NaLSuper<f64>> {
    let embeddings = embed_prompts(&DEFAULT_PROMPTS, config.d_tau, seed)?;
    let mut model = NaLSuper::<f64>::init(config.clone(), &embeddings)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut().iter_mut() {
        let shift = if p.name.ends_with("pre_conv.bias") || p.name.ends_with("conv1.bias") || p.name == "recon1.bias" {
            RELU_BIAS_SHIFT
        } else {
            0.0
        };
        p.value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-MODEL_PARAM_SCALE..MODEL_PARAM_SCALE) + shift);
    }
    Ok(model)
}

/// Gradient of `Σ r ⊙ (I_out − I_low)` with respect to every parameter of
/// [`gradcheck_model`] on a random `size × size` image, with steps from
/// [`model_step`].
///
/// Projecting the residual keeps the large constant `Σ r ⊙ I_low` out of the
/// loss, which would otherwise set the roundoff floor.
pub fn model_gradcheck(config: &ModelConfig, size: usize, seed: u64) -> Result<GradCheck> {
    let model = gradcheck_model(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = Tensor::from_fn([3, size, size], |_| rng.random_range(0.0..1.0));
    let r = uniform(&mut rng, &[3, size, size], 1.0);
    finite_diff_check_with(&model.params().values(), model_step, |tape, vars| {
        let b = Binding::from_vars(vars.to_vec());
        let xv = tape.constant(x.clone());
        let y = model.forward_on(tape, &b, xv)?;
        let resid = tape.sub(y, xv)?;
        project(tape, resid, &r)
    })
}

/// C = 4, N = 2 with the desk-scale attention and text widths.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        channels: 4,
        num_blocks: 2,
        ..ModelConfig::default()
    }
}
