//! Text-conditioned cross-attention: pixels of a feature map attend over
//! the prompt embeddings, and the attended values are projected back into
//! the feature stream as a residual.

use crate::error::{Error, Result};
use crate::nn::{expect_channels, Binding, Init, ParamBuilder, ParamId};
use crate::tensor::{Real, Tape, Var};

/// Projection weights of one conditioning layer.
///
/// Queries come from flattened pixels (`d_zeta = channels`), keys and values
/// from the `[M, d_tau]` prompt matrix. `bias` is one learnable offset per
/// prompt, shared by all pixels. `w_out` maps attended values back to
/// `channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct TcmParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub bias: ParamId,
    pub w_out: ParamId,
    pub channels: usize,
    pub attention_dim: usize,
    pub d_tau: usize,
    pub prompts: usize,
}

impl TcmParams {
    /// `w_q`, `w_k`, `w_v` get fan-in uniform values; `bias` and `w_out`
    /// start at zero so a fresh layer is the identity.
    pub fn build<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        channels: usize,
        attention_dim: usize,
        d_tau: usize,
        prompts: usize,
    ) -> Self {
        TcmParams {
            w_q: pb.tensor("w_q", &[attention_dim, channels], Init::FanIn(channels)),
            w_k: pb.tensor("w_k", &[attention_dim, d_tau], Init::FanIn(d_tau)),
            w_v: pb.tensor("w_v", &[attention_dim, d_tau], Init::FanIn(d_tau)),
            bias: pb.tensor("bias", &[1, prompts], Init::Zero),
            w_out: pb.tensor("w_out", &[channels, attention_dim], Init::Zero),
            channels,
            attention_dim,
            d_tau,
            prompts,
        }
    }

    pub fn param_count(channels: usize, attention_dim: usize, d_tau: usize, prompts: usize) -> usize {
        attention_dim * channels + 2 * attention_dim * d_tau + prompts + channels * attention_dim
    }
}

pub struct TcmOutput {
    /// `[C,H,W]`, the input plus the projected attention result.
    pub output: Var,
    /// `[H·W, M]` row-stochastic attention weights.
    pub attention: Var,
}

/// `feature + reshape(softmax(Q·Kᵀ/√d + B)·V·W_outᵀ)` with
/// `Q = tokens·W_qᵀ`, `K = T·W_kᵀ`, `V = T·W_vᵀ`.
///
/// `text` is the `[M, d_tau]` prompt matrix; it should be a constant leaf.
pub fn tcm_forward<T: Real>(
    tape: &mut Tape<T>,
    b: &Binding,
    feature: Var,
    text: Var,
    p: &TcmParams,
) -> Result<TcmOutput> {
    expect_channels(tape, feature, p.channels, "text conditioning")?;
    if tape.shape(text) != [p.prompts, p.d_tau] {
        return Err(Error::dim(format!(
            "text conditioning expects [{}, {}] prompt embeddings, got {:?}",
            p.prompts,
            p.d_tau,
            tape.shape(text)
        )));
    }
    let shape = tape.shape(feature).to_vec();
    let (c, hw) = (shape[0], shape[1] * shape[2]);

    let flat = tape.reshape(feature, &[c, hw])?;
    let tokens = tape.transpose(flat)?;
    let wq_t = tape.transpose(b[p.w_q])?;
    let wk_t = tape.transpose(b[p.w_k])?;
    let wv_t = tape.transpose(b[p.w_v])?;
    let q = tape.matmul(tokens, wq_t)?;
    let k = tape.matmul(text, wk_t)?;
    let v = tape.matmul(text, wv_t)?;

    let k_t = tape.transpose(k)?;
    let scores = tape.matmul(q, k_t)?;
    let scores = tape.scale(scores, T::lit(1.0 / (p.attention_dim as f64).sqrt()));
    let scores = tape.add(scores, b[p.bias])?;
    let attention = tape.softmax_rows(scores)?;

    let attended = tape.matmul(attention, v)?;
    let wo_t = tape.transpose(b[p.w_out])?;
    let projected = tape.matmul(attended, wo_t)?;
    let projected = tape.transpose(projected)?;
    let projected = tape.reshape(projected, &shape)?;
    let output = tape.add(feature, projected)?;
    Ok(TcmOutput { output, attention })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::ParamSet;
    use crate::tensor::{finite_diff_check, Tensor};
    use crate::text::embed_prompts;

    fn random_layer(seed: u64, c: usize, d: usize, d_tau: usize, m: usize) -> (ParamSet<f64>, TcmParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::default();
        let p = TcmParams::build(&mut ParamBuilder::new(&mut set, &mut rng), c, d, d_tau, m);
        for param in set.iter_mut() {
            param.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        (set, p)
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_prompt_adds_one_vector_everywhere() {
        let (c, d, d_tau) = (3, 4, 5);
        let (set, p) = random_layer(1, c, d, d_tau, 1);
        let text_m = embed_prompts(&["only"], d_tau, 0).unwrap().matrix::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, &[c, 3, 2]);

        let mut tape = Tape::new();
        let b = set.bind(&mut tape, false);
        let (xv, tv) = (tape.constant(x.clone()), tape.constant(text_m.clone()));
        let out = tcm_forward(&mut tape, &b, xv, tv, &p).unwrap();
        assert!(tape.value(out.attention).data().iter().all(|&a| a == 1.0));

        // W_out · (W_v · τ)
        let wv = &set.get(p.w_v).value;
        let wo = &set.get(p.w_out).value;
        let v: Vec<f64> = (0..d)
            .map(|i| (0..d_tau).map(|j| wv.get(&[i, j]) * text_m.get(&[0, j])).sum())
            .collect();
        let delta: Vec<f64> = (0..c).map(|i| (0..d).map(|j| wo.get(&[i, j]) * v[j]).sum()).collect();
        let y = tape.value(out.output);
        for (ch, &dc) in delta.iter().enumerate() {
            for px in 0..6 {
                let got = y.data()[ch * 6 + px] - x.data()[ch * 6 + px];
                assert!((got - dc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut set = ParamSet::<f64>::default();
        let p = TcmParams::build(&mut ParamBuilder::new(&mut set, &mut rng), 4, 8, 6, 2);
        let text_m = embed_prompts(&["a", "b"], 6, 0).unwrap().matrix::<f64>();
        let x = random_tensor(&mut rng, &[4, 5, 5]);
        let mut tape = Tape::new();
        let b = set.bind(&mut tape, false);
        let (xv, tv) = (tape.constant(x.clone()), tape.constant(text_m));
        let out = tcm_forward(&mut tape, &b, xv, tv, &p).unwrap();
        assert!(tape.value(out.output).bit_eq(&x));
    }

    #[test]
    fn hand_sized_instance_matches_direct_formula() {
        // C = 2, H = W = 1, d = 2, d_tau = 2, M = 2
        let (set, p) = random_layer(11, 2, 2, 2, 2);
        let g = |id: ParamId| set.get(id).value.clone();
        let (wq, wk, wv, bias, wo) = (g(p.w_q), g(p.w_k), g(p.w_v), g(p.bias), g(p.w_out));
        let text_m = Tensor::new([2, 2], vec![0.6, -0.8, 0.28, 0.96]).unwrap();
        let x = Tensor::new([2, 1, 1], vec![0.3, -0.7]).unwrap();

        let lin = |w: &Tensor<f64>, v: [f64; 2]| -> [f64; 2] {
            [
                w.get(&[0, 0]) * v[0] + w.get(&[0, 1]) * v[1],
                w.get(&[1, 0]) * v[0] + w.get(&[1, 1]) * v[1],
            ]
        };
        let q = lin(&wq, [0.3, -0.7]);
        let k1 = lin(&wk, [0.6, -0.8]);
        let k2 = lin(&wk, [0.28, 0.96]);
        let v1 = lin(&wv, [0.6, -0.8]);
        let v2 = lin(&wv, [0.28, 0.96]);
        let s1 = (q[0] * k1[0] + q[1] * k1[1]) / 2f64.sqrt() + bias.get(&[0, 0]);
        let s2 = (q[0] * k2[0] + q[1] * k2[1]) / 2f64.sqrt() + bias.get(&[0, 1]);
        let (e1, e2) = (s1.exp(), s2.exp());
        let (a1, a2) = (e1 / (e1 + e2), e2 / (e1 + e2));
        let att = [a1 * v1[0] + a2 * v2[0], a1 * v1[1] + a2 * v2[1]];
        let out = lin(&wo, att);
        let expected = [0.3 + out[0], -0.7 + out[1]];

        let mut tape = Tape::new();
        let b = set.bind(&mut tape, false);
        let (xv, tv) = (tape.constant(x), tape.constant(text_m));
        let res = tcm_forward(&mut tape, &b, xv, tv, &p).unwrap();
        let y = tape.value(res.output).data();
        assert!((y[0] - expected[0]).abs() < 1e-14 && (y[1] - expected[1]).abs() < 1e-14);
        let a = tape.value(res.attention).data();
        assert!((a[0] - a1).abs() < 1e-15 && (a[1] - a2).abs() < 1e-15);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        for seed in 0..50 {
            let (set, p) = random_layer(seed, 3, 4, 5, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let text_m = random_tensor(&mut rng, &[3, 5]);
            let x = random_tensor(&mut rng, &[3, 4, 3]);
            let mut tape = Tape::new();
            let b = set.bind(&mut tape, false);
            let (xv, tv) = (tape.constant(x), tape.constant(text_m));
            let out = tcm_forward(&mut tape, &b, xv, tv, &p).unwrap();
            assert_eq!(tape.shape(out.attention), &[12, 3]);
            for row in tape.value(out.attention).data().chunks(3) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn rejects_wrong_channels_and_prompt_count() {
        let (set, p) = random_layer(0, 3, 4, 5, 2);
        let mut tape = Tape::new();
        let b = set.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros([2, 3, 3]));
        let t = tape.constant(Tensor::zeros([2, 5]));
        assert!(matches!(tcm_forward(&mut tape, &b, x, t, &p), Err(Error::Dimension(_))));
        let x = tape.constant(Tensor::zeros([3, 3, 3]));
        let t = tape.constant(Tensor::zeros([3, 5]));
        assert!(matches!(tcm_forward(&mut tape, &b, x, t, &p), Err(Error::Dimension(_))));
    }

    #[test]
    fn permuting_pixels_permutes_output() {
        let (c, h, w) = (3, 3, 4);
        let (set, p) = random_layer(5, c, 4, 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let text_m = random_tensor(&mut rng, &[2, 6]);
        let x = random_tensor(&mut rng, &[c, h, w]);
        let hw = h * w;
        // a fixed derangement of pixel positions
        let perm: Vec<usize> = (0..hw).map(|i| (i * 5 + 3) % hw).collect();
        let xp = Tensor::from_fn([c, h, w], |i| x.data()[(i / hw) * hw + perm[i % hw]]);

        let run = |input: Tensor<f64>| {
            let mut tape = Tape::new();
            let b = set.bind(&mut tape, false);
            let (xv, tv) = (tape.constant(input), tape.constant(text_m.clone()));
            let out = tcm_forward(&mut tape, &b, xv, tv, &p).unwrap();
            tape.value(out.output).clone()
        };
        let y = run(x);
        let yp = run(xp);
        let y_permuted = Tensor::from_fn([c, h, w], |i| y.data()[(i / hw) * hw + perm[i % hw]]);
        assert!(yp.max_abs_diff(&y_permuted) < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let (set, p) = random_layer(seed, 2, 3, 4, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
            let text_m = random_tensor(&mut rng, &[2, 4]);
            let x = random_tensor(&mut rng, &[2, 4, 4]);
            let weights = random_tensor(&mut rng, &[2, 4, 4]);
            let mut params = set.values();
            params.push(x);
            let rep = finite_diff_check(&params, 1e-5, |tape, vars| {
                let b = Binding::from_vars(vars[..vars.len() - 1].to_vec());
                let tv = tape.constant(text_m.clone());
                let out = tcm_forward(tape, &b, vars[vars.len() - 1], tv, &p)?;
                let r = tape.constant(weights.clone());
                let prod = tape.mul(out.output, r)?;
                Ok(tape.sum(prod))
            })
            .unwrap();
            assert!(rep.max_rel_error < 1e-6, "{rep:?}");
        }
    }
}
