//! Tensor operators checked against independent reference implementations:
//! central finite differences for every backward rule, direct loop
//! convolutions, and two-pass normalisation statistics.

use dota_core::tensor::{Graph, PoolKind, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-3;
const REL_TOL: f64 = 1e-3;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares analytic gradients of `sum(weights * f(inputs))` against central
/// finite differences on every input coordinate.
fn gradcheck<F>(inputs: Vec<Tensor<f64>>, seed: u64, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |inputs: &[Tensor<f64>], weights: Option<&Tensor<f64>>| {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        let w = weights
            .cloned()
            .unwrap_or_else(|| Tensor::ones(g.shape(out)));
        let wv = g.constant(w);
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        let gs: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect();
        (g.value(loss).item().unwrap(), gs)
    };
    // output shape for the weights
    let out_shape = {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.shape(out).to_vec()
    };
    let weights = random(&out_shape, &mut rng);
    let (_, analytic) = eval(&inputs, Some(&weights));
    for (k, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= STEP;
            let numeric =
                (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * STEP);
            let a = analytic[k].data()[j];
            assert!(
                rel_err(a, numeric) < REL_TOL,
                "input {} coord {}: analytic {} numeric {}",
                k,
                j,
                a,
                numeric
            );
        }
    }
}

#[test]
fn gradcheck_matmul_and_batched() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    gradcheck(
        vec![random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)],
        2,
        |g, v| g.matmul(v[0], v[1]).unwrap(),
    );
    gradcheck(
        vec![random(&[2, 3, 4], &mut rng), random(&[2, 5, 4], &mut rng)],
        3,
        |g, v| g.matmul_bt(v[0], v[1]).unwrap(),
    );
    gradcheck(
        vec![random(&[2, 3, 4], &mut rng), random(&[2, 4, 2], &mut rng)],
        4,
        |g, v| g.matmul(v[0], v[1]).unwrap(),
    );
}

#[test]
fn matmul_sum_gradient_is_row_sums_of_b() {
    // d/dA sum(A B) = 1 * B^T, i.e. every row equals the row sums of B
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let mut g = Graph::<f64>::new();
    let va = g.param(a);
    let vb = g.constant(b.clone());
    let c = g.matmul(va, vb).unwrap();
    let s = g.sum(c).unwrap();
    let grads = g.backward(s).unwrap();
    let ga = grads.get(va).unwrap();
    for row in ga.data().chunks(4) {
        for (p, &v) in row.iter().enumerate() {
            let want = b.data()[p * 2] + b.data()[p * 2 + 1];
            assert!((v - want).abs() < 1e-12);
        }
    }
}

#[test]
fn gradcheck_elementwise_and_structural() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    gradcheck(
        vec![random(&[2, 3, 4], &mut rng), random(&[3, 4], &mut rng)],
        7,
        |g, v| g.add(v[0], v[1]).unwrap(),
    );
    gradcheck(
        vec![random(&[5], &mut rng), random(&[5], &mut rng)],
        8,
        |g, v| g.mul(v[0], v[1]).unwrap(),
    );
    gradcheck(vec![random(&[2, 3, 4], &mut rng)], 9, |g, v| {
        g.permute(v[0], &[2, 0, 1]).unwrap()
    });
    gradcheck(vec![random(&[2, 3, 4], &mut rng)], 10, |g, v| {
        g.narrow(v[0], 1, 1, 2).unwrap()
    });
    gradcheck(
        vec![random(&[2, 1, 3], &mut rng), random(&[2, 4, 3], &mut rng)],
        11,
        |g, v| g.concat(v[0], v[1], 1).unwrap(),
    );
    gradcheck(vec![random(&[2, 6], &mut rng)], 12, |g, v| {
        g.reshape(v[0], &[3, 4]).unwrap()
    });
    gradcheck(vec![random(&[3, 5], &mut rng)], 13, |g, v| {
        g.softmax(v[0]).unwrap()
    });
    gradcheck(vec![random(&[3, 5], &mut rng)], 14, |g, v| {
        g.gelu(v[0]).unwrap()
    });
    gradcheck(
        vec![random(&[4, 3], &mut rng), random(&[4, 3], &mut rng)],
        15,
        |g, v| g.mse(v[0], v[1]).unwrap(),
    );
    gradcheck(vec![random(&[4, 4], &mut rng)], 16, |g, v| {
        let mask: Vec<bool> = (0..16).map(|i| i % 4 > i / 4).collect();
        let m = g.masked_fill(v[0], &mask, -1e9).unwrap();
        g.softmax(m).unwrap()
    });
    // keep relu inputs away from the kink
    let x = Tensor::from_fn(&[10], |i| {
        if i % 2 == 0 {
            0.3 + i as f64 * 0.1
        } else {
            -0.2 - i as f64 * 0.1
        }
    });
    gradcheck(vec![x], 17, |g, v| g.relu(v[0]).unwrap());
}

#[test]
fn gradcheck_dropout_with_fixed_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    gradcheck(vec![random(&[20], &mut rng)], 19, |g, v| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
        g.dropout(v[0], 0.3, true, &mut mask_rng).unwrap()
    });
}

#[test]
fn gradcheck_convolutions_pooling_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    gradcheck(
        vec![
            random(&[2, 2, 4, 4], &mut rng),
            random(&[3, 2, 3, 3], &mut rng),
        ],
        21,
        |g, v| g.conv2d(v[0], v[1]).unwrap(),
    );
    gradcheck(
        vec![
            random(&[1, 2, 6, 4], &mut rng),
            random(&[3, 2, 3, 3], &mut rng),
        ],
        22,
        |g, v| g.conv2d_strided(v[0], v[1], 2).unwrap(),
    );
    gradcheck(
        vec![
            random(&[2, 2, 2, 3], &mut rng),
            random(&[2, 3, 3, 3], &mut rng),
        ],
        23,
        |g, v| g.conv2d_transposed(v[0], v[1], 2).unwrap(),
    );
    gradcheck(
        vec![random(&[2, 3, 2, 2], &mut rng), random(&[3], &mut rng)],
        24,
        |g, v| g.channel_bias(v[0], v[1]).unwrap(),
    );
    gradcheck(vec![random(&[2, 2, 4, 4], &mut rng)], 25, |g, v| {
        g.pool2d(v[0], PoolKind::Average).unwrap()
    });
    gradcheck(vec![random(&[2, 2, 4, 4], &mut rng)], 26, |g, v| {
        g.pool2d(v[0], PoolKind::Max).unwrap()
    });
    gradcheck(
        vec![
            random(&[2, 4, 3, 2], &mut rng),
            random(&[4], &mut rng),
            random(&[4], &mut rng),
        ],
        27,
        |g, v| g.group_norm(v[0], 2, v[1], v[2]).unwrap(),
    );
    gradcheck(
        vec![
            random(&[3, 6], &mut rng),
            random(&[6], &mut rng),
            random(&[6], &mut rng),
        ],
        28,
        |g, v| g.layer_norm(v[0], v[1], v[2]).unwrap(),
    );
}

/// Direct six-loop cross-correlation with zero padding 1.
fn naive_conv(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: &[f64],
    c_out: usize,
    stride: usize,
) -> Vec<f64> {
    let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    let mut out = vec![0.0; c_out * ho * wo];
    for co in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for ci in 0..c_in {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * stride + ky) as isize - 1;
                            let ix = (ox * stride + kx) as isize - 1;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                s += x[(ci * h + iy as usize) * w + ix as usize]
                                    * k[((co * c_in + ci) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = s;
            }
        }
    }
    out
}

/// Scatter-add transposed convolution: every input pixel spreads its value
/// through the kernel onto the upsampled grid.
fn naive_conv_transposed(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: &[f64],
    c_out: usize,
) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; c_out * ho * wo];
    for ci in 0..c_in {
        for iy in 0..h {
            for ix in 0..w {
                let v = x[(ci * h + iy) * w + ix];
                for co in 0..c_out {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let oy = (2 * iy + ky) as isize - 1;
                            let ox = (2 * ix + kx) as isize - 1;
                            if oy >= 0 && ox >= 0 && (oy as usize) < ho && (ox as usize) < wo {
                                out[(co * ho + oy as usize) * wo + ox as usize] +=
                                    v * k[((ci * c_out + co) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let x = random(&[2, 5, 5], &mut rng);
    let k = random(&[3, 2, 3, 3], &mut rng);
    let mut g = Graph::<f64>::new();
    let (vx, vk) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g.conv2d(vx, vk).unwrap();
    let want = naive_conv(x.data(), 2, 5, 5, k.data(), 3, 1);
    for (a, b) in g.value(y).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-6);
    }
    // f32 path against the f64 oracle
    let mut g32 = Graph::<f32>::new();
    let (vx, vk) = (g32.constant(x.cast()), g32.constant(k.cast()));
    let y = g32.conv2d(vx, vk).unwrap();
    for (a, b) in g32.value(y).data().iter().zip(&want) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }
}

#[test]
fn conv2d_transposed_matches_scatter_add() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = random(&[2, 3, 4], &mut rng);
    let k = random(&[2, 3, 3, 3], &mut rng);
    let mut g = Graph::<f64>::new();
    let (vx, vk) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g.conv2d_transposed(vx, vk, 2).unwrap();
    assert_eq!(g.shape(y), &[3, 6, 8]);
    let want = naive_conv_transposed(x.data(), 2, 3, 4, k.data(), 3);
    for (a, b) in g.value(y).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn group_norm_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let (c, h, w, groups) = (4, 3, 5, 2);
    let x = random(&[c, h, w], &mut rng);
    let gain = random(&[c], &mut rng);
    let bias = random(&[c], &mut rng);
    let mut g = Graph::<f64>::new();
    let (vx, vg, vb) = (
        g.constant(x.clone()),
        g.constant(gain.clone()),
        g.constant(bias.clone()),
    );
    let y = g.group_norm(vx, groups, vg, vb).unwrap();
    let per = c / groups * h * w;
    for grp in 0..groups {
        let chunk = &x.data()[grp * per..][..per];
        let mean = chunk.iter().sum::<f64>() / per as f64;
        let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
        for (j, v) in chunk.iter().enumerate() {
            let ch = grp * (c / groups) + j / (h * w);
            let want = (v - mean) / (var + 1e-5).sqrt() * gain.data()[ch] + bias.data()[ch];
            assert!((g.value(y).data()[grp * per + j] - want).abs() < 1e-5);
        }
    }

    // unit gain, zero bias: per-group mean 0, variance 1
    let (vg, vb) = (
        g.constant(Tensor::ones(&[c])),
        g.constant(Tensor::zeros(&[c])),
    );
    let y = g.group_norm(vx, groups, vg, vb).unwrap();
    for chunk in g.value(y).data().chunks(per) {
        let mean = chunk.iter().sum::<f64>() / per as f64;
        let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
        assert!(
            mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4,
            "{} {}",
            mean,
            var
        );
    }
}

#[test]
fn layer_norm_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let x = random(&[4, 7], &mut rng);
    let gain = random(&[7], &mut rng);
    let bias = random(&[7], &mut rng);
    let mut g = Graph::<f64>::new();
    let (vx, vg, vb) = (
        g.constant(x.clone()),
        g.constant(gain.clone()),
        g.constant(bias.clone()),
    );
    let y = g.layer_norm(vx, vg, vb).unwrap();
    for (r, row) in x.data().chunks(7).enumerate() {
        let mean = row.iter().sum::<f64>() / 7.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        for (j, v) in row.iter().enumerate() {
            let want = (v - mean) / (var + 1e-5).sqrt() * gain.data()[j] + bias.data()[j];
            assert!((g.value(y).data()[r * 7 + j] - want).abs() < 1e-5);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn strided_conv_and_transposed_conv_are_adjoint(
        seed in any::<u64>(),
        c_in in 1usize..4,
        c_out in 1usize..4,
        h in 1usize..5,
        w in 1usize..5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // conv maps [c_out, 2h, 2w] -> [c_in, h, w]; its adjoint maps back
        let k = random(&[c_in, c_out, 3, 3], &mut rng);
        let x = random(&[c_out, 2 * h, 2 * w], &mut rng);
        let y = random(&[c_in, h, w], &mut rng);
        let mut g = Graph::<f64>::new();
        let (vk, vx, vy) = (g.constant(k), g.constant(x.clone()), g.constant(y.clone()));
        let cx = g.conv2d_strided(vx, vk, 2).unwrap();
        let ty = g.conv2d_transposed(vy, vk, 2).unwrap();
        let lhs = dot(g.value(cx).data(), y.data());
        let rhs = dot(x.data(), g.value(ty).data());
        prop_assert!((lhs - rhs).abs() < 1e-4, "{} vs {}", lhs, rhs);
    }

    #[test]
    fn softmax_is_shift_invariant(row in proptest::collection::vec(-50.0f64..50.0, 1..12), shift in -100.0f64..100.0) {
        let n = row.len();
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(&[n], row.clone()).unwrap());
        let b = g.constant(Tensor::new(&[n], row.iter().map(|v| v + shift).collect()).unwrap());
        let sa = g.softmax(a).unwrap();
        let sb = g.softmax(b).unwrap();
        let total: f64 = g.value(sa).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(g.value(sa).max_abs_diff(g.value(sb)).unwrap() < 1e-6);
    }

    #[test]
    fn group_norm_core_invariant_under_affine_rescaling(seed in any::<u64>(), scale in 1.0f64..4.0, shift in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[4, 3, 3], &mut rng).map(|v| 3.0 * v);
        let x2 = x.map(|v| v * scale + shift);
        let mut g = Graph::<f64>::new();
        let (vg, vb) = (g.constant(Tensor::ones(&[4])), g.constant(Tensor::zeros(&[4])));
        let (a, b) = (g.constant(x), g.constant(x2));
        let na = g.group_norm(a, 2, vg, vb).unwrap();
        let nb = g.group_norm(b, 2, vg, vb).unwrap();
        prop_assert!(g.value(na).max_abs_diff(g.value(nb)).unwrap() < 1e-4);

        // rows wide enough that epsilon is negligible
        let rows = g.constant(random(&[4, 8], &mut rng).map(|v| 3.0 * v));
        let (lg, lb) = (g.constant(Tensor::ones(&[8])), g.constant(Tensor::zeros(&[8])));
        let la = g.layer_norm(rows, lg, lb).unwrap();
        let a2 = g.scale(rows, 2.0).unwrap();
        let la2 = g.layer_norm(a2, lg, lb).unwrap();
        prop_assert!(g.value(la).max_abs_diff(g.value(la2)).unwrap() < 1e-4);
    }

    #[test]
    fn forward_ops_are_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 2, 4, 4], &mut rng).cast::<f32>();
        let k = random(&[3, 2, 3, 3], &mut rng).cast::<f32>();
        let run = || {
            let mut g = Graph::<f32>::new();
            let (vx, vk) = (g.constant(x.clone()), g.constant(k.clone()));
            let y = g.conv2d(vx, vk).unwrap();
            let mut drng = ChaCha8Rng::seed_from_u64(seed);
            let d = g.dropout(y, 0.1, true, &mut drng).unwrap();
            g.value(d).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
