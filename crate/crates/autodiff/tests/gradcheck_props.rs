//! Finite-difference verification of every registered primitive on
//! randomized small shapes, float64, 20+ trials each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tnas_autodiff::{
    bmm, concat, conv2d, cross_entropy, embed, norm_feature, norm_spatial, tape_grad_check,
    Alignment, Conv2dSpec, Tape, Tensor, Var,
};

const TRIALS: usize = 20;
const TOL: f64 = 1e-6;

fn randn(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 0.8, rng)
}

fn check_all<F>(name: &str, mut gen: F)
where
    F: FnMut(&mut ChaCha8Rng) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let err = gen(&mut rng);
        if err > worst {
            worst = err;
        }
    }
    assert!(worst < TOL, "{name}: max rel err {worst} over {TRIALS} trials");
}

#[test]
fn matmul_grads() {
    check_all("matmul", |rng| {
        let m = rng.gen_range(1..5);
        let k = rng.gen_range(1..6);
        let n = rng.gen_range(1..5);
        let a = randn(vec![m, k], rng);
        let b = randn(vec![k, n], rng);
        tape_grad_check(
            |_tape, vars| vars[0].matmul(&vars[1])?.mul(&vars[0].matmul(&vars[1])?)?.sum().into_ok(),
            &[a, b],
            1e-5,
        )
        .unwrap()
    });
}

trait IntoOk {
    fn into_ok(self) -> tnas_autodiff::Result<Var<f64>>;
}
impl IntoOk for Var<f64> {
    fn into_ok(self) -> tnas_autodiff::Result<Var<f64>> {
        Ok(self)
    }
}

#[test]
fn matmul_bt_grads() {
    check_all("matmul_bt", |rng| {
        let m = rng.gen_range(1..5);
        let k = rng.gen_range(1..6);
        let n = rng.gen_range(1..5);
        let a = randn(vec![m, k], rng);
        let w = randn(vec![n, k], rng);
        tape_grad_check(
            |_t, vars| vars[0].matmul_bt(&vars[1])?.gelu().sum().into_ok(),
            &[a, w],
            1e-5,
        )
        .unwrap()
    });
}

#[test]
fn bmm_grads() {
    check_all("bmm", |rng| {
        let b = rng.gen_range(1..4);
        let m = rng.gen_range(1..4);
        let k = rng.gen_range(1..5);
        let n = rng.gen_range(1..4);
        let tb = rng.gen_bool(0.5);
        let a = randn(vec![b, m, k], rng);
        let bb = if tb {
            randn(vec![b, n, k], rng)
        } else {
            randn(vec![b, k, n], rng)
        };
        tape_grad_check(
            move |_t, vars| bmm(&vars[0], &vars[1], tb)?.relu().sum().into_ok(),
            &[a, bb],
            1e-5,
        )
        .unwrap()
    });
}

#[test]
fn conv2d_grads() {
    check_all("conv2d", |rng| {
        let n = rng.gen_range(1..3);
        let cin = rng.gen_range(1..4);
        let cout = rng.gen_range(1..4);
        let k: usize = *[1usize, 3, 5].get(rng.gen_range(0..3)).unwrap();
        let h = rng.gen_range(k.max(3)..8);
        let stride = rng.gen_range(1..3);
        let padding = rng.gen_range(0..=k / 2 + 1);
        let dilation = 1 + usize::from(k > 1 && rng.gen_bool(0.3));
        let span = dilation * (k - 1) + 1;
        if h + 2 * padding < span {
            return 0.0;
        }
        let x = randn(vec![n, cin, h, h], rng);
        let kernel = randn(vec![cout, cin, k, k], rng);
        let spec = Conv2dSpec {
            stride,
            dilation,
            padding,
            groups: 1,
        };
        tape_grad_check(
            move |_t, vars| conv2d(&vars[0], &vars[1], spec)?.gelu().sum().into_ok(),
            &[x, kernel],
            1e-5,
        )
        .unwrap()
    });
}

#[test]
fn depthwise_conv2d_grads() {
    check_all("depthwise conv2d", |rng| {
        let c = rng.gen_range(1..4);
        let h = rng.gen_range(4..8);
        let x = randn(vec![1, c, h, h], rng);
        let kernel = randn(vec![c, 1, 3, 3], rng);
        let spec = Conv2dSpec {
            stride: 1,
            dilation: 1,
            padding: 1,
            groups: c,
        };
        tape_grad_check(
            move |_t, vars| conv2d(&vars[0], &vars[1], spec)?.relu().sum().into_ok(),
            &[x, kernel],
            1e-5,
        )
        .unwrap()
    });
}

#[test]
fn pad_slice_softmax_grads() {
    check_all("zero_pad/slice/softmax", |rng| {
        let x = randn(vec![3, 3], rng);
        tape_grad_check(
            |_t, vars| {
                let padded = vars[0].zero_pad(&[5, 7], &[Alignment::Centered, Alignment::Leading])?;
                let sliced = padded.slice_view(&[1, 0], &[3, 4])?;
                sliced.softmax(1)?.mul(&sliced.softmax(1)?)?.sum().into_ok()
            },
            &[x],
            1e-5,
        )
        .unwrap()
    });
}

#[test]
fn elementwise_grads() {
    check_all("elementwise", |rng| {
        let n = rng.gen_range(2..8);
        let a = randn(vec![n], rng);
        let b = randn(vec![n], rng);
        tape_grad_check(
            |_t, vars| {
                let y = vars[0]
                    .mul(&vars[1])?
                    .add(&vars[0].gelu())?
                    .relu()
                    .add(&vars[1].softplus())?
                    .scale(0.7);
                y.mean().into_ok()
            },
            &[a, b],
            1e-5,
        )
        .unwrap()
    });
}

#[test]
fn cross_entropy_grads() {
    check_all("cross_entropy", |rng| {
        let rows = rng.gen_range(1..5);
        let classes = rng.gen_range(2..6);
        let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..classes)).collect();
        let logits = randn(vec![rows, classes], rng);
        tape_grad_check(
            move |_t, vars| cross_entropy(&vars[0], &labels),
            &[logits],
            1e-5,
        )
        .unwrap()
    });
}

#[test]
fn concat_reshape_permute_grads() {
    check_all("concat/reshape/permute", |rng| {
        let a = randn(vec![2, 3], rng);
        let b = randn(vec![2, 2], rng);
        tape_grad_check(
            |_t, vars| {
                let c = concat(&[vars[0].clone(), vars[1].clone()], 1)?; // [2,5]
                let r = c.reshape(vec![5, 2])?;
                let p = r.permute(&[1, 0])?;
                p.gelu().sum().into_ok()
            },
            &[a, b],
            1e-5,
        )
        .unwrap()
    });
}

#[test]
fn norm_feature_grads() {
    check_all("norm_feature", |rng| {
        let rows = rng.gen_range(1..4);
        let d = rng.gen_range(2..6);
        let x = randn(vec![rows, d], rng);
        let gamma = randn(vec![d], rng);
        let beta = randn(vec![d], rng);
        let count = d as f64;
        tape_grad_check(
            move |tape, vars| {
                let cnt = tape.scalar_const(count);
                norm_feature(&vars[0], &vars[1], &vars[2], &cnt, 1e-5)?.sum().into_ok()
            },
            &[x, gamma, beta],
            1e-5,
        )
        .unwrap()
    });
}

#[test]
fn norm_feature_soft_count_grad() {
    // The element count itself is differentiable (soft active width). The
    // op's contract: entries past the active width are zero, so the row
    // moments computed with the soft count stay valid.
    check_all("norm_feature count", |rng| {
        let d = 6;
        let active = 4;
        let mut x = randn(vec![2, d], rng);
        for r in 0..2 {
            for j in active..d {
                x.values_mut()[r * d + j] = 0.0;
            }
        }
        let gamma = randn(vec![d], rng);
        let beta = randn(vec![d], rng);
        let count = Tensor::from_vec(vec![1], vec![rng.gen_range(3.7..4.3)]).unwrap();
        tape_grad_check(
            |_t, vars| {
                norm_feature(&vars[0], &vars[1], &vars[2], &vars[3], 1e-5)?
                    .mul(&vars[0].scale(1.0))?
                    .sum()
                    .into_ok()
            },
            &[x, gamma, beta, count],
            1e-5,
        )
        .unwrap()
    });
}

#[test]
fn norm_spatial_grads() {
    check_all("norm_spatial", |rng| {
        let n = rng.gen_range(1..3);
        let c = rng.gen_range(1..4);
        let h = rng.gen_range(2..5);
        let x = randn(vec![n, c, h, h], rng);
        let gamma = randn(vec![c], rng);
        let beta = randn(vec![c], rng);
        tape_grad_check(
            |_t, vars| norm_spatial(&vars[0], &vars[1], &vars[2], 1e-5)?.sum().into_ok(),
            &[x, gamma, beta],
            1e-5,
        )
        .unwrap()
    });
}

#[test]
fn embed_and_bias_grads() {
    check_all("embed/add_row/add_chan_bias", |rng| {
        let v = rng.gen_range(3..7);
        let e = rng.gen_range(2..5);
        let ids: Vec<usize> = (0..4).map(|_| rng.gen_range(0..v)).collect();
        let table = randn(vec![v, e], rng);
        let bias = randn(vec![e], rng);
        tape_grad_check(
            move |_t, vars| embed(&vars[0], &ids)?.add_row(&vars[1])?.gelu().sum().into_ok(),
            &[table, bias],
            1e-5,
        )
        .unwrap()
    });
    check_all("add_chan_bias", |rng| {
        let x = randn(vec![2, 3, 2, 2], rng);
        let b = randn(vec![3], rng);
        tape_grad_check(
            |_t, vars| {
                vars[0]
                    .add_chan_bias(&vars[1])?
                    .global_avg_pool()?
                    .gelu()
                    .sum()
                    .into_ok()
            },
            &[x, b],
            1e-5,
        )
        .unwrap()
    });
}

#[test]
fn scalar_mix_and_normalize_grads() {
    check_all("mul_scalar_var/normalize_sum", |rng| {
        let n = rng.gen_range(2..6);
        let x = randn(vec![n], rng);
        let w = Tensor::from_vec(
            vec![3],
            (0..3).map(|_| rng.gen_range(0.1..2.0)).collect(),
        )
        .unwrap();
        tape_grad_check(
            |_t, vars| {
                let mix = vars[1].softplus().normalize_sum();
                let w0 = mix.slice_view(&[0], &[1])?;
                let w1 = mix.slice_view(&[1], &[1])?;
                let y = vars[0]
                    .mul_scalar_var(&w0)?
                    .add(&vars[0].gelu().mul_scalar_var(&w1)?)?;
                y.sum().into_ok()
            },
            &[x, w],
            1e-5,
        )
        .unwrap()
    });
}

#[test]
fn causal_mask_attention_grads() {
    check_all("causal attention block", |rng| {
        let b = 1;
        let t = rng.gen_range(2..4);
        let d = rng.gen_range(2..4);
        let q = randn(vec![b, t, d], rng);
        let k = randn(vec![b, t, d], rng);
        let v = randn(vec![b, t, d], rng);
        tape_grad_check(
            |_t, vars| {
                let scores = bmm(&vars[0], &vars[1], true)?.scale(0.5);
                let probs = scores.causal_mask()?.softmax(2)?;
                bmm(&probs, &vars[2], false)?.sum().into_ok()
            },
            &[q, k, v],
            1e-5,
        )
        .unwrap()
    });
}

#[test]
fn two_layer_composite_matches_finite_differences() {
    // Composite two-layer network: the end-to-end adjoints agree with
    // central differences below 1e-6.
    check_all("two-layer net", |rng| {
        let x = randn(vec![3, 4], rng);
        let w1 = randn(vec![5, 4], rng);
        let b1 = randn(vec![5], rng);
        let w2 = randn(vec![2, 5], rng);
        let labels = vec![0usize, 1, 0];
        tape_grad_check(
            move |_t, vars| {
                let h = vars[0].matmul_bt(&vars[1])?.add_row(&vars[2])?.gelu();
                let logits = h.matmul_bt(&vars[3])?;
                cross_entropy(&logits, &labels)
            },
            &[x, w1, b1, w2],
            1e-5,
        )
        .unwrap()
    });
}

#[test]
fn gamma_reparam_pathwise_grads() {
    // Fixed noise: re-seeding the rng identically per evaluation keeps the
    // accepted draws constant, so finite differences see the transformation.
    check_all("gamma_reparam", |rng| {
        let n = rng.gen_range(2..5);
        let c = Tensor::from_vec(
            vec![n],
            (0..n).map(|_| rng.gen_range(0.3..4.0)).collect(),
        )
        .unwrap();
        let noise_seed = rng.gen::<u64>();
        tape_grad_check(
            move |_t, vars| {
                let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
                let z = tnas_autodiff::gamma_reparam(&vars[0], &mut noise_rng)?;
                z.normalize_sum().mul(&z.normalize_sum())?.sum().into_ok()
            },
            &[c],
            1e-5,
        )
        .unwrap()
    });
}

#[test]
fn gumbel_soft_path_grads() {
    // The straight-through estimator's backward is the softmax Jacobian; the
    // forward one-hot is non-differentiable by design, so compare against the
    // soft surrogate loss instead.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..TRIALS {
        let n = rng.gen_range(2..5);
        let alpha = Tensor::randn(vec![n], 1.0, &mut rng).with_grad();
        let tau = 0.7;
        let noise_seed: u64 = rng.gen();

        // Analytic grad through the straight-through op with linear loss sum(w * y).
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let a = tape.leaf(&alpha);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let y = tnas_autodiff::gumbel_straight_through(&a, tau, &mut noise_rng).unwrap();
        let wv = tape.constant_from(vec![n], weights.clone());
        let loss = y.mul(&wv).unwrap().sum();
        let mut grads = tape.backward(&loss).unwrap();
        let analytic = grads.take(&a).unwrap();

        // Oracle: grad of sum(w * softmax((alpha+g)/tau)) with the same noise.
        let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let g: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = noise_rng.gen_range(f64::MIN_POSITIVE..1.0);
                -(-u.ln()).ln()
            })
            .collect();
        let logits: Vec<f64> = alpha
            .values()
            .iter()
            .zip(&g)
            .map(|(a, g)| (a + g) / tau)
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let soft: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let dot: f64 = weights.iter().zip(&soft).map(|(w, s)| w * s).sum();
        for i in 0..n {
            let expected = soft[i] * (weights[i] - dot) / tau;
            assert!(
                (analytic[i] - expected).abs() < 1e-9,
                "gumbel grad {i}: {} vs {}",
                analytic[i],
                expected
            );
        }
    }
}
