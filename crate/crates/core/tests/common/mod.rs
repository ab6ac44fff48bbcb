//! Finite-difference sweep over every differentiable tape primitive,
//! shared by the gradient tests and the acceptance gate.

#![allow(dead_code)]

use codebrain::numerics::{finite_diff_check, Tape, Tensor, Var};
use codebrain::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const POINTS: usize = 10;
pub const EPS: f64 = 1e-4;

/// Fixed pseudo-random weights so the scalar objective exercises every
/// output coordinate differently (a plain sum hides normalization bugs).
pub fn weighted_sum(t: &mut Tape, y: Var) -> Var {
    let n = t.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin() + 0.1).collect();
    let shape = t.shape(y).to_vec();
    let wv = t.constant_from(shape, w);
    let p = t.mul(y, wv);
    t.sum_all(p)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32, min_abs: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f32 = rng.random_range(-scale..scale);
            if v.abs() >= min_abs {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Case = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>;

/// Wraps a one-input objective: the closure receives the differentiable
/// input and a tape-resident constant built per point.
fn case<F>(shape: &'static [usize], scale: f32, min_abs: f32, f: F) -> Case
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Clone + 'static,
{
    Box::new(move |rng| {
        let p = random_tensor(rng, shape, scale, min_abs);
        finite_diff_check(f.clone(), &p, EPS)
    })
}

/// Two-operand objective checked against each operand in turn, the other
/// held constant.
fn case2<F>(sa: &'static [usize], sb: &'static [usize], scale: f32, min_abs: f32, f: F) -> Case
where
    F: Fn(&mut Tape, Var, Var) -> Result<Var> + Clone + 'static,
{
    Box::new(move |rng| {
        let a = random_tensor(rng, sa, scale, min_abs);
        let b = random_tensor(rng, sb, scale, min_abs);
        let (fa, bb) = (f.clone(), b.clone());
        let ea = finite_diff_check(
            move |t, x| {
                let c = t.constant(&bb);
                fa(t, x, c)
            },
            &a,
            EPS,
        )?;
        let (fb, aa) = (f.clone(), a.clone());
        let eb = finite_diff_check(
            move |t, x| {
                let c = t.constant(&aa);
                fb(t, c, x)
            },
            &b,
            EPS,
        )?;
        Ok(ea.max(eb))
    })
}

fn attention_case(heads: usize, group: usize, half: Option<usize>) -> Case {
    Box::new(move |rng| {
        let shape = [2 * group, 4];
        let parts: Vec<Tensor> = (0..3).map(|_| random_tensor(rng, &shape, 1.0, 0.0)).collect();
        let mut worst = 0f64;
        for slot in 0..3 {
            let others = parts.clone();
            let e = finite_diff_check(
                move |t, x| {
                    let mut vars: Vec<Var> = others.iter().map(|p| t.constant(p)).collect();
                    vars[slot] = x;
                    let y = t.attention(vars[0], vars[1], vars[2], heads, group, half);
                    Ok(weighted_sum(t, y))
                },
                &parts[slot],
                EPS,
            )?;
            worst = worst.max(e);
        }
        Ok(worst)
    })
}

fn conv1d_case() -> Case {
    Box::new(|rng| {
        let x = random_tensor(rng, &[2, 2, 12], 1.0, 0.0);
        let w = random_tensor(rng, &[3, 2, 3], 1.0, 0.0);
        let b = random_tensor(rng, &[3], 1.0, 0.0);
        let parts = vec![x, w, b];
        let mut worst = 0f64;
        for slot in 0..3 {
            let others = parts.clone();
            let e = finite_diff_check(
                move |t, v| {
                    let mut vars: Vec<Var> = others.iter().map(|p| t.constant(p)).collect();
                    vars[slot] = v;
                    let y = t.conv1d(vars[0], vars[1], vars[2], 2, 1);
                    Ok(weighted_sum(t, y))
                },
                &parts[slot],
                EPS,
            )?;
            worst = worst.max(e);
        }
        Ok(worst)
    })
}

fn norm_case(kind: u8) -> Case {
    Box::new(move |rng| {
        let x = random_tensor(rng, &[3, 5], 1.5, 0.0);
        let g = random_tensor(rng, &[5], 1.0, 0.2);
        let b = random_tensor(rng, &[5], 1.0, 0.0);
        let parts = if kind == 0 { vec![x, g] } else { vec![x, g, b] };
        let mut worst = 0f64;
        for slot in 0..parts.len() {
            let others = parts.clone();
            let e = finite_diff_check(
                move |t, v| {
                    let mut vars: Vec<Var> = others.iter().map(|p| t.constant(p)).collect();
                    vars[slot] = v;
                    let y = if kind == 0 {
                        t.rms_norm(vars[0], vars[1])
                    } else {
                        t.layer_norm(vars[0], vars[1], vars[2])
                    };
                    Ok(weighted_sum(t, y))
                },
                &parts[slot],
                EPS,
            )?;
            worst = worst.max(e);
        }
        Ok(worst)
    })
}

/// `(name, worst relative error over POINTS random points)` per primitive.
pub fn primitive_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let cases: Vec<(&'static str, Case)> = vec![
        ("add", case2(&[3, 4], &[3, 4], 1.0, 0.0, |t, a, b| {
            let y = t.add(a, b);
            Ok(weighted_sum(t, y))
        })),
        ("sub", case2(&[3, 4], &[3, 4], 1.0, 0.0, |t, a, b| {
            let y = t.sub(a, b);
            Ok(weighted_sum(t, y))
        })),
        ("mul", case2(&[3, 4], &[3, 4], 1.0, 0.0, |t, a, b| {
            let y = t.mul(a, b);
            Ok(weighted_sum(t, y))
        })),
        ("add_row", case2(&[3, 4], &[4], 1.0, 0.0, |t, a, b| {
            let y = t.add_row(a, b);
            Ok(weighted_sum(t, y))
        })),
        ("mul_row", case2(&[3, 4], &[4], 1.0, 0.0, |t, a, b| {
            let y = t.mul_row(a, b);
            Ok(weighted_sum(t, y))
        })),
        ("scale", case(&[3, 4], 1.0, 0.0, |t, x| {
            let y = t.scale(x, -1.7);
            Ok(weighted_sum(t, y))
        })),
        ("matmul", case2(&[2, 3, 4], &[4, 5], 1.0, 0.0, |t, a, b| {
            let y = t.matmul(a, b);
            Ok(weighted_sum(t, y))
        })),
        ("transpose", case(&[3, 4], 1.0, 0.0, |t, x| {
            let y = t.transpose(x);
            Ok(weighted_sum(t, y))
        })),
        ("reshape", case(&[3, 4], 1.0, 0.0, |t, x| {
            let y = t.reshape(x, vec![2, 6]);
            let y = t.slice_rows(y, 1, 1);
            Ok(weighted_sum(t, y))
        })),
        ("concat_cols", case2(&[3, 2], &[3, 4], 1.0, 0.0, |t, a, b| {
            let y = t.concat_cols(&[a, b, a]);
            Ok(weighted_sum(t, y))
        })),
        ("concat_rows", case2(&[2, 3], &[4, 3], 1.0, 0.0, |t, a, b| {
            let y = t.concat_rows(&[b, a]);
            Ok(weighted_sum(t, y))
        })),
        ("slice_rows", case(&[5, 3], 1.0, 0.0, |t, x| {
            let y = t.slice_rows(x, 1, 3);
            Ok(weighted_sum(t, y))
        })),
        ("slice_cols", case(&[3, 5], 1.0, 0.0, |t, x| {
            let y = t.slice_cols(x, 2, 2);
            Ok(weighted_sum(t, y))
        })),
        ("gather_rows", case(&[4, 3], 1.0, 0.0, |t, x| {
            let y = t.gather_rows(x, &[3, 0, 3, 1, 3]);
            Ok(weighted_sum(t, y))
        })),
        ("tanh", case(&[3, 4], 2.0, 0.0, |t, x| {
            let y = t.tanh(x);
            Ok(weighted_sum(t, y))
        })),
        ("sigmoid", case(&[3, 4], 3.0, 0.0, |t, x| {
            let y = t.sigmoid(x);
            Ok(weighted_sum(t, y))
        })),
        ("relu", case(&[3, 4], 1.0, 0.05, |t, x| {
            let y = t.relu(x);
            Ok(weighted_sum(t, y))
        })),
        ("elu", case(&[3, 4], 2.0, 0.05, |t, x| {
            let y = t.elu(x);
            Ok(weighted_sum(t, y))
        })),
        ("gelu", case(&[3, 4], 3.0, 0.0, |t, x| {
            let y = t.gelu(x);
            Ok(weighted_sum(t, y))
        })),
        ("sum_all", case(&[3, 4], 1.0, 0.0, |t, x| {
            let s = t.mul(x, x);
            Ok(t.sum_all(s))
        })),
        ("mean_all", case(&[3, 4], 1.0, 0.0, |t, x| {
            let s = t.mul(x, x);
            Ok(t.mean_all(s))
        })),
        ("group_mean_rows", case(&[6, 3], 1.0, 0.0, |t, x| {
            let y = t.group_mean_rows(x, 3);
            Ok(weighted_sum(t, y))
        })),
        ("rms_norm", norm_case(0)),
        ("layer_norm", norm_case(1)),
        ("l2_normalize_rows", case(&[3, 4], 1.0, 0.0, |t, x| {
            let y = t.l2_normalize_rows(x);
            Ok(weighted_sum(t, y))
        })),
        ("cross_entropy", case(&[4, 6], 3.0, 0.0, |t, x| {
            t.cross_entropy(x, &[0, 5, 2, 2], &[1.0, 0.5, 0.0, 2.0])
        })),
        ("sum_sq_diff", case2(&[3, 4], &[3, 4], 1.0, 0.0, |t, a, b| Ok(t.sum_sq_diff(a, b)))),
        ("attention_dense", attention_case(2, 5, None)),
        ("attention_window", attention_case(2, 6, Some(1))),
        ("causal_conv", case2(&[16, 3], &[8, 3], 1.0, 0.0, |t, u, k| {
            let y = t.causal_conv(u, k, 8)?;
            Ok(weighted_sum(t, y))
        })),
        ("normalize_l1_cols", case(&[5, 3], 1.0, 0.05, |t, x| {
            let y = t.normalize_l1_cols(x);
            Ok(weighted_sum(t, y))
        })),
        ("conv1d", conv1d_case()),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases
        .into_iter()
        .map(|(name, c)| {
            let worst = (0..POINTS)
                .map(|_| c(&mut rng).unwrap_or(f64::INFINITY))
                .fold(0f64, f64::max);
            (name, worst)
        })
        .collect()
}

pub fn tiny_ssm_config() -> codebrain::ssm::SsmConfig {
    codebrain::ssm::SsmConfig {
        patch_len: 6,
        features: 4,
        blocks: 1,
        kernel_len: 8,
        base_len: 2,
        alpha: 0.5,
        upsample: codebrain::ssm::Upsample::Nearest,
        window: 3,
        heads: 2,
        codebook_size: 5,
    }
}

/// Worst relative error over all parameters of one block, at `POINTS`
/// random parameter/input draws. The objective weights both the residual
/// and the skip output.
pub fn block_gradient_check(seed: u64) -> Result<f64> {
    use codebrain::nn::Rng64;
    use codebrain::numerics::check::finite_diff_check_params;
    use codebrain::numerics::ParamStore;
    use codebrain::ssm::EegssmBlock;

    let cfg = tiny_ssm_config();
    let mut worst = 0f64;
    for p in 0..POINTS as u64 {
        let mut rng = Rng64::seed_from_u64(seed * 1000 + p);
        let mut store = ParamStore::new();
        let block = EegssmBlock::new(&mut store, "b", &cfg, true, &mut rng)?;
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            let shift = if store.name(id).ends_with(".rms") { 1.0 } else { 0.0 };
            for v in store.get_mut(id).data_mut() {
                *v = shift + rng.random_range(-0.6f32..0.6);
            }
        }
        let x = random_tensor(&mut rng, &[2 * cfg.kernel_len, cfg.features], 1.0, 0.0);
        let err = finite_diff_check_params(
            &store,
            &ids,
            |t, s| {
                let xv = t.constant(&x);
                let (y, skip) = block.forward(t, s, xv, cfg.kernel_len)?;
                let a = weighted_sum(t, y);
                let b = weighted_sum(t, skip);
                Ok(t.add(a, b))
            },
            EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}
