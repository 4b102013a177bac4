//! Central-difference checks for every differentiable operation, transform and feature
//! loss. Each case maps a seed to the worst relative error it observed.

use featkd::distill::{feat_cwd_loss, feat_kl_loss, feat_l2_loss};
use featkd::nn::{TransformKind, TransformModule};
use featkd::tensor::{grad_check, Axes, Tape, Tensor, Var};
use featkd::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: [u64; 3] = [11, 22, 33];

pub struct Case {
    pub name: String,
    pub run: Box<dyn Fn(u64) -> Result<f64>>,
}

fn case(name: impl Into<String>, run: impl Fn(u64) -> Result<f64> + 'static) -> Case {
    Case {
        name: name.into(),
        run: Box::new(run),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal values pushed at least 0.05 away from zero, so ReLU kinks sit well
/// outside the finite-difference stencil.
fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, r).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

/// Contracts `y` against fixed random weights so every output element matters.
fn project(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, w)?;
    tape.sum(p, Axes::All)
}

/// Checks `op` with respect to its first argument, all other inputs fixed.
fn unary(
    seed: u64,
    shape: &[usize],
    out_shape: Option<&[usize]>,
    op: impl Fn(&mut Tape, Var) -> Result<Var>,
) -> Result<f64> {
    let mut r = rng(seed);
    let x = away_from_zero(shape, &mut r);
    let mut probe = Tape::new();
    let pv = probe.constant(x.clone());
    let y = op(&mut probe, pv)?;
    let w = Tensor::randn(out_shape.unwrap_or(probe.shape(y)), 1.0, &mut r);
    grad_check(
        |t, v| {
            let y = op(t, v)?;
            project(t, y, &w)
        },
        &x,
        EPS,
    )
}

/// Relative error of parameter gradients: analytic via the tape, numeric by perturbing
/// each stored parameter value.
pub fn transform_param_error(m: &TransformModule, x: &Tensor, weights: &Tensor) -> Result<f64> {
    let objective = |m: &TransformModule| -> Result<f64> {
        let y = m.apply(x)?;
        Ok(y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };
    let mut tape = Tape::new();
    let bound = m.params.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let y = m.forward(&mut tape, &bound, xv)?;
    let root = project(&mut tape, y, weights)?;
    tape.backward(root)?;
    let mut worst: f64 = 0.0;
    for (i, p) in m.params.iter().enumerate() {
        let analytic = tape
            .grad(bound.get(i))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        let mut numeric = Vec::with_capacity(p.value.len());
        for k in 0..p.value.len() {
            let mut probe = m.clone();
            let slot = &mut probe.params.iter_mut().nth(i).expect("param").value;
            let orig = slot.data()[k];
            slot.data_mut()[k] = orig + EPS;
            let plus = objective(&probe)?;
            let slot = &mut probe.params.iter_mut().nth(i).expect("param").value;
            slot.data_mut()[k] = orig - EPS;
            let minus = objective(&probe)?;
            numeric.push((plus - minus) / (2.0 * EPS));
        }
        // A parameter whose gradient vanishes identically (e.g. the key bias of the
        // non-local block, which shifts every score in a softmax row equally) has no
        // meaningful relative error: require an exact analytic zero and a numeric
        // estimate at roundoff level instead.
        let a_max = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let n_max = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if a_max < 1e-12 && n_max < 1e-8 {
            continue;
        }
        for (a, n) in analytic.data().iter().zip(&numeric) {
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-8));
        }
    }
    Ok(worst)
}

fn transform_cases(kind: TransformKind, c_in: usize, c_out: usize) -> Vec<Case> {
    let build = move |seed: u64| TransformModule::new(kind, c_in, c_out, Some(5), seed);
    let shape = [2, c_in, 3, 4];
    vec![
        case(format!("transform {kind} wrt input"), move |seed| {
            let m = build(seed)?;
            unary(seed, &shape, Some(&[2, c_out, 3, 4]), |t, v| {
                let b = m.params.bind(t);
                m.forward(t, &b, v)
            })
        }),
        case(format!("transform {kind} wrt params"), move |seed| {
            let m = build(seed)?;
            let mut r = rng(seed ^ 0x55);
            let x = away_from_zero(&shape, &mut r);
            let w = Tensor::randn(&[2, c_out, 3, 4], 1.0, &mut r);
            transform_param_error(&m, &x, &w)
        }),
    ]
}

fn loss_case(name: &str, loss: fn(&mut Tape, Var, Var, f64) -> Result<Var>, temperature: f64) -> Case {
    case(format!("{name} loss wrt student"), move |seed| {
        let mut r = rng(seed);
        let s = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r);
        let t = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r);
        grad_check(
            |tp, v| {
                let tv = tp.constant(t.clone());
                loss(tp, v, tv, temperature)
            },
            &s,
            EPS,
        )
    })
}

/// Every case in the suite.
pub fn cases() -> Vec<Case> {
    let mut all = vec![
        case("add", |s| {
            unary(s, &[2, 3, 4], None, |t, v| {
                let c = t.constant(Tensor::randn(&[2, 3, 4], 1.0, &mut rng(s + 1)));
                t.add(v, c)
            })
        }),
        case("sub", |s| {
            unary(s, &[2, 3, 4], None, |t, v| {
                let c = t.constant(Tensor::randn(&[2, 3, 4], 1.0, &mut rng(s + 1)));
                t.sub(c, v)
            })
        }),
        case("mul", |s| {
            unary(s, &[2, 3, 4], None, |t, v| {
                let c = t.constant(Tensor::randn(&[2, 3, 4], 1.0, &mut rng(s + 1)));
                t.mul(v, c)
            })
        }),
        case("mul (square)", |s| unary(s, &[5, 3], None, |t, v| t.mul(v, v))),
        case("scale", |s| unary(s, &[7], None, |t, v| Ok(t.scale(v, -2.5)))),
        case("matmul lhs", |s| {
            unary(s, &[3, 4], None, |t, v| {
                let b = t.constant(Tensor::randn(&[4, 5], 1.0, &mut rng(s + 1)));
                t.matmul(v, b)
            })
        }),
        case("matmul rhs", |s| {
            unary(s, &[4, 5], None, |t, v| {
                let a = t.constant(Tensor::randn(&[3, 4], 1.0, &mut rng(s + 1)));
                t.matmul(a, v)
            })
        }),
    ];
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a_shape = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let b_shape = if tb { [2, 5, 4] } else { [2, 4, 5] };
        all.push(case(format!("bmm lhs ta={ta} tb={tb}"), move |s| {
            unary(s, &a_shape, None, move |t, v| {
                let b = t.constant(Tensor::randn(&b_shape, 1.0, &mut rng(s + 1)));
                t.bmm(v, b, ta, tb)
            })
        }));
        all.push(case(format!("bmm rhs ta={ta} tb={tb}"), move |s| {
            unary(s, &b_shape, None, move |t, v| {
                let a = t.constant(Tensor::randn(&a_shape, 1.0, &mut rng(s + 1)));
                t.bmm(a, v, ta, tb)
            })
        }));
    }
    for (k, stride, pad) in [(1, 1, 0), (3, 1, 1), (3, 2, 1), (1, 2, 0)] {
        let x_shape = [2, 3, 5, 5];
        let w_shape = [4, 3, k, k];
        all.push(case(format!("conv2d k={k} s={stride} wrt input"), move |s| {
            unary(s, &x_shape, None, move |t, v| {
                let mut r = rng(s + 1);
                let w = t.constant(Tensor::randn(&w_shape, 1.0, &mut r));
                let b = t.constant(Tensor::randn(&[4], 1.0, &mut r));
                t.conv2d(v, w, Some(b), stride, pad)
            })
        }));
        all.push(case(format!("conv2d k={k} s={stride} wrt weight"), move |s| {
            unary(s, &w_shape, None, move |t, v| {
                let x = t.constant(Tensor::randn(&x_shape, 1.0, &mut rng(s + 1)));
                t.conv2d(x, v, None, stride, pad)
            })
        }));
        all.push(case(format!("conv2d k={k} s={stride} wrt bias"), move |s| {
            unary(s, &[4], None, move |t, v| {
                let mut r = rng(s + 1);
                let x = t.constant(Tensor::randn(&x_shape, 1.0, &mut r));
                let w = t.constant(Tensor::randn(&w_shape, 1.0, &mut r));
                t.conv2d(x, w, Some(v), stride, pad)
            })
        }));
    }
    all.extend([
        case("add_bias wrt input", |s| {
            unary(s, &[2, 3, 2, 2], None, |t, v| {
                let b = t.constant(Tensor::randn(&[3], 1.0, &mut rng(s + 1)));
                t.add_bias(v, b)
            })
        }),
        case("add_bias wrt bias", |s| {
            unary(s, &[3], None, |t, v| {
                let x = t.constant(Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng(s + 1)));
                t.add_bias(x, v)
            })
        }),
        case("relu", |s| unary(s, &[2, 3, 4], None, |t, v| Ok(t.relu(v)))),
        case("global_avg_pool", |s| {
            unary(s, &[2, 3, 4, 5], None, |t, v| t.global_avg_pool(v))
        }),
        case("softmax axis 1, T=1", |s| {
            unary(s, &[2, 4, 3], None, |t, v| t.softmax(v, 1, 1.0))
        }),
        case("softmax last axis, T=3", |s| {
            unary(s, &[3, 5], None, |t, v| t.softmax(v, 1, 3.0))
        }),
        case("log_softmax", |s| {
            unary(s, &[2, 3, 4], None, |t, v| t.log_softmax(v, 2, 2.0))
        }),
        case("sum all", |s| unary(s, &[2, 3, 4], None, |t, v| t.sum(v, Axes::All))),
        case("sum axes", |s| {
            unary(s, &[2, 3, 4], None, |t, v| t.sum(v, Axes::Some(vec![0, 2])))
        }),
        case("mean axes", |s| {
            unary(s, &[2, 3, 4], None, |t, v| t.mean(v, Axes::Some(vec![1])))
        }),
        case("reshape", |s| unary(s, &[2, 3, 4], None, |t, v| t.reshape(v, &[6, 4]))),
        case("cross_entropy classify", |s| {
            let labels: Vec<usize> = (0..5).map(|i| (i + s as usize) % 4).collect();
            unary(s, &[5, 4], Some(&[1]), move |t, v| t.cross_entropy(v, &labels, None))
        }),
        case("cross_entropy per pixel", |s| {
            let mut r = rng(s + 1);
            let labels: Vec<usize> = (0..2 * 3 * 3).map(|_| r.gen_range(0..3)).collect();
            unary(s, &[2, 3, 3, 3], Some(&[1]), move |t, v| {
                t.cross_entropy(v, &labels, None)
            })
        }),
        case("composite conv -> relu -> gap", |s| {
            unary(s, &[1, 2, 4, 4], None, |t, v| {
                let w = t.constant(Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng(s + 1)));
                let y = t.conv2d(v, w, None, 1, 1)?;
                let y = t.relu(y);
                t.global_avg_pool(y)
            })
        }),
    ]);
    all.extend(transform_cases(TransformKind::Identity, 3, 3));
    all.extend(transform_cases(TransformKind::Linear, 3, 4));
    all.extend(transform_cases(TransformKind::Mlp, 3, 4));
    all.extend(transform_cases(TransformKind::ConvSpatial, 2, 3));
    all.extend(transform_cases(TransformKind::NonLocal, 4, 4));
    all.push(case("l2 loss wrt student", |seed| {
        let mut r = rng(seed);
        let s = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r);
        let t = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r);
        grad_check(
            |tp, v| {
                let tv = tp.constant(t.clone());
                feat_l2_loss(tp, v, tv)
            },
            &s,
            EPS,
        )
    }));
    all.push(loss_case("kl", feat_kl_loss, 4.0));
    all.push(loss_case("kl (T=1)", feat_kl_loss, 1.0));
    all.push(loss_case("cwd", feat_cwd_loss, 4.0));
    all.push(loss_case("cwd (T=1)", feat_cwd_loss, 1.0));
    all
}

/// Runs every case on every seed; returns `(case, worst error over seeds)`.
pub fn run_all() -> Vec<(String, Result<f64>)> {
    cases()
        .into_iter()
        .map(|c| {
            let mut worst: Result<f64> = Ok(0.0);
            for seed in SEEDS {
                worst = match (worst, (c.run)(seed)) {
                    (Ok(a), Ok(b)) => Ok(a.max(b)),
                    (Err(e), _) | (_, Err(e)) => Err(e),
                };
            }
            (c.name, worst)
        })
        .collect()
}
