//! Explicit-loop reference implementations, written independently of the tape.

use featkd::nn::TransformModule;
use featkd::tensor::Tensor;

fn at(t: &Tensor, n: usize, c: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[((n * s[1] + c) * s[2] + y) * s[3] + x]
}

fn param<'a>(m: &'a TransformModule, name: &str) -> &'a Tensor {
    &m.params
        .get(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
        .value
}

/// 1x1 convolution of one pixel's channel vector.
fn pointwise(w: &Tensor, b: &Tensor, v: &[f64]) -> Vec<f64> {
    let (co, ci) = (w.shape()[0], w.shape()[1]);
    (0..co)
        .map(|o| b.data()[o] + (0..ci).map(|i| w.data()[o * ci + i] * v[i]).sum::<f64>())
        .collect()
}

/// Two-layer perceptron applied independently at every pixel.
pub fn mlp(m: &TransformModule, f: &Tensor) -> Tensor {
    let s = f.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (w1, b1, w2, b2) = (param(m, "w1"), param(m, "b1"), param(m, "w2"), param(m, "b2"));
    let co = w2.shape()[0];
    let mut out = vec![0.0; n * co * h * w];
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let v: Vec<f64> = (0..c).map(|ch| at(f, i, ch, y, x)).collect();
                let hidden: Vec<f64> = pointwise(w1, b1, &v).into_iter().map(|a| a.max(0.0)).collect();
                for (o, val) in pointwise(w2, b2, &hidden).into_iter().enumerate() {
                    out[((i * co + o) * h + y) * w + x] = val;
                }
            }
        }
    }
    Tensor::new(&[n, co, h, w], out).expect("shape")
}

/// Embedded-Gaussian non-local block with a dense `HW x HW` attention matrix.
pub fn nonlocal(m: &TransformModule, f: &Tensor) -> Tensor {
    let s = f.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let embed = |wn: &str, bn: &str, i: usize| -> Vec<Vec<f64>> {
        (0..hw)
            .map(|p| {
                let v: Vec<f64> = (0..c).map(|ch| at(f, i, ch, p / w, p % w)).collect();
                pointwise(param(m, wn), param(m, bn), &v)
            })
            .collect()
    };
    let mut out = f.data().to_vec();
    for i in 0..n {
        let (theta, phi, g) = (
            embed("theta_w", "theta_b", i),
            embed("phi_w", "phi_b", i),
            embed("g_w", "g_b", i),
        );
        for p in 0..hw {
            let scores: Vec<f64> = (0..hw)
                .map(|q| theta[p].iter().zip(&phi[q]).map(|(a, b)| a * b).sum())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|v| (v - top).exp()).sum();
            let attn: Vec<f64> = scores.iter().map(|v| (v - top).exp() / z).collect();
            let e = g[0].len();
            let y: Vec<f64> = (0..e).map(|k| (0..hw).map(|q| attn[q] * g[q][k]).sum()).collect();
            for (o, val) in pointwise(param(m, "out_w"), param(m, "out_b"), &y)
                .into_iter()
                .enumerate()
            {
                out[(i * c + o) * hw + p] += val;
            }
        }
    }
    Tensor::new(s, out).expect("shape")
}

/// Two 3x3 zero-padded convolutions with a ReLU between them.
pub fn conv_spatial(m: &TransformModule, f: &Tensor) -> Tensor {
    let conv = |input: &Tensor, wt: &Tensor, b: &Tensor| -> Tensor {
        let s = input.shape();
        let (n, ci, h, w) = (s[0], s[1], s[2], s[3]);
        let co = wt.shape()[0];
        let mut out = vec![0.0; n * co * h * w];
        for i in 0..n {
            for o in 0..co {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (yy, xx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                        continue;
                                    }
                                    acc += wt.data()[((o * ci + c) * 3 + ky) * 3 + kx]
                                        * at(input, i, c, yy as usize, xx as usize);
                                }
                            }
                        }
                        out[((i * co + o) * h + y) * w + x] = acc;
                    }
                }
            }
        }
        Tensor::new(&[n, co, h, w], out).expect("shape")
    };
    let hidden = conv(f, param(m, "w1"), param(m, "b1")).map(|v| v.max(0.0));
    conv(&hidden, param(m, "w2"), param(m, "b2"))
}

pub fn l2(s: &Tensor, t: &Tensor) -> f64 {
    let n = s.shape()[0];
    let mut total = 0.0;
    for i in 0..s.len() {
        let d = s.data()[i] - t.data()[i];
        total += d * d;
    }
    total / n as f64
}

/// `sum_k p_k (ln p_k - ln q_k)` with `p = softmax(t/T)`, `q = softmax(s/T)`.
fn kl_rows(s: &[f64], t: &[f64], temperature: f64) -> f64 {
    let log_softmax = |v: &[f64]| -> Vec<f64> {
        let top = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / temperature;
        let lse = v.iter().map(|x| (x / temperature - top).exp()).sum::<f64>().ln() + top;
        v.iter().map(|x| x / temperature - lse).collect()
    };
    let (ls, lt) = (log_softmax(s), log_softmax(t));
    let mut kl = 0.0;
    for k in 0..s.len() {
        kl += lt[k].exp() * (lt[k] - ls[k]);
    }
    kl
}

pub fn kl(s: &Tensor, t: &Tensor, temperature: f64) -> f64 {
    let n = s.shape()[0];
    let per = s.len() / n;
    let mut total = 0.0;
    for i in 0..n {
        let r = i * per..(i + 1) * per;
        total += kl_rows(&s.data()[r.clone()], &t.data()[r], temperature);
    }
    total * temperature * temperature / n as f64
}

pub fn cwd(s: &Tensor, t: &Tensor, temperature: f64) -> f64 {
    let sh = s.shape();
    let (n, c, hw) = (sh[0], sh[1], sh[2] * sh[3]);
    let mut total = 0.0;
    for i in 0..n {
        for ch in 0..c {
            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            total += kl_rows(&s.data()[r.clone()], &t.data()[r], temperature);
        }
    }
    total * temperature * temperature / n as f64
}
