//! Independent reference implementations written as plain loops over
//! nested vectors, plus shared gradient-check and synthetic-data helpers.
#![allow(dead_code)]

use std::f64::consts::PI;

use freqrec::autograd::{Graph, Var};
use freqrec::config::{Activation, AblationSpec, DistanceKind, FusionMode, ModelConfig};
use freqrec::data::{generate_synthetic, Batch, SyntheticData, SyntheticSpec};
use freqrec::freqnet::FreqMlp;
use freqrec::gradcheck::{compare_gradients, finite_diff_grad};
use freqrec::model::FreqRec;
use freqrec::nn::FeedForward;
use freqrec::tensor::{IdTensor, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type C = (f64, f64);
pub type T3 = Vec<Vec<Vec<f64>>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn to_t3(t: &Tensor) -> T3 {
    let s = t.shape();
    (0..s[0])
        .map(|a| (0..s[1]).map(|b| (0..s[2]).map(|c| t.get(&[a, b, c])).collect()).collect())
        .collect()
}

pub fn from_t3(x: &T3) -> Tensor {
    let (a, b, c) = (x.len(), x[0].len(), x[0][0].len());
    Tensor::new(vec![a, b, c], x.iter().flatten().flatten().copied().collect()).unwrap()
}

pub fn max_diff_t3(a: &T3, b: &T3) -> f64 {
    a.iter()
        .flatten()
        .flatten()
        .zip(b.iter().flatten().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `X_k = Σ_n x_n e^{-2πikn/L}` for every `k` in `0..L`.
pub fn dft_two_sided(x: &[f64]) -> Vec<C> {
    let l = x.len();
    (0..l)
        .map(|k| {
            let mut re = 0.0;
            let mut im = 0.0;
            for (n, &v) in x.iter().enumerate() {
                let th = 2.0 * PI * (k * n) as f64 / l as f64;
                re += v * th.cos();
                im -= v * th.sin();
            }
            (re, im)
        })
        .collect()
}

/// Real part of `x_n = (1/L) Σ_k X_k e^{2πikn/L}`.
pub fn idft_real(spec: &[C]) -> Vec<f64> {
    let l = spec.len();
    (0..l)
        .map(|n| {
            let mut acc = 0.0;
            for (k, &(re, im)) in spec.iter().enumerate() {
                let th = 2.0 * PI * (k * n) as f64 / l as f64;
                acc += re * th.cos() - im * th.sin();
            }
            acc / l as f64
        })
        .collect()
}

pub fn phi(act: Activation, v: f64) -> f64 {
    match act {
        Activation::Identity => v,
        Activation::Relu => v.max(0.0),
        Activation::LeakyRelu(s) => {
            if v >= 0.0 {
                v
            } else {
                s * v
            }
        }
    }
}

/// Complex feature mixing of one coefficient vector.
pub fn freq_mlp_loop(coeffs: &[C], f: &FreqMlp, act: Activation) -> Vec<C> {
    let d = coeffs.len();
    (0..d)
        .map(|j| {
            let mut re = f.b_r.data()[j];
            let mut im = f.b_i.data()[j];
            for (i, &(cr, ci)) in coeffs.iter().enumerate() {
                let wr = f.w_r.get(&[i, j]);
                let wi = f.w_i.get(&[i, j]);
                re += cr * wr - ci * wi;
                im += cr * wi + ci * wr;
            }
            (phi(act, re), phi(act, im))
        })
        .collect()
}

/// Filters a `B × L × D` tensor along `axis` (0 or 1): two-sided transform,
/// feature mixing on the non-redundant half, conjugate completion, real part
/// of the inverse.
pub fn spectral_filter_loop(x: &T3, axis: usize, f: &FreqMlp, act: Activation) -> T3 {
    let (b, l, d) = (x.len(), x[0].len(), x[0][0].len());
    let n = if axis == 0 { b } else { l };
    let other = if axis == 0 { l } else { b };
    let mut out = vec![vec![vec![0.0; d]; l]; b];
    for o in 0..other {
        let at = |t: usize| if axis == 0 { (t, o) } else { (o, t) };
        // spectra[feature][k]
        let spectra: Vec<Vec<C>> = (0..d)
            .map(|f_| {
                let line: Vec<f64> = (0..n).map(|t| { let (bb, ll) = at(t); x[bb][ll][f_] }).collect();
                dft_two_sided(&line)
            })
            .collect();
        let half = n / 2;
        let mut filtered = vec![vec![(0.0, 0.0); n]; d];
        for k in 0..=half {
            let coeffs: Vec<C> = (0..d).map(|f_| spectra[f_][k]).collect();
            let y = freq_mlp_loop(&coeffs, f, act);
            for f_ in 0..d {
                filtered[f_][k] = y[f_];
            }
        }
        for k in half + 1..n {
            for f_ in 0..d {
                let (re, im) = filtered[f_][n - k];
                filtered[f_][k] = (re, -im);
            }
        }
        for f_ in 0..d {
            let line = idft_real(&filtered[f_]);
            for (t, v) in line.into_iter().enumerate() {
                let (bb, ll) = at(t);
                out[bb][ll][f_] = v;
            }
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

pub fn layer_norm_vec(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * gain[i] + bias[i])
        .collect()
}

pub fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    (0..c).map(|j| (0..r).map(|i| x[i] * w.get(&[i, j])).sum()).collect()
}

/// `LN(W2·gelu(W1·x + b1) + b2 + x + extra)` per position.
pub fn ffn_loop(x: &T3, extra: Option<&T3>, p: &FeedForward, eps: f64) -> T3 {
    x.iter()
        .enumerate()
        .map(|(bi, row)| {
            row.iter()
                .enumerate()
                .map(|(li, v)| {
                    let h: Vec<f64> = vec_mat(v, &p.w1)
                        .iter()
                        .zip(p.b1.data())
                        .map(|(a, b)| gelu(a + b))
                        .collect();
                    let y = vec_mat(&h, &p.w2);
                    let z: Vec<f64> = (0..v.len())
                        .map(|d| {
                            y[d] + p.b2.data()[d] + v[d] + extra.map_or(0.0, |e| e[bi][li][d])
                        })
                        .collect();
                    layer_norm_vec(&z, p.ln_gain.data(), p.ln_bias.data(), eps)
                })
                .collect()
        })
        .collect()
}

pub fn axpby(a: f64, x: &T3, b: f64, y: &T3) -> T3 {
    x.iter()
        .zip(y)
        .map(|(r1, r2)| {
            r1.iter()
                .zip(r2)
                .map(|(v1, v2)| v1.iter().zip(v2).map(|(p, q)| a * p + b * q).collect())
                .collect()
        })
        .collect()
}

/// Frequency branch in eval mode.
pub fn freqnet_loop(
    e: &T3,
    gsa: Option<&FreqMlp>,
    lsr: Option<&FreqMlp>,
    ffn: &FeedForward,
    fusion: FusionMode,
    gamma: f64,
    act: Activation,
    eps: f64,
) -> T3 {
    let inter = gsa.map_or_else(|| e.clone(), |f| spectral_filter_loop(e, 0, f, act));
    let fused = match fusion {
        FusionMode::Parallel => {
            let intra = lsr.map_or_else(|| e.clone(), |f| spectral_filter_loop(e, 1, f, act));
            axpby(1.0 - gamma, &inter, gamma, &intra)
        }
        FusionMode::Serial => {
            let e_intra = if gsa.is_some() { axpby(1.0, e, 1.0, &inter) } else { e.clone() };
            lsr.map_or_else(|| e_intra.clone(), |f| spectral_filter_loop(&e_intra, 1, f, act))
        }
    };
    ffn_loop(&fused, Some(e), ffn, eps)
}

/// Mean over valid positions of `-log softmax(x · Mᵀ)[target]`, scoring
/// items `1..rows`.
pub fn cross_entropy_loop(x: &T3, table: &Tensor, targets: &[usize], mask: &[bool]) -> f64 {
    let (rows, d) = (table.shape()[0], table.shape()[1]);
    let l = x[0].len();
    let mut total = 0.0;
    let mut count = 0;
    for (b, row) in x.iter().enumerate() {
        for (t, h) in row.iter().enumerate() {
            let pos = b * l + t;
            if !mask[pos] {
                continue;
            }
            let logits: Vec<f64> = (1..rows)
                .map(|j| (0..d).map(|k| h[k] * table.get(&[j, k])).sum())
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            total += lse - logits[targets[pos] - 1];
            count += 1;
        }
    }
    total / count as f64
}

pub fn distance_loop(p: &[f64], t: &[f64], kind: DistanceKind) -> f64 {
    let n = p.len() as f64;
    let l1 = p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let l2 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    match kind {
        DistanceKind::L1 => l1,
        DistanceKind::L2 => l2,
        DistanceKind::Mix => 0.5 * (l1 + l2),
    }
}

/// Distance between the time-axis half spectra of `p` and `t`, real and
/// imaginary parts taken separately.
pub fn frequency_loss_loop(p: &T3, t: &T3, kind: DistanceKind) -> f64 {
    let (b, l, d) = (p.len(), p[0].len(), p[0][0].len());
    let half = l / 2;
    let mut pr = Vec::new();
    let mut pi = Vec::new();
    let mut tr = Vec::new();
    let mut ti = Vec::new();
    for bi in 0..b {
        let sp: Vec<Vec<C>> = (0..d)
            .map(|k| dft_two_sided(&(0..l).map(|n| p[bi][n][k]).collect::<Vec<_>>()))
            .collect();
        let st: Vec<Vec<C>> = (0..d)
            .map(|k| dft_two_sided(&(0..l).map(|n| t[bi][n][k]).collect::<Vec<_>>()))
            .collect();
        for k in 0..=half {
            for f in 0..d {
                pr.push(sp[f][k].0);
                pi.push(sp[f][k].1);
                tr.push(st[f][k].0);
                ti.push(st[f][k].1);
            }
        }
    }
    distance_loop(&pr, &tr, kind) + distance_loop(&pi, &ti, kind)
}

/// Rank by sorting `(score desc, id asc)` over ids `1..`.
pub fn sort_rank(scores: &[f64], target: usize) -> usize {
    let mut ids: Vec<usize> = (1..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    ids.iter().position(|&i| i == target).unwrap() + 1
}

// ---- gradient checking ----

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_FLOOR: f64 = 1e-8;
pub const FD_STEP: f64 = 1e-5;

/// Worst relative error of `d sum(w ⊙ f(x)) / dx` against finite differences
/// for every input.
pub fn check_op(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        let shape = g.shape(out).to_vec();
        let mut r = rng(99);
        Tensor::randn(&shape, 1.0, &mut r)
    };
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i]);
        let numeric = finite_diff_grad(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[i] = probe.clone();
                eval(&xs)
            },
            x,
            FD_STEP,
        );
        worst = worst.max(compare_gradients(&analytic, &numeric, GRAD_FLOOR).relative);
    }
    worst
}

pub fn grad_config(fusion: FusionMode, distance: DistanceKind) -> ModelConfig {
    ModelConfig {
        dim: 6,
        max_len: 4,
        num_heads: 2,
        ff_dim: 8,
        dropout_rate: 0.0,
        fusion,
        distance,
        seed: 5,
        ..ModelConfig::default()
    }
}

/// Two rows, the second left-padded, over `V = 11` items.
pub fn grad_batch() -> Batch {
    let rows: [(u64, &[usize]); 2] = [(1, &[3, 7, 1, 11, 5]), (2, &[2, 9, 4])];
    Batch::from_sequences(&rows, 4)
}

/// Perturbs every parameter so that identity-like initial values do not hide
/// errors.
pub fn jittered_model(config: ModelConfig, items: usize) -> FreqRec {
    let mut model = FreqRec::new(config, items).unwrap();
    let mut r = rng(17);
    for t in model.tensors_mut() {
        let noise = Tensor::randn(t.shape(), 0.3, &mut r);
        *t = t.zip_with(&noise, |a, b| a + b).unwrap();
    }
    model
}

pub fn model_loss(model: &FreqRec, batch: &Batch, ablation: &AblationSpec) -> f64 {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let mut r = rng(0);
    let out = model.forward(&mut g, &vars, &batch.input_ids, ablation, false, &mut r).unwrap();
    let parts = model.loss(&mut g, &vars, out.x_out, batch, ablation).unwrap();
    g.value(parts.total).item()
}

/// Worst relative gradient error over every parameter of the full loss,
/// with the parameter name where it occurs.
pub fn check_model_gradients(config: ModelConfig, ablation: &AblationSpec) -> (f64, String) {
    let model = jittered_model(config, 11);
    let batch = grad_batch();
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let mut r = rng(0);
    let out = model.forward(&mut g, &vars, &batch.input_ids, ablation, false, &mut r).unwrap();
    let parts = model.loss(&mut g, &vars, out.x_out, &batch, ablation).unwrap();
    let grads = g.backward(parts.total).unwrap();
    let names = model.param_names();
    let mut worst = (0.0, String::new());
    for (p, var) in vars.all().into_iter().enumerate() {
        let analytic = grads.get_or_zeros(var);
        let original = model.tensors()[p].clone();
        let mut probe_model = model.clone();
        let numeric = finite_diff_grad(
            |x| {
                *probe_model.tensors_mut()[p] = x.clone();
                model_loss(&probe_model, &batch, ablation)
            },
            &original,
            FD_STEP,
        );
        let m = compare_gradients(&analytic, &numeric, GRAD_FLOOR);
        if m.relative > worst.0 {
            worst = (m.relative, format!("{} [{}]: {} vs {}", names[p], m.index, m.analytic, m.numeric));
        }
    }
    worst
}

/// Every ablation switch on its own plus the combined spectral ablation.
pub fn ablation_variants() -> Vec<AblationSpec> {
    let mut v = vec![AblationSpec::full(), AblationSpec::sa_only()];
    for s in ["sa", "gsa", "lsr", "lf", "ce", "sa,gsa,lsr"] {
        v.push(AblationSpec::parse_list(s).unwrap());
    }
    v
}

// ---- synthetic substrate ----

pub fn periodic(seed: u64, noise_rate: f64) -> SyntheticData {
    let spec = SyntheticSpec {
        cycle_count: 6,
        users: 200,
        seq_len: 25,
        noise_rate,
        item_count: 30,
    };
    generate_synthetic(&spec, &mut rng(seed)).unwrap()
}

/// Desk-scale training settings for the periodic substrate.
pub fn desk_config(seed: u64) -> ModelConfig {
    ModelConfig {
        dim: 32,
        max_len: 20,
        ff_dim: 64,
        batch_size: 32,
        learning_rate: 5e-3,
        max_epochs: 80,
        patience: 10,
        seed,
        ..ModelConfig::default()
    }
}

pub fn ids(shape: &[usize], data: Vec<usize>) -> IdTensor {
    IdTensor::new(shape.to_vec(), data).unwrap()
}
