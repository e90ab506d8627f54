//! Independent scalar-loop references shared by the integration tests.
#![allow(dead_code)]

use std::io::Write;

use imc_snn::snn::{LifParams, NetworkSpec};
use imc_snn::tensor::Matrix;
use rand::Rng;

/// Writes straight to the process stdout so the line survives libtest capture.
pub fn verdict(criterion: usize, name: &str, passed: bool, detail: &str) {
    let tag = if passed { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {criterion} [{name}]: {tag} {detail}");
    let _ = out.flush();
}

/// Network with 1..=`max_hidden` hidden layers of 1..=`max_width` neurons,
/// per-layer LIF parameters, and uniform weights in `[-w, w]`.
pub fn random_net(
    rng: &mut impl Rng,
    max_hidden: usize,
    max_width: usize,
    max_t: usize,
    w: f64,
) -> (NetworkSpec, Vec<Matrix>) {
    let hidden = rng.random_range(1..=max_hidden);
    let widths: Vec<usize> = (0..hidden + 2).map(|_| rng.random_range(1..=max_width)).collect();
    let t = rng.random_range(1..=max_t);
    let mut net = NetworkSpec::new(widths.clone(), t, LifParams::default()).unwrap();
    net.lif = (0..hidden)
        .map(|_| {
            LifParams::with_width(
                rng.random_range(0.3..=1.0),
                rng.random_range(0.3..1.5),
                rng.random_range(0.3..1.5),
            )
            .unwrap()
        })
        .collect();
    let weights = (0..widths.len() - 1)
        .map(|l| Matrix::from_fn(widths[l], widths[l + 1], |_, _| rng.random_range(-w..=w)))
        .collect();
    (net, weights)
}

/// `x · W` with the row-outer summation order of a scalar triple loop.
pub fn vecmat(w: &Matrix, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (j, o) in out.iter_mut().enumerate() {
            *o += xi * w.get(i, j);
        }
    }
    out
}

pub fn triangle(v: f64, p: &LifParams) -> f64 {
    let z = (v - p.threshold).abs() / p.surrogate_width;
    if z >= 1.0 {
        0.0
    } else {
        (1.0 - z) / p.surrogate_width
    }
}

/// Antiderivative of [`triangle`], zero far below threshold.
pub fn triangle_integral(v: f64, p: &LifParams) -> f64 {
    let z = (v - p.threshold) / p.surrogate_width;
    if z <= -1.0 {
        0.0
    } else if z <= 0.0 {
        0.5 * (1.0 + z) * (1.0 + z)
    } else if z <= 1.0 {
        1.0 - 0.5 * (1.0 - z) * (1.0 - z)
    } else {
        1.0
    }
}

/// Scalar reference of one sample's forward pass.
pub struct SampleTrace {
    /// `[layer][t][neuron]`
    pub spikes: Vec<Vec<Vec<f64>>>,
    pub potentials: Vec<Vec<Vec<f64>>>,
    /// `[t][class]`
    pub logits: Vec<Vec<f64>>,
    pub logits_mean: Vec<f64>,
}

/// `frames[t]` is the first-layer input at step `t`.
pub fn forward_oracle(net: &NetworkSpec, w: &[Matrix], frames: &[Vec<f64>]) -> SampleTrace {
    let hidden = net.hidden_layers();
    let steps = net.timesteps;
    let mut u: Vec<Vec<f64>> = (0..hidden).map(|l| vec![0.0; net.widths[l + 1]]).collect();
    let mut spikes = vec![Vec::new(); hidden];
    let mut potentials = vec![Vec::new(); hidden];
    let mut logits = Vec::new();
    let mut mean = vec![0.0; net.classes()];
    for frame in frames.iter().take(steps) {
        let mut x = frame.clone();
        for l in 0..hidden {
            let p = &net.lif[l];
            let i = vecmat(&w[l], &x);
            let mut v = vec![0.0; i.len()];
            let mut o = vec![0.0; i.len()];
            for n in 0..i.len() {
                v[n] = p.leak * u[l][n] + i[n];
                if v[n] > p.threshold {
                    o[n] = 1.0;
                    u[l][n] = 0.0;
                } else {
                    u[l][n] = v[n];
                }
            }
            potentials[l].push(v);
            spikes[l].push(o.clone());
            x = o;
        }
        let z = vecmat(&w[hidden], &x);
        for (m, zi) in mean.iter_mut().zip(&z) {
            *m += zi;
        }
        logits.push(z);
    }
    for m in mean.iter_mut() {
        *m /= steps as f64;
    }
    SampleTrace {
        spikes,
        potentials,
        logits,
        logits_mean: mean,
    }
}

pub fn softmax_error(z: &[f64], label: usize) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &v in z {
        m = m.max(v);
    }
    let ex: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let mut s = 0.0;
    for e in &ex {
        s += e;
    }
    let mut p: Vec<f64> = ex.iter().map(|e| e / s).collect();
    p[label] -= 1.0;
    p
}

/// DFA weight gradients for a batch, summed in batch-then-time order.
pub fn dfa_oracle(
    net: &NetworkSpec,
    w: &[Matrix],
    b: &[Matrix],
    inputs: &[Vec<Vec<f64>>],
    labels: &[usize],
) -> Vec<Matrix> {
    let hidden = net.hidden_layers();
    let steps = net.timesteps;
    let inv = 1.0 / labels.len() as f64;
    let mut dw: Vec<Matrix> = w.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    let traces: Vec<SampleTrace> = inputs.iter().map(|f| forward_oracle(net, w, f)).collect();
    let errors: Vec<Vec<f64>> = traces
        .iter()
        .zip(labels)
        .map(|(tr, &y)| softmax_error(&tr.logits_mean, y))
        .collect();
    for l in 0..hidden {
        for (s, tr) in traces.iter().enumerate() {
            let p = vecmat(&b[l], &errors[s]);
            for t in 0..steps {
                let x: &[f64] = if l == 0 { &inputs[s][t] } else { &tr.spikes[l - 1][t] };
                let d: Vec<f64> = (0..p.len())
                    .map(|j| p[j] * triangle(tr.potentials[l][t][j], &net.lif[l]))
                    .collect();
                outer_into(&mut dw[l], x, &d, inv);
            }
        }
    }
    for (s, tr) in traces.iter().enumerate() {
        let x: Vec<f64> = if hidden == 0 {
            mean_over_t(&inputs[s][..steps])
        } else {
            mean_over_t(&tr.spikes[hidden - 1])
        };
        outer_into(&mut dw[hidden], &x, &errors[s], inv);
    }
    dw
}

fn mean_over_t(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = rows[0].clone();
    for r in &rows[1..] {
        for (a, x) in m.iter_mut().zip(r) {
            *a += x;
        }
    }
    m.iter().map(|v| v / rows.len() as f64).collect()
}

fn outer_into(m: &mut Matrix, x: &[f64], d: &[f64], scale: f64) {
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let k = xi * scale;
        for (j, &dj) in d.iter().enumerate() {
            m.set(i, j, m.get(i, j) + k * dj);
        }
    }
}

/// Loss of a smooth stand-in for the network around a nominal trace: spikes
/// become `o + S(v) − S(v_nominal)` with `S' = triangle`, and reset masks stay
/// frozen. At the nominal weights its exact gradient is the surrogate BPTT
/// gradient with the reset excluded.
pub fn frozen_surrogate_loss(
    net: &NetworkSpec,
    w: &[Matrix],
    nominal: &[SampleTrace],
    inputs: &[Vec<Vec<f64>>],
    labels: &[usize],
) -> f64 {
    let hidden = net.hidden_layers();
    let steps = net.timesteps;
    let mut total = 0.0;
    for (s, tr) in nominal.iter().enumerate() {
        let mut u: Vec<Vec<f64>> = (0..hidden).map(|l| vec![0.0; net.widths[l + 1]]).collect();
        let mut mean = vec![0.0; net.classes()];
        for t in 0..steps {
            let mut x = inputs[s][t].clone();
            for l in 0..hidden {
                let p = &net.lif[l];
                let cur = dense_vecmat(&w[l], &x);
                let mut out = vec![0.0; cur.len()];
                for n in 0..cur.len() {
                    let v = p.leak * u[l][n] + cur[n];
                    let o = tr.spikes[l][t][n];
                    let v0 = tr.potentials[l][t][n];
                    out[n] = o + triangle_integral(v, p) - triangle_integral(v0, p);
                    u[l][n] = v * (1.0 - o);
                }
                x = out;
            }
            let z = dense_vecmat(&w[hidden], &x);
            for (m, zi) in mean.iter_mut().zip(&z) {
                *m += zi / steps as f64;
            }
        }
        let mx = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + mean.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - mean[labels[s]];
    }
    total / labels.len() as f64
}

fn dense_vecmat(w: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..w.cols())
        .map(|j| (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum())
        .collect()
}

/// Solves `A x = b` for a small dense system by Gaussian elimination with partial pivoting.
pub fn solve_dense(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(r, &bi)| {
        let mut r = r.clone();
        r.push(bi);
        r
    }).collect();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, piv);
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..=n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut s = m[r][n];
        for k in r + 1..n {
            s -= m[r][k] * x[k];
        }
        x[r] = s / m[r][r];
    }
    x
}
