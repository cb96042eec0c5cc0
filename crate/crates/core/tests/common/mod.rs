//! Test oracles written against plain `Vec<f64>` loops, sharing no code with
//! the taped implementation.

#![allow(dead_code)]

use alora_core::config::RunConfig;
use alora_core::data::{Example, TaskSpec};
use alora_core::model::{Activation, ModelConfig, ModuleId, ModuleKind, SuperNetwork, LN_EPS};

pub fn small_model() -> ModelConfig {
    ModelConfig {
        layers: 1,
        d_model: 16,
        heads: 2,
        d_ff: 32,
        vocab: 10,
        max_seq_len: 8,
        activation: Activation::Relu,
    }
}

pub fn small_task() -> TaskSpec {
    TaskSpec {
        vocab: 10,
        seq_len: 9,
        train_size: 64,
        val_size: 32,
        test_size: 32,
        ..TaskSpec::default()
    }
}

/// A config that trains in well under a second.
pub fn tiny_run() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.task = TaskSpec {
        vocab: 12,
        seq_len: 9,
        train_size: 96,
        val_size: 32,
        test_size: 32,
        ..TaskSpec::default()
    };
    cfg.model = ModelConfig {
        layers: 1,
        d_model: 16,
        heads: 2,
        d_ff: 32,
        vocab: 12,
        max_seq_len: 8,
        activation: Activation::Relu,
    };
    cfg.allocator.r_target = 12;
    cfg.allocator.r1 = Some(1);
    cfg.allocator.k1 = 1;
    cfg.allocator.n_a = 2;
    cfg.allocator.val_batch_size = 16;
    cfg.optim.batch_size = 16;
    cfg.precision = alora_core::config::Precision::F64;
    cfg
}

fn matmul(x: &[f64], rows: usize, inner: usize, w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for k in 0..inner {
            let a = x[i * inner + k];
            for j in 0..cols {
                out[i * cols + j] += a * w[k * cols + j];
            }
        }
    }
    out
}

fn layer_norm(x: &[f64], width: usize) -> Vec<f64> {
    x.chunks(width)
        .flat_map(|row| {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.iter().map(move |v| (v - mean) * inv).collect::<Vec<_>>()
        })
        .collect()
}

/// `x·W0 (+b) + scaling·((x·A)∘g)·B` for one module under explicit gates.
fn adapted(net: &SuperNetwork<f64>, layer: usize, kind: ModuleKind, x: &[f64], rows: usize, gates: &[Vec<f64>]) -> Vec<f64> {
    let w = &net.blocks[layer];
    let host = w.host(kind);
    let (d_in, d_out) = (host.rows(), host.cols());
    let mut y = matmul(x, rows, d_in, host.data(), d_out);
    let bias = match kind {
        ModuleKind::Up => Some(&w.b_up),
        ModuleKind::Down => Some(&w.b_down),
        _ => None,
    };
    if let Some(b) = bias {
        for row in y.chunks_mut(d_out) {
            for (v, bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
    }
    let m = ModuleId::new(layer, kind);
    let ad = &net.adapters[m.0];
    let r = ad.rank();
    let g = &gates[m.0];
    if g.iter().all(|&v| v == 0.0) {
        return y;
    }
    let mut xa = matmul(x, rows, d_in, ad.a.value.data(), r);
    for row in xa.chunks_mut(r) {
        for (v, gg) in row.iter_mut().zip(g) {
            *v *= gg;
        }
    }
    let z = matmul(&xa, rows, r, ad.b.value.data(), d_out);
    for (v, zz) in y.iter_mut().zip(z) {
        *v += ad.scaling * zz;
    }
    y
}

/// Logits `[t, vocab]` for a single sequence.
pub fn reference_logits(net: &SuperNetwork<f64>, tokens: &[usize], gates: &[Vec<f64>]) -> Vec<f64> {
    let c = &net.config;
    let (d, t, h) = (c.d_model, tokens.len(), c.heads);
    let dh = d / h;
    let mut x: Vec<f64> = Vec::with_capacity(t * d);
    for (p, &tok) in tokens.iter().enumerate() {
        for j in 0..d {
            x.push(net.embed.data()[tok * d + j] + net.pos.data()[p * d + j]);
        }
    }
    for layer in 0..c.layers {
        let u = layer_norm(&x, d);
        let q = adapted(net, layer, ModuleKind::Query, &u, t, gates);
        let k = adapted(net, layer, ModuleKind::Key, &u, t, gates);
        let v = adapted(net, layer, ModuleKind::Value, &u, t, gates);
        let mut ctx = vec![0.0; t * d];
        for head in 0..h {
            for i in 0..t {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        (0..dh)
                            .map(|e| q[i * d + head * dh + e] * k[j * d + head * dh + e])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    for f in 0..dh {
                        ctx[i * d + head * dh + f] += e / z * v[j * d + head * dh + f];
                    }
                }
            }
        }
        let attn = adapted(net, layer, ModuleKind::Output, &ctx, t, gates);
        for (a, b) in x.iter_mut().zip(attn) {
            *a += b;
        }
        let u = layer_norm(&x, d);
        let mut hidden = adapted(net, layer, ModuleKind::Up, &u, t, gates);
        for v in &mut hidden {
            *v = match c.activation {
                Activation::Relu => v.max(0.0),
                Activation::Gelu => {
                    0.5 * *v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (*v + 0.044715 * v.powi(3))).tanh())
                }
            };
        }
        let ffn = adapted(net, layer, ModuleKind::Down, &hidden, t, gates);
        for (a, b) in x.iter_mut().zip(ffn) {
            *a += b;
        }
    }
    matmul(&layer_norm(&x, d), t, d, net.unembed.data(), c.vocab)
}

/// Mean cross-entropy over target positions.
pub fn reference_loss(net: &SuperNetwork<f64>, batch: &[Example], gates: &[Vec<f64>]) -> f64 {
    let v = net.config.vocab;
    let (mut total, mut count) = (0.0, 0usize);
    for ex in batch {
        let logits = reference_logits(net, ex.inputs(), gates);
        for (p, target) in ex.targets().into_iter().enumerate() {
            let Some(y) = target else { continue };
            let row = &logits[p * v..(p + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
            count += 1;
        }
    }
    total / count as f64
}

/// Central-difference derivative.
pub fn central<F: FnMut(f64) -> f64>(mut f: F, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}
