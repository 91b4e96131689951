//! Straight-line dense forward pass and a finite-difference gradient checker.

// index loops mirror the math on purpose
#![allow(clippy::needless_range_loop)]

use ansgt_core::model::{EncoderLayer, LayerNorm, Linear, ModelParams, TokenInput, TokenKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TinyCase;

pub fn input_of(case: &TinyCase) -> TokenInput<'_> {
    TokenInput::new(&case.seq, case.proximity.clone(), &case.nodes, &case.supers)
}

type Mat = Vec<Vec<f64>>;

fn dense_row(case: &TinyCase, kind: TokenKind, id: usize) -> Vec<f64> {
    let src = if kind == TokenKind::Super { &case.supers } else { &case.nodes };
    let row = src.row(id);
    let mut out = vec![0.0; src.dim()];
    for (&c, &v) in row.cols.iter().zip(row.vals) {
        out[c] = v;
    }
    out
}

fn linear(x: &Mat, l: &Linear) -> Mat {
    x.iter()
        .map(|row| {
            (0..l.weight.ncols())
                .map(|o| l.bias[o] + (0..row.len()).map(|i| row[i] * l.weight[[i, o]]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn norm(x: &Mat, ln: &LayerNorm) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * ln.gamma[j] + ln.beta[j])
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn reference_layer(h: &Mat, layer: &EncoderLayer, phi: &Mat, valid: &[bool], heads: usize) -> Mat {
    let m = h.len();
    let d = h[0].len();
    let dk = d / heads;
    let z = norm(h, &layer.attn_norm);
    let q = linear(&z, &layer.query);
    let k = linear(&z, &layer.key);
    let v = linear(&z, &layer.value);
    let bias = linear(phi, &layer.proximity);
    let mut concat = vec![vec![0.0; d]; m];
    for hd in 0..heads {
        for i in 0..m {
            let mut logits = vec![f64::NEG_INFINITY; m];
            for j in 0..m {
                if valid[j] {
                    let dot: f64 = (hd * dk..(hd + 1) * dk).map(|c| q[i][c] * k[j][c]).sum();
                    logits[j] = dot / (dk as f64).sqrt() + bias[j][hd];
                }
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in hd * dk..(hd + 1) * dk {
                concat[i][c] = (0..m).map(|j| e[j] / s * v[j][c]).sum();
            }
        }
    }
    let hidden = add(h, &linear(&concat, &layer.output));
    let inner: Mat = linear(&norm(&hidden, &layer.ffn_norm), &layer.ffn_in)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    add(&hidden, &linear(&inner, &layer.ffn_out))
}

pub fn reference_logits(case: &TinyCase) -> Vec<f64> {
    let p = &case.params;
    let tokens = case.seq.tokens();
    let mut h: Mat = Vec::new();
    let mut phi: Mat = Vec::new();
    for (t, tok) in tokens.iter().enumerate() {
        let mut row: Vec<f64> = p.kind_embedding.row(tok.kind as usize).to_vec();
        match tok.kind {
            TokenKind::Global => {
                for (r, g) in row.iter_mut().zip(p.global_features.row(tok.id)) {
                    *r += g;
                }
                phi.push(p.global_proximity.row(tok.id).to_vec());
                h.push(row);
                continue;
            }
            _ if tok.valid => {
                let x = dense_row(case, tok.kind, tok.id);
                let proj = linear(&vec![x], &p.input);
                row = row.iter().zip(&proj[0]).map(|(a, b)| a + b).collect();
            }
            _ => {}
        }
        phi.push(case.proximity.values.row(t).to_vec());
        h.push(row);
    }
    let valid: Vec<bool> = tokens.iter().map(|t| t.valid).collect();
    for layer in &p.layers {
        h = reference_layer(&h, layer, &phi, &valid, p.config.heads);
    }
    let z = norm(&vec![h[0].clone()], &p.head_norm);
    let hid: Mat = linear(&z, &p.head_hidden)
        .into_iter()
        .map(|r| r.into_iter().map(|x| x.max(0.0)).collect())
        .collect();
    linear(&hid, &p.head_out).remove(0)
}

fn loss_at(params: &ModelParams, input: &TokenInput, target: usize, dropout_seed: Option<u64>) -> f64 {
    let pass = match dropout_seed {
        Some(s) => params.forward(input, Some(&mut ChaCha8Rng::seed_from_u64(s))),
        None => params.forward::<ChaCha8Rng>(input, None),
    }
    .unwrap();
    pass.loss(target)
}

/// Largest per-tensor relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
/// with its tensor name. Tensors whose gradient is at the rounding floor
/// report the absolute difference instead.
pub fn gradient_error(case: &TinyCase, target: usize, dropout_seed: Option<u64>) -> (String, f64) {
    let input = input_of(case);
    let params = &case.params;
    let pass = match dropout_seed {
        Some(s) => params.forward(&input, Some(&mut ChaCha8Rng::seed_from_u64(s))),
        None => params.forward::<ChaCha8Rng>(&input, None),
    }
    .unwrap();
    let mut grad = params.zeros_like();
    params.backward(&input, &pass, target, 1.0, &mut grad).unwrap();
    let analytic = grad.flatten();
    let base = params.flatten();
    let mut names = Vec::new();
    params.visit(&mut |name, t| names.push((name.to_string(), t.len())));

    let h = 1e-5;
    let mut probe = params.clone();
    let mut offset = 0;
    let mut worst = (String::new(), 0.0f64);
    for (name, len) in names {
        let mut num = vec![0.0; len];
        for (i, slot) in num.iter_mut().enumerate() {
            let mut x = base.clone();
            x[offset + i] += h;
            probe.assign_flat(&x).unwrap();
            let up = loss_at(&probe, &input, target, dropout_seed);
            x[offset + i] -= 2.0 * h;
            probe.assign_flat(&x).unwrap();
            let down = loss_at(&probe, &input, target, dropout_seed);
            *slot = (up - down) / (2.0 * h);
        }
        let ana = &analytic[offset..offset + len];
        let diff: f64 = ana.iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = ana.iter().map(|a| a * a).sum::<f64>().sqrt().max(num.iter().map(|n| n * n).sum::<f64>().sqrt());
        // key biases shift every logit of a row equally, so their true gradient is
        // zero and the difference quotient is pure rounding noise (~eps/h)
        let rel = if scale < 1e-8 { diff } else { diff / scale };
        if rel > worst.1 || rel.is_nan() {
            worst = (name.clone(), rel);
        }
        offset += len;
    }
    worst
}

