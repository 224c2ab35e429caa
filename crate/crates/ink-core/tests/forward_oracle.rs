//! Independent re-evaluation of the teacher-forced forward pass.
//!
//! The library computes forward passes through its autodiff tape. This test
//! recomputes the same architecture with nothing but scalar loops over
//! `Vec<f64>`, reading the same parameter values, and demands agreement to
//! 1e-12. Any transcription slip in either implementation (mask direction,
//! norm placement, head slicing, adapter wiring) shows up as a mismatch.

use ink_core::model::{Model, ModelConfig, LN_EPS};
use ink_core::vocab::{BOS, EOS};

type Mat = Vec<Vec<f64>>;

fn param(model: &Model, name: &str) -> Mat {
    let t = model.params.get(name);
    (0..t.nrows())
        .map(|i| (0..t.ncols()).map(|j| t[[i, j]]).collect())
        .collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for p in 0..k {
            let av = a[i][p];
            for j in 0..m {
                out[i][j] += av * b[p][j];
            }
        }
    }
    out
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
        .collect()
}

fn add_bias(a: &Mat, bias: &Mat) -> Mat {
    a.iter()
        .map(|row| row.iter().zip(&bias[0]).map(|(x, b)| x + b).collect())
        .collect()
}

fn layer_norm(x: &Mat, gain: &Mat, shift: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gain[0][j] + shift[0][j])
                .collect()
        })
        .collect()
}

fn softmax_masked(scores: &Mat, causal: bool) -> Mat {
    scores
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let limit = if causal { i + 1 } else { row.len() };
            let max = row[..limit].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row[..limit].iter().map(|v| (v - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            let mut out = vec![0.0; row.len()];
            for j in 0..limit {
                out[j] = exps[j] / denom;
            }
            out
        })
        .collect()
}

fn slice_cols(x: &Mat, start: usize, len: usize) -> Mat {
    x.iter().map(|row| row[start..start + len].to_vec()).collect()
}

fn concat_cols(parts: &[Mat]) -> Mat {
    let rows = parts[0].len();
    (0..rows)
        .map(|i| parts.iter().flat_map(|p| p[i].iter().cloned()).collect())
        .collect()
}

fn relu(x: &Mat) -> Mat {
    x.iter()
        .map(|row| row.iter().map(|v| v.max(0.0)).collect())
        .collect()
}

fn embed_sequence(model: &Model, ids: &[u32]) -> Mat {
    let d = model.config.d_model;
    let table = param(model, "embed");
    let scale = (d as f64).sqrt();
    ids.iter()
        .enumerate()
        .map(|(pos, &t)| {
            (0..d)
                .map(|j| {
                    let pair = (j / 2) as f64;
                    let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
                    let pe = if j % 2 == 0 { angle.sin() } else { angle.cos() };
                    table[t as usize][j] * scale + pe
                })
                .collect()
        })
        .collect()
}

fn attention(model: &Model, q_in: &Mat, kv_in: &Mat, prefix: &str, causal: bool) -> Mat {
    let n_heads = model.config.n_heads;
    let dh = model.config.d_model / n_heads;
    let q = matmul(q_in, &param(model, &format!("{prefix}.wq")));
    let k = matmul(kv_in, &param(model, &format!("{prefix}.wk")));
    let v = matmul(kv_in, &param(model, &format!("{prefix}.wv")));
    let mut heads = Vec::new();
    for h in 0..n_heads {
        let qh = slice_cols(&q, h * dh, dh);
        let kh = slice_cols(&k, h * dh, dh);
        let vh = slice_cols(&v, h * dh, dh);
        let mut scores = vec![vec![0.0; kh.len()]; qh.len()];
        for i in 0..qh.len() {
            for j in 0..kh.len() {
                let dot: f64 = (0..dh).map(|x| qh[i][x] * kh[j][x]).sum();
                scores[i][j] = dot / (dh as f64).sqrt();
            }
        }
        let probs = softmax_masked(&scores, causal);
        heads.push(matmul(&probs, &vh));
    }
    matmul(&concat_cols(&heads), &param(model, &format!("{prefix}.wo")))
}

fn ffn(model: &Model, x: &Mat, prefix: &str) -> Mat {
    let h = add_bias(&matmul(x, &param(model, &format!("{prefix}.w1"))), &param(model, &format!("{prefix}.b1")));
    add_bias(&matmul(&relu(&h), &param(model, &format!("{prefix}.w2"))), &param(model, &format!("{prefix}.b2")))
}

fn adapter(model: &Model, z: &Mat, prefix: &str) -> Mat {
    let normed = layer_norm(z, &param(model, &format!("{prefix}.lng")), &param(model, &format!("{prefix}.lnb")));
    let down = add_bias(&matmul(&normed, &param(model, &format!("{prefix}.w1"))), &param(model, &format!("{prefix}.b1")));
    let up = add_bias(&matmul(&down, &param(model, &format!("{prefix}.w2"))), &param(model, &format!("{prefix}.b2")));
    add(&up, z)
}

fn norm(model: &Model, x: &Mat, prefix: &str) -> Mat {
    layer_norm(x, &param(model, &format!("{prefix}.g")), &param(model, &format!("{prefix}.b")))
}

fn reference_forward(model: &Model, source: &[u32], target: &[u32]) -> Mat {
    // Encoder.
    let mut x = embed_sequence(model, source);
    for i in 0..model.config.n_enc_layers {
        let p = format!("enc.{i}");
        x = add(&x, &attention(model, &norm(model, &x, &format!("{p}.ln1")), &norm(model, &x, &format!("{p}.ln1")), &format!("{p}.attn"), false));
        x = add(&x, &ffn(model, &norm(model, &x, &format!("{p}.ln2")), &format!("{p}.ffn")));
        if model.has_adapters {
            x = adapter(model, &x, &format!("{p}.adapter"));
        }
    }
    let memory = norm(model, &x, "enc.final_ln");

    // Decoder on bos-shifted input.
    let mut input = vec![BOS];
    input.extend_from_slice(&target[..target.len() - 1]);
    let mut y = embed_sequence(model, &input);
    for i in 0..model.config.n_dec_layers {
        let p = format!("dec.{i}");
        let normed = norm(model, &y, &format!("{p}.ln1"));
        y = add(&y, &attention(model, &normed, &normed, &format!("{p}.attn"), true));
        y = add(&y, &attention(model, &norm(model, &y, &format!("{p}.ln2")), &memory, &format!("{p}.cross"), false));
        y = add(&y, &ffn(model, &norm(model, &y, &format!("{p}.ln3")), &format!("{p}.ffn")));
        if model.has_adapters {
            y = adapter(model, &y, &format!("{p}.adapter"));
        }
    }
    norm(model, &y, "dec.final_ln")
}

fn max_abs_diff(a: &ndarray::Array2<f64>, b: &Mat) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            worst = worst.max((a[[i, j]] - b[i][j]).abs());
        }
    }
    worst
}

#[test]
fn base_forward_matches_straight_line_reference() {
    let cfg = ModelConfig {
        d_model: 8,
        n_enc_layers: 2,
        n_dec_layers: 2,
        n_heads: 2,
        d_ffn: 16,
        adapter_inner: 4,
        max_len: 16,
    };
    let model = Model::new_base(cfg, 20, 11).unwrap();
    let source = [4, 9, 12, EOS];
    let target = [5, 17, 6, 8, EOS];
    let fast = model.forward_teacher_forced(&source, &target).unwrap();
    let slow = reference_forward(&model, &source, &target);
    let diff = max_abs_diff(&fast, &slow);
    assert!(diff < 1e-12, "implementations disagree by {diff:e}");
}

#[test]
fn adapter_forward_matches_straight_line_reference() {
    let cfg = ModelConfig {
        d_model: 8,
        n_enc_layers: 2,
        n_dec_layers: 2,
        n_heads: 2,
        d_ffn: 16,
        adapter_inner: 4,
        max_len: 16,
    };
    let mut model = Model::new_base(cfg, 20, 11).unwrap().with_identity_adapters(3);
    // Knock the adapters off identity so the adapter path really runs.
    for name in ["enc.0.adapter.w2", "enc.1.adapter.w2", "dec.0.adapter.w2", "dec.1.adapter.w2"] {
        let slot = model.params.slot(name);
        let t = model.params.tensor_mut(slot);
        for i in 0..t.nrows() {
            for j in 0..t.ncols() {
                t[[i, j]] = ((i * 7 + j * 3) % 5) as f64 * 0.05 - 0.1;
            }
        }
    }
    let source = [7, 13, EOS];
    let target = [10, 4, 15, EOS];
    let fast = model.forward_teacher_forced(&source, &target).unwrap();
    let slow = reference_forward(&model, &source, &target);
    let diff = max_abs_diff(&fast, &slow);
    assert!(diff < 1e-12, "implementations disagree by {diff:e}");
}
