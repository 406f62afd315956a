mod common;

use common::{lively_model, tiny_config};
use kdlab::model::{lm_loss, Transformer};
use kdlab::numerics::{Graph, Tensor};

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    let (r, c) = t.dims2();
    (0..r).map(|i| (0..c).map(|j| t.at(i, j)).collect()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Straight-line forward pass written from the architecture description.
fn oracle_logits(m: &Transformer, tokens: &[u32]) -> Mat {
    let c = &m.config;
    let p = &m.params;
    let dk = c.d_model / c.n_heads;
    let tok = mat(&p.token_embedding);
    let pos = mat(&p.position_embedding);
    let mut x: Mat = tokens
        .iter()
        .enumerate()
        .map(|(t, &id)| (0..c.d_model).map(|j| tok[id as usize][j] + pos[t][j]).collect())
        .collect();
    let n = tokens.len();
    for l in &p.layers {
        let h = layer_norm(&x, l.ln1_gain.data(), l.ln1_bias.data());
        let (q, k, v) = (mm(&h, &mat(&l.wq)), mm(&h, &mat(&l.wk)), mm(&h, &mat(&l.wv)));
        let mut attn = vec![vec![0.0; c.d_model]; n];
        for head in 0..c.n_heads {
            let off = head * dk;
            for i in 0..n {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..dk).map(|d| q[i][off + d] * k[j][off + d]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for d in 0..dk {
                    attn[i][off + d] = (0..=i).map(|j| e[j] / z * v[j][off + d]).sum();
                }
            }
        }
        let o = mm(&attn, &mat(&l.wo));
        for i in 0..n {
            for j in 0..c.d_model {
                x[i][j] += o[i][j];
            }
        }
        let h2 = layer_norm(&x, l.ln2_gain.data(), l.ln2_bias.data());
        let mut hid = mm(&h2, &mat(&l.w1));
        for row in &mut hid {
            for (j, v) in row.iter_mut().enumerate() {
                *v = gelu(*v + l.b1.data()[j]);
            }
        }
        let out = mm(&hid, &mat(&l.w2));
        for i in 0..n {
            for j in 0..c.d_model {
                x[i][j] += out[i][j] + l.b2.data()[j];
            }
        }
    }
    let xf = layer_norm(&x, p.final_gain.data(), p.final_bias.data());
    mm(&xf, &mat(&p.output_projection))
}

#[test]
fn forward_matches_scalar_oracle() {
    for (layers, d, heads, seed) in [(1, 4, 2, 1), (2, 6, 3, 2), (2, 8, 1, 3)] {
        let m = lively_model(tiny_config(7, layers, d, heads), seed);
        let tokens = [0, 3, 6, 1, 1, 5];
        let got = m.forward_logits(&tokens).unwrap();
        let want = oracle_logits(&m, &tokens);
        for (i, row) in want.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                assert!((got.at(i, j) - w).abs() <= 1e-12, "({i},{j}) {} vs {w}", got.at(i, j));
            }
        }
    }
}

#[test]
fn causality_prefix_logits_unchanged() {
    let m = lively_model(tiny_config(7, 2, 6, 2), 9);
    let full = m.forward_logits(&[1, 2, 3, 4, 5]).unwrap();
    let pre = m.forward_logits(&[1, 2, 3]).unwrap();
    for i in 0..3 {
        for j in 0..7 {
            assert_eq!(full.at(i, j), pre.at(i, j));
        }
    }
}

#[test]
fn lm_loss_hand_example() {
    // uniform logits over 4 classes: loss is ln 4 regardless of targets
    let mut g = Graph::new();
    let l = g.param(Tensor::zeros(&[3, 4]));
    let loss = lm_loss(&mut g, l, &[0, 1, 2], &[true, true, false]).unwrap();
    assert!((g.value(loss).data()[0] - 4f64.ln()).abs() < 1e-15);

    // logits [ln 1, ln 3] -> p(target 1) = 3/4
    let mut g = Graph::new();
    let l = g.param(Tensor::new(&[1, 2], vec![0.0, 3f64.ln()]).unwrap());
    let loss = lm_loss(&mut g, l, &[1], &[true]).unwrap();
    assert!((g.value(loss).data()[0] + 0.75f64.ln()).abs() < 1e-15);

    let mut g = Graph::new();
    let l = g.param(Tensor::zeros(&[2, 4]));
    assert!(lm_loss(&mut g, l, &[0, 1], &[false, false]).is_err());
}

#[test]
fn sequence_log_probs_match_oracle_softmax() {
    let m = lively_model(tiny_config(7, 1, 4, 2), 4);
    let tokens = [2, 4, 6, 0, 3];
    let lp = m.sequence_log_probs(&tokens, 2).unwrap();
    let logits = oracle_logits(&m, &tokens[..4]);
    for (k, t) in (2..5).enumerate() {
        let row = &logits[t - 1];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((lp[k] - (row[tokens[t] as usize] - lse)).abs() < 1e-12);
    }
}

#[test]
fn out_of_range_tokens_and_overlong_inputs_are_errors() {
    let m = Transformer::new(tiny_config(7, 1, 4, 2), 0).unwrap();
    assert!(m.forward_logits(&[7]).is_err());
    assert!(m.forward_logits(&[0; 17]).is_err());
    assert!(m.forward_logits(&[]).is_err());
}
