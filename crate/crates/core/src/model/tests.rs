use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{gelu_scalar, gradient_check, Graph, Tensor, Var, NORM_EPS};

// Plain nested-loop reference arithmetic, independent of the tape.

fn mm(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut c = vec![0.0; p * r];
    for i in 0..p {
        for j in 0..r {
            for k in 0..q {
                c[i * r + j] += a[i * q + k] * b[k * r + j];
            }
        }
    }
    c
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Scaled dot-product attention for one item: z is T×D.
fn attention_oracle(z: &[f64], t: usize, d: usize, wq: &[f64], wk: &[f64], wv: &[f64], dq: usize, dv: usize) -> Vec<f64> {
    let q = mm(z, wq, t, d, dq);
    let k = mm(z, wk, t, d, dq);
    let v = mm(z, wv, t, d, dv);
    let mut out = vec![0.0; t * dv];
    for i in 0..t {
        let scores: Vec<f64> = (0..t)
            .map(|j| (0..dq).map(|c| q[i * dq + c] * k[j * dq + c]).sum::<f64>() / (dq as f64).sqrt())
            .collect();
        let w = softmax(&scores);
        for j in 0..t {
            for c in 0..dv {
                out[i * dv + c] += w[j] * v[j * dv + c];
            }
        }
    }
    out
}

fn msa_oracle(z: &[f64], n: usize, t: usize, d: usize, layer: &LayerParams<f64>) -> Vec<f64> {
    let h = layer.heads.len();
    let dq = layer.heads[0].w_q.shape()[1];
    let dv = layer.heads[0].w_v.shape()[1];
    let mut out = Vec::new();
    for b in 0..n {
        let zb = &z[b * t * d..(b + 1) * t * d];
        let mut cat = vec![0.0; t * h * dv];
        for (hi, head) in layer.heads.iter().enumerate() {
            let o = attention_oracle(zb, t, d, head.w_q.data(), head.w_k.data(), head.w_v.data(), dq, dv);
            for ti in 0..t {
                for c in 0..dv {
                    cat[ti * h * dv + hi * dv + c] = o[ti * dv + c];
                }
            }
        }
        out.extend(mm(&cat, layer.w_a.data(), t, h * dv, d));
    }
    out
}

fn batch_norm_oracle(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    for j in 0..d {
        let col: Vec<f64> = (0..rows).map(|r| x[r * d + j]).collect();
        let mean = col.iter().sum::<f64>() / rows as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
        for r in 0..rows {
            out[r * d + j] = (x[r * d + j] - mean) / (var + NORM_EPS).sqrt() * gain[j] + bias[j];
        }
    }
    out
}

fn layer_oracle(z: &[f64], n: usize, t: usize, d: usize, layer: &LayerParams<f64>) -> Vec<f64> {
    let msa = msa_oracle(z, n, t, d, layer);
    let res: Vec<f64> = msa.iter().zip(z).map(|(a, b)| a + b).collect();
    let z1 = batch_norm_oracle(&res, d, layer.norm1.gain.data(), layer.norm1.bias.data());
    let f = layer.ffn_w1.shape()[1];
    let mut h = mm(&z1, layer.ffn_w1.data(), n * t, d, f);
    for (i, v) in h.iter_mut().enumerate() {
        *v = gelu_scalar(*v + layer.ffn_b1.data()[i % f]);
    }
    let mut h2 = mm(&h, layer.ffn_w2.data(), n * t, f, d);
    for (i, v) in h2.iter_mut().enumerate() {
        *v += layer.ffn_b2.data()[i % d] + z1[i];
    }
    batch_norm_oracle(&h2, d, layer.norm2.gain.data(), layer.norm2.bias.data())
}

fn randomize(params: &mut ModelParams<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t, trainable) in params.named_tensors_mut() {
        if trainable {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
        }
    }
}

fn random_input(n: usize, t: usize, m: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([n, t, m], |_| rng.random_range(-2.0..2.0))
}

fn no_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

#[test]
fn param_count_matches_closed_form() {
    for cfg in [ModelConfig::tiny(), ModelConfig::new(128, 4), ModelConfig { heads: 3, d_v: 5, ..ModelConfig::new(16, 7) }] {
        let p = ModelParams::<f32>::init(&cfg).unwrap();
        assert_eq!(p.param_count(), cfg.param_count());
    }
    // Independent tally for the tiny config: P 16, E 64,
    // heads 2·(8·4·3)=192, W_A 64, FCN 8·16+16+16·8+8=280, norms 32, head 18.
    assert_eq!(ModelConfig::tiny().param_count(), 16 + 64 + 192 + 64 + 280 + 32 + 18);
}

#[test]
fn invalid_config_rejected() {
    assert!(ModelConfig { heads: 0, ..ModelConfig::tiny() }.validate().is_err());
    assert!(ModelConfig { dropout: 1.0, ..ModelConfig::tiny() }.validate().is_err());
}

#[test]
fn embed_examples() {
    let cfg = ModelConfig::tiny();
    let mut p = ModelParams::<f64>::init(&cfg).unwrap();
    randomize(&mut p, 1);
    let x = random_input(3, 8, 2, 2);

    // P = 0 → E for every item.
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pv = g.constant(Tensor::zeros([2, 8]));
    let ev = g.constant(p.positional.clone());
    let zv = embed(&mut g, xv, pv, ev).unwrap();
    let z = g.value(zv).clone();
    for b in 0..3 {
        assert_eq!(z.index_first(b), p.positional);
    }

    // E = 0, one-hot channel 1 → rows of P.
    let onehot = Tensor::from_fn([1, 8, 2], |i| if i % 2 == 1 { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let xv = g.constant(onehot);
    let pv = g.constant(p.projection.clone());
    let ev = g.constant(Tensor::zeros([8, 8]));
    let zv = embed(&mut g, xv, pv, ev).unwrap();
    let z = g.value(zv).clone();
    for t in 0..8 {
        for c in 0..8 {
            assert_eq!(z.at(&[0, t, c]), p.projection.at(&[1, c]));
        }
    }

    // Random: direct evaluation.
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pv = g.constant(p.projection.clone());
    let ev = g.constant(p.positional.clone());
    let zv = embed(&mut g, xv, pv, ev).unwrap();
    let z = g.value(zv).clone();
    for b in 0..3 {
        for t in 0..8 {
            for c in 0..8 {
                let direct: f64 = (0..2).map(|m| x.at(&[b, t, m]) * p.projection.at(&[m, c])).sum::<f64>() + p.positional.at(&[t, c]);
                assert!((z.at(&[b, t, c]) - direct).abs() < 1e-12);
            }
        }
    }
}

fn bind_head(g: &mut Graph<f64>, h: &HeadParams<f64>) -> BoundHead {
    BoundHead {
        w_q: g.constant(h.w_q.clone()),
        w_k: g.constant(h.w_k.clone()),
        w_v: g.constant(h.w_v.clone()),
    }
}

#[test]
fn single_head_attention_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let head = HeadParams {
        w_q: Tensor::from_fn([4, 3], |_| rng.random_range(-1.0..1.0)),
        w_k: Tensor::from_fn([4, 3], |_| rng.random_range(-1.0..1.0)),
        w_v: Tensor::from_fn([4, 2], |_| rng.random_range(-1.0..1.0)),
    };

    // T = 1: weight 1, output z·W_v.
    let z1 = Tensor::from_fn([1, 1, 4], |i| i as f64 - 1.5);
    let mut g = Graph::new();
    let zv = g.constant(z1.clone());
    let bh = bind_head(&mut g, &head);
    let (out, attn) = single_head_attention(&mut g, zv, &bh).unwrap();
    assert_eq!(g.value(attn).data(), &[1.0]);
    let expect = mm(z1.data(), head.w_v.data(), 1, 4, 2);
    assert!(g.value(out).data().iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-12));

    // W_q = 0: uniform attention, every row = column mean of z·W_v.
    let z3 = Tensor::from_fn([1, 3, 4], |_| rng.random_range(-1.0..1.0));
    let zero_q = HeadParams { w_q: Tensor::zeros([4, 3]), ..head.clone() };
    let mut g = Graph::new();
    let zv = g.constant(z3.clone());
    let bh = bind_head(&mut g, &zero_q);
    let (out, attn) = single_head_attention(&mut g, zv, &bh).unwrap();
    assert!(g.value(attn).data().iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-12));
    let v = mm(z3.data(), head.w_v.data(), 3, 4, 2);
    for c in 0..2 {
        let mean = (v[c] + v[2 + c] + v[4 + c]) / 3.0;
        for t in 0..3 {
            assert!((g.value(out).at(&[0, t, c]) - mean).abs() < 1e-12);
        }
    }

    // Random T = 3, D = 4: direct formula.
    let mut g = Graph::new();
    let zv = g.constant(z3.clone());
    let bh = bind_head(&mut g, &head);
    let (out, _) = single_head_attention(&mut g, zv, &bh).unwrap();
    let expect = attention_oracle(z3.data(), 3, 4, head.w_q.data(), head.w_k.data(), head.w_v.data(), 3, 2);
    assert!(g.value(out).data().iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-12));
}

fn bind_layer(g: &mut Graph<f64>, l: &LayerParams<f64>) -> BoundLayer {
    BoundLayer {
        heads: l.heads.iter().map(|h| bind_head(g, h)).collect(),
        w_a: g.constant(l.w_a.clone()),
        ffn_w1: g.constant(l.ffn_w1.clone()),
        ffn_b1: g.constant(l.ffn_b1.clone()),
        ffn_w2: g.constant(l.ffn_w2.clone()),
        ffn_b2: g.constant(l.ffn_b2.clone()),
        norm1_gain: g.constant(l.norm1.gain.clone()),
        norm1_bias: g.constant(l.norm1.bias.clone()),
        norm2_gain: g.constant(l.norm2.gain.clone()),
        norm2_bias: g.constant(l.norm2.bias.clone()),
    }
}

#[test]
fn multi_head_attention_examples() {
    // H = 1 with W_A = I equals the single head.
    let cfg = ModelConfig { heads: 1, d_qk: 3, d_v: 8, ..ModelConfig::tiny() };
    let mut p = ModelParams::<f64>::init(&cfg).unwrap();
    randomize(&mut p, 4);
    p.layers[0].w_a = Tensor::eye(8);
    let z = random_input(2, 8, 8, 5);
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let bl = bind_layer(&mut g, &p.layers[0]);
    let (multi, _) = multi_head_attention(&mut g, zv, &bl).unwrap();
    let (single, _) = single_head_attention(&mut g, zv, &bl.heads[0]).unwrap();
    assert!(g.value(multi).max_abs_diff(g.value(single)) < 1e-12);

    // W_A = 0 → zero output.
    let mut p2 = p.clone();
    p2.layers[0].w_a = Tensor::zeros([8, 8]);
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let bl = bind_layer(&mut g, &p2.layers[0]);
    let (out, _) = multi_head_attention(&mut g, zv, &bl).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));

    // H = 2: concatenate-then-multiply oracle.
    let mut p = ModelParams::<f64>::init(&ModelConfig::tiny()).unwrap();
    randomize(&mut p, 6);
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let bl = bind_layer(&mut g, &p.layers[0]);
    let (out, attn) = multi_head_attention(&mut g, zv, &bl).unwrap();
    assert_eq!(g.shape(attn), &[2, 2, 8, 8]);
    let expect = msa_oracle(z.data(), 2, 8, 8, &p.layers[0]);
    assert!(g.value(out).data().iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-10));
}

#[test]
fn transformer_layer_examples() {
    let cfg = ModelConfig::tiny();
    let z = random_input(3, 8, 8, 7);

    // Zero MSA/FCN weights: output is the batch-normalized input.
    let mut p = ModelParams::<f64>::init(&cfg).unwrap();
    let l = &mut p.layers[0];
    l.w_a = Tensor::zeros([8, 8]);
    l.ffn_w1 = Tensor::zeros([8, 16]);
    l.ffn_w2 = Tensor::zeros([16, 8]);
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let bl = bind_layer(&mut g, &p.layers[0]);
    let out = transformer_layer(&mut g, zv, &bl, &p.layers[0], 0.0, true, &mut no_rng()).unwrap();
    assert_eq!(g.shape(out.z), &[3, 8, 8]);
    let bn = batch_norm_oracle(z.data(), 8, &[1.0; 8], &[0.0; 8]);
    // The second norm re-normalizes an already normalized tensor.
    let bn2 = batch_norm_oracle(&bn, 8, &[1.0; 8], &[0.0; 8]);
    assert!(g.value(out.z).data().iter().zip(&bn2).all(|(a, b)| (a - b).abs() < 1e-9));
    assert!(bn.iter().zip(&bn2).all(|(a, b)| (a - b).abs() < 1e-4));

    // Random: step-by-step recomputation.
    let mut p = ModelParams::<f64>::init(&cfg).unwrap();
    randomize(&mut p, 8);
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let bl = bind_layer(&mut g, &p.layers[0]);
    let out = transformer_layer(&mut g, zv, &bl, &p.layers[0], 0.0, true, &mut no_rng()).unwrap();
    let expect = layer_oracle(z.data(), 3, 8, 8, &p.layers[0]);
    assert!(g.value(out.z).data().iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-9));
    assert_eq!(out.stats.len(), 2);
}

#[test]
fn forward_shapes_finiteness_and_determinism() {
    let cfg = ModelConfig::new(16, 3);
    let p = ModelParams::<f32>::init(&cfg).unwrap();
    let zeros = Tensor::zeros([2, 16, 3]);
    let r = p.forward(&zeros, true).unwrap();
    assert_eq!(r.recon.shape(), &[2, 16, 3]);
    assert!(r.recon.all_finite());
    assert_eq!(r.attentions.len(), 3);
    assert_eq!(r.attentions[0].shape(), &[2, 8, 16, 16]);

    let x = random_input(4, 16, 3, 9).cast::<f32>();
    let a = p.forward(&x, false).unwrap();
    let b = p.forward(&x, false).unwrap();
    assert!(a.attentions.is_empty());
    assert_eq!(a.recon.data(), b.recon.data());
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = ModelConfig::new(12, 2);
    let p = ModelParams::<f32>::init(&cfg).unwrap();
    let x = random_input(3, 12, 2, 10).cast::<f32>();
    let r = p.forward(&x, true).unwrap();
    for a in &r.attentions {
        for row in a.data().chunks(12) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn inference_forward_is_batch_permutation_equivariant() {
    let cfg = ModelConfig { layers: 2, ..ModelConfig::new(10, 3) };
    let mut p = ModelParams::<f64>::init(&cfg).unwrap();
    randomize(&mut p, 11);
    let x = random_input(4, 10, 3, 12);
    let perm = [2, 0, 3, 1];
    let xp = Tensor::stack(&perm.iter().map(|&i| x.index_first(i)).collect::<Vec<_>>()).unwrap();
    let a = p.forward(&x, false).unwrap().recon;
    let b = p.forward(&xp, false).unwrap().recon;
    for (k, &i) in perm.iter().enumerate() {
        assert!(a.index_first(i).max_abs_diff(&b.index_first(k)) < 1e-12);
    }
}

#[test]
fn forward_rejects_wrong_shape() {
    let p = ModelParams::<f32>::init(&ModelConfig::tiny()).unwrap();
    assert!(p.forward(&Tensor::zeros([1, 8, 3]), false).is_err());
    assert!(p.forward(&Tensor::zeros([8, 2]), false).is_err());
}

#[test]
fn tiny_model_masked_loss_passes_gradient_check() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::<f64>::init(&cfg).unwrap();
    let x = random_input(2, 8, 2, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mask: Rc<Vec<bool>> = Rc::new((0..x.len()).map(|_| rng.random::<f64>() < 0.4).collect());
    let masked_input = Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(mask.iter()).map(|(&v, &m)| if m { 0.0 } else { v }).collect(),
    )
    .unwrap();
    let report = gradient_check(
        &params.trainable(),
        |g, vars: &[Var]| {
            let bound = BoundParams::from_vars(vars, cfg.heads, cfg.layers)?;
            let xv = g.constant(masked_input.clone());
            let out = params.forward_graph(g, &bound, xv, true, &mut no_rng())?;
            g.masked_mse(out.recon, &x, mask.clone())
        },
        1e-4,
    )
    .unwrap();
    assert_eq!(report.entries.len(), params.trainable().len());
}
