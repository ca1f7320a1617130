use rand::Rng;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LayerParams, ModelParams, NormParams};
use crate::error::{Error, Result};
use crate::numerics::{BatchStats, Float, Graph, NormMode, Tensor, Var, NORM_EPS};

/// Query/key/value maps of one head, bound to a graph.
#[derive(Clone, Debug)]
pub struct BoundHead {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub heads: Vec<BoundHead>,
    pub w_a: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
}

/// Model tensors placed on a [`Graph`]. `vars` lists every trainable tensor
/// in [`ModelParams::trainable`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub projection: Var,
    pub positional: Var,
    pub layers: Vec<BoundLayer>,
    pub out_w: Var,
    pub out_b: Var,
    pub vars: Vec<Var>,
}

impl BoundParams {
    /// Rebuild a binding from trainable vars given in
    /// [`ModelParams::trainable`] order.
    pub fn from_vars(vars: &[Var], heads: usize, layers: usize) -> Result<Self> {
        let per_layer = 3 * heads + 9;
        let expected = 2 + layers * per_layer + 2;
        if vars.len() != expected {
            return Err(Error::Param(format!("expected {expected} parameter vars, got {}", vars.len())));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().unwrap();
        let projection = next();
        let positional = next();
        let mut bound_layers = Vec::with_capacity(layers);
        for _ in 0..layers {
            let heads = (0..heads)
                .map(|_| BoundHead {
                    w_q: next(),
                    w_k: next(),
                    w_v: next(),
                })
                .collect();
            bound_layers.push(BoundLayer {
                heads,
                w_a: next(),
                ffn_w1: next(),
                ffn_b1: next(),
                ffn_w2: next(),
                ffn_b2: next(),
                norm1_gain: next(),
                norm1_bias: next(),
                norm2_gain: next(),
                norm2_bias: next(),
            });
        }
        let out_w = next();
        let out_b = next();
        Ok(BoundParams {
            projection,
            positional,
            layers: bound_layers,
            out_w,
            out_b,
            vars: vars.to_vec(),
        })
    }
}

impl<T: Float> ModelParams<T> {
    /// Place every trainable tensor on `g`, as parameters when `trainable`
    /// and as constants otherwise.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        let vars: Vec<Var> = self
            .trainable()
            .into_iter()
            .map(|(_, t)| if trainable { g.param(t) } else { g.constant(t) })
            .collect();
        BoundParams::from_vars(&vars, self.config.heads, self.config.layers).expect("consistent layout")
    }
}

/// `x·P + E`, with `E` broadcast over the batch.
pub fn embed<T: Float>(g: &mut Graph<T>, x: Var, projection: Var, positional: Var) -> Result<Var> {
    let z = g.matmul(x, projection)?;
    g.add_broadcast(z, positional)
}

/// Scaled dot-product attention of one head. Returns the `N×T×D_v` output
/// and the `N×T×T` attention probabilities.
pub fn single_head_attention<T: Float>(g: &mut Graph<T>, z: Var, head: &BoundHead) -> Result<(Var, Var)> {
    let q = g.matmul(z, head.w_q)?;
    let k = g.matmul(z, head.w_k)?;
    let v = g.matmul(z, head.w_v)?;
    let d_qk = *g.shape(head.w_q).last().unwrap();
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, T::from_f64_lossy(1.0 / (d_qk as f64).sqrt()));
    let attn = g.softmax_rows(scores)?;
    let out = g.matmul(attn, v)?;
    Ok((out, attn))
}

/// All heads evaluated together, concatenated along the feature axis and
/// aggregated by `W_A`. Returns the `N×T×D` output and the `N×H×T×T`
/// attention probabilities.
pub fn multi_head_attention<T: Float>(g: &mut Graph<T>, z: Var, layer: &BoundLayer) -> Result<(Var, Var)> {
    let heads = layer.heads.len();
    let d_qk = *g.shape(layer.heads[0].w_q).last().unwrap();
    let wq: Vec<Var> = layer.heads.iter().map(|h| h.w_q).collect();
    let wk: Vec<Var> = layer.heads.iter().map(|h| h.w_k).collect();
    let wv: Vec<Var> = layer.heads.iter().map(|h| h.w_v).collect();
    let wq = g.concat_last(&wq)?;
    let wk = g.concat_last(&wk)?;
    let wv = g.concat_last(&wv)?;
    let q = g.matmul(z, wq)?;
    let q = g.split_heads(q, heads)?;
    let k = g.matmul(z, wk)?;
    let k = g.split_heads(k, heads)?;
    let v = g.matmul(z, wv)?;
    let v = g.split_heads(v, heads)?;
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, T::from_f64_lossy(1.0 / (d_qk as f64).sqrt()));
    let attn = g.softmax_rows(scores)?;
    let out = g.matmul(attn, v)?;
    let out = g.merge_heads(out)?;
    let out = g.matmul(out, layer.w_a)?;
    Ok((out, attn))
}

fn norm_mode<T: Float>(n: &NormParams<T>, training: bool) -> NormMode<'_, T> {
    if training {
        NormMode::Training
    } else {
        NormMode::Inference {
            mean: n.running_mean.data(),
            var: n.running_var.data(),
        }
    }
}

/// Output of one transformer layer.
pub struct LayerOutput<T> {
    pub z: Var,
    pub attention: Var,
    /// Batch statistics of the two norms in training mode.
    pub stats: Vec<BatchStats<T>>,
}

/// Post-residual transformer layer:
/// `z ← Norm(dropout(MSA(z)) + z)`, then `z ← Norm(dropout(FCN(z)) + z)`.
#[allow(clippy::too_many_arguments)]
pub fn transformer_layer<T: Float, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    z: Var,
    bound: &BoundLayer,
    params: &LayerParams<T>,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<LayerOutput<T>> {
    let mut stats = Vec::new();
    let mode = |n| norm_mode(n, training);

    let (msa, attention) = multi_head_attention(g, z, bound)?;
    let msa = g.dropout(msa, dropout, training, rng)?;
    let res = g.add(msa, z)?;
    let (z, s) = g.batch_norm(res, bound.norm1_gain, bound.norm1_bias, mode(&params.norm1), NORM_EPS)?;
    stats.extend(s);

    let h = g.matmul(z, bound.ffn_w1)?;
    let h = g.add_broadcast(h, bound.ffn_b1)?;
    let h = g.gelu(h);
    let h = g.matmul(h, bound.ffn_w2)?;
    let h = g.add_broadcast(h, bound.ffn_b2)?;
    let h = g.dropout(h, dropout, training, rng)?;
    let res = g.add(h, z)?;
    let (z, s) = g.batch_norm(res, bound.norm2_gain, bound.norm2_bias, mode(&params.norm2), NORM_EPS)?;
    stats.extend(s);

    Ok(LayerOutput { z, attention, stats })
}

/// Full forward pass on a graph.
pub struct GraphOutput<T> {
    /// `N×T×M` reconstruction.
    pub recon: Var,
    /// Per layer `N×H×T×T` attention probabilities.
    pub attentions: Vec<Var>,
    pub stats: Vec<BatchStats<T>>,
}

impl<T: Float> ModelParams<T> {
    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 3 || shape[1] != c.window_len || shape[2] != c.channels || shape[0] == 0 {
            return Err(Error::Shape {
                op: "forward",
                lhs: shape.to_vec(),
                rhs: vec![0, c.window_len, c.channels],
            });
        }
        Ok(())
    }

    /// Embed, run every layer, and apply the affine reconstruction head.
    pub fn forward_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<GraphOutput<T>> {
        self.check_input(g.shape(x))?;
        let mut z = embed(g, x, bound.projection, bound.positional)?;
        let mut attentions = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::new();
        for (bl, pl) in bound.layers.iter().zip(&self.layers) {
            let out = transformer_layer(g, z, bl, pl, self.config.dropout, training, rng)?;
            z = out.z;
            attentions.push(out.attention);
            stats.extend(out.stats);
        }
        let recon = g.matmul(z, bound.out_w)?;
        let recon = g.add_broadcast(recon, bound.out_b)?;
        Ok(GraphOutput {
            recon,
            attentions,
            stats,
        })
    }

    /// Inference-mode reconstruction of an `N×T×M` batch (no dropout,
    /// running norm statistics). Attention matrices are returned only when
    /// `capture_attention` is set.
    pub fn forward(&self, x: &Tensor<T>, capture_attention: bool) -> Result<Reconstruction<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        // Dropout is inactive outside training; the generator is never drawn from.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward_graph(&mut g, &bound, xv, false, &mut rng)?;
        let attentions = if capture_attention {
            out.attentions.iter().map(|&a| g.value(a).clone()).collect()
        } else {
            Vec::new()
        };
        Ok(Reconstruction {
            recon: g.value(out.recon).clone(),
            attentions,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Reconstruction<T> {
    pub recon: Tensor<T>,
    pub attentions: Vec<Tensor<T>>,
}
