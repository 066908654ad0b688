//! Gradient-free forward pass with a key/value cache, for sampling.
//!
//! Computes the same function as `model::hidden_states` + `lm_logits`, one
//! position at a time.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore};

const LN_EPS: f64 = 1e-5;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

struct Layer<'a> {
    ln1: (&'a [f64], &'a [f64]),
    qkv: (&'a [f64], &'a [f64]),
    proj: (&'a [f64], &'a [f64]),
    ln2: (&'a [f64], &'a [f64]),
    fc: (&'a [f64], &'a [f64]),
    out: (&'a [f64], &'a [f64]),
}

pub struct Decoder<'a> {
    cfg: ModelConfig,
    tok_emb: &'a [f64],
    pos_emb: &'a [f64],
    layers: Vec<Layer<'a>>,
    ln_f: (&'a [f64], &'a [f64]),
    head: (&'a [f64], &'a [f64]),
    /// Per layer, cached keys and values, `[pos, d]` each.
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

fn layer_norm(x: &[f64], (g, b): (&[f64], &[f64])) -> Vec<f64> {
    let c = x.len() as f64;
    let mean = x.iter().sum::<f64>() / c;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    let rs = 1.0 / (var + LN_EPS).sqrt();
    x.iter().zip(g.iter().zip(b)).map(|(v, (g, b))| (v - mean) * rs * g + b).collect()
}

/// `x · W + b` for a row vector `x` and row-major `W` of `[x.len(), out]`.
fn affine(x: &[f64], (w, b): (&[f64], &[f64])) -> Vec<f64> {
    let out = b.len();
    let mut y = vec![0.0; out];
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * out..(i + 1) * out];
        for (yj, wj) in y.iter_mut().zip(row) {
            *yj += xi * wj;
        }
    }
    for (yj, bj) in y.iter_mut().zip(b) {
        *yj += bj;
    }
    y
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + GELU_C * v * v * v)).tanh())
}

impl<'a> Decoder<'a> {
    pub fn new(cfg: &ModelConfig, params: &'a ParamStore) -> Result<Self> {
        let get = |n: &str| -> Result<&'a [f64]> {
            params
                .get(n)
                .map(|t| t.data.as_slice())
                .ok_or_else(|| Error::invalid(format!("missing parameter {n}")))
        };
        let pair = |p: &str, a: &str, b: &str| -> Result<(&'a [f64], &'a [f64])> {
            Ok((get(&format!("{p}.{a}"))?, get(&format!("{p}.{b}"))?))
        };
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("blocks.{l}");
                Ok(Layer {
                    ln1: pair(&p, "ln1.gamma", "ln1.beta")?,
                    qkv: pair(&p, "attn.qkv.weight", "attn.qkv.bias")?,
                    proj: pair(&p, "attn.proj.weight", "attn.proj.bias")?,
                    ln2: pair(&p, "ln2.gamma", "ln2.beta")?,
                    fc: pair(&p, "mlp.fc.weight", "mlp.fc.bias")?,
                    out: pair(&p, "mlp.proj.weight", "mlp.proj.bias")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: *cfg,
            tok_emb: get("tok_emb")?,
            pos_emb: get("pos_emb")?,
            layers,
            ln_f: pair("ln_f", "gamma", "beta")?,
            head: pair("lm_head", "weight", "bias")?,
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            len: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends one token and returns the next-token logits at its position.
    pub fn push(&mut self, token: u32) -> Result<Vec<f64>> {
        let (d, nh) = (self.cfg.d_model, self.cfg.n_heads);
        let dh = d / nh;
        if self.len >= self.cfg.context_len {
            return Err(Error::invalid(format!("context_len {} exhausted", self.cfg.context_len)));
        }
        if token as usize >= self.cfg.vocab_size {
            return Err(Error::invalid(format!("token {token} outside vocabulary")));
        }
        let t = token as usize;
        let pos = self.len;
        let mut x: Vec<f64> = (0..d).map(|j| self.tok_emb[t * d + j] + self.pos_emb[pos * d + j]).collect();
        let scale = 1.0 / (dh as f64).sqrt();
        for (l, layer) in self.layers.iter().enumerate() {
            let h = layer_norm(&x, layer.ln1);
            let qkv = affine(&h, layer.qkv);
            self.keys[l].extend_from_slice(&qkv[d..2 * d]);
            self.values[l].extend_from_slice(&qkv[2 * d..]);
            let n = pos + 1;
            let mut att = vec![0.0; d];
            for hd in 0..nh {
                let q = &qkv[hd * dh..(hd + 1) * dh];
                let mut s: Vec<f64> = (0..n)
                    .map(|p| {
                        let k = &self.keys[l][p * d + hd * dh..p * d + (hd + 1) * dh];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale
                    })
                    .collect();
                let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in s.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for (p, w) in s.iter().enumerate() {
                    let v = &self.values[l][p * d + hd * dh..p * d + (hd + 1) * dh];
                    for (a, vv) in att[hd * dh..(hd + 1) * dh].iter_mut().zip(v) {
                        *a += w / z * vv;
                    }
                }
            }
            let a = affine(&att, layer.proj);
            x.iter_mut().zip(&a).for_each(|(x, a)| *x += a);
            let h = layer_norm(&x, layer.ln2);
            let m: Vec<f64> = affine(&h, layer.fc).into_iter().map(gelu).collect();
            let m = affine(&m, layer.out);
            x.iter_mut().zip(&m).for_each(|(x, m)| *x += m);
        }
        self.len += 1;
        let h = layer_norm(&x, self.ln_f);
        Ok(affine(&h, self.head))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Checkpoint;
    use crate::lm::logits;

    #[test]
    fn matches_graph_forward() {
        let mut ck = Checkpoint::init(ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            context_len: 16,
            vocab_size: 260,
            seed: 3,
        })
        .unwrap();
        // Larger weights than the init scale exercise the attention softmax.
        for t in ck.params.values_mut() {
            t.data.iter_mut().enumerate().for_each(|(i, v)| *v += 0.05 * ((i % 7) as f64 - 3.0));
        }
        let tokens = [256u32, 10, 200, 65, 65, 3, 259, 97];
        let full = logits(&ck, &tokens).unwrap();
        let mut dec = Decoder::new(&ck.config, &ck.params).unwrap();
        for (i, &t) in tokens.iter().enumerate() {
            let row = dec.push(t).unwrap();
            for (a, b) in row.iter().zip(&full[i]) {
                assert!((a - b).abs() < 1e-10, "position {i}: {a} vs {b}");
            }
        }
        assert_eq!(dec.len(), tokens.len());
    }
}
