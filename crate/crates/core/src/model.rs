//! Tiny pre-norm decoder-only transformer with learned positional embeddings.

use std::collections::{BTreeMap, HashMap};

use okapi_autodiff::{Graph, NodeId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::VOCAB_SIZE;

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            context_len: 256,
            vocab_size: VOCAB_SIZE,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context_len < 16 {
            return Err(Error::Config(format!("context_len {} < 16", self.context_len)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Shapes of every trunk and LM-head parameter, keyed by name.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (d, v) = (self.d_model, self.vocab_size);
        let mut s = BTreeMap::new();
        s.insert("tok_emb".to_string(), vec![v, d]);
        s.insert("pos_emb".to_string(), vec![self.context_len, d]);
        for l in 0..self.n_layers {
            let p = format!("blocks.{l}");
            s.insert(format!("{p}.ln1.gamma"), vec![d]);
            s.insert(format!("{p}.ln1.beta"), vec![d]);
            s.insert(format!("{p}.attn.qkv.weight"), vec![d, 3 * d]);
            s.insert(format!("{p}.attn.qkv.bias"), vec![3 * d]);
            s.insert(format!("{p}.attn.proj.weight"), vec![d, d]);
            s.insert(format!("{p}.attn.proj.bias"), vec![d]);
            s.insert(format!("{p}.ln2.gamma"), vec![d]);
            s.insert(format!("{p}.ln2.beta"), vec![d]);
            s.insert(format!("{p}.mlp.fc.weight"), vec![d, 4 * d]);
            s.insert(format!("{p}.mlp.fc.bias"), vec![4 * d]);
            s.insert(format!("{p}.mlp.proj.weight"), vec![4 * d, d]);
            s.insert(format!("{p}.mlp.proj.bias"), vec![d]);
        }
        s.insert("ln_f.gamma".to_string(), vec![d]);
        s.insert("ln_f.beta".to_string(), vec![d]);
        s.insert("lm_head.weight".to_string(), vec![d, v]);
        s.insert("lm_head.bias".to_string(), vec![v]);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }
}

pub type ParamStore = BTreeMap<String, Tensor>;
pub type Grads = BTreeMap<String, Vec<f64>>;

/// Seeded initialization: normal(0, 0.02) weights, zero biases, unit LN gains.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = ParamStore::new();
    for (name, shape) in cfg.param_shapes() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".gamma") {
            vec![1.0; n]
        } else if name.ends_with(".bias") || name.ends_with(".beta") {
            vec![0.0; n]
        } else {
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        out.insert(name, Tensor { shape, data });
    }
    Ok(out)
}

/// Name-to-node map of parameters placed in a graph.
pub struct Bound {
    nodes: HashMap<String, NodeId>,
}

impl Bound {
    /// Places every parameter in `g`; names accepted by `trainable` become
    /// gradient-tracking leaves, the rest constants.
    pub fn bind(params: &ParamStore, g: &mut Graph, trainable: &dyn Fn(&str) -> bool) -> Result<Self> {
        let mut nodes = HashMap::with_capacity(params.len());
        for (name, t) in params {
            let id = if trainable(name) {
                g.param(t.data.clone(), &t.shape)?
            } else {
                g.constant(t.data.clone(), &t.shape)?
            };
            nodes.insert(name.clone(), id);
        }
        Ok(Self { nodes })
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    /// Gradients of all tracking leaves, scaled by `scale`.
    pub fn grads(&self, g: &Graph, scale: f64) -> Grads {
        self.nodes
            .iter()
            .filter(|(_, &id)| g.requires_grad(id))
            .map(|(n, &id)| (n.clone(), g.grad(id).iter().map(|v| v * scale).collect()))
            .collect()
    }
}

pub fn add_grads(acc: &mut Grads, other: Grads) {
    for (name, g) in other {
        match acc.get_mut(&name) {
            Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
            None => {
                acc.insert(name, g);
            }
        }
    }
}

pub fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    if tokens.len() > cfg.context_len {
        return Err(Error::invalid(format!(
            "sequence of {} tokens exceeds context_len {}",
            tokens.len(),
            cfg.context_len
        )));
    }
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::invalid(format!("token {t} outside vocabulary of {}", cfg.vocab_size)));
    }
    Ok(())
}

/// Final-norm trunk states, `[tokens.len(), d_model]`.
pub fn hidden_states(cfg: &ModelConfig, g: &mut Graph, b: &Bound, tokens: &[u32]) -> Result<NodeId> {
    check_tokens(cfg, tokens)?;
    let t = tokens.len();
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
    let tok = g.embedding(b.get("tok_emb")?, &ids)?;
    let pos = g.slice(b.get("pos_emb")?, 0, 0, t)?;
    let mut x = g.add(tok, pos)?;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        let h = g.layer_norm(x, b.get(&p("ln1.gamma"))?, b.get(&p("ln1.beta"))?, LN_EPS)?;
        let qkv = g.matmul(h, b.get(&p("attn.qkv.weight"))?)?;
        let qkv = g.add_bias(qkv, b.get(&p("attn.qkv.bias"))?)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let q = g.slice(qkv, 1, hd * dh, dh)?;
            let k = g.slice(qkv, 1, d + hd * dh, dh)?;
            let v = g.slice(qkv, 1, 2 * d + hd * dh, dh)?;
            let kt = g.transpose(k)?;
            let s = g.matmul(q, kt)?;
            let s = g.scale(s, inv_sqrt);
            let s = g.causal_mask(s)?;
            let a = g.softmax(s);
            heads.push(g.matmul(a, v)?);
        }
        let att = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
        let att = g.matmul(att, b.get(&p("attn.proj.weight"))?)?;
        let att = g.add_bias(att, b.get(&p("attn.proj.bias"))?)?;
        x = g.add(x, att)?;
        let h = g.layer_norm(x, b.get(&p("ln2.gamma"))?, b.get(&p("ln2.beta"))?, LN_EPS)?;
        let m = g.matmul(h, b.get(&p("mlp.fc.weight"))?)?;
        let m = g.add_bias(m, b.get(&p("mlp.fc.bias"))?)?;
        let m = g.gelu(m);
        let m = g.matmul(m, b.get(&p("mlp.proj.weight"))?)?;
        let m = g.add_bias(m, b.get(&p("mlp.proj.bias"))?)?;
        x = g.add(x, m)?;
    }
    Ok(g.layer_norm(x, b.get("ln_f.gamma")?, b.get("ln_f.beta")?, LN_EPS)?)
}

pub fn lm_logits(g: &mut Graph, b: &Bound, hidden: NodeId) -> Result<NodeId> {
    let z = g.matmul(hidden, b.get("lm_head.weight")?)?;
    Ok(g.add_bias(z, b.get("lm_head.bias")?)?)
}

/// Scalar linear head (`{prefix}.weight` `[d, 1]`, `{prefix}.bias` `[1]`) applied to every row.
pub fn scalar_head(g: &mut Graph, b: &Bound, hidden: NodeId, prefix: &str) -> Result<NodeId> {
    let z = g.matmul(hidden, b.get(&format!("{prefix}.weight"))?)?;
    Ok(g.add_bias(z, b.get(&format!("{prefix}.bias"))?)?)
}

pub fn add_scalar_head(params: &mut ParamStore, d_model: usize, prefix: &str) {
    params.insert(format!("{prefix}.weight"), Tensor::zeros(&[d_model, 1]));
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[1]));
}
