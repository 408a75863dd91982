//! Mixture-of-Transformers layers: one joint self-attention over the
//! concatenated understanding and planning streams, with modality-specific
//! projections, norms, and feed-forward networks.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Expert, ExpertSet, Init, ParamId, ParamStore};
use crate::tensor::Matrix;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Understanding,
    Planning,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenStream {
    pub embeddings: Matrix,
    pub modality: Modality,
    pub positions: Vec<usize>,
}

impl TokenStream {
    pub fn new(embeddings: Matrix, modality: Modality) -> Self {
        let positions = (0..embeddings.rows()).collect();
        Self {
            embeddings,
            modality,
            positions,
        }
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.embeddings.cols() != d && !self.is_empty() {
            return Err(Error::Shape(format!(
                "{:?} stream width {} != {d}",
                self.modality,
                self.embeddings.cols()
            )));
        }
        if self.positions.len() != self.len() || self.positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "stream positions must be strictly increasing, one per token".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoTActivations {
    pub und: Matrix,
    pub plan: Matrix,
}

/// Query × key admissibility over the concatenated sequence `[und, plan]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n_query: usize,
    n_key: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(n_query: usize, n_key: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allow = (0..n_query)
            .flat_map(|i| (0..n_key).map(move |j| (i, j)))
            .map(|(i, j)| f(i, j))
            .collect();
        Self {
            n_query,
            n_key,
            allow,
        }
    }

    pub fn n_query(&self) -> usize {
        self.n_query
    }

    pub fn n_key(&self) -> usize {
        self.n_key
    }

    #[inline]
    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.n_key + k]
    }

    pub fn allowed_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.n_query)
            .flat_map(|i| (0..self.n_key).map(move |j| (i, j)))
            .filter(|&(i, j)| self.allows(i, j))
            .collect()
    }
}

/// Understanding tokens attend causally among themselves and never to
/// planning tokens; planning tokens attend to everything.
pub fn build_mask(n_und: usize, n_plan: usize) -> AttentionMask {
    let n = n_und + n_plan;
    AttentionMask::from_fn(n, n, |q, k| {
        if q < n_und {
            k <= q
        } else {
            true
        }
    })
}

/// Attention and FFN parameters of one modality inside one layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModalityParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w_qkv: ParamId,
    pub b_qkv: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w_fc1: ParamId,
    pub b_fc1: ParamId,
    pub w_fc2: ParamId,
    pub b_fc2: ParamId,
}

impl ModalityParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        expert: Expert,
        d: usize,
        ffn: usize,
        rng: &mut R,
    ) -> Self {
        let mut add = |name: &str, r, c, init| store.add(format!("{prefix}.{name}"), expert, r, c, init, rng);
        Self {
            ln1_g: add("ln1.g", 1, d, Init::Ones),
            ln1_b: add("ln1.b", 1, d, Init::Zeros),
            w_qkv: add("attn.w_qkv", d, 3 * d, Init::Normal(INIT_STD)),
            b_qkv: add("attn.b_qkv", 1, 3 * d, Init::Zeros),
            w_o: add("attn.w_o", d, d, Init::Normal(INIT_STD)),
            b_o: add("attn.b_o", 1, d, Init::Zeros),
            ln2_g: add("ln2.g", 1, d, Init::Ones),
            ln2_b: add("ln2.b", 1, d, Init::Zeros),
            w_fc1: add("ffn.w1", d, ffn, Init::Normal(INIT_STD)),
            b_fc1: add("ffn.b1", 1, ffn, Init::Zeros),
            w_fc2: add("ffn.w2", ffn, d, Init::Normal(INIT_STD)),
            b_fc2: add("ffn.b2", 1, d, Init::Zeros),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotLayerParams {
    pub und: ModalityParams,
    pub plan: ModalityParams,
}

impl MotLayerParams {
    /// Both modalities share one parameter set; the layer degenerates to a
    /// single-stream transformer block.
    pub fn tied(p: ModalityParams) -> Self {
        Self { und: p, plan: p }
    }
}

/// Joint attention: modality-specific QKV, one masked multi-head attention
/// over `[und, plan]`, modality-specific output projection. Returns the
/// per-modality attention outputs.
pub fn mot_attention(
    g: &mut Graph,
    und: Var,
    plan: Var,
    params: &MotLayerParams,
    mask: &Arc<AttentionMask>,
    heads: usize,
) -> (Var, Var) {
    let n_und = g.value(und).rows();
    let n_plan = g.value(plan).rows();
    let d = g.store().value(params.und.w_o).rows();

    let qkv_u = project(g, und, params.und.w_qkv, params.und.b_qkv);
    let qkv_p = project(g, plan, params.plan.w_qkv, params.plan.b_qkv);
    let qkv = g.concat_rows(&[qkv_u, qkv_p]);
    let q = g.slice_cols(qkv, 0, d);
    let k = g.slice_cols(qkv, d, d);
    let v = g.slice_cols(qkv, 2 * d, d);
    let o = g.attention(q, k, v, heads, Some(mask));

    let o_u = g.slice_rows(o, 0, n_und);
    let o_p = g.slice_rows(o, n_und, n_plan);
    let o_u = project(g, o_u, params.und.w_o, params.und.b_o);
    let o_p = project(g, o_p, params.plan.w_o, params.plan.b_o);
    (o_u, o_p)
}

fn project(g: &mut Graph, x: Var, w: ParamId, b: ParamId) -> Var {
    let (w, b) = (g.param(w), g.param(b));
    g.linear(x, w, b)
}

fn ffn(g: &mut Graph, x: Var, p: &ModalityParams) -> Var {
    let h = project(g, x, p.w_fc1, p.b_fc1);
    let h = g.gelu(h);
    project(g, h, p.w_fc2, p.b_fc2)
}

fn norm(g: &mut Graph, x: Var, gain: ParamId, bias: ParamId) -> Var {
    let (gain, bias) = (g.param(gain), g.param(bias));
    g.layer_norm_affine(x, gain, bias)
}

/// Pre-norm MoT block: `h = x + Attn(LN1(x))`, `out = h + FFN(LN2(h))`, with
/// every parameter chosen per modality.
pub fn mot_layer(
    g: &mut Graph,
    und: Var,
    plan: Var,
    params: &MotLayerParams,
    mask: &Arc<AttentionMask>,
    heads: usize,
) -> (Var, Var) {
    let a_u = norm(g, und, params.und.ln1_g, params.und.ln1_b);
    let a_p = norm(g, plan, params.plan.ln1_g, params.plan.ln1_b);
    let (o_u, o_p) = mot_attention(g, a_u, a_p, params, mask, heads);
    let h_u = g.add(und, o_u);
    let h_p = g.add(plan, o_p);

    let f_u = norm(g, h_u, params.und.ln2_g, params.und.ln2_b);
    let f_u = ffn(g, f_u, &params.und);
    let f_p = norm(g, h_p, params.plan.ln2_g, params.plan.ln2_b);
    let f_p = ffn(g, f_p, &params.plan);
    (g.add(h_u, f_u), g.add(h_p, f_p))
}

fn check_streams(store: &ParamStore, und: &TokenStream, plan: &TokenStream, params: &MotLayerParams, heads: usize) -> Result<()> {
    let d = store.value(params.und.w_o).rows();
    und.validate(d)?;
    plan.validate(d)?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("{heads} heads do not divide width {d}")));
    }
    Ok(())
}

fn as_input(m: &Matrix, d: usize) -> Matrix {
    if m.rows() == 0 {
        Matrix::zeros(0, d)
    } else {
        m.clone()
    }
}

/// Evaluate [`mot_attention`] outside a training graph.
pub fn eval_attention(
    store: &ParamStore,
    und: &TokenStream,
    plan: &TokenStream,
    params: &MotLayerParams,
    heads: usize,
) -> Result<MoTActivations> {
    check_streams(store, und, plan, params, heads)?;
    let d = store.value(params.und.w_o).rows();
    let mask = Arc::new(build_mask(und.len(), plan.len()));
    let mut g = Graph::new(store, ExpertSet::NONE);
    let u = g.constant(as_input(&und.embeddings, d));
    let p = g.constant(as_input(&plan.embeddings, d));
    let (ou, op) = mot_attention(&mut g, u, p, params, &mask, heads);
    Ok(MoTActivations {
        und: g.value(ou).clone(),
        plan: g.value(op).clone(),
    })
}

/// Evaluate [`mot_layer`] outside a training graph.
pub fn eval_layer(
    store: &ParamStore,
    und: &TokenStream,
    plan: &TokenStream,
    params: &MotLayerParams,
    heads: usize,
) -> Result<MoTActivations> {
    check_streams(store, und, plan, params, heads)?;
    let d = store.value(params.und.w_o).rows();
    let mask = Arc::new(build_mask(und.len(), plan.len()));
    let mut g = Graph::new(store, ExpertSet::NONE);
    let u = g.constant(as_input(&und.embeddings, d));
    let p = g.constant(as_input(&plan.embeddings, d));
    let (ou, op) = mot_layer(&mut g, u, p, params, &mask, heads);
    Ok(MoTActivations {
        und: g.value(ou).clone(),
        plan: g.value(op).clone(),
    })
}
