//! The three experts and their wiring.
//!
//! Understanding: frame patches and text tokens run through the
//! understanding side of the MoT stack and an LM head. Planning: history
//! states and the noised action chunk form the planning side of the same
//! stack; a linear head reads the flow velocity off the 20 action tokens.
//! Generation: a separate DiT-style network over frame patch tokens,
//! cross-attending to the final understanding states and an embedding of the
//! planned actions, with τ injected through shift/scale modulation.
//!
//! All model-side quantities are normalized: pixels map to `2·p − 1`,
//! waypoints are divided per axis by `action_scale`, history features by the
//! position/velocity/acceleration scales.

mod frames;
mod vocab;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowcore::{self, standard_normal, time_features};
use crate::graph::{Graph, Var};
use crate::mot::{build_mask, mot_layer, Modality, ModalityParams, MotLayerParams, TokenStream, INIT_STD};
use crate::params::{Expert, ExpertSet, Init, ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::toyworld::{ActionChunk, Frame, HistoryState, FUTURE_STEPS, PAST_STEPS};

pub use frames::{patchify, unpatchify, FrameTokens};
pub use vocab::{Vocabulary, BOS, EOS, PAD, SEP, UNK};

/// Per-step history features: position, velocity, acceleration.
pub const HIST_FEATURES: usize = 6;
pub const PLAN_TOKENS: usize = PAST_STEPS + FUTURE_STEPS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub frame_size: usize,
    pub patch: usize,
    pub vocab_size: usize,
    pub max_text: usize,
    pub max_answer: usize,
    /// Timeline indices of the frames the understanding expert sees.
    pub obs_frames: Vec<usize>,
    /// Timeline indices of the generation history and target frames.
    pub hist_frames: Vec<usize>,
    pub fut_frames: Vec<usize>,
    pub gen_d: usize,
    pub gen_heads: usize,
    pub gen_layers: usize,
    pub time_dim: usize,
    /// Fastest angular frequency of the τ features.
    pub time_scale: f64,
    pub action_scale: [f64; 2],
    pub pos_scale: f64,
    pub vel_scale: f64,
    pub acc_scale: f64,
    pub flow_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            layers: 4,
            ffn_mult: 4,
            frame_size: 32,
            patch: 8,
            vocab_size: 512,
            max_text: 160,
            max_answer: 120,
            obs_frames: vec![15],
            hist_frames: vec![15],
            fut_frames: vec![19, 23],
            gen_d: 64,
            gen_heads: 4,
            gen_layers: 2,
            time_dim: 16,
            time_scale: 10.0,
            action_scale: [20.0, 8.0],
            pos_scale: 10.0,
            vel_scale: 5.0,
            acc_scale: 2.0,
            flow_steps: flowcore::DEFAULT_STEPS,
        }
    }
}

impl ModelConfig {
    /// Small dims used for toy-scale training runs.
    pub fn toy() -> Self {
        Self {
            d: 32,
            layers: 2,
            gen_d: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("heads {} must divide d {}", self.heads, self.d));
        }
        if self.gen_d == 0 || self.gen_heads == 0 || self.gen_d % self.gen_heads != 0 {
            return bad(format!("gen_heads {} must divide gen_d {}", self.gen_heads, self.gen_d));
        }
        if self.layers == 0 || self.ffn_mult == 0 {
            return bad("layers and ffn_mult must be positive".into());
        }
        if self.patch == 0 || self.frame_size % self.patch != 0 {
            return bad(format!("patch {} must divide frame size {}", self.patch, self.frame_size));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return bad("time_dim must be even and positive".into());
        }
        if self.max_text < 3 || self.max_answer == 0 {
            return bad("max_text and max_answer too small".into());
        }
        if self.hist_frames.is_empty() || self.fut_frames.is_empty() {
            return bad("generation needs history and future frames".into());
        }
        let timeline = crate::toyworld::TIMELINE;
        if self
            .obs_frames
            .iter()
            .chain(&self.hist_frames)
            .chain(&self.fut_frames)
            .any(|&t| t >= timeline)
        {
            return bad(format!("frame indices must lie in 0..{timeline}"));
        }
        if self.obs_frames.iter().chain(&self.hist_frames).any(|&t| t > crate::toyworld::CURRENT) {
            return bad("observed frames must not lie in the future".into());
        }
        let scales = [self.time_scale, self.action_scale[0], self.action_scale[1], self.pos_scale, self.vel_scale, self.acc_scale];
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("normalization scales must be positive".into());
        }
        if self.flow_steps == 0 {
            return bad("flow_steps must be positive".into());
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        crate::sha256_hex(serde_json::to_string(self).expect("serializable").as_bytes())
    }

    pub fn patches_per_frame(&self) -> usize {
        (self.frame_size / self.patch).pow(2)
    }
}

pub fn history_features(h: &HistoryState, cfg: &ModelConfig) -> Result<Matrix> {
    h.validate()?;
    let mut m = Matrix::zeros(PAST_STEPS, HIST_FEATURES);
    for i in 0..PAST_STEPS {
        let f = h.step_features(i);
        let scales = [cfg.pos_scale, cfg.pos_scale, cfg.vel_scale, cfg.vel_scale, cfg.acc_scale, cfg.acc_scale];
        for k in 0..HIST_FEATURES {
            m.set(i, k, f[k] / scales[k]);
        }
    }
    Ok(m)
}

/// Waypoints in model units.
pub fn action_to_model(a: &ActionChunk, cfg: &ModelConfig) -> Matrix {
    let mut m = a.to_matrix();
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        row[0] /= cfg.action_scale[0];
        row[1] /= cfg.action_scale[1];
    }
    m
}

pub fn action_from_model(m: &Matrix, cfg: &ModelConfig) -> Result<ActionChunk> {
    let mut w = m.clone();
    for r in 0..w.rows() {
        let row = w.row_mut(r);
        row[0] *= cfg.action_scale[0];
        row[1] *= cfg.action_scale[1];
    }
    ActionChunk::from_matrix(&w)
}

pub fn pixels_to_model(p: &Matrix) -> Matrix {
    p.map(|v| 2.0 * v - 1.0)
}

pub fn pixels_from_model(m: &Matrix) -> Matrix {
    m.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct UndParams {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub img_pos: ParamId,
    pub frame_pos: ParamId,
    pub tok_emb: ParamId,
    pub text_pos: ParamId,
    pub ln_f_g: ParamId,
    pub ln_f_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanParams {
    pub hist_w: ParamId,
    pub hist_b: ParamId,
    pub act_w: ParamId,
    pub act_b: ParamId,
    /// Per-token offsets; they play the role of the projection bias.
    pub pos: ParamId,
    pub time_w: ParamId,
    pub time_b: ParamId,
    pub ln_f_g: ParamId,
    pub ln_f_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenBlockParams {
    /// Time conditioning to (shift, scale) for the three norms.
    pub ada_w: ParamId,
    pub ada_b: ParamId,
    pub sa_qkv_w: ParamId,
    pub sa_qkv_b: ParamId,
    pub sa_o_w: ParamId,
    pub sa_o_b: ParamId,
    pub ca_q_w: ParamId,
    pub ca_q_b: ParamId,
    pub ca_kv_w: ParamId,
    pub ca_kv_b: ParamId,
    pub ca_o_w: ParamId,
    pub ca_o_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenParams {
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub pos: ParamId,
    pub t_w1: ParamId,
    pub t_b1: ParamId,
    pub t_w2: ParamId,
    pub t_b2: ParamId,
    pub cond_w: ParamId,
    pub cond_b: ParamId,
    pub act_w: ParamId,
    pub act_b: ParamId,
    pub act_pos: ParamId,
    pub blocks: Vec<GenBlockParams>,
    pub final_ada_w: ParamId,
    pub final_ada_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamIndex {
    pub und: UndParams,
    pub plan: PlanParams,
    pub layers: Vec<MotLayerParams>,
    pub gen: GenParams,
}

/// Configuration, vocabulary, parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub ids: ParamIndex,
}

impl Model {
    /// Fresh parameters: weights normal(0, 0.02), biases zero, norm gains one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::build(config.vocab_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let (d, gd, pp) = (c.d, c.gen_d, c.patch * c.patch);
        let n = Init::Normal(INIT_STD);

        let mut add = |store: &mut ParamStore, name: &str, e: Expert, r: usize, cols: usize, init: Init| {
            store.add(name, e, r, cols, init, &mut rng)
        };
        let u = Expert::Understanding;
        let und = UndParams {
            patch_w: add(&mut store, "und.patch.w", u, pp, d, n),
            patch_b: add(&mut store, "und.patch.b", u, 1, d, Init::Zeros),
            img_pos: add(&mut store, "und.img_pos", u, c.patches_per_frame(), d, n),
            frame_pos: add(&mut store, "und.frame_pos", u, c.obs_frames.len().max(1), d, n),
            tok_emb: add(&mut store, "und.tok_emb", u, c.vocab_size, d, n),
            text_pos: add(&mut store, "und.text_pos", u, c.max_text, d, n),
            ln_f_g: add(&mut store, "und.ln_f.g", u, 1, d, Init::Ones),
            ln_f_b: add(&mut store, "und.ln_f.b", u, 1, d, Init::Zeros),
            head_w: add(&mut store, "und.head.w", u, d, c.vocab_size, n),
            head_b: add(&mut store, "und.head.b", u, 1, c.vocab_size, Init::Zeros),
        };
        let p = Expert::Planning;
        let plan = PlanParams {
            hist_w: add(&mut store, "plan.hist.w", p, HIST_FEATURES, d, n),
            hist_b: add(&mut store, "plan.hist.b", p, 1, d, Init::Zeros),
            act_w: add(&mut store, "plan.act.w", p, 2, d, n),
            act_b: add(&mut store, "plan.act.b", p, 1, d, Init::Zeros),
            pos: add(&mut store, "plan.pos", p, PLAN_TOKENS, d, n),
            time_w: add(&mut store, "plan.time.w", p, c.time_dim, d, n),
            time_b: add(&mut store, "plan.time.b", p, 1, d, Init::Zeros),
            ln_f_g: add(&mut store, "plan.ln_f.g", p, 1, d, Init::Ones),
            ln_f_b: add(&mut store, "plan.ln_f.b", p, 1, d, Init::Zeros),
            head_w: add(&mut store, "plan.head.w", p, d, 2, n),
            head_b: add(&mut store, "plan.head.b", p, 1, 2, Init::Zeros),
        };
        let ffn = c.ffn_mult * d;
        let mut layers = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let und = ModalityParams::register(&mut store, &format!("mot.{l}.und"), u, d, ffn, &mut rng);
            let plan = ModalityParams::register(&mut store, &format!("mot.{l}.plan"), p, d, ffn, &mut rng);
            layers.push(MotLayerParams { und, plan });
        }

        let gx = Expert::Generation;
        let mut add = |store: &mut ParamStore, name: String, r: usize, cols: usize, init: Init| {
            store.add(name, gx, r, cols, init, &mut rng)
        };
        let n_gen_tokens = (c.hist_frames.len() + c.fut_frames.len()) * c.patches_per_frame();
        let s = &mut store;
        let mut blocks = Vec::with_capacity(c.gen_layers);
        let in_w = add(s, "gen.in.w".into(), pp, gd, n);
        let in_b = add(s, "gen.in.b".into(), 1, gd, Init::Zeros);
        let pos = add(s, "gen.pos".into(), n_gen_tokens, gd, n);
        let t_w1 = add(s, "gen.time.w1".into(), c.time_dim, gd, n);
        let t_b1 = add(s, "gen.time.b1".into(), 1, gd, Init::Zeros);
        let t_w2 = add(s, "gen.time.w2".into(), gd, gd, n);
        let t_b2 = add(s, "gen.time.b2".into(), 1, gd, Init::Zeros);
        let cond_w = add(s, "gen.cond.w".into(), d, gd, n);
        let cond_b = add(s, "gen.cond.b".into(), 1, gd, Init::Zeros);
        let act_w = add(s, "gen.act.w".into(), 2, gd, n);
        let act_b = add(s, "gen.act.b".into(), 1, gd, Init::Zeros);
        let act_pos = add(s, "gen.act_pos".into(), FUTURE_STEPS, gd, n);
        for b in 0..c.gen_layers {
            let mut a = |name: &str, r, cols, init| add(s, format!("gen.block.{b}.{name}"), r, cols, init);
            blocks.push(GenBlockParams {
                ada_w: a("ada.w", gd, 6 * gd, n),
                ada_b: a("ada.b", 1, 6 * gd, Init::Zeros),
                sa_qkv_w: a("self.w_qkv", gd, 3 * gd, n),
                sa_qkv_b: a("self.b_qkv", 1, 3 * gd, Init::Zeros),
                sa_o_w: a("self.w_o", gd, gd, n),
                sa_o_b: a("self.b_o", 1, gd, Init::Zeros),
                ca_q_w: a("cross.w_q", gd, gd, n),
                ca_q_b: a("cross.b_q", 1, gd, Init::Zeros),
                ca_kv_w: a("cross.w_kv", gd, 2 * gd, n),
                ca_kv_b: a("cross.b_kv", 1, 2 * gd, Init::Zeros),
                ca_o_w: a("cross.w_o", gd, gd, n),
                ca_o_b: a("cross.b_o", 1, gd, Init::Zeros),
                fc1_w: a("ffn.w1", gd, c.ffn_mult * gd, n),
                fc1_b: a("ffn.b1", 1, c.ffn_mult * gd, Init::Zeros),
                fc2_w: a("ffn.w2", c.ffn_mult * gd, gd, n),
                fc2_b: a("ffn.b2", 1, gd, Init::Zeros),
            });
        }
        let gen = GenParams {
            in_w,
            in_b,
            pos,
            t_w1,
            t_b1,
            t_w2,
            t_b2,
            cond_w,
            cond_b,
            act_w,
            act_b,
            act_pos,
            blocks,
            final_ada_w: add(s, "gen.final.ada.w".into(), gd, 2 * gd, n),
            final_ada_b: add(s, "gen.final.ada.b".into(), 1, 2 * gd, Init::Zeros),
            out_w: add(s, "gen.out.w".into(), gd, pp, n),
            out_b: add(s, "gen.out.b".into(), 1, pp, Init::Zeros),
        };
        Ok(Self {
            config,
            vocab,
            store,
            ids: ParamIndex {
                und,
                plan,
                layers,
                gen,
            },
        })
    }

    /// `[BOS] prompt [SEP]`.
    pub fn prompt_ids(&self, prompt: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.vocab.encode(prompt));
        ids.push(SEP);
        ids
    }
}

fn lin(g: &mut Graph, x: Var, w: ParamId, b: ParamId) -> Var {
    let (w, b) = (g.param(w), g.param(b));
    g.linear(x, w, b)
}

fn ln(g: &mut Graph, x: Var, gain: ParamId, bias: ParamId) -> Var {
    let (gain, bias) = (g.param(gain), g.param(bias));
    g.layer_norm_affine(x, gain, bias)
}

/// Understanding stream: image patch tokens of every frame, then text tokens.
pub fn embed_und(g: &mut Graph, m: &Model, frames: &[Matrix], ids: &[usize]) -> Result<Var> {
    let c = &m.config;
    let p = &m.ids.und;
    if frames.len() > c.obs_frames.len().max(1) {
        return Err(Error::Shape(format!("{} frames, model takes {}", frames.len(), c.obs_frames.len())));
    }
    if ids.len() > c.max_text {
        return Err(Error::Shape(format!("{} text tokens exceed max_text {}", ids.len(), c.max_text)));
    }
    if let Some(bad) = ids.iter().find(|&&i| i >= c.vocab_size) {
        return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary")));
    }
    let mut parts = Vec::new();
    for (f, frame) in frames.iter().enumerate() {
        if frame.shape() != (c.frame_size, c.frame_size) {
            return Err(Error::Shape(format!("frame {:?}, model expects {}²", frame.shape(), c.frame_size)));
        }
        let tokens = patchify(&[pixels_to_model(frame)], c.patch)?.tokens;
        let x = g.constant(tokens);
        let x = lin(g, x, p.patch_w, p.patch_b);
        let pos = g.param(p.img_pos);
        let x = g.add(x, pos);
        let fp = g.param(p.frame_pos);
        let fp = g.slice_rows(fp, f, 1);
        parts.push(g.add_row(x, fp));
    }
    if !ids.is_empty() {
        let table = g.param(p.tok_emb);
        let t = g.gather(table, ids);
        let pos = g.param(p.text_pos);
        let pos = g.slice_rows(pos, 0, ids.len());
        parts.push(g.add(t, pos));
    }
    if parts.is_empty() {
        return Ok(g.constant(Matrix::zeros(0, c.d)));
    }
    Ok(g.concat_rows(&parts))
}

/// Planning stream `[history tokens, action tokens]`; with `tau` the flow
/// time embedding is added to the action tokens.
pub fn embed_plan(g: &mut Graph, m: &Model, hist: &Matrix, noised: &Matrix, tau: Option<f64>) -> Result<Var> {
    if hist.shape() != (PAST_STEPS, HIST_FEATURES) {
        return Err(Error::Shape(format!("history features {:?}, expected 16x6", hist.shape())));
    }
    if noised.shape() != (FUTURE_STEPS, 2) {
        return Err(Error::Shape(format!("noised action {:?}, expected 20x2", noised.shape())));
    }
    let p = &m.ids.plan;
    let h = g.constant(hist.clone());
    let h = lin(g, h, p.hist_w, p.hist_b);
    let a = g.constant(noised.clone());
    let mut a = lin(g, a, p.act_w, p.act_b);
    if let Some(tau) = tau {
        let tf = g.constant(time_features(tau, m.config.time_dim, m.config.time_scale));
        let te = lin(g, tf, p.time_w, p.time_b);
        a = g.add_row(a, te);
    }
    let x = g.concat_rows(&[h, a]);
    let pos = g.param(p.pos);
    Ok(g.add(x, pos))
}

/// MoT stack plus the per-modality final norms.
pub fn trunk(g: &mut Graph, m: &Model, und: Var, plan: Option<Var>) -> (Var, Var) {
    let d = m.config.d;
    let plan = plan.unwrap_or_else(|| g.constant(Matrix::zeros(0, d)));
    let mask = Arc::new(build_mask(g.value(und).rows(), g.value(plan).rows()));
    let (mut u, mut p) = (und, plan);
    for layer in &m.ids.layers {
        (u, p) = mot_layer(g, u, p, layer, &mask, m.config.heads);
    }
    let u = ln(g, u, m.ids.und.ln_f_g, m.ids.und.ln_f_b);
    let p = if g.value(p).rows() == 0 {
        p
    } else {
        ln(g, p, m.ids.plan.ln_f_g, m.ids.plan.ln_f_b)
    };
    (u, p)
}

/// LM logits at the given understanding rows.
pub fn lm_logits(g: &mut Graph, m: &Model, und_hidden: Var, rows: &[usize]) -> Var {
    let h = g.gather(und_hidden, rows);
    lin(g, h, m.ids.und.head_w, m.ids.und.head_b)
}

/// Velocity read off the action tokens of the planning stream.
pub fn plan_head(g: &mut Graph, m: &Model, plan_hidden: Var) -> Var {
    let a = g.slice_rows(plan_hidden, PAST_STEPS, FUTURE_STEPS);
    lin(g, a, m.ids.plan.head_w, m.ids.plan.head_b)
}

/// `A = Proj(â)`, owned by the generation expert.
pub fn action_embed(g: &mut Graph, m: &Model, a_hat: &Matrix) -> Var {
    let p = &m.ids.gen;
    let a = g.constant(a_hat.clone());
    let a = lin(g, a, p.act_w, p.act_b);
    let pos = g.param(p.act_pos);
    g.add(a, pos)
}

/// Generation velocity over all frame-token rows `[hist, fut]`.
pub fn gen_velocity(
    g: &mut Graph,
    m: &Model,
    tokens: &Matrix,
    und_hidden: Var,
    action_emb: Var,
    tau: f64,
) -> Result<Var> {
    let c = &m.config;
    let p = &m.ids.gen;
    let gd = c.gen_d;
    let expected = (c.hist_frames.len() + c.fut_frames.len()) * c.patches_per_frame();
    if tokens.shape() != (expected, c.patch * c.patch) {
        return Err(Error::Shape(format!("frame tokens {:?}, expected {expected} rows", tokens.shape())));
    }
    if g.value(und_hidden).cols() != c.d || g.value(action_emb).shape() != (FUTURE_STEPS, gd) {
        return Err(Error::Shape("generation condition has the wrong width".into()));
    }
    let tf = g.constant(time_features(tau, c.time_dim, c.time_scale));
    let t = lin(g, tf, p.t_w1, p.t_b1);
    let t = g.silu(t);
    let t = lin(g, t, p.t_w2, p.t_b2);
    let cvec = g.silu(t);

    let hu = lin(g, und_hidden, p.cond_w, p.cond_b);
    let cond = g.concat_rows(&[hu, action_emb]);

    let x = g.constant(tokens.clone());
    let x = lin(g, x, p.in_w, p.in_b);
    let pos = g.param(p.pos);
    let mut h = g.add(x, pos);
    for b in &p.blocks {
        let mods = lin(g, cvec, b.ada_w, b.ada_b);
        let m_at = |g: &mut Graph, i: usize| g.slice_cols(mods, i * gd, gd);

        let (sh, sc) = (m_at(g, 0), m_at(g, 1));
        let n = g.layer_norm(h);
        let n = g.modulate(n, sh, sc);
        let qkv = lin(g, n, b.sa_qkv_w, b.sa_qkv_b);
        let q = g.slice_cols(qkv, 0, gd);
        let k = g.slice_cols(qkv, gd, gd);
        let v = g.slice_cols(qkv, 2 * gd, gd);
        let o = g.attention(q, k, v, c.gen_heads, None);
        let o = lin(g, o, b.sa_o_w, b.sa_o_b);
        h = g.add(h, o);

        let (sh, sc) = (m_at(g, 2), m_at(g, 3));
        let n = g.layer_norm(h);
        let n = g.modulate(n, sh, sc);
        let q = lin(g, n, b.ca_q_w, b.ca_q_b);
        let kv = lin(g, cond, b.ca_kv_w, b.ca_kv_b);
        let k = g.slice_cols(kv, 0, gd);
        let v = g.slice_cols(kv, gd, gd);
        let o = g.attention(q, k, v, c.gen_heads, None);
        let o = lin(g, o, b.ca_o_w, b.ca_o_b);
        h = g.add(h, o);

        let (sh, sc) = (m_at(g, 4), m_at(g, 5));
        let n = g.layer_norm(h);
        let n = g.modulate(n, sh, sc);
        let f = lin(g, n, b.fc1_w, b.fc1_b);
        let f = g.gelu(f);
        let f = lin(g, f, b.fc2_w, b.fc2_b);
        h = g.add(h, f);
    }
    let mods = lin(g, cvec, p.final_ada_w, p.final_ada_b);
    let sh = g.slice_cols(mods, 0, gd);
    let sc = g.slice_cols(mods, gd, gd);
    let n = g.layer_norm(h);
    let n = g.modulate(n, sh, sc);
    Ok(lin(g, n, p.out_w, p.out_b))
}

/// Image tokens followed by the tokens of `text` (no special tokens).
pub fn encode_observation(m: &Model, frames: &[Frame], text: &str) -> Result<TokenStream> {
    let pixels: Vec<Matrix> = frames.iter().map(|f| f.pixels.clone()).collect();
    let ids = m.vocab.encode(text);
    let mut g = Graph::new(&m.store, ExpertSet::NONE);
    let v = embed_und(&mut g, m, &pixels, &ids)?;
    Ok(TokenStream::new(g.value(v).clone(), Modality::Understanding))
}

/// Mean negative log-softmax of `targets`, one per logits row.
pub fn understanding_loss(logits: &Matrix, targets: &[usize]) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::Shape(format!("{} logits rows for {} targets", logits.rows(), targets.len())));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::InvalidArgument(format!("target id {t} >= vocabulary {}", logits.cols())));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store, ExpertSet::NONE);
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, targets);
    Ok(g.value(loss).item())
}

/// Planning tokens without the flow-time embedding; `noised_action` is in
/// model units.
pub fn project_plan_tokens(m: &Model, history: &HistoryState, noised_action: &Matrix) -> Result<TokenStream> {
    let hist = history_features(history, &m.config)?;
    let mut g = Graph::new(&m.store, ExpertSet::NONE);
    let v = embed_plan(&mut g, m, &hist, noised_action, None)?;
    Ok(TokenStream::new(g.value(v).clone(), Modality::Planning))
}

fn und_var(g: &mut Graph, m: &Model, und: &TokenStream) -> Result<Var> {
    und.validate(m.config.d)?;
    let e = if und.is_empty() {
        Matrix::zeros(0, m.config.d)
    } else {
        und.embeddings.clone()
    };
    Ok(g.constant(e))
}

/// Velocity `u^plan` (20 × 2, model units) for a noised action at `tau`.
pub fn planning_forward(
    m: &Model,
    und: &TokenStream,
    history: &HistoryState,
    noised_action: &Matrix,
    tau: f64,
) -> Result<Matrix> {
    let hist = history_features(history, &m.config)?;
    let mut g = Graph::new(&m.store, ExpertSet::NONE);
    let u = und_var(&mut g, m, und)?;
    let p = embed_plan(&mut g, m, &hist, noised_action, Some(tau))?;
    let (_, ph) = trunk(&mut g, m, u, Some(p));
    let out = plan_head(&mut g, m, ph);
    Ok(g.value(out).clone())
}

/// Final normalized understanding states, the generation condition.
pub fn understanding_hidden(m: &Model, und: &TokenStream) -> Result<Matrix> {
    let mut g = Graph::new(&m.store, ExpertSet::NONE);
    let u = und_var(&mut g, m, und)?;
    let (uh, _) = trunk(&mut g, m, u, None);
    Ok(g.value(uh).clone())
}

/// Action embedding used to condition generation: the clean chunk when
/// `draw > 0.5`, otherwise the single-step estimate `noised − (1 − τ)·u`.
pub fn sample_action_embedding(
    m: &Model,
    clean: &ActionChunk,
    noised: &Matrix,
    u: &Matrix,
    tau: f64,
    draw: f64,
) -> Result<Matrix> {
    let a_hat = select_action(&action_to_model(clean, &m.config), noised, u, tau, draw)?;
    let mut g = Graph::new(&m.store, ExpertSet::NONE);
    let a = action_embed(&mut g, m, &a_hat);
    Ok(g.value(a).clone())
}

/// The action estimate that feeds the generation condition (model units).
pub fn select_action(clean: &Matrix, noised: &Matrix, u: &Matrix, tau: f64, draw: f64) -> Result<Matrix> {
    if draw > 0.5 {
        clean.ensure_same_shape(noised, "select_action")?;
        Ok(clean.clone())
    } else {
        flowcore::single_step_denoise(noised, u, tau)
    }
}

/// Velocity over every frame token; only the future rows are a prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationOutput {
    pub full: Matrix,
    pub n_hist: usize,
}

impl GenerationOutput {
    pub fn future(&self) -> Matrix {
        self.full.slice_rows(self.n_hist, self.full.rows() - self.n_hist)
    }
}

/// `v_hist` and `v_fut_noised` are in model units; `action_emb` is an
/// [`sample_action_embedding`] output.
pub fn generation_forward(
    m: &Model,
    v_hist: &FrameTokens,
    v_fut_noised: &FrameTokens,
    h_und: &Matrix,
    action_emb: &Matrix,
    tau: f64,
) -> Result<GenerationOutput> {
    let tokens = Matrix::concat_rows(&[&v_hist.tokens, &v_fut_noised.tokens])?;
    let mut g = Graph::new(&m.store, ExpertSet::NONE);
    let h = g.constant(h_und.clone());
    let a = g.constant(action_emb.clone());
    let out = gen_velocity(&mut g, m, &tokens, h, a, tau)?;
    Ok(GenerationOutput {
        full: g.value(out).clone(),
        n_hist: v_hist.tokens.rows(),
    })
}

#[derive(Clone, Debug)]
pub struct InferRequest {
    /// Observation frames (pixels), one per `obs_frames` entry.
    pub frames: Vec<Matrix>,
    pub prompt: String,
    pub history: HistoryState,
    /// Generation history frames (pixels), one per `hist_frames` entry.
    pub gen_history: Vec<Matrix>,
}

#[derive(Clone, Copy, Debug)]
pub struct InferOptions {
    pub steps: usize,
    pub seed: u64,
    pub decode: bool,
    pub generate: bool,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            steps: flowcore::DEFAULT_STEPS,
            seed: 0,
            decode: true,
            generate: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub answer_ids: Vec<usize>,
    pub answer_text: String,
    pub action: ActionChunk,
    /// Future frames at `fut_frames`, empty when generation is disabled.
    pub future_frames: Vec<Frame>,
}

fn stage_err(stage: &str, step: usize) -> Error {
    Error::NonFinite {
        stage: stage.into(),
        step,
    }
}

/// Greedy answer after `[BOS] prompt [SEP]`.
pub fn greedy_decode(m: &Model, frames: &[Matrix], prompt_ids: &[usize]) -> Result<Vec<usize>> {
    let mut ids = prompt_ids.to_vec();
    let mut answer = Vec::new();
    let n_img = frames.len() * m.config.patches_per_frame();
    while answer.len() < m.config.max_answer && ids.len() < m.config.max_text {
        let mut g = Graph::new(&m.store, ExpertSet::NONE);
        let u = embed_und(&mut g, m, frames, &ids)?;
        let (uh, _) = trunk(&mut g, m, u, None);
        let logits = lm_logits(&mut g, m, uh, &[n_img + ids.len() - 1]);
        let row = g.value(logits).row(0);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(stage_err("understanding", answer.len()));
        }
        let next = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        if next == EOS {
            break;
        }
        ids.push(next);
        answer.push(next);
    }
    Ok(answer)
}

/// Answer text, planned trajectory, and optionally future frames. Noise for
/// planning is drawn before noise for generation, so switching generation
/// off leaves the first two outputs unchanged.
pub fn infer(m: &Model, req: &InferRequest, opts: &InferOptions) -> Result<Inference> {
    let c = &m.config;
    let ids = m.prompt_ids(&req.prompt);
    let answer_ids = if opts.decode {
        greedy_decode(m, &req.frames, &ids)?
    } else {
        Vec::new()
    };
    let answer_text = m.vocab.decode(&answer_ids);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let hist = history_features(&req.history, c)?;
    let eps = standard_normal(FUTURE_STEPS, 2, &mut rng);
    let mut und_hidden = None;
    let mut step = 0;
    let a_model = flowcore::euler_sample(
        |x, tau| {
            let mut g = Graph::new(&m.store, ExpertSet::NONE);
            let u = embed_und(&mut g, m, &req.frames, &ids)?;
            let p = embed_plan(&mut g, m, &hist, x, Some(tau))?;
            let (uh, ph) = trunk(&mut g, m, u, Some(p));
            let out = plan_head(&mut g, m, ph);
            if und_hidden.is_none() {
                und_hidden = Some(g.value(uh).clone());
            }
            let v = g.value(out).clone();
            if !v.is_finite() {
                return Err(stage_err("planning", step));
            }
            step += 1;
            Ok(v)
        },
        &eps,
        opts.steps,
    )
    .map_err(|e| match e {
        Error::NonFinite { step, .. } => stage_err("planning", step),
        other => other,
    })?;
    let action = action_from_model(&a_model, c)?;

    let mut future_frames = Vec::new();
    if opts.generate {
        let h_und = und_hidden.expect("at least one euler step");
        if req.gen_history.len() != c.hist_frames.len() {
            return Err(Error::Shape(format!(
                "{} generation history frames, model expects {}",
                req.gen_history.len(),
                c.hist_frames.len()
            )));
        }
        let hist_model: Vec<Matrix> = req.gen_history.iter().map(pixels_to_model).collect();
        let v_hist = patchify(&hist_model, c.patch)?;
        let n_fut = c.fut_frames.len() * c.patches_per_frame();
        let eps_v = standard_normal(n_fut, c.patch * c.patch, &mut rng);
        let mut g0 = Graph::new(&m.store, ExpertSet::NONE);
        let a_emb = action_embed(&mut g0, m, &a_model);
        let a_emb = g0.value(a_emb).clone();
        let fut = flowcore::euler_sample(
            |x, tau| {
                let tokens = Matrix::concat_rows(&[&v_hist.tokens, x])?;
                let mut g = Graph::new(&m.store, ExpertSet::NONE);
                let h = g.constant(h_und.clone());
                let a = g.constant(a_emb.clone());
                let out = gen_velocity(&mut g, m, &tokens, h, a, tau)?;
                Ok(g.value(out).slice_rows(v_hist.tokens.rows(), n_fut))
            },
            &eps_v,
            opts.steps,
        )
        .map_err(|e| match e {
            Error::NonFinite { step, .. } => stage_err("generation", step),
            other => other,
        })?;
        let grid = c.frame_size / c.patch;
        let frames = unpatchify(&FrameTokens {
            tokens: fut,
            frames: c.fut_frames.len(),
            patch: c.patch,
            grid: (grid, grid),
        })?;
        future_frames = frames
            .iter()
            .zip(&c.fut_frames)
            .map(|(f, &t)| Frame {
                pixels: pixels_from_model(f),
                t_index: t,
            })
            .collect();
    }
    Ok(Inference {
        answer_ids,
        answer_text,
        action,
        future_frames,
    })
}
