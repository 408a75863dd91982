//! Shared oracles for the integration tests and the acceptance harness.
#![allow(dead_code)]

use motdrive::experts::*;
use motdrive::flowcore::{self, standard_normal};
use motdrive::graph::{Graph, Var};
use motdrive::mot::ModalityParams;
use motdrive::params::ParamStore;
use motdrive::toyworld::*;
use motdrive::training::scene_cache;
use motdrive::{Expert, ExpertSet, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Overwrite every parameter with `N(0, std²)` noise.
pub fn randomize(store: &mut ParamStore, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = std * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

// ---------------------------------------------------------------------------
// Dense single-stream transformer block on plain vectors.

type Rows = Vec<Vec<f64>>;

fn rows_of(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn affine(x: &Rows, w: &Matrix, b: &Matrix) -> Rows {
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|j| b.get(0, j) + row.iter().enumerate().map(|(i, v)| v * w.get(i, j)).sum::<f64>())
                .collect()
        })
        .collect()
}

fn ln(x: &Rows, g: &Matrix, b: &Matrix) -> Rows {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g.get(0, j) + b.get(0, j))
                .collect()
        })
        .collect()
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
}

fn plus(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// One pre-norm block over `x` where row `q` may read row `k` iff
/// `visible(q, k)`.
pub fn dense_block(store: &ParamStore, p: &ModalityParams, x: &Matrix, heads: usize, visible: impl Fn(usize, usize) -> bool) -> Matrix {
    let v = |id| store.value(id);
    let x = rows_of(x);
    let n = x.len();
    let d = x[0].len();
    let dh = d / heads;
    let a = ln(&x, v(p.ln1_g), v(p.ln1_b));
    let qkv = affine(&a, v(p.w_qkv), v(p.b_qkv));
    let mut att = vec![vec![0.0; d]; n];
    for h in 0..heads {
        for q in 0..n {
            let keys: Vec<usize> = (0..n).filter(|&k| visible(q, k)).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|&k| (0..dh).map(|c| qkv[q][h * dh + c] * qkv[k][d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            for (wk, &k) in w.iter().zip(&keys) {
                for c in 0..dh {
                    att[q][h * dh + c] += wk / z * qkv[k][2 * d + h * dh + c];
                }
            }
        }
    }
    let hmid = plus(&x, &affine(&att, v(p.w_o), v(p.b_o)));
    let f = ln(&hmid, v(p.ln2_g), v(p.ln2_b));
    let f: Rows = affine(&f, v(p.w_fc1), v(p.b_fc1))
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let out = plus(&hmid, &affine(&f, v(p.w_fc2), v(p.b_fc2)));
    Matrix::from_rows(&out).unwrap()
}

// ---------------------------------------------------------------------------
// Loss graphs with every random draw fixed, for finite differences.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Understanding,
    Planning,
    Generation,
}

pub struct LossFixture {
    pub obs: Vec<Matrix>,
    pub ids: Vec<usize>,
    /// Answer tokens plus EOS.
    pub targets: Vec<usize>,
    pub hist: Matrix,
    pub action: Matrix,
    pub eps: Matrix,
    pub tau: f64,
    pub gen_hist: Matrix,
    pub gen_fut: Matrix,
    pub gen_eps: Matrix,
    pub gen_tau: f64,
    pub draw: f64,
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        d: 16,
        heads: 2,
        layers: 1,
        gen_d: 16,
        gen_heads: 2,
        gen_layers: 1,
        ..ModelConfig::default()
    }
}

pub fn loss_fixture(m: &Model, seed: u64, draw: f64) -> LossFixture {
    let world = WorldConfig::default();
    let s = generate_scenario(seed, &world).unwrap();
    let cache = scene_cache(m, &s, &world).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut ids = m.prompt_ids(&s.qa[0].question);
    let ans = m.vocab.encode(&s.qa[0].target_text());
    ids.extend(&ans);
    let mut targets = ans;
    targets.push(EOS);
    let n_fut = cache.gen_fut.tokens.rows();
    LossFixture {
        obs: cache.obs,
        ids,
        targets,
        hist: cache.hist,
        eps: standard_normal(FUTURE_STEPS, 2, &mut rng),
        action: cache.action,
        tau: rng.random(),
        gen_eps: standard_normal(n_fut, m.config.patch * m.config.patch, &mut rng),
        gen_hist: cache.gen_hist.tokens,
        gen_fut: cache.gen_fut.tokens,
        gen_tau: rng.random(),
        draw,
    }
}

pub fn build_loss(g: &mut Graph, m: &Model, fx: &LossFixture, kind: LossKind) -> Var {
    let und = embed_und(g, m, &fx.obs, &fx.ids).unwrap();
    let noised = flowcore::noise(&fx.action, &fx.eps, fx.tau).unwrap();
    let plan = embed_plan(g, m, &fx.hist, &noised, Some(fx.tau)).unwrap();
    let (uh, ph) = trunk(g, m, und, Some(plan));
    match kind {
        LossKind::Understanding => {
            let n_img = fx.obs.len() * m.config.patches_per_frame();
            let first = n_img + fx.ids.len() - fx.targets.len();
            let rows: Vec<usize> = (first..first + fx.targets.len()).collect();
            let logits = lm_logits(g, m, uh, &rows);
            g.cross_entropy(logits, &fx.targets)
        }
        LossKind::Planning => {
            let u = plan_head(g, m, ph);
            g.mse(u, &flowcore::velocity_target(&fx.action, &fx.eps).unwrap())
        }
        LossKind::Generation => {
            let u = plan_head(g, m, ph);
            let h = g.detach(uh);
            let a_hat = select_action(&fx.action, &noised, g.value(u), fx.tau, fx.draw).unwrap();
            let a = action_embed(g, m, &a_hat);
            let fut = flowcore::noise(&fx.gen_fut, &fx.gen_eps, fx.gen_tau).unwrap();
            let tokens = Matrix::concat_rows(&[&fx.gen_hist, &fut]).unwrap();
            let v = gen_velocity(g, m, &tokens, h, a, fx.gen_tau).unwrap();
            let vf = g.slice_rows(v, fx.gen_hist.rows(), fut.rows());
            g.mse(vf, &flowcore::velocity_target(&fx.gen_fut, &fx.gen_eps).unwrap())
        }
    }
}

/// Experts whose parameters a loss trains. The generation condition is
/// detached from the understanding trunk and the action estimate is a
/// constant, so generation gradients stop at the generation expert.
pub fn trained_by(kind: LossKind) -> ExpertSet {
    match kind {
        LossKind::Understanding => ExpertSet::of(&[Expert::Understanding]),
        LossKind::Planning => ExpertSet::of(&[Expert::Understanding, Expert::Planning]),
        LossKind::Generation => ExpertSet::of(&[Expert::Generation]),
    }
}

pub struct GradCheck {
    pub tensor: String,
    pub entries: usize,
    pub max_rel: f64,
}

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-8 {
        // both vanish; compare absolutely
        (a - n).abs() * 1e3
    } else {
        (a - n).abs() / scale
    }
}

/// Central differences on `slices` random row slices of parameters that
/// carry a gradient for `kind`.
pub fn grad_check(m: &mut Model, fx: &LossFixture, kind: LossKind, slices: usize, seed: u64) -> Vec<GradCheck> {
    let trainable = trained_by(kind);
    let grads = {
        let mut g = Graph::new(&m.store, trainable);
        let l = build_loss(&mut g, m, fx, kind);
        g.backward(l)
    };
    let candidates: Vec<_> = m
        .store
        .ids()
        .filter(|&id| trainable.contains(m.store.expert(id)))
        .filter(|&id| grads.get(id).is_some_and(|g| g.data().iter().any(|v| v.abs() > 1e-6)))
        .collect();
    assert!(!candidates.is_empty(), "{kind:?} has no parameter gradients");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut out = Vec::new();
    for _ in 0..slices {
        let id = candidates[rng.random_range(0..candidates.len())];
        let gm = grads.get(id).unwrap().clone();
        let live: Vec<usize> = (0..gm.rows()).filter(|&r| gm.row(r).iter().any(|v| v.abs() > 1e-6)).collect();
        let r = live[rng.random_range(0..live.len())];
        let width = gm.cols().min(12);
        let c0 = rng.random_range(0..=gm.cols() - width);
        let mut max_rel: f64 = 0.0;
        for c in c0..c0 + width {
            let idx = r * gm.cols() + c;
            let orig = m.store.value(id).data()[idx];
            let mut eval_at = |v: f64| {
                m.store.value_mut(id).data_mut()[idx] = v;
                let mut g = Graph::new(&m.store, ExpertSet::NONE);
                let l = build_loss(&mut g, m, fx, kind);
                g.value(l).item()
            };
            let num = (eval_at(orig + h) - eval_at(orig - h)) / (2.0 * h);
            m.store.value_mut(id).data_mut()[idx] = orig;
            max_rel = max_rel.max(rel_err(gm.data()[idx], num));
        }
        out.push(GradCheck {
            tensor: m.store.entry(id).name.clone(),
            entries: width,
            max_rel,
        });
    }
    out
}
