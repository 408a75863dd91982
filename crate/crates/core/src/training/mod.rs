//! Staged training: which experts learn in each stage, what data they see,
//! how the three losses combine, and the optimization loop.

mod checkpoint;
mod optim;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataqa::{instruction_prompt, write_cot, PLANNING_PROMPT, COT_PROMPT};
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::experts::{
    action_embed, action_to_model, embed_plan, embed_und, gen_velocity, history_features, lm_logits,
    patchify, pixels_to_model, plan_head, select_action, trunk, FrameTokens, GenerationOutput, Model, EOS,
};
use crate::flowcore::{self, sample_tau, standard_normal};
use crate::graph::{Gradients, Graph, Var};
use crate::params::{Expert, ExpertSet};
use crate::tensor::Matrix;
use crate::toyworld::{render_frame, Scenario, WorldConfig, FUTURE_STEPS};

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, CheckpointMeta, TensorEntry, BLOB_FILE,
    CHECKPOINT_VERSION, MANIFEST_FILE,
};
pub use optim::{clip_global_norm, lr_at, Adam, Schedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// Perception QA pairs; stage-1 data.
    Qa,
    /// Frames plus trajectory; stage-2 data.
    VideoTrajectory,
    /// Chain-of-thought records; stage-3 data.
    Cot,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::Qa, Source::VideoTrajectory, Source::Cot];
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Qa => "qa",
            Source::VideoTrajectory => "video_trajectory",
            Source::Cot => "cot",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 0.5,
            gamma: 0.2,
        }
    }
}

/// `α·l_und + β·l_plan + γ·l_gen`.
pub fn total_loss(l_und: f64, l_plan: f64, l_gen: f64, w: &LossWeights) -> Result<f64> {
    if ![l_und, l_plan, l_gen].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            stage: "total_loss".into(),
            step: 0,
        });
    }
    Ok(w.alpha * l_und + w.beta * l_plan + w.gamma * l_gen)
}

fn mean_sq_residual(pred: &Matrix, target: &Matrix) -> Result<f64> {
    pred.ensure_same_shape(target, "loss")?;
    Ok(pred.zip_map(target, |a, b| a - b).sum_sq() / pred.len() as f64)
}

/// Mean over elements of `(u_pred − (eps − clean))²`.
pub fn plan_loss(u_pred: &Matrix, clean: &Matrix, eps: &Matrix) -> Result<f64> {
    mean_sq_residual(u_pred, &flowcore::velocity_target(clean, eps)?)
}

/// As [`plan_loss`], over the future-frame rows only.
pub fn gen_loss(u_pred: &GenerationOutput, v_fut_clean: &FrameTokens, eps: &Matrix) -> Result<f64> {
    mean_sq_residual(&u_pred.future(), &flowcore::velocity_target(&v_fut_clean.tokens, eps)?)
}

/// Weighted draw over dataset sources.
#[derive(Clone, Debug)]
pub struct Mixture {
    sources: Vec<Source>,
    dist: WeightedIndex<f64>,
}

impl Mixture {
    pub fn new(weights: &BTreeMap<Source, f64>) -> Result<Self> {
        let (sources, w): (Vec<Source>, Vec<f64>) = weights.iter().filter(|(_, &w)| w > 0.0).map(|(s, w)| (*s, *w)).unzip();
        if weights.values().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("mixture weights must be finite and nonnegative".into()));
        }
        let dist = WeightedIndex::new(&w).map_err(|e| Error::Config(format!("mixture: {e}")))?;
        Ok(Self { sources, dist })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Source {
        self.sources[self.dist.sample(rng)]
    }

    pub fn sources(&self) -> &[Source] {
        &self.sources
    }
}

/// Experts trained in `stage`.
pub fn stage_trainable(stage: u8) -> ExpertSet {
    match stage {
        1 | 3 => ExpertSet::of(&[Expert::Understanding]),
        2 => ExpertSet::of(&[Expert::Generation, Expert::Planning]),
        _ => ExpertSet::ALL,
    }
}

/// Default data mixture of `stage`; stage 4 mixes the data of stages 1-3.
pub fn stage_mixture(stage: u8) -> BTreeMap<Source, f64> {
    let pairs: &[(Source, f64)] = match stage {
        1 => &[(Source::Qa, 1.0)],
        2 => &[(Source::VideoTrajectory, 1.0)],
        3 => &[(Source::Cot, 1.0)],
        _ => &[(Source::Qa, 0.1), (Source::VideoTrajectory, 0.4), (Source::Cot, 0.5)],
    };
    pairs.iter().copied().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub stage: u8,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Overrides the stage's default mixture.
    pub mixture: Option<BTreeMap<Source, f64>>,
    pub schedule: Schedule,
    pub grad_clip: Option<f64>,
    /// Probability that a trajectory sample gets the plain planning prompt
    /// instead of its instruction.
    pub instruction_dropout: f64,
    /// Train the planner on the single noise draw `infer` makes with this
    /// seed, instead of fresh noise per sample.
    pub fixed_noise_seed: Option<u64>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            steps: 200,
            lr: 1e-4,
            batch_size: 16,
            seed: 0,
            loss_weights: LossWeights::default(),
            mixture: None,
            schedule: Schedule::Constant,
            grad_clip: Some(1.0),
            instruction_dropout: 0.2,
            fixed_noise_seed: None,
        }
    }
}

impl StageConfig {
    pub fn for_stage(stage: u8) -> Self {
        Self {
            stage,
            ..Self::default()
        }
    }

    pub fn trainable(&self) -> ExpertSet {
        stage_trainable(self.stage)
    }

    pub fn resolved_mixture(&self) -> BTreeMap<Source, f64> {
        self.mixture.clone().unwrap_or_else(|| stage_mixture(self.stage))
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.stage) {
            return Err(Error::Config(format!("stage {} outside 1..4", self.stage)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.instruction_dropout) {
            return Err(Error::Config("instruction_dropout must lie in [0, 1]".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        let w = &self.loss_weights;
        if ![w.alpha, w.beta, w.gamma].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Mixture::new(&self.resolved_mixture()).map(|_| ())
    }
}

/// Losses of one optimization step; `None` for terms that were inactive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub total: f64,
    pub und: Option<f64>,
    pub plan: Option<f64>,
    pub gen: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub losses: Vec<StepLoss>,
    pub meta: CheckpointMeta,
}

/// Rendered frames and model-unit tensors of one scenario.
#[derive(Clone, Debug)]
pub struct SceneCache {
    pub obs: Vec<Matrix>,
    pub hist: Matrix,
    pub action: Matrix,
    pub gen_hist: FrameTokens,
    pub gen_fut: FrameTokens,
}

pub fn scene_cache(model: &Model, scenario: &Scenario, world: &WorldConfig) -> Result<SceneCache> {
    let c = &model.config;
    if world.frame_size != c.frame_size {
        return Err(Error::Config(format!(
            "world frames are {}px, model expects {}px",
            world.frame_size, c.frame_size
        )));
    }
    let render = |ts: &[usize]| -> Result<Vec<Matrix>> {
        ts.iter().map(|&t| Ok(render_frame(scenario, t, world)?.pixels)).collect()
    };
    let to_model = |v: Vec<Matrix>| v.iter().map(pixels_to_model).collect::<Vec<_>>();
    Ok(SceneCache {
        obs: render(&c.obs_frames)?,
        hist: history_features(&scenario.history(), c)?,
        action: action_to_model(&scenario.future_chunk(), c),
        gen_hist: patchify(&to_model(render(&c.hist_frames)?), c.patch)?,
        gen_fut: patchify(&to_model(render(&c.fut_frames)?), c.patch)?,
    })
}

struct FlowDraw {
    eps: Matrix,
    tau: f64,
}

struct SamplePlan {
    scene: usize,
    input_ids: Vec<usize>,
    /// Answer tokens plus EOS; empty when there is no text target.
    targets: Vec<usize>,
    plan: Option<FlowDraw>,
    gen: Option<FlowDraw>,
    draw: f64,
}

#[derive(Default)]
struct SampleStats {
    ce_sum: f64,
    plan_mse: Option<f64>,
    gen_mse: Option<f64>,
}

struct BatchCounts {
    und_tokens: usize,
    plan: usize,
    gen: usize,
}

fn qa_texts(s: &Scenario) -> Vec<(String, String)> {
    s.qa.iter().map(|q| (q.question.clone(), q.target_text())).collect()
}

struct Planner<'a> {
    model: &'a Model,
    cfg: &'a StageConfig,
    world: &'a WorldConfig,
    scenarios: &'a [Scenario],
    trainable: ExpertSet,
    fixed_eps: Option<Matrix>,
}

impl Planner<'_> {
    fn plan<R: Rng>(&self, source: Source, rng: &mut R) -> SamplePlan {
        let c = &self.model.config;
        let scene = rng.random_range(0..self.scenarios.len());
        let s = &self.scenarios[scene];
        let (prompt, answer) = match source {
            Source::Qa => {
                let qa = qa_texts(s);
                let (q, a) = &qa[rng.random_range(0..qa.len())];
                (q.clone(), Some(a.clone()))
            }
            Source::Cot => (COT_PROMPT.to_string(), Some(write_cot(s, self.world).to_json())),
            Source::VideoTrajectory => {
                let prompt = if rng.random::<f64>() < self.cfg.instruction_dropout {
                    PLANNING_PROMPT.to_string()
                } else {
                    instruction_prompt(s.command)
                };
                (prompt, None)
            }
        };
        let mut input_ids = self.model.prompt_ids(&prompt);
        input_ids.truncate(c.max_text - 1);
        let mut targets = Vec::new();
        let w = &self.cfg.loss_weights;
        if let Some(a) = answer.filter(|_| self.trainable.contains(Expert::Understanding) && w.alpha > 0.0) {
            let mut ans = self.model.vocab.encode(&a);
            ans.truncate(c.max_answer.min(c.max_text - input_ids.len()));
            input_ids.extend(&ans);
            targets = ans;
            targets.push(EOS);
        }
        let video = source == Source::VideoTrajectory;
        let gen_active = video && self.trainable.contains(Expert::Generation) && w.gamma > 0.0;
        let plan_active = self.trainable.contains(Expert::Planning) && w.beta > 0.0;
        let plan_needed = video && (gen_active || plan_active);
        let plan = plan_needed.then(|| FlowDraw {
            eps: match &self.fixed_eps {
                Some(e) => e.clone(),
                None => standard_normal(FUTURE_STEPS, 2, rng),
            },
            tau: sample_tau(rng),
        });
        let gen = gen_active.then(|| {
            let n = c.fut_frames.len() * c.patches_per_frame();
            FlowDraw {
                eps: standard_normal(n, c.patch * c.patch, rng),
                tau: sample_tau(rng),
            }
        });
        let draw = if gen_active { rng.random::<f64>() } else { 0.0 };
        SamplePlan {
            scene,
            input_ids,
            targets,
            plan,
            gen,
            draw,
        }
    }
}

fn sample_grad(
    model: &Model,
    trainable: ExpertSet,
    w: &LossWeights,
    counts: &BatchCounts,
    cache: &SceneCache,
    p: &SamplePlan,
) -> Result<(Gradients, SampleStats)> {
    let c = &model.config;
    let mut g = Graph::new(&model.store, trainable);
    let und = embed_und(&mut g, model, &cache.obs, &p.input_ids)?;
    let noised = match &p.plan {
        Some(d) => Some(flowcore::noise(&cache.action, &d.eps, d.tau)?),
        None => None,
    };
    let plan_in = match (&p.plan, &noised) {
        (Some(d), Some(x)) => Some(embed_plan(&mut g, model, &cache.hist, x, Some(d.tau))?),
        _ => None,
    };
    let (uh, ph) = trunk(&mut g, model, und, plan_in);
    let mut stats = SampleStats::default();
    let mut terms: Vec<Var> = Vec::new();

    if !p.targets.is_empty() {
        let n_img = cache.obs.len() * c.patches_per_frame();
        let first = n_img + p.input_ids.len() - p.targets.len();
        let rows: Vec<usize> = (first..first + p.targets.len()).collect();
        let logits = lm_logits(&mut g, model, uh, &rows);
        let ce = g.cross_entropy(logits, &p.targets);
        let n = p.targets.len() as f64;
        stats.ce_sum = g.value(ce).item() * n;
        terms.push(g.scale(ce, w.alpha * n / counts.und_tokens as f64));
    }
    if let (Some(d), Some(x)) = (&p.plan, &noised) {
        let u = plan_head(&mut g, model, ph);
        let target = flowcore::velocity_target(&cache.action, &d.eps)?;
        if trainable.contains(Expert::Planning) && w.beta > 0.0 {
            let l = g.mse(u, &target);
            stats.plan_mse = Some(g.value(l).item());
            terms.push(g.scale(l, w.beta / counts.plan as f64));
        }
        if let Some(gd) = &p.gen {
            let h = g.detach(uh);
            let a_hat = select_action(&cache.action, x, g.value(u), d.tau, p.draw)?;
            let a = action_embed(&mut g, model, &a_hat);
            let fut = flowcore::noise(&cache.gen_fut.tokens, &gd.eps, gd.tau)?;
            let tokens = Matrix::concat_rows(&[&cache.gen_hist.tokens, &fut])?;
            let v = gen_velocity(&mut g, model, &tokens, h, a, gd.tau)?;
            let n_hist = cache.gen_hist.tokens.rows();
            let vf = g.slice_rows(v, n_hist, fut.rows());
            let target = flowcore::velocity_target(&cache.gen_fut.tokens, &gd.eps)?;
            let l = g.mse(vf, &target);
            stats.gen_mse = Some(g.value(l).item());
            terms.push(g.scale(l, w.gamma / counts.gen as f64));
        }
    }
    let grads = match terms.split_first() {
        None => Gradients::empty(model.store.len()),
        Some((first, rest)) => {
            let total = rest.iter().fold(*first, |acc, t| g.add(acc, *t));
            g.backward(total)
        }
    };
    Ok((grads, stats))
}

fn non_finite(step: usize) -> Error {
    Error::NonFinite {
        stage: "training".into(),
        step,
    }
}

/// Train `model` in place for one stage. Parameters of experts outside the
/// stage's trainable set are never written.
pub fn run_stage(
    model: &mut Model,
    cfg: &StageConfig,
    scenarios: &[Scenario],
    world: &WorldConfig,
    exec: Exec,
) -> Result<StageReport> {
    run_stage_with(model, cfg, scenarios, world, exec, |_| {})
}

/// [`run_stage`] with a per-step callback.
pub fn run_stage_with(
    model: &mut Model,
    cfg: &StageConfig,
    scenarios: &[Scenario],
    world: &WorldConfig,
    exec: Exec,
    mut on_step: impl FnMut(&StepLoss),
) -> Result<StageReport> {
    cfg.validate()?;
    let mixture = Mixture::new(&cfg.resolved_mixture())?;
    if scenarios.is_empty() {
        return Err(Error::MissingSource("scenarios".into()));
    }
    if mixture.sources().contains(&Source::Qa) && scenarios.iter().any(|s| s.qa.is_empty()) {
        return Err(Error::MissingSource(Source::Qa.to_string()));
    }
    let caches: Vec<SceneCache> = exec::map(exec, scenarios, |s| scene_cache(model, s, world))
        .into_iter()
        .collect::<Result<_>>()?;
    let trainable = cfg.trainable();
    let fixed_eps = cfg
        .fixed_noise_seed
        .map(|s| standard_normal(FUTURE_STEPS, 2, &mut ChaCha8Rng::seed_from_u64(s)));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.store.len());
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let planner = Planner {
            model,
            cfg,
            world,
            scenarios,
            trainable,
            fixed_eps: fixed_eps.clone(),
        };
        let plans: Vec<SamplePlan> = (0..cfg.batch_size)
            .map(|_| {
                let src = mixture.draw(&mut rng);
                planner.plan(src, &mut rng)
            })
            .collect();
        let counts = BatchCounts {
            und_tokens: plans.iter().map(|p| p.targets.len()).sum(),
            plan: plans
                .iter()
                .filter(|p| p.plan.is_some() && trainable.contains(Expert::Planning) && cfg.loss_weights.beta > 0.0)
                .count(),
            gen: plans.iter().filter(|p| p.gen.is_some()).count(),
        };
        let m: &Model = model;
        let results = exec::map(exec, &plans, |p| {
            sample_grad(m, trainable, &cfg.loss_weights, &counts, &caches[p.scene], p)
        });
        let mut grads = Gradients::empty(model.store.len());
        let (mut ce, mut plan_sum, mut gen_sum) = (0.0, 0.0, 0.0);
        for r in results {
            let (gr, st) = r?;
            grads.accumulate(&gr);
            ce += st.ce_sum;
            plan_sum += st.plan_mse.unwrap_or(0.0);
            gen_sum += st.gen_mse.unwrap_or(0.0);
        }
        let und = (counts.und_tokens > 0).then(|| ce / counts.und_tokens as f64);
        let plan = (counts.plan > 0).then(|| plan_sum / counts.plan as f64);
        let gen = (counts.gen > 0).then(|| gen_sum / counts.gen as f64);
        let total = total_loss(und.unwrap_or(0.0), plan.unwrap_or(0.0), gen.unwrap_or(0.0), &cfg.loss_weights)
            .map_err(|_| non_finite(step))?;
        if !grads.is_finite() {
            return Err(non_finite(step));
        }
        if let Some(max) = cfg.grad_clip {
            clip_global_norm(&mut grads, max);
        }
        let lr = lr_at(cfg.lr, cfg.schedule, step, cfg.steps);
        adam.step(&mut model.store, &grads, lr);
        let rec = StepLoss {
            step,
            total,
            und,
            plan,
            gen,
            lr,
        };
        on_step(&rec);
        losses.push(rec);
    }
    Ok(StageReport {
        losses,
        meta: CheckpointMeta {
            stage: cfg.stage,
            step: cfg.steps,
            world_config_hash: Some(world.hash()),
        },
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9e}")).unwrap_or_default()
}

pub fn write_loss_csv(path: &Path, losses: &[StepLoss]) -> Result<()> {
    let mut out = String::from("step,total,und,plan,gen,lr\n");
    for l in losses {
        out.push_str(&format!(
            "{},{:.9e},{},{},{},{:.6e}\n",
            l.step,
            l.total,
            opt(l.und),
            opt(l.plan),
            opt(l.gen),
            l.lr
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// gnuplot script plotting every loss column of `csv_name` against step.
pub fn write_gnuplot(path: &Path, csv_name: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let script = format!(
        "set datafile separator ','\nset key autotitle columnhead\nset logscale y\nset xlabel 'step'\n\
         set terminal pngcairo size 900,500\nset output 'loss.png'\n\
         plot for [c=2:5] '{csv_name}' using 1:c with lines\n"
    );
    f.write_all(script.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Trailing moving average with the given window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}
