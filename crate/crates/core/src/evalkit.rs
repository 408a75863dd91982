//! Metrics: planning L2 and collisions, instruction agreement, QA accuracy,
//! BLEU-1, and a Fréchet distance over fixed random frame features.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataqa::{derive_command, instruction_prompt, write_cot, CommandLabel, QACategory, QAPair, COT_PROMPT, PLANNING_PROMPT};
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::experts::{greedy_decode, infer, InferOptions, InferRequest, Model};
use crate::toyworld::{render_frame, ActionChunk, Frame, Scenario, WorldConfig, FUTURE_STEPS};

pub const HORIZONS: [f64; 3] = [1.0, 2.0, 3.0];
pub const DEFAULT_FEATURE_DIM: usize = 16;
const JITTER: f64 = 1e-6;

fn horizon_index(horizon_s: f64) -> Result<usize> {
    let i = 4.0 * horizon_s - 1.0;
    if !(i >= 0.0 && i.fract() == 0.0 && (i as usize) < FUTURE_STEPS) {
        return Err(Error::InvalidArgument(format!("horizon {horizon_s} s is not a waypoint time")));
    }
    Ok(i as usize)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Displacement between the waypoints at `horizon_s` (index 4t − 1).
pub fn l2_at(pred: &ActionChunk, gt: &ActionChunk, horizon_s: f64) -> Result<f64> {
    let i = horizon_index(horizon_s)?;
    Ok(dist(pred.waypoints()[i], gt.waypoints()[i]))
}

/// Mean displacement over every waypoint up to `horizon_s`.
pub fn l2_mean_to(pred: &ActionChunk, gt: &ActionChunk, horizon_s: f64) -> Result<f64> {
    let n = horizon_index(horizon_s)? + 1;
    let s: f64 = (0..n).map(|i| dist(pred.waypoints()[i], gt.waypoints()[i])).sum();
    Ok(s / n as f64)
}

/// Whether any waypoint up to the horizon touches an obstacle disc; the
/// boundary counts as contact.
pub fn collides(pred: &ActionChunk, scenario: &Scenario, ego_radius: f64, horizon_s: f64) -> Result<bool> {
    let n = horizon_index(horizon_s)? + 1;
    let obstacles = scenario.obstacles_ego();
    Ok(pred.waypoints()[..n]
        .iter()
        .any(|w| obstacles.iter().any(|o| dist(*w, o.center) <= ego_radius + o.radius)))
}

pub fn collision_rate(preds: &[(ActionChunk, &Scenario)], ego_radius: f64, horizon_s: f64) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("collision rate of an empty set".into()));
    }
    if !(ego_radius > 0.0) {
        return Err(Error::InvalidArgument("ego radius must be positive".into()));
    }
    let mut hits = 0;
    for (p, s) in preds {
        hits += collides(p, s, ego_radius, horizon_s)? as usize;
    }
    Ok(hits as f64 / preds.len() as f64)
}

/// Leading option letter of a multiple-choice reply: "B", "B.", "B) text".
fn leading_label(text: &str) -> Option<char> {
    let mut chars = text.trim().chars();
    let c = chars.next()?;
    if !c.is_ascii_alphabetic() {
        return None;
    }
    match chars.next() {
        None => Some(c.to_ascii_uppercase()),
        Some(n) if n == '.' || n == ')' || n == ':' || n.is_whitespace() => Some(c.to_ascii_uppercase()),
        _ => None,
    }
}

pub fn answer_matches(pred: &str, gold: &QAPair) -> bool {
    match &gold.correct_label {
        Some(label) => {
            let want = label.chars().next().map(|c| c.to_ascii_uppercase());
            leading_label(pred).is_some() && leading_label(pred) == want
        }
        None => pred.trim().to_lowercase() == gold.answer.trim().to_lowercase(),
    }
}

pub fn qa_accuracy(preds: &[String], gold: &[QAPair]) -> Result<f64> {
    if preds.len() != gold.len() {
        return Err(Error::InvalidArgument(format!("{} predictions for {} questions", preds.len(), gold.len())));
    }
    if gold.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let ok = preds.iter().zip(gold).filter(|(p, g)| answer_matches(p, g)).count();
    Ok(ok as f64 / gold.len() as f64)
}

/// Clipped unigram precision times the brevity penalty, on whitespace tokens.
pub fn bleu1(candidate: &str, reference: &str) -> f64 {
    let cand: Vec<&str> = candidate.split_whitespace().collect();
    let refs: Vec<&str> = reference.split_whitespace().collect();
    if cand.is_empty() {
        return 0.0;
    }
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for t in &refs {
        *ref_counts.entry(t).or_default() += 1;
    }
    let mut cand_counts: HashMap<&str, usize> = HashMap::new();
    for t in &cand {
        *cand_counts.entry(t).or_default() += 1;
    }
    let clipped: usize = cand_counts
        .iter()
        .map(|(t, &n)| n.min(ref_counts.get(t).copied().unwrap_or(0)))
        .sum();
    let precision = clipped as f64 / cand.len() as f64;
    let bp = (1.0 - refs.len() as f64 / cand.len() as f64).min(0.0).exp();
    precision * bp
}

/// Fixed `k × n_pixels` Gaussian projection, scaled so features have unit
/// variance for unit-variance pixels.
pub fn feature_map(n_pixels: usize, k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (n_pixels as f64).sqrt()).expect("positive std");
    DMatrix::from_fn(k, n_pixels, |_, _| normal.sample(&mut rng))
}

fn fit_gaussian(frames: &[Frame], proj: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument("frechet_proxy needs at least 2 frames per set".into()));
    }
    let feats: Vec<DVector<f64>> = frames
        .iter()
        .map(|f| {
            if f.pixels.len() != proj.ncols() {
                return Err(Error::Shape("frames differ in size".into()));
            }
            Ok(proj * DVector::from_column_slice(f.pixels.data()))
        })
        .collect::<Result<_>>()?;
    let n = feats.len() as f64;
    let k = proj.nrows();
    let mean = feats.iter().fold(DVector::zeros(k), |acc, f| acc + f) / n;
    let mut cov = DMatrix::zeros(k, k);
    for f in &feats {
        let c = f - &mean;
        cov += &c * c.transpose();
    }
    Ok((mean, cov / (n - 1.0)))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

fn regularize(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new((cov + cov.transpose()) * 0.5);
    if e.eigenvalues.min() <= 0.0 {
        cov + DMatrix::identity(cov.nrows(), cov.ncols()) * JITTER
    } else {
        cov.clone()
    }
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa Σb)^½)`. The cross term is evaluated as
/// `tr((√Σa Σb √Σa)^½)`, which is symmetric PSD.
pub fn frechet_gaussian(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let (ca, cb) = (regularize(cov_a), regularize(cov_b));
    let sa = sym_sqrt(&ca);
    let cross = sym_sqrt(&(&sa * &cb * &sa)).trace();
    let d = (mu_a - mu_b).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    d.max(0.0)
}

pub fn frechet_proxy(set_a: &[Frame], set_b: &[Frame], feature_seed: u64) -> Result<f64> {
    frechet_proxy_k(set_a, set_b, feature_seed, DEFAULT_FEATURE_DIM)
}

pub fn frechet_proxy_k(set_a: &[Frame], set_b: &[Frame], feature_seed: u64, k: usize) -> Result<f64> {
    let n_pix = set_a
        .first()
        .map(|f| f.pixels.len())
        .ok_or_else(|| Error::InvalidArgument("frechet_proxy needs at least 2 frames per set".into()))?;
    let proj = feature_map(n_pix, k, feature_seed);
    let (ma, ca) = fit_gaussian(set_a, &proj)?;
    let (mb, cb) = fit_gaussian(set_b, &proj)?;
    Ok(frechet_gaussian(&ma, &ca, &mb, &cb))
}

pub fn instruction_agreement(commands: &[CommandLabel], preds: &[ActionChunk], straight_threshold: f64) -> Result<f64> {
    if commands.len() != preds.len() {
        return Err(Error::InvalidArgument(format!("{} commands for {} trajectories", commands.len(), preds.len())));
    }
    if commands.is_empty() {
        return Err(Error::InvalidArgument("agreement of an empty set".into()));
    }
    let ok = commands
        .iter()
        .zip(preds)
        .filter(|(c, p)| derive_command(p, straight_threshold) == **c)
        .count();
    Ok(ok as f64 / commands.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonL2 {
    #[serde(rename = "1s")]
    pub s1: f64,
    #[serde(rename = "2s")]
    pub s2: f64,
    #[serde(rename = "3s")]
    pub s3: f64,
    pub avg: f64,
}

impl HorizonL2 {
    fn from_values(v: [f64; 3]) -> Self {
        Self {
            s1: v[0],
            s2: v[1],
            s3: v[2],
            avg: (v[0] + v[1] + v[2]) / 3.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub planning: usize,
    pub qa: usize,
    pub cot: usize,
    pub generation: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub checkpoint_hash: Option<String>,
    pub dataset_hash: Option<String>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Displacement at each horizon; the headline numbers.
    pub l2_at: HorizonL2,
    /// Mean displacement up to each horizon.
    pub l2_mean_to: HorizonL2,
    pub collision_rate: f64,
    pub qa_accuracy: Option<f64>,
    pub bleu1: Option<f64>,
    /// `None` when generation was skipped.
    pub frechet_proxy: Option<f64>,
    pub instruction_agreement: f64,
    pub n_samples: SampleCounts,
    #[serde(default)]
    pub meta: RunMeta,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        let l2 = [&self.l2_at, &self.l2_mean_to]
            .iter()
            .flat_map(|h| [h.s1, h.s2, h.s3, h.avg])
            .all(|v| v.is_finite() && v >= 0.0);
        let ok = l2
            && frac(self.collision_rate)
            && frac(self.instruction_agreement)
            && self.qa_accuracy.is_none_or(frac)
            && self.bleu1.is_none_or(frac)
            && self.frechet_proxy.is_none_or(|v| v.is_finite() && v >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Malformed("metric report out of range".into()))
        }
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let rows = [
            ("l2_at_1s", format!("{:.6}", self.l2_at.s1)),
            ("l2_at_2s", format!("{:.6}", self.l2_at.s2)),
            ("l2_at_3s", format!("{:.6}", self.l2_at.s3)),
            ("l2_at_avg", format!("{:.6}", self.l2_at.avg)),
            ("l2_mean_to_1s", format!("{:.6}", self.l2_mean_to.s1)),
            ("l2_mean_to_2s", format!("{:.6}", self.l2_mean_to.s2)),
            ("l2_mean_to_3s", format!("{:.6}", self.l2_mean_to.s3)),
            ("l2_mean_to_avg", format!("{:.6}", self.l2_mean_to.avg)),
            ("collision_rate", format!("{:.6}", self.collision_rate)),
            ("qa_accuracy", opt(self.qa_accuracy)),
            ("bleu1", opt(self.bleu1)),
            ("frechet_proxy", opt(self.frechet_proxy)),
            ("instruction_agreement", format!("{:.6}", self.instruction_agreement)),
        ];
        let mut out = String::from("metric,value\n");
        for (k, v) in rows {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub steps: usize,
    pub seed: u64,
    pub generate: bool,
    /// Decode QA answers and chain-of-thought text.
    pub decode_text: bool,
    /// Plan with the ground-truth command as the instruction; otherwise with
    /// the plain planning prompt.
    pub with_command: bool,
    pub ego_radius: f64,
    pub feature_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            steps: crate::flowcore::DEFAULT_STEPS,
            seed: 0,
            generate: true,
            decode_text: true,
            with_command: true,
            ego_radius: 1.0,
            feature_seed: 0,
        }
    }
}

/// Model outputs for one scenario.
#[derive(Clone, Debug)]
pub struct ScenarioOutput {
    pub id: String,
    pub action: ActionChunk,
    pub qa: Vec<(QAPair, String)>,
    pub cot: Option<(String, String)>,
    pub future_frames: Vec<Frame>,
    pub gt_frames: Vec<Frame>,
}

/// Per-scenario inference seed.
pub fn scenario_infer_seed(seed: u64, index: usize) -> u64 {
    crate::splitmix64(seed ^ crate::splitmix64(index as u64))
}

fn run_one(model: &Model, s: &Scenario, i: usize, world: &WorldConfig, opts: &EvalOptions) -> Result<ScenarioOutput> {
    let c = &model.config;
    let render = |ts: &[usize]| -> Result<Vec<Frame>> { ts.iter().map(|&t| render_frame(s, t, world)).collect() };
    let obs: Vec<_> = render(&c.obs_frames)?.into_iter().map(|f| f.pixels).collect();
    let prompt = if opts.with_command {
        instruction_prompt(s.command)
    } else {
        PLANNING_PROMPT.to_string()
    };
    let req = InferRequest {
        frames: obs.clone(),
        prompt,
        history: s.history(),
        gen_history: render(&c.hist_frames)?.into_iter().map(|f| f.pixels).collect(),
    };
    let out = infer(
        model,
        &req,
        &InferOptions {
            steps: opts.steps,
            seed: scenario_infer_seed(opts.seed, i),
            decode: false,
            generate: opts.generate,
        },
    )?;
    let mut qa = Vec::new();
    let mut cot = None;
    if opts.decode_text {
        for pair in s.qa.iter().filter(|q| {
            matches!(q.category, QACategory::SmallObject | QACategory::AccidentPred | QACategory::Relationship)
        }) {
            let ids = greedy_decode(model, &obs, &model.prompt_ids(&pair.question))?;
            qa.push((pair.clone(), model.vocab.decode(&ids)));
        }
        let ids = greedy_decode(model, &obs, &model.prompt_ids(COT_PROMPT))?;
        cot = Some((model.vocab.decode(&ids), write_cot(s, world).to_json()));
    }
    let gt_frames = if opts.generate { render(&c.fut_frames)? } else { Vec::new() };
    Ok(ScenarioOutput {
        id: s.id.clone(),
        action: out.action,
        qa,
        cot,
        future_frames: out.future_frames,
        gt_frames,
    })
}

/// Run the model over `scenarios` (in parallel when `exec` allows) and
/// aggregate every metric.
pub fn evaluate(
    model: &Model,
    scenarios: &[Scenario],
    world: &WorldConfig,
    opts: &EvalOptions,
    exec: Exec,
) -> Result<(MetricReport, Vec<ScenarioOutput>)> {
    if scenarios.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation split".into()));
    }
    let idx: Vec<usize> = (0..scenarios.len()).collect();
    let outputs: Vec<ScenarioOutput> = exec::map(exec, &idx, |&i| run_one(model, &scenarios[i], i, world, opts))
        .into_iter()
        .collect::<Result<_>>()?;
    let report = aggregate(scenarios, &outputs, world, opts)?;
    Ok((report, outputs))
}

pub fn aggregate(
    scenarios: &[Scenario],
    outputs: &[ScenarioOutput],
    world: &WorldConfig,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let n = outputs.len() as f64;
    let mut at = [0.0; 3];
    let mut upto = [0.0; 3];
    for (s, o) in scenarios.iter().zip(outputs) {
        let gt = s.future_chunk();
        for (k, h) in HORIZONS.iter().enumerate() {
            at[k] += l2_at(&o.action, &gt, *h)? / n;
            upto[k] += l2_mean_to(&o.action, &gt, *h)? / n;
        }
    }
    let pairs: Vec<(ActionChunk, &Scenario)> = outputs.iter().map(|o| o.action.clone()).zip(scenarios).collect();
    let collision = collision_rate(&pairs, opts.ego_radius, 3.0)?;
    let commands: Vec<CommandLabel> = scenarios.iter().map(|s| s.command).collect();
    let actions: Vec<ActionChunk> = outputs.iter().map(|o| o.action.clone()).collect();
    let agreement = instruction_agreement(&commands, &actions, world.straight_threshold)?;

    let (gold, preds): (Vec<QAPair>, Vec<String>) = outputs.iter().flat_map(|o| o.qa.iter().cloned()).unzip();
    let qa = (!gold.is_empty()).then(|| qa_accuracy(&preds, &gold)).transpose()?;
    let cots: Vec<&(String, String)> = outputs.iter().filter_map(|o| o.cot.as_ref()).collect();
    let bleu = (!cots.is_empty()).then(|| cots.iter().map(|(c, r)| bleu1(c, r)).sum::<f64>() / cots.len() as f64);

    let generated: Vec<Frame> = outputs.iter().flat_map(|o| o.future_frames.iter().cloned()).collect();
    let truth: Vec<Frame> = outputs.iter().flat_map(|o| o.gt_frames.iter().cloned()).collect();
    let frechet = if opts.generate && generated.len() >= 2 {
        Some(frechet_proxy(&generated, &truth, opts.feature_seed)?)
    } else {
        None
    };
    let report = MetricReport {
        l2_at: HorizonL2::from_values(at),
        l2_mean_to: HorizonL2::from_values(upto),
        collision_rate: collision,
        qa_accuracy: qa,
        bleu1: bleu,
        frechet_proxy: frechet,
        instruction_agreement: agreement,
        n_samples: SampleCounts {
            planning: outputs.len(),
            qa: gold.len(),
            cot: cots.len(),
            generation: generated.len(),
        },
        meta: RunMeta {
            seed: opts.seed,
            ..RunMeta::default()
        },
    };
    report.validate()?;
    Ok(report)
}

/// Ego-frame history as one flat vector (positions, velocities,
/// accelerations).
pub fn history_vector(s: &Scenario) -> Vec<f64> {
    let h = s.history();
    let mut v = Vec::with_capacity(16 * 6);
    for i in 0..h.waypoints.len() {
        v.extend_from_slice(&h.step_features(i));
    }
    v
}

/// Future of the training scenario nearest in history space, per query.
/// With `same_command`, candidates are restricted to the query's command.
pub fn nearest_neighbor_plans(train: &[Scenario], queries: &[Scenario], same_command: bool, exec: Exec) -> Result<Vec<ActionChunk>> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("nearest neighbour needs training scenarios".into()));
    }
    let keys: Vec<Vec<f64>> = train.iter().map(history_vector).collect();
    let out = exec::map(exec, queries, |q| {
        let qv = history_vector(q);
        let best = (0..train.len())
            .filter(|&j| !same_command || train[j].command == q.command)
            .map(|j| {
                let d: f64 = keys[j].iter().zip(&qv).map(|(a, b)| (a - b) * (a - b)).sum();
                (j, d)
            })
            .fold(None, |best: Option<(usize, f64)>, (j, d)| match best {
                Some((_, bd)) if bd <= d => best,
                _ => Some((j, d)),
            });
        best.map(|(j, _)| train[j].future_chunk())
            .ok_or_else(|| Error::InvalidArgument("no candidate with the query's command".into()))
    });
    out.into_iter().collect()
}

/// Mean L2 at `horizon_s` between predictions and the queries' futures.
pub fn mean_l2_at(preds: &[ActionChunk], queries: &[Scenario], horizon_s: f64) -> Result<f64> {
    if preds.len() != queries.len() || preds.is_empty() {
        return Err(Error::InvalidArgument("prediction/query count mismatch".into()));
    }
    let mut s = 0.0;
    for (p, q) in preds.iter().zip(queries) {
        s += l2_at(p, &q.future_chunk(), horizon_s)?;
    }
    Ok(s / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use crate::toyworld::{generate_scenario, Obstacle};
    use proptest::prelude::*;

    fn chunk(f: impl Fn(usize) -> [f64; 2]) -> ActionChunk {
        ActionChunk::new((0..20).map(f).collect()).unwrap()
    }

    #[test]
    fn l2_examples() {
        let gt = chunk(|i| [i as f64, 0.0]);
        let shifted = chunk(|i| [i as f64 + 0.3, 0.4]);
        for h in HORIZONS {
            assert_eq!(l2_at(&gt, &gt, h).unwrap(), 0.0);
            assert!((l2_at(&shifted, &gt, h).unwrap() - 0.5).abs() < 1e-12);
        }
        assert!(l2_at(&gt, &gt, 6.0).is_err());
        assert!(l2_at(&gt, &gt, 1.1).is_err());
        let bumped = chunk(|i| [i as f64, if i == 11 { 2.0 } else { 0.0 }]);
        assert_eq!(l2_at(&bumped, &gt, 3.0).unwrap(), 2.0);
        assert!((l2_mean_to(&bumped, &gt, 3.0).unwrap() - 2.0 / 12.0).abs() < 1e-15);
    }

    fn scenario_with(obstacles: Vec<Obstacle>) -> Scenario {
        let mut s = generate_scenario(1, &WorldConfig::default()).unwrap();
        let pose = s.current_pose();
        s.obstacles = obstacles
            .into_iter()
            .map(|o| Obstacle {
                center: crate::toyworld::from_ego_frame(&[o.center], pose)[0],
                radius: o.radius,
            })
            .collect();
        s
    }

    #[test]
    fn collision_examples() {
        let path = chunk(|i| [i as f64, 0.0]);
        let empty = scenario_with(vec![]);
        assert_eq!(collision_rate(&[(path.clone(), &empty)], 1.0, 3.0).unwrap(), 0.0);
        let centered = scenario_with(vec![Obstacle {
            center: [5.0, 0.0],
            radius: 0.5,
        }]);
        assert_eq!(collision_rate(&[(path.clone(), &centered)], 1.0, 3.0).unwrap(), 1.0);
        // exactly ego_radius + r away from waypoint [3, 0]
        let boundary = scenario_with(vec![Obstacle {
            center: [3.0, 1.5],
            radius: 0.5,
        }]);
        let o = &boundary.obstacles_ego()[0];
        let d = dist([3.0, 0.0], o.center);
        assert!(collides(&path, &boundary, d - o.radius, 3.0).unwrap());
        assert!(!collides(&path, &boundary, d - o.radius - 1e-9, 3.0).unwrap());
        assert!(collision_rate(&[], 1.0, 3.0).is_err());
    }

    fn tf(answer: &str) -> QAPair {
        QAPair {
            question: "q".into(),
            answer: answer.into(),
            category: QACategory::SmallObject,
            options: None,
            correct_label: None,
        }
    }

    #[test]
    fn qa_examples() {
        assert_eq!(qa_accuracy(&["True".into()], &[tf("True")]).unwrap(), 1.0);
        assert_eq!(qa_accuracy(&[" true ".into()], &[tf("True")]).unwrap(), 1.0);
        let mc = QAPair {
            question: "q".into(),
            answer: "x".into(),
            category: QACategory::Relationship,
            options: Some([("A".to_string(), "x".to_string()), ("B".to_string(), "y".to_string())].into()),
            correct_label: Some("A".into()),
        };
        assert!(answer_matches("A) something", &mc));
        assert!(answer_matches("A. x", &mc));
        assert!(answer_matches("a", &mc));
        assert!(!answer_matches("B. x", &mc));
        assert!(!answer_matches("Ax", &mc));
        assert!(qa_accuracy(&[], &[tf("True")]).is_err());
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu1("a b c", "a b c"), 1.0);
        assert_eq!(bleu1("a b", "c d"), 0.0);
        assert_eq!(bleu1("a b c d", "a b x y"), 0.5);
        assert_eq!(bleu1("", "a"), 0.0);
        // the brevity penalty applies to short candidates
        assert!((bleu1("a", "a b") - (-1.0f64).exp()).abs() < 1e-15);
        // clipping
        assert_eq!(bleu1("a a a a", "a b"), 0.25);
    }

    #[test]
    fn frechet_closed_forms() {
        let k = 2;
        let i = DMatrix::<f64>::identity(k, k);
        let z = DVector::zeros(k);
        let d = frechet_gaussian(&z, &i, &z, &(&i * 4.0));
        assert!((d - k as f64).abs() < 1e-9);
        let m = DVector::from_vec(vec![1.0, 2.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert!((frechet_gaussian(&m, &cov, &z, &cov) - 5.0).abs() < 1e-9);
    }

    fn frames(seed: u64, n: usize, offset: f64) -> Vec<Frame> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Frame {
                pixels: crate::flowcore::standard_normal(8, 8, &mut rng).map(|v| v + offset),
                t_index: 19,
            })
            .collect()
    }

    #[test]
    fn frechet_proxy_properties() {
        let a = frames(1, 40, 0.0);
        let b = frames(2, 40, 0.5);
        assert!(frechet_proxy(&a, &a, 3).unwrap() < 1e-6);
        let ab = frechet_proxy(&a, &b, 3).unwrap();
        let ba = frechet_proxy(&b, &a, 3).unwrap();
        assert!((ab - ba).abs() < 1e-6);
        assert!(ab > 0.0);
        assert!(frechet_proxy(&a[..1], &b, 3).is_err());
        // constant frames have singular covariance; jitter keeps it finite
        let flat: Vec<Frame> = (0..4)
            .map(|_| Frame {
                pixels: Matrix::filled(8, 8, 0.2),
                t_index: 19,
            })
            .collect();
        assert!(frechet_proxy(&flat, &a, 3).unwrap().is_finite());
    }

    #[test]
    fn agreement_examples() {
        let world = WorldConfig::default();
        let s: Vec<Scenario> = (0..30).map(|i| generate_scenario(i, &world).unwrap()).collect();
        let cmds: Vec<CommandLabel> = s.iter().map(|s| s.command).collect();
        let gt: Vec<ActionChunk> = s.iter().map(|s| s.future_chunk()).collect();
        assert_eq!(instruction_agreement(&cmds, &gt, world.straight_threshold).unwrap(), 1.0);
        let balanced: Vec<CommandLabel> = (0..30).map(|i| CommandLabel::ALL[i % 3]).collect();
        let straight: Vec<ActionChunk> = (0..30).map(|_| chunk(|i| [i as f64, 0.0])).collect();
        let a = instruction_agreement(&balanced, &straight, world.straight_threshold).unwrap();
        assert!((a - 1.0 / 3.0).abs() < 1e-12);
        assert!(instruction_agreement(&[], &[], 0.1).is_err());
    }

    #[test]
    fn nearest_neighbor_finds_itself() {
        let world = WorldConfig::default();
        let s: Vec<Scenario> = (0..10).map(|i| generate_scenario(i, &world).unwrap()).collect();
        let p = nearest_neighbor_plans(&s, &s[3..5], false, Exec::Sequential).unwrap();
        assert_eq!(p[0], s[3].future_chunk());
        assert_eq!(mean_l2_at(&p, &s[3..5], 3.0).unwrap(), 0.0);
    }

    fn arb_chunk() -> impl Strategy<Value = ActionChunk> {
        prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 20)
            .prop_map(|v| ActionChunk::new(v.into_iter().map(|(x, y)| [x, y]).collect()).unwrap())
    }

    proptest! {
        #[test]
        fn l2_is_a_metric(a in arb_chunk(), b in arb_chunk(), c in arb_chunk(), h in 1usize..4) {
            let h = h as f64;
            let ab = l2_at(&a, &b, h).unwrap();
            prop_assert_eq!(ab, l2_at(&b, &a, h).unwrap());
            prop_assert!(ab <= l2_at(&a, &c, h).unwrap() + l2_at(&c, &b, h).unwrap() + 1e-12);
        }

        #[test]
        fn bleu_ignores_token_order(mut toks in prop::collection::vec("[a-d]", 1..12), reference in "[a-e]( [a-e]){0,10}") {
            let s1 = bleu1(&toks.join(" "), &reference);
            toks.reverse();
            prop_assert_eq!(s1, bleu1(&toks.join(" "), &reference));
        }

        #[test]
        fn collisions_monotone_in_radius(seed in 0u64..200, r in 0.1f64..3.0, extra in 0.0f64..2.0) {
            let s = generate_scenario(seed, &WorldConfig::default()).unwrap();
            let p = chunk(|i| [2.0 * i as f64, 0.0]);
            let small = collision_rate(&[(p.clone(), &s)], r, 3.0).unwrap();
            let big = collision_rate(&[(p, &s)], r + extra, 3.0).unwrap();
            prop_assert!(small <= big);
        }
    }
}
