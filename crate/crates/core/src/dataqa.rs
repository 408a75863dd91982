//! Question/answer construction for the understanding and planning tasks.
//!
//! True/false questions draw from the bundled template sets, multiple-choice
//! questions follow the shuffle-and-letter procedure, commands come from the
//! net heading change of a future trajectory, and chain-of-thought records
//! are schema-checked.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::toyworld::{wrap_angle, ActionChunk, Scenario, WorldConfig};

/// About 10 degrees.
pub const DEFAULT_STRAIGHT_THRESHOLD: f64 = 0.175;

pub const MC_PREFIX: &str = "Which of the following describes the current situation? ";
pub const PLANNING_PROMPT: &str = "Plan the future trajectory.";
pub const COT_PROMPT: &str = "Explain the driving decision step by step.";

pub const RELATION_POOL: [&str; 5] = [
    "clear road ahead",
    "obstacle ahead on the left",
    "obstacle ahead on the right",
    "obstacle directly ahead",
    "collision risk ahead",
];

#[derive(Debug, Deserialize)]
pub struct Templates {
    pub small_object: Vec<String>,
    pub accident_pred: Vec<String>,
    pub suffix: String,
}

pub fn templates() -> &'static Templates {
    static TEMPLATES: OnceLock<Templates> = OnceLock::new();
    TEMPLATES.get_or_init(|| {
        serde_json::from_str(include_str!("../resources/templates.json"))
            .expect("bundled templates parse")
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CommandLabel {
    Straight,
    Left,
    Right,
}

impl CommandLabel {
    pub const ALL: [CommandLabel; 3] = [CommandLabel::Straight, CommandLabel::Left, CommandLabel::Right];

    pub fn instruction(self) -> &'static str {
        match self {
            CommandLabel::Straight => "go straight",
            CommandLabel::Left => "turn left",
            CommandLabel::Right => "turn right",
        }
    }

    /// Recognize a free-form instruction by its direction word.
    pub fn parse_instruction(text: &str) -> Option<Self> {
        let t = text.to_ascii_lowercase();
        let has = |w: &str| t.split(|c: char| !c.is_ascii_alphabetic()).any(|x| x == w);
        match (has("left"), has("right"), has("straight")) {
            (true, false, false) => Some(CommandLabel::Left),
            (false, true, false) => Some(CommandLabel::Right),
            (false, false, true) => Some(CommandLabel::Straight),
            _ => None,
        }
    }

    pub fn mirrored(self) -> Self {
        match self {
            CommandLabel::Straight => CommandLabel::Straight,
            CommandLabel::Left => CommandLabel::Right,
            CommandLabel::Right => CommandLabel::Left,
        }
    }
}

impl fmt::Display for CommandLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.instruction())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QACategory {
    SmallObject,
    AccidentPred,
    Relationship,
    Planning,
    Instruction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub answer: String,
    pub category: QACategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_label: Option<String>,
}

impl QAPair {
    pub fn validate(&self) -> Result<()> {
        match (&self.options, &self.correct_label) {
            (None, None) => Ok(()),
            (Some(opts), Some(label)) => {
                if opts.len() != 2 && opts.len() != 4 {
                    return Err(Error::Malformed(format!("{} options", opts.len())));
                }
                match opts.get(label) {
                    Some(a) if *a == self.answer => Ok(()),
                    _ => Err(Error::Malformed(format!("label {label} does not hold the answer"))),
                }
            }
            _ => Err(Error::Malformed("options and correct_label must come together".into())),
        }
    }

    /// Text the understanding expert is trained to emit.
    pub fn target_text(&self) -> String {
        match &self.correct_label {
            Some(l) => format!("{l}. {}", self.answer),
            None => self.answer.clone(),
        }
    }
}

/// Any obstacle smaller than the configured small radius.
pub fn has_small_object(scenario: &Scenario, config: &WorldConfig) -> bool {
    scenario.obstacles.iter().any(|o| o.radius < config.small_radius)
}

/// Any future waypoint within ego radius + obstacle radius of an obstacle.
pub fn future_collides(scenario: &Scenario, config: &WorldConfig) -> bool {
    scenario.ego_future.iter().any(|w| {
        scenario.obstacles.iter().any(|o| {
            (w[0] - o.center[0]).hypot(w[1] - o.center[1]) <= config.ego_radius + o.radius
        })
    })
}

fn bool_text(b: bool) -> String {
    if b { "True" } else { "False" }.to_string()
}

pub fn build_true_false<R: Rng + ?Sized>(
    scenario: &Scenario,
    category: QACategory,
    config: &WorldConfig,
    rng: &mut R,
) -> Result<QAPair> {
    let t = templates();
    let (set, truth) = match category {
        QACategory::SmallObject => (&t.small_object, has_small_object(scenario, config)),
        QACategory::AccidentPred => (&t.accident_pred, future_collides(scenario, config)),
        other => {
            return Err(Error::InvalidArgument(format!(
                "{other:?} has no true/false template set"
            )))
        }
    };
    let template = set.choose(rng).expect("non-empty template set");
    Ok(QAPair {
        question: format!("{template} {}", t.suffix),
        answer: bool_text(truth),
        category,
        options: None,
        correct_label: None,
    })
}

/// Multiple-choice question with 2 or 4 options drawn uniformly.
pub fn build_multiple_choice<R: Rng + ?Sized>(
    correct_answer: &str,
    candidate_pool: &[String],
    rng: &mut R,
) -> Result<QAPair> {
    build_mc(correct_answer, candidate_pool, None, rng)
}

/// As [`build_multiple_choice`] with the option count fixed.
pub fn build_multiple_choice_with_count<R: Rng + ?Sized>(
    correct_answer: &str,
    candidate_pool: &[String],
    option_count: usize,
    rng: &mut R,
) -> Result<QAPair> {
    if option_count != 2 && option_count != 4 {
        return Err(Error::InvalidArgument(format!("option count {option_count}")));
    }
    build_mc(correct_answer, candidate_pool, Some(option_count), rng)
}

fn build_mc<R: Rng + ?Sized>(
    correct_answer: &str,
    candidate_pool: &[String],
    forced: Option<usize>,
    rng: &mut R,
) -> Result<QAPair> {
    if !candidate_pool.iter().any(|c| c == correct_answer) {
        return Err(Error::InvalidArgument("candidate pool lacks the correct answer".into()));
    }
    let distractors: Vec<&String> = candidate_pool.iter().filter(|c| *c != correct_answer).collect();
    if distractors.is_empty() {
        return Err(Error::InvalidArgument("candidate pool has no distractor".into()));
    }
    let option_count = match forced {
        Some(n) => n,
        None => *[2usize, 4].choose(rng).expect("two choices"),
    };
    let needed = option_count - 1;
    let mut selected: Vec<&String> = if distractors.len() >= needed {
        distractors.choose_multiple(rng, needed).copied().collect()
    } else {
        let mut s = distractors.clone();
        for _ in 0..needed - distractors.len() {
            s.push(distractors.choose(rng).expect("non-empty"));
        }
        s
    };
    let mut all: Vec<String> = Vec::with_capacity(option_count);
    all.push(correct_answer.to_string());
    all.extend(selected.drain(..).cloned());
    all.shuffle(rng);

    let letters = ["A", "B", "C", "D"];
    let options: BTreeMap<String, String> = letters
        .iter()
        .zip(&all)
        .map(|(l, o)| (l.to_string(), o.clone()))
        .collect();
    let correct_label = letters
        .iter()
        .zip(&all)
        .find(|(_, o)| *o == correct_answer)
        .map(|(l, _)| l.to_string())
        .expect("correct answer is among the options");
    let listed: Vec<String> = letters
        .iter()
        .zip(&all)
        .map(|(l, o)| format!("{l}. {o}"))
        .collect();
    Ok(QAPair {
        question: format!("{MC_PREFIX}{}", listed.join(", ")),
        answer: correct_answer.to_string(),
        category: QACategory::Relationship,
        options: Some(options),
        correct_label: Some(correct_label),
    })
}

/// Relation phrase describing the nearest obstacle in the ego corridor.
pub fn relation_answer(scenario: &Scenario, config: &WorldConfig) -> &'static str {
    if future_collides(scenario, config) {
        return RELATION_POOL[4];
    }
    let nearest = scenario
        .obstacles_ego()
        .into_iter()
        .filter(|o| o.center[0] > 0.0 && o.center[0] < 40.0 && o.center[1].abs() < 6.0)
        .min_by(|a, b| a.center[0].total_cmp(&b.center[0]));
    match nearest {
        None => RELATION_POOL[0],
        Some(o) if o.center[1].abs() <= 1.5 => RELATION_POOL[3],
        Some(o) if o.center[1] > 0.0 => RELATION_POOL[1],
        Some(_) => RELATION_POOL[2],
    }
}

/// Net heading change between the first and the last displacement segment.
/// A trajectory that does not move is `Straight`; the boundary is inclusive.
pub fn derive_command(future: &ActionChunk, straight_threshold: f64) -> CommandLabel {
    let w = future.waypoints();
    let total: f64 = w
        .windows(2)
        .map(|p| (p[1][0] - p[0][0]).hypot(p[1][1] - p[0][1]))
        .sum();
    if total < 1e-6 {
        return CommandLabel::Straight;
    }
    let seg = |i: usize| [w[i + 1][0] - w[i][0], w[i + 1][1] - w[i][1]];
    let moving = |i: &usize| {
        let s = seg(*i);
        s[0].hypot(s[1]) > 1e-9
    };
    let first = (0..w.len() - 1).find(moving).expect("some segment moves");
    let last = (0..w.len() - 1).rev().find(moving).expect("some segment moves");
    let (a, b) = (seg(first), seg(last));
    let dtheta = wrap_angle(b[1].atan2(b[0]) - a[1].atan2(a[0]));
    if dtheta.abs() <= straight_threshold {
        CommandLabel::Straight
    } else if dtheta > 0.0 {
        CommandLabel::Left
    } else {
        CommandLabel::Right
    }
}

pub fn instruction_prompt(command: CommandLabel) -> String {
    instruction_prompt_text(command.instruction())
}

pub fn instruction_prompt_text(instruction: &str) -> String {
    format!("Instruction: {instruction}. {PLANNING_PROMPT}")
}

/// Waypoints at 1, 2 and 3 s as text, one decimal.
pub fn planning_answer(future: &ActionChunk) -> String {
    let w = future.waypoints();
    [3usize, 7, 11]
        .iter()
        .map(|&i| format!("[{:.1}, {:.1}]", w[i][0], w[i][1]))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionDecision {
    pub action: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoTRecord {
    pub scene_analysis: String,
    pub key_object: String,
    pub intention_inference: String,
    pub action_decision: ActionDecision,
}

impl CoTRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}

fn leaf(obj: &Value, path: &[&str]) -> Result<String> {
    let mut cur = obj;
    for k in path {
        cur = match cur.get(*k) {
            Some(v) => v,
            None => return Err(Error::MissingField(path.join("."))),
        };
    }
    match cur.as_str() {
        Some(s) if !s.trim().is_empty() => Ok(s.to_string()),
        _ => Err(Error::MissingField(path.join("."))),
    }
}

/// Parse and check a chain-of-thought record; unknown keys are ignored.
pub fn validate_cot(raw: &str) -> Result<CoTRecord> {
    let v: Value = serde_json::from_str(raw).map_err(|e| Error::Malformed(e.to_string()))?;
    if !v.is_object() {
        return Err(Error::Malformed("chain-of-thought must be a JSON object".into()));
    }
    Ok(CoTRecord {
        scene_analysis: leaf(&v, &["scene_analysis"])?,
        key_object: leaf(&v, &["key_object"])?,
        intention_inference: leaf(&v, &["intention_inference"])?,
        action_decision: ActionDecision {
            action: leaf(&v, &["action_decision", "action"])?,
            reason: leaf(&v, &["action_decision", "reason"])?,
        },
    })
}

/// Geometry-driven stand-in for an annotator's chain of thought.
pub fn write_cot(scenario: &Scenario, config: &WorldConfig) -> CoTRecord {
    let kappa = scenario.lane_curvature();
    let road = if kappa > 1e-3 {
        "road curves left"
    } else if kappa < -1e-3 {
        "road curves right"
    } else {
        "straight road"
    };
    let n = scenario.obstacles.len();
    let scene = match n {
        0 => format!("{road}, no obstacles"),
        1 => format!("{road}, one obstacle"),
        _ => format!("{road}, {n} obstacles"),
    };
    let relation = relation_answer(scenario, config);
    let intention = if future_collides(scenario, config) {
        "the obstacle blocks the path"
    } else if n == 0 {
        "nothing affects the ego path"
    } else {
        "obstacles stay clear of the path"
    };
    let action = scenario.command.instruction();
    CoTRecord {
        scene_analysis: scene,
        key_object: relation.to_string(),
        intention_inference: intention.to_string(),
        action_decision: ActionDecision {
            action: action.to_string(),
            reason: format!("{relation}, so {action}"),
        },
    }
}

/// Fixed QA set attached to every generated scenario.
pub fn scenario_qa<R: Rng + ?Sized>(
    scenario: &Scenario,
    config: &WorldConfig,
    rng: &mut R,
) -> Result<Vec<QAPair>> {
    let pool: Vec<String> = RELATION_POOL.iter().map(|s| s.to_string()).collect();
    let future = scenario.future_chunk();
    let answer = planning_answer(&future);
    Ok(vec![
        build_true_false(scenario, QACategory::SmallObject, config, rng)?,
        build_true_false(scenario, QACategory::AccidentPred, config, rng)?,
        build_multiple_choice(relation_answer(scenario, config), &pool, rng)?,
        QAPair {
            question: PLANNING_PROMPT.to_string(),
            answer: answer.clone(),
            category: QACategory::Planning,
            options: None,
            correct_label: None,
        },
        QAPair {
            question: instruction_prompt(scenario.command),
            answer,
            category: QACategory::Instruction,
            options: None,
            correct_label: None,
        },
    ])
}

/// Every fixed string the dataset can emit; the vocabulary keywords are
/// drawn from these.
pub fn fixed_phrases() -> Vec<String> {
    let t = templates();
    let mut out: Vec<String> = t.small_object.iter().chain(&t.accident_pred).cloned().collect();
    out.push(t.suffix.clone());
    out.extend(RELATION_POOL.iter().map(|s| s.to_string()));
    out.extend(
        [
            MC_PREFIX,
            PLANNING_PROMPT,
            COT_PROMPT,
            "Instruction",
            "True",
            "False",
            "scene_analysis",
            "key_object",
            "intention_inference",
            "action_decision",
            "action",
            "reason",
            "road curves left",
            "road curves right",
            "straight road",
            "no obstacles",
            "one obstacle",
            "obstacles",
            "the obstacle blocks the path",
            "nothing affects the ego path",
            "obstacles stay clear of the path",
            "so",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    out.extend(CommandLabel::ALL.iter().map(|c| c.instruction().to_string()));
    out
}
