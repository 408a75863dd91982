//! Dataset directories: `scenarios.jsonl`, binary PGM frames, the world
//! config, and a manifest.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::render::{render_frame, Frame};
use super::{EgoState, Obstacle, Point, Scenario, WorldConfig, FUTURE_STEPS, PAST_STEPS, TIMELINE};
use crate::dataqa::{CommandLabel, QAPair};
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::tensor::Matrix;

pub const FORMAT_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    pub config_hash: String,
    pub format_version: String,
    pub frame_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PastRecord {
    pub waypoints: Vec<Point>,
    pub velocities: Vec<Point>,
    pub accelerations: Vec<Point>,
    pub headings: Vec<f64>,
}

/// One line of `scenarios.jsonl`. Coordinates are world-frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub id: String,
    pub seed: u64,
    pub command: CommandLabel,
    pub lane: Vec<Point>,
    pub obstacles: Vec<Obstacle>,
    pub ego_past: PastRecord,
    pub ego_future: Vec<Point>,
    pub frames: Vec<String>,
    pub qa: Vec<QAPair>,
}

fn schema(id: &str, reason: impl Into<String>) -> Error {
    Error::Schema {
        id: id.to_string(),
        reason: reason.into(),
    }
}

fn finite(points: &[Point]) -> bool {
    points.iter().flatten().all(|v| v.is_finite())
}

pub fn frame_path(id: &str, t_index: usize) -> String {
    format!("frames/{id}/t{t_index:02}.pgm")
}

impl ScenarioRecord {
    pub fn from_scenario(s: &Scenario) -> Self {
        Self {
            id: s.id.clone(),
            seed: s.seed,
            command: s.command,
            lane: s.lane.clone(),
            obstacles: s.obstacles.clone(),
            ego_past: PastRecord {
                waypoints: s.ego_past.iter().map(|e| e.position).collect(),
                velocities: s.ego_past.iter().map(|e| e.velocity).collect(),
                accelerations: s.ego_past.iter().map(|e| e.acceleration).collect(),
                headings: s.ego_past.iter().map(|e| e.heading).collect(),
            },
            ego_future: s.ego_future.clone(),
            frames: (0..TIMELINE).map(|t| frame_path(&s.id, t)).collect(),
            qa: s.qa.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.id;
        if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(schema(id, "id must be a plain file name"));
        }
        let p = &self.ego_past;
        if p.waypoints.len() != PAST_STEPS
            || p.velocities.len() != PAST_STEPS
            || p.accelerations.len() != PAST_STEPS
            || p.headings.len() != PAST_STEPS
        {
            return Err(schema(id, "ego_past arrays must hold 16 entries"));
        }
        if self.ego_future.len() != FUTURE_STEPS {
            return Err(schema(id, "ego_future must hold 20 entries"));
        }
        if !(finite(&p.waypoints)
            && finite(&p.velocities)
            && finite(&p.accelerations)
            && finite(&self.ego_future)
            && finite(&self.lane))
        {
            return Err(schema(id, "non-finite coordinate"));
        }
        if p
            .headings
            .iter()
            .any(|h| !(h.is_finite() && *h > -std::f64::consts::PI && *h <= std::f64::consts::PI))
        {
            return Err(schema(id, "heading outside (-pi, pi]"));
        }
        if self
            .obstacles
            .iter()
            .any(|o| !(o.radius > 0.0 && o.radius.is_finite()) || !finite(&[o.center]))
        {
            return Err(schema(id, "obstacle radius must be positive"));
        }
        for q in &self.qa {
            q.validate().map_err(|e| schema(id, e.to_string()))?;
        }
        Ok(())
    }

    pub fn into_scenario(self) -> Result<Scenario> {
        self.validate()?;
        let p = self.ego_past;
        let ego_past = (0..PAST_STEPS)
            .map(|i| EgoState {
                position: p.waypoints[i],
                heading: p.headings[i],
                velocity: p.velocities[i],
                acceleration: p.accelerations[i],
            })
            .collect();
        Ok(Scenario {
            id: self.id,
            seed: self.seed,
            lane: self.lane,
            obstacles: self.obstacles,
            ego_past,
            ego_future: self.ego_future,
            command: self.command,
            qa: self.qa,
        })
    }
}

pub fn write_pgm(path: &Path, frame: &Frame) -> Result<()> {
    let (h, w) = frame.pixels.shape();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(frame.to_bytes());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn pgm_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Read a binary PGM with maxval 255 into intensities in [0, 1].
pub fn read_pgm(path: &Path) -> Result<Matrix> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Malformed(format!("{}: {why}", path.display()));
    let mut pos = 0;
    if pgm_token(&bytes, &mut pos).as_deref() != Some("P5") {
        return Err(bad("not a binary PGM"));
    }
    let mut num = || -> Result<usize> {
        pgm_token(&bytes, &mut pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("bad header"))
    };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    pos += 1;
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated pixel data"))?;
    Matrix::from_vec(h, w, data.iter().map(|&b| b as f64 / 255.0).collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Write a dataset directory. Every scenario is validated before anything is
/// written.
pub fn export_dataset(
    scenarios: &[Scenario],
    config: &WorldConfig,
    dir: &Path,
    mode: Exec,
) -> Result<DatasetManifest> {
    config.validate()?;
    let records: Vec<ScenarioRecord> = scenarios.iter().map(ScenarioRecord::from_scenario).collect();
    for r in &records {
        r.validate()?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let jsonl = dir.join("scenarios.jsonl");
    let file = File::create(&jsonl).map_err(|e| Error::io(&jsonl, e))?;
    let mut out = BufWriter::new(file);
    for r in &records {
        let line = serde_json::to_string(r)?;
        writeln!(out, "{line}").map_err(|e| Error::io(&jsonl, e))?;
    }
    out.flush().map_err(|e| Error::io(&jsonl, e))?;

    let written: Vec<Result<usize>> = exec::map(mode, scenarios, |s| {
        let sub = dir.join("frames").join(&s.id);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for t in 0..TIMELINE {
            let frame = render_frame(s, t, config)?;
            write_pgm(&dir.join(frame_path(&s.id, t)), &frame)?;
        }
        Ok(TIMELINE)
    });
    let mut frame_count = 0;
    for w in written {
        frame_count += w?;
    }

    write_json(&dir.join("config.json"), config)?;
    let manifest = DatasetManifest {
        count: scenarios.len(),
        config_hash: config.hash(),
        format_version: FORMAT_VERSION.to_string(),
        frame_count,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub config: WorldConfig,
    pub scenarios: Vec<Scenario>,
}

impl LoadedDataset {
    pub fn find(&self, id: &str) -> Option<&Scenario> {
        self.scenarios.iter().find(|s| s.id == id)
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn import_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!(
            "dataset format {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let config: WorldConfig = read_json(&dir.join("config.json"))?;
    if config.hash() != manifest.config_hash {
        return Err(Error::Incompatible("dataset config does not match its manifest hash".into()));
    }
    let jsonl = dir.join("scenarios.jsonl");
    let file = File::open(&jsonl).map_err(|e| Error::io(&jsonl, e))?;
    let mut scenarios = Vec::with_capacity(manifest.count);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&jsonl, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScenarioRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Malformed(format!("scenarios.jsonl line {}: {e}", i + 1)))?;
        scenarios.push(rec.into_scenario()?);
    }
    if scenarios.len() != manifest.count {
        return Err(Error::Malformed(format!(
            "manifest lists {} scenarios, file holds {}",
            manifest.count,
            scenarios.len()
        )));
    }
    Ok(LoadedDataset {
        dir: dir.to_path_buf(),
        manifest,
        config,
        scenarios,
    })
}
