//! Scripted runs: a JSON timeline of publishes, commands, faults, snapshots
//! and assertions, producing a deterministic report.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use tilewall::geometry::{TileId, WallConfig};
use tilewall::protocol::{CommandOp, Role};
use tilewall::raster::{Pattern, Raster};
use tilewall::source::{FrameProvider, DEFAULT_LATENCY_BUDGET_US};

use crate::net::NetModel;
use crate::stitch::{stitch, tile_file_name, StitchMode};
use crate::world::{CommandResult, DisplayReport, Sim, SimConfig, SourceReport, MS};
use crate::SimError;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

fn reference_wall() -> WallConfig {
    WallConfig::reference_wall()
}
fn default_slots() -> usize {
    12
}
fn streamer() -> Role {
    Role::Streamer
}
fn sixty() -> u32 {
    60
}
fn default_latency_ms() -> u64 {
    DEFAULT_LATENCY_BUDGET_US / 1000
}

#[derive(Debug, Clone, Deserialize)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "reference_wall")]
    pub wall: WallConfig,
    #[serde(default)]
    pub net: NetModel,
    #[serde(default = "default_slots")]
    pub max_projections: usize,
    /// Extra simulated time after the last step.
    #[serde(default)]
    pub tail_ms: u64,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Step {
    /// Simulated milliseconds from start.
    pub at: u64,
    #[serde(default)]
    pub id: Option<String>,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Publish {
        #[serde(default = "streamer")]
        role: Role,
        pattern: String,
        width: u32,
        height: u32,
        #[serde(default = "sixty")]
        fps: u32,
        #[serde(default)]
        frames: Option<u64>,
        #[serde(default = "default_latency_ms")]
        latency_ms: u64,
        #[serde(default)]
        thumbnail: bool,
    },
    Unpublish {
        source: String,
    },
    /// A control command; strings of the form `"$step"` are replaced by the
    /// id created by that earlier step.
    Command {
        op: Value,
    },
    Netfault {
        net: NetModel,
    },
    KillDisplay {
        tile: TileId,
    },
    RestartDisplay {
        tile: TileId,
    },
    KillSource {
        source: String,
    },
    Snapshot,
    Assert {
        #[serde(flatten)]
        check: Check,
    },
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum Check {
    /// Every live display holds the control service's revision.
    Converged,
    /// No display ever presented an older frame after a newer one.
    Monotonic,
    MaxSkew { frames: u64 },
    /// Every command so far has exactly one ACK or NACK.
    ResponsesMatchCommands,
    SlotsUsed { n: usize },
    CommandResult { command: String, code: String },
    SourceRefused { source: String, code: String },
    /// A snapshot equals a full-wall pattern shown at a quarter-turn.
    StitchMatchesPattern {
        snapshot: String,
        pattern: String,
        #[serde(default)]
        rotation_deg: f64,
    },
    TileOnline { tile: TileId, online: bool },
    ContentOnline { source: String, online: bool },
    /// FRAME wire bytes at each display stay within the subscribed pixel
    /// bytes plus this much overhead.
    FrameBudget { overhead_pct: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssertionResult {
    pub step: String,
    pub at_ms: u64,
    pub check: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommandReport {
    pub command_id: u64,
    pub result: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub content_id: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub placement_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub end_ms: u64,
    pub revision: u64,
    pub commands: u64,
    pub acks: u64,
    pub nacks: u64,
    pub displays: BTreeMap<String, DisplayReport>,
    pub sources: BTreeMap<String, SourceReport>,
    pub skew: BTreeMap<String, u64>,
    pub max_skew: u64,
    pub skew_samples: u64,
    pub net: crate::world::NetStats,
    pub command_results: BTreeMap<String, CommandReport>,
    pub snapshots: BTreeMap<String, BTreeMap<String, String>>,
    pub assertions: Vec<AssertionResult>,
    pub passed: bool,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// First failing assertion, if any.
    pub fn first_failure(&self) -> Option<&AssertionResult> {
        self.assertions.iter().find(|a| !a.ok)
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| SimError::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Times never decrease and every reference names an earlier step.
    pub fn validate(&self) -> Result<(), SimError> {
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(SimError::Scenario(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        self.net.validate()?;
        let mut defined = BTreeSet::new();
        let mut last = 0;
        for (n, step) in self.steps.iter().enumerate() {
            let label = step.id.clone().unwrap_or_else(|| format!("#{n}"));
            if step.at < last {
                return Err(SimError::Scenario(format!("step {label}: time goes backwards")));
            }
            last = step.at;
            let mut refs = Vec::new();
            match &step.action {
                Action::Unpublish { source } | Action::KillSource { source } => refs.push(source.clone()),
                Action::Command { op } => collect_refs(op, &mut refs),
                Action::Assert { check } => match check {
                    Check::CommandResult { command, .. } => refs.push(command.clone()),
                    Check::SourceRefused { source, .. } | Check::ContentOnline { source, .. } => refs.push(source.clone()),
                    Check::StitchMatchesPattern { snapshot, .. } => refs.push(snapshot.clone()),
                    _ => {}
                },
                Action::Snapshot if step.id.is_none() => {
                    return Err(SimError::Scenario(format!("step {label}: snapshot needs an id")));
                }
                _ => {}
            }
            if let Some(r) = refs.iter().find(|r| !defined.contains(*r)) {
                return Err(SimError::Scenario(format!("step {label}: {r:?} is not defined by an earlier step")));
            }
            if let Some(id) = &step.id {
                if !defined.insert(id.clone()) {
                    return Err(SimError::Scenario(format!("duplicate step id {id:?}")));
                }
            }
        }
        Ok(())
    }
}

fn collect_refs(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::String(s) => {
            if let Some(r) = s.strip_prefix('$') {
                out.push(r.to_string());
            }
        }
        Value::Array(a) => a.iter().for_each(|x| collect_refs(x, out)),
        Value::Object(o) => o.values().for_each(|x| collect_refs(x, out)),
        _ => {}
    }
}

fn substitute(v: &Value, ids: &BTreeMap<String, u64>) -> Result<Value, SimError> {
    Ok(match v {
        Value::String(s) => match s.strip_prefix('$') {
            Some(r) => Value::from(
                *ids.get(r)
                    .ok_or_else(|| SimError::Scenario(format!("{r:?} has no id yet (was it refused?)")))?,
            ),
            None => v.clone(),
        },
        Value::Array(a) => Value::Array(a.iter().map(|x| substitute(x, ids)).collect::<Result<_, _>>()?),
        Value::Object(o) => Value::Object(
            o.iter()
                .map(|(k, x)| Ok((k.clone(), substitute(x, ids)?)))
                .collect::<Result<_, SimError>>()?,
        ),
        _ => v.clone(),
    })
}

/// Full-wall oracle for `pattern` shown at a quarter-turn: the pattern is
/// drawn at its natural size (wall size, transposed for 90° and 270°) and
/// centred on the wall.
pub fn quarter_turn_oracle(pattern: Pattern, wall_w: u32, wall_h: u32, rotation_deg: f64) -> Result<Raster, SimError> {
    let r = rotation_deg.rem_euclid(360.0);
    let (sw, sh) = if r == 90.0 || r == 270.0 { (wall_h, wall_w) } else { (wall_w, wall_h) };
    let src = pattern.render(sw, sh, 0);
    let (w, h) = (wall_w, wall_h);
    Ok(match r as u32 {
        0 => src,
        90 => Raster::from_fn(w, h, |x, y| src.get(sw - 1 - y, x)),
        180 => Raster::from_fn(w, h, |x, y| src.get(w - 1 - x, h - 1 - y)),
        270 => Raster::from_fn(w, h, |x, y| src.get(y, sh - 1 - x)),
        _ => return Err(SimError::Scenario(format!("{rotation_deg}° is not a quarter turn"))),
    })
}

struct Runner<'a> {
    scenario: &'a Scenario,
    sim: Sim,
    ids: BTreeMap<String, u64>,
    sources: BTreeMap<String, usize>,
    commands: BTreeMap<String, u64>,
    snapshots: BTreeMap<String, BTreeMap<TileId, Raster>>,
    assertions: Vec<AssertionResult>,
    out: Option<&'a Path>,
}

/// Runs a scenario. With `out`, snapshots are written there as PPM files
/// along with `report.json`.
pub fn run(scenario: &Scenario, seed: Option<u64>, out: Option<&Path>) -> Result<Report, SimError> {
    scenario.validate()?;
    let seed = seed.unwrap_or(scenario.seed);
    let config = SimConfig {
        wall: scenario.wall.clone(),
        net: scenario.net,
        seed,
        max_projections: scenario.max_projections,
        ..SimConfig::default()
    };
    let mut r = Runner {
        scenario,
        sim: Sim::new(config)?,
        ids: BTreeMap::new(),
        sources: BTreeMap::new(),
        commands: BTreeMap::new(),
        snapshots: BTreeMap::new(),
        assertions: Vec::new(),
        out,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| SimError::Io(e.to_string()))?;
    }
    for (n, step) in scenario.steps.iter().enumerate() {
        r.sim.run_until(step.at * MS);
        r.learn_ids();
        let label = step.id.clone().unwrap_or_else(|| format!("#{n}"));
        r.step(&label, step)?;
    }
    let end = scenario.steps.last().map_or(0, |s| s.at) + scenario.tail_ms;
    r.sim.run_until(end * MS);
    r.learn_ids();
    let report = r.report(seed, end);
    if let Some(dir) = out {
        fs::write(dir.join("report.json"), report.to_json()).map_err(|e| SimError::Io(e.to_string()))?;
    }
    Ok(report)
}

impl Runner<'_> {
    /// Picks up ids assigned since the last step.
    fn learn_ids(&mut self) {
        for (name, i) in &self.sources {
            if let Some(c) = self.sim.source_content(*i) {
                self.ids.insert(name.clone(), c.0);
            }
        }
        for (name, cmd) in &self.commands {
            if let Some(CommandResult::Ack(a)) = self.sim.command_result(*cmd) {
                if let Some(p) = a.placement_id {
                    self.ids.insert(name.clone(), p.0);
                } else if let Some(c) = a.content_id {
                    self.ids.insert(name.clone(), c.0);
                }
            }
        }
    }

    fn step(&mut self, label: &str, step: &Step) -> Result<(), SimError> {
        match &step.action {
            Action::Publish {
                role,
                pattern,
                width,
                height,
                fps,
                frames,
                latency_ms,
                thumbnail,
            } => {
                let pattern: Pattern = pattern.parse().map_err(|e: tilewall::raster::RasterError| SimError::Scenario(e.to_string()))?;
                let provider = match role {
                    Role::Sender => FrameProvider::still(pattern.render(*width, *height, 0)),
                    _ => FrameProvider::pattern(pattern, *width, *height).map_err(|e| SimError::Scenario(e.to_string()))?,
                };
                let provider = match frames {
                    Some(n) => provider.with_limit(*n),
                    None => provider,
                };
                let i = self.sim.publish(crate::world::PublishSpec {
                    name: label.to_string(),
                    role: *role,
                    provider,
                    fps: *fps,
                    latency_budget_us: latency_ms * 1000,
                    thumbnail: *thumbnail,
                })?;
                self.sources.insert(label.to_string(), i);
            }
            Action::Unpublish { source } => self.sim.unpublish(self.sources[source]),
            Action::KillSource { source } => self.sim.kill_source(self.sources[source]),
            Action::Command { op } => {
                let op: CommandOp = serde_json::from_value(substitute(op, &self.ids)?)
                    .map_err(|e| SimError::Scenario(format!("step {label}: {e}")))?;
                let id = self.sim.command(op);
                self.commands.insert(label.to_string(), id);
            }
            Action::Netfault { net } => self.sim.set_net(*net)?,
            Action::KillDisplay { tile } => self.sim.kill_display(*tile),
            Action::RestartDisplay { tile } => self.sim.restart_display(*tile),
            Action::Snapshot => {
                let tiles = self.sim.framebuffers();
                if let Some(dir) = self.out {
                    let sub = dir.join(label);
                    fs::create_dir_all(&sub).map_err(|e| SimError::Io(e.to_string()))?;
                    fs::write(sub.join("wall.json"), self.sim.grid().config().to_json()).map_err(|e| SimError::Io(e.to_string()))?;
                    for (t, r) in &tiles {
                        fs::write(sub.join(tile_file_name(*t)), r.to_ppm()).map_err(|e| SimError::Io(e.to_string()))?;
                    }
                }
                self.snapshots.insert(label.to_string(), tiles);
            }
            Action::Assert { check } => {
                let (ok, detail) = self.check(check);
                self.assertions.push(AssertionResult {
                    step: label.to_string(),
                    at_ms: step.at,
                    check: serde_json::to_value(check)
                        .ok()
                        .and_then(|v| v.get("check").and_then(Value::as_str).map(str::to_string))
                        .unwrap_or_default(),
                    ok,
                    detail,
                });
            }
        }
        Ok(())
    }

    fn check(&mut self, check: &Check) -> (bool, String) {
        let tiles: Vec<TileId> = self.sim.grid().tiles().collect();
        match check {
            Check::Converged => {
                let want = self.sim.control().scene().revision();
                let behind: Vec<String> = tiles
                    .iter()
                    .filter(|t| self.sim.display_online(**t) && self.sim.display(**t).revision() != want)
                    .map(|t| format!("{t}@{}", self.sim.display(*t).revision()))
                    .collect();
                (behind.is_empty(), format!("revision {want}; behind: {behind:?}"))
            }
            Check::Monotonic => {
                let bad: u64 = tiles.iter().map(|t| self.sim.monotonic_violations(*t)).sum();
                (bad == 0, format!("{bad} violations"))
            }
            Check::MaxSkew { frames } => {
                let s = self.sim.max_skew();
                (s <= *frames, format!("max skew {s} over {} samples", self.sim.skew_samples()))
            }
            Check::ResponsesMatchCommands => {
                let (a, n) = self.sim.responses();
                let sent = self.sim.commands_sent();
                (a + n == sent, format!("{sent} commands, {a} ACK, {n} NACK"))
            }
            Check::SlotsUsed { n } => {
                let used = self.sim.control().registry().slots_used();
                (used == *n, format!("{used} slots used"))
            }
            Check::CommandResult { command, code } => match self.sim.command_result(self.commands[command]) {
                Some(r) => (r.code() == code, format!("got {}", r.code())),
                None => (false, "no response yet".into()),
            },
            Check::SourceRefused { source, code } => {
                let got = self.sim.source_refusal(self.sources[source]);
                (got == Some(code.as_str()), format!("got {got:?}"))
            }
            Check::StitchMatchesPattern {
                snapshot,
                pattern,
                rotation_deg,
            } => {
                let Ok(pattern) = pattern.parse::<Pattern>() else {
                    return (false, format!("unknown pattern {pattern:?}"));
                };
                let composite = match stitch(self.sim.grid(), &self.snapshots[snapshot], StitchMode::Contiguous) {
                    Ok(c) => c,
                    Err(e) => return (false, e.to_string()),
                };
                match quarter_turn_oracle(pattern, composite.width(), composite.height(), *rotation_deg) {
                    Ok(oracle) => {
                        let diff = composite
                            .data()
                            .chunks(3)
                            .zip(oracle.data().chunks(3))
                            .filter(|(a, b)| a != b)
                            .count();
                        (diff == 0, format!("{diff} pixels differ"))
                    }
                    Err(e) => (false, e.to_string()),
                }
            }
            Check::TileOnline { tile, online } => {
                let got = self
                    .sim
                    .control()
                    .registry()
                    .displays
                    .get(tile)
                    .is_some_and(|d| d.online);
                (got == *online, format!("online={got}"))
            }
            Check::ContentOnline { source, online } => {
                let got = self
                    .ids
                    .get(source)
                    .and_then(|id| self.sim.control().scene().content(tilewall::scene::ContentId(*id)))
                    .map(|c| c.online);
                (got == Some(*online), format!("online={got:?}"))
            }
            Check::FrameBudget { overhead_pct } => {
                let mut worst = String::new();
                let mut ok = true;
                for t in &tiles {
                    let r = self.sim.display_report(*t);
                    let allowed = r.subscribed_bytes as f64 * (1.0 + overhead_pct / 100.0);
                    if r.frame_wire_bytes as f64 > allowed || r.unsubscribed_bytes > 0 {
                        ok = false;
                        worst = format!("{t}: {} wire bytes vs {} subscribed", r.frame_wire_bytes, r.subscribed_bytes);
                    }
                }
                (ok, worst)
            }
        }
    }

    fn report(&mut self, seed: u64, end_ms: u64) -> Report {
        let (acks, nacks) = self.sim.responses();
        let tiles: Vec<TileId> = self.sim.grid().tiles().collect();
        let displays = tiles.iter().map(|t| (t.to_string(), self.sim.display_report(*t))).collect();
        let sources = self
            .sources
            .iter()
            .map(|(name, i)| (name.clone(), self.sim.source_report(*i)))
            .collect();
        let command_results = self
            .commands
            .iter()
            .map(|(name, id)| {
                let (result, content_id, placement_id) = match self.sim.command_result(*id) {
                    Some(CommandResult::Ack(a)) => ("ACK".to_string(), a.content_id.map(|c| c.0), a.placement_id.map(|p| p.0)),
                    Some(CommandResult::Nack(n)) => (n.code.clone(), None, None),
                    None => ("PENDING".to_string(), None, None),
                };
                (
                    name.clone(),
                    CommandReport {
                        command_id: *id,
                        result,
                        content_id,
                        placement_id,
                    },
                )
            })
            .collect();
        let snapshots = self
            .snapshots
            .iter()
            .map(|(name, tiles)| {
                let digests = tiles
                    .iter()
                    .map(|(t, r)| (t.to_string(), format!("{:016x}", r.digest())))
                    .collect();
                (name.clone(), digests)
            })
            .collect();
        let passed = self.assertions.iter().all(|a| a.ok);
        Report {
            scenario: self.scenario.name.clone(),
            seed,
            end_ms,
            revision: self.sim.control().scene().revision(),
            commands: self.sim.commands_sent(),
            acks,
            nacks,
            displays,
            sources,
            skew: self.sim.skew().iter().map(|(c, s)| (c.to_string(), *s)).collect(),
            max_skew: self.sim.max_skew(),
            skew_samples: self.sim.skew_samples(),
            net: self.sim.net_stats().clone(),
            command_results,
            snapshots,
            assertions: std::mem::take(&mut self.assertions),
            passed,
        }
    }
}

/// Stitches the tile PPMs written for one snapshot step.
pub fn stitch_dir(dir: &Path, mode: StitchMode) -> Result<Raster, SimError> {
    let wall = fs::read_to_string(dir.join("wall.json")).map_err(|e| SimError::Io(format!("wall.json: {e}")))?;
    let grid = tilewall::geometry::build_wall(&WallConfig::from_json(&wall)?)?;
    let mut tiles = BTreeMap::new();
    for t in grid.tiles() {
        let path = dir.join(tile_file_name(t));
        if let Ok(bytes) = fs::read(&path) {
            let r = Raster::from_ppm(&bytes).map_err(|e| SimError::Stitch(format!("{}: {e}", path.display())))?;
            tiles.insert(t, r);
        }
    }
    stitch(&grid, &tiles, mode)
}
