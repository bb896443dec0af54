//! Session engine: configuration, pointer mapping, the haptic tick and
//! deterministic replay of recorded pointer traces.
//!
//! The live three-loop service is built on top of [`Session`] by the server
//! crate; everything here is synchronous and clock-free.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conditioning::{classify_posture, fivebar_indices, FiveBarIndices};
use crate::error::{Error, Result};
use crate::fivebar::{boundary_proximity, inverse_kinematics, PostureState, WorkingMode};
use crate::forcefield::{
    boundary_force, compose_force, conditioning_force, inv_kappa_gradient, joint_limit_cartesian,
    ConditioningLaw, EnvelopeMode, ForceCommand, ForceEnvelope, ViscosityLaw,
};
use crate::model::{load_model, FiveBarModel, Vec2, SCHEMA_VERSION};
use crate::protocol::{ClientMessage, ParamsPatch, PointerSample, ServerMessage, StateSnapshot};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sensitivity {
    Rough,
    #[default]
    Medium,
    Fine,
    Screen,
}

impl std::str::FromStr for Sensitivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rough" => Ok(Sensitivity::Rough),
            "medium" => Ok(Sensitivity::Medium),
            "fine" => Ok(Sensitivity::Fine),
            "screen" => Ok(Sensitivity::Screen),
            _ => Err(Error::InvalidArgument(format!("unknown sensitivity `{s}`"))),
        }
    }
}

/// Workspace units per device unit for each sensitivity level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityScales {
    pub rough: f64,
    pub medium: f64,
    pub fine: f64,
    /// Multiplied by the view zoom.
    pub screen: f64,
}

impl Default for SensitivityScales {
    fn default() -> Self {
        SensitivityScales {
            rough: 2.0,
            medium: 1.0,
            fine: 0.5,
            screen: 1.0,
        }
    }
}

impl SensitivityScales {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rough", self.rough),
            ("medium", self.medium),
            ("fine", self.fine),
            ("screen", self.screen),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "sensitivity scale `{name}` must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Maps a device displacement to workspace units.
pub fn sensitivity_map(
    raw: Vec2,
    sensitivity: Sensitivity,
    view_zoom: f64,
    scales: &SensitivityScales,
) -> Result<Vec2> {
    let k = match sensitivity {
        Sensitivity::Rough => scales.rough,
        Sensitivity::Medium => scales.medium,
        Sensitivity::Fine => scales.fine,
        Sensitivity::Screen => {
            if !(view_zoom > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "view zoom must be positive in screen mode, got {view_zoom}"
                )));
            }
            scales.screen * view_zoom
        }
    };
    Ok(raw * k)
}

/// Loop frequencies, Hz.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopRates {
    pub haptic_hz: f64,
    pub analysis_hz: f64,
    pub broadcast_hz: f64,
}

impl Default for LoopRates {
    fn default() -> Self {
        LoopRates {
            haptic_hz: 1000.0,
            analysis_hz: 100.0,
            broadcast_hz: 60.0,
        }
    }
}

impl LoopRates {
    pub fn validate(&self) -> Result<()> {
        let ok = self.broadcast_hz > 0.0
            && self.analysis_hz >= self.broadcast_hz
            && self.haptic_hz >= self.analysis_hz
            && self.haptic_hz.is_finite();
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "loop rates need haptic ({}) >= analysis ({}) >= broadcast ({}) > 0",
                self.haptic_hz, self.analysis_hz, self.broadcast_hz
            )));
        }
        Ok(())
    }

    /// Haptic period in whole nanoseconds.
    pub fn haptic_period_ns(&self) -> u64 {
        (1e9 / self.haptic_hz).round() as u64
    }
}

/// Parameters a driver may change while the session runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionParams {
    pub mode: WorkingMode,
    pub sensitivity: Sensitivity,
    pub view_zoom: f64,
    pub scales: SensitivityScales,
    pub envelope_mode: EnvelopeMode,
    pub envelope: ForceEnvelope,
    pub conditioning: ConditioningLaw,
    pub viscosity: ViscosityLaw,
    /// Peak of the joint-limit ramps, N.
    pub joint_f_max: f64,
    /// Width of the boundary ramp, workspace units.
    pub boundary_threshold: f64,
    pub boundary_f_max: f64,
    /// Tolerance of the posture classification.
    pub class_tol: f64,
}

impl SessionParams {
    pub fn new(mode: WorkingMode) -> Self {
        SessionParams {
            mode,
            sensitivity: Sensitivity::Medium,
            view_zoom: 1.0,
            scales: SensitivityScales::default(),
            envelope_mode: EnvelopeMode::Peak,
            envelope: ForceEnvelope::default(),
            conditioning: ConditioningLaw::default(),
            viscosity: ViscosityLaw::default(),
            joint_f_max: 6.4,
            boundary_threshold: 0.5,
            boundary_f_max: 6.4,
            class_tol: 1e-2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scales.validate()?;
        self.envelope.validate()?;
        self.conditioning.validate()?;
        if !(self.view_zoom > 0.0 && self.view_zoom.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "view_zoom must be positive, got {}",
                self.view_zoom
            )));
        }
        if !(self.viscosity.c_max >= 0.0 && self.viscosity.c_max.is_finite()) {
            return Err(Error::InvalidArgument("viscosity c_max must be >= 0".into()));
        }
        for (name, v) in [
            ("joint_f_max", self.joint_f_max),
            ("boundary_threshold", self.boundary_threshold),
            ("boundary_f_max", self.boundary_f_max),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.class_tol > 0.0 && self.class_tol < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "class_tol must be in (0, 0.5), got {}",
                self.class_tol
            )));
        }
        Ok(())
    }

    /// Patched copy, validated.
    pub fn patched(&self, patch: &ParamsPatch) -> Result<Self> {
        let mut p = self.clone();
        macro_rules! take {
            ($($f:ident),*) => { $(if let Some(v) = patch.$f.clone() { p.$f = v; })* };
        }
        take!(
            mode,
            sensitivity,
            view_zoom,
            envelope_mode,
            envelope,
            conditioning,
            viscosity,
            joint_f_max,
            boundary_threshold,
            boundary_f_max,
            class_tol
        );
        p.validate()?;
        Ok(p)
    }

    fn map(&self, raw: Vec2) -> Result<Vec2> {
        sensitivity_map(raw, self.sensitivity, self.view_zoom, &self.scales)
    }
}

/// A validated session configuration with its model loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionConfig {
    pub model: FiveBarModel,
    pub model_path: PathBuf,
    pub rates: LoopRates,
    /// Workspace position of the pointer origin.
    pub start: Vec2,
    pub params: SessionParams,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    schema: i64,
    model: PathBuf,
    #[serde(default)]
    mode: Option<String>,
    #[serde(default)]
    sensitivity: Sensitivity,
    #[serde(default)]
    view_zoom: Option<f64>,
    #[serde(default)]
    start: Option<[f64; 2]>,
    #[serde(default)]
    rates: LoopRates,
    #[serde(default)]
    sensitivity_scales: SensitivityScales,
    #[serde(default)]
    envelope: ForceEnvelope,
    #[serde(default)]
    forces: ForcesSection,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ForcesSection {
    envelope_mode: EnvelopeMode,
    joint_f_max: f64,
    boundary_threshold: f64,
    boundary_f_max: f64,
    class_tol: f64,
    conditioning: ConditioningLaw,
    viscosity: ViscosityLaw,
}

impl Default for ForcesSection {
    fn default() -> Self {
        let p = SessionParams::new(WorkingMode::ALL[0]);
        ForcesSection {
            envelope_mode: p.envelope_mode,
            joint_f_max: p.joint_f_max,
            boundary_threshold: p.boundary_threshold,
            boundary_f_max: p.boundary_f_max,
            class_tol: p.class_tol,
            conditioning: p.conditioning,
            viscosity: p.viscosity,
        }
    }
}

/// A point on the bases' midline where both legs are at right angles, or
/// `None` when the links are too short to reach it.
pub fn default_start(model: &FiveBarModel) -> Option<Vec2> {
    let half = model.l0 / 2.0;
    let h2 = model.l1 * model.l1 + model.l2 * model.l2 - half * half;
    (h2 > 0.0).then(|| (model.base_a + model.base_b) / 2.0 + Vec2::new(0.0, h2.sqrt()))
}

impl SessionConfig {
    pub fn new(model: FiveBarModel, model_path: PathBuf, params: SessionParams) -> Result<Self> {
        let start = default_start(&model).ok_or_else(|| {
            Error::InvalidArgument("model has no default start point; set `start`".into())
        })?;
        let cfg = SessionConfig {
            model,
            model_path,
            rates: LoopRates::default(),
            start,
            params,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.rates.validate()?;
        self.params.validate()?;
        if inverse_kinematics(&self.model, self.start, self.params.mode).is_none() {
            return Err(Error::InvalidArgument(format!(
                "start point ({}, {}) is outside the workspace",
                self.start.x, self.start.y
            )));
        }
        Ok(())
    }
}

/// Parses a session configuration; a relative `model` path is resolved
/// against the configuration file's directory.
pub fn parse_session_config(text: &str, origin: &Path) -> Result<SessionConfig> {
    let parse_err = |reason: String| Error::Parse {
        path: origin.to_path_buf(),
        reason,
    };
    let value: toml::Table = text.parse().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
    match value.get("schema").and_then(toml::Value::as_integer) {
        Some(SCHEMA_VERSION) => {}
        Some(v) => return Err(Error::Schema(v)),
        None => return Err(parse_err("missing integer `schema`".into())),
    }
    let file: ConfigFile = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    debug_assert_eq!(file.schema, SCHEMA_VERSION);
    let model_path = match origin.parent() {
        Some(dir) if file.model.is_relative() => dir.join(&file.model),
        _ => file.model.clone(),
    };
    let model = load_model(&model_path)?.into_five_bar()?;
    let mode = match file.mode {
        Some(m) => m.parse()?,
        None => WorkingMode::ALL[0],
    };
    let mut params = SessionParams::new(mode);
    params.sensitivity = file.sensitivity;
    params.view_zoom = file.view_zoom.unwrap_or(1.0);
    params.scales = file.sensitivity_scales;
    params.envelope = file.envelope;
    params.envelope_mode = file.forces.envelope_mode;
    params.joint_f_max = file.forces.joint_f_max;
    params.boundary_threshold = file.forces.boundary_threshold;
    params.boundary_f_max = file.forces.boundary_f_max;
    params.class_tol = file.forces.class_tol;
    params.conditioning = file.forces.conditioning;
    params.viscosity = file.forces.viscosity;
    let start = match file.start {
        Some([x, y]) => Vec2::new(x, y),
        None => default_start(&model).ok_or_else(|| {
            parse_err("model has no default start point; set `start`".into())
        })?,
    };
    let cfg = SessionConfig {
        model,
        model_path,
        rates: file.rates,
        start,
        params,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_session_config(path: impl AsRef<Path>) -> Result<SessionConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_session_config(&text, path)
}

/// What the haptic loop carries from one tick to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct HapticState {
    /// Index of the next tick.
    pub tick: u64,
    pub last_valid: PostureState,
    /// Target position of the previous tick.
    pub prev_target: Vec2,
    /// Workspace position that maps to device origin.
    pub anchor: Vec2,
}

impl HapticState {
    pub fn new(config: &SessionConfig) -> Result<Self> {
        let posture = inverse_kinematics(&config.model, config.start, config.params.mode)
            .ok_or_else(|| Error::InvalidArgument("start point is outside the workspace".into()))?;
        Ok(HapticState {
            tick: 0,
            last_valid: posture,
            prev_target: config.start,
            anchor: config.start,
        })
    }

    fn target(&self, pointer: Option<&PointerSample>, params: &SessionParams) -> Vec2 {
        match pointer {
            // Validated parameters make the mapping infallible.
            Some(p) => self.anchor + params.map(p.position()).unwrap_or_else(|_| Vec2::zeros()),
            None => self.prev_target,
        }
    }
}

/// Direction of the conditioning force: up the gradient of
/// `min(1/kappa_A, 1/kappa_B)`, or against the motion when the gradient
/// vanishes.
fn conditioning_direction(model: &FiveBarModel, p: Vec2, mode: WorkingMode, velocity: Vec2) -> Vec2 {
    let g = inv_kappa_gradient(model, p, mode, 1e-6 * model.l1);
    let n = g.norm();
    if n > 1e-9 && n.is_finite() {
        return g / n;
    }
    let v = velocity.norm();
    if v > 0.0 && v.is_finite() {
        -velocity / v
    } else {
        Vec2::zeros()
    }
}

/// One haptic step: map the latest pointer sample to a target, solve IK in
/// the session's mode, evaluate every force law and compose the command.
/// When the target is unreachable the last valid posture is kept and only
/// the boundary pull-back acts.
pub fn haptic_tick(
    pointer: Option<&PointerSample>,
    prev: &HapticState,
    config: &SessionConfig,
    t: u64,
) -> (StateSnapshot, HapticState) {
    let model = &config.model;
    let params = &config.params;
    let mode = params.mode;
    let target = prev.target(pointer, params);
    let velocity = (target - prev.prev_target) * config.rates.haptic_hz;

    let solved = inverse_kinematics(model, target, mode);
    let posture = solved.as_ref().unwrap_or(&prev.last_valid);
    let indices: FiveBarIndices = fivebar_indices(posture, model);
    let boundary = boundary_force(model, target, params.boundary_threshold, params.boundary_f_max)
        .unwrap_or_else(|_| Vec2::zeros());

    let zero = Vec2::zeros();
    let command: ForceCommand = match &solved {
        Some(s) => {
            let inv = indices.inv_kappa_min().clamp(0.0, 1.0);
            let law = &params.conditioning;
            let magnitude = conditioning_force(inv, law.s_full, law.s_zero, law.f_max).unwrap_or(0.0);
            let conditioning = if magnitude > 0.0 {
                conditioning_direction(model, target, mode, velocity) * magnitude
            } else {
                zero
            };
            compose_force(
                joint_limit_cartesian(model, s, mode, params.joint_f_max),
                boundary,
                conditioning,
                params.envelope_mode,
                &params.envelope,
                velocity,
                params.viscosity.coefficient(inv, law),
            )
        }
        None => compose_force(zero, boundary, zero, params.envelope_mode, &params.envelope, zero, 0.0),
    };

    let class = classify_posture(&indices, params.class_tol)
        .map(|c| c.label())
        .unwrap_or_else(|_| "regular".into());
    let snapshot = StateSnapshot {
        tick: prev.tick,
        t,
        mode,
        target,
        posture: solved.clone(),
        indices,
        force: (&command).into(),
        boundary_distance: boundary_proximity(model, target).distance,
        class,
    };
    let next = HapticState {
        tick: prev.tick + 1,
        last_valid: solved.unwrap_or_else(|| prev.last_valid.clone()),
        prev_target: target,
        anchor: prev.anchor,
    };
    (snapshot, next)
}

/// Session state shared by live service and replay: configuration, the
/// latest pointer sample and the haptic state.
#[derive(Clone, Debug)]
pub struct Session {
    config: SessionConfig,
    state: HapticState,
    latest: Option<PointerSample>,
    /// Re-anchor on the next sample.
    rebase: bool,
}

impl Session {
    pub fn new(config: SessionConfig) -> Result<Self> {
        config.validate()?;
        let state = HapticState::new(&config)?;
        Ok(Session {
            config,
            state,
            latest: None,
            rebase: false,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn state(&self) -> &HapticState {
        &self.state
    }

    /// Latest-value ingress: the newest sample replaces any unread one.
    pub fn offer_pointer(&mut self, p: PointerSample) -> Result<()> {
        if let Some(last) = self.latest {
            if p.seq <= last.seq {
                return Err(Error::InvalidArgument(format!(
                    "pointer sequence {} does not follow {}",
                    p.seq, last.seq
                )));
            }
        }
        if !(p.x.is_finite() && p.y.is_finite()) {
            return Err(Error::InvalidArgument("pointer position is not finite".into()));
        }
        if self.rebase {
            self.state.anchor = self.state.prev_target - self.config.params.map(p.position())?;
            self.rebase = false;
        }
        self.latest = Some(p);
        Ok(())
    }

    /// Forgets the pointer stream, e.g. when the driver changes. The next
    /// sample, whatever its position and sequence number, maps to the
    /// current target.
    pub fn release_pointer(&mut self) {
        self.latest = None;
        self.rebase = true;
    }

    pub fn set_mode(&mut self, mode: WorkingMode) -> Result<()> {
        self.set_params(&ParamsPatch {
            mode: Some(mode),
            ..ParamsPatch::default()
        })
    }

    /// Applies a parameter patch. A sensitivity or zoom change re-anchors the
    /// pointer so the target does not jump; a mode change re-solves the held
    /// posture in the new mode.
    pub fn set_params(&mut self, patch: &ParamsPatch) -> Result<()> {
        let new = self.config.params.patched(patch)?;
        if let Some(p) = &self.latest {
            if new.sensitivity != self.config.params.sensitivity
                || new.view_zoom != self.config.params.view_zoom
            {
                self.state.anchor = self.state.prev_target - new.map(p.position())?;
            }
        }
        if new.mode != self.config.params.mode {
            let p = self.state.last_valid.p;
            if let Some(s) = inverse_kinematics(&self.config.model, p, new.mode) {
                self.state.last_valid = s;
            }
        }
        self.config.params = new;
        Ok(())
    }

    /// Applies a non-hello client message.
    pub fn apply(&mut self, msg: &ClientMessage) -> Result<()> {
        match msg {
            ClientMessage::Hello { .. } => Err(Error::InvalidArgument(
                "hello is only valid as the first message".into(),
            )),
            ClientMessage::Pointer { .. } => self.offer_pointer(msg.as_pointer().expect("pointer")),
            ClientMessage::SetMode { s1, s2 } => self.set_mode(WorkingMode::new(*s1, *s2)),
            ClientMessage::SetParams(patch) => self.set_params(patch),
        }
    }

    /// Runs one haptic tick at session time `t` (ns).
    pub fn tick(&mut self, t: u64) -> StateSnapshot {
        let (snapshot, next) = haptic_tick(self.latest.as_ref(), &self.state, &self.config, t);
        self.state = next;
        snapshot
    }
}

/// One line of a pointer trace with its 1-based line number.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEvent {
    pub line: usize,
    /// Time at which the event takes effect, ns.
    pub t: u64,
    pub message: ClientMessage,
}

/// Reads a JSON-lines trace. Pointer lines carry their own time;
/// `set_mode` / `set_params` lines may carry a `t` field and otherwise take
/// the time of the preceding line. Blank lines are skipped.
pub fn read_trace(reader: impl BufRead, path: &Path) -> Result<Vec<TraceEvent>> {
    let err = |line: usize, reason: String| Error::Trace {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut events = Vec::new();
    let mut last_t = 0u64;
    let mut last_seq: Option<u64> = None;
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let text = line.map_err(|e| Error::io(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        let mut value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| err(line_no, e.to_string()))?;
        let explicit_t = match value.get("type").and_then(|v| v.as_str()) {
            Some("pointer") => None,
            _ => value.as_object_mut().and_then(|o| o.remove("t")),
        };
        let message: ClientMessage =
            serde_json::from_value(value).map_err(|e| err(line_no, e.to_string()))?;
        let t = match (&message, explicit_t) {
            (ClientMessage::Hello { .. }, _) => {
                return Err(err(line_no, "hello is not allowed in a trace".into()))
            }
            (ClientMessage::Pointer { t, seq, .. }, _) => {
                if last_seq.is_some_and(|s| *seq <= s) {
                    return Err(err(line_no, format!("sequence {seq} is not increasing")));
                }
                last_seq = Some(*seq);
                *t
            }
            (_, Some(v)) => v
                .as_u64()
                .ok_or_else(|| err(line_no, "`t` must be a non-negative integer".into()))?,
            (_, None) => last_t,
        };
        if t < last_t {
            return Err(err(line_no, format!("time {t} runs backwards (previous {last_t})")));
        }
        last_t = t;
        events.push(TraceEvent {
            line: line_no,
            t,
            message,
        });
    }
    Ok(events)
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<TraceEvent>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace(std::io::BufReader::new(file), path)
}

/// Replays a trace on virtual time. Haptic ticks fall at
/// `t0 + k * period`, where `t0` is the first event's time; before each tick
/// every event due by then is applied (latest pointer wins). Ticks run until
/// the last event has been applied, and every tick is passed to `sink`.
pub fn replay(
    config: &SessionConfig,
    events: &[TraceEvent],
    mut sink: impl FnMut(&StateSnapshot) -> Result<()>,
) -> Result<u64> {
    let Some(first) = events.first() else {
        return Ok(0);
    };
    let mut session = Session::new(config.clone())?;
    let period = config.rates.haptic_period_ns();
    let t0 = first.t;
    let mut next = 0;
    let mut ticks = 0u64;
    while next < events.len() {
        let now = t0 + ticks * period;
        while next < events.len() && events[next].t <= now {
            let ev = &events[next];
            session.apply(&ev.message).map_err(|e| Error::Trace {
                path: PathBuf::new(),
                line: ev.line,
                reason: e.to_string(),
            })?;
            next += 1;
        }
        sink(&session.tick(now - t0))?;
        ticks += 1;
    }
    Ok(ticks)
}

/// Replays a trace into a snapshot log, one `snapshot` message per line.
pub fn replay_to_writer(
    config: &SessionConfig,
    events: &[TraceEvent],
    out: &mut impl Write,
) -> Result<u64> {
    replay(config, events, |s| {
        let line = ServerMessage::Snapshot(s.clone()).to_json();
        writeln!(out, "{line}").map_err(|e| Error::io("<snapshot log>", e))
    })
}
