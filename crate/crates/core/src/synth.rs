//! Synthetic match generator: 25 Hz tracking plus an event stream with
//! known ground-truth velocities, at desk scale.
//!
//! Players follow Ornstein-Uhlenbeck-style accelerations toward
//! role-dependent anchor points that shift with the ball; the ball moves
//! ballistically between possession events. Acceleration is smooth and
//! bounded so a central finite difference on the 25 Hz positions recovers
//! the stored velocities closely.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{substream, EventType, PitchSpec, Vec2, NUM_PLAYERS};

pub const TRACKING_HZ: f64 = 25.0;
pub const FRAME_DT: f64 = 1.0 / TRACKING_HZ;

/// Anchor-pull gain (1/s).
const PULL_GAIN: f64 = 0.4;
/// Velocity damping (1/s).
const DAMPING: f64 = 0.7;
/// OU correlation rate of the acceleration noise (1/s).
const NOISE_RATE: f64 = 0.5;
/// Cap on the anchor-pull acceleration (m/s^2).
const PULL_CAP: f64 = 1.5;
/// Cap on total acceleration (m/s^2); keeps finite differences accurate.
const ACCEL_CAP: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Team {
    Home,
    Away,
}

impl Team {
    pub fn code(self) -> &'static str {
        match self {
            Team::Home => "home",
            Team::Away => "away",
        }
    }

    pub fn other(self) -> Team {
        match self {
            Team::Home => Team::Away,
            Team::Away => Team::Home,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_matches: usize,
    pub match_seconds: f64,
    pub seed: u64,
    /// Mean events per second.
    pub event_rate: f64,
    /// Hard player speed limit (m/s).
    pub speed_cap: f64,
    /// Stationary std of the smooth acceleration noise (m/s^2).
    pub accel_sigma: f64,
    /// Spread of pass targets around the receiver (m).
    pub pass_length_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_matches: 12,
            match_seconds: 300.0,
            seed: 0,
            event_rate: 0.4,
            speed_cap: 8.0,
            accel_sigma: 0.8,
            pass_length_sigma: 6.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = self.n_matches > 0
            && self.match_seconds > 0.0
            && self.event_rate > 0.0
            && self.speed_cap > 0.0
            && self.accel_sigma > 0.0
            && self.pass_length_sigma > 0.0;
        if !all_positive {
            return Err(Error::Config("synth config values must be positive".into()));
        }
        Ok(())
    }
}

/// One 25 Hz snapshot. Player order: home 0..11 then away 0..11.
#[derive(Debug, Clone)]
pub struct TrackingFrame {
    pub frame_no: u64,
    pub t: f64,
    pub ball: Vec2,
    pub players: Vec<Vec2>,
}

/// Ground-truth velocities aligned with a tracking frame (ball + players).
#[derive(Debug, Clone)]
pub struct TruthFrame {
    pub ball_vel: Vec2,
    pub player_vel: Vec<Vec2>,
}

#[derive(Debug, Clone)]
pub struct SynthEvent {
    pub t: f64,
    pub event_type: EventType,
    pub possessing_team: Team,
    pub x_start: Vec2,
    pub x_end: Vec2,
}

#[derive(Debug, Clone)]
pub struct GeneratedMatch {
    pub tracking: Vec<TrackingFrame>,
    pub events: Vec<SynthEvent>,
    /// Same indexing as `tracking`; the generator's exact velocities.
    pub truth: Vec<TruthFrame>,
}

/// Role of each slot within a team: one keeper, four defenders, four
/// midfielders, two forwards.
fn role_of(slot: usize) -> usize {
    match slot {
        0 => 0,
        1..=4 => 1,
        5..=8 => 2,
        _ => 3,
    }
}

fn base_position(team: Team, slot: usize, pitch: &PitchSpec, attack_sign: f64) -> Vec2 {
    let hl = pitch.half_length();
    let hw = pitch.half_width();
    let (x_frac, y_frac) = match slot {
        0 => (-0.92, 0.0),
        1 => (-0.55, -0.60),
        2 => (-0.55, -0.20),
        3 => (-0.55, 0.20),
        4 => (-0.55, 0.60),
        5 => (-0.10, -0.55),
        6 => (-0.10, -0.18),
        7 => (-0.10, 0.18),
        8 => (-0.10, 0.55),
        9 => (0.45, -0.25),
        _ => (0.45, 0.25),
    };
    let sign = match team {
        Team::Home => attack_sign,
        Team::Away => -attack_sign,
    };
    Vec2::new(sign * x_frac * hl, y_frac * hw)
}

fn ball_pull(slot: usize) -> f64 {
    match role_of(slot) {
        0 => 0.03,
        1 => 0.15,
        2 => 0.25,
        _ => 0.35,
    }
}

enum BallState {
    /// Index into the combined player list.
    Held { holder: usize },
    Flight {
        vel: Vec2,
        arrive_frame: u64,
        receiver: Receiver,
    },
}

enum Receiver {
    Player(usize),
    /// Whoever is nearest to the landing point takes over.
    Nearest,
}

struct Sim {
    pitch: PitchSpec,
    cfg: SynthConfig,
    rng: ChaCha8Rng,
    pos: Vec<Vec2>,
    vel: Vec<Vec2>,
    noise: Vec<Vec2>,
    ball_pos: Vec2,
    ball_vel: Vec2,
    ball: BallState,
    possession: Team,
    /// Attack sign of the home team for the current half.
    attack_sign: f64,
    next_event_t: f64,
}

impl Sim {
    fn player_team(idx: usize) -> Team {
        if idx < 11 {
            Team::Home
        } else {
            Team::Away
        }
    }

    fn team_attack_sign(&self, team: Team) -> f64 {
        match team {
            Team::Home => self.attack_sign,
            Team::Away => -self.attack_sign,
        }
    }

    fn reset_positions(&mut self) {
        for i in 0..NUM_PLAYERS {
            let (team, slot) = (Self::player_team(i), i % 11);
            let base = base_position(team, slot, &self.pitch, self.attack_sign);
            let jitter = Vec2::new(
                self.rng.gen_range(-2.0..2.0),
                self.rng.gen_range(-2.0..2.0),
            );
            self.pos[i] = base + jitter;
            self.vel[i] = Vec2::ZERO;
            self.noise[i] = Vec2::ZERO;
        }
        let kickoff = if self.possession == Team::Home { 6 } else { 17 };
        self.pos[kickoff] = Vec2::new(0.0, 0.0);
        self.ball = BallState::Held { holder: kickoff };
        self.ball_pos = self.ball_offset(kickoff);
        self.ball_vel = Vec2::ZERO;
    }

    fn ball_offset(&self, holder: usize) -> Vec2 {
        let sign = self.team_attack_sign(Self::player_team(holder));
        self.pos[holder] + Vec2::new(0.4 * sign, 0.0)
    }

    fn gaussian(&mut self) -> Vec2 {
        Vec2::new(
            self.rng.sample(StandardNormal),
            self.rng.sample(StandardNormal),
        )
    }

    fn step_players(&mut self) {
        let dt = FRAME_DT;
        let kappa = NOISE_RATE;
        let noise_drive = self.cfg.accel_sigma * (2.0 * kappa * dt).sqrt();
        let holder = match self.ball {
            BallState::Held { holder } => Some(holder),
            _ => None,
        };
        for i in 0..NUM_PLAYERS {
            let (team, slot) = (Self::player_team(i), i % 11);
            let sign = self.team_attack_sign(team);
            let base = base_position(team, slot, &self.pitch, self.attack_sign);
            let pull_frac = ball_pull(slot);
            let mut anchor = base + (self.ball_pos - base) * pull_frac;
            if holder == Some(i) {
                // The carrier drifts toward the goal they attack.
                anchor = anchor + Vec2::new(8.0 * sign, 0.0);
            }
            let g = self.gaussian();
            let w = self.noise[i];
            let w_next = w + w * (-kappa * dt) + g * noise_drive;
            self.noise[i] = w_next;

            let mut pull = (anchor - self.pos[i]) * PULL_GAIN;
            let pn = pull.norm();
            if pn > PULL_CAP {
                pull = pull * (PULL_CAP / pn);
            }
            let mut acc = pull + self.vel[i] * (-DAMPING) + w_next;
            let an = acc.norm();
            if an > ACCEL_CAP {
                acc = acc * (ACCEL_CAP / an);
            }

            let mut v = self.vel[i] + acc * dt;
            let speed = v.norm();
            if speed > self.cfg.speed_cap {
                v = v * (self.cfg.speed_cap / speed);
            }
            let prev = self.pos[i];
            let mut p = prev + v * dt;
            let hl = self.pitch.half_length() - 0.5;
            let hw = self.pitch.half_width() - 0.5;
            p.x = p.x.clamp(-hl, hl);
            p.y = p.y.clamp(-hw, hw);
            self.pos[i] = p;
            // Stored velocity is the exact discrete derivative, so clamping
            // stays consistent with the finite-difference ground truth.
            self.vel[i] = (p - prev) * (1.0 / dt);
        }
    }

    fn nearest_player(&self, point: Vec2, team: Option<Team>) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..NUM_PLAYERS {
            if let Some(t) = team {
                if Self::player_team(i) != t {
                    continue;
                }
            }
            let d = self.pos[i].dist(point);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    fn clamp_to_pitch(&self, p: Vec2) -> Vec2 {
        Vec2::new(
            p.x.clamp(
                -self.pitch.half_length() + 1.0,
                self.pitch.half_length() - 1.0,
            ),
            p.y.clamp(
                -self.pitch.half_width() + 1.0,
                self.pitch.half_width() - 1.0,
            ),
        )
    }

    fn weighted_teammate(&mut self, team: Team, exclude: usize) -> usize {
        // Bias toward players ahead of the ball so play advances.
        let sign = self.team_attack_sign(team);
        let candidates: Vec<usize> = (0..NUM_PLAYERS)
            .filter(|&i| Self::player_team(i) == team && i != exclude)
            .collect();
        let weights: Vec<f64> = candidates
            .iter()
            .map(|&i| {
                let progress = 0.08 * sign * (self.pos[i].x - self.ball_pos.x);
                progress.clamp(-2.0, 2.0).exp()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut draw = self.rng.gen_range(0.0..total);
        for (idx, w) in candidates.iter().zip(&weights) {
            if draw < *w {
                return *idx;
            }
            draw -= w;
        }
        *candidates.last().expect("teams are never empty")
    }

    fn fire_event(&mut self, frame_no: u64, t: f64, events: &mut Vec<SynthEvent>) {
        let holder = match self.ball {
            BallState::Held { holder } => holder,
            _ => return,
        };
        let team = Self::player_team(holder);
        let sign = self.team_attack_sign(team);
        let in_final_third = sign * self.ball_pos.x >= self.pitch.length_m / 6.0;
        let in_own_third = sign * self.ball_pos.x <= -self.pitch.length_m / 6.0;

        let roll: f64 = self.rng.gen();
        let kind = if in_final_third && roll < 0.10 {
            EventType::Shot
        } else if in_own_third && roll < 0.10 {
            EventType::Clearance
        } else if in_final_third && roll < 0.22 {
            EventType::Cross
        } else if roll < 0.32 {
            EventType::Dribble
        } else {
            EventType::Pass
        };

        let x_start = self.ball_pos;
        match kind {
            EventType::Dribble => {
                let to_goal = Vec2::new(sign, 0.0);
                let len = self.rng.gen_range(3.0..8.0);
                let x_end = self.clamp_to_pitch(self.ball_pos + to_goal * len);
                events.push(SynthEvent {
                    t,
                    event_type: kind,
                    possessing_team: team,
                    x_start,
                    x_end,
                });
                // Ball stays with the carrier.
            }
            EventType::Shot => {
                let goal_x = sign * self.pitch.half_length();
                let target = Vec2::new(goal_x, self.rng.gen_range(-3.5..3.5));
                let keeper = self.opponent_keeper(team);
                self.launch(target, 18.0, Receiver::Player(keeper), frame_no);
                events.push(SynthEvent {
                    t,
                    event_type: kind,
                    possessing_team: team,
                    x_start,
                    x_end: target,
                });
            }
            EventType::Clearance => {
                let downfield = Vec2::new(
                    sign * self.rng.gen_range(15.0..35.0),
                    self.rng.gen_range(-20.0..20.0),
                );
                let target = self.clamp_to_pitch(self.ball_pos + downfield);
                self.launch(target, 16.0, Receiver::Nearest, frame_no);
                events.push(SynthEvent {
                    t,
                    event_type: kind,
                    possessing_team: team,
                    x_start,
                    x_end: target,
                });
            }
            EventType::Pass | EventType::Cross => {
                let receiver = self.weighted_teammate(team, holder);
                let spread = self.cfg.pass_length_sigma;
                let jitter = self.gaussian() * (spread / 2.0_f64.sqrt());
                let target = self.clamp_to_pitch(self.pos[receiver] + jitter);
                let speed = self.rng.gen_range(10.0..16.0);
                // Some passes are cut out by the nearest opponent.
                let intercepted: f64 = self.rng.gen();
                let receiver = if intercepted < 0.12 {
                    Receiver::Nearest
                } else {
                    Receiver::Player(receiver)
                };
                self.launch(target, speed, receiver, frame_no);
                events.push(SynthEvent {
                    t,
                    event_type: kind,
                    possessing_team: team,
                    x_start,
                    x_end: target,
                });
            }
            EventType::Other => unreachable!("generator never emits other"),
        }
    }

    fn opponent_keeper(&self, team: Team) -> usize {
        match team.other() {
            Team::Home => 0,
            Team::Away => 11,
        }
    }

    fn launch(&mut self, target: Vec2, speed: f64, receiver: Receiver, frame_no: u64) {
        let dist = self.ball_pos.dist(target).max(0.5);
        let flight_frames = ((dist / speed) / FRAME_DT).ceil().max(1.0) as u64;
        let vel = (target - self.ball_pos) * (1.0 / (flight_frames as f64 * FRAME_DT));
        self.ball = BallState::Flight {
            vel,
            arrive_frame: frame_no + flight_frames,
            receiver,
        };
        self.ball_vel = vel;
    }

    fn step_ball(&mut self, frame_no: u64) {
        match &self.ball {
            BallState::Held { holder } => {
                let holder = *holder;
                let prev = self.ball_pos;
                self.ball_pos = self.ball_offset(holder);
                self.ball_vel = (self.ball_pos - prev) * (1.0 / FRAME_DT);
            }
            BallState::Flight {
                vel,
                arrive_frame,
                receiver,
            } => {
                let vel = *vel;
                let arrive = *arrive_frame;
                let take_over = if frame_no >= arrive {
                    Some(match receiver {
                        Receiver::Player(p) => *p,
                        Receiver::Nearest => self.nearest_player(self.ball_pos, None),
                    })
                } else {
                    None
                };
                self.ball_pos = self.ball_pos + vel * FRAME_DT;
                self.ball_vel = vel;
                if let Some(new_holder) = take_over {
                    self.possession = Self::player_team(new_holder);
                    self.ball = BallState::Held { holder: new_holder };
                }
            }
        }
    }
}

/// Generates one match deterministically from `(cfg.seed, match_idx)`.
pub fn generate_match(
    cfg: &SynthConfig,
    pitch: &PitchSpec,
    match_idx: usize,
) -> Result<GeneratedMatch> {
    cfg.validate()?;
    let mut sim = Sim {
        pitch: *pitch,
        cfg: *cfg,
        rng: substream(cfg.seed, match_idx as u64),
        pos: vec![Vec2::ZERO; NUM_PLAYERS],
        vel: vec![Vec2::ZERO; NUM_PLAYERS],
        noise: vec![Vec2::ZERO; NUM_PLAYERS],
        ball_pos: Vec2::ZERO,
        ball_vel: Vec2::ZERO,
        ball: BallState::Held { holder: 6 },
        possession: Team::Home,
        attack_sign: 1.0,
        next_event_t: 0.0,
    };
    sim.reset_positions();
    sim.next_event_t = 2.0 + exp_draw(&mut sim.rng, cfg.event_rate);

    let n_frames = (cfg.match_seconds * TRACKING_HZ).round() as u64;
    let half_frame = n_frames / 2;
    let mut tracking = Vec::with_capacity(n_frames as usize);
    let mut truth = Vec::with_capacity(n_frames as usize);
    let mut events = Vec::new();
    let mut halftime_done = false;

    for frame_no in 0..n_frames {
        let t = frame_no as f64 * FRAME_DT;
        if !halftime_done && frame_no >= half_frame {
            // Second half: directions swap and everyone resets.
            sim.attack_sign = -1.0;
            sim.possession = Team::Away;
            sim.reset_positions();
            sim.next_event_t = t + 2.0 + exp_draw(&mut sim.rng, cfg.event_rate);
            halftime_done = true;
        }
        sim.step_players();
        sim.step_ball(frame_no);
        // Leave room for the finite-difference stencil and the flight.
        let half_t = half_frame as f64 * FRAME_DT;
        let near_edge = t < 0.2
            || t > cfg.match_seconds - 3.0
            || (frame_no < half_frame && t > half_t - 3.0)
            || (frame_no >= half_frame && t < half_t + 0.2);
        if t >= sim.next_event_t && !near_edge && matches!(sim.ball, BallState::Held { .. }) {
            sim.fire_event(frame_no, t, &mut events);
            sim.next_event_t = t + exp_draw(&mut sim.rng, cfg.event_rate);
        }
        tracking.push(TrackingFrame {
            frame_no,
            t,
            ball: sim.ball_pos,
            players: sim.pos.clone(),
        });
        truth.push(TruthFrame {
            ball_vel: sim.ball_vel,
            player_vel: sim.vel.clone(),
        });
    }

    Ok(GeneratedMatch {
        tracking,
        events,
        truth,
    })
}

fn exp_draw(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    let u: f64 = rng.gen_range(1e-12..1.0);
    -u.ln() / rate
}

/// Manifest written next to the generated CSVs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub n_matches: usize,
    pub frames_per_match: u64,
    pub events_per_match: Vec<usize>,
}

/// Generates `cfg.n_matches` matches in parallel and writes
/// `match_<idx>_tracking.csv`, `match_<idx>_events.csv`, and
/// `synth_manifest.json` into `out_dir`.
pub fn write_corpus(
    cfg: &SynthConfig,
    pitch: &PitchSpec,
    out_dir: &std::path::Path,
) -> Result<SynthManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let matches: Vec<GeneratedMatch> = (0..cfg.n_matches)
        .into_par_iter()
        .map(|i| generate_match(cfg, pitch, i))
        .collect::<Result<_>>()?;

    let mut events_per_match = Vec::with_capacity(matches.len());
    for (i, m) in matches.iter().enumerate() {
        write_tracking_csv(&out_dir.join(format!("match_{i:03}_tracking.csv")), m)?;
        write_events_csv(&out_dir.join(format!("match_{i:03}_events.csv")), m)?;
        events_per_match.push(m.events.len());
    }
    let manifest = SynthManifest {
        config: *cfg,
        n_matches: cfg.n_matches,
        frames_per_match: (cfg.match_seconds * TRACKING_HZ).round() as u64,
        events_per_match,
    };
    let f = std::fs::File::create(out_dir.join("synth_manifest.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &manifest)?;
    Ok(manifest)
}

pub fn entity_id(idx: usize) -> String {
    let (prefix, slot) = if idx < 11 { ("h", idx) } else { ("a", idx - 11) };
    format!("{prefix}{slot}")
}

fn write_tracking_csv(path: &std::path::Path, m: &GeneratedMatch) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["frame", "t", "entity_id", "team", "x", "y"])?;
    for frame in &m.tracking {
        w.write_record([
            frame.frame_no.to_string(),
            format!("{:.6}", frame.t),
            "ball".to_string(),
            "none".to_string(),
            format!("{:.6}", frame.ball.x),
            format!("{:.6}", frame.ball.y),
        ])?;
        for (i, p) in frame.players.iter().enumerate() {
            let team = if i < 11 { "home" } else { "away" };
            w.write_record([
                frame.frame_no.to_string(),
                format!("{:.6}", frame.t),
                entity_id(i),
                team.to_string(),
                format!("{:.6}", p.x),
                format!("{:.6}", p.y),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_events_csv(path: &std::path::Path, m: &GeneratedMatch) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "t",
        "type",
        "possessing_team",
        "x_start",
        "y_start",
        "x_end",
        "y_end",
    ])?;
    for e in &m.events {
        w.write_record([
            format!("{:.6}", e.t),
            e.event_type.code().to_string(),
            e.possessing_team.code().to_string(),
            format!("{:.6}", e.x_start.x),
            format!("{:.6}", e.x_start.y),
            format!("{:.6}", e.x_end.x),
            format!("{:.6}", e.x_end.y),
        ])?;
    }
    w.flush()?;
    Ok(())
}
