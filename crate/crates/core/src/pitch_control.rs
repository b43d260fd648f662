//! Pitch-control (PPCF) and off-ball scoring opportunity grids, the grid
//! error metrics, the completion comparison harness, and heatmap export.
//!
//! Control accrues through a coupled ODE over all players: at target time T
//! a player intercepts with probability rate `f_j(T) * lambda`, where `f_j`
//! is a logistic ramp around the player's expected interception time. The
//! integrator steps in `int_dt` increments with coefficients frozen per
//! step and allocates the remaining probability exponentially, which keeps
//! the team sums within [0, 1] and nearly independent of the step size
//! (plain Euler increments overshoot at lambda * dt ~ 0.17).

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::models::RuleConfig;
use crate::training::VelocitySource;
use crate::types::{
    substream, AttackDirection, EventFrame, EventWindow, PitchSpec, Vec2,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpcfParams {
    /// Ball control rate per second while in range.
    pub lambda_control: f64,
    /// Temporal uncertainty of the interception time (s).
    pub tti_sigma: f64,
    /// Seconds of ballistic continuation before a player redirects.
    pub reaction_time: f64,
    /// Top running speed (m/s).
    pub max_speed: f64,
    /// Ball flight speed used for the arrival time (m/s).
    pub ball_speed: f64,
    /// Integration step (s).
    pub int_dt: f64,
    /// Absolute integration horizon (s).
    pub max_t: f64,
    /// Stop once total control reaches 1 - converge_tol.
    pub converge_tol: f64,
}

impl Default for PpcfParams {
    fn default() -> Self {
        PpcfParams {
            lambda_control: 4.3,
            tti_sigma: 0.45,
            reaction_time: 0.7,
            max_speed: 5.0,
            ball_speed: 15.0,
            int_dt: 0.04,
            max_t: 10.0,
            converge_tol: 0.01,
        }
    }
}

impl PpcfParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_control > 0.0
            && self.tti_sigma > 0.0
            && self.reaction_time > 0.0
            && self.max_speed > 0.0
            && self.ball_speed > 0.0
            && self.int_dt > 0.0
            && self.max_t > 0.0
            && self.converge_tol > 0.0;
        if !ok {
            return Err(Error::Config("ppcf params must be positive".into()));
        }
        Ok(())
    }
}

pub const DEFAULT_TRANSITION_SIGMA: f64 = 14.0;
pub const DEFAULT_SCORING_ALPHA: f64 = 0.14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Attacking,
    Defending,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcPlayer {
    pub pos: Vec2,
    pub vel: Vec2,
    pub side: Side,
    pub goalkeeper: bool,
}

/// The inputs of one pitch-control evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameStateSnapshot {
    pub ball: Vec2,
    pub players: Vec<PcPlayer>,
    pub attack_dir: AttackDirection,
}

impl GameStateSnapshot {
    /// Builds a snapshot from an event frame; `velocities` overrides the
    /// frame's player velocities (completed velocities are applied to all
    /// 22 players uniformly).
    pub fn from_frame(frame: &EventFrame, velocities: Option<&[Vec2]>) -> Result<GameStateSnapshot> {
        if let Some(v) = velocities {
            if v.len() != frame.players.len() {
                return Err(Error::Shape(format!(
                    "{} velocities for {} players",
                    v.len(),
                    frame.players.len()
                )));
            }
        }
        let players = frame
            .players
            .iter()
            .enumerate()
            .map(|(j, p)| PcPlayer {
                pos: p.pos,
                vel: velocities.map_or(p.vel, |v| v[j]),
                side: if p.flags.teammate {
                    Side::Attacking
                } else {
                    Side::Defending
                },
                goalkeeper: p.flags.goalkeeper,
            })
            .collect();
        Ok(GameStateSnapshot {
            ball: frame.ball_pos,
            players,
            attack_dir: frame.attack_dir,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.ball.is_finite()
            || self
                .players
                .iter()
                .any(|p| !(p.pos.is_finite() && p.vel.is_finite()))
        {
            return Err(Error::NonFinite("game state snapshot".into()));
        }
        Ok(())
    }
}

/// Grid of per-cell scalars over the pitch; `get(ix, iy)` with iy = 0 at
/// the bottom of the pitch (y = -width/2).
#[derive(Debug, Clone, PartialEq)]
pub struct PitchGrid {
    nx: usize,
    ny: usize,
    data: Vec<f64>,
}

impl PitchGrid {
    pub fn zeros(pitch: &PitchSpec) -> PitchGrid {
        PitchGrid {
            nx: pitch.grid_nx,
            ny: pitch.grid_ny,
            data: vec![0.0; pitch.cell_count()],
        }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    #[inline]
    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.data[iy * self.nx + ix]
    }

    #[inline]
    pub fn set(&mut self, ix: usize, iy: usize, v: f64) {
        self.data[iy * self.nx + ix] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Expected interception time: ballistic continuation for the reaction
/// time, then a straight run at top speed.
pub fn time_to_intercept(pos: Vec2, vel: Vec2, target: Vec2, params: &PpcfParams) -> f64 {
    let after_reaction = pos + vel * params.reaction_time;
    params.reaction_time + after_reaction.dist(target) / params.max_speed
}

/// Per-cell result: cumulative control of each team when the integration
/// stopped, and whether it converged before the horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellControl {
    pub attacking: f64,
    pub defending: f64,
    pub converged: bool,
}

impl CellControl {
    pub fn total(&self) -> f64 {
        self.attacking + self.defending
    }
}

/// Integrates the control ODE for one target location. `trace` receives
/// `(T, attacking, defending)` after every step when provided.
fn ppcf_cell_impl(
    state: &GameStateSnapshot,
    target: Vec2,
    params: &PpcfParams,
    mut trace: Option<&mut Vec<(f64, f64, f64)>>,
) -> CellControl {
    let n = state.players.len();
    let tti: Vec<f64> = state
        .players
        .iter()
        .map(|p| time_to_intercept(p.pos, p.vel, target, params))
        .collect();
    let ramp = std::f64::consts::PI / (3.0_f64.sqrt() * params.tti_sigma);

    let t0 = state.ball.dist(target) / params.ball_speed;
    let mut per_player = vec![0.0; n];
    let mut total = 0.0;
    let mut t = t0;
    let mut converged = false;
    while t <= params.max_t {
        let hazards: Vec<f64> = tti
            .iter()
            .map(|&tau| sigmoid(ramp * (t - tau)) * params.lambda_control)
            .collect();
        let hazard_sum: f64 = hazards.iter().sum();
        let remaining = 1.0 - total;
        // Exact depletion over the step with frozen hazards: the remaining
        // probability decays by exp(-H dt) and splits in hazard proportion.
        let allocated = remaining * (-hazard_sum * params.int_dt).exp_m1().abs();
        if hazard_sum > 0.0 {
            for (p, h) in per_player.iter_mut().zip(&hazards) {
                *p = (*p + allocated * h / hazard_sum).min(1.0);
            }
        }
        total += allocated;
        t += params.int_dt;
        if let Some(trace) = trace.as_deref_mut() {
            let (att, def) = team_sums(state, &per_player);
            trace.push((t, att, def));
        }
        if total >= 1.0 - params.converge_tol {
            converged = true;
            break;
        }
    }
    let (attacking, defending) = team_sums(state, &per_player);
    CellControl {
        attacking,
        defending,
        converged,
    }
}

fn team_sums(state: &GameStateSnapshot, per_player: &[f64]) -> (f64, f64) {
    let mut att = 0.0;
    let mut def = 0.0;
    for (p, &v) in state.players.iter().zip(per_player) {
        match p.side {
            Side::Attacking => att += v,
            Side::Defending => def += v,
        }
    }
    (att, def)
}

/// Control probabilities of both teams for a ball played to `target`.
/// Distant empty corners may stop at the horizon un-converged; the flag
/// reports it.
pub fn ppcf_cell(state: &GameStateSnapshot, target: Vec2, params: &PpcfParams) -> CellControl {
    ppcf_cell_impl(state, target, params, None)
}

/// As [`ppcf_cell`], returning the cumulative team sums after every step.
pub fn ppcf_cell_trace(
    state: &GameStateSnapshot,
    target: Vec2,
    params: &PpcfParams,
) -> (CellControl, Vec<(f64, f64, f64)>) {
    let mut trace = Vec::new();
    let cell = ppcf_cell_impl(state, target, params, Some(&mut trace));
    (cell, trace)
}

/// Attacking-team control over every grid cell, plus the count of
/// un-converged cells. Cells are independent; they run in parallel and the
/// result is identical to the sequential order.
pub fn ppcf_grid(
    state: &GameStateSnapshot,
    pitch: &PitchSpec,
    params: &PpcfParams,
) -> Result<(PitchGrid, usize)> {
    state.validate()?;
    params.validate()?;
    let cells: Vec<CellControl> = (0..pitch.cell_count())
        .into_par_iter()
        .map(|i| {
            let (ix, iy) = (i % pitch.grid_nx, i / pitch.grid_nx);
            ppcf_cell(state, pitch.cell_center(ix, iy), params)
        })
        .collect();
    let mut grid = PitchGrid::zeros(pitch);
    let mut unconverged = 0;
    for (i, c) in cells.iter().enumerate() {
        grid.data[i] = c.attacking;
        if !c.converged {
            unconverged += 1;
        }
    }
    Ok((grid, unconverged))
}

/// Probability that the next on-ball event happens at each cell: an
/// isotropic Gaussian around the ball, normalized to sum to exactly 1.
pub fn transition_grid(ball: Vec2, pitch: &PitchSpec, sigma: f64) -> Result<PitchGrid> {
    if sigma <= 0.0 {
        return Err(Error::Config("transition sigma must be positive".into()));
    }
    let mut grid = PitchGrid::zeros(pitch);
    for iy in 0..pitch.grid_ny {
        for ix in 0..pitch.grid_nx {
            let d = pitch.cell_center(ix, iy).dist(ball);
            grid.set(ix, iy, (-d * d / (2.0 * sigma * sigma)).exp());
        }
    }
    let total = grid.sum();
    for v in &mut grid.data {
        *v /= total;
    }
    Ok(grid)
}

/// Probability of scoring from each cell: exponential decay with distance
/// to the attacked goal center.
pub fn scoring_grid(pitch: &PitchSpec, attack_dir: AttackDirection, alpha: f64) -> PitchGrid {
    let goal = pitch.goal_center(attack_dir);
    let mut grid = PitchGrid::zeros(pitch);
    for iy in 0..pitch.grid_ny {
        for ix in 0..pitch.grid_nx {
            let d = pitch.cell_center(ix, iy).dist(goal);
            grid.set(ix, iy, (-alpha * d).exp());
        }
    }
    grid
}

#[derive(Debug, Clone)]
pub struct ObsoResult {
    pub grid: PitchGrid,
    /// Total scoring probability: the grid sum, in [0, 1].
    pub total: f64,
    pub unconverged_cells: usize,
}

/// Off-ball scoring opportunity: elementwise product of the scoring,
/// control, and transition grids.
pub fn obso_grid(
    state: &GameStateSnapshot,
    pitch: &PitchSpec,
    params: &PpcfParams,
    transition_sigma: f64,
    scoring_alpha: f64,
) -> Result<ObsoResult> {
    let (control, unconverged) = ppcf_grid(state, pitch, params)?;
    let transition = transition_grid(state.ball, pitch, transition_sigma)?;
    let scoring = scoring_grid(pitch, state.attack_dir, scoring_alpha);
    let mut grid = PitchGrid::zeros(pitch);
    for i in 0..grid.data.len() {
        grid.data[i] = scoring.data[i] * control.data[i] * transition.data[i];
    }
    let total = grid.sum();
    Ok(ObsoResult {
        grid,
        total,
        unconverged_cells: unconverged,
    })
}

/// Mean absolute per-cell difference between two grids.
pub fn er_metric(a: &PitchGrid, b: &PitchGrid) -> Result<f64> {
    if (a.nx, a.ny) != (b.nx, b.ny) {
        return Err(Error::Shape(format!(
            "er_metric: grids {}x{} vs {}x{}",
            a.nx, a.ny, b.nx, b.ny
        )));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(sum / a.data.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ErSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl ErSummary {
    fn from_values(values: &[f64]) -> ErSummary {
        let n = values.len().max(1) as f64;
        ErSummary {
            mean: values.iter().sum::<f64>() / n,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub event_index: u32,
    pub er_ppcf_rule: f64,
    pub er_ppcf_model: f64,
    pub er_obso_rule: f64,
    pub er_obso_model: f64,
}

/// Wins are strict; equal errors tie and count to neither side.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinCount {
    pub rule: usize,
    pub model: usize,
    pub ties: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub ppcf_rule: ErSummary,
    pub ppcf_model: ErSummary,
    pub obso_rule: ErSummary,
    pub obso_model: ErSummary,
    pub ppcf_wins: WinCount,
    pub obso_wins: WinCount,
}

impl ComparisonReport {
    /// CSV with one row per event:
    /// `event_index,er_ppcf_rule,er_ppcf_model,er_obso_rule,er_obso_model`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "event_index,er_ppcf_rule,er_ppcf_model,er_obso_rule,er_obso_model"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{:.12e},{:.12e},{:.12e},{:.12e}",
                r.event_index, r.er_ppcf_rule, r.er_ppcf_model, r.er_obso_rule, r.er_obso_model
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// For each test event, computes PPCF and OBSO grids under the true,
/// rule-completed, and model-completed velocities (positions identical),
/// tabulates both completions' grid errors against truth, and counts
/// per-event wins.
pub fn compare_completions(
    windows: &[EventWindow],
    model: &VelocitySource,
    rule: &RuleConfig,
    pitch: &PitchSpec,
    params: &PpcfParams,
    transition_sigma: f64,
    scoring_alpha: f64,
    seed: u64,
) -> Result<ComparisonReport> {
    if windows.is_empty() {
        return Err(Error::Data("no events to compare".into()));
    }
    let mut rows = Vec::with_capacity(windows.len());
    let mut ppcf_wins = WinCount::default();
    let mut obso_wins = WinCount::default();

    for (i, window) in windows.iter().enumerate() {
        let target = window.target();
        let truth_v = target.player_velocities();
        let rule_v = crate::models::rule_based_velocity(target, rule);
        let mut rng = substream(seed, 0xc09a9e + i as u64);
        let model_v = model.complete(window, pitch, Some(&mut rng))?;

        let make = |vels: &[Vec2]| -> Result<(PitchGrid, PitchGrid)> {
            let snap = GameStateSnapshot::from_frame(target, Some(vels))?;
            let (ppcf, _) = ppcf_grid(&snap, pitch, params)?;
            let obso = obso_grid(&snap, pitch, params, transition_sigma, scoring_alpha)?;
            Ok((ppcf, obso.grid))
        };
        let (ppcf_truth, obso_truth) = make(&truth_v)?;
        let (ppcf_rule, obso_rule) = make(&rule_v)?;
        let (ppcf_model, obso_model) = make(&model_v)?;

        let row = ComparisonRow {
            event_index: target.event_index,
            er_ppcf_rule: er_metric(&ppcf_rule, &ppcf_truth)?,
            er_ppcf_model: er_metric(&ppcf_model, &ppcf_truth)?,
            er_obso_rule: er_metric(&obso_rule, &obso_truth)?,
            er_obso_model: er_metric(&obso_model, &obso_truth)?,
        };
        count_win(row.er_ppcf_rule, row.er_ppcf_model, &mut ppcf_wins);
        count_win(row.er_obso_rule, row.er_obso_model, &mut obso_wins);
        rows.push(row);
    }

    let collect = |f: fn(&ComparisonRow) -> f64| -> Vec<f64> { rows.iter().map(f).collect() };
    Ok(ComparisonReport {
        ppcf_rule: ErSummary::from_values(&collect(|r| r.er_ppcf_rule)),
        ppcf_model: ErSummary::from_values(&collect(|r| r.er_ppcf_model)),
        obso_rule: ErSummary::from_values(&collect(|r| r.er_obso_rule)),
        obso_model: ErSummary::from_values(&collect(|r| r.er_obso_model)),
        ppcf_wins,
        obso_wins,
        rows,
    })
}

fn count_win(rule_err: f64, model_err: f64, wins: &mut WinCount) {
    if rule_err < model_err {
        wins.rule += 1;
    } else if model_err < rule_err {
        wins.model += 1;
    } else {
        wins.ties += 1;
    }
}

/// Colormap for heatmaps: 0 maps to white, the grid maximum to dark red.
pub fn heat_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    [
        (255.0 - 116.0 * t).round() as u8,
        (255.0 - 255.0 * t).round() as u8,
        (255.0 - 255.0 * t).round() as u8,
    ]
}

/// Writes a grid as CSV: ny rows of nx values, row 0 = top of the pitch.
pub fn write_grid_csv(grid: &PitchGrid, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for iy in (0..grid.ny).rev() {
        let row: Vec<String> = (0..grid.nx)
            .map(|ix| format!("{:.17e}", grid.get(ix, iy)))
            .collect();
        writeln!(f, "{}", row.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a grid written by [`write_grid_csv`].
pub fn read_grid_csv(path: &Path) -> Result<PitchGrid> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("bad grid value {v:?}")))
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    let ny = rows.len();
    let nx = rows.first().map(Vec::len).unwrap_or(0);
    if ny == 0 || nx == 0 || rows.iter().any(|r| r.len() != nx) {
        return Err(Error::Data("ragged or empty grid csv".into()));
    }
    let mut grid = PitchGrid {
        nx,
        ny,
        data: vec![0.0; nx * ny],
    };
    for (row_idx, row) in rows.iter().enumerate() {
        let iy = ny - 1 - row_idx;
        for (ix, &v) in row.iter().enumerate() {
            grid.set(ix, iy, v);
        }
    }
    Ok(grid)
}

/// Writes a binary PPM (P6) heatmap, one pixel per cell, top row first,
/// shaded white to dark red by value relative to the grid maximum.
pub fn write_heatmap_ppm(grid: &PitchGrid, path: &Path) -> Result<()> {
    if grid.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("heatmap grid".into()));
    }
    let max = grid.max();
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{} {}\n255\n", grid.nx, grid.ny)?;
    for iy in (0..grid.ny).rev() {
        for ix in 0..grid.nx {
            f.write_all(&heat_color(grid.get(ix, iy) * scale))?;
        }
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn duel_state(target: Vec2) -> GameStateSnapshot {
        // Attacker and defender mirror-symmetric about the target.
        let offset = Vec2::new(6.0, 2.0);
        GameStateSnapshot {
            ball: Vec2::new(0.0, 0.0),
            players: vec![
                PcPlayer {
                    pos: target + offset,
                    vel: offset * -0.3,
                    side: Side::Attacking,
                    goalkeeper: false,
                },
                PcPlayer {
                    pos: target - offset,
                    vel: offset * 0.3,
                    side: Side::Defending,
                    goalkeeper: false,
                },
            ],
            attack_dir: AttackDirection::LeftToRight,
        }
    }

    #[test]
    fn time_to_intercept_closed_forms() {
        let p = PpcfParams::default();
        // Already at the target, stationary: pure reaction time.
        let t = time_to_intercept(Vec2::new(3.0, 4.0), Vec2::ZERO, Vec2::new(3.0, 4.0), &p);
        assert!((t - 0.7).abs() < 1e-12);
        // Stationary, 5 m away at 5 m/s: 0.7 + 1.0.
        let t = time_to_intercept(Vec2::ZERO, Vec2::ZERO, Vec2::new(5.0, 0.0), &p);
        assert!((t - 1.7).abs() < 1e-12);
    }

    #[test]
    fn time_to_intercept_matches_numeric_minimization() {
        // Earliest arrival: coast for the reaction time, then run straight.
        // A dense scan over arrival times T finds the smallest feasible one.
        let p = PpcfParams::default();
        let pos = Vec2::new(-4.0, 2.0);
        let vel = Vec2::new(2.0, -1.0);
        let target = Vec2::new(6.0, 5.0);
        let formula = time_to_intercept(pos, vel, target, &p);
        let mut numeric = f64::NAN;
        let mut t = 0.0;
        while t < 20.0 {
            let coast = pos + vel * p.reaction_time.min(t);
            let run_time = (t - p.reaction_time).max(0.0);
            if coast.dist(target) <= run_time * p.max_speed {
                numeric = t;
                break;
            }
            t += 1e-4;
        }
        assert!((formula - numeric).abs() < 2e-4, "{formula} vs {numeric}");
    }

    #[test]
    fn duel_is_symmetric_and_converges() {
        let p = PpcfParams::default();
        let target = Vec2::new(10.0, -5.0);
        let cell = ppcf_cell(&duel_state(target), target, &p);
        assert!(cell.converged);
        assert!((cell.attacking - cell.defending).abs() < 1e-9);
        assert!(cell.total() >= 1.0 - p.converge_tol && cell.total() <= 1.0);
        assert!((cell.attacking - (1.0 - p.converge_tol) / 2.0).abs() < 0.01);
    }

    #[test]
    fn lone_nearby_attacker_dominates() {
        let p = PpcfParams::default();
        let target = Vec2::new(0.0, 0.0);
        let state = GameStateSnapshot {
            ball: Vec2::new(5.0, 0.0),
            players: vec![
                PcPlayer {
                    pos: Vec2::new(2.0, 0.0),
                    vel: Vec2::ZERO,
                    side: Side::Attacking,
                    goalkeeper: false,
                },
                PcPlayer {
                    pos: Vec2::new(40.0, 0.0),
                    vel: Vec2::ZERO,
                    side: Side::Defending,
                    goalkeeper: false,
                },
            ],
            attack_dir: AttackDirection::LeftToRight,
        };
        let cell = ppcf_cell(&state, target, &p);
        assert!(cell.attacking > 0.95, "attacking {}", cell.attacking);
    }

    #[test]
    fn zero_lambda_accrues_nothing() {
        let p = PpcfParams {
            lambda_control: 1e-12,
            ..PpcfParams::default()
        };
        let target = Vec2::new(10.0, -5.0);
        let cell = ppcf_cell(&duel_state(target), target, &p);
        assert!(cell.total() < 1e-3);
        assert!(!cell.converged);
    }

    #[test]
    fn translation_invariance() {
        let p = PpcfParams::default();
        let target = Vec2::new(8.0, 3.0);
        let state = duel_state(target);
        let base = ppcf_cell(&state, target, &p);
        let shift = Vec2::new(-13.0, 7.0);
        let mut moved = state.clone();
        moved.ball = moved.ball + shift;
        for pl in &mut moved.players {
            pl.pos = pl.pos + shift;
        }
        let shifted = ppcf_cell(&moved, target + shift, &p);
        assert!((base.attacking - shifted.attacking).abs() < 1e-12);
        assert!((base.defending - shifted.defending).abs() < 1e-12);
    }

    #[test]
    fn transition_grid_sums_to_one_and_peaks_at_ball() {
        let pitch = PitchSpec::default();
        let ball = Vec2::new(20.0, 10.0);
        let grid = transition_grid(ball, &pitch, DEFAULT_TRANSITION_SIGMA).unwrap();
        assert!((grid.sum() - 1.0).abs() < 1e-12);
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for iy in 0..pitch.grid_ny {
            for ix in 0..pitch.grid_nx {
                if grid.get(ix, iy) > best_v {
                    best_v = grid.get(ix, iy);
                    best = (ix, iy);
                }
            }
        }
        let center = pitch.cell_center(best.0, best.1);
        assert!(center.dist(ball) < 2.5, "peak at {center:?}");

        // Halving sigma concentrates mass: the peak value rises.
        let tighter = transition_grid(ball, &pitch, DEFAULT_TRANSITION_SIGMA / 2.0).unwrap();
        assert!(tighter.get(best.0, best.1) > grid.get(best.0, best.1));
    }

    #[test]
    fn scoring_grid_closed_forms() {
        let pitch = PitchSpec::default();
        let grid = scoring_grid(&pitch, AttackDirection::LeftToRight, DEFAULT_SCORING_ALPHA);
        // Nearest cell to the goal center.
        let goal = pitch.goal_center(AttackDirection::LeftToRight);
        let near = grid.get(pitch.grid_nx - 1, pitch.grid_ny / 2);
        let d = pitch
            .cell_center(pitch.grid_nx - 1, pitch.grid_ny / 2)
            .dist(goal);
        assert!((near - (-DEFAULT_SCORING_ALPHA * d).exp()).abs() < 1e-12);
        // Value at exactly 10 m would be exp(-1.4).
        assert!(((-DEFAULT_SCORING_ALPHA * 10.0_f64).exp() - 0.2466).abs() < 1e-4);
        // Monotone nonincreasing along the row toward the goal.
        for ix in 1..pitch.grid_nx {
            assert!(grid.get(ix, pitch.grid_ny / 2) >= grid.get(ix - 1, pitch.grid_ny / 2));
        }
    }

    #[test]
    fn er_metric_examples() {
        let pitch = PitchSpec::default();
        let mut a = PitchGrid::zeros(&pitch);
        let b = PitchGrid::zeros(&pitch);
        assert_eq!(er_metric(&a, &b).unwrap(), 0.0);
        for v in &mut a.data {
            *v = 0.1;
        }
        assert!((er_metric(&a, &b).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn grid_csv_round_trips() {
        let pitch = PitchSpec {
            grid_nx: 5,
            grid_ny: 3,
            ..PitchSpec::default()
        };
        let mut grid = PitchGrid::zeros(&pitch);
        for (i, v) in grid.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.csv");
        write_grid_csv(&grid, &path).unwrap();
        let back = read_grid_csv(&path).unwrap();
        assert_eq!(grid, back);
    }

    #[test]
    fn colormap_extremes() {
        assert_eq!(heat_color(0.0), [255, 255, 255]);
        assert_eq!(heat_color(1.0), [139, 0, 0]);
    }
}
