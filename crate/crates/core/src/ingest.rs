//! Parses tracking and event files, computes ground-truth velocities by
//! finite differences, joins the two streams at event frames, and emits the
//! frame and window datasets with train/val/test splits.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{SynthManifest, FRAME_DT};
use crate::types::{
    attacking_third_test, AttackDirection, EventFrame, EventType, EventWindow, PitchSpec,
    PlayerFlags, PlayerState, Split, Vec2, NUM_PLAYERS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSpec {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn of_match(&self, match_pos: usize) -> Option<Split> {
        if match_pos < self.train {
            Some(Split::Train)
        } else if match_pos < self.train + self.val {
            Some(Split::Val)
        } else if match_pos < self.total() {
            Some(Split::Test)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    /// Window length: events per sequence sample.
    pub k: usize,
    /// Maximum |event time - tracking frame time| for a join (s).
    pub join_tolerance_s: f64,
    /// Ball-holder search radius (m).
    pub holder_radius_m: f64,
    /// Half boundary; taken from the synth manifest when absent.
    pub half_seconds: Option<f64>,
    /// Matches per split, in file order.
    pub split: SplitSpec,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            k: 10,
            join_tolerance_s: 0.06,
            holder_radius_m: 3.0,
            half_seconds: None,
            split: SplitSpec {
                train: 8,
                val: 2,
                test: 2,
            },
        }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.join_tolerance_s <= 0.0 || self.holder_radius_m <= 0.0 {
            return Err(Error::Config("ingest tolerances must be positive".into()));
        }
        if self.split.train == 0 || self.split.val == 0 || self.split.test == 0 {
            return Err(Error::Config("every split needs at least one match".into()));
        }
        Ok(())
    }
}

/// One 25 Hz frame in canonical entity order (ball, then the fixed player
/// roster). Missing coordinates are `None`.
#[derive(Debug, Clone)]
pub struct TrackingRecord {
    pub frame_no: u64,
    pub t: f64,
    pub ball: Option<Vec2>,
    pub players: Vec<Option<Vec2>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RosterEntry {
    pub id: String,
    pub team: String,
}

#[derive(Debug, Clone)]
pub struct RawEvent {
    pub t: f64,
    pub type_code: String,
    pub possessing_team: String,
    pub x_start: Option<Vec2>,
    pub x_end: Option<Vec2>,
}

#[derive(Debug, Clone)]
pub struct MatchData {
    pub match_id: u32,
    pub roster: Vec<RosterEntry>,
    pub tracking: Vec<TrackingRecord>,
    pub events: Vec<RawEvent>,
}

/// Why events were dropped during the join.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounters {
    pub no_tracking_frame: usize,
    pub missing_ball_position: usize,
    pub missing_ball_velocity: usize,
    pub missing_ball_end: usize,
    pub incomplete_players: usize,
}

impl DropCounters {
    pub fn total(&self) -> usize {
        self.no_tracking_frame
            + self.missing_ball_position
            + self.missing_ball_velocity
            + self.missing_ball_end
            + self.incomplete_players
    }

    fn absorb(&mut self, other: &DropCounters) {
        self.no_tracking_frame += other.no_tracking_frame;
        self.missing_ball_position += other.missing_ball_position;
        self.missing_ball_velocity += other.missing_ball_velocity;
        self.missing_ball_end += other.missing_ball_end;
        self.incomplete_players += other.incomplete_players;
    }
}

fn parse_coord(field: &str) -> Option<f64> {
    if field.is_empty() {
        return None;
    }
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Some(v),
        _ => None,
    }
}

/// Reads a tracking CSV (`frame,t,entity_id,team,x,y`, one row per entity
/// per frame; the ball has entity_id "ball").
pub fn read_tracking_csv(path: &Path) -> Result<(Vec<RosterEntry>, Vec<TrackingRecord>)> {
    let mut reader = csv::Reader::from_path(path)?;
    // (frame_no, t) -> per-entity coordinates
    let mut frames: BTreeMap<u64, (f64, Option<Vec2>, BTreeMap<String, Option<Vec2>>)> =
        BTreeMap::new();
    let mut roster_map: BTreeMap<String, String> = BTreeMap::new();
    for row in reader.records() {
        let row = row?;
        if row.len() != 6 {
            return Err(Error::Data(format!(
                "tracking row has {} fields, expected 6",
                row.len()
            )));
        }
        let frame_no: u64 = row[0]
            .parse()
            .map_err(|_| Error::Data(format!("bad frame number {:?}", &row[0])))?;
        let t: f64 = row[1]
            .parse()
            .map_err(|_| Error::Data(format!("bad time {:?}", &row[1])))?;
        let entity = row[2].to_string();
        let team = row[3].to_string();
        let pos = match (parse_coord(&row[4]), parse_coord(&row[5])) {
            (Some(x), Some(y)) => Some(Vec2::new(x, y)),
            _ => None,
        };
        let entry = frames
            .entry(frame_no)
            .or_insert_with(|| (t, None, BTreeMap::new()));
        if entity == "ball" {
            entry.1 = pos;
        } else {
            roster_map.entry(entity.clone()).or_insert(team);
            entry.2.insert(entity, pos);
        }
    }
    let mut roster: Vec<RosterEntry> = roster_map
        .into_iter()
        .map(|(id, team)| RosterEntry { id, team })
        .collect();
    roster.sort_by(|a, b| (&a.team, &a.id).cmp(&(&b.team, &b.id)));
    if roster.len() != NUM_PLAYERS {
        return Err(Error::Data(format!(
            "tracking file has {} players, expected {NUM_PLAYERS}",
            roster.len()
        )));
    }
    let mut records = Vec::with_capacity(frames.len());
    let mut prev_frame: Option<u64> = None;
    for (frame_no, (t, ball, by_id)) in frames {
        if let Some(prev) = prev_frame {
            if frame_no <= prev {
                return Err(Error::Data("tracking frames not strictly increasing".into()));
            }
        }
        prev_frame = Some(frame_no);
        let players = roster
            .iter()
            .map(|r| by_id.get(&r.id).copied().flatten())
            .collect();
        records.push(TrackingRecord {
            frame_no,
            t,
            ball,
            players,
        });
    }
    Ok((roster, records))
}

/// Reads an event CSV (`t,type,possessing_team,x_start,y_start,x_end,y_end`).
pub fn read_events_csv(path: &Path) -> Result<Vec<RawEvent>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut events = Vec::new();
    for row in reader.records() {
        let row = row?;
        if row.len() != 7 {
            return Err(Error::Data(format!(
                "event row has {} fields, expected 7",
                row.len()
            )));
        }
        let t: f64 = row[0]
            .parse()
            .map_err(|_| Error::Data(format!("bad event time {:?}", &row[0])))?;
        let x_start = match (parse_coord(&row[3]), parse_coord(&row[4])) {
            (Some(x), Some(y)) => Some(Vec2::new(x, y)),
            _ => None,
        };
        let x_end = match (parse_coord(&row[5]), parse_coord(&row[6])) {
            (Some(x), Some(y)) => Some(Vec2::new(x, y)),
            _ => None,
        };
        events.push(RawEvent {
            t,
            type_code: row[1].to_string(),
            possessing_team: row[2].to_string(),
            x_start,
            x_end,
        });
    }
    Ok(events)
}

/// Velocities of every entity at one tracking index.
#[derive(Debug, Clone)]
pub struct EntityVelocities {
    pub ball: Option<Vec2>,
    pub players: Vec<Option<Vec2>>,
}

fn entity_pos(track: &[TrackingRecord], idx: usize, entity: Option<usize>) -> Option<Vec2> {
    let rec = track.get(idx)?;
    match entity {
        None => rec.ball,
        Some(j) => rec.players[j],
    }
}

/// Central difference over +-2 frames (v = (x[f+2] - x[f-2]) / 0.16 s).
/// Near stream boundaries it falls back to +-1 central and then to a
/// one-sided difference over up to two 0.04 s steps; with no usable
/// neighbor the entity's velocity is unavailable.
fn diff_one(track: &[TrackingRecord], idx: usize, entity: Option<usize>) -> Option<Vec2> {
    let at = |i: isize| -> Option<Vec2> {
        if i < 0 {
            None
        } else {
            entity_pos(track, i as usize, entity)
        }
    };
    let i = idx as isize;
    let stencils: [(isize, isize); 2] = [(-2, 2), (-1, 1)];
    for (lo, hi) in stencils {
        if let (Some(a), Some(b)) = (at(i + lo), at(i + hi)) {
            let span = (hi - lo) as f64 * FRAME_DT;
            return Some((b - a) * (1.0 / span));
        }
    }
    let center = at(i)?;
    for side in [2isize, 1, -2, -1] {
        if let Some(p) = at(i + side) {
            let span = side as f64 * FRAME_DT;
            return Some((p - center) * (1.0 / span));
        }
    }
    None
}

/// Finite-difference velocities for the ball and every player at `idx`.
/// Errors only when no entity has any usable neighbor.
pub fn finite_diff_velocity(track: &[TrackingRecord], idx: usize) -> Result<EntityVelocities> {
    if idx >= track.len() {
        return Err(Error::Data(format!(
            "finite_diff_velocity: index {idx} out of {} frames",
            track.len()
        )));
    }
    let ball = diff_one(track, idx, None);
    let players: Vec<Option<Vec2>> = (0..track[idx].players.len())
        .map(|j| diff_one(track, idx, Some(j)))
        .collect();
    if ball.is_none() && players.iter().all(Option::is_none) {
        return Err(Error::Data("velocity unavailable".into()));
    }
    Ok(EntityVelocities { ball, players })
}

/// Attack direction of each team, derived per half from mean positions:
/// the team camped nearer the left goal attacks left-to-right.
fn derive_attack_dirs(
    roster: &[RosterEntry],
    track: &[TrackingRecord],
    half_boundary: f64,
) -> BTreeMap<(String, u8), AttackDirection> {
    let mut sums: BTreeMap<(String, u8), (f64, usize)> = BTreeMap::new();
    for rec in track {
        let half = if rec.t < half_boundary { 1 } else { 2 };
        for (j, pos) in rec.players.iter().enumerate() {
            if let Some(p) = pos {
                let key = (roster[j].team.clone(), half);
                let e = sums.entry(key).or_insert((0.0, 0));
                e.0 += p.x;
                e.1 += 1;
            }
        }
    }
    let teams: Vec<String> = {
        let mut t: Vec<String> = roster.iter().map(|r| r.team.clone()).collect();
        t.dedup();
        t.sort();
        t.dedup();
        t
    };
    let mut dirs = BTreeMap::new();
    for half in [1u8, 2] {
        let mean = |team: &str| -> f64 {
            sums.get(&(team.to_string(), half))
                .map(|(s, n)| s / (*n).max(1) as f64)
                .unwrap_or(0.0)
        };
        if teams.len() == 2 {
            let (a, b) = (&teams[0], &teams[1]);
            let (ma, mb) = (mean(a), mean(b));
            let (left, right) = if ma <= mb { (a, b) } else { (b, a) };
            dirs.insert((left.clone(), half), AttackDirection::LeftToRight);
            dirs.insert((right.clone(), half), AttackDirection::RightToLeft);
        }
    }
    dirs
}

/// Joins each raw event to its nearest tracking frame, attaches positions,
/// finite-difference velocities, and derived flags. Returns the surviving
/// frames (with their original event ordinals) and the drop counters.
pub fn join_events(
    m: &MatchData,
    cfg: &IngestConfig,
    half_boundary: f64,
) -> Result<(Vec<EventFrame>, DropCounters)> {
    cfg.validate()?;
    let mut drops = DropCounters::default();
    let mut out = Vec::new();
    let dirs = derive_attack_dirs(&m.roster, &m.tracking, half_boundary);

    for (orig_idx, ev) in m.events.iter().enumerate() {
        // Nearest tracking frame by time.
        let pos = m
            .tracking
            .partition_point(|r| r.t < ev.t);
        let mut best: Option<usize> = None;
        for cand in [pos.wrapping_sub(1), pos] {
            if cand < m.tracking.len() {
                let dt = (m.tracking[cand].t - ev.t).abs();
                if dt <= cfg.join_tolerance_s
                    && best.is_none_or(|b| dt < (m.tracking[b].t - ev.t).abs())
                {
                    best = Some(cand);
                }
            }
        }
        let Some(fidx) = best else {
            drops.no_tracking_frame += 1;
            continue;
        };
        let rec = &m.tracking[fidx];
        let Some(ball_pos) = rec.ball else {
            drops.missing_ball_position += 1;
            continue;
        };
        let vels = match finite_diff_velocity(&m.tracking, fidx) {
            Ok(v) => v,
            Err(_) => {
                drops.missing_ball_velocity += 1;
                continue;
            }
        };
        let Some(ball_vel) = vels.ball else {
            drops.missing_ball_velocity += 1;
            continue;
        };
        let Some(ball_end) = ev.x_end else {
            drops.missing_ball_end += 1;
            continue;
        };
        let mut players = Vec::with_capacity(NUM_PLAYERS);
        let mut complete = true;
        for j in 0..m.roster.len() {
            match (rec.players[j], vels.players[j]) {
                (Some(p), Some(v)) => players.push((p, v)),
                _ => {
                    complete = false;
                    break;
                }
            }
        }
        if !complete || players.len() != NUM_PLAYERS {
            drops.incomplete_players += 1;
            continue;
        }

        let half: u8 = if ev.t < half_boundary { 1 } else { 2 };
        let attack_dir = dirs
            .get(&(ev.possessing_team.clone(), half))
            .copied()
            .unwrap_or(AttackDirection::LeftToRight);

        // Ball holder: nearest possessing-team player within the radius.
        let mut holder: Option<usize> = None;
        let mut holder_d = cfg.holder_radius_m;
        for (j, (p, _)) in players.iter().enumerate() {
            if m.roster[j].team == ev.possessing_team {
                let d = p.dist(ball_pos);
                if d <= holder_d {
                    holder_d = d;
                    holder = Some(j);
                }
            }
        }
        // Goalkeepers: the rearmost player of each team, toward their own
        // goal under the derived attack direction.
        let mut keepers: Vec<usize> = Vec::with_capacity(2);
        let team_names: Vec<String> = {
            let mut t: Vec<String> = m.roster.iter().map(|r| r.team.clone()).collect();
            t.sort();
            t.dedup();
            t
        };
        for team in &team_names {
            let dir = dirs
                .get(&(team.clone(), half))
                .copied()
                .unwrap_or(AttackDirection::LeftToRight);
            let sign = match dir {
                AttackDirection::LeftToRight => 1.0,
                AttackDirection::RightToLeft => -1.0,
            };
            let mut rear = None;
            let mut rear_x = f64::INFINITY;
            for (j, (p, _)) in players.iter().enumerate() {
                if &m.roster[j].team == team {
                    let own_goal_ward = sign * p.x;
                    if own_goal_ward < rear_x {
                        rear_x = own_goal_ward;
                        rear = Some(j);
                    }
                }
            }
            if let Some(j) = rear {
                keepers.push(j);
            }
        }

        let players = players
            .into_iter()
            .enumerate()
            .map(|(j, (p, v))| PlayerState {
                pos: p,
                vel: v,
                flags: PlayerFlags {
                    teammate: m.roster[j].team == ev.possessing_team,
                    ball_holder: holder == Some(j),
                    goalkeeper: keepers.contains(&j),
                },
            })
            .collect();

        out.push(EventFrame {
            match_id: m.match_id,
            half,
            event_index: orig_idx as u32,
            event_type: EventType::from_code(&ev.type_code),
            t_s: ev.t,
            ball_pos,
            ball_vel,
            ball_end,
            players,
            attack_dir,
            coords: crate::types::CoordSpace::Pitch,
        });
    }
    Ok((out, drops))
}

/// The frame dataset, the window dataset, and their per-split samples.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub frames: BTreeMap<Split, Vec<EventFrame>>,
    pub windows: BTreeMap<Split, Vec<EventWindow>>,
}

impl Corpus {
    pub fn frames_of(&self, split: Split) -> &[EventFrame] {
        self.frames.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn windows_of(&self, split: Split) -> &[EventWindow] {
        self.windows.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestManifest {
    pub config_hash: String,
    pub k: usize,
    pub split: SplitSpec,
    pub n_matches: usize,
    pub counts: BTreeMap<String, usize>,
    pub drops: DropCounters,
}

/// Builds both datasets from joined frames grouped by match (in match
/// order). The frame dataset keeps every attacking-third event; the window
/// dataset keeps targets whose k-event history is complete within one half.
/// Test splits are aligned: the frame test set is restricted to the window
/// targets so both score identical events.
pub fn build_datasets(
    frames_by_match: &[Vec<EventFrame>],
    k: usize,
    split: &SplitSpec,
    pitch: &PitchSpec,
) -> Result<Corpus> {
    if k < 1 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if frames_by_match.len() < split.total() {
        return Err(Error::Config(format!(
            "split needs {} matches but only {} are available",
            split.total(),
            frames_by_match.len()
        )));
    }
    let mut corpus = Corpus::default();
    for s in Split::ALL {
        corpus.frames.insert(s, Vec::new());
        corpus.windows.insert(s, Vec::new());
    }

    for (pos, match_frames) in frames_by_match.iter().enumerate() {
        let Some(split_id) = split.of_match(pos) else {
            continue;
        };
        // Index by original event ordinal for history lookups.
        let by_index: BTreeMap<u32, &EventFrame> =
            match_frames.iter().map(|f| (f.event_index, f)).collect();

        let targets: Vec<&EventFrame> = match_frames
            .iter()
            .filter(|f| attacking_third_test(f, pitch))
            .collect();

        let mut windows = Vec::new();
        for target in &targets {
            let mut frames = Vec::with_capacity(k);
            let mut ok = true;
            for back in (0..k).rev() {
                let Some(idx) = target.event_index.checked_sub(back as u32) else {
                    ok = false;
                    break;
                };
                match by_index.get(&idx) {
                    Some(f) if f.half == target.half => frames.push((*f).clone()),
                    _ => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                windows.push(EventWindow::new(frames, pitch)?);
            }
        }

        let d_frames: Vec<EventFrame> = if split_id == Split::Test {
            // Align the test sets: only window targets.
            windows.iter().map(|w| w.target().clone()).collect()
        } else {
            targets.into_iter().cloned().collect()
        };

        corpus
            .frames
            .get_mut(&split_id)
            .expect("initialized")
            .extend(d_frames);
        corpus
            .windows
            .get_mut(&split_id)
            .expect("initialized")
            .extend(windows);
    }
    Ok(corpus)
}

/// Discovers `match_*_tracking.csv` / `match_*_events.csv` pairs in a
/// directory (sorted), joins them, and builds the datasets. The half
/// boundary comes from `cfg.half_seconds` or the synth manifest.
pub fn ingest_dir(
    data_dir: &Path,
    cfg: &IngestConfig,
    pitch: &PitchSpec,
) -> Result<(Corpus, IngestManifest)> {
    cfg.validate()?;
    let half_boundary = match cfg.half_seconds {
        Some(h) => h,
        None => {
            let manifest_path = data_dir.join("synth_manifest.json");
            let file = std::fs::File::open(&manifest_path).map_err(|_| {
                Error::Config(
                    "half_seconds not set and no synth_manifest.json in data dir".into(),
                )
            })?;
            let manifest: SynthManifest = serde_json::from_reader(file)?;
            manifest.config.match_seconds / 2.0
        }
    };

    let mut tracking_files: Vec<std::path::PathBuf> = std::fs::read_dir(data_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("match_") && n.ends_with("_tracking.csv"))
        })
        .collect();
    tracking_files.sort();
    if tracking_files.is_empty() {
        return Err(Error::Data(format!(
            "no match_*_tracking.csv files in {}",
            data_dir.display()
        )));
    }

    let mut frames_by_match = Vec::new();
    let mut drops = DropCounters::default();
    for (match_id, tpath) in tracking_files.iter().enumerate() {
        let epath = std::path::PathBuf::from(
            tpath
                .to_str()
                .expect("utf8 path")
                .replace("_tracking.csv", "_events.csv"),
        );
        let (roster, tracking) = read_tracking_csv(tpath)?;
        let events = read_events_csv(&epath)?;
        let m = MatchData {
            match_id: match_id as u32,
            roster,
            tracking,
            events,
        };
        let (frames, d) = join_events(&m, cfg, half_boundary)?;
        drops.absorb(&d);
        frames_by_match.push(frames);
    }

    let corpus = build_datasets(&frames_by_match, cfg.k, &cfg.split, pitch)?;
    let mut counts = BTreeMap::new();
    for s in Split::ALL {
        counts.insert(format!("d_{}", s.name()), corpus.frames_of(s).len());
        counts.insert(format!("dstar_{}", s.name()), corpus.windows_of(s).len());
    }
    let manifest = IngestManifest {
        config_hash: String::new(),
        k: cfg.k,
        split: cfg.split,
        n_matches: frames_by_match.len(),
        counts,
        drops,
    };
    Ok((corpus, manifest))
}

/// Writes one JSON-lines file per (kind, split) plus `ingest_manifest.json`.
pub fn write_corpus(out_dir: &Path, corpus: &Corpus, manifest: &IngestManifest) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    for s in Split::ALL {
        write_jsonl(
            &out_dir.join(format!("d_{}.jsonl", s.name())),
            corpus.frames_of(s),
        )?;
        write_jsonl(
            &out_dir.join(format!("dstar_{}.jsonl", s.name())),
            corpus.windows_of(s),
        )?;
    }
    let f = std::fs::File::create(out_dir.join("ingest_manifest.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), manifest)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    use std::io::BufRead;
    let f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
        Error::Data(format!("cannot open {}: {e}", path.display()))
    })?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Reads a corpus written by [`write_corpus`].
pub fn read_corpus(dir: &Path) -> Result<(Corpus, IngestManifest)> {
    let mut corpus = Corpus::default();
    for s in Split::ALL {
        corpus.frames.insert(
            s,
            read_jsonl(&dir.join(format!("d_{}.jsonl", s.name())))?,
        );
        corpus.windows.insert(
            s,
            read_jsonl(&dir.join(format!("dstar_{}.jsonl", s.name())))?,
        );
    }
    let f = std::fs::File::open(dir.join("ingest_manifest.json"))
        .map_err(|e| Error::Data(format!("missing ingest manifest: {e}")))?;
    let manifest = serde_json::from_reader(f)?;
    Ok((corpus, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track_from(f: impl Fn(f64) -> Vec2, n: usize) -> Vec<TrackingRecord> {
        (0..n)
            .map(|i| {
                let t = i as f64 * FRAME_DT;
                TrackingRecord {
                    frame_no: i as u64,
                    t,
                    ball: Some(f(t)),
                    players: vec![Some(f(t)); 2],
                }
            })
            .collect()
    }

    #[test]
    fn central_difference_on_stationary_and_linear() {
        let still = track_from(|_| Vec2::new(3.0, -1.0), 9);
        let v = finite_diff_velocity(&still, 4).unwrap();
        assert_eq!(v.ball.unwrap(), Vec2::ZERO);

        let linear = track_from(|t| Vec2::new(2.0 * t, -t), 9);
        let v = finite_diff_velocity(&linear, 4).unwrap();
        assert!(v.ball.unwrap().dist(Vec2::new(2.0, -1.0)) < 1e-12);
    }

    #[test]
    fn central_difference_on_quadratic() {
        // x(t) = t^2: central difference at t = 1 s is exact to O(dt^2).
        let quad = track_from(|t| Vec2::new(t * t, 0.0), 60);
        let idx = 25; // t = 1.0
        let v = finite_diff_velocity(&quad, idx).unwrap();
        assert!((v.ball.unwrap().x - 2.0).abs() < 1e-3);
    }

    #[test]
    fn boundary_frames_fall_back() {
        let linear = track_from(|t| Vec2::new(5.0 * t, 0.0), 6);
        // Frame 0 has no left neighbors: one-sided still sees the slope.
        let v = finite_diff_velocity(&linear, 0).unwrap();
        assert!((v.ball.unwrap().x - 5.0).abs() < 1e-9);
        // Frame 1 uses the +-1 central stencil.
        let v = finite_diff_velocity(&linear, 1).unwrap();
        assert!((v.ball.unwrap().x - 5.0).abs() < 1e-9);
    }

    #[test]
    fn all_missing_is_an_error() {
        let mut track = track_from(|t| Vec2::new(t, 0.0), 5);
        for r in &mut track {
            r.ball = None;
            r.players = vec![None, None];
        }
        assert!(finite_diff_velocity(&track, 2).is_err());
    }
}
