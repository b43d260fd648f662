//! Frame featurization shared by every learned architecture.
//!
//! Frames are normalized (attack left-to-right, positions in [-1, 1]) before
//! featurization, so models always see one canonical orientation.
//!
//! Flat layout (MLP/VAE/RNN/VRNN), width 2 + 2*bv + 22*5 where bv is 1 when
//! the ball velocity input is enabled:
//!   [ball_x, ball_y, (ball_vx, ball_vy,) p0_x, p0_y, p0_teammate,
//!    p0_holder, p0_gk, p1_x, ...]
//!
//! Node layout (graph archs), node 0 = ball then the 22 players, width
//! 7 + 2*bv:
//!   [x, y, (vx, vy,) is_ball, is_player, is_holder, is_gk, attack_dir]
//! The attack-direction entry is +1 for players on the possessing team,
//! -1 for opponents, 0 for the ball. Player velocity slots are zero; the
//! velocity slots carry the ball velocity on the ball node only.

use std::rc::Rc;

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::types::{normalize_frame, EventFrame, EventType, PitchSpec, Vec2, NUM_PLAYERS};

/// Nodes in the interaction graph: ball + 22 players.
pub const NUM_NODES: usize = NUM_PLAYERS + 1;
/// Directed edges of the complete graph without self-loops.
pub const NUM_EDGES: usize = NUM_NODES * (NUM_PLAYERS);
/// Flattened prediction width: 22 players x 2 velocity components.
pub const TARGET_WIDTH: usize = NUM_PLAYERS * 2;
/// Node flag columns fed to the edge-to-node block.
pub const NODE_FLAG_WIDTH: usize = 5;
/// Edge flag columns: same team, source is ball holder.
pub const EDGE_FLAG_WIDTH: usize = 2;

/// Per-frame model inputs, all in normalized units.
#[derive(Debug, Clone)]
pub struct FrameFeatures {
    /// [1, flat_width]
    pub flat: Tensor,
    /// [23, node_width]
    pub nodes: Tensor,
    /// [23, 5]
    pub node_flags: Tensor,
    /// [506, 2]
    pub edge_flags: Tensor,
    /// [1, 6] one-hot event type
    pub event_onehot: Tensor,
    /// [1, 2] normalized ball end position
    pub ball_end: Tensor,
    /// [1, 44] normalized player velocities (the prediction target)
    pub target_vel: Tensor,
}

pub fn flat_width(use_ball_vel: bool) -> usize {
    2 + if use_ball_vel { 2 } else { 0 } + NUM_PLAYERS * 5
}

pub fn node_width(use_ball_vel: bool) -> usize {
    7 + if use_ball_vel { 2 } else { 0 }
}

/// Velocity features and targets are expressed in units of this speed
/// (m/s). Positions use the pitch normalization; velocities use one
/// isotropic scale so both components weigh equally in the squared loss.
pub const VELOCITY_SCALE: f64 = 10.0;

/// Fixed edge enumeration of the complete directed graph and the scaling
/// used to turn physical velocities into normalized model targets.
pub struct GraphLayout {
    pub edge_src: Rc<Vec<usize>>,
    pub edge_dst: Rc<Vec<usize>>,
}

impl GraphLayout {
    /// Edges in lexicographic (src, dst) order, self-loops excluded. Node
    /// `n` is the destination of exactly 22 incoming edges.
    pub fn new() -> GraphLayout {
        let mut src = Vec::with_capacity(NUM_EDGES);
        let mut dst = Vec::with_capacity(NUM_EDGES);
        for s in 0..NUM_NODES {
            for d in 0..NUM_NODES {
                if s != d {
                    src.push(s);
                    dst.push(d);
                }
            }
        }
        GraphLayout {
            edge_src: Rc::new(src),
            edge_dst: Rc::new(dst),
        }
    }
}

impl Default for GraphLayout {
    fn default() -> Self {
        GraphLayout::new()
    }
}

/// Converts a model-space velocity (canonical left-to-right orientation,
/// [`VELOCITY_SCALE`] units) back to m/s in the frame's original attack
/// direction.
pub fn velocity_to_physical(v: Vec2, original_dir: crate::types::AttackDirection) -> Vec2 {
    let sign = match original_dir {
        crate::types::AttackDirection::LeftToRight => 1.0,
        crate::types::AttackDirection::RightToLeft => -1.0,
    };
    v * (VELOCITY_SCALE * sign)
}

pub fn featurize(frame: &EventFrame, pitch: &PitchSpec, use_ball_vel: bool) -> Result<FrameFeatures> {
    let f = normalize_frame(frame, pitch)?;
    let bv = use_ball_vel;
    // Undo the per-axis position scaling on velocities; keep the
    // reflection so everything lives in the canonical orientation.
    let vel_scale = |v: Vec2| {
        Vec2::new(
            v.x * pitch.half_length() / VELOCITY_SCALE,
            v.y * pitch.half_width() / VELOCITY_SCALE,
        )
    };
    let ball_vel = vel_scale(f.ball_vel);

    let mut flat = Vec::with_capacity(flat_width(bv));
    flat.push(f.ball_pos.x);
    flat.push(f.ball_pos.y);
    if bv {
        flat.push(ball_vel.x);
        flat.push(ball_vel.y);
    }
    for p in &f.players {
        flat.push(p.pos.x);
        flat.push(p.pos.y);
        flat.push(if p.flags.teammate { 1.0 } else { -1.0 });
        flat.push(if p.flags.ball_holder { 1.0 } else { 0.0 });
        flat.push(if p.flags.goalkeeper { 1.0 } else { 0.0 });
    }
    let flat = Tensor::from_vec(1, flat_width(bv), flat)?;

    let nw = node_width(bv);
    let mut nodes = Tensor::zeros(NUM_NODES, nw);
    let mut node_flags = Tensor::zeros(NUM_NODES, NODE_FLAG_WIDTH);
    {
        let row = nodes.row_mut(0);
        row[0] = f.ball_pos.x;
        row[1] = f.ball_pos.y;
        let mut c = 2;
        if bv {
            row[c] = ball_vel.x;
            row[c + 1] = ball_vel.y;
            c += 2;
        }
        row[c] = 1.0; // is_ball
    }
    node_flags.set(0, 0, 1.0);
    for (j, p) in f.players.iter().enumerate() {
        let dir = if p.flags.teammate { 1.0 } else { -1.0 };
        let holder = if p.flags.ball_holder { 1.0 } else { 0.0 };
        let gk = if p.flags.goalkeeper { 1.0 } else { 0.0 };
        let row = nodes.row_mut(1 + j);
        row[0] = p.pos.x;
        row[1] = p.pos.y;
        let c = if bv { 4 } else { 2 };
        row[c + 1] = 1.0; // is_player
        row[c + 2] = holder;
        row[c + 3] = gk;
        row[c + 4] = dir;
        let flags = node_flags.row_mut(1 + j);
        flags[1] = 1.0;
        flags[2] = holder;
        flags[3] = gk;
        flags[4] = dir;
    }

    let layout = GraphLayout::new();
    let mut edge_flags = Tensor::zeros(NUM_EDGES, EDGE_FLAG_WIDTH);
    for e in 0..NUM_EDGES {
        let (s, d) = (layout.edge_src[e], layout.edge_dst[e]);
        let same_team = s > 0
            && d > 0
            && f.players[s - 1].flags.teammate == f.players[d - 1].flags.teammate;
        let src_holder = s > 0 && f.players[s - 1].flags.ball_holder;
        edge_flags.set(e, 0, if same_team { 1.0 } else { 0.0 });
        edge_flags.set(e, 1, if src_holder { 1.0 } else { 0.0 });
    }

    let mut onehot = Tensor::zeros(1, EventType::COUNT);
    onehot.set(0, frame.event_type.index(), 1.0);

    let ball_end = Tensor::from_vec(1, 2, vec![f.ball_end.x, f.ball_end.y])?;

    let mut target = Vec::with_capacity(TARGET_WIDTH);
    for p in &f.players {
        let v = vel_scale(p.vel);
        target.push(v.x);
        target.push(v.y);
    }
    let target_vel = Tensor::from_vec(1, TARGET_WIDTH, target)?;

    Ok(FrameFeatures {
        flat,
        nodes,
        node_flags,
        edge_flags,
        event_onehot: onehot,
        ball_end,
        target_vel,
    })
}
