//! Rule-based velocity completion baseline.

use serde::{Deserialize, Serialize};

use crate::types::{EventFrame, Vec2};

/// Configurable stand-in for the rule-based baseline: the ball holder takes
/// the ball's velocity, everyone else runs at `speed` straight toward the
/// ball, and players already within `stop_radius` of it stand still.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuleConfig {
    /// m/s assigned to non-holders.
    pub speed: f64,
    /// Players closer to the ball than this stand still (m).
    pub stop_radius: f64,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig {
            speed: 3.0,
            stop_radius: 0.5,
        }
    }
}

/// Completes all 22 player velocities (m/s, pitch coordinates).
pub fn rule_based_velocity(frame: &EventFrame, cfg: &RuleConfig) -> Vec<Vec2> {
    frame
        .players
        .iter()
        .map(|p| {
            if p.flags.ball_holder {
                return frame.ball_vel;
            }
            let to_ball = frame.ball_pos - p.pos;
            let dist = to_ball.norm();
            if dist < cfg.stop_radius {
                Vec2::ZERO
            } else {
                to_ball * (cfg.speed / dist)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{
        AttackDirection, CoordSpace, EventFrame, EventType, PlayerFlags, PlayerState,
        NUM_PLAYERS,
    };

    fn frame_with_player_at(pos: Vec2, holder_idx: Option<usize>) -> EventFrame {
        let players = (0..NUM_PLAYERS)
            .map(|i| PlayerState {
                pos: if i == 7 { pos } else { Vec2::new(-30.0 + i as f64, 10.0) },
                vel: Vec2::ZERO,
                flags: PlayerFlags {
                    teammate: i < 11,
                    ball_holder: holder_idx == Some(i),
                    goalkeeper: i == 0 || i == 11,
                },
            })
            .collect();
        EventFrame {
            match_id: 0,
            half: 1,
            event_index: 0,
            event_type: EventType::Pass,
            t_s: 0.0,
            ball_pos: Vec2::ZERO,
            ball_vel: Vec2::new(4.0, -2.0),
            ball_end: Vec2::new(5.0, 5.0),
            players,
            attack_dir: AttackDirection::LeftToRight,
            coords: CoordSpace::Pitch,
        }
    }

    #[test]
    fn holder_gets_ball_velocity() {
        let frame = frame_with_player_at(Vec2::new(0.2, 0.0), Some(7));
        let v = rule_based_velocity(&frame, &RuleConfig::default());
        assert_eq!(v[7], frame.ball_vel);
    }

    #[test]
    fn player_due_east_runs_west_at_rule_speed() {
        let frame = frame_with_player_at(Vec2::new(10.0, 0.0), None);
        let v = rule_based_velocity(&frame, &RuleConfig::default());
        assert!((v[7].x - (-3.0)).abs() < 1e-12);
        assert!(v[7].y.abs() < 1e-12);
    }

    #[test]
    fn player_on_ball_stands_still() {
        let frame = frame_with_player_at(Vec2::new(0.3, 0.2), None);
        let v = rule_based_velocity(&frame, &RuleConfig::default());
        assert_eq!(v[7], Vec2::ZERO);
    }
}
