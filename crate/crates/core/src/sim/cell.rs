use serde::{Deserialize, Serialize};

/// Kinematic state of the robot cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellState {
    pub robot: [f64; 2],
    pub battery: f64,
    pub human: [f64; 2],
    #[serde(default)]
    pub time: f64,
}

/// Forward-Euler step of the single-integrator robot. The battery drains
/// linearly and is clamped to `[0, 1]`; the human is left to the caller.
pub fn step_plant(state: &CellState, u: [f64; 2], dt: f64, drain: f64) -> CellState {
    debug_assert!(dt > 0.0);
    CellState {
        robot: [state.robot[0] + u[0] * dt, state.robot[1] + u[1] * dt],
        battery: (state.battery - drain * dt).clamp(0.0, 1.0),
        human: state.human,
        time: state.time + dt,
    }
}

/// A point on the human's path, reached at `speed` m/s from the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub position: [f64; 2],
    pub speed: f64,
}

/// Position along a piecewise-linear path at time `t`. The first waypoint is
/// the start (its speed is ignored). A zero-speed leg is never left; after the
/// last waypoint the human stays put.
pub fn human_position(waypoints: &[Waypoint], t: f64) -> [f64; 2] {
    let Some(first) = waypoints.first() else {
        panic!("human_position needs at least one waypoint");
    };
    let mut at = first.position;
    let mut remaining = t.max(0.0);
    for w in &waypoints[1..] {
        let (dx, dy) = (w.position[0] - at[0], w.position[1] - at[1]);
        let length = dx.hypot(dy);
        if length == 0.0 {
            continue;
        }
        if w.speed <= 0.0 {
            return at;
        }
        let leg = length / w.speed;
        if remaining < leg {
            let f = remaining / leg;
            return [at[0] + f * dx, at[1] + f * dy];
        }
        remaining -= leg;
        at = w.position;
    }
    at
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(robot: [f64; 2], battery: f64) -> CellState {
        CellState { robot, battery, human: [5.0, 5.0], time: 0.0 }
    }

    #[test]
    fn euler_step() {
        let s = step_plant(&state([0.0, 0.0], 1.0), [1.0, 0.0], 0.1, 0.0);
        assert_eq!(s.robot, [0.1, 0.0]);
        assert_eq!(s.time, 0.1);
        assert_eq!(s.human, [5.0, 5.0]);
    }

    #[test]
    fn battery_drains_and_clamps() {
        let s = step_plant(&state([0.0, 0.0], 1.0), [0.0, 0.0], 0.1, 0.01);
        assert!((s.battery - 0.999).abs() < 1e-15);
        let s = step_plant(&state([0.0, 0.0], 0.0005), [0.0, 0.0], 0.1, 0.01);
        assert_eq!(s.battery, 0.0);
    }

    fn wp(x: f64, y: f64, speed: f64) -> Waypoint {
        Waypoint { position: [x, y], speed }
    }

    #[test]
    fn walks_and_holds() {
        let path = [wp(0.0, 0.0, 0.0), wp(10.0, 0.0, 1.0)];
        assert_eq!(human_position(&path, 3.0), [3.0, 0.0]);
        assert_eq!(human_position(&path, 10.0), [10.0, 0.0]);
        assert_eq!(human_position(&path, 50.0), [10.0, 0.0]);
        assert_eq!(human_position(&[wp(2.0, -1.0, 3.0)], 7.5), [2.0, -1.0]);
    }

    #[test]
    fn legs_use_their_own_speed() {
        let path = [wp(0.0, 0.0, 0.0), wp(2.0, 0.0, 2.0), wp(2.0, 3.0, 0.5)];
        assert_eq!(human_position(&path, 0.5), [1.0, 0.0]);
        assert_eq!(human_position(&path, 3.0), [2.0, 1.0]);
        let stuck = [wp(0.0, 0.0, 0.0), wp(1.0, 0.0, 0.0), wp(5.0, 0.0, 1.0)];
        assert_eq!(human_position(&stuck, 100.0), [0.0, 0.0]);
    }
}
