//! Actions available to trees run in the simulated cell.

use serde_json::Value;

use super::scenario::Channels;
use crate::bt::{Leaf, LeafError, NodeStatus, TickContext, TreeNode};

/// Leaf keys of the built-in actions.
pub const SIM_ACTIONS: [&str; 5] = ["go_to_goal", "retreat", "dock", "chase_human", "stop"];

fn number(node: &TreeNode, key: &str, default: f64) -> Result<f64, String> {
    match node.param(key) {
        None => Ok(default),
        Some(v) => {
            v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| format!("parameter `{key}` must be a finite number"))
        }
    }
}

fn point(node: &TreeNode, key: &str, default: [f64; 2]) -> Result<[f64; 2], String> {
    match node.param(key) {
        None => Ok(default),
        Some(Value::Array(a)) if a.len() == 2 => {
            let x = a[0].as_f64();
            let y = a[1].as_f64();
            match (x, y) {
                (Some(x), Some(y)) if x.is_finite() && y.is_finite() => Ok([x, y]),
                _ => Err(format!("parameter `{key}` must be two finite numbers")),
            }
        }
        Some(_) => Err(format!("parameter `{key}` must be a 2-element array")),
    }
}

fn read2(ctx: &TickContext<'_>, channel: &str) -> Result<[f64; 2], LeafError> {
    let s = ctx.blackboard().read(channel).ok_or_else(|| LeafError::new(format!("channel `{channel}` has no data")))?;
    match s.value[..] {
        [x, y, ..] => Ok([x, y]),
        _ => Err(LeafError::new(format!("channel `{channel}` is not a 2-vector"))),
    }
}

/// Velocity of magnitude at most `speed` toward `target`, without
/// overshooting it within one step of `dt`.
fn toward(from: [f64; 2], target: [f64; 2], speed: f64, dt: f64) -> ([f64; 2], f64) {
    let (dx, dy) = (target[0] - from[0], target[1] - from[1]);
    let d = dx.hypot(dy);
    if d == 0.0 {
        return ([0.0, 0.0], 0.0);
    }
    let v = speed.min(d / dt);
    ([v * dx / d, v * dy / d], d)
}

/// Build the action for `node`, whose leaf key is `key`.
pub fn build_action(
    key: &str,
    node: &TreeNode,
    channels: &Channels,
    goal: [f64; 2],
    dt: f64,
) -> Result<Box<dyn Leaf>, String> {
    let robot = channels.robot_pos.clone();
    let human = channels.human_pos.clone();
    let speed = number(node, "speed", 1.0)?;
    if speed < 0.0 {
        return Err("parameter `speed` must be non-negative".into());
    }
    let leaf: Box<dyn Leaf> = match key {
        "go_to_goal" => {
            let goal = point(node, "goal", goal)?;
            let tolerance = number(node, "tolerance", 0.05)?;
            Box::new(move |ctx: &mut TickContext<'_>| {
                let (u, d) = toward(read2(ctx, &robot)?, goal, speed, dt);
                if d <= tolerance {
                    ctx.set_command(vec![0.0, 0.0]);
                    return Ok(NodeStatus::Success);
                }
                ctx.set_command(u.to_vec());
                Ok(NodeStatus::Running)
            })
        }
        "dock" => {
            let station = point(node, "station", [0.0, 0.0])?;
            Box::new(move |ctx: &mut TickContext<'_>| {
                let (u, _) = toward(read2(ctx, &robot)?, station, speed, dt);
                ctx.set_command(u.to_vec());
                Ok(NodeStatus::Running)
            })
        }
        "retreat" => Box::new(move |ctx: &mut TickContext<'_>| {
            let r = read2(ctx, &robot)?;
            let h = read2(ctx, &human)?;
            let (dx, dy) = (r[0] - h[0], r[1] - h[1]);
            let d = dx.hypot(dy);
            let u = if d == 0.0 { [speed, 0.0] } else { [speed * dx / d, speed * dy / d] };
            ctx.set_command(u.to_vec());
            Ok(NodeStatus::Running)
        }),
        "chase_human" => Box::new(move |ctx: &mut TickContext<'_>| {
            let (u, _) = toward(read2(ctx, &robot)?, read2(ctx, &human)?, speed, dt);
            ctx.set_command(u.to_vec());
            Ok(NodeStatus::Running)
        }),
        "stop" => Box::new(|ctx: &mut TickContext<'_>| {
            ctx.set_command(vec![0.0, 0.0]);
            Ok(NodeStatus::Success)
        }),
        other => return Err(format!("unknown simulator action `{other}`")),
    };
    Ok(leaf)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::bt::{Blackboard, NodeKind};

    fn run(key: &str, params: &[(&str, Value)], robot: [f64; 2], human: [f64; 2]) -> (NodeStatus, Vec<f64>) {
        let params: BTreeMap<String, Value> = params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        let node = TreeNode::leaf(NodeKind::Action, key, params).unwrap();
        let mut leaf = build_action(key, &node, &Channels::default(), [10.0, 0.0], 0.1).unwrap();
        let bb = Blackboard::new();
        bb.publish("robot/pos", 0.0, robot.to_vec()).unwrap();
        bb.publish("human/pos", 0.0, human.to_vec()).unwrap();
        let mut ctx = TickContext::new(&bb);
        let s = leaf.tick(&mut ctx).unwrap();
        (s, ctx.take_command().unwrap())
    }

    #[test]
    fn go_to_goal_heads_for_the_goal_and_stops_there() {
        assert_eq!(run("go_to_goal", &[], [0.0, 0.0], [5.0, 5.0]), (NodeStatus::Running, vec![1.0, 0.0]));
        assert_eq!(run("go_to_goal", &[], [10.0, 0.01], [5.0, 5.0]).0, NodeStatus::Success);
        let (_, u) = run("go_to_goal", &[("speed", 2.0.into())], [9.9, 0.0], [5.0, 5.0]);
        assert!((u[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn retreat_and_chase_are_opposite() {
        let (_, away) = run("retreat", &[], [0.0, 0.0], [3.0, 4.0]);
        let (_, at) = run("chase_human", &[], [0.0, 0.0], [3.0, 4.0]);
        assert!((away[0] + 0.6).abs() < 1e-12 && (away[1] + 0.8).abs() < 1e-12);
        assert!((at[0] - 0.6).abs() < 1e-12 && (at[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn bad_params_are_rejected() {
        let node =
            TreeNode::leaf(NodeKind::Action, "g", BTreeMap::from([("goal".to_owned(), Value::from("home"))])).unwrap();
        assert!(build_action("go_to_goal", &node, &Channels::default(), [0.0, 0.0], 0.1).is_err());
        assert!(build_action("fly", &node, &Channels::default(), [0.0, 0.0], 0.1).is_err());
    }
}
