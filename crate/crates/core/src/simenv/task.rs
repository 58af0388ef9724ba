use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::scene::{dist, Color, Scene, MAX_SPEED};

/// Number of task-token embeddings the policy reserves.
pub const N_TASK_TOKENS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "color")]
pub enum TaskKind {
    /// Bring the gripper within threshold of the object.
    Reach(Color),
    /// Drag the object to the goal with an open gripper.
    Push(Color),
    /// Grasp the object, carry it to the goal, and release it there.
    PickPlace(Color),
    /// Close the gripper on the object and hold for three steps. A loose
    /// planar stand-in for pressing a button hard.
    PressHold(Color),
}

impl TaskKind {
    pub fn color(self) -> Color {
        match self {
            TaskKind::Reach(c)
            | TaskKind::Push(c)
            | TaskKind::PickPlace(c)
            | TaskKind::PressHold(c) => c,
        }
    }

    pub fn needs_goal(self) -> bool {
        matches!(self, TaskKind::Push(_) | TaskKind::PickPlace(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub horizon: usize,
    /// Success distance in workspace units; also the grasp radius.
    pub threshold: f64,
    pub task_token: usize,
}

pub const PRESS_HOLD_STEPS: usize = 3;

impl TaskSpec {
    pub fn new(kind: TaskKind, task_token: usize) -> Result<Self> {
        let t = TaskSpec {
            kind,
            horizon: 40,
            threshold: 0.05,
            task_token,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) || self.horizon < 10 || self.task_token >= N_TASK_TOKENS {
            return Err(Error::Contract(format!("invalid task spec {self:?}")));
        }
        Ok(())
    }

    /// Named desk tasks, each with a fixed task token.
    pub fn preset(name: &str) -> Result<Self> {
        let (kind, token) = match name {
            "reach-red" => (TaskKind::Reach(Color::Red), 0),
            "push-blue" => (TaskKind::Push(Color::Blue), 1),
            "pick-place-green" => (TaskKind::PickPlace(Color::Green), 2),
            "reach-blue" => (TaskKind::Reach(Color::Blue), 3),
            "push-green" => (TaskKind::Push(Color::Green), 4),
            "press-red" => (TaskKind::PressHold(Color::Red), 5),
            "pick-place-red" => (TaskKind::PickPlace(Color::Red), 6),
            other => return Err(Error::Config(format!("unknown task preset {other:?}"))),
        };
        TaskSpec::new(kind, token)
    }

    pub const PRESETS: [&'static str; 7] = [
        "reach-red",
        "push-blue",
        "pick-place-green",
        "reach-blue",
        "push-green",
        "press-red",
        "pick-place-red",
    ];

    pub fn name(&self) -> String {
        let verb = match self.kind {
            TaskKind::Reach(_) => "reach",
            TaskKind::Push(_) => "push",
            TaskKind::PickPlace(_) => "pick-place",
            TaskKind::PressHold(_) => "press",
        };
        format!("{verb}-{}", self.kind.color().name())
    }

    /// Success predicate on the current scene. Depends only on positions and
    /// gripper state, never on brightness or shape.
    pub fn is_success(&self, scene: &Scene) -> bool {
        let Some((idx, obj)) = scene.object(self.kind.color()) else {
            return false;
        };
        match self.kind {
            TaskKind::Reach(_) => dist(scene.gripper.pos, obj.pos) < self.threshold,
            TaskKind::Push(_) => scene
                .goal
                .is_some_and(|g| dist(obj.pos, g) < self.threshold),
            TaskKind::PickPlace(_) => {
                scene
                    .goal
                    .is_some_and(|g| dist(obj.pos, g) < self.threshold)
                    && obj.grasped
                    && scene.held != Some(idx)
                    && scene.gripper.open > 0.0
            }
            TaskKind::PressHold(_) => scene.press_steps >= PRESS_HOLD_STEPS,
        }
    }

    /// Per-step bookkeeping that the success predicate reads.
    pub(crate) fn after_step(&self, scene: &mut Scene) {
        if let TaskKind::PressHold(c) = self.kind {
            let on_target = scene
                .object(c)
                .is_some_and(|(_, o)| dist(scene.gripper.pos, o.pos) < self.threshold);
            if on_target && scene.gripper.open == 0.0 {
                scene.press_steps += 1;
            } else {
                scene.press_steps = 0;
            }
        }
    }
}

impl FromStr for TaskSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskSpec::preset(s)
    }
}

/// Proportional velocity command toward `target`, saturating at full speed.
fn toward(from: [f64; 2], target: [f64; 2]) -> [f64; 2] {
    [
        ((target[0] - from[0]) / MAX_SPEED).clamp(-1.0, 1.0),
        ((target[1] - from[1]) / MAX_SPEED).clamp(-1.0, 1.0),
    ]
}

/// The expert closes once this near its object. Above the contact radius, so
/// an object dragged at a fixed offset still counts as reached.
const AT: f64 = 0.04;
/// Carried objects are released this close to the goal.
const PLACE_TOL: f64 = 0.02;

/// Scripted expert action (before noise). Reads the true scene, so
/// observation perturbations never affect it.
pub fn expert_action(task: &TaskSpec, scene: &Scene) -> [f64; 3] {
    let Some((idx, obj)) = scene.object(task.kind.color()) else {
        return [0.0, 0.0, -1.0];
    };
    let g = scene.gripper.pos;
    let goal = scene.goal.unwrap_or(obj.pos);
    match task.kind {
        TaskKind::Reach(_) => {
            let v = toward(g, obj.pos);
            [v[0], v[1], -1.0]
        }
        TaskKind::Push(_) => {
            let v = if dist(g, obj.pos) < super::scene::CONTACT_RADIUS {
                toward(obj.pos, goal)
            } else {
                toward(g, obj.pos)
            };
            [v[0], v[1], -1.0]
        }
        TaskKind::PickPlace(_) => {
            if scene.held == Some(idx) {
                if dist(obj.pos, goal) < PLACE_TOL {
                    [0.0, 0.0, -1.0]
                } else {
                    let v = toward(obj.pos, goal);
                    [v[0], v[1], 1.0]
                }
            } else if obj.grasped && dist(obj.pos, goal) < task.threshold {
                [0.0, 0.0, -1.0]
            } else if dist(g, obj.pos) < AT {
                // a gripper that closed on nothing has to reopen first
                if scene.gripper.open > 0.0 {
                    [0.0, 0.0, 1.0]
                } else {
                    [0.0, 0.0, -1.0]
                }
            } else {
                let v = toward(g, obj.pos);
                [v[0], v[1], -1.0]
            }
        }
        TaskKind::PressHold(_) => {
            if dist(g, obj.pos) < AT {
                [0.0, 0.0, 1.0]
            } else {
                let v = toward(g, obj.pos);
                [v[0], v[1], -1.0]
            }
        }
    }
}
