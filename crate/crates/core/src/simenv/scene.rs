use serde::{Deserialize, Serialize};

use crate::policy::{ObsToken, TokenSequence};

/// Object colors. The first three are the standard scene objects; the last
/// two only ever appear as distractors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
}

pub const N_COLORS: usize = 5;
/// Color one-hot, goal flag, x, y, shape, presence.
pub const OBS_FEAT_DIM: usize = N_COLORS + 5;
/// Gripper x, y and open fraction.
pub const STATE_DIM: usize = 3;
/// Three scene objects, the goal marker, and two distractor slots.
pub const N_OBS_SLOTS: usize = 6;
pub const GOAL_SLOT: usize = 3;
pub const DISTRACTOR_SLOT: usize = 4;
/// Workspace units moved per step at full action magnitude.
pub const MAX_SPEED: f64 = 0.08;
/// An open gripper this close to an object drags it along.
pub const CONTACT_RADIUS: f64 = 0.03;

impl Color {
    pub fn index(self) -> usize {
        self as usize
    }

    pub const STANDARD: [Color; 3] = [Color::Red, Color::Green, Color::Blue];
    pub const DISTRACTORS: [Color; 2] = [Color::Yellow, Color::Purple];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub color: Color,
    pub pos: [f64; 2],
    /// Shape scalar in `[0.5, 1.5]`; observation-only.
    pub shape: f64,
    /// Set once the object has been rigidly attached to the gripper.
    pub grasped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gripper {
    pub pos: [f64; 2],
    /// 1 is fully open, 0 closed.
    pub open: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<Object>,
    pub goal: Option<[f64; 2]>,
    /// Lighting offset in `[-1, 1]`, added to every object-token feature.
    pub brightness: f64,
    pub gripper: Gripper,
    /// Index into `objects` of the attached object.
    pub held: Option<usize>,
    /// Consecutive closed-gripper steps spent on the press target.
    pub press_steps: usize,
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clamp01(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

impl Scene {
    pub fn object(&self, color: Color) -> Option<(usize, &Object)> {
        self.objects
            .iter()
            .enumerate()
            .find(|(_, o)| o.color == color)
    }

    pub fn is_valid(&self) -> bool {
        let inside = |p: [f64; 2]| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]);
        self.objects
            .iter()
            .all(|o| inside(o.pos) && (0.5..=1.5).contains(&o.shape))
            && self.goal.is_none_or(inside)
            && inside(self.gripper.pos)
            && (-1.0..=1.0).contains(&self.brightness)
            && self.objects.len() < N_OBS_SLOTS
    }

    /// Advances the point-mass world by one step. `action` must already be
    /// clamped to `[-1, 1]^3`.
    ///
    /// Gripper command first (positive closes, attaching the nearest object
    /// within `grasp_radius`; non-positive opens and releases), then motion.
    /// A held object moves rigidly with the gripper; an open gripper drags any
    /// object it started the step in contact with.
    pub fn step(&mut self, action: [f64; 3], grasp_radius: f64) {
        if action[2] > 0.0 {
            if self.held.is_none() && self.gripper.open > 0.0 {
                let g = self.gripper.pos;
                let nearest = self
                    .objects
                    .iter()
                    .enumerate()
                    .map(|(i, o)| (i, dist(o.pos, g)))
                    .filter(|&(_, d)| d <= grasp_radius)
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                if let Some((i, _)) = nearest {
                    self.held = Some(i);
                    self.objects[i].grasped = true;
                }
            }
            self.gripper.open = 0.0;
        } else {
            self.gripper.open = 1.0;
            self.held = None;
        }

        let before = self.gripper.pos;
        let after = clamp01([
            before[0] + MAX_SPEED * action[0],
            before[1] + MAX_SPEED * action[1],
        ]);
        let delta = [after[0] - before[0], after[1] - before[1]];
        self.gripper.pos = after;

        for (i, obj) in self.objects.iter_mut().enumerate() {
            let dragged = self.gripper.open > 0.0
                && self.held.is_none()
                && dist(obj.pos, before) < CONTACT_RADIUS;
            if self.held == Some(i) || dragged {
                obj.pos = clamp01([obj.pos[0] + delta[0], obj.pos[1] + delta[1]]);
            }
        }
    }

    /// Policy input: object tokens by color slot, the goal marker, then any
    /// distractors, each shifted by the scene brightness.
    pub fn encode(&self, task_token: usize) -> TokenSequence {
        let b = self.brightness as f32;
        let mut obs = Vec::new();
        let mut distractor = 0;
        for obj in &self.objects {
            let slot = match obj.color {
                Color::Red | Color::Green | Color::Blue => obj.color.index(),
                Color::Yellow | Color::Purple => {
                    distractor += 1;
                    DISTRACTOR_SLOT + distractor - 1
                }
            };
            let mut f = vec![0.0f32; OBS_FEAT_DIM];
            f[obj.color.index()] = 1.0;
            f[N_COLORS + 1] = obj.pos[0] as f32;
            f[N_COLORS + 2] = obj.pos[1] as f32;
            f[N_COLORS + 3] = obj.shape as f32;
            f[N_COLORS + 4] = 1.0;
            f.iter_mut().for_each(|x| *x += b);
            obs.push(ObsToken { slot, features: f });
        }
        if let Some(goal) = self.goal {
            let mut f = vec![0.0f32; OBS_FEAT_DIM];
            f[N_COLORS] = 1.0;
            f[N_COLORS + 1] = goal[0] as f32;
            f[N_COLORS + 2] = goal[1] as f32;
            f[N_COLORS + 3] = 1.0;
            f[N_COLORS + 4] = 1.0;
            f.iter_mut().for_each(|x| *x += b);
            obs.push(ObsToken {
                slot: GOAL_SLOT,
                features: f,
            });
        }
        obs.sort_by_key(|t| t.slot);
        TokenSequence {
            task: task_token,
            obs,
            state: self.state(),
        }
    }

    pub fn state(&self) -> Vec<f32> {
        vec![
            self.gripper.pos[0] as f32,
            self.gripper.pos[1] as f32,
            self.gripper.open as f32,
        ]
    }
}
