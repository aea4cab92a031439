use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{config_err, FrappeError, Result};

pub const EPISODE_STEPS: usize = 40;
pub const MOVE_SCALE: f32 = 0.1;
pub const GRASP_MARGIN: f32 = 0.08;
pub const DISC_RADIUS: f32 = 0.12;
pub const GOAL_RADIUS: f32 = 0.2;
pub const MAX_OBJECTS: usize = 4;
pub const EASY_BACKGROUND: f32 = 0.2;
pub const EASY_GOAL: (f32, f32) = (0.55, -0.55);
/// Instructions `0..ROBOT_TASKS` move the disc of that colour to the goal.
pub const ROBOT_TASKS: usize = 4;
/// Instruction ids used by the unrelated action-free tasks.
pub const WEB_TASKS: std::ops::Range<usize> = 4..8;
pub const VOCAB: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Difficulty {
    Easy,
    Hard,
}

impl Difficulty {
    pub fn as_u8(self) -> u8 {
        match self {
            Difficulty::Easy => 0,
            Difficulty::Hard => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Difficulty::Easy),
            1 => Ok(Difficulty::Hard),
            _ => Err(FrappeError::Format(format!("unknown difficulty code {v}"))),
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        })
    }
}

impl FromStr for Difficulty {
    type Err = FrappeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            _ => Err(config_err!("difficulty must be easy or hard, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Object {
    pub x: f32,
    pub y: f32,
    pub radius: f32,
    pub color: usize,
    pub shape: Shape,
    pub held: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gripper {
    pub x: f32,
    pub y: f32,
    /// 1 = fully open, 0 = closed.
    pub open: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Goal {
    pub x: f32,
    pub y: f32,
    pub radius: f32,
}

/// One single-goal task: which instruction and at what difficulty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSpec {
    pub instruction: usize,
    pub difficulty: Difficulty,
}

impl TaskSpec {
    pub fn new(instruction: usize, difficulty: Difficulty) -> Result<Self> {
        if instruction >= VOCAB {
            return Err(config_err!(
                "instruction {instruction} outside vocabulary of {VOCAB}"
            ));
        }
        Ok(Self {
            instruction,
            difficulty,
        })
    }

    pub fn is_web(&self) -> bool {
        WEB_TASKS.contains(&self.instruction)
    }
}

/// Complete state of the tabletop. Object 0 is always the task target.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub gripper: Gripper,
    pub objects: Vec<Object>,
    pub goal: Goal,
    pub distractors: usize,
    pub background: f32,
    pub table_offset: f32,
    pub t: usize,
    /// Whether the target has ever been grasped.
    pub grasped_once: bool,
}

/// Continuous layout parameters, exposed for support checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayoutRanges {
    pub background: (f32, f32),
    pub goal_jitter: f32,
    pub table_offset: f32,
    pub distractors: (usize, usize),
}

impl LayoutRanges {
    pub fn of(difficulty: Difficulty) -> Self {
        match difficulty {
            Difficulty::Easy => Self {
                background: (EASY_BACKGROUND, EASY_BACKGROUND),
                goal_jitter: 0.0,
                table_offset: 0.0,
                distractors: (0, 0),
            },
            Difficulty::Hard => Self {
                background: (0.05, 0.45),
                goal_jitter: 0.2,
                table_offset: 0.15,
                distractors: (1, 2),
            },
        }
    }
}

fn uniform(rng: &mut impl Rng, lo: f32, hi: f32) -> f32 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

impl WorldState {
    /// Draws a fresh layout for `task`.
    pub fn sample(task: &TaskSpec, rng: &mut impl Rng) -> Self {
        let r = LayoutRanges::of(task.difficulty);
        let background = uniform(rng, r.background.0, r.background.1);
        let table_offset = uniform(rng, -r.table_offset, r.table_offset);
        let shape = if task.is_web() {
            Shape::Square
        } else {
            Shape::Disc
        };
        let (goal, target_x, target_y) = if task.is_web() {
            // unrelated tasks: goal anywhere on the lower half
            let gx = uniform(rng, -0.6, 0.6);
            let gy = uniform(rng, -0.7, -0.4);
            (
                Goal {
                    x: gx,
                    y: gy,
                    radius: GOAL_RADIUS,
                },
                (-0.7, 0.7),
                (-0.2, 0.2),
            )
        } else {
            let gx = EASY_GOAL.0 + uniform(rng, -r.goal_jitter, r.goal_jitter);
            let gy = EASY_GOAL.1 + uniform(rng, -r.goal_jitter, r.goal_jitter) + table_offset;
            (
                Goal {
                    x: gx,
                    y: gy,
                    radius: GOAL_RADIUS,
                },
                (-0.7, 0.2),
                (-0.3, 0.1),
            )
        };
        let color = if task.is_web() {
            task.instruction - WEB_TASKS.start
        } else {
            task.instruction
        };
        let mut objects = Vec::with_capacity(MAX_OBJECTS);
        let target = Object {
            x: uniform(rng, target_x.0, target_x.1),
            y: uniform(rng, target_y.0, target_y.1) + table_offset,
            radius: DISC_RADIUS,
            color,
            shape,
            held: false,
        };
        objects.push(target);
        let distractors = if r.distractors.1 > 0 {
            rng.random_range(r.distractors.0..=r.distractors.1)
        } else {
            0
        };
        let mut placed = 0;
        let mut tries = 0;
        while placed < distractors && tries < 200 {
            tries += 1;
            let x = uniform(rng, -0.8, 0.8);
            let y = uniform(rng, -0.5, 0.3) + table_offset;
            let clear = objects
                .iter()
                .all(|o| (o.x - x).hypot(o.y - y) > 2.0 * DISC_RADIUS + 0.12)
                && (goal.x - x).hypot(goal.y - y) > goal.radius + DISC_RADIUS;
            if clear {
                let c = (color + 1 + placed) % ROBOT_TASKS;
                objects.push(Object {
                    x,
                    y,
                    radius: DISC_RADIUS,
                    color: c,
                    shape,
                    held: false,
                });
                placed += 1;
            }
        }
        Self {
            gripper: Gripper {
                x: uniform(rng, -0.2, 0.2),
                y: uniform(rng, 0.5, 0.7),
                open: 1.0,
            },
            objects,
            goal,
            distractors: placed,
            background,
            table_offset,
            t: 0,
            grasped_once: false,
        }
    }

    pub fn target(&self) -> &Object {
        &self.objects[0]
    }

    pub fn held(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.held)
    }

    /// Target released inside the goal after having been grasped.
    pub fn success(&self) -> bool {
        let t = self.target();
        self.grasped_once
            && !t.held
            && (t.x - self.goal.x).hypot(t.y - self.goal.y) <= self.goal.radius
    }

    pub fn done(&self) -> bool {
        self.success() || self.t >= EPISODE_STEPS
    }

    /// `(x, y, open, held, t/40)`
    pub fn proprio(&self) -> [f32; 5] {
        [
            self.gripper.x,
            self.gripper.y,
            self.gripper.open,
            if self.held().is_some() { 1.0 } else { 0.0 },
            self.t as f32 / EPISODE_STEPS as f32,
        ]
    }

    /// Applies one action `(Δx, Δy, gripper)` after clipping to [−1, 1].
    pub fn step(&mut self, action: [f32; 3]) {
        let a = action.map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) });
        let g = &mut self.gripper;
        g.x = (g.x + MOVE_SCALE * a[0]).clamp(-1.0, 1.0);
        g.y = (g.y + MOVE_SCALE * a[1]).clamp(-1.0, 1.0);
        let (gx, gy) = (g.x, g.y);
        if a[2] > 0.0 {
            self.gripper.open = 0.0;
            if self.held().is_none() {
                let nearest = self
                    .objects
                    .iter()
                    .enumerate()
                    .map(|(i, o)| (i, (o.x - gx).hypot(o.y - gy) - o.radius))
                    .filter(|&(_, d)| d <= GRASP_MARGIN)
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                if let Some((i, _)) = nearest {
                    self.objects[i].held = true;
                    if i == 0 {
                        self.grasped_once = true;
                    }
                }
            }
        } else if a[2] < 0.0 {
            self.gripper.open = 1.0;
            if let Some(i) = self.held() {
                self.objects[i].held = false;
            }
        }
        if let Some(i) = self.held() {
            self.objects[i].x = self.gripper.x;
            self.objects[i].y = self.gripper.y;
        }
        self.t += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn easy() -> WorldState {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        WorldState::sample(&TaskSpec::new(0, Difficulty::Easy).unwrap(), &mut rng)
    }

    #[test]
    fn zero_action_only_advances_time() {
        let mut s = easy();
        let before = s.clone();
        s.step([0.0, 0.0, 0.0]);
        assert_eq!(s.t, 1);
        s.t = 0;
        assert_eq!(s, before);
    }

    #[test]
    fn empty_grasp_holds_nothing() {
        let mut s = easy();
        s.gripper.x = s.target().x + 0.6;
        s.step([0.0, 0.0, 1.0]);
        assert_eq!(s.held(), None);
        assert_eq!(s.gripper.open, 0.0);
    }

    #[test]
    fn held_object_follows_and_is_unique() {
        let mut s = easy();
        s.gripper.x = s.target().x;
        s.gripper.y = s.target().y;
        s.step([0.0, 0.0, 1.0]);
        assert_eq!(s.held(), Some(0));
        s.step([1.0, -1.0, 1.0]);
        assert_eq!((s.target().x, s.target().y), (s.gripper.x, s.gripper.y));
        assert_eq!(s.objects.iter().filter(|o| o.held).count(), 1);
        s.step([0.0, 0.0, -1.0]);
        assert_eq!(s.held(), None);
    }

    #[test]
    fn easy_ranges_sit_inside_hard_ranges() {
        let (e, h) = (
            LayoutRanges::of(Difficulty::Easy),
            LayoutRanges::of(Difficulty::Hard),
        );
        assert!(h.background.0 < e.background.0 && e.background.1 < h.background.1);
        assert!(e.goal_jitter < h.goal_jitter && e.table_offset < h.table_offset);
    }

    #[test]
    fn difficulty_parses() {
        assert_eq!("hard".parse::<Difficulty>().unwrap(), Difficulty::Hard);
        assert!("medium".parse::<Difficulty>().is_err());
        assert!(Difficulty::from_u8(7).is_err());
    }
}
