use super::world::{WorldState, GRASP_MARGIN, MOVE_SCALE};

/// Proportional controller: reach the target, close, carry it to the goal,
/// open. Gripper commands are levels: `-1` keeps the hand open, `+1` keeps
/// it closed.
pub fn scripted_expert(state: &WorldState) -> [f32; 3] {
    let g = state.gripper;
    let target = state.target();
    let toward = |x: f32, y: f32| {
        [
            ((x - g.x) / MOVE_SCALE).clamp(-1.0, 1.0),
            ((y - g.y) / MOVE_SCALE).clamp(-1.0, 1.0),
        ]
    };
    if state.success() {
        return [0.0, 0.0, -1.0];
    }
    if target.held {
        let d = (state.goal.x - g.x).hypot(state.goal.y - g.y);
        if d <= 0.5 * state.goal.radius {
            return [0.0, 0.0, -1.0];
        }
        let [dx, dy] = toward(state.goal.x, state.goal.y);
        return [dx, dy, 1.0];
    }
    if state.held().is_some() {
        // holding the wrong object: drop it
        return [0.0, 0.0, -1.0];
    }
    let d = (target.x - g.x).hypot(target.y - g.y);
    if d - target.radius <= 0.5 * GRASP_MARGIN {
        return [0.0, 0.0, 1.0];
    }
    let [dx, dy] = toward(target.x, target.y);
    [dx, dy, -1.0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::world::{Difficulty, TaskSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(seed: u64, d: Difficulty, instruction: usize) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = WorldState::sample(&TaskSpec::new(instruction, d).unwrap(), &mut rng);
        while !s.done() {
            s.step(scripted_expert(&s));
        }
        s.success()
    }

    #[test]
    fn phase_logic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = WorldState::sample(&TaskSpec::new(0, Difficulty::Easy).unwrap(), &mut rng);
        s.gripper.x = s.target().x;
        s.gripper.y = s.target().y;
        assert_eq!(scripted_expert(&s)[2], 1.0);
        s.step([0.0, 0.0, 1.0]);
        s.gripper.x = s.goal.x;
        s.gripper.y = s.goal.y;
        assert_eq!(scripted_expert(&s), [0.0, 0.0, -1.0]);
    }

    #[test]
    fn expert_solves_easy_and_hard() {
        let easy = (0..100).filter(|&i| run(i, Difficulty::Easy, 0)).count();
        assert!(easy >= 99, "{easy}");
        let hard = (0..100)
            .filter(|&i| run(1000 + i, Difficulty::Hard, (i % 4) as usize))
            .count();
        assert!(hard >= 95, "{hard}");
        let web = (0..50)
            .filter(|&i| run(2000 + i, Difficulty::Easy, 4 + (i % 4) as usize))
            .count();
        assert!(web >= 48, "{web}");
    }
}
