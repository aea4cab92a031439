use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::expert::scripted_expert;
use super::render::{render, Sprite};
use super::world::{TaskSpec, WorldState};
use crate::autograd::Tensor;
use crate::error::{config_err, FrappeError, Result};

/// What a policy sees at the start of each chunk.
#[derive(Debug, Clone)]
pub struct Observation {
    pub image: Tensor,
    pub proprio: [f32; 5],
    pub instruction: usize,
}

/// Closed-loop controller that plans one action chunk per observation.
pub trait ChunkPolicy {
    fn chunk_len(&self) -> usize;
    /// One chunk of `chunk_len()` actions per observation.
    fn plan(&mut self, observations: &[Observation]) -> Result<Vec<Vec<[f32; 3]>>>;
}

/// Uniform random actions.
pub struct RandomPolicy {
    pub chunk: usize,
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(chunk: usize, seed: u64) -> Self {
        Self {
            chunk,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl ChunkPolicy for RandomPolicy {
    fn chunk_len(&self) -> usize {
        self.chunk
    }

    fn plan(&mut self, observations: &[Observation]) -> Result<Vec<Vec<[f32; 3]>>> {
        Ok(observations
            .iter()
            .map(|_| {
                (0..self.chunk)
                    .map(|_| [0; 3].map(|_: i32| self.rng.random_range(-1.0f32..=1.0)))
                    .collect()
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub episodes: usize,
    pub successes: usize,
}

impl EvalResult {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.episodes as f64
    }
}

/// Fresh layouts for `episodes` runs of `task`, drawn from `seed`.
pub fn eval_layouts(task: &TaskSpec, episodes: usize, seed: u64) -> Vec<WorldState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..episodes)
        .map(|_| WorldState::sample(task, &mut rng))
        .collect()
}

fn rollout(
    states: &mut [WorldState],
    instruction: usize,
    mut plan: impl FnMut(&[WorldState], &[Observation]) -> Result<Vec<Vec<[f32; 3]>>>,
) -> Result<()> {
    loop {
        let active: Vec<usize> = (0..states.len()).filter(|&i| !states[i].done()).collect();
        if active.is_empty() {
            return Ok(());
        }
        let obs: Vec<Observation> = active
            .iter()
            .map(|&i| Observation {
                image: render(&states[i], Sprite::Gripper),
                proprio: states[i].proprio(),
                instruction,
            })
            .collect();
        let view: Vec<WorldState> = active.iter().map(|&i| states[i].clone()).collect();
        let plans = plan(&view, &obs)?;
        if plans.len() != active.len() {
            return Err(config_err!(
                "policy returned {} chunks for {} observations",
                plans.len(),
                active.len()
            ));
        }
        for (&i, chunk) in active.iter().zip(plans) {
            if chunk.is_empty() {
                return Err(FrappeError::Data("policy returned an empty chunk".into()));
            }
            for a in chunk {
                if states[i].done() {
                    break;
                }
                states[i].step(a);
            }
        }
    }
}

fn tally(states: &[WorldState]) -> EvalResult {
    EvalResult {
        episodes: states.len(),
        successes: states.iter().filter(|s| s.success()).count(),
    }
}

/// Runs every episode in lockstep, re-planning after each chunk, and counts
/// episodes whose success predicate fires within the step budget.
pub fn evaluate(
    policy: &mut dyn ChunkPolicy,
    task: &TaskSpec,
    episodes: usize,
    seed: u64,
) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(config_err!("evaluation needs at least one episode"));
    }
    let mut states = eval_layouts(task, episodes, seed);
    rollout(&mut states, task.instruction, |_, obs| policy.plan(obs))?;
    Ok(tally(&states))
}

/// [`evaluate`] with the scripted expert as the planner. The expert reads
/// the true state and plans each chunk by simulating itself on a copy.
pub fn evaluate_expert(
    task: &TaskSpec,
    episodes: usize,
    chunk: usize,
    seed: u64,
) -> Result<EvalResult> {
    if episodes == 0 || chunk == 0 {
        return Err(config_err!(
            "evaluation needs at least one episode and a non-empty chunk"
        ));
    }
    let mut states = eval_layouts(task, episodes, seed);
    rollout(&mut states, task.instruction, |view, _| {
        Ok(view
            .iter()
            .map(|s| {
                let mut sim = s.clone();
                (0..chunk)
                    .map(|_| {
                        let a = scripted_expert(&sim);
                        sim.step(a);
                        a
                    })
                    .collect()
            })
            .collect())
    })?;
    Ok(tally(&states))
}

/// Appends `task,difficulty,episodes,successes,seed` to a CSV, writing the
/// header when the file is new.
pub fn append_eval_csv(path: &Path, task: &TaskSpec, r: &EvalResult, seed: u64) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| FrappeError::io(path, e))?;
    let mut line = String::new();
    if fresh {
        line.push_str("task,difficulty,episodes,successes,seed\n");
    }
    line.push_str(&format!(
        "{},{},{},{},{}\n",
        task.instruction, task.difficulty, r.episodes, r.successes, seed
    ));
    f.write_all(line.as_bytes())
        .map_err(|e| FrappeError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::world::Difficulty;

    #[test]
    fn expert_policy_solves_easy() {
        let task = TaskSpec::new(0, Difficulty::Easy).unwrap();
        let r = evaluate_expert(&task, 100, 8, 3).unwrap();
        assert!(r.rate() >= 0.99, "{r:?}");
    }

    #[test]
    fn random_policy_fails_hard_and_is_deterministic() {
        let task = TaskSpec::new(0, Difficulty::Hard).unwrap();
        let a = evaluate(&mut RandomPolicy::new(8, 1), &task, 100, 9).unwrap();
        let b = evaluate(&mut RandomPolicy::new(8, 1), &task, 100, 9).unwrap();
        assert!(a.rate() < 0.1, "{a:?}");
        assert_eq!(a, b);
    }

    #[test]
    fn csv_rows_append() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("eval.csv");
        let task = TaskSpec::new(0, Difficulty::Easy).unwrap();
        let r = EvalResult {
            episodes: 4,
            successes: 3,
        };
        append_eval_csv(&p, &task, &r, 7).unwrap();
        append_eval_csv(&p, &task, &r, 8).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "task,difficulty,episodes,successes,seed\n0,easy,4,3,7\n0,easy,4,3,8\n"
        );
    }
}
