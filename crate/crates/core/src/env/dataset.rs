use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::expert::scripted_expert;
use super::render::{quantize, render, Sprite};
use super::world::{Difficulty, TaskSpec, WorldState, EPISODE_STEPS, ROBOT_TASKS, WEB_TASKS};
use crate::alignment::{IMAGE_CHANNELS, IMAGE_SIZE};
use crate::autograd::Tensor;
use crate::error::{config_err, FrappeError, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"FTRJ";
pub const DATASET_VERSION: u32 = 1;
pub const OBS_BYTES: usize = IMAGE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
pub const PROPRIO_DIM: usize = 5;
pub const ACTION_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Robot,
    EgoTask,
    EgoWeb,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::Robot, Source::EgoTask, Source::EgoWeb];

    pub fn file_name(self) -> &'static str {
        match self {
            Source::Robot => "robot.ftrj",
            Source::EgoTask => "ego_task.ftrj",
            Source::EgoWeb => "ego_web.ftrj",
        }
    }

    fn code(self) -> u8 {
        match self {
            Source::Robot => 0,
            Source::EgoTask => 1,
            Source::EgoWeb => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Source::ALL
            .into_iter()
            .find(|s| s.code() == c)
            .ok_or_else(|| FrappeError::Format(format!("unknown source code {c}")))
    }

    fn sprite(self) -> Sprite {
        match self {
            Source::Robot => Sprite::Gripper,
            _ => Sprite::Hand,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// Quantized `[3, 32, 32]` image, channel-major.
    pub obs: Vec<u8>,
    pub proprio: [f32; PROPRIO_DIM],
    pub action: Option<[f32; ACTION_DIM]>,
}

impl Step {
    pub fn image(&self) -> Tensor {
        let data = self.obs.iter().map(|&b| b as f32 / 255.0).collect();
        Tensor::new(&[IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data).expect("fixed image size")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub source: Source,
    pub instruction: usize,
    pub difficulty: Difficulty,
    pub has_actions: bool,
    pub steps: Vec<Step>,
}

impl Episode {
    /// Index of the frame `h` steps ahead, repeating the final frame.
    pub fn future_index(&self, t: usize, h: usize) -> usize {
        (t + h).min(self.steps.len() - 1)
    }

    /// `T_a` actions starting at `t`, zero-padded past the end. `None` for
    /// action-free episodes.
    pub fn action_chunk(&self, t: usize, chunk: usize) -> Option<Vec<f32>> {
        if !self.has_actions {
            return None;
        }
        let mut out = Vec::with_capacity(chunk * ACTION_DIM);
        for i in t..t + chunk {
            match self.steps.get(i).and_then(|s| s.action) {
                Some(a) => out.extend_from_slice(&a),
                None => out.extend_from_slice(&[0.0; ACTION_DIM]),
            }
        }
        Some(out)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(DATASET_MAGIC);
        b.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.episodes.len() as u32).to_le_bytes());
        for e in &self.episodes {
            b.push(e.source.code());
            b.extend_from_slice(&(e.instruction as u32).to_le_bytes());
            b.push(e.has_actions as u8);
            b.push(e.difficulty.as_u8());
            b.extend_from_slice(&(e.steps.len() as u32).to_le_bytes());
            for s in &e.steps {
                b.extend_from_slice(&s.obs);
                for v in s.proprio {
                    b.extend_from_slice(&v.to_le_bytes());
                }
                if e.has_actions {
                    for v in s.action.unwrap_or([0.0; ACTION_DIM]) {
                        b.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        b
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > buf.len() {
                return Err(FrappeError::Format(format!(
                    "truncated dataset at byte {pos}"
                )));
            }
            pos += n;
            Ok(&buf[pos - n..pos])
        };
        if take(4)? != DATASET_MAGIC {
            return Err(FrappeError::Format(
                "bad magic: not a trajectory dataset".into(),
            ));
        }
        let u32_of = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
        let f32_of = |s: &[u8]| f32::from_le_bytes(s.try_into().expect("4 bytes"));
        let version = u32_of(take(4)?);
        if version != DATASET_VERSION {
            return Err(FrappeError::Format(format!(
                "dataset version {version} is not supported"
            )));
        }
        let count = u32_of(take(4)?) as usize;
        let mut episodes = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let source = Source::from_code(take(1)?[0])?;
            let instruction = u32_of(take(4)?) as usize;
            let has_actions = match take(1)?[0] {
                0 => false,
                1 => true,
                v => return Err(FrappeError::Format(format!("bad has_actions flag {v}"))),
            };
            let difficulty = Difficulty::from_u8(take(1)?[0])?;
            let n = u32_of(take(4)?) as usize;
            if n == 0 {
                return Err(FrappeError::Format("episode with no steps".into()));
            }
            let mut steps = Vec::with_capacity(n.min(1 << 12));
            for _ in 0..n {
                let obs = take(OBS_BYTES)?.to_vec();
                let mut proprio = [0.0; PROPRIO_DIM];
                for p in proprio.iter_mut() {
                    *p = f32_of(take(4)?);
                }
                let action = if has_actions {
                    let mut a = [0.0; ACTION_DIM];
                    for v in a.iter_mut() {
                        *v = f32_of(take(4)?);
                    }
                    Some(a)
                } else {
                    None
                };
                steps.push(Step {
                    obs,
                    proprio,
                    action,
                });
            }
            episodes.push(Episode {
                source,
                instruction,
                difficulty,
                has_actions,
                steps,
            });
        }
        if pos != buf.len() {
            return Err(FrappeError::Format(format!(
                "{} trailing bytes in dataset",
                buf.len() - pos
            )));
        }
        Ok(Self { episodes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| FrappeError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| FrappeError::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

/// Episode counts per source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataCounts {
    pub robot: usize,
    pub ego_task: usize,
    pub ego_web: usize,
}

/// How the robot and task-specific ego datasets pick their tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct DataOptions {
    /// Instructions cycled over episodes.
    pub tasks: Vec<usize>,
    pub difficulty: Difficulty,
}

impl Default for DataOptions {
    fn default() -> Self {
        Self {
            tasks: vec![0],
            difficulty: Difficulty::Easy,
        }
    }
}

/// The three tiers of training data.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPyramid {
    pub robot: Dataset,
    pub ego_task: Dataset,
    pub ego_web: Dataset,
}

impl DataPyramid {
    pub fn get(&self, source: Source) -> &Dataset {
        match source {
            Source::Robot => &self.robot,
            Source::EgoTask => &self.ego_task,
            Source::EgoWeb => &self.ego_web,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| FrappeError::io(dir, e))?;
        for s in Source::ALL {
            self.get(s).save(&dir.join(s.file_name()))?;
        }
        Ok(())
    }

    /// Loads whichever of the three files exist; missing ones are empty.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |s: Source| -> Result<Dataset> {
            let p = dir.join(s.file_name());
            if p.exists() {
                Dataset::load(&p)
            } else {
                Ok(Dataset::default())
            }
        };
        let out = Self {
            robot: read(Source::Robot)?,
            ego_task: read(Source::EgoTask)?,
            ego_web: read(Source::EgoWeb)?,
        };
        if Source::ALL
            .iter()
            .all(|&s| !dir.join(s.file_name()).exists())
        {
            return Err(config_err!("no dataset files found in {}", dir.display()));
        }
        Ok(out)
    }
}

/// Rolls the scripted expert for a full episode, redrawing layouts the
/// expert cannot solve.
pub fn expert_episode(task: &TaskSpec, source: Source, rng: &mut impl Rng) -> Episode {
    let keep_actions = source == Source::Robot;
    loop {
        let mut s = WorldState::sample(task, rng);
        let mut steps = Vec::with_capacity(EPISODE_STEPS);
        for _ in 0..EPISODE_STEPS {
            let img = render(&s, source.sprite());
            let a = scripted_expert(&s);
            steps.push(Step {
                obs: img.data().iter().map(|&v| quantize(v)).collect(),
                proprio: s.proprio(),
                action: keep_actions.then_some(a),
            });
            if s.success() {
                s.t += 1;
            } else {
                s.step(a);
            }
        }
        if s.success() {
            return Episode {
                source,
                instruction: task.instruction,
                difficulty: task.difficulty,
                has_actions: keep_actions,
                steps,
            };
        }
    }
}

/// Generates the robot, task-specific ego and unrelated ego datasets. Each
/// tier draws from its own random stream so counts do not interact.
pub fn generate_datasets(counts: DataCounts, opts: &DataOptions, seed: u64) -> Result<DataPyramid> {
    if opts.tasks.is_empty() || opts.tasks.iter().any(|&t| t >= ROBOT_TASKS) {
        return Err(config_err!(
            "robot tasks must be a non-empty subset of 0..{ROBOT_TASKS}"
        ));
    }
    let make = |source: Source, n: usize, stream: u64| -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut episodes = Vec::with_capacity(n);
        for i in 0..n {
            let task = match source {
                Source::EgoWeb => TaskSpec::new(
                    WEB_TASKS.start + rng.random_range(0..WEB_TASKS.len()),
                    Difficulty::Easy,
                )?,
                _ => TaskSpec::new(opts.tasks[i % opts.tasks.len()], opts.difficulty)?,
            };
            episodes.push(expert_episode(&task, source, &mut rng));
        }
        Ok(Dataset { episodes })
    };
    Ok(DataPyramid {
        robot: make(Source::Robot, counts.robot, 1)?,
        ego_task: make(Source::EgoTask, counts.ego_task, 2)?,
        ego_web: make(Source::EgoWeb, counts.ego_web, 3)?,
    })
}
