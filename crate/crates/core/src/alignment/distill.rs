use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::align_loss_single;
use super::teachers::{
    check_image, quadrant_patches, Encoder, TeacherEncoder, TEACHER_DIM, TEACHER_TOKENS,
};
use crate::autograd::{Tape, Tensor, Var};
use crate::error::{config_err, Result};
use crate::nn::{Adam, Linear, ParamStore};

pub const DISTILLED_PREFIX: &str = "theia_lite.";
pub const DISTILL_STEPS: usize = 1000;
pub const DISTILL_LR: f64 = 1e-3;
pub const DISTILL_BATCH: usize = 32;
const STUDENT_HIDDEN: usize = 24;
const PATCH_DIM: usize = 192;

/// Compact student encoder reproducing several teachers through per-teacher
/// heads. Only the encoder part is used once distillation ends.
#[derive(Debug, Clone)]
pub struct DistilledTeacher {
    store: ParamStore,
    fc1: Linear,
    fc2: Linear,
    heads: Vec<Linear>,
}

/// Outcome of [`distill_teacher`].
#[derive(Debug, Clone)]
pub struct Distillation {
    pub student: DistilledTeacher,
    /// Summed distillation loss per step.
    pub losses: Vec<f64>,
}

impl DistilledTeacher {
    pub fn new(heads: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let fc1 = Linear::new(
            &mut store,
            "theia_lite.enc.fc1",
            PATCH_DIM,
            STUDENT_HIDDEN,
            true,
            1.0,
            rng,
        )?;
        let fc2 = Linear::new(
            &mut store,
            "theia_lite.enc.fc2",
            STUDENT_HIDDEN,
            TEACHER_DIM,
            true,
            1.0,
            rng,
        )?;
        let heads = (0..heads)
            .map(|i| {
                Linear::new(
                    &mut store,
                    &format!("theia_lite.head.{i}"),
                    TEACHER_DIM,
                    TEACHER_DIM,
                    true,
                    1.0,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            store,
            fc1,
            fc2,
            heads,
        })
    }

    /// Rebuilds a student from stored `theia_lite.*` tensors.
    pub fn from_store(store: ParamStore) -> Result<Self> {
        let linear = |name: &str| -> Result<Linear> {
            let w = store
                .id(&format!("{name}.w"))
                .ok_or_else(|| config_err!("missing tensor {name}.w"))?;
            let b = store.id(&format!("{name}.b"));
            let shape = store.get(w).shape();
            Ok(Linear {
                name: name.to_string(),
                weight: w,
                bias: b,
                d_in: shape[1],
                d_out: shape[0],
            })
        };
        let fc1 = linear("theia_lite.enc.fc1")?;
        let fc2 = linear("theia_lite.enc.fc2")?;
        let mut heads = Vec::new();
        while store
            .id(&format!("theia_lite.head.{}.w", heads.len()))
            .is_some()
        {
            heads.push(linear(&format!("theia_lite.head.{}", heads.len()))?);
        }
        let mut s = Self {
            store,
            fc1,
            fc2,
            heads,
        };
        s.store.set_trainable(|_| false);
        Ok(s)
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn into_params(self) -> ParamStore {
        self.store
    }

    /// Parameters of the encoder, excluding the distillation heads.
    pub fn encoder_numel(&self) -> usize {
        self.fc1.numel() + self.fc2.numel()
    }

    pub fn hash(&self) -> String {
        self.store.hash()
    }

    fn features(&self, tape: &mut Tape<'_, f32>, images: &[&Tensor]) -> Result<Var> {
        let mut patches = Vec::with_capacity(images.len() * 16 * PATCH_DIM);
        for im in images {
            check_image(im)?;
            quadrant_patches(im.data(), &mut patches);
        }
        let x = tape.constant_from(&[images.len() * 16, PATCH_DIM], patches)?;
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h);
        let f = self.fc2.forward(tape, h)?;
        tape.group_mean(f, images.len() * TEACHER_TOKENS)
    }

    /// Embeddings for a batch of images, `[B*4, 32]`.
    pub fn encode_batch(&self, images: &[&Tensor]) -> Result<Tensor> {
        let mut tape = Tape::with_params(&self.store);
        let f = self.features(&mut tape, images)?;
        Ok(tape.tensor(f))
    }
}

impl Encoder for DistilledTeacher {
    fn encode(&self, image: &Tensor) -> Result<Tensor> {
        self.encode_batch(&[image])?
            .reshape(&[TEACHER_TOKENS, TEACHER_DIM])
    }
}

/// Trains a student so that each head reproduces one teacher under the
/// cosine objective, then freezes it.
pub fn distill_teacher(
    teachers: &[TeacherEncoder],
    images: &[Tensor],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Distillation> {
    if images.is_empty() {
        return Err(config_err!("distillation needs at least one image"));
    }
    if teachers.is_empty() || steps == 0 {
        return Err(config_err!(
            "distillation needs teachers and at least one step"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut student = DistilledTeacher::new(teachers.len(), &mut rng)?;
    let targets: Vec<Vec<Tensor>> = images
        .iter()
        .map(|im| {
            teachers
                .iter()
                .map(|t| t.encode(im))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut opt = Adam::new(&student.store, lr, 0.9, 0.999, Some(1.0));
    let mut losses = Vec::with_capacity(steps);
    let batch = DISTILL_BATCH.min(images.len());
    for _ in 0..steps {
        let idx: Vec<usize> = (0..batch)
            .map(|_| rng.random_range(0..images.len()))
            .collect();
        let ims: Vec<&Tensor> = idx.iter().map(|&i| &images[i]).collect();
        let grads = {
            let mut tape = Tape::with_params(&student.store);
            let f = student.features(&mut tape, &ims)?;
            let mut total: Option<Var> = None;
            for (t, head) in student.heads.iter().enumerate() {
                let data: Vec<f32> = idx
                    .iter()
                    .flat_map(|&i| targets[i][t].data().iter().copied())
                    .collect();
                let e = tape.constant_from(&[batch * TEACHER_TOKENS, TEACHER_DIM], data)?;
                let l = align_loss_single(&mut tape, f, head, e)?;
                total = Some(match total {
                    Some(a) => tape.add(a, l)?,
                    None => l,
                });
            }
            let total = total.expect("at least one teacher");
            losses.push(tape.scalar(total) as f64);
            tape.backward(total)?
        };
        student.store.accumulate(&grads)?;
        opt.step(&mut student.store)?;
    }
    student.store.set_trainable(|_| false);
    Ok(Distillation { student, losses })
}
