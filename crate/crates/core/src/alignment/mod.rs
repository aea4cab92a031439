//! Frozen teacher encoders, the distilled single teacher and the
//! future-representation alignment losses.

mod distill;
mod loss;
mod teachers;

pub use distill::{
    distill_teacher, Distillation, DistilledTeacher, DISTILLED_PREFIX, DISTILL_BATCH, DISTILL_LR,
    DISTILL_STEPS,
};
pub use loss::{align_loss_multi, align_loss_single};
pub use teachers::{
    quadrant_patches, Encoder, TeacherEncoder, TeacherKind, IMAGE_CHANNELS, IMAGE_SIZE,
    TEACHER_DIM, TEACHER_TOKENS,
};
