use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::config::TrainConfig;
use super::policy::Policy;
use super::train::{mid_train_from, post_train_steps, train_stage, StageKind, StageReport};
use crate::alignment::{DistilledTeacher, TeacherEncoder, TEACHER_DIM};
use crate::env::DataPyramid;
use crate::error::{config_err, FrappeError, Result};

/// The seven training recipes compared under one step budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Paradigm {
    /// Plain fine-tune on actions only.
    PlainFinetune,
    /// Single-stream alignment, full parameters.
    MidFull,
    /// Single-stream alignment, prefix and LoRA only.
    MidAdapters,
    /// Experts without LoRA on the untrained backbone.
    PostPrefix,
    /// Experts with LoRA on the untrained backbone.
    PostPrefixLora,
    /// Full mid-training, then prefix-only experts.
    MidThenPostPrefix,
    /// Full mid-training, then prefix-and-LoRA experts.
    MidThenPostPrefixLora,
}

impl Paradigm {
    pub const ALL: [Paradigm; 7] = [
        Paradigm::PlainFinetune,
        Paradigm::MidFull,
        Paradigm::MidAdapters,
        Paradigm::PostPrefix,
        Paradigm::PostPrefixLora,
        Paradigm::MidThenPostPrefix,
        Paradigm::MidThenPostPrefixLora,
    ];

    pub fn id(self) -> usize {
        Self::ALL.iter().position(|&p| p == self).expect("listed")
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| config_err!("paradigm id {id} outside 0..=6"))
    }

    pub fn describe(self) -> &'static str {
        match self {
            Paradigm::PlainFinetune => "plain fine-tune",
            Paradigm::MidFull => "mid-train (full ft)",
            Paradigm::MidAdapters => "mid-train (prefix & lora ft)",
            Paradigm::PostPrefix => "post-train (prefix ft)",
            Paradigm::PostPrefixLora => "post-train (prefix & lora ft)",
            Paradigm::MidThenPostPrefix => "mid-train (full ft) + post-train (prefix ft)",
            Paradigm::MidThenPostPrefixLora => {
                "mid-train (full ft) + post-train (prefix & lora ft)"
            }
        }
    }

    /// Whether evaluation mixes the expert streams.
    pub fn uses_experts(self) -> bool {
        matches!(
            self,
            Paradigm::PostPrefix
                | Paradigm::PostPrefixLora
                | Paradigm::MidThenPostPrefix
                | Paradigm::MidThenPostPrefixLora
        )
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.id(), self.describe())
    }
}

impl FromStr for Paradigm {
    type Err = FrappeError;

    fn from_str(s: &str) -> Result<Self> {
        let id: usize = s
            .trim()
            .parse()
            .map_err(|_| config_err!("paradigm must be 0..=6, got {s:?}"))?;
        Self::from_id(id)
    }
}

/// A trained policy and the stage logs that produced it.
#[derive(Debug, Clone)]
pub struct ParadigmRun {
    pub paradigm: Paradigm,
    pub policy: Policy,
    pub stages: Vec<StageReport>,
}

/// Trains one paradigm. Single-stage paradigms spend the whole budget
/// `mid_steps + post_steps`; the two-stage ones split it as configured.
pub fn run_paradigm(
    paradigm: Paradigm,
    data: &DataPyramid,
    teachers: &[TeacherEncoder],
    distilled: &DistilledTeacher,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<ParadigmRun> {
    cfg.validate()?;
    let budget = cfg.mid_steps + cfg.post_steps;
    let mut policy = Policy::new(cfg.policy_config(), cfg.seed)?;
    policy.diffusion_steps = cfg.diffusion_steps;
    let lora = Some((cfg.lora_rank, cfg.lora_alpha));
    let sub = |name: &str| out.map(|d| d.join(name));
    let mut stages = Vec::new();
    match paradigm {
        Paradigm::PlainFinetune => {
            stages.push(train_stage(
                &mut policy,
                StageKind::Plain,
                &[],
                data,
                cfg,
                budget,
                out,
            )?);
            if let Some(d) = out {
                policy.save(&d.join("plain.frap"))?;
            }
        }
        Paradigm::MidFull => {
            policy.attach_mid(TEACHER_DIM, None, cfg.seed)?;
            stages.push(mid_train_from(
                &mut policy,
                distilled,
                data,
                cfg,
                StageKind::MidFull,
                budget,
                out,
            )?);
        }
        Paradigm::MidAdapters => {
            policy.attach_mid(TEACHER_DIM, lora, cfg.seed)?;
            stages.push(mid_train_from(
                &mut policy,
                distilled,
                data,
                cfg,
                StageKind::MidAdapters,
                budget,
                out,
            )?);
        }
        Paradigm::PostPrefix | Paradigm::PostPrefixLora => {
            let with_lora = paradigm == Paradigm::PostPrefixLora;
            stages.push(post_train_steps(
                &mut policy,
                teachers,
                data,
                cfg,
                with_lora,
                budget,
                out,
            )?);
        }
        Paradigm::MidThenPostPrefix | Paradigm::MidThenPostPrefixLora => {
            policy.attach_mid(TEACHER_DIM, None, cfg.seed)?;
            let mid_dir = sub("mid");
            stages.push(mid_train_from(
                &mut policy,
                distilled,
                data,
                cfg,
                StageKind::MidFull,
                cfg.mid_steps,
                mid_dir.as_deref(),
            )?);
            let with_lora = paradigm == Paradigm::MidThenPostPrefixLora;
            let post_dir = sub("post");
            stages.push(post_train_steps(
                &mut policy,
                teachers,
                data,
                cfg,
                with_lora,
                cfg.post_steps,
                post_dir.as_deref(),
            )?);
        }
    }
    Ok(ParadigmRun {
        paradigm,
        policy,
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        for p in Paradigm::ALL {
            assert_eq!(Paradigm::from_id(p.id()).unwrap(), p);
            assert_eq!(p.to_string().parse::<Paradigm>().ok(), None);
            assert_eq!(p.id().to_string().parse::<Paradigm>().unwrap(), p);
        }
        assert!(Paradigm::from_id(7).is_err());
        assert!(Paradigm::MidThenPostPrefixLora.uses_experts());
        assert!(!Paradigm::PlainFinetune.uses_experts());
    }
}
