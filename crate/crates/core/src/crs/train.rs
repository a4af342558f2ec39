//! Two-stage training: a recommendation warm-up, then joint training on the
//! recommendation and sequence losses.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{seq_target, UnifiedCrs};
use super::prompt::{serialize_context, PromptSequence, PromptVariant};
use crate::error::{Error, Result};
use crate::tasks::{TaskInstance, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqExample {
    pub input: PromptSequence,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecExample {
    pub input: PromptSequence,
    pub candidates: Vec<String>,
    pub gold: String,
    /// Assist vector for the enhanced head; treated as a constant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assist: Option<Vec<f64>>,
}

/// `D_U ∪ D_A ∪ D_G` as sequence examples and `D_R` as recommendation
/// examples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    pub seq: Vec<SeqExample>,
    pub rec: Vec<RecExample>,
}

impl TrainingData {
    /// Unassisted examples for a set of instances of any kinds.
    pub fn from_instances<'a>(
        instances: impl IntoIterator<Item = &'a TaskInstance>,
    ) -> Result<Self> {
        let mut data = TrainingData::default();
        for inst in instances {
            let input = serialize_context(inst, PromptVariant::for_instance(inst))?;
            data.push(inst, input, None)?;
        }
        Ok(data)
    }

    /// Add one instance with an explicit (possibly assisted) sequence.
    pub fn push(
        &mut self,
        inst: &TaskInstance,
        input: PromptSequence,
        assist: Option<Vec<f64>>,
    ) -> Result<()> {
        match inst.kind() {
            TaskKind::Recommendation => self.rec.push(RecExample {
                input,
                candidates: inst
                    .candidates
                    .iter()
                    .map(|c| c.product.product_id.clone())
                    .collect(),
                gold: inst
                    .gold_product()
                    .expect("recommendation gold")
                    .to_string(),
                assist,
            }),
            _ => {
                let target = seq_target(inst).expect("generative gold");
                if !target.trim().is_empty() {
                    self.seq.push(SeqExample { input, target });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSchedule {
    pub warmup_epochs: usize,
    pub joint_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Head and item embeddings.
    pub lr_rec: f64,
    /// Encoder, through the recommendation loss.
    pub lr_encoder: f64,
    /// Decoder.
    pub lr_seq: f64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule {
            warmup_epochs: 5,
            joint_epochs: 5,
            batch_size: 16,
            seed: 11,
            lr_rec: 0.05,
            lr_encoder: 0.05,
            lr_seq: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Joint,
}

/// Loss bookkeeping for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingObjective {
    pub stage: Stage,
    pub l_r: f64,
    pub l_theta: f64,
}

impl TrainingObjective {
    /// `L_R` in warm-up, `L_R + L_θ` in joint training.
    pub fn total(&self) -> f64 {
        match self.stage {
            Stage::Warmup => self.l_r,
            Stage::Joint => self.l_r + self.l_theta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub batch: usize,
    /// Number of recommendation and sequence loss terms evaluated.
    pub rec_terms: usize,
    pub seq_terms: usize,
    pub objective: TrainingObjective,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub stage: Stage,
    pub epoch: usize,
    pub l_r: f64,
    #[serde(rename = "l_theta")]
    pub l_theta: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochLoss>,
}

impl TrainingReport {
    pub fn warmup_curve(&self) -> Vec<f64> {
        self.epochs
            .iter()
            .filter(|e| e.stage == Stage::Warmup)
            .map(|e| e.l_r)
            .collect()
    }

    /// One `{stage, epoch, l_r, l_theta}` record per line.
    pub fn write_curves(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for e in &self.epochs {
            let line = serde_json::to_string(e)?;
            writeln!(f, "{line}").map_err(|err| Error::io(path, err))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Item {
    Rec(usize),
    Seq(usize),
}

fn rec_step(crs: &mut UnifiedCrs, ex: &RecExample, s: &TrainingSchedule) -> Result<f64> {
    let context = crs.backend.encode(&ex.input.text);
    let (loss, grads) = crs.head.train_step(
        &mut crs.embeddings,
        &context,
        ex.assist.as_deref(),
        &ex.candidates,
        &ex.gold,
        s.lr_rec,
    )?;
    crs.backend
        .backprop_encoding(&ex.input.text, &grads.context, s.lr_encoder);
    Ok(loss)
}

fn run_epoch(
    crs: &mut UnifiedCrs,
    data: &TrainingData,
    schedule: &TrainingSchedule,
    stage: Stage,
    epoch: usize,
    rng: &mut ChaCha8Rng,
    report: &mut TrainingReport,
) -> Result<()> {
    let mut items: Vec<Item> = (0..data.rec.len()).map(Item::Rec).collect();
    if stage == Stage::Joint {
        items.extend((0..data.seq.len()).map(Item::Seq));
    }
    items.shuffle(rng);
    let (mut rec_sum, mut rec_n, mut seq_sum, mut seq_n) = (0.0, 0usize, 0.0, 0usize);
    for (b, batch) in items.chunks(schedule.batch_size.max(1)).enumerate() {
        let (mut r_sum, mut r_n, mut q_sum, mut q_n) = (0.0, 0usize, 0.0, 0usize);
        for item in batch {
            match *item {
                Item::Rec(i) => {
                    r_sum += rec_step(crs, &data.rec[i], schedule)?;
                    r_n += 1;
                }
                Item::Seq(i) => {
                    let ex = &data.seq[i];
                    q_sum += crs.backend.train_step(
                        &ex.input.text,
                        &ex.input.task_prompt,
                        &ex.target,
                        schedule.lr_seq,
                    )?;
                    q_n += 1;
                }
            }
        }
        let objective = TrainingObjective {
            stage,
            l_r: if r_n > 0 { r_sum / r_n as f64 } else { 0.0 },
            l_theta: if q_n > 0 { q_sum / q_n as f64 } else { 0.0 },
        };
        report.steps.push(StepRecord {
            stage,
            epoch,
            batch: b,
            rec_terms: r_n,
            seq_terms: q_n,
            total: objective.total(),
            objective,
        });
        rec_sum += r_sum;
        rec_n += r_n;
        seq_sum += q_sum;
        seq_n += q_n;
    }
    report.epochs.push(EpochLoss {
        stage,
        epoch,
        l_r: rec_sum / rec_n.max(1) as f64,
        l_theta: (stage == Stage::Joint && seq_n > 0).then(|| seq_sum / seq_n as f64),
    });
    Ok(())
}

/// Stage one optimizes `L_R` on `D_R` alone; stage two optimizes
/// `L_R + L_θ` over every example.
pub fn train_two_stage(
    crs: &mut UnifiedCrs,
    data: &TrainingData,
    schedule: &TrainingSchedule,
) -> Result<TrainingReport> {
    if data.rec.is_empty() {
        return Err(Error::Precondition(
            "no recommendation training examples".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut report = TrainingReport::default();
    for epoch in 0..schedule.warmup_epochs {
        run_epoch(
            crs,
            data,
            schedule,
            Stage::Warmup,
            epoch,
            &mut rng,
            &mut report,
        )?;
    }
    for epoch in 0..schedule.joint_epochs {
        run_epoch(
            crs,
            data,
            schedule,
            Stage::Joint,
            epoch,
            &mut rng,
            &mut report,
        )?;
    }
    Ok(report)
}
