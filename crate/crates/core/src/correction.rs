//! EMA teacher and the corrected per-pair loss.
//!
//! The teacher is a parameter-averaged copy of the student,
//! `teacher = alpha * teacher + (1 - alpha) * student`, updated once per
//! training batch and never trained directly. Its candidate distributions
//! act as constant soft targets; the per-pair objective is
//! `flag * L_cont + KL(student || teacher)`.

use serde::{Deserialize, Serialize};

use crate::encoder::{encode_forward, encoded_score, EncoderParams, LossConfig, Side};
use crate::error::{NpcError, Result};
use crate::numerics::{self, ProbVector};

/// Argument order of the consistency KL term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(student || teacher)`.
    #[default]
    StudentTeacher,
    /// `KL(teacher || student)`, the usual distillation direction.
    TeacherStudent,
}

impl std::str::FromStr for KlDirection {
    type Err = NpcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student_teacher" => Ok(KlDirection::StudentTeacher),
            "teacher_student" => Ok(KlDirection::TeacherStudent),
            other => Err(NpcError::config(format!("unknown KL direction {other:?}"))),
        }
    }
}

/// Ordered candidate documents for one query; `positive` indexes into `docs`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub docs: Vec<usize>,
    pub positive: usize,
}

impl CandidateSet {
    pub fn validate(&self) -> Result<()> {
        if self.docs.len() < 2 {
            return Err(NpcError::contract(format!(
                "candidate set needs at least 2 documents, got {}",
                self.docs.len()
            )));
        }
        if self.positive >= self.docs.len() {
            return Err(NpcError::contract(
                "positive index outside the candidate set",
            ));
        }
        let pos_doc = self.docs[self.positive];
        if self.docs.iter().filter(|&&d| d == pos_doc).count() != 1 {
            return Err(NpcError::contract(
                "positive document must appear exactly once",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub params: EncoderParams,
    pub alpha: f64,
    pub step: u64,
}

pub fn init_teacher(student: &EncoderParams, alpha: f64) -> Result<TeacherState> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(NpcError::config(format!(
            "EMA alpha must lie in [0, 1], got {alpha}"
        )));
    }
    Ok(TeacherState {
        params: student.clone(),
        alpha,
        step: 0,
    })
}

/// One EMA step, in place.
pub fn ema_update(teacher: &mut TeacherState, student: &EncoderParams) -> Result<()> {
    if !teacher.params.same_shape(student) {
        return Err(NpcError::contract(
            "teacher and student parameter shapes differ",
        ));
    }
    let a = teacher.alpha;
    teacher
        .params
        .values
        .iter_mut()
        .zip(&student.values)
        .for_each(|(t, s)| *t = a * *t + (1.0 - a) * s);
    teacher.step += 1;
    Ok(())
}

/// Teacher softmax over one query's candidates.
pub fn teacher_distribution(
    teacher: &TeacherState,
    query: &[usize],
    candidates: &[&[usize]],
    cfg: &LossConfig,
) -> Result<ProbVector> {
    if candidates.is_empty() {
        return Err(NpcError::contract("no candidate documents"));
    }
    let normalize = cfg.normalize();
    let q = encode_forward(query, &teacher.params, Side::Query, normalize)?;
    let scores = candidates
        .iter()
        .map(|d| {
            encode_forward(d, &teacher.params, Side::Doc, normalize)
                .map(|e| encoded_score(&q.out, &e.out))
        })
        .collect::<Result<Vec<_>>>()?;
    numerics::softmax(&scores, cfg.temperature)
}

/// Consistency term and its gradient with respect to the student logits.
///
/// `p`/`log_p` are the student's distribution, `t` the constant teacher
/// distribution.
pub(crate) fn consistency_logit_grad(
    p: &[f64],
    log_p: &[f64],
    t: &[f64],
    dir: KlDirection,
) -> (f64, Vec<f64>) {
    match dir {
        KlDirection::StudentTeacher => {
            let l: Vec<f64> = p
                .iter()
                .zip(log_p)
                .zip(t)
                .map(|((&pk, &lp), &tk)| if pk == 0.0 { 0.0 } else { lp - tk.ln() })
                .collect();
            let value: f64 = p.iter().zip(&l).map(|(pk, lk)| pk * lk).sum();
            let grad = p.iter().zip(&l).map(|(pk, lk)| pk * (lk - value)).collect();
            (value, grad)
        }
        KlDirection::TeacherStudent => {
            let value: f64 = t
                .iter()
                .zip(log_p)
                .filter(|(tk, _)| **tk > 0.0)
                .map(|(tk, lp)| tk * (tk.ln() - lp))
                .sum();
            let grad = p.iter().zip(t).map(|(pk, tk)| pk - tk).collect();
            (value, grad)
        }
    }
}

/// `flag * (-ln student[positive]) + KL(student || teacher)`.
///
/// A zero student probability on the positive yields `+inf` for the
/// contrastive term rather than a NaN.
pub fn pair_loss(
    student: &ProbVector,
    teacher: &ProbVector,
    positive: usize,
    flag: bool,
) -> Result<f64> {
    pair_loss_with(
        student,
        teacher,
        positive,
        flag,
        KlDirection::StudentTeacher,
    )
}

pub fn pair_loss_with(
    student: &ProbVector,
    teacher: &ProbVector,
    positive: usize,
    flag: bool,
    dir: KlDirection,
) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(NpcError::contract(
            "student and teacher distributions differ in length",
        ));
    }
    if positive >= student.len() {
        return Err(NpcError::contract("positive index out of range"));
    }
    let cont = if flag {
        let p = student[positive];
        if p == 0.0 {
            f64::INFINITY
        } else {
            -p.ln()
        }
    } else {
        0.0
    };
    let cons = match dir {
        KlDirection::StudentTeacher => numerics::kl_divergence(student, teacher)?,
        KlDirection::TeacherStudent => numerics::kl_divergence(teacher, student)?,
    };
    Ok(cont + cons)
}
