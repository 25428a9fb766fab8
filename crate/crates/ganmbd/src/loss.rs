//! GAN objectives: the branch-averaged adversarial and classification terms
//! plus the cycle-consistency stabilizer.

use crate::error::{Error, Result};
use crate::nn::validate_one_hot;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Default weight of the classification term in both objectives.
pub const LAMBDA_CLS: f64 = 1.0;
/// Default weight of the cycle-consistency term in the generator objective.
pub const LAMBDA_CYC: f64 = 10.0;

/// Which generator adversarial term to minimize.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GenAdvVariant {
    /// -(1/N) sum_i mean log D_i(fake): stronger gradients early in training.
    #[default]
    NonSaturating,
    /// (1/N) sum_i mean log(1 - D_i(fake)): the literal value-function form.
    LogOneMinus,
}

/// Per-step loss values in plain numbers, one row of the training history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub adv_d: f64,
    pub adv_g: f64,
    pub cls_real: f64,
    pub cls_fake: f64,
    pub cyc: f64,
    pub total_d: f64,
    pub total_g: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.adv_d, self.adv_g, self.cls_real, self.cls_fake, self.cyc, self.total_d, self.total_g]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Branch-averaged adversarial terms.
///
/// `branch_real` / `branch_fake` hold one patch-probability map per branch,
/// values in (0,1). Returns `(d_term, g_term)`: the discriminator maximizes
/// `d_term` (its loss is the negation), the generator minimizes `g_term`.
pub fn adv_loss<S: Scalar>(
    tape: &Tape<S>,
    branch_real: &[Var],
    branch_fake: &[Var],
    variant: GenAdvVariant,
) -> Result<(Var, Var)> {
    if branch_real.is_empty() || branch_real.len() != branch_fake.len() {
        return Err(Error::usage(format!(
            "adv_loss needs matching non-empty branch lists, got {} real / {} fake",
            branch_real.len(),
            branch_fake.len()
        )));
    }
    let n = branch_real.len();
    let one = |v: Var| -> Var {
        let ones = tape.constant(Tensor::full(tape.shape(v), S::one()));
        tape.sub(ones, v).expect("same shape by construction")
    };

    let mut d_term: Option<Var> = None;
    let mut g_term: Option<Var> = None;
    for (&real, &fake) in branch_real.iter().zip(branch_fake) {
        let log_real = tape.mean(tape.log_clamped(real));
        let log_one_minus_fake = tape.mean(tape.log_clamped(one(fake)));
        let branch_d = tape.add(log_real, log_one_minus_fake)?;
        d_term = Some(match d_term {
            Some(acc) => tape.add(acc, branch_d)?,
            None => branch_d,
        });
        let branch_g = match variant {
            GenAdvVariant::NonSaturating => tape.neg(tape.mean(tape.log_clamped(fake))),
            GenAdvVariant::LogOneMinus => tape.mean(tape.log_clamped(one(fake))),
        };
        g_term = Some(match g_term {
            Some(acc) => tape.add(acc, branch_g)?,
            None => branch_g,
        });
    }
    let scale = 1.0 / n as f64;
    Ok((tape.scale(d_term.unwrap(), scale), tape.scale(g_term.unwrap(), scale)))
}

/// Generator-side adversarial term alone, for passes where the real-image
/// half of Eq. 1 is not needed (e.g. the recycled output).
pub fn gen_adv_term<S: Scalar>(
    tape: &Tape<S>,
    branch_fake: &[Var],
    variant: GenAdvVariant,
) -> Result<Var> {
    if branch_fake.is_empty() {
        return Err(Error::usage("gen_adv_term needs at least one branch"));
    }
    let mut acc: Option<Var> = None;
    for &fake in branch_fake {
        let term = match variant {
            GenAdvVariant::NonSaturating => tape.neg(tape.mean(tape.log_clamped(fake))),
            GenAdvVariant::LogOneMinus => {
                let ones = tape.constant(Tensor::full(tape.shape(fake), S::one()));
                let one_minus = tape.sub(ones, fake)?;
                tape.mean(tape.log_clamped(one_minus))
            }
        };
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(tape.scale(acc.unwrap(), 1.0 / branch_fake.len() as f64))
}

/// Branch-averaged cross-entropy of class logits against one-hot labels:
/// (1/N) sum_i mean_batch(-log softmax(logits_i)[label]).
pub fn cls_loss_term<S: Scalar>(
    tape: &Tape<S>,
    branch_logits: &[Var],
    labels: &Tensor<S>,
) -> Result<Var> {
    if branch_logits.is_empty() {
        return Err(Error::usage("cls_loss needs at least one branch"));
    }
    let shape = tape.shape(branch_logits[0]);
    let (batch, k) = (shape[0], shape[1]);
    validate_one_hot(labels, k)?;
    if labels.shape()[0] != batch {
        return Err(Error::usage("label batch size does not match logits"));
    }
    let label_var = tape.constant(labels.clone());
    let mut acc: Option<Var> = None;
    for &logits in branch_logits {
        if tape.shape(logits) != shape {
            return Err(Error::usage("all branch logits must share one shape"));
        }
        let ls = tape.log_softmax(logits)?;
        let picked = tape.mul(ls, label_var)?;
        // each row contributes exactly one picked log-probability
        let ce = tape.scale(tape.sum(picked), -1.0 / batch as f64);
        acc = Some(match acc {
            Some(a) => tape.add(a, ce)?,
            None => ce,
        });
    }
    Ok(tape.scale(acc.unwrap(), 1.0 / branch_logits.len() as f64))
}

/// Classification terms of the objective: real images against their true
/// labels (discriminator side) and translated images against the target
/// labels (generator side).
pub fn cls_loss<S: Scalar>(
    tape: &Tape<S>,
    branch_cls_real: &[Var],
    real_labels: &Tensor<S>,
    branch_cls_fake: &[Var],
    target_labels: &Tensor<S>,
) -> Result<(Var, Var)> {
    let real_term = cls_loss_term(tape, branch_cls_real, real_labels)?;
    let fake_term = cls_loss_term(tape, branch_cls_fake, target_labels)?;
    Ok((real_term, fake_term))
}

/// Mean absolute difference between an image batch and its reconstruction.
pub fn cycle_loss<S: Scalar>(tape: &Tape<S>, x: Var, x_back: Var) -> Result<Var> {
    let diff = tape.sub(x, x_back)?;
    Ok(tape.mean(tape.abs(diff)))
}
