//! Task-vector extraction and scaled merging.
//!
//! A task vector is the elementwise delta between a fine-tuned checkpoint and
//! its base: `tau = theta_domain - theta_base`. Merging adds a scaled delta to
//! a target checkpoint: `theta' = theta_target + alpha * tau`.
//!
//! Every float tensor in a file is treated the same way, whether it is a
//! weight matrix or a buffer such as a normalization statistic. Arithmetic is
//! accumulated in f64 and rounded once back to the storage dtype. Integer and
//! bool tensors are never differenced; they pass through from the target.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Deref;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor_store::{Checkpoint, DType, Role, TensorEntry, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum MergeError {
    #[error("scaling factor must be finite, got {0}")]
    NonFiniteAlpha(f64),
    #[error("incompatible checkpoints: {}", .0.join("; "))]
    Incompatible(Vec<String>),
    #[error("tensor `{name}` has dtype {left} in one input and {right} in the other")]
    DtypeMismatch {
        name: String,
        left: DType,
        right: DType,
    },
    #[error("task vector tensor `{name}` has non-float dtype {dtype}")]
    NonFloatTaskVector { name: String, dtype: DType },
    #[error("cannot combine an empty list of task vectors")]
    EmptyCombination,
    #[error("combination weight {0} is not finite")]
    NonFiniteWeight(f64),
    #[error("unknown mismatch policy `{0}` (expected strict, skip or intersect)")]
    UnknownPolicy(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How to treat tensors that do not line up between two checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MismatchPolicy {
    /// Name sets and shapes must agree exactly.
    #[default]
    Strict,
    /// Names present in only one input are omitted; shape disagreements are still errors.
    Skip,
    /// Operate on the compatible intersection: missing names and shape disagreements are omitted.
    Intersect,
}

impl MismatchPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            MismatchPolicy::Strict => "strict",
            MismatchPolicy::Skip => "skip",
            MismatchPolicy::Intersect => "intersect",
        }
    }
}

impl FromStr for MismatchPolicy {
    type Err = MergeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strict" => Ok(MismatchPolicy::Strict),
            "skip" => Ok(MismatchPolicy::Skip),
            "intersect" => Ok(MismatchPolicy::Intersect),
            other => Err(MergeError::UnknownPolicy(other.to_string())),
        }
    }
}

/// Scaling factor plus mismatch policy for a merge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeSpec {
    alpha: f64,
    policy: MismatchPolicy,
}

impl MergeSpec {
    pub fn new(alpha: f64, policy: MismatchPolicy) -> Result<Self, MergeError> {
        if !alpha.is_finite() {
            return Err(MergeError::NonFiniteAlpha(alpha));
        }
        Ok(MergeSpec { alpha, policy })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn policy(&self) -> MismatchPolicy {
        self.policy
    }
}

/// A checkpoint holding parameter deltas. All tensors are floating point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskVector(Checkpoint);

impl TaskVector {
    /// Wraps a loaded checkpoint, checking that every tensor is float.
    pub fn from_checkpoint(mut ckpt: Checkpoint) -> Result<Self, MergeError> {
        for (name, entry) in ckpt.iter() {
            if !entry.dtype().is_float() {
                return Err(MergeError::NonFloatTaskVector {
                    name: name.to_string(),
                    dtype: entry.dtype(),
                });
            }
        }
        ckpt.set_role(Role::TaskVector);
        Ok(TaskVector(ckpt))
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.0
    }
}

impl Deref for TaskVector {
    type Target = Checkpoint;

    fn deref(&self) -> &Checkpoint {
        &self.0
    }
}

/// A tensor left out of a result, and why.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Omission {
    OnlyInLeft(String),
    OnlyInRight(String),
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Integer or bool tensor, never differenced.
    NonFloat(String),
}

impl fmt::Display for Omission {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Omission::OnlyInLeft(n) => write!(f, "`{n}` only present in the first input"),
            Omission::OnlyInRight(n) => write!(f, "`{n}` only present in the second input"),
            Omission::ShapeMismatch { name, left, right } => {
                write!(f, "`{name}` has shape {left:?} vs {right:?}")
            }
            Omission::NonFloat(n) => write!(f, "`{n}` is not a float tensor"),
        }
    }
}

/// A result together with everything that was left out to produce it.
#[derive(Debug, Clone)]
pub struct WithOmissions<T> {
    pub value: T,
    pub omitted: Vec<Omission>,
}

enum Pairing<'a> {
    Both(&'a str, &'a TensorEntry, &'a TensorEntry),
    Omit(Omission),
}

/// Lines up the tensors of two checkpoints by name under `policy`.
/// Non-float pairs are reported as omissions. With `left_ints_optional`,
/// non-float tensors present only on the left are not a mismatch.
fn pair_up<'a>(
    left: &'a Checkpoint,
    right: &'a Checkpoint,
    policy: MismatchPolicy,
    left_ints_optional: bool,
) -> Result<Vec<Pairing<'a>>, MergeError> {
    let names: BTreeSet<&str> = left.names().chain(right.names()).collect();
    let mut offending = Vec::new();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        match (left.get(name), right.get(name)) {
            (Some(l), Some(r)) => {
                if l.dtype() != r.dtype() {
                    return Err(MergeError::DtypeMismatch {
                        name: name.to_string(),
                        left: l.dtype(),
                        right: r.dtype(),
                    });
                }
                if !l.dtype().is_float() {
                    out.push(Pairing::Omit(Omission::NonFloat(name.to_string())));
                } else if l.shape() != r.shape() {
                    let om = Omission::ShapeMismatch {
                        name: name.to_string(),
                        left: l.shape().to_vec(),
                        right: r.shape().to_vec(),
                    };
                    match policy {
                        MismatchPolicy::Intersect => out.push(Pairing::Omit(om)),
                        _ => offending.push(om.to_string()),
                    }
                } else {
                    out.push(Pairing::Both(name, l, r));
                }
            }
            (Some(l), None) if left_ints_optional && !l.dtype().is_float() => {
                out.push(Pairing::Omit(Omission::NonFloat(name.to_string())));
            }
            (Some(_), None) => {
                let om = Omission::OnlyInLeft(name.to_string());
                match policy {
                    MismatchPolicy::Strict => offending.push(om.to_string()),
                    _ => out.push(Pairing::Omit(om)),
                }
            }
            (None, Some(_)) => {
                let om = Omission::OnlyInRight(name.to_string());
                match policy {
                    MismatchPolicy::Strict => offending.push(om.to_string()),
                    _ => out.push(Pairing::Omit(om)),
                }
            }
            (None, None) => unreachable!(),
        }
    }
    if offending.is_empty() {
        Ok(out)
    } else {
        Err(MergeError::Incompatible(offending))
    }
}

fn zip_entries(
    a: &TensorEntry,
    b: &TensorEntry,
    op: impl Fn(f64, f64) -> f64,
) -> Result<TensorEntry, TensorError> {
    let xs = a.to_f64_vec()?;
    let ys = b.to_f64_vec()?;
    let out: Vec<f64> = xs.iter().zip(&ys).map(|(&x, &y)| op(x, y)).collect();
    TensorEntry::encode_f64(a.dtype(), a.shape().to_vec(), &out)
}

/// Computes the task vector `theta_domain - theta_base`.
pub fn diff_checkpoints(
    theta_domain: &Checkpoint,
    theta_base: &Checkpoint,
    policy: MismatchPolicy,
) -> Result<WithOmissions<TaskVector>, MergeError> {
    let pairs = pair_up(theta_domain, theta_base, policy, false)?;
    let mut omitted = Vec::new();
    let mut jobs = Vec::new();
    for p in pairs {
        match p {
            Pairing::Both(name, d, b) => jobs.push((name, d, b)),
            Pairing::Omit(om) => omitted.push(om),
        }
    }
    let tensors = jobs
        .into_par_iter()
        .map(|(name, d, b)| Ok((name.to_string(), zip_entries(d, b, |x, y| x - y)?)))
        .collect::<Result<Vec<_>, TensorError>>()?;

    let mut out = Checkpoint::new();
    for (name, entry) in tensors {
        out.insert(name, entry)?;
    }
    out.set_role(Role::TaskVector);
    out.set_metadata("policy", policy.as_str());
    Ok(WithOmissions {
        value: TaskVector(out),
        omitted,
    })
}

/// Merges `theta_target + alpha * tau`.
///
/// Target tensors that are not merged (integer tensors, names absent from
/// `tau` under a lenient policy) are carried over unchanged.
pub fn apply_task_vector(
    theta_target: &Checkpoint,
    tau: &TaskVector,
    spec: &MergeSpec,
) -> Result<WithOmissions<Checkpoint>, MergeError> {
    let alpha = spec.alpha();
    if !alpha.is_finite() {
        return Err(MergeError::NonFiniteAlpha(alpha));
    }
    for (name, entry) in tau.iter() {
        if !entry.dtype().is_float() {
            return Err(MergeError::NonFloatTaskVector {
                name: name.to_string(),
                dtype: entry.dtype(),
            });
        }
    }

    let pairs = pair_up(theta_target, tau, spec.policy(), true)?;
    let mut omitted = Vec::new();
    let mut jobs = Vec::new();
    for p in pairs {
        match p {
            Pairing::Both(name, t, d) => jobs.push((name, t, d)),
            // integer target tensors pass through silently
            Pairing::Omit(Omission::NonFloat(_)) => {}
            Pairing::Omit(om) => omitted.push(om),
        }
    }

    let merged = jobs
        .into_par_iter()
        .map(|(name, t, d)| {
            let entry = if alpha == 0.0 {
                t.clone()
            } else {
                zip_entries(t, d, |x, y| x + alpha * y)?
            };
            Ok((name.to_string(), entry))
        })
        .collect::<Result<Vec<_>, TensorError>>()?;

    let mut out = Checkpoint::new();
    for (name, entry) in merged {
        out.insert(name, entry)?;
    }
    for (name, entry) in theta_target.iter() {
        if !out.contains(name) {
            out.insert(name, entry.clone())?;
        }
    }
    for (k, v) in theta_target.metadata() {
        out.set_metadata(k.clone(), v.clone());
    }
    out.set_role(Role::Merged);
    out.set_metadata("alpha", format!("{alpha}"));
    out.set_metadata("policy", spec.policy().as_str());
    Ok(WithOmissions {
        value: out,
        omitted,
    })
}

/// Elementwise negation. Exact in every float dtype.
pub fn negate_task_vector(tau: &TaskVector) -> Result<TaskVector, MergeError> {
    let mut out = Checkpoint::new();
    for (name, entry) in tau.iter() {
        let values: Vec<f64> = entry.to_f64_vec()?.into_iter().map(|v| -v).collect();
        out.insert(
            name,
            TensorEntry::encode_f64(entry.dtype(), entry.shape().to_vec(), &values)?,
        )?;
    }
    for (k, v) in tau.metadata() {
        out.set_metadata(k.clone(), v.clone());
    }
    out.set_role(Role::TaskVector);
    Ok(TaskVector(out))
}

/// Weighted sum of task vectors, accumulated in f64 and rounded once.
pub fn combine_task_vectors(terms: &[(&TaskVector, f64)]) -> Result<TaskVector, MergeError> {
    let (first, _) = terms.first().ok_or(MergeError::EmptyCombination)?;
    for &(_, w) in terms {
        if !w.is_finite() {
            return Err(MergeError::NonFiniteWeight(w));
        }
    }
    for (tv, _) in &terms[1..] {
        pair_up(first, tv, MismatchPolicy::Strict, false)?;
    }

    let names: Vec<&str> = first.names().collect();
    let combined = names
        .into_par_iter()
        .map(|name| {
            let base = first.get(name).expect("name taken from first");
            let mut acc = vec![0.0f64; base.numel()];
            for (tv, w) in terms {
                let values = tv.get(name).expect("strict compatibility checked").to_f64_vec()?;
                for (a, v) in acc.iter_mut().zip(values) {
                    *a += w * v;
                }
            }
            let entry = TensorEntry::encode_f64(base.dtype(), base.shape().to_vec(), &acc)?;
            Ok((name.to_string(), entry))
        })
        .collect::<Result<Vec<_>, TensorError>>()?;

    let mut out = Checkpoint::new();
    for (name, entry) in combined {
        out.insert(name, entry)?;
    }
    out.set_role(Role::TaskVector);
    let weights: Vec<String> = terms.iter().map(|(_, w)| format!("{w}")).collect();
    out.set_metadata("weights", weights.join(","));
    Ok(TaskVector(out))
}
