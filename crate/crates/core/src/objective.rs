//! Loss terms, their weighted combination, and the ablation variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tape::bce_value;
use crate::tensor::Tensor;

/// Which of the discriminative modules are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Extractor and encoder-decoder only; cross entropy only.
    Base,
    /// Adds the class head, discriminative token and the BCE term.
    Vdmae,
    /// Adds attention consistency and the MSE term.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Base, Variant::Vdmae, Variant::Full];

    pub fn has_discriminative_token(self) -> bool {
        !matches!(self, Variant::Base)
    }

    pub fn has_consistency(self) -> bool {
        matches!(self, Variant::Full)
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Base => "Base",
            Variant::Vdmae => "Base+VDMAE",
            Variant::Full => "Base+VDMAE+VTAC",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Base => "base",
            Variant::Vdmae => "vdmae",
            Variant::Full => "full",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "vdmae" => Ok(Variant::Vdmae),
            "full" => Ok(Variant::Full),
            other => Err(Error::Invalid(format!(
                "unknown variant {other:?} (expected base, vdmae or full)"
            ))),
        }
    }
}

/// The three objective terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub bce: f64,
    pub mse: f64,
    pub lambda: f64,
    pub delta: f64,
    pub total: f64,
}

/// `ce + lambda * bce + delta * mse`, with terms absent from `variant`
/// forced to zero.
pub fn composite_loss(
    ce: f64,
    bce: f64,
    mse: f64,
    lambda: f64,
    delta: f64,
    variant: Variant,
) -> Result<LossBreakdown> {
    if !(lambda >= 0.0 && delta >= 0.0 && lambda.is_finite() && delta.is_finite()) {
        return Err(Error::Invalid(format!("loss weights must be finite and >= 0, got {lambda}, {delta}")));
    }
    let bce = if variant.has_discriminative_token() { bce } else { 0.0 };
    let mse = if variant.has_consistency() { mse } else { 0.0 };
    // an absent or skipped term contributes nothing whatever its weight
    let term = |w: f64, v: f64| if v == 0.0 { 0.0 } else { w * v };
    Ok(LossBreakdown {
        ce,
        bce,
        mse,
        lambda,
        delta,
        total: ce + term(lambda, bce) + term(delta, mse),
    })
}

/// Mean of `-ln p(target)` over positions with a target (`None` is padding).
pub fn report_cross_entropy<T: Scalar>(distributions: &Tensor<T>, targets: &[Option<usize>]) -> Result<T> {
    let (rows, vocab) = distributions.dims2();
    if rows != targets.len() {
        return shape_err("report_cross_entropy", distributions.shape(), &[targets.len()]);
    }
    let mut total = T::zero();
    let mut count = 0usize;
    for (i, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            if t >= vocab {
                return Err(Error::IndexOutOfRange {
                    what: "target",
                    index: t,
                    len: vocab,
                });
            }
            total -= distributions.get(i, t).ln();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("report targets"));
    }
    Ok(total / T::from_usize(count).unwrap())
}

/// Mean binary cross entropy with probabilities clamped to `[1e-12, 1 - 1e-12]`.
pub fn label_bce<T: Scalar>(probabilities: &[T], labels: &[T]) -> Result<T> {
    if probabilities.len() != labels.len() {
        return shape_err("label_bce", &[probabilities.len()], &[labels.len()]);
    }
    if labels.is_empty() {
        return Err(Error::Empty("labels"));
    }
    Ok(bce_value(probabilities, labels))
}
