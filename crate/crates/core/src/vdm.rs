//! Multi-label classification over pooled patch features and the class
//! activation map pipeline that yields the visual discriminative map.
//!
//! Class head weights are stored as a `C x N^c` matrix: column `i` holds the
//! weights of class `i`, so `logits = v_g W_c`.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{argmax, matmul, relu_min_max, sigmoid, Tensor};

/// Presence threshold: a class is present iff its probability exceeds this.
pub const PRESENCE_THRESHOLD: f64 = 0.5;

/// Multi-hot pseudo label vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabel(Vec<bool>);

impl PseudoLabel {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    /// Accepts only 0/1 entries.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        values
            .iter()
            .map(|&v| match v {
                v if v == 0.0 => Ok(false),
                v if v == 1.0 => Ok(true),
                v => Err(Error::Invalid(format!("pseudo label entry {v} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_scalars<T: Scalar>(&self) -> Vec<T> {
        self.0.iter().map(|&b| if b { T::one() } else { T::zero() }).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbabilities<T> {
    pub logits: Vec<T>,
    pub probabilities: Vec<T>,
    pub presence: Vec<bool>,
}

impl<T: Scalar> ClassProbabilities<T> {
    pub fn from_logits(logits: Vec<T>) -> Self {
        let probabilities: Vec<T> = logits.iter().map(|&z| sigmoid(z)).collect();
        let presence = probabilities.iter().map(|&p| present(p)).collect();
        Self {
            logits,
            probabilities,
            presence,
        }
    }

    pub fn present_classes(&self) -> Vec<usize> {
        (0..self.presence.len()).filter(|&i| self.presence[i]).collect()
    }
}

/// Threshold rule: `o <= 0.5` is absent.
pub fn present<T: Scalar>(p: T) -> bool {
    p > T::lit(PRESENCE_THRESHOLD)
}

/// Raw per-patch contribution of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassActivationMap<T>(pub Vec<T>);

/// Aggregated visual saliency in `[0, 1]`, one entry per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualDiscriminativeMap<T>(pub Vec<T>);

impl<T: Scalar> VisualDiscriminativeMap<T> {
    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Mean of the patch tokens, `1 x C`.
pub fn global_pool<T: Scalar>(v_s: &Tensor<T>) -> Result<Vec<T>> {
    let (n, c) = v_s.dims2();
    if n == 0 {
        return Err(Error::Empty("patch features"));
    }
    let mut g = vec![T::zero(); c];
    for r in 0..n {
        for (a, &v) in g.iter_mut().zip(v_s.row_slice(r)) {
            *a += v;
        }
    }
    let inv = T::one() / T::from_usize(n).unwrap();
    g.iter_mut().for_each(|v| *v *= inv);
    Ok(g)
}

/// Global average pooling, linear head, elementwise sigmoid and threshold.
pub fn classify_global<T: Scalar>(v_s: &Tensor<T>, w_c: &Tensor<T>) -> Result<ClassProbabilities<T>> {
    if v_s.cols() != w_c.rows() {
        return shape_err("classify_global", v_s.shape(), w_c.shape());
    }
    let g = Tensor::row(global_pool(v_s)?);
    let logits = matmul(&g, w_c)?.into_data();
    Ok(ClassProbabilities::from_logits(logits))
}

/// All class activation maps at once, `N^s x N^c`; column `i` is `m^i`.
pub fn class_activation_maps<T: Scalar>(v_s: &Tensor<T>, w_c: &Tensor<T>) -> Result<Tensor<T>> {
    if v_s.cols() != w_c.rows() {
        return shape_err("class_activation_map", v_s.shape(), w_c.shape());
    }
    matmul(v_s, w_c)
}

/// `m^i_j = w_c^i . v^s_j` for every patch `j`.
pub fn class_activation_map<T: Scalar>(
    v_s: &Tensor<T>,
    w_c: &Tensor<T>,
    class: usize,
) -> Result<ClassActivationMap<T>> {
    let classes = w_c.cols();
    if class >= classes {
        return Err(Error::IndexOutOfRange {
            what: "class",
            index: class,
            len: classes,
        });
    }
    let all = class_activation_maps(v_s, w_c)?;
    Ok(ClassActivationMap(
        (0..all.rows()).map(|j| all.get(j, class)).collect(),
    ))
}

/// ReLU then min-max normalization; constant maps become all zeros.
pub fn normalize_map<T: Scalar>(m: &[T]) -> Vec<T> {
    relu_min_max(m)
}

/// Elementwise maximum over equally long maps.
pub fn max_pool<T: Scalar>(maps: &[&[T]]) -> Result<Vec<T>> {
    let first = maps.first().ok_or(Error::Empty("maps to pool"))?;
    let mut out = first.to_vec();
    for m in &maps[1..] {
        if m.len() != out.len() {
            return shape_err("max_pool", &[out.len()], &[m.len()]);
        }
        for (o, &v) in out.iter_mut().zip(m.iter()) {
            *o = o.max(v);
        }
    }
    Ok(out)
}

/// Max-pools the normalized maps of present classes. When no class is
/// present, the map of the most probable class is used instead.
///
/// `normalized[i]` is the normalized map of class `i`.
pub fn aggregate_vdm<T: Scalar>(
    normalized: &[Vec<T>],
    probs: &ClassProbabilities<T>,
) -> Result<VisualDiscriminativeMap<T>> {
    if normalized.len() != probs.probabilities.len() {
        return shape_err("aggregate_vdm", &[normalized.len()], &[probs.probabilities.len()]);
    }
    let mut chosen: Vec<&[T]> = probs
        .present_classes()
        .into_iter()
        .map(|i| normalized[i].as_slice())
        .collect();
    if chosen.is_empty() {
        let best = argmax(&probs.probabilities).ok_or(Error::Empty("class probabilities"))?;
        chosen.push(&normalized[best]);
    }
    Ok(VisualDiscriminativeMap(max_pool(&chosen)?))
}

/// Full pipeline from patch tokens and head weights.
pub fn visual_discriminative_map<T: Scalar>(
    v_s: &Tensor<T>,
    w_c: &Tensor<T>,
) -> Result<(ClassProbabilities<T>, Tensor<T>, VisualDiscriminativeMap<T>)> {
    let probs = classify_global(v_s, w_c)?;
    let cams = class_activation_maps(v_s, w_c)?;
    let normalized: Vec<Vec<T>> = (0..cams.cols())
        .map(|i| {
            let col: Vec<T> = (0..cams.rows()).map(|j| cams.get(j, i)).collect();
            normalize_map(&col)
        })
        .collect();
    let vdm = aggregate_vdm(&normalized, &probs)?;
    Ok((probs, cams, vdm))
}
