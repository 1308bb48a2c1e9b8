//! Visual-textual attention consistency: important-word selection, the
//! textual discriminative map and its squared-error agreement with the
//! visual map.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tape::NORM_FLOOR;
use crate::tensor::{relu_min_max, Tensor};
use crate::vdm::max_pool;

/// Default proportion of selected words.
pub const DEFAULT_K: f64 = 0.25;

/// Cosine similarity of each word to `r*`. Masked positions hold
/// `-inf` and are never selected.
#[derive(Clone, Debug, PartialEq)]
pub struct WordSimilarities<T>(pub Vec<T>);

impl<T: Scalar> WordSimilarities<T> {
    pub fn values(&self) -> &[T] {
        &self.0
    }

    /// Number of selectable (unmasked) words.
    pub fn selectable(&self) -> usize {
        self.0.iter().filter(|v| v.is_finite()).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportantWordSelection<T> {
    /// Word positions in descending similarity order.
    pub indices: Vec<usize>,
    /// `ReLU(s_j)` for each selected word, aligned with `indices`.
    pub weights: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextualDiscriminativeMap<T>(pub Vec<T>);

impl<T: Scalar> TextualDiscriminativeMap<T> {
    pub fn values(&self) -> &[T] {
        &self.0
    }
}

/// `s_j = (l_j . r*) / (|l_j| |r*|)`, norms floored at `1e-12`.
/// `selectable[j]` is false for special tokens.
pub fn word_similarities<T: Scalar>(
    l_r: &Tensor<T>,
    r_star: &[T],
    selectable: &[bool],
) -> Result<WordSimilarities<T>> {
    let (n, d) = l_r.dims2();
    if d != r_star.len() && n > 0 {
        return shape_err("word_similarities", l_r.shape(), &[r_star.len()]);
    }
    if selectable.len() != n {
        return shape_err("word_similarities mask", l_r.shape(), &[selectable.len()]);
    }
    let floor = T::lit(NORM_FLOOR);
    let nr = r_star.iter().map(|&x| x * x).sum::<T>().sqrt().max(floor);
    Ok(WordSimilarities(
        (0..n)
            .map(|j| {
                if !selectable[j] {
                    return T::neg_infinity();
                }
                let row = l_r.row_slice(j);
                let nl = row.iter().map(|&x| x * x).sum::<T>().sqrt().max(floor);
                row.iter().zip(r_star).map(|(&a, &b)| a * b).sum::<T>() / (nl * nr)
            })
            .collect(),
    ))
}

/// `ceil(k * n)` clamped to `1..=n`. A tolerance absorbs representation
/// error so that e.g. `0.3 * 10` selects 3 words, not 4.
pub fn selection_size(k: f64, n: usize) -> usize {
    let raw = k * n as f64;
    let g = (raw - 1e-9 * raw.max(1.0)).ceil() as usize;
    g.clamp(1, n.max(1))
}

/// Picks the `ceil(k * N^r)` most similar selectable words, ties broken by
/// lower position. Returns `None` when no word is selectable.
pub fn select_important_words<T: Scalar>(
    s: &WordSimilarities<T>,
    k: f64,
) -> Result<Option<ImportantWordSelection<T>>> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::Invalid(format!("word proportion k = {k} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..s.0.len()).filter(|&j| s.0[j].is_finite()).collect();
    if order.is_empty() {
        return Ok(None);
    }
    let gamma = selection_size(k, order.len());
    order.sort_by(|&a, &b| s.0[b].partial_cmp(&s.0[a]).expect("finite").then(a.cmp(&b)));
    order.truncate(gamma);
    let weights = order.iter().map(|&j| s.0[j].max(T::zero())).collect();
    Ok(Some(ImportantWordSelection {
        indices: order,
        weights,
    }))
}

/// Normalizes each attention row (ReLU + min-max), scales it by its word
/// weight, and max-pools over rows.
pub fn textual_discriminative_map<T: Scalar>(
    attention: &Tensor<T>,
    weights: &[T],
) -> Result<TextualDiscriminativeMap<T>> {
    let (gamma, _) = attention.dims2();
    if gamma == 0 {
        return Err(Error::Empty("selected words"));
    }
    if weights.len() != gamma {
        return shape_err("textual_discriminative_map", attention.shape(), &[weights.len()]);
    }
    let rows: Vec<Vec<T>> = (0..gamma)
        .map(|i| {
            relu_min_max(attention.row_slice(i))
                .into_iter()
                .map(|v| v * weights[i])
                .collect()
        })
        .collect();
    let refs: Vec<&[T]> = rows.iter().map(Vec::as_slice).collect();
    Ok(TextualDiscriminativeMap(max_pool(&refs)?))
}

/// `(1/N^s) sum_j (d^t_j - d^v_j)^2`
pub fn consistency_loss<T: Scalar>(d_t: &[T], d_v: &[T]) -> Result<T> {
    if d_t.len() != d_v.len() {
        return shape_err("consistency_loss", &[d_t.len()], &[d_v.len()]);
    }
    if d_t.is_empty() {
        return Err(Error::Empty("consistency_loss"));
    }
    let s: T = d_t.iter().zip(d_v).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(s / T::from_usize(d_t.len()).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_examples() {
        let l = Tensor::from_rows(&[vec![1.0f64, 1.0], vec![1.0, -1.0], vec![1.0, 0.0], vec![5.0, 5.0]]).unwrap();
        let s = word_similarities(&l, &[1.0, 1.0], &[true, true, true, false]).unwrap();
        assert!((s.0[0] - 1.0).abs() < 1e-15);
        assert_eq!(s.0[1], 0.0);
        assert!((s.0[2] - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.0[3], f64::NEG_INFINITY);
        assert_eq!(s.selectable(), 3);
    }

    #[test]
    fn zero_vectors_are_safe() {
        let l = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let s = word_similarities(&l, &[0.0, 0.0], &[true]).unwrap();
        assert_eq!(s.0[0], 0.0);
    }

    #[test]
    fn gamma_is_ceiling() {
        assert_eq!(selection_size(0.25, 10), 3);
        assert_eq!(selection_size(0.3, 10), 3);
        assert_eq!(selection_size(0.25, 1), 1);
        assert_eq!(selection_size(0.01, 3), 1);
        assert_eq!(selection_size(1.0, 7), 7);
    }

    #[test]
    fn selection_order_ties_and_weights() {
        let s = WordSimilarities(vec![0.2, -0.4, 0.9, 0.2, f64::NEG_INFINITY]);
        let sel = select_important_words(&s, 0.75).unwrap().unwrap();
        assert_eq!(sel.indices, vec![2, 0, 3]);
        assert_eq!(sel.weights, vec![0.9, 0.2, 0.2]);
        let all = select_important_words(&s, 1.0).unwrap().unwrap();
        assert_eq!(all.indices, vec![2, 0, 3, 1]);
        assert_eq!(all.weights[3], 0.0);
    }

    #[test]
    fn all_masked_skips() {
        let s = WordSimilarities(vec![f64::NEG_INFINITY; 3]);
        assert!(select_important_words(&s, 0.25).unwrap().is_none());
        assert!(select_important_words(&WordSimilarities(vec![0.1]), 0.0).is_err());
    }

    #[test]
    fn tdm_examples() {
        let a = Tensor::row(vec![0.0, 1.0]);
        assert_eq!(textual_discriminative_map(&a, &[0.5]).unwrap().0, vec![0.0, 0.5]);
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(textual_discriminative_map(&a, &[1.0, 1.0]).unwrap().0, vec![1.0, 1.0]);
        assert_eq!(textual_discriminative_map(&a, &[0.0, 0.0]).unwrap().0, vec![0.0, 0.0]);
        assert!(textual_discriminative_map(&Tensor::<f64>::zeros(&[0, 2]), &[]).is_err());
    }

    #[test]
    fn loss_examples() {
        assert_eq!(consistency_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(consistency_loss(&[0.0, 1.0], &[1.0, 1.0]).unwrap(), 0.5);
        assert_eq!(
            consistency_loss(&[0.1, 0.9, 0.4], &[0.6, 0.2, 0.0]).unwrap(),
            consistency_loss(&[0.6, 0.2, 0.0], &[0.1, 0.9, 0.4]).unwrap()
        );
        assert!(consistency_loss(&[0.1], &[0.1, 0.2]).is_err());
    }
}
