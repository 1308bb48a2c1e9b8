//! Discriminative representation: the VDM-weighted patch sum, injected as an
//! extra encoder token and split off again before decoding.

use crate::error::{shape_err, Error, Result};
use crate::nn::LayerNorm;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{layer_normalize, matmul, Tensor, LAYER_NORM_EPS};

/// Row index of the discriminative token in the encoder input.
pub const DISCRIMINATIVE_SLOT: usize = 0;

/// `r = d^v v^s`, a `1 x C` row. `d^v` is a constant.
pub fn discriminative_representation<T: Scalar>(d_v: &[T], v_s: &Tensor<T>) -> Result<Tensor<T>> {
    if d_v.len() != v_s.rows() {
        return shape_err("discriminative_representation", &[d_v.len()], v_s.shape());
    }
    matmul(&Tensor::row(d_v.to_vec()), v_s)
}

/// Normalized representation `r'` with the given affine.
pub fn normalize_representation<T: Scalar>(r: &Tensor<T>, gain: &[T], bias: &[T]) -> Result<Tensor<T>> {
    Ok(Tensor::row(layer_normalize(r.data(), gain, bias, T::lit(LAYER_NORM_EPS))?))
}

/// Prepends `r'` to the visual tokens.
pub fn inject_token<T: Scalar>(r_norm: &Tensor<T>, v_s: &Tensor<T>) -> Result<Tensor<T>> {
    if r_norm.dims2() != (1, v_s.cols()) {
        return shape_err("inject_token", r_norm.shape(), v_s.shape());
    }
    let mut data = r_norm.data().to_vec();
    data.extend_from_slice(v_s.data());
    Tensor::matrix(v_s.rows() + 1, v_s.cols(), data)
}

/// Encoded discriminative token and the decoder memory.
#[derive(Clone, Debug)]
pub struct SplitMemory<V> {
    pub r_star: V,
    pub memory: V,
}

/// Splits a value-level encoding of `n + 1` rows.
pub fn split_memory<T: Scalar>(encoded: &Tensor<T>, visual_tokens: usize) -> Result<SplitMemory<Tensor<T>>> {
    let (rows, d) = encoded.dims2();
    if rows != visual_tokens + 1 {
        return shape_err("split_memory", encoded.shape(), &[visual_tokens + 1, d]);
    }
    let r_star = Tensor::row(encoded.row_slice(DISCRIMINATIVE_SLOT).to_vec());
    let memory = Tensor::matrix(visual_tokens, d, encoded.data()[d..].to_vec())?;
    Ok(SplitMemory { r_star, memory })
}

/// Tape-level VDMAE: builds `r'` from `v^s` and the constant `d^v`.
#[derive(Clone, Debug)]
pub struct DiscriminativeToken {
    pub norm: LayerNorm,
}

impl DiscriminativeToken {
    /// Returns `r` and `r'`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        d_v: &[T],
        v_s: Var,
    ) -> Result<(Var, Var)> {
        if d_v.len() != tape.value(v_s).rows() {
            return shape_err("discriminative_representation", &[d_v.len()], tape.shape(v_s));
        }
        let weights = tape.constant(Tensor::row(d_v.to_vec()));
        let r = tape.matmul(weights, v_s)?;
        let r_norm = self.norm.forward(tape, store, r)?;
        Ok((r, r_norm))
    }
}

/// Tape-level split. The memory is a slice that never reads row 0, so no
/// decoder path reaches `r*`.
pub fn split_memory_on_tape<T: Scalar>(tape: &mut Tape<T>, encoded: Var) -> Result<SplitMemory<Var>> {
    let rows = tape.value(encoded).rows();
    if rows < 2 {
        return Err(Error::Invalid(format!(
            "encoded sequence of {rows} rows has no visual tokens after the discriminative slot"
        )));
    }
    Ok(SplitMemory {
        r_star: tape.slice_rows(encoded, 0, 1)?,
        memory: tape.slice_rows(encoded, 1, rows)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vs() -> Tensor<f64> {
        Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap()
    }

    #[test]
    fn representation_examples() {
        assert_eq!(discriminative_representation(&[1.0, 0.0], &vs()).unwrap().data(), &[1., 2.]);
        assert_eq!(discriminative_representation(&[0.0, 0.0], &vs()).unwrap().data(), &[0., 0.]);
        assert_eq!(discriminative_representation(&[0.5, 0.5], &vs()).unwrap().data(), &[2., 3.]);
        assert!(discriminative_representation(&[1.0], &vs()).is_err());
    }

    #[test]
    fn normalized_representation_has_zero_mean() {
        let r = discriminative_representation(&[0.3, 0.9], &vs()).unwrap();
        let n = normalize_representation(&r, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!(n.data().iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn inject_prepends() {
        let r = Tensor::row(vec![9.0, 8.0]);
        let x = inject_token(&r, &vs()).unwrap();
        assert_eq!(x.shape(), &[3, 2]);
        assert_eq!(x.row_slice(0), &[9.0, 8.0]);
        assert_eq!(x.row_slice(2), &[3.0, 4.0]);
        assert!(inject_token(&Tensor::row(vec![1.0]), &vs()).is_err());
    }

    #[test]
    fn split_shapes() {
        let enc = Tensor::matrix(3, 2, vec![9., 8., 1., 2., 3., 4.]).unwrap();
        let s = split_memory(&enc, 2).unwrap();
        assert_eq!(s.r_star.data(), &[9., 8.]);
        assert_eq!(s.memory, vs());
        assert!(split_memory(&enc, 3).is_err());
    }
}
