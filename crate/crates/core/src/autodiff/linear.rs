//! Differentiable wrappers for fixed linear operators on image planes.

use std::rc::Rc;

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// A linear map from `[h_in, w_in]` planes to `[h_out, w_out]` planes.
///
/// Implementors supply the forward map and its exact adjoint; both write
/// into a zeroed destination. Leading axes of a tensor are treated as a
/// batch of independent planes.
pub trait PlaneMap<T: Element> {
    fn in_dims(&self) -> (usize, usize);
    fn out_dims(&self) -> (usize, usize);
    fn forward_plane(&self, src: &[T], dst: &mut [T]);
    fn adjoint_plane(&self, src: &[T], dst: &mut [T]);
}

fn apply_planes<T: Element>(
    x: &Tensor<T>,
    from: (usize, usize),
    to: (usize, usize),
    f: impl Fn(&[T], &mut [T]),
) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 2 || (s[s.len() - 2], s[s.len() - 1]) != from {
        return Err(Error::Shape(format!(
            "linear map expects trailing dims {from:?}, got {s:?}"
        )));
    }
    let (pin, pout) = (from.0 * from.1, to.0 * to.1);
    let batch = x.len() / pin;
    let mut out = vec![T::zero(); batch * pout];
    for (src, dst) in x.data().chunks_exact(pin).zip(out.chunks_exact_mut(pout)) {
        f(src, dst);
    }
    let mut shape = s[..s.len() - 2].to_vec();
    shape.extend([to.0, to.1]);
    Tensor::new(shape, out)
}

pub(crate) fn apply_forward<T: Element>(map: &dyn PlaneMap<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    apply_planes(x, map.in_dims(), map.out_dims(), |s, d| map.forward_plane(s, d))
}

pub(crate) fn apply_adjoint<T: Element>(map: &dyn PlaneMap<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    apply_planes(y, map.out_dims(), map.in_dims(), |s, d| map.adjoint_plane(s, d))
}

/// Applies `map` to every trailing plane of `x`.
pub fn linear_map<T: Element>(map: Rc<dyn PlaneMap<T>>, x: &Var<T>) -> Result<Var<T>> {
    let value = apply_forward(map.as_ref(), x.value())?;
    Ok(Var::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, _| Ok(vec![linear_adjoint(Rc::clone(&map), g)?])),
    ))
}

/// Applies the adjoint of `map` to every trailing plane of `y`.
pub fn linear_adjoint<T: Element>(map: Rc<dyn PlaneMap<T>>, y: &Var<T>) -> Result<Var<T>> {
    let value = apply_adjoint(map.as_ref(), y.value())?;
    Ok(Var::from_op(
        value,
        vec![y.clone()],
        Box::new(move |g, _| Ok(vec![linear_map(Rc::clone(&map), g)?])),
    ))
}
