//! Elementwise, reduction and layout ops.

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{numel, Element, Tensor};

fn binary<T: Element>(a: &Var<T>, b: &Var<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    a.value().zip_map(b.value(), f)
}

pub fn add<T: Element>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let value = binary(a, b, |x, y| x + y)?;
    Ok(Var::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(|g, _| Ok(vec![g.clone(), g.clone()])),
    ))
}

pub fn sub<T: Element>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let value = binary(a, b, |x, y| x - y)?;
    Ok(Var::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(|g, _| Ok(vec![g.clone(), neg(g)])),
    ))
}

pub fn mul<T: Element>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let value = binary(a, b, |x, y| x * y)?;
    Ok(Var::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(|g, p| Ok(vec![mul(g, &p[1])?, mul(g, &p[0])?])),
    ))
}

pub fn neg<T: Element>(a: &Var<T>) -> Var<T> {
    scale(a, -1.0)
}

/// Multiplies by a constant.
pub fn scale<T: Element>(a: &Var<T>, c: f64) -> Var<T> {
    let k = T::from_f64_lossy(c);
    Var::from_op(
        a.value().map(|x| x * k),
        vec![a.clone()],
        Box::new(move |g, _| Ok(vec![scale(g, c)])),
    )
}

pub fn add_scalar<T: Element>(a: &Var<T>, c: f64) -> Var<T> {
    let k = T::from_f64_lossy(c);
    Var::from_op(
        a.value().map(|x| x + k),
        vec![a.clone()],
        Box::new(|g, _| Ok(vec![g.clone()])),
    )
}

/// Rectifier with derivative 0 at 0.
pub fn relu<T: Element>(a: &Var<T>) -> Var<T> {
    let value = a.value().map(|x| if x > T::zero() { x } else { T::zero() });
    Var::from_op(
        value,
        vec![a.clone()],
        Box::new(|g, p| {
            let mask = p[0]
                .value()
                .map(|x| if x > T::zero() { T::one() } else { T::zero() });
            Ok(vec![mul(g, &Var::constant(mask))?])
        }),
    )
}

pub fn square<T: Element>(a: &Var<T>) -> Var<T> {
    Var::from_op(
        a.value().map(|x| x * x),
        vec![a.clone()],
        Box::new(|g, p| Ok(vec![mul(g, &scale(&p[0], 2.0))?])),
    )
}

pub fn exp<T: Element>(a: &Var<T>) -> Var<T> {
    Var::from_op(
        a.value().map(T::exp),
        vec![a.clone()],
        Box::new(|g, p| Ok(vec![mul(g, &exp(&p[0]))?])),
    )
}

pub fn sqrt<T: Element>(a: &Var<T>) -> Var<T> {
    Var::from_op(
        a.value().map(T::sqrt),
        vec![a.clone()],
        Box::new(|g, p| Ok(vec![mul(g, &scale(&recip(&sqrt(&p[0])), 0.5))?])),
    )
}

pub fn recip<T: Element>(a: &Var<T>) -> Var<T> {
    Var::from_op(
        a.value().map(T::recip),
        vec![a.clone()],
        Box::new(|g, p| Ok(vec![mul(g, &neg(&recip(&square(&p[0]))))?])),
    )
}

/// Sum of all elements, shape `[1]`.
pub fn sum<T: Element>(a: &Var<T>) -> Var<T> {
    let shape = a.shape().to_vec();
    Var::from_op(
        Tensor::scalar(a.value().sum()),
        vec![a.clone()],
        Box::new(move |g, _| Ok(vec![expand(g, &shape)?])),
    )
}

pub fn mean<T: Element>(a: &Var<T>) -> Var<T> {
    scale(&sum(a), 1.0 / a.len() as f64)
}

/// Broadcasts a one-element var to `shape`.
pub fn expand<T: Element>(s: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
    if s.len() != 1 {
        return Err(Error::Shape(format!(
            "expand needs a scalar, got {:?}",
            s.shape()
        )));
    }
    let value = Tensor::full(shape.to_vec(), s.item());
    Ok(Var::from_op(
        value,
        vec![s.clone()],
        Box::new(|g, p| Ok(vec![reshape(&sum(g), p[0].shape())?])),
    ))
}

pub fn dot<T: Element>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    Ok(sum(&mul(a, b)?))
}

/// Euclidean norm, shape `[1]`.
pub fn l2_norm<T: Element>(a: &Var<T>) -> Var<T> {
    sqrt(&sum(&square(a)))
}

/// `s · t` for a one-element `s`.
pub fn broadcast_scalar_mul<T: Element>(s: &Var<T>, t: &Var<T>) -> Result<Var<T>> {
    mul(&expand(s, t.shape())?, t)
}

pub fn reshape<T: Element>(a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
    let from = a.shape().to_vec();
    let value = a.value().reshape(shape.to_vec())?;
    Ok(Var::from_op(
        value,
        vec![a.clone()],
        Box::new(move |g, _| Ok(vec![reshape(g, &from)?])),
    ))
}

pub fn flatten<T: Element>(a: &Var<T>) -> Result<Var<T>> {
    reshape(a, &[a.len()])
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

/// Joins vars along `axis`; all other extents must agree.
pub fn concat<T: Element>(parts: &[Var<T>], axis: usize) -> Result<Var<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let rank = first.shape().len();
    let (outer, _, inner) = split_axis(first.shape(), axis)?;
    let mut total = 0;
    for p in parts {
        let s = p.shape();
        if s.len() != rank
            || s.iter()
                .enumerate()
                .any(|(i, &d)| i != axis && d != first.shape()[i])
        {
            return Err(Error::Shape(format!(
                "concat along {axis}: {:?} vs {:?}",
                first.shape(),
                s
            )));
        }
        total += s[axis];
    }
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let mid = p.shape()[axis];
            data.extend_from_slice(&p.value().data()[o * mid * inner..(o + 1) * mid * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    Ok(Var::from_op(
        Tensor::new(shape, data)?,
        parts.to_vec(),
        Box::new(move |g, _| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&len| {
                    let s = slice(g, axis, start, len);
                    start += len;
                    s
                })
                .collect()
        }),
    ))
}

/// `len` entries of `a` along `axis` starting at `start`.
pub fn slice<T: Element>(a: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
    let (outer, mid, inner) = split_axis(a.shape(), axis)?;
    if len == 0 || start + len > mid {
        return Err(Error::Index(format!(
            "slice {start}..{} of axis {axis} with extent {mid}",
            start + len
        )));
    }
    let src = a.value().data();
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * mid + start) * inner;
        data.extend_from_slice(&src[base..base + len * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = len;
    Ok(Var::from_op(
        Tensor::new(shape, data)?,
        vec![a.clone()],
        Box::new(move |g, _| Ok(vec![pad_axis(g, axis, start, mid)?])),
    ))
}

/// Places `a` at offset `before` inside zeros of extent `total` along `axis`.
pub fn pad_axis<T: Element>(a: &Var<T>, axis: usize, before: usize, total: usize) -> Result<Var<T>> {
    let (outer, mid, inner) = split_axis(a.shape(), axis)?;
    if before + mid > total {
        return Err(Error::Shape(format!(
            "pad of extent {mid} at {before} exceeds {total}"
        )));
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = total;
    let mut out = Tensor::zeros(shape);
    let dst = out.data_mut();
    let src = a.value().data();
    for o in 0..outer {
        let d = (o * total + before) * inner;
        dst[d..d + mid * inner].copy_from_slice(&src[o * mid * inner..(o + 1) * mid * inner]);
    }
    Ok(Var::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g, _| Ok(vec![slice(g, axis, before, mid)?])),
    ))
}

/// Sums a `[N, C, ...]` var over every axis except 1, giving `[C]`.
pub fn channel_sum<T: Element>(a: &Var<T>) -> Result<Var<T>> {
    let shape = a.shape().to_vec();
    let (outer, c, inner) = split_axis(&shape, 1)?;
    let src = a.value().data();
    let mut acc = vec![T::zero(); c];
    for o in 0..outer {
        for (ch, slot) in acc.iter_mut().enumerate() {
            let base = (o * c + ch) * inner;
            *slot += src[base..base + inner].iter().copied().sum::<T>();
        }
    }
    Ok(Var::from_op(
        Tensor::new(vec![c], acc)?,
        vec![a.clone()],
        Box::new(move |g, _| Ok(vec![channel_broadcast(g, &shape)?])),
    ))
}

/// Broadcasts a `[C]` var along axis 1 of `shape`.
pub fn channel_broadcast<T: Element>(b: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
    let (outer, c, inner) = split_axis(shape, 1)?;
    if b.shape() != [c] {
        return Err(Error::Shape(format!(
            "bias {:?} does not match {} channels",
            b.shape(),
            c
        )));
    }
    let bv = b.value().data();
    let mut data = Vec::with_capacity(outer * c * inner);
    for _ in 0..outer {
        for &v in bv {
            data.extend(std::iter::repeat_n(v, inner));
        }
    }
    Ok(Var::from_op(
        Tensor::new(shape.to_vec(), data)?,
        vec![b.clone()],
        Box::new(|g, _| Ok(vec![channel_sum(g)?])),
    ))
}

/// Adds a per-channel bias to a `[N, C, H, W]` var.
pub fn bias_add<T: Element>(y: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    add(y, &channel_broadcast(b, y.shape())?)
}
