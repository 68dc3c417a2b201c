//! Structural probes of spatial mixers: which input positions influence which
//! outputs, and whether token-mixing weights depend on the input.

use spach_tensor::{Element, Graph, Tensor};

use super::{SpatialBody, SpatialMixer};
use crate::error::Result;

/// `m[p][q]` = L2 norm over channels of `d(sum_c branch(x)[0, c, p]) / d x[0, :, q]`,
/// where `branch` is the mixer output before the residual and `p`, `q` index
/// flattened spatial positions of the first sample.
pub fn token_influence<T: Element>(
    mixer: &SpatialMixer<T>,
    x: &Tensor<T>,
) -> Result<Vec<Vec<f64>>> {
    let shape = x.shape();
    let (c, t) = (shape[1], shape[2] * shape[3]);
    let mut out = Vec::with_capacity(t);
    for p in 0..t {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let y = mixer.branch(&mut g, xv)?;
        let mask = Tensor::from_fn(g.shape(y).to_vec(), |i| {
            if i < c * t && i % t == p {
                T::one()
            } else {
                T::zero()
            }
        })?;
        let m = g.constant(mask);
        let picked = g.mul(y, m)?;
        let loss = g.sum(picked);
        g.backward(loss)?;
        let grad = g.grad(xv).expect("leaf requires grad");
        let row = (0..t)
            .map(|q| {
                (0..c)
                    .map(|ch| grad.data()[ch * t + q].as_f64().powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        out.push(row);
    }
    Ok(out)
}

/// Jacobian `[hidden, T]` of the first token-MLP layer (before its activation),
/// evaluated at the first channel row of the normalized input `x`.
///
/// `None` for mixers that are not token MLPs.
pub fn token_mlp_jacobian<T: Element>(
    mixer: &SpatialMixer<T>,
    x: &Tensor<T>,
) -> Result<Option<Tensor<f64>>> {
    let SpatialBody::Mlp { fc1, .. } = &mixer.body else {
        return Ok(None);
    };
    let t = fc1.in_features();
    let hidden = fc1.out_features();
    // The layer is affine, so any input row serves as the linearization point.
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let u = mixer.norm.forward_channels(&mut g, xv)?;
    let row: Vec<T> = g.value(u).data()[..t].to_vec();
    let mut jac = Vec::with_capacity(hidden * t);
    for j in 0..hidden {
        let mut g = Graph::new();
        let r = g.leaf(Tensor::from_vec([1, t], row.clone())?, true);
        let y = fc1.forward(&mut g, r)?;
        let sel = g.constant(Tensor::from_fn([1, hidden], |i| {
            if i == j {
                T::one()
            } else {
                T::zero()
            }
        })?);
        let picked = g.mul(y, sel)?;
        let loss = g.sum(picked);
        g.backward(loss)?;
        jac.extend(
            g.grad(r)
                .expect("leaf requires grad")
                .data()
                .iter()
                .map(|v| v.as_f64()),
        );
    }
    Ok(Some(Tensor::from_vec([hidden, t], jac)?))
}
