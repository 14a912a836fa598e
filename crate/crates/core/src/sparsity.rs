//! Channel-wise spatial Top-K sparsification.
//!
//! For every channel plane of a `[c, h, w]` (or `[n, c, h, w]`) tensor, the
//! `K` responses with the largest absolute value are kept and the rest are
//! zeroed. Selection is exact-K: among equal magnitudes the lower row-major
//! index wins, so a plane never keeps more than `K` entries even on ties.
//!
//! The mean-replacement variant writes the mean of the kept values into
//! every kept position, so each channel reduces to a binary mask plus one
//! scalar.
//!
//! Backward treats the selection as locally constant: gradients flow only
//! through kept positions (hard), or are averaged over them
//! (mean-replacement). Away from magnitude ties this is the true gradient;
//! on ties it is one element of the subdifferential.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Function, Tape, Var, VjpContext};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Hard,
    MeanReplacement,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Hard => "hard",
            Variant::MeanReplacement => "mean_replacement",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Variant::Hard),
            "mean_replacement" | "mean" => Ok(Variant::MeanReplacement),
            other => Err(Error::invalid(format!("unknown Top-K variant {other:?}"))),
        }
    }
}

/// Sparsity fraction `ρ ∈ (0, 1]` and variant of a Top-K layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopKConfig {
    fraction: f64,
    variant: Variant,
}

impl TopKConfig {
    pub fn new(fraction: f64, variant: Variant) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "Top-K fraction must lie in (0, 1], got {fraction}"
            )));
        }
        Ok(TopKConfig { fraction, variant })
    }

    pub fn hard(fraction: f64) -> Result<Self> {
        Self::new(fraction, Variant::Hard)
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn k_for(&self, h: usize, w: usize) -> usize {
        resolve_k(self.fraction, h, w)
    }
}

/// `K = max(1, ceil(ρ·h·w))`, capped at `h·w`.
pub fn resolve_k(fraction: f64, h: usize, w: usize) -> usize {
    let n = h * w;
    let k = (fraction * n as f64).ceil();
    // ceil of a product can land one above an exact integer through
    // rounding (0.07·100 = 7.000000000000001); snap those back.
    let k = if (k - 1.0 - fraction * n as f64).abs() < 1e-9 * n as f64 {
        k - 1.0
    } else {
        k
    };
    (k as usize).clamp(1, n.max(1))
}

/// Binary selection mask with exactly `k` ones in every channel plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopKMask {
    shape: Vec<usize>,
    bits: Vec<bool>,
    k: usize,
}

impl TopKMask {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn k_per_channel(&self) -> usize {
        self.k
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn plane_len(&self) -> usize {
        let r = self.shape.len();
        self.shape[r - 2] * self.shape[r - 1]
    }

    pub fn planes(&self) -> std::slice::ChunksExact<'_, bool> {
        self.bits.chunks_exact(self.plane_len())
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_parts(
            self.shape.clone(),
            self.bits
                .iter()
                .map(|&b| if b { S::one() } else { S::zero() })
                .collect(),
        )
    }

    /// Mask with every bit flipped (the non-Top-K positions).
    pub fn complement_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_parts(
            self.shape.clone(),
            self.bits
                .iter()
                .map(|&b| if b { S::zero() } else { S::one() })
                .collect(),
        )
    }
}

/// Total order used for selection: larger magnitude first, then lower index.
fn rank_order<S: Scalar>(plane: &[S], a: usize, b: usize) -> Ordering {
    plane[b]
        .abs()
        .partial_cmp(&plane[a].abs())
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

fn select_plane<S: Scalar>(plane: &[S], k: usize, out: &mut [bool]) {
    let n = plane.len();
    if k >= n {
        out.iter_mut().for_each(|b| *b = true);
        return;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(plane, a, b));
    out.iter_mut().for_each(|b| *b = false);
    for &i in &idx[..k] {
        out[i] = true;
    }
}

/// Marks the `k` entries of largest magnitude in an `[h, w]` plane.
pub fn topk_select<S: Scalar>(plane: &Tensor<S>, k: usize) -> Result<TopKMask> {
    let [h, w] = plane.shape()[..] else {
        return Err(Error::invalid(format!(
            "topk_select expects an [h, w] plane, got {:?}",
            plane.shape()
        )));
    };
    if k == 0 || k > h * w {
        return Err(Error::invalid(format!("K = {k} outside 1..={}", h * w)));
    }
    if !plane.all_finite() {
        return Err(Error::NonFinite { op: "topk_select" });
    }
    let mut bits = vec![false; h * w];
    select_plane(plane.data(), k, &mut bits);
    Ok(TopKMask {
        shape: vec![h, w],
        bits,
        k,
    })
}

fn spatial_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [_, h, w] | [_, _, h, w] => Ok((*h, *w)),
        _ => Err(Error::invalid(format!(
            "Top-K expects [c,h,w] or [n,c,h,w], got {shape:?}"
        ))),
    }
}

/// Applies Top-K to every channel plane of `x`.
pub fn topk_forward<S: Scalar>(x: &Tensor<S>, cfg: &TopKConfig) -> Result<(Tensor<S>, TopKMask)> {
    let (h, w) = spatial_dims(x.shape())?;
    if !x.all_finite() {
        return Err(Error::NonFinite { op: "topk_forward" });
    }
    let hw = h * w;
    let k = cfg.k_for(h, w);
    let mut bits = vec![false; x.numel()];
    let mut out = vec![S::zero(); x.numel()];
    for ((plane, sel), dst) in x
        .data()
        .chunks_exact(hw)
        .zip(bits.chunks_exact_mut(hw))
        .zip(out.chunks_exact_mut(hw))
    {
        select_plane(plane, k, sel);
        match cfg.variant {
            Variant::Hard => {
                for i in 0..hw {
                    if sel[i] {
                        dst[i] = plane[i];
                    }
                }
            }
            Variant::MeanReplacement => {
                let mut acc = S::zero();
                for i in 0..hw {
                    if sel[i] {
                        acc = acc + plane[i];
                    }
                }
                let mean = acc / S::lit(k as f64);
                for i in 0..hw {
                    if sel[i] {
                        dst[i] = mean;
                    }
                }
            }
        }
    }
    let mask = TopKMask {
        shape: x.shape().to_vec(),
        bits,
        k,
    };
    Ok((Tensor::from_parts(x.shape().to_vec(), out), mask))
}

/// Vector-Jacobian product of [`topk_forward`] with the selection held fixed.
pub fn topk_vjp<S: Scalar>(mask: &TopKMask, variant: Variant, upstream: &Tensor<S>) -> Result<Tensor<S>> {
    if upstream.shape() != mask.shape() {
        return Err(Error::shape("topk_vjp", upstream.shape(), mask.shape()));
    }
    let hw = mask.plane_len();
    let inv_k = S::one() / S::lit(mask.k as f64);
    let mut grad = vec![S::zero(); upstream.numel()];
    for ((sel, up), dst) in mask
        .bits
        .chunks_exact(hw)
        .zip(upstream.data().chunks_exact(hw))
        .zip(grad.chunks_exact_mut(hw))
    {
        match variant {
            Variant::Hard => {
                for i in 0..hw {
                    if sel[i] {
                        dst[i] = up[i];
                    }
                }
            }
            Variant::MeanReplacement => {
                let mut acc = S::zero();
                for i in 0..hw {
                    if sel[i] {
                        acc = acc + up[i];
                    }
                }
                let share = acc * inv_k;
                for i in 0..hw {
                    if sel[i] {
                        dst[i] = share;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(upstream.shape().to_vec(), grad))
}

struct TopK {
    mask: TopKMask,
    variant: Variant,
}

impl<S: Scalar> Function<S> for TopK {
    fn name(&self) -> &'static str {
        "topk"
    }

    fn vjp(&self, _: &VjpContext<'_, S>, g: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        Ok(vec![Some(topk_vjp(&self.mask, self.variant, g)?)])
    }
}

/// Records a Top-K layer on the tape. Returns the output and its mask.
pub fn topk<S: Scalar>(tape: &mut Tape<S>, input: Var, cfg: &TopKConfig) -> Result<(Var, TopKMask)> {
    let (value, mask) = topk_forward(tape.value(input), cfg)?;
    let out = tape.record(
        &[input],
        value,
        TopK {
            mask: mask.clone(),
            variant: cfg.variant,
        },
    )?;
    Ok((out, mask))
}
