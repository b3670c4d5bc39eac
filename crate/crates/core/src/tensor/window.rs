//! Sliding k x k windows.
//!
//! A window of size `k` centred at `(i, j)` covers offsets in `(-k/2, k/2]`
//! along each axis: `-(k-1)/2 ..= k/2`. For odd `k` this is the symmetric
//! neighbourhood; for even `k` the extra element sits on the positive side.

use serde::{Deserialize, Serialize};

use super::{dims3, AllocationLedger, Scalar, Tensor};
use crate::error::{QnaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output site `i` is centred on input `i * stride`; out-of-bounds taps contribute zero.
    #[default]
    Same,
    /// Only windows lying fully inside the input.
    Valid,
}

/// Inclusive offset range `(lo, hi)` of a size-`k` window.
pub fn window_offsets(k: usize) -> (isize, isize) {
    let k = k as isize;
    (-((k - 1) / 2), k / 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub k: usize,
    pub stride: usize,
    pub padding: Padding,
    /// Accept even `k`, using the `(-k/2, k/2]` offset convention.
    pub allow_even: bool,
}

impl Window {
    pub fn new(k: usize, stride: usize, padding: Padding) -> Self {
        Window { k, stride, padding, allow_even: false }
    }

    pub fn same(k: usize, stride: usize) -> Self {
        Self::new(k, stride, Padding::Same)
    }

    pub fn allowing_even(mut self) -> Self {
        self.allow_even = true;
        self
    }

    pub(crate) fn validate(&self, op: &'static str) -> Result<()> {
        if self.k == 0 {
            return Err(QnaError::invalid(op, "window size must be positive"));
        }
        if self.stride == 0 {
            return Err(QnaError::invalid(op, "stride must be positive"));
        }
        if self.k.is_multiple_of(2) && !self.allow_even {
            return Err(QnaError::invalid(
                op,
                format!("even window size {} requires the even-k offset convention", self.k),
            ));
        }
        Ok(())
    }

    pub fn offsets(&self) -> (isize, isize) {
        window_offsets(self.k)
    }

    /// Number of output sites along an axis of length `n`.
    pub fn out_len(&self, n: usize) -> Result<usize> {
        match self.padding {
            Padding::Same => Ok(n.div_ceil(self.stride)),
            Padding::Valid if n >= self.k => Ok((n - self.k) / self.stride + 1),
            Padding::Valid => {
                Err(QnaError::shape("window", format!("valid padding needs extent >= k ({n} < {})", self.k)))
            }
        }
    }

    /// Input coordinate of the centre of output site `i`.
    #[inline]
    pub fn center(&self, i: usize) -> isize {
        let base = (i * self.stride) as isize;
        match self.padding {
            Padding::Same => base,
            Padding::Valid => base - self.offsets().0,
        }
    }
}

/// Per-offset weighted window reduction (a cross-correlation of every channel
/// with one fixed k x k kernel). With an all-ones kernel this is the plain
/// windowed sum.
pub fn window_weighted_sum<T: Scalar>(map: &Tensor<T>, kernel: &Tensor<T>, window: Window) -> Result<Tensor<T>> {
    window_weighted_sum_tracked(map, kernel, window, &mut AllocationLedger::new())
}

pub fn window_weighted_sum_tracked<T: Scalar>(
    map: &Tensor<T>,
    kernel: &Tensor<T>,
    window: Window,
    ledger: &mut AllocationLedger,
) -> Result<Tensor<T>> {
    const OP: &str = "window_weighted_sum";
    window.validate(OP)?;
    let (h, w, c) = dims3(OP, map)?;
    let k = window.k;
    if kernel.shape() != [k, k] {
        return Err(QnaError::shape(OP, format!("kernel {:?} is not {k} x {k}", kernel.shape())));
    }
    let (ho, wo) = (window.out_len(h)?, window.out_len(w)?);
    let (lo, hi) = window.offsets();
    let src = map.data();
    let kern = kernel.data();
    let mut out = vec![T::zero(); ho * wo * c];

    for i in 0..ho {
        let ci = window.center(i);
        let out_row = &mut out[i * wo * c..(i + 1) * wo * c];
        for dy in lo..=hi {
            let r = ci + dy;
            if r < 0 || r >= h as isize {
                continue;
            }
            let in_row = &src[r as usize * w * c..(r as usize + 1) * w * c];
            let krow = &kern[(dy - lo) as usize * k..(dy - lo + 1) as usize * k];
            for j in 0..wo {
                let cj = window.center(j);
                let acc = &mut out_row[j * c..(j + 1) * c];
                for dx in lo..=hi {
                    let col = cj + dx;
                    if col < 0 || col >= w as isize {
                        continue;
                    }
                    let wgt = krow[(dx - lo) as usize];
                    let px = &in_row[col as usize * c..(col as usize + 1) * c];
                    for (a, &v) in acc.iter_mut().zip(px) {
                        *a += wgt * v;
                    }
                }
            }
        }
    }
    ledger.record(OP, 0, out.len() * T::DTYPE.size());
    Tensor::checked(OP, vec![ho, wo, c], out)
}

/// Direct 2-D cross-correlation `x (H x W x Din)` with `w (k x k x Din x Dout)`.
///
/// Even kernel sizes follow the `(-k/2, k/2]` convention, so a 4x4 kernel with
/// stride 4 and valid padding tiles the input into non-overlapping patches.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, padding: Padding) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    let (h, wd, din) = dims3(OP, x)?;
    let (k, dout) = match *w.shape() {
        [k1, k2, wi, wo] if k1 == k2 && wi == din => (k1, wo),
        ref s => return Err(QnaError::shape(OP, format!("kernel {s:?} incompatible with input channels {din}"))),
    };
    let window = Window::new(k, stride, padding).allowing_even();
    window.validate(OP)?;
    let (ho, wo) = (window.out_len(h)?, window.out_len(wd)?);
    let (lo, hi) = window.offsets();
    let src = x.data();
    let wt = w.data();
    let mut out = vec![T::zero(); ho * wo * dout];

    for i in 0..ho {
        let ci = window.center(i);
        for j in 0..wo {
            let cj = window.center(j);
            let acc = &mut out[(i * wo + j) * dout..(i * wo + j + 1) * dout];
            for dy in lo..=hi {
                let r = ci + dy;
                if r < 0 || r >= h as isize {
                    continue;
                }
                for dx in lo..=hi {
                    let col = cj + dx;
                    if col < 0 || col >= wd as isize {
                        continue;
                    }
                    let px = &src[(r as usize * wd + col as usize) * din..][..din];
                    let tap = ((dy - lo) as usize * k + (dx - lo) as usize) * din * dout;
                    for (ci_, &xv) in px.iter().enumerate() {
                        let wrow = &wt[tap + ci_ * dout..tap + (ci_ + 1) * dout];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::checked(OP, vec![ho, wo, dout], out)
}
