use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Pools every `h x w` plane of `x` (there are `planes` of them). Returns the
/// pooled values and, for max pooling, the in-plane argmax of each output.
pub(crate) fn pool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    kind: PoolKind,
    k: usize,
    s: usize,
) -> (Vec<T>, Vec<u32>) {
    let ho = (h - k) / s + 1;
    let wo = (w - k) / s + 1;
    let mut y = vec![T::ZERO; planes * ho * wo];
    let mut arg = if kind == PoolKind::Max {
        vec![0u32; planes * ho * wo]
    } else {
        Vec::new()
    };
    let inv = T::ONE / T::from_usize(k * k);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oi in 0..ho {
            for oj in 0..wo {
                let o = p * ho * wo + oi * wo + oj;
                match kind {
                    PoolKind::Max => {
                        let mut best = src[oi * s * w + oj * s];
                        let mut best_at = oi * s * w + oj * s;
                        for ki in 0..k {
                            for kj in 0..k {
                                let at = (oi * s + ki) * w + oj * s + kj;
                                // strict comparison keeps the first maximum
                                if src[at] > best {
                                    best = src[at];
                                    best_at = at;
                                }
                            }
                        }
                        y[o] = best;
                        arg[o] = best_at as u32;
                    }
                    PoolKind::Avg => {
                        let mut acc = T::ZERO;
                        for ki in 0..k {
                            let row = &src[(oi * s + ki) * w + oj * s..][..k];
                            for &v in row {
                                acc += v;
                            }
                        }
                        y[o] = acc * inv;
                    }
                }
            }
        }
    }
    (y, arg)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn pool_backward<T: Scalar>(
    dy: &[T],
    arg: &[u32],
    planes: usize,
    (h, w): (usize, usize),
    kind: PoolKind,
    k: usize,
    s: usize,
    dx: &mut [T],
) {
    let ho = (h - k) / s + 1;
    let wo = (w - k) / s + 1;
    let inv = T::ONE / T::from_usize(k * k);
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oi in 0..ho {
            for oj in 0..wo {
                let o = p * ho * wo + oi * wo + oj;
                match kind {
                    PoolKind::Max => dst[arg[o] as usize] += dy[o],
                    PoolKind::Avg => {
                        let g = dy[o] * inv;
                        for ki in 0..k {
                            for d in &mut dst[(oi * s + ki) * w + oj * s..][..k] {
                                *d += g;
                            }
                        }
                    }
                }
            }
        }
    }
}
