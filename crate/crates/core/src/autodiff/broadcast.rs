use alloc::vec::Vec;

use crate::tensor::Shape;

/// Index map from an output shape onto an operand of the same rank whose
/// extents are either equal to the output's or 1.
pub(crate) struct BroadcastMap {
    dims: Vec<usize>,
    /// Operand strides, zero along broadcast axes.
    strides: Vec<usize>,
    identity: bool,
}

impl BroadcastMap {
    pub fn new(out: &Shape, operand: &Shape) -> Option<Self> {
        let (o, b) = (out.dims(), operand.dims());
        if o.len() != b.len() || o.iter().zip(b).any(|(&od, &bd)| bd != od && bd != 1) {
            return None;
        }
        let mut strides = alloc::vec![0; o.len()];
        let mut acc = 1;
        for d in (0..o.len()).rev() {
            strides[d] = if b[d] == 1 && o[d] != 1 { 0 } else { acc };
            acc *= b[d];
        }
        Some(BroadcastMap {
            dims: o.to_vec(),
            strides,
            identity: o == b,
        })
    }

    /// Calls `f(i, j)` for every flat output index `i` in order, with `j` the
    /// matching flat operand index.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let total: usize = self.dims.iter().product();
        if self.identity {
            (0..total).for_each(|i| f(i, i));
            return;
        }
        let rank = self.dims.len();
        let inner = self.dims[rank - 1];
        let inner_stride = self.strides[rank - 1];
        let mut idx = alloc::vec![0usize; rank];
        let mut base = 0usize;
        let mut i = 0;
        while i < total {
            for k in 0..inner {
                f(i + k, base + k * inner_stride);
            }
            i += inner;
            // advance the outer multi-index
            let mut d = rank - 1;
            while d > 0 {
                d -= 1;
                idx[d] += 1;
                base += self.strides[d];
                if idx[d] < self.dims[d] {
                    break;
                }
                base -= self.strides[d] * self.dims[d];
                idx[d] = 0;
            }
        }
    }
}
