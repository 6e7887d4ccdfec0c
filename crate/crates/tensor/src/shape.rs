//! Shape manipulation: reshape, axis permutation, concatenation, slicing
//! and axis-0 broadcast. All of these are index shuffles, so the backward
//! pass is the corresponding inverse shuffle.

use crate::{Arr, Tensor};
use ndarray::{Axis, IxDyn, Slice};

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let old_shape = self.shape();
        let data = self.with_data(|a| {
            a.as_standard_layout()
                .to_owned()
                .into_shape_with_order(IxDyn(shape))
                .expect("reshape element count mismatch")
        });
        let p = self.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let gr = g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&old_shape))
                    .unwrap();
                p.accum_grad(&gr);
            }),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let data = self.with_data(|a| a.clone().permuted_axes(IxDyn(axes)).as_standard_layout().to_owned());
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        let p = self.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let gp = g.clone().permuted_axes(IxDyn(&inverse)).as_standard_layout().to_owned();
                p.accum_grad(&gp);
            }),
        )
    }

    /// Concatenate two tensors along `axis`.
    pub fn concat(&self, other: &Tensor, axis: usize) -> Tensor {
        let a = self.value();
        let b = other.value();
        let data = ndarray::concatenate(Axis(axis), &[a.view(), b.view()]).expect("concat shape mismatch");
        let na = a.shape()[axis];
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = g.slice_axis(Axis(axis), Slice::from(0..na)).to_owned();
                let gb = g.slice_axis(Axis(axis), Slice::from(na..)).to_owned();
                pa.accum_grad(&ga);
                pb.accum_grad(&gb);
            }),
        )
    }

    /// Slice `[start, end)` along `axis`.
    pub fn slice_axis_range(&self, axis: usize, start: usize, end: usize) -> Tensor {
        let full = self.shape();
        assert!(end <= full[axis] && start <= end, "slice out of bounds");
        let data = self.with_data(|a| {
            a.slice_axis(Axis(axis), Slice::from(start..end))
                .as_standard_layout()
                .to_owned()
        });
        let p = self.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = Arr::zeros(IxDyn(&full));
                gx.slice_axis_mut(Axis(axis), Slice::from(start..end)).assign(g);
                p.accum_grad(&gx);
            }),
        )
    }

    /// Repeat a size-1 axis 0 across `n` entries: (1, ...) -> (n, ...).
    pub fn broadcast_axis0(&self, n: usize) -> Tensor {
        let a = self.value();
        assert_eq!(a.shape()[0], 1, "broadcast_axis0 expects leading axis of size 1");
        let mut target = a.shape().to_vec();
        target[0] = n;
        let data = a.broadcast(IxDyn(&target)).unwrap().to_owned();
        let p = self.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                p.accum_grad(&gr);
            }),
        )
    }
}
