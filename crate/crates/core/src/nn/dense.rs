use crate::error::{Error, Result};
use crate::tensor::{Dims, Scalar, Tensor4};

/// Fully connected weights stored as `(out, in, 1, 1)` plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<T> {
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> DenseParams<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseParams {
            weight: Tensor4::zeros(Dims::new(outputs, inputs, 1, 1)),
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.dims().c
    }

    pub fn outputs(&self) -> usize {
        self.weight.dims().n
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `(n, c, h, w)` to `(n, c*h*w, 1, 1)`, keeping row-major order.
pub fn flatten<T: Scalar>(input: Tensor4<T>) -> Tensor4<T> {
    let d = input.dims();
    input
        .reshape(Dims::new(d.n, d.c * d.h * d.w, 1, 1))
        .expect("same element count")
}

fn check<T: Scalar>(input: &Tensor4<T>, params: &DenseParams<T>) -> Result<()> {
    let d = input.dims();
    let wd = params.weight.dims();
    if d.h != 1 || d.w != 1 || d.c != params.inputs() || wd.h != 1 || wd.w != 1 {
        return Err(Error::Shape(format!(
            "dense layer {}->{} cannot take input {d}",
            params.inputs(),
            params.outputs()
        )));
    }
    if params.bias.len() != params.outputs() {
        return Err(Error::Shape("dense bias length".into()));
    }
    Ok(())
}

pub fn dense_forward<T: Scalar>(input: &Tensor4<T>, params: &DenseParams<T>) -> Result<Tensor4<T>> {
    check(input, params)?;
    let (n_in, n_out) = (params.inputs(), params.outputs());
    let x = input.data();
    let w = params.weight.data();
    let batch = input.dims().n;
    let mut out = Vec::with_capacity(batch * n_out);
    for n in 0..batch {
        let xs = &x[n * n_in..(n + 1) * n_in];
        for o in 0..n_out {
            let ws = &w[o * n_in..(o + 1) * n_in];
            let acc = ws.iter().zip(xs).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            out.push(acc + params.bias[o]);
        }
    }
    Tensor4::from_vec(Dims::new(batch, n_out, 1, 1), out)
}

/// Returns `(grad_in, grads)`.
pub fn dense_backward<T: Scalar>(
    input: &Tensor4<T>,
    params: &DenseParams<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, DenseParams<T>)> {
    check(input, params)?;
    let (n_in, n_out) = (params.inputs(), params.outputs());
    let batch = input.dims().n;
    if grad_out.dims() != Dims::new(batch, n_out, 1, 1) {
        return Err(Error::Shape(format!(
            "dense grad {} for {n_out} outputs",
            grad_out.dims()
        )));
    }
    let x = input.data();
    let w = params.weight.data();
    let g = grad_out.data();
    let mut grads = DenseParams::zeros(n_in, n_out);
    let mut grad_in = Tensor4::zeros(input.dims());
    for n in 0..batch {
        for o in 0..n_out {
            let gv = g[n * n_out + o];
            grads.bias[o] = grads.bias[o] + gv;
            let gw = &mut grads.weight.data_mut()[o * n_in..(o + 1) * n_in];
            for (acc, &xv) in gw.iter_mut().zip(&x[n * n_in..(n + 1) * n_in]) {
                *acc = *acc + gv * xv;
            }
            let gi = &mut grad_in.data_mut()[n * n_in..(n + 1) * n_in];
            for (acc, &wv) in gi.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                *acc = *acc + gv * wv;
            }
        }
    }
    Ok((grad_in, grads))
}
