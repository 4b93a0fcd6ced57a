//! Parameterized layers. A layer owns `ParamId`s, not values; the values
//! live in the shared [`ParamStore`].

use crate::graph::{Graph, ParamId, ParamStore, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn normal_array(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Fully connected layer, `x [B,in] -> y [B,out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Kaiming-style init scaled by fan-in.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let w = store.add(&format!("{name}.w"), normal_array(rng, &[in_dim, out_dim], std));
        let b = store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_dim])));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Tensor) -> Tensor {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add(y, b)
    }

    /// Forward pass without the tape, for hot inference paths.
    pub fn infer(&self, store: &ParamStore, x: &ndarray::Array2<f64>) -> ndarray::Array2<f64> {
        let w = store
            .value(self.w)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let b = store
            .value(self.b)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let mut y = x.dot(&w);
        y += &b;
        y
    }
}

/// 3x3-style convolution layer with square kernels.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = store.add(
            &format!("{name}.w"),
            normal_array(rng, &[out_ch, in_ch, k, k], std),
        );
        let b = store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_ch])));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Tensor) -> Tensor {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Uniform random array in [-scale, scale], for tests and init experiments.
pub fn uniform_array(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}
