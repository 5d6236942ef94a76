//! Point-cloud encoder: a point-wise MLP with shared weights, global max pooling
//! over points, and a global MLP producing the latent vector.

use std::cell::Cell;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    /// Widths of the shared point MLP, starting with the 3 coordinates.
    pub point_mlp_dims: Vec<usize>,
    /// Widths of the global MLP; the last entry is the latent dimension.
    pub global_mlp_dims: Vec<usize>,
    /// Weight of the squared-norm penalty on encoder weights (biases excluded).
    pub l2: f64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            point_mlp_dims: vec![3, 32, 64],
            global_mlp_dims: vec![64, 32, 8],
            l2: 1e-4,
        }
    }
}

impl EncoderSpec {
    pub fn latent_dim(&self) -> usize {
        *self.global_mlp_dims.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.point_mlp_dims;
        let g = &self.global_mlp_dims;
        if p.len() < 2 || p[0] != 3 {
            return Err(Error::Config("point MLP must start at 3 and have a layer".into()));
        }
        if g.len() < 2 || g[0] != *p.last().expect("non-empty") {
            return Err(Error::Config(
                "global MLP must start at the point MLP's output width".into(),
            ));
        }
        if p.iter().chain(g).any(|&d| d == 0) || !(self.l2 >= 0.0) {
            return Err(Error::Config("layer widths must be positive and l2 >= 0".into()));
        }
        Ok(())
    }
}

/// Fully connected layer `y = x W + b` with `W` of shape `in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<T> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            w: Array2::zeros((n_in, n_out)),
            b: Array1::zeros(n_out),
        }
    }

    /// Weights uniform on `+-sqrt(6 / fan_in)`, zero biases.
    pub fn init<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / n_in as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((n_in, n_out), |_| T::lit(rng.random_range(-a..a))),
            b: Array1::zeros(n_out),
        }
    }

    fn forward_rows(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    fn forward_vec(&self, x: ArrayView1<'_, T>) -> Array1<T> {
        x.dot(&self.w) + &self.b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams<T> {
    pub point: Vec<Dense<T>>,
    pub global: Vec<Dense<T>>,
}

fn relu<T: Scalar>(v: T) -> T {
    v.max(T::zero())
}

impl<T: Scalar> EncoderParams<T> {
    pub fn zeros(spec: &EncoderSpec) -> Self {
        let layers = |dims: &[usize]| dims.windows(2).map(|d| Dense::zeros(d[0], d[1])).collect();
        Self {
            point: layers(&spec.point_mlp_dims),
            global: layers(&spec.global_mlp_dims),
        }
    }

    pub fn init<R: Rng + ?Sized>(spec: &EncoderSpec, rng: &mut R) -> Self {
        let mut layers = |dims: &[usize]| -> Vec<Dense<T>> {
            dims.windows(2).map(|d| Dense::init(d[0], d[1], rng)).collect()
        };
        let point = layers(&spec.point_mlp_dims);
        let global = layers(&spec.global_mlp_dims);
        Self { point, global }
    }

    pub fn latent_dim(&self) -> usize {
        self.global.last().map(|l| l.b.len()).unwrap_or(0)
    }

    pub fn n_params(&self) -> usize {
        self.layers().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense<T>> {
        self.point.iter().chain(self.global.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense<T>> {
        self.point.iter_mut().chain(self.global.iter_mut())
    }

    /// Sum of squared weights (biases excluded).
    pub fn weight_sq_norm(&self) -> T {
        self.layers().map(|l| l.w.iter().map(|&v| v * v).sum::<T>()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace<T> {
    /// Input cloud followed by the post-ReLU output of every point layer.
    point_acts: Vec<Array2<T>>,
    /// Row achieving the maximum of each pooled channel (lowest index on ties).
    argmax: Vec<usize>,
    /// Pooled vector followed by the output of every global layer.
    global_acts: Vec<Array1<T>>,
}

impl<T: Scalar> EncoderTrace<T> {
    pub fn latent(&self) -> &Array1<T> {
        self.global_acts.last().expect("at least one global layer")
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

thread_local! {
    static ENCODE_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of encoder forward passes run on the current thread so far.
pub fn encode_call_count() -> usize {
    ENCODE_CALLS.with(|c| c.get())
}

fn check_cloud<T: Scalar>(cloud: ArrayView2<'_, T>) -> Result<()> {
    if cloud.ncols() != 3 || cloud.nrows() == 0 {
        return Err(Error::Shape(format!("cloud must be n x 3, got {:?}", cloud.dim())));
    }
    if cloud.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("point cloud".into()));
    }
    Ok(())
}

/// Forward pass keeping the activations needed by [`backward`].
pub fn forward_trace<T: Scalar>(cloud: ArrayView2<'_, T>, params: &EncoderParams<T>) -> Result<EncoderTrace<T>> {
    check_cloud(cloud)?;
    ENCODE_CALLS.with(|c| c.set(c.get() + 1));
    let mut point_acts = Vec::with_capacity(params.point.len() + 1);
    point_acts.push(cloud.to_owned());
    for layer in &params.point {
        let mut h = layer.forward_rows(point_acts.last().expect("non-empty").view());
        h.mapv_inplace(relu);
        point_acts.push(h);
    }
    let top = point_acts.last().expect("non-empty");
    let channels = top.ncols();
    let mut pooled = Array1::from_elem(channels, T::neg_infinity());
    let mut argmax = vec![0usize; channels];
    for (r, row) in top.axis_iter(Axis(0)).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if v > pooled[c] {
                pooled[c] = v;
                argmax[c] = r;
            }
        }
    }
    let mut global_acts = Vec::with_capacity(params.global.len() + 1);
    global_acts.push(pooled);
    let n_global = params.global.len();
    for (k, layer) in params.global.iter().enumerate() {
        let mut h = layer.forward_vec(global_acts.last().expect("non-empty").view());
        if k + 1 < n_global {
            h.mapv_inplace(relu);
        }
        global_acts.push(h);
    }
    Ok(EncoderTrace {
        point_acts,
        argmax,
        global_acts,
    })
}

/// Latent representation of one cloud. Invariant to the order and multiplicity of points.
pub fn encode<T: Scalar>(cloud: ArrayView2<'_, T>, params: &EncoderParams<T>) -> Result<Array1<T>> {
    Ok(forward_trace(cloud, params)?.latent().clone())
}

/// Accumulates into `grads` the gradient of `d_latent . latent` with respect to
/// the encoder parameters. Pooling routes each channel's gradient to its argmax row,
/// so only those rows are propagated through the point MLP.
pub fn backward<T: Scalar>(
    trace: &EncoderTrace<T>,
    params: &EncoderParams<T>,
    d_latent: ArrayView1<'_, T>,
    grads: &mut EncoderParams<T>,
) {
    let n_global = params.global.len();
    let mut delta = d_latent.to_owned();
    for k in (0..n_global).rev() {
        let out = &trace.global_acts[k + 1];
        if k + 1 < n_global {
            for (d, &o) in delta.iter_mut().zip(out.iter()) {
                if !(o > T::zero()) {
                    *d = T::zero();
                }
            }
        }
        let input = &trace.global_acts[k];
        let g = &mut grads.global[k];
        for (i, &x) in input.iter().enumerate() {
            if x != T::zero() {
                g.w.row_mut(i).scaled_add(x, &delta);
            }
        }
        g.b += &delta;
        delta = params.global[k].w.dot(&delta);
    }

    // delta is now the gradient with respect to the pooled vector
    let mut rows: Vec<usize> = trace.argmax.clone();
    rows.sort_unstable();
    rows.dedup();
    let top_width = delta.len();
    let mut g_rows = Array2::<T>::zeros((rows.len(), top_width));
    for (c, &r) in trace.argmax.iter().enumerate() {
        let pos = rows.binary_search(&r).expect("row collected above");
        g_rows[[pos, c]] += delta[c];
    }
    for l in (0..params.point.len()).rev() {
        let out = &trace.point_acts[l + 1];
        for (p, &r) in rows.iter().enumerate() {
            for c in 0..g_rows.ncols() {
                if !(out[[r, c]] > T::zero()) {
                    g_rows[[p, c]] = T::zero();
                }
            }
        }
        let input = trace.point_acts[l].select(Axis(0), &rows);
        let g = &mut grads.point[l];
        g.w += &input.t().dot(&g_rows);
        g.b += &g_rows.sum_axis(Axis(0));
        if l > 0 {
            g_rows = g_rows.dot(&params.point[l].w.t());
        }
    }
}
