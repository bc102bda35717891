//! The GNN: multi-tap graph convolutions, forward pass, reverse-mode
//! gradients, losses, and parameter updates.
//!
//! A layer computes `rho(sum_k S^k X H_k)` where `S` is the graph shift
//! operator and `H_k` the tap-`k` coefficient matrix. Powers of `S` are
//! never materialized; the diffused inputs `Z_k = S Z_{k-1}` are built
//! iteratively and retained on the tape for the backward pass. The final
//! layer is a linear classification head (no nonlinearity), so logits are
//! unbounded as cross-entropy requires.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Gso;
use crate::mat::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Relu,
    Tanh,
    Identity,
}

impl Nonlinearity {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Nonlinearity::Relu),
            "tanh" => Ok(Nonlinearity::Tanh),
            "identity" => Ok(Nonlinearity::Identity),
            other => Err(Error::Config(format!("unknown nonlinearity {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Nonlinearity::Relu => "relu",
            Nonlinearity::Tanh => "tanh",
            Nonlinearity::Identity => "identity",
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        match self {
            Nonlinearity::Relu => v.max(0.0),
            Nonlinearity::Tanh => v.tanh(),
            Nonlinearity::Identity => v,
        }
    }

    /// Derivative evaluated at the pre-activation value.
    pub fn derivative(&self, pre: f64) -> f64 {
        match self {
            Nonlinearity::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Nonlinearity::Identity => 1.0,
        }
    }
}

/// The replicated coefficient set: `layers[l][k]` is the tap-`k` matrix of
/// layer `l`, shape `dims[l] x dims[l+1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: Vec<usize>,
    taps: usize,
    layers: Vec<Vec<Mat>>,
}

impl ModelParams {
    pub fn from_layers(dims: Vec<usize>, taps: usize, layers: Vec<Vec<Mat>>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Shape("need at least one layer".into()));
        }
        if taps == 0 {
            return Err(Error::Shape("need at least one tap".into()));
        }
        if layers.len() != dims.len() - 1 {
            return Err(Error::Shape(format!(
                "{} layers given for {} dims",
                layers.len(),
                dims.len()
            )));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.len() != taps {
                return Err(Error::Shape(format!("layer {l} has {} taps", layer.len())));
            }
            for h in layer {
                if h.rows() != dims[l] || h.cols() != dims[l + 1] {
                    return Err(Error::Shape(format!(
                        "layer {l} tap shape {}x{} != {}x{}",
                        h.rows(),
                        h.cols(),
                        dims[l],
                        dims[l + 1]
                    )));
                }
            }
        }
        Ok(ModelParams { dims, taps, layers })
    }

    /// Symmetric uniform init on `(-b, b)` with `b = 1/sqrt(taps * fan_in)`.
    pub fn init_uniform(dims: Vec<usize>, taps: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len().saturating_sub(1));
        for l in 0..dims.len().saturating_sub(1) {
            let bound = 1.0 / ((taps * dims[l]) as f64).sqrt();
            let mut taps_vec = Vec::with_capacity(taps);
            for _ in 0..taps {
                let mut h = Mat::zeros(dims[l], dims[l + 1]);
                for v in h.data_mut() {
                    *v = rng.random_range(-bound..bound);
                }
                taps_vec.push(h);
            }
            layers.push(taps_vec);
        }
        ModelParams::from_layers(dims, taps, layers)
    }

    pub fn zeros(dims: Vec<usize>, taps: usize) -> Result<Self> {
        let layers = (0..dims.len().saturating_sub(1))
            .map(|l| (0..taps).map(|_| Mat::zeros(dims[l], dims[l + 1])).collect())
            .collect();
        ModelParams::from_layers(dims, taps, layers)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn layer(&self, l: usize) -> &[Mat] {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut [Mat] {
        &mut self.layers[l]
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.iter())
            .map(|m| m.rows() * m.cols())
            .sum()
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.layers
            .iter()
            .flatten()
            .zip(other.layers.iter().flatten())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

/// Gradient set, shape-congruent to [`ModelParams`], plus the input gradient
/// when requested.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Vec<Mat>>,
    pub input_grad: Option<Mat>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Gradients {
        Gradients {
            layers: params
                .layers
                .iter()
                .map(|l| l.iter().map(|m| Mat::zeros(m.rows(), m.cols())).collect())
                .collect(),
            input_grad: None,
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        for (a, b) in self
            .layers
            .iter_mut()
            .flatten()
            .zip(other.layers.iter().flatten())
        {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.layers.iter_mut().flatten() {
            m.scale(s);
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .map(|m| {
                let f = m.frobenius_norm();
                f * f
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Gradients) -> f64 {
        self.layers
            .iter()
            .flatten()
            .zip(other.layers.iter().flatten())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

/// Multi-tap graph convolution `sum_k S^k X H_k` via iterative diffusion.
pub fn conv_forward(x: &Mat, gso: &Gso, taps: &[Mat]) -> Result<Mat> {
    if taps.is_empty() {
        return Err(Error::Shape("need at least one tap".into()));
    }
    let mut out = x.matmul(&taps[0])?;
    let mut diffused = x.clone();
    for h in &taps[1..] {
        diffused = gso.apply(&diffused)?;
        out.add_assign(&diffused.matmul(h)?)?;
    }
    Ok(out)
}

/// What the backward pass needs from one layer: the diffused inputs
/// `Z_k = S^k X` and the pre-activation.
#[derive(Debug, Clone)]
pub struct LayerTape {
    /// `diffused[k] = S^k X`; `diffused[0]` is the layer input itself.
    pub diffused: Vec<Mat>,
    pub pre: Mat,
    pub nonlinearity: Nonlinearity,
}

/// One GNN layer: convolution followed by the point-wise nonlinearity.
pub fn layer_forward(
    x: &Mat,
    gso: &Gso,
    taps: &[Mat],
    nonlinearity: Nonlinearity,
) -> Result<(Mat, LayerTape)> {
    if taps.is_empty() {
        return Err(Error::Shape("need at least one tap".into()));
    }
    let mut diffused = Vec::with_capacity(taps.len());
    diffused.push(x.clone());
    for _ in 1..taps.len() {
        let next = gso.apply(diffused.last().unwrap())?;
        diffused.push(next);
    }
    let mut pre = diffused[0].matmul(&taps[0])?;
    for (z, h) in diffused[1..].iter().zip(&taps[1..]) {
        pre.add_assign(&z.matmul(h)?)?;
    }
    let post = pre.map(|v| nonlinearity.apply(v));
    Ok((
        post,
        LayerTape {
            diffused,
            pre,
            nonlinearity,
        },
    ))
}

/// Per-layer records retained by the forward pass.
#[derive(Debug, Clone)]
pub struct ActivationTape {
    pub layers: Vec<LayerTape>,
}

/// Full forward pass. Hidden layers apply `nonlinearity`; the final layer is
/// a linear head.
pub fn model_forward(
    x: &Mat,
    gso: &Gso,
    params: &ModelParams,
    nonlinearity: Nonlinearity,
) -> Result<(Mat, ActivationTape)> {
    if x.cols() != params.dims()[0] {
        return Err(Error::Shape(format!(
            "input width {} != model input dim {}",
            x.cols(),
            params.dims()[0]
        )));
    }
    let num_layers = params.num_layers();
    let mut layers = Vec::with_capacity(num_layers);
    let mut current = x.clone();
    for l in 0..num_layers {
        let rho = if l + 1 == num_layers {
            Nonlinearity::Identity
        } else {
            nonlinearity
        };
        let (next, tape) = layer_forward(&current, gso, params.layer(l), rho)?;
        layers.push(tape);
        current = next;
    }
    Ok((current, ActivationTape { layers }))
}

/// SAGE-style layer: self term plus mean-aggregated neighbor term. Equals
/// the two-tap convolution with a mean-neighbor shift operator.
pub fn sage_layer(x_self: &Mat, x_agg: &Mat, w_self: &Mat, w_neigh: &Mat) -> Result<Mat> {
    let mut out = x_self.matmul(w_self)?;
    out.add_assign(&x_agg.matmul(w_neigh)?)?;
    Ok(out)
}

/// Which loss seeds the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    /// Half squared error against the one-hot label encoding.
    SquaredError,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cross-entropy" => Ok(LossKind::CrossEntropy),
            "squared" => Ok(LossKind::SquaredError),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross-entropy",
            LossKind::SquaredError => "squared",
        }
    }

    pub fn compute(
        &self,
        logits: &Mat,
        labels: &[u32],
        mask: &[bool],
        weight: f64,
    ) -> Result<(f64, Mat)> {
        match self {
            LossKind::CrossEntropy => cross_entropy_loss(logits, labels, mask, weight),
            LossKind::SquaredError => squared_loss(logits, labels, mask, weight),
        }
    }
}

/// Masked mean cross-entropy, scaled by `weight`; returns the loss and its
/// gradient with respect to the logits (zero outside the mask). Stabilized
/// by max-subtraction.
pub fn cross_entropy_loss(
    logits: &Mat,
    labels: &[u32],
    mask: &[bool],
    weight: f64,
) -> Result<(f64, Mat)> {
    check_loss_inputs(logits, labels, mask)?;
    let m = mask.iter().filter(|&&b| b).count();
    if m == 0 {
        return Err(Error::InvalidArgument("loss mask is empty".into()));
    }
    let scale = weight / m as f64;
    let mut loss = 0.0;
    let mut dlogits = Mat::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        if !mask[i] {
            continue;
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        let label = labels[i] as usize;
        loss += scale * (lse - row[label]);
        let drow = dlogits.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            let softmax = (v - lse).exp();
            drow[j] = scale * (softmax - f64::from(j == label));
        }
    }
    Ok((loss, dlogits))
}

/// Masked mean half-squared error against one-hot labels, scaled by
/// `weight`. Quadratic in the logits, so a linear model under this loss is
/// a convex problem.
pub fn squared_loss(
    logits: &Mat,
    labels: &[u32],
    mask: &[bool],
    weight: f64,
) -> Result<(f64, Mat)> {
    check_loss_inputs(logits, labels, mask)?;
    let m = mask.iter().filter(|&&b| b).count();
    if m == 0 {
        return Err(Error::InvalidArgument("loss mask is empty".into()));
    }
    let scale = weight / m as f64;
    let mut loss = 0.0;
    let mut dlogits = Mat::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        if !mask[i] {
            continue;
        }
        let row = logits.row(i);
        let label = labels[i] as usize;
        let drow = dlogits.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            let diff = v - f64::from(j == label);
            loss += scale * 0.5 * diff * diff;
            drow[j] = scale * diff;
        }
    }
    Ok((loss, dlogits))
}

fn check_loss_inputs(logits: &Mat, labels: &[u32], mask: &[bool]) -> Result<()> {
    if labels.len() != logits.rows() || mask.len() != logits.rows() {
        return Err(Error::Shape("loss inputs disagree on node count".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c as usize >= logits.cols()) {
        return Err(Error::Shape(format!(
            "label {bad} >= {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

/// Exact reverse-mode gradients for every coefficient matrix.
///
/// The diffusion chain reverses through `S^T`: with `dZ_{K-1} = dP H_{K-1}^T`
/// and `dZ_j = dP H_j^T + S^T dZ_{j+1}`, the layer's input gradient is
/// `dZ_0`. Set `want_input_grad` to also return the gradient with respect to
/// the input features.
pub fn model_backward(
    tape: &ActivationTape,
    dlogits: &Mat,
    gso: &Gso,
    params: &ModelParams,
    want_input_grad: bool,
) -> Result<Gradients> {
    if tape.layers.len() != params.num_layers() {
        return Err(Error::Shape("tape does not match model depth".into()));
    }
    let mut grads = Gradients::zeros_like(params);
    let mut dx = dlogits.clone();
    for l in (0..params.num_layers()).rev() {
        let entry = &tape.layers[l];
        if entry.pre.rows() != dx.rows() || entry.pre.cols() != dx.cols() {
            return Err(Error::Shape(format!(
                "layer {l} tape shape {}x{} != upstream {}x{}",
                entry.pre.rows(),
                entry.pre.cols(),
                dx.rows(),
                dx.cols()
            )));
        }
        let dpre = match entry.nonlinearity {
            Nonlinearity::Identity => dx,
            rho => {
                let deriv = entry.pre.map(|v| rho.derivative(v));
                dx.elementwise_mul(&deriv)?
            }
        };
        let taps = params.layer(l);
        for (k, h) in taps.iter().enumerate() {
            grads.layers[l][k] = entry.diffused[k].transpose_matmul(&dpre)?;
            debug_assert_eq!(grads.layers[l][k].rows(), h.rows());
        }
        if l == 0 && !want_input_grad {
            dx = Mat::zeros(0, 0);
            break;
        }
        let mut acc = dpre.matmul_transpose(&taps[taps.len() - 1])?;
        for k in (0..taps.len() - 1).rev() {
            acc = gso.apply_transpose(&acc)?;
            acc.add_assign(&dpre.matmul_transpose(&taps[k])?)?;
        }
        dx = acc;
    }
    if want_input_grad {
        grads.input_grad = Some(dx);
    }
    Ok(grads)
}

/// One gradient-descent update: `H - eta * grad`, elementwise.
pub fn sgd_step(params: &ModelParams, grads: &Gradients, eta: f64) -> Result<ModelParams> {
    let mut out = params.clone();
    for (p, g) in out
        .layers
        .iter_mut()
        .flatten()
        .zip(grads.layers.iter().flatten())
    {
        p.axpy(-eta, g)?;
    }
    Ok(out)
}

/// Rescale any layer whose stacked filter matrix has top singular value
/// above `bound` so it sits at the bound; layers already inside are left
/// untouched. The singular value comes from power iteration (100 steps,
/// relative tolerance 1e-6).
pub fn spectral_clip(params: &ModelParams, bound: f64) -> Result<ModelParams> {
    if !(bound > 0.0) {
        return Err(Error::InvalidArgument("spectral bound must be positive".into()));
    }
    let mut out = params.clone();
    for l in 0..out.num_layers() {
        let sigma = stacked_top_singular_value(out.layer(l), 100, 1e-6);
        if sigma > bound {
            let s = bound / sigma;
            for h in out.layer_mut(l) {
                h.scale(s);
            }
        }
    }
    Ok(out)
}

/// Top singular value of the taps stacked vertically into one
/// `(taps * f_in) x f_out` matrix.
pub fn stacked_top_singular_value(taps: &[Mat], iters: usize, tol: f64) -> f64 {
    let f_out = taps[0].cols();
    // power iteration on A^T A without forming it
    let mut v = vec![0.0f64; f_out];
    let mut rng = ChaCha8Rng::seed_from_u64(0x51);
    for x in &mut v {
        *x = rng.random_range(-1.0..1.0);
    }
    normalize(&mut v);
    let mut lambda = 0.0f64;
    for _ in 0..iters {
        // w = A^T (A v)
        let mut w = vec![0.0f64; f_out];
        for h in taps {
            // u = H v  (rows = f_in)
            for i in 0..h.rows() {
                let row = h.row(i);
                let mut u = 0.0;
                for (a, b) in row.iter().zip(&v) {
                    u += a * b;
                }
                // w += H^T u contribution of this row
                for (wj, &a) in w.iter_mut().zip(row) {
                    *wj += a * u;
                }
            }
        }
        let new_lambda = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if new_lambda <= f64::MIN_POSITIVE {
            return 0.0;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / new_lambda;
        }
        if (new_lambda - lambda).abs() <= tol * new_lambda {
            lambda = new_lambda;
            break;
        }
        lambda = new_lambda;
    }
    lambda.sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_gso, synth_sbm, Graph, GsoKind};

    fn identity_gso(n: usize) -> Gso {
        let row_offsets: Vec<usize> = (0..=n).collect();
        let col_indices: Vec<u32> = (0..n as u32).collect();
        Gso::from_parts(
            GsoKind::RawAdjacency,
            n,
            row_offsets,
            col_indices,
            vec![1.0; n],
        )
        .unwrap()
    }

    fn small_graph(seed: u64) -> Graph {
        synth_sbm(6, 2, 0.8, 0.3, 3, 0.2, seed).unwrap()
    }

    #[test]
    fn conv_single_tap_ignores_gso() {
        let g = small_graph(1);
        let s = build_gso(&g, GsoKind::MeanNeighbor);
        let h = Mat::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, -1.0]).unwrap();
        let out = conv_forward(g.features(), &s, std::slice::from_ref(&h)).unwrap();
        let direct = g.features().matmul(&h).unwrap();
        assert_eq!(out, direct);
    }

    #[test]
    fn conv_identity_gso_two_identity_taps_doubles_input() {
        let x = Mat::from_vec(3, 3, vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
        let eye = Mat::from_vec(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let s = identity_gso(3);
        let out = conv_forward(&x, &s, &[eye.clone(), eye]).unwrap();
        let mut expect = x.clone();
        expect.scale(2.0);
        assert!(out.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn conv_matches_dense_power_oracle() {
        // Oracle: materialize dense S^k and sum S^k X H_k directly.
        let g = synth_sbm(5, 5, 1.0, 0.4, 3, 0.1, 3).unwrap();
        let s = build_gso(&g, GsoKind::SymmetricNormalized);
        let taps: Vec<Mat> = (0..3)
            .map(|k| {
                let mut h = Mat::zeros(3, 2);
                for (i, v) in h.data_mut().iter_mut().enumerate() {
                    *v = ((k * 7 + i) as f64 * 0.37).sin();
                }
                h
            })
            .collect();
        let x = g.features().clone();
        let dense = s.to_dense();
        let mut power = Mat::from_vec(
            5,
            5,
            (0..25).map(|i| f64::from(i % 6 == 0)).collect(),
        )
        .unwrap(); // identity
        let mut oracle = x.matmul(&taps[0]).unwrap();
        for h in &taps[1..] {
            power = power.matmul(&dense).unwrap();
            oracle
                .add_assign(&power.matmul(&x).unwrap().matmul(h).unwrap())
                .unwrap();
        }
        let fast = conv_forward(&x, &s, &taps).unwrap();
        let rel = fast.max_abs_diff(&oracle) / oracle.frobenius_norm().max(1e-30);
        assert!(rel < 1e-10, "relative error {rel}");
    }

    #[test]
    fn layer_forward_identity_reduces_to_conv() {
        let g = small_graph(2);
        let s = build_gso(&g, GsoKind::MeanNeighbor);
        let taps = [
            Mat::from_vec(3, 2, vec![0.3; 6]).unwrap(),
            Mat::from_vec(3, 2, vec![-0.2; 6]).unwrap(),
        ];
        let (post, tape) = layer_forward(g.features(), &s, &taps, Nonlinearity::Identity).unwrap();
        assert_eq!(post, conv_forward(g.features(), &s, &taps).unwrap());
        assert_eq!(tape.diffused[0], *g.features());
    }

    #[test]
    fn relu_zeroes_negative_preactivations_and_tanh_is_bounded() {
        let s = identity_gso(4);
        let ones = Mat::from_vec(4, 2, vec![1.0; 8]).unwrap();
        // all-ones input with negative weights: every pre-activation < 0
        let neg = [Mat::from_vec(2, 3, vec![-5.0; 6]).unwrap()];
        let (post, tape) = layer_forward(&ones, &s, &neg, Nonlinearity::Relu).unwrap();
        assert!(tape.pre.data().iter().all(|&v| v < 0.0));
        assert!(post.data().iter().all(|&v| v == 0.0));
        let big = [Mat::from_vec(2, 3, vec![1.5, -1.5, 1.5, -1.5, 1.5, -1.5]).unwrap()];
        let (post, _) = layer_forward(&ones, &s, &big, Nonlinearity::Tanh).unwrap();
        assert!(post.data().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn model_forward_single_layer_is_conv() {
        let g = small_graph(4);
        let s = build_gso(&g, GsoKind::MeanNeighbor);
        let params = ModelParams::init_uniform(vec![3, 2], 2, 7).unwrap();
        let (logits, tape) = model_forward(g.features(), &s, &params, Nonlinearity::Relu).unwrap();
        // last layer is linear, so depth one never applies the nonlinearity
        assert_eq!(logits, conv_forward(g.features(), &s, params.layer(0)).unwrap());
        assert_eq!(tape.layers[0].diffused[0], *g.features());
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let g = small_graph(5);
        let s = build_gso(&g, GsoKind::MeanNeighbor);
        let params = ModelParams::zeros(vec![3, 4, 2], 2).unwrap();
        let (logits, _) = model_forward(g.features(), &s, &params, Nonlinearity::Relu).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn model_forward_matches_straight_line_reference() {
        // Independent reference: dense S, explicit per-node loops.
        let g = small_graph(6);
        let s = build_gso(&g, GsoKind::MeanNeighbor);
        let params = ModelParams::init_uniform(vec![3, 4, 2], 2, 11).unwrap();
        let (fast, _) = model_forward(g.features(), &s, &params, Nonlinearity::Tanh).unwrap();

        let dense = s.to_dense();
        let n = 6;
        let mut x: Vec<Vec<f64>> = (0..n).map(|i| g.features().row(i).to_vec()).collect();
        for l in 0..2 {
            let f_in = params.dims()[l];
            let f_out = params.dims()[l + 1];
            // z1 = S x
            let mut sx = vec![vec![0.0; f_in]; n];
            for i in 0..n {
                for j in 0..n {
                    for f in 0..f_in {
                        sx[i][f] += dense.get(i, j) * x[j][f];
                    }
                }
            }
            let mut next = vec![vec![0.0; f_out]; n];
            for i in 0..n {
                for o in 0..f_out {
                    let mut acc = 0.0;
                    for f in 0..f_in {
                        acc += x[i][f] * params.layer(l)[0].get(f, o);
                        acc += sx[i][f] * params.layer(l)[1].get(f, o);
                    }
                    next[i][o] = if l == 1 { acc } else { acc.tanh() };
                }
            }
            x = next;
        }
        for i in 0..n {
            for (j, &want) in x[i].iter().enumerate() {
                assert!((fast.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sage_layer_special_cases() {
        let g = small_graph(7);
        let s = build_gso(&g, GsoKind::MeanNeighbor);
        let x = g.features().clone();
        let x_agg = s.apply(&x).unwrap();
        let w_self = Mat::from_vec(3, 2, vec![0.5, -0.1, 0.2, 0.3, 0.0, 1.0]).unwrap();
        let w_zero = Mat::zeros(3, 2);
        // neighbor weights zero: pure per-node linear map
        let out = sage_layer(&x, &x_agg, &w_self, &w_zero).unwrap();
        assert_eq!(out, x.matmul(&w_self).unwrap());
    }

    #[test]
    fn sage_isolated_node_keeps_only_self_term() {
        let (ro, ci) = Graph::csr_from_undirected(3, &[(0, 1)]);
        let g = Graph::new(
            3,
            ro,
            ci,
            Mat::from_vec(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(),
            vec![0; 3],
            1,
            vec![true; 3],
            vec![false; 3],
            vec![false; 3],
        )
        .unwrap();
        let s = build_gso(&g, GsoKind::MeanNeighbor);
        let x_agg = s.apply(g.features()).unwrap();
        assert_eq!(x_agg.row(2), &[0.0, 0.0]);
        let w_self = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let w_neigh = Mat::from_vec(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let out = sage_layer(g.features(), &x_agg, &w_self, &w_neigh).unwrap();
        assert_eq!(out.row(2), g.features().row(2));
    }

    #[test]
    fn sage_equals_two_tap_mean_neighbor_conv() {
        let g = small_graph(8);
        let s = build_gso(&g, GsoKind::MeanNeighbor);
        let w_self = Mat::from_vec(3, 2, vec![0.4, -0.3, 0.1, 0.9, -0.5, 0.2]).unwrap();
        let w_neigh = Mat::from_vec(3, 2, vec![-0.1, 0.6, 0.3, -0.2, 0.8, 0.05]).unwrap();
        let x_agg = s.apply(g.features()).unwrap();
        let sage = sage_layer(g.features(), &x_agg, &w_self, &w_neigh).unwrap();
        let conv = conv_forward(g.features(), &s, &[w_self, w_neigh]).unwrap();
        assert!(sage.max_abs_diff(&conv) < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_and_uniform() {
        let labels = vec![0u32, 1, 2];
        let mask = vec![true; 3];
        let mut logits = Mat::zeros(3, 3);
        for i in 0..3 {
            logits.set(i, i, 30.0);
        }
        let (loss, _) = cross_entropy_loss(&logits, &labels, &mask, 1.0).unwrap();
        assert!(loss >= 0.0 && loss < 1e-12, "saturated loss {loss}");

        let uniform = Mat::zeros(3, 3);
        let (loss, _) = cross_entropy_loss(&uniform, &labels, &mask, 1.0).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_empty_mask() {
        let logits = Mat::zeros(2, 2);
        assert!(cross_entropy_loss(&logits, &[0, 1], &[false, false], 1.0).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let labels = vec![1u32, 0, 2, 1];
        let mask = vec![true, false, true, true];
        let mut logits = Mat::zeros(4, 3);
        for (i, v) in logits.data_mut().iter_mut().enumerate() {
            *v = ((i * 13 + 5) as f64 * 0.21).sin();
        }
        for loss_kind in [LossKind::CrossEntropy, LossKind::SquaredError] {
            let (_, dlogits) = loss_kind.compute(&logits, &labels, &mask, 0.7).unwrap();
            let eps = 1e-6;
            for i in 0..4 {
                for j in 0..3 {
                    let mut lp = logits.clone();
                    let mut lm = logits.clone();
                    lp.set(i, j, lp.get(i, j) + eps);
                    lm.set(i, j, lm.get(i, j) - eps);
                    let (fp, _) = loss_kind.compute(&lp, &labels, &mask, 0.7).unwrap();
                    let (fm, _) = loss_kind.compute(&lm, &labels, &mask, 0.7).unwrap();
                    let fd = (fp - fm) / (2.0 * eps);
                    let a = dlogits.get(i, j);
                    assert!(
                        (fd - a).abs() <= 1e-6 * (fd.abs() + a.abs()).max(1e-3),
                        "{loss_kind:?} d[{i}][{j}] fd {fd} vs {a}"
                    );
                }
            }
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let g = small_graph(9);
        let s = build_gso(&g, GsoKind::MeanNeighbor);
        let params = ModelParams::init_uniform(vec![3, 4, 2], 2, 1).unwrap();
        let (logits, tape) = model_forward(g.features(), &s, &params, Nonlinearity::Relu).unwrap();
        let zero = Mat::zeros(logits.rows(), logits.cols());
        let grads = model_backward(&tape, &zero, &s, &params, true).unwrap();
        assert_eq!(grads.frobenius_norm(), 0.0);
        assert_eq!(grads.input_grad.unwrap().frobenius_norm(), 0.0);
    }

    #[test]
    fn single_linear_layer_gradient_is_input_transpose_times_upstream() {
        let g = small_graph(10);
        let s = build_gso(&g, GsoKind::MeanNeighbor);
        let params = ModelParams::init_uniform(vec![3, 2], 1, 2).unwrap();
        let (logits, tape) = model_forward(g.features(), &s, &params, Nonlinearity::Identity).unwrap();
        let mut dlogits = Mat::zeros(logits.rows(), logits.cols());
        for (i, v) in dlogits.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.31).cos();
        }
        let grads = model_backward(&tape, &dlogits, &s, &params, false).unwrap();
        let analytic = g.features().transpose_matmul(&dlogits).unwrap();
        assert!(grads.layers[0][0].max_abs_diff(&analytic) < 1e-14);
    }

    /// Central-difference gradient for one coefficient entry.
    fn fd_param_grad(
        g: &Graph,
        s: &Gso,
        params: &ModelParams,
        rho: Nonlinearity,
        loss_kind: LossKind,
        l: usize,
        k: usize,
        i: usize,
        j: usize,
        step: f64,
    ) -> f64 {
        let eval = |p: &ModelParams| {
            let (logits, _) = model_forward(g.features(), s, p, rho).unwrap();
            let (loss, _) = loss_kind
                .compute(&logits, g.labels(), g.train_mask(), 1.0)
                .unwrap();
            loss
        };
        let mut plus = params.clone();
        plus.layer_mut(l)[k].set(i, j, params.layer(l)[k].get(i, j) + step);
        let mut minus = params.clone();
        minus.layer_mut(l)[k].set(i, j, params.layer(l)[k].get(i, j) - step);
        (eval(&plus) - eval(&minus)) / (2.0 * step)
    }

    #[test]
    fn every_parameter_gradient_matches_finite_differences() {
        let g = small_graph(12);
        let s = build_gso(&g, GsoKind::MeanNeighbor);
        let params = ModelParams::init_uniform(vec![3, 4, 2], 2, 5).unwrap();
        let rho = Nonlinearity::Tanh;
        let (logits, tape) = model_forward(g.features(), &s, &params, rho).unwrap();
        let (_, dlogits) =
            cross_entropy_loss(&logits, g.labels(), g.train_mask(), 1.0).unwrap();
        let grads = model_backward(&tape, &dlogits, &s, &params, false).unwrap();
        for l in 0..2 {
            for k in 0..2 {
                let h = &params.layer(l)[k];
                for i in 0..h.rows() {
                    for j in 0..h.cols() {
                        let fd = fd_param_grad(
                            &g,
                            &s,
                            &params,
                            rho,
                            LossKind::CrossEntropy,
                            l,
                            k,
                            i,
                            j,
                            1e-5,
                        );
                        let a = grads.layers[l][k].get(i, j);
                        let denom = fd.abs().max(a.abs()).max(1e-6);
                        assert!(
                            (fd - a).abs() / denom < 1e-4,
                            "grad[{l}][{k}][{i}][{j}]: fd {fd} vs analytic {a}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn relu_gradients_match_finite_differences_at_a_safe_point() {
        // A frozen seed whose pre-activations stay away from the ReLU kink.
        let g = small_graph(14);
        let s = build_gso(&g, GsoKind::MeanNeighbor);
        let params = ModelParams::init_uniform(vec![3, 4, 2], 2, 8).unwrap();
        let rho = Nonlinearity::Relu;
        let (logits, tape) = model_forward(g.features(), &s, &params, rho).unwrap();
        let (_, dlogits) =
            cross_entropy_loss(&logits, g.labels(), g.train_mask(), 1.0).unwrap();
        let grads = model_backward(&tape, &dlogits, &s, &params, false).unwrap();
        for (l, k, i, j) in [(0, 0, 0, 0), (0, 1, 2, 3), (1, 0, 1, 1), (1, 1, 3, 0)] {
            let fd = fd_param_grad(&g, &s, &params, rho, LossKind::CrossEntropy, l, k, i, j, 1e-5);
            let a = grads.layers[l][k].get(i, j);
            let denom = fd.abs().max(a.abs()).max(1e-6);
            assert!((fd - a).abs() / denom < 1e-4, "fd {fd} vs {a}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let g = small_graph(13);
        let s = build_gso(&g, GsoKind::MeanNeighbor);
        let params = ModelParams::init_uniform(vec![3, 3, 2], 2, 6).unwrap();
        let rho = Nonlinearity::Tanh;
        let (logits, tape) = model_forward(g.features(), &s, &params, rho).unwrap();
        let (_, dlogits) =
            cross_entropy_loss(&logits, g.labels(), g.train_mask(), 1.0).unwrap();
        let grads = model_backward(&tape, &dlogits, &s, &params, true).unwrap();
        let input_grad = grads.input_grad.unwrap();
        let eval = |x: &Mat| {
            let (logits, _) = model_forward(x, &s, &params, rho).unwrap();
            cross_entropy_loss(&logits, g.labels(), g.train_mask(), 1.0)
                .unwrap()
                .0
        };
        let step = 1e-5;
        for i in 0..6 {
            for j in 0..3 {
                let mut xp = g.features().clone();
                xp.set(i, j, xp.get(i, j) + step);
                let mut xm = g.features().clone();
                xm.set(i, j, xm.get(i, j) - step);
                let fd = (eval(&xp) - eval(&xm)) / (2.0 * step);
                let a = input_grad.get(i, j);
                let denom = fd.abs().max(a.abs()).max(1e-6);
                assert!((fd - a).abs() / denom < 1e-4, "dX[{i}][{j}] fd {fd} vs {a}");
            }
        }
    }

    #[test]
    fn sgd_step_identities() {
        let params = ModelParams::init_uniform(vec![3, 2], 2, 3).unwrap();
        let (logits_grads, zero_grads) = {
            let mut g = Gradients::zeros_like(&params);
            g.layers[0][0].set(0, 0, 2.0);
            (g, Gradients::zeros_like(&params))
        };
        assert_eq!(sgd_step(&params, &logits_grads, 0.0).unwrap(), params);
        assert_eq!(sgd_step(&params, &zero_grads, 0.5).unwrap(), params);
        let stepped = sgd_step(&params, &logits_grads, 0.5).unwrap();
        assert_eq!(
            stepped.layer(0)[0].get(0, 0),
            params.layer(0)[0].get(0, 0) - 1.0
        );
    }

    #[test]
    fn gradient_descent_contracts_geometrically_on_quadratic() {
        // Identity features and identity shift make the squared loss a pure
        // quadratic with Hessian I/m; the distance to the optimum must shrink
        // by exactly |1 - eta/m| per step.
        let n = 4;
        let s = identity_gso(n);
        let x = {
            let mut m = Mat::zeros(n, n);
            for i in 0..n {
                m.set(i, i, 1.0);
            }
            m
        };
        let labels = vec![0u32, 1, 2, 3];
        let mask = vec![true; n];
        let mut params = ModelParams::zeros(vec![n, n], 1).unwrap();
        for (i, v) in params.layer_mut(0)[0].data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.17).sin();
        }
        let eta = 1.5;
        let contraction = (1.0 - eta / n as f64).abs();
        let mut target = Mat::zeros(n, n);
        for i in 0..n {
            target.set(i, i, 1.0);
        }
        let mut prev_dist = params.layer(0)[0].max_abs_diff(&target);
        for _ in 0..30 {
            let (logits, tape) =
                model_forward(&x, &s, &params, Nonlinearity::Identity).unwrap();
            let (_, dlogits) = squared_loss(&logits, &labels, &mask, 1.0).unwrap();
            let grads = model_backward(&tape, &dlogits, &s, &params, false).unwrap();
            params = sgd_step(&params, &grads, eta).unwrap();
            let dist = params.layer(0)[0].max_abs_diff(&target);
            if prev_dist > 1e-13 {
                assert!(
                    (dist / prev_dist - contraction).abs() < 1e-10,
                    "contraction {} vs {contraction}",
                    dist / prev_dist
                );
            }
            prev_dist = dist;
        }
        assert!(prev_dist < 1e-3);
    }

    #[test]
    fn spectral_clip_behavior() {
        let params = ModelParams::init_uniform(vec![3, 4, 2], 2, 21).unwrap();
        // oracle: long power iteration from a different start
        let sigma0 = stacked_top_singular_value(params.layer(0), 10_000, 1e-14);
        let bound = sigma0 * 2.0;
        let clipped = spectral_clip(&params, bound).unwrap();
        assert_eq!(clipped, params); // inside the bound: untouched

        let mut blown = params.clone();
        for h in blown.layer_mut(0) {
            h.scale(10.0);
        }
        let clipped = spectral_clip(&blown, bound).unwrap();
        let sigma = stacked_top_singular_value(clipped.layer(0), 10_000, 1e-14);
        assert!(
            (sigma - bound).abs() < 1e-3,
            "post-clip sigma {sigma} vs bound {bound}"
        );

        let zeros = ModelParams::zeros(vec![3, 4, 2], 2).unwrap();
        assert_eq!(spectral_clip(&zeros, 1.0).unwrap(), zeros);
    }

    #[test]
    fn model_is_permutation_equivariant() {
        let g = small_graph(15);
        let s = build_gso(&g, GsoKind::MeanNeighbor);
        let params = ModelParams::init_uniform(vec![3, 4, 2], 2, 9).unwrap();
        let (logits, _) = model_forward(g.features(), &s, &params, Nonlinearity::Tanh).unwrap();

        let perm: Vec<u32> = vec![3, 0, 5, 1, 4, 2];
        let pg = g.permuted(&perm).unwrap();
        let ps = build_gso(&pg, GsoKind::MeanNeighbor);
        let (plogits, _) = model_forward(pg.features(), &ps, &params, Nonlinearity::Tanh).unwrap();
        for i in 0..6 {
            let pi = perm[i] as usize;
            for j in 0..2 {
                assert!(
                    (plogits.get(pi, j) - logits.get(i, j)).abs() < 1e-10,
                    "node {i} -> {pi} col {j}"
                );
            }
        }
    }
}
