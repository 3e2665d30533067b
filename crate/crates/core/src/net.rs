//! Jointly unitary- and permutation-equivariant precoder network.
//!
//! Every main layer right-multiplies the hidden state, `X' = X G(E1, E2)`,
//! where the `K x K` mixing matrices are produced by a small edge GNN from the
//! inner products `E1 = H^H X` and their weight-scaled copies
//! `E2 = diag(alpha) H^H X`. Both are invariant to `H -> U H, X -> U X`, and
//! the edge GNN commutes with simultaneous row/column permutation, so the whole
//! map satisfies `F(U H Π^T, Π alpha) = U F(H, alpha) Π^T`.
//!
//! The input channel matrix is first rescaled to squared Frobenius norm `NK`
//! and the weights to mean one.
//! The scale is invariant under the group action and the output is projected to
//! the power budget, so the rescaling does not change the policy's symmetry.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_sq, is_finite, real_inner, CMat, RMat, C64};
use crate::wsr::project_power;

/// Negative-side slope of the rectifier used inside the edge GNN.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationScope {
    PerChannel,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub num_layers: usize,
    pub hidden_channels: usize,
    pub subnet_layers: usize,
    pub subnet_hidden_channels: usize,
    pub residual_identity: bool,
    pub activation_scope: ActivationScope,
    /// Divide each channel's edge features by the RMS of its `E1` diagonal.
    pub feature_scaling: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            hidden_channels: 4,
            subnet_layers: 2,
            subnet_hidden_channels: 8,
            residual_identity: true,
            activation_scope: ActivationScope::PerChannel,
            feature_scaling: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_channels == 0 || self.subnet_layers == 0 || self.subnet_hidden_channels == 0 {
            return Err(Error::Domain(format!("all network sizes must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// `(input, output)` hidden channels of main layer `l`; the last layer
    /// reduces to the single precoder channel.
    pub fn main_channels(&self, l: usize) -> (usize, usize) {
        let c = self.hidden_channels;
        if l + 1 == self.num_layers {
            (c, 1)
        } else {
            (c, c)
        }
    }

    /// Channel widths of the edge-GNN sub-layers in main layer `l`.
    pub fn subnet_plan(&self, l: usize) -> Vec<(usize, usize)> {
        let (cin, cout) = self.main_channels(l);
        let first = 4 * cin;
        let last = 2 * cin * cout;
        let q = self.subnet_layers;
        (0..q)
            .map(|i| {
                let from = if i == 0 { first } else { self.subnet_hidden_channels };
                let to = if i + 1 == q { last } else { self.subnet_hidden_channels };
                (from, to)
            })
            .collect()
    }
}

/// One edge-GNN sub-layer. `a`, `b` and `c` are `in x out`: self term,
/// row aggregate and column aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeGnnLayerParams {
    pub a: RMat,
    pub b: RMat,
    pub c: RMat,
    pub bias: Vec<f64>,
}

impl EdgeGnnLayerParams {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self { a: RMat::zeros(cin, cout), b: RMat::zeros(cin, cout), c: RMat::zeros(cin, cout), bias: vec![0.0; cout] }
    }

    pub fn in_channels(&self) -> usize {
        self.a.nrows()
    }

    pub fn out_channels(&self) -> usize {
        self.a.ncols()
    }

    fn len(&self) -> usize {
        3 * self.a.len() + self.bias.len()
    }
}

/// All learnable parameters: one edge-GNN sub-network per main layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub layers: Vec<Vec<EdgeGnnLayerParams>>,
}

impl NetParams {
    pub fn zeros(cfg: &NetConfig) -> Self {
        let layers = (0..cfg.num_layers)
            .map(|l| cfg.subnet_plan(l).into_iter().map(|(i, o)| EdgeGnnLayerParams::zeros(i, o)).collect())
            .collect();
        Self { layers }
    }

    /// Gaussian initialization scaled by fan-in; the last sub-layer of each
    /// sub-network starts small so that the mixing matrices start near the
    /// residual identity.
    pub fn init<R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        for sub in &mut p.layers {
            let q = sub.len();
            for (i, layer) in sub.iter_mut().enumerate() {
                let fan_in = 3.0 * layer.in_channels() as f64;
                let gain = if i + 1 == q { 0.1 } else { 1.0 };
                let std = gain / fan_in.sqrt();
                for m in [&mut layer.a, &mut layer.b, &mut layer.c] {
                    for x in m.iter_mut() {
                        let z: f64 = StandardNormal.sample(rng);
                        *x = z * std;
                    }
                }
            }
        }
        p
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().flatten().map(EdgeGnnLayerParams::len).sum()
    }

    /// Flat layout: main layer, then sub-layer, then `a`, `b`, `c` (each
    /// row-major over `[in][out]`), then `bias`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in self.layers.iter().flatten() {
            for m in [&layer.a, &layer.b, &layer.c] {
                for i in 0..m.nrows() {
                    for j in 0..m.ncols() {
                        out.push(m[(i, j)]);
                    }
                }
            }
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn from_flat(cfg: &NetConfig, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(cfg);
        if flat.len() != p.num_params() {
            return Err(Error::Shape(format!(
                "configuration needs {} parameters, got {}",
                p.num_params(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for layer in p.layers.iter_mut().flatten() {
            for m in [&mut layer.a, &mut layer.b, &mut layer.c] {
                for i in 0..m.nrows() {
                    for j in 0..m.ncols() {
                        m[(i, j)] = it.next().unwrap();
                    }
                }
            }
            for b in layer.bias.iter_mut() {
                *b = it.next().unwrap();
            }
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|x| x.is_finite())
    }
}

/// Real edge-feature planes, four per hidden channel `c`:
/// `Re E1_c, Im E1_c, Re E2_c, Im E2_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFeatures {
    pub planes: Vec<RMat>,
}

fn check_input(h: &CMat, alpha: &[f64]) -> Result<()> {
    if alpha.len() != h.ncols() {
        return Err(Error::Shape(format!("{} weights for {} UEs", alpha.len(), h.ncols())));
    }
    if h.nrows() == 0 || h.ncols() == 0 {
        return Err(Error::Shape("empty channel matrix".into()));
    }
    Ok(())
}

/// `E1_c = H^H X_c` and `E2_c = diag(alpha) E1_c`, split into real planes.
pub fn edge_features(x: &[CMat], h: &CMat, alpha: &[f64]) -> Result<EdgeFeatures> {
    check_input(h, alpha)?;
    let k = h.ncols();
    let mut planes = Vec::with_capacity(4 * x.len());
    for xc in x {
        if xc.shape() != h.shape() {
            return Err(Error::Shape(format!("hidden state {:?} vs channel {:?}", xc.shape(), h.shape())));
        }
        let e1 = h.adjoint() * xc;
        let re = e1.map(|z| z.re);
        let im = e1.map(|z| z.im);
        let wre = RMat::from_fn(k, k, |i, j| alpha[i] * re[(i, j)]);
        let wim = RMat::from_fn(k, k, |i, j| alpha[i] * im[(i, j)]);
        planes.extend([re, im, wre, wim]);
    }
    Ok(EdgeFeatures { planes })
}

/// Divide the four planes of every channel by the RMS magnitude of that
/// channel's `E1` diagonal. The scale is invariant under both group actions,
/// so equivariance is kept, and it removes the overall size of the hidden
/// state, which otherwise depends on `N` and `K` through the norm activation.
/// Returns the scale used per channel (`None` for an all-zero diagonal).
pub fn scale_features(feats: &mut EdgeFeatures) -> Vec<Option<f64>> {
    feats
        .planes
        .chunks_mut(4)
        .map(|planes| {
            let k = planes[0].nrows();
            let m = (0..k).map(|i| planes[0][(i, i)].powi(2) + planes[1][(i, i)].powi(2)).sum::<f64>() / k as f64;
            if m > 0.0 && m.is_finite() {
                let s = m.sqrt();
                planes.iter_mut().for_each(|p| p.unscale_mut(s));
                Some(s)
            } else {
                None
            }
        })
        .collect()
}

/// Mean over the other entries of the same row: `(Σ_k Y[i,k] - Y[i,j]) / (K-1)`.
/// The operator is self-adjoint.
fn row_aggregate(y: &RMat) -> RMat {
    let k = y.ncols();
    if k < 2 {
        return RMat::zeros(y.nrows(), k);
    }
    let scale = 1.0 / (k - 1) as f64;
    let sums: Vec<f64> = (0..y.nrows()).map(|i| y.row(i).sum()).collect();
    RMat::from_fn(y.nrows(), k, |i, j| (sums[i] - y[(i, j)]) * scale)
}

/// Mean over the other entries of the same column; self-adjoint.
fn col_aggregate(y: &RMat) -> RMat {
    let k = y.nrows();
    if k < 2 {
        return RMat::zeros(k, y.ncols());
    }
    let scale = 1.0 / (k - 1) as f64;
    let sums: Vec<f64> = (0..y.ncols()).map(|j| y.column(j).sum()).collect();
    RMat::from_fn(k, y.ncols(), |i, j| (sums[j] - y[(i, j)]) * scale)
}

/// `dst += s * src`
fn add_scaled(dst: &mut RMat, s: f64, src: &RMat) {
    if s != 0.0 {
        dst.zip_apply(src, |d, x| *d += s * x);
    }
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn edge_gnn_linear(y: &[RMat], p: &EdgeGnnLayerParams) -> Vec<RMat> {
    let (rows, cols) = y[0].shape();
    let mut out: Vec<RMat> = p.bias.iter().map(|&b| RMat::from_element(rows, cols, b)).collect();
    for (ci, yc) in y.iter().enumerate() {
        let r = row_aggregate(yc);
        let c = col_aggregate(yc);
        for (o, z) in out.iter_mut().enumerate() {
            add_scaled(z, p.a[(ci, o)], yc);
            add_scaled(z, p.b[(ci, o)], &r);
            add_scaled(z, p.c[(ci, o)], &c);
        }
    }
    out
}

/// One edge-GNN sub-layer on `K x K x C_in` real features. `activate`
/// applies the leaky rectifier (hidden sub-layers); the final sub-layer of a
/// sub-network is linear.
pub fn edge_gnn_layer(y: &[RMat], p: &EdgeGnnLayerParams, activate: bool) -> Result<Vec<RMat>> {
    if y.len() != p.in_channels() {
        return Err(Error::Shape(format!("{} input planes for a {}-channel layer", y.len(), p.in_channels())));
    }
    let mut out = edge_gnn_linear(y, p);
    if activate {
        for z in &mut out {
            z.apply(|x| *x = leaky(*x));
        }
    }
    Ok(out)
}

/// Residual coefficient of `G_{c,c'}`: identity per channel, or an equal-weight
/// average when a layer reduces to a single channel.
fn residual_coeff(cin: usize, cout: usize, c: usize, c_out: usize) -> f64 {
    if cout == 1 {
        1.0 / cin as f64
    } else if c == c_out {
        1.0
    } else {
        0.0
    }
}

fn assemble_mixing(y: &[RMat], cin: usize, cout: usize, residual: bool) -> Vec<Vec<CMat>> {
    let k = y[0].nrows();
    (0..cin)
        .map(|c| {
            (0..cout)
                .map(|o| {
                    let m = c * cout + o;
                    let mut g = CMat::from_fn(k, k, |i, j| C64::new(y[2 * m][(i, j)], y[2 * m + 1][(i, j)]));
                    if residual {
                        let r = residual_coeff(cin, cout, c, o);
                        for i in 0..k {
                            g[(i, i)].re += r;
                        }
                    }
                    g
                })
                .collect()
        })
        .collect()
}

/// Run a sub-network on edge features and pair its output planes into complex
/// mixing matrices `G[c][c']`, `K x K` each.
pub fn subnet_forward(
    e: &EdgeFeatures,
    layer_params: &[EdgeGnnLayerParams],
    cin: usize,
    cout: usize,
    residual: bool,
) -> Result<Vec<Vec<CMat>>> {
    let mut y = e.planes.clone();
    let q = layer_params.len();
    for (i, p) in layer_params.iter().enumerate() {
        y = edge_gnn_layer(&y, p, i + 1 < q)?;
    }
    if y.len() != 2 * cin * cout {
        return Err(Error::Shape(format!("sub-network emits {} planes, expected {}", y.len(), 2 * cin * cout)));
    }
    Ok(assemble_mixing(&y, cin, cout, residual))
}

/// `X / (1 + ||X||_F^2)`, with the norm taken per channel or over all channels.
pub fn activation(x: &[CMat], scope: ActivationScope) -> Vec<CMat> {
    match scope {
        ActivationScope::PerChannel => x.iter().map(|xc| xc.unscale(1.0 + frobenius_sq(xc))).collect(),
        ActivationScope::Global => {
            let m: f64 = x.iter().map(frobenius_sq).sum();
            x.iter().map(|xc| xc.unscale(1.0 + m)).collect()
        }
    }
}

fn mix(x: &[CMat], g: &[Vec<CMat>]) -> Vec<CMat> {
    let cout = g[0].len();
    (0..cout)
        .map(|o| {
            let mut acc = &x[0] * &g[0][o];
            for c in 1..x.len() {
                acc.gemm(C64::new(1.0, 0.0), &x[c], &g[c][o], C64::new(1.0, 0.0));
            }
            acc
        })
        .collect()
}

/// Rescale so that `||H||_F^2 = N K`.
pub fn normalize_channel(h: &CMat) -> Result<CMat> {
    let norm = h.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Domain("channel matrix must be nonzero and finite".into()));
    }
    Ok(h.scale(((h.nrows() * h.ncols()) as f64).sqrt() / norm))
}

#[derive(Debug, Clone)]
struct LayerTape {
    x_in: Vec<CMat>,
    /// Per-channel feature scales; `None` where no scaling was applied.
    feature_scales: Vec<Option<f64>>,
    /// Inputs to each sub-layer (the edge features first).
    sub_in: Vec<Vec<RMat>>,
    /// Pre-activation outputs of each sub-layer.
    sub_pre: Vec<Vec<RMat>>,
    g: Vec<Vec<CMat>>,
    mixed: Vec<CMat>,
}

/// Rescale weights to mean one. Only the ratios between UEs matter to the
/// objective's maximizer, so this keeps the edge features at unit scale.
pub fn normalize_weights(alpha: &[f64]) -> Vec<f64> {
    let total: f64 = alpha.iter().sum();
    if total > 0.0 && total.is_finite() {
        alpha.iter().map(|a| a * alpha.len() as f64 / total).collect()
    } else {
        alpha.to_vec()
    }
}

/// Forward pass retaining everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    h: CMat,
    alpha: Vec<f64>,
    layers: Vec<LayerTape>,
    p_m: f64,
    /// Projected precoder.
    pub v: CMat,
}

pub fn forward_tape(h: &CMat, alpha: &[f64], p_m: f64, params: &NetParams, cfg: &NetConfig) -> Result<ForwardTape> {
    check_input(h, alpha)?;
    if params.layers.len() != cfg.num_layers {
        return Err(Error::Shape("parameters do not match the network configuration".into()));
    }
    let hn = normalize_channel(h)?;
    let alpha = normalize_weights(alpha);
    let alpha = alpha.as_slice();
    let mut x: Vec<CMat> = vec![hn.clone(); cfg.hidden_channels];
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for (l, sub) in params.layers.iter().enumerate() {
        let (cin, cout) = cfg.main_channels(l);
        let mut feats = edge_features(&x, &hn, alpha)?;
        let feature_scales = if cfg.feature_scaling { scale_features(&mut feats) } else { vec![None; cin] };
        let mut sub_in = Vec::with_capacity(sub.len());
        let mut sub_pre = Vec::with_capacity(sub.len());
        let mut y = feats.planes;
        for (i, p) in sub.iter().enumerate() {
            if y.len() != p.in_channels() {
                return Err(Error::Shape(format!("layer {l} sub-layer {i}: channel plan mismatch")));
            }
            let z = edge_gnn_linear(&y, p);
            let next = if i + 1 < sub.len() { z.iter().map(|m| m.map(leaky)).collect() } else { z.clone() };
            sub_in.push(std::mem::replace(&mut y, next));
            sub_pre.push(z);
        }
        let g = assemble_mixing(&y, cin, cout, cfg.residual_identity);
        let mixed = mix(&x, &g);
        if !mixed.iter().all(is_finite) {
            return Err(Error::NonFinite(format!("hidden state after main layer {l}")));
        }
        let next_x = if l + 1 < cfg.num_layers { activation(&mixed, cfg.activation_scope) } else { mixed.clone() };
        layers.push(LayerTape { x_in: std::mem::replace(&mut x, next_x), feature_scales, sub_in, sub_pre, g, mixed });
    }
    let v = project_power(&x[0], p_m).map_err(|_| Error::NonFinite("network output has zero norm".into()))?;
    Ok(ForwardTape { h: hn, alpha: alpha.to_vec(), layers, p_m, v })
}

/// The learned precoder for channel `h` and weights `alpha`, at power `p_m`.
pub fn forward(h: &CMat, alpha: &[f64], p_m: f64, params: &NetParams, cfg: &NetConfig) -> Result<CMat> {
    Ok(forward_tape(h, alpha, p_m, params, cfg)?.v)
}

fn activation_backward(mixed: &[CMat], grad_out: &[CMat], scope: ActivationScope) -> Vec<CMat> {
    match scope {
        ActivationScope::PerChannel => mixed
            .iter()
            .zip(grad_out)
            .map(|(p, gbar)| {
                let d = 1.0 + frobenius_sq(p);
                let dm = -real_inner(gbar, p) / (d * d);
                gbar.unscale(d) + p.scale(2.0 * dm)
            })
            .collect(),
        ActivationScope::Global => {
            let d = 1.0 + mixed.iter().map(frobenius_sq).sum::<f64>();
            let dm = -mixed.iter().zip(grad_out).map(|(p, g)| real_inner(g, p)).sum::<f64>() / (d * d);
            mixed.iter().zip(grad_out).map(|(p, gbar)| gbar.unscale(d) + p.scale(2.0 * dm)).collect()
        }
    }
}

/// Backward pass of one linear edge-GNN sub-layer. Accumulates parameter
/// gradients into `grad` and returns the gradient with respect to its input.
fn edge_gnn_backward(y: &[RMat], zbar: &[RMat], p: &EdgeGnnLayerParams, grad: &mut EdgeGnnLayerParams) -> Vec<RMat> {
    for (o, zb) in zbar.iter().enumerate() {
        grad.bias[o] += zb.sum();
    }
    let mut ybar = Vec::with_capacity(y.len());
    for (ci, yc) in y.iter().enumerate() {
        let r = row_aggregate(yc);
        let c = col_aggregate(yc);
        let (rows, cols) = yc.shape();
        let mut self_part = RMat::zeros(rows, cols);
        let mut row_part = RMat::zeros(rows, cols);
        let mut col_part = RMat::zeros(rows, cols);
        for (o, zb) in zbar.iter().enumerate() {
            grad.a[(ci, o)] += zb.dot(yc);
            grad.b[(ci, o)] += zb.dot(&r);
            grad.c[(ci, o)] += zb.dot(&c);
            add_scaled(&mut self_part, p.a[(ci, o)], zb);
            add_scaled(&mut row_part, p.b[(ci, o)], zb);
            add_scaled(&mut col_part, p.c[(ci, o)], zb);
        }
        ybar.push(self_part + row_aggregate(&row_part) + col_aggregate(&col_part));
    }
    ybar
}

/// Gradient of a scalar loss with respect to all parameters, given the loss
/// gradient `v_bar = dL/dRe V + i dL/dIm V` at the projected output.
pub fn backward(tape: &ForwardTape, v_bar: &CMat, params: &NetParams, cfg: &NetConfig) -> Result<NetParams> {
    let mut grad = NetParams::zeros(cfg);
    let last = tape.layers.last().expect("at least one layer");

    // V = sqrt(p) P / ||P||
    let p_out = &last.mixed[0];
    let n = p_out.norm();
    let s = tape.p_m.sqrt();
    let mut x_bar: Vec<CMat> = vec![v_bar.scale(s / n) - p_out.scale(s * real_inner(v_bar, p_out) / (n * n * n))];

    for l in (0..tape.layers.len()).rev() {
        let lt = &tape.layers[l];
        let (cin, cout) = cfg.main_channels(l);
        let mixed_bar = if l + 1 < tape.layers.len() {
            activation_backward(&lt.mixed, &x_bar, cfg.activation_scope)
        } else {
            x_bar
        };

        // P_{c'} = Σ_c X_c G_{c,c'}
        let mut xin_bar: Vec<CMat> = lt.x_in.iter().map(|x| CMat::zeros(x.nrows(), x.ncols())).collect();
        let mut y_bar: Vec<RMat> = Vec::with_capacity(2 * cin * cout);
        for c in 0..cin {
            for o in 0..cout {
                let gbar = lt.x_in[c].adjoint() * &mixed_bar[o];
                xin_bar[c].gemm(C64::new(1.0, 0.0), &mixed_bar[o], &lt.g[c][o].adjoint(), C64::new(1.0, 0.0));
                y_bar.push(gbar.map(|z| z.re));
                y_bar.push(gbar.map(|z| z.im));
            }
        }

        let sub = &params.layers[l];
        for i in (0..sub.len()).rev() {
            let mut zbar = y_bar;
            if i + 1 < sub.len() {
                for (zb, z) in zbar.iter_mut().zip(&lt.sub_pre[i]) {
                    zb.zip_apply(z, |g, pre| {
                        if pre <= 0.0 {
                            *g *= LEAKY_SLOPE
                        }
                    });
                }
            }
            y_bar = edge_gnn_backward(&lt.sub_in[i], &zbar, &sub[i], &mut grad.layers[l][i]);
        }

        if l > 0 {
            let k = tape.h.ncols();
            // Feature scaling: E' = E / s with s = sqrt(mean_i |E1_ii|^2).
            for c in 0..cin {
                if let Some(s) = lt.feature_scales[c] {
                    let scaled = &lt.sub_in[0][4 * c..4 * c + 4];
                    let dot: f64 = (0..4).map(|p| y_bar[4 * c + p].dot(&scaled[p])).sum();
                    for p in 0..4 {
                        y_bar[4 * c + p].unscale_mut(s);
                    }
                    for i in 0..k {
                        y_bar[4 * c][(i, i)] -= dot * scaled[0][(i, i)] / (k as f64 * s);
                        y_bar[4 * c + 1][(i, i)] -= dot * scaled[1][(i, i)] / (k as f64 * s);
                    }
                }
            }
            // Edge features: E1_c = H^H X_c, E2_c = diag(alpha) E1_c.
            for c in 0..cin {
                let e1_bar = CMat::from_fn(k, k, |i, j| {
                    let a = tape.alpha[i];
                    C64::new(
                        y_bar[4 * c][(i, j)] + a * y_bar[4 * c + 2][(i, j)],
                        y_bar[4 * c + 1][(i, j)] + a * y_bar[4 * c + 3][(i, j)],
                    )
                });
                xin_bar[c].gemm(C64::new(1.0, 0.0), &tape.h, &e1_bar, C64::new(1.0, 0.0));
            }
            if !xin_bar.iter().all(is_finite) {
                return Err(Error::NonFinite(format!("gradient entering main layer {l}")));
            }
        }
        x_bar = xin_bar;
    }
    Ok(grad)
}

/// Largest relative residual of projecting a column of `v` onto range(H).
pub fn column_span_check(h: &CMat, v: &CMat) -> f64 {
    let svd = h.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.iter().fold(0.0f64, |m, &s| m.max(s));
    let cols: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > 1e-12 * smax)
        .collect();
    let basis = CMat::from_fn(h.nrows(), cols.len(), |r, c| u[(r, cols[c])]);
    let resid = v - &basis * (basis.adjoint() * v);
    (0..v.ncols())
        .map(|j| {
            let vn = v.column(j).norm();
            if vn == 0.0 {
                0.0
            } else {
                resid.column(j).norm() / vn
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{complex_gaussian_matrix, conjugate_by_permutation, permute_columns, permute_vec, random_permutation, random_unitary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_real(rng: &mut ChaCha8Rng, k: usize) -> RMat {
        RMat::from_fn(k, k, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn features_of_identity_instance() {
        let i2 = CMat::identity(2, 2);
        let e = edge_features(&[i2.clone()], &i2, &[2.0, 3.0]).unwrap();
        assert_eq!(e.planes[0], RMat::identity(2, 2));
        assert_eq!(e.planes[1], RMat::zeros(2, 2));
        assert_eq!(e.planes[2], RMat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]));
        assert!(edge_features(&[i2.clone()], &i2, &[1.0]).is_err());
    }

    #[test]
    fn features_are_unitary_invariant_and_permutation_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = complex_gaussian_matrix(&mut rng, 5, 3);
        let x = complex_gaussian_matrix(&mut rng, 5, 3);
        let alpha = [0.3, 1.2, 2.0];
        let base = edge_features(&[x.clone()], &h, &alpha).unwrap();

        let u = random_unitary(&mut rng, 5);
        let rot = edge_features(&[&u * &x], &(&u * &h), &alpha).unwrap();
        for (a, b) in base.planes.iter().zip(&rot.planes) {
            assert!((a - b).norm() < 1e-10);
        }

        let p = random_permutation(&mut rng, 3);
        let perm = edge_features(&[permute_columns(&x, &p)], &permute_columns(&h, &p), &permute_vec(&alpha, &p)).unwrap();
        for (a, b) in base.planes.iter().zip(&perm.planes) {
            assert!((conjugate_by_permutation(a, &p) - b).norm() < 1e-10);
        }
    }

    #[test]
    fn edge_layer_update_rule() {
        let y = vec![RMat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])];
        let mut p = EdgeGnnLayerParams::zeros(1, 1);
        p.a[(0, 0)] = 1.0;
        p.b[(0, 0)] = 1.0;
        p.c[(0, 0)] = 1.0;
        let out = edge_gnn_layer(&y, &p, false).unwrap();
        assert_eq!(out[0][(0, 0)], 6.0);

        let mut id = EdgeGnnLayerParams::zeros(1, 1);
        id.a[(0, 0)] = 1.0;
        assert_eq!(edge_gnn_layer(&y, &id, false).unwrap()[0], y[0]);

        // K = 1: aggregates vanish.
        let single = vec![RMat::from_element(1, 1, 5.0)];
        assert_eq!(edge_gnn_layer(&single, &p, false).unwrap()[0][(0, 0)], 5.0);
    }

    #[test]
    fn edge_layer_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = 5;
        let y: Vec<RMat> = (0..3).map(|_| rand_real(&mut rng, k)).collect();
        let mut p = EdgeGnnLayerParams::zeros(3, 2);
        for m in [&mut p.a, &mut p.b, &mut p.c] {
            m.apply(|x| *x = StandardNormal.sample(&mut rng));
        }
        p.bias = vec![0.3, -0.7];
        let perm = random_permutation(&mut rng, k);
        let base = edge_gnn_layer(&y, &p, true).unwrap();
        let moved_in: Vec<RMat> = y.iter().map(|m| conjugate_by_permutation(m, &perm)).collect();
        let moved = edge_gnn_layer(&moved_in, &p, true).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            assert!((conjugate_by_permutation(a, &perm) - b).norm() < 1e-10);
        }
    }

    #[test]
    fn zero_subnet_gives_residual_identity() {
        let cfg = NetConfig::default();
        let params = NetParams::zeros(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = complex_gaussian_matrix(&mut rng, 4, 3);
        let x = vec![h.clone(); cfg.hidden_channels];
        let e = edge_features(&x, &h, &[1.0, 1.0, 1.0]).unwrap();
        let g = subnet_forward(&e, &params.layers[0], 4, 4, true).unwrap();
        for (c, row) in g.iter().enumerate() {
            for (o, m) in row.iter().enumerate() {
                let expect = if c == o { CMat::identity(3, 3) } else { CMat::zeros(3, 3) };
                assert_eq!(m, &expect);
            }
        }
        let v = forward(&h, &[1.0, 2.0, 0.5], 2.0, &params, &cfg).unwrap();
        assert!((v - h.scale(2.0f64.sqrt() / h.norm())).norm() < 1e-12);
    }

    #[test]
    fn subnet_is_permutation_equivariant_and_stable() {
        let cfg = NetConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = NetParams::init(&cfg, &mut rng);
        let k = 4;
        let planes: Vec<RMat> = (0..16).map(|_| rand_real(&mut rng, k)).collect();
        let e = EdgeFeatures { planes: planes.clone() };
        let perm = random_permutation(&mut rng, k);
        let moved = EdgeFeatures { planes: planes.iter().map(|m| conjugate_by_permutation(m, &perm)).collect() };
        let g = subnet_forward(&e, &params.layers[0], 4, 4, true).unwrap();
        let gm = subnet_forward(&moved, &params.layers[0], 4, 4, true).unwrap();
        for (ra, rb) in g.iter().zip(&gm) {
            for (a, b) in ra.iter().zip(rb) {
                let pa = CMat::from_fn(k, k, |i, j| a[(perm[i], perm[j])]);
                assert!((pa - b).norm() < 1e-10);
            }
        }
        let big = EdgeFeatures { planes: planes.iter().map(|m| m * 1e3).collect() };
        let gb = subnet_forward(&big, &params.layers[0], 4, 4, true).unwrap();
        assert!(gb.iter().flatten().all(is_finite));
    }

    #[test]
    fn activation_formula() {
        let x = CMat::from_element(3, 1, C64::new(1.0, 0.0));
        let out = activation(&[x.clone()], ActivationScope::PerChannel);
        assert!((&out[0] - x.unscale(4.0)).norm() < 1e-15);
        let zero = activation(&[CMat::zeros(2, 2)], ActivationScope::Global);
        assert_eq!(zero[0], CMat::zeros(2, 2));
        let mut best: f64 = 0.0;
        for i in 0..=2000 {
            let r = i as f64 / 500.0;
            let x = CMat::from_element(1, 1, C64::new(r, 0.0));
            let n = activation(&[x], ActivationScope::Global)[0].norm();
            assert!((n - r / (1.0 + r * r)).abs() < 1e-15);
            assert!(n <= 0.5 + 1e-15);
            best = best.max(n);
        }
        assert!((best - 0.5).abs() < 1e-12);
    }

    #[test]
    fn forward_is_jointly_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for scope in [ActivationScope::PerChannel, ActivationScope::Global] {
            let cfg = NetConfig { activation_scope: scope, ..NetConfig::default() };
            let params = NetParams::init(&cfg, &mut rng);
            for _ in 0..10 {
                let h = complex_gaussian_matrix(&mut rng, 8, 4);
                let alpha: Vec<f64> = (0..4).map(|_| rng.random::<f64>() + 0.1).collect();
                let u = random_unitary(&mut rng, 8);
                let p = random_permutation(&mut rng, 4);
                let v = forward(&h, &alpha, 1.0, &params, &cfg).unwrap();
                let moved = forward(&permute_columns(&(&u * &h), &p), &permute_vec(&alpha, &p), 1.0, &params, &cfg).unwrap();
                let expect = permute_columns(&(&u * &v), &p);
                assert!((moved - &expect).norm() / expect.norm() < 1e-9);
            }
        }
    }

    #[test]
    fn output_stays_in_channel_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = NetConfig::default();
        let params = NetParams::init(&cfg, &mut rng);
        let h = complex_gaussian_matrix(&mut rng, 8, 3);
        let v = forward(&h, &[1.0, 0.5, 2.0], 1.0, &params, &cfg).unwrap();
        assert!(column_span_check(&h, &v) < 1e-8);
        assert!((frobenius_sq(&v) - 1.0).abs() < 1e-10);
        assert!(column_span_check(&h, &h) < 1e-14);
        let r = complex_gaussian_matrix(&mut rng, 8, 3);
        assert!(column_span_check(&h, &r) > 0.1);
    }

    #[test]
    fn parameter_count_is_size_independent() {
        let cfg = NetConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = NetParams::init(&cfg, &mut rng);
        for (n, k) in [(8, 4), (32, 16), (4, 1), (3, 32)] {
            let h = complex_gaussian_matrix(&mut rng, n, k);
            let v = forward(&h, &vec![1.0; k], 1.0, &params, &cfg).unwrap();
            assert_eq!(v.shape(), (n, k));
        }
        let flat = params.to_flat();
        assert_eq!(flat.len(), params.num_params());
        assert_eq!(NetParams::from_flat(&cfg, &flat).unwrap(), params);
        assert!(NetParams::from_flat(&cfg, &flat[1..]).is_err());
    }

    #[test]
    fn uniform_weights_duplicate_the_plain_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = complex_gaussian_matrix(&mut rng, 4, 3);
        let e = edge_features(&[h.clone()], &h, &[1.0; 3]).unwrap();
        assert_eq!(e.planes[0], e.planes[2]);
        assert_eq!(e.planes[1], e.planes[3]);
    }

    use rand::Rng;
}
