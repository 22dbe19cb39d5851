//! Feature adaptation from the real-image domain to the rendered-view domain.
//!
//! A model maps a (flattened) real-image feature `x` to `phi(x)`, trained so
//! that `phi(x)` is cosine-aligned with the rendered-view feature `y` of the
//! same object and pose. The per-pair loss is `(1 - cos(phi(x), y))^2`; the
//! L2 regularizer enters as weight decay inside [`sgd_step`].
//!
//! Parameters are kept as a list of flat tensors whose layout depends on the
//! family:
//!
//! | family             | tensors                                             |
//! |--------------------|-----------------------------------------------------|
//! | `Identity`         | none                                                |
//! | `Affine(ReLU)`     | `A` (out x in, row-major), `b` (out)                |
//! | `Conv{1x1,3x3}ReLU`| `K` (C_out x C_in x k x k), `b` (C_out)             |
//! | `TwoLayerReLU`     | `A1` (hidden x in), `b1`, `A2` (out x hidden), `b2` |

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::featspace::{dot, norm, FeatureVector, ZERO_NORM};
use crate::seed;
use crate::simkit::cosine;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransformFamily {
    Identity,
    Affine,
    AffineReLU,
    Conv1x1ReLU,
    Conv3x3ReLU,
    TwoLayerReLU,
}

impl TransformFamily {
    pub const ALL: [TransformFamily; 6] = [
        TransformFamily::Identity,
        TransformFamily::Affine,
        TransformFamily::AffineReLU,
        TransformFamily::Conv1x1ReLU,
        TransformFamily::Conv3x3ReLU,
        TransformFamily::TwoLayerReLU,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformFamily::Identity => "identity",
            TransformFamily::Affine => "affine",
            TransformFamily::AffineReLU => "affine_relu",
            TransformFamily::Conv1x1ReLU => "conv1x1_relu",
            TransformFamily::Conv3x3ReLU => "conv3x3_relu",
            TransformFamily::TwoLayerReLU => "two_layer_relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }

    /// Stable numeric tag used in the model file.
    pub fn tag(self) -> u8 {
        Self::ALL.iter().position(|f| *f == self).unwrap() as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    fn conv_kernel(self) -> Option<usize> {
        match self {
            TransformFamily::Conv1x1ReLU => Some(1),
            TransformFamily::Conv3x3ReLU => Some(3),
            _ => None,
        }
    }
}

/// Spatial layout `(channels, rows, cols)` of a flattened feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape3 {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Shape3 {
    pub fn new(channels: usize, rows: usize, cols: usize) -> Self {
        Self {
            channels,
            rows,
            cols,
        }
    }

    pub fn flat(dim: usize) -> Self {
        Self::new(dim, 1, 1)
    }

    pub fn dim(&self) -> usize {
        self.channels * self.rows * self.cols
    }
}

impl From<(usize, usize, usize)> for Shape3 {
    fn from((c, r, w): (usize, usize, usize)) -> Self {
        Self::new(c, r, w)
    }
}

/// One `(real, rendered)` feature pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub x: FeatureVector,
    pub y: FeatureVector,
}

impl TrainingPair {
    pub fn new(x: FeatureVector, y: FeatureVector) -> Result<Self> {
        if y.norm() < ZERO_NORM {
            return Err(Error::InvalidArgument("training target must be nonzero".into()));
        }
        Ok(Self { x, y })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lr_drop_every: usize,
    pub lr_drop_factor: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            lr_drop_every: 15,
            lr_drop_factor: 0.1,
            max_epochs: 60,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr0 > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.batch_size >= 1
            && self.lr_drop_every >= 1
            && self.lr_drop_factor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }

    /// Step schedule: `lr0 * factor^(epoch / drop_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_drop_factor.powi((epoch / self.lr_drop_every) as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationModel {
    family: TransformFamily,
    in_shape: Shape3,
    out_dim: usize,
    hidden_dim: usize,
    params: Vec<Vec<f64>>,
}

/// Gradient (or momentum buffer) with the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(m: &AdaptationModel) -> Self {
        Gradients(m.params.iter().map(|t| vec![0.0; t.len()]).collect())
    }


    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

pub type MomentumState = Gradients;

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// y += A x, A is rows x x.len() row-major.
fn matvec_add(a: &[f64], x: &[f64], y: &mut [f64]) {
    for (row, out) in a.chunks_exact(x.len()).zip(y.iter_mut()) {
        *out += dot(row, x);
    }
}

/// Intermediate values needed by the backward pass.
struct Trace {
    /// Pre-activation of the output layer (conv / affine families).
    out_pre: Vec<f64>,
    /// Hidden pre-activation and activation (two-layer only).
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
}

impl AdaptationModel {
    /// Builds a model from explicit parameter tensors, validating shapes.
    pub fn from_params(
        family: TransformFamily,
        in_shape: Shape3,
        out_dim: usize,
        hidden_dim: usize,
        params: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let m = Self {
            family,
            in_shape,
            out_dim,
            hidden_dim,
            params,
        };
        let expected = m.expected_sizes()?;
        if expected.len() != m.params.len()
            || expected.iter().zip(&m.params).any(|(e, p)| *e != p.len())
        {
            return Err(Error::InvalidArgument(format!(
                "parameter sizes {:?} do not match {:?} for {}",
                m.params.iter().map(Vec::len).collect::<Vec<_>>(),
                expected,
                family.name()
            )));
        }
        if m.params.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite model parameter".into()));
        }
        Ok(m)
    }

    /// Lengths of the parameter tensors for a family and shape.
    pub fn param_sizes(
        family: TransformFamily,
        in_shape: Shape3,
        out_dim: usize,
        hidden_dim: usize,
    ) -> Result<Vec<usize>> {
        Self {
            family,
            in_shape,
            out_dim,
            hidden_dim,
            params: Vec::new(),
        }
        .expected_sizes()
    }

    fn expected_sizes(&self) -> Result<Vec<usize>> {
        let d_in = self.in_shape.dim();
        if d_in == 0 || self.out_dim == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        let c = self.in_shape.channels;
        Ok(match self.family {
            TransformFamily::Identity => {
                if self.out_dim != d_in {
                    return Err(Error::InvalidArgument(format!(
                        "identity adaptation needs out_dim {} == in_dim {}",
                        self.out_dim, d_in
                    )));
                }
                vec![]
            }
            TransformFamily::Affine | TransformFamily::AffineReLU => {
                vec![self.out_dim * d_in, self.out_dim]
            }
            TransformFamily::Conv1x1ReLU | TransformFamily::Conv3x3ReLU => {
                if self.out_dim != d_in {
                    return Err(Error::InvalidArgument(format!(
                        "convolutional adaptation preserves shape: out_dim {} != {}",
                        self.out_dim, d_in
                    )));
                }
                let k = self.family.conv_kernel().unwrap();
                vec![c * c * k * k, c]
            }
            TransformFamily::TwoLayerReLU => {
                if self.hidden_dim == 0 {
                    return Err(Error::InvalidArgument("hidden_dim must be positive".into()));
                }
                vec![
                    self.hidden_dim * d_in,
                    self.hidden_dim,
                    self.out_dim * self.hidden_dim,
                    self.out_dim,
                ]
            }
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            family: TransformFamily::Identity,
            in_shape: Shape3::flat(dim),
            out_dim: dim,
            hidden_dim: 0,
            params: Vec::new(),
        }
    }

    pub fn family(&self) -> TransformFamily {
        self.family
    }

    pub fn in_shape(&self) -> Shape3 {
        self.in_shape
    }

    pub fn in_dim(&self) -> usize {
        self.in_shape.dim()
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Smallest |pre-activation| over the ReLUs evaluated on `x`; infinite
    /// for families without a ReLU. Finite-difference checks are only
    /// meaningful when this exceeds the probe step.
    pub fn relu_margin(&self, x: &FeatureVector) -> Result<f64> {
        check_dim(self.in_shape.dim(), x.dim())?;
        if matches!(self.family, TransformFamily::Identity | TransformFamily::Affine) {
            return Ok(f64::INFINITY);
        }
        let (_, t) = self.forward_trace(x.as_slice());
        Ok(t.out_pre.iter().chain(&t.hidden_pre).fold(f64::INFINITY, |m, v| m.min(v.abs())))
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    fn conv_forward(&self, x: &[f64], k: usize, out: &mut [f64]) {
        let Shape3 {
            channels: c,
            rows,
            cols,
        } = self.in_shape;
        let (kernel, bias) = (&self.params[0], &self.params[1]);
        let pad = (k / 2) as isize;
        for o in 0..c {
            for r in 0..rows {
                for col in 0..cols {
                    let mut acc = bias[o];
                    for i in 0..c {
                        for dr in 0..k {
                            let rr = r as isize + dr as isize - pad;
                            if rr < 0 || rr >= rows as isize {
                                continue;
                            }
                            for dc in 0..k {
                                let cc = col as isize + dc as isize - pad;
                                if cc < 0 || cc >= cols as isize {
                                    continue;
                                }
                                acc += kernel[((o * c + i) * k + dr) * k + dc]
                                    * x[(i * rows + rr as usize) * cols + cc as usize];
                            }
                        }
                    }
                    out[(o * rows + r) * cols + col] = acc;
                }
            }
        }
    }

    fn forward_trace(&self, x: &[f64]) -> (Vec<f64>, Trace) {
        let mut trace = Trace {
            out_pre: Vec::new(),
            hidden_pre: Vec::new(),
            hidden: Vec::new(),
        };
        let out = match self.family {
            TransformFamily::Identity => x.to_vec(),
            TransformFamily::Affine | TransformFamily::AffineReLU => {
                let mut z = self.params[1].clone();
                matvec_add(&self.params[0], x, &mut z);
                trace.out_pre = z.clone();
                if self.family == TransformFamily::AffineReLU {
                    relu(&mut z);
                }
                z
            }
            TransformFamily::Conv1x1ReLU | TransformFamily::Conv3x3ReLU => {
                let mut z = vec![0.0; self.out_dim];
                self.conv_forward(x, self.family.conv_kernel().unwrap(), &mut z);
                trace.out_pre = z.clone();
                relu(&mut z);
                z
            }
            TransformFamily::TwoLayerReLU => {
                let mut h = self.params[1].clone();
                matvec_add(&self.params[0], x, &mut h);
                trace.hidden_pre = h.clone();
                relu(&mut h);
                let mut z = self.params[3].clone();
                matvec_add(&self.params[2], &h, &mut z);
                trace.out_pre = z.clone();
                trace.hidden = h;
                relu(&mut z);
                z
            }
        };
        (out, trace)
    }

    /// Accumulate `scale * d(loss)/d(params)` given `g_out = d(loss)/d(phi(x))`.
    fn backward(&self, x: &[f64], trace: &Trace, g_out: &[f64], scale: f64, grads: &mut Gradients) {
        // Subgradient 0 at exactly 0.
        let gate = |pre: &[f64], g: &[f64]| -> Vec<f64> {
            pre.iter()
                .zip(g)
                .map(|(p, g)| if *p > 0.0 { g * scale } else { 0.0 })
                .collect()
        };
        match self.family {
            TransformFamily::Identity => {}
            TransformFamily::Affine => {
                let gz: Vec<f64> = g_out.iter().map(|g| g * scale).collect();
                outer_add(&gz, x, &mut grads.0[0]);
                add(&gz, &mut grads.0[1]);
            }
            TransformFamily::AffineReLU => {
                let gz = gate(&trace.out_pre, g_out);
                outer_add(&gz, x, &mut grads.0[0]);
                add(&gz, &mut grads.0[1]);
            }
            TransformFamily::Conv1x1ReLU | TransformFamily::Conv3x3ReLU => {
                let gz = gate(&trace.out_pre, g_out);
                let k = self.family.conv_kernel().unwrap();
                let Shape3 {
                    channels: c,
                    rows,
                    cols,
                } = self.in_shape;
                let pad = (k / 2) as isize;
                let (gk, gb) = grads.0.split_at_mut(1);
                let (gk, gb) = (&mut gk[0], &mut gb[0]);
                for o in 0..c {
                    for r in 0..rows {
                        for col in 0..cols {
                            let g = gz[(o * rows + r) * cols + col];
                            if g == 0.0 {
                                continue;
                            }
                            gb[o] += g;
                            for i in 0..c {
                                for dr in 0..k {
                                    let rr = r as isize + dr as isize - pad;
                                    if rr < 0 || rr >= rows as isize {
                                        continue;
                                    }
                                    for dc in 0..k {
                                        let cc = col as isize + dc as isize - pad;
                                        if cc < 0 || cc >= cols as isize {
                                            continue;
                                        }
                                        gk[((o * c + i) * k + dr) * k + dc] +=
                                            g * x[(i * rows + rr as usize) * cols + cc as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            TransformFamily::TwoLayerReLU => {
                let gz2 = gate(&trace.out_pre, g_out);
                outer_add(&gz2, &trace.hidden, &mut grads.0[2]);
                add(&gz2, &mut grads.0[3]);
                // g_h = A2^T gz2, masked by the hidden ReLU.
                let a2 = &self.params[2];
                let mut gh = vec![0.0; self.hidden_dim];
                for (row, g) in a2.chunks_exact(self.hidden_dim).zip(&gz2) {
                    if *g == 0.0 {
                        continue;
                    }
                    for (acc, w) in gh.iter_mut().zip(row) {
                        *acc += g * w;
                    }
                }
                for (g, pre) in gh.iter_mut().zip(&trace.hidden_pre) {
                    if *pre <= 0.0 {
                        *g = 0.0;
                    }
                }
                outer_add(&gh, x, &mut grads.0[0]);
                add(&gh, &mut grads.0[1]);
            }
        }
    }
}

fn outer_add(g: &[f64], x: &[f64], out: &mut [f64]) {
    for (row, gi) in out.chunks_exact_mut(x.len()).zip(g) {
        if *gi == 0.0 {
            continue;
        }
        for (w, xj) in row.iter_mut().zip(x) {
            *w += gi * xj;
        }
    }
}

fn add(g: &[f64], out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(g) {
        *o += v;
    }
}

pub fn adapt_forward(m: &AdaptationModel, x: &FeatureVector) -> Result<FeatureVector> {
    check_dim(m.in_dim(), x.dim())?;
    let (out, _) = m.forward_trace(x.as_slice());
    FeatureVector::new(out)
}

fn loss_from_output(a: &[f64], y: &[f64]) -> f64 {
    (1.0 - cosine(a, y)).powi(2)
}

pub fn pair_loss(m: &AdaptationModel, p: &TrainingPair) -> Result<f64> {
    check_dim(m.in_dim(), p.x.dim())?;
    check_dim(m.out_dim(), p.y.dim())?;
    let (a, _) = m.forward_trace(p.x.as_slice());
    Ok(loss_from_output(&a, p.y.as_slice()))
}

/// Mean pair loss over `data`.
pub fn mean_loss(m: &AdaptationModel, data: &[TrainingPair]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut s = 0.0;
    for p in data {
        s += pair_loss(m, p)?;
    }
    Ok(s / data.len() as f64)
}

/// `d/da (1 - cos(a, y))^2`; zero for a zero `a`.
fn loss_grad_output(a: &[f64], y: &[f64]) -> Vec<f64> {
    let (na, ny) = (norm(a), norm(y));
    if na < ZERO_NORM || ny < ZERO_NORM {
        return vec![0.0; a.len()];
    }
    let c = dot(a, y) / (na * ny);
    let k = -2.0 * (1.0 - c);
    a.iter()
        .zip(y)
        .map(|(ai, yi)| k * (yi / (na * ny) - c * ai / (na * na)))
        .collect()
}

/// Accumulates `scale * grad(pair loss)` and returns the pair's loss.
fn accumulate_pair(m: &AdaptationModel, p: &TrainingPair, scale: f64, grads: &mut Gradients) -> f64 {
    let x = p.x.as_slice();
    let (a, trace) = m.forward_trace(x);
    let loss = loss_from_output(&a, p.y.as_slice());
    let g_out = loss_grad_output(&a, p.y.as_slice());
    m.backward(x, &trace, &g_out, scale, grads);
    loss
}

/// Gradient of the mean pair loss over `batch`.
pub fn batch_grad(m: &AdaptationModel, batch: &[TrainingPair]) -> Result<Gradients> {
    Ok(batch_grad_and_loss(m, batch)?.0)
}

fn batch_grad_and_loss(m: &AdaptationModel, batch: &[TrainingPair]) -> Result<(Gradients, f64)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut grads = Gradients::zeros_like(m);
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for p in batch {
        check_dim(m.in_dim(), p.x.dim())?;
        check_dim(m.out_dim(), p.y.dim())?;
        loss += accumulate_pair(m, p, scale, &mut grads);
    }
    Ok((grads, loss))
}

/// Classical momentum with coupled weight decay (biases included):
/// `v <- mu v - lr (g + wd p)`, `p <- p + v`.
pub fn sgd_step(
    m: &mut AdaptationModel,
    grads: &Gradients,
    state: &mut MomentumState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    let shapes_match = |g: &Gradients| {
        g.0.len() == m.params.len() && g.0.iter().zip(&m.params).all(|(a, b)| a.len() == b.len())
    };
    if !shapes_match(grads) || !shapes_match(state) {
        return Err(Error::InvalidArgument("gradient layout does not match model".into()));
    }
    for ((p, g), v) in m.params.iter_mut().zip(&grads.0).zip(state.0.iter_mut()) {
        for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = cfg.momentum * *vi - lr * (gi + cfg.weight_decay * *pi);
            *pi += *vi;
        }
    }
    Ok(())
}

/// Mean training loss per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve(pub Vec<f64>);

/// Mini-batch SGD over `data` for `cfg.max_epochs` epochs.
///
/// The reported loss of an epoch is the mean of the per-pair losses seen in
/// that epoch's forward passes.
pub fn train(
    m0: &AdaptationModel,
    data: &[TrainingPair],
    cfg: &TrainConfig,
) -> Result<(AdaptationModel, LossCurve)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    let mut m = m0.clone();
    if m.family == TransformFamily::Identity {
        let loss = mean_loss(&m, data)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch: 0, loss });
        }
        return Ok((m, LossCurve(vec![loss; cfg.max_epochs])));
    }
    let mut state = Gradients::zeros_like(&m);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.max_epochs);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut seed::rng(cfg.seed, seed::stream::SHUFFLE, epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i].clone()));
            let (grads, loss) = batch_grad_and_loss(&m, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            total += loss;
            sgd_step(&mut m, &grads, &mut state, cfg, lr)?;
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() || m.params.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        curve.push(mean);
    }
    Ok((m, LossCurve(curve)))
}

/// Glorot-uniform weights, zero biases.
pub fn init_model(
    family: TransformFamily,
    in_shape: Shape3,
    out_dim: usize,
    hidden_dim: usize,
    seed: u64,
) -> Result<AdaptationModel> {
    let mut m = AdaptationModel {
        family,
        in_shape,
        out_dim,
        hidden_dim: if family == TransformFamily::TwoLayerReLU {
            hidden_dim
        } else {
            0
        },
        params: Vec::new(),
    };
    let sizes = m.expected_sizes()?;
    let mut rng = seed::rng(seed, seed::stream::INIT, family.tag() as u64);
    let d_in = in_shape.dim();
    let c = in_shape.channels;
    let fans: Vec<(usize, usize)> = match family {
        TransformFamily::Identity => vec![],
        TransformFamily::Affine | TransformFamily::AffineReLU => vec![(d_in, out_dim)],
        TransformFamily::Conv1x1ReLU | TransformFamily::Conv3x3ReLU => {
            let k = family.conv_kernel().unwrap();
            vec![(c * k * k, c * k * k)]
        }
        TransformFamily::TwoLayerReLU => vec![(d_in, hidden_dim), (hidden_dim, out_dim)],
    };
    for (layer, (fan_in, fan_out)) in fans.into_iter().enumerate() {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..sizes[2 * layer]).map(|_| rng.gen_range(-s..s)).collect();
        m.params.push(w);
        m.params.push(vec![0.0; sizes[2 * layer + 1]]);
    }
    Ok(m)
}
