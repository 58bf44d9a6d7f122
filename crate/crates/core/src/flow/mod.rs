//! Invertible flow maps with closed-form Jacobian-vector products,
//! inverses and log-determinants.
//!
//! A [`FlowMap`] is the composition
//! `ActNorm -> Affine(q = d) -> blocks x [Affine(q), Coupling, Coupling(reversed)]`.
//! Every layer has a positive Jacobian determinant, so a flow can never
//! reverse the orientation of space.

mod actnorm;
mod affine;
mod coupling;
mod serial;

use std::f64::consts::TAU;
use std::ops::Range;

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

pub use actnorm::{ActNorm, STD_FLOOR};
pub use affine::{AffineGrad, AffineLayer};
pub use coupling::{CouplingLayer, CouplingScratch, FourierFeatures};

use crate::dynsys::SampleSet;
use crate::error::{Result, SpeError};
use crate::rng::rng_from_seed;

/// Architecture and initialization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub blocks: usize,
    /// Number of cosine harmonics `K` in each coupling.
    pub frequencies: usize,
    /// Input range `R` of the cosine features.
    pub range: f64,
    /// Rank `q` of the affine layer inside each block.
    pub block_rank: usize,
    /// Soft clamp `m tanh(s / m)` on coupling log-scales; `None` disables it.
    pub scale_clamp: Option<f64>,
    pub init_w_std: f64,
    pub init_theta_std: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            blocks: 4,
            frequencies: 5,
            range: 10.0,
            block_rank: 2,
            scale_clamp: Some(5.0),
            init_w_std: 1e-2,
            init_theta_std: 1e-3,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frequencies == 0 || !(self.range > 0.0) || self.block_rank == 0 {
            return Err(SpeError::InvalidConfig(
                "flow needs frequencies >= 1, range > 0, block_rank >= 1".into(),
            ));
        }
        if let Some(m) = self.scale_clamp {
            if !(m > 0.0) {
                return Err(SpeError::InvalidConfig("scale_clamp must be > 0".into()));
            }
        }
        if !(self.init_w_std >= 0.0 && self.init_theta_std >= 0.0) {
            return Err(SpeError::InvalidConfig("init stds must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    ActNorm(ActNorm),
    Affine(AffineLayer),
    Coupling(CouplingLayer),
}

impl Layer {
    pub fn num_params(&self) -> usize {
        match self {
            Layer::ActNorm(_) => 0,
            Layer::Affine(l) => l.num_params(),
            Layer::Coupling(l) => l.num_params(),
        }
    }

    pub fn is_coupling(&self) -> bool {
        matches!(self, Layer::Coupling(_))
    }
}

/// Named slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub layer: usize,
    pub range: Range<usize>,
    pub coupling: bool,
}

/// Scratch buffers for evaluating a flow without allocating per sample.
#[derive(Clone, Debug)]
pub struct Workspace {
    coupling: CouplingScratch,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

/// Per-layer adjoint accumulators.
#[derive(Clone, Debug)]
pub enum LayerGrad {
    None,
    Affine(AffineGrad),
    Coupling(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct FlowGrad {
    pub layers: Vec<LayerGrad>,
}

impl FlowGrad {
    pub fn add(&mut self, other: &FlowGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (LayerGrad::Affine(a), LayerGrad::Affine(b)) => a.add(b),
                (LayerGrad::Coupling(a), LayerGrad::Coupling(b)) => {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y)
                }
                _ => {}
            }
        }
    }
}

/// Layer inputs recorded during a forward pass, for the reverse pass.
#[derive(Clone, Debug)]
pub struct Tape {
    dim: usize,
    xs: Vec<f64>,
    vs: Vec<f64>,
    /// Coupling features from the last recorded JVP, `offsets[l]..offsets[l + 1]`.
    cache: Vec<f64>,
    offsets: Vec<usize>,
}

impl Tape {
    /// First slot: the input of a recorded forward pass, or the result of a
    /// recorded inverse.
    pub fn input(&self) -> &[f64] {
        &self.xs[..self.dim]
    }

    pub fn output(&self) -> &[f64] {
        let n = self.xs.len();
        &self.xs[n - self.dim..]
    }

    pub fn tangent_output(&self) -> &[f64] {
        let n = self.vs.len();
        &self.vs[n - self.dim..]
    }

    fn x(&self, l: usize) -> &[f64] {
        &self.xs[l * self.dim..(l + 1) * self.dim]
    }

    fn v(&self, l: usize) -> &[f64] {
        &self.vs[l * self.dim..(l + 1) * self.dim]
    }

    fn cache(&self, l: usize) -> &[f64] {
        &self.cache[self.offsets[l]..self.offsets[l + 1]]
    }
}

/// Composed invertible map `H = l_L o ... o l_1`.
#[derive(Clone, Debug)]
pub struct FlowMap {
    dim: usize,
    layers: Vec<Layer>,
}

impl FlowMap {
    /// Assembles a flow from explicit layers. The first layer must be the
    /// frozen ActNorm.
    pub fn from_layers(dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if dim < 2 {
            return Err(SpeError::InvalidConfig(format!("flow dimension {dim} < 2")));
        }
        if !matches!(layers.first(), Some(Layer::ActNorm(_))) {
            return Err(SpeError::InvalidConfig("flow must start with ActNorm".into()));
        }
        for layer in &layers {
            let ld = match layer {
                Layer::ActNorm(a) => a.mean().len(),
                Layer::Affine(a) => a.dim(),
                Layer::Coupling(c) => c.dim(),
            };
            if ld != dim {
                return Err(SpeError::DimensionMismatch { expected: dim, got: ld });
            }
        }
        Ok(FlowMap { dim, layers })
    }

    /// Every learnable layer at exactly the identity.
    pub fn identity(actnorm: ActNorm, cfg: &FlowConfig) -> Result<Self> {
        cfg.validate()?;
        let dim = actnorm.mean().len();
        let mut layers = vec![Layer::ActNorm(actnorm), Layer::Affine(AffineLayer::identity(dim, dim))];
        for _ in 0..cfg.blocks {
            layers.push(Layer::Affine(AffineLayer::identity(dim, cfg.block_rank.min(dim))));
            for reversed in [false, true] {
                layers.push(Layer::Coupling(CouplingLayer::identity(
                    dim,
                    reversed,
                    cfg.frequencies,
                    cfg.range,
                    cfg.scale_clamp,
                )));
            }
        }
        Self::from_layers(dim, layers)
    }

    /// Near-identity random initialization around `actnorm`.
    pub fn random(actnorm: ActNorm, cfg: &FlowConfig, seed: u64) -> Result<Self> {
        let mut flow = Self::identity(actnorm, cfg)?;
        let mut rng = rng_from_seed(seed);
        let w_dist = Normal::new(0.0, cfg.init_w_std).map_err(|e| SpeError::InvalidConfig(e.to_string()))?;
        let t_dist = Normal::new(0.0, cfg.init_theta_std).map_err(|e| SpeError::InvalidConfig(e.to_string()))?;
        let phase_dist = Uniform::new(0.0, TAU).expect("valid range");
        let mut params = flow.params();
        for block in flow.param_blocks() {
            let slice = &mut params[block.range.clone()];
            if block.name.ends_with(".w") {
                slice.iter_mut().for_each(|p| *p = w_dist.sample(&mut rng));
            } else if block.name.ends_with(".theta") {
                slice.iter_mut().for_each(|p| *p = t_dist.sample(&mut rng));
            } else if block.name.ends_with(".phase") {
                slice.iter_mut().for_each(|p| *p = phase_dist.sample(&mut rng));
            }
        }
        flow.set_params(&params);
        Ok(flow)
    }

    /// ActNorm frozen to the sample positions' statistics, everything else
    /// near the identity.
    pub fn init(data: &SampleSet, cfg: &FlowConfig, seed: u64) -> Result<Self> {
        let actnorm = ActNorm::from_stats(data.position_mean(), data.position_std());
        Self::random(actnorm, cfg, seed)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn actnorm(&self) -> &ActNorm {
        match &self.layers[0] {
            Layer::ActNorm(a) => a,
            _ => unreachable!("first layer is always ActNorm"),
        }
    }

    /// Turns the coupling scale clamp on or off for every coupling layer.
    pub fn set_scale_clamp(&mut self, clamp: Option<f64>) {
        for layer in &mut self.layers {
            if let Layer::Coupling(c) = layer {
                c.set_clamp(clamp);
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    /// Flat learnable parameters; the frozen ActNorm contributes nothing.
    pub fn params(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_params()];
        let mut off = 0;
        for layer in &self.layers {
            let n = layer.num_params();
            match layer {
                Layer::ActNorm(_) => {}
                Layer::Affine(l) => l.write_params(&mut out[off..off + n]),
                Layer::Coupling(l) => l.write_params(&mut out[off..off + n]),
            }
            off += n;
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params(), "parameter vector length");
        let mut off = 0;
        for layer in &mut self.layers {
            let n = layer.num_params();
            match layer {
                Layer::ActNorm(_) => {}
                Layer::Affine(l) => l.read_params(&params[off..off + n]),
                Layer::Coupling(l) => l.read_params(&params[off..off + n]),
            }
            off += n;
        }
    }

    pub fn param_blocks(&self) -> Vec<ParamBlock> {
        let mut blocks = Vec::new();
        let mut off = 0;
        let mut push = |name: String, layer: usize, len: usize, coupling: bool, off: &mut usize| {
            blocks.push(ParamBlock {
                name,
                layer,
                range: *off..*off + len,
                coupling,
            });
            *off += len;
        };
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::ActNorm(_) => {}
                Layer::Affine(l) => {
                    push(format!("layer{i}.affine.w"), i, l.dim() * l.rank(), false, &mut off);
                    push(format!("layer{i}.affine.varphi"), i, 1, false, &mut off);
                    push(format!("layer{i}.affine.mu"), i, l.dim(), false, &mut off);
                }
                Layer::Coupling(l) => {
                    for (tag, f) in [("scale", l.scale_features()), ("shift", l.shift_features())] {
                        push(format!("layer{i}.coupling.{tag}.theta"), i, f.theta().len(), true, &mut off);
                        push(format!("layer{i}.coupling.{tag}.phase"), i, f.phase().len(), true, &mut off);
                    }
                }
            }
        }
        blocks
    }

    pub fn workspace(&self) -> Workspace {
        let mut coupling = CouplingScratch::default();
        for layer in &self.layers {
            if let Layer::Coupling(c) = layer {
                let (cr, tr) = c.halves();
                coupling.ensure(c.frequencies(), cr.len(), tr.len());
            }
        }
        let z = vec![0.0; self.dim];
        Workspace {
            coupling,
            a: z.clone(),
            b: z.clone(),
            c: z.clone(),
            d: z,
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(SpeError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn apply_forward(layer: &Layer, x: &[f64], y: &mut [f64], ws: &mut CouplingScratch) {
        match layer {
            Layer::ActNorm(l) => l.forward(x, y),
            Layer::Affine(l) => l.forward(x, y),
            Layer::Coupling(l) => l.forward(x, y, ws),
        }
    }

    fn apply_inverse(layer: &Layer, y: &[f64], x: &mut [f64], ws: &mut CouplingScratch) {
        match layer {
            Layer::ActNorm(l) => l.inverse(y, x),
            Layer::Affine(l) => l.inverse(y, x),
            Layer::Coupling(l) => l.inverse(y, x, ws),
        }
    }

    /// Unchecked forward pass.
    pub fn forward_with(&self, x: &[f64], out: &mut [f64], ws: &mut Workspace) {
        ws.a.copy_from_slice(x);
        for layer in &self.layers {
            Self::apply_forward(layer, &ws.a, &mut ws.b, &mut ws.coupling);
            std::mem::swap(&mut ws.a, &mut ws.b);
        }
        out.copy_from_slice(&ws.a);
    }

    /// Unchecked inverse pass.
    pub fn inverse_with(&self, y: &[f64], out: &mut [f64], ws: &mut Workspace) {
        ws.a.copy_from_slice(y);
        for layer in self.layers.iter().rev() {
            Self::apply_inverse(layer, &ws.a, &mut ws.b, &mut ws.coupling);
            std::mem::swap(&mut ws.a, &mut ws.b);
        }
        out.copy_from_slice(&ws.a);
    }

    /// Unchecked Jacobian-vector product.
    pub fn jvp_with(&self, x: &[f64], v: &[f64], y: &mut [f64], jv: &mut [f64], ws: &mut Workspace) {
        ws.a.copy_from_slice(x);
        ws.c.copy_from_slice(v);
        for layer in &self.layers {
            match layer {
                Layer::ActNorm(l) => l.forward_tangent(&ws.a, &ws.c, &mut ws.b, &mut ws.d),
                Layer::Affine(l) => l.forward_tangent(&ws.a, &ws.c, &mut ws.b, &mut ws.d),
                Layer::Coupling(l) => l.forward_tangent(&ws.a, &ws.c, &mut ws.b, &mut ws.d, &mut ws.coupling),
            }
            std::mem::swap(&mut ws.a, &mut ws.b);
            std::mem::swap(&mut ws.c, &mut ws.d);
        }
        y.copy_from_slice(&ws.a);
        jv.copy_from_slice(&ws.c);
    }

    /// `H(x)`, failing with the index of the first layer that produced a
    /// non-finite value.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut ws = self.workspace();
        let mut cur = x.to_vec();
        let mut next = vec![0.0; self.dim];
        for (i, layer) in self.layers.iter().enumerate() {
            Self::apply_forward(layer, &cur, &mut next, &mut ws.coupling);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(SpeError::NonFinite { layer: i });
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// `H^{-1}(y)`, layer by layer in reverse.
    pub fn inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(y)?;
        let mut ws = self.workspace();
        let mut cur = y.to_vec();
        let mut next = vec![0.0; self.dim];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            Self::apply_inverse(layer, &cur, &mut next, &mut ws.coupling);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(SpeError::NonFinite { layer: i });
            }
            std::mem::swap(&mut cur, &mut next);
        }
        let mut check = vec![0.0; self.dim];
        self.forward_with(&cur, &mut check, &mut ws);
        let err = check.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if err > 1e-6 {
            log::warn!("flow inverse round-trip error {err:e}");
        }
        Ok(cur)
    }

    /// `(H(x), dH(x) v)`.
    pub fn jvp(&self, x: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_dim(x)?;
        self.check_dim(v)?;
        let mut ws = self.workspace();
        let mut y = vec![0.0; self.dim];
        let mut jv = vec![0.0; self.dim];
        self.jvp_with(x, v, &mut y, &mut jv, &mut ws);
        if y.iter().chain(&jv).any(|v| !v.is_finite()) {
            // locate the offending layer
            self.forward(x)?;
            return Err(SpeError::NonFinite { layer: self.layers.len() - 1 });
        }
        Ok((y, jv))
    }

    /// Log-determinant contribution of each layer at its own input.
    pub fn layer_log_dets(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut ws = self.workspace();
        let mut cur = x.to_vec();
        let mut next = vec![0.0; self.dim];
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            out.push(match layer {
                Layer::ActNorm(l) => l.log_det(),
                Layer::Affine(l) => l.log_det(),
                Layer::Coupling(l) => l.log_det(&cur, &mut ws.coupling),
            });
            Self::apply_forward(layer, &cur, &mut next, &mut ws.coupling);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(out)
    }

    /// `log det dH(x)`; always real because the determinant is positive.
    pub fn log_det(&self, x: &[f64]) -> Result<f64> {
        Ok(self.layer_log_dets(x)?.iter().sum())
    }

    /// Dense Jacobian `dH(x)`, row-major, assembled from `dim` JVPs.
    pub fn jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let d = self.dim;
        let mut ws = self.workspace();
        let mut jac = vec![0.0; d * d];
        let mut y = vec![0.0; d];
        let mut col = vec![0.0; d];
        let mut e = vec![0.0; d];
        for j in 0..d {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            self.jvp_with(x, &e, &mut y, &mut col, &mut ws);
            for i in 0..d {
                jac[i * d + j] = col[i];
            }
        }
        Ok(jac)
    }

    // ---- reverse-mode support -------------------------------------------

    pub fn zero_grad(&self) -> FlowGrad {
        FlowGrad {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::ActNorm(_) => LayerGrad::None,
                    Layer::Affine(a) => LayerGrad::Affine(AffineGrad::zeros(a.dim())),
                    Layer::Coupling(c) => LayerGrad::Coupling(vec![0.0; c.num_params()]),
                })
                .collect(),
        }
    }

    /// Flattens accumulated adjoints into the layout of [`FlowMap::params`].
    pub fn flatten_grad(&self, grad: &FlowGrad) -> Vec<f64> {
        let mut out = vec![0.0; self.num_params()];
        let mut off = 0;
        for (layer, g) in self.layers.iter().zip(&grad.layers) {
            let n = layer.num_params();
            match (layer, g) {
                (Layer::Affine(l), LayerGrad::Affine(g)) => l.finalize_grad(g, &mut out[off..off + n]),
                (Layer::Coupling(_), LayerGrad::Coupling(g)) => out[off..off + n].copy_from_slice(g),
                _ => {}
            }
            off += n;
        }
        out
    }

    pub fn new_tape(&self) -> Tape {
        let n = (self.layers.len() + 1) * self.dim;
        let mut offsets = vec![0];
        for layer in &self.layers {
            let len = match layer {
                Layer::Coupling(c) => c.cache_len(),
                _ => 0,
            };
            offsets.push(offsets.last().unwrap() + len);
        }
        Tape {
            dim: self.dim,
            xs: vec![0.0; n],
            vs: vec![0.0; n],
            cache: vec![0.0; *offsets.last().unwrap()],
            offsets,
        }
    }

    /// Forward + tangent pass recording every layer input. Returns
    /// `log det dH(x)`.
    pub fn record_jvp(&self, x: &[f64], v: &[f64], tape: &mut Tape, ws: &mut Workspace) -> f64 {
        let d = self.dim;
        tape.xs[..d].copy_from_slice(x);
        tape.vs[..d].copy_from_slice(v);
        let mut log_det = 0.0;
        for (l, layer) in self.layers.iter().enumerate() {
            let (xin, xout) = tape.xs[l * d..(l + 2) * d].split_at_mut(d);
            let (vin, vout) = tape.vs[l * d..(l + 2) * d].split_at_mut(d);
            log_det += match layer {
                Layer::ActNorm(a) => {
                    a.forward_tangent(xin, vin, xout, vout);
                    a.log_det()
                }
                Layer::Affine(a) => {
                    a.forward_tangent(xin, vin, xout, vout);
                    a.log_det()
                }
                Layer::Coupling(c) => {
                    let cache = &mut tape.cache[tape.offsets[l]..tape.offsets[l + 1]];
                    c.forward_tangent_cached(xin, vin, xout, vout, &mut ws.coupling, cache)
                }
            };
        }
        log_det
    }

    /// Forward pass recording every layer input (no tangent).
    pub fn record_forward(&self, x: &[f64], tape: &mut Tape, ws: &mut Workspace) {
        let d = self.dim;
        tape.xs[..d].copy_from_slice(x);
        for (l, layer) in self.layers.iter().enumerate() {
            let (xin, xout) = tape.xs[l * d..(l + 2) * d].split_at_mut(d);
            Self::apply_forward(layer, xin, xout, &mut ws.coupling);
        }
    }

    /// Inverse pass recording every layer's inverse output. Slot `L` holds
    /// `y`, slot `l` the input of layer `l`.
    pub fn record_inverse(&self, y: &[f64], tape: &mut Tape, ws: &mut Workspace) {
        let d = self.dim;
        let n = self.layers.len();
        tape.xs[n * d..].copy_from_slice(y);
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (xout, yin) = tape.xs[l * d..(l + 2) * d].split_at_mut(d);
            Self::apply_inverse(layer, yin, xout, &mut ws.coupling);
        }
    }

    /// Reverse pass through a recorded JVP.
    ///
    /// `y_bar`, `w_bar` are adjoints of the output value and tangent;
    /// `ld_bar` weights this sample's log-determinant. Writes the input
    /// adjoints to `x_bar`, `v_bar`.
    #[allow(clippy::too_many_arguments)]
    pub fn backprop_jvp(
        &self,
        tape: &Tape,
        y_bar: &[f64],
        w_bar: &[f64],
        ld_bar: f64,
        grad: &mut FlowGrad,
        ws: &mut Workspace,
        x_bar: &mut [f64],
        v_bar: &mut [f64],
    ) {
        ws.a.copy_from_slice(y_bar);
        ws.c.copy_from_slice(w_bar);
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (x, v) = (tape.x(l), tape.v(l));
            match (layer, &mut grad.layers[l]) {
                (Layer::ActNorm(a), _) => a.backward(&ws.a, &ws.c, &mut ws.b, &mut ws.d),
                (Layer::Affine(a), LayerGrad::Affine(g)) => {
                    g.log_det_weight += ld_bar;
                    a.backward(x, v, &ws.a, &ws.c, &mut ws.b, &mut ws.d, g);
                }
                (Layer::Coupling(c), LayerGrad::Coupling(g)) => {
                    let cache = Some(tape.cache(l));
                    c.backward(x, v, &ws.a, &ws.c, ld_bar, &mut ws.b, &mut ws.d, g, &mut ws.coupling, cache)
                }
                _ => unreachable!("gradient layout matches layers"),
            }
            std::mem::swap(&mut ws.a, &mut ws.b);
            std::mem::swap(&mut ws.c, &mut ws.d);
        }
        x_bar.copy_from_slice(&ws.a);
        v_bar.copy_from_slice(&ws.c);
    }

    /// Reverse pass through a recorded forward (primal only).
    pub fn backprop_forward(&self, tape: &Tape, y_bar: &[f64], grad: &mut FlowGrad, ws: &mut Workspace, x_bar: &mut [f64]) {
        ws.a.copy_from_slice(y_bar);
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let x = tape.x(l);
            match (layer, &mut grad.layers[l]) {
                (Layer::ActNorm(a), _) => a.backward_primal(&ws.a, &mut ws.b),
                (Layer::Affine(a), LayerGrad::Affine(g)) => a.backward_primal(x, &ws.a, &mut ws.b, g),
                (Layer::Coupling(c), LayerGrad::Coupling(g)) => {
                    c.backward_primal(x, &ws.a, 0.0, &mut ws.b, g, &mut ws.coupling)
                }
                _ => unreachable!("gradient layout matches layers"),
            }
            std::mem::swap(&mut ws.a, &mut ws.b);
        }
        x_bar.copy_from_slice(&ws.a);
    }

    /// Reverse pass through a recorded inverse: from the adjoint of
    /// `H^{-1}(y)` to the adjoint of `y`.
    pub fn backprop_inverse(&self, tape: &Tape, x_bar: &[f64], grad: &mut FlowGrad, ws: &mut Workspace, y_bar: &mut [f64]) {
        ws.a.copy_from_slice(x_bar);
        for (l, layer) in self.layers.iter().enumerate() {
            let (x, y) = (tape.x(l), tape.x(l + 1));
            match (layer, &mut grad.layers[l]) {
                (Layer::ActNorm(a), _) => a.backward_inverse(&ws.a, &mut ws.b),
                (Layer::Affine(a), LayerGrad::Affine(g)) => a.backward_inverse(x, &ws.a, &mut ws.b, g),
                (Layer::Coupling(c), LayerGrad::Coupling(g)) => {
                    c.backward_inverse(y, x, &ws.a, &mut ws.b, g, &mut ws.coupling)
                }
                _ => unreachable!("gradient layout matches layers"),
            }
            std::mem::swap(&mut ws.a, &mut ws.b);
        }
        y_bar.copy_from_slice(&ws.a);
    }

    /// Adds `weight * d(sum of affine log-dets)/d(params)`; the affine
    /// log-determinants do not depend on the input.
    pub fn add_affine_log_det_weight(&self, weight: f64, grad: &mut FlowGrad) {
        for g in &mut grad.layers {
            if let LayerGrad::Affine(g) = g {
                g.log_det_weight += weight;
            }
        }
    }
}

#[cfg(test)]
mod tests;
