//! Late fusion of the slide embedding `W` with the omic embedding `o`.
//!
//! The MOAB block builds four outer interaction matrices between `[c; W]` and
//! `[c; o]` (`c = 1` for product and division, `c = 0` for addition and
//! subtraction), stacks them as channels in the fixed order
//! `[product, division, addition, subtraction]`, reduces the channels with a
//! single 3×3 convolution, then flattens, applies leaky ReLU and a linear head.
//! Concatenation (`Cat`) and Kronecker product (`KP`) heads are the baselines.

use serde::{Deserialize, Serialize};

use crate::attention::SlideEmbedding;
use crate::encoders::EncodedOmic;
use crate::error::{Error, Result};
use crate::numeric::graph::outer_raw;
use crate::numeric::{Activation, BoundParams, Graph, OuterKind, ParamStore, SeededRng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Moab,
    Cat,
    Kp,
}

impl Aggregator {
    pub const ALL: [Aggregator; 3] = [Aggregator::Moab, Aggregator::Cat, Aggregator::Kp];

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Moab => "moab",
            Aggregator::Cat => "cat",
            Aggregator::Kp => "kp",
        }
    }
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moab" => Ok(Aggregator::Moab),
            "cat" => Ok(Aggregator::Cat),
            "kp" => Ok(Aggregator::Kp),
            other => Err(Error::Config(format!("unknown aggregator '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub mode: Aggregator,
    pub epsilon: f64,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub leaky_slope: f64,
    /// Width of `W` (rows of the interaction matrices, before the constant).
    pub slide_dim: usize,
    /// Width of `o`.
    pub omic_dim: usize,
    /// Number of logits (classes or survival bins).
    pub outputs: usize,
}

impl FusionConfig {
    pub fn new(mode: Aggregator, slide_dim: usize, omic_dim: usize, outputs: usize) -> Self {
        FusionConfig {
            mode,
            epsilon: 1e-8,
            kernel_size: 3,
            stride: 1,
            padding: 1,
            leaky_slope: Activation::LEAKY_SLOPE,
            slide_dim,
            omic_dim,
            outputs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("fusion epsilon must be positive, got {}", self.epsilon)));
        }
        if self.slide_dim == 0 || self.omic_dim == 0 || self.outputs == 0 {
            return Err(Error::Config("fusion dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size of the reduced interaction map.
    pub fn reduced_dims(&self) -> (usize, usize) {
        let k = self.kernel_size;
        let out = |n: usize| (n + 1 + 2 * self.padding - k) / self.stride + 1;
        (out(self.slide_dim), out(self.omic_dim))
    }

    /// Input width of the linear head.
    pub fn head_input_width(&self) -> usize {
        match self.mode {
            Aggregator::Moab => {
                let (h, w) = self.reduced_dims();
                h * w
            }
            Aggregator::Cat => self.slide_dim + self.omic_dim,
            Aggregator::Kp => (self.slide_dim + 1) * (self.omic_dim + 1),
        }
    }

    fn prefix(&self) -> &'static str {
        self.mode.name()
    }
}

/// Output logits `L_logits`.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits(pub Vec<f64>);

/// Late-fusion head parameterised by [`FusionConfig`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LateFusion {
    pub cfg: FusionConfig,
}

impl LateFusion {
    pub fn new(cfg: FusionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(LateFusion { cfg })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) {
        let c = &self.cfg;
        if c.mode == Aggregator::Moab {
            let k = c.kernel_size;
            let fan_in = 4 * k * k;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in).map(|_| rng.uniform_range(-bound, bound)).collect();
            store.insert("moab.conv.weight", Tensor::new(vec![1, 4, k, k], w).expect("sized"));
            store.insert("moab.conv.bias", Tensor::vector(vec![rng.uniform_range(-bound, bound)]));
        }
        store.init_linear(&format!("{}.head", c.prefix()), c.head_input_width(), c.outputs, rng);
    }

    fn check_inputs(&self, g: &Graph, slide: Var, omic: Var) -> Result<()> {
        let (ws, os) = (g.value(slide).numel(), g.value(omic).numel());
        if ws != self.cfg.slide_dim || os != self.cfg.omic_dim {
            return Err(Error::shape(format!(
                "late fusion configured for W:{} o:{}, got W:{ws} o:{os}",
                self.cfg.slide_dim, self.cfg.omic_dim
            )));
        }
        Ok(())
    }

    /// The stacked `[4, N+1, M+1]` interaction tensor.
    pub fn interaction_tensor(&self, g: &mut Graph, slide: Var, omic: Var) -> Result<Var> {
        self.check_inputs(g, slide, omic)?;
        let w = g.flatten(slide);
        let o = g.flatten(omic);
        let channels = OuterKind::ALL
            .iter()
            .map(|&kind| {
                let c = kind.appended_constant();
                let wc = g.append_constant(w, c);
                let oc = g.append_constant(o, c);
                g.outer(wc, oc, kind, self.cfg.epsilon)
            })
            .collect::<Result<Vec<_>>>()?;
        g.stack(&channels)
    }

    /// Logits `[C]` from `W` and `o`.
    pub fn forward(&self, g: &mut Graph, params: &mut BoundParams, slide: Var, omic: Var) -> Result<Var> {
        self.check_inputs(g, slide, omic)?;
        let c = &self.cfg;
        let features = match c.mode {
            Aggregator::Moab => {
                let stacked = self.interaction_tensor(g, slide, omic)?;
                let kernel = params.var(g, "moab.conv.weight")?;
                let bias = params.var(g, "moab.conv.bias")?;
                let reduced = g.conv2d(stacked, kernel, Some(bias), c.stride, c.padding)?;
                let flat = g.flatten(reduced);
                g.activation(flat, Activation::LeakyRelu(c.leaky_slope))?
            }
            Aggregator::Cat => {
                let w = g.reshape(slide, &[1, c.slide_dim])?;
                let o = g.reshape(omic, &[1, c.omic_dim])?;
                let joined = g.concat_cols(w, o)?;
                g.flatten(joined)
            }
            Aggregator::Kp => {
                let w = g.flatten(slide);
                let o = g.flatten(omic);
                let w1 = g.append_constant(w, 1.0);
                let o1 = g.append_constant(o, 1.0);
                let outer = g.outer(w1, o1, OuterKind::Product, c.epsilon)?;
                g.flatten(outer)
            }
        };
        let width = g.value(features).numel();
        let row = g.reshape(features, &[1, width])?;
        let logits = params.linear(g, &format!("{}.head", c.prefix()), row)?;
        g.reshape(logits, &[c.outputs])
    }
}

/// `[c; v]`.
pub fn append_constant(v: &[f64], c: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len() + 1);
    out.push(c);
    out.extend_from_slice(v);
    out
}

/// `(N+1) × (M+1)` matrix with entry `(i, j) = w_i ∘ o_j`. Operands must
/// already carry their appended constants.
pub fn outer_op(w: &[f64], o: &[f64], kind: OuterKind, epsilon: f64) -> Result<Tensor> {
    let data = outer_raw(w, o, kind, epsilon)?;
    Tensor::new(vec![w.len(), o.len()], data)
}

/// Shapes observed while running the MOAB block once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MoabShapes {
    pub interaction: Vec<usize>,
    pub reduced: Vec<usize>,
    pub head_input: usize,
    pub logits: usize,
}

fn fuse_eval(fusion: &LateFusion, store: &ParamStore, slide: &SlideEmbedding, omic: &EncodedOmic) -> Result<Logits> {
    let mut g = Graph::new();
    let mut params = BoundParams::new(store);
    let w = g.constant(Tensor::vector(slide.0.clone()));
    let o = g.constant(Tensor::vector(omic.0.clone()));
    let logits = fusion.forward(&mut g, &mut params, w, o)?;
    Ok(Logits(g.value(logits).data().to_vec()))
}

pub fn moab_fuse(cfg: &FusionConfig, store: &ParamStore, slide: &SlideEmbedding, omic: &EncodedOmic) -> Result<Logits> {
    let fusion = LateFusion::new(FusionConfig {
        mode: Aggregator::Moab,
        ..*cfg
    })?;
    fuse_eval(&fusion, store, slide, omic)
}

pub fn cat_fuse(cfg: &FusionConfig, store: &ParamStore, slide: &SlideEmbedding, omic: &EncodedOmic) -> Result<Logits> {
    let fusion = LateFusion::new(FusionConfig {
        mode: Aggregator::Cat,
        ..*cfg
    })?;
    fuse_eval(&fusion, store, slide, omic)
}

pub fn kp_fuse(cfg: &FusionConfig, store: &ParamStore, slide: &SlideEmbedding, omic: &EncodedOmic) -> Result<Logits> {
    let fusion = LateFusion::new(FusionConfig {
        mode: Aggregator::Kp,
        ..*cfg
    })?;
    fuse_eval(&fusion, store, slide, omic)
}

/// Runs the MOAB block and reports every intermediate shape.
pub fn moab_shapes(cfg: &FusionConfig, store: &ParamStore, slide: &SlideEmbedding, omic: &EncodedOmic) -> Result<MoabShapes> {
    let fusion = LateFusion::new(FusionConfig {
        mode: Aggregator::Moab,
        ..*cfg
    })?;
    let mut g = Graph::new();
    let mut params = BoundParams::new(store);
    let w = g.constant(Tensor::vector(slide.0.clone()));
    let o = g.constant(Tensor::vector(omic.0.clone()));
    let stacked = fusion.interaction_tensor(&mut g, w, o)?;
    let kernel = params.var(&mut g, "moab.conv.weight")?;
    let bias = params.var(&mut g, "moab.conv.bias")?;
    let reduced = g.conv2d(stacked, kernel, Some(bias), cfg.stride, cfg.padding)?;
    let logits = fusion.forward(&mut g, &mut params, w, o)?;
    Ok(MoabShapes {
        interaction: g.shape(stacked).to_vec(),
        reduced: g.shape(reduced).to_vec(),
        head_input: g.value(reduced).numel(),
        logits: g.value(logits).numel(),
    })
}
