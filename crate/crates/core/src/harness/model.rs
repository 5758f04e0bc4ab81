//! End-to-end model assembly for every fusion mode.
//!
//! | mode         | omic path | patch path              | head            |
//! |--------------|-----------|-------------------------|-----------------|
//! | `dual`       | SNN       | early fusion, attention | late fusion     |
//! | `early_only` | SNN       | early fusion, attention | linear on `W`   |
//! | `late_only`  | SNN       | attention on `e`        | late fusion     |
//! | `omic_only`  | SNN       | none                    | linear on `o`   |
//! | `wsi_only`   | none      | attention on `e`        | linear on `W`   |

use serde::{Deserialize, Serialize};

use super::config::{FusionMode, RunConfig, Task};
use crate::attention::{GatedAttention, SlideProjection};
use crate::encoders::{EarlyFusion, SnnEncoder};
use crate::error::{Error, Result};
use crate::fusion::{Aggregator, FusionConfig, LateFusion};
use crate::numeric::{BoundParams, Graph, ParamStore, SeededRng, Tensor, Var};

pub const HEAD_PREFIX: &str = "head";

/// Resolved architecture: every width is concrete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub task: Task,
    pub fusion: FusionMode,
    pub aggregator: Aggregator,
    pub outputs: usize,
    pub omic_features: usize,
    pub patch_dim: usize,
    pub omic_dim: usize,
    pub snn_hidden: usize,
    pub fuse_hidden: usize,
    pub attn_hidden: usize,
    pub snn_dropout: f64,
    pub fuse_dropout: f64,
    pub rho_dropout: f64,
    pub epsilon: f64,
}

impl ModelSpec {
    /// Fills the input widths from the data where the config leaves them open.
    pub fn resolve(cfg: &RunConfig, omic_features: usize, patch_dim: usize, outputs: usize) -> Result<Self> {
        let check = |name: &str, configured: Option<usize>, actual: usize| match configured {
            Some(c) if c != actual => Err(Error::Config(format!("config sets {name} = {c} but the data has {actual}"))),
            _ => Ok(actual),
        };
        let spec = ModelSpec {
            task: cfg.task,
            fusion: cfg.fusion,
            aggregator: cfg.aggregator,
            outputs,
            omic_features: check("omic_features", cfg.dims.omic_features, omic_features)?,
            patch_dim: check("patch_dim", cfg.dims.patch_dim, patch_dim)?,
            omic_dim: cfg.dims.omic_dim,
            snn_hidden: cfg.dims.snn_hidden,
            fuse_hidden: cfg.dims.fuse_hidden,
            attn_hidden: cfg.dims.attn_hidden,
            snn_dropout: cfg.snn_dropout,
            fuse_dropout: cfg.fuse_dropout,
            rho_dropout: cfg.rho_dropout,
            epsilon: cfg.epsilon,
        };
        if spec.outputs == 0 || spec.omic_features == 0 || spec.patch_dim == 0 {
            return Err(Error::Config("model needs positive input and output widths".into()));
        }
        Ok(spec)
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[outputs]`
    pub logits: Var,
    /// `[N]` attention weights when the mode has a patch path.
    pub attention: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    snn: Option<SnnEncoder>,
    early: Option<EarlyFusion>,
    attn: Option<GatedAttention>,
    rho: Option<SlideProjection>,
    late: Option<LateFusion>,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let mode = spec.fusion;
        let snn = mode.uses_omics().then_some(SnnEncoder {
            in_features: spec.omic_features,
            hidden: spec.snn_hidden,
            out: spec.omic_dim,
            dropout: spec.snn_dropout,
        });
        let early = mode.uses_early_fusion().then_some(EarlyFusion {
            patch_dim: spec.patch_dim,
            omic_dim: spec.omic_dim,
            hidden: spec.fuse_hidden,
            out: spec.omic_dim,
            dropout: spec.fuse_dropout,
        });
        let attn_in = if mode.uses_early_fusion() { spec.omic_dim } else { spec.patch_dim };
        let attn = mode.uses_attention().then_some(GatedAttention {
            in_dim: attn_in,
            hidden: spec.attn_hidden,
        });
        let rho = mode.uses_attention().then_some(SlideProjection {
            in_dim: spec.attn_hidden,
            out: spec.omic_dim,
            dropout: spec.rho_dropout,
        });
        let late = if mode.uses_late_fusion() {
            let mut cfg = FusionConfig::new(spec.aggregator, spec.omic_dim, spec.omic_dim, spec.outputs);
            cfg.epsilon = spec.epsilon;
            Some(LateFusion::new(cfg)?)
        } else {
            None
        };
        Ok(Model {
            spec,
            snn,
            early,
            attn,
            rho,
            late,
        })
    }

    pub fn late_fusion(&self) -> Option<&LateFusion> {
        self.late.as_ref()
    }

    pub fn has_attention(&self) -> bool {
        self.attn.is_some()
    }

    /// Freshly initialised parameters.
    pub fn init(&self, rng: &mut SeededRng) -> ParamStore {
        let mut store = ParamStore::new();
        if let Some(m) = &self.snn {
            m.init(&mut store, rng);
        }
        if let Some(m) = &self.early {
            m.init(&mut store, rng);
        }
        if let Some(m) = &self.attn {
            m.init(&mut store, rng);
        }
        if let Some(m) = &self.rho {
            m.init(&mut store, rng);
        }
        match &self.late {
            Some(m) => m.init(&mut store, rng),
            None => store.init_linear(HEAD_PREFIX, self.spec.omic_dim, self.spec.outputs, rng),
        }
        store
    }

    /// `omic` must already be selected and normalised; `bag` is `[N, d_e]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &mut BoundParams,
        omic: &[f64],
        bag: &Tensor,
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<ForwardVars> {
        let o = match &self.snn {
            Some(snn) => {
                let x = g.constant(Tensor::vector(omic.to_vec()));
                Some(snn.forward(g, params, x, training, rng)?)
            }
            None => None,
        };
        let mut attention = None;
        let slide = match (&self.attn, &self.rho) {
            (Some(attn), Some(rho)) => {
                let e = g.constant(bag.clone());
                let patches = match (&self.early, o) {
                    (Some(early), Some(o)) => early.forward(g, params, e, o, training, rng)?,
                    _ => e,
                };
                let vars = attn.forward(g, params, patches)?;
                attention = Some(vars.weights);
                Some(rho.forward(g, params, vars, training, rng)?)
            }
            _ => None,
        };
        let logits = match (&self.late, slide, o) {
            (Some(late), Some(w), Some(o)) => late.forward(g, params, w, o)?,
            (None, Some(x), _) | (None, None, Some(x)) => {
                let row = g.reshape(x, &[1, self.spec.omic_dim])?;
                let out = params.linear(g, HEAD_PREFIX, row)?;
                g.reshape(out, &[self.spec.outputs])?
            }
            _ => return Err(Error::Contract(format!("mode {} has no usable path", self.spec.fusion.name()))),
        };
        Ok(ForwardVars { logits, attention })
    }
}

/// Distinct parameter-name prefixes (text before the first '.').
pub fn param_prefixes(store: &ParamStore) -> Vec<String> {
    let mut out: Vec<String> = store
        .names()
        .map(|n| n.split('.').next().unwrap_or(n).to_string())
        .collect();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ModelDims;

    fn cfg(fusion: FusionMode, aggregator: Aggregator) -> RunConfig {
        RunConfig {
            fusion,
            aggregator,
            dims: ModelDims {
                omic_dim: 4,
                snn_hidden: 6,
                fuse_hidden: 5,
                attn_hidden: 3,
                ..ModelDims::default()
            },
            ..RunConfig::default()
        }
    }

    fn build(fusion: FusionMode, aggregator: Aggregator) -> (Model, ParamStore) {
        let spec = ModelSpec::resolve(&cfg(fusion, aggregator), 7, 5, 3).unwrap();
        let model = Model::new(spec).unwrap();
        let store = model.init(&mut SeededRng::new(1));
        (model, store)
    }

    #[test]
    fn parameter_inventory_per_mode() {
        let cases = [
            (FusionMode::Dual, Aggregator::Moab, vec!["attn", "early", "moab", "rho", "snn"]),
            (FusionMode::EarlyOnly, Aggregator::Moab, vec!["attn", "early", "head", "rho", "snn"]),
            (FusionMode::LateOnly, Aggregator::Moab, vec!["attn", "moab", "rho", "snn"]),
            (FusionMode::LateOnly, Aggregator::Kp, vec!["attn", "kp", "rho", "snn"]),
            (FusionMode::Dual, Aggregator::Cat, vec!["attn", "cat", "early", "rho", "snn"]),
            (FusionMode::OmicOnly, Aggregator::Moab, vec!["head", "snn"]),
            (FusionMode::WsiOnly, Aggregator::Moab, vec!["attn", "head", "rho"]),
        ];
        for (fusion, agg, expect) in cases {
            let (_, store) = build(fusion, agg);
            assert_eq!(param_prefixes(&store), expect, "{fusion:?}/{agg:?}");
        }
    }

    #[test]
    fn every_mode_produces_logits_and_gradients() {
        let bag = Tensor::matrix(3, 5, (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let omic: Vec<f64> = (0..7).map(|i| (i as f64 * 0.5).cos()).collect();
        for fusion in [
            FusionMode::Dual,
            FusionMode::EarlyOnly,
            FusionMode::LateOnly,
            FusionMode::OmicOnly,
            FusionMode::WsiOnly,
        ] {
            let (model, store) = build(fusion, Aggregator::Moab);
            let mut g = Graph::new();
            let mut params = BoundParams::new(&store);
            let mut rng = SeededRng::new(0);
            let out = model.forward(&mut g, &mut params, &omic, &bag, true, &mut rng).unwrap();
            assert_eq!(g.shape(out.logits), &[3]);
            assert_eq!(out.attention.is_some(), fusion != FusionMode::OmicOnly);
            let loss = g.cross_entropy(out.logits, 1, 1.0).unwrap();
            g.backward(loss).unwrap();
            let grads = params.gradients(&g);
            assert_eq!(grads.len(), store.len(), "{fusion:?}");
        }
    }

    #[test]
    fn late_only_kp_head_width_at_full_scale() {
        let mut c = cfg(FusionMode::LateOnly, Aggregator::Kp);
        c.dims = ModelDims::default();
        let model = Model::new(ModelSpec::resolve(&c, 10, 8, 4).unwrap()).unwrap();
        assert_eq!(model.late_fusion().unwrap().cfg.head_input_width(), 66049);
    }

    #[test]
    fn configured_width_mismatch_is_config_error() {
        let mut c = cfg(FusionMode::Dual, Aggregator::Moab);
        c.dims.patch_dim = Some(9);
        assert!(matches!(ModelSpec::resolve(&c, 7, 5, 3), Err(Error::Config(_))));
    }
}
