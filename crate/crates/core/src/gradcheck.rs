//! Central finite-difference verification of every differentiable operation.
//!
//! Numeric derivatives are formed from forward evaluations only, so they are
//! independent of the backward rules they check.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::attention::{GatedAttention, SlideProjection};
use crate::encoders::{EarlyFusion, SnnEncoder};
use crate::error::Result;
use crate::fusion::{Aggregator, FusionConfig, LateFusion};
use crate::numeric::{Activation, BinTarget, BoundParams, Graph, OuterKind, ParamStore, SeededRng, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 10;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or `‖a − b‖` when both are tiny.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

fn projection(g: &mut Graph, out: Var) -> Result<Var> {
    if g.value(out).is_scalar() {
        return Ok(out);
    }
    let n = g.value(out).numel();
    let mut rng = SeededRng::new(0x5eed ^ n as u64);
    let weights = Tensor::new(g.shape(out).to_vec(), (0..n).map(|_| rng.normal()).collect())?;
    let r = g.constant(weights);
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

/// Maximum relative error between backward-pass gradients and central
/// differences, over all `inputs`. Non-scalar outputs are reduced with a
/// fixed random projection so every Jacobian entry contributes.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], track: bool| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| if track { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let out = f(&mut g, &vars)?;
        let loss = projection(&mut g, out)?;
        Ok((g, vars, loss))
    };

    let (mut g, vars, loss) = eval(inputs, true)?;
    g.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut perturbed = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).expect("param leaf has a gradient").data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let base = inputs[i].data()[k];
            perturbed[i].data_mut()[k] = base + FD_STEP;
            let (gp, _, lp) = eval(&perturbed, false)?;
            perturbed[i].data_mut()[k] = base - FD_STEP;
            let (gm, _, lm) = eval(&perturbed, false)?;
            perturbed[i].data_mut()[k] = base;
            *slot = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Like [`check_gradients`] but for a component whose parameters live in a
/// [`ParamStore`]: every parameter and every extra input is checked.
pub fn check_component<F>(store: &ParamStore, extra: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &mut BoundParams, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    inputs.extend_from_slice(extra);
    check_gradients(&inputs, |g, vars| {
        let map: BTreeMap<String, Var> = names.iter().cloned().zip(vars.iter().copied()).collect();
        let mut params = BoundParams::preset(store, map);
        f(g, &mut params, &vars[names.len()..])
    })
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub cases: Vec<CaseResult>,
    pub seconds: f64,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }
}

fn normal_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("sized")
}

/// Values with magnitude in `[0.3, 1.5]` and random sign: keeps outer-division
/// denominators and activation kinks away from zero.
fn bounded_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform_range(0.3, 1.5);
            if rng.bernoulli(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

type CaseFn = fn(&mut SeededRng) -> Result<f64>;

fn elementwise(kind: Activation) -> impl Fn(&mut SeededRng) -> Result<f64> {
    move |rng| {
        let x = bounded_tensor(rng, &[3, 4]);
        check_gradients(&[x], |g, v| g.activation(v[0], kind))
    }
}

type BoxedCase = Box<dyn Fn(&mut SeededRng) -> Result<f64>>;

fn cases() -> Vec<(&'static str, BoxedCase)> {
    let fixed: Vec<(&'static str, CaseFn)> = vec![
        ("matmul", |rng| {
            let a = normal_tensor(rng, &[3, 4]);
            let b = normal_tensor(rng, &[4, 2]);
            check_gradients(&[a, b], |g, v| g.matmul(v[0], v[1]))
        }),
        ("softmax", |rng| {
            let x = normal_tensor(rng, &[2, 5]);
            check_gradients(&[x], |g, v| g.activation(v[0], Activation::Softmax))
        }),
        ("conv2d", |rng| {
            let x = normal_tensor(rng, &[4, 5, 5]);
            let k = normal_tensor(rng, &[1, 4, 3, 3]);
            let b = normal_tensor(rng, &[1]);
            check_gradients(&[x, k, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1))
        }),
        ("conv2d_strided", |rng| {
            let x = normal_tensor(rng, &[2, 5, 5]);
            let k = normal_tensor(rng, &[3, 2, 3, 3]);
            check_gradients(&[x, k], |g, v| g.conv2d(v[0], v[1], None, 2, 0))
        }),
        ("alpha_dropout_eval", |rng| {
            let x = normal_tensor(rng, &[3, 4]);
            check_gradients(&[x], |g, v| {
                let y = g.alpha_dropout(v[0], 0.25, false, &mut SeededRng::new(1))?;
                g.activation(y, Activation::Tanh)
            })
        }),
        ("alpha_dropout_train", |rng| {
            let x = normal_tensor(rng, &[3, 4]);
            let seed = rng.next_u64();
            check_gradients(&[x], move |g, v| g.alpha_dropout(v[0], 0.25, true, &mut SeededRng::new(seed)))
        }),
        ("dropout_train", |rng| {
            let x = normal_tensor(rng, &[3, 4]);
            let seed = rng.next_u64();
            check_gradients(&[x], move |g, v| g.dropout(v[0], 0.1, true, &mut SeededRng::new(seed)))
        }),
        ("concat_repeat", |rng| {
            let a = normal_tensor(rng, &[3, 2]);
            let b = normal_tensor(rng, &[1, 4]);
            check_gradients(&[a, b], |g, v| {
                let r = g.repeat_rows(v[1], 3)?;
                g.concat_cols(v[0], r)
            })
        }),
        ("outer_product", |rng| outer_case(rng, OuterKind::Product)),
        ("outer_division", |rng| outer_case(rng, OuterKind::Division)),
        ("outer_addition", |rng| outer_case(rng, OuterKind::Addition)),
        ("outer_subtraction", |rng| outer_case(rng, OuterKind::Subtraction)),
        ("cross_entropy", |rng| {
            let x = normal_tensor(rng, &[5]);
            let target = rng.int_inclusive(0, 4);
            check_gradients(&[x], move |g, v| g.cross_entropy(v[0], target, 1.3))
        }),
        ("survival_nll", |rng| {
            let x = normal_tensor(rng, &[6, 4]);
            let targets: Vec<BinTarget> = (0..6)
                .map(|_| BinTarget {
                    bin: rng.int_inclusive(0, 3),
                    censored: rng.bernoulli(0.4),
                })
                .collect();
            check_gradients(&[x], move |g, v| g.survival_nll(v[0], &targets))
        }),
        ("snn_encoder", |rng| {
            let enc = SnnEncoder {
                in_features: 6,
                hidden: 5,
                out: 4,
                dropout: 0.25,
            };
            let mut store = ParamStore::new();
            enc.init(&mut store, rng);
            let x = normal_tensor(rng, &[1, 6]);
            let seed = rng.next_u64();
            check_component(&store, &[x], move |g, p, v| {
                enc.forward(g, p, v[0], true, &mut SeededRng::new(seed))
            })
        }),
        ("early_fusion", |rng| {
            let fusion = EarlyFusion {
                patch_dim: 3,
                omic_dim: 2,
                hidden: 4,
                out: 3,
                dropout: 0.1,
            };
            let mut store = ParamStore::new();
            fusion.init(&mut store, rng);
            let bag = bounded_tensor(rng, &[4, 3]);
            let omic = bounded_tensor(rng, &[1, 2]);
            check_component(&store, &[bag, omic], |g, p, v| {
                fusion.forward(g, p, v[0], v[1], false, &mut SeededRng::new(0))
            })
        }),
        ("gated_attention_pool", |rng| {
            let attn = GatedAttention { in_dim: 3, hidden: 4 };
            let proj = SlideProjection {
                in_dim: 4,
                out: 3,
                dropout: 0.1,
            };
            let mut store = ParamStore::new();
            attn.init(&mut store, rng);
            proj.init(&mut store, rng);
            let patches = normal_tensor(rng, &[5, 3]);
            check_component(&store, &[patches], |g, p, v| {
                let a = attn.forward(g, p, v[0])?;
                proj.forward(g, p, a, false, &mut SeededRng::new(0))
            })
        }),
        ("moab_fuse", |rng| late_case(rng, Aggregator::Moab)),
        ("cat_fuse", |rng| late_case(rng, Aggregator::Cat)),
        ("kp_fuse", |rng| late_case(rng, Aggregator::Kp)),
    ];

    let mut all: Vec<(&'static str, BoxedCase)> = vec![
        ("tanh", Box::new(elementwise(Activation::Tanh))),
        ("sigmoid", Box::new(elementwise(Activation::Sigmoid))),
        ("elu", Box::new(elementwise(Activation::Elu))),
        ("relu", Box::new(elementwise(Activation::Relu))),
        ("leaky_relu", Box::new(elementwise(Activation::leaky_relu()))),
    ];
    all.extend(fixed.into_iter().map(|(n, f)| {
        let b: BoxedCase = Box::new(f);
        (n, b)
    }));
    all
}

fn outer_case(rng: &mut SeededRng, kind: OuterKind) -> Result<f64> {
    let w = bounded_tensor(rng, &[5]);
    let o = bounded_tensor(rng, &[4]);
    check_gradients(&[w, o], move |g, v| {
        let c = kind.appended_constant();
        let wc = g.append_constant(v[0], c);
        let oc = g.append_constant(v[1], c);
        g.outer(wc, oc, kind, 1e-8)
    })
}

fn late_case(rng: &mut SeededRng, mode: Aggregator) -> Result<f64> {
    let fusion = LateFusion::new(FusionConfig::new(mode, 4, 4, 3))?;
    let mut store = ParamStore::new();
    fusion.init(&mut store, rng);
    let w = bounded_tensor(rng, &[4]);
    let o = bounded_tensor(rng, &[4]);
    check_component(&store, &[w, o], |g, p, v| fusion.forward(g, p, v[0], v[1]))
}

/// Runs every case on `instances` random draws.
pub fn run_suite(seed: u64, instances: usize) -> Result<GradCheckReport> {
    let start = Instant::now();
    let root = SeededRng::new(seed);
    let mut results = Vec::new();
    for (idx, (name, case)) in cases().into_iter().enumerate() {
        let mut rng = root.split(idx as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            worst = worst.max(case(&mut rng)?);
        }
        results.push(CaseResult {
            name: name.to_string(),
            instances,
            max_rel_error: worst,
            passed: worst < FD_TOLERANCE,
        });
    }
    Ok(GradCheckReport {
        cases: results,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_inconsistent_forward() {
        // a mask that changes between evaluations breaks the numeric derivative
        let calls = std::cell::Cell::new(0u64);
        let x = Tensor::vector(vec![0.7, -0.4, 1.1, 0.2, -0.9, 0.5]);
        let err = check_gradients(&[x], |g, v| {
            calls.set(calls.get() + 1);
            g.dropout(v[0], 0.5, true, &mut SeededRng::new(calls.get()))
        })
        .unwrap();
        assert!(err > FD_TOLERANCE);
    }

    #[test]
    fn tanh_sum_matches_closed_form() {
        let x = [0.3, -0.7];
        let mut g = Graph::new();
        let v = g.param(Tensor::vector(x.to_vec()));
        let t = g.activation(v, Activation::Tanh).unwrap();
        let l = g.sum(t);
        g.backward(l).unwrap();
        let analytic = g.grad(v).unwrap().data().to_vec();
        let numeric: Vec<f64> = x
            .iter()
            .map(|&xi| ((xi + FD_STEP).tanh() - (xi - FD_STEP).tanh()) / (2.0 * FD_STEP))
            .collect();
        assert!(relative_error(&analytic, &numeric) < 1e-6);
    }
}
