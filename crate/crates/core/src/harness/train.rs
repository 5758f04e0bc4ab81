//! Training, prediction, evaluation and checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Task};
use super::dataset::{Dataset, Label, Sample};
use super::metrics::evaluate_classification;
use super::model::{Model, ModelSpec};
use super::selection::{project, select_cpg_features};
use crate::encoders::OmicNormalizer;
use crate::error::{Error, Result};
use crate::numeric::{Adam, BinTarget, BoundParams, Graph, ParamStore, SeededRng, Tensor};
use crate::survival::{concordance_index, discretize_bins, risk_score, BinEdges};

pub const CONFIG_FILE: &str = "config.json";
pub const MODEL_FILE: &str = "model.json";
pub const PARAMS_FILE: &str = "params.bin";

/// Everything except the weights needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub spec: ModelSpec,
    pub normalizer: OmicNormalizer,
    pub selected_features: Option<Vec<usize>>,
    pub bin_edges: Option<BinEdges>,
    pub class_names: Vec<String>,
    pub data_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub config: RunConfig,
    pub meta: ModelMeta,
    pub params: ParamStore,
    model: Model,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean loss of the last optimizer step.
    pub final_loss: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub attention: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: BTreeMap<String, f64>,
    pub predictions: Vec<Prediction>,
}

fn outputs_for(config: &RunConfig, dataset: &Dataset) -> Result<usize> {
    match config.task {
        Task::Subtype => match dataset.num_classes() {
            0 | 1 => Err(Error::Data("subtyping needs at least two classes".into())),
            c => Ok(c),
        },
        Task::Survival => Ok(config.n_bins),
    }
}

fn survival_fields(s: &Sample) -> Result<(f64, bool)> {
    match s.label {
        Label::Survival { time, censored } => Ok((time, censored)),
        Label::Class(_) => Err(Error::Data(format!("slide '{}' has no survival label", s.slide_id))),
    }
}

fn class_of(s: &Sample) -> Result<usize> {
    s.label
        .class()
        .ok_or_else(|| Error::Data(format!("slide '{}' has no class label", s.slide_id)))
}

/// Per-sample training target.
enum Target {
    Class(usize, f64),
    Survival(BinTarget),
}

impl TrainedModel {
    pub fn from_parts(config: RunConfig, meta: ModelMeta, params: ParamStore) -> Result<Self> {
        let model = Model::new(meta.spec.clone())?;
        Ok(TrainedModel {
            config,
            meta,
            params,
            model,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Feature selection then z-scoring, both fitted on the training fold.
    pub fn prepare_omic(&self, raw: &[f64]) -> Vec<f64> {
        let selected = match &self.meta.selected_features {
            Some(idx) => project(raw, idx),
            None => raw.to_vec(),
        };
        self.meta.normalizer.apply(&selected)
    }

    /// Eval-mode forward pass.
    pub fn predict(&self, sample: &Sample) -> Result<Prediction> {
        let mut g = Graph::new();
        let mut params = BoundParams::new(&self.params);
        let mut rng = SeededRng::new(0);
        let omic = self.prepare_omic(&sample.omic.values);
        let out = self
            .model
            .forward(&mut g, &mut params, &omic, &sample.bag.embeddings, false, &mut rng)?;
        Ok(Prediction {
            logits: g.value(out.logits).data().to_vec(),
            attention: out.attention.map(|a| g.value(a).data().to_vec()),
        })
    }

    /// Predicts `indices` in parallel and scores them; results stay in index order.
    pub fn evaluate(&self, dataset: &Dataset, indices: &[usize]) -> Result<Evaluation> {
        let predictions = indices
            .par_iter()
            .map(|&i| self.predict(&dataset.samples[i]))
            .collect::<Result<Vec<_>>>()?;
        let samples: Vec<&Sample> = indices.iter().map(|&i| &dataset.samples[i]).collect();
        let metrics = match self.config.task {
            Task::Subtype => {
                let pred: Vec<usize> = predictions.iter().map(|p| argmax(&p.logits)).collect();
                let truth = samples.iter().map(|s| class_of(s)).collect::<Result<Vec<_>>>()?;
                evaluate_classification(&pred, &truth, self.meta.spec.outputs)?.to_map()
            }
            Task::Survival => {
                let risks: Vec<f64> = predictions.iter().map(|p| risk_score(&p.logits)).collect();
                let fields = samples.iter().map(|s| survival_fields(s)).collect::<Result<Vec<_>>>()?;
                let times: Vec<f64> = fields.iter().map(|f| f.0).collect();
                let censored: Vec<bool> = fields.iter().map(|f| f.1).collect();
                BTreeMap::from([("c_index".to_string(), concordance_index(&risks, &times, &censored)?)])
            }
        };
        Ok(Evaluation { metrics, predictions })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(CONFIG_FILE), &self.config)?;
        write_json(&dir.join(MODEL_FILE), &self.meta)?;
        let path = dir.join(PARAMS_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        self.params.write_to(&mut w).map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: RunConfig = read_json(&dir.join(CONFIG_FILE))?;
        let meta: ModelMeta = read_json(&dir.join(MODEL_FILE))?;
        let path = dir.join(PARAMS_FILE);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let params = ParamStore::read_from(BufReader::new(file))?;
        TrainedModel::from_parts(config, meta, params)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Scales all gradients together so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= s));
    }
    norm
}

/// Trains on the samples at `train_idx`.
pub fn train(config: &RunConfig, dataset: &Dataset, train_idx: &[usize]) -> Result<(TrainedModel, TrainLog)> {
    config.validate()?;
    if train_idx.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if dataset.task != config.task {
        return Err(Error::Config(format!(
            "config task {:?} does not match dataset task {:?}",
            config.task, dataset.task
        )));
    }
    let train: Vec<&Sample> = train_idx.iter().map(|&i| &dataset.samples[i]).collect();

    let raw_rows: Vec<Vec<f64>> = train.iter().map(|s| s.omic.values.clone()).collect();
    let selected = match config.select_features {
        Some(k) => Some(select_cpg_features(&raw_rows, k)?),
        None => None,
    };
    let rows: Vec<Vec<f64>> = match &selected {
        Some(idx) => raw_rows.iter().map(|r| project(r, idx)).collect(),
        None => raw_rows,
    };
    let normalizer = if config.normalize_omics {
        OmicNormalizer::fit(&rows.iter().map(Vec::as_slice).collect::<Vec<_>>())?
    } else {
        OmicNormalizer::identity(rows[0].len())
    };

    let outputs = outputs_for(config, dataset)?;
    let spec = ModelSpec::resolve(config, rows[0].len(), dataset.patch_dim(), outputs)?;

    let (targets, bin_edges): (Vec<Target>, Option<BinEdges>) = match config.task {
        Task::Subtype => {
            let classes = train.iter().map(|s| class_of(s)).collect::<Result<Vec<_>>>()?;
            let weights = if config.class_weights {
                let mut counts = vec![0usize; outputs];
                classes.iter().for_each(|&c| counts[c] += 1);
                counts
                    .iter()
                    .map(|&n| if n == 0 { 0.0 } else { classes.len() as f64 / (outputs * n) as f64 })
                    .collect()
            } else {
                vec![1.0; outputs]
            };
            let targets = classes.iter().map(|&c| Target::Class(c, weights[c])).collect();
            (targets, None)
        }
        Task::Survival => {
            let fields = train.iter().map(|s| survival_fields(s)).collect::<Result<Vec<_>>>()?;
            let times: Vec<f64> = fields.iter().map(|f| f.0).collect();
            let censored: Vec<bool> = fields.iter().map(|f| f.1).collect();
            let edges = discretize_bins(&times, &censored, config.n_bins)?;
            let targets = fields
                .iter()
                .map(|&(t, c)| Target::Survival(edges.label(t, c).target()))
                .collect();
            (targets, Some(edges))
        }
    };

    let model = Model::new(spec.clone())?;
    let root = SeededRng::new(config.seed);
    let mut store = model.init(&mut root.split(0));
    let mut order_rng = root.split(1);
    let mut dropout_rng = root.split(2);
    let inputs: Vec<Vec<f64>> = rows.iter().map(|r| normalizer.apply(r)).collect();

    let mut adam = Adam::new(config.optimizer.clone());
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 0..config.epochs {
        order_rng.shuffle(&mut order);
        let mut epoch_total = 0.0;
        let mut epoch_count = 0usize;
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for &k in batch {
                let mut g = Graph::new();
                let mut params = BoundParams::new(&store);
                let out = model.forward(&mut g, &mut params, &inputs[k], &train[k].bag.embeddings, true, &mut dropout_rng)?;
                let loss = match &targets[k] {
                    Target::Class(c, w) => g.cross_entropy(out.logits, *c, *w)?,
                    Target::Survival(t) => g.survival_nll(out.logits, std::slice::from_ref(t))?,
                };
                let value = g.value(loss).item();
                if !value.is_finite() {
                    let culprit = g.first_non_finite().unwrap_or_else(|| "loss".into());
                    return Err(Error::Numerical(format!(
                        "non-finite loss at epoch {epoch}, step {} (slide '{}'): first non-finite tensor is {culprit}",
                        log.steps, train[k].slide_id
                    )));
                }
                let loss = g.scale(loss, scale);
                g.backward(loss)?;
                for (name, grad) in params.gradients(&g) {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(grad.data()).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(name, grad);
                        }
                    }
                }
                batch_loss += value * scale;
                epoch_total += value;
                epoch_count += 1;
            }
            if let Some(max_norm) = config.grad_clip {
                clip_global_norm(&mut grads, max_norm);
            }
            adam.step(&mut store, &grads);
            log.steps += 1;
            log.final_loss = batch_loss;
            if config.max_steps.is_some_and(|m| log.steps >= m) {
                log.epoch_losses.push(epoch_total / epoch_count as f64);
                break 'epochs;
            }
        }
        log::debug!("epoch {epoch}: mean loss {:.6}", epoch_total / epoch_count as f64);
        log.epoch_losses.push(epoch_total / epoch_count as f64);
    }

    let meta = ModelMeta {
        spec,
        normalizer,
        selected_features: selected,
        bin_edges,
        class_names: dataset.class_names.clone(),
        data_dir: None,
    };
    Ok((TrainedModel::from_parts(config.clone(), meta, store)?, log))
}
