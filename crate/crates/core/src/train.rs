//! Group-contrastive training.
//!
//! Each training group pairs one query with one positive and `m` negative
//! documents. All group members are encoded and scored inside a single
//! graph; the group loss is the softmax cross-entropy of the positive's
//! score against the whole group. Adam with bias correction updates the
//! weights. Given a seed, the whole trajectory is deterministic.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ledger::Phase;
use crate::model::{ModelVars, MoresModel};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One query with one positive and `m >= 1` negative documents, all as
/// resolved token sequences.
#[derive(Debug, Clone)]
pub struct TrainingGroup {
    pub query: Vec<u32>,
    pub positive: Vec<u32>,
    pub negatives: Vec<Vec<u32>>,
}

impl TrainingGroup {
    pub fn new(query: Vec<u32>, positive: Vec<u32>, negatives: Vec<Vec<u32>>) -> Result<Self> {
        if negatives.is_empty() {
            return Err(Error::Contract("a training group needs at least one negative".into()));
        }
        if negatives.iter().any(|n| *n == positive) {
            return Err(Error::Contract(
                "the positive document appears among the negatives".into(),
            ));
        }
        Ok(TrainingGroup {
            query,
            positive,
            negatives,
        })
    }

    pub fn group_size(&self) -> usize {
        self.negatives.len() + 1
    }
}

/// On-disk form of a group: doc ids referencing a corpus file.
///
/// One group per line, four tab-separated fields:
/// `qid like "q0"` TAB `query tokens "3 17 5"` TAB `positive doc id` TAB
/// `space-separated negative doc ids`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupRecord {
    pub qid: String,
    pub query: Vec<u32>,
    pub pos_doc_id: String,
    pub neg_doc_ids: Vec<String>,
}

impl GroupRecord {
    /// Resolve doc ids into token sequences.
    pub fn resolve(&self, corpus: &HashMap<String, Vec<u32>>) -> Result<TrainingGroup> {
        let fetch = |id: &String| {
            corpus
                .get(id)
                .cloned()
                .ok_or_else(|| Error::NotFound(format!("document {id} referenced by group {}", self.qid)))
        };
        let positive = fetch(&self.pos_doc_id)?;
        let negatives = self.neg_doc_ids.iter().map(fetch).collect::<Result<Vec<_>>>()?;
        TrainingGroup::new(self.query.clone(), positive, negatives)
    }
}

/// Read a training-group file.
pub fn read_groups<R: BufRead>(r: R) -> Result<Vec<GroupRecord>> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let parse_tokens = |s: &str| -> Result<Vec<u32>> {
            s.split_whitespace()
                .map(|t| {
                    t.parse::<u32>().map_err(|_| Error::Parse {
                        line: lineno,
                        msg: format!("bad token id {t:?}"),
                    })
                })
                .collect()
        };
        out.push(GroupRecord {
            qid: fields[0].to_string(),
            query: parse_tokens(fields[1])?,
            pos_doc_id: fields[2].to_string(),
            neg_doc_ids: fields[3].split_whitespace().map(str::to_string).collect(),
        });
    }
    Ok(out)
}

/// Write a training-group file.
pub fn write_groups<W: Write>(w: &mut W, groups: &[GroupRecord]) -> Result<()> {
    for g in groups {
        let query: Vec<String> = g.query.iter().map(u32::to_string).collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            g.qid,
            query.join(" "),
            g.pos_doc_id,
            g.neg_doc_ids.join(" ")
        )?;
    }
    Ok(())
}

/// Optimizer and loop settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: usize,
    pub seed: u64,
    /// Cap on negatives used per group; extra negatives are subsampled with
    /// the run seed. `None` uses every negative the group carries.
    pub max_negatives: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 1000,
            seed: 0,
            max_negatives: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Group-softmax cross-entropy: `-log(exp(s+) / sum_j exp(s_j))` over
/// scalar score nodes, differentiable through the scores.
pub fn lce_loss(g: &mut Graph, scores: &[Var], positive: usize) -> Result<Var> {
    g.lce_loss(scores, positive)
}

/// First and second moment buffers for Adam, one pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn for_params(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }
}

/// One Adam update with bias correction. Consumes each parameter's `grad`
/// buffer (missing gradients are treated as zero) and replaces the
/// parameter tensors with updated values.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "Adam state tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (idx, param) in params.iter_mut().enumerate() {
        let grad = param.grad.take();
        let zero;
        let grad: &[f64] = match &grad {
            Some(g) => {
                if g.len() != param.numel() {
                    return Err(Error::Contract(format!(
                        "gradient length {} does not match parameter of {} values",
                        g.len(),
                        param.numel()
                    )));
                }
                g
            }
            None => {
                zero = vec![0.0; param.numel()];
                &zero
            }
        };
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let mut data = param.data().to_vec();
        for i in 0..data.len() {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= config.learning_rate * mhat / (vhat.sqrt() + config.epsilon);
        }
        let shape = param.shape().to_vec();
        **param = Tensor::new(shape, data)?.with_requires_grad(param.requires_grad);
    }
    Ok(())
}

/// Loss history of a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub loss_history: Vec<f64>,
}

/// Build the full group graph: encode every member document, score each
/// against the query, and take the LCE loss with the positive at index 0.
fn group_loss(model: &MoresModel, g: &mut Graph, vars: &ModelVars, group: &TrainingGroup) -> Result<Var> {
    let mut scores = Vec::with_capacity(group.group_size());
    let pos_memory = model.document_memory_vars(g, vars, &group.positive, Phase::QueryIndependent)?;
    scores.push(model.interact_vars(g, vars, &group.query, pos_memory)?);
    for neg in &group.negatives {
        let memory = model.document_memory_vars(g, vars, neg, Phase::QueryIndependent)?;
        scores.push(model.interact_vars(g, vars, &group.query, memory)?);
    }
    lce_loss(g, &scores, 0)
}

/// Forward-only group loss on a model with gradients disabled.
pub fn group_loss_value(model: &MoresModel, group: &TrainingGroup) -> Result<f64> {
    let frozen = freeze(model);
    let mut g = Graph::new();
    let vars = frozen.bind(&mut g)?;
    let loss = group_loss(&frozen, &mut g, &vars, group)?;
    Ok(g.scalar_value(loss))
}

fn freeze(model: &MoresModel) -> MoresModel {
    let mut frozen = model.clone();
    for p in frozen.params_mut() {
        p.requires_grad = false;
        p.grad = None;
    }
    frozen
}

fn subsample_group(group: &TrainingGroup, limit: Option<usize>, rng: &mut Rng) -> TrainingGroup {
    match limit {
        Some(m) if group.negatives.len() > m => {
            let mut idx: Vec<usize> = (0..group.negatives.len()).collect();
            rng.shuffle(&mut idx);
            idx.truncate(m);
            idx.sort_unstable();
            TrainingGroup {
                query: group.query.clone(),
                positive: group.positive.clone(),
                negatives: idx.iter().map(|&i| group.negatives[i].clone()).collect(),
            }
        }
        _ => group.clone(),
    }
}

/// Iterate groups (cycling when `steps` exceeds the group count), compute
/// the LCE loss over the group's interaction scores, backpropagate, and
/// apply Adam. Returns the per-step loss history.
pub fn train(groups: &[TrainingGroup], model: &mut MoresModel, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if groups.is_empty() {
        return Err(Error::InvalidInput("no training groups".into()));
    }
    let mut rng = Rng::new(config.seed);
    let mut state = AdamState::for_params(&model.params());
    let mut loss_history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let group = subsample_group(&groups[step % groups.len()], config.max_negatives, &mut rng);
        let mut g = Graph::new();
        let vars = model.bind(&mut g)?;
        let loss = group_loss(model, &mut g, &vars, &group)?;
        g.backward(loss)?;
        loss_history.push(g.scalar_value(loss));

        let var_handles = vars.params();
        let mut params = model.params_mut();
        debug_assert_eq!(var_handles.len(), params.len());
        for (param, var) in params.iter_mut().zip(&var_handles) {
            param.grad = g.grad(*var).map(<[f64]>::to_vec);
        }
        adam_step(&mut params, &mut state, config)?;
    }
    Ok(TrainOutcome { loss_history })
}

/// Per-tensor worst relative gradient error found by [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// (parameter name, max relative error over its sampled coordinates).
    /// Frozen (non-trainable) tensors are excluded.
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub samples: usize,
}

/// Relative error with an absolute floor: |a - n| / max(|a|, |n|, 1e-3).
/// The floor keeps finite-difference roundoff on near-zero gradients from
/// drowning the comparison.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compare analytic gradients of the group loss against central finite
/// differences on up to `samples_per_tensor` seeded coordinates of every
/// trainable weight tensor.
pub fn grad_check(
    model: &MoresModel,
    group: &TrainingGroup,
    step: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let mut g = Graph::new();
    let vars = model.bind(&mut g)?;
    let loss = group_loss(model, &mut g, &vars, group)?;
    g.backward(loss)?;
    let var_handles = vars.params();
    let names = model.param_names();
    let params = model.params();

    let mut rng = Rng::new(seed);
    let mut per_tensor = Vec::new();
    let mut max_rel_err: f64 = 0.0;
    let mut samples = 0;
    for (idx, param) in params.iter().enumerate() {
        if !param.requires_grad {
            continue;
        }
        let analytic = g
            .grad(var_handles[idx])
            .ok_or_else(|| Error::Contract(format!("no gradient for {}", names[idx])))?;
        let n = param.numel();
        let mut coords: Vec<usize> = (0..n).collect();
        if n > samples_per_tensor {
            rng.shuffle(&mut coords);
            coords.truncate(samples_per_tensor);
            coords.sort_unstable();
        }
        let mut worst: f64 = 0.0;
        for &coord in &coords {
            let numeric = central_difference(model, group, idx, coord, step)?;
            worst = worst.max(rel_err(analytic[coord], numeric));
            samples += 1;
        }
        max_rel_err = max_rel_err.max(worst);
        per_tensor.push((names[idx].clone(), worst));
    }
    Ok(GradCheckReport {
        per_tensor,
        max_rel_err,
        samples,
    })
}

fn central_difference(
    model: &MoresModel,
    group: &TrainingGroup,
    param_idx: usize,
    coord: usize,
    step: f64,
) -> Result<f64> {
    let eval = |delta: f64| -> Result<f64> {
        let mut perturbed = model.clone();
        {
            let mut params = perturbed.params_mut();
            let param = &mut params[param_idx];
            let mut data = param.data().to_vec();
            data[coord] += delta;
            let shape = param.shape().to_vec();
            **param = Tensor::new(shape, data)?;
        }
        group_loss_value(&perturbed, group)
    };
    Ok((eval(step)? - eval(-step)?) / (2.0 * step))
}
