//! Critic-side forward passes: link sampling, aggregation and the critic
//! input each paradigm trains on.

use crate::aggregate::{aggregate, AggregationMethod};
use crate::error::{Error, Result};
use crate::grouping::{apply_drop_mask, apply_self_link_mask, replay_learned, sample_adjacency, AdjacencyMatrix, LinkMode, LinkSource};
use crate::nets::{Bound, SharedParams};
use crate::numcore::{Tape, Tensor, Var};
use crate::reparam::Rng;

use super::config::{AggregateInput, Paradigm, ParadigmConfig};

/// Critic input rows for `embeddings` stacked as `T·n × d`.
///
/// dtde: each agent's own embedding. ctde: all `n` embeddings of the
/// timestep, concatenated in agent order. Grouped paradigms: the aggregate
/// over each agent's linked members.
pub fn build_critic_input(
    tape: &mut Tape,
    paradigm: Paradigm,
    method: AggregationMethod,
    embeddings: Var,
    adjacency: Option<&AdjacencyMatrix>,
    params: &SharedParams,
    bound: &Bound,
) -> Result<Var> {
    match (paradigm.is_grouped(), adjacency) {
        (true, None) => Err(Error::Config(format!("{paradigm} needs an adjacency matrix"))),
        (false, Some(_)) => Err(Error::Config(format!("{paradigm} does not take an adjacency matrix"))),
        (true, Some(a)) => Ok(aggregate(tape, method, a, embeddings, params, bound)?.matrix),
        (false, None) => match paradigm {
            Paradigm::Ctde => tape.group_concat(embeddings, params.spec().n_agents),
            _ => Ok(embeddings),
        },
    }
}

/// Links as recorded at collection time, replayed during updates.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkRecord {
    pub hard: Tensor,
    pub forced: Vec<bool>,
    pub noise: Option<Tensor>,
}

/// Draw links for `T` stacked timesteps and apply the masks.
#[allow(clippy::too_many_arguments)]
pub fn sample_links(
    tape: &mut Tape,
    cfg: &ParadigmConfig,
    params: &SharedParams,
    bound: &Bound,
    embeddings: Var,
    fixed: Option<&Tensor>,
    training: bool,
    rng: &mut Rng,
) -> Result<AdjacencyMatrix> {
    let mode = cfg.paradigm.link_mode().ok_or_else(|| Error::Config(format!("{} has no links", cfg.paradigm)))?;
    let n = params.spec().n_agents;
    let rows = tape.shape(embeddings).0;
    let steps = rows / n;
    let a = match mode {
        LinkMode::Learned => {
            let logodds = params.grouping_logits(tape, bound, embeddings)?;
            sample_adjacency(tape, LinkSource::Learned { logodds, temperature: cfg.temperature }, n, rng)?
        }
        LinkMode::Fixed => {
            let f = fixed.ok_or_else(|| Error::Config("fixed links were never drawn".into()))?;
            if f.shape() != (n, n) {
                return Err(Error::Compatibility(format!("fixed links are {}x{} for {n} agents", f.rows(), f.cols())));
            }
            AdjacencyMatrix::from_hard(n, Tensor::from_fn(rows, n, |r, c| f.get(r % n, c)))?
        }
        LinkMode::Uniform => {
            AdjacencyMatrix::from_hard(n, Tensor::from_fn(rows, n, |_, _| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }))?
        }
        LinkMode::AllOnes => AdjacencyMatrix::from_hard(n, Tensor::ones(rows, n))?,
    };
    debug_assert_eq!(a.timesteps(), steps);
    let a = apply_self_link_mask(tape, a)?;
    if training && cfg.drop_active() && mode != LinkMode::AllOnes {
        apply_drop_mask(tape, a, cfg.drop_prob, rng)
    } else {
        Ok(a)
    }
}

pub fn record(a: &AdjacencyMatrix) -> LinkRecord {
    LinkRecord { hard: a.hard().clone(), forced: a.forced().to_vec(), noise: a.noise().cloned() }
}

/// Rebuild recorded links on an update tape. Learned links keep their
/// recorded forward value and regain a gradient path to the log-odds.
pub fn replay_links(
    tape: &mut Tape,
    cfg: &ParadigmConfig,
    params: &SharedParams,
    bound: &Bound,
    embeddings: Var,
    rec: &LinkRecord,
) -> Result<AdjacencyMatrix> {
    let n = params.spec().n_agents;
    match (cfg.paradigm.link_mode(), &rec.noise) {
        (Some(LinkMode::Learned), Some(noise)) => {
            let logodds = params.grouping_logits(tape, bound, embeddings)?;
            replay_learned(tape, logodds, noise.clone(), rec.hard.clone(), &rec.forced, cfg.temperature)
        }
        (Some(LinkMode::Learned), None) => Err(Error::Config("learned links recorded without noise".into())),
        _ => AdjacencyMatrix::from_hard(n, rec.hard.clone()),
    }
}

/// Everything the losses need from one forward pass over stacked windows.
pub struct Forward {
    pub log_probs: Option<Var>,
    pub critic: Var,
    pub links: Option<AdjacencyMatrix>,
}

/// Encoder, policy head and critic over `windows` (`T·n × K·obs_dim`).
/// Links come from `replay` when given, otherwise they are sampled.
#[allow(clippy::too_many_arguments)]
pub fn forward(
    tape: &mut Tape,
    cfg: &ParadigmConfig,
    params: &SharedParams,
    bound: &Bound,
    windows: Var,
    replay: Option<&LinkRecord>,
    fixed: Option<&Tensor>,
    rng: &mut Rng,
    with_policy: bool,
) -> Result<Forward> {
    let emb = params.encode(tape, bound, windows)?;
    let links = if cfg.paradigm.is_grouped() {
        Some(match replay {
            Some(rec) => replay_links(tape, cfg, params, bound, emb, rec)?,
            None => sample_links(tape, cfg, params, bound, emb, fixed, true, rng)?,
        })
    } else {
        None
    };
    let input = match (cfg.aggregate_input, &links) {
        (AggregateInput::Raw, Some(a)) => {
            let link = a.link_var(tape);
            let mixed = tape.group_matmul(link, windows, a.timesteps())?;
            params.encode(tape, bound, mixed)?
        }
        _ => build_critic_input(tape, cfg.paradigm, cfg.aggregation, emb, links.as_ref(), params, bound)?,
    };
    let critic = match params.spec().critic_head {
        crate::nets::CriticHead::Value => params.value(tape, bound, input)?,
        crate::nets::CriticHead::Q => params.q_values(tape, bound, input)?,
    };
    let log_probs = if with_policy {
        let logits = params.policy_logits(tape, bound, emb)?;
        Some(tape.log_softmax_rows(logits)?)
    } else {
        None
    };
    Ok(Forward { log_probs, critic, links })
}
