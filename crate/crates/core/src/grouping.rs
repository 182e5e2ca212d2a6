//! The directed grouping graph: per-agent link sampling, the self-link and
//! drop masks, group extraction and the average-group-size metric.
//!
//! An [`AdjacencyMatrix`] may stack several timesteps of the same `n` agents
//! vertically (`T·n × n`); row `r` belongs to agent `r % n`.

use std::cell::Cell;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};
use crate::reparam::{gumbel_sigmoid, gumbel_sigmoid_with_noise, straight_through, Rng};

thread_local! {
    static CONSTRUCTED: Cell<u64> = const { Cell::new(0) };
}

/// Number of adjacency matrices built on the current thread so far.
pub fn adjacency_constructions() -> u64 {
    CONSTRUCTED.with(|c| c.get())
}

fn note_construction() {
    CONSTRUCTED.with(|c| c.set(c.get() + 1));
}

/// How links are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkMode {
    /// Gumbel-Sigmoid sample of the agent's own link log-odds.
    Learned,
    /// One Bernoulli(0.5) matrix frozen for the whole run.
    Fixed,
    /// Fresh Bernoulli(0.5) matrix every timestep.
    Uniform,
    /// Every agent linked to every agent.
    AllOnes,
}

impl FromStr for LinkMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(LinkMode::Learned),
            "fixed" => Ok(LinkMode::Fixed),
            "uniform" => Ok(LinkMode::Uniform),
            "all_ones" => Ok(LinkMode::AllOnes),
            other => Err(Error::Parameter(format!("unknown link mode `{other}`"))),
        }
    }
}

/// Inputs for one sampling call.
#[derive(Debug, Clone, Copy)]
pub enum LinkSource<'a> {
    Learned { logodds: Var, temperature: f64 },
    Fixed(&'a Tensor),
    Uniform,
    AllOnes,
}

#[derive(Debug, Clone)]
pub struct AdjacencyMatrix {
    n: usize,
    soft: Tensor,
    hard: Tensor,
    /// Differentiable link matrix (forward value = `hard`) when learned.
    link: Option<Var>,
    /// Entries pinned by a mask; no gradient flows through them.
    forced: Vec<bool>,
    /// Logistic noise used by a learned sample, for replay.
    noise: Option<Tensor>,
    pub timestep: usize,
}

impl AdjacencyMatrix {
    fn build(n: usize, soft: Tensor, hard: Tensor, link: Option<Var>, noise: Option<Tensor>) -> Result<Self> {
        if n == 0 || hard.cols() != n || hard.rows() % n != 0 || soft.shape() != hard.shape() {
            return Err(Error::shape(
                "adjacency",
                format!("{}x{} links for {n} agents", hard.rows(), hard.cols()),
            ));
        }
        note_construction();
        let forced = vec![false; hard.len()];
        Ok(AdjacencyMatrix { n, soft, hard, link, forced, noise, timestep: 0 })
    }

    /// Constant (non-differentiable) links.
    pub fn from_hard(n: usize, hard: Tensor) -> Result<Self> {
        if hard.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Parameter("hard links must be 0 or 1".into()));
        }
        Self::build(n, hard.clone(), hard, None, None)
    }

    /// Links whose differentiable path the caller built on `tape`. `hard` is
    /// what group extraction sees; aggregation uses the value of `link`.
    pub fn with_link(tape: &Tape, n: usize, hard: Tensor, link: Var) -> Result<Self> {
        if tape.shape(link) != hard.shape() {
            return Err(Error::shape("with_link", "link and hard shapes differ"));
        }
        Self::build(n, hard.clone(), hard, Some(link), None)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn timesteps(&self) -> usize {
        self.hard.rows() / self.n
    }

    pub fn soft(&self) -> &Tensor {
        &self.soft
    }

    pub fn hard(&self) -> &Tensor {
        &self.hard
    }

    pub fn forced(&self) -> &[bool] {
        &self.forced
    }

    pub fn noise(&self) -> Option<&Tensor> {
        self.noise.as_ref()
    }

    pub fn is_differentiable(&self) -> bool {
        self.link.is_some()
    }

    /// The link matrix as a tape variable: the straight-through sample when
    /// learned, a constant otherwise.
    pub fn link_var(&self, tape: &mut Tape) -> Var {
        match self.link {
            Some(v) => v,
            None => tape.constant(self.hard.clone()),
        }
    }

    fn refresh_link(&mut self, tape: &mut Tape) -> Result<()> {
        if let Some(v) = self.link {
            let keep: Vec<bool> = self.forced.iter().map(|f| !f).collect();
            self.link = Some(tape.where_const(v, &keep, &self.hard)?);
        }
        Ok(())
    }
}

/// Bernoulli(0.5) off-diagonal links with ones on the diagonal.
pub fn draw_fixed_links(n: usize, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(n, n, |i, j| if i == j || rng.bernoulli(0.5) { 1.0 } else { 0.0 })
}

/// Sample links for one or more stacked timesteps.
///
/// `Learned` expects `logodds` of shape `T·n × n`, row `r` produced from
/// agent `r % n`'s own history.
pub fn sample_adjacency(tape: &mut Tape, source: LinkSource<'_>, n: usize, rng: &mut Rng) -> Result<AdjacencyMatrix> {
    if n == 0 {
        return Err(Error::Parameter("need at least one agent".into()));
    }
    match source {
        LinkSource::Learned { logodds, temperature } => {
            let (rows, cols) = tape.shape(logodds);
            if cols != n || rows % n != 0 {
                return Err(Error::shape("sample_adjacency", format!("log-odds {rows}x{cols} for {n} agents")));
            }
            let sample = gumbel_sigmoid(tape, logodds, temperature, rng)?;
            let link = straight_through(tape, &sample)?;
            let soft = tape.value(sample.soft).clone();
            AdjacencyMatrix::build(n, soft, sample.hard, Some(link), Some(sample.noise))
        }
        LinkSource::Fixed(frozen) => {
            if frozen.shape() != (n, n) {
                return Err(Error::shape("sample_adjacency", format!("fixed links {}x{} for {n} agents", frozen.rows(), frozen.cols())));
            }
            AdjacencyMatrix::from_hard(n, frozen.clone())
        }
        LinkSource::Uniform => {
            let hard = Tensor::from_fn(n, n, |_, _| if rng.bernoulli(0.5) { 1.0 } else { 0.0 });
            AdjacencyMatrix::from_hard(n, hard)
        }
        LinkSource::AllOnes => AdjacencyMatrix::from_hard(n, Tensor::ones(n, n)),
    }
}

/// Rebuild a learned sample on a fresh tape: the forward value is the
/// recorded hard matrix (masks included) and the gradient flows through the
/// soft sample recomputed from the current log-odds with the recorded noise.
pub fn replay_learned(
    tape: &mut Tape,
    logodds: Var,
    noise: Tensor,
    recorded_hard: Tensor,
    recorded_forced: &[bool],
    temperature: f64,
) -> Result<AdjacencyMatrix> {
    let (rows, n) = tape.shape(logodds);
    let sample = gumbel_sigmoid_with_noise(tape, logodds, noise, temperature)?;
    let link = tape.straight_through(sample.soft, recorded_hard.clone())?;
    let soft = tape.value(sample.soft).clone();
    let mut a = AdjacencyMatrix::build(n, soft, recorded_hard, Some(link), Some(sample.noise))?;
    if recorded_forced.len() != rows * n {
        return Err(Error::shape("replay_learned", "forced mask does not match log-odds"));
    }
    a.forced = recorded_forced.to_vec();
    a.refresh_link(tape)?;
    Ok(a)
}

/// Force every agent's self-link to 1.
pub fn apply_self_link_mask(tape: &mut Tape, mut a: AdjacencyMatrix) -> Result<AdjacencyMatrix> {
    let n = a.n;
    for r in 0..a.hard.rows() {
        let c = r % n;
        a.hard.set(r, c, 1.0);
        a.soft.set(r, c, 1.0);
        a.forced[r * n + c] = true;
    }
    a.refresh_link(tape)?;
    Ok(a)
}

/// Zero each off-diagonal link independently with probability `drop_prob`.
/// Self-links are exempt.
pub fn apply_drop_mask(tape: &mut Tape, mut a: AdjacencyMatrix, drop_prob: f64, rng: &mut Rng) -> Result<AdjacencyMatrix> {
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::Parameter(format!("drop probability must be in [0, 1), got {drop_prob}")));
    }
    if drop_prob == 0.0 {
        return Ok(a);
    }
    let n = a.n;
    for r in 0..a.hard.rows() {
        for c in 0..n {
            if c == r % n {
                continue;
            }
            if rng.bernoulli(drop_prob) && a.hard.get(r, c) == 1.0 {
                a.hard.set(r, c, 0.0);
                a.forced[r * n + c] = true;
            }
        }
    }
    a.refresh_link(tape)?;
    Ok(a)
}

/// Members of each agent's group at one timestep: `g(v_i) = {j : A_ij = 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    members: Vec<Vec<usize>>,
}

impl GroupAssignment {
    pub fn new(members: Vec<Vec<usize>>) -> Self {
        GroupAssignment { members }
    }

    /// Every agent alone (decentralized critics).
    pub fn singletons(n: usize) -> Self {
        GroupAssignment { members: (0..n).map(|i| vec![i]).collect() }
    }

    /// Every agent with everyone (joint critics).
    pub fn everyone(n: usize) -> Self {
        GroupAssignment { members: vec![(0..n).collect(); n] }
    }

    pub fn n(&self) -> usize {
        self.members.len()
    }

    pub fn group(&self, agent: usize) -> &[usize] {
        &self.members[agent]
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.members
    }
}

/// One assignment per stacked timestep.
pub fn extract_groups(a: &AdjacencyMatrix) -> Vec<GroupAssignment> {
    let n = a.n;
    (0..a.timesteps())
        .map(|t| {
            let members = (0..n)
                .map(|i| (0..n).filter(|&j| a.hard.get(t * n + i, j) == 1.0).collect())
                .collect();
            GroupAssignment { members }
        })
        .collect()
}

/// Mean over timesteps and alive agents of `|g(v_i) ∩ alive|`.
pub fn avg_node_information(assignments: &[GroupAssignment], alive: &[Vec<bool>]) -> Result<f64> {
    if assignments.len() != alive.len() {
        return Err(Error::shape("avg_node_information", format!("{} assignments, {} alive masks", assignments.len(), alive.len())));
    }
    let (total, count) = node_information_sums(assignments, alive)?;
    if count == 0 {
        return Err(Error::UndefinedMetric("no alive agent in any recorded timestep".into()));
    }
    Ok(total as f64 / count as f64)
}

/// Sum of group sizes and number of (timestep, alive agent) pairs.
pub fn node_information_sums(assignments: &[GroupAssignment], alive: &[Vec<bool>]) -> Result<(u64, u64)> {
    let mut total = 0u64;
    let mut count = 0u64;
    for (g, mask) in assignments.iter().zip(alive) {
        if mask.len() != g.n() {
            return Err(Error::shape("avg_node_information", format!("alive mask of {} for {} agents", mask.len(), g.n())));
        }
        for (i, members) in g.members.iter().enumerate() {
            if !mask[i] {
                continue;
            }
            total += members.iter().filter(|&&j| mask[j]).count() as u64;
            count += 1;
        }
    }
    Ok((total, count))
}

/// One exported group membership.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub episode: usize,
    pub timestep: usize,
    pub agent: usize,
    pub members: Vec<usize>,
}

pub fn group_records(episode: usize, timestep: usize, g: &GroupAssignment) -> impl Iterator<Item = GroupRecord> + '_ {
    g.members.iter().enumerate().map(move |(agent, m)| GroupRecord { episode, timestep, agent, members: m.clone() })
}

/// Line-delimited JSON, one record per line.
pub fn write_group_records<W: Write>(mut w: W, records: &[GroupRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_pipeline(tape: &mut Tape, hard: Tensor) -> AdjacencyMatrix {
        let n = hard.cols();
        apply_self_link_mask(tape, AdjacencyMatrix::from_hard(n, hard).unwrap()).unwrap()
    }

    #[test]
    fn all_ones_mode() {
        let mut tape = Tape::inference();
        let a = sample_adjacency(&mut tape, LinkSource::AllOnes, 3, &mut Rng::seed_from(0)).unwrap();
        assert_eq!(a.hard(), &Tensor::ones(3, 3));
    }

    #[test]
    fn saturated_negative_logits_give_identity() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::full(5, 5, -1e6));
        let src = LinkSource::Learned { logodds: l, temperature: 1.0 };
        let a = sample_adjacency(&mut tape, src, 5, &mut Rng::seed_from(1)).unwrap();
        let a = apply_self_link_mask(&mut tape, a).unwrap();
        assert_eq!(a.hard(), &Tensor::identity(5));
        let link = a.link_var(&mut tape);
        assert_eq!(tape.value(link), &Tensor::identity(5));
    }

    #[test]
    fn unknown_mode_is_parameter_error() {
        assert!(matches!("random".parse::<LinkMode>(), Err(Error::Parameter(_))));
        assert_eq!("all_ones".parse::<LinkMode>().unwrap(), LinkMode::AllOnes);
    }

    #[test]
    fn uniform_off_diagonal_frequency() {
        let mut rng = Rng::seed_from(77);
        let mut tape = Tape::inference();
        let n = 8;
        let (mut ones, mut total) = (0.0, 0.0);
        for _ in 0..10_000 {
            let a = sample_adjacency(&mut tape, LinkSource::Uniform, n, &mut rng).unwrap();
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        ones += a.hard().get(i, j);
                        total += 1.0;
                    }
                }
            }
            tape.reset();
        }
        assert!((ones / total - 0.5).abs() < 0.02);
    }

    #[test]
    fn self_link_mask_forces_and_is_idempotent() {
        let mut tape = Tape::inference();
        let a = mask_pipeline(&mut tape, Tensor::zeros(4, 4));
        assert_eq!(a.hard(), &Tensor::identity(4));
        let b = mask_pipeline(&mut tape, Tensor::ones(4, 4));
        assert_eq!(b.hard(), &Tensor::ones(4, 4));
        let once = mask_pipeline(&mut tape, Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap());
        let twice = apply_self_link_mask(&mut tape, once.clone()).unwrap();
        assert_eq!(once.hard(), twice.hard());
        assert_eq!(once.forced(), twice.forced());
    }

    #[test]
    fn drop_mask_rules() {
        let mut tape = Tape::inference();
        let mut rng = Rng::seed_from(3);
        let a = mask_pipeline(&mut tape, Tensor::ones(3, 3));
        let kept = apply_drop_mask(&mut tape, a.clone(), 0.0, &mut rng).unwrap();
        assert_eq!(kept.hard(), a.hard());
        assert!(matches!(apply_drop_mask(&mut tape, a.clone(), 1.0, &mut rng), Err(Error::Parameter(_))));
        assert!(matches!(apply_drop_mask(&mut tape, a.clone(), -0.1, &mut rng), Err(Error::Parameter(_))));
        let dropped = apply_drop_mask(&mut tape, a, 0.9, &mut rng).unwrap();
        for i in 0..3 {
            assert_eq!(dropped.hard().get(i, i), 1.0);
        }
    }

    #[test]
    fn drop_survival_frequency() {
        let mut tape = Tape::inference();
        let mut rng = Rng::seed_from(21);
        let n = 16;
        let (mut kept, mut total) = (0.0, 0.0);
        for _ in 0..10_000 {
            let a = mask_pipeline(&mut tape, Tensor::ones(n, n));
            let d = apply_drop_mask(&mut tape, a, 0.1, &mut rng).unwrap();
            for i in 0..n {
                assert_eq!(d.hard().get(i, i), 1.0);
                for j in 0..n {
                    if i != j {
                        kept += d.hard().get(i, j);
                        total += 1.0;
                    }
                }
            }
            tape.reset();
        }
        assert!((kept / total - 0.9).abs() < 0.01);
    }

    #[test]
    fn group_extraction_examples() {
        let mut tape = Tape::inference();
        let id = mask_pipeline(&mut tape, Tensor::zeros(4, 4));
        assert_eq!(extract_groups(&id)[0], GroupAssignment::singletons(4));
        let all = mask_pipeline(&mut tape, Tensor::ones(4, 4));
        assert_eq!(extract_groups(&all)[0].group(2), &[0, 1, 2, 3]);
        let a = AdjacencyMatrix::from_hard(
            4,
            Tensor::from_rows(&[[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        // Zero-based: agent 0 linked to agents 0 and 2.
        assert_eq!(extract_groups(&a)[0].group(0), &[0, 2]);
    }

    #[test]
    fn equal_rows_mean_equal_groups() {
        let a = AdjacencyMatrix::from_hard(
            3,
            Tensor::from_rows(&[[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 1.0]]).unwrap(),
        )
        .unwrap();
        let g = &extract_groups(&a)[0];
        assert_eq!(g.group(0), g.group(1));
        assert_ne!(g.group(0), g.group(2));
    }

    #[test]
    fn node_information_examples() {
        let ids = vec![GroupAssignment::singletons(5); 3];
        let alive = vec![vec![true; 5]; 3];
        assert_eq!(avg_node_information(&ids, &alive).unwrap(), 1.0);
        let all = vec![GroupAssignment::everyone(20); 4];
        assert_eq!(avg_node_information(&all, &vec![vec![true; 20]; 4]).unwrap(), 20.0);
        let three = vec![GroupAssignment::everyone(3)];
        assert_eq!(avg_node_information(&three, &[vec![true, true, false]]).unwrap(), 2.0);
        assert!(matches!(avg_node_information(&[], &[]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn stacked_timesteps() {
        let hard = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 1.0]]).unwrap();
        let a = AdjacencyMatrix::from_hard(2, hard).unwrap();
        let g = extract_groups(&a);
        assert_eq!(g.len(), 2);
        assert_eq!(g[0], GroupAssignment::singletons(2));
        assert_eq!(g[1], GroupAssignment::everyone(2));
    }

    #[test]
    fn records_are_line_delimited() {
        let mut buf = Vec::new();
        let recs: Vec<_> = group_records(2, 7, &GroupAssignment::singletons(2)).collect();
        write_group_records(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "{\"episode\":2,\"timestep\":7,\"agent\":0,\"members\":[0]}\n{\"episode\":2,\"timestep\":7,\"agent\":1,\"members\":[1]}\n");
    }

    #[test]
    fn construction_counter_moves() {
        let before = adjacency_constructions();
        let _ = AdjacencyMatrix::from_hard(2, Tensor::identity(2)).unwrap();
        assert_eq!(adjacency_constructions(), before + 1);
    }
}
