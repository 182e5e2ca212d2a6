//! Fusing linked agents' embeddings into one feature row per agent, either by
//! multiplying with the link matrix or with masked multi-head attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::AdjacencyMatrix;
use crate::nets::{Bound, SharedParams};
use crate::numcore::{Tape, UnaryOp, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMethod {
    Matmul,
    Gat,
}

impl std::str::FromStr for AggregationMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matmul" => Ok(AggregationMethod::Matmul),
            "gat" => Ok(AggregationMethod::Gat),
            other => Err(Error::Config(format!("unknown aggregation `{other}`"))),
        }
    }
}

impl std::fmt::Display for AggregationMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AggregationMethod::Matmul => "matmul",
            AggregationMethod::Gat => "gat",
        })
    }
}

/// Row `i` is the group feature of agent `i` (stacked over timesteps).
#[derive(Debug, Clone, Copy)]
pub struct AggregatedFeatures {
    pub matrix: Var,
    pub method: AggregationMethod,
}

fn check_rows(tape: &Tape, a: &AdjacencyMatrix, embeddings: Var, op: &'static str) -> Result<()> {
    let rows = tape.shape(embeddings).0;
    if rows != a.hard().rows() {
        return Err(Error::shape(
            op,
            format!("links {}x{} vs embeddings {}x{}", a.hard().rows(), a.n(), rows, tape.shape(embeddings).1),
        ));
    }
    Ok(())
}

/// `τ'_i = Σ_{j : A_ij = 1} τ_j`, computed as `A · τ` per timestep.
pub fn matmul_aggregate(tape: &mut Tape, a: &AdjacencyMatrix, embeddings: Var) -> Result<AggregatedFeatures> {
    check_rows(tape, a, embeddings, "matmul_aggregate")?;
    let link = a.link_var(tape);
    let matrix = tape.group_matmul(link, embeddings, a.timesteps())?;
    Ok(AggregatedFeatures { matrix, method: AggregationMethod::Matmul })
}

/// Masked multi-head attention over linked agents.
///
/// Per head: `e_ij = w₁·τ_i + w₂·τ_j`, `α = softmax` over `{j : A_ij = 1}`,
/// output `Σ_j α_ij W τ_j`. Heads are concatenated and projected back to the
/// embedding width.
pub fn gat_aggregate(
    tape: &mut Tape,
    a: &AdjacencyMatrix,
    embeddings: Var,
    params: &SharedParams,
    bound: &Bound,
) -> Result<AggregatedFeatures> {
    check_rows(tape, a, embeddings, "gat_aggregate")?;
    let gat = params.gat().ok_or_else(|| Error::Config("network has no attention weights".into()))?;
    let n = a.n();
    let groups = a.timesteps();
    let link = a.link_var(tape);
    let mut heads = Vec::with_capacity(gat.spec.heads);
    for h in 0..gat.spec.heads {
        let left = tape.matmul(embeddings, bound.var(gat.score_left[h]))?;
        let right = tape.matmul(embeddings, bound.var(gat.score_right[h]))?;
        let mut scores = tape.group_pair_scores(left, right, n)?;
        if let Some(slope) = gat.spec.score_slope {
            scores = tape.unary(UnaryOp::LeakyRelu(slope), scores)?;
        }
        let alpha = tape.softmax_rows(scores, Some(link))?;
        let values = tape.matmul(embeddings, bound.var(gat.proj[h]))?;
        heads.push(tape.group_matmul(alpha, values, groups)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let projected = tape.matmul(cat, bound.var(gat.out_weight()))?;
    let matrix = tape.add_row(projected, bound.var(gat.out_bias()))?;
    Ok(AggregatedFeatures { matrix, method: AggregationMethod::Gat })
}

/// Dispatch on the method.
pub fn aggregate(
    tape: &mut Tape,
    method: AggregationMethod,
    a: &AdjacencyMatrix,
    embeddings: Var,
    params: &SharedParams,
    bound: &Bound,
) -> Result<AggregatedFeatures> {
    match method {
        AggregationMethod::Matmul => matmul_aggregate(tape, a, embeddings),
        AggregationMethod::Gat => gat_aggregate(tape, a, embeddings, params, bound),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::apply_self_link_mask;
    use crate::nets::{CriticHead, CriticInput, GatSpec, NetSpec};
    use crate::numcore::gradcheck::check_gradients;
    use crate::numcore::Tensor;
    use crate::reparam::Rng;

    fn gat_params(heads: usize, d: usize, seed: u64) -> SharedParams {
        let spec = NetSpec {
            obs_dim: 2,
            history_len: 1,
            hidden: d,
            n_actions: 2,
            n_agents: 3,
            critic_input: CriticInput::Grouped,
            critic_head: CriticHead::Value,
            grouping_head: false,
            gat: Some(GatSpec { heads, head_dim: 3, score_slope: None }),
        };
        SharedParams::new(spec, &mut Rng::seed_from(seed)).unwrap()
    }

    fn emb() -> Tensor {
        Tensor::from_rows(&[[1.0, 2.0, 0.5, -1.0], [0.25, -3.0, 4.0, 2.0], [7.0, 0.0, -0.5, 1.5]]).unwrap()
    }

    fn links(rows: &[[f64; 3]]) -> AdjacencyMatrix {
        AdjacencyMatrix::from_hard(3, Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn matmul_identity_and_all_ones() {
        let mut tape = Tape::new();
        let e = tape.constant(emb());
        let id = links(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let out = matmul_aggregate(&mut tape, &id, e).unwrap();
        assert_eq!(tape.value(out.matrix), &emb());

        let all = links(&[[1.0; 3]; 3]);
        let out = matmul_aggregate(&mut tape, &all, e).unwrap();
        let e0 = emb();
        for r in 0..3 {
            for c in 0..4 {
                let colsum: f64 = (0..3).map(|j| e0.get(j, c)).sum();
                assert_eq!(tape.value(out.matrix).get(r, c), colsum);
            }
        }
    }

    #[test]
    fn matmul_matches_set_sum() {
        let hard = [[1.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 1.0, 1.0]];
        let mut tape = Tape::new();
        let e = tape.constant(emb());
        let out = matmul_aggregate(&mut tape, &links(&hard), e).unwrap();
        let e0 = emb();
        for (i, row) in hard.iter().enumerate() {
            let members: Vec<usize> = (0..3).filter(|&j| row[j] == 1.0).collect();
            for c in 0..4 {
                let s: f64 = members.iter().map(|&j| e0.get(j, c)).sum();
                assert!((tape.value(out.matrix).get(i, c) - s).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::zeros(2, 4));
        let id = links(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(matmul_aggregate(&mut tape, &id, e), Err(Error::Shape { .. })));
    }

    #[test]
    fn gat_singleton_group_is_projection_of_own_embedding() {
        let p = gat_params(2, 4, 1);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let e = tape.constant(emb());
        let id = links(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let out = gat_aggregate(&mut tape, &id, e, &p, &b).unwrap();
        let got = tape.value(out.matrix).clone();

        let e0 = emb();
        let mut cat = Vec::new();
        for h in 0..2 {
            cat.push(e0.matmul(p.get(&format!("gat.{h}.proj")).unwrap()).unwrap());
        }
        let joined = Tensor::from_fn(3, 6, |r, c| cat[c / 3].get(r, c % 3));
        let expected = joined.matmul(p.get("gat.out.weight").unwrap()).unwrap();
        assert!(got.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn gat_equal_scores_average_linked_members() {
        let mut p = gat_params(1, 4, 2);
        p.set_by_name("gat.0.score_left", Tensor::zeros(4, 1)).unwrap();
        p.set_by_name("gat.0.score_right", Tensor::zeros(4, 1)).unwrap();
        let hard = [[1.0, 1.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 1.0]];
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let e = tape.constant(emb());
        let out = gat_aggregate(&mut tape, &links(&hard), e, &p, &b).unwrap();
        let v = emb().matmul(p.get("gat.0.proj").unwrap()).unwrap();
        let mut mixed = Tensor::zeros(3, 3);
        for (i, row) in hard.iter().enumerate() {
            let k: f64 = row.iter().sum();
            for c in 0..3 {
                mixed.set(i, c, (0..3).map(|j| row[j] * v.get(j, c)).sum::<f64>() / k);
            }
        }
        let expected = mixed.matmul(p.get("gat.out.weight").unwrap()).unwrap();
        assert!(tape.value(out.matrix).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn non_members_do_not_touch_the_row() {
        let p = gat_params(4, 4, 3);
        let hard = [[1.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]];
        let run = |e0: Tensor| {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape, false);
            let e = tape.constant(e0);
            let g = gat_aggregate(&mut tape, &links(&hard), e, &p, &b).unwrap();
            let m = matmul_aggregate(&mut tape, &links(&hard), e).unwrap();
            (tape.value(g.matrix).clone(), tape.value(m.matrix).clone())
        };
        let (g0, m0) = run(emb());
        let mut bumped = emb();
        for c in 0..4 {
            bumped.set(1, c, bumped.get(1, c) * 1e3 - 17.0);
        }
        let (g1, m1) = run(bumped);
        for r in [0, 2] {
            assert_eq!(g0.row(r), g1.row(r));
            assert_eq!(m0.row(r), m1.row(r));
        }
        assert_ne!(g0.row(1), g1.row(1));
    }

    #[test]
    fn gat_gradients_match_finite_differences() {
        for slope in [None, Some(0.2)] {
            let spec = NetSpec {
                obs_dim: 2,
                history_len: 1,
                hidden: 4,
                n_actions: 2,
                n_agents: 3,
                critic_input: CriticInput::Grouped,
                critic_head: CriticHead::Value,
                grouping_head: false,
                gat: Some(GatSpec { heads: 2, head_dim: 3, score_slope: slope }),
            };
            let p = SharedParams::new(spec, &mut Rng::seed_from(4)).unwrap();
            let hard = [[1.0, 0.0, 1.0], [1.0, 1.0, 0.0], [1.0, 1.0, 1.0]];
            let mut inputs = vec![emb().map(|v| v * 0.3)];
            inputs.extend(p.values().iter().map(|t| (**t).clone()));
            let report = check_gradients(&inputs, 1e-5, |t, v| {
                let mut b = p.bind(t, false);
                let vars: Vec<Var> = v[1..].to_vec();
                b = rebind(b, &vars);
                let a = apply_self_link_mask(t, links(&hard))?;
                let out = gat_aggregate(t, &a, v[0], &p, &b)?;
                let sq = t.unary(UnaryOp::Tanh, out.matrix)?;
                t.sum(sq)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    fn rebind(_old: Bound, vars: &[Var]) -> Bound {
        Bound::from_vars(vars.to_vec())
    }

    #[test]
    fn matmul_is_linear_in_embeddings() {
        let hard = [[1.0, 1.0, 0.0], [0.0, 1.0, 1.0], [1.0, 0.0, 1.0]];
        let x = emb();
        let y = emb().map(|v| v * v - 1.0);
        let mut tape = Tape::new();
        let (vx, vy) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let vs = tape.add(vx, vy).unwrap();
        let a = links(&hard);
        let fx = matmul_aggregate(&mut tape, &a, vx).unwrap().matrix;
        let fy = matmul_aggregate(&mut tape, &a, vy).unwrap().matrix;
        let fs = matmul_aggregate(&mut tape, &a, vs).unwrap().matrix;
        let sum = tape.value(fx).zip_map(tape.value(fy), |a, b| a + b);
        assert!(tape.value(fs).max_abs_diff(&sum) < 1e-12);
    }
}
