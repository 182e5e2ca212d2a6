//! Shared network blocks: history encoder, policy head, critic heads, link
//! (grouping) head and graph-attention weights. One parameter set serves all
//! agents.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};
use crate::reparam::Rng;

/// The `K` most recent observations of one agent, oldest first, with zero
/// vectors standing in for steps before the episode began.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryWindow {
    pub agent_id: usize,
    obs_dim: usize,
    frames: VecDeque<Vec<f64>>,
}

impl HistoryWindow {
    pub fn new(agent_id: usize, obs_dim: usize, len: usize) -> Self {
        assert!(len > 0, "history length must be positive");
        HistoryWindow { agent_id, obs_dim, frames: std::iter::repeat_n(vec![0.0; obs_dim], len).collect() }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn reset(&mut self) {
        self.frames.iter_mut().for_each(|f| f.fill(0.0));
    }

    /// Append the newest observation, dropping the oldest.
    pub fn push(&mut self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.obs_dim {
            return Err(Error::shape("history_push", format!("observation of {} for obs_dim {}", obs.len(), self.obs_dim)));
        }
        let mut oldest = self.frames.pop_front().expect("non-empty window");
        oldest.copy_from_slice(obs);
        self.frames.push_back(oldest);
        Ok(())
    }

    pub fn latest(&self) -> &[f64] {
        self.frames.back().expect("non-empty window")
    }

    /// Flattened window, oldest frame first.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for f in &self.frames {
            out.extend_from_slice(f);
        }
    }

    pub fn flattened(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.obs_dim * self.frames.len());
        self.flatten_into(&mut v);
        v
    }
}

/// What the critic head consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticInput {
    /// The agent's own embedding (width `hidden`).
    Individual,
    /// All agents' embeddings concatenated in agent order (width `n·hidden`).
    Joint,
    /// Group-aggregated embedding (width `hidden`).
    Grouped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticHead {
    /// State value, trained with GAE returns.
    Value,
    /// Per-action value, trained by one-step TD.
    Q,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatSpec {
    pub heads: usize,
    pub head_dim: usize,
    /// Leaky-rectifier slope applied to attention scores; `None` keeps the
    /// plain affine score `w₁·τ_i + w₂·τ_j`.
    pub score_slope: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub obs_dim: usize,
    pub history_len: usize,
    pub hidden: usize,
    pub n_actions: usize,
    pub n_agents: usize,
    pub critic_input: CriticInput,
    pub critic_head: CriticHead,
    pub grouping_head: bool,
    pub gat: Option<GatSpec>,
}

impl NetSpec {
    pub fn input_dim(&self) -> usize {
        self.obs_dim * self.history_len
    }

    pub fn critic_width(&self) -> usize {
        match self.critic_input {
            CriticInput::Joint => self.n_agents * self.hidden,
            _ => self.hidden,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
pub struct GatParams {
    pub score_left: Vec<usize>,
    pub score_right: Vec<usize>,
    pub proj: Vec<usize>,
    pub out: Linear,
    pub spec: GatSpec,
}

impl GatParams {
    pub fn out_weight(&self) -> usize {
        self.out.w
    }

    pub fn out_bias(&self) -> usize {
        self.out.b
    }
}

/// Parameter leaves bound onto one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Bind an explicit list of variables, in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// The single parameter set shared by every agent.
#[derive(Debug, Clone)]
pub struct SharedParams {
    spec: NetSpec,
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    enc1: Linear,
    enc2: Linear,
    policy: Linear,
    critic: Linear,
    grouping: Option<Linear>,
    gat: Option<GatParams>,
}

const POLICY_GAIN: f64 = 0.01;
const GROUPING_GAIN: f64 = 0.01;

impl SharedParams {
    pub fn new(spec: NetSpec, rng: &mut Rng) -> Result<Self> {
        if spec.obs_dim == 0 || spec.history_len == 0 || spec.hidden == 0 || spec.n_actions == 0 || spec.n_agents == 0 {
            return Err(Error::Parameter(format!("network dimensions must be positive: {spec:?}")));
        }
        let hidden_gain = std::f64::consts::SQRT_2;
        let mut p = SharedParams {
            spec: spec.clone(),
            names: Vec::new(),
            values: Vec::new(),
            enc1: Linear { w: 0, b: 0 },
            enc2: Linear { w: 0, b: 0 },
            policy: Linear { w: 0, b: 0 },
            critic: Linear { w: 0, b: 0 },
            grouping: None,
            gat: None,
        };
        p.enc1 = p.add_linear("encoder.0", spec.input_dim(), spec.hidden, hidden_gain, rng);
        p.enc2 = p.add_linear("encoder.1", spec.hidden, spec.hidden, hidden_gain, rng);
        p.policy = p.add_linear("policy", spec.hidden, spec.n_actions, POLICY_GAIN, rng);
        let critic_out = match spec.critic_head {
            CriticHead::Value => 1,
            CriticHead::Q => spec.n_actions,
        };
        let critic_name = match spec.critic_head {
            CriticHead::Value => "value",
            CriticHead::Q => "q",
        };
        p.critic = p.add_linear(critic_name, spec.critic_width(), critic_out, 1.0, rng);
        if spec.grouping_head {
            p.grouping = Some(p.add_linear("grouping", spec.hidden, spec.n_agents, GROUPING_GAIN, rng));
        }
        if let Some(g) = spec.gat {
            if g.heads == 0 || g.head_dim == 0 {
                return Err(Error::Parameter("attention heads and head width must be positive".into()));
            }
            let mut gat = GatParams { score_left: vec![], score_right: vec![], proj: vec![], out: Linear { w: 0, b: 0 }, spec: g };
            for h in 0..g.heads {
                gat.score_left.push(p.add_matrix(&format!("gat.{h}.score_left"), spec.hidden, 1, 1.0, rng));
                gat.score_right.push(p.add_matrix(&format!("gat.{h}.score_right"), spec.hidden, 1, 1.0, rng));
                gat.proj.push(p.add_matrix(&format!("gat.{h}.proj"), spec.hidden, g.head_dim, 1.0, rng));
            }
            gat.out = p.add_linear("gat.out", g.heads * g.head_dim, spec.hidden, 1.0, rng);
            p.gat = Some(gat);
        }
        Ok(p)
    }

    fn add_matrix(&mut self, name: &str, rows: usize, cols: usize, gain: f64, rng: &mut Rng) -> usize {
        self.names.push(name.to_string());
        self.values.push(Arc::new(orthogonal(rows, cols, gain, rng)));
        self.values.len() - 1
    }

    fn add_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut Rng) -> Linear {
        let w = self.add_matrix(&format!("{name}.weight"), fan_in, fan_out, gain, rng);
        self.names.push(format!("{name}.bias"));
        self.values.push(Arc::new(Tensor::zeros(1, fan_out)));
        Linear { w, b: self.values.len() - 1 }
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Arc<Tensor>] {
        &self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &*self.values[i])
    }

    pub fn gat(&self) -> Option<&GatParams> {
        self.gat.as_ref()
    }

    pub fn grouping_bias_index(&self) -> Option<usize> {
        self.grouping.map(|l| l.b)
    }

    /// Replace a parameter tensor (same shape).
    pub fn set(&mut self, index: usize, value: Tensor) -> Result<()> {
        let old = &self.values[index];
        if old.shape() != value.shape() {
            return Err(Error::shape(
                "set_param",
                format!("{}: {}x{} vs {}x{}", self.names[index], old.rows(), old.cols(), value.rows(), value.cols()),
            ));
        }
        self.values[index] = Arc::new(value);
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Compatibility(format!("no parameter named {name}")))?;
        self.set(i, value)
    }

    /// Put every parameter on the tape, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { tape.param(v) } else { tape.constant_shared(v) })
            .collect();
        Bound { vars }
    }

    fn linear(&self, tape: &mut Tape, b: &Bound, l: Linear, x: Var) -> Result<Var> {
        let y = tape.matmul(x, b.var(l.w))?;
        tape.add_row(y, b.var(l.b))
    }

    /// Two tanh layers over flattened history windows (`B × obs_dim·K`).
    pub fn encode(&self, tape: &mut Tape, b: &Bound, windows: Var) -> Result<Var> {
        let (_, w) = tape.shape(windows);
        if w != self.spec.input_dim() {
            return Err(Error::shape("encode", format!("window width {w}, expected {}", self.spec.input_dim())));
        }
        let h = self.linear(tape, b, self.enc1, windows)?;
        let h = tape.tanh(h)?;
        let h = self.linear(tape, b, self.enc2, h)?;
        tape.tanh(h)
    }

    pub fn policy_logits(&self, tape: &mut Tape, b: &Bound, emb: Var) -> Result<Var> {
        self.linear(tape, b, self.policy, emb)
    }

    /// Per-agent link log-odds (`B × n`), from the agent's own embedding.
    pub fn grouping_logits(&self, tape: &mut Tape, b: &Bound, emb: Var) -> Result<Var> {
        let l = self.grouping.ok_or_else(|| Error::Config("network has no grouping head".into()))?;
        self.linear(tape, b, l, emb)
    }

    fn critic_forward(&self, tape: &mut Tape, b: &Bound, input: Var) -> Result<Var> {
        let (_, w) = tape.shape(input);
        if w != self.spec.critic_width() {
            return Err(Error::shape("critic", format!("input width {w}, expected {}", self.spec.critic_width())));
        }
        self.linear(tape, b, self.critic, input)
    }

    /// State value (`B × 1`).
    pub fn value(&self, tape: &mut Tape, b: &Bound, input: Var) -> Result<Var> {
        if self.spec.critic_head != CriticHead::Value {
            return Err(Error::Config("network has a Q head, not a value head".into()));
        }
        self.critic_forward(tape, b, input)
    }

    /// Per-action values (`B × |A|`).
    pub fn q_values(&self, tape: &mut Tape, b: &Bound, input: Var) -> Result<Var> {
        if self.spec.critic_head != CriticHead::Q {
            return Err(Error::Config("network has a value head, not a Q head".into()));
        }
        self.critic_forward(tape, b, input)
    }

    /// Embedding of a single window, outside any training tape.
    pub fn encode_window(&self, window: &HistoryWindow) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let b = self.bind(&mut tape, false);
        let x = tape.constant(Tensor::row_vector(window.flattened())?);
        let e = self.encode(&mut tape, &b, x)?;
        Ok(tape.value(e).clone())
    }
}

/// Orthogonal `rows × cols` matrix scaled by `gain`.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut Rng) -> Tensor {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let g = DMatrix::from_fn(tall, short, |_, _| rng.normal());
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Sign fix so the result is uniformly distributed.
    for c in 0..short {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    if rows >= cols {
        Tensor::from_fn(rows, cols, |i, j| gain * q[(i, j)])
    } else {
        Tensor::from_fn(rows, cols, |i, j| gain * q[(j, i)])
    }
}

/// Categorical distribution helpers over logit rows.
pub mod categorical {
    use crate::reparam::Rng;

    pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        logits.iter().map(|v| v - lse).collect()
    }

    /// Inverse-CDF draw.
    pub fn sample(logits: &[f64], rng: &mut Rng) -> usize {
        let lp = log_softmax(logits);
        let u = rng.uniform();
        let mut acc = 0.0;
        for (i, l) in lp.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                return i;
            }
        }
        lp.len() - 1
    }

    /// Index of the largest logit (first on ties).
    pub fn greedy(logits: &[f64]) -> usize {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        best
    }

    pub fn entropy(logits: &[f64]) -> f64 {
        log_softmax(logits).iter().map(|l| -l.exp() * l).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::check_gradients;

    fn spec(critic_head: CriticHead, critic_input: CriticInput) -> NetSpec {
        NetSpec {
            obs_dim: 6,
            history_len: 3,
            hidden: 8,
            n_actions: 4,
            n_agents: 3,
            critic_input,
            critic_head,
            grouping_head: true,
            gat: None,
        }
    }

    #[test]
    fn window_shifts_and_zero_pads() {
        let mut w = HistoryWindow::new(0, 2, 3);
        assert_eq!(w.flattened(), vec![0.0; 6]);
        w.push(&[1.0, 2.0]).unwrap();
        w.push(&[3.0, 4.0]).unwrap();
        assert_eq!(w.flattened(), vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        w.push(&[5.0, 6.0]).unwrap();
        w.push(&[7.0, 8.0]).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w.flattened(), vec![3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert!(w.push(&[1.0]).is_err());
    }

    #[test]
    fn orthogonal_init_has_orthonormal_columns() {
        let mut rng = Rng::seed_from(1);
        let w = orthogonal(10, 4, 2.0, &mut rng);
        let wtw = w.tmatmul_with(&w, crate::ExecMode::Sequential).unwrap();
        assert!(wtw.max_abs_diff(&Tensor::identity(4).map(|v| 4.0 * v)) < 1e-10);
        let wide = orthogonal(3, 7, 1.0, &mut rng);
        let wwt = wide.matmul_t_with(&wide, crate::ExecMode::Sequential).unwrap();
        assert!(wwt.max_abs_diff(&Tensor::identity(3)) < 1e-10);
    }

    #[test]
    fn biases_start_at_zero_and_zero_window_is_bias_only() {
        let p = SharedParams::new(spec(CriticHead::Value, CriticInput::Individual), &mut Rng::seed_from(3)).unwrap();
        assert_eq!(p.get("encoder.0.bias").unwrap(), &Tensor::zeros(1, 8));
        let e = p.encode_window(&HistoryWindow::new(0, 6, 3)).unwrap();
        // tanh(0·W + 0) twice.
        assert_eq!(e, Tensor::zeros(1, 8));
    }

    #[test]
    fn identical_windows_identical_embeddings() {
        let p = SharedParams::new(spec(CriticHead::Value, CriticInput::Individual), &mut Rng::seed_from(3)).unwrap();
        let mut a = HistoryWindow::new(0, 6, 3);
        let mut b = HistoryWindow::new(2, 6, 3);
        a.push(&[0.1, 0.2, 0.0, 1.0, 0.5, 0.3]).unwrap();
        b.push(&[0.1, 0.2, 0.0, 1.0, 0.5, 0.3]).unwrap();
        assert_eq!(p.encode_window(&a).unwrap(), p.encode_window(&b).unwrap());
    }

    #[test]
    fn encoder_directional_derivative() {
        let p = SharedParams::new(spec(CriticHead::Value, CriticInput::Individual), &mut Rng::seed_from(9)).unwrap();
        let x0 = Tensor::from_fn(1, 18, |_, c| ((c * 7) as f64 * 0.31).sin());
        // d/dx_5 of Σ_k c_k·emb_k with fixed c.
        let coef = Tensor::from_fn(1, 8, |_, c| c as f64 - 3.5);
        let f = |x: &Tensor| {
            let mut t = Tape::inference();
            let b = p.bind(&mut t, false);
            let xv = t.constant(x.clone());
            let e = p.encode(&mut t, &b, xv).unwrap();
            t.value(e).data().iter().zip(coef.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let x = tape.leaf(x0.clone());
        let e = p.encode(&mut tape, &b, x).unwrap();
        let c = tape.constant(coef.clone());
        let y = tape.mul(e, c).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        let analytic = g.get(x).unwrap().get(0, 5);
        let h = 1e-5;
        let mut xp = x0.clone();
        xp.data_mut()[5] += h;
        let mut xm = x0.clone();
        xm.data_mut()[5] -= h;
        let numeric = (f(&xp) - f(&xm)) / (2.0 * h);
        assert!((analytic - numeric).abs() / analytic.abs().max(1e-8) < 1e-3, "{analytic} vs {numeric}");
    }

    #[test]
    fn policy_distribution_helpers() {
        let z = [0.0; 5];
        assert!((categorical::entropy(&z) - 5f64.ln()).abs() < 1e-12);
        let lp = categorical::log_softmax(&[0.3, -1.0, 2.5]);
        assert!((lp.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(categorical::greedy(&[0.3, -1.0, 2.5, 2.0]), 2);
    }

    #[test]
    fn head_widths() {
        let p = SharedParams::new(spec(CriticHead::Q, CriticInput::Individual), &mut Rng::seed_from(1)).unwrap();
        let mut tape = Tape::inference();
        let b = p.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_fn(3, 18, |r, c| (r + c) as f64 * 0.01));
        let e = p.encode(&mut tape, &b, x).unwrap();
        let g = p.grouping_logits(&mut tape, &b, e).unwrap();
        assert_eq!(tape.shape(g), (3, 3));
        let q = p.q_values(&mut tape, &b, e).unwrap();
        assert_eq!(tape.shape(q), (3, 4));
        assert!(p.value(&mut tape, &b, e).is_err());

        let zero = tape.constant(Tensor::zeros(1, 8));
        let q0 = p.q_values(&mut tape, &b, zero).unwrap();
        assert_eq!(tape.value(q0), &Tensor::zeros(1, 4));
    }

    #[test]
    fn joint_critic_width_and_mismatch() {
        let p = SharedParams::new(spec(CriticHead::Value, CriticInput::Joint), &mut Rng::seed_from(1)).unwrap();
        assert_eq!(p.spec().critic_width(), 24);
        let mut tape = Tape::inference();
        let b = p.bind(&mut tape, false);
        let bad = tape.constant(Tensor::zeros(2, 8));
        assert!(matches!(p.value(&mut tape, &b, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn value_head_matches_finite_differences() {
        let p = SharedParams::new(spec(CriticHead::Value, CriticInput::Individual), &mut Rng::seed_from(5)).unwrap();
        let x0 = Tensor::from_fn(2, 18, |r, c| ((r * 18 + c) as f64 * 0.17).cos());
        let w1 = (*p.values()[0]).clone();
        let report = check_gradients(&[x0, w1], 1e-5, |t, v| {
            let mut b = p.bind(t, false);
            b.vars[0] = v[1];
            let e = p.encode(t, &b, v[0])?;
            let val = p.value(t, &b, e)?;
            let sq = t.square(val)?;
            t.sum(sq)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
