//! Gumbel noise, the Gumbel-Sigmoid relaxation of a Bernoulli draw, the
//! two-class Gumbel-Softmax it is equivalent to, and straight-through hard
//! sampling.
//!
//! For a log-odds value `l = log(p/(1-p))` and independent `ε₁, ε₂ ~ Gumbel(0,1)`:
//!
//! ```text
//! softmax([log p + ε₁, log(1-p) + ε₂])₀ = sigmoid(l + ε₁ − ε₂)
//! ```
//!
//! so each entry of an n×n link matrix can be sampled independently, which a
//! row-wise softmax (exactly one link) cannot do.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Uniform draws are clamped into `[UNIFORM_EPS, 1 − UNIFORM_EPS]` before the
/// double logarithm.
pub const UNIFORM_EPS: f64 = 1e-12;

/// Soft samples are kept inside `[SOFT_EPS, 1 − SOFT_EPS]`.
const SOFT_EPS: f64 = 1e-12;

/// Seedable generator: ChaCha8 keyed from a 64-bit seed via
/// `ChaCha8Rng::seed_from_u64`, which is platform independent.
///
/// Worker streams are derived as `Rng::worker(seed, index)`, i.e. the master
/// seed plus the worker index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng(ChaCha8Rng);

/// Serializable generator position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn worker(master_seed: u64, index: u64) -> Self {
        Self::seed_from(master_seed.wrapping_add(index))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        // Box–Muller on clamped uniforms.
        let u1 = self.uniform().max(UNIFORM_EPS);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn gumbel(&mut self) -> f64 {
        let u = self.uniform().clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
        -(-u.ln()).ln()
    }

    pub fn state(&self) -> RngState {
        RngState { seed: self.0.get_seed(), stream: self.0.get_stream(), word_pos: self.0.get_word_pos() }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut r = ChaCha8Rng::from_seed(state.seed);
        r.set_stream(state.stream);
        r.set_word_pos(state.word_pos);
        Rng(r)
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

/// I.i.d. Gumbel(0,1) draws `−log(−log u)`.
pub fn sample_gumbel(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gumbel())
}

/// Logistic(0,1) noise as the difference of two Gumbel draws, `ε₁ − ε₂`,
/// drawn entry by entry.
pub fn sample_logistic_pair(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let e1 = rng.gumbel();
        let e2 = rng.gumbel();
        e1 - e2
    })
}

/// A relaxed Bernoulli sample living on a tape.
#[derive(Debug, Clone)]
pub struct GumbelSample {
    /// Differentiable sample in (0,1).
    pub soft: Var,
    /// `1` exactly where `soft > 0.5`.
    pub hard: Tensor,
    /// The `ε₁ − ε₂` noise used, kept so the draw can be replayed.
    pub noise: Tensor,
    pub temperature: f64,
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Parameter(format!("temperature must be positive, got {temperature}")));
    }
    Ok(())
}

/// `sigmoid((logits + ε₁ − ε₂) / temperature)` with fresh Gumbel noise.
pub fn gumbel_sigmoid(tape: &mut Tape, logits: Var, temperature: f64, rng: &mut Rng) -> Result<GumbelSample> {
    check_temperature(temperature)?;
    let (r, c) = tape.shape(logits);
    let noise = sample_logistic_pair(r, c, rng);
    gumbel_sigmoid_with_noise(tape, logits, noise, temperature)
}

/// Gumbel-Sigmoid with caller-supplied `ε₁ − ε₂` noise.
pub fn gumbel_sigmoid_with_noise(
    tape: &mut Tape,
    logits: Var,
    noise: Tensor,
    temperature: f64,
) -> Result<GumbelSample> {
    check_temperature(temperature)?;
    let n = tape.constant(noise.clone());
    let z = tape.add(logits, n)?;
    let z = if temperature == 1.0 { z } else { tape.scale(z, 1.0 / temperature)? };
    let s = tape.sigmoid(z)?;
    let soft = tape.clamp(s, SOFT_EPS, 1.0 - SOFT_EPS)?;
    let hard = tape.value(soft).map(threshold);
    Ok(GumbelSample { soft, hard, noise, temperature })
}

/// Hard decision for a soft sample; a tie at exactly 0.5 maps to 0.
#[inline]
pub fn threshold(soft: f64) -> f64 {
    if soft > 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Row-wise `softmax((logits + ε) / temperature)` with fresh Gumbel noise.
pub fn gumbel_softmax(tape: &mut Tape, logits: Var, temperature: f64, rng: &mut Rng) -> Result<Var> {
    let (r, c) = tape.shape(logits);
    let noise = sample_gumbel(r, c, rng);
    gumbel_softmax_with_noise(tape, logits, noise, temperature)
}

pub fn gumbel_softmax_with_noise(tape: &mut Tape, logits: Var, noise: Tensor, temperature: f64) -> Result<Var> {
    check_temperature(temperature)?;
    if tape.shape(logits).1 < 2 {
        return Err(Error::Parameter("gumbel_softmax needs at least two classes".into()));
    }
    let n = tape.constant(noise);
    let z = tape.add(logits, n)?;
    let z = tape.scale(z, 1.0 / temperature)?;
    tape.softmax_rows(z, None)
}

/// Hard forward value with the soft sample's gradient.
pub fn straight_through(tape: &mut Tape, sample: &GumbelSample) -> Result<Var> {
    tape.straight_through(sample.soft, sample.hard.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::check_gradients;
    use crate::numcore::sigmoid;
    use proptest::{prop_assert, proptest};

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn gumbel_moments() {
        let mut rng = Rng::seed_from(1);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.gumbel()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - EULER_GAMMA).abs() < 0.01, "mean {mean}");
        let target = std::f64::consts::PI.powi(2) / 6.0;
        assert!((var - target).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn same_seed_same_noise() {
        let a = sample_gumbel(3, 4, &mut Rng::seed_from(99));
        let b = sample_gumbel(3, 4, &mut Rng::seed_from(99));
        assert_eq!(a, b);
        let c = sample_gumbel(3, 4, &mut Rng::seed_from(100));
        assert_ne!(a, c);
    }

    #[test]
    fn rng_state_round_trips() {
        let mut rng = Rng::seed_from(5);
        for _ in 0..37 {
            rng.uniform();
        }
        let mut restored = Rng::from_state(&rng.state());
        for _ in 0..10 {
            assert_eq!(rng.next_u64(), restored.next_u64());
        }
    }

    #[test]
    fn tie_at_one_half_is_zero() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::scalar(0.0));
        let s = gumbel_sigmoid_with_noise(&mut tape, l, Tensor::scalar(0.0), 1.0).unwrap();
        assert_eq!(tape.value(s.soft).item(), 0.5);
        assert_eq!(s.hard.item(), 0.0);
    }

    #[test]
    fn rejects_non_positive_temperature() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::scalar(0.0));
        let mut rng = Rng::seed_from(0);
        assert!(matches!(gumbel_sigmoid(&mut tape, l, 0.0, &mut rng), Err(Error::Parameter(_))));
        assert!(matches!(gumbel_sigmoid(&mut tape, l, -1.0, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn illustrative_matrix_thresholds() {
        let soft = Tensor::from_rows(&[[0.3, 0.7, 0.8], [0.8, 0.6, 0.77], [0.1, 0.6, 0.45]]).unwrap();
        let hard = soft.map(threshold);
        let expected = Tensor::from_rows(&[[0.0, 1.0, 1.0], [1.0, 1.0, 1.0], [0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(hard, expected);
    }

    #[test]
    fn hard_frequency_matches_probability() {
        let mut rng = Rng::seed_from(2024);
        for k in 1..=9 {
            let p = k as f64 / 10.0;
            let logit = (p / (1.0 - p)).ln();
            let mut tape = Tape::inference();
            let l = tape.constant(Tensor::full(1, 100_000, logit));
            let s = gumbel_sigmoid(&mut tape, l, 1.0, &mut rng).unwrap();
            let freq = s.hard.sum() / 100_000.0;
            assert!((freq - p).abs() < 0.01, "p={p} freq={freq}");
        }
    }

    #[test]
    fn cold_softmax_is_nearly_one_hot() {
        let mut rng = Rng::seed_from(8);
        let logits = Tensor::from_fn(20, 5, |r, c| ((r * 5 + c) as f64 * 0.37).sin());
        let noise = sample_gumbel(20, 5, &mut rng);
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone());
        let y = gumbel_softmax_with_noise(&mut tape, l, noise.clone(), 1e-4).unwrap();
        let y = tape.value(y);
        for r in 0..20 {
            let peak = (0..5)
                .max_by(|&a, &b| (logits.get(r, a) + noise.get(r, a)).total_cmp(&(logits.get(r, b) + noise.get(r, b))))
                .unwrap();
            for c in 0..5 {
                if c != peak {
                    assert!(y.get(r, c) < 1e-3);
                }
            }
        }
    }

    #[test]
    fn uniform_softmax_classes_are_balanced() {
        let mut rng = Rng::seed_from(31);
        let k = 4;
        let draws = 100_000;
        let mut tape = Tape::inference();
        let l = tape.constant(Tensor::zeros(draws, k));
        let y = gumbel_softmax(&mut tape, l, 1.0, &mut rng).unwrap();
        let y = tape.value(y);
        let mut counts = vec![0usize; k];
        for r in 0..draws {
            let best = (0..k).max_by(|&a, &b| y.get(r, a).total_cmp(&y.get(r, b))).unwrap();
            counts[best] += 1;
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn straight_through_is_hard_forward_soft_backward() {
        let logits0 = Tensor::from_rows(&[[0.4, -1.3, 2.2], [0.0, 0.9, -0.2]]).unwrap();
        let mut rng = Rng::seed_from(4);
        let noise = sample_logistic_pair(2, 3, &mut rng);
        let weights = Tensor::from_rows(&[[1.0, -2.0, 0.5], [3.0, 0.25, -1.0]]).unwrap();

        let mut tape = Tape::new();
        let l = tape.leaf(logits0.clone());
        let s = gumbel_sigmoid_with_noise(&mut tape, l, noise.clone(), 0.7).unwrap();
        let st = straight_through(&mut tape, &s).unwrap();
        assert!(tape.value(st).data().iter().all(|&v| v == 0.0 || v == 1.0));
        let w = tape.constant(weights.clone());
        let y = tape.mul(st, w).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        let analytic = g.get(l).unwrap().clone();

        // Same weighting applied to the soft sample, differentiated numerically.
        let noise2 = noise.clone();
        let weights2 = weights.clone();
        let report = check_gradients(&[logits0.clone()], 1e-5, move |t, v| {
            let s = gumbel_sigmoid_with_noise(t, v[0], noise2.clone(), 0.7)?;
            let w = t.constant(weights2.clone());
            let y = t.mul(s.soft, w)?;
            t.sum(y)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4);

        // Direct comparison of the straight-through gradient against the
        // numeric derivative of the soft path.
        for e in 0..logits0.len() {
            let f = |x: f64| sigmoid((x + noise.data()[e]) / 0.7) * weights.data()[e];
            let x = logits0.data()[e];
            let num = (f(x + 1e-5) - f(x - 1e-5)) / 2e-5;
            let a = analytic.data()[e];
            assert!((a - num).abs() / a.abs().max(1.0) < 1e-4);
        }
    }

    #[test]
    fn saturated_logit_is_almost_always_on() {
        let mut rng = Rng::seed_from(12);
        let mut tape = Tape::inference();
        let l = tape.constant(Tensor::full(1, 10_000, 10.0));
        let s = gumbel_sigmoid(&mut tape, l, 1.0, &mut rng).unwrap();
        assert!(s.hard.sum() / 10_000.0 > 0.999);
        assert!(sigmoid(10.0) > 0.9999);
    }

    proptest! {
        #[test]
        fn sigmoid_form_equals_two_class_softmax(p in 0.001f64..0.999, e1 in -3.0f64..8.0, e2 in -3.0f64..8.0) {
            let mut tape = Tape::new();
            let l = tape.constant(Tensor::scalar((p / (1.0 - p)).ln()));
            let s = gumbel_sigmoid_with_noise(&mut tape, l, Tensor::scalar(e1 - e2), 1.0).unwrap();
            let two = tape.constant(Tensor::from_rows(&[[p.ln(), (1.0 - p).ln()]]).unwrap());
            let y = gumbel_softmax_with_noise(&mut tape, two, Tensor::from_rows(&[[e1, e2]]).unwrap(), 1.0).unwrap();
            let a = tape.value(s.soft).item();
            let b = tape.value(y).get(0, 0);
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn soft_sample_increases_with_logit(l in -5.0f64..5.0, dl in 1e-3f64..3.0, noise in -3.0f64..3.0, temp in 0.5f64..3.0) {
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::scalar(l));
            let b = tape.constant(Tensor::scalar(l + dl));
            let sa = gumbel_sigmoid_with_noise(&mut tape, a, Tensor::scalar(noise), temp).unwrap();
            let sb = gumbel_sigmoid_with_noise(&mut tape, b, Tensor::scalar(noise), temp).unwrap();
            let (va, vb) = (tape.value(sa.soft).item(), tape.value(sb.soft).item());
            prop_assert!(va > 0.0 && va < 1.0);
            prop_assert!(vb > va);
        }
    }
}
