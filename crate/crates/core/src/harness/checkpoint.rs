//! Text checkpoints: a header, the config echo, then one hex line per tensor.
//!
//! ```text
//! gtde-checkpoint 1
//! iteration 12
//! env_steps 4800
//! rng <seed hex> <stream> <word_pos>
//! config 34
//! <34 config lines>
//! params 17
//! param encoder.w0 832 64
//! <hex of the big-endian f64 payload, row-major>
//! ...
//! fixed_links none
//! end
//! ```

use std::path::Path;

use crate::algos::Trainer;
use crate::envs::Registry;
use crate::error::{Error, Result};
use crate::nets::SharedParams;
use crate::numcore::Tensor;
use crate::reparam::{Rng, RngState};

use super::config::RunConfig;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "gtde-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: usize,
    pub env_steps: u64,
    pub rng: RngState,
    pub params: Vec<(String, Tensor)>,
    pub fixed_links: Option<Tensor>,
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("checkpoint_{iteration}.ckpt")
}

fn encode(t: &Tensor) -> String {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_be_bytes()).collect();
    hex::encode(bytes)
}

fn decode(rows: usize, cols: usize, payload: &str) -> Result<Tensor> {
    let bytes = hex::decode(payload.trim()).map_err(|e| Error::Checkpoint(format!("bad hex payload: {e}")))?;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Checkpoint(format!("payload holds {} bytes, expected {}", bytes.len(), rows * cols * 8)));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_be_bytes(c.try_into().unwrap())).collect();
    Tensor::new(rows, cols, data)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| Error::Checkpoint(format!("truncated file, expected {what}")))
    }

    /// The words after `keyword` on the next line.
    fn field(&mut self, keyword: &str) -> Result<Vec<&'a str>> {
        let (no, line) = self.next(keyword)?;
        let mut words = line.split_whitespace();
        if words.next() != Some(keyword) {
            return Err(Error::Checkpoint(format!("line {no}: expected `{keyword}`, got `{line}`")));
        }
        Ok(words.collect())
    }
}

fn num<T: std::str::FromStr>(s: Option<&&str>, what: &str) -> Result<T> {
    s.and_then(|s| s.parse().ok()).ok_or_else(|| Error::Checkpoint(format!("bad or missing {what}")))
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer, config: &RunConfig) -> Self {
        let p = trainer.params();
        Checkpoint {
            config: config.clone(),
            iteration: trainer.iteration(),
            env_steps: trainer.env_steps(),
            rng: trainer.rng_state(),
            params: p.names().iter().cloned().zip(p.values().iter().map(|t| (**t).clone())).collect(),
            fixed_links: trainer.fixed_links().cloned(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {FORMAT_VERSION}\n");
        out.push_str(&format!("iteration {}\n", self.iteration));
        out.push_str(&format!("env_steps {}\n", self.env_steps));
        out.push_str(&format!("rng {} {} {}\n", hex::encode(self.rng.seed), self.rng.stream, self.rng.word_pos));
        let cfg = self.config.to_text(false);
        out.push_str(&format!("config {}\n{cfg}", cfg.lines().count()));
        out.push_str(&format!("params {}\n", self.params.len()));
        for (name, t) in &self.params {
            out.push_str(&format!("param {name} {} {}\n{}\n", t.rows(), t.cols(), encode(t)));
        }
        match &self.fixed_links {
            None => out.push_str("fixed_links none\n"),
            Some(t) => out.push_str(&format!("fixed_links {} {}\n{}\n", t.rows(), t.cols(), encode(t))),
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = Lines { inner: text.lines().enumerate() };
        let head = lines.field(MAGIC)?;
        let version: u32 = num(head.first(), "format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let iteration = num(lines.field("iteration")?.first(), "iteration")?;
        let env_steps = num(lines.field("env_steps")?.first(), "env_steps")?;
        let rng = lines.field("rng")?;
        let seed: [u8; 32] = hex::decode(rng.first().copied().unwrap_or(""))
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Checkpoint("bad rng seed".into()))?;
        let rng = RngState { seed, stream: num(rng.get(1), "rng stream")?, word_pos: num(rng.get(2), "rng position")? };
        let count: usize = num(lines.field("config")?.first(), "config line count")?;
        let mut cfg_text = String::new();
        for _ in 0..count {
            cfg_text.push_str(lines.next("config line")?.1);
            cfg_text.push('\n');
        }
        let config = RunConfig::parse(&cfg_text, &[]).map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
        let count: usize = num(lines.field("params")?.first(), "parameter count")?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let f = lines.field("param")?;
            let name = f.first().ok_or_else(|| Error::Checkpoint("parameter without a name".into()))?.to_string();
            let (rows, cols) = (num(f.get(1), "rows")?, num(f.get(2), "cols")?);
            params.push((name, decode(rows, cols, lines.next("payload")?.1)?));
        }
        let f = lines.field("fixed_links")?;
        let fixed_links = if f.first() == Some(&"none") {
            None
        } else {
            let (rows, cols) = (num(f.first(), "rows")?, num(f.get(1), "cols")?);
            Some(decode(rows, cols, lines.next("payload")?.1)?)
        };
        lines.field("end")?;
        Ok(Checkpoint { config, iteration, env_steps, rng, params, fixed_links })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Rebuild the network for the checkpoint's own environment.
    pub fn shared_params(&self, registry: &Registry) -> Result<SharedParams> {
        let c = &self.config;
        let env = registry.build(&c.env, &c.env_overrides, c.algo.episode_length)?;
        let spec = c.algo.net_spec(env.obs_dim(), env.n_actions(), env.n_agents());
        let mut p = SharedParams::new(spec, &mut Rng::seed_from(0))?;
        if p.names().len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} stored parameters, the configured network has {}",
                self.params.len(),
                p.names().len()
            )));
        }
        for (name, t) in &self.params {
            p.set_by_name(name, t.clone()).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        }
        Ok(p)
    }

    /// A trainer positioned exactly where this checkpoint was taken.
    pub fn trainer(&self, registry: &Registry, diag_dir: &Path) -> Result<Trainer> {
        let c = &self.config;
        let mut t = Trainer::new(c.algo.clone(), registry, &c.env, &c.env_overrides, diag_dir)?;
        t.restore(self.shared_params(registry)?, self.fixed_links.clone(), &self.rng, self.iteration, self.env_steps)?;
        Ok(t)
    }
}
