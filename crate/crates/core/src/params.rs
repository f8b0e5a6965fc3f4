//! The learnable parameter registry.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::embedding::fnv1a;
use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};

/// Representation granularity shared by the sentence and the video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Global,
    Action,
    Object,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Global, Level::Action, Level::Object];

    pub fn tag(self) -> &'static str {
        match self {
            Level::Global => "g",
            Level::Action => "a",
            Level::Object => "o",
        }
    }

    /// Levels present under a configuration; global is always on.
    pub fn active(cfg: &RunConfig) -> Vec<Level> {
        let mut v = vec![Level::Global];
        if cfg.use_action {
            v.push(Level::Action);
        }
        if cfg.use_object {
            v.push(Level::Object);
        }
        v
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Global => "global",
            Level::Action => "action",
            Level::Object => "object",
        })
    }
}

/// Ordered name → tensor registry. Iteration order is insertion order, which
/// fixes checkpoint layout and gradient reduction order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// All values concatenated in registry order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Overwrites all values from a flat buffer in registry order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(Error::dim(
                "assign_flat",
                format!("{} values for {} parameters", flat.len(), self.scalar_count()),
            ));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.names.iter().zip(&mut self.tensors) {
            if name.starts_with(prefix) {
                t.data_mut().fill(0.0);
            }
        }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_layout(&self, other: &ModelParams) -> Result<()> {
        if self.names != other.names {
            let missing: Vec<_> = self.names.iter().filter(|n| other.get(n).is_none()).collect();
            let extra: Vec<_> = other.names.iter().filter(|n| self.get(n).is_none()).collect();
            return Err(Error::Config(format!(
                "parameter layout mismatch; missing {missing:?}, unexpected {extra:?}"
            )));
        }
        for (name, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            if a.shape() != b.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(())
    }

    /// Registers every parameter as a grad-requiring leaf on `g`.
    pub fn bind(&self, g: &mut Graph) -> Binding<'_> {
        let vars = self.tensors.iter().map(|t| g.param(t.clone())).collect();
        Binding { params: self, vars }
    }

    /// Builds the full registry for `cfg` with seeded uniform
    /// `±1/√fan_in` initialization. Each tensor's generator is keyed by
    /// `(seed, name)`, so values do not depend on registration order.
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            params: ModelParams::new(),
            seed: cfg.seed,
        };
        let (d_s, d_f) = (cfg.d_s, cfg.d_f);
        let levels = Level::active(cfg);

        b.bigru("text", cfg.d_w, d_s);
        b.affine("text.fuse", 2 * d_s, d_s);

        b.bigru("video", cfg.d_v, d_s);
        b.affine("video.fuse", 2 * d_s, d_s);
        for &lvl in &levels {
            if lvl != Level::Global {
                b.affine(&format!("video.proj_{}", lvl.tag()), d_s, d_s);
            }
        }

        if cfg.use_self_attention {
            let d_h = cfg.head_dim();
            for &lvl in &levels {
                for i in 0..cfg.heads {
                    for part in ["q", "k", "v"] {
                        b.uniform(&format!("attn.{}.head{i}.{part}", lvl.tag()), &[d_s, d_h], d_s);
                    }
                }
                b.uniform(&format!("attn.{}.out", lvl.tag()), &[1, cfg.l_max], cfg.l_max);
            }
        }

        for &lvl in &levels {
            let p = format!("fusion.{}", lvl.tag());
            if cfg.use_res_bigru {
                for m in 0..cfg.depth {
                    b.bigru(&format!("{p}.block{m}"), d_f, d_f / 2);
                    b.affine(&format!("{p}.block{m}.affine"), d_f, d_f);
                }
            } else {
                b.affine(&format!("{p}.affine"), d_f, d_f);
            }
        }

        for &lvl in &levels {
            for &w in &cfg.filter_sizes {
                b.conv(&format!("rank.{}.w{w}", lvl.tag()), w, d_f, 1);
            }
        }
        b.affine("score_fuse", levels.len(), 1);
        for side in ["start", "end"] {
            for &w in &cfg.filter_sizes {
                b.conv(&format!("offset.{side}.w{w}"), w, d_f, 1);
            }
        }
        Ok(b.params)
    }
}

struct Builder {
    params: ModelParams,
    seed: u64,
}

impl Builder {
    fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let key = fnv1a(name.as_bytes()) ^ self.seed.wrapping_mul(0xd134_2543_de82_ef95);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.params
            .insert(name, Tensor::new(shape.to_vec(), data).expect("param shape"));
    }

    fn affine(&mut self, prefix: &str, d_in: usize, d_out: usize) {
        self.uniform(&format!("{prefix}.w"), &[d_in, d_out], d_in);
        self.uniform(&format!("{prefix}.b"), &[d_out], d_in);
    }

    fn gru(&mut self, prefix: &str, d_in: usize, hidden: usize) {
        self.uniform(&format!("{prefix}.w"), &[d_in, 3 * hidden], d_in);
        self.uniform(&format!("{prefix}.u"), &[hidden, 3 * hidden], hidden);
        self.uniform(&format!("{prefix}.b"), &[3 * hidden], hidden);
    }

    fn bigru(&mut self, prefix: &str, d_in: usize, hidden: usize) {
        self.gru(&format!("{prefix}.gru_fwd"), d_in, hidden);
        self.gru(&format!("{prefix}.gru_bwd"), d_in, hidden);
    }

    fn conv(&mut self, prefix: &str, w: usize, c_in: usize, c_out: usize) {
        let fan_in = w * c_in;
        self.uniform(&format!("{prefix}.kernel"), &[w, c_in, c_out], fan_in);
        self.uniform(&format!("{prefix}.bias"), &[c_out], fan_in);
    }
}

/// Parameters registered on one graph.
pub struct Binding<'p> {
    params: &'p ModelParams,
    vars: Vec<Var>,
}

impl Binding<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("model has no parameter named {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }
}
