//! Run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ablation switches mirroring the model variants: each flag removes one
/// component when false.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub use_action: bool,
    pub use_object: bool,
    pub use_res_bigru: bool,
    pub use_self_attention: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_action: true,
            use_object: true,
            use_res_bigru: true,
            use_self_attention: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Maximum query length; longer queries are truncated, shorter padded.
    pub l_max: usize,
    /// Number of video units every feature file is resampled to.
    pub t_units: usize,
    /// Word embedding dimension.
    pub d_w: usize,
    /// Visual feature dimension.
    pub d_v: usize,
    pub d_s: usize,
    /// Fused dimension; must equal `2 * d_s`.
    pub d_f: usize,
    /// Depth of the residual BiGRU stack.
    pub depth: usize,
    pub filter_sizes: Vec<usize>,
    pub heads: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the boundary regression loss.
    pub alpha: f64,
    pub seed: u64,
    pub use_action: bool,
    pub use_object: bool,
    pub use_res_bigru: bool,
    pub use_self_attention: bool,
    /// IoU thresholds reported by evaluation.
    pub iou_thresholds: Vec<f64>,
    /// Optional text embedding table; tokens it lacks (or every token, when
    /// absent) get seeded hash vectors.
    pub embeddings: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::charades()
    }
}

impl RunConfig {
    /// Charades-STA style settings (I3D features).
    pub fn charades() -> Self {
        RunConfig {
            l_max: 10,
            t_units: 75,
            d_w: 300,
            d_v: 1024,
            d_s: 256,
            d_f: 512,
            depth: 3,
            filter_sizes: vec![6, 12, 24, 48, 72],
            heads: 8,
            learning_rate: 0.003,
            batch_size: 128,
            epochs: 50,
            alpha: 0.001,
            seed: 1,
            use_action: true,
            use_object: true,
            use_res_bigru: true,
            use_self_attention: true,
            iou_thresholds: vec![0.3, 0.5, 0.7],
            embeddings: None,
        }
    }

    /// ActivityNet-Captions style settings (C3D features).
    pub fn activitynet() -> Self {
        RunConfig {
            l_max: 50,
            t_units: 200,
            d_v: 500,
            filter_sizes: vec![16, 32, 64, 96, 128, 160, 192],
            learning_rate: 0.0003,
            iou_thresholds: vec![0.3, 0.5, 0.7],
            ..Self::charades()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.depth < 1 {
            return fail("fusion depth must be at least 1".into());
        }
        for (name, v) in [
            ("l_max", self.l_max),
            ("t_units", self.t_units),
            ("d_w", self.d_w),
            ("d_v", self.d_v),
            ("d_s", self.d_s),
            ("heads", self.heads),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.d_s % self.heads != 0 {
            return fail(format!(
                "d_s = {} is not divisible by {} attention heads",
                self.d_s, self.heads
            ));
        }
        if self.d_f != 2 * self.d_s {
            return fail(format!(
                "d_f = {} must equal 2 * d_s = {} (video row concatenated with sentence vector)",
                self.d_f,
                2 * self.d_s
            ));
        }
        if self.filter_sizes.is_empty() {
            return fail("at least one filter size is required".into());
        }
        if let Some(w) = self.filter_sizes.iter().find(|&&w| w == 0 || w > self.t_units) {
            return fail(format!(
                "filter size {w} is not in 1..={}; drop it from filter_sizes",
                self.t_units
            ));
        }
        let mut sorted = self.filter_sizes.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|p| p[0] == p[1]) {
            return fail(format!("filter_sizes {:?} contain duplicates", self.filter_sizes));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be a finite value >= 0, got {}", self.alpha));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return fail("iou_thresholds must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            use_action: self.use_action,
            use_object: self.use_object,
            use_res_bigru: self.use_res_bigru,
            use_self_attention: self.use_self_attention,
        }
    }

    pub fn set_ablation(&mut self, a: Ablation) {
        self.use_action = a.use_action;
        self.use_object = a.use_object;
        self.use_res_bigru = a.use_res_bigru;
        self.use_self_attention = a.use_self_attention;
    }

    /// Per-head width of the attention pooling.
    pub fn head_dim(&self) -> usize {
        self.d_s / self.heads
    }
}
