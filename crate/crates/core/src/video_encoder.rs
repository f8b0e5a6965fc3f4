//! Multi-level video encoder: one shared BiGRU over the unit features, then
//! per-level ReLU projections for the action and object views.

use crate::config::RunConfig;
use crate::error::Result;
use crate::nn::{affine, bigru_encoder};
use crate::numeric::{Graph, Var};
use crate::params::{Binding, Level};

/// `T × d_s` graph handles, one per active level.
#[derive(Clone, Debug)]
pub struct VideoLevels {
    pub levels: Vec<(Level, Var)>,
}

impl VideoLevels {
    pub fn get(&self, level: Level) -> Option<Var> {
        self.levels.iter().find(|l| l.0 == level).map(|l| l.1)
    }
}

/// Contextualized unit representations `V_g: T × d_s`.
pub fn encode_video_global(g: &mut Graph, features: Var, p: &Binding) -> Result<Var> {
    bigru_encoder(g, features, p, "video")
}

/// Row-wise `ReLU(V_g W + b)` for the action or object level.
pub fn project_semantic(g: &mut Graph, v_g: Var, p: &Binding, level: Level) -> Result<Var> {
    let z = affine(g, v_g, p, &format!("video.proj_{}", level.tag()))?;
    Ok(g.relu(z))
}

pub fn encode_video(g: &mut Graph, features: Var, p: &Binding, cfg: &RunConfig) -> Result<VideoLevels> {
    let v_g = encode_video_global(g, features, p)?;
    let mut levels = Vec::new();
    for level in Level::active(cfg) {
        let v = match level {
            Level::Global => v_g,
            _ => project_semantic(g, v_g, p, level)?,
        };
        levels.push((level, v));
    }
    Ok(VideoLevels { levels })
}
