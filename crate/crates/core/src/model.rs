//! The full forward pass: encoders, per-level fusion, heads.

use crate::config::RunConfig;
use crate::data::{load_features, DatasetRecord, EmbeddingTable};
use crate::error::{Error, Result};
use crate::fusion::fuse;
use crate::localizer::{
    admissible_sizes, enumerate_candidates, fuse_scores, rank_level, regress_offsets, Candidate,
    CandidateSet,
};
use crate::numeric::{Graph, Tensor, Var};
use crate::params::{Binding, Level, ModelParams};
use crate::text_encoder::{encode_sentence, QueryInputs};
use crate::video_encoder::encode_video;

/// Everything the model reads for one (video, query) pair.
#[derive(Clone, Debug)]
pub struct SampleInputs {
    pub id: String,
    pub query: QueryInputs,
    /// `T × d_v`.
    pub features: Tensor,
    pub duration: f64,
    /// Ground truth in seconds.
    pub moment: (f64, f64),
}

impl SampleInputs {
    pub fn new(rec: &DatasetRecord, features: Tensor, table: &EmbeddingTable, cfg: &RunConfig) -> Result<Self> {
        if features.ndim() != 2 || features.last_dim() != cfg.d_v {
            return Err(Error::Config(format!(
                "record {}: features have shape {:?} but d_v = {}",
                rec.id,
                features.shape(),
                cfg.d_v
            )));
        }
        Ok(SampleInputs {
            id: rec.id.clone(),
            query: QueryInputs::from_record(rec, table, cfg.l_max),
            features,
            duration: rec.duration_seconds,
            moment: rec.moment,
        })
    }

    pub fn t_units(&self) -> usize {
        self.features.rows()
    }
}

/// The embedding table a configuration asks for: the configured file, or
/// seeded hash vectors for every token.
pub fn embedding_table(cfg: &RunConfig) -> Result<EmbeddingTable> {
    let table = match &cfg.embeddings {
        Some(path) => EmbeddingTable::load(std::path::Path::new(path), cfg.seed)?,
        None => EmbeddingTable::hashed(cfg.d_w, cfg.seed),
    };
    if table.dim() != cfg.d_w {
        return Err(Error::Config(format!(
            "embedding table has dimension {} but d_w = {}",
            table.dim(),
            cfg.d_w
        )));
    }
    Ok(table)
}

/// Reads every record's features, resampled to `t_units`.
pub fn load_samples(records: &[DatasetRecord], cfg: &RunConfig) -> Result<Vec<SampleInputs>> {
    let table = embedding_table(cfg)?;
    records
        .iter()
        .map(|rec| {
            let f = load_features(&rec.feature_path, cfg.t_units)?;
            SampleInputs::new(rec, f, &table, cfg)
        })
        .collect()
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub candidates: Vec<Candidate>,
    pub level_scores: Vec<(Level, Var)>,
    /// Fused scores `r`, length `K`.
    pub scores: Var,
    pub d_start: Var,
    pub d_end: Var,
}

pub fn forward(g: &mut Graph, p: &Binding, cfg: &RunConfig, sample: &SampleInputs) -> Result<Forward> {
    let t = sample.t_units();
    let sizes = admissible_sizes(t, &cfg.filter_sizes)?;
    let candidates = enumerate_candidates(t, &sizes)?;

    let sentence = encode_sentence(g, &sample.query, p, cfg)?;
    let feats = g.constant(sample.features.clone());
    let video = encode_video(g, feats, p, cfg)?;

    let mut level_scores = Vec::new();
    let mut f_global = None;
    for level in Level::active(cfg) {
        let v = video.get(level).expect("active video level");
        let s = sentence.pooled(level).expect("active sentence level");
        let f_hat = fuse(g, v, s, p, level, cfg.depth, cfg.use_res_bigru)?;
        if level == Level::Global {
            f_global = Some(f_hat);
        }
        level_scores.push((level, rank_level(g, f_hat, p, level, &sizes)?));
    }
    let raw: Vec<Var> = level_scores.iter().map(|l| l.1).collect();
    let scores = fuse_scores(g, &raw, p)?;
    let (d_start, d_end) = regress_offsets(g, f_global.expect("global level"), p, &sizes)?;
    Ok(Forward {
        candidates,
        level_scores,
        scores,
        d_start,
        d_end,
    })
}

impl Forward {
    /// Copies the head outputs out of the graph.
    pub fn evaluate(&self, g: &Graph, sample: &SampleInputs) -> CandidateSet {
        CandidateSet {
            t_units: sample.t_units(),
            duration: sample.duration,
            candidates: self.candidates.clone(),
            level_scores: self
                .level_scores
                .iter()
                .map(|&(l, v)| (l, g.value(v).data().to_vec()))
                .collect(),
            scores: g.value(self.scores).data().to_vec(),
            d_start: g.value(self.d_start).data().to_vec(),
            d_end: g.value(self.d_end).data().to_vec(),
        }
    }
}

/// Forward pass without gradients.
pub fn predict(params: &ModelParams, cfg: &RunConfig, sample: &SampleInputs) -> Result<CandidateSet> {
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let out = forward(&mut g, &b, cfg, sample)?;
    Ok(out.evaluate(&g, sample))
}
