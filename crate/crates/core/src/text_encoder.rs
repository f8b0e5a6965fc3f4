//! Multi-level sentence encoder.
//!
//! A BiGRU over the word embeddings gives the global word representations;
//! the action and object levels keep only the rows their role masks select.
//! Each level is then pooled to one vector by multi-head self-attention whose
//! output projection acts on the sequence axis.

use crate::config::RunConfig;
use crate::data::{DatasetRecord, EmbeddingTable};
use crate::error::{Error, Result};
use crate::nn::bigru_encoder;
use crate::numeric::{Graph, Tensor, Var};
use crate::params::{Binding, Level};

/// Model-ready view of one query, padded to `l_max`.
#[derive(Clone, Debug)]
pub struct QueryInputs {
    /// `l_max × d_w`.
    pub embeddings: Tensor,
    pub action_mask: Vec<bool>,
    pub object_mask: Vec<bool>,
    /// `true` for positions holding a real token.
    pub valid: Vec<bool>,
}

impl QueryInputs {
    pub fn from_record(rec: &DatasetRecord, table: &EmbeddingTable, l_max: usize) -> Self {
        let pad = |m: &[bool]| -> Vec<bool> {
            (0..l_max).map(|l| m.get(l).copied().unwrap_or(false)).collect()
        };
        let n = rec.query_tokens.len().min(l_max);
        QueryInputs {
            embeddings: table.embed_tokens(&rec.query_tokens, l_max),
            action_mask: pad(&rec.action_mask),
            object_mask: pad(&rec.object_mask),
            valid: (0..l_max).map(|l| l < n).collect(),
        }
    }

    /// Rows that carry content at `level`.
    pub fn rows(&self, level: Level) -> &[bool] {
        match level {
            Level::Global => &self.valid,
            Level::Action => &self.action_mask,
            Level::Object => &self.object_mask,
        }
    }
}

/// Graph handles for the per-level sentence matrices and pooled vectors.
#[derive(Clone, Debug)]
pub struct SentenceLevels {
    /// `(level, l_max × d_s matrix, d_s pooled vector)` for each active level.
    pub levels: Vec<(Level, Var, Var)>,
}

impl SentenceLevels {
    pub fn matrix(&self, level: Level) -> Option<Var> {
        self.levels.iter().find(|l| l.0 == level).map(|l| l.1)
    }

    pub fn pooled(&self, level: Level) -> Option<Var> {
        self.levels.iter().find(|l| l.0 == level).map(|l| l.2)
    }
}

/// Global word representations `l_max × d_s`.
pub fn encode_global(g: &mut Graph, embeddings: Var, p: &Binding) -> Result<Var> {
    bigru_encoder(g, embeddings, p, "text")
}

/// Zeroes every row whose mask entry is false.
pub fn mask_semantic(g: &mut Graph, s: Var, mask: &[bool]) -> Result<Var> {
    g.mask_rows(s, mask)
}

/// Multi-head self-attention over all `L` rows of `s: L×d_s`, heads
/// concatenated to `L×d_s`, then pooled by `W_O: 1×L` into a `d_s` vector.
pub fn attend_pool(g: &mut Graph, s: Var, p: &Binding, level: Level, heads: usize) -> Result<Var> {
    let d_s = g.value(s).last_dim();
    if heads == 0 || d_s % heads != 0 {
        return Err(Error::Config(format!(
            "d_s = {d_s} is not divisible by {heads} attention heads"
        )));
    }
    let d_h = d_s / heads;
    let inv_sqrt = 1.0 / (d_h as f64).sqrt();
    let tag = level.tag();
    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let wq = p.var(&format!("attn.{tag}.head{i}.q"))?;
        let wk = p.var(&format!("attn.{tag}.head{i}.k"))?;
        let wv = p.var(&format!("attn.{tag}.head{i}.v"))?;
        if g.value(wq).shape() != [d_s, d_h] {
            return Err(Error::Config(format!(
                "attention head weights are {:?}, expected [{d_s}, {d_h}]",
                g.value(wq).shape()
            )));
        }
        let q = g.matmul(s, wq)?;
        let k = g.matmul(s, wk)?;
        let v = g.matmul(s, wv)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, inv_sqrt);
        let attn = g.softmax(scores);
        outs.push(g.matmul(attn, v)?);
    }
    let cat = g.concat_last(&outs)?;
    let w_o = p.var(&format!("attn.{tag}.out"))?;
    let pooled = g.matmul(w_o, cat)?;
    g.reshape(pooled, &[d_s])
}

/// Mean over the rows selected by `rows`; all-false gives the zero vector.
pub fn mean_pool(g: &mut Graph, s: Var, rows: &[bool]) -> Result<Var> {
    let d_s = g.value(s).last_dim();
    let count = rows.iter().filter(|&&r| r).count();
    let weights: Vec<f64> = rows
        .iter()
        .map(|&r| if r { 1.0 / count as f64 } else { 0.0 })
        .collect();
    let w = g.constant(Tensor::matrix(1, rows.len(), weights)?);
    let pooled = g.matmul(w, s)?;
    g.reshape(pooled, &[d_s])
}

/// Builds every active sentence level and its pooled vector.
pub fn encode_sentence(
    g: &mut Graph,
    q: &QueryInputs,
    p: &Binding,
    cfg: &RunConfig,
) -> Result<SentenceLevels> {
    let emb = g.constant(q.embeddings.clone());
    let s_g = encode_global(g, emb, p)?;
    let mut levels = Vec::new();
    for level in Level::active(cfg) {
        let s = match level {
            Level::Global => s_g,
            Level::Action => mask_semantic(g, s_g, &q.action_mask)?,
            Level::Object => mask_semantic(g, s_g, &q.object_mask)?,
        };
        let pooled = if cfg.use_self_attention {
            attend_pool(g, s, p, level, cfg.heads)?
        } else {
            mean_pool(g, s, q.rows(level))?
        };
        levels.push((level, s, pooled));
    }
    Ok(SentenceLevels { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModelParams;

    fn cfg() -> RunConfig {
        RunConfig {
            l_max: 4,
            t_units: 6,
            d_w: 3,
            d_v: 3,
            d_s: 4,
            d_f: 8,
            depth: 1,
            heads: 2,
            filter_sizes: vec![2],
            ..RunConfig::charades()
        }
    }

    fn query(l_max: usize, d_w: usize, len: usize) -> QueryInputs {
        let data = (0..l_max * d_w)
            .map(|i| if i / d_w < len { ((i * 7 % 11) as f64 - 5.0) / 5.0 } else { 0.0 })
            .collect();
        QueryInputs {
            embeddings: Tensor::matrix(l_max, d_w, data).unwrap(),
            action_mask: (0..l_max).map(|l| l == 1).collect(),
            object_mask: (0..l_max).map(|l| l == 0 || l == 2).collect(),
            valid: (0..l_max).map(|l| l < len).collect(),
        }
    }

    #[test]
    fn mask_keeps_only_selected_rows() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::full(&[3, 2], 1.5));
        let all = mask_semantic(&mut g, s, &[true, true, true]).unwrap();
        assert_eq!(g.value(all), g.value(s));
        let none = mask_semantic(&mut g, s, &[false; 3]).unwrap();
        assert!(g.value(none).data().iter().all(|&v| v == 0.0));
        let one = mask_semantic(&mut g, s, &[false, true, false]).unwrap();
        assert_eq!(g.value(one).data(), &[0.0, 0.0, 1.5, 1.5, 0.0, 0.0]);
        let twice = mask_semantic(&mut g, one, &[false, true, false]).unwrap();
        assert_eq!(g.value(twice), g.value(one));
    }

    #[test]
    fn single_position_attention_is_scaled_value() {
        // L = 1, one head: softmax over one position is 1.
        let mut params = ModelParams::new();
        let wv = Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        params.insert("attn.g.head0.q", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        params.insert("attn.g.head0.k", Tensor::matrix(2, 2, vec![-1.0, 0.0, 0.5, 1.0]).unwrap());
        params.insert("attn.g.head0.v", wv.clone());
        params.insert("attn.g.out", Tensor::matrix(1, 1, vec![0.7]).unwrap());
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let s = g.constant(Tensor::matrix(1, 2, vec![1.5, -2.0]).unwrap());
        let out = attend_pool(&mut g, s, &b, Level::Global, 1).unwrap();
        let sv = [1.5 * 0.5 + -2.0 * 2.0, 1.5 * -1.0 + -2.0 * 0.25];
        let got = g.value(out).data();
        assert!((got[0] - 0.7 * sv[0]).abs() < 1e-15);
        assert!((got[1] - 0.7 * sv[1]).abs() < 1e-15);
    }

    #[test]
    fn zero_matrix_pools_to_zero() {
        let params = ModelParams::init(&cfg()).unwrap();
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let s = g.constant(Tensor::zeros(&[4, 4]));
        let out = attend_pool(&mut g, s, &b, Level::Object, 2).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_count_must_divide_width() {
        let params = ModelParams::init(&cfg()).unwrap();
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let s = g.constant(Tensor::zeros(&[4, 4]));
        assert!(matches!(
            attend_pool(&mut g, s, &b, Level::Global, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn tied_output_weights_make_rows_exchangeable() {
        // Attention has no positional signal, so swapping two rows swaps the
        // corresponding attention outputs; the pooled vector is unchanged
        // exactly when their output weights are tied.
        let rows = vec![
            vec![0.2, -0.4, 1.0, 0.5],
            vec![-1.0, 0.3, 0.2, 0.1],
            vec![0.0; 4],
            vec![0.0; 4],
        ];
        let mut swapped = rows.clone();
        swapped.swap(0, 1);
        let run = |params: &ModelParams, rows: &[Vec<f64>]| {
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let s = g.constant(Tensor::from_rows(rows).unwrap());
            let out = attend_pool(&mut g, s, &b, Level::Global, 2).unwrap();
            g.value(out).clone()
        };

        let mut params = ModelParams::init(&cfg()).unwrap();
        params.get_mut("attn.g.out").unwrap().data_mut()[..2].copy_from_slice(&[0.3, 0.3]);
        assert!(run(&params, &rows).max_abs_diff(&run(&params, &swapped)) < 1e-12);

        params.get_mut("attn.g.out").unwrap().data_mut()[..2].copy_from_slice(&[0.9, -0.4]);
        assert!(run(&params, &rows).max_abs_diff(&run(&params, &swapped)) > 1e-6);

        // Swapping the two zero padding rows is a no-op whatever the weights.
        let mut pad_swapped = rows.clone();
        pad_swapped.swap(2, 3);
        assert_eq!(run(&params, &rows), run(&params, &pad_swapped));
    }

    #[test]
    fn empty_masks_give_zero_semantic_vectors() {
        let cfg = cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let mut q = query(4, 3, 3);
        q.action_mask = vec![false; 4];
        q.object_mask = vec![false; 4];
        for attention in [true, false] {
            let cfg = RunConfig { use_self_attention: attention, ..cfg.clone() };
            let params = ModelParams::init(&cfg).unwrap();
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let levels = encode_sentence(&mut g, &q, &b, &cfg).unwrap();
            for lvl in [Level::Action, Level::Object] {
                let v = g.value(levels.pooled(lvl).unwrap());
                assert_eq!(v.shape(), &[4]);
                assert!(v.data().iter().all(|&x| x == 0.0), "{lvl} with attention={attention}");
            }
        }
        drop(params);
    }

    #[test]
    fn pooling_switch_leaves_matrices_untouched() {
        let cfg = cfg();
        let q = query(4, 3, 3);
        let mut mats = Vec::new();
        for attention in [true, false] {
            let c = RunConfig { use_self_attention: attention, ..cfg.clone() };
            let params = ModelParams::init(&c).unwrap();
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let levels = encode_sentence(&mut g, &q, &b, &c).unwrap();
            let m: Vec<Tensor> = Level::ALL
                .iter()
                .map(|&l| g.value(levels.matrix(l).unwrap()).clone())
                .collect();
            for l in Level::ALL {
                assert_eq!(g.value(levels.pooled(l).unwrap()).shape(), &[4]);
            }
            mats.push(m);
        }
        assert_eq!(mats[0], mats[1]);
    }

    #[test]
    fn semantic_rows_are_zero_outside_masks() {
        let cfg = cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let q = query(4, 3, 4);
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let levels = encode_sentence(&mut g, &q, &b, &cfg).unwrap();
        let s_a = g.value(levels.matrix(Level::Action).unwrap());
        let s_o = g.value(levels.matrix(Level::Object).unwrap());
        for l in 0..4 {
            if !q.action_mask[l] {
                assert!(s_a.row(l).iter().all(|&v| v == 0.0));
            }
            if !q.object_mask[l] {
                assert!(s_o.row(l).iter().all(|&v| v == 0.0));
            }
        }
    }
}
