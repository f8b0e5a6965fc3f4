//! Multi-scale moment candidates, per-level ranking heads, score fusion and
//! boundary regression.
//!
//! Candidate `k` of scale `w` at position `p` covers units `p..=p+w-1`.
//! Candidates are ordered by ascending scale, then ascending position, and
//! every head emits its outputs in that order.

use std::io::Write;

use crate::error::{Error, Result};
use crate::numeric::{Graph, Var};
use crate::params::{Binding, Level};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Candidate {
    /// First unit, inclusive.
    pub start: usize,
    /// Last unit, inclusive.
    pub end: usize,
    /// Window length `w` of the scale that produced this candidate.
    pub width: usize,
}

/// Filter sizes usable on `t` units, ascending. Oversized sizes are dropped
/// with a warning.
pub fn admissible_sizes(t: usize, sizes: &[usize]) -> Result<Vec<usize>> {
    let mut kept: Vec<usize> = Vec::with_capacity(sizes.len());
    for &w in sizes {
        if w == 0 || w > t {
            log::warn!("dropping filter size {w}: sequence has only {t} units");
        } else if !kept.contains(&w) {
            kept.push(w);
        }
    }
    if kept.is_empty() {
        return Err(Error::Config(format!(
            "no filter size in {sizes:?} fits a sequence of {t} units"
        )));
    }
    kept.sort_unstable();
    Ok(kept)
}

pub fn enumerate_candidates(t: usize, sizes: &[usize]) -> Result<Vec<Candidate>> {
    let sizes = admissible_sizes(t, sizes)?;
    Ok(sizes
        .iter()
        .flat_map(|&w| {
            (0..=t - w).map(move |p| Candidate {
                start: p,
                end: p + w - 1,
                width: w,
            })
        })
        .collect())
}

/// Per-scale convolutions `conv_w(F)` stacked into one `K` vector.
fn scale_heads(g: &mut Graph, f: Var, p: &Binding, prefix: &str, sizes: &[usize]) -> Result<Var> {
    let mut cols = Vec::with_capacity(sizes.len());
    for &w in sizes {
        let kernel = p.var(&format!("{prefix}.w{w}.kernel"))?;
        let bias = p.var(&format!("{prefix}.w{w}.bias"))?;
        cols.push(g.conv1d(f, kernel, bias)?);
    }
    let stacked = g.concat_rows(&cols)?;
    let k = g.value(stacked).len();
    g.reshape(stacked, &[k])
}

/// Level scores `r^x = sigmoid(Rank^x(F̂^x))`, length `K`.
pub fn rank_level(g: &mut Graph, f_hat: Var, p: &Binding, level: Level, sizes: &[usize]) -> Result<Var> {
    let logits = scale_heads(g, f_hat, p, &format!("rank.{}", level.tag()), sizes)?;
    Ok(g.sigmoid(logits))
}

/// Fused score `r_k = sigmoid(f_h([r_k^x for each active level]))`.
pub fn fuse_scores(g: &mut Graph, level_scores: &[Var], p: &Binding) -> Result<Var> {
    let Some(&first) = level_scores.first() else {
        return Err(Error::Config("score fusion needs at least one level".into()));
    };
    let k = g.value(first).len();
    let mut cols = Vec::with_capacity(level_scores.len());
    for &r in level_scores {
        cols.push(g.reshape(r, &[k, 1])?);
    }
    let x = g.concat_last(&cols)?;
    let w = p.var("score_fuse.w")?;
    let b = p.var("score_fuse.b")?;
    let xw = g.matmul(x, w)?;
    let z = g.add(xw, b)?;
    let z = g.reshape(z, &[k])?;
    Ok(g.sigmoid(z))
}

/// Start and end offsets in units, read from the global level only.
pub fn regress_offsets(g: &mut Graph, f_hat_g: Var, p: &Binding, sizes: &[usize]) -> Result<(Var, Var)> {
    let d_s = scale_heads(g, f_hat_g, p, "offset.start", sizes)?;
    let d_e = scale_heads(g, f_hat_g, p, "offset.end", sizes)?;
    Ok((d_s, d_e))
}

/// `(t^s + d^s, t^e + d^e)` without any constraint.
pub fn raw_refined(c: &Candidate, d_s: f64, d_e: f64) -> (f64, f64) {
    (c.start as f64 + d_s, c.end as f64 + d_e)
}

/// Refined boundary clamped to `[0, T-1]` and put in order.
pub fn refine(c: &Candidate, d_s: f64, d_e: f64, t: usize) -> (f64, f64) {
    let (s, e) = raw_refined(c, d_s, d_e);
    let hi = (t - 1) as f64;
    let (s, e) = (s.clamp(0.0, hi), e.clamp(0.0, hi));
    if s > e {
        (e, s)
    } else {
        (s, e)
    }
}

/// Maps a unit-coordinate span to seconds. The end unit is inclusive, so it
/// contributes its full width: `(s·D/T, (e+1)·D/T)`.
pub fn units_to_seconds(span: (f64, f64), t: usize, duration: f64) -> (f64, f64) {
    let unit = duration / t as f64;
    (span.0 * unit, (span.1 + 1.0) * unit)
}

/// Evaluated heads for one sample, in candidate order.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub t_units: usize,
    pub duration: f64,
    pub candidates: Vec<Candidate>,
    pub level_scores: Vec<(Level, Vec<f64>)>,
    pub scores: Vec<f64>,
    pub d_start: Vec<f64>,
    pub d_end: Vec<f64>,
}

/// One ranked prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moment {
    pub k: usize,
    pub score: f64,
    /// Refined span in units.
    pub units: (f64, f64),
    pub seconds: (f64, f64),
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn refined(&self, k: usize) -> (f64, f64) {
        refine(&self.candidates[k], self.d_start[k], self.d_end[k], self.t_units)
    }

    fn moment(&self, k: usize) -> Moment {
        let units = self.refined(k);
        Moment {
            k,
            score: self.scores[k],
            units,
            seconds: units_to_seconds(units, self.t_units, self.duration),
        }
    }

    /// Candidate indices by descending fused score; equal scores keep
    /// enumeration order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        order
    }

    /// The `top_m` best refined moments, in seconds.
    pub fn localize(&self, top_m: usize) -> Vec<Moment> {
        self.ranking()
            .into_iter()
            .take(top_m)
            .map(|k| self.moment(k))
            .collect()
    }

    fn level(&self, level: Level) -> Option<&[f64]> {
        self.level_scores
            .iter()
            .find(|l| l.0 == level)
            .map(|l| l.1.as_slice())
    }

    /// Writes one CSV row per candidate. Scores of disabled levels are left
    /// empty.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "k,t_s,t_e,scale,r_g,r_a,r_o,r,d_s,d_e,xi_s_sec,xi_e_sec")?;
        let levels = Level::ALL.map(|l| self.level(l));
        for (k, c) in self.candidates.iter().enumerate() {
            let m = self.moment(k);
            let lv: Vec<String> = levels
                .iter()
                .map(|l| l.map(|s| s[k].to_string()).unwrap_or_default())
                .collect();
            writeln!(
                out,
                "{k},{},{},{},{},{},{},{},{},{},{},{}",
                c.start,
                c.end,
                c.width,
                lv[0],
                lv[1],
                lv[2],
                self.scores[k],
                self.d_start[k],
                self.d_end[k],
                m.seconds.0,
                m.seconds.1
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::numeric::{sigmoid, Tensor};
    use crate::params::ModelParams;

    #[test]
    fn candidate_counts() {
        let c = enumerate_candidates(75, &[6, 12, 24, 48, 72]).unwrap();
        assert_eq!(c.len(), 218);
        let c = enumerate_candidates(10, &[4]).unwrap();
        assert_eq!(c.len(), 7);
        assert_eq!((c[0].start, c[0].end), (0, 3));
        assert_eq!((c[6].start, c[6].end), (6, 9));
        let c = enumerate_candidates(8, &[8]).unwrap();
        assert_eq!(c, vec![Candidate { start: 0, end: 7, width: 8 }]);
    }

    #[test]
    fn oversized_sizes_are_dropped() {
        let c = enumerate_candidates(10, &[12, 4]).unwrap();
        assert_eq!(c.len(), 7);
        assert!(matches!(enumerate_candidates(3, &[4, 5]), Err(Error::Config(_))));
    }

    #[test]
    fn scales_are_enumerated_in_ascending_order() {
        let c = enumerate_candidates(6, &[3, 2]).unwrap();
        let widths: Vec<usize> = c.iter().map(|c| c.width).collect();
        assert_eq!(widths, [2, 2, 2, 2, 2, 3, 3, 3, 3]);
    }

    fn cfg() -> RunConfig {
        RunConfig {
            l_max: 4,
            t_units: 6,
            d_w: 3,
            d_v: 3,
            d_s: 2,
            d_f: 4,
            depth: 1,
            heads: 1,
            filter_sizes: vec![3, 2],
            ..RunConfig::charades()
        }
    }

    fn f_hat() -> Tensor {
        Tensor::matrix(6, 4, (0..24).map(|i| ((i * 7 % 17) as f64 - 8.0) / 6.0).collect()).unwrap()
    }

    fn window_dot(f: &Tensor, kernel: &Tensor, bias: f64, c: &Candidate) -> f64 {
        let d = f.last_dim();
        let mut acc = bias;
        for j in 0..c.width {
            for i in 0..d {
                acc += f.at(c.start + j, i) * kernel.data()[j * d + i];
            }
        }
        acc
    }

    #[test]
    fn heads_match_windowed_dot_products() {
        let params = ModelParams::init(&cfg()).unwrap();
        let f = f_hat();
        let cands = enumerate_candidates(6, &cfg().filter_sizes).unwrap();
        let sizes = admissible_sizes(6, &cfg().filter_sizes).unwrap();
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let fv = g.constant(f.clone());
        let r = rank_level(&mut g, fv, &b, Level::Action, &sizes).unwrap();
        let (ds, de) = regress_offsets(&mut g, fv, &b, &sizes).unwrap();
        assert_eq!(g.value(r).len(), cands.len());
        for (k, c) in cands.iter().enumerate() {
            let head = |prefix: &str| {
                let kern = params.get(&format!("{prefix}.w{}.kernel", c.width)).unwrap();
                let bias = params.get(&format!("{prefix}.w{}.bias", c.width)).unwrap().data()[0];
                window_dot(&f, kern, bias, c)
            };
            assert!((g.value(r).data()[k] - sigmoid(head("rank.a"))).abs() < 1e-14);
            assert!((g.value(ds).data()[k] - head("offset.start")).abs() < 1e-13);
            assert!((g.value(de).data()[k] - head("offset.end")).abs() < 1e-13);
        }
    }

    #[test]
    fn zero_heads_give_half_scores_and_zero_offsets() {
        let mut params = ModelParams::init(&cfg()).unwrap();
        params.zero_prefix("rank.");
        params.zero_prefix("offset.");
        let sizes = admissible_sizes(6, &cfg().filter_sizes).unwrap();
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let fv = g.constant(f_hat());
        let r = rank_level(&mut g, fv, &b, Level::Global, &sizes).unwrap();
        let (ds, _) = regress_offsets(&mut g, fv, &b, &sizes).unwrap();
        assert!(g.value(r).data().iter().all(|&x| x == 0.5));
        assert!(g.value(ds).data().iter().all(|&x| x == 0.0));

        params.get_mut("rank.g.w2.bias").unwrap().data_mut()[0] = -40.0;
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let fv = g.constant(f_hat());
        let r = rank_level(&mut g, fv, &b, Level::Global, &sizes).unwrap();
        assert!(g.value(r).data()[..5].iter().all(|&x| x < 1e-15));
    }

    #[test]
    fn score_fusion_selects_and_averages() {
        let mut params = ModelParams::init(&cfg()).unwrap();
        params.insert("score_fuse.w", Tensor::matrix(3, 1, vec![1.0, 0.0, 0.0]).unwrap());
        params.insert("score_fuse.b", Tensor::zeros(&[1]));
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let rg = g.constant(Tensor::vector(vec![0.2, 0.9]).unwrap());
        let ra = g.constant(Tensor::vector(vec![0.7, 0.1]).unwrap());
        let ro = g.constant(Tensor::vector(vec![0.4, 0.3]).unwrap());
        let r = fuse_scores(&mut g, &[rg, ra, ro], &b).unwrap();
        assert_eq!(g.value(r).data(), &[sigmoid(0.2), sigmoid(0.9)]);

        params.insert("score_fuse.w", Tensor::zeros(&[3, 1]));
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let h = g.constant(Tensor::full(&[4], 0.5));
        let r = fuse_scores(&mut g, &[h, h, h], &b).unwrap();
        assert!(g.value(r).data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn fused_score_increases_with_positive_weights() {
        let mut params = ModelParams::init(&cfg()).unwrap();
        params.insert("score_fuse.w", Tensor::matrix(3, 1, vec![0.8, 1.5, 0.3]).unwrap());
        let run = |params: &ModelParams, a: f64| {
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let rg = g.constant(Tensor::vector(vec![0.3]).unwrap());
            let ra = g.constant(Tensor::vector(vec![a]).unwrap());
            let ro = g.constant(Tensor::vector(vec![0.6]).unwrap());
            let r = fuse_scores(&mut g, &[rg, ra, ro], &b).unwrap();
            g.value(r).data()[0]
        };
        assert!(run(&params, 0.4) < run(&params, 0.41));
    }

    #[test]
    fn refine_adds_clamps_and_orders() {
        let c = Candidate { start: 10, end: 20, width: 11 };
        assert_eq!(refine(&c, 0.0, 0.0, 75), (10.0, 20.0));
        assert_eq!(refine(&c, 1.5, -2.0, 75), (11.5, 18.0));
        assert_eq!(refine(&c, 70.0, 60.0, 75), (74.0, 74.0));
        assert_eq!(refine(&c, 5.0, -8.0, 75), (12.0, 15.0));
        assert_eq!(refine(&c, -30.0, 0.0, 75), (0.0, 20.0));
    }

    #[test]
    fn full_span_covers_whole_duration() {
        let (s, e) = units_to_seconds((0.0, 74.0), 75, 29.76);
        assert_eq!(s, 0.0);
        assert!((e - 29.76).abs() < 1e-12);
    }

    fn set(scores: Vec<f64>) -> CandidateSet {
        let candidates = enumerate_candidates(6, &[6, 5, 4]).unwrap();
        let n = candidates.len();
        assert_eq!(scores.len(), n);
        CandidateSet {
            t_units: 6,
            duration: 12.0,
            level_scores: vec![(Level::Global, scores.clone())],
            candidates,
            scores,
            d_start: vec![0.0; n],
            d_end: vec![0.0; n],
        }
    }

    #[test]
    fn ranking_is_by_score_then_index() {
        let s = set(vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4]);
        assert_eq!(s.ranking(), [0, 1, 2, 3, 4, 5]);
        let s = set(vec![0.5; 6]);
        assert_eq!(s.ranking(), [0, 1, 2, 3, 4, 5]);
        let s = set(vec![0.1, 0.7, 0.7, 0.2, 0.9, 0.7]);
        assert_eq!(s.ranking(), [4, 1, 2, 5, 3, 0]);
        let top = s.localize(2);
        assert_eq!(top.len(), 2);
        assert_eq!(top[0].k, 4);
        // Candidate 4 is units 1..=5 of 6 over 12 s.
        assert_eq!(top[0].seconds, (2.0, 12.0));
    }

    #[test]
    fn csv_has_header_and_one_row_per_candidate() {
        let s = set(vec![0.5; 6]);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "k,t_s,t_e,scale,r_g,r_a,r_o,r,d_s,d_e,xi_s_sec,xi_e_sec");
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[1], "0,0,3,4,0.5,,,0.5,0,0,0,8");
        assert!(lines.iter().skip(1).all(|l| l.split(',').count() == 12));
    }
}
