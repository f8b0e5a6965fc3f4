//! Video–sentence fusion through a stack of residual BiGRU blocks.

use crate::error::{Error, Result};
use crate::nn::{affine, bigru};
use crate::numeric::{Graph, Var};
use crate::params::{Binding, Level};

/// `F_0`: every video row concatenated with the pooled sentence vector.
pub fn build_f0(g: &mut Graph, v_x: Var, s_x: Var) -> Result<Var> {
    let (vs, ss) = (g.value(v_x).shape().to_vec(), g.value(s_x).shape().to_vec());
    if vs.len() != 2 || ss.len() != 1 || vs[1] != ss[0] {
        return Err(Error::dim(
            "build_f0",
            format!("video rows {vs:?} and sentence vector {ss:?} disagree on d_s"),
        ));
    }
    let tiled = g.stack_rows(&vec![s_x; vs[0]])?;
    g.concat_last(&[v_x, tiled])
}

/// `F_m = ReLU(f_m(BiGRU_m(F_{m-1})) + F_{m-1})`.
pub fn res_block(g: &mut Graph, f_prev: Var, p: &Binding, prefix: &str) -> Result<Var> {
    let d_f = g.value(f_prev).last_dim();
    if d_f % 2 != 0 {
        return Err(Error::Config(format!(
            "fusion width d_f = {d_f} must be even for the bidirectional blocks"
        )));
    }
    let h = bigru(g, f_prev, p, prefix)?;
    let h = affine(g, h, p, &format!("{prefix}.affine"))?;
    let sum = g.add(h, f_prev)?;
    Ok(g.relu(sum))
}

/// Fused sequence `F̂: T × d_f` for one level. With `use_res_bigru` off the
/// stack is replaced by a single `ReLU(F_0 W + b)`.
pub fn fuse(
    g: &mut Graph,
    v_x: Var,
    s_x: Var,
    p: &Binding,
    level: Level,
    depth: usize,
    use_res_bigru: bool,
) -> Result<Var> {
    let prefix = format!("fusion.{}", level.tag());
    let f0 = build_f0(g, v_x, s_x)?;
    if !use_res_bigru {
        let z = affine(g, f0, p, &format!("{prefix}.affine"))?;
        return Ok(g.relu(z));
    }
    if depth == 0 {
        return Err(Error::Config("fusion depth must be at least 1".into()));
    }
    let mut f = f0;
    for m in 0..depth {
        f = res_block(g, f, p, &format!("{prefix}.block{m}"))?;
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::numeric::{sigmoid, Tensor};
    use crate::params::ModelParams;

    fn cfg(depth: usize) -> RunConfig {
        RunConfig {
            l_max: 4,
            t_units: 5,
            d_w: 3,
            d_v: 3,
            d_s: 3,
            d_f: 6,
            depth,
            heads: 1,
            filter_sizes: vec![2],
            ..RunConfig::charades()
        }
    }

    fn inputs() -> (Tensor, Tensor) {
        let v = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 - 5.5) / 3.0).collect()).unwrap();
        let s = Tensor::vector(vec![0.5, -1.25, 2.0]).unwrap();
        (v, s)
    }

    #[test]
    fn f0_rows_are_concatenations() {
        let (v, s) = inputs();
        let mut g = Graph::new();
        let vv = g.constant(v.clone());
        let sv = g.constant(s.clone());
        let f0 = build_f0(&mut g, vv, sv).unwrap();
        assert_eq!(g.value(f0).shape(), &[4, 6]);
        for t in 0..4 {
            let row = g.value(f0).row(t);
            assert_eq!(&row[..3], v.row(t));
            assert_eq!(&row[3..], s.data());
        }
        let bad = g.constant(Tensor::zeros(&[2]));
        assert!(build_f0(&mut g, vv, bad).is_err());
    }

    #[test]
    fn zero_blocks_reduce_to_relu_of_f0() {
        let (v, s) = inputs();
        for depth in 1..=3 {
            let mut params = ModelParams::init(&cfg(depth)).unwrap();
            params.zero_prefix("fusion.");
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let vv = g.constant(v.clone());
            let sv = g.constant(s.clone());
            let f0 = build_f0(&mut g, vv, sv).unwrap();
            let expect = g.value(f0).map(|x| x.max(0.0));
            let out = fuse(&mut g, vv, sv, &b, Level::Global, depth, true).unwrap();
            assert_eq!(g.value(out), &expect, "depth {depth}");
        }
    }

    #[test]
    fn odd_width_is_rejected() {
        let params = ModelParams::init(&cfg(1)).unwrap();
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[2, 5]));
        assert!(matches!(res_block(&mut g, x, &b, "fusion.g.block0"), Err(Error::Config(_))));
    }

    /// Plain-loop GRU used as an independent reference.
    fn gru_ref(p: &ModelParams, prefix: &str, xs: &[Vec<f64>], reverse: bool) -> Vec<Vec<f64>> {
        let w = p.get(&format!("{prefix}.w")).unwrap();
        let u = p.get(&format!("{prefix}.u")).unwrap();
        let b = p.get(&format!("{prefix}.b")).unwrap();
        let (d_in, h) = (w.shape()[0], u.shape()[0]);
        let mut state = vec![0.0; h];
        let mut out = vec![vec![]; xs.len()];
        let order: Vec<usize> = if reverse {
            (0..xs.len()).rev().collect()
        } else {
            (0..xs.len()).collect()
        };
        for t in order {
            let x = &xs[t];
            let xw = |c: usize| (0..d_in).map(|i| x[i] * w.at(i, c)).sum::<f64>();
            let hu = |c: usize, v: &[f64]| (0..h).map(|i| v[i] * u.at(i, c)).sum::<f64>();
            let z: Vec<f64> = (0..h).map(|j| sigmoid(xw(j) + hu(j, &state) + b.data()[j])).collect();
            let r: Vec<f64> =
                (0..h).map(|j| sigmoid(xw(h + j) + hu(h + j, &state) + b.data()[h + j])).collect();
            let rh: Vec<f64> = (0..h).map(|j| r[j] * state[j]).collect();
            let n: Vec<f64> = (0..h)
                .map(|j| (xw(2 * h + j) + hu(2 * h + j, &rh) + b.data()[2 * h + j]).tanh())
                .collect();
            state = (0..h).map(|j| (1.0 - z[j]) * state[j] + z[j] * n[j]).collect();
            out[t] = state.clone();
        }
        out
    }

    #[test]
    fn block_matches_stepwise_oracle() {
        let params = ModelParams::init(&cfg(1)).unwrap();
        let (v, s) = inputs();
        let f0: Vec<Vec<f64>> = (0..4)
            .map(|t| v.row(t).iter().chain(s.data()).copied().collect())
            .collect();
        let fwd = gru_ref(&params, "fusion.g.block0.gru_fwd", &f0, false);
        let bwd = gru_ref(&params, "fusion.g.block0.gru_bwd", &f0, true);
        let aw = params.get("fusion.g.block0.affine.w").unwrap();
        let ab = params.get("fusion.g.block0.affine.b").unwrap();

        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let vv = g.constant(v.clone());
        let sv = g.constant(s.clone());
        let out = fuse(&mut g, vv, sv, &b, Level::Global, 1, true).unwrap();
        for t in 0..4 {
            let hcat: Vec<f64> = fwd[t].iter().chain(&bwd[t]).copied().collect();
            for j in 0..6 {
                let hj = (0..6).map(|i| hcat[i] * aw.at(i, j)).sum::<f64>() + ab.data()[j];
                let expect = (hj + f0[t][j]).max(0.0);
                let got = g.value(out).at(t, j);
                assert!((got - expect).abs() < 1e-13, "t={t} j={j}: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn ablated_stack_is_one_affine() {
        let c = RunConfig { use_res_bigru: false, ..cfg(3) };
        let params = ModelParams::init(&c).unwrap();
        let fusion: Vec<_> = params.names().iter().filter(|n| n.starts_with("fusion.g.")).collect();
        assert_eq!(fusion, ["fusion.g.affine.w", "fusion.g.affine.b"]);
        let (v, s) = inputs();
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let vv = g.constant(v);
        let sv = g.constant(s);
        let out = fuse(&mut g, vv, sv, &b, Level::Global, 3, false).unwrap();
        assert_eq!(g.value(out).shape(), &[4, 6]);
        assert!(g.value(out).data().iter().all(|&x| x >= 0.0));
    }
}
