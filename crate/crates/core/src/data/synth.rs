//! Seeded synthetic datasets with a planted, query-keyed signal.
//!
//! Each record draws an (action, object) pair from the lexicon, phrases a
//! query around it, and plants that pair's feature pattern inside the
//! ground-truth span of an otherwise noisy feature matrix. Some records also
//! plant a different pair elsewhere as a distractor, so localizing requires
//! reading the query.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

use super::embedding::fnv1a;
use super::features::write_features;
use super::lexicon::{Lexicon, ACTIONS, OBJECTS, SUBJECTS};
use super::manifest::{write_manifest, DatasetRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub t_units: usize,
    pub d_v: usize,
    /// Standard deviation of the uniform background noise.
    pub noise: f64,
    pub distractor_prob: f64,
    pub min_len_units: usize,
    pub max_len_units: usize,
    pub min_duration: f64,
    pub max_duration: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            t_units: 75,
            d_v: 16,
            noise: 0.5,
            distractor_prob: 0.5,
            min_len_units: 6,
            max_len_units: 30,
            min_duration: 20.0,
            max_duration: 40.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticRecord {
    pub record: DatasetRecord,
    pub features: Tensor,
    pub action: usize,
    pub object: usize,
    /// Planted span in units, end exclusive.
    pub units: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub options: SynthOptions,
    pub records: Vec<SyntheticRecord>,
}

fn centroid(seed: u64, kind: &str, index: usize, d_v: usize) -> Vec<f64> {
    let key = fnv1a(format!("{kind}/{index}").as_bytes()) ^ seed.rotate_left(17);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let a = 3f64.sqrt();
    (0..d_v).map(|_| rng.gen_range(-a..a)).collect()
}

/// Feature pattern planted for an (action, object) pair: the normalized sum
/// of per-word centroids, so pairs sharing a word are correlated.
pub fn pair_pattern(seed: u64, action: usize, object: usize, d_v: usize) -> Vec<f64> {
    let a = centroid(seed, "action", action, d_v);
    let o = centroid(seed, "object", object, d_v);
    a.iter().zip(&o).map(|(x, y)| (x + y) / 2f64.sqrt()).collect()
}

fn noise(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let a = sigma * 3f64.sqrt();
    if a == 0.0 {
        0.0
    } else {
        rng.gen_range(-a..a)
    }
}

/// Generates `n_records` records; a pure function of its arguments.
pub fn synthesize(seed: u64, n_records: usize, opts: &SynthOptions) -> Result<SyntheticDataset> {
    if n_records == 0 {
        return Err(Error::Config("n_records must be at least 1".into()));
    }
    let t = opts.t_units;
    if opts.min_len_units == 0 || opts.min_len_units > opts.max_len_units || opts.max_len_units > t
    {
        return Err(Error::Config(format!(
            "span lengths {}..={} do not fit in {t} units",
            opts.min_len_units, opts.max_len_units
        )));
    }
    if !(opts.min_duration > 0.0 && opts.min_duration <= opts.max_duration) {
        return Err(Error::Config("invalid duration range".into()));
    }
    let lexicon = Lexicon::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_records);

    for i in 0..n_records {
        let action = rng.gen_range(0..ACTIONS.len());
        let object = rng.gen_range(0..OBJECTS.len());
        let subject = SUBJECTS[rng.gen_range(0..SUBJECTS.len())];
        let det = if rng.gen_bool(0.5) { "the" } else { "a" };
        let mut tokens: Vec<String> = ["a", subject, ACTIONS[action], det, OBJECTS[object]]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if rng.gen_bool(0.3) {
            tokens.extend(["in", "the", "room"].iter().map(|s| s.to_string()));
        }
        let (action_mask, object_mask) = lexicon.tag(&tokens);

        let len = rng.gen_range(opts.min_len_units..=opts.max_len_units);
        let start = rng.gen_range(0..=t - len);
        let end = start + len;

        let mut data = vec![0.0; t * opts.d_v];
        for v in data.iter_mut() {
            *v = noise(&mut rng, opts.noise);
        }
        let mut plant = |from: usize, to: usize, pattern: &[f64]| {
            for u in from..to {
                for (x, p) in data[u * opts.d_v..(u + 1) * opts.d_v].iter_mut().zip(pattern) {
                    *x += p;
                }
            }
        };
        plant(start, end, &pair_pattern(seed, action, object, opts.d_v));

        if rng.gen_bool(opts.distractor_prob) {
            let (other_a, other_o) = loop {
                let a = rng.gen_range(0..ACTIONS.len());
                let o = rng.gen_range(0..OBJECTS.len());
                if (a, o) != (action, object) {
                    break (a, o);
                }
            };
            let d_len = rng.gen_range(opts.min_len_units..=opts.max_len_units);
            let mut slots = Vec::new();
            if start >= d_len {
                slots.push((0, start - d_len));
            }
            if t - end >= d_len {
                slots.push((end, t - d_len));
            }
            if !slots.is_empty() {
                let (lo, hi) = slots[rng.gen_range(0..slots.len())];
                let d_start = rng.gen_range(lo..=hi);
                plant(d_start, d_start + d_len, &pair_pattern(seed, other_a, other_o, opts.d_v));
            }
        }

        let duration = (rng.gen_range(opts.min_duration..=opts.max_duration) * 100.0).round() / 100.0;
        let sec = |u: usize| u as f64 * duration / t as f64;
        let id = format!("synth_{i:04}");
        let record = DatasetRecord {
            feature_path: PathBuf::from(format!("features/{id}.vfea")),
            id,
            duration_seconds: duration,
            query_tokens: tokens,
            action_mask,
            object_mask,
            moment: (sec(start), sec(end)),
        };
        record.validate()?;
        records.push(SyntheticRecord {
            record,
            features: Tensor::matrix(t, opts.d_v, data)?,
            action,
            object,
            units: (start, end),
        });
    }
    Ok(SyntheticDataset {
        seed,
        options: opts.clone(),
        records,
    })
}

impl SyntheticDataset {
    /// Writes `manifest.jsonl` and `features/<id>.vfea` under `out`. Returns
    /// the manifest path.
    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let feat_dir = out.join("features");
        fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        for r in &self.records {
            write_features(&out.join(&r.record.feature_path), &r.features)?;
        }
        let manifest = out.join("manifest.jsonl");
        let records: Vec<DatasetRecord> = self.records.iter().map(|r| r.record.clone()).collect();
        write_manifest(&manifest, &records)?;
        Ok(manifest)
    }
}
