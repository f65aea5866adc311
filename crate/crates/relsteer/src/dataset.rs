//! Dual-inversion dataset construction and the on-disk record format.
//!
//! With dual inversion ON every scene contributes two records per
//! timestep: one rendered under the correct relation word (positive)
//! and one under a randomly chosen wrong one (negative). Both carry the
//! geometric relation as label — the watermark never touches labels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::synth::{
    derive_seed, render_attention, sample_scene, RenderParams, Relation, SceneSpec, StackShape,
    DIRECTIONAL,
};

/// One training record: the subject and object stacks of a scene at one
/// timestep, the relation word present at inversion time, and the
/// geometric label.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub subject: Array2<f32>,
    pub object: Array2<f32>,
    pub prompt_relation: Relation,
    pub label: Relation,
    pub t: u16,
    pub scene_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: StackShape,
    pub lambda: f32,
    pub dual: bool,
    pub records: Vec<DatasetRecord>,
}

/// Default category pool (benchmark-style everyday objects).
pub const DEFAULT_POOL: [&str; 17] = [
    "backpack", "bowl", "cat", "sneakers", "duck", "robot", "teapot", "vase", "corgi", "mug",
    "furby", "teddy bear", "frog", "mouse", "table", "chair", "umbrella",
];

/// Timestep grid mirroring a subsampled T=50 schedule.
pub const DEFAULT_TIMESTEPS: [u16; 6] = [5, 10, 15, 20, 25, 49];

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub scenes: usize,
    pub timesteps: Vec<u16>,
    pub lambda: f64,
    pub noise_max: f64,
    pub dual: bool,
    /// Fraction of `scenes` rendered without any directional watermark
    /// and labeled NEUTRAL.
    pub neutral_frac: f64,
    /// Probe mode: emit only mismatched-prompt (negative) records.
    pub negatives_only: bool,
    pub shape: StackShape,
    pub seed: u64,
    pub categories: Vec<String>,
}

impl DataConfig {
    pub fn new(scenes: usize, lambda: f64, seed: u64) -> Self {
        DataConfig {
            scenes,
            timesteps: DEFAULT_TIMESTEPS.to_vec(),
            lambda,
            noise_max: crate::synth::DEFAULT_NOISE_MAX,
            dual: true,
            neutral_frac: 0.10,
            negatives_only: false,
            shape: StackShape::desk(),
            seed,
            categories: DEFAULT_POOL.iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn wrong_relation(rng: &mut ChaCha8Rng, label: Relation) -> Relation {
    loop {
        let r = DIRECTIONAL[rng.gen_range(0..4)];
        if r != label {
            return r;
        }
    }
}

fn record_from(
    scene: &SceneSpec,
    prompt: Relation,
    label: Relation,
    t: u16,
    params: &RenderParams,
) -> Result<DatasetRecord, CoreError> {
    let stacks = render_attention(scene, prompt, t, params, scene.seed)?;
    let (si, oi) = (scene.relations[0].0, scene.relations[0].2);
    Ok(DatasetRecord {
        subject: stacks[si].maps.clone(),
        object: stacks[oi].maps.clone(),
        prompt_relation: prompt,
        label,
        t,
        scene_seed: scene.seed,
    })
}

/// Builds the dataset in memory. Record order is canonical (scene-major,
/// then timestep, positive before negative, neutrals last).
pub fn build_dataset(cfg: &DataConfig) -> Result<Dataset, CoreError> {
    if cfg.timesteps.is_empty() {
        return Err(CoreError::Config("timestep set must be non-empty".into()));
    }
    let params = RenderParams::new(cfg.shape, cfg.lambda, cfg.noise_max);
    let pool: Vec<&str> = cfg.categories.iter().map(|s| s.as_str()).collect();
    let mut records = Vec::new();

    for i in 0..cfg.scenes {
        let scene = sample_scene(derive_seed(cfg.seed, &[1, i as u64]), 2, &pool)?;
        let label = scene.relations[0].1;
        let mut neg_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2, i as u64]));
        for &t in &cfg.timesteps {
            if !cfg.negatives_only {
                records.push(record_from(&scene, label, label, t, &params)?);
            }
            if cfg.dual || cfg.negatives_only {
                let wrong = wrong_relation(&mut neg_rng, label);
                records.push(record_from(&scene, wrong, label, t, &params)?);
            }
        }
    }

    if !cfg.negatives_only {
        let n_neutral = (cfg.neutral_frac * cfg.scenes as f64).round() as usize;
        for j in 0..n_neutral {
            let scene = sample_scene(derive_seed(cfg.seed, &[3, j as u64]), 2, &pool)?;
            for &t in &cfg.timesteps {
                records.push(record_from(
                    &scene,
                    Relation::Neutral,
                    Relation::Neutral,
                    t,
                    &params,
                )?);
            }
        }
    }

    Ok(Dataset {
        shape: cfg.shape,
        lambda: cfg.lambda as f32,
        dual: cfg.dual,
        records,
    })
}

const MAGIC: &[u8; 5] = b"ATTN1";
const VERSION: u32 = 1;
const FLAG_DUAL: u32 = 1;

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for v in [
            self.shape.layers as u32,
            self.shape.heads as u32,
            self.shape.rows as u32,
            self.shape.cols as u32,
            self.shape.t_total as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.lambda.to_le_bytes())?;
        let flags = if self.dual { FLAG_DUAL } else { 0 };
        w.write_all(&flags.to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for r in &self.records {
            for stack in [&r.subject, &r.object] {
                for v in stack.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.write_all(&[r.prompt_relation as u8, r.label as u8])?;
            w.write_all(&r.t.to_le_bytes())?;
            w.write_all(&r.scene_seed.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset, CoreError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CoreError::Format("bad dataset magic".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32, CoreError> {
            r.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CoreError::Format(format!("unsupported version {version}")));
        }
        let layers = read_u32(&mut r)? as usize;
        let heads = read_u32(&mut r)? as usize;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let t_total = read_u32(&mut r)? as u16;
        let mut f32buf = [0u8; 4];
        r.read_exact(&mut f32buf)?;
        let lambda = f32::from_le_bytes(f32buf);
        let flags = {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            u32::from_le_bytes(b)
        };
        let count = {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            u64::from_le_bytes(b)
        };
        let shape = StackShape {
            layers,
            heads,
            rows,
            cols,
            t_total,
        };
        let stack_len = shape.n_maps() * shape.map_len();
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let read_stack = |r: &mut BufReader<File>| -> Result<Array2<f32>, CoreError> {
                let mut buf = vec![0u8; stack_len * 4];
                r.read_exact(&mut buf)?;
                let vals: Vec<f32> = buf
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Array2::from_shape_vec((shape.n_maps(), shape.map_len()), vals)
                    .map_err(|_| CoreError::Format("bad stack shape".into()))
            };
            let subject = read_stack(&mut r)?;
            let object = read_stack(&mut r)?;
            let mut tail = [0u8; 12];
            r.read_exact(&mut tail)?;
            records.push(DatasetRecord {
                subject,
                object,
                prompt_relation: Relation::from_u8(tail[0])?,
                label: Relation::from_u8(tail[1])?,
                t: u16::from_le_bytes([tail[2], tail[3]]),
                scene_seed: u64::from_le_bytes(tail[4..12].try_into().unwrap()),
            });
        }
        Ok(Dataset {
            shape,
            lambda,
            dual: flags & FLAG_DUAL != 0,
            records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(scenes: usize, dual: bool) -> DataConfig {
        let mut cfg = DataConfig::new(scenes, 0.3, 99);
        cfg.shape = StackShape {
            layers: 2,
            heads: 2,
            rows: 8,
            cols: 8,
            t_total: 50,
        };
        cfg.timesteps = vec![5, 25, 49];
        cfg.dual = dual;
        cfg
    }

    #[test]
    fn dual_on_record_counts() {
        let mut cfg = small_cfg(100, true);
        cfg.timesteps = DEFAULT_TIMESTEPS.to_vec();
        let ds = build_dataset(&cfg).unwrap();
        let directional: Vec<_> = ds
            .records
            .iter()
            .filter(|r| r.label.is_directional())
            .collect();
        assert_eq!(directional.len(), 1200);
        let neutral = ds.records.len() - directional.len();
        assert_eq!(neutral, 10 * cfg.timesteps.len()); // 10% neutral quota
    }

    #[test]
    fn dual_on_exactly_half_positive() {
        let ds = build_dataset(&small_cfg(40, true)).unwrap();
        let dir: Vec<_> = ds.records.iter().filter(|r| r.label.is_directional()).collect();
        let pos = dir
            .iter()
            .filter(|r| r.prompt_relation == r.label)
            .count();
        assert_eq!(pos * 2, dir.len());
    }

    #[test]
    fn dual_off_all_positive() {
        let ds = build_dataset(&small_cfg(40, false)).unwrap();
        for r in ds.records.iter().filter(|r| r.label.is_directional()) {
            assert_eq!(r.prompt_relation, r.label);
        }
    }

    #[test]
    fn labels_follow_geometry_never_the_prompt() {
        let cfg = small_cfg(30, true);
        let ds = build_dataset(&cfg).unwrap();
        let pool: Vec<&str> = cfg.categories.iter().map(|s| s.as_str()).collect();
        for r in ds.records.iter().filter(|r| r.label.is_directional()) {
            let scene = sample_scene(r.scene_seed, 2, &pool).unwrap();
            assert_eq!(r.label, scene.relations[0].1);
        }
    }

    #[test]
    fn negatives_only_probe_has_no_matching_prompt() {
        let mut cfg = small_cfg(30, true);
        cfg.negatives_only = true;
        let ds = build_dataset(&cfg).unwrap();
        assert!(!ds.records.is_empty());
        for r in &ds.records {
            assert!(r.prompt_relation.is_directional());
            assert_ne!(r.prompt_relation, r.label);
        }
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let ds = build_dataset(&small_cfg(6, true)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.attn");
        ds.save(&path).unwrap();
        let loaded = Dataset::load(&path).unwrap();
        assert_eq!(ds.shape, loaded.shape);
        assert_eq!(ds.lambda.to_bits(), loaded.lambda.to_bits());
        assert_eq!(ds.dual, loaded.dual);
        assert_eq!(ds.records.len(), loaded.records.len());
        for (a, b) in ds.records.iter().zip(&loaded.records) {
            assert_eq!(a.prompt_relation, b.prompt_relation);
            assert_eq!(a.label, b.label);
            assert_eq!(a.t, b.t);
            assert_eq!(a.scene_seed, b.scene_seed);
            for (x, y) in a.subject.iter().zip(b.subject.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in a.object.iter().zip(b.object.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn rejects_corrupt_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.attn");
        std::fs::write(&path, b"NOPE!rest").unwrap();
        assert!(Dataset::load(&path).is_err());
    }
}
