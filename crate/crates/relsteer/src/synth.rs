//! Synthetic scene and cross-attention generation.
//!
//! Scenes are sets of objects with centers in the unit square (image
//! convention: y grows downward, so ABOVE means smaller y). Each object
//! gets a stack of `L×H` attention maps of size `h×w`: a Gaussian bump
//! at its center times a per-(layer,head) gain, plus timestep noise and
//! an optional relation-word watermark (the leakage channel).
//!
//! Rendering runs through the autodiff tape so the same code path
//! serves both the plain renderer and the differentiable generator that
//! steering optimizes; the two agree bit-for-bit when the decoded
//! latent reproduces the template centers.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::tape::{Real, Tape, Var};

/// The five relation classes. NEUTRAL is a training-only background
/// category and never appears as a steering target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Relation {
    Above = 0,
    Below = 1,
    LeftOf = 2,
    RightOf = 3,
    Neutral = 4,
}

pub const DIRECTIONAL: [Relation; 4] = [
    Relation::Above,
    Relation::Below,
    Relation::LeftOf,
    Relation::RightOf,
];

impl Relation {
    pub fn from_u8(v: u8) -> Result<Relation, CoreError> {
        match v {
            0 => Ok(Relation::Above),
            1 => Ok(Relation::Below),
            2 => Ok(Relation::LeftOf),
            3 => Ok(Relation::RightOf),
            4 => Ok(Relation::Neutral),
            _ => Err(CoreError::Format(format!("invalid relation byte {v}"))),
        }
    }

    pub fn is_directional(self) -> bool {
        self != Relation::Neutral
    }

    pub fn inverse(self) -> Relation {
        match self {
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
            Relation::LeftOf => Relation::RightOf,
            Relation::RightOf => Relation::LeftOf,
            Relation::Neutral => Relation::Neutral,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::LeftOf => "left_of",
            Relation::RightOf => "right_of",
            Relation::Neutral => "neutral",
        }
    }
}

/// Dimensions of an attention stack and of the denoising schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackShape {
    pub layers: usize,
    pub heads: usize,
    pub rows: usize,
    pub cols: usize,
    /// Length T of the denoising schedule; timesteps live in `[0, T)`.
    pub t_total: u16,
}

impl StackShape {
    /// Desk-scale default: L=4, H=4, 16×16 maps, T=50.
    pub fn desk() -> Self {
        StackShape {
            layers: 4,
            heads: 4,
            rows: 16,
            cols: 16,
            t_total: 50,
        }
    }

    pub fn n_maps(&self) -> usize {
        self.layers * self.heads
    }

    pub fn map_len(&self) -> usize {
        self.rows * self.cols
    }
}

/// One object: category name, center and extent in unit coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub category: String,
    pub center: (f64, f64),
    pub extent: (f64, f64),
}

/// A sampled scene; `relations` holds the chained ground-truth triplets
/// `(i, relation_of(c_i, c_j), j)` for consecutive object pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub relations: Vec<(usize, Relation, usize)>,
    pub seed: u64,
}

/// Per-object stack of `L×H` maps at one timestep, stored flattened as
/// `[L·H, h·w]` (row-major within each map).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub object_id: usize,
    pub t: u16,
    pub shape: StackShape,
    pub maps: Array2<f32>,
}

/// Relation-word leakage: one fixed full-field pattern per directional
/// relation, pairwise orthogonalized, unit max amplitude, scaled by λ.
#[derive(Debug, Clone)]
pub struct LeakageConfig {
    pub lambda: f64,
    patterns: Vec<Array1<f64>>,
    map_len: usize,
}

const WATERMARK_SEED: u64 = 0x5749_5245_4c45_414b;

impl LeakageConfig {
    pub fn new(lambda: f64, shape: &StackShape) -> Self {
        assert!(lambda >= 0.0, "leakage strength must be non-negative");
        let n = shape.map_len();
        let mut patterns: Vec<Array1<f64>> = Vec::with_capacity(4);
        for r in 0..4u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(WATERMARK_SEED.wrapping_add(r));
            let mut p = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
            // Orthogonalize against earlier patterns, then renormalize
            // to unit max amplitude.
            for q in &patterns {
                let proj = p.dot(q) / q.dot(q);
                p = &p - &(q * proj);
            }
            let max = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            p.mapv_inplace(|v| v / max);
            patterns.push(p);
        }
        LeakageConfig {
            lambda,
            patterns,
            map_len: n,
        }
    }

    /// The unscaled unit-amplitude pattern for a directional relation.
    pub fn pattern(&self, r: Relation) -> Result<&Array1<f64>, CoreError> {
        if !r.is_directional() {
            return Err(CoreError::Config(
                "no watermark pattern for the neutral relation".into(),
            ));
        }
        Ok(&self.patterns[r as usize])
    }

    pub fn map_len(&self) -> usize {
        self.map_len
    }
}

/// Everything the renderer needs besides the scene itself.
#[derive(Debug, Clone)]
pub struct RenderParams {
    pub shape: StackShape,
    pub leak: LeakageConfig,
    /// Maximum timestep-noise amplitude; a(t) = noise_max · t/(T−1).
    pub noise_max: f64,
}

impl RenderParams {
    pub fn new(shape: StackShape, lambda: f64, noise_max: f64) -> Self {
        RenderParams {
            leak: LeakageConfig::new(lambda, &shape),
            shape,
            noise_max,
        }
    }

    pub fn desk(lambda: f64) -> Self {
        Self::new(StackShape::desk(), lambda, DEFAULT_NOISE_MAX)
    }
}

pub const DEFAULT_NOISE_MAX: f64 = 0.3;

/// Minimum max-norm separation between sampled centers.
pub const CENTER_MARGIN: f64 = 0.15;

/// Relation of `c1` with respect to `c2` along the dominant axis.
/// Image coordinates: y grows downward, so smaller y means ABOVE.
/// Exact |Δx| == |Δy| ties break horizontally.
pub fn relation_of(c1: (f64, f64), c2: (f64, f64)) -> Relation {
    assert!(c1 != c2, "relation_of requires distinct centers");
    let dx = c1.0 - c2.0;
    let dy = c1.1 - c2.1;
    if dx.abs() >= dy.abs() {
        if dx < 0.0 {
            Relation::LeftOf
        } else {
            Relation::RightOf
        }
    } else if dy < 0.0 {
        Relation::Above
    } else {
        Relation::Below
    }
}

/// Deterministic seed derivation (splitmix64 over the parts).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut s = base;
    for &p in parts {
        s = s.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p);
        let mut z = s;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        s = z ^ (z >> 31);
    }
    s
}

/// Samples a scene with distinct categories and well-separated centers.
pub fn sample_scene(
    seed: u64,
    n_objects: usize,
    category_pool: &[&str],
) -> Result<SceneSpec, CoreError> {
    if n_objects < 2 || n_objects > 5 {
        return Err(CoreError::Config(format!(
            "scenes need 2..=5 objects, got {n_objects}"
        )));
    }
    if n_objects > category_pool.len() {
        return Err(CoreError::Config(
            "object count exceeds category pool".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cats: Vec<&&str> = category_pool.choose_multiple(&mut rng, n_objects).collect();

    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(n_objects);
    let mut attempts = 0usize;
    while centers.len() < n_objects {
        attempts += 1;
        if attempts > 1000 {
            return Err(CoreError::Sampling(format!(
                "center rejection sampling exceeded 1000 attempts (seed {seed})"
            )));
        }
        let c = (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9));
        let ok = centers
            .iter()
            .all(|&p| (p.0 - c.0).abs().max((p.1 - c.1).abs()) >= CENTER_MARGIN);
        if ok {
            centers.push(c);
        }
    }

    let objects: Vec<ObjectSpec> = cats
        .iter()
        .zip(&centers)
        .map(|(cat, &center)| ObjectSpec {
            category: cat.to_string(),
            center,
            extent: (rng.gen_range(0.08..0.24), rng.gen_range(0.08..0.24)),
        })
        .collect();

    let relations = (0..n_objects - 1)
        .map(|i| {
            (
                i,
                relation_of(objects[i].center, objects[i + 1].center),
                i + 1,
            )
        })
        .collect();

    Ok(SceneSpec {
        objects,
        relations,
        seed,
    })
}

/// Gaussian width from an object extent.
fn bump_sigma(extent: (f64, f64)) -> f64 {
    (extent.0 + extent.1) / 4.0
}

/// Renders one object's stack on the tape. `cx`/`cy` are single-element
/// nodes; everything else enters as constants, so gradients flow only
/// through the Gaussian bump.
#[allow(clippy::too_many_arguments)]
fn render_object_on_tape<T: Real>(
    tape: &mut Tape<T>,
    cx: Var,
    cy: Var,
    sigma: f64,
    t: u16,
    params: &RenderParams,
    prompt_relations: &[Relation],
    render_seed: u64,
) -> Result<Var, CoreError> {
    let shape = &params.shape;
    if t >= shape.t_total {
        return Err(CoreError::Config(format!(
            "timestep {t} outside schedule [0, {})",
            shape.t_total
        )));
    }
    let n = shape.map_len();
    let (rows, cols) = (shape.rows, shape.cols);

    let gx = Array2::from_shape_fn((1, n), |(_, i)| {
        T::from_f64(((i % cols) as f64 + 0.5) / cols as f64)
    });
    let gy = Array2::from_shape_fn((1, n), |(_, i)| {
        T::from_f64(((i / cols) as f64 + 0.5) / rows as f64)
    });

    let gxv = tape.leaf2(gx);
    let gyv = tape.leaf2(gy);
    let dx = tape.sub_scalar(gxv, cx)?;
    let dx2 = tape.mul(dx, dx)?;
    let dy = tape.sub_scalar(gyv, cy)?;
    let dy2 = tape.mul(dy, dy)?;
    let d2 = tape.add(dx2, dy2)?;
    let scaled = tape.scale(d2, -1.0 / (2.0 * sigma * sigma));
    let bump = tape.exp(scaled);

    // Watermark contribution shared by all maps of this object.
    let mut wm = Array1::<f64>::zeros(n);
    if params.leak.lambda > 0.0 {
        for &r in prompt_relations {
            if r.is_directional() {
                wm = &wm + &(params.leak.pattern(r)? * params.leak.lambda);
            }
        }
    }

    let amp = if shape.t_total > 1 {
        params.noise_max * t as f64 / (shape.t_total - 1) as f64
    } else {
        params.noise_max
    };
    let mut rng = ChaCha8Rng::seed_from_u64(render_seed);
    let gains: Vec<f64> = (0..shape.n_maps()).map(|_| rng.gen_range(0.3..1.0)).collect();

    let mut maps = Vec::with_capacity(shape.n_maps());
    for gain in gains {
        let mut bias = Array2::<T>::zeros((1, n));
        for i in 0..n {
            let noise = if amp > 0.0 { rng.gen_range(-amp..amp) } else { 0.0 };
            bias[[0, i]] = T::from_f64(noise + wm[i]);
        }
        let scaled_bump = tape.scale(bump, gain);
        let biased = {
            let b = tape.leaf2(bias);
            tape.add(scaled_bump, b)?
        };
        maps.push(tape.clamp(biased, 0.0, 1.0));
    }
    tape.stack_rows(&maps)
}

/// Output of [`generate_on_tape`]: one `[L·H, h·w]` node per object
/// plus the decoded-centers node `[K, 2]`.
pub struct GeneratedStacks {
    pub stacks: Vec<Var>,
    pub centers: Var,
}

/// Shared rendering path: decodes centers with a sigmoid from the
/// latent node `z` (`[K, 2]`, columns x then y) and renders every
/// object of `template` at timestep `t`.
pub fn generate_on_tape<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    template: &SceneSpec,
    t: u16,
    params: &RenderParams,
    prompt_relations: &[Relation],
    gen_seed: u64,
) -> Result<GeneratedStacks, CoreError> {
    let k = template.objects.len();
    if tape.value(z).shape() != [k, 2] {
        return Err(CoreError::ShapeMismatch {
            context: "latent",
            lhs: tape.value(z).shape().to_vec(),
            rhs: vec![k, 2],
        });
    }
    let centers = tape.sigmoid(z);
    let mut stacks = Vec::with_capacity(k);
    for (i, obj) in template.objects.iter().enumerate() {
        let row = tape.slice_rows(centers, i, i + 1);
        let cx = tape.slice_cols(row, 0, 1);
        let cy = tape.slice_cols(row, 1, 2);
        let stack = render_object_on_tape(
            tape,
            cx,
            cy,
            bump_sigma(obj.extent),
            t,
            params,
            prompt_relations,
            derive_seed(gen_seed, &[i as u64, t as u64]),
        )?;
        stacks.push(stack);
    }
    Ok(GeneratedStacks { stacks, centers })
}

/// The steerable latent: pre-squash center parameters, one row per
/// object. Decoded centers `σ(z)` lie strictly inside the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub z: Array2<f64>,
}

impl Latent {
    pub fn new(z: Array2<f64>) -> Result<Self, CoreError> {
        if z.ncols() != 2 {
            return Err(CoreError::Config("latent must have shape K×2".into()));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("latent".into()));
        }
        Ok(Latent { z })
    }

    pub fn random(n_objects: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Latent {
            z: Array2::from_shape_fn((n_objects, 2), |_| rng.gen_range(-2.0..2.0)),
        }
    }

    pub fn n_objects(&self) -> usize {
        self.z.nrows()
    }

    pub fn decoded_centers(&self) -> Vec<(f64, f64)> {
        self.z
            .rows()
            .into_iter()
            .map(|r| (sigmoid(r[0]), sigmoid(r[1])))
            .collect()
    }

    /// The latent whose decoded centers equal the given points.
    pub fn from_centers(centers: &[(f64, f64)]) -> Result<Self, CoreError> {
        let mut z = Array2::zeros((centers.len(), 2));
        for (i, c) in centers.iter().enumerate() {
            if !(c.0 > 0.0 && c.0 < 1.0 && c.1 > 0.0 && c.1 < 1.0) {
                return Err(CoreError::Config(
                    "centers must lie strictly inside the unit square".into(),
                ));
            }
            z[[i, 0]] = logit(c.0);
            z[[i, 1]] = logit(c.1);
        }
        Ok(Latent { z })
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Plain (non-differentiable) rendering of every object's stack.
/// Implemented by running the differentiable path on a throwaway tape
/// so the two agree bit-for-bit.
pub fn render_attention(
    scene: &SceneSpec,
    prompt_relation: Relation,
    t: u16,
    params: &RenderParams,
    seed: u64,
) -> Result<Vec<AttentionStack>, CoreError> {
    let mut tape = Tape::<f32>::new();
    let centers: Vec<(f64, f64)> = scene.objects.iter().map(|o| o.center).collect();
    let mut stacks = Vec::with_capacity(centers.len());
    let prompt: &[Relation] = if prompt_relation.is_directional() {
        std::slice::from_ref(&prompt_relation)
    } else {
        &[]
    };
    for (i, obj) in scene.objects.iter().enumerate() {
        let cx = tape.scalar_leaf(centers[i].0 as f32);
        let cy = tape.scalar_leaf(centers[i].1 as f32);
        let stack = render_object_on_tape(
            &mut tape,
            cx,
            cy,
            bump_sigma(obj.extent),
            t,
            params,
            prompt,
            derive_seed(seed, &[i as u64, t as u64]),
        )?;
        let maps = tape
            .value(stack)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        stacks.push(AttentionStack {
            object_id: i,
            t,
            shape: params.shape,
            maps,
        });
    }
    Ok(stacks)
}

/// Differentiable rendering for steering: same path as
/// [`render_attention`], but centers come from `σ(z)` on the caller's
/// tape. Noise and gains are constants under the fixed seed, so
/// gradients flow only through the bumps.
pub fn differentiable_generate<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    template: &SceneSpec,
    t: u16,
    params: &RenderParams,
    prompt_relations: &[Relation],
    gen_seed: u64,
) -> Result<GeneratedStacks, CoreError> {
    generate_on_tape(tape, z, template, t, params, prompt_relations, gen_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::finite_diff_check;
    use ndarray::ArrayD;

    pub const POOL: [&str; 8] = [
        "cat", "dog", "teapot", "frog", "vase", "chair", "duck", "mug",
    ];

    #[test]
    fn relation_of_axis_cases() {
        assert_eq!(relation_of((0.2, 0.5), (0.8, 0.5)), Relation::LeftOf);
        assert_eq!(relation_of((0.5, 0.1), (0.5, 0.9)), Relation::Above);
        assert_eq!(relation_of((0.9, 0.5), (0.1, 0.5)), Relation::RightOf);
        assert_eq!(relation_of((0.5, 0.9), (0.5, 0.2)), Relation::Below);
        // Exact tie breaks horizontally.
        assert_eq!(relation_of((0.2, 0.2), (0.4, 0.4)), Relation::LeftOf);
    }

    #[test]
    fn relation_of_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let c1: (f64, f64) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            let c2: (f64, f64) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            if c1 == c2 {
                continue;
            }
            // Independent re-implementation: compare |Δx| vs |Δy|, then signs.
            let (dx, dy) = (c1.0 - c2.0, c1.1 - c2.1);
            let expect = if dx.abs() > dy.abs() {
                if dx < 0.0 { Relation::LeftOf } else { Relation::RightOf }
            } else if dy.abs() > dx.abs() {
                if dy < 0.0 { Relation::Above } else { Relation::Below }
            } else if dx < 0.0 {
                Relation::LeftOf
            } else {
                Relation::RightOf
            };
            assert_eq!(relation_of(c1, c2), expect);
        }
    }

    #[test]
    fn two_object_scene_records_one_relation() {
        let s = sample_scene(5, 2, &POOL).unwrap();
        assert_eq!(s.relations.len(), 1);
        assert_eq!(s.objects.len(), 2);
    }

    #[test]
    fn scenes_never_duplicate_categories() {
        for seed in 0..10_000u64 {
            let s = sample_scene(seed, 3, &POOL).unwrap();
            let mut cats: Vec<&str> = s.objects.iter().map(|o| o.category.as_str()).collect();
            cats.sort_unstable();
            cats.dedup();
            assert_eq!(cats.len(), 3, "duplicate category at seed {seed}");
        }
    }

    #[test]
    fn scene_relations_are_consistent_and_separated() {
        for seed in 0..500u64 {
            let s = sample_scene(seed, 3, &POOL).unwrap();
            for &(i, r, j) in &s.relations {
                assert_eq!(relation_of(s.objects[i].center, s.objects[j].center), r);
            }
            for a in 0..s.objects.len() {
                for b in (a + 1)..s.objects.len() {
                    let (ca, cb) = (s.objects[a].center, s.objects[b].center);
                    assert!((ca.0 - cb.0).abs().max((ca.1 - cb.1).abs()) >= CENTER_MARGIN);
                }
            }
        }
    }

    #[test]
    fn relation_outcomes_are_near_uniform() {
        let mut counts = [0usize; 4];
        let n = 10_000;
        for seed in 0..n {
            let s = sample_scene(seed as u64, 2, &POOL).unwrap();
            counts[s.relations[0].1 as usize] += 1;
        }
        for (r, &c) in counts.iter().enumerate() {
            let f = c as f64 / n as f64;
            assert!((f - 0.25).abs() <= 0.02, "relation {r}: frequency {f}");
        }
    }

    fn small_params(lambda: f64, noise_max: f64) -> RenderParams {
        RenderParams::new(
            StackShape {
                layers: 2,
                heads: 2,
                rows: 8,
                cols: 8,
                t_total: 50,
            },
            lambda,
            noise_max,
        )
    }

    #[test]
    fn noise_free_argmax_is_at_grid_quantized_center() {
        let params = small_params(0.0, 0.0);
        let scene = SceneSpec {
            objects: vec![
                ObjectSpec {
                    category: "cat".into(),
                    center: (0.3, 0.7),
                    extent: (0.15, 0.15),
                },
                ObjectSpec {
                    category: "dog".into(),
                    center: (0.8, 0.2),
                    extent: (0.15, 0.15),
                },
            ],
            relations: vec![(0, Relation::LeftOf, 1)],
            seed: 0,
        };
        let stacks = render_attention(&scene, Relation::LeftOf, 0, &params, 0).unwrap();
        for (obj, stack) in scene.objects.iter().zip(&stacks) {
            let expect_col = (obj.center.0 * params.shape.cols as f64) as usize;
            let expect_row = (obj.center.1 * params.shape.rows as f64) as usize;
            for map in stack.maps.rows() {
                let argmax = map
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                assert_eq!(argmax % params.shape.cols, expect_col);
                assert_eq!(argmax / params.shape.cols, expect_row);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let params = small_params(0.3, 0.3);
        let scene = sample_scene(7, 2, &POOL).unwrap();
        let a = render_attention(&scene, Relation::Above, 20, &params, 99).unwrap();
        let b = render_attention(&scene, Relation::Above, 20, &params, 99).unwrap();
        assert_eq!(a, b);
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (
            a.iter().sum::<f64>() / n,
            b.iter().sum::<f64>() / n,
        );
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let (va, vb): (f64, f64) = (
            a.iter().map(|x| (x - ma).powi(2)).sum(),
            b.iter().map(|y| (y - mb).powi(2)).sum(),
        );
        cov / (va.sqrt() * vb.sqrt())
    }

    /// Mean correlation of rendered maps against each watermark; the
    /// prompted relation's watermark must dominate (the leak is live).
    #[test]
    fn leak_channel_correlates_with_prompt_watermark() {
        let params = small_params(0.3, 0.2);
        let mut sums = [[0.0f64; 4]; 4]; // [prompted][pattern]
        let mut counts = [0usize; 4];
        for seed in 0..500u64 {
            let scene = sample_scene(seed, 2, &POOL).unwrap();
            let prompted = DIRECTIONAL[(seed % 4) as usize];
            let stacks = render_attention(&scene, prompted, 25, &params, seed).unwrap();
            counts[prompted as usize] += 1;
            let map: Vec<f64> = stacks[0].maps.row(0).iter().map(|&v| v as f64).collect();
            for (pi, r) in DIRECTIONAL.iter().enumerate() {
                let pat: Vec<f64> = params.leak.pattern(*r).unwrap().to_vec();
                sums[prompted as usize][pi] += pearson(&map, &pat);
            }
        }
        for (ri, row) in sums.iter().enumerate() {
            let own = row[ri] / counts[ri] as f64;
            for (pi, &s) in row.iter().enumerate() {
                if pi != ri {
                    assert!(
                        own > s / counts[ri] as f64,
                        "prompted {ri}: own corr {own} not dominant over {pi}"
                    );
                }
            }
            assert!(own > 0.05, "prompted {ri}: own corr too weak ({own})");
        }
    }

    /// With λ=0 the dataset is watermark-free.
    #[test]
    fn zero_lambda_has_no_watermark_correlation() {
        let params = small_params(0.0, 0.2);
        let probe = small_params(1.0, 0.2); // only used for its patterns
        let mut sums = [0.0f64; 4];
        let n = 500;
        for seed in 0..n as u64 {
            let scene = sample_scene(seed, 2, &POOL).unwrap();
            let prompted = DIRECTIONAL[(seed % 4) as usize];
            let stacks = render_attention(&scene, prompted, 25, &params, seed).unwrap();
            let map: Vec<f64> = stacks[0].maps.row(0).iter().map(|&v| v as f64).collect();
            for (pi, r) in DIRECTIONAL.iter().enumerate() {
                let pat: Vec<f64> = probe.leak.pattern(*r).unwrap().to_vec();
                sums[pi] += pearson(&map, &pat);
            }
        }
        for (pi, s) in sums.iter().enumerate() {
            let mean = s / n as f64;
            assert!(mean.abs() <= 0.05, "pattern {pi}: residual correlation {mean}");
        }
    }

    #[test]
    fn watermarks_are_pairwise_decorrelated() {
        let leak = LeakageConfig::new(1.0, &StackShape::desk());
        for i in 0..4 {
            for j in (i + 1)..4 {
                let a: Vec<f64> = leak.pattern(DIRECTIONAL[i]).unwrap().to_vec();
                let b: Vec<f64> = leak.pattern(DIRECTIONAL[j]).unwrap().to_vec();
                assert!(pearson(&a, &b).abs() < 0.05);
            }
            let max = leak
                .pattern(DIRECTIONAL[i])
                .unwrap()
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!((max - 1.0).abs() < 1e-12, "unit max amplitude");
        }
    }

    #[test]
    fn differentiable_path_matches_renderer_bit_for_bit() {
        let params = small_params(0.3, 0.3);
        let scene = sample_scene(13, 2, &POOL).unwrap();
        let rendered = render_attention(&scene, Relation::Above, 30, &params, 42).unwrap();

        // Centers computed through the same f32 sigmoid the tape uses.
        let latent = Latent::from_centers(
            &scene.objects.iter().map(|o| o.center).collect::<Vec<_>>(),
        )
        .unwrap();
        let mut scene_match = scene.clone();
        let mut tape = Tape::<f32>::new();
        let zf = latent.z.mapv(|v| v as f32);
        // Round-trip through the f32 sigmoid so σ(z) is exactly the center
        // value the renderer saw.
        for (obj, zrow) in scene_match.objects.iter_mut().zip(zf.rows()) {
            let cx = 1.0f32 / (1.0 + (-zrow[0]).exp());
            let cy = 1.0f32 / (1.0 + (-zrow[1]).exp());
            obj.center = (cx as f64, cy as f64);
        }
        let rendered2 = render_attention(&scene_match, Relation::Above, 30, &params, 42).unwrap();

        let z = tape.leaf(zf.into_dyn());
        let gen = differentiable_generate(
            &mut tape,
            z,
            &scene_match,
            30,
            &params,
            &[Relation::Above],
            42,
        )
        .unwrap();
        for (var, stack) in gen.stacks.iter().zip(&rendered2) {
            let got = tape.value(*var);
            for (a, b) in got.iter().zip(stack.maps.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "bit mismatch");
            }
        }
        // Sanity: the nudged scene stays close to the original render.
        for (s1, s2) in rendered.iter().zip(&rendered2) {
            let diff: f32 = s1
                .maps
                .iter()
                .zip(s2.maps.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max);
            assert!(diff < 0.2);
        }
    }

    #[test]
    fn generate_gradient_matches_finite_differences() {
        let params = small_params(0.2, 0.3);
        let scene = sample_scene(21, 2, &POOL).unwrap();
        let z0 = Latent::random(2, 3).z;

        let f = |p: &[ArrayD<f64>]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let z = tape.leaf(p[0].clone());
            let gen = differentiable_generate(
                &mut tape,
                z,
                &scene,
                25,
                &params,
                &[Relation::LeftOf],
                7,
            )
            .unwrap();
            // Peak-cell value of the first map of the first object.
            let v = tape.value2(gen.stacks[0]);
            let c = scene.objects[0].center;
            let col = (c.0 * params.shape.cols as f64) as usize;
            let row = (c.1 * params.shape.rows as f64) as usize;
            v[[0, row * params.shape.cols + col]]
        };

        // Analytic gradient of the same scalar.
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(z0.clone().into_dyn());
        let gen = differentiable_generate(
            &mut tape,
            z,
            &scene,
            25,
            &params,
            &[Relation::LeftOf],
            7,
        )
        .unwrap();
        let c = scene.objects[0].center;
        let col = (c.0 * params.shape.cols as f64) as usize;
        let row = (c.1 * params.shape.rows as f64) as usize;
        let idx = row * params.shape.cols + col;
        let cell = tape.slice_cols(gen.stacks[0], idx, idx + 1);
        let cell_row = tape.slice_rows(cell, 0, 1);
        let scalar = tape.sum(cell_row);
        let (grads, _) = tape.backward_wrt(scalar, &[z]).unwrap();

        let err = finite_diff_check(&f, &[z0.into_dyn()], &grads, 1e-5, 4, 0).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn moving_center_right_shifts_mass_right() {
        let params = small_params(0.0, 0.0);
        let scene = SceneSpec {
            objects: vec![ObjectSpec {
                category: "cat".into(),
                center: (0.5, 0.5),
                extent: (0.2, 0.2),
            }],
            relations: vec![],
            seed: 0,
        };
        let mass_left = |center_x: f64| -> f64 {
            let mut s = scene.clone();
            s.objects[0].center.0 = center_x;
            let stacks = render_attention(&s, Relation::Neutral, 0, &params, 1).unwrap();
            let cols = params.shape.cols;
            stacks[0]
                .maps
                .row(0)
                .iter()
                .enumerate()
                .filter(|(i, _)| i % cols < cols / 2)
                .map(|(_, &v)| v as f64)
                .sum()
        };
        assert!(mass_left(0.7) < mass_left(0.5));
    }
}
