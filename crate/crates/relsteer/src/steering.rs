//! Test-time steering: the frozen classifier as a differentiable loss.
//!
//! For each optimized timestep (descending noise) and each prompted
//! relation (prompt order), the latent takes `iterations` plain
//! gradient steps on `L = −log p̂[target]`, where p̂ comes from running
//! the differentiable generator and the classifier on one tape.
//! Gradients reach only the latent; the classifier weights stay frozen.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Ix2};

use crate::classifier::{
    bind, forward_logits, Checkpoint, ClassifierContext, ClassifierParams,
};
use crate::error::CoreError;
use crate::parser::RelationTriplet;
use crate::synth::{
    generate_on_tape, Latent, Relation, RenderParams, SceneSpec, DEFAULT_NOISE_MAX,
};
use crate::tape::{Real, Tape};

/// Probability floor applied before the log so the loss stays finite.
pub const PROB_FLOOR: f64 = 1e-12;

/// Knobs for one steering run.
#[derive(Debug, Clone, PartialEq)]
pub struct SteerConfig {
    /// Step size of the plain gradient update `z ← z − α∇L`.
    /// Zero is allowed as a diagnostic no-op (losses are still traced).
    pub alpha: f64,
    /// Gradient steps per (timestep, relation) pair.
    pub iterations: usize,
    /// Optimized timesteps, strictly descending (noisiest first).
    pub timesteps: Vec<u16>,
    /// Optimize only at the single noisiest timestep.
    pub initial_noise_only: bool,
    /// Upper bound on relations per prompt.
    pub max_relations: usize,
}

impl SteerConfig {
    /// Default schedule for a timestep grid: the noisy half of the
    /// denoising schedule (`t ≥ T/2`) subsampled to the grid, descending.
    pub fn for_grid(grid: &[u16], t_total: u16) -> Self {
        let mut ts: Vec<u16> = grid.iter().copied().filter(|&t| t >= t_total / 2).collect();
        ts.sort_unstable_by(|a, b| b.cmp(a));
        ts.dedup();
        SteerConfig {
            alpha: 5.0,
            iterations: 15,
            timesteps: ts,
            initial_noise_only: false,
            max_relations: 3,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(CoreError::Config(format!(
                "step size must be finite and non-negative, got {}",
                self.alpha
            )));
        }
        if self.iterations == 0 {
            return Err(CoreError::Config("iterations must be at least 1".into()));
        }
        if self.timesteps.is_empty() {
            return Err(CoreError::Config("timestep set must be non-empty".into()));
        }
        if !self.timesteps.windows(2).all(|w| w[0] > w[1]) {
            return Err(CoreError::Config(
                "timesteps must be strictly descending".into(),
            ));
        }
        if self.max_relations == 0 {
            return Err(CoreError::Config("max_relations must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for SteerConfig {
    fn default() -> Self {
        Self::for_grid(
            &crate::dataset::DEFAULT_TIMESTEPS,
            crate::synth::StackShape::desk().t_total,
        )
    }
}

/// One loss evaluation inside a steering run.
#[derive(Debug, Clone)]
pub struct StepEval {
    /// `−log p̂[target]`, floored at `−log PROB_FLOOR`.
    pub loss: f64,
    pub probs: [f64; 5],
    /// `∂L/∂z`, same shape as the latent.
    pub grad: Array2<f64>,
    pub centers: Vec<(f64, f64)>,
}

/// Renders the scene from `z` at timestep `t`, classifies the
/// (subject, object) stack pair and differentiates the target's
/// negative log-probability back to the latent.
///
/// Generic over the scalar so the 64-bit instantiation can be checked
/// against finite differences.
pub fn loss_and_grad<T: Real>(
    ctx: &ClassifierContext<T>,
    params: &ClassifierParams<T>,
    z: &Array2<f64>,
    template: &SceneSpec,
    slots: (usize, Relation, usize),
    t: u16,
    render: &RenderParams,
    gen_seed: u64,
) -> Result<StepEval, CoreError> {
    let (s_idx, target, o_idx) = slots;
    if !target.is_directional() {
        return Err(CoreError::Contract(
            "steering target must be a directional relation",
        ));
    }
    let k = template.objects.len();
    if s_idx >= k || o_idx >= k {
        return Err(CoreError::Contract("slot index outside the scene template"));
    }
    if z.dim() != (k, 2) {
        return Err(CoreError::ShapeMismatch {
            context: "steering latent",
            lhs: z.shape().to_vec(),
            rhs: vec![k, 2],
        });
    }

    let mut tape = Tape::<T>::new();
    let bound = bind(&mut tape, params);
    let zv = tape.leaf2(z.mapv(T::from_f64));
    // No prompt watermark at steering time: the probe-trained classifier
    // must succeed from geometry alone.
    let gen = generate_on_tape(&mut tape, zv, template, t, render, &[], gen_seed)?;
    let logits = forward_logits(
        &mut tape,
        ctx,
        &bound,
        gen.stacks[s_idx],
        gen.stacks[o_idx],
        t,
    )?;
    let sm = tape.softmax(logits);
    let pv = tape.value2(sm);
    let mut probs = [0.0f64; 5];
    for c in 0..5 {
        probs[c] = pv[[0, c]].to_f64();
    }
    let loss_node = tape.cross_entropy(logits, target as usize)?;
    let loss = tape.scalar_value(loss_node).to_f64().min(-PROB_FLOOR.ln());
    let (grads, _) = tape.backward_wrt(loss_node, &[zv])?;
    let grad = grads[0]
        .clone()
        .into_dimensionality::<Ix2>()
        .expect("latent gradient is 2-D")
        .mapv(|v| v.to_f64());
    let cv = tape.value2(gen.centers);
    let centers = (0..k).map(|i| (cv[[i, 0]].to_f64(), cv[[i, 1]].to_f64())).collect();
    Ok(StepEval {
        loss,
        probs,
        grad,
        centers,
    })
}

/// Convenience single-point evaluation with name binding, matching one
/// steering step's view of the loss.
pub fn loss_at(
    z: &Latent,
    template: &SceneSpec,
    triplet: &RelationTriplet,
    t: u16,
    ckpt: &Checkpoint,
    gen_seed: u64,
) -> Result<StepEval, CoreError> {
    let slots = bind_triplets(template, std::slice::from_ref(triplet))?[0];
    let ctx = ClassifierContext::<f32>::new(ckpt.arch)?;
    let render = RenderParams::new(ckpt.arch.stack, 0.0, DEFAULT_NOISE_MAX);
    loss_and_grad(&ctx, &ckpt.params, &z.z, template, slots, t, &render, gen_seed)
}

/// Resolves triplet object names to template slots by case-insensitive
/// exact category match. Rejects neutral targets and self-relations.
pub fn bind_triplets(
    template: &SceneSpec,
    triplets: &[RelationTriplet],
) -> Result<Vec<(usize, Relation, usize)>, CoreError> {
    let resolve = |name: &str| -> Result<usize, CoreError> {
        let want = name.trim().to_lowercase();
        template
            .objects
            .iter()
            .position(|o| o.category.to_lowercase() == want)
            .ok_or_else(|| CoreError::Binding(name.to_string()))
    };
    let mut out = Vec::with_capacity(triplets.len());
    for tr in triplets {
        if !tr.relation.is_directional() {
            return Err(CoreError::Contract(
                "steering target must be a directional relation",
            ));
        }
        let s = resolve(&tr.subject)?;
        let o = resolve(&tr.object)?;
        if s == o {
            return Err(CoreError::Contract(
                "subject and object bind to the same scene slot",
            ));
        }
        out.push((s, tr.relation, o));
    }
    Ok(out)
}

/// Builds a scene template from prompt triplets: one slot per distinct
/// noun in order of first appearance, seeded extents, and placeholder
/// centers (real positions come from the steered latent). The template
/// carries no ground-truth relations.
pub fn template_from_triplets(
    triplets: &[RelationTriplet],
    seed: u64,
) -> Result<SceneSpec, CoreError> {
    use crate::synth::{derive_seed, ObjectSpec};
    use rand::{Rng, SeedableRng};

    let mut names: Vec<String> = Vec::new();
    for tr in triplets {
        for n in [&tr.subject, &tr.object] {
            let norm = n.trim().to_lowercase();
            if norm.is_empty() {
                return Err(CoreError::Config("empty noun in prompt triplet".into()));
            }
            if !names.contains(&norm) {
                names.push(norm);
            }
        }
    }
    if names.len() < 2 {
        return Err(CoreError::Config(
            "prompt must mention at least two distinct objects".into(),
        ));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, &[91]));
    let objects = names
        .into_iter()
        .map(|category| ObjectSpec {
            category,
            center: (0.5, 0.5),
            extent: (rng.gen_range(0.08..0.24), rng.gen_range(0.08..0.24)),
        })
        .collect();
    Ok(SceneSpec {
        objects,
        relations: Vec::new(),
        seed,
    })
}

/// One recorded loss evaluation: iteration `iteration` of relation
/// `relation_index` at timestep `t`, before the update is applied.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub t: u16,
    pub relation_index: usize,
    pub iteration: usize,
    pub loss: f64,
    pub p_target: f64,
    pub probs: [f64; 5],
    pub centers: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct SteerTrace {
    pub rows: Vec<TraceRow>,
}

impl SteerTrace {
    pub fn write_csv(&self, path: &Path) -> Result<(), CoreError> {
        let k = self.rows.first().map_or(0, |r| r.centers.len());
        let mut out = String::from("t,relation_index,iteration,loss,p_target");
        for c in 0..5 {
            let name = Relation::from_u8(c as u8).unwrap().name().to_lowercase();
            write!(out, ",p_{name}").unwrap();
        }
        for i in 0..k {
            write!(out, ",cx{i},cy{i}").unwrap();
        }
        out.push('\n');
        for r in &self.rows {
            write!(
                out,
                "{},{},{},{},{}",
                r.t, r.relation_index, r.iteration, r.loss, r.p_target
            )
            .unwrap();
            for p in r.probs {
                write!(out, ",{p}").unwrap();
            }
            for &(x, y) in &r.centers {
                write!(out, ",{x},{y}").unwrap();
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// One flat JSON object per line; numbers are plain `f64` reprs.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), CoreError> {
        let mut out = String::new();
        for r in &self.rows {
            let probs: Vec<String> = r.probs.iter().map(|p| format!("{p}")).collect();
            let centers: Vec<String> = r
                .centers
                .iter()
                .map(|(x, y)| format!("[{x},{y}]"))
                .collect();
            writeln!(
                out,
                "{{\"t\":{},\"relation_index\":{},\"iteration\":{},\"loss\":{},\"p_target\":{},\"probs\":[{}],\"centers\":[{}]}}",
                r.t,
                r.relation_index,
                r.iteration,
                r.loss,
                r.p_target,
                probs.join(","),
                centers.join(",")
            )
            .unwrap();
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Result of a steering run. `aborted` carries a description when the
/// loss went non-finite; the trace then holds everything up to and
/// including the offending evaluation, and the latent is the last
/// finite iterate.
#[derive(Debug, Clone)]
pub struct SteerOutcome {
    pub latent: Latent,
    pub trace: SteerTrace,
    pub aborted: Option<String>,
}

/// Steers `z0` so the scene rendered from it satisfies every prompted
/// relation. For each timestep in descending noise order, the targets
/// alternate in prompt order, each receiving `cfg.iterations` plain
/// gradient steps (`z ← z − α∇L`).
pub fn steer(
    z0: &Latent,
    template: &SceneSpec,
    triplets: &[RelationTriplet],
    ckpt: &Checkpoint,
    gen_seed: u64,
    cfg: &SteerConfig,
) -> Result<SteerOutcome, CoreError> {
    cfg.validate()?;
    if triplets.is_empty() {
        return Err(CoreError::Config("no relations to steer toward".into()));
    }
    if triplets.len() > cfg.max_relations {
        return Err(CoreError::Config(format!(
            "{} relations exceed the configured maximum {}",
            triplets.len(),
            cfg.max_relations
        )));
    }
    let slots = bind_triplets(template, triplets)?;
    if z0.n_objects() != template.objects.len() {
        return Err(CoreError::Config(format!(
            "latent has {} objects but the template has {}",
            z0.n_objects(),
            template.objects.len()
        )));
    }
    let t_total = ckpt.arch.stack.t_total;
    if let Some(&bad) = cfg.timesteps.iter().find(|&&t| t >= t_total) {
        return Err(CoreError::Config(format!(
            "timestep {bad} outside schedule [0, {t_total})"
        )));
    }

    let frozen = ckpt.params.clone();
    let ctx = ClassifierContext::<f32>::new(ckpt.arch)?;
    let render = RenderParams::new(ckpt.arch.stack, 0.0, DEFAULT_NOISE_MAX);
    // schnell-style mode: one latent, optimized only where noise starts.
    let schedule: Vec<u16> = if cfg.initial_noise_only {
        vec![cfg.timesteps[0]]
    } else {
        cfg.timesteps.clone()
    };

    let mut z = z0.z.clone();
    let mut trace = SteerTrace::default();
    let mut aborted = None;
    'run: for &t in &schedule {
        for (ri, &slot) in slots.iter().enumerate() {
            for it in 0..cfg.iterations {
                let eval = loss_and_grad(
                    &ctx, &ckpt.params, &z, template, slot, t, &render, gen_seed,
                )?;
                trace.rows.push(TraceRow {
                    t,
                    relation_index: ri,
                    iteration: it,
                    loss: eval.loss,
                    p_target: eval.probs[slot.1 as usize],
                    probs: eval.probs,
                    centers: eval.centers,
                });
                if !eval.loss.is_finite() || eval.grad.iter().any(|g| !g.is_finite()) {
                    aborted = Some(format!(
                        "non-finite loss or gradient at t={t}, relation {ri}, iteration {it}"
                    ));
                    break 'run;
                }
                z.scaled_add(-cfg.alpha, &eval.grad);
            }
        }
    }

    if ckpt.params != frozen {
        return Err(CoreError::Contract(
            "classifier weights changed during steering",
        ));
    }
    Ok(SteerOutcome {
        latent: Latent::new(z)?,
        trace,
        aborted,
    })
}
