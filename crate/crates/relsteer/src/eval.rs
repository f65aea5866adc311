//! Spatial-compliance metrics over final scenes: a centroid-based
//! positional rule, a stricter dominant-axis/IoU rule, all-hold
//! multi-relation scoring and report generation.
//!
//! Both pairwise rules are declared bit-exactly here and frozen by the
//! brute-force oracle tests; margins and thresholds are configurable
//! but default to the values the acceptance suite pins.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::CoreError;
use crate::parser::RelationTriplet;
use crate::synth::{AttentionStack, Relation, SceneSpec};

/// Margin the centroid delta must exceed on the relation's axis.
pub const DEFAULT_MARGIN: f64 = 0.0;
/// IoU above which the dominant-axis rule rejects the pair.
pub const DEFAULT_IOU_MAX: f64 = 0.1;
/// Threshold fraction of the map maximum for attention detection.
pub const ATTN_THRESHOLD: f64 = 0.5;

/// Axis-aligned box in normalized scene coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, CoreError> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if !(x_min < x_max && y_min < y_max) {
            return Err(CoreError::Config(format!("degenerate box {b:?}")));
        }
        if [x_min, y_min, x_max, y_max]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(CoreError::Config(format!(
                "box coordinates must lie in [0,1]: {b:?}"
            )));
        }
        Ok(b)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let iy = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// One detected object; `bbox` is `None` for the missing-object marker
/// (entity neglect — always scored as failure, never skipped).
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub name: String,
    pub bbox: Option<BBox>,
}

/// Ground-truth boxes `center ± extent/2` for every template object at
/// the given decoded centers, clipped to the unit square.
pub fn detect_oracle(
    template: &SceneSpec,
    centers: &[(f64, f64)],
) -> Result<Vec<Detection>, CoreError> {
    if centers.len() != template.objects.len() {
        return Err(CoreError::Config(format!(
            "{} centers for {} template objects",
            centers.len(),
            template.objects.len()
        )));
    }
    template
        .objects
        .iter()
        .zip(centers)
        .map(|(obj, &(cx, cy))| {
            let (hx, hy) = (obj.extent.0 / 2.0, obj.extent.1 / 2.0);
            let bbox = BBox::new(
                (cx - hx).clamp(0.0, 1.0),
                (cy - hy).clamp(0.0, 1.0),
                (cx + hx).clamp(0.0, 1.0),
                (cy + hy).clamp(0.0, 1.0),
            )?;
            Ok(Detection {
                name: obj.category.clone(),
                bbox: Some(bbox),
            })
        })
        .collect()
}

/// Detects one object from its attention stack: mean map, threshold at
/// `ATTN_THRESHOLD · max`, largest 4-connected component → box. An
/// all-zero map yields the missing-object marker.
pub fn detect_attn(stack: &AttentionStack, name: &str) -> Detection {
    let (rows, cols) = (stack.shape.rows, stack.shape.cols);
    let n = rows * cols;
    // Mean over the L·H maps.
    let mut mean = vec![0.0f64; n];
    for map in stack.maps.rows() {
        for (m, &v) in mean.iter_mut().zip(map.iter()) {
            *m += v as f64;
        }
    }
    let scale = 1.0 / stack.maps.nrows() as f64;
    for m in &mut mean {
        *m *= scale;
    }
    let max = mean.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Detection {
            name: name.to_string(),
            bbox: None,
        };
    }
    let thresh = ATTN_THRESHOLD * max;
    let mask: Vec<bool> = mean.iter().map(|&v| v >= thresh).collect();

    // Largest 4-connected component by BFS.
    let mut seen = vec![false; n];
    let mut best: Vec<usize> = Vec::new();
    let mut queue = Vec::new();
    for start in 0..n {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        queue.clear();
        queue.push(start);
        seen[start] = true;
        while let Some(i) = queue.pop() {
            comp.push(i);
            let (r, c) = (i / cols, i % cols);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push(j);
                }
            };
            if r > 0 {
                visit(i - cols);
            }
            if r + 1 < rows {
                visit(i + cols);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < cols {
                visit(i + 1);
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    let (mut r0, mut r1, mut c0, mut c1) = (rows, 0usize, cols, 0usize);
    for &i in &best {
        let (r, c) = (i / cols, i % cols);
        r0 = r0.min(r);
        r1 = r1.max(r + 1);
        c0 = c0.min(c);
        c1 = c1.max(c + 1);
    }
    let bbox = BBox::new(
        c0 as f64 / cols as f64,
        r0 as f64 / rows as f64,
        c1 as f64 / cols as f64,
        r1 as f64 / rows as f64,
    )
    .expect("component bounds are a valid box");
    Detection {
        name: name.to_string(),
        bbox: Some(bbox),
    }
}

/// Signed centroid deltas `(on_axis, off_axis)` for `b1 r b2`, positive
/// when the relation's sign is satisfied. Image convention: y grows
/// downward, so ABOVE means the subject centroid has smaller y.
fn axis_deltas(b1: &BBox, b2: &BBox, r: Relation) -> (f64, f64) {
    let (c1, c2) = (b1.center(), b2.center());
    let dx = c2.0 - c1.0;
    let dy = c2.1 - c1.1;
    match r {
        Relation::LeftOf => (dx, dy),
        Relation::RightOf => (-dx, dy),
        Relation::Above => (dy, dx),
        Relation::Below => (-dy, dx),
        Relation::Neutral => unreachable!("directional relations only"),
    }
}

/// Centroid rule with an explicit margin: correct sign on the
/// relation's axis, |Δ| strictly above `margin`, and |Δ| strictly
/// above the off-axis magnitude.
pub fn geneval_position_margin(b1: &BBox, b2: &BBox, r: Relation, margin: f64) -> bool {
    assert!(r.is_directional(), "directional relations only");
    let (on, off) = axis_deltas(b1, b2, r);
    on > margin && on > off.abs()
}

/// Centroid rule at the default margin.
pub fn geneval_position(b1: &BBox, b2: &BBox, r: Relation) -> bool {
    geneval_position_margin(b1, b2, r, DEFAULT_MARGIN)
}

/// Dominant-axis rule with an explicit IoU gate: correct sign, the
/// relation's axis strictly dominates the other, and IoU below the gate.
pub fn t2i_spatial_iou(b1: &BBox, b2: &BBox, r: Relation, iou_max: f64) -> bool {
    assert!(r.is_directional(), "directional relations only");
    let (on, off) = axis_deltas(b1, b2, r);
    on > 0.0 && on > off.abs() && b1.iou(b2) < iou_max
}

/// Dominant-axis rule at the default IoU gate.
pub fn t2i_spatial(b1: &BBox, b2: &BBox, r: Relation) -> bool {
    t2i_spatial_iou(b1, b2, r, DEFAULT_IOU_MAX)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Geneval,
    T2i,
}

impl Metric {
    pub fn holds(self, b1: &BBox, b2: &BBox, r: Relation) -> bool {
        match self {
            Metric::Geneval => geneval_position(b1, b2, r),
            Metric::T2i => t2i_spatial(b1, b2, r),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Geneval => "geneval_position",
            Metric::T2i => "t2i_spatial",
        }
    }
}

/// One evaluated generation: the prompted triplets plus the detections
/// of every scene object.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub triplets: Vec<RelationTriplet>,
    pub detections: Vec<Detection>,
}

impl RunRecord {
    fn find(&self, name: &str) -> Option<&Detection> {
        let want = name.trim().to_lowercase();
        self.detections
            .iter()
            .find(|d| d.name.to_lowercase() == want)
    }

    /// All-hold scoring: every triplet satisfied, every referenced
    /// object detected. Missing anything scores false, never skips.
    pub fn passes(&self, metric: Metric) -> bool {
        !self.triplets.is_empty()
            && self.triplets.iter().all(|t| {
                let (Some(s), Some(o)) = (self.find(&t.subject), self.find(&t.object)) else {
                    return false;
                };
                let (Some(b1), Some(b2)) = (s.bbox, o.bbox) else {
                    return false;
                };
                metric.holds(&b1, &b2, t.relation)
            })
    }
}

/// Accuracy cell of the multi-relation table.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub n_objects: usize,
    pub n_relations: usize,
    pub passed: usize,
    pub total: usize,
    pub accuracy: f64,
    /// Independence estimate `acc_k ≈ acc_{k−1} · acc_2/acc_1` from the
    /// measured lower-k accuracies; `None` below k=3 or when the
    /// required accuracies are absent or zero-denominator.
    pub extrapolated: Option<f64>,
}

/// Per-relation breakdown over individual triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationStats {
    pub relation: Relation,
    pub passed: usize,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metric: Metric,
    pub overall_passed: usize,
    pub total: usize,
    pub groups: Vec<GroupStats>,
    pub per_relation: Vec<RelationStats>,
}

impl EvalReport {
    pub fn overall_accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.overall_passed as f64 / self.total as f64
        }
    }
}

/// Chained independence extrapolation from measured accuracies keyed by
/// relation count: `acc_k ≈ acc_{k−1} · acc_2/acc_1`.
pub fn extrapolate_accuracy(by_relations: &BTreeMap<usize, f64>, k: usize) -> Option<f64> {
    if k < 3 {
        return None;
    }
    let a1 = *by_relations.get(&1)?;
    let a2 = *by_relations.get(&2)?;
    let prev = *by_relations.get(&(k - 1))?;
    if a1 <= 0.0 {
        return None;
    }
    Some(prev * a2 / a1)
}

/// Scores a batch of runs under one metric, grouped by
/// (object count, relation count).
pub fn evaluate_batch(runs: &[RunRecord], metric: Metric) -> Result<EvalReport, CoreError> {
    if runs.is_empty() {
        return Err(CoreError::Config("no runs to evaluate".into()));
    }
    let mut groups: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    let mut rel_stats: BTreeMap<u8, (usize, usize)> = BTreeMap::new();
    let mut overall_passed = 0usize;
    for run in runs {
        if run.triplets.is_empty() {
            return Err(CoreError::Config("run without triplets".into()));
        }
        let key = (run.detections.len(), run.triplets.len());
        let pass = run.passes(metric);
        let e = groups.entry(key).or_insert((0, 0));
        e.1 += 1;
        if pass {
            e.0 += 1;
            overall_passed += 1;
        }
        for t in &run.triplets {
            let holds = match (run.find(&t.subject), run.find(&t.object)) {
                (Some(s), Some(o)) => match (s.bbox, o.bbox) {
                    (Some(b1), Some(b2)) => metric.holds(&b1, &b2, t.relation),
                    _ => false,
                },
                _ => false,
            };
            let e = rel_stats.entry(t.relation as u8).or_insert((0, 0));
            e.1 += 1;
            if holds {
                e.0 += 1;
            }
        }
    }

    // Accuracy by relation count (pooled over object counts) feeds the
    // extrapolation column.
    let mut by_relations: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&(_, k), &(p, t)) in &groups {
        let e = by_relations.entry(k).or_insert((0, 0));
        e.0 += p;
        e.1 += t;
    }
    let acc_by_relations: BTreeMap<usize, f64> = by_relations
        .iter()
        .map(|(&k, &(p, t))| (k, p as f64 / t as f64))
        .collect();

    let group_stats = groups
        .iter()
        .map(|(&(n_obj, n_rel), &(passed, total))| GroupStats {
            n_objects: n_obj,
            n_relations: n_rel,
            passed,
            total,
            accuracy: passed as f64 / total as f64,
            extrapolated: extrapolate_accuracy(&acc_by_relations, n_rel),
        })
        .collect();
    let per_relation = rel_stats
        .iter()
        .map(|(&r, &(passed, total))| RelationStats {
            relation: Relation::from_u8(r).expect("valid relation byte"),
            passed,
            total,
        })
        .collect();
    Ok(EvalReport {
        metric,
        overall_passed,
        total: runs.len(),
        groups: group_stats,
        per_relation,
    })
}

impl EvalReport {
    pub fn write_csv(&self, path: &Path) -> Result<(), CoreError> {
        let mut out =
            String::from("metric,n_objects,n_relations,passed,total,accuracy,extrapolated\n");
        for g in &self.groups {
            let ex = g
                .extrapolated
                .map_or(String::new(), |v| format!("{v}"));
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.metric.name(),
                g.n_objects,
                g.n_relations,
                g.passed,
                g.total,
                g.accuracy,
                ex
            )
            .unwrap();
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}: {}/{} runs pass ({:.3})",
            self.metric.name(),
            self.overall_passed,
            self.total,
            self.overall_accuracy()
        )?;
        writeln!(f, "objects relations passed total accuracy extrapolated")?;
        for g in &self.groups {
            let ex = g
                .extrapolated
                .map_or("-".to_string(), |v| format!("{v:.4}"));
            writeln!(
                f,
                "{:7} {:9} {:6} {:5} {:8.4} {}",
                g.n_objects, g.n_relations, g.passed, g.total, g.accuracy, ex
            )?;
        }
        writeln!(f, "relation breakdown:")?;
        for r in &self.per_relation {
            writeln!(
                f,
                "  {:9} {}/{}",
                r.relation.name(),
                r.passed,
                r.total
            )?;
        }
        Ok(())
    }
}
