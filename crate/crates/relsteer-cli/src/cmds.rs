//! The six subcommands. Every command resolves its settings from
//! defaults < config file < command-line flags, writes the resolved
//! section next to its outputs, and removes partial outputs on failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};

use relsteer::classifier::{ArchConfig, Checkpoint};
use relsteer::dataset::{build_dataset, DataConfig, Dataset, DEFAULT_TIMESTEPS};
use relsteer::eval::{detect_attn, detect_oracle, evaluate_batch, Detection, Metric, RunRecord};
use relsteer::parser::{parse_prompt, Lexicon};
use relsteer::steering::{steer, template_from_triplets, SteerConfig};
use relsteer::synth::{
    derive_seed, render_attention, Latent, ObjectSpec, Relation, RenderParams, SceneSpec,
    StackShape, DEFAULT_NOISE_MAX,
};
use relsteer::training::{
    evaluate_classifier, leakage_probe, train, write_history_csv, TrainConfig,
};

use crate::args::{
    AblateArgs, EvalArgs, GenDataArgs, ProbeLeakageArgs, SteerArgs, TrainArgs,
};
use crate::config::{format_timesteps, parse_timesteps, render_section, Config};
use crate::util::{par_map, worker_count, OutputGuard};

// ---------------------------------------------------------------- helpers

fn load_cfg(path: &Option<PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn check_unknown(cfg: &Config, section: &str, known: &[&str]) -> Result<()> {
    let unknown = cfg.unknown_keys(section, known);
    if !unknown.is_empty() {
        bail!("unknown keys in [{section}]: {}", unknown.join(", "));
    }
    Ok(())
}

/// flag > config > default; errors when required and absent everywhere.
fn resolve<T: FromStr>(
    flag: Option<T>,
    cfg: Option<&str>,
    default: Option<T>,
    key: &str,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = flag {
        return Ok(v);
    }
    if let Some(s) = cfg {
        return s
            .parse::<T>()
            .map_err(|e| anyhow::anyhow!("config key `{key}`: {e}"));
    }
    default.ok_or_else(|| anyhow::anyhow!("missing required setting `{key}`"))
}

/// Three-state boolean from a `--x` / `--no-x` flag pair.
fn flag_pair(yes: bool, no: bool) -> Option<bool> {
    match (yes, no) {
        (true, _) => Some(true),
        (_, true) => Some(false),
        _ => None,
    }
}

fn parse_shape(name: &str) -> Result<StackShape> {
    match name {
        "desk" => Ok(StackShape::desk()),
        "reduced" => Ok(ArchConfig::reduced().stack),
        other => bail!("unknown shape `{other}` (expected desk or reduced)"),
    }
}

fn parse_arch(name: &str) -> Result<ArchConfig> {
    match name {
        "desk" => Ok(ArchConfig::desk()),
        "reduced" => Ok(ArchConfig::reduced()),
        other => bail!("unknown arch `{other}` (expected desk or reduced)"),
    }
}

fn parse_metric(name: &str) -> Result<Metric> {
    match name {
        "geneval" => Ok(Metric::Geneval),
        "t2i" => Ok(Metric::T2i),
        other => bail!("unknown metric `{other}` (expected geneval or t2i)"),
    }
}

/// Resolved-config path for a single-file output: `<out>.cfg`.
fn sibling_cfg(out: &Path) -> PathBuf {
    let mut os = out.as_os_str().to_os_string();
    os.push(".cfg");
    PathBuf::from(os)
}

fn write_resolved(
    guard: &mut OutputGuard,
    path: &Path,
    section: &str,
    entries: &[(&str, String)],
) -> Result<()> {
    guard.register(path);
    std::fs::write(path, render_section(section, entries))
        .with_context(|| format!("writing resolved config {}", path.display()))?;
    Ok(())
}

// ---------------------------------------------------------------- gen-data

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    const S: &str = "gen-data";
    let cfg = load_cfg(&a.config)?;
    check_unknown(
        &cfg,
        S,
        &[
            "scenes",
            "timesteps",
            "leak",
            "dual",
            "neutral-frac",
            "negatives-only",
            "noise-max",
            "shape",
            "seed",
            "out",
        ],
    )?;

    let scenes: usize = resolve(a.scenes, cfg.get(S, "scenes"), Some(2000), "scenes")?;
    let ts_text: String = resolve(
        a.timesteps,
        cfg.get(S, "timesteps"),
        Some(format_timesteps(&DEFAULT_TIMESTEPS)),
        "timesteps",
    )?;
    let timesteps = parse_timesteps(&ts_text)?;
    let leak: f64 = resolve(a.leak, cfg.get(S, "leak"), Some(0.3), "leak")?;
    let dual: bool = resolve(
        flag_pair(a.dual, a.no_dual),
        cfg.get(S, "dual"),
        Some(true),
        "dual",
    )?;
    let neutral_frac: f64 = resolve(
        a.neutral_frac,
        cfg.get(S, "neutral-frac"),
        Some(0.10),
        "neutral-frac",
    )?;
    let negatives_only: bool = resolve(
        flag_pair(a.negatives_only, false),
        cfg.get(S, "negatives-only"),
        Some(false),
        "negatives-only",
    )?;
    let noise_max: f64 = resolve(
        a.noise_max,
        cfg.get(S, "noise-max"),
        Some(DEFAULT_NOISE_MAX),
        "noise-max",
    )?;
    let shape_name: String = resolve(a.shape, cfg.get(S, "shape"), Some("desk".into()), "shape")?;
    let seed: u64 = resolve(a.seed, cfg.get(S, "seed"), Some(0), "seed")?;
    let out: PathBuf = resolve(a.out, cfg.get(S, "out"), None, "out")?;

    let mut dc = DataConfig::new(scenes, leak, seed);
    dc.timesteps = timesteps.clone();
    dc.dual = dual;
    dc.neutral_frac = neutral_frac;
    dc.negatives_only = negatives_only;
    dc.noise_max = noise_max;
    dc.shape = parse_shape(&shape_name)?;

    let ds = build_dataset(&dc)?;
    let mut guard = OutputGuard::new();
    guard.register(&out);
    ds.save(&out)?;
    write_resolved(
        &mut guard,
        &sibling_cfg(&out),
        S,
        &[
            ("scenes", scenes.to_string()),
            ("timesteps", format_timesteps(&timesteps)),
            ("leak", leak.to_string()),
            ("dual", dual.to_string()),
            ("neutral-frac", neutral_frac.to_string()),
            ("negatives-only", negatives_only.to_string()),
            ("noise-max", noise_max.to_string()),
            ("shape", shape_name.clone()),
            ("seed", seed.to_string()),
            ("out", out.display().to_string()),
        ],
    )?;
    guard.commit();
    println!("wrote {} records to {}", ds.records.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------- train

pub fn train_cmd(a: TrainArgs) -> Result<()> {
    const S: &str = "train";
    let cfg = load_cfg(&a.config)?;
    check_unknown(
        &cfg,
        S,
        &[
            "data",
            "arch",
            "epochs",
            "lr",
            "batch-size",
            "weight-decay",
            "seed",
            "out",
        ],
    )?;

    let data: PathBuf = resolve(a.data, cfg.get(S, "data"), None, "data")?;
    let arch_name: String = resolve(a.arch, cfg.get(S, "arch"), Some("desk".into()), "arch")?;
    let epochs: usize = resolve(a.epochs, cfg.get(S, "epochs"), Some(50), "epochs")?;
    let lr: f64 = resolve(a.lr, cfg.get(S, "lr"), Some(5e-5), "lr")?;
    let batch_size: usize =
        resolve(a.batch_size, cfg.get(S, "batch-size"), Some(64), "batch-size")?;
    let weight_decay: f64 = resolve(
        a.weight_decay,
        cfg.get(S, "weight-decay"),
        Some(0.05),
        "weight-decay",
    )?;
    let seed: u64 = resolve(a.seed, cfg.get(S, "seed"), Some(0), "seed")?;
    let out: PathBuf = resolve(a.out, cfg.get(S, "out"), None, "out")?;

    let arch = parse_arch(&arch_name)?;
    let dataset = Dataset::load(&data)
        .with_context(|| format!("loading dataset {}", data.display()))?;
    let tc = TrainConfig {
        batch_size,
        lr,
        weight_decay,
        max_epochs: epochs,
        seed,
        ..TrainConfig::default()
    };
    let output = train(&dataset, &tc, &arch)?;

    let mut guard = OutputGuard::new();
    guard.register(&out);
    output.checkpoint.save(&out)?;
    let history_path = {
        let mut os = out.as_os_str().to_os_string();
        os.push(".history.csv");
        PathBuf::from(os)
    };
    guard.register(&history_path);
    write_history_csv(&output.history, &history_path)?;
    write_resolved(
        &mut guard,
        &sibling_cfg(&out),
        S,
        &[
            ("data", data.display().to_string()),
            ("arch", arch_name.clone()),
            ("epochs", epochs.to_string()),
            ("lr", lr.to_string()),
            ("batch-size", batch_size.to_string()),
            ("weight-decay", weight_decay.to_string()),
            ("seed", seed.to_string()),
            ("out", out.display().to_string()),
        ],
    )?;
    guard.commit();

    let test = evaluate_classifier(&output.checkpoint, &dataset, Some(&output.splits.test))?;
    println!(
        "trained {} epochs; best val loss {:.4}; held-out test accuracy {:.4} ({} records)",
        output.history.len(),
        output.best_val_loss,
        test.accuracy,
        test.total
    );
    println!("checkpoint: {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------- probe-leakage

pub fn probe_leakage(a: ProbeLeakageArgs) -> Result<()> {
    const S: &str = "probe-leakage";
    let cfg = load_cfg(&a.config)?;
    check_unknown(&cfg, S, &["ckpt", "probe-data", "out"])?;

    let ckpt_path: PathBuf = resolve(a.ckpt, cfg.get(S, "ckpt"), None, "ckpt")?;
    let probe_path: PathBuf = resolve(a.probe_data, cfg.get(S, "probe-data"), None, "probe-data")?;
    let out: PathBuf = resolve(
        a.out,
        cfg.get(S, "out"),
        Some(PathBuf::from("leakage_report.csv")),
        "out",
    )?;

    let ckpt = Checkpoint::load(&ckpt_path)
        .with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
    let probe = Dataset::load(&probe_path)
        .with_context(|| format!("loading probe dataset {}", probe_path.display()))?;
    let report = leakage_probe(&ckpt, &probe)?;

    let mut csv = String::from("metric,value\n");
    writeln!(csv, "frac_prompt,{}", report.frac_prompt).unwrap();
    writeln!(csv, "frac_label,{}", report.frac_label).unwrap();
    writeln!(csv, "frac_other,{}", report.frac_other).unwrap();
    writeln!(csv, "total,{}", report.total).unwrap();
    for (i, row) in report.confusion.iter().enumerate() {
        let truth = Relation::from_u8(i as u8).expect("confusion is 5×5").name();
        for (j, &n) in row.iter().enumerate() {
            let pred = Relation::from_u8(j as u8).expect("confusion is 5×5").name();
            writeln!(csv, "conf_{truth}_{pred},{n}").unwrap();
        }
    }

    let mut guard = OutputGuard::new();
    guard.register(&out);
    std::fs::write(&out, csv)?;
    write_resolved(
        &mut guard,
        &sibling_cfg(&out),
        S,
        &[
            ("ckpt", ckpt_path.display().to_string()),
            ("probe-data", probe_path.display().to_string()),
            ("out", out.display().to_string()),
        ],
    )?;
    guard.commit();
    println!(
        "probe: frac_prompt {:.4}, frac_label {:.4}, frac_other {:.4} over {}",
        report.frac_prompt, report.frac_label, report.frac_other, report.total
    );
    Ok(())
}

// ---------------------------------------------------------------- steer

pub fn steer_cmd(a: SteerArgs) -> Result<()> {
    const S: &str = "steer";
    let cfg = load_cfg(&a.config)?;
    check_unknown(
        &cfg,
        S,
        &["ckpt", "prompt", "seed", "alpha", "iters", "init-noise-only", "out"],
    )?;

    let ckpt_path: PathBuf = resolve(a.ckpt, cfg.get(S, "ckpt"), None, "ckpt")?;
    let prompt: String = resolve(a.prompt, cfg.get(S, "prompt"), None, "prompt")?;
    let seed: u64 = resolve(a.seed, cfg.get(S, "seed"), Some(0), "seed")?;
    let alpha: f64 = resolve(a.alpha, cfg.get(S, "alpha"), Some(5.0), "alpha")?;
    let iters: usize = resolve(a.iters, cfg.get(S, "iters"), Some(15), "iters")?;
    let init_noise_only: bool = resolve(
        flag_pair(a.init_noise_only, false),
        cfg.get(S, "init-noise-only"),
        Some(false),
        "init-noise-only",
    )?;
    let out: PathBuf = resolve(a.out, cfg.get(S, "out"), None, "out")?;

    let ckpt = Checkpoint::load(&ckpt_path)
        .with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
    let triplets = parse_prompt(&prompt, &Lexicon::default())?;
    if triplets.is_empty() {
        bail!("prompt `{prompt}` contains no spatial relation");
    }
    let template = template_from_triplets(&triplets, seed)?;
    let z0 = Latent::random(template.objects.len(), derive_seed(seed, &[11]));

    let mut sc = SteerConfig::for_grid(&DEFAULT_TIMESTEPS, ckpt.arch.stack.t_total);
    sc.alpha = alpha;
    sc.iterations = iters;
    sc.initial_noise_only = init_noise_only;

    let outcome = steer(&z0, &template, &triplets, &ckpt, derive_seed(seed, &[12]), &sc)?;

    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    let mut guard = OutputGuard::new();
    let trace_path = out.join("trace.csv");
    let final_path = out.join("final.csv");
    guard.register(&trace_path);
    guard.register(&final_path);
    outcome.trace.write_csv(&trace_path)?;

    let mut final_csv = String::from("name,cx,cy,extent_x,extent_y\n");
    for (obj, (cx, cy)) in template.objects.iter().zip(outcome.latent.decoded_centers()) {
        writeln!(
            final_csv,
            "{},{},{},{},{}",
            obj.category, cx, cy, obj.extent.0, obj.extent.1
        )
        .unwrap();
    }
    std::fs::write(&final_path, final_csv)?;

    write_resolved(
        &mut guard,
        &out.join("resolved.cfg"),
        S,
        &[
            ("ckpt", ckpt_path.display().to_string()),
            ("prompt", prompt.clone()),
            ("seed", seed.to_string()),
            ("alpha", alpha.to_string()),
            ("iters", iters.to_string()),
            ("init-noise-only", init_noise_only.to_string()),
            ("out", out.display().to_string()),
        ],
    )?;

    if let Some(msg) = outcome.aborted {
        // Guard drops here and removes the partial outputs.
        bail!("steering aborted: {msg}");
    }
    guard.commit();
    let last = outcome.trace.rows.last();
    println!(
        "steered {} relation(s); final p_target {:.4}; outputs in {}",
        triplets.len(),
        last.map_or(f64::NAN, |r| r.p_target),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- eval

/// One steering output directory read back: prompt triplets plus the
/// final scene (names, centers, extents) and the run's seed.
struct RunDir {
    triplets: Vec<relsteer::parser::RelationTriplet>,
    template: SceneSpec,
    centers: Vec<(f64, f64)>,
    seed: u64,
}

fn read_run_dir(dir: &Path) -> Result<RunDir> {
    let cfg = Config::load(&dir.join("resolved.cfg"))?;
    let prompt = cfg
        .get("steer", "prompt")
        .with_context(|| format!("{}: resolved.cfg lacks steer.prompt", dir.display()))?;
    let seed: u64 = cfg
        .get("steer", "seed")
        .unwrap_or("0")
        .parse()
        .with_context(|| format!("{}: bad steer.seed", dir.display()))?;
    let triplets = parse_prompt(prompt, &Lexicon::default())?;

    let final_text = std::fs::read_to_string(dir.join("final.csv"))
        .with_context(|| format!("reading {}/final.csv", dir.display()))?;
    let mut objects = Vec::new();
    let mut centers = Vec::new();
    for (i, line) in final_text.lines().enumerate() {
        if i == 0 {
            if line != "name,cx,cy,extent_x,extent_y" {
                bail!("{}: unexpected final.csv header", dir.display());
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            bail!("{}: final.csv line {} has {} fields", dir.display(), i + 1, fields.len());
        }
        let cx: f64 = fields[1].parse()?;
        let cy: f64 = fields[2].parse()?;
        objects.push(ObjectSpec {
            category: fields[0].to_string(),
            center: (cx, cy),
            extent: (fields[3].parse()?, fields[4].parse()?),
        });
        centers.push((cx, cy));
    }
    if objects.len() < 2 {
        bail!("{}: final.csv lists fewer than two objects", dir.display());
    }
    Ok(RunDir {
        triplets,
        template: SceneSpec {
            objects,
            relations: Vec::new(),
            seed,
        },
        centers,
        seed,
    })
}

fn detect_run(run: &RunDir, detector: &str, shape: StackShape) -> Result<Vec<Detection>> {
    match detector {
        "oracle" => Ok(detect_oracle(&run.template, &run.centers)?),
        "attn" => {
            // Noise-free neutral render of the final scene: detection
            // sees only the per-object maps, never the prompt.
            let params = RenderParams::new(shape, 0.0, DEFAULT_NOISE_MAX);
            let stacks = render_attention(&run.template, Relation::Neutral, 0, &params, run.seed)?;
            Ok(run
                .template
                .objects
                .iter()
                .zip(&stacks)
                .map(|(o, s)| detect_attn(s, &o.category))
                .collect())
        }
        other => bail!("unknown detector `{other}` (expected oracle or attn)"),
    }
}

pub fn eval_cmd(a: EvalArgs) -> Result<()> {
    const S: &str = "eval";
    let cfg = load_cfg(&a.config)?;
    check_unknown(&cfg, S, &["runs", "metric", "detector", "shape", "out"])?;

    let runs_dir: PathBuf = resolve(a.runs, cfg.get(S, "runs"), None, "runs")?;
    let metric_name: String =
        resolve(a.metric, cfg.get(S, "metric"), Some("geneval".into()), "metric")?;
    let detector: String =
        resolve(a.detector, cfg.get(S, "detector"), Some("oracle".into()), "detector")?;
    let shape_name: String = resolve(a.shape, cfg.get(S, "shape"), Some("desk".into()), "shape")?;
    let out: PathBuf = resolve(a.out, cfg.get(S, "out"), None, "out")?;

    let metric = parse_metric(&metric_name)?;
    let shape = parse_shape(&shape_name)?;

    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&runs_dir)
        .with_context(|| format!("reading runs directory {}", runs_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("final.csv").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no steering outputs (final.csv) under {}", runs_dir.display());
    }

    let detector_ref = detector.as_str();
    let records: Vec<RunRecord> = par_map(dirs, worker_count(), |dir| {
        let run = read_run_dir(&dir)?;
        let detections = detect_run(&run, detector_ref, shape)?;
        Ok(RunRecord {
            triplets: run.triplets,
            detections,
        })
    })?;

    let report = evaluate_batch(&records, metric)?;
    let mut guard = OutputGuard::new();
    guard.register(&out);
    report.write_csv(&out)?;
    write_resolved(
        &mut guard,
        &sibling_cfg(&out),
        S,
        &[
            ("runs", runs_dir.display().to_string()),
            ("metric", metric_name.clone()),
            ("detector", detector.clone()),
            ("shape", shape_name.clone()),
            ("out", out.display().to_string()),
        ],
    )?;
    guard.commit();
    println!("{report}");
    println!("report: {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------- ablate

struct AblationCell {
    mode: &'static str,
    lambda: f64,
}

struct AblationRow {
    mode: &'static str,
    lambda: f64,
    clean_accuracy: f64,
    frac_prompt: f64,
    frac_label: f64,
    frac_other: f64,
    probe_total: usize,
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    const S: &str = "ablate";
    let cfg = load_cfg(&a.config)?;
    check_unknown(
        &cfg,
        S,
        &["scenes", "lambdas", "timesteps", "epochs", "lr", "seed", "out"],
    )?;

    let scenes: usize = resolve(a.scenes, cfg.get(S, "scenes"), Some(150), "scenes")?;
    let lambdas_text: String = resolve(
        a.lambdas,
        cfg.get(S, "lambdas"),
        Some("0,0.3,0.6".into()),
        "lambdas",
    )?;
    let ts_text: String = resolve(
        a.timesteps,
        cfg.get(S, "timesteps"),
        Some("25,49".into()),
        "timesteps",
    )?;
    let epochs: usize = resolve(a.epochs, cfg.get(S, "epochs"), Some(6), "epochs")?;
    let lr: f64 = resolve(a.lr, cfg.get(S, "lr"), Some(3e-3), "lr")?;
    let seed: u64 = resolve(a.seed, cfg.get(S, "seed"), Some(0), "seed")?;
    let out: PathBuf = resolve(a.out, cfg.get(S, "out"), None, "out")?;

    let lambdas: Vec<f64> = lambdas_text
        .split(',')
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad lambda `{s}`")))
        .collect::<Result<_>>()?;
    if lambdas.is_empty() {
        bail!("lambda list is empty");
    }
    let timesteps = parse_timesteps(&ts_text)?;
    let arch = ArchConfig::desk();

    let cells: Vec<AblationCell> = ["dual", "pos-only"]
        .into_iter()
        .flat_map(|mode| lambdas.iter().map(move |&lambda| AblationCell { mode, lambda }))
        .collect();

    let run_cell = |cell: AblationCell| -> Result<AblationRow> {
        // Same scene pool for every cell: only λ and the augmentation
        // mode vary, so rows are directly comparable.
        let mut train_dc = DataConfig::new(scenes, cell.lambda, derive_seed(seed, &[1]));
        train_dc.timesteps = timesteps.clone();
        train_dc.dual = cell.mode == "dual";
        let train_ds = build_dataset(&train_dc)?;

        let tc = TrainConfig {
            lr,
            max_epochs: epochs,
            seed,
            ..TrainConfig::default()
        };
        let output = train(&train_ds, &tc, &arch)?;

        // Clean accuracy: fresh scenes, no watermark.
        let mut clean_dc = DataConfig::new((scenes / 3).max(50), 0.0, derive_seed(seed, &[8]));
        clean_dc.timesteps = timesteps.clone();
        clean_dc.dual = false;
        let clean_ds = build_dataset(&clean_dc)?;
        let clean = evaluate_classifier(&output.checkpoint, &clean_ds, None)?;

        // Mismatched-prompt probe: fresh scenes, watermark at the
        // cell's λ, every record's prompt contradicts its geometry.
        let mut probe_dc = DataConfig::new((scenes / 3).max(50), cell.lambda, derive_seed(seed, &[7]));
        probe_dc.timesteps = timesteps.clone();
        probe_dc.negatives_only = true;
        probe_dc.neutral_frac = 0.0;
        let probe_ds = build_dataset(&probe_dc)?;
        let probe = leakage_probe(&output.checkpoint, &probe_ds)?;

        Ok(AblationRow {
            mode: cell.mode,
            lambda: cell.lambda,
            clean_accuracy: clean.accuracy,
            frac_prompt: probe.frac_prompt,
            frac_label: probe.frac_label,
            frac_other: probe.frac_other,
            probe_total: probe.total,
        })
    };

    let rows = par_map(cells, worker_count(), run_cell)?;

    let mut csv = String::from(
        "mode,lambda,clean_accuracy,probe_frac_prompt,probe_frac_label,probe_frac_other,probe_total\n",
    );
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.mode, r.lambda, r.clean_accuracy, r.frac_prompt, r.frac_label, r.frac_other,
            r.probe_total
        )
        .unwrap();
    }
    let mut guard = OutputGuard::new();
    guard.register(&out);
    std::fs::write(&out, csv)?;
    write_resolved(
        &mut guard,
        &sibling_cfg(&out),
        S,
        &[
            ("scenes", scenes.to_string()),
            ("lambdas", lambdas.iter().map(f64::to_string).collect::<Vec<_>>().join(",")),
            ("timesteps", format_timesteps(&timesteps)),
            ("epochs", epochs.to_string()),
            ("lr", lr.to_string()),
            ("seed", seed.to_string()),
            ("out", out.display().to_string()),
        ],
    )?;
    guard.commit();
    for r in &rows {
        println!(
            "{} λ={}: clean {:.3}, probe prompt {:.3} / label {:.3}",
            r.mode, r.lambda, r.clean_accuracy, r.frac_prompt, r.frac_label
        );
    }
    println!("ablation table: {}", out.display());
    Ok(())
}
