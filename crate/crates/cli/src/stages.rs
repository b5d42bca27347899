//! Subcommand bodies. Every stage materializes its effective config,
//! writes its artifacts under the run directory, and finishes with a
//! manifest tying the two together.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use earlyrec_core::encoder::{
    load_encoder, save_encoder, segment_sample, subvideo_loss_and_grads, EncoderModel,
    SampleConfig,
};
use earlyrec_core::evaluator::{default_checkpoints, evaluate, write_report, EvalReport};
use earlyrec_core::losses::{
    average_ce, fsp_total, linear_weighted_ce, ClassLossKind, FutureLossKind, LossSelection,
};
use earlyrec_core::recurrent::{
    forward_sequence, load_model, save_model, RecurrentModel,
};
use earlyrec_core::synth::{generate_dataset, load_dataset, save_dataset, Dataset, FrameSequence, Split};
use earlyrec_core::tensor::Vector;
use earlyrec_core::trainer::{
    finetune_encoder, gradient_check, train_fsp, train_teacher, write_training_log, DeltaSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{write_effective_config, RunConfig};
use crate::invalid;
use crate::manifest::Manifest;

/// Shared per-invocation state: the run directory exists, the effective
/// config is on disk, and the manifest is primed with its hash.
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub manifest: Manifest,
}

impl Ctx {
    pub fn new(subcommand: &str, cfg: RunConfig) -> Result<Self> {
        let out = cfg.out_dir.clone();
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let config_path = out.join(format!("{subcommand}.config.json"));
        let bytes = write_effective_config(&cfg, &config_path)?;
        let manifest = Manifest::new(subcommand, &bytes, cfg.seed);
        Ok(Ctx { cfg, out, manifest })
    }

    fn finish(self) -> Result<()> {
        let path = self.manifest.write(&self.out)?;
        println!("manifest: {}", path.display());
        Ok(())
    }
}

/// Dataset per the config: loaded from `dataset.path` when set (the file
/// must exist), generated otherwise.
fn resolve_dataset(ctx: &mut Ctx) -> Result<Dataset> {
    match ctx.cfg.dataset.path.clone() {
        Some(path) => {
            if !path.exists() {
                return Err(invalid(format!("dataset file not found: {}", path.display())));
            }
            ctx.manifest.record_input(&path)?;
            Ok(load_dataset(&path)?)
        }
        None => {
            let counts = ctx.cfg.dataset.per_class.counts(ctx.cfg.dataset.generator.num_classes);
            Ok(generate_dataset(&ctx.cfg.dataset.generator, &counts)?)
        }
    }
}

/// Encoder per the config: loaded from `encoder.path` when set, fine-tuned
/// in process otherwise (and saved, so the run directory is self-contained).
fn resolve_encoder(ctx: &mut Ctx, dataset: &Dataset) -> Result<EncoderModel> {
    match ctx.cfg.encoder.path.clone() {
        Some(path) => {
            if !path.exists() {
                return Err(invalid(format!("encoder checkpoint not found: {}", path.display())));
            }
            ctx.manifest.record_input(&path)?;
            Ok(load_encoder(&path)?)
        }
        None => {
            let outcome = finetune_encoder(dataset, ctx.cfg.encoder.mode, &ctx.cfg.encoder.train)?;
            let path = ctx.out.join("encoder.json");
            save_encoder(&outcome.model, &path)?;
            ctx.manifest.record_output(&ctx.out, &path);
            Ok(outcome.model)
        }
    }
}

/// The frozen teacher for future-state training. Always a checkpoint on
/// disk — there is deliberately no in-process fallback, so a sweep reuses
/// one fixed teacher.
fn require_teacher(ctx: &mut Ctx) -> Result<RecurrentModel> {
    let Some(path) = ctx.cfg.student.teacher_path.clone() else {
        return Err(invalid("teacher checkpoint required (set student.teacher_path)"));
    };
    if !path.exists() {
        return Err(invalid(format!("teacher checkpoint not found: {}", path.display())));
    }
    ctx.manifest.record_input(&path)?;
    Ok(load_model(&path)?)
}

fn checkpoint_grid(ctx: &Ctx, dataset: &Dataset) -> Result<Vec<usize>> {
    if let Some(grid) = ctx.cfg.evaluate.checkpoints.clone() {
        return Ok(grid);
    }
    let shortest = dataset
        .min_len(Split::Test)
        .ok_or_else(|| invalid("dataset has no test sequences"))?;
    Ok(default_checkpoints(shortest))
}

fn fmt_curve(values: &[f64]) -> String {
    let cells: Vec<String> = values.iter().map(|v| format!("{v:.3}")).collect();
    format!("[{}]", cells.join(", "))
}

pub fn generate(cfg: RunConfig) -> Result<()> {
    let mut ctx = Ctx::new("generate", cfg)?;
    let counts = ctx.cfg.dataset.per_class.counts(ctx.cfg.dataset.generator.num_classes);
    let dataset = generate_dataset(&ctx.cfg.dataset.generator, &counts)?;
    let path = ctx.out.join("dataset.ndjson");
    save_dataset(&dataset, &path)?;
    ctx.manifest.record_output(&ctx.out, &path);
    println!(
        "generated {} sequences ({} train / {} val / {} test) over {} classes",
        dataset.sequences.len(),
        dataset.split_indices(Split::Train).len(),
        dataset.split_indices(Split::Val).len(),
        dataset.split_indices(Split::Test).len(),
        dataset.num_classes()
    );
    ctx.finish()
}

pub fn finetune_encoder_cmd(cfg: RunConfig) -> Result<()> {
    let mut ctx = Ctx::new("finetune-encoder", cfg)?;
    let dataset = resolve_dataset(&mut ctx)?;
    let outcome = finetune_encoder(&dataset, ctx.cfg.encoder.mode, &ctx.cfg.encoder.train)?;
    let model_path = ctx.out.join("encoder.json");
    save_encoder(&outcome.model, &model_path)?;
    ctx.manifest.record_output(&ctx.out, &model_path);
    let log_path = ctx.out.join("encoder_training_log.csv");
    write_training_log(&outcome.log, &log_path)?;
    ctx.manifest.record_output(&ctx.out, &log_path);
    if let Some(last) = outcome.log.last() {
        println!(
            "fine-tuned encoder ({:?}): {} epochs, last {} accuracy {:.3}",
            ctx.cfg.encoder.mode, ctx.cfg.encoder.train.epochs, last.split, last.accuracy_final_step
        );
    }
    ctx.finish()
}

pub fn train_teacher_cmd(cfg: RunConfig) -> Result<()> {
    let mut ctx = Ctx::new("train-teacher", cfg)?;
    let dataset = resolve_dataset(&mut ctx)?;
    let encoder = resolve_encoder(&mut ctx, &dataset)?;
    let outcome = train_teacher(&dataset, &encoder, ctx.cfg.teacher.hidden_dim, &ctx.cfg.teacher.train)?;
    let model_path = ctx.out.join("teacher.json");
    save_model(&outcome.model, &model_path)?;
    ctx.manifest.record_output(&ctx.out, &model_path);
    let log_path = ctx.out.join("teacher_training_log.csv");
    write_training_log(&outcome.log, &log_path)?;
    ctx.manifest.record_output(&ctx.out, &log_path);
    println!(
        "trained teacher: best validation accuracy {:.3} at epoch {} ({} epochs run)",
        outcome.best_val_accuracy, outcome.best_epoch, outcome.epochs_run
    );
    ctx.finish()
}

pub fn train_fsp_cmd(cfg: RunConfig) -> Result<()> {
    let mut ctx = Ctx::new("train-fsp", cfg)?;
    let dataset = resolve_dataset(&mut ctx)?;
    let encoder = resolve_encoder(&mut ctx, &dataset)?;
    let teacher = require_teacher(&mut ctx)?;
    let outcome = train_fsp(&dataset, &encoder, &teacher, &ctx.cfg.student.train)?;

    let model_path = ctx.out.join("student.json");
    save_model(&outcome.model, &model_path)?;
    ctx.manifest.record_output(&ctx.out, &model_path);
    let log_path = ctx.out.join("student_training_log.csv");
    write_training_log(&outcome.log, &log_path)?;
    ctx.manifest.record_output(&ctx.out, &log_path);

    // Horizon bookkeeping: how many steps each training sequence kept.
    let trunc_path = ctx.out.join("truncation.json");
    let mut text = serde_json::to_string_pretty(&outcome.truncation).expect("stats serialize");
    text.push('\n');
    std::fs::write(&trunc_path, text).with_context(|| format!("writing {}", trunc_path.display()))?;
    ctx.manifest.record_output(&ctx.out, &trunc_path);

    let skipped = outcome.truncation.iter().filter(|s| s.horizon.is_none()).count();
    println!(
        "trained student: best validation accuracy {:.3} at epoch {} ({} sequences, {} skipped as too short)",
        outcome.best_val_accuracy,
        outcome.best_epoch,
        outcome.truncation.len(),
        skipped
    );
    ctx.finish()
}

pub fn evaluate_cmd(cfg: RunConfig) -> Result<()> {
    let mut ctx = Ctx::new("evaluate", cfg)?;
    let Some(model_path) = ctx.cfg.evaluate.model_path.clone() else {
        return Err(invalid("model checkpoint required (set evaluate.model_path)"));
    };
    if !model_path.exists() {
        return Err(invalid(format!("model checkpoint not found: {}", model_path.display())));
    }
    ctx.manifest.record_input(&model_path)?;
    let model = load_model(&model_path)?;

    let dataset = resolve_dataset(&mut ctx)?;
    let encoder = resolve_encoder(&mut ctx, &dataset)?;
    let grid = checkpoint_grid(&ctx, &dataset)?;
    let test = dataset.split_sequences(Split::Test);
    let report = evaluate(&model, &encoder, &test, &grid)?;

    let csv_path = ctx.out.join("accuracy_curve.csv");
    let json_path = ctx.out.join("report.json");
    write_report(&report, &csv_path, &json_path)?;
    ctx.manifest.record_output(&ctx.out, &csv_path);
    ctx.manifest.record_output(&ctx.out, &json_path);
    println!("checkpoints {:?}", report.checkpoints);
    println!("accuracy    {}", fmt_curve(&report.accuracy_curve));
    println!("full-video  {:.3}", report.full_video.overall);
    ctx.finish()
}

// --- gradcheck ------------------------------------------------------------

#[derive(Debug, Serialize)]
struct GradcheckRow {
    surface: &'static str,
    instances: usize,
    worst_rel_err: f64,
    pass: bool,
}

fn random_frames(rng: &mut ChaCha8Rng, t: usize, dim: usize) -> Vec<Vector> {
    (0..t)
        .map(|_| Vector::new((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("non-empty"))
        .collect()
}

/// Finite-difference spot checks over the trainable surfaces: the pooled
/// encoder loss in both weighting modes, backpropagation through time
/// under both classification losses, and the composite objective with
/// each future-regression term.
pub fn gradcheck_cmd(cfg: RunConfig) -> Result<()> {
    let mut ctx = Ctx::new("gradcheck", cfg)?;
    let instances = ctx.cfg.gradcheck.instances;
    if instances == 0 {
        return Err(invalid("gradcheck.instances must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let mut rows: Vec<GradcheckRow> = Vec::new();

    for weights_on in [true, false] {
        let surface = if weights_on { "encoder_weighted_pool" } else { "encoder_unweighted_pool" };
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let d = rng.gen_range(2..=4);
            let e = rng.gen_range(2..=4);
            let n = rng.gen_range(2..=3);
            let t = rng.gen_range(4..=9);
            let label = rng.gen_range(0..n);
            let seq = FrameSequence { label, frames: random_frames(&mut rng, t, d) };
            let mut model = EncoderModel::new(d, e, n, 0.0, ctx.cfg.seed ^ (i as u64 + 1))?;
            let sample =
                segment_sample(t, &SampleConfig { segment_len: 3, per_segment: 2 }, &mut rng)?;
            let (_, grads) = subvideo_loss_and_grads(&model, &seq, &sample, weights_on, None)?;
            let report = gradient_check(&mut model, &grads, |m| {
                Ok(subvideo_loss_and_grads(m, &seq, &sample, weights_on, None)?.0)
            })?;
            worst = worst.max(report.worst);
        }
        rows.push(GradcheckRow { surface, instances, worst_rel_err: worst, pass: worst < 1e-4 });
    }

    for linear in [false, true] {
        let surface = if linear { "bptt_linear_weighted_ce" } else { "bptt_average_ce" };
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let t = rng.gen_range(3..=5);
            let e = rng.gen_range(2..=4);
            let h = rng.gen_range(2..=4);
            let n = rng.gen_range(2..=3);
            let label = rng.gen_range(0..n);
            let mut model = RecurrentModel::new(e, h, n, false, ctx.cfg.seed ^ (0x100 + i as u64))?;
            let features = random_frames(&mut rng, t, e);
            let trace = forward_sequence(&model, &features)?;
            let d_logits = if linear {
                linear_weighted_ce(&trace.probs, label, t, t)?.1
            } else {
                average_ce(&trace.probs, label, t)?.1
            };
            let grads = earlyrec_core::recurrent::backward_sequence(&model, &features, &d_logits, &[])?;
            let report = gradient_check(&mut model, &grads, |m| {
                let trace = forward_sequence(m, &features)?;
                if linear {
                    Ok(linear_weighted_ce(&trace.probs, label, t, t)?.0)
                } else {
                    Ok(average_ce(&trace.probs, label, t)?.0)
                }
            })?;
            worst = worst.max(report.worst);
        }
        rows.push(GradcheckRow { surface, instances, worst_rel_err: worst, pass: worst < 1e-4 });
    }

    for future in [FutureLossKind::SmoothL1, FutureLossKind::L2] {
        let surface = match future {
            FutureLossKind::SmoothL1 => "fsp_composite_smooth_l1",
            FutureLossKind::L2 => "fsp_composite_l2",
        };
        let sel = LossSelection {
            classification: ClassLossKind::Average,
            future: Some(future),
            lambda: 10.0,
        };
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let t = rng.gen_range(3..=5);
            let e = rng.gen_range(2..=4);
            let h = rng.gen_range(2..=4);
            let n = rng.gen_range(2..=3);
            let label = rng.gen_range(0..n);
            let steps = rng.gen_range(1..=t);
            let mut model = RecurrentModel::new(e, h, n, true, ctx.cfg.seed ^ (0x200 + i as u64))?;
            let features = random_frames(&mut rng, t, e);
            let targets: Vec<Vector> = (0..steps)
                .map(|_| Vector::new((0..h).map(|_| rng.gen_range(-0.8..0.8)).collect()).expect("non-empty"))
                .collect();
            let trace = forward_sequence(&model, &features)?;
            let out = fsp_total(
                &sel,
                &trace.probs,
                label,
                trace.future_pred.as_ref().expect("future head present"),
                &targets,
                steps,
                t,
            )?;
            let grads = earlyrec_core::recurrent::backward_sequence(
                &model,
                &features,
                &out.d_logits,
                &out.d_future,
            )?;
            let report = gradient_check(&mut model, &grads, |m| {
                let trace = forward_sequence(m, &features)?;
                Ok(fsp_total(
                    &sel,
                    &trace.probs,
                    label,
                    trace.future_pred.as_ref().expect("future head present"),
                    &targets,
                    steps,
                    t,
                )?
                .total)
            })?;
            worst = worst.max(report.worst);
        }
        rows.push(GradcheckRow { surface, instances, worst_rel_err: worst, pass: worst < 1e-4 });
    }

    let path = ctx.out.join("gradcheck.json");
    let mut text = serde_json::to_string_pretty(&rows).expect("rows serialize");
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    ctx.manifest.record_output(&ctx.out, &path);

    let mut failed = false;
    for row in &rows {
        println!(
            "gradcheck {}: {} instances, worst rel err {:.2e} [{}]",
            row.surface,
            row.instances,
            row.worst_rel_err,
            if row.pass { "ok" } else { "FAIL" }
        );
        failed |= !row.pass;
    }
    ctx.finish()?;
    if failed {
        anyhow::bail!("gradient check failed; see gradcheck.json");
    }
    Ok(())
}

// --- ablate ----------------------------------------------------------------

fn delta_tag(delta: &DeltaSpec) -> String {
    match delta {
        DeltaSpec::Fraction(p) => format!("frac{p}"),
        DeltaSpec::FixedSteps(k) => format!("fixed{k}"),
    }
}

fn loss_tag(kind: FutureLossKind) -> &'static str {
    match kind {
        FutureLossKind::SmoothL1 => "smooth_l1",
        FutureLossKind::L2 => "l2",
    }
}

/// Cartesian sweep over horizon offsets, lambda values, and future-loss
/// kinds, all against one fixed teacher. One report per cell plus a long
/// format summary CSV.
pub fn ablate_cmd(cfg: RunConfig) -> Result<()> {
    let mut ctx = Ctx::new("ablate", cfg)?;
    let ab = ctx.cfg.ablate.clone();
    if ab.deltas.is_empty() || ab.lambdas.is_empty() || ab.future_losses.is_empty() {
        return Err(invalid("ablate needs at least one delta, one lambda, and one future loss"));
    }
    let dataset = resolve_dataset(&mut ctx)?;
    let encoder = resolve_encoder(&mut ctx, &dataset)?;
    let teacher = require_teacher(&mut ctx)?;
    let grid = checkpoint_grid(&ctx, &dataset)?;
    let test = dataset.split_sequences(Split::Test);

    let mut summary = String::from("delta,lambda,future_loss,checkpoint,accuracy\n");
    for delta in &ab.deltas {
        for &lambda in &ab.lambdas {
            for &future in &ab.future_losses {
                let cell = format!("{}_lam{}_{}", delta_tag(delta), lambda, loss_tag(future));
                let mut train = ctx.cfg.student.train.clone();
                train.delta = *delta;
                train.loss.lambda = lambda;
                train.loss.future = Some(future);

                let outcome = train_fsp(&dataset, &encoder, &teacher, &train)?;
                let report: EvalReport = evaluate(&outcome.model, &encoder, &test, &grid)?;

                let cell_dir = ctx.out.join("cells").join(&cell);
                std::fs::create_dir_all(&cell_dir)
                    .with_context(|| format!("creating {}", cell_dir.display()))?;
                let csv_path = cell_dir.join("accuracy_curve.csv");
                let json_path = cell_dir.join("report.json");
                write_report(&report, &csv_path, &json_path)?;
                ctx.manifest.record_output(&ctx.out, &csv_path);
                ctx.manifest.record_output(&ctx.out, &json_path);

                for (c, a) in report.checkpoints.iter().zip(&report.accuracy_curve) {
                    summary.push_str(&format!(
                        "{},{},{},{},{}\n",
                        delta_tag(delta),
                        lambda,
                        loss_tag(future),
                        c,
                        a
                    ));
                }
                println!("ablate {cell}: accuracy {}", fmt_curve(&report.accuracy_curve));
            }
        }
    }

    let summary_path = ctx.out.join("summary.csv");
    std::fs::write(&summary_path, summary)
        .with_context(|| format!("writing {}", summary_path.display()))?;
    ctx.manifest.record_output(&ctx.out, &summary_path);
    ctx.finish()
}

// --- plot -------------------------------------------------------------------

pub fn plot_cmd(cfg: RunConfig) -> Result<()> {
    let mut ctx = Ctx::new("plot", cfg)?;
    if ctx.cfg.plot.curves.is_empty() {
        return Err(invalid("plot needs at least one curve (set plot.curves)"));
    }
    let mut curves = Vec::new();
    for spec in &ctx.cfg.plot.curves.clone() {
        if !spec.path.exists() {
            return Err(invalid(format!("curve file not found: {}", spec.path.display())));
        }
        ctx.manifest.record_input(&spec.path)?;
        let label = if spec.label.is_empty() {
            spec.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        } else {
            spec.label.clone()
        };
        curves.push((label, read_curve(&spec.path)?));
    }
    let svg = crate::plot::render(&ctx.cfg.plot.title, &curves)?;
    let path = ctx.out.join("accuracy.svg");
    std::fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
    ctx.manifest.record_output(&ctx.out, &path);
    println!("wrote {}", path.display());
    ctx.finish()
}

/// Parse an accuracy curve CSV: `checkpoint,accuracy` header then one
/// point per line.
fn read_curve(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("checkpoint,accuracy") => {}
        other => {
            return Err(invalid(format!(
                "{}: expected header \"checkpoint,accuracy\", got {:?}",
                path.display(),
                other.unwrap_or("")
            )))
        }
    }
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (c, a) = line
            .split_once(',')
            .ok_or_else(|| invalid(format!("{} line {}: not a csv row", path.display(), i + 2)))?;
        let c: usize = c
            .parse()
            .map_err(|_| invalid(format!("{} line {}: bad checkpoint {c:?}", path.display(), i + 2)))?;
        let a: f64 = a
            .parse()
            .map_err(|_| invalid(format!("{} line {}: bad accuracy {a:?}", path.display(), i + 2)))?;
        points.push((c, a));
    }
    if points.is_empty() {
        return Err(invalid(format!("{}: no data rows", path.display())));
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_parser_accepts_report_output() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        std::fs::write(&path, "checkpoint,accuracy\n2,0.5\n4,0.75\n").unwrap();
        assert_eq!(read_curve(&path).unwrap(), vec![(2, 0.5), (4, 0.75)]);
    }

    #[test]
    fn curve_parser_rejects_wrong_header_and_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        std::fs::write(&path, "step,acc\n2,0.5\n").unwrap();
        assert!(read_curve(&path).unwrap_err().to_string().contains("header"));
        std::fs::write(&path, "checkpoint,accuracy\ntwo,0.5\n").unwrap();
        assert!(read_curve(&path).unwrap_err().to_string().contains("bad checkpoint"));
    }

    #[test]
    fn delta_tags_are_filename_safe() {
        assert_eq!(delta_tag(&DeltaSpec::Fraction(0.2)), "frac0.2");
        assert_eq!(delta_tag(&DeltaSpec::FixedSteps(10)), "fixed10");
    }
}
