use std::path::{Path, PathBuf};

use serde::Serialize;
use tcp_core::config::RunConfig;
use tcp_core::error::{Error, Result};
use tcp_core::eval::{
    evaluate_prompt, harmonic_mean, parallel_map, run_ablation_sweep, run_seed, zero_shot_accuracy, EvalReport,
    SeedRow, SweepAxis,
};
use tcp_core::selftest::{gradcheck, render_table, selftest, GRADCHECK_TOL};
use tcp_core::task::save_dataset;
use tcp_core::train::{load_checkpoint, metrics_csv, timing_csv, train_run, Experiment, TrainOptions};

use crate::manifest::RunManifest;

/// A command ran to completion but its check did not pass.
pub struct CheckFailed;

pub type Outcome = std::result::Result<(), CheckFailed>;

pub struct Output {
    dir: PathBuf,
}

impl Output {
    pub fn new(dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.clone(), e))?;
        Ok(Self { dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.to_path_buf(), e))?;
        }
        std::fs::write(&path, contents).map_err(|e| Error::io(path.clone(), e))?;
        Ok(path)
    }

    /// Write the manifest before any computation and echo it.
    pub fn manifest(&self, command: &str, config: &RunConfig) -> Result<()> {
        let text = RunManifest::new(command, config.clone()).to_json();
        self.write("manifest.json", &text)?;
        print!("{text}");
        Ok(())
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn done(path: &Path) {
    eprintln!("wrote {}", path.display());
}

#[derive(Serialize)]
struct TaskSummary {
    base_classes: Vec<usize>,
    new_classes: Vec<usize>,
    train_base: usize,
    test_base: usize,
    test_new: usize,
    zero_shot_base: f64,
    zero_shot_new: f64,
    zero_shot_h: f64,
    encoder_checksum: String,
}

pub fn gen_task(config: &RunConfig, out: &Output) -> Result<Outcome> {
    out.manifest("gen-task", config)?;
    let exp = Experiment::prepare(config)?;
    for (name, ds) in [
        ("train_base.bin", &exp.task.train_base),
        ("test_base.bin", &exp.task.test_base),
        ("test_new.bin", &exp.task.test_new),
    ] {
        let path = out.path(name);
        save_dataset(ds, &path)?;
        done(&path);
    }
    let (zb, zn) = zero_shot_accuracy(&exp)?;
    let summary = TaskSummary {
        base_classes: exp.task.base_classes.clone(),
        new_classes: exp.task.new_classes.clone(),
        train_base: exp.task.train_base.len(),
        test_base: exp.task.test_base.len(),
        test_new: exp.task.test_new.len(),
        zero_shot_base: zb,
        zero_shot_new: zn,
        zero_shot_h: harmonic_mean(zb, zn)?,
        encoder_checksum: format!("{:016x}", exp.encoder.checksum()),
    };
    done(&out.write("report.json", &to_json(&summary))?);
    println!("zero-shot base {:.4} new {:.4}", zb, zn);
    Ok(Ok(()))
}

pub fn train(config: &RunConfig, out: &Output, resume: Option<&Path>, every_epoch: bool) -> Result<Outcome> {
    out.manifest("train", config)?;
    let exp = Experiment::prepare(config)?;
    let start = match resume {
        Some(p) => load_checkpoint(p)?,
        None => exp.initial_checkpoint()?,
    };
    let frozen = exp.frozen_checksums();
    let options = TrainOptions {
        checkpoint_path: Some(out.path("checkpoint.json")),
        checkpoint_every_epoch: every_epoch,
    };
    let outcome = train_run(&exp, start, &options)?;
    if exp.frozen_checksums() != frozen {
        return Err(Error::contract("frozen weights changed during training"));
    }
    done(&out.path("checkpoint.json"));
    done(&out.write("metrics.csv", &metrics_csv(&outcome.metrics))?);
    done(&out.write("timing.csv", &timing_csv(&outcome.metrics))?);
    let (base, new) = evaluate_prompt(&exp, &outcome.checkpoint.prompt)?;
    let row = SeedRow {
        seed: config.train.run_seed,
        base,
        new,
        h: harmonic_mean(base, new)?,
        initial_loss: outcome.metrics.first().map(|m| m.total),
        final_loss: outcome.metrics.last().map(|m| m.total),
        steps: outcome.checkpoint.step,
    };
    let report = EvalReport::from_rows(config, vec![row.clone()]);
    done(&out.write("report.json", &report.to_json())?);
    println!("base {:.4} new {:.4} H {:.4} after {} steps", row.base, row.new, row.h, row.steps);
    Ok(Ok(()))
}

fn mode_table(report: &EvalReport) -> String {
    format!(
        "| mode | Base | New | H |\n|---|---|---|---|\n| {} | {:.2} ± {:.2} | {:.2} ± {:.2} | {:.2} ± {:.2} |\n",
        report.mode,
        100.0 * report.mean.base,
        100.0 * report.std.base,
        100.0 * report.mean.new,
        100.0 * report.std.new,
        100.0 * report.mean.h,
        100.0 * report.std.h
    )
}

pub fn eval(config: &RunConfig, out: &Output, checkpoint: Option<&Path>, jobs: usize) -> Result<Outcome> {
    out.manifest("eval", config)?;
    let report = match checkpoint {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            ckpt.check_compatible(config)?;
            let exp = Experiment::prepare(config)?;
            let (base, new) = evaluate_prompt(&exp, &ckpt.prompt)?;
            let row = SeedRow {
                seed: config.task.task_seed,
                base,
                new,
                h: harmonic_mean(base, new)?,
                initial_loss: None,
                final_loss: None,
                steps: ckpt.step,
            };
            EvalReport::from_rows(config, vec![row])
        }
        None => {
            let runs = parallel_map(&config.eval.seeds, jobs, |&s| run_seed(config, s));
            let mut rows = Vec::with_capacity(runs.len());
            for run in runs {
                let run = run?;
                out.write(&format!("metrics/seed-{}.csv", run.row.seed), &metrics_csv(&run.metrics))?;
                rows.push(run.row);
            }
            EvalReport::from_rows(config, rows)
        }
    };
    done(&out.write("report.json", &report.to_json())?);
    let table = mode_table(&report);
    done(&out.write("table.md", &table)?);
    print!("{table}");
    Ok(Ok(()))
}

pub fn sweep(config: &RunConfig, out: &Output, axis: SweepAxis, values: Option<Vec<String>>, jobs: usize) -> Result<Outcome> {
    let values = values.unwrap_or_else(|| axis.default_values(config));
    for v in &values {
        axis.apply(config, v)?;
    }
    out.manifest("sweep", config)?;
    let report = run_ablation_sweep(config, axis, &values, jobs)?;
    done(&out.write("sweep.csv", &report.to_csv())?);
    done(&out.write("report.json", &to_json(&report))?);
    let table = report.to_markdown();
    done(&out.write("table.md", &table)?);
    print!("{table}");
    Ok(Ok(()))
}

#[derive(Serialize)]
struct GradcheckSummary {
    max_rel_error: f64,
    tolerance: f64,
    coordinates: usize,
    worst: Option<(usize, usize)>,
    passed: bool,
}

pub fn gradcheck_cmd(config: &RunConfig, out: &Output) -> Result<Outcome> {
    out.manifest("gradcheck", config)?;
    let r = gradcheck(config)?;
    let passed = r.max_rel_error < GRADCHECK_TOL;
    let summary = GradcheckSummary {
        max_rel_error: r.max_rel_error,
        tolerance: GRADCHECK_TOL,
        coordinates: r.coordinates,
        worst: r.worst,
        passed,
    };
    done(&out.write("report.json", &to_json(&summary))?);
    println!(
        "max relative error {:.3e} over {} coordinates: {}",
        r.max_rel_error,
        r.coordinates,
        if passed { "pass" } else { "FAIL" }
    );
    Ok(if passed { Ok(()) } else { Err(CheckFailed) })
}

pub fn selftest_cmd() -> Result<Outcome> {
    let checks = selftest();
    print!("{}", render_table(&checks));
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} passed, {failed} failed", checks.len() - failed);
    Ok(if failed == 0 { Ok(()) } else { Err(CheckFailed) })
}
