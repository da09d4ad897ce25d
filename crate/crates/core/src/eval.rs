//! Base-to-new evaluation and ablation sweeps.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::prompt::{classifier_value, PromptInit, PromptState};
use crate::task::FewShotDataset;
use crate::tensor::Tensor;
use crate::train::{train_run, Checkpoint, Experiment, MetricRow, Mode, TrainOptions};

/// Fraction of samples whose highest-similarity class is the label. Ties go
/// to the lowest class index.
pub fn evaluate_accuracy(ds: &FewShotDataset, classifier: &Tensor) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::contract("accuracy of an empty dataset"));
    }
    if classifier.rank() != 2 || classifier.shape()[1] != ds.dim {
        return Err(Error::Shape {
            op: "evaluate_accuracy",
            lhs: classifier.shape().to_vec(),
            rhs: vec![ds.classes.len(), ds.dim],
        });
    }
    if classifier.shape()[0] != ds.classes.len() {
        return Err(Error::contract(format!(
            "{} classifier rows for {} classes",
            classifier.shape()[0],
            ds.classes.len()
        )));
    }
    let correct = (0..ds.len())
        .filter(|&i| predict(classifier, ds.feature(i)) == ds.labels()[i])
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Index of the row with the largest inner product with `x`.
pub fn predict(classifier: &Tensor, x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (c, row) in classifier.rows().enumerate() {
        let s: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
        if s > best_score {
            best = c;
            best_score = s;
        }
    }
    best
}

/// `2ab / (a + b)`, zero when both are zero.
pub fn harmonic_mean(base: f64, new: f64) -> Result<f64> {
    if base < 0.0 || new < 0.0 || base.is_nan() || new.is_nan() {
        return Err(Error::contract(format!("harmonic mean of {base} and {new}")));
    }
    if base + new == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * base * new / (base + new))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub base: f64,
    pub new: f64,
    pub h: f64,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub base: f64,
    pub new: f64,
    pub h: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub rows: Vec<SeedRow>,
    /// Arithmetic means of the per-seed rows.
    pub mean: Aggregate,
    /// Population standard deviations of the per-seed rows.
    pub std: Aggregate,
}

impl EvalReport {
    pub fn from_rows(config: &RunConfig, rows: Vec<SeedRow>) -> Self {
        let (mean, std) = aggregate(&rows);
        Self {
            mode: config.train.mode,
            config: config.clone(),
            seeds: rows.iter().map(|r| r.seed).collect(),
            rows,
            mean,
            std,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }
}

fn aggregate(rows: &[SeedRow]) -> (Aggregate, Aggregate) {
    let n = rows.len().max(1) as f64;
    let mean_of = |f: fn(&SeedRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mean = Aggregate {
        base: mean_of(|r| r.base),
        new: mean_of(|r| r.new),
        h: mean_of(|r| r.h),
    };
    let std_of = |f: fn(&SeedRow) -> f64, m: f64| (rows.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / n).sqrt();
    let std = Aggregate {
        base: std_of(|r| r.base, mean.base),
        new: std_of(|r| r.new, mean.new),
        h: std_of(|r| r.h, mean.h),
    };
    (mean, std)
}

/// Base and new accuracy of a prompt state on an experiment's test splits.
/// The new-class classifier is built from new-class token ids and zero-shot
/// embeddings only.
pub fn evaluate_prompt(exp: &Experiment, prompt: &PromptState) -> Result<(f64, f64)> {
    let inj = &exp.config.injection;
    let base_w = classifier_value(
        prompt,
        inj,
        &exp.w_clip_rows(&exp.task.base_classes)?,
        &exp.encoder,
        &exp.base_vocab()?,
    )?;
    let new_w = classifier_value(
        prompt,
        inj,
        &exp.w_clip_rows(&exp.task.new_classes)?,
        &exp.encoder,
        &exp.new_vocab()?,
    )?;
    Ok((
        evaluate_accuracy(&exp.task.test_base, &base_w)?,
        evaluate_accuracy(&exp.task.test_new, &new_w)?,
    ))
}

/// Zero-shot accuracy of the frozen template embeddings.
pub fn zero_shot_accuracy(exp: &Experiment) -> Result<(f64, f64)> {
    let base = evaluate_accuracy(&exp.task.test_base, &exp.w_clip_rows(&exp.task.base_classes)?)?;
    let new = evaluate_accuracy(&exp.task.test_new, &exp.w_clip_rows(&exp.task.new_classes)?)?;
    Ok((base, new))
}

/// Everything produced for one seed.
pub struct SeedRun {
    pub row: SeedRow,
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRow>,
}

/// Train on the base split of one seed and evaluate on both splits.
pub fn run_seed(config: &RunConfig, seed: u64) -> Result<SeedRun> {
    let cfg = config.for_seed(seed);
    let exp = Experiment::prepare(&cfg)?;
    let frozen = exp.frozen_checksums();
    let outcome = train_run(&exp, exp.initial_checkpoint()?, &TrainOptions::default())?;
    if exp.frozen_checksums() != frozen {
        return Err(Error::contract("frozen weights changed during training"));
    }
    let (base, new) = evaluate_prompt(&exp, &outcome.checkpoint.prompt)?;
    let row = SeedRow {
        seed,
        base,
        new,
        h: harmonic_mean(base, new)?,
        initial_loss: outcome.metrics.first().map(|m| m.total),
        final_loss: outcome.metrics.last().map(|m| m.total),
        steps: outcome.checkpoint.step,
    };
    Ok(SeedRun {
        row,
        checkpoint: outcome.checkpoint,
        metrics: outcome.metrics,
    })
}

/// Run `f` over `items` on up to `jobs` threads, keeping input order.
pub fn parallel_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// Per-seed train/evaluate over `config.eval.seeds`.
pub fn run_base_to_new(config: &RunConfig, jobs: usize) -> Result<EvalReport> {
    config.validate()?;
    let rows = parallel_map(&config.eval.seeds, jobs, |&s| run_seed(config, s).map(|r| r.row));
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(config, rows))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    InsertLayer,
    PromptLength,
    DMid,
    FusionLambda,
    Template,
    LayerSets,
    Mode,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 7] = [
        SweepAxis::InsertLayer,
        SweepAxis::PromptLength,
        SweepAxis::DMid,
        SweepAxis::FusionLambda,
        SweepAxis::Template,
        SweepAxis::LayerSets,
        SweepAxis::Mode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::InsertLayer => "insert_layer",
            SweepAxis::PromptLength => "prompt_length",
            SweepAxis::DMid => "d_mid",
            SweepAxis::FusionLambda => "fusion_lambda",
            SweepAxis::Template => "template",
            SweepAxis::LayerSets => "layer_sets",
            SweepAxis::Mode => "mode",
        }
    }

    /// The value list used when none is given on the command line.
    pub fn default_values(self, config: &RunConfig) -> Vec<String> {
        let strs = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        match self {
            SweepAxis::InsertLayer => (1..=config.encoder.num_layers).map(|l| l.to_string()).collect(),
            SweepAxis::PromptLength => strs(&["1", "2", "4", "8", "16"]),
            SweepAxis::DMid => strs(&["2", "4", "8", "16"]),
            SweepAxis::FusionLambda => strs(&["0", "0.25", "0.5", "0.75", "1"]),
            SweepAxis::Template => strs(&["random", "template-embedding"]),
            SweepAxis::LayerSets => strs(&["single", "two", "three"]),
            SweepAxis::Mode => strs(&["coop", "coop+tke", "kgcoop", "tcp"]),
        }
    }

    /// `config` with this axis set to `value`, validated.
    pub fn apply(self, config: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut c = config.clone();
        let key = format!("sweep.{}", self.name());
        let bad = |msg: String| Error::config(key.clone(), msg);
        let parse_usize = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("`{v}` is not an integer")));
        match self {
            SweepAxis::InsertLayer => {
                c.injection.insert_layer = parse_usize(value)?;
                c.injection.layers.clear();
            }
            SweepAxis::PromptLength => c.set_prompt_length(parse_usize(value)?),
            SweepAxis::DMid => c.prompt.tke_mid_dim = parse_usize(value)?,
            SweepAxis::FusionLambda => {
                c.injection.fusion_weight = value
                    .parse::<f64>()
                    .map_err(|_| bad(format!("`{value}` is not a number")))?;
            }
            SweepAxis::Template => {
                c.prompt.init = match value {
                    "random" => PromptInit::Random,
                    "template-embedding" => PromptInit::TemplateEmbedding,
                    other => return Err(bad(format!("unknown template `{other}`"))),
                };
            }
            SweepAxis::LayerSets => {
                let l = c.injection.insert_layer;
                let count = match value {
                    "single" => 1,
                    "two" => 2,
                    "three" => 3,
                    other => {
                        c.injection.layers = other
                            .split('+')
                            .map(parse_usize)
                            .collect::<Result<Vec<_>>>()?;
                        0
                    }
                };
                if count > 0 {
                    if count > l {
                        return Err(bad(format!("{count} layers ending at {l} do not fit")));
                    }
                    c.injection.layers = (l + 1 - count..=l).collect();
                }
            }
            SweepAxis::Mode => c.train.mode = value.parse()?,
        }
        c.validate().map_err(|e| match e {
            Error::Config { key: k, msg } => Error::config(k, format!("{msg} (sweep value `{value}`)")),
            other => other,
        })?;
        Ok(c)
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config("sweep.axis", format!("unknown axis `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub base: f64,
    pub new: f64,
    pub h: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    pub value: String,
    pub mean: Aggregate,
    pub std: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
    pub aggregate: Vec<SweepAggregate>,
}

impl SweepReport {
    /// Long form: `axis,value,seed,base,new,h`, accuracies in [0, 1].
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,value,seed,base,new,h\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:?},{:?},{:?}\n",
                r.axis, r.value, r.seed, r.base, r.new, r.h
            ));
        }
        out
    }

    /// Aggregate table in percent, two decimals.
    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "| {} | Base | New | H |\n|---|---|---|---|\n",
            self.axis.name()
        );
        for a in &self.aggregate {
            out.push_str(&format!(
                "| {} | {:.2} ± {:.2} | {:.2} ± {:.2} | {:.2} ± {:.2} |\n",
                a.value,
                100.0 * a.mean.base,
                100.0 * a.std.base,
                100.0 * a.mean.new,
                100.0 * a.std.new,
                100.0 * a.mean.h,
                100.0 * a.std.h
            ));
        }
        out
    }

    pub fn aggregate_for(&self, value: &str) -> Option<&SweepAggregate> {
        self.aggregate.iter().find(|a| a.value == value)
    }
}

/// One base-to-new run per `(value, seed)`. Every value is validated before
/// any training starts.
pub fn run_ablation_sweep(config: &RunConfig, axis: SweepAxis, values: &[String], jobs: usize) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::config("sweep.values", "no values given"));
    }
    let configs = values
        .iter()
        .map(|v| axis.apply(config, v))
        .collect::<Result<Vec<_>>>()?;
    let points: Vec<(usize, u64)> = (0..values.len())
        .flat_map(|vi| config.eval.seeds.iter().map(move |&s| (vi, s)))
        .collect();
    let results = parallel_map(&points, jobs, |&(vi, seed)| run_seed(&configs[vi], seed).map(|r| r.row));
    let mut rows = Vec::with_capacity(points.len());
    let mut per_value: Vec<Vec<SeedRow>> = vec![Vec::new(); values.len()];
    for ((vi, _), res) in points.iter().zip(results) {
        let row = res?;
        rows.push(SweepRow {
            axis: axis.name().to_string(),
            value: values[*vi].clone(),
            seed: row.seed,
            base: row.base,
            new: row.new,
            h: row.h,
        });
        per_value[*vi].push(row);
    }
    let aggregate = values
        .iter()
        .zip(&per_value)
        .map(|(v, rs)| {
            let (mean, std) = aggregate(rs);
            SweepAggregate {
                value: v.clone(),
                mean,
                std,
            }
        })
        .collect();
    Ok(SweepReport {
        axis,
        values: values.to_vec(),
        seeds: config.eval.seeds.clone(),
        rows,
        aggregate,
    })
}
