//! Gradient self-check and the quick invariant suite behind `tcp selftest`.

use std::time::Instant;

use crate::autodiff::{finite_diff_check, GradCheckReport, Graph, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::harmonic_mean;
use crate::objective::{contrastive_loss, kg_consistency_loss, total_loss};
use crate::prompt::{build_classifier, classifier_value, InjectionConfig, PromptState, PromptVars, TkeVars};
use crate::rng::{tags, SplitMix64};
use crate::task::FewShotDataset;
use crate::tensor::Tensor;
use crate::train::{metrics_csv, train_run, Checkpoint, Experiment, Mode, TrainOptions};

/// Finite-difference step used by [`gradcheck`].
pub const GRADCHECK_STEP: f64 = 1e-6;
/// Pass threshold on the maximum relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// The small configuration gradients are verified on.
pub fn gradcheck_config() -> RunConfig {
    let mut c = RunConfig::tiny();
    c.task.num_classes = 4;
    c.train.mode = Mode::Tcp;
    c
}

/// Check every trainable coordinate of the full training loss on the whole
/// base training split. Parameters start from the mode's initial state with
/// a seeded perturbation so no coordinate sits at a trivial value.
pub fn gradcheck(config: &RunConfig) -> Result<GradCheckReport> {
    let exp = Experiment::prepare(config)?;
    let mut prompt = exp.initial_prompt()?;
    let mut rng = SplitMix64::derive(config.train.run_seed, tags::GRADCHECK);
    for t in prompt.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.normal();
        }
    }
    let params: Vec<Tensor> = prompt.tensors().into_iter().cloned().collect();
    let base_vocab = exp.base_vocab()?;
    let w_clip = exp.w_clip_rows(&exp.task.base_classes)?;
    let features = exp.task.train_base.features();
    let labels = exp.task.train_base.labels().to_vec();
    let c = &exp.config;
    let template = prompt.tke.clone();

    let loss = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let bound = exp.encoder.bind(g);
        let tke = template.as_ref().map(|t| TkeVars {
            w_down: vars[1],
            w_up: vars[2],
            prompt_len: t.prompt_len,
            token_dim: t.token_dim,
            activation: t.activation,
        });
        let pv = PromptVars { shared: vars[0], tke };
        let wc = g.constant(w_clip.clone());
        let w = build_classifier(g, &pv, &c.injection, wc, &bound, &base_vocab)?;
        let x = g.constant(features.clone());
        let ce = contrastive_loss(g, x, &labels, w, c.loss.temperature)?;
        let kg = kg_consistency_loss(g, wc, w)?;
        total_loss(g, ce, kg, c.train.mode.kg_weight(&c.loss))
    };
    finite_diff_check(loss, &params, GRADCHECK_STEP)
}

/// One named row of the self-test table.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: f64,
}

fn run_check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Check {
        name,
        passed,
        detail,
        millis: start.elapsed().as_secs_f64() * 1e3,
    }
}

fn tke_prompt(exp: &Experiment) -> Result<PromptState> {
    let mut p = exp.initial_prompt()?;
    let mut rng = SplitMix64::new(7);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    Ok(p)
}

fn fusion_reductions() -> Result<(bool, String)> {
    let mut cfg = gradcheck_config();
    cfg.encoder.num_layers = 3;
    cfg.injection = InjectionConfig::for_depth(3);
    let exp = Experiment::prepare(&cfg)?;
    let prompt = tke_prompt(&exp)?;
    let plain = PromptState {
        shared: prompt.shared.clone(),
        tke: None,
    };
    let none = classifier_value(&plain, &cfg.injection, &exp.w_clip, &exp.encoder, &exp.vocab)?;
    let mut ok = true;
    for l in 1..=3 {
        let mut inj = InjectionConfig {
            insert_layer: l,
            layers: Vec::new(),
            fusion_weight: 0.0,
        };
        let off = classifier_value(&prompt, &inj, &exp.w_clip, &exp.encoder, &exp.vocab)?;
        ok &= off.bit_eq(&none);
        inj.fusion_weight = 1.0;
        let full = classifier_value(&prompt, &inj, &exp.w_clip, &exp.encoder, &exp.vocab)?;
        // After the last layer the EOT slot is untouched, so replacement is invisible.
        ok &= full.all_finite() && (l == 3 || !full.bit_eq(&none));
    }
    Ok((ok, "fusion weight 0 equals no injection at l = 1..3".into()))
}

fn objective_reductions() -> Result<(bool, String)> {
    let mut g = Graph::new();
    let s = 0.5f64.sqrt();
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]])?);
    let w2 = g.constant(Tensor::from_rows(&[vec![s, s], vec![s, -s]])?);
    let w1 = g.constant(Tensor::from_rows(&[vec![0.0, 1.0]])?);
    let two = contrastive_loss(&mut g, x, &[0], w2, 0.01)?;
    let one = contrastive_loss(&mut g, x, &[0], w1, 0.01)?;
    let kg = kg_consistency_loss(&mut g, w2, w2)?;
    let total = total_loss(&mut g, two, kg, 0.0)?;
    let ok = (g.value(two).item() - std::f64::consts::LN_2).abs() < 1e-12
        && g.value(one).item() == 0.0
        && g.value(kg).item() == 0.0
        && g.value(total).item().to_bits() == g.value(two).item().to_bits();
    Ok((ok, format!("two-class symmetric loss {:.15}", g.value(two).item())))
}

fn harmonic_pins() -> Result<(bool, String)> {
    let a = harmonic_mean(82.38, 67.96)?;
    let b = harmonic_mean(80.73, 73.6)?;
    Ok(((a - 74.48).abs() < 0.01 && (b - 77.00).abs() < 0.01, format!("{a:.4}, {b:.4}")))
}

fn short_run() -> Result<(Experiment, Checkpoint, String)> {
    let mut cfg = gradcheck_config();
    cfg.train.max_steps = Some(6);
    cfg.train.batch_size = 3;
    let exp = Experiment::prepare(&cfg)?;
    let out = train_run(&exp, exp.initial_checkpoint()?, &TrainOptions::default())?;
    let csv = metrics_csv(&out.metrics);
    Ok((exp, out.checkpoint, csv))
}

fn determinism() -> Result<(bool, String)> {
    let (_, a, csv_a) = short_run()?;
    let (_, b, csv_b) = short_run()?;
    Ok((a == b && csv_a == csv_b, format!("{} steps twice", a.step)))
}

fn frozen_weights() -> Result<(bool, String)> {
    let cfg = gradcheck_config();
    let exp = Experiment::prepare(&cfg)?;
    let (enc, clip) = (exp.encoder.checksum(), exp.w_clip.checksum());
    let mut c2 = cfg.clone();
    c2.train.max_steps = Some(4);
    let exp2 = Experiment::with_encoder(&c2, exp.encoder.clone())?;
    train_run(&exp2, exp2.initial_checkpoint()?, &TrainOptions::default())?;
    let ok = exp2.encoder.checksum() == enc && exp2.w_clip.checksum() == clip;
    Ok((ok, format!("encoder {enc:016x}")))
}

fn persistence() -> Result<(bool, String)> {
    let (exp, ckpt, _) = short_run()?;
    let ds = &exp.task.test_base;
    let back = FewShotDataset::from_bytes(&ds.to_bytes())?;
    let text = serde_json::to_string(&ckpt).map_err(|e| Error::Format(e.to_string()))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    Ok((&back == ds && ck == ckpt, format!("{} samples, step {}", back.len(), ck.step)))
}

/// Run the quick invariant suite.
pub fn selftest() -> Vec<Check> {
    vec![
        run_check("gradcheck", || {
            let r = gradcheck(&gradcheck_config())?;
            Ok((
                r.max_rel_error < GRADCHECK_TOL,
                format!("max rel error {:.3e} over {} coordinates", r.max_rel_error, r.coordinates),
            ))
        }),
        run_check("fusion-reductions", fusion_reductions),
        run_check("objective-reductions", objective_reductions),
        run_check("harmonic-mean", harmonic_pins),
        run_check("determinism", determinism),
        run_check("frozen-weights", frozen_weights),
        run_check("persistence", persistence),
    ]
}

/// Fixed-width pass/fail table.
pub fn render_table(checks: &[Check]) -> String {
    let mut out = format!("{:<22} {:<6} {:>9}  detail\n", "check", "result", "ms");
    for c in checks {
        out.push_str(&format!(
            "{:<22} {:<6} {:>9.1}  {}\n",
            c.name,
            if c.passed { "pass" } else { "FAIL" },
            c.millis,
            c.detail
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let checks = selftest();
        let table = render_table(&checks);
        assert!(checks.iter().all(|c| c.passed), "{table}");
    }
}
