//! Training objective: temperature-scaled cosine cross-entropy plus a
//! consistency penalty toward the frozen zero-shot class embeddings.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Tolerance on `‖row‖ = 1` for inputs that must be unit-normalized.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub kg_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.01,
            kg_weight: 8.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config("loss.temperature", "must be positive"));
        }
        if !(self.kg_weight >= 0.0) || !self.kg_weight.is_finite() {
            return Err(Error::config("loss.kg_weight", "must be non-negative"));
        }
        Ok(())
    }
}

fn check_unit_rows(g: &Graph, v: Var, what: &str) -> Result<()> {
    for (i, row) in g.value(v).rows().enumerate() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::contract(format!("{what} row {i} has norm {norm}")));
        }
    }
    Ok(())
}

/// Mean over the batch of `-log softmax(<x, w_i> / tau)[y]`.
pub fn contrastive_loss(g: &mut Graph, x: Var, labels: &[usize], w: Var, temperature: f64) -> Result<Var> {
    let (xs, ws) = (g.shape(x).to_vec(), g.shape(w).to_vec());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || xs[0] != labels.len() {
        return Err(Error::Shape {
            op: "contrastive_loss",
            lhs: xs,
            rhs: ws,
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= ws[0]) {
        return Err(Error::contract(format!("label {bad} out of range for {} classes", ws[0])));
    }
    if !(temperature > 0.0) {
        return Err(Error::contract("temperature must be positive"));
    }
    check_unit_rows(g, x, "feature")?;
    check_unit_rows(g, w, "classifier")?;

    let wt = g.permute(w, &[1, 0])?;
    let logits = g.matmul(x, wt)?;
    let logits = g.scale(logits, 1.0 / temperature);
    let logp = g.log_softmax(logits);
    let picked = g.pick_rows(logp, labels)?;
    let mean = g.mean(picked);
    Ok(g.scale(mean, -1.0))
}

/// Mean over classes of `‖w_clip_i - w_learned_i‖²`.
pub fn kg_consistency_loss(g: &mut Graph, w_clip: Var, w_learned: Var) -> Result<Var> {
    if g.shape(w_clip) != g.shape(w_learned) || g.shape(w_clip).len() != 2 {
        return Err(Error::Shape {
            op: "kg_consistency_loss",
            lhs: g.shape(w_clip).to_vec(),
            rhs: g.shape(w_learned).to_vec(),
        });
    }
    let n_c = g.shape(w_clip)[0];
    if n_c == 0 {
        return Err(Error::contract("consistency loss over zero classes"));
    }
    let diff = g.sub(w_clip, w_learned)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / n_c as f64))
}

/// `ce + weight · kg`. A zero weight returns `ce` itself.
pub fn total_loss(g: &mut Graph, ce: Var, kg: Var, weight: f64) -> Result<Var> {
    if !(weight >= 0.0) {
        return Err(Error::contract("kg weight must be non-negative"));
    }
    if weight == 0.0 {
        return Ok(ce);
    }
    let scaled = g.scale(kg, weight);
    g.add(ce, scaled)
}
