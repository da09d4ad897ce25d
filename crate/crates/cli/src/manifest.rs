//! Config resolution (defaults, file, flags) and the run manifest.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::Args;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tcp_core::config::RunConfig;
use tcp_core::error::{Error, Result};
use tcp_core::prompt::PromptInit;
use tcp_core::train::Mode;

pub const MANIFEST_FORMAT: &str = "tcp-manifest";
pub const MANIFEST_VERSION: u32 = 1;

/// Flags that override individual config fields.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// Config file (JSON run config, or a manifest from an earlier run).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub task_seed: Option<u64>,
    #[arg(long, global = true)]
    pub run_seed: Option<u64>,
    #[arg(long, global = true)]
    pub weight_seed: Option<u64>,
    /// Number of classes N_c.
    #[arg(long, global = true)]
    pub classes: Option<usize>,
    /// Training shots per base class.
    #[arg(long, global = true)]
    pub shots: Option<usize>,
    /// Sample noise standard deviation.
    #[arg(long, global = true)]
    pub sigma: Option<f64>,
    #[arg(long, global = true)]
    pub gap_strength: Option<f64>,
    #[arg(long, global = true)]
    pub insert_layer: Option<usize>,
    #[arg(long, global = true)]
    pub prompt_length: Option<usize>,
    #[arg(long, global = true)]
    pub d_mid: Option<usize>,
    /// Prompt fusion weight in [0, 1].
    #[arg(long, global = true)]
    pub fusion: Option<f64>,
    /// random or template-embedding.
    #[arg(long, global = true)]
    pub template: Option<String>,
    /// coop, kgcoop, tcp or coop+tke.
    #[arg(long, global = true)]
    pub mode: Option<Mode>,
    #[arg(long, global = true)]
    pub kg_weight: Option<f64>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub max_steps: Option<usize>,
    #[arg(long, global = true)]
    pub grad_clip: Option<f64>,
    /// Comma-separated evaluation seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))
}

/// Parse a config document, accepting either a bare run config or a manifest.
pub fn config_from_value(mut value: serde_json::Value) -> Result<RunConfig> {
    if value.get("format").and_then(|f| f.as_str()) == Some(MANIFEST_FORMAT) {
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: version,
                expected: MANIFEST_VERSION,
            });
        }
        value = value
            .get_mut("config")
            .map(serde_json::Value::take)
            .ok_or_else(|| Error::config("config", "manifest has no `config`"))?;
    }
    let explicit_seq_len = value.pointer("/encoder/seq_len").is_some();
    let mut config: RunConfig = serde_json::from_value(value).map_err(|e| Error::config("config", e.to_string()))?;
    if !explicit_seq_len {
        config.sync_seq_len();
    }
    Ok(config)
}

impl Overrides {
    /// Resolve `base`, then the config file, then flags.
    pub fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let mut merged = serde_json::to_value(&base).expect("serializable");
                let file = read_json(path)?;
                let file = if file.get("format").and_then(|f| f.as_str()) == Some(MANIFEST_FORMAT) {
                    serde_json::to_value(config_from_value(file)?).expect("serializable")
                } else {
                    // Unknown keys are caught by the typed parse below.
                    serde_json::from_value::<RunConfig>(file.clone())
                        .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
                    file
                };
                merge(&mut merged, &file);
                let explicit_seq_len = file.pointer("/encoder/seq_len").is_some();
                let mut c: RunConfig =
                    serde_json::from_value(merged).map_err(|e| Error::config("config", e.to_string()))?;
                if !explicit_seq_len {
                    c.sync_seq_len();
                }
                c
            }
            None => base,
        };
        self.apply(&mut c)?;
        c.validate()?;
        Ok(c)
    }

    fn apply(&self, c: &mut RunConfig) -> Result<()> {
        macro_rules! set {
            ($flag:ident => $($field:ident).+) => {
                if let Some(v) = self.$flag.clone() {
                    c.$($field).+ = v;
                }
            };
        }
        set!(task_seed => task.task_seed);
        set!(run_seed => train.run_seed);
        set!(weight_seed => encoder.weight_seed);
        set!(classes => task.num_classes);
        set!(shots => task.shots_per_class);
        set!(sigma => task.noise_sigma);
        set!(gap_strength => task.gap_strength);
        set!(d_mid => prompt.tke_mid_dim);
        set!(fusion => injection.fusion_weight);
        set!(mode => train.mode);
        set!(kg_weight => loss.kg_weight);
        set!(lr => train.learning_rate);
        set!(batch_size => train.batch_size);
        set!(epochs => train.epochs);
        set!(seeds => eval.seeds);
        if let Some(l) = self.insert_layer {
            c.injection.insert_layer = l;
            c.injection.layers.clear();
        }
        if let Some(m) = self.prompt_length {
            c.set_prompt_length(m);
        }
        if let Some(s) = self.max_steps {
            c.train.max_steps = Some(s);
        }
        if let Some(g) = self.grad_clip {
            c.train.grad_clip = Some(g);
        }
        if let Some(t) = &self.template {
            c.prompt.init = match t.as_str() {
                "random" => PromptInit::Random,
                "template-embedding" => PromptInit::TemplateEmbedding,
                other => return Err(Error::config("prompt.init", format!("unknown template `{other}`"))),
            };
        }
        Ok(())
    }
}

fn merge(into: &mut serde_json::Value, from: &serde_json::Value) {
    match (into, from) {
        (serde_json::Value::Object(a), serde_json::Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k.clone()).or_insert(serde_json::Value::Null), v);
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub command: String,
    /// `sha256("blob <len>\0" + canonical config JSON)`, git object framing.
    pub config_hash: String,
    pub started_unix_ms: u128,
    pub config: RunConfig,
}

pub fn content_hash(config: &RunConfig) -> String {
    let body = serde_json::to_vec(config).expect("serializable");
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", body.len()).as_bytes());
    h.update(&body);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: &str, config: RunConfig) -> Self {
        let started = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        Self {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: content_hash(&config),
            started_unix_ms: started,
            config,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }
}
