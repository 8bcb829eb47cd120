//! Versioned text checkpoints for policies.
//!
//! Weights are written with Rust's shortest round-trip float formatting, so
//! loading a saved checkpoint reproduces every weight bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use super::{PolicyKind, RecurrentPolicy, ValueHead};

const MAGIC: &str = "netshrink-policy 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("checkpoint is a {found} policy, expected {expected}")]
    Kind { expected: &'static str, found: &'static str },
    #[error("checkpoint {field} is {found}, expected {expected}")]
    Dimension { field: &'static str, expected: usize, found: usize },
}

impl RecurrentPolicy {
    pub fn to_checkpoint_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC}");
        let _ = writeln!(s, "kind {}", self.kind.name());
        let _ = writeln!(s, "n_layers {}", self.n_layers);
        let _ = writeln!(s, "hidden_size {}", self.hidden_size);
        let _ = writeln!(s, "input_size {}", self.input_size);
        let _ = writeln!(s, "value_head {}", self.value_head.is_some() as u8);
        let _ = writeln!(s, "weights {}", self.weights.len());
        for w in &self.weights {
            let _ = writeln!(s, "{w:?}");
        }
        if let Some(v) = &self.value_head {
            for w in v.weights.iter().chain(std::iter::once(&v.bias)) {
                let _ = writeln!(s, "{w:?}");
            }
        }
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self, CheckpointError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| CheckpointError::Parse { line: 0, msg: format!("unexpected end, wanted {what}") })
        };
        let (line, head) = next("header")?;
        if head != MAGIC {
            return Err(CheckpointError::Parse { line, msg: format!("expected `{MAGIC}`") });
        }
        let mut field = |key: &str| -> Result<(usize, String), CheckpointError> {
            let (line, l) = next(key)?;
            match l.split_once(' ') {
                Some((k, v)) if k == key => Ok((line, v.to_string())),
                _ => Err(CheckpointError::Parse { line, msg: format!("expected `{key} <value>`") }),
            }
        };
        let int = |(line, v): (usize, String)| {
            v.parse::<usize>().map_err(|_| CheckpointError::Parse { line, msg: format!("bad integer `{v}`") })
        };
        let (kline, kname) = field("kind")?;
        let kind = PolicyKind::from_name(&kname)
            .ok_or_else(|| CheckpointError::Parse { line: kline, msg: format!("unknown kind `{kname}`") })?;
        let n_layers = int(field("n_layers")?)?;
        let hidden_size = int(field("hidden_size")?)?;
        let input_size = int(field("input_size")?)?;
        let has_value = int(field("value_head")?)? == 1;
        let n = int(field("weights")?)?;
        let mut policy = RecurrentPolicy { kind, n_layers, hidden_size, input_size, weights: Vec::new(), value_head: None };
        if policy.n_weights() != n {
            return Err(CheckpointError::Dimension { field: "weights", expected: policy.n_weights(), found: n });
        }
        let mut floats = |count: usize| -> Result<Vec<f64>, CheckpointError> {
            (0..count)
                .map(|_| {
                    let (line, v) = next("weight")?;
                    v.parse::<f64>().map_err(|_| CheckpointError::Parse { line, msg: format!("bad float `{v}`") })
                })
                .collect()
        };
        policy.weights = floats(n)?;
        if has_value {
            let mut v = floats(policy.top_dim() + 1)?;
            let bias = v.pop().unwrap_or(0.0);
            policy.value_head = Some(ValueHead { weights: v, bias });
        }
        Ok(policy)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }

    /// Checks that a loaded checkpoint can stand in for `template`.
    pub fn check_compatible(&self, template: &RecurrentPolicy) -> Result<(), CheckpointError> {
        if self.kind != template.kind {
            return Err(CheckpointError::Kind { expected: template.kind.name(), found: self.kind.name() });
        }
        let pairs = [
            ("input_size", template.input_size, self.input_size),
            ("hidden_size", template.hidden_size, self.hidden_size),
            ("n_layers", template.n_layers, self.n_layers),
        ];
        for (field, expected, found) in pairs {
            if expected != found {
                return Err(CheckpointError::Dimension { field, expected, found });
            }
        }
        Ok(())
    }
}
