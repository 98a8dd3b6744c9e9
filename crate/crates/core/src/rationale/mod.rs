//! Decoding conditions, evidence-chain linearization and rationale backends.

pub mod chain;
pub mod remote;
pub mod seq2seq;
pub mod template;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use chain::{build_condition, linearize, DEFAULT_RECENT, parse_chain, DecodingCondition, LinearizedChain, Segment, SegmentKind};
pub use remote::{RemoteClient, RemoteConfig};
pub use seq2seq::{DecoderConfig, Seq2Seq, Vocab};
pub use template::{render_rationale, template_rationale, topic_of, AnchorMention};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Template,
    Trainable,
    Remote,
}

impl BackendKind {
    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Template => "template",
            BackendKind::Trainable => "trainable",
            BackendKind::Remote => "remote",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "template" => Ok(BackendKind::Template),
            "trainable" => Ok(BackendKind::Trainable),
            "remote" => Ok(BackendKind::Remote),
            _ => Err(Error::Config(format!("unknown backend {s:?}"))),
        }
    }
}

#[derive(Debug)]
pub enum Backend {
    Template,
    Trainable(Box<Seq2Seq>),
    Remote(RemoteClient),
}

impl Backend {
    pub fn kind(&self) -> BackendKind {
        match self {
            Backend::Template => BackendKind::Template,
            Backend::Trainable(_) => BackendKind::Trainable,
            Backend::Remote(_) => BackendKind::Remote,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rationale {
    pub text: String,
    pub latency_ms: f64,
    pub backend: BackendKind,
}

/// Runs one backend on the chain and times the call.
pub fn generate_rationale(chain: &LinearizedChain, backend: &Backend) -> Result<Rationale> {
    let start = Instant::now();
    let text = match backend {
        Backend::Template => template_rationale(chain),
        Backend::Trainable(m) => m.generate(&chain.text),
        Backend::Remote(c) => c.generate(&chain.text)?,
    };
    Ok(Rationale {
        text,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        backend: backend.kind(),
    })
}

/// Like [`generate_rationale`], but a failed remote call falls back to the
/// template. The fallback's latency includes the failed attempt.
pub fn generate_with_fallback(chain: &LinearizedChain, backend: &Backend) -> Rationale {
    let start = Instant::now();
    match generate_rationale(chain, backend) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("{} backend failed, using template: {e}", backend.kind());
            Rationale {
                text: template_rationale(chain),
                latency_ms: start.elapsed().as_secs_f64() * 1e3,
                backend: BackendKind::Template,
            }
        }
    }
}
