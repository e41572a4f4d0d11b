//! Time-phased trainability: which parameters the optimizer may touch at a
//! given step.
//!
//! The feature extractor is trainable only under the `all` descriptor; the
//! partial descriptors keep it frozen along with the projection, quantizer,
//! positional convolution and mask embedding.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezeDescriptor {
    OutputHeadOnly,
    AllExceptFeatureExtractor,
    LastBlocks(usize),
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreezePhase {
    /// Steps `< until_step` use this phase; `None` marks the open-ended tail.
    #[serde(default)]
    pub until_step: Option<u64>,
    pub descriptor: FreezeDescriptor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreezePlan {
    pub phases: Vec<FreezePhase>,
}

impl Default for FreezePlan {
    fn default() -> Self {
        FreezePlan {
            phases: vec![FreezePhase { until_step: None, descriptor: FreezeDescriptor::All }],
        }
    }
}

impl FreezePlan {
    pub fn single(descriptor: FreezeDescriptor) -> Self {
        FreezePlan { phases: vec![FreezePhase { until_step: None, descriptor }] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::InvalidArgument("freeze plan has no phases".into()));
        }
        let mut prev: Option<u64> = None;
        for (i, ph) in self.phases.iter().enumerate() {
            let last = i + 1 == self.phases.len();
            match (ph.until_step, last) {
                (None, false) => {
                    return Err(Error::InvalidArgument(format!(
                        "freeze phase {i} has no until_step but is not the final phase"
                    )));
                }
                (Some(_), true) => {
                    return Err(Error::InvalidArgument(
                        "final freeze phase must be open-ended (no until_step)".into(),
                    ));
                }
                (Some(u), false) => {
                    if let Some(p) = prev {
                        if u <= p {
                            return Err(Error::InvalidArgument(format!(
                                "freeze phase boundaries must increase strictly: {u} after {p}"
                            )));
                        }
                    }
                    if u == 0 {
                        return Err(Error::InvalidArgument(
                            "freeze phase boundary 0 would never apply".into(),
                        ));
                    }
                    prev = Some(u);
                }
                (None, true) => {}
            }
        }
        Ok(())
    }

    pub fn descriptor_at(&self, step: u64) -> FreezeDescriptor {
        for ph in &self.phases {
            match ph.until_step {
                Some(u) if step < u => return ph.descriptor,
                Some(_) => continue,
                None => return ph.descriptor,
            }
        }
        self.phases.last().map(|p| p.descriptor).unwrap_or(FreezeDescriptor::All)
    }
}

/// Per-parameter trainable flags for `step`, in the spec's parameter order.
pub fn resolve_freeze(
    plan: &FreezePlan,
    spec: &ModelSpec,
    step: u64,
) -> Result<IndexMap<String, bool>> {
    plan.validate()?;
    let descriptor = plan.descriptor_at(step);
    let n = spec.encoder.num_blocks;
    if let FreezeDescriptor::LastBlocks(m) = descriptor {
        if m == 0 || m > n {
            return Err(Error::InvalidArgument(format!(
                "last-blocks descriptor asks for {m} of {n} blocks"
            )));
        }
    }
    let mut flags = IndexMap::new();
    for (name, _) in spec.expected_params() {
        let trainable = match descriptor {
            FreezeDescriptor::All => true,
            FreezeDescriptor::OutputHeadOnly => name.starts_with("head."),
            FreezeDescriptor::AllExceptFeatureExtractor => !name.starts_with("extractor."),
            FreezeDescriptor::LastBlocks(m) => {
                if name.starts_with("head.") {
                    true
                } else if let Some(rest) = name.strip_prefix("encoder.block") {
                    let idx: usize = rest
                        .split('.')
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::Shape(format!("unparseable block name `{name}`")))?;
                    idx >= n - m
                } else {
                    false
                }
            }
        };
        flags.insert(name, trainable);
    }
    Ok(flags)
}
