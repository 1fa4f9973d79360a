//! Construction and enforcement of parameter-freeze masks: FreezeSG (low
//! style blocks plus their style projections), FreezeG (the same minus style
//! projections), an independently combinable FreezeD over the highest
//! discriminator blocks, and no-freeze.

use crate::error::{Error, Result};
use crate::optim::Adam;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreezeMode {
    None,
    FreezeG,
    FreezeSG,
}

impl std::str::FromStr for FreezeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(FreezeMode::None),
            "freezeg" => Ok(FreezeMode::FreezeG),
            "freezesg" => Ok(FreezeMode::FreezeSG),
            other => Err(Error::InvalidArgument(format!(
                "unknown freeze mode '{other}' (expected none|freezeg|freezesg)"
            ))),
        }
    }
}

impl std::fmt::Display for FreezeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FreezeMode::None => "none",
            FreezeMode::FreezeG => "freezeg",
            FreezeMode::FreezeSG => "freezesg",
        })
    }
}

/// A named mask over model parameters excluded from optimizer updates.
/// Plans are pure data; building one never touches the model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FreezePlan {
    pub mode: FreezeMode,
    pub k_blocks: usize,
    pub d_blocks: usize,
    /// Resolved names, sorted for determinism.
    pub frozen_names: Vec<String>,
}

impl Default for FreezePlan {
    fn default() -> Self {
        Self {
            mode: FreezeMode::None,
            k_blocks: 0,
            d_blocks: 0,
            frozen_names: Vec::new(),
        }
    }
}

fn block_res_of(name: &str, prefix: &str) -> Option<usize> {
    let rest = name.strip_prefix(prefix)?.strip_prefix('b')?;
    let end = rest.find('.')?;
    rest[..end].parse().ok()
}

/// Resolve a freeze plan against the generator and discriminator parameter
/// tables. `k_blocks` counts the lowest generator resolutions to freeze;
/// `d_blocks` counts the highest discriminator resolutions (0 disables
/// FreezeD).
pub fn build_plan(
    mode: FreezeMode,
    k_blocks: usize,
    d_blocks: usize,
    gen_names: &[String],
    disc_names: &[String],
) -> Result<FreezePlan> {
    let gen_res: BTreeSet<usize> = gen_names
        .iter()
        .filter_map(|n| block_res_of(n, "synthesis."))
        .collect();
    let disc_res: BTreeSet<usize> = disc_names
        .iter()
        .filter_map(|n| block_res_of(n, "disc."))
        .collect();
    if matches!(mode, FreezeMode::FreezeG | FreezeMode::FreezeSG) && k_blocks > gen_res.len() {
        return Err(Error::InvalidArgument(format!(
            "k_blocks {} exceeds the {} style blocks",
            k_blocks,
            gen_res.len()
        )));
    }
    if d_blocks > disc_res.len() {
        return Err(Error::InvalidArgument(format!(
            "d_blocks {} exceeds the {} discriminator blocks",
            d_blocks,
            disc_res.len()
        )));
    }
    let mut frozen: BTreeSet<String> = BTreeSet::new();
    match mode {
        FreezeMode::None => {}
        FreezeMode::FreezeG | FreezeMode::FreezeSG => {
            let low: HashSet<usize> = gen_res.iter().copied().take(k_blocks).collect();
            if k_blocks > 0 {
                frozen.insert("synthesis.input".to_string());
            }
            for name in gen_names {
                let Some(res) = block_res_of(name, "synthesis.") else {
                    continue;
                };
                if !low.contains(&res) {
                    continue;
                }
                let is_affine = name.contains(".affine") || name.contains("torgb_affine");
                if mode == FreezeMode::FreezeG && is_affine {
                    continue;
                }
                frozen.insert(name.clone());
            }
        }
    }
    // FreezeD is combinable with any generator mode.
    let high: HashSet<usize> = disc_res.iter().rev().copied().take(d_blocks).collect();
    for name in disc_names {
        if let Some(res) = block_res_of(name, "disc.") {
            if high.contains(&res) {
                frozen.insert(name.clone());
            }
        }
    }
    Ok(FreezePlan {
        mode,
        k_blocks,
        d_blocks,
        frozen_names: frozen.into_iter().collect(),
    })
}

impl FreezePlan {
    pub fn is_empty(&self) -> bool {
        self.frozen_names.is_empty()
    }

    pub fn frozen_set(&self) -> HashSet<String> {
        self.frozen_names.iter().cloned().collect()
    }

    /// Every frozen name must resolve against the live model tables; report a
    /// configuration error at startup rather than a surprise mid-run.
    pub fn ensure_resolves(&self, all_names: &HashSet<String>) -> Result<()> {
        let unresolved: Vec<&str> = self
            .frozen_names
            .iter()
            .filter(|n| !all_names.contains(*n))
            .map(|n| n.as_str())
            .collect();
        if unresolved.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "freeze plan names do not resolve: [{}]",
                unresolved.join(", ")
            )))
        }
    }
}

/// Mask an optimizer with the plan after validating that every frozen name
/// resolves against the live model.
pub fn apply_plan(plan: &FreezePlan, opt: &mut Adam, all_names: &HashSet<String>) -> Result<()> {
    plan.ensure_resolves(all_names)?;
    opt.set_frozen(plan.frozen_set());
    Ok(())
}
