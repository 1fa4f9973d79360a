//! Layer swapping: merge a source generator's low-resolution blocks with a
//! target generator's high-resolution blocks at a chosen boundary, as a pure
//! checkpoint-to-checkpoint transform, plus a per-tensor diff report.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::generator::{ModelConfig, BASE_RESOLUTION};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Source,
    Target,
}

fn default_mapping_from() -> Side {
    Side::Target
}

/// A resolution boundary partitioning generator parameters: blocks at
/// resolutions below the boundary come from the source, blocks at or above it
/// from the target. The two extremes (boundary = 4 with target mapping,
/// boundary = 2*max with source mapping) select one checkpoint entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapPlan {
    pub boundary_resolution: usize,
    /// Side providing the mapping network; auxiliary tensors that belong to
    /// neither synthesis block (discriminator state) follow this side too.
    #[serde(default = "default_mapping_from")]
    pub mapping_from: Side,
}

impl Default for SwapPlan {
    fn default() -> Self {
        Self {
            boundary_resolution: 64,
            mapping_from: Side::Target,
        }
    }
}

impl SwapPlan {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let b = self.boundary_resolution;
        if !b.is_power_of_two() || b < BASE_RESOLUTION || b > cfg.resolution * 2 {
            return Err(Error::InvalidArgument(format!(
                "boundary {} must be a power of two in {}..={}",
                b,
                BASE_RESOLUTION,
                cfg.resolution * 2
            )));
        }
        Ok(())
    }

    /// All valid boundaries for a ladder, lowest to highest.
    pub fn boundaries(cfg: &ModelConfig) -> Vec<usize> {
        let mut out = cfg.ladder();
        out.push(cfg.resolution * 2);
        out
    }

    /// Assign a parameter name to its providing side. Total over the table:
    /// synthesis blocks split at the boundary, `synthesis.input` counts as a
    /// base-resolution block, everything else follows `mapping_from`.
    pub fn side_of(&self, name: &str) -> Result<Side> {
        if name == "synthesis.input" {
            return Ok(if BASE_RESOLUTION < self.boundary_resolution {
                Side::Source
            } else {
                Side::Target
            });
        }
        if let Some(rest) = name.strip_prefix("synthesis.b") {
            let res: usize = rest
                .split('.')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("unparseable synthesis block name {name}"))
                })?;
            return Ok(if res < self.boundary_resolution {
                Side::Source
            } else {
                Side::Target
            });
        }
        Ok(self.mapping_from)
    }
}

fn table_mismatch(a: &Checkpoint, b: &Checkpoint) -> Vec<String> {
    let mut report = Vec::new();
    let bmap = b.tensor_map();
    for (name, t) in &a.tensors {
        match bmap.get(name.as_str()) {
            Some(other) if other.shape() == t.shape() => {}
            Some(other) => report.push(format!(
                "{name}: shape {:?} vs {:?}",
                t.shape(),
                other.shape()
            )),
            None => report.push(format!("{name}: missing on one side")),
        }
    }
    let amap = a.tensor_map();
    for (name, _) in &b.tensors {
        if !amap.contains_key(name.as_str()) {
            report.push(format!("{name}: missing on one side"));
        }
    }
    report
}

fn ensure_compatible(a: &Checkpoint, b: &Checkpoint) -> Result<()> {
    if a.config != b.config {
        return Err(Error::IncompatibleCheckpoint(format!(
            "configs differ: {:?} vs {:?}",
            a.config, b.config
        )));
    }
    if !a.same_table(b) {
        return Err(Error::IncompatibleCheckpoint(format!(
            "parameter tables differ: [{}]",
            table_mismatch(a, b).join("; ")
        )));
    }
    Ok(())
}

/// Merge two checkpoints at the plan's boundary. Inputs are unmodified; the
/// output preserves the target's table order.
pub fn swap(source: &Checkpoint, target: &Checkpoint, plan: &SwapPlan) -> Result<Checkpoint> {
    ensure_compatible(source, target)?;
    plan.validate(&target.config)?;
    let source_map = source.tensor_map();
    let mut tensors = Vec::with_capacity(target.tensors.len());
    for (name, t) in &target.tensors {
        let side = plan.side_of(name)?;
        let tensor = match side {
            Side::Source => (*source_map
                .get(name.as_str())
                .expect("tables verified identical"))
            .clone(),
            Side::Target => t.clone(),
        };
        tensors.push((name.clone(), tensor));
    }
    Ok(Checkpoint {
        config: target.config.clone(),
        tensors,
    })
}

/// Per-name L2 distance between two checkpoints with identical tables. Zero
/// entries identify shared provenance.
pub fn diff(a: &Checkpoint, b: &Checkpoint) -> Result<Vec<(String, f64)>> {
    ensure_compatible(a, b)?;
    let bmap = b.tensor_map();
    Ok(a.tensors
        .iter()
        .map(|(name, t)| {
            let other = bmap
                .get(name.as_str())
                .expect("tables verified identical");
            let mut acc = 0.0f64;
            for (x, y) in t.data().iter().zip(other.data()) {
                let d = (*x - *y) as f64;
                acc += d * d;
            }
            (name.clone(), acc.sqrt())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discriminator::Discriminator;
    use crate::generator::Generator;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            resolution: 32,
            w_dim: 8,
            mapping_depth: 2,
            channel_max: 8,
            channel_floor: 4,
            mbstd: true,
            noise: true,
        }
    }

    fn toy_pair() -> (Checkpoint, Checkpoint) {
        let mut rng = ChaCha12Rng::seed_from_u64(60);
        let cfg = toy_cfg();
        let g1 = Generator::<f32>::init(cfg.clone(), &mut rng).unwrap();
        let d1 = Discriminator::<f32>::init(cfg.clone(), &mut rng).unwrap();
        let g2 = Generator::<f32>::init(cfg.clone(), &mut rng).unwrap();
        let d2 = Discriminator::<f32>::init(cfg, &mut rng).unwrap();
        (
            Checkpoint::from_models(&g1, Some(&d1)),
            Checkpoint::from_models(&g2, Some(&d2)),
        )
    }

    fn bit_identical(a: &Checkpoint, b: &Checkpoint) -> bool {
        a.same_table(b)
            && a.tensors
                .iter()
                .zip(&b.tensors)
                .all(|((_, x), (_, y))| x.bit_eq(y))
    }

    #[test]
    fn base_boundary_with_target_mapping_reproduces_target() {
        let (s, t) = toy_pair();
        let plan = SwapPlan {
            boundary_resolution: BASE_RESOLUTION,
            mapping_from: Side::Target,
        };
        let out = swap(&s, &t, &plan).unwrap();
        assert!(bit_identical(&out, &t));
    }

    #[test]
    fn top_boundary_with_source_mapping_reproduces_source() {
        let (s, t) = toy_pair();
        let plan = SwapPlan {
            boundary_resolution: 64, // 2 * max for the 32-res toy ladder
            mapping_from: Side::Source,
        };
        let out = swap(&s, &t, &plan).unwrap();
        assert!(bit_identical(&out, &s));
    }

    #[test]
    fn mid_boundary_splits_blocks_at_the_boundary() {
        let (mut s, t) = toy_pair();
        // Make every source tensor differ from the target so the diff report
        // localizes provenance exactly.
        for (_, tensor) in &mut s.tensors {
            *tensor = tensor.map(|v| v + 0.5);
        }
        let plan = SwapPlan {
            boundary_resolution: 16,
            mapping_from: Side::Target,
        };
        let out = swap(&s, &t, &plan).unwrap();
        let smap = s.tensor_map();
        let tmap = t.tensor_map();
        for (name, tensor) in &out.tensors {
            let expect_source = name.starts_with("synthesis.b4.")
                || name.starts_with("synthesis.b8.")
                || name == "synthesis.input";
            if expect_source {
                assert!(tensor.bit_eq(smap[name.as_str()]), "{name} not from source");
            } else {
                assert!(tensor.bit_eq(tmap[name.as_str()]), "{name} not from target");
            }
        }
        // diff vs target is nonzero exactly on the source-side names
        let report = diff(&out, &t).unwrap();
        for (name, dist) in &report {
            let expect_source = name.starts_with("synthesis.b4.")
                || name.starts_with("synthesis.b8.")
                || name == "synthesis.input";
            assert_eq!(*dist > 0.0, expect_source, "{name}: dist {dist}");
        }
    }

    #[test]
    fn paper_scale_partition_at_boundary_64() {
        // On a 256-resolution ladder with boundary 64: b4..b32 source,
        // b64..b256 target.
        let plan = SwapPlan {
            boundary_resolution: 64,
            mapping_from: Side::Target,
        };
        for res in [4usize, 8, 16, 32] {
            let name = format!("synthesis.b{res}.conv0.weight");
            assert_eq!(plan.side_of(&name).unwrap(), Side::Source);
        }
        for res in [64usize, 128, 256] {
            let name = format!("synthesis.b{res}.conv0.weight");
            assert_eq!(plan.side_of(&name).unwrap(), Side::Target);
        }
        assert_eq!(plan.side_of("synthesis.input").unwrap(), Side::Source);
        assert_eq!(plan.side_of("mapping.l0.weight").unwrap(), Side::Target);
    }

    #[test]
    fn swap_is_idempotent() {
        let (s, t) = toy_pair();
        let plan = SwapPlan {
            boundary_resolution: 16,
            mapping_from: Side::Target,
        };
        let once = swap(&s, &t, &plan).unwrap();
        let twice = swap(&once, &t, &plan).unwrap();
        assert!(bit_identical(&once, &twice));
    }

    #[test]
    fn partition_is_total_over_the_parameter_table() {
        let (s, _) = toy_pair();
        for boundary in SwapPlan::boundaries(&toy_cfg()) {
            let plan = SwapPlan {
                boundary_resolution: boundary,
                mapping_from: Side::Source,
            };
            for (name, _) in &s.tensors {
                plan.side_of(name).unwrap();
            }
        }
    }

    #[test]
    fn diff_of_identical_checkpoints_is_all_zeros() {
        let (s, _) = toy_pair();
        let report = diff(&s, &s).unwrap();
        assert!(report.iter().all(|(_, d)| *d == 0.0));
    }

    #[test]
    fn mismatched_tables_are_incompatible() {
        let (s, t) = toy_pair();
        let mut other_cfg = toy_cfg();
        other_cfg.resolution = 16;
        let mut rng = ChaCha12Rng::seed_from_u64(61);
        let g = Generator::<f32>::init(other_cfg, &mut rng).unwrap();
        let small = Checkpoint::from_models(&g, None);
        assert_eq!(
            swap(&s, &small, &SwapPlan::default())
                .unwrap_err()
                .class(),
            "incompatible-checkpoint"
        );
        assert_eq!(
            diff(&t, &small).unwrap_err().class(),
            "incompatible-checkpoint"
        );
    }

    #[test]
    fn invalid_boundary_is_rejected() {
        let (s, t) = toy_pair();
        for bad in [2usize, 3, 12, 128] {
            let plan = SwapPlan {
                boundary_resolution: bad,
                mapping_from: Side::Target,
            };
            assert_eq!(
                swap(&s, &t, &plan).unwrap_err().class(),
                "invalid-argument",
                "boundary {bad}"
            );
        }
    }
}
