//! Low-rank adapters on the attention projections.
//!
//! An adapter holds per-(block, projection) factor pairs `A` (rank × in) and
//! `B` (out × rank); the effective projection is `W + scaling·(B·A)ᵀ` in the
//! row-vector convention used by the forward pass. `B` starts at zero so a
//! fresh adapter is exactly the identity.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::Rng;

use crate::checkpoint::Dtype;
use crate::error::{Error, Result};
use crate::miniflux::{MiniFluxParams, ProjName};
use crate::rng;

pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_SCALING: f64 = 1.0;

/// Default attack surface: the text-stream query/key projections.
pub fn default_target_subset() -> BTreeSet<ProjName> {
    [ProjName::QText, ProjName::KText].into_iter().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoRAFactors {
    /// `[rank, in_dim]`
    pub a: Array2<f64>,
    /// `[out_dim, rank]`, zero at creation.
    pub b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoRAAdapter {
    pub targets: BTreeSet<ProjName>,
    pub rank: usize,
    pub scaling: f64,
    pub n_blocks: usize,
    pub factors: BTreeMap<(usize, ProjName), LoRAFactors>,
}

impl LoRAAdapter {
    /// Create a zero-initialized adapter on `targets` for every block of
    /// `params`. `A` is drawn from a small-variance distribution; `B` is zero.
    pub fn init(
        params: &MiniFluxParams,
        targets: BTreeSet<ProjName>,
        rank: usize,
        scaling: f64,
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::config("LoRA rank must be >= 1"));
        }
        if scaling <= 0.0 {
            return Err(Error::config("LoRA scaling must be positive"));
        }
        let mut r = rng::stream(seed, "lora-init");
        let mut factors = BTreeMap::new();
        for block in 0..params.config.n_dual_blocks {
            for &proj in &targets {
                let w = params.proj_weight(block, proj);
                let (in_dim, out_dim) = (w.nrows(), w.ncols());
                let a = Array2::from_shape_fn((rank, in_dim), |_| 0.02 * r.gen_range(-1.0f64..1.0) * 3.0f64.sqrt());
                let b = Array2::zeros((out_dim, rank));
                factors.insert((block, proj), LoRAFactors { a, b });
            }
        }
        Ok(LoRAAdapter {
            targets,
            rank,
            scaling,
            n_blocks: params.config.n_dual_blocks,
            factors,
        })
    }

    pub fn init_default(
        params: &MiniFluxParams,
        rank: usize,
        scaling: f64,
        seed: u64,
    ) -> Result<Self> {
        LoRAAdapter::init(params, default_target_subset(), rank, scaling, seed)
    }

    /// Check the adapter is attachable to `params` (attach-time contract).
    pub fn validate_against(&self, params: &MiniFluxParams) -> Result<()> {
        if self.n_blocks != params.config.n_dual_blocks {
            return Err(Error::config(format!(
                "adapter spans {} blocks but model has {}",
                self.n_blocks, params.config.n_dual_blocks
            )));
        }
        for block in 0..self.n_blocks {
            for &proj in &self.targets {
                let f = self.factors.get(&(block, proj)).ok_or_else(|| {
                    Error::config(format!("adapter missing factors for block {block} {proj}"))
                })?;
                let w = params.proj_weight(block, proj);
                if f.a.ncols() != w.nrows() || f.b.nrows() != w.ncols() {
                    return Err(Error::config(format!(
                        "adapter factor shapes ({}x{}, {}x{}) incompatible with {proj} ({}x{})",
                        f.a.nrows(),
                        f.a.ncols(),
                        f.b.nrows(),
                        f.b.ncols(),
                        w.nrows(),
                        w.ncols()
                    )));
                }
                if f.a.nrows() != self.rank || f.b.ncols() != self.rank {
                    return Err(Error::config("adapter factor rank inconsistent"));
                }
            }
        }
        Ok(())
    }

    /// The additive weight delta `scaling·(B·A)ᵀ` for one target, in the
    /// `y = x·W` convention of the forward pass.
    pub fn weight_delta(&self, block: usize, proj: ProjName) -> Option<Array2<f64>> {
        self.factors
            .get(&(block, proj))
            .map(|f| f.b.dot(&f.a).t().to_owned() * self.scaling)
    }

    /// Merge into a standalone parameter set whose plain forward pass equals
    /// the adapted one; the originals are untouched.
    pub fn merge(&self, params: &MiniFluxParams) -> Result<MiniFluxParams> {
        self.validate_against(params)?;
        let mut merged = params.clone();
        for block in 0..self.n_blocks {
            for &proj in &self.targets {
                let delta = self.weight_delta(block, proj).expect("validated");
                let name = weight_name(block, proj);
                merged.for_each_tensor_mut(|n, t| {
                    if n == name {
                        *t += &delta;
                    }
                });
            }
        }
        Ok(merged)
    }

    /// Exact serialized size of the factor payloads at the given precision.
    pub fn parameter_footprint(&self, dtype: Dtype) -> u64 {
        let elems: usize = self
            .factors
            .values()
            .map(|f| f.a.len() + f.b.len())
            .sum();
        (elems * dtype.size()) as u64
    }

    /// Frobenius norm of the total weight delta, a training diagnostic.
    pub fn delta_norm(&self) -> f64 {
        self.factors
            .values()
            .map(|f| {
                let d = f.b.dot(&f.a) * self.scaling;
                d.iter().map(|x| x * x).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn for_each_factor(&self, mut f: impl FnMut(&str, &Array2<f64>)) {
        for ((block, proj), factors) in &self.factors {
            f(&format!("lora.block{block}.{proj}.a"), &factors.a);
            f(&format!("lora.block{block}.{proj}.b"), &factors.b);
        }
    }

    pub fn for_each_factor_mut(&mut self, mut f: impl FnMut(&str, &mut Array2<f64>)) {
        for ((block, proj), factors) in &mut self.factors {
            f(&format!("lora.block{block}.{proj}.a"), &mut factors.a);
            f(&format!("lora.block{block}.{proj}.b"), &mut factors.b);
        }
    }
}

pub(crate) fn weight_name(block: usize, proj: ProjName) -> String {
    let (stream, which) = match proj {
        ProjName::QText => ("text", 'q'),
        ProjName::KText => ("text", 'k'),
        ProjName::VText => ("text", 'v'),
        ProjName::QPixel => ("pixel", 'q'),
        ProjName::KPixel => ("pixel", 'k'),
        ProjName::VPixel => ("pixel", 'v'),
    };
    format!("block{block}.{stream}.{which}.weight")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::miniflux::{forward_velocity, MiniFluxConfig, Prompt};
    use ndarray::Array2;
    use rand::Rng;

    fn setup() -> (MiniFluxConfig, MiniFluxParams) {
        let cfg = MiniFluxConfig::default();
        let params = MiniFluxParams::init(&cfg, 21).unwrap();
        (cfg, params)
    }

    #[test]
    fn merge_of_zero_adapter_changes_nothing() {
        let (_, params) = setup();
        let adapter = LoRAAdapter::init_default(&params, 4, 1.0, 1).unwrap();
        let merged = adapter.merge(&params).unwrap();
        assert_eq!(params.max_abs_diff(&merged).unwrap(), 0.0);
    }

    #[test]
    fn attach_and_merge_agree_on_random_inputs() {
        let (cfg, params) = setup();
        let mut adapter = LoRAAdapter::init_default(&params, 4, 1.0, 2).unwrap();
        let mut r = crate::rng::stream(3, "lora-test");
        // give B real content so the adapter is non-trivial
        adapter.for_each_factor_mut(|name, t| {
            if name.ends_with(".b") {
                *t = Array2::from_shape_fn(t.raw_dim(), |_| r.gen_range(-0.2..0.2));
            }
        });
        let merged = adapter.merge(&params).unwrap();
        let prompt = Prompt::new(vec![1, 11, 15]);
        for seed in 0..100u64 {
            let mut rr = crate::rng::stream(seed, "lora-inputs");
            let latent = Array2::from_shape_fn((cfg.n_pixel_tokens(), cfg.n_channels), |_| {
                rr.gen_range(-1.0..1.0)
            });
            let t = rr.gen_range(0.0..1.0);
            let (va, _) =
                forward_velocity(&params, Some(&adapter), None, &latent, &prompt, t).unwrap();
            let (vm, _) = forward_velocity(&merged, None, None, &latent, &prompt, t).unwrap();
            let err = (&va - &vm).iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(err < 1e-10, "seed {seed}: attach/merge diverge by {err}");
        }
    }

    #[test]
    fn full_rank_factors_reproduce_arbitrary_delta() {
        // rank = min dims on a 4x4 projection: fit B·A to a target delta D
        let cfg = MiniFluxConfig::micro();
        let params = MiniFluxParams::init(&cfg, 4).unwrap();
        let d = cfg.model_dim;
        let scaling = 0.5;
        let mut r = crate::rng::stream(5, "lora-fit");
        let target: Array2<f64> = Array2::from_shape_fn((d, d), |_| r.gen_range(-1.0..1.0));
        let mut adapter = LoRAAdapter::init(
            &params,
            [ProjName::QText].into_iter().collect(),
            d,
            scaling,
            6,
        )
        .unwrap();
        // least-squares fit with A = I is exact at full rank: B = Dᵀ
        for (_, f) in adapter.factors.iter_mut() {
            f.a = Array2::eye(d);
            f.b = target.t().to_owned();
        }
        let merged = adapter.merge(&params).unwrap();
        let mut expect = params.clone();
        expect.for_each_tensor_mut(|n, t| {
            if n == "block0.text.q.weight" {
                *t += &(target.clone() * scaling);
            }
        });
        assert!(merged.max_abs_diff(&expect).unwrap() < 1e-10);
    }

    #[test]
    fn v_text_subset_is_accepted() {
        let (_, params) = setup();
        let adapter = LoRAAdapter::init(
            &params,
            [ProjName::VText].into_iter().collect(),
            2,
            1.0,
            7,
        )
        .unwrap();
        adapter.validate_against(&params).unwrap();
    }

    #[test]
    fn merging_twice_doubles_the_delta() {
        let (_, params) = setup();
        let mut adapter = LoRAAdapter::init_default(&params, 2, 1.0, 8).unwrap();
        let mut r = crate::rng::stream(9, "lora-test2");
        adapter.for_each_factor_mut(|name, t| {
            if name.ends_with(".b") {
                *t = Array2::from_shape_fn(t.raw_dim(), |_| r.gen_range(-0.3..0.3));
            }
        });
        let once = adapter.merge(&params).unwrap();
        let twice = adapter.merge(&once).unwrap();
        // twice != once, and (twice - params) == 2*(once - params) per target
        let delta = adapter.weight_delta(0, ProjName::QText).unwrap();
        let w0 = params.proj_weight(0, ProjName::QText).clone();
        let w1 = once.proj_weight(0, ProjName::QText).clone();
        let w2 = twice.proj_weight(0, ProjName::QText).clone();
        assert!((&w1 - &w0 - &delta).iter().all(|x| x.abs() < 1e-12));
        assert!((&w2 - &w0 - &(&delta * 2.0)).iter().all(|x| x.abs() < 1e-12));
        assert!(once.max_abs_diff(&twice).unwrap() > 0.0);
    }

    #[test]
    fn footprint_arithmetic() {
        let (_, params) = setup();
        // rank 4, dim 32, 2 targets x 2 blocks -> 4*(4*32+32*4) elems = 1024
        let adapter = LoRAAdapter::init_default(&params, 4, 1.0, 10).unwrap();
        assert_eq!(adapter.parameter_footprint(Dtype::F32), 4096);
        assert_eq!(adapter.parameter_footprint(Dtype::F64), 8192);
        let empty = LoRAAdapter::init(&params, BTreeSet::new(), 4, 1.0, 11).unwrap();
        assert_eq!(empty.parameter_footprint(Dtype::F32), 0);
    }

    #[test]
    fn footprint_monotone_in_rank_and_targets() {
        let (_, params) = setup();
        let r2 = LoRAAdapter::init_default(&params, 2, 1.0, 12).unwrap();
        let r4 = LoRAAdapter::init_default(&params, 4, 1.0, 12).unwrap();
        assert!(r4.parameter_footprint(Dtype::F32) > r2.parameter_footprint(Dtype::F32));
        let three = LoRAAdapter::init(
            &params,
            [ProjName::QText, ProjName::KText, ProjName::VText]
                .into_iter()
                .collect(),
            2,
            1.0,
            12,
        )
        .unwrap();
        assert!(three.parameter_footprint(Dtype::F32) > r2.parameter_footprint(Dtype::F32));
    }

    #[test]
    fn rejects_invalid_construction() {
        let (_, params) = setup();
        assert!(LoRAAdapter::init_default(&params, 0, 1.0, 13).is_err());
        assert!(LoRAAdapter::init_default(&params, 4, 0.0, 13).is_err());
    }
}
