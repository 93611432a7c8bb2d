use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::config::MiniFluxConfig;
use crate::error::{Error, Result};
use crate::rng;

/// Names of the six attention projections. The text/pixel split is what the
/// erasure and attack modules select their parameter subsets from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjName {
    QText,
    KText,
    VText,
    QPixel,
    KPixel,
    VPixel,
}

impl ProjName {
    pub const ALL: [ProjName; 6] = [
        ProjName::QText,
        ProjName::KText,
        ProjName::VText,
        ProjName::QPixel,
        ProjName::KPixel,
        ProjName::VPixel,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProjName::QText => "q_text",
            ProjName::KText => "k_text",
            ProjName::VText => "v_text",
            ProjName::QPixel => "q_pixel",
            ProjName::KPixel => "k_pixel",
            ProjName::VPixel => "v_pixel",
        }
    }

    pub fn parse(s: &str) -> Result<ProjName> {
        ProjName::ALL
            .iter()
            .copied()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown projection name: {s}")))
    }

    pub fn is_text(&self) -> bool {
        matches!(self, ProjName::QText | ProjName::KText | ProjName::VText)
    }
}

impl std::fmt::Display for ProjName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One stream's parameters inside a dual-stream block. Weights use the
/// row-vector convention `y = x · W + b`, biases are `[1, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamParams {
    pub q_w: Array2<f64>,
    pub q_b: Array2<f64>,
    pub k_w: Array2<f64>,
    pub k_b: Array2<f64>,
    pub v_w: Array2<f64>,
    pub v_b: Array2<f64>,
    pub o_w: Array2<f64>,
    pub o_b: Array2<f64>,
    pub ffn1_w: Array2<f64>,
    pub ffn1_b: Array2<f64>,
    pub ffn2_w: Array2<f64>,
    pub ffn2_b: Array2<f64>,
    /// Timestep modulation: maps time features to [s_attn, b_attn, s_ffn, b_ffn].
    pub mod_w: Array2<f64>,
    pub mod_b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub text: StreamParams,
    pub pixel: StreamParams,
}

/// Full parameter set of the toy backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniFluxParams {
    pub config: MiniFluxConfig,
    /// Token embedding table, `[vocab, dim]`. Frozen during training, in the
    /// spirit of the frozen text encoders of the full-scale architecture.
    pub token_embed: Array2<f64>,
    pub pixel_embed_w: Array2<f64>,
    pub pixel_embed_b: Array2<f64>,
    pub head_w: Array2<f64>,
    pub head_b: Array2<f64>,
    pub blocks: Vec<BlockParams>,
}

fn glorot(rng: &mut ChaCha20Rng, rows: usize, cols: usize, scale: Option<f64>) -> Array2<f64> {
    let s = scale.unwrap_or_else(|| (2.0 / (rows + cols) as f64).sqrt());
    Array2::from_shape_fn((rows, cols), |_| {
        let u: f64 = rng.gen_range(-1.0f64..1.0);
        // Uniform(-sqrt(3), sqrt(3)) * s has variance s^2.
        u * 3.0f64.sqrt() * s
    })
}

fn zeros(rows: usize, cols: usize) -> Array2<f64> {
    Array2::zeros((rows, cols))
}

/// Orthonormal-ish rows via modified Gram-Schmidt on a seeded Gaussian draw.
/// For `n <= dim` the rows are exactly orthonormal.
fn orthonormal_rows(rng: &mut ChaCha20Rng, n: usize, dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, dim));
    let mut kept = 0usize;
    while kept < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0f64..1.0)).collect();
        if kept < dim {
            for i in 0..kept {
                let dot: f64 = (0..dim).map(|j| v[j] * out[(i, j)]).sum();
                for j in 0..dim {
                    v[j] -= dot * out[(i, j)];
                }
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        for j in 0..dim {
            out[(kept, j)] = v[j] / norm;
        }
        kept += 1;
    }
    out
}

impl StreamParams {
    fn init(rng: &mut ChaCha20Rng, cfg: &MiniFluxConfig) -> Self {
        let d = cfg.model_dim;
        let h = 2 * d;
        let tf = cfg.time_feat_dim();
        StreamParams {
            q_w: glorot(rng, d, d, None),
            q_b: zeros(1, d),
            k_w: glorot(rng, d, d, None),
            k_b: zeros(1, d),
            v_w: glorot(rng, d, d, None),
            v_b: zeros(1, d),
            o_w: glorot(rng, d, d, None),
            o_b: zeros(1, d),
            ffn1_w: glorot(rng, d, h, None),
            ffn1_b: zeros(1, h),
            ffn2_w: glorot(rng, h, d, None),
            ffn2_b: zeros(1, d),
            mod_w: glorot(rng, tf, 4 * d, Some(0.01)),
            mod_b: zeros(1, 4 * d),
        }
    }

    pub fn proj(&self, which: char) -> (&Array2<f64>, &Array2<f64>) {
        match which {
            'q' => (&self.q_w, &self.q_b),
            'k' => (&self.k_w, &self.k_b),
            'v' => (&self.v_w, &self.v_b),
            _ => unreachable!("proj is one of q/k/v"),
        }
    }
}

impl MiniFluxParams {
    /// Seeded initialization. The token table is drawn orthonormal and scaled
    /// to a moderate norm so distinct tokens enter the blocks well separated.
    pub fn init(cfg: &MiniFluxConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, "init");
        let d = cfg.model_dim;
        let token_embed =
            orthonormal_rows(&mut r, cfg.vocab_size, d).mapv(|x| x * 0.5 * (d as f64).sqrt());
        let blocks = (0..cfg.n_dual_blocks)
            .map(|_| BlockParams {
                text: StreamParams::init(&mut r, cfg),
                pixel: StreamParams::init(&mut r, cfg),
            })
            .collect();
        Ok(MiniFluxParams {
            config: cfg.clone(),
            token_embed,
            pixel_embed_w: glorot(&mut r, cfg.n_channels, d, None),
            pixel_embed_b: zeros(1, d),
            head_w: glorot(&mut r, d, cfg.n_channels, None),
            head_b: zeros(1, cfg.n_channels),
            blocks,
        })
    }

    /// Visit every named tensor in a fixed canonical order.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &Array2<f64>)) {
        f("embed.token", &self.token_embed);
        f("embed.pixel.weight", &self.pixel_embed_w);
        f("embed.pixel.bias", &self.pixel_embed_b);
        f("head.weight", &self.head_w);
        f("head.bias", &self.head_b);
        for (i, b) in self.blocks.iter().enumerate() {
            for (stream, s) in [("text", &b.text), ("pixel", &b.pixel)] {
                let named: [(&str, &Array2<f64>); 14] = [
                    ("q.weight", &s.q_w),
                    ("q.bias", &s.q_b),
                    ("k.weight", &s.k_w),
                    ("k.bias", &s.k_b),
                    ("v.weight", &s.v_w),
                    ("v.bias", &s.v_b),
                    ("o.weight", &s.o_w),
                    ("o.bias", &s.o_b),
                    ("ffn1.weight", &s.ffn1_w),
                    ("ffn1.bias", &s.ffn1_b),
                    ("ffn2.weight", &s.ffn2_w),
                    ("ffn2.bias", &s.ffn2_b),
                    ("mod.weight", &s.mod_w),
                    ("mod.bias", &s.mod_b),
                ];
                for (suffix, t) in named {
                    f(&format!("block{i}.{stream}.{suffix}"), t);
                }
            }
        }
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Array2<f64>)) {
        f("embed.token", &mut self.token_embed);
        f("embed.pixel.weight", &mut self.pixel_embed_w);
        f("embed.pixel.bias", &mut self.pixel_embed_b);
        f("head.weight", &mut self.head_w);
        f("head.bias", &mut self.head_b);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (stream, s) in [("text", &mut b.text), ("pixel", &mut b.pixel)] {
                let named: [(&str, &mut Array2<f64>); 14] = [
                    ("q.weight", &mut s.q_w),
                    ("q.bias", &mut s.q_b),
                    ("k.weight", &mut s.k_w),
                    ("k.bias", &mut s.k_b),
                    ("v.weight", &mut s.v_w),
                    ("v.bias", &mut s.v_b),
                    ("o.weight", &mut s.o_w),
                    ("o.bias", &mut s.o_b),
                    ("ffn1.weight", &mut s.ffn1_w),
                    ("ffn1.bias", &mut s.ffn1_b),
                    ("ffn2.weight", &mut s.ffn2_w),
                    ("ffn2.bias", &mut s.ffn2_b),
                    ("mod.weight", &mut s.mod_w),
                    ("mod.bias", &mut s.mod_b),
                ];
                for (suffix, t) in named {
                    f(&format!("block{i}.{stream}.{suffix}"), t);
                }
            }
        }
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_tensor(|n, _| names.push(n.to_string()));
        names
    }

    /// Attention-projection weight for `(block, proj)`, the unit of LoRA
    /// attachment and erasure fine-tuning.
    pub fn proj_weight(&self, block: usize, proj: ProjName) -> &Array2<f64> {
        let b = &self.blocks[block];
        let (stream, which) = split_proj(proj);
        let s = if stream == "text" { &b.text } else { &b.pixel };
        s.proj(which).0
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|_, t| {
            if t.iter().any(|v| !v.is_finite()) {
                ok = false;
            }
        });
        ok
    }

    /// Max absolute elementwise difference across all tensors, for
    /// identity/merge assertions. Errors if shapes differ.
    pub fn max_abs_diff(&self, other: &MiniFluxParams) -> Result<f64> {
        let mut tensors_a = Vec::new();
        self.for_each_tensor(|n, t| tensors_a.push((n.to_string(), t.clone())));
        let mut max = 0.0f64;
        let mut idx = 0usize;
        let mut err = None;
        other.for_each_tensor(|n, t| {
            if err.is_some() {
                return;
            }
            let (an, at) = &tensors_a[idx];
            if an != n || at.raw_dim() != t.raw_dim() {
                err = Some(Error::invalid(format!("parameter mismatch at {n}")));
                return;
            }
            for (x, y) in at.iter().zip(t.iter()) {
                max = max.max((x - y).abs());
            }
            idx += 1;
        });
        match err {
            Some(e) => Err(e),
            None => Ok(max),
        }
    }
}

pub(crate) fn split_proj(proj: ProjName) -> (&'static str, char) {
    match proj {
        ProjName::QText => ("text", 'q'),
        ProjName::KText => ("text", 'k'),
        ProjName::VText => ("text", 'v'),
        ProjName::QPixel => ("pixel", 'q'),
        ProjName::KPixel => ("pixel", 'k'),
        ProjName::VPixel => ("pixel", 'v'),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = MiniFluxConfig::default();
        let a = MiniFluxParams::init(&cfg, 42).unwrap();
        let b = MiniFluxParams::init(&cfg, 42).unwrap();
        assert_eq!(a.max_abs_diff(&b).unwrap(), 0.0);
        let c = MiniFluxParams::init(&cfg, 43).unwrap();
        assert!(a.max_abs_diff(&c).unwrap() > 0.0);
    }

    #[test]
    fn token_embed_rows_orthogonal() {
        let cfg = MiniFluxConfig::default();
        let p = MiniFluxParams::init(&cfg, 0).unwrap();
        // vocab == dim here, so rows are exactly orthogonal
        let e = &p.token_embed;
        for i in 0..4 {
            for j in 0..4 {
                let dot = e.row(i).dot(&e.row(j));
                if i == j {
                    assert!(dot > 0.0);
                } else {
                    assert!(dot.abs() < 1e-9, "rows {i},{j} not orthogonal: {dot}");
                }
            }
        }
    }

    #[test]
    fn tensor_names_unique_and_projection_names_complete() {
        let p = MiniFluxParams::init(&MiniFluxConfig::default(), 1).unwrap();
        let names = p.tensor_names();
        let set: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        // six projections per block, present exactly once each
        for b in 0..2 {
            for proj in ProjName::ALL {
                let (stream, which) = split_proj(proj);
                let name = format!("block{b}.{stream}.{which}.weight");
                assert_eq!(names.iter().filter(|n| **n == name).count(), 1);
            }
        }
        assert!(p.all_finite());
    }

    #[test]
    fn proj_name_roundtrip() {
        for p in ProjName::ALL {
            assert_eq!(ProjName::parse(p.as_str()).unwrap(), p);
        }
        assert!(ProjName::parse("qq_text").is_err());
    }
}
