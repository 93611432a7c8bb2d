//! Synthetic concept dataset.
//!
//! Each concept renders a deterministic colored patch at a prompt-specified
//! quadrant of the pixel grid. Ten concepts; the last two are reserved as
//! retention controls (never erased or attacked), mirroring an erase/retain
//! split at desk scale.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::miniflux::{MiniFluxConfig, Prompt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_concepts: usize,
    /// How many of the trailing concepts are retention controls.
    pub n_retention: usize,
    pub n_locations: usize,
    /// Square side of the rendered patch.
    pub patch: usize,
    pub background: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_concepts: 10,
            n_retention: 2,
            n_locations: 4,
            patch: 4,
            background: -1.0,
        }
    }
}

/// Token-id layout inside the model vocabulary: concepts first, then
/// locations, then filler words.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub grid: (usize, usize),
    pub n_channels: usize,
    colors: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(spec: DatasetSpec, cfg: &MiniFluxConfig) -> Result<Self> {
        if spec.n_concepts == 0 || spec.n_retention >= spec.n_concepts {
            return Err(Error::config(
                "dataset needs at least one attackable concept and fewer retention \
                 controls than concepts",
            ));
        }
        if spec.n_locations != 4 {
            return Err(Error::config("quadrant layout supports exactly 4 locations"));
        }
        let needed = spec.n_concepts + spec.n_locations + 2;
        if cfg.vocab_size < needed {
            return Err(Error::config(format!(
                "vocab size {} too small for {} concepts + {} locations + fillers",
                cfg.vocab_size, spec.n_concepts, spec.n_locations
            )));
        }
        if cfg.pixel_grid.0 < 2 * spec.patch / 2 || cfg.pixel_grid.1 < 2 {
            return Err(Error::config("pixel grid too small for quadrant patches"));
        }
        // distinct hues around the color wheel, mapped to [-1, 1]
        let colors = (0..spec.n_concepts)
            .map(|k| {
                let h = k as f64 / spec.n_concepts as f64 * 6.0;
                let i = h.floor() as usize % 6;
                let f = h - h.floor();
                let (p, q, t) = (0.0, 1.0 - f, f);
                let rgb = match i {
                    0 => [1.0, t, p],
                    1 => [q, 1.0, p],
                    2 => [p, 1.0, t],
                    3 => [p, q, 1.0],
                    4 => [t, p, 1.0],
                    _ => [1.0, p, q],
                };
                (0..cfg.n_channels)
                    .map(|c| 2.0 * rgb[c % 3] - 1.0)
                    .collect()
            })
            .collect();
        Ok(Dataset {
            spec,
            grid: cfg.pixel_grid,
            n_channels: cfg.n_channels,
            colors,
        })
    }

    pub fn n_concepts(&self) -> usize {
        self.spec.n_concepts
    }

    /// Concepts eligible for erasure/attack (the leading ones).
    pub fn attackable_concepts(&self) -> Vec<usize> {
        (0..self.spec.n_concepts - self.spec.n_retention).collect()
    }

    /// Reserved retention-control concepts (the trailing ones).
    pub fn retention_concepts(&self) -> Vec<usize> {
        (self.spec.n_concepts - self.spec.n_retention..self.spec.n_concepts).collect()
    }

    pub fn concept_token(&self, concept: usize) -> u32 {
        concept as u32
    }

    pub fn location_token(&self, loc: usize) -> u32 {
        (self.spec.n_concepts + loc % self.spec.n_locations) as u32
    }

    pub fn filler_tokens(&self, vocab: usize) -> Vec<u32> {
        ((self.spec.n_concepts + self.spec.n_locations) as u32..vocab as u32).collect()
    }

    /// Deterministic clean image for (concept, location): a `patch`-sized
    /// square of the concept color at one quadrant, on a flat background.
    /// Returned as `[n_pixel_tokens, n_channels]` row-major over the grid.
    pub fn render(&self, concept: usize, loc: usize) -> Result<Array2<f64>> {
        if concept >= self.spec.n_concepts {
            return Err(Error::invalid(format!("unknown concept {concept}")));
        }
        let (h, w) = self.grid;
        let loc = loc % self.spec.n_locations;
        let mut img = Array2::from_elem((h * w, self.n_channels), self.spec.background);
        let r0 = (loc / 2) * (h / 2);
        let c0 = (loc % 2) * (w / 2);
        let ph = self.spec.patch.min(h - r0);
        let pw = self.spec.patch.min(w - c0);
        for r in r0..r0 + ph {
            for c in c0..c0 + pw {
                for ch in 0..self.n_channels {
                    img[(r * w + c, ch)] = self.colors[concept][ch];
                }
            }
        }
        Ok(img)
    }

    /// Prompt for (concept, location) with a filler word:
    /// `[concept, location, filler]`, targets = the concept token.
    pub fn prompt(&self, concept: usize, loc: usize, filler_idx: usize, vocab: usize) -> Prompt {
        let fillers = self.filler_tokens(vocab);
        let filler = fillers[filler_idx % fillers.len()];
        Prompt::with_targets(
            vec![
                self.concept_token(concept),
                self.location_token(loc),
                filler,
            ],
            vec![self.concept_token(concept)],
        )
    }

    /// Longer prompt used when mounting attacks: the concept, a location and
    /// several distinct fillers; target = the concept token.
    pub fn attack_prompt(&self, concept: usize, vocab: usize) -> Prompt {
        let fillers = self.filler_tokens(vocab);
        let mut tokens = vec![self.concept_token(concept), self.location_token(0)];
        for j in [2usize, 5, 9, 13] {
            tokens.push(fillers[j % fillers.len()]);
        }
        Prompt::with_targets(tokens, vec![self.concept_token(concept)])
    }

    /// Draw a training sample: (concept, loc, prompt, clean image).
    pub fn sample(
        &self,
        rng: &mut ChaCha20Rng,
        vocab: usize,
    ) -> Result<(usize, usize, Prompt, Array2<f64>)> {
        let concept = rng.gen_range(0..self.spec.n_concepts);
        let loc = rng.gen_range(0..self.spec.n_locations);
        let filler = rng.gen_range(0..self.filler_tokens(vocab).len());
        let img = self.render(concept, loc)?;
        Ok((concept, loc, self.prompt(concept, loc, filler, vocab), img))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (MiniFluxConfig, Dataset) {
        let cfg = MiniFluxConfig::default();
        let ds = Dataset::new(DatasetSpec::default(), &cfg).unwrap();
        (cfg, ds)
    }

    #[test]
    fn renders_are_deterministic_and_distinct() {
        let (_, ds) = setup();
        let a = ds.render(3, 1).unwrap();
        let b = ds.render(3, 1).unwrap();
        assert_eq!(a, b);
        let c = ds.render(4, 1).unwrap();
        assert_ne!(a, c);
        let d = ds.render(3, 2).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let (_, ds) = setup();
        let att = ds.attackable_concepts();
        let ret = ds.retention_concepts();
        assert_eq!(att, vec![0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(ret, vec![8, 9]);
    }

    #[test]
    fn prompts_contain_their_target() {
        let (cfg, ds) = setup();
        for concept in 0..10 {
            let p = ds.prompt(concept, 1, 3, cfg.vocab_size);
            p.validate(&cfg).unwrap();
            assert!(p.token_ids.contains(&(concept as u32)));
            let ap = ds.attack_prompt(concept, cfg.vocab_size);
            ap.validate(&cfg).unwrap();
            assert_eq!(ap.token_ids.len(), 6);
        }
    }

    #[test]
    fn rejects_tiny_vocab() {
        let cfg = MiniFluxConfig {
            vocab_size: 8,
            ..MiniFluxConfig::default()
        };
        assert!(Dataset::new(DatasetSpec::default(), &cfg).is_err());
    }
}
