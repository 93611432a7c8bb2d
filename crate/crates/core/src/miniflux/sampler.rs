use ndarray::Array2;

use super::forward::{forward_velocity, AttentionRecord, ColumnMask, Prompt};
use super::params::MiniFluxParams;
use crate::error::{Error, Result};
use crate::lora::LoRAAdapter;

/// Sampler step count used by the full-scale reference configuration.
pub const PAPER_SAMPLER_STEPS: usize = 28;

/// One point on the rectified-flow path between a data latent and noise.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub u_pix: Array2<f64>,
    pub x_t: Array2<f64>,
    pub t: f64,
    /// Interpolant: (1−t)·u_pix + t·x_T.
    pub u_t: Array2<f64>,
    /// Ground-truth velocity: x_T − u_pix.
    pub v: Array2<f64>,
}

/// Assemble a [`FlowState`] satisfying its invariants exactly.
pub fn make_flow_state(u_pix: &Array2<f64>, x_t_noise: &Array2<f64>, t: f64) -> Result<FlowState> {
    if u_pix.raw_dim() != x_t_noise.raw_dim() {
        return Err(Error::invalid(format!(
            "shape mismatch: data latent {:?} vs noise {:?}",
            u_pix.shape(),
            x_t_noise.shape()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("timestep {t} outside [0, 1]")));
    }
    let u_t = u_pix * (1.0 - t) + x_t_noise * t;
    let v = x_t_noise - u_pix;
    Ok(FlowState {
        u_pix: u_pix.clone(),
        x_t: x_t_noise.clone(),
        t,
        u_t,
        v,
    })
}

/// Anything that predicts a velocity field. Sampling and the losses are
/// written against this so oracles can stand in for the model.
pub trait VelocityField {
    fn velocity(
        &self,
        latent: &Array2<f64>,
        prompt: &Prompt,
        t: f64,
        capture: bool,
    ) -> Result<(Array2<f64>, Vec<AttentionRecord>)>;
}

/// The toy backbone, optionally with an adapter and a runtime column mask.
pub struct ModelField<'a> {
    pub params: &'a MiniFluxParams,
    pub adapter: Option<&'a LoRAAdapter>,
    pub mask: Option<&'a ColumnMask>,
}

impl<'a> ModelField<'a> {
    pub fn new(params: &'a MiniFluxParams) -> Self {
        ModelField {
            params,
            adapter: None,
            mask: None,
        }
    }
}

impl VelocityField for ModelField<'_> {
    fn velocity(
        &self,
        latent: &Array2<f64>,
        prompt: &Prompt,
        t: f64,
        capture: bool,
    ) -> Result<(Array2<f64>, Vec<AttentionRecord>)> {
        let (v, recs) = forward_velocity(self.params, self.adapter, self.mask, latent, prompt, t)?;
        Ok((v, if capture { recs } else { Vec::new() }))
    }
}

/// Classifier-free-guidance-style field:
/// v = v(∅) + scale · (v(prompt) − v(∅)). `scale = 1` is the plain field.
pub struct GuidedField<'a, F: VelocityField + ?Sized> {
    pub inner: &'a F,
    pub scale: f64,
}

impl<F: VelocityField + ?Sized> VelocityField for GuidedField<'_, F> {
    fn velocity(
        &self,
        latent: &Array2<f64>,
        prompt: &Prompt,
        t: f64,
        capture: bool,
    ) -> Result<(Array2<f64>, Vec<AttentionRecord>)> {
        let (vc, recs) = self.inner.velocity(latent, prompt, t, capture)?;
        if self.scale == 1.0 || prompt.is_empty() {
            return Ok((vc, recs));
        }
        let (vn, _) = self.inner.velocity(latent, &Prompt::empty(), t, false)?;
        let v = &vn + (vc - &vn) * self.scale;
        Ok((v, recs))
    }
}

/// All intermediate latents of an Euler integration from t=1 to t=0, plus the
/// attention captured at every step when requested.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// (t, latent) pairs; `states[0]` is (1, x_T), the last entry is t=0.
    pub states: Vec<(f64, Array2<f64>)>,
    /// Per integration step (not per state); empty when capture was off.
    pub records: Vec<Vec<AttentionRecord>>,
}

impl Trajectory {
    pub fn final_latent(&self) -> &Array2<f64> {
        &self.states.last().expect("non-empty trajectory").1
    }
}

/// Integrate x̂_{t−Δ} = x̂_t − Δ·v(x̂_t, prompt, t) with uniform Δ = 1/n_steps,
/// starting from `x_terminal` at t = 1.
pub fn euler_sample<F: VelocityField + ?Sized>(
    field: &F,
    prompt: &Prompt,
    x_terminal: Array2<f64>,
    n_steps: usize,
    capture: bool,
) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be >= 1"));
    }
    let dt = 1.0 / n_steps as f64;
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut records = Vec::with_capacity(if capture { n_steps } else { 0 });
    let mut x = x_terminal;
    states.push((1.0, x.clone()));
    for k in 0..n_steps {
        let t = 1.0 - k as f64 * dt;
        let (v, recs) = field.velocity(&x, prompt, t, capture)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite velocity at sampler step {k} (t={t:.4})"
            )));
        }
        if capture {
            records.push(recs);
        }
        x = &x - &(v * dt);
        let t_next = (1.0 - (k + 1) as f64 * dt).max(0.0);
        states.push((t_next, x.clone()));
    }
    Ok(Trajectory { states, records })
}
