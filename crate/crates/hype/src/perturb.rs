//! Training-time perturbations: additive hidden-state noise (normal or
//! uniform), the multiplicative 0/1 dropout baseline, layer masks, and the
//! choice of injection site (before a layer vs. between its attention and
//! feed-forward sublayers).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{HypeError, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Forward-pass mode. Perturbations only ever fire in `Train`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseForm {
    None,
    Normal,
    Uniform,
}

/// Where noise is injected relative to a transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePosition {
    PreLayer,
    IntraLayer,
    Both,
}

/// A concrete injection hook inside the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    PreLayer,
    IntraLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub form: NoiseForm,
    pub sigma: f64,
    pub position: NoisePosition,
    /// Layers (1-based) whose hidden states receive noise. `None` means all.
    pub layer_mask: Option<BTreeSet<usize>>,
}

impl NoiseSpec {
    pub fn none() -> NoiseSpec {
        NoiseSpec {
            form: NoiseForm::None,
            sigma: 0.0,
            position: NoisePosition::PreLayer,
            layer_mask: None,
        }
    }

    pub fn normal(sigma: f64) -> NoiseSpec {
        NoiseSpec {
            form: NoiseForm::Normal,
            sigma,
            position: NoisePosition::PreLayer,
            layer_mask: None,
        }
    }

    pub fn uniform(sigma: f64) -> NoiseSpec {
        NoiseSpec {
            form: NoiseForm::Uniform,
            sigma,
            position: NoisePosition::PreLayer,
            layer_mask: None,
        }
    }

    pub fn with_layer_mask(mut self, layers: impl IntoIterator<Item = usize>) -> NoiseSpec {
        self.layer_mask = Some(layers.into_iter().collect());
        self
    }

    pub fn with_position(mut self, position: NoisePosition) -> NoiseSpec {
        self.position = position;
        self
    }

    pub fn is_active(&self) -> bool {
        self.form != NoiseForm::None && self.sigma > 0.0
    }

    fn layer_enabled(&self, layer_index: usize) -> bool {
        match &self.layer_mask {
            None => true,
            Some(mask) => mask.contains(&layer_index),
        }
    }

    fn site_enabled(&self, site: Site) -> bool {
        matches!(
            (self.position, site),
            (NoisePosition::Both, _)
                | (NoisePosition::PreLayer, Site::PreLayer)
                | (NoisePosition::IntraLayer, Site::IntraLayer)
        )
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.sigma < 0.0 {
            return Err(HypeError::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if let Some(mask) = &self.layer_mask {
            for &l in mask {
                if l == 0 || l > n_layers {
                    return Err(HypeError::Config(format!(
                        "layer_mask entry {l} outside 1..={n_layers}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub rate: f64,
}

impl DropoutSpec {
    pub fn off() -> DropoutSpec {
        DropoutSpec { rate: 0.0 }
    }

    pub fn new(rate: f64) -> Result<DropoutSpec> {
        if !(0.0..1.0).contains(&rate) {
            return Err(HypeError::Config(format!("dropout rate must be in [0,1), got {rate}")));
        }
        Ok(DropoutSpec { rate })
    }
}

/// One perturbation hook observation: which layer/site fired and how far
/// the tensor moved (max absolute entry delta).
#[derive(Clone, Debug, Serialize)]
pub struct SiteDelta {
    pub layer: usize,
    pub site: Site,
    pub kind: &'static str,
    pub max_abs_delta: f64,
}

/// Collects per-hook deltas during an instrumented forward pass.
#[derive(Default, Debug)]
pub struct PerturbTrace {
    pub deltas: Vec<SiteDelta>,
}

/// Draws an i.i.d. noise tensor, detached from any gradient graph.
pub fn sample_noise(shape: &[usize], spec: &NoiseSpec, rng: &mut RngStream) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = match spec.form {
        NoiseForm::None => {
            return Err(HypeError::Usage(
                "sample_noise called with form=none; callers must short-circuit".into(),
            ))
        }
        NoiseForm::Normal => (0..n).map(|_| spec.sigma * rng.next_standard_normal()).collect(),
        NoiseForm::Uniform => (0..n).map(|_| rng.next_symmetric_uniform(spec.sigma)).collect(),
    };
    Ok(Tensor::new(shape, data))
}

/// Adds noise to a hidden state when all gating conditions hold, otherwise
/// returns the input untouched (same storage, bit-exact).
pub fn apply_perturbation(
    h: &Tensor,
    layer_index: usize,
    site: Site,
    spec: &NoiseSpec,
    mode: Mode,
    rng: &mut RngStream,
    trace: Option<&mut PerturbTrace>,
) -> Result<Tensor> {
    let fire = mode == Mode::Train
        && spec.is_active()
        && spec.layer_enabled(layer_index)
        && spec.site_enabled(site);
    if !fire {
        if let Some(t) = trace {
            t.deltas.push(SiteDelta {
                layer: layer_index,
                site,
                kind: "noise",
                max_abs_delta: 0.0,
            });
        }
        return Ok(h.clone());
    }
    let eps = sample_noise(&h.shape(), spec, rng)?;
    if let Some(t) = trace {
        let max = eps.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        t.deltas.push(SiteDelta {
            layer: layer_index,
            site,
            kind: "noise",
            max_abs_delta: max,
        });
    }
    h.add(&eps)
}

/// Inverted dropout: entries kept with probability `1 - rate` and scaled by
/// `1/(1-rate)` in train mode; identity in eval mode.
pub fn apply_dropout(
    h: &Tensor,
    spec: &DropoutSpec,
    mode: Mode,
    rng: &mut RngStream,
    trace: Option<(usize, Site, &mut PerturbTrace)>,
) -> Result<Tensor> {
    if mode == Mode::Eval || spec.rate == 0.0 {
        if let Some((layer, site, t)) = trace {
            t.deltas.push(SiteDelta {
                layer,
                site,
                kind: "dropout",
                max_abs_delta: 0.0,
            });
        }
        return Ok(h.clone());
    }
    let keep = 1.0 - spec.rate;
    let scale = 1.0 / keep;
    let n = h.len();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.next_f64() < keep { scale } else { 0.0 })
        .collect();
    let mask = Tensor::new(&h.shape(), mask);
    let out = h.mul(&mask)?;
    if let Some((layer, site, t)) = trace {
        let hd = h.data();
        let od = out.data();
        let max = hd
            .iter()
            .zip(od.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        t.deltas.push(SiteDelta {
            layer,
            site,
            kind: "dropout",
            max_abs_delta: max,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;

    #[test]
    fn uniform_noise_respects_support_bound() {
        let spec = NoiseSpec::uniform(1e-4);
        let mut rng = RngStream::new(1, 0, 1, Purpose::PreLayerNoise);
        let eps = sample_noise(&[64, 64], &spec, &mut rng).unwrap();
        assert!(eps.data().iter().all(|v| v.abs() <= 1e-4));
    }

    #[test]
    fn normal_noise_moments_within_clt_bounds() {
        let sigma = 1e-5;
        let spec = NoiseSpec::normal(sigma);
        let mut rng = RngStream::new(2, 0, 1, Purpose::PreLayerNoise);
        let n = 1_000_000usize;
        let eps = sample_noise(&[n], &spec, &mut rng).unwrap();
        let mean = eps.data().iter().sum::<f64>() / n as f64;
        let var = eps.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 * sigma / (n as f64).sqrt(), "mean {mean}");
        assert!(var >= sigma * sigma * 0.99 && var <= sigma * sigma * 1.01, "var {var}");
    }

    #[test]
    fn uniform_noise_variance_matches_formula() {
        let sigma = 1e-5;
        let spec = NoiseSpec::uniform(sigma);
        let mut rng = RngStream::new(3, 0, 1, Purpose::PreLayerNoise);
        let n = 1_000_000usize;
        let eps = sample_noise(&[n], &spec, &mut rng).unwrap();
        let mean = eps.data().iter().sum::<f64>() / n as f64;
        let var = eps.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let expect = sigma * sigma / 3.0;
        assert!((var - expect).abs() <= 0.01 * expect, "var {var} vs {expect}");
    }

    #[test]
    fn sample_noise_rejects_form_none() {
        let mut rng = RngStream::new(1, 0, 1, Purpose::PreLayerNoise);
        assert!(matches!(
            sample_noise(&[2], &NoiseSpec::none(), &mut rng),
            Err(HypeError::Usage(_))
        ));
    }

    #[test]
    fn eval_mode_is_bit_exact_identity() {
        let h = Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.25, -0.125]);
        let mut rng = RngStream::new(4, 0, 1, Purpose::PreLayerNoise);
        let out = apply_perturbation(
            &h,
            1,
            Site::PreLayer,
            &NoiseSpec::normal(0.5),
            Mode::Eval,
            &mut rng,
            None,
        )
        .unwrap();
        assert_eq!(out.to_vec(), h.to_vec());
    }

    #[test]
    fn sigma_zero_is_bit_exact_identity() {
        let h = Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let mut rng = RngStream::new(4, 0, 1, Purpose::PreLayerNoise);
        let spec = NoiseSpec {
            form: NoiseForm::Normal,
            sigma: 0.0,
            position: NoisePosition::PreLayer,
            layer_mask: None,
        };
        let out =
            apply_perturbation(&h, 1, Site::PreLayer, &spec, Mode::Train, &mut rng, None).unwrap();
        assert_eq!(out.to_vec(), h.to_vec());
    }

    #[test]
    fn masked_out_layer_is_bit_exact_identity() {
        let h = Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let mut rng = RngStream::new(4, 0, 1, Purpose::PreLayerNoise);
        let spec = NoiseSpec::normal(1e-4).with_layer_mask([3, 4]);
        let mut trace = PerturbTrace::default();
        let out = apply_perturbation(
            &h,
            1,
            Site::PreLayer,
            &spec,
            Mode::Train,
            &mut rng,
            Some(&mut trace),
        )
        .unwrap();
        assert_eq!(out.to_vec(), h.to_vec());
        assert_eq!(trace.deltas[0].max_abs_delta, 0.0);
    }

    #[test]
    fn identical_stream_key_gives_identical_noise() {
        let spec = NoiseSpec::normal(1e-4);
        let mut a = RngStream::new(8, 5, 2, Purpose::PreLayerNoise);
        let mut b = RngStream::new(8, 5, 2, Purpose::PreLayerNoise);
        let na = sample_noise(&[3, 7], &spec, &mut a).unwrap();
        let nb = sample_noise(&[3, 7], &spec, &mut b).unwrap();
        assert_eq!(na.to_vec(), nb.to_vec());
    }

    #[test]
    fn noise_is_detached_from_gradient_graph() {
        let spec = NoiseSpec::normal(1e-2);
        let mut rng = RngStream::new(1, 0, 1, Purpose::PreLayerNoise);
        let eps = sample_noise(&[2], &spec, &mut rng).unwrap();
        assert!(!eps.requires_grad());
        let h = Tensor::param(&[2], vec![1.0, 2.0]);
        let out = apply_perturbation(
            &h,
            1,
            Site::PreLayer,
            &spec,
            Mode::Train,
            &mut RngStream::new(1, 0, 1, Purpose::PreLayerNoise),
            None,
        )
        .unwrap();
        out.sum().backward().unwrap();
        assert_eq!(h.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn dropout_rate_zero_and_eval_are_identity() {
        let h = Tensor::new(&[3], vec![1.0, 2.0, 3.0]);
        let mut rng = RngStream::new(1, 0, 1, Purpose::Dropout);
        let out = apply_dropout(&h, &DropoutSpec::off(), Mode::Train, &mut rng, None).unwrap();
        assert_eq!(out.to_vec(), h.to_vec());
        let spec = DropoutSpec::new(0.5).unwrap();
        let out = apply_dropout(&h, &spec, Mode::Eval, &mut rng, None).unwrap();
        assert_eq!(out.to_vec(), h.to_vec());
    }

    #[test]
    fn dropout_is_unbiased() {
        let rate = 0.1;
        let n = 1_000_000usize;
        let h = Tensor::new(&[n], vec![1.0; n]);
        let spec = DropoutSpec::new(rate).unwrap();
        let mut rng = RngStream::new(6, 0, 1, Purpose::Dropout);
        let out = apply_dropout(&h, &spec, Mode::Train, &mut rng, None).unwrap();
        let mean = out.data().iter().sum::<f64>() / n as f64;
        let bound = 4.0 * (rate / (1.0 - rate)).sqrt() / (n as f64).sqrt();
        assert!((mean - 1.0).abs() <= bound, "mean {mean}, bound {bound}");
    }

    #[test]
    fn dropout_rate_one_rejected() {
        assert!(DropoutSpec::new(1.0).is_err());
        assert!(DropoutSpec::new(-0.1).is_err());
    }
}
