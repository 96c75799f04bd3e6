//! AdamW with decoupled weight decay, global-norm gradient clipping, and a
//! linear learning-rate warm-up that stays constant afterwards.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SfcError};
use crate::nn::Params;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Peak learning rate reached at the end of warm-up.
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient L2-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub warmup_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-2,
            clip_norm: 5.0,
            warmup_steps: 100,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.betas.0)
            && (0.0..1.0).contains(&self.betas.1)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm >= 0.0;
        if !ok {
            return Err(SfcError::Config(format!("optimizer config out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Moment state lives in f64 regardless of the model element type so long
/// runs don't drift in f32.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: OptimConfig,
    step: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamW { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    /// Steps applied so far.
    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Learning rate for step index `step` (0-based): linear ramp over
    /// `warmup_steps`, then constant at `lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.cfg.warmup_steps == 0 {
            return self.cfg.lr;
        }
        let t = (step + 1).min(self.cfg.warmup_steps) as f64;
        self.cfg.lr * t / self.cfg.warmup_steps as f64
    }

    /// Applies one update from a name → gradient map (the layout the tape's
    /// gradient export produces). Returns the pre-clip global gradient norm.
    pub fn step<T: Scalar>(
        &mut self,
        model: &mut impl Params<T>,
        grads: &BTreeMap<String, Vec<T>>,
    ) -> Result<f64> {
        let mut sq = 0.0f64;
        for g in grads.values() {
            for v in g {
                let v = v.as_f64();
                if !v.is_finite() {
                    return Err(SfcError::Training("non-finite gradient".into()));
                }
                sq += v * v;
            }
        }
        let norm = sq.sqrt();
        let scale = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        let lr = self.lr_at(self.step);
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = self.cfg.betas;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let mut err = None;
        model.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            let Some(g) = grads.get(&p.name) else {
                err = Some(SfcError::Training(format!("no gradient for parameter `{}`", p.name)));
                return;
            };
            if g.len() != p.value.numel() {
                err = Some(SfcError::Training(format!(
                    "gradient for `{}` has {} elements, parameter has {}",
                    p.name,
                    g.len(),
                    p.value.numel()
                )));
                return;
            }
            let m = self.m.entry(p.name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(p.name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g[i].as_f64() * scale;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let wi = w.as_f64();
                *w = T::f(wi - lr * (m_hat / (v_hat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * wi));
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(norm),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Parameter, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn two_params(rng: &mut ChaCha12Rng) -> Vec<Parameter<f64>> {
        vec![
            Parameter::new("a", Tensor::uniform(&[3], -1.0, 1.0, rng)),
            Parameter::new("b", Tensor::uniform(&[2, 2], -1.0, 1.0, rng)),
        ]
    }

    fn grads_of(ps: &[Parameter<f64>], f: impl Fn(usize, f64) -> f64) -> BTreeMap<String, Vec<f64>> {
        ps.iter()
            .map(|p| {
                (p.name.clone(), p.value.data().iter().enumerate().map(|(i, w)| f(i, *w)).collect())
            })
            .collect()
    }

    #[test]
    fn update_matches_a_handwritten_reference() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut ps = two_params(&mut rng);
        let reference = ps.clone();
        let cfg = OptimConfig { warmup_steps: 0, clip_norm: 0.0, ..OptimConfig::default() };
        let mut opt = AdamW::new(cfg).unwrap();

        // Independent recurrence: m,v per element, bias-corrected, decoupled decay.
        let mut oracle: Vec<Vec<f64>> =
            reference.iter().map(|p| p.value.data().to_vec()).collect();
        let mut m: Vec<Vec<f64>> = oracle.iter().map(|w| vec![0.0; w.len()]).collect();
        let mut v = m.clone();
        for t in 1..=3usize {
            let grads = grads_of(&ps, |i, w| 0.1 * w + i as f64 * 0.01);
            let oracle_grads: Vec<Vec<f64>> = oracle
                .iter()
                .map(|ws| ws.iter().enumerate().map(|(i, w)| 0.1 * w + i as f64 * 0.01).collect())
                .collect();
            opt.step(&mut ps, &grads).unwrap();
            for (pi, ws) in oracle.iter_mut().enumerate() {
                for (i, w) in ws.iter_mut().enumerate() {
                    let g = oracle_grads[pi][i];
                    m[pi][i] = 0.9 * m[pi][i] + 0.1 * g;
                    v[pi][i] = 0.999 * v[pi][i] + 0.001 * g * g;
                    let mh = m[pi][i] / (1.0 - 0.9f64.powi(t as i32));
                    let vh = v[pi][i] / (1.0 - 0.999f64.powi(t as i32));
                    *w -= 1e-3 * (mh / (vh.sqrt() + 1e-8) + 1e-2 * *w);
                }
            }
        }
        for (p, ws) in ps.iter().zip(&oracle) {
            for (a, b) in p.value.data().iter().zip(ws) {
                assert!((a - b).abs() < 1e-15, "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn warmup_ramps_linearly_then_holds() {
        let opt =
            AdamW::new(OptimConfig { warmup_steps: 10, ..OptimConfig::default() }).unwrap();
        assert!((opt.lr_at(0) - 1e-4).abs() < 1e-18);
        assert!((opt.lr_at(4) - 5e-4).abs() < 1e-18);
        assert!((opt.lr_at(9) - 1e-3).abs() < 1e-18);
        assert!((opt.lr_at(500) - 1e-3).abs() < 1e-18);
        let flat = AdamW::new(OptimConfig { warmup_steps: 0, ..OptimConfig::default() }).unwrap();
        assert_eq!(flat.lr_at(0), 1e-3);
    }

    #[test]
    fn oversized_gradients_are_scaled_onto_the_clip_sphere() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut a = two_params(&mut rng);
        let mut b = a.clone();
        let big = grads_of(&a, |i, w| 40.0 * w + i as f64);
        let norm: f64 = big.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm > 5.0);
        let pre_scaled: BTreeMap<String, Vec<f64>> =
            big.iter().map(|(k, g)| (k.clone(), g.iter().map(|v| v * 5.0 / norm).collect())).collect();

        let cfg = OptimConfig::default();
        let reported = AdamW::new(cfg).unwrap().step(&mut a, &big).unwrap();
        AdamW::new(cfg).unwrap().step(&mut b, &pre_scaled).unwrap();
        assert!((reported - norm).abs() < 1e-12, "returns the pre-clip norm");
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.value.data(), pb.value.data());
        }
    }

    #[test]
    fn weight_decay_is_decoupled_from_the_moment_update() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut ps = two_params(&mut rng);
        let start = ps.clone();
        let zero = grads_of(&ps, |_, _| 0.0);
        let cfg = OptimConfig { warmup_steps: 0, ..OptimConfig::default() };
        let mut opt = AdamW::new(cfg).unwrap();
        for _ in 0..3 {
            opt.step(&mut ps, &zero).unwrap();
        }
        // Zero gradients leave the moments at zero, so each step is a pure
        // multiplicative shrink by (1 − lr·wd).
        let shrink = (1.0 - 1e-3 * 1e-2f64).powi(3);
        for (p, s) in ps.iter().zip(&start) {
            for (a, b) in p.value.data().iter().zip(s.value.data()) {
                assert!((a - b * shrink).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn missing_and_misshapen_gradients_are_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut ps = two_params(&mut rng);
        let mut opt = AdamW::new(OptimConfig::default()).unwrap();
        let mut grads = grads_of(&ps, |_, w| w);
        grads.remove("b");
        assert!(opt.step(&mut ps, &grads).is_err());
        let mut grads = grads_of(&ps, |_, w| w);
        grads.get_mut("a").unwrap().push(0.0);
        assert!(opt.step(&mut ps, &grads).is_err());
        let bad = grads_of(&ps, |_, _| f64::NAN);
        assert!(opt.step(&mut ps, &bad).is_err());
    }
}
