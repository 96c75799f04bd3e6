//! Toy training loop: dynamic mixing per step, complex masking on the tape,
//! time-domain thresholded-SNR loss through the inverse transform, and a
//! line-delimited plain-text history that is byte-identical under a seed.

use std::fmt::Write as _;

use crate::dsp::{apply_mask, istft, stft, StftPlan};
use crate::error::{Result, SfcError};
use crate::loss::{snr_loss, LossConfig};
use crate::metrics::si_sdr;
use crate::model::Model;
use crate::nn::Params;
use crate::optim::{AdamW, OptimConfig};
use crate::tensor::{Scalar, Tape, Var};
use crate::toy::{ToyMixSpec, ToyMixer, ToyScene};

/// Seed offset separating the held-out metric scene from the training stream.
const EVAL_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    /// 1-based step index.
    pub step: usize,
    pub loss: f64,
    /// Pre-clip global gradient L2 norm.
    pub grad_norm: f64,
    pub lr: f64,
    /// Mean SI-SDR on the held-out scene, on snapshot steps only.
    pub sisdr: Option<f64>,
}

impl TrainRecord {
    pub fn to_line(&self) -> String {
        let mut s = format!(
            "step={} loss={} grad_norm={} lr={}",
            self.step, self.loss, self.grad_norm, self.lr
        );
        if let Some(v) = self.sisdr {
            write!(s, " sisdr={v}").expect("string write");
        }
        s
    }

    pub fn parse(line: &str) -> Result<Self> {
        let mut rec = TrainRecord { step: 0, loss: f64::NAN, grad_norm: f64::NAN, lr: f64::NAN, sisdr: None };
        let mut seen_step = false;
        for field in line.split_whitespace() {
            let (key, value) = field.split_once('=').ok_or_else(|| SfcError::Format {
                what: "train history",
                detail: format!("field `{field}` is not key=value"),
            })?;
            let parse_f = |v: &str| {
                v.parse::<f64>().map_err(|_| SfcError::Format {
                    what: "train history",
                    detail: format!("bad number `{v}` for `{key}`"),
                })
            };
            match key {
                "step" => {
                    rec.step = value.parse().map_err(|_| SfcError::Format {
                        what: "train history",
                        detail: format!("bad step `{value}`"),
                    })?;
                    seen_step = true;
                }
                "loss" => rec.loss = parse_f(value)?,
                "grad_norm" => rec.grad_norm = parse_f(value)?,
                "lr" => rec.lr = parse_f(value)?,
                "sisdr" => rec.sisdr = Some(parse_f(value)?),
                other => {
                    return Err(SfcError::Format {
                        what: "train history",
                        detail: format!("unknown field `{other}`"),
                    })
                }
            }
        }
        if !seen_step || rec.loss.is_nan() || rec.grad_norm.is_nan() || rec.lr.is_nan() {
            return Err(SfcError::Format {
                what: "train history",
                detail: format!("incomplete record `{line}`"),
            });
        }
        Ok(rec)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<TrainRecord>,
}

impl TrainHistory {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(TrainRecord::parse)
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainHistory { records })
    }

    /// Mean loss over the `window` records ending at 1-based `end_step`.
    pub fn loss_moving_avg(&self, end_step: usize, window: usize) -> Option<f64> {
        let lo = end_step.saturating_sub(window);
        let xs: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.step > lo && r.step <= end_step)
            .map(|r| r.loss)
            .collect();
        if xs.is_empty() {
            return None;
        }
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Per-source complex ratio masking on the tape: `masks` is `(N, 2M, F, T)`,
/// `spec` is `(2M, F, T)`; returns the masked spectrogram of source `n`.
pub fn mask_source<T: Scalar>(tape: &mut Tape<T>, masks: Var, spec: Var, n: usize) -> Result<Var> {
    let channels = tape.shape(spec)[0];
    let mask_n = tape.index(masks, 0, n)?;
    let mut planes = Vec::with_capacity(channels);
    for p in 0..channels / 2 {
        let mr = tape.narrow(mask_n, 0, 2 * p, 1)?;
        let mi = tape.narrow(mask_n, 0, 2 * p + 1, 1)?;
        let xr = tape.narrow(spec, 0, 2 * p, 1)?;
        let xi = tape.narrow(spec, 0, 2 * p + 1, 1)?;
        let rr = tape.mul(mr, xr)?;
        let ii = tape.mul(mi, xi)?;
        let re = tape.sub(rr, ii)?;
        let ri = tape.mul(mr, xi)?;
        let ir = tape.mul(mi, xr)?;
        let im = tape.add(ri, ir)?;
        planes.push(re);
        planes.push(im);
    }
    tape.concat(&planes, 0)
}

/// Run the model on one scene without touching its weights and return the
/// mean SI-SDR of the separated stems against the active references.
pub fn eval_separation_sisdr<T: Scalar>(
    model: &Model<T>,
    scene: &ToyScene<T>,
    plan: &StftPlan,
) -> Result<f64> {
    let spec = stft(scene.mixture.data(), plan)?;
    let mut tape = Tape::<T>::new();
    let xv = tape.input(&spec)?;
    let masks = model.forward(&mut tape, xv)?;
    let masked = apply_mask(&tape.tensor(masks), &spec)?;
    let n_src = masked.shape()[0];
    let plane: usize = masked.shape()[1..].iter().product();
    let mut scores = Vec::new();
    for n in 0..n_src {
        if !scene.active[n] {
            continue;
        }
        let one = crate::tensor::Tensor::from_vec(
            &masked.shape()[1..].to_vec(),
            masked.data()[n * plane..(n + 1) * plane].to_vec(),
        )?;
        let est = istft(&one, plan, scene.mixture.numel())?;
        let est = crate::tensor::Tensor::from_vec(&[est.len()], est)?;
        scores.push(si_sdr(&scene.sources[n], &est)?);
    }
    if scores.is_empty() {
        return Err(SfcError::Metric("no active sources in the evaluation scene".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mean SI-SDR of the raw mixture against each active reference — the
/// baseline a separator has to beat.
pub fn scene_input_sisdr<T: Scalar>(scene: &ToyScene<T>) -> Result<f64> {
    let mut scores = Vec::new();
    for (y, active) in scene.sources.iter().zip(&scene.active) {
        if *active {
            scores.push(si_sdr(y, &scene.mixture)?);
        }
    }
    if scores.is_empty() {
        return Err(SfcError::Metric("no active sources in the scene".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// A held-out scene where every source is active, for metric snapshots.
pub fn eval_scene<T: Scalar>(spec: &ToyMixSpec) -> Result<ToyScene<T>> {
    let mut held = spec.clone();
    held.seed = spec.seed ^ EVAL_SEED_SALT;
    let mut mixer = ToyMixer::new(held)?;
    for _ in 0..64 {
        let scene = mixer.next_scene::<T>();
        if scene.active.iter().all(|a| *a) {
            return Ok(scene);
        }
    }
    Err(SfcError::Training("could not draw a fully active evaluation scene".into()))
}

fn step_error<T: Scalar>(model: &Model<T>, step: usize, e: SfcError) -> SfcError {
    let mut bad = None;
    model.visit(&mut |p| {
        if bad.is_none() && p.value.data().iter().any(|v| !v.is_finite()) {
            bad = Some(p.name.clone());
        }
    });
    match bad {
        Some(name) => {
            SfcError::Training(format!("step {step}: parameter `{name}` is non-finite ({e})"))
        }
        None => SfcError::Training(format!("step {step}: {e}")),
    }
}

/// Train on freshly mixed scenes; the loss is the thresholded SNR summed
/// over sources, computed on time-domain stems through the inverse STFT.
/// `eval_every = 0` disables metric snapshots.
pub fn train_toy<T: Scalar>(
    model: &mut Model<T>,
    mix: &ToyMixSpec,
    plan: &StftPlan,
    optim_cfg: &OptimConfig,
    loss_cfg: &LossConfig,
    steps: usize,
    eval_every: usize,
) -> Result<TrainHistory> {
    if model.cfg.codec.in_channels() != 2 {
        return Err(SfcError::Config(format!(
            "toy scenes are single-channel; the model expects {} input planes",
            model.cfg.codec.in_channels()
        )));
    }
    if model.cfg.codec.num_sources() != mix.sources.len() {
        return Err(SfcError::Config(format!(
            "model separates {} sources but the mix has {}",
            model.cfg.codec.num_sources(),
            mix.sources.len()
        )));
    }
    let mut mixer = ToyMixer::new(mix.clone())?;
    let held_out = if eval_every > 0 { Some(eval_scene::<T>(mix)?) } else { None };
    let mut opt = AdamW::new(*optim_cfg)?;
    let mut history = TrainHistory::default();
    for step in 1..=steps {
        let scene = mixer.next_scene::<T>();
        let (loss, grads) = (|| {
            let spec = stft(scene.mixture.data(), plan)?;
            let mut tape = Tape::<T>::new();
            let xv = tape.input(&spec)?;
            let masks = model.forward(&mut tape, xv)?;
            let mut total: Option<Var> = None;
            for n in 0..scene.sources.len() {
                let masked = mask_source(&mut tape, masks, xv, n)?;
                let est = tape.istft(masked, plan.n_fft, plan.hop, scene.mixture.numel())?;
                let l = snr_loss(&mut tape, est, &scene.sources[n], &scene.mixture, loss_cfg)?;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            let total = total.expect("at least one source");
            let loss = tape.tensor(total).data()[0].as_f64();
            tape.backward(total)?;
            Ok((loss, tape.param_grads()))
        })()
        .map_err(|e| step_error(model, step, e))?;
        for (name, g) in &grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(SfcError::Training(format!(
                    "step {step}: non-finite gradient in `{name}`"
                )));
            }
        }
        let lr = opt.lr_at(opt.step_count());
        let grad_norm = opt.step(model, &grads).map_err(|e| step_error(model, step, e))?;
        let sisdr = match &held_out {
            Some(scene) if step % eval_every == 0 => {
                Some(eval_separation_sisdr(model, scene, plan)?)
            }
            _ => None,
        };
        history.records.push(TrainRecord { step, loss, grad_norm, lr, sisdr });
    }
    Ok(history)
}
