//! Local training: hybrid cross-entropy + soft-Dice loss, Adam over the
//! strategy-masked parameter set, and Dice-score evaluation.

mod synth;

pub use synth::{
    default_site_params, gen_site, read_site_cache, write_site_cache, Sample, SiteParams,
    SyntheticSite,
};

use crate::adapters::{AdapterSet, AdapterTarget};
use crate::model::{trainable_params, Grads, Strategy, ToyModel};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

/// Smoothing constant of the soft-Dice term; avoids 0/0 on empty classes.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Loss diverged above this value.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelRange { label: u8, num_classes: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate site params: {0}")]
    DegenerateSite(String),
    #[error("training diverged at step {step} with loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset cache: {0}")]
    MalformedCache(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Weights of the hybrid segmentation loss. The defaults sum to 1, but the
/// pair is not constrained to.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ce: 0.2, dice: 0.8 }
    }
}

/// Hybrid loss: `ce * mean pixel cross-entropy + dice * (1 - mean soft Dice
/// over foreground classes)`. Logits are class-major `[c*H*W + p]`; returns
/// the loss and its gradient with respect to the logits.
pub fn hybrid_loss(
    logits: &[f64],
    mask: &[u8],
    num_classes: usize,
    weights: LossWeights,
) -> Result<(f64, Vec<f64>), TrainError> {
    let pixels = mask.len();
    if logits.len() != num_classes * pixels {
        return Err(TrainError::Shape(format!(
            "{} logits for {} classes x {} pixels",
            logits.len(),
            num_classes,
            pixels
        )));
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(TrainError::NonFinite("logits"));
    }
    for &l in mask {
        if l as usize >= num_classes {
            return Err(TrainError::LabelRange {
                label: l,
                num_classes,
            });
        }
    }

    // Softmax probabilities, pixel by pixel.
    let mut probs = vec![0.0; logits.len()];
    let mut ce_sum = 0.0;
    for p in 0..pixels {
        let mut maxv = f64::NEG_INFINITY;
        for c in 0..num_classes {
            maxv = maxv.max(logits[c * pixels + p]);
        }
        let mut denom = 0.0;
        for c in 0..num_classes {
            let e = (logits[c * pixels + p] - maxv).exp();
            probs[c * pixels + p] = e;
            denom += e;
        }
        for c in 0..num_classes {
            probs[c * pixels + p] /= denom;
        }
        let g = mask[p] as usize;
        // log-sum-exp form keeps this finite for extreme logits
        ce_sum += maxv + denom.ln() - logits[g * pixels + p];
    }
    let ce = ce_sum / pixels as f64;

    // Soft Dice over foreground classes.
    let fg = num_classes - 1;
    let mut dice_mean = 0.0;
    let mut dprob = vec![0.0; logits.len()];
    for c in 1..num_classes {
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut gsum = 0.0;
        for p in 0..pixels {
            let g = if mask[p] as usize == c { 1.0 } else { 0.0 };
            inter += probs[c * pixels + p] * g;
            psum += probs[c * pixels + p];
            gsum += g;
        }
        let num = 2.0 * inter + DICE_SMOOTH;
        let den = psum + gsum + DICE_SMOOTH;
        dice_mean += num / den;
        // d(1 - dice_c)/dprob = -(2g*den - num)/den^2, averaged over classes
        let coeff = -1.0 / fg as f64;
        for p in 0..pixels {
            let g = if mask[p] as usize == c { 1.0 } else { 0.0 };
            dprob[c * pixels + p] = coeff * (2.0 * g * den - num) / (den * den);
        }
    }
    dice_mean /= fg as f64;
    let dice_loss = 1.0 - dice_mean;

    let loss = weights.ce * ce + weights.dice * dice_loss;
    if !loss.is_finite() {
        return Err(TrainError::NonFinite("loss"));
    }

    // Chain rule through the per-pixel softmax plus the CE term.
    let mut dlogits = vec![0.0; logits.len()];
    for p in 0..pixels {
        let g = mask[p] as usize;
        let mut inner = 0.0;
        for c in 0..num_classes {
            inner += dprob[c * pixels + p] * probs[c * pixels + p];
        }
        for c in 0..num_classes {
            let pc = probs[c * pixels + p];
            let dce = (pc - if c == g { 1.0 } else { 0.0 }) / pixels as f64;
            let ddice = pc * (dprob[c * pixels + p] - inner);
            dlogits[c * pixels + p] = weights.ce * dce + weights.dice * ddice;
        }
    }
    Ok((loss, dlogits))
}

/// Per-class and mean-foreground Dice of hard label maps. Empty-empty
/// classes score 1.0.
#[derive(Debug, Clone)]
pub struct DiceScores {
    pub per_class: Vec<f64>,
    pub mean_foreground: f64,
}

pub fn dice_score(pred: &[u8], truth: &[u8], num_classes: usize) -> Result<DiceScores, TrainError> {
    if pred.len() != truth.len() {
        return Err(TrainError::Shape(format!(
            "{} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    for &l in pred.iter().chain(truth) {
        if l as usize >= num_classes {
            return Err(TrainError::LabelRange {
                label: l,
                num_classes,
            });
        }
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes as u8 {
        let mut inter = 0usize;
        let mut psz = 0usize;
        let mut gsz = 0usize;
        for (&p, &g) in pred.iter().zip(truth) {
            if p == c {
                psz += 1;
            }
            if g == c {
                gsz += 1;
            }
            if p == c && g == c {
                inter += 1;
            }
        }
        per_class.push(if psz + gsz == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (psz + gsz) as f64
        });
    }
    let fg = &per_class[1..];
    let mean_foreground = fg.iter().sum::<f64>() / fg.len() as f64;
    Ok(DiceScores {
        per_class,
        mean_foreground,
    })
}

/// Argmax over the class axis of class-major logits.
pub fn argmax_mask(logits: &[f64], num_classes: usize) -> Vec<u8> {
    let pixels = logits.len() / num_classes;
    (0..pixels)
        .map(|p| {
            let mut best = 0u8;
            let mut bestv = logits[p];
            for c in 1..num_classes {
                let v = logits[c * pixels + p];
                if v > bestv {
                    bestv = v;
                    best = c as u8;
                }
            }
            best
        })
        .collect()
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for one flat tensor.
#[derive(Debug, Clone)]
pub struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamSlot {
    pub fn new(n: usize) -> AdamSlot {
        AdamSlot {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Bias-corrected Adam update on a flat slice.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    slot: &mut AdamSlot,
    t: u64,
    p: &AdamParams,
) -> Result<(), TrainError> {
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(TrainError::NonFinite("gradient"));
    }
    debug_assert_eq!(params.len(), grads.len());
    let bc1 = 1.0 - p.beta1.powi(t as i32);
    let bc2 = 1.0 - p.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        slot.m[i] = p.beta1 * slot.m[i] + (1.0 - p.beta1) * g;
        slot.v[i] = p.beta2 * slot.v[i] + (1.0 - p.beta2) * g * g;
        let mhat = slot.m[i] / bc1;
        let vhat = slot.v[i] / bc2;
        params[i] -= p.lr * mhat / (vhat.sqrt() + p.eps);
    }
    Ok(())
}

/// Optimizer state for one client: a slot per trainable dense tensor and a
/// factor pair per adapter. The step counter is shared, as in a single
/// optimizer over one parameter list.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: u64,
    dense: BTreeMap<usize, AdamSlot>,
    adapters: BTreeMap<(u32, AdapterTarget), (AdamSlot, AdamSlot)>,
}

impl AdamState {
    pub fn new(model: &ToyModel, strategy: Strategy, adapters: Option<&AdapterSet>) -> AdamState {
        let dense = trainable_params(&model.registry, strategy, adapters)
            .expect("strategy/adapter pairing checked by caller")
            .into_iter()
            .map(|i| (i, AdamSlot::new(model.registry.by_idx(i).numel())))
            .collect();
        let mut ad = BTreeMap::new();
        if let Some(set) = adapters {
            for (id, target, a) in set.iter_flat() {
                ad.insert(
                    (id, target),
                    (
                        AdamSlot::new(a.rank * a.d_in()),
                        AdamSlot::new(a.d_out() * a.rank),
                    ),
                );
            }
        }
        AdamState {
            t: 0,
            dense,
            adapters: ad,
        }
    }
}

/// Knobs of a local training run.
#[derive(Debug, Clone, Copy)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub loss: LossWeights,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 100,
            batch_size: 32,
            adam: AdamParams::default(),
            loss: LossWeights::default(),
        }
    }
}

/// Mean loss and gradients over a batch of samples.
pub fn batch_loss_and_grads(
    model: &ToyModel,
    adapters: Option<&AdapterSet>,
    samples: &[&Sample],
    loss_w: LossWeights,
) -> Result<(f64, Grads), TrainError> {
    let mut total = 0.0;
    let mut grads = Grads::zeros(model, adapters);
    let scale = 1.0 / samples.len() as f64;
    for s in samples {
        let (logits, tape) = model.forward_train(adapters, &s.volume)?;
        let (loss, dlogits) = hybrid_loss(&logits, &s.mask, model.cfg.num_classes, loss_w)?;
        total += loss * scale;
        let scaled: Vec<f64> = dlogits.iter().map(|g| g * scale).collect();
        let g = model.backward(adapters, &tape, &scaled);
        grads.add_scaled(&g, 1.0);
    }
    Ok((total, grads))
}

/// Runs `steps` optimizer steps on uniformly resampled batches, updating
/// only the strategy's trainable set. Returns the loss trace. Frozen
/// parameters are never touched.
#[allow(clippy::too_many_arguments)]
pub fn train_local(
    model: &mut ToyModel,
    adapters: &mut Option<AdapterSet>,
    strategy: Strategy,
    data: &[Sample],
    settings: &TrainSettings,
    state: &mut AdamState,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, TrainError> {
    assert!(settings.steps > 0, "steps must be positive");
    assert!(!data.is_empty(), "empty training set");
    let trainable = trainable_params(&model.registry, strategy, adapters.as_ref())?;
    let mut trace = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let batch: Vec<&Sample> = (0..settings.batch_size)
            .map(|_| &data[rng.gen_range(0..data.len())])
            .collect();
        // Numeric blow-ups mid-run are divergence, not malformed input.
        let (loss, grads) =
            match batch_loss_and_grads(model, adapters.as_ref(), &batch, settings.loss) {
                Ok(r) => r,
                Err(TrainError::NonFinite(_)) => {
                    return Err(TrainError::Divergence {
                        step,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            return Err(TrainError::Divergence { step, loss });
        }
        trace.push(loss);

        state.t += 1;
        for &i in &trainable {
            let slot = state.dense.get_mut(&i).expect("trainable slot");
            adam_step(
                &mut model.registry.by_idx_mut(i).data,
                &grads.dense[i],
                slot,
                state.t,
                &settings.adam,
            )?;
        }
        if let Some(set) = adapters.as_mut() {
            for ((id, target), g) in &grads.adapters {
                let ad = set.get_mut(*id, *target).expect("adapter");
                let (sa, sb) = state.adapters.get_mut(&(*id, *target)).expect("slot");
                adam_step(ad.a_factor.data_mut(), &g.da, sa, state.t, &settings.adam)?;
                adam_step(ad.b_factor.data_mut(), &g.db, sb, state.t, &settings.adam)?;
            }
        }
    }
    Ok(trace)
}

/// Mean foreground Dice of a model over a sample list.
pub fn evaluate_dice(
    model: &ToyModel,
    adapters: Option<&AdapterSet>,
    samples: &[Sample],
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for s in samples {
        let logits = model.forward(adapters, &s.volume)?;
        let pred = argmax_mask(&logits, model.cfg.num_classes);
        total += dice_score(&pred, &s.mask, model.cfg.num_classes)?.mean_foreground;
    }
    Ok(total / samples.len() as f64)
}
