//! The buildable model: forward pass and hand-written backward pass.
//!
//! Layout conventions, used everywhere below:
//! - token activations are token-major: `x[t*dim + i]`
//! - weights are row-major `[d_out, d_in]`: `w[o*d_in + i]`
//! - spatial maps are pixel-major: `m[(y*w + x)*channels + c]`; the encoder
//!   token grid in row-major token order is already in this layout
//! - logits are class-major: `logits[c*H*W + y*W + x]`
//! - attention probabilities: `probs[(h*tq + t)*tkv + s]`
//! - transposed-conv kernels (stride 2, kernel 2, so blocks never overlap):
//!   `w[((ci*c_out + co)*2 + dy)*2 + dx]`

#![allow(clippy::needless_range_loop)]

use super::{InitKind, ModelConfig, ModelError, Param, ParamRegistry, PATCH};
use crate::adapters::{init_lora, AdapterSet, AdapterTarget, LayerAdapters, LoraAdapter};
use crate::rngutil;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Builds above this many parameters are refused; large presets exist only
/// for the analytic count calculator.
const BUILD_LIMIT: u64 = 20_000_000;

/// A built model: config plus its populated registry.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub cfg: ModelConfig,
    pub registry: ParamRegistry,
}

/// Allocate and initialize every tensor in the shape plan.
pub fn build_model(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ToyModel, ModelError> {
    cfg.validate()?;
    let plan = super::shape_plan(cfg);
    let total: u64 = plan.iter().map(|e| e.numel() as u64).sum();
    if total > BUILD_LIMIT {
        return Err(ModelError::InvalidConfig(format!(
            "config '{}' holds {} parameters and is count-only; build the toy preset instead",
            cfg.name, total
        )));
    }
    let params: Vec<Param> = plan
        .into_iter()
        .map(|e| {
            let n = e.numel();
            let data = match e.init {
                InitKind::Zero => vec![0.0; n],
                InitKind::One => vec![1.0; n],
                InitKind::Gauss(std) => (0..n).map(|_| rngutil::gaussian(rng) * std).collect(),
            };
            Param {
                name: e.name,
                group: e.group,
                shape: e.shape,
                data,
            }
        })
        .collect();
    Ok(ToyModel {
        cfg: cfg.clone(),
        registry: ParamRegistry::from_params(params),
    })
}

/// Fresh adapters for every attention layer, in layer-id order with the
/// query factor drawn before the value factor.
pub fn init_adapter_set(
    cfg: &ModelConfig,
    rank: usize,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<AdapterSet, ModelError> {
    let mut set = AdapterSet::new();
    for spec in cfg.lora_layer_specs() {
        let query = init_lora(spec.d_out, spec.d_in, rank, scale, AdapterTarget::Query, rng)?;
        let value = init_lora(spec.d_out, spec.d_in, rank, scale, AdapterTarget::Value, rng)?;
        set.insert(spec.layer_id, LayerAdapters { query, value });
    }
    Ok(set)
}

/// Gradients of the A and B factors of one adapter, row-major.
#[derive(Debug, Clone)]
pub struct AdapterGrad {
    pub da: Vec<f64>,
    pub db: Vec<f64>,
}

/// Gradients for every dense parameter (aligned with registry order) and
/// every adapter factor.
#[derive(Debug, Clone)]
pub struct Grads {
    pub dense: Vec<Vec<f64>>,
    pub adapters: BTreeMap<(u32, AdapterTarget), AdapterGrad>,
}

impl Grads {
    pub fn zeros(model: &ToyModel, adapters: Option<&AdapterSet>) -> Grads {
        let dense = model
            .registry
            .iter()
            .map(|p| vec![0.0; p.numel()])
            .collect();
        let mut map = BTreeMap::new();
        if let Some(set) = adapters {
            for (id, target, ad) in set.iter_flat() {
                map.insert(
                    (id, target),
                    AdapterGrad {
                        da: vec![0.0; ad.rank * ad.d_in()],
                        db: vec![0.0; ad.d_out() * ad.rank],
                    },
                );
            }
        }
        Grads {
            dense,
            adapters: map,
        }
    }

    /// self += other * s
    pub fn add_scaled(&mut self, other: &Grads, s: f64) {
        for (a, b) in self.dense.iter_mut().zip(&other.dense) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
        for (key, g) in &other.adapters {
            let slot = self.adapters.get_mut(key).expect("adapter grad key");
            for (x, y) in slot.da.iter_mut().zip(&g.da) {
                *x += s * y;
            }
            for (x, y) in slot.db.iter_mut().zip(&g.db) {
                *x += s * y;
            }
        }
    }

    fn adapter_mut(&mut self, id: u32, target: AdapterTarget) -> &mut AdapterGrad {
        self.adapters.get_mut(&(id, target)).expect("adapter grad")
    }
}

// ---- small numeric kernels ------------------------------------------------

fn linear_fwd(x: &[f64], count: usize, w: &[f64], b: &[f64], d_in: usize, d_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; count * d_out];
    for t in 0..count {
        let xi = &x[t * d_in..(t + 1) * d_in];
        let yo = &mut y[t * d_out..(t + 1) * d_out];
        for o in 0..d_out {
            let wo = &w[o * d_in..(o + 1) * d_in];
            let mut acc = b[o];
            for i in 0..d_in {
                acc += wo[i] * xi[i];
            }
            yo[o] = acc;
        }
    }
    y
}

/// Adds `scale * B * (A * x)` into `y` and returns the `A*x` cache
/// (count x rank) needed by the backward pass.
fn lora_extra_fwd(x: &[f64], count: usize, ad: &LoraAdapter, y: &mut [f64]) -> Vec<f64> {
    let r = ad.rank;
    let d_in = ad.d_in();
    let d_out = ad.d_out();
    let a = ad.a_factor.data();
    let b = ad.b_factor.data();
    let mut az = vec![0.0; count * r];
    for t in 0..count {
        let xi = &x[t * d_in..(t + 1) * d_in];
        let zt = &mut az[t * r..(t + 1) * r];
        for j in 0..r {
            let arow = &a[j * d_in..(j + 1) * d_in];
            let mut acc = 0.0;
            for i in 0..d_in {
                acc += arow[i] * xi[i];
            }
            zt[j] = acc;
        }
        let yo = &mut y[t * d_out..(t + 1) * d_out];
        for o in 0..d_out {
            let brow = &b[o * r..(o + 1) * r];
            let mut acc = 0.0;
            for j in 0..r {
                acc += brow[j] * zt[j];
            }
            yo[o] += ad.scale * acc;
        }
    }
    az
}

#[derive(Debug, Clone)]
struct LnCache {
    mean: Vec<f64>,
    rstd: Vec<f64>,
}

fn ln_fwd(x: &[f64], count: usize, dim: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; count * dim];
    let mut mean = vec![0.0; count];
    let mut rstd = vec![0.0; count];
    for t in 0..count {
        let xi = &x[t * dim..(t + 1) * dim];
        let m = xi.iter().sum::<f64>() / dim as f64;
        let var = xi.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / dim as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        mean[t] = m;
        rstd[t] = rs;
        let yo = &mut y[t * dim..(t + 1) * dim];
        for i in 0..dim {
            yo[i] = gamma[i] * (xi[i] - m) * rs + beta[i];
        }
    }
    (y, LnCache { mean, rstd })
}

fn gelu_one(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn dgelu_one(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn gelu_fwd(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| gelu_one(v)).collect()
}

fn relu_fwd(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

fn attn_core_fwd(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    tq: usize,
    tkv: usize,
    dim: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; heads * tq * tkv];
    let mut out = vec![0.0; tq * dim];
    for h in 0..heads {
        let off = h * dh;
        for t in 0..tq {
            let prow = &mut probs[(h * tq + t) * tkv..(h * tq + t + 1) * tkv];
            let mut maxv = f64::NEG_INFINITY;
            for (s, p) in prow.iter_mut().enumerate() {
                let mut dot = 0.0;
                for d in 0..dh {
                    dot += q[t * dim + off + d] * k[s * dim + off + d];
                }
                *p = dot * scale;
                if *p > maxv {
                    maxv = *p;
                }
            }
            let mut denom = 0.0;
            for p in prow.iter_mut() {
                *p = (*p - maxv).exp();
                denom += *p;
            }
            for p in prow.iter_mut() {
                *p /= denom;
            }
            for (s, &p) in prow.iter().enumerate() {
                for d in 0..dh {
                    out[t * dim + off + d] += p * v[s * dim + off + d];
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attn_core_bwd(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    tq: usize,
    tkv: usize,
    dim: usize,
    heads: usize,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; tq * dim];
    let mut dk = vec![0.0; tkv * dim];
    let mut dv = vec![0.0; tkv * dim];
    let mut dp = vec![0.0; tkv];
    for h in 0..heads {
        let off = h * dh;
        for t in 0..tq {
            let prow = &probs[(h * tq + t) * tkv..(h * tq + t + 1) * tkv];
            for (s, slot) in dp.iter_mut().enumerate() {
                let mut acc = 0.0;
                for d in 0..dh {
                    acc += dout[t * dim + off + d] * v[s * dim + off + d];
                }
                *slot = acc;
            }
            for (s, &p) in prow.iter().enumerate() {
                for d in 0..dh {
                    dv[s * dim + off + d] += p * dout[t * dim + off + d];
                }
            }
            let inner: f64 = prow.iter().zip(&dp).map(|(p, g)| p * g).sum();
            for (s, &p) in prow.iter().enumerate() {
                let ds = p * (dp[s] - inner) * scale;
                for d in 0..dh {
                    dq[t * dim + off + d] += ds * k[s * dim + off + d];
                    dk[s * dim + off + d] += ds * q[t * dim + off + d];
                }
            }
        }
    }
    (dq, dk, dv)
}

fn convt_fwd(x: &[f64], h: usize, w: usize, cin: usize, cout: usize, wt: &[f64], b: &[f64]) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; h2 * w2 * cout];
    for p in 0..h2 * w2 {
        out[p * cout..(p + 1) * cout].copy_from_slice(b);
    }
    for y in 0..h {
        for xx in 0..w {
            let xin = &x[(y * w + xx) * cin..(y * w + xx + 1) * cin];
            for dy in 0..2 {
                for dx in 0..2 {
                    let op = ((2 * y + dy) * w2 + 2 * xx + dx) * cout;
                    for (ci, &xv) in xin.iter().enumerate() {
                        let wrow = &wt[((ci * cout) * 2 + dy) * 2 + dx..];
                        for o in 0..cout {
                            out[op + o] += wrow[o * 4] * xv;
                        }
                    }
                }
            }
        }
    }
    out
}

// ---- weight handles and tape ------------------------------------------------

struct AttnWeights<'a> {
    wq: &'a [f64],
    bq: &'a [f64],
    wk: &'a [f64],
    bk: &'a [f64],
    wv: &'a [f64],
    bv: &'a [f64],
    wo: &'a [f64],
    bo: &'a [f64],
    inner: usize,
    d_q_in: usize,
    d_kv_in: usize,
    d_out: usize,
    heads: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone)]
struct AttnCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    q_az: Option<Vec<f64>>,
    v_az: Option<Vec<f64>>,
    probs: Vec<f64>,
    concat: Vec<f64>,
    out: Vec<f64>,
}

#[derive(Debug, Clone)]
struct EncBlockTape {
    x_in: Vec<f64>,
    ln1: LnCache,
    ln1_out: Vec<f64>,
    attn: AttnCache,
    x_mid: Vec<f64>,
    ln2: LnCache,
    ln2_out: Vec<f64>,
    fc1_pre: Vec<f64>,
    fc1_act: Vec<f64>,
}

#[derive(Debug, Clone)]
struct DecBlockTape {
    tok_in: Vec<f64>,
    img_in: Vec<f64>,
    self_attn: AttnCache,
    sum1: Vec<f64>,
    ln1: LnCache,
    tok1: Vec<f64>,
    t2i: AttnCache,
    sum2: Vec<f64>,
    ln2: LnCache,
    tok2: Vec<f64>,
    fc1_pre: Vec<f64>,
    fc1_act: Vec<f64>,
    sum3: Vec<f64>,
    ln3: LnCache,
    tok3: Vec<f64>,
    i2t: AttnCache,
    sum4: Vec<f64>,
    ln4: LnCache,
    img_out: Vec<f64>,
}

#[derive(Debug, Clone)]
struct UpStageTape {
    x_in: Vec<f64>,
    h: usize,
    w: usize,
    conv_out: Vec<f64>,
    ln: Option<LnCache>,
    ln_out: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct HypTape {
    h1_pre: Vec<f64>,
    h1: Vec<f64>,
    h2_pre: Vec<f64>,
    h2: Vec<f64>,
    wv: Vec<f64>,
}

/// Every intermediate value the backward pass needs.
#[derive(Debug, Clone)]
pub struct Tape {
    patches: Vec<f64>,
    x0: Vec<f64>,
    enc: Vec<EncBlockTape>,
    enc_out: Vec<f64>,
    img0: Vec<f64>,
    tok0: Vec<f64>,
    dec: Vec<DecBlockTape>,
    fin_attn: AttnCache,
    fin_sum: Vec<f64>,
    fin_ln: LnCache,
    tok_final: Vec<f64>,
    up: Vec<UpStageTape>,
    feat: Vec<f64>,
    hyp: Vec<HypTape>,
    pub logits: Vec<f64>,
}

impl ToyModel {
    fn p(&self, name: &str) -> &[f64] {
        self.registry
            .data(name)
            .unwrap_or_else(|_| panic!("missing parameter {name}"))
    }

    fn i(&self, name: &str) -> usize {
        self.registry
            .idx(name)
            .unwrap_or_else(|_| panic!("missing parameter {name}"))
    }

    fn attn_weights(&self, prefix: &str, inner: usize, d_q_in: usize, d_kv_in: usize, d_out: usize, heads: usize) -> AttnWeights<'_> {
        AttnWeights {
            wq: self.p(&format!("{prefix}.wq.weight")),
            bq: self.p(&format!("{prefix}.wq.bias")),
            wk: self.p(&format!("{prefix}.wk.weight")),
            bk: self.p(&format!("{prefix}.wk.bias")),
            wv: self.p(&format!("{prefix}.wv.weight")),
            bv: self.p(&format!("{prefix}.wv.bias")),
            wo: self.p(&format!("{prefix}.wo.weight")),
            bo: self.p(&format!("{prefix}.wo.bias")),
            inner,
            d_q_in,
            d_kv_in,
            d_out,
            heads,
        }
    }

    fn attn_idx(&self, prefix: &str) -> AttnIdx {
        AttnIdx {
            wq: self.i(&format!("{prefix}.wq.weight")),
            bq: self.i(&format!("{prefix}.wq.bias")),
            wk: self.i(&format!("{prefix}.wk.weight")),
            bk: self.i(&format!("{prefix}.wk.bias")),
            wv: self.i(&format!("{prefix}.wv.weight")),
            bv: self.i(&format!("{prefix}.wv.bias")),
            wo: self.i(&format!("{prefix}.wo.weight")),
            bo: self.i(&format!("{prefix}.wo.bias")),
        }
    }

    /// Logits for one input volume. Thin wrapper over `forward_train`.
    pub fn forward(
        &self,
        adapters: Option<&AdapterSet>,
        volume: &[f64],
    ) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward_train(adapters, volume)?.0)
    }

    /// Forward pass that records the tape needed by `backward`.
    pub fn forward_train(
        &self,
        adapters: Option<&AdapterSet>,
        volume: &[f64],
    ) -> Result<(Vec<f64>, Tape), ModelError> {
        let cfg = &self.cfg;
        let expected = cfg.input_slices * cfg.image_size * cfg.image_size;
        if volume.len() != expected {
            return Err(ModelError::InputShape {
                expected,
                got: volume.len(),
            });
        }
        if !volume.iter().all(|v| v.is_finite()) {
            return Err(ModelError::InvalidConfig(
                "input volume contains non-finite values".to_string(),
            ));
        }
        let d = cfg.embed_dim;
        let dd = cfg.decoder_dim;
        let cd = cfg.cross_dim();
        let g = cfg.grid();
        let t_enc = cfg.tokens();
        let s_dec = cfg.decoder_tokens();
        let hw = cfg.image_size * cfg.image_size;
        let pdim = cfg.patch_dim();
        let pair = |id: u32| adapters.and_then(|s| s.get(id));

        // Patch extraction: token (py, px), entry ch*PATCH*PATCH + dy*PATCH + dx.
        let mut patches = vec![0.0; t_enc * pdim];
        for py in 0..g {
            for px in 0..g {
                let t = py * g + px;
                for ch in 0..cfg.input_slices {
                    for dy in 0..PATCH {
                        for dx in 0..PATCH {
                            let src = (ch * cfg.image_size + py * PATCH + dy) * cfg.image_size
                                + px * PATCH
                                + dx;
                            patches[t * pdim + ch * PATCH * PATCH + dy * PATCH + dx] = volume[src];
                        }
                    }
                }
            }
        }

        let mut x0 = linear_fwd(
            &patches,
            t_enc,
            self.p("ie.patch_embed.weight"),
            self.p("ie.patch_embed.bias"),
            pdim,
            d,
        );
        let pos = self.p("ie.pos_embed");
        for (xv, pv) in x0.iter_mut().zip(pos) {
            *xv += pv;
        }

        // Encoder: pre-norm blocks.
        let mut x = x0.clone();
        let mut enc = Vec::with_capacity(cfg.encoder_blocks);
        for i in 0..cfg.encoder_blocks {
            let pfx = format!("ie.block{i}");
            let (ln1_out, ln1) = ln_fwd(
                &x,
                t_enc,
                d,
                self.p(&format!("{pfx}.ln1.gamma")),
                self.p(&format!("{pfx}.ln1.beta")),
            );
            let w = self.attn_weights(&format!("{pfx}.attn"), d, d, d, d, cfg.num_heads);
            let attn = attn_module_fwd(&w, &ln1_out, t_enc, &ln1_out, t_enc, pair(cfg.enc_attn_layer_id(i)));
            let x_mid: Vec<f64> = x.iter().zip(&attn.out).map(|(a, b)| a + b).collect();

            let (ln2_out, ln2) = ln_fwd(
                &x_mid,
                t_enc,
                d,
                self.p(&format!("{pfx}.ln2.gamma")),
                self.p(&format!("{pfx}.ln2.beta")),
            );
            let hidden = cfg.mlp_ratio * d;
            let fc1_pre = linear_fwd(
                &ln2_out,
                t_enc,
                self.p(&format!("{pfx}.mlp.fc1.weight")),
                self.p(&format!("{pfx}.mlp.fc1.bias")),
                d,
                hidden,
            );
            let fc1_act = gelu_fwd(&fc1_pre);
            let mlp_out = linear_fwd(
                &fc1_act,
                t_enc,
                self.p(&format!("{pfx}.mlp.fc2.weight")),
                self.p(&format!("{pfx}.mlp.fc2.bias")),
                hidden,
                d,
            );
            let x_out: Vec<f64> = x_mid.iter().zip(&mlp_out).map(|(a, b)| a + b).collect();
            enc.push(EncBlockTape {
                x_in: std::mem::replace(&mut x, x_out),
                ln1,
                ln1_out,
                attn,
                x_mid,
                ln2,
                ln2_out,
                fc1_pre,
                fc1_act,
            });
        }
        let enc_out = x;

        let img0 = linear_fwd(
            &enc_out,
            t_enc,
            self.p("ie.neck.weight"),
            self.p("ie.neck.bias"),
            d,
            dd,
        );

        // Decoder tokens: mask tokens then prompt embeddings.
        let mut tok0 = vec![0.0; s_dec * dd];
        tok0[..cfg.num_classes * dd].copy_from_slice(self.p("md.mask_tokens"));
        tok0[cfg.num_classes * dd..].copy_from_slice(self.p("pe.prompt_embed"));

        let mut tok = tok0.clone();
        let mut img = img0.clone();
        let mut dec = Vec::with_capacity(cfg.decoder_blocks);
        for j in 0..cfg.decoder_blocks {
            let pfx = format!("md.block{j}");
            let wself = self.attn_weights(&format!("{pfx}.self_attn"), dd, dd, dd, dd, cfg.decoder_heads);
            let self_attn = attn_module_fwd(&wself, &tok, s_dec, &tok, s_dec, pair(cfg.dec_self_layer_id(j)));
            let sum1: Vec<f64> = tok.iter().zip(&self_attn.out).map(|(a, b)| a + b).collect();
            let (tok1, ln1) = ln_fwd(
                &sum1,
                s_dec,
                dd,
                self.p(&format!("{pfx}.ln1.gamma")),
                self.p(&format!("{pfx}.ln1.beta")),
            );

            let wt2i = self.attn_weights(&format!("{pfx}.t2i"), cd, dd, dd, dd, cfg.decoder_heads);
            let t2i = attn_module_fwd(&wt2i, &tok1, s_dec, &img, t_enc, pair(cfg.dec_t2i_layer_id(j)));
            let sum2: Vec<f64> = tok1.iter().zip(&t2i.out).map(|(a, b)| a + b).collect();
            let (tok2, ln2) = ln_fwd(
                &sum2,
                s_dec,
                dd,
                self.p(&format!("{pfx}.ln2.gamma")),
                self.p(&format!("{pfx}.ln2.beta")),
            );

            let hidden = cfg.decoder_mlp_hidden;
            let fc1_pre = linear_fwd(
                &tok2,
                s_dec,
                self.p(&format!("{pfx}.mlp.fc1.weight")),
                self.p(&format!("{pfx}.mlp.fc1.bias")),
                dd,
                hidden,
            );
            let fc1_act = gelu_fwd(&fc1_pre);
            let mlp_out = linear_fwd(
                &fc1_act,
                s_dec,
                self.p(&format!("{pfx}.mlp.fc2.weight")),
                self.p(&format!("{pfx}.mlp.fc2.bias")),
                hidden,
                dd,
            );
            let sum3: Vec<f64> = tok2.iter().zip(&mlp_out).map(|(a, b)| a + b).collect();
            let (tok3, ln3) = ln_fwd(
                &sum3,
                s_dec,
                dd,
                self.p(&format!("{pfx}.ln3.gamma")),
                self.p(&format!("{pfx}.ln3.beta")),
            );

            let wi2t = self.attn_weights(&format!("{pfx}.i2t"), cd, dd, dd, dd, cfg.decoder_heads);
            let i2t = attn_module_fwd(&wi2t, &img, t_enc, &tok3, s_dec, pair(cfg.dec_i2t_layer_id(j)));
            let sum4: Vec<f64> = img.iter().zip(&i2t.out).map(|(a, b)| a + b).collect();
            let (img_out, ln4) = ln_fwd(
                &sum4,
                t_enc,
                dd,
                self.p(&format!("{pfx}.ln4.gamma")),
                self.p(&format!("{pfx}.ln4.beta")),
            );

            dec.push(DecBlockTape {
                tok_in: std::mem::replace(&mut tok, tok3.clone()),
                img_in: std::mem::replace(&mut img, img_out.clone()),
                self_attn,
                sum1,
                ln1,
                tok1,
                t2i,
                sum2,
                ln2,
                tok2,
                fc1_pre,
                fc1_act,
                sum3,
                ln3,
                tok3,
                i2t,
                sum4,
                ln4,
                img_out,
            });
        }

        let wfin = self.attn_weights("md.final_t2i", cd, dd, dd, dd, cfg.decoder_heads);
        let fin_attn = attn_module_fwd(&wfin, &tok, s_dec, &img, t_enc, pair(cfg.final_t2i_layer_id()));
        let fin_sum: Vec<f64> = tok.iter().zip(&fin_attn.out).map(|(a, b)| a + b).collect();
        let (tok_final, fin_ln) = ln_fwd(
            &fin_sum,
            s_dec,
            dd,
            self.p("md.final_ln.gamma"),
            self.p("md.final_ln.beta"),
        );

        // Upscaling: four 2x stages from the g x g grid to full resolution.
        let mut up = Vec::with_capacity(4);
        let mut cur = img.clone();
        let mut ch = dd;
        let mut side = g;
        for (s, &out_ch) in cfg.up_channels.iter().enumerate() {
            let wt = self.p(&format!("md.up.stage{s}.weight"));
            let b = self.p(&format!("md.up.stage{s}.bias"));
            let conv_out = convt_fwd(&cur, side, side, ch, out_ch, wt, b);
            let (ln, ln_out, act_src) = if s == 0 {
                let (lo, lc) = ln_fwd(
                    &conv_out,
                    4 * side * side,
                    out_ch,
                    self.p("md.up.ln.gamma"),
                    self.p("md.up.ln.beta"),
                );
                (Some(lc), Some(lo.clone()), lo)
            } else {
                (None, None, conv_out.clone())
            };
            let out = if s < 3 { gelu_fwd(&act_src) } else { act_src };
            up.push(UpStageTape {
                x_in: std::mem::replace(&mut cur, out),
                h: side,
                w: side,
                conv_out,
                ln,
                ln_out,
            });
            ch = out_ch;
            side *= 2;
        }
        let feat = cur;
        let feat_dim = cfg.up_channels[3];

        // Hypernetwork heads: per-class weight vectors dotted with the
        // upscaled features.
        let mut logits = vec![0.0; cfg.num_classes * hw];
        let mut hyp = Vec::with_capacity(cfg.num_classes);
        for c in 0..cfg.num_classes {
            let pfx = format!("md.hyp.class{c}");
            let tokc = &tok_final[c * dd..(c + 1) * dd];
            let h1_pre = linear_fwd(
                tokc,
                1,
                self.p(&format!("{pfx}.fc1.weight")),
                self.p(&format!("{pfx}.fc1.bias")),
                dd,
                dd,
            );
            let h1 = relu_fwd(&h1_pre);
            let h2_pre = linear_fwd(
                &h1,
                1,
                self.p(&format!("{pfx}.fc2.weight")),
                self.p(&format!("{pfx}.fc2.bias")),
                dd,
                dd,
            );
            let h2 = relu_fwd(&h2_pre);
            let wv = linear_fwd(
                &h2,
                1,
                self.p(&format!("{pfx}.fc3.weight")),
                self.p(&format!("{pfx}.fc3.bias")),
                dd,
                feat_dim,
            );
            for p in 0..hw {
                let fp = &feat[p * feat_dim..(p + 1) * feat_dim];
                let mut acc = 0.0;
                for (wc, fv) in wv.iter().zip(fp) {
                    acc += wc * fv;
                }
                logits[c * hw + p] = acc;
            }
            hyp.push(HypTape {
                h1_pre,
                h1,
                h2_pre,
                h2,
                wv,
            });
        }

        let tape = Tape {
            patches,
            x0,
            enc,
            enc_out,
            img0,
            tok0,
            dec,
            fin_attn,
            fin_sum,
            fin_ln,
            tok_final,
            up,
            feat,
            hyp,
            logits: logits.clone(),
        };
        Ok((logits, tape))
    }

    /// Backward pass: gradients of a scalar loss with respect to every
    /// dense parameter and adapter factor, given d(loss)/d(logits).
    pub fn backward(
        &self,
        adapters: Option<&AdapterSet>,
        tape: &Tape,
        dlogits: &[f64],
    ) -> Grads {
        let cfg = &self.cfg;
        let d = cfg.embed_dim;
        let dd = cfg.decoder_dim;
        let cd = cfg.cross_dim();
        let g = cfg.grid();
        let t_enc = cfg.tokens();
        let s_dec = cfg.decoder_tokens();
        let hw = cfg.image_size * cfg.image_size;
        let feat_dim = cfg.up_channels[3];
        let pair = |id: u32| adapters.and_then(|s| s.get(id));
        let mut grads = Grads::zeros(self, adapters);

        // Hypernetwork heads.
        let mut dfeat = vec![0.0; tape.feat.len()];
        let mut dtok_final = vec![0.0; s_dec * dd];
        for c in 0..cfg.num_classes {
            let pfx = format!("md.hyp.class{c}");
            let hyp = &tape.hyp[c];
            let mut dwv = vec![0.0; feat_dim];
            for p in 0..hw {
                let dl = dlogits[c * hw + p];
                if dl == 0.0 {
                    continue;
                }
                let fp = &tape.feat[p * feat_dim..(p + 1) * feat_dim];
                for ch in 0..feat_dim {
                    dwv[ch] += dl * fp[ch];
                    dfeat[p * feat_dim + ch] += dl * hyp.wv[ch];
                }
            }
            let dh2 = linear_bwd(
                &mut grads,
                self.i(&format!("{pfx}.fc3.weight")),
                self.i(&format!("{pfx}.fc3.bias")),
                &hyp.h2,
                1,
                self.p(&format!("{pfx}.fc3.weight")),
                dd,
                feat_dim,
                &dwv,
            );
            let dh2_pre: Vec<f64> = dh2
                .iter()
                .zip(&hyp.h2_pre)
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            let dh1 = linear_bwd(
                &mut grads,
                self.i(&format!("{pfx}.fc2.weight")),
                self.i(&format!("{pfx}.fc2.bias")),
                &hyp.h1,
                1,
                self.p(&format!("{pfx}.fc2.weight")),
                dd,
                dd,
                &dh2_pre,
            );
            let dh1_pre: Vec<f64> = dh1
                .iter()
                .zip(&hyp.h1_pre)
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            let tokc = &tape.tok_final[c * dd..(c + 1) * dd];
            let dtok = linear_bwd(
                &mut grads,
                self.i(&format!("{pfx}.fc1.weight")),
                self.i(&format!("{pfx}.fc1.bias")),
                tokc,
                1,
                self.p(&format!("{pfx}.fc1.weight")),
                dd,
                dd,
                &dh1_pre,
            );
            for i in 0..dd {
                dtok_final[c * dd + i] += dtok[i];
            }
        }

        // Upscaling path, last stage first.
        let mut dcur = dfeat;
        for s in (0..4).rev() {
            let stage = &tape.up[s];
            let out_ch = cfg.up_channels[s];
            let in_ch = if s == 0 { dd } else { cfg.up_channels[s - 1] };
            let dact = if s < 3 {
                let src = if s == 0 {
                    stage.ln_out.as_ref().unwrap()
                } else {
                    &stage.conv_out
                };
                src.iter()
                    .zip(&dcur)
                    .map(|(&x, &dy)| dy * dgelu_one(x))
                    .collect::<Vec<f64>>()
            } else {
                dcur.clone()
            };
            let dconv = if s == 0 {
                ln_bwd(
                    &mut grads,
                    self.i("md.up.ln.gamma"),
                    self.i("md.up.ln.beta"),
                    &stage.conv_out,
                    stage.ln.as_ref().unwrap(),
                    self.p("md.up.ln.gamma"),
                    4 * stage.h * stage.w,
                    out_ch,
                    &dact,
                )
            } else {
                dact
            };
            dcur = convt_bwd(
                &mut grads,
                self.i(&format!("md.up.stage{s}.weight")),
                self.i(&format!("md.up.stage{s}.bias")),
                &stage.x_in,
                stage.h,
                stage.w,
                in_ch,
                out_ch,
                self.p(&format!("md.up.stage{s}.weight")),
                &dconv,
            );
        }
        let mut dimg = dcur; // gradient w.r.t. image state entering the UP path

        // Final token-to-image attention and norm.
        let dfin_sum = ln_bwd(
            &mut grads,
            self.i("md.final_ln.gamma"),
            self.i("md.final_ln.beta"),
            &tape.fin_sum,
            &tape.fin_ln,
            self.p("md.final_ln.gamma"),
            s_dec,
            dd,
            &dtok_final,
        );
        let mut dtok = dfin_sum.clone();
        let wfin = self.attn_weights("md.final_t2i", cd, dd, dd, dd, cfg.decoder_heads);
        let last_tok = &tape.dec[cfg.decoder_blocks - 1].tok3;
        let last_img = &tape.dec[cfg.decoder_blocks - 1].img_out;
        let (dxq, dxkv) = attn_module_bwd(
            &mut grads,
            &self.attn_idx("md.final_t2i"),
            &wfin,
            last_tok,
            s_dec,
            last_img,
            t_enc,
            pair(cfg.final_t2i_layer_id()),
            cfg.final_t2i_layer_id(),
            &tape.fin_attn,
            &dfin_sum,
        );
        add_into(&mut dtok, &dxq);
        add_into(&mut dimg, &dxkv);

        // Decoder blocks in reverse.
        for j in (0..cfg.decoder_blocks).rev() {
            let pfx = format!("md.block{j}");
            let blk = &tape.dec[j];

            // ln4 / i2t (image update).
            let dsum4 = ln_bwd(
                &mut grads,
                self.i(&format!("{pfx}.ln4.gamma")),
                self.i(&format!("{pfx}.ln4.beta")),
                &blk.sum4,
                &blk.ln4,
                self.p(&format!("{pfx}.ln4.gamma")),
                t_enc,
                dd,
                &dimg,
            );
            let mut dimg_in = dsum4.clone();
            let wi2t = self.attn_weights(&format!("{pfx}.i2t"), cd, dd, dd, dd, cfg.decoder_heads);
            let (dxq, dxkv) = attn_module_bwd(
                &mut grads,
                &self.attn_idx(&format!("{pfx}.i2t")),
                &wi2t,
                &blk.img_in,
                t_enc,
                &blk.tok3,
                s_dec,
                pair(cfg.dec_i2t_layer_id(j)),
                cfg.dec_i2t_layer_id(j),
                &blk.i2t,
                &dsum4,
            );
            add_into(&mut dimg_in, &dxq);
            add_into(&mut dtok, &dxkv);

            // ln3 / MLP.
            let dsum3 = ln_bwd(
                &mut grads,
                self.i(&format!("{pfx}.ln3.gamma")),
                self.i(&format!("{pfx}.ln3.beta")),
                &blk.sum3,
                &blk.ln3,
                self.p(&format!("{pfx}.ln3.gamma")),
                s_dec,
                dd,
                &dtok,
            );
            let hidden = cfg.decoder_mlp_hidden;
            let dfc1_act = linear_bwd(
                &mut grads,
                self.i(&format!("{pfx}.mlp.fc2.weight")),
                self.i(&format!("{pfx}.mlp.fc2.bias")),
                &blk.fc1_act,
                s_dec,
                self.p(&format!("{pfx}.mlp.fc2.weight")),
                hidden,
                dd,
                &dsum3,
            );
            let dfc1_pre: Vec<f64> = dfc1_act
                .iter()
                .zip(&blk.fc1_pre)
                .map(|(g, &x)| g * dgelu_one(x))
                .collect();
            let dtok2_mlp = linear_bwd(
                &mut grads,
                self.i(&format!("{pfx}.mlp.fc1.weight")),
                self.i(&format!("{pfx}.mlp.fc1.bias")),
                &blk.tok2,
                s_dec,
                self.p(&format!("{pfx}.mlp.fc1.weight")),
                dd,
                hidden,
                &dfc1_pre,
            );
            let mut dtok2 = dsum3;
            add_into(&mut dtok2, &dtok2_mlp);

            // ln2 / t2i.
            let dsum2 = ln_bwd(
                &mut grads,
                self.i(&format!("{pfx}.ln2.gamma")),
                self.i(&format!("{pfx}.ln2.beta")),
                &blk.sum2,
                &blk.ln2,
                self.p(&format!("{pfx}.ln2.gamma")),
                s_dec,
                dd,
                &dtok2,
            );
            let mut dtok1 = dsum2.clone();
            let wt2i = self.attn_weights(&format!("{pfx}.t2i"), cd, dd, dd, dd, cfg.decoder_heads);
            let (dxq, dxkv) = attn_module_bwd(
                &mut grads,
                &self.attn_idx(&format!("{pfx}.t2i")),
                &wt2i,
                &blk.tok1,
                s_dec,
                &blk.img_in,
                t_enc,
                pair(cfg.dec_t2i_layer_id(j)),
                cfg.dec_t2i_layer_id(j),
                &blk.t2i,
                &dsum2,
            );
            add_into(&mut dtok1, &dxq);
            add_into(&mut dimg_in, &dxkv);

            // ln1 / self attention.
            let dsum1 = ln_bwd(
                &mut grads,
                self.i(&format!("{pfx}.ln1.gamma")),
                self.i(&format!("{pfx}.ln1.beta")),
                &blk.sum1,
                &blk.ln1,
                self.p(&format!("{pfx}.ln1.gamma")),
                s_dec,
                dd,
                &dtok1,
            );
            let mut dtok_in = dsum1.clone();
            let wself = self.attn_weights(&format!("{pfx}.self_attn"), dd, dd, dd, dd, cfg.decoder_heads);
            let (dxq, dxkv) = attn_module_bwd(
                &mut grads,
                &self.attn_idx(&format!("{pfx}.self_attn")),
                &wself,
                &blk.tok_in,
                s_dec,
                &blk.tok_in,
                s_dec,
                pair(cfg.dec_self_layer_id(j)),
                cfg.dec_self_layer_id(j),
                &blk.self_attn,
                &dsum1,
            );
            add_into(&mut dtok_in, &dxq);
            add_into(&mut dtok_in, &dxkv);

            dtok = dtok_in;
            dimg = dimg_in;
        }

        // Decoder token embeddings.
        {
            let nc = cfg.num_classes;
            let i_mask = self.i("md.mask_tokens");
            for v in 0..nc * dd {
                grads.dense[i_mask][v] += dtok[v];
            }
            let i_prompt = self.i("pe.prompt_embed");
            for v in 0..cfg.prompt_tokens * dd {
                grads.dense[i_prompt][v] += dtok[nc * dd + v];
            }
        }

        // Neck.
        let denc_out = linear_bwd(
            &mut grads,
            self.i("ie.neck.weight"),
            self.i("ie.neck.bias"),
            &tape.enc_out,
            t_enc,
            self.p("ie.neck.weight"),
            d,
            dd,
            &dimg,
        );

        // Encoder blocks in reverse.
        let mut dx = denc_out;
        for i in (0..cfg.encoder_blocks).rev() {
            let pfx = format!("ie.block{i}");
            let blk = &tape.enc[i];
            let hidden = cfg.mlp_ratio * d;

            // x_out = x_mid + fc2(gelu(fc1(ln2(x_mid))))
            let dfc1_act = linear_bwd(
                &mut grads,
                self.i(&format!("{pfx}.mlp.fc2.weight")),
                self.i(&format!("{pfx}.mlp.fc2.bias")),
                &blk.fc1_act,
                t_enc,
                self.p(&format!("{pfx}.mlp.fc2.weight")),
                hidden,
                d,
                &dx,
            );
            let dfc1_pre: Vec<f64> = dfc1_act
                .iter()
                .zip(&blk.fc1_pre)
                .map(|(g, &x)| g * dgelu_one(x))
                .collect();
            let dln2_out = linear_bwd(
                &mut grads,
                self.i(&format!("{pfx}.mlp.fc1.weight")),
                self.i(&format!("{pfx}.mlp.fc1.bias")),
                &blk.ln2_out,
                t_enc,
                self.p(&format!("{pfx}.mlp.fc1.weight")),
                d,
                hidden,
                &dfc1_pre,
            );
            let dmid_ln = ln_bwd(
                &mut grads,
                self.i(&format!("{pfx}.ln2.gamma")),
                self.i(&format!("{pfx}.ln2.beta")),
                &blk.x_mid,
                &blk.ln2,
                self.p(&format!("{pfx}.ln2.gamma")),
                t_enc,
                d,
                &dln2_out,
            );
            let mut dx_mid = dx;
            add_into(&mut dx_mid, &dmid_ln);

            // x_mid = x_in + attn(ln1(x_in))
            let w = self.attn_weights(&format!("{pfx}.attn"), d, d, d, d, cfg.num_heads);
            let (dxq, dxkv) = attn_module_bwd(
                &mut grads,
                &self.attn_idx(&format!("{pfx}.attn")),
                &w,
                &blk.ln1_out,
                t_enc,
                &blk.ln1_out,
                t_enc,
                pair(cfg.enc_attn_layer_id(i)),
                cfg.enc_attn_layer_id(i),
                &blk.attn,
                &dx_mid,
            );
            let mut dln1_out = dxq;
            add_into(&mut dln1_out, &dxkv);
            let dx_in_ln = ln_bwd(
                &mut grads,
                self.i(&format!("{pfx}.ln1.gamma")),
                self.i(&format!("{pfx}.ln1.beta")),
                &blk.x_in,
                &blk.ln1,
                self.p(&format!("{pfx}.ln1.gamma")),
                t_enc,
                d,
                &dln1_out,
            );
            let mut dx_in = dx_mid;
            add_into(&mut dx_in, &dx_in_ln);
            dx = dx_in;
        }

        // Embedding layer.
        {
            let i_pos = self.i("ie.pos_embed");
            for v in 0..t_enc * d {
                grads.dense[i_pos][v] += dx[v];
            }
            let _dinput = linear_bwd(
                &mut grads,
                self.i("ie.patch_embed.weight"),
                self.i("ie.patch_embed.bias"),
                &tape.patches,
                t_enc,
                self.p("ie.patch_embed.weight"),
                cfg.patch_dim(),
                d,
                &dx,
            );
        }
        let _ = (&tape.x0, &tape.img0, &tape.tok0, g); // grid retained for clarity

        grads
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn attn_module_fwd(
    w: &AttnWeights<'_>,
    xq: &[f64],
    tq: usize,
    xkv: &[f64],
    tkv: usize,
    adapters: Option<&LayerAdapters>,
) -> AttnCache {
    let mut q = linear_fwd(xq, tq, w.wq, w.bq, w.d_q_in, w.inner);
    let q_az = adapters.map(|a| lora_extra_fwd(xq, tq, &a.query, &mut q));
    let k = linear_fwd(xkv, tkv, w.wk, w.bk, w.d_kv_in, w.inner);
    let mut v = linear_fwd(xkv, tkv, w.wv, w.bv, w.d_kv_in, w.inner);
    let v_az = adapters.map(|a| lora_extra_fwd(xkv, tkv, &a.value, &mut v));
    let (concat, probs) = attn_core_fwd(&q, &k, &v, tq, tkv, w.inner, w.heads);
    let out = linear_fwd(&concat, tq, w.wo, w.bo, w.inner, w.d_out);
    AttnCache {
        q,
        k,
        v,
        q_az,
        v_az,
        probs,
        concat,
        out,
    }
}

#[allow(clippy::too_many_arguments)]
fn attn_module_bwd(
    grads: &mut Grads,
    idx: &AttnIdx,
    w: &AttnWeights<'_>,
    xq: &[f64],
    tq: usize,
    xkv: &[f64],
    tkv: usize,
    adapters: Option<&LayerAdapters>,
    layer_id: u32,
    cache: &AttnCache,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let dconcat = linear_bwd(
        grads, idx.wo, idx.bo, &cache.concat, tq, w.wo, w.inner, w.d_out, dout,
    );
    let (dq, dk, dv) = attn_core_bwd(
        &cache.q,
        &cache.k,
        &cache.v,
        &cache.probs,
        tq,
        tkv,
        w.inner,
        w.heads,
        &dconcat,
    );
    let mut dxq = linear_bwd(grads, idx.wq, idx.bq, xq, tq, w.wq, w.d_q_in, w.inner, &dq);
    let dxk = linear_bwd(grads, idx.wk, idx.bk, xkv, tkv, w.wk, w.d_kv_in, w.inner, &dk);
    let mut dxkv = linear_bwd(grads, idx.wv, idx.bv, xkv, tkv, w.wv, w.d_kv_in, w.inner, &dv);
    add_into(&mut dxkv, &dxk);
    if let Some(ads) = adapters {
        let gq = grads.adapter_mut(layer_id, AdapterTarget::Query);
        let extra_q = lora_bwd(gq, &ads.query, xq, tq, cache.q_az.as_ref().unwrap(), &dq);
        add_into(&mut dxq, &extra_q);
        let gv = grads.adapter_mut(layer_id, AdapterTarget::Value);
        let extra_v = lora_bwd(gv, &ads.value, xkv, tkv, cache.v_az.as_ref().unwrap(), &dv);
        add_into(&mut dxkv, &extra_v);
    }
    (dxq, dxkv)
}

/// Accumulates dW, db into `grads` and returns dX.
#[allow(clippy::too_many_arguments)]
fn linear_bwd(
    grads: &mut Grads,
    wi: usize,
    bi: usize,
    x: &[f64],
    count: usize,
    w: &[f64],
    d_in: usize,
    d_out: usize,
    dy: &[f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; count * d_in];
    {
        let (dw, db) = two_mut(&mut grads.dense, wi, bi);
        for t in 0..count {
            let xi = &x[t * d_in..(t + 1) * d_in];
            let dyo = &dy[t * d_out..(t + 1) * d_out];
            let dxi = &mut dx[t * d_in..(t + 1) * d_in];
            for o in 0..d_out {
                let g = dyo[o];
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                let dwo = &mut dw[o * d_in..(o + 1) * d_in];
                let wo = &w[o * d_in..(o + 1) * d_in];
                for i in 0..d_in {
                    dwo[i] += g * xi[i];
                    dxi[i] += g * wo[i];
                }
            }
        }
    }
    dx
}

/// Backward of the factored delta path; returns the extra dX contribution.
fn lora_bwd(
    ag: &mut AdapterGrad,
    ad: &LoraAdapter,
    x: &[f64],
    count: usize,
    az: &[f64],
    dy: &[f64],
) -> Vec<f64> {
    let r = ad.rank;
    let d_in = ad.d_in();
    let d_out = ad.d_out();
    let a = ad.a_factor.data();
    let b = ad.b_factor.data();
    let mut dx = vec![0.0; count * d_in];
    let mut dz = vec![0.0; r];
    for t in 0..count {
        let dyo = &dy[t * d_out..(t + 1) * d_out];
        let zt = &az[t * r..(t + 1) * r];
        let xi = &x[t * d_in..(t + 1) * d_in];
        // dz = scale * B^T dy; dB += scale * dy (x) z
        dz.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..d_out {
            let g = ad.scale * dyo[o];
            if g == 0.0 {
                continue;
            }
            let brow = &b[o * r..(o + 1) * r];
            let dbrow = &mut ag.db[o * r..(o + 1) * r];
            for j in 0..r {
                dz[j] += g * brow[j];
                dbrow[j] += g * zt[j];
            }
        }
        // dA += dz (x) x; dx += A^T dz
        let dxi = &mut dx[t * d_in..(t + 1) * d_in];
        for j in 0..r {
            let gz = dz[j];
            if gz == 0.0 {
                continue;
            }
            let arow = &a[j * d_in..(j + 1) * d_in];
            let darow = &mut ag.da[j * d_in..(j + 1) * d_in];
            for i in 0..d_in {
                darow[i] += gz * xi[i];
                dxi[i] += gz * arow[i];
            }
        }
    }
    dx
}

/// Accumulates dgamma/dbeta into `grads` and returns dX.
#[allow(clippy::too_many_arguments)]
fn ln_bwd(
    grads: &mut Grads,
    gi: usize,
    bi: usize,
    x: &[f64],
    cache: &LnCache,
    gamma: &[f64],
    count: usize,
    dim: usize,
    dy: &[f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; count * dim];
    let (dgamma, dbeta) = two_mut(&mut grads.dense, gi, bi);
    for t in 0..count {
        let xi = &x[t * dim..(t + 1) * dim];
        let dyo = &dy[t * dim..(t + 1) * dim];
        let m = cache.mean[t];
        let rs = cache.rstd[t];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for i in 0..dim {
            let xhat = (xi[i] - m) * rs;
            let dxhat = dyo[i] * gamma[i];
            dbeta[i] += dyo[i];
            dgamma[i] += dyo[i] * xhat;
            m1 += dxhat;
            m2 += dxhat * xhat;
        }
        m1 /= dim as f64;
        m2 /= dim as f64;
        let dxi = &mut dx[t * dim..(t + 1) * dim];
        for i in 0..dim {
            let xhat = (xi[i] - m) * rs;
            let dxhat = dyo[i] * gamma[i];
            dxi[i] = rs * (dxhat - m1 - xhat * m2);
        }
    }
    dx
}

/// Accumulates kernel/bias grads into `grads` and returns dX.
#[allow(clippy::too_many_arguments)]
fn convt_bwd(
    grads: &mut Grads,
    wi: usize,
    bi: usize,
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    wt: &[f64],
    dout: &[f64],
) -> Vec<f64> {
    let w2 = 2 * w;
    let mut dx = vec![0.0; h * w * cin];
    let (dwt, db) = two_mut(&mut grads.dense, wi, bi);
    for p in 0..4 * h * w {
        for o in 0..cout {
            db[o] += dout[p * cout + o];
        }
    }
    for y in 0..h {
        for xx in 0..w {
            let xin = &x[(y * w + xx) * cin..(y * w + xx + 1) * cin];
            let dxi = &mut dx[(y * w + xx) * cin..(y * w + xx + 1) * cin];
            for dy in 0..2 {
                for dxp in 0..2 {
                    let op = ((2 * y + dy) * w2 + 2 * xx + dxp) * cout;
                    for ci in 0..cin {
                        let base = ((ci * cout) * 2 + dy) * 2 + dxp;
                        let mut acc = 0.0;
                        for o in 0..cout {
                            let go = dout[op + o];
                            dwt[base + o * 4] += xin[ci] * go;
                            acc += wt[base + o * 4] * go;
                        }
                        dxi[ci] += acc;
                    }
                }
            }
        }
    }
    dx
}

fn two_mut(v: &mut [Vec<f64>], i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
    assert_ne!(i, j);
    if i < j {
        let (a, b) = v.split_at_mut(j);
        (&mut a[i], &mut b[0])
    } else {
        let (a, b) = v.split_at_mut(i);
        (&mut b[0], &mut a[j])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{trainable_params, ParamGroup, Strategy};
    use rand::SeedableRng;

    fn toy_model(seed: u64) -> ToyModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_model(&ModelConfig::toy(), &mut rng).unwrap()
    }

    fn random_volume(seed: u64, cfg: &ModelConfig) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..cfg.input_slices * cfg.image_size * cfg.image_size)
            .map(|_| rngutil::gaussian(&mut rng))
            .collect()
    }

    #[test]
    fn forward_on_zero_input_is_finite_with_right_shape() {
        let cfg = ModelConfig::toy();
        let model = toy_model(3);
        let volume = vec![0.0; cfg.input_slices * cfg.image_size * cfg.image_size];
        let logits = model.forward(None, &volume).unwrap();
        assert_eq!(logits.len(), cfg.num_classes * cfg.image_size * cfg.image_size);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let model = toy_model(3);
        assert!(matches!(
            model.forward(None, &[0.0; 7]),
            Err(ModelError::InputShape { .. })
        ));
    }

    #[test]
    fn zero_delta_adapters_leave_logits_bit_identical() {
        let cfg = ModelConfig::toy();
        let model = toy_model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let adapters = init_adapter_set(&cfg, 4, 1.0, &mut rng).unwrap();
        let volume = random_volume(7, &cfg);
        let base = model.forward(None, &volume).unwrap();
        let adapted = model.forward(Some(&adapters), &volume).unwrap();
        for (a, b) in adapted.iter().zip(&base) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = ModelConfig::toy();
        let model = toy_model(9);
        let volume = random_volume(13, &cfg);
        let a = model.forward(None, &volume).unwrap();
        let b = model.forward(None, &volume).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn registry_groups_are_complete_and_disjoint() {
        let model = toy_model(1);
        let total: u64 = ParamGroup::ALL
            .iter()
            .map(|&g| model.registry.group_count(g))
            .sum();
        assert_eq!(total, model.registry.total_count());
        for g in ParamGroup::ALL {
            assert!(model.registry.group_count(g) > 0, "empty group {g:?}");
        }
    }

    #[test]
    fn vit_b_preset_is_count_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = build_model(&ModelConfig::vit_b_paper(), &mut rng).unwrap_err();
        assert!(matches!(err, ModelError::InvalidConfig(_)));
    }

    #[test]
    fn nonzero_adapters_change_logits() {
        let cfg = ModelConfig::toy();
        let model = toy_model(21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut adapters = init_adapter_set(&cfg, 4, 1.0, &mut rng).unwrap();
        for pair in adapters.layers.values_mut() {
            for v in pair.query.b_factor.data_mut() {
                *v = rngutil::gaussian(&mut rng) * 0.1;
            }
        }
        let volume = random_volume(23, &cfg);
        let base = model.forward(None, &volume).unwrap();
        let adapted = model.forward(Some(&adapters), &volume).unwrap();
        let diff: f64 = adapted
            .iter()
            .zip(&base)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6, "adapters had no effect");
    }

    #[test]
    fn grads_align_with_trainable_sets() {
        let cfg = ModelConfig::toy();
        let model = toy_model(31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let adapters = init_adapter_set(&cfg, 2, 1.0, &mut rng).unwrap();
        let grads = Grads::zeros(&model, Some(&adapters));
        assert_eq!(grads.dense.len(), model.registry.len());
        assert_eq!(grads.adapters.len(), 2 * adapters.num_layers());
        let idxs = trainable_params(&model.registry, Strategy::FlapSam, Some(&adapters)).unwrap();
        for i in idxs {
            assert_eq!(grads.dense[i].len(), model.registry.by_idx(i).numel());
        }
    }
}
