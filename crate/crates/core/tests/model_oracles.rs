//! Independent oracles for the model: a straight-line re-implementation of
//! the forward pass checked to 1e-10, and central-difference gradient checks
//! for every parameter group and adapter factor under every strategy.

use fedsam_core::adapters::AdapterSet;
use fedsam_core::model::{
    build_model, init_adapter_set, ModelConfig, ParamGroup, ParamRegistry, Strategy, ToyModel,
};
use fedsam_core::rngutil;
use fedsam_core::training::{gen_site, default_site_params, hybrid_loss, LossWeights, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_setup(seed: u64) -> (ModelConfig, ToyModel, Sample) {
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = build_model(&cfg, &mut rng).unwrap();
    let site = gen_site(seed ^ 0xD5, 0, &default_site_params(0), 1, 1, &cfg).unwrap();
    let sample = site.train[0].clone();
    (cfg, model, sample)
}

// ---- straight-line forward oracle -----------------------------------------

/// Plain-loop re-derivation of the forward pass from the architecture
/// definition. No code shared with the implementation beyond parameter
/// layouts, which are part of the registry contract.
fn oracle_forward(cfg: &ModelConfig, reg: &ParamRegistry, volume: &[f64]) -> Vec<f64> {
    let get = |name: &str| reg.data(name).unwrap();
    let d = cfg.embed_dim;
    let dd = cfg.decoder_dim;
    let cd = cfg.cross_dim();
    let side = cfg.image_size;
    let grid = side / 16;
    let t = grid * grid;
    let s_tok = cfg.num_classes + cfg.prompt_tokens;
    let pdim = cfg.input_slices * 256;

    let linear = |x: &[f64], n: usize, w: &[f64], b: &[f64], di: usize, dout: usize| -> Vec<f64> {
        let mut y = vec![0.0; n * dout];
        for tt in 0..n {
            for o in 0..dout {
                let mut acc = b[o];
                for i in 0..di {
                    acc += w[o * di + i] * x[tt * di + i];
                }
                y[tt * dout + o] = acc;
            }
        }
        y
    };
    let layer_norm = |x: &[f64], n: usize, dim: usize, g: &[f64], b: &[f64]| -> Vec<f64> {
        let mut y = vec![0.0; n * dim];
        for tt in 0..n {
            let row = &x[tt * dim..(tt + 1) * dim];
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let rstd = 1.0 / (var + 1e-5).sqrt();
            for i in 0..dim {
                y[tt * dim + i] = g[i] * (row[i] - mean) * rstd + b[i];
            }
        }
        y
    };
    let gelu = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .map(|&v| {
                0.5 * v
                    * (1.0
                        + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh())
            })
            .collect()
    };
    // attention with queries from xq and keys/values from xkv
    let attention = |xq: &[f64],
                     nq: usize,
                     xkv: &[f64],
                     nkv: usize,
                     prefix: &str,
                     inner: usize,
                     dqi: usize,
                     dkvi: usize,
                     dout: usize,
                     heads: usize|
     -> Vec<f64> {
        let q = linear(
            xq,
            nq,
            get(&format!("{prefix}.wq.weight")),
            get(&format!("{prefix}.wq.bias")),
            dqi,
            inner,
        );
        let k = linear(
            xkv,
            nkv,
            get(&format!("{prefix}.wk.weight")),
            get(&format!("{prefix}.wk.bias")),
            dkvi,
            inner,
        );
        let v = linear(
            xkv,
            nkv,
            get(&format!("{prefix}.wv.weight")),
            get(&format!("{prefix}.wv.bias")),
            dkvi,
            inner,
        );
        let dh = inner / heads;
        let mut mixed = vec![0.0; nq * inner];
        for h in 0..heads {
            for tq in 0..nq {
                let mut scores = vec![0.0; nkv];
                for (s, sc) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for e in 0..dh {
                        dot += q[tq * inner + h * dh + e] * k[s * inner + h * dh + e];
                    }
                    *sc = dot / (dh as f64).sqrt();
                }
                let m = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let exps: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for (s, e) in exps.iter().enumerate() {
                    let p = e / denom;
                    for eidx in 0..dh {
                        mixed[tq * inner + h * dh + eidx] += p * v[s * inner + h * dh + eidx];
                    }
                }
            }
        }
        linear(
            &mixed,
            nq,
            get(&format!("{prefix}.wo.weight")),
            get(&format!("{prefix}.wo.bias")),
            inner,
            dout,
        )
    };

    // Patch embedding plus position embedding.
    let mut patches = vec![0.0; t * pdim];
    for py in 0..grid {
        for px in 0..grid {
            let tok = py * grid + px;
            for ch in 0..cfg.input_slices {
                for dy in 0..16 {
                    for dx in 0..16 {
                        patches[tok * pdim + ch * 256 + dy * 16 + dx] =
                            volume[(ch * side + py * 16 + dy) * side + px * 16 + dx];
                    }
                }
            }
        }
    }
    let mut x = linear(
        &patches,
        t,
        get("ie.patch_embed.weight"),
        get("ie.patch_embed.bias"),
        pdim,
        d,
    );
    let pos = get("ie.pos_embed");
    for i in 0..x.len() {
        x[i] += pos[i];
    }

    // Encoder blocks (pre-norm).
    for blk in 0..cfg.encoder_blocks {
        let p = format!("ie.block{blk}");
        let normed = layer_norm(
            &x,
            t,
            d,
            get(&format!("{p}.ln1.gamma")),
            get(&format!("{p}.ln1.beta")),
        );
        let att = attention(
            &normed,
            t,
            &normed,
            t,
            &format!("{p}.attn"),
            d,
            d,
            d,
            d,
            cfg.num_heads,
        );
        for i in 0..x.len() {
            x[i] += att[i];
        }
        let normed2 = layer_norm(
            &x,
            t,
            d,
            get(&format!("{p}.ln2.gamma")),
            get(&format!("{p}.ln2.beta")),
        );
        let hidden = cfg.mlp_ratio * d;
        let a1 = gelu(&linear(
            &normed2,
            t,
            get(&format!("{p}.mlp.fc1.weight")),
            get(&format!("{p}.mlp.fc1.bias")),
            d,
            hidden,
        ));
        let m = linear(
            &a1,
            t,
            get(&format!("{p}.mlp.fc2.weight")),
            get(&format!("{p}.mlp.fc2.bias")),
            hidden,
            d,
        );
        for i in 0..x.len() {
            x[i] += m[i];
        }
    }

    let mut img = linear(&x, t, get("ie.neck.weight"), get("ie.neck.bias"), d, dd);

    // Decoder tokens and two-way blocks (post-norm).
    let mut tok = vec![0.0; s_tok * dd];
    tok[..cfg.num_classes * dd].copy_from_slice(get("md.mask_tokens"));
    tok[cfg.num_classes * dd..].copy_from_slice(get("pe.prompt_embed"));
    for blk in 0..cfg.decoder_blocks {
        let p = format!("md.block{blk}");
        let sa = attention(
            &tok,
            s_tok,
            &tok,
            s_tok,
            &format!("{p}.self_attn"),
            dd,
            dd,
            dd,
            dd,
            cfg.decoder_heads,
        );
        let sum1: Vec<f64> = tok.iter().zip(&sa).map(|(a, b)| a + b).collect();
        tok = layer_norm(
            &sum1,
            s_tok,
            dd,
            get(&format!("{p}.ln1.gamma")),
            get(&format!("{p}.ln1.beta")),
        );
        let t2i = attention(
            &tok,
            s_tok,
            &img,
            t,
            &format!("{p}.t2i"),
            cd,
            dd,
            dd,
            dd,
            cfg.decoder_heads,
        );
        let sum2: Vec<f64> = tok.iter().zip(&t2i).map(|(a, b)| a + b).collect();
        tok = layer_norm(
            &sum2,
            s_tok,
            dd,
            get(&format!("{p}.ln2.gamma")),
            get(&format!("{p}.ln2.beta")),
        );
        let hidden = cfg.decoder_mlp_hidden;
        let a1 = gelu(&linear(
            &tok,
            s_tok,
            get(&format!("{p}.mlp.fc1.weight")),
            get(&format!("{p}.mlp.fc1.bias")),
            dd,
            hidden,
        ));
        let m = linear(
            &a1,
            s_tok,
            get(&format!("{p}.mlp.fc2.weight")),
            get(&format!("{p}.mlp.fc2.bias")),
            hidden,
            dd,
        );
        let sum3: Vec<f64> = tok.iter().zip(&m).map(|(a, b)| a + b).collect();
        tok = layer_norm(
            &sum3,
            s_tok,
            dd,
            get(&format!("{p}.ln3.gamma")),
            get(&format!("{p}.ln3.beta")),
        );
        let i2t = attention(
            &img,
            t,
            &tok,
            s_tok,
            &format!("{p}.i2t"),
            cd,
            dd,
            dd,
            dd,
            cfg.decoder_heads,
        );
        let sum4: Vec<f64> = img.iter().zip(&i2t).map(|(a, b)| a + b).collect();
        img = layer_norm(
            &sum4,
            t,
            dd,
            get(&format!("{p}.ln4.gamma")),
            get(&format!("{p}.ln4.beta")),
        );
    }
    let fin = attention(
        &tok,
        s_tok,
        &img,
        t,
        "md.final_t2i",
        cd,
        dd,
        dd,
        dd,
        cfg.decoder_heads,
    );
    let fin_sum: Vec<f64> = tok.iter().zip(&fin).map(|(a, b)| a + b).collect();
    let tok_final = layer_norm(
        &fin_sum,
        s_tok,
        dd,
        get("md.final_ln.gamma"),
        get("md.final_ln.beta"),
    );

    // Upscaling: stride-2 kernel-2 transposed convolutions, pixel-major.
    let mut feat = img;
    let mut ch_in = dd;
    let mut cur = grid;
    for stage in 0..4usize {
        let ch_out = cfg.up_channels[stage];
        let w = get(&format!("md.up.stage{stage}.weight"));
        let b = get(&format!("md.up.stage{stage}.bias"));
        let out_side = 2 * cur;
        let mut out = vec![0.0; out_side * out_side * ch_out];
        for y in 0..cur {
            for xx in 0..cur {
                for dy in 0..2 {
                    for dx in 0..2 {
                        for o in 0..ch_out {
                            let mut acc = 0.0;
                            for ci in 0..ch_in {
                                acc += w[((ci * ch_out + o) * 2 + dy) * 2 + dx]
                                    * feat[(y * cur + xx) * ch_in + ci];
                            }
                            out[((2 * y + dy) * out_side + 2 * xx + dx) * ch_out + o] += acc;
                        }
                    }
                }
            }
        }
        for p in 0..out_side * out_side {
            for o in 0..ch_out {
                out[p * ch_out + o] += b[o];
            }
        }
        if stage == 0 {
            out = layer_norm(
                &out,
                out_side * out_side,
                ch_out,
                get("md.up.ln.gamma"),
                get("md.up.ln.beta"),
            );
        }
        if stage < 3 {
            out = gelu(&out);
        }
        feat = out;
        ch_in = ch_out;
        cur = out_side;
    }
    let fdim = cfg.up_channels[3];

    // Hypernetwork heads: relu MLP per class, dotted with the features.
    let hw = side * side;
    let mut logits = vec![0.0; cfg.num_classes * hw];
    for c in 0..cfg.num_classes {
        let p = format!("md.hyp.class{c}");
        let tc = &tok_final[c * dd..(c + 1) * dd];
        let h1: Vec<f64> = linear(
            tc,
            1,
            get(&format!("{p}.fc1.weight")),
            get(&format!("{p}.fc1.bias")),
            dd,
            dd,
        )
        .iter()
        .map(|&v| v.max(0.0))
        .collect();
        let h2: Vec<f64> = linear(
            &h1,
            1,
            get(&format!("{p}.fc2.weight")),
            get(&format!("{p}.fc2.bias")),
            dd,
            dd,
        )
        .iter()
        .map(|&v| v.max(0.0))
        .collect();
        let wv = linear(
            &h2,
            1,
            get(&format!("{p}.fc3.weight")),
            get(&format!("{p}.fc3.bias")),
            dd,
            fdim,
        );
        for p in 0..hw {
            let mut acc = 0.0;
            for e in 0..fdim {
                acc += wv[e] * feat[p * fdim + e];
            }
            logits[c * hw + p] = acc;
        }
    }
    logits
}

#[test]
fn toy_forward_matches_straight_line_oracle() {
    let (cfg, model, sample) = toy_setup(101);
    let got = model.forward(None, &sample.volume).unwrap();
    let want = oracle_forward(&cfg, &model.registry, &sample.volume);
    assert_eq!(got.len(), want.len());
    let mut max_diff = 0.0f64;
    for (a, b) in got.iter().zip(&want) {
        max_diff = max_diff.max((a - b).abs());
    }
    assert!(max_diff <= 1e-10, "max |impl - oracle| = {max_diff:e}");
}

// ---- finite-difference gradient checks -------------------------------------

fn loss_of(model: &ToyModel, adapters: Option<&AdapterSet>, sample: &Sample) -> f64 {
    let logits = model.forward(adapters, &sample.volume).unwrap();
    hybrid_loss(&logits, &sample.mask, model.cfg.num_classes, LossWeights::default())
        .unwrap()
        .0
}

fn check_grad(bp: f64, fd: f64, what: &str) {
    let denom = bp.abs().max(fd.abs()).max(1e-6);
    assert!(
        (bp - fd).abs() / denom <= 1e-4,
        "{what}: backprop {bp:e} vs central-diff {fd:e}"
    );
}

#[test]
fn gradients_match_central_differences_for_every_group_and_strategy() {
    let eps = 1e-5;
    for strategy in Strategy::ALL {
        let (cfg, mut model, sample) = toy_setup(211);
        let mut rng = ChaCha8Rng::seed_from_u64(212);
        let mut adapters = if strategy.uses_lora() {
            let mut set = init_adapter_set(&cfg, 2, 1.0, &mut rng).unwrap();
            // Perturb the zero B factors so adapter-path gradients are live.
            for pair in set.layers.values_mut() {
                for v in pair.query.b_factor.data_mut() {
                    *v = rngutil::gaussian(&mut rng) * 0.05;
                }
                for v in pair.value.b_factor.data_mut() {
                    *v = rngutil::gaussian(&mut rng) * 0.05;
                }
            }
            Some(set)
        } else {
            None
        };

        let (logits, tape) = model.forward_train(adapters.as_ref(), &sample.volume).unwrap();
        let (_, dlogits) =
            hybrid_loss(&logits, &sample.mask, cfg.num_classes, LossWeights::default()).unwrap();
        let grads = model.backward(adapters.as_ref(), &tape, &dlogits);

        // Six sampled coordinates per parameter group.
        for group in ParamGroup::ALL {
            let indices: Vec<usize> = (0..model.registry.len())
                .filter(|&i| model.registry.by_idx(i).group == group)
                .collect();
            assert!(!indices.is_empty());
            for probe in 0..6 {
                let pi = indices[rng.gen_range(0..indices.len())];
                let n = model.registry.by_idx(pi).numel();
                let ci = rng.gen_range(0..n);
                let bp = grads.dense[pi][ci];
                let orig = model.registry.by_idx(pi).data[ci];
                model.registry.by_idx_mut(pi).data[ci] = orig + eps;
                let lp = loss_of(&model, adapters.as_ref(), &sample);
                model.registry.by_idx_mut(pi).data[ci] = orig - eps;
                let lm = loss_of(&model, adapters.as_ref(), &sample);
                model.registry.by_idx_mut(pi).data[ci] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                check_grad(
                    bp,
                    fd,
                    &format!(
                        "{strategy} {:?} {} [{ci}] probe {probe}",
                        group,
                        model.registry.by_idx(pi).name
                    ),
                );
            }
        }

        // Adapter factors, both A and B, on a few layers.
        if let Some(set) = adapters.as_mut() {
            let keys: Vec<u32> = set.layers.keys().copied().collect();
            for probe in 0..6 {
                let layer = keys[rng.gen_range(0..keys.len())];
                let on_query = rng.gen_bool(0.5);
                let on_a = rng.gen_bool(0.5);
                let target = if on_query {
                    fedsam_core::adapters::AdapterTarget::Query
                } else {
                    fedsam_core::adapters::AdapterTarget::Value
                };
                let g = &grads.adapters[&(layer, target)];
                let (len, bp_vec) = {
                    let ad = set.get(layer).unwrap();
                    let ad = if on_query { &ad.query } else { &ad.value };
                    if on_a {
                        (ad.a_factor.data().len(), g.da.clone())
                    } else {
                        (ad.b_factor.data().len(), g.db.clone())
                    }
                };
                let ci = rng.gen_range(0..len);
                let bp = bp_vec[ci];
                let adjust = |set: &mut AdapterSet, delta: f64| {
                    let pair = set.get_mut(layer, target).unwrap();
                    let f = if on_a {
                        pair.a_factor.data_mut()
                    } else {
                        pair.b_factor.data_mut()
                    };
                    f[ci] += delta;
                };
                adjust(set, eps);
                let lp = loss_of(&model, Some(set), &sample);
                adjust(set, -2.0 * eps);
                let lm = loss_of(&model, Some(set), &sample);
                adjust(set, eps);
                let fd = (lp - lm) / (2.0 * eps);
                check_grad(
                    bp,
                    fd,
                    &format!("{strategy} adapter layer {layer} {target:?} a={on_a} probe {probe}"),
                );
            }
        }
    }
}

#[test]
fn batch_gradients_are_mean_of_per_sample_gradients() {
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(311);
    let model = build_model(&cfg, &mut rng).unwrap();
    let site = gen_site(312, 0, &default_site_params(0), 3, 1, &cfg).unwrap();
    let refs: Vec<&Sample> = site.train.iter().collect();
    let (loss_batch, grads_batch) =
        fedsam_core::training::batch_loss_and_grads(&model, None, &refs, LossWeights::default())
            .unwrap();

    let mut loss_sum = 0.0;
    let mut grad_sum: Option<fedsam_core::model::Grads> = None;
    for s in &site.train {
        let (l, g) =
            fedsam_core::training::batch_loss_and_grads(&model, None, &[s], LossWeights::default())
                .unwrap();
        loss_sum += l;
        match grad_sum.as_mut() {
            None => {
                let mut z = fedsam_core::model::Grads::zeros(&model, None);
                z.add_scaled(&g, 1.0);
                grad_sum = Some(z);
            }
            Some(acc) => acc.add_scaled(&g, 1.0),
        }
    }
    let k = site.train.len() as f64;
    assert!((loss_batch - loss_sum / k).abs() <= 1e-12);
    let acc = grad_sum.unwrap();
    for (a, b) in grads_batch.dense.iter().zip(&acc.dense) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y / k).abs() <= 1e-12);
        }
    }
}

#[test]
fn batch_loss_is_permutation_invariant() {
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(411);
    let model = build_model(&cfg, &mut rng).unwrap();
    let site = gen_site(412, 0, &default_site_params(0), 4, 1, &cfg).unwrap();
    let fwd: Vec<&Sample> = site.train.iter().collect();
    let rev: Vec<&Sample> = site.train.iter().rev().collect();
    let (a, _) =
        fedsam_core::training::batch_loss_and_grads(&model, None, &fwd, LossWeights::default())
            .unwrap();
    let (b, _) =
        fedsam_core::training::batch_loss_and_grads(&model, None, &rev, LossWeights::default())
            .unwrap();
    assert!((a - b).abs() <= 1e-12);
}
