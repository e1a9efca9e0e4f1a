//! Federated orchestration: server/client state, dense FedAvg, and the
//! adapter aggregation pipeline (merge the factor pairs into dense deltas,
//! take the weighted average, re-factorize through a truncated SVD, and
//! redistribute the new factors).

use crate::adapters::{merge_delta, AdapterSet, AdapterTarget, LoraAdapter};
use crate::linalg::{svd, truncate_svd, weighted_sum, LinalgError, Matrix};
use crate::model::{build_model, init_adapter_set, trainable_params, ModelConfig, ModelError, Strategy, ToyModel};
use crate::rngutil;
use crate::training::{train_local, AdamState, Sample, TrainError, TrainSettings};
use crate::wire::{serialize_update, DenseTensorView};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("config hash mismatch between server and client {client}")]
    ConfigMismatch { client: u32 },
    #[error("client weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("update shape mismatch: {0}")]
    Shape(String),
    #[error("adapter key/rank mismatch: {0}")]
    KeyMismatch(String),
    #[error("client {client} diverged: {source}")]
    ClientDiverged {
        client: u32,
        #[source]
        source: TrainError,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adapter(#[from] crate::adapters::AdapterError),
}

/// How client weights are assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// w_k proportional to the client's sample count.
    SampleProportional,
    Uniform,
}

/// One dense tensor of the global trainable snapshot.
#[derive(Debug, Clone)]
pub struct SnapshotTensor {
    pub name: String,
    pub group: crate::model::ParamGroup,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Server-side global state: the trainable dense tensors plus global
/// adapter factors when the strategy uses them.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub cfg: ModelConfig,
    pub strategy: Strategy,
    pub rank: usize,
    pub round: u64,
    pub dense: Vec<SnapshotTensor>,
    pub adapters: Option<AdapterSet>,
    pub client_weights: Vec<f64>,
    pub config_hash: [u8; 32],
}

/// One client: local model, adapters, optimizer state and batch-sampling
/// RNG (both persisted across rounds, as in a long-lived client process),
/// and its private training data.
#[derive(Debug)]
pub struct ClientState {
    pub id: u32,
    pub n_samples: usize,
    pub round: u64,
    pub model: ToyModel,
    pub adapters: Option<AdapterSet>,
    pub adam: AdamState,
    pub train_data: Vec<Sample>,
    pub rng: ChaCha8Rng,
    pub config_hash: [u8; 32],
}

/// Per-round SVD re-factorization residual of one adapter.
#[derive(Debug, Clone)]
pub struct LayerResidual {
    pub layer_id: u32,
    pub target: AdapterTarget,
    pub residual: f64,
}

/// Byte counts for one client in one round.
#[derive(Debug, Clone)]
pub struct ClientBytes {
    pub client: u32,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

/// Everything measured during one federated round.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: u64,
    pub per_client: Vec<ClientBytes>,
    pub residuals: Vec<LayerResidual>,
    /// L2 norm of the global update (dense tensors and merged deltas).
    pub update_norm: f64,
    pub mean_client_loss: Option<f64>,
    pub duration: Duration,
}

/// Build a federation: one base model cloned to every client so the frozen
/// partition is identical everywhere, a server snapshot of the trainable
/// set, and sample-proportional or uniform client weights.
#[allow(clippy::type_complexity)]
pub fn init_federation(
    cfg: &ModelConfig,
    strategy: Strategy,
    rank: usize,
    lora_scale: f64,
    client_data: Vec<Vec<Sample>>,
    weight_mode: WeightMode,
    master_seed: u64,
) -> Result<(ServerState, Vec<ClientState>), ProtocolError> {
    let mut model_rng = ChaCha8Rng::seed_from_u64(rngutil::derive_seed(master_seed, &[0x0de1]));
    let base = build_model(cfg, &mut model_rng)?;
    let base_adapters = if strategy.uses_lora() {
        let mut ad_rng = ChaCha8Rng::seed_from_u64(rngutil::derive_seed(master_seed, &[0xada9]));
        Some(init_adapter_set(cfg, rank, lora_scale, &mut ad_rng)?)
    } else {
        None
    };
    let config_hash = cfg.hash();

    let counts: Vec<usize> = client_data.iter().map(|d| d.len()).collect();
    let client_weights = match weight_mode {
        WeightMode::Uniform => vec![1.0 / counts.len() as f64; counts.len()],
        WeightMode::SampleProportional => {
            let total: usize = counts.iter().sum();
            counts.iter().map(|&n| n as f64 / total as f64).collect()
        }
    };

    let dense = snapshot_dense(&base, strategy, base_adapters.as_ref())?;
    let server = ServerState {
        cfg: cfg.clone(),
        strategy,
        rank,
        round: 0,
        dense,
        adapters: base_adapters.clone(),
        client_weights,
        config_hash,
    };

    let clients = client_data
        .into_iter()
        .enumerate()
        .map(|(k, data)| {
            let model = base.clone();
            let adapters = base_adapters.clone();
            let adam = AdamState::new(&model, strategy, adapters.as_ref());
            ClientState {
                id: k as u32,
                n_samples: data.len(),
                round: 0,
                model,
                adapters,
                adam,
                train_data: data,
                rng: ChaCha8Rng::seed_from_u64(rngutil::derive_seed(
                    master_seed,
                    &[0xc11e, k as u64],
                )),
                config_hash,
            }
        })
        .collect();
    Ok((server, clients))
}

/// The trainable dense tensors of a model, in registry order.
pub fn snapshot_dense(
    model: &ToyModel,
    strategy: Strategy,
    adapters: Option<&AdapterSet>,
) -> Result<Vec<SnapshotTensor>, ProtocolError> {
    Ok(trainable_params(&model.registry, strategy, adapters)?
        .into_iter()
        .map(|i| {
            let p = model.registry.by_idx(i);
            SnapshotTensor {
                name: p.name.clone(),
                group: p.group,
                shape: p.shape.clone(),
                data: p.data.clone(),
            }
        })
        .collect())
}

/// Copy the server's trainable snapshot into every client, bit for bit.
/// Frozen tensors are untouched. Fails on any config-hash mismatch.
pub fn broadcast(server: &ServerState, clients: &mut [ClientState]) -> Result<(), ProtocolError> {
    for c in clients.iter() {
        if c.config_hash != server.config_hash {
            return Err(ProtocolError::ConfigMismatch { client: c.id });
        }
    }
    for c in clients.iter_mut() {
        for t in &server.dense {
            let dst = c.model.registry.data_mut(&t.name)?;
            if dst.len() != t.data.len() {
                return Err(ProtocolError::Shape(format!(
                    "{}: server {} values, client {}",
                    t.name,
                    t.data.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(&t.data);
        }
        if let Some(global) = &server.adapters {
            let local = c
                .adapters
                .as_mut()
                .ok_or_else(|| ProtocolError::KeyMismatch("client has no adapters".to_string()))?;
            for (id, target, ad) in global.iter_flat() {
                let dst = local.get_mut(id, target).ok_or_else(|| {
                    ProtocolError::KeyMismatch(format!("client missing adapter {id}/{target:?}"))
                })?;
                if dst.rank != ad.rank
                    || dst.d_out() != ad.d_out()
                    || dst.d_in() != ad.d_in()
                {
                    return Err(ProtocolError::KeyMismatch(format!(
                        "adapter {id}/{target:?} shape mismatch"
                    )));
                }
                dst.a_factor = ad.a_factor.clone();
                dst.b_factor = ad.b_factor.clone();
            }
        }
        c.round = server.round;
    }
    Ok(())
}

fn check_weights(weights: &[f64]) -> Result<(), ProtocolError> {
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(ProtocolError::WeightSum(sum));
    }
    Ok(())
}

/// Weighted average of dense client updates into the global snapshot.
/// All-or-nothing: the server state changes only if every tensor aggregates.
pub fn aggregate_dense(
    server: &mut ServerState,
    updates: &[(Vec<SnapshotTensor>, f64)],
) -> Result<(), ProtocolError> {
    check_weights(&updates.iter().map(|(_, w)| *w).collect::<Vec<f64>>())?;
    let mut staged: Vec<SnapshotTensor> = Vec::with_capacity(server.dense.len());
    for (ti, slot) in server.dense.iter().enumerate() {
        let n = slot.data.len();
        let mut mats = Vec::with_capacity(updates.len());
        let mut weights = Vec::with_capacity(updates.len());
        for (tensors, w) in updates {
            let t = tensors.get(ti).ok_or_else(|| {
                ProtocolError::Shape(format!("update missing tensor {}", slot.name))
            })?;
            if t.name != slot.name || t.data.len() != n {
                return Err(ProtocolError::Shape(format!(
                    "update tensor {} does not match snapshot slot {}",
                    t.name, slot.name
                )));
            }
            mats.push(Matrix::from_vec(1, n, t.data.clone()).map_err(ProtocolError::Linalg)?);
            weights.push(*w);
        }
        let avg = weighted_sum(&mats, &weights)?;
        staged.push(SnapshotTensor {
            name: slot.name.clone(),
            group: slot.group,
            shape: slot.shape.clone(),
            data: avg.data().to_vec(),
        });
    }
    server.dense = staged;
    Ok(())
}

/// Adapter aggregation: for every (layer, target), merge each client's
/// factors into a dense delta, average with the client weights, decompose
/// with a truncated SVD back to rank-r factors, and store them as the new
/// global adapter. Returns the Frobenius residual per layer, which is the
/// best possible rank-r error for the averaged delta.
pub fn aggregate_lora(
    server: &mut ServerState,
    updates: &[(AdapterSet, f64)],
) -> Result<Vec<LayerResidual>, ProtocolError> {
    check_weights(&updates.iter().map(|(_, w)| *w).collect::<Vec<f64>>())?;
    let global = server
        .adapters
        .as_ref()
        .ok_or_else(|| ProtocolError::KeyMismatch("server has no adapters".to_string()))?;

    let mut staged: Vec<(u32, AdapterTarget, LoraAdapter, f64)> = Vec::new();
    for (id, target, g_ad) in global.iter_flat() {
        let mut deltas = Vec::with_capacity(updates.len());
        let mut weights = Vec::with_capacity(updates.len());
        for (set, w) in updates {
            let pair = set.get(id).ok_or_else(|| {
                ProtocolError::KeyMismatch(format!("client update missing layer {id}"))
            })?;
            let ad = match target {
                AdapterTarget::Query => &pair.query,
                AdapterTarget::Value => &pair.value,
            };
            if ad.rank != g_ad.rank || ad.d_out() != g_ad.d_out() || ad.d_in() != g_ad.d_in() {
                return Err(ProtocolError::KeyMismatch(format!(
                    "layer {id}/{target:?}: client rank/shape differs from global"
                )));
            }
            // The forward scale is a shared hyperparameter; averaging the
            // deltas only commutes with scaling when it is identical.
            if ad.scale != g_ad.scale {
                return Err(ProtocolError::KeyMismatch(format!(
                    "layer {id}/{target:?}: client scale {} differs from global {}",
                    ad.scale, g_ad.scale
                )));
            }
            deltas.push(merge_delta(ad));
            weights.push(*w);
        }
        let agg = weighted_sum(&deltas, &weights)?;
        let decomp = svd(&agg)?;
        let (b, a) = truncate_svd(&decomp, g_ad.rank)?;
        let new_ad = LoraAdapter::from_factors(b, a, g_ad.scale, target)?;
        let residual = agg.sub(&merge_delta(&new_ad))?.frob_norm();
        staged.push((id, target, new_ad, residual));
    }

    let adapters = server.adapters.as_mut().unwrap();
    let mut residuals = Vec::with_capacity(staged.len());
    for (id, target, ad, residual) in staged {
        *adapters.get_mut(id, target).unwrap() = ad;
        residuals.push(LayerResidual {
            layer_id: id,
            target,
            residual,
        });
    }
    Ok(residuals)
}

fn merged_deltas(set: &AdapterSet) -> Vec<Matrix> {
    set.iter_flat().map(|(_, _, ad)| merge_delta(ad)).collect()
}

/// One full federated round: broadcast, concurrent local training, exact
/// byte accounting of both directions, and atomic aggregation. A diverging
/// client aborts the round with the server untouched.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    local_steps: usize,
    settings: &TrainSettings,
) -> Result<RoundRecord, ProtocolError> {
    let start = Instant::now();
    let round = server.round;
    broadcast(server, clients)?;

    let down_payload = serialize_server_payload(server);
    let bytes_down = down_payload.len() as u64;

    // Local training, one thread per client, no shared state.
    let mut traces: Vec<Option<f64>> = vec![None; clients.len()];
    if local_steps > 0 {
        let per_step = TrainSettings {
            steps: local_steps,
            ..*settings
        };
        let strategy = server.strategy;
        let results: Vec<Result<Option<f64>, (u32, TrainError)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = clients
                .iter_mut()
                .map(|c| {
                    scope.spawn(move || {
                        let trace = train_local(
                            &mut c.model,
                            &mut c.adapters,
                            strategy,
                            &c.train_data,
                            &per_step,
                            &mut c.adam,
                            &mut c.rng,
                        )
                        .map_err(|e| (c.id, e))?;
                        Ok(trace.last().copied())
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for (k, r) in results.into_iter().enumerate() {
            match r {
                Ok(t) => traces[k] = t,
                Err((client, source)) => {
                    return Err(ProtocolError::ClientDiverged { client, source })
                }
            }
        }
    }

    // Collect updates in client-id order; completion order cannot matter.
    let mut dense_updates = Vec::with_capacity(clients.len());
    let mut lora_updates = Vec::with_capacity(clients.len());
    let mut per_client = Vec::with_capacity(clients.len());
    for (k, c) in clients.iter().enumerate() {
        let dense = snapshot_dense(&c.model, server.strategy, c.adapters.as_ref())?;
        let up_payload = serialize_client_payload(server, c, &dense);
        per_client.push(ClientBytes {
            client: c.id,
            bytes_up: up_payload.len() as u64,
            bytes_down,
        });
        dense_updates.push((dense, server.client_weights[k]));
        if let Some(set) = &c.adapters {
            lora_updates.push((set.clone(), server.client_weights[k]));
        }
    }

    // Stage both aggregations before committing either: aggregate into a
    // scratch server and swap on success.
    let mut staged = server.clone();
    let old_dense = server.dense.clone();
    let old_deltas = server.adapters.as_ref().map(merged_deltas);
    aggregate_dense(&mut staged, &dense_updates)?;
    let residuals = if server.strategy.uses_lora() {
        aggregate_lora(&mut staged, &lora_updates)?
    } else {
        Vec::new()
    };
    staged.round = round + 1;
    *server = staged;

    // Update norm over dense tensors and merged adapter deltas.
    let mut sq = 0.0;
    for (new, old) in server.dense.iter().zip(&old_dense) {
        for (a, b) in new.data.iter().zip(&old.data) {
            sq += (a - b) * (a - b);
        }
    }
    if let (Some(new_set), Some(olds)) = (server.adapters.as_ref(), old_deltas) {
        for (new_delta, old_delta) in merged_deltas(new_set).iter().zip(&olds) {
            let d = new_delta.sub(old_delta)?;
            let n = d.frob_norm();
            sq += n * n;
        }
    }

    let finite: Vec<f64> = traces.iter().flatten().copied().collect();
    let mean_client_loss = if finite.is_empty() {
        None
    } else {
        Some(finite.iter().sum::<f64>() / finite.len() as f64)
    };

    Ok(RoundRecord {
        round,
        per_client,
        residuals,
        update_norm: sq.sqrt(),
        mean_client_loss,
        duration: start.elapsed(),
    })
}

/// Serialize the server's broadcast payload (trainable snapshot).
pub fn serialize_server_payload(server: &ServerState) -> Vec<u8> {
    let views: Vec<DenseTensorView> = server
        .dense
        .iter()
        .map(|t| DenseTensorView {
            name: &t.name,
            group: t.group,
            shape: &t.shape,
            data: &t.data,
        })
        .collect();
    serialize_update(
        server.strategy,
        server.rank as u16,
        server.round as u32,
        &server.config_hash,
        &views,
        server.adapters.as_ref(),
    )
}

fn serialize_client_payload(
    server: &ServerState,
    client: &ClientState,
    dense: &[SnapshotTensor],
) -> Vec<u8> {
    let views: Vec<DenseTensorView> = dense
        .iter()
        .map(|t| DenseTensorView {
            name: &t.name,
            group: t.group,
            shape: &t.shape,
            data: &t.data,
        })
        .collect();
    serialize_update(
        server.strategy,
        server.rank as u16,
        server.round as u32,
        &client.config_hash,
        &views,
        client.adapters.as_ref(),
    )
}

/// Apply the server's global state onto a freshly built base model for
/// evaluation.
pub fn materialize_global_model(
    server: &ServerState,
    master_seed: u64,
) -> Result<(ToyModel, Option<AdapterSet>), ProtocolError> {
    let mut model_rng = ChaCha8Rng::seed_from_u64(rngutil::derive_seed(master_seed, &[0x0de1]));
    let mut model = build_model(&server.cfg, &mut model_rng)?;
    for t in &server.dense {
        model.registry.data_mut(&t.name)?.copy_from_slice(&t.data);
    }
    Ok((model, server.adapters.clone()))
}
