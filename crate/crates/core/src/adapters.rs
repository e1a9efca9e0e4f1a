//! Low-rank adapters attached to attention projection matrices.
//!
//! An adapter holds the factor pair (A, B) of a rank-r update
//! `delta = B * A` for one projection `W` of shape d x d'. The forward
//! contribution is always computed in factored form, `alpha * B * (A * x)`,
//! never through a materialized `B * A`.

use crate::linalg::{Matrix, SvdResult};
use crate::rngutil;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

/// Gaussian standard deviation used to initialize the A factor.
pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("invalid rank {rank} for a {d}x{d_prime} projection (need 1 <= rank <= min/2 = {max})")]
    InvalidRank {
        rank: usize,
        d: usize,
        d_prime: usize,
        max: usize,
    },
    #[error("adapter shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
}

/// Which projection an adapter modifies. Key and output projections never
/// carry adapters; the type makes them unrepresentable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AdapterTarget {
    Query,
    Value,
}

impl AdapterTarget {
    pub fn as_str(&self) -> &'static str {
        match self {
            AdapterTarget::Query => "q",
            AdapterTarget::Value => "v",
        }
    }

    pub fn wire_code(&self) -> u8 {
        match self {
            AdapterTarget::Query => 0,
            AdapterTarget::Value => 1,
        }
    }

    pub fn from_wire_code(code: u8) -> Option<AdapterTarget> {
        match code {
            0 => Some(AdapterTarget::Query),
            1 => Some(AdapterTarget::Value),
            _ => None,
        }
    }
}

/// Rank-r factor pair for one projection matrix.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// r x d' factor, Gaussian at initialization.
    pub a_factor: Matrix,
    /// d x r factor, zero at initialization so the initial delta is zero.
    pub b_factor: Matrix,
    pub rank: usize,
    /// Forward scale applied to the delta path.
    pub scale: f64,
    pub target: AdapterTarget,
}

impl LoraAdapter {
    /// Wrap existing factors, checking shape consistency and the rank bound.
    pub fn from_factors(
        b_factor: Matrix,
        a_factor: Matrix,
        scale: f64,
        target: AdapterTarget,
    ) -> Result<LoraAdapter, AdapterError> {
        let rank = b_factor.cols();
        if a_factor.rows() != rank {
            return Err(AdapterError::Shape(format!(
                "b is {}x{} but a is {}x{}",
                b_factor.rows(),
                b_factor.cols(),
                a_factor.rows(),
                a_factor.cols()
            )));
        }
        let (d, d_prime) = (b_factor.rows(), a_factor.cols());
        check_rank(rank, d, d_prime)?;
        Ok(LoraAdapter {
            a_factor,
            b_factor,
            rank,
            scale,
            target,
        })
    }

    /// Output dimension d of the adapted projection.
    pub fn d_out(&self) -> usize {
        self.b_factor.rows()
    }

    /// Input dimension d' of the adapted projection.
    pub fn d_in(&self) -> usize {
        self.a_factor.cols()
    }

    /// Number of stored values across both factors.
    pub fn param_count(&self) -> usize {
        self.rank * (self.d_out() + self.d_in())
    }
}

fn check_rank(rank: usize, d: usize, d_prime: usize) -> Result<(), AdapterError> {
    let max = d.min(d_prime) / 2;
    if rank == 0 || rank > max {
        return Err(AdapterError::InvalidRank {
            rank,
            d,
            d_prime,
            max,
        });
    }
    Ok(())
}

/// Fresh adapter for a d x d' projection: A ~ N(0, DEFAULT_INIT_STD^2),
/// B = 0, so the initial delta B*A vanishes and the adapted model is
/// indistinguishable from the base model.
pub fn init_lora(
    d: usize,
    d_prime: usize,
    rank: usize,
    scale: f64,
    target: AdapterTarget,
    rng: &mut ChaCha8Rng,
) -> Result<LoraAdapter, AdapterError> {
    check_rank(rank, d, d_prime)?;
    let a_factor = Matrix::from_fn(rank, d_prime, |_, _| {
        rngutil::gaussian(rng) * DEFAULT_INIT_STD
    });
    let b_factor = Matrix::zeros(d, rank);
    Ok(LoraAdapter {
        a_factor,
        b_factor,
        rank,
        scale,
        target,
    })
}

/// `W*x + scale * B*(A*x)` without materializing `B*A`.
pub fn lora_forward(
    w: &Matrix,
    adapter: &LoraAdapter,
    x: &Matrix,
) -> Result<Matrix, AdapterError> {
    if w.rows() != adapter.d_out() || w.cols() != adapter.d_in() {
        return Err(AdapterError::Shape(format!(
            "projection is {}x{} but adapter expects {}x{}",
            w.rows(),
            w.cols(),
            adapter.d_out(),
            adapter.d_in()
        )));
    }
    let base = w.matmul(x)?;
    let ax = adapter.a_factor.matmul(x)?;
    let delta = adapter.b_factor.matmul(&ax)?;
    Ok(base.add(&delta.scale(adapter.scale))?)
}

/// Dense `delta = B*A`. The forward scale is not applied here; it is a
/// global hyperparameter shared by all clients, so averaging deltas
/// commutes with scaling.
pub fn merge_delta(adapter: &LoraAdapter) -> Matrix {
    adapter
        .b_factor
        .matmul(&adapter.a_factor)
        .expect("factor shapes are checked at construction")
}

/// Replace an adapter's factors with the balanced-split truncation of an
/// aggregated delta, keeping rank/scale/target intact.
pub fn refactor_from_svd(
    adapter: &LoraAdapter,
    decomposition: &SvdResult,
) -> Result<LoraAdapter, AdapterError> {
    let (b, a) = crate::linalg::truncate_svd(decomposition, adapter.rank)?;
    LoraAdapter::from_factors(b, a, adapter.scale, adapter.target)
}

/// Query/value adapter pair for one attention layer.
#[derive(Debug, Clone)]
pub struct LayerAdapters {
    pub query: LoraAdapter,
    pub value: LoraAdapter,
}

/// All adapters of a model, keyed by attention-layer id. Iteration order is
/// ascending layer id, query before value.
#[derive(Debug, Clone, Default)]
pub struct AdapterSet {
    pub layers: BTreeMap<u32, LayerAdapters>,
}

impl AdapterSet {
    pub fn new() -> AdapterSet {
        AdapterSet {
            layers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, layer_id: u32, pair: LayerAdapters) {
        self.layers.insert(layer_id, pair);
    }

    pub fn get(&self, layer_id: u32) -> Option<&LayerAdapters> {
        self.layers.get(&layer_id)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Total stored values across all factor pairs.
    pub fn param_count(&self) -> usize {
        self.layers
            .values()
            .map(|p| p.query.param_count() + p.value.param_count())
            .sum()
    }

    /// Deterministic flat view: (layer id, target, adapter).
    pub fn iter_flat(&self) -> impl Iterator<Item = (u32, AdapterTarget, &LoraAdapter)> {
        self.layers.iter().flat_map(|(&id, pair)| {
            [
                (id, AdapterTarget::Query, &pair.query),
                (id, AdapterTarget::Value, &pair.value),
            ]
        })
    }

    pub fn get_mut(&mut self, layer_id: u32, target: AdapterTarget) -> Option<&mut LoraAdapter> {
        self.layers.get_mut(&layer_id).map(|p| match target {
            AdapterTarget::Query => &mut p.query,
            AdapterTarget::Value => &mut p.value,
        })
    }
}
