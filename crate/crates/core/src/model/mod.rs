//! Model configuration, the partitioned parameter registry, fine-tuning
//! strategies, and the analytic parameter-count calculator.
//!
//! The model mirrors the topology of SAM: an image encoder of transformer
//! blocks (`ie.*`), a learned prompt-embedding stand-in (`pe.*`), and a
//! mask decoder (`md.*`) made of two-way transformer blocks, a 16x
//! transposed-convolution upscaling path, and per-class hypernetwork heads.
//! Every parameter carries exactly one of six group tags, and a strategy is
//! just the set of groups it trains plus whether it attaches adapters.

mod checkpoint;
mod counts;
mod toy;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use counts::{count_params, ParamCounts};
pub use toy::{build_model, init_adapter_set, Grads, Tape, ToyModel};

use crate::adapters::AdapterSet;
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use thiserror::Error;

/// Side length of one square patch; the encoder token grid is
/// `image_size / PATCH` per axis and the upscaling path restores the full
/// resolution with four 2x stages.
pub const PATCH: usize = 16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input shape mismatch: expected {expected} values, got {got}")]
    InputShape { expected: usize, got: usize },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("adapters {0} for this strategy")]
    AdapterMismatch(&'static str),
    #[error(transparent)]
    Adapter(#[from] crate::adapters::AdapterError),
}

/// Parameter group tags partitioning the whole model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    /// Image-encoder attention projections.
    IeAt,
    /// Everything else in the image encoder (patch/pos embeddings, norms,
    /// MLPs, neck).
    IeNa,
    /// Prompt-embedding stand-in.
    Pe,
    /// Decoder transformer blocks.
    MdTr,
    /// Decoder upscaling path.
    MdUp,
    /// Decoder hypernetwork heads and mask tokens.
    MdHyp,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::IeAt,
        ParamGroup::IeNa,
        ParamGroup::Pe,
        ParamGroup::MdTr,
        ParamGroup::MdUp,
        ParamGroup::MdHyp,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ParamGroup::IeAt => "IE-AT",
            ParamGroup::IeNa => "IE-NA",
            ParamGroup::Pe => "PE",
            ParamGroup::MdTr => "MD-TR",
            ParamGroup::MdUp => "MD-UP",
            ParamGroup::MdHyp => "MD-HYP",
        }
    }

    pub fn wire_code(&self) -> u8 {
        match self {
            ParamGroup::IeAt => 0,
            ParamGroup::IeNa => 1,
            ParamGroup::Pe => 2,
            ParamGroup::MdTr => 3,
            ParamGroup::MdUp => 4,
            ParamGroup::MdHyp => 5,
        }
    }

    pub fn from_wire_code(code: u8) -> Option<ParamGroup> {
        ParamGroup::ALL.get(code as usize).copied()
    }
}

/// Fine-tuning strategies: which groups train, and whether low-rank
/// adapters ride on the attention projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    FullFt,
    AttnFt,
    DecFt,
    LoraFt,
    LoraDecFt,
    PDecFt,
    FlapSam,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::FullFt,
        Strategy::AttnFt,
        Strategy::DecFt,
        Strategy::LoraFt,
        Strategy::LoraDecFt,
        Strategy::PDecFt,
        Strategy::FlapSam,
    ];

    pub fn trainable_groups(&self) -> &'static [ParamGroup] {
        use ParamGroup::*;
        match self {
            Strategy::FullFt => &[IeAt, IeNa, Pe, MdTr, MdUp, MdHyp],
            Strategy::AttnFt => &[IeAt, MdTr, MdUp, MdHyp],
            Strategy::DecFt => &[MdTr, MdUp, MdHyp],
            Strategy::LoraFt => &[],
            Strategy::LoraDecFt => &[MdTr, MdUp, MdHyp],
            Strategy::PDecFt => &[MdUp, MdHyp],
            Strategy::FlapSam => &[MdUp, MdHyp],
        }
    }

    pub fn uses_lora(&self) -> bool {
        matches!(
            self,
            Strategy::LoraFt | Strategy::LoraDecFt | Strategy::FlapSam
        )
    }

    pub fn trains_group(&self, g: ParamGroup) -> bool {
        self.trainable_groups().contains(&g)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::FullFt => "full-ft",
            Strategy::AttnFt => "attn-ft",
            Strategy::DecFt => "dec-ft",
            Strategy::LoraFt => "lora-ft",
            Strategy::LoraDecFt => "lora-dec-ft",
            Strategy::PDecFt => "pdec-ft",
            Strategy::FlapSam => "flap-sam",
        }
    }

    pub fn parse(s: &str) -> Option<Strategy> {
        Strategy::ALL.iter().copied().find(|st| st.as_str() == s)
    }

    pub fn wire_code(&self) -> u8 {
        Strategy::ALL.iter().position(|s| s == self).unwrap() as u8
    }

    pub fn from_wire_code(code: u8) -> Option<Strategy> {
        Strategy::ALL.get(code as usize).copied()
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Model dimensions. Two presets exist: `toy` is small enough to train and
/// gradient-check on a desktop core, `vit_b_paper` exists only so the count
/// calculator can reproduce full-scale accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub embed_dim: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub decoder_dim: usize,
    pub num_heads: usize,
    pub decoder_heads: usize,
    /// Consecutive slices fed as input channels.
    pub input_slices: usize,
    pub image_size: usize,
    /// Segmentation labels including background; the model emits one logit
    /// channel per label.
    pub num_classes: usize,
    pub mlp_ratio: usize,
    pub decoder_mlp_hidden: usize,
    pub prompt_tokens: usize,
    /// Output channels of the four 2x upscaling stages.
    pub up_channels: [usize; 4],
}

impl ModelConfig {
    pub fn toy() -> ModelConfig {
        ModelConfig {
            name: "toy".to_string(),
            embed_dim: 32,
            encoder_blocks: 2,
            decoder_blocks: 2,
            decoder_dim: 16,
            num_heads: 4,
            decoder_heads: 2,
            input_slices: 5,
            image_size: 32,
            num_classes: 2,
            mlp_ratio: 4,
            decoder_mlp_hidden: 64,
            prompt_tokens: 4,
            up_channels: [8, 8, 8, 8],
        }
    }

    /// Full-scale dimensions used only by `count_params`. The decoder MLP
    /// width is a reconstruction constant chosen so the strategy counts
    /// reproduce the reference accounting jointly (see `counts`).
    pub fn vit_b_paper() -> ModelConfig {
        ModelConfig {
            name: "vit_b_paper".to_string(),
            embed_dim: 768,
            encoder_blocks: 12,
            decoder_blocks: 2,
            decoder_dim: 256,
            num_heads: 12,
            decoder_heads: 8,
            input_slices: 5,
            image_size: 1024,
            num_classes: 2,
            mlp_ratio: 4,
            decoder_mlp_hidden: 2232,
            prompt_tokens: 4,
            up_channels: [64, 32, 16, 8],
        }
    }

    pub fn preset(name: &str) -> Option<ModelConfig> {
        match name {
            "toy" => Some(ModelConfig::toy()),
            "vit_b_paper" => Some(ModelConfig::vit_b_paper()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.decoder_dim == 0 || !self.decoder_dim.is_multiple_of(self.decoder_heads) {
            return fail(format!(
                "decoder_dim {} must be a positive multiple of decoder_heads {}",
                self.decoder_dim, self.decoder_heads
            ));
        }
        if self.cross_dim() == 0 || !self.cross_dim().is_multiple_of(self.decoder_heads) {
            return fail(format!(
                "cross-attention dim {} must be a positive multiple of decoder_heads {}",
                self.cross_dim(),
                self.decoder_heads
            ));
        }
        if self.input_slices == 0 {
            return fail("input_slices must be >= 1".to_string());
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(PATCH) {
            return fail(format!(
                "image_size {} must be a positive multiple of {PATCH}",
                self.image_size
            ));
        }
        if self.num_classes < 2 {
            return fail("num_classes must be >= 2 (background plus foreground)".to_string());
        }
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return fail("encoder_blocks and decoder_blocks must be >= 1".to_string());
        }
        if self.up_channels.contains(&0) {
            return fail("up_channels must all be >= 1".to_string());
        }
        if self.mlp_ratio == 0 || self.decoder_mlp_hidden == 0 || self.prompt_tokens == 0 {
            return fail("mlp_ratio, decoder_mlp_hidden, prompt_tokens must be >= 1".to_string());
        }
        Ok(())
    }

    /// Token grid side length.
    pub fn grid(&self) -> usize {
        self.image_size / PATCH
    }

    /// Number of encoder tokens.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Internal dimension of decoder cross-attention (half the decoder dim,
    /// mirroring the downsampled cross-attention of the reference decoder).
    pub fn cross_dim(&self) -> usize {
        self.decoder_dim / 2
    }

    /// Flattened patch length (channels x PATCH x PATCH).
    pub fn patch_dim(&self) -> usize {
        self.input_slices * PATCH * PATCH
    }

    /// Decoder token count: one mask token per class plus prompt tokens.
    pub fn decoder_tokens(&self) -> usize {
        self.num_classes + self.prompt_tokens
    }

    /// The largest adapter rank every adapted projection supports.
    pub fn max_lora_rank(&self) -> usize {
        self.lora_layer_specs()
            .iter()
            .map(|s| s.d_out.min(s.d_in) / 2)
            .min()
            .unwrap_or(0)
    }

    /// Stable key=value rendering, hashed into every artifact.
    pub fn canonical_string(&self) -> String {
        format!(
            "name={} embed_dim={} encoder_blocks={} decoder_blocks={} decoder_dim={} \
             num_heads={} decoder_heads={} input_slices={} image_size={} num_classes={} \
             mlp_ratio={} decoder_mlp_hidden={} prompt_tokens={} up_channels={},{},{},{}",
            self.name,
            self.embed_dim,
            self.encoder_blocks,
            self.decoder_blocks,
            self.decoder_dim,
            self.num_heads,
            self.decoder_heads,
            self.input_slices,
            self.image_size,
            self.num_classes,
            self.mlp_ratio,
            self.decoder_mlp_hidden,
            self.prompt_tokens,
            self.up_channels[0],
            self.up_channels[1],
            self.up_channels[2],
            self.up_channels[3],
        )
    }

    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.canonical_string().as_bytes());
        h.finalize().into()
    }

    /// Adapter layer ids: encoder blocks first, then self/t2i/i2t per
    /// decoder block, then the final token-to-image attention.
    pub fn enc_attn_layer_id(&self, block: usize) -> u32 {
        (block + 1) as u32
    }

    pub fn dec_self_layer_id(&self, block: usize) -> u32 {
        (self.encoder_blocks + 3 * block + 1) as u32
    }

    pub fn dec_t2i_layer_id(&self, block: usize) -> u32 {
        (self.encoder_blocks + 3 * block + 2) as u32
    }

    pub fn dec_i2t_layer_id(&self, block: usize) -> u32 {
        (self.encoder_blocks + 3 * block + 3) as u32
    }

    pub fn final_t2i_layer_id(&self) -> u32 {
        (self.encoder_blocks + 3 * self.decoder_blocks + 1) as u32
    }

    /// Dims of every attention layer that carries adapters, in layer-id
    /// order.
    pub fn lora_layer_specs(&self) -> Vec<LoraLayerSpec> {
        let mut specs = Vec::new();
        for i in 0..self.encoder_blocks {
            specs.push(LoraLayerSpec {
                layer_id: self.enc_attn_layer_id(i),
                name: format!("ie.block{i}.attn"),
                d_out: self.embed_dim,
                d_in: self.embed_dim,
            });
        }
        for j in 0..self.decoder_blocks {
            specs.push(LoraLayerSpec {
                layer_id: self.dec_self_layer_id(j),
                name: format!("md.block{j}.self_attn"),
                d_out: self.decoder_dim,
                d_in: self.decoder_dim,
            });
            specs.push(LoraLayerSpec {
                layer_id: self.dec_t2i_layer_id(j),
                name: format!("md.block{j}.t2i"),
                d_out: self.cross_dim(),
                d_in: self.decoder_dim,
            });
            specs.push(LoraLayerSpec {
                layer_id: self.dec_i2t_layer_id(j),
                name: format!("md.block{j}.i2t"),
                d_out: self.cross_dim(),
                d_in: self.decoder_dim,
            });
        }
        specs.push(LoraLayerSpec {
            layer_id: self.final_t2i_layer_id(),
            name: "md.final_t2i".to_string(),
            d_out: self.cross_dim(),
            d_in: self.decoder_dim,
        });
        specs
    }
}

/// One attention layer eligible for adapters: its id and projection dims.
#[derive(Debug, Clone)]
pub struct LoraLayerSpec {
    pub layer_id: u32,
    pub name: String,
    pub d_out: usize,
    pub d_in: usize,
}

/// How a tensor is filled at build time. Linear and convolution weights use
/// fan-in-scaled Gaussians; embeddings use a small fixed scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitKind {
    Gauss(f64),
    Zero,
    One,
}

/// Scale for embedding-like tensors (positions, prompt, mask tokens).
pub const EMBED_INIT_STD: f64 = 0.02;

/// Shape-level description of one named tensor.
#[derive(Debug, Clone)]
pub struct PlanEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

impl PlanEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn entry(name: String, group: ParamGroup, shape: Vec<usize>, init: InitKind) -> PlanEntry {
    PlanEntry {
        name,
        group,
        shape,
        init,
    }
}

fn linear_entries(
    plan: &mut Vec<PlanEntry>,
    prefix: &str,
    group: ParamGroup,
    d_out: usize,
    d_in: usize,
) {
    plan.push(entry(
        format!("{prefix}.weight"),
        group,
        vec![d_out, d_in],
        InitKind::Gauss(1.0 / (d_in as f64).sqrt()),
    ));
    plan.push(entry(
        format!("{prefix}.bias"),
        group,
        vec![d_out],
        InitKind::Zero,
    ));
}

fn norm_entries(plan: &mut Vec<PlanEntry>, prefix: &str, group: ParamGroup, dim: usize) {
    plan.push(entry(
        format!("{prefix}.gamma"),
        group,
        vec![dim],
        InitKind::One,
    ));
    plan.push(entry(
        format!("{prefix}.beta"),
        group,
        vec![dim],
        InitKind::Zero,
    ));
}

fn attn_entries(
    plan: &mut Vec<PlanEntry>,
    prefix: &str,
    group: ParamGroup,
    inner: usize,
    d_q_in: usize,
    d_kv_in: usize,
    d_out: usize,
) {
    linear_entries(plan, &format!("{prefix}.wq"), group, inner, d_q_in);
    linear_entries(plan, &format!("{prefix}.wk"), group, inner, d_kv_in);
    linear_entries(plan, &format!("{prefix}.wv"), group, inner, d_kv_in);
    linear_entries(plan, &format!("{prefix}.wo"), group, d_out, inner);
}

/// Every dense tensor of the model as (name, group, shape). The builder
/// allocates from this plan and the count calculator sums it, so the two
/// can never drift apart.
///
/// For `vit_b_paper` the encoder-internal breakdown is not modeled: the
/// IE-AT / IE-NA groups appear as two opaque entries whose sizes are
/// anchored constants (see `counts`). That preset is never built.
pub fn shape_plan(cfg: &ModelConfig) -> Vec<PlanEntry> {
    let mut plan = Vec::new();
    let d = cfg.embed_dim;
    let dd = cfg.decoder_dim;
    let cd = cfg.cross_dim();

    if cfg.name == "vit_b_paper" {
        plan.push(entry(
            "ie.attention".to_string(),
            ParamGroup::IeAt,
            vec![counts::VIT_B_IE_AT],
            InitKind::Gauss(EMBED_INIT_STD),
        ));
        plan.push(entry(
            "ie.other".to_string(),
            ParamGroup::IeNa,
            vec![counts::VIT_B_IE_NA],
            InitKind::Gauss(EMBED_INIT_STD),
        ));
    } else {
        linear_entries(
            &mut plan,
            "ie.patch_embed",
            ParamGroup::IeNa,
            d,
            cfg.patch_dim(),
        );
        plan.push(entry(
            "ie.pos_embed".to_string(),
            ParamGroup::IeNa,
            vec![cfg.tokens(), d],
            InitKind::Gauss(EMBED_INIT_STD),
        ));
        for i in 0..cfg.encoder_blocks {
            let p = format!("ie.block{i}");
            norm_entries(&mut plan, &format!("{p}.ln1"), ParamGroup::IeNa, d);
            attn_entries(&mut plan, &format!("{p}.attn"), ParamGroup::IeAt, d, d, d, d);
            norm_entries(&mut plan, &format!("{p}.ln2"), ParamGroup::IeNa, d);
            let hidden = cfg.mlp_ratio * d;
            linear_entries(&mut plan, &format!("{p}.mlp.fc1"), ParamGroup::IeNa, hidden, d);
            linear_entries(&mut plan, &format!("{p}.mlp.fc2"), ParamGroup::IeNa, d, hidden);
        }
        linear_entries(&mut plan, "ie.neck", ParamGroup::IeNa, dd, d);
    }

    plan.push(entry(
        "pe.prompt_embed".to_string(),
        ParamGroup::Pe,
        vec![cfg.prompt_tokens, dd],
        InitKind::Gauss(EMBED_INIT_STD),
    ));

    plan.push(entry(
        "md.mask_tokens".to_string(),
        ParamGroup::MdHyp,
        vec![cfg.num_classes, dd],
        InitKind::Gauss(EMBED_INIT_STD),
    ));
    for j in 0..cfg.decoder_blocks {
        let p = format!("md.block{j}");
        attn_entries(&mut plan, &format!("{p}.self_attn"), ParamGroup::MdTr, dd, dd, dd, dd);
        norm_entries(&mut plan, &format!("{p}.ln1"), ParamGroup::MdTr, dd);
        attn_entries(&mut plan, &format!("{p}.t2i"), ParamGroup::MdTr, cd, dd, dd, dd);
        norm_entries(&mut plan, &format!("{p}.ln2"), ParamGroup::MdTr, dd);
        let hidden = cfg.decoder_mlp_hidden;
        linear_entries(&mut plan, &format!("{p}.mlp.fc1"), ParamGroup::MdTr, hidden, dd);
        linear_entries(&mut plan, &format!("{p}.mlp.fc2"), ParamGroup::MdTr, dd, hidden);
        norm_entries(&mut plan, &format!("{p}.ln3"), ParamGroup::MdTr, dd);
        attn_entries(&mut plan, &format!("{p}.i2t"), ParamGroup::MdTr, cd, dd, dd, dd);
        norm_entries(&mut plan, &format!("{p}.ln4"), ParamGroup::MdTr, dd);
    }
    attn_entries(&mut plan, "md.final_t2i", ParamGroup::MdTr, cd, dd, dd, dd);
    norm_entries(&mut plan, "md.final_ln", ParamGroup::MdTr, dd);

    let mut in_ch = dd;
    for (s, &out_ch) in cfg.up_channels.iter().enumerate() {
        plan.push(entry(
            format!("md.up.stage{s}.weight"),
            ParamGroup::MdUp,
            vec![in_ch, out_ch, 2, 2],
            InitKind::Gauss(1.0 / (in_ch as f64).sqrt()),
        ));
        plan.push(entry(
            format!("md.up.stage{s}.bias"),
            ParamGroup::MdUp,
            vec![out_ch],
            InitKind::Zero,
        ));
        if s == 0 {
            norm_entries(&mut plan, "md.up.ln", ParamGroup::MdUp, out_ch);
        }
        in_ch = out_ch;
    }

    let feat_dim = cfg.up_channels[3];
    for c in 0..cfg.num_classes {
        let p = format!("md.hyp.class{c}");
        linear_entries(&mut plan, &format!("{p}.fc1"), ParamGroup::MdHyp, dd, dd);
        linear_entries(&mut plan, &format!("{p}.fc2"), ParamGroup::MdHyp, dd, dd);
        linear_entries(&mut plan, &format!("{p}.fc3"), ParamGroup::MdHyp, feat_dim, dd);
    }

    plan
}

/// One named, group-tagged tensor of the built model.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Ordered, name-indexed parameter store. Iteration order is the plan
/// order, which is fixed for a given config.
#[derive(Debug, Clone)]
pub struct ParamRegistry {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamRegistry {
    pub fn from_params(params: Vec<Param>) -> ParamRegistry {
        let mut index = HashMap::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            let prev = index.insert(p.name.clone(), i);
            assert!(prev.is_none(), "duplicate parameter name {}", p.name);
        }
        ParamRegistry { params, index }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn idx(&self, name: &str) -> Result<usize, ModelError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    pub fn by_idx(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn by_idx_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn get(&self, name: &str) -> Result<&Param, ModelError> {
        Ok(&self.params[self.idx(name)?])
    }

    pub fn data(&self, name: &str) -> Result<&[f64], ModelError> {
        Ok(&self.get(name)?.data)
    }

    pub fn data_mut(&mut self, name: &str) -> Result<&mut [f64], ModelError> {
        let i = self.idx(name)?;
        Ok(&mut self.params[i].data)
    }

    pub fn total_count(&self) -> u64 {
        self.params.iter().map(|p| p.numel() as u64).sum()
    }

    pub fn group_count(&self, g: ParamGroup) -> u64 {
        self.params
            .iter()
            .filter(|p| p.group == g)
            .map(|p| p.numel() as u64)
            .sum()
    }

    /// SHA-256 over the little-endian f64 bytes of every parameter whose
    /// group is frozen under `strategy`, in registry order.
    pub fn frozen_digest(&self, strategy: Strategy) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in &self.params {
            if !strategy.trains_group(p.group) {
                h.update(p.name.as_bytes());
                for v in &p.data {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.finalize().into()
    }
}

/// Registry indices of the parameters a strategy trains. Adapters must be
/// supplied exactly when the strategy uses them; their factors are always
/// part of the trainable set and are handled by the caller.
pub fn trainable_params(
    reg: &ParamRegistry,
    strategy: Strategy,
    adapters: Option<&AdapterSet>,
) -> Result<Vec<usize>, ModelError> {
    match (strategy.uses_lora(), adapters.is_some()) {
        (true, false) => return Err(ModelError::AdapterMismatch("required but missing")),
        (false, true) => return Err(ModelError::AdapterMismatch("supplied but unused")),
        _ => {}
    }
    Ok(reg
        .iter()
        .enumerate()
        .filter(|(_, p)| strategy.trains_group(p.group))
        .map(|(i, _)| i)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn strategy_masks_match_their_definitions() {
        use ParamGroup::*;
        assert_eq!(Strategy::FullFt.trainable_groups().len(), 6);
        assert!(!Strategy::FullFt.uses_lora());
        assert!(Strategy::AttnFt.trains_group(IeAt) && !Strategy::AttnFt.trains_group(IeNa));
        assert!(!Strategy::AttnFt.trains_group(Pe));
        assert_eq!(Strategy::LoraFt.trainable_groups().len(), 0);
        assert!(Strategy::LoraFt.uses_lora());
        assert!(Strategy::FlapSam.uses_lora());
        assert_eq!(Strategy::FlapSam.trainable_groups(), &[MdUp, MdHyp]);
        assert_eq!(Strategy::PDecFt.trainable_groups(), &[MdUp, MdHyp]);
        assert!(!Strategy::PDecFt.uses_lora());
        assert_eq!(Strategy::LoraDecFt.trainable_groups(), &[MdTr, MdUp, MdHyp]);
    }

    #[test]
    fn partial_decoder_groups_are_strict_subset_of_decoder_groups() {
        let pdec = Strategy::PDecFt.trainable_groups();
        let dec = Strategy::LoraDecFt.trainable_groups();
        assert!(pdec.iter().all(|g| dec.contains(g)));
        assert!(pdec.len() < dec.len());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::parse(s.as_str()), Some(s));
            assert_eq!(Strategy::from_wire_code(s.wire_code()), Some(s));
        }
        assert_eq!(Strategy::parse("nope"), None);
    }

    #[test]
    fn presets_validate() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::vit_b_paper().validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::toy();
        cfg.num_heads = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.image_size = 40;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.num_classes = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toy_lora_specs_cover_encoder_and_decoder() {
        let cfg = ModelConfig::toy();
        let specs = cfg.lora_layer_specs();
        // 2 encoder + 2 blocks x 3 + final token-to-image.
        assert_eq!(specs.len(), 9);
        let ids: Vec<u32> = specs.iter().map(|s| s.layer_id).collect();
        assert_eq!(ids, (1..=9).collect::<Vec<u32>>());
        assert_eq!(cfg.max_lora_rank(), 4);
    }

    #[test]
    fn vit_b_lora_specs_give_reference_per_rank_size() {
        let cfg = ModelConfig::vit_b_paper();
        let specs = cfg.lora_layer_specs();
        assert_eq!(specs.len(), 19);
        let per_rank: usize = specs.iter().map(|s| 2 * (s.d_out + s.d_in)).sum();
        assert_eq!(per_rank, 42_752);
        assert!(cfg.max_lora_rank() >= 32);
    }

    #[test]
    fn plan_names_are_unique_and_groups_partition() {
        for cfg in [ModelConfig::toy(), ModelConfig::vit_b_paper()] {
            let plan = shape_plan(&cfg);
            let mut names = std::collections::HashSet::new();
            for e in &plan {
                assert!(names.insert(e.name.clone()), "duplicate {}", e.name);
            }
            let total: u64 = plan.iter().map(|e| e.numel() as u64).sum();
            let by_group: u64 = ParamGroup::ALL
                .iter()
                .map(|&g| {
                    plan.iter()
                        .filter(|e| e.group == g)
                        .map(|e| e.numel() as u64)
                        .sum::<u64>()
                })
                .sum();
            assert_eq!(total, by_group);
        }
    }

    #[test]
    fn trainable_params_enforces_adapter_pairing() {
        let cfg = ModelConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = build_model(&cfg, &mut rng).unwrap();
        let adapters = init_adapter_set(&cfg, 2, 1.0, &mut rng).unwrap();

        assert!(trainable_params(&model.registry, Strategy::LoraFt, None).is_err());
        assert!(trainable_params(&model.registry, Strategy::FullFt, Some(&adapters)).is_err());

        let full = trainable_params(&model.registry, Strategy::FullFt, None).unwrap();
        assert_eq!(full.len(), model.registry.len());

        let lora = trainable_params(&model.registry, Strategy::LoraFt, Some(&adapters)).unwrap();
        assert!(lora.is_empty());

        let pdec = trainable_params(&model.registry, Strategy::PDecFt, None).unwrap();
        assert!(!pdec.is_empty());
        for i in pdec {
            let g = model.registry.by_idx(i).group;
            assert!(g == ParamGroup::MdUp || g == ParamGroup::MdHyp);
        }
    }
}
