//! Experiment runner: local / federated / centralized settings over
//! synthetic multi-site data, with results tables, communication ledgers,
//! and round transcripts written as reproducible, hash-stamped files.

use crate::comm::{payload_bytes, CommLedger};
use crate::fed::{init_federation, materialize_global_model, run_round, RoundRecord, WeightMode};
use crate::model::{
    build_model, count_params, init_adapter_set, ModelConfig, ModelError, Strategy,
};
use crate::rngutil;
use crate::training::{
    default_site_params, evaluate_dice, gen_site, train_local, AdamParams, AdamState,
    LossWeights, SyntheticSite, TrainError, TrainSettings,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training divergence: {0}")]
    Divergence(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

impl RunError {
    /// Process exit code contract: 2 config, 3 divergence, 4 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Divergence(_) => 3,
            RunError::Io(_) => 4,
            RunError::Internal(_) => 1,
        }
    }
}

impl From<TrainError> for RunError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => RunError::Divergence(e.to_string()),
            TrainError::DegenerateSite(_) => RunError::Config(e.to_string()),
            TrainError::Io(io) => RunError::Io(io),
            other => RunError::Internal(other.to_string()),
        }
    }
}

impl From<ModelError> for RunError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => RunError::Config(e.to_string()),
            other => RunError::Internal(other.to_string()),
        }
    }
}

impl From<crate::fed::ProtocolError> for RunError {
    fn from(e: crate::fed::ProtocolError) -> Self {
        match e {
            crate::fed::ProtocolError::ClientDiverged { .. } => {
                RunError::Divergence(e.to_string())
            }
            other => RunError::Internal(other.to_string()),
        }
    }
}

/// Where the training data lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    Local,
    Federated,
    Centralized,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::Local, Setting::Federated, Setting::Centralized];

    pub fn as_str(&self) -> &'static str {
        match self {
            Setting::Local => "local",
            Setting::Federated => "federated",
            Setting::Centralized => "centralized",
        }
    }

    pub fn parse(s: &str) -> Option<Setting> {
        Setting::ALL.iter().copied().find(|x| x.as_str() == s)
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Full description of one run. Serialized verbatim into every output file.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub setting: Setting,
    pub strategy: Strategy,
    pub rank: usize,
    pub sites: usize,
    pub train_per_site: usize,
    pub test_per_site: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub seed: u64,
    pub model: String,
    pub batch_size: usize,
    pub lr: f64,
    pub lora_scale: f64,
    /// Divide the forward scale by the rank (off by default).
    pub scale_by_rank: bool,
    pub uniform_weights: bool,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            setting: Setting::Federated,
            strategy: Strategy::FlapSam,
            rank: 4,
            sites: 3,
            train_per_site: 8,
            test_per_site: 8,
            rounds: 30,
            local_steps: 10,
            seed: 42,
            model: "toy".to_string(),
            batch_size: 32,
            lr: 1e-3,
            lora_scale: 1.0,
            scale_by_rank: false,
            uniform_weights: false,
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn model_config(&self) -> Result<ModelConfig, RunError> {
        ModelConfig::preset(&self.model)
            .ok_or_else(|| RunError::Config(format!("unknown model config '{}'", self.model)))
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let cfg = self.model_config()?;
        cfg.validate()?;
        if self.sites == 0 {
            return Err(RunError::Config("sites must be >= 1".to_string()));
        }
        if self.train_per_site == 0 || self.test_per_site == 0 {
            return Err(RunError::Config(
                "train_per_site and test_per_site must be >= 1".to_string(),
            ));
        }
        if self.rounds == 0 || self.local_steps == 0 {
            return Err(RunError::Config(
                "rounds and local_steps must be >= 1".to_string(),
            ));
        }
        if self.batch_size == 0 {
            return Err(RunError::Config("batch_size must be >= 1".to_string()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(RunError::Config(format!("invalid lr {}", self.lr)));
        }
        if !(self.lora_scale.is_finite() && self.lora_scale > 0.0) {
            return Err(RunError::Config(format!(
                "invalid lora_scale {}",
                self.lora_scale
            )));
        }
        if self.strategy.uses_lora() {
            let max = cfg.max_lora_rank();
            if self.rank == 0 || self.rank > max {
                return Err(RunError::Config(format!(
                    "rank {} outside [1, {max}] for model '{}'",
                    self.rank, self.model
                )));
            }
        }
        Ok(())
    }

    /// Effective adapter forward scale.
    pub fn effective_scale(&self) -> f64 {
        if self.scale_by_rank {
            self.lora_scale / self.rank as f64
        } else {
            self.lora_scale
        }
    }

    /// Stable key=value rendering; the config hash covers exactly this.
    pub fn canonical_string(&self) -> String {
        format!(
            "setting={} strategy={} rank={} sites={} train_per_site={} test_per_site={} \
             rounds={} local_steps={} seed={} model={} batch_size={} lr={} lora_scale={} \
             scale_by_rank={} uniform_weights={}",
            self.setting,
            self.strategy,
            self.rank,
            self.sites,
            self.train_per_site,
            self.test_per_site,
            self.rounds,
            self.local_steps,
            self.seed,
            self.model,
            self.batch_size,
            self.lr,
            self.lora_scale,
            self.scale_by_rank,
            self.uniform_weights,
        )
    }

    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical_string().as_bytes());
        hex(&h.finalize())
    }

    fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            steps: self.rounds * self.local_steps,
            batch_size: self.batch_size,
            adam: AdamParams {
                lr: self.lr,
                ..AdamParams::default()
            },
            loss: LossWeights::default(),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(2 * bytes.len());
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Content hash of the running executable, git-blob style over its bytes.
pub fn binary_content_hash() -> String {
    match std::env::current_exe().and_then(std::fs::read) {
        Ok(bytes) => {
            let mut h = Sha256::new();
            h.update(format!("blob {}\0", bytes.len()).as_bytes());
            h.update(&bytes);
            hex(&h.finalize())
        }
        Err(_) => "unavailable".to_string(),
    }
}

#[derive(Debug, Clone)]
pub struct SiteScore {
    pub site: u32,
    pub dice: f64,
}

/// Everything a run produces, before any file is written.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub per_site: Vec<SiteScore>,
    pub mean_dice: f64,
    pub trainable: u64,
    pub total: u64,
    pub ledger: Option<CommLedger>,
    pub transcript: Option<String>,
    /// Mean train-set Dice per site (same model as the test scores).
    pub per_site_train: Vec<SiteScore>,
}

fn make_sites(cfg: &ExperimentConfig, model_cfg: &ModelConfig) -> Result<Vec<SyntheticSite>, RunError> {
    (0..cfg.sites as u32)
        .map(|k| {
            gen_site(
                rngutil::derive_seed(cfg.seed, &[0xda7a, k as u64]),
                k,
                &default_site_params(k),
                cfg.train_per_site,
                cfg.test_per_site,
                model_cfg,
            )
            .map_err(RunError::from)
        })
        .collect()
}

/// Run one experiment. Local trains one model per site on that site's data
/// alone; centralized pools every site's training data into one model;
/// federated runs the round protocol. All three report per-site test Dice
/// plus the mean, with identical step budgets per trained model.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, RunError> {
    cfg.validate()?;
    let model_cfg = cfg.model_config()?;
    let sites = make_sites(cfg, &model_cfg)?;
    let counts = count_params(&model_cfg, cfg.strategy, cfg.rank, model_cfg.num_classes);

    let mut ledger = None;
    let mut transcript = None;
    let mut per_site = Vec::with_capacity(sites.len());
    let mut per_site_train = Vec::with_capacity(sites.len());

    match cfg.setting {
        Setting::Local => {
            for site in &sites {
                let (model, adapters) = train_one_model(
                    cfg,
                    &model_cfg,
                    &site.train,
                    rngutil::derive_seed(cfg.seed, &[0x10ca1, site.id as u64]),
                )?;
                per_site.push(SiteScore {
                    site: site.id,
                    dice: evaluate_dice(&model, adapters.as_ref(), &site.test)?,
                });
                per_site_train.push(SiteScore {
                    site: site.id,
                    dice: evaluate_dice(&model, adapters.as_ref(), &site.train)?,
                });
            }
        }
        Setting::Centralized => {
            let pooled: Vec<crate::training::Sample> = sites
                .iter()
                .flat_map(|s| s.train.iter().cloned())
                .collect();
            let (model, adapters) = train_one_model(
                cfg,
                &model_cfg,
                &pooled,
                rngutil::derive_seed(cfg.seed, &[0xce47]),
            )?;
            for site in &sites {
                per_site.push(SiteScore {
                    site: site.id,
                    dice: evaluate_dice(&model, adapters.as_ref(), &site.test)?,
                });
                per_site_train.push(SiteScore {
                    site: site.id,
                    dice: evaluate_dice(&model, adapters.as_ref(), &site.train)?,
                });
            }
        }
        Setting::Federated => {
            let client_data: Vec<Vec<crate::training::Sample>> =
                sites.iter().map(|s| s.train.clone()).collect();
            let weight_mode = if cfg.uniform_weights {
                WeightMode::Uniform
            } else {
                WeightMode::SampleProportional
            };
            let (mut server, mut clients) = init_federation(
                &model_cfg,
                cfg.strategy,
                cfg.rank,
                cfg.effective_scale(),
                client_data,
                weight_mode,
                cfg.seed,
            )?;
            let settings = TrainSettings {
                steps: cfg.local_steps,
                batch_size: cfg.batch_size,
                adam: AdamParams {
                    lr: cfg.lr,
                    ..AdamParams::default()
                },
                loss: LossWeights::default(),
            };
            let mut led = CommLedger::new();
            let mut lines = String::new();
            for _ in 0..cfg.rounds {
                let record = run_round(&mut server, &mut clients, cfg.local_steps, &settings)?;
                led.add_round(&record);
                lines.push_str(&transcript_line(&record));
                lines.push('\n');
            }
            let (model, adapters) = materialize_global_model(&server, cfg.seed)?;
            for site in &sites {
                per_site.push(SiteScore {
                    site: site.id,
                    dice: evaluate_dice(&model, adapters.as_ref(), &site.test)?,
                });
                per_site_train.push(SiteScore {
                    site: site.id,
                    dice: evaluate_dice(&model, adapters.as_ref(), &site.train)?,
                });
            }
            ledger = Some(led);
            transcript = Some(lines);
        }
    }

    let mean_dice = per_site.iter().map(|s| s.dice).sum::<f64>() / per_site.len() as f64;
    let outcome = ExperimentOutcome {
        config: cfg.clone(),
        per_site,
        mean_dice,
        trainable: counts.trainable,
        total: counts.total,
        ledger,
        transcript,
        per_site_train,
    };
    if let Some(dir) = &cfg.out {
        write_outputs(&outcome, dir)?;
    }
    Ok(outcome)
}

fn train_one_model(
    cfg: &ExperimentConfig,
    model_cfg: &ModelConfig,
    data: &[crate::training::Sample],
    train_seed: u64,
) -> Result<(crate::model::ToyModel, Option<crate::adapters::AdapterSet>), RunError> {
    // Same base init as the federation so settings differ only in data flow.
    let mut model_rng =
        ChaCha8Rng::seed_from_u64(rngutil::derive_seed(cfg.seed, &[0x0de1]));
    let mut model = build_model(model_cfg, &mut model_rng)?;
    let mut adapters = if cfg.strategy.uses_lora() {
        let mut ad_rng =
            ChaCha8Rng::seed_from_u64(rngutil::derive_seed(cfg.seed, &[0xada9]));
        Some(init_adapter_set(model_cfg, cfg.rank, cfg.effective_scale(), &mut ad_rng)?)
    } else {
        None
    };
    let mut state = AdamState::new(&model, cfg.strategy, adapters.as_ref());
    let mut rng = ChaCha8Rng::seed_from_u64(train_seed);
    train_local(
        &mut model,
        &mut adapters,
        cfg.strategy,
        data,
        &cfg.train_settings(),
        &mut state,
        &mut rng,
    )?;
    Ok((model, adapters))
}

/// One stable line per round: bytes per client, per-layer re-factorization
/// residuals, and the aggregate update norm. Wall-clock duration is kept
/// out of the file so reruns are byte-identical.
pub fn transcript_line(record: &RoundRecord) -> String {
    let mut s = format!("round={}", record.round);
    for cb in &record.per_client {
        let _ = write!(
            s,
            " client{}:up={},down={}",
            cb.client, cb.bytes_up, cb.bytes_down
        );
    }
    for r in &record.residuals {
        let _ = write!(
            s,
            " svd_residual[{}.{}]={:e}",
            r.layer_id,
            r.target.as_str(),
            r.residual
        );
    }
    let _ = write!(s, " update_norm={:e}", record.update_norm);
    if let Some(l) = record.mean_client_loss {
        let _ = write!(s, " mean_loss={:e}", l);
    }
    s
}

fn metadata_lines(cfg: &ExperimentConfig) -> String {
    format!(
        "# config: {}\n# config_hash: {}\n# seed: {}\n# binary_hash: {}\n",
        cfg.canonical_string(),
        cfg.hash_hex(),
        cfg.seed,
        binary_content_hash()
    )
}

/// Machine-readable results: metadata comments, then site,dice rows and a
/// trailing mean row plus the parameter counts.
pub fn results_csv(outcome: &ExperimentOutcome) -> String {
    let mut out = metadata_lines(&outcome.config);
    out.push_str("site,dice\n");
    for s in &outcome.per_site {
        let _ = writeln!(out, "site{},{}", s.site, s.dice);
    }
    let _ = writeln!(out, "mean,{}", outcome.mean_dice);
    let _ = writeln!(out, "trainable,{}", outcome.trainable);
    let _ = writeln!(out, "total,{}", outcome.total);
    out
}

/// Parse a results CSV back into (label, value) pairs; inverse of
/// `results_csv` up to the metadata comments.
pub fn parse_results_csv(text: &str) -> Result<Vec<(String, f64)>, RunError> {
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.is_empty() || line == "site,dice" {
            continue;
        }
        let (label, value) = line
            .split_once(',')
            .ok_or_else(|| RunError::Internal(format!("bad results row '{line}'")))?;
        let v: f64 = value
            .parse()
            .map_err(|_| RunError::Internal(format!("bad results value '{value}'")))?;
        rows.push((label.to_string(), v));
    }
    Ok(rows)
}

/// Aligned human-readable table.
pub fn results_text(outcome: &ExperimentOutcome) -> String {
    let mut out = metadata_lines(&outcome.config);
    let cfg = &outcome.config;
    let _ = writeln!(
        out,
        "setting={} strategy={} rank={} trainable={} total={} ({:.2}%)",
        cfg.setting,
        cfg.strategy,
        cfg.rank,
        outcome.trainable,
        outcome.total,
        100.0 * outcome.trainable as f64 / outcome.total as f64
    );
    let _ = writeln!(out, "{:<10} {:>10}", "site", "dice");
    for s in &outcome.per_site {
        let _ = writeln!(out, "{:<10} {:>10.4}", format!("site{}", s.site), s.dice);
    }
    let _ = writeln!(out, "{:<10} {:>10.4}", "mean", outcome.mean_dice);
    if let Some(ledger) = &outcome.ledger {
        let _ = writeln!(out, "total_exchanged_bytes={}", ledger.total_bytes());
    }
    out
}

/// Write results (text + CSV) and, for federated runs, the ledger CSV and
/// the round transcript.
pub fn write_outputs(outcome: &ExperimentOutcome, dir: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("results.txt"), results_text(outcome))?;
    std::fs::write(dir.join("results.csv"), results_csv(outcome))?;
    if let Some(ledger) = &outcome.ledger {
        let mut csv = metadata_lines(&outcome.config);
        csv.push_str(&ledger.to_csv());
        std::fs::write(dir.join("ledger.csv"), csv)?;
    }
    if let Some(t) = &outcome.transcript {
        let mut log = metadata_lines(&outcome.config);
        log.push_str(t);
        std::fs::write(dir.join("transcript.log"), log)?;
    }
    Ok(())
}

/// Ablation over adapter ranks: one federated run per rank plus the
/// full-scale reference counts at that rank.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub rank: usize,
    pub mean_dice: f64,
    pub reference_trainable: u64,
    pub reference_total: u64,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub config: ExperimentConfig,
    pub rows: Vec<AblationRow>,
}

pub fn run_ablation(cfg: &ExperimentConfig, ranks: &[usize]) -> Result<AblationOutcome, RunError> {
    if !cfg.strategy.uses_lora() {
        return Err(RunError::Config(format!(
            "rank ablation requires an adapter strategy, got {}",
            cfg.strategy
        )));
    }
    if ranks.is_empty() {
        return Err(RunError::Config("empty rank list".to_string()));
    }
    let reference = ModelConfig::vit_b_paper();
    let mut rows = Vec::with_capacity(ranks.len());
    for &rank in ranks {
        let mut sub = cfg.clone();
        sub.rank = rank;
        sub.out = cfg.out.as_ref().map(|d| d.join(format!("rank{rank}")));
        let outcome = run_experiment(&sub)?;
        let counts = count_params(&reference, cfg.strategy, rank, 3);
        rows.push(AblationRow {
            rank,
            mean_dice: outcome.mean_dice,
            reference_trainable: counts.trainable,
            reference_total: counts.total,
        });
    }
    let outcome = AblationOutcome {
        config: cfg.clone(),
        rows,
    };
    if let Some(dir) = &cfg.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.csv"), ablation_csv(&outcome))?;
        std::fs::write(dir.join("ablation.txt"), ablation_text(&outcome))?;
    }
    Ok(outcome)
}

pub fn ablation_csv(outcome: &AblationOutcome) -> String {
    let mut out = metadata_lines(&outcome.config);
    out.push_str("rank,mean_dice,reference_trainable,reference_total\n");
    for r in &outcome.rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.rank, r.mean_dice, r.reference_trainable, r.reference_total
        );
    }
    out
}

pub fn ablation_text(outcome: &AblationOutcome) -> String {
    let mut out = metadata_lines(&outcome.config);
    let _ = writeln!(
        out,
        "{:<6} {:>10} {:>22} {:>16}",
        "rank", "mean dice", "reference trainable", "reference total"
    );
    for r in &outcome.rows {
        let _ = writeln!(
            out,
            "{:<6} {:>10.4} {:>22} {:>16}",
            r.rank, r.mean_dice, r.reference_trainable, r.reference_total
        );
    }
    out
}

/// Strategy-by-strategy parameter and communication table at the reference
/// scale; the `counts` CLI subcommand prints this.
pub fn counts_table(rank: usize, num_classes: usize) -> String {
    let cfg = ModelConfig::vit_b_paper();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>12} {:>12} {:>8} {:>14} {:>12}",
        "strategy", "trainable", "total", "pct", "payload_bytes", "vs_full_ft"
    );
    let full = count_params(&cfg, Strategy::FullFt, rank, num_classes).trainable;
    for s in Strategy::ALL {
        let c = count_params(&cfg, s, rank, num_classes);
        let p = payload_bytes(&cfg, s, rank, num_classes);
        let _ = writeln!(
            out,
            "{:<12} {:>12} {:>12} {:>7.2}% {:>14} {:>11.2}x",
            s.as_str(),
            c.trainable,
            c.total,
            100.0 * c.trainable as f64 / c.total as f64,
            p.total(),
            full as f64 / c.trainable as f64
        );
    }
    out
}
