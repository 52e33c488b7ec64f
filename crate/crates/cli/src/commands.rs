//! Subcommand implementations. Every command is deterministic given its
//! effective config and writes that config (with digest) next to its
//! outputs.

use std::path::{Path, PathBuf};

use clap::Args;
use preflab_core::certify::{run_certificates, CertificateReport};
use preflab_core::config::{LossConfig, LossVariant, WeakSource};
use preflab_core::datagen::{
    attach_weak_negatives, build_world, sample_preferences, SamplingScheme, WeakAttachMode,
};
use preflab_core::diagnostics::{frontier_csv, kl_reward_frontier, trajectory_csv};
use preflab_core::io::{
    check_dataset_world, load_dataset, load_world, save_dataset, save_policy, save_world,
    world_hash_hex,
};
use preflab_core::trainer::{train, Optimizer, TrainConfig};
use preflab_core::{validate_world, Error, Result, Tricks, World};

use crate::config::{
    check_out_dir, config_digest, load_config_file, pick, pick_opt, write_effective,
    CertifyCliConfig, FrontierCliConfig, FrontierCliConfigFile, GenConfig, GenConfigFile,
    TrainCliConfig, TrainCliConfigFile,
};

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub prompts: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub records: Option<usize>,
    /// Sampling scheme: best-of-k, explicit or degenerate.
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n_strong: Option<usize>,
    /// Response the degenerate scheme must never sample.
    #[arg(long)]
    pub y_star: Option<usize>,
    #[arg(long)]
    pub reward_spread: Option<f64>,
    #[arg(long)]
    pub weak_floor: Option<f64>,
    /// Weak negatives to attach per record (0 = none).
    #[arg(long)]
    pub n_weak: Option<usize>,
    /// Attachment mode: precomputed or in-batch.
    #[arg(long)]
    pub weak_mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn cmd_gen(args: GenArgs) -> Result<i32> {
    check_out_dir(&args.out)?;
    let file: GenConfigFile = load_config_file(&args.config)?.unwrap_or_default();

    let scheme_name = pick(args.scheme, file.scheme, "best-of-k".to_string());
    let k = pick(args.k, file.k, 4);
    let default_strong = if scheme_name == "best-of-k" { k - 1 } else { 1 };
    let cfg = GenConfig {
        prompts: pick(args.prompts, file.prompts, 8),
        vocab: pick(args.vocab, file.vocab, 32),
        records: pick(args.records, file.records, 256),
        scheme: scheme_name,
        k,
        n_strong: pick(args.n_strong, file.n_strong, default_strong),
        y_star: pick_opt(args.y_star, file.y_star),
        reward_spread: pick(args.reward_spread, file.reward_spread, 3.0),
        weak_floor: pick(args.weak_floor, file.weak_floor, -8.0),
        n_weak: pick(args.n_weak, file.n_weak, 0),
        weak_mode: pick(args.weak_mode, file.weak_mode, "precomputed".to_string()),
        seed: pick(args.seed, file.seed, 0),
    };
    let digest = config_digest(&cfg);

    let world = build_world(
        cfg.seed,
        cfg.prompts,
        cfg.vocab,
        cfg.reward_spread,
        cfg.weak_floor,
    )?;
    let scheme = match cfg.scheme.as_str() {
        "best-of-k" => SamplingScheme::BestOfK {
            k: cfg.k,
            on_topic_min_reward: Some(-cfg.reward_spread),
            label_temperature: None,
        },
        "explicit" => SamplingScheme::explicit_uniform(&world)?,
        "degenerate" => {
            let y_star = cfg
                .y_star
                .ok_or_else(|| Error::config("scheme degenerate requires --y-star"))?;
            SamplingScheme::degenerate_uniform(&world, y_star)?
        }
        other => return Err(Error::config(format!("unknown scheme {other:?}"))),
    };

    let mut dataset = sample_preferences(&world, &scheme, cfg.records, cfg.n_strong, cfg.seed)?;
    if cfg.n_weak > 0 {
        let mode = match cfg.weak_mode.as_str() {
            "precomputed" => WeakAttachMode::Precomputed,
            "in-batch" => WeakAttachMode::InBatchMarker,
            other => return Err(Error::config(format!("unknown weak mode {other:?}"))),
        };
        dataset = attach_weak_negatives(&dataset, &world, cfg.n_weak, mode, cfg.seed)?;
    }

    save_world(&world, &args.out.join("world.json"))?;
    save_dataset(&dataset, &args.out.join("dataset.jsonl"))?;
    write_effective(&cfg, &digest, &args.out.join("gen_config.json"))?;
    println!(
        "gen: wrote world.json (P={}, V={}) and dataset.jsonl ({} records) to {}",
        world.n_prompts(),
        world.n_responses(),
        dataset.len(),
        args.out.display()
    );
    Ok(0)
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Loss: dpo, epa, epa-general, ipo or dpo-pl.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub n_weak: Option<usize>,
    /// Weak sourcing for epa-general: in-batch or precomputed.
    #[arg(long)]
    pub weak_source: Option<String>,
    /// Constant margin added to each strong negative's reward.
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub ipo_tau: Option<f64>,
    /// Comma list: remove-ref, sft=F, len-p=F, len-n, w-op.
    #[arg(long)]
    pub tricks: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Optimizer: adam or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Re-check analytic gradients against finite differences during the run.
    #[arg(long)]
    pub audit: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn parse_tricks(spec: &str) -> Result<Tricks> {
    let mut tricks = Tricks::default();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match item.split_once('=') {
            None => match item {
                "remove-ref" => tricks.remove_ref = true,
                "len-n" => tricks.len_normalize = true,
                "w-op" => tricks.on_policy_weight = true,
                other => return Err(Error::config(format!("unknown trick {other:?}"))),
            },
            Some((key, value)) => {
                let value: f64 = value
                    .parse()
                    .map_err(|_| Error::config(format!("trick {key}: bad value {value:?}")))?;
                match key {
                    "sft" => tricks.sft_coef = value,
                    "len-p" => tricks.len_penalty_alpha = value,
                    other => return Err(Error::config(format!("unknown trick {other:?}"))),
                }
            }
        }
    }
    Ok(tricks)
}

fn parse_loss(name: &str) -> Result<LossVariant> {
    Ok(match name {
        "dpo" => LossVariant::Dpo,
        "epa" => LossVariant::EpaNarrow,
        "epa-general" => LossVariant::EpaGeneral,
        "ipo" => LossVariant::Ipo,
        "dpo-pl" => LossVariant::DpoPl,
        other => return Err(Error::config(format!("unknown loss {other:?}"))),
    })
}

fn parse_optimizer(name: &str) -> Result<Optimizer> {
    Ok(match name {
        "adam" => Optimizer::adam_default(),
        "sgd" => Optimizer::Sgd,
        other => return Err(Error::config(format!("unknown optimizer {other:?}"))),
    })
}

fn loss_config_from(cfg: &TrainCliConfig) -> Result<LossConfig> {
    let mut loss = LossConfig::new(parse_loss(&cfg.loss)?, cfg.beta);
    loss.n_weak = cfg.n_weak;
    loss.weak_source = match cfg.weak_source.as_str() {
        "in-batch" => WeakSource::InBatch,
        "precomputed" => WeakSource::Precomputed,
        other => return Err(Error::config(format!("unknown weak source {other:?}"))),
    };
    if loss.variant == LossVariant::EpaNarrow {
        loss.weak_source = WeakSource::InBatch;
    }
    loss.margin_mc = cfg.margin;
    loss.ipo_tau = cfg.ipo_tau;
    loss.tricks = parse_tricks(&cfg.tricks)?;
    Ok(loss)
}

fn load_world_and_dataset(
    world_path: &Path,
    dataset_path: &Path,
) -> Result<(World, preflab_core::Dataset)> {
    let world = load_world(world_path)?;
    let violations = validate_world(&world);
    if !violations.is_empty() {
        return Err(Error::data(format!(
            "world file invalid: {}",
            violations.join("; ")
        )));
    }
    let dataset = load_dataset(dataset_path)?;
    check_dataset_world(&dataset, &world)?;
    dataset.validate(&world)?;
    Ok((world, dataset))
}

pub fn cmd_train(args: TrainArgs) -> Result<i32> {
    check_out_dir(&args.out)?;
    let file: TrainCliConfigFile = load_config_file(&args.config)?.unwrap_or_default();

    let world_path = pick_opt(args.world, file.world)
        .ok_or_else(|| Error::config("train requires --world"))?;
    let dataset_path = pick_opt(args.dataset, file.dataset)
        .ok_or_else(|| Error::config("train requires --dataset"))?;
    let cfg = TrainCliConfig {
        world: world_path,
        dataset: dataset_path,
        loss: pick(args.loss, file.loss, "dpo".to_string()),
        beta: pick(args.beta, file.beta, 0.01),
        n_weak: pick(args.n_weak, file.n_weak, 0),
        weak_source: pick(args.weak_source, file.weak_source, "precomputed".to_string()),
        margin: pick(args.margin, file.margin, 0.0),
        ipo_tau: pick(args.ipo_tau, file.ipo_tau, 0.5),
        tricks: pick(args.tricks, file.tricks, String::new()),
        lr: pick(args.lr, file.lr, 1e-2),
        steps: pick(args.steps, file.steps, 1000),
        batch_size: pick(args.batch_size, file.batch_size, 32),
        optimizer: pick(args.optimizer, file.optimizer, "adam".to_string()),
        checkpoint_every: pick(args.checkpoint_every, file.checkpoint_every, 100),
        audit: args.audit || file.audit.unwrap_or(false),
        seed: pick(args.seed, file.seed, 0),
    };
    let digest = config_digest(&cfg);

    let (world, dataset) = load_world_and_dataset(&cfg.world, &cfg.dataset)?;
    let loss_config = loss_config_from(&cfg)?;
    let train_config = TrainConfig {
        learning_rate: cfg.lr,
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        optimizer: parse_optimizer(&cfg.optimizer)?,
        checkpoint_every: cfg.checkpoint_every,
        audit_gradients: cfg.audit,
    };

    let (policy, trajectory) = train(&world, &dataset, &loss_config, &train_config)?;

    save_policy(
        &policy,
        &world_hash_hex(&world),
        &digest,
        &args.out.join("policy.json"),
    )?;
    std::fs::write(
        args.out.join("trajectory.csv"),
        trajectory_csv(&world, cfg.beta, &trajectory, &digest)?,
    )?;
    write_effective(&cfg, &digest, &args.out.join("train_config.json"))?;
    let last_loss = trajectory.points.last().map(|p| p.loss);
    println!(
        "train: {} steps of {} done{}",
        cfg.steps,
        loss_config.variant.name(),
        match last_loss {
            Some(l) => format!(", final batch loss {l:.6}"),
            None => String::new(),
        }
    );
    Ok(0)
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    /// Optional world file to validate before certifying.
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Optional dataset; its recorded hash must match the world.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Comma list of certificate names to run (default: all fast ones).
    #[arg(long)]
    pub only: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn cmd_certify(args: CertifyArgs) -> Result<i32> {
    check_out_dir(&args.out)?;
    let file: Option<CertifyCliConfig> = load_config_file(&args.config)?;
    let cfg = CertifyCliConfig {
        world: args.world.or(file.as_ref().and_then(|f| f.world.clone())),
        dataset: args
            .dataset
            .or(file.as_ref().and_then(|f| f.dataset.clone())),
        only: args.only.or(file.as_ref().and_then(|f| f.only.clone())),
        seed: args.seed.or(file.as_ref().map(|f| f.seed)).unwrap_or(0),
    };
    let digest = config_digest(&cfg);

    // Integrity checks on supplied files come first.
    if let Some(world_path) = &cfg.world {
        let world = load_world(world_path)?;
        let violations = validate_world(&world);
        if !violations.is_empty() {
            return Err(Error::data(format!(
                "world file invalid: {}",
                violations.join("; ")
            )));
        }
        if let Some(dataset_path) = &cfg.dataset {
            let dataset = load_dataset(dataset_path)?;
            check_dataset_world(&dataset, &world)?;
        }
    } else if cfg.dataset.is_some() {
        return Err(Error::config("--dataset requires --world for the hash check"));
    }

    let names: Option<Vec<String>> = cfg
        .only
        .as_ref()
        .map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let report = run_certificates(names.as_deref(), cfg.seed)?;
    write_report(&report, &digest, &args.out)?;

    for cert in &report.certificates {
        println!(
            "certify: {:<24} {}",
            cert.name,
            if cert.pass { "pass" } else { "FAIL" }
        );
    }
    Ok(if report.all_pass { 0 } else { 3 })
}

fn write_report(report: &CertificateReport, digest: &str, out: &std::path::Path) -> Result<()> {
    #[derive(serde::Serialize)]
    struct FileReport<'a> {
        config_digest: &'a str,
        #[serde(flatten)]
        report: &'a CertificateReport,
    }
    let wrapped = FileReport {
        config_digest: digest,
        report,
    };
    std::fs::write(
        out.join("certificates.json"),
        serde_json::to_string_pretty(&wrapped)? + "\n",
    )?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct FrontierArgs {
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Comma list of methods (dpo, epa, epa-general, ipo, dpo-pl).
    #[arg(long)]
    pub methods: Option<String>,
    /// Comma list of betas, e.g. 0.01,0.05,0.1,0.5.
    #[arg(long)]
    pub betas: Option<String>,
    #[arg(long)]
    pub n_weak: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn cmd_frontier(args: FrontierArgs) -> Result<i32> {
    check_out_dir(&args.out)?;
    let file: FrontierCliConfigFile = load_config_file(&args.config)?.unwrap_or_default();

    let world_path = pick_opt(args.world, file.world)
        .ok_or_else(|| Error::config("frontier requires --world"))?;
    let dataset_path = pick_opt(args.dataset, file.dataset)
        .ok_or_else(|| Error::config("frontier requires --dataset"))?;
    let cfg = FrontierCliConfig {
        world: world_path,
        dataset: dataset_path,
        methods: pick(args.methods, file.methods, "dpo,epa".to_string()),
        betas: pick(
            args.betas,
            file.betas,
            "0.01,0.02,0.03,0.04,0.05,0.1,0.5".to_string(),
        ),
        n_weak: pick(args.n_weak, file.n_weak, 2),
        lr: pick(args.lr, file.lr, 1e-2),
        steps: pick(args.steps, file.steps, 1000),
        batch_size: pick(args.batch_size, file.batch_size, 32),
        optimizer: pick(args.optimizer, file.optimizer, "adam".to_string()),
        seed: pick(args.seed, file.seed, 0),
    };
    let digest = config_digest(&cfg);

    let (world, dataset) = load_world_and_dataset(&cfg.world, &cfg.dataset)?;
    let betas: Vec<f64> = cfg
        .betas
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad beta {s:?}")))
        })
        .collect::<Result<_>>()?;
    let train_config = TrainConfig {
        learning_rate: cfg.lr,
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        optimizer: parse_optimizer(&cfg.optimizer)?,
        checkpoint_every: cfg.steps.max(1),
        audit_gradients: false,
    };

    let mut all_points = Vec::new();
    let mut any_failure = false;
    for method in cfg.methods.split(',').map(str::trim) {
        let variant = parse_loss(method)?;
        let mut template = LossConfig::new(variant, 0.1);
        if variant == LossVariant::EpaNarrow || variant == LossVariant::EpaGeneral {
            template.n_weak = cfg.n_weak;
            template.weak_source = WeakSource::InBatch;
        }
        let report = kl_reward_frontier(&world, &dataset, &template, &betas, &train_config)?;
        for (beta, message) in &report.failures {
            any_failure = true;
            eprintln!("frontier: {method} at beta={beta} failed: {message}");
        }
        all_points.extend(report.points);
    }

    if all_points.is_empty() {
        return Err(Error::config("frontier produced no points"));
    }
    std::fs::write(
        args.out.join("frontier.csv"),
        frontier_csv(&all_points, &digest),
    )?;
    write_effective(&cfg, &digest, &args.out.join("frontier_config.json"))?;
    println!(
        "frontier: {} points written{}",
        all_points.len(),
        if any_failure { " (partial)" } else { "" }
    );
    Ok(0)
}
