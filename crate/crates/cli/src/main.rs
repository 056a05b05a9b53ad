//! `srav`: the spoofing-robust speaker verification pipeline.
//!
//! Subcommands compose the full tandem system: `synth` builds a seeded
//! synthetic corpus, `extract` caches time-frequency features, `train` fits
//! the multi-task network, `embed`/`plda`/`score-asv` run the speaker
//! back-end, `score-sd` produces detection scores, `eval` computes EER and
//! t-DCF, and `fuse` combines systems.
//!
//! Exit codes: 0 success, 2 usage error, 1 data/processing error.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use srav_core::backend::{
    read_backend_ctx, read_embeddings, read_plda, write_backend_ctx, write_embeddings, write_plda,
};
use srav_core::feat::{read_feature_cache, read_manifest, CqtParams, FeatureKind, LlfbParams};
use srav_core::fusion::{read_fusion_model, write_fusion_model};
use srav_core::net::{load_checkpoint, save_checkpoint, MtlNetwork, NetConfig};
use srav_core::pipeline::{
    asv_score_set, backend_train, build_dataset, embed_manifest, evaluate, extract_features,
    fuse_score_files, apply_fusion_to_files, score_asv, score_sd, sd_det_csv, sd_score_set,
    BackendModel, ExtractionConfig, FrontEnd,
};
use srav_core::proto::{
    gen_synth_corpus, parse_asv_trials, parse_cm_protocol, parse_enroll_list, read_score_file,
    speaker_map, write_score_file, SynthCorpusSpec,
};
use srav_core::train::{parse_key_values, train_loop, write_train_log, TrainConfig};
use srav_core::metrics::TdcfParams;

#[derive(Parser)]
#[command(name = "srav", version, about = "Spoofing-robust speaker verification at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Features {
    Cqt,
    Llfb,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seeded synthetic corpus (WAVs, protocols, trials).
    Synth(SynthArgs),
    /// Extract unified time-frequency features for a protocol.
    Extract(ExtractArgs),
    /// Train the multi-task network.
    Train(TrainArgs),
    /// Extract speaker embeddings for a manifest.
    Embed(EmbedArgs),
    /// Train the PLDA back-end on labeled embeddings.
    Plda(PldaArgs),
    /// Score ASV trials with PLDA and adaptive s-norm.
    ScoreAsv(ScoreAsvArgs),
    /// Score spoofing detection for a protocol.
    ScoreSd(ScoreSdArgs),
    /// Evaluate EER and tandem detection cost.
    Eval(EvalArgs),
    /// Fuse score files with logistic regression.
    Fuse(FuseArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    speakers: usize,
    #[arg(long, default_value_t = 4)]
    eval_speakers: usize,
    #[arg(long, default_value_t = 6)]
    utts: usize,
    #[arg(long, default_value_t = 2)]
    dev_utts: usize,
    #[arg(long, default_value_t = 3)]
    enroll_utts: usize,
    #[arg(long, default_value_t = 3)]
    test_utts: usize,
    #[arg(long, default_value_t = 1.2)]
    duration: f64,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long, value_enum)]
    features: Features,
    #[arg(long)]
    protocol: PathBuf,
    #[arg(long)]
    wav_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Constant-Q octave count (9 is the full grid, 8 the desk-scale one).
    #[arg(long, default_value_t = 9)]
    cqt_octaves: u32,
    /// Constant-Q bins per octave (96 full, 10 desk-scale).
    #[arg(long, default_value_t = 96)]
    cqt_bins: u32,
    /// Standardize each frequency bin over time per utterance.
    #[arg(long, default_value_t = false)]
    mean_var_norm: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    protocol: PathBuf,
    #[arg(long)]
    dev_manifest: PathBuf,
    #[arg(long)]
    dev_protocol: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Plain-text key=value training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation: train the spoofing-detection head only.
    #[arg(long, default_value_t = false)]
    disable_asv_head: bool,
    /// Warm-start the shared trunk from an existing checkpoint.
    #[arg(long)]
    init_trunk: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PldaArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    protocol: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Backend context (centering mean + s-norm cohort) output path.
    #[arg(long)]
    backend_out: PathBuf,
    #[arg(long, default_value_t = 10)]
    iters: usize,
}

#[derive(Args)]
struct ScoreAsvArgs {
    #[arg(long)]
    plda: PathBuf,
    #[arg(long)]
    backend: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    enroll: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreSdArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    protocol: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Spoofing-detection score file.
    #[arg(long)]
    scores: PathBuf,
    /// ASV score file; enables t-DCF and the per-attack table.
    #[arg(long)]
    asv_scores: Option<PathBuf>,
    /// CM protocol for attack labels in the per-attack breakdown.
    #[arg(long)]
    protocol: Option<PathBuf>,
    /// Report directory (CSV + DET points).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FuseArgs {
    /// Score files to fuse (repeat per system).
    #[arg(long, required = true)]
    scores: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Where to store the fitted fusion model.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Apply an existing model instead of fitting.
    #[arg(long)]
    apply: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Train(a) => cmd_train(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Plda(a) => cmd_plda(a),
        Command::ScoreAsv(a) => cmd_score_asv(a),
        Command::ScoreSd(a) => cmd_score_sd(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Fuse(a) => cmd_fuse(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SynthCorpusSpec {
        seed: a.seed,
        n_speakers: a.speakers,
        n_eval_speakers: a.eval_speakers,
        utts_per_speaker: a.utts,
        dev_utts_per_speaker: a.dev_utts,
        eval_enroll_utts: a.enroll_utts,
        eval_test_utts: a.test_utts,
        duration_s: a.duration,
        ..SynthCorpusSpec::default()
    };
    let layout = gen_synth_corpus(&spec, &a.out)?;
    println!("corpus written to {}", layout.root.display());
    Ok(())
}

fn front_end(features: Features, octaves: u32, bins: u32) -> FrontEnd {
    match features {
        Features::Cqt => FrontEnd::Cqt(CqtParams::with_geometry(
            srav_core::feat::SAMPLE_RATE,
            octaves,
            bins,
        )),
        Features::Llfb => FrontEnd::Llfb(LlfbParams::default()),
    }
}

fn cmd_extract(a: ExtractArgs) -> Result<()> {
    let entries = parse_cm_protocol(&a.protocol)?;
    let config = ExtractionConfig {
        front: front_end(a.features, a.cqt_octaves, a.cqt_bins),
        mean_var_norm: a.mean_var_norm,
    };
    let manifest = extract_features(&entries, &a.wav_dir, &a.out, &config)?;
    println!(
        "{} features ({} rows) cached; manifest {}",
        entries.len(),
        config.front.rows(),
        manifest.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    let entries = parse_cm_protocol(&a.protocol)?;
    let dev_entries = parse_cm_protocol(&a.dev_protocol)?;
    let speakers = speaker_map(&entries);

    let mut cfg = TrainConfig::default();
    let mut net_dropout: Option<f64> = None;
    let mut net_bn_momentum: Option<f64> = None;
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let map = parse_key_values(&text)?;
        if let Some(d) = map.get("dropout") {
            net_dropout = Some(d.parse().context("bad dropout value")?);
        }
        if let Some(m) = map.get("bn_momentum") {
            net_bn_momentum = Some(m.parse().context("bad bn_momentum value")?);
        }
        cfg.apply_key_values(&map)?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.disable_asv_head |= a.disable_asv_head;

    // network geometry comes from the cached features
    let manifest = read_manifest(&a.manifest)?;
    let (first_id, first_path) = manifest
        .first()
        .ok_or_else(|| anyhow::anyhow!("empty manifest"))?;
    let feat = read_feature_cache(first_path)
        .with_context(|| format!("reading features of {first_id}"))?;
    let mut net_cfg = NetConfig::with_input(speakers.len(), feat.rows(), feat.cols());
    if let Some(d) = net_dropout {
        net_cfg.dropout = d as f32 as f64;
    }
    if let Some(m) = net_bn_momentum {
        net_cfg.bn_momentum = m as f32 as f64;
    }
    let kind = feat.kind;

    let mut net = MtlNetwork::init(net_cfg, cfg.seed);
    if let Some(trunk_path) = &a.init_trunk {
        let (donor, _) = load_checkpoint(trunk_path)?;
        if donor.params.blocks.len() != net.params.blocks.len() {
            bail!("trunk checkpoint has a different block count");
        }
        net.params.blocks = donor.params.blocks.clone();
    }

    let train_set = build_dataset(&a.manifest, &entries, &speakers)?;
    let dev_set = build_dataset(&a.dev_manifest, &dev_entries, &speakers)?;

    let outcome = train_loop(&train_set, &dev_set, net, &cfg)?;

    let kind_byte = match kind {
        FeatureKind::Cqt => 0,
        FeatureKind::Llfb => 1,
    };
    save_checkpoint(&outcome.best, kind_byte, a.out.join("best.ckpt"))?;
    save_checkpoint(&outcome.net, kind_byte, a.out.join("final.ckpt"))?;
    write_train_log(a.out.join("train_log.csv"), &outcome.log)?;
    fs::write(a.out.join("speakers.txt"), speakers.join("\n") + "\n")?;
    if let Some(last) = outcome.log.last() {
        println!(
            "trained {} epochs; best dev loss {:.4} at epoch {}; final train loss {:.4}",
            outcome.log.len(),
            outcome.log[outcome.best_epoch as usize].dev_loss,
            outcome.best_epoch,
            last.train_loss
        );
    } else {
        println!("0 epochs requested; checkpoint equals initialization");
    }
    Ok(())
}

fn cmd_embed(a: EmbedArgs) -> Result<()> {
    let (net, _) = load_checkpoint(&a.checkpoint)?;
    let embeddings = embed_manifest(&net, &a.manifest)?;
    write_embeddings(&a.out, &embeddings)?;
    println!("{} embeddings written to {}", embeddings.len(), a.out.display());
    Ok(())
}

fn cmd_plda(a: PldaArgs) -> Result<()> {
    let embeddings = read_embeddings(&a.embeddings)?;
    let entries = parse_cm_protocol(&a.protocol)?;
    let speakers = speaker_map(&entries);
    let backend = backend_train(&embeddings, &entries, &speakers, a.iters)?;
    if backend.degenerate {
        eprintln!("warning: degenerate within/between-class scatter; ridge repair applied");
    }
    write_plda(&a.out, &backend.plda)?;
    write_backend_ctx(&a.backend_out, &backend.center_mu, &backend.cohort)?;
    println!(
        "PLDA trained ({} EM iterations, final LL {:.3}); model {}, context {}",
        backend.log_likelihoods.len(),
        backend.log_likelihoods.last().copied().unwrap_or(f64::NAN),
        a.out.display(),
        a.backend_out.display()
    );
    Ok(())
}

fn cmd_score_asv(a: ScoreAsvArgs) -> Result<()> {
    let plda = read_plda(&a.plda)?;
    let (center_mu, cohort) = read_backend_ctx(&a.backend)?;
    let backend = BackendModel {
        plda,
        center_mu,
        cohort,
        degenerate: false,
        log_likelihoods: vec![],
    };
    let embeddings = read_embeddings(&a.embeddings)?;
    let enroll = parse_enroll_list(&a.enroll)?;
    let trials = parse_asv_trials(&a.trials)?;
    let scores = score_asv(&backend, &embeddings, &enroll, &trials)?;
    write_score_file(&a.out, &scores)?;
    println!("{} ASV trials scored to {}", scores.len(), a.out.display());
    Ok(())
}

fn cmd_score_sd(a: ScoreSdArgs) -> Result<()> {
    let (net, _) = load_checkpoint(&a.checkpoint)?;
    let entries = parse_cm_protocol(&a.protocol)?;
    let scores = score_sd(&net, &a.manifest, &entries)?;
    write_score_file(&a.out, &scores)?;
    println!("{} SD trials scored to {}", scores.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let sd_entries = read_score_file(&a.scores)?;
    let protocol = match &a.protocol {
        Some(p) => Some(parse_cm_protocol(p)?),
        None => None,
    };
    let sd = sd_score_set(&sd_entries, protocol.as_deref())?;
    let asv = match &a.asv_scores {
        Some(p) => Some(asv_score_set(&read_score_file(p)?)?),
        None => None,
    };
    let report = evaluate(&sd, asv.as_ref(), &TdcfParams::default())?;
    print!("{}", report.render_text());
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), report.render_csv())?;
        if !report.per_attack.is_empty() {
            fs::write(dir.join("per_attack.csv"), report.per_attack_csv())?;
        }
        fs::write(dir.join("sd_det.csv"), sd_det_csv(&sd)?)?;
        println!("report written to {}", dir.display());
    }
    Ok(())
}

fn cmd_fuse(a: FuseArgs) -> Result<()> {
    if a.scores.len() < 2 && a.apply.is_none() {
        bail!("fusing needs at least two score files (or --apply with one)");
    }
    let fused = match &a.apply {
        Some(model_path) => {
            let model = read_fusion_model(model_path)?;
            apply_fusion_to_files(&model, &a.scores)?
        }
        None => {
            let (model, fused) = fuse_score_files(&a.scores)?;
            if let Some(model_path) = &a.model {
                write_fusion_model(model_path, &model)?;
            }
            println!(
                "fusion weights {:?}, offset {:.4}",
                model.weights, model.offset
            );
            fused
        }
    };
    write_score_file(&a.out, &fused)?;
    println!("{} fused scores written to {}", fused.len(), a.out.display());
    Ok(())
}
