//! Command-line interface: preprocessing, training (with grid expansion and
//! resume), explanation, evaluation, the audit oracle, and synthetic data
//! generation. Exit codes: 0 success, 1 usage error, 2 data error, 3 oracle
//! failure.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::agent::{self, EpisodeCtx, ResumePoint, TrainState};
use crate::ckg;
use crate::config::{ConfigFile, RunConfig};
use crate::error::{CerecError, Result};
use crate::eval;
use crate::explain::{self, ExplanationJson, NameTable};
use crate::fixtures;
use crate::glm::{self, GlmParams};
use crate::pipeline::{self, Dataset, PreprocessOptions, RunManifest, TrainPaths};
use crate::recommender::LatentFactors;
use crate::sampler::SamplerCtx;
use crate::synth;

#[derive(Parser)]
#[command(name = "cerec", version, about = "Counterfactual explainable recommendation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter raw interaction/triple files and write split data.
    Preprocess {
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long)]
        triples: PathBuf,
        #[arg(long)]
        alignment: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        kcore: usize,
        #[arg(long, default_value_t = 10)]
        entity_min: usize,
        #[arg(long, default_value_t = 50)]
        relation_min: usize,
        /// Train/valid/test ratios.
        #[arg(long, default_value = "0.6,0.2,0.2")]
        ratios: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run co-training from a config file (grids expand to one run per
    /// combination).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the data_dir from the config file.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Continue from the checkpoints already in the output directory.
        #[arg(long)]
        resume: bool,
        /// key=value config overrides (repeatable).
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Deploy a frozen policy to emit counterfactual explanations.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        user: Option<u64>,
        #[arg(long)]
        item: Option<u64>,
        /// Explain every test positive.
        #[arg(long)]
        all_test: bool,
        /// Optional entity name table (`entity\tname`).
        #[arg(long)]
        names: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 2)]
        t: usize,
        #[arg(long, default_value_t = 0.95)]
        gamma: f64,
    },
    /// Rank a split and report Recall/NDCG/HR at the given cutoffs.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "20,40,60,80")]
        ks: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Explanations to score against the negative-preference ground
        /// truth (JSONL from the explain command).
        #[arg(long)]
        explanations: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        dns_rounds: usize,
        #[arg(long, default_value_t = 0)]
        dns_seed: u64,
        #[arg(long)]
        include_train: bool,
    },
    /// Run the built-in audit oracles; exits 3 on any failure.
    Oracle {
        /// Which fixture family to audit.
        #[arg(long, default_value = "all")]
        fixture: String,
    },
    /// Generate a planted-structure synthetic dataset.
    Synth {
        /// Spec file (`key = value`); missing keys use defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Entry point used by `main`; returns the process exit code.
pub fn run_main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Preprocess {
            interactions,
            triples,
            alignment,
            out,
            kcore,
            entity_min,
            relation_min,
            ratios,
            seed,
        } => cmd_preprocess(
            &interactions,
            &triples,
            &alignment,
            &out,
            kcore,
            entity_min,
            relation_min,
            &ratios,
            seed,
        ),
        Command::Train { config, out_dir, data_dir, resume, sets } => {
            cmd_train(&config, &out_dir, data_dir.as_deref(), resume, &sets)
        }
        Command::Explain {
            model,
            policy,
            data_dir,
            out,
            user,
            item,
            all_test,
            names,
            k,
            t,
            gamma,
        } => cmd_explain(
            &model,
            &policy,
            &data_dir,
            &out,
            user,
            item,
            all_test,
            names.as_deref(),
            k,
            t,
            gamma,
        ),
        Command::Evaluate {
            model,
            data_dir,
            split,
            ks,
            out_dir,
            explanations,
            dns_rounds,
            dns_seed,
            include_train,
        } => cmd_evaluate(
            &model,
            &data_dir,
            &split,
            &ks,
            &out_dir,
            explanations.as_deref(),
            dns_rounds,
            dns_seed,
            include_train,
        ),
        Command::Oracle { fixture } => cmd_oracle(&fixture),
        Command::Synth { spec, out, seed } => cmd_synth(spec.as_deref(), &out, seed),
    }
}

fn parse_ratios(raw: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = raw
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CerecError::invalid(format!("bad ratios `{raw}`")))?;
    if parts.len() != 3 {
        return Err(CerecError::invalid("ratios must list three values"));
    }
    Ok((parts[0], parts[1], parts[2]))
}

fn parse_ks(raw: &str) -> Result<Vec<usize>> {
    let ks: Vec<usize> = raw
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CerecError::invalid(format!("bad cutoff list `{raw}`")))?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(CerecError::invalid("cutoffs must be positive"));
    }
    Ok(ks)
}

#[allow(clippy::too_many_arguments)]
fn cmd_preprocess(
    interactions_path: &Path,
    triples_path: &Path,
    alignment_path: &Path,
    out: &Path,
    kcore: usize,
    entity_min: usize,
    relation_min: usize,
    ratios_raw: &str,
    seed: u64,
) -> Result<i32> {
    if kcore == 0 || entity_min == 0 || relation_min == 0 {
        return Err(CerecError::invalid("thresholds must be >= 1"));
    }
    let ratios = parse_ratios(ratios_raw)?;
    let (interactions, duplicates) = ckg::load_interactions(interactions_path)?;
    let mut vocab = ckg::RelationVocab::new();
    let triples = ckg::load_triples(triples_path, &mut vocab)?;
    let alignment = ckg::load_alignment(alignment_path)?;

    let opts = PreprocessOptions { k_core: kcore, entity_min, relation_min, ratios, seed };
    let pre = pipeline::preprocess(interactions, duplicates, triples, alignment, vocab, &opts)?;
    pre.write_dir(out)?;

    let mut manifest = RunManifest::new(
        "preprocess",
        serde_json::json!({
            "kcore": kcore, "entity_min": entity_min, "relation_min": relation_min,
            "ratios": ratios_raw, "seed": seed,
        }),
    );
    manifest.record_input(interactions_path)?;
    manifest.record_input(triples_path)?;
    manifest.record_input(alignment_path)?;
    for name in [
        pipeline::files::INTERACTIONS,
        pipeline::files::TRAIN,
        pipeline::files::VALID,
        pipeline::files::TEST,
        pipeline::files::TRIPLES,
        pipeline::files::ALIGNMENT,
        pipeline::files::RELATIONS,
        pipeline::files::STATS,
    ] {
        manifest.record_output(&out.join(name));
    }
    manifest.write(out)?;

    println!(
        "preprocess: {} users, {} items, {} interactions (density {}), {} triples",
        pre.stats.users,
        pre.stats.items,
        pre.stats.interactions,
        pre.stats.density_percent,
        pre.stats.kg_triples
    );
    Ok(0)
}

fn write_epoch_log(paths: &TrainPaths, config: &RunConfig, state: &TrainState) -> Result<()> {
    use std::io::Write;
    let path = paths.epoch_log();
    let io = |e| CerecError::Io { path: path.clone(), source: e };
    let file = fs::File::create(&path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    let header = serde_json::json!({ "type": "config", "config": config.echo() });
    writeln!(w, "{header}").map_err(io)?;
    for record in &state.log {
        let line = serde_json::to_string(record)
            .map_err(|e| CerecError::invalid(format!("serialize epoch record: {e}")))?;
        writeln!(w, "{line}").map_err(io)?;
    }
    Ok(())
}

fn write_reward_curve(paths: &TrainPaths, state: &TrainState) -> Result<()> {
    use std::io::Write;
    let path = paths.reward_curve();
    let io = |e| CerecError::Io { path: path.clone(), source: e };
    let file = fs::File::create(&path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "epoch\tmean_reward\tcumulative_reward\tval_recall_at_20").map_err(io)?;
    for r in &state.log {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            r.epoch, r.mean_reward, r.cumulative_reward, r.val_recall_at_20
        )
        .map_err(io)?;
    }
    Ok(())
}

fn run_one_training(
    dataset: &Dataset,
    config: &RunConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<()> {
    fs::create_dir_all(out_dir)
        .map_err(|e| CerecError::Io { path: out_dir.to_path_buf(), source: e })?;
    let paths = TrainPaths::new(out_dir);

    let resume_point = if resume && paths.state().exists() {
        let body = fs::read_to_string(paths.state())
            .map_err(|e| CerecError::Io { path: paths.state(), source: e })?;
        let state: TrainState = serde_json::from_str(&body)
            .map_err(|e| CerecError::invalid(format!("bad train state: {e}")))?;
        let (factors, _) = LatentFactors::load_tsv(&paths.factors())?;
        let params = GlmParams::load_tsv(&paths.policy())?;
        log::info!("resuming from epoch {}", state.epoch);
        Some(ResumePoint { state, factors, params })
    } else {
        None
    };

    let outcome = agent::co_train(dataset, config, config.seed, resume_point, &mut |snap| {
        snap.factors.save_tsv(&paths.factors(), config.seed)?;
        snap.params.save_tsv(&paths.policy())?;
        pipeline::write_json(&paths.state(), snap.state)?;
        write_epoch_log(&paths, config, snap.state)?;
        write_reward_curve(&paths, snap.state)
    })?;

    // Epoch 0 runs (init-only) still leave a checkpoint and log header.
    outcome.factors.save_tsv(&paths.factors(), config.seed)?;
    outcome.params.save_tsv(&paths.policy())?;
    pipeline::write_json(&paths.state(), &outcome.state)?;
    write_epoch_log(&paths, config, &outcome.state)?;
    write_reward_curve(&paths, &outcome.state)?;
    Ok(())
}

fn cmd_train(
    config_path: &Path,
    out_dir: &Path,
    data_dir: Option<&Path>,
    resume: bool,
    sets: &[String],
) -> Result<i32> {
    let mut file = ConfigFile::parse(config_path)?;
    file.apply_overrides(sets)?;
    let configs = file.expand()?;

    let manifest_config = serde_json::json!({
        "config_file": config_path.display().to_string(),
        "overrides": sets,
        "runs": configs.len(),
    });

    let first_data_dir = data_dir
        .map(Path::to_path_buf)
        .or_else(|| configs[0].data_dir.clone())
        .ok_or_else(|| CerecError::InvalidConfig("no data_dir given (flag or config)".into()))?;
    let dataset = Dataset::load_dir(&first_data_dir)?;
    log::info!(
        "loaded {} users / {} items / {} attributes, {} train pairs",
        dataset.ckg.num_users(),
        dataset.ckg.num_items(),
        dataset.ckg.num_attributes(),
        dataset.train.len()
    );

    if configs.len() == 1 {
        run_one_training(&dataset, &configs[0], out_dir, resume)?;
    } else {
        for (idx, config) in configs.iter().enumerate() {
            let sub = out_dir.join(format!(
                "run_{idx:03}_t{}_lr{}_gamma{}",
                config.t, config.lr, config.gamma
            ));
            log::info!("grid run {}/{} -> {}", idx + 1, configs.len(), sub.display());
            run_one_training(&dataset, config, &sub, resume)?;
        }
    }

    let mut manifest = RunManifest::new("train", manifest_config);
    manifest.record_input(config_path)?;
    for name in ["factors.tsv", "policy.tsv", "train_state.json", "epochs.jsonl"] {
        manifest.record_output(&out_dir.join(name));
    }
    fs::create_dir_all(out_dir)
        .map_err(|e| CerecError::Io { path: out_dir.to_path_buf(), source: e })?;
    manifest.write(out_dir)?;
    println!("train: wrote {} run(s) under {}", configs.len(), out_dir.display());
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_explain(
    model: &Path,
    policy: &Path,
    data_dir: &Path,
    out: &Path,
    user: Option<u64>,
    item: Option<u64>,
    all_test: bool,
    names_path: Option<&Path>,
    k: usize,
    t: usize,
    gamma: f64,
) -> Result<i32> {
    if !all_test && (user.is_none() || item.is_none()) {
        return Err(CerecError::invalid(
            "either --all-test or both --user and --item are required",
        ));
    }
    let dataset = Dataset::load_dir(data_dir)?;
    let (factors, _) = LatentFactors::load_tsv(model)?;
    let params = GlmParams::load_tsv(policy)?;
    if factors.num_users() != dataset.ckg.num_users()
        || factors.num_items() != dataset.ckg.num_items()
    {
        return Err(CerecError::invalid("model shape does not match the dataset"));
    }
    let names = match names_path {
        Some(p) => NameTable::load_tsv(p)?,
        None => NameTable::new(),
    };

    let pairs: Vec<(u32, u32)> = if all_test {
        dataset.test.clone()
    } else {
        vec![pipeline::dense_pair(&dataset.ckg, user.unwrap(), item.unwrap())?]
    };

    let records = explain_pairs(&dataset, &factors, &params, &names, &pairs, k, t, gamma)?;
    explain::write_jsonl(out, &records)?;

    let mut manifest = RunManifest::new(
        "explain",
        serde_json::json!({ "k": k, "t": t, "gamma": gamma, "all_test": all_test }),
    );
    manifest.record_input(model)?;
    manifest.record_input(policy)?;
    manifest.record_output(out);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        manifest.write(dir)?;
    }
    println!("explain: {} records -> {}", records.len(), out.display());
    Ok(0)
}

/// Greedy frozen-policy explanations for a batch of positives.
#[allow(clippy::too_many_arguments)]
pub fn explain_pairs(
    dataset: &Dataset,
    factors: &LatentFactors,
    params: &GlmParams,
    names: &NameTable,
    pairs: &[(u32, u32)],
    k: usize,
    t: usize,
    gamma: f64,
) -> Result<Vec<ExplanationJson>> {
    let ckg = &dataset.ckg;
    let cache = glm::forward_cached(ckg, params)?;
    let k_list = k.min(ckg.num_items());
    let no_excl = HashSet::new();

    let mut lists = Vec::with_capacity(ckg.num_users());
    let mut masks = Vec::with_capacity(ckg.num_users());
    for u in 0..ckg.num_users() as u32 {
        let list = factors.top_k(u, k_list, &no_excl)?;
        masks.push(list.item_set());
        lists.push(list);
    }

    let mut records = Vec::new();
    for &(u, i) in pairs {
        let ectx = EpisodeCtx {
            sampler: SamplerCtx::new(ckg, &cache.output, params.leaky_slope),
            factors,
            rec_list: &lists[u as usize],
            mask: &masks[u as usize],
        };
        if let Some(record) = explain::explain_pair(&ectx, names, u, i, t, gamma)? {
            records.push(explain::to_json(ckg, &record, names));
        }
    }
    Ok(records)
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    model: &Path,
    data_dir: &Path,
    split: &str,
    ks_raw: &str,
    out_dir: &Path,
    explanations: Option<&Path>,
    dns_rounds: usize,
    dns_seed: u64,
    include_train: bool,
) -> Result<i32> {
    let ks = parse_ks(ks_raw)?;
    let dataset = Dataset::load_dir(data_dir)?;
    let (factors, _) = LatentFactors::load_tsv(model)?;
    let pairs = match split {
        "test" => &dataset.test,
        "valid" => &dataset.valid,
        "train" => &dataset.train,
        other => {
            return Err(CerecError::invalid(format!(
                "unknown split `{other}` (expected train, valid, or test)"
            )))
        }
    };

    let (rows, users_evaluated) =
        eval::evaluate_ranking(&factors, &dataset, pairs, &ks, !include_train)?;

    let explanation = match explanations {
        Some(path) => {
            let gt = eval::dns_ground_truth(
                &dataset,
                dns_rounds,
                RunConfig::default().dns_pool,
                RunConfig::default().dns_dim,
                RunConfig::default().dns_lr,
                dns_seed,
            )?;
            Some(score_explanations(&dataset, path, &gt)?)
        }
        None => None,
    };
    let explanation = explanation.flatten();

    let report = eval::MetricReport {
        config: serde_json::json!({
            "model": model.display().to_string(),
            "split": split,
            "ks": ks,
            "exclude_train": !include_train,
            "dns_rounds": dns_rounds,
        }),
        rows,
        explanation,
        users_evaluated,
    };

    fs::create_dir_all(out_dir)
        .map_err(|e| CerecError::Io { path: out_dir.to_path_buf(), source: e })?;
    report.write_jsonl(&out_dir.join("report.jsonl"))?;
    report.write_csv(&out_dir.join("report.csv"))?;

    let mut manifest = RunManifest::new(
        "evaluate",
        report.config.clone(),
    );
    manifest.record_input(model)?;
    manifest.record_output(&out_dir.join("report.jsonl"));
    manifest.record_output(&out_dir.join("report.csv"));
    manifest.write(out_dir)?;

    for row in &report.rows {
        println!("{}@{}: {:.4}", row.metric, row.k, row.value);
    }
    if let Some(prf) = &report.explanation {
        println!(
            "explanation consistency: precision {:.4} recall {:.4} f1 {:.4} over {} pairs",
            prf.precision, prf.recall, prf.f1, prf.pairs
        );
    }
    Ok(0)
}

/// Score an explanation JSONL file against per-user negative-preference
/// sets.
fn score_explanations(
    dataset: &Dataset,
    path: &Path,
    gt: &eval::GroundTruthSet,
) -> Result<Option<eval::PrfSummary>> {
    let body = fs::read_to_string(path)
        .map_err(|e| CerecError::Io { path: path.to_path_buf(), source: e })?;
    let mut values = Vec::new();
    for (idx, line) in body.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let record: ExplanationJson = serde_json::from_str(line).map_err(|e| CerecError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: format!("bad explanation record: {e}"),
        })?;
        let Some(u) = dataset.ckg.user_by_raw(record.user) else {
            continue;
        };
        let delta: std::collections::BTreeSet<u32> = record
            .delta_ids
            .iter()
            .filter_map(|&raw| dataset.ckg.attr_by_raw(raw))
            .collect();
        if let Some(prf) = eval::explanation_prf(&delta, gt.negatives_of(u)) {
            values.push(prf);
        }
    }
    Ok(eval::prf_summary(&values))
}

fn cmd_synth(spec_path: Option<&Path>, out: &Path, seed: u64) -> Result<i32> {
    let spec = match spec_path {
        Some(p) => synth::SynthSpec::from_file(p)?,
        None => synth::SynthSpec::default(),
    };
    let data = synth::generate(&spec, seed)?;
    data.write_dir(out)?;

    let mut manifest = RunManifest::new(
        "synth",
        serde_json::json!({ "seed": seed, "spec": serde_json::to_value(&spec).unwrap() }),
    );
    if let Some(p) = spec_path {
        manifest.record_input(p)?;
    }
    for name in ["interactions.tsv", "triples.tsv", "alignment.tsv", "relations.tsv", "planted.tsv"] {
        manifest.record_output(&out.join(name));
    }
    manifest.write(out)?;
    println!(
        "synth: {} users x {} items x {} attributes -> {}",
        spec.users,
        spec.items,
        spec.attributes,
        out.display()
    );
    Ok(0)
}

fn cmd_oracle(fixture: &str) -> Result<i32> {
    let all = fixture == "all";
    let mut failures = 0usize;
    let mut run = |name: &str, wanted: bool, f: &dyn Fn() -> std::result::Result<(), String>| {
        if !wanted {
            return;
        }
        match f() {
            Ok(()) => println!("ORACLE {name}: PASS"),
            Err(msg) => {
                println!("ORACLE {name}: FAIL ({msg})");
                failures += 1;
            }
        }
    };

    run("sampler-enumeration", all || fixture == "sampler", &fixtures::audit_sampler);
    run("masking", all || fixture == "sampler", &fixtures::audit_masking);
    run("gradients", all || fixture == "gradients", &fixtures::audit_gradients);
    run("minimality", all || fixture == "minimality", &fixtures::audit_minimality);
    run("metrics", all || fixture == "metrics", &fixtures::audit_metrics);

    if !["all", "sampler", "gradients", "minimality", "metrics"].contains(&fixture) {
        return Err(CerecError::invalid(format!(
            "unknown fixture `{fixture}` (expected all, sampler, gradients, minimality, or metrics)"
        )));
    }
    if failures > 0 {
        eprintln!("{failures} oracle check(s) failed");
        return Ok(3);
    }
    Ok(0)
}
