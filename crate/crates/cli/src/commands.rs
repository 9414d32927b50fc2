//! Implementations behind the subcommands.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use driftwatch_core::continual::{continual_learn, fisher_diagonal, ContinualConfig};
use driftwatch_core::error::{Error, Result};
use driftwatch_core::federated::transcript_to_path;
use driftwatch_core::ingest::{
    assemble_flows, dataset_from_path, dataset_to_path, generate_synthetic, label_flows,
    pcap_from_path, rules_from_path, LabelOptions, LabeledDataset, SyntheticSpec,
};
use driftwatch_core::nn::{binary_label, evaluate, load_model, save_model, Metrics};
use driftwatch_core::sampling::{build_task_dataset, load_pools, save_pools, SamplePools};
use driftwatch_core::scenario::{
    accuracy_at, arch_for, federated_csv, pairwise_csv, scenario_early_detection,
    scenario_federated, scenario_pairwise, scenario_sequential, sequential_csv, subseed,
    train_initial as fit_initial, write_report_files, ArchPreset, ClassBank, DataSource, ModelKind,
    ScenarioConfig, ScenarioKind,
};
use driftwatch_core::seqlabel::{curve_to_csv, early_detection_curve, label_flow, DecisionRule};

/// Global flags shared by every subcommand.
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub deterministic: bool,
}

impl Overrides {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn out_file(&self, what: &str) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{what} needs --out <file>")))
    }

    /// The scenario configuration with command line overrides applied.
    fn scenario_config(&self, forced_kind: Option<ScenarioKind>) -> Result<ScenarioConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
                serde_json::from_str::<ScenarioConfig>(&text)
                    .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?
            }
            None => default_scenario_config(),
        };
        if let Some(kind) = forced_kind {
            cfg.kind = kind;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = Some(out.clone());
        }
        Ok(cfg)
    }
}

/// Small sizes that run in about a minute when no config file is given.
fn default_scenario_config() -> ScenarioConfig {
    ScenarioConfig {
        data: DataSource::Synthetic(SyntheticSpec {
            classes: 3,
            flows_per_class: 150,
            benign_flows: Some(300),
            ..SyntheticSpec::default()
        }),
        eval_per_class: 40,
        update_flows: 64,
        initial_epochs: 20,
        ..ScenarioConfig::default()
    }
}

fn print_summary(value: serde_json::Value) {
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer(&mut stdout, &value).expect("stdout json");
    let _ = stdout.write_all(b"\n");
}

fn metrics_json(m: &Metrics) -> serde_json::Value {
    serde_json::json!({
        "accuracy": m.accuracy,
        "detection_rate": m.detection_rate,
        "false_alarm_rate": m.false_alarm_rate,
        "n": m.n,
    })
}

pub fn ingest(
    ov: &Overrides,
    pcap: &Path,
    rules: Option<&Path>,
    idle_timeout_us: u64,
    strict: bool,
) -> Result<()> {
    let out = ov.out_file("ingest")?;
    let packets = pcap_from_path(pcap)?;
    let n_packets = packets.len();
    let assembly = assemble_flows(packets, idle_timeout_us);
    let rules = match rules {
        Some(path) => rules_from_path(path)?,
        None => Vec::new(),
    };
    let opts = LabelOptions { strict_unmatched: strict, ..LabelOptions::default() };
    let (dataset, warnings) = label_flows(&assembly.flows, &rules, &opts)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    dataset_to_path(&dataset, out)?;
    print_summary(serde_json::json!({
        "packets": n_packets,
        "skipped": assembly.skipped,
        "flows": dataset.len(),
        "classes": dataset.catalog.names(),
        "out": out,
    }));
    Ok(())
}

pub fn synth(ov: &Overrides, classes: u32, flows: u32, benign: Option<u32>) -> Result<()> {
    let out = ov.out_file("synth")?;
    let spec = SyntheticSpec {
        classes,
        flows_per_class: flows,
        benign_flows: benign,
        seed: ov.seed(),
        ..SyntheticSpec::default()
    };
    let dataset = generate_synthetic(&spec)?;
    dataset_to_path(&dataset, out)?;
    print_summary(serde_json::json!({
        "classes": dataset.catalog.names(),
        "flows": dataset.len(),
        "seed": spec.seed,
        "out": out,
    }));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn train_initial(
    ov: &Overrides,
    data: &Path,
    known: Option<String>,
    model_kind: ModelKind,
    preset: ArchPreset,
    epochs: usize,
    batch: usize,
    eval_per_class: usize,
) -> Result<()> {
    let out = ov.out_file("train-initial")?;
    let seed = ov.seed();
    let dataset = dataset_from_path(data)?;
    let bank = ClassBank::new(&dataset, eval_per_class, subseed(seed, "bank"))?;

    let (train_set, eval_set, trained_on) = if model_kind == ModelKind::Lstm && known.is_none() {
        // the recurrent detector defaults to benign-vs-everything
        let mut rng = seeded(subseed(seed, "init-draw"));
        (bank.full_train_set(&mut rng), bank.full_eval_set(), "all".to_string())
    } else {
        let known_id = bank.resolve_known(&known)?;
        let mut rng = seeded(subseed(seed, "init-draw"));
        (
            bank.initial_train_set(known_id, &mut rng)?,
            bank.eval_set(known_id)?,
            bank.class_name(known_id).to_string(),
        )
    };

    let model =
        fit_initial(arch_for(model_kind, preset), &train_set, epochs, batch, subseed(seed, "init"))?;
    let fisher = fisher_diagonal(&model, &train_set)?;
    save_model(out, &model, Some(&fisher))?;
    let metrics = evaluate(&model, &eval_set)?;

    let metrics_path = PathBuf::from(format!("{}.metrics.json", out.display()));
    let body = serde_json::json!({
        "schema_version": driftwatch_core::scenario::METRICS_SCHEMA_VERSION,
        "scenario": "train-initial",
        "seed": seed,
        "results": {
            "known": trained_on,
            "train_flows": train_set.len(),
            "eval": metrics_json(&metrics),
            "params": model.n_params(),
        },
    });
    fs::write(&metrics_path, format!("{:#}\n", body))?;
    print_summary(serde_json::json!({
        "known": trained_on,
        "accuracy": metrics.accuracy,
        "detection_rate": metrics.detection_rate,
        "model": out,
        "metrics": metrics_path,
    }));
    Ok(())
}

fn seeded(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// The one attack class present in an update container.
fn sole_attack_class(dataset: &LabeledDataset) -> Result<u32> {
    let counts = dataset.class_counts();
    let present: Vec<u32> =
        counts.iter().enumerate().skip(1).filter(|(_, &n)| n > 0).map(|(c, _)| c as u32).collect();
    match present.as_slice() {
        [one] => Ok(*one),
        [] => Err(Error::EmptyDataset("update data holds no attack flows".into())),
        many => Err(Error::Config(format!(
            "update data must hold exactly one attack class, found {}",
            many.len()
        ))),
    }
}

pub fn continual_update(
    ov: &Overrides,
    model_path: &Path,
    new_data: &Path,
    k: Option<usize>,
    epochs: Option<usize>,
    tau: Option<f64>,
    pools_dir: Option<&Path>,
) -> Result<()> {
    let (model, fisher) = load_model(model_path)?;
    let fisher = fisher.ok_or_else(|| {
        Error::Config(format!(
            "checkpoint {} carries no importance weights; run train-initial first",
            model_path.display()
        ))
    })?;
    let dataset = dataset_from_path(new_data)?;
    let new_class = sole_attack_class(&dataset)?;

    let mut cfg = ContinualConfig { seed: ov.seed(), ..ContinualConfig::default() };
    if let Some(k) = k {
        cfg.k = k;
    }
    if let Some(epochs) = epochs {
        cfg.epochs = epochs;
    }
    if let Some(tau) = tau {
        cfg.tau = tau;
    }

    // with pools the task is balanced against earlier classes; without,
    // the update container is used as given
    let (task, pool_note) = match pools_dir {
        Some(dir) => {
            let mut rng = seeded(subseed(cfg.seed, "pools"));
            let (mut pools, catalog) = if dir.join("manifest.json").exists() {
                load_pools(dir)?
            } else {
                (SamplePools::new(1000), dataset.catalog.clone())
            };
            if catalog.names() != dataset.catalog.names() {
                return Err(Error::Config(format!(
                    "pool catalog {:?} does not match dataset catalog {:?}",
                    catalog.names(),
                    dataset.catalog.names()
                )));
            }
            let mix = build_task_dataset(&mut pools, &dataset.samples, new_class, &mut rng)?;
            save_pools(&pools, dir, &catalog)?;
            (mix.samples, Some(dir.display().to_string()))
        }
        None => (dataset.samples.clone(), None),
    };

    let outcome = continual_learn(&model, &fisher, &task, &cfg)?;
    let updated = outcome.model().clone();
    let new_fisher = fisher_diagonal(&updated, &task)?;

    let out = match &ov.out {
        Some(p) => p.clone(),
        None => {
            let stem = model_path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            model_path.with_file_name(format!("{stem}-updated.nnmd"))
        }
    };
    save_model(&out, &updated, Some(&new_fisher))?;
    let train_metrics = evaluate(&updated, &task)?;

    let metrics_path = PathBuf::from(format!("{}.metrics.json", out.display()));
    let body = serde_json::json!({
        "schema_version": driftwatch_core::scenario::METRICS_SCHEMA_VERSION,
        "scenario": "continual-update",
        "seed": cfg.seed,
        "results": {
            "new_class": dataset.catalog.name(new_class),
            "k": cfg.k,
            "phase2_used": outcome.phase2_used,
            "detection_after_phase1": outcome.detection_after_phase1,
            "task_flows": task.len(),
            "params_before": model.n_params(),
            "params_after": updated.n_params(),
            "train_metrics": metrics_json(&train_metrics),
            "pools": pool_note,
        },
    });
    fs::write(&metrics_path, format!("{:#}\n", body))?;
    print_summary(serde_json::json!({
        "new_class": dataset.catalog.name(new_class),
        "phase2_used": outcome.phase2_used,
        "params_after": updated.n_params(),
        "model": out,
        "metrics": metrics_path,
    }));
    Ok(())
}

fn out_dir(cfg: &ScenarioConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn run_federated(cfg: &ScenarioConfig) -> Result<()> {
    let report = scenario_federated(cfg)?;
    let dir = out_dir(cfg);
    let table = federated_csv(&report)?;
    write_report_files(&dir, "federated", cfg.seed, &report, &[("federated.csv", table)])?;
    save_model(&dir.join("main-model.nnmd"), &report.model, Some(&report.fisher))?;
    transcript_to_path(&report.transcript, &dir.join("transcript.jsonl"))?;
    print_summary(serde_json::json!({
        "agents": report.agents,
        "unknowns_before": report.unknowns_before.accuracy,
        "unknowns_after": report.unknowns_after.accuracy,
        "known_after": report.known_after.accuracy,
        "server_version": report.server_version,
        "out": dir,
    }));
    Ok(())
}

pub fn federate(ov: &Overrides) -> Result<()> {
    let cfg = ov.scenario_config(Some(ScenarioKind::Federated))?;
    run_federated(&cfg)
}

pub fn report(ov: &Overrides) -> Result<()> {
    if ov.config.is_none() {
        return Err(Error::Config("report needs --config <json>".into()));
    }
    let cfg = ov.scenario_config(None)?;
    match cfg.kind {
        ScenarioKind::Pairwise => {
            let report = scenario_pairwise(&cfg)?;
            let dir = out_dir(&cfg);
            let table = pairwise_csv(&report)?;
            write_report_files(&dir, "pairwise", cfg.seed, &report, &[("pairwise.csv", table)])?;
            print_summary(serde_json::json!({
                "known": report.known,
                "initial_accuracy": report.initial_known.accuracy,
                "pairs": report.cells.len(),
                "out": dir,
            }));
        }
        ScenarioKind::Sequential => {
            let report = scenario_sequential(&cfg)?;
            let dir = out_dir(&cfg);
            let table = sequential_csv(&report)?;
            write_report_files(&dir, "sequential", cfg.seed, &report, &[("sequential.csv", table)])?;
            print_summary(serde_json::json!({
                "known": report.known,
                "mean_known_after": report.mean_known_after,
                "out": dir,
            }));
        }
        ScenarioKind::Federated => run_federated(&cfg)?,
        ScenarioKind::EarlyDetection => {
            let report = scenario_early_detection(&cfg)?;
            let dir = out_dir(&cfg);
            fs::create_dir_all(&dir)?;
            let mut curve = Vec::new();
            curve_to_csv(&report.curve, &mut curve)?;
            let curve = String::from_utf8(curve).expect("csv output is utf-8");
            write_report_files(
                &dir,
                "early-detection",
                cfg.seed,
                &report,
                &[("early_detection_curve.csv", curve)],
            )?;
            save_model(&dir.join("early-model.nnmd"), &report.model, None)?;
            print_summary(serde_json::json!({
                "full_flow_accuracy": report.full_flow.accuracy,
                "accuracy_at_15": accuracy_at(&report.curve, 15),
                "out": dir,
            }));
        }
    }
    Ok(())
}

pub fn seqlabel(
    ov: &Overrides,
    model_path: &Path,
    data: &Path,
    threshold: f64,
    min_packets: usize,
    decisions: Option<&Path>,
) -> Result<()> {
    let (model, _) = load_model(model_path)?;
    let dataset = dataset_from_path(data)?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset(format!("{} holds no flows", data.display())));
    }
    let rule = DecisionRule { threshold, min_packets };

    let mut decision_rows = csv::Writer::from_writer(Vec::new());
    decision_rows.write_record(["flow", "class", "verdict", "flagged_at", "packets"])?;
    let mut flagged = 0usize;
    let mut flagged_sum = 0usize;
    let mut correct = 0usize;
    for (i, sample) in dataset.samples.iter().enumerate() {
        let d = label_flow(&model, &sample.matrix, &rule)?;
        if let Some(at) = d.flagged_at {
            flagged += 1;
            flagged_sum += at;
        }
        if d.verdict == binary_label(sample.label) {
            correct += 1;
        }
        decision_rows.write_record([
            &i.to_string(),
            dataset.catalog.name(sample.label).unwrap_or("?"),
            &d.verdict.to_string(),
            &d.flagged_at.map(|a| a.to_string()).unwrap_or_default(),
            &sample.matrix.n_real_packets().to_string(),
        ])?;
    }
    if let Some(path) = decisions {
        let bytes =
            decision_rows.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, bytes)?;
    }

    let curve = early_detection_curve(&model, &dataset.samples)?;
    let curve_path = match &ov.out {
        Some(p) => p.clone(),
        None => PathBuf::from("early_detection.csv"),
    };
    let mut buf = Vec::new();
    curve_to_csv(&curve, &mut buf)?;
    fs::write(&curve_path, buf)?;

    print_summary(serde_json::json!({
        "flows": dataset.len(),
        "flagged": flagged,
        "mean_flagged_at": if flagged > 0 { Some(flagged_sum as f64 / flagged as f64) } else { None },
        "final_step_accuracy": correct as f64 / dataset.len() as f64,
        "curve": curve_path,
        "decisions": decisions,
    }));
    Ok(())
}
