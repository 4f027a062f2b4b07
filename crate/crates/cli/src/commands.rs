use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use log::info;
use spoofshield_core::attack::AttackKind;
use spoofshield_core::detect::{CusumModel, DetectorModels, IForestModel, LstmModel};
use spoofshield_core::fuse::Mode;
use spoofshield_core::eval::{aggregate, format_tables, score_alarms, score_rmse, RmseWindow, RunSummary};
use spoofshield_core::pipeline::{calibrate, kind_label, run_campaign, run_experiment, ExperimentConfig, PipelineError, ScenarioRef};
use spoofshield_core::runlog::{read_log, write_log, LogRow};
use spoofshield_core::sim::{write_trace, Trace};

use crate::config::{config_error, Loaded};
use crate::manifest::ArtifactWriter;
use crate::plot;

const MODEL_FILES: [&str; 3] = ["lstm.json", "cusum.json", "iforest.json"];

fn pipeline_err(e: PipelineError) -> anyhow::Error {
    if e.is_config() {
        config_error(e.to_string())
    } else {
        e.into()
    }
}

fn config_json(cfg: &ExperimentConfig) -> anyhow::Result<String> {
    Ok(serde_json::to_string(cfg)?)
}

fn write_models(w: &mut ArtifactWriter, dir: &str, m: &DetectorModels) -> anyhow::Result<()> {
    let [l, c, i] = MODEL_FILES;
    w.write(format!("{dir}/{l}"), m.lstm.to_json()?.as_bytes())?;
    w.write(format!("{dir}/{c}"), serde_json::to_string_pretty(&m.cusum)?.as_bytes())?;
    w.write(format!("{dir}/{i}"), m.iforest.to_json()?.as_bytes())?;
    Ok(())
}

fn record_models(w: &mut ArtifactWriter, dir: &Path) -> anyhow::Result<()> {
    for name in MODEL_FILES {
        w.record(&dir.join(name))?;
    }
    Ok(())
}

pub fn load_models(dir: &Path) -> anyhow::Result<DetectorModels> {
    let read = |name: &str| {
        let path = dir.join(name);
        std::fs::read_to_string(&path)
            .map_err(|e| config_error(format!("cannot read model file {}: {e} (run `spoofshield calibrate` first)", path.display())))
    };
    let [l, c, i] = MODEL_FILES;
    let lstm = LstmModel::from_json(&read(l)?).with_context(|| format!("parsing {}", dir.join(l).display()))?;
    let cusum: CusumModel = serde_json::from_str(&read(c)?).with_context(|| format!("parsing {}", dir.join(c).display()))?;
    let iforest = IForestModel::from_json(&read(i)?).with_context(|| format!("parsing {}", dir.join(i).display()))?;
    Ok(DetectorModels { lstm, cusum, iforest })
}

pub fn cmd_calibrate(loaded: &Loaded, out: &Path) -> anyhow::Result<()> {
    let cfg = &loaded.config;
    info!("calibrating on {} scenario(s)", cfg.calibration.scenarios.len());
    let (models, report) = calibrate(cfg, &loaded.base).map_err(pipeline_err)?;
    let mut w = ArtifactWriter::new(out)?;
    write_models(&mut w, "models", &models)?;
    w.write("calibration_report.json", serde_json::to_string_pretty(&report)?.as_bytes())?;
    for (k, rate) in &report.false_alarm_rate {
        info!("{}: held-out false-alarm rate {:.4}", k.name(), rate);
    }
    w.finish("calibration_manifest.json", "calibrate", &config_json(cfg)?, vec![cfg.calibration.settings.seed])?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn attack_label(cfg: &ExperimentConfig) -> String {
    let names: Vec<&str> = cfg
        .attack
        .specs()
        .iter()
        .map(|s| match s.kind {
            AttackKind::None => "none",
            AttackKind::ConstantBias { .. } => "constant_bias",
            AttackKind::Stealth { .. } => "stealth",
        })
        .filter(|n| *n != "none")
        .collect();
    if names.is_empty() {
        "none".to_string()
    } else {
        names.join("+")
    }
}

fn log_bytes(rows: &[LogRow]) -> anyhow::Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_log(rows, &mut buf)?;
    Ok(buf)
}

pub fn cmd_run(loaded: &Loaded, out: &Path, models_dir: &Path) -> anyhow::Result<()> {
    let cfg = &loaded.config;
    let models = if cfg.detectors.enabled.is_empty() { None } else { Some(load_models(models_dir)?) };
    let output = run_experiment(cfg, &loaded.base, models.as_ref()).map_err(pipeline_err)?;
    let mut w = ArtifactWriter::new(out)?;

    let mut trace = Vec::new();
    write_trace(&Trace { frames: output.frames.clone(), truth: Some(output.truth.clone()) }, &mut trace)?;
    w.write("trace.csv", &trace)?;
    w.write("log.csv", &log_bytes(&output.rows())?)?;
    if models.is_some() {
        record_models(&mut w, models_dir)?;
    }

    let seed = match &cfg.scenario {
        ScenarioRef::Inline(s) => s.seed,
        ScenarioRef::Path(_) => 0,
    };
    let summary = RunSummary {
        run: 0,
        seed,
        attack: attack_label(cfg),
        detection: output.detection()?,
        accuracy: output.accuracy(&cfg.eval.rmse_window)?,
        accuracy_unmitigated: None,
    };
    w.write("report.json", serde_json::to_string_pretty(&summary)?.as_bytes())?;
    w.finish("manifest.json", "run", &config_json(cfg)?, vec![seed])?;

    let mitigation = output.records.iter().filter(|r| r.mode == Mode::Mitigation).count();
    let alarms = output.records.iter().filter(|r| r.alarm).count();
    println!("ticks {}  alarms {}  mitigation {}", output.records.len(), alarms, mitigation);
    if let Some(a) = &summary.accuracy {
        println!("rmse x {:.4}  y {:.4}  xy {:.4} m over {} ticks", a.rmse_x, a.rmse_y, a.rmse_xy, a.samples);
    }
    for (k, d) in &summary.detection {
        println!("{:<8} precision {:.3}  recall {:.3}  f1 {:.3}", k.name(), d.precision, d.recall, d.f1);
    }
    Ok(())
}

fn read_rows(path: &Path) -> anyhow::Result<Vec<LogRow>> {
    let file = std::fs::File::open(path).map_err(|e| config_error(format!("cannot open log {}: {e}", path.display())))?;
    read_log(file).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

/// Scores a log as if it had just been produced by `run`.
pub fn summarize_log(run: usize, rows: &[LogRow], window: &RmseWindow) -> anyhow::Result<RunSummary> {
    let times: Vec<f64> = rows.iter().map(|r| r.t).collect();
    let mask: Vec<bool> = rows.iter().map(|r| r.attack).collect();
    let mut detection = BTreeMap::new();
    if let Some(first) = rows.first() {
        for (j, cell) in first.detectors.iter().enumerate() {
            let alarms: Vec<bool> = rows.iter().map(|r| r.detectors[j].alarm).collect();
            detection.insert(cell.kind, score_alarms(&times, &alarms, &mask)?);
        }
    }
    let accuracy = if rows.iter().all(|r| r.truth.is_some()) {
        let sel = window.select(&times, &mask);
        if sel.iter().any(|&b| b) {
            let est: Vec<[f64; 2]> = rows.iter().map(|r| r.est).collect();
            let truth: Vec<[f64; 2]> = rows.iter().filter_map(|r| r.truth).collect();
            Some(score_rmse(&est, &truth, &sel)?)
        } else {
            None
        }
    } else {
        None
    };
    let attack = if mask.iter().any(|&m| m) { "attacked" } else { "none" };
    Ok(RunSummary { run, seed: 0, attack: attack.to_string(), detection, accuracy, accuracy_unmitigated: None })
}

pub fn cmd_eval(logs: &[PathBuf], out: &Path, window: &RmseWindow) -> anyhow::Result<()> {
    let mut runs = Vec::new();
    for (i, path) in logs.iter().enumerate() {
        runs.push(summarize_log(i, &read_rows(path)?, window)?);
    }
    let summary = aggregate(&runs)?;
    let tables = format_tables(&summary);
    let mut w = ArtifactWriter::new(out)?;
    w.write("eval_runs.json", serde_json::to_string_pretty(&runs)?.as_bytes())?;
    w.write("eval_summary.json", serde_json::to_string_pretty(&summary)?.as_bytes())?;
    w.write("eval_tables.txt", tables.as_bytes())?;
    let inputs: Vec<String> = logs.iter().map(|p| p.display().to_string()).collect();
    w.finish("manifest.json", "eval", &serde_json::to_string(&inputs)?, Vec::new())?;
    print!("{tables}");
    Ok(())
}

pub fn cmd_plot(log: &Path, out: &Path) -> anyhow::Result<()> {
    let rows = read_rows(log)?;
    let stem = log.file_stem().and_then(|s| s.to_str()).unwrap_or("log");
    let svg = plot::render(&rows, &log.display().to_string());
    let mut w = ArtifactWriter::new(out)?;
    let path = w.write(format!("{stem}.svg"), svg.as_bytes())?;
    w.finish("manifest.json", "plot", &serde_json::to_string(&log.display().to_string())?, Vec::new())?;
    println!("{}", path.display());
    Ok(())
}

pub fn cmd_campaign(loaded: &Loaded, out: &Path, models_dir: Option<&Path>) -> anyhow::Result<()> {
    let cfg = &loaded.config;
    let mut w = ArtifactWriter::new(out)?;
    let models = if cfg.detectors.enabled.is_empty() {
        None
    } else if let Some(dir) = models_dir {
        let models = load_models(dir)?;
        record_models(&mut w, dir)?;
        Some(models)
    } else {
        info!("no --models given: calibrating first");
        let (models, report) = calibrate(cfg, &loaded.base).map_err(pipeline_err)?;
        write_models(&mut w, "models", &models)?;
        w.write("calibration_report.json", serde_json::to_string_pretty(&report)?.as_bytes())?;
        Some(models)
    };
    let mut failure = None;
    let runs = run_campaign(cfg, models.as_ref(), |r| {
        if failure.is_none() {
            let name = format!("runs/{}_{:03}/log.csv", r.summary.attack, r.summary.run);
            info!("{name}");
            if let Err(e) = log_bytes(&r.output.rows()).and_then(|b| w.write(&name, &b)) {
                failure = Some(e);
            }
        }
        Ok(())
    })
    .map_err(pipeline_err)?;
    if let Some(e) = failure {
        return Err(e);
    }
    let summary = aggregate(&runs)?;
    let tables = format_tables(&summary);
    w.write("runs.json", serde_json::to_string_pretty(&runs)?.as_bytes())?;
    w.write("summary.json", serde_json::to_string_pretty(&summary)?.as_bytes())?;
    w.write("tables.txt", tables.as_bytes())?;
    let seeds = runs.iter().map(|r| r.seed).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    w.finish("manifest.json", "campaign", &config_json(cfg)?, seeds)?;
    info!("campaign kinds: {}", cfg.campaign.kinds.iter().map(|k| kind_label(*k)).collect::<Vec<_>>().join(", "));
    print!("{tables}");
    Ok(())
}
