//! The individual CLI commands; `main` maps their results to exit codes.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bfa_core::analysis;
use bfa_core::attack::{run_attack, Termination};
use bfa_core::checkpoint;
use bfa_core::data::sample_attack_set;
use bfa_core::train::train_with_progress;

use crate::config::{
    attack_config, check_attack_file, check_train_file, data_spec, training_config, AttackOverrides,
    RawConfig,
};
use crate::manifest::{verify_dir, RunManifest};

pub fn cmd_train(
    config_path: &Path,
    data_dir: Option<&PathBuf>,
    out: &Path,
    seed_override: Option<u64>,
) -> Result<PathBuf> {
    let raw = RawConfig::load(config_path)?;
    check_train_file(&raw)?;
    let (arch, config) = training_config(&raw, seed_override)?;
    let dataset = data_spec(&raw, data_dir)?.load()?;

    std::fs::create_dir_all(out)?;
    eprintln!("training {arch} (seed {}, {} epochs)", config.seed, config.epochs);
    let (model, record) = train_with_progress(&arch, &dataset, &config, |epoch, s| {
        eprintln!(
            "epoch {epoch}: loss {:.4} train_acc {:.4} test_acc {:.4} lr {:.6}",
            s.train_loss, s.train_acc, s.test_acc, s.lr
        );
    })?;

    let ckpt_path = out.join("checkpoint.bfck");
    checkpoint::save(&model, &ckpt_path)?;
    std::fs::write(out.join("train.csv"), record.to_csv())?;
    let mut manifest = RunManifest::new(0);
    manifest.record_file(out, "checkpoint.bfck")?;
    manifest.record_file(out, "train.csv")?;
    manifest.save(out)?;
    println!("{}", ckpt_path.display());
    Ok(ckpt_path)
}

pub struct AttackOutcome {
    pub trace_path: PathBuf,
    pub termination: Termination,
}

pub fn cmd_attack(
    checkpoint_path: &Path,
    config_path: Option<&PathBuf>,
    data_dir: Option<&PathBuf>,
    out: &Path,
    overrides: &AttackOverrides,
) -> Result<AttackOutcome> {
    let model = checkpoint::load(checkpoint_path)
        .with_context(|| format!("loading checkpoint {}", checkpoint_path.display()))?;
    let raw = match config_path {
        Some(p) => RawConfig::load(p)?,
        None => RawConfig::default(),
    };
    check_attack_file(&raw)?;
    let config = attack_config(&raw, &model, overrides)?;
    let dataset = data_spec(&raw, data_dir)?.load()?;

    eprintln!(
        "attacking {} (seed {}, budget {}, heuristic {}, goals {:?})",
        model.arch_id, config.seed, config.budget, config.heuristic, config.goals
    );
    let trace = run_attack(&model, &dataset, &config)?;

    std::fs::create_dir_all(out)?;
    let trace_path = out.join(format!("attack-{}.trace", config.seed));
    trace.save(&trace_path)?;
    for (goal, crossing) in trace.goals.iter().zip(&trace.goal_crossings) {
        match crossing {
            Some(step) => eprintln!("goal {goal}: reached at flip {step}"),
            None => eprintln!("goal {goal}: not reached within budget"),
        }
    }
    eprintln!(
        "termination: {} after {} flips (accuracy {:.4} -> {:.4})",
        trace.termination,
        trace.records.len(),
        trace.baseline_acc,
        trace.records.last().map_or(trace.baseline_acc, |r| r.post_acc)
    );
    println!("{}", trace_path.display());
    Ok(AttackOutcome {
        trace_path,
        termination: trace.termination,
    })
}

/// Side-by-side goal statistics across report directories; all reports must
/// share the same goal list. Returns the rendered table.
pub fn cmd_compare(dirs: &[PathBuf]) -> Result<String> {
    if dirs.len() < 2 {
        bail!("compare needs at least two report directories");
    }
    let mut summaries = Vec::new();
    for dir in dirs {
        verify_dir(dir).with_context(|| format!("verifying {}", dir.display()))?;
        let text = std::fs::read_to_string(dir.join("reports/summary.json"))
            .with_context(|| format!("reading summary in {}", dir.display()))?;
        let json: serde_json::Value = serde_json::from_str(&text)?;
        summaries.push((dir, json));
    }
    let goals: Vec<f64> = summaries[0]
        .1
        .get("goals")
        .and_then(|g| g.as_array())
        .map(|a| a.iter().filter_map(|v| v.as_f64()).collect())
        .unwrap_or_default();
    for (dir, json) in &summaries[1..] {
        let other: Vec<f64> = json
            .get("goals")
            .and_then(|g| g.as_array())
            .map(|a| a.iter().filter_map(|v| v.as_f64()).collect())
            .unwrap_or_default();
        if other != goals {
            bail!(
                "incompatible goals: {} has {:?}, {} has {:?}",
                summaries[0].0.display(),
                goals,
                dir.display(),
                other
            );
        }
    }

    let mean_for = |json: &serde_json::Value, goal: f64| -> Option<f64> {
        json.get("pooled_mean_flips")?
            .as_array()?
            .iter()
            .find(|v| v.get("goal").and_then(|g| g.as_f64()) == Some(goal))?
            .get("mean_flips")?
            .as_f64()
    };

    let mut table = String::new();
    table.push_str("goal");
    for (dir, _) in &summaries {
        table.push_str(&format!(",{}", dir.display()));
    }
    for (dir, _) in &summaries[1..] {
        table.push_str(&format!(",delta({})", dir.display()));
    }
    table.push('\n');
    for &goal in &goals {
        table.push_str(&goal.to_string());
        let base = mean_for(&summaries[0].1, goal);
        for (_, json) in &summaries {
            match mean_for(json, goal) {
                Some(m) => table.push_str(&format!(",{m}")),
                None => table.push_str(",n/a"),
            }
        }
        for (_, json) in &summaries[1..] {
            match (base, mean_for(json, goal)) {
                (Some(b), Some(m)) => table.push_str(&format!(",{}", m - b)),
                _ => table.push_str(",n/a"),
            }
        }
        table.push('\n');
    }
    Ok(table)
}

pub fn cmd_grad_stats(
    checkpoint_path: &Path,
    config_path: Option<&PathBuf>,
    data_dir: Option<&PathBuf>,
    attack_set_size: usize,
    seed: u64,
    out: Option<&PathBuf>,
) -> Result<()> {
    let model = checkpoint::load(checkpoint_path)?;
    let raw = match config_path {
        Some(p) => RawConfig::load(p)?,
        None => RawConfig::default(),
    };
    let dataset = data_spec(&raw, data_dir)?.load()?;
    let batch = sample_attack_set(&dataset, attack_set_size, seed)?;
    let summary = analysis::gradient_summary(&model, &batch)?;
    emit(out, summary.to_csv())
}

pub fn cmd_hist(checkpoint_path: &Path, bins: usize, out: Option<&PathBuf>) -> Result<()> {
    let model = checkpoint::load(checkpoint_path)?;
    let hists = analysis::weight_histogram(&model, bins)?;
    emit(out, analysis::histograms_to_csv(&hists))
}

fn emit(out: Option<&PathBuf>, csv: String) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, csv)?;
            println!("{}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}
