//! Experiment orchestration: the seeds x attacks grid, resumable run
//! directories, and aggregated reports.
//!
//! Run directory layout:
//!
//! ```text
//! out/
//!   plan.lock                      resolved plan (hash goes in the manifest)
//!   run.manifest                   artifact checksums + failure markers
//!   checkpoints/seed-<s>.bfck      trained models
//!   checkpoints/seed-<s>-train.csv per-epoch training history
//!   traces/seed-<s>-attack-<a>.trace
//!   reports/goal_stats.csv
//!   reports/layer_breakdown.csv
//!   reports/gradient_summary.csv
//!   reports/curve.csv
//!   reports/summary.json
//! ```
//!
//! Cells whose artifact already exists and parses cleanly are skipped, so an
//! interrupted experiment resumes where it stopped (plan.lock must match).

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use bfa_core::analysis;
use bfa_core::attack::{run_attack, AttackConfig, AttackTrace};
use bfa_core::checkpoint::{self, fnv1a64};
use bfa_core::data::{sample_attack_set, Dataset};
use bfa_core::model::Model;
use bfa_core::train::train_with_progress;

use crate::config::{attack_config, AttackOverrides, ExperimentPlan};
use crate::manifest::RunManifest;

pub struct ExperimentOutcome {
    pub failures: Vec<(String, String)>,
    pub traces: usize,
}

/// Simple bounded worker pool over a list of jobs; results keep job order.
fn run_pool<T: Send, F: Fn(usize) -> T + Sync>(count: usize, jobs: usize, f: F) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..count).map(|_| None).collect());
    let workers = jobs.max(1).min(count.max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= count {
                    break;
                }
                let out = f(i);
                results.lock().expect("pool poisoned")[i] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .expect("pool poisoned")
        .into_iter()
        .map(|t| t.expect("job ran"))
        .collect()
}

pub fn run_experiment(
    plan: &ExperimentPlan,
    jobs: usize,
    progress: &(dyn Fn(String) + Sync),
) -> Result<ExperimentOutcome> {
    let out = &plan.out;
    std::fs::create_dir_all(out.join("checkpoints"))?;
    std::fs::create_dir_all(out.join("traces"))?;
    std::fs::create_dir_all(out.join("reports"))?;

    let sample_model = Model::from_arch_id(&plan.arch)?;
    let attack_base = attack_config(&plan.attack_template, &sample_model, &AttackOverrides::default())?;

    // plan.lock: refuse to mix plans in one directory.
    let lock_text = plan.canonical_text(&sample_model, &attack_base);
    let lock_path = out.join("plan.lock");
    if lock_path.exists() {
        let existing = std::fs::read_to_string(&lock_path)?;
        if existing != lock_text {
            bail!(
                "{} already holds a different plan; use a fresh --out or delete it",
                lock_path.display()
            );
        }
        progress(format!("resuming run in {}", out.display()));
    } else {
        std::fs::write(&lock_path, &lock_text)?;
    }
    let plan_hash = fnv1a64(lock_text.as_bytes());

    let dataset = plan.data.load()?;
    let mut manifest = RunManifest::new(plan_hash);
    manifest.record_file(out, "plan.lock")?;
    let mut failures: Vec<(String, String)> = Vec::new();

    // Phase 1: train every seed (or reuse cached checkpoints).
    let train_results = run_pool(plan.train_seeds.len(), jobs, |i| {
        let seed = plan.train_seeds[i];
        let rel = format!("checkpoints/seed-{seed}.bfck");
        let path = out.join(&rel);
        if let Ok(model) = checkpoint::load(&path) {
            progress(format!("[train seed {seed}] cached ({rel})"));
            return (seed, Ok(model));
        }
        progress(format!("[train seed {seed}] training {}", plan.arch));
        let mut config = plan.training.clone();
        config.seed = seed;
        let result = train_with_progress(&plan.arch, &dataset, &config, |epoch, stats| {
            progress(format!(
                "[train seed {seed}] epoch {epoch}: loss {:.4} train {:.4} test {:.4} lr {:.6}",
                stats.train_loss, stats.train_acc, stats.test_acc, stats.lr
            ));
        })
        .and_then(|(model, record)| {
            checkpoint::save(&model, &path)?;
            std::fs::write(out.join(format!("checkpoints/seed-{seed}-train.csv")), record.to_csv())?;
            Ok(model)
        });
        (seed, result)
    });

    let mut models: Vec<(u64, Model)> = Vec::new();
    for (seed, result) in train_results {
        let rel = format!("checkpoints/seed-{seed}.bfck");
        match result {
            Ok(model) => {
                manifest.record_file(out, &rel)?;
                let csv_rel = format!("checkpoints/seed-{seed}-train.csv");
                if out.join(&csv_rel).exists() {
                    manifest.record_file(out, &csv_rel)?;
                }
                models.push((seed, model));
            }
            Err(e) => {
                progress(format!("[train seed {seed}] FAILED: {e}"));
                manifest.record_failure(&rel, &e.to_string());
                failures.push((rel, e.to_string()));
            }
        }
    }

    // Phase 2: the attacks grid over successfully trained models.
    let cells: Vec<(usize, u64)> = (0..models.len())
        .flat_map(|mi| plan.attack_seeds.iter().map(move |&a| (mi, a)))
        .collect();
    let attack_results = run_pool(cells.len(), jobs, |i| {
        let (mi, attack_seed) = cells[i];
        let (train_seed, model) = &models[mi];
        let rel = format!("traces/seed-{train_seed}-attack-{attack_seed}.trace");
        let path = out.join(&rel);
        if let Ok(trace) = AttackTrace::load(&path) {
            progress(format!("[attack {train_seed}/{attack_seed}] cached"));
            return (rel, *train_seed, Ok(trace));
        }
        progress(format!("[attack {train_seed}/{attack_seed}] running"));
        let mut config = attack_base.clone();
        config.seed = attack_seed;
        let result = run_attack(model, &dataset, &config).and_then(|trace| {
            trace.save(&path)?;
            Ok(trace)
        });
        if let Ok(t) = &result {
            progress(format!(
                "[attack {train_seed}/{attack_seed}] {} after {} flips (acc {:.4} -> {:.4})",
                t.termination,
                t.records.len(),
                t.baseline_acc,
                t.records.last().map_or(t.baseline_acc, |r| r.post_acc)
            ));
        }
        (rel, *train_seed, result)
    });

    let mut traces: Vec<(u64, AttackTrace)> = Vec::new();
    for (rel, train_seed, result) in attack_results {
        match result {
            Ok(trace) => {
                manifest.record_file(out, &rel)?;
                traces.push((train_seed, trace));
            }
            Err(e) => {
                progress(format!("[attack] {rel} FAILED: {e}"));
                manifest.record_failure(&rel, &e.to_string());
                failures.push((rel, e.to_string()));
            }
        }
    }

    // Phase 3: aggregated reports over whatever succeeded.
    write_reports(out, plan, &attack_base, &dataset, &models, &traces, &failures)
        .context("writing reports")?;
    for rel in [
        "reports/goal_stats.csv",
        "reports/layer_breakdown.csv",
        "reports/gradient_summary.csv",
        "reports/curve.csv",
        "reports/summary.json",
    ] {
        if out.join(rel).exists() {
            manifest.record_file(out, rel)?;
        }
    }
    manifest.save(out)?;
    Ok(ExperimentOutcome {
        failures,
        traces: traces.len(),
    })
}

fn write_reports(
    out: &Path,
    plan: &ExperimentPlan,
    attack_base: &AttackConfig,
    dataset: &Dataset,
    models: &[(u64, Model)],
    traces: &[(u64, AttackTrace)],
    failures: &[(String, String)],
) -> Result<()> {
    let pairs: Vec<(u64, &AttackTrace)> = traces.iter().map(|(s, t)| (*s, t)).collect();
    let by_seed = analysis::group_by_seed(&pairs);
    let stats = analysis::goal_stats(&by_seed, &attack_base.goals);
    std::fs::write(out.join("reports/goal_stats.csv"), stats.to_csv())?;

    let trace_refs: Vec<&AttackTrace> = traces.iter().map(|(_, t)| t).collect();
    if let Some((_, sample_model)) = models.first() {
        if !trace_refs.is_empty() {
            let breakdown = analysis::layer_breakdown(sample_model, &trace_refs)?;
            std::fs::write(out.join("reports/layer_breakdown.csv"), breakdown.to_csv())?;
        }
    }

    // Pre-attack gradient distribution per trained model, on the attack set
    // of the first attack seed.
    if let Some(&first_attack_seed) = plan.attack_seeds.first() {
        let mut csv = String::from("train_seed,layer,name,min,q1,median,q3,max,mean\n");
        for (seed, model) in models {
            let batch = sample_attack_set(dataset, attack_base.attack_set_size, first_attack_seed)?;
            let summary = analysis::gradient_summary(model, &batch)?;
            for l in &summary.layers {
                csv.push_str(&format!(
                    "{seed},{},{},{},{},{},{},{},{}\n",
                    l.layer, l.name, l.min, l.q1, l.median, l.q3, l.max, l.mean
                ));
            }
        }
        std::fs::write(out.join("reports/gradient_summary.csv"), csv)?;
    }

    let curve = analysis::accuracy_curve(&trace_refs);
    std::fs::write(out.join("reports/curve.csv"), analysis::curve_to_csv(&curve))?;

    // Machine-readable summary.
    let goal_cells: Vec<serde_json::Value> = stats
        .cells
        .iter()
        .map(|c| {
            serde_json::json!({
                "goal": c.goal,
                "train_seed": c.train_seed,
                "mean": c.mean,
                "std": c.std,
                "reached": c.reached,
                "attacks": c.total,
            })
        })
        .collect();
    let pooled: Vec<serde_json::Value> = attack_base
        .goals
        .iter()
        .map(|&g| serde_json::json!({"goal": g, "mean_flips": stats.pooled_mean(g)}))
        .collect();
    let accs: Vec<serde_json::Value> = models
        .iter()
        .map(|(s, m)| serde_json::json!({"train_seed": s, "test_accuracy": m.provenance.final_test_accuracy}))
        .collect();
    let breakdown_json = if trace_refs.is_empty() {
        serde_json::Value::Null
    } else if let Some((_, m)) = models.first() {
        let breakdown = analysis::layer_breakdown(m, &trace_refs)?;
        serde_json::Value::Array(
            breakdown
                .layers
                .iter()
                .map(|l| {
                    serde_json::json!({
                        "layer": l.layer,
                        "name": l.name,
                        "flips_pct": l.flip_pct,
                        "damage_pct": l.damage_pct,
                    })
                })
                .collect(),
        )
    } else {
        serde_json::Value::Null
    };
    let summary = serde_json::json!({
        "arch": plan.arch,
        "goals": attack_base.goals,
        "eval_subsample": attack_base.eval_subsample,
        "train_seeds": plan.train_seeds,
        "attack_seeds": plan.attack_seeds,
        "final_test_accuracy": accs,
        "goal_stats": goal_cells,
        "pooled_mean_flips": pooled,
        "layer_breakdown": breakdown_json,
        "failures": failures.iter().map(|(rel, msg)| serde_json::json!([rel, msg])).collect::<Vec<_>>(),
    });
    std::fs::write(
        out.join("reports/summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_preserves_job_order_and_runs_everything() {
        let results = run_pool(17, 4, |i| i * 2);
        assert_eq!(results, (0..17).map(|i| i * 2).collect::<Vec<_>>());
        let results = run_pool(3, 1, |i| i);
        assert_eq!(results, vec![0, 1, 2]);
        let results: Vec<usize> = run_pool(0, 2, |i| i);
        assert!(results.is_empty());
    }
}
