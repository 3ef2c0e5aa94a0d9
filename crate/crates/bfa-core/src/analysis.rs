//! Evaluation metrics over attack traces and models: goal statistics,
//! per-layer flip/damage breakdowns, gradient summaries, weight histograms.

use std::collections::BTreeMap;

use crate::attack::AttackTrace;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::Model;

/// Flips-to-goal statistics for one (goal, trained seed) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalCell {
    pub goal: f64,
    pub train_seed: u64,
    /// Mean over attacks that reached the goal.
    pub mean: Option<f64>,
    /// Population standard deviation over reached attacks.
    pub std: Option<f64>,
    pub reached: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GoalStats {
    pub cells: Vec<GoalCell>,
}

impl GoalStats {
    /// Pools every seed's attacks together for one goal.
    pub fn pooled_mean(&self, goal: f64) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in self.cells.iter().filter(|c| c.goal == goal) {
            if let Some(m) = c.mean {
                sum += m * c.reached as f64;
                n += c.reached;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("goal,train_seed,mean_flips,std_flips,reached,attacks\n");
        for c in &self.cells {
            let mean = c.mean.map_or("n/a".to_string(), |m| m.to_string());
            let std = c.std.map_or("n/a".to_string(), |s| s.to_string());
            out.push_str(&format!("{},{},{mean},{std},{},{}\n", c.goal, c.train_seed, c.reached, c.total));
        }
        out
    }
}

/// Mean/std of flips-to-goal per (goal, seed), unreached runs counted apart.
pub fn goal_stats(traces_by_seed: &[(u64, Vec<&AttackTrace>)], goals: &[f64]) -> GoalStats {
    let mut cells = Vec::new();
    for &goal in goals {
        for (seed, traces) in traces_by_seed {
            let steps: Vec<f64> = traces
                .iter()
                .filter_map(|t| t.crossing(goal))
                .map(|s| s as f64)
                .collect();
            let reached = steps.len();
            let (mean, std) = if reached == 0 {
                (None, None)
            } else {
                let m = steps.iter().sum::<f64>() / reached as f64;
                let var = steps.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / reached as f64;
                (Some(m), Some(var.sqrt()))
            };
            cells.push(GoalCell {
                goal,
                train_seed: *seed,
                mean,
                std,
                reached,
                total: traces.len(),
            });
        }
    }
    GoalStats { cells }
}

/// Per-layer share of flips and of the total accuracy drop.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerShare {
    pub layer: usize,
    pub name: String,
    pub flip_pct: f64,
    /// `None` when the total accuracy drop is zero.
    pub damage_pct: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerBreakdown {
    pub layers: Vec<LayerShare>,
    pub total_flips: usize,
}

impl LayerBreakdown {
    pub fn flip_pct(&self, layer: usize) -> f64 {
        self.layers.iter().find(|l| l.layer == layer).map_or(0.0, |l| l.flip_pct)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,name,flips_pct,damage_pct\n");
        for l in &self.layers {
            let d = l.damage_pct.map_or("n/a".to_string(), |d| d.to_string());
            out.push_str(&format!("{},{},{},{d}\n", l.layer, l.name, l.flip_pct));
        }
        out
    }
}

/// Flip distribution and damage contribution per weighted layer, pooled
/// over all given traces. Damage is each layer's summed per-flip accuracy
/// drop (negative drops clamped to zero) over the total.
pub fn layer_breakdown(model: &Model, traces: &[&AttackTrace]) -> Result<LayerBreakdown> {
    if traces.is_empty() {
        return Err(Error::InvalidArgument("no traces".into()));
    }
    let layer_count = model.weighted_layers().len();
    let mut flips = vec![0usize; layer_count];
    let mut damage = vec![0.0f64; layer_count];
    let mut total_flips = 0usize;
    for t in traces {
        for r in &t.records {
            if r.addr.layer >= layer_count {
                return Err(Error::InvalidArgument(format!(
                    "trace layer {} out of range for {}",
                    r.addr.layer, model.arch_id
                )));
            }
            flips[r.addr.layer] += 1;
            damage[r.addr.layer] += (r.pre_acc - r.post_acc).max(0.0);
            total_flips += 1;
        }
    }
    if total_flips == 0 {
        return Err(Error::InvalidArgument("traces contain no flips".into()));
    }
    let total_damage: f64 = damage.iter().sum();
    let layers = (0..layer_count)
        .map(|i| LayerShare {
            layer: i,
            name: model.weighted_layer_name(i),
            flip_pct: 100.0 * flips[i] as f64 / total_flips as f64,
            damage_pct: (total_damage > 0.0).then(|| 100.0 * damage[i] / total_damage),
        })
        .collect();
    Ok(LayerBreakdown { layers, total_flips })
}

/// Order statistics of |∇w L| for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradientSummary {
    pub layer: usize,
    pub name: String,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSummary {
    pub layers: Vec<LayerGradientSummary>,
}

impl GradientSummary {
    pub fn median(&self, layer: usize) -> Option<f64> {
        self.layers.iter().find(|l| l.layer == layer).map(|l| l.median)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,name,min,q1,median,q3,max,mean\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                l.layer, l.name, l.min, l.q1, l.median, l.q3, l.max, l.mean
            ));
        }
        out
    }
}

/// Linear-interpolation quantile of sorted data (numpy default convention).
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// |∇w L| distribution per weighted layer over the given attack batch.
pub fn gradient_summary(model: &Model, attack_batch: &Batch) -> Result<GradientSummary> {
    let (_, mut state) = model.forward_cached(&attack_batch.inputs, None)?;
    model.backward(&mut state, &attack_batch.labels)?;
    let mut layers = Vec::new();
    for (ordinal, _) in model.weighted_layers().iter().enumerate() {
        let grad = model
            .weighted_grad(&state, ordinal)
            .ok_or_else(|| Error::InvalidArgument("missing gradient".into()))?;
        let mut mags: Vec<f64> = grad.w.values().iter().map(|g| g.abs()).collect();
        mags.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let mean = mags.iter().sum::<f64>() / mags.len() as f64;
        layers.push(LayerGradientSummary {
            layer: ordinal,
            name: model.weighted_layer_name(ordinal),
            min: mags[0],
            q1: quantile(&mags, 0.25),
            median: quantile(&mags, 0.5),
            q3: quantile(&mags, 0.75),
            max: *mags.last().expect("nonempty"),
            mean,
        });
    }
    Ok(GradientSummary { layers })
}

/// Histogram of one layer's dequantized weight values.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerHistogram {
    pub layer: usize,
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl LayerHistogram {
    pub fn bin_edges(&self, bin: usize) -> (f64, f64) {
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + bin as f64 * width, self.lo + (bin + 1) as f64 * width)
    }
}

/// Per-layer histograms over dequantized weights; counts sum to the weight
/// count. A constant layer collapses into a single occupied bin.
pub fn weight_histogram(model: &Model, bins: usize) -> Result<Vec<LayerHistogram>> {
    if bins < 2 {
        return Err(Error::InvalidArgument("bins must be >= 2".into()));
    }
    let mut out = Vec::new();
    for (ordinal, _) in model.weighted_layers().iter().enumerate() {
        let values = model.weighted_params(ordinal).expect("weighted").effective().values();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let mut counts = vec![0usize; bins];
        if hi > lo {
            let inv = bins as f64 / (hi - lo);
            for &v in values {
                let b = (((v - lo) * inv) as usize).min(bins - 1);
                counts[b] += 1;
            }
        } else {
            counts[0] = values.len();
        }
        out.push(LayerHistogram {
            layer: ordinal,
            name: model.weighted_layer_name(ordinal),
            lo,
            hi,
            counts,
        });
    }
    Ok(out)
}

pub fn histograms_to_csv(hists: &[LayerHistogram]) -> String {
    let mut out = String::from("layer,name,bin_lo,bin_hi,count\n");
    for h in hists {
        for (b, &c) in h.counts.iter().enumerate() {
            let (lo, hi) = h.bin_edges(b);
            out.push_str(&format!("{},{},{lo},{hi},{c}\n", h.layer, h.name));
        }
    }
    out
}

/// Accuracy-vs-flips curve pooled over traces: row k holds the mean and
/// population std of accuracy after k flips (finished traces carry their
/// final accuracy forward).
pub fn accuracy_curve(traces: &[&AttackTrace]) -> Vec<(usize, f64, f64)> {
    if traces.is_empty() {
        return Vec::new();
    }
    let max_len = traces.iter().map(|t| t.records.len()).max().unwrap_or(0);
    let mut rows = Vec::with_capacity(max_len + 1);
    for k in 0..=max_len {
        let accs: Vec<f64> = traces
            .iter()
            .map(|t| {
                if k == 0 {
                    t.baseline_acc
                } else if k <= t.records.len() {
                    t.records[k - 1].post_acc
                } else {
                    t.records.last().map_or(t.baseline_acc, |r| r.post_acc)
                }
            })
            .collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;
        rows.push((k, mean, var.sqrt()));
    }
    rows
}

pub fn curve_to_csv(rows: &[(usize, f64, f64)]) -> String {
    let mut out = String::from("flips,mean_acc,std_acc\n");
    for (k, mean, std) in rows {
        out.push_str(&format!("{k},{mean},{std}\n"));
    }
    out
}

/// Groups traces by training seed (stable order by seed).
pub fn group_by_seed<'t>(pairs: &[(u64, &'t AttackTrace)]) -> Vec<(u64, Vec<&'t AttackTrace>)> {
    let mut map: BTreeMap<u64, Vec<&AttackTrace>> = BTreeMap::new();
    for (seed, trace) in pairs {
        map.entry(*seed).or_default().push(trace);
    }
    map.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{FlipRecord, Heuristic, Termination};
    use crate::quant::BitAddress;

    fn trace_with(crossings: &[(f64, Option<usize>)], records: Vec<FlipRecord>) -> AttackTrace {
        AttackTrace {
            arch_id: "mlp-4-2".into(),
            attack_seed: 0,
            heuristic: Heuristic::Gradient,
            mask: None,
            goals: crossings.iter().map(|(g, _)| *g).collect(),
            budget: 100,
            attack_set_size: 16,
            eval_subsample: 0,
            baseline_loss: 0.1,
            baseline_acc: 0.95,
            records,
            goal_crossings: crossings.iter().map(|(_, c)| *c).collect(),
            termination: Termination::GoalReached,
        }
    }

    fn record(step: usize, layer: usize, pre_acc: f64, post_acc: f64) -> FlipRecord {
        FlipRecord {
            step,
            addr: BitAddress { layer, index: 0, bit: 7 },
            pre_loss: 0.0,
            post_loss: 1.0,
            pre_acc,
            post_acc,
        }
    }

    #[test]
    fn goal_stats_mean_and_population_std() {
        let traces: Vec<AttackTrace> = [8, 9, 8, 10, 9]
            .iter()
            .map(|&s| trace_with(&[(0.25, Some(s))], vec![]))
            .collect();
        let refs: Vec<&AttackTrace> = traces.iter().collect();
        let stats = goal_stats(&[(1, refs)], &[0.25]);
        let cell = &stats.cells[0];
        assert!((cell.mean.unwrap() - 8.8).abs() < 1e-12);
        assert!((cell.std.unwrap() - 0.7483314773547883).abs() < 1e-12);
        assert_eq!(cell.reached, 5);
    }

    #[test]
    fn goal_stats_single_trace_and_unreached() {
        let one = trace_with(&[(0.5, Some(4))], vec![]);
        let stats = goal_stats(&[(7, vec![&one])], &[0.5]);
        assert_eq!(stats.cells[0].std, Some(0.0));
        let never = trace_with(&[(0.1, None)], vec![]);
        let never2 = trace_with(&[(0.1, None)], vec![]);
        let stats = goal_stats(&[(7, vec![&never, &never2])], &[0.1]);
        assert_eq!(stats.cells[0].reached, 0);
        assert_eq!(stats.cells[0].total, 2);
        assert_eq!(stats.cells[0].mean, None);
    }

    #[test]
    fn goal_stats_permutation_invariant() {
        let t1 = trace_with(&[(0.25, Some(3))], vec![]);
        let t2 = trace_with(&[(0.25, Some(9))], vec![]);
        let t3 = trace_with(&[(0.25, Some(5))], vec![]);
        let a = goal_stats(&[(1, vec![&t1, &t2, &t3])], &[0.25]);
        let b = goal_stats(&[(1, vec![&t3, &t1, &t2])], &[0.25]);
        assert_eq!(a, b);
    }

    #[test]
    fn single_flip_trace_gets_full_shares() {
        let model = Model::mlp_from_dims(&[4, 3, 2]).unwrap();
        let t = trace_with(&[(0.5, Some(1))], vec![record(1, 1, 0.9, 0.4)]);
        let bd = layer_breakdown(&model, &[&t]).unwrap();
        assert_eq!(bd.flip_pct(1), 100.0);
        assert_eq!(bd.layers[1].damage_pct, Some(100.0));
        assert_eq!(bd.flip_pct(0), 0.0);
    }

    #[test]
    fn breakdown_shares_sum_to_100() {
        let model = Model::mlp_from_dims(&[4, 3, 3, 2]).unwrap();
        let t = trace_with(
            &[(0.5, Some(4))],
            vec![
                record(1, 2, 0.9, 0.7),
                record(2, 1, 0.7, 0.72), // accuracy went up: clamped to 0 damage
                record(3, 2, 0.72, 0.5),
                record(4, 0, 0.5, 0.4),
            ],
        );
        let bd = layer_breakdown(&model, &[&t]).unwrap();
        let flips: f64 = bd.layers.iter().map(|l| l.flip_pct).sum();
        let damage: f64 = bd.layers.iter().map(|l| l.damage_pct.unwrap()).sum();
        assert!((flips - 100.0).abs() < 0.1);
        assert!((damage - 100.0).abs() < 0.1);
        assert_eq!(bd.layers[1].damage_pct, Some(0.0));
    }

    #[test]
    fn zero_total_drop_reports_na() {
        let model = Model::mlp_from_dims(&[4, 2]).unwrap();
        let t = trace_with(&[(0.5, None)], vec![record(1, 0, 0.9, 0.9)]);
        let bd = layer_breakdown(&model, &[&t]).unwrap();
        assert_eq!(bd.layers[0].damage_pct, None);
    }

    #[test]
    fn gradient_summary_ordering_and_zero_input() {
        use crate::data::Batch;
        use crate::tensor::Tensor;
        let mut model = Model::mlp_from_dims(&[3, 4, 2]).unwrap();
        crate::train::init_model(&mut model, crate::train::InitScheme::XavierUniform, 3);
        let zero = Batch::new(Tensor::from_values(&[2, 3], vec![0.0; 6]).unwrap(), vec![0, 1], 2).unwrap();
        let summary = gradient_summary(&model, &zero).unwrap();
        let first = &summary.layers[0];
        assert_eq!(first.max, 0.0, "zero inputs kill first-layer gradients");
        for l in &summary.layers {
            assert!(l.min <= l.q1 && l.q1 <= l.median && l.median <= l.q3 && l.q3 <= l.max);
        }
    }

    #[test]
    fn histogram_conserves_counts() {
        let mut model = Model::mlp_from_dims(&[5, 4, 2]).unwrap();
        crate::train::init_model(&mut model, crate::train::InitScheme::Uniform, 8);
        let hists = weight_histogram(&model, 11).unwrap();
        for (ordinal, h) in hists.iter().enumerate() {
            let total: usize = h.counts.iter().sum();
            assert_eq!(total, model.weighted_params(ordinal).unwrap().shadow.len());
        }
        assert!(weight_histogram(&model, 1).is_err());
    }

    #[test]
    fn all_zero_layer_single_bin() {
        let model = Model::mlp_from_dims(&[3, 2]).unwrap(); // zero-initialized
        let hists = weight_histogram(&model, 7).unwrap();
        let occupied = hists[0].counts.iter().filter(|&&c| c > 0).count();
        assert_eq!(occupied, 1);
        assert_eq!(hists[0].counts[0], 6);
    }

    #[test]
    fn symmetric_init_histogram_is_roughly_symmetric() {
        let mut model = Model::mlp_from_dims(&[500, 200, 2]).unwrap();
        crate::train::init_model(&mut model, crate::train::InitScheme::Normal, 4);
        let w = model.weighted_params(0).unwrap().effective().values();
        assert!(w.len() == 100_000);
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let m2 = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let m3 = w.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
        let skew = m3 / m2.powf(1.5);
        assert!(skew.abs() < 0.2, "skew {skew}");
    }

    #[test]
    fn curve_rows_and_padding() {
        let t1 = trace_with(&[(0.5, Some(2))], vec![record(1, 0, 0.9, 0.6), record(2, 0, 0.6, 0.4)]);
        let t2 = trace_with(&[(0.5, Some(1))], vec![record(1, 0, 0.9, 0.45)]);
        let rows = accuracy_curve(&[&t1, &t2]);
        assert_eq!(rows.len(), 3); // max trace length + 1
        assert_eq!(rows[0].0, 0);
        assert!((rows[0].1 - 0.95).abs() < 1e-12);
        // t2 finished at 0.45; row 2 pools (0.4, 0.45)
        assert!((rows[2].1 - 0.425).abs() < 1e-12);
    }
}
