//! The bit-flip attack: per-bit gradient ranking, progressive bit search,
//! and full attack runs with goal tracking.
//!
//! One attack iteration:
//!
//! 1. compute loss gradients on the attack set with the current (possibly
//!    already-flipped) quantized weights;
//! 2. in-layer search: in every masked layer, rank bits by |∇b L| (or by the
//!    Taylor saliency |w·∇w L|) and keep the top candidates whose flip rule
//!    direction actually changes the stored bit;
//! 3. cross-layer search: tentatively flip each candidate, measure the
//!    attack-set loss, restore, and keep the candidate with maximal loss;
//! 4. apply that flip permanently and measure accuracy on the evaluation
//!    set, recording goal crossings.
//!
//! The flip direction follows the gradient-ascent rule
//! `m = b XOR (sign(∇b L)/2 + 0.5)`, `b_hat = b XOR m`: positive bit
//! gradient drives the bit to 1, negative to 0, and a no-op means the bit
//! is already where ascent wants it. Ties anywhere break by
//! (layer, weight index, bit) ascending so reruns are identical.

use std::fmt;
use std::str::FromStr;

use crate::data::{sample_attack_set, subsample_indices, Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::{BackwardState, Model};
use crate::quant::{bit_grad, bit_is_set, BitAddress};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heuristic {
    /// Rank bits by |∇b L|.
    Gradient,
    /// Rank weights by |w · ∇w L|, then take the strongest admissible bit.
    Taylor,
}

impl fmt::Display for Heuristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Heuristic::Gradient => write!(f, "gradient"),
            Heuristic::Taylor => write!(f, "taylor"),
        }
    }
}

impl FromStr for Heuristic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Heuristic> {
        match s {
            "gradient" => Ok(Heuristic::Gradient),
            "taylor" => Ok(Heuristic::Taylor),
            other => Err(Error::InvalidArgument(format!(
                "unknown heuristic {other:?} (gradient, taylor)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// Samples drawn (without replacement) from the train set.
    pub attack_set_size: usize,
    /// Accuracy goals in (0, 1); the attack stops at the lowest one.
    pub goals: Vec<f64>,
    /// Maximum number of permanent flips.
    pub budget: usize,
    /// Attackable weighted-layer ordinals; `None` = all (standard BFA),
    /// a subset = spatially-targeted BFA.
    pub layer_mask: Option<Vec<usize>>,
    pub heuristic: Heuristic,
    /// Candidates kept per layer in the in-layer search (n_b).
    pub candidates_per_layer: usize,
    /// Test-set subsample size for goal checks; 0 = full test set.
    pub eval_subsample: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            attack_set_size: 256,
            goals: vec![0.75, 0.50, 0.25, 0.11],
            budget: 100,
            layer_mask: None,
            heuristic: Heuristic::Gradient,
            candidates_per_layer: 1,
            eval_subsample: 0,
            seed: 1,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.goals.is_empty() {
            return Err(Error::InvalidArgument("no goals configured".into()));
        }
        if let Some(&g) = self.goals.iter().find(|g| !(0.0 < **g && **g < 1.0)) {
            return Err(Error::InvalidArgument(format!("goal {g} out of (0,1)")));
        }
        if self.budget == 0 {
            return Err(Error::InvalidArgument("budget must be >= 1".into()));
        }
        if self.candidates_per_layer == 0 {
            return Err(Error::InvalidArgument("candidates_per_layer must be >= 1".into()));
        }
        if self.attack_set_size == 0 {
            return Err(Error::InvalidArgument("attack_set_size must be >= 1".into()));
        }
        let weighted = model.weighted_layers().len();
        match &self.layer_mask {
            Some(mask) if mask.is_empty() => Err(Error::InvalidArgument("empty layer mask".into())),
            Some(mask) => {
                if let Some(&bad) = mask.iter().find(|&&m| m >= weighted) {
                    return Err(Error::InvalidArgument(format!(
                        "mask layer {bad} out of range ({} weighted layers)",
                        weighted
                    )));
                }
                Ok(())
            }
            None => Ok(()),
        }
    }

    /// The masked ordinals, ascending and deduplicated.
    pub fn masked_layers(&self, model: &Model) -> Vec<usize> {
        match &self.layer_mask {
            None => (0..model.weighted_layers().len()).collect(),
            Some(mask) => {
                let mut m = mask.clone();
                m.sort_unstable();
                m.dedup();
                m
            }
        }
    }

    /// Canonical key=value rendering (used in traces and plan hashing).
    pub fn canonical_text(&self) -> String {
        let mask = match &self.layer_mask {
            None => "all".to_string(),
            Some(m) => m.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
        };
        let goals = self.goals.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "attack_set_size = {}\ngoals = {goals}\nbudget = {}\nmask = {mask}\nheuristic = {}\ncandidates_per_layer = {}\neval_subsample = {}\nseed = {}\n",
            self.attack_set_size, self.budget, self.heuristic, self.candidates_per_layer, self.eval_subsample, self.seed
        )
    }
}

/// One proposed flip from the in-layer search.
#[derive(Debug, Clone, Copy)]
pub struct FlipCandidate {
    pub addr: BitAddress,
    /// Stored bit before the flip.
    pub bit_before: u8,
    /// Loss gradient along the bit coordinate.
    pub bit_grad: f64,
    /// Bit value the flip rule drives toward.
    pub bit_after: u8,
    /// Attack-set loss after tentatively applying the flip.
    pub loss_after: f64,
}

/// One permanent flip with its measured effect.
#[derive(Debug, Clone, PartialEq)]
pub struct FlipRecord {
    pub step: usize,
    pub addr: BitAddress,
    pub pre_loss: f64,
    pub post_loss: f64,
    pub pre_acc: f64,
    pub post_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GoalReached,
    BudgetExhausted,
    Stalled,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Termination::GoalReached => write!(f, "goal-reached"),
            Termination::BudgetExhausted => write!(f, "budget-exhausted"),
            Termination::Stalled => write!(f, "stalled"),
        }
    }
}

impl FromStr for Termination {
    type Err = Error;

    fn from_str(s: &str) -> Result<Termination> {
        match s {
            "goal-reached" => Ok(Termination::GoalReached),
            "budget-exhausted" => Ok(Termination::BudgetExhausted),
            "stalled" => Ok(Termination::Stalled),
            other => Err(Error::Malformed(format!("termination {other:?}"))),
        }
    }
}

/// Full history of one attack run.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackTrace {
    pub arch_id: String,
    pub attack_seed: u64,
    pub heuristic: Heuristic,
    pub mask: Option<Vec<usize>>,
    pub goals: Vec<f64>,
    pub budget: usize,
    pub attack_set_size: usize,
    pub eval_subsample: usize,
    pub baseline_loss: f64,
    pub baseline_acc: f64,
    pub records: Vec<FlipRecord>,
    /// First step whose post-flip accuracy fell to or below each goal,
    /// ordered as `goals`.
    pub goal_crossings: Vec<Option<usize>>,
    pub termination: Termination,
}

impl AttackTrace {
    /// Crossing step for the given goal, if configured and reached.
    pub fn crossing(&self, goal: f64) -> Option<usize> {
        self.goals
            .iter()
            .position(|&g| g == goal)
            .and_then(|i| self.goal_crossings[i])
    }
}

/// Eq. 1 flip direction: positive bit gradient drives the bit to 1,
/// negative (or zero) to 0.
#[inline]
pub fn flip_rule(bit: u8, grad: f64) -> u8 {
    debug_assert!(bit <= 1);
    // m = b XOR (sign(g)/2 + 0.5); b_hat = b XOR m == (g > 0).
    if grad > 0.0 {
        1
    } else {
        0
    }
}

/// In-layer search: the `n_b` strongest admissible bit flips of one layer.
///
/// `state` must hold gradients from a backward pass on the attack batch with
/// the model's current quantized weights. Candidates whose flip-rule
/// direction equals the stored bit (no-ops) and weights with exactly zero
/// gradient are excluded.
pub fn rank_bits_in_layer(
    model: &Model,
    state: &BackwardState,
    ordinal: usize,
    heuristic: Heuristic,
    n_b: usize,
) -> Result<Vec<FlipCandidate>> {
    let params = model
        .weighted_params(ordinal)
        .ok_or_else(|| Error::InvalidArgument(format!("no weighted layer {ordinal}")))?;
    let grad = model
        .weighted_grad(state, ordinal)
        .ok_or_else(|| Error::InvalidArgument("gradients not computed".into()))?;
    let scale = params.quant.scale;
    if params.quant.codes.is_empty() {
        return Err(Error::InvalidArgument(format!("layer {ordinal} is empty")));
    }
    if scale == 0.0 {
        return Ok(Vec::new());
    }

    // Keep the best n_b (key descending, earliest (index, bit) wins ties).
    let mut best: Vec<(f64, FlipCandidate)> = Vec::with_capacity(n_b + 1);
    for (index, (&g, &code)) in grad.w.values().iter().zip(&params.quant.codes).enumerate() {
        if g == 0.0 {
            continue;
        }
        // Strongest admissible bit: |∇b L| = |g|·scale·2^k is monotone in k
        // (the sign bit weighs 2^7), so scan from the sign bit down and stop
        // at the first bit the flip rule actually changes.
        let mut chosen: Option<(u8, f64)> = None;
        for bit in (0u8..8).rev() {
            let bg = bit_grad(g, scale, bit);
            let b = bit_is_set(code, bit) as u8;
            if flip_rule(b, bg) != b {
                chosen = Some((bit, bg));
                break;
            }
        }
        let Some((bit, bg)) = chosen else { continue };
        // In Taylor mode the weight ranks by its saliency |w·∇w L|; the bit
        // choice (largest |∂w/∂flip| among admissible bits) is the same
        // descending-k scan either way.
        let key = match heuristic {
            Heuristic::Gradient => bg.abs(),
            Heuristic::Taylor => (params.effective().values()[index] * g).abs(),
        };
        let cand = FlipCandidate {
            addr: BitAddress { layer: ordinal, index, bit },
            bit_before: bit_is_set(code, bit) as u8,
            bit_grad: bg,
            bit_after: flip_rule(bit_is_set(code, bit) as u8, bg),
            loss_after: f64::NAN,
        };
        let at = best.partition_point(|(k, _)| *k >= key);
        if at < n_b {
            best.insert(at, (key, cand));
            best.truncate(n_b);
        }
    }
    Ok(best.into_iter().map(|(_, c)| c).collect())
}

/// Outcome of one progressive-bit-search iteration.
#[derive(Debug)]
pub struct PbsOutcome {
    pub chosen: FlipCandidate,
    /// Attack-set loss before any flip this iteration.
    pub pre_loss: f64,
}

/// One PBS iteration: gradient pass, in-layer ranking per masked layer,
/// tentative flip + loss evaluation per candidate (flips restored), and
/// cross-layer selection of the loss-maximizing flip. The model is returned
/// in its pre-step state; the caller applies the permanent flip.
pub fn pbs_step(model: &mut Model, attack_batch: &Batch, config: &AttackConfig) -> Result<PbsOutcome> {
    config.validate(model)?;
    let (_, mut state) = model.forward_cached(&attack_batch.inputs, None)?;
    let pre_loss = model.backward(&mut state, &attack_batch.labels)?;

    let mut candidates = Vec::new();
    for ordinal in config.masked_layers(model) {
        candidates.extend(rank_bits_in_layer(
            model,
            &state,
            ordinal,
            config.heuristic,
            config.candidates_per_layer,
        )?);
    }
    if candidates.is_empty() {
        return Err(Error::AttackStalled);
    }
    // Deterministic cross-layer order: (layer, weight, bit) ascending.
    candidates.sort_by_key(|c| c.addr);

    let mut chosen: Option<FlipCandidate> = None;
    for mut cand in candidates {
        let p = model.weighted_params_mut(cand.addr.layer).expect("masked layer");
        p.flip_bit(cand.addr.index, cand.addr.bit)?;
        cand.loss_after = model.evaluate_loss(&attack_batch.inputs, &attack_batch.labels)?;
        let p = model.weighted_params_mut(cand.addr.layer).expect("masked layer");
        p.flip_bit(cand.addr.index, cand.addr.bit)?;
        match &chosen {
            Some(best) if cand.loss_after <= best.loss_after => {}
            _ => chosen = Some(cand),
        }
    }
    Ok(PbsOutcome {
        chosen: chosen.expect("nonempty candidates"),
        pre_loss,
    })
}

/// Runs the full attack on a private copy of the model.
pub fn run_attack(model: &Model, dataset: &Dataset, config: &AttackConfig) -> Result<AttackTrace> {
    config.validate(model)?;
    let mut m = model.clone();
    let attack_batch = sample_attack_set(dataset, config.attack_set_size, config.seed)?;

    let eval = if config.eval_subsample == 0 {
        None
    } else {
        let idx = subsample_indices(dataset.test_len(), config.eval_subsample, config.seed);
        Some(dataset.test_batch(&idx)?)
    };
    let (eval_inputs, eval_labels): (&Tensor, &[u8]) = match &eval {
        None => (&dataset.test_inputs, &dataset.test_labels),
        Some(batch) => (&batch.inputs, &batch.labels),
    };

    let baseline_acc = m.evaluate_accuracy(eval_inputs, eval_labels)?;
    let baseline_loss = m.evaluate_loss(&attack_batch.inputs, &attack_batch.labels)?;
    let min_goal = config.goals.iter().cloned().fold(f64::INFINITY, f64::min);

    let mut records = Vec::new();
    let mut crossings: Vec<Option<usize>> = vec![None; config.goals.len()];
    let mut last_acc = baseline_acc;
    let mut termination = Termination::BudgetExhausted;

    for step in 1..=config.budget {
        let outcome = match pbs_step(&mut m, &attack_batch, config) {
            Ok(o) => o,
            Err(Error::AttackStalled) => {
                termination = Termination::Stalled;
                break;
            }
            Err(e) => return Err(e),
        };
        let addr = outcome.chosen.addr;
        m.weighted_params_mut(addr.layer)
            .expect("masked layer")
            .flip_bit(addr.index, addr.bit)?;
        let post_acc = m.evaluate_accuracy(eval_inputs, eval_labels)?;
        records.push(FlipRecord {
            step,
            addr,
            pre_loss: outcome.pre_loss,
            post_loss: outcome.chosen.loss_after,
            pre_acc: last_acc,
            post_acc,
        });
        last_acc = post_acc;
        for (i, &goal) in config.goals.iter().enumerate() {
            if crossings[i].is_none() && post_acc <= goal {
                crossings[i] = Some(step);
            }
        }
        if post_acc <= min_goal {
            termination = Termination::GoalReached;
            break;
        }
    }

    Ok(AttackTrace {
        arch_id: m.arch_id.clone(),
        attack_seed: config.seed,
        heuristic: config.heuristic,
        mask: config.layer_mask.clone(),
        goals: config.goals.clone(),
        budget: config.budget,
        attack_set_size: config.attack_set_size,
        eval_subsample: config.eval_subsample,
        baseline_loss,
        baseline_acc,
        records,
        goal_crossings: crossings,
        termination,
    })
}

impl AttackTrace {
    /// Structured text report: header, one CSV line per flip, goal summary.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# bfa attack trace v1\n");
        out.push_str(&format!("arch = {}\n", self.arch_id));
        out.push_str(&format!("attack_seed = {}\n", self.attack_seed));
        out.push_str(&format!("heuristic = {}\n", self.heuristic));
        let mask = match &self.mask {
            None => "all".to_string(),
            Some(m) => m.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
        };
        out.push_str(&format!("mask = {mask}\n"));
        out.push_str(&format!(
            "goals = {}\n",
            self.goals.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(",")
        ));
        out.push_str(&format!("budget = {}\n", self.budget));
        out.push_str(&format!("attack_set_size = {}\n", self.attack_set_size));
        out.push_str(&format!("eval_subsample = {}\n", self.eval_subsample));
        out.push_str(&format!("baseline_loss = {}\n", self.baseline_loss));
        out.push_str(&format!("baseline_acc = {}\n", self.baseline_acc));
        out.push_str(&format!("termination = {}\n", self.termination));
        out.push_str("step,layer,weight_index,bit,pre_loss,post_loss,pre_acc,post_acc\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.step, r.addr.layer, r.addr.index, r.addr.bit, r.pre_loss, r.post_loss, r.pre_acc, r.post_acc
            ));
        }
        out.push_str("[goals]\n");
        for (goal, crossing) in self.goals.iter().zip(&self.goal_crossings) {
            match crossing {
                Some(step) => out.push_str(&format!("{goal} = {step}\n")),
                None => out.push_str(&format!("{goal} = not-reached\n")),
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<AttackTrace> {
        fn kv<'a>(line: &'a str, key: &str) -> Result<&'a str> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(" = "))
                .ok_or_else(|| Error::Malformed(format!("expected `{key} = ...`, got {line:?}")))
        }
        fn num<T: FromStr>(s: &str, what: &str) -> Result<T> {
            s.parse::<T>().map_err(|_| Error::Malformed(format!("bad {what}: {s:?}")))
        }
        let mut lines = text.lines();
        if lines.next() != Some("# bfa attack trace v1") {
            return Err(Error::Malformed("missing trace header".into()));
        }
        let arch_id = kv(lines.next().unwrap_or(""), "arch")?.to_string();
        let attack_seed = num::<u64>(kv(lines.next().unwrap_or(""), "attack_seed")?, "seed")?;
        let heuristic: Heuristic = kv(lines.next().unwrap_or(""), "heuristic")?.parse()?;
        let mask_s = kv(lines.next().unwrap_or(""), "mask")?;
        let mask = if mask_s == "all" {
            None
        } else {
            let m: Result<Vec<usize>> = mask_s.split(',').map(|p| num::<usize>(p, "mask layer")).collect();
            Some(m?)
        };
        let goals_s = kv(lines.next().unwrap_or(""), "goals")?;
        let goals: Vec<f64> = goals_s
            .split(',')
            .map(|p| num::<f64>(p, "goal"))
            .collect::<Result<_>>()?;
        let budget = num::<usize>(kv(lines.next().unwrap_or(""), "budget")?, "budget")?;
        let attack_set_size = num::<usize>(kv(lines.next().unwrap_or(""), "attack_set_size")?, "attack_set_size")?;
        let eval_subsample = num::<usize>(kv(lines.next().unwrap_or(""), "eval_subsample")?, "eval_subsample")?;
        let baseline_loss = num::<f64>(kv(lines.next().unwrap_or(""), "baseline_loss")?, "baseline_loss")?;
        let baseline_acc = num::<f64>(kv(lines.next().unwrap_or(""), "baseline_acc")?, "baseline_acc")?;
        let termination: Termination = kv(lines.next().unwrap_or(""), "termination")?.parse()?;
        let header = lines.next().unwrap_or("");
        if header != "step,layer,weight_index,bit,pre_loss,post_loss,pre_acc,post_acc" {
            return Err(Error::Malformed(format!("bad record header {header:?}")));
        }
        let mut records = Vec::new();
        let mut in_goals = false;
        let mut crossings = vec![None; goals.len()];
        for line in lines {
            if line == "[goals]" {
                in_goals = true;
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if in_goals {
                let (g, v) = line
                    .split_once(" = ")
                    .ok_or_else(|| Error::Malformed(format!("bad goal line {line:?}")))?;
                let goal: f64 = num(g, "goal")?;
                let idx = goals
                    .iter()
                    .position(|&x| x == goal)
                    .ok_or_else(|| Error::Malformed(format!("unknown goal {goal}")))?;
                crossings[idx] = if v == "not-reached" { None } else { Some(num::<usize>(v, "crossing")?) };
            } else {
                let parts: Vec<&str> = line.split(',').collect();
                if parts.len() != 8 {
                    return Err(Error::Malformed(format!("bad record line {line:?}")));
                }
                records.push(FlipRecord {
                    step: num(parts[0], "step")?,
                    addr: BitAddress {
                        layer: num(parts[1], "layer")?,
                        index: num(parts[2], "weight_index")?,
                        bit: num(parts[3], "bit")?,
                    },
                    pre_loss: num(parts[4], "pre_loss")?,
                    post_loss: num(parts[5], "post_loss")?,
                    pre_acc: num(parts[6], "pre_acc")?,
                    post_acc: num(parts[7], "post_acc")?,
                });
            }
        }
        Ok(AttackTrace {
            arch_id,
            attack_seed,
            heuristic,
            mask,
            goals,
            budget,
            attack_set_size,
            eval_subsample,
            baseline_loss,
            baseline_acc,
            records,
            goal_crossings: crossings,
            termination,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<AttackTrace> {
        AttackTrace::from_text(&std::fs::read_to_string(path)?)
    }
}
