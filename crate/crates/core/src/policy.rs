//! Trainable critic: a tabular softmax policy over critique actions.
//!
//! One context per (question, original answer) pair, one action per
//! (verdict, hint) pair. The logit table is the whole parameter vector;
//! distributions, log-probabilities and KL divergences are exact.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::env::{Critique, TaskSpec};
use crate::error::{Error, Result};
use crate::scalar::{sample_categorical, Scalar};

/// Which training phase produced a snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageLabel {
    Sft,
    StageOne,
    StageTwo,
    /// One-stage baseline trained on a single reward variant.
    SingleStage,
    /// Iterated filter-and-refit baseline.
    Star,
}

impl StageLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageLabel::Sft => "sft",
            StageLabel::StageOne => "stage1",
            StageLabel::StageTwo => "stage2",
            StageLabel::SingleStage => "single-stage",
            StageLabel::Star => "star",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sft" => Ok(StageLabel::Sft),
            "stage1" => Ok(StageLabel::StageOne),
            "stage2" => Ok(StageLabel::StageTwo),
            "single-stage" => Ok(StageLabel::SingleStage),
            "star" => Ok(StageLabel::Star),
            other => Err(Error::parse(format!("unknown stage label '{other}'"))),
        }
    }
}

impl fmt::Display for StageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Tabular softmax distribution over critique actions per context.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticPolicy<S> {
    num_questions: usize,
    num_answers: usize,
    num_hints: usize,
    /// Row-major `(num_questions * num_answers) x (2 * num_hints)` logits.
    logits: Vec<S>,
}

impl<S: Scalar> CriticPolicy<S> {
    /// Uniform policy (all-zero logits).
    pub fn uniform(num_questions: usize, num_answers: usize, num_hints: usize) -> Self {
        let len = num_questions * num_answers * 2 * num_hints;
        Self {
            num_questions,
            num_answers,
            num_hints,
            logits: vec![S::zero(); len],
        }
    }

    pub fn from_logits(
        num_questions: usize,
        num_answers: usize,
        num_hints: usize,
        logits: Vec<S>,
    ) -> Result<Self> {
        let expected = num_questions * num_answers * 2 * num_hints;
        if logits.len() != expected {
            return Err(Error::config(format!(
                "logit table has {} entries, expected {expected}",
                logits.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("logit table contains a non-finite entry"));
        }
        Ok(Self {
            num_questions,
            num_answers,
            num_hints,
            logits,
        })
    }

    /// A parameterized stand-in for a prompted base critic: judges the
    /// original answer correctly with probability `verdict_acc` and emits
    /// the question's correct hint with probability `hint_acc`
    /// (independently; remaining hint mass is spread evenly).
    pub fn teacher(spec: &TaskSpec<S>, verdict_acc: S, hint_acc: S) -> Result<Self> {
        Self::teacher_profile(spec, verdict_acc, S::one() - verdict_acc, hint_acc)
    }

    /// Teacher with independent verdict behavior per correctness class:
    /// says OK with probability `p_ok_correct` on truly-correct answers
    /// and `p_ok_incorrect` on truly-incorrect ones. Lets a teacher be
    /// uncommitted on good answers yet blind to errors, the typical weak
    /// critic before any training.
    pub fn teacher_profile(
        spec: &TaskSpec<S>,
        p_ok_correct: S,
        p_ok_incorrect: S,
        hint_acc: S,
    ) -> Result<Self> {
        let unit = |name: &str, v: S| -> Result<()> {
            if v < S::zero() || v > S::one() || !v.is_finite() {
                return Err(Error::input(format!("{name} = {v} outside [0, 1]")));
            }
            Ok(())
        };
        unit("p_ok_correct", p_ok_correct)?;
        unit("p_ok_incorrect", p_ok_incorrect)?;
        unit("hint_acc", hint_acc)?;
        let h = spec.num_hints();
        if h == 1 && hint_acc != S::one() {
            return Err(Error::input(
                "hint_acc must be 1 when the hint vocabulary has a single hint",
            ));
        }
        let floor = S::from_f64_lossy(1e-12);
        let mut policy = Self::uniform(spec.num_questions(), spec.num_answers(), h);
        for question in 0..spec.num_questions() {
            for answer in 0..spec.num_answers() {
                let ctx = policy.context_index(question, answer)?;
                let truly_correct = spec.correct_answer(question) == answer;
                let p_ok = if truly_correct {
                    p_ok_correct
                } else {
                    p_ok_incorrect
                };
                for action in 0..policy.num_actions() {
                    let critique = policy.action_of(action);
                    let p_verdict = if critique.verdict { p_ok } else { S::one() - p_ok };
                    let p_hint = if h == 1 {
                        S::one()
                    } else if critique.hint == spec.correct_hint(question) {
                        hint_acc
                    } else {
                        (S::one() - hint_acc) / S::from_usize(h - 1).expect("small count")
                    };
                    policy.logits[ctx * 2 * h + action] = (p_verdict * p_hint).max(floor).ln();
                }
            }
        }
        Ok(policy)
    }

    /// Teacher that always judges correctly and always names the correct hint.
    pub fn oracle_teacher(spec: &TaskSpec<S>) -> Result<Self> {
        Self::teacher(spec, S::one(), S::one())
    }

    pub fn num_questions(&self) -> usize {
        self.num_questions
    }

    pub fn num_answers(&self) -> usize {
        self.num_answers
    }

    pub fn num_hints(&self) -> usize {
        self.num_hints
    }

    pub fn num_contexts(&self) -> usize {
        self.num_questions * self.num_answers
    }

    pub fn num_actions(&self) -> usize {
        2 * self.num_hints
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.num_questions == other.num_questions
            && self.num_answers == other.num_answers
            && self.num_hints == other.num_hints
    }

    /// (question, answer) -> context row.
    pub fn context_index(&self, question: usize, answer: usize) -> Result<usize> {
        if question >= self.num_questions || answer >= self.num_answers {
            return Err(Error::input(format!(
                "context ({question}, {answer}) out of range ({} x {})",
                self.num_questions, self.num_answers
            )));
        }
        Ok(question * self.num_answers + answer)
    }

    /// Inverse of [`CriticPolicy::context_index`].
    pub fn context_of(&self, context: usize) -> (usize, usize) {
        (context / self.num_answers, context % self.num_answers)
    }

    /// (verdict, hint) -> action column. FLAW actions occupy `0..h`,
    /// OK actions `h..2h`.
    pub fn action_index(&self, critique: Critique) -> Result<usize> {
        if critique.hint >= self.num_hints {
            return Err(Error::input(format!(
                "hint {} out of range (h = {})",
                critique.hint, self.num_hints
            )));
        }
        Ok(usize::from(critique.verdict) * self.num_hints + critique.hint)
    }

    /// Inverse of [`CriticPolicy::action_index`].
    pub fn action_of(&self, action: usize) -> Critique {
        Critique {
            verdict: action >= self.num_hints,
            hint: action % self.num_hints,
        }
    }

    pub fn logits(&self) -> &[S] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [S] {
        &mut self.logits
    }

    pub fn logits_row(&self, context: usize) -> Result<&[S]> {
        self.check_context(context)?;
        let a = self.num_actions();
        Ok(&self.logits[context * a..(context + 1) * a])
    }

    fn check_context(&self, context: usize) -> Result<()> {
        if context >= self.num_contexts() {
            return Err(Error::input(format!(
                "context {context} out of range ({} contexts)",
                self.num_contexts()
            )));
        }
        Ok(())
    }

    /// Softmax of the context's logit row.
    pub fn action_distribution(&self, context: usize) -> Result<Vec<S>> {
        let row = self.logits_row(context)?;
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut out: Vec<S> = row.iter().map(|&z| (z - max).exp()).collect();
        let total: S = out.iter().copied().sum();
        for v in &mut out {
            *v /= total;
        }
        Ok(out)
    }

    /// Log-probability of one action; exact log-softmax.
    pub fn log_prob(&self, context: usize, action: usize) -> Result<S> {
        let row = self.logits_row(context)?;
        if action >= row.len() {
            return Err(Error::input(format!(
                "action {action} out of range ({} actions)",
                row.len()
            )));
        }
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let log_norm = row
            .iter()
            .map(|&z| (z - max).exp())
            .sum::<S>()
            .ln();
        Ok(row[action] - max - log_norm)
    }

    /// Samples an action for a context.
    pub fn sample_action<R: Rng + ?Sized>(&self, context: usize, rng: &mut R) -> Result<usize> {
        let dist = self.action_distribution(context)?;
        Ok(sample_categorical(&dist, rng))
    }

    /// Freezes the current table under a stage label.
    pub fn snapshot(&self, label: StageLabel) -> PolicySnapshot<S> {
        PolicySnapshot {
            label,
            policy: self.clone(),
        }
    }
}

/// Context visitation distribution during rollouts: uniform over questions
/// times the actor's original-answer distribution.
pub fn visitation_weights<S: Scalar>(spec: &TaskSpec<S>) -> Vec<S> {
    let q_weight = S::one() / S::from_usize(spec.num_questions()).expect("small count");
    let mut weights = Vec::with_capacity(spec.num_questions() * spec.num_answers());
    for question in 0..spec.num_questions() {
        for &mass in spec.actor_row(question) {
            weights.push(q_weight * mass);
        }
    }
    weights
}

/// Mean per-context KL divergence `sum_s w(s) KL(p(.|s) || q(.|s))` under
/// the given context weights, with `p` in the first slot of the KL.
pub fn kl_divergence<S: Scalar>(
    p: &CriticPolicy<S>,
    q: &CriticPolicy<S>,
    context_weights: &[S],
) -> Result<S> {
    if !p.same_shape(q) {
        return Err(Error::config("KL between policies of different shapes"));
    }
    if context_weights.len() != p.num_contexts() {
        return Err(Error::config(format!(
            "context_weights has {} entries, expected {}",
            context_weights.len(),
            p.num_contexts()
        )));
    }
    let tol = S::from_f64_lossy(1e-9);
    let total: S = context_weights.iter().copied().sum();
    if (total - S::one()).abs() > tol {
        return Err(Error::input(format!(
            "context_weights sums to {total}, expected 1"
        )));
    }
    let mut kl = S::zero();
    for (context, &w) in context_weights.iter().enumerate() {
        if w == S::zero() {
            continue;
        }
        kl += w * context_kl(p, q, context)?;
    }
    Ok(kl)
}

/// KL divergence of a single context's action distributions.
pub(crate) fn context_kl<S: Scalar>(
    p: &CriticPolicy<S>,
    q: &CriticPolicy<S>,
    context: usize,
) -> Result<S> {
    let pd = p.action_distribution(context)?;
    let qd = q.action_distribution(context)?;
    let mut kl = S::zero();
    for (&pa, &qa) in pd.iter().zip(qd.iter()) {
        if pa > S::zero() {
            kl += pa * (pa / qa).ln();
        }
    }
    Ok(kl)
}

/// An immutable, labeled copy of a critic's logit table.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySnapshot<S> {
    label: StageLabel,
    policy: CriticPolicy<S>,
}

impl<S: Scalar> PolicySnapshot<S> {
    pub fn new(label: StageLabel, policy: CriticPolicy<S>) -> Self {
        Self { label, policy }
    }

    pub fn label(&self) -> StageLabel {
        self.label
    }

    pub fn policy(&self) -> &CriticPolicy<S> {
        &self.policy
    }
}

/// Writes a snapshot as plain text: shape metadata, stage label, then the
/// logit table row-major with 17 significant digits, which round-trips
/// `f64` bit-exactly.
pub fn save_checkpoint(snapshot: &PolicySnapshot<f64>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_to_string(snapshot))?;
    Ok(())
}

pub fn checkpoint_to_string(snapshot: &PolicySnapshot<f64>) -> String {
    let policy = snapshot.policy();
    let mut out = String::new();
    out.push_str("format critic-checkpoint v1\n");
    out.push_str(&format!("stage {}\n", snapshot.label()));
    out.push_str(&format!("questions {}\n", policy.num_questions()));
    out.push_str(&format!("answers {}\n", policy.num_answers()));
    out.push_str(&format!("hints {}\n", policy.num_hints()));
    for context in 0..policy.num_contexts() {
        let row = policy.logits_row(context).expect("context in range");
        out.push_str("row");
        for z in row {
            out.push_str(&format!(" {z:.16e}"));
        }
        out.push('\n');
    }
    out
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<PolicySnapshot<f64>> {
    let text = fs::read_to_string(&path)?;
    checkpoint_from_str(&text)
}

pub fn checkpoint_from_str(text: &str) -> Result<PolicySnapshot<f64>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "format critic-checkpoint v1" {
        return Err(Error::parse(format!("unexpected header '{header}'")));
    }
    let mut field = |name: &str| -> Result<String> {
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(format!("missing '{name}' line")))?;
        line.strip_prefix(&format!("{name} "))
            .map(str::to_owned)
            .ok_or_else(|| Error::parse(format!("expected '{name} ...', found '{line}'")))
    };
    let label = StageLabel::parse(&field("stage")?)?;
    let parse_count = |s: String| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|e| Error::parse(format!("bad count '{s}': {e}")))
    };
    let questions = parse_count(field("questions")?)?;
    let answers = parse_count(field("answers")?)?;
    let hints = parse_count(field("hints")?)?;
    let mut logits = Vec::with_capacity(questions * answers * 2 * hints);
    for line in lines {
        let body = line
            .strip_prefix("row")
            .ok_or_else(|| Error::parse(format!("expected 'row ...', found '{line}'")))?;
        for tok in body.split_whitespace() {
            let z: f64 = tok
                .parse()
                .map_err(|e| Error::parse(format!("bad logit '{tok}': {e}")))?;
            logits.push(z);
        }
    }
    let policy = CriticPolicy::from_logits(questions, answers, hints, logits)?;
    Ok(PolicySnapshot::new(label, policy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::RefineParams;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn spec() -> TaskSpec<f64> {
        TaskSpec::new(
            2,
            2,
            3,
            vec![0, 1],
            vec![2, 0],
            vec![0.7, 0.3, 0.4, 0.6],
            RefineParams::new(0.95, 0.5, 0.9, 0.2).unwrap(),
            1,
        )
        .unwrap()
    }

    #[test]
    fn uniform_distribution_over_actions() {
        let policy = CriticPolicy::<f64>::uniform(1, 2, 3);
        let dist = policy.action_distribution(0).unwrap();
        assert_eq!(dist.len(), 6);
        for p in dist {
            assert_abs_diff_eq!(p, 1.0 / 6.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(
            policy.log_prob(0, 3).unwrap(),
            -(6.0f64).ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(policy.log_prob(1, 0).unwrap(), -1.791759469228055, epsilon = 1e-12);
    }

    #[test]
    fn softmax_closed_form_two_actions() {
        let policy =
            CriticPolicy::from_logits(1, 1, 1, vec![(2.0f64).ln(), 0.0]).unwrap();
        let dist = policy.action_distribution(0).unwrap();
        assert_abs_diff_eq!(dist[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(dist[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn saturated_action_has_near_zero_log_prob() {
        let mut policy = CriticPolicy::<f64>::uniform(1, 1, 2);
        policy.logits_mut()[2] = 50.0;
        assert!(policy.log_prob(0, 2).unwrap().abs() < 1e-10);
    }

    #[test]
    fn out_of_range_context_is_input_error() {
        let policy = CriticPolicy::<f64>::uniform(1, 2, 2);
        assert!(matches!(
            policy.action_distribution(2),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn action_context_maps_are_bijective() {
        let policy = CriticPolicy::<f64>::uniform(3, 4, 5);
        for action in 0..policy.num_actions() {
            assert_eq!(
                policy.action_index(policy.action_of(action)).unwrap(),
                action
            );
        }
        for context in 0..policy.num_contexts() {
            let (q, a) = policy.context_of(context);
            assert_eq!(policy.context_index(q, a).unwrap(), context);
        }
    }

    #[test]
    fn kl_of_identical_policies_is_zero() {
        let policy = CriticPolicy::<f64>::uniform(2, 2, 3);
        let w = visitation_weights(&spec());
        assert_abs_diff_eq!(kl_divergence(&policy, &policy, &w).unwrap(), 0.0);
    }

    #[test]
    fn kl_closed_forms() {
        // Single context, two actions.
        let eps = 1e-12f64;
        let p = CriticPolicy::from_logits(1, 1, 1, vec![(1.0 - eps).ln(), eps.ln()]).unwrap();
        let q = CriticPolicy::<f64>::uniform(1, 1, 1);
        let w = vec![1.0];
        let kl = kl_divergence(&p, &q, &w).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-6, "kl {kl}");

        let p = CriticPolicy::from_logits(1, 1, 1, vec![0.5f64.ln(), 0.5f64.ln()]).unwrap();
        let q = CriticPolicy::from_logits(1, 1, 1, vec![0.25f64.ln(), 0.75f64.ln()]).unwrap();
        let expected = 0.5 * (2.0f64).ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert_abs_diff_eq!(kl_divergence(&p, &q, &w).unwrap(), expected, epsilon = 1e-9);
        assert_abs_diff_eq!(expected, 0.143841036225890, epsilon = 1e-9);
    }

    #[test]
    fn kl_shape_mismatch_is_config_error() {
        let p = CriticPolicy::<f64>::uniform(1, 2, 2);
        let q = CriticPolicy::<f64>::uniform(1, 2, 3);
        assert!(matches!(
            kl_divergence(&p, &q, &[0.5, 0.5]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn teacher_hits_requested_accuracies() {
        let spec = spec();
        let teacher = CriticPolicy::teacher(&spec, 0.8, 0.6).unwrap();
        let ctx = teacher.context_index(0, 0).unwrap(); // truly correct answer
        let dist = teacher.action_distribution(ctx).unwrap();
        let p_ok: f64 = (0..teacher.num_actions())
            .filter(|&a| teacher.action_of(a).verdict)
            .map(|a| dist[a])
            .sum();
        assert_abs_diff_eq!(p_ok, 0.8, epsilon = 1e-9);
        let p_correct_hint: f64 = (0..teacher.num_actions())
            .filter(|&a| teacher.action_of(a).hint == spec.correct_hint(0))
            .map(|a| dist[a])
            .sum();
        assert_abs_diff_eq!(p_correct_hint, 0.6, epsilon = 1e-9);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let mut policy = CriticPolicy::<f64>::uniform(2, 2, 3);
        let mut state = 0x9e3779b97f4a7c15u64;
        for z in policy.logits_mut() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *z = ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 20.0;
        }
        let snap = policy.snapshot(StageLabel::StageTwo);
        let text = checkpoint_to_string(&snap);
        let back = checkpoint_from_str(&text).unwrap();
        assert_eq!(back.label(), StageLabel::StageTwo);
        assert_eq!(back.policy().logits(), snap.policy().logits());
        assert_eq!(checkpoint_to_string(&back), text);
    }

    proptest! {
        #[test]
        fn shift_invariance(shift in -40.0f64..40.0, seed_logits in proptest::collection::vec(-8.0f64..8.0, 6)) {
            let base = CriticPolicy::from_logits(1, 1, 3, seed_logits.clone()).unwrap();
            let shifted = CriticPolicy::from_logits(
                1,
                1,
                3,
                seed_logits.iter().map(|z| z + shift).collect(),
            )
            .unwrap();
            let d0 = base.action_distribution(0).unwrap();
            let d1 = shifted.action_distribution(0).unwrap();
            for (a, b) in d0.iter().zip(d1.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn log_prob_matches_distribution(seed_logits in proptest::collection::vec(-8.0f64..8.0, 12)) {
            let policy = CriticPolicy::from_logits(1, 2, 3, seed_logits).unwrap();
            for context in 0..policy.num_contexts() {
                let dist = policy.action_distribution(context).unwrap();
                let mut total = 0.0;
                for (action, &p) in dist.iter().enumerate() {
                    let lp = policy.log_prob(context, action).unwrap();
                    prop_assert!((lp - p.ln()).abs() < 1e-10);
                    total += lp.exp();
                }
                prop_assert!((total - 1.0).abs() < 1e-10);
            }
        }

        #[test]
        fn kl_nonnegative(
            pl in proptest::collection::vec(-6.0f64..6.0, 12),
            ql in proptest::collection::vec(-6.0f64..6.0, 12),
        ) {
            let p = CriticPolicy::from_logits(2, 1, 3, pl).unwrap();
            let q = CriticPolicy::from_logits(2, 1, 3, ql).unwrap();
            let kl = kl_divergence(&p, &q, &[0.25, 0.75]).unwrap();
            prop_assert!(kl >= -1e-12);
        }
    }

    #[test]
    fn sampling_matches_distribution() {
        let policy =
            CriticPolicy::from_logits(1, 1, 3, vec![0.3f64, -0.7, 1.1, 0.0, 0.4, -1.3]).unwrap();
        let dist = policy.action_distribution(0).unwrap();
        let mut rng = crate::env::episode_rng(99, 0);
        let n = 100_000;
        let mut counts = vec![0usize; 6];
        for _ in 0..n {
            counts[policy.sample_action(0, &mut rng).unwrap()] += 1;
        }
        for (a, &p) in dist.iter().enumerate() {
            let freq = counts[a] as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() <= 3.0 * sigma,
                "action {a}: freq {freq} vs p {p}"
            );
        }
    }
}
