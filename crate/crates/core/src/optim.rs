//! Policy-gradient machinery: maximum-likelihood initialization, exact
//! enumeration objective and gradient, sampled REINFORCE / leave-one-out
//! estimators, and plain gradient-ascent updates.
//!
//! The KL regularizer always enters analytically (exact categorical KL
//! under the context visitation weights) rather than as a per-sample
//! penalty: it is exact in the tabular setting and removes one source of
//! estimator variance. Only the reward term is ever sampled.

use rand::Rng;

use crate::env::TaskSpec;
use crate::error::{Error, Result};
use crate::policy::{
    context_kl, visitation_weights, CriticPolicy, PolicySnapshot,
};
use crate::rewards::RewardFn;
use crate::scalar::{sample_categorical, Scalar};

/// Order of the arguments in the KL regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlDirection {
    /// `KL(reference || policy)` — the direction the staged objectives are
    /// written in.
    ReferenceFirst,
    /// `KL(policy || reference)` — the direction common in RLHF practice.
    PolicyFirst,
}

impl KlDirection {
    pub fn as_str(&self) -> &'static str {
        match self {
            KlDirection::ReferenceFirst => "reference-first",
            KlDirection::PolicyFirst => "policy-first",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "reference-first" => Ok(KlDirection::ReferenceFirst),
            "policy-first" => Ok(KlDirection::PolicyFirst),
            other => Err(Error::parse(format!("unknown KL direction '{other}'"))),
        }
    }
}

/// A complete RL objective: expected reward minus a KL penalty toward a
/// frozen reference policy.
#[derive(Clone, Debug)]
pub struct Objective<S> {
    pub reward: RewardFn<S>,
    pub kl_coefficient: S,
    pub reference: PolicySnapshot<S>,
    pub kl_direction: KlDirection,
}

impl<S: Scalar> Objective<S> {
    pub fn new(
        reward: RewardFn<S>,
        kl_coefficient: S,
        reference: PolicySnapshot<S>,
        kl_direction: KlDirection,
    ) -> Result<Self> {
        if kl_coefficient < S::zero() || !kl_coefficient.is_finite() {
            return Err(Error::input(format!(
                "kl_coefficient = {kl_coefficient} must be >= 0"
            )));
        }
        Ok(Self {
            reward,
            kl_coefficient,
            reference,
            kl_direction,
        })
    }
}

/// A gradient over the full logit table plus bookkeeping about how it was
/// obtained. `sample_count` is 0 for exact enumeration.
#[derive(Clone, Debug)]
pub struct GradEstimate<S> {
    pub gradient: Vec<S>,
    pub sample_count: usize,
    pub mean_reward: S,
    pub mean_kl: S,
}

fn check_policy_spec<S: Scalar>(spec: &TaskSpec<S>, policy: &CriticPolicy<S>) -> Result<()> {
    if policy.num_questions() != spec.num_questions()
        || policy.num_answers() != spec.num_answers()
        || policy.num_hints() != spec.num_hints()
    {
        return Err(Error::config(format!(
            "policy shape ({}, {}, {}) does not match task ({}, {}, {})",
            policy.num_questions(),
            policy.num_answers(),
            policy.num_hints(),
            spec.num_questions(),
            spec.num_answers(),
            spec.num_hints()
        )));
    }
    Ok(())
}

fn check_objective<S: Scalar>(policy: &CriticPolicy<S>, objective: &Objective<S>) -> Result<()> {
    if !policy.same_shape(objective.reference.policy()) {
        return Err(Error::config(
            "reference snapshot shape does not match the policy",
        ));
    }
    Ok(())
}

/// Expected reward of every (context, action) pair, marginalized over the
/// actor's refinement outcome: `R(s, a) = E[r | s, a]`.
pub fn expected_reward_table<S: Scalar>(
    spec: &TaskSpec<S>,
    reward: &RewardFn<S>,
) -> Result<Vec<S>> {
    let actions = 2 * spec.num_hints();
    let mut table = Vec::with_capacity(spec.num_questions() * spec.num_answers() * actions);
    let probe = CriticPolicy::<S>::uniform(
        spec.num_questions(),
        spec.num_answers(),
        spec.num_hints(),
    );
    for question in 0..spec.num_questions() {
        for answer in 0..spec.num_answers() {
            let original_correct = answer == spec.correct_answer(question);
            for action in 0..actions {
                let critique = probe.action_of(action);
                let p_correct = spec.refined_correct_prob(question, answer, critique)?;
                let r = p_correct * reward.value(original_correct, true, critique.verdict)
                    + (S::one() - p_correct)
                        * reward.value(original_correct, false, critique.verdict);
                table.push(r);
            }
        }
    }
    Ok(table)
}

/// Per-context derivative of the (ordered) KL term with respect to the
/// policy's logits, written into `out[s * actions ..]` scaled by `scale`.
fn add_kl_gradient<S: Scalar>(
    policy: &CriticPolicy<S>,
    objective: &Objective<S>,
    weights: &[S],
    scale: S,
    out: &mut [S],
) -> Result<()> {
    if scale == S::zero() {
        return Ok(());
    }
    let actions = policy.num_actions();
    let reference = objective.reference.policy();
    for (context, &w) in weights.iter().enumerate() {
        if w == S::zero() {
            continue;
        }
        let pi = policy.action_distribution(context)?;
        let rd = reference.action_distribution(context)?;
        match objective.kl_direction {
            KlDirection::ReferenceFirst => {
                // d/dz_b KL(ref || pi) = pi_b - ref_b
                for b in 0..actions {
                    out[context * actions + b] += scale * w * (pi[b] - rd[b]);
                }
            }
            KlDirection::PolicyFirst => {
                // d/dz_b KL(pi || ref) = pi_b (ln(pi_b / ref_b) - KL)
                let mut kl = S::zero();
                for (&pa, &ra) in pi.iter().zip(rd.iter()) {
                    if pa > S::zero() {
                        kl += pa * (pa / ra).ln();
                    }
                }
                for b in 0..actions {
                    out[context * actions + b] +=
                        scale * w * pi[b] * ((pi[b] / rd[b]).ln() - kl);
                }
            }
        }
    }
    Ok(())
}

/// Mean ordered KL between `policy` and the objective's reference under
/// the visitation weights.
fn weighted_kl<S: Scalar>(
    policy: &CriticPolicy<S>,
    objective: &Objective<S>,
    weights: &[S],
) -> Result<S> {
    let mut kl = S::zero();
    for (context, &w) in weights.iter().enumerate() {
        if w == S::zero() {
            continue;
        }
        let term = match objective.kl_direction {
            KlDirection::ReferenceFirst => {
                context_kl(objective.reference.policy(), policy, context)?
            }
            KlDirection::PolicyFirst => {
                context_kl(policy, objective.reference.policy(), context)?
            }
        };
        kl += w * term;
    }
    Ok(kl)
}

/// Exact value of the full objective by exhaustive enumeration over
/// (question, original answer, critique action, refinement outcome).
pub fn exact_objective<S: Scalar>(
    spec: &TaskSpec<S>,
    policy: &CriticPolicy<S>,
    objective: &Objective<S>,
) -> Result<S> {
    check_policy_spec(spec, policy)?;
    check_objective(policy, objective)?;
    let weights = visitation_weights(spec);
    let table = expected_reward_table(spec, &objective.reward)?;
    let actions = policy.num_actions();
    let mut expected = S::zero();
    for (context, &w) in weights.iter().enumerate() {
        if w == S::zero() {
            continue;
        }
        let pi = policy.action_distribution(context)?;
        for (a, &p) in pi.iter().enumerate() {
            expected += w * p * table[context * actions + a];
        }
    }
    let kl = weighted_kl(policy, objective, &weights)?;
    Ok(expected - objective.kl_coefficient * kl)
}

/// Analytic gradient of [`exact_objective`] with respect to every logit.
pub fn exact_gradient<S: Scalar>(
    spec: &TaskSpec<S>,
    policy: &CriticPolicy<S>,
    objective: &Objective<S>,
) -> Result<GradEstimate<S>> {
    check_policy_spec(spec, policy)?;
    check_objective(policy, objective)?;
    let weights = visitation_weights(spec);
    let table = expected_reward_table(spec, &objective.reward)?;
    let actions = policy.num_actions();
    let mut gradient = vec![S::zero(); policy.logits().len()];
    let mut mean_reward = S::zero();
    for (context, &w) in weights.iter().enumerate() {
        if w == S::zero() {
            continue;
        }
        let pi = policy.action_distribution(context)?;
        let row = &table[context * actions..(context + 1) * actions];
        let mut avg = S::zero();
        for (&p, &r) in pi.iter().zip(row.iter()) {
            avg += p * r;
        }
        mean_reward += w * avg;
        for b in 0..actions {
            gradient[context * actions + b] = w * pi[b] * (row[b] - avg);
        }
    }
    add_kl_gradient(
        policy,
        objective,
        &weights,
        -objective.kl_coefficient,
        &mut gradient,
    )?;
    let mean_kl = weighted_kl(policy, objective, &weights)?;
    Ok(GradEstimate {
        gradient,
        sample_count: 0,
        mean_reward,
        mean_kl,
    })
}

/// Draws a batch of (question, original answer) prompts from the rollout
/// visitation distribution: uniform questions, actor original answers.
pub fn sample_prompts<S: Scalar, R: Rng + ?Sized>(
    spec: &TaskSpec<S>,
    batch: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    (0..batch)
        .map(|_| {
            let question = rng.gen_range(0..spec.num_questions());
            let answer = sample_categorical(spec.actor_row(question), rng);
            (question, answer)
        })
        .collect()
}

/// Leave-one-out advantages: `a_i = r_i - mean_{j != i} r_j`.
pub fn rloo_advantages<S: Scalar>(rewards: &[S]) -> Vec<S> {
    let k = rewards.len();
    debug_assert!(k >= 2);
    let total: S = rewards.iter().copied().sum();
    let denom = S::from_usize(k - 1).expect("small count");
    rewards.iter().map(|&r| r - (total - r) / denom).collect()
}

fn sampled_gradient<S: Scalar, R: Rng + ?Sized>(
    spec: &TaskSpec<S>,
    policy: &CriticPolicy<S>,
    objective: &Objective<S>,
    prompts: &[(usize, usize)],
    k: usize,
    rng: &mut R,
    leave_one_out: bool,
) -> Result<GradEstimate<S>> {
    check_policy_spec(spec, policy)?;
    check_objective(policy, objective)?;
    if prompts.is_empty() {
        return Err(Error::input("prompt batch must be nonempty"));
    }
    let actions = policy.num_actions();
    let mut gradient = vec![S::zero(); policy.logits().len()];
    let normalizer = S::from_usize(prompts.len() * k).expect("small count");
    let mut reward_total = S::zero();
    let mut sampled_actions = Vec::with_capacity(k);
    let mut rewards: Vec<S> = Vec::with_capacity(k);
    for &(question, answer) in prompts {
        let original_correct = answer == spec.correct_answer(question);
        let context = policy.context_index(question, answer)?;
        let pi = policy.action_distribution(context)?;
        sampled_actions.clear();
        rewards.clear();
        for _ in 0..k {
            let action = sample_categorical(&pi, rng);
            let critique = policy.action_of(action);
            let (_, refined_correct) = spec.refine(question, answer, critique, rng)?;
            sampled_actions.push(action);
            rewards.push(
                objective
                    .reward
                    .value(original_correct, refined_correct, critique.verdict),
            );
        }
        reward_total += rewards.iter().copied().sum();
        let advantages = if leave_one_out {
            rloo_advantages(&rewards)
        } else {
            rewards.clone()
        };
        for (&action, &adv) in sampled_actions.iter().zip(advantages.iter()) {
            if adv == S::zero() {
                continue;
            }
            let coef = adv / normalizer;
            // d log pi(a|s) / d z_b = [b == a] - pi_b
            gradient[context * actions + action] += coef;
            for b in 0..actions {
                gradient[context * actions + b] -= coef * pi[b];
            }
        }
    }
    let weights = visitation_weights(spec);
    add_kl_gradient(
        policy,
        objective,
        &weights,
        -objective.kl_coefficient,
        &mut gradient,
    )?;
    let mean_kl = weighted_kl(policy, objective, &weights)?;
    Ok(GradEstimate {
        gradient,
        sample_count: prompts.len() * k,
        mean_reward: reward_total / normalizer,
        mean_kl,
    })
}

/// REINFORCE with a per-prompt leave-one-out baseline over `k >= 2`
/// critique samples. Unbiased for the reward term; the KL term is added
/// analytically.
pub fn rloo_gradient<S: Scalar, R: Rng + ?Sized>(
    spec: &TaskSpec<S>,
    policy: &CriticPolicy<S>,
    objective: &Objective<S>,
    prompts: &[(usize, usize)],
    k: usize,
    rng: &mut R,
) -> Result<GradEstimate<S>> {
    if k < 2 {
        return Err(Error::input("leave-one-out baseline needs k >= 2"));
    }
    sampled_gradient(spec, policy, objective, prompts, k, rng, true)
}

/// Plain REINFORCE: advantages are the raw rewards.
pub fn reinforce_gradient<S: Scalar, R: Rng + ?Sized>(
    spec: &TaskSpec<S>,
    policy: &CriticPolicy<S>,
    objective: &Objective<S>,
    prompts: &[(usize, usize)],
    k: usize,
    rng: &mut R,
) -> Result<GradEstimate<S>> {
    if k == 0 {
        return Err(Error::input("reinforce needs k >= 1"));
    }
    sampled_gradient(spec, policy, objective, prompts, k, rng, false)
}

/// One gradient-ascent step: `logits += learning_rate * gradient`.
/// Refuses non-finite gradients so a numeric fault can never corrupt the
/// policy table.
pub fn ascend<S: Scalar>(
    policy: &CriticPolicy<S>,
    grad: &GradEstimate<S>,
    learning_rate: S,
) -> Result<CriticPolicy<S>> {
    if learning_rate <= S::zero() || !learning_rate.is_finite() {
        return Err(Error::input(format!(
            "learning_rate = {learning_rate} must be > 0"
        )));
    }
    if grad.gradient.len() != policy.logits().len() {
        return Err(Error::config("gradient shape does not match the policy"));
    }
    if grad.gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric(
            "gradient contains a non-finite entry; update refused",
        ));
    }
    let mut updated = policy.clone();
    for (z, &g) in updated.logits_mut().iter_mut().zip(grad.gradient.iter()) {
        *z += learning_rate * g;
    }
    Ok(updated)
}

/// One (context, action) pair retained for maximum-likelihood fitting,
/// tagged with the refinement-correctness bit the filter keyed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SftExample {
    pub context: usize,
    pub action: usize,
    pub refined_correct: bool,
}

/// Filtered critique demonstrations plus the table shape they index into.
#[derive(Clone, Debug)]
pub struct SftDataset {
    num_questions: usize,
    num_answers: usize,
    num_hints: usize,
    examples: Vec<SftExample>,
}

impl SftDataset {
    pub fn new(
        num_questions: usize,
        num_answers: usize,
        num_hints: usize,
        examples: Vec<SftExample>,
    ) -> Result<Self> {
        let contexts = num_questions * num_answers;
        let actions = 2 * num_hints;
        if let Some(ex) = examples
            .iter()
            .find(|ex| ex.context >= contexts || ex.action >= actions)
        {
            return Err(Error::input(format!(
                "example (context {}, action {}) out of range",
                ex.context, ex.action
            )));
        }
        Ok(Self {
            num_questions,
            num_answers,
            num_hints,
            examples,
        })
    }

    pub fn examples(&self) -> &[SftExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.num_questions, self.num_answers, self.num_hints)
    }
}

/// Rolls out `n` episodes under a teacher critic and keeps the
/// (context, critique) pairs whose refinement came out correct.
pub fn generate_sft_data<S: Scalar, R: Rng + ?Sized>(
    spec: &TaskSpec<S>,
    teacher: &CriticPolicy<S>,
    n: usize,
    rng: &mut R,
) -> Result<SftDataset> {
    if n == 0 {
        return Err(Error::input("sft sample count must be positive"));
    }
    check_policy_spec(spec, teacher)?;
    let mut examples = Vec::new();
    for _ in 0..n {
        let ep = spec.rollout_uniform(teacher, rng)?;
        if ep.refined_correct {
            examples.push(SftExample {
                context: teacher.context_index(ep.question, ep.original_answer)?,
                action: teacher.action_index(ep.critique)?,
                refined_correct: true,
            });
        }
    }
    if examples.is_empty() {
        log::warn!("sft filtering kept none of the {n} rollouts; dataset is empty");
    }
    SftDataset::new(
        spec.num_questions(),
        spec.num_answers(),
        spec.num_hints(),
        examples,
    )
}

/// Maximum-likelihood fit with add-`smoothing` counts: per-context logits
/// `ln(count + smoothing)`, i.e. the smoothed empirical distribution.
/// An empty dataset falls back to the uniform policy.
pub fn sft_fit<S: Scalar>(dataset: &SftDataset, smoothing: S) -> Result<CriticPolicy<S>> {
    if smoothing <= S::zero() || !smoothing.is_finite() {
        return Err(Error::input(format!(
            "smoothing = {smoothing} must be > 0"
        )));
    }
    let (q, m, h) = dataset.shape();
    if dataset.is_empty() {
        log::warn!("fitting an empty critique dataset; falling back to the uniform policy");
        return Ok(CriticPolicy::uniform(q, m, h));
    }
    let mut counts = vec![0usize; q * m * 2 * h];
    for ex in dataset.examples() {
        counts[ex.context * 2 * h + ex.action] += 1;
    }
    let logits = counts
        .into_iter()
        .map(|c| (S::from_usize(c).expect("count fits scalar") + smoothing).ln())
        .collect();
    CriticPolicy::from_logits(q, m, h, logits)
}
