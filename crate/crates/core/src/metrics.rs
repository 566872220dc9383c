//! Evaluation metrics over episodes, their exact expectations under a
//! (task, critic) pair, and the inference-scaling estimators.

use rand::Rng;

use crate::env::{Episode, TaskSpec};
use crate::error::{Error, Result};
use crate::policy::CriticPolicy;
use crate::scalar::Scalar;

/// Raw tallies behind a sampled report.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MetricsCounts {
    pub n: u64,
    pub n_orig_correct: u64,
    pub n_c_to_i: u64,
    pub n_i_to_c: u64,
    pub n_verdict_match: u64,
    pub n_refined_correct: u64,
}

/// The five critique metrics plus their underlying tallies.
///
/// `delta_c_to_i` is conditioned on originally-correct episodes and
/// `delta_i_to_c` on originally-incorrect ones; when a conditioning class
/// is empty the rate is reported as 0 with the matching degenerate flag
/// set, so batch evaluation stays total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport<S> {
    pub acc_orig: S,
    pub acc_refine: S,
    pub delta: S,
    pub delta_c_to_i: S,
    pub delta_i_to_c: S,
    pub acc_dis: S,
    pub counts: MetricsCounts,
    pub degenerate_c_to_i: bool,
    pub degenerate_i_to_c: bool,
}

/// Empirical metrics over a batch of episodes.
pub fn compute_metrics<S: Scalar>(episodes: &[Episode]) -> Result<MetricsReport<S>> {
    if episodes.is_empty() {
        return Err(Error::input("compute_metrics needs at least one episode"));
    }
    let mut counts = MetricsCounts {
        n: episodes.len() as u64,
        ..MetricsCounts::default()
    };
    for ep in episodes {
        counts.n_orig_correct += u64::from(ep.original_correct);
        counts.n_refined_correct += u64::from(ep.refined_correct);
        counts.n_c_to_i += u64::from(ep.original_correct && !ep.refined_correct);
        counts.n_i_to_c += u64::from(!ep.original_correct && ep.refined_correct);
        counts.n_verdict_match += u64::from(ep.critique.verdict == ep.original_correct);
    }
    let s = |v: u64| S::from_u64(v).expect("count fits scalar");
    let n = s(counts.n);
    let acc_orig = s(counts.n_orig_correct) / n;
    let acc_refine = s(counts.n_refined_correct) / n;
    let n_orig_incorrect = counts.n - counts.n_orig_correct;
    let degenerate_c_to_i = counts.n_orig_correct == 0;
    let degenerate_i_to_c = n_orig_incorrect == 0;
    let delta_c_to_i = if degenerate_c_to_i {
        S::zero()
    } else {
        s(counts.n_c_to_i) / s(counts.n_orig_correct)
    };
    let delta_i_to_c = if degenerate_i_to_c {
        S::zero()
    } else {
        s(counts.n_i_to_c) / s(n_orig_incorrect)
    };
    Ok(MetricsReport {
        acc_orig,
        acc_refine,
        delta: acc_refine - acc_orig,
        delta_c_to_i,
        delta_i_to_c,
        acc_dis: s(counts.n_verdict_match) / n,
        counts,
        degenerate_c_to_i,
        degenerate_i_to_c,
    })
}

/// Exact expectations of every metric under uniform questions, the actor's
/// original-answer distribution, the critic and the refinement behavior.
/// Counts are left at zero; there is no sample behind them.
pub fn exact_metrics<S: Scalar>(
    spec: &TaskSpec<S>,
    critic: &CriticPolicy<S>,
) -> Result<MetricsReport<S>> {
    check_shapes(spec, critic)?;
    let q_weight = S::one() / S::from_usize(spec.num_questions()).expect("small count");
    let mut acc_orig = S::zero();
    let mut acc_refine = S::zero();
    let mut c_to_i_mass = S::zero();
    let mut i_to_c_mass = S::zero();
    let mut acc_dis = S::zero();
    for question in 0..spec.num_questions() {
        let row = spec.actor_row(question);
        acc_orig += q_weight * row[spec.correct_answer(question)];
        for (answer, &mass) in row.iter().enumerate() {
            if mass == S::zero() {
                continue;
            }
            let weight = q_weight * mass;
            let original_correct = answer == spec.correct_answer(question);
            let context = critic.context_index(question, answer)?;
            let dist = critic.action_distribution(context)?;
            for (action, &p_action) in dist.iter().enumerate() {
                let critique = critic.action_of(action);
                let p_correct = spec.refined_correct_prob(question, answer, critique)?;
                let w = weight * p_action;
                acc_refine += w * p_correct;
                if original_correct {
                    c_to_i_mass += w * (S::one() - p_correct);
                } else {
                    i_to_c_mass += w * p_correct;
                }
                if critique.verdict == original_correct {
                    acc_dis += w;
                }
            }
        }
    }
    let degenerate_c_to_i = acc_orig == S::zero();
    let degenerate_i_to_c = acc_orig == S::one();
    let delta_c_to_i = if degenerate_c_to_i {
        S::zero()
    } else {
        c_to_i_mass / acc_orig
    };
    let delta_i_to_c = if degenerate_i_to_c {
        S::zero()
    } else {
        i_to_c_mass / (S::one() - acc_orig)
    };
    Ok(MetricsReport {
        acc_orig,
        acc_refine,
        delta: acc_refine - acc_orig,
        delta_c_to_i,
        delta_i_to_c,
        acc_dis,
        counts: MetricsCounts::default(),
        degenerate_c_to_i,
        degenerate_i_to_c,
    })
}

/// Exact discrimination accuracy split by the original answer's
/// correctness: (over originally-correct mass, over originally-incorrect
/// mass). Degenerate classes report 0.
pub fn exact_acc_dis_split<S: Scalar>(
    spec: &TaskSpec<S>,
    critic: &CriticPolicy<S>,
) -> Result<(S, S)> {
    check_shapes(spec, critic)?;
    let q_weight = S::one() / S::from_usize(spec.num_questions()).expect("small count");
    let mut correct_mass = S::zero();
    let mut incorrect_mass = S::zero();
    let mut correct_hit = S::zero();
    let mut incorrect_hit = S::zero();
    for question in 0..spec.num_questions() {
        for (answer, &mass) in spec.actor_row(question).iter().enumerate() {
            if mass == S::zero() {
                continue;
            }
            let weight = q_weight * mass;
            let original_correct = answer == spec.correct_answer(question);
            let context = critic.context_index(question, answer)?;
            let dist = critic.action_distribution(context)?;
            let p_match: S = dist
                .iter()
                .enumerate()
                .filter(|(action, _)| critic.action_of(*action).verdict == original_correct)
                .map(|(_, &p)| p)
                .sum();
            if original_correct {
                correct_mass += weight;
                correct_hit += weight * p_match;
            } else {
                incorrect_mass += weight;
                incorrect_hit += weight * p_match;
            }
        }
    }
    let rate = |hit: S, mass: S| if mass > S::zero() { hit / mass } else { S::zero() };
    Ok((
        rate(correct_hit, correct_mass),
        rate(incorrect_hit, incorrect_mass),
    ))
}

/// Sampled counterpart of [`exact_acc_dis_split`].
pub fn acc_dis_split<S: Scalar>(episodes: &[Episode]) -> (S, S) {
    let mut correct = (0u64, 0u64);
    let mut incorrect = (0u64, 0u64);
    for ep in episodes {
        let hit = u64::from(ep.critique.verdict == ep.original_correct);
        if ep.original_correct {
            correct = (correct.0 + 1, correct.1 + hit);
        } else {
            incorrect = (incorrect.0 + 1, incorrect.1 + hit);
        }
    }
    let rate = |(n, hits): (u64, u64)| {
        if n == 0 {
            S::zero()
        } else {
            S::from_u64(hits).expect("count fits scalar") / S::from_u64(n).expect("count")
        }
    };
    (rate(correct), rate(incorrect))
}

fn check_shapes<S: Scalar>(spec: &TaskSpec<S>, critic: &CriticPolicy<S>) -> Result<()> {
    if critic.num_questions() != spec.num_questions()
        || critic.num_answers() != spec.num_answers()
        || critic.num_hints() != spec.num_hints()
    {
        return Err(Error::config(format!(
            "critic shape ({}, {}, {}) does not match task ({}, {}, {})",
            critic.num_questions(),
            critic.num_answers(),
            critic.num_hints(),
            spec.num_questions(),
            spec.num_answers(),
            spec.num_hints()
        )));
    }
    Ok(())
}

/// Majority vote over sampled answers: 1 iff the modal answer equals
/// `correct_answer`. Ties break toward the answer that appears first in
/// the sample list. An empty slice votes incorrect.
pub fn majority_vote(samples: &[(usize, bool)], correct_answer: usize) -> bool {
    let mut tally: Vec<(usize, usize, usize)> = Vec::new(); // (answer, count, first_pos)
    for (pos, &(answer, _)) in samples.iter().enumerate() {
        match tally.iter_mut().find(|(a, _, _)| *a == answer) {
            Some((_, count, _)) => *count += 1,
            None => tally.push((answer, 1, pos)),
        }
    }
    let modal = tally
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)))
        .map(|&(answer, _, _)| answer);
    modal == Some(correct_answer)
}

/// 1 iff any sample is correct. An empty slice reports 0.
pub fn pass_at_k(samples: &[bool]) -> bool {
    samples.iter().any(|&ok| ok)
}

/// One row of an inference-scaling curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingPoint<S> {
    pub k: usize,
    /// MV@K over full response-critique-refinement rollouts.
    pub mv_with_critique: S,
    /// MV@K over original responses only.
    pub mv_without_critique: S,
    /// Pass@K of the critique-refine pipeline.
    pub pass_with_critique: S,
}

/// Estimates MV@K (and Pass@K) for each requested K, with and without the
/// critique-refine step, over `trials` independently drawn vote groups per
/// point. Each group votes on a single uniformly drawn question.
pub fn mv_curve<S: Scalar, R: Rng + ?Sized>(
    spec: &TaskSpec<S>,
    critic: &CriticPolicy<S>,
    ks: &[usize],
    trials: usize,
    rng: &mut R,
) -> Result<Vec<ScalingPoint<S>>> {
    if ks.is_empty() {
        return Err(Error::input("ks must be nonempty"));
    }
    if ks.contains(&0) {
        return Err(Error::input("K values must be positive"));
    }
    if trials == 0 {
        return Err(Error::input("trials must be positive"));
    }
    check_shapes(spec, critic)?;
    let mut points = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut mv_with = 0u64;
        let mut mv_without = 0u64;
        let mut pass_with = 0u64;
        for _ in 0..trials {
            let question = rng.gen_range(0..spec.num_questions());
            let correct = spec.correct_answer(question);
            let mut refined = Vec::with_capacity(k);
            let mut originals = Vec::with_capacity(k);
            for _ in 0..k {
                let ep = spec.rollout(critic, question, rng)?;
                refined.push((ep.refined_answer, ep.refined_correct));
                let (orig, ok) = spec.sample_original(question, rng)?;
                originals.push((orig, ok));
            }
            mv_with += u64::from(majority_vote(&refined, correct));
            mv_without += u64::from(majority_vote(&originals, correct));
            pass_with += u64::from(pass_at_k(
                &refined.iter().map(|&(_, ok)| ok).collect::<Vec<_>>(),
            ));
        }
        let rate = |hits: u64| {
            S::from_u64(hits).expect("count fits scalar")
                / S::from_usize(trials).expect("count fits scalar")
        };
        points.push(ScalingPoint {
            k,
            mv_with_critique: rate(mv_with),
            mv_without_critique: rate(mv_without),
            pass_with_critique: rate(pass_with),
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{episode_rng, Critique, RefineParams};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn episode(original_correct: bool, refined_correct: bool, verdict: bool) -> Episode {
        Episode {
            question: 0,
            original_answer: usize::from(!original_correct),
            original_correct,
            critique: Critique { verdict, hint: 0 },
            refined_answer: usize::from(!refined_correct),
            refined_correct,
        }
    }

    #[test]
    fn direct_count_example() {
        let eps = vec![
            episode(true, true, true),
            episode(true, false, true),
            episode(false, true, false),
            episode(false, true, true),
        ];
        let m: MetricsReport<f64> = compute_metrics(&eps).unwrap();
        assert_abs_diff_eq!(m.acc_orig, 0.5);
        assert_abs_diff_eq!(m.acc_refine, 0.75);
        assert_abs_diff_eq!(m.delta, 0.25);
        assert_abs_diff_eq!(m.delta_c_to_i, 0.5);
        assert_abs_diff_eq!(m.delta_i_to_c, 1.0);
        assert_abs_diff_eq!(m.acc_dis, 0.75);
        assert_eq!(m.counts.n, 4);
        assert_eq!(m.counts.n_c_to_i, 1);
        assert!(!m.degenerate_c_to_i);
    }

    #[test]
    fn unchanged_correct_batch() {
        let eps = vec![episode(true, true, true); 5];
        let m: MetricsReport<f64> = compute_metrics(&eps).unwrap();
        assert_abs_diff_eq!(m.delta, 0.0);
        assert_abs_diff_eq!(m.delta_c_to_i, 0.0);
        assert_abs_diff_eq!(m.acc_refine, m.acc_orig);
        assert!(m.degenerate_i_to_c, "no originally-incorrect episodes");
        assert_abs_diff_eq!(m.delta_i_to_c, 0.0);
    }

    #[test]
    fn empty_batch_is_input_error() {
        assert!(matches!(
            compute_metrics::<f64>(&[]),
            Err(Error::Input(_))
        ));
    }

    proptest! {
        #[test]
        fn report_identities_hold(flags in proptest::collection::vec((any::<bool>(), any::<bool>(), any::<bool>()), 1..60)) {
            let eps: Vec<Episode> = flags
                .iter()
                .map(|&(o, r, v)| episode(o, r, v))
                .collect();
            let m: MetricsReport<f64> = compute_metrics(&eps).unwrap();
            prop_assert!((m.acc_refine - (m.acc_orig + m.delta)).abs() < 1e-12);
            if !m.degenerate_c_to_i && !m.degenerate_i_to_c {
                let recomposed =
                    m.delta_i_to_c * (1.0 - m.acc_orig) - m.delta_c_to_i * m.acc_orig;
                prop_assert!((m.delta - recomposed).abs() < 1e-12);
            }
            prop_assert!((0.0..=1.0).contains(&m.acc_orig));
            prop_assert!((0.0..=1.0).contains(&m.acc_refine));
            prop_assert!((0.0..=1.0).contains(&m.acc_dis));
            prop_assert!((-1.0..=1.0).contains(&m.delta));
        }
    }

    fn spec() -> TaskSpec<f64> {
        TaskSpec::new(
            2,
            3,
            2,
            vec![0, 2],
            vec![1, 0],
            vec![0.6, 0.2, 0.2, 0.3, 0.2, 0.5],
            RefineParams::new(0.95, 0.5, 0.9, 0.2).unwrap(),
            5,
        )
        .unwrap()
    }

    #[test]
    fn frozen_refinement_keeps_accuracy() {
        // Critic always says OK; p_keep_ok = 1 freezes the answer.
        let spec = TaskSpec::new(
            2,
            3,
            2,
            vec![0, 2],
            vec![1, 0],
            vec![0.6, 0.2, 0.2, 0.3, 0.2, 0.5],
            RefineParams::new(1.0, 0.5, 0.9, 0.2).unwrap(),
            5,
        )
        .unwrap();
        let mut critic = CriticPolicy::<f64>::uniform(2, 3, 2);
        for ctx in 0..critic.num_contexts() {
            for action in 0..critic.num_actions() {
                let c = critic.action_of(action);
                let idx = ctx * 4 + action;
                critic.logits_mut()[idx] = if c.verdict { 25.0 } else { -25.0 };
            }
        }
        let m = exact_metrics(&spec, &critic).unwrap();
        assert_abs_diff_eq!(m.acc_refine, m.acc_orig, epsilon = 1e-9);
        assert_abs_diff_eq!(m.delta, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(m.delta_c_to_i, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn perfect_verdict_critic_has_unit_acc_dis() {
        let spec = spec();
        let critic = CriticPolicy::teacher(&spec, 1.0, 0.5).unwrap();
        let m = exact_metrics(&spec, &critic).unwrap();
        assert!(m.acc_dis > 1.0 - 1e-9, "acc_dis {}", m.acc_dis);
        let (on_correct, on_incorrect) = exact_acc_dis_split(&spec, &critic).unwrap();
        assert!(on_correct > 1.0 - 1e-9);
        assert!(on_incorrect > 1.0 - 1e-9);
    }

    #[test]
    fn monte_carlo_matches_exact_metrics() {
        let spec = spec();
        let critic = CriticPolicy::teacher(&spec, 0.75, 0.6).unwrap();
        let exact = exact_metrics(&spec, &critic).unwrap();
        let episodes = spec.rollout_many(&critic, 200_000, 424_242).unwrap();
        let sampled: MetricsReport<f64> = compute_metrics(&episodes).unwrap();
        for (name, e, s) in [
            ("acc_orig", exact.acc_orig, sampled.acc_orig),
            ("acc_refine", exact.acc_refine, sampled.acc_refine),
            ("delta", exact.delta, sampled.delta),
            ("delta_c_to_i", exact.delta_c_to_i, sampled.delta_c_to_i),
            ("delta_i_to_c", exact.delta_i_to_c, sampled.delta_i_to_c),
            ("acc_dis", exact.acc_dis, sampled.acc_dis),
        ] {
            assert!((e - s).abs() < 0.005, "{name}: exact {e} vs sampled {s}");
        }
        let (ec, ei) = exact_acc_dis_split(&spec, &critic).unwrap();
        let (sc, si) = acc_dis_split::<f64>(&episodes);
        assert!((ec - sc).abs() < 0.005);
        assert!((ei - si).abs() < 0.005);
    }

    #[test]
    fn majority_vote_rules() {
        // Strict majority.
        assert!(majority_vote(&[(3, true), (3, true), (1, false)], 3));
        // K = 1 degenerates to the single sample.
        assert!(majority_vote(&[(2, true)], 2));
        assert!(!majority_vote(&[(1, false)], 2));
        // Tie breaks toward first occurrence.
        assert!(majority_vote(&[(0, true), (1, false)], 0));
        assert!(!majority_vote(&[(0, false), (1, true)], 1));
        assert!(!majority_vote(&[], 0));
    }

    #[test]
    fn pass_at_k_rules() {
        assert!(pass_at_k(&[false, false, true]));
        assert!(!pass_at_k(&[false, false]));
        // Monotone in prefix length.
        let samples = [false, true, false, true];
        let mut prev = false;
        for k in 1..=samples.len() {
            let now = pass_at_k(&samples[..k]);
            assert!(now >= prev);
            prev = now;
        }
    }

    #[test]
    fn mv_curve_k1_matches_exact_rates() {
        let spec = spec();
        let critic = CriticPolicy::teacher(&spec, 0.9, 0.8).unwrap();
        let exact = exact_metrics(&spec, &critic).unwrap();
        let mut rng = episode_rng(2_024, 0);
        let points = mv_curve(&spec, &critic, &[1], 40_000, &mut rng).unwrap();
        let p = points[0];
        let sigma = |rate: f64| (rate * (1.0 - rate) / 40_000.0).sqrt();
        assert!(
            (p.mv_without_critique - exact.acc_orig).abs() <= 3.0 * sigma(exact.acc_orig) + 1e-9,
            "without {} vs acc_orig {}",
            p.mv_without_critique,
            exact.acc_orig
        );
        assert!(
            (p.mv_with_critique - exact.acc_refine).abs() <= 3.0 * sigma(exact.acc_refine) + 1e-9,
            "with {} vs acc_refine {}",
            p.mv_with_critique,
            exact.acc_refine
        );
        assert_abs_diff_eq!(p.pass_with_critique, p.mv_with_critique, epsilon = 1e-12);
    }

    #[test]
    fn deterministic_actor_votes_perfectly() {
        let spec = TaskSpec::new(
            1,
            2,
            1,
            vec![1],
            vec![0],
            vec![0.0, 1.0],
            RefineParams::new(1.0, 0.0, 1.0, 1.0).unwrap(),
            0,
        )
        .unwrap();
        let critic = CriticPolicy::<f64>::uniform(1, 2, 1);
        let mut rng = episode_rng(4, 0);
        let points = mv_curve(&spec, &critic, &[1, 3], 500, &mut rng).unwrap();
        for p in points {
            assert_abs_diff_eq!(p.mv_with_critique, 1.0);
            assert_abs_diff_eq!(p.mv_without_critique, 1.0);
        }
    }
}
