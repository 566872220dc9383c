//! Synthetic reasoning-task environment.
//!
//! A task family is a finite set of questions, each with `m` candidate
//! answers of which exactly one is correct, and a hint vocabulary of `h`
//! hints of which exactly one is correct per question. The *actor* is
//! fixed: it draws an original answer from a per-question categorical
//! distribution and revises it according to a small behavior table once a
//! critique (a verdict plus a hint) arrives. Because everything is finite,
//! every expectation over the response-critique-refinement process can be
//! enumerated exactly, which is what the oracle tests in this crate lean on.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::policy::CriticPolicy;
use crate::scalar::{sample_categorical, Scalar};

/// Parameters of the actor's refinement behavior.
///
/// Given a critique, the actor either keeps its answer, breaks a correct
/// answer, or fixes an incorrect one:
///
/// * verdict says OK: keep the original with probability `p_keep_ok`,
///   otherwise resample from the original-answer distribution;
/// * verdict says FLAW but the original was correct: switch to a uniformly
///   random wrong answer with probability `p_break`, otherwise keep;
/// * verdict says FLAW and the original was incorrect: switch to the
///   correct answer with probability `p_fix_good` when the hint is the
///   question's correct hint, `p_fix_bad` otherwise; otherwise keep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineParams<S> {
    pub p_keep_ok: S,
    pub p_break: S,
    pub p_fix_good: S,
    pub p_fix_bad: S,
}

impl<S: Scalar> RefineParams<S> {
    pub fn new(p_keep_ok: S, p_break: S, p_fix_good: S, p_fix_bad: S) -> Result<Self> {
        let unit = |name: &str, v: S| -> Result<()> {
            if v < S::zero() || v > S::one() || !v.is_finite() {
                return Err(Error::input(format!("{name} = {v} outside [0, 1]")));
            }
            Ok(())
        };
        unit("p_keep_ok", p_keep_ok)?;
        unit("p_break", p_break)?;
        unit("p_fix_good", p_fix_good)?;
        unit("p_fix_bad", p_fix_bad)?;
        if p_fix_good < p_fix_bad {
            return Err(Error::input(format!(
                "p_fix_good ({p_fix_good}) must be >= p_fix_bad ({p_fix_bad}); hints must matter"
            )));
        }
        Ok(Self {
            p_keep_ok,
            p_break,
            p_fix_good,
            p_fix_bad,
        })
    }
}

/// A critique action: a binary verdict on the original answer plus a hint.
///
/// `verdict == true` means the critic judges the original answer correct
/// (OK); `false` flags it as flawed. The verdict is the critic's extracted
/// correctness judgment; the hint only matters to the actor when the
/// verdict is FLAW and the original answer was wrong.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Critique {
    pub verdict: bool,
    pub hint: usize,
}

/// One full response-critique-refinement interaction, with ground-truth
/// correctness bits for both of the actor's attempts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Episode {
    pub question: usize,
    pub original_answer: usize,
    pub original_correct: bool,
    pub critique: Critique,
    pub refined_answer: usize,
    pub refined_correct: bool,
}

/// The immutable environment definition: questions, answers, the fixed
/// actor's original-answer distributions, hint vocabulary and refinement
/// behavior. Also owns the ground-truth verifier.
#[derive(Clone, Debug)]
pub struct TaskSpec<S> {
    num_questions: usize,
    num_answers: usize,
    num_hints: usize,
    correct_answer: Vec<usize>,
    correct_hint: Vec<usize>,
    /// Row-major `num_questions x num_answers` original-answer distribution.
    actor_original: Vec<S>,
    refine_params: RefineParams<S>,
    seed: u64,
}

impl<S: Scalar> TaskSpec<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_questions: usize,
        num_answers: usize,
        num_hints: usize,
        correct_answer: Vec<usize>,
        correct_hint: Vec<usize>,
        actor_original: Vec<S>,
        refine_params: RefineParams<S>,
        seed: u64,
    ) -> Result<Self> {
        if num_questions == 0 {
            return Err(Error::input("num_questions must be positive"));
        }
        if num_answers < 2 {
            return Err(Error::input("num_answers must be at least 2"));
        }
        if num_hints == 0 {
            return Err(Error::input("num_hints must be positive"));
        }
        if correct_answer.len() != num_questions {
            return Err(Error::input(format!(
                "correct_answer has {} entries, expected {num_questions}",
                correct_answer.len()
            )));
        }
        if correct_hint.len() != num_questions {
            return Err(Error::input(format!(
                "correct_hint has {} entries, expected {num_questions}",
                correct_hint.len()
            )));
        }
        if let Some(a) = correct_answer.iter().find(|&&a| a >= num_answers) {
            return Err(Error::input(format!(
                "correct_answer entry {a} out of range (m = {num_answers})"
            )));
        }
        if let Some(t) = correct_hint.iter().find(|&&t| t >= num_hints) {
            return Err(Error::input(format!(
                "correct_hint entry {t} out of range (h = {num_hints})"
            )));
        }
        if actor_original.len() != num_questions * num_answers {
            return Err(Error::input(format!(
                "actor_original has {} entries, expected {}",
                actor_original.len(),
                num_questions * num_answers
            )));
        }
        let tol = S::from_f64_lossy(1e-12)
            .max(S::epsilon() * S::from_usize(4 * num_answers).expect("small count"));
        for q in 0..num_questions {
            let row = &actor_original[q * num_answers..(q + 1) * num_answers];
            if row.iter().any(|&p| p < S::zero() || !p.is_finite()) {
                return Err(Error::input(format!(
                    "actor_original row {q} has a negative or non-finite entry"
                )));
            }
            let sum: S = row.iter().copied().sum();
            if (sum - S::one()).abs() > tol {
                return Err(Error::input(format!(
                    "actor_original row {q} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self {
            num_questions,
            num_answers,
            num_hints,
            correct_answer,
            correct_hint,
            actor_original,
            refine_params,
            seed,
        })
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

    pub fn correct_answer(&self, question: usize) -> usize {
        self.correct_answer[question]
    }

    pub fn correct_hint(&self, question: usize) -> usize {
        self.correct_hint[question]
    }

    pub fn actor_row(&self, question: usize) -> &[S] {
        &self.actor_original[question * self.num_answers..(question + 1) * self.num_answers]
    }

    pub fn refine_params(&self) -> &RefineParams<S> {
        &self.refine_params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_question(&self, question: usize) -> Result<()> {
        if question >= self.num_questions {
            return Err(Error::input(format!(
                "question {question} out of range (Q = {})",
                self.num_questions
            )));
        }
        Ok(())
    }

    fn check_answer(&self, answer: usize) -> Result<()> {
        if answer >= self.num_answers {
            return Err(Error::input(format!(
                "answer {answer} out of range (m = {})",
                self.num_answers
            )));
        }
        Ok(())
    }

    fn check_critique(&self, critique: Critique) -> Result<()> {
        if critique.hint >= self.num_hints {
            return Err(Error::input(format!(
                "hint {} out of range (h = {})",
                critique.hint, self.num_hints
            )));
        }
        Ok(())
    }

    fn check_critic(&self, critic: &CriticPolicy<S>) -> Result<()> {
        if critic.num_questions() != self.num_questions
            || critic.num_answers() != self.num_answers
            || critic.num_hints() != self.num_hints
        {
            return Err(Error::config(format!(
                "critic shape ({}, {}, {}) does not match task ({}, {}, {})",
                critic.num_questions(),
                critic.num_answers(),
                critic.num_hints(),
                self.num_questions,
                self.num_answers,
                self.num_hints
            )));
        }
        Ok(())
    }

    /// Ground-truth verifier: 1 iff `answer` is the question's correct one.
    pub fn oracle_reward(&self, question: usize, answer: usize) -> Result<bool> {
        self.check_question(question)?;
        self.check_answer(answer)?;
        Ok(self.correct_answer[question] == answer)
    }

    /// Draws the actor's original answer for a question.
    pub fn sample_original<R: Rng + ?Sized>(
        &self,
        question: usize,
        rng: &mut R,
    ) -> Result<(usize, bool)> {
        self.check_question(question)?;
        let answer = sample_categorical(self.actor_row(question), rng);
        Ok((answer, self.correct_answer[question] == answer))
    }

    /// Applies the actor's refinement behavior table to one critique.
    pub fn refine<R: Rng + ?Sized>(
        &self,
        question: usize,
        original_answer: usize,
        critique: Critique,
        rng: &mut R,
    ) -> Result<(usize, bool)> {
        self.check_question(question)?;
        self.check_answer(original_answer)?;
        self.check_critique(critique)?;
        let p = &self.refine_params;
        let correct = self.correct_answer[question];
        let u = S::from_f64_lossy(rng.gen::<f64>());
        let refined = if critique.verdict {
            if u < p.p_keep_ok {
                original_answer
            } else {
                sample_categorical(self.actor_row(question), rng)
            }
        } else if original_answer == correct {
            if u < p.p_break {
                // Uniform over the m - 1 wrong answers.
                let pick = rng.gen_range(0..self.num_answers - 1);
                if pick >= original_answer {
                    pick + 1
                } else {
                    pick
                }
            } else {
                original_answer
            }
        } else {
            let p_fix = if critique.hint == self.correct_hint[question] {
                p.p_fix_good
            } else {
                p.p_fix_bad
            };
            if u < p_fix {
                correct
            } else {
                original_answer
            }
        };
        Ok((refined, refined == correct))
    }

    /// Exact distribution over refined answers for a (question, original
    /// answer, critique) triple, mirroring [`TaskSpec::refine`].
    pub fn refine_distribution(
        &self,
        question: usize,
        original_answer: usize,
        critique: Critique,
    ) -> Result<Vec<S>> {
        self.check_question(question)?;
        self.check_answer(original_answer)?;
        self.check_critique(critique)?;
        let p = &self.refine_params;
        let correct = self.correct_answer[question];
        let mut dist = vec![S::zero(); self.num_answers];
        if critique.verdict {
            dist[original_answer] += p.p_keep_ok;
            let resample = S::one() - p.p_keep_ok;
            for (slot, &mass) in dist.iter_mut().zip(self.actor_row(question)) {
                *slot += resample * mass;
            }
        } else if original_answer == correct {
            dist[original_answer] = S::one() - p.p_break;
            let share = p.p_break / S::from_usize(self.num_answers - 1).expect("m >= 2");
            for (a, slot) in dist.iter_mut().enumerate() {
                if a != original_answer {
                    *slot = share;
                }
            }
        } else {
            let p_fix = if critique.hint == self.correct_hint[question] {
                p.p_fix_good
            } else {
                p.p_fix_bad
            };
            dist[correct] = p_fix;
            dist[original_answer] = S::one() - p_fix;
        }
        Ok(dist)
    }

    /// Exact probability that the refinement lands on the correct answer.
    pub fn refined_correct_prob(
        &self,
        question: usize,
        original_answer: usize,
        critique: Critique,
    ) -> Result<S> {
        self.check_question(question)?;
        self.check_answer(original_answer)?;
        self.check_critique(critique)?;
        let p = &self.refine_params;
        let correct = self.correct_answer[question];
        let actor_correct = self.actor_row(question)[correct];
        Ok(if critique.verdict {
            if original_answer == correct {
                p.p_keep_ok + (S::one() - p.p_keep_ok) * actor_correct
            } else {
                (S::one() - p.p_keep_ok) * actor_correct
            }
        } else if original_answer == correct {
            S::one() - p.p_break
        } else if critique.hint == self.correct_hint[question] {
            p.p_fix_good
        } else {
            p.p_fix_bad
        })
    }

    /// Runs one full response-critique-refinement interaction.
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        critic: &CriticPolicy<S>,
        question: usize,
        rng: &mut R,
    ) -> Result<Episode> {
        self.check_critic(critic)?;
        self.check_question(question)?;
        let (original_answer, original_correct) = self.sample_original(question, rng)?;
        let context = critic.context_index(question, original_answer)?;
        let critique = critic.action_of(critic.sample_action(context, rng)?);
        let (refined_answer, refined_correct) =
            self.refine(question, original_answer, critique, rng)?;
        Ok(Episode {
            question,
            original_answer,
            original_correct,
            critique,
            refined_answer,
            refined_correct,
        })
    }

    /// Rollout over a uniformly drawn question.
    pub fn rollout_uniform<R: Rng + ?Sized>(
        &self,
        critic: &CriticPolicy<S>,
        rng: &mut R,
    ) -> Result<Episode> {
        let question = rng.gen_range(0..self.num_questions);
        self.rollout(critic, question, rng)
    }

    /// Generates `n` episodes on independent per-episode streams derived
    /// from `(seed, episode index)`, so the result does not depend on
    /// evaluation order.
    pub fn rollout_many(
        &self,
        critic: &CriticPolicy<S>,
        n: usize,
        seed: u64,
    ) -> Result<Vec<Episode>> {
        self.check_critic(critic)?;
        (0..n)
            .map(|i| {
                let mut rng = episode_rng(seed, i as u64);
                self.rollout_uniform(critic, &mut rng)
            })
            .collect()
    }
}

/// Independent RNG stream for episode `index` under a base seed.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
