//! Scratch verification of the reference-pipeline defaults. Not part of
//! the deliverable; run with `cargo run --release --example tune`.

use critic_lab::env::{RefineParams, TaskSpec};
use critic_lab::metrics::{exact_metrics, mv_curve};
use critic_lab::optim::KlDirection;
use critic_lab::pipeline::{
    iterative_train, run_sft, run_single_stage, run_stage1, run_stage2, Estimator, StageConfig,
    StageKind,
};
use critic_lab::policy::CriticPolicy;
use critic_lab::rewards::RewardKind;

fn reference_env() -> TaskSpec<f64> {
    let q = 4usize; let m = 3usize; let h = 3usize;
    let correct_answer: Vec<usize> = (0..q).map(|i| i % m).collect();
    let correct_hint: Vec<usize> = (0..q).map(|i| i % h).collect();
    let mut actor = Vec::new();
    for question in 0..q { for answer in 0..m {
        actor.push(if answer == correct_answer[question] { 0.6 } else { 0.2 });
    }}
    TaskSpec::new(q, m, h, correct_answer, correct_hint, actor,
        RefineParams::new(0.95, 0.5, 0.9, 0.2).unwrap(), 42).unwrap()
}

fn cfg(stage: StageKind, lr: f64, kl: f64, beta1: f64, seed: u64) -> StageConfig<f64> {
    StageConfig { stage, steps: 500, estimator: Estimator::Exact, learning_rate: lr,
        kl_coefficient: kl, beta1, kl_direction: KlDirection::ReferenceFirst, log_every: 25, seed }
}

fn main() {
    let spec = reference_env();
    let teacher = CriticPolicy::teacher_profile(&spec, 0.5, 0.99, 0.18).unwrap();
    let mut rng = critic_lab::env::episode_rng(1234, 0);
    let sft = run_sft(&spec, &teacher, 20_000, 1.0, &mut rng).unwrap();
    let sft_m = exact_metrics(&spec, sft.policy()).unwrap();
    println!("SFT: acc_orig={:.4} acc_refine={:.4} acc_dis={:.4} d_ic={:.4} d_ci={:.4}",
        sft_m.acc_orig, sft_m.acc_refine, sft_m.acc_dis, sft_m.delta_i_to_c, sft_m.delta_c_to_i);

    let c1 = cfg(StageKind::StageOne, 16.0, 0.01, 0.0, 7);
    let c2 = cfg(StageKind::StageTwo, 0.15, 0.01, 0.2, 8);
    let s1 = run_stage1(&spec, &sft, &c1).unwrap();
    let s1_m = exact_metrics(&spec, s1.final_snapshot.policy()).unwrap();
    println!("S1 : acc_refine={:.4} acc_dis={:.4} (c6 {} {})",
        s1_m.acc_refine, s1_m.acc_dis, sft_m.acc_dis <= 0.85, s1_m.acc_dis >= 0.99);
    let mut mono = true; let mut last = 0.0;
    for r in &s1.log.records { if r.metrics.acc_dis < last - 0.01 { mono = false; } last = r.metrics.acc_dis; }
    println!("S1 log acc_dis nondecreasing within 0.01: {mono}");

    let s2 = run_stage2(&spec, &s1.final_snapshot, &c2).unwrap();
    let ts = exact_metrics(&spec, s2.final_snapshot.policy()).unwrap();
    println!("S2 : acc_refine={:.4} acc_dis={:.4} d_ic={:.4} d_ci={:.4}",
        ts.acc_refine, ts.acc_dis, ts.delta_i_to_c, ts.delta_c_to_i);
    println!("c8 : refine_gain={:+.4} dis_drift={:+.4}",
        ts.acc_refine - s1_m.acc_refine, ts.acc_dis - s1_m.acc_dis);

    let ro = run_single_stage(&spec, &sft, RewardKind::Refine,
        &cfg(StageKind::SingleStage(RewardKind::Refine), 0.15, 0.01, 0.0, 9)).unwrap();
    let ro_m = exact_metrics(&spec, ro.final_snapshot.policy()).unwrap();
    let co = run_single_stage(&spec, &sft, RewardKind::Correction,
        &cfg(StageKind::SingleStage(RewardKind::Correction), 0.15, 0.01, 0.0, 10)).unwrap();
    let co_m = exact_metrics(&spec, co.final_snapshot.policy()).unwrap();
    let de = run_single_stage(&spec, &sft, RewardKind::Delta,
        &cfg(StageKind::SingleStage(RewardKind::Delta), 0.15, 0.01, 0.0, 11)).unwrap();
    let de_m = exact_metrics(&spec, de.final_snapshot.policy()).unwrap();
    println!("RO : acc_refine={:.4} d_ic={:.4} d_ci={:.4}", ro_m.acc_refine, ro_m.delta_i_to_c, ro_m.delta_c_to_i);
    println!("CO : acc_refine={:.4} d_ic={:.4} d_ci={:.4}", co_m.acc_refine, co_m.delta_i_to_c, co_m.delta_c_to_i);
    println!("DE : acc_refine={:.4} d_ic={:.4} d_ci={:.4}", de_m.acc_refine, de_m.delta_i_to_c, de_m.delta_c_to_i);
    println!("c7a gap={:.4}  c7b gap={:.4}  c7c {} {}",
        ts.delta_i_to_c - ro_m.delta_i_to_c, co_m.delta_c_to_i - ts.delta_c_to_i,
        ro_m.acc_refine < ts.acc_refine, co_m.acc_refine < ts.acc_refine);
    println!("ex1 {} ex2 |{:.4}|<=0.05 ex3 {} ; delta arm: ci_drop {} ic_near |{:.4}|",
        ro_m.delta_c_to_i < sft_m.delta_c_to_i,
        (ro_m.delta_i_to_c - sft_m.delta_i_to_c).abs(),
        co_m.delta_i_to_c > sft_m.delta_i_to_c,
        de_m.delta_c_to_i < sft_m.delta_c_to_i,
        (de_m.delta_i_to_c - sft_m.delta_i_to_c).abs());

    let (snaps, _) = iterative_train(&spec, &sft, 2, &c1, &c2).unwrap();
    let it1 = exact_metrics(&spec, snaps[2].policy()).unwrap();
    let it2 = exact_metrics(&spec, snaps[4].policy()).unwrap();
    println!("c9 : it1(ref={:.4},dis={:.4}) it2(ref={:.4},dis={:.4}) pass={}",
        it1.acc_refine, it1.acc_dis, it2.acc_refine, it2.acc_dis,
        it2.acc_refine >= it1.acc_refine - 0.02 && it2.acc_dis >= it1.acc_dis - 0.02);

    let mut rng = critic_lab::env::episode_rng(777, 0);
    let ks = [1usize, 2, 3, 4, 6, 12];
    let pts = mv_curve(&spec, s2.final_snapshot.policy(), &ks, 10_000, &mut rng).unwrap();
    for &k in &[1usize, 2, 4] {
        let with = pts.iter().find(|p| p.k == k).unwrap().mv_with_critique;
        let without3 = pts.iter().find(|p| p.k == 3 * k).unwrap().mv_without_critique;
        let sigma = |r: f64| (r * (1.0 - r) / 10_000.0).sqrt();
        let sep = with - without3;
        let bound = 3.0 * (sigma(with).powi(2) + sigma(without3).powi(2)).sqrt();
        println!("c10 k={k}: with={with:.4} without3k={without3:.4} sep={sep:.4} 3sigma={bound:.4} pass={}", sep > bound);
    }
}
