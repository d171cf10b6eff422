use endotrack::annotate::{FrameRef, LabeledSample};
use endotrack::format::{serialize, Instruction};
use endotrack::policy::{
    sample, sequence_logprob, sequence_logprob_and_grad, token_distribution, token_logprobs, FeatureVector, Phase,
    PolicyConfig, PolicyParams,
};
use endotrack::rewards::RewardBreakdown;
use endotrack::sim::{MotorState, Task};
use endotrack::trainer::{
    clipped_surrogate, compute_advantages, grpo_objective, grpo_train, sft_step, AdamW, AdvantageNorm, GroupBatch, GrpoConfig, KlReference,
    Prompt,
};
use endotrack::{seed, Action, BBox, Error};
use rand::Rng;

fn small() -> PolicyConfig {
    PolicyConfig {
        grid: 3,
        embed_dim: 3,
        hidden: 4,
        context: 2,
        max_len: 12,
    }
}

fn features(cfg: &PolicyConfig, s: u64) -> FeatureVector {
    let mut rng = seed::rng(s);
    let mut v: Vec<f64> = (0..cfg.grid * cfg.grid).map(|_| rng.random()).collect();
    v.extend([0.0, 1.0, 0.0, 1.0, 0.0]);
    FeatureVector(v)
}

fn prompt(cfg: &PolicyConfig, s: u64, instruction: Instruction) -> Prompt {
    let mut rng = seed::rng(seed::derive(s, 1));
    let bbox = BBox::new(rng.random_range(0..90), rng.random_range(0..90), rng.random_range(1..10), rng.random_range(1..10));
    let action = Action::ALL[rng.random_range(0..5)];
    let text = serialize((instruction == Instruction::Ib).then_some(bbox), action, instruction, 100)
        .unwrap()
        .to_canonical();
    let sample = LabeledSample {
        annotation: s,
        frame: FrameRef {
            scene_id: 0,
            step: 0,
            theta: MotorState::ZERO,
            render_seed: 0,
        },
        instruction,
        task: Task::Ar,
        target_index: 0,
        bbox,
        action,
        canonical_text: text,
    };
    Prompt {
        features: features(cfg, s),
        target: sample.tokens().unwrap(),
        sample,
    }
}

fn perturbed(p: &PolicyParams, s: u64, scale: f64) -> PolicyParams {
    let mut rng = seed::rng(s);
    p.with_values(p.values().iter().map(|v| v + scale * (rng.random::<f64>() - 0.5)).collect())
}

/// Groups sampled under `old`, with synthetic rewards.
fn groups(old: &PolicyParams, cfg: &PolicyConfig, n_groups: usize, g: usize, s: u64, norm: AdvantageNorm) -> Vec<GroupBatch> {
    let mut rng = seed::rng(s);
    (0..n_groups)
        .map(|k| {
            let f = features(cfg, s + k as u64);
            let completions = (0..g).map(|i| sample(old, &f, 1.0, s * 100 + (k * g + i) as u64)).collect();
            let rewards = (0..g)
                .map(|_| RewardBreakdown {
                    total: rng.random_range(0.0..3.0),
                    ..Default::default()
                })
                .collect();
            let mut gb = GroupBatch {
                prompt: k,
                features: f,
                completions,
                rewards,
                advantages: vec![],
                weight: 1.0 / n_groups as f64,
            };
            compute_advantages(&mut gb, norm);
            gb
        })
        .collect()
}

#[test]
fn advantage_examples() {
    let mk = |r: &[f64]| GroupBatch {
        prompt: 0,
        features: FeatureVector(vec![]),
        completions: vec![],
        rewards: r
            .iter()
            .map(|&t| RewardBreakdown {
                total: t,
                ..Default::default()
            })
            .collect(),
        advantages: vec![],
        weight: 1.0,
    };
    let mut g = mk(&[1.0, 0.0, 1.0, 0.0]);
    compute_advantages(&mut g, AdvantageNorm::Mean);
    assert_eq!(g.advantages, vec![0.5, -0.5, 0.5, -0.5]);
    let mut g = mk(&[2.0; 4]);
    compute_advantages(&mut g, AdvantageNorm::MeanStd);
    assert!(g.advantages.iter().all(|&a| a == 0.0));
    // mean 1.5, population std sqrt(0.75)
    let mut g = mk(&[3.0, 1.0, 1.0, 1.0]);
    compute_advantages(&mut g, AdvantageNorm::MeanStd);
    let s = 0.75f64.sqrt();
    let expect = [1.5 / s, -0.5 / s, -0.5 / s, -0.5 / s];
    for (a, e) in g.advantages.iter().zip(expect) {
        assert!((a - e).abs() < 1e-6);
    }
    assert!((g.advantages[0] - 1.7320508).abs() < 1e-6);
}

#[test]
fn mean_advantages_sum_to_zero() {
    let cfg = small();
    let old = PolicyParams::init(cfg, 1);
    for gb in groups(&old, &cfg, 5, 6, 3, AdvantageNorm::Mean) {
        assert!(gb.advantages.iter().sum::<f64>().abs() < 1e-12);
    }
}

#[test]
fn grpo_gradient_matches_finite_differences() {
    let cfg = small();
    for s in 0..5u64 {
        let old = PolicyParams::init(cfg, 10 + s);
        let gs = groups(&old, &cfg, 2, 2, 20 + s, AdvantageNorm::MeanStd);
        let params = perturbed(&old, 30 + s, 0.2);
        let reference = perturbed(&old, 40 + s, 0.2);
        let gcfg = GrpoConfig {
            kl_coeff: 0.3,
            clip_epsilon: 0.2,
            ..Default::default()
        };
        let (_, grad, _) = grpo_objective(&params, &reference, &gs, &gcfg).unwrap();
        let h = 1e-6;
        for i in 0..params.len() {
            let mut a = params.values().to_vec();
            a[i] += h;
            let mut b = params.values().to_vec();
            b[i] -= h;
            let la = grpo_objective(&params.with_values(a), &reference, &gs, &gcfg).unwrap().0;
            let lb = grpo_objective(&params.with_values(b), &reference, &gs, &gcfg).unwrap().0;
            let num = (la - lb) / (2.0 * h);
            assert!((num - grad[i]).abs() <= 1e-5 * (1.0 + num.abs()), "param {i}: fd {num} vs {}", grad[i]);
        }
    }
}

#[test]
fn on_policy_identities() {
    let cfg = small();
    let old = PolicyParams::init(cfg, 5);
    let gs = groups(&old, &cfg, 3, 4, 6, AdvantageNorm::MeanStd);
    for gb in &gs {
        for c in &gb.completions {
            let re = token_logprobs(&old, &gb.features, &c.tokens);
            for (a, b) in re.iter().zip(&c.logprobs) {
                assert!(((a - b).exp() - 1.0).abs() < 1e-12);
            }
        }
    }
    let gcfg = GrpoConfig {
        kl_coeff: 0.0,
        ..Default::default()
    };
    let (loss, grad, diag) = grpo_objective(&old, &old, &gs, &gcfg).unwrap();
    assert_eq!(diag.kl, 0.0);
    assert_eq!(diag.clip_fraction, 0.0);
    // objective equals the weighted mean advantage
    let expect: f64 = gs
        .iter()
        .map(|g| g.weight * g.advantages.iter().sum::<f64>() / g.advantages.len() as f64)
        .sum();
    assert!((loss + expect).abs() < 1e-12);
    // gradient equals the score-function estimator
    let mut sf = vec![0.0; old.len()];
    for g in &gs {
        for (c, a) in g.completions.iter().zip(&g.advantages) {
            let (_, lg) = sequence_logprob_and_grad(&old, &g.features, &c.tokens);
            let k = g.weight * a / (g.completions.len() as f64 * c.tokens.len() as f64);
            for (s, x) in sf.iter_mut().zip(lg) {
                *s -= k * x;
            }
        }
    }
    for (a, b) in grad.iter().zip(&sf) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn zero_advantage_zero_kl_is_exactly_zero() {
    let cfg = small();
    let old = PolicyParams::init(cfg, 8);
    let mut gs = groups(&old, &cfg, 2, 3, 9, AdvantageNorm::Mean);
    for g in &mut gs {
        g.advantages.iter_mut().for_each(|a| *a = 0.0);
    }
    let params = perturbed(&old, 1, 0.5);
    let gcfg = GrpoConfig {
        kl_coeff: 0.0,
        ..Default::default()
    };
    let (loss, grad, _) = grpo_objective(&params, &old, &gs, &gcfg).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grad.iter().all(|&g| g == 0.0));
}

#[test]
fn single_group_matches_direct_implementation() {
    let cfg = small();
    let old = PolicyParams::init(cfg, 12);
    let gs = groups(&old, &cfg, 1, 4, 13, AdvantageNorm::MeanStd);
    let params = perturbed(&old, 14, 0.6);
    let gcfg = GrpoConfig {
        kl_coeff: 0.1,
        clip_epsilon: 0.1,
        ..Default::default()
    };
    let (loss, _, _) = grpo_objective(&params, &old, &gs, &gcfg).unwrap();
    let g = &gs[0];
    let mut obj = 0.0;
    for (c, a) in g.completions.iter().zip(&g.advantages) {
        let toks = c.tokens.tokens();
        let mut acc = 0.0;
        for t in 0..toks.len() {
            let p = token_distribution(&params, &g.features, &toks[..t]);
            let q = token_distribution(&old, &g.features, &toks[..t]);
            let y = toks[t].index();
            let r = p[y] / q[y];
            let surr = (r * a).min(r.clamp(0.9, 1.1) * a);
            let kl: f64 = q.iter().zip(&p).map(|(qi, pi)| qi * (qi / pi).ln()).sum();
            acc += surr - 0.1 * kl;
        }
        obj += acc / toks.len() as f64;
    }
    obj /= g.completions.len() as f64;
    assert!((loss + obj).abs() < 1e-10, "{loss} vs {}", -obj);
}

#[test]
fn sft_zero_lr_is_identity_and_overfits_one_sample() {
    let cfg = small();
    let p0 = PolicyParams::init(cfg, 2);
    let pr = prompt(&cfg, 3, Instruction::Ib);
    let mut opt = AdamW::new(p0.len(), 0.0);
    let (same, _) = sft_step(&p0, &[&pr], 0.0, &mut opt).unwrap();
    assert_eq!(same, p0);

    let mut opt = AdamW::new(p0.len(), 0.0);
    let mut p = p0.clone();
    let mut first = None;
    let mut last = f64::INFINITY;
    for _ in 0..400 {
        let (next, nll) = sft_step(&p, &[&pr], 0.02, &mut opt).unwrap();
        first.get_or_insert(nll);
        last = nll;
        p = next;
    }
    let final_nll = -sequence_logprob(&p, &pr.features, &pr.target) / pr.target.len() as f64;
    assert!(final_nll < 0.1, "final nll {final_nll}");
    assert!(last < first.unwrap());
}

#[test]
fn sft_first_step_descends_on_large_batch() {
    let cfg = small();
    let p0 = PolicyParams::init(cfg, 4);
    let prompts: Vec<Prompt> = (0..100)
        .map(|i| prompt(&cfg, 100 + i, if i % 2 == 0 { Instruction::Ia } else { Instruction::Ib }))
        .collect();
    let batch: Vec<&Prompt> = prompts.iter().collect();
    let mut opt = AdamW::new(p0.len(), 0.0);
    let (p1, before) = sft_step(&p0, &batch, 1e-3, &mut opt).unwrap();
    let (_, after) = sft_step(&p1, &batch, 0.0, &mut opt).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn grpo_train_phase_gate_and_zero_steps() {
    let cfg = small();
    let p0 = PolicyParams::init(cfg, 6);
    let prompts = vec![prompt(&cfg, 1, Instruction::Ia)];
    let gcfg = GrpoConfig::default();
    assert!(matches!(
        grpo_train(&p0, Phase::Init, &prompts, &gcfg, 1, 100, false),
        Err(Error::ColdStart)
    ));
    let out = grpo_train(&p0, Phase::Sft, &prompts, &gcfg, 0, 100, false).unwrap();
    assert_eq!(out.params, p0);
    assert!(out.log.is_empty());
    let out = grpo_train(&p0, Phase::Init, &prompts, &gcfg, 2, 100, true).unwrap();
    assert_eq!(out.log.len(), 2);
    assert!(out.log.iter().all(|r| r.group_size == 4));
}

#[test]
fn huge_kl_coefficient_pins_policy_to_reference() {
    let cfg = small();
    let prompts: Vec<Prompt> = (0..8).map(|i| prompt(&cfg, 50 + i, Instruction::Ia)).collect();
    // a partially trained start, so sampled rewards vary within groups
    let mut p0 = PolicyParams::init(cfg, 7);
    let mut opt = AdamW::new(p0.len(), 0.0);
    let batch: Vec<&Prompt> = prompts.iter().collect();
    for _ in 0..40 {
        p0 = sft_step(&p0, &batch, 0.02, &mut opt).unwrap().0;
    }
    let gcfg = GrpoConfig {
        kl_coeff: 1e3,
        kl_reference: KlReference::Sft,
        learning_rate: 1e-3,
        ..Default::default()
    };
    let out = grpo_train(&p0, Phase::Sft, &prompts, &gcfg, 30, 100, false).unwrap();
    let free = grpo_train(
        &p0,
        Phase::Sft,
        &prompts,
        &GrpoConfig {
            kl_coeff: 0.0,
            ..gcfg.clone()
        },
        30,
        100,
        false,
    )
    .unwrap();
    let mean_kl = out.log.iter().map(|r| r.kl).sum::<f64>() / out.log.len() as f64;
    assert!(mean_kl < 0.01, "mean kl {mean_kl}");
    assert!(free.params.distance(&p0) > 0.0, "free run never received a learning signal");
    assert!(out.params.distance(&p0) < free.params.distance(&p0));
}

#[test]
fn clipped_surrogate_matches_unclipped_inside_band_and_caps_outside() {
    let eps = 0.2;
    for i in 0..=400 {
        let r = (0.8 + 0.4 * i as f64 / 400.0).clamp(1.0 - eps, 1.0 + eps);
        for a in [-2.5, -0.3, 0.0, 0.7, 3.0] {
            assert_eq!(clipped_surrogate(r, a, eps), r * a);
        }
    }
    assert_eq!(clipped_surrogate(2.0, 1.0, eps), 1.2);
    assert_eq!(clipped_surrogate(0.5, 1.0, eps), 0.5);
    assert_eq!(clipped_surrogate(0.5, -1.0, eps), -0.8);
    assert_eq!(clipped_surrogate(2.0, -1.0, eps), -2.0);
}
