use madlab::debate::DebateSettings;
use madlab::divergence::{DivergenceKind, JSD_GRAD_BOUND};
use madlab::opad::{
    complementary_fixture, debate_trajectory, privileged_gap_fixture, splice_states, task_accuracy,
    train, two_strategy_fixture, Fixture, OpadConfig,
};

const KINDS: [DivergenceKind; 3] = [
    DivergenceKind::ForwardKl,
    DivergenceKind::ReverseKl,
    DivergenceKind::Jsd { beta: 0.5 },
];

fn fixtures() -> Vec<(&'static str, Fixture)> {
    vec![
        ("complementary", complementary_fixture(0.5).unwrap()),
        ("privileged_gap", privileged_gap_fixture(2).unwrap()),
        ("two_strategy", two_strategy_fixture().unwrap()),
    ]
}

fn config(kind: DivergenceKind, iterations: usize) -> OpadConfig {
    OpadConfig {
        kind,
        iterations,
        ..OpadConfig::default()
    }
}

#[test]
fn teachers_are_never_mutated() {
    for (name, fx) in fixtures() {
        let before = fx.teacher_fingerprints();
        for kind in KINDS {
            train(&fx.env, &fx.teachers, &config(kind, 100)).unwrap();
            assert_eq!(fx.teacher_fingerprints(), before, "{name} {kind}");
        }
    }
}

#[test]
fn jsd_gradient_ceiling_holds_on_every_record() {
    for beta in [0.1, 0.5, 0.9] {
        let kind = DivergenceKind::jsd(beta).unwrap();
        for (name, fx) in fixtures() {
            let run = train(&fx.env, &fx.teachers, &config(kind, 300)).unwrap();
            let max = run.metrics.iter().map(|m| m.grad_inf).fold(0.0, f64::max);
            assert!(max <= JSD_GRAD_BOUND + 1e-9, "{name} {kind}: {max}");
        }
    }
}

#[test]
fn reverse_kl_gradient_exceeds_two_under_privileged_gap() {
    let fx = privileged_gap_fixture(2).unwrap();
    let run = train(
        &fx.env,
        &fx.teachers,
        &config(DivergenceKind::ReverseKl, 500),
    )
    .unwrap();
    assert!(run.max_grad_inf() > 2.0, "{}", run.max_grad_inf());
}

#[test]
fn identical_seed_gives_identical_loss_series() {
    for kind in KINDS {
        let fx = complementary_fixture(0.5).unwrap();
        let a = train(&fx.env, &fx.teachers, &config(kind, 200)).unwrap();
        let b = train(&fx.env, &fx.teachers, &config(kind, 200)).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.step_losses), bits(&b.step_losses), "{kind}");
        let c = train(
            &fx.env,
            &fx.teachers,
            &OpadConfig {
                seed: 1,
                ..config(kind, 200)
            },
        )
        .unwrap();
        assert_ne!(
            bits(&a.step_losses),
            bits(&c.step_losses),
            "{kind}: seed has no effect"
        );
    }
}

#[test]
fn zero_learning_rate_leaves_policy_unchanged() {
    let fx = complementary_fixture(0.5).unwrap();
    let run = train(
        &fx.env,
        &fx.teachers,
        &OpadConfig {
            learning_rate: 0.0,
            ..config(DivergenceKind::default(), 50)
        },
    )
    .unwrap();
    assert!(run.accuracy.iter().all(|a| *a == run.initial_accuracy));
    assert!(run
        .final_policy
        .rows()
        .iter()
        .all(|r| r.tool.as_slice().iter().all(|z| *z == 0.0)));
}

#[test]
fn replayed_trajectories_reproduce_transcripts() {
    let fx = complementary_fixture(0.5).unwrap();
    let cfg = OpadConfig {
        record_history: true,
        ..config(DivergenceKind::default(), 20)
    };
    let run = train(&fx.env, &fx.teachers, &cfg).unwrap();
    let settings = DebateSettings {
        rounds: cfg.rounds,
        tau_conf: cfg.tau_conf,
        parallel: false,
    };
    for (traj, logged) in run.trajectories.iter().zip(&run.transcripts) {
        let replay = debate_trajectory(&fx.teachers, traj, &settings, cfg.cache_debates).unwrap();
        let transcripts: Vec<_> = replay.into_iter().map(|o| o.transcript).collect();
        assert_eq!(&transcripts, logged);
    }
}

#[test]
fn forward_kl_splices_the_two_strategies() {
    let fx = two_strategy_fixture().unwrap();
    let run = train(
        &fx.env,
        &fx.teachers,
        &config(DivergenceKind::ForwardKl, 500),
    )
    .unwrap();
    let spliced = splice_states(&run.final_policy, &fx.env).unwrap();
    assert!(!spliced.is_empty());
}

/// The forward-KL arm does splice, but the JSD arm splices the same states:
/// with two product-form teachers the mixture target has the same tool and
/// argument argmaxes under both divergences, so both arms end at accuracy 0.
#[test]
#[ignore = "fails on this fixture: both arms splice every state (see README, known deviations)"]
fn forward_kl_accuracy_below_jsd_on_two_strategies() {
    let fx = two_strategy_fixture().unwrap();
    let acc = |kind| {
        let run = train(&fx.env, &fx.teachers, &config(kind, 500)).unwrap();
        task_accuracy(&run.final_policy, &fx.env).unwrap()
    };
    assert!(acc(DivergenceKind::ForwardKl) < acc(DivergenceKind::default()));
}
