mod common;

use tasklab::checkpoint::Checkpoint;
use tasklab::datasets::{Buffer, ValSet};
use tasklab::encoders::LanguageBackend;
use tasklab::evaluator::{
    run_evaluation_set, EvalConfig, IdleController, ScriptTarget, ScriptedController,
};
use tasklab::expert::{build_training_buffer, build_validation_set, ExpertConfig};
use tasklab::policy::{Arch, ConditioningMode};
use tasklab::simenv::{ResetOptions, TabletopEnv};
use tasklab::taskspace::{split, Scenario};
use tasklab::trainer::{finetune, read_metrics, run_loop, RunOutput, TrainConfig, Trainer};
use tasklab::Error;

use ConditioningMode as M;

fn data(env: &TabletopEnv) -> (Buffer, ValSet) {
    let s = split(Scenario::Mini);
    let train: Vec<usize> = s.train_ids.into_iter().take(6).collect();
    let test: Vec<usize> = s.test_ids.into_iter().take(3).collect();
    let opts = ResetOptions::default();
    let (buffer, _) =
        build_training_buffer(env, &train, 2, 9, opts, &ExpertConfig::default()).unwrap();
    let (val, _) = build_validation_set(env, &test, 9, opts, &ExpertConfig::default()).unwrap();
    (buffer, val)
}

fn config(mode: ConditioningMode) -> TrainConfig {
    TrainConfig {
        mode,
        tasks_per_batch: 4,
        samples_per_task: 4,
        eval_every: 2,
        eval_trials: 1,
        ..TrainConfig::desk()
    }
}

fn trainer(mode: ConditioningMode, seed: u64) -> Trainer {
    let cfg = config(mode);
    Trainer::new(cfg, common::small_model(mode, Arch::default()), seed).unwrap()
}

#[test]
fn iterations_are_reproducible() {
    let env = TabletopEnv::default();
    let (buffer, _) = data(&env);
    let lb = LanguageBackend::Stub;
    for mode in [M::Deltaco, M::Mcil] {
        let run = |seed| {
            let mut t = trainer(mode, seed);
            let rows: Vec<_> = (0..10)
                .map(|_| t.iteration(&buffer, &lb).unwrap())
                .collect();
            (rows, t.agent.params.export().unwrap())
        };
        let a = run(0);
        assert_eq!(a, run(0));
        assert_ne!(a.1, run(1).1);
        assert!(a.0.iter().all(|r| r.l.is_finite()));
    }
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let env = TabletopEnv::default();
    let (buffer, _) = data(&env);
    let lb = LanguageBackend::Stub;
    let mut straight = trainer(M::DemoOnly, 3);
    let rows: Vec<_> = (0..6)
        .map(|_| straight.iteration(&buffer, &lb).unwrap())
        .collect();

    let mut first = trainer(M::DemoOnly, 3);
    for _ in 0..3 {
        first.iteration(&buffer, &lb).unwrap();
    }
    let bytes = first.checkpoint().unwrap().to_bytes().unwrap();
    let ck = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
    let mut resumed = Trainer::from_checkpoint(&ck).unwrap();
    assert_eq!(resumed.step, 3);
    let tail: Vec<_> = (0..3)
        .map(|_| resumed.iteration(&buffer, &lb).unwrap())
        .collect();
    assert_eq!(tail, rows[3..]);
    assert_eq!(
        resumed.agent.params.export().unwrap(),
        straight.agent.params.export().unwrap()
    );
    assert_eq!(
        resumed.opt.export().unwrap(),
        straight.opt.export().unwrap()
    );
}

#[test]
fn evaluation_schedule_and_run_outputs() {
    let env = TabletopEnv::default();
    let (buffer, val) = data(&env);
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutput {
        dir: dir.path().join("run"),
    };
    let lb = LanguageBackend::Stub;
    let t = trainer(M::LanguageOnly, 0);
    let outcome = run_loop(t, 6, &buffer, &val, Some(&val), &lb, &env, Some(&out)).unwrap();
    assert_eq!(outcome.test_success.len(), 3);
    let evaluated: Vec<u64> = outcome
        .metrics
        .iter()
        .filter(|r| r.test_success.is_some())
        .map(|r| r.step)
        .collect();
    assert_eq!(evaluated, vec![2, 4, 6]);
    assert!(outcome
        .metrics
        .iter()
        .all(|r| r.test_success.is_some() == r.train_success_opt.is_some()));
    for step in [2, 4, 6] {
        assert!(out.checkpoint_path(step).exists());
    }
    assert_eq!(read_metrics(&out.metrics_path()).unwrap(), outcome.metrics);
    let last = Checkpoint::load(&out.final_path()).unwrap();
    assert_eq!(last.step, 6);
    assert_eq!(last.params, outcome.trainer.agent.params.export().unwrap());
}

#[test]
fn finetune_protocol() {
    let env = TabletopEnv::default();
    let (buffer, val) = data(&env);
    let lb = LanguageBackend::Stub;
    let mut t = trainer(M::DemoOnly, 0);
    t.iteration(&buffer, &lb).unwrap();
    let ck = t.checkpoint().unwrap();

    let same = finetune(&ck, &Buffer::default(), 0, 5, &val, &lb, &env, None).unwrap();
    assert_eq!(same.trainer.checkpoint().unwrap(), ck);
    assert!(same.metrics.is_empty());

    let test_ids = val.task_ids();
    let (demos, _) = build_training_buffer(
        &env,
        &test_ids,
        2,
        5,
        ResetOptions::default(),
        &ExpertConfig::default(),
    )
    .unwrap();
    let tuned = finetune(&ck, &demos, 2, 2, &val, &lb, &env, None).unwrap();
    assert_eq!(tuned.trainer.step, ck.step + 2);
    assert_ne!(tuned.trainer.agent.params.export().unwrap(), ck.params);
    assert!(matches!(
        finetune(&ck, &demos, 3, 2, &val, &lb, &env, None),
        Err(Error::Quota { .. })
    ));

    let lang = trainer(M::LanguageOnly, 0).checkpoint().unwrap();
    assert!(finetune(&lang, &demos, 1, 1, &val, &lb, &env, None).is_err());
}

#[test]
fn reference_controllers_bound_the_success_scale() {
    let env = TabletopEnv::default();
    let test: Vec<usize> = split(Scenario::Mini).test_ids.into_iter().collect();
    let (val, _) = build_validation_set(
        &env,
        &test,
        1,
        ResetOptions::default(),
        &ExpertConfig::default(),
    )
    .unwrap();
    let cfg = EvalConfig::default();
    let clean = ExpertConfig {
        noise_sigma: 0.0,
        ..ExpertConfig::default()
    };
    let oracle = run_evaluation_set(
        &env,
        &mut ScriptedController::new(ScriptTarget::True, clean),
        &val,
        0,
        &cfg,
    )
    .unwrap();
    assert!(oracle >= 0.95, "{oracle}");
    assert_eq!(
        run_evaluation_set(&env, &mut IdleController, &val, 0, &cfg).unwrap(),
        0.0
    );
}

#[test]
fn micro_batches_match_whole_batch_gradients() {
    let env = TabletopEnv::default();
    let (buffer, _) = data(&env);
    let lb = LanguageBackend::Stub;
    for mode in [M::Deltaco, M::Mcil, M::Bcz, M::OneHot] {
        let grads = |micro_batch| {
            let cfg = TrainConfig {
                micro_batch,
                ..config(mode)
            };
            let t = Trainer::new(cfg, common::small_model(mode, Arch::default()), 5).unwrap();
            t.gradients(&buffer, &lb).unwrap()
        };
        let whole = grads(0);
        for micro in [3, 5, 16] {
            let part = grads(micro);
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-5 * a.abs().max(1.0);
            assert!(
                close(whole.l_pi, part.l_pi) && close(whole.l, part.l),
                "{mode} micro {micro}"
            );
            assert_eq!(whole.l_demo, part.l_demo);
            assert_eq!(
                whole.grads.keys().collect::<Vec<_>>(),
                part.grads.keys().collect::<Vec<_>>()
            );
            for (name, g) in &whole.grads {
                let diff = (g - &part.grads[name])
                    .unwrap()
                    .abs()
                    .unwrap()
                    .max_all()
                    .unwrap()
                    .to_scalar::<f32>()
                    .unwrap();
                let scale = g
                    .abs()
                    .unwrap()
                    .max_all()
                    .unwrap()
                    .to_scalar::<f32>()
                    .unwrap();
                assert!(
                    diff <= 1e-4 * scale.max(1e-3),
                    "{mode} micro {micro} {name}: {diff} vs {scale}"
                );
            }
        }
    }
}
