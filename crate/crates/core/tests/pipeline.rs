use tandem_kd::bench::{self, evaluate_tandem, ExperimentConfig, TaskSuite};
use tandem_kd::budget::shaped_reward;
use tandem_kd::model::{ModelKind, Origin};
use tandem_kd::rng::derive_seed;
use tandem_kd::specdec::{lossy_spec_decode, SpecConfig};
use tandem_kd::training::{phase1_train, phase2_train, Phase1Config};

fn reference() -> (ExperimentConfig, TaskSuite) {
    let cfg = ExperimentConfig::reference();
    let suite = TaskSuite::generate(&cfg.suite, 0).unwrap();
    (cfg, suite)
}

#[test]
fn sweep_report_shape_and_reference_bounds() {
    let (cfg, suite) = reference();
    let trained = bench::train(&cfg, &suite, 0).unwrap();
    let sweep = bench::run_sweep(&cfg, &suite, &trained.checkpoints, 0).unwrap();
    assert_eq!(sweep.rows.len(), 6 + 33);
    let cm = cfg.sweep.cost;
    for r in &sweep.rows {
        assert!((0.0..=1.0).contains(&r.teacher_use), "{r:?}");
        assert!(r.cost >= cm.c_s, "{r:?}");
        assert!(r.quality <= sweep.teacher_reference + 0.02, "{r:?} above {}", sweep.teacher_reference);
    }
    let b0 = &sweep.rows[0];
    assert_eq!((b0.method.as_str(), b0.param), ("tandem", 0.0));
    assert!(b0.teacher_use <= cfg.selector.delta);
    assert!((b0.cost - cm.c_s).abs() <= cm.c_t * cfg.selector.delta);
    for r in sweep.rows.iter().filter(|r| r.method == "specdec" && r.param == 1.0) {
        assert!((r.quality - sweep.teacher_reference).abs() <= 1e-12, "{r:?}");
    }
}

#[test]
fn specdec_teacher_use_counts_cycles() {
    let (cfg, suite) = reference();
    let teacher = suite.teacher().unwrap();
    let draft = bench::prepare_draft(&cfg, &suite, &teacher, 0).unwrap();
    let spec = SpecConfig::new(3, 0.5).unwrap();
    let prompts = &suite.eval[..64];
    let e = bench::evaluate_specdec(&draft, &teacher, prompts, suite.config.max_len, &spec, false).unwrap();
    let mut total = 0.0;
    for p in prompts {
        let out = lossy_spec_decode(&teacher, &draft, p, teacher.vocab().eos(), suite.config.max_len, &spec).unwrap();
        assert_eq!(out.trace.teacher_passes(), out.trace.cycles.len());
        total += out.trace.cycles.len() as f64 / out.x_out.len() as f64;
    }
    assert!((e.teacher_use - total / prompts.len() as f64).abs() < 1e-12);
}

#[test]
fn phase2_is_reproducible() {
    let (mut cfg, suite) = reference();
    cfg.phase2.batches = 300;
    cfg.phase2.checkpoint_every = 100;
    let a = bench::train(&cfg, &suite, 4).unwrap();
    let b = bench::train(&cfg, &suite, 4).unwrap();
    assert_eq!(a.checkpoints.len(), 3);
    for (x, y) in a.checkpoints.iter().zip(&b.checkpoints) {
        assert_eq!(x.model, y.model);
        assert_eq!(x.lambdas, y.lambdas);
    }
    assert_eq!(a.log, b.log);
}

/// With the multiplier pinned at zero the budget drops out of the reward: a
/// teacher call earns exactly 0 while student tokens earn their normalized
/// likelihood, which is negative on average. Calling the teacher therefore
/// pays, and measured teacher use rises rather than collapsing.
#[test]
fn lambda_zero_ablation_raises_teacher_use() {
    let (mut cfg, suite) = reference();
    let teacher = suite.teacher().unwrap();
    let layout = cfg.layout();
    let init = suite.student_init(&teacher, ModelKind::Augmented, layout.n_budgets()).unwrap();
    let warm = phase1_train(&init, &teacher, &layout, &cfg.phase1, derive_seed(0, &[30])).unwrap();
    cfg.phase2.fixed_lambda = Some(0.0);
    cfg.phase2.ignore_budget = true;
    cfg.phase2.batches = 1000;
    let out = phase2_train(&warm, &teacher, &layout, &cfg.phase2, 1).unwrap();
    assert!(out.lagrange.iter().all(|l| l.lambda == 0.0));

    let r = &out.rewards;
    for b in [0.0, 0.3, 0.5] {
        assert_eq!(shaped_reward(Origin::Teacher, -1.0, 0.0, b, r), 0.0);
        assert_eq!(shaped_reward(Origin::Student, -1.0, 0.0, b, r), shaped_reward(Origin::Student, -1.0, 0.0, 0.0, r));
    }

    let trained = &out.checkpoints.last().unwrap().model;
    let use_of = |m| -> f64 {
        (0..layout.n_budgets())
            .map(|k| evaluate_tandem(m, &teacher, &suite.eval, &layout, k, suite.config.max_len, 5, false).unwrap().teacher_use)
            .sum()
    };
    let (before, after) = (use_of(&warm), use_of(trained));
    assert!(after > before, "teacher use {before} -> {after}");
}

#[test]
fn printed_guard_calls_at_unlabeled_positions() {
    let (cfg, suite) = reference();
    let teacher = suite.teacher().unwrap();
    let layout = cfg.layout();
    let init = suite.student_init(&teacher, ModelKind::Augmented, layout.n_budgets()).unwrap();
    let short = Phase1Config {
        batches: 50,
        ..cfg.phase1.clone()
    };
    let literal = Phase1Config {
        guard_as_printed: true,
        ..short.clone()
    };
    let prose = phase1_train(&init, &teacher, &layout, &short, 9).unwrap();
    let printed = phase1_train(&init, &teacher, &layout, &literal, 9).unwrap();
    // b = 0 labels nothing, so only the printed guard trains toward calls there
    let b0 = layout.student_instruction(0, 0) as usize;
    let tau_logit = |m: &tandem_kd::model::TabularLM| -> f64 {
        let rpi = m.rows_per_instruction();
        let t = m.tau().unwrap().index();
        (b0 * rpi..(b0 + 1) * rpi).map(|r| m.logits_row(r)[t]).sum::<f64>() / rpi as f64
    };
    assert_eq!(tau_logit(&prose), tau_logit(&init));
    assert!(tau_logit(&printed) > tau_logit(&init) + 1.0);
    let e = |m| evaluate_tandem(m, &teacher, &suite.eval, &layout, 0, suite.config.max_len, 5, false).unwrap().teacher_use;
    assert_eq!(e(&prose), 0.0);
    assert!(e(&printed) > 0.0);
}
