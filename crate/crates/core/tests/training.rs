use fsban_core::analysis::{evaluate, EvalSpec};
use fsban_core::data::{generate_universe, Split, Universe, UniverseConfig};
use fsban_core::losses::{distill_on, softplus, LossWeights};
use fsban_core::model::{logits_on, ModelConfig, ModelParams};
use fsban_core::optim::Adam;
use fsban_core::rng;
use fsban_core::train::{
    fd_meta_gradient, fsban_step, run_experiment, run_experiment_with, train_ban_generation, train_gen0_teacher,
    train_plain, Components, FsBanState, Mode, TeacherBank, Teachers, TrainConfig,
};
use fsban_core::{Tape, Tensor};

fn universe() -> Universe {
    generate_universe(&UniverseConfig {
        seed: 3,
        dim: 10,
        signal_dim: 5,
        samples_per_class: 60,
        ..Default::default()
    })
    .unwrap()
}

fn config(mode: Mode) -> TrainConfig {
    TrainConfig {
        seed: 11,
        mode,
        model: ModelConfig { input_dim: 10, hidden: vec![12], feature_dim: 6, ..Default::default() },
        n_query: 6,
        epochs: 4,
        teacher_epochs: 4,
        tasks_per_epoch: 6,
        val_tasks: 6,
        warmup_epochs: 1,
        tau_lr: 0.5,
        ..Default::default()
    }
}

#[test]
fn gen0_teacher_beats_chance_by_three_sigma() {
    let u = universe();
    let cfg = TrainConfig { teacher_epochs: 15, tasks_per_epoch: 20, ..config(Mode::Gen0) };
    let t = train_gen0_teacher(&u, &[1], &cfg, "t", None).unwrap();
    let spec = EvalSpec { n_tasks: 200, n_query: 16, ..Default::default() };
    let r = evaluate(&t.params, &u, 1, Split::Base, &spec, &mut rng::stream(0, "eval")).unwrap();
    let n = (200 * 5 * 16) as f64;
    let sigma = 100.0 * (0.2f64 * 0.8 / n).sqrt();
    assert!(r.mean_acc > 20.0 + 3.0 * sigma, "{}", r.mean_acc);
}

#[test]
fn runs_are_deterministic() {
    let u = universe();
    for mode in [Mode::Gen0, Mode::Ban, Mode::FsBan, Mode::FsBanLite] {
        let cfg = config(mode);
        assert_eq!(run_experiment(&u, &cfg).unwrap(), run_experiment(&u, &cfg).unwrap(), "{mode:?}");
    }
}

#[test]
fn lite_mode_keeps_the_temperature_fixed() {
    let u = universe();
    let r = run_experiment(&u, &config(Mode::FsBanLite)).unwrap();
    assert_eq!(r.tau_trajectory.len(), 4 * 6);
    assert!(r.tau_trajectory.iter().all(|&t| t == 4.0));
}

#[test]
fn learned_temperature_stays_positive_and_moves() {
    let u = universe();
    let r = run_experiment(&u, &config(Mode::FsBan)).unwrap();
    assert_eq!(r.tau_trajectory.len(), 4 * 6);
    assert!(r.tau_trajectory.iter().all(|&t| t > 0.0));
    assert!(r.tau_trajectory.iter().any(|&t| t != 4.0));
}

#[test]
fn frozen_temperature_is_constant() {
    let u = universe();
    let cfg = TrainConfig { tau_lr: 0.0, ..config(Mode::FsBan) };
    let r = run_experiment(&u, &cfg).unwrap();
    assert!(r.tau_trajectory.iter().all(|&t| t == r.tau_trajectory[0]));
}

#[test]
fn generations_chain_through_the_previous_student() {
    let u = universe();
    let cfg = TrainConfig { generations: 2, ..config(Mode::Ban) };
    let r = run_experiment(&u, &cfg).unwrap();
    assert_eq!(r.stages.len(), 3);
    let (seen, _) = u.leave_one_out(cfg.held_out_domain).unwrap();
    let teacher = r.stages[1].params.clone();
    let again = train_ban_generation(&u, &seen, &teacher, &cfg, "episodic", None).unwrap();
    assert_eq!(again.params, r.stages[2].params);
    // gen-0 was not altered by distilling from it
    let gen0 = train_gen0_teacher(&u, &seen, &cfg, "episodic", None).unwrap();
    assert_eq!(gen0.params, r.stages[0].params);
}

#[test]
fn training_never_touches_held_out_or_novel_classes() {
    let u = universe();
    let r = run_experiment(&u, &config(Mode::FsBan)).unwrap();
    let allowed: Vec<usize> = r.seen_domains.iter().flat_map(|&d| u.domains[d].split.base.clone()).collect();
    assert!(!r.training_classes().is_empty());
    assert!(r.training_classes().iter().all(|c| allowed.contains(c)));
    for (i, row) in r.teacher_selection.iter().enumerate() {
        assert_eq!(row[i], 0, "episode domain {i} was supervised by its own teacher");
    }
    assert!(r.teacher_selection.iter().flatten().sum::<u64>() == 4 * 6);
}

#[test]
fn zero_distillation_weights_reduce_to_plain_training() {
    let u = universe();
    let weights = LossWeights { lambda2: 0.0, lambda3: 0.0, ..Default::default() };
    let cfg = TrainConfig { weights, tau_lr: 0.0, ..config(Mode::FsBan) };
    let r = run_experiment(&u, &cfg).unwrap();
    let (seen, _) = u.leave_one_out(cfg.held_out_domain).unwrap();
    let init = ModelParams::init(&cfg.model, &mut rng::stream(cfg.seed, "episodic/student/init")).unwrap();
    let plain = train_plain(&u, &seen, &cfg, "episodic", cfg.epochs, init).unwrap();
    let student = r.student_stage();
    assert_eq!(student.params, plain.params);
    let losses = |s: &fsban_core::train::Stage| s.epochs.iter().map(|e| (e.train_loss, e.val_acc)).collect::<Vec<_>>();
    assert_eq!(losses(student), losses(&plain));
}

#[test]
fn all_off_cell_is_the_ban_student() {
    let u = universe();
    let ban_cfg = config(Mode::Ban);
    let cell = TrainConfig { mode: Mode::FsBan, components: Components::NONE, ..ban_cfg.clone() };
    let teachers = Teachers::train_selected(&u, &ban_cfg, true, true).unwrap();
    let a = run_experiment_with(&u, &ban_cfg, &teachers).unwrap();
    let b = run_experiment_with(&u, &cell, &teachers).unwrap();
    assert_eq!(a.student_stage(), b.student_stage());
}

fn bank_state(u: &Universe, cfg: &TrainConfig) -> (FsBanState, Vec<usize>) {
    let (seen, _) = u.leave_one_out(cfg.held_out_domain).unwrap();
    let models = seen.iter().map(|&d| train_gen0_teacher(u, &[d], cfg, &format!("t{d}"), None).unwrap().params).collect();
    let bank = TeacherBank::new(seen.clone(), models).unwrap();
    (FsBanState::new(cfg, &seen, u.domains.len(), None, Some(bank), "s").unwrap(), seen)
}

#[test]
fn warmup_leaves_the_bank_untouched_and_mr_moves_it_afterwards() {
    let u = universe();
    let cfg = TrainConfig { warmup_epochs: 2, ..config(Mode::FsBan) };
    let (mut state, seen) = bank_state(&u, &cfg);
    let before = state.bank.clone();
    let mut student = ModelParams::init(&cfg.model, &mut rng::stream(0, "s")).unwrap();
    let mut opt = Adam::new(cfg.student_lr, &student.tensors);
    let mut r = rng::stream(1, "eps");
    for epoch in 0..2 {
        for _ in 0..3 {
            let ep = u.sample_episode(seen[0], Split::Base, 5, 5, 6, &mut r).unwrap();
            let out = fsban_step(&mut state, &u, &mut student, &mut opt, &ep, epoch).unwrap();
            assert_ne!(out.teacher_domain, Some(seen[0]));
            assert!(out.tau > 0.0);
            assert_eq!(state.bank, before);
        }
    }
    let ep = u.sample_episode(seen[0], Split::Base, 5, 5, 6, &mut r).unwrap();
    let out = fsban_step(&mut state, &u, &mut student, &mut opt, &ep, 2).unwrap();
    let changed: Vec<usize> = (0..seen.len())
        .filter(|&i| state.bank.as_ref().unwrap().models[i] != before.as_ref().unwrap().models[i])
        .collect();
    let used = before.as_ref().unwrap().position(out.teacher_domain.unwrap()).unwrap();
    assert_eq!(changed, vec![used]);
}

#[test]
fn distilling_from_an_identical_teacher_has_no_js_gradient() {
    let u = universe();
    let cfg = config(Mode::Ban);
    let m = ModelParams::init(&cfg.model, &mut rng::stream(2, "m")).unwrap();
    let ep = u.sample_episode(1, Split::Base, 5, 5, 6, &mut rng::stream(2, "e")).unwrap();
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, true);
    let s = logits_on(&mut tape, &cfg.model, &vars, &ep).unwrap();
    let t = tape.constant(m.logits(&ep).unwrap());
    let js = distill_on(&mut tape, s, t, None, 0.0, 0.8, 4.0).unwrap();
    let g = tape.backward(js).unwrap();
    for (v, p) in vars.iter().zip(&m.tensors) {
        assert!(g.get_or_zeros(*v, p).data().iter().all(|x| x.abs() < 1e-12));
    }
}

/// Inner loss ½(θ − τ·a)², one gradient step of size η from θ0, outer loss
/// ½(θ' − b)². Analytic dL/dρ = (θ' − b) · η·a · sigmoid(ρ).
#[test]
fn meta_gradient_matches_the_bilevel_derivative() {
    let (theta0, a, b, eta) = (0.3, 1.7, -0.4, 0.25);
    for rho in [-2.0, -0.5, 0.0, 0.9, 1.4, 3.0] {
        let outer = |tau: f64| {
            let theta = theta0 - eta * (theta0 - tau * a);
            Ok(0.5 * (theta - b) * (theta - b))
        };
        let fd = fd_meta_gradient(rho, 1e-2, outer).unwrap();
        let tau = softplus(rho);
        let theta = theta0 - eta * (theta0 - tau * a);
        let exact = (theta - b) * eta * a / (1.0 + (-rho as f64).exp());
        assert!((fd - exact).abs() < 1e-3, "rho {rho}: {fd} vs {exact}");
    }
}

#[test]
fn mct_needs_two_source_domains_and_mm_needs_a_bank() {
    let u = universe();
    let cfg = config(Mode::FsBan);
    assert!(FsBanState::new(&cfg, &[1], u.domains.len(), None, None, "s").is_err());
    let no_mm = TrainConfig { components: Components { mm: false, ..Components::default() }, ..cfg };
    assert!(FsBanState::new(&no_mm, &[1, 2], u.domains.len(), None, None, "s").is_err());
    let _ = Tensor::scalar(0.0);
}
