mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use clhpo_core::clmethods::{
    batch_loss_derpp, batch_loss_er, batch_loss_er_ace, batch_loss_esmer, icarl_build_exemplars,
    icarl_nme_predict, EsmerState, MethodAux, MethodKind, TrainTrace, TrainerState,
};
use clhpo_core::hpo::{accuracy, HyperparamConfig, Phase};
use clhpo_core::memory::BufferEntry;
use clhpo_core::neural::{loss_and_grad, mse_logit_loss_and_grad, softmax_cross_entropy, GradientSet, Matrix};
use clhpo_core::{CostLedger, Error, Example};
use common::{blob_stream, param_bits, small_config, trainer};
use rand::Rng;

fn hp_for(method: MethodKind) -> HyperparamConfig {
    match method {
        MethodKind::Derpp => HyperparamConfig {
            alpha: Some(0.5),
            beta: Some(0.5),
            ..HyperparamConfig::lr_only(0.05)
        },
        MethodKind::Esmer => HyperparamConfig {
            loss_margin: Some(1.2),
            ..HyperparamConfig::lr_only(0.05)
        },
        _ => HyperparamConfig::lr_only(0.05),
    }
}

fn random_batch(n: usize, dim: usize, classes: &[usize], first_id: usize, seed: u64) -> Vec<Example> {
    let mut rng = clhpo_core::seed::rng(seed);
    (0..n)
        .map(|i| Example {
            id: first_id + i,
            features: (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            label: classes[rng.gen_range(0..classes.len())],
        })
        .collect()
}

fn sum_terms(terms: &[(f64, (f64, GradientSet))]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grads = vec![0.0; terms[0].1 .1.values().count()];
    for (w, (l, g)) in terms {
        loss += w * l;
        for (acc, v) in grads.iter_mut().zip(g.values()) {
            *acc += w * v;
        }
    }
    (loss, grads)
}

fn assert_close(got: (f64, &GradientSet), want: (f64, Vec<f64>)) {
    assert!((got.0 - want.0).abs() < 1e-12, "loss {} vs {}", got.0, want.0);
    for (a, b) in got.1.values().zip(&want.1) {
        assert!((a - b).abs() < 1e-12, "grad {a} vs {b}");
    }
}

fn bare_state(method: MethodKind) -> TrainerState {
    let stream = blob_stream(4, 2, 3, 20, 0);
    trainer(method, &stream, small_config(), 0)
}

#[test]
fn er_empty_replay_is_plain_cross_entropy() {
    let state = bare_state(MethodKind::Er);
    let cur = random_batch(7, 3, &[0, 1], 0, 1);
    let (l, g) = batch_loss_er(&state, &cur, &[]).unwrap();
    let (l2, g2) = loss_and_grad(&state.model, &cur, None).unwrap();
    assert_eq!(l.to_bits(), l2.to_bits());
    assert_eq!(g, g2);

    let (l, g) = batch_loss_er(&state, &[], &cur).unwrap();
    assert_eq!(l.to_bits(), l2.to_bits());
    assert_eq!(g, g2);
}

#[test]
fn er_matches_concatenation_oracle() {
    let state = bare_state(MethodKind::Er);
    for seed in 0..10 {
        let cur = random_batch(5, 3, &[2, 3], 0, seed);
        let rep = random_batch(4, 3, &[0, 1], 100, seed + 50);
        let mut joined = cur.clone();
        joined.extend(rep.iter().cloned());
        let got = batch_loss_er(&state, &cur, &rep).unwrap();
        let want = loss_and_grad(&state.model, &joined, None).unwrap();
        assert_eq!(got.0.to_bits(), want.0.to_bits());
        assert_eq!(got.1, want.1);
    }
}

#[test]
fn er_ace_is_sum_of_two_masked_terms() {
    let mut state = bare_state(MethodKind::ErAce);
    state.seen_classes = BTreeSet::from([0, 1]);
    for seed in 0..10 {
        let cur = random_batch(6, 3, &[2, 3], 0, seed);
        let rep = random_batch(5, 3, &[0, 1], 100, seed + 7);
        let (l, g) = batch_loss_er_ace(&state, &cur, &rep, &[2, 3]).unwrap();
        let want = sum_terms(&[
            (1.0, loss_and_grad(&state.model, &cur, Some(&[2, 3])).unwrap()),
            (1.0, loss_and_grad(&state.model, &rep, Some(&[0, 1, 2, 3])).unwrap()),
        ]);
        assert_close((l, &g), want);

        let (l, g) = batch_loss_er_ace(&state, &cur, &[], &[2, 3]).unwrap();
        let (l2, g2) = loss_and_grad(&state.model, &cur, Some(&[2, 3])).unwrap();
        assert_eq!((l.to_bits(), g), (l2.to_bits(), g2));
    }
}

#[test]
fn er_ace_equals_er_when_task_owns_every_class() {
    let state = bare_state(MethodKind::ErAce);
    let cur = random_batch(8, 3, &[0, 1, 2, 3], 0, 3);
    let ace = batch_loss_er_ace(&state, &cur, &[], &[0, 1, 2, 3]).unwrap();
    let er = batch_loss_er(&state, &cur, &[]).unwrap();
    assert_eq!(ace.0.to_bits(), er.0.to_bits());
    assert_eq!(ace.1, er.1);
}

fn entries_with_logits(examples: &[Example], logits: &Matrix) -> Vec<BufferEntry> {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| BufferEntry {
            example: e.clone(),
            task_id: 0,
            stored_logits: Some(logits.row(i).to_vec()),
            insertion_index: i,
        })
        .collect()
}

#[test]
fn derpp_is_sum_of_three_terms() {
    let state = bare_state(MethodKind::Derpp);
    let hp = HyperparamConfig {
        alpha: Some(1.0),
        beta: Some(1.0),
        ..HyperparamConfig::lr_only(0.1)
    };
    for seed in 0..10 {
        let cur = random_batch(5, 3, &[2, 3], 0, seed);
        let r1 = random_batch(4, 3, &[0, 1], 100, seed + 20);
        let r2 = random_batch(3, 3, &[0, 1], 200, seed + 40);
        let stored = Matrix::from_rows(
            &(0..4)
                .map(|i| (0..4).map(|c| (i * 4 + c) as f64 * 0.1 - 0.7).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let (l, g) = batch_loss_derpp(&state, &cur, &entries_with_logits(&r1, &stored), &r2, &hp).unwrap();
        let want = sum_terms(&[
            (1.0, loss_and_grad(&state.model, &cur, None).unwrap()),
            (1.0, mse_logit_loss_and_grad(&state.model, &r1, &stored).unwrap()),
            (1.0, loss_and_grad(&state.model, &r2, None).unwrap()),
        ]);
        assert_close((l, &g), want);
    }
}

#[test]
fn derpp_degenerate_cases() {
    let state = bare_state(MethodKind::Derpp);
    let cur = random_batch(5, 3, &[2, 3], 0, 1);
    let r1 = random_batch(4, 3, &[0, 1], 100, 2);
    let live = state.model.forward(&r1).unwrap();
    let zero = HyperparamConfig {
        alpha: Some(0.0),
        beta: Some(0.0),
        ..HyperparamConfig::lr_only(0.1)
    };
    let ce = loss_and_grad(&state.model, &cur, None).unwrap();
    let got = batch_loss_derpp(&state, &cur, &entries_with_logits(&r1, &live), &r1, &zero).unwrap();
    assert_eq!((got.0.to_bits(), &got.1), (ce.0.to_bits(), &ce.1));

    let alpha_only = HyperparamConfig {
        alpha: Some(1.0),
        ..zero.clone()
    };
    let got = batch_loss_derpp(&state, &cur, &entries_with_logits(&r1, &live), &[], &alpha_only).unwrap();
    assert!((got.0 - ce.0).abs() < 1e-15);

    let mut missing = entries_with_logits(&r1, &live);
    missing[0].stored_logits = None;
    assert!(matches!(
        batch_loss_derpp(&state, &cur, &missing, &[], &alpha_only),
        Err(Error::State(_))
    ));
}

#[test]
fn herding_with_full_budget_reproduces_class_mean() {
    let state = bare_state(MethodKind::Icarl);
    let members = random_batch(9, 3, &[0], 0, 4);
    let picked = icarl_build_exemplars(&state.model, &members, members.len()).unwrap();
    let mut sorted = picked.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..9).collect::<Vec<_>>());

    let emb = state.model.embed(&members).unwrap();
    let mean = |idx: &[usize]| -> Vec<f64> {
        (0..emb.cols)
            .map(|c| idx.iter().map(|&i| emb.get(i, c)).sum::<f64>() / idx.len() as f64)
            .collect()
    };
    for (a, b) in mean(&picked).iter().zip(mean(&sorted)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn herding_single_exemplar_is_brute_force_argmin() {
    let state = bare_state(MethodKind::Icarl);
    for seed in 0..10 {
        let members = random_batch(12, 3, &[1], 0, seed);
        let emb = state.model.embed(&members).unwrap();
        let centre: Vec<f64> = (0..emb.cols)
            .map(|c| (0..emb.rows).map(|i| emb.get(i, c)).sum::<f64>() / emb.rows as f64)
            .collect();
        let d = |i: usize| -> f64 { (0..emb.cols).map(|c| (emb.get(i, c) - centre[c]).powi(2)).sum() };
        let best = (0..emb.rows).min_by(|&a, &b| d(a).total_cmp(&d(b))).unwrap();
        assert_eq!(icarl_build_exemplars(&state.model, &members, 1).unwrap(), [best]);
    }
}

#[test]
fn nme_separates_well_separated_classes() {
    let ds = clhpo_core::streamgen::synth_gaussian(2, 4, 60, 12.0, 3).unwrap();
    let stream = clhpo_core::streamgen::build_split_stream(&ds, 1, 3)
        .unwrap()
        .with_val_split(0.1, 3)
        .unwrap();
    let mut state = trainer(MethodKind::Icarl, &stream, small_config(), 3);
    let task = &stream.tasks[0];
    state
        .train_task(task, &task.train, &HyperparamConfig::lr_only(0.05), 1, Phase::Retrain, &mut CostLedger::default())
        .unwrap();
    assert_eq!(accuracy(&state, &task.train).unwrap(), 1.0);
    assert!(matches!(
        icarl_nme_predict(&state, &task.train[0].features, Some(&[0, 7])),
        Err(Error::State(_))
    ));
    let per_class = state.buffer.capacity() / 2;
    for c in 0..2 {
        assert!(state.buffer.entries().iter().filter(|e| e.example.label == c).count() <= per_class);
    }
}

fn esmer_state(mu: Option<f64>) -> TrainerState {
    let mut state = bare_state(MethodKind::Esmer);
    if let MethodAux::Esmer(st) = &mut state.aux {
        *st = EsmerState {
            stable: st.stable.clone(),
            loss_mean: mu,
        };
    }
    state
}

#[test]
fn esmer_scales_outlier_by_documented_factor() {
    let cur = random_batch(2, 3, &[0, 1, 2, 3], 0, 8);
    let state = esmer_state(None);
    let logits = state.model.forward(&cur).unwrap();
    let labels: Vec<usize> = cur.iter().map(|e| e.label).collect();
    let losses = softmax_cross_entropy(&logits, &labels, None, None).unwrap().per_example;
    let (lo, hi) = if losses[0] < losses[1] { (0, 1) } else { (1, 0) };

    // Choose mu so that only the larger loss crosses margin * mu.
    let margin = 1.2;
    let mu = (losses[lo] + losses[hi]) / 2.0 / margin;
    let state = esmer_state(Some(mu));
    let hp = HyperparamConfig {
        loss_margin: Some(margin),
        ..HyperparamConfig::lr_only(0.1)
    };
    let step = batch_loss_esmer(&state, &cur, &[], &hp).unwrap();
    let factor = mu * margin / losses[hi];
    assert_eq!(step.weights[lo], 1.0);
    assert!((step.weights[hi] - factor).abs() < 1e-15);

    // Hand computation: each single-example gradient, weighted, averaged.
    let g = |i: usize| loss_and_grad(&state.model, &cur[i..=i], None).unwrap();
    let mut weights = [1.0; 2];
    weights[hi] = factor;
    let want = sum_terms(&[(weights[0] / 2.0, g(0)), (weights[1] / 2.0, g(1))]);
    assert_close((step.loss, &step.grads), want);
    assert!((step.batch_mean_loss - (losses[lo] + factor * losses[hi]) / 2.0).abs() < 1e-12);
}

#[test]
fn esmer_without_gating_is_ce_plus_distillation() {
    let cur = random_batch(6, 3, &[0, 1], 0, 9);
    let rep = random_batch(4, 3, &[2, 3], 50, 10);
    let hp = HyperparamConfig {
        loss_margin: Some(1e9),
        ..HyperparamConfig::lr_only(0.1)
    };
    for mu in [None, Some(0.5)] {
        let state = esmer_state(mu);
        let step = batch_loss_esmer(&state, &cur, &rep, &hp).unwrap();
        assert!(step.weights.iter().all(|&w| w == 1.0));
        let stable = match &state.aux {
            MethodAux::Esmer(st) => st.stable.forward(&rep).unwrap(),
            _ => unreachable!(),
        };
        let want = sum_terms(&[
            (1.0, loss_and_grad(&state.model, &cur, None).unwrap()),
            (
                clhpo_core::clmethods::ESMER_DISTILL_WEIGHT,
                mse_logit_loss_and_grad(&state.model, &rep, &stable).unwrap(),
            ),
        ]);
        assert_close((step.loss, &step.grads), want);
    }
}

#[test]
fn every_method_learns_and_keeps_invariants() {
    let stream = blob_stream(6, 3, 4, 50, 2);
    for method in MethodKind::ALL {
        let mut state = trainer(method, &stream, small_config(), 2);
        let mut ledger = CostLedger::default();
        let mut seen = BTreeSet::new();
        for (i, task) in stream.tasks.iter().enumerate() {
            state
                .train_task(task, &task.train, &hp_for(method), 10 + i as u64, Phase::Retrain, &mut ledger)
                .unwrap();
            seen.extend(task.classes.iter().copied());
            assert_eq!(state.seen_classes, seen, "{method}");
            assert_eq!(ledger.total(), i as u64 + 1, "{method}");
            assert!(state.buffer.len() <= state.buffer.capacity());
        }
        assert!(state.model.is_finite(), "{method}");
        let test: Vec<Example> = stream.tasks.iter().flat_map(|t| t.test.clone()).collect();
        let acc = accuracy(&state, &test).unwrap();
        assert!(acc > 1.0 / 6.0, "{method}: accuracy {acc}");
    }
}

#[test]
fn overlapping_classes_are_rejected() {
    let stream = blob_stream(4, 2, 3, 20, 0);
    let task = &stream.tasks[0];
    let mut state = trainer(MethodKind::Er, &stream, small_config(), 0);
    let hp = HyperparamConfig::lr_only(0.05);
    let mut ledger = CostLedger::default();
    state.train_task(task, &task.train, &hp, 0, Phase::Retrain, &mut ledger).unwrap();
    assert!(matches!(
        state.train_task(task, &task.train, &hp, 0, Phase::Retrain, &mut ledger),
        Err(Error::Stream(_))
    ));
    let other = &stream.tasks[1];
    assert!(matches!(
        state.train_task(other, &task.train, &hp, 0, Phase::Retrain, &mut ledger),
        Err(Error::Stream(_))
    ));
    assert!(matches!(
        state.train_task(other, &other.train, &HyperparamConfig::lr_only(0.0), 0, Phase::Retrain, &mut ledger),
        Err(Error::Argument(_))
    ));
}

#[test]
fn training_is_deterministic_and_never_touches_eval_data() {
    let stream = blob_stream(4, 2, 3, 30, 5);
    let eval_ids: BTreeSet<usize> = stream
        .tasks
        .iter()
        .flat_map(|t| t.val.iter().chain(&t.test).map(|e| e.id))
        .collect();
    for method in MethodKind::ALL {
        let run = || {
            let trace = Arc::new(TrainTrace::default());
            let mut state = trainer(method, &stream, small_config(), 5).with_trace(trace.clone());
            for task in &stream.tasks {
                state
                    .train_task(task, &task.train, &hp_for(method), 3, Phase::Retrain, &mut CostLedger::default())
                    .unwrap();
            }
            (param_bits(&state.model), trace.snapshot().trained_ids())
        };
        let (a, ids) = run();
        let (b, _) = run();
        assert_eq!(a, b, "{method}");
        assert!(ids.is_disjoint(&eval_ids), "{method}");
    }
}

#[test]
fn method_names_parse() {
    for m in MethodKind::ALL {
        assert_eq!(m.name().parse::<MethodKind>().unwrap(), m);
    }
    match "ewc".parse::<MethodKind>() {
        Err(Error::Argument(msg)) => assert!(msg.contains("er_ace")),
        other => panic!("{other:?}"),
    }
    assert!(MethodKind::Icarl.is_simplified() && !MethodKind::Derpp.is_simplified());
}
