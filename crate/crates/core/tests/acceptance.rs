//! Acceptance gates, one test per shipping criterion.
//!
//! Every test prints exactly one summary line, `acceptance NN tag: PASS`
//! or `... FAIL`, with its measured numbers, then asserts. The first seven
//! are fast property checks against independent oracles; the last four are
//! seed-pinned desk-scale training runs with accuracy and runtime bounds.
//! Run with `--nocapture` to see the summary lines of passing tests too.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use driftwatch_core::continual::{
    continual_learn, expand, fisher_diagonal, fisher_diagonal_inputs, ContinualConfig,
};
use driftwatch_core::federated::{
    compute_alpha, lockstep_reference, merge_fisher, run_simulation, FederatedConfig,
    PushCadence, SyncMode,
};
use driftwatch_core::ingest::{
    assemble_flows, fixtures, flow_to_matrix, generate_synthetic, parse_pcap, Flow, FlowKey,
    FlowMatrix, LabelId, RawPacket, Sample, SyntheticSpec, Transport, DEFAULT_IDLE_TIMEOUT_US,
    MATRIX_COLS, MATRIX_LEN, MATRIX_ROWS,
};
use driftwatch_core::nn::check::{max_relative_error, numeric_gradient};
use driftwatch_core::nn::{
    add_logit_grads, backward, cross_entropy, distillation, fit, forward, infer,
    objective_value, write_model, Architecture, Drift, DriftForm, FitConfig, InputSpec,
    LayerSpec, Mode, ModelInput, NetworkModel, Penalties, Tensor,
};
use driftwatch_core::sampling::{build_task_dataset, SamplePools};
use driftwatch_core::scenario::{
    accuracy_at, scenario_early_detection, scenario_federated, scenario_pairwise, ArchPreset,
    DataSource, ModelKind, ScenarioConfig, ScenarioKind,
};
use driftwatch_core::seqlabel::stream_probabilities;

/// Prints the one-line verdict for a criterion, then enforces it.
fn verdict(tag: &str, ok: bool, detail: &str) {
    let status = if ok { "PASS" } else { "FAIL" };
    println!("acceptance {tag}: {status} ({detail})");
    assert!(ok, "acceptance {tag}: {status} ({detail})");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_grid(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> ModelInput {
    let data: Vec<f64> = (0..rows * cols).map(|_| r.random::<f64>()).collect();
    ModelInput::Grid(Tensor::new(vec![rows, cols], data).unwrap())
}

fn random_sequence(steps: usize, dim: usize, r: &mut ChaCha8Rng) -> ModelInput {
    let data: Vec<f64> = (0..steps * dim).map(|_| r.random::<f64>()).collect();
    ModelInput::Sequence(Tensor::new(vec![steps, dim], data).unwrap())
}

/// Analytic gradient of the mean cross entropy, eval mode throughout.
fn analytic_ce_gradient(
    model: &NetworkModel,
    inputs: &[ModelInput],
    labels: &[usize],
) -> Vec<f64> {
    let (out, trace) = forward(model, inputs, Mode::Eval, None).unwrap();
    let (_, grads) = cross_entropy(&out, labels).unwrap();
    backward(model, &trace, &grads).unwrap()
}

/// Central finite differences of an arbitrary scalar objective.
fn numeric_gradient_of(
    model: &NetworkModel,
    eps: f64,
    objective: impl Fn(&NetworkModel) -> f64,
) -> Vec<f64> {
    let mut probe = model.clone();
    let n = probe.n_params();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + eps;
        let plus = objective(&probe);
        probe.params_mut()[i] = orig - eps;
        let minus = objective(&probe);
        probe.params_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

#[test]
fn c01_analytic_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let eps = 1e-5;
    let tol = 1e-4;

    // One small model per layer family, all well under 2k parameters.
    let dense = NetworkModel::init(Architecture::mlp(6, &[8, 4, 2]), &mut rng(101)).unwrap();
    let conv =
        NetworkModel::init(Architecture::cnn(8, 10, &[2], &[6, 2]), &mut rng(102)).unwrap();
    let lstm =
        NetworkModel::init(Architecture::lstm(6, 5, &[4, 2]), &mut rng(103)).unwrap();

    let mut data_rng = rng(104);
    let dense_in: Vec<ModelInput> = (0..4).map(|_| random_grid(1, 6, &mut data_rng)).collect();
    let conv_in: Vec<ModelInput> = (0..4).map(|_| random_grid(8, 10, &mut data_rng)).collect();
    let lstm_in: Vec<ModelInput> =
        [3, 5, 2, 4].iter().map(|&s| random_sequence(s, 6, &mut data_rng)).collect();
    let labels = vec![0usize, 1, 1, 0];

    let max_params =
        dense.n_params().max(conv.n_params()).max(lstm.n_params());

    // Plain cross entropy on every family.
    let mut ce_worst: f64 = 0.0;
    for (model, inputs) in [(&dense, &dense_in), (&conv, &conv_in), (&lstm, &lstm_in)] {
        let analytic = analytic_ce_gradient(model, inputs, &labels);
        let numeric = numeric_gradient(model, inputs, &labels, eps).unwrap();
        ce_worst = ce_worst.max(max_relative_error(&analytic, &numeric));
    }

    // Cross entropy plus the importance anchor and both norm penalties,
    // on the recurrent model. Parameters are shifted off zero first so
    // the L1 term is differentiable everywhere it is probed.
    let mut anchored = lstm.clone();
    let mut prng = rng(105);
    for p in anchored.params_mut() {
        *p += 0.05 + 0.1 * prng.random::<f64>();
    }
    let n = anchored.n_params();
    let reference: Vec<f64> =
        anchored.params().iter().map(|p| p + 0.2 * (prng.random::<f64>() - 0.5)).collect();
    let importance: Vec<f64> = (0..n).map(|_| prng.random::<f64>()).collect();
    let first_half: Vec<usize> = (0..n / 2).collect();
    let second_half: Vec<usize> = (n / 2..n).collect();
    let penalties = Penalties {
        drift: Some(Drift {
            reference: &reference,
            fisher: &importance,
            map: None,
            weight: 0.7,
            form: DriftForm::Squared,
        }),
        l2_groups: vec![(&first_half, 0.3)],
        l1_group: Some((&second_half, 0.2)),
    };
    let (out, trace) = forward(&anchored, &lstm_in, Mode::Eval, None).unwrap();
    let (_, grads) = cross_entropy(&out, &labels).unwrap();
    let mut analytic = backward(&anchored, &trace, &grads).unwrap();
    penalties.value_and_grad(anchored.params(), &mut analytic).unwrap();
    let numeric = numeric_gradient_of(&anchored, eps, |m| {
        objective_value(m, &lstm_in, &labels, &penalties).unwrap()
    });
    let anchored_err = max_relative_error(&analytic, &numeric);

    // Cross entropy plus tempered distillation toward a fixed teacher,
    // on the convolutional model.
    let teacher =
        NetworkModel::init(Architecture::cnn(8, 10, &[2], &[6, 2]), &mut rng(106)).unwrap();
    let teacher_logits = infer(&teacher, &conv_in, Mode::Eval, None).unwrap().logits;
    let temperature = 2.5;
    let (out, trace) = forward(&conv, &conv_in, Mode::Eval, None).unwrap();
    let (_, mut grads) = cross_entropy(&out, &labels).unwrap();
    let (_, kd_grads) = distillation(&out, &teacher_logits, temperature).unwrap();
    add_logit_grads(&mut grads, &kd_grads);
    let analytic = backward(&conv, &trace, &grads).unwrap();
    let numeric = numeric_gradient_of(&conv, eps, |m| {
        let o = infer(m, &conv_in, Mode::Eval, None).unwrap();
        let (ce, _) = cross_entropy(&o, &labels).unwrap();
        let (kd, _) = distillation(&o, &teacher_logits, temperature).unwrap();
        ce + kd
    });
    let distilled_err = max_relative_error(&analytic, &numeric);

    let secs = t0.elapsed().as_secs_f64();
    let ok = ce_worst < tol
        && anchored_err < tol
        && distilled_err < tol
        && max_params <= 2000
        && secs < 60.0;
    verdict(
        "01 gradient-correctness",
        ok,
        &format!(
            "worst rel err: ce {ce_worst:.1e}, anchored {anchored_err:.1e}, \
             distilled {distilled_err:.1e}; largest model {max_params} params; {secs:.1}s"
        ),
    );
}

#[test]
fn c02_expansion_preserves_outputs_exactly() {
    let mut r = rng(7);
    let mut mismatches = 0usize;
    let mut checked = 0usize;

    let dense = NetworkModel::init(Architecture::mlp(12, &[10, 6, 2]), &mut r).unwrap();
    let conv = NetworkModel::init(Architecture::cnn(8, 10, &[2], &[6, 2]), &mut r).unwrap();
    let lstm = NetworkModel::init(Architecture::lstm(6, 5, &[4, 2]), &mut r).unwrap();

    for (model, sequence_dim) in [(&dense, None), (&conv, None), (&lstm, Some(6))] {
        let inputs: Vec<ModelInput> = (0..100)
            .map(|_| match (sequence_dim, model.arch().input) {
                (Some(dim), _) => {
                    let steps = r.random_range(1..=6);
                    random_sequence(steps, dim, &mut r)
                }
                (None, InputSpec::Grid { rows, cols }) => random_grid(rows, cols, &mut r),
                (None, InputSpec::Sequence { .. }) => unreachable!(),
            })
            .collect();
        let before = infer(model, &inputs, Mode::Eval, None).unwrap();
        let grown = expand(model, 10, &mut r).unwrap();
        let after = infer(grown.model(), &inputs, Mode::Eval, None).unwrap();
        for (b, a) in before.logits.iter().zip(&after.logits) {
            for (x, y) in b.iter().zip(a) {
                checked += 1;
                if x[0].to_bits() != y[0].to_bits() || x[1].to_bits() != y[1].to_bits() {
                    mismatches += 1;
                }
            }
        }
    }

    verdict(
        "02 expansion-exactness",
        mismatches == 0,
        &format!(
            "k=10 over 3 detector families, {checked} outputs compared bitwise, \
             {mismatches} differ"
        ),
    );
}

#[test]
fn c03_base_parameters_stay_bit_frozen_through_phase_one() {
    // Explicit first-phase fit on an expanded model.
    let mut r = rng(31);
    let prev = NetworkModel::init(Architecture::cnn(8, 10, &[2], &[6, 2]), &mut r).unwrap();
    let mut grown = expand(&prev, 6, &mut r).unwrap();
    let at_expansion = grown.model().params().to_vec();
    let inputs: Vec<ModelInput> = (0..16).map(|_| random_grid(8, 10, &mut r)).collect();
    let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();
    let mask = grown.phase1_mask();
    let cfg = FitConfig { epochs: 3, batch_size: 4, seed: 77, ..FitConfig::default() };
    fit(grown.model_mut(), &mask, &inputs, &labels, &Penalties::none(), &cfg).unwrap();

    let frozen = grown
        .prv_map()
        .iter()
        .enumerate()
        .all(|(old, &new)| prev.params()[old].to_bits() == grown.model().params()[new].to_bits());
    let zeros_kept = grown
        .structural_zeros()
        .iter()
        .all(|&i| grown.model().params()[i].to_bits() == 0.0f64.to_bits());
    let added_moved = grown
        .added_indices()
        .iter()
        .any(|&i| at_expansion[i].to_bits() != grown.model().params()[i].to_bits());

    // The same contract through the full expansion-update entry point,
    // with the second phase disabled.
    let data = generate_synthetic(&SyntheticSpec {
        classes: 2,
        flows_per_class: 16,
        seed: 5,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let mut r2 = rng(32);
    let prev2 =
        NetworkModel::init(Architecture::cnn(100, 200, &[1], &[8, 2]), &mut r2).unwrap();
    let fisher = fisher_diagonal(&prev2, &data.samples).unwrap();
    let ccfg = ContinualConfig {
        k: 3,
        epochs: 2,
        batch_size: 8,
        tau: 0.0,
        ..ContinualConfig::default()
    };
    let outcome = continual_learn(&prev2, &fisher, &data.samples, &ccfg).unwrap();
    let update_frozen = !outcome.phase2_used
        && outcome.network.prv_map().iter().enumerate().all(|(old, &new)| {
            prev2.params()[old].to_bits() == outcome.model().params()[new].to_bits()
        });

    let ok = frozen && zeros_kept && added_moved && update_frozen;
    verdict(
        "03 freeze-contract",
        ok,
        &format!(
            "base bits frozen: {frozen}; structural zeros kept: {zeros_kept}; \
             added params trained: {added_moved}; update entry point frozen: {update_frozen}"
        ),
    );
}

#[test]
fn c04_importance_matches_the_logistic_closed_form_and_stays_nonnegative() {
    // Dense 1 -> 2 with the first logit pinned at zero is the logistic
    // model p(1 | x) = sigmoid(theta x); its squared score has a closed
    // form that the importance estimate must reproduce.
    let arch = Architecture {
        input: InputSpec::Grid { rows: 1, cols: 1 },
        layers: vec![LayerSpec::Dense { inputs: 1, units: 2 }, LayerSpec::Softmax],
        dense_start: 0,
    };
    let mut model = NetworkModel::zeroed(arch).unwrap();
    let theta = -1.35;
    model.set_params(&[0.0, theta, 0.0, 0.0]).unwrap();
    let xs = [0.8, -0.3, 1.7, -2.2, 0.05, 0.6, -1.0];
    let ys = [1usize, 1, 0, 0, 1, 0, 1];
    let inputs: Vec<ModelInput> = xs
        .iter()
        .map(|&x| ModelInput::Grid(Tensor::new(vec![1, 1], vec![x]).unwrap()))
        .collect();
    let estimate = fisher_diagonal_inputs(&model, &inputs, &ys).unwrap();

    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
    let n = xs.len() as f64;
    let errs: Vec<f64> = xs.iter().zip(&ys).map(|(&x, &y)| sigmoid(theta * x) - y as f64).collect();
    let expected_w = errs.iter().zip(&xs).map(|(e, x)| e * e * x * x).sum::<f64>() / n;
    let expected_b = errs.iter().map(|e| e * e).sum::<f64>() / n;
    // Weight layout is both logits' input weights, then both biases; the
    // dead logit sees the mirrored score, so its squares are identical.
    let closed_dev = (estimate[0] - expected_w)
        .abs()
        .max((estimate[1] - expected_w).abs())
        .max((estimate[2] - expected_b).abs())
        .max((estimate[3] - expected_b).abs());

    // Nonnegativity and finiteness on random models of every family.
    let mut r = rng(44);
    let mut min_entry = f64::INFINITY;
    let mut entries = 0usize;
    let mut all_finite = true;
    let families = [
        NetworkModel::init(Architecture::mlp(5, &[7, 2]), &mut r).unwrap(),
        NetworkModel::init(Architecture::cnn(8, 10, &[2], &[6, 2]), &mut r).unwrap(),
        NetworkModel::init(Architecture::lstm(6, 5, &[4, 2]), &mut r).unwrap(),
    ];
    for model in &families {
        let inputs: Vec<ModelInput> = (0..30)
            .map(|_| match model.arch().input {
                InputSpec::Grid { rows, cols } => random_grid(rows, cols, &mut r),
                InputSpec::Sequence { dim } => {
                    let steps = r.random_range(1..=5);
                    random_sequence(steps, dim, &mut r)
                }
            })
            .collect();
        let labels: Vec<usize> = (0..30).map(|_| r.random_range(0..2)).collect();
        let estimate = fisher_diagonal_inputs(model, &inputs, &labels).unwrap();
        for &v in &estimate {
            min_entry = min_entry.min(v);
            all_finite &= v.is_finite();
            entries += 1;
        }
    }

    let ok = closed_dev <= 1e-10 && min_entry >= 0.0 && all_finite;
    verdict(
        "04 importance-oracle",
        ok,
        &format!(
            "closed-form deviation {closed_dev:.1e}; min of {entries} random-model \
             entries {min_entry:.1e}; all finite: {all_finite}"
        ),
    );
}

#[test]
fn c05_task_mixes_are_exactly_balanced_across_1000_random_cases() {
    let mut r = rng(55);
    let blank = FlowMatrix::zeroed();
    let sample = |label: LabelId| Sample { matrix: blank.clone(), label };

    let mut ok = true;
    let mut top_ups = 0usize;
    let mut trims = 0usize;
    for _ in 0..1000 {
        let old_classes = r.random_range(0..=4usize);
        let fresh = r.random_range(1..=8usize);
        let new_class = (old_classes + 1) as LabelId;
        let t = old_classes + 1;
        let benign_target = t * fresh;
        let fresh_benign = r.random_range(0..=2 * benign_target);

        let mut pools = SamplePools::new(64);
        for class in 1..=old_classes {
            let stock = r.random_range(1..=10usize);
            for _ in 0..stock {
                pools.insert(sample(class as LabelId), &mut r);
            }
        }
        let benign_stock = r.random_range(1..=benign_target.max(1));
        for _ in 0..benign_stock {
            pools.insert(sample(0), &mut r);
        }

        let mut new_data: Vec<Sample> = (0..fresh).map(|_| sample(new_class)).collect();
        new_data.extend((0..fresh_benign).map(|_| sample(0)));

        let mix = build_task_dataset(&mut pools, &new_data, new_class, &mut r).unwrap();
        top_ups += usize::from(mix.benign_from_pool > 0);
        trims += usize::from(mix.benign_trimmed > 0);

        let mut counts = vec![0usize; old_classes + 2];
        for s in &mix.samples {
            counts[s.label as usize] += 1;
        }
        ok &= mix.samples.len() == 2 * benign_target;
        ok &= mix.per_class == fresh;
        ok &= counts[0] == benign_target;
        ok &= (1..=old_classes + 1).all(|c| counts[c] == fresh);
    }

    verdict(
        "05 sampling-balance",
        ok,
        &format!(
            "1000 randomized cases all exactly balanced; benign topped up from the \
             pool in {top_ups}, trimmed in {trims}"
        ),
    );
}

#[test]
fn c06_single_agent_run_bit_matches_the_longhand_server_oracle() {
    let data = generate_synthetic(&SyntheticSpec {
        classes: 2,
        flows_per_class: 12,
        seed: 9,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let initial =
        NetworkModel::init(Architecture::cnn(100, 200, &[1], &[8, 2]), &mut rng(17)).unwrap();
    let initial_fisher = fisher_diagonal(&initial, &data.samples).unwrap();
    let task = data.samples.clone();

    let mut bit_match = true;
    for cadence in [PushCadence::Immediate, PushCadence::Coalesce { batches: 2 }] {
        let cfg = FederatedConfig {
            epochs: 2,
            batch_size: 5,
            cadence,
            continual: ContinualConfig {
                k: 2,
                epochs: 1,
                batch_size: 8,
                tau: 0.0,
                ..ContinualConfig::default()
            },
            seed: 23,
            ..FederatedConfig::default()
        };
        let run = run_simulation(
            &initial,
            &initial_fisher,
            task.len() as u64,
            std::slice::from_ref(&task),
            &cfg,
            SyncMode::Deterministic { seed: 3 },
        )
        .unwrap();
        let (oracle_model, oracle_fisher) =
            lockstep_reference(&initial, &initial_fisher, task.len() as u64, &task, &cfg)
                .unwrap();
        bit_match &= run
            .model
            .params()
            .iter()
            .zip(oracle_model.params())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        bit_match &=
            run.fisher.iter().zip(&oracle_fisher).all(|(a, b)| a.to_bits() == b.to_bits());
    }

    // Convexity of the importance merge on random inputs, endpoints exact.
    let mut r = rng(18);
    let mut convex = true;
    for _ in 0..200 {
        let n = r.random_range(1..=64usize);
        let main0: Vec<f64> = (0..n).map(|_| r.random::<f64>() * 10.0).collect();
        let agent: Vec<f64> = (0..n).map(|_| r.random::<f64>() * 10.0).collect();
        let n_main = r.random_range(0..=1000u64);
        let n_agent = r.random_range(0..=1000u64).max(u64::from(n_main == 0));
        let alpha = compute_alpha(n_main, n_agent).unwrap();
        let mut merged = main0.clone();
        merge_fisher(&mut merged, &agent, alpha).unwrap();
        for ((m, a), out) in main0.iter().zip(&agent).zip(&merged) {
            let (lo, hi) = (m.min(*a), m.max(*a));
            convex &= *out >= lo - 1e-12 && *out <= hi + 1e-12;
        }
        if alpha == 0.0 {
            convex &= merged.iter().zip(&main0).all(|(x, y)| x.to_bits() == y.to_bits());
        }
        if alpha == 1.0 {
            convex &= merged.iter().zip(&agent).all(|(x, y)| x.to_bits() == y.to_bits());
        }
    }

    let ok = bit_match && convex;
    verdict(
        "06 server-oracle",
        ok,
        &format!(
            "both push cadences bit-match the longhand trajectory: {bit_match}; \
             200 random merges stay inside their bounds: {convex}"
        ),
    );
}

#[test]
fn c07_a_recorded_four_agent_run_replays_to_identical_bytes() {
    let data = generate_synthetic(&SyntheticSpec {
        classes: 5,
        flows_per_class: 10,
        benign_flows: Some(16),
        seed: 41,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let benign: Vec<Sample> = data.samples.iter().filter(|s| s.label == 0).cloned().collect();
    let tasks: Vec<Vec<Sample>> = (1..=4u32)
        .map(|class| {
            let mut task: Vec<Sample> =
                data.samples.iter().filter(|s| s.label == class).cloned().collect();
            task.extend(benign[..4].iter().cloned());
            task
        })
        .collect();

    let initial =
        NetworkModel::init(Architecture::cnn(100, 200, &[1], &[8, 2]), &mut rng(61)).unwrap();
    let initial_fisher = fisher_diagonal(&initial, &benign).unwrap();
    let cfg = FederatedConfig {
        epochs: 1,
        batch_size: 4,
        continual: ContinualConfig {
            k: 2,
            epochs: 1,
            batch_size: 4,
            tau: 0.0,
            ..ContinualConfig::default()
        },
        seed: 67,
        ..FederatedConfig::default()
    };

    // Record under free OS scheduling, then replay the transcript.
    let recorded =
        run_simulation(&initial, &initial_fisher, 16, &tasks, &cfg, SyncMode::Free).unwrap();
    let replayed = run_simulation(
        &initial,
        &initial_fisher,
        16,
        &tasks,
        &cfg,
        SyncMode::Replay(recorded.transcript.clone()),
    )
    .unwrap();

    let mut first = Vec::new();
    write_model(&mut first, &recorded.model, Some(&recorded.fisher)).unwrap();
    let mut second = Vec::new();
    write_model(&mut second, &replayed.model, Some(&replayed.fisher)).unwrap();

    let ok = first == second && recorded.version == replayed.version;
    verdict(
        "07 replay-determinism",
        ok,
        &format!(
            "4 agents, {} transcript events, checkpoint bytes identical: {}, \
             final version {} == {}",
            recorded.transcript.len(),
            first == second,
            recorded.version,
            replayed.version
        ),
    );
}

#[test]
fn c08_expansion_updates_learn_zero_days_and_keep_the_known_class() {
    let t0 = Instant::now();
    let cfg = ScenarioConfig {
        kind: ScenarioKind::Pairwise,
        data: DataSource::Synthetic(SyntheticSpec {
            classes: 4,
            flows_per_class: 200,
            benign_flows: Some(400),
            seed: 1213,
            ..SyntheticSpec::default()
        }),
        model: ModelKind::Cnn,
        preset: ArchPreset::Compact,
        update_flows: 128,
        eval_per_class: 60,
        initial_epochs: 30,
        initial_batch: 32,
        seed: 2024,
        ..ScenarioConfig::default()
    };
    let report = scenario_pairwise(&cfg).unwrap();
    let secs = t0.elapsed().as_secs_f64();

    let initial = report.initial_known.accuracy;
    let worst_zero_day = report
        .cells
        .iter()
        .map(|c| c.after_zero_day.accuracy)
        .fold(f64::INFINITY, f64::min);
    let worst_drop = report
        .cells
        .iter()
        .map(|c| (initial - c.after_initial.accuracy).abs())
        .fold(0.0, f64::max);

    let ok = report.cells.len() == 2
        && worst_zero_day >= 0.90
        && worst_drop <= 0.05
        && secs < 600.0;
    verdict(
        "08 continual-analogue",
        ok,
        &format!(
            "3 attack classes, 128-flow updates: after-update zero-day min \
             {worst_zero_day:.3}, known-class shift max {worst_drop:.3} from \
             {initial:.3}; {secs:.0}s"
        ),
    );
}

#[test]
fn c09_federated_distillation_teaches_the_main_model_every_unknown() {
    let t0 = Instant::now();
    let cfg = ScenarioConfig {
        kind: ScenarioKind::Federated,
        data: DataSource::Synthetic(SyntheticSpec {
            classes: 5,
            flows_per_class: 200,
            benign_flows: Some(450),
            seed: 897,
            ..SyntheticSpec::default()
        }),
        model: ModelKind::Cnn,
        preset: ArchPreset::Compact,
        update_flows: 128,
        eval_per_class: 60,
        initial_epochs: 30,
        initial_batch: 32,
        deterministic: true,
        seed: 7,
        ..ScenarioConfig::default()
    };
    let report = scenario_federated(&cfg).unwrap();
    let secs = t0.elapsed().as_secs_f64();

    let before = report.unknowns_before.accuracy;
    let after = report.unknowns_after.accuracy;
    let known_shift = (report.known_after.accuracy - report.known_before.accuracy).abs();

    let ok = report.agents.len() == 3
        && (0.45..=0.65).contains(&before)
        && after >= 0.85
        && known_shift <= 0.05
        && secs < 900.0;
    verdict(
        "09 federated-analogue",
        ok,
        &format!(
            "3 agents: unknowns {before:.3} -> {after:.3}, known-class shift \
             {known_shift:.3}; {secs:.0}s"
        ),
    );
}

#[test]
fn c10_the_recurrent_detector_is_accurate_by_packet_fifteen() {
    let t0 = Instant::now();
    let cfg = ScenarioConfig {
        kind: ScenarioKind::EarlyDetection,
        data: DataSource::Synthetic(SyntheticSpec {
            classes: 3,
            flows_per_class: 150,
            benign_flows: Some(300),
            packets_min: 16,
            packets_max: 30,
            seed: 33,
            ..SyntheticSpec::default()
        }),
        model: ModelKind::Lstm,
        preset: ArchPreset::Compact,
        eval_per_class: 40,
        initial_epochs: 15,
        initial_batch: 32,
        seed: 5,
        ..ScenarioConfig::default()
    };
    let report = scenario_early_detection(&cfg).unwrap();
    let at_15 = accuracy_at(&report.curve, 15).expect("every synthetic flow has 16+ packets");

    // Streaming inference must agree with whole-prefix batch inference.
    let flows = cfg.data.load().unwrap();
    let mut prefix_dev: f64 = 0.0;
    for sample in flows.samples.iter().take(6) {
        let streamed = stream_probabilities(&report.model, &sample.matrix).unwrap();
        for p in 1..=streamed.len() {
            let mut data = Vec::with_capacity(p * MATRIX_COLS);
            for row in 0..p {
                data.extend(sample.matrix.row(row).iter().map(|&v| v as f64));
            }
            let input =
                ModelInput::Sequence(Tensor::new(vec![p, MATRIX_COLS], data).unwrap());
            let batch = infer(&report.model, &[input], Mode::Eval, None).unwrap();
            let probs = batch.final_probs(0);
            prefix_dev = prefix_dev
                .max((probs[0] - streamed[p - 1][0]).abs())
                .max((probs[1] - streamed[p - 1][1]).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();

    let ok = at_15 >= 0.80 && prefix_dev <= 1e-10 && secs < 600.0;
    verdict(
        "10 early-detection",
        ok,
        &format!(
            "accuracy at packet 15 over {} flows: {at_15:.3}; worst stream vs \
             batch prefix deviation {prefix_dev:.1e}; {secs:.0}s",
            report.n_eval
        ),
    );
}

#[test]
fn c11_capture_ingestion_is_field_exact_and_fuzz_stable() {
    // Hand-assembled capture: one two-packet conversation, one unrelated
    // TCP flow, and a revisit of the first endpoints after an idle gap
    // long enough to split the conversation.
    let p1 = fixtures::udp_packet([10, 0, 0, 1], [10, 0, 0, 2], 1111, 53, b"alpha payload");
    let p2 = fixtures::udp_packet([10, 0, 0, 2], [10, 0, 0, 1], 53, 1111, b"beta");
    let p3 = fixtures::tcp_packet([192, 168, 1, 5], [10, 9, 8, 7], 40000, 443, b"tcp body");
    let p4 = fixtures::udp_packet([10, 0, 0, 1], [10, 0, 0, 2], 1111, 53, b"late");
    let records = [
        (1u32, 0u32, &p1),
        (1, 200_000, &p2),
        (2, 0, &p3),
        (125, 0, &p4), // 123.8s after the conversation went quiet
    ];
    let mut ok = true;
    let mut parsed_summary = (0usize, 0usize);
    for big_endian in [false, true] {
        let mut capture = fixtures::global_header(big_endian);
        for (sec, usec, body) in &records {
            capture.extend_from_slice(&fixtures::record(
                big_endian,
                *sec,
                *usec,
                body.len() as u32,
                body,
            ));
        }
        let packets = parse_pcap(&capture).unwrap();
        ok &= packets.len() == 4;
        ok &= packets[0].ts_us == 1_000_000 && packets[1].ts_us == 1_200_000;
        ok &= packets[0].orig_len == p1.len() as u32 && packets[0].data == p1;
        ok &= packets[2].data == p3 && packets[3].ts_us == 125_000_000;

        let assembly = assemble_flows(packets, DEFAULT_IDLE_TIMEOUT_US);
        ok &= assembly.skipped == 0 && assembly.flows.len() == 3;
        let conversation = &assembly.flows[0];
        ok &= conversation.packets.len() == 2
            && conversation.first_seen_us == 1_000_000
            && conversation.last_seen_us == 1_200_000
            && conversation.key.transport == Transport::Udp
            && conversation.key.ip_lo == "10.0.0.1".parse::<std::net::IpAddr>().unwrap()
            && conversation.key.port_lo == 1111
            && conversation.key.port_hi == 53;
        ok &= assembly.flows[1].key.transport == Transport::Tcp;
        ok &= assembly.flows[2].packets.len() == 1
            && assembly.flows[2].key == conversation.key;

        // Field-exact matrix of the two-packet conversation.
        let m = flow_to_matrix(conversation, true);
        ok &= m.n_real_packets() == 2;
        let row = m.row(0);
        let b = |v: u8| v as f32 / 255.0;
        ok &= row[12] == b(0x08) && row[13] == 0.0; // ethertype ipv4
        ok &= row[14] == b(0x45); // version + header length
        ok &= row[22] == b(64) && row[23] == b(17); // ttl, udp
        ok &= row[24..34].iter().all(|&v| v == 0.0); // checksum + addresses scrubbed
        ok &= row[34] == b((1111u16 >> 8) as u8) && row[35] == b((1111 & 0xff) as u8);
        ok &= row[36] == 0.0 && row[37] == b(53);
        ok &= row[40] == 0.0 && row[41] == 0.0; // udp checksum scrubbed
        let payload = b"alpha payload";
        ok &= payload.iter().enumerate().all(|(j, &v)| row[42 + j] == b(v));
        ok &= row[42 + payload.len()..].iter().all(|&v| v == 0.0);
        ok &= m.row(1)[36] == b((1111u16 >> 8) as u8); // reverse packet kept as-is
        ok &= (2..MATRIX_ROWS).all(|i| m.row(i).iter().all(|&v| v == 0.0));
        parsed_summary = (4, assembly.flows.len());
    }

    // Structural invariants over fuzzed flows, including the 100-packet
    // and 200-byte clipping edges.
    let mut r = rng(71);
    let mut fuzz_ok = true;
    for _ in 0..10_000 {
        let n_packets = r.random_range(0..=110usize);
        let packets: Vec<RawPacket> = (0..n_packets)
            .map(|j| {
                let len = r.random_range(0..=210usize);
                let mut data = vec![0u8; len];
                r.fill(&mut data[..]);
                RawPacket { ts_us: j as u64 * 10, orig_len: len as u32, data }
            })
            .collect();
        let flow = Flow {
            key: FlowKey::canonical(
                "10.0.0.1".parse().unwrap(),
                1,
                "10.0.0.2".parse().unwrap(),
                2,
                Transport::Udp,
            ),
            first_seen_us: 0,
            last_seen_us: n_packets as u64 * 10,
            packets,
        };
        let m = flow_to_matrix(&flow, false);
        let kept = flow.packets.len().min(MATRIX_ROWS);
        fuzz_ok &= m.data().len() == MATRIX_LEN;
        fuzz_ok &= m.n_real_packets() as usize == kept;
        fuzz_ok &= m.data().iter().all(|&v| (0.0..=1.0).contains(&v));
        for (i, packet) in flow.packets.iter().take(kept).enumerate() {
            let row = m.row(i);
            let take = packet.data.len().min(MATRIX_COLS);
            fuzz_ok &=
                (0..take).all(|j| row[j] == packet.data[j] as f32 / 255.0);
            fuzz_ok &= row[take..].iter().all(|&v| v == 0.0);
        }
        fuzz_ok &= (kept..MATRIX_ROWS).all(|i| m.row(i).iter().all(|&v| v == 0.0));
        if !fuzz_ok {
            break;
        }
    }

    verdict(
        "11 ingestion",
        ok && fuzz_ok,
        &format!(
            "fixtures field-exact in both byte orders ({} packets -> {} flows): {ok}; \
             10k fuzzed flows hold every matrix invariant: {fuzz_ok}",
            parsed_summary.0, parsed_summary.1
        ),
    );
}
