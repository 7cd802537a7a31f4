//! The release gate: one test per acceptance criterion, each printing a
//! single `criterion N (...): PASS` or `FAIL` line (run with
//! `--nocapture` to see them on success).
//!
//! Criterion 8's full protocol trains twelve models for tens of
//! thousands of steps and is `#[ignore]`d; a companion test verifies its
//! ingredients and prints a DECLARED line instead of a verdict.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::process::Command;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relay_mdm::diffusion::{
    board_to_tokens, mdm_loss, rollout_step_loss, select_positions, ModelStepper, StepDecision,
    StepTrace,
};
use relay_mdm::eval::{evaluate_set, rollout_violations, sweep, Slice};
use relay_mdm::model::checkpoint::load_model;
use relay_mdm::model::{
    array_names, build_model, forward, parameter_count, ModelConfig, ModelParams, RelayGammaInit,
};
use relay_mdm::sudoku::board::{check_legality, Board, CELLS};
use relay_mdm::sudoku::dataset::{is_basic_only, parse_record, PuzzleRecord};
use relay_mdm::sudoku::solver::solve_with_trace;
use relay_mdm::training::{
    bptt_term, grad_check, gradcheck_config, record_trace, replay_grads, rollout_window,
    run_training, EpisodeState, Objective, TrainConfig, GRAD_TOL,
};

fn report(number: usize, name: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    if detail.is_empty() {
        println!("criterion {number} ({name}): {verdict}");
    } else {
        println!("criterion {number} ({name}): {verdict} [{detail}]");
    }
    assert!(ok, "criterion {number} ({name}): {detail}");
}

fn board_string(cells: &[u8; CELLS]) -> String {
    cells.iter().map(|&v| (b'0' + v) as char).collect()
}

fn record_from(puzzle: &[u8; CELLS], solution: &[u8; CELLS]) -> PuzzleRecord {
    parse_record(&format!("{},{}", board_string(puzzle), board_string(solution))).unwrap()
}

/// Training fodder: solved boards with `blanks` random cells removed.
/// Solutions need not be unique, which training never requires.
fn quick_records(seed: u64, n: usize, blanks: usize) -> Vec<PuzzleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let solved = testkit::random_solved_board(&mut rng);
            let puzzle = testkit::blank_cells(&mut rng, &solved, blanks);
            record_from(&puzzle, &solved)
        })
        .collect()
}

#[test]
fn criterion_1_parameter_counts() {
    let cases = [
        (true, false, 7_106_304usize),
        (true, true, 7_099_776),
        (false, false, 7_105_536),
        (false, true, 7_099_008),
    ];
    let dir = tempfile::tempdir().unwrap();
    let mut ok = true;
    let mut detail = String::new();
    for (relay, tied, want) in cases {
        let cfg_path = dir.path().join(format!("relay{relay}_tied{tied}.cfg"));
        fs::write(
            &cfg_path,
            format!("relay_enabled = {relay}\ntie_embeddings = {tied}\n"),
        )
        .unwrap();
        let out = Command::new(env!("CARGO_BIN_EXE_relay-mdm"))
            .arg("inspect")
            .arg("--config")
            .arg(&cfg_path)
            .output()
            .unwrap();
        let stdout = String::from_utf8(out.stdout).unwrap();
        let reported: Option<usize> = stdout
            .lines()
            .next()
            .and_then(|l| l.strip_prefix("params: "))
            .and_then(|s| s.parse().ok());
        let counted = parameter_count(&ModelConfig {
            relay_enabled: relay,
            tie_embeddings: tied,
            ..ModelConfig::default()
        });
        if reported != Some(want) || counted != want {
            ok = false;
            detail = format!(
                "relay={relay} tied={tied}: inspect {reported:?}, counted {counted}, want {want}"
            );
            break;
        }
    }
    report(1, "parameter counts", ok, &detail);
}

#[test]
fn criterion_2_gradient_correctness() {
    let mut ok = true;
    let mut details: Vec<String> = Vec::new();
    let cases = [
        (Objective::Mlm, 1),
        (Objective::Rollout, 1),
        (Objective::Rollout, 2),
        (Objective::RelaySg, 1),
        (Objective::RelaySg, 2),
        (Objective::Relay, 1),
        (Objective::Relay, 2),
    ];
    for (objective, k) in cases {
        let r = grad_check(&gradcheck_config(objective), objective, k, 7).unwrap();
        if r.max_rel_err >= GRAD_TOL {
            ok = false;
            details.push(format!("{objective} K={k}: {:.2e}", r.max_rel_err));
        }
    }

    // The two-step estimator difference must equal the assembled
    // boundary term: grad(full unroll) - grad(severed) = extra adjoint
    // path through the carried state.
    let mcfg = gradcheck_config(Objective::Relay);
    let cfg = TrainConfig {
        objective: Objective::Relay,
        k: 2,
        threshold_std: 0.05,
        ..TrainConfig::default()
    };
    let mut found = None;
    for attempt in 0..50u64 {
        let params = build_model::<f64>(&mcfg, 40 + attempt).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(900 + attempt);
        let x0: Vec<u8> = (0..mcfg.seq_len).map(|_| rng.gen_range(1..=9u8)).collect();
        let clues: BTreeSet<usize> = (0..mcfg.seq_len).filter(|_| rng.gen_bool(0.2)).collect();
        if mcfg.seq_len - clues.len() < 2 {
            continue;
        }
        let trace = record_trace(&params, &x0, &clues, &cfg, &mut rng).unwrap();
        if trace.steps.len() == 2 {
            found = Some((params, trace));
            break;
        }
    }
    let (params, trace) = found.expect("no two-step rollout in 50 attempts");
    let (_, g_relay) = replay_grads(&params, &trace, Objective::Relay).unwrap();
    let (_, g_sg) = replay_grads(&params, &trace, Objective::RelaySg).unwrap();
    let term = bptt_term(&params, &trace).unwrap();
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for ((gr, gs), tm) in g_relay
        .arrays()
        .iter()
        .zip(g_sg.arrays().iter())
        .zip(term.arrays().iter())
    {
        for ((a, b), t) in gr.view().iter().zip(gs.view().iter()).zip(tm.view().iter()) {
            num += ((a - b) - t).powi(2);
            den += t.powi(2);
        }
    }
    let rel = num.sqrt() / den.sqrt().max(1e-8);
    if den == 0.0 || rel >= 1e-4 {
        ok = false;
        details.push(format!("boundary-term residual {rel:.2e} (norm {:.2e})", den.sqrt()));
    }
    report(2, "gradient correctness", ok, &details.join("; "));
}

#[test]
fn criterion_3_objective_collapse() {
    let mcfg_relay = ModelConfig::tiny();
    let mcfg_plain = ModelConfig { relay_enabled: false, ..mcfg_relay.clone() };
    let params_r = build_model::<f32>(&mcfg_relay, 11).unwrap();
    let params_p = build_model::<f32>(&mcfg_plain, 11).unwrap();

    let mut drng = ChaCha8Rng::seed_from_u64(31);
    let solved = testkit::random_solved_board(&mut drng);
    let puzzle = testkit::dig_puzzle(&mut drng, &solved, 60);
    let clues: BTreeSet<usize> = (0..CELLS).filter(|&i| puzzle[i] != 0).collect();
    let x0 = board_to_tokens(&Board::from_cells(solved).unwrap());

    let run = |params: &ModelParams<f32>, objective: Objective| {
        let cfg = TrainConfig { objective, k: 1, batch_size: 1, ..TrainConfig::default() };
        let mut eps = vec![EpisodeState::<f32>::start(x0.clone(), &clues, mcfg_relay.d_model)];
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        rollout_window(params, &mut eps, &cfg, &mut rng, true).unwrap()
    };
    let w_relay = run(&params_r, Objective::Relay);
    let w_sg = run(&params_r, Objective::RelaySg);
    let w_roll_r = run(&params_r, Objective::Rollout);
    let w_roll_p = run(&params_p, Objective::Rollout);

    let names_r = array_names(&mcfg_relay);
    let max_diff = |a: &ModelParams<f32>, b: &ModelParams<f32>, skip_relay: bool| -> f64 {
        let mut worst = 0.0f64;
        for ((name, x), y) in names_r.iter().zip(a.arrays()).zip(b.arrays()) {
            if skip_relay && name.starts_with("relay_norm.") {
                continue;
            }
            for (u, v) in x.view().iter().zip(y.view().iter()) {
                worst = worst.max((u - v).abs() as f64);
            }
        }
        worst
    };
    // Same model, full unroll vs severed: K = 1 has no boundary to
    // sever, so everything matches exactly.
    let sg_diff = max_diff(&w_relay.grads, &w_sg.grads, false);
    let loss_sg = (w_relay.loss - w_sg.loss).abs() as f64;
    // Same model, relay carried (from zero) vs relay path absent: the
    // injected correction is exactly zero at episode start, so shared
    // gradients agree; the relay norm's offset picks up gradient only
    // in the carrying run, so those arrays are excluded.
    let roll_diff = max_diff(&w_relay.grads, &w_roll_r.grads, true);
    let loss_roll = (w_relay.loss - w_roll_r.loss).abs() as f64;
    // Relay-free twin built from the same seed: weights coincide, so
    // the relay-free objective must coincide across architectures.
    let mut twin_diff = (w_roll_r.loss - w_roll_p.loss).abs() as f64;
    let names_p = array_names(&mcfg_plain);
    let by_name_r: BTreeMap<&str, usize> =
        names_r.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let r_arrays = w_roll_r.grads.arrays();
    for (name, y) in names_p.iter().zip(w_roll_p.grads.arrays()) {
        let x = &r_arrays[by_name_r[name.as_str()]];
        for (u, v) in x.view().iter().zip(y.view().iter()) {
            twin_diff = twin_diff.max((u - v).abs() as f64);
        }
    }

    // Dead relay norm (scale and offset both zero): the carried state
    // contributes exactly nothing, bitwise.
    let mcfg_zero = ModelConfig { relay_gamma_init: RelayGammaInit::Zeros, ..mcfg_relay.clone() };
    let params_z = build_model::<f32>(&mcfg_zero, 12).unwrap();
    let mut seq_tokens = x0.clone();
    for i in 0..CELLS {
        if !clues.contains(&i) {
            seq_tokens[i] = 10;
        }
    }
    let tokens = Array2::from_shape_vec((1, CELLS), seq_tokens).unwrap();
    let mut hrng = ChaCha8Rng::seed_from_u64(13);
    let h = Array2::from_shape_fn((CELLS, mcfg_relay.d_model), |_| hrng.gen_range(-1.0..1.0f32));
    let (with_h, _) = forward(&params_z, tokens.view(), Some(&h), false, None, false).unwrap();
    let (without, _) = forward(&params_z, tokens.view(), None, false, None, false).unwrap();
    let dead_exact = with_h
        .logits
        .iter()
        .zip(without.logits.iter())
        .all(|(a, b)| a == b);

    let tol = 1e-7;
    let ok = loss_sg == 0.0
        && sg_diff == 0.0
        && loss_roll <= tol
        && roll_diff <= tol
        && twin_diff <= tol
        && dead_exact;
    report(
        3,
        "objective collapse identities",
        ok,
        &format!(
            "severed {sg_diff:.1e}/{loss_sg:.1e}, relay-free {roll_diff:.1e}/{loss_roll:.1e}, \
             twin {twin_diff:.1e}, dead-norm exact {dead_exact}"
        ),
    );
}

#[test]
fn criterion_4_policy_oracle_equivalence() {
    let grid: Vec<f64> = (0..=20).map(|k| k as f64 * 0.05).collect();
    let taus = [0.05, 0.10, 0.15, 0.20, 0.25];
    let mut ok = true;
    let mut detail = String::new();
    let mut maps = 0usize;

    fn against_oracle(values: &[f64], tau: f64) -> bool {
        let map: BTreeMap<usize, f64> = values.iter().copied().enumerate().collect();
        let pairs: Vec<(usize, f64)> = map.iter().map(|(&i, &c)| (i, c)).collect();
        let got = select_positions(&map, tau).unwrap();
        let (want_sel, want_fb) = testkit::select_prefix_oracle(&pairs, tau);
        let got_sel: Vec<usize> = got.selected.iter().copied().collect();
        got_sel == want_sel && got.fallback_used == want_fb
    }

    // Every multiset of up to 6 grid confidences, assigned to positions
    // in ascending and descending value order to exercise index ties.
    fn enumerate(
        grid: &[f64],
        start: usize,
        left: usize,
        cur: &mut Vec<f64>,
        visit: &mut dyn FnMut(&[f64]),
    ) {
        if left == 0 {
            return;
        }
        for gi in start..grid.len() {
            cur.push(grid[gi]);
            visit(cur);
            enumerate(grid, gi, left - 1, cur, visit);
            cur.pop();
        }
    }
    let mut cur = Vec::new();
    let mut visit = |values: &[f64]| {
        maps += 1;
        let reversed: Vec<f64> = values.iter().rev().copied().collect();
        for &tau in &taus {
            if !against_oracle(values, tau) || !against_oracle(&reversed, tau) {
                if ok {
                    detail = format!("mismatch at {values:?} tau {tau}");
                }
                ok = false;
            }
        }
    };
    enumerate(&grid, 0, 6, &mut cur, &mut visit);

    // Raising the threshold only ever grows the selection.
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..10_000 {
        let m = rng.gen_range(1..=40);
        let map: BTreeMap<usize, f64> = (0..m).map(|i| (i, rng.gen::<f64>())).collect();
        let lo = rng.gen_range(0.01..0.97);
        let hi = rng.gen_range(lo..0.99);
        let small = select_positions(&map, lo).unwrap();
        let large = select_positions(&map, hi).unwrap();
        if !small.selected.is_subset(&large.selected) {
            if ok {
                detail = format!("selection shrank from tau {lo:.3} to {hi:.3}");
            }
            ok = false;
        }
    }
    report(
        4,
        "policy oracle equivalence",
        ok,
        &if ok { format!("{maps} maps x {} thresholds", taus.len()) } else { detail.clone() },
    );
}

#[test]
fn criterion_5_analytic_loss_values() {
    let ln17 = 17f64.ln();
    let mut worst = 0.0f64;
    for (rows, masked_n, t, fill) in [
        (9usize, 1usize, 0.3f64, 0.0f64),
        (9, 5, 0.7, 2.5),
        (16, 16, 1.0, -1.0),
    ] {
        let logits = Array2::<f64>::from_elem((rows, 17), fill);
        let x0: Vec<u8> = (0..rows).map(|i| (i % 9 + 1) as u8).collect();
        let masked: BTreeSet<usize> = (0..masked_n).collect();
        let m = mdm_loss(logits.view(), &x0, &masked, t).unwrap();
        let r = rollout_step_loss(logits.view(), &x0, &masked).unwrap();
        worst = worst.max((m - ln17 / t).abs()).max((r - ln17).abs());
    }
    report(
        5,
        "analytic loss values",
        worst < 1e-6,
        &format!("max deviation {worst:.2e}"),
    );
}

#[test]
fn criterion_6_sudoku_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut ok = true;
    let mut detail = String::new();

    // Legality vs the naive multiplicity counter.
    for case in 0..1000 {
        let cells: [u8; CELLS] = match case % 3 {
            0 => {
                let mut c = [0u8; CELLS];
                for v in c.iter_mut() {
                    *v = rng.gen_range(0..=9);
                }
                c
            }
            1 => {
                let solved = testkit::random_solved_board(&mut rng);
                let flips = rng.gen_range(0..20);
                testkit::corrupt_board(&mut rng, &solved, flips)
            }
            _ => {
                let solved = testkit::random_solved_board(&mut rng);
                let flips = rng.gen_range(0..10);
                let messy = testkit::corrupt_board(&mut rng, &solved, flips);
                let blanks = rng.gen_range(0..40);
                testkit::blank_cells(&mut rng, &messy, blanks)
            }
        };
        let want = testkit::violation_count(&cells);
        let got = check_legality(&Board::from_cells(cells).unwrap());
        if got.violations != want || got.legal != (want == 0) {
            ok = false;
            detail = format!("legality counter: got {}, want {want}", got.violations);
            break;
        }
    }

    // Commit-time conflict counting vs before/after snapshots of the
    // same counter.
    for _ in 0..1000 {
        if !ok {
            break;
        }
        let solved = testkit::random_solved_board(&mut rng);
        let n_blanks = rng.gen_range(10..=60);
        let puzzle = testkit::blank_cells(&mut rng, &solved, n_blanks);
        let mut blanks: Vec<usize> = (0..CELLS).filter(|&i| puzzle[i] == 0).collect();
        blanks.shuffle(&mut rng);

        let mut trace: Vec<StepTrace> = Vec::new();
        let mut board = puzzle;
        let mut want = 0usize;
        let mut rest = blanks.as_slice();
        while !rest.is_empty() {
            let take = rng.gen_range(1..=rest.len().min(4));
            let (chunk, tail) = rest.split_at(take);
            rest = tail;
            let mut committed: Vec<(usize, u8)> = chunk
                .iter()
                .map(|&i| {
                    let roll: f64 = rng.gen();
                    let v = if roll < 0.6 {
                        solved[i]
                    } else if roll < 0.85 {
                        rng.gen_range(1..=9)
                    } else {
                        0
                    };
                    (i, v)
                })
                .collect();
            committed.sort_unstable_by_key(|&(i, _)| i);

            let before = testkit::violation_count(&board);
            for &(i, v) in &committed {
                board[i] = v;
            }
            want += testkit::violation_count(&board) - before;

            let selected: BTreeSet<usize> = committed.iter().map(|&(i, _)| i).collect();
            let confidences: BTreeMap<usize, f64> =
                selected.iter().map(|&i| (i, 0.5)).collect();
            trace.push(StepTrace {
                decision: StepDecision { confidences, selected, fallback_used: false },
                committed,
            });
        }
        let got = rollout_violations(&trace, &Board::from_cells(puzzle).unwrap()).unwrap();
        if got != want {
            ok = false;
            detail = format!("conflict counter: got {got}, want {want}");
        }
    }

    // The tagging solver against plain backtracking, with every
    // intermediate board staying legal.
    for _ in 0..100 {
        if !ok {
            break;
        }
        let solved = testkit::random_solved_board(&mut rng);
        let clue_target = rng.gen_range(28..=45);
        let puzzle = testkit::dig_puzzle(&mut rng, &solved, clue_target);
        let (sol, ann) = solve_with_trace(&Board::from_cells(puzzle).unwrap()).unwrap();
        let oracle = testkit::solve(&puzzle).unwrap();
        if sol.cells() != &oracle {
            ok = false;
            detail = "solver disagrees with backtracking".into();
            break;
        }
        for step in &ann.trajectory {
            if check_legality(step).violations != 0 {
                ok = false;
                detail = "illegal intermediate board in solver trace".into();
                break;
            }
        }
    }

    report(6, "sudoku oracles", ok, &detail);
}

#[test]
fn criterion_7_determinism_and_resumption() {
    let mcfg = ModelConfig::tiny();
    let cfg = TrainConfig {
        objective: Objective::Relay,
        k: 2,
        batch_size: 2,
        total_steps: 100,
        warmup_steps: 10,
        log_every: 1,
        val_every: 0,
        val_n: 0,
        seed: 5,
        ..TrainConfig::default()
    };
    let data = quick_records(71, 8, 16);

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let dir_c = tempfile::tempdir().unwrap();
    let a = run_training(&mcfg, &cfg, &data, dir_a.path(), None).unwrap();
    let c = run_training(&mcfg, &cfg, &data, dir_c.path(), None).unwrap();
    let deterministic = fs::read(&a).unwrap() == fs::read(&c).unwrap()
        && fs::read(dir_a.path().join("metrics.csv")).unwrap()
            == fs::read(dir_c.path().join("metrics.csv")).unwrap();

    let half_cfg = TrainConfig { total_steps: 50, ..cfg.clone() };
    let half = run_training(&mcfg, &half_cfg, &data, dir_b.path(), None).unwrap();
    let resumed = run_training(&mcfg, &cfg, &data, dir_b.path(), Some(&half)).unwrap();
    let resumable = fs::read(&a).unwrap() == fs::read(&resumed).unwrap()
        && fs::read(dir_a.path().join("metrics.csv")).unwrap()
            == fs::read(dir_b.path().join("metrics.csv")).unwrap();

    report(
        7,
        "determinism and resumption",
        deterministic && resumable,
        &format!("deterministic {deterministic}, kill-and-resume bit-exact {resumable}"),
    );
}

/// Digs puzzles until `n` of them annotate as basic-only, returning
/// them annotated. High clue counts keep the solver in singles.
fn basic_only_records(rng: &mut ChaCha8Rng, n: usize, clue_target: usize) -> Vec<PuzzleRecord> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let solved = testkit::random_solved_board(rng);
        let puzzle = testkit::dig_puzzle(rng, &solved, clue_target);
        let mut record = record_from(&puzzle, &solved);
        let (sol, ann) = solve_with_trace(&record.puzzle).unwrap();
        if sol == record.solution && is_basic_only(&ann) {
            record.annotation = Some(ann);
            out.push(record);
        }
    }
    out
}

#[test]
fn criterion_8_scaled_training_declaration() {
    // The full trend protocol lives in criterion_8_scaled_training_trend
    // below; here we verify its ingredients work and that the limitation
    // is declared, then report that status honestly instead of a verdict.
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let sample = basic_only_records(&mut rng, 3, 44);
    let filtered_ok = sample
        .iter()
        .all(|r| r.annotation.as_ref().is_some_and(is_basic_only));

    let readme = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md"))
        .unwrap_or_default();
    let declared = readme.to_lowercase().contains("scaled training trend");

    println!(
        "criterion 8 (scaled training trend): DECLARED, not run by default; \
         full protocol: cargo test -p relay-mdm --test acceptance \
         criterion_8_scaled_training_trend -- --ignored (hours of compute)"
    );
    assert!(filtered_ok, "easy-slice filter must hold on its own output");
    assert!(declared, "README must declare the scaled training trend protocol");
}

#[test]
#[ignore = "trains 4 objectives x 3 seeds for 20k steps at batch 128; needs hours of compute"]
fn criterion_8_scaled_training_trend() {
    let mut rng = ChaCha8Rng::seed_from_u64(82);
    let train_n = 20_480;
    let eval_n = 512;
    let mut records = basic_only_records(&mut rng, train_n + eval_n, 44);
    let eval_records: Vec<PuzzleRecord> = records.split_off(train_n);

    let seeds = [1u64, 2, 3];
    let objectives = [
        Objective::Mlm,
        Objective::Rollout,
        Objective::RelaySg,
        Objective::Relay,
    ];
    let mut mean_exact = Vec::new();
    let mut mean_nfe = Vec::new();
    for objective in objectives {
        let mcfg = ModelConfig {
            relay_enabled: objective.uses_relay(),
            tie_embeddings: true,
            ..ModelConfig::default()
        };
        let mut accs = Vec::new();
        let mut nfes = Vec::new();
        for seed in seeds {
            let cfg = TrainConfig {
                objective,
                k: if objective == Objective::Mlm { 1 } else { 2 },
                batch_size: 128,
                total_steps: 20_000,
                val_every: 0,
                val_n: 0,
                seed,
                ..TrainConfig::default()
            };
            let dir = tempfile::tempdir().unwrap();
            let ckpt = run_training(&mcfg, &cfg, &records, dir.path(), None).unwrap();
            let (params, _) = load_model(&ckpt).unwrap();
            let make = || ModelStepper::new(&params);
            let rep = evaluate_set(&make, &eval_records, 0.15, Slice::Unfiltered).unwrap();
            accs.push(rep.exact_match);
            nfes.push(rep.mean_nfe);
        }
        mean_exact.push(accs.iter().sum::<f64>() / accs.len() as f64);
        mean_nfe.push(nfes.iter().sum::<f64>() / nfes.len() as f64);
    }

    // Indices follow `objectives`: mlm, rollout, relay_sg, relay.
    let ordered = mean_exact[3] >= mean_exact[2]
        && mean_exact[2] >= mean_exact[1]
        && mean_exact[1] >= mean_exact[0];
    let nfe_ordered = mean_nfe[3] <= mean_nfe[2];
    let summary: Vec<String> = objectives
        .iter()
        .zip(mean_exact.iter().zip(mean_nfe.iter()))
        .map(|(o, (e, f))| format!("{o}: exact {e:.4}, passes {f:.2}"))
        .collect();
    report(8, "scaled training trend", ordered && nfe_ordered, &summary.join("; "));
}

#[test]
fn criterion_9_frontier_direction() {
    let mcfg = ModelConfig { relay_enabled: false, ..ModelConfig::tiny() };
    let cfg = TrainConfig {
        objective: Objective::Mlm,
        k: 1,
        batch_size: 16,
        total_steps: 5000,
        warmup_steps: 200,
        log_every: 1000,
        val_every: 0,
        val_n: 0,
        seed: 9,
        ..TrainConfig::default()
    };
    // Near-complete boards, trained long enough that confidence spreads
    // the thresholds apart instead of every step hitting the fallback.
    let train_data = quick_records(91, 500, 8);
    let eval_data = quick_records(92, 500, 8);

    let dir = tempfile::tempdir().unwrap();
    let ckpt = run_training(&mcfg, &cfg, &train_data, dir.path(), None).unwrap();
    let (params, _) = load_model(&ckpt).unwrap();
    let make = || ModelStepper::new(&params);
    let table = sweep(
        &make,
        &eval_data,
        &[0.05, 0.10, 0.15, 0.20, 0.25],
        Slice::Unfiltered,
        Objective::Mlm,
        false,
        9,
    )
    .unwrap();

    let nfes: Vec<f64> = table.rows.iter().map(|r| r.report.mean_nfe).collect();
    let ok = table.rows.len() == 5
        && nfes.windows(2).all(|w| w[1] <= w[0] + 1e-9)
        && table.rows.iter().all(|r| r.report.n == 500);
    report(
        9,
        "frontier direction",
        ok,
        &format!("mean passes across thresholds {nfes:?}"),
    );
}
