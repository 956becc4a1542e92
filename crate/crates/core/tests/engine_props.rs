mod common;

use common::small_config;
use luffy_sim::condense::ThresholdMode;
use luffy_sim::engine::{compare, run, simulate_iteration, BatchSource, Simulator, Strategy};
use luffy_sim::report::{csv_rows, read_csv_from, summarize, to_csv};
use luffy_sim::trace::{read_trace, write_trace};
use luffy_sim::workload::gen_batch;
use luffy_sim::{Exec, IterationReport, SimConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn batch_for(c: &SimConfig) -> luffy_sim::BatchState {
    gen_batch(&c.model, &c.cluster, &c.workload).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn copies_are_conserved(seed in any::<u64>(), alpha in 0.05f64..5.0, devices in 1usize..6) {
        let mut c = small_config();
        c.workload.seed = seed;
        c.workload.bias_concentration = alpha;
        c.cluster.num_devices = devices;
        let batch = batch_for(&c);
        for s in Strategy::ALL {
            let r = simulate_iteration(&batch, s, &c, 0).unwrap();
            for b in &r.blocks {
                prop_assert_eq!(b.gate_copies, batch.total_copies() as u64);
                prop_assert_eq!(b.dispatched_copies + b.condensed_copies, b.gate_copies);
                prop_assert_eq!(b.combined_copies, b.dispatched_copies);
                if !s.condenses() {
                    prop_assert_eq!(b.condensed_copies, 0);
                    prop_assert_eq!(b.cosine_evals, 0);
                }
                if !s.migrates() {
                    prop_assert_eq!(b.migrated_sequences, 0);
                }
            }
        }
    }

    #[test]
    fn condensation_never_slows_experts(seed in any::<u64>()) {
        let mut c = small_config();
        c.workload.seed = seed;
        let batch = batch_for(&c);
        let v = simulate_iteration(&batch, Strategy::Vanilla, &c, 0).unwrap();
        for s in [Strategy::Luffy, Strategy::LuffyCondense] {
            let r = simulate_iteration(&batch, s, &c, 0).unwrap();
            for (x, y) in r.blocks.iter().zip(&v.blocks) {
                prop_assert!(x.expert_ms <= y.expert_ms);
                prop_assert!(x.dispatch_bytes <= y.dispatch_bytes);
            }
        }
    }

    #[test]
    fn trace_round_trip_is_exact(seed in any::<u64>()) {
        let mut c = small_config();
        c.workload.seed = seed;
        let batch = batch_for(&c);
        let mut buf = Vec::new();
        write_trace(&batch, &mut buf).unwrap();
        let back = read_trace(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &batch);
        let a = simulate_iteration(&batch, Strategy::Luffy, &c, 0).unwrap();
        let b = simulate_iteration(&back, Strategy::Luffy, &c, 0).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn single_device_moves_nothing() {
    let mut c = small_config();
    c.cluster.num_devices = 1;
    let out = compare(
        &c,
        &Strategy::ALL,
        2,
        &BatchSource::Generated,
        Exec::Sequential,
    )
    .unwrap();
    for o in out {
        for r in &o.reports {
            assert_eq!(r.totals.total_bytes(), 0, "{}", o.summary.strategy);
            assert_eq!(r.totals.comm_ms, 0.0);
        }
    }
}

#[test]
fn disabled_luffy_is_vanilla_bit_for_bit() {
    let mut c = small_config();
    c.condense.threshold_mode = ThresholdMode::Off;
    c.migration.q = 0;
    let source = BatchSource::Generated;
    let v = run(&c, Strategy::Vanilla, 3, &source, Exec::Sequential).unwrap();
    let l = run(&c, Strategy::Luffy, 3, &source, Exec::Sequential).unwrap();
    for (a, b) in v.reports.iter().zip(&l.reports) {
        assert_eq!(a.blocks, b.blocks);
    }
    assert_eq!(
        to_csv(&v.reports).unwrap(),
        to_csv(&l.reports).unwrap().replace("luffy", "vanilla")
    );
}

#[test]
fn unit_fixed_threshold_moves_like_vanilla() {
    // fixed:1.0 only merges identical tokens; with S1 = 1 no shortcut fires
    let mut c = small_config();
    c.condense.threshold_mode = ThresholdMode::Fixed(1.0);
    c.condense.s1 = 1.0;
    c.migration.q = 0;
    let batch = batch_for(&c);
    let v = simulate_iteration(&batch, Strategy::Vanilla, &c, 0).unwrap();
    let l = simulate_iteration(&batch, Strategy::Luffy, &c, 0).unwrap();
    for (a, b) in v.blocks.iter().zip(&l.blocks) {
        assert_eq!(
            (
                a.dispatch_bytes,
                a.combine_bytes,
                a.expert_ms,
                a.comm_ms,
                a.condensed_copies
            ),
            (
                b.dispatch_bytes,
                b.combine_bytes,
                b.expert_ms,
                b.comm_ms,
                b.condensed_copies
            )
        );
        assert!(b.cosine_evals > 0);
    }
}

#[test]
fn transfers_trade_compute_for_comm() {
    let mut c = small_config();
    c.model.d_model = 32;
    c.model.d_hidden = 16;
    c.workload.bias_concentration = 0.1;
    c.workload.batch_size = 24;
    let batch = batch_for(&c);
    let v = simulate_iteration(&batch, Strategy::Vanilla, &c, 0).unwrap();
    let e = simulate_iteration(&batch, Strategy::Ext, &c, 0).unwrap();
    assert!(e.totals.expert_transfer_bytes > 0);
    assert!(e.totals.dispatch_bytes < v.totals.dispatch_bytes);
    assert!(e.totals.total_bytes() < v.totals.total_bytes());
    assert_eq!(e.totals.attention_ms, v.totals.attention_ms);
}

#[test]
fn huge_kappa_puts_threshold_at_floor() {
    let mut c = small_config();
    c.loss.kappa = 1e9;
    let out = run(
        &c,
        Strategy::Luffy,
        3,
        &BatchSource::Generated,
        Exec::Sequential,
    )
    .unwrap();
    let floor = 1.0 / (1.0 + ((c.loss.l_ini - c.loss.l_final) / c.loss.l_ini).exp());
    assert_eq!(
        out.summary.thresholds,
        vec![Some(0.5), Some(floor), Some(floor)]
    );
}

#[test]
fn thresholds_follow_a_falling_loss_trace() {
    let mut c = small_config();
    c.loss.trace = Some(vec![9.0, 7.0, 7.0, 3.0]);
    let out = run(
        &c,
        Strategy::LuffyCondense,
        5,
        &BatchSource::Generated,
        Exec::Sequential,
    )
    .unwrap();
    let h: Vec<f64> = out.summary.thresholds.iter().map(|t| t.unwrap()).collect();
    assert!(h.windows(2).all(|w| w[1] <= w[0]), "{h:?}");
    assert!(h[1] < h[0] && h[3] == h[2]);
}

#[test]
fn runs_repeat_exactly_across_exec_modes() {
    let c = small_config();
    let strategies = [Strategy::Vanilla, Strategy::Hyt, Strategy::Luffy];
    let a = compare(&c, &strategies, 2, &BatchSource::Generated, Exec::Parallel).unwrap();
    let b = compare(
        &c,
        &strategies,
        2,
        &BatchSource::Generated,
        Exec::Sequential,
    )
    .unwrap();
    assert_eq!(a, b);
    let seeds: Vec<_> = a.iter().map(|o| o.summary.seeds.clone()).collect();
    assert!(seeds.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn simulator_rejects_bad_config_and_batch() {
    let mut c = small_config();
    c.model.top_k = 9;
    assert!(Simulator::new(&c, Exec::Sequential)
        .unwrap_err()
        .is_config_error());

    let c = small_config();
    let mut batch = batch_for(&c);
    batch.tokens[0].gates.pop();
    assert!(simulate_iteration(&batch, Strategy::Vanilla, &c, 0).is_err());
}

fn all_reports(c: &SimConfig) -> Vec<IterationReport> {
    compare(
        c,
        &Strategy::ALL,
        2,
        &BatchSource::Generated,
        Exec::Sequential,
    )
    .unwrap()
    .into_iter()
    .flat_map(|o| o.reports)
    .collect()
}

#[test]
fn csv_totals_are_block_sums() {
    let reports = all_reports(&small_config());
    let rows = read_csv_from(to_csv(&reports).unwrap().as_bytes()).unwrap();
    assert_eq!(rows, csv_rows(&reports));
    for r in &reports {
        let mine: Vec<_> = rows
            .iter()
            .filter(|x| x.iteration == r.iteration && x.strategy == r.strategy)
            .collect();
        let (total, blocks): (Vec<_>, Vec<_>) = mine.into_iter().partition(|x| x.is_total());
        let t = total[0];
        assert_eq!(blocks.len(), r.blocks.len());
        let sum_u = |f: fn(&&luffy_sim::report::CsvRow) -> u64| blocks.iter().map(f).sum::<u64>();
        let sum_f = |f: fn(&&luffy_sim::report::CsvRow) -> f64| blocks.iter().map(f).sum::<f64>();
        assert_eq!(t.dispatch_bytes, sum_u(|x| x.dispatch_bytes));
        assert_eq!(t.combine_bytes, sum_u(|x| x.combine_bytes));
        assert_eq!(t.expert_transfer_bytes, sum_u(|x| x.expert_transfer_bytes));
        assert_eq!(t.condensed_copies, sum_u(|x| x.condensed_copies));
        assert_eq!(t.migrated_sequences, sum_u(|x| x.migrated_sequences));
        assert_eq!(t.cosine_evals, sum_u(|x| x.cosine_evals));
        // same summation order as the engine, so exact
        assert_eq!(t.attention_ms, sum_f(|x| x.attention_ms));
        assert_eq!(t.expert_ms, sum_f(|x| x.expert_ms));
        assert_eq!(t.comm_ms, sum_f(|x| x.comm_ms));
    }
}

#[test]
fn summary_ignores_report_order() {
    let mut reports = all_reports(&small_config());
    let base = summarize(&reports).unwrap();
    assert_eq!(base.rows[0].strategy, Strategy::Vanilla);
    assert_eq!(base.rows.len(), 6);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        reports.shuffle(&mut rng);
        assert_eq!(summarize(&reports).unwrap(), base);
    }
}
