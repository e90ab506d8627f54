mod common;

use common::*;
use imc_snn::crossbar::{
    dequantize, quantize_weights, weight_level, ArrayGeometry, ConductanceRange, CrossbarArray, CrossbarLayer, Drive,
    ReadConfig,
};
use imc_snn::deployment::{DeviceSettings, HardwareDeployment};
use imc_snn::harness::ExperimentConfig;
use imc_snn::hwmodel::{estimate, EventTally, HardwareConfig, Mode, Phase, Site, Workload};
use imc_snn::learner::{
    dfa_backward, dfa_backward_ordered, init_weights, train_step, AdaptConfig, Checkpoint, DfaErrorTiming,
    ErrorSignal, FeedbackMatrices, LabeledData,
};
use imc_snn::noise_gpr::{synth_neurram_like, GprNoiseModel, SynthParams};
use imc_snn::snn::{forward, lif_step, DenseSynapses, InputBatch, LifParams, NetworkSpec};
use imc_snn::tensor::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch_from(rng: &mut ChaCha8Rng, net: &NetworkSpec, batch: usize) -> InputBatch {
    let n = batch * net.timesteps * net.inputs();
    InputBatch::sequence(batch, net.timesteps, net.inputs(), (0..n).map(|_| rng.random_range(-1.0..2.0)).collect())
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spikes_are_binary_and_reset_to_zero(
        u in prop::collection::vec(-3.0f64..3.0, 1..8),
        leak in 0.0f64..=1.0,
        threshold in 0.1f64..2.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = u.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
        let p = LifParams::new(leak, threshold).unwrap();
        let s = lif_step(&u, &x, &p).unwrap();
        for i in 0..u.len() {
            prop_assert!(s.spikes[i] == 0.0 || s.spikes[i] == 1.0);
            prop_assert_eq!(s.spikes[i] == 1.0, s.potential[i] > threshold);
            if s.spikes[i] == 1.0 {
                prop_assert_eq!(s.next[i], 0.0);
            } else {
                prop_assert_eq!(s.next[i], s.potential[i]);
            }
        }
    }

    #[test]
    fn zero_leak_forgets_the_previous_state(
        u in prop::collection::vec(-3.0f64..3.0, 1..8),
        x0 in -3.0f64..3.0,
    ) {
        let p = LifParams::new(0.0, 1.0).unwrap();
        let x = vec![x0; u.len()];
        let a = lif_step(&u, &x, &p).unwrap();
        let b = lif_step(&vec![0.0; u.len()], &x, &p).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn forward_is_bit_reproducible(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (net, w) = random_net(&mut rng, 3, 5, 4, 1.5);
        let inputs = batch_from(&mut rng, &net, 3);
        let a = forward(&net, &DenseSynapses(&w), &inputs, &mut EventTally::new()).unwrap();
        let b = forward(&net, &DenseSynapses(&w), &inputs, &mut EventTally::new()).unwrap();
        prop_assert_eq!(a.logits_steps, b.logits_steps);
        for (ta, tb) in a.traces.iter().zip(&b.traces) {
            prop_assert_eq!(ta, tb);
        }
    }

    #[test]
    fn quantization_round_trip_within_half_level(
        bits in 1u32..=8,
        vals in prop::collection::vec(-5.0f64..5.0, 1..40),
    ) {
        let range = ConductanceRange::new(1.0, 10.0, bits).unwrap();
        let w = Matrix::from_vec(1, vals.len(), vals.clone()).unwrap();
        let q = quantize_weights(&w, &range).unwrap();
        let back = dequantize(&q, &range);
        let bound = q.scale / (2.0 * (range.levels() - 1) as f64);
        for (a, b) in vals.iter().zip(back.as_slice()) {
            prop_assert!((a - b).abs() <= bound * (1.0 + 1e-12));
            prop_assert!(a * b >= 0.0);
        }
        for g in q.g_pos.as_slice().iter().chain(q.g_neg.as_slice()) {
            prop_assert!(range.is_on_level(*g));
        }
    }

    #[test]
    fn weight_levels_saturate(w in -1e6f64..1e6, scale in 1e-3f64..10.0) {
        let range = ConductanceRange::default();
        prop_assert!(weight_level(w, scale, &range).unsigned_abs() as usize <= range.levels() - 1);
    }

    #[test]
    fn adc_codes_stay_in_range(bits in 1u32..=8, i in -100.0f64..1000.0) {
        let read = ReadConfig { adc_bits: Some(bits), ..ReadConfig::default() };
        let a = CrossbarArray::new(8, 8, ConductanceRange::default(), read).unwrap();
        let code = a.adc_code(i, a.clip_current(8)).unwrap();
        prop_assert!(code <= (1u32 << bits) - 1);
    }

    #[test]
    fn ideal_read_is_monotone_in_spikes_on_positive_weights(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Matrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let layer = CrossbarLayer::deploy(&w, ConductanceRange::default(), ReadConfig::ideal(), ArrayGeometry::default(), false).unwrap();
        let x: Vec<f64> = (0..6).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let site = Site::layer(Phase::Forward, 0);
        let base = layer.dot_product(Drive::Spikes(&x), &mut EventTally::new(), site).unwrap();
        let ideal = layer.ideal_weights();
        for r in 0..6 {
            if x[r] == 1.0 {
                continue;
            }
            let mut y = x.clone();
            y[r] = 1.0;
            let out = layer.dot_product(Drive::Spikes(&y), &mut EventTally::new(), site).unwrap();
            for c in 0..3 {
                if ideal.get(r, c) > 0.0 {
                    prop_assert!(out[c] >= base[c] - 1e-12);
                }
            }
        }
    }

    #[test]
    fn bit_serial_transposed_read_within_stream_bound(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Matrix::from_fn(8, 4, |_, _| rng.random_range(-1.0..1.0));
        let e: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let layer = CrossbarLayer::deploy(&w, ConductanceRange::default(), ReadConfig::ideal(), ArrayGeometry::default(), true).unwrap();
        let got = layer.transposed_dot_product(&e, 8, &mut EventTally::new(), Site::layer(Phase::Backward, 0)).unwrap();
        let wq = layer.ideal_weights();
        let want = wq.matvec(&e).unwrap();
        let emax = e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for r in 0..8 {
            let row_sum: f64 = wq.row(r).iter().map(|v| v.abs()).sum();
            prop_assert!((got[r] - want[r]).abs() <= emax / 256.0 * row_sum + 1e-12);
        }
    }

    #[test]
    fn dfa_ignores_layer_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (net, w) = random_net(&mut rng, 4, 5, 3, 1.5);
        let fb = FeedbackMatrices::random(&net, seed);
        let inputs = batch_from(&mut rng, &net, 2);
        let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..net.classes())).collect();
        let syn = DenseSynapses(&w);
        let fwd = forward(&net, &syn, &inputs, &mut EventTally::new()).unwrap();
        let err = ErrorSignal::new(DfaErrorTiming::PerBatch, &fwd, &labels).unwrap();
        let a = dfa_backward(&net, &inputs, &fwd, &err, &fb, &syn, &mut EventTally::new()).unwrap();
        let mut order: Vec<usize> = (0..net.hidden_layers()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let b = dfa_backward_ordered(&net, &inputs, &fwd, &err, &fb, &syn, &order, &mut EventTally::new()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn checkpoints_round_trip_exactly(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (net, w) = random_net(&mut rng, 3, 6, 4, 10.0);
        let ck = Checkpoint::new(net, w, Some(rng.random_range(0.0..100.0))).unwrap();
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        prop_assert_eq!(ck, back);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn posterior_variance_is_nonnegative(seed in any::<u64>()) {
        let data = synth_neurram_like(300, &SynthParams::default(), seed).unwrap();
        let model = GprNoiseModel::fit(&data, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..1000 {
            let p = model.predict(rng.random_range(0.0..12.0)).unwrap();
            prop_assert!(p.variance >= 0.0 && p.noise_var > 0.0);
        }
    }

    #[test]
    fn likelihood_never_decreases_during_fit(seed in any::<u64>()) {
        let data = synth_neurram_like(200, &SynthParams::default(), seed).unwrap();
        let (_, trace) = GprNoiseModel::fit_traced(&data, 25).unwrap();
        for pair in trace.lml.windows(2) {
            prop_assert!(pair[1] >= pair[0] - 1e-9 * pair[0].abs());
        }
    }
}

fn small_tally(mode: Mode) -> (EventTally, HardwareDeployment) {
    let net = NetworkSpec::from_architecture("6-32-16-6", 4, LifParams::default()).unwrap();
    let w = init_weights(&net, 2.0, 3);
    let fb = FeedbackMatrices::random(&net, 3);
    let hw = HardwareConfig::default();
    let mut dep = HardwareDeployment::new(&net, &w, Some(&fb), mode, &hw, &DeviceSettings::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = batch_from(&mut rng, &net, 8);
    let batch = LabeledData::new(inputs, (0..8).map(|i| i % 6).collect()).unwrap();
    let mut tally = EventTally::new();
    let cfg = AdaptConfig { mode, ..Default::default() };
    let mut ww = w.clone();
    train_step(&mut dep, &mut ww, &batch, &cfg, &mut rng, &mut tally).unwrap();
    (tally, dep)
}

fn work(batches: usize) -> Workload {
    Workload {
        architecture: "6-32-16-6".into(),
        timesteps: 4,
        batch_size: 8,
        batches_per_epoch: batches,
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn doubling_batches_doubles_energy_and_latency() {
    for mode in [Mode::Bp, Mode::Dfa] {
        let (tally, dep) = small_tally(mode);
        let hw = dep.hardware();
        let one = estimate(&tally, dep.plan(), hw, work(1)).unwrap();
        let two = estimate(&tally.scaled(2), dep.plan(), hw, work(2)).unwrap();
        assert!(close(two.energy.on_chip(), 2.0 * one.energy.on_chip()), "{mode}");
        assert_eq!(two.energy.dram, one.energy.dram);
        assert!(close(two.latency_ms(), 2.0 * one.latency_ms()), "{mode}");
        assert_eq!(two.area, one.area);
    }
}

#[test]
fn scaling_energy_coefficients_scales_energy_entries() {
    for mode in [Mode::Bp, Mode::Dfa] {
        let (tally, dep) = small_tally(mode);
        let hw = dep.hardware().clone();
        let scaled = HardwareConfig {
            coefficients: hw.coefficients.with_energy_scaled(3.5),
            ..hw.clone()
        };
        let a = estimate(&tally, dep.plan(), &hw, work(1)).unwrap();
        let b = estimate(&tally, dep.plan(), &scaled, work(1)).unwrap();
        for (x, y) in a.energy.values()[..5].iter().zip(&b.energy.values()[..5]) {
            assert!(close(3.5 * x, *y));
        }
        assert_eq!(a.energy.dram, b.energy.dram);
        assert_eq!(a.latency, b.latency);
    }
}

#[test]
fn breakdowns_sum_to_totals() {
    for mode in [Mode::Bp, Mode::Dfa] {
        let (tally, dep) = small_tally(mode);
        let r = estimate(&tally, dep.plan(), dep.hardware(), work(7)).unwrap();
        assert!(close(r.energy.values().iter().sum(), r.energy_mj()));
        assert!(close(r.latency.values().iter().sum(), r.latency_ms()));
        assert!(close(r.area.values().iter().sum(), r.area_mm2()));
    }
}

#[test]
fn dfa_backward_is_faster_than_bp_backward() {
    let (bp, dep_bp) = small_tally(Mode::Bp);
    let (dfa, dep_dfa) = small_tally(Mode::Dfa);
    let a = estimate(&bp, dep_bp.plan(), dep_bp.hardware(), work(1)).unwrap();
    let b = estimate(&dfa, dep_dfa.plan(), dep_dfa.hardware(), work(1)).unwrap();
    assert!(b.latency.backward < a.latency.backward);
    assert!(b.area_mm2() < a.area_mm2());
}

#[test]
fn experiment_config_round_trips_through_toml() {
    let cfg = ExperimentConfig::default();
    let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(cfg, back);
}
