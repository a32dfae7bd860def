use dmtrack_core::deform_mamba::{
    discretize, selective_scan, DeformMamba, DeformMambaConfig, MambaBlock, MambaDims, TrajectoryWindow,
};
use dmtrack_core::gradcheck::{self, GradCheckOptions};
use dmtrack_core::kalman::MotionState;
use dmtrack_core::rng::SplitMix64;
use dmtrack_core::{ParamStore, Tape};
use proptest::prelude::*;

fn random_window(rng: &mut SplitMix64, valid: usize) -> TrajectoryWindow<f64> {
    let mut x = rng.uniform_range(100.0, 1000.0);
    let mut y = rng.uniform_range(100.0, 600.0);
    let (vx, vy) = (rng.normal() * 4.0, rng.normal() * 4.0);
    let h = rng.uniform_range(20.0, 80.0);
    let a = rng.uniform_range(0.4, 1.5);
    let hist: Vec<_> = (0..valid)
        .map(|_| {
            x += vx + rng.normal();
            y += vy + rng.normal();
            MotionState([x, y, a, h, vx, vy, 0.0, 0.0])
        })
        .collect();
    TrajectoryWindow::from_history(&hist, 8).unwrap()
}

fn model(seed: u64) -> (ParamStore, DeformMamba) {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let m = DeformMamba::new(&mut store, DeformMambaConfig::default(), &mut rng);
    (store, m)
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for seed in 0..3 {
        let (mut store, m) = model(seed);
        let mut rng = SplitMix64::new(100 + seed);
        let windows = vec![random_window(&mut rng, 8), random_window(&mut rng, 3)];
        let report = gradcheck::check(
            &mut store,
            |s, t| {
                let out = m.forward(t, s, &windows)?;
                let sq = t.square(out.head)?;
                Ok(t.sum(sq))
            },
            GradCheckOptions {
                per_param: Some(3),
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passes(1e-4), "seed {seed}: {report:?}");
    }
}

#[test]
fn offset_gradients_flow_into_the_window() {
    let (store, m) = model(5);
    let mut rng = SplitMix64::new(9);
    let w = random_window(&mut rng, 8);
    let mut tape = Tape::new();
    let (flat, norms) = m.window_input(&mut tape, std::slice::from_ref(&w)).unwrap();
    let data = tape.value(flat).to_vec();
    let flat = tape.variable(&[1, 64], data.clone()).unwrap();
    let out = m.forward_input(&mut tape, &store, flat, norms.clone()).unwrap();
    let sq = tape.square(out.head).unwrap();
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    let analytic = g.wrt(flat).unwrap().to_vec();

    let eval = |d: &[f64]| {
        let mut t = Tape::inference();
        let f = t.constant(&[1, 64], d.to_vec()).unwrap();
        let o = m.forward_input(&mut t, &store, f, norms.clone()).unwrap();
        t.value(o.head).iter().map(|v| v * v).sum::<f64>()
    };
    let h = 1e-5;
    for i in [0, 9, 17, 30, 44, 63] {
        let mut up = data.clone();
        up[i] += h;
        let mut dn = data.clone();
        dn[i] -= h;
        let num = (eval(&up) - eval(&dn)) / (2.0 * h);
        let rel = gradcheck::rel_error(analytic[i], num);
        assert!(rel <= 1e-4, "coord {i}: {} vs {num}", analytic[i]);
    }
}

#[test]
fn single_token_scan_matches_one_step_oracle() {
    let mut tape = Tape::new();
    let (di, n) = (2, 3);
    let u = vec![0.7, -1.2];
    let delta = vec![0.05, 0.3];
    let a = vec![-1.0, -2.0, -3.0, -0.5, -4.0, -1.5];
    let b = vec![0.2, -0.4, 1.1];
    let c = vec![1.0, 0.5, -0.3];
    let d = vec![0.9, 1.1];
    let vu = tape.constant(&[1, di], u.clone()).unwrap();
    let vdt = tape.constant(&[1, di], delta.clone()).unwrap();
    let va = tape.constant(&[di, n], a.clone()).unwrap();
    let vb = tape.constant(&[1, n], b.clone()).unwrap();
    let vc = tape.constant(&[1, n], c.clone()).unwrap();
    let vd = tape.constant(&[di], d.clone()).unwrap();
    let y = selective_scan(&mut tape, vu, vdt, va, vb, vc, vd, 1).unwrap();
    for i in 0..di {
        let (_, bbar) = discretize(&a[i * n..(i + 1) * n], &b, delta[i]).unwrap();
        let expect: f64 = (0..n).map(|k| c[k] * bbar[k] * u[i]).sum::<f64>() + d[i] * u[i];
        assert!((tape.value(y)[i] - expect).abs() < 1e-14);
    }
}

#[test]
fn zero_dynamics_scan_is_a_cumulative_sum() {
    // A = 0 gives A_bar = 1, B_bar = delta * B: h_t = sum_{s<=t} delta_s B_s u_s
    let l = 5;
    let mut rng = SplitMix64::new(11);
    let u: Vec<f64> = (0..l).map(|_| rng.normal()).collect();
    let dt: Vec<f64> = (0..l).map(|_| rng.uniform_range(0.01, 0.5)).collect();
    let b: Vec<f64> = (0..l).map(|_| rng.normal()).collect();
    let mut tape = Tape::new();
    let vu = tape.constant(&[l, 1], u.clone()).unwrap();
    let vdt = tape.constant(&[l, 1], dt.clone()).unwrap();
    let va = tape.constant(&[1, 1], vec![0.0]).unwrap();
    let vb = tape.constant(&[l, 1], b.clone()).unwrap();
    let vc = tape.constant(&[l, 1], vec![2.0; l]).unwrap();
    let vd = tape.constant(&[1], vec![0.0]).unwrap();
    let y = selective_scan(&mut tape, vu, vdt, va, vb, vc, vd, l).unwrap();
    let mut acc = 0.0;
    for t in 0..l {
        acc += dt[t] * b[t] * u[t];
        assert!((tape.value(y)[t] - 2.0 * acc).abs() < 1e-13);
    }
}

fn block(seed: u64) -> (ParamStore, MambaBlock) {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let dims = MambaDims {
        d_model: 8,
        d_inner: 16,
        d_state: 4,
        dt_rank: 2,
    };
    let b = MambaBlock::new(&mut store, "b", dims, &mut rng);
    (store, b)
}

#[test]
fn zero_tokens_pass_through_unchanged() {
    let (store, b) = block(1);
    let mut tape = Tape::new();
    let x = tape.constant(&[4, 8], vec![0.0; 32]).unwrap();
    let y = b.forward(&mut tape, &store, x, 4, 0).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn scan_is_order_sensitive() {
    let (store, b) = block(2);
    let mut rng = SplitMix64::new(4);
    let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..8).map(|_| rng.normal()).collect()).collect();
    let run = |order: &[usize]| {
        let mut tape = Tape::new();
        let data: Vec<f64> = order.iter().flat_map(|&i| rows[i].clone()).collect();
        let x = tape.constant(&[4, 8], data).unwrap();
        let y = b.forward(&mut tape, &store, x, 4, 0).unwrap();
        tape.value(y)[24..].to_vec()
    };
    assert_ne!(run(&[0, 1, 2, 3]), run(&[3, 2, 1, 0]));
}

#[test]
fn block_gradients_match_finite_differences() {
    for seed in 0..5 {
        let (mut store, b) = block(seed);
        let mut rng = SplitMix64::new(seed + 40);
        let data: Vec<f64> = (0..2 * 4 * 8).map(|_| rng.normal()).collect();
        let report = gradcheck::check(
            &mut store,
            |s, t| {
                let x = t.constant(&[8, 8], data.clone())?;
                let y = b.forward(t, s, x, 4, 0)?;
                let sq = t.square(y)?;
                Ok(t.sum(sq))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passes(1e-4), "seed {seed}: {report:?}");
    }
}

proptest! {
    #[test]
    fn offsets_stay_in_window(seed in 0u64..1000, valid in 1usize..=8) {
        let (store, m) = model(seed % 7);
        let mut rng = SplitMix64::new(seed);
        let w = random_window(&mut rng, valid);
        let mut tape = Tape::inference();
        let out = m.forward(&mut tape, &store, &[w]).unwrap();
        prop_assert!(tape.value(out.offsets).iter().all(|&o| (0.0..=7.0).contains(&o)));
        prop_assert!(tape.value(out.x_mam).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bilinear_transition_is_stable(a in -50.0f64..-1e-6, dt in 1e-4f64..1.0) {
        let (abar, _) = discretize(&[a], &[1.0], dt).unwrap();
        prop_assert!(abar[0].abs() < 1.0);
    }
}
