use dmtrack_core::gradcheck::{self, GradCheckOptions};
use dmtrack_core::motion_gate::{fuse, MotionGate, SIGMA_EPS};
use dmtrack_core::rng::SplitMix64;
use dmtrack_core::{ParamStore, Tape, Tensor};
use proptest::prelude::*;

fn gate(seed: u64) -> (ParamStore, MotionGate) {
    let mut store = ParamStore::new();
    let g = MotionGate::new(&mut store, &mut SplitMix64::new(seed));
    (store, g)
}

fn vec8(rng: &mut SplitMix64, scale: f64) -> [f64; 8] {
    std::array::from_fn(|_| rng.normal() * scale)
}

#[test]
fn gradients_wrt_weights_and_inputs() {
    for seed in 0..5 {
        let (mut store, g) = gate(seed);
        // the three inputs live in the store too, so they are checked alongside the weights
        let mut rng = SplitMix64::new(seed + 10);
        let kal = store.add("in.x_kal", Tensor::new(&[2, 8], (0..16).map(|_| rng.normal()).collect()).unwrap());
        let sig = store.add("in.sigma_kal", Tensor::new(&[2, 8], (0..16).map(|_| rng.uniform_range(0.1, 2.0)).collect()).unwrap());
        let mam = store.add("in.x_mam", Tensor::new(&[2, 8], (0..16).map(|_| rng.normal()).collect()).unwrap());
        let w: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let report = gradcheck::check(
            &mut store,
            |s, t| {
                let (k, sg, m) = (t.param(s, kal), t.param(s, sig), t.param(s, mam));
                let (alpha, sigma) = g.forward_parts(t, s, k, sg, m)?;
                let wv = t.constant(&[2, 8], w.clone())?;
                let a = t.mul(alpha, wv)?;
                let b = t.square(sigma)?;
                let l = t.add(a, b)?;
                Ok(t.sum(l))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passes(1e-4), "seed {seed}: {report:?}");
    }
}

#[test]
fn not_symmetric_in_kalman_and_learned_inputs() {
    let (store, g) = gate(3);
    let mut rng = SplitMix64::new(77);
    for _ in 0..20 {
        let (k, m) = (vec8(&mut rng, 3.0), vec8(&mut rng, 3.0));
        let (sk, sm) = (vec8(&mut rng, 1.0).map(f64::abs), vec8(&mut rng, 1.0).map(f64::abs));
        let (a1, _) = g.gate(&store, &k, &sk, &m).unwrap();
        let (a2, _) = g.gate(&store, &m, &sm, &k).unwrap();
        assert_ne!(a1, a2);
        // symmetric blending would need alpha' = 1 - alpha
        assert!(a1.iter().zip(&a2).any(|(x, y)| (x + y - 1.0).abs() > 1e-6));
    }
}

#[test]
fn gate_is_pure() {
    let (store, g) = gate(9);
    let mut rng = SplitMix64::new(1);
    let (k, s, m) = (vec8(&mut rng, 1.0), vec8(&mut rng, 1.0).map(f64::abs), vec8(&mut rng, 1.0));
    assert_eq!(g.gate(&store, &k, &s, &m).unwrap(), g.gate(&store, &k, &s, &m).unwrap());
}

#[test]
fn batched_forward_matches_single_rows() {
    let (store, g) = gate(4);
    let mut rng = SplitMix64::new(5);
    let rows: Vec<[f64; 24]> = (0..3).map(|_| std::array::from_fn(|_| rng.normal())).collect();
    let mut tape = Tape::inference();
    let input = tape.constant(&[3, 24], rows.iter().flatten().copied().collect()).unwrap();
    let (a, s) = g.forward(&mut tape, &store, input).unwrap();
    for (r, row) in rows.iter().enumerate() {
        let k: [f64; 8] = row[..8].try_into().unwrap();
        let sg: [f64; 8] = row[8..16].try_into().unwrap();
        let m: [f64; 8] = row[16..].try_into().unwrap();
        let (a1, s1) = g.gate(&store, &k, &sg, &m).unwrap();
        assert_eq!(&tape.value(a)[r * 8..(r + 1) * 8], &a1);
        assert_eq!(&tape.value(s)[r * 8..(r + 1) * 8], &s1);
    }
}

#[test]
fn betweenness_over_1000_random_inputs() {
    let (store, g) = gate(1);
    let mut rng = SplitMix64::new(1000);
    for _ in 0..1000 {
        let (k, m) = (vec8(&mut rng, 50.0), vec8(&mut rng, 50.0));
        let sk = vec8(&mut rng, 5.0).map(f64::abs);
        let (alpha, sm) = g.gate(&store, &k, &sk, &m).unwrap();
        let f = fuse(&k, &sk, &m, &alpha, &sm);
        for i in 0..8 {
            assert!(alpha[i] > 0.0 && alpha[i] < 1.0);
            assert!(sm[i] >= SIGMA_EPS);
            assert!(f.x_fuse[i] >= k[i].min(m[i]) && f.x_fuse[i] <= k[i].max(m[i]));
            assert!(f.sigma_fuse[i] >= sk[i].min(sm[i]) && f.sigma_fuse[i] <= sk[i].max(sm[i]));
        }
    }
}

proptest! {
    #[test]
    fn fuse_is_convex(
        k in prop::array::uniform8(-1e3f64..1e3),
        m in prop::array::uniform8(-1e3f64..1e3),
        a in prop::array::uniform8(0.0f64..=1.0),
        sk in prop::array::uniform8(0.0f64..10.0),
        sm in prop::array::uniform8(1e-6f64..10.0),
    ) {
        let f = fuse(&k, &sk, &m, &a, &sm);
        for i in 0..8 {
            prop_assert!(f.x_fuse[i] >= k[i].min(m[i]) && f.x_fuse[i] <= k[i].max(m[i]));
            prop_assert!(f.sigma_fuse[i] >= sk[i].min(sm[i]) && f.sigma_fuse[i] <= sk[i].max(sm[i]));
        }
    }

    #[test]
    fn alpha_and_sigma_ranges(seed in 0u64..50, scale in 0.0f64..1e4) {
        let (store, g) = gate(seed);
        let mut rng = SplitMix64::new(seed);
        let (alpha, sigma) = g.gate(&store, &vec8(&mut rng, scale), &vec8(&mut rng, scale).map(f64::abs), &vec8(&mut rng, scale)).unwrap();
        for i in 0..8 {
            prop_assert!((0.0..=1.0).contains(&alpha[i]));
            prop_assert!(sigma[i] >= SIGMA_EPS && sigma[i].is_finite());
        }
    }
}
