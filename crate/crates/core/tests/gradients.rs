mod common;

use headsteer::lora::LoraAdapter;
use headsteer::numkit::{Mat, RngStream};
use headsteer::policy::ActionHeadKind;

#[test]
fn regression_gradients_match_finite_differences() {
    for seed in 0..5 {
        let (err, name) = common::gradient_check(ActionHeadKind::Regression, seed);
        assert!(err < 1e-4, "seed {seed}: {name} rel err {err:e}");
    }
}

#[test]
fn flow_matching_gradients_match_finite_differences() {
    for seed in 0..5 {
        let (err, name) = common::gradient_check(ActionHeadKind::FlowMatching, seed);
        assert!(err < 1e-4, "seed {seed}: {name} rel err {err:e}");
    }
}

#[test]
fn adapter_chain_rule_matches_finite_differences() {
    let mut rng = RngStream::new(3, 3);
    let mut ad = LoraAdapter::new("w", 5, 7, 2, 3.0, &mut rng).unwrap();
    ad.b = Mat::randn(5, 2, 0.5, &mut rng);
    let c = Mat::randn(5, 7, 1.0, &mut rng);
    // L(A, B) = Σ C ⊙ (s B A), so dL/dW_eff = C
    let loss = |a: &[f64], b: &[f64]| {
        let s = ad.scale() as f64;
        let mut total = 0.0;
        for i in 0..5 {
            for j in 0..7 {
                let ba: f64 = (0..2).map(|k| b[i * 2 + k] * a[k * 7 + j]).sum();
                total += c.get(i, j) as f64 * s * ba;
            }
        }
        total
    };
    let a0: Vec<f64> = ad.a.data().iter().map(|&x| x as f64).collect();
    let b0: Vec<f64> = ad.b.data().iter().map(|&x| x as f64).collect();
    let (da, db) = ad.grads(&c);
    let h = 1e-6;
    for i in 0..a0.len() {
        let (mut hi, mut lo) = (a0.clone(), a0.clone());
        hi[i] += h;
        lo[i] -= h;
        let fd = (loss(&hi, &b0) - loss(&lo, &b0)) / (2.0 * h);
        assert!((fd - da.data()[i] as f64).abs() < 1e-4 * (1.0 + fd.abs()));
    }
    for i in 0..b0.len() {
        let (mut hi, mut lo) = (b0.clone(), b0.clone());
        hi[i] += h;
        lo[i] -= h;
        let fd = (loss(&a0, &hi) - loss(&a0, &lo)) / (2.0 * h);
        assert!((fd - db.data()[i] as f64).abs() < 1e-4 * (1.0 + fd.abs()));
    }
}
