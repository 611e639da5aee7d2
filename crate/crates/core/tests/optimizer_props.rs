use fewshot_core::{Adafactor, Schedule, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn schedule_is_continuous_and_bounded(warmup in 1usize..200, extra in 1usize..2000) {
        let s = Schedule { peak_lr: 3e-3, warmup_steps: warmup, total_steps: warmup + extra };
        let max_jump = s.peak_lr / warmup.min(extra) as f64 + 1e-15;
        let mut prev = s.lr(0);
        for step in 1..=s.total_steps + 1 {
            let lr = s.lr(step);
            prop_assert!((0.0..=s.peak_lr).contains(&lr));
            prop_assert!((lr - prev).abs() <= max_jump, "jump at {step}");
            if step <= warmup {
                prop_assert!(lr >= prev);
            } else {
                prop_assert!(lr <= prev);
            }
            prev = lr;
        }
        prop_assert_eq!(s.lr(warmup), s.peak_lr);
        prop_assert_eq!(s.lr(s.total_steps), 0.0);
    }

    #[test]
    fn update_rms_never_exceeds_lr(
        g in prop::collection::vec(-1e3f64..1e3, 12),
        lr in 1e-5f64..1e-1,
        steps in 1usize..5,
    ) {
        let mut opt = Adafactor::default();
        let mut p = Tensor::<f64>::zeros(&[3, 4]).unwrap();
        let grad = Tensor::matrix(3, 4, g).unwrap();
        for _ in 0..steps {
            let before = p.clone();
            opt.step(lr, [("w", &mut p, &grad)]).unwrap();
            let rms = (p.data().iter().zip(before.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 12.0).sqrt();
            prop_assert!(rms <= lr * (1.0 + 1e-12), "rms {rms} lr {lr}");
        }
    }

    #[test]
    fn update_opposes_gradient_sign(g in prop::collection::vec(0.01f64..10.0, 5)) {
        let mut opt = Adafactor::default();
        let mut p = Tensor::<f64>::zeros(&[5]).unwrap();
        let grad = Tensor::vector(g).unwrap();
        opt.step(1e-2, [("v", &mut p, &grad)]).unwrap();
        prop_assert!(p.data().iter().all(|&x| x < 0.0));
    }
}

#[test]
fn matrices_get_factored_accumulators() {
    let mut opt = Adafactor::default();
    let mut m = Tensor::<f64>::zeros(&[3, 4]).unwrap();
    let mut v = Tensor::<f64>::zeros(&[4]).unwrap();
    let gm = Tensor::from_fn(&[3, 4], |i| i as f64 + 1.0).unwrap();
    let gv = Tensor::from_fn(&[4], |i| i as f64 + 1.0).unwrap();
    opt.step(1e-3, [("m", &mut m, &gm), ("v", &mut v, &gv)]).unwrap();
    let (row, col) = opt.accumulators("m").unwrap();
    assert_eq!((row.len(), col.map(|c| c.len())), (3, Some(4)));
    let (full, none) = opt.accumulators("v").unwrap();
    assert_eq!(full.len(), 4);
    assert!(none.is_none());
    // first step: beta2 = 0, so the row accumulator is the row mean of g^2
    assert!((row[0] - (1.0 + 4.0 + 9.0 + 16.0) / 4.0).abs() < 1e-9);
}

#[test]
fn shape_change_is_rejected() {
    let mut opt = Adafactor::default();
    let mut p = Tensor::<f64>::zeros(&[2]).unwrap();
    let g = Tensor::<f64>::zeros(&[3]).unwrap();
    assert!(opt.step(1e-3, [("p", &mut p, &g)]).is_err());
}
