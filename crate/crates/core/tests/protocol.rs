use proptest::prelude::*;
use respfuse::train::{average_best_epochs, balance_training_set, simulate_early_stopping, Sample, MAX_EPOCHS, PATIENCE};

/// Straightforward restatement: stop once `patience` epochs pass without a
/// strictly lower loss, or at `max` epochs.
fn reference_stop(losses: &[f64], patience: usize, max: usize) -> Option<(usize, usize)> {
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;
    for (i, &l) in losses.iter().enumerate() {
        let epoch = i + 1;
        if l < best {
            best = l;
            best_epoch = epoch;
        }
        if epoch == max || epoch == best_epoch + patience {
            return Some((best_epoch, epoch));
        }
    }
    None
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn early_stopping_matches_reference(losses in prop::collection::vec(0u8..8, MAX_EPOCHS)) {
        let losses: Vec<f64> = losses.into_iter().map(|x| x as f64 / 8.0).collect();
        let got = simulate_early_stopping(&losses, PATIENCE, MAX_EPOCHS);
        prop_assert_eq!(got, reference_stop(&losses, PATIENCE, MAX_EPOCHS));
        let (best, stopped) = got.unwrap();
        prop_assert!(stopped == MAX_EPOCHS || stopped == best + PATIENCE);
    }

    #[test]
    fn non_improving_tail_stops_at_best_plus_patience(
        steps in prop::collection::vec(1u16..1000, 1..60),
        tail in prop::collection::vec(0u16..1000, 100),
    ) {
        // strictly decreasing head, then one new best, then nothing lower
        let mut losses: Vec<f64> = steps.iter().scan(1e6, |acc, &x| { *acc -= x as f64; Some(*acc) }).collect();
        let floor = losses[losses.len() - 1] - 0.5;
        let best = losses.len();
        losses.push(floor);
        losses.extend(tail.iter().map(|&x| floor + x as f64));
        let expected = (best + 1 + PATIENCE).min(MAX_EPOCHS);
        let stopped = simulate_early_stopping(&losses, PATIENCE, MAX_EPOCHS).unwrap().1;
        if best + 1 + PATIENCE <= MAX_EPOCHS {
            prop_assert_eq!(stopped, expected);
        }
    }
}

#[test]
fn average_epochs_is_ceiling_of_mean_over_all_5_tuples() {
    // the mean ignores order, so non-decreasing tuples cover every case
    let mut checked = 0u64;
    for a in 1..=100usize {
        for b in a..=100 {
            for c in b..=100 {
                for d in c..=100 {
                    for e in d..=100 {
                        let mean = (a + b + c + d + e) as f64 / 5.0;
                        assert_eq!(average_best_epochs(&[a, b, c, d, e]).unwrap(), mean.ceil() as usize);
                        checked += 1;
                    }
                }
            }
        }
    }
    assert_eq!(checked, 91_962_520);
    assert_eq!(average_best_epochs(&[100, 1, 1, 1, 1]).unwrap(), 21);
    assert!(average_best_epochs(&[1, 2, 3, 4]).is_err());
}

#[test]
fn balancing_equalizes_classes_for_all_counts() {
    let samples: Vec<Sample> = (0..2000).map(|frame| Sample { patient_id: "p".into(), frame }).collect();
    for n in 1..=1000usize {
        for p in 1..=n {
            let idx = balance_training_set(&samples[..p + n], |s| s.frame < p).unwrap();
            let pos = idx.samples.iter().filter(|s| s.frame < p).count();
            assert_eq!((pos, idx.samples.len() - pos), (n, n), "P={p} N={n}");
        }
    }
}
