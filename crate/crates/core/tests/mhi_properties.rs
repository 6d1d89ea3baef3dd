use intent_forecast::mhi::{generate_mhi, BoundingBox, MaskFrame, MaskSequence, CHANNELS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_sequence(m: usize, w: usize, h: usize, density: f64, seed: u64) -> MaskSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (0..m)
        .map(|_| {
            let mut f = MaskFrame::zeros(w, h);
            for v in 0..h {
                for u in 0..w {
                    for c in 0..CHANNELS {
                        f.set(u, v, c, rng.random_bool(density));
                    }
                }
            }
            f
        })
        .collect();
    MaskSequence::new(frames).unwrap()
}

fn full_roi(w: usize, h: usize) -> BoundingBox {
    BoundingBox::new(0.0, 0.0, w as f64, h as f64).unwrap()
}

/// Decay value of the newest frame that sets the pixel, frames oldest first.
fn reference(seq: &MaskSequence, u: usize, v: usize, c: usize) -> f32 {
    let m = seq.frames.len();
    seq.frames
        .iter()
        .rposition(|f| f.get(u, v, c) == 1)
        .map_or(0.0, |k| ((k + 1) as f64 / m as f64) as f32)
}

fn arb_m() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![1usize, 2, 5, 50])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn values_match_the_newest_setting_frame(
        m in arb_m(), w in 1usize..12, h in 1usize..12, density in 0.0..0.6f64, seed in any::<u64>()
    ) {
        let seq = random_sequence(m, w, h, density, seed);
        let mhi = generate_mhi(&seq, &full_roi(w, h), w, h).unwrap();
        let allowed: Vec<f32> = (0..m).map(|i| ((m - i) as f64 / m as f64) as f32).collect();
        for c in 0..CHANNELS {
            for v in 0..h {
                for u in 0..w {
                    let got = mhi.get(u, v, c);
                    prop_assert!(got == 0.0 || allowed.contains(&got), "value {got} not quantised");
                    prop_assert_eq!(got, reference(&seq, u, v, c));
                }
            }
        }
    }

    #[test]
    fn newer_frames_overwrite_older(m in arb_m(), seed in any::<u64>()) {
        prop_assume!(m >= 2);
        let mut seq = random_sequence(m, 6, 5, 0.3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
        let (older, newer) = {
            let a = rng.random_range(0..m - 1);
            (a, rng.random_range(a + 1..m))
        };
        for f in seq.frames.iter_mut().skip(newer + 1) {
            f.set(2, 3, 0, false);
        }
        seq.frames[older].set(2, 3, 0, true);
        seq.frames[newer].set(2, 3, 0, true);
        let mhi = generate_mhi(&seq, &full_roi(6, 5), 6, 5).unwrap();
        prop_assert_eq!(mhi.get(2, 3, 0), ((newer + 1) as f64 / m as f64) as f32);
    }

    #[test]
    fn channels_are_independent(m in arb_m(), w in 1usize..10, h in 1usize..10, seed in any::<u64>()) {
        let seq = random_sequence(m, w, h, 0.4, seed);
        let mut cleared = seq.clone();
        for f in &mut cleared.frames {
            for v in 0..h {
                for u in 0..w {
                    f.set(u, v, 1, false);
                }
            }
        }
        let roi = full_roi(w, h);
        let a = generate_mhi(&seq, &roi, w, h).unwrap();
        let b = generate_mhi(&cleared, &roi, w, h).unwrap();
        for v in 0..h {
            for u in 0..w {
                prop_assert_eq!(a.get(u, v, 0).to_bits(), b.get(u, v, 0).to_bits());
                prop_assert_eq!(b.get(u, v, 1), 0.0);
            }
        }
    }

    #[test]
    fn single_frame_is_the_mask(w in 1usize..16, h in 1usize..16, seed in any::<u64>()) {
        let seq = random_sequence(1, w, h, 0.5, seed);
        let mhi = generate_mhi(&seq, &full_roi(w, h), w, h).unwrap();
        for c in 0..CHANNELS {
            for v in 0..h {
                for u in 0..w {
                    prop_assert_eq!(mhi.get(u, v, c), seq.frames[0].get(u, v, c) as f32);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic(m in arb_m(), seed in any::<u64>()) {
        let seq = random_sequence(m, 7, 9, 0.3, seed);
        let roi = BoundingBox::new(1.0, 0.5, 6.5, 8.0).unwrap();
        prop_assert_eq!(generate_mhi(&seq, &roi, 5, 4).unwrap(), generate_mhi(&seq, &roi, 5, 4).unwrap());
    }
}
