//! Randomized property audits: the spectral invariants over arbitrary
//! extents, conduction laws over random diffusivity fields, and the
//! backbone's shape contract across input resolutions.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vheat::dct::build_plan;
use vheat::hco::{decay_coefficients, hco_forward, FrequencyGrid};
use vheat::model::{build_model, KMode, Model, ModelConfig};
use vheat::tensor::Tensor;

fn randt(seed: u64, dims: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_| rng.random_range(lo..hi)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Round-trip, energy preservation, and linearity hold on every grid
    /// size up to 64, not just powers of two.
    #[test]
    fn spectral_invariants_hold_for_any_extent(
        m in 1usize..=64,
        n in 1usize..=64,
        seed in any::<u64>(),
    ) {
        let plan = build_plan::<f64>(m, n).unwrap();
        prop_assert!(plan.orthonormality_error() < 1e-12);

        let x = randt(seed, vec![m, n], -1.0, 1.0);
        let spec = plan.dct2d(&x).unwrap();
        let back = plan.idct2d(&spec).unwrap();
        prop_assert!(back.max_abs_diff(&x) < 1e-12, "round trip {}", back.max_abs_diff(&x));

        let energy = |t: &Tensor<f64>| t.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        let (ex, es) = (energy(&x), energy(&spec));
        prop_assert!((ex - es).abs() <= 1e-10 * ex.max(1.0), "parseval {ex} vs {es}");

        let y = randt(seed ^ 0x5eed, vec![m, n], -1.0, 1.0);
        let mix = x.zip_map(&y, |a, b| 0.3 * a - 1.7 * b).unwrap();
        let direct = plan.dct2d(&mix).unwrap();
        let recombined = plan
            .dct2d(&x)
            .unwrap()
            .zip_map(&plan.dct2d(&y).unwrap(), |a, b| 0.3 * a - 1.7 * b)
            .unwrap();
        prop_assert!(direct.max_abs_diff(&recombined) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Conduction with non-negative diffusivity never amplifies: the decay
    /// coefficients sit in (0, 1], each channel's mean survives exactly,
    /// and total energy cannot grow.
    #[test]
    fn conduction_damps_but_preserves_the_mean(
        extent_pick in 0usize..3,
        batch in 1usize..=2,
        channels in 1usize..=3,
        t in 0.0f64..4.0,
        seed in any::<u64>(),
    ) {
        let extent = [32usize, 64, 96][extent_pick];
        let grid = FrequencyGrid::<f64>::new(extent, extent).unwrap();
        let k = randt(seed, vec![channels, extent, extent], 0.0, 2.0);
        let coeff = decay_coefficients(&k, &grid, t).unwrap();
        for &c in coeff.as_slice() {
            prop_assert!(c > 0.0 && c <= 1.0, "coefficient {c} outside (0, 1]");
        }

        let plan = build_plan::<f64>(extent, extent).unwrap();
        let u0 = randt(seed ^ 0xab, vec![batch, channels, extent, extent], -1.0, 1.0);
        let u1 = hco_forward(&plan, &coeff, &u0).unwrap();
        prop_assert_eq!(u1.dims(), u0.dims());

        let plane = extent * extent;
        for s in 0..batch * channels {
            let mean = |t: &Tensor<f64>| {
                t.as_slice()[s * plane..(s + 1) * plane].iter().sum::<f64>() / plane as f64
            };
            prop_assert!((mean(&u1) - mean(&u0)).abs() < 1e-12);
        }

        let energy = |t: &Tensor<f64>| t.as_slice().iter().map(|v| v * v).sum::<f64>();
        prop_assert!(energy(&u1) <= energy(&u0) * (1.0 + 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    /// The backbone accepts any multiple-of-32 input extent and produces
    /// finite logits of the declared class count.
    #[test]
    fn backbone_shapes_audit_across_resolutions(
        extent_pick in 0usize..3,
        batch in 1usize..=2,
        fixed_k in proptest::bool::ANY,
        seed in any::<u64>(),
    ) {
        let extent = [32usize, 64, 96][extent_pick];
        let cfg = ModelConfig {
            layers: [1, 1, 1, 1],
            channels: [4, 8, 16, 32],
            mlp_ratio: 2,
            drop_path: 0.0,
            num_classes: 7,
            input_extent: extent,
            dtype: vheat::tensor::DType::F32,
            k_mode: if fixed_k { KMode::Fixed(1.0) } else { KMode::Predicted },
        };
        let model: Model<f32> = build_model(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let images = Tensor::<f32>::from_fn(vec![batch, 3, extent, extent], |_| {
            rng.random_range(-1.0..1.0f32)
        })
        .unwrap();
        let logits = model.forward(&images).unwrap();
        prop_assert_eq!(logits.dims(), &[batch, 7]);
        prop_assert!(logits.all_finite());
    }
}
