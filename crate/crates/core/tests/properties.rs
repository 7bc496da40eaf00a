use gradguard::bounds::{fisher_trace_noise, fisher_trace_prune, reconstruction_bound, PriorSpec};
use gradguard::defense::{
    clip_gradient, defend, optimal_noise_sigma, prune_by_index, DefenseSpec, LambdaRule,
    NoiseLevel, PruneBudget, SigmaRule,
};
use gradguard::fl::aggregate;
use gradguard::nn::{
    Batch, GradVector, Labels, Layer, LossKind, Model, ModelSpec, ParamVector, Tensor,
};
use gradguard::probe::{RowNormEstimate, RowNormMethod};
use gradguard::rng::stream;
use proptest::prelude::*;

fn rows(values: Vec<f64>) -> RowNormEstimate {
    RowNormEstimate {
        values,
        k: 0,
        method: RowNormMethod::Exact,
    }
}

/// Gradient entries bounded away from the noise floor, with row norms.
fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..24).prop_flat_map(|d| {
        (
            prop::collection::vec(prop_oneof![(1e-3f64..2.0), (-2.0f64..-1e-3)], d),
            prop::collection::vec(1e-3f64..10.0, d),
        )
    })
}

fn mlp(hidden: usize) -> Model {
    Model::new(ModelSpec {
        input_shape: vec![3],
        layers: vec![
            Layer::Dense {
                inputs: 3,
                outputs: hidden,
                bias: true,
            },
            Layer::LeakyRelu { slope: 0.1 },
            Layer::Dense {
                inputs: hidden,
                outputs: 2,
                bias: true,
            },
        ],
        loss: LossKind::CrossEntropy,
    })
    .unwrap()
}

proptest! {
    #[test]
    fn optimal_sigma_scales_with_fixed_lambda((g, r) in instance(), lambda in 1e-3f64..10.0) {
        let g = GradVector::new(g);
        let r = rows(r);
        let one = optimal_noise_sigma(&g, &r, &SigmaRule::new(LambdaRule::Fixed(1.0))).unwrap();
        let scaled = optimal_noise_sigma(&g, &r, &SigmaRule::new(LambdaRule::Fixed(lambda))).unwrap();
        for (a, b) in one.iter().zip(&scaled) {
            prop_assert!((a * lambda - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn frobenius_rule_hits_its_target((g, r) in instance(), target in 1e-4f64..10.0) {
        let sigma = optimal_noise_sigma(
            &GradVector::new(g),
            &rows(r),
            &SigmaRule::new(LambdaRule::Frobenius(target)),
        )
        .unwrap();
        let fro = sigma.iter().map(|s| s * s).sum::<f64>().sqrt();
        prop_assert!((fro - target).abs() <= 1e-10 * target);
    }

    #[test]
    fn optimal_sigma_minimizes_trace_at_equal_utility(
        (g, r) in instance(),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let gv = GradVector::new(g.clone());
        let r = rows(r);
        let opt = optimal_noise_sigma(&gv, &r, &SigmaRule::new(LambdaRule::UtilityBudget(1.0))).unwrap();
        let mut rng = stream(seed, &[]);
        let raw: Vec<f64> = g.iter().map(|_| rng.gen_range(0.01..100.0)).collect();
        let u: f64 = g.iter().zip(&raw).map(|(gi, s)| gi * gi * s).sum();
        let other: Vec<f64> = raw.iter().map(|s| s / u).collect();
        let t_opt = fisher_trace_noise(&r, &opt).unwrap();
        let t_other = fisher_trace_noise(&r, &other).unwrap();
        prop_assert!(t_opt <= t_other * (1.0 + 1e-10));
    }

    #[test]
    fn bound_decreases_with_information(
        t1 in 0.0f64..1e4,
        dt in 1e-6f64..1e4,
        m in 1usize..100,
        var in prop::option::of(1e-3f64..10.0),
    ) {
        let prior = match var {
            Some(variance) => PriorSpec::IsotropicGaussian { variance },
            None => PriorSpec::Flat,
        };
        let a = reconstruction_bound(t1, m, &prior).unwrap().bound_value;
        let b = reconstruction_bound(t1 + dt, m, &prior).unwrap().bound_value;
        prop_assert!(b < a || (a.is_infinite() && b.is_finite()));
    }

    #[test]
    fn pruning_more_never_adds_information(
        r in prop::collection::vec(0.0f64..5.0, 1..20),
        cut in 0.0f64..1.0,
        eps in 1e-3f64..2.0,
    ) {
        let d = r.len();
        let n = (cut * d as f64) as usize;
        let inner: Vec<usize> = (0..n).collect();
        let outer: Vec<usize> = (0..d.min(n + 1)).collect();
        let r = rows(r);
        let a = fisher_trace_prune(&r, &inner, eps).unwrap();
        let b = fisher_trace_prune(&r, &outer, eps).unwrap();
        prop_assert!(b <= a);
    }

    #[test]
    fn ratio_pruning_removes_the_lowest_scores(
        g in prop::collection::vec(-1.0f64..1.0, 1..30),
        ratio in 0.0f64..=1.0,
    ) {
        let scores: Vec<f64> = g.iter().map(|v| v.abs()).collect();
        let gv = GradVector::new(g.clone());
        let out = prune_by_index(&gv, &scores, PruneBudget::Ratio(ratio)).unwrap();
        let pruned = &out.audit.pruned_set;
        prop_assert_eq!(pruned.len(), (ratio * g.len() as f64).floor() as usize);
        let max_pruned = pruned.iter().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
        for i in 0..g.len() {
            if pruned.contains(&i) {
                prop_assert_eq!(out.values[i], 0.0);
            } else {
                prop_assert!(scores[i] >= max_pruned);
                prop_assert_eq!(out.values[i], g[i]);
            }
        }
    }

    #[test]
    fn utility_pruning_respects_its_budget(
        g in prop::collection::vec(-1.0f64..1.0, 1..30),
        frac in 0.0f64..=1.0,
    ) {
        let total: f64 = g.iter().map(|v| v * v).sum();
        let budget = frac * total;
        let scores: Vec<f64> = g.iter().map(|v| v.abs()).collect();
        let out = prune_by_index(&GradVector::new(g), &scores, PruneBudget::Utility(budget)).unwrap();
        let kept: f64 = out.values.iter().map(|v| v * v).sum();
        prop_assert!(kept >= budget * (1.0 - 1e-12));
    }

    #[test]
    fn clipping_bounds_every_coordinate(
        g in prop::collection::vec(-10.0f64..10.0, 1..30),
        clip in 1e-3f64..5.0,
    ) {
        let c = clip_gradient(&GradVector::new(g.clone()), clip);
        for (a, b) in c.values.iter().zip(&g) {
            prop_assert!(a.abs() <= clip);
            prop_assert_eq!(a.signum(), b.signum());
            if b.abs() <= clip {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn aggregation_is_linear_and_scale_free(
        obs in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..6),
        seed in any::<u64>(),
        a in -3.0f64..3.0,
        scale in 0.1f64..10.0,
    ) {
        use rand::Rng;
        let mut rng = stream(seed, &[]);
        let weights: Vec<f64> = obs.iter().map(|_| rng.gen_range(0.1..5.0)).collect();
        let shifts: Vec<Vec<f64>> = obs.iter().map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let combined: Vec<Vec<f64>> = obs
            .iter()
            .zip(&shifts)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| a * p + q).collect())
            .collect();
        let agg = |v: &[Vec<f64>], w: &[f64]| {
            let r: Vec<&[f64]> = v.iter().map(|x| x.as_slice()).collect();
            aggregate(&r, w).unwrap().values
        };
        let lhs = agg(&combined, &weights);
        let rx = agg(&obs, &weights);
        let ry = agg(&shifts, &weights);
        let w2: Vec<f64> = weights.iter().map(|w| w * scale).collect();
        let rs = agg(&combined, &w2);
        for i in 0..4 {
            prop_assert!((lhs[i] - (a * rx[i] + ry[i])).abs() <= 1e-10);
            prop_assert!((lhs[i] - rs[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn defenses_are_deterministic_per_seed(
        g in prop::collection::vec(-1.0f64..1.0, 1..20),
        seed in any::<u64>(),
        var in 0.0f64..1.0,
    ) {
        let g = GradVector::new(g);
        let spec = DefenseSpec::Dpsgd { sigma: NoiseLevel::Variance(var), clip: 0.5 };
        let a = defend(&g, &spec, None, &mut stream(seed, &[1])).unwrap();
        let b = defend(&g, &spec, None, &mut stream(seed, &[1])).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn param_vectors_round_trip_through_layer_tensors(hidden in 1usize..6, seed in any::<u64>()) {
        let model = mlp(hidden);
        let p = model.init_params(&mut stream(seed, &[]));
        let back = ParamVector::from_layer_tensors(&model, &p.to_layer_tensors()).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn parameter_gradients_match_finite_differences(
        hidden in 1usize..5,
        seed in any::<u64>(),
        x in prop::collection::vec(-1.0f64..1.0, 3),
        label in 0usize..2,
    ) {
        let model = mlp(hidden);
        let params = model.init_params(&mut stream(seed, &[]));
        let batch = Batch::new(Tensor::new(vec![1, 3], x).unwrap(), Labels::Classes(vec![label])).unwrap();
        let g = model.param_gradient(&params, &batch).unwrap();
        let h = 1e-6;
        for i in 0..params.len() {
            let mut p = params.clone();
            p.values[i] += h;
            let up = model.loss(&p, &batch).unwrap();
            p.values[i] -= 2.0 * h;
            let down = model.loss(&p, &batch).unwrap();
            let fd = (up - down) / (2.0 * h);
            prop_assert!((fd - g.values[i]).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }
}
