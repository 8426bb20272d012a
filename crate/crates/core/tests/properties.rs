mod common;

use common::{fuzz_draw, fuzz_model};
use gamm_r2::model::{Model, Term};
use gamm_r2::partial::{partial_decompose, PartialSpec};
use gamm_r2::rsq::{decompose, gelman_form_r2, RsqSummary};
use gamm_r2::sampler::log_posterior;
use gamm_r2::splines::build_basis;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// Every proper, nonempty subset of the non-intercept terms.
fn reductions(model: &Model) -> Vec<Vec<Term>> {
    let others: Vec<Term> = model.terms().into_iter().filter(|t| *t != Term::Intercept).collect();
    (0..(1usize << others.len()) - 1)
        .map(|mask| {
            others
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, t)| *t)
                .collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn r2_in_unit_interval_and_gelman_form_agrees(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = fuzz_model(&mut rng);
        let draw = fuzz_draw(&model, &mut rng);
        let Ok(d) = decompose(&model, &draw) else { return Ok(()) };
        prop_assert!(d.ess >= 0.0 && d.rss > 0.0);
        prop_assert!((0.0..=1.0).contains(&d.r2));
        prop_assert!(close(d.tss, d.ess + d.rss, 1e-12));
        let g = gelman_form_r2(&model, &draw).unwrap();
        prop_assert!(close(g, d.r2, 1e-12), "{g} vs {}", d.r2);
    }

    #[test]
    fn reduced_residual_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = fuzz_model(&mut rng);
        let draw = fuzz_draw(&model, &mut rng);
        let full = decompose(&model, &draw).unwrap();
        for kept in reductions(&model) {
            let spec = PartialSpec::from_kept(&model, &kept);
            let p = partial_decompose(&model, &spec, &draw).unwrap();
            prop_assert!(close(p.rss0, p.rss + p.ess1, 1e-12));
            prop_assert!(close(p.rss, full.rss, 1e-12));
            prop_assert!(close(p.tss, full.tss, 1e-12));
            prop_assert!(p.ess1 >= 0.0);
            let pr = p.partial_r2().unwrap();
            prop_assert!((0.0..=1.0).contains(&pr));
            prop_assert!(p.marginal_ratio().unwrap() >= 0.0);
        }
    }

    #[test]
    fn row_permutation_invariance(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = fuzz_model(&mut rng);
        let draw = fuzz_draw(&model, &mut rng);
        let mut order: Vec<usize> = (0..model.n()).collect();
        order.shuffle(&mut rng);
        let shuffled = Model::new(model.spec().clone(), model.data().permuted(&order)).unwrap();
        let a = decompose(&model, &draw).unwrap();
        let b = decompose(&shuffled, &draw).unwrap();
        prop_assert!(close(a.r2, b.r2, 1e-9), "{} vs {}", a.r2, b.r2);
        let la = log_posterior(&model, &draw).unwrap();
        let lb = log_posterior(&shuffled, &draw).unwrap();
        prop_assert!(close(la, lb, 1e-9), "{la} vs {lb}");
    }

    #[test]
    fn raw_spline_basis_partitions_unity(
        u in prop::collection::vec(-5.0f64..5.0, 8..40),
        k in 4usize..12,
        x in 0.0f64..1.0,
    ) {
        let lo = u.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assume!(hi - lo > 1e-3);
        let Ok((basis, design)) = build_basis(&u, k, 3) else { return Ok(()) };
        let at = lo + x * (hi - lo);
        let raw = basis.evaluate_raw(at);
        prop_assert!(raw.iter().all(|v| *v >= -1e-12));
        prop_assert!(close(raw.iter().sum::<f64>(), 1.0, 1e-12));
        // centered columns sum to zero over the training inputs
        for j in 0..design.ncols() {
            prop_assert!(design.column(j).sum().abs() < 1e-9);
        }
    }

    #[test]
    fn summary_quantiles_ordered(xs in prop::collection::vec(0.0f64..1.0, 1..200)) {
        let ids = (0..xs.len()).collect();
        let s = RsqSummary::from_samples(xs, ids, 0).unwrap();
        prop_assert!(s.q05 <= s.median && s.median <= s.q95);
        prop_assert!((0.0..=1.0).contains(&s.mean));
    }
}
