use disa_core::diagnostics::w2_gaussian;
use disa_core::process::{GenerationOrder, KernelKind};
use disa_core::samplers::{Parameterization, Prediction};
use disa_core::schedule::{make_diffusion_grid, make_flow_grid, NoiseLevel};
use disa_core::{DiffusionSchedule, SchedulerKind, StepScheduler, TimeGrid, TokenProcess, TokenProcessSpec};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spd(m: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, m * m)
        .prop_map(move |v| {
            let a = DMatrix::from_vec(m, m, v);
            &a * a.transpose() + DMatrix::identity(m, m) * 0.05
        })
}

fn vector(m: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-2.0f64..2.0, m).prop_map(DVector::from_vec)
}

proptest! {
    #[test]
    fn linear_schedule_is_monotone(n in 2usize..400, start in 1e-5f64..0.01, width in 1e-4f64..0.05) {
        let s = DiffusionSchedule::linear(n, start, start + width).unwrap();
        let ab = s.alpha_bars();
        prop_assert!(ab[0] < 1.0 && *ab.last().unwrap() > 0.0);
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.betas().windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn cosine_schedule_is_monotone(n in 2usize..2000, offset in 1e-4f64..0.05) {
        let s = DiffusionSchedule::cosine(n, offset).unwrap();
        let ab = s.alpha_bars();
        prop_assert!(ab[0] < 1.0 && *ab.last().unwrap() > 0.0);
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.betas().iter().all(|&b| b > 0.0 && b <= 0.999));
    }

    #[test]
    fn schedulers_are_monotone_and_bounded(
        kind in prop::sample::select(vec![SchedulerKind::TwoStage, SchedulerKind::Linear, SchedulerKind::Cosine]),
        late in 1usize..60,
        extra in 0usize..200,
        k in 1usize..130,
        min_steps in 1usize..4,
    ) {
        let early = late + extra;
        let s = StepScheduler::new(kind, early, late, k).unwrap().with_min_steps(min_steps).unwrap();
        let t: Vec<usize> = s.schedule_table().into_iter().map(|(_, t)| t).collect();
        prop_assert_eq!(t[0], early.max(min_steps));
        prop_assert!(t.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(t.iter().all(|&v| v >= late.max(min_steps) && v <= early.max(min_steps)));
        prop_assert_eq!(s.total_nfe(2, 1), 2 * t.iter().sum::<usize>() + k);
        let c = StepScheduler::constant(early, k).unwrap();
        prop_assert_eq!(c.total_nfe(1, 0), early * k);
    }

    #[test]
    fn w2_is_a_metric(
        (a, b, c) in (spd(3), spd(3), spd(3)),
        (ma, mb, mc) in (vector(3), vector(3), vector(3)),
    ) {
        let ab = w2_gaussian(&ma, &a, &mb, &b).unwrap();
        let ba = w2_gaussian(&mb, &b, &ma, &a).unwrap();
        let bc = w2_gaussian(&mb, &b, &mc, &c).unwrap();
        let ac = w2_gaussian(&ma, &a, &mc, &c).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-7 * (1.0 + ab));
        prop_assert!(ac <= ab + bc + 1e-7);
        prop_assert_eq!(w2_gaussian(&ma, &a, &ma, &a).unwrap(), 0.0);
        prop_assert!(ab >= (&ma - &mb).norm() - 1e-9);
    }

    #[test]
    fn parameterizations_round_trip(
        ab in 0.001f64..0.999,
        vals in prop::collection::vec(-3.0f64..3.0, 12),
    ) {
        let level = NoiseLevel::from_alpha_bar(ab);
        let x = DMatrix::from_vec(3, 2, vals[..6].to_vec());
        let eps = DMatrix::from_vec(3, 2, vals[6..].to_vec());
        let p = Prediction::new(Parameterization::Epsilon, eps.clone());
        for kind in [Parameterization::Score, Parameterization::Velocity] {
            let back = p.convert(kind, &x, level).convert(Parameterization::Epsilon, &x, level);
            prop_assert!((back.value - &eps).amax() < 1e-6 * (1.0 + eps.amax() / level.noise));
        }
        // x = a x0 + b eps must hold for the implied x0
        let x0 = p.x0(&x, level);
        prop_assert!((&x0 * level.signal + &eps * level.noise - &x).amax() < 1e-9);
    }

    #[test]
    fn conditioning_never_loosens(
        seed in any::<u64>(),
        ls in 0.3f64..4.0,
        kernel in prop::sample::select(vec![KernelKind::Rbf, KernelKind::Ar1]),
    ) {
        let p = TokenProcess::new(TokenProcessSpec {
            grid_height: 3, grid_width: 4, token_dim: 2, kernel, length_scale: ls, ..Default::default()
        }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let order = GenerationOrder::random(12, 12, &mut rng).unwrap();
        let perm = order.permutation();
        let targets = &perm[9..];
        let mut prev = f64::INFINITY;
        for j in 0..=9 {
            let tr = p.conditional_on(&perm[..j], &DMatrix::zeros(j, 2), targets).unwrap().trace();
            prop_assert!(tr <= prev + 1e-9);
            prev = tr;
        }
    }

    #[test]
    fn diffusion_grids_are_valid(start in 1usize..999, frac in 0.0f64..1.0) {
        let s = DiffusionSchedule::cosine(1000, 0.008).unwrap();
        let n = 1 + (frac * (start - 1) as f64) as usize;
        let g = make_diffusion_grid(&s, n, start).unwrap();
        let TimeGrid::DiscreteDiffusion(pts) = &g else { unreachable!() };
        prop_assert_eq!(pts.len(), n + 1);
        prop_assert_eq!(pts[0], start);
        prop_assert_eq!(*pts.last().unwrap(), 0);
        prop_assert!(pts.windows(2).all(|w| w[0] > w[1]));
        let path = g.resolve(Some(&s)).unwrap();
        prop_assert!(path.levels.last().unwrap().is_clean());
        prop_assert!(make_diffusion_grid(&s, start + 1, start).is_err());
    }

    #[test]
    fn flow_grids_are_valid(n in 1usize..500, start in 0.01f64..=1.0) {
        let g = make_flow_grid(n, start).unwrap();
        let pts = g.points();
        prop_assert_eq!(pts.len(), n + 1);
        prop_assert_eq!(pts[0], start);
        prop_assert_eq!(*pts.last().unwrap(), 0.0);
        prop_assert!(pts.windows(2).all(|w| w[0] > w[1]));
    }
}
