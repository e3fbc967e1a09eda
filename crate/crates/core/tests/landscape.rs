mod common;

use common::{jittered, small_settings, synthetic};
use samrec::autodiff::{ParamSet, Tensor};
use samrec::dataset::synthetic::SyntheticSpec;
use samrec::landscape::{
    displaced, evaluate_grid, linspace, model_loss, model_sharpness, probe_batches,
    sample_directions, sharpness_proxy, Normalization,
};
use samrec::model::{init, SasrecConfig, ITEM_TABLE};
use samrec::sam::train;
use samrec::Error;

fn bits(p: &ParamSet) -> Vec<u64> {
    p.flatten().iter().map(|v| v.to_bits()).collect()
}

fn toy_params() -> ParamSet {
    let mut p = ParamSet::new();
    p.push(
        "m",
        Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 0.0, 0.0]).unwrap(),
    );
    p.push("v", Tensor::from_vec(vec![1.5, -0.25]));
    p
}

fn half_square(p: &ParamSet) -> samrec::Result<f64> {
    Ok(0.5 * p.norm().powi(2))
}

#[test]
fn quadratic_surface_matches_closed_form() {
    let p = toy_params();
    let dirs = sample_directions(&p, Normalization::Global, 3);
    assert!((dirs.first.norm() - p.norm()).abs() < 1e-10);
    assert!((dirs.second.norm() - p.norm()).abs() < 1e-10);
    let coeffs = linspace(-1.0, 1.0, 9);
    let grid = evaluate_grid(&p, &dirs, &coeffs, &coeffs, half_square).unwrap();
    let flat = |s: &ParamSet| s.flatten();
    let (theta, d1, d2) = (flat(&p), flat(&dirs.first), flat(&dirs.second));
    for (i, &a) in coeffs.iter().enumerate() {
        for (j, &b) in coeffs.iter().enumerate() {
            let want: f64 = (0..theta.len())
                .map(|k| (theta[k] + a * d1[k] + b * d2[k]).powi(2))
                .sum::<f64>()
                / 2.0;
            assert!((grid.loss(i, j) - want).abs() < 1e-10);
        }
    }
    assert!(grid.flagged.is_empty());
}

#[test]
fn filter_normalization_matches_row_norms() {
    let cfg = SasrecConfig {
        dim: 8,
        num_heads: 2,
        ..SasrecConfig::new(12, 5)
    };
    let params = jittered(&cfg, 2, 0.1);
    let dirs = sample_directions(&params, Normalization::Filter, 9);
    for d in [&dirs.first, &dirs.second] {
        for ((name, p), q) in params.iter().zip(d.tensors()) {
            let rows = if p.shape().len() >= 2 {
                p.shape()[0]
            } else {
                1
            };
            let width = p.len() / rows;
            for r in 0..rows {
                let norm = |t: &Tensor| {
                    t.data()[r * width..(r + 1) * width]
                        .iter()
                        .map(|x| x * x)
                        .sum::<f64>()
                        .sqrt()
                };
                assert!((norm(p) - norm(q)).abs() < 1e-10, "{name} row {r}");
            }
        }
        assert!(d.get(ITEM_TABLE).unwrap().row(0).iter().all(|&x| x == 0.0));
    }
    assert_ne!(dirs.first, dirs.second);
    assert_eq!(dirs, sample_directions(&params, Normalization::Filter, 9));
    assert_ne!(dirs, sample_directions(&params, Normalization::Filter, 10));
}

#[test]
fn swapping_directions_transposes_the_grid() {
    let p = toy_params();
    let dirs = sample_directions(&p, Normalization::Filter, 1);
    let coeffs = linspace(-1.0, 1.0, 7);
    let loss = |q: &ParamSet| Ok(q.flatten().iter().map(|x| x.powi(4) - x).sum::<f64>());
    let a = evaluate_grid(&p, &dirs, &coeffs, &coeffs, loss).unwrap();
    let b = evaluate_grid(&p, &dirs.swapped(), &coeffs, &coeffs, loss).unwrap();
    for i in 0..7 {
        for j in 0..7 {
            assert_eq!(a.loss(i, j).to_bits(), b.loss(j, i).to_bits());
        }
    }
}

#[test]
fn model_grid_center_and_restoration() {
    let ds = synthetic(
        &SyntheticSpec {
            num_users: 60,
            num_items: 30,
            seq_len: 15,
            ..SyntheticSpec::default()
        },
        10,
    );
    let cfg = SasrecConfig {
        dim: 8,
        num_layers: 1,
        ..SasrecConfig::new(ds.num_items(), 10)
    };
    let params = jittered(&cfg, 4, 0.2);
    let before = bits(&params);
    let batches = probe_batches(&ds, 300, 16, 1, 7).unwrap();
    let dirs = sample_directions(&params, Normalization::Filter, 7);
    let coeffs = linspace(-1.0, 1.0, 5);
    let grid = evaluate_grid(&params, &dirs, &coeffs, &coeffs, |p| {
        model_loss(p, &cfg, &batches)
    })
    .unwrap();
    let plain = model_loss(&params, &cfg, &batches).unwrap();
    assert!((grid.center() - plain).abs() < 1e-12);
    assert_eq!(bits(&params), before);
    let again = evaluate_grid(&params, &dirs, &coeffs, &coeffs, |p| {
        model_loss(p, &cfg, &batches)
    })
    .unwrap();
    assert_eq!(grid.to_csv(), again.to_csv());
    assert_eq!(grid.to_csv().lines().count(), 1 + 25);
    assert_eq!(grid.to_csv().lines().next().unwrap(), "alpha,beta,loss");
}

#[test]
fn non_finite_cells_are_flagged() {
    let p = toy_params();
    let dirs = sample_directions(&p, Normalization::None, 0);
    let coeffs = [-1.0, 0.0, 1.0];
    let grid = evaluate_grid(&p, &dirs, &coeffs, &coeffs, |q| {
        let v = half_square(q)?;
        if q.flatten()[0] > p.flatten()[0] + 1e-9 && v > 0.0 {
            Err(Error::Numeric("overflow".into()))
        } else {
            Ok(v)
        }
    })
    .unwrap();
    assert!(!grid.flagged.is_empty() && grid.flagged.len() < 9);
    for &(i, j) in &grid.flagged {
        assert!(grid.loss(i, j).is_nan());
    }
    assert!(grid.center().is_finite());
}

#[test]
fn grid_requires_zero_and_non_empty_lists() {
    let p = toy_params();
    let dirs = sample_directions(&p, Normalization::Filter, 0);
    assert!(evaluate_grid(&p, &dirs, &[], &[0.0], half_square).is_err());
    assert!(evaluate_grid(&p, &dirs, &[0.5, 1.0], &[0.0], half_square).is_err());
    let moved = displaced(&p, &dirs, 0.0, 0.0).unwrap();
    assert_eq!(bits(&moved), bits(&p));
}

#[test]
fn sharpness_is_nonnegative_and_zero_at_zero_radius() {
    let ds = synthetic(
        &SyntheticSpec {
            num_users: 80,
            num_items: 30,
            seq_len: 15,
            ..SyntheticSpec::default()
        },
        10,
    );
    let cfg = SasrecConfig {
        dim: 8,
        num_layers: 1,
        ..SasrecConfig::new(ds.num_items(), 10)
    };
    let params = init(&cfg, 3).unwrap();
    let batches = probe_batches(&ds, 600, 8, 1, 1).unwrap();
    let report = model_sharpness(&params, &cfg, &batches, 0.05, 40).unwrap();
    let nonneg = report.values.iter().filter(|&&v| v >= 0.0).count();
    assert!(
        nonneg * 100 >= 95 * report.values.len(),
        "{:?}",
        report.values
    );
    assert!(report.max >= report.mean);
    let zero = model_sharpness(&params, &cfg, &batches, 0.0, 5).unwrap();
    assert!(zero.values.iter().all(|&v| v == 0.0));
    assert!(sharpness_proxy(
        &params,
        &batches,
        -1.0,
        1,
        |_, _| unreachable!(),
        |_, _| unreachable!()
    )
    .is_err());
}

#[test]
fn converged_models_sit_at_the_grid_center() {
    let ds = synthetic(
        &SyntheticSpec {
            num_users: 100,
            num_items: 30,
            seq_len: 15,
            ..SyntheticSpec::default()
        },
        10,
    );
    let coeffs = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let mut centered = 0;
    for seed in 0..5 {
        let settings = small_settings(&ds, seed, true, 60);
        let out = train(&ds, &settings, None, None).unwrap();
        let params = &out.state.params;
        let batches = probe_batches(&ds, 500, 32, 1, seed).unwrap();
        let dirs = sample_directions(params, Normalization::Filter, seed);
        let grid = evaluate_grid(params, &dirs, &coeffs, &coeffs, |p| {
            model_loss(p, &settings.model, &batches)
        })
        .unwrap();
        let min = grid.losses.iter().copied().fold(f64::INFINITY, f64::min);
        if grid.center() == min {
            centered += 1;
        }
    }
    assert!(centered >= 4, "{centered}/5");
}

#[test]
fn sam_training_flattens_the_untrained_model() {
    let ds = synthetic(
        &SyntheticSpec {
            num_users: 100,
            num_items: 30,
            seq_len: 15,
            ..SyntheticSpec::default()
        },
        10,
    );
    for seed in 0..5 {
        let settings = small_settings(&ds, seed, true, 10);
        let batches = probe_batches(&ds, 500, 32, 1, seed).unwrap();
        let fresh = init(&settings.model, seed).unwrap();
        let trained = train(&ds, &settings, None, None).unwrap().state.params;
        let before = model_sharpness(&fresh, &settings.model, &batches, 0.05, 8).unwrap();
        let after = model_sharpness(&trained, &settings.model, &batches, 0.05, 8).unwrap();
        assert!(
            after.max < before.max,
            "seed {seed}: {} vs {}",
            after.max,
            before.max
        );
    }
}
