use w2w_core::adapter::load_adapter;
use w2w_core::direction::{
    edit_sweep, edit_theta, multi_direction_edit, train_direction, DirectionParams, EditDirection,
};
use w2w_core::linalg::{principal_angles, SvdOptions};
use w2w_core::preference::{Label, PreferenceLabelSet};
use w2w_core::reduction::{export_rank1, flatten, reduce_adapter, unflatten, LayerSelection, WeightVector};
use w2w_core::space::{build_space, build_space_with, PcaMethod, W2WSpace};
use w2w_core::synth::{
    gen_corpus, gen_multi_user, recovery_report, score_curve, Geometry, SyntheticCorpus, SyntheticSpec,
};
use w2w_core::Error;
use w2w_oracle::SplitMix;

fn planted(seed: u64, noise: f64) -> SyntheticCorpus {
    gen_corpus(&SyntheticSpec {
        seed,
        noise,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn fit(c: &SyntheticCorpus, m: usize) -> (W2WSpace, EditDirection) {
    let space = build_space(&c.vectors, &c.layout, m).unwrap();
    let dir = train_direction(&space, &c.labels[0], &c.vectors, &DirectionParams::default()).unwrap();
    (space, dir)
}

#[test]
fn noise_free_corpus_lies_in_planted_subspace() {
    let c = gen_corpus(&SyntheticSpec {
        noise: 0.0,
        separation: 0.0,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let basis = c.truth.basis_array();
    for v in &c.vectors {
        let centred: Vec<f64> = v.theta.iter().zip(&c.truth.mean).map(|(&t, m)| t as f64 - m).collect();
        let coeffs = basis.dot(&ndarray::ArrayView1::from(&centred));
        let back = basis.t().dot(&coeffs);
        for (a, b) in centred.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn label_balance_within_binomial_bound() {
    for seed in 0..5 {
        let c = planted(seed, 0.1);
        let pos = c.labels[0].count(Label::Positive) as f64;
        let n = c.vectors.len() as f64;
        assert!((pos - n / 2.0).abs() <= 3.0 * (n * 0.25).sqrt(), "seed {seed}: {pos}");
    }
}

#[test]
fn noise_free_recovery() {
    let c = planted(0, 0.0);
    let (space, dir) = fit(&c, 5);
    let r = recovery_report(&space, Some(&dir), &c.truth, &c.vectors).unwrap();
    assert!(
        r.principal_angles.iter().all(|&a| a <= 1e-3),
        "{:?}",
        r.principal_angles
    );
    assert!(r.direction_cosine.unwrap() >= 0.99);
}

#[test]
fn noisy_recovery() {
    for seed in 0..3 {
        let c = planted(seed, 0.1);
        let (space, dir) = fit(&c, 5);
        let r = recovery_report(&space, Some(&dir), &c.truth, &c.vectors).unwrap();
        assert!(r.max_angle_deg <= 5.0, "seed {seed}: {}", r.max_angle_deg);
        assert!(r.direction_cosine.unwrap() >= 0.95);
        assert!(r.heldout_accuracy.unwrap() >= 0.95);
        assert!(dir.metrics.converged);
    }
}

#[test]
fn truncation_increases_reconstruction_error() {
    let c = planted(1, 0.05);
    let full = build_space(&c.vectors, &c.layout, 5).unwrap();
    let cut = build_space(&c.vectors, &c.layout, 3).unwrap();
    let rf = recovery_report(&full, None, &c.truth, &c.vectors).unwrap();
    let rc = recovery_report(&cut, None, &c.truth, &c.vectors).unwrap();
    assert!(rc.reconstruction_rmse > rf.reconstruction_rmse);
}

#[test]
fn gram_and_covariance_paths_agree() {
    let mut rng = SplitMix::new(17);
    for (n, d_layers) in [(12usize, 2usize), (40, 4), (30, 1)] {
        let spec = SyntheticSpec {
            seed: rng.next_u64(),
            n,
            m_true: 4,
            layers: w2w_core::synth::default_layers(d_layers, 4, 4),
            noise: 0.3,
            ..SyntheticSpec::default()
        };
        let c = gen_corpus(&spec).unwrap();
        let m = 4;
        let g = build_space_with(&c.vectors, &c.layout, m, PcaMethod::Gram).unwrap();
        let cov = build_space_with(&c.vectors, &c.layout, m, PcaMethod::Covariance).unwrap();
        for (a, b) in g.eigenvalues.iter().zip(&cov.eigenvalues) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-12));
        }
        for j in 0..m {
            let cos: f64 = g.basis.row(j).dot(&cov.basis.row(j));
            assert!(cos.abs() >= 1.0 - 1e-6, "component {j}: {cos}");
        }
        let angles = principal_angles(g.basis.view(), cov.basis.view()).unwrap();
        assert!(angles.iter().all(|&a| a < 1e-5));
    }
}

#[test]
fn project_reconstruct_project_is_identity() {
    let c = planted(2, 0.1);
    let space = build_space(&c.vectors, &c.layout, 5).unwrap();
    for v in c.vectors.iter().take(20) {
        let coeffs = space.project(v).unwrap();
        let rec = space.reconstruct(&coeffs, &v.adapter_id).unwrap();
        let again = space.project(&rec).unwrap();
        for (a, b) in coeffs.iter().zip(&again) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()));
        }
    }
}

#[test]
fn space_file_round_trip_preserves_digest() {
    let dir = tempfile::tempdir().unwrap();
    let c = planted(3, 0.1);
    let space = build_space(&c.vectors, &c.layout, 5).unwrap();
    let path = dir.path().join("space.st");
    space.save(&path).unwrap();
    let back = W2WSpace::load(&path).unwrap();
    assert_eq!(back.digest(), space.digest());
}

#[test]
fn single_class_and_unknown_ids() {
    let c = planted(0, 0.1);
    let space = build_space(&c.vectors, &c.layout, 5).unwrap();
    let mut all_pos = c.labels[0].clone();
    all_pos.labels.values_mut().for_each(|l| *l = Label::Positive);
    let err = train_direction(&space, &all_pos, &c.vectors, &DirectionParams::default());
    assert!(matches!(err, Err(Error::SingleClass { .. })));
    let mut stray: PreferenceLabelSet = c.labels[0].clone();
    stray.labels.insert("nobody".into(), Label::Positive);
    let err = train_direction(&space, &stray, &c.vectors, &DirectionParams::default());
    assert!(matches!(err, Err(Error::UnknownAdapter(_))));
}

#[test]
fn direction_invariants_and_negation() {
    let c = planted(4, 0.1);
    let (space, dir) = fit(&c, 5);
    let n: f64 = dir.v_coeff.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((n - 1.0).abs() < 1e-6);
    let full = space.basis.t().dot(&ndarray::ArrayView1::from(&dir.v_coeff));
    for (a, b) in full.iter().zip(&dir.v_full) {
        assert!((a - b).abs() < 1e-6);
    }
    let neg = train_direction(&space, &c.labels[0].negated(), &c.vectors, &DirectionParams::default()).unwrap();
    let cos: f64 = dir.v_coeff.iter().zip(&neg.v_coeff).map(|(a, b)| a * b).sum();
    assert!(cos <= -1.0 + 1e-6, "{cos}");
    let again = train_direction(&space, &c.labels[0], &c.vectors, &DirectionParams::default()).unwrap();
    assert_eq!(again, dir);
}

#[test]
fn positive_rescaling_keeps_training_decisions() {
    let c = planted(5, 0.1);
    let (space, dir) = fit(&c, 5);
    let scaled: Vec<WeightVector> = c
        .vectors
        .iter()
        .map(|v| WeightVector {
            theta: v.theta.iter().map(|x| x * 3.0).collect(),
            ..v.clone()
        })
        .collect();
    let space3 = build_space(&scaled, &c.layout, 5).unwrap();
    let dir3 = train_direction(&space3, &c.labels[0], &scaled, &DirectionParams::default()).unwrap();
    for (v, s) in c.vectors.iter().zip(&scaled) {
        if c.labels[0].labels[&v.adapter_id] == Label::Excluded {
            continue;
        }
        let a = dir.score(&space, v).unwrap();
        let b = dir3.score(&space3, s).unwrap();
        assert_eq!(a > 0.0, b > 0.0, "{}", v.adapter_id);
    }
}

#[test]
fn edits_are_linear_with_unit_slope() {
    let c = planted(6, 0.1);
    let (space, dir) = fit(&c, 5);
    let theta = &c.vectors[3];
    assert_eq!(&edit_theta(theta, &dir, 0.0).unwrap(), theta);
    let twice = edit_theta(&edit_theta(theta, &dir, 0.7).unwrap(), &dir, -1.9).unwrap();
    let once = edit_theta(theta, &dir, -1.2).unwrap();
    for (a, b) in twice.theta.iter().zip(&once.theta) {
        assert!((a - b).abs() <= 1e-5);
    }
    let curve = score_curve(&space, &dir, theta, &[-3.0, -1.0, 0.0, 0.5, 2.0, 4.0]).unwrap();
    assert!(curve.strictly_increasing);
    assert!((curve.slope - 1.0).abs() <= 1e-4);
    // edits stay in the affine span
    let edited = edit_theta(theta, &dir, 2.5).unwrap();
    let on_span = space.reconstruct(&space.project(theta).unwrap(), "x").unwrap();
    let edited_span = edit_theta(&on_span, &dir, 2.5).unwrap();
    let rec = space.reconstruct(&space.project(&edited_span).unwrap(), "x").unwrap();
    for (a, b) in rec.theta.iter().zip(&edited_span.theta) {
        assert!((a - b).abs() <= 1e-5);
    }
    assert_eq!(edited.theta.len(), theta.theta.len());
}

#[test]
fn space_mismatch_is_detected() {
    let c = planted(7, 0.1);
    let (_, dir) = fit(&c, 5);
    let other = gen_corpus(&SyntheticSpec {
        layers: w2w_core::synth::default_layers(3, 4, 4),
        ..SyntheticSpec::default()
    })
    .unwrap();
    assert!(matches!(
        edit_theta(&other.vectors[0], &dir, 1.0),
        Err(Error::SpaceMismatch(_))
    ));
}

#[test]
fn sweep_writes_one_adapter_per_alpha() {
    let spec = SyntheticSpec {
        geometry: Geometry::LayerScale,
        layers: w2w_core::synth::default_layers(8, 4, 4),
        ..SyntheticSpec::default()
    };
    let c = gen_corpus(&spec).unwrap();
    let (space, dir) = fit(&c, 5);
    let out = tempfile::tempdir().unwrap();
    let theta = &c.vectors[0];
    let alphas = [-1.0, -0.5, 0.0, 0.25, 0.5];
    let written = edit_sweep(theta, &dir, &alphas, &c.layout, "sd-test", out.path()).unwrap();
    assert_eq!(written.len(), 5);
    let direct = export_rank1(&unflatten(theta, &c.layout).unwrap()).unwrap();
    let mut last = f64::NEG_INFINITY;
    for (alpha, path) in &written {
        assert!(path
            .file_name()
            .unwrap()
            .to_str()
            .unwrap()
            .contains(&format!("alpha_{alpha}")));
        let bundle = load_adapter(path).unwrap();
        if *alpha == 0.0 {
            assert_eq!(bundle.layers, direct.layers);
        }
        let reduced = reduce_adapter(&bundle, &LayerSelection::all(), &SvdOptions::default()).unwrap();
        let score = dir.score(&space, &flatten(&reduced, &c.layout).unwrap()).unwrap();
        assert!(score > last);
        last = score;
    }
}

#[test]
fn multi_user_edits_cross_only_their_own_hyperplane() {
    let spec = SyntheticSpec {
        m_true: 3,
        noise: 0.0,
        ..SyntheticSpec::default()
    };
    let c = gen_multi_user(&spec, 3).unwrap();
    let space = build_space(&c.vectors, &c.layout, 3).unwrap();
    let params = DirectionParams {
        holdout_fraction: 0.0,
        ..DirectionParams::default()
    };
    let dirs: Vec<EditDirection> = c
        .labels
        .iter()
        .map(|l| train_direction(&space, l, &c.vectors, &params).unwrap())
        .collect();
    let theta = &c.vectors[5];
    let scores: Vec<f64> = dirs.iter().map(|d| d.score(&space, theta).unwrap()).collect();
    for (i, d) in dirs.iter().enumerate() {
        let before = edit_theta(theta, d, -scores[i] - 1e-3).unwrap();
        let after = edit_theta(theta, d, -scores[i] + 1e-3).unwrap();
        assert!(d.score(&space, &before).unwrap() < 0.0 && d.score(&space, &after).unwrap() > 0.0);
        let at = edit_theta(theta, d, -scores[i]).unwrap();
        assert!(d.score(&space, &at).unwrap().abs() <= 1e-4);
        for (k, o) in dirs.iter().enumerate().filter(|(k, _)| *k != i) {
            assert!((o.score(&space, &at).unwrap() - scores[k]).abs() <= 1e-6);
        }
    }
    let edits = multi_direction_edit(theta, &dirs, &[1.0, 2.0, 3.0]).unwrap();
    assert_eq!(edits.len(), 3);
    assert!(multi_direction_edit(theta, &[], &[]).unwrap().is_empty());
}

#[test]
fn generation_is_deterministic() {
    let a = planted(9, 0.1);
    let b = planted(9, 0.1);
    assert_eq!(a, b);
    let (sa, da) = fit(&a, 5);
    let (sb, db) = fit(&b, 5);
    assert_eq!(sa.digest(), sb.digest());
    assert_eq!(da, db);
}
