//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use w2w_core::adapter::{load_adapter, save_adapter, AdapterBundle, LoraLayer};
use w2w_core::direction::{edit_theta, train_direction, DirectionParams, EditDirection};
use w2w_core::linalg::{top1_svd, DenseOp, SvdOptions};
use w2w_core::preference::{
    cluster_embeddings, label_corpus, select_representatives, ClusterParams, EmbeddingTable, Label, Modality,
    Thresholds,
};
use w2w_core::reduction::{
    export_rank1, flatten, make_layout, reduce_adapter, unflatten, LayerSelection, WeightVector,
};
use w2w_core::space::{build_space, build_space_with, PcaMethod};
use w2w_core::synth::{default_layers, gen_corpus, gen_multi_user, recovery_report, score_curve, SyntheticSpec};
use w2w_oracle::{best_rank1, dot, exhaustive_rank, frobenius, jacobi_svd, outer, scale, sub, Mat, SplitMix};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn to_array(m: &Mat) -> Array2<f64> {
    Array2::from_shape_fn((m.len(), m[0].len()), |(i, j)| m[i][j])
}

fn to_mat(a: &Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let took = start.elapsed();
    ensure!(took < limit, "took {took:.2?}, limit {limit:?}");
    Ok(took)
}

fn svd_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = SplitMix::new(2024);
    let mut worst_sigma = 0.0f64;
    let mut worst_cos = 1.0f64;
    for trial in 0..500u64 {
        let rows = 1 + (rng.next_u64() % 32) as usize;
        let cols = 1 + (rng.next_u64() % 32) as usize;
        let m = rng.normal_matrix(rows, cols);
        let oracle = jacobi_svd(&m);
        let t = top1_svd(
            &DenseOp(to_array(&m).view()),
            &SvdOptions {
                seed: trial,
                ..Default::default()
            },
        )
        .map_err(|e| format!("trial {trial}: {e}"))?;
        let fro = frobenius(&m);
        let ds = (t.sigma - oracle.sigma[0]).abs() / fro;
        let cu = dot(&t.u, &oracle.u[0]).abs();
        ensure!(ds <= 1e-6, "trial {trial} ({rows}x{cols}): sigma error {ds:e}·‖M‖");
        ensure!(cu >= 1.0 - 1e-6, "trial {trial} ({rows}x{cols}): |<u,u*>| = {cu}");
        worst_sigma = worst_sigma.max(ds);
        worst_cos = worst_cos.min(cu);
    }
    let took = within(Duration::from_secs(10), start)?;
    Ok(format!(
        "500 matrices, worst sigma error {worst_sigma:.1e}·‖M‖, worst |<u,u*>| {worst_cos:.9}, {took:.2?}"
    ))
}

fn eckart_young() -> Outcome {
    let start = Instant::now();
    let mut rng = SplitMix::new(77);
    let trials = 50;
    for trial in 0..trials {
        let rows = 2 + (rng.next_u64() % 15) as usize;
        let cols = 2 + (rng.next_u64() % 15) as usize;
        let m = rng.normal_matrix(rows, cols);
        let t = top1_svd(&DenseOp(to_array(&m).view()), &SvdOptions::default()).map_err(|e| e.to_string())?;
        let err = frobenius(&sub(&m, &to_mat(&t.outer())));
        let oracle = frobenius(&sub(&m, &best_rank1(&m)));
        ensure!((err - oracle).abs() <= 1e-6, "trial {trial}: {err} vs oracle {oracle}");
        for c in 0..100 {
            // half the competitors are small perturbations of the optimum
            let competitor = if c % 2 == 0 {
                let s = rng.uniform() * 2.0 * frobenius(&m);
                scale(&outer(&rng.unit_vector(rows), &rng.unit_vector(cols)), s)
            } else {
                let eps = 1e-3;
                let u: Vec<f64> = t.u.iter().map(|x| x + eps * rng.normal()).collect();
                let v: Vec<f64> = t.v.iter().map(|x| x + eps * rng.normal()).collect();
                scale(&outer(&u, &v), t.sigma * (1.0 + eps * rng.normal()))
            };
            let cerr = frobenius(&sub(&m, &competitor));
            ensure!(err <= cerr + 1e-6, "trial {trial}, competitor {c}: {err} > {cerr}");
        }
    }
    let took = within(Duration::from_secs(5), start)?;
    Ok(format!("{trials} trials x 100 competitors, {took:.2?}"))
}

fn random_adapter(id: &str, rng: &mut SplitMix, r: usize) -> AdapterBundle {
    let shapes = [
        ("unet.down.0.attn.to_v", 12, 10),
        ("unet.mid.ff", 16, 8),
        ("text.enc.0.attn.to_v", 9, 9),
    ];
    let layers: BTreeMap<String, LoraLayer> = shapes
        .iter()
        .map(|&(name, d, k)| {
            let down = Array2::from_shape_fn((r, k), |_| rng.normal() as f32);
            let up = Array2::from_shape_fn((d, r), |_| rng.normal() as f32);
            (name.to_string(), LoraLayer::new(down, up))
        })
        .collect();
    let mut b = AdapterBundle::from_layers(id, layers, 8.0, "sd-test").unwrap();
    b.metadata.insert("alpha".into(), "8".into());
    b
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = SplitMix::new(3);
    let opts = SvdOptions::default();
    let mut reduced = Vec::new();
    for i in 0..4 {
        let bundle = random_adapter(&format!("a{i}"), &mut rng, 4);
        let p1 = dir.path().join(format!("a{i}.safetensors"));
        let p2 = dir.path().join(format!("a{i}-again.safetensors"));
        save_adapter(&bundle, &p1).map_err(|e| e.to_string())?;
        let loaded = load_adapter(&p1).map_err(|e| e.to_string())?;
        ensure!(loaded.layers == bundle.layers, "a{i}: tensors changed on load");
        save_adapter(&loaded, &p2).map_err(|e| e.to_string())?;
        ensure!(
            std::fs::read(&p1).ok() == std::fs::read(&p2).ok(),
            "a{i}: file bytes differ after a second save"
        );
        reduced.push(reduce_adapter(&loaded, &LayerSelection::all(), &opts).map_err(|e| e.to_string())?);
    }
    let layout = make_layout(&reduced).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for r in &reduced {
        let theta = flatten(r, &layout).map_err(|e| e.to_string())?;
        let back =
            flatten(&unflatten(&theta, &layout).map_err(|e| e.to_string())?, &layout).map_err(|e| e.to_string())?;
        for (a, b) in theta.theta.iter().zip(&back.theta) {
            worst = worst.max(((a - b).abs() / (1.0 + a.abs())) as f64);
        }
        let again = reduce_adapter(
            &export_rank1(r).map_err(|e| e.to_string())?,
            &LayerSelection::all(),
            &opts,
        )
        .map_err(|e| e.to_string())?;
        for (name, t) in &r.triplets {
            let u = &again.triplets[name];
            let ds = (t.sigma - u.sigma).abs() / t.sigma.max(1.0);
            let cu = dot(&t.u, &u.u);
            let cv = dot(&t.v, &u.v);
            ensure!(
                ds <= 1e-6 && cu >= 1.0 - 1e-6 && cv >= 1.0 - 1e-6,
                "rank-1 fixpoint broken on {name}"
            );
        }
    }
    ensure!(worst <= 1e-6, "flatten/unflatten drift {worst:e}");

    let c = gen_corpus(&SyntheticSpec {
        seed: 5,
        ..SyntheticSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let space = build_space(&c.vectors, &c.layout, 5).map_err(|e| e.to_string())?;
    let mut worst_p = 0.0f64;
    for v in c.vectors.iter().take(50) {
        let coeffs = space.project(v).map_err(|e| e.to_string())?;
        let rec = space.reconstruct(&coeffs, &v.adapter_id).map_err(|e| e.to_string())?;
        let again = space.project(&rec).map_err(|e| e.to_string())?;
        for (a, b) in coeffs.iter().zip(&again) {
            worst_p = worst_p.max((a - b).abs() / (1.0 + a.abs()));
        }
    }
    // reconstruction rounds to f32, so the identity holds to that precision
    ensure!(worst_p <= 1e-6, "project/reconstruct/project drift {worst_p:e}");
    Ok(format!(
        "file I/O bit-exact, flatten drift {worst:.1e}, projection drift {worst_p:.1e}"
    ))
}

fn pca_dual_path() -> Outcome {
    let mut rng = SplitMix::new(19);
    let mut checked = 0;
    for (n, layers) in [(10usize, 1usize), (20, 2), (40, 4), (40, 8), (25, 8), (33, 3)] {
        let base = gen_corpus(&SyntheticSpec {
            seed: rng.next_u64(),
            n,
            m_true: 3,
            layers: default_layers(layers, 4, 4),
            ..SyntheticSpec::default()
        })
        .map_err(|e| e.to_string())?;
        ensure!(base.layout.total_dim <= 64, "D = {}", base.layout.total_dim);
        // replace the planted structure with isotropic noise plus a spread spectrum
        let d = base.layout.total_dim;
        let weights: Vec<f64> = (0..d).map(|j| 1.0 + 3.0 / (1.0 + j as f64)).collect();
        let vectors: Vec<WeightVector> = base
            .vectors
            .iter()
            .map(|v| {
                let theta = weights.iter().map(|w| (w * rng.normal()) as f32).collect();
                WeightVector::new(v.adapter_id.clone(), theta, &base.layout).unwrap()
            })
            .collect();
        let m = (n - 1).min(d).min(8);
        let g = build_space_with(&vectors, &base.layout, m, PcaMethod::Gram).map_err(|e| e.to_string())?;
        let c = build_space_with(&vectors, &base.layout, m, PcaMethod::Covariance).map_err(|e| e.to_string())?;
        for (j, (a, b)) in g.eigenvalues.iter().zip(&c.eigenvalues).enumerate() {
            ensure!(
                (a - b).abs() <= 1e-6 * a.abs(),
                "N={n} D={d}: eigenvalue {j} {a} vs {b}"
            );
        }
        for j in 0..m {
            let cos = g.basis.row(j).dot(&c.basis.row(j)).abs();
            ensure!(cos >= 1.0 - 1e-6, "N={n} D={d}: component {j} |cos| {cos}");
        }
        checked += 1;
    }
    Ok(format!("{checked} corpora with N <= 40, D <= 64"))
}

fn planted_recovery() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    for seed in 0..3 {
        let spec = SyntheticSpec {
            seed,
            n: 200,
            m_true: 5,
            separation: 2.0,
            noise: 0.1,
            ..SyntheticSpec::default()
        };
        let c = gen_corpus(&spec).map_err(|e| e.to_string())?;
        let space = build_space(&c.vectors, &c.layout, 5).map_err(|e| e.to_string())?;
        let dir = train_direction(&space, &c.labels[0], &c.vectors, &DirectionParams::default())
            .map_err(|e| e.to_string())?;
        let r = recovery_report(&space, Some(&dir), &c.truth, &c.vectors).map_err(|e| e.to_string())?;
        let cos = r.direction_cosine.unwrap_or(0.0);
        let acc = r.heldout_accuracy.unwrap_or(0.0);
        ensure!(
            r.max_angle_deg <= 5.0,
            "seed {seed}: max angle {:.3} deg",
            r.max_angle_deg
        );
        ensure!(cos >= 0.95, "seed {seed}: |cos(v, g)| = {cos}");
        ensure!(acc >= 0.95, "seed {seed}: held-out accuracy {acc}");
        for theta in c.vectors.iter().step_by(40) {
            let curve =
                score_curve(&space, &dir, theta, &[-3.0, -1.5, 0.0, 0.5, 1.0, 2.5]).map_err(|e| e.to_string())?;
            ensure!(
                curve.strictly_increasing,
                "seed {seed}: curve not increasing for {}",
                theta.adapter_id
            );
            ensure!((curve.slope - 1.0).abs() <= 1e-4, "seed {seed}: slope {}", curve.slope);
        }
        lines.push(format!(
            "seed {seed}: angle {:.2} deg, cos {cos:.4}, acc {acc:.3}",
            r.max_angle_deg
        ));
    }
    let took = within(Duration::from_secs(60), start)?;
    Ok(format!("{}; {took:.2?}", lines.join("; ")))
}

fn threshold_semantics() -> Outcome {
    let triples = [
        ("a", 0.25, 0.30, 0.10, Label::Positive),
        ("b", 0.25, 0.27, 0.26, Label::Excluded),
        ("c", 0.10, 0.90, 0.0, Label::Excluded),
    ];
    let map =
        |k: usize| -> BTreeMap<String, f64> { triples.iter().map(|t| (t.0.to_string(), [t.1, t.2, t.3][k])).collect() };
    let set =
        label_corpus("acceptance", &map(0), &map(1), &map(2), Thresholds::default()).map_err(|e| e.to_string())?;
    for (id, g, p, n, want) in triples {
        let got = set.labels[id];
        ensure!(got == want, "({g}, {p}, {n}) labelled {got:?}, expected {want:?}");
    }
    Ok("+1 / excluded / excluded".into())
}

fn multi_user_isolation() -> Outcome {
    let spec = SyntheticSpec {
        seed: 12,
        m_true: 3,
        noise: 0.0,
        ..SyntheticSpec::default()
    };
    let c = gen_multi_user(&spec, 3).map_err(|e| e.to_string())?;
    let space = build_space(&c.vectors, &c.layout, 3).map_err(|e| e.to_string())?;
    let params = DirectionParams {
        holdout_fraction: 0.0,
        ..DirectionParams::default()
    };
    let dirs: Vec<EditDirection> = c
        .labels
        .iter()
        .map(|l| train_direction(&space, l, &c.vectors, &params))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut worst_cross = 0.0f64;
    let mut worst_zero = 0.0f64;
    for theta in c.vectors.iter().step_by(25) {
        let scores: Vec<f64> = dirs.iter().map(|d| d.score(&space, theta).unwrap()).collect();
        for (i, d) in dirs.iter().enumerate() {
            let at = edit_theta(theta, d, -scores[i]).map_err(|e| e.to_string())?;
            let zero = d.score(&space, &at).map_err(|e| e.to_string())?.abs();
            ensure!(zero <= 1e-4, "user {i}: score {zero:e} at the crossing");
            let below = d
                .score(&space, &edit_theta(theta, d, -scores[i] - 1e-3).unwrap())
                .unwrap();
            let above = d
                .score(&space, &edit_theta(theta, d, -scores[i] + 1e-3).unwrap())
                .unwrap();
            ensure!(
                below < 0.0 && above > 0.0,
                "user {i}: sign does not flip at the crossing"
            );
            worst_zero = worst_zero.max(zero);
            for (k, o) in dirs.iter().enumerate().filter(|(k, _)| *k != i) {
                let drift = (o.score(&space, &at).unwrap() - scores[k]).abs();
                ensure!(drift <= 1e-6, "editing user {i} moved user {k} by {drift:e}");
                worst_cross = worst_cross.max(drift);
            }
        }
    }
    Ok(format!(
        "3 users, crossing residual {worst_zero:.1e}, cross-user drift {worst_cross:.1e}"
    ))
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    d / (na * nb)
}

fn clustering_oracle() -> Outcome {
    for seed in 0..5 {
        let mut rng = SplitMix::new(100 + seed);
        let a = rng.unit_vector(16);
        let mut b = rng.unit_vector(16);
        let p = dot(&a, &b);
        b.iter_mut().zip(&a).for_each(|(y, x)| *y -= p * x);
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        b.iter_mut().for_each(|y| *y /= nb);
        let mut truth = BTreeMap::new();
        let mut pairs = Vec::new();
        for (tag, centre, count, cluster) in [("a", &a, 30, 0usize), ("b", &b, 20, 1)] {
            for i in 0..count {
                let id = format!("{tag}{i:02}");
                pairs.push((
                    id.clone(),
                    centre
                        .iter()
                        .map(|c| (c + 0.03 * rng.normal()) as f32)
                        .collect::<Vec<f32>>(),
                ));
                truth.insert(id, cluster);
            }
        }
        let table = EmbeddingTable::from_pairs(Modality::Image, "blobs", pairs).map_err(|e| e.to_string())?;
        let result = cluster_embeddings(&table, &ClusterParams::default()).map_err(|e| e.to_string())?;
        ensure!(
            result.cluster_count() == 2,
            "seed {seed}: {} clusters",
            result.cluster_count()
        );
        for (id, c) in &result.assignment {
            ensure!(*c == Some(truth[id]), "seed {seed}: {id} assigned {c:?}");
        }
        let mean = result.representative_mean();
        let scored: Vec<(String, f64)> = result
            .members(result.representative)
            .into_iter()
            .map(|id| (id.to_string(), cosine(table.get(id).unwrap(), mean)))
            .collect();
        let oracle: Vec<String> = exhaustive_rank(&scored).into_iter().take(9).map(|(id, _)| id).collect();
        ensure!(
            select_representatives(&result, &table, 9) == oracle,
            "seed {seed}: representatives differ from the exhaustive sort"
        );
    }
    Ok("5 seeds, labels and top-9 representatives exact".into())
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_w2w"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn pipeline_run(dir: &Path) -> Result<(), String> {
    std::fs::write(
        dir.join("w2w.toml"),
        "[paths]\nmanifest = \"syn/manifest.jsonl\"\noutput = \"run\"\n[space]\nm = 5\n[direction]\nseed = 3\n",
    )
    .map_err(|e| e.to_string())?;
    let cfg = ["--config", "w2w.toml"];
    let steps: [&[&str]; 7] = [
        &["gen-synthetic", "--out", "syn", "--seed", "21"],
        &["reduce"],
        &["build-space"],
        &[
            "learn-direction",
            "--space",
            "run/space.st",
            "--corpus",
            "run/corpus",
            "--labels",
            "syn/labels.json",
            "--out",
            "run/dir.json",
        ],
        &[
            "sweep",
            "--direction",
            "run/dir.json",
            "--space",
            "run/space.st",
            "--corpus",
            "run/corpus",
            "--id",
            "syn-00004",
            "--alphas=-1,0,0.5,1",
            "--out-dir",
            "run/sweep",
        ],
        &[
            "report",
            "recovery",
            "--space",
            "run/space.st",
            "--direction",
            "run/dir.json",
            "--truth",
            "syn/ground_truth.json",
            "--corpus",
            "run/corpus",
            "--out",
            "run/recovery.json",
        ],
        &["gen-synthetic", "--out", "multi", "--users", "3", "--noise", "0"],
    ];
    for step in steps {
        let args: Vec<&str> = cfg.iter().chain(step.iter()).copied().collect();
        run_cli(dir, &args)?;
    }
    Ok(())
}

fn files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            files(root, &path, out);
        } else {
            out.push(path.strip_prefix(root).unwrap().to_path_buf());
        }
    }
}

/// Provenance records are compared without their timestamp.
fn comparable(root: &Path, rel: &Path) -> Vec<u8> {
    let bytes = std::fs::read(root.join(rel)).unwrap();
    let name = rel.file_name().unwrap().to_string_lossy();
    if name == "provenance.json" || name.ends_with(".provenance.json") {
        let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        v.as_object_mut().unwrap().remove("created_unix");
        serde_json::to_vec(&v).unwrap()
    } else {
        bytes
    }
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    pipeline_run(a.path())?;
    pipeline_run(b.path())?;
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    files(a.path(), a.path(), &mut fa);
    files(b.path(), b.path(), &mut fb);
    fa.sort();
    fb.sort();
    ensure!(fa == fb, "the two runs wrote different file sets");
    for rel in &fa {
        ensure!(
            comparable(a.path(), rel) == comparable(b.path(), rel),
            "{} differs between runs",
            rel.display()
        );
    }
    Ok(format!("{} artifacts byte-identical across two runs", fa.len()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("top-1 SVD matches the Jacobi oracle", svd_oracle),
        ("rank-1 reduction beats random competitors", eckart_young),
        ("round trips", round_trips),
        ("Gram and covariance PCA agree", pca_dual_path),
        ("planted subspace and direction recovery", planted_recovery),
        ("threshold labelling", threshold_semantics),
        ("multi-user isolation", multi_user_isolation),
        ("two-blob clustering and representatives", clustering_oracle),
        ("byte-identical reruns", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(msg)
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name} ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name} ({why})", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
