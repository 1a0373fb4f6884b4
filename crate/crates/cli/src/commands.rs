use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use w2w_core::adapter::{bundle_from_archive, load_adapter, save_adapter, NamingPatterns};
use w2w_core::archive::TensorArchive;
use w2w_core::direction::{edit_sweep, edit_theta, train_direction, DirectionParams, EditDirection};
use w2w_core::embed::{
    fetch_embeddings, EmbedItem, EmbedRequest, HttpTransport, Payload, RetryPolicy, TOKEN_ENV, URL_ENV,
};
use w2w_core::io::{file_sha256, read_json, write_json_atomic};
use w2w_core::linalg::SvdOptions;
use w2w_core::preference::{
    cluster_embeddings, label_by_quantile, label_corpus, read_grouped_jsonl, score_corpus, select_representatives,
    ClusterParams, EmbeddingTable, Modality, PreferenceLabelSet, Thresholds,
};
use w2w_core::reduction::{
    export_rank1, filter_corpus, flatten, read_manifest, reduce_adapter, reduce_corpus, unflatten, write_manifest,
    CorpusFilter, LayerSelection, ManifestEntry, ReducedCorpus, WeightVector,
};
use w2w_core::space::{build_space_with, default_components, sidecar_path, PcaMethod, W2WSpace};
use w2w_core::synth::{
    default_layers, fidelity_report, gen_corpus, gen_multi_user, rank_by_similarity, recovery_report, score_curve,
    Geometry, SyntheticSpec,
};
use w2w_core::Error;

use crate::args::*;
use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::provenance::{write_record, DIR_RECORD};

pub struct Context {
    pub config: PipelineConfig,
    pub config_path: Option<PathBuf>,
}

fn print_json<T: Serialize>(value: &T) -> CliResult {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn require(flag: Option<PathBuf>, fallback: Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    flag.or(fallback)
        .ok_or_else(|| CliError::usage(format!("{what} is required (flag or config)")))
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Domain(Error::io(dir, e)))
}

fn svd_options(cfg: &PipelineConfig) -> SvdOptions {
    SvdOptions {
        tol: cfg.reduction.svd_tol,
        max_iter: cfg.reduction.svd_max_iter,
        seed: cfg.reduction.svd_seed,
    }
}

fn layer_selection(s: &str) -> CliResult<LayerSelection> {
    LayerSelection::parse_list(s).map_err(|e| CliError::usage(format!("--layers: {e}")))
}

pub fn run(command: Command, ctx: &Context) -> CliResult {
    match command {
        Command::Inspect(a) => inspect(&a),
        Command::Validate => validate(ctx),
        Command::Reduce(a) => reduce(a, ctx),
        Command::BuildSpace(a) => build_space(a, ctx),
        Command::Label(a) => label(a, ctx),
        Command::LearnDirection(a) => learn_direction(a, ctx),
        Command::Edit(a) => edit(a, ctx),
        Command::Sweep(a) => sweep(a, ctx),
        Command::GenSynthetic(a) => gen_synthetic(&a),
        Command::Report { kind } => report(kind),
        Command::FetchEmbeds(a) => fetch_embeds(a, ctx),
    }
}

fn inspect(a: &InspectArgs) -> CliResult {
    let archive = TensorArchive::read(&a.path)?;
    let tensors: Vec<_> = archive
        .tensors()
        .iter()
        .map(|(name, info)| json!({ "name": name, "dtype": info.dtype.tag(), "shape": info.shape }))
        .collect();
    let id = a.path.file_stem().and_then(|s| s.to_str()).unwrap_or("adapter");
    let adapter = match bundle_from_archive(&archive, id, &NamingPatterns::default()) {
        Ok(b) => json!({
            "adapter_id": b.adapter_id,
            "rank": b.rank,
            "network_alpha": b.network_alpha,
            "alpha_source": b.alpha_source,
            "base_model": b.base_model,
            "layers": b.layers.len(),
        }),
        Err(e) => json!({ "error": e.kind(), "message": e.to_string() }),
    };
    print_json(&json!({
        "path": a.path,
        "sha256": file_sha256(&a.path)?,
        "metadata": archive.metadata(),
        "tensors": tensors,
        "adapter": adapter,
    }))
}

fn validate(ctx: &Context) -> CliResult {
    ctx.config.validate()?;
    let missing = ctx.config.missing_inputs();
    if !missing.is_empty() {
        return Err(CliError::usage(missing.join("; ")));
    }
    let mut entries = None;
    if let Some(m) = &ctx.config.paths.manifest {
        let manifest = read_manifest(m)?;
        if let Some(missing) = manifest.iter().find(|e| !e.path.exists()) {
            return Err(CliError::Domain(Error::io(
                &missing.path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "manifest entry not found"),
            )));
        }
        entries = Some(manifest.len());
    }
    print_json(&json!({
        "ok": true,
        "config": ctx.config_path,
        "manifest_entries": entries,
    }))
}

fn reduce(a: ReduceArgs, ctx: &Context) -> CliResult {
    let cfg = &ctx.config;
    let manifest_path = require(a.manifest, cfg.paths.manifest.clone(), "--manifest")?;
    let out = require(a.out, cfg.paths.output.as_ref().map(|o| o.join("corpus")), "--out")?;
    let layers = layer_selection(a.layers.as_deref().unwrap_or(&cfg.reduction.layers))?;
    let filter = CorpusFilter {
        rank: a.rank.or(cfg.reduction.rank),
        base_model: a.base_model.or_else(|| cfg.reduction.base_model.clone()),
        layers: layers.clone(),
    };
    let manifest = read_manifest(&manifest_path)?;
    let kept = filter_corpus(&manifest, &filter)?;
    log::info!("reducing {} of {} adapters", kept.len(), manifest.len());
    let opts = svd_options(cfg);
    let reduced = reduce_corpus(&kept, &NamingPatterns::default(), &layers, &opts)?;
    let corpus = ReducedCorpus::from_reduced(&reduced)?;
    corpus.save(&out)?;

    let params = json!({
        "layers": layers.to_string(),
        "rank": filter.rank,
        "base_model": filter.base_model,
        "svd": opts,
    });
    let mut inputs: Vec<&Path> = vec![&manifest_path];
    inputs.extend(kept.iter().map(|e| e.path.as_path()));
    write_record("reduce", &params, &inputs, &[&out], &out)?;
    print_json(&json!({
        "out": out,
        "adapters": corpus.vectors.len(),
        "layers": corpus.layout.segments.len(),
        "dim": corpus.layout.total_dim,
        "layout_hash": corpus.layout.hash,
    }))
}

fn build_space(a: BuildSpaceArgs, ctx: &Context) -> CliResult {
    let cfg = &ctx.config;
    let out_root = cfg.paths.output.clone();
    let corpus_dir = require(a.corpus, out_root.as_ref().map(|o| o.join("corpus")), "--corpus")?;
    let out = require(a.out, out_root.as_ref().map(|o| o.join("space.st")), "--out")?;
    let corpus = ReducedCorpus::load(&corpus_dir)?;
    let m =
        a.m.or(cfg.space.m)
            .unwrap_or_else(|| default_components(corpus.vectors.len()));
    let method = match a.method {
        Method::Auto => PcaMethod::Auto,
        Method::Gram => PcaMethod::Gram,
        Method::Covariance => PcaMethod::Covariance,
    };
    let space = build_space_with(&corpus.vectors, &corpus.layout, m, method)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    space.save(&out)?;
    if space.rank_deficient {
        log::warn!("only {} of {} requested components carry variance", space.m(), m);
    }
    let sidecar = sidecar_path(&out);
    write_record(
        "build-space",
        &json!({ "m": m, "method": format!("{:?}", a.method).to_lowercase() }),
        &[&corpus_dir],
        &[&out, &sidecar],
        &out,
    )?;
    let explained: f64 = space.eigenvalues.iter().sum::<f64>() / space.total_variance.max(f64::MIN_POSITIVE);
    print_json(&json!({
        "out": out,
        "m": space.m(),
        "requested_m": m,
        "rank_deficient": space.rank_deficient,
        "explained_variance": explained,
        "digest": space.digest(),
    }))
}

#[derive(Serialize)]
struct ClusterSummary<'a> {
    sizes: &'a [usize],
    representative: usize,
    noise: usize,
    representatives: Vec<String>,
    mean: &'a [f32],
}

fn label(a: LabelArgs, ctx: &Context) -> CliResult {
    let cfg = &ctx.config.labels;
    let examples_path = require(a.examples, ctx.config.paths.embeddings.clone(), "--examples")?;
    let out = require(
        a.out,
        ctx.config
            .paths
            .output
            .as_ref()
            .map(|o| o.join(format!("labels-{}.json", a.user))),
        "--out",
    )?;
    let examples = read_grouped_jsonl(&examples_path, Modality::Image)?;
    let mut inputs: Vec<PathBuf> = vec![examples_path.clone()];
    let (set, params) = match a.mode {
        LabelMode::Threshold => {
            let prompts_path = a
                .prompts
                .ok_or_else(|| CliError::usage("--prompts is required in threshold mode"))?;
            let prompts = EmbeddingTable::read_jsonl(&prompts_path, Modality::Text)?;
            let prompt = |id: &str| {
                prompts
                    .get(id)
                    .ok_or_else(|| CliError::Domain(Error::InvalidInput(format!("prompt table lacks `{id}`"))))
            };
            let thresholds = Thresholds {
                gate: a.gate.unwrap_or(cfg.gate),
                positive: a.positive.unwrap_or(cfg.positive),
                negative: a.negative.unwrap_or(cfg.negative),
            };
            let gate = score_corpus(&examples, prompt("gate")?)?;
            let pos = score_corpus(&examples, prompt("positive")?)?;
            let neg = score_corpus(&examples, prompt("negative")?)?;
            inputs.push(prompts_path);
            let set = label_corpus(&a.user, &gate, &pos, &neg, thresholds)?;
            (set, json!({ "mode": "threshold", "thresholds": thresholds }))
        }
        LabelMode::User => {
            let pref_path = a
                .preference
                .ok_or_else(|| CliError::usage("--preference is required in user mode"))?;
            let preference = EmbeddingTable::read_jsonl(&pref_path, Modality::Image)?;
            let params = ClusterParams {
                min_cluster_size: a.min_cluster_size.unwrap_or(cfg.min_cluster_size),
                min_samples: a.min_samples.unwrap_or(cfg.min_samples),
            };
            let k = a.representatives.unwrap_or(cfg.representatives);
            let q = a.quantile.unwrap_or(cfg.quantile);
            let clusters = cluster_embeddings(&preference, &params)?;
            let reps = select_representatives(&clusters, &preference, k);
            let scores = score_corpus(&examples, clusters.representative_mean())?;
            let set = label_by_quantile(&a.user, &scores, q)?;
            let summary = ClusterSummary {
                sizes: &clusters.sizes,
                representative: clusters.representative,
                noise: clusters.noise().len(),
                representatives: reps,
                mean: clusters.representative_mean(),
            };
            let cluster_out = out.with_extension("cluster.json");
            write_json_atomic(&cluster_out, &summary)?;
            inputs.push(pref_path);
            (
                set,
                json!({ "mode": "user", "cluster": params, "representatives": k, "quantile": q }),
            )
        }
    };
    write_json_atomic(&out, &set)?;
    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    write_record("label", &params, &input_refs, &[&out], &out)?;
    print_json(&json!({
        "out": out,
        "user": set.user_id,
        "positive": set.count(w2w_core::preference::Label::Positive),
        "negative": set.count(w2w_core::preference::Label::Negative),
        "excluded": set.count(w2w_core::preference::Label::Excluded),
    }))
}

fn learn_direction(a: LearnArgs, ctx: &Context) -> CliResult {
    let cfg = &ctx.config.direction;
    let space = W2WSpace::load(&a.space)?;
    let corpus = ReducedCorpus::load(&a.corpus)?;
    let labels = PreferenceLabelSet::read(&a.labels)?;
    let params = DirectionParams {
        lambda: a.lambda.unwrap_or(cfg.lambda),
        seed: a.seed.unwrap_or(cfg.seed),
        holdout_fraction: a.holdout.unwrap_or(cfg.holdout),
        max_iter: cfg.max_iter,
        ..DirectionParams::default()
    };
    let dir = train_direction(&space, &labels, &corpus.vectors, &params)?;
    if !dir.metrics.converged {
        log::warn!("direction did not reach the gradient tolerance; using the best iterate");
    }
    dir.save(&a.out)?;
    let vectors = w2w_core::direction::vectors_path(&a.out);
    write_record(
        "learn-direction",
        &params,
        &[&a.space, &a.corpus, &a.labels],
        &[&a.out, &vectors],
        &a.out,
    )?;
    print_json(&json!({ "out": a.out, "bias": dir.bias, "metrics": dir.metrics }))
}

struct Loaded {
    space: W2WSpace,
    direction: EditDirection,
    theta: WeightVector,
    base_model: String,
    inputs: Vec<PathBuf>,
}

fn load_target(t: &Target, ctx: &Context) -> CliResult<Loaded> {
    let space = W2WSpace::load(&t.space)?;
    let direction = EditDirection::load(&t.direction)?;
    direction.check_space(&space)?;
    let mut inputs = vec![t.space.clone(), t.direction.clone()];
    let (theta, base_model) = match (&t.adapter, &t.corpus, &t.id) {
        (Some(path), _, _) => {
            let bundle = load_adapter(path)?;
            let layers = layer_selection(&ctx.config.reduction.layers)?;
            let reduced = reduce_adapter(&bundle, &layers, &svd_options(&ctx.config))?;
            inputs.push(path.clone());
            (flatten(&reduced, &space.layout)?, bundle.base_model)
        }
        (None, Some(corpus_dir), Some(id)) => {
            let corpus = ReducedCorpus::load(corpus_dir)?;
            let theta = corpus
                .get(id)
                .cloned()
                .ok_or_else(|| CliError::Domain(Error::UnknownAdapter(id.clone())))?;
            inputs.push(corpus_dir.clone());
            (theta, "unknown".to_string())
        }
        _ => return Err(CliError::usage("give either --adapter or --corpus with --id")),
    };
    let base_model = t.base_model.clone().unwrap_or(base_model);
    Ok(Loaded {
        space,
        direction,
        theta,
        base_model,
        inputs,
    })
}

fn edit(a: EditArgs, ctx: &Context) -> CliResult {
    if !a.alpha.is_finite() {
        return Err(CliError::usage("--alpha must be finite"));
    }
    let l = load_target(&a.target, ctx)?;
    let edited = edit_theta(&l.theta, &l.direction, a.alpha)?;
    let mut reduced = unflatten(&edited, &l.space.layout)?;
    reduced.base_model = l.base_model.clone();
    let mut bundle = export_rank1(&reduced)?;
    bundle.metadata.insert("w2w_edit_alpha".into(), a.alpha.to_string());
    bundle
        .metadata
        .insert("w2w_space_digest".into(), l.direction.space.space_digest.clone());
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_adapter(&bundle, &a.out)?;
    let inputs: Vec<&Path> = l.inputs.iter().map(PathBuf::as_path).collect();
    write_record(
        "edit",
        &json!({ "alpha": a.alpha, "adapter_id": l.theta.adapter_id }),
        &inputs,
        &[&a.out],
        &a.out,
    )?;
    print_json(&json!({
        "out": a.out,
        "alpha": a.alpha,
        "score_before": l.direction.score(&l.space, &l.theta)?,
        "score_after": l.direction.score(&l.space, &edited)?,
    }))
}

fn sweep(a: SweepArgs, ctx: &Context) -> CliResult {
    let alphas = if a.alphas.is_empty() {
        ctx.config.sweep.alphas.clone()
    } else {
        a.alphas
    };
    if alphas.is_empty() {
        return Err(CliError::usage("--alphas is required (flag or config)"));
    }
    if alphas.iter().any(|x| !x.is_finite()) {
        return Err(CliError::usage("--alphas must be finite"));
    }
    let l = load_target(&a.target, ctx)?;
    create_dir(&a.out_dir)?;
    let written = edit_sweep(
        &l.theta,
        &l.direction,
        &alphas,
        &l.space.layout,
        &l.base_model,
        &a.out_dir,
    )?;
    let mut rows = Vec::new();
    for (alpha, path) in &written {
        let edited = edit_theta(&l.theta, &l.direction, *alpha)?;
        rows.push(json!({ "alpha": alpha, "path": path, "score": l.direction.score(&l.space, &edited)? }));
    }
    let inputs: Vec<&Path> = l.inputs.iter().map(PathBuf::as_path).collect();
    write_record(
        "sweep",
        &json!({ "alphas": alphas, "adapter_id": l.theta.adapter_id }),
        &inputs,
        &[&a.out_dir],
        &a.out_dir,
    )?;
    print_json(&json!({ "out_dir": a.out_dir, "adapters": rows }))
}

fn gen_synthetic(a: &GenArgs) -> CliResult {
    let geometry = match a.geometry {
        GeometryArg::Dense => Geometry::Dense,
        GeometryArg::LayerScale => Geometry::LayerScale,
    };
    let spec = SyntheticSpec {
        seed: a.seed,
        layers: default_layers(a.layers, a.d, a.k),
        n: a.n,
        m_true: if a.users > 1 { a.users } else { a.m_true },
        subspace_scale: a.scale,
        separation: a.separation,
        noise: a.noise,
        geometry,
    };
    let corpus = if a.users > 1 {
        gen_multi_user(&spec, a.users)?
    } else {
        gen_corpus(&spec)?
    };
    let out = &a.out;
    let adapters_dir = out.join("adapters");
    create_dir(&adapters_dir)?;
    write_json_atomic(&out.join("spec.json"), &spec)?;
    write_json_atomic(&out.join("ground_truth.json"), &corpus.truth)?;
    for set in &corpus.labels {
        let name = if corpus.labels.len() == 1 {
            "labels.json".to_string()
        } else {
            format!("labels-{}.json", set.user_id)
        };
        write_json_atomic(&out.join(name), set)?;
    }
    ReducedCorpus {
        layout: corpus.layout.clone(),
        vectors: corpus.vectors.clone(),
    }
    .save(&out.join("corpus"))?;

    let mut entries = Vec::with_capacity(corpus.vectors.len());
    for v in &corpus.vectors {
        let mut reduced = unflatten(v, &corpus.layout)?;
        reduced.base_model = "synthetic".into();
        let bundle = export_rank1(&reduced)?;
        let rel = PathBuf::from("adapters").join(format!("{}.safetensors", v.adapter_id));
        save_adapter(&bundle, out.join(&rel))?;
        entries.push(ManifestEntry {
            adapter_id: v.adapter_id.clone(),
            path: rel,
            rank: 1,
            base_model: "synthetic".into(),
            tags: vec!["synthetic".into()],
        });
    }
    write_manifest(&out.join("manifest.jsonl"), &entries)?;
    write_record("gen-synthetic", &spec, &[], &[out.as_path()], out)?;
    print_json(&json!({
        "out": out,
        "n": corpus.vectors.len(),
        "dim": corpus.layout.total_dim,
        "users": corpus.labels.len(),
        "provenance": out.join(DIR_RECORD),
    }))
}

fn emit<R: Serialize>(command: &str, report: &R, text: String, output: &ReportOut, inputs: &[&Path]) -> CliResult {
    match &output.out {
        Some(path) => {
            write_json_atomic(path, report)?;
            write_record(command, &json!({ "format": "json" }), inputs, &[path], path)?;
            if output.format == Format::Text {
                print!("{text}");
            }
            Ok(())
        }
        None => match output.format {
            Format::Json => print_json(report),
            Format::Text => {
                print!("{text}");
                Ok(())
            }
        },
    }
}

fn report(kind: ReportKind) -> CliResult {
    match kind {
        ReportKind::Recovery {
            space,
            direction,
            truth,
            corpus,
            output,
        } => {
            let sp = W2WSpace::load(&space)?;
            let dir = direction.as_deref().map(EditDirection::load).transpose()?;
            let gt = read_json(&truth)?;
            let c = ReducedCorpus::load(&corpus)?;
            let r = recovery_report(&sp, dir.as_ref(), &gt, &c.vectors)?;
            let mut inputs: Vec<&Path> = vec![&space, &truth, &corpus];
            if let Some(d) = &direction {
                inputs.push(d);
            }
            emit("report recovery", &r, r.to_text(), &output, &inputs)
        }
        ReportKind::Curve {
            space,
            direction,
            corpus,
            id,
            alphas,
            output,
        } => {
            if alphas.is_empty() || alphas.iter().any(|a| !a.is_finite()) {
                return Err(CliError::usage("--alphas needs finite values"));
            }
            let sp = W2WSpace::load(&space)?;
            let dir = EditDirection::load(&direction)?;
            dir.check_space(&sp)?;
            let c = ReducedCorpus::load(&corpus)?;
            let theta = c
                .get(&id)
                .ok_or_else(|| CliError::Domain(Error::UnknownAdapter(id.clone())))?;
            let curve = score_curve(&sp, &dir, theta, &alphas)?;
            let mut text = format!("{:>14}{:>18}\n", "alpha", "score");
            for p in &curve.points {
                text.push_str(&format!("{:>14.6}{:>18.9}\n", p.alpha, p.score));
            }
            text.push_str(&format!(
                "slope {:.9}  strictly increasing {}\n",
                curve.slope, curve.strictly_increasing
            ));
            emit("report curve", &curve, text, &output, &[&space, &direction, &corpus])
        }
        ReportKind::Fidelity {
            base,
            full,
            rank1,
            output,
        } => {
            let load = |p: &Path| EmbeddingTable::read_jsonl(p, Modality::Image);
            let r = fidelity_report(&load(&base)?, &load(&full)?, &load(&rank1)?)?;
            emit("report fidelity", &r, r.to_text(), &output, &[&base, &full, &rank1])
        }
        ReportKind::Rank {
            candidates,
            reference,
            reference_id,
            top,
            output,
        } => {
            let cands = EmbeddingTable::read_jsonl(&candidates, Modality::Image)?;
            let refs = EmbeddingTable::read_jsonl(&reference, Modality::Image)?;
            let id = match reference_id {
                Some(id) => id,
                None if refs.len() == 1 => refs.ids().next().unwrap_or_default().to_string(),
                None => {
                    return Err(CliError::usage(
                        "--reference-id is required when the table has several entries",
                    ))
                }
            };
            let v = refs
                .get(&id)
                .ok_or_else(|| CliError::Domain(Error::InvalidInput(format!("reference table lacks `{id}`"))))?;
            let mut ranked = rank_by_similarity(&cands, v)?;
            if let Some(k) = top {
                ranked.truncate(k);
            }
            let mut text = format!("{:>6}  {:<32}{:>12}\n", "rank", "id", "cosine");
            for (i, r) in ranked.iter().enumerate() {
                text.push_str(&format!("{:>6}  {:<32}{:>12.6}\n", i + 1, r.id, r.score));
            }
            emit("report rank", &ranked, text, &output, &[&candidates, &reference])
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemLine {
    id: String,
    #[serde(default)]
    path: Option<PathBuf>,
    #[serde(default)]
    text: Option<String>,
}

fn read_items(path: &Path) -> CliResult<Vec<EmbedItem>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Domain(Error::io(path, e)))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: ItemLine = serde_json::from_str(line)
            .map_err(|e| CliError::Domain(Error::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1))))?;
        let payload = match (rec.path, rec.text) {
            (Some(p), None) => Payload::File(if p.is_relative() { base.join(p) } else { p }),
            (None, Some(t)) => Payload::Text(t),
            _ => {
                return Err(CliError::Domain(Error::InvalidInput(format!(
                    "{}:{}: give exactly one of `path` and `text`",
                    path.display(),
                    i + 1
                ))))
            }
        };
        items.push(EmbedItem { id: rec.id, payload });
    }
    Ok(items)
}

fn fetch_embeds(a: FetchArgs, ctx: &Context) -> CliResult {
    let cfg = &ctx.config.embed;
    let endpoint = a
        .endpoint
        .or_else(|| cfg.endpoint.clone())
        .or_else(|| std::env::var(URL_ENV).ok())
        .ok_or_else(|| CliError::usage(format!("no endpoint: pass --endpoint, set embed.endpoint or {URL_ENV}")))?;
    let modality = match a.modality {
        ModalityArg::Image => Modality::Image,
        ModalityArg::Text => Modality::Text,
    };
    let req = EmbedRequest {
        items: read_items(&a.items)?,
        modality,
        endpoint: endpoint.clone(),
        token: std::env::var(TOKEN_ENV).ok(),
        batch_size: a.batch_size.unwrap_or(cfg.batch_size),
        concurrency: a.concurrency.unwrap_or(cfg.concurrency),
        retry: RetryPolicy {
            max_attempts: cfg.max_attempts,
            backoff_ms: cfg.backoff_ms,
        },
        cache_dir: a.cache.or_else(|| cfg.cache.clone()),
    };
    let transport = HttpTransport::new(Duration::from_secs(cfg.timeout_secs));
    let table = fetch_embeddings(&req, &transport)?;
    table.write_jsonl(&a.out)?;
    let params = json!({
        "endpoint": endpoint,
        "modality": modality,
        "batch_size": req.batch_size,
        "items": req.items.len(),
    });
    let mut inputs: Vec<&Path> = vec![&a.items];
    inputs.extend(req.items.iter().filter_map(|i| match &i.payload {
        Payload::File(p) => Some(p.as_path()),
        Payload::Text(_) => None,
    }));
    write_record("fetch-embeds", &params, &inputs, &[&a.out], &a.out)?;
    let counts: BTreeMap<&str, usize> = BTreeMap::from([("items", table.len()), ("dim", table.dim().unwrap_or(0))]);
    print_json(&json!({ "out": a.out, "counts": counts }))
}
