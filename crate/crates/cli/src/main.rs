use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mipw_core::curation::{score_manifest, select_top_k, ScoreField};
use mipw_core::diffusion::text::tokenize;
use mipw_core::diffusion::{
    load_checkpoint, load_samples, make_schedule, save_checkpoint, smooth, train_loop, Conditions,
    DenoiserParams, MergeMode, ObjectCondition, PromptStyle, SamplerConfig, TrainConfig,
};
use mipw_core::evalkit::{
    bench_from_manifest, build_bench, generate, mean_pair_overlap, paired_bootstrap,
    relevance_score_harness, render_report, run_merge_ablation, BenchInit, EvalConfig, EvalReport,
    GenerateOptions, NoiseStrategy, RelevanceExperimentConfig, Variant,
};
use mipw_core::numkit::derive_seed;
use mipw_core::scenekit::manifest::write_file;
use mipw_core::scenekit::render::MAX_OBJECTS;
use mipw_core::scenekit::{
    build_dataset, encode_latent, reembed, CorpusKind, DatasetConfig, Embedder, Manifest,
    ServiceEmbedder, StubEmbedder,
};
use mipw_core::{Error, Result};

/// Relevance-weighted multi-reference generation: data, training, sampling and evaluation.
#[derive(Parser)]
#[command(name = "mipw", version)]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene corpus.
    GenData(GenDataArgs),
    /// Attach object-quality scores to every record.
    Score(ScoreArgs),
    /// Keep the k best-scoring records.
    Select(SelectArgs),
    /// Train or finetune the denoiser.
    Train(TrainArgs),
    /// Generate images for one prompt and its reference images.
    Sample(SampleArgs),
    /// Object-relevance verification with uniform and weighted text noise.
    VerifyRelevance(VerifyArgs),
    /// Text match, image match and attention overlap on a bench.
    Eval(EvalArgs),
    /// Render an evaluation CSV into tables and charts.
    Report(ReportArgs),
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    max_objects: usize,
    /// Two-object scenes, every second one a duplicated pair.
    #[arg(long)]
    planted: bool,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum EmbedderKind {
    Stub,
    Service,
}

#[derive(Args, Serialize)]
struct EmbedderArgs {
    #[arg(long, value_enum, default_value_t = EmbedderKind::Stub)]
    embedder: EmbedderKind,
    /// Endpoint of the embedding service.
    #[arg(long)]
    service_url: Option<String>,
    #[arg(long, default_value_t = 10_000)]
    timeout_ms: u64,
    #[arg(long, default_value_t = 2)]
    retries: usize,
}

impl EmbedderArgs {
    fn build(&self) -> Result<Box<dyn Embedder>> {
        match self.embedder {
            EmbedderKind::Stub => Ok(Box::new(StubEmbedder)),
            EmbedderKind::Service => {
                let url = self
                    .service_url
                    .clone()
                    .ok_or_else(|| Error::config("--embedder service needs --service-url"))?;
                Ok(Box::new(ServiceEmbedder::new(
                    url,
                    Duration::from_millis(self.timeout_ms),
                    self.retries,
                )))
            }
        }
    }
}

#[derive(Args, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    embedder: EmbedderArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SelectArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Number of records to keep, or `all`.
    #[arg(long)]
    k: String,
    /// total | pair | single
    #[arg(long, default_value = "total")]
    by: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Corpus directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// Flat `key = value` training config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    merge: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Extra `key=value` config overrides.
    #[arg(long = "set")]
    set: Vec<String>,
    #[arg(long)]
    ckpt_out: PathBuf,
}

#[derive(Args, Serialize)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// e.g. "a circle and a square"
    #[arg(long)]
    prompt: String,
    /// Reference images (PNG), one per prompt object, in prompt order.
    #[arg(long, num_args = 0..)]
    refs: Vec<PathBuf>,
    #[arg(long)]
    merge: Option<String>,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 7.5)]
    guidance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Images to generate.
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// Optional img2img start image.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    strength: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum StrategyArg {
    Both,
    Uniform,
    Weighted,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 7.5)]
    guidance: f64,
    /// img2img strength from the bench start image.
    #[arg(long, default_value_t = 0.5)]
    strength: f64,
    /// Objects per synthetic bench scene.
    #[arg(long, default_value_t = 2)]
    objects: usize,
    /// full | shape
    #[arg(long, default_value = "shape")]
    prompt_style: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct VerifyArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 100)]
    n_prompts: usize,
    #[arg(long, value_enum, default_value_t = StrategyArg::Both)]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 1.0)]
    noise_scale: f64,
    /// Noise only at this sampler step instead of every step.
    #[arg(long)]
    single_step: Option<usize>,
    /// Layers receiving noise (default: all).
    #[arg(long, value_delimiter = ',')]
    layers: Vec<usize>,
    /// Object whose text stream is perturbed.
    #[arg(long, default_value_t = 0)]
    target: usize,
    #[arg(long, default_value_t = 50)]
    min_prompts: usize,
    #[command(flatten)]
    bench: BenchArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// `name=path` or `path`; repeat for several models.
    #[arg(long, required = true)]
    ckpt: Vec<String>,
    /// Number of synthetic bench prompts, or a corpus directory/manifest.
    #[arg(long)]
    bench: String,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// Merge used for every checkpoint (default: each checkpoint's own).
    #[arg(long)]
    merge: Option<String>,
    /// Also evaluate each checkpoint with image streams restricted to their boxes.
    #[arg(long)]
    locally_add: bool,
    /// Start image for img2img: layout | scene
    #[arg(long, default_value = "layout")]
    init: String,
    #[command(flatten)]
    bench_opts: BenchArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } | Error::Data { .. } | Error::Embedder(_) => 3,
        Error::NonFinite(_) => 4,
        _ => 2,
    }
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes `key = value` lines for every flag of the command.
fn echo_config(dir: &Path, command: &str, args: &impl Serialize) -> Result<()> {
    let mut text = format!("command = {command}\n");
    if let Ok(serde_json::Value::Object(map)) = serde_json::to_value(args) {
        flatten_into(&mut text, "", &map);
    }
    write_file(&dir.join("config.txt"), text.as_bytes())
}

fn flatten_into(out: &mut String, prefix: &str, map: &serde_json::Map<String, serde_json::Value>) {
    for (k, v) in map {
        let key = format!("{prefix}{k}");
        match v {
            serde_json::Value::Object(inner) => flatten_into(out, &format!("{key}."), inner),
            serde_json::Value::String(s) => out.push_str(&format!("{key} = {s}\n")),
            serde_json::Value::Null => out.push_str(&format!("{key} =\n")),
            other => out.push_str(&format!("{key} = {other}\n")),
        }
    }
}

/// A missing input file is a usage error, not an I/O failure.
fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::config(format!("{} not found", p.display())))
    }
}

fn parse_merge(s: &Option<String>) -> Result<Option<MergeMode>> {
    s.as_deref().map(str::parse).transpose()
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.n == 0 {
        return Err(Error::config("--n must be positive"));
    }
    if a.max_objects == 0 || a.max_objects > MAX_OBJECTS {
        return Err(Error::config(format!(
            "--max-objects must lie in [1, {MAX_OBJECTS}]"
        )));
    }
    let kind = if a.planted {
        CorpusKind::Planted
    } else {
        CorpusKind::default_mixture().capped(a.max_objects)?
    };
    mkdir(&a.out)?;
    let cfg = DatasetConfig {
        n_images: a.n,
        seed: a.seed,
        kind,
    };
    let m = build_dataset(&cfg, &a.out, &StubEmbedder)?;
    echo_config(&a.out, "gen-data", a)?;
    println!("wrote {} scenes to {}", m.len(), a.out.display());
    Ok(())
}

fn score(a: &ScoreArgs) -> Result<()> {
    let m = Manifest::load(&a.manifest)?;
    let m = match a.embedder.embedder {
        EmbedderKind::Stub => m,
        EmbedderKind::Service => reembed(&m, a.embedder.build()?.as_ref())?,
    };
    let scored = score_manifest(&m)?;
    let all: Vec<usize> = (0..scored.len()).collect();
    mkdir(&a.out)?;
    scored.export(&all, &a.out)?;
    echo_config(&a.out, "score", a)?;
    println!("scored {} records", scored.len());
    Ok(())
}

fn select(a: &SelectArgs) -> Result<()> {
    let m = Manifest::load(&a.manifest)?;
    let k = if a.k == "all" {
        m.len()
    } else {
        a.k.parse()
            .map_err(|_| Error::config(format!("--k must be a count or `all`, got {:?}", a.k)))?
    };
    let field: ScoreField =
        a.by.parse()
            .map_err(|e: Error| Error::config(e.to_string()))?;
    if k > m.len() {
        return Err(Error::config(format!(
            "--k {k} exceeds the {} records",
            m.len()
        )));
    }
    let idx = select_top_k(&m, k, field)?;
    mkdir(&a.out)?;
    m.export(&idx, &a.out)?;
    echo_config(&a.out, "select", a)?;
    println!("selected {} of {} records", idx.len(), m.len());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            TrainConfig::from_kv(&text)?
        }
        None => TrainConfig::default(),
    };
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(m) = parse_merge(&a.merge)? {
        cfg.model.merge_mode = m;
    }
    if let Some(m) = &a.mode {
        cfg.mode = m.parse()?;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(b) = a.batch {
        cfg.batch = b;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let mut params = match &a.init {
        Some(p) => {
            let mut params = load_checkpoint(p)?;
            params.config.merge_mode = cfg.model.merge_mode;
            cfg.model = params.config.clone();
            params
        }
        None => DenoiserParams::init(&cfg.model, cfg.seed)?,
    };
    cfg.validate()?;
    let m = Manifest::load(&a.data)?;
    let samples = load_samples(&m, cfg.prompt_style, cfg.max_refs)?;
    if let Some(s) = samples.iter().find(|s| {
        s.conds
            .objects
            .iter()
            .any(|o| o.embedding.len() != cfg.model.clip_dim)
    }) {
        return Err(Error::config(format!(
            "record {}: embedding width differs from clip_dim = {}",
            s.id, cfg.model.clip_dim
        )));
    }
    let sched = make_schedule(cfg.model.timesteps)?;

    let out_dir = a
        .ckpt_out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    mkdir(out_dir)?;
    let stem = a
        .ckpt_out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let mut echo = cfg.to_kv();
    echo.push_str(&format!("# data = {}\n", a.data.display()));
    if let Some(p) = &a.init {
        echo.push_str(&format!("# init = {}\n", p.display()));
    }
    write_file(&out_dir.join(format!("{stem}.config.txt")), echo.as_bytes())?;

    let mut last_good = params.clone();
    let mut losses = Vec::new();
    let result = train_loop(&mut params, &samples, &sched, &cfg, |step, loss, p| {
        losses.push(loss);
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            println!("step {step} loss {loss:.5}");
        }
        if cfg.ckpt_every > 0 && step % cfg.ckpt_every == 0 {
            save_checkpoint(p, &out_dir.join(format!("{stem}.step{step:06}.ckpt")))?;
        }
        last_good.clone_from(p);
        Ok(())
    });
    let sm = smooth(&losses, cfg.log_every.max(1));
    let mut log = String::from("step,loss,smoothed\n");
    for (i, (l, s)) in losses.iter().zip(&sm).enumerate() {
        let step = i + 1;
        if cfg.log_every <= 1 || step % cfg.log_every == 0 || step == losses.len() {
            log.push_str(&format!("{step},{l},{s}\n"));
        }
    }
    write_file(&out_dir.join(format!("{stem}.loss.csv")), log.as_bytes())?;
    match result {
        Ok(_) => {
            save_checkpoint(&params, &a.ckpt_out)?;
            println!("saved {}", a.ckpt_out.display());
            Ok(())
        }
        Err(e) => {
            save_checkpoint(&last_good, &a.ckpt_out)?;
            eprintln!("kept last good parameters in {}", a.ckpt_out.display());
            Err(e)
        }
    }
}

fn load_png(p: &Path) -> Result<image::RgbImage> {
    match image::open(p) {
        Ok(img) => Ok(img.to_rgb8()),
        Err(image::ImageError::IoError(e)) => Err(Error::io(p, e)),
        Err(e) => Err(Error::Data {
            record: p.display().to_string(),
            message: e.to_string(),
        }),
    }
}

/// Object texts of "a X and a Y".
fn prompt_labels(prompt: &str) -> Vec<String> {
    let t = prompt.trim();
    let t = t.strip_prefix("a ").unwrap_or(t);
    t.split(" and a ").map(|s| s.trim().to_string()).collect()
}

fn sample(a: &SampleArgs) -> Result<()> {
    require_file(&a.ckpt)?;
    let params = load_checkpoint(&a.ckpt)?;
    let merge = parse_merge(&a.merge)?;
    let labels = prompt_labels(&a.prompt);
    if a.refs.len() > MAX_OBJECTS {
        return Err(Error::config(format!(
            "{} reference images given; the model handles at most {MAX_OBJECTS}",
            a.refs.len()
        )));
    }
    if a.refs.len() > labels.len() {
        return Err(Error::config(format!(
            "{} reference images for {} prompt objects",
            a.refs.len(),
            labels.len()
        )));
    }
    if a.n == 0 {
        return Err(Error::config("--n must be positive"));
    }
    let prompt = tokenize(&a.prompt)?;
    if prompt.len() > params.config.max_text_len {
        return Err(Error::config(format!(
            "prompt has {} tokens; the model accepts {}",
            prompt.len(),
            params.config.max_text_len
        )));
    }
    let embedder = StubEmbedder;
    let objects = a
        .refs
        .iter()
        .zip(&labels)
        .map(|(p, l)| {
            Ok(ObjectCondition {
                tokens: tokenize(l)?,
                embedding: embedder.embed_image(&load_png(p)?)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let conds = Conditions::new(prompt, objects);
    let init = match &a.init {
        Some(p) => Some((encode_latent(&load_png(p)?)?, a.strength)),
        None => None,
    };
    let sampler = SamplerConfig {
        steps: a.steps,
        guidance: a.guidance,
        init,
    };
    let sched = make_schedule(params.config.timesteps)?;
    mkdir(&a.out)?;
    let mut grid = image::RgbImage::new(64 * a.n as u32, 64);
    let mut latents = Vec::new();
    let mut table = String::from("index,seed,attention_overlap\n");
    for k in 0..a.n {
        let seed = derive_seed(a.seed, &format!("sample/{k}"));
        let g = generate(
            &params,
            &conds,
            &sched,
            &sampler,
            seed,
            GenerateOptions {
                merge,
                capture: true,
                ..Default::default()
            },
        )?;
        image::imageops::replace(&mut grid, &g.image, 64 * k as i64, 0);
        let p = a.out.join(format!("sample_{k:02}.png"));
        g.image.save(&p).map_err(|e| Error::Data {
            record: p.display().to_string(),
            message: e.to_string(),
        })?;
        latents.extend(g.latent.data().iter().flat_map(|v| v.to_le_bytes()));
        let ov = mean_pair_overlap(&g.injection)?.map_or_else(String::new, |v| v.to_string());
        table.push_str(&format!("{k},{seed},{ov}\n"));
    }
    let p = a.out.join("grid.png");
    grid.save(&p).map_err(|e| Error::Data {
        record: p.display().to_string(),
        message: e.to_string(),
    })?;
    write_file(&a.out.join("latents.bin"), &latents)?;
    write_file(&a.out.join("samples.csv"), table.as_bytes())?;
    echo_config(&a.out, "sample", a)?;
    println!("wrote {} samples to {}", a.n, a.out.display());
    Ok(())
}

impl BenchArgs {
    fn eval_config(&self, seeds: usize) -> EvalConfig {
        EvalConfig {
            steps: self.steps,
            guidance: self.guidance,
            strength: self.strength,
            seeds,
            seed: self.seed,
        }
    }

    fn style(&self) -> Result<PromptStyle> {
        self.prompt_style.parse()
    }
}

fn verify_relevance(a: &VerifyArgs) -> Result<()> {
    require_file(&a.ckpt)?;
    let params = load_checkpoint(&a.ckpt)?;
    let sched = make_schedule(params.config.timesteps)?;
    let style = a.bench.style()?;
    let items = build_bench(
        a.n_prompts,
        a.bench.objects,
        derive_seed(a.bench.seed, "bench"),
        style,
        &StubEmbedder,
    )?;
    let strategies = match a.strategy {
        StrategyArg::Both => vec![NoiseStrategy::Uniform, NoiseStrategy::Weighted],
        StrategyArg::Uniform => vec![NoiseStrategy::Uniform],
        StrategyArg::Weighted => vec![NoiseStrategy::Weighted],
    };
    mkdir(&a.out)?;
    let mut report = EvalReport::default();
    let mut summary = String::new();
    let mut results = Vec::new();
    for s in strategies {
        let cfg = RelevanceExperimentConfig {
            strategy: s,
            noise_scale: a.noise_scale,
            seed: a.bench.seed,
            layers: a.layers.clone(),
            target: a.target,
            single_step: a.single_step,
            sampler: a.bench.eval_config(1),
            min_prompts: a.min_prompts,
        };
        let r = relevance_score_harness(&params, &items, &sched, &cfg)?;
        summary.push_str(&format!(
            "{s}: S_object_relevance = {:.6} over {} prompts ({} skipped)\n",
            r.score,
            r.ratios.len() - r.skipped,
            r.skipped
        ));
        report.rows.extend(r.rows(&s.to_string()));
        results.push(r);
    }
    if let [u, w] = results.as_slice() {
        let (x, y): (Vec<f64>, Vec<f64>) = w
            .ratios
            .iter()
            .zip(&u.ratios)
            .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
            .unzip();
        if !x.is_empty() {
            let ci = paired_bootstrap(&x, &y, 10_000, 0.95, a.bench.seed)?;
            summary.push_str(&format!(
                "weighted - uniform: mean {:.6}, 95% interval [{:.6}, {:.6}]\n",
                ci.mean, ci.lo, ci.hi
            ));
        }
    }
    report.save(&a.out.join("relevance.csv"))?;
    write_file(&a.out.join("summary.txt"), summary.as_bytes())?;
    echo_config(&a.out, "verify-relevance", a)?;
    print!("{summary}");
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let merge = parse_merge(&a.merge)?;
    let mut models = Vec::new();
    for spec in &a.ckpt {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let n = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                (n, p)
            }
        };
        require_file(&path)?;
        models.push((name, load_checkpoint(&path)?));
    }
    let style = a.bench_opts.style()?;
    let init: BenchInit = a.init.parse()?;
    let items = match a.bench.parse::<usize>() {
        Ok(n) => {
            if init != BenchInit::Layout {
                return Err(Error::config(
                    "synthetic benches start from the layout sketch",
                ));
            }
            build_bench(
                n,
                a.bench_opts.objects,
                derive_seed(a.bench_opts.seed, "bench"),
                style,
                &StubEmbedder,
            )?
        }
        Err(_) => {
            let p = PathBuf::from(&a.bench);
            if !p.exists() {
                return Err(Error::config(format!("bench {} not found", p.display())));
            }
            bench_from_manifest(
                &Manifest::load(&p)?,
                style,
                MAX_OBJECTS,
                init,
                &StubEmbedder,
            )?
        }
    };
    if items.is_empty() {
        return Err(Error::config("empty bench"));
    }
    let mut variants = Vec::new();
    for (name, p) in &models {
        variants.push(Variant {
            name: name.clone(),
            params: p,
            merge,
            local: false,
        });
        if a.locally_add {
            variants.push(Variant {
                name: format!("{name}+local"),
                params: p,
                merge: Some(MergeMode::Uniform),
                local: true,
            });
        }
    }
    let timesteps = models[0].1.config.timesteps;
    if models.iter().any(|(_, p)| p.config.timesteps != timesteps) {
        return Err(Error::config(
            "checkpoints disagree on the number of timesteps",
        ));
    }
    let sched = make_schedule(timesteps)?;
    let report = run_merge_ablation(
        &variants,
        &items,
        &sched,
        &a.bench_opts.eval_config(a.seeds),
        &StubEmbedder,
    )?;
    mkdir(&a.out)?;
    report.save(&a.out.join("eval.csv"))?;
    echo_config(&a.out, "eval", a)?;
    for agg in report.aggregate() {
        println!(
            "{}: text_match {} image_match {} attention_overlap {}",
            agg.variant,
            fmt_opt(agg.means[1]),
            fmt_opt(agg.means[2]),
            fmt_opt(agg.means[3])
        );
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn report(a: &ReportArgs) -> Result<()> {
    require_file(&a.input)?;
    let r = EvalReport::load(&a.input)?;
    render_report(&r, &a.out)?;
    echo_config(&a.out, "report", a)?;
    println!("rendered {} rows into {}", r.rows.len(), a.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(e.to_string()))?;
    }
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Score(a) => score(a),
        Command::Select(a) => select(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::VerifyRelevance(a) => verify_relevance(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
