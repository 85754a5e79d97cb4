//! `sals` command-line tool: synthetic data generation, projection
//! calibration, sparse-attention decoding, method comparison, and
//! spectral/traffic analysis over the on-disk tensor format.
//!
//! Exit codes: 0 success, 1 data or validation error (one-line diagnostic
//! on stderr naming the offending field or file), 2 usage error.
//! Progress goes to stderr; data goes only to declared output paths or
//! standard output.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use sals_core::{
    apply_rope, apply_rope_batch, compute_joint_projection, compute_per_head_projection,
    dense_decode_step, full_attention, generate_keys, latent_scores, overlap_score,
    pool_query_heads, post_rope_lowrank_attention, pre_rope_lowrank_full, prefill, read_tensor,
    rope_rank_demo, sals_decode_step, sparse_attention_over, write_tensor, AttentionConfig,
    Covariance, DenseMatrix, LatentKvCache, PlantedToken, ProjectionKind, ProjectionMatrix,
    RotaryTable, RunConfig, SelectionPolicy, SyntheticSpec, TrafficCounter, TrafficReport,
};

#[derive(Parser)]
#[command(
    name = "sals",
    version,
    about = "Sparse attention in latent space: compress keys, select critical tokens, attend exactly over the selection",
    arg_required_else_help = true
)]
struct Cli {
    /// Seed for synthetic data; overrides any seed in a spec file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Cap the number of worker threads (results are independent of N).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic key/query/value tensor from a JSON spec.
    GenData(GenDataArgs),
    /// Calibrate a low-rank projection from a key tensor.
    Calibrate(CalibrateArgs),
    /// Run prefill plus one decode step per query row; write outputs and a traffic report.
    Attend(AttendArgs),
    /// Compare attention methods on one instance: per-method error and traffic CSV.
    Compare(CompareArgs),
    /// Spectral, overlap, and traffic analyses over ingested tensors.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON generation spec (see README for the schema).
    #[arg(long, value_name = "JSON")]
    spec: PathBuf,
    /// Output tensor path.
    #[arg(long, value_name = "TENSOR")]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Key tensor (rows are tokens, columns are stacked head features).
    #[arg(long, value_name = "TENSOR")]
    keys: PathBuf,
    /// Latent rank of the projection.
    #[arg(long, value_name = "R")]
    rank: usize,
    /// Calibrate independent per-head blocks instead of one joint basis.
    #[arg(long, value_name = "HEADS")]
    per_head: Option<usize>,
    /// Output tensor path; a `<out>.json` sidecar records rank, kind,
    /// eigenvalues, and sample count.
    #[arg(long, value_name = "TENSOR")]
    out: PathBuf,
}

#[derive(Args, Clone, Copy, Default)]
struct ConfigOverrides {
    /// Override the latent rank r.
    #[arg(long, value_name = "R")]
    latent_rank: Option<usize>,
    /// Override the scoring rank r*.
    #[arg(long, value_name = "RSTAR")]
    score_rank: Option<usize>,
    /// Override the value bit width (2, 4, 16, or 32).
    #[arg(long, value_name = "BITS")]
    value_bits: Option<u32>,
    /// Override the full-precision recent-buffer length w.
    #[arg(long, value_name = "W")]
    recent_window: Option<usize>,
    /// Override the sink count x.
    #[arg(long, value_name = "X")]
    sink: Option<usize>,
    /// Override the critical budget y.
    #[arg(long, value_name = "Y")]
    critical_budget: Option<usize>,
    /// Override the recent selection count z.
    #[arg(long, value_name = "Z")]
    recent: Option<usize>,
}

impl ConfigOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if self.latent_rank.is_some() {
            cfg.latent_rank = self.latent_rank;
        }
        if self.score_rank.is_some() {
            cfg.score_rank = self.score_rank;
        }
        if self.value_bits.is_some() {
            cfg.value_bits = self.value_bits;
        }
        if self.recent_window.is_some() {
            cfg.recent_window = self.recent_window;
        }
        if self.sink.is_some() {
            cfg.sink = self.sink;
        }
        if self.critical_budget.is_some() {
            cfg.critical_budget = self.critical_budget;
        }
        if self.recent.is_some() {
            cfg.recent = self.recent;
        }
    }
}

#[derive(Args)]
struct AttendArgs {
    /// JSON run configuration (flags override file values override defaults).
    #[arg(long, value_name = "JSON")]
    config: PathBuf,
    #[arg(long, value_name = "TENSOR")]
    keys: PathBuf,
    /// Query rows; the last `rows(queries)` tokens are decoded, anything
    /// before them is prefill. Query width may be a multiple of the
    /// key width (grouped query heads are mean-pooled).
    #[arg(long, value_name = "TENSOR")]
    queries: PathBuf,
    #[arg(long, value_name = "TENSOR")]
    values: PathBuf,
    /// Output tensor (one row per decode step).
    #[arg(long, value_name = "TENSOR")]
    out: PathBuf,
    /// Calibrated projection tensor (with its `.json` sidecar). When
    /// absent, a joint projection is calibrated on the provided keys.
    #[arg(long, value_name = "TENSOR")]
    proj: Option<PathBuf>,
    /// Traffic report JSON path (default: `<out>.traffic.json`).
    #[arg(long, value_name = "JSON")]
    traffic: Option<PathBuf>,
    /// Dump the final cache state to `<prefix>.{latents,codes,scales,zeros,positions}.sals`.
    #[arg(long, value_name = "PREFIX")]
    dump_cache: Option<PathBuf>,
    /// Layer index checked against the config's dense-layer skip list;
    /// listed layers run the dense path over the same cache.
    #[arg(long, default_value_t = 2, value_name = "L")]
    layer: usize,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, value_name = "JSON")]
    config: PathBuf,
    #[arg(long, value_name = "TENSOR")]
    keys: PathBuf,
    /// Must have exactly one query row per key row (full causal sweep).
    #[arg(long, value_name = "TENSOR")]
    queries: PathBuf,
    #[arg(long, value_name = "TENSOR")]
    values: PathBuf,
    /// Comma-separated method list.
    #[arg(long, value_delimiter = ',', required = true, value_name = "LIST")]
    methods: Vec<Method>,
    /// CSV output path (standard output when omitted).
    #[arg(long, value_name = "CSV")]
    out: Option<PathBuf>,
    /// Write each method's output tensor to `<dir>/<method>.sals`.
    #[arg(long, value_name = "DIR")]
    dump_dir: Option<PathBuf>,
    /// Calibrated projection for the latent methods (default: calibrate
    /// on the provided keys).
    #[arg(long, value_name = "TENSOR")]
    proj: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
enum Method {
    /// Exact full attention (the error baseline).
    #[value(name = "full")]
    Full,
    /// Low-rank projection calibrated on rotated keys.
    #[value(name = "post_rope")]
    PostRope,
    /// Pre-rotation latents with full reconstruction of every key.
    #[value(name = "pre_rope_full")]
    PreRopeFull,
    /// Latent scoring with selective reconstruction.
    #[value(name = "sals")]
    Sals,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::PostRope => "post_rope",
            Method::PreRopeFull => "pre_rope_full",
            Method::Sals => "sals",
        }
    }
}

#[derive(Args)]
#[command(group = ArgGroup::new("mode").required(true).args(["overlap", "rank", "traffic"]))]
struct AnalyzeArgs {
    #[arg(long, value_name = "JSON")]
    config: PathBuf,
    /// Key tensors, one per layer (repeat the flag per layer).
    #[arg(long, value_name = "TENSOR")]
    keys: Vec<PathBuf>,
    /// Query tensors paired with --keys, one per layer (overlap mode).
    #[arg(long, value_name = "TENSOR")]
    queries: Vec<PathBuf>,
    /// Emit per-layer overlap-score CSV (layer, n_critical, mean, p10).
    #[arg(long)]
    overlap: bool,
    /// Emit per-layer CSV of variance ranks before and after rotation.
    #[arg(long)]
    rank: bool,
    /// Emit the traffic report JSON for one decode step on a synthetic
    /// instance of the configured geometry.
    #[arg(long)]
    traffic: bool,
    /// Output path (standard output when omitted).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Selection sizes for overlap mode, comma-separated (default: s/8).
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    n_critical: Vec<usize>,
    /// Variance threshold percent for rank mode.
    #[arg(long, default_value_t = 90.0, value_name = "V")]
    variance: f64,
    /// Context length for traffic mode.
    #[arg(long, default_value_t = 1024, value_name = "S")]
    context: usize,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        // Callers may cap parallelism; every computation is a fixed-order
        // reduction, so results do not depend on the pool size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => gen_data(args, cli.seed),
        Command::Calibrate(args) => calibrate(args),
        Command::Attend(args) => attend(args),
        Command::Compare(args) => compare(args),
        Command::Analyze(args) => analyze(args, cli.seed),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn read_matrix(path: &Path, what: &str) -> Result<DenseMatrix> {
    read_tensor(path).with_context(|| format!("{what}: {}", path.display()))
}

fn load_run_config(path: &Path, overrides: &ConfigOverrides) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("config: {}", path.display()))?;
    let mut cfg = RunConfig::from_json(&text).with_context(|| format!("config: {}", path.display()))?;
    overrides.apply(&mut cfg);
    Ok(cfg)
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn write_text(text: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn sidecar_path(tensor_path: &Path) -> PathBuf {
    PathBuf::from(format!("{}.json", tensor_path.display()))
}

#[derive(Serialize, Deserialize)]
struct ProjectionSidecar {
    r: usize,
    kind: ProjectionKind,
    eigenvalues: Vec<f64>,
    samples_seen: usize,
}

fn save_projection(u: &ProjectionMatrix, samples_seen: usize, path: &Path) -> Result<()> {
    write_tensor(path, u.matrix()).with_context(|| format!("writing {}", path.display()))?;
    let sidecar = ProjectionSidecar {
        r: u.rank(),
        kind: u.kind(),
        eigenvalues: u.eigenvalues().to_vec(),
        samples_seen,
    };
    write_json(&sidecar, Some(&sidecar_path(path)))
}

fn load_projection(path: &Path) -> Result<ProjectionMatrix> {
    let u = read_matrix(path, "proj")?;
    let sidecar_file = sidecar_path(path);
    let text = std::fs::read_to_string(&sidecar_file)
        .with_context(|| format!("projection sidecar: {}", sidecar_file.display()))?;
    let sidecar: ProjectionSidecar = serde_json::from_str(&text)
        .with_context(|| format!("projection sidecar: {}", sidecar_file.display()))?;
    if sidecar.r != u.cols() {
        bail!(
            "projection sidecar: field `r` is {} but the tensor has {} columns",
            sidecar.r,
            u.cols()
        );
    }
    Ok(ProjectionMatrix::from_parts(u, sidecar.eigenvalues, sidecar.kind)?)
}

fn self_calibrate(keys: &DenseMatrix, rank: usize) -> Result<ProjectionMatrix> {
    eprintln!(
        "calibrating joint projection: rank {rank} from {} rows of width {}",
        keys.rows(),
        keys.cols()
    );
    let mut acc = Covariance::new(keys.cols());
    acc.accumulate(keys)?;
    Ok(compute_joint_projection(&acc, rank)?)
}

/// Mean-pool grouped query heads down to the key-head layout when the
/// query tensor is wider than n*d.
fn pool_queries(queries: &DenseMatrix, cfg: &AttentionConfig) -> Result<DenseMatrix> {
    let nd = cfg.nd();
    if queries.cols() == nd {
        return Ok(queries.clone());
    }
    if !queries.cols().is_multiple_of(cfg.head_dim) {
        bail!(
            "queries: width {} is not a multiple of head_dim {}",
            queries.cols(),
            cfg.head_dim
        );
    }
    let query_heads = queries.cols() / cfg.head_dim;
    eprintln!(
        "pooling {query_heads} query heads down to {} key/value heads",
        cfg.num_heads
    );
    let mut pooled = DenseMatrix::zeros(queries.rows(), nd);
    for t in 0..queries.rows() {
        let row = pool_query_heads(queries.row(t), query_heads, cfg.num_heads, cfg.head_dim)?;
        pooled.row_mut(t).copy_from_slice(&row);
    }
    Ok(pooled)
}

fn check_widths(keys: &DenseMatrix, values: &DenseMatrix, cfg: &AttentionConfig) -> Result<()> {
    let nd = cfg.nd();
    if keys.cols() != nd {
        bail!("keys: width {} does not match num_heads*head_dim = {nd}", keys.cols());
    }
    if values.cols() != nd {
        bail!("values: width {} does not match num_heads*head_dim = {nd}", values.cols());
    }
    if keys.rows() != values.rows() {
        bail!(
            "values: {} rows but keys has {} rows",
            values.rows(),
            keys.rows()
        );
    }
    Ok(())
}

struct DecodeOutcome {
    outputs: DenseMatrix,
    final_step: TrafficReport,
    accumulated: TrafficReport,
}

/// Prefill everything before the query rows, then run one decode step
/// per query row (sparse selection or the dense bypass).
#[allow(clippy::too_many_arguments)]
fn decode_sequence(
    queries: &DenseMatrix,
    keys: &DenseMatrix,
    values: &DenseMatrix,
    u: &ProjectionMatrix,
    table: &RotaryTable,
    cfg: &AttentionConfig,
    policy: &SelectionPolicy,
    dense: bool,
) -> Result<DecodeOutcome> {
    let s = keys.rows();
    let q_rows = queries.rows();
    if q_rows == 0 {
        bail!("queries: tensor has no rows");
    }
    if q_rows > s {
        bail!("queries: {q_rows} rows exceed the {s} key rows");
    }
    let prefill_len = s - q_rows;
    let mut cache = LatentKvCache::new(cfg)?;
    if prefill_len > 0 {
        let head_keys = DenseMatrix::new(
            prefill_len,
            keys.cols(),
            keys.data()[..prefill_len * keys.cols()].to_vec(),
        )?;
        let head_values = DenseMatrix::new(
            prefill_len,
            values.cols(),
            values.data()[..prefill_len * values.cols()].to_vec(),
        )?;
        prefill(&head_keys, &head_values, &mut cache, u, cfg)?;
        eprintln!("prefilled {prefill_len} tokens");
    }
    let mut outputs = DenseMatrix::zeros(q_rows, cfg.nd());
    let mut accumulated = TrafficReport::zero();
    let mut final_step = TrafficReport::zero();
    for i in 0..q_rows {
        let t = prefill_len + i;
        let out = if dense {
            dense_decode_step(
                queries.row(i),
                keys.row(t),
                values.row(t),
                t,
                &mut cache,
                u,
                table,
                cfg,
            )?
        } else {
            sals_decode_step(
                queries.row(i),
                keys.row(t),
                values.row(t),
                t,
                &mut cache,
                u,
                table,
                policy,
                cfg,
            )?
        };
        outputs.row_mut(i).copy_from_slice(&out.y);
        accumulated.accumulate(&out.traffic);
        final_step = out.traffic;
        if (i + 1) % 256 == 0 {
            eprintln!("decoded {}/{q_rows} steps", i + 1);
        }
    }
    Ok(DecodeOutcome {
        outputs,
        final_step,
        accumulated,
    })
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

/// Generation spec: geometry plus an eigenvalue spectrum, either listed
/// in full (`spectrum`) or as a geometric decay (`spectrum_decay`).
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSpec {
    num_heads: usize,
    head_dim: usize,
    seq_len: usize,
    seed: Option<u64>,
    spectrum: Option<Vec<f64>>,
    spectrum_decay: Option<f64>,
    planted_position: Option<usize>,
    planted_gain: Option<f64>,
}

fn gen_data(args: GenDataArgs, seed_flag: Option<u64>) -> Result<()> {
    let text = std::fs::read_to_string(&args.spec)
        .with_context(|| format!("spec: {}", args.spec.display()))?;
    let spec: DataSpec = serde_json::from_str(&text)
        .with_context(|| format!("spec: {}", args.spec.display()))?;
    let nd = spec.num_heads * spec.head_dim;
    let spectrum = match (&spec.spectrum, spec.spectrum_decay) {
        (Some(_), Some(_)) => {
            bail!("spec: set either `spectrum` or `spectrum_decay`, not both")
        }
        (Some(list), None) => list.clone(),
        (None, Some(decay)) => {
            if !(decay.is_finite() && decay > 0.0 && decay <= 1.0) {
                bail!("spec: field `spectrum_decay` must be in (0, 1], got {decay}");
            }
            (0..nd).map(|i| decay.powi(i as i32)).collect()
        }
        (None, None) => bail!("spec: one of `spectrum` or `spectrum_decay` is required"),
    };
    let planted_token = match (spec.planted_position, spec.planted_gain) {
        (Some(position), Some(gain)) => Some(PlantedToken { position, gain }),
        (None, None) => None,
        _ => bail!("spec: `planted_position` and `planted_gain` must be set together"),
    };
    let seed = seed_flag.or(spec.seed).unwrap_or(0);
    let cfg = AttentionConfig {
        num_heads: spec.num_heads,
        head_dim: spec.head_dim,
        latent_rank: nd.max(1),
        score_rank: nd.max(1),
        ..base_geometry_defaults(spec.head_dim)
    };
    cfg.validate()?;
    let synth_spec = SyntheticSpec {
        seq_len: spec.seq_len,
        spectrum,
        seed,
        planted_token,
    };
    let m = generate_keys(&synth_spec, &cfg)?;
    write_tensor(&args.out, &m).with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!(
        "wrote {}x{} tensor (seed {seed}) to {}",
        m.rows(),
        m.cols(),
        args.out.display()
    );
    Ok(())
}

fn base_geometry_defaults(head_dim: usize) -> AttentionConfig {
    AttentionConfig {
        num_heads: 1,
        head_dim,
        rope_base: 10_000.0,
        latent_rank: 1,
        score_rank: 1,
        value_bits: 16,
        quant_group: head_dim.max(1),
        recent_window: 0,
        rope_pairing: Default::default(),
        traffic_mode: Default::default(),
    }
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

fn calibrate(args: CalibrateArgs) -> Result<()> {
    let keys = read_matrix(&args.keys, "keys")?;
    let mut acc = Covariance::new(keys.cols());
    acc.accumulate(&keys)?;
    let u = match args.per_head {
        Some(heads) => {
            eprintln!(
                "calibrating per-head projection: rank {} over {heads} heads, {} samples",
                args.rank,
                acc.samples_seen()
            );
            compute_per_head_projection(&acc, args.rank, heads)?
        }
        None => {
            eprintln!(
                "calibrating joint projection: rank {} from {} samples",
                args.rank,
                acc.samples_seen()
            );
            compute_joint_projection(&acc, args.rank)?
        }
    };
    save_projection(&u, acc.samples_seen(), &args.out)?;
    eprintln!(
        "wrote projection ({}x{}) to {} with sidecar {}",
        u.dim(),
        u.rank(),
        args.out.display(),
        sidecar_path(&args.out).display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// attend
// ---------------------------------------------------------------------------

fn attend(args: AttendArgs) -> Result<()> {
    let run_cfg = load_run_config(&args.config, &args.overrides)?;
    let (cfg, policy) = run_cfg.resolve()?;
    let keys = read_matrix(&args.keys, "keys")?;
    let values = read_matrix(&args.values, "values")?;
    let queries = read_matrix(&args.queries, "queries")?;
    check_widths(&keys, &values, &cfg)?;
    let queries = pool_queries(&queries, &cfg)?;

    let u = match &args.proj {
        Some(path) => {
            let u = load_projection(path)?;
            if u.dim() != cfg.nd() {
                bail!(
                    "proj: projection acts on width {} but the config needs {}",
                    u.dim(),
                    cfg.nd()
                );
            }
            u
        }
        None => self_calibrate(&keys, cfg.latent_rank)?,
    };
    let table = RotaryTable::with_pairing(keys.rows().max(1), cfg.head_dim, cfg.rope_base, cfg.rope_pairing)?;
    let dense = policy.dense_layers.contains(&args.layer);
    eprintln!(
        "layer {}: {} path over {} tokens, {} decode steps",
        args.layer,
        if dense { "dense" } else { "sparse" },
        keys.rows(),
        queries.rows()
    );
    let outcome = decode_sequence(&queries, &keys, &values, &u, &table, &cfg, &policy, dense)?;

    write_tensor(&args.out, &outcome.outputs)
        .with_context(|| format!("writing {}", args.out.display()))?;
    let traffic_path = args
        .traffic
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.traffic.json", args.out.display())));
    write_json(&outcome.accumulated, Some(&traffic_path))?;
    eprintln!(
        "wrote outputs to {} and traffic report to {}",
        args.out.display(),
        traffic_path.display()
    );

    if let Some(prefix) = &args.dump_cache {
        // Rebuild the final cache state for the dump: decode_sequence
        // consumed its cache, so replay the appends.
        let mut cache = LatentKvCache::new(&cfg)?;
        prefill(&keys, &values, &mut cache, &u, &cfg)?;
        let snap = cache.snapshot();
        let base = prefix.display();
        for (name, tensor) in [
            ("latents", &snap.latent_keys),
            ("codes", &snap.value_codes),
            ("scales", &snap.value_scales),
            ("zeros", &snap.value_zeros),
            ("positions", &snap.positions),
        ] {
            let path = PathBuf::from(format!("{base}.{name}.sals"));
            write_tensor(&path, tensor).with_context(|| format!("writing {}", path.display()))?;
        }
        eprintln!("dumped cache state to {base}.*.sals");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

fn manual_report(score: f64, reconstruct: f64, value: f64, s: usize, nd: usize) -> TrafficReport {
    let baseline = 2.0 * s as f64 * nd as f64;
    let total = score + reconstruct + value;
    TrafficReport {
        elements_score_phase: score,
        elements_reconstruct_phase: reconstruct,
        elements_value_phase: value,
        baseline_elements: baseline,
        predicted_ratio: total / baseline,
        measured_ratio: total / baseline,
    }
}

fn compare(args: CompareArgs) -> Result<()> {
    let run_cfg = load_run_config(&args.config, &args.overrides)?;
    let (cfg, policy) = run_cfg.resolve()?;
    let keys = read_matrix(&args.keys, "keys")?;
    let values = read_matrix(&args.values, "values")?;
    let queries = read_matrix(&args.queries, "queries")?;
    check_widths(&keys, &values, &cfg)?;
    let queries = pool_queries(&queries, &cfg)?;
    let s = keys.rows();
    if queries.rows() != s {
        bail!(
            "queries: method comparison needs one query row per key row ({} vs {s})",
            queries.rows()
        );
    }
    if s == 0 {
        bail!("keys: tensor has no rows");
    }
    let nd = cfg.nd();
    let positions: Vec<usize> = (0..s).collect();
    let table = RotaryTable::with_pairing(s, cfg.head_dim, cfg.rope_base, cfg.rope_pairing)?;

    let mut methods = Vec::new();
    for m in &args.methods {
        if !methods.contains(m) {
            methods.push(*m);
        }
    }

    eprintln!("computing the exact baseline over {s} tokens");
    let exact = full_attention(&queries, &keys, &values, &positions, Some(&table), &cfg, true)?;

    // Pre-rotation projection, shared by pre_rope_full and sals.
    let needs_pre = methods
        .iter()
        .any(|m| matches!(m, Method::PreRopeFull | Method::Sals));
    let u_pre = if needs_pre {
        Some(match &args.proj {
            Some(path) => load_projection(path)?,
            None => self_calibrate(&keys, cfg.latent_rank)?,
        })
    } else {
        None
    };

    let mut csv = String::from(
        "method,frobenius_error,score_elements,reconstruct_elements,value_elements,total_elements,predicted_ratio,measured_ratio\n",
    );
    for method in methods {
        eprintln!("running method `{}`", method.name());
        let (output, report) = match method {
            Method::Full => (
                exact.clone(),
                manual_report(s as f64 * nd as f64, 0.0, s as f64 * nd as f64, s, nd),
            ),
            Method::PostRope => {
                // Calibrated on what it compresses: the rotated keys.
                let rotated = apply_rope_batch(&keys, &positions, &table)?;
                let mut acc = Covariance::new(nd);
                acc.accumulate(&rotated)?;
                let u_post = compute_joint_projection(&acc, cfg.latent_rank)?;
                let out = post_rope_lowrank_attention(
                    &queries,
                    &keys,
                    &values,
                    &positions,
                    Some(&table),
                    &u_post,
                    &cfg,
                    true,
                )?;
                // Rotated latents score directly in latent space; values
                // stay full width.
                let report = manual_report(
                    s as f64 * cfg.latent_rank as f64,
                    0.0,
                    s as f64 * nd as f64,
                    s,
                    nd,
                );
                (out, report)
            }
            Method::PreRopeFull => {
                let (out, report) = pre_rope_lowrank_full(
                    &queries,
                    &keys,
                    &values,
                    &positions,
                    Some(&table),
                    u_pre.as_ref().unwrap(),
                    &cfg,
                    true,
                )?;
                (out, report)
            }
            Method::Sals => {
                let outcome = decode_sequence(
                    &queries,
                    &keys,
                    &values,
                    u_pre.as_ref().unwrap(),
                    &table,
                    &cfg,
                    &policy,
                    false,
                )?;
                (outcome.outputs, outcome.final_step)
            }
        };
        let err = output.frobenius_diff(&exact)?;
        csv.push_str(&format!(
            "{},{:.9e},{:.0},{:.0},{:.0},{:.0},{:.6},{:.6}\n",
            method.name(),
            err,
            report.elements_score_phase,
            report.elements_reconstruct_phase,
            report.elements_value_phase,
            report.total_elements(),
            report.predicted_ratio,
            report.measured_ratio,
        ));
        if let Some(dir) = &args.dump_dir {
            std::fs::create_dir_all(dir)
                .with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(format!("{}.sals", method.name()));
            write_tensor(&path, &output)
                .with_context(|| format!("writing {}", path.display()))?;
        }
    }
    write_text(&csv, args.out.as_deref())?;
    if let Some(p) = &args.out {
        eprintln!("wrote comparison CSV to {}", p.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

fn analyze(args: AnalyzeArgs, seed_flag: Option<u64>) -> Result<()> {
    let run_cfg = load_run_config(&args.config, &args.overrides)?;
    let (cfg, policy) = run_cfg.resolve()?;
    if args.overlap {
        analyze_overlap(&args, &cfg, &policy)
    } else if args.rank {
        analyze_rank(&args, &cfg)
    } else {
        analyze_traffic(&args, &cfg, &policy, seed_flag.unwrap_or(0))
    }
}

fn percentile_10(sorted: &[f64]) -> f64 {
    sorted[(sorted.len() - 1) / 10]
}

fn analyze_overlap(args: &AnalyzeArgs, cfg: &AttentionConfig, policy: &SelectionPolicy) -> Result<()> {
    if args.keys.is_empty() {
        bail!("keys: at least one --keys tensor is required for --overlap");
    }
    if args.keys.len() != args.queries.len() {
        bail!(
            "queries: {} tensors for {} key tensors; --overlap needs one pair per layer",
            args.queries.len(),
            args.keys.len()
        );
    }
    let mut csv = String::from("layer,n_critical,mean_os,p10_os\n");
    for (layer, (kp, qp)) in args.keys.iter().zip(&args.queries).enumerate() {
        let keys = read_matrix(kp, "keys")?;
        let queries = read_matrix(qp, "queries")?;
        check_widths(&keys, &keys, cfg)?;
        let queries = pool_queries(&queries, cfg)?;
        let s = keys.rows();
        if s == 0 || queries.rows() == 0 {
            bail!("keys: layer {layer} has an empty tensor");
        }
        let u = self_calibrate(&keys, cfg.latent_rank)?;
        let table = RotaryTable::with_pairing(s + 1, cfg.head_dim, cfg.rope_base, cfg.rope_pairing)?;

        // Latent state for approximate scores.
        let mut cache = LatentKvCache::new(cfg)?;
        let zeros = DenseMatrix::zeros(s, cfg.nd());
        prefill(&keys, &zeros, &mut cache, &u, cfg)?;

        // Exact attention probabilities: every stored token rotated at
        // its own position, the query treated as the next token.
        let positions: Vec<usize> = (0..s).collect();
        let rotated = apply_rope_batch(&keys, &positions, &table)?;

        let sizes = if args.n_critical.is_empty() {
            vec![(s / 8).max(1)]
        } else {
            args.n_critical.clone()
        };
        let mut scores_per_query = Vec::with_capacity(queries.rows());
        for qi in 0..queries.rows() {
            let q = queries.row(qi);
            let mut counter = TrafficCounter::new(cfg.traffic_mode);
            let approx = latent_scores(q, &cache, &u, policy.score_rank, &mut counter)?;
            let q_rot = apply_rope(q, s, &table)?;
            let (_, probs) =
                sparse_attention_over(&q_rot, &rotated, &zeros, cfg.num_heads, cfg.head_dim)?;
            scores_per_query.push((approx, probs));
        }
        for &n_c in &sizes {
            let mut oss: Vec<f64> = Vec::with_capacity(scores_per_query.len());
            for (approx, probs) in &scores_per_query {
                oss.push(overlap_score(approx, probs, n_c)?);
            }
            oss.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mean = oss.iter().sum::<f64>() / oss.len() as f64;
            csv.push_str(&format!(
                "{layer},{n_c},{:.6},{:.6}\n",
                mean,
                percentile_10(&oss)
            ));
        }
        eprintln!("layer {layer}: {} queries over {s} tokens", queries.rows());
    }
    write_text(&csv, args.out.as_deref())
}

fn analyze_rank(args: &AnalyzeArgs, cfg: &AttentionConfig) -> Result<()> {
    if args.keys.is_empty() {
        bail!("keys: at least one --keys tensor is required for --rank");
    }
    let mut csv = String::from("layer,rank_pre,rank_post,variance_percent\n");
    for (layer, kp) in args.keys.iter().enumerate() {
        let keys = read_matrix(kp, "keys")?;
        check_widths(&keys, &keys, cfg)?;
        let s = keys.rows();
        if s == 0 {
            bail!("keys: layer {layer} has an empty tensor");
        }
        let table = RotaryTable::with_pairing(s, cfg.head_dim, cfg.rope_base, cfg.rope_pairing)?;
        let positions: Vec<usize> = (0..s).collect();
        let report = rope_rank_demo(&keys, &positions, &table, args.variance)?;
        csv.push_str(&format!(
            "{layer},{},{},{}\n",
            report.rank_pre, report.rank_post, report.variance_percent
        ));
        eprintln!(
            "layer {layer}: rank {} -> {} at {}% variance",
            report.rank_pre, report.rank_post, report.variance_percent
        );
    }
    write_text(&csv, args.out.as_deref())
}

fn analyze_traffic(
    args: &AnalyzeArgs,
    cfg: &AttentionConfig,
    policy: &SelectionPolicy,
    seed: u64,
) -> Result<()> {
    let s = args.context;
    if s == 0 {
        bail!("context: must be at least 1");
    }
    let nd = cfg.nd();
    eprintln!(
        "measuring one decode step at context {s} (geometry {}x{}, seed {seed})",
        cfg.num_heads, cfg.head_dim
    );
    let spectrum: Vec<f64> = (0..nd).map(|i| 0.9f64.powi(i as i32)).collect();
    let spec = SyntheticSpec {
        seq_len: s,
        spectrum,
        seed,
        planted_token: None,
    };
    let keys = generate_keys(&spec, cfg)?;
    let values = sals_core::generate_gaussian(s, nd, seed.wrapping_add(1))?;
    let queries = sals_core::generate_gaussian(1, nd, seed.wrapping_add(2))?;
    let u = self_calibrate(&keys, cfg.latent_rank)?;
    let table = RotaryTable::with_pairing(s, cfg.head_dim, cfg.rope_base, cfg.rope_pairing)?;
    let outcome = decode_sequence(&queries, &keys, &values, &u, &table, cfg, policy, false)?;
    write_json(&outcome.final_step, args.out.as_deref())
}
