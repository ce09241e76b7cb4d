//! `cpnn` — pipeline driver for CP-layer networks: train, decompose,
//! measure, compress, bound, verify. All file formats live in `format`.
//! Failures exit nonzero with a machine-readable JSON object on stderr.

use cpnn_cli::format;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cpnn_core::bound::generalization_bound;
use cpnn_core::compression::{
    compress, compress_epsilon, output_residual, project, threshold_plan, CompressionPlan,
    LayerPlan,
};
use cpnn_core::cp::rank_cap;
use cpnn_core::harness::{corrupt_labels, make_synthetic, toy_cnn, toy_fc, train, Dataset,
    TrainConfig,
};
use cpnn_core::network::{cp_ify, LayerSpec, NetworkModel};
use cpnn_core::properties::{measure_properties, TfVariant};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "cpnn", version, about = "CP-layer network pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model with SGD + momentum on a dataset.
    Train(TrainArgs),
    /// Decompose dense layers into CP form.
    Decompose(DecomposeArgs),
    /// Measure compressibility properties over a dataset.
    Measure(MeasureArgs),
    /// Compress a model by CP-spectrum truncation.
    Compress(CompressArgs),
    /// Evaluate the compression-based generalization bound.
    Bound(BoundArgs),
    /// Compare two models' outputs over a dataset.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// DSET-JSON file, or "synthetic:CLASSESxPER_CLASS" (e.g. synthetic:2x64)
    #[arg(long)]
    dataset: String,
    /// "toy-cnn", "toy-fc", or a CPNN-JSON model file
    #[arg(long)]
    arch: String,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.02)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of training labels resampled to a wrong class.
    #[arg(long, default_value_t = 0.0)]
    corrupt_rate: f64,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss/accuracy CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long)]
    model: PathBuf,
    /// "prop31" (per-layer admissible rank cap) or an explicit
    /// comma-separated per-layer rank list, e.g. "6,16,12"
    #[arg(long, default_value = "prop31")]
    rank_policy: String,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MeasureArgs {
    #[arg(long)]
    model: PathBuf,
    /// DSET-JSON file or "synthetic:CLASSESxPER_CLASS"
    #[arg(long)]
    dataset: String,
    #[arg(long, value_enum, default_value_t = VariantArg::PerFrequency)]
    variant: VariantArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Optional per-layer CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    model: PathBuf,
    /// DSET-JSON file or "synthetic:CLASSESxPER_CLASS"
    #[arg(long)]
    dataset: String,
    /// Margin; ε is derived as γ / (2·max‖M(X)‖_F).
    #[arg(long)]
    gamma: Option<f64>,
    /// Relative output-error budget in (0, 1].
    #[arg(long)]
    epsilon: Option<f64>,
    /// Amplitude cut-off τ ∈ [0,1]: drop components with λ/λ_max < τ.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = false)]
    skip_aware: bool,
    #[arg(long, value_enum, default_value_t = VariantArg::PerFrequency)]
    variant: VariantArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Combined compressed-model + plan + verification report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long)]
    model: PathBuf,
    /// Output of `cpnn compress`.
    #[arg(long)]
    plan: PathBuf,
    /// DSET-JSON file or "synthetic:CLASSESxPER_CLASS"
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Optional per-layer CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    model_a: PathBuf,
    #[arg(long)]
    model_b: PathBuf,
    /// DSET-JSON file or "synthetic:CLASSESxPER_CLASS"
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    #[value(name = "per_frequency")]
    PerFrequency,
    #[value(name = "per_component")]
    PerComponent,
    #[value(name = "both")]
    Both,
}

impl VariantArg {
    fn single(self) -> Result<TfVariant> {
        match self {
            VariantArg::PerFrequency => Ok(TfVariant::PerFrequency),
            VariantArg::PerComponent => Ok(TfVariant::PerComponent),
            VariantArg::Both => bail!("this command needs a single variant"),
        }
    }
}

fn variant_name(v: TfVariant) -> &'static str {
    match v {
        TfVariant::PerFrequency => "per_frequency",
        TfVariant::PerComponent => "per_component",
    }
}

fn variant_from_name(s: &str) -> Result<TfVariant> {
    match s {
        "per_frequency" => Ok(TfVariant::PerFrequency),
        "per_component" => Ok(TfVariant::PerComponent),
        other => bail!("unknown variant {other:?}"),
    }
}

fn main() {
    // CP_CERTIFY_THREADS caps internal parallelism; a set-but-garbage value
    // is a configuration error, not something to silently ignore.
    if let Ok(v) = std::env::var("CP_CERTIFY_THREADS") {
        if v.parse::<usize>().map(|n| n == 0).unwrap_or(true) {
            fail(&anyhow!("CP_CERTIFY_THREADS must be a positive integer, got {v:?}"));
        }
    }
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Decompose(a) => cmd_decompose(a),
        Cmd::Measure(a) => cmd_measure(a),
        Cmd::Compress(a) => cmd_compress(a),
        Cmd::Bound(a) => cmd_bound(a),
        Cmd::Verify(a) => cmd_verify(a),
    };
    if let Err(e) = result {
        fail(&e);
    }
}

fn fail(e: &anyhow::Error) -> ! {
    let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
    eprintln!(
        "{}",
        serde_json::json!({ "error": { "message": e.to_string(), "chain": chain } })
    );
    std::process::exit(1);
}

fn read_model(path: &Path) -> Result<NetworkModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    format::model_from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Loads a DSET-JSON file, or generates a seeded synthetic dataset from a
/// "synthetic:CLASSESxPER_CLASS" spec using the model's input shape.
fn load_dataset(spec: &str, input_shape: &[usize], seed: u64) -> Result<Dataset> {
    if let Some(rest) = spec.strip_prefix("synthetic:") {
        let (k, p) = rest
            .split_once('x')
            .ok_or_else(|| anyhow!("synthetic spec must be synthetic:CLASSESxPER_CLASS"))?;
        let classes: usize = k.parse().context("synthetic class count")?;
        let per_class: usize = p.parse().context("synthetic per-class count")?;
        return make_synthetic(classes, per_class, input_shape, seed)
            .map_err(|e| anyhow!("generating synthetic dataset: {e}"));
    }
    let text =
        fs::read_to_string(spec).with_context(|| format!("reading dataset {spec}"))?;
    let data = format::dataset_from_json(&text).with_context(|| format!("parsing {spec}"))?;
    if data.input_shape != input_shape {
        bail!(
            "dataset input shape {:?} does not match model input shape {:?}",
            data.input_shape,
            input_shape
        );
    }
    Ok(data)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (model, input_shape) = match a.arch.as_str() {
        "toy-cnn" => (None, vec![8, 8, 1]),
        "toy-fc" => (None, vec![16]),
        path => {
            let m = read_model(Path::new(path))?;
            let shape = m.input_shape.clone();
            (Some(m), shape)
        }
    };
    let mut dataset = load_dataset(&a.dataset, &input_shape, a.seed)?;
    if a.corrupt_rate > 0.0 {
        dataset = corrupt_labels(&dataset, a.corrupt_rate, a.seed)
            .map_err(|e| anyhow!("corrupting labels: {e}"))?;
    }
    let model = match model {
        Some(m) => m,
        None if a.arch == "toy-cnn" => toy_cnn(dataset.num_classes, a.seed),
        None => toy_fc(dataset.num_classes, a.seed),
    };
    let config = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let (trained, metrics) =
        train(&model, &dataset, &config).map_err(|e| anyhow!("training: {e}"))?;
    write_file(&a.out, &format::model_to_json(&trained)?)?;
    if let Some(path) = &a.metrics {
        let mut csv = String::from("epoch,loss,accuracy\n");
        for m in &metrics {
            csv.push_str(&format!("{},{},{}\n", m.epoch, m.loss, m.accuracy));
        }
        write_file(path, &csv)?;
    }
    Ok(())
}

fn layer_admissible_cap(layer: &LayerSpec) -> usize {
    match layer.core() {
        LayerSpec::ConvDense { s, o, kx, ky, .. } | LayerSpec::ConvCp { s, o, kx, ky, .. } => {
            rank_cap(&[*o, *s, kx * ky])
        }
        LayerSpec::FcDense { s1, s2, s1p, s2p, .. }
        | LayerSpec::FcCp { s1, s2, s1p, s2p, .. } => rank_cap(&[s1 * s2, s1p * s2p]),
        LayerSpec::Skip { .. } => unreachable!("core() strips skip"),
    }
}

fn cmd_decompose(a: DecomposeArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let ranks: Vec<usize> = if a.rank_policy == "prop31" {
        model.layers.iter().map(layer_admissible_cap).collect()
    } else {
        let ranks: Vec<usize> = a
            .rank_policy
            .split(',')
            .map(|s| s.trim().parse().context("explicit rank list"))
            .collect::<Result<_>>()?;
        if ranks.len() != model.layers.len() {
            bail!("{} ranks given for {} layers", ranks.len(), model.layers.len());
        }
        for (k, (&r, layer)) in ranks.iter().zip(&model.layers).enumerate() {
            let cap = layer_admissible_cap(layer);
            if r > cap {
                bail!("layer {k}: rank {r} exceeds the admissible cap {cap}");
            }
        }
        ranks
    };
    let decomposed =
        cp_ify(&model, &ranks, a.tol, a.seed).map_err(|e| anyhow!("decomposing: {e}"))?;
    write_file(&a.out, &format::model_to_json(&decomposed)?)
}

#[derive(Serialize, Deserialize)]
struct MeasureReport {
    version: u32,
    report: String,
    variants: Vec<String>,
    max_output_norm: f64,
    layers: Vec<MeasureLayer>,
}

#[derive(Serialize, Deserialize)]
struct MeasureLayer {
    index: usize,
    is_conv: bool,
    is_skip: bool,
    hw: usize,
    frob: f64,
    lc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    rf: Option<f64>,
    excluded_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    tf_per_frequency: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nb_per_frequency: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tf_per_component: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nb_per_component: Option<Vec<f64>>,
}

fn cmd_measure(a: MeasureArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let dataset = load_dataset(&a.dataset, &model.input_shape, a.seed)?;
    let table = measure_properties(&model, &dataset.samples)
        .map_err(|e| anyhow!("measuring properties: {e}"))?;
    let pf = a.variant != VariantArg::PerComponent;
    let pc = a.variant != VariantArg::PerFrequency;
    let mut variants = Vec::new();
    if pf {
        variants.push("per_frequency".to_string());
    }
    if pc {
        variants.push("per_component".to_string());
    }
    let layers: Vec<MeasureLayer> = table
        .layers
        .iter()
        .enumerate()
        .map(|(index, p)| MeasureLayer {
            index,
            is_conv: p.is_conv,
            is_skip: p.is_skip,
            hw: p.hw,
            frob: p.frob,
            lc: p.lc,
            rf: p.rf,
            excluded_samples: p.excluded_samples,
            tf_per_frequency: pf.then(|| p.tf_pf.clone()),
            nb_per_frequency: pf.then(|| p.nb_pf.clone()),
            tf_per_component: pc.then(|| p.tf_pc.clone()),
            nb_per_component: pc.then(|| p.nb_pc.clone()),
        })
        .collect();
    let report = MeasureReport {
        version: 1,
        report: "measure".to_string(),
        variants,
        max_output_norm: table.max_output_norm,
        layers,
    };
    write_file(&a.out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    if let Some(path) = &a.csv {
        let mut csv =
            String::from("layer,is_conv,is_skip,hw,frob,lc,rf,width,tf_full_pf,tf_full_pc,nb_0_pf,nb_0_pc\n");
        for (index, p) in table.layers.iter().enumerate() {
            let r = p.width();
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                index,
                p.is_conv,
                p.is_skip,
                p.hw,
                p.frob,
                p.lc,
                p.rf.map(|v| v.to_string()).unwrap_or_default(),
                r,
                p.tf_pf[r - 1],
                p.tf_pc[r - 1],
                p.nb_pf[0],
                p.nb_pc[0],
            ));
        }
        write_file(path, &csv)?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PlanJson {
    /// Absent for threshold pruning, which carries no ε guarantee.
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    variant: String,
    skip_aware: bool,
    layers: Vec<LayerPlanJson>,
}

#[derive(Serialize, Deserialize)]
struct LayerPlanJson {
    r_hat: usize,
    lhs: f64,
    rhs: f64,
}

#[derive(Serialize, Deserialize)]
struct VerificationJson {
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon_raw: Option<f64>,
    max_residual: f64,
    worst_sample: usize,
    samples: usize,
}

#[derive(Serialize, Deserialize)]
struct CompressReport {
    version: u32,
    report: String,
    plan: PlanJson,
    verification: VerificationJson,
    model: format::ModelFile,
}

fn plan_to_json(plan: &CompressionPlan) -> PlanJson {
    PlanJson {
        epsilon: plan.epsilon.is_finite().then_some(plan.epsilon),
        variant: variant_name(plan.variant).to_string(),
        skip_aware: plan.skip_aware,
        layers: plan
            .layers
            .iter()
            .map(|l| LayerPlanJson { r_hat: l.r_hat, lhs: l.lhs, rhs: l.rhs })
            .collect(),
    }
}

fn cmd_compress(a: CompressArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let dataset = load_dataset(&a.dataset, &model.input_shape, a.seed)?;
    let modes = [a.gamma.is_some(), a.epsilon.is_some(), a.threshold.is_some()];
    if modes.iter().filter(|&&b| b).count() != 1 {
        bail!("exactly one of --gamma, --epsilon, --threshold is required");
    }
    let variant = a.variant.single()?;
    let (compressed, plan, verification) = if let Some(gamma) = a.gamma {
        let (m, p, v) = compress(&model, &dataset.samples, gamma, variant, a.skip_aware)
            .map_err(|e| anyhow!("compressing: {e}"))?;
        (m, p, Some(v))
    } else if let Some(eps) = a.epsilon {
        let (m, p, v) = compress_epsilon(&model, &dataset.samples, eps, variant, a.skip_aware)
            .map_err(|e| anyhow!("compressing: {e}"))?;
        (m, p, Some(v))
    } else {
        let tau = a.threshold.unwrap();
        let p = threshold_plan(&model, tau).map_err(|e| anyhow!("threshold plan: {e}"))?;
        let m = project(&model, &p).map_err(|e| anyhow!("projecting: {e}"))?;
        (m, p, None)
    };
    let verification = match verification {
        Some(v) => VerificationJson {
            epsilon: Some(v.epsilon),
            epsilon_raw: Some(v.epsilon_raw),
            max_residual: v.max_residual,
            worst_sample: v.worst_sample,
            samples: v.samples,
        },
        None => {
            // Threshold pruning carries no guarantee; the measured residual
            // is still recorded.
            let (res, worst) = output_residual(&model, &compressed, &dataset.samples)
                .map_err(|e| anyhow!("verifying: {e}"))?;
            VerificationJson {
                epsilon: None,
                epsilon_raw: None,
                max_residual: res,
                worst_sample: worst,
                samples: dataset.samples.len(),
            }
        }
    };
    let model_json = format::model_to_json(&compressed)?;
    let report = CompressReport {
        version: 1,
        report: "compress".to_string(),
        plan: plan_to_json(&plan),
        verification,
        model: serde_json::from_str(&model_json)?,
    };
    write_file(&a.out, &(serde_json::to_string_pretty(&report)? + "\n"))
}

fn cmd_bound(a: BoundArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let dataset = load_dataset(&a.dataset, &model.input_shape, a.seed)?;
    let text = fs::read_to_string(&a.plan)
        .with_context(|| format!("reading {}", a.plan.display()))?;
    let report: CompressReport = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", a.plan.display()))?;
    if report.version != 1 {
        bail!("unsupported plan version {}", report.version);
    }
    let plan = CompressionPlan {
        layers: report
            .plan
            .layers
            .iter()
            .map(|l| LayerPlan { r_hat: l.r_hat, lhs: l.lhs, rhs: l.rhs })
            .collect(),
        epsilon: report.plan.epsilon.unwrap_or(f64::NAN),
        variant: variant_from_name(&report.plan.variant)?,
        skip_aware: report.plan.skip_aware,
    };
    let bound = generalization_bound(&model, &dataset.samples, a.gamma, &plan)
        .map_err(|e| anyhow!("evaluating bound: {e}"))?;
    let out = serde_json::json!({
        "version": 1,
        "report": "bound",
        "gamma": bound.gamma,
        "m": bound.m,
        "d_eff": bound.d_eff,
        "d_orig": bound.d_orig,
        "margin_loss": bound.margin_loss,
        "unscaled_complexity": bound.complexity,
        "bound": bound.bound,
        "variant": variant_name(bound.variant),
        "per_layer": bound.per_layer.iter().zip(&plan.layers).map(|(l, p)| {
            serde_json::json!({
                "r_hat": p.r_hat,
                "original": l.original,
                "effective": l.effective,
                "ratio": l.ratio,
            })
        }).collect::<Vec<_>>(),
    });
    write_file(&a.out, &(serde_json::to_string_pretty(&out)? + "\n"))?;
    if let Some(path) = &a.csv {
        let mut csv = String::from("layer,r_hat,original,effective,ratio\n");
        for (index, (l, p)) in bound.per_layer.iter().zip(&plan.layers).enumerate() {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                index, p.r_hat, l.original, l.effective, l.ratio
            ));
        }
        write_file(path, &csv)?;
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<()> {
    let model_a = read_model(&a.model_a)?;
    let model_b = read_model(&a.model_b)?;
    if model_a.input_shape != model_b.input_shape {
        bail!(
            "model input shapes differ: {:?} vs {:?}",
            model_a.input_shape,
            model_b.input_shape
        );
    }
    let dataset = load_dataset(&a.dataset, &model_a.input_shape, a.seed)?;
    let (max_dev, worst) = output_residual(&model_a, &model_b, &dataset.samples)
        .map_err(|e| anyhow!("comparing models: {e}"))?;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "version": 1,
            "report": "verify",
            "max_relative_deviation": max_dev,
            "worst_sample": worst,
            "samples": dataset.samples.len(),
        }))?
    );
    Ok(())
}
