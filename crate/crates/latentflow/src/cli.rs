//! Command implementations behind the binary: train, infer, eval,
//! gradcheck, bench. Exit codes: 0 success, 1 a verification command
//! found a failure, 2 usage or I/O error.

use crate::config::{self, ModelConfig, Precision, TrainConfig};
use crate::data::flo;
use crate::data::metrics::{aepe, f1_all};
use crate::data::ppm;
use crate::data::synthetic::{generate, SampleSpec, SyntheticSample};
use crate::data::viz::flow_to_image;
use crate::data::FlowField;
use crate::model::FlowModel;
use crate::tensor::checkpoint;
use crate::tensor::gradcheck::{self, GradCheckOptions};
use crate::tensor::rng::Rng;
use crate::tensor::{Element, Graph, ParamStore, Tensor};
use crate::tiling::tile_infer;
use crate::train::train_model;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, unreadable files, invalid configs, aborted runs.
    Usage(String),
    /// A diagnostic ran to completion and the property it checks failed.
    Check(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Check(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Check(m) => write!(f, "{m}"),
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

/// Worker cap from FF_THREADS; unset means 1 (fully sequential).
pub fn thread_cap() -> Result<usize, CliError> {
    match std::env::var("FF_THREADS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| CliError::Usage(format!("FF_THREADS must be a positive integer, got `{v}`")))?;
            if n == 0 {
                return Err(CliError::Usage("FF_THREADS must be at least 1".into()));
            }
            Ok(n)
        }
        Err(_) => Ok(1),
    }
}

/// Parse a `HxW` tile argument, e.g. `64x64`.
pub fn parse_tile(s: &str) -> Result<(usize, usize), CliError> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| CliError::Usage(format!("--tile expects HxW, got `{s}`")))?;
    let h: usize = h.trim().parse().map_err(|_| CliError::Usage(format!("bad tile height `{h}`")))?;
    let w: usize = w.trim().parse().map_err(|_| CliError::Usage(format!("bad tile width `{w}`")))?;
    if h == 0 || w == 0 {
        return Err(CliError::Usage("tile sides must be positive".into()));
    }
    Ok((h, w))
}

fn load_configs(path: Option<&Path>) -> Result<(ModelConfig, TrainConfig), CliError> {
    let (mc, tc) = match path {
        Some(p) => config::from_file(p).map_err(usage)?,
        None => (ModelConfig::toy(), TrainConfig::default()),
    };
    mc.validate().map_err(usage)?;
    Ok((mc, tc))
}

fn make_samples(mc: &ModelConfig, tc: &TrainConfig) -> Result<Vec<SyntheticSample>, CliError> {
    let mut out = Vec::with_capacity(tc.samples);
    for i in 0..tc.samples {
        let spec = SampleSpec {
            kind: tc.kind,
            seed: mc.seed.wrapping_add(i as u64),
            h: tc.image_h,
            w: tc.image_w,
            magnitude: tc.magnitude,
        };
        out.push(generate(&spec).map_err(usage)?);
    }
    Ok(out)
}

pub fn cmd_train(config_path: &Path, out_checkpoint: &Path) -> Result<(), CliError> {
    let (mc, tc) = load_configs(Some(config_path))?;
    match mc.precision {
        Precision::F32 => run_train::<f32>(&mc, &tc, out_checkpoint),
        Precision::F64 => run_train::<f64>(&mc, &tc, out_checkpoint),
    }
}

fn run_train<T: Element>(
    mc: &ModelConfig,
    tc: &TrainConfig,
    out_checkpoint: &Path,
) -> Result<(), CliError> {
    let (model, mut store) = FlowModel::with_new_store::<T>(mc).map_err(usage)?;
    let samples = make_samples(mc, tc)?;
    println!("step,lr,loss,aepe");
    train_model(&model, &mut store, &samples, tc, |row| {
        println!("{},{},{},{}", row.step, row.lr, row.loss, row.aepe);
    })
    .map_err(usage)?;
    checkpoint::save(&store, out_checkpoint).map_err(usage)?;
    Ok(())
}

pub struct InferArgs {
    pub checkpoint: PathBuf,
    pub src: PathBuf,
    pub tgt: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub iters: Option<usize>,
    pub tile: Option<(usize, usize)>,
    pub viz: Option<PathBuf>,
}

pub fn cmd_infer(args: &InferArgs) -> Result<(), CliError> {
    let (mc, _) = load_configs(args.config.as_deref())?;
    match mc.precision {
        Precision::F32 => run_infer::<f32>(&mc, args),
        Precision::F64 => run_infer::<f64>(&mc, args),
    }
}

fn run_infer<T: Element>(mc: &ModelConfig, args: &InferArgs) -> Result<(), CliError> {
    let src = ppm::read(&args.src).map_err(usage)?;
    let tgt = ppm::read(&args.tgt).map_err(usage)?;
    if src.h != tgt.h || src.w != tgt.w {
        return Err(CliError::Usage(format!(
            "image sizes differ: {}x{} vs {}x{}",
            src.h, src.w, tgt.h, tgt.w
        )));
    }
    let (model, mut store) = FlowModel::with_new_store::<T>(mc).map_err(usage)?;
    checkpoint::load_into(&mut store, &args.checkpoint).map_err(usage)?;
    let iters = args.iters.unwrap_or(mc.iters_eval);
    let flow = match args.tile {
        Some((th, tw)) => {
            tile_infer(&model, &store, &src, &tgt, th, tw, iters, thread_cap()?).map_err(usage)?
        }
        None => model.infer(&store, &src, &tgt, iters).map_err(usage)?,
    };
    flo::write(&flow, &args.out).map_err(usage)?;
    if let Some(viz_path) = &args.viz {
        let img = flow_to_image(&flow, None);
        ppm::write(&img, viz_path).map_err(usage)?;
    }
    Ok(())
}

fn flo_names(dir: &Path) -> Result<BTreeSet<String>, CliError> {
    let mut names = BTreeSet::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(usage)?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".flo") {
            names.insert(name);
        }
    }
    Ok(names)
}

pub fn cmd_eval(pred_dir: &Path, gt_dir: &Path) -> Result<(), CliError> {
    let preds = flo_names(pred_dir)?;
    let gts = flo_names(gt_dir)?;
    if preds.is_empty() {
        return Err(CliError::Usage(format!("no .flo files in {}", pred_dir.display())));
    }
    if preds != gts {
        let only_pred: Vec<_> = preds.difference(&gts).cloned().collect();
        let only_gt: Vec<_> = gts.difference(&preds).cloned().collect();
        return Err(CliError::Usage(format!(
            "file sets do not match (only in predictions: {only_pred:?}; only in ground truth: {only_gt:?})"
        )));
    }
    let names: Vec<String> = preds.into_iter().collect();
    let cap = thread_cap()?;
    let rows = eval_pairs(pred_dir, gt_dir, &names, cap)?;
    println!("sample_id,aepe,f1_all");
    for (name, a, f) in rows {
        println!("{name},{a:.6},{f:.6}");
    }
    Ok(())
}

fn eval_one(pred_dir: &Path, gt_dir: &Path, name: &str) -> Result<(String, f64, f64), CliError> {
    let p = flo::read(&pred_dir.join(name)).map_err(usage)?;
    let g = flo::read(&gt_dir.join(name)).map_err(usage)?;
    let a = aepe(&p, &g).map_err(usage)?;
    let f = f1_all(&p, &g, false).map_err(usage)?;
    Ok((name.to_string(), a, f))
}

fn eval_pairs(
    pred_dir: &Path,
    gt_dir: &Path,
    names: &[String],
    cap: usize,
) -> Result<Vec<(String, f64, f64)>, CliError> {
    if cap <= 1 || names.len() <= 1 {
        return names.iter().map(|n| eval_one(pred_dir, gt_dir, n)).collect();
    }
    let workers = cap.min(names.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<(String, f64, f64), CliError>>>> =
        names.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= names.len() {
                    break;
                }
                let r = eval_one(pred_dir, gt_dir, &names[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("worker filled every slot"))
        .collect()
}

/// Full-model finite-difference verification at f64 on a small synthetic
/// pair. Parameters are jittered first: the loss surface has kinks (relu,
/// absolute error, bilinear sampling at integer coordinates) exactly at
/// the symmetric initialization.
pub fn cmd_gradcheck(config_path: Option<&Path>) -> Result<(), CliError> {
    let (mc, _) = load_configs(config_path)?;
    let report = run_gradcheck(&mc, 16, 16, 2, 2).map_err(usage)?;
    println!("coordinates checked: {}", report.coords_checked);
    if let Some(worst) = report.worst_param() {
        println!(
            "worst parameter: {} (max rel err {:.3e}, {} coords)",
            worst.name, worst.max_rel_err, worst.checked
        );
    }
    let tol = 1e-3;
    if report.max_rel_err <= tol {
        println!("PASS max rel err {:.3e} <= {tol:.0e}", report.max_rel_err);
        Ok(())
    } else {
        println!("FAIL max rel err {:.3e} > {tol:.0e}", report.max_rel_err);
        Err(CliError::Check(format!(
            "gradient check failed: max rel err {:.3e}",
            report.max_rel_err
        )))
    }
}

/// The gradcheck harness itself, reusable from tests: jitters parameters,
/// builds the sequence loss on one synthetic pair, samples `per_param`
/// coordinates per tensor.
pub fn run_gradcheck(
    mc: &ModelConfig,
    h: usize,
    w: usize,
    iters: usize,
    per_param: usize,
) -> Result<gradcheck::GradCheckReport, crate::model::ModelError> {
    let mut mc = mc.clone();
    mc.precision = Precision::F64;
    let (model, mut store) = FlowModel::with_new_store::<f64>(&mc)?;
    jitter_params(&mut store, 0.01, 12345)?;
    let spec = SampleSpec {
        kind: crate::config::SampleKind::SmoothRandom,
        seed: 9,
        h,
        w,
        magnitude: 2.0,
    };
    let sample = generate(&spec)?;
    let opts = GradCheckOptions { per_param, ..GradCheckOptions::default() };
    let report = gradcheck::check(
        &mut store,
        |g, binds| {
            let pass = model
                .forward(g, binds, &sample.src, &sample.tgt, iters, true)
                .map_err(|e| crate::tensor::TensorError::Invalid {
                    op: "gradcheck forward",
                    msg: e.to_string(),
                })?;
            crate::cost_decoder::sequence_loss(g, &pass.fine, &sample.gt, mc.gamma)
        },
        &opts,
    )?;
    Ok(report)
}

/// Add small uniform noise to every parameter, moving the evaluation
/// point off initialization symmetries and kinks.
pub fn jitter_params<T: Element>(
    store: &mut ParamStore<T>,
    scale: f64,
    seed: u64,
) -> Result<(), crate::tensor::TensorError> {
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let mut rng = Rng::for_name(seed, &name);
        let cur = store.get(&name)?;
        let shape = cur.shape().to_vec();
        let data: Vec<T> = cur
            .data()
            .iter()
            .map(|&v| v + T::from_f64(rng.uniform_in(-scale, scale)))
            .collect();
        store.set(&name, Tensor::from_vec(&shape, data)?)?;
    }
    Ok(())
}

pub fn cmd_bench(config_path: Option<&Path>) -> Result<(), CliError> {
    let (mc, tc) = load_configs(config_path)?;
    match mc.precision {
        Precision::F32 => run_bench::<f32>(&mc, &tc),
        Precision::F64 => run_bench::<f64>(&mc, &tc),
    }
}

fn run_bench<T: Element>(mc: &ModelConfig, tc: &TrainConfig) -> Result<(), CliError> {
    let (model, store) = FlowModel::with_new_store::<T>(mc).map_err(usage)?;
    let spec = SampleSpec {
        kind: tc.kind,
        seed: mc.seed,
        h: tc.image_h,
        w: tc.image_w,
        magnitude: tc.magnitude,
    };
    let sample = generate(&spec).map_err(usage)?;
    let mut g = Graph::new();
    let binds = store.stage(&mut g);

    let mut rows: Vec<(&str, f64, usize)> = Vec::new();
    let mut mark = Instant::now();
    let mut bytes = g.approx_bytes();
    let lap = |g: &Graph<T>, mark: &mut Instant, bytes: &mut usize, name: &'static str| {
        let ms = mark.elapsed().as_secs_f64() * 1e3;
        let now = g.approx_bytes();
        let delta = now.saturating_sub(*bytes);
        *bytes = now;
        *mark = Instant::now();
        (name, ms.max(1e-6), delta)
    };

    let pair = model.encode_pair(&mut g, &binds, &sample.src, &sample.tgt).map_err(usage)?;
    rows.push(lap(&g, &mut mark, &mut bytes, "features"));
    let cv = model.build_cost(&mut g, &pair).map_err(usage)?;
    rows.push(lap(&g, &mut mark, &mut bytes, "cost_volume"));
    let memory = model.encode_memory(&mut g, &binds, &cv, &pair.ctx).map_err(usage)?;
    rows.push(lap(&g, &mut mark, &mut bytes, "encode"));
    let _ = model
        .decode_flow(&mut g, &binds, memory, &cv, &pair.ctx, mc.iters_eval, true)
        .map_err(usage)?;
    rows.push(lap(&g, &mut mark, &mut bytes, "decode"));

    println!("stage,millis,approx_bytes");
    for (name, ms, delta) in &rows {
        println!("{name},{ms:.3},{delta}");
    }
    println!("total,{:.3},{}", rows.iter().map(|r| r.1).sum::<f64>(), g.approx_bytes());
    Ok(())
}

/// Write a ground-truth flow and a visualization for a synthetic pair;
/// used by examples and kept here so the binary stays thin.
pub fn write_flow_outputs(
    flow: &FlowField,
    out: &Path,
    viz: Option<&Path>,
) -> Result<(), CliError> {
    flo::write(flow, out).map_err(usage)?;
    if let Some(v) = viz {
        ppm::write(&flow_to_image(flow, None), v).map_err(usage)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tile_argument_parses_and_rejects() {
        assert_eq!(parse_tile("64x48").unwrap(), (64, 48));
        assert_eq!(parse_tile("8X8").unwrap(), (8, 8));
        assert!(parse_tile("64").is_err());
        assert!(parse_tile("0x64").is_err());
        assert!(parse_tile("axb").is_err());
    }

    #[test]
    fn usage_errors_exit_two_and_check_errors_exit_one() {
        assert_eq!(CliError::Usage("x".into()).code(), 2);
        assert_eq!(CliError::Check("x".into()).code(), 1);
    }

    #[test]
    fn missing_checkpoint_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let args = InferArgs {
            checkpoint: dir.path().join("missing.ffck"),
            src: dir.path().join("a.ppm"),
            tgt: dir.path().join("b.ppm"),
            out: dir.path().join("out.flo"),
            config: None,
            iters: None,
            tile: None,
            viz: None,
        };
        let err = cmd_infer(&args).unwrap_err();
        assert_eq!(err.code(), 2);
    }

    #[test]
    fn eval_rejects_mismatched_sets() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let f = FlowField::zeros(2, 2);
        flo::write(&f, &a.path().join("x.flo")).unwrap();
        flo::write(&f, &b.path().join("y.flo")).unwrap();
        let err = cmd_eval(a.path(), b.path()).unwrap_err();
        assert_eq!(err.code(), 2);
        assert!(err.to_string().contains("x.flo") || err.to_string().contains("y.flo"));
    }
}
