use std::path::{Path, PathBuf};

use acacr::attention::save_heatmap;
use acacr::data::{save_png, CloudSettings, Dataset, DatasetManifest, Split};
use acacr::metrics::{MetricReport, SampleMetrics};
use acacr::network::{BlockVariant, Network, RACAB_POSITIONS};
use acacr::tensor::io as tnsr;
use acacr::trainer::{evaluate, initial_network, load_checkpoint, save_checkpoint, CheckpointHeader, Trainer};
use acacr::{Element, Tensor};
use log::info;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::exit::{incompatible, usage, CliError, CliResult, Context, ExitCode};
use crate::{Cli, Command, CompareArgs, EvalArgs, GenerateArgs, InferArgs, InspectArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.ackp";
pub const LOSS_FILE: &str = "loss.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const RUN_FILE: &str = "run.json";

pub fn run(cli: &Cli) -> CliResult<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CliError::new(ExitCode::Internal, e))?;
    }
    macro_rules! typed {
        ($f:ident, $args:expr) => {
            if cli.f64 {
                $f::<f64>(cli, $args)
            } else {
                $f::<f32>(cli, $args)
            }
        };
    }
    match &cli.command {
        Command::GenerateData(a) => generate(cli, a),
        Command::Train(a) => typed!(train, a),
        Command::Eval(a) => typed!(eval, a),
        Command::Infer(a) => typed!(infer, a),
        Command::Compare(a) => typed!(compare, a),
        Command::InspectAttention(a) => typed!(inspect, a),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).ctx(format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).ctx(format!("writing {}", path.display()))
}

/// Writes the run manifest. It records arguments and configuration but no
/// timestamps, so identical runs produce identical manifests.
fn write_manifest(path: &Path, cli: &Cli, command: &str, details: Value) -> CliResult<()> {
    let doc = json!({
        "tool": "acacr",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "dtype": if cli.f64 { "f64" } else { "f32" },
        "threads": cli.threads,
        "details": details,
    });
    write_text(path, &(serde_json::to_string_pretty(&doc)? + "\n"))
}

fn generate(cli: &Cli, a: &GenerateArgs) -> CliResult<()> {
    if a.count == 0 {
        return Err(usage("--count must be positive"));
    }
    let cloud = CloudSettings {
        coverage: a.coverage,
        softness: a.softness,
        color: a.color,
    };
    let manifest = DatasetManifest::with_count(a.seed, a.size, a.bands, a.count, cloud);
    manifest.validate()?;
    let dataset = Dataset::generate(manifest)?;
    dataset.save(&a.out, !a.no_previews)?;
    info!(
        "wrote {} train and {} test pairs to {}",
        dataset.train.len(),
        dataset.test.len(),
        a.out.display()
    );
    write_manifest(
        &a.out.join(RUN_FILE),
        cli,
        "generate-data",
        json!({ "out": a.out, "previews": !a.no_previews, "manifest": dataset.manifest }),
    )
}

fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    Dataset::load(dir).ctx(format!("loading dataset {}", dir.display()))
}

struct ResolvedRun {
    config: RunConfig,
    data: PathBuf,
    out: PathBuf,
}

fn resolve_run(config_path: &Path, data: &Option<PathBuf>, out: &Option<PathBuf>) -> CliResult<ResolvedRun> {
    let config = RunConfig::load(config_path)?;
    let data = data
        .clone()
        .or_else(|| config.data.clone())
        .ok_or_else(|| usage("no dataset: pass --data or set \"data\" in the config"))?;
    let out = out
        .clone()
        .or_else(|| config.out.clone())
        .ok_or_else(|| usage("no output directory: pass --out or set \"out\" in the config"))?;
    Ok(ResolvedRun { config, data, out })
}

/// Test split when it has samples, otherwise the train split.
fn eval_split(dataset: &Dataset) -> Split {
    if dataset.test.is_empty() {
        Split::Train
    } else {
        Split::Test
    }
}

fn score<T: Element>(net: &Network<T>, dataset: &Dataset, split: Split, trainer_cfg: &acacr::trainer::TrainConfig) -> CliResult<MetricReport> {
    let pairs = dataset.split(split);
    if pairs.is_empty() {
        return Err(usage(format!("the {} split is empty", split.dir_name())));
    }
    Ok(evaluate(net, pairs, &dataset.sample_ids(split), trainer_cfg.ssim_mode)?)
}

/// Trains to the configured step count and writes the checkpoint, loss
/// curve, periodic checkpoints and evaluation CSVs into `out`.
fn train_into<T: Element>(trainer: &mut Trainer<T>, dataset: &Dataset, out: &Path) -> CliResult<MetricReport> {
    create_dir(out)?;
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let interval = trainer.config().checkpoint_interval;
    let log = trainer.run(dataset, |t, step, loss| {
        if step == 1 || step % 25 == 0 {
            info!("step {step} loss {loss:.6}");
        }
        if step % interval == 0 {
            save_checkpoint(&ckpt_dir.join(format!("step-{step:06}.ackp")), t)?;
        }
        Ok(())
    })?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), trainer)?;
    write_text(&out.join(LOSS_FILE), &log.loss_csv())?;
    if !log.evals.is_empty() {
        let mut history = String::from("step,mae,mse,psnr_db,ssim,sam_deg\n");
        for (step, r) in &log.evals {
            let m = &r.mean;
            history.push_str(&format!(
                "{step},{},{},{},{},{}\n",
                m.mae,
                m.mse,
                fmt_psnr(m.psnr_db),
                m.ssim,
                m.sam_deg
            ));
        }
        write_text(&out.join("eval_history.csv"), &history)?;
    }
    let report = match log.evals.last() {
        Some((step, r)) if *step == trainer.step_count() => r.clone(),
        _ => score(trainer.network(), dataset, eval_split(dataset), trainer.config())?,
    };
    write_text(&out.join(EVAL_FILE), &report.to_csv())?;
    Ok(report)
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        v.to_string()
    }
}

fn train<T: Element>(cli: &Cli, a: &TrainArgs) -> CliResult<()> {
    let run = resolve_run(&a.config, &a.data, &a.out)?;
    let dataset = load_dataset(&run.data)?;
    let m = &dataset.manifest;
    let net_config = run.config.network_config(m.c_in, a.variant)?;
    net_config.check_input(&[m.h, m.w, m.c_in])?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let (header, mut trainer) = load_checkpoint::<T>(path).ctx(format!("loading {}", path.display()))?;
            header.ensure_compatible(&net_config)?;
            trainer.set_total_steps(run.config.train.steps);
            trainer
        }
        None => Trainer::new(initial_network(net_config.clone(), run.config.train.seed)?, run.config.train.clone())?,
    };
    info!(
        "training {} ({} parameters, {} in attention) for {} steps",
        net_config.variant,
        trainer.network().params().scalar_count(),
        trainer.network().attention_scalar_count(),
        trainer.config().steps
    );
    let report = train_into(&mut trainer, &dataset, &run.out)?;
    info!("final eval: {}", summary(&report.mean));
    write_manifest(
        &run.out.join(RUN_FILE),
        cli,
        "train",
        json!({
            "config": a.config,
            "data": run.data,
            "out": run.out,
            "resume": a.resume,
            "network": net_config,
            "train": trainer.config(),
            "dataset": dataset.manifest,
            "seed": trainer.config().seed,
            "steps_completed": trainer.step_count(),
        }),
    )
}

fn summary(m: &SampleMetrics) -> String {
    format!(
        "MAE {:.4}  PSNR {:.2} dB  SSIM {:.4}  SAM {:.3}°",
        m.mae,
        m.psnr_db,
        m.ssim,
        m.sam_deg
    )
}

fn open_checkpoint<T: Element>(path: &Path) -> CliResult<(CheckpointHeader, Trainer<T>)> {
    load_checkpoint::<T>(path).ctx(format!("loading checkpoint {}", path.display()))
}

fn eval<T: Element>(cli: &Cli, a: &EvalArgs) -> CliResult<()> {
    let (header, trainer) = open_checkpoint::<T>(&a.checkpoint)?;
    let dataset = load_dataset(&a.data)?;
    let m = &dataset.manifest;
    if header.network.c_in != m.c_in {
        return Err(incompatible(format!(
            "checkpoint expects {} bands, dataset has {}",
            header.network.c_in, m.c_in
        )));
    }
    header.network.check_input(&[m.h, m.w, m.c_in])?;
    let report = score(trainer.network(), &dataset, a.split, &header.train)?;
    let csv = report.to_csv();
    print!("{csv}");
    let out = a.out.clone().unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval-{}", a.split.dir_name()))
    });
    create_dir(&out)?;
    write_text(&out.join(EVAL_FILE), &csv)?;
    write_manifest(
        &out.join(RUN_FILE),
        cli,
        "eval",
        json!({
            "checkpoint": a.checkpoint,
            "data": a.data,
            "split": a.split,
            "step": header.step,
            "network": header.network,
        }),
    )
}

fn load_image<T: Element>(path: &Path) -> CliResult<Tensor<T>> {
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let t = if is_png {
        acacr::data::load_png(path)?.cast()
    } else {
        tnsr::load(path)?.into_element()
    };
    Ok(t)
}

fn check_image(net: &Network<impl Element>, x: &Tensor<impl Element>) -> CliResult<()> {
    let (_, _, c) = x.hwc()?;
    if c != net.config().c_in {
        return Err(incompatible(format!(
            "image has {c} bands, checkpoint expects {}",
            net.config().c_in
        )));
    }
    net.config().check_input(x.shape())?;
    Ok(())
}

fn infer<T: Element>(cli: &Cli, a: &InferArgs) -> CliResult<()> {
    let (header, trainer) = open_checkpoint::<T>(&a.checkpoint)?;
    let x = load_image::<T>(&a.input).ctx(format!("reading {}", a.input.display()))?;
    check_image(trainer.network(), &x)?;
    let y = trainer.network().forward(&x)?;
    if let Some(dir) = a.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let tnsr_path = a.output.with_extension("tnsr");
    tnsr::save(&tnsr_path, &y)?;
    let mut outputs = vec![tnsr_path];
    if y.shape()[2] == 3 {
        let png = a.output.with_extension("png");
        save_png(&png, &y.cast())?;
        outputs.push(png);
    }
    for p in &outputs {
        info!("wrote {}", p.display());
    }
    write_manifest(
        &a.output.with_extension("run.json"),
        cli,
        "infer",
        json!({
            "checkpoint": a.checkpoint,
            "input": a.input,
            "outputs": outputs,
            "step": header.step,
            "network": header.network,
        }),
    )
}

fn compare<T: Element>(cli: &Cli, a: &CompareArgs) -> CliResult<()> {
    let run = resolve_run(&a.config, &a.data, &a.out)?;
    let dataset = load_dataset(&run.data)?;
    let m = &dataset.manifest;
    let seed = run.config.train.seed;
    let mut table = String::from("variant,mae,mse,psnr_db,ssim,sam_deg,params,attention_params\n");
    let mut arms = Vec::new();
    for variant in BlockVariant::ALL {
        let net_config = run.config.network_config(m.c_in, Some(variant))?;
        net_config.check_input(&[m.h, m.w, m.c_in])?;
        let net = initial_network::<T>(net_config.clone(), seed)?;
        let (params, attention) = (net.params().scalar_count(), net.attention_scalar_count());
        let mut trainer = Trainer::new(net, run.config.train.clone())?;
        info!("arm {variant}: {params} parameters");
        let arm_dir = run.out.join(variant.to_string());
        let report = train_into(&mut trainer, &dataset, &arm_dir).map_err(|e| e.context(format!("arm {variant}")))?;
        let r = &report.mean;
        table.push_str(&format!(
            "{variant},{},{},{},{},{},{params},{attention}\n",
            r.mae,
            r.mse,
            fmt_psnr(r.psnr_db),
            r.ssim,
            r.sam_deg
        ));
        info!("arm {variant}: {}", summary(r));
        arms.push(json!({ "variant": variant, "seed": seed, "network": net_config, "dir": arm_dir }));
    }
    create_dir(&run.out)?;
    write_text(&run.out.join("ablation.csv"), &table)?;
    print!("{table}");
    write_manifest(
        &run.out.join(RUN_FILE),
        cli,
        "compare",
        json!({
            "config": a.config,
            "data": run.data,
            "out": run.out,
            "train": run.config.train,
            "dataset": dataset.manifest,
            "eval_split": eval_split(&dataset),
            "arms": arms,
        }),
    )
}

fn parse_query(s: &str) -> CliResult<(f64, f64)> {
    let bad = || usage(format!("--query expects two fractions `r,c` in [0, 1], got {s:?}"));
    let (r, c) = s.split_once(',').ok_or_else(bad)?;
    let r: f64 = r.trim().parse().map_err(|_| bad())?;
    let c: f64 = c.trim().parse().map_err(|_| bad())?;
    if !(0.0..=1.0).contains(&r) || !(0.0..=1.0).contains(&c) {
        return Err(bad());
    }
    Ok((r, c))
}

fn write_top(path: &Path, scores: &[acacr::attention::PatchScore]) -> CliResult<()> {
    let mut csv = String::from("rank,patch_index,row,col,score\n");
    for (rank, s) in scores.iter().enumerate() {
        csv.push_str(&format!("{},{},{},{},{}\n", rank + 1, s.patch_index, s.row, s.col, s.score));
    }
    write_text(path, &csv)
}

fn inspect<T: Element>(cli: &Cli, a: &InspectArgs) -> CliResult<()> {
    let query = parse_query(&a.query)?;
    if !(a.top > 0.0 && a.top <= 1.0) {
        return Err(usage(format!("--top must lie in (0, 1], got {}", a.top)));
    }
    let (header, trainer) = open_checkpoint::<T>(&a.checkpoint)?;
    let net = trainer.network();
    let x = load_image::<T>(&a.input).ctx(format!("reading {}", a.input.display()))?;
    check_image(net, &x)?;
    let (_, records) = net.forward_traced(&x, query)?;
    if records.is_empty() {
        return Err(usage("the checkpoint's network has no attention blocks"));
    }
    create_dir(&a.out)?;
    let mut blocks = Vec::new();
    for (record, position) in records.into_iter().zip(RACAB_POSITIONS) {
        let prefix = format!("l{position:02}");
        let export = record.export(a.top)?;
        let rec = &export.record;
        write_text(&a.out.join(format!("{prefix}_similarity.csv")), &rec.to_csv())?;
        write_top(&a.out.join(format!("{prefix}_top_s_p.csv")), &export.top_s_p)?;
        save_heatmap(&a.out.join(format!("{prefix}_s_p.png")), rec.s_p_row(), rec.grid, a.cell)?;
        let zeros_in = |row: &[f64]| row.iter().filter(|&&v| v == 0.0).count();
        let mut block = json!({
            "layer": position,
            "grid": rec.grid,
            "query_index": rec.query_index,
            "s_p_zeros": zeros_in(rec.s_p_row()),
        });
        if let (Some(row), Some(top)) = (rec.s_att_row(), &export.top_s_att) {
            write_top(&a.out.join(format!("{prefix}_top_s_att.csv")), top)?;
            save_heatmap(&a.out.join(format!("{prefix}_s_att.png")), row, rec.grid, a.cell)?;
            block["s_att_zeros"] = json!(zeros_in(row));
        }
        info!("layer {position}: {block}");
        blocks.push(block);
    }
    write_manifest(
        &a.out.join(RUN_FILE),
        cli,
        "inspect-attention",
        json!({
            "checkpoint": a.checkpoint,
            "input": a.input,
            "query": [query.0, query.1],
            "top": a.top,
            "step": header.step,
            "blocks": blocks,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_parsing() {
        assert_eq!(parse_query("0.3,0.6").unwrap(), (0.3, 0.6));
        assert_eq!(parse_query(" 0 , 1 ").unwrap(), (0.0, 1.0));
        for bad in ["0.3", "1.2,0.5", "a,b", "-0.1,0.2"] {
            assert_eq!(parse_query(bad).unwrap_err().code, ExitCode::Usage, "{bad}");
        }
    }
}
