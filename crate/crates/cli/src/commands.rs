//! One function per subcommand.

use std::fs::File;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use wavray::data::export::{export_map, write_trajectory};
use wavray::data::{load_dataset, pnm, synth, Checkpoint, Dataset, Placement, SyntheticSpec};
use wavray::gradcheck::DEFAULT_TOLERANCE;
use wavray::model::Classifier;
use wavray::params::ParamStore;
use wavray::train::{format_metrics_line, mean_origin_radius, Trainer, LOG_HEADER};
use wavray::verify::Scope;
use wavray::{Precision, Real, Result, Tape, Tensor, TensorError};

use crate::config::{parse_override, CliConfig};
use crate::{EvalArgs, ExportArgs, Failure, GradcheckArgs, Overrides, ParamCountArgs, SynthArgs, TrainArgs};

type Outcome = std::result::Result<(), Failure>;

/// Full-size reference totals for zero and three ray layers, and the
/// accepted relative deviation.
pub const FULL_SIZE_TARGETS: [(usize, f64); 2] = [(0, 9.58e6), (3, 10.38e6)];
pub const FULL_SIZE_TOLERANCE: f64 = 0.30;

fn effective_config(o: &Overrides, extra: &[(String, String)]) -> Result<CliConfig> {
    let mut pairs = o.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    if let Some(r) = o.rays {
        pairs.push(("rays".into(), r.to_string()));
    }
    pairs.extend_from_slice(extra);
    CliConfig::load(o.config.as_deref(), &pairs)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TensorError + '_ {
    move |e| TensorError::io(path, e)
}

pub fn train(a: &TrainArgs) -> Outcome {
    let seed: Vec<(String, String)> = a.seed.map(|s| ("seed".into(), s.to_string())).into_iter().collect();
    let mut cfg = effective_config(&a.overrides, &seed)?;
    let classes = cfg.is_explicit("classes").then_some(cfg.model.classes);
    let (_, data) = load_dataset(&a.data, classes)?;
    if !cfg.is_explicit("classes") {
        cfg.model.classes = data.classes;
    }
    if !cfg.is_explicit("image_extent") {
        cfg.model.image_extent = data.height;
    }
    if data.height != data.width || data.height != cfg.model.image_extent {
        return Err(TensorError::Config(format!(
            "dataset images are {}x{} but the model expects {e}x{e}",
            data.height,
            data.width,
            e = cfg.model.image_extent
        ))
        .into());
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    std::fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let echo = a.out.join("config.txt");
    std::fs::write(&echo, cfg.render()).map_err(io_err(&echo))?;
    match cfg.train.precision {
        Precision::Single => run_training::<f32>(&cfg, &data, &a.out),
        Precision::Double => run_training::<f64>(&cfg, &data, &a.out),
    }
}

fn trajectory_path(out: &Path, layer: usize) -> std::path::PathBuf {
    out.join(format!("trajectory_layer{layer}.csv"))
}

fn run_training<T: Real>(cfg: &CliConfig, data: &Dataset, out: &Path) -> Outcome {
    let mut trainer = Trainer::<T>::new(&cfg.model, &cfg.train)?;
    let log_path = out.join("metrics.csv");
    let mut log = File::create(&log_path).map_err(io_err(&log_path))?;
    writeln!(log, "{LOG_HEADER}").map_err(io_err(&log_path))?;

    let layers = trainer.model.ray_fields().len();
    let mut snapshots: Vec<Vec<(usize, Vec<[f64; 2]>)>> = vec![Vec::new(); layers];
    let record_origins = |trainer: &Trainer<T>, snapshots: &mut Vec<Vec<(usize, Vec<[f64; 2]>)>>| -> Result<()> {
        for (k, origins) in trainer.origins().into_iter().enumerate() {
            snapshots[k].push((trainer.epoch, origins));
            write_trajectory(&snapshots[k], &trajectory_path(out, k))?;
        }
        Ok(())
    };
    record_origins(&trainer, &mut snapshots)?;
    eprintln!(
        "training {} parameters on {} images for {} epochs",
        trainer.params.scalar_count(),
        data.len(),
        cfg.train.epochs
    );

    let every = cfg.train.checkpoint_every;
    let mut last = None;
    let result = trainer.fit(data, |t, rec| {
        writeln!(log, "{}", rec.csv_line()).map_err(io_err(&log_path))?;
        record_origins(t, &mut snapshots)?;
        let radius = mean_origin_radius(&t.origins())
            .map(|r| format!(" radius {r:.4}"))
            .unwrap_or_default();
        eprintln!(
            "epoch {:>4} loss {:.5} top1 {:.4} lr {:.3e} {:.0} img/s{radius}",
            rec.epoch, rec.metrics.loss, rec.metrics.top1, rec.lr, rec.metrics.images_per_second
        );
        if every > 0 && rec.epoch % every == 0 && rec.epoch < cfg.train.epochs {
            t.to_checkpoint().save(&out.join(format!("epoch_{:04}.ckpt", rec.epoch)))?;
        }
        last = Some(*rec);
        Ok(())
    });
    if let Err(e) = result {
        eprintln!("training stopped after epoch {}", trainer.epoch);
        return Err(e.into());
    }
    trainer.to_checkpoint().save(&out.join("final.ckpt"))?;
    if let Some(rec) = last {
        println!("{LOG_HEADER}");
        println!("{}", rec.csv_line());
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Outcome {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model_config()?;
    let (_, data) = load_dataset(&a.data, Some(model.classes))?;
    if data.height != model.image_extent || data.width != model.image_extent {
        return Err(TensorError::Config(format!(
            "dataset images are {}x{} but the checkpoint model expects {e}x{e}",
            data.height,
            data.width,
            e = model.image_extent
        ))
        .into());
    }
    match ck.train_config()?.precision {
        Precision::Single => eval_with::<f32>(&ck, &data, a.batch_size),
        Precision::Double => eval_with::<f64>(&ck, &data, a.batch_size),
    }
}

fn eval_with<T: Real>(ck: &Checkpoint, data: &Dataset, batch: usize) -> Outcome {
    let trainer = Trainer::<T>::from_checkpoint(ck, None)?;
    let metrics = wavray::train::evaluate(&trainer.model, &trainer.params, data, batch.max(1))?;
    println!("{LOG_HEADER}");
    println!("{}", format_metrics_line(trainer.epoch, &metrics, trainer.last_lr));
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Outcome {
    let scope: Scope = a.scope.parse()?;
    let start = Instant::now();
    let reports = scope.run(a.seed)?;
    println!("scope,probe,max_rel_error,draws,status");
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed(DEFAULT_TOLERANCE);
        println!(
            "{scope},{},{:.3e},{},{}",
            r.probe,
            r.max_rel_error(),
            r.attempts,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.probe.clone());
        }
    }
    eprintln!("{} probes in {:.1}s", reports.len(), start.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "{} probe(s) exceed {DEFAULT_TOLERANCE:e}: {}",
            failed.len(),
            failed.join(", ")
        )))
    }
}

pub fn export_maps(a: &ExportArgs) -> Outcome {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let trainer = Trainer::<f64>::from_checkpoint(&ck, None)?;
    let (model, params) = (&trainer.model, &trainer.params);
    let fields = model.ray_fields();
    if fields.is_empty() {
        return Err(TensorError::Config("checkpoint model has no ray layers (rays = 0)".into()).into());
    }
    let field = fields.get(a.layer).ok_or_else(|| {
        TensorError::Config(format!("layer {} out of range: model has {} ray layers", a.layer, fields.len()))
    })?;
    let extent = model.ray_extents()[a.layer];

    let combined = forward_map(model, params, &a.image, a.layer)?;
    let maps = field.map(params, extent, extent)?;
    std::fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let prefix = format!("layer{}", a.layer);
    let path = a.out.join(format!("{prefix}_combined.pgm"));
    export_map(&combined, extent, extent, &path)?;
    println!("{}", path.display());
    for k in 0..maps.origins {
        let path = a.out.join(format!("{prefix}_origin{k:02}.pgm"));
        export_map(maps.row(k), extent, extent, &path)?;
        println!("{}", path.display());
    }
    let csv = a.out.join(format!("{prefix}_origins.csv"));
    let mut text = String::from("origin_index,x,y\n");
    for (k, o) in field.origin_values(params).iter().enumerate() {
        text.push_str(&format!("{k},{},{}\n", o[0], o[1]));
    }
    std::fs::write(&csv, text).map_err(io_err(&csv))?;
    println!("{}", csv.display());
    Ok(())
}

/// Combined map of ray layer `layer` from a forward pass over `image`.
fn forward_map(model: &Classifier, params: &ParamStore<f64>, image: &Path, layer: usize) -> Result<Vec<f64>> {
    let img = pnm::read(image)?;
    let e = model.config.image_extent;
    if (img.height, img.width) != (e, e) {
        return Err(TensorError::format(
            image,
            format!("image is {}x{} but the model expects {e}x{e}", img.height, img.width),
        ));
    }
    let pixels: Vec<f64> = pnm::to_chw(&img).into_iter().map(f64::from).collect();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let x = tape.constant(Tensor::new(&[1, 3, e, e], pixels)?);
    let out = model.forward(&mut tape, &p, x)?;
    Ok(tape.value(out.maps[layer]).data().to_vec())
}

pub fn param_count(a: &ParamCountArgs) -> Outcome {
    let extra: Vec<(String, String)> = if a.table1 { vec![("preset".into(), "full".into())] } else { Vec::new() };
    let cfg = effective_config(&a.overrides, &extra)?;
    cfg.model.validate()?;
    let count = wavray::model::param_count(&cfg.model)?;
    println!("module,parameters");
    for (m, c) in &count.modules {
        println!("{m},{c}");
    }
    println!("ray fields (within ray layers),{}", count.ray_fields);
    println!("total,{}", count.total);
    if !a.table1 {
        return Ok(());
    }
    let Some(&(_, target)) = FULL_SIZE_TARGETS.iter().find(|t| t.0 == cfg.model.rays) else {
        eprintln!("no reference total for rays = {}", cfg.model.rays);
        return Ok(());
    };
    let (lo, hi) = (target * (1.0 - FULL_SIZE_TOLERANCE), target * (1.0 + FULL_SIZE_TOLERANCE));
    let total = count.total as f64;
    let inside = (lo..=hi).contains(&total);
    println!(
        "reference,{:.2}M,band,{:.3}M..{:.3}M,deviation,{:+.1}%,{}",
        target / 1e6,
        lo / 1e6,
        hi / 1e6,
        (total / target - 1.0) * 100.0,
        if inside { "in band" } else { "OUT OF BAND" }
    );
    if inside {
        Ok(())
    } else {
        Err(Failure::Verification(format!("total {} outside {lo:.0}..{hi:.0}", count.total)))
    }
}

pub fn synth(a: &SynthArgs) -> Outcome {
    let placement = Placement::parse(&a.placement).ok_or_else(|| {
        TensorError::Config(format!("unknown placement {:?} (expected center or uniform)", a.placement))
    })?;
    let spec = SyntheticSpec {
        classes: a.classes,
        per_class: a.per_class,
        extent: a.extent,
        placement,
        noise: a.noise,
        seed: a.seed,
    };
    spec.validate()?;
    let manifest = synth::generate(&spec, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}
