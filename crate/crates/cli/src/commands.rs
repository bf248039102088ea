use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use place_core::checkpoint;
use place_core::config::{RawConfig, RunConfig};
use place_core::diffusion::{plms_sample, PlaceModel, SampleOutput, SampleRequest, Trainer};
use place_core::evaluation::{fidelity_csv, layout_fidelity_report, miou, oracle_segment, per_image_csv, summarize, SegmentationResult};
use place_core::image::RgbImage;
use place_core::layout_control::{compute_lcm, nearest_lcm_baseline};
use place_core::pnm::{self, Raster};
use place_core::semantic_map::{load_semantic_map, present_classes, SemanticMap};
use place_core::synth_data::{load_dataset, write_dataset, DatasetConfig};
use place_core::text_semantics::{caption_prompt, TokenClassMap};
use serde_json::json;

use crate::record::{layered, out_dir, require, resolve, write_run_json};
use crate::{Command, ComputeLcmArgs, EvalArgs, GenDataArgs, InspectArgs, MapSource, SampleArgs, SamplingFlags, TrainArgs, UsageError};

pub fn dispatch(command: Command, argv: &[String]) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a, argv),
        Command::ComputeLcm(a) => compute_lcm_cmd(a),
        Command::Train(a) => train(a, argv),
        Command::Sample(a) => sample(a, argv),
        Command::Eval(a) => eval(a, argv),
        Command::Inspect(a) => inspect(a, argv),
    }
}

fn gen_data(a: GenDataArgs, argv: &[String]) -> Result<()> {
    let cfg = resolve(layered(&a.common, RawConfig::default())?)?;
    let out = out_dir(&cfg)?;
    let ds = DatasetConfig { split: a.split, base_seed: cfg.seed, size: a.size, jobs: a.jobs.max(1) };
    let manifest = write_dataset(a.count, &out, &ds)?;
    write_run_json(&out, "gen-data", argv, &cfg, json!({ "count": a.count, "split": a.split, "size": a.size }))?;
    eprintln!("wrote {} {:?} samples to {}", manifest.len(), a.split, out.display());
    Ok(())
}

fn compute_lcm_cmd(a: ComputeLcmArgs) -> Result<()> {
    let sidecar = a.sidecar.clone().unwrap_or_else(|| a.map.with_extension("json"));
    let map = load_semantic_map(&a.map, &sidecar).with_context(|| format!("loading {}", a.map.display()))?;
    let tcm = TokenClassMap::new(present_classes(&map).into_iter().map(Some).collect());
    let lcm = if a.nearest { nearest_lcm_baseline(&map, a.latent, &tcm)? } else { compute_lcm(&map, a.latent, &tcm)? };
    for p in lcm.dump_pgms(&a.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn train(a: TrainArgs, argv: &[String]) -> Result<()> {
    let flags = RawConfig {
        variant: a.variant,
        dataset: a.dataset,
        lf_dataset: a.lf_dataset,
        layout: a.layout,
        adaptive_alpha: a.adaptive_alpha,
        sa: a.sa,
        lfp: a.lfp,
        lambda_sa: a.lambda_sa,
        lambda_lfp: a.lambda_lfp,
        fusion_domain: a.fusion_domain,
        train_steps: a.train_steps,
        batch_size: a.batch_size,
        lf_batch_size: a.lf_batch_size,
        lr: a.lr,
        caption_dropout: a.caption_dropout,
        ..RawConfig::default()
    };
    let cfg = resolve(layered(&a.common, flags)?)?;
    let dataset = require(&cfg.dataset, "--dataset")?;
    if cfg.toggles.lfp && cfg.lf_dataset.is_none() {
        return Err(UsageError("lfp is enabled but no --lf-dataset was given".into()).into());
    }
    let out = out_dir(&cfg)?;
    write_run_json(&out, "train", argv, &cfg, json!({}))?;

    let ds = load_dataset(dataset).with_context(|| format!("loading {}", dataset.display()))?;
    let labeled: Vec<_> = ds.items.into_iter().filter_map(|it| it.map.map(|m| (it.image.to_signed_tensor(), m))).collect();
    if labeled.is_empty() {
        bail!("{} has no semantic maps", dataset.display());
    }
    let free: Vec<_> = match (&cfg.lf_dataset, cfg.toggles.lfp) {
        (Some(dir), true) => load_dataset(dir)
            .with_context(|| format!("loading {}", dir.display()))?
            .items
            .into_iter()
            .map(|it| (it.image.to_signed_tensor(), it.caption))
            .collect(),
        _ => Vec::new(),
    };

    let model = PlaceModel::<f32>::new(cfg.model_config(), cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.train_config(), &labeled, &free)?;
    let mut log = BufWriter::new(File::create(out.join("train_log.csv"))?);
    writeln!(log, "step,ldm,sa,lfp,total,alpha_mean")?;
    let mut io_err = None;
    trainer.run(|r| {
        let l = &r.losses;
        let alpha = r.alpha_mean.map(|a| format!("{a:.6}")).unwrap_or_default();
        if let Err(e) = writeln!(log, "{},{:.6},{:.6},{:.6},{:.6},{}", r.step, l.ldm, l.sa, l.lfp, l.total, alpha) {
            io_err.get_or_insert(e);
        }
        if a.log_every > 0 && r.step % a.log_every == 0 {
            eprintln!("step {:>6}  total {:.4}  ldm {:.4}  sa {:.4}  lfp {:.4}", r.step, l.total, l.ldm, l.sa, l.lfp);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    log.flush()?;
    let model = trainer.into_model();
    let meta = json!({ "train_steps": cfg.train_steps, "seed": cfg.seed, "variant": cfg.variant });
    checkpoint::save(&model, &out.join("model.ckpt"), meta)?;
    eprintln!("wrote {}", out.join("model.ckpt").display());
    Ok(())
}

fn sampling_raw(s: &SamplingFlags) -> RawConfig {
    RawConfig { checkpoint: s.checkpoint.clone(), steps: s.steps, guidance: s.guidance, clip_x0: s.clip_x0.then_some(true), ..RawConfig::default() }
}

fn load_model(cfg: &RunConfig) -> Result<PlaceModel<f32>> {
    let path = require(&cfg.checkpoint, "--checkpoint")?;
    let (model, _) = checkpoint::load::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(model)
}

fn load_map(src: &MapSource) -> Result<Option<SemanticMap>> {
    if let Some(map) = &src.map {
        let sidecar = src.sidecar.clone().unwrap_or_else(|| map.with_extension("json"));
        return Ok(Some(load_semantic_map(map, &sidecar).with_context(|| format!("loading {}", map.display()))?));
    }
    if let Some(dir) = &src.dataset {
        let ds = load_dataset(dir).with_context(|| format!("loading {}", dir.display()))?;
        let item = ds.items.into_iter().nth(src.index).ok_or_else(|| UsageError(format!("{} has no item {}", dir.display(), src.index)))?;
        return match item.map {
            Some(m) => Ok(Some(m)),
            None => Err(UsageError(format!("{} has no semantic maps", dir.display())).into()),
        };
    }
    Ok(None)
}

fn source_json(src: &MapSource) -> serde_json::Value {
    json!({ "map": src.map, "sidecar": src.sidecar, "dataset": src.dataset, "index": src.index })
}

fn x0_strip(out: &SampleOutput<f32>) -> Result<Option<RgbImage>> {
    let frames = out.x0_trace.iter().map(|(_, x)| RgbImage::from_unit_tensor(x)).collect::<Result<Vec<_>, _>>().map_err(anyhow::Error::msg)?;
    Ok(RgbImage::hstack(&frames))
}

fn sample(a: SampleArgs, argv: &[String]) -> Result<()> {
    let cfg = resolve(layered(&a.common, sampling_raw(&a.sampling))?)?;
    let model = load_model(&cfg)?;
    let map = load_map(&a.source)?;
    let out = out_dir(&cfg)?;
    write_run_json(&out, "sample", argv, &cfg, json!({ "source": source_json(&a.source), "caption": a.sampling.caption, "dump_x0": a.dump_x0 }))?;
    let req = SampleRequest {
        map: map.as_ref(),
        caption: a.sampling.caption.clone(),
        steps: cfg.steps,
        guidance: cfg.guidance,
        clip_x0: cfg.clip_x0,
        seed: cfg.seed,
        record_trace: a.dump_x0,
    };
    let s = plms_sample(&model, &req)?;
    RgbImage::from_unit_tensor(&s.image).map_err(anyhow::Error::msg)?.save(&out.join("sample.ppm"))?;
    if a.dump_x0 {
        if let Some(strip) = x0_strip(&s)? {
            strip.save(&out.join("x0_strip.ppm"))?;
        }
    }
    Ok(())
}

/// Per-map sampling seed, shared with the library's evaluation driver.
fn map_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

fn eval(a: EvalArgs, argv: &[String]) -> Result<()> {
    let flags = RawConfig { dataset: a.dataset.clone(), ..sampling_raw(&a.sampling) };
    let cfg = resolve(layered(&a.common, flags)?)?;
    let dataset = require(&cfg.dataset, "--dataset")?;
    if a.samples.is_none() && cfg.checkpoint.is_none() {
        return Err(UsageError("eval needs --checkpoint or --samples".into()).into());
    }
    let ds = load_dataset(dataset).with_context(|| format!("loading {}", dataset.display()))?;
    let mut maps: Vec<SemanticMap> = ds.items.into_iter().filter_map(|it| it.map).collect();
    if maps.is_empty() {
        bail!("{} has no semantic maps", dataset.display());
    }
    maps.truncate(a.limit.unwrap_or(usize::MAX));
    let out = out_dir(&cfg)?;
    write_run_json(&out, "eval", argv, &cfg, json!({ "samples": a.samples, "limit": a.limit }))?;

    let images: Vec<RgbImage> = match &a.samples {
        Some(dir) => (0..maps.len())
            .map(|i| {
                let p = dir.join(format!("{i:04}.ppm"));
                RgbImage::load(&p).with_context(|| format!("loading {}", p.display()))
            })
            .collect::<Result<_>>()?,
        None => {
            let model = load_model(&cfg)?;
            let imgs = sample_all(&model, &maps, &cfg, a.sampling.caption.as_deref(), a.jobs.max(1))?;
            let dir = out.join("samples");
            std::fs::create_dir_all(&dir)?;
            for (i, img) in imgs.iter().enumerate() {
                img.save(&dir.join(format!("{i:04}.ppm")))?;
            }
            imgs
        }
    };

    let results: Vec<SegmentationResult> = images.iter().zip(&maps).map(|(img, map)| miou(&oracle_segment(img), map)).collect::<Result<_, _>>()?;
    let classes = maps[0].classes().to_vec();
    let summary = summarize(&results, &classes);
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    std::fs::write(out.join("per_image.csv"), per_image_csv(&results, &classes))?;
    if !a.fidelity_factors.is_empty() {
        let rows = layout_fidelity_report(&maps, &a.fidelity_factors)?;
        std::fs::write(out.join("fidelity.csv"), fidelity_csv(&rows))?;
    }
    println!("mIoU {:.4} over {} images", summary.miou, summary.n_images);
    Ok(())
}

/// Samples one quantized image per map over `jobs` threads; the output does
/// not depend on `jobs`.
fn sample_all(model: &PlaceModel<f32>, maps: &[SemanticMap], cfg: &RunConfig, caption: Option<&str>, jobs: usize) -> Result<Vec<RgbImage>> {
    let one = |i: usize| -> Result<RgbImage> {
        let req = SampleRequest {
            map: Some(&maps[i]),
            caption: caption.map(str::to_string),
            steps: cfg.steps,
            guidance: cfg.guidance,
            clip_x0: cfg.clip_x0,
            seed: map_seed(cfg.seed, i),
            record_trace: false,
        };
        let s = plms_sample(model, &req)?;
        Ok(RgbImage::from_unit_tensor(&s.image).map_err(anyhow::Error::msg)?.quantized())
    };
    let mut slots: Vec<Option<Result<RgbImage>>> = (0..maps.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let one = &one;
                scope.spawn(move || (j..maps.len()).step_by(jobs).map(|i| (i, one(i))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("sampling thread panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every index sampled")).collect()
}

fn write_gray(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<()> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let pixels = values.iter().map(|v| (v * scale).round().clamp(0.0, 255.0) as u8).collect();
    pnm::write_file(path, &Raster { width: w, height: h, channels: 1, pixels })?;
    Ok(())
}

fn inspect(a: InspectArgs, argv: &[String]) -> Result<()> {
    let cfg = resolve(layered(&a.common, sampling_raw(&a.sampling))?)?;
    let model = load_model(&cfg)?;
    let map = load_map(&a.source)?;
    let out = out_dir(&cfg)?;
    write_run_json(&out, "inspect", argv, &cfg, json!({ "source": source_json(&a.source), "caption": a.sampling.caption, "every": a.every }))?;
    let req = SampleRequest {
        map: map.as_ref(),
        caption: a.sampling.caption.clone(),
        steps: cfg.steps,
        guidance: cfg.guidance,
        clip_x0: cfg.clip_x0,
        seed: cfg.seed,
        record_trace: true,
    };
    let s = plms_sample(&model, &req)?;
    RgbImage::from_unit_tensor(&s.image).map_err(anyhow::Error::msg)?.save(&out.join("sample.ppm"))?;
    if let Some(strip) = x0_strip(&s)? {
        strip.save(&out.join("x0_strip.ppm"))?;
    }

    let mut csv = String::from("block,step,t,alpha\n");
    for (step, (t, alphas)) in s.alpha_trace.iter().enumerate() {
        for (b, alpha) in alphas.iter().enumerate() {
            let _ = writeln!(csv, "{b},{step},{t},{alpha:.6}");
        }
    }
    std::fs::write(out.join("alpha.csv"), csv)?;

    let extras: Vec<&str> = req.caption.as_deref().map(|c| c.split_whitespace().collect()).unwrap_or_default();
    let (prompt, lcms) = match &map {
        Some(m) => {
            let (p, l) = model.layout_for(m, &extras)?;
            (p, Some(l))
        }
        None => (caption_prompt(req.caption.as_deref().unwrap_or(""), model.vocabulary())?, None),
    };
    let cond = model.conditioning(lcms.as_deref());
    let every = a.every.max(1);
    let last = s.xt_trace.len().saturating_sub(1);
    for (k, (t, z)) in s.xt_trace.iter().enumerate() {
        if k % every != 0 && k != last {
            continue;
        }
        for (b, (res, f)) in model.fusion_maps(z, *t, &prompt, &cond)?.into_iter().enumerate() {
            let dir: PathBuf = out.join("fusion").join(format!("block{b}_{res}x{res}"));
            std::fs::create_dir_all(&dir)?;
            let tokens = f.shape()[1];
            let data: Vec<f64> = f.data().iter().map(|&v| f64::from(v)).collect();
            for (j, &tok) in prompt.tokens().iter().enumerate().take(tokens) {
                let word = model.vocabulary().word(tok).unwrap_or("?");
                let column: Vec<f64> = (0..res * res).map(|i| data[i * tokens + j]).collect();
                write_gray(&dir.join(format!("step{k:03}_t{t:04}_tok{j}_{word}.pgm")), res, res, &column)?;
            }
        }
    }
    Ok(())
}
