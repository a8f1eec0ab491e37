use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::info;
use rayon::prelude::*;
use tsal_core::datapipe::{build_dataset, kfold_split, read_store, FoldSpec, Manifest, MANIFEST_NAME};
use tsal_core::encoders::ToyEncoder;
use tsal_core::geometry::{build_layout, project_to_tangents, BlendPlan};
use tsal_core::imageio::{load_frame_sequence, read_map_png, write_map_png, write_planar_png};
use tsal_core::metrics::{aggregate, evaluate, report_csv, report_table, SampleScores};
use tsal_core::model::{train, Attention, Head, Model, ModelSpec, Sample};
use tsal_core::tensor::io::save_checkpoint;
use tsal_core::tensor::Tensor;

use crate::config::RunConfig;
use crate::{AttentionArg, Cli, Command, Common, HeadArg, Switch};

pub const CHECKPOINT_FILE: &str = "checkpoint.tsal";
pub const SPEC_FILE: &str = "checkpoint.cfg";
pub const LOG_FILE: &str = "train_log.csv";

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref(), &cli.common.overrides)?;
    apply_flags(&cli.common, &mut cfg);
    match cli.command {
        Command::DatasetBuild { videos, out } => cmd_dataset_build(&cfg, &videos, &out),
        Command::Kfold { store, k, out } => cmd_kfold(&cfg, &store, k, &out),
        Command::Train {
            store,
            out,
            folds,
            fold_index,
            checkpoint,
        } => cmd_train(&cfg, &store, &out, folds.as_deref().zip(fold_index), checkpoint.as_deref()),
        Command::Predict {
            frames,
            text,
            checkpoint,
            out,
        } => cmd_predict(&cli.common, &frames, &text, &checkpoint, &out),
        Command::Eval {
            pred,
            gt,
            folds,
            fold_index,
            out,
        } => cmd_eval(&pred, &gt, folds.as_deref(), fold_index, out.as_deref()),
        Command::Project { frames, out } => cmd_project(&cfg, &frames, &out),
    }
}

fn apply_flags(c: &Common, cfg: &mut RunConfig) {
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.dataset.seed = s;
    }
    apply_ablation(c, &mut cfg.model);
}

fn apply_ablation(c: &Common, m: &mut tsal_core::model::ModelConfig) {
    if let Some(a) = c.attention {
        m.attention = match a {
            AttentionArg::Vstca => Attention::Vstca,
            AttentionArg::Vsta => Attention::Vsta,
        };
    }
    if let Some(h) = c.head {
        m.head = match h {
            HeadArg::Sigmoid => Head::Sigmoid,
            HeadArg::Relu => Head::Relu,
        };
    }
    if let Some(s) = c.sim_est {
        m.sim_est = matches!(s, Switch::On);
    }
    if let Some(s) = c.skips {
        m.skips = matches!(s, Switch::On);
    }
}

fn cmd_dataset_build(cfg: &RunConfig, videos: &Path, out: &Path) -> Result<()> {
    let manifest = build_dataset(videos, out, &cfg.dataset)?;
    println!(
        "{} videos, {} skipped, {} triplets -> {}",
        manifest.videos.len(),
        manifest.skipped_videos,
        manifest.total_triplets,
        out.join(MANIFEST_NAME).display()
    );
    Ok(())
}

fn cmd_kfold(cfg: &RunConfig, store: &Path, k: usize, out: &Path) -> Result<()> {
    let manifest = Manifest::load(&store.join(MANIFEST_NAME))?;
    let spec = kfold_split(&manifest.video_ids(), k, cfg.seed)?;
    spec.save(out)?;
    for (i, f) in spec.folds.iter().enumerate() {
        println!("fold {i}: {} videos", f.len());
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, store: &Path, out: &Path, fold: Option<(&Path, usize)>, resume: Option<&Path>) -> Result<()> {
    let mut records = read_store(store)?;
    if let Some((path, i)) = fold {
        let (train_ids, _) = FoldSpec::load(path)?.train_test(i)?;
        records.retain(|r| train_ids.binary_search(&r.video).is_ok());
    }
    ensure!(!records.is_empty(), "no training triplets in {}", store.display());
    let spec = cfg.spec();
    let mut model = match resume {
        Some(p) => Model::load(spec, p)?,
        None => Model::new(spec, cfg.seed)?,
    };
    let encoder = ToyEncoder::new(cfg.encoder.clone())?;
    info!("preparing {} triplets", records.len());
    let samples = records
        .par_iter()
        .map(|r| -> Result<Sample> {
            let frames = load_frame_sequence(&r.frames)?;
            let bundle = model.encode(&encoder, &frames, &r.text)?;
            Ok(Sample {
                inputs: model.prepare(&bundle)?,
                gt: read_map_png(&r.gt)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut log = String::from("epoch,step,loss\n");
    train(&mut model, &samples, &cfg.train_config(), |s| {
        info!("epoch {} step {} loss {:.6}", s.epoch, s.step, s.loss);
        writeln!(log, "{},{},{:.8}", s.epoch, s.step, s.loss).unwrap();
    })?;
    model.save(&out.join(CHECKPOINT_FILE))?;
    model.spec().save(&out.join(SPEC_FILE))?;
    fs::write(out.join(LOG_FILE), log)?;
    fs::write(out.join("run.cfg"), cfg.to_flat())?;
    println!("{}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    v.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    v.sort();
    Ok(v)
}

fn window_frames(frames: &Path, count: usize) -> Result<Vec<PathBuf>> {
    let all = if frames.is_dir() {
        png_files(frames)?
    } else {
        let base = frames.parent().unwrap_or(Path::new("."));
        fs::read_to_string(frames)
            .with_context(|| format!("reading {}", frames.display()))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| base.join(l.trim()))
            .collect()
    };
    ensure!(
        all.len() >= count,
        "{} holds {} frames, the model needs {count}",
        frames.display(),
        all.len()
    );
    Ok(all[all.len() - count..].to_vec())
}

fn cmd_predict(flags: &Common, frames: &Path, text: &str, checkpoint: &Path, out: &Path) -> Result<()> {
    ensure!(checkpoint.is_file(), "checkpoint {} not found", checkpoint.display());
    let spec_path = checkpoint.with_extension("cfg");
    let mut spec = ModelSpec::load(&spec_path).with_context(|| format!("model config {}", spec_path.display()))?;
    apply_ablation(flags, &mut spec.model);
    let model = Model::load(spec, checkpoint)?;
    let encoder = ToyEncoder::new(model.spec().encoder.clone())?;
    let seq = load_frame_sequence(&window_frames(frames, model.config().frames)?)?;
    let map = model.predict(&encoder, &seq, text)?;
    fs::create_dir_all(out)?;
    write_map_png(&out.join("saliency.png"), &map)?;
    let t = Tensor::new(vec![map.height(), map.width()], map.data().to_vec())?;
    save_checkpoint(&out.join("saliency.tsr"), &BTreeMap::from([("saliency".to_string(), t)]))?;
    println!("{}", out.join("saliency.png").display());
    Ok(())
}

fn collect_pngs(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_pngs(root, &p, out)?;
        } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p.strip_prefix(root)?.to_path_buf());
        }
    }
    Ok(())
}

fn cmd_eval(pred: &Path, gt: &Path, folds: Option<&Path>, fold_index: Option<usize>, out: Option<&Path>) -> Result<()> {
    let mut rel = Vec::new();
    collect_pngs(gt, gt, &mut rel)?;
    ensure!(!rel.is_empty(), "no ground-truth maps under {}", gt.display());
    let fold_of: Option<BTreeMap<String, usize>> = match folds {
        Some(p) => {
            let spec = FoldSpec::load(p)?;
            Some(
                spec.folds
                    .iter()
                    .enumerate()
                    .flat_map(|(i, f)| f.iter().map(move |v| (v.clone(), i)))
                    .collect(),
            )
        }
        None => None,
    };
    let scored = rel
        .par_iter()
        .map(|r| -> Result<(PathBuf, usize, SampleScores)> {
            let fold = match &fold_of {
                None => 0,
                Some(m) => {
                    let video = r.components().next().map(|c| c.as_os_str().to_string_lossy().into_owned());
                    let video = video.unwrap_or_default();
                    *m.get(&video).with_context(|| format!("{} belongs to no fold", r.display()))?
                }
            };
            let g = read_map_png(&gt.join(r))?;
            let p = read_map_png(&pred.join(r)).with_context(|| format!("prediction for {}", r.display()))?;
            let p = p.resize_bilinear(g.height(), g.width());
            let s = evaluate(&p, &g).with_context(|| format!("scoring {}", r.display()))?;
            Ok((r.clone(), fold, s))
        })
        .collect::<Result<Vec<_>>>()?;
    let scored: Vec<_> = match fold_index {
        Some(i) => scored.into_iter().filter(|s| s.1 == i).collect(),
        None => scored,
    };
    ensure!(!scored.is_empty(), "no samples in the selected fold");
    let k = scored.iter().map(|s| s.1).max().unwrap() + 1;
    let mut groups: Vec<Vec<SampleScores>> = vec![Vec::new(); k];
    scored.iter().for_each(|(_, f, s)| groups[*f].push(*s));
    let groups: Vec<Vec<SampleScores>> = groups.into_iter().filter(|g| !g.is_empty()).collect();
    let (per, overall) = aggregate(&groups)?;
    let csv = report_csv(&per, &overall);
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("metrics.csv"), &csv)?;
            let mut samples = String::from("path,fold,cc,sim,kld\n");
            for (r, f, s) in &scored {
                writeln!(samples, "{},{f},{:.6},{:.6},{:.6}", r.display(), s.cc, s.sim, s.kld).unwrap();
            }
            fs::write(dir.join("samples.csv"), samples)?;
        }
        None => print!("{csv}"),
    }
    print!("{}", report_table(&per, &overall));
    Ok(())
}

fn cmd_project(cfg: &RunConfig, frame: &Path, out: &Path) -> Result<()> {
    if frame.is_dir() {
        bail!("--frames for project is a single ERP image");
    }
    let seq = load_frame_sequence(&[frame.to_path_buf()])?;
    let layout = build_layout(cfg.model.viewports, cfg.model.fov_deg.to_radians(), cfg.encoder.patch)?;
    let stack = project_to_tangents(&seq, &layout)?;
    let (p, c) = (layout.patch(), seq.channels());
    fs::create_dir_all(out)?;
    for t in 0..layout.count() {
        let data: Vec<f32> = (0..c).flat_map(|ch| stack.image(0, t, ch).iter().copied()).collect();
        write_planar_png(&out.join(format!("tangent_{t:02}.png")), c, p, p, &data)?;
    }
    let plan = BlendPlan::new(&layout, seq.grid())?;
    let mut erp = Vec::with_capacity(c * seq.grid().len());
    for ch in 0..c {
        let flat: Vec<f32> = (0..layout.count()).flat_map(|t| stack.image(0, t, ch).iter().copied()).collect();
        erp.extend(plan.apply(&flat)?.into_iter().map(|v| v as f32));
    }
    let g = seq.grid();
    write_planar_png(&out.join("reassembled.png"), c, g.height(), g.width(), &erp)?;
    println!("{} tangent images -> {}", layout.count(), out.display());
    Ok(())
}
