use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use fbnn::arch::Model;
use fbnn::config::{DataConfig, LoadedData, RunConfig};
use fbnn::encode::{ColorSpace, RawImage};
use fbnn::metrics::{MetricRow, Split, SubsetName};
use fbnn::persist::{self, Kind, Precision};
use fbnn::replay::{self, Phase, ReportRow, RunReport, ScenarioState, Strategy, Stream};
use fbnn::train::{eval_threads, fit_monitored, label_weights, predict_all, FitSpec, Item};
use fbnn::{seed, Error};

use crate::manifest::Manifest;
use crate::Global;

const OFFLINE_TAG: u64 = 0x0ff1;

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.scenario.seeds = vec![s];
    }
    if let Some(s) = &g.strategy {
        cfg.scenario.strategy =
            Strategy::parse(s).ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))?;
    }
    if let Some(mb) = g.buffer_mb {
        cfg.scenario.buffer_mb = Some(mb);
        cfg.scenario.buffer_samples = None;
        cfg.scenario.buffer_bits = None;
    }
    if let Some(o) = &g.out {
        cfg.output.dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let d = cfg.output.dir.clone();
    std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
    Ok(d)
}

fn load_data(g: &Global, cfg: &RunConfig, seed: u64) -> Result<LoadedData> {
    if matches!(cfg.data, DataConfig::Cifar100 { .. }) && !g.extended {
        return Err(Error::Config("CIFAR-100 runs take hours; pass --extended to allow them".into()).into());
    }
    Ok(cfg.data.load(g.data.as_deref(), seed)?)
}

fn stream(d: &LoadedData) -> Stream<'_> {
    Stream {
        train: &d.train,
        test: &d.test,
        split: &d.split,
    }
}

fn image_dims(d: &LoadedData) -> Result<(usize, usize)> {
    let img = d.train.images.first().context("empty training set")?;
    Ok((img.height, img.width))
}

fn items(ds: &fbnn::data::LabeledDataset, idx: &[usize], classes: &[usize]) -> Vec<Item> {
    idx.iter()
        .filter_map(|i| {
            let out = classes.iter().position(|c| *c == ds.labels[*i])?;
            Some(Item::image(ds.images[*i].clone(), out))
        })
        .collect()
}

fn rows_for(model: &Model, enc: fbnn::encode::Encoding, phase: Phase, sets: [(Split, &[Item]); 2], epochs: usize) -> Result<RunReport> {
    let classes: Vec<usize> = (0..model.n_classes()).collect();
    let mut report = RunReport::default();
    for (split, set) in sets {
        let preds = predict_all(model, set, enc, eval_threads())?;
        let labels: Vec<usize> = set.iter().map(|it| it.label).collect();
        for name in [SubsetName::Seen, SubsetName::Final] {
            let m = MetricRow::compute(name, split, &preds, &labels, &classes);
            report.rows.push(ReportRow::from_metric(phase, &m, epochs, 0, 0));
        }
    }
    Ok(report)
}

fn fmt_acc(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".into(), |a| format!("{:.2}%", 100.0 * a))
}

pub fn offline(g: &Global) -> Result<()> {
    let cfg = load_config(g)?;
    let seed = cfg.scenario.seeds[0];
    let data = load_data(g, &cfg, seed)?;
    let (h, w) = image_dims(&data)?;
    let arch = cfg.arch.resolve(h, w)?;
    let classes = data.split.all_classes();
    let gather = |ds, pick: fn(&fbnn::data::Subset) -> &Vec<usize>| -> Vec<Item> {
        let idx: Vec<usize> = data.split.phases().flat_map(|p| pick(p).iter().copied()).collect();
        items(ds, &idx, &classes)
    };
    let train = gather(&data.train, |p| &p.train);
    let val = gather(&data.train, |p| &p.val);
    let test = gather(&data.test, |p| &p.test);

    let mut model = Model::build(&arch, classes.len(), &mut seed::stream(seed, &[OFFLINE_TAG, 0]))?;
    let mut fs = FitSpec::new(cfg.training.clone(), cfg.loss.clone(), cfg.arch.encoding);
    if fs.loss.weighted {
        fs.class_weights = label_weights(&train, classes.len())?;
    }
    let fr = fit_monitored(&mut model, &train, &val, &test, &fs, None, &mut seed::stream(seed, &[OFFLINE_TAG, 1]))?;
    let report = rows_for(&model, cfg.arch.encoding, Phase::Task(0), [(Split::Train, &train), (Split::Test, &test)], fr.epochs)?;

    let dir = out_dir(&cfg)?;
    persist::save_model(&dir.join("model.fbnn"), &model, &classes, seed, Kind::Model)?;
    report.write_csv(&dir.join("metrics.csv"))?;
    let mut curve = csv::Writer::from_path(dir.join("curve.csv"))?;
    curve.write_record(["epoch", "lr", "loss", "trainAcc", "valAcc", "testAcc"])?;
    for e in &fr.curve {
        curve.write_record([
            e.epoch.to_string(),
            format!("{}", e.lr),
            format!("{}", e.loss),
            format!("{}", e.train_acc),
            format!("{}", e.val_acc),
            e.monitor_acc.map_or_else(|| "absent".into(), |a| format!("{a}")),
        ])?;
    }
    curve.flush()?;
    let mut m = Manifest::new("offline", &cfg);
    m.arch_digest = arch.digest();
    m.data = data.train.provenance.clone();
    m.write(&dir, &["model.fbnn".into(), "metrics.csv".into(), "curve.csv".into()])?;

    let p = Phase::Task(0);
    println!(
        "offline: {} classes, {} epochs (best {}), train {}, test {}",
        classes.len(),
        fr.epochs,
        fr.best_epoch,
        fmt_acc(report.accuracy(p, SubsetName::Seen, Split::Train)),
        fmt_acc(report.accuracy(p, SubsetName::Seen, Split::Test)),
    );
    Ok(())
}

pub fn pretrain(g: &Global) -> Result<()> {
    let cfg = load_config(g)?;
    let seed = cfg.scenario.seeds[0];
    let data = load_data(g, &cfg, seed)?;
    if data.split.pretrain.is_none() {
        return Err(Error::Config("the data has no pre-training classes".into()).into());
    }
    let (h, w) = image_dims(&data)?;
    let spec = cfg.scenario_spec(seed, h, w)?;
    let state = replay::start_scenario(&spec, &stream(&data))?;
    let dir = out_dir(&cfg)?;
    persist::save_model(&dir.join("pretrained.fbnn"), &state.model, &state.class_map, seed, Kind::Model)?;
    state.report.write_csv(&dir.join("metrics.csv"))?;
    let mut m = Manifest::new("pretrain", &cfg);
    m.arch_digest = spec.arch.digest();
    m.data = data.train.provenance.clone();
    m.write(&dir, &["pretrained.fbnn".into(), "metrics.csv".into()])?;
    let r = &state.report;
    println!(
        "pretrain: a_PT train {}, test {}, {} epochs",
        fmt_acc(r.accuracy(Phase::Pretrain, SubsetName::Pt, Split::Train)),
        fmt_acc(r.accuracy(Phase::Pretrain, SubsetName::Pt, Split::Test)),
        r.get(Phase::Pretrain, SubsetName::Pt, Split::Test).map_or(0, |x| x.epochs),
    );
    Ok(())
}

fn save_ckpt(dir: &Path, name: &str, state: &ScenarioState, seed: u64, files: &mut Vec<PathBuf>) -> Result<()> {
    persist::save_checkpoint(&dir.join(name), state, seed, Precision::F64)?;
    files.push(PathBuf::from(name));
    Ok(())
}

pub fn cil(g: &Global, resume: Option<&Path>, iso: bool) -> Result<()> {
    let mut cfg = load_config(g)?;
    let resumed = match resume {
        Some(p) => {
            let (seed, state) = persist::load_checkpoint(p, None).with_context(|| format!("loading {}", p.display()))?;
            cfg.scenario.seeds = vec![seed];
            Some(state)
        }
        None => None,
    };
    if iso && resumed.is_some() {
        return Err(Error::Config("--iso cannot resume a checkpoint".into()).into());
    }
    if iso && cfg.scenario.iso_grid_mb.is_empty() {
        return Err(Error::Config("--iso needs scenario.iso_grid_mb".into()).into());
    }
    let dir = out_dir(&cfg)?;
    let mut files = Vec::new();
    let mut reports = Vec::new();
    let mut arch_digest = String::new();
    let mut provenance = String::new();
    let mut resumed = resumed;
    for &seed in &cfg.scenario.seeds {
        let data = load_data(g, &cfg, seed)?;
        let (h, w) = image_dims(&data)?;
        let spec = cfg.scenario_spec(seed, h, w)?;
        arch_digest = spec.arch.digest();
        provenance = data.train.provenance.clone();
        let sub = PathBuf::from(format!("seed-{seed}"));
        std::fs::create_dir_all(dir.join(&sub))?;
        let s = stream(&data);

        if iso {
            let budgets: Vec<u64> = cfg.scenario.iso_grid_mb.iter().map(|mb| (mb * 1e6).round() as u64).collect();
            let pts = replay::iso_memory_sweep(&spec, &s, &budgets)?;
            let name = sub.join("iso.csv");
            std::fs::write(dir.join(&name), replay::sweep_csv(&pts)?)?;
            files.push(name);
            for p in &pts {
                println!(
                    "seed {seed} budget {} bits {:?}: {} samples, final {}, new {}, buffer {}",
                    p.budget_bits,
                    p.mode,
                    p.samples,
                    fmt_acc(p.final_acc),
                    fmt_acc(p.new_acc),
                    fmt_acc(p.buffer_test)
                );
            }
            continue;
        }

        let mut state = match resumed.take() {
            Some(st) => {
                if st.model.spec.digest() != spec.arch.digest() {
                    return Err(Error::Format("checkpoint architecture differs from the configuration".into()).into());
                }
                st
            }
            None => {
                let st = replay::start_scenario(&spec, &s)?;
                if cfg.scenario.checkpoint_tasks && data.split.pretrain.is_some() {
                    save_ckpt(&dir, &sub.join("pt.ckpt").to_string_lossy(), &st, seed, &mut files)?;
                }
                st
            }
        };
        while !state.is_done(&s) {
            replay::run_task(&mut state, &spec, &s)?;
            if cfg.scenario.checkpoint_tasks {
                let name = sub.join(format!("task-{}.ckpt", state.next_task - 1));
                save_ckpt(&dir, &name.to_string_lossy(), &state, seed, &mut files)?;
            }
        }
        let name = sub.join("report.csv");
        state.report.write_csv(&dir.join(&name))?;
        files.push(name);
        let last = Phase::Task(data.split.tasks.len() - 1);
        println!(
            "seed {seed} {}: final {}, old {}, new {}, d_final {}",
            spec.strategy.as_str(),
            fmt_acc(state.report.accuracy(last, SubsetName::Final, Split::Test)),
            fmt_acc(state.report.accuracy(last, SubsetName::Old, Split::Test)),
            fmt_acc(state.report.accuracy(last, SubsetName::New, Split::Test)),
            state
                .report
                .dispersion(last, SubsetName::Final, Split::Test)
                .map_or_else(|| "absent".into(), |d| format!("{d:.3}")),
        );
        reports.push(state.report);
    }
    if !reports.is_empty() {
        std::fs::write(dir.join("summary.csv"), summary_csv(&reports)?)?;
        files.push("summary.csv".into());
    }
    let mut m = Manifest::new("cil", &cfg);
    m.arch_digest = arch_digest;
    m.data = provenance;
    m.write(&dir, &files)?;
    Ok(())
}

/// Mean and sample standard deviation over seeds of every present metric.
fn summary_csv(reports: &[RunReport]) -> Result<String> {
    let mut acc: BTreeMap<(Phase, SubsetName, Split), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in reports {
        for row in &r.rows {
            let e = acc.entry((row.task, row.subset, row.split)).or_default();
            if let Some(a) = row.accuracy {
                e.0.push(a);
            }
            if let Some(d) = row.dispersion {
                e.1.push(d);
            }
        }
    }
    let stats = |v: &[f64]| -> (String, String) {
        if v.is_empty() {
            return ("absent".into(), "absent".into());
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        (format!("{mean}"), format!("{sd}"))
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["task", "subset", "split", "runs", "accuracyMean", "accuracyStd", "dispersionMean", "dispersionStd"])?;
    for ((t, s, sp), (a, d)) in &acc {
        let (am, asd) = stats(a);
        let (dm, dsd) = stats(d);
        w.write_record([t.to_string(), s.to_string(), sp.as_str().into(), a.len().to_string(), am, asd, dm, dsd])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn eval(g: &Global, model_path: &Path) -> Result<()> {
    let cfg = load_config(g)?;
    let saved = persist::load_model(model_path, None).with_context(|| format!("loading {}", model_path.display()))?;
    let data = load_data(g, &cfg, saved.seed)?;
    let (h, w) = image_dims(&data)?;
    let want = [h, w, cfg.arch.encoding.channels()];
    if saved.model.spec.input != want {
        return Err(Error::Config(format!(
            "model input {:?} does not match data and encoding {want:?}",
            saved.model.spec.input
        ))
        .into());
    }
    let gather = |ds, pick: fn(&fbnn::data::Subset) -> &Vec<usize>| -> Vec<Item> {
        let idx: Vec<usize> = data.split.phases().flat_map(|p| pick(p).iter().copied()).collect();
        items(ds, &idx, &saved.class_map)
    };
    let train = gather(&data.train, |p| &p.train);
    let test = gather(&data.test, |p| &p.test);
    let report = rows_for(&saved.model, cfg.arch.encoding, Phase::Task(0), [(Split::Train, &train), (Split::Test, &test)], 0)?;
    let dir = out_dir(&cfg)?;
    report.write_csv(&dir.join("eval.csv"))?;
    let mut m = Manifest::new("eval", &cfg);
    m.arch_digest = saved.model.spec.digest();
    m.data = data.train.provenance.clone();
    m.write(&dir, &["eval.csv".into()])?;
    let p = Phase::Task(0);
    println!(
        "eval: {} classes, train {}, test {}, d_test {}",
        saved.class_map.len(),
        fmt_acc(report.accuracy(p, SubsetName::Seen, Split::Train)),
        fmt_acc(report.accuracy(p, SubsetName::Seen, Split::Test)),
        report
            .dispersion(p, SubsetName::Seen, Split::Test)
            .map_or_else(|| "absent".into(), |d| format!("{d:.3}")),
    );
    Ok(())
}

pub fn encode(g: &Global, image: Option<&Path>, synthetic: bool, pixel: Option<Vec<u8>>, limit: usize) -> Result<()> {
    let cfg = load_config(g)?;
    let enc = cfg.arch.encoding;
    let img = match (image, synthetic, pixel) {
        (Some(p), _, _) => {
            let rgb = image::open(p).with_context(|| format!("reading {}", p.display()))?.to_rgb8();
            let (w, h) = rgb.dimensions();
            RawImage::new(h as usize, w as usize, ColorSpace::Rgb, rgb.into_raw())?
        }
        (None, true, _) => {
            let ds = fbnn::data::make_synthetic(1, 1, 8, cfg.scenario.seeds[0])?;
            ds.images[0].clone()
        }
        (None, false, Some(px)) => match px[..] {
            [r, g, b] => RawImage::filled(1, 1, [r, g, b]),
            _ => bail!(Error::Config(format!("--pixel needs three values, got {}", px.len()))),
        },
        (None, false, None) => bail!(Error::Config("give --image, --synthetic or --pixel".into())),
    };
    let q = enc.quantize(&img)?;
    let bits = enc.encode(&img)?;
    let c = enc.channels();
    let n = img.height * img.width;
    let mut out = String::new();
    writeln!(
        out,
        "encoding {enc:?}: {c} channels, {} bits/pixel stored",
        enc.bits_per_pixel()
    )?;
    writeln!(
        out,
        "image {}x{}: {} pixels, {} bits stored, {} bits encoded",
        img.height,
        img.width,
        n,
        q.storage_bits(),
        bits.len()
    )?;
    for p in 0..n.min(limit) {
        let lv = &q.levels[3 * p..3 * p + 3];
        let signs: String = (0..c).map(|k| if bits.bit(p * c + k) { '+' } else { '-' }).collect();
        writeln!(
            out,
            "pixel ({}, {}) value {:?} levels {:?} bits {signs}",
            p / img.width,
            p % img.width,
            img.pixel(p / img.width, p % img.width),
            lv
        )?;
    }
    let again = enc.quantize(&q.dequantize())?;
    let ok = again.levels == q.levels;
    writeln!(out, "round trip: {}", if ok { "levels preserved" } else { "levels changed" })?;
    print!("{out}");
    let dir = out_dir(&cfg)?;
    std::fs::write(dir.join("encode.txt"), &out)?;
    let mut m = Manifest::new("encode", &cfg);
    m.data = image.map_or_else(|| "generated".into(), |p| p.display().to_string());
    m.write(&dir, &["encode.txt".into()])?;
    if !ok {
        bail!("quantization round trip changed levels");
    }
    Ok(())
}
