//! Subcommand implementations behind the `spinalxfer` binary.
//!
//! Each command returns the single summary line the binary prints; every
//! other artifact is written into a fresh run directory under the output
//! root (`[run] output_root`, else `$SPINALXFER_OUTPUT_ROOT`, else `runs`).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::augment::{covid_train_with, eval_resize, mnist_train_with, AugmentSpec, Image};
use crate::backbone::{load_feature_file, MiniCnnConfig};
use crate::checkpoint::Checkpoint;
use crate::config::{AugmentKind, DataKind, ExperimentConfig, HeadKind};
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, SpinalHeadConfig, TraditionalHeadConfig};
use crate::ingest::{
    dicom_to_rgb, load_idx, parse_minimal_dicom, read_pgm16, split_three, split_train_val, LabeledImageSet,
};
use crate::metrics::{format_percent, metrics_csv, overall_accuracy, ConfusionMatrix};
use crate::tensor::Tensor;
use crate::trainer::{
    evaluate, history_csv, multi_restart, prepare_protocol, two_stage_train, Model, Protocol, RunSummary, Samples,
    TrainData, TrainOutcome,
};

pub const OUTPUT_ROOT_ENV: &str = "SPINALXFER_OUTPUT_ROOT";

/// Training data plus the shapes the model is built for.
pub struct LoadedData {
    pub data: TrainData,
    /// `(C, H, W)` after transforms, or `None` for feature vectors.
    pub image_shape: Option<(usize, usize, usize)>,
    pub input_dim: usize,
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory")))
    }
}

fn mnist_files(dir: &Path) -> Result<[PathBuf; 4]> {
    require(dir)?;
    let files = [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ]
    .map(|f| dir.join(f));
    for f in &files {
        require(f)?;
    }
    Ok(files)
}

fn limit(set: LabeledImageSet, n: usize) -> Result<LabeledImageSet> {
    if n == 0 {
        Ok(set)
    } else {
        set.take(n)
    }
}

/// Loads an `ingest` archive. Entries must be named `<class>/<stem>`;
/// classes are numbered in sorted order.
pub fn load_archive(path: &Path) -> Result<LabeledImageSet> {
    let ck = Checkpoint::load(path)?;
    if ck.is_empty() {
        return Err(Error::Data(format!("{} holds no images", path.display())));
    }
    let mut classes = BTreeSet::new();
    for name in ck.names() {
        let (class, _) = name
            .split_once('/')
            .ok_or_else(|| Error::Data(format!("archive entry {name:?} has no class directory")))?;
        classes.insert(class.to_string());
    }
    let class_names: Vec<String> = classes.into_iter().collect();
    let shape = ck.entries()[0].1.shape().to_vec();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (name, t) in ck.entries() {
        if t.shape() != shape.as_slice() || shape.len() != 3 {
            return Err(Error::Data(format!("archive entry {name:?} has shape {:?}, expected {shape:?}", t.shape())));
        }
        let class = name.split_once('/').unwrap().0;
        labels.push(class_names.iter().position(|c| c == class).unwrap());
        data.extend_from_slice(t.to::<f32>().data());
    }
    let mut dims = vec![labels.len()];
    dims.extend(&shape);
    LabeledImageSet::new(Tensor::new(dims, data)?, labels, class_names)
}

fn train_transform(cfg: &ExperimentConfig, seed: u64) -> AugmentSpec {
    match cfg.augment {
        AugmentKind::Mnist => mnist_train_with(seed, &cfg.pipeline),
        AugmentKind::Covid => covid_train_with(seed, &cfg.pipeline),
        AugmentKind::None => eval_resize(cfg.pipeline.resize),
    }
}

/// Loads and splits the configured dataset. The split uses the config seed
/// so every restart sees the same partition.
pub fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData> {
    let d = &cfg.data;
    let rename = |mut s: Samples| -> Samples {
        if let Some(names) = &d.class_names {
            if names.len() >= s.classes() {
                s.class_names = names.clone();
            }
        }
        s
    };
    let filter = |s: LabeledImageSet| match &d.classes {
        Some(keep) => s.filter_classes(keep),
        None => Ok(s),
    };
    let (train, val, test) = match d.kind {
        DataKind::Mnist => {
            let [ti, tl, si, sl] = mnist_files(&d.dir)?;
            let train = limit(filter(load_idx(&ti, &tl)?)?, d.train_subset)?;
            let test = limit(filter(load_idx(&si, &sl)?)?, d.test_subset)?;
            let (train, val) = split_train_val(&train, d.train_fraction, cfg.seed)?;
            (train.into(), val.into(), test.into())
        }
        DataKind::Archive => {
            let path = d.train_file.as_ref().expect("validated");
            require(path)?;
            let all = filter(load_archive(path)?)?;
            let (a, b, c) = split_three(&limit(all, d.train_subset)?, d.train_fraction, d.val_fraction, cfg.seed)?;
            (a.into(), b.into(), c.into())
        }
        DataKind::Features => {
            let train_path = d.train_file.as_ref().expect("validated");
            require(train_path)?;
            let test_path = d
                .test_file
                .as_ref()
                .ok_or_else(|| Error::Config("[data] test_file is required for feature data".into()))?;
            require(test_path)?;
            let train = load_feature_file(train_path)?;
            let test = load_feature_file(test_path)?;
            let classes = train.labels.iter().chain(&test.labels).max().copied().unwrap_or(0) + 1;
            let names: Vec<String> = (0..classes).map(|c| c.to_string()).collect();
            let as_set = |s: crate::backbone::FeatureSet| -> Result<LabeledImageSet> {
                let (n, dim) = (s.features.shape()[0], s.features.shape()[1]);
                LabeledImageSet::new(s.features.reshape(vec![n, dim, 1, 1])?, s.labels, names.clone())
            };
            let flat = |s: LabeledImageSet| -> Result<Samples> {
                let n = s.len();
                let dim = s.images.numel() / n;
                Samples::new(s.images.reshape(vec![n, dim])?, s.labels, s.class_names)
            };
            let train = limit(filter(as_set(train)?)?, d.train_subset)?;
            let test = limit(filter(as_set(test)?)?, d.test_subset)?;
            let (train, val) = split_train_val(&train, d.train_fraction, cfg.seed)?;
            (flat(train)?, flat(val)?, flat(test)?)
        }
    };
    let (train, val, test) = (rename(train), rename(val), rename(test));
    if d.kind == DataKind::Features {
        let input_dim = train.inputs.shape()[1];
        return Ok(LoadedData {
            data: TrainData {
                train,
                val,
                test: Some(test),
                train_transform: None,
                eval_transform: None,
            },
            image_shape: None,
            input_dim,
        });
    }
    let s = train.inputs.shape();
    let native = (s[1], s[2], s[3]);
    let augment = train_transform(cfg, cfg.seed);
    augment.validate()?;
    let eval = eval_resize(cfg.pipeline.resize);
    let shape = augment.output_shape(native);
    if eval.output_shape(native) != shape {
        return Err(Error::Config(format!(
            "training images come out {:?} but evaluation images {:?}",
            shape,
            eval.output_shape(native)
        )));
    }
    let input_dim = shape.0 * shape.1 * shape.2;
    Ok(LoadedData {
        data: TrainData {
            train,
            val,
            test: Some(test),
            train_transform: Some(augment),
            eval_transform: Some(eval),
        },
        image_shape: Some(shape),
        input_dim,
    })
}

pub fn backbone_config(cfg: &ExperimentConfig, loaded: &LoadedData) -> Result<Option<MiniCnnConfig>> {
    match (&cfg.backbone, loaded.image_shape) {
        (None, _) => Ok(None),
        (Some(widths), Some((c, h, w))) => {
            let bb = MiniCnnConfig {
                in_channels: c,
                widths: widths.clone(),
                height: h,
                width: w,
            };
            bb.validate()?;
            Ok(Some(bb))
        }
        (Some(_), None) => Err(Error::Config("a backbone needs image data".into())),
    }
}

pub fn head_config(cfg: &ExperimentConfig, kind: HeadKind, input_dim: usize, classes: usize) -> Result<HeadConfig> {
    let head = match kind {
        HeadKind::Spinal => HeadConfig::Spinal(SpinalHeadConfig {
            half_order: cfg.head.half_order,
            ..SpinalHeadConfig::new(input_dim, cfg.head.width, cfg.head.sublayers, classes)
        }),
        HeadKind::Traditional => HeadConfig::Traditional(TraditionalHeadConfig {
            input_dim,
            hidden: cfg.head.hidden,
            classes,
        }),
    };
    match &head {
        HeadConfig::Spinal(c) => c.validate()?,
        HeadConfig::Traditional(c) => c.validate()?,
    }
    Ok(head)
}

fn model_input_dim(bb: &Option<MiniCnnConfig>, loaded: &LoadedData) -> usize {
    bb.as_ref().map_or(loaded.input_dim, MiniCnnConfig::feature_dim)
}

fn output_root(cfg: Option<&ExperimentConfig>) -> PathBuf {
    cfg.and_then(|c| c.output_root.clone())
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// `<root>/<name>-<YYYYmmdd-HHMMSS>[-k]`, never reusing a directory.
pub fn create_run_dir(root: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
    for k in 1.. {
        let dir = if k == 1 {
            root.join(format!("{name}-{stamp}"))
        } else {
            root.join(format!("{name}-{stamp}-{k}"))
        };
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!()
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_confusion(dir: &Path, m: &ConfusionMatrix) -> Result<()> {
    write(&dir.join("confusion.csv"), m.to_csv())?;
    write(&dir.join("metrics.csv"), metrics_csv(m))?;
    write(&dir.join("confusion.ppm"), m.to_ppm(16))
}

fn load_source(cfg: &ExperimentConfig) -> Result<Option<Checkpoint>> {
    match (&cfg.source, cfg.protocol) {
        (_, Protocol::Scratch) => Ok(None),
        (Some(p), _) => Checkpoint::load(p).map(Some),
        (None, p) => Err(Error::Config(format!("protocol {} requires [protocol] source", p.name()))),
    }
}

/// One finished restart.
pub struct RestartResult {
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub checkpoint: Checkpoint,
}

impl RestartResult {
    pub fn test_accuracy(&self) -> f64 {
        self.outcome.test_accuracy().unwrap_or(f64::NAN)
    }

    pub fn backbone_crc(&self) -> Option<u32> {
        let bb = self.checkpoint.filtered("backbone.");
        (!bb.is_empty()).then(|| bb.crc())
    }
}

/// Runs every restart of `cfg` with the given head kind, in memory.
pub fn run_restarts(cfg: &ExperimentConfig, kind: HeadKind, loaded: &LoadedData) -> Result<Vec<RestartResult>> {
    let source = load_source(cfg)?;
    let bb = backbone_config(cfg, loaded)?;
    let head = head_config(cfg, kind, model_input_dim(&bb, loaded), loaded.data.train.classes())?;
    multi_restart(cfg.restarts, cfg.workers, cfg.seed, |_, seed| {
        let model = prepare_protocol(cfg.protocol, bb.as_ref(), &head, source.as_ref(), seed)?;
        let mut data = loaded.data.clone();
        if cfg.augment != AugmentKind::None && loaded.image_shape.is_some() {
            data.train_transform = Some(train_transform(cfg, seed));
        }
        let outcome = two_stage_train(model, &data, &cfg.schedule, seed)?;
        let checkpoint = Checkpoint::from_model(outcome.state.best_model())?;
        Ok(RestartResult {
            seed,
            outcome,
            checkpoint,
        })
    })
}

fn summarize(results: &[RestartResult]) -> Result<RunSummary> {
    RunSummary::from_runs(
        results.iter().map(|r| r.seed).collect(),
        results.iter().map(RestartResult::test_accuracy).collect(),
    )
}

fn summary_csv(results: &[RestartResult], summary: &RunSummary) -> String {
    let mut out = String::from("restart,seed,best_epoch,best_val_acc,test_acc\n");
    for (k, r) in results.iter().enumerate() {
        let (epoch, val) = r.outcome.state.best.as_ref().map_or((0, f64::NAN), |(e, v, _)| (*e, *v));
        let _ = writeln!(out, "{k},{},{epoch},{val:.6},{:.6}", r.seed, r.test_accuracy());
    }
    let _ = writeln!(out, "top,,,,{:.6}", summary.top);
    let _ = writeln!(out, "average,,,,{:.6}", summary.average);
    out
}

/// `train <cfg>`: every restart's history, checkpoint and test metrics.
pub fn cmd_train(config_path: &Path) -> Result<String> {
    let cfg = ExperimentConfig::load(config_path)?;
    let loaded = load_data(&cfg)?;
    let results = run_restarts(&cfg, cfg.head.kind, &loaded)?;
    let summary = summarize(&results)?;
    let dir = create_run_dir(&output_root(Some(&cfg)), &cfg.name)?;
    write(&dir.join("config.ini"), cfg.echo())?;
    write(&dir.join("seed.txt"), format!("{}\n", cfg.seed))?;
    for (k, r) in results.iter().enumerate() {
        let rdir = dir.join(format!("restart-{k}"));
        fs::create_dir(&rdir).map_err(|e| Error::io(&rdir, e))?;
        write(&rdir.join("history.csv"), history_csv(&r.outcome.state.history))?;
        r.checkpoint.save(&rdir.join("model.spnc"))?;
        if let Some(m) = &r.outcome.test {
            write_confusion(&rdir, m)?;
        }
    }
    write(&dir.join("summary.csv"), summary_csv(&results, &summary))?;
    let line = format!(
        "train {} protocol={} head={} restarts={} top={} average={} dir={}",
        cfg.name,
        cfg.protocol.name(),
        cfg.head.kind.name(),
        cfg.restarts,
        format_percent(summary.top),
        format_percent(summary.average),
        dir.display()
    );
    write(&dir.join("summary.txt"), format!("{line}\n"))?;
    Ok(line)
}

/// `evaluate <ckpt> <dataset> <cfg>`; `dataset` is `train`, `val`, `test`
/// or the path of a feature file or image archive.
pub fn cmd_evaluate(checkpoint: &Path, dataset: &str, config_path: &Path) -> Result<String> {
    let cfg = ExperimentConfig::load(config_path)?;
    let ck = Checkpoint::load(checkpoint)?;
    let loaded = load_data(&cfg)?;
    let samples = match dataset {
        "train" => loaded.data.train.clone(),
        "val" => loaded.data.val.clone(),
        "test" => loaded.data.test.clone().expect("test split"),
        path => {
            let p = Path::new(path);
            require(p)?;
            let mut s = if cfg.data.kind == DataKind::Features {
                let set = load_feature_file(p)?;
                let names = loaded.data.train.class_names.clone();
                Samples::from_features(set, names)?
            } else {
                Samples::from(load_archive(p)?)
            };
            if let Some(names) = &cfg.data.class_names {
                if names.len() >= s.classes() {
                    s.class_names = names.clone();
                }
            }
            s
        }
    };
    let bb = backbone_config(&cfg, &loaded)?;
    let head = head_config(&cfg, cfg.head.kind, model_input_dim(&bb, &loaded), loaded.data.train.classes())?;
    let model: Model<f32> = Model::from_checkpoint(bb, &head, &ck)?;
    let m = evaluate(&model, &samples, loaded.data.eval_transform.as_ref())?;
    let acc = overall_accuracy(&m)?;
    let dir = create_run_dir(&output_root(Some(&cfg)), &format!("{}-eval", cfg.name))?;
    write(&dir.join("config.ini"), cfg.echo())?;
    write_confusion(&dir, &m)?;
    let line = format!(
        "evaluate {} accuracy={} ({}/{}) dir={}",
        dataset,
        format_percent(acc),
        m.trace(),
        m.total(),
        dir.display()
    );
    write(&dir.join("summary.txt"), format!("{line}\n"))?;
    Ok(line)
}

/// Sections two configs must agree on to be compared.
const SHARED_SECTIONS: &[&str] = &["data", "augment", "backbone", "head", "schedule"];

/// `compare <cfg_tl> <cfg_ti>`: both protocols with both head kinds, as one
/// CSV row per protocol with average and top accuracy per head.
pub fn cmd_compare(tl_path: &Path, ti_path: &Path) -> Result<String> {
    let tl = ExperimentConfig::load(tl_path)?;
    let ti = ExperimentConfig::load(ti_path)?;
    for section in SHARED_SECTIONS {
        if tl.section(section) != ti.section(section) {
            return Err(Error::Config(format!("configs differ in [{section}]")));
        }
    }
    if tl.restarts != ti.restarts || tl.seed != ti.seed {
        return Err(Error::Config("configs differ in restarts or seed".into()));
    }
    if tl.protocol != Protocol::TransferLearning || ti.protocol != Protocol::TransferredInit {
        return Err(Error::Config("compare expects a tl config followed by a ti config".into()));
    }
    let loaded = load_data(&tl)?;
    let dir = create_run_dir(&output_root(Some(&tl)), &format!("{}-compare", tl.name))?;
    write(&dir.join("tl.ini"), tl.echo())?;
    write(&dir.join("ti.ini"), ti.echo())?;
    let model_name = if tl.backbone.is_some() { "MiniCNN" } else { "features" };
    let mut csv = String::from(
        "method,model,traditional_average,traditional_top,spinal_average,spinal_top,backbone_crc,source_crc\n",
    );
    let mut line = String::from("compare");
    for cfg in [&tl, &ti] {
        let source_crc = load_source(cfg)?.map(|s| s.filtered("backbone.").crc());
        let mut cells = Vec::new();
        let mut crcs = BTreeSet::new();
        for kind in [HeadKind::Traditional, HeadKind::Spinal] {
            let results = run_restarts(cfg, kind, &loaded)?;
            let summary = summarize(&results)?;
            let rdir = dir.join(format!("{}-{}", cfg.protocol.name(), kind.name()));
            fs::create_dir(&rdir).map_err(|e| Error::io(&rdir, e))?;
            write(&rdir.join("summary.csv"), summary_csv(&results, &summary))?;
            for (k, r) in results.iter().enumerate() {
                write(&rdir.join(format!("history-{k}.csv")), history_csv(&r.outcome.state.history))?;
                r.checkpoint.save(&rdir.join(format!("restart-{k}.spnc")))?;
                crcs.extend(r.backbone_crc());
            }
            cells.push(format_percent(summary.average));
            cells.push(format_percent(summary.top));
            let _ = write!(
                line,
                " {}/{}: top={} average={}",
                cfg.protocol.name(),
                kind.name(),
                format_percent(summary.top),
                format_percent(summary.average)
            );
        }
        let crcs: Vec<String> = crcs.iter().map(|c| format!("{c:08x}")).collect();
        let _ = writeln!(
            csv,
            "{},{model_name},{},{},{},{},{},{}",
            cfg.protocol.name(),
            cells[0],
            cells[1],
            cells[2],
            cells[3],
            crcs.join(";"),
            source_crc.map_or_else(String::new, |c| format!("{c:08x}"))
        );
    }
    write(&dir.join("compare.csv"), &csv)?;
    let _ = write!(line, " dir={}", dir.display());
    write(&dir.join("summary.txt"), format!("{line}\n"))?;
    Ok(line)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IngestKind {
    Dicom,
    Pgm,
}

impl std::str::FromStr for IngestKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dicom" => Ok(IngestKind::Dicom),
            "pgm" => Ok(IngestKind::Pgm),
            other => Err(Error::Usage(format!("ingest kind {other:?} is not dicom or pgm"))),
        }
    }
}

fn ingest_one(kind: IngestKind, path: &Path, size: usize) -> Result<Tensor<f32>> {
    let raw = match kind {
        IngestKind::Dicom => parse_minimal_dicom(path)?,
        IngestKind::Pgm => read_pgm16(path)?,
    };
    dicom_to_rgb(&raw, size).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

/// `ingest <kind> <in> <out>`: one file, or a directory whose files become
/// `<stem>` entries and whose subdirectories become `<class>/<stem>` entries.
pub fn cmd_ingest(kind: IngestKind, input: &Path, output: &Path, size: usize) -> Result<String> {
    require(input)?;
    let mut ck = Checkpoint::new();
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if input.is_dir() {
        for entry in sorted_entries(input)? {
            if entry.is_dir() {
                let class = entry.file_name().unwrap().to_string_lossy().into_owned();
                for file in sorted_entries(&entry)? {
                    if file.is_file() {
                        ck.insert(format!("{class}/{}", stem(&file)), ingest_one(kind, &file, size)?)?;
                    }
                }
            } else {
                ck.insert(stem(&entry), ingest_one(kind, &entry, size)?)?;
            }
        }
    } else {
        ck.insert(stem(input), ingest_one(kind, input, size)?)?;
    }
    ck.save(output)?;
    Ok(format!(
        "ingest {} images {size}x{size} crc={:08x} -> {}",
        ck.len(),
        ck.crc(),
        output.display()
    ))
}

/// PPM (P6); single-channel images are written as gray.
pub fn image_to_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    let n = img.height * img.width;
    for i in 0..n {
        for c in 0..3 {
            let plane = if img.channels == 3 { c } else { 0 };
            let v = img.data[plane * n + i];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// `augment-preview <cfg> <n> <dir>`: the first `n` training images after
/// the epoch-0 training transform.
pub fn cmd_augment_preview(config_path: &Path, n: usize, out_dir: &Path) -> Result<String> {
    let cfg = ExperimentConfig::load(config_path)?;
    let loaded = load_data(&cfg)?;
    let train = &loaded.data.train;
    let spec = train_transform(&cfg, cfg.seed);
    let n = n.min(train.len());
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if loaded.image_shape.is_none() {
        return Err(Error::Config("augment-preview needs image data".into()));
    }
    let s = train.inputs.shape();
    let plane = s[1] * s[2] * s[3];
    for i in 0..n {
        let img = Image::new(s[1], s[2], s[3], train.inputs.data()[i * plane..(i + 1) * plane].to_vec())?;
        let out = spec.apply(&img, i as u64, 0)?;
        write(&out_dir.join(format!("preview-{i:03}.ppm")), image_to_ppm(&out))?;
    }
    Ok(format!("augment-preview {n} images -> {}", out_dir.display()))
}

