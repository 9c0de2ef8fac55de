use std::io::Write;
use std::path::{Path, PathBuf};

use equibody::bodymodel::{build_toy_body, encode_dataset, read_dataset, write_obj, BodyModel, BodyParams, Dataset, PartMap};
use equibody::equinet::{EquiNet, HeadLayout};
use equibody::group60::{build_icosahedral_group, decode_group_unchecked, RotationGroup};
use equibody::trainer::{
    epoch_csv, evaluate, generate_dataset, load_model, metrics_csv, plot_csv, rotate_by_group, save_model, summary_table,
    train_stage, EpochRecord, EvalReport, GenSpec, PoseDistribution, RootMode, Stage, TrainConfig, TrainedModel,
};
use nalgebra::Vector3;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checks::{run_suite, Suite};
use crate::config::{hex, RunConfig};
use crate::{CheckArgs, CliError, EvalArgs, GenArgs, InferArgs, StageSel, TrainArgs, DATA_DIR_ENV};

type V3 = Vector3<f64>;

pub const TRAIN_FILE: &str = "train-id.aqd";
pub const VAL_FILE: &str = "val-id.aqd";
pub const TEST_ID_FILE: &str = "test-id.aqd";
pub const TEST_OOD_FILE: &str = "test-ood.aqd";

fn say(out: &mut impl Write, text: impl std::fmt::Display) -> Result<(), CliError> {
    writeln!(out, "{text}").map_err(|e| CliError::Io(format!("stdout: {e}")))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn data_dir(flag: Option<&PathBuf>) -> PathBuf {
    flag.cloned().or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("data"))
}

fn body_for(cfg: &RunConfig) -> Result<(BodyModel, PartMap), CliError> {
    Ok((build_toy_body(&cfg.body)?, PartMap::for_joints(cfg.body.joints)))
}

#[derive(Debug, Serialize)]
pub struct ManifestEntry {
    pub file: String,
    pub samples: usize,
    pub points: usize,
    pub poses: &'static str,
    pub pose_seed: u64,
    pub sample_seed: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub datasets: Vec<ManifestEntry>,
}

/// Seeds and pose distributions of the four standard datasets.
fn dataset_plan(cfg: &RunConfig) -> Vec<(&'static str, &'static str, PoseDistribution, GenSpec)> {
    let k = cfg.body.joints;
    let d = &cfg.data;
    let s = cfg.seed;
    let id = PoseDistribution::uniform(k, d.id_range_deg.to_radians(), RootMode::Off, s.wrapping_add(1));
    let ood = PoseDistribution::uniform(k, d.ood_range_deg.to_radians(), RootMode::UniformSo3, s.wrapping_add(2));
    let spec = |count, seed| GenSpec { count, n_points: d.points, noise: d.noise, seed };
    // Both test sets share one sampling seed, so they hold the same bodies in different poses.
    vec![
        (TRAIN_FILE, "id", id.clone(), spec(d.train, s.wrapping_add(10))),
        (VAL_FILE, "id", id.clone(), spec(d.val, s.wrapping_add(20))),
        (TEST_ID_FILE, "id", id, spec(d.test, s.wrapping_add(30))),
        (TEST_OOD_FILE, "ood", ood, spec(d.test, s.wrapping_add(30))),
    ]
}

pub fn gen(args: &GenArgs, out: &mut impl Write) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    let dir = data_dir(args.out.as_ref());
    if !dir.is_dir() {
        return Err(CliError::Io(format!("output directory {} does not exist", dir.display())));
    }
    let group = build_icosahedral_group();
    let (model, map) = body_for(&cfg)?;
    let mut entries = Vec::new();
    for (file, poses, dist, spec) in dataset_plan(&cfg) {
        let ds = generate_dataset(&model, &map, &group, &dist, &spec)?;
        let bytes = encode_dataset(&ds)?;
        write_file(&dir.join(file), &bytes)?;
        entries.push(ManifestEntry {
            file: file.to_string(),
            samples: spec.count,
            points: spec.n_points,
            poses,
            pose_seed: dist.seed,
            sample_seed: spec.seed,
            sha256: hex(&Sha256::digest(&bytes)),
        });
    }
    write_file(&dir.join("config.toml"), cfg.to_toml())?;
    let manifest = Manifest { config_hash: cfg.hash(), seed: cfg.seed, datasets: entries };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join("manifest.json"), format!("{json}\n"))?;
    say(out, json)
}

fn load_dataset(path: &Path, model: &BodyModel) -> Result<Dataset, CliError> {
    if !path.is_file() {
        return Err(CliError::Io(format!("dataset {} not found", path.display())));
    }
    let ds = read_dataset(path, model.tree()).map_err(|e| CliError::io(path, e))?;
    if &ds.header.body != model.config() {
        return Err(CliError::Config(format!("{} was generated for a different body configuration", path.display())));
    }
    Ok(ds)
}

/// Appends `log` to a stored `epoch,v2v_cm,mpjpe_cm,seg_acc` history,
/// numbering its epochs after the existing rows.
fn extend_history(previous: Option<&str>, log: &[EpochRecord]) -> String {
    let fresh = plot_csv(log);
    let mut lines: Vec<String> = previous.map(|p| p.lines().map(str::to_string).collect()).unwrap_or_default();
    if lines.is_empty() {
        return fresh;
    }
    let offset = lines.len() - 1;
    for row in fresh.lines().skip(1) {
        let (epoch, rest) = row.split_once(',').expect("plot rows have columns");
        lines.push(format!("{},{rest}", epoch.parse::<usize>().expect("numeric epoch") + offset));
    }
    lines.join("\n") + "\n"
}

pub fn train(args: &TrainArgs, out: &mut impl Write) -> Result<(), CliError> {
    let mut cfg = args.config.resolve()?;
    cfg.train.augment_so3 |= args.augment_so3;
    let init = match (args.stage, &args.init) {
        (StageSel::Two, None) => return Err(CliError::Config("--stage 2 needs --init <stage-1 checkpoint>".into())),
        (StageSel::Two, Some(p)) => Some(p.clone()),
        (_, Some(_)) => return Err(CliError::Config("--init only applies to --stage 2".into())),
        _ => None,
    };
    let dir = data_dir(args.data.as_ref());
    let group = build_icosahedral_group();
    let (model, map) = body_for(&cfg)?;
    let train_set = load_dataset(&dir.join(TRAIN_FILE), &model)?;
    let val_set = if args.no_val { None } else { Some(load_dataset(&dir.join(VAL_FILE), &model)?) };
    let val_set = val_set.filter(|v| !v.records.is_empty());
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;

    let net = EquiNet::new(cfg.network.clone(), HeadLayout::from_body(&model, &map)?)?;
    let stage_cfg = |epochs, augment_so3| TrainConfig {
        epochs,
        batch_size: cfg.train.batch_size,
        learning_rate: cfg.train.learning_rate,
        seed: cfg.seed,
        augment_so3,
        loss: cfg.train.loss.clone(),
    };
    let mut history: Option<String> = None;
    let mut log: Vec<EpochRecord> = Vec::new();
    let mut params = match &init {
        Some(path) => {
            let prev = load_model(path, &group)?;
            if prev.net != net || prev.body != cfg.body {
                return Err(CliError::Config(format!("{} was trained with a different configuration", path.display())));
            }
            history = prev.meta("history").map(str::to_string);
            prev.params
        }
        None => net.init_params::<f32>(cfg.seed),
    };
    let metadata = |stage: Stage, augment: bool, history: String| {
        vec![
            ("stage".to_string(), stage.number().to_string()),
            ("augment_so3".to_string(), augment.to_string()),
            ("seed".to_string(), cfg.seed.to_string()),
            ("config_hash".to_string(), cfg.hash()),
            ("history".to_string(), history),
        ]
    };
    let save = |path: &Path, params: &equibody::microtensor::ParamStore<f32>, meta| -> Result<(), CliError> {
        let tm = TrainedModel { net: net.clone(), body: cfg.body.clone(), part_map: map.clone(), params: params.clone(), metadata: meta };
        save_model(path, &group, &tm).map_err(|e| CliError::io(path, e))
    };
    let mut printer = |r: &EpochRecord| {
        let val = r.val.map_or(String::new(), |m| {
            format!("  val V2V {:.3} cm  MPJPE {:.3} cm  acc {:.2}%", m.v2v_cm, m.mpjpe_cm, m.seg_accuracy_percent)
        });
        let _ = writeln!(
            out,
            "stage {} epoch {:>2}  loss {:.5}  train acc {:.2}%{val}  ({:.1}s)",
            r.stage, r.epoch, r.terms.total, r.train_seg_accuracy, r.wall_seconds
        );
    };

    if args.stage != StageSel::Two {
        let (p, l) = train_stage(&net, &group, &model, params, Stage::One, &train_set, val_set.as_ref(), &stage_cfg(cfg.train.stage1_epochs, false), &mut printer)?;
        params = p;
        log.extend(l);
        let h = extend_history(None, &log);
        save(&args.out.join("stage1.aqw"), &params, metadata(Stage::One, false, h.clone()))?;
        history = Some(h);
        if args.stage == StageSel::One {
            save(&args.out.join("model.aqw"), &params, metadata(Stage::One, false, history.clone().unwrap_or_default()))?;
        }
    }
    if args.stage != StageSel::One {
        let augment = cfg.train.augment_so3;
        let (p, l) = train_stage(&net, &group, &model, params, Stage::Two, &train_set, val_set.as_ref(), &stage_cfg(cfg.train.stage2_epochs, augment), &mut printer)?;
        params = p;
        let stage2_history = extend_history(history.as_deref(), &l);
        log.extend(l);
        save(&args.out.join("model.aqw"), &params, metadata(Stage::Two, augment, stage2_history))?;
    }
    write_file(&args.out.join("epochs.csv"), epoch_csv(&log))?;
    write_file(&args.out.join("config.toml"), cfg.to_toml())?;
    say(out, format!("wrote {}", args.out.join("model.aqw").display()))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn run_name(path: &Path) -> String {
    let parent = path.parent().and_then(|p| p.file_name()).map(|s| s.to_string_lossy().into_owned());
    match parent {
        Some(p) => format!("{p}/{}", stem(path)),
        None => stem(path),
    }
}

fn load_checkpoint(path: &Path, group: &RotationGroup) -> Result<TrainedModel, CliError> {
    if !path.is_file() {
        return Err(CliError::Io(format!("checkpoint {} not found", path.display())));
    }
    load_model(path, group).map_err(|e| match CliError::from(e) {
        CliError::Io(m) => CliError::Checkpoint(format!("{}: {m}", path.display())),
        CliError::Checkpoint(m) => CliError::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn eval(args: &EvalArgs, out: &mut impl Write) -> Result<(), CliError> {
    let group = build_icosahedral_group();
    let dir = data_dir(args.data.as_ref());
    let datasets = if args.datasets.is_empty() { vec![dir.join(TEST_ID_FILE), dir.join(TEST_OOD_FILE)] } else { args.datasets.clone() };
    let mut runs = vec![args.checkpoint.clone()];
    runs.extend(args.compare.iter().cloned());
    let models = runs.iter().map(|p| load_checkpoint(p, &group)).collect::<Result<Vec<_>, _>>()?;

    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    let mut summary = Vec::new();
    for (run, (path, tm)) in runs.iter().zip(&models).enumerate() {
        let body = tm.build_body()?;
        let prefix = if run == 0 { String::new() } else { format!("{}:", run_name(path)) };
        for ds_path in &datasets {
            let ds = load_dataset(ds_path, &body)?;
            let mut sets = vec![(stem(ds_path), ds)];
            if let Some(seed) = args.rotate_group {
                let rotated = rotate_by_group(&sets[0].1, &group, &body, seed)?;
                sets.push((format!("{}-grouprot", stem(ds_path)), rotated));
            }
            for (label, ds) in sets {
                let rep = evaluate(&tm.net, &group, &body, &tm.params, &ds)?;
                summary.push((format!("{}{label}", if run == 0 { format!("{}:", run_name(path)) } else { prefix.clone() }), rep.mean));
                reports.push((format!("{prefix}{label}"), rep));
            }
        }
    }
    write_file(&args.out, metrics_csv(&reports))?;
    if let Some(plot) = &args.emit_plot_data {
        let history = models[0].meta("history").unwrap_or("epoch,v2v_cm,mpjpe_cm,seg_acc\n");
        write_file(plot, history)?;
    }
    say(out, summary_table(&summary))
}

fn read_cloud(path: &Path, index: usize, model: &BodyModel) -> Result<Vec<V3>, CliError> {
    if path.extension().is_some_and(|e| e == "aqd") {
        let ds = load_dataset(path, model)?;
        let n = ds.records.len();
        return ds.records.into_iter().nth(index).map(|r| r.points).ok_or_else(|| CliError::Config(format!("--index {index} out of range ({n} records)")));
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut pts = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line.split_whitespace().take(3).map(str::parse).collect::<Result<_, _>>().map_err(|e| CliError::Io(format!("{}:{}: {e}", path.display(), ln + 1)))?;
        if v.len() != 3 {
            return Err(CliError::Io(format!("{}:{}: expected three coordinates", path.display(), ln + 1)));
        }
        pts.push(V3::new(v[0], v[1], v[2]));
    }
    Ok(pts)
}

#[derive(Serialize)]
struct InferDump {
    beta: Vec<f64>,
    /// Axis-angle vectors, one per joint, relative to the parent.
    local_rotvecs: Vec<[f64; 3]>,
    global_rotvecs: Vec<[f64; 3]>,
    translation: [f64; 3],
    labels: Vec<usize>,
}

pub fn infer(args: &InferArgs, out: &mut impl Write) -> Result<(), CliError> {
    let group = build_icosahedral_group();
    let tm = load_checkpoint(&args.checkpoint, &group)?;
    let body = tm.build_body()?;
    let cloud = read_cloud(&args.input, args.index, &body)?;
    let inf = tm.net.infer(&group, &tm.params, &cloud).map_err(|e| CliError::Config(e.to_string()))?;
    let pose = &inf.pose;
    let params = BodyParams { beta: pose.beta_hat.clone(), theta: pose.local_rots.clone(), trans: V3::zeros() };
    let posed = body.lbs(&params)?;
    // Place the mesh so its vertex centroid matches the cloud centroid.
    let centroid = |p: &[V3]| p.iter().sum::<V3>() / p.len().max(1) as f64;
    let shift = centroid(&cloud) - centroid(&posed.vertices);
    let verts: Vec<V3> = posed.vertices.iter().map(|v| v + shift).collect();
    let mut obj = Vec::new();
    write_obj(&mut obj, &verts, body.faces()).map_err(|e| CliError::io(&args.out, e))?;
    write_file(&args.out, obj)?;
    let rv = |r: &equibody::group60::Rotation| r.to_rotvec().into();
    let dump = InferDump {
        beta: pose.beta_hat.clone(),
        local_rotvecs: pose.local_rots.iter().map(rv).collect(),
        global_rotvecs: pose.global_rots.iter().map(rv).collect(),
        translation: (params.trans + shift).into(),
        labels: inf.labels,
    };
    write_file(&args.params, serde_json::to_string_pretty(&dump).expect("dump serializes") + "\n")?;
    say(out, format!("{} points -> {} vertices: wrote {} and {}", cloud.len(), verts.len(), args.out.display(), args.params.display()))
}

pub fn check(args: &CheckArgs, out: &mut impl Write) -> Result<(), CliError> {
    let group = match &args.group_file {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
            decode_group_unchecked(&bytes).map_err(|e| CliError::io(path, e))?
        }
        None => build_icosahedral_group(),
    };
    let suites = args.only.map_or(Suite::ALL.to_vec(), |s| vec![s]);
    let (mut total, mut failed) = (0, 0);
    for suite in suites {
        say(out, format!("# {}", suite.name()))?;
        for p in run_suite(suite, &group) {
            total += 1;
            failed += usize::from(!p.passed());
            say(out, &p)?;
        }
    }
    say(out, format!("{} of {total} properties passed", total - failed))?;
    if failed > 0 {
        return Err(CliError::PropertyFailed(failed));
    }
    Ok(())
}
