//! End-to-end pipeline: run configuration, artifact layout, checkpointing,
//! and one entry point per CLI command.
//!
//! Every command is a pure function of the JSON run config (plus explicit
//! overrides), reads and writes only under the configured output directory,
//! and is deterministic for a fixed config and seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::gradcheck::grad_check;
use crate::io::{export_pgm, load_tzt1, save_tzt1_f64};
use crate::metrics::{psnr, ssim};
use crate::model::{
    self, ModelConfig, ModelInput, ModelParams, ModelState, TrainConfig, TrainSample,
};
use crate::ops::BnState;
use crate::sim::{
    degrade, flip_h, make_phantom, BandTable, DegradeConfig, Material, Phantom, PhantomKind,
    PsfModel, SpectralProjection, TRACE_LEN,
};
use crate::tensor::Tensor;
use crate::tomo::{reconstruct_volume, ReconMethod};

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    /// Family label used for the dataset split.
    pub name: String,
    pub kind: PhantomKind,
    /// Number of phantoms in the family.
    pub count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSection {
    pub families: Vec<FamilySpec>,
    /// Cubic voxel grid edge length.
    pub size: usize,
    pub material_n: f64,
    pub material_alpha: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradeSection {
    pub psf_k: f64,
    #[serde(default)]
    pub water_lines: Vec<(f64, f64)>,
    /// None disables measurement noise.
    pub snr_db: Option<f64>,
    #[serde(default = "default_trace_len")]
    pub trace_len: usize,
}

fn default_trace_len() -> usize {
    TRACE_LEN
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    /// Number of view angles.
    pub angles: usize,
    /// Angular step in degrees.
    pub step_deg: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_lr_every")]
    pub lr_every_epochs: usize,
}

fn default_lr_decay() -> f64 {
    0.1
}

fn default_lr_every() -> usize {
    300
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TomoSection {
    pub method: ReconMethod,
    #[serde(default = "default_sart_iters")]
    pub sart_iters: usize,
    #[serde(default = "default_sart_relax")]
    pub sart_relax: f64,
}

fn default_sart_iters() -> usize {
    8
}

fn default_sart_relax() -> f64 {
    0.25
}

/// Top-level JSON run configuration; unknown keys are rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub phantom: PhantomSection,
    /// Band frequencies in THz; None selects the standard 12-band table.
    #[serde(default)]
    pub bands: Option<Vec<f64>>,
    pub degrade: DegradeSection,
    pub simulate: SimulateSection,
    pub model: ModelConfig,
    pub training: TrainSection,
    pub tomo: TomoSection,
}

impl RunConfig {
    pub fn band_table(&self) -> Result<BandTable> {
        match &self.bands {
            Some(f) => BandTable::new(f.clone()),
            None => Ok(BandTable::standard()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phantom.families.is_empty() {
            return Err(Error::Config("no phantom families configured".into()));
        }
        if self.phantom.families.iter().any(|f| f.count == 0) {
            return Err(Error::Config("phantom family with zero count".into()));
        }
        let mut names: Vec<&str> = self
            .phantom
            .families
            .iter()
            .map(|f| f.name.as_str())
            .collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.phantom.families.len() {
            return Err(Error::Config("duplicate phantom family names".into()));
        }
        if self.simulate.angles == 0 || self.simulate.step_deg <= 0.0 {
            return Err(Error::Config("simulate: need angles >= 1, step > 0".into()));
        }
        let span = (self.simulate.angles - 1) as f64 * self.simulate.step_deg;
        if span >= 180.0 {
            return Err(Error::Config(format!(
                "simulate: angle span {span} degrees reaches 180"
            )));
        }
        Material::new(self.phantom.material_n, self.phantom.material_alpha)?;
        self.band_table()?;
        self.model
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.model.input_size != self.phantom.size {
            return Err(Error::Config(format!(
                "model input size {} must match phantom size {}",
                self.model.input_size, self.phantom.size
            )));
        }
        if self.model.num_bands != self.band_table()?.len() {
            return Err(Error::Config(format!(
                "model expects {} bands, table has {}",
                self.model.num_bands,
                self.band_table()?.len()
            )));
        }
        if self.training.epochs == 0 || self.training.batch_size == 0 {
            return Err(Error::Config("training: epochs and batch_size >= 1".into()));
        }
        Ok(())
    }
}

/// Load and validate a run config from disk.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    let cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn phantoms_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("phantoms")
}

fn views_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("views")
}

fn dataset_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("dataset")
}

fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("checkpoint")
}

fn restored_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("restored")
}

// ---------------------------------------------------------------------------
// phantom
// ---------------------------------------------------------------------------

/// Generate every configured phantom as a [2, Z, Y, X] TZT1 volume
/// (channel 0: refractive index, channel 1: absorption).
pub fn cmd_phantom(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = phantoms_dir(cfg);
    fs::create_dir_all(&dir)?;
    let material = Material::new(cfg.phantom.material_n, cfg.phantom.material_alpha)?;
    let mut written = Vec::new();
    for (fi, family) in cfg.phantom.families.iter().enumerate() {
        for i in 0..family.count {
            let seed = crate::util::derive_seed(cfg.seed, &[fi as u64, i as u64]);
            let ph = make_phantom(family.kind, cfg.phantom.size, material, seed)?;
            let size = ph.size();
            let mut data = ph.n.data().to_vec();
            data.extend_from_slice(ph.alpha.data());
            let stacked = Tensor::new(vec![2, size, size, size], data)?;
            let meta = json!({
                "family": family.name,
                "kind": family.kind,
                "index": i,
                "voxel_pitch_mm": ph.voxel_pitch_mm,
            });
            let path = dir.join(format!("{}-{i:03}.tzt1", family.name));
            save_tzt1_f64(&path, &stacked, &meta)?;
            written.push(path);
        }
    }
    Ok(written)
}

fn load_phantom(path: &Path) -> Result<(Phantom, Value)> {
    let (t, meta) = load_tzt1(path)?;
    let t = t.expect_f64("phantom")?;
    let s = t.shape().to_vec();
    if s.len() != 4 || s[0] != 2 {
        return Err(Error::invalid(
            "load_phantom",
            format!("expected [2,Z,Y,X], got {s:?}"),
        ));
    }
    let plane = s[1] * s[2] * s[3];
    let pitch = meta["voxel_pitch_mm"].as_f64().unwrap_or(0.25);
    Ok((
        Phantom {
            n: Tensor::new(s[1..].to_vec(), t.data()[..plane].to_vec())?,
            alpha: Tensor::new(s[1..].to_vec(), t.data()[plane..].to_vec())?,
            voxel_pitch_mm: pitch,
        },
        meta,
    ))
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

/// Channel layout of a stored view: time-max, B amplitudes, B phases, GT.
fn pack_view(sp: &SpectralProjection) -> Result<Tensor<f64>> {
    let b = sp.band_freqs_thz.len();
    let (h, w) = (sp.time_max.shape()[1], sp.time_max.shape()[2]);
    let mut data = sp.time_max.data().to_vec();
    data.extend_from_slice(sp.amplitude.data());
    data.extend_from_slice(sp.phase.data());
    data.extend_from_slice(sp.clean_gt.data());
    Tensor::new(vec![2 + 2 * b, h, w], data)
}

fn unpack_view(t: &Tensor<f64>, meta: &Value) -> Result<(ModelInput, Tensor<f64>)> {
    let s = t.shape().to_vec();
    let freqs: Vec<f64> = meta["bands_thz"]
        .as_array()
        .ok_or_else(|| Error::invalid("unpack_view", "missing bands_thz metadata"))?
        .iter()
        .filter_map(|v| v.as_f64())
        .collect();
    let b = freqs.len();
    if s.len() != 3 || s[0] != 2 + 2 * b {
        return Err(Error::invalid(
            "unpack_view",
            format!("view shape {s:?} inconsistent with {b} bands"),
        ));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = t.data();
    let input = ModelInput {
        time_max: Tensor::new(vec![1, h, w], d[..plane].to_vec())?,
        amp: Tensor::new(vec![b, h, w], d[plane..(1 + b) * plane].to_vec())?,
        phase: Tensor::new(vec![b, h, w], d[(1 + b) * plane..(1 + 2 * b) * plane].to_vec())?,
        band_freqs_thz: freqs,
    };
    let gt = Tensor::new(vec![1, h, w], d[(1 + 2 * b) * plane..].to_vec())?;
    Ok((input, gt))
}

fn flip_projection(sp: &SpectralProjection) -> SpectralProjection {
    SpectralProjection {
        time_max: flip_h(&sp.time_max),
        amplitude: flip_h(&sp.amplitude),
        phase: flip_h(&sp.phase),
        clean_gt: flip_h(&sp.clean_gt),
        view_angle_deg: sp.view_angle_deg,
        norm: sp.norm,
        band_freqs_thz: sp.band_freqs_thz.clone(),
    }
}

/// Simulate degraded projections of every phantom: `angles` views at
/// `step_deg` spacing, each also stored horizontally flipped (doubling the
/// view count). Overrides replace the config values when present.
pub fn cmd_simulate(
    cfg: &RunConfig,
    angles_override: Option<usize>,
    step_override: Option<f64>,
) -> Result<Vec<PathBuf>> {
    let angles = angles_override.unwrap_or(cfg.simulate.angles);
    let step = step_override.unwrap_or(cfg.simulate.step_deg);
    if angles == 0 || step <= 0.0 || (angles - 1) as f64 * step >= 180.0 {
        return Err(Error::Config(format!(
            "simulate: invalid geometry ({angles} angles, step {step})"
        )));
    }
    let bands = cfg.band_table()?;
    let dcfg = DegradeConfig {
        psf: PsfModel {
            k: cfg.degrade.psf_k,
            water_lines: cfg.degrade.water_lines.clone(),
        },
        snr_db: cfg.degrade.snr_db,
        trace_len: cfg.degrade.trace_len,
        seed: cfg.seed,
    };
    let dir = views_dir(cfg);
    fs::create_dir_all(&dir)?;
    let mut phantom_files: Vec<PathBuf> = fs::read_dir(phantoms_dir(cfg))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "tzt1"))
        .collect();
    phantom_files.sort();
    if phantom_files.is_empty() {
        return Err(Error::Config(
            "no phantoms found; run the phantom command first".into(),
        ));
    }
    let mut written = Vec::new();
    for pf in &phantom_files {
        let (ph, pmeta) = load_phantom(pf)?;
        let stem = pf
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("phantom")
            .to_string();
        for a in 0..angles {
            let angle = a as f64 * step;
            let sp = degrade(&ph, angle, &bands, &dcfg)?;
            for (flipped, view) in [(false, sp.clone()), (true, flip_projection(&sp))] {
                let meta = json!({
                    "phantom": stem,
                    "family": pmeta["family"],
                    "angle_deg": angle,
                    "flipped": flipped,
                    "bands_thz": view.band_freqs_thz,
                });
                let suffix = if flipped { "f" } else { "o" };
                let path = dir.join(format!("{stem}_a{:05}_{suffix}.tzt1", (angle * 100.0).round() as u64));
                save_tzt1_f64(&path, &pack_view(&view)?, &meta)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// dataset
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub views: Vec<PathBuf>,
    pub families: Vec<String>,
}

/// Split views into train/val/test manifests, disjoint by phantom family:
/// the last family (sorted) is held out for test, the one before for
/// validation.
pub fn cmd_dataset(cfg: &RunConfig) -> Result<()> {
    if cfg.phantom.families.len() < 4 {
        return Err(Error::Config(format!(
            "leave-one-family-out split needs >= 4 families, got {}",
            cfg.phantom.families.len()
        )));
    }
    let mut by_family: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    let mut files: Vec<PathBuf> = fs::read_dir(views_dir(cfg))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "tzt1"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(
            "no views found; run the simulate command first".into(),
        ));
    }
    for f in files {
        let (_, meta) = load_tzt1(&f)?;
        let fam = meta["family"]
            .as_str()
            .ok_or_else(|| Error::invalid("dataset", "view missing family metadata"))?
            .to_string();
        by_family.entry(fam).or_default().push(f);
    }
    let names: Vec<String> = by_family.keys().cloned().collect();
    let test_fam = names[names.len() - 1].clone();
    let val_fam = names[names.len() - 2].clone();
    let dir = dataset_dir(cfg);
    fs::create_dir_all(&dir)?;
    let manifest_of = |fams: &[String]| -> Manifest {
        Manifest {
            views: fams
                .iter()
                .flat_map(|f| by_family[f].iter().cloned())
                .collect(),
            families: fams.to_vec(),
        }
    };
    let train_fams: Vec<String> = names
        .iter()
        .filter(|n| **n != test_fam && **n != val_fam)
        .cloned()
        .collect();
    for (name, manifest) in [
        ("train", manifest_of(&train_fams)),
        ("val", manifest_of(std::slice::from_ref(&val_fam))),
        ("test", manifest_of(std::slice::from_ref(&test_fam))),
    ] {
        let path = dir.join(format!("{name}.json"));
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(())
}

fn load_manifest(cfg: &RunConfig, name: &str) -> Result<Manifest> {
    let path = dataset_dir(cfg).join(format!("{name}.json"));
    let text = fs::read_to_string(&path)?;
    Ok(serde_json::from_str(&text)?)
}

fn load_samples(manifest: &Manifest) -> Result<Vec<TrainSample>> {
    manifest
        .views
        .iter()
        .map(|p| {
            let (t, meta) = load_tzt1(p)?;
            let (input, gt) = unpack_view(&t.expect_f64("view")?, &meta)?;
            Ok(TrainSample { input, gt })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

fn bn_entries(prefix: &str, st: &BnState<f64>, out: &mut Vec<(String, Tensor<f64>)>) {
    let n = st.running_mean.len();
    out.push((
        format!("{prefix}.mean"),
        Tensor::new(vec![n], st.running_mean.clone()).expect("1-D stats"),
    ));
    out.push((
        format!("{prefix}.var"),
        Tensor::new(vec![n], st.running_var.clone()).expect("1-D stats"),
    ));
}

fn state_entries(state: &ModelState) -> Vec<(String, Tensor<f64>)> {
    let mut out = Vec::new();
    for (name, cb) in &state.conv {
        bn_entries(&format!("{name}.bn1"), &cb.bn1, &mut out);
        bn_entries(&format!("{name}.bn2"), &cb.bn2, &mut out);
    }
    for (name, sf) in &state.safm {
        for (sub, cb) in [
            ("fca", &sf.f_c_a),
            ("fcp", &sf.f_c_p),
            ("ff", &sf.f_f),
        ] {
            bn_entries(&format!("{name}.{sub}.bn1"), &cb.bn1, &mut out);
            bn_entries(&format!("{name}.{sub}.bn2"), &cb.bn2, &mut out);
        }
    }
    out
}

fn restore_bn(prefix: &str, loaded: &IndexMap<String, Tensor<f64>>, st: &mut BnState<f64>) -> Result<()> {
    for (field, dst) in [
        ("mean", &mut st.running_mean),
        ("var", &mut st.running_var),
    ] {
        let key = format!("{prefix}.{field}");
        let t = loaded
            .get(&key)
            .ok_or_else(|| Error::invalid("load_checkpoint", format!("missing {key}")))?;
        if t.numel() != dst.len() {
            return Err(Error::invalid(
                "load_checkpoint",
                format!("{key}: {} values, expected {}", t.numel(), dst.len()),
            ));
        }
        dst.copy_from_slice(t.data());
    }
    Ok(())
}

/// Write a checkpoint directory: `model.json` plus one TZT1 file per
/// parameter (`param.*`) and per running statistic (`state.*`).
pub fn save_checkpoint(
    dir: &Path,
    cfg: &ModelConfig,
    params: &ModelParams,
    state: &ModelState,
    optim_steps: usize,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let doc = json!({
        "model": cfg,
        "optim": { "step": optim_steps },
        "params": params.tensors.keys().collect::<Vec<_>>(),
    });
    fs::write(dir.join("model.json"), serde_json::to_string_pretty(&doc)?)?;
    for (name, t) in &params.tensors {
        save_tzt1_f64(&dir.join(format!("param.{name}.tzt1")), t, &Value::Null)?;
    }
    for (name, t) in state_entries(state) {
        save_tzt1_f64(&dir.join(format!("state.{name}.tzt1")), &t, &Value::Null)?;
    }
    Ok(())
}

/// Load a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(ModelConfig, ModelParams, ModelState)> {
    let doc: Value = serde_json::from_str(&fs::read_to_string(dir.join("model.json"))?)?;
    let cfg: ModelConfig = serde_json::from_value(doc["model"].clone())
        .map_err(|e| Error::Config(format!("checkpoint model.json: {e}")))?;
    cfg.validate()?;
    // initialize structure, then overwrite every tensor from disk
    let (mut params, mut state) = model::init_params(&cfg, 0)?;
    let mut loaded_state: IndexMap<String, Tensor<f64>> = IndexMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(stem) = name.strip_suffix(".tzt1") {
            let (t, _) = load_tzt1(&path)?;
            let t = t.expect_f64(stem)?;
            if let Some(pname) = stem.strip_prefix("param.") {
                let slot = params.tensors.get_mut(pname).ok_or_else(|| {
                    Error::invalid("load_checkpoint", format!("unknown parameter {pname}"))
                })?;
                if slot.shape() != t.shape() {
                    return Err(Error::invalid(
                        "load_checkpoint",
                        format!("{pname}: shape {:?} vs expected {:?}", t.shape(), slot.shape()),
                    ));
                }
                *slot = t;
            } else if let Some(sname) = stem.strip_prefix("state.") {
                loaded_state.insert(sname.to_string(), t);
            }
        }
    }
    for (name, cb) in state.conv.iter_mut() {
        restore_bn(&format!("{name}.bn1"), &loaded_state, &mut cb.bn1)?;
        restore_bn(&format!("{name}.bn2"), &loaded_state, &mut cb.bn2)?;
    }
    for (name, sf) in state.safm.iter_mut() {
        for (sub, cb) in [
            ("fca", &mut sf.f_c_a),
            ("fcp", &mut sf.f_c_p),
            ("ff", &mut sf.f_f),
        ] {
            restore_bn(&format!("{name}.{sub}.bn1"), &loaded_state, &mut cb.bn1)?;
            restore_bn(&format!("{name}.{sub}.bn2"), &loaded_state, &mut cb.bn2)?;
        }
    }
    Ok((cfg, params, state))
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Train the configured model on the train manifest, validating on the val
/// manifest; writes the best checkpoint and a line-delimited metrics log.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<model::EpochRecord>> {
    let train_set = load_samples(&load_manifest(cfg, "train")?)?;
    let val_set = load_samples(&load_manifest(cfg, "val")?)?;
    let (mut params, mut state) = model::init_params(&cfg.model, cfg.seed)?;
    let tc = TrainConfig {
        epochs: cfg.training.epochs,
        batch_size: cfg.training.batch_size,
        lr_initial: cfg.training.lr_initial,
        lr_decay: cfg.training.lr_decay,
        lr_every_epochs: cfg.training.lr_every_epochs,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let outcome = model::train(
        &cfg.model,
        &mut params,
        &mut state,
        &train_set,
        &val_set,
        &tc,
        |_| {},
    )?;
    let batches_per_epoch = train_set.len().div_ceil(tc.batch_size);
    save_checkpoint(
        &checkpoint_dir(cfg),
        &cfg.model,
        &outcome.best_params,
        &outcome.best_state,
        tc.epochs * batches_per_epoch,
    )?;
    let mut log = String::new();
    for r in &outcome.records {
        log.push_str(&serde_json::to_string(r)?);
        log.push('\n');
    }
    fs::write(cfg.out_dir.join("log.jsonl"), log)?;
    Ok(outcome.records)
}

// ---------------------------------------------------------------------------
// restore
// ---------------------------------------------------------------------------

/// Run the trained model over the test manifest; writes one restored
/// [1, H, W] TZT1 (plus a PGM preview) per view.
pub fn cmd_restore(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let (mcfg, params, state) = load_checkpoint(&checkpoint_dir(cfg))?;
    let manifest = load_manifest(cfg, "test")?;
    let dir = restored_dir(cfg);
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for view_path in &manifest.views {
        let (t, meta) = load_tzt1(view_path)?;
        let (input, _) = unpack_view(&t.expect_f64("view")?, &meta)?;
        // eval-mode inference never mutates the running stats, but the
        // signature takes &mut; work on a scratch copy per view
        let mut st = state.clone();
        let rec = model::predict(&input, &params, &mut st, &mcfg)?;
        let stem = view_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("view");
        let out = dir.join(format!("{stem}.tzt1"));
        save_tzt1_f64(&out, &rec, &meta)?;
        export_pgm(&rec.map(|v| v.clamp(0.0, 1.0)), &dir.join(format!("{stem}.pgm")))?;
        written.push(out);
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// reconstruct
// ---------------------------------------------------------------------------

/// Assemble the restored (unflipped) views of one phantom into a volume.
pub fn cmd_reconstruct(cfg: &RunConfig, phantom_stem: &str) -> Result<PathBuf> {
    let dir = restored_dir(cfg);
    let mut pairs: Vec<(f64, Tensor<f64>)> = Vec::new();
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "tzt1"))
        .collect();
    files.sort();
    for f in files {
        let (t, meta) = load_tzt1(&f)?;
        if meta["phantom"].as_str() != Some(phantom_stem)
            || meta["flipped"].as_bool() != Some(false)
        {
            continue;
        }
        let angle = meta["angle_deg"]
            .as_f64()
            .ok_or_else(|| Error::invalid("reconstruct", "view missing angle metadata"))?;
        pairs.push((angle, t.expect_f64("restored view")?));
    }
    if pairs.is_empty() {
        return Err(Error::Config(format!(
            "no restored views found for phantom {phantom_stem}"
        )));
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let angles: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let views: Vec<Tensor<f64>> = pairs.into_iter().map(|p| p.1).collect();
    let vol = reconstruct_volume(&views, &angles, cfg.tomo.method, 0.25)?;
    let out = cfg.out_dir.join(format!("{phantom_stem}_volume.tzt1"));
    let meta = json!({
        "phantom": phantom_stem,
        "method": cfg.tomo.method,
        "voxel_pitch_mm": vol.voxel_pitch_mm,
        "angles_deg": angles,
    });
    save_tzt1_f64(&out, &vol.grid, &meta)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn psnr_json(v: f64) -> Value {
    if v.is_infinite() {
        json!("inf")
    } else {
        json!(v)
    }
}

/// PSNR/SSIM of every restored test view against its ground truth; the
/// aggregate is the plain mean over views (infinite PSNR rows excluded
/// from the mean and reported as the "inf" sentinel).
pub fn cmd_eval(cfg: &RunConfig) -> Result<Value> {
    let manifest = load_manifest(cfg, "test")?;
    let dir = restored_dir(cfg);
    let mut rows = Vec::new();
    let mut sum_psnr = 0.0;
    let mut n_psnr = 0usize;
    let mut sum_ssim = 0.0;
    let mut n = 0usize;
    for view_path in &manifest.views {
        let (t, meta) = load_tzt1(view_path)?;
        let (_, gt) = unpack_view(&t.expect_f64("view")?, &meta)?;
        let stem = view_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("view");
        let (rec, _) = load_tzt1(&dir.join(format!("{stem}.tzt1")))?;
        let rec = rec.expect_f64("restored view")?;
        let p = psnr(&rec, &gt)?;
        let (h, w) = (gt.shape()[1], gt.shape()[2]);
        let s = ssim(
            &rec.clone().reshape(vec![h, w])?,
            &gt.clone().reshape(vec![h, w])?,
        )?;
        rows.push(json!({
            "view": stem,
            "psnr_db": psnr_json(p),
            "ssim": s,
        }));
        if p.is_finite() {
            sum_psnr += p;
            n_psnr += 1;
        }
        sum_ssim += s;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config("empty test manifest".into()));
    }
    let mean_psnr = if n_psnr == 0 {
        json!("inf")
    } else if n_psnr < n {
        // some rows were infinite; the finite mean underestimates
        psnr_json(sum_psnr / n_psnr as f64)
    } else {
        psnr_json(sum_psnr / n as f64)
    };
    let report = json!({
        "views": rows,
        "mean_psnr_db": mean_psnr,
        "mean_ssim": sum_ssim / n as f64,
    });
    fs::write(
        cfg.out_dir.join("metrics.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

/// Finite-difference verification of the core differentiable pipeline;
/// returns a machine-readable report with an overall pass flag.
pub fn cmd_gradcheck(seed: u64) -> Result<Value> {
    use crate::ops::{Mode, Padding};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rnd = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-0.5..0.5));

    let mut checks = Vec::new();
    let mut all_pass = true;
    let mut push = |name: &str, report: crate::gradcheck::GradCheckReport| {
        all_pass &= report.pass;
        checks.push(json!({
            "name": name,
            "max_rel_err": report.max_rel_err,
            "coords": report.coords_checked,
            "pass": report.pass,
        }));
    };

    // conv + relu + mse composite
    let x = rnd(&[2, 6, 6]);
    let k = rnd(&[3, 2, 3, 3]);
    let b = rnd(&[3]);
    let gt = rnd(&[3, 6, 6]);
    let gt2 = gt.clone();
    let rep = grad_check(
        move |tape, vars| {
            let y = tape.conv2d(vars[0], vars[1], Some(vars[2]), 1, Padding::Same)?;
            let y = tape.relu(y)?;
            let g = tape.constant(gt2.clone());
            tape.mse(y, g)
        },
        &[(x, true), (k, true), (b, true)],
        1e-5,
        Some(24),
        seed,
    )?;
    push("conv2d+relu+mse", rep);

    // subspace projection against a random target: the distance to the
    // zero matrix would be trace(P)/N^2 = K/N^2, a constant with vanishing
    // gradient, so an informative target is required
    let (n_rows, k_cols) = (12usize, 4usize);
    let v = rnd(&[n_rows, k_cols]);
    let target = rnd(&[n_rows, n_rows]);
    let rep = grad_check(
        move |tape, vars| {
            let p = tape.ortho_project(vars[0], 1e-6)?;
            let g = tape.constant(target.clone());
            tape.mse(p, g)
        },
        &[(v, true)],
        1e-5,
        Some(24),
        seed,
    )?;
    push("ortho_project", rep);

    // batch-norm + sigmoid in train mode
    let x = rnd(&[2, 5, 5]);
    let g = Tensor::full(&[2], 1.0);
    let be = Tensor::zeros(&[2]);
    let gt = rnd(&[2, 5, 5]);
    let rep = grad_check(
        move |tape, vars| {
            let mut st = BnState::new(2);
            let y = tape.batch_norm(vars[0], vars[1], vars[2], &mut st, Mode::Train, 0.1, 1e-5)?;
            let y = tape.sigmoid(y)?;
            let t = tape.constant(gt.clone());
            tape.mse(y, t)
        },
        &[(x, true), (g, true), (be, true)],
        1e-5,
        Some(24),
        seed,
    )?;
    push("batchnorm+sigmoid", rep);

    Ok(json!({ "pass": all_pass, "checks": checks }))
}
