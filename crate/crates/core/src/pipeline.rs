//! End-to-end stages behind the command-line tool. Every stage reads and writes
//! below the configured output directory and records checksums in the run manifest.
//!
//! Directory layout:
//!
//! ```text
//! data/train/{pet,mri}/train_NNN.imgf        unpaired training pools
//! data/test/{pet,mri,gm,atlas}/test_NNN.imgf  paired lesion-free test set
//! data/patients/{pet,mri,gm,atlas,oracle}/patient_NNN.imgf
//! data/patients/truth.csv
//! model/checkpoint.ckpt, model/loss.csv
//! pseudo/{test,patients}/<id>.imgf
//! localize/reports/<id>.txt, localize/zmaps/<id>.pgm, localize/cohort.csv
//! metrics/metrics.csv, metrics/spectrum_real.csv, metrics/spectrum_pseudo.csv
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{ModelKind, RunConfig};
use crate::cyclegan::{cyclegan_translate, CycleGanModel, CycleGanTrainer};
use crate::diffusion::gaussian_image;
use crate::error::{Error, Result};
use crate::imaging::io::{decode_atlas, decode_imgf, decode_mask, encode_atlas, encode_imgf, encode_mask, encode_pgm};
use crate::imaging::{generate_phantom, Atlas, Image, Mask, PhantomConfig, PhantomSubject};
use crate::localization::{localize, zscore_for_export, LesionReport};
use crate::manifest::{sha256_hex, RunManifest, StageRecord};
use crate::metrics::{
    cohort_csv, cohort_stats, extract_features, fid, metrics_csv, psnr, rmse, spectrum_csv, ssim, sv_spectrum,
    CohortStats, MetricsRecord,
};
use crate::syndiff::{synthesize_pseudo_pet, SynDiffModel, SynDiffTrainer};
use crate::training::{loss_csv, UnpairedPools};

pub const CHECKPOINT_PATH: &str = "model/checkpoint.ckpt";
const TRUTH_HEADER: &str = "subject,true_region,center_row,center_col,radius,contrast";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubjectSet {
    Train,
    Test,
    Patients,
}

impl SubjectSet {
    fn code(self) -> u64 {
        match self {
            SubjectSet::Train => 0,
            SubjectSet::Test => 1,
            SubjectSet::Patients => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SubjectSet::Train => "train",
            SubjectSet::Test => "test",
            SubjectSet::Patients => "patients",
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            SubjectSet::Train => "train",
            SubjectSet::Test => "test",
            SubjectSet::Patients => "patient",
        }
    }
}

/// Seed of subject `index` in `set`.
pub fn subject_seed(seed: u64, set: SubjectSet, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (set.code() << 40) ^ index as u64
}

fn phantom_config(cfg: &RunConfig) -> PhantomConfig {
    PhantomConfig::square(cfg.size)
}

/// Patient `index`: the lesioned subject and its oracle pseudo-normal, the
/// lesion-free twin plus Gaussian noise of `oracle_sigma`.
pub fn make_patient(cfg: &RunConfig, index: usize) -> Result<(PhantomSubject, Image)> {
    let seed = subject_seed(cfg.seed, SubjectSet::Patients, index);
    let base = phantom_config(cfg);
    let patient = generate_phantom(seed, &base.clone().with_lesion(cfg.lesion_radius, cfg.lesion_contrast))?;
    let twin = generate_phantom(seed, &base)?;
    Ok((patient, oracle_pseudo(&twin.pet, cfg.oracle_sigma, seed ^ 0x5eed)))
}

pub fn oracle_pseudo(twin_pet: &Image, sigma: f64, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = gaussian_image(&mut rng, twin_pet.width(), twin_pet.height());
    let data = twin_pet.data().iter().zip(noise.data()).map(|(p, n)| p + sigma * n).collect();
    Image::new(twin_pet.width(), twin_pet.height(), data).unwrap()
}

/// Records the files a stage touches. Paths below the run directory are stored relative to it.
struct Stage {
    root: PathBuf,
    record: StageRecord,
    start: Instant,
}

impl Stage {
    fn new(root: &Path, name: &str) -> Self {
        Self {
            root: root.to_path_buf(),
            record: StageRecord { name: name.to_string(), ..Default::default() },
            start: Instant::now(),
        }
    }

    fn label(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }

    fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.record.inputs.push((self.label(path), sha256_hex(&bytes)));
        Ok(bytes)
    }

    fn read_image(&mut self, path: &Path) -> Result<Image> {
        let bytes = self.read(path)?;
        decode_imgf(&bytes, path)
    }

    fn read_mask(&mut self, path: &Path) -> Result<Mask> {
        let bytes = self.read(path)?;
        decode_mask(&bytes, path)
    }

    fn read_atlas(&mut self, path: &Path) -> Result<Atlas> {
        let bytes = self.read(path)?;
        decode_atlas(&bytes, path)
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        self.record.outputs.push((self.label(path), sha256_hex(bytes)));
        Ok(())
    }

    fn write_image(&mut self, path: &Path, img: &Image) -> Result<()> {
        self.write(path, &encode_imgf(img))
    }

    fn finish(mut self, cfg: &RunConfig) -> Result<StageRecord> {
        self.record.seconds = self.start.elapsed().as_secs_f64();
        let mut manifest = RunManifest::load(&self.root)?.unwrap_or_else(|| RunManifest::new(&config_snapshot(cfg)));
        manifest.config = config_snapshot(cfg);
        manifest.record(self.record.clone());
        manifest.save(&self.root)?;
        Ok(self.record)
    }
}

/// Config text stored in the manifest. The output location is not part of a run's identity.
pub fn config_snapshot(cfg: &RunConfig) -> String {
    cfg.to_text().lines().filter(|l| !l.starts_with("out_dir ")).map(|l| format!("{l}\n")).collect()
}

/// Sorted ids of the `.imgf` files in `dir`.
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "imgf") {
            ids.push(p.file_stem().unwrap().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn imgf(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.imgf"))
}

/// Writes the three phantom sets below `<out>/data`.
pub fn cmd_phantom(cfg: &RunConfig, force: bool) -> Result<StageRecord> {
    let root = &cfg.out_dir;
    let data = root.join("data");
    if data.exists() && fs::read_dir(&data).map_err(|e| Error::io(&data, e))?.next().is_some() {
        if !force {
            return Err(Error::InvalidArgument(format!("{} is not empty; pass --force to overwrite", data.display())));
        }
        fs::remove_dir_all(&data).map_err(|e| Error::io(&data, e))?;
    }
    let mut st = Stage::new(root, "phantom");
    let pc = phantom_config(cfg);
    for (set, n) in [(SubjectSet::Train, cfg.n_train), (SubjectSet::Test, cfg.n_test)] {
        let dir = data.join(set.name());
        for i in 0..n {
            let s = generate_phantom(subject_seed(cfg.seed, set, i), &pc)?;
            let id = format!("{}_{i:03}", set.prefix());
            st.write_image(&imgf(&dir.join("pet"), &id), &s.pet)?;
            st.write_image(&imgf(&dir.join("mri"), &id), &s.mri)?;
            if set == SubjectSet::Test {
                st.write(&imgf(&dir.join("gm"), &id), &encode_mask(&s.gm_mask))?;
                st.write(&imgf(&dir.join("atlas"), &id), &encode_atlas(&s.atlas))?;
            }
        }
    }
    let dir = data.join(SubjectSet::Patients.name());
    let mut truth = format!("{TRUTH_HEADER}\n");
    for i in 0..cfg.n_patients {
        let (p, oracle) = make_patient(cfg, i)?;
        let id = format!("patient_{i:03}");
        st.write_image(&imgf(&dir.join("pet"), &id), &p.pet)?;
        st.write_image(&imgf(&dir.join("mri"), &id), &p.mri)?;
        st.write(&imgf(&dir.join("gm"), &id), &encode_mask(&p.gm_mask))?;
        st.write(&imgf(&dir.join("atlas"), &id), &encode_atlas(&p.atlas))?;
        st.write_image(&imgf(&dir.join("oracle"), &id), &oracle)?;
        let l = p.lesion.as_ref().unwrap();
        writeln!(truth, "{id},{},{},{},{},{}", l.true_region, l.center.0, l.center.1, l.radius, l.contrast).unwrap();
    }
    if cfg.n_patients > 0 {
        st.write(&dir.join("truth.csv"), truth.as_bytes())?;
    }
    st.finish(cfg)
}

fn load_pools(st: &mut Stage, data: &Path) -> Result<UnpairedPools> {
    let mut pools = [Vec::new(), Vec::new()];
    for (k, modality) in ["pet", "mri"].iter().enumerate() {
        let dir = data.join("train").join(modality);
        for id in list_ids(&dir)? {
            pools[k].push(st.read_image(&imgf(&dir, &id))?);
        }
    }
    let [pet, mri] = pools;
    UnpairedPools::new(pet, mri)
}

fn new_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    Ok(match cfg.model {
        ModelKind::SynDiff => {
            let mut model = SynDiffModel::new(cfg.syndiff_sizes(), cfg.schedule()?, cfg.seed)?;
            model.lambda_cycle = cfg.train.lambda_cycle;
            model.lambda_rec = cfg.train.lambda_rec;
            Checkpoint::SynDiff(SynDiffTrainer::new(model, &cfg.train))
        }
        ModelKind::CycleGan => Checkpoint::CycleGan(CycleGanTrainer::new(
            CycleGanModel::new(cfg.net_sizes(), cfg.train.lambda_cycle, cfg.seed)?,
            &cfg.train,
        )),
    })
}

fn check_kind(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<()> {
    if ckpt.model_name() != cfg.model.name() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds a {} model but the config selects {}",
            ckpt.model_name(),
            cfg.model.name()
        )));
    }
    Ok(())
}

/// Trains until the checkpoint has `cfg.train.epochs` epochs, optionally resuming.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<StageRecord> {
    let root = &cfg.out_dir;
    let mut st = Stage::new(root, "train");
    let pools = load_pools(&mut st, &root.join("data"))?;
    let mut ckpt = match resume {
        Some(path) => {
            let bytes = st.read(path)?;
            let ck = checkpoint::decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
            check_kind(&ck, cfg)?;
            ck
        }
        None => new_checkpoint(cfg)?,
    };
    while ckpt.epoch() < cfg.train.epochs {
        let stats = match &mut ckpt {
            Checkpoint::SynDiff(t) => t.train_epoch(&pools, &cfg.train)?,
            Checkpoint::CycleGan(t) => t.train_epoch(&pools, &cfg.train)?,
        };
        eprintln!(
            "epoch {}/{}: gen_x {:.4} disc_x {:.4} gen_y {:.4} disc_y {:.4} cycle {:.4}",
            stats.epoch,
            cfg.train.epochs,
            stats.gen_loss_x,
            stats.disc_loss_x,
            stats.gen_loss_y,
            stats.disc_loss_y,
            stats.cycle_loss
        );
    }
    st.write(&root.join(CHECKPOINT_PATH), &checkpoint::encode(&ckpt))?;
    st.write(&root.join("model/loss.csv"), loss_csv(ckpt.history()).as_bytes())?;
    st.finish(cfg)
}

/// One pseudo-normal PET per subject MRI, from either model kind.
pub fn synthesize_with(ckpt: &Checkpoint, mri: &Image, seed: u64) -> Result<Image> {
    match ckpt {
        Checkpoint::SynDiff(t) => synthesize_pseudo_pet(&t.model, mri, seed),
        Checkpoint::CycleGan(t) => cyclegan_translate(&t.model, mri),
    }
}

/// Synthesizes the test and patient sets. Subject `i` in sorted id order uses seed `seed + i`.
pub fn cmd_synthesize(cfg: &RunConfig, checkpoint_path: Option<&Path>) -> Result<StageRecord> {
    let root = &cfg.out_dir;
    let mut st = Stage::new(root, "synthesize");
    let path = checkpoint_path.map_or_else(|| root.join(CHECKPOINT_PATH), Path::to_path_buf);
    let bytes = st.read(&path)?;
    let ckpt = checkpoint::decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    check_kind(&ckpt, cfg)?;
    reset_dir(&root.join("pseudo"))?;
    for set in [SubjectSet::Test, SubjectSet::Patients] {
        let mri_dir = root.join("data").join(set.name()).join("mri");
        if !mri_dir.exists() {
            continue;
        }
        let out = root.join("pseudo").join(set.name());
        for (i, id) in list_ids(&mri_dir)?.iter().enumerate() {
            let mri = st.read_image(&imgf(&mri_dir, id))?;
            let pseudo = synthesize_with(&ckpt, &mri, cfg.seed.wrapping_add(i as u64))?;
            st.write_image(&imgf(&out, id), &pseudo)?;
        }
    }
    st.finish(cfg)
}

fn read_truth(st: &mut Stage, path: &Path) -> Result<Vec<(String, u8)>> {
    let text =
        String::from_utf8(st.read(path)?).map_err(|_| Error::Config(format!("{} is not text", path.display())))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let mut f = line.split(',');
        let (Some(id), Some(region)) = (f.next(), f.next()) else {
            return Err(Error::Config(format!("bad truth row {line:?}")));
        };
        let region = region.parse().map_err(|_| Error::Config(format!("bad region in {line:?}")))?;
        out.push((id.to_string(), region));
    }
    out.sort();
    Ok(out)
}

/// Localizes every patient against `pseudo_dir` (default `pseudo/patients`).
pub fn cmd_localize(cfg: &RunConfig, pseudo_dir: Option<&Path>) -> Result<(StageRecord, CohortStats)> {
    let root = &cfg.out_dir;
    let mut st = Stage::new(root, "localize");
    let pdata = root.join("data/patients");
    let pseudo_dir = pseudo_dir.map_or_else(|| root.join("pseudo/patients"), Path::to_path_buf);
    let ids = list_ids(&pdata.join("pet"))?;
    let pseudo_ids = list_ids(&pseudo_dir)?;
    if ids != pseudo_ids {
        return Err(Error::InvalidArgument(format!(
            "subject ids differ between {} and {}",
            pdata.join("pet").display(),
            pseudo_dir.display()
        )));
    }
    let truth = read_truth(&mut st, &pdata.join("truth.csv"))?;
    if truth.iter().map(|(id, _)| id).ne(ids.iter()) {
        return Err(Error::InvalidArgument("truth.csv ids differ from the patient set".into()));
    }
    let out = root.join("localize");
    reset_dir(&out)?;
    let mut reports: Vec<LesionReport> = Vec::new();
    for id in &ids {
        let real = st.read_image(&imgf(&pdata.join("pet"), id))?;
        let pseudo = st.read_image(&imgf(&pseudo_dir, id))?;
        let gm = st.read_mask(&imgf(&pdata.join("gm"), id))?;
        let atlas = st.read_atlas(&imgf(&pdata.join("atlas"), id))?;
        let report = localize(id, &real, &pseudo, &gm, &atlas, &cfg.localize)?;
        st.write(&out.join("reports").join(format!("{id}.txt")), report.to_text().as_bytes())?;
        let z = zscore_for_export(&real, &pseudo, &gm, cfg.localize.stats_domain)?
            .map_or_else(|| Image::filled(real.width(), real.height(), 0.0), |z| z.z);
        let pgm = encode_pgm(&z, -4.0, 4.0)?;
        st.write(&out.join("zmaps").join(format!("{id}.pgm")), &pgm)?;
        reports.push(report);
    }
    let truths: Vec<u8> = truth.iter().map(|(_, r)| *r).collect();
    let stats = cohort_stats(&reports, &truths)?;
    st.write(&out.join("cohort.csv"), cohort_csv(&reports, &truths, &stats).as_bytes())?;
    Ok((st.finish(cfg)?, stats))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsSummary {
    pub rows: Vec<(String, MetricsRecord)>,
    pub fid: f64,
    pub mean_ssim: f64,
    pub spectrum_real: Vec<f64>,
    pub spectrum_pseudo: Vec<f64>,
}

/// Compares `pseudo_dir` (default `pseudo/test`) against the real test PET.
pub fn cmd_metrics(cfg: &RunConfig, pseudo_dir: Option<&Path>) -> Result<(StageRecord, MetricsSummary)> {
    let root = &cfg.out_dir;
    let mut st = Stage::new(root, "metrics");
    let real_dir = root.join("data/test/pet");
    let pseudo_dir = pseudo_dir.map_or_else(|| root.join("pseudo/test"), Path::to_path_buf);
    let ids = list_ids(&real_dir)?;
    if ids.is_empty() {
        return Err(Error::InvalidArgument(format!("no images in {}", real_dir.display())));
    }
    if list_ids(&pseudo_dir)? != ids {
        return Err(Error::InvalidArgument(format!(
            "subject ids differ between {} and {}",
            real_dir.display(),
            pseudo_dir.display()
        )));
    }
    let (mut reals, mut pseudos) = (Vec::new(), Vec::new());
    for id in &ids {
        reals.push(st.read_image(&imgf(&real_dir, id))?);
        pseudos.push(st.read_image(&imgf(&pseudo_dir, id))?);
    }
    let feats = |set: &[Image]| set.iter().map(|i| extract_features(i, cfg.feature_seed)).collect::<Result<Vec<_>>>();
    let fid_value = if ids.len() >= 2 { fid(&feats(&reals)?, &feats(&pseudos)?)? } else { f64::NAN };
    let mut rows = Vec::new();
    for ((id, r), p) in ids.iter().zip(&reals).zip(&pseudos) {
        let rec =
            MetricsRecord { ssim: ssim(r, p, 1.0)?, fid: fid_value, psnr_db: psnr(r, p, 1.0)?, rmse: rmse(r, p)? };
        rows.push((id.clone(), rec));
    }
    let out = root.join("metrics");
    reset_dir(&out)?;
    st.write(&out.join("metrics.csv"), metrics_csv(&rows, fid_value).as_bytes())?;
    let spectrum_real = sv_spectrum(&reals)?;
    let spectrum_pseudo = sv_spectrum(&pseudos)?;
    st.write(&out.join("spectrum_real.csv"), spectrum_csv(&spectrum_real).as_bytes())?;
    st.write(&out.join("spectrum_pseudo.csv"), spectrum_csv(&spectrum_pseudo).as_bytes())?;
    let mean_ssim = rows.iter().map(|(_, m)| m.ssim).sum::<f64>() / rows.len() as f64;
    Ok((st.finish(cfg)?, MetricsSummary { rows, fid: fid_value, mean_ssim, spectrum_real, spectrum_pseudo }))
}

/// Results of [`run_all`].
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineSummary {
    pub metrics: MetricsSummary,
    pub cohort: CohortStats,
    pub manifest: RunManifest,
}

/// phantom → train → synthesize → localize → metrics in `cfg.out_dir`.
pub fn run_all(cfg: &RunConfig, force: bool) -> Result<PipelineSummary> {
    cmd_phantom(cfg, force)?;
    cmd_train(cfg, None)?;
    cmd_synthesize(cfg, None)?;
    let (_, cohort) = cmd_localize(cfg, None)?;
    let (_, metrics) = cmd_metrics(cfg, None)?;
    let manifest = RunManifest::load(&cfg.out_dir)?.expect("manifest written by every stage");
    Ok(PipelineSummary { metrics, cohort, manifest })
}
