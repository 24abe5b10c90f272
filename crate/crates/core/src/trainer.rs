//! Epoch loop: pseudo-mask evolution, regular weighted training and the
//! scheduled bilevel iterations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use irkd_autograd::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bilevel::BilevelState;
use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::config::{Mode, RunConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::inference::{predict_student, predict_teacher, stack_tokens, student_masks};
use crate::losses::LossBreakdown;
use crate::mask::{Frame, Mask};
use crate::metrics::{iou, niou, EvalReport};
use crate::nets::{batch_images, Backbone, TinyUNet};
use crate::objective::{student_step, teacher_spec, NetBatch, NetObjective};
use crate::params::ParamSet;
use crate::pseudo::PseudoMaskStore;
use crate::reweight::{prior_features, ClusterModel};
use crate::synthdata::{make_split, mix_seed, Characteristic, DatasetSplit, InfraredSample};
use crate::vfm::FeatureProvider;

/// One row of the epoch log. Epoch 0 describes the initial state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_iou: f64,
    pub test_iou: f64,
    pub loss_in: f64,
    pub loss_task_s: f64,
    /// Mean per-image IoU of train and val pseudo-masks against ground truth.
    pub pseudo_iou: f64,
    /// Same, per characteristic in table order.
    pub pseudo_iou_by_tag: [f64; 4],
    pub bilevel: bool,
    pub gn_iterations: usize,
    pub skipped_steps: usize,
    pub points_retained: bool,
    pub max_component: usize,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,train_IoU,test_IoU,L_in,L_task_s,pseudo_IoU,pseudo_Salient,\
pseudo_Filamentary,pseudo_Faint,pseudo_Camouflaged,bilevel,gn_iters,skipped,points_retained,max_component";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let t = &self.pseudo_iou_by_tag;
        format!(
            "{},{:.6},{:.6},{:.8},{:.8},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{}",
            self.epoch,
            self.train_iou,
            self.test_iou,
            self.loss_in,
            self.loss_task_s,
            self.pseudo_iou,
            t[0],
            t[1],
            t[2],
            t[3],
            u8::from(self.bilevel),
            self.gn_iterations,
            self.skipped_steps,
            u8::from(self.points_retained),
            self.max_component
        )
    }
}

pub fn epoch_csv(records: &[EpochRecord]) -> String {
    let mut s = format!("{EPOCH_CSV_HEADER}\n");
    for r in records {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Output directory of one run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// `<out_dir>/run-<unix seconds>-<config hash prefix>`.
    pub fn create(cfg: &RunConfig) -> Result<Self> {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let path = cfg
            .out_dir
            .join(format!("run-{secs}-{}", &cfg.hash()[..12]));
        Self::at(path)
    }

    pub fn at(path: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.file(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

pub struct Trainer<'d> {
    pub cfg: RunConfig,
    data: &'d Dataset,
    backbone: TinyUNet,
    objective: NetObjective,
    pub split: DatasetSplit,
    tokens: BTreeMap<String, Tensor>,
    provider_id: Option<String>,
    pub clusters: ClusterModel,
    pub state: BilevelState,
    pub masks: PseudoMaskStore,
    pub records: Vec<EpochRecord>,
    pub losses: Vec<(usize, LossBreakdown)>,
    /// Epochs that ran bilevel iterations.
    pub triggers: Vec<usize>,
    pub gn_iterations: usize,
    step: usize,
}

fn split_for(cfg: &RunConfig, data: &Dataset) -> Result<DatasetSplit> {
    if cfg.val_ratio == data.val_ratio {
        return Ok(data.split.clone());
    }
    let mut pool: Vec<String> = data
        .split
        .train
        .iter()
        .chain(&data.split.val)
        .cloned()
        .collect();
    pool.sort();
    let mut s = make_split(&pool, cfg.val_ratio, data.seed)?;
    s.test = data.split.test.clone();
    Ok(s)
}

/// Last `k` token blocks of each image.
pub fn extract_tokens(
    provider: &dyn FeatureProvider,
    samples: &[&InfraredSample],
    k: usize,
) -> Result<BTreeMap<String, Tensor>> {
    if k > provider.num_blocks() {
        return Err(Error::Config(format!(
            "{k} blocks requested, provider '{}' has {}",
            provider.id(),
            provider.num_blocks()
        )));
    }
    let mut out = BTreeMap::new();
    for s in samples {
        let tf = provider.extract(&s.image, &s.id)?;
        let (n, d) = (tf.num_tokens(), tf.dim());
        let skip = tf.num_blocks() - k;
        let data = (skip..tf.num_blocks())
            .flat_map(|b| tf.block(b).to_vec())
            .collect();
        out.insert(s.id.clone(), Tensor::new(&[k, n, d], data));
    }
    Ok(out)
}

impl<'d> Trainer<'d> {
    /// Fresh training state. The full mode needs a feature provider.
    pub fn new(
        cfg: RunConfig,
        data: &'d Dataset,
        provider: Option<&dyn FeatureProvider>,
    ) -> Result<Self> {
        cfg.validate()?;
        let split = split_for(&cfg, data)?;
        let train = data.select(&split.train)?;
        let val = data.select(&split.val)?;
        let backbone = TinyUNet::default();
        backbone.check_input(data.size.0, data.size.1)?;

        let feats = |s: &[&InfraredSample]| -> Vec<(String, _)> {
            s.iter()
                .map(|x| (x.id.clone(), prior_features(&x.image, x.points.len())))
                .collect()
        };
        let clusters = ClusterModel::fit(
            &feats(&train),
            &feats(&val),
            cfg.clusters,
            mix_seed(&[cfg.seed, 0xC1]),
        )?;

        let theta = backbone.init_params(mix_seed(&[cfg.seed, 1]))?;
        let (spec, phi, tokens, provider_id) = match cfg.mode {
            Mode::Full => {
                let p = provider.ok_or_else(|| {
                    Error::Provider("the full mode needs a feature provider".into())
                })?;
                let spec = teacher_spec(&backbone, cfg.blocks, p.dim(), cfg.scam_hidden);
                let phi = spec.init_phi(mix_seed(&[cfg.seed, 2]))?;
                let all: Vec<&InfraredSample> = train.iter().chain(&val).copied().collect();
                let tokens = extract_tokens(p, &all, cfg.blocks)?;
                (spec, phi, tokens, Some(p.id().to_string()))
            }
            Mode::StudentOnly => (
                teacher_spec(&backbone, cfg.blocks, 1, cfg.scam_hidden),
                ParamSet::zeros(vec![])?,
                BTreeMap::new(),
                None,
            ),
        };
        let state = BilevelState::new(theta, phi, cfg.clusters, cfg.hyper())?;

        let points = train
            .iter()
            .chain(&val)
            .map(|s| (s.id.clone(), s.points.clone()))
            .collect();
        let masks = PseudoMaskStore::init(points, data.size)?;
        let objective = NetObjective {
            backbone: backbone.clone(),
            spec,
            weights: cfg.loss_weights(),
        };
        let mut t = Self {
            cfg,
            data,
            backbone,
            objective,
            split,
            tokens,
            provider_id,
            clusters,
            state,
            masks,
            records: Vec::new(),
            losses: Vec::new(),
            triggers: Vec::new(),
            gn_iterations: 0,
            step: 0,
        };
        let initial = t.record(0, 0.0, 0.0, 0, 0, false)?;
        t.records.push(initial);
        Ok(t)
    }

    /// Continue from a checkpoint written under an equivalent config.
    pub fn resume(
        cfg: RunConfig,
        data: &'d Dataset,
        provider: Option<&dyn FeatureProvider>,
        ck: Checkpoint,
    ) -> Result<Self> {
        ck.verify(&cfg)?;
        let mut t = Self::new(cfg, data, provider)?;
        if !ck.state.theta.same_layout(&t.state.theta) || !ck.state.phi.same_layout(&t.state.phi) {
            return Err(Error::Checkpoint(
                "parameter layout differs from the configured networks".into(),
            ));
        }
        t.state = ck.state;
        t.clusters = ck.clusters;
        t.masks = PseudoMaskStore::restore(&ck.masks)?;
        t.records = ck.records;
        t.triggers = ck.triggers;
        t.gn_iterations = ck.gn_iterations;
        t.step = ck.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let param_order = self
            .state
            .theta
            .specs()
            .iter()
            .chain(self.state.phi.specs())
            .map(|s| s.name.clone())
            .collect();
        Checkpoint {
            format: FORMAT_VERSION,
            config_hash: self.cfg.hash(),
            config: self.cfg.clone(),
            backbone: self.backbone.name().to_string(),
            channels: self.backbone.channels,
            param_order,
            provider_id: self.provider_id.clone(),
            state: self.state.clone(),
            clusters: self.clusters.clone(),
            masks: self.masks.snapshot(),
            records: self.records.clone(),
            triggers: self.triggers.clone(),
            gn_iterations: self.gn_iterations,
            step: self.step,
        }
    }

    pub fn backbone(&self) -> &TinyUNet {
        &self.backbone
    }

    fn samples(&self, ids: &[String]) -> Result<Vec<&'d InfraredSample>> {
        self.data.select(ids)
    }

    fn batch(&self, ids: &[&str]) -> Result<NetBatch> {
        let samples: Vec<&InfraredSample> = ids
            .iter()
            .map(|id| self.data.get(id))
            .collect::<Result<_>>()?;
        let frames: Vec<&Frame> = samples.iter().map(|s| &s.image).collect();
        let images = batch_images(&frames)?;
        let mut target = Vec::with_capacity(images.len());
        for id in ids {
            target.extend(self.masks.get(id)?.to_f64());
        }
        let targets = Tensor::new(images.shape(), target);
        let tokens = if self.cfg.mode == Mode::Full {
            let t: Vec<&Tensor> = ids
                .iter()
                .map(|id| {
                    self.tokens
                        .get(*id)
                        .ok_or_else(|| Error::State(format!("no tokens for '{id}'")))
                })
                .collect::<Result<_>>()?;
            stack_tokens(&t)?
        } else {
            Tensor::zeros(&[ids.len(), 0, 0, 0])
        };
        Ok(NetBatch {
            images,
            tokens,
            targets,
            clusters: self.clusters.clusters_of(ids)?,
        })
    }

    /// Probability maps that drive evolution: teacher in the full mode,
    /// student otherwise.
    fn evolution_probs(&self, ids: &[String]) -> Result<Vec<Vec<f64>>> {
        let samples = self.samples(ids)?;
        let frames: Vec<&Frame> = samples.iter().map(|s| &s.image).collect();
        match self.cfg.mode {
            Mode::Full => {
                let tokens: Vec<&Tensor> = ids
                    .iter()
                    .map(|id| {
                        self.tokens
                            .get(id)
                            .ok_or_else(|| Error::State(format!("no tokens for '{id}'")))
                    })
                    .collect::<Result<_>>()?;
                let spec = &self.objective.spec;
                Ok(predict_teacher(
                    &self.backbone,
                    spec,
                    &self.state.theta,
                    &self.state.phi,
                    &frames,
                    &tokens,
                )?
                .0)
            }
            Mode::StudentOnly => predict_student(&self.backbone, &self.state.theta, &frames),
        }
    }

    fn evolve(&mut self, epoch: usize) -> Result<()> {
        let ids: Vec<String> = self
            .split
            .train
            .iter()
            .chain(&self.split.val)
            .cloned()
            .collect();
        let probs = self.evolution_probs(&ids)?;
        for (id, p) in ids.iter().zip(&probs) {
            self.masks.evolve(id, p)?;
        }
        self.masks.last_update_epoch = epoch;
        Ok(())
    }

    /// Mean per-image pseudo-mask IoU overall and per characteristic.
    pub fn pseudo_mask_iou(&self) -> Result<(f64, [f64; 4])> {
        let ids: Vec<String> = self
            .split
            .train
            .iter()
            .chain(&self.split.val)
            .cloned()
            .collect();
        let samples = self.samples(&ids)?;
        let masks: Vec<&Mask> = ids
            .iter()
            .map(|id| self.masks.get(id))
            .collect::<Result<_>>()?;
        let gts: Vec<&Mask> = samples.iter().map(|s| &s.gt_mask).collect();
        let overall = niou(&masks, &gts)?;
        let mut by_tag = [f64::NAN; 4];
        for (k, tag) in Characteristic::ALL.iter().enumerate() {
            let idx: Vec<usize> = (0..ids.len()).filter(|&i| samples[i].tag == *tag).collect();
            if !idx.is_empty() {
                let m: Vec<&Mask> = idx.iter().map(|&i| masks[i]).collect();
                let g: Vec<&Mask> = idx.iter().map(|&i| gts[i]).collect();
                by_tag[k] = niou(&m, &g)?;
            }
        }
        Ok((overall, by_tag))
    }

    fn pooled_student_iou(&self, ids: &[String]) -> Result<f64> {
        if ids.is_empty() {
            return Ok(f64::NAN);
        }
        let samples = self.samples(ids)?;
        let preds = student_masks(&self.backbone, &self.state.theta, &samples)?;
        let p: Vec<&Mask> = preds.iter().collect();
        let g: Vec<&Mask> = samples.iter().map(|s| &s.gt_mask).collect();
        iou(&p, &g)
    }

    fn record(
        &self,
        epoch: usize,
        loss_in: f64,
        loss_task_s: f64,
        gn_iterations: usize,
        skipped_steps: usize,
        bilevel: bool,
    ) -> Result<EpochRecord> {
        let (pseudo_iou, pseudo_iou_by_tag) = self.pseudo_mask_iou()?;
        Ok(EpochRecord {
            epoch,
            train_iou: self.pooled_student_iou(&self.split.train)?,
            test_iou: self.pooled_student_iou(&self.split.test)?,
            loss_in,
            loss_task_s,
            pseudo_iou,
            pseudo_iou_by_tag,
            bilevel,
            gn_iterations,
            skipped_steps,
            points_retained: self.masks.points_retained(),
            max_component: self.masks.largest_component(),
        })
    }

    fn epoch_rng(&self, epoch: usize, stream: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(&[self.cfg.seed, epoch as u64, stream]))
    }

    /// One regular pass over the training set in a seeded order. Returns
    /// mean `L_in`, mean student task loss and the number of skipped steps.
    fn regular_epoch(&mut self, epoch: usize) -> Result<(f64, f64, usize)> {
        let mut order: Vec<String> = self.split.train.clone();
        order.shuffle(&mut self.epoch_rng(epoch, 0xE0));
        let (mut sum_in, mut sum_task, mut done, mut skipped) = (0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(self.cfg.batch) {
            let ids: Vec<&str> = chunk.iter().map(|s| s.as_str()).collect();
            let batch = self.batch(&ids)?;
            self.step += 1;
            let result = match self.cfg.mode {
                Mode::Full => self.objective.regular_step(&mut self.state, &batch),
                Mode::StudentOnly => student_step(
                    &self.backbone,
                    &mut self.state,
                    &batch.images,
                    &batch.targets,
                )
                .map(|l| LossBreakdown {
                    task_s: l,
                    total_out: l,
                    ..Default::default()
                }),
            };
            match result {
                Ok(parts) => {
                    sum_in += parts.total_in;
                    sum_task += parts.task_s;
                    done += 1;
                    self.losses.push((self.step, parts));
                }
                Err(Error::Numeric { .. }) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        if done == 0 {
            return Err(Error::numeric(
                format!("epoch {epoch}"),
                "every training step was non-finite",
            ));
        }
        Ok((sum_in / done as f64, sum_task / done as f64, skipped))
    }

    /// `gn_steps` iterations of inner step on a train batch followed by
    /// outer step on a validation batch. Returns (iterations, skipped).
    fn bilevel_iterations(&mut self, epoch: usize) -> Result<(usize, usize)> {
        let mut rng = self.epoch_rng(epoch, 0xB1);
        let mut skipped = 0;
        for _ in 0..self.cfg.gn_steps {
            let tr: Vec<&str> = self
                .split
                .train
                .choose_multiple(&mut rng, self.cfg.batch)
                .map(|s| s.as_str())
                .collect();
            let va: Vec<&str> = self
                .split
                .val
                .choose_multiple(&mut rng, self.cfg.batch)
                .map(|s| s.as_str())
                .collect();
            let (tb, vb) = (self.batch(&tr)?, self.batch(&va)?);
            self.step += 1;
            match self.state.inner_step(&self.objective, &tb) {
                Ok(r) => self.losses.push((self.step, r.breakdown)),
                Err(Error::Numeric { .. }) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            }
            match self.state.outer_step(&self.objective, &vb) {
                Ok(r) => self.losses.push((self.step, r.breakdown)),
                Err(Error::Numeric { .. }) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        Ok((self.cfg.gn_steps, skipped))
    }

    fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        if epoch > self.cfg.evolve_warmup {
            self.evolve(epoch)?;
        }
        let (loss_in, loss_task, mut skipped) = self.regular_epoch(epoch)?;
        let mut iterations = 0;
        let bilevel = self.cfg.mode == Mode::Full && self.state.hyper.is_bilevel_epoch(epoch);
        if bilevel {
            let (n, s) = self.bilevel_iterations(epoch)?;
            iterations = n;
            skipped += s;
            self.triggers.push(epoch);
            self.gn_iterations += n;
        }
        self.state.epoch = epoch;
        self.record(epoch, loss_in, loss_task, iterations, skipped, bilevel)
    }

    fn write_logs(&self, dir: &RunDir) -> Result<()> {
        dir.write("epochs.csv", &epoch_csv(&self.records))?;
        let mut s = format!("{}\n", LossBreakdown::CSV_HEADER);
        for (step, parts) in &self.losses {
            let _ = writeln!(s, "{}", parts.csv_row(*step));
        }
        dir.write("losses.csv", &s)?;
        self.clusters.save(&dir.file("clusters.json"))
    }

    /// Train until `cfg.epochs`. With a run directory, logs are rewritten
    /// every epoch and checkpoints are written every `bilevel_period`
    /// epochs and at the end. A numeric failure that empties an epoch
    /// aborts after saving the last good state.
    pub fn run(&mut self, dir: Option<&RunDir>) -> Result<()> {
        if let Some(d) = dir {
            d.write("config.toml", &self.cfg.to_toml()?)?;
        }
        let mut last_good = self.checkpoint();
        for epoch in self.state.epoch + 1..=self.cfg.epochs {
            match self.run_epoch(epoch) {
                Ok(rec) => {
                    log::info!(
                        "epoch {epoch}: train IoU {:.4}, test IoU {:.4}, pseudo IoU {:.4}",
                        rec.train_iou,
                        rec.test_iou,
                        rec.pseudo_iou
                    );
                    self.records.push(rec);
                }
                Err(e @ Error::Numeric { .. }) => {
                    if let Some(d) = dir {
                        last_good.save(&d.file("last_good.json"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
            if let Some(d) = dir {
                self.write_logs(d)?;
                if epoch % self.cfg.bilevel_period == 0 {
                    self.checkpoint()
                        .save(&d.file(&format!("ckpt_e{epoch:04}.json")))?;
                }
            }
            last_good = self.checkpoint();
        }
        if let Some(d) = dir {
            self.write_logs(d)?;
            last_good.save(&d.file("final.json"))?;
        }
        Ok(())
    }

    /// Student-only report on the test split.
    pub fn test_report(&self) -> Result<EvalReport> {
        let samples = self.samples(&self.split.test)?;
        crate::inference::evaluate_student(&self.backbone, &self.state.theta, &samples, "test")
    }
}
