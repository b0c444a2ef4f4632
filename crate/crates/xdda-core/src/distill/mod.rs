//! Three-stage teacher-student training: joint-domain pretraining on labeled
//! source and target-like images, cross-domain distillation on teacher pseudo
//! labels, then dual-teacher refinement where the teacher tracks the student
//! by exponential moving average. Inference always uses the teacher's
//! source-adaptive branch alone.

pub mod checkpoint;
pub mod optim;

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{flip_boxes, strong_augment, weak_augment, DataError, Dataset, StoredScene};
use crate::detector::boxes::{BBox, Detection, GtBox};
use crate::detector::eval::{evaluate_map, MapResult};
use crate::detector::losses::{branch_loss, rpn_loss_on, LossConfig, LossValue};
use crate::detector::model::{
    BranchKind, DetectorError, DualBranchModel, InferenceConfig, ModelDims,
};
use crate::fourier::{fda_transfer, FourierError};
use crate::image::ImageF;
use crate::perceiver::AttentionMode;
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{Tensor, TensorError};

use optim::Sgd;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Fourier(#[from] FourierError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid checkpoint: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid config: {0}")]
    BadConfig(String),
}

/// Every hyperparameter of the three-stage protocol.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct DistillConfig {
    pub pseudo_threshold: f64,
    pub ema_alpha: f64,
    pub nms_iou: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iters_jdp: usize,
    pub iters_cdd_plus_dtr: usize,
    /// Iterations of distillation with the teacher held fixed before
    /// refinement starts.
    pub cdd_warmup: usize,
    pub beta_fda: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub eval_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            pseudo_threshold: 0.7,
            ema_alpha: 0.9996,
            nms_iou: 0.5,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            iters_jdp: 1500,
            iters_cdd_plus_dtr: 2500,
            cdd_warmup: 400,
            beta_fda: 0.1,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            eval_every: 250,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if !(self.pseudo_threshold > 0.0 && self.pseudo_threshold < 1.0) {
            return Err(DistillError::BadConfig(format!(
                "pseudo_threshold {} outside (0,1)",
                self.pseudo_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(DistillError::BadConfig(format!(
                "ema_alpha {} outside [0,1]",
                self.ema_alpha
            )));
        }
        if self.cdd_warmup > self.iters_cdd_plus_dtr {
            return Err(DistillError::BadConfig(
                "cdd_warmup exceeds the distillation budget".into(),
            ));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            focal_gamma: self.focal_gamma,
            focal_alpha: self.focal_alpha,
            ..LossConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stage {
    Jdp = 0,
    Cdd = 1,
    Dtr = 2,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Jdp => write!(f, "JDP"),
            Stage::Cdd => write!(f, "CDD"),
            Stage::Dtr => write!(f, "DTR"),
        }
    }
}

pub struct TeacherStudentPair {
    pub teacher: DualBranchModel,
    pub student: DualBranchModel,
    pub stage: Stage,
}

/// Named loss terms of one optimization step.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StepBreakdown {
    pub terms: Vec<(String, f64)>,
    pub total: f64,
}

impl StepBreakdown {
    fn push(&mut self, name: &str, v: &LossValue) {
        self.terms.push((name.to_string(), v.total()));
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Pseudo annotations from both teacher branches, kept separate.
#[derive(Clone, Debug, Default)]
pub struct PseudoLabelSet {
    pub sa: Vec<Detection>,
    pub tl: Vec<Detection>,
}

impl PseudoLabelSet {
    pub fn is_empty(&self) -> bool {
        self.sa.is_empty() && self.tl.is_empty()
    }
}

fn to_gt(dets: &[Detection]) -> Vec<GtBox> {
    dets.iter().map(|d| GtBox { bbox: d.bbox, class_id: d.class_id }).collect()
}

/// Candidate floor well below any useful pseudo threshold; detections are
/// suppressed and then filtered at the configured threshold.
fn pseudo_inference_config(cfg: &DistillConfig) -> InferenceConfig {
    InferenceConfig { score_thresh: 0.05, nms_iou: cfg.nms_iou, max_detections: 50 }
}

/// Run both teacher branches on a weak-augmented target image, suppress
/// duplicates per class, and keep confident boxes. The two sets stay
/// separate.
pub fn generate_pseudo_labels(
    teacher: &DualBranchModel,
    target_weak: &ImageF,
    cfg: &DistillConfig,
) -> Result<PseudoLabelSet, DistillError> {
    let inf = pseudo_inference_config(cfg);
    let set = teacher.extract_proposals(target_weak)?;
    let mut out = PseudoLabelSet::default();
    for (branch, dst) in [(BranchKind::Sa, &mut out.sa), (BranchKind::Tl, &mut out.tl)] {
        let fwd = teacher.branch_forward(branch, &set.features, &[], false)?;
        let dets = crate::detector::model::decode_detections(
            &set.proposals,
            &fwd.class_logits.to_vec(),
            &fwd.box_deltas.to_vec(),
            teacher.dims.num_classes,
            teacher.dims.image_size as f64,
            &inf,
        );
        *dst = dets.into_iter().filter(|d| d.score >= cfg.pseudo_threshold).collect();
    }
    Ok(out)
}

/// Exponential moving average refresh: every teacher parameter moves toward
/// its student counterpart, `t <- alpha t + (1 - alpha) s`. The student is
/// untouched. Parameter name sets must match exactly.
pub fn ema_update(
    teacher: &DualBranchModel,
    student: &DualBranchModel,
    alpha: f64,
) -> Result<(), DistillError> {
    let tp = teacher.named_parameters();
    let sp = student.named_parameters();
    if tp.len() != sp.len() {
        return Err(DistillError::Contract(format!(
            "teacher has {} parameters, student {}",
            tp.len(),
            sp.len()
        )));
    }
    for (t, s) in tp.iter().zip(&sp) {
        if t.name() != s.name() {
            return Err(DistillError::Contract(format!(
                "parameter name mismatch: {} vs {}",
                t.name(),
                s.name()
            )));
        }
        let sv = s.values();
        t.apply_update(|tv| {
            for (tvi, svi) in tv.iter_mut().zip(&sv) {
                *tvi = alpha * *tvi + (1.0 - alpha) * svi;
            }
        });
    }
    Ok(())
}

/// A labeled training view: augmented image plus its (flip-adjusted) boxes.
struct TrainView {
    image: ImageF,
    annotations: Vec<GtBox>,
}

fn strong_view(image: &ImageF, annotations: &[GtBox], rng: &mut ChaCha8Rng) -> TrainView {
    let (img, flipped) = strong_augment(image, rng);
    let annotations = if flipped {
        let boxes: Vec<BBox> = annotations.iter().map(|a| a.bbox).collect();
        flip_boxes(&boxes, img.width() as f64)
            .into_iter()
            .zip(annotations)
            .map(|(bbox, a)| GtBox { bbox, class_id: a.class_id })
            .collect()
    } else {
        annotations.to_vec()
    };
    TrainView { image: img, annotations }
}

/// Supervised losses of one branch on one labeled view: shared-extractor RPN
/// loss plus that branch's classification/regression loss.
fn supervised_losses(
    model: &DualBranchModel,
    view: &TrainView,
    branch: BranchKind,
    use_perceiver: bool,
    cfg: &LossConfig,
) -> Result<(LossValue, LossValue), DistillError> {
    let set = model.extract_proposals(&view.image)?;
    let rpn = rpn_loss_on(&set.rpn, &view.annotations, cfg)?;
    let boxes: Vec<BBox> = set.proposals.iter().map(|p| p.bbox).collect();
    let fwd = model.branch_forward(branch, &set.features, &boxes, use_perceiver)?;
    let br = branch_loss(&fwd, &boxes, &view.annotations, model.dims.num_classes, cfg)?;
    Ok((rpn, br))
}

/// One joint-domain pretraining step: RPN loss on both the source scene and
/// its target-like transfer, SA branch loss on source, TL branch loss on
/// target-like; a single SGD step on their sum. The perceiver stays out of
/// this stage.
pub fn jdp_step(
    student: &DualBranchModel,
    source: &TrainScene,
    target_like: &TrainScene,
    optimizer: &mut Sgd,
    rng: &mut ChaCha8Rng,
    cfg: &DistillConfig,
) -> Result<StepBreakdown, DistillError> {
    let lcfg = cfg.loss_config();
    let src = strong_view(&source.image, &source.annotations, rng);
    let tl = strong_view(&target_like.image, &target_like.annotations, rng);

    let (rpn_s, sa_s) = supervised_losses(student, &src, BranchKind::Sa, false, &lcfg)?;
    let (rpn_t, tl_t) = supervised_losses(student, &tl, BranchKind::Tl, false, &lcfg)?;

    let total = rpn_s
        .tensor
        .add(&rpn_t.tensor)?
        .add(&sa_s.tensor)?
        .add(&tl_t.tensor)?;
    let mut breakdown = StepBreakdown::default();
    breakdown.push("rpn_src", &rpn_s);
    breakdown.push("rpn_tl", &rpn_t);
    breakdown.push("sa_src", &sa_s);
    breakdown.push("tl_tl", &tl_t);
    breakdown.total = total.item();

    student.zero_grad();
    total.backward()?;
    optimizer.step(&student.named_parameters());
    student.zero_grad();
    Ok(breakdown)
}

/// One cross-domain distillation step (also the refinement step body).
///
/// The teacher sees the weak-augmented target image and emits pseudo labels
/// from both branches; the student trains on the strong-augmented target
/// against those labels (RPN against both sets, SA branch with the perceiver
/// active, TL branch plain) plus the full supervised pair from joint-domain
/// pretraining. One SGD step on the student only. When both pseudo sets are
/// empty the target terms vanish and the step reduces to joint-domain
/// pretraining.
pub fn cdd_step(
    pair: &TeacherStudentPair,
    source: &TrainScene,
    target_like: &TrainScene,
    target: &ImageF,
    optimizer: &mut Sgd,
    rng: &mut ChaCha8Rng,
    cfg: &DistillConfig,
) -> Result<StepBreakdown, DistillError> {
    if pair.stage == Stage::Jdp {
        return Err(DistillError::Contract(
            "cdd_step requires the distillation or refinement stage".into(),
        ));
    }
    let lcfg = cfg.loss_config();
    let student = &pair.student;

    // Teacher view and pseudo labels.
    let (weak_img, teacher_flip) = weak_augment(target, rng);
    let pseudo = generate_pseudo_labels(&pair.teacher, &weak_img, cfg)?;

    // Student view; map pseudo boxes between the two flip states.
    let (strong_img, student_flip) = strong_augment(target, rng);
    let remap = |dets: &[Detection]| -> Vec<GtBox> {
        let mut gts = to_gt(dets);
        if teacher_flip != student_flip {
            let boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
            let flipped = flip_boxes(&boxes, strong_img.width() as f64);
            for (g, b) in gts.iter_mut().zip(flipped) {
                g.bbox = b;
            }
        }
        gts
    };

    let mut breakdown = StepBreakdown::default();
    let mut total: Option<Tensor> = None;
    let add = |total: &mut Option<Tensor>, t: &Tensor| -> Result<(), DistillError> {
        *total = Some(match total.take() {
            Some(acc) => acc.add(t)?,
            None => t.clone(),
        });
        Ok(())
    };

    if !pseudo.is_empty() {
        let gt_sa = remap(&pseudo.sa);
        let gt_tl = remap(&pseudo.tl);

        let set = student.extract_proposals(&strong_img)?;
        let boxes: Vec<BBox> = set.proposals.iter().map(|p| p.bbox).collect();

        // RPN loss against each branch's pseudo set.
        let rpn_sa = rpn_loss_on(&set.rpn, &gt_sa, &lcfg)?;
        let rpn_tl = rpn_loss_on(&set.rpn, &gt_tl, &lcfg)?;

        // SA branch perceives target-like context for target images.
        let sa_fwd = student.branch_forward(BranchKind::Sa, &set.features, &boxes, true)?;
        let sa_l = branch_loss(&sa_fwd, &boxes, &gt_sa, student.dims.num_classes, &lcfg)?;
        let tl_uses_perceiver = student.dims.attention_mode == AttentionMode::Sym;
        let tl_fwd = student.branch_forward(BranchKind::Tl, &set.features, &boxes, tl_uses_perceiver)?;
        let tl_l = branch_loss(&tl_fwd, &boxes, &gt_tl, student.dims.num_classes, &lcfg)?;

        let rpn_tgt = rpn_sa.tensor.add(&rpn_tl.tensor)?;
        breakdown.terms.push(("rpn_tgt".into(), rpn_tgt.item()));
        breakdown.push("sa_tgt", &sa_l);
        breakdown.push("tl_tgt", &tl_l);
        add(&mut total, &rpn_tgt)?;
        add(&mut total, &sa_l.tensor)?;
        add(&mut total, &tl_l.tensor)?;
    } else {
        breakdown.terms.push(("rpn_tgt".into(), 0.0));
        breakdown.terms.push(("sa_tgt".into(), 0.0));
        breakdown.terms.push(("tl_tgt".into(), 0.0));
    }

    // Supervised pair, exactly as in joint-domain pretraining.
    let src = strong_view(&source.image, &source.annotations, rng);
    let tl = strong_view(&target_like.image, &target_like.annotations, rng);
    let (rpn_s, sa_s) = supervised_losses(student, &src, BranchKind::Sa, false, &lcfg)?;
    let (rpn_t, tl_t) = supervised_losses(student, &tl, BranchKind::Tl, false, &lcfg)?;
    breakdown.push("rpn_src", &rpn_s);
    breakdown.push("rpn_tl", &rpn_t);
    breakdown.push("sa_src", &sa_s);
    breakdown.push("tl_tl", &tl_t);
    add(&mut total, &rpn_s.tensor)?;
    add(&mut total, &rpn_t.tensor)?;
    add(&mut total, &sa_s.tensor)?;
    add(&mut total, &tl_t.tensor)?;

    let total = total.expect("supervised terms always present");
    breakdown.total = total.item();

    student.zero_grad();
    total.backward()?;
    optimizer.step(&student.named_parameters());
    student.zero_grad();
    Ok(breakdown)
}

/// A raw labeled scene handed to the step functions (pre-augmentation).
pub struct TrainScene {
    pub image: ImageF,
    pub annotations: Vec<GtBox>,
}

impl TrainScene {
    pub fn from_stored(s: &StoredScene) -> Self {
        TrainScene { image: s.image(), annotations: s.annotations.clone() }
    }
}

/// One evaluation snapshot in the metrics log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: usize,
    pub stage: Stage,
    pub map_target: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub loss_terms: Vec<(String, f64)>,
}

pub struct RunResult {
    pub teacher: DualBranchModel,
    pub student: DualBranchModel,
    pub metrics: Vec<MetricsRecord>,
}

/// Inference-time evaluation of one model's SA branch over a split.
pub fn evaluate_model(
    model: &DualBranchModel,
    scenes: &[StoredScene],
    inference: &InferenceConfig,
) -> Result<MapResult, DistillError> {
    let mut preds = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    for s in scenes {
        preds.push(model.detect(&s.image(), BranchKind::Sa, inference)?);
        gts.push(s.annotations.clone());
    }
    Ok(evaluate_map(&preds, &gts, model.dims.num_classes, 0.5))
}

fn sample_fda_pair(
    dataset: &Dataset,
    rng: &mut ChaCha8Rng,
    beta: f64,
) -> Result<(TrainScene, TrainScene), DistillError> {
    let src = &dataset.train_source[rng.random_range(0..dataset.train_source.len())];
    let tgt = &dataset.train_target[rng.random_range(0..dataset.train_target.len())];
    let src_scene = TrainScene::from_stored(src);
    let tl_img = fda_transfer(&src_scene.image, &tgt.image(), beta)?;
    let tl_scene = TrainScene { image: tl_img, annotations: src_scene.annotations.clone() };
    Ok((src_scene, tl_scene))
}

/// Full three-stage run: pretraining, distillation with a fixed teacher,
/// then refinement with per-step EMA. Returns the trained pair and the
/// metrics history (snapshots every `eval_every` iterations plus a final
/// one, always through the teacher's SA branch once a teacher exists).
pub fn run_pipeline(
    dims: &ModelDims,
    cfg: &DistillConfig,
    dataset: &Dataset,
    seed: u64,
) -> Result<RunResult, DistillError> {
    cfg.validate()?;
    if dataset.train_source.is_empty() || dataset.train_target.is_empty() {
        return Err(DistillError::BadConfig("empty training split".into()));
    }
    let inference = InferenceConfig::default();
    let student = DualBranchModel::new(*dims, derive_seed(seed, 1))?;
    let mut optimizer = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut rng = rng_from(derive_seed(seed, 2));
    let mut metrics: Vec<MetricsRecord> = Vec::new();

    // Stage 1: joint-domain pretraining.
    let mut last_breakdown;
    for it in 0..cfg.iters_jdp {
        let (src, tl) = sample_fda_pair(dataset, &mut rng, cfg.beta_fda)?;
        last_breakdown = jdp_step(&student, &src, &tl, &mut optimizer, &mut rng, cfg)?;
        if (it + 1) % cfg.eval_every == 0 {
            let m = evaluate_model(&student, &dataset.eval_target, &inference)?;
            metrics.push(MetricsRecord {
                iter: it + 1,
                stage: Stage::Jdp,
                map_target: m.map,
                per_class_ap: m.per_class.iter().map(|c| c.ap).collect(),
                loss_terms: last_breakdown.terms.clone(),
            });
        }
    }

    // Teacher is the pretrained network; student keeps training with a
    // freshly drawn perceiver.
    let teacher = student.deep_clone(true);
    student.reinit_perceiver(derive_seed(seed, 3));
    let mut pair = TeacherStudentPair { teacher, student, stage: Stage::Cdd };

    for it in 0..cfg.iters_cdd_plus_dtr {
        if it == cfg.cdd_warmup {
            pair.stage = Stage::Dtr;
        }
        let (src, tl) = sample_fda_pair(dataset, &mut rng, cfg.beta_fda)?;
        let tgt = &dataset.train_target[rng.random_range(0..dataset.train_target.len())];
        last_breakdown = cdd_step(&pair, &src, &tl, &tgt.image(), &mut optimizer, &mut rng, cfg)?;
        if pair.stage == Stage::Dtr {
            ema_update(&pair.teacher, &pair.student, cfg.ema_alpha)?;
        }
        if (it + 1) % cfg.eval_every == 0 || it + 1 == cfg.iters_cdd_plus_dtr {
            let m = evaluate_model(&pair.teacher, &dataset.eval_target, &inference)?;
            metrics.push(MetricsRecord {
                iter: cfg.iters_jdp + it + 1,
                stage: pair.stage,
                map_target: m.map,
                per_class_ap: m.per_class.iter().map(|c| c.ap).collect(),
                loss_terms: last_breakdown.terms.clone(),
            });
        }
    }

    Ok(RunResult { teacher: pair.teacher, student: pair.student, metrics })
}

impl DualBranchModel {
    /// Fresh perceiver draw on a live model (both attention sides when the
    /// symmetric variant is active).
    pub fn reinit_perceiver(&self, seed: u64) {
        self.perceiver.reinit(seed);
        if let Some(ptl) = &self.perceiver_tl {
            ptl.reinit(derive_seed(seed, 1));
        }
    }
}

pub fn write_metrics(path: &std::path::Path, metrics: &[MetricsRecord]) -> Result<(), DistillError> {
    let mut out = Vec::new();
    for m in metrics {
        serde_json::to_writer(&mut out, m).expect("metrics serialize");
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| DistillError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn read_metrics(path: &std::path::Path) -> Result<Vec<MetricsRecord>, DistillError> {
    let text = std::fs::read_to_string(path).map_err(|e| DistillError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| DistillError::Checkpoint {
                path: path.display().to_string(),
                reason: format!("bad metrics line: {e}"),
            })
        })
        .collect()
}
