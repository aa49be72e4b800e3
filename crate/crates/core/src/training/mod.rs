//! The two-stage training protocol: single-view pretraining on mixed
//! surface+section patches, then multi-view training of the fusion and
//! classifier layers over paired views, with Adam and cross-entropy loss.

mod adam;
mod pairing;

pub use adam::{Adam, AdamParams};
pub use pairing::{pair_views, PairingPolicy, PatchPair};

use std::time::Instant;

use ndarray::{Array1, Array2, Array4, ArrayD};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data_model::{ClassSet, StoneClass, ViewKind};
use crate::error::{Error, Result};
use crate::nets::{
    build_head, forward_features, fuse, fuse_backward, softmax_rows, ClassifierHead,
    FeatureExtractor, ForwardOpts, FusionStrategy, HeadConfig, Layer, LayerSpec, MultiViewModel,
    Shape, SingleViewModel, Value,
};
use crate::numeric::Scalar;
use crate::patch_pipeline::{whiten_patch, Patch};
use crate::seed::{derive_seed, rng_for, rng_for_step};

/// Training hyperparameters. The epoch count is deliberately required:
/// construct via [`TrainConfig::with_epochs`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub shuffle: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl TrainConfig {
    /// Reference hyperparameters: Adam at learning rate 2e-4, batch size 64.
    pub fn with_epochs(epochs: usize) -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            batch_size: 64,
            epochs,
            loss: LossKind::CrossEntropy,
            optimizer: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            seed: 0,
            shuffle: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // learning_rate 0 is tolerated as an explicit no-op configuration.
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn adam_params(&self) -> AdamParams {
        let OptimizerKind::Adam {
            beta1,
            beta2,
            epsilon,
        } = self.optimizer;
        AdamParams {
            learning_rate: self.learning_rate,
            beta1,
            beta2,
            epsilon,
        }
    }
}

/// One whitened patch ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct DatasetItem<T> {
    pub patch_id: String,
    /// H x W x 3 whitened values.
    pub values: ndarray::Array3<T>,
    pub class_code: usize,
    pub view: ViewKind,
    pub specimen_id: String,
}

/// An in-memory dataset of whitened patches sharing one class set.
#[derive(Debug, Clone)]
pub struct PatchDataset<T> {
    pub items: Vec<DatasetItem<T>>,
    pub class_set: ClassSet,
    pub patch_size: usize,
}

impl<T: Scalar> PatchDataset<T> {
    /// Whitens `patches` and resolves their labels against `class_set`.
    pub fn from_patches(patches: &[Patch], class_set: &ClassSet, sigma_floor: f64) -> Result<Self> {
        let mut items = Vec::with_capacity(patches.len());
        let mut patch_size = 0;
        for patch in patches {
            let class_code = class_set.code_of(&patch.label).ok_or_else(|| {
                Error::Config(format!(
                    "patch {}: class {:?} not in the class set",
                    patch.patch_id,
                    patch.label.as_str()
                ))
            })?;
            let (h, w, _) = patch.pixels.dim();
            if h != w {
                return Err(Error::Config(format!(
                    "patch {} is {h}x{w}, expected square",
                    patch.patch_id
                )));
            }
            if patch_size == 0 {
                patch_size = h;
            } else if patch_size != h {
                return Err(Error::Config(format!(
                    "patch {} is {h}px, dataset is {patch_size}px",
                    patch.patch_id
                )));
            }
            let normalized = whiten_patch::<T>(patch, sigma_floor);
            items.push(DatasetItem {
                patch_id: patch.patch_id.clone(),
                values: normalized.values,
                class_code,
                view: patch.view,
                specimen_id: patch.specimen_id.clone(),
            });
        }
        Ok(PatchDataset {
            items,
            class_set: class_set.clone(),
            patch_size,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn indices_of_view(&self, view: ViewKind) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| self.items[i].view == view)
            .collect()
    }

    /// Assembles an NHWC batch plus class codes for the given items.
    pub fn batch(&self, indices: &[usize]) -> (Array4<T>, Vec<usize>) {
        let size = self.patch_size;
        let mut batch = Array4::zeros((indices.len(), size, size, 3));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &idx) in indices.iter().enumerate() {
            batch
                .slice_mut(ndarray::s![row, .., .., ..])
                .assign(&self.items[idx].values);
            labels.push(self.items[idx].class_code);
        }
        (batch, labels)
    }

    /// Splits off a validation subset by whole original-crop groups, so an
    /// augmented variant never lands on the other side of its parent.
    pub fn carve_validation(&self, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        use std::collections::BTreeMap;
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (idx, item) in self.items.iter().enumerate() {
            // Augmented ids extend their parent id, so the parent prefix
            // groups originals with their variants.
            let root = match item.patch_id.find("_a") {
                Some(pos) => item.patch_id[..pos].to_string(),
                None => item.patch_id.clone(),
            };
            groups.entry(root).or_default().push(idx);
        }
        let mut keys: Vec<&String> = groups.keys().collect();
        let mut rng = rng_for_step(seed, "carve-validation");
        keys.shuffle(&mut rng);
        let want_val = (fraction * self.items.len() as f64).round() as usize;
        let mut val = Vec::new();
        for key in keys {
            if val.len() >= want_val {
                break;
            }
            val.extend(&groups[key]);
        }
        let in_val: std::collections::HashSet<usize> = val.iter().copied().collect();
        let train: Vec<usize> = (0..self.items.len())
            .filter(|i| !in_val.contains(i))
            .collect();
        (train, val)
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub seconds: f64,
}

/// One record per completed epoch, in order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc,seconds\n");
        for e in &self.epochs {
            let fmt_opt = |v: Option<f64>| v.map(|v| format!("{v}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch,
                e.train_loss,
                e.train_acc,
                fmt_opt(e.val_loss),
                fmt_opt(e.val_acc),
                e.seconds
            ));
        }
        out
    }
}

/// Mean cross-entropy over the batch, its logit gradient, and the number of
/// correct argmax predictions (ties to the lowest class index).
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Array2<T>,
    targets: &[usize],
) -> (f64, Array2<T>, usize) {
    let (batch, classes) = logits.dim();
    assert_eq!(batch, targets.len());
    let probs = softmax_rows(logits);
    let inv_batch = T::from_f64(1.0 / batch as f64);
    let mut grad = probs.clone();
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for (row, &target) in targets.iter().enumerate() {
        debug_assert!(target < classes);
        let p = probs[[row, target]].as_f64();
        loss -= p.max(1e-300).ln();
        grad[[row, target]] = grad[[row, target]] - T::one();
        if argmax_row(&probs, row) == target {
            correct += 1;
        }
    }
    grad.mapv_inplace(|g| g * inv_batch);
    (loss / batch as f64, grad, correct)
}

/// Index of the row maximum; ties break to the lowest index.
pub fn argmax_row<T: Scalar>(matrix: &Array2<T>, row: usize) -> usize {
    let mut best = 0;
    let mut best_val = matrix[[row, 0]];
    for j in 1..matrix.dim().1 {
        if matrix[[row, j]] > best_val {
            best_val = matrix[[row, j]];
            best = j;
        }
    }
    best
}

fn batch_ranges(total: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < total {
        let end = (start + batch_size).min(total);
        out.push((start, end));
        start = end;
    }
    out
}

fn check_finite(loss: f64, epoch: usize, batch_idx: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Train(format!(
            "non-finite loss {loss} at epoch {epoch}, batch {batch_idx}"
        )))
    }
}

/// Loss/accuracy of a single-view model over `indices`, without updates.
/// Accumulation is batch-order independent up to float rounding.
pub fn evaluate_single_view<T: Scalar>(
    model: &SingleViewModel<T>,
    dataset: &PatchDataset<T>,
    indices: &[usize],
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut total_loss = 0.0;
    let mut total_correct = 0usize;
    for (start, end) in batch_ranges(indices.len(), batch_size) {
        let (batch, labels) = dataset.batch(&indices[start..end]);
        let features = forward_features(&model.extractor, &batch)?;
        let logits = model
            .head
            .stack
            .forward_eval(Value::Vector(features))
            .into_vector();
        let (loss, _, correct) = softmax_cross_entropy(&logits, &labels);
        total_loss += loss * labels.len() as f64;
        total_correct += correct;
    }
    let n = indices.len() as f64;
    Ok((total_loss / n, total_correct as f64 / n))
}

/// Loss/accuracy of a multi-view model over pairs, without updates.
pub fn evaluate_multi_view<T: Scalar>(
    model: &MultiViewModel<T>,
    dataset: &PatchDataset<T>,
    pairs: &[PatchPair],
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut total_loss = 0.0;
    let mut total_correct = 0usize;
    for (start, end) in batch_ranges(pairs.len(), batch_size) {
        let chunk = &pairs[start..end];
        let surface_idx: Vec<usize> = chunk.iter().map(|p| p.surface).collect();
        let section_idx: Vec<usize> = chunk.iter().map(|p| p.section).collect();
        let labels: Vec<usize> = chunk.iter().map(|p| p.label_code).collect();
        let (surface, _) = dataset.batch(&surface_idx);
        let (section, _) = dataset.batch(&section_idx);
        let fused = model.fused_features(&surface, &section)?;
        let head_input = match &model.fusion_dense {
            Some(dense) => dense
                .forward(Value::Vector(fused), &mut ForwardOpts::eval())
                .0
                .into_vector(),
            None => fused,
        };
        let logits = model
            .head
            .stack
            .forward_eval(Value::Vector(head_input))
            .into_vector();
        let (loss, _, correct) = softmax_cross_entropy(&logits, &labels);
        total_loss += loss * labels.len() as f64;
        total_correct += correct;
    }
    let n = pairs.len() as f64;
    Ok((total_loss / n, total_correct as f64 / n))
}

/// Stage one: trains extractor and head jointly on mixed surface+section
/// patches with Adam and cross-entropy, deterministic in `config.seed`.
pub fn train_single_view<T: Scalar>(
    extractor: FeatureExtractor<T>,
    head: ClassifierHead<T>,
    train: &PatchDataset<T>,
    train_indices: &[usize],
    val_indices: Option<&[usize]>,
    config: &TrainConfig,
) -> Result<(SingleViewModel<T>, TrainHistory)> {
    config.validate()?;
    if train_indices.is_empty() {
        return Err(Error::Train("empty training set".into()));
    }
    if extractor.frozen {
        return Err(Error::Train(
            "single-view pretraining requires an unfrozen extractor".into(),
        ));
    }
    let mut model = SingleViewModel { extractor, head };
    let mut optimizer = Adam::new(config.adam_params());
    let mut dropout_rng = rng_for_step(config.seed, "dropout");
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = train_indices.to_vec();
        if config.shuffle {
            let mut rng = rng_for_step(config.seed, &format!("epoch/{epoch}"));
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        for (batch_idx, (start, end)) in batch_ranges(order.len(), config.batch_size)
            .into_iter()
            .enumerate()
        {
            let (batch, labels) = train.batch(&order[start..end]);
            let input = model.extractor.check_batch(&batch)?;
            let mut opts = ForwardOpts {
                train: true,
                want_cache: true,
                dropout_rng: Some(&mut dropout_rng),
            };
            let (features, ext_caches) =
                model.extractor.stack.forward(Value::Map(input), &mut opts);
            let mut opts = ForwardOpts {
                train: true,
                want_cache: true,
                dropout_rng: Some(&mut dropout_rng),
            };
            let (logits, head_caches) = model.head.stack.forward(features, &mut opts);
            let (loss, grad_logits, correct) =
                softmax_cross_entropy(&logits.into_vector(), &labels);
            check_finite(loss, epoch, batch_idx)?;
            epoch_loss += loss * labels.len() as f64;
            epoch_correct += correct;

            let (grad_features, head_grads) = model
                .head
                .stack
                .backward(&head_caches, Value::Vector(grad_logits));
            let (_, ext_grads) = model.extractor.stack.backward(&ext_caches, grad_features);

            let mut grads = ext_grads;
            grads.extend(head_grads);
            let mut params = model.extractor.stack.params_mut();
            params.extend(model.head.stack.params_mut());
            optimizer.step(&mut params, &grads);
        }

        let (val_loss, val_acc) = match val_indices {
            Some(indices) if !indices.is_empty() => {
                let (l, a) = evaluate_single_view(&model, train, indices, config.batch_size)?;
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        history.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / order.len() as f64,
            train_acc: epoch_correct as f64 / order.len() as f64,
            val_loss,
            val_acc,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((model, history))
}

/// Freezes the feature-extraction layers of a trained single-view model,
/// discarding its head. Idempotent.
pub fn freeze_features<T: Scalar>(model: SingleViewModel<T>) -> FeatureExtractor<T> {
    let mut extractor = model.extractor;
    extractor.frozen = true;
    extractor
}

/// Builds the two-branch model from one frozen extractor: branches are
/// bitwise duplicates; fusion dense (concat only) and head are freshly
/// initialized.
pub fn build_multiview<T: Scalar>(
    frozen: &FeatureExtractor<T>,
    strategy: FusionStrategy,
    head_config: &HeadConfig,
    num_classes: usize,
    init_seed: u64,
) -> Result<MultiViewModel<T>> {
    if !frozen.frozen {
        return Err(Error::Config(
            "build_multiview requires a frozen extractor; run freeze_features first".into(),
        ));
    }
    let feature_dim = frozen.config.feature_dim;
    let fusion_dense = match strategy {
        FusionStrategy::Concat => {
            let mut rng = rng_for(derive_seed(init_seed, "fusion_dense"));
            Some(Layer::from_spec(
                &LayerSpec::dense(feature_dim),
                Shape::Vector {
                    len: 2 * feature_dim,
                },
                &mut rng,
            ))
        }
        FusionStrategy::MaxPool => None,
    };
    let head = build_head::<T>(
        feature_dim,
        num_classes,
        head_config,
        derive_seed(init_seed, "head"),
    )?;
    Ok(MultiViewModel {
        branch_surface: frozen.clone(),
        branch_section: frozen.clone(),
        fusion: strategy,
        fusion_dense,
        head,
    })
}

/// Stage two: trains only the fusion-adjacent and head parameters over
/// paired views. Branch parameters are digest-checked before and after;
/// any change aborts with an internal-error diagnostic.
pub fn train_multiview<T: Scalar>(
    mut model: MultiViewModel<T>,
    dataset: &PatchDataset<T>,
    pairs: &[PatchPair],
    val: Option<(&PatchDataset<T>, &[PatchPair])>,
    config: &TrainConfig,
    repair_policy: Option<PairingPolicy>,
) -> Result<(MultiViewModel<T>, TrainHistory)> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Train("empty pair set".into()));
    }
    if !model.branch_surface.frozen || !model.branch_section.frozen {
        return Err(Error::Train("multi-view branches must be frozen".into()));
    }
    let digests_before = model.branch_digests();

    let mut optimizer = Adam::new(config.adam_params());
    let mut dropout_rng = rng_for_step(config.seed, "dropout");
    let mut history = TrainHistory::default();
    let mut current_pairs: Vec<PatchPair> = pairs.to_vec();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        if let Some(policy) = repair_policy {
            if epoch > 0 {
                current_pairs = pair_views(
                    dataset,
                    policy,
                    derive_seed(config.seed, &format!("repair/{epoch}")),
                )?;
            }
        }
        let mut order: Vec<usize> = (0..current_pairs.len()).collect();
        if config.shuffle {
            let mut rng = rng_for_step(config.seed, &format!("epoch/{epoch}"));
            order.shuffle(&mut rng);
        }

        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        for (batch_idx, (start, end)) in batch_ranges(order.len(), config.batch_size)
            .into_iter()
            .enumerate()
        {
            let chunk: Vec<&PatchPair> = order[start..end]
                .iter()
                .map(|&i| &current_pairs[i])
                .collect();
            let surface_idx: Vec<usize> = chunk.iter().map(|p| p.surface).collect();
            let section_idx: Vec<usize> = chunk.iter().map(|p| p.section).collect();
            let labels: Vec<usize> = chunk.iter().map(|p| p.label_code).collect();
            let (surface, _) = dataset.batch(&surface_idx);
            let (section, _) = dataset.batch(&section_idx);

            // Frozen branches: plain forward, no caches, no gradient.
            let features_s = forward_features(&model.branch_surface, &surface)?;
            let features_c = forward_features(&model.branch_section, &section)?;
            let fused = fuse(&features_s, &features_c, model.fusion)?;

            let (head_input, dense_cache) = match &model.fusion_dense {
                Some(dense) => {
                    let mut opts = ForwardOpts {
                        train: true,
                        want_cache: true,
                        dropout_rng: None,
                    };
                    let (out, cache) = dense.forward(Value::Vector(fused.clone()), &mut opts);
                    (out.into_vector(), Some(cache))
                }
                None => (fused.clone(), None),
            };

            let mut opts = ForwardOpts {
                train: true,
                want_cache: true,
                dropout_rng: Some(&mut dropout_rng),
            };
            let (logits, head_caches) = model
                .head
                .stack
                .forward(Value::Vector(head_input), &mut opts);
            let (loss, grad_logits, correct) =
                softmax_cross_entropy(&logits.into_vector(), &labels);
            check_finite(loss, epoch, batch_idx)?;
            epoch_loss += loss * labels.len() as f64;
            epoch_correct += correct;

            let (grad_head_input, head_grads) = model
                .head
                .stack
                .backward(&head_caches, Value::Vector(grad_logits));

            let mut grads: Vec<ArrayD<T>> = Vec::new();
            if let (Some(dense), Some(cache)) = (&model.fusion_dense, &dense_cache) {
                let mut dense_grads = Vec::new();
                let grad_fused = dense.backward(grad_head_input, cache, &mut dense_grads);
                // Gradient w.r.t. branch features is discarded: branches are
                // frozen and inputs are data.
                let _ = fuse_backward(
                    &grad_fused.into_vector(),
                    &features_s,
                    &features_c,
                    model.fusion,
                );
                grads.extend(dense_grads);
            }
            grads.extend(head_grads);
            let mut params = model.trainable_params_mut();
            optimizer.step(&mut params, &grads);
        }

        let (val_loss, val_acc) = match val {
            Some((val_dataset, pairs)) if !pairs.is_empty() => {
                let (l, a) = evaluate_multi_view(&model, val_dataset, pairs, config.batch_size)?;
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        history.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / order.len() as f64,
            train_acc: epoch_correct as f64 / order.len() as f64,
            val_loss,
            val_acc,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    if model.branch_digests() != digests_before {
        return Err(Error::Train(
            "internal error: frozen branch parameters changed during multi-view training".into(),
        ));
    }
    Ok((model, history))
}

/// Probability predictions for a single-view model over dataset items.
pub fn predict_single_view<T: Scalar>(
    model: &SingleViewModel<T>,
    dataset: &PatchDataset<T>,
    indices: &[usize],
    batch_size: usize,
) -> Result<Array2<T>> {
    let mut rows: Vec<Array2<T>> = Vec::new();
    for (start, end) in batch_ranges(indices.len(), batch_size) {
        let (batch, _) = dataset.batch(&indices[start..end]);
        rows.push(model.predict(&batch)?);
    }
    concat_rows(rows, model.head.num_classes)
}

/// Probability predictions for a multi-view model over pairs.
pub fn predict_multi_view<T: Scalar>(
    model: &MultiViewModel<T>,
    dataset: &PatchDataset<T>,
    pairs: &[PatchPair],
    batch_size: usize,
) -> Result<Array2<T>> {
    let mut rows: Vec<Array2<T>> = Vec::new();
    for (start, end) in batch_ranges(pairs.len(), batch_size) {
        let chunk = &pairs[start..end];
        let surface_idx: Vec<usize> = chunk.iter().map(|p| p.surface).collect();
        let section_idx: Vec<usize> = chunk.iter().map(|p| p.section).collect();
        let (surface, _) = dataset.batch(&surface_idx);
        let (section, _) = dataset.batch(&section_idx);
        rows.push(model.predict(&surface, &section)?);
    }
    concat_rows(rows, model.head.num_classes)
}

fn concat_rows<T: Scalar>(chunks: Vec<Array2<T>>, cols: usize) -> Result<Array2<T>> {
    let total: usize = chunks.iter().map(|c| c.dim().0).sum();
    let mut out = Array2::zeros((total, cols));
    let mut row = 0;
    for chunk in chunks {
        let n = chunk.dim().0;
        out.slice_mut(ndarray::s![row..row + n, ..]).assign(&chunk);
        row += n;
    }
    Ok(out)
}

/// Class codes of the selected items, for confusion counting.
pub fn labels_of<T: Scalar>(dataset: &PatchDataset<T>, indices: &[usize]) -> Array1<usize> {
    Array1::from_iter(indices.iter().map(|&i| dataset.items[i].class_code))
}

/// Synthetic patch used across tests: a sinusoidal grating whose frequency
/// tracks the class code and whose orientation tracks the view.
#[allow(clippy::too_many_arguments)]
pub fn grating_patch(
    id: &str,
    class: &StoneClass,
    class_code: usize,
    view: ViewKind,
    specimen: &str,
    size: usize,
    phase: f64,
    noise_seed: u64,
) -> Patch {
    use rand::Rng;
    let mut rng = rng_for(noise_seed);
    let freq = 2.0 + 2.5 * class_code as f64;
    let angle = match view {
        ViewKind::Surface => 0.0f64,
        ViewKind::Section => std::f64::consts::FRAC_PI_2,
    };
    let (sin_a, cos_a) = angle.sin_cos();
    let pixels = ndarray::Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        let u = x as f64 / size as f64;
        let v = y as f64 / size as f64;
        let t = u * cos_a + v * sin_a;
        let wave = (2.0 * std::f64::consts::PI * freq * t + phase).sin();
        let base = 120.0 + 40.0 * wave * (1.0 + 0.2 * c as f64);
        let noise: f64 = rng.random_range(-8.0..8.0);
        (base + noise).clamp(0.0, 255.0) as u8
    });
    Patch {
        patch_id: id.into(),
        pixels,
        label: class.clone(),
        view,
        source_image_id: format!("img_{specimen}"),
        specimen_id: specimen.into(),
        augmented_from: None,
    }
}
