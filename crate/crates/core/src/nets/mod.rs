//! Network definitions: feature-extractor backbones, the classifier head,
//! and the two late-fusion layers, as pure numeric computations with exact
//! gradient semantics.

pub mod checkpoint;
mod layers;

pub use layers::{
    infer_shape, params_digest, softmax_rows, tensor_bytes, tensor_digest, tensor_from_flat,
    Cache, ForwardOpts, Layer, LayerSpec, Shape, Stack, Value,
};

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Scalar;
use crate::seed::rng_for;

/// Shipped backbone families. `Mini` is sized for desk-scale CPU runs; the
/// full-scale families mirror the classic layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneFamily {
    AlexnetLike,
    Vgg16Like,
    Mini,
}

impl FromStr for BackboneFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alexnet_like" => Ok(BackboneFamily::AlexnetLike),
            "vgg16_like" => Ok(BackboneFamily::Vgg16Like),
            "mini" => Ok(BackboneFamily::Mini),
            other => Err(Error::Config(format!("unknown backbone family {other:?}"))),
        }
    }
}

impl fmt::Display for BackboneFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneFamily::AlexnetLike => "alexnet_like",
            BackboneFamily::Vgg16Like => "vgg16_like",
            BackboneFamily::Mini => "mini",
        })
    }
}

/// A feature-extractor architecture. The layer list must be shape-consistent
/// and end in a length-`feature_dim` vector.
///
/// The extractor/classifier cut sits at the flatten boundary: everything up
/// to and including the first dense layer after flatten belongs to the
/// extractor, which therefore emits one feature vector per input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub family: BackboneFamily,
    /// Square input side length, pixels.
    pub input_size: usize,
    /// Length D of the emitted feature vector.
    pub feature_dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl BackboneConfig {
    /// 64x64 input, three conv blocks, D = 128.
    pub fn mini() -> Self {
        BackboneConfig {
            family: BackboneFamily::Mini,
            input_size: 64,
            feature_dim: 128,
            layers: vec![
                LayerSpec::Conv { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::Conv { out_channels: 16, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::Conv { out_channels: 32, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::dense(128),
            ],
        }
    }

    /// 224x224 input, five conv stages, D = 4096.
    pub fn alexnet_like() -> Self {
        BackboneConfig {
            family: BackboneFamily::AlexnetLike,
            input_size: 224,
            feature_dim: 4096,
            layers: vec![
                LayerSpec::Conv { out_channels: 64, kernel: 11, stride: 4, padding: 2 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 3, stride: 2 },
                LayerSpec::Conv { out_channels: 192, kernel: 5, stride: 1, padding: 2 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 3, stride: 2 },
                LayerSpec::Conv { out_channels: 384, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv { out_channels: 256, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv { out_channels: 256, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 3, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::dense(4096),
            ],
        }
    }

    /// 224x224 input, thirteen conv layers in five blocks, D = 4096.
    pub fn vgg16_like() -> Self {
        let mut layers = Vec::new();
        let blocks: [&[usize]; 5] = [
            &[64, 64],
            &[128, 128],
            &[256, 256, 256],
            &[512, 512, 512],
            &[512, 512, 512],
        ];
        for block in blocks {
            for &out_channels in block {
                layers.push(LayerSpec::Conv { out_channels, kernel: 3, stride: 1, padding: 1 });
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::MaxPool { kernel: 2, stride: 2 });
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::dense(4096));
        BackboneConfig {
            family: BackboneFamily::Vgg16Like,
            input_size: 224,
            feature_dim: 4096,
            layers,
        }
    }

    pub fn of_family(family: BackboneFamily) -> Self {
        match family {
            BackboneFamily::AlexnetLike => Self::alexnet_like(),
            BackboneFamily::Vgg16Like => Self::vgg16_like(),
            BackboneFamily::Mini => Self::mini(),
        }
    }

    pub fn input_shape(&self) -> Shape {
        Shape::Map {
            channels: 3,
            height: self.input_size,
            width: self.input_size,
        }
    }

    /// Walks the layer list, returning the final shape or the offending layer.
    pub fn check_shapes(&self) -> Result<Shape> {
        let mut shape = self.input_shape();
        for (idx, spec) in self.layers.iter().enumerate() {
            shape = infer_shape(shape, spec, idx)?;
        }
        match shape {
            Shape::Vector { len } if len == self.feature_dim => Ok(shape),
            other => Err(Error::Config(format!(
                "backbone must end in a vector of {}, got {}",
                self.feature_dim,
                other.describe()
            ))),
        }
    }
}

/// A parameterized backbone. When frozen, training steps leave its
/// parameters bitwise unchanged.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<T> {
    pub config: BackboneConfig,
    pub stack: Stack<T>,
    pub frozen: bool,
}

/// Builds a backbone with fan-in-scaled uniform initialization,
/// deterministic in `init_seed`.
pub fn build_backbone<T: Scalar>(
    config: &BackboneConfig,
    init_seed: u64,
) -> Result<FeatureExtractor<T>> {
    config.check_shapes()?;
    let mut rng = rng_for(init_seed);
    let stack = Stack::from_specs(config.input_shape(), &config.layers, &mut rng)?;
    Ok(FeatureExtractor {
        config: config.clone(),
        stack,
        frozen: false,
    })
}

impl<T: Scalar> FeatureExtractor<T> {
    /// Converts a public NHWC batch into the internal NCHW layout, checking
    /// the spatial size against the config.
    pub fn check_batch(&self, batch: &Array4<T>) -> Result<Array4<T>> {
        let (b, h, w, c) = batch.dim();
        let size = self.config.input_size;
        if h != size || w != size || c != 3 {
            return Err(Error::Shape {
                context: "forward_features".into(),
                expected: format!("Bx{size}x{size}x3"),
                actual: format!("{b}x{h}x{w}x{c}"),
            });
        }
        Ok(batch
            .view()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned())
    }

    pub fn params_digest(&self) -> u64 {
        params_digest(&self.stack.params())
    }
}

/// Deterministic feature forward: `batch` is B x H x W x 3, the result B x D.
pub fn forward_features<T: Scalar>(
    extractor: &FeatureExtractor<T>,
    batch: &Array4<T>,
) -> Result<Array2<T>> {
    let input = extractor.check_batch(batch)?;
    Ok(extractor.stack.forward_eval(Value::Map(input)).into_vector())
}

/// Late-fusion strategy for combining per-view feature vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// Concatenate the two vectors (output dimension 2D); a trainable dense
    /// layer maps back to D before the head.
    Concat,
    /// Element-wise maximum across the stacked vectors (output dimension D).
    MaxPool,
}

impl FusionStrategy {
    pub fn fused_dim(self, feature_dim: usize) -> usize {
        match self {
            FusionStrategy::Concat => 2 * feature_dim,
            FusionStrategy::MaxPool => feature_dim,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::Concat => "concat",
            FusionStrategy::MaxPool => "maxpool",
        }
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionStrategy::Concat),
            "maxpool" => Ok(FusionStrategy::MaxPool),
            other => Err(Error::Config(format!("unknown fusion strategy {other:?}"))),
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fuses two B x D feature batches into B x D' (D' per the strategy).
pub fn fuse<T: Scalar>(
    features_a: &Array2<T>,
    features_b: &Array2<T>,
    strategy: FusionStrategy,
) -> Result<Array2<T>> {
    if features_a.dim() != features_b.dim() {
        return Err(Error::Shape {
            context: "fuse".into(),
            expected: format!("{:?}", features_a.dim()),
            actual: format!("{:?}", features_b.dim()),
        });
    }
    let (batch, dim) = features_a.dim();
    Ok(match strategy {
        FusionStrategy::Concat => {
            let mut out = Array2::zeros((batch, 2 * dim));
            out.slice_mut(ndarray::s![.., ..dim]).assign(features_a);
            out.slice_mut(ndarray::s![.., dim..]).assign(features_b);
            out
        }
        FusionStrategy::MaxPool => {
            let mut out = features_a.clone();
            out.zip_mut_with(features_b, |a, &b| {
                if b > *a {
                    *a = b;
                }
            });
            out
        }
    })
}

/// Gradient of [`fuse`] with respect to both inputs. Max-pool routes each
/// element's gradient to the argmax input; ties go to `features_a`.
pub fn fuse_backward<T: Scalar>(
    grad_fused: &Array2<T>,
    features_a: &Array2<T>,
    features_b: &Array2<T>,
    strategy: FusionStrategy,
) -> (Array2<T>, Array2<T>) {
    let (batch, dim) = features_a.dim();
    match strategy {
        FusionStrategy::Concat => (
            grad_fused.slice(ndarray::s![.., ..dim]).to_owned(),
            grad_fused.slice(ndarray::s![.., dim..]).to_owned(),
        ),
        FusionStrategy::MaxPool => {
            let mut grad_a = Array2::zeros((batch, dim));
            let mut grad_b = Array2::zeros((batch, dim));
            for i in 0..batch {
                for j in 0..dim {
                    if features_a[[i, j]] >= features_b[[i, j]] {
                        grad_a[[i, j]] = grad_fused[[i, j]];
                    } else {
                        grad_b[[i, j]] = grad_fused[[i, j]];
                    }
                }
            }
            (grad_a, grad_b)
        }
    }
}

/// Classifier head architecture: vector layers ending in a dense layer with
/// one output per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub layers: Vec<LayerSpec>,
}

impl HeadConfig {
    /// The default head: ReLU then a dense projection onto the classes.
    pub fn default_for(num_classes: usize) -> Self {
        HeadConfig {
            layers: vec![LayerSpec::Relu, LayerSpec::dense(num_classes)],
        }
    }

    pub fn validate(&self, input_dim: usize, num_classes: usize) -> Result<usize> {
        let mut shape = Shape::Vector { len: input_dim };
        for (idx, spec) in self.layers.iter().enumerate() {
            match spec {
                LayerSpec::Dense { .. } | LayerSpec::Relu | LayerSpec::Dropout { .. } => {}
                other => {
                    return Err(Error::Config(format!(
                        "head layer {idx}: {} not allowed in a classifier head",
                        other_kind(other)
                    )))
                }
            }
            shape = infer_shape(shape, spec, idx)?;
        }
        match (self.layers.last(), shape) {
            (Some(LayerSpec::Dense { .. }), Shape::Vector { len }) if len == num_classes => Ok(len),
            (_, shape) => Err(Error::Config(format!(
                "head must end in a dense layer with {num_classes} outputs, got {}",
                shape.describe()
            ))),
        }
    }
}

fn other_kind(spec: &LayerSpec) -> &'static str {
    match spec {
        LayerSpec::Conv { .. } => "conv",
        LayerSpec::MaxPool { .. } => "maxpool",
        LayerSpec::Flatten => "flatten",
        _ => "layer",
    }
}

/// A parameterized classifier head.
#[derive(Debug, Clone)]
pub struct ClassifierHead<T> {
    pub config: HeadConfig,
    pub stack: Stack<T>,
    pub num_classes: usize,
}

pub fn build_head<T: Scalar>(
    input_dim: usize,
    num_classes: usize,
    config: &HeadConfig,
    init_seed: u64,
) -> Result<ClassifierHead<T>> {
    config.validate(input_dim, num_classes)?;
    let mut rng = rng_for(init_seed);
    let stack = Stack::from_specs(Shape::Vector { len: input_dim }, &config.layers, &mut rng)?;
    Ok(ClassifierHead {
        config: config.clone(),
        stack,
        num_classes,
    })
}

/// Runs the head and softmax: rows of the result are probability vectors.
pub fn classify<T: Scalar>(features: &Array2<T>, head: &ClassifierHead<T>) -> Result<Array2<T>> {
    let expected = match head.stack.input_shape {
        Shape::Vector { len } => len,
        _ => unreachable!("heads take vector inputs"),
    };
    if features.dim().1 != expected {
        return Err(Error::Shape {
            context: "classify".into(),
            expected: format!("Bx{expected}"),
            actual: format!("{}x{}", features.dim().0, features.dim().1),
        });
    }
    let logits = head
        .stack
        .forward_eval(Value::Vector(features.clone()))
        .into_vector();
    Ok(softmax_rows(&logits))
}

/// A single-view classifier: backbone plus head, trained jointly.
#[derive(Debug, Clone)]
pub struct SingleViewModel<T> {
    pub extractor: FeatureExtractor<T>,
    pub head: ClassifierHead<T>,
}

impl<T: Scalar> SingleViewModel<T> {
    /// Class probabilities for an NHWC batch.
    pub fn predict(&self, batch: &Array4<T>) -> Result<Array2<T>> {
        let features = forward_features(&self.extractor, batch)?;
        classify(&features, &self.head)
    }
}

/// The two-branch late-fusion model: both branches are frozen duplicates of
/// one pretrained extractor; only fusion-adjacent and head parameters train.
#[derive(Debug, Clone)]
pub struct MultiViewModel<T> {
    pub branch_surface: FeatureExtractor<T>,
    pub branch_section: FeatureExtractor<T>,
    pub fusion: FusionStrategy,
    /// Present only for concat fusion: trainable dense layer 2D -> D.
    pub fusion_dense: Option<Layer<T>>,
    pub head: ClassifierHead<T>,
}

impl<T: Scalar> MultiViewModel<T> {
    /// Post-fusion feature vectors (before the concat dense layer, when any).
    pub fn fused_features(&self, surface: &Array4<T>, section: &Array4<T>) -> Result<Array2<T>> {
        let features_s = forward_features(&self.branch_surface, surface)?;
        let features_c = forward_features(&self.branch_section, section)?;
        fuse(&features_s, &features_c, self.fusion)
    }

    /// Class probabilities for a pair of NHWC batches (surface, section).
    pub fn predict(&self, surface: &Array4<T>, section: &Array4<T>) -> Result<Array2<T>> {
        let fused = self.fused_features(surface, section)?;
        let head_input = match &self.fusion_dense {
            Some(dense) => dense
                .forward(Value::Vector(fused), &mut ForwardOpts::eval())
                .0
                .into_vector(),
            None => fused,
        };
        classify(&head_input, &self.head)
    }

    pub fn branch_digests(&self) -> (u64, u64) {
        (
            self.branch_surface.params_digest(),
            self.branch_section.params_digest(),
        )
    }

    /// All trainable parameter views: fusion dense (if any) then head.
    pub fn trainable_params_mut(&mut self) -> Vec<ndarray::ArrayViewMutD<'_, T>> {
        let mut params = Vec::new();
        if let Some(dense) = &mut self.fusion_dense {
            params.extend(dense.params_mut());
        }
        params.extend(self.head.stack.params_mut());
        params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array4};
    use rand::Rng;

    #[test]
    fn mini_forward_yields_batch_by_feature_dim() {
        let config = BackboneConfig::mini();
        let extractor = build_backbone::<f32>(&config, 1).unwrap();
        let batch = Array4::<f32>::zeros((2, 64, 64, 3));
        let features = forward_features(&extractor, &batch).unwrap();
        assert_eq!(features.dim(), (2, 128));
    }

    #[test]
    fn same_seed_builds_bitwise_identical_parameters() {
        let config = BackboneConfig::mini();
        let a = build_backbone::<f32>(&config, 7).unwrap();
        let b = build_backbone::<f32>(&config, 7).unwrap();
        assert_eq!(a.params_digest(), b.params_digest());
        let c = build_backbone::<f32>(&config, 8).unwrap();
        assert_ne!(a.params_digest(), c.params_digest());
    }

    #[test]
    fn inconsistent_dense_input_is_a_construction_error_citing_the_layer() {
        let mut config = BackboneConfig::mini();
        // Declares 4096 inputs where flatten produces 2048.
        let last = config.layers.len() - 1;
        config.layers[last] = LayerSpec::Dense {
            out_features: 128,
            in_features: Some(4096),
        };
        let err = build_backbone::<f32>(&config, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&format!("layer {last}")), "got: {msg}");
        assert!(msg.contains("4096"), "got: {msg}");
    }

    #[test]
    fn zero_input_through_bias_free_network_is_zero() {
        let config = BackboneConfig::mini();
        let mut extractor = build_backbone::<f64>(&config, 3).unwrap();
        let names = extractor.stack.param_names();
        for (name, mut param) in names.iter().zip(extractor.stack.params_mut()) {
            if name.ends_with(".bias") {
                param.fill(0.0);
            }
        }
        let batch = Array4::<f64>::zeros((2, 64, 64, 3));
        let features = forward_features(&extractor, &batch).unwrap();
        assert!(features.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn features_are_batch_independent() {
        let config = BackboneConfig::mini();
        let extractor = build_backbone::<f32>(&config, 5).unwrap();
        let mut rng = rng_for(99);
        let batch4 =
            Array4::<f32>::from_shape_simple_fn((4, 64, 64, 3), || rng.random_range(-1.0..1.0));
        let single = batch4.slice(ndarray::s![1..2, .., .., ..]).to_owned();
        let f4 = forward_features(&extractor, &batch4).unwrap();
        let f1 = forward_features(&extractor, &single).unwrap();
        for j in 0..128 {
            assert!((f4[[1, j]] - f1[[0, j]]).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_shape_mismatch_names_expected_and_actual() {
        let extractor = build_backbone::<f32>(&BackboneConfig::mini(), 1).unwrap();
        let batch = Array4::<f32>::zeros((1, 32, 32, 3));
        let err = forward_features(&extractor, &batch).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("Bx64x64x3"), "got: {msg}");
        assert!(msg.contains("1x32x32x3"), "got: {msg}");
    }

    #[test]
    fn fuse_examples() {
        let a = Array2::from_shape_vec((1, 2), vec![1.0f64, 2.0]).unwrap();
        let b = Array2::from_shape_vec((1, 2), vec![2.0f64, 1.0]).unwrap();
        let maxed = fuse(&a, &b, FusionStrategy::MaxPool).unwrap();
        assert_eq!(maxed.as_slice().unwrap(), &[2.0, 2.0]);

        let same = fuse(&a, &a, FusionStrategy::MaxPool).unwrap();
        assert_eq!(same, a);

        let b2 = Array2::from_shape_vec((1, 2), vec![3.0f64, 4.0]).unwrap();
        let cat = fuse(&a, &b2, FusionStrategy::Concat).unwrap();
        assert_eq!(cat.as_slice().unwrap(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn fuse_rejects_mismatched_shapes() {
        let a = Array2::<f32>::zeros((2, 3));
        let b = Array2::<f32>::zeros((2, 4));
        assert!(fuse(&a, &b, FusionStrategy::MaxPool).is_err());
    }

    #[test]
    fn classify_rows_are_probabilities() {
        let head = build_head::<f64>(16, 6, &HeadConfig::default_for(6), 2).unwrap();
        let mut rng = rng_for(4);
        let features = Array2::from_shape_simple_fn((5, 16), || rng.random_range(-2.0..2.0));
        let probs = classify(&features, &head).unwrap();
        for row in probs.rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn zeroed_final_dense_gives_uniform_probabilities() {
        let mut head = build_head::<f64>(16, 4, &HeadConfig::default_for(4), 2).unwrap();
        for mut param in head.stack.params_mut() {
            param.fill(0.0);
        }
        let features =
            Array2::from_shape_vec((1, 16), (0..16).map(|i| i as f64).collect()).unwrap();
        let probs = classify(&features, &head).unwrap();
        for &p in probs.iter() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let logits = Array2::from_shape_vec((1, 3), vec![0.3f64, -1.2, 2.0]).unwrap();
        let shifted = logits.mapv(|v| v + 17.5);
        let a = softmax_rows(&logits);
        let b = softmax_rows(&shifted);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn shipped_configs_are_shape_consistent() {
        for config in [
            BackboneConfig::mini(),
            BackboneConfig::alexnet_like(),
            BackboneConfig::vgg16_like(),
        ] {
            let shape = config.check_shapes().unwrap();
            assert_eq!(
                shape,
                Shape::Vector {
                    len: config.feature_dim
                }
            );
        }
    }

    #[test]
    fn shipped_configs_forward_to_batch_by_feature_dim() {
        let mut rng = rng_for(12);
        for config in [
            BackboneConfig::mini(),
            BackboneConfig::alexnet_like(),
            BackboneConfig::vgg16_like(),
        ] {
            let extractor = build_backbone::<f32>(&config, 6).unwrap();
            let size = config.input_size;
            let batch = Array4::<f32>::from_shape_simple_fn((1, size, size, 3), || {
                rng.random_range(-1.0..1.0)
            });
            let features = forward_features(&extractor, &batch).unwrap();
            assert_eq!(features.dim(), (1, config.feature_dim), "{}", config.family);
        }
    }
}
