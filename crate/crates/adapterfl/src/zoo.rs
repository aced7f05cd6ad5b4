//! Prototype model constructors and their eligible partition boundaries.
//!
//! Three zoo groups:
//! - `standard`: CNN-S / MobileNetV2 / ResNet18 (CIFAR-adapted, 32x32)
//! - `large`:    MobileNetV2 / ResNet18 / VGG16
//! - `toy`:      three small CNNs for fast synthetic-data experiments
//!
//! Every cut candidate sits on a closed sub-block boundary with a spatial
//! activation, so both resulting blocks are nonempty and an adapter can be
//! attached.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::nn::{GraphSpec, LayerSpec, ModelGraph, ShapeKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    CnnS,
    MobileNetV2,
    ResNet18,
    Vgg16,
    TinyS,
    TinyM,
    TinyL,
}

impl ArchId {
    pub fn parse(s: &str) -> Result<ArchId> {
        match s {
            "cnn_s" => Ok(ArchId::CnnS),
            "mobilenet_v2" => Ok(ArchId::MobileNetV2),
            "resnet18" => Ok(ArchId::ResNet18),
            "vgg16" => Ok(ArchId::Vgg16),
            "tiny_s" => Ok(ArchId::TinyS),
            "tiny_m" => Ok(ArchId::TinyM),
            "tiny_l" => Ok(ArchId::TinyL),
            other => Err(Error::UnknownArch(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ArchId::CnnS => "cnn_s",
            ArchId::MobileNetV2 => "mobilenet_v2",
            ArchId::ResNet18 => "resnet18",
            ArchId::Vgg16 => "vgg16",
            ArchId::TinyS => "tiny_s",
            ArchId::TinyM => "tiny_m",
            ArchId::TinyL => "tiny_l",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SizeLevel {
    S,
    M,
    L,
}

impl SizeLevel {
    pub fn letter(&self) -> &'static str {
        match self {
            SizeLevel::S => "S",
            SizeLevel::M => "M",
            SizeLevel::L => "L",
        }
    }
    pub fn all() -> [SizeLevel; 3] {
        [SizeLevel::S, SizeLevel::M, SizeLevel::L]
    }
    pub fn parse(s: &str) -> Result<SizeLevel> {
        match s {
            "S" | "s" => Ok(SizeLevel::S),
            "M" | "m" => Ok(SizeLevel::M),
            "L" | "l" => Ok(SizeLevel::L),
            other => Err(Error::InvalidConfig(format!("unknown size level `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZooGroup {
    Standard,
    Large,
    Toy,
}

impl ZooGroup {
    pub fn parse(s: &str) -> Result<ZooGroup> {
        match s {
            "standard" => Ok(ZooGroup::Standard),
            "large" => Ok(ZooGroup::Large),
            "toy" => Ok(ZooGroup::Toy),
            other => Err(Error::InvalidConfig(format!("unknown zoo group `{other}`"))),
        }
    }

    pub fn archs(&self) -> [ArchId; 3] {
        match self {
            ZooGroup::Standard => [ArchId::CnnS, ArchId::MobileNetV2, ArchId::ResNet18],
            ZooGroup::Large => [ArchId::MobileNetV2, ArchId::ResNet18, ArchId::Vgg16],
            ZooGroup::Toy => [ArchId::TinyS, ArchId::TinyM, ArchId::TinyL],
        }
    }

    /// Natural input resolution of the group's constructors.
    pub fn default_input(&self) -> (usize, usize, usize) {
        match self {
            ZooGroup::Standard | ZooGroup::Large => (3, 32, 32),
            ZooGroup::Toy => (3, 8, 8),
        }
    }
}

/// A candidate architecture together with the layer boundaries eligible as
/// partition points.
#[derive(Debug, Clone)]
pub struct PrototypeModel {
    pub arch: ArchId,
    pub level: SizeLevel,
    pub graph: ModelGraph<f32>,
    /// Strictly increasing boundary indices `f` (ex block = `layers[..f]`),
    /// excluding 0 and the final boundary.
    pub cut_candidates: Vec<usize>,
}

impl PrototypeModel {
    pub fn param_count(&self) -> usize {
        self.graph.param_count()
    }
}

struct SpecBuilder {
    layers: Vec<LayerSpec>,
    shape: ShapeKind,
    cuts: Vec<usize>,
}

impl SpecBuilder {
    fn new(input: (usize, usize, usize)) -> Self {
        SpecBuilder {
            layers: Vec::new(),
            shape: ShapeKind::Spatial { c: input.0, h: input.1, w: input.2 },
            cuts: Vec::new(),
        }
    }
    fn push(&mut self, spec: LayerSpec) -> Result<&mut Self> {
        self.shape = spec.out_shape(self.shape)?;
        self.layers.push(spec);
        Ok(self)
    }
    /// Mark the boundary after the last pushed layer as a cut candidate.
    fn cut(&mut self) -> &mut Self {
        self.cuts.push(self.layers.len());
        self
    }
    fn flat(&self) -> usize {
        match self.shape {
            ShapeKind::Flat { d } => d,
            s => panic!("flat shape expected, got {s:?}"),
        }
    }
}

fn conv_bn_relu(b: &mut SpecBuilder, in_ch: usize, out_ch: usize) -> Result<()> {
    b.push(LayerSpec::Conv2d { in_ch, out_ch, kernel: 3, stride: 1, pad: 1, groups: 1, bias: true })?;
    b.push(LayerSpec::BatchNorm2d { ch: out_ch })?;
    b.push(LayerSpec::ReLU)?;
    Ok(())
}

fn basic_block(b: &mut SpecBuilder, in_ch: usize, out_ch: usize, stride: usize) -> Result<()> {
    b.push(LayerSpec::Residual {
        main: vec![
            LayerSpec::Conv2d { in_ch, out_ch, kernel: 3, stride, pad: 1, groups: 1, bias: false },
            LayerSpec::BatchNorm2d { ch: out_ch },
            LayerSpec::ReLU,
            LayerSpec::Conv2d {
                in_ch: out_ch,
                out_ch,
                kernel: 3,
                stride: 1,
                pad: 1,
                groups: 1,
                bias: false,
            },
            LayerSpec::BatchNorm2d { ch: out_ch },
        ],
        projection: stride != 1 || in_ch != out_ch,
    })?;
    Ok(())
}

/// CNN-S: two 5x5 convolutions with pooling and a 384-wide hidden dense
/// layer. Widths are fixed so the 10-class 32x32 build lands near 0.21 M
/// parameters.
fn cnn_s(b: &mut SpecBuilder, num_classes: usize) -> Result<()> {
    b.push(LayerSpec::Conv2d { in_ch: 3, out_ch: 32, kernel: 5, stride: 1, pad: 2, groups: 1, bias: true })?;
    b.push(LayerSpec::ReLU)?;
    b.cut();
    b.push(LayerSpec::MaxPool { kernel: 2, stride: 2 })?;
    b.cut();
    b.push(LayerSpec::Conv2d { in_ch: 32, out_ch: 32, kernel: 5, stride: 1, pad: 2, groups: 1, bias: true })?;
    b.push(LayerSpec::ReLU)?;
    b.cut();
    b.push(LayerSpec::MaxPool { kernel: 4, stride: 4 })?;
    b.cut();
    b.push(LayerSpec::Flatten)?;
    let d = b.flat();
    b.push(LayerSpec::Dense { in_features: d, out_features: 384 })?;
    b.push(LayerSpec::ReLU)?;
    b.push(LayerSpec::Dense { in_features: 384, out_features: num_classes })?;
    Ok(())
}

/// CIFAR-adapted ResNet18: 3x3 stride-1 stem, no initial downsampling,
/// stages 64/128/256/512 with two basic blocks each. Cut candidates sit
/// after the stem and after each stage.
fn resnet18(b: &mut SpecBuilder, num_classes: usize) -> Result<()> {
    b.push(LayerSpec::Conv2d { in_ch: 3, out_ch: 64, kernel: 3, stride: 1, pad: 1, groups: 1, bias: false })?;
    b.push(LayerSpec::BatchNorm2d { ch: 64 })?;
    b.push(LayerSpec::ReLU)?;
    b.cut(); // after stem
    let stages = [(64usize, 64usize, 1usize), (64, 128, 2), (128, 256, 2), (256, 512, 2)];
    for (in_ch, out_ch, stride) in stages {
        basic_block(b, in_ch, out_ch, stride)?;
        basic_block(b, out_ch, out_ch, 1)?;
        b.cut(); // after stage
    }
    b.push(LayerSpec::GlobalAvgPool)?;
    b.push(LayerSpec::Dense { in_features: 512, out_features: num_classes })?;
    Ok(())
}

/// CIFAR-adapted MobileNetV2: stride-1 3x3 stem, inverted residual stages
/// (the two 32x32-resolution stages keep stride 1), 1280-wide head.
fn mobilenet_v2(b: &mut SpecBuilder, num_classes: usize) -> Result<()> {
    b.push(LayerSpec::Conv2d { in_ch: 3, out_ch: 32, kernel: 3, stride: 1, pad: 1, groups: 1, bias: false })?;
    b.push(LayerSpec::BatchNorm2d { ch: 32 })?;
    b.push(LayerSpec::ReLU6)?;
    b.cut(); // after stem
    // (expand, out_ch, repeats, first stride)
    let cfg = [(1, 16, 1, 1), (6, 24, 2, 1), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)];
    let mut in_ch = 32;
    for (expand, out_ch, repeats, first_stride) in cfg {
        for r in 0..repeats {
            let stride = if r == 0 { first_stride } else { 1 };
            b.push(LayerSpec::InvertedResidual { in_ch, out_ch, expand, stride })?;
            b.cut(); // after every block
            in_ch = out_ch;
        }
    }
    b.push(LayerSpec::Conv2d { in_ch: 320, out_ch: 1280, kernel: 1, stride: 1, pad: 0, groups: 1, bias: false })?;
    b.push(LayerSpec::BatchNorm2d { ch: 1280 })?;
    b.push(LayerSpec::ReLU6)?;
    b.push(LayerSpec::GlobalAvgPool)?;
    b.push(LayerSpec::Dense { in_features: 1280, out_features: num_classes })?;
    Ok(())
}

/// CIFAR-adapted VGG16 with batch norm and the 4096-wide classifier head.
/// Cut candidates sit after each pooling stage.
fn vgg16(b: &mut SpecBuilder, num_classes: usize) -> Result<()> {
    let stages: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
    let mut in_ch = 3;
    for (out_ch, convs) in stages {
        for _ in 0..convs {
            conv_bn_relu(b, in_ch, out_ch)?;
            in_ch = out_ch;
        }
        b.push(LayerSpec::MaxPool { kernel: 2, stride: 2 })?;
        b.cut(); // after each stage's pool
    }
    b.push(LayerSpec::Flatten)?;
    let d = b.flat();
    b.push(LayerSpec::Dense { in_features: d, out_features: 4096 })?;
    b.push(LayerSpec::ReLU)?;
    b.push(LayerSpec::Dense { in_features: 4096, out_features: 4096 })?;
    b.push(LayerSpec::ReLU)?;
    b.push(LayerSpec::Dense { in_features: 4096, out_features: num_classes })?;
    Ok(())
}

fn tiny_s(b: &mut SpecBuilder, num_classes: usize) -> Result<()> {
    b.push(LayerSpec::Conv2d { in_ch: 3, out_ch: 8, kernel: 3, stride: 1, pad: 1, groups: 1, bias: true })?;
    b.push(LayerSpec::ReLU)?;
    b.cut();
    b.push(LayerSpec::MaxPool { kernel: 2, stride: 2 })?;
    b.cut();
    b.push(LayerSpec::Conv2d { in_ch: 8, out_ch: 16, kernel: 3, stride: 1, pad: 1, groups: 1, bias: true })?;
    b.push(LayerSpec::ReLU)?;
    b.cut();
    b.push(LayerSpec::Flatten)?;
    let d = b.flat();
    b.push(LayerSpec::Dense { in_features: d, out_features: num_classes })?;
    Ok(())
}

fn tiny_m(b: &mut SpecBuilder, num_classes: usize) -> Result<()> {
    b.push(LayerSpec::Conv2d { in_ch: 3, out_ch: 16, kernel: 3, stride: 1, pad: 1, groups: 1, bias: true })?;
    b.push(LayerSpec::ReLU)?;
    b.cut();
    b.push(LayerSpec::MaxPool { kernel: 2, stride: 2 })?;
    b.cut();
    b.push(LayerSpec::Conv2d { in_ch: 16, out_ch: 32, kernel: 3, stride: 1, pad: 1, groups: 1, bias: true })?;
    b.push(LayerSpec::ReLU)?;
    b.cut();
    b.push(LayerSpec::Conv2d { in_ch: 32, out_ch: 32, kernel: 3, stride: 1, pad: 1, groups: 1, bias: true })?;
    b.push(LayerSpec::ReLU)?;
    b.cut();
    b.push(LayerSpec::Flatten)?;
    let d = b.flat();
    b.push(LayerSpec::Dense { in_features: d, out_features: 64 })?;
    b.push(LayerSpec::ReLU)?;
    b.push(LayerSpec::Dense { in_features: 64, out_features: num_classes })?;
    Ok(())
}

fn tiny_l(b: &mut SpecBuilder, num_classes: usize) -> Result<()> {
    b.push(LayerSpec::Conv2d { in_ch: 3, out_ch: 24, kernel: 3, stride: 1, pad: 1, groups: 1, bias: false })?;
    b.push(LayerSpec::BatchNorm2d { ch: 24 })?;
    b.push(LayerSpec::ReLU)?;
    b.cut();
    b.push(LayerSpec::MaxPool { kernel: 2, stride: 2 })?;
    b.cut();
    basic_block(b, 24, 48, 1)?;
    b.cut();
    basic_block(b, 48, 48, 1)?;
    b.cut();
    b.push(LayerSpec::Flatten)?;
    let d = b.flat();
    b.push(LayerSpec::Dense { in_features: d, out_features: 96 })?;
    b.push(LayerSpec::ReLU)?;
    b.push(LayerSpec::Dense { in_features: 96, out_features: num_classes })?;
    Ok(())
}

/// Build one prototype with freshly initialized weights.
pub fn build(
    arch: ArchId,
    num_classes: usize,
    input_shape: (usize, usize, usize),
    seed: u64,
) -> Result<PrototypeModel> {
    if num_classes < 2 {
        return Err(Error::InvalidConfig(format!("need >= 2 classes, got {num_classes}")));
    }
    let mut b = SpecBuilder::new(input_shape);
    let level = match arch {
        ArchId::CnnS => {
            cnn_s(&mut b, num_classes)?;
            SizeLevel::S
        }
        ArchId::MobileNetV2 => {
            mobilenet_v2(&mut b, num_classes)?;
            SizeLevel::M
        }
        ArchId::ResNet18 => {
            resnet18(&mut b, num_classes)?;
            SizeLevel::L
        }
        ArchId::Vgg16 => {
            vgg16(&mut b, num_classes)?;
            SizeLevel::L
        }
        ArchId::TinyS => {
            tiny_s(&mut b, num_classes)?;
            SizeLevel::S
        }
        ArchId::TinyM => {
            tiny_m(&mut b, num_classes)?;
            SizeLevel::M
        }
        ArchId::TinyL => {
            tiny_l(&mut b, num_classes)?;
            SizeLevel::L
        }
    };
    let n_layers = b.layers.len();
    let spec = GraphSpec {
        input_shape,
        num_classes,
        layers: b.layers,
        segments: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = ModelGraph::from_spec(&spec, &mut rng)?;
    let cuts = b.cuts;
    debug_assert!(!cuts.is_empty());
    debug_assert!(cuts.windows(2).all(|w| w[0] < w[1]));
    debug_assert!(cuts.iter().all(|&f| f > 0 && f < n_layers));
    Ok(PrototypeModel { arch, level, graph, cut_candidates: cuts })
}

/// The three prototypes of a group, ordered S < M < L by parameter count,
/// with per-model seeds derived from `seed`.
pub fn default_zoo(
    group: ZooGroup,
    num_classes: usize,
    input_shape: (usize, usize, usize),
    seed: u64,
) -> Result<Vec<PrototypeModel>> {
    let mut models: Vec<PrototypeModel> = group
        .archs()
        .iter()
        .enumerate()
        .map(|(i, &arch)| build(arch, num_classes, input_shape, derive_seed(seed, &[i as u64])))
        .collect::<Result<_>>()?;
    models.sort_by_key(|m| m.param_count());
    for (m, level) in models.iter_mut().zip(SizeLevel::all()) {
        m.level = level;
    }
    Ok(models)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::Tensor;

    fn within(value: usize, target: f64, tol: f64) -> bool {
        let v = value as f64;
        (v - target).abs() <= target * tol
    }

    #[test]
    fn unknown_arch_errors() {
        assert!(matches!(ArchId::parse("resnet99"), Err(Error::UnknownArch(_))));
    }

    #[test]
    fn conv_param_count_arithmetic() {
        // Conv2d(3 -> 8, k3, bias): 3*8*9 + 8 = 224
        let m = build(ArchId::TinyS, 4, (3, 8, 8), 0).unwrap();
        let mut first_conv = 0usize;
        m.graph.layers[0].visit_params("0", &mut |p| first_conv += p.value.numel());
        assert_eq!(first_conv, 3 * 8 * 9 + 8);
    }

    #[test]
    fn table_param_counts_cifar10() {
        let cnn = build(ArchId::CnnS, 10, (3, 32, 32), 0).unwrap();
        assert_eq!(cnn.param_count(), 228_906);
        assert!(within(cnn.param_count(), 0.21e6, 0.10), "cnn_s {}", cnn.param_count());

        let mnv2 = build(ArchId::MobileNetV2, 10, (3, 32, 32), 0).unwrap();
        assert_eq!(mnv2.param_count(), 2_236_682);
        assert!(within(mnv2.param_count(), 2.25e6, 0.03), "mobilenet_v2 {}", mnv2.param_count());

        let rn = build(ArchId::ResNet18, 10, (3, 32, 32), 0).unwrap();
        assert_eq!(rn.param_count(), 11_173_962);
        assert!(within(rn.param_count(), 11.17e6, 0.03), "resnet18 {}", rn.param_count());

        let vgg = build(ArchId::Vgg16, 10, (3, 32, 32), 0).unwrap();
        assert_eq!(vgg.param_count(), 33_646_666);
        assert!(within(vgg.param_count(), 33.65e6, 0.03), "vgg16 {}", vgg.param_count());
    }

    #[test]
    fn zoo_ordering_and_cut_invariants() {
        for group in [ZooGroup::Standard, ZooGroup::Large, ZooGroup::Toy] {
            let input = group.default_input();
            let zoo = default_zoo(group, 10, input, 7).unwrap();
            assert_eq!(zoo.len(), 3);
            assert!(zoo[0].param_count() < zoo[1].param_count());
            assert!(zoo[1].param_count() < zoo[2].param_count());
            assert_eq!(zoo[0].level, SizeLevel::S);
            assert_eq!(zoo[2].level, SizeLevel::L);
            for m in &zoo {
                assert!(!m.cut_candidates.is_empty());
                let n_layers = m.graph.layers.len();
                let shapes = m.graph.boundary_shapes().unwrap();
                for &f in &m.cut_candidates {
                    assert!(f > 0 && f < n_layers, "{}: cut {f} out of range", m.arch.name());
                    assert!(
                        shapes[f].spatial().is_some(),
                        "{}: cut {f} not spatial",
                        m.arch.name()
                    );
                }
                assert!(m.cut_candidates.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn forward_gives_logits_for_every_arch() {
        // toy group at a real batch, the big ones at batch 2 to keep it quick
        for (group, batch) in [(ZooGroup::Toy, 8), (ZooGroup::Standard, 2)] {
            let input = group.default_input();
            let mut zoo = default_zoo(group, 10, input, 3).unwrap();
            let x = Tensor::filled(&[batch, input.0, input.1, input.2], 0.1f32);
            for m in zoo.iter_mut() {
                let (y, _) = m.graph.forward(x.clone(), Mode::Eval).unwrap();
                assert_eq!(y.shape(), &[batch, 10]);
                assert!(y.is_finite());
            }
        }
    }
}
